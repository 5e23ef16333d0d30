//! Built-in architectures at desk scale, parameterized by input shape and
//! class count so they run on either image data or synthetic blobs.

use crate::error::{LapError, Result};
use crate::network::{glorot_init, ActKind, LayerSpec, NetSpec, Network};
use crate::tensor::Padding;

/// Architecture tags accepted by the pipeline and CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// One 1000-unit hidden layer with no nonlinearity.
    Linear1000,
    /// Four 500-unit ReLU hidden layers.
    FcnPaper,
    /// Two 100-unit ReLU hidden layers.
    FcnSmall,
    /// Six 3x3 conv layers (16,16,32,32,64,64 channels) with three pooling
    /// stages, then two 64-unit dense layers.
    Conv6Small,
}

impl Arch {
    pub const ALL: [Arch; 4] = [
        Arch::Linear1000,
        Arch::FcnPaper,
        Arch::FcnSmall,
        Arch::Conv6Small,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Linear1000 => "linear-1000",
            Arch::FcnPaper => "fcn-paper",
            Arch::FcnSmall => "fcn-small",
            Arch::Conv6Small => "conv6-small",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        Arch::ALL
            .iter()
            .copied()
            .find(|a| a.tag() == s)
            .ok_or_else(|| {
                LapError::InvalidArgument(format!(
                    "unknown architecture '{s}'; expected one of {}",
                    Arch::ALL.map(|a| a.tag()).join(", ")
                ))
            })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Arch::Conv6Small)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

fn dense_stack(
    input_shape: &[usize],
    hidden: &[usize],
    act: Option<ActKind>,
    classes: usize,
) -> NetSpec {
    let mut layers = Vec::new();
    if input_shape.len() > 1 {
        layers.push(LayerSpec::Flatten);
    }
    for &h in hidden {
        layers.push(LayerSpec::Dense { out: h });
        if let Some(a) = act {
            layers.push(LayerSpec::Activation(a));
        }
    }
    layers.push(LayerSpec::Dense { out: classes });
    NetSpec {
        input_shape: input_shape.to_vec(),
        layers,
    }
}

/// Layer recipe for an architecture on the given input shape and classes.
pub fn build_spec(arch: Arch, input_shape: &[usize], classes: usize) -> Result<NetSpec> {
    if classes < 2 {
        return Err(LapError::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    match arch {
        Arch::Linear1000 => Ok(dense_stack(input_shape, &[1000], None, classes)),
        Arch::FcnPaper => Ok(dense_stack(
            input_shape,
            &[500, 500, 500, 500],
            Some(ActKind::Relu),
            classes,
        )),
        Arch::FcnSmall => Ok(dense_stack(
            input_shape,
            &[100, 100],
            Some(ActKind::Relu),
            classes,
        )),
        Arch::Conv6Small => {
            if input_shape.len() != 3 {
                return Err(LapError::Config(format!(
                    "{arch} needs channel-height-width input, got shape {input_shape:?}"
                )));
            }
            let conv = |out_ch: usize| LayerSpec::Conv2d {
                out_ch,
                kh: 3,
                kw: 3,
                padding: Padding::SameZero,
            };
            let relu = || LayerSpec::Activation(ActKind::Relu);
            let mut layers = Vec::new();
            for &ch in &[16usize, 32, 64] {
                layers.extend([conv(ch), relu(), conv(ch), relu(), LayerSpec::MaxPool2d]);
            }
            layers.push(LayerSpec::Flatten);
            for _ in 0..2 {
                layers.push(LayerSpec::Dense { out: 64 });
                layers.push(relu());
            }
            layers.push(LayerSpec::Dense { out: classes });
            Ok(NetSpec {
                input_shape: input_shape.to_vec(),
                layers,
            })
        }
    }
}

/// Initialize an architecture with seeded Glorot weights.
pub fn build(arch: Arch, input_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
    glorot_init(&build_spec(arch, input_shape, classes)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;

    #[test]
    fn tags_round_trip() {
        for a in Arch::ALL {
            assert_eq!(Arch::parse(a.tag()).unwrap(), a);
        }
        assert!(Arch::parse("vgg-19").is_err());
    }

    #[test]
    fn paper_fcn_has_the_paper_weight_count() {
        let net = build(Arch::FcnPaper, &[1, 28, 28], 10, 0).unwrap();
        assert_eq!(net.total_prunable_weights(), 1_147_000);
        assert_eq!(net.prunable().len(), 5);
    }

    #[test]
    fn linear_net_has_no_activations() {
        let net = build(Arch::Linear1000, &[1, 28, 28], 10, 0).unwrap();
        assert!(net
            .layers()
            .iter()
            .all(|l| !matches!(l, Layer::Activation(_))));
        assert_eq!(net.total_prunable_weights(), 784 * 1000 + 1000 * 10);
    }

    #[test]
    fn small_fcn_runs_on_blob_input() {
        let net = build(Arch::FcnSmall, &[16], 4, 1).unwrap();
        assert_eq!(net.class_count().unwrap(), 4);
        let x = crate::tensor::Tensor::zeros(vec![16]);
        let y = net.forward(&x, crate::network::Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[4]);
    }

    #[test]
    fn conv_net_shapes_compose_on_mnist() {
        let net = build(Arch::Conv6Small, &[1, 28, 28], 10, 2).unwrap();
        // 28 -> 14 -> 7 -> 3 spatial; 64 channels at the end.
        let shapes = net.layer_shapes();
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        let flat_idx = net
            .layers()
            .iter()
            .position(|l| matches!(l, Layer::Flatten))
            .unwrap();
        assert_eq!(shapes[flat_idx], vec![64 * 3 * 3]);
        assert_eq!(net.prunable().len(), 9);
    }

    #[test]
    fn conv_arch_rejects_flat_input() {
        match build(Arch::Conv6Small, &[16], 4, 0) {
            Err(LapError::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
    }
}
