//! Model and mask container: magic "LAPNET01", little-endian throughout,
//! per-layer kind tags with shapes and raw 64-bit floats, masks bit-packed
//! with per-layer counts. Round trips are bit-exact.

use crate::error::{LapError, Result};
use crate::mask::Mask;
use crate::network::{ActKind, Layer, Network};
use crate::tensor::{Padding, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LAPNET01";

const KIND_DENSE: u8 = 1;
const KIND_CONV: u8 = 2;
const KIND_BATCHNORM: u8 = 3;
const KIND_ACTIVATION: u8 = 4;
const KIND_MAXPOOL: u8 = 5;
const KIND_FLATTEN: u8 = 6;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_bits().to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_bits(u64::from_le_bytes(b)))
}

fn write_shape(w: &mut impl Write, shape: &[usize]) -> Result<()> {
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u64(w, d as u64)?;
    }
    Ok(())
}

fn read_shape(r: &mut impl Read) -> Result<Vec<usize>> {
    let rank = read_u32(r)?;
    if rank > 8 {
        return Err(LapError::Format(format!("implausible tensor rank {rank}")));
    }
    (0..rank).map(|_| Ok(read_u64(r)? as usize)).collect()
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_shape(w, t.shape())?;
    for &v in t.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let shape = read_shape(r)?;
    let len: usize = shape.iter().product();
    if len > (1 << 30) {
        return Err(LapError::Format(format!("implausible tensor size {len}")));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(read_f64(r)?);
    }
    Tensor::new(shape, data)
}

/// Serialize the network, including any attached masks, to a writer.
pub fn write_model(net: &Network, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    write_shape(w, net.input_shape())?;
    write_u64(w, net.layers().len() as u64)?;
    for layer in net.layers() {
        match layer {
            Layer::Dense { weight, bias } => {
                w.write_all(&[KIND_DENSE])?;
                write_tensor(w, weight)?;
                write_tensor(w, bias)?;
            }
            Layer::Conv2d {
                kernel,
                bias,
                padding,
            } => {
                w.write_all(&[KIND_CONV])?;
                let pad = match padding {
                    Padding::SameZero => 0u8,
                    Padding::Circular => 1u8,
                };
                w.write_all(&[pad])?;
                write_tensor(w, kernel)?;
                write_tensor(w, bias)?;
            }
            Layer::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
                eps,
                momentum,
            } => {
                w.write_all(&[KIND_BATCHNORM])?;
                write_tensor(w, scale)?;
                write_tensor(w, shift)?;
                write_tensor(w, running_mean)?;
                write_tensor(w, running_var)?;
                write_f64(w, *eps)?;
                write_f64(w, *momentum)?;
            }
            Layer::Activation(kind) => {
                w.write_all(&[KIND_ACTIVATION])?;
                let code = match kind {
                    ActKind::Relu => 0u8,
                    ActKind::Sigmoid => 1,
                    ActKind::Tanh => 2,
                    ActKind::Identity => 3,
                };
                w.write_all(&[code])?;
            }
            Layer::MaxPool2d => w.write_all(&[KIND_MAXPOOL])?,
            Layer::Flatten => w.write_all(&[KIND_FLATTEN])?,
        }
    }
    let masks: Vec<&Mask> = net.masks().collect();
    write_u64(w, masks.len() as u64)?;
    for m in masks {
        write_u64(w, m.layer as u64)?;
        write_u64(w, m.bits.len() as u64)?;
        w.write_all(&m.pack_bits())?;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

/// Deserialize a network (with masks) from a reader.
pub fn read_model(r: &mut impl Read) -> Result<Network> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LapError::Format(format!(
            "not a model container: magic {:02x?}",
            magic
        )));
    }
    let input_shape = read_shape(r)?;
    let layer_count = read_u64(r)? as usize;
    if layer_count > 10_000 {
        return Err(LapError::Format(format!(
            "implausible layer count {layer_count}"
        )));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = read_u8(r)?;
        layers.push(match kind {
            KIND_DENSE => Layer::Dense {
                weight: read_tensor(r)?,
                bias: read_tensor(r)?,
            },
            KIND_CONV => {
                let padding = match read_u8(r)? {
                    0 => Padding::SameZero,
                    1 => Padding::Circular,
                    p => return Err(LapError::Format(format!("unknown padding code {p}"))),
                };
                Layer::Conv2d {
                    kernel: read_tensor(r)?,
                    bias: read_tensor(r)?,
                    padding,
                }
            }
            KIND_BATCHNORM => Layer::BatchNorm {
                scale: read_tensor(r)?,
                shift: read_tensor(r)?,
                running_mean: read_tensor(r)?,
                running_var: read_tensor(r)?,
                eps: read_f64(r)?,
                momentum: read_f64(r)?,
            },
            KIND_ACTIVATION => Layer::Activation(match read_u8(r)? {
                0 => ActKind::Relu,
                1 => ActKind::Sigmoid,
                2 => ActKind::Tanh,
                3 => ActKind::Identity,
                a => return Err(LapError::Format(format!("unknown activation code {a}"))),
            }),
            KIND_MAXPOOL => Layer::MaxPool2d,
            KIND_FLATTEN => Layer::Flatten,
            k => return Err(LapError::Format(format!("unknown layer kind tag {k}"))),
        });
    }
    let mut net = Network::new(input_shape, layers)?;
    let mask_count = read_u64(r)? as usize;
    if mask_count > 10_000 {
        return Err(LapError::Format(format!(
            "implausible mask count {mask_count}"
        )));
    }
    let mut masks = Vec::with_capacity(mask_count);
    for _ in 0..mask_count {
        let layer = read_u64(r)? as usize;
        let len = read_u64(r)? as usize;
        let mut packed = vec![0u8; len.div_ceil(8)];
        r.read_exact(&mut packed)?;
        masks.push(Mask::unpack_bits(layer, &packed, len)?);
    }
    net.attach_masks(masks)?;
    Ok(net)
}

/// Write the network to a file.
pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(net, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Read a network from a file.
pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let net = read_model(&mut f)?;
    // Trailing garbage means the file is not what it claims to be.
    let mut probe = [0u8; 1];
    match f.read(&mut probe)? {
        0 => Ok(net),
        _ => Err(LapError::Format("trailing bytes after model data".into())),
    }
}
