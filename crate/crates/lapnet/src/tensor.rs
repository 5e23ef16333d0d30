//! Dense row-major f64 tensors and the numerical primitives the rest of the
//! toolkit builds on.
//!
//! Conventions: dense weight matrices are (out, in); conv kernels are
//! (out_ch, in_ch, kh, kw). `W[j, :]` (everything attached to output unit j)
//! is therefore a contiguous slice.

use crate::error::{LapError, Result};

/// Dimension list; every entry must be >= 1.
pub type Shape = Vec<usize>;

/// Padding mode for stride-1 cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output spatial size equals the input's.
    SameZero,
    /// Wrap indices modulo the spatial size.
    Circular,
}

/// Dense n-dimensional array of f64, flat row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(LapError::Shape(format!(
                "dimensions must be nonempty and positive, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(LapError::Shape(format!(
                "data length {} does not match shape {:?} (= {} entries)",
                data.len(),
                shape,
                expect
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LapError::Shape("tensor entries must be finite".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Shape) -> Tensor {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// All-ones tensor of the given shape.
    pub fn ones(shape: Shape) -> Tensor {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        Tensor {
            shape,
            data: vec![1.0; n],
        }
    }

    /// Fill from a function of the flat index.
    pub fn from_fn(shape: Shape, f: impl FnMut(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        Tensor {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same data, different shape; lengths must agree.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Flat offset of a 2-D index; caller guarantees rank 2.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        r * self.shape[1] + c
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// sqrt of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Per-output-slice Frobenius norms: entry j is the norm of everything
    /// attached to output unit/channel j (axis 0). Requires rank >= 2.
    pub fn out_slice_norms(&self) -> Result<Vec<f64>> {
        if self.rank() < 2 {
            return Err(LapError::Shape(format!(
                "slice norms need rank >= 2, got shape {:?}",
                self.shape
            )));
        }
        let out = self.shape[0];
        let stride = self.len() / out;
        Ok((0..out)
            .map(|j| {
                self.data[j * stride..(j + 1) * stride]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    /// Per-input-slice Frobenius norms: entry k is the norm of everything
    /// attached to input unit/channel k (axis 1). Requires rank >= 2.
    pub fn in_slice_norms(&self) -> Result<Vec<f64>> {
        if self.rank() < 2 {
            return Err(LapError::Shape(format!(
                "slice norms need rank >= 2, got shape {:?}",
                self.shape
            )));
        }
        let out = self.shape[0];
        let inn = self.shape[1];
        let tail: usize = self.shape[2..].iter().product();
        let mut sums = vec![0.0; inn];
        for j in 0..out {
            for k in 0..inn {
                let base = (j * inn + k) * tail;
                let s: f64 = self.data[base..base + tail].iter().map(|v| v * v).sum();
                sums[k] += s;
            }
        }
        Ok(sums.into_iter().map(f64::sqrt).collect())
    }
}

/// Standard 2-D matrix product, (m,k) x (k,n) -> (m,n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(LapError::Shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, ka) = (a.shape[0], a.shape[1]);
    let (kb, n) = (b.shape[0], b.shape[1]);
    if ka != kb {
        return Err(LapError::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, m, ka, n, &mut c);
    Tensor::new(vec![m, n], c)
}

/// c (m,n) += nothing; computes a (m,k) x b (k,n) into c, overwriting.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    c.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ail * bv;
            }
        }
    }
}

/// a (m,k) x b^T where b is (n,k): result (m,n). Row-by-row dot products.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
}

/// a^T x b where a is (k,m), b is (k,n): result (m,n), accumulated row-major.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    c.fill(0.0);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Stride-1 cross-correlation of a (ch,h,w) input with an
/// (out_ch,in_ch,kh,kw) kernel. Output is (out_ch,h,w); the kernel is
/// centered, with out-of-range taps zero-padded or wrapped per `padding`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(LapError::Shape(format!(
            "conv2d input must be (ch,h,w), got {:?}",
            x.shape
        )));
    }
    if kernel.rank() != 4 {
        return Err(LapError::Shape(format!(
            "conv2d kernel must be (out_ch,in_ch,kh,kw), got {:?}",
            kernel.shape
        )));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oc, ic, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if ic != c {
        return Err(LapError::Shape(format!(
            "conv2d channel mismatch: input has {c}, kernel expects {ic}"
        )));
    }
    let mut out = vec![0.0; oc * h * w];
    conv2d_into(&x.data, c, h, w, &kernel.data, oc, kh, kw, padding, &mut out);
    Tensor::new(vec![oc, h, w], out)
}

/// Core correlation loop on raw slices so batched callers avoid realloc.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_into(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    oc: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
    out: &mut [f64],
) {
    let cy = (kh - 1) / 2;
    let cx = (kw - 1) / 2;
    out.fill(0.0);
    for o in 0..oc {
        let kbase_o = o * c * kh * kw;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for i in 0..c {
                    let kbase = kbase_o + i * kh * kw;
                    let xbase = i * h * w;
                    for dy in 0..kh {
                        let sy = y as isize + dy as isize - cy as isize;
                        let sy = match padding {
                            Padding::SameZero => {
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                sy as usize
                            }
                            Padding::Circular => sy.rem_euclid(h as isize) as usize,
                        };
                        for dx in 0..kw {
                            let sx = xx as isize + dx as isize - cx as isize;
                            let sx = match padding {
                                Padding::SameZero => {
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    sx as usize
                                }
                                Padding::Circular => sx.rem_euclid(w as isize) as usize,
                            };
                            acc += kernel[kbase + dy * kw + dx] * x[xbase + sy * w + sx];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
}
