//! Dense row-major `f32` tensors and the raw forward/backward kernels the
//! tape is built from.
//!
//! The kernels here know nothing about gradients flowing through a graph;
//! they are plain functions over slices. [`crate::autograd`] wires them up.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    /// Builds a `rows x cols` matrix from nested rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![0],
            reason: "cannot stack zero tensors".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("row() on scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [m, n] = dims2(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [m, n] => Ok([m, n]),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a rank-2 tensor"),
        }),
    }
}

/// Standard matrix product of `a: m x k` and `b: k x n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = dims2(a, "matmul")?;
    let [k2, n] = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a · b` with `a: m x k`, `b: k x n`.
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m x k`, `b: n x k`.
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f32>();
        }
    }
}

/// `out += aᵀ · b` with `a: k x m`, `b: k x n`.
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], out: &mut [f32], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output spatial size of a convolution, or an error if the kernel does not
/// fit inside the padded input.
pub fn conv_output_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if kh > ph || kw > pw {
        return Err(Error::KernelTooLarge {
            kernel: [kh, kw],
            padded: [ph, pw],
        });
    }
    if stride == 0 {
        return Err(Error::InvalidShape {
            shape: vec![stride],
            reason: "stride must be positive".into(),
        });
    }
    Ok(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: format!("conv2d expects input b×c×h×w and kernels o×c×kh×kw, kernels {kernels:?}"),
            });
        };
        if kc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernels.to_vec(),
            });
        }
        let (out_h, out_w) = conv_output_size(h, w, kh, kw, stride, padding)?;
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.out_h, self.out_w]
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if it
    /// lands inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&v| v < limit)
    }
}

/// Batched cross-correlation with zero padding.
pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f32], kernels: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; g.batch * g.c_out * g.out_h * g.out_w];
    let in_plane = g.h * g.w;
    let k_plane = g.kh * g.kw;
    let out_plane = g.out_h * g.out_w;
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let dst = &mut out[(b * g.c_out + o) * out_plane..][..out_plane];
            for c in 0..g.c_in {
                let src = &input[(b * g.c_in + c) * in_plane..][..in_plane];
                let ker = &kernels[(o * g.c_in + c) * k_plane..][..k_plane];
                for oy in 0..g.out_h {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.out_w {
                            let mut acc = 0.0;
                            for kx in 0..g.kw {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    acc += src[iy * g.w + ix] * ker[ky * g.kw + kx];
                                }
                            }
                            dst[oy * g.out_w + ox] += acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and kernels.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f32],
    kernels: &[f32],
    grad_out: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut d_in = vec![0.0; input.len()];
    let mut d_k = vec![0.0; kernels.len()];
    let in_plane = g.h * g.w;
    let k_plane = g.kh * g.kw;
    let out_plane = g.out_h * g.out_w;
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let go = &grad_out[(b * g.c_out + o) * out_plane..][..out_plane];
            for c in 0..g.c_in {
                let in_off = (b * g.c_in + c) * in_plane;
                let k_off = (o * g.c_in + c) * k_plane;
                for oy in 0..g.out_h {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.out_w {
                            let gv = go[oy * g.out_w + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for kx in 0..g.kw {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    let ii = in_off + iy * g.w + ix;
                                    let ki = k_off + ky * g.kw + kx;
                                    d_in[ii] += gv * kernels[ki];
                                    d_k[ki] += gv * input[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_in, d_k)
}

/// Single-image convolution: `input: c_in×h×w`, `kernels: c_out×c_in×kh×kw`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: input.shape().to_vec(),
            reason: "conv2d expects c×h×w".into(),
        });
    }
    let mut batched = vec![1];
    batched.extend_from_slice(input.shape());
    let g = ConvGeometry::new(&batched, kernels.shape(), stride, padding)?;
    let out = conv2d_forward(&g, input.data(), kernels.data());
    Tensor::new(vec![g.c_out, g.out_h, g.out_w], out)
}

/// Per-row argmax over the last axis; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient mask of ReLU; zero at exactly zero.
pub fn relu_mask(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Row-wise softmax of `logits / temperature` over the last axis.
pub fn tempered_softmax(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let cols = *logits.shape().last().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "softmax of a scalar".into(),
    })?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_row(row, temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_row(row: &mut [f32], temperature: f32) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
