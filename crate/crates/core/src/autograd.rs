//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! immutable once recorded. [`Tape::backward`] walks the tape in reverse and
//! returns a [`Gradients`] table; trainable [`Parameter`]s pull their share
//! out of it with [`Parameter::accumulate`].
//!
//! ```
//! use hallucinet::autograd::Tape;
//! use hallucinet::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let loss = tape.sum(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, dims2, gemm_nt, gemm_tn, ConvGeometry, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: ParamId(next_id()),
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Adds this parameter's gradient from `grads` into `self.grad`.
    /// Frozen parameters are left alone.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if self.frozen {
            return;
        }
        for &(id, node) in &grads.param_nodes {
            if id == self.id {
                if let Some(g) = &grads.grads[node] {
                    self.grad.add_assign(g);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Relu(usize),
    Conv2d {
        input: usize,
        kernels: usize,
        geom: ConvGeometry,
    },
    Reshape(usize),
    Softmax {
        input: usize,
        temperature: f32,
    },
    LogClamp {
        input: usize,
        floor: f32,
    },
    Square(usize),
    Sum(usize),
    ConcatCols(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: next_id(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.nodes[v.idx].param = Some(p.id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = crate::tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.transpose()?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Transpose(ia), rg))
    }

    /// `x[i, j] + bias[j]` for `x: n x m`, `bias: m`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x), self.idx(bias));
        let [_, m] = dims2(&self.nodes[ix].value, "add_row_bias")?;
        let b = &self.nodes[ib].value;
        if b.len() != m || b.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: self.nodes[ix].value.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = self.nodes[ix].value.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(out, Op::AddRowBias(ix, ib), rg))
    }

    /// `x[b, c, y, x] + bias[c]` for a batched feature map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x), self.idx(bias));
        let xs = self.nodes[ix].value.shape().to_vec();
        let b = &self.nodes[ib].value;
        if xs.len() != 4 || b.rank() != 1 || b.len() != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: xs,
                right: b.shape().to_vec(),
            });
        }
        let plane = xs[2] * xs[3];
        let mut out = self.nodes[ix].value.clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[k % xs[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(out, Op::AddChannelBias(ix, ib), rg))
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        let (a, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape("add", ia, ib)?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape("sub", ia, ib)?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape("mul", ia, ib)?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|v| v * factor);
        let rg = self.rg(ia);
        self.push(out, Op::Scale(ia, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = crate::tensor::relu(&self.nodes[ia].value);
        let rg = self.rg(ia);
        self.push(out, Op::Relu(ia), rg)
    }

    /// Batched convolution: `input: b×c×h×w`, `kernels: o×c×kh×kw`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ii, ik) = (self.idx(input), self.idx(kernels));
        let geom = ConvGeometry::new(
            self.nodes[ii].value.shape(),
            self.nodes[ik].value.shape(),
            stride,
            padding,
        )?;
        let out = conv2d_forward(&geom, self.nodes[ii].value.data(), self.nodes[ik].value.data());
        let out = Tensor::new(geom.out_shape(), out)?;
        let rg = self.rg(ii) || self.rg(ik);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: ii,
                kernels: ik,
                geom,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    /// Collapses everything after the leading (batch) axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let batch = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, vec![batch, rest])
    }

    /// Softmax of `a / temperature` over the last axis.
    pub fn softmax(&mut self, a: Var, temperature: f32) -> Result<Var> {
        let ia = self.idx(a);
        let out = crate::tensor::tempered_softmax(&self.nodes[ia].value, temperature)?;
        let rg = self.rg(ia);
        Ok(self.push(
            out,
            Op::Softmax {
                input: ia,
                temperature,
            },
            rg,
        ))
    }

    /// `ln(max(a, floor))`; gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f32) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|v| v.max(floor).ln());
        let rg = self.rg(ia);
        self.push(out, Op::LogClamp { input: ia, floor }, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|v| v * v);
        let rg = self.rg(ia);
        self.push(out, Op::Square(ia), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(ia);
        self.push(out, Op::Sum(ia), rg)
    }

    /// Concatenates two `n x _` matrices column-wise.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let [n, ma] = dims2(&self.nodes[ia].value, "concat_cols")?;
        let [n2, mb] = dims2(&self.nodes[ib].value, "concat_cols")?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: vec![n, ma],
                right: vec![n2, mb],
            });
        }
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = Vec::with_capacity(n * (ma + mb));
        for r in 0..n {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(vec![n, ma + mb], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::ConcatCols(ia, ib), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::BackwardWithoutForward);
        }
        let root = &self.nodes[loss.idx];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let param_nodes = self.nodes[..=loss.idx]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            param_nodes,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let mut send = |i: usize, t: Tensor| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    send(a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    send(b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => send(a, g.transpose().unwrap()),
            Op::AddRowBias(x, b) => {
                send(x, g.clone());
                if self.rg(b) {
                    let m = val(b).len();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(b, Tensor::new(val(b).shape().to_vec(), db).unwrap());
                }
            }
            Op::AddChannelBias(x, b) => {
                send(x, g.clone());
                if self.rg(b) {
                    let s = g.shape();
                    let plane = s[2] * s[3];
                    let mut db = vec![0.0; s[1]];
                    for (k, chunk) in g.data().chunks(plane).enumerate() {
                        db[k % s[1]] += chunk.iter().sum::<f32>();
                    }
                    send(b, Tensor::new(vec![s[1]], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                send(a, g.clone());
                send(b, g.clone());
            }
            Op::Sub(a, b) => {
                send(a, g.clone());
                send(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                send(a, g.zip_map(val(b), |gv, bv| gv * bv));
                send(b, g.zip_map(val(a), |gv, av| gv * av));
            }
            Op::Scale(a, f) => send(a, g.map(|v| v * f)),
            Op::Relu(a) => send(a, g.zip_map(val(a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Conv2d {
                input,
                kernels,
                ref geom,
            } => {
                let (di, dk) = conv2d_backward(geom, val(input).data(), val(kernels).data(), g.data());
                send(input, Tensor::new(val(input).shape().to_vec(), di).unwrap());
                send(kernels, Tensor::new(val(kernels).shape().to_vec(), dk).unwrap());
            }
            Op::Reshape(a) => send(a, g.clone().reshape(val(a).shape().to_vec()).unwrap()),
            Op::Softmax { input, temperature } => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / temperature;
                    }
                }
                send(input, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LogClamp { input, floor } => send(
                input,
                g.zip_map(val(input), |gv, x| if x > floor { gv / x } else { 0.0 }),
            ),
            Op::Square(a) => send(a, g.zip_map(val(a), |gv, x| 2.0 * gv * x)),
            Op::Sum(a) => send(a, Tensor::full(val(a).shape(), g.item())),
            Op::ConcatCols(a, b) => {
                let ma = val(a).shape()[1];
                let mb = val(b).shape()[1];
                let n = g.shape()[0];
                let mut da = Vec::with_capacity(n * ma);
                let mut db = Vec::with_capacity(n * mb);
                for row in g.data().chunks(ma + mb) {
                    da.extend_from_slice(&row[..ma]);
                    db.extend_from_slice(&row[ma..]);
                }
                send(a, Tensor::new(vec![n, ma], da).unwrap());
                send(b, Tensor::new(vec![n, mb], db).unwrap());
            }
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one and
    /// the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}
