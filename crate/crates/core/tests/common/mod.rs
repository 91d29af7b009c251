//! Independent 64-bit reference implementations and a central-difference
//! gradient checker. Nothing here calls the library's numeric kernels.

#![allow(dead_code)]

use hallucinet::autograd::{Tape, Var};
use hallucinet::losses::{
    cross_entropy, gd_loss, gd_loss_with, hallucination_loss, kd_loss, kl_loss, HardLabels, Logits,
    SoftTargets,
};
use hallucinet::{RngState, Tensor};

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 24;

/// A dense f64 array with its shape.
#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn of(t: &Tensor) -> Self {
        Arr {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

pub fn rand_tensor(shape: &[usize], rng: &mut RngState, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinks such as relu.
pub fn rand_away_from_zero(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(0.05, 1.5);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Rows of a probability matrix kept well away from zero, where central
/// differences of `ln p` lose accuracy.
pub fn rand_probs(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f32> = (0..cols).map(|_| rng.uniform(0.5, 1.0)).collect();
        let s: f32 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn rand_one_hot(rows: usize, cols: usize, rng: &mut RngState) -> (Tensor, Vec<usize>) {
    let labels: Vec<usize> = (0..rows).map(|_| rng.below(cols)).collect();
    let mut data = vec![0.0; rows * cols];
    for (r, &l) in labels.iter().enumerate() {
        data[r * cols + l] = 1.0;
    }
    (Tensor::new(vec![rows, cols], data).unwrap(), labels)
}

// ---------------------------------------------------------------------------
// f64 reference kernels, written directly from the definitions.

pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Batched zero-padded cross-correlation. `x: [b, c, h, w]`, `k: [o, c, kh, kw]`.
pub fn ref_conv2d(x: &Arr, k: &Arr, stride: usize, pad: usize) -> Arr {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (y * stride + u) as isize - pad as isize;
                                let ix = (xx * stride + v) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data[((oi * c + ci) * kh + u) * kw + v];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Arr {
        shape: vec![b, o, ho, wo],
        data: out,
    }
}

pub fn ref_softmax_rows(z: &[f64], cols: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(cols) {
        let e: Vec<f64> = row.iter().map(|v| (v / t).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

pub fn ref_cross_entropy(y: &[f64], p: &[f64], cols: usize) -> f64 {
    let batch = (y.len() / cols) as f64;
    -y.iter().zip(p).map(|(a, b)| a * b.max(1e-12).ln()).sum::<f64>() / batch
}

pub fn ref_hall(t: &[f64], s: &[f64], cols: usize) -> f64 {
    let batch = (t.len() / cols) as f64;
    t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / batch
}

pub fn ref_kl(p: &[f64], q: &[f64], cols: usize) -> f64 {
    let batch = (p.len() / cols) as f64;
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            if *a > 0.0 {
                a * (a.ln() - b.max(1e-12).ln())
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / batch
}

pub fn ref_argmax_rows(z: &[f64], cols: usize) -> Vec<usize> {
    z.chunks(cols)
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn ref_one_hot(labels: &[usize], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * cols];
    for (r, &l) in labels.iter().enumerate() {
        out[r * cols + l] = 1.0;
    }
    out
}

/// `λ·T²·KL + (1−λ)·CE(hard, softmax₁(student))`.
pub fn ref_kd(
    teacher: &[f64],
    student: &[f64],
    cols: usize,
    lambda: f64,
    t: f64,
    hard: Option<&[usize]>,
) -> f64 {
    let pt = ref_softmax_rows(teacher, cols, t);
    let ps = ref_softmax_rows(student, cols, t);
    let labels = hard
        .map(<[usize]>::to_vec)
        .unwrap_or_else(|| ref_argmax_rows(teacher, cols));
    let y = ref_one_hot(&labels, cols);
    let s1 = ref_softmax_rows(student, cols, 1.0);
    lambda * t * t * ref_kl(&pt, &ps, cols) + (1.0 - lambda) * ref_cross_entropy(&y, &s1, cols)
}

pub fn ref_gd(
    teacher: &[f64],
    student: &[f64],
    cols: usize,
    alpha: f64,
    lambda: f64,
    t: f64,
    hard: Option<&[usize]>,
) -> f64 {
    let pt = ref_softmax_rows(teacher, cols, t);
    let ps = ref_softmax_rows(student, cols, t);
    alpha * ref_kd(teacher, student, cols, lambda, t, hard) + (1.0 - alpha) * ref_hall(&pt, &ps, cols)
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the tape's
/// gradient and central differences of `oracle`, over every input.
pub fn grad_rel_error(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    oracle: impl Fn(&[Arr]) -> f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let base: Vec<Arr> = inputs.iter().map(Arr::of).collect();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus[i].data[j] += STEP;
            let mut minus = base.clone();
            minus[i].data[j] -= STEP;
            let numeric = (oracle(&plus) - oracle(&minus)) / (2.0 * STEP);
            let a = a as f64;
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom < 1e-12 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Random projection weights so that tensor-valued ops reduce to a scalar.
pub fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Var {
    let rv = tape.constant(r.clone());
    let m = tape.mul(out, rv).unwrap();
    tape.sum(m)
}

pub fn dot(a: &[f64], b: &Tensor) -> f64 {
    a.iter().zip(b.data()).map(|(x, &y)| x * y as f64).sum()
}

/// One named family of gradient checks.
pub struct GradCase {
    pub name: &'static str,
    /// Runs one random instance and returns its relative error.
    pub run: fn(&mut RngState) -> f64,
}

fn shape_dims(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn case_matmul(rng: &mut RngState) -> f64 {
    let (m, k, n) = (
        shape_dims(rng, 1, 5),
        shape_dims(rng, 1, 5),
        shape_dims(rng, 1, 5),
    );
    let a = rand_tensor(&[m, k], rng, -1.0, 1.0);
    let b = rand_tensor(&[k, n], rng, -1.0, 1.0);
    let r = rand_tensor(&[m, n], rng, -1.0, 1.0);
    grad_rel_error(
        &[a, b],
        |t, v| {
            let o = t.matmul(v[0], v[1]).unwrap();
            project(t, o, &r)
        },
        |x| dot(&ref_matmul(&x[0].data, &x[1].data, m, k, n), &r),
    )
}

fn case_conv2d(rng: &mut RngState) -> f64 {
    let (b, c, o) = (
        shape_dims(rng, 1, 2),
        shape_dims(rng, 1, 3),
        shape_dims(rng, 1, 3),
    );
    let (h, w) = (shape_dims(rng, 3, 6), shape_dims(rng, 3, 6));
    let k = shape_dims(rng, 1, 3);
    let stride = shape_dims(rng, 1, 2);
    let pad = rng.below(2);
    let x = rand_tensor(&[b, c, h, w], rng, -1.0, 1.0);
    let kern = rand_tensor(&[o, c, k, k], rng, -1.0, 1.0);
    let out = ref_conv2d(&Arr::of(&x), &Arr::of(&kern), stride, pad);
    let r = rand_tensor(&out.shape, rng, -1.0, 1.0);
    grad_rel_error(
        &[x, kern],
        |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad).unwrap();
            project(t, y, &r)
        },
        |x| dot(&ref_conv2d(&x[0], &x[1], stride, pad).data, &r),
    )
}

fn case_relu(rng: &mut RngState) -> f64 {
    let n = shape_dims(rng, 2, 12);
    let x = rand_away_from_zero(&[n], rng);
    let r = rand_tensor(&[n], rng, -1.0, 1.0);
    grad_rel_error(
        &[x],
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, &r)
        },
        |x| dot(&x[0].data.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), &r),
    )
}

fn case_softmax(rng: &mut RngState) -> f64 {
    let (b, c) = (shape_dims(rng, 1, 4), shape_dims(rng, 2, 6));
    let temp = [0.5f32, 1.0, 2.0, 5.0, 10.0][rng.below(5)];
    let z = rand_tensor(&[b, c], rng, -3.0, 3.0);
    let r = rand_tensor(&[b, c], rng, -1.0, 1.0);
    grad_rel_error(
        &[z],
        |t, v| {
            let y = t.softmax(v[0], temp).unwrap();
            project(t, y, &r)
        },
        |x| dot(&ref_softmax_rows(&x[0].data, c, temp as f64), &r),
    )
}

fn case_row_bias(rng: &mut RngState) -> f64 {
    let (b, n) = (shape_dims(rng, 1, 4), shape_dims(rng, 1, 5));
    let x = rand_tensor(&[b, n], rng, -1.0, 1.0);
    let bias = rand_tensor(&[n], rng, -1.0, 1.0);
    let r = rand_tensor(&[b, n], rng, -1.0, 1.0);
    grad_rel_error(
        &[x, bias],
        |t, v| {
            let y = t.add_row_bias(v[0], v[1]).unwrap();
            project(t, y, &r)
        },
        |x| {
            let out: Vec<f64> = (0..b * n).map(|i| x[0].data[i] + x[1].data[i % n]).collect();
            dot(&out, &r)
        },
    )
}

fn case_channel_bias(rng: &mut RngState) -> f64 {
    let (b, c, h, w) = (
        shape_dims(rng, 1, 2),
        shape_dims(rng, 1, 3),
        shape_dims(rng, 1, 3),
        shape_dims(rng, 1, 3),
    );
    let x = rand_tensor(&[b, c, h, w], rng, -1.0, 1.0);
    let bias = rand_tensor(&[c], rng, -1.0, 1.0);
    let r = rand_tensor(&[b, c, h, w], rng, -1.0, 1.0);
    grad_rel_error(
        &[x, bias],
        |t, v| {
            let y = t.add_channel_bias(v[0], v[1]).unwrap();
            project(t, y, &r)
        },
        |x| {
            let out: Vec<f64> = (0..b * c * h * w)
                .map(|i| x[0].data[i] + x[1].data[(i / (h * w)) % c])
                .collect();
            dot(&out, &r)
        },
    )
}

fn binary(rng: &mut RngState, op: fn(&mut Tape, Var, Var) -> Var, f: fn(f64, f64) -> f64) -> f64 {
    let n = shape_dims(rng, 1, 10);
    let a = rand_tensor(&[n], rng, -1.5, 1.5);
    let b = rand_tensor(&[n], rng, -1.5, 1.5);
    let r = rand_tensor(&[n], rng, -1.0, 1.0);
    grad_rel_error(
        &[a, b],
        |t, v| {
            let y = op(t, v[0], v[1]);
            project(t, y, &r)
        },
        |x| {
            dot(
                &x[0]
                    .data
                    .iter()
                    .zip(&x[1].data)
                    .map(|(p, q)| f(*p, *q))
                    .collect::<Vec<_>>(),
                &r,
            )
        },
    )
}

fn case_add(rng: &mut RngState) -> f64 {
    binary(rng, |t, a, b| t.add(a, b).unwrap(), |a, b| a + b)
}

fn case_sub(rng: &mut RngState) -> f64 {
    binary(rng, |t, a, b| t.sub(a, b).unwrap(), |a, b| a - b)
}

fn case_mul(rng: &mut RngState) -> f64 {
    binary(rng, |t, a, b| t.mul(a, b).unwrap(), |a, b| a * b)
}

fn unary(rng: &mut RngState, lo: f32, hi: f32, op: fn(&mut Tape, Var) -> Var, f: fn(f64) -> f64) -> f64 {
    let n = shape_dims(rng, 1, 10);
    let a = rand_tensor(&[n], rng, lo, hi);
    let r = rand_tensor(&[n], rng, -1.0, 1.0);
    grad_rel_error(
        &[a],
        |t, v| {
            let y = op(t, v[0]);
            project(t, y, &r)
        },
        |x| dot(&x[0].data.iter().map(|p| f(*p)).collect::<Vec<_>>(), &r),
    )
}

fn case_scale(rng: &mut RngState) -> f64 {
    unary(rng, -2.0, 2.0, |t, a| t.scale(a, -1.7), |a| -1.7f32 as f64 * a)
}

fn case_square(rng: &mut RngState) -> f64 {
    unary(rng, -2.0, 2.0, |t, a| t.square(a), |a| a * a)
}

fn case_log(rng: &mut RngState) -> f64 {
    unary(rng, 0.1, 2.0, |t, a| t.log_clamped(a, 1e-12), f64::ln)
}

fn case_sum(rng: &mut RngState) -> f64 {
    let n = shape_dims(rng, 1, 10);
    let a = rand_tensor(&[2, n], rng, -1.0, 1.0);
    grad_rel_error(&[a], |t, v| t.sum(v[0]), |x| x[0].data.iter().sum())
}

fn case_transpose(rng: &mut RngState) -> f64 {
    let (m, n) = (shape_dims(rng, 1, 5), shape_dims(rng, 1, 5));
    let a = rand_tensor(&[m, n], rng, -1.0, 1.0);
    let r = rand_tensor(&[n, m], rng, -1.0, 1.0);
    grad_rel_error(
        &[a],
        |t, v| {
            let y = t.transpose(v[0]).unwrap();
            project(t, y, &r)
        },
        |x| {
            let out: Vec<f64> = (0..n * m).map(|i| x[0].data[(i % m) * n + i / m]).collect();
            dot(&out, &r)
        },
    )
}

fn case_flatten(rng: &mut RngState) -> f64 {
    let (b, c, h) = (
        shape_dims(rng, 1, 3),
        shape_dims(rng, 1, 3),
        shape_dims(rng, 1, 3),
    );
    let a = rand_tensor(&[b, c, h], rng, -1.0, 1.0);
    let r = rand_tensor(&[b, c * h], rng, -1.0, 1.0);
    grad_rel_error(
        &[a],
        |t, v| {
            let y = t.flatten(v[0]).unwrap();
            let y = t.reshape(y, vec![b, c * h]).unwrap();
            project(t, y, &r)
        },
        |x| dot(&x[0].data, &r),
    )
}

fn case_concat(rng: &mut RngState) -> f64 {
    let (b, n1, n2) = (
        shape_dims(rng, 1, 4),
        shape_dims(rng, 1, 4),
        shape_dims(rng, 1, 4),
    );
    let a = rand_tensor(&[b, n1], rng, -1.0, 1.0);
    let c = rand_tensor(&[b, n2], rng, -1.0, 1.0);
    let r = rand_tensor(&[b, n1 + n2], rng, -1.0, 1.0);
    grad_rel_error(
        &[a, c],
        |t, v| {
            let y = t.concat_cols(v[0], v[1]).unwrap();
            project(t, y, &r)
        },
        |x| {
            let mut out = Vec::new();
            for row in 0..b {
                out.extend_from_slice(&x[0].data[row * n1..(row + 1) * n1]);
                out.extend_from_slice(&x[1].data[row * n2..(row + 1) * n2]);
            }
            dot(&out, &r)
        },
    )
}

/// `cross_entropy(softmax(W·x))` on a random three-class dense layer,
/// checked against the weights.
fn case_dense_ce(rng: &mut RngState) -> f64 {
    let (b, d) = (shape_dims(rng, 1, 4), shape_dims(rng, 2, 5));
    let x = rand_tensor(&[b, d], rng, -1.0, 1.0);
    let (y, _) = rand_one_hot(b, 3, rng);
    let w = rand_tensor(&[d, 3], rng, -1.0, 1.0);
    let (xa, ya) = (Arr::of(&x), Arr::of(&y));
    grad_rel_error(
        &[w],
        |t, v| {
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            let z = t.matmul(xv, v[0]).unwrap();
            let p = t.softmax(z, 1.0).unwrap();
            cross_entropy(t, yv, p).unwrap()
        },
        |w| {
            let z = ref_matmul(&xa.data, &w[0].data, b, d, 3);
            ref_cross_entropy(&ya.data, &ref_softmax_rows(&z, 3, 1.0), 3)
        },
    )
}

fn case_cross_entropy(rng: &mut RngState) -> f64 {
    let (b, c) = (shape_dims(rng, 1, 4), shape_dims(rng, 2, 6));
    let (y, _) = rand_one_hot(b, c, rng);
    let p = rand_probs(b, c, rng);
    let ya = Arr::of(&y);
    grad_rel_error(
        &[p],
        |t, v| {
            let yv = t.constant(y.clone());
            cross_entropy(t, yv, v[0]).unwrap()
        },
        |x| ref_cross_entropy(&ya.data, &x[0].data, c),
    )
}

struct Pair {
    b: usize,
    c: usize,
    temp: f32,
    teacher: Tensor,
    student: Tensor,
}

fn pair(rng: &mut RngState) -> Pair {
    let (b, c) = (shape_dims(rng, 1, 4), shape_dims(rng, 2, 6));
    Pair {
        b,
        c,
        temp: [1.0f32, 2.0, 5.0, 10.0, 15.0][rng.below(5)],
        teacher: rand_tensor(&[b, c], rng, -3.0, 3.0),
        student: rand_tensor(&[b, c], rng, -3.0, 3.0),
    }
}

fn soft_pair(t: &mut Tape, p: &Pair, student: Var) -> (SoftTargets, SoftTargets) {
    let tp = hallucinet::tensor::tempered_softmax(&p.teacher, p.temp).unwrap();
    let teacher = SoftTargets {
        probs: t.constant(tp),
        temperature: p.temp,
    };
    let s = SoftTargets::from_logits(t, Logits(student), p.temp).unwrap();
    (teacher, s)
}

fn case_hallucination(rng: &mut RngState) -> f64 {
    let p = pair(rng);
    let ta = Arr::of(&p.teacher);
    grad_rel_error(
        std::slice::from_ref(&p.student),
        |t, v| {
            let (a, b) = soft_pair(t, &p, v[0]);
            hallucination_loss(t, &a, &b).unwrap()
        },
        |x| {
            let pt = ref_softmax_rows(&ta.data, p.c, p.temp as f64);
            ref_hall(&pt, &ref_softmax_rows(&x[0].data, p.c, p.temp as f64), p.c)
        },
    )
}

fn case_kl(rng: &mut RngState) -> f64 {
    let p = pair(rng);
    let ta = Arr::of(&p.teacher);
    grad_rel_error(
        std::slice::from_ref(&p.student),
        |t, v| {
            let (a, b) = soft_pair(t, &p, v[0]);
            kl_loss(t, &a, &b).unwrap()
        },
        |x| {
            let pt = ref_softmax_rows(&ta.data, p.c, p.temp as f64);
            ref_kl(&pt, &ref_softmax_rows(&x[0].data, p.c, p.temp as f64), p.c)
        },
    )
}

fn case_kd(rng: &mut RngState) -> f64 {
    let p = pair(rng);
    let lambda = rng.uniform(0.0, 1.0);
    let ta = Arr::of(&p.teacher);
    grad_rel_error(
        std::slice::from_ref(&p.student),
        |t, v| {
            let tv = t.constant(p.teacher.clone());
            kd_loss(t, Logits(tv), Logits(v[0]), lambda, p.temp).unwrap()
        },
        |x| ref_kd(&ta.data, &x[0].data, p.c, lambda as f64, p.temp as f64, None),
    )
}

fn case_gd(rng: &mut RngState) -> f64 {
    let p = pair(rng);
    let (alpha, lambda) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
    let ta = Arr::of(&p.teacher);
    grad_rel_error(
        std::slice::from_ref(&p.student),
        |t, v| {
            let tv = t.constant(p.teacher.clone());
            gd_loss(t, Logits(tv), Logits(v[0]), alpha, lambda, p.temp).unwrap()
        },
        |x| {
            ref_gd(
                &ta.data,
                &x[0].data,
                p.c,
                alpha as f64,
                lambda as f64,
                p.temp as f64,
                None,
            )
        },
    )
}

fn case_gd_ground_truth(rng: &mut RngState) -> f64 {
    let p = pair(rng);
    let (alpha, lambda) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
    let labels: Vec<usize> = (0..p.b).map(|_| rng.below(p.c)).collect();
    let ta = Arr::of(&p.teacher);
    grad_rel_error(
        std::slice::from_ref(&p.student),
        |t, v| {
            let tv = t.constant(p.teacher.clone());
            gd_loss_with(
                t,
                Logits(tv),
                Logits(v[0]),
                alpha,
                lambda,
                p.temp,
                HardLabels::GroundTruth(&labels),
            )
            .unwrap()
        },
        |x| {
            ref_gd(
                &ta.data,
                &x[0].data,
                p.c,
                alpha as f64,
                lambda as f64,
                p.temp as f64,
                Some(&labels),
            )
        },
    )
}

pub const OP_CASES: &[GradCase] = &[
    GradCase {
        name: "matmul",
        run: case_matmul,
    },
    GradCase {
        name: "conv2d",
        run: case_conv2d,
    },
    GradCase {
        name: "relu",
        run: case_relu,
    },
    GradCase {
        name: "tempered_softmax",
        run: case_softmax,
    },
    GradCase {
        name: "add_row_bias",
        run: case_row_bias,
    },
    GradCase {
        name: "add_channel_bias",
        run: case_channel_bias,
    },
    GradCase {
        name: "add",
        run: case_add,
    },
    GradCase {
        name: "sub",
        run: case_sub,
    },
    GradCase {
        name: "mul",
        run: case_mul,
    },
    GradCase {
        name: "scale",
        run: case_scale,
    },
    GradCase {
        name: "square",
        run: case_square,
    },
    GradCase {
        name: "log",
        run: case_log,
    },
    GradCase {
        name: "sum",
        run: case_sum,
    },
    GradCase {
        name: "transpose",
        run: case_transpose,
    },
    GradCase {
        name: "flatten",
        run: case_flatten,
    },
    GradCase {
        name: "concat_cols",
        run: case_concat,
    },
    GradCase {
        name: "dense_cross_entropy",
        run: case_dense_ce,
    },
];

pub const LOSS_CASES: &[GradCase] = &[
    GradCase {
        name: "cross_entropy",
        run: case_cross_entropy,
    },
    GradCase {
        name: "hallucination_loss",
        run: case_hallucination,
    },
    GradCase {
        name: "kl_loss",
        run: case_kl,
    },
    GradCase {
        name: "kd_loss",
        run: case_kd,
    },
    GradCase {
        name: "gd_loss",
        run: case_gd,
    },
    GradCase {
        name: "gd_loss_ground_truth",
        run: case_gd_ground_truth,
    },
];

/// Worst relative error of a case over `INSTANCES` seeded instances.
pub fn worst_error(case: &GradCase, seed: u64) -> f64 {
    let mut rng = RngState::derive(seed, case.name);
    (0..INSTANCES).map(|_| (case.run)(&mut rng)).fold(0.0, f64::max)
}
