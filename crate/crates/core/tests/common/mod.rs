//! Shared oracles and sweeps for the integration tests.

#![allow(dead_code)]

use matsei::cvnet::complex_conv1d;
use matsei::gradcore::{
    batchnorm1d, complex_kernel, complex_maxpool1d, concat, conv1d, gather_rows, gradient_check, linear,
    log_softmax, masked_log1p_sum_exp, maxpool1d, pick, row_l2_normalize, slice_rows, softmax, BnMode,
    GradCheckReport, GradError, Tensor,
};
use matsei::losses::{
    auto_weighted_sum, ce_loss, center_loss, kl_divergence, lds, proxy_anchor_loss, ss_ce_loss, ss_center_loss,
    ss_proxy_anchor_loss, LossError, PseudoLabelBatch, SoftTarget,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng8 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng8 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Rng8, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

// ---------------------------------------------------------------------------
// naive oracles

/// Direct loops, `x: [B, Ci, L]`, `w: [Co, Ci, k]`.
pub fn naive_conv1d(
    x: &[f64],
    (b, ci, l): (usize, usize, usize),
    w: &[f64],
    (co, k): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let lo = (l + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * co * lo];
    for n in 0..b {
        for o in 0..co {
            for t in 0..lo {
                let mut acc = bias.map_or(0.0, |bb| bb[o]);
                for c in 0..ci {
                    for j in 0..k {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += w[(o * ci + c) * k + j] * x[(n * ci + c) * l + pos as usize];
                        }
                    }
                }
                out[(n * co + o) * lo + t] = acc;
            }
        }
    }
    out
}

/// `y = x Wᵀ + b`, `x: [B, Din]`, `w: [Dout, Din]`.
pub fn naive_linear(x: &[f64], b: usize, din: usize, w: &[f64], dout: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; b * dout];
    for r in 0..b {
        for o in 0..dout {
            let mut acc = bias.map_or(0.0, |bb| bb[o]);
            for i in 0..din {
                acc += x[r * din + i] * w[o * din + i];
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

/// Complex product written out on complex numbers.
pub fn naive_complex_conv1d(
    x: &[f64],
    (b, ci, l): (usize, usize, usize),
    wr: &[f64],
    wi: &[f64],
    (co, k): (usize, usize),
    pad: usize,
) -> Vec<f64> {
    let lo = l + 2 * pad - k + 1;
    let mut out = vec![0.0; b * 2 * co * lo];
    for n in 0..b {
        for o in 0..co {
            for t in 0..lo {
                let (mut re, mut im) = (0.0, 0.0);
                for c in 0..ci {
                    for j in 0..k {
                        let pos = (t + j) as isize - pad as isize;
                        if pos < 0 || pos as usize >= l {
                            continue;
                        }
                        let p = pos as usize;
                        let a = x[(n * 2 * ci + c) * l + p];
                        let bb = x[(n * 2 * ci + ci + c) * l + p];
                        let (u, v) = (wr[(o * ci + c) * k + j], wi[(o * ci + c) * k + j]);
                        re += a * u - bb * v;
                        im += a * v + bb * u;
                    }
                }
                out[(n * 2 * co + o) * lo + t] = re;
                out[(n * 2 * co + co + o) * lo + t] = im;
            }
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Proxy-anchor value summed one term at a time. `z` rows of width `d`,
/// `p` has `k` proxies.
pub fn pa_oracle(z: &[f64], labels: &[usize], p: &[f64], k: usize, d: usize, alpha: f64, delta: f64) -> f64 {
    let n = labels.len();
    let mut positive_classes = 0usize;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for c in 0..k {
        let pc = &p[c * d..(c + 1) * d];
        let mut sp = 0.0;
        let mut sn = 0.0;
        let mut present = false;
        for i in 0..n {
            let s = cosine(&z[i * d..(i + 1) * d], pc);
            if labels[i] == c {
                present = true;
                sp += (-alpha * (s - delta)).exp();
            } else {
                sn += (alpha * (s + delta)).exp();
            }
        }
        if present {
            positive_classes += 1;
            pos += (1.0 + sp).ln();
        }
        neg += (1.0 + sn).ln();
    }
    pos / positive_classes as f64 + neg / k as f64
}

/// Labeled proxy-anchor plus the same sum over accepted unlabeled rows.
#[allow(clippy::too_many_arguments)]
pub fn ss_pa_oracle(
    zl: &[f64],
    yl: &[usize],
    zu: &[f64],
    pseudo: &[usize],
    accepted: &[bool],
    p: &[f64],
    k: usize,
    d: usize,
    alpha: f64,
    delta: f64,
) -> f64 {
    let mut total = 0.0;
    if !yl.is_empty() {
        total += pa_oracle(zl, yl, p, k, d, alpha, delta);
    }
    let mut za = Vec::new();
    let mut ya = Vec::new();
    for (i, &a) in accepted.iter().enumerate() {
        if a {
            za.extend_from_slice(&zu[i * d..(i + 1) * d]);
            ya.push(pseudo[i]);
        }
    }
    if !ya.is_empty() {
        total += pa_oracle(&za, &ya, p, k, d, alpha, delta);
    }
    total
}

/// Mean silhouette from the full pairwise distance matrix. Singleton
/// clusters score 0.
pub fn silhouette_oracle(x: &[f64], d: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let dist = |i: usize, j: usize| -> f64 {
        (0..d)
            .map(|c| (x[i * d + c] - x[j * d + c]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let k = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Every sequence of length `n` over `0..k`.
pub fn all_labelings(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

// ---------------------------------------------------------------------------
// gradient suite

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

type Leaf = (Vec<usize>, Vec<f64>);
type Objective = Box<dyn Fn(&[Tensor]) -> Result<Tensor, GradError>>;

fn le(e: LossError) -> GradError {
    match e {
        LossError::Grad(g) => g,
        e => GradError::InvalidArgument(e.to_string()),
    }
}

fn leaf(rng: &mut Rng8, shape: &[usize], lo: f64, hi: f64) -> Leaf {
    let n = shape.iter().product();
    (shape.to_vec(), uniform(rng, n, lo, hi))
}

/// Random linear read-out so every output coordinate matters.
fn readout(rng: &mut Rng8, n: usize) -> Vec<f64> {
    uniform(rng, n, -1.0, 1.0)
}

fn labels(rng: &mut Rng8, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn pseudo(rng: &mut Rng8, n: usize, k: usize) -> PseudoLabelBatch {
    let accepted: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    PseudoLabelBatch {
        labels: labels(rng, n, k),
        confidence: accepted.iter().map(|&a| if a { 0.99 } else { 0.5 }).collect(),
        accepted,
        tau: 0.95,
    }
}

/// One random instance of the named case: leaves and the scalar objective.
fn instance(name: &str, rng: &mut Rng8) -> (Vec<Leaf>, Objective) {
    let b = rng.random_range(1..4usize);
    let c = rng.random_range(1..4usize);
    let n = b * c;
    match name {
        "add" | "sub" | "mul" => {
            let (x, y) = (leaf(rng, &[b, c], -2.0, 2.0), leaf(rng, &[b, c], -2.0, 2.0));
            let w = readout(rng, n);
            let op = name.to_string();
            (
                vec![x, y],
                Box::new(move |p| {
                    let o = match op.as_str() {
                        "add" => p[0].add(&p[1])?,
                        "sub" => p[0].sub(&p[1])?,
                        _ => p[0].mul(&p[1])?,
                    };
                    o.square().weighted_sum(&w)
                }),
            )
        }
        "mul_scalar" | "add_scalar" => {
            let s = rng.random_range(-3.0..3.0);
            let w = readout(rng, n);
            let mul = name == "mul_scalar";
            (
                vec![leaf(rng, &[b, c], -2.0, 2.0)],
                Box::new(move |p| {
                    let o = if mul { p[0].mul_scalar(s) } else { p[0].add_scalar(s) };
                    o.square().weighted_sum(&w)
                }),
            )
        }
        "exp" | "ln" | "ln_1p" | "square" | "relu" | "clamp_min" => {
            let (lo, hi) = match name {
                "exp" => (-2.0, 2.0),
                "ln" => (0.2, 3.0),
                "ln_1p" => (-0.8, 3.0),
                _ => (-2.0, 2.0),
            };
            let floor = rng.random_range(-1.0..1.0);
            let x = leaf(rng, &[b, c], lo, hi);
            let w = readout(rng, n);
            let op = name.to_string();
            (
                vec![x],
                Box::new(move |p| {
                    let o = match op.as_str() {
                        "exp" => p[0].exp(),
                        "ln" => p[0].ln(),
                        "ln_1p" => p[0].ln_1p(),
                        "square" => p[0].square(),
                        "relu" => p[0].relu(),
                        _ => p[0].clamp_min(floor),
                    };
                    o.weighted_sum(&w)
                }),
            )
        }
        "sum" | "mean" => {
            let mean = name == "mean";
            (
                vec![leaf(rng, &[b, c], -2.0, 2.0)],
                Box::new(move |p| Ok(if mean { p[0].mean() } else { p[0].sum() }.square())),
            )
        }
        "mul_const" | "add_const" => {
            let k = uniform(rng, n, -2.0, 2.0);
            let w = readout(rng, n);
            let mul = name == "mul_const";
            (
                vec![leaf(rng, &[b, c], -2.0, 2.0)],
                Box::new(move |p| {
                    let o = if mul { p[0].mul_const(&k)? } else { p[0].add_const(&k)? };
                    o.square().weighted_sum(&w)
                }),
            )
        }
        "reshape_index" => {
            let i = rng.random_range(0..n);
            let w = readout(rng, n);
            (
                vec![leaf(rng, &[b, c], -2.0, 2.0)],
                Box::new(move |p| {
                    let r = p[0].reshape(&[c, b])?;
                    Ok(r.square().weighted_sum(&w)?.add(&r.index(i)?.exp())?)
                }),
            )
        }
        "concat_slice_gather" => {
            let b2 = rng.random_range(1..4usize);
            let total = b + b2;
            let start = rng.random_range(0..total);
            let end = rng.random_range(start + 1..=total);
            let idx: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..total)).collect();
            let w1 = readout(rng, (end - start) * c);
            let w2 = readout(rng, idx.len() * c);
            (
                vec![leaf(rng, &[b, c], -2.0, 2.0), leaf(rng, &[b2, c], -2.0, 2.0)],
                Box::new(move |p| {
                    let cat = concat(&[p[0].clone(), p[1].clone()])?;
                    let s = slice_rows(&cat, start, end)?.square().weighted_sum(&w1)?;
                    let g = gather_rows(&cat, &idx)?.square().weighted_sum(&w2)?;
                    s.add(&g)
                }),
            )
        }
        "pick" => {
            let m = rng.random_range(1..6usize);
            let rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..b)).collect();
            let cols: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
            let w = readout(rng, m);
            (
                vec![leaf(rng, &[b, c], -2.0, 2.0)],
                Box::new(move |p| pick(&p[0], &rows, &cols)?.square().weighted_sum(&w)),
            )
        }
        "row_l2_normalize" => {
            let d = rng.random_range(2..5usize);
            let w = readout(rng, b * d);
            (
                vec![leaf(rng, &[b, d], -2.0, 2.0)],
                Box::new(move |p| row_l2_normalize(&p[0])?.weighted_sum(&w)),
            )
        }
        "masked_log1p_sum_exp" => {
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            let w = readout(rng, c);
            (
                vec![leaf(rng, &[b, c], -3.0, 3.0)],
                Box::new(move |p| masked_log1p_sum_exp(&p[0].mul_scalar(4.0), &mask)?.weighted_sum(&w)),
            )
        }
        "softmax" | "log_softmax" => {
            let w = readout(rng, b * (c + 1));
            let soft = name == "softmax";
            (
                vec![leaf(rng, &[b, c + 1], -3.0, 3.0)],
                Box::new(move |p| {
                    let o = if soft { softmax(&p[0])? } else { log_softmax(&p[0])? };
                    o.weighted_sum(&w)
                }),
            )
        }
        "conv1d" => {
            let ci = rng.random_range(1..4usize);
            let co = rng.random_range(1..4usize);
            let k = rng.random_range(1..5usize);
            let l = rng.random_range(k.max(2)..9usize);
            let stride = rng.random_range(1..3usize);
            let pad = rng.random_range(0..3usize);
            let lo = (l + 2 * pad - k) / stride + 1;
            let with_bias = rng.random_bool(0.5);
            let w = readout(rng, b * co * lo);
            let mut leaves = vec![leaf(rng, &[b, ci, l], -1.0, 1.0), leaf(rng, &[co, ci, k], -1.0, 1.0)];
            if with_bias {
                leaves.push(leaf(rng, &[co], -1.0, 1.0));
            }
            (
                leaves,
                Box::new(move |p| conv1d(&p[0], &p[1], p.get(2), stride, pad)?.square().weighted_sum(&w)),
            )
        }
        "complex_conv1d" => {
            let ci = rng.random_range(1..3usize);
            let co = rng.random_range(1..3usize);
            let k = rng.random_range(1..4usize);
            let l = rng.random_range(k.max(2)..8usize);
            let pad = rng.random_range(0..2usize);
            let lo = l + 2 * pad - k + 1;
            let w = readout(rng, b * 2 * co * lo);
            let leaves = vec![
                leaf(rng, &[b, 2 * ci, l], -1.0, 1.0),
                leaf(rng, &[co, ci, k], -1.0, 1.0),
                leaf(rng, &[co, ci, k], -1.0, 1.0),
                leaf(rng, &[co], -1.0, 1.0),
                leaf(rng, &[co], -1.0, 1.0),
            ];
            (
                leaves,
                Box::new(move |p| {
                    complex_conv1d(&p[0], &p[1], &p[2], Some((&p[3], &p[4])), pad)?
                        .square()
                        .weighted_sum(&w)
                }),
            )
        }
        "complex_kernel" => {
            let k = rng.random_range(1..4usize);
            let w = readout(rng, 4 * n * k);
            (
                vec![leaf(rng, &[b, c, k], -1.0, 1.0), leaf(rng, &[b, c, k], -1.0, 1.0)],
                Box::new(move |p| complex_kernel(&p[0], &p[1])?.square().weighted_sum(&w)),
            )
        }
        "linear" => {
            let din = rng.random_range(1..5usize);
            let dout = rng.random_range(1..5usize);
            let with_bias = rng.random_bool(0.5);
            let w = readout(rng, b * dout);
            let mut leaves = vec![leaf(rng, &[b, din], -1.0, 1.0), leaf(rng, &[dout, din], -1.0, 1.0)];
            if with_bias {
                leaves.push(leaf(rng, &[dout], -1.0, 1.0));
            }
            (
                leaves,
                Box::new(move |p| linear(&p[0], &p[1], p.get(2))?.square().weighted_sum(&w)),
            )
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let bb = rng.random_range(2..5usize);
            let l = rng.random_range(1..4usize);
            let shape: Vec<usize> = if l == 1 { vec![bb, c] } else { vec![bb, c, l] };
            let w = readout(rng, bb * c * l);
            let mean = uniform(rng, c, -0.5, 0.5);
            let var = uniform(rng, c, 0.5, 2.0);
            let train = name == "batchnorm_train";
            let leaves = vec![
                leaf(rng, &shape, -2.0, 2.0),
                leaf(rng, &[c], 0.5, 1.5),
                leaf(rng, &[c], -0.5, 0.5),
            ];
            (
                leaves,
                Box::new(move |p| {
                    let mode = if train {
                        BnMode::Train
                    } else {
                        BnMode::Eval { mean: &mean, var: &var }
                    };
                    let (y, _) = batchnorm1d(&p[0], &p[1], &p[2], mode)?;
                    y.square().weighted_sum(&w)
                }),
            )
        }
        "maxpool1d" | "complex_maxpool1d" => {
            let window = rng.random_range(1..4usize);
            let l = rng.random_range(1..8usize);
            let lo = l.div_ceil(window);
            let complex = name == "complex_maxpool1d";
            let ch = if complex { 2 * c } else { c };
            let w = readout(rng, b * ch * lo);
            (
                vec![leaf(rng, &[b, ch, l], -2.0, 2.0)],
                Box::new(move |p| {
                    let o = if complex {
                        complex_maxpool1d(&p[0], window)?
                    } else {
                        maxpool1d(&p[0], window)?
                    };
                    o.square().weighted_sum(&w)
                }),
            )
        }
        "ce" => {
            let k = rng.random_range(2..5usize);
            let y = labels(rng, b, k);
            (
                vec![leaf(rng, &[b, k], -3.0, 3.0)],
                Box::new(move |p| ce_loss(&p[0], &y).map_err(le)),
            )
        }
        "ss_ce" => {
            let k = rng.random_range(2..5usize);
            let u = rng.random_range(1..5usize);
            let y = labels(rng, b, k);
            let ps = pseudo(rng, u, k);
            (
                vec![leaf(rng, &[b, k], -3.0, 3.0), leaf(rng, &[u, k], -3.0, 3.0)],
                Box::new(move |p| ss_ce_loss(&p[0], &y, &p[1], &ps).map_err(le)),
            )
        }
        "center" | "ss_center" => {
            let k = rng.random_range(2..5usize);
            let d = rng.random_range(1..5usize);
            let u = rng.random_range(1..5usize);
            let y = labels(rng, b, k);
            let ps = pseudo(rng, u, k);
            let ss = name == "ss_center";
            (
                vec![
                    leaf(rng, &[b, d], -2.0, 2.0),
                    leaf(rng, &[k, d], -2.0, 2.0),
                    leaf(rng, &[u, d], -2.0, 2.0),
                ],
                Box::new(move |p| {
                    if ss {
                        ss_center_loss(&p[0], &y, &p[2], &ps, &p[1]).map_err(le)
                    } else {
                        center_loss(&p[0], &y, &p[1]).map_err(le)
                    }
                }),
            )
        }
        "pa" | "ss_pa" => {
            let k = rng.random_range(2..5usize);
            let d = rng.random_range(2..5usize);
            let u = rng.random_range(1..5usize);
            let y = labels(rng, b + 1, k);
            let ps = pseudo(rng, u, k);
            let alpha = if rng.random_bool(0.5) { 32.0 } else { rng.random_range(1.0..32.0) };
            let delta = rng.random_range(0.0..0.3);
            let ss = name == "ss_pa";
            (
                vec![
                    leaf(rng, &[b + 1, d], -2.0, 2.0),
                    leaf(rng, &[k, d], -2.0, 2.0),
                    leaf(rng, &[u, d], -2.0, 2.0),
                ],
                Box::new(move |p| {
                    if ss {
                        ss_proxy_anchor_loss(&p[0], &y, &p[2], &ps, &p[1], alpha, delta).map_err(le)
                    } else {
                        proxy_anchor_loss(&p[0], &y, &p[1], alpha, delta).map_err(le)
                    }
                }),
            )
        }
        "kl" => {
            let k = rng.random_range(2..5usize);
            let target = softmax(&tensor(&[b, k], uniform(rng, b * k, -2.0, 2.0))).unwrap();
            (
                vec![leaf(rng, &[b, k], -2.0, 2.0)],
                Box::new(move |p| kl_divergence(&target, &softmax(&p[0])?).map_err(le)),
            )
        }
        "lds" => {
            // the perturbation is frozen; gradients reach the weights and the input
            let din = rng.random_range(2..5usize);
            let k = rng.random_range(2..5usize);
            let x0 = tensor(&[b, din], uniform(rng, b * din, -1.0, 1.0));
            let w0 = tensor(&[k, din], uniform(rng, k * din, -1.0, 1.0));
            let target = SoftTarget::from_logits(&linear(&x0, &w0, None).unwrap()).unwrap();
            let r = tensor(&[b, din], uniform(rng, b * din, -0.5, 0.5));
            (
                vec![(vec![k, din], w0.data().to_vec()), (vec![b, din], x0.data().to_vec())],
                Box::new(move |p| {
                    let w = p[0].clone();
                    lds(move |x: &Tensor| Ok(linear(x, &w, None)?), &p[1], &target, &r).map_err(le)
                }),
            )
        }
        "auto_weighted_sum" => {
            let m = rng.random_range(1..4usize);
            (
                vec![leaf(rng, &[m], 0.1, 3.0), leaf(rng, &[m], -1.0, 1.0)],
                Box::new(move |p| {
                    let terms: Vec<Tensor> = (0..m).map(|i| p[0].index(i).unwrap().square()).collect();
                    let rho: Vec<Tensor> = (0..m).map(|i| p[1].index(i).unwrap()).collect();
                    auto_weighted_sum(&terms, &rho).map_err(le)
                }),
            )
        }
        other => panic!("unknown gradient case {other}"),
    }
}

pub const GRAD_CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "add_scalar",
    "exp",
    "ln",
    "ln_1p",
    "square",
    "relu",
    "clamp_min",
    "sum",
    "mean",
    "mul_const",
    "add_const",
    "reshape_index",
    "concat_slice_gather",
    "pick",
    "row_l2_normalize",
    "masked_log1p_sum_exp",
    "softmax",
    "log_softmax",
    "conv1d",
    "complex_conv1d",
    "complex_kernel",
    "linear",
    "batchnorm_train",
    "batchnorm_eval",
    "maxpool1d",
    "complex_maxpool1d",
    "ce",
    "ss_ce",
    "center",
    "ss_center",
    "pa",
    "ss_pa",
    "kl",
    "lds",
    "auto_weighted_sum",
];

/// Worst report over `trials` random instances of one case.
pub fn grad_case(name: &str, trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = rng(seed);
    let mut worst: Option<GradCheckReport> = None;
    for _ in 0..trials {
        let (leaves, f) = instance(name, &mut rng);
        let r = gradient_check(|p| f(p), &leaves, GRAD_H).unwrap_or_else(|e| panic!("{name}: {e}"));
        if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
    }
    worst.expect("at least one trial")
}

// ---------------------------------------------------------------------------
// oracle sweeps

pub const PA_ORACLE_TOL: f64 = 1e-10;
pub const SILHOUETTE_TOL: f64 = 1e-12;
pub const KERNEL_TOL: f64 = 1e-12;

#[derive(Debug, Default, Clone, Copy)]
pub struct Sweep {
    pub cases: usize,
    pub max_err: f64,
}

impl Sweep {
    pub fn record(&mut self, got: f64, want: f64) {
        self.cases += 1;
        let e = (got - want).abs();
        if e > self.max_err || e.is_nan() {
            self.max_err = if e.is_nan() { f64::INFINITY } else { e };
        }
    }

    pub fn record_all(&mut self, got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        self.cases += 1;
        for (g, w) in got.iter().zip(want) {
            let e = (g - w).abs();
            if e > self.max_err || e.is_nan() {
                self.max_err = if e.is_nan() { f64::INFINITY } else { e };
            }
        }
    }
}

/// Every labeling of every batch size up to `max_batch` over `K ≤ max_k`.
pub fn pa_sweep(max_batch: usize, max_k: usize, seed: u64) -> Sweep {
    let mut rng = rng(seed);
    let mut sweep = Sweep::default();
    let d = 3;
    for k in 1..=max_k {
        for n in 1..=max_batch {
            for y in all_labelings(n, k) {
                let z = uniform(&mut rng, n * d, -1.0, 1.0);
                let p = uniform(&mut rng, k * d, -1.0, 1.0);
                let alpha = rng.random_range(1.0..40.0);
                let delta = rng.random_range(0.0..0.5);
                let got = proxy_anchor_loss(&tensor(&[n, d], z.clone()), &y, &tensor(&[k, d], p.clone()), alpha, delta)
                    .unwrap()
                    .item();
                sweep.record(got, pa_oracle(&z, &y, &p, k, d, alpha, delta));
            }
        }
    }
    sweep
}

/// Every split of every labeling into labeled and unlabeled parts, with
/// every acceptance mask over the unlabeled part.
pub fn ss_pa_sweep(max_batch: usize, max_k: usize, seed: u64) -> Sweep {
    let mut rng = rng(seed);
    let mut sweep = Sweep::default();
    let d = 3;
    for k in 1..=max_k {
        for n in 1..=max_batch {
            for y in all_labelings(n, k) {
                let p = uniform(&mut rng, k * d, -1.0, 1.0);
                let z = uniform(&mut rng, n * d, -1.0, 1.0);
                let pt = tensor(&[k, d], p.clone());
                for split in 0..=n {
                    let (yl, yu) = y.split_at(split);
                    let (zl, zu) = z.split_at(split * d);
                    let u = n - split;
                    let zlt = tensor(&[split, d], zl.to_vec());
                    let zut = tensor(&[u, d], zu.to_vec());
                    for mask in 0..(1usize << u) {
                        let accepted: Vec<bool> = (0..u).map(|i| mask >> i & 1 == 1).collect();
                        let pseudo = PseudoLabelBatch {
                            labels: yu.to_vec(),
                            confidence: accepted.iter().map(|&a| if a { 0.99 } else { 0.3 }).collect(),
                            accepted: accepted.clone(),
                            tau: 0.95,
                        };
                        let got = ss_proxy_anchor_loss(&zlt, yl, &zut, &pseudo, &pt, 32.0, 0.1)
                            .unwrap()
                            .item();
                        sweep.record(got, ss_pa_oracle(zl, yl, zu, yu, &accepted, &p, k, d, 32.0, 0.1));
                    }
                }
            }
        }
    }
    sweep
}

/// Every labeling with at least two clusters of every point count up to
/// `max_points` into at most `max_k` clusters. Single-cluster labelings
/// must be rejected.
pub fn silhouette_sweep(max_points: usize, max_k: usize, seed: u64) -> (Sweep, usize) {
    let mut rng = rng(seed);
    let mut sweep = Sweep::default();
    let mut rejected = 0;
    let d = 2;
    for n in 2..=max_points {
        let x = uniform(&mut rng, n * d, -1.0, 1.0);
        for y in all_labelings(n, max_k) {
            let distinct = {
                let mut v = y.clone();
                v.sort_unstable();
                v.dedup();
                v.len()
            };
            let got = matsei::evalkit::silhouette(&x, d, &y);
            if distinct < 2 {
                assert!(matches!(got, Err(matsei::evalkit::EvalError::SingleCluster)), "{y:?}");
                rejected += 1;
                continue;
            }
            sweep.record(got.unwrap(), silhouette_oracle(&x, d, &y));
        }
    }
    (sweep, rejected)
}

/// Random conv1d (with and without bias, strides and padding), linear and
/// complex convolution instances against direct loops.
pub fn kernel_sweep(trials: usize, seed: u64) -> (Sweep, Sweep, Sweep) {
    let mut rng = rng(seed);
    let (mut conv, mut dense, mut cconv) = (Sweep::default(), Sweep::default(), Sweep::default());
    for _ in 0..trials {
        let b = rng.random_range(1..4usize);
        let ci = rng.random_range(1..5usize);
        let co = rng.random_range(1..5usize);
        let k = rng.random_range(1..6usize);
        let l = rng.random_range(k..20usize);
        let stride = rng.random_range(1..4usize);
        let pad = rng.random_range(0..3usize);
        let x = uniform(&mut rng, b * ci * l, -1.0, 1.0);
        let w = uniform(&mut rng, co * ci * k, -1.0, 1.0);
        let bias = rng.random_bool(0.5).then(|| uniform(&mut rng, co, -1.0, 1.0));
        let bt = bias.as_ref().map(|v| tensor(&[co], v.clone()));
        let got = conv1d(&tensor(&[b, ci, l], x.clone()), &tensor(&[co, ci, k], w.clone()), bt.as_ref(), stride, pad)
            .unwrap();
        conv.record_all(
            got.data(),
            &naive_conv1d(&x, (b, ci, l), &w, (co, k), bias.as_deref(), stride, pad),
        );

        let din = rng.random_range(1..12usize);
        let dout = rng.random_range(1..12usize);
        let x = uniform(&mut rng, b * din, -1.0, 1.0);
        let w = uniform(&mut rng, dout * din, -1.0, 1.0);
        let bias = rng.random_bool(0.5).then(|| uniform(&mut rng, dout, -1.0, 1.0));
        let bt = bias.as_ref().map(|v| tensor(&[dout], v.clone()));
        let got = linear(&tensor(&[b, din], x.clone()), &tensor(&[dout, din], w.clone()), bt.as_ref()).unwrap();
        dense.record_all(got.data(), &naive_linear(&x, b, din, &w, dout, bias.as_deref()));

        let ci = rng.random_range(1..4usize);
        let co = rng.random_range(1..4usize);
        let k = 2 * rng.random_range(0..3usize) + 1;
        let l = rng.random_range(k..16usize);
        let pad = k / 2;
        let x = uniform(&mut rng, b * 2 * ci * l, -1.0, 1.0);
        let wr = uniform(&mut rng, co * ci * k, -1.0, 1.0);
        let wi = uniform(&mut rng, co * ci * k, -1.0, 1.0);
        let got = complex_conv1d(
            &tensor(&[b, 2 * ci, l], x.clone()),
            &tensor(&[co, ci, k], wr.clone()),
            &tensor(&[co, ci, k], wi.clone()),
            None,
            pad,
        )
        .unwrap();
        cconv.record_all(got.data(), &naive_complex_conv1d(&x, (b, ci, l), &wr, &wi, (co, k), pad));
    }
    (conv, dense, cconv)
}

// ---------------------------------------------------------------------------
// VAT

/// Two-layer tanh network on `[B, din]` inputs.
pub struct SmallNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
}

impl SmallNet {
    pub fn random(rng: &mut Rng8, din: usize, hidden: usize, k: usize) -> Self {
        Self {
            w1: tensor(&[hidden, din], uniform(rng, hidden * din, -1.5, 1.5)),
            b1: tensor(&[hidden], uniform(rng, hidden, -0.5, 0.5)),
            w2: tensor(&[k, hidden], uniform(rng, k * hidden, -1.5, 1.5)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LossError> {
        // tanh(a) = 1 − 2 / (1 + e^{2a})
        let a = linear(x, &self.w1, Some(&self.b1))?;
        let e = a.mul_scalar(2.0).exp().add_scalar(1.0);
        let h = e.ln().mul_scalar(-1.0).exp().mul_scalar(-2.0).add_scalar(1.0);
        Ok(linear(&h, &self.w2, None)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VatSweep {
    pub batches: usize,
    pub max_norm_dev: f64,
    pub min_lds: f64,
}

/// Random networks and batches; per-sample perturbation norms against
/// epsilon, and the smallest LDS seen (including zero perturbations).
pub fn vat_sweep(batches: usize, seed: u64) -> VatSweep {
    use matsei::losses::{vat_perturbation, VatConfig};
    let mut rng = rng(seed);
    let mut out = VatSweep {
        batches,
        max_norm_dev: 0.0,
        min_lds: f64::INFINITY,
    };
    for i in 0..batches {
        let b = rng.random_range(1..7usize);
        let din = rng.random_range(1..9usize);
        let k = rng.random_range(2..5usize);
        let net = SmallNet::random(&mut rng, din, 4, k);
        let x = tensor(&[b, din], uniform(&mut rng, b * din, -1.0, 1.0));
        let cfg = VatConfig {
            epsilon: rng.random_range(0.05..5.0),
            xi: 1e-6,
            power_iters: rng.random_range(1..3usize),
            refine_sign: i % 2 == 0,
        };
        let f = |x: &Tensor| net.forward(x);
        let target = SoftTarget::from_logits(&f(&x).unwrap()).unwrap();
        let r = vat_perturbation(f, &x, &target, &cfg, &mut rng).unwrap();
        for row in r.data().chunks(din) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.max_norm_dev = out.max_norm_dev.max((norm - cfg.epsilon).abs());
        }
        let v = lds(f, &x, &target, &r).unwrap().item();
        let zero = lds(f, &x, &target, &Tensor::zeros(&[b, din])).unwrap().item();
        out.min_lds = out.min_lds.min(v).min(zero);
    }
    out
}

/// Logistic model `q(y=1|x) = σ(w·x + c)` on one 2-D point: cosine between
/// the power-iteration direction and the best of 720 evenly spaced
/// directions at the same radius, minimized over `instances` random toys.
pub fn logistic_toy_cosine(instances: usize, seed: u64) -> f64 {
    use matsei::losses::{vat_perturbation, VatConfig};
    let mut rng = rng(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..instances {
        let w = uniform(&mut rng, 2, -2.0, 2.0);
        let c = rng.random_range(-1.0..1.0);
        let x0 = uniform(&mut rng, 2, -1.0, 1.0);
        let eps = rng.random_range(0.1..1.5);
        let wt = tensor(&[2, 2], vec![w[0], w[1], 0.0, 0.0]);
        let bt = tensor(&[2], vec![c, 0.0]);
        let f = |x: &Tensor| -> Result<Tensor, LossError> { Ok(linear(x, &wt, Some(&bt))?) };
        let x = tensor(&[1, 2], x0.clone());
        let target = SoftTarget::from_logits(&f(&x).unwrap()).unwrap();
        let cfg = VatConfig {
            epsilon: eps,
            ..VatConfig::default()
        };
        let r = vat_perturbation(f, &x, &target, &cfg, &mut rng).unwrap();
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        for j in 0..720 {
            let th = j as f64 * std::f64::consts::PI / 360.0;
            let dir = [th.cos(), th.sin()];
            let moved = tensor(&[1, 2], vec![x0[0] + eps * dir[0], x0[1] + eps * dir[1]]);
            let kl = target.kl_rows(f(&moved).unwrap().data())[0];
            if kl > best.0 {
                best = (kl, dir);
            }
        }
        let rd = r.data();
        let cos = (rd[0] * best.1[0] + rd[1] * best.1[1]) / eps;
        worst = worst.min(cos);
    }
    worst
}

// ---------------------------------------------------------------------------
// file formats

pub fn tiny_dataset_config() -> matsei::sigkit::DatasetConfig {
    matsei::sigkit::DatasetConfig {
        num_classes: 3,
        n: 32,
        per_class_count: 12,
        test_per_class: 4,
        labeled_ratio: 0.5,
        impairment_scale: 4.0,
        ..Default::default()
    }
}

pub fn tiny_dataset() -> matsei::sigkit::Dataset {
    use matsei::sigkit::{build_dataset, normalize_min_max};
    normalize_min_max(build_dataset(&tiny_dataset_config()).unwrap()).unwrap()
}

pub fn tiny_model() -> matsei::cvnet::ModelConfig {
    matsei::cvnet::ModelConfig {
        num_blocks: 2,
        channels: 2,
        kernel: 3,
        variant: matsei::cvnet::Variant::Short,
        num_classes: 3,
        input_length: 32,
        ..Default::default()
    }
}

#[derive(Debug)]
pub struct FormatCheck {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

fn check(name: &'static str, ok: bool, detail: impl Into<String>) -> FormatCheck {
    FormatCheck {
        name,
        ok,
        detail: detail.into(),
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Round trips of both binary formats and one corrupted fixture per
/// designated error, written under `dir`.
pub fn format_suite(dir: &std::path::Path) -> Vec<FormatCheck> {
    use matsei::gradcore::checkpoint::{Checkpoint, CheckpointError};
    use matsei::sigkit::{load_dataset, save_dataset, SigError};
    use matsei::trainer::{Trainer, TrainConfig};
    use std::fs;

    let mut out = Vec::new();
    let ds = tiny_dataset();
    let path = dir.join("ds.bin");
    save_dataset(&ds, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let back = load_dataset(&path).unwrap();
    let again = dir.join("ds2.bin");
    save_dataset(&back, &again).unwrap();
    out.push(check(
        "dataset round trip",
        back == ds && fs::read(&again).unwrap() == bytes,
        format!("{} bytes", bytes.len()),
    ));

    let fixture = |name: &str, mutate: &dyn Fn(&mut Vec<u8>)| -> Result<matsei::sigkit::Dataset, SigError> {
        let p = dir.join(format!("{name}.bin"));
        let mut b = bytes.clone();
        mutate(&mut b);
        fs::write(&p, b).unwrap();
        fs::copy(matsei::sigkit::sidecar_path(&path), matsei::sigkit::sidecar_path(&p)).unwrap();
        load_dataset(&p)
    };
    let r = fixture("bad_magic", &|b| b[0] = b'X');
    out.push(check("dataset bad magic", matches!(r, Err(SigError::BadMagic)), format!("{r:?}")));
    let r = fixture("bad_version", &|b| b[6] = 9);
    out.push(check(
        "dataset unsupported version",
        matches!(r, Err(SigError::UnsupportedVersion(9))),
        format!("{:?}", r.err()),
    ));
    let r = fixture("truncated", &|b| b.truncate(b.len() - 37));
    out.push(check(
        "dataset truncated",
        matches!(r, Err(SigError::Truncated { .. })),
        format!("{:?}", r.err()),
    ));
    let r = fixture("trailing", &|b| b.extend_from_slice(&[0; 5]));
    out.push(check(
        "dataset trailing bytes",
        matches!(r, Err(SigError::Malformed(_))),
        format!("{:?}", r.err()),
    ));
    let r = fixture("flipped", &|b| {
        let i = b.len() / 2;
        b[i] ^= 0x10;
    });
    out.push(check(
        "dataset checksum",
        matches!(r, Err(SigError::ChecksumMismatch { .. })),
        format!("{:?}", r.err()),
    ));
    let lone = dir.join("lone.bin");
    fs::write(&lone, &bytes).unwrap();
    let r = load_dataset(&lone);
    out.push(check("dataset missing sidecar", matches!(r, Err(SigError::Io(_))), format!("{:?}", r.err())));
    fs::write(matsei::sigkit::sidecar_path(&lone), b"{ not json").unwrap();
    let r = load_dataset(&lone);
    out.push(check("dataset bad sidecar", matches!(r, Err(SigError::Json(_))), format!("{:?}", r.err())));

    let cfg = TrainConfig {
        iterations: 2,
        batch_size: 4,
        ..Default::default()
    };
    let mut tr = Trainer::new(&ds, tiny_model(), cfg).unwrap();
    tr.run_iteration(&ds).unwrap();
    let ck = tr.checkpoint();
    let enc = ck.encode();
    let dec = Checkpoint::decode(&enc).unwrap();
    let tensors_equal = dec.tensors.len() == ck.tensors.len()
        && dec
            .tensors
            .iter()
            .zip(&ck.tensors)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape && same_bits(&a.data, &b.data));
    let ck_path = dir.join("state.ck");
    ck.save(&ck_path).unwrap();
    let loaded = Checkpoint::load(&ck_path).unwrap();
    out.push(check(
        "checkpoint round trip",
        tensors_equal && dec.meta == ck.meta && dec.encode() == enc && loaded.encode() == enc,
        format!("{} tensors, {} bytes", ck.tensors.len(), enc.len()),
    ));

    let corrupt = |mutate: &dyn Fn(&mut Vec<u8>)| {
        let mut b = enc.clone();
        mutate(&mut b);
        Checkpoint::decode(&b)
    };
    let r = corrupt(&|b| b[1] = b'?');
    out.push(check(
        "checkpoint bad magic",
        matches!(r, Err(CheckpointError::BadMagic)),
        format!("{:?}", r.err()),
    ));
    let r = corrupt(&|b| b[6] = 7);
    out.push(check(
        "checkpoint unsupported version",
        matches!(r, Err(CheckpointError::UnsupportedVersion(7))),
        format!("{:?}", r.err()),
    ));
    let r = corrupt(&|b| b.truncate(b.len() / 2));
    out.push(check(
        "checkpoint truncated",
        matches!(r, Err(CheckpointError::Truncated { .. })),
        format!("{:?}", r.err()),
    ));
    let r = corrupt(&|b| {
        let i = b.len() - 20;
        b[i] ^= 0x01;
    });
    out.push(check(
        "checkpoint checksum",
        matches!(r, Err(CheckpointError::ChecksumMismatch { .. })),
        format!("{:?}", r.err()),
    ));
    let r = corrupt(&|b| {
        b.truncate(b.len() - 4);
        b.extend_from_slice(&[1, 2, 3]);
        let c = crc32fast::hash(b);
        b.extend_from_slice(&c.to_le_bytes());
    });
    out.push(check(
        "checkpoint trailing bytes",
        matches!(r, Err(CheckpointError::Malformed(_))),
        format!("{:?}", r.err()),
    ));
    let r = dec.get("no.such.tensor");
    out.push(check(
        "checkpoint missing tensor",
        matches!(r, Err(CheckpointError::Missing(_))),
        format!("{:?}", r.err()),
    ));
    let r = Checkpoint::load(dir.join("absent.ck"));
    out.push(check(
        "checkpoint missing file",
        matches!(r, Err(CheckpointError::Io(_))),
        format!("{:?}", r.err()),
    ));
    out
}


// ---------------------------------------------------------------------------
// reductions and schedule

#[derive(Debug, Default)]
pub struct Reductions {
    pub cases: usize,
    pub mismatches: Vec<String>,
}

/// Semi-supervised losses against their supervised counterparts when
/// nothing unlabeled takes part: τ = 1 (nothing is accepted) and empty
/// unlabeled batches. Values must agree bit for bit.
pub fn reduction_suite(trials: usize, seed: u64) -> Reductions {
    use matsei::losses::compute_pseudo_labels;
    let mut rng = rng(seed);
    let mut out = Reductions::default();
    for trial in 0..trials {
        let n = rng.random_range(1..8usize);
        let k = rng.random_range(2..6usize);
        let d = rng.random_range(1..6usize);
        let u = if trial % 2 == 0 { 0 } else { rng.random_range(1..8usize) };
        let tau = if u == 0 { rng.random_range(0.0..1.0) } else { 1.0 };
        let y = labels(&mut rng, n, k);
        // confident logits, so that τ < 1 would accept most rows
        let logits_l = tensor(&[n, k], uniform(&mut rng, n * k, -30.0, 30.0));
        let logits_u = tensor(&[u, k], uniform(&mut rng, u * k, -30.0, 30.0));
        let zl = tensor(&[n, d], uniform(&mut rng, n * d, -2.0, 2.0));
        let zu = tensor(&[u, d], uniform(&mut rng, u * d, -2.0, 2.0));
        let centers = tensor(&[k, d], uniform(&mut rng, k * d, -2.0, 2.0));
        let pseudo = compute_pseudo_labels(&logits_u, tau).unwrap();
        assert_eq!(pseudo.accepted_count(), 0);

        let pairs = [
            (
                "ss_ce",
                ss_ce_loss(&logits_l, &y, &logits_u, &pseudo).unwrap().item(),
                ce_loss(&logits_l, &y).unwrap().item(),
            ),
            (
                "ss_center",
                ss_center_loss(&zl, &y, &zu, &pseudo, &centers).unwrap().item(),
                center_loss(&zl, &y, &centers).unwrap().item(),
            ),
            (
                "ss_pa",
                ss_proxy_anchor_loss(&zl, &y, &zu, &pseudo, &centers, 32.0, 0.1).unwrap().item(),
                proxy_anchor_loss(&zl, &y, &centers, 32.0, 0.1).unwrap().item(),
            ),
        ];
        for (name, ss, sup) in pairs {
            out.cases += 1;
            if ss.to_bits() != sup.to_bits() {
                out.mismatches.push(format!("{name} trial {trial} (u={u}, τ={tau}): {ss} vs {sup}"));
            }
        }
    }
    out
}

/// Branch log and θ_a hashes of a short alternating run.
pub fn schedule_run(iterations: usize) -> (Vec<matsei::trainer::Branch>, bool) {
    use matsei::trainer::{Branch, TrainConfig};
    let ds = tiny_dataset();
    let cfg = TrainConfig {
        iterations,
        batch_size: 4,
        ..Default::default()
    };
    let report = matsei::trainer::train(&ds, tiny_model(), cfg).unwrap().report;
    let mut previous = report.initial_theta_a_hash.clone();
    let mut vat_kept = true;
    for r in &report.records {
        if r.branch == Branch::Vat && r.theta_a_hash != previous {
            vat_kept = false;
        }
        previous = r.theta_a_hash.clone();
    }
    (report.branches(), vat_kept)
}
