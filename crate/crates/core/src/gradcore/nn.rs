//! Layer primitives: convolution, affine maps, normalization, pooling and
//! the softmax family.

use super::parallel;
use super::tensor::Tensor;
use super::GradError;

/// `C = A·B + beta·C` over strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the assertions above bound every index the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// 1-D cross-correlation. `input` is `[B, C_in, L]`, `kernel` is
/// `[C_out, C_in, k]`, output `[B, C_out, L_out]` with
/// `L_out = (L + 2·padding − k) / stride + 1`.
pub fn conv1d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor, GradError> {
    let (xs, ws) = (input.shape(), kernel.shape());
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
        return Err(GradError::shape("conv1d", format!("input {xs:?}, kernel {ws:?}")));
    }
    if stride == 0 {
        return Err(GradError::InvalidArgument("conv1d stride must be ≥ 1".into()));
    }
    let (batch, cin, len) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    if k == 0 || k > len + 2 * padding {
        return Err(GradError::shape(
            "conv1d",
            format!("kernel {k} longer than padded input {}", len + 2 * padding),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(GradError::shape("conv1d", format!("bias {:?}", b.shape())));
        }
    }
    let lout = (len + 2 * padding - k) / stride + 1;
    let ck = cin * k;
    let cols_w = batch * lout;

    // im2col: cols[(ci·k + j), b·lout + t] = x[b, ci, t·stride + j − padding]
    let x = input.data();
    let mut cols = vec![0.0; ck * cols_w];
    parallel::for_each_chunk(&mut cols, cols_w.max(1), |r, row| {
        let (ci, j) = (r / k, r % k);
        for b in 0..batch {
            let src = &x[(b * cin + ci) * len..(b * cin + ci + 1) * len];
            for t in 0..lout {
                let pos = (t * stride + j) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    row[b * lout + t] = src[pos as usize];
                }
            }
        }
    });

    let w = kernel.data();
    let bias_data: Option<Vec<f64>> = bias.map(|b| b.data().to_vec());
    let mut out = vec![0.0; batch * cout * lout];
    parallel::for_each_chunk(&mut out, (cout * lout).max(1), |b, yb| {
        if let Some(bd) = &bias_data {
            for (co, bv) in bd.iter().enumerate() {
                yb[co * lout..(co + 1) * lout].fill(*bv);
            }
        }
        gemm(
            cout,
            ck,
            lout,
            w,
            ck,
            1,
            &cols[b * lout..],
            cols_w,
            1,
            if bias_data.is_some() { 1.0 } else { 0.0 },
            yb,
            lout,
            1,
        );
    });

    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![batch, cout, lout],
        out,
        parents,
        Box::new(move |ctx| {
            let g = ctx.grad;
            let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(3);

            if ctx.parents[0].requires_grad() {
                let w = ctx.parents[1].data();
                let mut dx = vec![0.0; batch * cin * len];
                parallel::for_each_chunk(&mut dx, (cin * len).max(1), |b, dxb| {
                    let mut dcol = vec![0.0; ck * lout];
                    // dcol = Wᵀ · dy_b
                    gemm(
                        ck,
                        cout,
                        lout,
                        w,
                        1,
                        ck,
                        &g[b * cout * lout..],
                        lout,
                        1,
                        0.0,
                        &mut dcol,
                        lout,
                        1,
                    );
                    for ci in 0..cin {
                        for j in 0..k {
                            let row = &dcol[(ci * k + j) * lout..(ci * k + j + 1) * lout];
                            for (t, v) in row.iter().enumerate() {
                                let pos = (t * stride + j) as isize - padding as isize;
                                if pos >= 0 && (pos as usize) < len {
                                    dxb[ci * len + pos as usize] += v;
                                }
                            }
                        }
                    }
                });
                grads.push(Some(dx));
            } else {
                grads.push(None);
            }

            if ctx.parents[1].requires_grad() {
                // dW = dY(cout × B·lout) · colsᵀ(B·lout × ck)
                let mut gy = vec![0.0; cout * cols_w];
                for b in 0..batch {
                    for co in 0..cout {
                        gy[co * cols_w + b * lout..co * cols_w + (b + 1) * lout]
                            .copy_from_slice(&g[(b * cout + co) * lout..(b * cout + co + 1) * lout]);
                    }
                }
                let mut dw = vec![0.0; cout * ck];
                gemm(cout, cols_w, ck, &gy, cols_w, 1, &cols, 1, cols_w, 0.0, &mut dw, ck, 1);
                grads.push(Some(dw));
            } else {
                grads.push(None);
            }

            if ctx.parents.len() == 3 {
                if ctx.parents[2].requires_grad() {
                    let mut db = vec![0.0; cout];
                    for b in 0..batch {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            *dbv += g[(b * cout + co) * lout..(b * cout + co + 1) * lout]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    grads.push(Some(db));
                } else {
                    grads.push(None);
                }
            }
            grads
        }),
    ))
}

/// Affine map `x · Wᵀ + b` for `x: [N, D_in]`, `W: [D_out, D_in]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, GradError> {
    let (xs, ws) = (input.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(GradError::shape("linear", format!("input {xs:?}, weight {ws:?}")));
    }
    let (n, din, dout) = (xs[0], xs[1], ws[0]);
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(GradError::shape("linear", format!("bias {:?}", b.shape())));
        }
    }
    let mut out = vec![0.0; n * dout];
    if let Some(b) = bias {
        for row in out.chunks_mut(dout.max(1)) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        n,
        din,
        dout,
        input.data(),
        din,
        1,
        weight.data(),
        1,
        din,
        if bias.is_some() { 1.0 } else { 0.0 },
        &mut out,
        dout,
        1,
    );
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![n, dout],
        out,
        parents,
        Box::new(move |ctx| {
            let g = ctx.grad;
            let mut grads = Vec::with_capacity(3);
            if ctx.parents[0].requires_grad() {
                let mut dx = vec![0.0; n * din];
                gemm(n, dout, din, g, dout, 1, ctx.parents[1].data(), din, 1, 0.0, &mut dx, din, 1);
                grads.push(Some(dx));
            } else {
                grads.push(None);
            }
            if ctx.parents[1].requires_grad() {
                let mut dw = vec![0.0; dout * din];
                gemm(dout, n, din, g, 1, dout, ctx.parents[0].data(), din, 1, 0.0, &mut dw, din, 1);
                grads.push(Some(dw));
            } else {
                grads.push(None);
            }
            if ctx.parents.len() == 3 {
                let mut db = vec![0.0; dout];
                for row in g.chunks(dout.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                grads.push(Some(db));
            }
            grads
        }),
    ))
}

/// Which statistics batch normalization standardizes with.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Batch statistics; the caller folds them into running buffers.
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batch (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    /// Momentum update of running buffers; the running variance uses the
    /// unbiased batch estimate.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        let correction = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * self.mean[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * self.var[c] * correction;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over `[B, C]` or `[B, C, L]` with affine `(gamma, beta)`.
pub fn batchnorm1d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: BnMode<'_>,
) -> Result<(Tensor, Option<BatchStats>), GradError> {
    let s = input.shape();
    let (batch, ch, len) = match s.len() {
        2 => (s[0], s[1], 1),
        3 => (s[0], s[1], s[2]),
        _ => return Err(GradError::shape("batchnorm1d", format!("{s:?}"))),
    };
    if gamma.shape() != [ch] || beta.shape() != [ch] {
        return Err(GradError::shape(
            "batchnorm1d",
            format!("affine {:?}/{:?} for {ch} channels", gamma.shape(), beta.shape()),
        ));
    }
    let x = input.data();
    let m = batch * len;
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            if batch < 2 {
                return Err(GradError::BatchTooSmall(batch));
            }
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for c in 0..ch {
                let mut s = 0.0;
                for b in 0..batch {
                    s += x[(b * ch + c) * len..(b * ch + c + 1) * len].iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for b in 0..batch {
                    v += x[(b * ch + c) * len..(b * ch + c + 1) * len]
                        .iter()
                        .map(|x| (x - mu) * (x - mu))
                        .sum::<f64>();
                }
                mean[c] = mu;
                var[c] = v / m as f64;
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count: m,
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval { mean, var } => {
            if mean.len() != ch || var.len() != ch {
                return Err(GradError::shape("batchnorm1d", "running statistics width"));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let train = stats.is_some();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * len;
            for t in 0..len {
                let h = (x[base + t] - mean[c]) * inv_std[c];
                xhat[base + t] = h;
                out[base + t] = gd[c] * h + bd[c];
            }
        }
    }
    let result = Tensor::from_op(
        s.to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx| {
            let g = ctx.grad;
            let gd = ctx.parents[1].data();
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for b in 0..batch {
                for c in 0..ch {
                    let base = (b * ch + c) * len;
                    for t in 0..len {
                        sum_g[c] += g[base + t];
                        sum_gx[c] += g[base + t] * xhat[base + t];
                    }
                }
            }
            let dx = if ctx.parents[0].requires_grad() {
                let mut dx = vec![0.0; g.len()];
                let mf = m as f64;
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * len;
                        let scale = gd[c] * inv_std[c];
                        for t in 0..len {
                            dx[base + t] = if train {
                                scale / mf * (mf * g[base + t] - sum_g[c] - xhat[base + t] * sum_gx[c])
                            } else {
                                scale * g[base + t]
                            };
                        }
                    }
                }
                Some(dx)
            } else {
                None
            };
            vec![dx, Some(sum_gx), Some(sum_g)]
        }),
    );
    Ok((result, stats))
}

fn pool_out_len(len: usize, window: usize) -> usize {
    len.div_ceil(window)
}

fn route_pool(
    shape: Vec<usize>,
    input: &Tensor,
    out: Vec<f64>,
    src_index: Vec<usize>,
) -> Tensor {
    let total = input.numel();
    Tensor::from_op(
        shape,
        out,
        vec![input.clone()],
        Box::new(move |ctx| {
            let mut g = vec![0.0; total];
            for (&i, gv) in src_index.iter().zip(ctx.grad) {
                g[i] += gv;
            }
            vec![Some(g)]
        }),
    )
}

/// Per-channel maximum over non-overlapping windows of `[B, C, L]`. A
/// trailing partial window pools over the elements it has. Ties go to the
/// earliest index, which is where the gradient is routed.
pub fn maxpool1d(input: &Tensor, window: usize) -> Result<Tensor, GradError> {
    let s = input.shape();
    if s.len() != 3 || window == 0 {
        return Err(GradError::shape("maxpool1d", format!("{s:?}, window {window}")));
    }
    let (batch, ch, len) = (s[0], s[1], s[2]);
    let lout = pool_out_len(len, window);
    let x = input.data();
    let mut out = Vec::with_capacity(batch * ch * lout);
    let mut idx = Vec::with_capacity(batch * ch * lout);
    for row in 0..batch * ch {
        let base = row * len;
        for j in 0..lout {
            let lo = j * window;
            let hi = (lo + window).min(len);
            let mut best = lo;
            for t in lo + 1..hi {
                if x[base + t] > x[base + best] {
                    best = t;
                }
            }
            out.push(x[base + best]);
            idx.push(base + best);
        }
    }
    Ok(route_pool(vec![batch, ch, lout], input, out, idx))
}

/// Magnitude pooling for paired planes. `input` is `[B, 2C, L]` with real
/// planes in channels `0..C` and imaginary planes in `C..2C`; each window
/// keeps the complex sample of largest `re² + im²` (earliest on ties).
pub fn complex_maxpool1d(input: &Tensor, window: usize) -> Result<Tensor, GradError> {
    let s = input.shape();
    if s.len() != 3 || s[1] % 2 != 0 || window == 0 {
        return Err(GradError::shape("complex_maxpool1d", format!("{s:?}, window {window}")));
    }
    let (batch, ch2, len) = (s[0], s[1], s[2]);
    let c = ch2 / 2;
    let lout = pool_out_len(len, window);
    let x = input.data();
    let mut out = vec![0.0; batch * ch2 * lout];
    let mut idx = vec![0usize; batch * ch2 * lout];
    for b in 0..batch {
        for ci in 0..c {
            let re = (b * ch2 + ci) * len;
            let im = (b * ch2 + ci + c) * len;
            let ore = (b * ch2 + ci) * lout;
            let oim = (b * ch2 + ci + c) * lout;
            for j in 0..lout {
                let lo = j * window;
                let hi = (lo + window).min(len);
                let mag = |t: usize| x[re + t] * x[re + t] + x[im + t] * x[im + t];
                let mut best = lo;
                for t in lo + 1..hi {
                    if mag(t) > mag(best) {
                        best = t;
                    }
                }
                out[ore + j] = x[re + best];
                out[oim + j] = x[im + best];
                idx[ore + j] = re + best;
                idx[oim + j] = im + best;
            }
        }
    }
    Ok(route_pool(vec![batch, ch2, lout], input, out, idx))
}

/// Real block kernel `[[Wr, −Wi], [Wi, Wr]]` of shape `[2·C_out, 2·C_in, k]`
/// so one real convolution over paired planes performs the complex product.
pub fn complex_kernel(wr: &Tensor, wi: &Tensor) -> Result<Tensor, GradError> {
    let s = wr.shape();
    if s.len() != 3 || wi.shape() != s {
        return Err(GradError::shape(
            "complex_kernel",
            format!("{:?} vs {:?}", s, wi.shape()),
        ));
    }
    let (co, ci, k) = (s[0], s[1], s[2]);
    let (r, i) = (wr.data(), wi.data());
    let ci2 = 2 * ci;
    let mut out = vec![0.0; 2 * co * ci2 * k];
    let at = move |o: usize, inp: usize| (o * ci2 + inp) * k;
    for o in 0..co {
        for c in 0..ci {
            let src = (o * ci + c) * k;
            for t in 0..k {
                out[at(o, c) + t] = r[src + t];
                out[at(o, c + ci) + t] = -i[src + t];
                out[at(o + co, c) + t] = i[src + t];
                out[at(o + co, c + ci) + t] = r[src + t];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![2 * co, ci2, k],
        out,
        vec![wr.clone(), wi.clone()],
        Box::new(move |ctx| {
            let g = ctx.grad;
            let mut gr = vec![0.0; co * ci * k];
            let mut gi = vec![0.0; co * ci * k];
            for o in 0..co {
                for c in 0..ci {
                    let dst = (o * ci + c) * k;
                    for t in 0..k {
                        gr[dst + t] = g[at(o, c) + t] + g[at(o + co, c + ci) + t];
                        gi[dst + t] = g[at(o + co, c) + t] - g[at(o, c + ci) + t];
                    }
                }
            }
            vec![Some(gr), Some(gi)]
        }),
    ))
}

fn check_rows(op: &'static str, t: &Tensor) -> Result<(usize, usize), GradError> {
    match t.shape() {
        [n, k] if *k > 0 => Ok((*n, *k)),
        s => Err(GradError::shape(op, format!("{s:?}"))),
    }
}

/// Row-wise softmax of `[N, K]`, shifted by the row maximum.
pub fn softmax(input: &Tensor) -> Result<Tensor, GradError> {
    let (n, k) = check_rows("softmax", input)?;
    let x = input.data();
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        let row = &x[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        out[r * k..(r + 1) * k].iter_mut().for_each(|o| *o /= z);
    }
    Ok(Tensor::from_op(
        vec![n, k],
        out,
        vec![input.clone()],
        Box::new(move |ctx| {
            let mut g = vec![0.0; n * k];
            for r in 0..n {
                let y = &ctx.out[r * k..(r + 1) * k];
                let go = &ctx.grad[r * k..(r + 1) * k];
                let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    g[r * k + j] = y[j] * (go[j] - dot);
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Row-wise log-softmax of `[N, K]`.
pub fn log_softmax(input: &Tensor) -> Result<Tensor, GradError> {
    let (n, k) = check_rows("log_softmax", input)?;
    let x = input.data();
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        let row = &x[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (o, v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Ok(Tensor::from_op(
        vec![n, k],
        out,
        vec![input.clone()],
        Box::new(move |ctx| {
            let mut g = vec![0.0; n * k];
            for r in 0..n {
                let y = &ctx.out[r * k..(r + 1) * k];
                let go = &ctx.grad[r * k..(r + 1) * k];
                let s: f64 = go.iter().sum();
                for j in 0..k {
                    g[r * k + j] = go[j] - y[j].exp() * s;
                }
            }
            vec![Some(g)]
        }),
    ))
}
