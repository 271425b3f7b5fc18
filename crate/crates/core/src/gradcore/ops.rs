//! Elementwise, reduction and indexing operations.

use super::tensor::{numel, Tensor};
use super::GradError;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), GradError> {
    if a.shape() != b.shape() {
        return Err(GradError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |ctx| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x)
                .zip(ctx.out)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        }),
    )
}

fn row_len(t: &Tensor) -> usize {
    numel(&t.shape()[1..])
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, GradError> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, GradError> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|g| -g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, GradError> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let ga = ctx.grad.iter().zip(b).map(|(g, b)| g * b).collect();
                let gb = ctx.grad.iter().zip(a).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary(self, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    /// `ln(1 + x)` evaluated without cancellation for small `x`.
    pub fn ln_1p(&self) -> Tensor {
        unary(self, f64::ln_1p, |x, _| 1.0 / (1.0 + x))
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `max(x, lo)`; no gradient flows where the floor is active.
    pub fn clamp_min(&self, lo: f64) -> Tensor {
        unary(self, move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// `Σ self[i] * weights[i]` with constant weights.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Tensor, GradError> {
        if weights.len() != self.numel() {
            return Err(GradError::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), self.numel()),
            ));
        }
        let s = self.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        let w = weights.to_vec();
        Ok(Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(w.iter().map(|w| w * ctx.grad[0]).collect())]),
        ))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&self, c: &[f64]) -> Result<Tensor, GradError> {
        if c.len() != self.numel() {
            return Err(GradError::shape("mul_const", "length mismatch"));
        }
        let data = self.data().iter().zip(c).map(|(a, b)| a * b).collect();
        let c = c.to_vec();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().zip(&c).map(|(g, c)| g * c).collect())]),
        ))
    }

    /// Adds a constant array of the same shape.
    pub fn add_const(&self, c: &[f64]) -> Result<Tensor, GradError> {
        if c.len() != self.numel() {
            return Err(GradError::shape("add_const", "length mismatch"));
        }
        let data = self.data().iter().zip(c).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, GradError> {
        if numel(shape) != self.numel() {
            return Err(GradError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Element `i` of a flat view, as a scalar.
    pub fn index(&self, i: usize) -> Result<Tensor, GradError> {
        let n = self.numel();
        if i >= n {
            return Err(GradError::IndexOutOfRange {
                op: "index",
                index: i,
                bound: n,
            });
        }
        Ok(Tensor::from_op(
            Vec::new(),
            vec![self.data()[i]],
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; n];
                g[i] = ctx.grad[0];
                vec![Some(g)]
            }),
        ))
    }
}

/// Concatenates along the first axis.
pub fn concat(parts: &[Tensor]) -> Result<Tensor, GradError> {
    let first = parts
        .first()
        .ok_or_else(|| GradError::InvalidArgument("concat of zero tensors".into()))?;
    if first.shape().is_empty() {
        return Err(GradError::shape("concat", "cannot concatenate scalars"));
    }
    let tail = &first.shape()[1..];
    let mut rows = 0;
    for p in parts {
        if p.shape().is_empty() || &p.shape()[1..] != tail {
            return Err(GradError::shape(
                "concat",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        rows += p.shape()[0];
    }
    let mut data = Vec::with_capacity(rows * numel(tail));
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    let lens: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    Ok(Tensor::from_op(
        shape,
        data,
        parts.to_vec(),
        Box::new(move |ctx| {
            let mut off = 0;
            lens.iter()
                .map(|&l| {
                    let g = ctx.grad[off..off + l].to_vec();
                    off += l;
                    Some(g)
                })
                .collect()
        }),
    ))
}

/// Rows `start..end` along the first axis.
pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor, GradError> {
    let n = a.shape().first().copied().unwrap_or(0);
    if start > end || end > n {
        return Err(GradError::shape(
            "slice_rows",
            format!("range {start}..{end} of {n} rows"),
        ));
    }
    let rl = row_len(a);
    let mut shape = a.shape().to_vec();
    shape[0] = end - start;
    let total = a.numel();
    Ok(Tensor::from_op(
        shape,
        a.data()[start * rl..end * rl].to_vec(),
        vec![a.clone()],
        Box::new(move |ctx| {
            let mut g = vec![0.0; total];
            g[start * rl..end * rl].copy_from_slice(ctx.grad);
            vec![Some(g)]
        }),
    ))
}

/// Selects rows by index (repeats allowed); gradients scatter-add back.
pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor, GradError> {
    let n = a.shape().first().copied().unwrap_or(0);
    let rl = row_len(a);
    let mut data = Vec::with_capacity(idx.len() * rl);
    for &i in idx {
        if i >= n {
            return Err(GradError::IndexOutOfRange {
                op: "gather_rows",
                index: i,
                bound: n,
            });
        }
        data.extend_from_slice(&a.data()[i * rl..(i + 1) * rl]);
    }
    let mut shape = a.shape().to_vec();
    shape[0] = idx.len();
    let idx = idx.to_vec();
    let total = a.numel();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone()],
        Box::new(move |ctx| {
            let mut g = vec![0.0; total];
            for (k, &i) in idx.iter().enumerate() {
                let src = &ctx.grad[k * rl..(k + 1) * rl];
                g[i * rl..(i + 1) * rl]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
            vec![Some(g)]
        }),
    ))
}

/// `out[i] = a[rows[i], cols[i]]` for a 2-D tensor.
pub fn pick(a: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor, GradError> {
    if a.shape().len() != 2 || rows.len() != cols.len() {
        return Err(GradError::shape("pick", format!("{:?}", a.shape())));
    }
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let mut flat = Vec::with_capacity(rows.len());
    for (&r, &c) in rows.iter().zip(cols) {
        if r >= n {
            return Err(GradError::IndexOutOfRange {
                op: "pick",
                index: r,
                bound: n,
            });
        }
        if c >= k {
            return Err(GradError::IndexOutOfRange {
                op: "pick",
                index: c,
                bound: k,
            });
        }
        flat.push(r * k + c);
    }
    let data = flat.iter().map(|&f| a.data()[f]).collect();
    let total = a.numel();
    Ok(Tensor::from_op(
        vec![flat.len()],
        data,
        vec![a.clone()],
        Box::new(move |ctx| {
            let mut g = vec![0.0; total];
            for (&f, gv) in flat.iter().zip(ctx.grad) {
                g[f] += gv;
            }
            vec![Some(g)]
        }),
    ))
}

/// Scales each row of a 2-D tensor to unit Euclidean norm. Rows with norm
/// below 1e-12 are rejected.
pub fn row_l2_normalize(a: &Tensor) -> Result<Tensor, GradError> {
    if a.shape().len() != 2 {
        return Err(GradError::shape("row_l2_normalize", format!("{:?}", a.shape())));
    }
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let mut norms = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        let row = &a.data()[r * d..(r + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm.is_nan() || norm < 1e-12 {
            return Err(GradError::ZeroNorm {
                op: "row_l2_normalize",
                row: r,
            });
        }
        norms.push(norm);
        data.extend(row.iter().map(|x| x / norm));
    }
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |ctx| {
            // d(x/|x|) = (g - y (y·g)) / |x|
            let mut g = vec![0.0; n * d];
            for r in 0..n {
                let y = &ctx.out[r * d..(r + 1) * d];
                let go = &ctx.grad[r * d..(r + 1) * d];
                let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    g[r * d + j] = (go[j] - y[j] * dot) / norms[r];
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Column-wise `ln(1 + Σ_i mask[i,k] · exp(x[i,k]))` for a 2-D `x`, shifted
/// by the running maximum so large exponents cannot overflow. Returns `[K]`.
pub fn masked_log1p_sum_exp(x: &Tensor, mask: &[bool]) -> Result<Tensor, GradError> {
    if x.shape().len() != 2 || mask.len() != x.numel() {
        return Err(GradError::shape(
            "masked_log1p_sum_exp",
            format!("{:?} with mask of {}", x.shape(), mask.len()),
        ));
    }
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; k];
    for c in 0..k {
        // the implicit `1` is exp(0), so the shift is at least 0
        let mut m = 0.0f64;
        for r in 0..n {
            if mask[r * k + c] {
                m = m.max(xd[r * k + c]);
            }
        }
        let mut s = 0.0;
        for r in 0..n {
            if mask[r * k + c] {
                s += (xd[r * k + c] - m).exp();
            }
        }
        out[c] = if m == 0.0 { s.ln_1p() } else { m + ((-m).exp() + s).ln() };
    }
    let mask = mask.to_vec();
    Ok(Tensor::from_op(
        vec![k],
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let xd = ctx.parents[0].data();
            let mut g = vec![0.0; n * k];
            for r in 0..n {
                for c in 0..k {
                    if mask[r * k + c] {
                        g[r * k + c] = ctx.grad[c] * (xd[r * k + c] - ctx.out[c]).exp();
                    }
                }
            }
            vec![Some(g)]
        }),
    ))
}
