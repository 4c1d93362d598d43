//! Differentiable building blocks used by the toy transformer and the QAT
//! operators. Broadcasting is limited to scalars and per-row vectors.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b);
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.op(out, &[self, other], |args| vec![Some(args.grad.clone()), Some(args.grad.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b);
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.op(out, &[self, other], |args| {
            vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b);
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.op(out, &[self, other], |args| {
            vec![
                Some(args.grad.zip_map(args.inputs[1], |g, y| g * y)),
                Some(args.grad.zip_map(args.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(self, c: f32) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape.op(out, &[self], |args| vec![Some(args.grad.clone())])
    }

    pub fn mul_scalar(self, c: f32) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape.op(out, &[self], move |args| vec![Some(args.grad.map(|g| g * c))])
    }

    pub fn div_scalar(self, c: f32) -> Var<'t> {
        let out = self.value().map(|x| x / c);
        self.tape.op(out, &[self], move |args| vec![Some(args.grad.map(|g| g / c))])
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f32::exp);
        self.tape.op(out, &[self], |args| vec![Some(args.grad.zip_map(args.output, |g, y| g * y))])
    }

    pub fn log(self) -> Var<'t> {
        let out = self.value().map(f32::ln);
        self.tape.op(out, &[self], |args| vec![Some(args.grad.zip_map(args.inputs[0], |g, x| g / x))])
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|x| x.max(0.0));
        self.tape.op(out, &[self], |args| {
            vec![Some(args.grad.zip_map(args.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.op(out, &[self], |args| {
            let g = args.grad.item();
            vec![Some(Tensor::full(args.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f32;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.op(out, &[self], |args| {
            vec![Some(args.grad.reshape(args.inputs[0].shape().to_vec()).unwrap())]
        }))
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose2();
        let shape = self.shape();
        self.tape.op(out, &[self], move |args| {
            vec![Some(args.grad.transpose2().reshape(shape.clone()).unwrap())]
        })
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        matmul_impl(self, other, false)
    }

    /// `[M, K] · [N, K]ᵀ`, the layout of a dense layer with output-channel rows.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        matmul_impl(self, other, true)
    }

    /// Batched product `[B, M, K] · [B, K, N]` (or `[B, N, K]ᵀ` when `b_transposed`).
    pub fn bmm(self, other: Var<'t>, b_transposed: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(Error::dim("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if b_transposed { (b.shape()[2], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
        if bk != k {
            return Err(Error::dim("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                b_transposed,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let out = Tensor::from_vec([batch, m, n], out);
        Ok(self.tape.op(out, &[self, other], move |args| {
            let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
            let mut da = vec![0.0; batch * m * k];
            let mut db = vec![0.0; batch * k * n];
            for i in 0..batch {
                let gi = &g.data()[i * m * n..];
                let ai = &a.data()[i * m * k..];
                let bi = &b.data()[i * k * n..];
                // dA = G · Bᵀ
                gemm(m, n, k, gi, false, bi, !b_transposed, &mut da[i * m * k..(i + 1) * m * k], 0.0);
                if b_transposed {
                    // B stored [N, K]: dB = Gᵀ · A
                    gemm(n, m, k, gi, true, ai, false, &mut db[i * k * n..(i + 1) * k * n], 0.0);
                } else {
                    // dB = Aᵀ · G
                    gemm(k, m, n, ai, true, gi, false, &mut db[i * k * n..(i + 1) * k * n], 0.0);
                }
            }
            vec![
                Some(Tensor::from_vec(a.shape().to_vec(), da)),
                Some(Tensor::from_vec(b.shape().to_vec(), db)),
            ]
        }))
    }

    /// Adds a length-`D` vector to every row of a `[.., D]` tensor.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let (rows, cols) = x.rows_cols();
        assert_eq!(b.len(), cols, "add_row: bias length");
        let mut out = x.into_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let out = Tensor::from_vec(self.shape(), out);
        self.tape.op(out, &[self, bias], move |args| {
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for (d, g) in db.iter_mut().zip(&args.grad.data()[r * cols..(r + 1) * cols]) {
                    *d += g;
                }
            }
            vec![Some(args.grad.clone()), Some(Tensor::from_vec(args.inputs[1].shape().to_vec(), db))]
        })
    }

    /// Multiplies row `i` of `self` by `scales[i]`; a single-element `scales`
    /// multiplies every row.
    pub fn scale_rows(self, scales: Var<'t>) -> Var<'t> {
        let (x, s) = (self.value(), scales.value());
        let (rows, cols) = x.rows_cols();
        let per_row = s.len() != 1;
        assert!(!per_row || s.len() == rows, "scale_rows: {} scales for {rows} rows", s.len());
        let pick = move |r: usize| if per_row { r } else { 0 };
        let mut out = x.into_vec();
        for r in 0..rows {
            let sr = s.data()[pick(r)];
            out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= sr);
        }
        let out = Tensor::from_vec(self.shape(), out);
        self.tape.op(out, &[self, scales], move |args| {
            let (x, s, g) = (args.inputs[0], args.inputs[1], args.grad);
            let mut dx = g.clone().into_vec();
            let mut ds = vec![0.0; s.len()];
            for r in 0..rows {
                let sr = s.data()[pick(r)];
                let span = r * cols..(r + 1) * cols;
                dx[span.clone()].iter_mut().for_each(|v| *v *= sr);
                ds[pick(r)] += g.data()[span.clone()].iter().zip(&x.data()[span]).map(|(a, b)| a * b).sum::<f32>();
            }
            vec![Some(Tensor::from_vec(x.shape().to_vec(), dx)), Some(Tensor::from_vec(s.shape().to_vec(), ds))]
        })
    }

    /// Softmax over the last dimension.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let mut out = x.into_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::from_vec(self.shape(), out);
        self.tape.op(out, &[self], move |args| {
            let (y, g) = (args.output, args.grad);
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let (yr, gr) = (&y.data()[span.clone()], &g.data()[span.clone()]);
                let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dx[span].iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_vec(y.shape().to_vec(), dx))]
        })
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f32) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let (gv, bv) = (gain.value(), bias.value());
        assert!(gv.len() == cols && bv.len() == cols, "layer_norm: parameter length");
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let xr = &x.data()[span.clone()];
            let mean = xr.iter().sum::<f32>() / cols as f32;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (j, &v) in xr.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_vec(self.shape(), out);
        self.tape.op(out, &[self, gain, bias], move |args| {
            let (g, gain) = (args.grad, args.inputs[1]);
            let mut dx = vec![0.0; g.len()];
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let (gr, hr) = (&g.data()[span.clone()], &xhat[span.clone()]);
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..cols {
                    let dh = gr[j] * gain.data()[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                }
                mean_dh /= cols as f32;
                mean_dh_h /= cols as f32;
                for j in 0..cols {
                    let dh = gr[j] * gain.data()[j];
                    dx[r * cols + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                }
            }
            vec![
                Some(Tensor::from_vec(g.shape().to_vec(), dx)),
                Some(Tensor::from_vec(args.inputs[1].shape().to_vec(), dgain)),
                Some(Tensor::from_vec(args.inputs[2].shape().to_vec(), dbias)),
            ]
        })
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::dim("embedding", format!("table shape {:?}", table.shape())));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("embedding", format!("id {bad} out of vocabulary {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(table.row(i));
        }
        let ids = ids.to_vec();
        let out = Tensor::matrix(ids.len(), d, out);
        Ok(self.tape.op(out, &[self], move |args| {
            let mut dt = vec![0.0; v * d];
            for (r, &i) in ids.iter().enumerate() {
                for (acc, g) in dt[i * d..(i + 1) * d].iter_mut().zip(args.grad.row(r)) {
                    *acc += g;
                }
            }
            vec![Some(Tensor::matrix(v, d, dt))]
        }))
    }

    /// Rearranges `[B*T, H*Dh]` into per-head `[B*H, T, Dh]` blocks.
    pub fn split_heads(self, batch: usize, time: usize, heads: usize) -> Var<'t> {
        let x = self.value();
        let (_, width) = x.rows_cols();
        let dh = width / heads;
        let out = Tensor::from_vec([batch * heads, time, dh], permute_heads(x.data(), batch, time, heads, dh, true));
        self.tape.op(out, &[self], move |args| {
            let back = permute_heads(args.grad.data(), batch, time, heads, dh, false);
            vec![Some(Tensor::from_vec(args.inputs[0].shape().to_vec(), back))]
        })
    }

    /// Inverse of [`Var::split_heads`].
    pub fn merge_heads(self, batch: usize, time: usize, heads: usize) -> Var<'t> {
        let x = self.value();
        let dh = x.shape()[2];
        let out = Tensor::matrix(batch * time, heads * dh, permute_heads(x.data(), batch, time, heads, dh, false));
        self.tape.op(out, &[self], move |args| {
            let back = permute_heads(args.grad.data(), batch, time, heads, dh, true);
            vec![Some(Tensor::from_vec(args.inputs[0].shape().to_vec(), back))]
        })
    }

    /// Mean token cross-entropy of `[N, V]` logits, weighting row `i` by `weights[i]`.
    pub fn cross_entropy(self, targets: &[usize], weights: &[f32]) -> Result<Var<'t>> {
        let logits = self.value();
        let (n, v) = logits.rows_cols();
        if logits.rank() != 2 || targets.len() != n || weights.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?}, {} targets, {} weights", logits.shape(), targets.len(), weights.len()),
            ));
        }
        if targets.iter().any(|&t| t >= v) {
            return Err(Error::dim("cross_entropy", "target id out of range"));
        }
        let total: f32 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract("cross_entropy with zero total weight".into()));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = logits.row(r);
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0f32;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - m).exp();
                z += *p;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p /= z);
            let lse = m + z.ln();
            loss += (weights[r] * (lse - row[targets[r]])) as f64;
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        let out = Tensor::scalar((loss / total as f64) as f32);
        Ok(self.tape.op(out, &[self], move |args| {
            let g = args.grad.item() / total;
            let mut d = probs.clone();
            for r in 0..n {
                d[r * v + targets[r]] -= 1.0;
                let w = weights[r] * g;
                d[r * v..(r + 1) * v].iter_mut().for_each(|x| *x *= w);
            }
            vec![Some(Tensor::matrix(n, v, d))]
        }))
    }
}

impl Tape {
    /// Stacks rank-2 tensors with equal column counts along rows.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let cols = values.first().map_or(0, |t| t.rows_cols().1);
        if values.iter().any(|t| t.rank() != 2 || t.shape()[1] != cols) {
            return Err(Error::dim("concat_rows", "all parts must be [*, D] with equal D"));
        }
        let rows: Vec<usize> = values.iter().map(|t| t.shape()[0]).collect();
        let data: Vec<f32> = values.iter().flat_map(|t| t.data().iter().copied()).collect();
        let out = Tensor::matrix(rows.iter().sum(), cols, data);
        Ok(self.op(out, parts, move |args| {
            let mut start = 0;
            rows.iter()
                .map(|&r| {
                    let part = args.grad.data()[start * cols..(start + r) * cols].to_vec();
                    start += r;
                    Some(Tensor::matrix(r, cols, part))
                })
                .collect()
        }))
    }
}

fn matmul_impl<'t>(a: Var<'t>, b: Var<'t>, b_t: bool) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let op = if b_t { "matmul_nt" } else { "matmul" };
    if av.rank() != 2 || bv.rank() != 2 {
        return Err(Error::dim(op, format!("{:?} x {:?}", av.shape(), bv.shape())));
    }
    let (m, k) = (av.shape()[0], av.shape()[1]);
    let (bk, n) = if b_t { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
    if k != bk {
        return Err(Error::dim(op, format!("{:?} x {:?}", av.shape(), bv.shape())));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, av.data(), false, bv.data(), b_t, &mut out, 0.0);
    let out = Tensor::matrix(m, n, out);
    Ok(a.tape.op(out, &[a, b], move |args| {
        let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
        let mut da = vec![0.0; m * k];
        let mut db = vec![0.0; k * n];
        // dA = G · Bᵀ
        gemm(m, n, k, g.data(), false, b.data(), !b_t, &mut da, 0.0);
        if b_t {
            // B stored [N, K]: dB = Gᵀ · A
            gemm(n, m, k, g.data(), true, a.data(), false, &mut db, 0.0);
        } else {
            // dB = Aᵀ · G
            gemm(k, m, n, a.data(), true, g.data(), false, &mut db, 0.0);
        }
        vec![Some(Tensor::matrix(m, k, da)), Some(Tensor::from_vec(b.shape().to_vec(), db))]
    }))
}

/// `to_heads`: `[B*T, H*Dh] -> [B*H, T, Dh]`; otherwise the inverse.
fn permute_heads(src: &[f32], batch: usize, time: usize, heads: usize, dh: usize, to_heads: bool) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for t in 0..time {
            for h in 0..heads {
                let flat = (b * time + t) * heads * dh + h * dh;
                let split = ((b * heads + h) * time + t) * dh;
                let (from, to) = if to_heads { (flat, split) } else { (split, flat) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}
