//! Per-row and whole-tensor norms used to derive quantization scales.
//!
//! All three reductions share one kernel: pick a set of entries per group
//! (every entry, or the `k` largest magnitudes), then take their `L_p` norm.
//! For `p = ∞` the gradient goes to a single entry, the first maximizer.

use serde::{Deserialize, Serialize};

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reduction granularity: one value per row (output channel) or one for the tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    All,
}

#[inline]
fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Indices of the `k` largest magnitudes in `values`, lower index first on ties.
pub(crate) fn topk_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |&i: &usize| (std::cmp::Reverse(ordered(values[i].abs())), i);
    if k < idx.len() {
        idx.select_nth_unstable_by_key(k, key);
        idx.truncate(k);
    }
    idx.sort_unstable_by_key(key);
    idx
}

fn ordered(x: f32) -> u32 {
    // magnitudes are non-negative, so the bit pattern is monotone
    x.to_bits()
}

/// Norm of the selected entries (`sel[j]` true) of one group, plus the
/// derivative of the norm with respect to every entry.
fn group_norm(values: &[f32], sel: Option<&[bool]>, p: f64) -> (f32, Vec<f32>) {
    let chosen = |j: usize| sel.is_none_or(|s| s[j]);
    let mut grad = vec![0.0; values.len()];
    if p.is_infinite() {
        let mut best = 0.0f32;
        let mut arg = None;
        for (j, &v) in values.iter().enumerate() {
            if chosen(j) && (arg.is_none() || v.abs() > best) {
                best = v.abs();
                arg = Some(j);
            }
        }
        if let Some(j) = arg {
            grad[j] = sign(values[j]);
        }
        return (best, grad);
    }
    let m = values
        .iter()
        .enumerate()
        .filter(|&(j, _)| chosen(j))
        .fold(0.0f64, |m, (_, &v)| m.max(v.abs() as f64));
    if m == 0.0 {
        return (0.0, grad);
    }
    let mut acc = 0.0f64;
    for (j, &v) in values.iter().enumerate() {
        if chosen(j) {
            acc += (v.abs() as f64 / m).powf(p);
        }
    }
    let norm = m * acc.powf(1.0 / p);
    for (j, &v) in values.iter().enumerate() {
        if chosen(j) {
            grad[j] = sign(v) * (v.abs() as f64 / norm).powf(p - 1.0) as f32;
        }
    }
    (norm as f32, grad)
}

fn check_p(p: f64) -> Result<()> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Parameter(format!("norm order p must be >= 1, got {p}")));
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// Maximum absolute value per row or over the whole tensor.
    pub fn reduce_max_abs(self, axis: Axis) -> Var<'t> {
        self.norm_impl(f64::INFINITY, None, axis)
    }

    /// `(Σ |w|^p)^{1/p}` per row or over the tensor; `p = ∞` is the max-abs.
    pub fn lp_norm(self, p: f64, axis: Axis) -> Result<Var<'t>> {
        check_p(p)?;
        Ok(self.norm_impl(p, None, axis))
    }

    /// `L_p` norm of the `k` largest-magnitude entries per row (or overall).
    pub fn topk_lp_norm(self, p: f64, k: usize, axis: Axis) -> Result<Var<'t>> {
        check_p(p)?;
        let value = self.value();
        let limit = match axis {
            Axis::Row => value.rows_cols().1,
            Axis::All => value.len(),
        };
        if k == 0 || k > limit {
            return Err(Error::Parameter(format!("top-k needs 1 <= k <= {limit}, got {k}")));
        }
        Ok(self.norm_impl(p, Some(k), axis))
    }

    /// Identity in the forward pass; blocks every gradient.
    pub fn stop_gradient(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn norm_impl(self, p: f64, k: Option<usize>, axis: Axis) -> Var<'t> {
        let w = self.value();
        assert!(!w.is_empty(), "norm of an empty tensor");
        let (rows, cols) = match axis {
            Axis::Row => w.rows_cols(),
            Axis::All => (1, w.len()),
        };
        let mut out = Vec::with_capacity(rows);
        let mut local = vec![0.0; w.len()];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let vals = &w.data()[span.clone()];
            let mask = k.map(|k| {
                let mut m = vec![false; cols];
                topk_indices(vals, k).into_iter().for_each(|j| m[j] = true);
                m
            });
            let (n, g) = group_norm(vals, mask.as_deref(), p);
            out.push(n);
            local[span].copy_from_slice(&g);
        }
        let out = match axis {
            Axis::Row => Tensor::vector(out),
            Axis::All => Tensor::scalar(out[0]),
        };
        self.tape.op(out, &[self], move |args| {
            let g = args.grad.data();
            let mut dw = local.clone();
            for r in 0..rows {
                dw[r * cols..(r + 1) * cols].iter_mut().for_each(|d| *d *= g[r]);
            }
            vec![Some(Tensor::from_vec(args.inputs[0].shape().to_vec(), dw))]
        })
    }
}
