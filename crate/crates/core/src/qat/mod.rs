//! QAT weight operators.
//!
//! Each operator maps a weight matrix `W[M×N]` (rows are output channels) to
//! the effective weight used in the training forward pass; a dense layer then
//! computes `Y = X · Ŵᵀ`. Evaluation never goes through these operators: it
//! uses true quantization from [`crate::quant`].
//!
//! | qat    | outlier            | effective weight                                   |
//! |--------|--------------------|----------------------------------------------------|
//! | none   | none               | `W`                                                |
//! | none   | vn                 | `W + ε`, `ε ~ N(0, vn_std²)`                       |
//! | ste    | none / norm / mixed| `s·clip(round(W/s), l, u)`, straight-through       |
//! | pqn    | none / norm / mixed| `W + s·Z`, `Z ~ Unif[-½, ½]`                       |
//! | ste    | lsc                | fake quantization with a learned step size         |
//! | pqn    | lsc                | `clip(W, s·l, s·u) + s·Z` with a learned `s`       |
//!
//! For `none`/`norm`/`mixed` the scale is `s = c·‖W_i‖_p` (per row or per
//! tensor). With `outlier = none` the scale is wrapped in a stop-gradient and
//! only sets the noise magnitude; with `norm`/`mixed` the loss gradient flows
//! into the norm and decays the largest weights.

mod config;

pub use config::{OutlierMethod, QatConfig, QatMethod};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::quant::{compute_scale, quantize_value, QuantSpec};
use crate::rng::{sample_gaussian, sample_uniform, NoiseKey};
use crate::tensor::Tensor;

/// Lower bound applied to learnable scales after every optimizer step.
pub const MIN_LSC_SCALE: f32 = 1e-8;

/// Learnable per-channel (or per-tensor) scales of the LSC baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LscParams {
    pub scales: Tensor,
}

impl LscParams {
    /// Starts from the max-abs scale of `w`.
    pub fn init(w: &Tensor, cfg: &QatConfig) -> Self {
        let set = compute_scale(w, &cfg.quant_spec());
        let scales = set.scales.into_iter().map(|s| s.max(MIN_LSC_SCALE)).collect();
        Self { scales: Tensor::vector(scales) }
    }

    pub fn clamp(&mut self) {
        clamp_scales(&mut self.scales);
    }
}

pub fn clamp_scales(scales: &mut Tensor) {
    scales.data_mut().iter_mut().for_each(|s| *s = s.max(MIN_LSC_SCALE));
}

/// `1/sqrt(N·u)` where `N` is the number of weights sharing one scale.
pub fn lsc_gradient_scale(w_shape: &[usize], cfg: &QatConfig) -> f32 {
    if !cfg.lsc_grad_scale {
        return 1.0;
    }
    let numel: usize = w_shape.iter().product();
    let rows = if w_shape.len() >= 2 { numel / w_shape[w_shape.len() - 1].max(1) } else { 1 };
    let per_scale = match cfg.granularity {
        crate::quant::Granularity::PerTensor => numel,
        crate::quant::Granularity::PerChannel => numel / rows.max(1),
    };
    1.0 / ((per_scale as f32) * cfg.upper() as f32).sqrt()
}

/// `s = c·‖W_i‖_p` per row (or `c·‖W‖_p` per tensor).
///
/// With the default `c` this divides by `u`, so in QAT mode (`p = ∞`) it equals
/// [`compute_scale`] bit for bit.
pub fn rand_scale<'t>(w: Var<'t>, cfg: &QatConfig) -> Result<Var<'t>> {
    let axis = cfg.granularity.axis();
    let norm = if cfg.outlier_method == OutlierMethod::Mixed {
        w.topk_lp_norm(cfg.p, cfg.k, axis)?
    } else if cfg.p.is_infinite() {
        w.reduce_max_abs(axis)
    } else {
        w.lp_norm(cfg.p, axis)?
    };
    let s = match cfg.c {
        None => norm.div_scalar(cfg.upper() as f32),
        Some(c) => norm.mul_scalar(c as f32),
    };
    Ok(if cfg.stop_scale_gradient { s.stop_gradient() } else { s })
}

/// Straight-through fake quantization with a norm-derived scale.
pub fn ste_weight<'t>(w: Var<'t>, cfg: &QatConfig) -> Result<Var<'t>> {
    let s = rand_scale(w, cfg)?;
    Ok(fake_quant_ste(w, s, cfg.quant_spec()))
}

/// `W + s·Z` with fresh uniform noise drawn from `key`.
pub fn pqn_weight<'t>(w: Var<'t>, cfg: &QatConfig, key: NoiseKey) -> Result<Var<'t>> {
    let z = sample_uniform(&w.shape(), -0.5, 0.5, key)?;
    pqn_weight_with_noise(w, cfg, &z)
}

/// `W + s·Z` with caller-pinned noise `Z`.
pub fn pqn_weight_with_noise<'t>(w: Var<'t>, cfg: &QatConfig, z: &Tensor) -> Result<Var<'t>> {
    if z.shape() != w.shape().as_slice() {
        return Err(Error::dim("pqn", format!("noise {:?} for weight {:?}", z.shape(), w.shape())));
    }
    let s = rand_scale(w, cfg)?;
    let noise = w.tape().constant(z.clone()).scale_rows(s);
    Ok(w.add(noise))
}

/// Learnable-scale-and-clip weight. STE mode uses a learned step size; PQN
/// mode clips to `[s·l, s·u]` and adds `s·Z`.
pub fn lsc_weight<'t>(w: Var<'t>, scales: Var<'t>, cfg: &QatConfig, key: NoiseKey) -> Result<Var<'t>> {
    match cfg.qat_method {
        QatMethod::Ste => lsc_weight_with_noise(w, scales, cfg, None),
        QatMethod::Pqn => {
            let z = sample_uniform(&w.shape(), -0.5, 0.5, key)?;
            lsc_weight_with_noise(w, scales, cfg, Some(&z))
        }
        QatMethod::None => Err(Error::Config("lsc needs qat_method ste or pqn".into())),
    }
}

pub fn lsc_weight_with_noise<'t>(
    w: Var<'t>,
    scales: Var<'t>,
    cfg: &QatConfig,
    z: Option<&Tensor>,
) -> Result<Var<'t>> {
    let shape = w.shape();
    let rows = if shape.len() >= 2 { shape[..shape.len() - 1].iter().product() } else { 1 };
    let want = cfg.granularity.scale_count(rows);
    if scales.value().len() != want {
        return Err(Error::dim("lsc", format!("{} scales for {rows} rows", scales.value().len())));
    }
    let grad_scale = lsc_gradient_scale(&shape, cfg);
    let spec = cfg.quant_spec();
    match (cfg.qat_method, z) {
        (QatMethod::Ste, _) => Ok(lsq_fake_quant(w, scales, spec, grad_scale)),
        (QatMethod::Pqn, Some(z)) => {
            if z.shape() != shape.as_slice() {
                return Err(Error::dim("lsc", format!("noise {:?} for weight {shape:?}", z.shape())));
            }
            Ok(clipped_noise(w, scales, z.clone(), spec, grad_scale))
        }
        (QatMethod::Pqn, None) => Err(Error::Contract("lsc pqn mode needs noise".into())),
        (QatMethod::None, _) => Err(Error::Config("lsc needs qat_method ste or pqn".into())),
    }
}

/// `W + ε` with constant-variance Gaussian `ε`.
pub fn vn_weight<'t>(w: Var<'t>, std: f32, key: NoiseKey) -> Result<Var<'t>> {
    let eps = sample_gaussian(&w.shape(), std, key)?;
    Ok(w.add(w.tape().constant(eps)))
}

/// Effective training weight for `cfg`. `lsc` must be present exactly when
/// `cfg.outlier_method` is `lsc`.
pub fn qat_weight<'t>(w: Var<'t>, cfg: &QatConfig, lsc: Option<Var<'t>>, key: NoiseKey) -> Result<Var<'t>> {
    use OutlierMethod as O;
    use QatMethod as Q;
    cfg.validate()?;
    match (cfg.outlier_method == O::Lsc, lsc) {
        (true, None) => return Err(Error::Config("outlier method lsc needs learnable scales".into())),
        (false, Some(_)) => return Err(Error::Config("learnable scales given without outlier method lsc".into())),
        _ => {}
    }
    match (cfg.qat_method, cfg.outlier_method) {
        (Q::None, O::None) => Ok(w),
        (Q::None, O::Vn) => vn_weight(w, cfg.vn_std, key),
        (Q::Ste, O::None | O::Norm | O::Mixed) => ste_weight(w, cfg),
        (Q::Pqn, O::None | O::Norm | O::Mixed) => pqn_weight(w, cfg, key),
        (Q::Ste | Q::Pqn, O::Lsc) => lsc_weight(w, lsc.expect("checked above"), cfg, key),
        (q, o) => Err(Error::Config(format!("unsupported combination qat={q}, outlier={o}"))),
    }
}

/// `Y = X · Ŵᵀ` with `Ŵ = qat_weight(W)`; `X` is `[B, N]`, `W` is `[M, N]`.
pub fn qat_linear<'t>(
    w: Var<'t>,
    x: Var<'t>,
    cfg: &QatConfig,
    lsc: Option<Var<'t>>,
    key: NoiseKey,
) -> Result<Var<'t>> {
    x.matmul_nt(qat_weight(w, cfg, lsc, key)?)
}

pub fn ste_linear<'t>(w: Var<'t>, x: Var<'t>, cfg: &QatConfig) -> Result<Var<'t>> {
    x.matmul_nt(ste_weight(w, cfg)?)
}

pub fn pqn_linear<'t>(w: Var<'t>, x: Var<'t>, cfg: &QatConfig, key: NoiseKey) -> Result<Var<'t>> {
    x.matmul_nt(pqn_weight(w, cfg, key)?)
}

pub fn lsc_linear<'t>(w: Var<'t>, x: Var<'t>, scales: Var<'t>, cfg: &QatConfig, key: NoiseKey) -> Result<Var<'t>> {
    x.matmul_nt(lsc_weight(w, scales, cfg, key)?)
}

pub fn vn_linear<'t>(w: Var<'t>, x: Var<'t>, std: f32, key: NoiseKey) -> Result<Var<'t>> {
    x.matmul_nt(vn_weight(w, std, key)?)
}

/// Geometry shared by the row-scaled operators below.
#[derive(Clone, Copy)]
struct RowLayout {
    rows: usize,
    cols: usize,
    per_row: bool,
}

impl RowLayout {
    fn new(w: &Tensor, s: &Tensor) -> Self {
        let (rows, cols) = w.rows_cols();
        let per_row = s.len() != 1;
        assert!(!per_row || s.len() == rows, "{} scales for {rows} rows", s.len());
        Self { rows, cols, per_row }
    }

    #[inline]
    fn scale_index(&self, r: usize) -> usize {
        if self.per_row {
            r
        } else {
            0
        }
    }
}

/// Forward `s·clip(round(W/s), l, u)`. Backward passes the gradient straight
/// through inside the clip range, and treats the integers as constants for
/// the scale path: `∂Ŵ_ij/∂s_i = q_ij`.
fn fake_quant_ste<'t>(w: Var<'t>, s: Var<'t>, spec: QuantSpec) -> Var<'t> {
    let (wv, sv) = (w.value(), s.value());
    let layout = RowLayout::new(&wv, &sv);
    let (l, u) = (spec.lower(), spec.upper());
    let mut q = vec![0i32; wv.len()];
    let mut out = vec![0.0f32; wv.len()];
    for r in 0..layout.rows {
        let sr = sv.data()[layout.scale_index(r)];
        for c in 0..layout.cols {
            let i = r * layout.cols + c;
            q[i] = quantize_value(wv.data()[i], sr, l, u);
            out[i] = sr * q[i] as f32;
        }
    }
    let out = Tensor::from_vec(wv.shape().to_vec(), out);
    w.tape().op(out, &[w, s], move |args| {
        let (w, s, g) = (args.inputs[0], args.inputs[1], args.grad);
        let mut dw = vec![0.0; w.len()];
        let mut ds = vec![0.0; s.len()];
        for r in 0..layout.rows {
            let si = layout.scale_index(r);
            let sr = s.data()[si];
            for c in 0..layout.cols {
                let i = r * layout.cols + c;
                let inside = sr == 0.0 || {
                    let v = w.data()[i] / sr;
                    (l as f32 - 0.5..=u as f32 + 0.5).contains(&v)
                };
                if inside {
                    dw[i] = g.data()[i];
                }
                ds[si] += g.data()[i] * q[i] as f32;
            }
        }
        vec![Some(Tensor::from_vec(w.shape().to_vec(), dw)), Some(Tensor::from_vec(s.shape().to_vec(), ds))]
    })
}

/// Learned-step-size fake quantization. With `v = W/s`:
/// inside `[l, u]`: `∂Ŵ/∂W = 1`, `∂Ŵ/∂s = round(v) - v`;
/// clipped: `∂Ŵ/∂W = 0`, `∂Ŵ/∂s = l` or `u`. Scale gradients are multiplied by `grad_scale`.
fn lsq_fake_quant<'t>(w: Var<'t>, s: Var<'t>, spec: QuantSpec, grad_scale: f32) -> Var<'t> {
    let (wv, sv) = (w.value(), s.value());
    let layout = RowLayout::new(&wv, &sv);
    let (l, u) = (spec.lower(), spec.upper());
    let mut out = vec![0.0f32; wv.len()];
    for r in 0..layout.rows {
        let sr = sv.data()[layout.scale_index(r)];
        for c in 0..layout.cols {
            let i = r * layout.cols + c;
            out[i] = sr * quantize_value(wv.data()[i], sr, l, u) as f32;
        }
    }
    let out = Tensor::from_vec(wv.shape().to_vec(), out);
    w.tape().op(out, &[w, s], move |args| {
        let (w, s, g) = (args.inputs[0], args.inputs[1], args.grad);
        let mut dw = vec![0.0; w.len()];
        let mut ds = vec![0.0; s.len()];
        for r in 0..layout.rows {
            let si = layout.scale_index(r);
            let sr = s.data()[si];
            for c in 0..layout.cols {
                let i = r * layout.cols + c;
                let v = w.data()[i] / sr;
                let gi = g.data()[i];
                if v < l as f32 {
                    ds[si] += gi * l as f32;
                } else if v > u as f32 {
                    ds[si] += gi * u as f32;
                } else {
                    dw[i] = gi;
                    ds[si] += gi * (v.round() - v);
                }
            }
        }
        ds.iter_mut().for_each(|d| *d *= grad_scale);
        vec![Some(Tensor::from_vec(w.shape().to_vec(), dw)), Some(Tensor::from_vec(s.shape().to_vec(), ds))]
    })
}

/// `clip(W, s·l, s·u) + s·Z`, gradient passed straight through the clip to `W`.
fn clipped_noise<'t>(w: Var<'t>, s: Var<'t>, z: Tensor, spec: QuantSpec, grad_scale: f32) -> Var<'t> {
    let (wv, sv) = (w.value(), s.value());
    let layout = RowLayout::new(&wv, &sv);
    let (l, u) = (spec.lower() as f32, spec.upper() as f32);
    let mut out = vec![0.0f32; wv.len()];
    for r in 0..layout.rows {
        let sr = sv.data()[layout.scale_index(r)];
        for c in 0..layout.cols {
            let i = r * layout.cols + c;
            out[i] = wv.data()[i].clamp(sr * l, sr * u) + sr * z.data()[i];
        }
    }
    let out = Tensor::from_vec(wv.shape().to_vec(), out);
    w.tape().op(out, &[w, s], move |args| {
        let (w, s, g) = (args.inputs[0], args.inputs[1], args.grad);
        let mut ds = vec![0.0; s.len()];
        for r in 0..layout.rows {
            let si = layout.scale_index(r);
            let sr = s.data()[si];
            for c in 0..layout.cols {
                let i = r * layout.cols + c;
                let wi = w.data()[i];
                let bound = if wi < sr * l {
                    l
                } else if wi > sr * u {
                    u
                } else {
                    0.0
                };
                ds[si] += g.data()[i] * (bound + z.data()[i]);
            }
        }
        ds.iter_mut().for_each(|d| *d *= grad_scale);
        vec![Some(g.clone()), Some(Tensor::from_vec(s.shape().to_vec(), ds))]
    })
}
