//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use randq_core::qat::{lsc_weight_with_noise, pqn_weight, pqn_weight_with_noise, rand_scale, QatConfig, QatMethod};
use randq_core::quant::{compute_scale, dequantize, fake_quant, pack_int4, quantize, unpack_int4, QuantSpec};
use randq_core::rng::{sample_uniform, NoiseKey};
use randq_core::{Axis, Granularity, OutlierMethod, Result, Tape, Tensor, Var};

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-2;

/// A tensor-valued function of several tensors built on a tape.
pub type Function = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// The scalar objective is `Σ R ⊙ f(inputs)` with a fixed random `R`, so every
/// output entry contributes to every gradient.
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub function: Function,
    pub projection: Tensor,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` for each input, where `a` is the tape gradient
/// and `n` the central difference; the worst input is returned. The objective
/// is summed in f64 so the differences measure the operation, not the sum.
pub fn gradient_error(case: &GradCase) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.var(t.clone())).collect();
    let y = (case.function)(&tape, &vars)?;
    let loss = y.mul(tape.constant(case.projection.reshape(y.shape())?)).sum();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = (case.function)(&tape, &vars)?.value();
        Ok(y.data().iter().zip(case.projection.data()).map(|(&a, &b)| a as f64 * b as f64).sum())
    };
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut inputs = case.inputs.clone();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..a.len() {
            let x = case.inputs[i].data()[j];
            inputs[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[j] = x;
            // the actual perturbation after f32 rounding
            let h = ((x + FD_STEP) as f64 - (x - FD_STEP) as f64) / 2.0;
            let n = (up - down) / (2.0 * h);
            let g = a.data()[j] as f64;
            diff += (g - n).powi(2);
            na += g * g;
            nn += n * n;
        }
        let denom = na.sqrt().max(nn.sqrt());
        if denom > 0.0 {
            worst = worst.max(diff.sqrt() / denom);
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Entries drawn until every group (row or whole tensor) has its `k` largest
/// magnitudes separated from the rest, and every magnitude away from zero, by
/// `margin`. Keeps finite differences off the kinks of max and top-k.
fn separated(rng: &mut ChaCha8Rng, rows: usize, cols: usize, k: usize, axis: Axis, margin: f32) -> Tensor {
    loop {
        let t = uniform(rng, &[rows, cols], -1.0, 1.0);
        let groups: Vec<Vec<f32>> = match axis {
            Axis::Row => (0..rows).map(|r| t.row(r).to_vec()).collect(),
            Axis::All => vec![t.data().to_vec()],
        };
        let ok = groups.iter().all(|g| {
            let mut m: Vec<f32> = g.iter().map(|v| v.abs()).collect();
            m.sort_by(|a, b| b.total_cmp(a));
            let gap = k >= m.len() || m[k - 1] - m[k] > margin;
            gap && m.iter().all(|&v| v > margin)
        });
        if ok {
            return t;
        }
    }
}

fn random_axis(rng: &mut ChaCha8Rng) -> Axis {
    if rng.random_bool(0.5) {
        Axis::Row
    } else {
        Axis::All
    }
}

fn granularity(axis: Axis) -> Granularity {
    match axis {
        Axis::Row => Granularity::PerChannel,
        Axis::All => Granularity::PerTensor,
    }
}

fn reduced_len(axis: Axis, rows: usize) -> usize {
    match axis {
        Axis::Row => rows,
        Axis::All => 1,
    }
}

/// The differentiable operations under the gradient oracle, each with an
/// instance generator.
pub fn gradient_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> GradCase)> {
    vec![
        ("matmul", matmul_case),
        ("lp_norm", lp_norm_case),
        ("topk_lp_norm", topk_case),
        ("pqn_linear", pqn_linear_case),
        ("rand_scale", rand_scale_case),
        ("lsc_clip_noise", lsc_case),
        ("softmax", softmax_case),
        ("layer_norm", layer_norm_case),
        ("cross_entropy", cross_entropy_case),
    ]
}

fn matmul_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
    let r = uniform(rng, &[m, n], -1.0, 1.0);
    GradCase {
        inputs: vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
        function: Box::new(move |_, v| Ok(v[0].matmul(v[1])?)),
        projection: r,
    }
}

fn lp_norm_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(2..8));
    let p = [2.0, 3.0, 4.0, 8.0][rng.random_range(0..4)];
    let axis = random_axis(rng);
    let r = uniform(rng, &[reduced_len(axis, rows)], -1.0, 1.0);
    GradCase {
        inputs: vec![separated(rng, rows, cols, cols, axis, 0.02)],
        function: Box::new(move |_, v| Ok(v[0].lp_norm(p, axis)?)),
        projection: r,
    }
}

fn topk_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(2..8));
    let axis = random_axis(rng);
    let group = if axis == Axis::Row { cols } else { rows * cols };
    let k = rng.random_range(1..=group);
    let p = [2.0, 8.0][rng.random_range(0..2)];
    let r = uniform(rng, &[reduced_len(axis, rows)], -1.0, 1.0);
    GradCase {
        inputs: vec![separated(rng, rows, cols, k, axis, 0.02)],
        function: Box::new(move |_, v| Ok(v[0].topk_lp_norm(p, k, axis)?)),
        projection: r,
    }
}

/// Scale configurations with the gradient flowing through the scale.
fn flowing_scale_config(rng: &mut ChaCha8Rng, axis: Axis, cols: usize, rows: usize) -> (QatConfig, usize) {
    let g = granularity(axis);
    let bit = [4, 8][rng.random_range(0..2)];
    let group = if axis == Axis::Row { cols } else { rows * cols };
    match rng.random_range(0..3) {
        0 => (QatConfig::pqn(bit, g, OutlierMethod::Norm), 1),
        1 => {
            let k = rng.random_range(1..=group);
            (QatConfig::mixed(QatMethod::Pqn, bit, g, k), k)
        }
        _ => (QatConfig::generalization(bit, g, rng.random_range(0.01..0.5)), group),
    }
}

fn pqn_linear_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (m, n, b) = (rng.random_range(1..5), rng.random_range(2..7), rng.random_range(1..4));
    let axis = random_axis(rng);
    let (cfg, k) = flowing_scale_config(rng, axis, n, m);
    assert!(!cfg.stop_scale_gradient);
    let z = uniform(rng, &[m, n], -0.5, 0.5);
    let r = uniform(rng, &[b, m], -1.0, 1.0);
    GradCase {
        inputs: vec![separated(rng, m, n, k, axis, 0.02), uniform(rng, &[b, n], -1.0, 1.0)],
        function: Box::new(move |_, v| v[1].matmul_nt(pqn_weight_with_noise(v[0], &cfg, &z)?)),
        projection: r,
    }
}

fn rand_scale_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(2..8));
    let axis = random_axis(rng);
    let (cfg, k) = flowing_scale_config(rng, axis, cols, rows);
    let r = uniform(rng, &[reduced_len(axis, rows)], -1.0, 1.0);
    GradCase {
        inputs: vec![separated(rng, rows, cols, k, axis, 0.02)],
        function: Box::new(move |_, v| Ok(rand_scale(v[0], &cfg)?)),
        projection: r,
    }
}

/// Learnable scale in PQN mode, `clip(W, s·l, s·u) + s·Z`, on its smooth
/// branch: every entry stays inside the clip range, where the pass-through
/// surrogate is the true gradient.
fn lsc_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(2..8));
    let axis = random_axis(rng);
    let g = granularity(axis);
    let bit = [4, 8][rng.random_range(0..2)];
    let mut cfg = QatConfig::pqn(bit, g, OutlierMethod::Lsc);
    // the step-size gradient scaling is a deliberate departure from the true gradient
    cfg.lsc_grad_scale = false;
    let u = cfg.upper() as f32;
    // clip range s·u between 0.35 and 2.1 at every bit width
    let scales = uniform(rng, &[reduced_len(axis, rows)], 0.35 / u, 2.1 / u);
    let margin = 0.02 + 2.0 * FD_STEP * u;
    let mut w = Tensor::zeros(vec![rows, cols]);
    for r in 0..rows {
        let bound = scales.data()[if axis == Axis::Row { r } else { 0 }] * u - margin;
        for c in 0..cols {
            w.data_mut()[r * cols + c] = rng.random_range(-bound..bound);
        }
    }
    let z = uniform(rng, &[rows, cols], -0.5, 0.5);
    let r = uniform(rng, &[rows, cols], -1.0, 1.0);
    GradCase {
        inputs: vec![w, scales],
        function: Box::new(move |_, v| Ok(lsc_weight_with_noise(v[0], v[1], &cfg, Some(&z))?)),
        projection: r,
    }
}

fn softmax_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(2..8));
    let r = uniform(rng, &[rows, cols], -1.0, 1.0);
    GradCase {
        inputs: vec![uniform(rng, &[rows, cols], -2.0, 2.0)],
        function: Box::new(move |_, v| Ok(v[0].softmax())),
        projection: r,
    }
}

/// At two columns the normalized row is ±1 whatever the input, so the input
/// gradient vanishes; rows have at least three entries.
fn layer_norm_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(3..8));
    let r = uniform(rng, &[rows, cols], -1.0, 1.0);
    GradCase {
        inputs: vec![
            uniform(rng, &[rows, cols], -2.0, 2.0),
            uniform(rng, &[cols], 0.5, 1.5),
            uniform(rng, &[cols], -0.5, 0.5),
        ],
        function: Box::new(move |_, v| Ok(v[0].layer_norm(v[1], v[2], 1e-5))),
        projection: r,
    }
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(2..8));
    let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
    let weights: Vec<f32> = (0..rows).map(|_| rng.random_range(0.0..1.0)).collect();
    GradCase {
        inputs: vec![uniform(rng, &[rows, cols], -2.0, 2.0)],
        function: Box::new(move |_, v| v[0].cross_entropy(&targets, &weights)),
        projection: Tensor::scalar(1.0),
    }
}

/// Worst relative error over `instances` random cases of one operation.
pub fn check_operation(make: fn(&mut ChaCha8Rng) -> GradCase, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(gradient_error(&make(&mut rng))?);
    }
    Ok(worst)
}

/// Violations of the quantization invariants found on one tensor.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct InvariantViolations {
    pub round_trip: usize,
    pub clip_binds: usize,
    pub not_idempotent: usize,
    pub packing: usize,
}

impl InvariantViolations {
    pub fn total(&self) -> usize {
        self.round_trip + self.clip_binds + self.not_idempotent + self.packing
    }

    pub fn add(&mut self, o: InvariantViolations) {
        self.round_trip += o.round_trip;
        self.clip_binds += o.clip_binds;
        self.not_idempotent += o.not_idempotent;
        self.packing += o.packing;
    }
}

/// A random tensor with a random bit width and granularity; magnitudes span
/// several decades so scales are exercised far from 1.
pub fn random_quant_instance(rng: &mut ChaCha8Rng) -> (Tensor, QuantSpec) {
    let (rows, cols) = (rng.random_range(1..9), rng.random_range(1..17));
    let magnitude = 10f32.powf(rng.random_range(-3.0..3.0));
    let w = uniform(rng, &[rows, cols], -magnitude, magnitude);
    let g = if rng.random_bool(0.5) { Granularity::PerChannel } else { Granularity::PerTensor };
    (w, QuantSpec::new(rng.random_range(2..=8), g).unwrap())
}

pub fn quant_invariants(w: &Tensor, spec: &QuantSpec) -> InvariantViolations {
    let mut v = InvariantViolations::default();
    let scales = compute_scale(w, spec);
    let q = quantize(w, spec).unwrap();
    let deq = dequantize(&q);
    let (rows, cols) = w.rows_cols();
    let values = q.qdata.values();
    for r in 0..rows {
        let s = scales.for_row(r);
        for c in 0..cols {
            let i = r * cols + c;
            // exact real-valued error of the stored integer; the f32 product
            // adds at most half an ulp of the dequantized value on top
            let exact = (w.data()[i] as f64 - values[i] as f64 * s as f64).abs();
            let float = (w.data()[i] as f64 - deq.data()[i] as f64).abs();
            let ulp = (deq.data()[i].abs() as f64) * f32::EPSILON as f64;
            if exact > s as f64 / 2.0 * (1.0 + 1e-6) || float > s as f64 / 2.0 * (1.0 + 1e-6) + ulp {
                v.round_trip += 1;
            }
            if s > 0.0 && ((w.data()[i] / s).round() as i32).abs() > spec.upper() {
                v.clip_binds += 1;
            }
        }
    }
    let fq = fake_quant(w, &scales, spec).unwrap();
    let twice = fake_quant(&fq, &scales, spec).unwrap();
    let rescaled = fake_quant(&fq, &compute_scale(&fq, spec), spec).unwrap();
    if !twice.bit_eq(&fq) || !rescaled.bit_eq(&fq) || !fq.bit_eq(&deq) {
        v.not_idempotent += 1;
    }
    if spec.bit <= 4 && unpack_int4(&pack_int4(&values), values.len()) != values {
        v.packing += 1;
    }
    v
}

/// Every 4-bit value pattern of a given length survives packing.
pub fn packing_exhaustive(len: usize) -> bool {
    let patterns = 16usize.pow(len as u32);
    (0..patterns).all(|mut p| {
        let values: Vec<i8> = (0..len)
            .map(|_| {
                let v = (p % 16) as i8 - 8;
                p /= 16;
                v
            })
            .collect();
        unpack_int4(&pack_int4(&values), len) == values
    })
}

/// Per-channel statistics of the injected PQN noise `Ŵ − W`.
#[derive(Debug, Clone)]
pub struct NoiseStats {
    pub scales: Vec<f32>,
    pub samples_per_channel: usize,
    /// Largest `|noise| / (s/2)` per channel.
    pub max_ratio: Vec<f64>,
    /// `|mean| / s` per channel.
    pub mean_ratio: Vec<f64>,
    /// `Ŵ` differed from `W + s·Z` for the sampler's `Z`.
    pub mismatches: usize,
}

/// Draws `steps` noise tensors for a `[rows, cols]` weight through the
/// training path and measures them per channel. The noise is recovered as
/// `s·Z` with `Z` regenerated from the same key, after checking that the
/// training output is bit-identical to `W + s·Z`.
pub fn pqn_noise_stats(rows: usize, cols: usize, steps: u64, seed: u64) -> Result<NoiseStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &[rows, cols], -1.0, 1.0);
    let cfg = QatConfig::pqn(4, Granularity::PerChannel, OutlierMethod::Norm);
    let scales = compute_scale(&w, &cfg.quant_spec()).scales;
    let mut sum = vec![0.0f64; rows];
    let mut max_ratio = vec![0.0f64; rows];
    let mut mismatches = 0;
    for step in 0..steps {
        let key = NoiseKey::new(seed, 17, step);
        let tape = Tape::new();
        let w_hat = pqn_weight(tape.var(w.clone()), &cfg, key)?.value();
        let z = sample_uniform(&[rows, cols], -0.5, 0.5, key)?;
        let tape = Tape::new();
        let pinned = pqn_weight_with_noise(tape.var(w.clone()), &cfg, &z)?.value();
        if !pinned.bit_eq(&w_hat) {
            mismatches += 1;
        }
        for r in 0..rows {
            let s = scales[r];
            for c in 0..cols {
                let i = r * cols + c;
                let noise = s * z.data()[i];
                if w_hat.data()[i] != w.data()[i] + noise {
                    mismatches += 1;
                }
                sum[r] += noise as f64;
                max_ratio[r] = max_ratio[r].max(noise.abs() as f64 / (s as f64 / 2.0));
            }
        }
    }
    let n = steps as usize * cols;
    let mean_ratio = sum.iter().zip(&scales).map(|(t, &s)| (t / n as f64).abs() / s as f64).collect();
    Ok(NoiseStats { scales, samples_per_channel: n, max_ratio, mean_ratio, mismatches })
}
