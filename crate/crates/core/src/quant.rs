//! Symmetric uniform weight quantization.
//!
//! A weight matrix `W[M×N]` is quantized either with one scale for the whole
//! tensor or one scale per output channel (row). Integers live in `[l, u]`
//! with `l = -u` and `u = 2^(bit-1) - 1`. Rounding is half away from zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::Axis;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Widest bit width accepted for simulated (float) quantization.
pub const MAX_SIM_BITS: u32 = 16;
/// Widest bit width that can be materialized as integers.
pub const MAX_STORED_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

impl Granularity {
    pub fn axis(self) -> Axis {
        match self {
            Granularity::PerTensor => Axis::All,
            Granularity::PerChannel => Axis::Row,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::PerTensor => "per_tensor",
            Granularity::PerChannel => "per_channel",
        }
    }

    /// Number of scales for a tensor with `rows` output channels.
    pub fn scale_count(self, rows: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => rows,
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(Granularity::PerTensor),
            "per_channel" => Ok(Granularity::PerChannel),
            other => Err(Error::Parameter(format!("unknown granularity {other:?}"))),
        }
    }
}

/// `(l, u) = (-(2^(bit-1) - 1), 2^(bit-1) - 1)`.
pub fn integer_bounds(bit: u32) -> Result<(i32, i32)> {
    if !(2..=MAX_SIM_BITS).contains(&bit) {
        return Err(Error::Parameter(format!("bit width must be in 2..={MAX_SIM_BITS}, got {bit}")));
    }
    let u = (1i32 << (bit - 1)) - 1;
    Ok((-u, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bit: u32,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn new(bit: u32, granularity: Granularity) -> Result<Self> {
        integer_bounds(bit)?;
        Ok(Self { bit, granularity })
    }

    pub fn per_channel(bit: u32) -> Result<Self> {
        Self::new(bit, Granularity::PerChannel)
    }

    pub fn per_tensor(bit: u32) -> Result<Self> {
        Self::new(bit, Granularity::PerTensor)
    }

    pub fn lower(&self) -> i32 {
        -self.upper()
    }

    pub fn upper(&self) -> i32 {
        (1i32 << (self.bit - 1)) - 1
    }
}

/// Quantization scales: one per tensor or one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub scales: Vec<f32>,
    pub granularity: Granularity,
}

impl ScaleSet {
    pub fn new(scales: Vec<f32>, granularity: Granularity) -> Result<Self> {
        if let Some(bad) = scales.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("scales must be finite and >= 0, got {bad}")));
        }
        if granularity == Granularity::PerTensor && scales.len() != 1 {
            return Err(Error::Parameter(format!("per-tensor scale set has {} entries", scales.len())));
        }
        Ok(Self { scales, granularity })
    }

    /// Scale that applies to row `r`.
    pub fn for_row(&self, r: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel => self.scales[r],
        }
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        let want = self.granularity.scale_count(rows);
        if self.scales.len() != want {
            return Err(Error::dim("scales", format!("{} scales for {rows} rows", self.scales.len())));
        }
        Ok(())
    }
}

/// `clip(round(w / s), l, u)`; a zero scale maps everything to 0.
#[inline]
pub fn quantize_value(w: f32, s: f32, l: i32, u: i32) -> i32 {
    if s == 0.0 {
        return 0;
    }
    ((w / s).round() as i32).clamp(l, u)
}

/// Max-abs scale: `max |W| / u` per row or for the whole tensor.
pub fn compute_scale(w: &Tensor, spec: &QuantSpec) -> ScaleSet {
    assert!(!w.is_empty(), "compute_scale on an empty tensor");
    let u = spec.upper() as f32;
    let (rows, _) = w.rows_cols();
    let scales = match spec.granularity {
        Granularity::PerTensor => vec![w.max_abs() / u],
        Granularity::PerChannel => {
            (0..rows).map(|r| w.row(r).iter().fold(0.0f32, |m, x| m.max(x.abs())) / u).collect()
        }
    };
    ScaleSet { scales, granularity: spec.granularity }
}

/// `s · clip(round(W / s), l, u)` computed in float.
pub fn fake_quant(w: &Tensor, scales: &ScaleSet, spec: &QuantSpec) -> Result<Tensor> {
    let (rows, cols) = w.rows_cols();
    scales.check_rows(rows)?;
    let (l, u) = (spec.lower(), spec.upper());
    let mut out = w.clone().into_vec();
    for r in 0..rows {
        let s = scales.for_row(r);
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v = s * quantize_value(*v, s, l, u) as f32;
        }
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// Integer payload of a [`QuantizedTensor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QData {
    /// Two's-complement nibbles, even index in the low nibble. Used for `bit <= 4`.
    Packed4 { bytes: Vec<u8>, len: usize },
    /// One signed byte per value. Used for `5 <= bit <= 8`.
    Bytes(Vec<i8>),
}

impl QData {
    pub fn from_values(values: &[i8], bit: u32) -> Self {
        if bit <= 4 {
            QData::Packed4 { bytes: pack_int4(values), len: values.len() }
        } else {
            QData::Bytes(values.to_vec())
        }
    }

    pub fn len(&self) -> usize {
        match self {
            QData::Packed4 { len, .. } => *len,
            QData::Bytes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<i8> {
        match self {
            QData::Packed4 { bytes, len } => unpack_int4(bytes, *len),
            QData::Bytes(v) => v.clone(),
        }
    }

    /// Storage size of the integer payload.
    pub fn byte_len(&self) -> usize {
        match self {
            QData::Packed4 { bytes, .. } => bytes.len(),
            QData::Bytes(v) => v.len(),
        }
    }
}

/// Packs values in `[-8, 7]` two per byte.
pub fn pack_int4(values: &[i8]) -> Vec<u8> {
    values
        .chunks(2)
        .map(|pair| {
            debug_assert!(pair.iter().all(|v| (-8..=7).contains(v)), "value out of int4 range");
            let lo = (pair[0] as u8) & 0x0f;
            let hi = pair.get(1).map_or(0, |&v| (v as u8) & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_int4(bytes: &[u8], len: usize) -> Vec<i8> {
    let nibble = |n: u8| ((n << 4) as i8) >> 4;
    let mut out = Vec::with_capacity(len);
    for &b in bytes {
        out.push(nibble(b & 0x0f));
        out.push(nibble(b >> 4));
    }
    out.truncate(len);
    out
}

/// Integer weights plus the scales needed to reconstruct them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub bit: u32,
    pub scales: ScaleSet,
    pub qdata: QData,
}

impl QuantizedTensor {
    pub fn spec(&self) -> QuantSpec {
        QuantSpec { bit: self.bit, granularity: self.scales.granularity }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Packed integer bytes plus 4 bytes per scale.
    pub fn byte_size(&self) -> usize {
        self.qdata.byte_len() + 4 * self.scales.scales.len()
    }
}

/// Quantizes with max-abs scales; clipping never triggers for these scales.
pub fn quantize(w: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    let scales = compute_scale(w, spec);
    quantize_with(w, scales, spec)
}

/// Quantizes with caller-supplied scales (clipping applies).
pub fn quantize_with(w: &Tensor, scales: ScaleSet, spec: &QuantSpec) -> Result<QuantizedTensor> {
    if spec.bit > MAX_STORED_BITS {
        return Err(Error::Parameter(format!(
            "cannot materialize {}-bit integers (max {MAX_STORED_BITS})",
            spec.bit
        )));
    }
    let (rows, _) = w.rows_cols();
    scales.check_rows(rows)?;
    let (l, u) = (spec.lower(), spec.upper());
    let mut values = Vec::with_capacity(w.len());
    for r in 0..rows {
        let s = scales.for_row(r);
        values.extend(w.row(r).iter().map(|&v| quantize_value(v, s, l, u) as i8));
    }
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        bit: spec.bit,
        qdata: QData::from_values(&values, spec.bit),
        scales,
    })
}

/// `s_i · q_ij`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let values = q.qdata.values();
    let cols = match q.shape.len() {
        0 => 1,
        _ => *q.shape.last().unwrap(),
    };
    let data = values
        .iter()
        .enumerate()
        .map(|(i, &v)| q.scales.for_row(if cols == 0 { 0 } else { i / cols }) * v as f32)
        .collect();
    Tensor::from_vec(q.shape.clone(), data)
}

/// Mean squared error of fake quantization with max-abs scales.
pub fn quantization_mse(w: &Tensor, spec: &QuantSpec) -> f64 {
    let deq = fake_quant(w, &compute_scale(w, spec), spec).expect("scales derived from w");
    let n = w.len().max(1) as f64;
    w.data().iter().zip(deq.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn bounds() {
        assert_eq!(integer_bounds(4).unwrap(), (-7, 7));
        assert_eq!(integer_bounds(8).unwrap(), (-127, 127));
        assert_eq!(integer_bounds(2).unwrap(), (-1, 1));
        assert!(matches!(integer_bounds(1), Err(Error::Parameter(_))));
        let spec = QuantSpec::per_channel(4).unwrap();
        assert_eq!((spec.lower(), spec.upper()), (-7, 7));
    }

    #[test]
    fn scale_examples() {
        let w = Tensor::from_rows(&[&[0.3, -0.9, 0.45], &[0.1, 0.2, -0.05]]);
        let pc = compute_scale(&w, &QuantSpec::per_channel(4).unwrap());
        assert!(close(&pc.scales, &[0.128571, 0.028571], 1e-6));
        let pt = compute_scale(&w, &QuantSpec::per_tensor(4).unwrap());
        assert!(close(&pt.scales, &[0.128571], 1e-6));
        let z = compute_scale(&Tensor::zeros([2, 3]), &QuantSpec::per_channel(4).unwrap());
        assert_eq!(z.scales, vec![0.0, 0.0]);
    }

    #[test]
    fn fake_quant_examples() {
        let spec = QuantSpec::per_tensor(4).unwrap();
        let s = ScaleSet::new(vec![0.2], Granularity::PerTensor).unwrap();
        let w = Tensor::from_rows(&[&[0.35, -1.4, 0.7, 0.05]]);
        // round([1.75, -7, 3.5, 0.25]) = [2, -7, 4, 0]
        assert!(close(fake_quant(&w, &s, &spec).unwrap().data(), &[0.4, -1.4, 0.8, 0.0], 1e-6));
        let on_grid = Tensor::from_rows(&[&[0.4, -0.2]]);
        assert!(close(fake_quant(&on_grid, &s, &spec).unwrap().data(), on_grid.data(), 1e-6));
        let big = Tensor::from_rows(&[&[10.0]]);
        assert!(close(fake_quant(&big, &s, &spec).unwrap().data(), &[1.4], 1e-6));
    }

    #[test]
    fn zero_scale_gives_zeros() {
        let spec = QuantSpec::per_channel(4).unwrap();
        let w = Tensor::from_rows(&[&[0.0, 0.0, 0.0]]);
        let q = quantize(&w, &spec).unwrap();
        assert_eq!(q.qdata.values(), vec![0, 0, 0]);
        assert_eq!(q.scales.scales, vec![0.0]);
        assert_eq!(dequantize(&q).data(), &[0.0, 0.0, 0.0]);
        let s = ScaleSet::new(vec![0.0], Granularity::PerChannel).unwrap();
        let w = Tensor::from_rows(&[&[1.0, -2.0]]);
        assert_eq!(fake_quant(&w, &s, &spec).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn quantize_example() {
        let spec = QuantSpec::per_channel(4).unwrap();
        let w = Tensor::from_rows(&[&[0.3, -0.9, 0.45]]);
        let q = quantize(&w, &spec).unwrap();
        assert_eq!(q.qdata.values(), vec![2, -7, 4]);
        assert!((q.scales.scales[0] - 0.128571).abs() < 1e-6);
        assert!(close(dequantize(&q).data(), &[0.257142, -0.9, 0.514285], 1e-6));
    }

    #[test]
    fn scale_set_length_is_checked() {
        let spec = QuantSpec::per_channel(4).unwrap();
        let s = ScaleSet::new(vec![0.1], Granularity::PerChannel).unwrap();
        assert!(fake_quant(&Tensor::zeros([2, 2]), &s, &spec).is_err());
        assert!(ScaleSet::new(vec![0.1, 0.2], Granularity::PerTensor).is_err());
        assert!(ScaleSet::new(vec![-0.1], Granularity::PerChannel).is_err());
    }

    #[test]
    fn wide_bits_cannot_be_stored() {
        let spec = QuantSpec::per_channel(12).unwrap();
        assert!(quantize(&Tensor::zeros([1, 2]), &spec).is_err());
    }

    #[test]
    fn int4_packing_layout() {
        assert_eq!(pack_int4(&[1, -1]), vec![0xf1]);
        assert_eq!(pack_int4(&[-8, 7, 3]), vec![0x78, 0x03]);
        assert_eq!(unpack_int4(&[0x78, 0x03], 3), vec![-8, 7, 3]);
    }

    /// Per-row scales are not a refinement of the per-tensor grid, so a row that
    /// sits exactly on the coarse grid can do worse per channel.
    #[test]
    fn per_channel_mse_can_exceed_per_tensor_on_grid_aligned_rows() {
        let s = 0.8f32 / 7.0;
        let w = Tensor::from_rows(&[&[0.8, 0.0], &[6.0 * s, 3.0 * s]]);
        let pc = quantization_mse(&w, &QuantSpec::per_channel(4).unwrap());
        let pt = quantization_mse(&w, &QuantSpec::per_tensor(4).unwrap());
        assert!(pc > pt);
    }

    fn matrix_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..9).prop_flat_map(|(r, c)| {
            prop::collection::vec(-4.0f32..4.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d))
        })
    }

    fn spec_strategy() -> impl Strategy<Value = QuantSpec> {
        (2u32..=8, prop::bool::ANY).prop_map(|(bit, pc)| {
            QuantSpec::new(bit, if pc { Granularity::PerChannel } else { Granularity::PerTensor }).unwrap()
        })
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(w in matrix_strategy(), spec in spec_strategy()) {
            let q = quantize(&w, &spec).unwrap();
            let deq = dequantize(&q);
            let (rows, cols) = w.rows_cols();
            for r in 0..rows {
                let s = q.scales.for_row(r);
                for c in 0..cols {
                    let err = (w.data()[r * cols + c] - deq.data()[r * cols + c]).abs();
                    prop_assert!(err <= s / 2.0 * (1.0 + 4.0 * f32::EPSILON) + f32::EPSILON * s);
                }
            }
        }

        #[test]
        fn clip_never_binds_for_max_scales(w in matrix_strategy(), spec in spec_strategy()) {
            let scales = compute_scale(&w, &spec);
            let (rows, _) = w.rows_cols();
            for r in 0..rows {
                let s = scales.for_row(r);
                if s == 0.0 { continue; }
                for &v in w.row(r) {
                    prop_assert!(((v / s).round() as i32).abs() <= spec.upper());
                }
            }
        }

        #[test]
        fn fake_quant_matches_materialized(w in matrix_strategy(), spec in spec_strategy()) {
            let q = quantize(&w, &spec).unwrap();
            let fq = fake_quant(&w, &q.scales, &spec).unwrap();
            prop_assert!(fq.bit_eq(&dequantize(&q)));
            let again = quantize(&fq, &spec).unwrap();
            prop_assert_eq!(&again, &q);
        }

        #[test]
        fn packing_is_lossless(values in prop::collection::vec(-8i8..=7, 0..64)) {
            prop_assert_eq!(unpack_int4(&pack_int4(&values), values.len()), values.clone());
            let qd = QData::from_values(&values, 4);
            prop_assert_eq!(qd.byte_len(), values.len().div_ceil(2));
            prop_assert_eq!(qd.values(), values);
        }
    }
}
