use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::quant::{integer_bounds, Granularity, QuantSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QatMethod {
    None,
    Ste,
    Pqn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMethod {
    None,
    Norm,
    Mixed,
    Lsc,
    Vn,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::Parameter(format!(concat!("unknown ", stringify!($ty), " {:?}"), other))),
                }
            }
        }
    };
}

string_enum!(QatMethod { None => "none", Ste => "ste", Pqn => "pqn" });
string_enum!(OutlierMethod { None => "none", Norm => "norm", Mixed => "mixed", Lsc => "lsc", Vn => "vn" });

/// Training-time weight treatment for one group of dense layers.
///
/// `p`, `c`, `k` and `stop_scale_gradient` have method-dependent defaults:
/// `p = ∞` (or 8 for `mixed`), `c = 1/(2^(bit-1)-1)` (written as `null`),
/// `k = 8`, and the scale gradient is stopped exactly when `outlier_method`
/// is `none`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQatConfig")]
pub struct QatConfig {
    pub qat_method: QatMethod,
    pub outlier_method: OutlierMethod,
    pub bit: u32,
    pub granularity: Granularity,
    #[serde(serialize_with = "serialize_p")]
    pub p: f64,
    /// Scale multiplier; `None` means the QAT preset `1/u`.
    pub c: Option<f64>,
    pub k: usize,
    pub stop_scale_gradient: bool,
    pub vn_std: f32,
    /// Apply the `1/sqrt(N·u)` step-size gradient scaling to learnable scales.
    pub lsc_grad_scale: bool,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl QatConfig {
    fn base(qat_method: QatMethod, outlier_method: OutlierMethod, bit: u32, granularity: Granularity) -> Self {
        Self {
            qat_method,
            outlier_method,
            bit,
            granularity,
            p: if outlier_method == OutlierMethod::Mixed { 8.0 } else { f64::INFINITY },
            c: None,
            k: 8,
            stop_scale_gradient: outlier_method == OutlierMethod::None,
            vn_std: 0.0,
            lsc_grad_scale: true,
        }
    }

    /// Plain float training.
    pub fn none() -> Self {
        Self::base(QatMethod::None, OutlierMethod::None, 4, Granularity::PerChannel)
    }

    pub fn ste(bit: u32, granularity: Granularity, outlier: OutlierMethod) -> Self {
        Self::base(QatMethod::Ste, outlier, bit, granularity)
    }

    pub fn pqn(bit: u32, granularity: Granularity, outlier: OutlierMethod) -> Self {
        Self::base(QatMethod::Pqn, outlier, bit, granularity)
    }

    /// Mixed-scale mode: `p = 8` over the `k` largest magnitudes, `c = 1/u`.
    pub fn mixed(qat: QatMethod, bit: u32, granularity: Granularity, k: usize) -> Self {
        Self { k, ..Self::base(qat, OutlierMethod::Mixed, bit, granularity) }
    }

    /// Generalization mode: `p = 2` with an arbitrary `c`, scale gradient flowing.
    pub fn generalization(bit: u32, granularity: Granularity, c: f64) -> Self {
        Self { p: 2.0, c: Some(c), ..Self::base(QatMethod::Pqn, OutlierMethod::Norm, bit, granularity) }
    }

    pub fn variational_noise(std: f32) -> Self {
        Self { vn_std: std, ..Self::base(QatMethod::None, OutlierMethod::Vn, 4, Granularity::PerChannel) }
    }

    pub fn with_stop_scale_gradient(mut self, stop: bool) -> Self {
        self.stop_scale_gradient = stop;
        self
    }

    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec { bit: self.bit, granularity: self.granularity }
    }

    /// `u = 2^(bit-1) - 1`.
    pub fn upper(&self) -> i32 {
        self.quant_spec().upper()
    }

    pub fn is_plain(&self) -> bool {
        self.qat_method == QatMethod::None && self.outlier_method == OutlierMethod::None
    }

    /// Whether the training forward pass draws random numbers.
    pub fn uses_noise(&self) -> bool {
        self.qat_method == QatMethod::Pqn || self.outlier_method == OutlierMethod::Vn
    }

    pub fn validate(&self) -> Result<()> {
        use OutlierMethod as O;
        use QatMethod as Q;
        integer_bounds(self.bit)?;
        if self.p.is_nan() || self.p < 1.0 {
            return Err(Error::Parameter(format!("p must be >= 1 or inf, got {}", self.p)));
        }
        if let Some(c) = self.c {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(Error::Parameter(format!("c must be finite and >= 0, got {c}")));
            }
        }
        if self.k == 0 {
            return Err(Error::Parameter("k must be positive".into()));
        }
        if !(self.vn_std >= 0.0) {
            return Err(Error::Parameter(format!("vn_std must be >= 0, got {}", self.vn_std)));
        }
        match (self.qat_method, self.outlier_method) {
            (Q::None, O::None | O::Vn)
            | (Q::Ste | Q::Pqn, O::None | O::Norm | O::Mixed | O::Lsc) => Ok(()),
            (q, o) => Err(Error::Config(format!("unsupported combination qat={q}, outlier={o}"))),
        }
    }

    /// Short human-readable label, e.g. `pqn/norm/4b/per_channel`.
    pub fn label(&self) -> String {
        format!("{}/{}/{}b/{}", self.qat_method, self.outlier_method, self.bit, self.granularity.as_str())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQatConfig {
    qat_method: QatMethod,
    #[serde(default = "default_outlier")]
    outlier_method: OutlierMethod,
    #[serde(default = "default_bit")]
    bit: u32,
    #[serde(default = "default_granularity")]
    granularity: Granularity,
    #[serde(default, deserialize_with = "deserialize_p")]
    p: Option<f64>,
    #[serde(default)]
    c: Option<f64>,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    stop_scale_gradient: Option<bool>,
    #[serde(default)]
    vn_std: f32,
    #[serde(default = "default_true")]
    lsc_grad_scale: bool,
}

fn default_outlier() -> OutlierMethod {
    OutlierMethod::None
}
fn default_bit() -> u32 {
    4
}
fn default_granularity() -> Granularity {
    Granularity::PerChannel
}
fn default_true() -> bool {
    true
}

impl TryFrom<RawQatConfig> for QatConfig {
    type Error = Error;

    fn try_from(raw: RawQatConfig) -> Result<Self> {
        let mut cfg = QatConfig::base(raw.qat_method, raw.outlier_method, raw.bit, raw.granularity);
        if let Some(p) = raw.p {
            cfg.p = p;
        }
        cfg.c = raw.c;
        if let Some(k) = raw.k {
            cfg.k = k;
        }
        if let Some(stop) = raw.stop_scale_gradient {
            cfg.stop_scale_gradient = stop;
        }
        cfg.vn_std = raw.vn_std;
        cfg.lsc_grad_scale = raw.lsc_grad_scale;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn serialize_p<S: Serializer>(p: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if p.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*p)
    }
}

fn deserialize_p<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum P {
        Num(f64),
        Text(String),
    }
    match Option::<P>::deserialize(d)? {
        None => Ok(None),
        Some(P::Num(v)) => Ok(Some(v)),
        Some(P::Text(t)) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => Ok(Some(f64::INFINITY)),
        Some(P::Text(t)) => Err(serde::de::Error::custom(format!("invalid p {t:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let q = QatConfig::pqn(4, Granularity::PerChannel, OutlierMethod::Norm);
        assert!(q.p.is_infinite() && q.c.is_none() && !q.stop_scale_gradient);
        let n = QatConfig::pqn(4, Granularity::PerChannel, OutlierMethod::None);
        assert!(n.stop_scale_gradient);
        let m = QatConfig::mixed(QatMethod::Pqn, 4, Granularity::PerTensor, 8);
        assert_eq!((m.p, m.k), (8.0, 8));
        let g = QatConfig::generalization(4, Granularity::PerChannel, 0.1);
        assert_eq!((g.p, g.c), (2.0, Some(0.1)));
    }

    #[test]
    fn json_defaults_and_round_trip() {
        let cfg: QatConfig = serde_json::from_str(r#"{"qat_method":"pqn","outlier_method":"mixed"}"#).unwrap();
        assert_eq!(cfg, QatConfig::mixed(QatMethod::Pqn, 4, Granularity::PerChannel, 8));
        let text = serde_json::to_string(&QatConfig::pqn(4, Granularity::PerTensor, OutlierMethod::Norm)).unwrap();
        assert!(text.contains(r#""p":"inf""#));
        let back: QatConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, QatConfig::pqn(4, Granularity::PerTensor, OutlierMethod::Norm));
    }

    #[test]
    fn unknown_keys_and_bad_combos_rejected() {
        assert!(serde_json::from_str::<QatConfig>(r#"{"qat_method":"pqn","bogus":1}"#).is_err());
        assert!(serde_json::from_str::<QatConfig>(r#"{"qat_method":"none","outlier_method":"norm"}"#).is_err());
        assert!(serde_json::from_str::<QatConfig>(r#"{"qat_method":"pqn","p":0.5}"#).is_err());
        assert!(QatConfig { qat_method: QatMethod::Ste, ..QatConfig::variational_noise(0.1) }.validate().is_err());
    }
}
