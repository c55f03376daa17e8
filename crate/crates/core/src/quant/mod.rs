//! Simulated uniform asymmetric quantization.
//!
//! Encodings are per tensor and come from the tensor's own range widened to
//! include zero; rounding is half-to-even everywhere.

mod forward;

pub use forward::{
    float_forward, folded_float_forward, quant_error_metrics, quantized_forward,
    quantized_forward_traced, ForwardTrace, QuantErrorMetrics,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;
pub const DEFAULT_EPS_FOLD: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Float32,
    Quant(u32),
}

impl Precision {
    pub fn bits(self) -> Option<u32> {
        match self {
            Precision::Float32 => None,
            Precision::Quant(b) => Some(b),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Precision::Quant(b) if !(MIN_BITS..=MAX_BITS).contains(&b) => Err(Error::Config(
                format!("bitwidth {b} outside {MIN_BITS}..={MAX_BITS}"),
            )),
            _ => Ok(()),
        }
    }

    /// `float32, quant8, quant4`.
    pub fn defaults() -> Vec<Precision> {
        vec![Precision::Float32, Precision::Quant(8), Precision::Quant(4)]
    }

    /// Parses a comma-separated list such as `float32,quant8`.
    pub fn parse_list(s: &str) -> Result<Vec<Precision>> {
        let out: Vec<Precision> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(Error::Config("empty precision list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Float32 => f.write_str("float32"),
            Precision::Quant(b) => write!(f, "quant{b}"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = if s == "float32" {
            Precision::Float32
        } else if let Some(b) = s.strip_prefix("quant").and_then(|n| n.parse::<u32>().ok()) {
            Precision::Quant(b)
        } else {
            return Err(Error::Config(format!(
                "unknown precision '{s}' (expected float32 or quantN with {MIN_BITS} <= N <= {MAX_BITS})"
            )));
        };
        p.validate()?;
        Ok(p)
    }
}

impl Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub precision: Precision,
    /// Epsilon of batch normalization and of the fold denominator.
    pub eps_fold: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            precision: Precision::Float32,
            eps_fold: DEFAULT_EPS_FOLD,
        }
    }
}

impl QuantConfig {
    pub fn float() -> Self {
        QuantConfig::default()
    }

    pub fn bits(b: u32) -> Self {
        QuantConfig {
            precision: Precision::Quant(b),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.precision.validate()?;
        if !(self.eps_fold > 0.0 && self.eps_fold.is_finite()) {
            return Err(Error::Config(format!("eps_fold must be > 0, got {}", self.eps_fold)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantEncoding {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u32,
}

impl QuantEncoding {
    pub fn qmax(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    /// Integer code of `x`.
    pub fn quantize(&self, x: f64) -> i64 {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f64;
        q.clamp(0.0, self.qmax() as f64) as i64
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        (q - self.zero_point) as f64 * self.scale
    }

    pub fn fake(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }
}

/// Encoding for `data` from its range widened to contain zero.
pub fn encoding_for(data: &[f64], bits: u32) -> Result<QuantEncoding> {
    Precision::Quant(bits).validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("compute_encoding: empty tensor".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compute_encoding input".into()));
    }
    let rmin = data.iter().copied().fold(0.0f64, f64::min);
    let rmax = data.iter().copied().fold(0.0f64, f64::max);
    let qmax = ((1u64 << bits) - 1) as f64;
    if rmax == rmin {
        return Ok(QuantEncoding {
            scale: 1.0,
            zero_point: 0,
            bits,
        });
    }
    let scale = (rmax - rmin) / qmax;
    let zero_point = (-rmin / scale).round_ties_even().clamp(0.0, qmax) as i64;
    Ok(QuantEncoding {
        scale,
        zero_point,
        bits,
    })
}

pub fn compute_encoding(t: &Tensor, bits: u32) -> Result<QuantEncoding> {
    encoding_for(t.data(), bits)
}

pub fn fake_quantize(t: &Tensor, enc: &QuantEncoding) -> Tensor {
    t.map(|x| enc.fake(x))
}

/// Encoding from `t` itself, then quantize-dequantize.
pub fn fake_quantize_dynamic(t: &Tensor, bits: u32) -> Result<(Tensor, QuantEncoding)> {
    let enc = compute_encoding(t, bits)?;
    Ok((fake_quantize(t, &enc), enc))
}

#[derive(Clone, Debug)]
pub struct BnFoldInputs<'a> {
    pub w: &'a Tensor,
    pub gamma: &'a Tensor,
    pub batch_var: &'a Tensor,
    pub eps: f64,
}

/// Scales output channel `c` of `w` by `gamma[c] / sqrt(batch_var[c] + eps)`.
pub fn bn_fold(inp: &BnFoldInputs) -> Result<Tensor> {
    let cout = inp.w.shape()[0];
    if inp.gamma.shape() != [cout] || inp.batch_var.shape() != [cout] {
        return Err(Error::shape(
            "bn_fold",
            format!(
                "weight has {cout} output channels but gamma is {:?} and batch_var is {:?}",
                inp.gamma.shape(),
                inp.batch_var.shape()
            ),
        ));
    }
    if inp.eps <= 0.0 {
        return Err(Error::Invalid("bn_fold: eps must be > 0".into()));
    }
    if inp.batch_var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid("bn_fold: negative batch variance".into()));
    }
    let per = inp.w.numel() / cout;
    let factors: Vec<f64> = (0..cout)
        .map(|c| inp.gamma.data()[c] / (inp.batch_var.data()[c] + inp.eps).sqrt())
        .collect();
    let data = inp
        .w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| factors[i / per] * w)
        .collect();
    Tensor::new(inp.w.shape().to_vec(), data)
}
