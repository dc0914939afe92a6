//! Weights-only uniform min–max quantization.
//!
//! Per channel: `s = (w_max − w_min) / 2ᵇ`, `code = clamp(round((w − w_min)/s), 0, 2ᵇ−1)`,
//! `w̃ = s·code + w_min`. With the `2ᵇ` denominator the channel maximum would map to
//! code `2ᵇ`, so the top code is clamped; elements rounding there carry an error of up
//! to `s` instead of `s/2`.

mod pack;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use pack::{pack_bits, packed_len, unpack_bits};

use crate::error::{config_err, Error, Result};
use crate::model::{is_weight_name, BoundParams, ModelParams};
use crate::tensor::{Graph, Real, Tensor};

/// Bit width meaning "leave weights at full precision".
pub const PASSTHROUGH_BITS: u8 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One range per output channel (leading axis).
    PerChannel,
    PerTensor,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_channel" | "per-channel" | "channel" => Ok(Self::PerChannel),
            "per_tensor" | "per-tensor" | "tensor" => Ok(Self::PerTensor),
            _ => config_err(format!("unknown granularity `{s}` (per_channel|per_tensor)")),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerChannel => "per_channel",
            Self::PerTensor => "per_tensor",
        })
    }
}

/// Which tensors are quantized and how. Only conv/linear weights are ever
/// targeted; biases and activations stay in floating point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPolicy {
    pub bits: u8,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
}

fn default_granularity() -> Granularity {
    Granularity::PerChannel
}

impl QuantPolicy {
    pub fn new(bits: u8) -> Self {
        Self {
            bits,
            granularity: Granularity::PerChannel,
        }
    }

    pub fn per_tensor(bits: u8) -> Self {
        Self {
            bits,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn passthrough() -> Self {
        Self::new(PASSTHROUGH_BITS)
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_passthrough() || (2..=8).contains(&self.bits) {
            Ok(())
        } else {
            config_err(format!(
                "bit width {} unsupported (2..=8, or {PASSTHROUGH_BITS} for full precision)",
                self.bits
            ))
        }
    }

    /// Whether the named parameter is a quantization target.
    pub fn targets(&self, name: &str) -> bool {
        !self.is_passthrough() && is_weight_name(name)
    }
}

/// Integer codes plus the affine calibration needed to reconstruct a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub bits: u8,
    pub granularity: Granularity,
    pub shape: Vec<usize>,
    /// One entry per channel (a single entry for per-tensor).
    pub mins: Vec<f32>,
    pub scales: Vec<f32>,
    /// Codes packed by [`pack_bits`].
    pub packed: Vec<u8>,
}

/// Per-group calibration, reusable to re-quantize values with fixed ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub bits: u8,
    pub granularity: Granularity,
    pub mins: Vec<f32>,
    pub scales: Vec<f32>,
}

fn groups(shape: &[usize], granularity: Granularity) -> usize {
    match granularity {
        Granularity::PerChannel => shape.first().copied().unwrap_or(1).max(1),
        Granularity::PerTensor => 1,
    }
}

/// Observes exact per-group min/max and derives `s = (max − min)/2ᵇ`.
pub fn calibrate<T: Real>(w: &Tensor<T>, policy: &QuantPolicy) -> Result<Calibration> {
    if !(2..=8).contains(&policy.bits) {
        return config_err(format!("bit width {} outside 2..=8", policy.bits));
    }
    w.check_finite("weight to quantize")?;
    let n_groups = groups(w.shape(), policy.granularity);
    if w.numel() == 0 || !w.numel().is_multiple_of(n_groups) {
        return Err(Error::Input(format!("cannot quantize tensor of shape {:?}", w.shape())));
    }
    let per = w.numel() / n_groups;
    let levels = (1u32 << policy.bits) as f64;
    let (mut mins, mut scales) = (Vec::with_capacity(n_groups), Vec::with_capacity(n_groups));
    for chunk in w.data().chunks(per) {
        let (lo, hi) = chunk.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64_lossy();
            (lo.min(v), hi.max(v))
        });
        mins.push(lo as f32);
        scales.push(((hi - lo) / levels) as f32);
    }
    Ok(Calibration {
        bits: policy.bits,
        granularity: policy.granularity,
        mins,
        scales,
    })
}

/// Integer codes of `w` under a fixed calibration.
pub fn codes_with<T: Real>(w: &Tensor<T>, cal: &Calibration) -> Result<Vec<u8>> {
    let n_groups = cal.mins.len();
    if n_groups == 0 || !w.numel().is_multiple_of(n_groups) || groups(w.shape(), cal.granularity) != n_groups {
        return Err(Error::Input(format!(
            "calibration with {n_groups} groups does not fit tensor of shape {:?}",
            w.shape()
        )));
    }
    let per = w.numel() / n_groups;
    let top = ((1u32 << cal.bits) - 1) as f64;
    let mut codes = Vec::with_capacity(w.numel());
    for (g, chunk) in w.data().chunks(per).enumerate() {
        let (lo, s) = (cal.mins[g] as f64, cal.scales[g] as f64);
        for v in chunk {
            let c = if s > 0.0 {
                ((v.to_f64_lossy() - lo) / s).round().clamp(0.0, top)
            } else {
                0.0
            };
            codes.push(c as u8);
        }
    }
    Ok(codes)
}

/// Quantizes with ranges observed on `w` itself.
pub fn quantize<T: Real>(w: &Tensor<T>, policy: &QuantPolicy) -> Result<QuantizedTensor> {
    let cal = calibrate(w, policy)?;
    requantize(w, &cal)
}

/// Quantizes `w` reusing an existing calibration. Re-quantizing a dequantized tensor
/// with its own calibration reproduces the same codes.
pub fn requantize<T: Real>(w: &Tensor<T>, cal: &Calibration) -> Result<QuantizedTensor> {
    let codes = codes_with(w, cal)?;
    Ok(QuantizedTensor {
        bits: cal.bits,
        granularity: cal.granularity,
        shape: w.shape().to_vec(),
        mins: cal.mins.clone(),
        scales: cal.scales.clone(),
        packed: pack_bits(&codes, cal.bits)?,
    })
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            bits: self.bits,
            granularity: self.granularity,
            mins: self.mins.clone(),
            scales: self.scales.clone(),
        }
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_bits(&self.packed, self.bits, self.numel())
    }

    /// Checks internal consistency (calibration length, payload length).
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Format(format!("bit width {} outside 2..=8", self.bits)));
        }
        let n_groups = groups(&self.shape, self.granularity);
        if self.mins.len() != n_groups || self.scales.len() != n_groups {
            return Err(Error::Format(format!(
                "expected {n_groups} calibration groups for shape {:?}, found {}/{}",
                self.shape,
                self.mins.len(),
                self.scales.len()
            )));
        }
        if !self.numel().is_multiple_of(n_groups) {
            return Err(Error::Format(format!("shape {:?} not divisible into groups", self.shape)));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.mins.iter().any(|m| !m.is_finite()) {
            return Err(Error::Format("non-finite or negative calibration".into()));
        }
        let expected = packed_len(self.numel(), self.bits);
        if self.packed.len() != expected {
            return Err(Error::Format(format!(
                "packed payload has {} bytes, expected {expected}",
                self.packed.len()
            )));
        }
        Ok(())
    }
}

/// `w̃ = s·code + w_min`.
pub fn dequantize<T: Real>(q: &QuantizedTensor) -> Result<Tensor<T>> {
    q.validate()?;
    let codes = q.codes()?;
    let per = q.numel() / q.mins.len();
    let data = codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let g = i / per;
            T::lit(q.scales[g] as f64 * c as f64 + q.mins[g] as f64)
        })
        .collect();
    Tensor::new(q.shape.clone(), data)
}

/// Quantize-then-dequantize image of `w`; the forward value of fake quantization.
pub fn fake_quant<T: Real>(w: &Tensor<T>, policy: &QuantPolicy) -> Result<Tensor<T>> {
    if policy.is_passthrough() {
        return Ok(w.clone());
    }
    dequantize(&quantize(w, policy)?)
}

/// Post-training quantization: every targeted weight is replaced by its
/// quantize∘dequantize image; all other tensors are copied unchanged.
pub fn ptq_apply<T: Real>(params: &ModelParams<T>, policy: &QuantPolicy) -> Result<ModelParams<T>> {
    policy.validate()?;
    let mut out = params.clone();
    for (name, t) in out.iter_mut() {
        if policy.targets(name) {
            *t = fake_quant(t, policy)?;
        }
    }
    Ok(out)
}

/// Records `params` as trainable leaves whose targeted weights are fake-quantized
/// in the forward pass, with straight-through gradients. Calibration is
/// recomputed from the current weights on every call.
pub fn bind_fake_quant<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    policy: &QuantPolicy,
) -> Result<BoundParams> {
    policy.validate()?;
    BoundParams::bind_with(g, params, |name, t| {
        if policy.targets(name) {
            fake_quant(t, policy).map(Some)
        } else {
            Ok(None)
        }
    })
}

/// Mean absolute quantization error over the targeted weights of `params`.
pub fn mean_weight_error<T: Real>(params: &ModelParams<T>, policy: &QuantPolicy) -> Result<f64> {
    let q = ptq_apply(params, policy)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((name, a), (_, b)) in params.iter().zip(q.iter()) {
        if is_weight_name(name) {
            sum += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
                .sum::<f64>();
            n += a.numel();
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
