//! Binary checkpoint container, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "NERVCKPT"
//! version    u32
//! header     u32 length + UTF-8 TOML (precision, step, final_loss, [variant])
//! count      u32
//! per tensor:
//!   name     u32 length + UTF-8
//!   ndim     u32, then ndim × u64 extents
//!   kind     u8: 0 = fp32, 1 = quantized
//!   fp32:    numel × f32
//!   quant:   bits u8, granularity u8 (0 channel, 1 tensor), groups u32,
//!            groups × f32 mins, groups × f32 scales, u64 length + packed codes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_weight_name, ModelParams, VariantConfig};
use crate::quant::{dequantize, quantize, Granularity, QuantPolicy, QuantizedTensor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NERVCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Fp32(Tensor<f32>),
    Quant(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Fp32(t) => t.shape(),
            StoredTensor::Quant(q) => &q.shape,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match self {
            StoredTensor::Fp32(t) => Ok(t.clone()),
            StoredTensor::Quant(q) => dequantize(q),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: VariantConfig,
    pub step: u64,
    pub final_loss: Option<f64>,
    pub tensors: Vec<(String, StoredTensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    precision: String,
    step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
    variant: VariantConfig,
}

/// Byte accounting for a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    pub precision: String,
    pub file_bytes: usize,
    /// Stored bytes of conv/linear weight values (packed codes when quantized).
    pub weight_payload_bytes: usize,
    /// The same weights at fp32.
    pub weight_fp32_bytes: usize,
    /// Everything else: magic, header, names, shapes, biases, calibration.
    pub overhead_bytes: usize,
}

impl SizeReport {
    pub fn payload_ratio(&self) -> f64 {
        self.weight_payload_bytes as f64 / self.weight_fp32_bytes as f64
    }

    pub fn to_table(&self) -> String {
        format!(
            "precision        {}\nfile bytes       {}\nweight payload   {}\nfp32 payload     {}\npayload ratio    {:.4}\noverhead bytes   {}\n",
            self.precision,
            self.file_bytes,
            self.weight_payload_bytes,
            self.weight_fp32_bytes,
            self.payload_ratio(),
            self.overhead_bytes
        )
    }
}

impl Checkpoint {
    pub fn from_params(variant: &VariantConfig, params: &ModelParams<f32>, step: u64, final_loss: Option<f64>) -> Result<Self> {
        params.validate(variant)?;
        Ok(Self {
            variant: variant.clone(),
            step,
            final_loss: final_loss.filter(|l| l.is_finite()),
            tensors: params
                .iter()
                .map(|(n, t)| (n.to_string(), StoredTensor::Fp32(t.clone())))
                .collect(),
        })
    }

    /// Bit width of the quantized weights, `None` for a full-precision checkpoint.
    pub fn quant_bits(&self) -> Option<u8> {
        self.tensors.iter().find_map(|(_, t)| match t {
            StoredTensor::Quant(q) => Some(q.bits),
            StoredTensor::Fp32(_) => None,
        })
    }

    pub fn precision(&self) -> String {
        match self.quant_bits() {
            Some(b) => format!("q{b}"),
            None => "fp32".into(),
        }
    }

    /// Post-training quantization of every weight tensor.
    pub fn quantized(&self, policy: &QuantPolicy) -> Result<Self> {
        policy.validate()?;
        if self.quant_bits().is_some() {
            return Err(Error::Usage(format!(
                "checkpoint is already quantized ({})",
                self.precision()
            )));
        }
        if policy.is_passthrough() {
            return Ok(self.clone());
        }
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let stored = match t {
                    StoredTensor::Fp32(w) if policy.targets(name) => StoredTensor::Quant(quantize(w, policy)?),
                    other => other.clone(),
                };
                Ok((name.clone(), stored))
            })
            .collect::<Result<_>>()?;
        Ok(Self { tensors, ..self.clone() })
    }

    /// Dequantized parameters, validated against the stored variant.
    pub fn params(&self) -> Result<ModelParams<f32>> {
        let entries = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.to_tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_entries(&self.variant, entries)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let header = Header {
            precision: self.precision(),
            step: self.step,
            final_loss: self.final_loss,
            variant: self.variant.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Internal(format!("header encoding: {e}")))?;
        put_bytes32(&mut out, text.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_bytes32(&mut out, name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::Fp32(w) => {
                    out.push(0);
                    for v in w.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                StoredTensor::Quant(q) => {
                    q.validate()?;
                    out.push(1);
                    out.push(q.bits);
                    out.push(match q.granularity {
                        Granularity::PerChannel => 0,
                        Granularity::PerTensor => 1,
                    });
                    put_u32(&mut out, q.mins.len() as u32);
                    for v in q.mins.iter().chain(&q.scales) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    out.extend_from_slice(&(q.packed.len() as u64).to_le_bytes());
                    out.extend_from_slice(&q.packed);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text = r.string()?;
        let header: Header = toml::from_str(&text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.variant.validate()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("tensor `{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("tensor `{name}` too large")))?;
            let stored = match r.u8()? {
                0 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    StoredTensor::Fp32(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?)
                }
                1 => {
                    let bits = r.u8()?;
                    let granularity = match r.u8()? {
                        0 => Granularity::PerChannel,
                        1 => Granularity::PerTensor,
                        g => return Err(Error::Format(format!("unknown granularity tag {g}"))),
                    };
                    let groups = r.u32()? as usize;
                    let mins = r.f32s(groups)?;
                    let scales = r.f32s(groups)?;
                    let len = r.u64()? as usize;
                    let packed = r.take(len)?.to_vec();
                    let q = QuantizedTensor {
                        bits,
                        granularity,
                        shape,
                        mins,
                        scales,
                        packed,
                    };
                    q.validate()?;
                    StoredTensor::Quant(q)
                }
                k => return Err(Error::Format(format!("unknown tensor kind {k} for `{name}`"))),
            };
            tensors.push((name, stored));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self {
            variant: header.variant,
            step: header.step,
            final_loss: header.final_loss,
            tensors,
        };
        if ckpt.precision() != header.precision {
            return Err(Error::Format(format!(
                "header says {} but tensors are {}",
                header.precision,
                ckpt.precision()
            )));
        }
        ckpt.validate_shapes()?;
        Ok(ckpt)
    }

    /// Tensor names and shapes must match the variant exactly.
    pub fn validate_shapes(&self) -> Result<()> {
        let specs = self.variant.param_shapes();
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, variant {} needs {}",
                self.tensors.len(),
                self.variant.name,
                specs.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.tensors) {
            if spec.name != *name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn size_report(&self) -> Result<SizeReport> {
        let file_bytes = self.to_bytes()?.len();
        let (mut payload, mut fp32) = (0, 0);
        for (name, t) in &self.tensors {
            if !is_weight_name(name) {
                continue;
            }
            match t {
                StoredTensor::Fp32(w) => {
                    payload += 4 * w.numel();
                    fp32 += 4 * w.numel();
                }
                StoredTensor::Quant(q) => {
                    payload += q.packed.len();
                    fp32 += 4 * q.numel();
                }
            }
        }
        Ok(SizeReport {
            precision: self.precision(),
            file_bytes,
            weight_payload_bytes: payload,
            weight_fp32_bytes: fp32,
            overhead_bytes: file_bytes - payload,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes32(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}
