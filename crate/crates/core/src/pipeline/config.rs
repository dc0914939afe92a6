use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{TrainOptions, DEFAULT_LR};
use crate::distill::KdConfig;
use crate::error::{Error, Result};
use crate::model::VariantConfig;
use crate::quant::QuantPolicy;

fn d_variant() -> String {
    "T-desk".into()
}
fn d_steps() -> usize {
    1000
}
fn d_lr() -> f64 {
    DEFAULT_LR
}
fn d_batch() -> usize {
    1
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything a `train`, `distill` or `qat` run needs besides the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in variant name or path to a variant TOML file.
    #[serde(default = "d_variant")]
    pub variant: String,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_floor: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    /// Full-precision checkpoint to start QAT from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantPolicy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// `self` with every key present in `overrides` (a TOML document) replaced.
    pub fn overlay(&self, overrides: &str) -> Result<Self> {
        let mut base: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        let over: toml::Table = toml::from_str(overrides).map_err(|e| Error::Config(format!("run config: {e}")))?;
        merge(&mut base, over);
        Self::from_toml(&toml::to_string(&base).expect("table serializes"))
    }

    pub fn variant_config(&self) -> Result<VariantConfig> {
        VariantConfig::resolve(&self.variant)
    }

    /// Cross-field requirements; `qat` marks a quantization-aware run.
    pub fn validate(&self, qat: bool) -> Result<()> {
        self.kd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_floor >= 0.0) {
            return Err(Error::Config("learning rate must be positive and finite".into()));
        }
        if self.kd.uses_teacher() && self.teacher.is_none() {
            return Err(Error::Usage(format!("{:?} distillation requires `teacher`", self.kd.mode)));
        }
        if qat {
            if self.base_checkpoint.is_none() {
                return Err(Error::Usage("QAT requires `base_checkpoint`".into()));
            }
            match &self.quant {
                Some(q) if !q.is_passthrough() => q.validate()?,
                _ => return Err(Error::Config("QAT requires a [quant] policy with 2..=8 bits".into())),
            }
        }
        Ok(())
    }

    pub fn train_options(&self, output_root: Option<&Path>) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            lr: self.lr,
            lr_floor: self.lr_floor,
            batch_size: self.batch_size,
            seed: self.seed,
            kd: self.kd.clone(),
            quant: None,
            checkpoint_every: self.checkpoint_every,
            out_dir: Some(self.resolved_output(output_root)),
        }
    }

    /// Relative output directories are placed under `output_root` when given.
    pub fn resolved_output(&self, output_root: Option<&Path>) -> PathBuf {
        match output_root {
            Some(root) if self.output_dir.is_relative() => root.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::KdMode;

    #[test]
    fn defaults_and_round_trip() {
        let c = RunConfig::default();
        assert_eq!(c.variant, "T-desk");
        assert_eq!(c.kd.mode, KdMode::None);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn file_overrides_flags() {
        let flags = RunConfig {
            steps: 10,
            seed: 4,
            ..RunConfig::default()
        };
        let merged = flags.overlay("steps = 99\n[kd]\nmode = \"final\"\nlambda = 0.5\n").unwrap();
        assert_eq!(merged.steps, 99);
        assert_eq!(merged.seed, 4);
        assert_eq!(merged.kd.mode, KdMode::Final);
        assert_eq!(merged.kd.lambda, 0.5);
        assert_eq!(merged.kd.alpha, 2.0);
    }

    #[test]
    fn cross_field_rules() {
        let mut c = RunConfig::default();
        c.kd = KdConfig::with_mode(KdMode::Final);
        assert!(matches!(c.validate(false), Err(Error::Usage(_))));
        c.teacher = Some("t.ckpt".into());
        c.validate(false).unwrap();
        assert!(matches!(c.validate(true), Err(Error::Usage(_))));
        c.base_checkpoint = Some("b.ckpt".into());
        assert!(matches!(c.validate(true), Err(Error::Config(_))));
        c.quant = Some(QuantPolicy::new(4));
        c.validate(true).unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("stepz = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn output_root() {
        let c = RunConfig::default();
        assert_eq!(c.resolved_output(Some(Path::new("/tmp/o"))), Path::new("/tmp/o/runs"));
        assert_eq!(c.resolved_output(None), Path::new("runs"));
    }
}
