use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::VariantConfig;
use crate::error::{config_err, Result};
use crate::tensor::{Real, Tensor};

/// The complete learnable state of one decoder. For an implicit video
/// representation this *is* the encoded video.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ModelParams<T> {
    /// Uniform `±1/sqrt(fan_in)` initialization, deterministic in `seed`.
    pub fn init(cfg: &VariantConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = cfg
            .param_shapes()
            .into_iter()
            .map(|spec| {
                let bound = 1.0 / (spec.fan_in() as f64).sqrt();
                let t = Tensor::from_fn(&spec.shape, |_| T::lit(rng.gen_range(-bound..bound)));
                (spec.name, t)
            })
            .collect();
        Self { entries }
    }

    pub fn zeros(cfg: &VariantConfig) -> Self {
        Self {
            entries: cfg
                .param_shapes()
                .into_iter()
                .map(|s| (s.name, Tensor::zeros(&s.shape)))
                .collect(),
        }
    }

    /// Builds from named tensors; order and shapes are checked against `cfg`.
    pub fn from_entries(cfg: &VariantConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let p = Self { entries };
        p.validate(cfg)?;
        Ok(p)
    }

    pub fn validate(&self, cfg: &VariantConfig) -> Result<()> {
        let specs = cfg.param_shapes();
        if specs.len() != self.entries.len() {
            return config_err(format!(
                "variant {} has {} tensors, parameters have {}",
                cfg.name,
                specs.len(),
                self.entries.len()
            ));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.entries) {
            if &spec.name != name || spec.shape != t.shape() {
                return config_err(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }
}

/// Whether a parameter name refers to a conv/linear weight (quantization target).
pub fn is_weight_name(name: &str) -> bool {
    name.ends_with(".weight")
}
