use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Upsampling factors of the five decoder blocks.
pub const STRIDE_SCHEDULE: [usize; 5] = [5, 2, 2, 2, 2];
/// Spatial size of the seed feature map produced by the stem, at scale 1.
pub const SEED_GRID: (usize, usize) = (9, 16);
pub const KERNEL: usize = 3;

fn default_scale() -> usize {
    1
}

fn default_pe_base() -> f64 {
    1.25
}

fn default_pe_levels() -> usize {
    80
}

fn default_kernel() -> usize {
    KERNEL
}

fn default_seed_grid() -> (usize, usize) {
    SEED_GRID
}

/// Architecture of one decoder variant.
///
/// Variants differ only in channel widths. A config with fewer than five
/// blocks uses a prefix of the stride schedule and is a reduced-resolution
/// "desk" variant rather than one of the reference architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub stem_hidden: usize,
    pub seed_channels: usize,
    #[serde(default = "default_seed_grid")]
    pub seed_grid: (usize, usize),
    /// Integer multiplier applied to the seed grid.
    #[serde(default = "default_scale")]
    pub scale: usize,
    /// Post-shuffle channel count of each block.
    pub stage_widths: Vec<usize>,
    pub strides: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_pe_base")]
    pub pe_base: f64,
    #[serde(default = "default_pe_levels")]
    pub pe_levels: usize,
}

impl VariantConfig {
    fn reference(name: &str, stem_hidden: usize, seed: usize, width: usize, blocks: usize) -> Self {
        let mut stage_widths = vec![seed];
        stage_widths.extend(std::iter::repeat_n(width, 4));
        stage_widths.truncate(blocks);
        Self {
            name: name.to_string(),
            stem_hidden,
            seed_channels: seed,
            seed_grid: SEED_GRID,
            scale: 1,
            stage_widths,
            strides: STRIDE_SCHEDULE[..blocks].to_vec(),
            kernel: KERNEL,
            pe_base: default_pe_base(),
            pe_levels: default_pe_levels(),
        }
    }

    /// Built-in variants: `T`, `T+`, `S` and their three-block `-desk`
    /// counterparts (strides `(5,2,2)`, 180×320 output).
    pub fn named(name: &str) -> Result<Self> {
        let (base, blocks) = match name.strip_suffix("-desk") {
            Some(base) => (base, 3),
            None => (name, 5),
        };
        let cfg = match base {
            "T" => Self::reference(name, 256, 16, 32, blocks),
            "T+" => Self::reference(name, 512, 15, 64, blocks),
            "S" => Self::reference(name, 512, 26, 96, blocks),
            _ => {
                return config_err(format!(
                    "unknown variant {name:?} (expected T, T+, S or their -desk forms)"
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A named variant, or a custom variant read from a TOML file when
    /// `spec` is an existing path.
    pub fn resolve(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.is_file() {
            Self::load(path)
        } else {
            Self::named(spec)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("variant file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("variant config serializes")
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != KERNEL {
            return config_err(format!("kernel must be {KERNEL}, got {}", self.kernel));
        }
        if self.seed_grid != SEED_GRID {
            return config_err(format!(
                "seed grid must be {SEED_GRID:?}, got {:?}; use `scale` to enlarge it",
                self.seed_grid
            ));
        }
        if self.scale == 0 {
            return config_err("scale must be at least 1");
        }
        if self.strides.is_empty() || self.strides.len() > STRIDE_SCHEDULE.len() {
            return config_err(format!("need 1 to 5 blocks, got {}", self.strides.len()));
        }
        if self.strides[..] != STRIDE_SCHEDULE[..self.strides.len()] {
            return config_err(format!(
                "strides {:?} are not the schedule {:?} (or a prefix of it)",
                self.strides, STRIDE_SCHEDULE
            ));
        }
        if self.stage_widths.len() != self.strides.len() {
            return config_err(format!(
                "{} stage widths for {} blocks",
                self.stage_widths.len(),
                self.strides.len()
            ));
        }
        if self.stage_widths[0] != self.seed_channels {
            return config_err(format!(
                "first stage width {} must equal the seed width {}",
                self.stage_widths[0], self.seed_channels
            ));
        }
        if self.stem_hidden == 0 || self.seed_channels == 0 || self.stage_widths.contains(&0) {
            return config_err("channel counts must be positive");
        }
        if self.pe_levels == 0 || !(self.pe_base.is_finite() && self.pe_base > 0.0) {
            return config_err("positional encoding needs pe_levels >= 1 and pe_base > 0");
        }
        Ok(())
    }

    /// True for reduced-depth configurations that are not reference architectures.
    pub fn is_desk(&self) -> bool {
        self.strides.len() < STRIDE_SCHEDULE.len()
    }

    pub fn pe_dim(&self) -> usize {
        2 * self.pe_levels
    }

    pub fn seed_hw(&self) -> (usize, usize) {
        (self.seed_grid.0 * self.scale, self.seed_grid.1 * self.scale)
    }

    pub fn upsample_factor(&self) -> usize {
        self.strides.iter().product()
    }

    /// `(height, width)` of decoded frames.
    pub fn output_hw(&self) -> (usize, usize) {
        let (h, w) = self.seed_hw();
        let f = self.upsample_factor();
        (h * f, w * f)
    }

    pub fn last_width(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }

    /// Input channel count and conv grid `(h, w)` of block `i`.
    pub fn block_input(&self, i: usize) -> (usize, (usize, usize)) {
        let c_in = if i == 0 {
            self.seed_channels
        } else {
            self.stage_widths[i - 1]
        };
        let f: usize = self.strides[..i].iter().product();
        let (h, w) = self.seed_hw();
        (c_in, (h * f, w * f))
    }

    /// Output channel count of block `i`'s convolution (before the shuffle).
    pub fn block_conv_out(&self, i: usize) -> usize {
        self.stage_widths[i] * self.strides[i] * self.strides[i]
    }

    /// Every learnable tensor as `(name, shape, is_weight)`, in storage order.
    pub fn param_shapes(&self) -> Vec<ParamSpec> {
        let (sh, sw) = self.seed_hw();
        let mut out = vec![
            ParamSpec::weight("stem.0.weight", vec![self.stem_hidden, self.pe_dim()]),
            ParamSpec::bias("stem.0.bias", vec![self.stem_hidden]),
            ParamSpec::weight(
                "stem.1.weight",
                vec![self.seed_channels * sh * sw, self.stem_hidden],
            ),
            ParamSpec::bias("stem.1.bias", vec![self.seed_channels * sh * sw]),
        ];
        for i in 0..self.strides.len() {
            let (c_in, _) = self.block_input(i);
            let c_out = self.block_conv_out(i);
            out.push(ParamSpec::weight(
                format!("blocks.{i}.weight"),
                vec![c_out, c_in, self.kernel, self.kernel],
            ));
            out.push(ParamSpec::bias(format!("blocks.{i}.bias"), vec![c_out]));
        }
        out.push(ParamSpec::weight("head.weight", vec![3, self.last_width(), 1, 1]));
        out.push(ParamSpec::bias("head.bias", vec![3]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

/// Name, shape and role of one learnable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Conv/linear weights; the tensors weight quantization applies to.
    pub is_weight: bool,
}

impl ParamSpec {
    fn weight(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
            is_weight: true,
        }
    }

    fn bias(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
            is_weight: false,
        }
    }

    /// Fan-in used for initialization: all axes but the first.
    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_widths() {
        let t = VariantConfig::named("T").unwrap();
        assert_eq!(t.seed_channels, 16);
        assert_eq!(t.stem_hidden, 256);
        assert_eq!(t.stage_widths, vec![16, 32, 32, 32, 32]);
        let tp = VariantConfig::named("T+").unwrap();
        assert_eq!((tp.seed_channels, tp.stem_hidden), (15, 512));
        assert_eq!(tp.stage_widths, vec![15, 64, 64, 64, 64]);
        let s = VariantConfig::named("S").unwrap();
        assert_eq!((s.seed_channels, s.stem_hidden), (26, 512));
        assert_eq!(s.stage_widths, vec![26, 96, 96, 96, 96]);
        for c in [&t, &tp, &s] {
            assert_eq!(c.strides, vec![5, 2, 2, 2, 2]);
            assert_eq!(c.output_hw(), (720, 1280));
            assert!(!c.is_desk());
        }
    }

    #[test]
    fn desk_variants_are_three_blocks() {
        let d = VariantConfig::named("T-desk").unwrap();
        assert_eq!(d.strides, vec![5, 2, 2]);
        assert_eq!(d.stage_widths, vec![16, 32, 32]);
        assert_eq!(d.output_hw(), (180, 320));
        assert!(d.is_desk());
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(matches!(VariantConfig::named("M"), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_strides_rejected() {
        let mut c = VariantConfig::named("T").unwrap();
        c.strides = vec![2, 2, 2, 2, 2];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scale_multiplies_seed_grid_only() {
        let c = VariantConfig::named("T-desk").unwrap().with_scale(2);
        assert_eq!(c.output_hw(), (360, 640));
        assert_eq!(c.strides, vec![5, 2, 2]);
    }

    #[test]
    fn toml_round_trip() {
        let c = VariantConfig::named("T+").unwrap();
        let back = VariantConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        let custom = "name = \"mine\"\nstem_hidden = 64\nseed_channels = 8\nstage_widths = [8, 16]\nstrides = [5, 2]\n";
        let m = VariantConfig::from_toml(custom).unwrap();
        assert_eq!(m.pe_levels, 80);
        assert_eq!(m.output_hw(), (90, 160));
    }
}
