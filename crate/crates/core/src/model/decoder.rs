use std::f64::consts::PI;

use super::config::VariantConfig;
use super::params::ModelParams;
use crate::error::{input_err, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// `[sin(b⁰πt), cos(b⁰πt), …, sin(b^{l−1}πt), cos(b^{l−1}πt)]`.
pub fn positional_encode<T: Real>(t: f64, base: f64, levels: usize) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return input_err(format!("frame index {t} outside [0, 1]"));
    }
    if levels == 0 {
        return input_err("positional encoding needs at least one level");
    }
    let mut out = Vec::with_capacity(2 * levels);
    for i in 0..levels {
        let arg = base.powi(i as i32) * PI * t;
        out.push(T::lit(arg.sin()));
        out.push(T::lit(arg.cos()));
    }
    Tensor::new(vec![2 * levels], out)
}

/// Parameters recorded on a graph, in [`ModelParams`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    /// Leaves that receive gradients (or constants for a frozen model).
    pub leaves: Vec<Var>,
    /// Values actually consumed by the forward pass; differ from `leaves`
    /// where a weight transform (fake quantization) is applied.
    pub effective: Vec<Var>,
}

impl BoundParams {
    /// Records `params` as trainable leaves (or constants when `trainable` is false).
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> Self {
        let leaves: Vec<Var> = params
            .tensors()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self {
            effective: leaves.clone(),
            leaves,
        }
    }

    /// Like [`bind`](Self::bind), replacing selected forward values while routing
    /// gradients straight through to the original leaves.
    pub fn bind_with<T: Real>(
        g: &mut Graph<T>,
        params: &ModelParams<T>,
        mut transform: impl FnMut(&str, &Tensor<T>) -> Result<Option<Tensor<T>>>,
    ) -> Result<Self> {
        let mut leaves = Vec::with_capacity(params.len());
        let mut effective = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let leaf = g.param(t.clone());
            leaves.push(leaf);
            effective.push(match transform(name, t)? {
                Some(replacement) => g.straight_through(leaf, replacement)?,
                None => leaf,
            });
        }
        Ok(Self { leaves, effective })
    }
}

/// Nodes of one decoded frame.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// `[3, H, W]` in `[0, 1]`.
    pub frame: Var,
    /// Post-activation output of every block, in block order.
    pub stage_features: Vec<Var>,
}

/// Records a full decode of frame index `t` on `g`:
/// PE → linear → GELU → linear → reshape → blocks {conv3×3 → shuffle → GELU} → 1×1 conv → sigmoid.
pub fn decode_on_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &VariantConfig,
    p: &BoundParams,
    t: f64,
) -> Result<DecodeOutput> {
    let pe = positional_encode::<T>(t, cfg.pe_base, cfg.pe_levels)?;
    let e = &p.effective;
    let x = g.constant(pe);
    let h = g.linear(x, e[0], e[1])?;
    let h = g.gelu(h);
    let h = g.linear(h, e[2], e[3])?;
    let (sh, sw) = cfg.seed_hw();
    let mut x = g.reshape(h, &[cfg.seed_channels, sh, sw])?;
    let mut stage_features = Vec::with_capacity(cfg.strides.len());
    for (i, &s) in cfg.strides.iter().enumerate() {
        let y = g.conv2d(x, e[4 + 2 * i], e[5 + 2 * i])?;
        let y = g.pixel_shuffle(y, s)?;
        x = g.gelu(y);
        stage_features.push(x);
    }
    let n = 4 + 2 * cfg.strides.len();
    let y = g.conv2d(x, e[n], e[n + 1])?;
    let frame = g.sigmoid(y);
    Ok(DecodeOutput {
        frame,
        stage_features,
    })
}

/// Inference-only decode of frame index `t`. Parameters are read, never written,
/// so concurrent calls over one `ModelParams` are safe.
pub fn decode<T: Real>(params: &ModelParams<T>, cfg: &VariantConfig, t: f64) -> Result<Tensor<T>> {
    params.validate(cfg)?;
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let out = decode_on_graph(&mut g, cfg, &bound, t)?;
    Ok(g.value(out.frame).clone())
}
