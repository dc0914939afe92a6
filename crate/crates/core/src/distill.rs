//! Training objectives: the reconstruction loss and the teacher-guided terms.
//!
//! Every `‖·‖₁` below is a mean absolute difference. Teacher tensors enter the
//! graph as constants, so no gradient can reach a teacher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::metrics::{SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use crate::model::VariantConfig;
use crate::tensor::kernels::{blur_2d, gaussian_kernel, Padding};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Weight of the L1 term in the reconstruction loss; SSIM gets `1 − β`.
pub const RECON_L1_WEIGHT: f64 = 0.7;
/// Added to the max normalizer of the focal map.
pub const FOCAL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    None,
    Final,
    Freq,
    FreqFocal,
    Temporal,
    Feature,
}

impl std::str::FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => KdMode::None,
            "final" => KdMode::Final,
            "freq" => KdMode::Freq,
            "freq_focal" | "freq-focal" => KdMode::FreqFocal,
            "temporal" => KdMode::Temporal,
            "feature" => KdMode::Feature,
            _ => return config_err(format!("unknown distillation mode {s:?}")),
        })
    }
}

fn d_lambda() -> f64 {
    1.0
}
fn d_alpha() -> f64 {
    2.0
}
fn d_gamma() -> f64 {
    1.0
}
fn d_sigma() -> f64 {
    1.0
}
fn d_radius() -> usize {
    3
}
fn d_delta() -> usize {
    1
}
fn d_floor() -> f64 {
    0.1
}
fn d_stages() -> Vec<usize> {
    vec![2, 3, 4, 5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub mode: KdMode,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// High-frequency weight.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Focal exponent.
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Gaussian std of the low-pass filter, in pixels.
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_radius")]
    pub kernel_radius: usize,
    /// Frame step of the temporal term.
    #[serde(default = "d_delta")]
    pub delta: usize,
    /// Additive floor of the focal weight map.
    #[serde(default = "d_floor")]
    pub w_floor: f64,
    /// 1-based block indices compared by feature distillation.
    #[serde(default = "d_stages")]
    pub feature_stages: Vec<usize>,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self::with_mode(KdMode::None)
    }
}

impl KdConfig {
    pub fn with_mode(mode: KdMode) -> Self {
        Self {
            mode,
            lambda: d_lambda(),
            alpha: d_alpha(),
            gamma: d_gamma(),
            sigma: d_sigma(),
            kernel_radius: d_radius(),
            delta: d_delta(),
            w_floor: d_floor(),
            feature_stages: d_stages(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.alpha >= 0.0 && self.gamma >= 0.0 && self.w_floor >= 0.0) {
            return config_err("lambda, alpha, gamma and w_floor must be non-negative");
        }
        if !(self.sigma > 0.0) {
            return config_err("sigma must be positive");
        }
        if (self.kernel_radius as f64) < (3.0 * self.sigma).ceil() {
            return config_err(format!(
                "kernel radius {} below ceil(3·sigma) = {}",
                self.kernel_radius,
                (3.0 * self.sigma).ceil()
            ));
        }
        if self.delta == 0 {
            return config_err("temporal step must be at least 1");
        }
        Ok(())
    }

    /// Whether this configuration consumes a teacher at all.
    pub fn uses_teacher(&self) -> bool {
        self.mode != KdMode::None
    }

    /// Feature stages (0-based) that exist in both variants.
    pub fn resolved_stages(&self, student: &VariantConfig, teacher: &VariantConfig) -> Vec<usize> {
        let blocks = student.strides.len().min(teacher.strides.len());
        self.feature_stages
            .iter()
            .filter(|&&s| s >= 1 && s <= blocks)
            .map(|s| s - 1)
            .collect()
    }
}

/// Mean single-scale SSIM recorded on the graph (11×11 Gaussian, valid window, peak 1).
pub fn ssim_on_graph<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let k = gaussian_kernel::<T>(SSIM_SIGMA, SSIM_WINDOW / 2);
    let c1 = T::lit(SSIM_K1 * SSIM_K1);
    let c2 = T::lit(SSIM_K2 * SSIM_K2);
    let mx = g.blur(x, &k, Padding::Valid)?;
    let my = g.blur(y, &k, Padding::Valid)?;
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let sxx = g.blur(xx, &k, Padding::Valid)?;
    let syy = g.blur(yy, &k, Padding::Valid)?;
    let sxy = g.blur(xy, &k, Padding::Valid)?;
    let mx2 = g.mul(mx, mx);
    let my2 = g.mul(my, my);
    let mxy = g.mul(mx, my);
    let var_x = g.sub(sxx, mx2);
    let var_y = g.sub(syy, my2);
    let cov = g.sub(sxy, mxy);

    let l_num = g.mul_scalar(mxy, T::lit(2.0));
    let l_num = g.add_scalar(l_num, c1);
    let cs_num = g.mul_scalar(cov, T::lit(2.0));
    let cs_num = g.add_scalar(cs_num, c2);
    let l_den = g.add(mx2, my2);
    let l_den = g.add_scalar(l_den, c1);
    let cs_den = g.add(var_x, var_y);
    let cs_den = g.add_scalar(cs_den, c2);
    let num = g.mul(l_num, cs_num);
    let den = g.mul(l_den, cs_den);
    let map = g.div(num, den);
    Ok(g.mean(map))
}

/// `β·L1(pred, gt) + (1 − β)·(1 − SSIM(pred, gt))`.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, beta: f64) -> Result<Var> {
    if g.value(pred).shape() != g.value(gt).shape() {
        return Err(Error::Input(format!(
            "prediction {:?} and target {:?} differ in shape",
            g.value(pred).shape(),
            g.value(gt).shape()
        )));
    }
    let l1 = g.l1(pred, gt);
    let s = ssim_on_graph(g, pred, gt)?;
    let one_minus = g.mul_scalar(s, T::lit(-1.0));
    let one_minus = g.add_scalar(one_minus, T::one());
    let a = g.mul_scalar(l1, T::lit(beta));
    let b = g.mul_scalar(one_minus, T::lit(1.0 - beta));
    Ok(g.add(a, b))
}

fn check_pair<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Input(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

/// `‖S − T‖₁` at the RGB output.
pub fn kd_final<T: Real>(g: &mut Graph<T>, s: Var, t: Var) -> Result<Var> {
    check_pair(g, s, t, "kd_final")?;
    Ok(g.l1(s, t))
}

/// Gaussian low band (reflect padding, normalized kernel) and the residual high band.
pub fn freq_split<T: Real>(g: &mut Graph<T>, x: Var, sigma: f64, radius: usize) -> Result<(Var, Var)> {
    let k = gaussian_kernel::<T>(sigma, radius);
    let low = g.blur(x, &k, Padding::Reflect)?;
    let high = g.sub(x, low);
    Ok((low, high))
}

/// Tensor-level [`freq_split`] for `[C, H, W]` images.
pub fn freq_split_tensor<T: Real>(x: &Tensor<T>, sigma: f64, radius: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return config_err("freq_split needs an image");
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h <= radius || w <= radius {
        return config_err(format!("image {h}x{w} too small for blur radius {radius}"));
    }
    let planes = x.numel() / (h * w);
    let k = gaussian_kernel::<T>(sigma, radius);
    let (low, ..) = blur_2d(x.data(), planes, h, w, &k, Padding::Reflect);
    let low = Tensor::new(shape.to_vec(), low)?;
    let high = x.zip_map(&low, |a, b| a - b);
    Ok((low, high))
}

/// `‖S_low − T_low‖₁ + α‖S_high − T_high‖₁`.
pub fn kd_freq<T: Real>(g: &mut Graph<T>, s: Var, t: Var, alpha: f64, sigma: f64, radius: usize) -> Result<Var> {
    check_pair(g, s, t, "kd_freq")?;
    let (sl, sh) = freq_split(g, s, sigma, radius)?;
    let (tl, th) = freq_split(g, t, sigma, radius)?;
    let low = g.l1(sl, tl);
    let high = g.l1(sh, th);
    let high = g.mul_scalar(high, T::lit(alpha));
    Ok(g.add(low, high))
}

/// Per-pixel weights `(e / (max e + ε))^γ + floor` with `e = |S_high − T_high|`
/// averaged over channels. Returns an `[H, W]` map; it is plain data, not a graph node.
pub fn focal_weights<T: Real>(s_high: &Tensor<T>, t_high: &Tensor<T>, gamma: f64, floor: f64) -> Result<Tensor<T>> {
    if s_high.shape() != t_high.shape() {
        return Err(Error::Input("focal_weights: shape mismatch".into()));
    }
    let shape = s_high.shape();
    let (c, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Input(format!("focal_weights: bad shape {shape:?}"))),
    };
    let hw = h * w;
    let mut e = vec![0.0f64; hw];
    for ch in 0..c {
        for i in 0..hw {
            let j = ch * hw + i;
            e[i] += (s_high.data()[j] - t_high.data()[j]).to_f64_lossy().abs();
        }
    }
    let e: Vec<f64> = e.into_iter().map(|v| v / c as f64).collect();
    let max = e.iter().copied().fold(0.0, f64::max);
    let data = e
        .iter()
        .map(|&v| T::lit((v / (max + FOCAL_EPS)).powf(gamma) + floor))
        .collect();
    Tensor::new(vec![h, w], data)
}

fn broadcast_map<T: Real>(map: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let hw = map.numel();
    Tensor::from_fn(shape, |i| map.data()[i % hw])
}

/// `‖S_low − T_low‖₁ + α‖w ⊙ (S_high − T_high)‖₁` for a given `[H, W]` map `w`.
#[allow(clippy::too_many_arguments)]
pub fn kd_freq_weighted<T: Real>(
    g: &mut Graph<T>,
    s: Var,
    t: Var,
    alpha: f64,
    sigma: f64,
    radius: usize,
    weights: &Tensor<T>,
) -> Result<Var> {
    check_pair(g, s, t, "kd_freq_focal")?;
    let (sl, sh) = freq_split(g, s, sigma, radius)?;
    let (tl, th) = freq_split(g, t, sigma, radius)?;
    let low = g.l1(sl, tl);
    let shape = g.value(s).shape().to_vec();
    let hw: usize = shape[shape.len() - 2..].iter().product();
    if weights.numel() != hw {
        return config_err("focal weight map does not match the frame size");
    }
    let w = g.constant(broadcast_map(weights, &shape));
    let d = g.sub(sh, th);
    let wd = g.mul(w, d);
    let wd = g.abs(wd);
    let high = g.mean(wd);
    let high = g.mul_scalar(high, T::lit(alpha));
    Ok(g.add(low, high))
}

/// Frequency–focal distillation; the weight map is computed from the current
/// values and treated as a constant.
#[allow(clippy::too_many_arguments)]
pub fn kd_freq_focal<T: Real>(
    g: &mut Graph<T>,
    s: Var,
    t: Var,
    alpha: f64,
    gamma: f64,
    sigma: f64,
    radius: usize,
    floor: f64,
) -> Result<Var> {
    check_pair(g, s, t, "kd_freq_focal")?;
    let (_, sh) = freq_split_tensor(g.value(s), sigma, radius)?;
    let (_, th) = freq_split_tensor(g.value(t), sigma, radius)?;
    let w = focal_weights(&sh, &th, gamma, floor)?;
    kd_freq_weighted(g, s, t, alpha, sigma, radius, &w)
}

/// `‖(S_τ − S_{τ−Δ}) − (T_τ − T_{τ−Δ})‖₁`.
pub fn kd_temporal<T: Real>(g: &mut Graph<T>, s: Var, s_prev: Var, t: Var, t_prev: Var) -> Result<Var> {
    check_pair(g, s, s_prev, "kd_temporal")?;
    check_pair(g, t, t_prev, "kd_temporal")?;
    check_pair(g, s, t, "kd_temporal")?;
    let ds = g.sub(s, s_prev);
    let dt = g.sub(t, t_prev);
    Ok(g.l1(ds, dt))
}

/// Trainable 1×1 adapters mapping student stage widths to teacher widths.
/// Used only while training; never part of a decoder checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T: Real = f32> {
    /// `(0-based stage, weight [C_t, C_s, 1, 1], bias [C_t])`.
    pub stages: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdapterParams<T> {
    pub fn init(student: &VariantConfig, teacher: &VariantConfig, stages: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e25);
        let mut out = Vec::with_capacity(stages.len());
        for &i in stages {
            if i >= student.strides.len() || i >= teacher.strides.len() {
                return config_err(format!("feature stage {} missing in one of the variants", i + 1));
            }
            let (cs, ct) = (student.stage_widths[i], teacher.stage_widths[i]);
            let bound = 1.0 / (cs as f64).sqrt();
            let w = Tensor::from_fn(&[ct, cs, 1, 1], |_| T::lit(rng.gen_range(-bound..bound)));
            let b = Tensor::from_fn(&[ct], |_| T::lit(rng.gen_range(-bound..bound)));
            out.push((i, w, b));
        }
        Ok(Self { stages: out })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Vec<AdapterVars> {
        self.stages
            .iter()
            .map(|(stage, w, b)| AdapterVars {
                stage: *stage,
                weight: g.param(w.clone()),
                bias: g.param(b.clone()),
            })
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.stages.iter().map(|(_, w, b)| w.numel() + b.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub stage: usize,
    pub weight: Var,
    pub bias: Var,
}

/// Mean over stages of `‖adapter(student_feat) − teacher_feat‖₁`.
/// `student_feats[i]` and `teacher_feats[i]` belong to `adapters[i]`.
pub fn kd_feature<T: Real>(
    g: &mut Graph<T>,
    student_feats: &[Var],
    teacher_feats: &[Var],
    adapters: &[AdapterVars],
) -> Result<Var> {
    if student_feats.len() != adapters.len() || teacher_feats.len() != adapters.len() || adapters.is_empty() {
        return config_err("kd_feature: stage sets of student, teacher and adapters differ");
    }
    let mut total: Option<Var> = None;
    for ((&sf, &tf), a) in student_feats.iter().zip(teacher_feats).zip(adapters) {
        let ss = g.value(sf).shape().to_vec();
        let ts = g.value(tf).shape().to_vec();
        if ss.len() != 3 || ts.len() != 3 || ss[1..] != ts[1..] {
            return config_err(format!(
                "kd_feature: stage {} spatial sizes differ ({ss:?} vs {ts:?})",
                a.stage + 1
            ));
        }
        let mapped = g.conv2d(sf, a.weight, a.bias)?;
        let term = g.l1(mapped, tf);
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let total = total.expect("non-empty");
    Ok(g.mul_scalar(total, T::lit(1.0 / adapters.len() as f64)))
}

/// Teacher-side inputs for [`total_loss`]. Fields a mode does not use may be empty.
#[derive(Clone, Debug, Default)]
pub struct KdInputs {
    pub teacher_frame: Option<Var>,
    /// Student and teacher outputs at `τ − Δ`; `None` when `τ < Δ`, in which
    /// case the temporal pair is skipped.
    pub student_prev: Option<Var>,
    pub teacher_prev: Option<Var>,
    pub student_features: Vec<Var>,
    pub teacher_features: Vec<Var>,
    pub adapters: Vec<AdapterVars>,
}

/// Loss nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub recon: Var,
    pub kd: Option<Var>,
}

/// `L = recon + λ · L_KD(mode)`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    cfg: &KdConfig,
    inputs: &KdInputs,
) -> Result<LossTerms> {
    let recon = recon_loss(g, pred, gt, RECON_L1_WEIGHT)?;
    if cfg.mode == KdMode::None {
        return Ok(LossTerms { total: recon, recon, kd: None });
    }
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| Error::Usage(format!("{:?} distillation needs {what}", cfg.mode)))
    };
    let kd = match cfg.mode {
        KdMode::None => unreachable!(),
        KdMode::Final => kd_final(g, pred, need(inputs.teacher_frame, "a teacher frame")?)?,
        KdMode::Freq => kd_freq(
            g,
            pred,
            need(inputs.teacher_frame, "a teacher frame")?,
            cfg.alpha,
            cfg.sigma,
            cfg.kernel_radius,
        )?,
        KdMode::FreqFocal => kd_freq_focal(
            g,
            pred,
            need(inputs.teacher_frame, "a teacher frame")?,
            cfg.alpha,
            cfg.gamma,
            cfg.sigma,
            cfg.kernel_radius,
            cfg.w_floor,
        )?,
        KdMode::Temporal => {
            let t = need(inputs.teacher_frame, "a teacher frame")?;
            match (inputs.student_prev, inputs.teacher_prev) {
                (Some(sp), Some(tp)) => kd_temporal(g, pred, sp, t, tp)?,
                _ => g.constant(Tensor::scalar(T::zero())),
            }
        }
        KdMode::Feature => {
            if inputs.adapters.is_empty() {
                return Err(Error::Usage("feature distillation needs adapters".into()));
            }
            kd_feature(g, &inputs.student_features, &inputs.teacher_features, &inputs.adapters)?
        }
    };
    let weighted = g.mul_scalar(kd, T::lit(cfg.lambda));
    let total = g.add(recon, weighted);
    Ok(LossTerms { total, recon, kd: Some(kd) })
}
