use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::dataset::FrameDataset;
use super::optim::{cosine_lr, Adam};
use crate::distill::{total_loss, AdapterParams, KdConfig, KdInputs, KdMode};
use crate::error::{config_err, Error, Result};
use crate::model::{decode, decode_on_graph, BoundParams, ModelParams, VariantConfig};
use crate::quant::{bind_fake_quant, QuantPolicy};
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_LR: f64 = 5e-4;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Learning rate reached at the last step of the cosine schedule.
    pub lr_floor: f64,
    /// Frames per optimizer step; gradients are averaged.
    pub batch_size: usize,
    /// Seeds the frame order (and adapters).
    pub seed: u64,
    pub kd: KdConfig,
    /// Fake-quantize weights during training (QAT).
    pub quant: Option<QuantPolicy>,
    /// Save a checkpoint every this many steps into `out_dir` (0 disables).
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 0,
            lr: DEFAULT_LR,
            lr_floor: 0.0,
            batch_size: 1,
            seed: 0,
            kd: KdConfig::default(),
            quant: None,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

/// A frozen model providing distillation targets.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub cfg: &'a VariantConfig,
    pub params: &'a ModelParams<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub kd: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ModelParams<f32>,
    /// Present for feature distillation; training-only.
    pub adapters: Option<AdapterParams<f32>>,
    pub log: Vec<StepLog>,
}

impl TrainResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|l| l.total)
    }
}

/// Reconstruction-only training.
pub fn train(cfg: &VariantConfig, init: ModelParams<f32>, data: &FrameDataset, opts: &TrainOptions) -> Result<TrainResult> {
    if opts.kd.mode != KdMode::None {
        return Err(Error::Usage("distillation modes need a teacher; use distill".into()));
    }
    run(cfg, init, data, opts, None)
}

/// Training against `recon + λ·L_KD` with a frozen teacher.
pub fn distill(
    cfg: &VariantConfig,
    init: ModelParams<f32>,
    data: &FrameDataset,
    opts: &TrainOptions,
    teacher: Teacher<'_>,
) -> Result<TrainResult> {
    run(cfg, init, data, opts, Some(teacher))
}

/// Fine-tunes full-precision weights with fake quantization in the forward pass.
pub fn qat_finetune(
    cfg: &VariantConfig,
    params: ModelParams<f32>,
    data: &FrameDataset,
    policy: &QuantPolicy,
    opts: &TrainOptions,
    teacher: Option<Teacher<'_>>,
) -> Result<TrainResult> {
    let opts = TrainOptions {
        quant: Some(*policy),
        ..opts.clone()
    };
    run(cfg, params, data, &opts, teacher)
}

fn run(
    cfg: &VariantConfig,
    init: ModelParams<f32>,
    data: &FrameDataset,
    opts: &TrainOptions,
    teacher: Option<Teacher<'_>>,
) -> Result<TrainResult> {
    cfg.validate()?;
    init.validate(cfg)?;
    opts.kd.validate()?;
    if let Some(q) = &opts.quant {
        q.validate()?;
    }
    if opts.batch_size == 0 {
        return config_err("batch size must be at least 1");
    }
    let (h, w) = cfg.output_hw();
    if data.resolution() != (h, w) {
        return config_err(format!(
            "variant {} decodes {h}x{w} but frames are {}x{}",
            cfg.name,
            data.resolution().0,
            data.resolution().1
        ));
    }
    let kd = &opts.kd;
    let teacher = match (kd.uses_teacher(), teacher) {
        (true, None) => return Err(Error::Usage(format!("{:?} distillation needs a teacher", kd.mode))),
        (true, Some(t)) => {
            t.params.validate(t.cfg)?;
            if t.cfg.output_hw() != (h, w) {
                return config_err(format!(
                    "teacher {} decodes {:?}, student {} decodes {:?}",
                    t.cfg.name,
                    t.cfg.output_hw(),
                    cfg.name,
                    (h, w)
                ));
            }
            Some(t)
        }
        (false, _) => None,
    };

    // The teacher is frozen, so its frames are decoded once up front.
    let teacher_frames: Vec<Tensor<f32>> = match (teacher, kd.mode) {
        (Some(t), KdMode::Final | KdMode::Freq | KdMode::FreqFocal | KdMode::Temporal) => data
            .times()
            .iter()
            .map(|&tau| decode(t.params, t.cfg, tau))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let mut adapters = match (teacher, kd.mode) {
        (Some(t), KdMode::Feature) => {
            let stages = kd.resolved_stages(cfg, t.cfg);
            if stages.is_empty() {
                return config_err("no feature stages shared by student and teacher");
            }
            Some(AdapterParams::<f32>::init(cfg, t.cfg, &stages, opts.seed)?)
        }
        _ => None,
    };

    let mut params = init;
    let mut opt = Adam::new(params.tensors());
    let mut adapter_opt = adapters
        .as_ref()
        .map(|a| Adam::new(a.stages.iter().flat_map(|(_, w, b)| [w, b])));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut epoch = 0;
    let mut log = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let lr = cosine_lr(opts.lr, opts.lr_floor, step, opts.steps);
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
        let mut adapter_grads: Vec<Option<Tensor<f32>>> = vec![None; adapters.as_ref().map_or(0, |a| 2 * a.stages.len())];
        let (mut total, mut recon, mut kd_sum) = (0.0, 0.0, None::<f64>);
        let scale = 1.0 / opts.batch_size as f32;

        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            let idx = order[cursor];
            cursor += 1;

            let mut g = Graph::<f32>::new();
            let bound = match &opts.quant {
                Some(q) => bind_fake_quant(&mut g, &params, q)?,
                None => BoundParams::bind(&mut g, &params, true),
            };
            let out = decode_on_graph(&mut g, cfg, &bound, data.times()[idx])?;
            let gt = g.constant(data.frame(idx).clone());
            let mut inputs = KdInputs::default();
            if let Some(t) = teacher {
                match kd.mode {
                    KdMode::Feature => {
                        let adapter_vars = adapters.as_ref().expect("feature mode").bind(&mut g);
                        let mut tg = Graph::<f32>::new();
                        let tb = BoundParams::bind(&mut tg, t.params, false);
                        let tout = decode_on_graph(&mut tg, t.cfg, &tb, data.times()[idx])?;
                        for a in &adapter_vars {
                            inputs.student_features.push(out.stage_features[a.stage]);
                            let tf = tg.value(tout.stage_features[a.stage]).clone();
                            inputs.teacher_features.push(g.constant(tf));
                        }
                        inputs.adapters = adapter_vars;
                    }
                    KdMode::None => {}
                    _ => {
                        inputs.teacher_frame = Some(g.constant(teacher_frames[idx].clone()));
                        if kd.mode == KdMode::Temporal && idx >= kd.delta {
                            let prev = idx - kd.delta;
                            let sp = decode_on_graph(&mut g, cfg, &bound, data.times()[prev])?;
                            inputs.student_prev = Some(sp.frame);
                            inputs.teacher_prev = Some(g.constant(teacher_frames[prev].clone()));
                        }
                    }
                }
            }
            let terms = total_loss(&mut g, out.frame, gt, kd, &inputs)?;
            let loss = g.value(terms.total).item() as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            total += loss / opts.batch_size as f64;
            recon += g.value(terms.recon).item() as f64 / opts.batch_size as f64;
            if let Some(k) = terms.kd {
                *kd_sum.get_or_insert(0.0) += g.value(k).item() as f64 / opts.batch_size as f64;
            }
            let mut gr = g.backward(terms.total)?;
            for (slot, &leaf) in grads.iter_mut().zip(&bound.leaves) {
                accumulate(slot, gr.take(leaf), scale);
            }
            for (j, a) in inputs.adapters.iter().enumerate() {
                accumulate(&mut adapter_grads[2 * j], gr.take(a.weight), scale);
                accumulate(&mut adapter_grads[2 * j + 1], gr.take(a.bias), scale);
            }
        }

        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        opt.step(lr, params.iter_mut().map(|(_, t)| t).zip(grads.iter().map(|g| g.as_ref())));
        if let (Some(a), Some(aopt)) = (adapters.as_mut(), adapter_opt.as_mut()) {
            let tensors = a.stages.iter_mut().flat_map(|(_, w, b)| [w, b]);
            aopt.step(lr, tensors.zip(adapter_grads.iter().map(|g| g.as_ref())));
        }
        if step % 100 == 0 || step + 1 == opts.steps {
            log::info!("step {step}/{} lr {lr:.2e} loss {total:.5}", opts.steps);
        }
        log.push(StepLog {
            step,
            epoch,
            lr,
            total,
            recon,
            kd: kd_sum,
        });

        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 {
                Checkpoint::from_params(cfg, &params, step as u64 + 1, Some(total))?
                    .save(&dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_loss_csv(&dir.join("loss.csv"), &log)?;
    }
    Ok(TrainResult { params, adapters, log })
}

fn accumulate(slot: &mut Option<Tensor<f32>>, g: Option<Tensor<f32>>, scale: f32) {
    let Some(g) = g else { return };
    let g = if scale == 1.0 { g } else { g.map(|v| v * scale) };
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Columns: `step,epoch,lr,total,recon,kd` (`kd` empty when unused).
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "epoch", "lr", "total", "recon", "kd"]).expect("in-memory");
    for l in log {
        w.write_record([
            l.step.to_string(),
            l.epoch.to_string(),
            format!("{:e}", l.lr),
            l.total.to_string(),
            l.recon.to_string(),
            l.kd.map(|k| k.to_string()).unwrap_or_default(),
        ])
        .expect("in-memory");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn write_loss_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::synthetic_video;

    /// Two blocks, 45×80 output: cheap enough for unit tests.
    fn tiny() -> VariantConfig {
        let mut c = VariantConfig::named("T-desk").unwrap();
        c.name = "tiny".into();
        c.stem_hidden = 32;
        c.seed_channels = 8;
        c.stage_widths = vec![8, 8];
        c.strides = vec![5, 2];
        c.pe_levels = 16;
        c
    }

    fn data(cfg: &VariantConfig, n: usize) -> FrameDataset {
        let (h, w) = cfg.output_hw();
        FrameDataset::from_frames(synthetic_video(h, w, n, 3), "synthetic").unwrap()
    }

    fn opts(steps: usize) -> TrainOptions {
        TrainOptions {
            steps,
            lr: 2e-3,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = tiny();
        let init = ModelParams::init(&cfg, 1);
        let r = train(&cfg, init.clone(), &data(&cfg, 2), &opts(0)).unwrap();
        assert_eq!(r.params, init);
        assert!(r.log.is_empty());
    }

    #[test]
    fn reproducible_and_decreasing() {
        let cfg = tiny();
        let ds = data(&cfg, 3);
        let a = train(&cfg, ModelParams::init(&cfg, 1), &ds, &opts(30)).unwrap();
        let b = train(&cfg, ModelParams::init(&cfg, 1), &ds, &opts(30)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        let first: f64 = a.log[..3].iter().map(|l| l.total).sum();
        let last: f64 = a.log[27..].iter().map(|l| l.total).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_lambda_matches_plain_training() {
        let cfg = tiny();
        let ds = data(&cfg, 3);
        let teacher_cfg = tiny();
        let teacher = ModelParams::init(&teacher_cfg, 9);
        let base = train(&cfg, ModelParams::init(&cfg, 1), &ds, &opts(5)).unwrap();
        let mut o = opts(5);
        o.kd = KdConfig::with_mode(KdMode::Final);
        o.kd.lambda = 0.0;
        let t = Teacher { cfg: &teacher_cfg, params: &teacher };
        let kd = distill(&cfg, ModelParams::init(&cfg, 1), &ds, &o, t).unwrap();
        assert_eq!(base.params, kd.params);
        let totals = |r: &TrainResult| r.log.iter().map(|l| l.total).collect::<Vec<_>>();
        assert_eq!(totals(&base), totals(&kd));
    }

    #[test]
    fn teacher_untouched_and_modes_run() {
        let cfg = tiny();
        let ds = data(&cfg, 3);
        let mut tcfg = tiny();
        tcfg.stage_widths = vec![8, 12];
        let teacher = ModelParams::init(&tcfg, 9);
        let snapshot = teacher.clone();
        for mode in [KdMode::Final, KdMode::Freq, KdMode::FreqFocal, KdMode::Temporal, KdMode::Feature] {
            let mut o = opts(3);
            o.kd = KdConfig::with_mode(mode);
            let r = distill(&cfg, ModelParams::init(&cfg, 1), &ds, &o, Teacher { cfg: &tcfg, params: &teacher }).unwrap();
            assert!(r.log.iter().all(|l| l.kd.is_some()), "{mode:?}");
            assert_eq!(r.adapters.is_some(), mode == KdMode::Feature);
        }
        assert_eq!(teacher, snapshot);
    }

    #[test]
    fn missing_teacher_is_usage_error() {
        let cfg = tiny();
        let mut o = opts(1);
        o.kd = KdConfig::with_mode(KdMode::Final);
        assert!(matches!(train(&cfg, ModelParams::init(&cfg, 1), &data(&cfg, 2), &o), Err(Error::Usage(_))));
    }

    #[test]
    fn resolution_mismatch_is_config_error() {
        let cfg = tiny();
        let ds = FrameDataset::from_frames(synthetic_video(10, 10, 2, 1), "x").unwrap();
        assert!(matches!(train(&cfg, ModelParams::init(&cfg, 1), &ds, &opts(1)), Err(Error::Config(_))));
        let mut tcfg = tiny();
        tcfg.strides = vec![5];
        tcfg.stage_widths = vec![8];
        let tp = ModelParams::init(&tcfg, 1);
        let mut o = opts(1);
        o.kd = KdConfig::with_mode(KdMode::Final);
        let r = distill(&cfg, ModelParams::init(&cfg, 1), &data(&cfg, 2), &o, Teacher { cfg: &tcfg, params: &tp });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn divergence_names_step() {
        let cfg = tiny();
        let mut o = opts(3);
        o.lr = f64::INFINITY;
        let err = train(&cfg, ModelParams::init(&cfg, 1), &data(&cfg, 2), &o).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
    }

    #[test]
    fn qat_zero_steps_unchanged_and_step_moves_weights() {
        let cfg = tiny();
        let ds = data(&cfg, 2);
        let p = ModelParams::init(&cfg, 4);
        let policy = QuantPolicy::new(4);
        let r0 = qat_finetune(&cfg, p.clone(), &ds, &policy, &opts(0), None).unwrap();
        assert_eq!(r0.params, p);
        let r1 = qat_finetune(&cfg, p.clone(), &ds, &policy, &opts(1), None).unwrap();
        assert_ne!(r1.params.get("blocks.0.weight"), p.get("blocks.0.weight"));
    }

    #[test]
    fn batches_and_csv() {
        let cfg = tiny();
        let mut o = opts(2);
        o.batch_size = 2;
        let dir = tempfile::tempdir().unwrap();
        o.out_dir = Some(dir.path().to_path_buf());
        o.checkpoint_every = 1;
        let r = train(&cfg, ModelParams::init(&cfg, 1), &data(&cfg, 3), &o).unwrap();
        assert_eq!(r.log.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("step_000002.ckpt").is_file());
    }
}
