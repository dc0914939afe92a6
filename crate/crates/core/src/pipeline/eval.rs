use std::time::Instant;

use super::dataset::FrameDataset;
use crate::error::{config_err, Error, Result};
use crate::metrics::MetricReport;
use crate::model::{analyze, decode, ModelParams, VariantConfig};
use crate::tensor::Tensor;

/// Decodes one frame per index.
pub fn decode_all(params: &ModelParams<f32>, cfg: &VariantConfig, times: &[f64]) -> Result<Vec<Tensor<f32>>> {
    params.validate(cfg)?;
    times.iter().map(|&t| decode(params, cfg, t)).collect()
}

/// Decodes every frame of `data` and scores it. Read-only on `params`.
pub fn evaluate(params: &ModelParams<f32>, cfg: &VariantConfig, data: &FrameDataset) -> Result<MetricReport> {
    if cfg.output_hw() != data.resolution() {
        return config_err(format!(
            "variant {} decodes {:?} but frames are {:?}",
            cfg.name,
            cfg.output_hw(),
            data.resolution()
        ));
    }
    let recon = decode_all(params, cfg, data.times())?;
    MetricReport::compute(&recon, data.frames(), &analyze(cfg))
}

/// Mean per-frame PSNR only; cheaper than a full [`evaluate`].
pub fn mean_psnr(params: &ModelParams<f32>, cfg: &VariantConfig, data: &FrameDataset) -> Result<f64> {
    let recon = decode_all(params, cfg, data.times())?;
    let mut sum = 0.0;
    for (r, g) in recon.iter().zip(data.frames()) {
        sum += crate::metrics::psnr(r, g, 1.0)?;
    }
    Ok(sum / recon.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub label: String,
    pub n_frames: usize,
    pub warmup: usize,
    /// Frames per second of each timed run.
    pub run_fps: Vec<f64>,
    pub median_fps: f64,
}

impl BenchReport {
    pub fn ms_per_frame(&self) -> f64 {
        1000.0 / self.median_fps
    }
}

/// Times `runs` passes of `n_frames` sequential calls to `decode_frame` after
/// `warmup` untimed calls, and reports the median throughput.
pub fn benchmark_with(
    label: &str,
    n_frames: usize,
    warmup: usize,
    runs: usize,
    mut decode_frame: impl FnMut(f64) -> Result<()>,
) -> Result<BenchReport> {
    if warmup == 0 {
        return Err(Error::Usage("benchmark needs at least one warmup decode".into()));
    }
    if n_frames == 0 || runs == 0 {
        return Err(Error::Usage("benchmark needs at least one frame and one run".into()));
    }
    let t_of = |i: usize| if n_frames > 1 { i as f64 / (n_frames - 1) as f64 } else { 0.0 };
    for i in 0..warmup {
        decode_frame(t_of(i % n_frames))?;
    }
    let mut run_fps = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        for i in 0..n_frames {
            decode_frame(t_of(i))?;
        }
        run_fps.push(n_frames as f64 / start.elapsed().as_secs_f64().max(1e-12));
    }
    let mut sorted = run_fps.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median_fps = if runs % 2 == 1 {
        sorted[runs / 2]
    } else {
        0.5 * (sorted[runs / 2 - 1] + sorted[runs / 2])
    };
    Ok(BenchReport {
        label: label.to_string(),
        n_frames,
        warmup,
        run_fps,
        median_fps,
    })
}

/// Decode throughput of a model at batch size one.
pub fn benchmark(params: &ModelParams<f32>, cfg: &VariantConfig, n_frames: usize, warmup: usize, runs: usize) -> Result<BenchReport> {
    params.validate(cfg)?;
    benchmark_with(&cfg.name, n_frames, warmup, runs, |t| decode(params, cfg, t).map(drop))
}

/// Harness overhead: a stub "decoder" with no parameters that only allocates
/// an output frame of the variant's resolution.
pub fn benchmark_stub(cfg: &VariantConfig, n_frames: usize, warmup: usize, runs: usize) -> Result<BenchReport> {
    let (h, w) = cfg.output_hw();
    benchmark_with("stub", n_frames, warmup, runs, |_| {
        std::hint::black_box(Tensor::<f32>::zeros(&[3, h, w]));
        Ok(())
    })
}

/// Plain-text comparison of several benchmark reports.
pub fn bench_table(reports: &[BenchReport]) -> String {
    let mut s = format!("{:<12} {:>8} {:>12} {:>12}\n", "model", "frames", "median FPS", "ms/frame");
    for r in reports {
        s += &format!("{:<12} {:>8} {:>12.3} {:>12.3}\n", r.label, r.n_frames, r.median_fps, r.ms_per_frame());
    }
    s
}
