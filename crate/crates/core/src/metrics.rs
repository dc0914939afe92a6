//! Reconstruction and temporal-stability metrics.
//!
//! Frames are `[C, H, W]` tensors with values nominally in `[0, 1]`. All
//! accumulation happens in `f64`.

use std::fmt::Write as _;

use crate::error::{input_err, Result};
use crate::model::ComplexityReport;
use crate::tensor::kernels::{blur_2d, gaussian_kernel, Padding};
use crate::tensor::{Real, Tensor};

/// Reported in place of `+∞` when two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn same_shape<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return input_err(format!("shape mismatch: {:?} vs {:?}", x.shape(), y.shape()));
    }
    Ok(())
}

fn planes_hw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => input_err(format!("expected [C,H,W] image, got {shape:?}")),
    }
}

pub fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y)?;
    let n = x.numel().max(1) as f64;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(s / n)
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, peak))
}

/// Mean SSIM and mean contrast-structure term over all planes.
fn ssim_cs(x: &[f64], y: &[f64], planes: usize, h: usize, w: usize, peak: f64) -> (f64, f64) {
    let k = gaussian_kernel::<f64>(SSIM_SIGMA, SSIM_WINDOW / 2);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, ..) = blur_2d(x, planes, h, w, &k, Padding::Valid);
    let (my, ..) = blur_2d(y, planes, h, w, &k, Padding::Valid);
    let (sxx, ..) = blur_2d(&xx, planes, h, w, &k, Padding::Valid);
    let (syy, ..) = blur_2d(&yy, planes, h, w, &k, Padding::Valid);
    let (sxy, ..) = blur_2d(&xy, planes, h, w, &k, Padding::Valid);
    let n = mx.len() as f64;
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let var_x = sxx[i] - a * a;
        let var_y = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        let cs = (2.0 * cov + c2) / (var_x + var_y + c2);
        let l = (2.0 * a * b + c1) / (a * a + b * b + c1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(x, y)?;
    let (c, h, w) = planes_hw(x.shape())?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return input_err(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"));
    }
    Ok(ssim_cs(&to_f64(x), &to_f64(y), c, h, w, peak).0)
}

fn avg_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out.push(0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]));
            }
        }
    }
    (out, oh, ow)
}

/// Number of dyadic scales for which the SSIM window still fits.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while n < MS_SSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Multi-scale SSIM (peak 1). Images too small for five scales use fewer,
/// with the scale weights renormalized to sum to one.
pub fn ms_ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y)?;
    let (c, mut h, mut w) = planes_hw(x.shape())?;
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return input_err(format!("image {h}x{w} too small for MS-SSIM"));
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut a, mut b) = (to_f64(x), to_f64(y));
    let mut value = 1.0;
    for (i, &wt) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (s, cs) = ssim_cs(&a, &b, c, h, w, 1.0);
        let term = if i + 1 == scales { s } else { cs };
        value *= term.max(0.0).powf(wt / total);
        if i + 1 < scales {
            let (pa, nh, nw) = avg_pool2(&a, c, h, w);
            let (pb, ..) = avg_pool2(&b, c, h, w);
            a = pa;
            b = pb;
            h = nh;
            w = nw;
        }
    }
    Ok(value)
}

fn frame_diffs<T: Real>(seq: &[Tensor<T>]) -> Vec<Tensor<f64>> {
    seq.windows(2)
        .map(|p| {
            let a: Tensor<f64> = p[1].cast();
            a.zip_map(&p[0].cast(), |x, y| x - y)
        })
        .collect()
}

/// `(T-PSNR, tSSIM)` between the temporal difference sequences
/// `I_t − I_{t−1}` of a reconstruction and its ground truth.
///
/// T-PSNR uses peak 1 over all stacked differences. tSSIM averages SSIM over
/// difference pairs after the affine remap `(d + 1) / 2` into `[0, 1]`.
pub fn temporal_metrics<T: Real>(recon: &[Tensor<T>], gt: &[Tensor<T>]) -> Result<(f64, f64)> {
    if recon.len() != gt.len() {
        return input_err(format!(
            "sequence lengths differ: {} vs {}",
            recon.len(),
            gt.len()
        ));
    }
    if recon.len() < 2 {
        return input_err("temporal metrics need at least two frames");
    }
    for (r, g) in recon.iter().zip(gt) {
        same_shape(r, g)?;
    }
    let dr = frame_diffs(recon);
    let dg = frame_diffs(gt);
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut ssim_total = 0.0;
    for (a, b) in dr.iter().zip(&dg) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            sq += (x - y) * (x - y);
        }
        count += a.numel();
        let ra = a.map(|v| (v + 1.0) / 2.0);
        let rb = b.map(|v| (v + 1.0) / 2.0);
        ssim_total += ssim(&ra, &rb, 1.0)?;
    }
    let tpsnr = psnr_from_mse(sq / count.max(1) as f64, 1.0);
    Ok((tpsnr, ssim_total / dr.len() as f64))
}

/// Reconstruction quality per unit of decode compute.
pub fn efficiency(mean_psnr: f64, gflops: f64) -> Result<f64> {
    if !(gflops > 0.0) {
        return input_err("GFLOPs must be positive");
    }
    Ok(mean_psnr / gflops)
}

/// Summary of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frame_psnr: Vec<f64>,
    pub frame_ms_ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ms_ssim: f64,
    /// `None` for single-frame sequences.
    pub t_psnr: Option<f64>,
    pub t_ssim: Option<f64>,
    pub gflops: f64,
    pub psnr_per_gflop: f64,
}

impl MetricReport {
    pub fn compute<T: Real>(
        recon: &[Tensor<T>],
        gt: &[Tensor<T>],
        complexity: &ComplexityReport,
    ) -> Result<Self> {
        if recon.len() != gt.len() || recon.is_empty() {
            return input_err("need equal, non-empty reconstruction and ground-truth sequences");
        }
        let frame_psnr = recon
            .iter()
            .zip(gt)
            .map(|(r, g)| psnr(r, g, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let frame_ms_ssim = recon
            .iter()
            .zip(gt)
            .map(|(r, g)| ms_ssim(r, g))
            .collect::<Result<Vec<_>>>()?;
        let n = recon.len() as f64;
        let mean_psnr = frame_psnr.iter().sum::<f64>() / n;
        let mean_ms_ssim = frame_ms_ssim.iter().sum::<f64>() / n;
        let (t_psnr, t_ssim) = if recon.len() >= 2 {
            let (a, b) = temporal_metrics(recon, gt)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        Ok(Self {
            frame_psnr,
            frame_ms_ssim,
            mean_psnr,
            mean_ms_ssim,
            t_psnr,
            t_ssim,
            gflops: complexity.total_gflops,
            psnr_per_gflop: efficiency(mean_psnr, complexity.total_gflops)?,
        })
    }

    /// One row per frame, then a `mean` summary row. PSNR values equal to
    /// 100 are the zero-error sentinel.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["frame", "psnr_db", "ms_ssim", "t_psnr_db", "t_ssim", "gflops", "psnr_per_gflop"])
            .expect("in-memory write");
        for (i, (p, m)) in self.frame_psnr.iter().zip(&self.frame_ms_ssim).enumerate() {
            w.write_record([i.to_string(), format!("{p:.6}"), format!("{m:.6}"), String::new(), String::new(), String::new(), String::new()])
                .expect("in-memory write");
        }
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        w.write_record([
            "mean".to_string(),
            format!("{:.6}", self.mean_psnr),
            format!("{:.6}", self.mean_ms_ssim),
            opt(self.t_psnr),
            opt(self.t_ssim),
            format!("{:.4}", self.gflops),
            format!("{:.6}", self.psnr_per_gflop),
        ])
        .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames        {}", self.frame_psnr.len());
        let _ = writeln!(s, "PSNR (dB)     {:.3}", self.mean_psnr);
        let _ = writeln!(s, "MS-SSIM       {:.4}", self.mean_ms_ssim);
        if let (Some(tp), Some(ts)) = (self.t_psnr, self.t_ssim) {
            let _ = writeln!(s, "T-PSNR (dB)   {tp:.3}");
            let _ = writeln!(s, "tSSIM         {ts:.4}");
        }
        let _ = writeln!(s, "GFLOPs        {:.4}", self.gflops);
        let _ = writeln!(s, "PSNR/GFLOP    {:.3}", self.psnr_per_gflop);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, phase: f64) -> Tensor<f32> {
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            let v = 0.5
                + 0.3 * ((x as f64 * 0.3 + phase).sin() * (y as f64 * 0.21 + c as f64).cos())
                + 0.1 * ((x * 7 + y * 13) % 5) as f64 / 5.0;
            v.clamp(0.0, 1.0) as f32
        })
    }

    #[test]
    fn psnr_closed_forms() {
        let x = Tensor::<f64>::zeros(&[3, 4, 4]);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let y = Tensor::<f64>::full(&[3, 4, 4], 0.1);
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let z = Tensor::<f64>::full(&[3, 4, 4], 0.5);
        assert!((psnr(&x, &z, 1.0).unwrap() - 6.020_599_913_279_624).abs() < 1e-9);
    }

    #[test]
    fn psnr_symmetric_and_shape_checked() {
        let a = textured(12, 12, 0.0);
        let b = textured(12, 12, 0.4);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let c = Tensor::<f32>::zeros(&[3, 12, 13]);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn ssim_of_offset_constants_matches_closed_form() {
        // constant images: variances vanish, so SSIM = (2ab + C1) / (a² + b² + C1)
        let (a, b) = (0.4, 0.55);
        let x = Tensor::<f64>::full(&[1, 16, 16], a);
        let y = Tensor::<f64>::full(&[1, 16, 16], b);
        let c1 = (0.01f64).powi(2);
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((ssim(&x, &y, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_identity_and_inversion() {
        let x = textured(48, 64, 0.0);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let inv = x.map(|v| 1.0 - v);
        let near = textured(48, 64, 0.05);
        let s_inv = ms_ssim(&x, &inv).unwrap();
        let s_near = ms_ssim(&x, &near).unwrap();
        assert!(s_inv < s_near, "{s_inv} vs {s_near}");
        assert!((0.0..=1.0).contains(&s_inv));
    }

    #[test]
    fn ms_ssim_scale_count() {
        assert_eq!(ms_ssim_scales(176, 176), 5);
        assert_eq!(ms_ssim_scales(175, 400), 4);
        assert_eq!(ms_ssim_scales(10, 400), 0);
        let tiny = Tensor::<f32>::zeros(&[3, 8, 8]);
        assert!(ms_ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn temporal_capped_on_perfect_and_offset() {
        let seq: Vec<_> = (0..3).map(|i| textured(16, 20, i as f64 * 0.3)).collect();
        let (tp, ts) = temporal_metrics(&seq, &seq).unwrap();
        assert_eq!(tp, PSNR_CAP_DB);
        assert!((ts - 1.0).abs() < 1e-12);
        let shifted: Vec<_> = seq.iter().map(|f| f.map(|v| v + 0.125)).collect();
        let (tp2, ts2) = temporal_metrics(&shifted, &seq).unwrap();
        assert_eq!(tp2, PSNR_CAP_DB);
        assert!((ts2 - 1.0).abs() < 1e-9);
        assert!(temporal_metrics(&seq[..1], &seq[..1]).is_err());
    }

    #[test]
    fn temporal_hand_case() {
        // gt diff is 0.2 everywhere, recon diff is 0.05: residual 0.15
        let gt = vec![Tensor::<f64>::full(&[3, 11, 11], 0.3), Tensor::full(&[3, 11, 11], 0.5)];
        let rc = vec![Tensor::<f64>::full(&[3, 11, 11], 0.3), Tensor::full(&[3, 11, 11], 0.35)];
        let (tp, ts) = temporal_metrics(&rc, &gt).unwrap();
        assert!((tp - 10.0 * (1.0 / 0.0225f64).log10()).abs() < 1e-9);
        let (a, b) = (0.525, 0.6);
        let c1 = 1e-4;
        assert!((ts - (2.0 * a * b + c1) / (a * a + b * b + c1)).abs() < 1e-9);
    }

    #[test]
    fn efficiency_division() {
        assert!((efficiency(27.84, 22.62).unwrap() - 1.2308).abs() < 1e-4);
        assert_eq!(efficiency(0.0, 22.62).unwrap(), 0.0);
        assert!(efficiency(10.0, 0.0).is_err());
    }
}
