//! Analytic decode cost: multiplications per convolution stage and the
//! derived GFLOPs (`2 · Mult / 10⁹`). Stem linear layers and pixel shuffles
//! are not counted.

use std::fmt::Write as _;

use serde::Serialize;

use super::config::VariantConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub stage: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    /// `(H·W) · C_out · (k² · C_in)`.
    pub mults: u64,
    pub gflops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub variant: String,
    pub stages: Vec<StageCost>,
    pub total_mults: u64,
    pub total_gflops: f64,
    pub params: usize,
}

fn gflops(mults: u64) -> f64 {
    2.0 * mults as f64 / 1e9
}

/// Per-stage multiplication counts for `cfg` at its configured scale.
pub fn analyze(cfg: &VariantConfig) -> ComplexityReport {
    let mut stages = Vec::with_capacity(cfg.strides.len() + 1);
    for (i, &s) in cfg.strides.iter().enumerate() {
        let (c_in, (h, w)) = cfg.block_input(i);
        let c_out = cfg.block_conv_out(i);
        let k = cfg.kernel;
        let mults = (h * w) as u64 * c_out as u64 * (k * k * c_in) as u64;
        stages.push(StageCost {
            stage: format!("Block{} (s={s})", i + 1),
            grid_h: h,
            grid_w: w,
            c_out,
            c_in,
            kernel: k,
            mults,
            gflops: gflops(mults),
        });
    }
    let (h, w) = cfg.output_hw();
    let head_mults = (h * w) as u64 * 3 * cfg.last_width() as u64;
    stages.push(StageCost {
        stage: "RGB head (1x1)".into(),
        grid_h: h,
        grid_w: w,
        c_out: 3,
        c_in: cfg.last_width(),
        kernel: 1,
        mults: head_mults,
        gflops: gflops(head_mults),
    });
    let total_mults = stages.iter().map(|s| s.mults).sum();
    ComplexityReport {
        variant: cfg.name.clone(),
        stages,
        total_mults,
        total_gflops: gflops(total_mults),
        params: cfg.param_count(),
    }
}

impl ComplexityReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant {}  ({} parameters)", self.variant, self.params);
        let _ = writeln!(
            s,
            "{:<16} {:>11} {:>36} {:>10}",
            "stage", "conv grid", "arithmetic", "GFLOPs"
        );
        for st in &self.stages {
            let arith = format!(
                "{}·{}·({}·{})",
                st.grid_h * st.grid_w,
                st.c_out,
                st.kernel * st.kernel,
                st.c_in
            );
            let _ = writeln!(
                s,
                "{:<16} {:>11} {:>36} {:>10.4}",
                st.stage,
                format!("{}x{}", st.grid_h, st.grid_w),
                arith,
                st.gflops
            );
        }
        let _ = writeln!(s, "{:<16} {:>11} {:>36} {:>10.4}", "total", "", "", self.total_gflops);
        s
    }

    /// CSV with one row per stage plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant", "stage", "grid_h", "grid_w", "c_out", "c_in", "kernel", "mults", "gflops",
        ])
        .expect("in-memory write");
        for st in &self.stages {
            w.write_record([
                self.variant.clone(),
                st.stage.clone(),
                st.grid_h.to_string(),
                st.grid_w.to_string(),
                st.c_out.to_string(),
                st.c_in.to_string(),
                st.kernel.to_string(),
                st.mults.to_string(),
                format!("{:.4}", st.gflops),
            ])
            .expect("in-memory write");
        }
        w.write_record([
            self.variant.clone(),
            "total".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.total_mults.to_string(),
            format!("{:.4}", self.total_gflops),
        ])
        .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nerv_t_block1_mults() {
        let r = analyze(&VariantConfig::named("T").unwrap());
        assert_eq!(r.stages[0].mults, 144 * 400 * (9 * 16));
        assert_eq!(r.stages[0].mults, 8_294_400);
    }

    #[test]
    fn total_is_sum_of_stage_mults() {
        for name in ["T", "T+", "S", "T-desk"] {
            let r = analyze(&VariantConfig::named(name).unwrap());
            assert_eq!(r.total_mults, r.stages.iter().map(|s| s.mults).sum::<u64>());
            for st in &r.stages {
                assert_eq!(st.gflops, 2.0 * st.mults as f64 / 1e9);
            }
        }
    }

    #[test]
    fn csv_has_stage_and_total_rows() {
        let r = analyze(&VariantConfig::named("T").unwrap());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6 + 1);
        assert!(csv.lines().last().unwrap().ends_with("22.6216"));
    }
}
