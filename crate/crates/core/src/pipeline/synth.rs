//! Procedural test video: drifting color gradients, soft moving discs and a
//! travelling sinusoidal texture. Smooth in time, deterministic per seed.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

struct Disc {
    color: [f32; 3],
    radius: f32,
    start: (f32, f32),
    velocity: (f32, f32),
}

/// `n` frames of `[3, h, w]` in `[0, 1]`.
pub fn synthetic_video(h: usize, w: usize, n: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: Vec<[f32; 3]> = (0..2)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(0.15..0.85)))
        .collect();
    let discs: Vec<Disc> = (0..4)
        .map(|_| Disc {
            color: [0, 1, 2].map(|_| rng.gen_range(0.0..1.0)),
            radius: rng.gen_range(0.08..0.2),
            start: (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)),
            velocity: (rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)),
        })
        .collect();
    let freq = rng.gen_range(6.0..10.0f32);
    let angle = rng.gen_range(0.0..PI);
    let (fx, fy) = (angle.cos() * freq, angle.sin() * freq);

    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f32 / (n - 1) as f32 } else { 0.0 };
            let mut data = vec![0f32; 3 * h * w];
            for y in 0..h {
                let v = (y as f32 + 0.5) / h as f32;
                for x in 0..w {
                    let u = (x as f32 + 0.5) / w as f32;
                    let mix = 0.5 + 0.5 * (PI * (u + 0.6 * v + 0.3 * t)).sin();
                    let tex = 0.06 * (2.0 * PI * (fx * u + fy * v * h as f32 / w as f32 - 1.5 * t)).sin();
                    let mut px = [0, 1, 2].map(|c| bg[0][c] * (1.0 - mix) + bg[1][c] * mix + tex);
                    for d in &discs {
                        let cx = d.start.0 + d.velocity.0 * t;
                        let cy = d.start.1 + d.velocity.1 * t;
                        // aspect-corrected distance so discs stay round
                        let dx = (u - cx) * w as f32 / h as f32;
                        let dy = v - cy;
                        let r = (dx * dx + dy * dy).sqrt();
                        let a = (1.0 / (1.0 + ((r - d.radius) * 60.0).exp())) * 0.85;
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - a) + d.color[c] * a;
                        }
                    }
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = px[c].clamp(0.0, 1.0);
                    }
                }
            }
            Tensor::new(vec![3, h, w], data).expect("sized")
        })
        .collect()
}
