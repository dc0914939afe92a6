//! Central finite-difference checks of every differentiable op and loss, in f64.
//! Each group returns `(check name, worst relative error, tolerance)`.

use nerv_core::distill::{
    freq_split_tensor, focal_weights, kd_feature, kd_final, kd_freq, kd_freq_weighted, kd_temporal, recon_loss,
    ssim_on_graph, total_loss, AdapterVars, KdConfig, KdInputs, KdMode, RECON_L1_WEIGHT,
};
use nerv_core::model::{decode_on_graph, BoundParams, ModelParams, VariantConfig};
use nerv_core::tensor::kernels::gaussian_kernel;
use nerv_core::tensor::Padding;
use nerv_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Compares reverse-mode gradients of `f` with central differences on up to
/// `samples` entries per input. Returns the worst relative error.
fn gradcheck(inputs: &[Tensor<f64>], samples: usize, h: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let idx: Vec<usize> = if t.numel() <= samples {
            (0..t.numel()).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..t.numel())).collect()
        };
        for j in idx {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Random projection turning any tensor output into a scalar with O(1) gradients.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let r = rand_tensor(g.value(y).shape(), -1.0, 1.0, seed);
    let r = g.constant(r);
    let p = g.mul(y, r);
    g.sum(p)
}

pub type Outcome = (String, f64, f64);

fn check(out: &mut Vec<Outcome>, name: &str, worst: f64) {
    out.push((name.to_string(), worst, OP_TOL));
}

pub fn elementwise_ops() -> Vec<Outcome> {
    let mut out = Vec::new();
    let a = rand_tensor(&[2, 3, 4], -2.0, 2.0, 1);
    let b = rand_tensor(&[2, 3, 4], 0.5, 2.0, 2);
    type Op = fn(&mut Graph<f64>, Var, Var) -> Var;
    let cases: [(&str, Op); 9] = [
        ("add", |g, x, y| g.add(x, y)),
        ("sub", |g, x, y| g.sub(x, y)),
        ("mul", |g, x, y| g.mul(x, y)),
        ("div", |g, x, y| g.div(x, y)),
        ("add_scalar", |g, x, _| g.add_scalar(x, 0.3)),
        ("mul_scalar", |g, x, _| g.mul_scalar(x, -1.7)),
        ("abs", |g, x, _| g.abs(x)),
        ("gelu", |g, x, _| g.gelu(x)),
        ("sigmoid", |g, x, _| g.sigmoid(x)),
    ];
    for (name, op) in cases {
        let w = gradcheck(&[a.clone(), b.clone()], 100, 1e-6, |g, v| {
            let y = op(g, v[0], v[1]);
            project(g, y, 3)
        });
        check(&mut out, name, w);
    }
    out
}

pub fn reductions_and_reshape() -> Vec<Outcome> {
    let mut out = Vec::new();
    let a = rand_tensor(&[3, 5], -1.0, 1.0, 4);
    check(&mut out, "sum", gradcheck(std::slice::from_ref(&a), 100, 1e-6, |g, v| g.sum(v[0])));
    check(&mut out, 
        "mean",
        gradcheck(std::slice::from_ref(&a), 100, 1e-6, |g, v| {
            let m = g.mul(v[0], v[0]);
            g.mean(m)
        }),
    );
    check(&mut out, 
        "reshape",
        gradcheck(&[a], 100, 1e-6, |g, v| {
            let r = g.reshape(v[0], &[5, 3]).unwrap();
            project(g, r, 5)
        }),
    );
    out
}

pub fn linear_single_and_batched() -> Vec<Outcome> {
    let mut out = Vec::new();
    let w = rand_tensor(&[4, 6], -1.0, 1.0, 6);
    let b = rand_tensor(&[4], -1.0, 1.0, 7);
    for xs in [vec![6], vec![3, 6]] {
        let x = rand_tensor(&xs, -1.0, 1.0, 8);
        let worst = gradcheck(&[x, w.clone(), b.clone()], 100, 1e-6, |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            project(g, y, 9)
        });
        check(&mut out, "linear", worst);
    }
    out
}

pub fn conv2d_k3_k1_and_batched() -> Vec<Outcome> {
    let mut out = Vec::new();
    for (xs, k) in [(vec![3, 5, 6], 3), (vec![3, 5, 6], 1), (vec![2, 3, 4, 5], 3)] {
        let c_in = xs[xs.len() - 3];
        let x = rand_tensor(&xs, -1.0, 1.0, 10);
        let w = rand_tensor(&[4, c_in, k, k], -1.0, 1.0, 11);
        let b = rand_tensor(&[4], -1.0, 1.0, 12);
        let worst = gradcheck(&[x, w, b], 60, 1e-6, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2]).unwrap();
            project(g, y, 13)
        });
        check(&mut out, "conv2d", worst);
    }
    out
}

pub fn pixel_shuffle_grad() -> Vec<Outcome> {
    let mut out = Vec::new();
    let x = rand_tensor(&[8, 2, 3], -1.0, 1.0, 14);
    check(&mut out, 
        "pixel_shuffle",
        gradcheck(&[x], 100, 1e-6, |g, v| {
            let y = g.pixel_shuffle(v[0], 2).unwrap();
            project(g, y, 15)
        }),
    );
    out
}

pub fn blur_both_axes_and_paddings() -> Vec<Outcome> {
    let mut out = Vec::new();
    let k = gaussian_kernel::<f64>(1.0, 3);
    for padding in [Padding::Reflect, Padding::Valid] {
        for along_width in [true, false] {
            let x = rand_tensor(&[2, 9, 10], -1.0, 1.0, 16);
            let worst = gradcheck(&[x], 80, 1e-6, |g, v| {
                let y = g.blur_1d(v[0], &k, along_width, padding).unwrap();
                project(g, y, 17)
            });
            check(&mut out, "blur_1d", worst);
        }
    }
    out
}

fn frames(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    (rand_tensor(&[3, 12, 13], 0.05, 0.95, seed), rand_tensor(&[3, 12, 13], 0.05, 0.95, seed + 100))
}

pub fn ssim_and_recon_loss() -> Vec<Outcome> {
    let mut out = Vec::new();
    let (s, t) = frames(20);
    // SSIM is smooth, so a wider step keeps round-off below the tolerance on tiny gradients.
    check(&mut out, "ssim", gradcheck(&[s.clone(), t.clone()], 60, 1e-4, |g, v| ssim_on_graph(g, v[0], v[1]).unwrap()));
    check(&mut out, 
        "recon_loss",
        gradcheck(&[s], 80, 1e-6, |g, v| {
            let gt = g.constant(t.clone());
            recon_loss(g, v[0], gt, RECON_L1_WEIGHT).unwrap()
        }),
    );
    out
}

pub fn kd_output_losses() -> Vec<Outcome> {
    let mut out = Vec::new();
    let (s, t) = frames(30);
    check(&mut out, "kd_final", gradcheck(&[s.clone(), t.clone()], 80, 1e-6, |g, v| kd_final(g, v[0], v[1]).unwrap()));
    check(&mut out, 
        "kd_freq",
        gradcheck(&[s.clone(), t.clone()], 80, 1e-6, |g, v| kd_freq(g, v[0], v[1], 2.0, 1.0, 3).unwrap()),
    );
    // The focal map is data: differentiate with it held at its value for the
    // unperturbed inputs.
    let (_, sh) = freq_split_tensor(&s, 1.0, 3).unwrap();
    let (_, th) = freq_split_tensor(&t, 1.0, 3).unwrap();
    let wmap = focal_weights(&sh, &th, 1.0, 0.1).unwrap();
    check(&mut out, 
        "kd_freq_focal",
        gradcheck(&[s.clone(), t.clone()], 80, 1e-6, |g, v| {
            kd_freq_weighted(g, v[0], v[1], 2.0, 1.0, 3, &wmap).unwrap()
        }),
    );
    let (sp, tp) = frames(31);
    check(&mut out, 
        "kd_temporal",
        gradcheck(&[s, sp, t, tp], 60, 1e-6, |g, v| kd_temporal(g, v[0], v[1], v[2], v[3]).unwrap()),
    );
    out
}

pub fn kd_feature_with_adapters() -> Vec<Outcome> {
    let mut out = Vec::new();
    let sf = rand_tensor(&[3, 4, 5], -1.0, 1.0, 40);
    let tf = rand_tensor(&[5, 4, 5], -1.0, 1.0, 41);
    let w = rand_tensor(&[5, 3, 1, 1], -1.0, 1.0, 42);
    let b = rand_tensor(&[5], -1.0, 1.0, 43);
    let worst = gradcheck(&[sf, tf, w, b], 60, 1e-6, |g, v| {
        let a = AdapterVars { stage: 0, weight: v[2], bias: v[3] };
        kd_feature(g, &[v[0]], &[v[1]], &[a]).unwrap()
    });
    check(&mut out, "kd_feature", worst);
    out
}

pub fn total_loss_every_mode() -> Vec<Outcome> {
    let mut out = Vec::new();
    let (s, gt) = frames(50);
    let (t, _) = frames(51);
    let (sp, tp) = frames(52);
    for mode in [KdMode::None, KdMode::Final, KdMode::Freq, KdMode::Temporal] {
        let cfg = KdConfig { lambda: 0.8, ..KdConfig::with_mode(mode) };
        let worst = gradcheck(&[s.clone(), sp.clone()], 60, 1e-6, |g, v| {
            let gtv = g.constant(gt.clone());
            let inputs = KdInputs {
                teacher_frame: Some(g.constant(t.clone())),
                student_prev: Some(v[1]),
                teacher_prev: Some(g.constant(tp.clone())),
                ..KdInputs::default()
            };
            total_loss(g, v[0], gtv, &cfg, &inputs).unwrap().total
        });
        check(&mut out, &format!("total_loss {mode:?}"), worst);
    }
    out
}

fn shrunken() -> VariantConfig {
    let mut c = VariantConfig::named("T").unwrap();
    c.name = "grad".into();
    c.stem_hidden = 16;
    c.seed_channels = 8;
    c.stage_widths = vec![8, 8];
    c.strides = vec![5, 2];
    c.pe_levels = 8;
    c
}

pub fn full_model_with_reconstruction_loss() -> Vec<Outcome> {
    let mut out = Vec::new();
    let cfg = shrunken();
    let (h, w) = cfg.output_hw();
    let params = ModelParams::<f64>::init(&cfg, 3);
    let gt = rand_tensor(&[3, h, w], 0.0, 1.0, 60);
    let tensors: Vec<Tensor<f64>> = params.tensors().cloned().collect();
    let worst = gradcheck(&tensors, 12, 1e-5, |g, v| {
        let bound = BoundParams { leaves: v.to_vec(), effective: v.to_vec() };
        let dec = decode_on_graph(g, &cfg, &bound, 0.37).unwrap();
        let gtv = g.constant(gt.clone());
        recon_loss(g, dec.frame, gtv, RECON_L1_WEIGHT).unwrap()
    });
    out.push(("full model + recon loss".to_string(), worst, MODEL_TOL));
    out
}

/// Every group in order.
pub fn all() -> Vec<Outcome> {
    let mut out = Vec::new();
    out.extend(elementwise_ops());
    out.extend(reductions_and_reshape());
    out.extend(linear_single_and_batched());
    out.extend(conv2d_k3_k1_and_batched());
    out.extend(pixel_shuffle_grad());
    out.extend(blur_both_axes_and_paddings());
    out.extend(ssim_and_recon_loss());
    out.extend(kd_output_losses());
    out.extend(kd_feature_with_adapters());
    out.extend(total_loss_every_mode());
    out.extend(full_model_with_reconstruction_loss());
    out
}
