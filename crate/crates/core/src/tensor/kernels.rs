//! Raw numeric kernels on flat slices. The autodiff tape in `graph` wraps
//! these; metrics and inference helpers call them directly.

use super::Real;

/// Border handling for the separable blur.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Only positions where the whole window fits; output shrinks by `2 * radius`.
    Valid,
    /// Mirror without repeating the edge sample (`-1 -> 1`); output keeps its size.
    Reflect,
}

/// Normalized 1D Gaussian taps for `-radius..=radius`.
pub fn gaussian_kernel<T: Real>(sigma: f64, radius: usize) -> Vec<T> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| T::lit(v / total)).collect()
}

#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // single reflection suffices because callers guarantee radius < n
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Output extent of a blur pass along an axis of length `n`.
pub fn blur_extent(n: usize, radius: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => n.saturating_sub(2 * radius),
        Padding::Reflect => n,
    }
}

/// One separable blur pass over `planes` images of `h x w`, along width
/// (`along_width == true`) or height.
pub fn blur_1d<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    along_width: bool,
    padding: Padding,
) -> (Vec<T>, usize, usize) {
    let r = kernel.len() / 2;
    if along_width {
        let ow = blur_extent(w, r, padding);
        let mut out = vec![T::zero(); planes * h * ow];
        let mut padded = vec![T::zero(); w + 2 * r];
        for (src, dst) in input.chunks_exact(w).zip(out.chunks_exact_mut(ow.max(1))) {
            let row: &[T] = match padding {
                Padding::Valid => src,
                Padding::Reflect => {
                    for (i, v) in padded.iter_mut().enumerate() {
                        *v = src[reflect_index(i as isize - r as isize, w)];
                    }
                    &padded
                }
            };
            for (j, &kv) in kernel.iter().enumerate() {
                for (o, &v) in dst.iter_mut().zip(&row[j..j + ow]) {
                    *o = *o + kv * v;
                }
            }
        }
        (out, h, ow)
    } else {
        let oh = blur_extent(h, r, padding);
        let mut out = vec![T::zero(); planes * oh * w];
        for p in 0..planes {
            let src = &input[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * w..(p + 1) * oh * w];
            for y in 0..oh {
                let drow = &mut dst[y * w..(y + 1) * w];
                for (j, &kv) in kernel.iter().enumerate() {
                    let sy = match padding {
                        Padding::Valid => y + j,
                        Padding::Reflect => reflect_index(y as isize + j as isize - r as isize, h),
                    };
                    for (o, &v) in drow.iter_mut().zip(&src[sy * w..(sy + 1) * w]) {
                        *o = *o + kv * v;
                    }
                }
            }
        }
        (out, oh, w)
    }
}

/// Adjoint of [`blur_1d`]: scatters `grad_out` back onto the input grid.
pub fn blur_1d_adjoint<T: Real>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    along_width: bool,
    padding: Padding,
) -> Vec<T> {
    let r = kernel.len() / 2;
    let mut grad_in = vec![T::zero(); planes * h * w];
    if along_width {
        let ow = blur_extent(w, r, padding);
        let mut padded = vec![T::zero(); w + 2 * r];
        for (g, dst) in grad_out.chunks_exact(ow.max(1)).zip(grad_in.chunks_exact_mut(w)) {
            match padding {
                Padding::Valid => {
                    for (j, &kv) in kernel.iter().enumerate() {
                        for (a, &gv) in dst[j..j + ow].iter_mut().zip(g) {
                            *a = *a + kv * gv;
                        }
                    }
                }
                Padding::Reflect => {
                    padded.fill(T::zero());
                    for (j, &kv) in kernel.iter().enumerate() {
                        for (a, &gv) in padded[j..j + ow].iter_mut().zip(g) {
                            *a = *a + kv * gv;
                        }
                    }
                    for (i, &v) in padded.iter().enumerate() {
                        let t = reflect_index(i as isize - r as isize, w);
                        dst[t] = dst[t] + v;
                    }
                }
            }
        }
    } else {
        let oh = blur_extent(h, r, padding);
        for p in 0..planes {
            let g = &grad_out[p * oh * w..(p + 1) * oh * w];
            let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let grow = &g[y * w..(y + 1) * w];
                for (j, &kv) in kernel.iter().enumerate() {
                    let sy = match padding {
                        Padding::Valid => y + j,
                        Padding::Reflect => reflect_index(y as isize + j as isize - r as isize, h),
                    };
                    for (a, &gv) in dst[sy * w..(sy + 1) * w].iter_mut().zip(grow) {
                        *a = *a + kv * gv;
                    }
                }
            }
        }
    }
    grad_in
}

/// Full separable 2D Gaussian blur of `planes` images.
pub fn blur_2d<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    padding: Padding,
) -> (Vec<T>, usize, usize) {
    let (tmp, h1, w1) = blur_1d(input, planes, h, w, kernel, true, padding);
    blur_1d(&tmp, planes, h1, w1, kernel, false, padding)
}

/// Unfolds a `[c, h, w]` image into `[c * k * k, h * w]` columns with zero
/// "same" padding.
pub fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src_row[sx_lo..sx_lo + len]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients onto the image grid.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let base = sy as usize * w;
                    for x in x_lo..x_hi {
                        let sx = (x as isize + dx) as usize;
                        plane[base + sx] = plane[base + sx] + src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Same-resolution convolution of one `[c_in, h, w]` image.
///
/// `weight` is `[c_out, c_in, k, k]`, odd `k`, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    k: usize,
) -> Vec<T> {
    let hw = h * w;
    let kk = c_in * k * k;
    let mut out = vec![T::zero(); c_out * hw];
    for (co, row) in out.chunks_mut(hw.max(1)).enumerate() {
        row.fill(bias[co]);
    }
    let cols_owned;
    let cols: &[T] = if k == 1 {
        input
    } else {
        cols_owned = im2col(input, c_in, h, w, k);
        &cols_owned
    };
    T::gemm(
        c_out,
        kk,
        hw,
        T::one(),
        weight,
        kk as isize,
        1,
        cols,
        hw as isize,
        1,
        T::one(),
        &mut out,
        hw as isize,
        1,
    );
    out
}

/// Gradients of [`conv2d_forward`]: returns `(d_input, d_weight, d_bias)`.
/// Columns are recomputed from `input` rather than cached.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    c_out: usize,
    k: usize,
    grad_out: &[T],
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = h * w;
    let kk = c_in * k * k;
    let cols_owned;
    let cols: &[T] = if k == 1 {
        input
    } else {
        cols_owned = im2col(input, c_in, h, w, k);
        &cols_owned
    };
    let mut d_weight = vec![T::zero(); c_out * kk];
    // dW = dY · colsᵀ
    T::gemm(
        c_out,
        hw,
        kk,
        T::one(),
        grad_out,
        hw as isize,
        1,
        cols,
        1,
        hw as isize,
        T::zero(),
        &mut d_weight,
        kk as isize,
        1,
    );
    let d_bias = grad_out
        .chunks(hw.max(1))
        .map(|row| row.iter().copied().sum())
        .collect();
    let d_input = need_input_grad.then(|| {
        let mut d_cols = vec![T::zero(); kk * hw];
        // dcols = Wᵀ · dY
        T::gemm(
            kk,
            c_out,
            hw,
            T::one(),
            weight,
            1,
            kk as isize,
            grad_out,
            hw as isize,
            1,
            T::zero(),
            &mut d_cols,
            hw as isize,
            1,
        );
        if k == 1 {
            d_cols
        } else {
            col2im(&d_cols, c_in, h, w, k)
        }
    });
    (d_input, d_weight, d_bias)
}

/// `[c * s², h, w] -> [c, h * s, w * s]`.
pub fn pixel_shuffle<T: Real>(input: &[T], c: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![T::zero(); input.len()];
    for ci in 0..c {
        for i in 0..s {
            for j in 0..s {
                let src_c = ci * s * s + i * s + j;
                let src = &input[src_c * h * w..(src_c + 1) * h * w];
                for y in 0..h {
                    let dst_row = (ci * oh + y * s + i) * ow;
                    for x in 0..w {
                        out[dst_row + x * s + j] = src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]: `[c, h * s, w * s] -> [c * s², h, w]`.
pub fn pixel_unshuffle<T: Real>(input: &[T], c: usize, oh: usize, ow: usize, s: usize) -> Vec<T> {
    let (h, w) = (oh / s, ow / s);
    let mut out = vec![T::zero(); input.len()];
    for ci in 0..c {
        for i in 0..s {
            for j in 0..s {
                let dst_c = ci * s * s + i * s + j;
                let dst = &mut out[dst_c * h * w..(dst_c + 1) * h * w];
                for y in 0..h {
                    let src_row = (ci * oh + y * s + i) * ow;
                    for x in 0..w {
                        dst[y * w + x] = input[src_row + x * s + j];
                    }
                }
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU, evaluated as `x · σ(2z)` with
/// `z = √(2/π)(x + 0.044715x³)`, since `½(1 + tanh z) = σ(2z)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let z2 = T::lit(2.0 * GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    x * sigmoid(z2)
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let z2 = T::lit(2.0 * GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let s = sigmoid(z2);
    let dz2 = T::lit(2.0 * GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * dz2
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        input: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        bias: &[f64],
        c_out: usize,
        k: usize,
    ) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; c_out * h * w];
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let sy = y as isize + ki as isize - p;
                                let sx = x as isize + kj as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((co * c_in + ci) * k + ki) * k + kj]
                                    * input[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(co * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn conv_center_tap_only_on_single_pixel() {
        let out = conv2d_forward(&[2.0f64], 1, 1, 1, &[1.0; 9], &[0.0], 1, 3);
        assert_eq!(out, vec![2.0]);
    }

    #[test]
    fn conv_matches_quadruple_loop() {
        let mut s = 7u64;
        let (c_in, c_out, h, w) = (4, 3, 5, 5);
        let input: Vec<f64> = (0..c_in * h * w).map(|_| lcg(&mut s)).collect();
        let weight: Vec<f64> = (0..c_out * c_in * 9).map(|_| lcg(&mut s)).collect();
        let bias: Vec<f64> = (0..c_out).map(|_| lcg(&mut s)).collect();
        let fast = conv2d_forward(&input, c_in, h, w, &weight, &bias, c_out, 3);
        let slow = naive_conv(&input, c_in, h, w, &weight, &bias, c_out, 3);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut s = 3u64;
        let (c, h, w) = (2, 4, 6);
        let x: Vec<f64> = (0..c * h * w).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|_| lcg(&mut s)).collect();
        let lhs: f64 = im2col(&x, c, h, w, 3).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&y, c, h, w, 3)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn blur_adjoint_identity() {
        let mut s = 11u64;
        let ker = gaussian_kernel::<f64>(1.0, 2);
        for padding in [Padding::Valid, Padding::Reflect] {
            for along in [true, false] {
                let (p, h, w) = (2, 6, 7);
                let x: Vec<f64> = (0..p * h * w).map(|_| lcg(&mut s)).collect();
                let (fx, oh, ow) = blur_1d(&x, p, h, w, &ker, along, padding);
                let y: Vec<f64> = (0..p * oh * ow).map(|_| lcg(&mut s)).collect();
                let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
                let ay = blur_1d_adjoint(&y, p, h, w, &ker, along, padding);
                let rhs: f64 = x.iter().zip(&ay).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10, "{padding:?} {along}");
            }
        }
    }

    #[test]
    fn gaussian_kernel_normalized() {
        let k = gaussian_kernel::<f64>(1.5, 5);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((k[0] - k[10]).abs() < 1e-15);
    }

    #[test]
    fn reflect_does_not_repeat_edge() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-3, 5), 3);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(2, 5), 2);
    }

    #[test]
    fn gelu_asymptotes() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0f64).abs() < 1e-9);
    }
}
