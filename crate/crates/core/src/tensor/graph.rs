use super::kernels::{self, Padding};
use super::{Real, Tensor};
use crate::error::{config_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Gelu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    PixelShuffle {
        x: Var,
        s: usize,
    },
    Blur {
        x: Var,
        kernel: Vec<T>,
        along_width: bool,
        padding: Padding,
    },
    /// Forward value supplied by the caller, gradient passed through unchanged.
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a topological order and the graph cannot contain cycles.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    conv_mults: u64,
    linear_mults: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// `None` when the node is unreachable from the loss or does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_image_shape(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => config_err(format!("{what}: expected [C,H,W] or [N,C,H,W], got {shape:?}")),
    }
}

fn image_shape(batch: Option<usize>, c: usize, h: usize, w: usize) -> Vec<usize> {
    match batch {
        Some(n) => vec![n, c, h, w],
        None => vec![c, h, w],
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            conv_mults: 0,
            linear_mults: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiplications performed by convolutions recorded so far.
    pub fn conv_mults(&self) -> u64 {
        self.conv_mults
    }

    pub fn linear_mults(&self) -> u64 {
        self.linear_mults
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Copies a node's value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let out = va.zip_map(vb, f);
        let rg = self.rg(&[a, b]);
        self.push(op, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), out, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(Op::MulScalar(a, c), out, rg)
    }

    /// Elementwise `|a|`; subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(Op::Abs(a), out, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.nodes[a.0].value.mean());
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.nodes[a.0].value.sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), out, rg)
    }

    /// Mean absolute difference, the `‖a − b‖₁` used throughout the objectives.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(Op::Gelu(a), out, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(Op::Sigmoid(a), out, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// `y = W x + b` for `x: [n]` or a batch `x: [B, n]`; `W: [m, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let (batch, n) = match xs[..] {
            [n] => (None, n),
            [bn, n] => (Some(bn), n),
            _ => return config_err(format!("linear: input must be [n] or [B,n], got {xs:?}")),
        };
        let [m, wn] = ws[..] else {
            return config_err(format!("linear: weight must be [m,n], got {ws:?}"));
        };
        if wn != n || bs != [m] {
            return config_err(format!(
                "linear: input {xs:?}, weight {ws:?} and bias {bs:?} disagree"
            ));
        }
        let rows = batch.unwrap_or(1);
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b).data());
        }
        // out[rows, m] += x[rows, n] · Wᵀ
        T::gemm(
            rows,
            n,
            m,
            T::one(),
            self.value(x).data(),
            n as isize,
            1,
            self.value(w).data(),
            1,
            n as isize,
            T::one(),
            &mut out,
            m as isize,
            1,
        );
        self.linear_mults += (rows * m * n) as u64;
        let shape = match batch {
            Some(bn) => vec![bn, m],
            None => vec![m],
        };
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Linear { x, w, b }, Tensor::new(shape, out)?, rg))
    }

    /// Stride-1 zero-padded convolution keeping the spatial size.
    ///
    /// `x: [C_in,H,W]` (or batched), `w: [C_out,C_in,k,k]` with `k ∈ {1,3}`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let (n, c_in, h, wd) = split_image_shape(&xs, "conv2d")?;
        let [c_out, wc_in, k, k2] = ws[..] else {
            return config_err(format!("conv2d: weight must be 4-D, got {ws:?}"));
        };
        if k != k2 || !(k == 1 || k == 3) {
            return config_err(format!("conv2d: kernel must be 1x1 or 3x3, got {k}x{k2}"));
        }
        if wc_in != c_in {
            return config_err(format!(
                "conv2d: input has {c_in} channels but weight expects {wc_in}"
            ));
        }
        if bs != [c_out] {
            return config_err(format!("conv2d: bias {bs:?} does not match {c_out} outputs"));
        }
        let per_in = c_in * h * wd;
        let mut out = Vec::with_capacity(n * c_out * h * wd);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                out.extend(kernels::conv2d_forward(
                    &xv[i * per_in..(i + 1) * per_in],
                    c_in,
                    h,
                    wd,
                    wv,
                    bv,
                    c_out,
                    k,
                ));
            }
        }
        self.conv_mults += (n * h * wd * c_out * k * k * c_in) as u64;
        let batch = (xs.len() == 4).then_some(n);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Op::Conv2d { x, w, b, k },
            Tensor::new(image_shape(batch, c_out, h, wd), out)?,
            rg,
        ))
    }

    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, cs2, h, w) = split_image_shape(&xs, "pixel_shuffle")?;
        if s == 0 || cs2 % (s * s) != 0 {
            return config_err(format!(
                "pixel_shuffle: {cs2} channels not divisible by {s}^2"
            ));
        }
        let c = cs2 / (s * s);
        let per = cs2 * h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n {
            out.extend(kernels::pixel_shuffle(&xv[i * per..(i + 1) * per], c, h, w, s));
        }
        let batch = (xs.len() == 4).then_some(n);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::PixelShuffle { x, s },
            Tensor::new(image_shape(batch, c, h * s, w * s), out)?,
            rg,
        ))
    }

    /// One separable Gaussian pass over every `H x W` plane of `x` (last two axes).
    pub fn blur_1d(&mut self, x: Var, kernel: &[T], along_width: bool, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return config_err("blur: input needs at least two axes");
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let r = kernel.len() / 2;
        let n = if along_width { w } else { h };
        match padding {
            Padding::Valid if n < kernel.len() => {
                return config_err(format!("blur: extent {n} smaller than window {}", kernel.len()))
            }
            Padding::Reflect if n <= r => {
                return config_err(format!("blur: extent {n} too small for radius {r}"))
            }
            _ => {}
        }
        let (out, oh, ow) =
            kernels::blur_1d(self.value(x).data(), planes, h, w, kernel, along_width, padding);
        let mut shape = xs.clone();
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Blur {
                x,
                kernel: kernel.to_vec(),
                along_width,
                padding,
            },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// Separable 2D Gaussian blur.
    pub fn blur(&mut self, x: Var, kernel: &[T], padding: Padding) -> Result<Var> {
        let y = self.blur_1d(x, kernel, true, padding)?;
        self.blur_1d(y, kernel, false, padding)
    }

    /// Forward value `replacement`, backward identity into `x`:
    /// `x + (replacement − x)` with the bracket detached.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Result<Var> {
        if replacement.shape() != self.value(x).shape() {
            return config_err("straight_through: replacement shape differs from input");
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::StraightThrough(x), replacement, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.zip_map(vb, |gv, y| gv * y));
                    self.acc(&mut grads, *b, || g.zip_map(va, |gv, x| gv * x));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.zip_map(vb, |gv, y| gv / y));
                    self.acc(&mut grads, *b, || {
                        let num = g.zip_map(va, |gv, x| gv * x);
                        num.zip_map(vb, |v, y| -v / (y * y))
                    });
                }
                Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    self.acc(&mut grads, *a, || g.clone().reshape(&shape).expect("same numel"));
                }
                Op::MulScalar(a, c) => {
                    let c = *c;
                    self.acc(&mut grads, *a, || g.map(|v| v * c));
                }
                Op::Abs(a) => {
                    let va = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        g.zip_map(va, |gv, x| {
                            if x > T::zero() {
                                gv
                            } else if x < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                    });
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let scale = g.item() / T::from_usize(va.numel().max(1)).unwrap();
                    self.acc(&mut grads, *a, || Tensor::full(va.shape(), scale));
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    self.acc(&mut grads, *a, || Tensor::full(va.shape(), g.item()));
                }
                Op::Gelu(a) => {
                    let va = self.value(*a);
                    self.acc(&mut grads, *a, || g.zip_map(va, |gv, x| gv * kernels::gelu_grad(x)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    self.acc(&mut grads, *a, || g.zip_map(y, |gv, s| gv * s * (T::one() - s)));
                }
                Op::Linear { x, w, b } => self.linear_backward(&mut grads, &g, *x, *w, *b),
                Op::Conv2d { x, w, b, k } => self.conv_backward(&mut grads, &g, *x, *w, *b, *k),
                Op::PixelShuffle { x, s } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, cs2, h, w) = split_image_shape(&xs, "pixel_shuffle")?;
                    let c = cs2 / (s * s);
                    let per = cs2 * h * w;
                    self.acc(&mut grads, *x, || {
                        let mut out = Vec::with_capacity(g.numel());
                        for i in 0..n {
                            out.extend(kernels::pixel_unshuffle(
                                &g.data()[i * per..(i + 1) * per],
                                c,
                                h * s,
                                w * s,
                                *s,
                            ));
                        }
                        Tensor::new(xs.clone(), out).expect("same numel")
                    });
                }
                Op::Blur {
                    x,
                    kernel,
                    along_width,
                    padding,
                } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                    let planes: usize = xs[..xs.len() - 2].iter().product();
                    self.acc(&mut grads, *x, || {
                        let d = kernels::blur_1d_adjoint(
                            g.data(),
                            planes,
                            h,
                            w,
                            kernel,
                            *along_width,
                            *padding,
                        );
                        Tensor::new(xs.clone(), d).expect("same numel")
                    });
                }
            }
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn linear_backward(&self, grads: &mut [Option<Tensor<T>>], g: &Tensor<T>, x: Var, w: Var, b: Var) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (m, n) = (vw.shape()[0], vw.shape()[1]);
        let rows = vx.numel() / n;
        self.acc(grads, w, || {
            // dW[m, n] = gᵀ[m, rows] · x[rows, n]
            let mut d = vec![T::zero(); m * n];
            T::gemm(m, rows, n, T::one(), g.data(), 1, m as isize, vx.data(), n as isize, 1, T::zero(), &mut d, n as isize, 1);
            Tensor::new(vec![m, n], d).expect("shape")
        });
        self.acc(grads, b, || {
            let mut d = vec![T::zero(); m];
            for row in g.data().chunks(m) {
                for (acc, &v) in d.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            Tensor::new(vec![m], d).expect("shape")
        });
        self.acc(grads, x, || {
            // dx[rows, n] = g[rows, m] · W[m, n]
            let mut d = vec![T::zero(); rows * n];
            T::gemm(rows, m, n, T::one(), g.data(), m as isize, 1, vw.data(), n as isize, 1, T::zero(), &mut d, n as isize, 1);
            Tensor::new(vx.shape().to_vec(), d).expect("shape")
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, c_in, h, wd) = split_image_shape(vx.shape(), "conv2d").expect("validated on forward");
        let c_out = vw.shape()[0];
        let per_in = c_in * h * wd;
        let per_out = c_out * h * wd;
        let need_x = self.nodes[x.0].requires_grad;
        let mut dx = need_x.then(|| vec![T::zero(); vx.numel()]);
        let mut dw = vec![T::zero(); vw.numel()];
        let mut db = vec![T::zero(); c_out];
        for i in 0..n {
            let (gx, gw, gb) = kernels::conv2d_backward(
                &vx.data()[i * per_in..(i + 1) * per_in],
                c_in,
                h,
                wd,
                vw.data(),
                c_out,
                k,
                &g.data()[i * per_out..(i + 1) * per_out],
                need_x,
            );
            for (a, v) in dw.iter_mut().zip(gw) {
                *a = *a + v;
            }
            for (a, v) in db.iter_mut().zip(gb) {
                *a = *a + v;
            }
            if let (Some(dx), Some(gx)) = (dx.as_mut(), gx) {
                dx[i * per_in..(i + 1) * per_in].copy_from_slice(&gx);
            }
        }
        self.acc(grads, w, || Tensor::new(vw.shape().to_vec(), dw).expect("shape"));
        self.acc(grads, b, || Tensor::new(vec![c_out], db).expect("shape"));
        if let Some(dx) = dx {
            self.acc(grads, x, || Tensor::new(vx.shape().to_vec(), dx).expect("shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let y = g.constant(Tensor::new(vec![4], vec![0.0, 0.0, 0.5, 4.0]).unwrap());
        let l = g.l1(x, y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25, -0.25, 0.0, -0.25]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[3]));
        let y = g.gelu(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn unreachable_param_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones(&[2]));
        let b = g.param(Tensor::ones(&[2]));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let w = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.param(Tensor::zeros(&[2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);

        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x2 = g.constant(Tensor::new(vec![2], vec![0.3, -1.7]).unwrap());
        let y2 = g.linear(x2, eye, b).unwrap();
        assert_eq!(g.value(y2).data(), &[0.3, -1.7]);
    }

    #[test]
    fn conv_input_channel_mismatch_is_config_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.param(Tensor::zeros(&[3, 5, 3, 3]));
        let b = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.conv2d(x, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[6, 2, 2]));
        assert!(matches!(g.pixel_shuffle(x, 2), Err(Error::Config(_))));
    }

    #[test]
    fn pixel_shuffle_2x2_layout() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let same = g.pixel_shuffle(x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
    }

    #[test]
    fn batched_conv_matches_per_image() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.37).sin()));
        let w = g.param(Tensor::from_fn(&[4, 2, 3, 3], |i| (i as f64 * 0.11).cos()));
        let b = g.param(Tensor::from_fn(&[4], |i| i as f64));
        let y = g.conv2d(x, w, b).unwrap();
        let x1 = g.constant(Tensor::new(vec![2, 3, 3], g.value(x).data()[18..].to_vec()).unwrap());
        let y1 = g.conv2d(x1, w, b).unwrap();
        assert_eq!(&g.value(y).data()[36..], g.value(y1).data());
        assert_eq!(g.conv_mults(), 2 * (9 * 4 * 9 * 2) + 9 * 4 * 9 * 2);
    }
}
