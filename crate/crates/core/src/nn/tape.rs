//! Reverse-mode autodiff over a linear tape of tensor ops.
//!
//! A forward pass records every intermediate value; [`Tape::backward`]
//! replays the tape in reverse from one or more seeded outputs. Parameters
//! enter the tape by name and their gradients come back keyed by that name,
//! summed when a parameter is used more than once.

use std::collections::BTreeMap;

use super::conv::{self, ConvGeom};
use super::float::{gemm, Float, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<T>,
        xhat: Tensor<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Add(Var, Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradient with respect to a leaf created with [`Tape::input_requiring_grad`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }
}

pub const NORM_EPS: f64 = 1e-5;

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Consumes the tape, returning one recorded value.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input_requiring_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, name: &str, t: &Tensor<T>, trainable: bool) -> Var {
        self.push(t.clone(), Op::Param(name.to_string()), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeom) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &g,
        )?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, g }, ng))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
        output_pad: usize,
    ) -> Result<Var> {
        let out = conv::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &g,
            output_pad,
        )?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, g }, ng))
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let plane = h * w;
        let count = T::from_f64v(plane as f64);
        let eps = T::from_f64v(NORM_EPS);
        let mut out = Tensor::zeros(v.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in v.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / count;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, ng)
    }

    /// Training-mode batch normalization. Returns the output together with
    /// the batch mean and unbiased variance per channel for running stats.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<T>, Vec<T>) {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let plane = h * w;
        let count = n * plane;
        let cnt = T::from_f64v(count as f64);
        let eps = T::from_f64v(NORM_EPS);
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for (ci, (mean, var)) in means.iter_mut().zip(vars.iter_mut()).enumerate() {
            let chan = (0..n).flat_map(|s| {
                let off = (s * c + ci) * plane;
                v.data()[off..off + plane].iter().copied()
            });
            *mean = chan.clone().sum::<T>() / cnt;
            let m = *mean;
            *var = chan.map(|a| (a - m) * (a - m)).sum::<T>() / cnt;
        }
        let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Tensor::zeros(v.shape());
        let mut out = Tensor::zeros(v.shape());
        for s in 0..n {
            for ci in 0..c {
                let off = (s * c + ci) * plane;
                for i in off..off + plane {
                    let xh = (v.data()[i] - means[ci]) * inv_std[ci];
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = gv[ci] * xh + bv[ci];
                }
            }
        }
        let unbiased = if count > 1 {
            let f = T::from_f64v(count as f64 / (count - 1) as f64);
            vars.iter().map(|&v| v * f).collect()
        } else {
            vars
        };
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
            ng,
        );
        (var, means, unbiased)
    }

    /// `y[n, c] = x[n, c] * scale[c] + shift[c]`; gradient flows to `x` only.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: &[T]) -> Var {
        let v = self.value(x);
        let (_, c, h, w) = v.dims4();
        let plane = h * w;
        let mut out = v.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ci = i % c;
            for a in chunk {
                *a = *a * scale[ci] + shift[ci];
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::ChannelAffine { x, scale }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64v(slope);
        let out = self
            .value(x)
            .map(|a| if a > T::zero() { a } else { a * s });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, s), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Max pooling with zero-free padding (padded cells never win).
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let g = ConvGeom::new(kernel, stride, pad, conv::PadMode::Zeros);
        let (oh, ow) = conv::conv2d_out_dims(h, w, &g)?;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane_idx in 0..n * c {
            let base = plane_idx * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if v.data()[i] > best {
                                best = v.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data_mut()[(plane_idx * oh + oy) * ow + ox] = best;
                    argmax.push(best_i);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let plane = h * w;
        let inv = T::from_f64v(1.0 / plane as f64);
        let data = v
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], data).expect("pool shape");
        let ng = self.ng(x);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    /// `x: [N, F]`, `w: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, f) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        if wv.shape() != [o, f] || self.value(b).shape() != [o] {
            return Err(Error::Shape(format!(
                "linear weight {:?} does not match input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let mut out = vec![T::zero(); n * o];
        gemm(Mat::new(xv.data(), n, f), Mat::new(wv.data(), o, f).t(), T::zero(), &mut out);
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (a, &bb) in row.iter_mut().zip(bv) {
                *a = *a + bb;
            }
        }
        let out = Tensor::from_vec(&[n, o], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Back-propagates the given output gradients through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} does not match output {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        };
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, node, dy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        idx: usize,
        node: &Node<T>,
        dy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        let mut send = |v: Var, g: Tensor<T>| {
            if self.ng(v) {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {
                out.leaves.insert(idx, dy);
            }
            Op::Param(name) => match out.params.get_mut(name) {
                Some(acc) => acc.add_assign(&dy),
                None => {
                    out.params.insert(name.clone(), dy);
                }
            },
            Op::Conv2d { x, w, b, g } => {
                let r = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &dy,
                    g,
                    (self.ng(*x), self.ng(*w), b.is_some_and(|b| self.ng(b))),
                );
                if let Some(dx) = r.input {
                    send(*x, dx);
                }
                if let Some(dw) = r.weight {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.bias) {
                    send(*b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, g } => {
                let r = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &dy,
                    g,
                    (self.ng(*x), self.ng(*w), b.is_some_and(|b| self.ng(b))),
                );
                if let Some(dx) = r.input {
                    send(*x, dx);
                }
                if let Some(dw) = r.weight {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.bias) {
                    send(*b, db);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let (_, _, h, w) = y.dims4();
                let plane = h * w;
                let cnt = T::from_f64v(plane as f64);
                let mut dx = Tensor::zeros(y.shape());
                for (((dxp, dyp), yp), &is) in dx
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(dy.data().chunks(plane))
                    .zip(y.data().chunks(plane))
                    .zip(inv_std)
                {
                    let sum_dy = dyp.iter().copied().sum::<T>();
                    let sum_dyy = dyp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &g), &yy) in dxp.iter_mut().zip(dyp).zip(yp) {
                        *d = is / cnt * (cnt * g - sum_dy - yy * sum_dyy);
                    }
                }
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let (n, c, h, w) = dy.dims4();
                let plane = h * w;
                let cnt = T::from_f64v((n * plane) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ci in 0..c {
                        let off = (s * c + ci) * plane;
                        for i in off..off + plane {
                            dgamma[ci] = dgamma[ci] + dy.data()[i] * xhat.data()[i];
                            dbeta[ci] = dbeta[ci] + dy.data()[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(dy.shape());
                    for s in 0..n {
                        for ci in 0..c {
                            let off = (s * c + ci) * plane;
                            let k = gv[ci] * inv_std[ci] / cnt;
                            for i in off..off + plane {
                                dx.data_mut()[i] = k
                                    * (cnt * dy.data()[i]
                                        - dbeta[ci]
                                        - xhat.data()[i] * dgamma[ci]);
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, Tensor::from_vec(&[c], dgamma).expect("gamma"));
                send(*beta, Tensor::from_vec(&[c], dbeta).expect("beta"));
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, h, w) = dy.dims4();
                let plane = h * w;
                let mut dx = dy;
                for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    for a in chunk {
                        *a = *a * scale[i % c];
                    }
                }
                send(*x, dx);
            }
            Op::Relu(x) => {
                let mut dx = dy;
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                send(*x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let mut dx = dy;
                for (d, &a) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if a <= T::zero() {
                        *d = *d * *slope;
                    }
                }
                send(*x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = dy;
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * (T::one() - y * y);
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                if self.ng(*a) && self.ng(*b) {
                    send(*a, dy.clone());
                    send(*b, dy);
                } else if self.ng(*a) {
                    send(*a, dy);
                } else {
                    send(*b, dy);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&i, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[i] = dx.data_mut()[i] + g;
                }
                send(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let plane = shape[2] * shape[3];
                let inv = T::from_f64v(1.0 / plane as f64);
                let mut dx = Tensor::zeros(&shape);
                for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
                    chunk.fill(g * inv);
                }
                send(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, f) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(Mat::new(dy.data(), n, o), Mat::new(wv.data(), o, f), T::zero(), &mut dx);
                    send(*x, Tensor::from_vec(&[n, f], dx).expect("dx"));
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    gemm(
                        Mat::new(dy.data(), n, o).t(),
                        Mat::new(xv.data(), n, f),
                        T::zero(),
                        &mut dw,
                    );
                    send(*w, Tensor::from_vec(&[o, f], dw).expect("dw"));
                }
                let mut db = vec![T::zero(); o];
                for row in dy.data().chunks(o) {
                    for (a, &g) in db.iter_mut().zip(row) {
                        *a = *a + g;
                    }
                }
                send(*b, Tensor::from_vec(&[o], db).expect("db"));
            }
        }
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::PadMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(sum(out * probe))/d(input) against central differences.
    fn check_input_grad(build: impl Fn(&mut Tape<f64>, Var) -> Var, shape: &[usize]) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Tensor<f64> = Tensor::randn(shape, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input_requiring_grad(x0.clone());
        let y = build(&mut tape, x);
        let probe: Tensor<f64> = Tensor::randn(tape.value(y).shape(), 1.0, &mut rng);
        let grads = tape.backward(vec![(y, probe.clone())]).unwrap();
        let analytic = grads.leaf(x).unwrap().clone();
        let objective = |xv: Tensor<f64>| {
            let mut t = Tape::new();
            let xi = t.input(xv);
            let yi = build(&mut t, xi);
            t.value(yi)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let eps = 1e-6;
        for i in (0..x0.len()).step_by(x0.len() / 17 + 1) {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (objective(plus) - objective(minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                "index {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn instance_norm_gradient() {
        check_input_grad(|t, x| t.instance_norm(x), &[2, 3, 4, 5]);
    }

    #[test]
    fn batch_norm_gradient() {
        check_input_grad(
            |t, x| {
                let g = t.input(Tensor::from_vec(&[3], vec![1.5, 0.5, -1.0]).unwrap());
                let b = t.input(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
                t.batch_norm_train(x, g, b).0
            },
            &[2, 3, 4, 4],
        );
    }

    #[test]
    fn conv_chain_gradient() {
        check_input_grad(
            |t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let w = t.input(Tensor::randn(&[4, 2, 3, 3], 0.3, &mut rng));
                let wt = t.input(Tensor::randn(&[4, 2, 3, 3], 0.3, &mut rng));
                let h = t
                    .conv2d(x, w, None, ConvGeom::new(3, 2, 1, PadMode::Reflect))
                    .unwrap();
                let h = t.tanh(h);
                t.conv_transpose2d(h, wt, None, ConvGeom::new(3, 2, 1, PadMode::Zeros), 1)
                    .unwrap()
            },
            &[2, 2, 6, 6],
        );
    }

    #[test]
    fn pooling_and_linear_gradient() {
        check_input_grad(
            |t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let p = t.max_pool(x, 3, 2, 1).unwrap();
                let g = t.global_avg_pool(p);
                let w = t.input(Tensor::randn(&[2, 3], 0.5, &mut rng));
                let b = t.input(Tensor::randn(&[2], 0.5, &mut rng));
                t.linear(g, w, b).unwrap()
            },
            &[2, 3, 6, 6],
        );
    }

    #[test]
    fn shared_parameter_gradients_are_summed() {
        let w: Tensor<f64> = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap());
        let g = ConvGeom::new(1, 1, 0, PadMode::Zeros);
        let w1 = tape.param("w", &w, true);
        let y1 = tape.conv2d(x, w1, None, g).unwrap();
        let w2 = tape.param("w", &w, true);
        let y2 = tape.conv2d(y1, w2, None, g).unwrap();
        // y2 = w^2 x, d/dw = 2 w x = 12
        let grads = tape.backward(vec![(y2, Tensor::full(&[1, 1, 1, 1], 1.0))]).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[12.0]);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = tape.param("frozen", &Tensor::full(&[1, 1, 1, 1], 1.0), false);
        let y = tape.conv2d(x, w, None, ConvGeom::new(1, 1, 0, PadMode::Zeros)).unwrap();
        let grads = tape.backward(vec![(y, Tensor::full(&[1, 1, 2, 2], 1.0))]).unwrap();
        assert!(grads.params.is_empty());
    }
}
