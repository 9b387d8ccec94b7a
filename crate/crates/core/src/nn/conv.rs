//! Convolution kernels built on im2col + gemm.
//!
//! Forward passes and input gradients run per sample in parallel. Weight
//! gradients are accumulated over samples in index order so results do not
//! depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::float::{gemm, Float, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zeros,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize, mode: PadMode) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
            mode,
        }
    }

    /// Output length of a convolution over `n` input samples, `None` when
    /// the kernel does not fit.
    pub fn out_len(&self, n: usize) -> Option<usize> {
        (n + 2 * self.pad)
            .checked_sub(self.kernel)
            .map(|v| v / self.stride + 1)
    }

    /// Output length of the transposed convolution.
    pub fn transposed_out_len(&self, n: usize, output_pad: usize) -> Option<usize> {
        ((n.checked_sub(1)?) * self.stride + self.kernel + output_pad).checked_sub(2 * self.pad)
    }
}

fn source_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zeros => None,
        PadMode::Reflect => {
            let r = if i < 0 { -i } else { 2 * (n - 1) - i };
            (0..n).contains(&r).then_some(r as usize)
        }
    }
}

/// For each kernel offset and output position, the source coordinate.
fn index_map(n_in: usize, n_out: usize, g: &ConvGeom) -> Vec<Option<usize>> {
    let mut map = Vec::with_capacity(g.kernel * n_out);
    for k in 0..g.kernel {
        for o in 0..n_out {
            let i = (o * g.stride + k) as isize - g.pad as isize;
            map.push(source_index(i, n_in, g.mode));
        }
    }
    map
}

struct Im2Col {
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    ymap: Vec<Option<usize>>,
    xmap: Vec<Option<usize>>,
}

impl Im2Col {
    fn new(channels: usize, h: usize, w: usize, oh: usize, ow: usize, g: &ConvGeom) -> Self {
        Im2Col {
            channels,
            h,
            w,
            oh,
            ow,
            kernel: g.kernel,
            ymap: index_map(h, oh, g),
            xmap: index_map(w, ow, g),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// `cols[(c, ky, kx), (oy, ox)] = img[c, map(oy, ky), map(ox, kx)]`.
    fn gather<T: Float>(&self, img: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let plane = self.h * self.w;
        let ncols = self.cols();
        for c in 0..self.channels {
            let src = &img[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let xm = &self.xmap[kx * self.ow..(kx + 1) * self.ow];
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.ymap[ky * self.oh + oy] {
                            None => out.fill(T::zero()),
                            Some(iy) => {
                                let line = &src[iy * self.w..(iy + 1) * self.w];
                                for (o, m) in out.iter_mut().zip(xm) {
                                    *o = match m {
                                        Some(ix) => line[*ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`gather`]: accumulates columns back into the image.
    fn scatter<T: Float>(&self, cols: &[T], img: &mut [T]) {
        let k = self.kernel;
        let plane = self.h * self.w;
        let ncols = self.cols();
        for c in 0..self.channels {
            let dst = &mut img[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let xm = &self.xmap[kx * self.ow..(kx + 1) * self.ow];
                    for oy in 0..self.oh {
                        if let Some(iy) = self.ymap[ky * self.oh + oy] {
                            let line = &mut dst[iy * self.w..(iy + 1) * self.w];
                            let vals = &src[oy * self.ow..(oy + 1) * self.ow];
                            for (v, m) in vals.iter().zip(xm) {
                                if let Some(ix) = m {
                                    line[*ix] = line[*ix] + *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Float>(dout: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dout.dims4();
    let plane = h * w;
    let mut db = vec![T::zero(); c];
    for s in 0..n {
        for (ci, g) in db.iter_mut().enumerate() {
            let off = (s * c + ci) * plane;
            *g = *g + dout.data()[off..off + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], db).expect("bias shape")
}

pub fn conv2d_out_dims(h: usize, w: usize, g: &ConvGeom) -> Result<(usize, usize)> {
    if g.mode == PadMode::Reflect && (g.pad >= h || g.pad >= w) {
        return Err(Error::Shape(format!(
            "reflect padding {} needs an input larger than {h}x{w}",
            g.pad
        )));
    }
    match (g.out_len(h), g.out_len(w)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::Shape(format!(
            "{}x{} kernel (pad {}) does not fit a {h}x{w} input",
            g.kernel, g.kernel, g.pad
        ))),
    }
}

/// `x: [N, C, H, W]`, `weight: [O, C, k, k]`, `bias: [O]`.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    let (o, wc, kh, kw) = weight.dims4();
    if wc != c || kh != g.kernel || kw != g.kernel {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not match input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let (oh, ow) = conv2d_out_dims(h, w, g)?;
    let plan = Im2Col::new(c, h, w, oh, ow, g);
    let in_per = c * h * w;
    let out_per = o * oh * ow;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let wmat = Mat::new(weight.data(), o, plan.rows());
    out.data_mut()
        .par_chunks_mut(out_per)
        .enumerate()
        .for_each(|(s, dst)| {
            let mut cols = vec![T::zero(); plan.rows() * plan.cols()];
            plan.gather(&x.data()[s * in_per..(s + 1) * in_per], &mut cols);
            gemm(
                wmat,
                Mat::new(&cols, plan.rows(), plan.cols()),
                T::zero(),
                dst,
            );
            if let Some(b) = bias {
                add_bias(dst, b.data(), oh * ow);
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, c, h, w) = x.dims4();
    let (o, _, _, _) = weight.dims4();
    let (_, _, oh, ow) = dout.dims4();
    let plan = Im2Col::new(c, h, w, oh, ow, g);
    let in_per = c * h * w;
    let out_per = o * oh * ow;

    let input = need.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let wmat = Mat::new(weight.data(), o, plan.rows());
        dx.data_mut()
            .par_chunks_mut(in_per)
            .enumerate()
            .for_each(|(s, dst)| {
                let mut dcols = vec![T::zero(); plan.rows() * plan.cols()];
                gemm(
                    wmat.t(),
                    Mat::new(&dout.data()[s * out_per..(s + 1) * out_per], o, plan.cols()),
                    T::zero(),
                    &mut dcols,
                );
                plan.scatter(&dcols, dst);
            });
        dx
    });

    let weight_grad = need.1.then(|| {
        let mut dw = Tensor::zeros(weight.shape());
        let mut cols = vec![T::zero(); plan.rows() * plan.cols()];
        for s in 0..n {
            plan.gather(&x.data()[s * in_per..(s + 1) * in_per], &mut cols);
            gemm(
                Mat::new(&dout.data()[s * out_per..(s + 1) * out_per], o, plan.cols()),
                Mat::new(&cols, plan.rows(), plan.cols()).t(),
                T::one(),
                dw.data_mut(),
            );
        }
        dw
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias: need.2.then(|| bias_grad(dout)),
    }
}

/// `x: [N, C_in, H, W]`, `weight: [C_in, C_out, k, k]`. Zero padding only.
pub fn conv_transpose2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
    output_pad: usize,
) -> Result<Tensor<T>> {
    let (n, c_in, h, w) = x.dims4();
    let (wc, c_out, kh, kw) = weight.dims4();
    if wc != c_in || kh != g.kernel || kw != g.kernel || g.mode != PadMode::Zeros {
        return Err(Error::Shape(format!(
            "transposed conv weight {:?} does not match input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let (oh, ow) = match (
        g.transposed_out_len(h, output_pad),
        g.transposed_out_len(w, output_pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "transposed conv geometry invalid for {h}x{w}"
            )))
        }
    };
    // The equivalent forward convolution maps (oh, ow) back onto (h, w).
    let plan = Im2Col::new(c_out, oh, ow, h, w, g);
    let in_per = c_in * h * w;
    let out_per = c_out * oh * ow;
    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    let wmat = Mat::new(weight.data(), c_in, plan.rows());
    out.data_mut()
        .par_chunks_mut(out_per)
        .enumerate()
        .for_each(|(s, dst)| {
            let mut cols = vec![T::zero(); plan.rows() * plan.cols()];
            gemm(
                wmat.t(),
                Mat::new(&x.data()[s * in_per..(s + 1) * in_per], c_in, h * w),
                T::zero(),
                &mut cols,
            );
            plan.scatter(&cols, dst);
            if let Some(b) = bias {
                add_bias(dst, b.data(), oh * ow);
            }
        });
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, c_in, h, w) = x.dims4();
    let (_, c_out, _, _) = weight.dims4();
    let (_, _, oh, ow) = dout.dims4();
    let plan = Im2Col::new(c_out, oh, ow, h, w, g);
    let in_per = c_in * h * w;
    let out_per = c_out * oh * ow;
    let wmat = Mat::new(weight.data(), c_in, plan.rows());

    let input = need.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut()
            .par_chunks_mut(in_per)
            .enumerate()
            .for_each(|(s, dst)| {
                let mut cols = vec![T::zero(); plan.rows() * plan.cols()];
                plan.gather(&dout.data()[s * out_per..(s + 1) * out_per], &mut cols);
                gemm(
                    wmat,
                    Mat::new(&cols, plan.rows(), plan.cols()),
                    T::zero(),
                    dst,
                );
            });
        dx
    });

    let weight_grad = need.1.then(|| {
        let mut dw = Tensor::zeros(weight.shape());
        let mut cols = vec![T::zero(); plan.rows() * plan.cols()];
        for s in 0..n {
            plan.gather(&dout.data()[s * out_per..(s + 1) * out_per], &mut cols);
            gemm(
                Mat::new(&x.data()[s * in_per..(s + 1) * in_per], c_in, h * w),
                Mat::new(&cols, plan.rows(), plan.cols()).t(),
                T::one(),
                dw.data_mut(),
            );
        }
        dw
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias: need.2.then(|| bias_grad(dout)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4();
        let (o, _, k, _) = wt.dims4();
        let (oh, ow) = conv2d_out_dims(h, w, g).unwrap();
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    let (Some(iy), Some(ix)) =
                                        (source_index(iy, h, g.mode), source_index(ix, w, g.mode))
                                    else {
                                        continue;
                                    };
                                    acc += x.data()[((s * c + ic) * h + iy) * w + ix]
                                        * wt.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((s * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_naive_for_both_pad_modes() {
        let x = ramp(&[2, 3, 7, 6], 0.05);
        let wt = ramp(&[4, 3, 3, 3], 0.03);
        for mode in [PadMode::Zeros, PadMode::Reflect] {
            for stride in [1, 2] {
                let g = ConvGeom::new(3, stride, 1, mode);
                let fast = conv2d_forward(&x, &wt, None, &g).unwrap();
                let slow = naive_conv(&x, &wt, &g);
                assert_eq!(fast.shape(), slow.shape());
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reflect_index_mirrors_without_repeating_edge() {
        assert_eq!(source_index(-1, 5, PadMode::Reflect), Some(1));
        assert_eq!(source_index(-3, 5, PadMode::Reflect), Some(3));
        assert_eq!(source_index(5, 5, PadMode::Reflect), Some(3));
        assert_eq!(source_index(-1, 5, PadMode::Zeros), None);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(a), b> == <a, convT(b)> for matching geometry.
        let g = ConvGeom::new(3, 2, 1, PadMode::Zeros);
        let a = ramp(&[1, 2, 8, 8], 0.1);
        let wt = ramp(&[3, 2, 3, 3], 0.07); // conv: 2 -> 3 channels
        let ya = conv2d_forward(&a, &wt, None, &g).unwrap(); // [1,3,4,4]
        let b = ramp(&[1, 3, 4, 4], 0.02);
        // Transposed weight layout is [C_in=3, C_out=2, k, k], the same buffer.
        let wt_t = Tensor::from_vec(&[3, 2, 3, 3], wt.data().to_vec()).unwrap();
        let xb = conv_transpose2d_forward(&b, &wt_t, None, &g, 1).unwrap();
        assert_eq!(xb.shape(), &[1, 2, 8, 8]);
        let lhs: f64 = ya.data().iter().zip(b.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = a.data().iter().zip(xb.data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn out_len_follows_stride_arithmetic() {
        let g = ConvGeom::new(4, 2, 1, PadMode::Zeros);
        assert_eq!(g.out_len(128), Some(64));
        assert_eq!(g.out_len(7), Some(3));
        let t = ConvGeom::new(3, 2, 1, PadMode::Zeros);
        assert_eq!(t.transposed_out_len(25, 1), Some(50));
    }
}
