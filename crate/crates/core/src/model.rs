//! The restoration network: a marker→clean generator, a clean→marker
//! generator and a clean-domain patch discriminator, with least-squares
//! adversarial and L1 cycle objectives.
//!
//! Tensors are `[N, C, H, W]` with values in `[-1, 1]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::{ConvGeom, Float, PadMode, ParamStore, Tape, Tensor, Var};
use crate::raster::RasterImage;
use crate::rng::{streams, RngStream};

pub const BUNDLE_VERSION: &str = "inkrestore-model/1";
pub const BUNDLE_KIND: &str = "model_bundle";
pub const INIT_STD: f64 = 0.02;
pub const LRELU_SLOPE: f64 = 0.2;

pub const G_RM: &str = "g_rm";
pub const G_ADD: &str = "g_add";
pub const D_CLEAN: &str = "d_clean";
pub const D_MARKER: &str = "d_marker";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Feature maps of the generator's first layer; later stages use 2x and 4x.
    pub ngf: usize,
    pub res_blocks: usize,
    /// Feature maps of the discriminator's first layer.
    pub ndf: usize,
    /// Stride-2 stages in the discriminator.
    pub disc_layers: usize,
    pub lambda_cyc: f64,
    /// Adds the marker-domain discriminator and the clean→marker→clean cycle.
    pub full_cyclegan: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            ngf: 64,
            res_blocks: 6,
            ndf: 64,
            disc_layers: 3,
            lambda_cyc: 10.0,
            full_cyclegan: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ngf == 0 || self.ndf == 0 || self.disc_layers == 0 {
            return Err(Error::Config("model widths and disc_layers must be >= 1".into()));
        }
        if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
            return Err(Error::Config("model.lambda_cyc must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn discriminators(&self) -> Vec<&'static str> {
        if self.full_cyclegan {
            vec![D_CLEAN, D_MARKER]
        } else {
            vec![D_CLEAN]
        }
    }

    fn disc_mult(i: usize) -> usize {
        (1usize << i.min(3)).min(8)
    }

    /// Every parameter name and shape, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let f = self.ngf;
        for p in [G_RM, G_ADD] {
            out.push((format!("{p}.stem.weight"), vec![f, 3, 7, 7]));
            out.push((format!("{p}.down1.weight"), vec![2 * f, f, 3, 3]));
            out.push((format!("{p}.down2.weight"), vec![4 * f, 2 * f, 3, 3]));
            for r in 0..self.res_blocks {
                out.push((format!("{p}.res{r}.conv1.weight"), vec![4 * f, 4 * f, 3, 3]));
                out.push((format!("{p}.res{r}.conv2.weight"), vec![4 * f, 4 * f, 3, 3]));
            }
            out.push((format!("{p}.up1.weight"), vec![4 * f, 2 * f, 3, 3]));
            out.push((format!("{p}.up2.weight"), vec![2 * f, f, 3, 3]));
            out.push((format!("{p}.head.weight"), vec![3, f, 7, 7]));
            out.push((format!("{p}.head.bias"), vec![3]));
        }
        let d = self.ndf;
        for p in self.discriminators() {
            out.push((format!("{p}.conv0.weight"), vec![d, 3, 4, 4]));
            out.push((format!("{p}.conv0.bias"), vec![d]));
            let mut prev = 1;
            for i in 1..=self.disc_layers {
                let m = Self::disc_mult(i);
                out.push((format!("{p}.conv{i}.weight"), vec![d * m, d * prev, 4, 4]));
                prev = m;
            }
            out.push((format!("{p}.out.weight"), vec![1, d * prev, 4, 4]));
            out.push((format!("{p}.out.bias"), vec![1]));
        }
        out
    }

    /// Output grid of the discriminator for an `h x w` input.
    pub fn disc_grid(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |mut n: usize| {
            for _ in 0..self.disc_layers {
                n = DISC_DOWN.out_len(n)?;
            }
            DISC_FLAT.out_len(DISC_FLAT.out_len(n)?)
        };
        match (f(h), f(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Some((a, b)),
            _ => None,
        }
    }

    /// Smallest square input with a non-empty discriminator grid.
    pub fn disc_min_input(&self) -> usize {
        (1..).find(|&s| self.disc_grid(s, s).is_some()).expect("some size fits")
    }
}

pub fn init_params<T: Float>(spec: &ModelSpec, stream: RngStream) -> ParamStore<T> {
    let mut rng = stream.rng();
    let mut store = ParamStore::new();
    for (name, shape) in spec.param_shapes() {
        if name.ends_with(".bias") {
            store.insert(name, Tensor::zeros(&shape));
        } else {
            store.init_normal(name, &shape, INIT_STD, &mut rng);
        }
    }
    store
}

/// The operations the architectures need, implemented both by the recording
/// tape and by a plain eager executor.
pub trait Graph<T: Float> {
    type V: Clone;
    fn param(&mut self, name: &str) -> Result<Self::V>;
    fn conv(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, g: ConvGeom) -> Result<Self::V>;
    fn conv_t(&mut self, x: &Self::V, w: &Self::V, g: ConvGeom, output_pad: usize) -> Result<Self::V>;
    fn inorm(&mut self, x: &Self::V) -> Self::V;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn lrelu(&mut self, x: &Self::V, slope: f64) -> Self::V;
    fn tanh(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn shape(&self, x: &Self::V) -> Vec<usize>;
}

/// Records onto a tape; `trainable` controls whether parameters get gradients.
pub struct TapeGraph<'a, T: Float> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<T: Float> Graph<T> for TapeGraph<'_, T> {
    type V = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        Ok(self.tape.param(name, self.params.get(name)?, self.trainable))
    }
    fn conv(&mut self, x: &Var, w: &Var, b: Option<&Var>, g: ConvGeom) -> Result<Var> {
        self.tape.conv2d(*x, *w, b.copied(), g)
    }
    fn conv_t(&mut self, x: &Var, w: &Var, g: ConvGeom, output_pad: usize) -> Result<Var> {
        self.tape.conv_transpose2d(*x, *w, None, g, output_pad)
    }
    fn inorm(&mut self, x: &Var) -> Var {
        self.tape.instance_norm(*x)
    }
    fn relu(&mut self, x: &Var) -> Var {
        self.tape.relu(*x)
    }
    fn lrelu(&mut self, x: &Var, slope: f64) -> Var {
        self.tape.leaky_relu(*x, slope)
    }
    fn tanh(&mut self, x: &Var) -> Var {
        self.tape.tanh(*x)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }
    fn shape(&self, x: &Var) -> Vec<usize> {
        self.tape.value(*x).shape().to_vec()
    }
}

/// Evaluates immediately and keeps only live activations.
pub struct Eager<'a, T> {
    pub params: &'a ParamStore<T>,
}

fn eager_unary<T: Float>(x: &Tensor<T>, f: impl FnOnce(&mut Tape<T>, Var) -> Var) -> Tensor<T> {
    let mut t = Tape::new();
    let a = t.input(x.clone());
    let y = f(&mut t, a);
    t.into_value(y)
}

impl<T: Float> Graph<T> for Eager<'_, T> {
    type V = Tensor<T>;

    fn param(&mut self, name: &str) -> Result<Tensor<T>> {
        self.params.get(name).cloned()
    }
    fn conv(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeom) -> Result<Tensor<T>> {
        crate::nn::conv::conv2d_forward(x, w, b, &g)
    }
    fn conv_t(&mut self, x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom, output_pad: usize) -> Result<Tensor<T>> {
        crate::nn::conv::conv_transpose2d_forward(x, w, None, &g, output_pad)
    }
    fn inorm(&mut self, x: &Tensor<T>) -> Tensor<T> {
        eager_unary(x, |t, a| t.instance_norm(a))
    }
    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|a| a.max(T::zero()))
    }
    fn lrelu(&mut self, x: &Tensor<T>, slope: f64) -> Tensor<T> {
        let s = T::from_f64v(slope);
        x.map(|a| if a > T::zero() { a } else { a * s })
    }
    fn tanh(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|a| a.tanh())
    }
    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("cannot add {:?} and {:?}", a.shape(), b.shape())));
        }
        let mut out = a.clone();
        out.add_assign(b);
        Ok(out)
    }
    fn shape(&self, x: &Tensor<T>) -> Vec<usize> {
        x.shape().to_vec()
    }
}

const STEM: ConvGeom = ConvGeom::new(7, 1, 3, PadMode::Reflect);
const DOWN: ConvGeom = ConvGeom::new(3, 2, 1, PadMode::Zeros);
const RES: ConvGeom = ConvGeom::new(3, 1, 1, PadMode::Reflect);
const UP: ConvGeom = ConvGeom::new(3, 2, 1, PadMode::Zeros);
const DISC_DOWN: ConvGeom = ConvGeom::new(4, 2, 1, PadMode::Zeros);
const DISC_FLAT: ConvGeom = ConvGeom::new(4, 1, 1, PadMode::Zeros);

fn check_rgb_batch(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 || shape[0] == 0 {
        return Err(Error::Shape(format!("{what} expects [N, 3, H, W], got {shape:?}")));
    }
    Ok(())
}

/// Resnet generator: 7x7 stem, two stride-2 downsamplings, residual blocks,
/// two transposed-conv upsamplings and a 7x7 tanh head.
pub fn generator<T: Float, G: Graph<T>>(g: &mut G, spec: &ModelSpec, prefix: &str, x: &G::V) -> Result<G::V> {
    let shape = g.shape(x);
    check_rgb_batch(&shape, "generator")?;
    if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
        return Err(Error::Shape(format!(
            "generator input {}x{} must have sides divisible by 4",
            shape[2], shape[3]
        )));
    }
    let block = |g: &mut G, x: &G::V, name: &str, geom: ConvGeom| -> Result<G::V> {
        let w = g.param(&format!("{prefix}.{name}.weight"))?;
        let y = g.conv(x, &w, None, geom)?;
        let y = g.inorm(&y);
        Ok(g.relu(&y))
    };
    let mut h = block(g, x, "stem", STEM)?;
    h = block(g, &h, "down1", DOWN)?;
    h = block(g, &h, "down2", DOWN)?;
    for r in 0..spec.res_blocks {
        let w1 = g.param(&format!("{prefix}.res{r}.conv1.weight"))?;
        let w2 = g.param(&format!("{prefix}.res{r}.conv2.weight"))?;
        let y = g.conv(&h, &w1, None, RES)?;
        let y = g.inorm(&y);
        let y = g.relu(&y);
        let y = g.conv(&y, &w2, None, RES)?;
        let y = g.inorm(&y);
        h = g.add(&h, &y)?;
    }
    for name in ["up1", "up2"] {
        let w = g.param(&format!("{prefix}.{name}.weight"))?;
        let y = g.conv_t(&h, &w, UP, 1)?;
        let y = g.inorm(&y);
        h = g.relu(&y);
    }
    let w = g.param(&format!("{prefix}.head.weight"))?;
    let b = g.param(&format!("{prefix}.head.bias"))?;
    let y = g.conv(&h, &w, Some(&b), STEM)?;
    Ok(g.tanh(&y))
}

/// PatchGAN discriminator producing a `[N, 1, gh, gw]` realness grid.
pub fn discriminator<T: Float, G: Graph<T>>(
    g: &mut G,
    spec: &ModelSpec,
    prefix: &str,
    x: &G::V,
) -> Result<G::V> {
    let shape = g.shape(x);
    check_rgb_batch(&shape, "discriminator")?;
    if spec.disc_grid(shape[2], shape[3]).is_none() {
        return Err(Error::Shape(format!(
            "discriminator input {}x{} is below the {}px minimum",
            shape[2],
            shape[3],
            spec.disc_min_input()
        )));
    }
    let w = g.param(&format!("{prefix}.conv0.weight"))?;
    let b = g.param(&format!("{prefix}.conv0.bias"))?;
    let y = g.conv(x, &w, Some(&b), DISC_DOWN)?;
    let mut h = g.lrelu(&y, LRELU_SLOPE);
    for i in 1..=spec.disc_layers {
        let geom = if i < spec.disc_layers { DISC_DOWN } else { DISC_FLAT };
        let w = g.param(&format!("{prefix}.conv{i}.weight"))?;
        let y = g.conv(&h, &w, None, geom)?;
        let y = g.inorm(&y);
        h = g.lrelu(&y, LRELU_SLOPE);
    }
    let w = g.param(&format!("{prefix}.out.weight"))?;
    let b = g.param(&format!("{prefix}.out.bias"))?;
    g.conv(&h, &w, Some(&b), DISC_FLAT)
}

pub fn generator_forward<T: Float>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    generator(&mut Eager { params }, spec, prefix, x)
}

pub fn discriminator_forward<T: Float>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    discriminator(&mut Eager { params }, spec, prefix, x)
}

fn mean<T: Float>(t: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    t.data().iter().map(|v| f(v.to_f64v())).sum::<f64>() / t.len() as f64
}

/// `weight * mean((d - target)^2)` and its gradient with respect to `d`.
pub fn lsgan_term<T: Float>(d: &Tensor<T>, target: f64, weight: f64) -> (f64, Tensor<T>) {
    let n = d.len() as f64;
    let loss = weight * mean(d, |v| (v - target).powi(2));
    let grad = d.map(|v| T::from_f64v(2.0 * weight * (v.to_f64v() - target) / n));
    (loss, grad)
}

/// `(loss_D, loss_G_adv)` of the least-squares objective.
pub fn adversarial_losses<T: Float>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<(f64, f64)> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::Shape(format!(
            "realness grids differ: {:?} vs {:?}",
            d_real.shape(),
            d_fake.shape()
        )));
    }
    let loss_d = 0.5 * mean(d_real, |v| (v - 1.0).powi(2)) + 0.5 * mean(d_fake, |v| v * v);
    let loss_g = mean(d_fake, |v| (v - 1.0).powi(2));
    Ok((loss_d, loss_g))
}

/// `lambda * mean|x - rec|`.
pub fn cycle_loss<T: Float>(x: &Tensor<T>, rec: &Tensor<T>, lambda: f64) -> Result<f64> {
    Ok(cycle_term(x, rec, lambda)?.0)
}

/// Cycle loss and its gradient with respect to `rec`.
pub fn cycle_term<T: Float>(x: &Tensor<T>, rec: &Tensor<T>, lambda: f64) -> Result<(f64, Tensor<T>)> {
    if x.shape() != rec.shape() {
        return Err(Error::Shape(format!(
            "cycle loss shapes differ: {:?} vs {:?}",
            x.shape(),
            rec.shape()
        )));
    }
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(x.shape());
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(x.data()).zip(rec.data()) {
        let d = b.to_f64v() - a.to_f64v();
        loss += d.abs();
        *g = T::from_f64v(lambda * d.signum() * f64::from(d != 0.0) / n);
    }
    Ok((lambda * loss / n, grad))
}

/// Result of one generator objective evaluation.
pub struct GeneratorPass<T> {
    pub loss_g_adv: f64,
    pub loss_cyc: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
    /// `G_rm(marker)`, the discriminator's fake clean input.
    pub fake_clean: Tensor<T>,
    /// `G_add(clean)` in the two-discriminator variant.
    pub fake_marker: Option<Tensor<T>>,
}

/// Generator objective and its gradients with the discriminators frozen.
pub fn generator_pass<T: Float>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    marker: &Tensor<T>,
    clean: Option<&Tensor<T>>,
) -> Result<GeneratorPass<T>> {
    let mut tape = Tape::new();
    let mut seeds = Vec::new();
    let (fake_c, rec_m, d_fake_c);
    {
        let mut gen = TapeGraph { tape: &mut tape, params, trainable: true };
        let x = gen.tape.input(marker.clone());
        fake_c = generator(&mut gen, spec, G_RM, &x)?;
        rec_m = generator(&mut gen, spec, G_ADD, &fake_c)?;
        let mut disc = TapeGraph { tape: gen.tape, params, trainable: false };
        d_fake_c = discriminator(&mut disc, spec, D_CLEAN, &fake_c)?;
    }
    let (mut adv, g) = lsgan_term(tape.value(d_fake_c), 1.0, 1.0);
    seeds.push((d_fake_c, g));
    let (mut cyc, g) = cycle_term(marker, tape.value(rec_m), spec.lambda_cyc)?;
    seeds.push((rec_m, g));

    let mut fake_m = None;
    if spec.full_cyclegan {
        let clean = clean.ok_or_else(|| {
            Error::Input("the two-discriminator objective needs a clean batch".into())
        })?;
        let (fm, rec_c, d_fake_m);
        {
            let mut gen = TapeGraph { tape: &mut tape, params, trainable: true };
            let y = gen.tape.input(clean.clone());
            fm = generator(&mut gen, spec, G_ADD, &y)?;
            rec_c = generator(&mut gen, spec, G_RM, &fm)?;
            let mut disc = TapeGraph { tape: gen.tape, params, trainable: false };
            d_fake_m = discriminator(&mut disc, spec, D_MARKER, &fm)?;
        }
        let (a, g) = lsgan_term(tape.value(d_fake_m), 1.0, 1.0);
        adv += a;
        seeds.push((d_fake_m, g));
        let (c, g) = cycle_term(clean, tape.value(rec_c), spec.lambda_cyc)?;
        cyc += c;
        seeds.push((rec_c, g));
        fake_m = Some(fm);
    }
    let grads = tape.backward(seeds)?.params;
    let fake_marker = fake_m.map(|v| tape.value(v).clone());
    Ok(GeneratorPass {
        loss_g_adv: adv,
        loss_cyc: cyc,
        grads,
        fake_clean: tape.value(fake_c).clone(),
        fake_marker,
    })
}

/// Total generator loss without gradients.
pub fn generator_loss<T: Float>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    marker: &Tensor<T>,
    clean: Option<&Tensor<T>>,
) -> Result<f64> {
    let fake_c = generator_forward(params, spec, G_RM, marker)?;
    let rec_m = generator_forward(params, spec, G_ADD, &fake_c)?;
    let d = discriminator_forward(params, spec, D_CLEAN, &fake_c)?;
    let mut total = lsgan_term(&d, 1.0, 1.0).0 + cycle_loss(marker, &rec_m, spec.lambda_cyc)?;
    if spec.full_cyclegan {
        let clean = clean.ok_or_else(|| Error::Input("missing clean batch".into()))?;
        let fake_m = generator_forward(params, spec, G_ADD, clean)?;
        let rec_c = generator_forward(params, spec, G_RM, &fake_m)?;
        let d = discriminator_forward(params, spec, D_MARKER, &fake_m)?;
        total += lsgan_term(&d, 1.0, 1.0).0 + cycle_loss(clean, &rec_c, spec.lambda_cyc)?;
    }
    Ok(total)
}

/// Discriminator loss `½·mean((D(real)−1)²) + ½·mean(D(fake)²)` and its
/// parameter gradients.
pub fn discriminator_pass<T: Float>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    prefix: &str,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let (dr, df);
    {
        let mut g = TapeGraph { tape: &mut tape, params, trainable: true };
        let r = g.tape.input(real.clone());
        let f = g.tape.input(fake.clone());
        dr = discriminator(&mut g, spec, prefix, &r)?;
        df = discriminator(&mut g, spec, prefix, &f)?;
    }
    let (lr, gr) = lsgan_term(tape.value(dr), 1.0, 0.5);
    let (lf, gf) = lsgan_term(tape.value(df), 0.0, 0.5);
    let grads = tape.backward(vec![(dr, gr), (df, gf)])?.params;
    Ok((lr + lf, grads))
}

pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn from_unit(x: f32) -> u8 {
    ((x as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Stacks equally sized RGB images into a `[N, 3, H, W]` tensor.
pub fn images_to_batch(images: &[&RasterImage]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let plane = w * h;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (i, img) in images.iter().enumerate() {
        if !img.is_rgb() || img.width() != w || img.height() != h {
            return Err(Error::Shape(format!(
                "batch image {i} is {}x{}x{}, expected {w}x{h}x3",
                img.width(),
                img.height(),
                img.channels()
            )));
        }
        let dst = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                dst[c * plane + p] = to_unit(px[c]);
            }
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

pub fn batch_to_images(t: &Tensor<f32>) -> Vec<RasterImage> {
    let (n, c, h, w) = t.dims4();
    assert_eq!(c, 3, "expected an RGB batch");
    let plane = h * w;
    (0..n)
        .map(|i| {
            let src = &t.data()[i * 3 * plane..(i + 1) * 3 * plane];
            let mut data = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    data.push(from_unit(src[c * plane + p]));
                }
            }
            RasterImage::new(w, h, 3, data).expect("dims")
        })
        .collect()
}

/// Parameters of both generators and the discriminator(s) plus their spec.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
    pub version: String,
}

impl ModelBundle {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec, RngStream::new(seed, streams::MODEL_INIT));
        Ok(ModelBundle {
            spec,
            params,
            version: BUNDLE_VERSION.to_string(),
        })
    }

    /// Checks that every tensor named by the spec is present with its shape.
    pub fn from_tensors(spec: ModelSpec, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in spec.param_shapes() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, spec needs {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name, t.clone());
        }
        Ok(ModelBundle {
            spec,
            params,
            version: BUNDLE_VERSION.to_string(),
        })
    }

    pub fn generator_names(&self) -> Vec<String> {
        let mut v = self.params.names_with_prefix(&format!("{G_RM}."));
        v.extend(self.params.names_with_prefix(&format!("{G_ADD}.")));
        v
    }

    pub fn discriminator_names(&self) -> Vec<String> {
        self.spec
            .discriminators()
            .into_iter()
            .flat_map(|p| self.params.names_with_prefix(&format!("{p}.")))
            .collect()
    }

    /// Removes ink from a batch of RGB patches.
    pub fn restore_batch(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        generator_forward(&self.params, &self.spec, G_RM, batch)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "version": self.version,
            "spec": self.spec,
            "extra": extra,
        });
        checkpoint::write(path, BUNDLE_KIND, meta, self.params.as_map())
    }

    /// Loads a bundle file, or the model part of a training checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        Self::from_container(&c)
    }

    pub fn from_container(c: &checkpoint::Container) -> Result<Self> {
        let version = c.meta.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if version != BUNDLE_VERSION {
            return Err(Error::Checkpoint(format!(
                "model version `{version}` is not supported (expected `{BUNDLE_VERSION}`)"
            )));
        }
        let spec: ModelSpec = serde_json::from_value(c.meta.get("spec").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("bad model spec: {e}")))?;
        Self::from_tensors(spec, &c.tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec {
            ngf: 4,
            res_blocks: 1,
            ndf: 4,
            disc_layers: 1,
            ..Default::default()
        }
    }

    fn rand_batch<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
        Tensor::<f64>::randn(shape, 0.5, &mut RngStream::new(seed, 99).rng())
            .map(|v| v.clamp(-1.0, 1.0))
            .cast()
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let spec = ModelSpec {
            ngf: 4,
            res_blocks: 2,
            ..Default::default()
        };
        let p: ParamStore<f32> = init_params(&spec, RngStream::new(1, 3));
        for s in [128, 100] {
            let x = rand_batch::<f32>(&[1, 3, s, s], 2);
            let y = generator_forward(&p, &spec, G_RM, &x).unwrap();
            assert_eq!(y.shape(), &[1, 3, s, s]);
            assert!(y.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        }
        let bad = rand_batch::<f32>(&[1, 3, 30, 32], 2);
        assert!(matches!(generator_forward(&p, &spec, G_RM, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn discriminator_grid_is_hand_traced() {
        // 128 -> 64 -> 32 -> 16 (stride 2, k4 p1), then 15, 14 (stride 1, k4 p1).
        let spec = ModelSpec::default();
        assert_eq!(spec.disc_grid(128, 128), Some((14, 14)));
        assert_eq!(spec.disc_grid(64, 64), Some((6, 6)));
        assert_eq!(spec.disc_min_input(), 24);
        let small = ModelSpec {
            ndf: 4,
            ..Default::default()
        };
        let p: ParamStore<f32> = init_params(&small, RngStream::new(0, 3));
        let x = rand_batch::<f32>(&[3, 3, 128, 128], 4);
        let a = discriminator_forward(&p, &small, D_CLEAN, &x).unwrap();
        let b = discriminator_forward(&p, &small, D_CLEAN, &x).unwrap();
        assert_eq!(a.shape(), &[3, 1, 14, 14]);
        assert_eq!(a, b);
        let tiny_in = rand_batch::<f32>(&[1, 3, 16, 16], 4);
        assert!(matches!(
            discriminator_forward(&p, &small, D_CLEAN, &tiny_in),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn loss_formulas() {
        let ones = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let zeros = Tensor::<f64>::full(&[1, 1, 2, 2], 0.0);
        let half = Tensor::<f64>::full(&[1, 1, 2, 2], 0.5);
        assert_eq!(adversarial_losses(&ones, &zeros).unwrap().0, 0.0);
        assert_eq!(adversarial_losses(&zeros, &ones).unwrap().1, 0.0);
        assert_eq!(adversarial_losses(&half, &half).unwrap(), (0.25, 0.25));
        let a = Tensor::<f64>::full(&[2, 3, 4, 4], 0.25);
        let b = Tensor::<f64>::full(&[2, 3, 4, 4], -0.25);
        assert_eq!(cycle_loss(&a, &a, 10.0).unwrap(), 0.0);
        assert_eq!(cycle_loss(&a, &b, 10.0).unwrap(), 5.0);
        assert_eq!(cycle_loss(&b, &a, 10.0).unwrap(), 5.0);
    }

    #[test]
    fn tape_and_eager_agree() {
        let spec = tiny();
        let p: ParamStore<f64> = init_params(&spec, RngStream::new(5, 3));
        let x = rand_batch::<f64>(&[2, 3, 8, 8], 6);
        let eager = generator_forward(&p, &spec, G_RM, &x).unwrap();
        let pass = generator_pass(&p, &spec, &x, None).unwrap();
        assert_eq!(eager, pass.fake_clean);
        let total = generator_loss(&p, &spec, &x, None).unwrap();
        assert!((total - pass.loss_g_adv - pass.loss_cyc).abs() < 1e-12);
    }

    #[test]
    fn frozen_discriminator_gets_no_generator_gradient() {
        let spec = ModelSpec {
            full_cyclegan: true,
            ..tiny()
        };
        let p: ParamStore<f64> = init_params(&spec, RngStream::new(5, 3));
        let x = rand_batch::<f64>(&[1, 3, 8, 8], 6);
        let pass = generator_pass(&p, &spec, &x, Some(&x)).unwrap();
        assert!(pass.grads.keys().all(|k| k.starts_with("g_")));
        let (_, dg) = discriminator_pass(&p, &spec, D_CLEAN, &x, &pass.fake_clean).unwrap();
        assert!(dg.keys().all(|k| k.starts_with("d_clean.")));
    }

    #[test]
    fn pixel_mapping_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(from_unit(to_unit(v)), v);
        }
        assert_eq!(from_unit(-3.0), 0);
        assert_eq!(from_unit(3.0), 255);
    }

    #[test]
    fn bundle_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let b = ModelBundle::init(tiny(), 7).unwrap();
        let path = dir.path().join("m.ckpt");
        b.save(&path, serde_json::Value::Null).unwrap();
        assert_eq!(ModelBundle::load(&path).unwrap(), b);
        let other = ModelSpec { ngf: 8, ..tiny() };
        assert!(matches!(
            ModelBundle::from_tensors(other, b.params.as_map()),
            Err(Error::Checkpoint(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn grid_follows_stride_schedule(s in 70usize..=256) {
                let spec = ModelSpec::default();
                let mut n = s;
                for _ in 0..3 {
                    n = (n + 2 - 4) / 2 + 1;
                }
                prop_assert_eq!(spec.disc_grid(s, s), Some((n - 2, n - 2)));
            }
        }
    }
}
