//! Marker-vs-clean residual network and the fooling rate it induces on
//! restored patches.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::images_to_batch;
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::tape::NORM_EPS;
use crate::nn::{checkpoint, ConvGeom, PadMode, ParamStore, Tape, Tensor, Var};
use crate::raster::RasterImage;
use crate::rng::{streams, RngStream};
use crate::types::InkCategory;

pub const CLASSIFIER_KIND: &str = "classifier";
pub const CLASSIFIER_VERSION: &str = "inkrestore-classifier/1";
pub const SUPPORTED_DEPTHS: [usize; 4] = [10, 18, 34, 50];
const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub depth: usize,
    /// Channels of the first stage; later stages double it.
    pub width: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Side of the square patches the network is trained and applied on.
    pub input_size: usize,
    /// Share of each class held out for the reported accuracy.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            depth: 18,
            width: 64,
            epochs: 100,
            batch: 128,
            lr: 1e-4,
            input_size: 128,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_DEPTHS.contains(&self.depth) {
            return Err(Error::Config(format!(
                "classifier depth {} is not one of {SUPPORTED_DEPTHS:?}",
                self.depth
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("classifier lr must be positive, got {}", self.lr)));
        }
        if self.width == 0 || self.batch == 0 || self.input_size < 32 {
            return Err(Error::Config(
                "classifier width and batch must be positive and input_size at least 32".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    Basic,
    Bottleneck,
}

struct BlockDef {
    name: String,
    kind: BlockKind,
    in_c: usize,
    mid_c: usize,
    out_c: usize,
    stride: usize,
}

fn blocks(cfg: &ClassifierConfig) -> Vec<BlockDef> {
    let (kind, counts) = match cfg.depth {
        10 => (BlockKind::Basic, [1, 1, 1, 1]),
        18 => (BlockKind::Basic, [2, 2, 2, 2]),
        34 => (BlockKind::Basic, [3, 4, 6, 3]),
        _ => (BlockKind::Bottleneck, [3, 4, 6, 3]),
    };
    let expansion = if kind == BlockKind::Bottleneck { 4 } else { 1 };
    let mut in_c = cfg.width;
    let mut out = Vec::new();
    for (stage, &count) in counts.iter().enumerate() {
        let mid_c = cfg.width << stage;
        for b in 0..count {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            out.push(BlockDef {
                name: format!("layer{}.{b}", stage + 1),
                kind,
                in_c,
                mid_c,
                out_c: mid_c * expansion,
                stride,
            });
            in_c = mid_c * expansion;
        }
    }
    out
}

fn feature_dim(cfg: &ClassifierConfig) -> usize {
    blocks(cfg).last().map(|b| b.out_c).unwrap_or(cfg.width)
}

fn init_params(cfg: &ClassifierConfig) -> ParamStore<f32> {
    let mut rng = RngStream::new(cfg.seed, streams::CLASSIFIER).rng();
    let mut p = ParamStore::new();
    let mut conv = |p: &mut ParamStore<f32>, name: &str, o: usize, c: usize, k: usize| {
        let std = (2.0 / (c * k * k) as f64).sqrt();
        p.init_normal(format!("{name}.weight"), &[o, c, k, k], std, &mut rng);
        p.insert(format!("{name}.bn.gamma"), Tensor::full(&[o], 1.0));
        p.insert(format!("{name}.bn.beta"), Tensor::zeros(&[o]));
        p.insert(format!("{name}.bn.running_mean"), Tensor::zeros(&[o]));
        p.insert(format!("{name}.bn.running_var"), Tensor::full(&[o], 1.0));
    };
    conv(&mut p, "stem", cfg.width, 3, 7);
    for b in blocks(cfg) {
        match b.kind {
            BlockKind::Basic => {
                conv(&mut p, &format!("{}.conv1", b.name), b.mid_c, b.in_c, 3);
                conv(&mut p, &format!("{}.conv2", b.name), b.out_c, b.mid_c, 3);
            }
            BlockKind::Bottleneck => {
                conv(&mut p, &format!("{}.conv1", b.name), b.mid_c, b.in_c, 1);
                conv(&mut p, &format!("{}.conv2", b.name), b.mid_c, b.mid_c, 3);
                conv(&mut p, &format!("{}.conv3", b.name), b.out_c, b.mid_c, 1);
            }
        }
        if b.stride != 1 || b.in_c != b.out_c {
            conv(&mut p, &format!("{}.down", b.name), b.out_c, b.in_c, 1);
        }
    }
    let f = feature_dim(cfg);
    p.init_normal("fc.weight".into(), &[1, f], (1.0 / f as f64).sqrt(), &mut rng);
    p.insert("fc.bias", Tensor::zeros(&[1]));
    p
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Batch statistics observed during a training forward pass.
type BatchStats = Vec<(String, Vec<f32>, Vec<f32>)>;

struct Forward<'a> {
    tape: Tape<f32>,
    params: &'a ParamStore<f32>,
    train: bool,
    stats: BatchStats,
}

impl Forward<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        Ok(self.tape.param(name, t, self.train))
    }

    fn conv_bn(&mut self, name: &str, x: Var, stride: usize, relu: bool) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let k = self.tape.value(w).shape()[2];
        let y = self
            .tape
            .conv2d(x, w, None, ConvGeom::new(k, stride, k / 2, PadMode::Zeros))?;
        let bn = format!("{name}.bn");
        let y = if self.train {
            let gamma = self.param(&format!("{bn}.gamma"))?;
            let beta = self.param(&format!("{bn}.beta"))?;
            let (y, mean, var) = self.tape.batch_norm_train(y, gamma, beta);
            self.stats.push((bn, mean, var));
            y
        } else {
            let get = |s: &str| self.params.get(&format!("{bn}.{s}")).map(|t| t.data().to_vec());
            let (gamma, beta) = (get("gamma")?, get("beta")?);
            let (mean, var) = (get("running_mean")?, get("running_var")?);
            let scale: Vec<f32> = gamma
                .iter()
                .zip(&var)
                .map(|(g, v)| g / (v + NORM_EPS as f32).sqrt())
                .collect();
            let shift: Vec<f32> = beta
                .iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((b, m), s)| b - m * s)
                .collect();
            self.tape.channel_affine(y, scale, &shift)
        };
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn block(&mut self, b: &BlockDef, x: Var) -> Result<Var> {
        let n = &b.name;
        let y = match b.kind {
            BlockKind::Basic => {
                let y = self.conv_bn(&format!("{n}.conv1"), x, b.stride, true)?;
                self.conv_bn(&format!("{n}.conv2"), y, 1, false)?
            }
            BlockKind::Bottleneck => {
                let y = self.conv_bn(&format!("{n}.conv1"), x, 1, true)?;
                let y = self.conv_bn(&format!("{n}.conv2"), y, b.stride, true)?;
                self.conv_bn(&format!("{n}.conv3"), y, 1, false)?
            }
        };
        let skip = if b.stride != 1 || b.in_c != b.out_c {
            self.conv_bn(&format!("{n}.down"), x, b.stride, false)?
        } else {
            x
        };
        let s = self.tape.add(y, skip)?;
        Ok(self.tape.relu(s))
    }

    /// Marker logits, `[N, 1]`.
    fn run(&mut self, cfg: &ClassifierConfig, x: Tensor<f32>) -> Result<Var> {
        let x = self.tape.input(x);
        let mut h = self.conv_bn("stem", x, 2, true)?;
        h = self.tape.max_pool(h, 3, 2, 1)?;
        for b in blocks(cfg) {
            h = self.block(&b, h)?;
        }
        let pooled = self.tape.global_avg_pool(h);
        let w = self.param("fc.weight")?;
        let bias = self.param("fc.bias")?;
        self.tape.linear(pooled, w, bias)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Anything that scores patches for marker ink.
pub trait PatchClassifier: Sync {
    /// Probability that each patch carries marker ink.
    fn marker_probability(&self, patches: &[RasterImage]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamStore<f32>,
}

impl Classifier {
    pub fn init(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        Ok(Classifier { config, params })
    }

    fn check_input(&self, patches: &[RasterImage]) -> Result<()> {
        let s = self.config.input_size;
        match patches
            .iter()
            .find(|p| p.width() != s || p.height() != s || !p.is_rgb())
        {
            Some(p) => Err(Error::Input(format!(
                "classifier expects {s}x{s} RGB patches, got {}x{} with {} channel(s)",
                p.width(),
                p.height(),
                p.channels()
            ))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "version": CLASSIFIER_VERSION, "config": self.config });
        checkpoint::write(path, CLASSIFIER_KIND, meta, self.params.as_map())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        let version = c.meta.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if c.kind != CLASSIFIER_KIND || version != CLASSIFIER_VERSION {
            return Err(Error::Checkpoint(format!(
                "{} is not a classifier checkpoint ({} / {version})",
                path.display(),
                c.kind
            )));
        }
        let config: ClassifierConfig =
            serde_json::from_value(c.meta.get("config").cloned().unwrap_or_default())
                .map_err(|e| Error::Checkpoint(format!("bad classifier config: {e}")))?;
        config.validate()?;
        let params = ParamStore::from_map(c.tensors);
        params.check_same_layout(&init_params(&config))?;
        Ok(Classifier { config, params })
    }
}

impl PatchClassifier for Classifier {
    fn marker_probability(&self, patches: &[RasterImage]) -> Result<Vec<f64>> {
        self.check_input(patches)?;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(self.config.batch) {
            let refs: Vec<&RasterImage> = chunk.iter().collect();
            let mut f = Forward {
                tape: Tape::new(),
                params: &self.params,
                train: false,
                stats: Vec::new(),
            };
            let logits = f.run(&self.config, images_to_batch(&refs)?)?;
            out.extend(f.tape.value(logits).data().iter().map(|&z| sigmoid(z as f64)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    /// Accuracy on the held-out split; `None` when nothing was held out.
    pub holdout_accuracy: Option<f64>,
    pub holdout_size: usize,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Binary cross-entropy on logits and its gradient with respect to them.
fn bce(logits: &[f32], labels: &[f32]) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let z = z as f64;
            // log(1 + e^z) - y z, stable for both signs.
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y as f64 * z;
            ((sigmoid(z) - y as f64) / n) as f32
        })
        .collect();
    (loss / n, grad)
}

fn train_step(
    cfg: &ClassifierConfig,
    params: &mut ParamStore<f32>,
    opt: &mut Optimizer,
    images: &[&RasterImage],
    labels: &[f32],
) -> Result<f64> {
    let mut f = Forward {
        tape: Tape::new(),
        params,
        train: true,
        stats: Vec::new(),
    };
    let logits = f.run(cfg, images_to_batch(images)?)?;
    let (loss, grad) = bce(f.tape.value(logits).data(), labels);
    let seed = Tensor::from_vec(&[labels.len(), 1], grad)?;
    let grads = f.tape.backward(vec![(logits, seed)])?;
    let stats = std::mem::take(&mut f.stats);
    drop(f);
    opt.step(params, &grads.params);
    for (bn, mean, var) in stats {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let r = params
                .get_mut(&format!("{bn}.{suffix}"))
                .ok_or_else(|| Error::Lookup(format!("{bn}.{suffix}")))?;
            for (a, b) in r.data_mut().iter_mut().zip(batch) {
                *a = (1.0 - BN_MOMENTUM) * *a + BN_MOMENTUM * b;
            }
        }
    }
    Ok(loss)
}

/// Trains a marker (1) vs clean (0) classifier. A stratified share of each
/// pool is held out and scored after training.
pub fn train_classifier(
    marker: &[RasterImage],
    clean: &[RasterImage],
    cfg: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if marker.is_empty() || clean.is_empty() {
        return Err(Error::Data(format!(
            "classifier needs both classes (marker {}, clean {})",
            marker.len(),
            clean.len()
        )));
    }
    let mut classifier = Classifier::init(cfg.clone())?;
    classifier.check_input(marker)?;
    classifier.check_input(clean)?;

    let stream = RngStream::new(cfg.seed, streams::CLASSIFIER);
    let mut split_rng = stream.child(0).rng();
    let mut train_set: Vec<(&RasterImage, f32)> = Vec::new();
    let mut holdout: Vec<(&RasterImage, f32)> = Vec::new();
    for (pool, label) in [(marker, 1.0f32), (clean, 0.0)] {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut split_rng);
        let held = if pool.len() >= 2 {
            ((pool.len() as f64 * cfg.holdout_fraction).round() as usize).min(pool.len() - 1)
        } else {
            0
        };
        for (k, &i) in idx.iter().enumerate() {
            if k < held {
                holdout.push((&pool[i], label));
            } else {
                train_set.push((&pool[i], label));
            }
        }
    }

    let trainable: Vec<String> = classifier
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !is_running_stat(n))
        .collect();
    let adam = OptimizerKind::Adam {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
    };
    let mut opt = Optimizer::new(adam, &classifier.params, trainable);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream.child(1 + epoch as u64).rng());
        let (mut total, mut batches) = (0.0, 0usize);
        // Batch statistics are meaningless for a single sample; such a tail is dropped.
        for chunk in order.chunks(cfg.batch).filter(|c| c.len() >= 2) {
            let images: Vec<&RasterImage> = chunk.iter().map(|&i| train_set[i].0).collect();
            let labels: Vec<f32> = chunk.iter().map(|&i| train_set[i].1).collect();
            let loss = train_step(cfg, &mut classifier.params, &mut opt, &images, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: opt.steps_taken(),
                    detail: "classifier loss".into(),
                });
            }
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { f64::NAN };
        tracing::info!(epoch, loss = mean, "classifier epoch");
        epoch_loss.push(mean);
    }

    let holdout_accuracy = if holdout.is_empty() {
        None
    } else {
        let images: Vec<RasterImage> = holdout.iter().map(|(i, _)| (*i).clone()).collect();
        let p = classifier.marker_probability(&images)?;
        let correct = p
            .iter()
            .zip(&holdout)
            .filter(|(&p, (_, y))| (p >= 0.5) == (*y == 1.0))
            .count();
        Some(correct as f64 / holdout.len() as f64)
    };
    Ok(TrainedClassifier {
        classifier,
        holdout_accuracy,
        holdout_size: holdout.len(),
        epoch_loss,
    })
}

#[derive(Clone, Debug)]
pub struct ScoredPatch {
    pub id: String,
    pub image: RasterImage,
    pub category: Option<InkCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchVerdict {
    pub id: String,
    pub category: Option<InkCategory>,
    pub p_marker: f64,
    pub classified_clean: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCount {
    pub clean: usize,
    pub total: usize,
    pub rate: f64,
}

impl RateCount {
    fn from_log<'a>(log: impl Iterator<Item = &'a PatchVerdict>) -> Self {
        let (mut clean, mut total) = (0, 0);
        for v in log {
            total += 1;
            clean += v.classified_clean as usize;
        }
        RateCount {
            clean,
            total,
            rate: if total > 0 { clean as f64 / total as f64 } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoolingReport {
    pub overall: RateCount,
    pub per_category: BTreeMap<InkCategory, RateCount>,
    pub log: Vec<PatchVerdict>,
}

impl FoolingReport {
    /// Rebuilds the rates from the per-patch log.
    pub fn from_log(log: Vec<PatchVerdict>) -> Self {
        let overall = RateCount::from_log(log.iter());
        let mut per_category = BTreeMap::new();
        for cat in InkCategory::ALL {
            let r = RateCount::from_log(log.iter().filter(|v| v.category == Some(cat)));
            if r.total > 0 {
                per_category.insert(cat, r);
            }
        }
        FoolingReport {
            overall,
            per_category,
            log,
        }
    }

    pub fn rate(&self) -> f64 {
        self.overall.rate
    }
}

/// Share of (restored) patches the classifier calls clean.
pub fn fooling_rate(classifier: &dyn PatchClassifier, patches: &[ScoredPatch]) -> Result<FoolingReport> {
    if patches.is_empty() {
        return Err(Error::Input("fooling rate needs at least one patch".into()));
    }
    let images: Vec<RasterImage> = patches.iter().map(|p| p.image.clone()).collect();
    let probs = classifier.marker_probability(&images)?;
    if probs.len() != patches.len() {
        return Err(Error::Shape(format!(
            "classifier returned {} scores for {} patches",
            probs.len(),
            patches.len()
        )));
    }
    let log = patches
        .iter()
        .zip(probs)
        .map(|(p, prob)| PatchVerdict {
            id: p.id.clone(),
            category: p.category,
            p_marker: prob,
            classified_clean: prob < 0.5,
        })
        .collect();
    Ok(FoolingReport::from_log(log))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64);
    impl PatchClassifier for Constant {
        fn marker_probability(&self, p: &[RasterImage]) -> Result<Vec<f64>> {
            Ok(vec![self.0; p.len()])
        }
    }

    fn patches(n: usize) -> Vec<ScoredPatch> {
        (0..n)
            .map(|i| ScoredPatch {
                id: format!("p{i}"),
                image: RasterImage::filled(32, 32, &[200, 150, 190]),
                category: Some(InkCategory::ALL[i % 4]),
            })
            .collect()
    }

    #[test]
    fn degenerate_classifiers_bound_the_rate() {
        assert_eq!(fooling_rate(&Constant(0.0), &patches(8)).unwrap().rate(), 1.0);
        let r = fooling_rate(&Constant(1.0), &patches(8)).unwrap();
        assert_eq!(r.rate(), 0.0);
        assert_eq!(r.per_category[&InkCategory::Green].total, 2);
        assert!(matches!(fooling_rate(&Constant(0.0), &[]), Err(Error::Input(_))));
    }

    #[test]
    fn report_is_recomputable_from_log() {
        let mut r = fooling_rate(&Constant(0.2), &patches(6)).unwrap();
        r.log[1].classified_clean = false;
        let again = FoolingReport::from_log(r.log.clone());
        assert_eq!(again.overall.clean, 5);
        assert!((again.rate() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn block_layouts() {
        let cfg = |depth| ClassifierConfig {
            depth,
            width: 4,
            ..Default::default()
        };
        assert_eq!(blocks(&cfg(10)).len(), 4);
        assert_eq!(blocks(&cfg(18)).len(), 8);
        assert_eq!(blocks(&cfg(34)).len(), 16);
        assert_eq!(blocks(&cfg(50)).len(), 16);
        assert_eq!(feature_dim(&cfg(50)), 4 * 8 * 4);
        assert!(Classifier::init(cfg(20)).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let z = [0.3f32, -1.2, 2.0];
        let y = [1.0f32, 0.0, 0.0];
        let (_, g) = bce(&z, &y);
        for i in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[i] += 1e-3;
            zm[i] -= 1e-3;
            let fd = (bce(&zp, &y).0 - bce(&zm, &y).0) / 2e-3;
            assert!((fd - g[i] as f64).abs() < 1e-4, "{fd} vs {}", g[i]);
        }
    }

    fn toy(n: usize, color: [u8; 3], seed: u8) -> Vec<RasterImage> {
        (0..n)
            .map(|i| {
                let mut img = RasterImage::filled(32, 32, &color);
                let v = (i as u8).wrapping_mul(7).wrapping_add(seed) % 20;
                img.set_pixel(i % 32, 5, &[v, v, v]);
                img
            })
            .collect()
    }

    fn toy_cfg() -> ClassifierConfig {
        ClassifierConfig {
            depth: 10,
            width: 4,
            epochs: 8,
            batch: 8,
            lr: 1e-2,
            input_size: 32,
            holdout_fraction: 0.25,
            seed: 3,
        }
    }

    #[test]
    fn separable_toy_corpus_is_learned_reproducibly() {
        let marker = toy(24, [20, 110, 60], 1);
        let clean = toy(24, [230, 170, 210], 2);
        let a = train_classifier(&marker, &clean, &toy_cfg()).unwrap();
        assert!(a.holdout_accuracy.unwrap() >= 0.99, "{a:?}");
        let b = train_classifier(&marker, &clean, &toy_cfg()).unwrap();
        assert_eq!(a.holdout_accuracy, b.holdout_accuracy);
        assert_eq!(a.epoch_loss, b.epoch_loss);
    }

    #[test]
    fn single_class_is_a_data_error() {
        let marker = toy(4, [20, 110, 60], 1);
        assert!(matches!(
            train_classifier(&marker, &[], &toy_cfg()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let c = Classifier::init(toy_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.ckpt");
        c.save(&path).unwrap();
        let back = Classifier::load(&path).unwrap();
        let img = toy(3, [100, 100, 100], 0);
        assert_eq!(
            c.marker_probability(&img).unwrap(),
            back.marker_probability(&img).unwrap()
        );
    }
}
