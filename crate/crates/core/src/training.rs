//! Adversarial training loop: Adam on the generators, plain SGD on the
//! discriminator(s), unpaired batches, loss telemetry and resumable
//! checkpoints.
//!
//! Batch composition and augmentation are pure functions of the step index,
//! so a resumed run replays exactly what an uninterrupted run would have done.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelBundle, ModelSpec, BUNDLE_VERSION};
use crate::nn::checkpoint;
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::Tensor;
use crate::raster::{load_raster, RasterImage};
use crate::rng::{streams, RngStream};

pub const STATE_KIND: &str = "training_state";
pub const LOSS_LOG: &str = "losses.csv";
pub const FINAL_MODEL: &str = "model.ckpt";
pub const FINAL_STATE: &str = "final.ckpt";
const GEN_OPT: &str = "opt_gen";
const DISC_OPT: &str = "opt_disc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gen_optimizer: OptimizerKind,
    pub disc_optimizer: OptimizerKind,
    /// Random horizontal/vertical flips.
    pub augment_flips: bool,
    pub seed: u64,
    /// Write a training-state checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Run every kernel on one thread.
    pub serial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 64,
            gen_optimizer: OptimizerKind::Adam {
                lr: 2e-4,
                beta1: 0.5,
                beta2: 0.999,
            },
            disc_optimizer: OptimizerKind::Sgd { lr: 1e-4 },
            augment_flips: true,
            seed: 0,
            checkpoint_every: 10,
            max_steps: None,
            serial: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("training.epochs must be >= 1".into()));
        }
        self.gen_optimizer.validate()?;
        self.disc_optimizer.validate()
    }

    /// Fields that must agree between a checkpoint and a resumed run.
    fn replay_key(&self) -> (usize, OptimizerKind, OptimizerKind, bool, u64) {
        (
            self.batch_size,
            self.gen_optimizer,
            self.disc_optimizer,
            self.augment_flips,
            self.seed,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
    #[serde(rename = "loss_G_adv")]
    pub loss_g_adv: f64,
    pub loss_cyc: f64,
}

impl LossRow {
    fn finite(&self) -> bool {
        self.loss_d.is_finite() && self.loss_g_adv.is_finite() && self.loss_cyc.is_finite()
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

const LOG_HEADER: &str = "step,loss_D,loss_G_adv,loss_cyc\n";

fn log_line(r: &LossRow) -> String {
    format!("{},{},{},{}\n", r.step, r.loss_d, r.loss_g_adv, r.loss_cyc)
}

fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    rows.iter().for_each(|r| text.push_str(&log_line(r)));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Unpaired marker and clean patch pools of one common patch size.
pub struct Pools {
    pub marker: Vec<RasterImage>,
    pub clean: Vec<RasterImage>,
}

impl Pools {
    pub fn validate(&self) -> Result<(usize, usize)> {
        if self.marker.is_empty() {
            return Err(Error::Data("marker patch pool is empty".into()));
        }
        if self.clean.is_empty() {
            return Err(Error::Data("clean patch pool is empty".into()));
        }
        let (w, h) = (self.marker[0].width(), self.marker[0].height());
        if let Some(bad) = self
            .marker
            .iter()
            .chain(&self.clean)
            .find(|p| p.width() != w || p.height() != h || !p.is_rgb())
        {
            return Err(Error::Data(format!(
                "patch pools mix sizes: {}x{}x{} vs {w}x{h}x3",
                bad.width(),
                bad.height(),
                bad.channels()
            )));
        }
        Ok((w, h))
    }

    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        self.marker.len().max(self.clean.len()).div_ceil(batch)
    }
}

/// Reads every `.png` in `dir`, sorted by file name.
pub fn load_patch_dir(dir: &Path) -> Result<Vec<RasterImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_raster(p)).collect()
}

/// Indices drawn for one pool at `step` (0-based): pool items are consumed as
/// an endless sequence of seeded permutations.
fn pool_indices(n: usize, start: usize, count: usize, stream: RngStream) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for k in start..start + count {
        let round = k / n;
        if cached.as_ref().map(|c| c.0) != Some(round) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream.child(round as u64).rng());
            cached = Some((round, perm));
        }
        out.push(cached.as_ref().expect("filled").1[k % n]);
    }
    out
}

struct Schedule {
    steps_per_epoch: usize,
    epoch_len: usize,
    batch: usize,
}

impl Schedule {
    /// `(items consumed before this step, batch size of this step)`.
    fn slot(&self, step: usize) -> (usize, usize) {
        let (e, b) = (step / self.steps_per_epoch, step % self.steps_per_epoch);
        let start = b * self.batch;
        let len = self.batch.min(self.epoch_len - start);
        (e * self.epoch_len + start, len)
    }
}

fn flip(img: &RasterImage, h: bool, v: bool) -> RasterImage {
    if !h && !v {
        return img.clone();
    }
    let (w, ht) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..ht {
        for x in 0..w {
            let sx = if h { w - 1 - x } else { x };
            let sy = if v { ht - 1 - y } else { y };
            out.set_pixel(x, y, img.pixel(sx, sy));
        }
    }
    out
}

fn assemble(pool: &[RasterImage], idx: &[usize], flips: Option<&mut dyn rand::RngCore>) -> Result<Tensor<f32>> {
    let imgs: Vec<RasterImage> = match flips {
        Some(rng) => idx
            .iter()
            .map(|&i| {
                let (h, v) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
                flip(&pool[i], h, v)
            })
            .collect(),
        None => idx.iter().map(|&i| pool[i].clone()).collect(),
    };
    model::images_to_batch(&imgs.iter().collect::<Vec<_>>())
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<LossRow>,
    pub steps_done: usize,
    pub checkpoints: Vec<PathBuf>,
}

struct Trainer<'a> {
    bundle: ModelBundle,
    gen_opt: Optimizer,
    disc_opt: Optimizer,
    cfg: TrainConfig,
    pools: &'a Pools,
    sched: Schedule,
    total_steps: usize,
    out: Option<&'a Path>,
    log: Vec<LossRow>,
    checkpoints: Vec<PathBuf>,
}

fn state_meta(bundle: &ModelBundle, cfg: &TrainConfig, step: usize) -> serde_json::Value {
    serde_json::json!({
        "version": BUNDLE_VERSION,
        "spec": bundle.spec,
        "train": cfg,
        "step": step,
        "gen_lr": cfg.gen_optimizer.lr(),
        "disc_lr": cfg.disc_optimizer.lr(),
    })
}

impl Trainer<'_> {
    fn step(&self) -> usize {
        self.gen_opt.steps_taken() as usize
    }

    fn save_state(&self, path: &Path) -> Result<()> {
        let mut tensors = self.bundle.params.as_map().clone();
        self.gen_opt.export_state(GEN_OPT, &mut tensors);
        self.disc_opt.export_state(DISC_OPT, &mut tensors);
        checkpoint::write(path, STATE_KIND, state_meta(&self.bundle, &self.cfg, self.step()), &tensors)
    }

    fn run_step(&mut self) -> Result<LossRow> {
        let step = self.step();
        let (start, len) = self.sched.slot(step);
        let seed = self.cfg.seed;
        let m_idx = pool_indices(
            self.pools.marker.len(),
            start,
            len,
            RngStream::new(seed, streams::TRAIN_SHUFFLE).child(0),
        );
        let c_idx = pool_indices(
            self.pools.clean.len(),
            start,
            len,
            RngStream::new(seed, streams::TRAIN_SHUFFLE).child(1),
        );
        let mut aug = RngStream::new(seed, streams::TRAIN_AUGMENT).child(step as u64).rng();
        let flips = self.cfg.augment_flips;
        let marker = assemble(&self.pools.marker, &m_idx, flips.then_some(&mut aug as &mut dyn rand::RngCore))?;
        let clean = assemble(&self.pools.clean, &c_idx, flips.then_some(&mut aug as &mut dyn rand::RngCore))?;

        let spec = self.bundle.spec.clone();
        let gp = model::generator_pass(&self.bundle.params, &spec, &marker, Some(&clean))?;
        let (mut loss_d, dg) =
            model::discriminator_pass(&self.bundle.params, &spec, model::D_CLEAN, &clean, &gp.fake_clean)?;
        let mut disc_grads = dg;
        if let Some(fm) = &gp.fake_marker {
            let (l, g) = model::discriminator_pass(&self.bundle.params, &spec, model::D_MARKER, &marker, fm)?;
            loss_d += l;
            disc_grads.extend(g);
        }
        let row = LossRow {
            step: step + 1,
            loss_d,
            loss_g_adv: gp.loss_g_adv,
            loss_cyc: gp.loss_cyc,
        };
        if !row.finite() {
            if let Some(out) = self.out {
                let p = out.join(format!("diagnostic_step{:06}.ckpt", step + 1));
                self.save_state(&p)?;
            }
            return Err(Error::NonFinite {
                step: (step + 1) as u64,
                detail: format!(
                    "loss_D={} loss_G_adv={} loss_cyc={}",
                    row.loss_d, row.loss_g_adv, row.loss_cyc
                ),
            });
        }
        self.gen_opt.step(&mut self.bundle.params, &gp.grads);
        self.disc_opt.step(&mut self.bundle.params, &disc_grads);
        Ok(row)
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let mut log_file = match self.out {
            Some(out) => {
                let p = out.join(LOSS_LOG);
                write_loss_log(&p, &self.log)?;
                Some((
                    fs::OpenOptions::new().append(true).open(&p).map_err(|e| Error::io(&p, e))?,
                    p,
                ))
            }
            None => None,
        };
        while self.step() < self.total_steps {
            let row = self.run_step()?;
            if let Some((f, p)) = log_file.as_mut() {
                f.write_all(log_line(&row).as_bytes())
                    .map_err(|e| Error::io(&*p, e))?;
            }
            if row.step % 50 == 0 || row.step == self.total_steps {
                tracing::info!(
                    step = row.step,
                    total = self.total_steps,
                    loss_d = row.loss_d,
                    loss_g_adv = row.loss_g_adv,
                    loss_cyc = row.loss_cyc,
                    "training"
                );
            }
            self.log.push(row);
            let spe = self.sched.steps_per_epoch;
            if let (Some(out), true) = (self.out, self.cfg.checkpoint_every > 0) {
                if row.step % spe == 0 && (row.step / spe) % self.cfg.checkpoint_every == 0 {
                    let p = out.join(format!("checkpoint_epoch{:04}.ckpt", row.step / spe));
                    self.save_state(&p)?;
                    self.checkpoints.push(p);
                }
            }
        }
        if let Some(out) = self.out {
            let p = out.join(FINAL_STATE);
            self.save_state(&p)?;
            self.checkpoints.push(p);
            let extra = serde_json::json!({ "train": self.cfg, "step": self.step() });
            self.bundle.save(&out.join(FINAL_MODEL), extra)?;
        }
        let steps_done = self.step();
        Ok(TrainOutcome {
            bundle: self.bundle,
            log: self.log,
            steps_done,
            checkpoints: self.checkpoints,
        })
    }
}

fn build_trainer<'a>(
    bundle: ModelBundle,
    cfg: &TrainConfig,
    pools: &'a Pools,
    out: Option<&'a Path>,
) -> Result<Trainer<'a>> {
    cfg.validate()?;
    let (w, h) = pools.validate()?;
    if w % 4 != 0 || h % 4 != 0 {
        return Err(Error::Data(format!("patch size {w}x{h} must be divisible by 4")));
    }
    if bundle.spec.disc_grid(h, w).is_none() {
        return Err(Error::Data(format!(
            "patches of {w}x{h} are below the discriminator's {}px minimum",
            bundle.spec.disc_min_input()
        )));
    }
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let gen_opt = Optimizer::new(cfg.gen_optimizer, &bundle.params, bundle.generator_names());
    let disc_opt = Optimizer::new(cfg.disc_optimizer, &bundle.params, bundle.discriminator_names());
    debug_assert!(gen_opt.owned().is_disjoint(disc_opt.owned()));
    let spe = pools.steps_per_epoch(cfg.batch_size);
    let mut total = cfg.epochs * spe;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    Ok(Trainer {
        bundle,
        gen_opt,
        disc_opt,
        cfg: cfg.clone(),
        pools,
        sched: Schedule {
            steps_per_epoch: spe,
            epoch_len: pools.marker.len().max(pools.clean.len()),
            batch: cfg.batch_size,
        },
        total_steps: total,
        out,
        log: Vec::new(),
        checkpoints: Vec::new(),
    })
}

fn in_mode<R: Send>(serial: bool, f: impl FnOnce() -> R + Send) -> R {
    if serial {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    } else {
        f()
    }
}

/// Trains from a fresh initialization. With `out`, writes `losses.csv`,
/// periodic checkpoints, `final.ckpt` and `model.ckpt` there.
pub fn train(spec: &ModelSpec, cfg: &TrainConfig, pools: &Pools, out: Option<&Path>) -> Result<TrainOutcome> {
    tracing::info!(seed = cfg.seed, "training seed");
    let bundle = ModelBundle::init(spec.clone(), cfg.seed)?;
    let trainer = build_trainer(bundle, cfg, pools, out)?;
    in_mode(cfg.serial, move || trainer.run())
}

/// Continues from a training-state checkpoint. The architecture and the
/// batch/optimizer/seed settings must match the checkpoint; `epochs` and
/// `max_steps` may be extended. An existing `losses.csv` in `out` is kept up
/// to the checkpoint's step.
pub fn resume(
    state: &Path,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    pools: &Pools,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let c = checkpoint::read(state)?;
    if c.kind != STATE_KIND {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}`, not a training state",
            state.display(),
            c.kind
        )));
    }
    let bundle = ModelBundle::from_container(&c)?;
    if &bundle.spec != spec {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} differs from requested {:?}",
            bundle.spec, spec
        )));
    }
    let saved: TrainConfig = serde_json::from_value(c.meta["train"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad training config in checkpoint: {e}")))?;
    if saved.replay_key() != cfg.replay_key() {
        return Err(Error::Checkpoint(
            "batch size, optimizers, augmentation and seed must match the checkpoint".into(),
        ));
    }
    let step = c.meta["step"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks a step counter".into()))?;
    let mut trainer = build_trainer(bundle, cfg, pools, out)?;
    trainer.gen_opt.import_state(GEN_OPT, step, &c.tensors)?;
    trainer.disc_opt.import_state(DISC_OPT, step, &c.tensors)?;
    if let Some(out) = out {
        let p = out.join(LOSS_LOG);
        if p.exists() {
            trainer.log = read_loss_log(&p)?
                .into_iter()
                .filter(|r| r.step as u64 <= step)
                .collect();
        }
    }
    tracing::info!(seed = cfg.seed, step, "resuming training");
    in_mode(cfg.serial, move || trainer.run())
}

/// Learning rates `(generator, discriminator)` recorded in a training state.
pub fn checkpoint_learning_rates(state: &Path) -> Result<(f64, f64)> {
    let c = checkpoint::read(state)?;
    match (c.meta["gen_lr"].as_f64(), c.meta["disc_lr"].as_f64()) {
        (Some(g), Some(d)) => Ok((g, d)),
        _ => Err(Error::Checkpoint("checkpoint lacks learning rates".into())),
    }
}
