//! Patch manifests: labeling, quota sampling with the background cap, JSONL
//! serialization and materialization to per-label directories.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::rgb_to_hsv;
use crate::error::{Error, Result};
use crate::mask::MarkerMask;
use crate::raster::{load_raster, save_raster, RasterImage};
use crate::rng::{streams, RngStream};
use crate::types::{InkCategory, PatchLabel, Split};

pub const TISSUE_SAT_MIN: f64 = 0.08;
pub const TISSUE_VALUE_MAX: f64 = 0.88;

/// Fraction of pixels that are not white glass.
pub fn tissue_fraction(patch: &RasterImage) -> f64 {
    let n = patch.width() * patch.height();
    if n == 0 {
        return 0.0;
    }
    let hits = patch
        .pixels()
        .filter(|p| {
            let (r, g, b) = if p.len() == 3 { (p[0], p[1], p[2]) } else { (p[0], p[0], p[0]) };
            let (_, s, v) = rgb_to_hsv(r, g, b);
            s >= TISSUE_SAT_MIN || v <= TISSUE_VALUE_MAX
        })
        .count();
    hits as f64 / n as f64
}

/// Labels the `size x size` footprint at `(x, y)`.
pub fn classify_patch(
    slide: &RasterImage,
    mask: &MarkerMask,
    x: usize,
    y: usize,
    size: usize,
    tau: f64,
) -> Result<PatchLabel> {
    let patch = slide.crop(x, y, size, size)?;
    if mask.footprint_has_ink(x, y, size, size) {
        return Ok(PatchLabel::Marker);
    }
    Ok(clean_label(&patch, tau))
}

fn clean_label(patch: &RasterImage, tau: f64) -> PatchLabel {
    if tissue_fraction(patch) >= tau {
        PatchLabel::CleanTissue
    } else {
        PatchLabel::CleanBackground
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub total_patches: usize,
    pub marker_fraction: f64,
    /// Upper bound on background patches as a fraction of clean patches.
    pub background_cap: f64,
    pub tissue_threshold: f64,
    /// Allowed marker/clean imbalance as a fraction of the total.
    pub balance_tolerance: f64,
    /// Rejection-sampling budget per requested record.
    pub attempts_per_record: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: 128,
            total_patches: 250_000,
            marker_fraction: 0.5,
            background_cap: 0.25,
            tissue_threshold: 0.05,
            balance_tolerance: 0.01,
            attempts_per_record: 1000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("sampler.patch_size must be >= 1".into()));
        }
        if !(self.marker_fraction > 0.0 && self.marker_fraction < 1.0) {
            return Err(Error::Config(format!(
                "sampler.marker_fraction {} must lie in (0, 1)",
                self.marker_fraction
            )));
        }
        if !(0.0..=0.25).contains(&self.background_cap) {
            return Err(Error::Config(format!(
                "sampler.background_cap {} must lie in [0, 0.25]",
                self.background_cap
            )));
        }
        if !(0.0..=1.0).contains(&self.tissue_threshold) {
            return Err(Error::Config("sampler.tissue_threshold must lie in [0, 1]".into()));
        }
        if !(self.balance_tolerance >= 0.0) {
            return Err(Error::Config("sampler.balance_tolerance must be >= 0".into()));
        }
        if self.attempts_per_record == 0 {
            return Err(Error::Config("sampler.attempts_per_record must be >= 1".into()));
        }
        Ok(())
    }

    /// `(marker, clean)` record targets.
    pub fn quotas(&self) -> (usize, usize) {
        let marker = (self.total_patches as f64 * self.marker_fraction).round() as usize;
        (marker, self.total_patches - marker)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub label: PatchLabel,
    pub category: InkCategory,
    pub split: Split,
}

impl PatchRecord {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.png", self.slide_id, self.x, self.y)
    }

    pub fn label_dir(&self) -> &'static str {
        match self.label {
            PatchLabel::Marker => "marker",
            PatchLabel::CleanTissue => "clean_tissue",
            PatchLabel::CleanBackground => "clean_background",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub by_label: BTreeMap<PatchLabel, usize>,
    pub by_category: BTreeMap<InkCategory, BTreeMap<PatchLabel, usize>>,
}

impl ManifestCounts {
    pub fn tally(records: &[PatchRecord]) -> Self {
        let mut c = ManifestCounts::default();
        for r in records {
            *c.by_label.entry(r.label).or_default() += 1;
            *c.by_category
                .entry(r.category)
                .or_default()
                .entry(r.label)
                .or_default() += 1;
        }
        c
    }

    pub fn label(&self, l: PatchLabel) -> usize {
        self.by_label.get(&l).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub seed: u64,
    pub counts: ManifestCounts,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<PatchRecord>,
}

impl DatasetManifest {
    pub fn seed(&self) -> u64 {
        self.header.seed
    }

    pub fn counts(&self) -> &ManifestCounts {
        &self.header.counts
    }

    /// Background cap and marker/clean balance, both against the counts
    /// recomputed from the records.
    pub fn check_invariants(&self) -> Result<()> {
        let cfg = &self.header.sampler;
        let c = ManifestCounts::tally(&self.records);
        if c != self.header.counts {
            return Err(Error::Data("manifest header counts disagree with records".into()));
        }
        let marker = c.label(PatchLabel::Marker) as f64;
        let bg = c.label(PatchLabel::CleanBackground) as f64;
        let clean = c.label(PatchLabel::CleanTissue) as f64 + bg;
        if bg > cfg.background_cap * clean {
            return Err(Error::Data(format!(
                "{bg} background patches exceed {} of {clean} clean patches",
                cfg.background_cap
            )));
        }
        let (tm, tc) = cfg.quotas();
        let imbalance = ((marker - clean) - (tm as f64 - tc as f64)).abs();
        let allowed = cfg.balance_tolerance * cfg.total_patches as f64;
        if imbalance > allowed {
            return Err(Error::Data(format!(
                "marker/clean imbalance {imbalance} exceeds tolerance {allowed}"
            )));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let bad = |n: usize, e: &dyn std::fmt::Display| {
            Error::Format(format!("{}:{n}: {e}", path.display()))
        };
        let first = lines
            .next()
            .ok_or_else(|| bad(1, &"empty manifest"))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, &e))?);
        }
        Ok(DatasetManifest { header, records })
    }
}

/// One slide with its mask and slide-level metadata.
#[derive(Clone, Debug)]
pub struct SlideInput {
    pub slide_id: String,
    pub category: InkCategory,
    pub split: Split,
    pub image: RasterImage,
    pub mask: MarkerMask,
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to the
/// lower index.
fn apportion(total: usize, weights: &[f64]) -> Option<Vec<usize>> {
    let sum: f64 = weights.iter().sum();
    if total == 0 {
        return Some(vec![0; weights.len()]);
    }
    if sum <= 0.0 {
        return None;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<(usize, f64)> = exact
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e - e.floor()))
        .collect();
    rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = total - out.iter().sum::<usize>();
    for &(i, _) in rest.iter().cycle().take(short) {
        out[i] += 1;
    }
    Some(out)
}

struct SlideQuota {
    marker: usize,
    clean: usize,
    background_cap: usize,
}

fn sample_slide(
    slide: &SlideInput,
    quota: &SlideQuota,
    cfg: &SamplerConfig,
    stream: RngStream,
) -> Result<Vec<PatchRecord>> {
    let size = cfg.patch_size;
    let (w, h) = (slide.image.width(), slide.image.height());
    let mut rng = stream.rng();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(quota.marker + quota.clean);
    let record = |x, y, label| PatchRecord {
        slide_id: slide.slide_id.clone(),
        x,
        y,
        size,
        label,
        category: slide.category,
        split: slide.split,
    };

    let budget = cfg.attempts_per_record.saturating_mul(quota.marker);
    let mut got = 0;
    let mut attempts = 0;
    while got < quota.marker {
        if attempts >= budget {
            return Err(Error::SamplingExhausted {
                label: "marker".into(),
                detail: format!(
                    "slide `{}`: {got}/{} marker patches after {attempts} attempts",
                    slide.slide_id, quota.marker
                ),
            });
        }
        attempts += 1;
        let (x, y) = (rng.gen_range(0..=w - size), rng.gen_range(0..=h - size));
        if seen.contains(&(x, y)) || !slide.mask.footprint_has_ink(x, y, size, size) {
            continue;
        }
        seen.insert((x, y));
        out.push(record(x, y, PatchLabel::Marker));
        got += 1;
    }

    let budget = cfg.attempts_per_record.saturating_mul(quota.clean);
    let (mut got, mut bg, mut attempts) = (0, 0, 0);
    while got < quota.clean {
        if attempts >= budget {
            return Err(Error::SamplingExhausted {
                label: "clean_tissue".into(),
                detail: format!(
                    "slide `{}`: {got}/{} clean patches ({bg} background, cap {}) after {attempts} attempts",
                    slide.slide_id, quota.clean, quota.background_cap
                ),
            });
        }
        attempts += 1;
        let (x, y) = (rng.gen_range(0..=w - size), rng.gen_range(0..=h - size));
        if seen.contains(&(x, y)) || slide.mask.footprint_has_ink(x, y, size, size) {
            continue;
        }
        let patch = slide.image.crop(x, y, size, size)?;
        let label = clean_label(&patch, cfg.tissue_threshold);
        if label == PatchLabel::CleanBackground {
            if bg >= quota.background_cap {
                continue;
            }
            bg += 1;
        }
        seen.insert((x, y));
        out.push(record(x, y, label));
        got += 1;
    }
    Ok(out)
}

/// Samples a manifest: marker quota spread over slides by ink area, clean
/// quota by ink-free area, each slide sampled on its own stream.
pub fn build_manifest(slides: &[SlideInput], cfg: &SamplerConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    if slides.is_empty() {
        return Err(Error::Input("build_manifest needs at least one slide".into()));
    }
    let mut ids = HashSet::new();
    for s in slides {
        if !ids.insert(s.slide_id.as_str()) {
            return Err(Error::Input(format!("duplicate slide id `{}`", s.slide_id)));
        }
        if !s.image.is_rgb() {
            return Err(Error::Input(format!("slide `{}` is not RGB", s.slide_id)));
        }
        s.mask.check_aligned(s.image.width(), s.image.height())?;
        if s.image.width() < cfg.patch_size || s.image.height() < cfg.patch_size {
            return Err(Error::Geometry(format!(
                "slide `{}` ({}x{}) is smaller than the {}px patch",
                s.slide_id,
                s.image.width(),
                s.image.height(),
                cfg.patch_size
            )));
        }
    }
    let (marker_total, clean_total) = cfg.quotas();
    let ink_w: Vec<f64> = slides.iter().map(|s| s.mask.ink_count() as f64).collect();
    let clean_w: Vec<f64> = slides
        .iter()
        .map(|s| (s.mask.width() * s.mask.height() - s.mask.ink_count()) as f64)
        .collect();
    let marker_q = apportion(marker_total, &ink_w).ok_or_else(|| Error::SamplingExhausted {
        label: "marker".into(),
        detail: "no slide contains ink".into(),
    })?;
    let clean_q = apportion(clean_total, &clean_w).ok_or_else(|| Error::SamplingExhausted {
        label: "clean_tissue".into(),
        detail: "no slide contains ink-free area".into(),
    })?;

    let master = RngStream::new(cfg.seed, streams::DATASET);
    let per_slide: Vec<Vec<PatchRecord>> = slides
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let q = SlideQuota {
                marker: marker_q[i],
                clean: clean_q[i],
                background_cap: (cfg.background_cap * clean_q[i] as f64).floor() as usize,
            };
            sample_slide(s, &q, cfg, master.child(i as u64))
        })
        .collect::<Result<_>>()?;
    let mut records: Vec<PatchRecord> = per_slide.into_iter().flatten().collect();
    records.sort_by(|a, b| (&a.slide_id, a.x, a.y).cmp(&(&b.slide_id, b.x, b.y)));
    let manifest = DatasetManifest {
        header: ManifestHeader {
            seed: cfg.seed,
            counts: ManifestCounts::tally(&records),
            sampler: cfg.clone(),
        },
        records,
    };
    manifest.check_invariants()?;
    Ok(manifest)
}

/// Writes one patch per record to `out/<label>/<slide>_<x>_<y>.png`.
pub fn materialize(
    manifest: &DatasetManifest,
    slides: &BTreeMap<String, RasterImage>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    for r in &manifest.records {
        if !slides.contains_key(&r.slide_id) {
            return Err(Error::Lookup(format!("slide `{}` not supplied", r.slide_id)));
        }
    }
    for dir in ["marker", "clean_tissue", "clean_background"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    manifest
        .records
        .par_iter()
        .map(|r| {
            let patch = slides[&r.slide_id].crop(r.x, r.y, r.size, r.size)?;
            let path = out.join(r.label_dir()).join(r.file_name());
            save_raster(&patch, &path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct IndexRow {
    slide_id: String,
    category: String,
    split: String,
}

/// Reads `slides.csv` (`slide_id,category,split`) from `slides_dir` and loads
/// `<slide_id>.png` plus the mask `<slide_id>.mask.png` from `masks_dir`.
/// Slides without a mask file get an empty mask at `default_downsample`.
pub fn load_slide_set(
    slides_dir: &Path,
    masks_dir: &Path,
    default_downsample: u32,
) -> Result<Vec<SlideInput>> {
    let index = slides_dir.join("slides.csv");
    let mut rdr = csv::Reader::from_path(&index)
        .map_err(|e| Error::Input(format!("{}: {e}", index.display())))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: IndexRow = row.map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
        let image = load_raster(&slides_dir.join(format!("{}.png", row.slide_id)))?;
        let mask_path = masks_dir.join(format!("{}.mask.png", row.slide_id));
        let mask = if mask_path.exists() {
            MarkerMask::load(&mask_path)?
        } else {
            tracing::info!(slide = %row.slide_id, "no mask file; treating slide as ink-free");
            MarkerMask::empty(&row.slide_id, default_downsample, image.width(), image.height())
        };
        if mask.slide_id() != row.slide_id {
            return Err(Error::Alignment(format!(
                "mask {} belongs to `{}`, not `{}`",
                mask_path.display(),
                mask.slide_id(),
                row.slide_id
            )));
        }
        out.push(SlideInput {
            category: row.category.parse()?,
            split: row.split.parse()?,
            slide_id: row.slide_id,
            image,
            mask,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{CLEAN, INK};

    fn tissue_slide(w: usize, h: usize) -> RasterImage {
        RasterImage::filled(w, h, &[200, 60, 140])
    }

    fn mask_from(w: usize, h: usize, d: u32, ink: impl Fn(usize, usize) -> bool) -> MarkerMask {
        let (mw, mh) = crate::mask::mask_dims(w, h, d);
        let mut r = RasterImage::filled(mw, mh, &[CLEAN]);
        for y in 0..mh {
            for x in 0..mw {
                if ink(x, y) {
                    r.set_pixel(x, y, &[INK]);
                }
            }
        }
        MarkerMask::new("s", d, r).unwrap()
    }

    #[test]
    fn tissue_fraction_cases() {
        assert_eq!(tissue_fraction(&RasterImage::filled(8, 8, &[255, 255, 255])), 0.0);
        assert_eq!(tissue_fraction(&tissue_slide(8, 8)), 1.0);
        let mut checker = RasterImage::filled(8, 8, &[255, 255, 255]);
        for y in 0..8 {
            for x in 0..8 {
                if (x + y) % 2 == 0 {
                    checker.set_pixel(x, y, &[200, 60, 140]);
                }
            }
        }
        assert_eq!(tissue_fraction(&checker), 0.5);
    }

    #[test]
    fn classify_single_ink_pixel_and_clean_cases() {
        let slide = tissue_slide(64, 64);
        let mask = mask_from(64, 64, 4, |x, y| x == 5 && y == 5);
        // Mask pixel (5,5) covers full-res [20,24)^2; footprint [8,24) touches it.
        assert_eq!(classify_patch(&slide, &mask, 8, 8, 16, 0.05).unwrap(), PatchLabel::Marker);
        assert_eq!(
            classify_patch(&slide, &mask, 24, 24, 16, 0.05).unwrap(),
            PatchLabel::CleanTissue
        );
        let white = RasterImage::filled(64, 64, &[255, 255, 255]);
        assert_eq!(
            classify_patch(&white, &mask, 32, 32, 16, 0.05).unwrap(),
            PatchLabel::CleanBackground
        );
        assert!(matches!(
            classify_patch(&slide, &mask, 60, 0, 16, 0.05),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn apportion_is_exact_and_proportional() {
        assert_eq!(apportion(10, &[1.0, 1.0, 2.0]).unwrap(), vec![3, 2, 5]);
        assert_eq!(apportion(7, &[0.0, 5.0]).unwrap(), vec![0, 7]);
        assert_eq!(apportion(3, &[0.0, 0.0]), None);
    }

    fn half_inked(id: &str) -> SlideInput {
        // Left third inked, rest half tissue half glass.
        let (w, h) = (256, 256);
        let mut img = tissue_slide(w, h);
        for y in 0..h {
            for x in 200..w {
                img.set_pixel(x, y, &[255, 255, 255]);
            }
        }
        let mut mask = mask_from(w, h, 8, |x, _| x < 10);
        mask = MarkerMask::new(id, 8, mask.raster().clone()).unwrap();
        SlideInput {
            slide_id: id.into(),
            category: InkCategory::Green,
            split: Split::Train,
            image: img,
            mask,
        }
    }

    #[test]
    fn hundred_patch_manifest_meets_quotas() {
        let cfg = SamplerConfig {
            patch_size: 32,
            total_patches: 100,
            seed: 3,
            ..Default::default()
        };
        let m = build_manifest(&[half_inked("a"), half_inked("b")], &cfg).unwrap();
        let c = m.counts();
        assert_eq!(c.label(PatchLabel::Marker), 50);
        assert_eq!(c.label(PatchLabel::CleanTissue) + c.label(PatchLabel::CleanBackground), 50);
        assert!(c.label(PatchLabel::CleanBackground) <= 12);
        let again = build_manifest(&[half_inked("a"), half_inked("b")], &cfg).unwrap();
        assert_eq!(m.to_jsonl(), again.to_jsonl());
    }

    #[test]
    fn fully_inked_slide_exhausts_clean_labels() {
        let mut s = half_inked("a");
        s.mask = MarkerMask::new("a", 8, RasterImage::filled(32, 32, &[INK])).unwrap();
        let cfg = SamplerConfig {
            patch_size: 32,
            total_patches: 20,
            ..Default::default()
        };
        match build_manifest(&[s], &cfg) {
            Err(Error::SamplingExhausted { label, .. }) => assert!(label.starts_with("clean")),
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips_and_materializes() {
        let dir = tempfile::tempdir().unwrap();
        let s = half_inked("a");
        let cfg = SamplerConfig {
            patch_size: 32,
            total_patches: 4,
            seed: 9,
            ..Default::default()
        };
        let m = build_manifest(std::slice::from_ref(&s), &cfg).unwrap();
        let p = dir.path().join("m.jsonl");
        m.write(&p).unwrap();
        let back = DatasetManifest::read(&p).unwrap();
        assert_eq!(back, m);

        let slides = BTreeMap::from([("a".to_string(), s.image.clone())]);
        let files = materialize(&m, &slides, &dir.path().join("out")).unwrap();
        assert_eq!(files.len(), 4);
        for (f, r) in files.iter().zip(&m.records) {
            assert!(f.starts_with(dir.path().join("out").join(r.label_dir())));
            assert_eq!(load_raster(f).unwrap(), s.image.crop(r.x, r.y, 32, 32).unwrap());
        }
        let first = fs::read(&files[0]).unwrap();
        materialize(&m, &slides, &dir.path().join("out")).unwrap();
        assert_eq!(fs::read(&files[0]).unwrap(), first);
        assert!(matches!(
            materialize(&m, &BTreeMap::new(), dir.path()),
            Err(Error::Lookup(_))
        ));
    }
}
