//! Procedural marker strokes composited onto clean tissue, giving paired
//! (clean, inked, stroke mask) triplets with exact ground truth.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::blobs::{render_blobs, scatter_blobs, NUCLEUS_RGB};
use crate::mask::{CLEAN, INK};
use crate::raster::{save_raster, RasterImage};
use crate::rng::RngStream;
use crate::types::InkCategory;

pub const PALETTE_BLACK: [u8; 3] = [20, 20, 20];
pub const PALETTE_GREEN: [u8; 3] = [40, 110, 60];
pub const PALETTE_BLUE: [u8; 3] = [40, 60, 150];
pub const DEFAULT_JITTER: u8 = 15;
pub const OPAQUE_MIN_ALPHA: f64 = 0.97;

pub fn palette(category: InkCategory) -> [u8; 3] {
    match category {
        InkCategory::Black | InkCategory::Opaque => PALETTE_BLACK,
        InkCategory::Green => PALETTE_GREEN,
        InkCategory::Blue => PALETTE_BLUE,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokeSpec {
    pub category: InkCategory,
    /// Blend weight of the ink color, `[0, 1]`.
    pub opacity: f64,
    /// Stroke width in pixels.
    pub width: f64,
    /// Polyline control points in pixel coordinates.
    pub points: Vec<(f64, f64)>,
    /// Per-channel color jitter amplitude.
    pub jitter: u8,
}

impl StrokeSpec {
    pub fn validate(&self, w: usize, h: usize) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Spec(format!(
                "a stroke needs at least 2 control points, got {}",
                self.points.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Spec(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if self.category == InkCategory::Opaque && self.opacity < OPAQUE_MIN_ALPHA {
            return Err(Error::Spec(format!(
                "opaque strokes need opacity >= {OPAQUE_MIN_ALPHA}, got {}",
                self.opacity
            )));
        }
        if !(self.width > 0.0) {
            return Err(Error::Spec(format!("stroke width {} must be positive", self.width)));
        }
        for &(x, y) in &self.points {
            if !(0.0..=w as f64).contains(&x) || !(0.0..=h as f64).contains(&y) {
                return Err(Error::Spec(format!(
                    "control point ({x}, {y}) outside {w}x{h} patch"
                )));
            }
        }
        Ok(())
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Pixels whose centers lie within `width / 2` of the polyline.
pub fn rasterize_polyline(points: &[(f64, f64)], width: f64, w: usize, h: usize) -> Vec<bool> {
    let half = width / 2.0;
    let mut out = vec![false; w * h];
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - half).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + half).ceil() as usize).min(w);
        let y0 = (a.1.min(b.1) - half).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + half).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b) <= half {
                    out[y * w + x] = true;
                }
            }
        }
    }
    out
}

/// Draws the stroke's ink color: palette plus uniform jitter per channel.
pub fn stroke_color<R: Rng + ?Sized>(spec: &StrokeSpec, rng: &mut R) -> [u8; 3] {
    let mut c = palette(spec.category);
    if spec.jitter > 0 {
        let j = spec.jitter as i16;
        for v in c.iter_mut() {
            *v = (*v as i16 + rng.gen_range(-j..=j)).clamp(0, 255) as u8;
        }
    }
    c
}

/// Blends `round(alpha * ink + (1 - alpha) * clean)` along the stroke.
pub fn composite(clean: &RasterImage, stroke: &[bool], ink: [u8; 3], alpha: f64) -> RasterImage {
    let mut out = clean.clone();
    for (px, &on) in out.data_mut().chunks_exact_mut(3).zip(stroke) {
        if on {
            for (v, &i) in px.iter_mut().zip(&ink) {
                *v = (alpha * i as f64 + (1.0 - alpha) * *v as f64).round() as u8;
            }
        }
    }
    out
}

pub fn synthesize_stroke<R: Rng + ?Sized>(
    clean: &RasterImage,
    spec: &StrokeSpec,
    rng: &mut R,
) -> Result<(RasterImage, RasterImage)> {
    if !clean.is_rgb() {
        return Err(Error::Input("stroke synthesis needs an RGB image".into()));
    }
    let (w, h) = (clean.width(), clean.height());
    spec.validate(w, h)?;
    let ink = stroke_color(spec, rng);
    let stroke = rasterize_polyline(&spec.points, spec.width, w, h);
    let inked = composite(clean, &stroke, ink, spec.opacity);
    let mask = RasterImage::new(
        w,
        h,
        1,
        stroke.iter().map(|&s| if s { INK } else { CLEAN }).collect(),
    )?;
    Ok((inked, mask))
}

/// Pseudo-H&E texture: pink stroma with smooth shading, pixel noise and dark
/// purple nuclei.
pub fn procedural_tissue<R: Rng + ?Sized>(w: usize, h: usize, rng: &mut R) -> RasterImage {
    let base = [
        rng.gen_range(220.0..240.0),
        rng.gen_range(150.0..180.0),
        rng.gen_range(190.0..215.0),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(3.0..9.0),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let shade: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            for &b in &base {
                let noise = rng.gen_range(-5.0..5.0);
                data.push((b + shade + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut img = RasterImage::new(w, h, 3, data).expect("tissue dims");
    let count = (w * h) / 350 + 1;
    let blobs = scatter_blobs(w, h, count, (2.5, 5.5), 2.0, 0.0, rng);
    render_blobs(&mut img, &blobs, NUCLEUS_RGB, 12, rng);
    img
}

/// Relative category weights, e.g. `black=0.5,green=0.3,blue=0.1,opaque=0.1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix(pub Vec<(InkCategory, f64)>);

impl CategoryMix {
    pub fn only(c: InkCategory) -> Self {
        CategoryMix(vec![(c, 1.0)])
    }

    pub fn non_opaque() -> Self {
        CategoryMix(vec![
            (InkCategory::Black, 1.0),
            (InkCategory::Green, 1.0),
            (InkCategory::Blue, 1.0),
        ])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> InkCategory {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut t = rng.gen_range(0.0..total);
        for &(c, w) in &self.0 {
            if t < w {
                return c;
            }
            t -= w;
        }
        self.0.last().expect("non-empty mix").0
    }
}

impl std::str::FromStr for CategoryMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("mix entry `{part}` is not category=weight")))?;
            let w: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("bad weight in `{part}`")))?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Input(format!("weight in `{part}` must be >= 0")));
            }
            out.push((k.parse()?, w));
        }
        if out.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(Error::Input("category mix needs a positive total weight".into()));
        }
        Ok(CategoryMix(out))
    }
}

/// Random stroke parameters for a `w x h` patch.
pub fn random_stroke<R: Rng + ?Sized>(
    category: InkCategory,
    w: usize,
    h: usize,
    rng: &mut R,
) -> StrokeSpec {
    let opacity = match category {
        InkCategory::Opaque => rng.gen_range(OPAQUE_MIN_ALPHA..=1.0),
        _ => rng.gen_range(0.5..0.9),
    };
    let side = w.min(h) as f64;
    let width = rng.gen_range(side / 16.0..side / 6.0);
    let n = rng.gen_range(2..=3);
    let points = (0..n)
        .map(|_| (rng.gen_range(0.0..=w as f64), rng.gen_range(0.0..=h as f64)))
        .collect();
    StrokeSpec {
        category,
        opacity,
        width,
        points,
        jitter: DEFAULT_JITTER,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub index: usize,
    pub file: String,
    pub spec: StrokeSpec,
    pub ink_rgb: [u8; 3],
    /// Index into the supplied clean sources, absent for procedural tissue.
    pub clean_source: Option<usize>,
}

pub struct Triplet {
    pub clean: RasterImage,
    pub inked: RasterImage,
    pub mask: RasterImage,
    pub record: TripletRecord,
}

/// Builds triplet `index` from its own derived random stream.
pub fn make_triplet(
    index: usize,
    sources: Option<&[RasterImage]>,
    patch: usize,
    mix: &CategoryMix,
    stream: RngStream,
) -> Result<Triplet> {
    let mut rng = stream.child(index as u64).rng();
    let (clean, clean_source) = match sources {
        Some(src) => {
            let i = rng.gen_range(0..src.len());
            let s = &src[i];
            let x = rng.gen_range(0..=s.width() - patch);
            let y = rng.gen_range(0..=s.height() - patch);
            (s.crop(x, y, patch, patch)?, Some(i))
        }
        None => (procedural_tissue(patch, patch, &mut rng), None),
    };
    let category = mix.sample(&mut rng);
    let spec = random_stroke(category, patch, patch, &mut rng);
    // Color jitter draws from a fresh clone so `ink_rgb` can be recorded.
    let mut color_rng = rng.clone();
    let ink_rgb = stroke_color(&spec, &mut color_rng);
    let (inked, mask) = synthesize_stroke(&clean, &spec, &mut rng)?;
    Ok(Triplet {
        clean,
        inked,
        mask,
        record: TripletRecord {
            index,
            file: format!("{index:05}.png"),
            spec,
            ink_rgb,
            clean_source,
        },
    })
}

/// Generates `n` triplets in memory.
pub fn paired_triplets(
    sources: Option<&[RasterImage]>,
    n: usize,
    patch: usize,
    mix: &CategoryMix,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if n == 0 {
        return Err(Error::Input("corpus size must be >= 1".into()));
    }
    if let Some(src) = sources {
        if src.is_empty() {
            return Err(Error::Input("no clean source images supplied".into()));
        }
        if let Some(bad) = src
            .iter()
            .find(|s| !s.is_rgb() || s.width() < patch || s.height() < patch)
        {
            return Err(Error::Input(format!(
                "clean source {}x{}x{} is smaller than the {patch}px patch or not RGB",
                bad.width(),
                bad.height(),
                bad.channels()
            )));
        }
    }
    let stream = RngStream::new(seed, crate::rng::streams::SYNTH);
    (0..n)
        .into_par_iter()
        .map(|i| make_triplet(i, sources, patch, mix, stream))
        .collect()
}

/// Writes `clean/`, `inked/`, `mask/` rasters and `corpus.jsonl` under `out`.
pub fn generate_paired_corpus(
    sources: Option<&[RasterImage]>,
    n: usize,
    patch: usize,
    mix: &CategoryMix,
    seed: u64,
    out: &Path,
) -> Result<Vec<TripletRecord>> {
    let triplets = paired_triplets(sources, n, patch, mix, seed)?;
    for sub in ["clean", "inked", "mask"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    triplets.par_iter().try_for_each(|t| -> Result<()> {
        save_raster(&t.clean, &out.join("clean").join(&t.record.file))?;
        save_raster(&t.inked, &out.join("inked").join(&t.record.file))?;
        save_raster(&t.mask, &out.join("mask").join(&t.record.file))
    })?;
    let mut lines = String::new();
    for t in &triplets {
        lines.push_str(&serde_json::to_string(&t.record).expect("record serializes"));
        lines.push('\n');
    }
    let path = out.join("corpus.jsonl");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(triplets.into_iter().map(|t| t.record).collect())
}
