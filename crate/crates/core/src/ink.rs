//! Color-rule marker-ink detection producing a [`MarkerMask`].

use serde::{Deserialize, Serialize};

use crate::color::rgb_to_hsv;
use crate::error::{Error, Result};
use crate::mask::{mask_dims, MarkerMask, CLEAN, INK};
use crate::morphology;
use crate::raster::RasterImage;

/// Hue/saturation/value window for a chromatic ink.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HueRule {
    /// Degrees; `hue_min > hue_max` means the interval wraps through 0.
    pub hue_min: f64,
    pub hue_max: f64,
    pub sat_min: f64,
    pub value_max: f64,
}

impl HueRule {
    pub fn matches(&self, hue: f64, sat: f64, value: f64) -> bool {
        let in_hue = if self.hue_min <= self.hue_max {
            hue >= self.hue_min && hue <= self.hue_max
        } else {
            hue >= self.hue_min || hue <= self.hue_max
        };
        in_hue && sat >= self.sat_min && value <= self.value_max
    }

    fn validate(&self, name: &str) -> Result<()> {
        let deg = 0.0..=360.0;
        let unit = 0.0..=1.0;
        if deg.contains(&self.hue_min)
            && deg.contains(&self.hue_max)
            && unit.contains(&self.sat_min)
            && unit.contains(&self.value_max)
        {
            Ok(())
        } else {
            Err(Error::Config(format!("{name} ink rule out of range: {self:?}")))
        }
    }
}

/// Per-category ink rules plus the clean-up morphology parameters.
///
/// Black and opaque ink share the darkness rule; the opaque label is a
/// slide-level property, not a pixel-level one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InkThresholds {
    /// Fraction of 255; a pixel with `max(R, G, B) <= dark_max * 255` is ink.
    pub dark_max: f64,
    pub green: HueRule,
    pub blue: HueRule,
    /// Closing radius in mask pixels.
    pub close_radius: usize,
    /// Components smaller than this many mask pixels are dropped.
    pub min_area: usize,
}

impl Default for InkThresholds {
    fn default() -> Self {
        InkThresholds {
            dark_max: 90.0 / 255.0,
            green: HueRule {
                hue_min: 70.0,
                hue_max: 170.0,
                sat_min: 0.25,
                value_max: 0.95,
            },
            blue: HueRule {
                hue_min: 190.0,
                hue_max: 260.0,
                sat_min: 0.25,
                value_max: 0.95,
            },
            close_radius: 2,
            min_area: 64,
        }
    }
}

impl InkThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dark_max) {
            return Err(Error::Config(format!(
                "dark_max {} must lie in [0, 1]",
                self.dark_max
            )));
        }
        self.green.validate("green")?;
        self.blue.validate("blue")
    }

    /// Per-pixel rule before any morphology.
    pub fn is_ink_color(&self, r: u8, g: u8, b: u8) -> bool {
        if (r.max(g).max(b) as f64) <= self.dark_max * 255.0 {
            return true;
        }
        let (h, s, v) = rgb_to_hsv(r, g, b);
        self.green.matches(h, s, v) || self.blue.matches(h, s, v)
    }
}

/// Box-averages an RGB slide by `downsample` (partial edge blocks average
/// only their in-bounds pixels).
pub fn downsample_rgb(slide: &RasterImage, downsample: u32) -> RasterImage {
    let d = downsample as usize;
    if d == 1 {
        return slide.clone();
    }
    let (w, h) = mask_dims(slide.width(), slide.height(), downsample);
    let mut out = Vec::with_capacity(w * h * 3);
    for my in 0..h {
        for mx in 0..w {
            let mut sum = [0u64; 3];
            let mut n = 0u64;
            for y in my * d..((my + 1) * d).min(slide.height()) {
                for x in mx * d..((mx + 1) * d).min(slide.width()) {
                    let p = slide.pixel(x, y);
                    for c in 0..3 {
                        sum[c] += p[c] as u64;
                    }
                    n += 1;
                }
            }
            out.extend(sum.iter().map(|&s| ((2 * s + n) / (2 * n)) as u8));
        }
    }
    RasterImage::new(w, h, 3, out).expect("downsampled dims")
}

/// The ink set before closing and component filtering.
pub fn raw_ink_set(small: &RasterImage, thresholds: &InkThresholds) -> Vec<bool> {
    small
        .pixels()
        .map(|p| thresholds.is_ink_color(p[0], p[1], p[2]))
        .collect()
}

pub fn segment_ink(
    slide_id: &str,
    slide: &RasterImage,
    thresholds: &InkThresholds,
    downsample: u32,
) -> Result<MarkerMask> {
    if downsample == 0 {
        return Err(Error::Input("downsample must be >= 1".into()));
    }
    if !slide.is_rgb() {
        return Err(Error::Input("ink segmentation needs an RGB slide".into()));
    }
    let small = downsample_rgb(slide, downsample);
    let (w, h) = (small.width(), small.height());
    let raw = raw_ink_set(&small, thresholds);
    let closed = morphology::close(&raw, w, h, thresholds.close_radius);
    let kept = morphology::remove_small_components(&closed, w, h, thresholds.min_area);
    let data = kept.iter().map(|&k| if k { INK } else { CLEAN }).collect();
    MarkerMask::new(slide_id, downsample, RasterImage::new(w, h, 1, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverrideMode {
    Replace,
    Union,
    Subtract,
}

impl std::str::FromStr for OverrideMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(OverrideMode::Replace),
            "union" => Ok(OverrideMode::Union),
            "subtract" => Ok(OverrideMode::Subtract),
            other => Err(Error::Input(format!("unknown override mode `{other}`"))),
        }
    }
}

/// Merges a hand-corrected mask into an automatic one.
pub fn apply_mask_override(
    auto: &MarkerMask,
    manual: &MarkerMask,
    mode: OverrideMode,
) -> Result<MarkerMask> {
    if auto.slide_id() != manual.slide_id()
        || auto.downsample() != manual.downsample()
        || auto.width() != manual.width()
        || auto.height() != manual.height()
    {
        return Err(Error::Alignment(format!(
            "override `{}` ({}x{} @ {}) does not match mask `{}` ({}x{} @ {})",
            manual.slide_id(),
            manual.width(),
            manual.height(),
            manual.downsample(),
            auto.slide_id(),
            auto.width(),
            auto.height(),
            auto.downsample()
        )));
    }
    let data = auto
        .raster()
        .data()
        .iter()
        .zip(manual.raster().data())
        .map(|(&a, &m)| {
            let (a, m) = (a == INK, m == INK);
            let ink = match mode {
                OverrideMode::Replace => m,
                OverrideMode::Union => a || m,
                OverrideMode::Subtract => a && !m,
            };
            if ink {
                INK
            } else {
                CLEAN
            }
        })
        .collect();
    MarkerMask::new(
        auto.slide_id(),
        auto.downsample(),
        RasterImage::new(auto.width(), auto.height(), 1, data)?,
    )
}
