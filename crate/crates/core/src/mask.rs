//! Binary ink masks aligned to a slide at an integer downsample factor.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_raster, save_raster, RasterImage};

pub const INK: u8 = 255;
pub const CLEAN: u8 = 0;

/// Sidecar metadata stored next to a mask raster as `<mask>.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSidecar {
    pub slide_id: String,
    pub downsample: u32,
}

#[derive(Clone, Debug)]
pub struct MarkerMask {
    slide_id: String,
    downsample: u32,
    mask: RasterImage,
    /// Summed-area table of ink pixels, `(w + 1) x (h + 1)`.
    integral: OnceLock<Vec<u32>>,
}

impl PartialEq for MarkerMask {
    fn eq(&self, other: &Self) -> bool {
        self.slide_id == other.slide_id
            && self.downsample == other.downsample
            && self.mask == other.mask
    }
}

impl Eq for MarkerMask {}

/// Mask dimensions for a slide: `ceil(dim / downsample)`.
pub fn mask_dims(slide_w: usize, slide_h: usize, downsample: u32) -> (usize, usize) {
    let d = downsample as usize;
    (slide_w.div_ceil(d), slide_h.div_ceil(d))
}

impl MarkerMask {
    /// Builds a mask from strictly binary samples.
    pub fn new(slide_id: impl Into<String>, downsample: u32, mask: RasterImage) -> Result<Self> {
        if downsample == 0 {
            return Err(Error::Input("mask downsample must be >= 1".into()));
        }
        if mask.channels() != 1 {
            return Err(Error::Format("mask raster must be single-channel".into()));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != INK && v != CLEAN) {
            return Err(Error::Format(format!("mask sample {v} is not 0 or 255")));
        }
        Ok(MarkerMask {
            slide_id: slide_id.into(),
            downsample,
            mask,
            integral: OnceLock::new(),
        })
    }

    /// Builds a mask from any single-channel raster, thresholding at 128.
    pub fn from_thresholded(
        slide_id: impl Into<String>,
        downsample: u32,
        mut mask: RasterImage,
    ) -> Result<Self> {
        if mask.channels() != 1 {
            return Err(Error::Format("mask raster must be single-channel".into()));
        }
        let non_binary = mask.data().iter().filter(|&&v| v != INK && v != CLEAN).count();
        if non_binary > 0 {
            tracing::warn!(
                non_binary,
                "mask has non-binary samples; thresholding at 128"
            );
            for v in mask.data_mut() {
                *v = if *v >= 128 { INK } else { CLEAN };
            }
        }
        Self::new(slide_id, downsample, mask)
    }

    pub fn empty(slide_id: impl Into<String>, downsample: u32, slide_w: usize, slide_h: usize) -> Self {
        let (w, h) = mask_dims(slide_w, slide_h, downsample.max(1));
        Self::new(slide_id, downsample.max(1), RasterImage::filled(w, h, &[CLEAN]))
            .expect("empty mask is valid")
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn downsample(&self) -> u32 {
        self.downsample
    }

    pub fn raster(&self) -> &RasterImage {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn is_ink(&self, mx: usize, my: usize) -> bool {
        self.mask.pixel(mx, my)[0] == INK
    }

    pub fn ink_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == INK).count()
    }

    pub fn is_empty(&self) -> bool {
        self.ink_count() == 0
    }

    /// Fails unless the mask has the dimensions implied by the slide size.
    pub fn check_aligned(&self, slide_w: usize, slide_h: usize) -> Result<()> {
        let expected = mask_dims(slide_w, slide_h, self.downsample);
        if (self.width(), self.height()) != expected {
            return Err(Error::Alignment(format!(
                "mask for `{}` is {}x{} but a {slide_w}x{slide_h} slide at downsample {} needs {}x{}",
                self.slide_id,
                self.width(),
                self.height(),
                self.downsample,
                expected.0,
                expected.1
            )));
        }
        Ok(())
    }

    fn integral(&self) -> &[u32] {
        self.integral.get_or_init(|| {
            let (w, h) = (self.width(), self.height());
            let mut sat = vec![0u32; (w + 1) * (h + 1)];
            for y in 0..h {
                let mut row = 0u32;
                for x in 0..w {
                    row += u32::from(self.is_ink(x, y));
                    sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
                }
            }
            sat
        })
    }

    /// Mask-space rectangle `[x0, x1) x [y0, y1)` covering a full-resolution
    /// footprint. Any mask pixel that touches the footprint is included.
    pub fn covering_rect(&self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let d = self.downsample as usize;
        let x0 = (x / d).min(self.width());
        let y0 = (y / d).min(self.height());
        let x1 = (x + w).div_ceil(d).min(self.width());
        let y1 = (y + h).div_ceil(d).min(self.height());
        (x0, y0, x1, y1)
    }

    /// Number of ink pixels in the covering rectangle of a full-resolution footprint.
    pub fn ink_in_footprint(&self, x: usize, y: usize, w: usize, h: usize) -> u32 {
        let (x0, y0, x1, y1) = self.covering_rect(x, y, w, h);
        if x0 >= x1 || y0 >= y1 {
            return 0;
        }
        let sat = self.integral();
        let stride = self.width() + 1;
        sat[y1 * stride + x1] + sat[y0 * stride + x0] - sat[y0 * stride + x1] - sat[y1 * stride + x0]
    }

    pub fn footprint_has_ink(&self, x: usize, y: usize, w: usize, h: usize) -> bool {
        self.ink_in_footprint(x, y, w, h) > 0
    }

    /// Whether the full-resolution pixel `(x, y)` lies in an ink mask pixel.
    pub fn is_ink_at_full_res(&self, x: usize, y: usize) -> bool {
        let d = self.downsample as usize;
        self.is_ink(x / d, y / d)
    }

    pub fn sidecar_path(mask_path: &Path) -> PathBuf {
        let mut s = mask_path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the mask raster to `path` and its sidecar to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_raster(&self.mask, path)?;
        let sidecar = MaskSidecar {
            slide_id: self.slide_id.clone(),
            downsample: self.downsample,
        };
        let sc = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&sc, json).map_err(|e| Error::io(&sc, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sc = Self::sidecar_path(path);
        let text = fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
        let sidecar: MaskSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad mask sidecar {}: {e}", sc.display())))?;
        let raster = load_raster(path)?;
        Self::from_thresholded(sidecar.slide_id, sidecar.downsample, raster)
    }
}
