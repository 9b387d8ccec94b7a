//! Sobel gradient magnitudes and their Pearson correlation, a structure
//! preservation score between an input patch and its restoration.

use serde::{Deserialize, Serialize};

use crate::color::luminance;
use crate::error::{Error, Result};
use crate::raster::RasterImage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// One magnitude map over BT.601 luminance.
    #[default]
    Luminance,
    /// One magnitude map per RGB channel, concatenated.
    PerChannel,
}

/// Real-valued `width x height` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Sobel magnitude `sqrt(gx^2 + gy^2)` with edge replication.
pub fn sobel_magnitude(plane: &Grid) -> Grid {
    let (w, h) = (plane.width, plane.height);
    let px = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        plane.data[cy * w + cx]
    };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            data.push((gx * gx + gy * gy).sqrt());
        }
    }
    Grid { width: w, height: h, data }
}

fn luminance_plane(img: &RasterImage) -> Grid {
    let data = img
        .pixels()
        .map(|p| if p.len() == 3 { luminance(p[0], p[1], p[2]) } else { p[0] as f64 })
        .collect();
    Grid {
        width: img.width(),
        height: img.height(),
        data,
    }
}

/// Gradient magnitude of the image's luminance (gray images are used as is).
pub fn gradient_magnitude(img: &RasterImage) -> Grid {
    sobel_magnitude(&luminance_plane(img))
}

fn magnitudes(img: &RasterImage, mode: GradientMode) -> Vec<f64> {
    match mode {
        GradientMode::PerChannel if img.is_rgb() => (0..3)
            .flat_map(|c| {
                let plane = Grid {
                    width: img.width(),
                    height: img.height(),
                    data: img.pixels().map(|p| p[c] as f64).collect(),
                };
                sobel_magnitude(&plane).data
            })
            .collect(),
        _ => gradient_magnitude(img).data,
    }
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn gradient_correlation(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    gradient_correlation_with(a, b, GradientMode::Luminance)
}

pub fn gradient_correlation_with(a: &RasterImage, b: &RasterImage, mode: GradientMode) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Geometry(format!(
            "cannot correlate {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    pearson(&magnitudes(a, mode), &magnitudes(b, mode))
        .ok_or_else(|| Error::UndefinedCorrelation("a gradient magnitude map is constant".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> RasterImage {
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        RasterImage::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let g = gradient_magnitude(&RasterImage::filled(5, 4, &[7, 80, 200]));
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_touches_two_columns() {
        let g = gradient_magnitude(&gray(8, 6, |x, _| if x < 4 { 0 } else { 255 }));
        for y in 0..6 {
            for x in 0..8 {
                let v = g.at(x, y);
                if x == 3 || x == 4 {
                    // gx = (1 + 2 + 1) * 255 on both sides of the step.
                    assert_eq!(v, 1020.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn single_bright_pixel_neighborhood() {
        let g = gradient_magnitude(&gray(5, 5, |x, y| if (x, y) == (2, 2) { 100 } else { 0 }));
        // Diagonal neighbours see weight 1 in both kernels, edge neighbours 2 in one.
        let diag = (2.0f64 * 100.0 * 100.0).sqrt();
        assert_eq!(g.at(1, 1), diag);
        assert_eq!(g.at(3, 3), diag);
        assert_eq!(g.at(2, 1), 200.0);
        assert_eq!(g.at(1, 2), 200.0);
        assert_eq!(g.at(2, 2), 0.0);
        assert_eq!(g.at(0, 0), 0.0);
    }

    #[test]
    fn self_correlation_is_one_and_constants_are_undefined() {
        let img = gray(8, 8, |x, y| ((x * 37 + y * 11) % 251) as u8);
        assert!((gradient_correlation(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let c = RasterImage::filled(8, 8, &[3]);
        assert!(matches!(
            gradient_correlation(&c, &c),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            gradient_correlation(&img, &RasterImage::filled(4, 4, &[1])),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn per_channel_mode_correlates_itself() {
        let img = RasterImage::new(4, 4, 3, (0..48).map(|v| (v * 5) as u8).collect()).unwrap();
        let r = gradient_correlation_with(&img, &img, GradientMode::PerChannel).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }
}
