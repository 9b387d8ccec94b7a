//! Elliptical nucleus-like blobs with recorded ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::RasterImage;

/// Hematoxylin-like nucleus color.
pub const NUCLEUS_RGB: [u8; 3] = [84, 38, 128];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation of the `rx` axis in radians.
    pub angle: f64,
}

impl Blob {
    pub fn circle(cx: f64, cy: f64, r: f64) -> Self {
        Blob {
            cx,
            cy,
            rx: r,
            ry: r,
            angle: 0.0,
        }
    }

    /// Whether the point `(x, y)` lies inside the ellipse.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    pub fn max_radius(&self) -> f64 {
        self.rx.max(self.ry)
    }

    /// Pixels whose centers fall inside the blob, clipped to `w x h`.
    pub fn pixels(&self, w: usize, h: usize) -> Vec<(usize, usize)> {
        let r = self.max_radius().ceil() as isize + 1;
        let (cx, cy) = (self.cx.floor() as isize, self.cy.floor() as isize);
        let mut out = Vec::new();
        for y in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
            for x in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out.push((x as usize, y as usize));
                }
            }
        }
        out
    }
}

/// Paints blobs with `color`, adding uniform per-pixel noise of `±noise`.
pub fn render_blobs<R: Rng + ?Sized>(
    img: &mut RasterImage,
    blobs: &[Blob],
    color: [u8; 3],
    noise: u8,
    rng: &mut R,
) {
    let (w, h) = (img.width(), img.height());
    for b in blobs {
        for (x, y) in b.pixels(w, h) {
            let mut px = color;
            if noise > 0 {
                for c in px.iter_mut() {
                    let n = rng.gen_range(-(noise as i16)..=noise as i16);
                    *c = (*c as i16 + n).clamp(0, 255) as u8;
                }
            }
            img.set_pixel(x, y, &px);
        }
    }
}

/// Scatters up to `count` blobs with radii in `radius` so that any two are
/// separated by at least `gap` pixels between their bounding circles and all
/// sit `margin` pixels inside the image.
pub fn scatter_blobs<R: Rng + ?Sized>(
    w: usize,
    h: usize,
    count: usize,
    radius: (f64, f64),
    gap: f64,
    margin: f64,
    rng: &mut R,
) -> Vec<Blob> {
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let mut attempts = 0;
    while blobs.len() < count && attempts < count * 200 {
        attempts += 1;
        let rx = rng.gen_range(radius.0..=radius.1);
        let ry = rng.gen_range((radius.0 * 0.7).max(1.0)..=rx);
        let lo = rx + margin;
        if 2.0 * lo >= w as f64 || 2.0 * lo >= h as f64 {
            continue;
        }
        let b = Blob {
            cx: rng.gen_range(lo..w as f64 - lo),
            cy: rng.gen_range(lo..h as f64 - lo),
            rx,
            ry,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        };
        let clear = blobs.iter().all(|o| {
            let d = ((o.cx - b.cx).powi(2) + (o.cy - b.cy).powi(2)).sqrt();
            d >= o.max_radius() + b.max_radius() + gap
        });
        if clear {
            blobs.push(b);
        }
    }
    blobs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn circle_pixel_count_near_area() {
        let b = Blob::circle(20.0, 20.0, 6.0);
        let n = b.pixels(40, 40).len() as f64;
        let area = std::f64::consts::PI * 36.0;
        assert!((n - area).abs() < 0.1 * area);
    }

    #[test]
    fn scattered_blobs_respect_gap() {
        let mut rng = RngStream::new(1, 2).rng();
        let blobs = scatter_blobs(200, 200, 30, (4.0, 7.0), 8.0, 2.0, &mut rng);
        assert!(blobs.len() >= 20);
        for (i, a) in blobs.iter().enumerate() {
            for b in &blobs[i + 1..] {
                let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                assert!(d >= a.max_radius() + b.max_radius() + 8.0);
            }
        }
    }
}
