//! Nuclei counting: hematoxylin color deconvolution, Otsu threshold, hole
//! filling and a distance-transform watershed seeded at h-maxima.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ink::InkThresholds;
use crate::morphology::fill_holes;
use crate::raster::RasterImage;

/// Ruifrok & Johnston stain vectors (rows: hematoxylin, eosin, DAB) in
/// optical-density RGB.
pub const STAIN_VECTORS: [[f64; 3]; 3] = [
    [0.65, 0.70, 0.29],
    [0.07, 0.99, 0.11],
    [0.27, 0.57, 0.78],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NucleiConfig {
    /// Components smaller than this many pixels are discarded.
    pub min_area: usize,
    /// Minimum dynamic (in pixels of distance) for a watershed seed.
    pub h: f64,
    /// Hematoxylin density below which nothing is foreground, whatever Otsu says.
    pub min_density: f64,
    /// Pixels matching any ink rule are neither thresholded nor foreground.
    pub exclude_ink: bool,
}

impl Default for NucleiConfig {
    fn default() -> Self {
        NucleiConfig {
            min_area: 40,
            h: 1.5,
            min_density: 0.15,
            exclude_ink: true,
        }
    }
}

/// Per-pixel hematoxylin density.
pub fn hematoxylin(img: &RasterImage) -> Vec<f64> {
    let rows: Vec<_> = STAIN_VECTORS
        .iter()
        .map(|v| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect();
    let m = Matrix3::new(
        rows[0][0], rows[0][1], rows[0][2], //
        rows[1][0], rows[1][1], rows[1][2], //
        rows[2][0], rows[2][1], rows[2][2],
    );
    let inv = m.try_inverse().expect("stain matrix is invertible");
    // od_row = conc_row * M, so conc_row = od_row * M^-1; hematoxylin is column 0.
    let col = [inv[(0, 0)], inv[(1, 0)], inv[(2, 0)]];
    let od = |v: u8| -((v.max(1) as f64) / 255.0).log10();
    img.pixels()
        .map(|p| {
            let (r, g, b) = if p.len() == 3 { (p[0], p[1], p[2]) } else { (p[0], p[0], p[0]) };
            (od(r) * col[0] + od(g) * col[1] + od(b) * col[2]).max(0.0)
        })
        .collect()
}

/// Otsu threshold over `values` (256 bins between min and max).
pub fn otsu(values: &[f64]) -> Option<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || hi <= lo {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let center = |i: usize| lo + (i as f64 + 0.5) * width;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| c as f64 * center(i)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, lo);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += c as f64 * center(i);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = lo + (i + 1) as f64 * width;
        }
    }
    Some(best_t)
}

/// Exact squared-distance transform of one line (Felzenszwalb–Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from each foreground pixel to the nearest background
/// pixel; the outside of the image counts as background.
pub fn distance_transform(fg: &[bool], w: usize, h: usize) -> Vec<f64> {
    let (pw, ph) = (w + 2, h + 2);
    const BIG: f64 = 1e20;
    let mut g = vec![0f64; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if fg[y * w + x] {
                g[(y + 1) * pw + x + 1] = BIG;
            }
        }
    }
    let mut col = vec![0f64; ph];
    let mut tmp = vec![0f64; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = g[y * pw + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..ph {
            g[y * pw + x] = tmp[y];
        }
    }
    let mut row = vec![0f64; pw];
    for y in 0..ph {
        edt_1d(&g[y * pw..(y + 1) * pw], &mut row);
        g[y * pw..(y + 1) * pw].copy_from_slice(&row);
    }
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = g[(y + 1) * pw + x + 1].sqrt();
        }
    }
    out
}

fn neighbors8(p: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((p % w) as isize, (p / w) as isize);
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (dx, dy)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
                .then(|| ny as usize * w + nx as usize)
        })
}

#[derive(PartialEq)]
struct Item {
    key: f64,
    order: u64,
    p: usize,
}
impl Eq for Item {}
impl Ord for Item {
    fn cmp(&self, o: &Self) -> Ordering {
        self.key
            .total_cmp(&o.key)
            .then_with(|| o.order.cmp(&self.order))
    }
}
impl PartialOrd for Item {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Morphological reconstruction by dilation of `marker` under `mask`
/// within the `domain` pixels.
fn reconstruct(marker: &[f64], mask: &[f64], domain: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut r: Vec<f64> = marker.iter().zip(mask).map(|(a, b)| a.min(*b)).collect();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for p in 0..r.len() {
        if domain[p] {
            heap.push(Item { key: r[p], order, p });
            order += 1;
        }
    }
    while let Some(Item { key, p, .. }) = heap.pop() {
        if key < r[p] {
            continue;
        }
        for q in neighbors8(p, w, h) {
            if !domain[q] {
                continue;
            }
            let cand = r[p].min(mask[q]);
            if cand > r[q] {
                r[q] = cand;
                heap.push(Item { key: cand, order, p: q });
                order += 1;
            }
        }
    }
    r
}

/// Labels the regional maxima (8-connected plateaus) of `f` inside `domain`.
fn regional_maxima(f: &[f64], domain: &[bool], w: usize, h: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; f.len()];
    let mut visited = vec![false; f.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    let mut plateau = Vec::new();
    for s in 0..f.len() {
        if !domain[s] || visited[s] {
            continue;
        }
        let v = f[s];
        let mut is_max = true;
        plateau.clear();
        stack.push(s);
        visited[s] = true;
        while let Some(p) = stack.pop() {
            plateau.push(p);
            for q in neighbors8(p, w, h) {
                if !domain[q] {
                    continue;
                }
                if f[q] > v {
                    is_max = false;
                } else if f[q] == v && !visited[q] {
                    visited[q] = true;
                    stack.push(q);
                }
            }
        }
        if is_max {
            next += 1;
            for &p in &plateau {
                labels[p] = next;
            }
        }
    }
    (labels, next)
}

/// Priority-flood watershed of `-dist` from `markers`, confined to `domain`.
fn watershed(dist: &[f64], markers: &[u32], domain: &[bool], w: usize, h: usize) -> Vec<u32> {
    let mut labels = markers.to_vec();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for p in 0..labels.len() {
        if labels[p] != 0 {
            heap.push(Item { key: dist[p], order, p });
            order += 1;
        }
    }
    while let Some(Item { p, .. }) = heap.pop() {
        for q in neighbors8(p, w, h) {
            if domain[q] && labels[q] == 0 {
                labels[q] = labels[p];
                heap.push(Item { key: dist[q], order, p: q });
                order += 1;
            }
        }
    }
    labels
}

#[derive(Clone, Debug, PartialEq)]
pub struct NucleiResult {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Instance labels `1..=count`, 0 for background.
    pub labels: Vec<u32>,
}

pub fn count_nuclei(img: &RasterImage, cfg: &NucleiConfig) -> NucleiResult {
    let (w, h) = (img.width(), img.height());
    let dens = hematoxylin(img);
    let valid: Vec<bool> = if cfg.exclude_ink && img.is_rgb() {
        let t = InkThresholds::default();
        img.pixels().map(|p| !t.is_ink_color(p[0], p[1], p[2])).collect()
    } else {
        vec![true; w * h]
    };
    let sample: Vec<f64> = dens.iter().zip(&valid).filter(|(_, &v)| v).map(|(&d, _)| d).collect();
    let thr = otsu(&sample).unwrap_or(f64::INFINITY).max(cfg.min_density);
    let fg: Vec<bool> = dens.iter().zip(&valid).map(|(&d, &v)| v && d > thr).collect();
    let fg = fill_holes(&fg, w, h);

    let dist = distance_transform(&fg, w, h);
    let shifted: Vec<f64> = dist.iter().map(|d| d - cfg.h).collect();
    let hmax = reconstruct(&shifted, &dist, &fg, w, h);
    let (markers, _) = regional_maxima(&hmax, &fg, w, h);
    let raw = watershed(&dist, &markers, &fg, w, h);

    let max = raw.iter().copied().max().unwrap_or(0) as usize;
    let mut area = vec![0usize; max + 1];
    for &l in &raw {
        area[l as usize] += 1;
    }
    let mut remap = vec![0u32; max + 1];
    let mut count = 0u32;
    let labels = raw
        .iter()
        .map(|&l| {
            if l == 0 || area[l as usize] < cfg.min_area {
                return 0;
            }
            if remap[l as usize] == 0 {
                count += 1;
                remap[l as usize] = count;
            }
            remap[l as usize]
        })
        .collect();
    NucleiResult {
        count: count as usize,
        width: w,
        height: h,
        labels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NucleiDelta {
    pub before: usize,
    pub after: usize,
    /// `after - before`, negative when restoration lost nuclei.
    pub revived: i64,
}

pub fn nuclei_delta(before: &RasterImage, after: &RasterImage, cfg: &NucleiConfig) -> Result<NucleiDelta> {
    if (before.width(), before.height()) != (after.width(), after.height()) {
        return Err(Error::Geometry(format!(
            "before is {}x{}, after is {}x{}",
            before.width(),
            before.height(),
            after.width(),
            after.height()
        )));
    }
    let b = count_nuclei(before, cfg).count;
    let a = count_nuclei(after, cfg).count;
    Ok(NucleiDelta {
        before: b,
        after: a,
        revived: a as i64 - b as i64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::blobs::{render_blobs, scatter_blobs, Blob, NUCLEUS_RGB};
    use crate::rng::RngStream;

    const STROMA: [u8; 3] = [235, 180, 215];

    #[test]
    fn nuclei_are_denser_than_stroma() {
        let img = RasterImage::new(2, 1, 3, [NUCLEUS_RGB, STROMA].concat()).unwrap();
        let d = hematoxylin(&img);
        assert!(d[0] > 0.4 && d[1] < 0.1, "{d:?}");
    }

    #[test]
    fn blank_image_has_no_nuclei() {
        let img = RasterImage::filled(64, 64, &[255, 255, 255]);
        assert_eq!(count_nuclei(&img, &NucleiConfig::default()).count, 0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let (w, h) = (13, 9);
        let fg: Vec<bool> = (0..w * h).map(|i| (i * 7 + i / 5) % 11 != 0).collect();
        let d = distance_transform(&fg, w, h);
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::INFINITY;
                for yy in -1..=h as isize {
                    for xx in -1..=w as isize {
                        let inside = xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h;
                        if inside && fg[yy as usize * w + xx as usize] {
                            continue;
                        }
                        let dd = ((xx - x as isize).pow(2) + (yy - y as isize).pow(2)) as f64;
                        best = best.min(dd.sqrt());
                    }
                }
                let expect = if fg[y * w + x] { best } else { 0.0 };
                assert!((d[y * w + x] - expect).abs() < 1e-9, "({x},{y})");
            }
        }
    }

    #[test]
    fn five_separated_blobs() {
        let mut img = RasterImage::filled(120, 120, &STROMA);
        let mut rng = RngStream::new(4, 8).rng();
        let blobs = scatter_blobs(120, 120, 5, (5.0, 7.0), 14.0, 3.0, &mut rng);
        assert_eq!(blobs.len(), 5);
        render_blobs(&mut img, &blobs, NUCLEUS_RGB, 5, &mut rng);
        let r = count_nuclei(&img, &NucleiConfig::default());
        assert_eq!(r.count, 5);
        assert_eq!(count_nuclei(&img, &NucleiConfig::default()), r);
    }

    #[test]
    fn touching_blobs_with_distinct_cores_split() {
        let mut img = RasterImage::filled(60, 40, &STROMA);
        let blobs = [Blob::circle(22.0, 20.0, 8.0), Blob::circle(35.0, 20.0, 8.0)];
        render_blobs(&mut img, &blobs, NUCLEUS_RGB, 0, &mut RngStream::new(0, 0).rng());
        assert_eq!(count_nuclei(&img, &NucleiConfig::default()).count, 2);
    }

    #[test]
    fn delta_is_signed_and_checks_dims() {
        let a = RasterImage::filled(8, 8, &STROMA);
        let d = nuclei_delta(&a, &a, &NucleiConfig::default()).unwrap();
        assert_eq!(d.revived, 0);
        assert!(matches!(
            nuclei_delta(&a, &RasterImage::filled(4, 8, &STROMA), &NucleiConfig::default()),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn otsu_splits_bimodal_data() {
        let mut v = vec![0.1; 100];
        v.extend(vec![0.9; 50]);
        let t = otsu(&v).unwrap();
        assert!(t > 0.1 && t < 0.9);
        assert_eq!(otsu(&[0.5; 4]), None);
    }
}
