//! Slide reconstruction: run the generator over every ink-touching tile of a
//! stride lattice and average overlapping outputs; everything else is copied.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MarkerMask;
use crate::model::{self, ModelBundle};
use crate::raster::RasterImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreConfig {
    pub tile: usize,
    pub stride: usize,
    /// Tiles per generator call.
    pub batch: usize,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        RestoreConfig {
            tile: 128,
            stride: 100,
            batch: 32,
        }
    }
}

impl RestoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.stride == 0 || self.stride > self.tile || self.batch == 0 {
            return Err(Error::Config(format!(
                "restore needs 1 <= stride <= tile and batch >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    /// Footprint intersects the mask (covering-rectangle rule).
    pub ink: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub stride: usize,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn ink_tiles(&self) -> impl Iterator<Item = &Tile> {
        self.tiles.iter().filter(|t| t.ink)
    }
}

/// Origins at multiples of `stride`, plus `dim - tile` when the lattice would
/// otherwise stop short of the edge.
pub fn axis_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o + tile <= dim)
        .collect();
    if let Some(&last) = out.last() {
        if last + tile < dim {
            out.push(dim - tile);
        }
    }
    out
}

pub fn plan_tiles(
    width: usize,
    height: usize,
    mask: &MarkerMask,
    tile: usize,
    stride: usize,
) -> Result<TilePlan> {
    if tile == 0 || tile > width || tile > height {
        return Err(Error::Geometry(format!(
            "tile {tile} does not fit a {width}x{height} slide"
        )));
    }
    if stride == 0 || stride > tile {
        return Err(Error::Geometry(format!("stride {stride} must lie in [1, {tile}]")));
    }
    mask.check_aligned(width, height)?;
    let xs = axis_origins(width, tile, stride);
    let ys = axis_origins(height, tile, stride);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            tiles.push(Tile {
                x,
                y,
                ink: mask.footprint_has_ink(x, y, tile, tile),
            });
        }
    }
    Ok(TilePlan {
        width,
        height,
        tile,
        stride,
        tiles,
    })
}

/// Per-pixel sums and coverage counts on the 0–255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulator {
    width: usize,
    height: usize,
    sum: Vec<u64>,
    count: Vec<u32>,
}

impl Accumulator {
    pub fn new(width: usize, height: usize) -> Self {
        Accumulator {
            width,
            height,
            sum: vec![0; width * height * 3],
            count: vec![0; width * height],
        }
    }

    pub fn add(&mut self, x: usize, y: usize, patch: &RasterImage) {
        let (pw, ph) = (patch.width(), patch.height());
        for j in 0..ph {
            let row = (y + j) * self.width + x;
            for i in 0..pw {
                let p = patch.pixel(i, j);
                let s = &mut self.sum[(row + i) * 3..(row + i) * 3 + 3];
                for c in 0..3 {
                    s[c] += p[c] as u64;
                }
                self.count[row + i] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
    }

    pub fn count(&self, x: usize, y: usize) -> u32 {
        self.count[y * self.width + x]
    }

    /// `round(sum / count)` (halves up) where covered, `base` elsewhere.
    pub fn finalize(&self, base: &RasterImage) -> RasterImage {
        let mut out = base.clone();
        let data = out.data_mut();
        for (p, &n) in self.count.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let n = n as u64;
            for c in 0..3 {
                data[p * 3 + c] = ((2 * self.sum[p * 3 + c] + n) / (2 * n)) as u8;
            }
        }
        out
    }
}

/// Maps a batch of RGB tiles to restored tiles of the same size.
pub trait TileGenerator: Sync {
    fn generate(&self, tiles: &[RasterImage]) -> Result<Vec<RasterImage>>;
}

/// Test hook bypassing the network: tiles pass through the `[-1, 1]` mapping.
pub struct IdentityGenerator;

impl TileGenerator for IdentityGenerator {
    fn generate(&self, tiles: &[RasterImage]) -> Result<Vec<RasterImage>> {
        let refs: Vec<&RasterImage> = tiles.iter().collect();
        Ok(model::batch_to_images(&model::images_to_batch(&refs)?))
    }
}

/// The marker→clean generator of a trained bundle.
pub struct NetworkGenerator<'a>(pub &'a ModelBundle);

impl TileGenerator for NetworkGenerator<'_> {
    fn generate(&self, tiles: &[RasterImage]) -> Result<Vec<RasterImage>> {
        let refs: Vec<&RasterImage> = tiles.iter().collect();
        let out = self.0.restore_batch(&model::images_to_batch(&refs)?)?;
        Ok(model::batch_to_images(&out))
    }
}

/// Counts generator invocations.
pub struct Counting<G> {
    pub inner: G,
    calls: AtomicUsize,
}

impl<G> Counting<G> {
    pub fn new(inner: G) -> Self {
        Counting {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<G: TileGenerator> TileGenerator for Counting<G> {
    fn generate(&self, tiles: &[RasterImage]) -> Result<Vec<RasterImage>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(tiles)
    }
}

fn check_plan(slide: &RasterImage, mask: &MarkerMask, plan: &TilePlan) -> Result<()> {
    if !slide.is_rgb() {
        return Err(Error::Input("restoration needs an RGB slide".into()));
    }
    if (slide.width(), slide.height()) != (plan.width, plan.height) {
        return Err(Error::Geometry(format!(
            "plan is for {}x{}, slide is {}x{}",
            plan.width,
            plan.height,
            slide.width(),
            slide.height()
        )));
    }
    mask.check_aligned(slide.width(), slide.height())
}

/// Accumulates the generator output of every ink tile.
pub fn accumulate(
    slide: &RasterImage,
    mask: &MarkerMask,
    generator: &dyn TileGenerator,
    plan: &TilePlan,
    batch_size: usize,
) -> Result<Accumulator> {
    check_plan(slide, mask, plan)?;
    if batch_size == 0 {
        return Err(Error::Input("batch size must be >= 1".into()));
    }
    let ink: Vec<&Tile> = plan.ink_tiles().collect();
    let mut acc = Accumulator::new(slide.width(), slide.height());
    for chunk in ink.chunks(batch_size) {
        let inputs = chunk
            .iter()
            .map(|t| slide.crop(t.x, t.y, plan.tile, plan.tile))
            .collect::<Result<Vec<_>>>()?;
        let outputs = generator.generate(&inputs)?;
        if outputs.len() != inputs.len() {
            return Err(Error::Shape(format!(
                "generator returned {} tiles for {}",
                outputs.len(),
                inputs.len()
            )));
        }
        for (t, o) in chunk.iter().zip(&outputs) {
            if (o.width(), o.height(), o.channels()) != (plan.tile, plan.tile, 3) {
                return Err(Error::Shape(format!(
                    "generator produced a {}x{}x{} tile, expected {}x{}x3",
                    o.width(),
                    o.height(),
                    o.channels(),
                    plan.tile,
                    plan.tile
                )));
            }
            acc.add(t.x, t.y, o);
        }
    }
    Ok(acc)
}

/// One tile per generator call.
pub fn restore_slide(
    slide: &RasterImage,
    mask: &MarkerMask,
    generator: &dyn TileGenerator,
    plan: &TilePlan,
) -> Result<RasterImage> {
    restore_batchwise(slide, mask, generator, plan, 1)
}

/// Same result as [`restore_slide`], `batch_size` tiles per generator call.
pub fn restore_batchwise(
    slide: &RasterImage,
    mask: &MarkerMask,
    generator: &dyn TileGenerator,
    plan: &TilePlan,
    batch_size: usize,
) -> Result<RasterImage> {
    Ok(accumulate(slide, mask, generator, plan, batch_size)?.finalize(slide))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{mask_dims, CLEAN, INK};

    fn mask_with(w: usize, h: usize, d: u32, ink: &[(usize, usize)]) -> MarkerMask {
        let (mw, mh) = mask_dims(w, h, d);
        let mut r = RasterImage::filled(mw, mh, &[CLEAN]);
        for &(x, y) in ink {
            r.set_pixel(x, y, &[INK]);
        }
        MarkerMask::new("s", d, r).unwrap()
    }

    #[test]
    fn lattice_examples() {
        assert_eq!(axis_origins(7, 4, 3), vec![0, 3]);
        assert_eq!(axis_origins(10, 4, 3), vec![0, 3, 6]);
        assert_eq!(axis_origins(11, 4, 3), vec![0, 3, 6, 7]);
        assert_eq!(axis_origins(4, 4, 1), vec![0]);
    }

    #[test]
    fn plan_errors_and_empty_mask() {
        let m = mask_with(10, 10, 1, &[]);
        assert!(matches!(plan_tiles(10, 10, &m, 11, 3), Err(Error::Geometry(_))));
        assert!(matches!(plan_tiles(10, 10, &m, 4, 5), Err(Error::Geometry(_))));
        let p = plan_tiles(10, 10, &m, 4, 3).unwrap();
        assert_eq!(p.tiles.len(), 9);
        assert_eq!(p.ink_tiles().count(), 0);
    }

    struct Constant(u8);
    impl TileGenerator for Constant {
        fn generate(&self, tiles: &[RasterImage]) -> Result<Vec<RasterImage>> {
            Ok(tiles
                .iter()
                .map(|t| RasterImage::filled(t.width(), t.height(), &[self.0; 3]))
                .collect())
        }
    }

    #[test]
    fn overlapping_constants_average() {
        let mut acc = Accumulator::new(7, 4);
        acc.add(0, 0, &RasterImage::filled(4, 4, &[10; 3]));
        acc.add(3, 0, &RasterImage::filled(4, 4, &[20; 3]));
        let out = acc.finalize(&RasterImage::filled(7, 4, &[0; 3]));
        assert_eq!(out.pixel(3, 0), &[15, 15, 15]);
        assert_eq!(out.pixel(0, 0), &[10, 10, 10]);
        assert_eq!(out.pixel(6, 3), &[20, 20, 20]);
        // 10 and 11 average to 10.5, which rounds up.
        let mut acc = Accumulator::new(1, 1);
        acc.add(0, 0, &RasterImage::filled(1, 1, &[10; 3]));
        acc.add(0, 0, &RasterImage::filled(1, 1, &[11; 3]));
        assert_eq!(acc.finalize(&RasterImage::filled(1, 1, &[0; 3])).pixel(0, 0), &[11; 3]);
    }

    #[test]
    fn empty_mask_restores_bit_identically() {
        let mut rng = crate::rng::RngStream::new(3, 0).rng();
        let slide = crate::synth::procedural_tissue(40, 40, &mut rng);
        let m = mask_with(40, 40, 4, &[]);
        let plan = plan_tiles(40, 40, &m, 16, 10).unwrap();
        let g = Counting::new(Constant(0));
        assert_eq!(restore_slide(&slide, &m, &g, &plan).unwrap(), slide);
        assert_eq!(g.calls(), 0);
    }

    #[test]
    fn batch_calls_are_ceiling_divided() {
        // 64 ink tiles: a 8x8 lattice of tile 4, stride 4 over 32x32, all inked.
        let ink: Vec<_> = (0..8).flat_map(|y| (0..8).map(move |x| (x, y))).collect();
        let m = mask_with(32, 32, 4, &ink);
        let slide = RasterImage::filled(32, 32, &[90, 40, 120]);
        let plan = plan_tiles(32, 32, &m, 4, 4).unwrap();
        assert_eq!(plan.ink_tiles().count(), 64);
        let g = Counting::new(IdentityGenerator);
        let a = restore_batchwise(&slide, &m, &g, &plan, 32).unwrap();
        assert_eq!(g.calls(), 2);
        let b = restore_batchwise(&slide, &m, &IdentityGenerator, &plan, 1).unwrap();
        let c = restore_batchwise(&slide, &m, &IdentityGenerator, &plan, 1000).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn wrong_tile_size_is_a_shape_error() {
        struct Shrink;
        impl TileGenerator for Shrink {
            fn generate(&self, tiles: &[RasterImage]) -> Result<Vec<RasterImage>> {
                Ok(tiles.iter().map(|_| RasterImage::filled(2, 2, &[0; 3])).collect())
            }
        }
        let m = mask_with(8, 8, 1, &[(1, 1)]);
        let plan = plan_tiles(8, 8, &m, 4, 4).unwrap();
        let slide = RasterImage::filled(8, 8, &[1; 3]);
        assert!(matches!(restore_slide(&slide, &m, &Shrink, &plan), Err(Error::Shape(_))));
    }
}
