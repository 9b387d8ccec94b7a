//! 8-bit raster images and their lossless file I/O.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved 8-bit image with origin at the top-left.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!(
                "unsupported channel count {channels} (expected 1 or 3)"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Self {
        let channels = pixel.len();
        assert!(channels == 1 || channels == 3, "pixel must have 1 or 3 samples");
        RasterImage {
            width,
            height,
            channels,
            data: pixel.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_rgb(&self) -> bool {
        self.channels == 3
    }

    fn offset(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y * self.width + x) * self.channels
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, value: &[u8]) {
        let o = self.offset(x, y);
        let c = self.channels;
        self.data[o..o + c].copy_from_slice(value);
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.channels)
    }

    /// Copies the `w x h` rectangle with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RasterImage> {
        if x.checked_add(w).is_none_or(|r| r > self.width)
            || y.checked_add(h).is_none_or(|b| b > self.height)
        {
            return Err(Error::Bounds(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for row in y..y + h {
            let o = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[o..o + w * c]);
        }
        Ok(RasterImage {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    /// Writes `patch` into this image with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, patch: &RasterImage, x: usize, y: usize) -> Result<()> {
        if patch.channels != self.channels
            || x + patch.width > self.width
            || y + patch.height > self.height
        {
            return Err(Error::Bounds(format!(
                "cannot paste {}x{}x{} at ({x},{y}) into {}x{}x{}",
                patch.width, patch.height, patch.channels, self.width, self.height, self.channels
            )));
        }
        let c = self.channels;
        for row in 0..patch.height {
            let dst = ((y + row) * self.width + x) * c;
            let src = row * patch.width * c;
            self.data[dst..dst + patch.width * c]
                .copy_from_slice(&patch.data[src..src + patch.width * c]);
        }
        Ok(())
    }

    fn from_dynamic(img: DynamicImage) -> Result<RasterImage> {
        match img {
            DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                RasterImage::new(w as usize, h as usize, 1, buf.into_raw())
            }
            DynamicImage::ImageRgb8(buf) => {
                let (w, h) = buf.dimensions();
                RasterImage::new(w as usize, h as usize, 3, buf.into_raw())
            }
            other => Err(Error::Format(format!(
                "unsupported pixel layout {:?}; expected 8-bit gray or RGB",
                other.color()
            ))),
        }
    }

    /// Encodes as PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            ImageFormat::Png,
        )
        .map_err(|e| Error::Format(format!("PNG encoding failed: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn from_encoded_bytes(bytes: &[u8]) -> Result<RasterImage> {
        let reader = ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| Error::Format(e.to_string()))?;
        let img = reader
            .decode()
            .map_err(|e| Error::Format(format!("cannot decode raster: {e}")))?;
        Self::from_dynamic(img)
    }
}

/// Reads a lossless raster (PNG, or any format the decoder recognises).
pub fn load_raster(path: &Path) -> Result<RasterImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::new(BufReader::new(file))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("cannot decode {}: {e}", path.display())))?;
    RasterImage::from_dynamic(img)
}

/// Writes PNG regardless of the file extension.
pub fn save_raster(image: &RasterImage, path: &Path) -> Result<()> {
    let bytes = image.to_png_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(w: usize, h: usize) -> RasterImage {
        let data = (0..w * h * 3).map(|i| (i * 37 % 256) as u8).collect();
        RasterImage::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn rgb_dimensions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = gradient_image(128, 128);
        save_raster(&img, &p).unwrap();
        let back = load_raster(&p).unwrap();
        assert_eq!((back.width(), back.height(), back.channels()), (128, 128, 3));
        assert_eq!(back, img);
    }

    #[test]
    fn single_gray_pixel_loads_as_one_channel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_raw(1, 1, vec![255]).unwrap().save(&p).unwrap();
        let img = load_raster(&p).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (1, 1, 1));
        assert_eq!(img.data(), &[255]);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let bytes = gradient_image(32, 32).to_png_bytes().unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_raster(&p), Err(Error::Format(_))));
    }

    #[test]
    fn rgba_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        image::RgbaImage::from_raw(1, 1, vec![1, 2, 3, 4]).unwrap().save(&p).unwrap();
        assert!(matches!(load_raster(&p), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_and_directory_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_raster(&dir.path().join("nope.png")),
            Err(Error::Io { .. })
        ));
        let img = RasterImage::filled(4, 4, &[0]);
        assert!(matches!(
            save_raster(&img, &dir.path().join("missing/dir/m.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn zero_mask_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let img = RasterImage::filled(4, 4, &[0]);
        save_raster(&img, &p).unwrap();
        assert_eq!(load_raster(&p).unwrap(), img);
    }

    #[test]
    fn full_crop_is_identity() {
        let img = gradient_image(7, 5);
        assert_eq!(img.crop(0, 0, 7, 5).unwrap(), img);
    }

    #[test]
    fn crop_of_three_by_three_matches_enumeration() {
        // Gray 3x3 with value 10*y + x.
        let data = (0..3).flat_map(|y| (0..3).map(move |x| (10 * y + x) as u8)).collect();
        let img = RasterImage::new(3, 3, 1, data).unwrap();
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[11, 12, 21, 22]);
        let c = img.crop(0, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[10, 11, 20, 21]);
    }

    #[test]
    fn out_of_bounds_crop_fails() {
        let img = gradient_image(4, 4);
        assert!(matches!(img.crop(3, 0, 2, 1), Err(Error::Bounds(_))));
        assert!(matches!(img.crop(0, 0, 4, 5), Err(Error::Bounds(_))));
    }

    fn arb_image() -> impl Strategy<Value = RasterImage> {
        (1usize..20, 1usize..20, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(
            |(w, h, c)| {
                proptest::collection::vec(any::<u8>(), w * h * c)
                    .prop_map(move |d| RasterImage::new(w, h, c, d).unwrap())
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn save_then_load_is_identity(img in arb_image()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.png");
            save_raster(&img, &p).unwrap();
            prop_assert_eq!(load_raster(&p).unwrap(), img);
        }

        #[test]
        fn crop_composes(img in arb_image(), a in any::<[u8; 4]>(), b in any::<[u8; 4]>()) {
            let (w, h) = (img.width(), img.height());
            let ax = a[0] as usize % w;
            let ay = a[1] as usize % h;
            let aw = 1 + a[2] as usize % (w - ax);
            let ah = 1 + a[3] as usize % (h - ay);
            let bx = b[0] as usize % aw;
            let by = b[1] as usize % ah;
            let bw = 1 + b[2] as usize % (aw - bx);
            let bh = 1 + b[3] as usize % (ah - by);
            let nested = img.crop(ax, ay, aw, ah).unwrap().crop(bx, by, bw, bh).unwrap();
            let direct = img.crop(ax + bx, ay + by, bw, bh).unwrap();
            prop_assert_eq!(nested, direct);
        }
    }
}
