//! RGB images with unit-interval intensities and the handful of raster
//! operations the rest of the crate needs (bilinear resize, crop, paste,
//! gray-scale conversion, 8-bit PNG IO).

use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{geometry, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rgb(pub [f32; 3]);

impl Rgb {
    pub const BLACK: Rgb = Rgb([0.0, 0.0, 0.0]);
    pub const WHITE: Rgb = Rgb([1.0, 1.0, 1.0]);
    pub const GRAY: Rgb = Rgb([0.5, 0.5, 0.5]);
    pub const RED: Rgb = Rgb([1.0, 0.0, 0.0]);
    pub const GREEN: Rgb = Rgb([0.0, 1.0, 0.0]);
    pub const BLUE: Rgb = Rgb([0.0, 0.0, 1.0]);
    pub const PURPLE: Rgb = Rgb([0.5, 0.0, 0.5]);
    pub const YELLOW: Rgb = Rgb([1.0, 1.0, 0.0]);

    pub fn dist2(&self, other: &Rgb) -> f32 {
        let d0 = self.0[0] - other.0[0];
        let d1 = self.0[1] - other.0[1];
        let d2 = self.0[2] - other.0[2];
        d0 * d0 + d1 * d1 + d2 * d2
    }

    pub fn luma(&self) -> f32 {
        0.299 * self.0[0] + 0.587 * self.0[1] + 0.114 * self.0[2]
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Row-major, channel-interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, color: Rgb) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(geometry!("image dimensions must be positive, got {height}x{width}"));
        }
        if !color.is_valid() {
            return Err(Error::Argument(format!("color {color:?} outside [0,1]")));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color.0);
        }
        Ok(Self { height, width, data })
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(geometry!("image dimensions must be positive, got {height}x{width}"));
        }
        if data.len() != height * width * 3 {
            return Err(geometry!(
                "buffer of {} values does not match {height}x{width}x3",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("intensity {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Result<Self> {
        let mut img = Self::filled(height, width, Rgb::BLACK)?;
        for r in 0..height {
            for c in 0..width {
                img.set(r, c, f(r, c));
            }
        }
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Rgb {
        let i = (row * self.width + col) * 3;
        Rgb([self.data[i], self.data[i + 1], self.data[i + 2]])
    }

    /// Writes a pixel, clamping each channel into [0,1].
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, color: Rgb) {
        let i = (row * self.width + col) * 3;
        for k in 0..3 {
            self.data[i + k] = color.0[k].clamp(0.0, 1.0);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|p| Rgb([p[0], p[1], p[2]]))
    }

    /// Bilinear resampling with half-pixel centers. Same-size requests
    /// return an exact copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(geometry!("cannot resize to {height}x{width}"));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let axis = |out: usize, scale: f32, len: usize| -> (usize, usize, f32) {
            let src = ((out as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f32)
        };
        let xs: Vec<_> = (0..width).map(|c| axis(c, sx, self.width)).collect();
        let mut out = vec![0.0f32; height * width * 3];
        for r in 0..height {
            let (y0, y1, fy) = axis(r, sy, self.height);
            for (c, &(x0, x1, fx)) in xs.iter().enumerate() {
                let o = (r * width + c) * 3;
                for k in 0..3 {
                    let p00 = self.data[(y0 * self.width + x0) * 3 + k];
                    let p01 = self.data[(y0 * self.width + x1) * 3 + k];
                    let p10 = self.data[(y1 * self.width + x0) * 3 + k];
                    let p11 = self.data[(y1 * self.width + x1) * 3 + k];
                    let top = p00 + (p01 - p00) * fx;
                    let bot = p10 + (p11 - p10) * fx;
                    out[o + k] = (top + (bot - top) * fy).clamp(0.0, 1.0);
                }
            }
        }
        Ok(Image { height, width, data: out })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(geometry!(
                "crop {height}x{width}@({top},{left}) outside {}x{} image",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let s = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[s..s + width * 3]);
        }
        Ok(Image { height, width, data })
    }

    pub fn paste(&mut self, top: usize, left: usize, src: &Image) -> Result<()> {
        if top + src.height > self.height || left + src.width > self.width {
            return Err(geometry!(
                "paste of {}x{}@({top},{left}) outside {}x{} image",
                src.height,
                src.width,
                self.height,
                self.width
            ));
        }
        for r in 0..src.height {
            let d = ((top + r) * self.width + left) * 3;
            let s = r * src.width * 3;
            self.data[d..d + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
        Ok(())
    }

    /// Luma replicated over three channels.
    pub fn to_grayscale(&self) -> Image {
        let mut out = self.clone();
        for p in out.data.chunks_exact_mut(3) {
            let y = Rgb([p[0], p[1], p[2]]).luma().clamp(0.0, 1.0);
            p.fill(y);
        }
        out
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(geometry!("mse of {:?} vs {:?}", self.dims(), other.dims()));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Per-pixel arithmetic mean of equally sized images.
    pub fn mean_of(images: &[Image]) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::Argument("mean of zero images".into()))?;
        if images.len() == 1 {
            return Ok(first.clone());
        }
        let mut acc = vec![0.0f64; first.data.len()];
        for img in images {
            if img.dims() != first.dims() {
                return Err(geometry!("mean of {:?} vs {:?}", first.dims(), img.dims()));
            }
            for (a, v) in acc.iter_mut().zip(&img.data) {
                *a += *v as f64;
            }
        }
        let n = images.len() as f64;
        let data = acc.into_iter().map(|a| ((a / n) as f32).clamp(0.0, 1.0)).collect();
        Ok(Image { height: first.height, width: first.width, data })
    }

    /// Snaps every channel to the nearest k/255 level, i.e. what an 8-bit
    /// round trip produces.
    pub fn quantized_8bit(&self) -> Image {
        let data = self.data.iter().map(|v| to_u8(*v) as f32 / 255.0).collect();
        Image { height: self.height, width: self.width, data }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| to_u8(*v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Format(format!(
                "{} bytes do not match {height}x{width} RGB",
                bytes.len()
            )));
        }
        Image::from_raw(height, width, bytes.iter().map(|b| *b as f32 / 255.0).collect())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let w = BufWriter::new(&mut buf);
            write_png(w, self)?;
        }
        Ok(buf)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        read_png(Cursor::new(bytes))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        write_png(BufWriter::new(file), self)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let file = std::fs::File::open(path)?;
        read_png(std::io::BufReader::new(file))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png<W: Write>(w: W, img: &Image) -> Result<()> {
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_image_data(&img.to_rgb8())
        .map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))
}

fn read_png<R: Read + std::io::BufRead + std::io::Seek>(r: R) -> Result<Image> {
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|g| [*g, *g, *g]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Format(format!("unsupported png color type {other:?}"))),
    };
    Image::from_rgb8(h, w, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(5, 7, |r, c| Rgb([r as f32 / 5.0, c as f32 / 7.0, 0.3])).unwrap();
        assert_eq!(img.resize_bilinear(5, 7).unwrap(), img);
        let flat = Image::filled(3, 3, Rgb::PURPLE).unwrap();
        let big = flat.resize_bilinear(17, 9).unwrap();
        assert!(big.pixels().all(|p| p.dist2(&Rgb::PURPLE) < 1e-12));
    }

    #[test]
    fn crop_paste_roundtrip() {
        let mut canvas = Image::filled(8, 8, Rgb::BLACK).unwrap();
        let patch = Image::filled(3, 2, Rgb::BLUE).unwrap();
        canvas.paste(4, 5, &patch).unwrap();
        assert_eq!(canvas.crop(4, 5, 3, 2).unwrap(), patch);
        assert!(canvas.paste(6, 7, &patch).is_err());
    }

    #[test]
    fn png_roundtrip_is_lossless_on_8bit_values() {
        let img = Image::from_fn(6, 4, |r, c| Rgb([(r * 40) as f32 / 255.0, (c * 60) as f32 / 255.0, 1.0]))
            .unwrap()
            .quantized_8bit();
        let bytes = img.to_png_bytes().unwrap();
        assert_eq!(Image::from_png_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(Image::from_raw(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::filled(0, 3, Rgb::BLACK).is_err());
    }
}
