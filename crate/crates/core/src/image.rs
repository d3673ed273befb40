//! Image payloads: decoding, encoding and resizing.
//!
//! Pixels are `f32` in `[0, 1]`, row-major with channels interleaved. PGM and
//! PPM (plain and raw) are parsed here; PNG goes through the `image` crate.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported image extension {0:?}")]
    UnsupportedExtension(String),
    #[error("malformed {format} data: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error("invalid resize target {0}x{1}")]
    InvalidTarget(u32, u32),
    #[error("pixel buffer of {got} values does not fit {width}x{height}x{channels}")]
    BadBuffer { width: u32, height: u32, channels: u8, got: usize },
    #[error("unsupported channel count {0}")]
    Channels(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Png,
    Ppm,
    Pgm,
}

impl Format {
    pub fn from_extension(ext: &str) -> Option<Format> {
        match ext {
            "png" => Some(Format::Png),
            "ppm" => Some(Format::Ppm),
            "pgm" => Some(Format::Pgm),
            _ => None,
        }
    }

    pub fn from_path(path: &Path) -> Result<Format, ImageError> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        Format::from_extension(ext).ok_or_else(|| ImageError::UnsupportedExtension(ext.to_string()))
    }

    pub fn mime(self) -> &'static str {
        match self {
            Format::Png => "image/png",
            Format::Ppm => "image/x-portable-pixmap",
            Format::Pgm => "image/x-portable-graymap",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<f32>) -> Result<Self, ImageError> {
        if channels == 0 {
            return Err(ImageError::Channels(channels));
        }
        if data.len() != width as usize * height as usize * channels as usize {
            return Err(ImageError::BadBuffer { width, height, channels, got: data.len() });
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: f32) -> Self {
        Image { width, height, channels, data: vec![value; width as usize * height as usize * channels as usize] }
    }

    /// Single-channel image from rows of values.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, ImageError> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        Image::new(width, height, 1, rows.concat())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> f32 {
        self.data[((y * self.width + x) as usize) * self.channels as usize + c as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, v: f32) {
        let ch = self.channels as usize;
        self.data[((y * self.width + x) as usize) * ch + c as usize] = v;
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let format = Format::from_path(path)?;
        Image::decode(&std::fs::read(path)?, format)
    }

    pub fn decode(bytes: &[u8], format: Format) -> Result<Self, ImageError> {
        match format {
            Format::Png => decode_png(bytes),
            Format::Ppm | Format::Pgm => decode_pnm(bytes),
        }
    }

    pub fn encode(&self, format: Format) -> Result<Vec<u8>, ImageError> {
        match format {
            Format::Png => self.encode_png(),
            Format::Pgm | Format::Ppm => Ok(self.encode_pnm()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.encode(Format::from_path(path)?)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Raw PGM (one channel) or PPM (three channels), 8-bit.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let img = if self.channels == 1 || self.channels == 3 { self.clone() } else { self.to_channels(1) };
        let magic = if img.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
        out.extend(img.data.iter().map(|&v| quantize(v)));
        out
    }

    fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let img = if self.channels == 1 || self.channels == 3 { self.clone() } else { self.to_channels(1) };
        let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
        let dynamic = if img.channels == 1 {
            image::GrayImage::from_raw(img.width, img.height, bytes).map(image::DynamicImage::ImageLuma8)
        } else {
            image::RgbImage::from_raw(img.width, img.height, bytes).map(image::DynamicImage::ImageRgb8)
        }
        .expect("buffer length matches dimensions");
        let mut out = Cursor::new(Vec::new());
        dynamic
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ImageError::Malformed { format: "png", reason: e.to_string() })?;
        Ok(out.into_inner())
    }

    /// Converts between grayscale and RGB. RGB to gray uses luminance
    /// weights 0.299, 0.587, 0.114; gray to RGB replicates the channel.
    pub fn to_channels(&self, channels: u8) -> Image {
        if channels == self.channels {
            return self.clone();
        }
        let n = self.width as usize * self.height as usize;
        let src = self.channels as usize;
        let mut data = Vec::with_capacity(n * channels as usize);
        for p in 0..n {
            let px = &self.data[p * src..(p + 1) * src];
            let gray = if src >= 3 { 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2] } else { px[0] };
            for c in 0..channels as usize {
                data.push(if channels >= 3 && src >= 3 { px[c.min(src - 1)] } else { gray });
            }
        }
        Image { width: self.width, height: self.height, channels, data }
    }

    /// Bilinear resize with corner-aligned sampling: output pixel `x` samples
    /// source coordinate `x * (src_w - 1) / (dst_w - 1)`, so the four corners
    /// map onto each other exactly. A one-pixel axis samples the source
    /// center.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Result<Image, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidTarget(width, height));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let xs = sample_axis(self.width, width);
        let ys = sample_axis(self.height, height);
        let ch = self.channels;
        let mut out = Image::filled(width, height, ch, 0.0);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for c in 0..ch {
                    let top = lerp(self.get(x0, y0, c), self.get(x1, y0, c), fx);
                    let bottom = lerp(self.get(x0, y1, c), self.get(x1, y1, c), fx);
                    out.set(ox as u32, oy as u32, c, lerp(top, bottom, fy));
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// For each output index: the two neighbouring source indices and the
/// fractional weight of the second.
fn sample_axis(src: u32, dst: u32) -> Vec<(u32, u32, f32)> {
    (0..dst)
        .map(|o| {
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                o as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as u32).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// Same bilinear sampling over an `f64` grid, used for heatmaps.
pub fn resize_grid(grid: &[f64], width: usize, height: usize, to_w: usize, to_h: usize) -> Vec<f64> {
    assert_eq!(grid.len(), width * height);
    if width == to_w && height == to_h {
        return grid.to_vec();
    }
    let xs = sample_axis(width as u32, to_w as u32);
    let ys = sample_axis(height as u32, to_h as u32);
    let at = |x: u32, y: u32| grid[y as usize * width + x as usize];
    let mut out = Vec::with_capacity(to_w * to_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (fx, fy) = (fx as f64, fy as f64);
            let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
            let bottom = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let malformed = |e: image::ImageError| ImageError::Malformed { format: "png", reason: e.to_string() };
    let dynamic = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(malformed)?;
    let (w, h) = (dynamic.width(), dynamic.height());
    use image::ColorType::*;
    match dynamic.color() {
        L8 | La8 => {
            let data = dynamic.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Image::new(w, h, 1, data)
        }
        L16 | La16 => {
            let data = dynamic.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
            Image::new(w, h, 1, data)
        }
        _ => {
            let data = dynamic.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Image::new(w, h, 3, data)
        }
    }
}

struct PnmReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmReader<'a> {
    fn err(reason: impl Into<String>) -> ImageError {
        ImageError::Malformed { format: "pnm", reason: reason.into() }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<u32, ImageError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Self::err(format!("expected a number at byte {start}")))
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(PnmReader::err("missing P magic"));
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1u8, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        m => return Err(PnmReader::err(format!("unsupported magic P{}", m as char))),
    };
    let mut r = PnmReader { bytes, pos: 2 };
    let width = r.number()?;
    let height = r.number()?;
    let maxval = r.number()?;
    if width == 0 || height == 0 {
        return Err(PnmReader::err("zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(PnmReader::err(format!("maxval {maxval} out of range")));
    }
    let count = width as usize * height as usize * channels as usize;
    let scale = maxval as f32;
    let mut data = Vec::with_capacity(count);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        r.pos += 1;
        let wide = maxval > 255;
        let needed = count * if wide { 2 } else { 1 };
        let raster = bytes.get(r.pos..r.pos + needed).ok_or_else(|| PnmReader::err("truncated raster"))?;
        if wide {
            data.extend(raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / scale));
        } else {
            data.extend(raster.iter().map(|&b| b as f32 / scale));
        }
    } else {
        for _ in 0..count {
            data.push(r.number()? as f32 / scale);
        }
    }
    if data.iter().any(|&v| v > 1.0) {
        return Err(PnmReader::err("sample exceeds maxval"));
    }
    Image::new(width, height, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_resize_is_bit_identical() {
        let data: Vec<f32> = (0..64 * 64).map(|i| ((i * 37) % 251) as f32 / 251.0).collect();
        let img = Image::new(64, 64, 1, data).unwrap();
        let out = img.resize_bilinear(64, 64).unwrap();
        let bits = |i: &Image| i.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&img));
    }

    #[test]
    fn zero_target_rejected() {
        let img = Image::filled(4, 4, 1, 0.5);
        assert!(matches!(img.resize_bilinear(0, 4), Err(ImageError::InvalidTarget(0, 4))));
    }

    /// Closed-form corner-aligned bilinear value at output pixel (x, y).
    fn closed_form(src: &[[f32; 2]; 2], x: usize, y: usize, n: usize) -> f32 {
        let u = x as f32 / (n - 1) as f32;
        let v = y as f32 / (n - 1) as f32;
        src[0][0] * (1.0 - u) * (1.0 - v) + src[0][1] * u * (1.0 - v) + src[1][0] * (1.0 - u) * v + src[1][1] * u * v
    }

    #[test]
    fn two_by_two_ramp_upsamples_monotone() {
        let src = [[0.0, 1.0], [0.0, 1.0]];
        let img = Image::from_rows(&[src[0].to_vec(), src[1].to_vec()]).unwrap();
        let out = img.resize_bilinear(4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let got = out.get(x, y, 0);
                assert!((got - closed_form(&src, x as usize, y as usize, 4)).abs() < 1e-6);
                if x > 0 {
                    assert!(got >= out.get(x - 1, y, 0));
                }
            }
        }
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(3, 0, 0), 1.0);
    }

    #[test]
    fn pnm_round_trip_and_plain_variants() {
        let img = Image::from_rows(&[vec![0.0, 1.0, 0.2], vec![0.4, 0.6, 0.8]]).unwrap();
        let quantized: Vec<f32> = img.data().iter().map(|&v| quantize(v) as f32 / 255.0).collect();
        let back = Image::decode(&img.encode_pnm(), Format::Pgm).unwrap();
        assert_eq!(back.data(), &quantized[..]);

        let plain = b"P2\n# comment\n2 1\n4\n0 4\n";
        assert_eq!(Image::decode(plain, Format::Pgm).unwrap().data(), &[0.0, 1.0]);

        let rgb = b"P3 1 1 255 255 0 51";
        let px = Image::decode(rgb, Format::Ppm).unwrap();
        assert_eq!(px.channels(), 3);
        assert_eq!(px.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn malformed_pnm_rejected() {
        assert!(Image::decode(b"P5\n4 4\n255\n\x00\x01", Format::Pgm).is_err());
        assert!(Image::decode(b"P9\n1 1\n255\n\x00", Format::Pgm).is_err());
        assert!(Image::decode(b"P2 1 1 3 9", Format::Pgm).is_err());
    }

    #[test]
    fn png_round_trip() {
        let img = Image::new(3, 2, 3, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        let back = Image::decode(&img.encode(Format::Png).unwrap(), Format::Png).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn luminance_conversion() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.5, 0.0]).unwrap();
        let gray = img.to_channels(1);
        assert!((gray.data()[0] - (0.299 + 0.587 * 0.5)).abs() < 1e-6);
        assert_eq!(gray.to_channels(3).data(), &[gray.data()[0]; 3]);
    }

    proptest! {
        #[test]
        fn constant_images_stay_constant(
            v in 0.0f32..=1.0, sw in 1u32..20, sh in 1u32..20, tw in 1u32..40, th in 1u32..40
        ) {
            let out = Image::filled(sw, sh, 1, v).resize_bilinear(tw, th).unwrap();
            prop_assert_eq!((out.width(), out.height()), (tw, th));
            for &p in out.data() {
                prop_assert!((p - v).abs() <= 1e-6);
            }
        }

        #[test]
        fn resize_is_deterministic_and_bounded(
            data in proptest::collection::vec(0.0f32..=1.0, 30), tw in 1u32..25, th in 1u32..25
        ) {
            let img = Image::new(6, 5, 1, data).unwrap();
            let a = img.resize_bilinear(tw, th).unwrap();
            let b = img.resize_bilinear(tw, th).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
