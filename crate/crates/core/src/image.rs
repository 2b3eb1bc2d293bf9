//! 8-bit RGB images. Pixels are stored quantized so that PNG export and
//! re-import round-trip bit-exactly; model code reads them as `[0, 1]` floats.

use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    /// Row-major HWC bytes.
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * CHANNELS],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::input(format!(
                "image buffer has {} bytes, expected {}x{}x{}",
                data.len(),
                height,
                width,
                CHANNELS
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from float RGB triples in `[0, 1]` (values are clamped).
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let base = (y * self.width + x) * CHANNELS;
        for c in 0..CHANNELS {
            self.data[base + c] = quantize(rgb[c]);
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let base = (y * self.width + x) * CHANNELS;
        [
            self.data[base] as f64 / 255.0,
            self.data[base + 1] as f64 / 255.0,
            self.data[base + 2] as f64 / 255.0,
        ]
    }

    /// Channel-major float tensor (C x H x W) with values in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; CHANNELS * hw];
        for p in 0..hw {
            for c in 0..CHANNELS {
                out[c * hw + p] = self.data[p * CHANNELS + c] as f64 / 255.0;
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::input(format!("png encode: {e}")))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::input(format!("png encode: {e}")))?;
        }
        Ok(buf)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::input(format!("png decode: {e}")))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::input("png decode: image too large"))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::input(format!("png decode: {e}")))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::input("png decode: expected 8-bit RGB"));
        }
        buf.truncate(info.buffer_size());
        Image::from_raw(info.height as usize, info.width as usize, buf)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_png(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// HSV (hue in degrees) to RGB in `[0, 1]`.
pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// RGB in `[0, 1]` to (hue degrees, saturation, value).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

/// Smallest angular distance between two hues, in degrees.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let img = Image::from_fn(5, 7, |y, x| [y as f64 / 4.0, x as f64 / 6.0, 0.5]);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn hsv_round_trip() {
        for hue in [0.0, 36.0, 72.0, 144.0, 216.0, 324.0] {
            let rgb = hsv_to_rgb(hue, 0.9, 0.8);
            let (h, s, v) = rgb_to_hsv(rgb);
            assert!(hue_distance(h, hue) < 1e-9);
            assert!((s - 0.9).abs() < 1e-9 && (v - 0.8).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_buffer_size_is_rejected() {
        assert!(Image::from_raw(2, 2, vec![0; 5]).is_err());
    }
}
