//! Colors and background textures shared by the generators and the
//! procedural pseudo-category renderer.

use rand::Rng;

use crate::image::hsv_to_rgb;

pub const COLOR_NAMES: [&str; 10] = [
    "red", "orange", "yellow", "lime", "green", "cyan", "blue", "indigo", "purple", "magenta",
];

pub const TEXTURE_NAMES: [&str; 10] = [
    "striped", "barred", "diagonal", "checkered", "dotted", "grid", "wavy", "speckled", "ringed", "gradient",
];

pub const SATURATION: f64 = 0.85;
pub const VALUE: f64 = 0.8;

/// Hue (degrees) of palette entry `i`: ten evenly spaced hues.
pub fn hue(i: usize) -> f64 {
    36.0 * i as f64
}

pub fn color_rgb(i: usize, value: f64) -> [f64; 3] {
    hsv_to_rgb(hue(i), SATURATION, value)
}

pub fn color_attribute(i: usize) -> String {
    format!("{} background", COLOR_NAMES[i])
}

pub fn texture_attribute(i: usize) -> String {
    format!("{} pattern", TEXTURE_NAMES[i])
}

/// Parses `"<color> background"` into a palette index.
pub fn parse_color_attribute(text: &str) -> Option<usize> {
    let t = text.trim().to_lowercase();
    let name = t.strip_suffix(" background")?;
    COLOR_NAMES.iter().position(|c| *c == name.trim())
}

/// Parses `"<texture> pattern"` into a texture index.
pub fn parse_texture_attribute(text: &str) -> Option<usize> {
    let t = text.trim().to_lowercase();
    let name = t.strip_suffix(" pattern")?;
    TEXTURE_NAMES.iter().position(|c| *c == name.trim())
}

/// Random offsets that make each texture instance differ.
#[derive(Debug, Clone, Copy)]
pub struct TextureJitter {
    pub dx: usize,
    pub dy: usize,
    pub phase: f64,
    pub seed: u64,
}

impl TextureJitter {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            dx: rng.random_range(0..12),
            dy: rng.random_range(0..12),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            seed: rng.random(),
        }
    }
}

fn hash01(seed: u64, y: usize, x: usize) -> f64 {
    let mut h = seed ^ ((y as u64) << 32) ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Brightness factor in `[0.3, 1.0]` of texture `t` at pixel `(y, x)`.
pub fn texture_factor(t: usize, y: usize, x: usize, size: usize, j: TextureJitter) -> f64 {
    const LO: f64 = 0.3;
    let (yy, xx) = (y + j.dy, x + j.dx);
    let on = match t {
        0 => (yy / 2) % 2 == 0,
        1 => (xx / 2) % 2 == 0,
        2 => ((xx + yy) / 3) % 2 == 0,
        3 => ((xx / 4) + (yy / 4)) % 2 == 0,
        4 => {
            let (ry, rx) = ((yy % 6) as f64 - 2.5, (xx % 6) as f64 - 2.5);
            ry * ry + rx * rx > 2.5
        }
        5 => yy % 6 != 0 && xx % 6 != 0,
        6 => ((xx as f64) * 0.9 + 2.5 * ((yy as f64) * 0.45 + j.phase).sin()).sin() > 0.0,
        7 => hash01(j.seed, y, x) > 0.35,
        8 => {
            let c = size as f64 / 2.0;
            let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            (r * 1.1 + j.phase).sin() > 0.0
        }
        _ => return LO + (1.0 - LO) * (x as f64 / (size - 1).max(1) as f64),
    };
    if on {
        1.0
    } else {
        LO
    }
}
