//! Procedural textures evaluated in object-local coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{mix, Rng as StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    Checker,
    Noise,
    Gradient,
}

impl std::str::FromStr for TextureFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "checker" => Ok(Self::Checker),
            "noise" => Ok(Self::Noise),
            "gradient" => Ok(Self::Gradient),
            other => Err(format!("unknown texture family {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    /// Grid of randomly coloured cells.
    Checker { cell: f64, key: u64 },
    /// Two-octave value noise with random lattice colours.
    Noise { spacing: f64, key: u64 },
    /// Smooth two-colour ramp modulated by a product of sinusoids.
    Gradient {
        dir: [f64; 2],
        period: f64,
        freq: [f64; 2],
        c0: [f64; 3],
        c1: [f64; 3],
    },
}

fn lattice_color(key: u64, i: i64, j: i64) -> [f64; 3] {
    let h = mix(mix(key, i as u64), j as u64);
    let c = |shift: u32| 0.08 + 0.84 * (((h >> shift) & 0xff) as f64 / 255.0);
    [c(0), c(8), c(16)]
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(key: u64, u: f64, v: f64, spacing: f64) -> [f64; 3] {
    let (su, sv) = (u / spacing, v / spacing);
    let (i, j) = (su.floor(), sv.floor());
    let (fu, fv) = (smooth(su - i), smooth(sv - j));
    let (i, j) = (i as i64, j as i64);
    let c00 = lattice_color(key, i, j);
    let c10 = lattice_color(key, i + 1, j);
    let c01 = lattice_color(key, i, j + 1);
    let c11 = lattice_color(key, i + 1, j + 1);
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = c00[k] * (1.0 - fu) + c10[k] * fu;
        let bot = c01[k] * (1.0 - fu) + c11[k] * fu;
        out[k] = top * (1.0 - fv) + bot * fv;
    }
    out
}

impl Texture {
    pub fn sample(family: TextureFamily, rng: &mut StreamRng) -> Texture {
        match family {
            TextureFamily::Checker => Texture::Checker {
                cell: rng.gen_range(3.0..6.0),
                key: rng.gen(),
            },
            TextureFamily::Noise => Texture::Noise {
                spacing: rng.gen_range(3.0..5.0),
                key: rng.gen(),
            },
            TextureFamily::Gradient => {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut col = || [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
                let c0 = col();
                let c1 = col();
                Texture::Gradient {
                    dir: [a.cos(), a.sin()],
                    period: rng.gen_range(12.0..24.0),
                    freq: [rng.gen_range(0.6..1.3), rng.gen_range(0.6..1.3)],
                    c0,
                    c1,
                }
            }
        }
    }

    /// RGB at local coordinates `(u, v)`.
    pub fn color(&self, u: f64, v: f64) -> [f64; 3] {
        match self {
            Texture::Checker { cell, key } => lattice_color(*key, (u / cell).floor() as i64, (v / cell).floor() as i64),
            Texture::Noise { spacing, key } => {
                let a = value_noise(*key, u, v, *spacing);
                let b = value_noise(key.wrapping_add(1), u, v, spacing * 0.5);
                [0.7 * a[0] + 0.3 * b[0], 0.7 * a[1] + 0.3 * b[1], 0.7 * a[2] + 0.3 * b[2]]
            }
            Texture::Gradient {
                dir,
                period,
                freq,
                c0,
                c1,
            } => {
                let s = ((dir[0] * u + dir[1] * v) / period * std::f64::consts::TAU).sin() * 0.5 + 0.5;
                let m = 0.2 * (freq[0] * u).sin() * (freq[1] * v).sin();
                let mut out = [0.0; 3];
                for k in 0..3 {
                    out[k] = (c0[k] * (1.0 - s) + c1[k] * s + m).clamp(0.0, 1.0);
                }
                out
            }
        }
    }
}
