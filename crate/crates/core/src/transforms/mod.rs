//! Two-view construction: frame-wise affine warps and JPEG-style degradation.
//!
//! An [`AffineSequence`] holds one map per frame,
//!
//! ```text
//! phi_t(x, y) = (w_t / W * x + cx_t,  h_t / H * y + cy_t)
//! ```
//!
//! which shrinks the full frame to an `h_t x w_t` crop placed at
//! `(cx_t, cy_t)` inside a black canvas. Points and pixels go through the
//! very same map: [`AffineSequence::apply_point`] moves query points and
//! [`resample_video`] pulls each destination pixel from the source at
//! `phi_t^-1`, both in the pixel-center convention.

mod jpeg;

pub use jpeg::{dct8x8, idct8x8, jpeg_degrade, quant_tables, JpegError};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::{QueryPoint, Video};

pub const MIN_AREA: f64 = 0.6;

/// One endpoint of the sequence: crop size `[h, w]` and top-left corner
/// `[cx, cy]`, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub size: [f64; 2],
    pub corner: [f64; 2],
}

impl Endpoint {
    /// Build an endpoint from the raw draws: area fraction `area`, the two
    /// height draws `a1, a2` from `U[area, 1]`, and the corner position as
    /// fractions `u = [ux, uy]` of the free slack.
    pub fn from_draws(height: usize, width: usize, area: f64, a1: f64, a2: f64, u: [f64; 2]) -> Endpoint {
        let rh = 0.5 * (a1 + a2);
        let rw = area / rh;
        let (h, w) = (rh * height as f64, rw * width as f64);
        Endpoint {
            size: [h, w],
            corner: [u[0] * (width as f64 - w).max(0.0), u[1] * (height as f64 - h).max(0.0)],
        }
    }

    /// Fraction of the frame covered by the crop.
    pub fn area(&self, height: usize, width: usize) -> f64 {
        self.size[0] * self.size[1] / (height * width) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineSequence {
    pub height: usize,
    pub width: usize,
    pub start: Endpoint,
    pub end: Endpoint,
    /// Per-frame `[h_t, w_t]`.
    pub sizes: Vec<[f64; 2]>,
    /// Per-frame `[cx_t, cy_t]`.
    pub corners: Vec<[f64; 2]>,
}

fn lerp(a: f64, b: f64, alpha: f64) -> f64 {
    a + alpha * (b - a)
}

impl AffineSequence {
    /// Linear interpolation between two endpoints with `alpha_t = t / (T-1)`.
    pub fn from_endpoints(frames: usize, height: usize, width: usize, start: Endpoint, end: Endpoint) -> AffineSequence {
        assert!(frames >= 1);
        let denom = (frames.max(2) - 1) as f64;
        let mut sizes = Vec::with_capacity(frames);
        let mut corners = Vec::with_capacity(frames);
        for t in 0..frames {
            let a = t as f64 / denom;
            sizes.push([lerp(start.size[0], end.size[0], a), lerp(start.size[1], end.size[1], a)]);
            corners.push([lerp(start.corner[0], end.corner[0], a), lerp(start.corner[1], end.corner[1], a)]);
        }
        AffineSequence {
            height,
            width,
            start,
            end,
            sizes,
            corners,
        }
    }

    pub fn identity(frames: usize, height: usize, width: usize) -> AffineSequence {
        let full = Endpoint {
            size: [height as f64, width as f64],
            corner: [0.0, 0.0],
        };
        Self::from_endpoints(frames, height, width, full, full)
    }

    pub fn frames(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_identity(&self) -> bool {
        self.sizes.iter().all(|s| s[0] == self.height as f64 && s[1] == self.width as f64)
            && self.corners.iter().all(|c| c[0] == 0.0 && c[1] == 0.0)
    }

    /// Per-frame scale `[sx, sy] = [w_t / W, h_t / H]` and offset `[cx, cy]`.
    pub fn coefficients(&self, t: usize) -> ([f64; 2], [f64; 2]) {
        let s = self.sizes[t];
        ([s[1] / self.width as f64, s[0] / self.height as f64], self.corners[t])
    }

    pub fn apply_point(&self, p: [f64; 2], t: usize) -> [f64; 2] {
        let (s, c) = self.coefficients(t);
        [s[0] * p[0] + c[0], s[1] * p[1] + c[1]]
    }

    pub fn invert_point(&self, p: [f64; 2], t: usize) -> [f64; 2] {
        let (s, c) = self.coefficients(t);
        [(p[0] - c[0]) / s[0], (p[1] - c[1]) / s[1]]
    }

    pub fn apply_query(&self, q: &QueryPoint) -> QueryPoint {
        let [x, y] = self.apply_point(q.xy(), q.t);
        QueryPoint::new(x, y, q.t)
    }
}

/// Draw a sequence from the affine family: for each endpoint independently
/// `A ~ U[0.6, 1]`, `a1, a2 ~ U[A, 1]`, relative height `(a1 + a2) / 2`,
/// relative width `A / h`, corner uniform over in-frame placements.
pub fn sample_affine<R: Rng + ?Sized>(frames: usize, height: usize, width: usize, rng: &mut R) -> AffineSequence {
    let mut endpoint = || {
        let area = rng.gen_range(MIN_AREA..=1.0);
        let a1 = rng.gen_range(area..=1.0);
        let a2 = rng.gen_range(area..=1.0);
        let u = [rng.gen::<f64>(), rng.gen::<f64>()];
        Endpoint::from_draws(height, width, area, a1, a2, u)
    };
    let start = endpoint();
    let end = endpoint();
    AffineSequence::from_endpoints(frames, height, width, start, end)
}

/// Warp every frame through `seq` by inverse mapping: destination pixel `p`
/// takes the bilinear sample of the source at `phi_t^-1(p)` when that point
/// lies inside the source's pixel-center hull `[0, W-1] x [0, H-1]`, and 0
/// otherwise.
pub fn resample_video(video: &Video, seq: &AffineSequence) -> Video {
    assert_eq!((video.height(), video.width(), video.frames()), (seq.height, seq.width, seq.frames()), "sequence/video dims");
    if seq.is_identity() {
        return video.clone();
    }
    let (h, w) = (video.height(), video.width());
    let mut out = Video::zeros(video.frames(), h, w);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    for t in 0..video.frames() {
        let src = video.frame(t);
        let dst = out.frame_mut(t);
        for y in 0..h {
            for x in 0..w {
                let [sx, sy] = seq.invert_point([x as f64, y as f64], t);
                if !(0.0..=xmax).contains(&sx) || !(0.0..=ymax).contains(&sy) {
                    continue;
                }
                let rgb = bilinear_rgb(src, h, w, sx, sy);
                dst[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    out
}

/// Bilinear RGB read from one `H x W x 3` frame; taps outside read 0.
pub fn bilinear_rgb(frame: &[f32], h: usize, w: usize, x: f64, y: f64) -> [f32; 3] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = [0.0f64; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
            let wgt = wx * wy;
            if wgt == 0.0 || xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                continue;
            }
            let i = (yi as usize * w + xi as usize) * 3;
            for c in 0..3 {
                acc[c] += wgt * frame[i + c] as f64;
            }
        }
    }
    [acc[0] as f32, acc[1] as f32, acc[2] as f32]
}

/// Corruptions applied to the student view only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub jpeg: bool,
    pub jpeg_quality: [u8; 2],
    /// Draw a fresh quality per frame instead of one per clip.
    pub per_frame_quality: bool,
    pub affine: bool,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            jpeg: true,
            jpeg_quality: [30, 90],
            per_frame_quality: false,
            affine: true,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<(), JpegError> {
        let [lo, hi] = self.jpeg_quality;
        if lo < 1 || hi > 100 || lo > hi {
            return Err(JpegError::Quality(lo.max(hi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StudentView {
    pub video: Video,
    /// Student queries, already mapped through `seq`.
    pub queries: Vec<QueryPoint>,
    pub seq: AffineSequence,
    /// JPEG quality used per frame (empty when JPEG is off).
    pub qualities: Vec<u8>,
}

/// JPEG-degrade (when enabled), then warp through a fresh affine sequence
/// (when enabled). The input video is left untouched; it is the teacher view.
pub fn make_student_view<R: Rng + ?Sized>(video: &Video, queries: &[QueryPoint], rng: &mut R, cfg: &DegradationConfig) -> StudentView {
    let (tn, h, w) = (video.frames(), video.height(), video.width());
    let mut degraded = video.clone();
    let mut qualities = Vec::new();
    if cfg.jpeg {
        let [lo, hi] = cfg.jpeg_quality;
        let clip_q = rng.gen_range(lo..=hi);
        for t in 0..tn {
            let q = if cfg.per_frame_quality { rng.gen_range(lo..=hi) } else { clip_q };
            qualities.push(q);
            let out = jpeg_degrade(video.frame(t), h, w, q).expect("quality validated by config");
            degraded.frame_mut(t).copy_from_slice(&out);
        }
    }
    let seq = if cfg.affine {
        sample_affine(tn, h, w, rng)
    } else {
        AffineSequence::identity(tn, h, w)
    };
    let warped = if cfg.affine { resample_video(&degraded, &seq) } else { degraded };
    StudentView {
        video: warped,
        queries: queries.iter().map(|q| seq.apply_query(q)).collect(),
        seq,
        qualities,
    }
}
