//! Codec-equivalent JPEG corruption: YCbCr, 8x8 DCT, quantise with the
//! standard tables scaled by quality, dequantise, inverse DCT.
//!
//! No chroma subsampling and no entropy coding; only the lossy steps matter.

use std::f64::consts::PI;
use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JpegError {
    #[error("JPEG quality must be in 1..=100, got {0}")]
    Quality(u8),
}

const LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Luma and chroma tables for `quality` (IJG scaling, entries in 1..=255).
pub fn quant_tables(quality: u8) -> Result<([f64; 64], [f64; 64]), JpegError> {
    if !(1..=100).contains(&quality) {
        return Err(JpegError::Quality(quality));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let make = |base: &[u16; 64]| {
        let mut out = [0.0; 64];
        for (o, &b) in out.iter_mut().zip(base) {
            *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
        }
        out
    };
    Ok((make(&LUMA), make(&CHROMA)))
}

fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

/// Orthonormal 2-D DCT-II of a row-major 8x8 block.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Inverse of [`dct8x8`].
pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

fn to_ycbcr(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0,
    ]
}

fn to_rgb(ycc: [f64; 3]) -> [f64; 3] {
    let [y, cb, cr] = ycc;
    let (cb, cr) = (cb - 128.0, cr - 128.0);
    [y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb]
}

/// Degrade one `H x W x 3` frame with values in `[0, 1]`. Partial edge
/// blocks are padded by edge replication; the output is clamped to `[0, 1]`.
pub fn jpeg_degrade(frame: &[f32], h: usize, w: usize, quality: u8) -> Result<Vec<f32>, JpegError> {
    assert_eq!(frame.len(), h * w * 3);
    let (luma, chroma) = quant_tables(quality)?;
    let planes: Vec<[f64; 3]> = frame
        .chunks_exact(3)
        .map(|p| to_ycbcr([p[0] as f64 * 255.0, p[1] as f64 * 255.0, p[2] as f64 * 255.0]))
        .collect();
    let mut recon = vec![[0.0f64; 3]; h * w];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for c in 0..3 {
                let table = if c == 0 { &luma } else { &chroma };
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * 8 + x] = planes[sy * w + sx][c] - 128.0;
                    }
                }
                let mut coef = dct8x8(&block);
                for (k, q) in coef.iter_mut().zip(table) {
                    *k = (*k / q).round() * q;
                }
                let back = idct8x8(&coef);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        recon[(by + y) * w + bx + x][c] = back[y * 8 + x] + 128.0;
                    }
                }
            }
        }
    }
    Ok(recon
        .into_iter()
        .flat_map(|ycc| to_rgb(ycc).map(|v| (v / 255.0).clamp(0.0, 1.0) as f32))
        .collect())
}
