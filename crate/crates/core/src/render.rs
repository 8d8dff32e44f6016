//! Track overlays: rainbow-coloured tails, filled markers for visible points
//! and hollow markers for predicted occlusions.

use crate::tracker::IterationOutput;
use crate::types::Video;

/// Marker radius in pixels.
pub const MARKER_RADIUS: i64 = 2;

/// Distinct hue per track, as RGB8.
pub fn track_color(index: usize, count: usize) -> [u8; 3] {
    let h = index as f64 / count.max(1) as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Pixel containing a sub-pixel position (pixel centres at integers).
pub fn pixel_of(p: [f64; 2]) -> (i64, i64) {
    (p[0].round() as i64, p[1].round() as i64)
}

fn put(frame: &mut [u8], w: usize, h: usize, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        let i = (y as usize * w + x as usize) * 3;
        frame[i..i + 3].copy_from_slice(&c);
    }
}

fn line(frame: &mut [u8], w: usize, h: usize, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let x = a.0 as f64 + f * (b.0 - a.0) as f64;
        let y = a.1 as f64 + f * (b.1 - a.1) as f64;
        put(frame, w, h, x.round() as i64, y.round() as i64, c);
    }
}

/// RGB8 frames with `tracks` drawn over `video`. Each track leaves a tail
/// over the previous `tail` frames, fading toward the frame colour.
pub fn render_overlay(video: &Video, tracks: &[IterationOutput], tail: usize) -> Vec<Vec<u8>> {
    let (h, w) = (video.height(), video.width());
    (0..video.frames())
        .map(|t| {
            let mut frame: Vec<u8> = video.frame(t).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            for (i, tr) in tracks.iter().enumerate() {
                let c = track_color(i, tracks.len());
                let start = t.saturating_sub(tail);
                for s in start..t {
                    if tr.occluded(s) || tr.occluded(s + 1) {
                        continue;
                    }
                    let k = (s + 1 - start) as f64 / (t - start + 1) as f64;
                    let faded = [0, 1, 2].map(|j| (c[j] as f64 * (0.4 + 0.6 * k)) as u8);
                    line(&mut frame, w, h, pixel_of(tr.positions[s]), pixel_of(tr.positions[s + 1]), faded);
                }
                let (cx, cy) = pixel_of(tr.positions[t]);
                let hollow = tr.occluded(t);
                for dy in -MARKER_RADIUS..=MARKER_RADIUS {
                    for dx in -MARKER_RADIUS..=MARKER_RADIUS {
                        let ring = dx.abs() == MARKER_RADIUS || dy.abs() == MARKER_RADIUS;
                        if !hollow || ring {
                            put(&mut frame, w, h, cx + dx, cy + dy, c);
                        }
                    }
                }
            }
            frame
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(positions: Vec<[f64; 2]>, occ: Vec<bool>) -> IterationOutput {
        let n = positions.len();
        IterationOutput {
            positions,
            occlusion: occ.iter().map(|&o| if o { 2.0 } else { -2.0 }).collect(),
            uncertainty: vec![0.0; n],
        }
    }

    #[test]
    fn markers_sit_on_predictions_and_occlusion_is_hollow() {
        let video = Video::zeros(3, 20, 20);
        let tr = track(vec![[5.2, 6.7], [10.0, 10.0], [14.4, 3.5]], vec![false, true, false]);
        let frames = render_overlay(&video, std::slice::from_ref(&tr), 4);
        assert_eq!(frames.len(), 3);
        let c = track_color(0, 1);
        let at = |f: &[u8], x: i64, y: i64| -> [u8; 3] {
            let i = (y as usize * 20 + x as usize) * 3;
            [f[i], f[i + 1], f[i + 2]]
        };
        for t in [0, 2] {
            let (x, y) = pixel_of(tr.positions[t]);
            assert_eq!(at(&frames[t], x, y), c);
        }
        // Occluded: centre untouched, ring drawn.
        assert_eq!(at(&frames[1], 10, 10), [0, 0, 0]);
        assert_eq!(at(&frames[1], 12, 10), c);
    }

    #[test]
    fn colors_are_distinct() {
        let cs: Vec<[u8; 3]> = (0..6).map(|i| track_color(i, 6)).collect();
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(cs[i], cs[j]);
            }
        }
    }
}
