//! Ground-truth query sampling with the snap-to-occluder bias.

use rand::Rng;

use super::{Scene, SynthError};
use crate::rng::Rng as StreamRng;
use crate::types::{GroundTruthTrack, QueryPoint};

/// Neighbour nearer than this fraction of a pixel's depth marks the pixel as
/// the far side of an occlusion boundary.
const BACK_SIDE_RATIO: f32 = 0.95;
/// Neighbour farther than this multiple of a pixel's depth marks the pixel
/// as the near side of an occlusion boundary.
const FRONT_SIDE_RATIO: f32 = 1.05;
const REPLACE_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SampledQuery {
    pub query: QueryPoint,
    pub track: GroundTruthTrack,
    /// Object the track belongs to (0 = background).
    pub owner: u16,
    /// The query was moved onto a farther neighbour.
    pub snapped: bool,
}

fn neighbors(w: usize, h: usize, x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i64..=1)
        .flat_map(move |dy| (-1i64..=1).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx != 0 || dy != 0)
        .filter_map(move |(dx, dy)| {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            (nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64).then_some((nx as usize, ny as usize))
        })
}

/// Pixel with a 3x3 neighbour at less than 95% of its own depth.
pub fn is_back_side(depth: &[f32], w: usize, h: usize, x: usize, y: usize) -> bool {
    let d = depth[y * w + x];
    neighbors(w, h, x, y).any(|(nx, ny)| depth[ny * w + nx] < BACK_SIDE_RATIO * d)
}

/// 3x3 neighbours deeper than 105% of the pixel's depth.
pub fn front_side_neighbors(depth: &[f32], w: usize, h: usize, x: usize, y: usize) -> Vec<(usize, usize)> {
    let d = depth[y * w + x];
    neighbors(w, h, x, y)
        .filter(|&(nx, ny)| depth[ny * w + nx] > FRONT_SIDE_RATIO * d)
        .collect()
}

/// With probability 0.5, a uniformly chosen farther neighbour to move the
/// query onto. Draws from `rng` only when such a neighbour exists.
pub fn snap_query(depth: &[f32], w: usize, h: usize, x: usize, y: usize, rng: &mut StreamRng) -> Option<(usize, usize)> {
    let cands = front_side_neighbors(depth, w, h, x, y);
    if cands.is_empty() || !rng.gen_bool(REPLACE_PROBABILITY) {
        return None;
    }
    Some(cands[rng.gen_range(0..cands.len())])
}

/// Sample `n` queries with their ground-truth tracks.
///
/// Query frames are uniform over frames that have a candidate pixel. With
/// probability `object_bias` the pixel comes from sprites, otherwise from the
/// whole frame. With `snap`, far-side boundary pixels are never candidates,
/// and near-side pixels are, half of the time, replaced by a farther
/// neighbour while keeping the near object's track as the target.
pub fn sample_ground_truth_queries(scene: &Scene, n: usize, snap: bool, rng: &mut StreamRng) -> Result<Vec<SampledQuery>, SynthError> {
    let (tn, h, w) = (scene.frames(), scene.height(), scene.width());
    let mut object_pools = Vec::with_capacity(tn);
    let mut all_pools = Vec::with_capacity(tn);
    for t in 0..tn {
        let depth = scene.depth_frame(t);
        let mut objects = Vec::new();
        let mut all = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if snap && is_back_side(depth, w, h, x, y) {
                    continue;
                }
                if scene.segment_at(t, y, x) != 0 {
                    objects.push((x, y));
                }
                all.push((x, y));
            }
        }
        object_pools.push(objects);
        all_pools.push(all);
    }
    let object_frames: Vec<usize> = (0..tn).filter(|&t| !object_pools[t].is_empty()).collect();
    let any_frames: Vec<usize> = (0..tn).filter(|&t| !all_pools[t].is_empty()).collect();
    if object_frames.is_empty() && scene.config.object_bias >= 1.0 || any_frames.is_empty() {
        return Err(SynthError::NoVisibleSpritePixels);
    }

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let on_object = !object_frames.is_empty() && rng.gen_bool(scene.config.object_bias);
        let (t, pool) = if on_object {
            let t = object_frames[rng.gen_range(0..object_frames.len())];
            (t, &object_pools[t])
        } else {
            let t = any_frames[rng.gen_range(0..any_frames.len())];
            (t, &all_pools[t])
        };
        let (x, y) = pool[rng.gen_range(0..pool.len())];
        let anchor = scene.anchor_at(x, y, t);
        let track = scene.track(&anchor);
        let (qx, qy, snapped) = match snap.then(|| snap_query(scene.depth_frame(t), w, h, x, y, rng)).flatten() {
            Some((nx, ny)) => (nx, ny, true),
            None => (x, y, false),
        };
        out.push(SampledQuery {
            query: QueryPoint::new(qx as f64, qy as f64, t),
            track,
            owner: anchor.owner,
            snapped,
        });
    }
    Ok(out)
}
