//! On-disk clip interchange format, one directory per clip:
//!
//! - `meta.json`: `{"T", "H", "W", "format_version"}`
//! - `frames.rgb8`: interleaved RGB bytes, frame-major then row-major
//! - `tracks.json`: `{"points": [[[x, y], ...]], "occluded": [[0|1, ...]]}`
//!   plus an optional `"query_points": [[x, y, t], ...]`
//! - `depth.f32`: optional little-endian `f32` depth, same ordering
//!
//! Coordinates use the pixel-center convention.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Scene, SynthError};
use crate::types::{GroundTruthTrack, QueryPoint, Video};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TracksFile {
    points: Vec<Vec<[f64; 2]>>,
    occluded: Vec<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_points: Option<Vec<[f64; 3]>>,
}

/// In-memory clip: video plus whatever labels are available.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video: Video,
    pub tracks: Option<Vec<GroundTruthTrack>>,
    pub queries: Option<Vec<QueryPoint>>,
    pub depth: Option<Vec<f32>>,
}

impl Clip {
    pub fn labeled(scene: &Scene) -> Clip {
        Clip {
            video: scene.video.clone(),
            tracks: Some(scene.tracks.clone()),
            queries: Some(scene.queries.clone()),
            depth: Some(scene.depth.clone()),
        }
    }

    pub fn unlabeled(scene: &Scene) -> Clip {
        Clip {
            video: scene.video.clone(),
            tracks: None,
            queries: None,
            depth: Some(scene.depth.clone()),
        }
    }

    /// Frames `start..start + len`, with labels cut to match. Queries outside
    /// the window are dropped along with their tracks.
    pub fn window(&self, start: usize, len: usize) -> Clip {
        let hw = self.video.height() * self.video.width();
        let (tracks, queries) = match (&self.tracks, &self.queries) {
            (Some(tr), Some(q)) => {
                let keep: Vec<usize> = (0..tr.len()).filter(|&i| q[i].t >= start && q[i].t < start + len).collect();
                (
                    Some(keep.iter().map(|&i| tr[i].window(start, len)).collect()),
                    Some(keep.iter().map(|&i| QueryPoint::new(q[i].x, q[i].y, q[i].t - start)).collect()),
                )
            }
            (Some(tr), None) => (Some(tr.iter().map(|t| t.window(start, len)).collect()), None),
            _ => (None, None),
        };
        Clip {
            video: self.video.window(start, len),
            tracks,
            queries,
            depth: self.depth.as_ref().map(|d| d[start * hw..(start + len) * hw].to_vec()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io(format!("{}: {e}", path.display()))
}

pub fn write_clip(dir: &Path, clip: &Clip) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let v = &clip.video;
    let meta = ClipMeta {
        frames: v.frames(),
        height: v.height(),
        width: v.width(),
        format_version: FORMAT_VERSION,
    };
    let p = dir.join("meta.json");
    fs::write(&p, serde_json::to_vec_pretty(&meta).unwrap()).map_err(|e| io_err(&p, e))?;

    let bytes: Vec<u8> = v.data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let p = dir.join("frames.rgb8");
    fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;

    if let Some(tracks) = &clip.tracks {
        let file = TracksFile {
            points: tracks.iter().map(|t| t.positions.clone()).collect(),
            occluded: tracks.iter().map(|t| t.occluded.iter().map(|&o| o as u8).collect()).collect(),
            query_points: clip
                .queries
                .as_ref()
                .map(|q| q.iter().map(|q| [q.x, q.y, q.t as f64]).collect()),
        };
        let p = dir.join("tracks.json");
        fs::write(&p, serde_json::to_vec(&file).unwrap()).map_err(|e| io_err(&p, e))?;
    }
    if let Some(depth) = &clip.depth {
        let bytes: Vec<u8> = depth.iter().flat_map(|d| d.to_le_bytes()).collect();
        let p = dir.join("depth.f32");
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

pub fn read_clip(dir: &Path) -> Result<Clip, SynthError> {
    let p = dir.join("meta.json");
    let meta: ClipMeta =
        serde_json::from_slice(&fs::read(&p).map_err(|e| io_err(&p, e))?).map_err(|e| SynthError::Corrupt(format!("{}: {e}", p.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(SynthError::Corrupt(format!("unsupported format version {}", meta.format_version)));
    }
    let (tn, h, w) = (meta.frames, meta.height, meta.width);
    let p = dir.join("frames.rgb8");
    let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
    if bytes.len() != tn * h * w * 3 {
        return Err(SynthError::Corrupt(format!("{}: expected {} bytes, found {}", p.display(), tn * h * w * 3, bytes.len())));
    }
    let video = Video::new(tn, h, w, bytes.iter().map(|&b| b as f32 / 255.0).collect());

    let p = dir.join("tracks.json");
    let (tracks, queries) = if p.exists() {
        let file: TracksFile =
            serde_json::from_slice(&fs::read(&p).map_err(|e| io_err(&p, e))?).map_err(|e| SynthError::Corrupt(format!("{}: {e}", p.display())))?;
        if file.points.len() != file.occluded.len() {
            return Err(SynthError::Corrupt("points/occluded track count differs".into()));
        }
        let mut tracks = Vec::with_capacity(file.points.len());
        for (pts, occ) in file.points.into_iter().zip(file.occluded) {
            if pts.len() != tn || occ.len() != tn {
                return Err(SynthError::Corrupt(format!("track length must equal T={tn}")));
            }
            if occ.iter().any(|&o| o > 1) {
                return Err(SynthError::Corrupt("occlusion flags must be 0 or 1".into()));
            }
            tracks.push(GroundTruthTrack {
                positions: pts,
                occluded: occ.into_iter().map(|o| o == 1).collect(),
            });
        }
        let queries = match file.query_points {
            Some(q) => {
                if q.len() != tracks.len() {
                    return Err(SynthError::Corrupt("query_points must have one entry per track".into()));
                }
                Some(q.iter().map(|q| QueryPoint::new(q[0], q[1], q[2] as usize)).collect())
            }
            None => None,
        };
        (Some(tracks), queries)
    } else {
        (None, None)
    };

    let p = dir.join("depth.f32");
    let depth = if p.exists() {
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        if bytes.len() != tn * h * w * 4 {
            return Err(SynthError::Corrupt(format!("{}: wrong size", p.display())));
        }
        Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    } else {
        None
    };
    Ok(Clip {
        video,
        tracks,
        queries,
        depth,
    })
}

/// Read every clip directory under `root` in lexicographic order.
pub fn read_dataset(root: &Path) -> Result<Vec<Clip>, SynthError> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("meta.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(SynthError::Io(format!("{}: no clips found", root.display())));
    }
    dirs.iter().map(|d| read_clip(d)).collect()
}
