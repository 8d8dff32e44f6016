//! Types shared across pipeline stages.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};

/// Dense `T x H x W x 3` clip with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), frames * height * width * 3, "video data length");
        Self {
            frames,
            height,
            width,
            data,
        }
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self::new(frames, height, width, vec![0.0; frames * height * width * 3])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = ((t * self.height + y) * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Consecutive frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Video {
        let n = self.frame_len();
        Video::new(len, self.height, self.width, self.data[start * n..(start + len) * n].to_vec())
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_vec(
            &[self.frames, self.height, self.width, 3],
            self.data.iter().map(|&v| F::of(v as f64)).collect(),
        )
    }

    /// FNV-1a over the raw bit patterns; identifies a clip's exact contents.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [self.frames, self.height, self.width] {
            h = (h ^ v as u64).wrapping_mul(0x100_0000_01b3);
        }
        for v in &self.data {
            h = (h ^ v.to_bits() as u64).wrapping_mul(0x100_0000_01b3);
        }
        h
    }
}

/// Query `(x, y)` in pixels on frame `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub x: f64,
    pub y: f64,
    pub t: usize,
}

impl QueryPoint {
    pub fn new(x: f64, y: f64, t: usize) -> Self {
        Self { x, y, t }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Inside the pixel-center frame `[0, W-1] x [0, H-1]` at a valid frame.
    pub fn in_bounds(&self, frames: usize, height: usize, width: usize) -> bool {
        self.t < frames
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x <= (width - 1) as f64
            && self.y <= (height - 1) as f64
    }
}

/// Ground-truth trajectory: per-frame position and occlusion flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub positions: Vec<[f64; 2]>,
    pub occluded: Vec<bool>,
}

impl GroundTruthTrack {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn visible_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.occluded.iter().enumerate().filter(|(_, &o)| !o).map(|(t, _)| t)
    }

    pub fn window(&self, start: usize, len: usize) -> GroundTruthTrack {
        GroundTruthTrack {
            positions: self.positions[start..start + len].to_vec(),
            occluded: self.occluded[start..start + len].to_vec(),
        }
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
