//! Synthetic layered-2.5D videos with analytic point tracks.
//!
//! Scenes consist of rigid textured sprites (ellipses and regular polygons)
//! moving with constant linear and angular velocity in front of a textured,
//! slowly panning background. Each sprite has a constant depth, which fixes
//! the occlusion order. Tracks are computed from the rigid motion itself;
//! occlusion flags come from the same analytic frontmost test that produces
//! the segmentation, so no pixel-based estimation is involved.

pub mod io;
mod queries;
mod texture;

pub use queries::{front_side_neighbors, is_back_side, sample_ground_truth_queries, snap_query, SampledQuery};
pub use texture::{Texture, TextureFamily};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng as StreamRng};
use crate::types::{GroundTruthTrack, QueryPoint, Video};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("no visible sprite pixels to sample queries from")]
    NoVisibleSpritePixels,
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt clip: {0}")]
    Corrupt(String),
}

/// Which half of the two-domain setup a scene belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Labeled source domain used for supervised training.
    A,
    /// Unlabeled target domain used for bootstrapping and evaluation.
    B,
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(format!("unknown domain {other:?} (expected A or B)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprite_count: usize,
    pub texture_family: TextureFamily,
    pub background_family: TextureFamily,
    /// Sprite speed range, pixels per frame.
    pub speed: (f64, f64),
    /// Magnitude range of angular velocity, radians per frame.
    pub angular_speed: (f64, f64),
    /// Background pan speed range, pixels per frame.
    pub background_speed: (f64, f64),
    /// Sprite radius range, pixels.
    pub sprite_radius: (f64, f64),
    /// Probability that a ground-truth query is drawn from sprite pixels.
    pub object_bias: f64,
    pub snap_to_occluder: bool,
    pub tracks_per_scene: usize,
    pub seed: u64,
}

impl SceneConfig {
    pub fn domain(domain: Domain, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        let base = SceneConfig {
            frames,
            height,
            width,
            sprite_count: 3,
            texture_family: TextureFamily::Checker,
            background_family: TextureFamily::Checker,
            speed: (0.2, 1.0),
            angular_speed: (0.0, 0.02),
            background_speed: (0.0, 0.4),
            sprite_radius: (0.14 * height.min(width) as f64, 0.24 * height.min(width) as f64),
            object_bias: 0.8,
            snap_to_occluder: true,
            tracks_per_scene: 48,
            seed,
        };
        match domain {
            Domain::A => base,
            Domain::B => SceneConfig {
                texture_family: TextureFamily::Noise,
                background_family: TextureFamily::Gradient,
                speed: (0.8, 2.0),
                angular_speed: (0.01, 0.05),
                background_speed: (0.2, 0.8),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.frames < 2 {
            return bad("frames must be >= 2");
        }
        if self.height < 16 || self.width < 16 {
            return bad("height and width must be >= 16");
        }
        if self.sprite_count < 1 {
            return bad("sprite_count must be >= 1");
        }
        let (rlo, rhi) = self.sprite_radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad("sprite radius range must be positive and ordered");
        }
        if 2.0 * rhi > self.height.min(self.width) as f64 {
            return bad("sprite larger than frame");
        }
        for (lo, hi) in [self.speed, self.angular_speed, self.background_speed] {
            if !(lo >= 0.0 && lo <= hi) {
                return bad("motion ranges must be non-negative and ordered");
            }
        }
        if !(0.0..=1.0).contains(&self.object_bias) {
            return bad("object_bias must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Ellipse { rx: f64, ry: f64 },
    /// Regular convex polygon with the given circumradius.
    Polygon { radius: f64, sides: usize },
}

impl Shape {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Shape::Ellipse { rx, ry } => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
            Shape::Polygon { radius, sides } => {
                let n = sides as f64;
                let apothem = radius * (std::f64::consts::PI / n).cos();
                (0..sides).all(|k| {
                    let a = std::f64::consts::TAU * k as f64 / n + std::f64::consts::PI / n;
                    u * a.cos() + v * a.sin() <= apothem
                })
            }
        }
    }

    pub fn extent(&self) -> f64 {
        match *self {
            Shape::Ellipse { rx, ry } => rx.max(ry),
            Shape::Polygon { radius, .. } => radius,
        }
    }
}

/// Rigid textured object; `id >= 1` (0 is the background).
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub id: u16,
    pub shape: Shape,
    pub texture: Texture,
    pub depth: f64,
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub angle: f64,
    pub angular_velocity: f64,
}

impl Sprite {
    fn pose(&self, t: f64) -> ([f64; 2], f64) {
        (
            [self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t],
            self.angle + self.angular_velocity * t,
        )
    }

    pub fn to_world(&self, local: [f64; 2], t: usize) -> [f64; 2] {
        let (c, a) = self.pose(t as f64);
        let (s, co) = a.sin_cos();
        [co * local[0] - s * local[1] + c[0], s * local[0] + co * local[1] + c[1]]
    }

    pub fn to_local(&self, world: [f64; 2], t: usize) -> [f64; 2] {
        let (c, a) = self.pose(t as f64);
        let (s, co) = a.sin_cos();
        let (dx, dy) = (world[0] - c[0], world[1] - c[1]);
        [co * dx + s * dy, -s * dx + co * dy]
    }

    pub fn covers(&self, world: [f64; 2], t: usize) -> bool {
        let l = self.to_local(world, t);
        self.shape.contains(l[0], l[1])
    }
}

/// Infinite textured plane translating at constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub texture: Texture,
    pub velocity: [f64; 2],
    pub depth: f64,
}

impl Background {
    pub fn to_world(&self, local: [f64; 2], t: usize) -> [f64; 2] {
        [local[0] + self.velocity[0] * t as f64, local[1] + self.velocity[1] * t as f64]
    }

    pub fn to_local(&self, world: [f64; 2], t: usize) -> [f64; 2] {
        [world[0] - self.velocity[0] * t as f64, world[1] - self.velocity[1] * t as f64]
    }
}

/// A physical surface point: object id plus object-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub owner: u16,
    pub local: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub video: Video,
    /// `T x H x W`, smaller is nearer.
    pub depth: Vec<f32>,
    /// `T x H x W` frontmost object id (0 = background).
    pub segmentation: Vec<u16>,
    /// Sorted nearest first.
    pub sprites: Vec<Sprite>,
    pub background: Background,
    pub tracks: Vec<GroundTruthTrack>,
    pub queries: Vec<QueryPoint>,
    pub track_owners: Vec<u16>,
}

fn uniform(rng: &mut StreamRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn random_direction(rng: &mut StreamRng, speed: f64) -> [f64; 2] {
    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    [speed * a.cos(), speed * a.sin()]
}

/// Generate a scene; deterministic in `cfg` (including `cfg.seed`).
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, 0x5ce7e);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mid = (cfg.frames - 1) as f64 / 2.0;

    let mut layers: Vec<usize> = (0..cfg.sprite_count).collect();
    for i in (1..layers.len()).rev() {
        let j = rng.gen_range(0..=i);
        layers.swap(i, j);
    }
    let mut sprites = Vec::with_capacity(cfg.sprite_count);
    for (i, &layer) in layers.iter().enumerate() {
        let r = uniform(&mut rng, cfg.sprite_radius);
        let shape = if rng.gen_bool(0.5) {
            Shape::Ellipse {
                rx: r,
                ry: r * rng.gen_range(0.6..1.0),
            }
        } else {
            Shape::Polygon {
                radius: r,
                sides: rng.gen_range(3..=6),
            }
        };
        let speed = uniform(&mut rng, cfg.speed);
        let velocity = random_direction(&mut rng, speed);
        let mid_center = [rng.gen_range(0.2 * w..0.8 * w), rng.gen_range(0.2 * h..0.8 * h)];
        let omega = uniform(&mut rng, cfg.angular_speed) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sprites.push(Sprite {
            id: (i + 1) as u16,
            shape,
            texture: Texture::sample(cfg.texture_family, &mut rng),
            depth: 2.0 + layer as f64,
            center: [mid_center[0] - velocity[0] * mid, mid_center[1] - velocity[1] * mid],
            velocity,
            angle: rng.gen_range(0.0..std::f64::consts::TAU),
            angular_velocity: omega,
        });
    }
    let texture = Texture::sample(cfg.background_family, &mut rng);
    let bg_speed = uniform(&mut rng, cfg.background_speed);
    let background = Background {
        texture,
        velocity: random_direction(&mut rng, bg_speed),
        depth: 50.0,
    };
    let mut scene = render_scene(cfg, sprites, background);
    if cfg.tracks_per_scene > 0 {
        let mut qrng = rng::stream(cfg.seed, 0x9a3e);
        let sampled = sample_ground_truth_queries(&scene, cfg.tracks_per_scene, cfg.snap_to_occluder, &mut qrng)?;
        for s in sampled {
            scene.tracks.push(s.track);
            scene.queries.push(s.query);
            scene.track_owners.push(s.owner);
        }
    }
    Ok(scene)
}

const SUPERSAMPLE: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

/// Rasterise a hand-built or generated scene. Colours are 2x2 supersampled
/// and quantised to 8 bits so that the interchange format round-trips
/// exactly; depth and segmentation are evaluated at pixel centers.
pub fn render_scene(cfg: &SceneConfig, mut sprites: Vec<Sprite>, background: Background) -> Scene {
    sprites.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));
    let (tn, hn, wn) = (cfg.frames, cfg.height, cfg.width);
    let mut video = vec![0f32; tn * hn * wn * 3];
    let mut depth = vec![0f32; tn * hn * wn];
    let mut seg = vec![0u16; tn * hn * wn];
    let color_at = |p: [f64; 2], t: usize| -> [f64; 3] {
        for s in &sprites {
            let l = s.to_local(p, t);
            if s.shape.contains(l[0], l[1]) {
                return s.texture.color(l[0], l[1]);
            }
        }
        let l = background.to_local(p, t);
        background.texture.color(l[0], l[1])
    };
    for t in 0..tn {
        for y in 0..hn {
            for x in 0..wn {
                let i = (t * hn + y) * wn + x;
                let p = [x as f64, y as f64];
                match sprites.iter().find(|s| s.covers(p, t)) {
                    Some(s) => {
                        seg[i] = s.id;
                        depth[i] = s.depth as f32;
                    }
                    None => {
                        seg[i] = 0;
                        depth[i] = background.depth as f32;
                    }
                }
                let mut c = [0.0; 3];
                for (dx, dy) in SUPERSAMPLE {
                    let s = color_at([p[0] + dx, p[1] + dy], t);
                    for k in 0..3 {
                        c[k] += 0.25 * s[k];
                    }
                }
                for k in 0..3 {
                    video[i * 3 + k] = (c[k].clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0;
                }
            }
        }
    }
    Scene {
        config: cfg.clone(),
        video: Video::new(tn, hn, wn, video),
        depth,
        segmentation: seg,
        sprites,
        background,
        tracks: Vec::new(),
        queries: Vec::new(),
        track_owners: Vec::new(),
    }
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height() + y) * self.width() + x
    }

    pub fn segment_at(&self, t: usize, y: usize, x: usize) -> u16 {
        self.segmentation[self.index(t, y, x)]
    }

    pub fn depth_frame(&self, t: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.depth[t * n..(t + 1) * n]
    }

    /// Analytic frontmost object at a world point.
    pub fn frontmost(&self, p: [f64; 2], t: usize) -> u16 {
        self.sprites.iter().find(|s| s.covers(p, t)).map_or(0, |s| s.id)
    }

    /// The surface point seen at pixel center `(x, y)` on frame `t`.
    pub fn anchor_at(&self, x: usize, y: usize, t: usize) -> Anchor {
        let p = [x as f64, y as f64];
        let owner = self.segment_at(t, y, x);
        let local = match self.sprites.iter().find(|s| s.id == owner) {
            Some(s) => s.to_local(p, t),
            None => self.background.to_local(p, t),
        };
        Anchor { owner, local }
    }

    pub fn anchor_position(&self, a: &Anchor, t: usize) -> [f64; 2] {
        match self.sprites.iter().find(|s| s.id == a.owner) {
            Some(s) => s.to_world(a.local, t),
            None => self.background.to_world(a.local, t),
        }
    }

    /// Full trajectory of a surface point. A frame is occluded when the
    /// position leaves the pixel-center hull or another object is frontmost
    /// at the rounded pixel.
    pub fn track(&self, a: &Anchor) -> GroundTruthTrack {
        let mut positions = Vec::with_capacity(self.frames());
        let mut occluded = Vec::with_capacity(self.frames());
        for t in 0..self.frames() {
            let p = self.anchor_position(a, t);
            let (rx, ry) = (p[0].round(), p[1].round());
            let inside = p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (self.width() - 1) as f64 && p[1] <= (self.height() - 1) as f64;
            let visible = inside && self.segment_at(t, ry as usize, rx as usize) == a.owner;
            positions.push(p);
            occluded.push(!visible);
        }
        GroundTruthTrack { positions, occluded }
    }
}

#[cfg(test)]
mod tests;
