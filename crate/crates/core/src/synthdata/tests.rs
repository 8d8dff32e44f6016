use super::io::{read_clip, write_clip, Clip};
use super::*;
use crate::rng::stream;

fn small_cfg(seed: u64) -> SceneConfig {
    SceneConfig {
        tracks_per_scene: 32,
        ..SceneConfig::domain(Domain::A, 8, 32, 32, seed)
    }
}

#[test]
fn static_scene_has_static_visible_tracks() {
    let cfg = SceneConfig {
        sprite_count: 1,
        speed: (0.0, 0.0),
        angular_speed: (0.0, 0.0),
        background_speed: (0.0, 0.0),
        ..small_cfg(3)
    };
    let scene = generate_scene(&cfg).unwrap();
    assert_eq!(scene.tracks.len(), 32);
    for tr in &scene.tracks {
        for t in 1..cfg.frames {
            assert!((tr.positions[t][0] - tr.positions[0][0]).abs() < 1e-9);
            assert!((tr.positions[t][1] - tr.positions[0][1]).abs() < 1e-9);
        }
        assert!(tr.occluded.iter().all(|&o| !o));
    }
}

fn two_sprite_scene() -> Scene {
    let cfg = SceneConfig {
        sprite_count: 2,
        tracks_per_scene: 0,
        ..small_cfg(0)
    };
    let tex = Texture::Checker { cell: 4.0, key: 1 };
    let near = Sprite {
        id: 1,
        shape: Shape::Ellipse { rx: 5.0, ry: 5.0 },
        texture: tex.clone(),
        depth: 2.0,
        center: [4.0, 16.0],
        velocity: [3.0, 0.0],
        angle: 0.0,
        angular_velocity: 0.0,
    };
    let far = Sprite {
        id: 2,
        shape: Shape::Ellipse { rx: 6.0, ry: 6.0 },
        texture: tex.clone(),
        depth: 3.0,
        center: [19.0, 16.0],
        velocity: [0.0, 0.0],
        angle: 0.0,
        angular_velocity: 0.0,
    };
    let bg = Background {
        texture: Texture::Checker { cell: 3.0, key: 2 },
        velocity: [0.0, 0.0],
        depth: 50.0,
    };
    render_scene(&cfg, vec![far, near], bg)
}

#[test]
fn nearer_sprite_occludes_far_track() {
    let scene = two_sprite_scene();
    let anchor = scene.anchor_at(19, 16, 0);
    assert_eq!(anchor.owner, 2);
    let tr = scene.track(&anchor);
    assert!(!tr.occluded[0]);
    // near sprite center reaches x = 19 at t = 5
    assert!(tr.occluded[5]);
    for t in 0..scene.frames() {
        let covered = (4.0 + 3.0 * t as f64 - 19.0).abs() <= 5.0;
        assert_eq!(tr.occluded[t], covered, "frame {t}");
    }
}

#[test]
fn generation_is_bit_reproducible() {
    let cfg = SceneConfig::domain(Domain::B, 8, 32, 32, 17);
    let a = generate_scene(&cfg).unwrap();
    let b = generate_scene(&cfg).unwrap();
    assert_eq!(a.video, b.video);
    assert_eq!(a.tracks, b.tracks);
    assert_eq!(a.queries, b.queries);
    assert_eq!(a.depth, b.depth);
    let c = generate_scene(&SceneConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.video, c.video);
}

#[test]
fn visible_points_sit_on_their_own_segment() {
    for seed in 0..6 {
        let scene = generate_scene(&SceneConfig::domain(Domain::B, 8, 32, 32, seed)).unwrap();
        for (tr, &owner) in scene.tracks.iter().zip(&scene.track_owners) {
            for t in tr.visible_frames() {
                let p = tr.positions[t];
                let (x, y) = (p[0].round() as usize, p[1].round() as usize);
                assert_eq!(scene.segment_at(t, y, x), owner);
            }
        }
    }
}

#[test]
fn occlusion_matches_analytic_frontmost_test() {
    for seed in 0..6 {
        let scene = generate_scene(&SceneConfig::domain(Domain::A, 8, 32, 32, 100 + seed)).unwrap();
        for (tr, &owner) in scene.tracks.iter().zip(&scene.track_owners) {
            for t in 0..scene.frames() {
                let p = tr.positions[t];
                let (rx, ry) = (p[0].round(), p[1].round());
                let inside = p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= 31.0 && p[1] <= 31.0;
                let visible = inside && scene.frontmost([rx, ry], t) == owner;
                assert_eq!(tr.occluded[t], !visible);
            }
        }
    }
}

#[test]
fn sprite_tracks_follow_one_rigid_motion() {
    let scene = generate_scene(&SceneConfig::domain(Domain::B, 8, 32, 32, 9)).unwrap();
    for (tr, &owner) in scene.tracks.iter().zip(&scene.track_owners) {
        let Some(s) = scene.sprites.iter().find(|s| s.id == owner) else { continue };
        let l0 = s.to_local(tr.positions[0], 0);
        for t in 1..scene.frames() {
            let lt = s.to_local(tr.positions[t], t);
            assert!((lt[0] - l0[0]).abs() < 1e-9 && (lt[1] - l0[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn degenerate_configs_are_rejected() {
    let too_big = SceneConfig {
        sprite_radius: (10.0, 20.0),
        ..small_cfg(0)
    };
    assert!(matches!(generate_scene(&too_big), Err(SynthError::InvalidConfig(_))));
    let one_frame = SceneConfig { frames: 1, ..small_cfg(0) };
    assert!(generate_scene(&one_frame).is_err());
    let tiny = SceneConfig { height: 8, ..small_cfg(0) };
    assert!(generate_scene(&tiny).is_err());
}

#[test]
fn snap_has_no_effect_without_depth_edges() {
    let cfg = SceneConfig {
        tracks_per_scene: 0,
        object_bias: 0.0,
        ..small_cfg(0)
    };
    let off_screen = Sprite {
        id: 1,
        shape: Shape::Ellipse { rx: 3.0, ry: 3.0 },
        texture: Texture::Checker { cell: 4.0, key: 1 },
        depth: 2.0,
        center: [-100.0, -100.0],
        velocity: [0.0, 0.0],
        angle: 0.0,
        angular_velocity: 0.0,
    };
    let bg = Background {
        texture: Texture::Checker { cell: 3.0, key: 2 },
        velocity: [0.5, 0.0],
        depth: 50.0,
    };
    let scene = render_scene(&cfg, vec![off_screen], bg);
    let a = sample_ground_truth_queries(&scene, 200, true, &mut stream(5, 0)).unwrap();
    let b = sample_ground_truth_queries(&scene, 200, false, &mut stream(5, 0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn back_side_pixels_are_never_sampled() {
    let scene = two_sprite_scene();
    let (w, h) = (scene.width(), scene.height());
    let draws = sample_ground_truth_queries(&scene, 10_000, true, &mut stream(11, 0)).unwrap();
    let mut snapped = 0;
    for d in &draws {
        let t = d.query.t;
        // the originally sampled pixel is where the target track sits at t
        let p = d.track.positions[t];
        let (x, y) = (p[0].round() as usize, p[1].round() as usize);
        assert!(!is_back_side(scene.depth_frame(t), w, h, x, y));
        snapped += d.snapped as usize;
        if d.snapped {
            let (qx, qy) = (d.query.x as usize, d.query.y as usize);
            assert!(scene.depth_frame(t)[qy * w + qx] > 1.05 * scene.depth_frame(t)[y * w + x]);
        }
    }
    assert!(snapped > 0);
    // without snapping, far-side pixels do get drawn
    let plain = sample_ground_truth_queries(&scene, 10_000, false, &mut stream(11, 0)).unwrap();
    assert!(plain.iter().any(|d| {
        let t = d.query.t;
        is_back_side(scene.depth_frame(t), w, h, d.query.x as usize, d.query.y as usize)
    }));
}

#[test]
fn single_farther_neighbor_is_taken_half_the_time() {
    let mut depth = vec![1.0f32; 9];
    depth[5] = 2.0; // (x=2, y=1)
    let mut rng = stream(23, 0);
    let n = 10_000;
    let mut hits = 0;
    for _ in 0..n {
        if let Some(p) = snap_query(&depth, 3, 3, 1, 1, &mut rng) {
            assert_eq!(p, (2, 1));
            hits += 1;
        }
    }
    let freq = hits as f64 / n as f64;
    assert!((freq - 0.5).abs() <= 0.02, "replacement frequency {freq}");
}

#[test]
fn clip_directory_round_trips() {
    let scene = generate_scene(&small_cfg(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let clip = Clip::labeled(&scene);
    write_clip(dir.path(), &clip).unwrap();
    let back = read_clip(dir.path()).unwrap();
    assert_eq!(back.video, clip.video);
    assert_eq!(back.depth, clip.depth);
    assert_eq!(back.queries, clip.queries);
    assert_eq!(back.tracks, clip.tracks);

    let unl = dir.path().join("u");
    write_clip(&unl, &Clip::unlabeled(&scene)).unwrap();
    assert!(!unl.join("tracks.json").exists());
    assert!(read_clip(&unl).unwrap().tracks.is_none());

    std::fs::write(dir.path().join("frames.rgb8"), [0u8; 10]).unwrap();
    assert!(matches!(read_clip(dir.path()), Err(SynthError::Corrupt(_))));
}
