use rand::Rng;

use super::*;
use crate::types::distance;
use crate::rng::stream;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        fine_channels: 6,
        mid_channels: 8,
        feature_dim: 8,
        head_hidden: 6,
        refine_hidden: 8,
        ..Default::default()
    }
}

fn random_video(seed: u64, tn: usize, h: usize, w: usize) -> Video {
    let mut rng = stream(seed, 1);
    Video::new(tn, h, w, (0..tn * h * w * 3).map(|_| rng.gen::<f32>()).collect())
}

fn random_queries(seed: u64, n: usize, tn: usize, h: usize, w: usize) -> Vec<QueryPoint> {
    let mut rng = stream(seed, 2);
    (0..n)
        .map(|_| QueryPoint::new(rng.gen_range(0.0..(w - 1) as f64), rng.gen_range(0.0..(h - 1) as f64), rng.gen_range(0..tn)))
        .collect()
}

/// Perturb the refinement output so iterations differ.
fn perturbed(mut p: ModelParams, seed: u64) -> ModelParams {
    let mut rng = stream(seed, 3);
    for (name, t) in p.tensors.iter_mut() {
        if name.starts_with("refine/out") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    p
}

#[test]
fn init_is_deterministic_and_within_budget() {
    let cfg = ModelConfig::default();
    let a = init_params(3, &cfg).unwrap();
    let b = init_params(3, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params(4, &cfg).unwrap());
    assert!(a.param_count() <= 200_000, "{} params", a.param_count());
    assert_eq!(a.param_count(), cfg.param_count());
    a.validate().unwrap();
    assert!(init_params(0, &ModelConfig { iterations: 1, ..cfg }).is_err());
}

#[test]
fn zero_init_refinement_repeats_iteration_zero() {
    let cfg = ModelConfig { iterations: 3, ..small_cfg() };
    let p = init_params(1, &cfg).unwrap();
    let v = random_video(0, 5, 24, 24);
    let q = random_queries(0, 4, 5, 24, 24);
    for pred in predict(&p, &v, &q).unwrap() {
        assert_eq!(pred.iterations.len(), 3);
        assert_eq!(pred.iterations[1], pred.iterations[0]);
        assert_eq!(pred.iterations[2], pred.iterations[0]);
    }
}

#[test]
fn identical_frames_give_constant_tracks() {
    let p = perturbed(init_params(2, &small_cfg()).unwrap(), 0);
    let one = random_video(1, 1, 24, 24);
    let v = Video::new(6, 24, 24, one.data().repeat(6));
    let q = random_queries(1, 5, 6, 24, 24);
    for pred in predict(&p, &v, &q).unwrap() {
        let last = pred.last();
        for t in 1..6 {
            assert!((last.positions[t][0] - last.positions[0][0]).abs() < 1e-4);
            assert!((last.positions[t][1] - last.positions[0][1]).abs() < 1e-4);
            assert!((last.occlusion[t] - last.occlusion[0]).abs() < 1e-4);
            assert!((last.uncertainty[t] - last.uncertainty[0]).abs() < 1e-4);
        }
    }
}

#[test]
fn queries_are_tracked_independently() {
    let p = perturbed(init_params(3, &small_cfg()).unwrap(), 1);
    let v = random_video(2, 6, 24, 24);
    let q = random_queries(2, 6, 6, 24, 24);
    let batched = predict(&p, &v, &q).unwrap();
    for (i, qi) in q.iter().enumerate() {
        let single = predict(&p, &v, std::slice::from_ref(qi)).unwrap();
        for (a, b) in batched[i].iterations.iter().zip(&single[0].iterations) {
            for t in 0..6 {
                assert!((a.positions[t][0] - b.positions[t][0]).abs() < 1e-5);
                assert!((a.positions[t][1] - b.positions[t][1]).abs() < 1e-5);
                assert!((a.occlusion[t] - b.occlusion[t]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn frame_features_depend_on_their_frame_only() {
    let cfg = small_cfg();
    let p = init_params(4, &cfg).unwrap();
    let v = random_video(3, 4, 16, 16);
    let mut w = v.clone();
    w.frame_mut(2).iter_mut().for_each(|x| *x = 1.0 - *x);
    let feats = |video: &Video| {
        let mut g = Graph::<f32>::new();
        let vars = p.bind(&mut g, false).unwrap();
        let f = backbone(&mut g, &vars, &cfg, video).unwrap();
        (g.value(f.fine).clone(), g.value(f.coarse).clone())
    };
    let (fa, ca) = feats(&v);
    let (fb, cb) = feats(&w);
    let fine_len = fa.numel() / 4;
    let coarse_len = ca.numel() / 4;
    for t in 0..4 {
        let same_f = fa.data()[t * fine_len..(t + 1) * fine_len] == fb.data()[t * fine_len..(t + 1) * fine_len];
        let same_c = ca.data()[t * coarse_len..(t + 1) * coarse_len] == cb.data()[t * coarse_len..(t + 1) * coarse_len];
        assert_eq!(same_f, t != 2);
        assert_eq!(same_c, t != 2);
    }
}

#[test]
fn soft_argmax_moves_continuously_with_temperature() {
    let base = init_params(5, &small_cfg()).unwrap();
    let v = random_video(4, 3, 24, 24);
    let q = random_queries(4, 2, 3, 24, 24);
    let at = |tau: f64| {
        let mut p = base.clone();
        p.config.temperature = tau;
        predict(&p, &v, &q).unwrap()[0].iterations[0].positions[1]
    };
    let (a, b, c) = (at(0.05), at(0.05 * (1.0 + 1e-4)), at(0.1));
    assert!(distance(a, b) < 1e-2);
    assert!(distance(a, c) > distance(a, b));
}

#[test]
fn queries_out_of_bounds_are_rejected() {
    let p = init_params(6, &small_cfg()).unwrap();
    let v = random_video(5, 3, 16, 16);
    assert!(matches!(predict(&p, &v, &[QueryPoint::new(15.5, 2.0, 0)]), Err(TrackerError::QueryOutOfBounds { .. })));
    assert!(matches!(predict(&p, &v, &[QueryPoint::new(2.0, 2.0, 3)]), Err(TrackerError::QueryOutOfBounds { .. })));
}

#[test]
fn checkpoint_round_trips() {
    let p = perturbed(init_params(7, &small_cfg()).unwrap(), 2);
    let mut ckpt = Checkpoint::new(p);
    ckpt.extra.insert("__adam_sup/step".into(), Tensor::scalar(12.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.btap");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"BTAP");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    std::fs::write(&path, wrong).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(TrackerError::Checkpoint(_))));
}
