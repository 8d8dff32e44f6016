use rand::Rng;

use super::*;
use crate::rng::stream;
use crate::tracker::{forward, init_params, ModelConfig};
use crate::types::Video;

fn single(positions: Vec<[f64; 2]>, occ: Vec<f64>, unc: Vec<f64>) -> TrajectoryPrediction {
    TrajectoryPrediction {
        iterations: vec![IterationOutput {
            positions,
            occlusion: occ,
            uncertainty: unc,
        }],
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let gt = GroundTruthTrack {
        positions: vec![[3.0, 4.0], [5.0, 6.0], [7.0, 8.0]],
        occluded: vec![false, true, false],
    };
    let pred = single(gt.positions.clone(), vec![-10.0, 10.0, -10.0], vec![-10.0; 3]);
    let l = tapir_loss(&pred, &gt, &LossConfig::default()).unwrap();
    assert!(l < 0.01, "{l}");
}

#[test]
fn fully_occluded_track_only_pays_occlusion() {
    let gt = GroundTruthTrack {
        positions: vec![[0.0, 0.0]; 4],
        occluded: vec![true; 4],
    };
    let occ = vec![-1.0, 0.5, 2.0, 0.0];
    let pred = single(vec![[30.0, -20.0]; 4], occ.clone(), vec![3.0; 4]);
    let l = tapir_loss(&pred, &gt, &LossConfig::default()).unwrap();
    let want: f64 = occ.iter().map(|&o| softplus(o) - o).sum::<f64>() / 4.0;
    assert!((l - want).abs() < 1e-12);
}

#[test]
fn huber_hand_example() {
    let cfg = LossConfig::default();
    let gt = GroundTruthTrack {
        positions: vec![[10.0, 10.0]],
        occluded: vec![false],
    };
    let pred = single(vec![[13.0, 14.0]], vec![0.0], vec![-2.0]);
    let l = tapir_loss(&pred, &gt, &cfg).unwrap();
    // 4.5 Huber + ln 2 occlusion BCE + BCE(-2, u = 0) since 5 < 6
    let want = 4.5 + 2f64.ln() + softplus(-2.0);
    assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    // with d = 7 > 6 the uncertainty target flips to 1
    let far = single(vec![[10.0, 17.0]], vec![0.0], vec![-2.0]);
    let l = tapir_loss(&far, &gt, &cfg).unwrap();
    let want = (7.0 - 0.5) + 2f64.ln() + softplus(-2.0) + 2.0;
    assert!((l - want).abs() < 1e-12);
}

#[test]
fn huber_is_continuous_at_the_knee() {
    let at = |d: f64| {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[1, 2], vec![d, 0.0])).unwrap();
        let h = g.huber_norm(x, 1.0).unwrap();
        let s = g.sum(h).unwrap();
        let grad = g.backward(s).unwrap().get(x).unwrap().data()[0];
        (g.value(h).item(), grad)
    };
    let (below, gb) = at(1.0 - 1e-9);
    let (above, ga) = at(1.0 + 1e-9);
    assert!((below - above).abs() < 1e-8);
    assert!((gb - ga).abs() < 1e-8);
    assert!((below - 0.5).abs() < 1e-8);
}

#[test]
fn pseudo_label_rules() {
    let cfg = LossConfig::default();
    let teacher = IterationOutput {
        positions: vec![[10.0, 10.0]; 3],
        occlusion: vec![-5.0, -5.0, 0.3],
        uncertainty: vec![0.0; 3],
    };
    let student = IterationOutput {
        positions: vec![[14.0, 14.0], [15.0, 15.0], [10.0, 10.0]],
        occlusion: vec![0.0; 3],
        uncertainty: vec![0.0; 3],
    };
    let l = derive_pseudo_labels(&teacher, &student, &cfg);
    assert_eq!(l.occluded, vec![false, false, true]);
    assert_eq!(l.uncertain, vec![false, true, false]);
    assert_eq!(l.positions, teacher.positions);
    let same = derive_pseudo_labels(&teacher, &teacher, &cfg);
    assert!(same.uncertain.iter().all(|&u| !u));
    assert!((l.occlusion_confidence[2] - 0.574_442_516_811_659_3).abs() < 1e-12);
    assert_eq!(l.confident(&cfg), vec![true, true, false]);
}

#[test]
fn ssl_fixed_point_and_masking() {
    let cfg = LossConfig::default();
    let labels = PseudoLabels {
        positions: vec![[1.0, 2.0], [3.0, 4.0]],
        occluded: vec![false, true],
        uncertain: vec![false, false],
        occlusion_confidence: vec![0.99, 0.99],
    };
    let good = single(labels.positions.clone(), vec![-12.0, 12.0], vec![-12.0, -12.0]);
    assert!(ssl_loss(&good, &labels, false, &cfg).unwrap() < 0.01);
    // moving the occluded frame's position or uncertainty changes nothing
    let moved = single(vec![[1.0, 2.0], [40.0, -9.0]], vec![-12.0, 12.0], vec![-12.0, 8.0]);
    assert_eq!(ssl_loss(&moved, &labels, false, &cfg).unwrap(), ssl_loss(&good, &labels, false, &cfg).unwrap());
}

#[test]
fn confidence_filter_drops_unsure_occlusion_terms() {
    let cfg = LossConfig::default();
    let teacher = IterationOutput {
        positions: vec![[5.0, 5.0]],
        occlusion: vec![0.3],
        uncertainty: vec![0.0],
    };
    let labels = derive_pseudo_labels(&teacher, &teacher, &cfg);
    let student = single(vec![[5.0, 5.0]], vec![-1.0], vec![-30.0]);
    let off = ssl_loss(&student, &labels, false, &cfg).unwrap();
    let on = ssl_loss(&student, &labels, true, &cfg).unwrap();
    // occluded pseudo-label: only the occlusion BCE term is present
    assert!((off - (softplus(-1.0) + 1.0)).abs() < 1e-12);
    assert_eq!(on, 0.0);
}

#[test]
fn cycle_mask_cases() {
    let cfg = LossConfig::default();
    let q1 = QueryPoint::new(20.0, 20.0, 1);
    let make = |p: [f64; 2], o: f64| IterationOutput {
        positions: vec![[0.0, 0.0], p],
        occlusion: vec![5.0, o],
        uncertainty: vec![0.0; 2],
    };
    assert!(cycle_mask(&make([20.0, 20.0], -3.0), &q1, &cfg));
    assert!(!cycle_mask(&make([24.0, 20.0], -3.0), &q1, &cfg));
    assert!(cycle_mask(&make([23.999, 20.0], -3.0), &q1, &cfg));
    assert!(!cycle_mask(&make([22.0, 20.0], 0.1), &q1, &cfg));
    assert!(cycle_mask(&make([22.0, 20.0], 0.0), &q1, &cfg));
}

#[test]
fn thresholds_scale_with_resolution() {
    let c = LossConfig::at_resolution(64);
    assert_eq!(c.delta_px(), 1.5);
    assert_eq!(c.delta_cycle_px(), 1.0);
    let c = LossConfig::default();
    assert_eq!((c.delta_px(), c.delta_cycle_px()), (6.0, 4.0));
}

#[test]
fn ssl_matches_supervised_when_targets_coincide() {
    let cfg = LossConfig::default();
    let gt = GroundTruthTrack {
        positions: vec![[1.0, 1.0], [2.0, 5.0], [9.0, 3.0]],
        occluded: vec![false, true, false],
    };
    let pred = TrajectoryPrediction {
        iterations: vec![
            IterationOutput {
                positions: vec![[1.5, 1.0], [0.0, 0.0], [15.5, 3.0]],
                occlusion: vec![-1.0, 0.4, 0.2],
                uncertainty: vec![0.5, -0.5, 0.1],
            },
            IterationOutput {
                positions: vec![[1.2, 1.1], [0.0, 0.0], [16.0, 3.0]],
                occlusion: vec![-2.0, 0.9, -0.2],
                uncertainty: vec![0.3, -0.5, 0.6],
            },
        ],
    };
    // Both iterations agree on which frames exceed delta, so the per-iteration
    // u of the supervised loss equals the fixed u of the pseudo-labels.
    let labels = PseudoLabels {
        positions: gt.positions.clone(),
        occluded: gt.occluded.clone(),
        uncertain: vec![false, false, true],
        occlusion_confidence: vec![1.0; 3],
    };
    let a = tapir_loss(&pred, &gt, &cfg).unwrap();
    let b = ssl_loss(&pred, &labels, false, &cfg).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn total_ssl_value_conventions() {
    assert_eq!(total_ssl(&[1.0, 2.0], &[false, false]), 0.0);
    assert_eq!(total_ssl(&[1.5, 2.0], &[true, false]), 1.5);
    assert_eq!(total_ssl(&[1.0, 2.0, 4.0], &[true, false, true]), 2.5);
}

fn toy_setup() -> (crate::tracker::ModelParams, Video, Vec<QueryPoint>, Vec<GroundTruthTrack>) {
    let cfg = ModelConfig {
        fine_channels: 4,
        mid_channels: 4,
        feature_dim: 4,
        head_hidden: 4,
        refine_hidden: 4,
        ..Default::default()
    };
    let mut p = init_params(9, &cfg).unwrap();
    let mut rng = stream(9, 1);
    for (name, t) in p.tensors.iter_mut() {
        if name.starts_with("refine/out") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let v = Video::new(3, 16, 16, (0..3 * 16 * 16 * 3).map(|_| rng.gen()).collect());
    let q = vec![QueryPoint::new(4.3, 7.7, 0), QueryPoint::new(10.2, 3.1, 2), QueryPoint::new(8.6, 12.4, 1)];
    let gt = (0..3)
        .map(|_| GroundTruthTrack {
            positions: (0..3).map(|_| [rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0)]).collect(),
            occluded: (0..3).map(|_| rng.gen_bool(0.3)).collect(),
        })
        .collect();
    (p, v, q, gt)
}

fn grads_for(p: &crate::tracker::ModelParams, v: &Video, q: &[QueryPoint], gt: &[GroundTruthTrack], masks: &[bool]) -> Vec<(String, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let vars = p.bind(&mut g, true).unwrap();
    let out = forward(&mut g, &vars, &p.config, v, q).unwrap();
    let per = tapir_loss_vars(&mut g, &out.iterations, gt, v.frames(), &LossConfig::at_resolution(16)).unwrap();
    let total = total_ssl_vars(&mut g, per, masks).unwrap();
    let grads = g.backward(total).unwrap();
    vars.vars
        .iter()
        .map(|(name, &var)| {
            let shape = g.shape(var).to_vec();
            (name.clone(), grads.get_or_zeros(var, &shape).to_f64_vec())
        })
        .collect()
}

#[test]
fn masked_trajectory_contributes_no_gradient() {
    let (p, v, q, gt) = toy_setup();
    let with_mask = grads_for(&p, &v, &q, &gt, &[true, false, true]);
    let removed = grads_for(&p, &v, &[q[0], q[2]], &[gt[0].clone(), gt[2].clone()], &[true, true]);
    for ((name, a), (_, b)) in with_mask.iter().zip(&removed) {
        for (x, y) in a.iter().zip(b) {
            assert!(x == y, "{name}: {x} vs {y}");
        }
    }
    let none = grads_for(&p, &v, &q, &gt, &[false, false, false]);
    assert!(none.iter().all(|(_, g)| g.iter().all(|&x| x == 0.0)));
}

#[test]
fn single_unmasked_trajectory_is_its_own_loss() {
    let (p, v, q, gt) = toy_setup();
    let mut g = Graph::<f64>::new();
    let vars = p.bind(&mut g, false).unwrap();
    let out = forward(&mut g, &vars, &p.config, &v, &q).unwrap();
    let per = tapir_loss_vars(&mut g, &out.iterations, &gt, 3, &LossConfig::default()).unwrap();
    let total = total_ssl_vars(&mut g, per, &[false, true, false]).unwrap();
    assert_eq!(g.value(total).item(), g.value(per).data()[1]);
}
