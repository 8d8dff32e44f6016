//! Acceptance suite: one PASS/FAIL line per criterion, then a single assert.
//!
//! The training-trend criteria (6–8) run real co-training experiments and
//! dominate the runtime. Set `TAPKIT_ACCEPTANCE_QUICK=1` to shrink them to a
//! smoke run (their lines are then reported but not asserted).

use std::io::Write;
use std::time::Instant;

use rand::Rng;

use tapkit::evaltap::{compute_metrics, QueryMode, VideoResult, THRESHOLDS};
use tapkit::losses::{
    cycle_mask, derive_pseudo_labels, ssl_loss, tapir_loss, tapir_loss_vars, total_ssl, total_ssl_vars, LossConfig, PseudoLabels,
};
use tapkit::rng::{mix, stream};
use tapkit::synthdata::io::Clip;
use tapkit::synthdata::{generate_scene, Domain, SceneConfig};
use tapkit::tracker::{forward, init_params, IterationOutput, ModelConfig, ModelParams, TrajectoryPrediction};
use tapkit::trainer::{ema_update_tensor, learning_rate, ssl_learning_rate, TrainConfig, TrainData, Trainer};
use tapkit::transforms::{bilinear_rgb, resample_video, sample_affine, MIN_AREA};
use tapkit::verify::{self, Scope};
use tapkit::{GroundTruthTrack, Graph, QueryPoint, Tensor, Video};

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    asserted: bool,
}

fn outcome(id: usize, title: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, title, passed, detail, asserted: true }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

// ---- 1 --------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let reports = verify::run(Scope::All, 0, None).expect("gradient suites run");
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let names = |p: &str| reports.iter().any(|r| r.name.contains(p));
    let covers = names("conv2d") && names("tracker_forward") && names("tapir_loss") && names("total_ssl_loss");
    let ok = covers && reports.iter().all(|r| r.passed && r.max_rel_err <= 1e-3) && secs <= 120.0;
    outcome(1, "gradient correctness", ok, format!("{} checks, worst rel err {worst:.2e}, {secs:.1}s", reports.len()))
}

// ---- 2 --------------------------------------------------------------------------

fn affine_statistics() -> Outcome {
    let (tn, h, w) = (16, 64, 64);
    let mut rng = stream(2, 0);
    let (mut sum, mut n, mut in_range, mut interp_err, mut trip_err) = (0.0, 0usize, true, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let seq = sample_affine(tn, h, w, &mut rng);
        for e in [seq.start, seq.end] {
            let a = e.area(h, w);
            in_range &= (MIN_AREA - 1e-12..=1.0 + 1e-12).contains(&a);
            sum += a;
            n += 1;
        }
        for t in 0..tn {
            let alpha = t as f64 / (tn - 1) as f64;
            for k in 0..2 {
                let size = seq.start.size[k] + alpha * (seq.end.size[k] - seq.start.size[k]);
                let corner = seq.start.corner[k] + alpha * (seq.end.corner[k] - seq.start.corner[k]);
                interp_err = interp_err.max((seq.sizes[t][k] - size).abs()).max((seq.corners[t][k] - corner).abs());
            }
            let p = [rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0)];
            let back = seq.invert_point(seq.apply_point(p, t), t);
            trip_err = trip_err.max((back[0] - p[0]).abs().max((back[1] - p[1]).abs()));
        }
    }
    let mean = sum / n as f64;
    let ok = in_range && (mean - 0.8).abs() <= 0.01 && interp_err <= 1e-12 && trip_err < 1e-9;
    outcome(2, "affine-family statistics", ok, format!("mean coverage {mean:.4}, interp err {interp_err:.1e}, round trip {trip_err:.1e}"))
}

// ---- 3 --------------------------------------------------------------------------

fn pixel_point_alignment() -> Outcome {
    let side = 48;
    let hull = (side - 1) as f64;
    let mut rng = stream(3, 0);
    let (mut trials, mut patches, mut worst) = (0, 0usize, 0.0f64);
    let mut scene_seed = 0;
    let mut scene = generate_scene(&SceneConfig::domain(Domain::B, 6, side, side, scene_seed)).unwrap();
    while trials < 500 {
        if trials % 50 == 0 {
            scene_seed += 1;
            scene = generate_scene(&SceneConfig::domain(Domain::B, 6, side, side, scene_seed)).unwrap();
        }
        let seq = sample_affine(6, side, side, &mut rng);
        let t = rng.gen_range(0..6);
        let tr = &scene.tracks[rng.gen_range(0..scene.tracks.len())];
        let (s, _) = seq.coefficients(t);
        if s[0].min(s[1]) < 0.75 {
            continue;
        }
        trials += 1;
        let warped = resample_video(&scene.video, &seq);
        let p = tr.positions[t];
        let q = seq.apply_point(p, t);
        let (qx, qy) = (q[0].round(), q[1].round());
        let mut ssd = 0.0;
        let mut inside = true;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (qx + dx as f64, qy + dy as f64);
                let src = [p[0] + (x - q[0]) / s[0], p[1] + (y - q[1]) / s[1]];
                let ok = |v: f64| (0.0..=hull).contains(&v);
                if !(ok(x) && ok(y) && ok(src[0]) && ok(src[1])) {
                    inside = false;
                    continue;
                }
                let a = warped.pixel(t, y as usize, x as usize);
                let b = bilinear_rgb(scene.video.frame(t), side, side, src[0], src[1]);
                ssd += (0..3).map(|c| ((a[c] - b[c]) as f64).powi(2)).sum::<f64>();
            }
        }
        if inside {
            patches += 1;
            worst = worst.max(ssd);
        }
    }
    let ok = patches > 250 && worst < 1e-3;
    outcome(3, "pixel/point alignment", ok, format!("{trials} trials, {patches} in-bounds patches, worst SSD {worst:.2e}"))
}

// ---- 4 --------------------------------------------------------------------------

fn single(positions: Vec<[f64; 2]>, occlusion: Vec<f64>, uncertainty: Vec<f64>) -> TrajectoryPrediction {
    TrajectoryPrediction { iterations: vec![IterationOutput { positions, occlusion, uncertainty }] }
}

fn masked_gradients(p: &ModelParams, v: &Video, q: &[QueryPoint], gt: &[GroundTruthTrack], masks: &[bool]) -> Vec<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let vars = p.bind(&mut g, true).unwrap();
    let out = forward(&mut g, &vars, &p.config, v, q).unwrap();
    let per = tapir_loss_vars(&mut g, &out.iterations, gt, v.frames(), &LossConfig::at_resolution(16)).unwrap();
    let total = total_ssl_vars(&mut g, per, masks).unwrap();
    let grads = g.backward(total).unwrap();
    vars.vars.values().map(|&var| grads.get_or_zeros(var, &g.shape(var).to_vec()).to_f64_vec()).collect()
}

fn loss_fidelity() -> Outcome {
    let cfg = LossConfig::default();
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;

    // Huber (delta 1) + occlusion BCE + uncertainty BCE; d = 5 < 6 -> u = 0.
    let gt = GroundTruthTrack { positions: vec![[10.0, 10.0]], occluded: vec![false] };
    let l = tapir_loss(&single(vec![[13.0, 14.0]], vec![0.0], vec![-2.0]), &gt, &cfg).unwrap();
    checks.push(("tapir near", close(l, 4.5 + 2f64.ln() + softplus(-2.0))));
    // d = 7 > 6 -> u = 1.
    let l = tapir_loss(&single(vec![[10.0, 17.0]], vec![0.0], vec![-2.0]), &gt, &cfg).unwrap();
    checks.push(("tapir far", close(l, 6.5 + 2f64.ln() + softplus(-2.0) + 2.0)));
    // Occluded frames only pay the occlusion term.
    let occ = GroundTruthTrack { positions: vec![[0.0, 0.0]; 2], occluded: vec![true; 2] };
    let l = tapir_loss(&single(vec![[30.0, -20.0]; 2], vec![-1.0, 2.0], vec![3.0; 2]), &occ, &cfg).unwrap();
    checks.push(("tapir occluded", close(l, (softplus(-1.0) + 1.0 + softplus(2.0) - 2.0) / 2.0)));

    // Pseudo-labels: strict > delta for uncertainty, logit > 0 for occlusion.
    let teacher = IterationOutput { positions: vec![[10.0, 10.0]; 4], occlusion: vec![-5.0, -5.0, 0.3, 0.0], uncertainty: vec![0.0; 4] };
    let student = IterationOutput {
        positions: vec![[14.0, 14.0], [15.0, 15.0], [10.0, 10.0], [16.0, 10.0]],
        occlusion: vec![0.0; 4],
        uncertainty: vec![0.0; 4],
    };
    let labels = derive_pseudo_labels(&teacher, &student, &cfg);
    checks.push(("pseudo occluded", labels.occluded == vec![false, false, true, false]));
    // 5.657 < 6, 7.07 > 6, 0, exactly 6 -> not uncertain
    checks.push(("pseudo uncertain", labels.uncertain == vec![false, true, false, false]));
    checks.push(("pseudo positions", labels.positions == teacher.positions));

    // Cycle mask: strict < delta_cycle and occlusion logit <= 0.
    let q1 = QueryPoint::new(20.0, 20.0, 1);
    let back = |p: [f64; 2], o: f64| IterationOutput { positions: vec![[0.0, 0.0], p], occlusion: vec![5.0, o], uncertainty: vec![0.0; 2] };
    checks.push(("cycle", cycle_mask(&back([20.0, 20.0], -3.0), &q1, &cfg)));
    checks.push(("cycle boundary", !cycle_mask(&back([24.0, 20.0], -3.0), &q1, &cfg)));
    checks.push(("cycle occluded", !cycle_mask(&back([22.0, 20.0], 0.1), &q1, &cfg)));

    // SSL loss: occluded pseudo-labels drop position and uncertainty terms.
    let labels = PseudoLabels {
        positions: vec![[1.0, 2.0], [3.0, 4.0]],
        occluded: vec![false, true],
        uncertain: vec![false, false],
        occlusion_confidence: vec![0.99, 0.99],
    };
    let a = ssl_loss(&single(vec![[1.0, 2.0], [3.0, 4.0]], vec![-1.0, 1.0], vec![-1.0, -1.0]), &labels, false, &cfg).unwrap();
    let b = ssl_loss(&single(vec![[1.0, 2.0], [40.0, -9.0]], vec![-1.0, 1.0], vec![-1.0, 8.0]), &labels, false, &cfg).unwrap();
    checks.push(("ssl occluded frame", a == b));
    let want = (softplus(-1.0) + softplus(-1.0) + softplus(1.0) - 1.0) / 2.0;
    checks.push(("ssl hand value", close(a, want)));
    checks.push(("scaled thresholds", LossConfig::at_resolution(64).delta_px() == 1.5 && LossConfig::at_resolution(64).delta_cycle_px() == 1.0));
    checks.push(("total ssl", total_ssl(&[1.0, 2.0, 4.0], &[true, false, true]) == 2.5 && total_ssl(&[1.0], &[false]) == 0.0));

    // Masked trajectory gradient == gradient with the trajectory removed.
    let mcfg = ModelConfig { fine_channels: 4, mid_channels: 4, feature_dim: 4, head_hidden: 4, refine_hidden: 4, ..Default::default() };
    let mut p = init_params(9, &mcfg).unwrap();
    let mut rng = stream(9, 1);
    for (name, t) in p.tensors.iter_mut() {
        if name.starts_with("refine/out") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let v = Video::new(3, 16, 16, (0..3 * 16 * 16 * 3).map(|_| rng.gen()).collect());
    let q = vec![QueryPoint::new(4.3, 7.7, 0), QueryPoint::new(10.2, 3.1, 2), QueryPoint::new(8.6, 12.4, 1)];
    let gt: Vec<GroundTruthTrack> = (0..3)
        .map(|_| GroundTruthTrack {
            positions: (0..3).map(|_| [rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0)]).collect(),
            occluded: (0..3).map(|_| rng.gen_bool(0.3)).collect(),
        })
        .collect();
    let masked = masked_gradients(&p, &v, &q, &gt, &[true, false, true]);
    let removed = masked_gradients(&p, &v, &[q[0], q[2]], &[gt[0].clone(), gt[2].clone()], &[true, true]);
    let bitwise = masked.iter().flatten().zip(removed.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(("masked gradient bitwise", bitwise));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = if failed.is_empty() { format!("{} hand checks", checks.len()) } else { format!("failed: {}", failed.join(", ")) };
    outcome(4, "loss-formula fidelity", failed.is_empty(), detail)
}

// ---- 5 --------------------------------------------------------------------------

/// Independent reference: enumerate every scored point and count directly.
fn brute_force(videos: &[VideoResult], mode: QueryMode, res: f64) -> (f64, f64, f64) {
    let (mut aj, mut da, mut oa, mut n) = (0.0, 0.0, 0.0, 0.0);
    for v in videos {
        let mut pts = Vec::new();
        for ((p, g), q) in v.preds.iter().zip(&v.gts).zip(&v.queries) {
            for t in 0..g.positions.len() {
                if mode == QueryMode::QFirst && t < q.t {
                    continue;
                }
                let d = ((p.positions[t][0] - g.positions[t][0]).powi(2) + (p.positions[t][1] - g.positions[t][1]).powi(2)).sqrt();
                pts.push((d, !g.occluded[t], p.occlusion[t] <= 0.0));
            }
        }
        if pts.is_empty() {
            continue;
        }
        let (mut vaj, mut vda) = (0.0, 0.0);
        for k in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let thr = k * res / 256.0;
            let (mut tp, mut fp, mut fnn, mut vis, mut hit) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(d, gv, pv) in &pts {
                let near = d < thr;
                tp += (gv && pv && near) as u8 as f64;
                fp += (pv && (!gv || !near)) as u8 as f64;
                fnn += (gv && (!pv || !near)) as u8 as f64;
                vis += gv as u8 as f64;
                hit += (gv && near) as u8 as f64;
            }
            vaj += if tp + fp + fnn > 0.0 { tp / (tp + fp + fnn) } else { 0.0 };
            vda += if vis > 0.0 { hit / vis } else { 0.0 };
        }
        aj += vaj / 5.0;
        da += vda / 5.0;
        oa += pts.iter().filter(|p| p.1 == p.2).count() as f64 / pts.len() as f64;
        n += 1.0;
    }
    (aj / n, da / n, oa / n)
}

fn random_videos(seed: u64) -> (Vec<VideoResult>, QueryMode) {
    let mut rng = stream(seed, 5);
    let mode = if rng.gen_bool(0.5) { QueryMode::Strided } else { QueryMode::QFirst };
    let videos = (0..rng.gen_range(1..4))
        .map(|_| {
            let tn = rng.gen_range(1..=8);
            let n = rng.gen_range(1..=4);
            let mut v = VideoResult { preds: Vec::new(), gts: Vec::new(), queries: Vec::new() };
            for _ in 0..n {
                let g: Vec<[f64; 2]> = (0..tn).map(|_| [rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0)]).collect();
                let noise = [0.2, 1.0, 4.0][rng.gen_range(0..3)];
                let p = g.iter().map(|x| [x[0] + rng.gen_range(-noise..noise), x[1] + rng.gen_range(-noise..noise)]).collect();
                v.queries.push(QueryPoint::new(g[0][0], g[0][1], rng.gen_range(0..tn)));
                v.gts.push(GroundTruthTrack { positions: g, occluded: (0..tn).map(|_| rng.gen_bool(0.3)).collect() });
                v.preds.push(IterationOutput {
                    positions: p,
                    occlusion: (0..tn).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    uncertainty: vec![0.0; tn],
                });
            }
            v
        })
        .collect();
    (videos, mode)
}

fn metrics_oracle() -> Outcome {
    let mut agree = 0;
    for seed in 0..200 {
        let (videos, mode) = random_videos(seed);
        let (report, _) = compute_metrics(&videos, mode, 64.0).unwrap();
        let (aj, da, oa) = brute_force(&videos, mode, 64.0);
        if (report.aj - aj).abs() < 1e-12 && (report.delta_avg - da).abs() < 1e-12 && (report.oa - oa).abs() < 1e-12 {
            agree += 1;
        }
    }
    let (mut perfect, _) = random_videos(7);
    for v in &mut perfect {
        for (p, g) in v.preds.iter_mut().zip(&mut v.gts) {
            // keep every frame visible so each threshold has points to score
            g.occluded.iter_mut().for_each(|o| *o = false);
            p.positions = g.positions.clone();
            p.occlusion = vec![-1.0; g.positions.len()];
        }
    }
    let (r, _) = compute_metrics(&perfect, QueryMode::Strided, 64.0).unwrap();
    let thresholds_ok = THRESHOLDS == [1.0, 2.0, 4.0, 8.0, 16.0];
    let ok = agree == 200 && r.aj == 1.0 && r.delta_avg == 1.0 && r.oa == 1.0 && thresholds_ok;
    outcome(5, "metrics oracle", ok, format!("{agree}/200 instances agree, perfect = ({}, {}, {})", r.aj, r.delta_avg, r.oa))
}

// ---- 6-8 ------------------------------------------------------------------------

struct Scale {
    side: usize,
    frames: usize,
    labeled: usize,
    unlabeled: usize,
    eval: usize,
    pretrain_steps: usize,
    cotrain_steps: usize,
    seeds: u64,
}

fn scale(quick: bool) -> Scale {
    if quick {
        Scale { side: 32, frames: 8, labeled: 8, unlabeled: 8, eval: 4, pretrain_steps: 20, cotrain_steps: 10, seeds: 1 }
    } else {
        Scale { side: 64, frames: 16, labeled: 100, unlabeled: 100, eval: 30, pretrain_steps: 600, cotrain_steps: 400, seeds: 3 }
    }
}

fn dataset(domain: Domain, n: usize, s: &Scale, salt: u64, labeled: bool) -> Vec<Clip> {
    (0..n as u64)
        .map(|i| {
            let scene = generate_scene(&SceneConfig::domain(domain, s.frames, s.side, s.side, mix(salt, i))).expect("scene");
            if labeled {
                Clip::labeled(&scene)
            } else {
                Clip::unlabeled(&scene)
            }
        })
        .collect()
}

fn base_config(s: &Scale) -> TrainConfig {
    TrainConfig { steps: s.cotrain_steps, sup_batch: 4, ssl_batch: 4, warmup: 20, log_interval: usize::MAX, ..Default::default() }
}

struct Trends {
    kubric_only: Vec<f64>,
    base: Vec<f64>,
    siamese: Vec<f64>,
    two_frame: Vec<f64>,
    secs: f64,
}

fn run_trends(s: &Scale) -> Trends {
    let start = Instant::now();
    let data = TrainData {
        labeled: dataset(Domain::A, s.labeled, s, 0xa, true),
        unlabeled: dataset(Domain::B, s.unlabeled, s, 0xb, false),
        eval: dataset(Domain::B, s.eval, s, 0xe, true),
    };
    let pre_cfg = TrainConfig { steps: s.pretrain_steps, warmup: 50.min(s.pretrain_steps / 4), ssl_enabled: false, ..base_config(s) };
    let mut pre = Trainer::new(pre_cfg, None).unwrap();
    let pre_data = TrainData { unlabeled: Vec::new(), eval: Vec::new(), ..data.clone() };
    pre.train(&pre_data, None, |_| {}).unwrap();
    let init = pre.student.clone();

    let run = |cfg: TrainConfig| -> f64 {
        let mut tr = Trainer::new(cfg, Some(init.clone())).unwrap();
        tr.train(&data, None, |_| {}).unwrap().eval.expect("eval clips given").delta_avg
    };
    let mut t = Trends { kubric_only: Vec::new(), base: Vec::new(), siamese: Vec::new(), two_frame: Vec::new(), secs: 0.0 };
    for seed in 0..s.seeds {
        let cfg = TrainConfig { seed, ..base_config(s) };
        t.kubric_only.push(run(TrainConfig { ssl_enabled: false, ..cfg.clone() }));
        t.base.push(run(cfg.clone()));
        t.siamese.push(run(TrainConfig { siamese: true, ..cfg.clone() }));
        t.two_frame.push(run(TrainConfig { clip_frames: 2, ..cfg }));
    }
    t.secs = start.elapsed().as_secs_f64();
    t
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{:.4}", x)).collect::<Vec<_>>().join("/")
}

fn trend_outcomes(quick: bool) -> Vec<Outcome> {
    let s = scale(quick);
    let t = run_trends(&s);
    let (ko, base, sia, two) = (median(t.kubric_only.clone()), median(t.base.clone()), median(t.siamese.clone()), median(t.two_frame.clone()));
    let gain = 100.0 * (base - ko);
    let mut out = vec![
        outcome(
            6,
            "bootstrapping beats supervised-only",
            gain >= 2.0,
            format!("median <d_avg {base:.4} vs {ko:.4} (+{gain:.2} pts; runs {} vs {}; {:.0}s total)", fmt(&t.base), fmt(&t.kubric_only), t.secs),
        ),
        outcome(7, "siamese teacher is worse than EMA", sia < base, format!("median <d_avg {sia:.4} vs {base:.4} (runs {})", fmt(&t.siamese))),
        outcome(8, "2-frame clips are worse than full clips", two < base, format!("median <d_avg {two:.4} vs {base:.4} (runs {})", fmt(&t.two_frame))),
    ];
    if quick {
        for o in &mut out {
            o.asserted = false;
            o.detail.push_str(" [quick: not asserted]");
        }
    }
    out
}

// ---- 9 --------------------------------------------------------------------------

fn determinism() -> Outcome {
    let s = scale(true);
    let data = TrainData {
        labeled: dataset(Domain::A, 4, &s, 1, true),
        unlabeled: dataset(Domain::B, 4, &s, 2, false),
        eval: dataset(Domain::B, 2, &s, 3, true),
    };
    let cfg = TrainConfig {
        steps: 6,
        sup_batch: 2,
        ssl_batch: 2,
        queries_per_video: 8,
        warmup: 2,
        log_interval: 1,
        fine_channels: 8,
        mid_channels: 8,
        feature_dim: 8,
        head_hidden: 8,
        refine_hidden: 8,
        seed: 11,
        ..Default::default()
    };
    let run = |cfg: TrainConfig| {
        let mut logs = Vec::new();
        let mut tr = Trainer::new(cfg, None).unwrap();
        let summary = tr.train(&data, None, |r| logs.push(r.clone())).unwrap();
        (logs, summary.eval.unwrap(), tr.student)
    };
    let (la, ea, pa) = run(cfg.clone());
    // second run from the serialized config, as a manifest replay would
    let replay = TrainConfig::from_kv(&cfg.to_kv(), &[]).unwrap();
    let (lb, eb, pb) = run(replay);
    let losses_ok = la.len() == lb.len()
        && la.iter().zip(&lb).all(|(a, b)| {
            let d = |x: Option<f64>, y: Option<f64>| match (x, y) {
                (Some(x), Some(y)) => (x - y).abs() <= 1e-6,
                (None, None) => true,
                _ => false,
            };
            d(a.sup_loss, b.sup_loss) && d(a.ssl_loss, b.ssl_loss)
        });
    let metrics_bitwise = ea.aj.to_bits() == eb.aj.to_bits() && ea.delta_avg.to_bits() == eb.delta_avg.to_bits() && ea.oa.to_bits() == eb.oa.to_bits();
    let weights_equal = pa == pb;
    let (r1, _) = tapkit::evaltap::evaluate(&pa, &data.eval, QueryMode::Strided, 64).unwrap();
    let (r2, _) = tapkit::evaltap::evaluate(&pa, &data.eval, QueryMode::Strided, 64).unwrap();
    let ok = losses_ok && metrics_bitwise && weights_equal && r1 == r2;
    outcome(9, "determinism", ok, format!("{} log records, losses {losses_ok}, metrics bitwise {metrics_bitwise}, weights equal {weights_equal}", la.len()))
}

// ---- 10 -------------------------------------------------------------------------

fn ema_and_schedule() -> Outcome {
    let decay = 0.99;
    let theta = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]);
    let mut xi = Tensor::<f64>::zeros(&[3]);
    let mut prev: Vec<f64> = theta.data().iter().zip(xi.data()).map(|(t, x)| t - x).collect();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        ema_update_tensor(&mut xi, &theta, decay).unwrap();
        let gap: Vec<f64> = theta.data().iter().zip(xi.data()).map(|(t, x)| t - x).collect();
        for (g, p) in gap.iter().zip(&prev) {
            worst = worst.max((g / p - decay).abs());
        }
        prev = gap;
    }
    let mut half = true;
    for (peak, warmup, total) in [(1e-3, 100, 5000), (3e-4, 10, 50), (2e-3, 0, 7)] {
        for step in 0..=total {
            let (a, b) = (learning_rate(step, peak, warmup, total), ssl_learning_rate(step, peak, warmup, total));
            half &= b == a / 2.0;
        }
    }
    // and inside a live trainer
    let s = scale(true);
    let data = TrainData { labeled: dataset(Domain::A, 2, &s, 4, true), unlabeled: dataset(Domain::B, 2, &s, 5, false), eval: Vec::new() };
    let cfg = TrainConfig {
        steps: 5,
        sup_batch: 1,
        ssl_batch: 1,
        queries_per_video: 4,
        warmup: 2,
        fine_channels: 4,
        mid_channels: 4,
        feature_dim: 4,
        head_hidden: 4,
        refine_hidden: 4,
        ..Default::default()
    };
    let mut tr = Trainer::new(cfg, None).unwrap();
    for _ in 0..5 {
        half &= tr.ssl_lr() == tr.lr() / 2.0;
        tr.step(&data).unwrap();
    }
    let ok = worst <= 1e-9 && half;
    outcome(10, "EMA and schedule contracts", ok, format!("EMA ratio error {worst:.1e}, SSL lr = lr/2 at every step: {half}"))
}

#[test]
fn acceptance() {
    let quick = std::env::var("TAPKIT_ACCEPTANCE_QUICK").is_ok_and(|v| v != "0");
    let mut results = vec![gradient_correctness(), affine_statistics(), pixel_point_alignment(), loss_fidelity(), metrics_oracle()];
    results.extend(trend_outcomes(quick));
    results.push(determinism());
    results.push(ema_and_schedule());
    results.sort_by_key(|o| o.id);
    // Written to the raw stderr handle so the report survives libtest capture.
    let mut err = std::io::stderr().lock();
    for o in &results {
        let _ = writeln!(err, "criterion {:>2} {} — {}: {}", o.id, if o.passed { "PASS" } else { "FAIL" }, o.title, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|o| o.asserted && !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
