//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values on fresh graphs, so
//! it shares no code path with the analytic backward pass it audits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{DiffError, Fault, Graph, Tensor, Var};
use crate::rng::stream;

/// Step for central differences in 64-bit mode.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance bound on the relative error.
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to round-off are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Which input coordinates to probe.
#[derive(Debug, Clone)]
pub enum Probe {
    All,
    /// `(input index, flat element index)` pairs.
    Only(Vec<(usize, usize)>),
}

/// Worst relative error between analytic and central-difference gradients of
/// the scalar built by `build` from `inputs`.
pub fn max_relative_error<B>(inputs: &[Tensor<f64>], probe: &Probe, fault: Option<Fault>, build: B) -> Result<(f64, usize), DiffError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars = perturbed
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let l = build(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let coords: Vec<(usize, usize)> = match probe {
        Probe::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Probe::Only(c) => c.clone(),
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for &(i, j) in &coords {
        let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[j]);
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let up = eval(&work)?;
        work[i].data_mut()[j] = orig - FD_STEP;
        let down = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok((worst, coords.len()))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Reduce any tensor to a scalar through a fixed random projection so every
/// output element is exercised.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, DiffError> {
    let shape = g.shape(out).to_vec();
    let mut rng = stream(seed, 0xfeed);
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

type OpCase = (
    &'static str,
    fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    fn(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", |r| vec![random_tensor(r, &[3, 4], -2.0, 2.0), random_tensor(r, &[4], -2.0, 2.0)], |g, v| g.add(v[0], v[1])),
        ("sub", |r| vec![random_tensor(r, &[3, 4], -2.0, 2.0), random_tensor(r, &[3, 1], -2.0, 2.0)], |g, v| g.sub(v[0], v[1])),
        ("mul", |r| vec![random_tensor(r, &[2, 3], -2.0, 2.0), random_tensor(r, &[2, 3], -2.0, 2.0)], |g, v| g.mul(v[0], v[1])),
        ("div", |r| vec![random_tensor(r, &[5], -2.0, 2.0), random_tensor(r, &[5], 0.5, 2.0)], |g, v| g.div(v[0], v[1])),
        ("sigmoid", |r| vec![random_tensor(r, &[6], -4.0, 4.0)], |g, v| g.sigmoid(v[0])),
        ("relu", |r| vec![random_tensor(r, &[6], -2.0, 2.0)], |g, v| g.relu(v[0])),
        ("leaky_relu", |r| vec![random_tensor(r, &[6], -2.0, 2.0)], |g, v| g.leaky_relu(v[0], 0.1)),
        ("silu", |r| vec![random_tensor(r, &[6], -4.0, 4.0)], |g, v| g.silu(v[0])),
        ("log", |r| vec![random_tensor(r, &[6], 0.2, 3.0)], |g, v| g.log(v[0])),
        ("exp", |r| vec![random_tensor(r, &[6], -2.0, 2.0)], |g, v| g.exp(v[0])),
        ("abs", |r| vec![random_tensor(r, &[6], -2.0, 2.0)], |g, v| g.abs(v[0])),
        ("clamp", |r| vec![random_tensor(r, &[6], -2.0, 2.0)], |g, v| g.clamp(v[0], -1.0, 1.0)),
        ("tanh", |r| vec![random_tensor(r, &[6], -2.0, 2.0)], |g, v| g.tanh(v[0])),
        ("softplus", |r| vec![random_tensor(r, &[6], -4.0, 4.0)], |g, v| g.softplus(v[0])),
        ("sqrt", |r| vec![random_tensor(r, &[6], 0.2, 3.0)], |g, v| g.sqrt(v[0])),
        ("sum_last", |r| vec![random_tensor(r, &[3, 5], -2.0, 2.0)], |g, v| g.sum_last(v[0])),
        ("max_last", |r| vec![random_tensor(r, &[3, 5], -2.0, 2.0)], |g, v| g.max_last(v[0])),
        ("matmul", |r| vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[4, 2], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])),
        ("transpose", |r| vec![random_tensor(r, &[3, 4], -1.0, 1.0)], |g, v| g.transpose(v[0])),
        ("gather_rows", |r| vec![random_tensor(r, &[4, 3], -1.0, 1.0)], |g, v| g.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)])),
        ("narrow_last", |r| vec![random_tensor(r, &[3, 5], -1.0, 1.0)], |g, v| g.narrow_last(v[0], 1, 3)),
        ("concat_last", |r| vec![random_tensor(r, &[3, 2], -1.0, 1.0), random_tensor(r, &[3, 4], -1.0, 1.0)], |g, v| g.concat_last(v)),
        ("conv2d", |r| vec![random_tensor(r, &[5, 5, 2], -1.0, 1.0), random_tensor(r, &[3, 3, 2, 3], -1.0, 1.0)], |g, v| g.conv2d(v[0], v[1], 1)),
        ("conv2d_stride2", |r| vec![random_tensor(r, &[2, 5, 6, 2], -1.0, 1.0), random_tensor(r, &[3, 3, 2, 2], -1.0, 1.0)], |g, v| g.conv2d(v[0], v[1], 2)),
        ("softmax2d", |r| vec![random_tensor(r, &[4, 4], -3.0, 3.0)], |g, v| g.softmax2d(v[0])),
        (
            "bilinear_sample",
            |r| {
                let field = random_tensor(r, &[5, 6, 2], -1.0, 1.0);
                // subpixel points, some straddling the border
                let xy = random_tensor(r, &[6, 2], -0.8, 5.2);
                vec![field, xy]
            },
            |g, v| g.bilinear_sample(v[0], v[1]),
        ),
        ("l2_normalize", |r| vec![random_tensor(r, &[3, 4], -1.0, 1.0)], |g, v| g.l2_normalize_last(v[0], 1e-6)),
        ("huber", |r| vec![random_tensor(r, &[6, 2], -3.0, 3.0)], |g, v| g.huber_norm(v[0], 1.0)),
        ("bce_with_logits", |r| vec![random_tensor(r, &[6], -4.0, 4.0), random_tensor(r, &[6], 0.0, 1.0)], |g, v| g.bce_with_logits(v[0], v[1])),
    ]
}

/// Finite-difference audit of every differentiable op over `instances`
/// random draws each.
pub fn op_suite(seed: u64, instances: usize, fault: Option<Fault>) -> Result<Vec<CheckReport>, DiffError> {
    let mut reports = Vec::new();
    for (ci, (name, make, build)) in op_cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut coords = 0;
        for inst in 0..instances {
            let mut rng = stream(seed, (ci * 1000 + inst) as u64);
            let inputs = make(&mut rng);
            let proj_seed = seed ^ ((ci as u64) << 32) ^ inst as u64;
            let (err, n) = max_relative_error(&inputs, &Probe::All, fault, |g, v| {
                let out = build(g, v)?;
                project(g, out, proj_seed)
            })?;
            worst = worst.max(err);
            coords += n;
        }
        reports.push(CheckReport {
            name: name.to_string(),
            instances,
            coordinates: coords,
            max_rel_err: worst,
            tolerance: FD_TOLERANCE,
            passed: worst <= FD_TOLERANCE,
        });
    }
    Ok(reports)
}
