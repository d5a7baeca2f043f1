//! Property suites runnable from a release binary (`vcnf verify`).
//!
//! Each check draws its own seeded cases and reports the worst observed
//! deviation next to its tolerance.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffkit::GradVector;
use crate::error::{Result, VcnfError};
use crate::flow::{randomize, FlowArch, FlowModel};
use crate::oracles;
use crate::problems::{evaluate_loss, Distribution, DriftField, LossBatch, Potential, ProblemSpec};
use crate::spline::{decode_theta, spline_forward, spline_inverse, RawTheta};
use crate::trainer::TrainConfig;

pub const SUITES: [&str; 4] = ["spline", "flow", "diffkit", "oracles"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: &'static str, name: &'static str, worst: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name,
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }
}

/// Runs one suite by name, or every suite for `"all"`.
pub fn run_suite(name: &str) -> Result<Vec<CheckResult>> {
    match name {
        "spline" => spline_suite(),
        "flow" => flow_suite(),
        "diffkit" => diffkit_suite(),
        "oracles" => oracle_suite(),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s)?);
            }
            Ok(out)
        }
        other => Err(VcnfError::Config(format!(
            "unknown suite `{other}`; expected one of {} or all",
            SUITES.join(", ")
        ))),
    }
}

fn spline_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut round, mut logdet_sum, mut mono) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let raw: Vec<f64> = (0..14).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p = decode_theta(&RawTheta { values: raw }, 8.0, 5)?;
        let x = rng.gen_range(-12.0..12.0);
        let (y, ld) = spline_forward(&p, x)?;
        let (xb, ild) = spline_inverse(&p, y)?;
        round = round.max((xb - x).abs());
        logdet_sum = logdet_sum.max((ld + ild).abs());
        let (y2, _) = spline_forward(&p, x + 1e-3)?;
        if y2 <= y {
            mono = 1.0;
        }
    }
    Ok(vec![
        CheckResult::new("spline", "inverse roundtrip", round, 1e-10),
        CheckResult::new("spline", "forward + inverse log-derivative", logdet_sum, 1e-10),
        CheckResult::new("spline", "strict monotonicity violations", mono, 0.0),
    ])
}

fn random_model(dim: usize, seed: u64) -> Result<FlowModel> {
    let mut m = FlowModel::new(FlowArch::new(dim), seed)?;
    randomize(&mut m, 0.3, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(m)
}

/// `log |det J|` of the forward map by central differences.
fn fd_logdet(model: &FlowModel, z: &[f64], t: f64) -> Result<f64> {
    let d = z.len();
    let h = 1e-6;
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut up = z.to_vec();
        up[j] += h;
        let mut dn = z.to_vec();
        dn[j] -= h;
        let (fu, _) = model.forward(&up, t)?;
        let (fd, _) = model.forward(&dn, t)?;
        for i in 0..d {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    Ok(jac.determinant().abs().ln())
}

fn flow_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut det_err, mut round) = (0.0f64, 0.0f64);
    for k in 0..40u64 {
        let dim = 2 + (k % 2) as usize;
        let model = random_model(dim, 1000 + k)?;
        let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let t = rng.gen_range(0.0..1.0);
        let (x, ld) = model.forward(&z, t)?;
        let fd = fd_logdet(&model, &z, t)?;
        det_err = det_err.max(((ld - fd).exp() - 1.0).abs());
        let (zb, _) = model.inverse(&x, t)?;
        round = round.max(zb.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let quad = oracles::QuadratureSpec::new(10.0, 201, oracles::QuadRule::Trapezoid)?;
    let mut mass_err = 0.0f64;
    for k in 0..3u64 {
        let model = random_model(2, 3000 + k)?;
        let mut failed = None;
        let mass = quad.integrate(2, |x| match model.log_density(x, 0.5) {
            Ok(v) => v.exp(),
            Err(e) => {
                failed.get_or_insert(e);
                0.0
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        mass_err = mass_err.max((mass - 1.0).abs());
    }
    Ok(vec![
        CheckResult::new("flow", "log-det vs finite-difference Jacobian (relative)", det_err, 1e-5),
        CheckResult::new("flow", "inverse roundtrip", round, 1e-8),
        CheckResult::new("flow", "density mass by quadrature", mass_err, 1e-3),
    ])
}

fn std_normal_2d() -> Result<Distribution> {
    Distribution::isotropic(vec![0.0, 0.0], 1.0)
}

/// Problems covering every loss family.
pub fn gradient_check_problems() -> Result<Vec<ProblemSpec>> {
    Ok(vec![
        ProblemSpec::Ot {
            p0: std_normal_2d()?,
            p1: Distribution::isotropic(vec![1.0, -1.0], 0.5)?,
            horizon: 1.0,
        },
        ProblemSpec::Rwpo {
            p0: Distribution::isotropic(vec![0.0, 0.0], 0.8)?,
            potential: Potential::DoubleWell { a: 1.0 },
            beta: 5.0,
            horizon: 2.0,
        },
        ProblemSpec::FpMatch {
            p0: std_normal_2d()?,
            drift: DriftField::Smiling { delta: 0.5 },
            gamma: 0.5,
            horizon: 1.0,
            reference: None,
        },
    ])
}

/// Worst relative deviation between tape gradients and central differences
/// over `instances` random models per family, probing `probes` parameters.
pub fn gradient_check(instances: u64, probes: usize) -> Result<f64> {
    let cfg = TrainConfig {
        n_t: 2,
        n_k: 3,
        n_b: 4,
        n_1: 3,
        lambda: Some(2.0),
        ..TrainConfig::default()
    };
    let mut worst = 0.0f64;
    for spec in gradient_check_problems()? {
        for k in 0..instances {
            let mut arch = FlowArch::new(2);
            arch.horizon = spec.horizon();
            let mut model = FlowModel::new(arch, k)?;
            randomize(&mut model, 0.3, &mut ChaCha8Rng::seed_from_u64(500 + k));
            let mut rng = ChaCha8Rng::seed_from_u64(600 + k);
            let batch = LossBatch::draw(&spec, &cfg, &mut rng);
            let mut g = GradVector::zeros(model.params().len());
            let base = evaluate_loss(&model, &spec, &cfg, &batch, Some(&mut g))?.total;
            let n = model.params().len();
            for _ in 0..probes {
                let i = rng.gen_range(0..n);
                let h = 1e-5;
                let orig = model.param_values()[i];
                model.param_values_mut()[i] = orig + h;
                let up = evaluate_loss(&model, &spec, &cfg, &batch, None)?.total;
                model.param_values_mut()[i] = orig - h;
                let dn = evaluate_loss(&model, &spec, &cfg, &batch, None)?.total;
                model.param_values_mut()[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                // rounding in the loss, amplified by 1/(dt h), sets the floor
                let scale = fd.abs().max(g.values[i].abs()).max(1e-3 * base.abs().max(1.0));
                worst = worst.max((fd - g.values[i]).abs() / scale);
            }
        }
    }
    Ok(worst)
}

fn diffkit_suite() -> Result<Vec<CheckResult>> {
    Ok(vec![CheckResult::new(
        "diffkit",
        "loss gradients vs central differences (relative)",
        gradient_check(3, 8)?,
        1e-4,
    )])
}

fn oracle_suite() -> Result<Vec<CheckResult>> {
    let p0 = crate::problems::Gaussian::isotropic(vec![0.0, 0.0], 4.0)?;
    let quad = oracles::QuadratureSpec::new(10.0, 256, oracles::QuadRule::Trapezoid)?;
    let kernel = oracles::kernel_optimal_cost(&p0, &Potential::Quadratic, 1.0, 1.0, &quad)?;
    let closed = oracles::rwpo_quadratic_cost(2, 1.0, 1.0)?;

    let mut stat = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..200 {
        let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let (r, scale) = oracles::stationarity_residual(rng.gen_range(-2.0..2.0), 1.0, &x);
        stat = stat.max(r.abs() / scale.max(f64::MIN_POSITIVE));
    }

    let (em, se) = oracles::ou_second_moment_em(1.0, 1.0, 0.5, 4.0, 2, 20_000, 1e-3, &mut rng)?;
    let exact = oracles::ou_second_moment(1.0, 1.0, 0.5, 8.0, 2)?;

    let s0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let s1 = DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 0.5]);
    let a = crate::problems::Gaussian::new(vec![0.0, 1.0], s0.clone())?;
    let b = crate::problems::Gaussian::new(vec![1.0, 0.0], s1.clone())?;
    let half = 0.5 * oracles::gaussian_w2sq(&[0.0, 1.0], &s0, &[1.0, 0.0], &s1)?;
    let reps: Vec<f64> = (0..8)
        .map(|_| {
            let xa: Vec<Vec<f64>> = (0..256).map(|_| a.sample(&mut rng)).collect();
            let xb: Vec<Vec<f64>> = (0..256).map(|_| b.sample(&mut rng)).collect();
            oracles::discrete_ot_cost(&xa, &xb)
        })
        .collect::<Result<_>>()?;
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let sd = (reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt();
    // finite-sample assignment cost is biased low; allow 3 SE plus the
    // O(n^{-1/2}) bias envelope of 256 points in 2D
    let w2_dev = (mean - half).abs() / (3.0 * sd / (reps.len() as f64).sqrt() + 0.1 * half);

    Ok(vec![
        CheckResult::new("oracles", "kernel cost vs closed form", (kernel - closed).abs(), 1e-3),
        CheckResult::new("oracles", "stationarity residual, gamma = 1 (relative)", stat, 1e-10),
        CheckResult::new("oracles", "OU moment vs Euler-Maruyama (in SE)", (em - exact).abs() / se, 3.0),
        CheckResult::new("oracles", "Gaussian W2 vs discrete OT (in envelopes)", w2_dev, 1.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope").is_err());
    }

    #[test]
    fn spline_suite_passes() {
        assert!(run_suite("spline").unwrap().iter().all(|c| c.passed));
    }
}
