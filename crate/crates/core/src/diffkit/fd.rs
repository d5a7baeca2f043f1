//! Central-difference velocity and score estimators.
//!
//! Both are plain model evaluations, so on a tape they are differentiated
//! with respect to the parameters like any other loss term.

use super::{Ops, Plain};
use crate::error::{Result, VcnfError};
use crate::flow::FlowModel;

/// `(f(z, t + dt/2) - f(z, t - dt/2)) / dt`.
pub fn velocity_fd_with<O: Ops>(ops: O, model: &FlowModel, z: &[O::S], t: f64, dt: f64) -> Result<Vec<O::S>> {
    let (plus, _) = model.forward_with(ops, z, t + 0.5 * dt)?;
    let (minus, _) = model.forward_with(ops, z, t - 0.5 * dt)?;
    Ok(plus
        .into_iter()
        .zip(minus)
        .map(|(p, m)| (p - m) / dt)
        .collect())
}

/// Component `i`: `(log p(x + dx e_i / 2, t) - log p(x - dx e_i / 2, t)) / dx`.
pub fn score_fd_with<O: Ops>(ops: O, model: &FlowModel, x: &[O::S], t: f64, dx: f64) -> Result<Vec<O::S>> {
    let mut shifted = x.to_vec();
    let mut score = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        shifted[i] = x[i] + 0.5 * dx;
        let up = model.log_density_with(ops, &shifted, t)?;
        shifted[i] = x[i] - 0.5 * dx;
        let down = model.log_density_with(ops, &shifted, t)?;
        shifted[i] = x[i];
        score.push((up - down) / dx);
    }
    Ok(score)
}

pub fn velocity_fd(model: &FlowModel, z: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(VcnfError::Contract(format!("time step must be positive, got {dt}")));
    }
    if z.iter().any(|v| !v.is_finite()) || z.len() != model.dim() {
        return Err(VcnfError::Contract("latent point has wrong size or is not finite".into()));
    }
    velocity_fd_with(Plain, model, z, t, dt)
}

pub fn score_fd(model: &FlowModel, x: &[f64], t: f64, dx: f64) -> Result<Vec<f64>> {
    if !(dx > 0.0) {
        return Err(VcnfError::Contract(format!("space step must be positive, got {dx}")));
    }
    if x.iter().any(|v| !v.is_finite()) || x.len() != model.dim() {
        return Err(VcnfError::Contract("point has wrong size or is not finite".into()));
    }
    score_fd_with(Plain, model, x, t, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{randomize, FlowArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_model_has_zero_velocity_and_gaussian_score() {
        let m = FlowModel::new(FlowArch::new(2), 1).unwrap();
        let v = velocity_fd(&m, &[0.3, -1.0], 0.5, 1e-3).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        let s = score_fd(&m, &[0.3, -1.0], 0.5, 1e-3).unwrap();
        // the central difference of a quadratic is exact
        assert!((s[0] + 0.3).abs() < 1e-9 && (s[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_steps_are_rejected() {
        let m = FlowModel::new(FlowArch::new(2), 1).unwrap();
        assert!(velocity_fd(&m, &[0.0, 0.0], 0.5, 0.0).is_err());
        assert!(score_fd(&m, &[0.0, 0.0], 0.5, -1e-3).is_err());
    }

    #[test]
    fn central_differences_are_second_order() {
        let mut m = FlowModel::new(FlowArch::new(2), 4).unwrap();
        randomize(&mut m, 0.4, &mut ChaCha8Rng::seed_from_u64(4));
        let z = [0.4, -0.8];
        let t = 0.4;
        let reference = velocity_fd(&m, &z, t, 1e-5).unwrap();
        let e1 = (velocity_fd(&m, &z, t, 0.1).unwrap()[0] - reference[0]).abs();
        let e2 = (velocity_fd(&m, &z, t, 0.01).unwrap()[0] - reference[0]).abs();
        let ratio = e1 / e2;
        assert!(ratio > 60.0 && ratio < 160.0, "ratio {ratio}");
        let x = [0.5, 0.2];
        let reference = score_fd(&m, &x, t, 1e-5).unwrap();
        let e1 = (score_fd(&m, &x, t, 0.1).unwrap()[1] - reference[1]).abs();
        let e2 = (score_fd(&m, &x, t, 0.01).unwrap()[1] - reference[1]).abs();
        let ratio = e1 / e2;
        assert!(ratio > 60.0 && ratio < 160.0, "ratio {ratio}");
    }
}
