//! Reference solutions used to score trained flows.
//!
//! Closed forms (Gaussian OT, RWPO with quadratic potential, OU moments),
//! kernel-formula quadrature for general potentials, exact discrete
//! assignment, the smiling stationarity residual and grid RMSE. None of these
//! touch the flow code path except [`rmse_on_grid`], which only reads
//! densities from it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcnfError};
use crate::flow::FlowModel;
use crate::problems::{DriftField, Gaussian, Potential, ProblemSpec, ReferenceDensity};

// ---------------------------------------------------------------- Gaussians

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(VcnfError::Config(format!("{name} must be a non-empty square matrix")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(VcnfError::Config(format!("{name} is not symmetric")));
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(VcnfError::Config(format!("{name} is not positive definite")));
    }
    Ok(eig)
}

fn spd_power(eig: &SymmetricEigen<f64, nalgebra::Dyn>, p: f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.powf(p)));
    q * d * q.transpose()
}

/// Symmetric square root of an SPD matrix.
pub fn sqrtm_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_power(&check_spd(m, "matrix")?, 0.5))
}

/// Affine map `x -> a x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(x) + &self.b).iter().copied().collect()
    }
}

fn check_means(mu0: &[f64], mu1: &[f64], s0: &DMatrix<f64>, s1: &DMatrix<f64>) -> Result<()> {
    let d = mu0.len();
    if mu1.len() != d || s0.nrows() != d || s1.nrows() != d {
        return Err(VcnfError::Config("Gaussian parameters differ in dimension".into()));
    }
    Ok(())
}

/// Optimal transport map between `N(mu0, s0)` and `N(mu1, s1)`:
/// `T(x) = mu1 + A (x - mu0)`, `A = s0^{-1/2} (s0^{1/2} s1 s0^{1/2})^{1/2} s0^{-1/2}`.
pub fn gaussian_ot_map(mu0: &[f64], s0: &DMatrix<f64>, mu1: &[f64], s1: &DMatrix<f64>) -> Result<AffineMap> {
    check_means(mu0, mu1, s0, s1)?;
    let e0 = check_spd(s0, "source covariance")?;
    check_spd(s1, "target covariance")?;
    let r = spd_power(&e0, 0.5);
    let r_inv = spd_power(&e0, -0.5);
    let mid = sqrtm_spd(&(&r * s1 * &r))?;
    let a = &r_inv * mid * &r_inv;
    let a = (&a + a.transpose()) * 0.5;
    let b = DVector::from_column_slice(mu1) - &a * DVector::from_column_slice(mu0);
    Ok(AffineMap { a, b })
}

/// Squared 2-Wasserstein distance between two Gaussians (not halved).
pub fn gaussian_w2sq(mu0: &[f64], s0: &DMatrix<f64>, mu1: &[f64], s1: &DMatrix<f64>) -> Result<f64> {
    check_means(mu0, mu1, s0, s1)?;
    let r = sqrtm_spd(s0)?;
    check_spd(s1, "target covariance")?;
    let cross = sqrtm_spd(&(&r * s1 * &r))?;
    let dm: f64 = mu0.iter().zip(mu1).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(dm + (s0 + s1 - cross * 2.0).trace())
}

/// `W2^2 / 2` between two [`Gaussian`]s: the OT benchmark value.
pub fn gaussian_ot_benchmark(p0: &Gaussian, p1: &Gaussian) -> Result<f64> {
    let m0: Vec<f64> = p0.mean().iter().copied().collect();
    let m1: Vec<f64> = p1.mean().iter().copied().collect();
    Ok(0.5 * gaussian_w2sq(&m0, p0.cov(), &m1, p1.cov())?)
}

// --------------------------------------------------------------------- RWPO

fn check_rwpo(beta: f64, horizon: f64) -> Result<()> {
    if !(beta > 0.0) || !(horizon >= 0.0) {
        return Err(VcnfError::Config("need beta > 0 and T >= 0".into()));
    }
    Ok(())
}

/// Optimal RWPO cost for `V = |x|^2/2` and `p0 = N(0, 2(T+1)/beta I)`.
pub fn rwpo_quadratic_cost(d: usize, beta: f64, horizon: f64) -> Result<f64> {
    check_rwpo(beta, horizon)?;
    Ok(d as f64 / beta * ((horizon + 1.0).ln() + 1.0))
}

/// Per-coordinate variance of the exact RWPO density, `2(T - t + 1)/beta`.
pub fn rwpo_true_variance(t: f64, beta: f64, horizon: f64) -> f64 {
    2.0 * (horizon - t + 1.0) / beta
}

pub fn rwpo_true_density(x: &[f64], t: f64, beta: f64, horizon: f64) -> Result<f64> {
    check_rwpo(beta, horizon)?;
    Ok(gaussian_iso_pdf(x, rwpo_true_variance(t, beta, horizon)))
}

/// HJB solution `(d/beta) log(1/(T-t+1)) - |x|^2 / (2(T-t+1))`.
pub fn rwpo_true_phi(x: &[f64], t: f64, beta: f64, horizon: f64) -> Result<f64> {
    check_rwpo(beta, horizon)?;
    let s = horizon - t + 1.0;
    let sq: f64 = x.iter().map(|v| v * v).sum();
    Ok(x.len() as f64 / beta * (1.0 / s).ln() - sq / (2.0 * s))
}

fn gaussian_iso_pdf(x: &[f64], var: f64) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    (-0.5 * sq / var).exp() / (2.0 * std::f64::consts::PI * var).powf(0.5 * x.len() as f64)
}

// --------------------------------------------------------------- quadrature

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadRule {
    Trapezoid,
    GaussLegendre,
}

/// Tensor quadrature on `[-L, L]^d`, plus the Gauss-Hermite order used for
/// expectations over Gaussian initial densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    pub half_width: f64,
    pub nodes: usize,
    pub rule: QuadRule,
    #[serde(default = "default_outer")]
    pub outer_nodes: usize,
}

fn default_outer() -> usize {
    20
}

/// Largest accepted integrand mass fraction in the outer 5% shell of the box.
pub const TRUNCATION_LIMIT: f64 = 1e-8;

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            nodes: 256,
            rule: QuadRule::Trapezoid,
            outer_nodes: default_outer(),
        }
    }
}

impl QuadratureSpec {
    pub fn new(half_width: f64, nodes: usize, rule: QuadRule) -> Result<Self> {
        let q = Self {
            half_width,
            nodes,
            rule,
            outer_nodes: default_outer(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.half_width.is_finite()) || self.nodes < 16 {
            return Err(VcnfError::Config("quadrature needs L > 0 and at least 16 nodes".into()));
        }
        if self.outer_nodes == 0 {
            return Err(VcnfError::Config("Gauss-Hermite order must be positive".into()));
        }
        Ok(())
    }

    /// One-dimensional nodes and weights on `[-L, L]`.
    pub fn rule_1d(&self) -> (Vec<f64>, Vec<f64>) {
        let (l, n) = (self.half_width, self.nodes);
        match self.rule {
            QuadRule::Trapezoid => {
                let h = 2.0 * l / (n - 1) as f64;
                let x = (0..n).map(|i| -l + h * i as f64).collect();
                let w = (0..n)
                    .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
                    .collect();
                (x, w)
            }
            QuadRule::GaussLegendre => {
                let (x, w) = gauss_legendre(n);
                (x.iter().map(|v| v * l).collect(), w.iter().map(|v| v * l).collect())
            }
        }
    }

    /// Tensor-product integral of `f` over `[-L, L]^d`.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, d: usize, mut f: F) -> f64 {
        let (x, w) = self.rule_1d();
        let mut total = 0.0;
        for_each_tensor_node(&x, &w, d, |p, wt| total += wt * f(p));
        total
    }
}

fn for_each_tensor_node<F: FnMut(&[f64], f64)>(x: &[f64], w: &[f64], d: usize, mut f: F) {
    let n = x.len();
    let mut idx = vec![0usize; d];
    let mut point = vec![x[0]; d];
    loop {
        let wt: f64 = idx.iter().map(|&i| w[i]).product();
        for (p, &i) in point.iter_mut().zip(&idx) {
            *p = x[i];
        }
        f(&point, wt);
        let mut k = 0;
        loop {
            if k == d {
                return;
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Nodes and weights from a symmetric Jacobi matrix (Golub-Welsch).
fn golub_welsch(off_diag: &[f64], mass: f64) -> (Vec<f64>, Vec<f64>) {
    let n = off_diag.len() + 1;
    let mut j = DMatrix::zeros(n, n);
    for (k, &b) in off_diag.iter().enumerate() {
        j[(k, k + 1)] = b;
        j[(k + 1, k)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&off, 2.0)
}

/// Gauss-Hermite rule for the standard normal weight (weights sum to 1).
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&off, 1.0)
}

// ------------------------------------------------------------------ kernel

/// Precomputed inner quadrature for the kernel formula.
struct KernelGrid {
    points: Vec<Vec<f64>>,
    log_w: Vec<f64>,
    potential: Vec<f64>,
    shell: Vec<bool>,
}

impl KernelGrid {
    fn new(v: &Potential, d: usize, quad: &QuadratureSpec) -> Result<Self> {
        quad.validate()?;
        if !v.supports_dim(d) {
            return Err(VcnfError::Config(format!("potential does not support dimension {d}")));
        }
        let (x, w) = quad.rule_1d();
        let edge = 0.95 * quad.half_width;
        let mut grid = KernelGrid {
            points: Vec::new(),
            log_w: Vec::new(),
            potential: Vec::new(),
            shell: Vec::new(),
        };
        for_each_tensor_node(&x, &w, d, |p, wt| {
            grid.points.push(p.to_vec());
            grid.log_w.push(wt.ln());
            grid.potential.push(v.eval(p));
            grid.shell.push(p.iter().any(|c| c.abs() > edge));
        });
        Ok(grid)
    }

    /// `(phi, shell mass fraction)` at `x` with remaining time `s = T - t > 0`.
    fn phi(&self, x: &[f64], s: f64, beta: f64) -> (f64, f64) {
        let d = x.len() as f64;
        let mut expo = Vec::with_capacity(self.points.len());
        let mut max = f64::NEG_INFINITY;
        for (k, y) in self.points.iter().enumerate() {
            let dist: f64 = y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            let e = self.log_w[k] - 0.5 * beta * (self.potential[k] + dist / (2.0 * s));
            max = max.max(e);
            expo.push(e);
        }
        let (mut total, mut shell) = (0.0, 0.0);
        for (k, e) in expo.iter().enumerate() {
            let m = (e - max).exp();
            total += m;
            if self.shell[k] {
                shell += m;
            }
        }
        let log_int = max + total.ln() - 0.5 * d * (4.0 * std::f64::consts::PI * s / beta).ln();
        (2.0 / beta * log_int, shell / total)
    }
}

/// Kernel-formula HJB solution `phi(x, t)`; at `t = T` it is `-V(x)`.
pub fn kernel_phi(x: &[f64], t: f64, beta: f64, horizon: f64, v: &Potential, quad: &QuadratureSpec) -> Result<f64> {
    check_rwpo(beta, horizon)?;
    let s = horizon - t;
    if s < 0.0 {
        return Err(VcnfError::Config(format!("t = {t} lies beyond the horizon")));
    }
    if s == 0.0 {
        return Ok(-v.eval(x));
    }
    let grid = KernelGrid::new(v, x.len(), quad)?;
    let (phi, shell) = grid.phi(x, s, beta);
    if shell > TRUNCATION_LIMIT {
        return Err(VcnfError::Accuracy(format!(
            "integrand mass {shell:.2e} in the outer shell; enlarge the box"
        )));
    }
    Ok(phi)
}

/// Optimal RWPO cost `-E_{p0}[phi(x, 0)]`, with Gauss-Hermite over `p0`.
///
/// The truncation diagnostic is the `p0`-weighted shell fraction across the
/// outer nodes.
pub fn kernel_optimal_cost(p0: &Gaussian, v: &Potential, beta: f64, horizon: f64, quad: &QuadratureSpec) -> Result<f64> {
    check_rwpo(beta, horizon)?;
    if horizon == 0.0 {
        return Err(VcnfError::Config("kernel cost needs T > 0".into()));
    }
    let d = p0.dim();
    let grid = KernelGrid::new(v, d, quad)?;
    let (z, w) = gauss_hermite_normal(quad.outer_nodes);
    let chol = p0
        .cov()
        .clone()
        .cholesky()
        .ok_or_else(|| VcnfError::Config("p0 covariance is not positive definite".into()))?
        .l();
    let (mut cost, mut shell) = (0.0, 0.0);
    for_each_tensor_node(&z, &w, d, |node, wt| {
        let x = p0.mean() + &chol * DVector::from_column_slice(node);
        let (phi, sh) = grid.phi(x.as_slice(), horizon, beta);
        cost -= wt * phi;
        shell += wt * sh;
    });
    if shell > TRUNCATION_LIMIT {
        return Err(VcnfError::Accuracy(format!(
            "expected integrand mass {shell:.2e} in the outer shell; enlarge the box"
        )));
    }
    Ok(cost)
}

// ---------------------------------------------------------------------- OU

fn check_ou(a: f64, gamma: f64) -> Result<()> {
    if !(a > 0.0) {
        return Err(VcnfError::Config(format!("OU rate must be positive, got {a}")));
    }
    if !(gamma >= 0.0) {
        return Err(VcnfError::Config(format!("diffusion must be non-negative, got {gamma}")));
    }
    Ok(())
}

/// Per-coordinate variance `gamma/a + (var0 - gamma/a) e^{-2at}`.
pub fn ou_variance(t: f64, a: f64, gamma: f64, var0: f64) -> Result<f64> {
    check_ou(a, gamma)?;
    Ok(gamma / a + (var0 - gamma / a) * (-2.0 * a * t).exp())
}

/// `E|x_t|^2` for an isotropic centered start with `E|x_0|^2 = m0`.
pub fn ou_second_moment(t: f64, a: f64, gamma: f64, m0: f64, d: usize) -> Result<f64> {
    Ok(d as f64 * ou_variance(t, a, gamma, m0 / d as f64)?)
}

pub fn ou_density(x: &[f64], t: f64, a: f64, gamma: f64, var0: f64) -> Result<f64> {
    Ok(gaussian_iso_pdf(x, ou_variance(t, a, gamma, var0)?))
}

/// Euler-Maruyama estimate of `E|x_t|^2` for `dx = -a x dt + sqrt(2 gamma) dW`
/// from `N(0, var0 I)`; returns `(mean, standard error)`.
#[allow(clippy::too_many_arguments)]
pub fn ou_second_moment_em<R: Rng + ?Sized>(
    t: f64,
    a: f64,
    gamma: f64,
    var0: f64,
    d: usize,
    paths: usize,
    dt: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    check_ou(a, gamma)?;
    if paths < 2 || !(dt > 0.0) {
        return Err(VcnfError::Config("need at least two paths and dt > 0".into()));
    }
    let steps = (t / dt).round() as usize;
    let h = t / steps.max(1) as f64;
    let noise = (2.0 * gamma * h).sqrt();
    let mut values = Vec::with_capacity(paths);
    let mut x = vec![0.0; d];
    for _ in 0..paths {
        for v in x.iter_mut() {
            *v = var0.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        for _ in 0..steps {
            for v in x.iter_mut() {
                *v += -a * *v * h + noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        values.push(x.iter().map(|v| v * v).sum::<f64>());
    }
    Ok(mean_se(&values))
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ------------------------------------------------------------- discrete OT

/// Minimum-cost perfect assignment of a square cost matrix (Hungarian method
/// with row/column potentials). Returns the column assigned to each row.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based potentials and matching, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

/// Largest sample count accepted by [`discrete_ot_cost`].
pub const MAX_DISCRETE_OT: usize = 512;

/// Half the mean squared distance under the optimal assignment between two
/// equal-size point clouds.
pub fn discrete_ot_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let n = a.len();
    if n == 0 || n != b.len() || n > MAX_DISCRETE_OT {
        return Err(VcnfError::Config(format!(
            "need equal sample counts between 1 and {MAX_DISCRETE_OT}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let cost = DMatrix::from_fn(n, n, |i, j| a[i].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum());
    let assign = hungarian(&cost);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(0.5 * total / n as f64)
}

// ---------------------------------------------------------- smiling check

/// `(U, grad U, Hessian U)` of `(|x|^2 - 4)^2 / 4 + (x2 + 1)^2`.
pub fn smiling_potential(x: &[f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let [x1, x2] = *x;
    let q = x1 * x1 + x2 * x2 - 4.0;
    let u = 0.25 * q * q + (x2 + 1.0).powi(2);
    let g = [q * x1, q * x2 + 2.0 * (x2 + 1.0)];
    let h = [[2.0 * x1 * x1 + q, 2.0 * x1 * x2], [2.0 * x1 * x2, 2.0 * x2 * x2 + q + 2.0]];
    (u, g, h)
}

/// `div(pi v) - gamma lap(pi)` at `x` for `pi = e^{-U}` and the smiling drift
/// `v = -grad U - delta J grad U`, all from analytic derivatives. Returns the
/// residual and the scale `pi (|grad U|^2 + |lap U|)` it should be compared to.
pub fn stationarity_residual(delta: f64, gamma: f64, x: &[f64; 2]) -> (f64, f64) {
    let (u, g, h) = smiling_potential(x);
    let pi = (-u).exp();
    let grad_pi = [-pi * g[0], -pi * g[1]];
    // J grad U = (dU/dx2, -dU/dx1)
    let v = [-g[0] - delta * g[1], -g[1] + delta * g[0]];
    let div_v = (-h[0][0] - delta * h[1][0]) + (-h[1][1] + delta * h[0][1]);
    let div_pi_v = grad_pi[0] * v[0] + grad_pi[1] * v[1] + pi * div_v;
    let lap_u = h[0][0] + h[1][1];
    let grad_sq = g[0] * g[0] + g[1] * g[1];
    let lap_pi = pi * (grad_sq - lap_u);
    (div_pi_v - gamma * lap_pi, pi * (grad_sq + lap_u.abs()))
}

// --------------------------------------------------------------------- RMSE

/// Uniform grid with endpoints on `[-L, L]`.
pub fn grid_axis(half_width: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64)
        .collect()
}

/// Root-mean-square density error of a 2D model against `true_density` on
/// an `n x n` grid of `[-L, L]^2` at time `t`.
pub fn rmse_on_grid<F>(model: &FlowModel, true_density: F, half_width: f64, n: usize, t: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if model.dim() != 2 {
        return Err(VcnfError::Contract("grid RMSE is defined for 2D models".into()));
    }
    if n < 2 || !(half_width > 0.0) {
        return Err(VcnfError::Config("grid needs n >= 2 and L > 0".into()));
    }
    let axis = grid_axis(half_width, n);
    let h = axis[1] - axis[0];
    let (mut sq, mut mass) = (0.0, 0.0);
    for &x1 in &axis {
        for &x2 in &axis {
            let p_true = true_density(&[x1, x2]);
            if !p_true.is_finite() || p_true < 0.0 {
                return Err(VcnfError::Config("reference density is negative or not finite".into()));
            }
            let p_model = model.log_density(&[x1, x2], t)?.exp();
            sq += (p_model - p_true).powi(2);
            mass += p_true;
        }
    }
    mass *= h * h;
    if !(mass > 0.9 && mass < 1.1) {
        return Err(VcnfError::Config(format!(
            "reference density carries mass {mass:.4} on the grid; it is not normalized there"
        )));
    }
    Ok((sq / (n * n) as f64).sqrt())
}

// --------------------------------------------------------------- benchmark

/// Quadrature box used for the kernel cost of `v`: `L = 6` for the double
/// well, the default box otherwise.
pub fn default_quadrature(v: &Potential) -> QuadratureSpec {
    match v {
        Potential::DoubleWell { .. } => QuadratureSpec {
            half_width: 6.0,
            ..QuadratureSpec::default()
        },
        Potential::Quadratic => QuadratureSpec::default(),
    }
}

/// Reference value for the objective of `spec`, when one is available:
/// `W2^2/2` for Gaussian OT, the closed form for RWPO with quadratic `V`
/// and its matching Gaussian start, the kernel cost for other Gaussian RWPO
/// starts. FP problems are scored by density error instead and return `None`.
pub fn benchmark_for(spec: &ProblemSpec) -> Result<Option<f64>> {
    match spec {
        ProblemSpec::Ot { p0, p1, .. } => match (p0.as_gaussian(), p1.as_gaussian()) {
            (Some(a), Some(b)) => Ok(Some(gaussian_ot_benchmark(a, b)?)),
            _ => Ok(None),
        },
        ProblemSpec::Rwpo {
            p0,
            potential,
            beta,
            horizon,
        } => {
            let Some(g) = p0.as_gaussian() else {
                return Ok(None);
            };
            let matched = g
                .centered_isotropic_var()
                .is_some_and(|v| (v - rwpo_true_variance(0.0, *beta, *horizon)).abs() < 1e-12);
            if *potential == Potential::Quadratic && matched {
                return Ok(Some(rwpo_quadratic_cost(g.dim(), *beta, *horizon)?));
            }
            if g.dim() > 3 {
                return Ok(None);
            }
            Ok(Some(kernel_optimal_cost(g, potential, *beta, *horizon, &default_quadrature(potential))?))
        }
        ProblemSpec::FpMatch { .. } => Ok(None),
    }
}

/// Exact density of an FP problem with an OU reference at time `t`.
pub fn fp_reference_density(spec: &ProblemSpec, x: &[f64], t: f64) -> Result<Option<f64>> {
    if let ProblemSpec::FpMatch {
        p0,
        drift: DriftField::Ou { a },
        gamma,
        reference: Some(ReferenceDensity::Ou),
        ..
    } = spec
    {
        let var0 = p0
            .as_gaussian()
            .and_then(|g| g.centered_isotropic_var())
            .ok_or_else(|| VcnfError::Config("OU reference needs a centered isotropic p0".into()))?;
        return Ok(Some(ou_density(x, t, *a, *gamma, var0)?));
    }
    Ok(None)
}

// ---------------------------------------------------------------------- CSV

/// One exported oracle evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub oracle: String,
    pub inputs: String,
    pub value: f64,
    pub error: Option<f64>,
}

impl OracleRow {
    pub const CSV_HEADER: &'static str = "oracle,inputs,value,error";

    pub fn new(oracle: &str, inputs: impl Into<String>, value: f64, error: Option<f64>) -> Self {
        Self {
            oracle: oracle.into(),
            inputs: inputs.into(),
            value,
            error,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},\"{}\",{},{}",
            self.oracle,
            self.inputs.replace('"', "'"),
            self.value,
            self.error.map(|e| e.to_string()).unwrap_or_default()
        )
    }
}
