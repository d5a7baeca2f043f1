//! Problem instances (OT, RWPO, FP flow matching) and their Monte Carlo losses.
//!
//! Every loss is assembled from per-sample terms written against [`Ops`], so
//! the same code yields plain values or, on a [`Tape`], parameter gradients.
//! Samples are drawn once into a [`LossBatch`] and evaluated in index order,
//! which keeps the reduction order fixed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::{score_fd_with, velocity_fd_with, GradVector, Ops, Plain, Real, Tape};
use crate::error::{Result, VcnfError};
use crate::flow::{standard_normal, FlowModel};
use crate::trainer::TrainConfig;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianSpec {
    mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov: Option<Vec<Vec<f64>>>,
    /// Isotropic variance, used when `cov` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    var: Option<f64>,
}

/// Multivariate normal with cached Cholesky factor and precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianSpec", into = "GaussianSpec")]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    prec: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(VcnfError::Config(format!(
                "covariance must be {d}x{d}, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(VcnfError::Config("covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| VcnfError::Config("covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let prec = chol.inverse();
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            chol: l,
            prec,
            log_norm: -0.5 * (d as f64 * LOG_2PI + log_det),
        })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    pub fn from_rows(mean: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(VcnfError::Config("covariance rows must be square".into()));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        self.log_norm - 0.5 * diff.dot(&(&self.prec * &diff))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps = DVector::from_vec(standard_normal(self.dim(), rng));
        (&self.mean + &self.chol * eps).iter().copied().collect()
    }

    /// `Some(var)` when the mean is zero and the covariance is `var * I`.
    pub fn centered_isotropic_var(&self) -> Option<f64> {
        let d = self.dim();
        let v = self.cov[(0, 0)];
        let iso = (&self.cov - DMatrix::identity(d, d) * v).amax() == 0.0;
        (iso && self.mean.iter().all(|m| *m == 0.0)).then_some(v)
    }
}

impl TryFrom<GaussianSpec> for Gaussian {
    type Error = VcnfError;

    fn try_from(spec: GaussianSpec) -> Result<Self> {
        match (spec.cov, spec.var) {
            (Some(rows), None) => Gaussian::from_rows(spec.mean, &rows),
            (None, Some(var)) => Gaussian::isotropic(spec.mean, var),
            (None, None) => Gaussian::isotropic(spec.mean, 1.0),
            (Some(_), Some(_)) => Err(VcnfError::Config("give either `cov` or `var`, not both".into())),
        }
    }
}

impl From<Gaussian> for GaussianSpec {
    fn from(g: Gaussian) -> Self {
        let d = g.dim();
        GaussianSpec {
            mean: g.mean.iter().copied().collect(),
            cov: Some((0..d).map(|i| (0..d).map(|j| g.cov[(i, j)]).collect()).collect()),
            var: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureSpec {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct Mixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(VcnfError::Config("mixture needs one weight per component".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(VcnfError::Config("mixture weights must lie on the simplex".into()));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(VcnfError::Config("mixture components differ in dimension".into()));
        }
        Ok(Self { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }
}

impl TryFrom<MixtureSpec> for Mixture {
    type Error = VcnfError;
    fn try_from(s: MixtureSpec) -> Result<Self> {
        Mixture::new(s.weights, s.components)
    }
}

impl From<Mixture> for MixtureSpec {
    fn from(m: Mixture) -> Self {
        MixtureSpec {
            weights: m.weights,
            components: m.components,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Gaussian(Gaussian),
    GaussianMixture(Mixture),
}

impl Distribution {
    pub fn gaussian(mean: Vec<f64>, cov: &[Vec<f64>]) -> Result<Self> {
        Ok(Distribution::Gaussian(Gaussian::from_rows(mean, cov)?))
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        Ok(Distribution::Gaussian(Gaussian::isotropic(mean, var)?))
    }

    /// Equal-weight mixture of unit-covariance Gaussians at `centers`.
    pub fn unit_mixture(centers: &[Vec<f64>]) -> Result<Self> {
        let n = centers.len();
        let comps = centers
            .iter()
            .map(|c| Gaussian::isotropic(c.clone(), 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Distribution::GaussianMixture(Mixture::new(vec![1.0 / n as f64; n], comps)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian(g) => g.dim(),
            Distribution::GaussianMixture(m) => m.components[0].dim(),
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        match self {
            Distribution::Gaussian(g) => g.log_pdf(x),
            Distribution::GaussianMixture(m) => {
                let terms: Vec<f64> = m
                    .weights
                    .iter()
                    .zip(&m.components)
                    .map(|(w, c)| w.ln() + c.log_pdf(x))
                    .collect();
                let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Distribution::Gaussian(g) => g.sample(rng),
            Distribution::GaussianMixture(m) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = m.components.len() - 1;
                for (i, w) in m.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                m.components[pick].sample(rng)
            }
        }
    }

    pub fn as_gaussian(&self) -> Option<&Gaussian> {
        match self {
            Distribution::Gaussian(g) => Some(g),
            Distribution::GaussianMixture(_) => None,
        }
    }
}

/// Terminal potential `V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    /// `|x|^2 / 2`.
    Quadratic,
    /// `((x1-a)^2 + (x2+a)^2)((x1+a)^2 + (x2-a)^2) / 4`, wells at `(a,-a)` and `(-a,a)`.
    DoubleWell { a: f64 },
}

impl Potential {
    pub fn eval_with<S: Real>(&self, x: &[S]) -> S {
        match *self {
            Potential::Quadratic => {
                let mut acc = x[0].square();
                for &v in &x[1..] {
                    acc = acc + v.square();
                }
                acc * 0.5
            }
            Potential::DoubleWell { a } => {
                let first = (x[0] - a).square() + (x[1] + a).square();
                let second = (x[0] + a).square() + (x[1] - a).square();
                first * second * 0.25
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_with(x)
    }

    pub fn supports_dim(&self, d: usize) -> bool {
        match self {
            Potential::Quadratic => d >= 1,
            Potential::DoubleWell { .. } => d == 2,
        }
    }
}

pub fn potential_eval(v: &Potential, x: &[f64]) -> f64 {
    v.eval(x)
}

/// FP drift `b(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftField {
    Zero,
    /// Ornstein-Uhlenbeck drift `-a x`.
    Ou { a: f64 },
    /// `-grad U - delta J grad U` for the smiling potential
    /// `U = (|x|^2 - 4)^2 / 4 + (x2 + 1)^2`, `J = [[0, 1], [-1, 0]]`.
    Smiling { delta: f64 },
}

impl DriftField {
    pub fn eval_with<S: Real>(&self, x: &[S]) -> Vec<S> {
        match *self {
            DriftField::Zero => x.iter().map(|&v| v * 0.0).collect(),
            DriftField::Ou { a } => x.iter().map(|&v| v * -a).collect(),
            DriftField::Smiling { delta } => {
                let q = x[0].square() + x[1].square() - 4.0;
                let b1 = (x[0] + x[1] * delta) * q + (x[1] + 1.0) * (2.0 * delta);
                let b2 = (x[1] - x[0] * delta) * q + (x[1] + 1.0) * 2.0;
                vec![-b1, -b2]
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with(x)
    }

    pub fn supports_dim(&self, d: usize) -> bool {
        match self {
            DriftField::Smiling { .. } => d == 2,
            _ => d >= 1,
        }
    }
}

pub fn drift_eval(b: &DriftField, x: &[f64]) -> Vec<f64> {
    b.eval(x)
}

/// Analytic density available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceDensity {
    /// Centered Gaussian from the OU variance ODE; needs OU drift and a
    /// centered isotropic Gaussian `p0`.
    Ou,
}

fn default_unit_horizon() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Ot {
        p0: Distribution,
        p1: Distribution,
        #[serde(default = "default_unit_horizon")]
        horizon: f64,
    },
    Rwpo {
        p0: Distribution,
        potential: Potential,
        beta: f64,
        horizon: f64,
    },
    FpMatch {
        p0: Distribution,
        drift: DriftField,
        gamma: f64,
        horizon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<ReferenceDensity>,
    },
}

impl ProblemSpec {
    pub fn horizon(&self) -> f64 {
        match self {
            ProblemSpec::Ot { horizon, .. }
            | ProblemSpec::Rwpo { horizon, .. }
            | ProblemSpec::FpMatch { horizon, .. } => *horizon,
        }
    }

    pub fn p0(&self) -> &Distribution {
        match self {
            ProblemSpec::Ot { p0, .. } | ProblemSpec::Rwpo { p0, .. } | ProblemSpec::FpMatch { p0, .. } => p0,
        }
    }

    pub fn dim(&self) -> usize {
        self.p0().dim()
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ProblemSpec::Ot { .. } => "ot",
            ProblemSpec::Rwpo { .. } => "rwpo",
            ProblemSpec::FpMatch { .. } => "fp_match",
        }
    }

    /// Penalty weight used when the training config leaves it unset.
    pub fn default_lambda(&self) -> f64 {
        match self {
            ProblemSpec::Ot { .. } => 500.0,
            ProblemSpec::Rwpo { .. } => 200.0,
            ProblemSpec::FpMatch { .. } => 500.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        if !(t > 0.0 && t.is_finite()) {
            return Err(VcnfError::Config(format!("horizon must be positive, got {t}")));
        }
        let d = self.dim();
        match self {
            ProblemSpec::Ot { p1, horizon, .. } => {
                if p1.dim() != d {
                    return Err(VcnfError::Config("p0 and p1 differ in dimension".into()));
                }
                if *horizon != 1.0 {
                    return Err(VcnfError::Config("OT is posed on the unit time interval".into()));
                }
            }
            ProblemSpec::Rwpo { potential, beta, .. } => {
                if !(*beta > 0.0) {
                    return Err(VcnfError::Config(format!("beta must be positive, got {beta}")));
                }
                if !potential.supports_dim(d) {
                    return Err(VcnfError::Config(format!("potential does not support dimension {d}")));
                }
            }
            ProblemSpec::FpMatch {
                p0,
                drift,
                gamma,
                reference,
                ..
            } => {
                if !(*gamma >= 0.0) {
                    return Err(VcnfError::Config(format!("gamma must be non-negative, got {gamma}")));
                }
                if !drift.supports_dim(d) {
                    return Err(VcnfError::Config(format!("drift does not support dimension {d}")));
                }
                if let Some(ReferenceDensity::Ou) = reference {
                    let iso = p0.as_gaussian().and_then(|g| g.centered_isotropic_var());
                    if !matches!(drift, DriftField::Ou { .. }) || iso.is_none() {
                        return Err(VcnfError::Config(
                            "the OU reference density needs OU drift and a centered isotropic Gaussian p0".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Samples for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub times: Vec<f64>,
    /// `times.len() * n_k` latent points, grouped by time.
    pub latents: Vec<Vec<f64>>,
    /// Samples of `p0` for the initial penalty.
    pub initial: Vec<Vec<f64>>,
    /// Samples of `p1` for the terminal penalty (OT only).
    pub target: Vec<Vec<f64>>,
    /// Latent points pushed to `T` for the terminal potential (RWPO only).
    pub terminal: Vec<Vec<f64>>,
}

impl LossBatch {
    pub fn draw<R: Rng + ?Sized>(spec: &ProblemSpec, cfg: &TrainConfig, rng: &mut R) -> Self {
        let d = spec.dim();
        let horizon = spec.horizon();
        let times: Vec<f64> = (0..cfg.n_t).map(|_| rng.gen::<f64>() * horizon).collect();
        let latents = (0..cfg.n_t * cfg.n_k).map(|_| standard_normal(d, rng)).collect();
        let initial = (0..cfg.n_b).map(|_| spec.p0().sample(rng)).collect();
        let target = match spec {
            ProblemSpec::Ot { p1, .. } => (0..cfg.n_b).map(|_| p1.sample(rng)).collect(),
            _ => Vec::new(),
        };
        let terminal = match spec {
            ProblemSpec::Rwpo { .. } => (0..cfg.n_1).map(|_| standard_normal(d, rng)).collect(),
            _ => Vec::new(),
        };
        Self {
            times,
            latents,
            initial,
            target,
            terminal,
        }
    }
}

/// Loss value split into its parts (each already weighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub kinetic: f64,
    pub penalty: f64,
    pub terminal: f64,
}

/// Finite-difference steps used by the residual terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSteps {
    pub dt: f64,
    pub dx: f64,
}

impl FdSteps {
    pub fn default_for(horizon: f64) -> Self {
        Self {
            dt: 1e-3 * horizon,
            dx: 1e-3,
        }
    }
}

fn sum_sq<S: Real>(v: &[S]) -> S {
    let mut acc = v[0].square();
    for &x in &v[1..] {
        acc = acc + x.square();
    }
    acc
}

/// Unweighted running-cost integrand at one `(z, t)`:
/// OT `|D_t f|^2 / 2`, RWPO `|D_t f + D_x log p / beta|^2 / 2`,
/// FP `|D_t f - b(f) + gamma D_x log p|^2`.
pub fn running_term_with<O: Ops>(
    ops: O,
    model: &FlowModel,
    spec: &ProblemSpec,
    steps: FdSteps,
    z: &[O::S],
    t: f64,
) -> Result<O::S> {
    let vel = velocity_fd_with(ops, model, z, t, steps.dt)?;
    match spec {
        ProblemSpec::Ot { .. } => Ok(sum_sq(&vel) * 0.5),
        ProblemSpec::Rwpo { beta, .. } => {
            let (x, _) = model.forward_with(ops, z, t)?;
            let score = score_fd_with(ops, model, &x, t, steps.dx)?;
            let r: Vec<O::S> = vel.iter().zip(&score).map(|(&v, &s)| v + s / *beta).collect();
            Ok(sum_sq(&r) * 0.5)
        }
        ProblemSpec::FpMatch { drift, gamma, .. } => {
            let (x, _) = model.forward_with(ops, z, t)?;
            let b = drift.eval_with(&x);
            let mut r: Vec<O::S> = vel.iter().zip(&b).map(|(&v, &bi)| v - bi).collect();
            if *gamma != 0.0 {
                let score = score_fd_with(ops, model, &x, t, steps.dx)?;
                for (ri, s) in r.iter_mut().zip(score) {
                    *ri = *ri + s * *gamma;
                }
            }
            Ok(sum_sq(&r))
        }
    }
}

/// Weight on the mean running term: `T` for RWPO (time integral), 1 otherwise.
fn running_scale(spec: &ProblemSpec) -> f64 {
    match spec {
        ProblemSpec::Rwpo { horizon, .. } => *horizon,
        _ => 1.0,
    }
}

/// One per-sample summand of a loss.
#[derive(Debug, Clone, Copy)]
enum Term<'a> {
    Running { z: &'a [f64], t: f64 },
    NegLogDensity { x: &'a [f64], t: f64 },
    Terminal { z: &'a [f64] },
}

impl Term<'_> {
    fn eval<O: Ops>(&self, ops: O, model: &FlowModel, spec: &ProblemSpec, steps: FdSteps) -> Result<O::S> {
        match *self {
            Term::Running { z, t } => {
                let z: Vec<O::S> = z.iter().map(|&v| ops.constant(v)).collect();
                running_term_with(ops, model, spec, steps, &z, t)
            }
            Term::NegLogDensity { x, t } => {
                let x: Vec<O::S> = x.iter().map(|&v| ops.constant(v)).collect();
                Ok(-model.log_density_with(ops, &x, t)?)
            }
            Term::Terminal { z } => {
                let ProblemSpec::Rwpo { potential, horizon, .. } = spec else {
                    return Err(VcnfError::Contract("terminal potential only exists for RWPO".into()));
                };
                let z: Vec<O::S> = z.iter().map(|&v| ops.constant(v)).collect();
                let (x, _) = model.forward_with(ops, &z, *horizon)?;
                Ok(potential.eval_with(&x))
            }
        }
    }
}

/// Which part of the loss a term contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Kinetic,
    Penalty,
    Terminal,
}

/// Terms per work unit. Partial sums are formed per chunk and combined in
/// chunk order, so results do not depend on the number of worker threads.
const CHUNK: usize = 32;

struct ChunkResult {
    parts: LossParts,
    grad: Option<Vec<f64>>,
}

fn eval_chunk(
    model: &FlowModel,
    spec: &ProblemSpec,
    steps: FdSteps,
    items: &[(Part, f64, Term<'_>)],
    with_grad: bool,
) -> Result<ChunkResult> {
    let tape = Tape::new();
    let mut grad = with_grad.then(|| vec![0.0; model.params().len()]);
    let mut parts = LossParts::default();
    for &(part, weight, term) in items {
        let value = match grad.as_mut() {
            Some(g) => {
                tape.clear();
                let root = term.eval(&tape, model, spec, steps)?;
                tape.backward(root, weight, model.param_values(), g)?;
                root.value()
            }
            None => term.eval(Plain, model, spec, steps)?,
        };
        if !value.is_finite() {
            return Err(VcnfError::NonFinite { primitive: "loss term" });
        }
        let slot = match part {
            Part::Kinetic => &mut parts.kinetic,
            Part::Penalty => &mut parts.penalty,
            Part::Terminal => &mut parts.terminal,
        };
        *slot += weight * value;
    }
    Ok(ChunkResult { parts, grad })
}

/// Evaluates the training loss of `spec` on `batch`; when `grad` is given the
/// parameter gradient is accumulated into it.
pub fn evaluate_loss(
    model: &FlowModel,
    spec: &ProblemSpec,
    cfg: &TrainConfig,
    batch: &LossBatch,
    grad: Option<&mut GradVector>,
) -> Result<LossParts> {
    if let Some(g) = grad.as_ref() {
        if g.len() != model.params().len() {
            return Err(VcnfError::Contract("gradient buffer does not match the parameter count".into()));
        }
    }
    let steps = FdSteps {
        dt: cfg.dt_frac * spec.horizon(),
        dx: cfg.dx,
    };
    let mut items: Vec<(Part, f64, Term<'_>)> = Vec::new();
    if !batch.latents.is_empty() {
        let n_k = batch.latents.len() / batch.times.len();
        let w = running_scale(spec) / batch.latents.len() as f64;
        for (j, z) in batch.latents.iter().enumerate() {
            items.push((Part::Kinetic, w, Term::Running { z, t: batch.times[j / n_k] }));
        }
    }
    let lambda = cfg.lambda_for(spec);
    if lambda != 0.0 {
        let w = lambda / batch.initial.len().max(1) as f64;
        items.extend(batch.initial.iter().map(|x| (Part::Penalty, w, Term::NegLogDensity { x, t: 0.0 })));
        let w = lambda / batch.target.len().max(1) as f64;
        let t_end = spec.horizon();
        items.extend(batch.target.iter().map(|x| (Part::Penalty, w, Term::NegLogDensity { x, t: t_end })));
    }
    let w = 1.0 / batch.terminal.len().max(1) as f64;
    items.extend(batch.terminal.iter().map(|z| (Part::Terminal, w, Term::Terminal { z })));

    let with_grad = grad.is_some();
    let chunks: Vec<&[(Part, f64, Term<'_>)]> = items.chunks(CHUNK).collect();
    let threads = crate::max_threads().min(chunks.len()).max(1);
    let results: Vec<Result<ChunkResult>> = if threads == 1 {
        chunks.iter().map(|c| eval_chunk(model, spec, steps, c, with_grad)).collect()
    } else {
        let mut slots: Vec<Option<Result<ChunkResult>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let per = chunks.len().div_ceil(threads);
            for (c_group, s_group) in chunks.chunks(per).zip(slots.chunks_mut(per)) {
                scope.spawn(move || {
                    for (c, slot) in c_group.iter().zip(s_group) {
                        *slot = Some(eval_chunk(model, spec, steps, c, with_grad));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
    };

    let mut parts = LossParts::default();
    let mut grad = grad;
    for r in results {
        let r = r?;
        parts.kinetic += r.parts.kinetic;
        parts.penalty += r.parts.penalty;
        parts.terminal += r.parts.terminal;
        if let (Some(g), Some(partial)) = (grad.as_deref_mut(), r.grad) {
            for (a, b) in g.values.iter_mut().zip(partial) {
                *a += b;
            }
        }
    }
    parts.total = parts.kinetic + parts.penalty + parts.terminal;
    Ok(parts)
}

/// OT loss and, optionally, its gradient on a fresh batch.
pub fn ot_loss<R: Rng + ?Sized>(
    model: &FlowModel,
    spec: &ProblemSpec,
    cfg: &TrainConfig,
    rng: &mut R,
    grad: Option<&mut GradVector>,
) -> Result<LossParts> {
    expect_kind(spec, "ot")?;
    evaluate_loss(model, spec, cfg, &LossBatch::draw(spec, cfg, rng), grad)
}

pub fn rwpo_loss<R: Rng + ?Sized>(
    model: &FlowModel,
    spec: &ProblemSpec,
    cfg: &TrainConfig,
    rng: &mut R,
    grad: Option<&mut GradVector>,
) -> Result<LossParts> {
    expect_kind(spec, "rwpo")?;
    evaluate_loss(model, spec, cfg, &LossBatch::draw(spec, cfg, rng), grad)
}

pub fn fp_match_loss<R: Rng + ?Sized>(
    model: &FlowModel,
    spec: &ProblemSpec,
    cfg: &TrainConfig,
    rng: &mut R,
    grad: Option<&mut GradVector>,
) -> Result<LossParts> {
    expect_kind(spec, "fp_match")?;
    evaluate_loss(model, spec, cfg, &LossBatch::draw(spec, cfg, rng), grad)
}

fn expect_kind(spec: &ProblemSpec, kind: &str) -> Result<()> {
    if spec.kind() != kind {
        return Err(VcnfError::Contract(format!("expected a {kind} problem, got {}", spec.kind())));
    }
    Ok(())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_eval: usize,
}

/// Number of stratified time points used by [`objective_eval`].
pub const EVAL_TIMES: usize = 100;

/// Minimum accepted `n_eval` for [`objective_eval`].
pub const MIN_EVAL: usize = 1000;

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Unpenalised objective of the learned flow: the time-integrated running
/// cost (plus `E V(f(z,T))` for RWPO), estimated on `n_eval` samples spread
/// over [`EVAL_TIMES`] stratified times.
pub fn objective_eval<R: Rng + ?Sized>(
    model: &FlowModel,
    spec: &ProblemSpec,
    n_eval: usize,
    rng: &mut R,
) -> Result<ObjectiveEstimate> {
    if n_eval < MIN_EVAL {
        return Err(VcnfError::Config(format!("n_eval must be at least {MIN_EVAL}, got {n_eval}")));
    }
    let horizon = spec.horizon();
    let steps = FdSteps::default_for(horizon);
    let d = spec.dim();
    let scale = running_scale(spec);
    let mut running = Vec::with_capacity(n_eval);
    for i in 0..n_eval {
        let stratum = i % EVAL_TIMES;
        let t = (stratum as f64 + rng.gen::<f64>()) / EVAL_TIMES as f64 * horizon;
        let z = standard_normal(d, rng);
        let value = Term::Running { z: &z, t }.eval(Plain, model, spec, steps)?;
        running.push(scale * value);
    }
    let (mut mean, se_run) = mean_and_se(&running);
    let mut var = se_run * se_run;
    if let ProblemSpec::Rwpo { .. } = spec {
        let mut terminal = Vec::with_capacity(n_eval);
        for _ in 0..n_eval {
            let z = standard_normal(d, rng);
            terminal.push(Term::Terminal { z: &z }.eval(Plain, model, spec, steps)?);
        }
        let (m, se) = mean_and_se(&terminal);
        mean += m;
        var += se * se;
    }
    if !mean.is_finite() {
        return Err(VcnfError::NonFinite { primitive: "objective" });
    }
    Ok(ObjectiveEstimate {
        mean,
        std_err: var.sqrt(),
        n_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{randomize, FlowArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            n_t: 3,
            n_k: 4,
            n_b: 5,
            n_1: 4,
            lambda: Some(2.0),
            ..TrainConfig::default()
        }
    }

    fn random_model(seed: u64) -> FlowModel {
        let mut m = FlowModel::new(FlowArch::new(2), seed).unwrap();
        randomize(&mut m, 0.3, &mut ChaCha8Rng::seed_from_u64(seed));
        m
    }

    fn std2() -> Distribution {
        Distribution::isotropic(vec![0.0, 0.0], 1.0).unwrap()
    }

    #[test]
    fn double_well_values() {
        let v = Potential::DoubleWell { a: 1.0 };
        assert_eq!(v.eval(&[1.0, -1.0]), 0.0);
        assert_eq!(v.eval(&[-1.0, 1.0]), 0.0);
        assert_eq!(v.eval(&[0.0, 0.0]), 1.0);
        assert_eq!(Potential::Quadratic.eval(&[3.0, 4.0]), 12.5);
    }

    #[test]
    fn smiling_drift_at_origin() {
        let b = DriftField::Smiling { delta: 0.3 }.eval(&[0.0, 0.0]);
        assert!((b[0] + 0.6).abs() < 1e-15 && (b[1] + 2.0).abs() < 1e-15);
        assert_eq!(DriftField::Ou { a: 2.0 }.eval(&[1.0, -0.5]), vec![-2.0, 1.0]);
    }

    #[test]
    fn smiling_drift_is_minus_gradient_plus_rotation() {
        // U = (|x|^2 - 4)^2 / 4 + (x2 + 1)^2, checked by central differences
        let u = |x: [f64; 2]| (x[0] * x[0] + x[1] * x[1] - 4.0).powi(2) / 4.0 + (x[1] + 1.0).powi(2);
        let x = [0.7, -1.3];
        let h = 1e-6;
        let gu = [
            (u([x[0] + h, x[1]]) - u([x[0] - h, x[1]])) / (2.0 * h),
            (u([x[0], x[1] + h]) - u([x[0], x[1] - h])) / (2.0 * h),
        ];
        let delta = 0.5;
        let b = DriftField::Smiling { delta }.eval(&x);
        assert!((b[0] - (-gu[0] - delta * gu[1])).abs() < 1e-7);
        assert!((b[1] - (-gu[1] + delta * gu[0])).abs() < 1e-7);
    }

    #[test]
    fn gaussian_log_pdf_and_sampling() {
        let g = Gaussian::from_rows(vec![1.0, -1.0], &[vec![5.0, 1.0], vec![1.0, 0.5]]).unwrap();
        // det = 1.5, inverse = [[0.5, -1], [-1, 5]] / 1.5
        let x = [2.0, 0.0];
        let q = (0.5 * 1.0 - 2.0 * 1.0 * 1.0 + 5.0 * 1.0) / 1.5;
        let expected = -0.5 * q - (2.0 * std::f64::consts::PI).ln() - 0.5 * 1.5f64.ln();
        assert!((g.log_pdf(&x) - expected).abs() < 1e-13);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40000;
        let (mut s01, mut m0) = (0.0, 0.0);
        for _ in 0..n {
            let s = g.sample(&mut rng);
            m0 += s[0];
            s01 += (s[0] - 1.0) * (s[1] + 1.0);
        }
        assert!((m0 / n as f64 - 1.0).abs() < 0.05);
        assert!((s01 / n as f64 - 1.0).abs() < 0.05);
        assert!(Gaussian::from_rows(vec![0.0, 0.0], &[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn mixture_log_pdf_is_log_sum_exp() {
        let m = Distribution::unit_mixture(&[vec![-2.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let g0 = Gaussian::isotropic(vec![-2.0, 0.0], 1.0).unwrap();
        let g1 = Gaussian::isotropic(vec![2.0, 0.0], 1.0).unwrap();
        let x = [0.5, 0.3];
        let expected = (0.5 * g0.log_pdf(&x).exp() + 0.5 * g1.log_pdf(&x).exp()).ln();
        assert!((m.log_pdf(&x) - expected).abs() < 1e-13);
    }

    #[test]
    fn spec_parses_and_rejects_unknown_fields() {
        let text = r#"
            kind = "rwpo"
            beta = 1.0
            horizon = 1.0
            potential = { kind = "quadratic" }
            p0 = { kind = "gaussian", mean = [0.0, 0.0], var = 4.0 }
        "#;
        let spec: ProblemSpec = toml::from_str(text).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.dim(), 2);
        let bad = text.replace("beta = 1.0", "beta = 1.0\nbta = 2.0");
        assert!(toml::from_str::<ProblemSpec>(&bad).is_err());
        let bad_p0 = text.replace("var = 4.0", "var = 4.0, sigma = 1.0");
        assert!(toml::from_str::<ProblemSpec>(&bad_p0).is_err());
    }

    #[test]
    fn identity_flow_ot_penalty_matches_gaussian_entropy() {
        let spec = ProblemSpec::Ot {
            p0: std2(),
            p1: std2(),
            horizon: 1.0,
        };
        let model = FlowModel::new(FlowArch::new(2), 0).unwrap();
        let cfg = TrainConfig {
            n_t: 2,
            n_k: 2,
            n_b: 20000,
            lambda: Some(3.0),
            ..TrainConfig::default()
        };
        let parts = ot_loss(&model, &spec, &cfg, &mut ChaCha8Rng::seed_from_u64(2), None).unwrap();
        let expected = 3.0 * 2.0 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert_eq!(parts.kinetic, 0.0);
        assert!((parts.penalty - expected).abs() < 0.05, "{} vs {expected}", parts.penalty);
    }

    #[test]
    fn fp_without_diffusion_or_drift_is_twice_ot_kinetic() {
        let model = random_model(3);
        let cfg = TrainConfig {
            lambda: Some(0.0),
            ..small_cfg()
        };
        let ot = ProblemSpec::Ot {
            p0: std2(),
            p1: std2(),
            horizon: 1.0,
        };
        let fp = ProblemSpec::FpMatch {
            p0: std2(),
            drift: DriftField::Zero,
            gamma: 0.0,
            horizon: 1.0,
            reference: None,
        };
        let batch = LossBatch::draw(&ot, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let a = evaluate_loss(&model, &ot, &cfg, &batch, None).unwrap();
        let b = evaluate_loss(&model, &fp, &cfg, &batch, None).unwrap();
        assert!(a.kinetic > 0.0);
        assert!((b.kinetic - 2.0 * a.kinetic).abs() < 1e-12 * a.kinetic);
    }

    #[test]
    fn rwpo_running_cost_tends_to_ot_kinetic_for_large_beta() {
        let model = random_model(6);
        let cfg = TrainConfig {
            lambda: Some(0.0),
            ..small_cfg()
        };
        let ot = ProblemSpec::Ot {
            p0: std2(),
            p1: std2(),
            horizon: 1.0,
        };
        let rwpo = ProblemSpec::Rwpo {
            p0: std2(),
            potential: Potential::Quadratic,
            beta: 1e12,
            horizon: 1.0,
        };
        let batch = LossBatch::draw(&ot, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let a = evaluate_loss(&model, &ot, &cfg, &batch, None).unwrap();
        let b = evaluate_loss(&model, &rwpo, &cfg, &batch, None).unwrap();
        assert!((a.kinetic - b.kinetic).abs() < 1e-9 * a.kinetic);
    }

    fn check_gradient(spec: &ProblemSpec, seed: u64) {
        let mut model = random_model(seed);
        let cfg = small_cfg();
        let batch = LossBatch::draw(spec, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let mut g = GradVector::zeros(model.params().len());
        let value = evaluate_loss(&model, spec, &cfg, &batch, Some(&mut g)).unwrap();
        let plain = evaluate_loss(&model, spec, &cfg, &batch, None).unwrap();
        assert!((value.total - plain.total).abs() < 1e-12 * plain.total.abs().max(1.0));
        let n = model.params().len();
        let h = 1e-5;
        for i in (0..n).step_by(97).chain([n - 1, n - 2]) {
            let orig = model.param_values()[i];
            model.param_values_mut()[i] = orig + h;
            let up = evaluate_loss(&model, spec, &cfg, &batch, None).unwrap().total;
            model.param_values_mut()[i] = orig - h;
            let down = evaluate_loss(&model, spec, &cfg, &batch, None).unwrap().total;
            model.param_values_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            // the velocity quotient divides by dt, so rounding in the loss
            // shows up as an absolute error of roughly 1e-16 * |L| / (dt h)
            let tol = 1e-5 * fd.abs().max(g.values[i].abs()) + 1e-6 * plain.total.abs().max(1.0);
            assert!((fd - g.values[i]).abs() <= tol, "{} param {i}: fd {fd} vs {}", spec.kind(), g.values[i]);
        }
    }

    #[test]
    fn ot_gradient_matches_finite_differences() {
        let p1 = Distribution::isotropic(vec![1.0, 1.0], 1.0).unwrap();
        check_gradient(&ProblemSpec::Ot { p0: std2(), p1, horizon: 1.0 }, 10);
    }

    #[test]
    fn rwpo_gradient_matches_finite_differences() {
        let spec = ProblemSpec::Rwpo {
            p0: std2(),
            potential: Potential::DoubleWell { a: 1.0 },
            beta: 2.0,
            horizon: 1.5,
        };
        check_gradient(&spec, 20);
    }

    #[test]
    fn fp_gradient_matches_finite_differences() {
        let spec = ProblemSpec::FpMatch {
            p0: std2(),
            drift: DriftField::Smiling { delta: 0.5 },
            gamma: 0.5,
            horizon: 1.0,
            reference: None,
        };
        check_gradient(&spec, 30);
    }

    #[test]
    fn objective_eval_rejects_small_budgets_and_zero_kinetic_at_identity() {
        let spec = ProblemSpec::Ot {
            p0: std2(),
            p1: std2(),
            horizon: 1.0,
        };
        let model = FlowModel::new(FlowArch::new(2), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(objective_eval(&model, &spec, 999, &mut rng), Err(VcnfError::Config(_))));
        let est = objective_eval(&model, &spec, 1000, &mut rng).unwrap();
        assert_eq!((est.mean, est.std_err), (0.0, 0.0));
    }

    #[test]
    fn loss_is_bit_identical_across_thread_counts() {
        let spec = ProblemSpec::FpMatch {
            p0: std2(),
            drift: DriftField::Ou { a: 1.0 },
            gamma: 0.5,
            horizon: 1.0,
            reference: None,
        };
        let model = random_model(40);
        let cfg = TrainConfig {
            n_t: 4,
            n_k: 20,
            n_b: 50,
            ..TrainConfig::default()
        };
        let batch = LossBatch::draw(&spec, &cfg, &mut ChaCha8Rng::seed_from_u64(41));
        let run = |threads| {
            crate::set_max_threads(threads);
            let mut g = GradVector::zeros(model.params().len());
            let parts = evaluate_loss(&model, &spec, &cfg, &batch, Some(&mut g)).unwrap();
            (parts, g)
        };
        let one = run(1);
        let three = run(3);
        crate::set_max_threads(1);
        assert_eq!(one, three);
    }

    #[test]
    fn wrong_kind_is_a_contract_error() {
        let spec = ProblemSpec::Ot {
            p0: std2(),
            p1: std2(),
            horizon: 1.0,
        };
        let model = FlowModel::new(FlowArch::new(2), 0).unwrap();
        let r = rwpo_loss(&model, &spec, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(0), None);
        assert!(matches!(r, Err(VcnfError::Contract(_))));
    }
}
