//! Stochastic training loop: fresh Monte Carlo batch per step, Adam update,
//! optional gradient-norm clipping, and a non-finite guard that aborts the run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::GradVector;
use crate::error::{Result, VcnfError};
use crate::flow::FlowModel;
use crate::problems::{evaluate_loss, objective_eval, LossBatch, LossParts, ObjectiveEstimate, ProblemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Boundary penalty weight; the problem's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Time samples per step.
    pub n_t: usize,
    /// Latent samples per time.
    pub n_k: usize,
    /// Samples per boundary density.
    pub n_b: usize,
    /// Latent samples for the terminal potential.
    pub n_1: usize,
    /// Time step of the velocity difference, as a fraction of the horizon.
    pub dt_frac: f64,
    /// Space step of the score difference.
    pub dx: f64,
    pub seed: u64,
    /// Gradient-norm clipping threshold; `0` disables clipping.
    pub clip_norm: f64,
    /// Samples for the final objective estimate; `0` skips it.
    pub n_eval: usize,
    /// Objective estimate every this many steps; `0` disables.
    pub eval_every: usize,
    /// Checkpoint every this many steps; `0` disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: None,
            n_t: 20,
            n_k: 64,
            n_b: 2048,
            n_1: 64,
            dt_frac: 1e-3,
            dx: 1e-3,
            seed: 0,
            clip_norm: 100.0,
            n_eval: 100_000,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VcnfError::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam moments must lie in [0, 1) and eps must be positive");
        }
        if self.lambda.is_some_and(|l| !(l >= 0.0)) {
            return bad("penalty weight must be non-negative");
        }
        if self.n_t == 0 || self.n_k == 0 || self.n_b == 0 || self.n_1 == 0 {
            return bad("sample counts must be positive");
        }
        if !(self.dt_frac > 0.0) || !(self.dx > 0.0) {
            return bad("finite-difference steps must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip norm must be non-negative");
        }
        if self.n_eval != 0 && self.n_eval < crate::problems::MIN_EVAL {
            return bad("n_eval must be 0 or at least 1000");
        }
        Ok(())
    }

    pub fn lambda_for(&self, spec: &ProblemSpec) -> f64 {
        self.lambda.unwrap_or_else(|| spec.default_lambda())
    }

    /// Hex SHA-256 of the canonical JSON form, for run summaries.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let k = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(k);
    let c2 = 1.0 - cfg.beta2.powi(k);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub kinetic: f64,
    pub penalty: f64,
    pub terminal: f64,
    pub grad_norm: f64,
    /// Objective estimate when one was taken at this step.
    pub objective: Option<f64>,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,loss,kinetic,penalty,terminal,grad_norm,objective";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.kinetic,
            self.penalty,
            self.terminal,
            self.grad_norm,
            self.objective.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub history: Vec<StepRecord>,
    pub final_objective: Option<ObjectiveEstimate>,
    pub seed: u64,
    pub config_hash: String,
}

impl RunMetrics {
    pub fn last_loss(&self) -> Option<LossParts> {
        self.history.last().map(|r| LossParts {
            total: r.loss,
            kinetic: r.kinetic,
            penalty: r.penalty,
            terminal: r.terminal,
        })
    }
}

/// Evaluation stream: same seed as training, separate ChaCha stream.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Trains without observing intermediate steps.
pub fn train(model: &mut FlowModel, spec: &ProblemSpec, cfg: &TrainConfig) -> Result<RunMetrics> {
    train_with(model, spec, cfg, |_, _| Ok(()))
}

/// Trains `model` in place. `observe` sees every step record together with
/// the updated model (used for logging and checkpoints).
pub fn train_with<F>(model: &mut FlowModel, spec: &ProblemSpec, cfg: &TrainConfig, mut observe: F) -> Result<RunMetrics>
where
    F: FnMut(&StepRecord, &FlowModel) -> Result<()>,
{
    cfg.validate()?;
    spec.validate()?;
    if spec.dim() != model.dim() {
        return Err(VcnfError::Config(format!(
            "problem dimension {} does not match flow dimension {}",
            spec.dim(),
            model.dim()
        )));
    }
    if (spec.horizon() - model.arch().horizon).abs() > 1e-12 {
        return Err(VcnfError::Config("flow horizon differs from the problem horizon".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut erng = eval_rng(cfg.seed);
    let n = model.params().len();
    let mut adam = AdamState::new(n);
    let mut grad = GradVector::zeros(n);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = LossBatch::draw(spec, cfg, &mut rng);
        grad.values.iter_mut().for_each(|g| *g = 0.0);
        let parts = evaluate_loss(model, spec, cfg, &batch, Some(&mut grad)).map_err(|e| match e {
            VcnfError::NonFinite { primitive } => VcnfError::NumericalAbort {
                step,
                reason: format!("non-finite value in {primitive}"),
            },
            VcnfError::Decode(msg) => VcnfError::NumericalAbort { step, reason: msg },
            other => other,
        })?;
        let grad_norm = grad.norm();
        if !parts.total.is_finite() || !grad_norm.is_finite() {
            return Err(VcnfError::NumericalAbort {
                step,
                reason: format!("loss {} gradient norm {grad_norm}", parts.total),
            });
        }
        if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            grad.scale(cfg.clip_norm / grad_norm);
        }
        adam_step(model.param_values_mut(), &grad.values, &mut adam, cfg);

        let objective = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && cfg.n_eval > 0 {
            Some(objective_eval(model, spec, cfg.n_eval, &mut erng)?.mean)
        } else {
            None
        };
        let record = StepRecord {
            step,
            loss: parts.total,
            kinetic: parts.kinetic,
            penalty: parts.penalty,
            terminal: parts.terminal,
            grad_norm,
            objective,
        };
        observe(&record, model)?;
        history.push(record);
    }

    let final_objective = if cfg.n_eval > 0 {
        Some(objective_eval(model, spec, cfg.n_eval, &mut erng)?)
    } else {
        None
    };
    Ok(RunMetrics {
        history,
        final_objective,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}
