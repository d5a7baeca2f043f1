//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! Raw conditioner outputs `[theta_w (K), theta_h (K), theta_d (K-1)]` decode
//! to bin widths and heights (softmax scaled to `2B`, floored at a minimum bin
//! size) and to interior knot derivatives (softplus with an identity offset).
//! Boundary derivatives are pinned to 1 so the spline joins the linear tails
//! with a continuous first derivative.

use serde::{Deserialize, Serialize};

use crate::diffkit::{Ops, Plain, Real};
use crate::error::{Result, VcnfError};

/// `log(e - 1)`: softplus of this offset is exactly 1, so zero raw parameters
/// decode to unit derivatives.
pub fn identity_offset() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineConfig {
    /// Number of bins `K`.
    pub bins: usize,
    /// Tail bound `B`.
    pub bound: f64,
    /// Minimum bin width and height as a fraction of `2B`.
    #[serde(default = "default_min_bin_frac")]
    pub min_bin_frac: f64,
    #[serde(default = "default_min_deriv")]
    pub min_deriv: f64,
}

fn default_min_bin_frac() -> f64 {
    1e-3
}

fn default_min_deriv() -> f64 {
    1e-4
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            bins: 5,
            bound: 8.0,
            min_bin_frac: default_min_bin_frac(),
            min_deriv: default_min_deriv(),
        }
    }
}

impl SplineConfig {
    pub fn new(bins: usize, bound: f64) -> Result<Self> {
        let cfg = Self {
            bins,
            bound,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 1 {
            return Err(VcnfError::Config("spline needs at least one bin".into()));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(VcnfError::Config(format!("tail bound must be positive, got {}", self.bound)));
        }
        if !(self.min_bin_frac >= 0.0 && self.min_bin_frac * (self.bins as f64) < 1.0) {
            return Err(VcnfError::Config("minimum bin fraction too large for bin count".into()));
        }
        if !(self.min_deriv > 0.0) {
            return Err(VcnfError::Config("minimum derivative must be positive".into()));
        }
        Ok(())
    }

    /// Length of the raw parameter vector, `3K - 1`.
    pub fn n_raw(&self) -> usize {
        3 * self.bins - 1
    }

    pub fn min_bin(&self) -> f64 {
        self.min_bin_frac * 2.0 * self.bound
    }
}

/// Raw conditioner output for one spline.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTheta {
    pub values: Vec<f64>,
}

impl RawTheta {
    pub fn new(values: Vec<f64>, bins: usize) -> Result<Self> {
        if bins < 1 || values.len() != 3 * bins - 1 {
            return Err(VcnfError::Config(format!(
                "raw spline parameters must have length 3K-1 = {}, got {}",
                (3 * bins).saturating_sub(1),
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(bins: usize) -> Self {
        Self {
            values: vec![0.0; 3 * bins - 1],
        }
    }
}

/// Decoded knots and knot derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct RQSpline<S> {
    pub knot_x: Vec<S>,
    pub knot_y: Vec<S>,
    pub deriv: Vec<S>,
    pub bound: f64,
}

pub type RQSplineParams = RQSpline<f64>;

impl<S: Real> RQSpline<S> {
    pub fn bins(&self) -> usize {
        self.knot_x.len() - 1
    }

    pub fn to_plain(&self) -> RQSplineParams {
        RQSpline {
            knot_x: self.knot_x.iter().map(|v| v.value()).collect(),
            knot_y: self.knot_y.iter().map(|v| v.value()).collect(),
            deriv: self.deriv.iter().map(|v| v.value()).collect(),
            bound: self.bound,
        }
    }

    /// Spline value and `log dy/dx` at `x`.
    pub fn forward_with<O: Ops<S = S>>(&self, ops: O, x: S) -> (S, S) {
        let xv = x.value();
        if xv < -self.bound || xv > self.bound {
            return (x, ops.constant(0.0));
        }
        let k = locate(&self.knot_x, xv);
        let (x0, x1) = (self.knot_x[k], self.knot_x[k + 1]);
        let (y0, y1) = (self.knot_y[k], self.knot_y[k + 1]);
        let (d0, d1) = (self.deriv[k], self.deriv[k + 1]);
        let w = x1 - x0;
        let h = y1 - y0;
        let s = h / w;
        let xi = (x - x0) / w;
        let om = -xi + 1.0;
        let xiom = xi * om;
        let num = h * (s * xi.square() + d0 * xiom);
        let den = s + (d1 + d0 - s * 2.0) * xiom;
        let y = y0 + num / den;
        let dnum = s.square() * (d1 * xi.square() + s * xiom * 2.0 + d0 * om.square());
        let logdet = dnum.ln() - den.ln() * 2.0;
        (y, logdet)
    }

    /// Inverse value and `log dx/dy` at `y`, via the stable quadratic root.
    pub fn inverse_with<O: Ops<S = S>>(&self, ops: O, y: S) -> (S, S) {
        let yv = y.value();
        if yv < -self.bound || yv > self.bound {
            return (y, ops.constant(0.0));
        }
        let k = locate(&self.knot_y, yv);
        let (x0, x1) = (self.knot_x[k], self.knot_x[k + 1]);
        let (y0, y1) = (self.knot_y[k], self.knot_y[k + 1]);
        let (d0, d1) = (self.deriv[k], self.deriv[k + 1]);
        let w = x1 - x0;
        let h = y1 - y0;
        let s = h / w;
        let dy = y - y0;
        let c2 = d1 + d0 - s * 2.0;
        let a = h * (s - d0) + dy * c2;
        let b = h * d0 - dy * c2;
        let c = -(s * dy);
        let disc = b.square() - a * c * 4.0;
        let root = if disc.value() > 0.0 { disc.sqrt() } else { ops.constant(0.0) };
        let xi = (c * 2.0) / (-b - root);
        let x = x0 + xi * w;
        let om = -xi + 1.0;
        let xiom = xi * om;
        let den = s + c2 * xiom;
        let dnum = s.square() * (d1 * xi.square() + s * xiom * 2.0 + d0 * om.square());
        let logdet = den.ln() * 2.0 - dnum.ln();
        (x, logdet)
    }
}

impl RQSplineParams {
    /// Checks the knot and derivative invariants for `cfg`.
    pub fn check_invariants(&self, cfg: &SplineConfig) -> Result<()> {
        let k = self.bins();
        let b = self.bound;
        let fail = |msg: String| Err(VcnfError::Decode(msg));
        if self.knot_x[0] != -b || self.knot_y[0] != -b || self.knot_x[k] != b || self.knot_y[k] != b {
            return fail("end knots must sit at -B and B".into());
        }
        let min = cfg.min_bin() * (1.0 - 1e-12);
        for i in 0..k {
            if !(self.knot_x[i + 1] - self.knot_x[i] >= min) || !(self.knot_y[i + 1] - self.knot_y[i] >= min) {
                return fail(format!("bin {i} below the minimum size"));
            }
        }
        if self.deriv[0] != 1.0 || self.deriv[k] != 1.0 {
            return fail("boundary derivatives must equal 1".into());
        }
        if self.deriv.iter().any(|d| !(*d > 0.0)) {
            return fail("knot derivatives must be positive".into());
        }
        Ok(())
    }
}

/// Bin index `k` with `knots[k] <= v < knots[k+1]`, clamped to the last bin.
fn locate<S: Real>(knots: &[S], v: f64) -> usize {
    let k = knots.len() - 1;
    let interior = &knots[1..k];
    interior.partition_point(|kn| kn.value() <= v).min(k - 1)
}

fn bin_sizes<O: Ops>(ops: O, raw: &[O::S], cfg: &SplineConfig) -> Vec<O::S> {
    let span = 2.0 * cfg.bound;
    let max = raw.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<O::S> = raw.iter().map(|&v| (v - max).exp()).collect();
    let mut total = exps[0];
    for &e in &exps[1..] {
        total = total + e;
    }
    let sizes: Vec<O::S> = exps.iter().map(|&e| e / total * span).collect();
    let min = cfg.min_bin();
    if sizes.iter().all(|s| s.value() >= min) {
        return sizes;
    }
    // floor at `min`, then spread the remaining span over the unfloored bins
    let excess: Vec<O::S> = sizes
        .iter()
        .map(|&s| if s.value() > min { s - min } else { ops.constant(0.0) })
        .collect();
    let mut excess_total = excess[0];
    for &e in &excess[1..] {
        excess_total = excess_total + e;
    }
    let free = span - min * raw.len() as f64;
    excess.iter().map(|&e| e / excess_total * free + min).collect()
}

/// Decodes raw parameters, generic over the evaluation mode.
pub fn decode_with<O: Ops>(ops: O, raw: &[O::S], cfg: &SplineConfig) -> Result<RQSpline<O::S>> {
    cfg.validate()?;
    let k = cfg.bins;
    if raw.len() != cfg.n_raw() {
        return Err(VcnfError::Config(format!(
            "raw spline parameters must have length {}, got {}",
            cfg.n_raw(),
            raw.len()
        )));
    }
    if let Some(bad) = raw.iter().position(|v| !v.value().is_finite()) {
        return Err(VcnfError::Decode(format!("raw parameter {bad} is not finite")));
    }
    let b = cfg.bound;
    let widths = bin_sizes(ops, &raw[..k], cfg);
    let heights = bin_sizes(ops, &raw[k..2 * k], cfg);
    let mut knot_x = Vec::with_capacity(k + 1);
    let mut knot_y = Vec::with_capacity(k + 1);
    knot_x.push(ops.constant(-b));
    knot_y.push(ops.constant(-b));
    for i in 1..k {
        knot_x.push(knot_x[i - 1] + widths[i - 1]);
        knot_y.push(knot_y[i - 1] + heights[i - 1]);
    }
    knot_x.push(ops.constant(b));
    knot_y.push(ops.constant(b));
    let c_id = identity_offset();
    let mut deriv = Vec::with_capacity(k + 1);
    deriv.push(ops.constant(1.0));
    for &d in &raw[2 * k..] {
        let sp = (d + c_id).softplus();
        deriv.push(if sp.value() >= cfg.min_deriv {
            sp
        } else {
            ops.constant(cfg.min_deriv)
        });
    }
    deriv.push(ops.constant(1.0));
    Ok(RQSpline {
        knot_x,
        knot_y,
        deriv,
        bound: b,
    })
}

/// Decodes with the default minimum bin size and derivative floor.
pub fn decode_theta(raw: &RawTheta, bound: f64, bins: usize) -> Result<RQSplineParams> {
    let cfg = SplineConfig::new(bins, bound)?;
    decode_with(Plain, &raw.values, &cfg)
}

pub fn spline_forward(p: &RQSplineParams, x: f64) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(VcnfError::Contract(format!("spline input {x} is not finite")));
    }
    Ok(p.forward_with(Plain, x))
}

pub fn spline_inverse(p: &RQSplineParams, y: f64) -> Result<(f64, f64)> {
    if !y.is_finite() {
        return Err(VcnfError::Contract(format!("spline input {y} is not finite")));
    }
    Ok(p.inverse_with(Plain, y))
}
