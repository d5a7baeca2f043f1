//! Time-conditioned autoregressive spline flow `f(z, t)`.
//!
//! The default model stacks two autoregressive layers with coordinate orders
//! `(1..d)` and `(d..1)`. Within a layer the `k`-th transformed coordinate is a
//! spline whose parameters come from a conditioner fed the `k` coordinates
//! already transformed by that layer plus the scaled time `t / T`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioner::{init_params, ConditionerNet, ParamBlock, ParamVector};
use crate::diffkit::{Ops, Plain, Real};
use crate::error::{Result, VcnfError};
use crate::spline::{decode_with, SplineConfig};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

fn default_layers() -> usize {
    2
}

fn default_hidden() -> Vec<usize> {
    vec![16, 16]
}

fn default_horizon() -> f64 {
    1.0
}

/// Architecture of a [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowArch {
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub spline: SplineConfig,
    /// Time horizon `T`; conditioners see `t / T`.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

impl FlowArch {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: default_layers(),
            hidden: default_hidden(),
            spline: SplineConfig::default(),
            horizon: default_horizon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(VcnfError::Config("flow dimension must be positive".into()));
        }
        if self.layers == 0 {
            return Err(VcnfError::Config("flow needs at least one layer".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(VcnfError::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        self.spline.validate()
    }
}

/// One autoregressive layer: a coordinate order and one conditioner per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ArLayer {
    pub order: Vec<usize>,
    pub conditioners: Vec<ConditionerNet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    arch: FlowArch,
    layers: Vec<ArLayer>,
    params: ParamVector,
}

impl FlowModel {
    /// Builds the architecture with freshly initialized parameters.
    pub fn new(arch: FlowArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let d = arch.dim;
        let n_out = arch.spline.n_raw();
        let mut offset = 0;
        let mut layers = Vec::with_capacity(arch.layers);
        let mut index = Vec::new();
        for l in 0..arch.layers {
            let order: Vec<usize> = if l % 2 == 0 { (0..d).collect() } else { (0..d).rev().collect() };
            let mut conditioners = Vec::with_capacity(d);
            for (pos, &coord) in order.iter().enumerate() {
                let net = ConditionerNet::new(offset, pos + 1, &arch.hidden, n_out)?;
                index.push(ParamBlock {
                    layer: l,
                    position: pos,
                    coordinate: coord,
                    offset,
                    len: net.n_params(),
                    sizes: net.sizes().to_vec(),
                });
                offset += net.n_params();
                conditioners.push(net);
            }
            layers.push(ArLayer { order, conditioners });
        }
        let nets: Vec<ConditionerNet> = layers.iter().flat_map(|l| l.conditioners.iter().copied()).collect();
        let values = init_params(&nets, offset, seed);
        Ok(Self {
            arch,
            layers,
            params: ParamVector { values, index },
        })
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn layers(&self) -> &[ArLayer] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn param_values(&self) -> &[f64] {
        &self.params.values
    }

    pub fn param_values_mut(&mut self) -> &mut [f64] {
        &mut self.params.values
    }

    pub fn set_param_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(VcnfError::Contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params.values = values;
        Ok(())
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.arch.dim {
            return Err(VcnfError::Contract(format!(
                "expected a {}-dimensional point, got {}",
                self.arch.dim,
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(VcnfError::Contract("input point is not finite".into()));
        }
        Ok(())
    }

    /// One layer forward: transformed point and summed spline log-derivatives.
    pub fn layer_forward_with<O: Ops>(&self, ops: O, layer: usize, x: &[O::S], t: f64) -> Result<(Vec<O::S>, O::S)> {
        let layer = &self.layers[layer];
        let tau = t / self.arch.horizon;
        let params = &self.params.values;
        let mut y = x.to_vec();
        let mut prefix = Vec::with_capacity(self.arch.dim);
        let mut theta = Vec::with_capacity(self.arch.spline.n_raw());
        let mut logdet: Option<O::S> = None;
        for (pos, &coord) in layer.order.iter().enumerate() {
            prefix.clear();
            prefix.extend(layer.order[..pos].iter().map(|&c| y[c]));
            ops.dense(&layer.conditioners[pos], params, &prefix, tau, &mut theta);
            let spline = decode_with(ops, &theta, &self.arch.spline)?;
            let (v, ld) = spline.forward_with(ops, y[coord]);
            y[coord] = v;
            logdet = Some(match logdet {
                Some(acc) => acc + ld,
                None => ld,
            });
        }
        Ok((y, logdet.unwrap_or_else(|| ops.constant(0.0))))
    }

    /// One layer inverse; conditioning prefixes are read from the layer output.
    pub fn layer_inverse_with<O: Ops>(&self, ops: O, layer: usize, y: &[O::S], t: f64) -> Result<(Vec<O::S>, O::S)> {
        let layer = &self.layers[layer];
        let tau = t / self.arch.horizon;
        let params = &self.params.values;
        let mut x = y.to_vec();
        let mut prefix = Vec::with_capacity(self.arch.dim);
        let mut theta = Vec::with_capacity(self.arch.spline.n_raw());
        let mut logdet: Option<O::S> = None;
        for (pos, &coord) in layer.order.iter().enumerate() {
            prefix.clear();
            prefix.extend(layer.order[..pos].iter().map(|&c| y[c]));
            ops.dense(&layer.conditioners[pos], params, &prefix, tau, &mut theta);
            let spline = decode_with(ops, &theta, &self.arch.spline)?;
            let (v, ld) = spline.inverse_with(ops, y[coord]);
            x[coord] = v;
            logdet = Some(match logdet {
                Some(acc) => acc + ld,
                None => ld,
            });
        }
        Ok((x, logdet.unwrap_or_else(|| ops.constant(0.0))))
    }

    pub fn forward_with<O: Ops>(&self, ops: O, z: &[O::S], t: f64) -> Result<(Vec<O::S>, O::S)> {
        let mut x = z.to_vec();
        let mut logdet: Option<O::S> = None;
        for l in 0..self.layers.len() {
            let (y, ld) = self.layer_forward_with(ops, l, &x, t)?;
            x = y;
            logdet = Some(match logdet {
                Some(acc) => acc + ld,
                None => ld,
            });
        }
        Ok((x, logdet.unwrap_or_else(|| ops.constant(0.0))))
    }

    pub fn inverse_with<O: Ops>(&self, ops: O, x: &[O::S], t: f64) -> Result<(Vec<O::S>, O::S)> {
        let mut z = x.to_vec();
        let mut logdet: Option<O::S> = None;
        for l in (0..self.layers.len()).rev() {
            let (y, ld) = self.layer_inverse_with(ops, l, &z, t)?;
            z = y;
            logdet = Some(match logdet {
                Some(acc) => acc + ld,
                None => ld,
            });
        }
        Ok((z, logdet.unwrap_or_else(|| ops.constant(0.0))))
    }

    /// `log q(f^{-1}(x, t)) + log |det d f^{-1} / dx|` with `q` standard normal.
    pub fn log_density_with<O: Ops>(&self, ops: O, x: &[O::S], t: f64) -> Result<O::S> {
        let (z, logdet) = self.inverse_with(ops, x, t)?;
        let mut sq = z[0].square();
        for &zi in &z[1..] {
            sq = sq + zi.square();
        }
        let d = self.arch.dim as f64;
        Ok(sq * -0.5 + (logdet - 0.5 * d * LOG_2PI))
    }

    pub fn forward(&self, z: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        self.check_input(z)?;
        self.forward_with(Plain, z, t)
    }

    pub fn inverse(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        self.check_input(x)?;
        self.inverse_with(Plain, x, t)
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_input(x)?;
        self.log_density_with(Plain, x, t)
    }

    /// Pushes `n` standard-normal draws through `f(., t)`.
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(VcnfError::Contract("sample count must be positive".into()));
        }
        (0..n)
            .map(|_| {
                let z = standard_normal(self.arch.dim, rng);
                self.forward_with(Plain, &z, t).map(|(x, _)| x)
            })
            .collect()
    }

    /// Writes `<stem>.json` (architecture and index map) and `<stem>.bin`
    /// (little-endian f64 parameters).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (json_path, bin_path) = checkpoint_paths(stem.as_ref());
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            arch: self.arch.clone(),
            n_params: self.params.len(),
            index: self.params.index.clone(),
            params_file: bin_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| VcnfError::Serde(e.to_string()))?;
        fs::write(&json_path, json).map_err(|e| VcnfError::io(&json_path, e))?;
        fs::write(&bin_path, self.params.to_le_bytes()).map_err(|e| VcnfError::io(&bin_path, e))?;
        Ok(())
    }

    /// Loads a checkpoint written by [`FlowModel::save`]; `path` may be the
    /// stem or the `.json` sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (json_path, _) = checkpoint_paths(path.as_ref());
        let text = fs::read_to_string(&json_path).map_err(|e| VcnfError::io(&json_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| VcnfError::Serde(e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(VcnfError::Serde(format!("unknown checkpoint format {}", meta.format)));
        }
        let bin_path = json_path.with_file_name(&meta.params_file);
        let bytes = fs::read(&bin_path).map_err(|e| VcnfError::io(&bin_path, e))?;
        let values = ParamVector::values_from_le_bytes(&bytes)?;
        let mut model = FlowModel::new(meta.arch, 0)?;
        if model.params.index != meta.index || values.len() != meta.n_params {
            return Err(VcnfError::Serde("checkpoint index map does not match its architecture".into()));
        }
        model.set_param_values(values)?;
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "vcnf-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    arch: FlowArch,
    n_params: usize,
    index: Vec<ParamBlock>,
    params_file: String,
}

fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

pub fn standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn flow_forward(model: &FlowModel, z: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
    model.forward(z, t)
}

pub fn flow_inverse(model: &FlowModel, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
    model.inverse(x, t)
}

pub fn log_density(model: &FlowModel, x: &[f64], t: f64) -> Result<f64> {
    model.log_density(x, t)
}

pub fn ar_layer_forward(model: &FlowModel, layer: usize, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
    model.check_input(x)?;
    if layer >= model.layers.len() {
        return Err(VcnfError::Contract(format!("layer {layer} out of range")));
    }
    model.layer_forward_with(Plain, layer, x, t)
}

/// Standard-normal log-density in `d` dimensions.
pub fn log_standard_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LOG_2PI
}

/// Overwrites parameters with small random values; used to build
/// non-trivial frozen models for checks.
pub fn randomize<R: Rng + ?Sized>(model: &mut FlowModel, scale: f64, rng: &mut R) {
    for v in model.param_values_mut() {
        *v = rng.gen_range(-scale..scale);
    }
}
