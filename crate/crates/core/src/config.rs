//! Experiment files: a TOML document with `problem`, `model`, `train` and
//! `output` entries, plus `dotted.key=value` overrides applied before
//! deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VcnfError};
use crate::flow::FlowArch;
use crate::problems::ProblemSpec;
use crate::spline::SplineConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub bins: usize,
    pub bound: f64,
    /// Initialization seed; the training seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = FlowArch::new(1);
        Self {
            layers: arch.layers,
            hidden: arch.hidden,
            bins: arch.spline.bins,
            bound: arch.spline.bound,
            init_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/out")
}

impl ExperimentConfig {
    /// Reads `path`, applies `overrides` (`a.b.c=value`, value parsed as a
    /// TOML literal and falling back to a bare string) and validates.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VcnfError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
            .map_err(|e| VcnfError::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Value = toml::from_str(text).map_err(|e| VcnfError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| VcnfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.train.validate()?;
        if self.train.steps == 0 {
            return Err(VcnfError::Config("steps must be at least 1".into()));
        }
        self.arch().validate()
    }

    pub fn arch(&self) -> FlowArch {
        FlowArch {
            dim: self.problem.dim(),
            layers: self.model.layers,
            hidden: self.model.hidden.clone(),
            spline: SplineConfig {
                bins: self.model.bins,
                bound: self.model.bound,
                ..SplineConfig::default()
            },
            horizon: self.problem.horizon(),
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.model.init_seed.unwrap_or(self.train.seed)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}

fn strip_prefix(e: &VcnfError) -> String {
    match e {
        VcnfError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Applies one `dotted.key=value` override to a TOML document.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| VcnfError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(VcnfError::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| VcnfError::Config(format!("override `{key}` descends into a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| VcnfError::Config(format!("override `{key}` descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        output = "runs/test"

        [problem]
        kind = "ot"
        p0 = { kind = "gaussian", mean = [-3.0, -3.0] }
        p1 = { kind = "gaussian", mean = [3.0, 3.0] }

        [train]
        steps = 100
        lambda = 500.0
    "#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(cfg.train.steps, 100);
        assert_eq!(cfg.train.n_k, 64);
        assert_eq!(cfg.arch().dim, 2);
        assert_eq!(cfg.model.hidden, vec![16, 16]);
    }

    #[test]
    fn overrides_replace_and_insert() {
        let cfg = ExperimentConfig::from_toml_str(
            BASE,
            &["train.steps=10".into(), "model.bins = 7".into(), "output=elsewhere".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.model.bins, 7);
        assert_eq!(cfg.output, PathBuf::from("elsewhere"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_overrides() {
        assert!(ExperimentConfig::from_toml_str(BASE, &["train.stepz=3".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(BASE, &["nonsense".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(BASE, &["train.steps=0".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(&BASE.replace("[train]", "[trian]"), &[]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(BASE, &["train.seed=9".into()]).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = ExperimentConfig::load("/nonexistent/cfg.toml", &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }
}
