use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use mllc_core::synth::{HarnessSpec, SynthSpec};
use mllc_core::train::TrainConfig;

use crate::CliError;

/// Problem size for `mllc bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n: usize,
    pub k: usize,
    pub rounds: usize,
    /// Feature width.
    pub dim: usize,
    pub classes: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n: 4096,
            k: 20,
            rounds: 2,
            dim: 32,
            classes: 8,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Random configurations per suite.
    pub configs: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { configs: 50, seed: 0 }
    }
}

/// Everything a command needs, as one JSON document. Refinement and loss
/// settings live under `train.refine` and `train.loss`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub synth: SynthSpec,
    pub harness: HarnessSpec,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs/default"),
            synth: SynthSpec::default(),
            harness: HarnessSpec::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        serde_json::from_value(v).map_err(|e| CliError::Invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_value(v)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `path=value` overrides. Values parse as JSON and fall back to
    /// plain strings, so `train.mode=self_training` works unquoted.
    pub fn with_overrides(&self, sets: &[(String, Value)]) -> Result<Self, CliError> {
        let mut v = self.to_value();
        for (path, val) in sets {
            set_path(&mut v, path, val.clone())?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Writes the resolved config as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    let val = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), val))
}

fn set_path(root: &mut Value, path: &str, val: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Invalid(format!("{path}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            // Unknown leaves are left in place and rejected on deserialization.
            obj.insert(p.to_string(), val);
            return Ok(());
        }
        cur = obj
            .get_mut(*p)
            .ok_or_else(|| CliError::Invalid(format!("{path}: unknown section {p:?}")))?;
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_value(c.to_value()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_value(serde_json::json!({})).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_value(serde_json::json!({"bogus": 1})).is_err());
        assert!(ExperimentConfig::from_value(serde_json::json!({"train": {"refine": {"kk": 3}}})).is_err());
        let c = ExperimentConfig::default();
        assert!(c.with_overrides(&[parse_assignment("train.lr=3").unwrap()]).is_err());
        assert!(c.with_overrides(&[parse_assignment("nope.x=3").unwrap()]).is_err());
    }

    #[test]
    fn overrides_parse_json_or_string() {
        let c = ExperimentConfig::default()
            .with_overrides(&[
                parse_assignment("train.refine.alpha=0.3").unwrap(),
                parse_assignment("train.mode=self_training").unwrap(),
                parse_assignment("train.refine.k=all").unwrap(),
            ])
            .unwrap();
        assert_eq!(c.train.refine.alpha, 0.3);
        assert_eq!(c.train.mode, mllc_core::train::TrainMode::SelfTraining);
        assert_eq!(c.train.refine.k, mllc_core::slg::Neighbors::All);
    }
}
