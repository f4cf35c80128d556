use crate::error::{CliError, CliResult};
use btn::bounds::NormKind;
use btn::datagen::SceneConfig;
use btn::model::ModelConfig;
use btn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneConfig::default(),
            n_train: 200,
            n_val: 50,
            n_test: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Used by `certify` when `--eps` is absent.
    pub epsilons: Vec<f64>,
    pub norms: Vec<NormKind>,
    /// Split directory read when `--data` has no manifest of its own.
    pub split: String,
    pub attack_samples: usize,
    pub attack_seed: u64,
    pub attack_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epsilons: vec![1.0 / 255.0, 3.0 / 255.0, 5.0 / 255.0],
            norms: vec![NormKind::Linf],
            split: "test".into(),
            attack_samples: 1000,
            attack_seed: 0,
            attack_tolerance: 1e-9,
        }
    }
}

/// Output file names, relative to the command's `--out` directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub epoch_csv: String,
    pub final_checkpoint: String,
    pub best_checkpoint: String,
    pub resolved_config: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            epoch_csv: "epochs.csv".into(),
            final_checkpoint: "final.btnc".into(),
            best_checkpoint: "best.btnc".into(),
            resolved_config: "config.json".into(),
        }
    }
}

fn field(name: &str, reason: &str) -> CliError {
    CliError::Config(format!("invalid configuration field `{name}`: {reason}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(CliError::config)?;
        self.train.validate().map_err(CliError::config)?;
        self.data.scene.validate().map_err(CliError::config)?;
        for (name, n) in [("n_train", self.data.n_train), ("n_val", self.data.n_val), ("n_test", self.data.n_test)] {
            if n == 0 {
                return Err(field(&format!("data.{name}"), "must be positive"));
            }
        }
        if self.eval.epsilons.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(field("eval.epsilons", "must be finite and non-negative"));
        }
        if self.eval.norms.is_empty() {
            return Err(field("eval.norms", "at least one norm required"));
        }
        if self.eval.split.is_empty() {
            return Err(field("eval.split", "must be non-empty"));
        }
        if self.eval.attack_samples == 0 {
            return Err(field("eval.attack_samples", "must be positive"));
        }
        if !self.eval.attack_tolerance.is_finite() || self.eval.attack_tolerance < 0.0 {
            return Err(field("eval.attack_tolerance", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Parses `0.5`, `1/255` and similar.
pub fn parse_epsilon(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?;
            a / b
        }
        None => s.parse().map_err(|_| format!("bad epsilon `{s}`"))?,
    };
    if !v.is_finite() || v < 0.0 {
        return Err(format!("epsilon `{s}` must be finite and non-negative"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_fractions() {
        assert_eq!(parse_epsilon("1/255").unwrap(), 1.0 / 255.0);
        assert_eq!(parse_epsilon(" 0.5").unwrap(), 0.5);
        assert!(parse_epsilon("-1").is_err());
        assert!(parse_epsilon("1/0").is_err());
        assert!(parse_epsilon("x").is_err());
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_bad_fields() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"data": {"scene": {"gt_sigma_px": -1}}}"#).unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("data.scene.gt_sigma_px"), "{msg}");
    }
}
