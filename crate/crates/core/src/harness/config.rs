use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::metrics::Similarity;
use crate::pipeline::Variant;

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "NEURODECODE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    /// Training repeat counts are drawn uniformly from `1..=max_repeats`;
    /// every test image is shown `max_repeats` times and averaged.
    pub max_repeats: u32,
    /// Store each training scene as one repeat-averaged row instead of one
    /// row per trial.
    pub average_train: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 4096,
            test: 256,
            max_repeats: 3,
            average_train: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrainConfig {
    pub seed: u64,
    /// Mean per-voxel noise. `None` calibrates to `target_r2`.
    pub sigma: Option<f64>,
    /// Oracle feature-recovery R² from `calibration_repeats`-averaged trials.
    pub target_r2: f64,
    pub calibration_repeats: usize,
    pub tanh: bool,
}

impl Default for BrainConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            sigma: None,
            target_r2: 0.9,
            calibration_repeats: 3,
            tanh: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgeConfig {
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    /// Skip cross-validation and use this penalty for all four targets.
    pub lambda: Option<f64>,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            grid: crate::ridge::default_grid(),
            folds: 5,
            seed: 3,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSettings {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub strength: f64,
    pub mix_image: f64,
    pub mix_text: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub null_rate: f64,
    pub seed: u64,
    pub sample_seed: u64,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            t: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 50,
            strength: 0.75,
            mix_image: 0.6,
            mix_text: 0.9,
            epochs: 150,
            batch_size: 32,
            lr: 1e-3,
            null_rate: 0.1,
            seed: 5,
            sample_seed: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_way: usize,
    pub trials: usize,
    pub seed: u64,
    pub similarity: Similarity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 2,
            trials: 100,
            seed: 13,
            similarity: Similarity::Pearson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub gains: Vec<f64>,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            gains: vec![1.0, 2.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world_seed: u64,
    pub data: DataConfig,
    pub brain: BrainConfig,
    pub ridge: RidgeConfig,
    pub diffusion: DiffusionSettings,
    pub eval: EvalConfig,
    pub roi: RoiConfig,
    pub variant: Variant,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world_seed: 7,
            data: DataConfig::default(),
            brain: BrainConfig::default(),
            ridge: RidgeConfig::default(),
            diffusion: DiffusionSettings::default(),
            eval: EvalConfig::default(),
            roi: RoiConfig::default(),
            variant: Variant::Full,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn invalid(field: &str, why: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.to_string(),
        message: why.into(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("<file>", format!("{}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| invalid("<file>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| invalid("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `dotted.path=value` overrides; values parse as JSON, falling
    /// back to a plain string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for (path, raw) in overrides {
            let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut slot = &mut value;
            for key in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| invalid(path, "unknown field"))?;
            }
            *slot = parsed;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| {
            let field = overrides.last().map_or("<config>", |(p, _)| p.as_str());
            invalid(field, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let d = &self.diffusion;
        let unit = [
            ("diffusion.strength", d.strength),
            ("diffusion.mix_image", d.mix_image),
            ("diffusion.mix_text", d.mix_text),
            ("diffusion.null_rate", d.null_rate),
            ("brain.target_r2", self.brain.target_r2),
        ];
        for (field, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(field, format!("{v} is outside [0, 1]")));
            }
        }
        if d.t < 2 {
            return Err(invalid("diffusion.T", "needs at least 2 steps"));
        }
        if !(d.beta_start > 0.0 && d.beta_start < d.beta_end && d.beta_end < 1.0) {
            return Err(invalid("diffusion.beta_end", "need 0 < beta_start < beta_end < 1"));
        }
        if d.steps == 0 && d.strength > 0.0 {
            return Err(invalid("diffusion.steps", "must be positive when strength > 0"));
        }
        if d.batch_size == 0 {
            return Err(invalid("diffusion.batch_size", "must be positive"));
        }
        if d.lr.is_nan() || d.lr <= 0.0 {
            return Err(invalid("diffusion.lr", "must be positive"));
        }
        if let Some(s) = self.brain.sigma {
            if s.is_nan() || s < 0.0 {
                return Err(invalid("brain.sigma", format!("{s} is negative")));
            }
        }
        if self.brain.calibration_repeats == 0 {
            return Err(invalid("brain.calibration_repeats", "must be at least 1"));
        }
        if self.data.max_repeats == 0 {
            return Err(invalid("data.max_repeats", "must be at least 1"));
        }
        if self.data.train < 64 {
            return Err(invalid("data.train", "need at least 64 training scenes"));
        }
        if self.data.test < self.eval.n_way {
            return Err(invalid("data.test", "fewer test items than n_way"));
        }
        if self.eval.n_way < 2 {
            return Err(invalid("eval.n_way", "must be at least 2"));
        }
        if self.ridge.lambda.is_none() {
            if self.ridge.folds < 2 {
                return Err(invalid("ridge.folds", "need at least 2 folds"));
            }
            if self.ridge.grid.is_empty() || self.ridge.grid.iter().any(|l| l.is_nan() || *l <= 0.0) {
                return Err(invalid("ridge.grid", "penalties must be positive"));
            }
        } else if let Some(l) = self.ridge.lambda {
            if l.is_nan() || l <= 0.0 {
                return Err(invalid("ridge.lambda", "must be positive"));
            }
        }
        if self.roi.gains.iter().any(|g| g.is_nan() || *g < 0.0) {
            return Err(invalid("roi.gains", "gains must be non-negative"));
        }
        Ok(())
    }

    /// Output directory after the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so the hash
    /// does not depend on field order in the source file. The output
    /// location is not part of the experiment and is left out.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut value {
            m.remove("output_dir");
        }
        hex::encode(Sha256::digest(canonical(&value).as_bytes()))
    }
}

fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical(&m[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
