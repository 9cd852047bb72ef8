//! `run.json`: paths, per-stage settings, global seed and server address.
//! Every section is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rlhaif_core::policy::{TransformerConfig, Vocab};
use rlhaif_core::reward::RmTrainConfig;
use rlhaif_core::trainers::{DpoConfig, PpoConfig, RemaxConfig, SftConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), report_dir: "reports".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGenSettings {
    /// Base problems per topic; each adds two variants.
    pub n_base: usize,
    pub train_fraction: f64,
}

impl Default for TaskGenSettings {
    fn default() -> Self {
        TaskGenSettings { n_base: 12, train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerSettings {
    /// External ranker URL; `rank --rater ai` needs it.
    pub endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub rater_id: String,
}

impl Default for RankerSettings {
    fn default() -> Self {
        RankerSettings {
            endpoint: None,
            token_env: "RANKER_API_TOKEN".into(),
            timeout_secs: 60,
            retries: 2,
            rater_id: "ai".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmSettings {
    /// Reward backbone; defaults to the policy shape at twice the width.
    pub model: Option<TransformerConfig>,
    pub train: RmTrainConfig,
}

impl Default for RmSettings {
    fn default() -> Self {
        RmSettings { model: None, train: RmTrainConfig { lr: 1e-3, ..RmTrainConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSettings {
    pub iterations: usize,
    pub config: PpoConfig,
}

impl Default for PpoSettings {
    /// Monte-Carlo returns: the value head starts at zero and the reward only
    /// arrives on the last token.
    fn default() -> Self {
        PpoSettings { iterations: 20, config: PpoConfig { max_tokens: 128, lr: 1e-5, gae_lambda: 1.0, ..PpoConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemaxSettings {
    pub iterations: usize,
    pub prompts_per_iter: usize,
    pub config: RemaxConfig,
}

impl Default for RemaxSettings {
    fn default() -> Self {
        RemaxSettings {
            iterations: 20,
            prompts_per_iter: 8,
            config: RemaxConfig { max_tokens: 128, lr: 1e-5, ..RemaxConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub max_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { max_tokens: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSettings {
    pub bind: String,
    pub port: u16,
    /// Built annotation UI; a placeholder page is served when absent.
    pub static_dir: PathBuf,
}

impl Default for ServerSettings {
    fn default() -> Self {
        ServerSettings { bind: "127.0.0.1".into(), port: 8080, static_dir: "ui".into() }
    }
}

/// Seeds inside stage sections are salts: each stage runs with
/// `mix(mix(seed, stage), section seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub task_gen: TaskGenSettings,
    pub model: TransformerConfig,
    pub sft: SftConfig,
    pub rm: RmSettings,
    pub ppo: PpoSettings,
    pub dpo: DpoConfig,
    pub remax: RemaxSettings,
    pub ranker: RankerSettings,
    pub eval: EvalSettings,
    pub server: ServerSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            task_gen: TaskGenSettings::default(),
            model: TransformerConfig { d_model: 32, ..TransformerConfig::desk(Vocab::new().size()) },
            sft: SftConfig { epochs: 8, lr: 3e-3, ..SftConfig::default() },
            rm: RmSettings::default(),
            ppo: PpoSettings::default(),
            dpo: DpoConfig { lr: 1e-5, ..DpoConfig::default() },
            remax: RemaxSettings::default(),
            ranker: RankerSettings::default(),
            eval: EvalSettings::default(),
            server: ServerSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        self.model.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
        if self.model.vocab_size != Vocab::new().size() {
            return bad(format!("model.vocab_size must be {}", Vocab::new().size()));
        }
        if self.task_gen.n_base == 0 {
            return bad("task_gen.n_base must be >= 1".into());
        }
        if !(self.task_gen.train_fraction > 0.0 && self.task_gen.train_fraction < 1.0) {
            return bad("task_gen.train_fraction must lie in (0, 1)".into());
        }
        self.ppo.config.validate().map_err(|e| CliError::Usage(format!("ppo: {e}")))?;
        if self.remax.prompts_per_iter == 0 {
            return bad("remax.prompts_per_iter must be >= 1".into());
        }
        Ok(())
    }

    pub fn reward_model_config(&self) -> TransformerConfig {
        self.rm.model.clone().unwrap_or_else(|| rlhaif_core::reward::RewardModel::config_for_policy(&self.model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(serde_json::from_str::<RunConfig>("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seeed": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"paths": {"data": "x"}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"ppo": {"config": {"betta": 0.1}}}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"ppo": {"config": {"beta": 0.5}}}"#).unwrap();
        assert_eq!(cfg.ppo.config.clip, PpoConfig::default().clip);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "task_gen": {"n_base": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.task_gen.n_base, 3);
        assert_eq!(cfg.task_gen.train_fraction, TaskGenSettings::default().train_fraction);
    }
}
