//! Run configuration, read from a TOML document whose keys mirror
//! [`RunConfig`]. Missing keys take the defaults of the selected environment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EnvKind, KeyDoorConfig, PointGatherConfig};
use crate::error::{Error, Result};
use crate::nn::RmsPropConfig;
use crate::policies::{EncoderMode, DEFAULT_HIDDEN};
use crate::selfplay::SelfPlayConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Train,
}

/// Target-task learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Charlie issues goals to Bob; both trained on the task reward.
    Hsp,
    /// Flat policy over primitive actions.
    Reinforce,
    /// Pre-trained Bob with a fixed zero goal, fine-tuned directly.
    Selfplay,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hsp => "hsp",
            Method::Reinforce => "reinforce",
            Method::Selfplay => "selfplay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub phase: Phase,
    pub env: EnvKind,
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Goal embedding dimension.
    pub k: usize,
    /// Imitation weight in Bob's loss.
    pub alpha: f64,
    /// Entropy weight in Alice's loss.
    pub beta: f64,
    /// Episodes per update.
    pub batch_size: usize,
    pub epochs: usize,
    pub updates_per_epoch: usize,
    /// Primitive steps per Charlie goal.
    pub t_c: usize,
    /// Charlie goals per episode.
    pub charlie_budget: usize,
    pub baseline_weight: f64,
    pub grad_clip: f64,
    pub hidden: usize,
    pub encoder: EncoderMode,
    /// Target-task environment-step budget; training stops after the first
    /// update that reaches it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_env_steps: Option<u64>,
    /// Episodes of the final evaluation of a train run.
    pub eval_episodes: usize,
    /// Epochs between checkpoints (0: only at the end).
    pub checkpoint_every: usize,
    pub selfplay: SelfPlayConfig,
    pub optimizer: RmsPropConfig,
    pub keydoor: KeyDoorConfig,
    pub pointgather: PointGatherConfig,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

impl RunConfig {
    pub fn defaults_for(env: EnvKind) -> Self {
        let (k, encoder, selfplay, charlie_budget) = match env {
            EnvKind::KeyDoor => (3, EncoderMode::Absolute, SelfPlayConfig::keydoor(), 8),
            EnvKind::PointGather => (2, EncoderMode::Difference, SelfPlayConfig::pointgather(), 20),
        };
        Self {
            phase: Phase::Pretrain,
            env,
            method: Method::Hsp,
            seeds: vec![1],
            k,
            alpha: 0.03,
            beta: 0.01,
            batch_size: 64,
            epochs: 100,
            updates_per_epoch: 10,
            t_c: selfplay.t_a,
            charlie_budget,
            baseline_weight: 0.5,
            grad_clip: 5.0,
            hidden: DEFAULT_HIDDEN,
            encoder,
            max_env_steps: None,
            eval_episodes: 200,
            checkpoint_every: 0,
            selfplay,
            optimizer: RmsPropConfig::default(),
            keydoor: KeyDoorConfig::default(),
            pointgather: PointGatherConfig::default(),
            out_dir: PathBuf::from("runs"),
            pretrained: None,
        }
    }

    /// Parses a TOML document, filling unspecified keys from the defaults of
    /// its `env` (KeyDoor when absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {e}")))?;
        let env = match user.get("env") {
            Some(toml::Value::String(s)) => s.parse::<EnvKind>()?,
            Some(other) => {
                return Err(Error::Config(format!("field `env` must be a string, got {other}")))
            }
            None => EnvKind::KeyDoor,
        };
        let mut merged = toml::Table::try_from(Self::defaults_for(env))
            .map_err(|e| Error::Config(format!("cannot encode defaults: {e}")))?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.selfplay.validate()?;
        let positive = [
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("updates_per_epoch", self.updates_per_epoch),
            ("t_c", self.t_c),
            ("charlie_budget", self.charlie_budget),
            ("hidden", self.hidden),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("field `{name}` must be positive")));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("field `alpha` must be non-negative".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("field `beta` must be non-negative".into()));
        }
        if !(self.baseline_weight >= 0.0) {
            return Err(Error::Config("field `baseline_weight` must be non-negative".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("field `grad_clip` must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("field `seeds` must list at least one seed".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.decay) && o.eps > 0.0) {
            return Err(Error::Config("field `optimizer` has out-of-range values".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_keydoor_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::defaults_for(EnvKind::KeyDoor));
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.alpha, 0.03);
        assert_eq!(cfg.beta, 0.01);
        assert_eq!(cfg.t_c, 5);
        assert_eq!(cfg.selfplay, SelfPlayConfig::keydoor());
    }

    #[test]
    fn pointgather_defaults_follow_env() {
        let cfg = RunConfig::from_toml_str("env = \"pointgather\"\n[selfplay]\nlambda = 0.5\n").unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.t_c, 50);
        assert_eq!(cfg.charlie_budget, 20);
        assert_eq!(cfg.encoder, EncoderMode::Difference);
        assert_eq!(cfg.selfplay.t_b, 70);
        assert_eq!(cfg.selfplay.lambda, 0.5);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::defaults_for(EnvKind::PointGather);
        cfg.max_env_steps = Some(1000);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_toml_str("bogus_field = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_field"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let err = RunConfig::from_toml_str("[selfplay]\nt_b = 3\n").unwrap_err();
        assert!(err.to_string().contains("t_b"));
        assert!(RunConfig::from_toml_str("alpha = -1.0").is_err());
        assert!(RunConfig::from_toml_str("env = \"ant\"").is_err());
        assert!(RunConfig::from_toml_str("seeds = []").is_err());
    }
}
