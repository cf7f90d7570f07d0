//! Experiment configuration: one validated record with per-profile defaults.
//!
//! A config file is TOML. Keys it sets override the defaults of its profile
//! (`toy` unless stated), unknown keys are rejected, and `version` must match.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::ConvArch;
use crate::sac::SacConfig;
use crate::toyenv::{CorpusSpec, EnvKind};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Toy,
    Pendulum,
    Mujoco,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "pendulum" => Ok(Self::Pendulum),
            "mujoco" => Ok(Self::Mujoco),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected toy, pendulum or mujoco)"))),
        }
    }
}

/// `full` trains both feature levels; `sequence-only` drops the frame critic
/// and frame labels (the frame WGAN share is zero and the reward uses the
/// sequence label alone).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    SequenceOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub image_size: usize,
    pub episode_len: usize,
    /// Frames per static corpus.
    pub corpus_capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_recon: f64,
    pub lambda_fcon: f64,
    pub lambda_gp: f64,
    pub alpha: f64,
    pub lambda_disc: f64,
    pub lambda_gen: f64,
    pub lambda_label_seq_source: f64,
    pub lambda_label_seq_target: f64,
    pub lambda_label_frame: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub iterations: usize,
    pub model_steps: usize,
    pub rl_steps: usize,
    pub generator_period: usize,
    pub model_batch: usize,
    pub learner_capacity: usize,
    pub refresh_count: usize,
    /// Random-policy transitions placed in the learner buffer before training.
    pub learner_prefill: usize,
    pub eval_episodes: usize,
    /// Write a checkpoint every this many iterations (the last one is always written).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub feature_dim: usize,
    pub encoder_filters: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub critic_hidden: Vec<usize>,
    pub label_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub profile: Profile,
    pub variant: Variant,
    pub seed: u64,
    /// Learning rate of the encoder, decoders, critics and label networks.
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub losses: LossConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub sac: SacConfig,
}

fn shared_losses(lambda_recon: f64, lambda_disc: f64, lambda_gen: f64) -> LossConfig {
    LossConfig {
        lambda_recon,
        lambda_fcon: 1.0,
        lambda_gp: 10.0,
        alpha: 0.5,
        lambda_disc,
        lambda_gen,
        lambda_label_seq_source: 10.0,
        lambda_label_seq_target: 1e-3,
        lambda_label_frame: 10.0,
    }
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self {
                version: CONFIG_VERSION,
                profile,
                variant: Variant::Full,
                seed: 0,
                lr: 1e-3,
                output_dir: None,
                env: EnvConfig { kind: EnvKind::DotWorld, image_size: 16, episode_len: 50, corpus_capacity: 5000 },
                losses: shared_losses(1.0, 1.0, 0.1),
                schedule: ScheduleConfig {
                    iterations: 50,
                    model_steps: 30,
                    rl_steps: 250,
                    generator_period: 5,
                    model_batch: 32,
                    learner_capacity: 5000,
                    refresh_count: 500,
                    learner_prefill: 1000,
                    eval_episodes: 10,
                    checkpoint_every: 10,
                },
                model: ModelConfig {
                    seq_len: 4,
                    feature_dim: 32,
                    encoder_filters: vec![8, 8, 16, 16],
                    kernel: 3,
                    leaky_slope: 0.2,
                    critic_hidden: vec![64, 64],
                    label_hidden: vec![64, 64],
                },
                sac: SacConfig {
                    gamma: 0.99,
                    tau: 0.005,
                    lr: 1e-3,
                    hidden: vec![64, 64],
                    batch_size: 128,
                    target_entropy: None,
                    initial_entropy_coef: 0.1,
                },
            },
            Profile::Pendulum => Self {
                profile,
                env: EnvConfig { kind: EnvKind::PoleWorld, image_size: 32, episode_len: 100, corpus_capacity: 50_000 },
                losses: shared_losses(0.5, 50.0, 0.5),
                schedule: ScheduleConfig {
                    iterations: 1000,
                    model_steps: 100,
                    rl_steps: 1000,
                    generator_period: 5,
                    model_batch: 128,
                    learner_capacity: 50_000,
                    refresh_count: 1000,
                    learner_prefill: 1000,
                    eval_episodes: 10,
                    checkpoint_every: 50,
                },
                ..Self::large(profile)
            },
            Profile::Mujoco => Self::large(profile),
        }
    }

    fn large(profile: Profile) -> Self {
        Self {
            version: CONFIG_VERSION,
            profile,
            variant: Variant::Full,
            seed: 0,
            lr: 1e-3,
            output_dir: None,
            env: EnvConfig { kind: EnvKind::DotWorld, image_size: 64, episode_len: 50, corpus_capacity: 50_000 },
            losses: shared_losses(1.0, 0.5, 1.0),
            schedule: ScheduleConfig {
                iterations: 1000,
                model_steps: 100,
                rl_steps: 1000,
                generator_period: 5,
                model_batch: 64,
                learner_capacity: 50_000,
                refresh_count: 1000,
                learner_prefill: 1000,
                eval_episodes: 10,
                checkpoint_every: 50,
            },
            model: ModelConfig {
                seq_len: 4,
                feature_dim: 256,
                encoder_filters: vec![16, 16, 32, 32, 64, 64],
                kernel: 3,
                leaky_slope: 0.2,
                critic_hidden: vec![256, 256],
                label_hidden: vec![256, 256],
            },
            sac: SacConfig {
                gamma: 0.99,
                tau: 0.005,
                lr: 1e-3,
                hidden: vec![256, 256],
                batch_size: 256,
                target_entropy: None,
                initial_entropy_coef: 0.1,
            },
        }
    }

    /// Parse a config file's text. `profile_override` replaces the file's
    /// `profile` key when given.
    pub fn from_toml_str(text: &str, profile_override: Option<Profile>) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        if let Some(p) = profile_override {
            user.insert("profile".into(), toml::Value::try_from(p).expect("profile serializes"));
        }
        let profile = match user.get("profile") {
            None => Profile::Toy,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("invalid profile: {e}")))?,
        };
        let mut merged = toml::Value::try_from(Self::profile(profile)).expect("defaults serialize");
        merge(&mut merged, toml::Value::Table(user));
        let cfg: Self = merged.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile_override: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml_str(&text, profile_override).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(Error::io(path))
    }

    /// Share of the frame-level WGAN terms actually used by the variant.
    /// Shape of the offline corpora this config trains on.
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            env: self.env.kind,
            image_size: self.env.image_size,
            episode_len: self.env.episode_len,
            seq_len: self.model.seq_len,
            capacity: self.env.corpus_capacity,
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.variant {
            Variant::Full => self.losses.alpha,
            Variant::SequenceOnly => 0.0,
        }
    }

    pub fn conv_arch(&self) -> ConvArch {
        ConvArch {
            height: self.env.image_size,
            width: self.env.image_size,
            filters: self.model.encoder_filters.clone(),
            kernel: self.model.kernel,
            feature_dim: self.model.feature_dim,
            leaky_slope: self.model.leaky_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed = {} does not fit a TOML integer (max {})", self.seed, i64::MAX));
        }
        let l = &self.losses;
        if !(l.alpha > 0.0 && l.alpha < 1.0) {
            return bad(format!("alpha = {} must lie strictly between 0 and 1", l.alpha));
        }
        for (name, v) in [
            ("lambda_recon", l.lambda_recon),
            ("lambda_fcon", l.lambda_fcon),
            ("lambda_gp", l.lambda_gp),
            ("lambda_disc", l.lambda_disc),
            ("lambda_gen", l.lambda_gen),
            ("lambda_label_seq_source", l.lambda_label_seq_source),
            ("lambda_label_seq_target", l.lambda_label_seq_target),
            ("lambda_label_frame", l.lambda_label_frame),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be a finite non-negative number"));
            }
        }
        for (name, v) in [("lr", self.lr), ("sac.lr", self.sac.lr), ("sac.initial_entropy_coef", self.sac.initial_entropy_coef)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.sac.gamma) {
            return bad(format!("sac.gamma = {} must lie in [0, 1)", self.sac.gamma));
        }
        if !(self.sac.tau > 0.0 && self.sac.tau <= 1.0) {
            return bad(format!("sac.tau = {} must lie in (0, 1]", self.sac.tau));
        }
        let s = &self.schedule;
        for (name, v) in [
            ("schedule.model_steps", s.model_steps),
            ("schedule.rl_steps", s.rl_steps),
            ("schedule.generator_period", s.generator_period),
            ("schedule.model_batch", s.model_batch),
            ("schedule.learner_capacity", s.learner_capacity),
            ("schedule.refresh_count", s.refresh_count),
            ("schedule.checkpoint_every", s.checkpoint_every),
            ("sac.batch_size", self.sac.batch_size),
            ("env.episode_len", self.env.episode_len),
            ("env.corpus_capacity", self.env.corpus_capacity),
            ("model.seq_len", self.model.seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if s.refresh_count > s.learner_capacity || s.learner_prefill > s.learner_capacity {
            return bad("refresh_count and learner_prefill may not exceed learner_capacity".into());
        }
        if s.learner_prefill == 0 {
            return bad("schedule.learner_prefill must be at least 1: the learner buffer starts populated".into());
        }
        self.conv_arch().validate()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
