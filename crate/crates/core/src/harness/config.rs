use std::fmt::Write as _;
use std::str::FromStr;

use crate::agent::AgentConfig;
use crate::env::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StepDims};
use crate::nn::Compression;

/// Network size preset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scale {
    /// Reduced widths for CPU runs.
    #[default]
    Desk,
    /// Published network sizes.
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Update schedule of the training loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    /// Random-action steps before any update.
    pub i_pre: u64,
    /// Model updates run once at step `i_pre + 1`.
    pub s_pre: u64,
    pub i_rl: u64,
    pub i_model: u64,
    pub max_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { i_pre: 1000, s_pre: 500, i_rl: 1, i_model: 5, max_steps: 30_000 }
    }
}

impl Schedule {
    /// Model updates performed by the end of training.
    pub fn expected_model_updates(&self) -> u64 {
        if self.max_steps <= self.i_pre {
            return 0;
        }
        self.s_pre + multiples_in(self.i_pre, self.max_steps, self.i_model)
    }

    /// Agent updates performed by the end of training.
    pub fn expected_rl_updates(&self) -> u64 {
        multiples_in(self.i_pre, self.max_steps, self.i_rl)
    }
}

/// Count of multiples of `m` in `(lo, hi]`.
fn multiples_in(lo: u64, hi: u64, m: u64) -> u64 {
    if hi <= lo {
        0
    } else {
        hi / m - lo / m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Scale,
    pub seed: u64,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub agent: AgentConfig,
    pub schedule: Schedule,
    pub replay_capacity: usize,
    /// Record elapsed seconds in the log; off keeps logs reproducible.
    pub wall_time: bool,
}

impl TrainConfig {
    /// Defaults for an environment at a given scale, including the per-task
    /// block length and `k`.
    pub fn preset(kind: EnvKind, scale: Scale) -> Self {
        let (mut model, agent) = match scale {
            Scale::Desk => (ModelConfig::desk(), AgentConfig::desk()),
            Scale::Paper => (ModelConfig::paper(), AgentConfig::paper()),
        };
        let (l, k) = match kind {
            EnvKind::MountainHike => (16, 2),
            EnvKind::PendulumMissing => (32, 2),
            EnvKind::SequentialTarget => (32, 3),
        };
        model.block_len = l;
        model.k = k;
        TrainConfig {
            preset: scale,
            seed: 0,
            env: EnvConfig::new(kind),
            model,
            agent,
            schedule: Schedule::default(),
            replay_capacity: 1_000_000,
            wall_time: false,
        }
    }

    pub fn dims(&self) -> StepDims {
        match self.env.kind {
            EnvKind::MountainHike => StepDims { obs_dim: 2, act_dim: 2 },
            EnvKind::PendulumMissing => StepDims { obs_dim: 3, act_dim: 1 },
            EnvKind::SequentialTarget => StepDims { obs_dim: 9, act_dim: 2 },
        }
    }

    /// The block model configuration with the variant the agent mode needs.
    pub fn model_config(&self) -> Option<ModelConfig> {
        self.agent.mode.model_mode().map(|mode| ModelConfig { mode, ..self.model.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        if let Some(m) = self.model_config() {
            m.validate(self.dims().act_dim)?;
            if !self.agent.seq_len.is_multiple_of(m.block_len) {
                return Err(Error::config(format!(
                    "T = {} must be a multiple of L = {}",
                    self.agent.seq_len, m.block_len
                )));
            }
        }
        let s = &self.schedule;
        if s.max_steps <= s.i_pre {
            return Err(Error::config(format!("MAX = {} must exceed I_pre = {}", s.max_steps, s.i_pre)));
        }
        if s.i_rl == 0 || s.i_model == 0 {
            return Err(Error::config("update intervals must be positive"));
        }
        if self.replay_capacity < self.agent.seq_len {
            return Err(Error::config("replay capacity is smaller than one window"));
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment). `preset` and
    /// `env.kind` choose the defaults the other keys modify.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Builds a configuration from ordered key/value overrides; later pairs
    /// win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let scale = last("preset").map(str::parse).transpose()?.unwrap_or_default();
        let kind = last("env.kind").map(str::parse).transpose()?.unwrap_or_default();
        let mut cfg = Self::preset(kind, scale);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys and malformed values are configuration
    /// errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => self.preset = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "env.kind" => self.env.kind = parse(key, v)?,
            "env.p_miss" => self.env.p_miss = parse(key, v)?,
            "env.r" => self.env.r = parse(key, v)?,
            "env.sigma_error" => self.env.sigma_error = parse(key, v)?,
            "env.transition_var" => self.env.transition_var = parse(key, v)?,
            "env.c_thres" => self.env.c_thres = parse(key, v)?,
            "env.max_steps" => {
                self.env.max_steps = if v == "default" { None } else { Some(parse(key, v)?) }
            }
            "env.forfeit" => self.env.forfeit = parse(key, v)?,
            "env.target_rewards" => {
                let r: Vec<f64> = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
                self.env.target_rewards = r
                    .try_into()
                    .map_err(|_| Error::config("env.target_rewards needs three comma-separated values"))?;
            }
            "model.block_len" => self.model.block_len = parse(key, v)?,
            "model.k" => self.model.k = parse(key, v)?,
            "model.k_sp" => self.model.k_sp = parse(key, v)?,
            "model.d" => self.model.d = parse(key, v)?,
            "model.latent_dim" => self.model.latent_dim = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.head_dim" => self.model.head_dim = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.embed_hidden" => self.model.embed_hidden = parse(key, v)?,
            "model.rnn_hidden" => self.model.rnn_hidden = parse(key, v)?,
            "model.head_hidden" => self.model.head_hidden = parse(key, v)?,
            "model.joint_hidden" => self.model.joint_hidden = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.compression" => self.model.compression = parse::<Compression>(key, v)?,
            "model.lr" => self.model.lr = parse(key, v)?,
            "agent.mode" => self.agent.mode = parse(key, v)?,
            "agent.hidden" => self.agent.hidden = parse(key, v)?,
            "agent.z_dim" => self.agent.z_dim = parse(key, v)?,
            "agent.embed_dim" => self.agent.embed_dim = parse(key, v)?,
            "agent.gamma" => self.agent.gamma = parse(key, v)?,
            "agent.tau" => self.agent.tau = parse(key, v)?,
            "agent.alpha" => self.agent.alpha = parse(key, v)?,
            "agent.lr" => self.agent.lr = parse(key, v)?,
            "agent.replay_capacity" => self.replay_capacity = parse(key, v)?,
            "schedule.i_pre" => self.schedule.i_pre = parse(key, v)?,
            "schedule.s_pre" => self.schedule.s_pre = parse(key, v)?,
            "schedule.i_rl" => self.schedule.i_rl = parse(key, v)?,
            "schedule.i_model" => self.schedule.i_model = parse(key, v)?,
            "schedule.max_steps" => self.schedule.max_steps = parse(key, v)?,
            "schedule.seq_len" => self.agent.seq_len = parse(key, v)?,
            "schedule.batch" => self.agent.batch = parse(key, v)?,
            "log.wall_time" => self.wall_time = parse(key, v)?,
            other => return Err(Error::config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`TrainConfig::from_text`]
    /// reads back unchanged.
    pub fn to_text(&self) -> String {
        let e = &self.env;
        let m = &self.model;
        let a = &self.agent;
        let s = &self.schedule;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("preset", self.preset.name().into());
        put("seed", self.seed.to_string());
        put("env.kind", e.kind.name().into());
        put("env.p_miss", e.p_miss.to_string());
        put("env.r", e.r.to_string());
        put("env.sigma_error", e.sigma_error.to_string());
        put("env.transition_var", e.transition_var.to_string());
        put("env.c_thres", e.c_thres.to_string());
        put("env.max_steps", e.max_steps.map_or("default".into(), |n| n.to_string()));
        put("env.forfeit", e.forfeit.to_string());
        put(
            "env.target_rewards",
            e.target_rewards.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        put("model.block_len", m.block_len.to_string());
        put("model.k", m.k.to_string());
        put("model.k_sp", m.k_sp.to_string());
        put("model.d", m.d.to_string());
        put("model.latent_dim", m.latent_dim.to_string());
        put("model.heads", m.heads.to_string());
        put("model.head_dim", m.head_dim.to_string());
        put("model.depth", m.depth.to_string());
        put("model.embed_hidden", m.embed_hidden.to_string());
        put("model.rnn_hidden", m.rnn_hidden.to_string());
        put("model.head_hidden", m.head_hidden.to_string());
        put("model.joint_hidden", m.joint_hidden.to_string());
        put("model.dropout", m.dropout.to_string());
        put("model.compression", m.compression.name().into());
        put("model.lr", m.lr.to_string());
        put("agent.mode", a.mode.name().into());
        put("agent.hidden", a.hidden.to_string());
        put("agent.z_dim", a.z_dim.to_string());
        put("agent.embed_dim", a.embed_dim.to_string());
        put("agent.gamma", a.gamma.to_string());
        put("agent.tau", a.tau.to_string());
        put("agent.alpha", a.alpha.to_string());
        put("agent.lr", a.lr.to_string());
        put("agent.replay_capacity", self.replay_capacity.to_string());
        put("schedule.i_pre", s.i_pre.to_string());
        put("schedule.s_pre", s.s_pre.to_string());
        put("schedule.i_rl", s.i_rl.to_string());
        put("schedule.i_model", s.i_model.to_string());
        put("schedule.max_steps", s.max_steps.to_string());
        put("schedule.seq_len", a.seq_len.to_string());
        put("schedule.batch", a.batch.to_string());
        put("log.wall_time", self.wall_time.to_string());
        out
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
}

/// Splits config text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::config(format!("line {}: empty key or value", i + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}
