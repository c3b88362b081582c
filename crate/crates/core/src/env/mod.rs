//! Seeded simulators for the three partially observable tasks.
//!
//! All randomness (initial states, noise, masking) comes from the stream the
//! environment is built with, so a seed and an action sequence fully
//! determine every observation and reward.

mod mountain_hike;
mod pendulum;
mod sequential;

pub use mountain_hike::{reward_map, ridge_distance, MountainHike};
pub use pendulum::{wrap_angle, Pendulum};
pub use sequential::SequentialTarget;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnvKind {
    MountainHike,
    #[default]
    PendulumMissing,
    SequentialTarget,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::MountainHike => "mountain-hike",
            EnvKind::PendulumMissing => "pendulum-missing",
            EnvKind::SequentialTarget => "sequential-target",
        }
    }

    pub fn default_max_steps(self) -> usize {
        match self {
            EnvKind::MountainHike | EnvKind::PendulumMissing => 200,
            EnvKind::SequentialTarget => 128,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mountain-hike" | "mountain_hike" => EnvKind::MountainHike,
            "pendulum-missing" | "pendulum_missing" | "pendulum" => EnvKind::PendulumMissing,
            "sequential-target" | "sequential_target" | "sequential" => EnvKind::SequentialTarget,
            other => return Err(Error::config(format!("unknown environment `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Per-dimension masking probability (pendulum).
    pub p_miss: f64,
    /// Target spacing scale `R` (sequential task).
    pub r: f64,
    /// Observation noise variance (Mountain Hike).
    pub sigma_error: f64,
    /// Transition noise variance (Mountain Hike).
    pub transition_var: f64,
    /// Maximum displacement per step (Mountain Hike).
    pub c_thres: f64,
    /// Episode length cap; `None` uses the task default.
    pub max_steps: Option<usize>,
    /// End reward collection after an out-of-order contact (sequential task).
    pub forfeit: bool,
    /// Rewards for the first, second and third correct contact.
    pub target_rewards: [f64; 3],
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            kind: EnvKind::PendulumMissing,
            p_miss: 0.1,
            r: 10.0,
            sigma_error: 3.0,
            transition_var: 0.25,
            c_thres: 0.1,
            max_steps: None,
            forfeit: false,
            target_rewards: [10.0, 30.0, 60.0],
        }
    }
}

impl EnvConfig {
    pub fn new(kind: EnvKind) -> Self {
        EnvConfig { kind, ..Self::default() }
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps.unwrap_or(self.kind.default_max_steps())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_miss) {
            return Err(Error::config(format!("p_miss {} outside [0, 1]", self.p_miss)));
        }
        if !(self.r > 0.0 && self.r <= 15.0) {
            return Err(Error::config(format!("R = {} outside (0, 15]", self.r)));
        }
        if self.sigma_error < 0.0 || self.transition_var < 0.0 {
            return Err(Error::config("noise variances must be nonnegative"));
        }
        if self.c_thres <= 0.0 {
            return Err(Error::config("c_thres must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be positive"));
        }
        Ok(())
    }
}

/// Diagnostics attached to every step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInfo {
    /// Hidden true state after the step.
    pub state: Vec<f64>,
    /// All targets reached in order (sequential task).
    pub success: bool,
    /// The commanded torque was outside its range and got clipped (pendulum).
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode is over: true termination or time limit.
    pub done: bool,
    /// True termination; value bootstrapping stops here.
    pub terminal: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug)]
enum Task {
    MountainHike(MountainHike),
    Pendulum(Pendulum),
    Sequential(SequentialTarget),
}

/// A stepping interface over the three tasks.
#[derive(Clone, Debug)]
pub struct Env {
    cfg: EnvConfig,
    task: Task,
    rng: ChaCha8Rng,
    steps: usize,
    active: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let task = match cfg.kind {
            EnvKind::MountainHike => Task::MountainHike(MountainHike::new(&cfg)),
            EnvKind::PendulumMissing => Task::Pendulum(Pendulum::new(&cfg)),
            EnvKind::SequentialTarget => Task::Sequential(SequentialTarget::new(&cfg)),
        };
        Ok(Env { cfg, task, rng, steps: 0, active: false })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        match self.cfg.kind {
            EnvKind::MountainHike => 2,
            EnvKind::PendulumMissing => 3,
            EnvKind::SequentialTarget => 9,
        }
    }

    pub fn act_dim(&self) -> usize {
        match self.cfg.kind {
            EnvKind::PendulumMissing => 1,
            _ => 2,
        }
    }

    /// Half-width of the symmetric action box that a `tanh` output is scaled to.
    pub fn action_scale(&self) -> f64 {
        match self.cfg.kind {
            EnvKind::MountainHike => 0.5,
            EnvKind::PendulumMissing => 2.0,
            EnvKind::SequentialTarget => 0.5,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Starts a new episode and returns the first observation.
    pub fn reset(&mut self) -> Vec<f64> {
        self.steps = 0;
        self.active = true;
        match &mut self.task {
            Task::MountainHike(t) => t.reset(&mut self.rng),
            Task::Pendulum(t) => t.reset(&mut self.rng),
            Task::Sequential(t) => t.reset(&mut self.rng),
        }
    }

    /// Advances one step with an action in environment units.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if !self.active {
            return Err(Error::Protocol("step called on a finished or unstarted episode".into()));
        }
        if action.len() != self.act_dim() || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::shape(format!(
                "action must be {} finite values, got {action:?}",
                self.act_dim()
            )));
        }
        let mut result = match &mut self.task {
            Task::MountainHike(t) => t.step(action, &mut self.rng),
            Task::Pendulum(t) => t.step(action, &mut self.rng),
            Task::Sequential(t) => t.step(action, &mut self.rng),
        };
        self.steps += 1;
        if self.steps >= self.cfg.max_steps() {
            result.done = true;
        }
        if result.done {
            self.active = false;
        }
        Ok(result)
    }

    /// Overwrites the hidden state; the layout matches [`StepInfo::state`].
    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        match &mut self.task {
            Task::MountainHike(t) => t.set_state(state),
            Task::Pendulum(t) => t.set_state(state),
            Task::Sequential(t) => t.set_state(state),
        }
    }

    pub fn state(&self) -> Vec<f64> {
        match &self.task {
            Task::MountainHike(t) => t.state(),
            Task::Pendulum(t) => t.state(),
            Task::Sequential(t) => t.state(),
        }
    }

    /// Target centres of the sequential task.
    pub fn targets(&self) -> Option<[[f64; 2]; 3]> {
        match &self.task {
            Task::Sequential(t) => Some(t.targets()),
            _ => None,
        }
    }
}

fn state_len(state: &[f64], n: usize) -> Result<()> {
    if state.len() != n {
        return Err(Error::shape(format!("state needs {n} values, got {}", state.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn env(kind: EnvKind, seed: u64) -> Env {
        Env::new(EnvConfig::new(kind), stream_rng(seed, Stream::Env)).unwrap()
    }

    #[test]
    fn replay_is_bit_exact_and_seeds_differ() {
        for kind in [EnvKind::MountainHike, EnvKind::PendulumMissing, EnvKind::SequentialTarget] {
            let mut actions = stream_rng(99, Stream::Agent);
            let acts: Vec<Vec<f64>> = (0..300)
                .map(|_| (0..2).map(|_| actions.random_range(-1.0..1.0)).collect())
                .collect();
            let run = |seed: u64| {
                let mut e = env(kind, seed);
                let mut trace = vec![e.reset()];
                let mut rewards = vec![];
                for a in &acts {
                    let r = e.step(&a[..e.act_dim()]).unwrap();
                    trace.push(r.observation);
                    rewards.push(r.reward.to_bits());
                    if r.done {
                        trace.push(e.reset());
                    }
                }
                (trace, rewards)
            };
            assert_eq!(run(5), run(5), "{kind}");
            assert_ne!(run(5).0[0], run(6).0[0], "{kind}");
        }
    }

    #[test]
    fn step_after_done_is_protocol_error() {
        let mut e = Env::new(
            EnvConfig { max_steps: Some(2), ..EnvConfig::new(EnvKind::MountainHike) },
            stream_rng(1, Stream::Env),
        )
        .unwrap();
        assert!(matches!(e.step(&[0.0, 0.0]), Err(Error::Protocol(_))));
        e.reset();
        assert!(!e.step(&[0.0, 0.0]).unwrap().done);
        assert!(e.step(&[0.0, 0.0]).unwrap().done);
        assert!(matches!(e.step(&[0.0, 0.0]), Err(Error::Protocol(_))));
    }

    #[test]
    fn invalid_parameters_are_config_errors() {
        for cfg in [
            EnvConfig { p_miss: 1.5, ..EnvConfig::default() },
            EnvConfig { r: 0.0, ..EnvConfig::new(EnvKind::SequentialTarget) },
            EnvConfig { r: 16.0, ..EnvConfig::new(EnvKind::SequentialTarget) },
            EnvConfig { max_steps: Some(0), ..EnvConfig::default() },
        ] {
            assert!(matches!(Env::new(cfg, stream_rng(0, Stream::Env)), Err(Error::Config(_))));
        }
    }

    #[test]
    fn observation_dims_are_constant() {
        for kind in [EnvKind::MountainHike, EnvKind::PendulumMissing, EnvKind::SequentialTarget] {
            let mut e = env(kind, 3);
            let n = e.obs_dim();
            assert_eq!(e.reset().len(), n);
            for _ in 0..50 {
                let r = e.step(&vec![0.3; e.act_dim()]).unwrap();
                assert_eq!(r.observation.len(), n);
                if r.done {
                    break;
                }
            }
        }
    }
}
