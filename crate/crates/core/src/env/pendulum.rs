use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{state_len, EnvConfig, StepInfo, StepResult};
use crate::error::Result;

const G: f64 = 10.0;
const M: f64 = 1.0;
const L: f64 = 1.0;
const DT: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Swing-up pendulum whose observation entries are independently zeroed.
#[derive(Clone, Debug)]
pub struct Pendulum {
    theta: f64,
    theta_dot: f64,
    p_miss: f64,
}

impl Pendulum {
    pub fn new(cfg: &EnvConfig) -> Self {
        Pendulum { theta: 0.0, theta_dot: 0.0, p_miss: cfg.p_miss }
    }

    fn observe(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        [self.theta.cos(), self.theta.sin(), self.theta_dot]
            .into_iter()
            .map(|v| if rng.random::<f64>() < self.p_miss { 0.0 } else { v })
            .collect()
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.observe(rng)
    }

    pub fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> StepResult {
        let u = action[0].clamp(-MAX_TORQUE, MAX_TORQUE);
        let clipped = u != action[0];
        let (th, thdot) = (self.theta, self.theta_dot);
        let reward = -(wrap_angle(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u);
        let new_thdot =
            (thdot + (3.0 * G / (2.0 * L) * th.sin() + 3.0 / (M * L * L) * u) * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta = th + new_thdot * DT;
        self.theta_dot = new_thdot;
        StepResult {
            observation: self.observe(rng),
            reward,
            done: false,
            terminal: false,
            info: StepInfo { state: self.state(), clipped, ..StepInfo::default() },
        }
    }

    pub fn state(&self) -> Vec<f64> {
        vec![self.theta, self.theta_dot]
    }

    /// `[theta, theta_dot]`.
    pub fn set_state(&mut self, s: &[f64]) -> Result<()> {
        state_len(s, 2)?;
        self.theta = s[0];
        self.theta_dot = s[1];
        Ok(())
    }
}
