use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{state_len, EnvConfig, StepInfo, StepResult};
use crate::error::{Error, Result};

const ARENA: f64 = 20.0;
const CENTER: [f64; 2] = [10.0, 10.0];
const CONTACT: f64 = 1.0;
const SPEED: f64 = 0.5;
const ANGLES_DEG: [f64; 3] = [90.0, 210.0, 330.0];

/// Visit three targets in a fixed order using egocentric range and bearing
/// observations that carry no record of past contacts.
#[derive(Clone, Debug)]
pub struct SequentialTarget {
    pos: [f64; 2],
    heading: f64,
    progress: usize,
    forfeited: bool,
    targets: [[f64; 2]; 3],
    rewards: [f64; 3],
    forfeit: bool,
}

impl SequentialTarget {
    pub fn new(cfg: &EnvConfig) -> Self {
        let radius = 0.6 * cfg.r;
        let targets = ANGLES_DEG.map(|deg: f64| {
            let a = deg.to_radians();
            [CENTER[0] + radius * a.cos(), CENTER[1] + radius * a.sin()]
        });
        SequentialTarget {
            pos: CENTER,
            heading: 0.0,
            progress: 0,
            forfeited: false,
            targets,
            rewards: cfg.target_rewards,
            forfeit: cfg.forfeit,
        }
    }

    pub fn targets(&self) -> [[f64; 2]; 3] {
        self.targets
    }

    fn observe(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(9);
        for t in &self.targets {
            let (dx, dy) = (t[0] - self.pos[0], t[1] - self.pos[1]);
            let bearing = dy.atan2(dx) - self.heading;
            obs.extend([(dx * dx + dy * dy).sqrt(), bearing.sin(), bearing.cos()]);
        }
        obs
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.pos = CENTER;
        self.heading = rng.random_range(-PI..PI);
        self.progress = 0;
        self.forfeited = false;
        self.observe()
    }

    pub fn step(&mut self, action: &[f64], _rng: &mut ChaCha8Rng) -> StepResult {
        let norm = (action[0] * action[0] + action[1] * action[1]).sqrt();
        let s = if norm > SPEED { SPEED / norm } else { 1.0 };
        let (fx, fy) = (action[0] * s, action[1] * s);
        let (c, sn) = (self.heading.cos(), self.heading.sin());
        self.pos[0] = (self.pos[0] + c * fx - sn * fy).clamp(0.0, ARENA);
        self.pos[1] = (self.pos[1] + sn * fx + c * fy).clamp(0.0, ARENA);

        let mut reward = 0.0;
        let touching: Vec<usize> = (0..3)
            .filter(|&i| {
                let t = self.targets[i];
                ((t[0] - self.pos[0]).powi(2) + (t[1] - self.pos[1]).powi(2)).sqrt() <= CONTACT
            })
            .collect();
        if self.forfeit && touching.iter().any(|&i| i > self.progress) {
            self.forfeited = true;
        }
        if !self.forfeited && self.progress < 3 && touching.contains(&self.progress) {
            reward = self.rewards[self.progress];
            self.progress += 1;
        }
        let success = self.progress == 3;
        StepResult {
            observation: self.observe(),
            reward,
            done: success,
            terminal: success,
            info: StepInfo { state: self.state(), success, clipped: s < 1.0 },
        }
    }

    /// `[x, y, heading, progress, forfeited]`.
    pub fn state(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.heading, self.progress as f64, f64::from(u8::from(self.forfeited))]
    }

    pub fn set_state(&mut self, s: &[f64]) -> Result<()> {
        state_len(s, 5)?;
        if !(0.0..=3.0).contains(&s[3]) || s[3].fract() != 0.0 {
            return Err(Error::Bounds(format!("progress {} is not in 0..=3", s[3])));
        }
        self.pos = [s[0], s[1]];
        self.heading = s[2];
        self.progress = s[3] as usize;
        self.forfeited = s[4] != 0.0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvKind};
    use crate::rng::{stream_rng, Stream};

    fn env(r: f64, forfeit: bool) -> Env {
        let cfg = EnvConfig { r, forfeit, ..EnvConfig::new(EnvKind::SequentialTarget) };
        let mut e = Env::new(cfg, stream_rng(1, Stream::Env)).unwrap();
        e.reset();
        e
    }

    /// Walks straight to `goal` in egocentric actions; returns rewards seen.
    fn walk_to(e: &mut Env, goal: [f64; 2]) -> Vec<f64> {
        let mut rewards = vec![];
        for _ in 0..200 {
            let s = e.state();
            let (dx, dy) = (goal[0] - s[0], goal[1] - s[1]);
            if (dx * dx + dy * dy).sqrt() < 1e-9 {
                break;
            }
            let h = s[2];
            let (fx, fy) = (h.cos() * dx + h.sin() * dy, -h.sin() * dx + h.cos() * dy);
            let r = e.step(&[fx, fy]).unwrap();
            rewards.push(r.reward);
            if r.done {
                break;
            }
        }
        rewards
    }

    #[test]
    fn in_order_visits_pay_each_reward_once() {
        let mut e = env(10.0, false);
        let t = e.targets().unwrap();
        let mut all = vec![];
        for goal in t {
            all.extend(walk_to(&mut e, goal));
        }
        let paid: Vec<f64> = all.into_iter().filter(|r| *r != 0.0).collect();
        assert_eq!(paid, vec![10.0, 30.0, 60.0]);
        assert_eq!(e.state()[3], 3.0);
    }

    #[test]
    fn out_of_order_first_contact_forfeits_when_enabled() {
        let mut e = env(10.0, true);
        let t = e.targets().unwrap();
        assert!(walk_to(&mut e, t[1]).iter().all(|r| *r == 0.0));
        let mut rest = walk_to(&mut e, t[0]);
        rest.extend(walk_to(&mut e, t[1]));
        rest.extend(walk_to(&mut e, t[2]));
        assert!(rest.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn out_of_order_contact_is_ignored_by_default() {
        let mut e = env(10.0, false);
        let t = e.targets().unwrap();
        assert!(walk_to(&mut e, t[1]).iter().all(|r| *r == 0.0));
        let mut rest = walk_to(&mut e, t[0]);
        rest.extend(walk_to(&mut e, t[1]));
        rest.extend(walk_to(&mut e, t[2]));
        let paid: Vec<f64> = rest.into_iter().filter(|r| *r != 0.0).collect();
        assert_eq!(paid, vec![10.0, 30.0, 60.0]);
    }

    #[test]
    fn spacing_scales_linearly_with_r() {
        let dist = |r: f64| {
            let t = env(r, false).targets().unwrap();
            ((t[0][0] - t[1][0]).powi(2) + (t[0][1] - t[1][1]).powi(2)).sqrt()
        };
        assert!((dist(15.0) - 1.5 * dist(10.0)).abs() < 1e-12);
    }

    #[test]
    fn speed_is_capped() {
        let mut e = env(10.0, false);
        let before = e.state();
        e.step(&[3.0, 4.0]).unwrap();
        let after = e.state();
        let moved = ((after[0] - before[0]).powi(2) + (after[1] - before[1]).powi(2)).sqrt();
        assert!((moved - 0.5).abs() < 1e-12);
    }

    #[test]
    fn random_returns_take_allowed_values() {
        let mut rng = stream_rng(2, Stream::Agent);
        let mut e = env(5.0, false);
        for _ in 0..50 {
            let mut ret = 0.0;
            loop {
                let a = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                let r = e.step(&a).unwrap();
                ret += r.reward;
                if r.done {
                    assert!(!r.info.success || ret == 100.0);
                    break;
                }
            }
            assert!([0.0, 10.0, 40.0, 100.0].contains(&ret), "{ret}");
            e.reset();
        }
    }
}
