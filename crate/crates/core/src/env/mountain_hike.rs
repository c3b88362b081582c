use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{state_len, EnvConfig, StepInfo, StepResult};
use crate::error::Result;

const PATH: [[f64; 2]; 3] = [[-8.5, -8.5], [8.5, -8.5], [8.5, 8.5]];
const ARENA: f64 = 10.0;

/// Distance from `p` to the piecewise-linear ridge path.
pub fn ridge_distance(p: [f64; 2]) -> f64 {
    PATH.windows(2)
        .map(|seg| {
            let (a, b) = (seg[0], seg[1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
            ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// `-0.1 * distance to the ridge`, floored at `-3`.
pub fn reward_map(p: [f64; 2]) -> f64 {
    (-0.1 * ridge_distance(p)).max(-3.0)
}

/// 2-D hike with noisy position observations and clipped moves.
#[derive(Clone, Debug)]
pub struct MountainHike {
    pos: [f64; 2],
    obs_sd: f64,
    trans_sd: f64,
    c_thres: f64,
}

impl MountainHike {
    pub fn new(cfg: &EnvConfig) -> Self {
        MountainHike {
            pos: [0.0; 2],
            obs_sd: cfg.sigma_error.sqrt(),
            trans_sd: cfg.transition_var.sqrt(),
            c_thres: cfg.c_thres,
        }
    }

    /// Rescales `a` so that its norm is `min(c_thres, |a|)`.
    pub fn clip_action(&self, a: &[f64]) -> [f64; 2] {
        let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
        if norm <= self.c_thres {
            [a[0], a[1]]
        } else {
            let s = self.c_thres / norm;
            [a[0] * s, a[1] * s]
        }
    }

    fn observe(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.pos
            .iter()
            .map(|p| p + self.obs_sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        for (p, c) in self.pos.iter_mut().zip(PATH[0]) {
            *p = (c + rng.sample::<f64, _>(StandardNormal)).clamp(-ARENA, ARENA);
        }
        self.observe(rng)
    }

    pub fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> StepResult {
        let moved = self.clip_action(action);
        for (p, m) in self.pos.iter_mut().zip(moved) {
            *p = (*p + m + self.trans_sd * rng.sample::<f64, _>(StandardNormal)).clamp(-ARENA, ARENA);
        }
        let norm = (action[0] * action[0] + action[1] * action[1]).sqrt();
        let reward = reward_map(self.pos) - 0.01 * norm;
        StepResult {
            observation: self.observe(rng),
            reward,
            done: false,
            terminal: false,
            info: StepInfo { state: self.pos.to_vec(), ..StepInfo::default() },
        }
    }

    pub fn state(&self) -> Vec<f64> {
        self.pos.to_vec()
    }

    pub fn set_state(&mut self, s: &[f64]) -> Result<()> {
        state_len(s, 2)?;
        self.pos = [s[0], s[1]];
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvKind};
    use crate::rng::{stream_rng, Stream};

    fn hike() -> MountainHike {
        MountainHike::new(&EnvConfig::new(EnvKind::MountainHike))
    }

    #[test]
    fn clipping_examples() {
        assert_eq!(hike().clip_action(&[0.05, 0.0]), [0.05, 0.0]);
        let c = hike().clip_action(&[1.0, 0.0]);
        assert!((c[0] - 0.1).abs() < 1e-15 && c[1] == 0.0);
        let c = hike().clip_action(&[3.0, -4.0]);
        assert!(((c[0] * c[0] + c[1] * c[1]).sqrt() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn noiseless_step_moves_by_clipped_action() {
        let cfg = EnvConfig { sigma_error: 0.0, transition_var: 0.0, ..EnvConfig::new(EnvKind::MountainHike) };
        let mut e = Env::new(cfg, stream_rng(2, Stream::Env)).unwrap();
        e.reset();
        e.set_state(&[1.0, 2.0]).unwrap();
        let r = e.step(&[0.3, 0.4]).unwrap();
        assert_eq!(r.info.state, vec![1.0 + 0.06, 2.0 + 0.08]);
        assert_eq!(r.observation, r.info.state);
        let expected = reward_map([1.06, 2.08]) - 0.01 * 0.5;
        assert!((r.reward - expected).abs() < 1e-15);
    }

    #[test]
    fn reward_map_shape() {
        assert_eq!(reward_map([-8.5, -8.5]), 0.0);
        assert_eq!(reward_map([0.0, -8.5]), 0.0);
        assert!((reward_map([0.0, -6.5]) + 0.2).abs() < 1e-12);
        assert_eq!(reward_map([-100.0, 100.0]), -3.0);
    }

    #[test]
    fn noise_has_configured_variances() {
        let mut rng = stream_rng(3, Stream::Env);
        let mut h = hike();
        let n = 20_000;
        let (mut so, mut st) = (0.0, 0.0);
        for _ in 0..n {
            h.pos = [0.0, 0.0];
            let r = h.step(&[0.0, 0.0], &mut rng);
            let s = &r.info.state;
            st += s[0] * s[0] + s[1] * s[1];
            so += (r.observation[0] - s[0]).powi(2) + (r.observation[1] - s[1]).powi(2);
        }
        let (vo, vt) = (so / (2.0 * n as f64), st / (2.0 * n as f64));
        assert!((vo - 3.0).abs() < 0.1, "{vo}");
        assert!((vt - 0.25).abs() < 0.01, "{vt}");
    }

    #[test]
    fn initial_state_centres_on_start() {
        let mut rng = stream_rng(4, Stream::Env);
        let mut h = hike();
        let n = 5000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            h.reset(&mut rng);
            mean[0] += h.pos[0] / n as f64;
            mean[1] += h.pos[1] / n as f64;
        }
        assert!((mean[0] + 8.5).abs() < 0.06 && (mean[1] + 8.5).abs() < 0.06, "{mean:?}");
    }
}
