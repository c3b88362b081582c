use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::log::{read_csv, write_csv, LogRow, LossAccumulator, RowKind};
use crate::agent::{Agent, ReplayMemory, SacBatch, Transition, ZState};
use crate::env::{Env, EnvConfig, StepResult};
use crate::error::{Error, Result};
use crate::model::{BlockModel, SummaryState};
use crate::rng::{rng_from_bytes, rng_to_bytes, stream_rng, Stream};
use crate::tensor::{Adam, ParameterStore, Tensor};

const RECENT: usize = 100;

/// Per-episode recurrent state shared by training and evaluation rollouts.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub obs: Vec<f64>,
    /// Normalized previous action.
    pub prev_action: Vec<f64>,
    pub prev_reward: f64,
    pub z: ZState,
    summary: Option<SummaryState>,
    ctx: Vec<f64>,
    block: Vec<Vec<f64>>,
    pub ret: f64,
    pub len: usize,
    pub success: bool,
}

impl Rollout {
    /// Episode start: `z_0 = 0`, `h_0 = 0`, and the summary heads at `h_0`.
    pub fn start(obs: Vec<f64>, agent: &Agent, model: Option<&BlockModel>) -> Result<Self> {
        let mut summary = None;
        let ctx = match model {
            Some(m) if m.has_latent() => {
                let s = m.initial_state()?;
                let ctx = s.mu.data().iter().chain(s.sigma.data()).copied().collect();
                summary = Some(s);
                ctx
            }
            _ => vec![0.0; agent.context_dim()],
        };
        Ok(Rollout {
            obs,
            prev_action: vec![0.0; agent.dims.act_dim],
            prev_reward: 0.0,
            z: agent.initial_z(),
            summary,
            ctx,
            block: Vec::new(),
            ret: 0.0,
            len: 0,
            success: false,
        })
    }

    /// Folds the result of taking normalized `action` into the state. When a
    /// block of `L` rows completes, the block summary used by later steps is
    /// refreshed.
    pub fn absorb(
        &mut self,
        agent: &Agent,
        model: Option<&BlockModel>,
        action: &[f64],
        res: &StepResult,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let row = agent.dims.row(action, res.reward, &res.observation);
        self.z = agent.step_z(&self.z, &row, &self.ctx, model)?;
        if let Some(m) = model {
            self.block.push(row);
            if self.block.len() == m.cfg.block_len {
                let rows = Tensor::from_rows(&self.block)?;
                self.block.clear();
                let state = match &self.summary {
                    Some(s) => s.clone(),
                    None => m.initial_state()?,
                };
                let (next, yk) = m.advance(&state, &rows, rng)?;
                if m.has_latent() {
                    self.ctx = next.mu.data().iter().chain(next.sigma.data()).copied().collect();
                    self.summary = Some(next);
                } else {
                    self.ctx = yk.into_data();
                }
            }
        }
        self.obs = res.observation.clone();
        self.prev_action = action.to_vec();
        self.prev_reward = res.reward;
        self.ret += res.reward;
        self.len += 1;
        self.success |= res.info.success;
        Ok(())
    }

    /// Rows of the current, not yet complete block.
    pub fn pending_rows(&self) -> usize {
        self.block.len()
    }

    pub fn context(&self) -> &[f64] {
        &self.ctx
    }
}

/// Update counts since the start of training.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub model: u64,
    pub rl: u64,
    /// Agent updates skipped because no window was eligible yet.
    pub rl_skipped: u64,
    /// Global step at which pretraining ran.
    pub pretrain_step: Option<u64>,
}

/// How evaluation rollouts choose actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPolicy {
    Agent { deterministic: bool },
    /// Uniform over the action box.
    Random,
    /// Always the zero action.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub successes: usize,
}

impl EvalReport {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.returns.len().max(1) as f64
    }
}

/// The training loop: environment, block model, agent, replay memory and
/// every random stream of one run.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub env: Env,
    pub model: Option<BlockModel>,
    pub agent: Agent,
    pub memory: ReplayMemory,
    model_rng: ChaCha8Rng,
    agent_rng: ChaCha8Rng,
    t_global: u64,
    episodes: u64,
    rollout: Option<Rollout>,
    recent: VecDeque<f64>,
    counts: UpdateCounts,
    acc: LossAccumulator,
    rows: Vec<LogRow>,
    started: Instant,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = stream_rng(cfg.seed, Stream::Init);
        let dims = cfg.dims();
        let model = cfg.model_config().map(|m| BlockModel::new(m, dims, &mut init)).transpose()?;
        let agent = Agent::new(cfg.agent.clone(), dims, model.as_ref(), &mut init)?;
        let env = Env::new(cfg.env.clone(), stream_rng(cfg.seed, Stream::Env))?;
        let memory = ReplayMemory::new(cfg.replay_capacity, cfg.agent.seq_len)?;
        Ok(Trainer {
            model_rng: stream_rng(cfg.seed, Stream::Model),
            agent_rng: stream_rng(cfg.seed, Stream::Agent),
            cfg,
            env,
            model,
            agent,
            memory,
            t_global: 0,
            episodes: 0,
            rollout: None,
            recent: VecDeque::new(),
            counts: UpdateCounts::default(),
            acc: LossAccumulator::default(),
            rows: Vec::new(),
            started: Instant::now(),
            dump_dir: None,
        })
    }

    /// Where a diagnostic dump is written if a loss turns non-finite.
    pub fn set_dump_dir(&mut self, dir: Option<PathBuf>) {
        self.dump_dir = dir;
    }

    pub fn global_step(&self) -> u64 {
        self.t_global
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn counts(&self) -> &UpdateCounts {
        &self.counts
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn is_finished(&self) -> bool {
        self.t_global >= self.cfg.schedule.max_steps
    }

    /// True between episodes.
    pub fn at_episode_boundary(&self) -> bool {
        self.rollout.is_none()
    }

    /// Mean of the most recent (up to 100) episode returns.
    pub fn avg_return_100(&self) -> Option<f64> {
        (!self.recent.is_empty()).then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64)
    }

    fn wall(&self) -> f64 {
        if self.cfg.wall_time {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// One environment step followed by whatever updates the schedule
    /// calls for. Returns `false` once `MAX` steps have been taken.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        if self.rollout.is_none() {
            let obs = self.env.reset();
            self.rollout = Some(Rollout::start(obs, &self.agent, self.model.as_ref())?);
        }
        self.t_global += 1;
        let t = self.t_global;
        let s = self.cfg.schedule.clone();
        let ro = self.rollout.as_mut().expect("rollout started");
        let action: Vec<f64> = if t <= s.i_pre {
            (0..self.agent.dims.act_dim).map(|_| self.agent_rng.random_range(-1.0..=1.0)).collect()
        } else {
            self.agent.select_action(&ro.z, &ro.obs, ro.prev_reward, false, &mut self.agent_rng)?.0
        };
        let scale = self.env.action_scale();
        let env_action: Vec<f64> = action.iter().map(|a| a * scale).collect();
        let res = self.env.step(&env_action)?;
        self.memory.push(Transition {
            obs: ro.obs.clone(),
            prev_action: ro.prev_action.clone(),
            prev_reward: ro.prev_reward,
            action: action.clone(),
            reward: res.reward,
            next_obs: res.observation.clone(),
            terminal: res.terminal,
            done: res.done,
        });
        ro.absorb(&self.agent, self.model.as_ref(), &action, &res, &mut self.model_rng)?;

        let trains_model = self.cfg.agent.mode.trains_model();
        if t == s.i_pre + 1 && trains_model {
            let mut pre = LossAccumulator::default();
            for _ in 0..s.s_pre {
                let l = self.model_update()?;
                pre.add_model(l.0, l.1);
            }
            self.counts.pretrain_step = Some(t);
            let (m, _) = pre.take();
            self.rows.push(LogRow {
                kind: RowKind::Pretrain,
                global_step: t,
                episode: self.episodes,
                episode_return: None,
                avg_return_100: None,
                gen_loss: m.map(|m| m[0]),
                inf_loss: m.map(|m| m[1]),
                actor_loss: None,
                critic_loss: None,
                value_loss: None,
                wall_time_s: self.wall(),
            });
        }
        if t > s.i_pre && t.is_multiple_of(s.i_rl) {
            if self.memory.num_windows() == 0 {
                self.counts.rl_skipped += 1;
            } else {
                let l = self.rl_update()?;
                self.acc.add_agent(l[0], l[1], l[2]);
            }
        }
        if t > s.i_pre && t.is_multiple_of(s.i_model) && trains_model {
            let l = self.model_update()?;
            self.acc.add_model(l.0, l.1);
        }

        if res.done {
            let ro = self.rollout.take().expect("rollout active");
            self.episodes += 1;
            if self.recent.len() == RECENT {
                self.recent.pop_front();
            }
            self.recent.push_back(ro.ret);
            let (m, a) = self.acc.take();
            self.rows.push(LogRow {
                kind: RowKind::Episode,
                global_step: t,
                episode: self.episodes,
                episode_return: Some(ro.ret),
                avg_return_100: self.avg_return_100(),
                gen_loss: m.map(|m| m[0]),
                inf_loss: m.map(|m| m[1]),
                actor_loss: a.map(|a| a[0]),
                critic_loss: a.map(|a| a[1]),
                value_loss: a.map(|a| a[2]),
                wall_time_s: self.wall(),
            });
        }
        Ok(true)
    }

    /// Writes `nan_dump.txt` (if a dump directory is set) and returns the
    /// non-finite error.
    fn abort_non_finite(&self, msg: String, seqs: &[Tensor]) -> Error {
        if let Some(dir) = &self.dump_dir {
            if let Err(e) = self.write_dump(dir, &msg, seqs) {
                return e;
            }
        }
        Error::NonFinite(msg)
    }

    fn write_dump(&self, dir: &Path, msg: &str, seqs: &[Tensor]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = String::new();
        let _ = writeln!(text, "non-finite value at global step {} (episode {})", self.t_global, self.episodes);
        let _ = writeln!(text, "error: {msg}");
        let stores: Vec<(&str, &ParameterStore)> = [
            ("agent.critic", Some(&self.agent.critic)),
            ("agent.policy", Some(&self.agent.policy)),
            ("agent.target", Some(&self.agent.target)),
            ("model.phi", self.model.as_ref().map(|m| &m.phi)),
            ("model.theta", self.model.as_ref().map(|m| &m.theta)),
        ]
        .into_iter()
        .filter_map(|(n, s)| s.map(|s| (n, s)))
        .collect();
        for (name, store) in stores {
            for (p, v) in store.iter() {
                if !v.is_finite() {
                    let _ = writeln!(text, "non-finite parameter {name}/{p}");
                }
            }
        }
        let _ = writeln!(text, "\n[config]\n{}", self.cfg.to_text());
        let _ = writeln!(text, "[batch rows: a, r, o]");
        text.push_str(&Self::describe_rows(seqs));
        std::fs::write(dir.join("nan_dump.txt"), text)?;
        Ok(())
    }

    fn describe_rows(seqs: &[Tensor]) -> String {
        let mut out = String::new();
        for (i, s) in seqs.iter().enumerate() {
            let _ = writeln!(out, "# sequence {i}");
            for r in 0..s.rows() {
                let cells: Vec<String> = s.row_slice(r).iter().map(f64::to_string).collect();
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
        out
    }

    fn window_rows(windows: &[crate::agent::Window]) -> Result<Vec<Tensor>> {
        windows
            .iter()
            .map(|w| Tensor::from_rows(&w.steps.iter().map(Transition::row).collect::<Vec<_>>()))
            .collect()
    }

    fn model_update(&mut self) -> Result<(f64, f64)> {
        let windows = self.memory.sample(self.cfg.agent.batch, &mut self.model_rng)?;
        let seqs = Self::window_rows(&windows)?;
        let model = self.model.as_mut().ok_or_else(|| Error::config("no block model to update"))?;
        match model.update(&seqs, &mut self.model_rng) {
            Ok(l) => {
                self.counts.model += 1;
                Ok((l.gen_loss, l.inf_loss))
            }
            Err(Error::NonFinite(msg)) => Err(self.abort_non_finite(msg, &seqs)),
            Err(e) => Err(e),
        }
    }

    fn rl_update(&mut self) -> Result<[f64; 3]> {
        let batch: SacBatch = self.agent.sample_batch(&self.memory, &mut self.agent_rng)?;
        match self.agent.update_batch(&batch, self.model.as_mut(), &mut self.agent_rng) {
            Ok(l) => {
                self.counts.rl += 1;
                Ok([l.actor, l.critic, l.value])
            }
            Err(Error::NonFinite(msg)) => Err(self.abort_non_finite(msg, &Self::window_rows(&batch.windows)?)),
            Err(e) => Err(e),
        }
    }

    /// Steps until `MAX` is reached.
    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    /// Steps until `n` more episodes have completed or training ends.
    pub fn run_episodes(&mut self, n: u64) -> Result<()> {
        let target = self.episodes.saturating_add(n);
        while self.episodes < target && self.step()? {}
        Ok(())
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        write_csv(std::io::BufWriter::new(file), &self.rows)
    }

    /// Parameters, optimizer moments, random streams, replay memory and
    /// log. Allowed between episodes or once training has finished.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        if self.rollout.is_some() && !self.is_finished() {
            return Err(Error::Protocol("checkpoints are taken between episodes".into()));
        }
        let mut c = Checkpoint { config: self.cfg.to_text(), ..Default::default() };
        let mut stores: Vec<(&str, &ParameterStore, Option<&Adam>)> = vec![
            ("agent.critic", &self.agent.critic, Some(&self.agent.opt_critic)),
            ("agent.policy", &self.agent.policy, Some(&self.agent.opt_policy)),
            ("agent.target", &self.agent.target, None),
        ];
        if let Some(m) = &self.model {
            stores.push(("model.phi", &m.phi, Some(&m.opt_phi)));
            stores.push(("model.theta", &m.theta, Some(&m.opt_theta)));
        }
        for (prefix, store, opt) in &stores {
            c.push_store(prefix, store);
            if let Some(opt) = opt {
                let (t, m, v) = opt.state();
                for ((name, _), (mt, vt)) in store.iter().zip(m.iter().zip(v)) {
                    c.push_tensor(format!("adam.{prefix}.m/{name}"), mt.clone());
                    c.push_tensor(format!("adam.{prefix}.v/{name}"), vt.clone());
                }
                c.push_blob(format!("adam.{prefix}.t"), t.to_le_bytes().to_vec());
            }
        }
        c.push_blob("rng.env", rng_to_bytes(self.env.rng()));
        c.push_blob("rng.model", rng_to_bytes(&self.model_rng));
        c.push_blob("rng.agent", rng_to_bytes(&self.agent_rng));
        c.push_blob("replay", self.memory.to_bytes());
        let mut state = Vec::new();
        let pre = self.counts.pretrain_step.unwrap_or(u64::MAX);
        for v in [self.t_global, self.episodes, self.counts.model, self.counts.rl, self.counts.rl_skipped, pre] {
            state.extend_from_slice(&v.to_le_bytes());
        }
        state.push(u8::from(self.rollout.is_some()));
        state.extend_from_slice(&(self.recent.len() as u64).to_le_bytes());
        for r in &self.recent {
            state.extend_from_slice(&r.to_le_bytes());
        }
        c.push_blob("trainer", state);
        let mut log = Vec::new();
        write_csv(&mut log, &self.rows)?;
        c.push_blob("log", log);
        Ok(c)
    }

    /// Rebuilds a trainer from a checkpoint, continuing exactly where it
    /// was taken.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_text(&c.config)?;
        let mut tr = Trainer::new(cfg)?;
        restore(c, "agent.critic", &mut tr.agent.critic, Some(&mut tr.agent.opt_critic))?;
        restore(c, "agent.policy", &mut tr.agent.policy, Some(&mut tr.agent.opt_policy))?;
        restore(c, "agent.target", &mut tr.agent.target, None)?;
        if let Some(m) = tr.model.as_mut() {
            restore(c, "model.phi", &mut m.phi, Some(&mut m.opt_phi))?;
            restore(c, "model.theta", &mut m.theta, Some(&mut m.opt_theta))?;
        }
        tr.env.set_rng(rng_from_bytes(c.blob("rng.env")?)?);
        tr.model_rng = rng_from_bytes(c.blob("rng.model")?)?;
        tr.agent_rng = rng_from_bytes(c.blob("rng.agent")?)?;
        tr.memory = ReplayMemory::from_bytes(c.blob("replay")?)?;
        let s = c.blob("trainer")?;
        let word = |i: usize| -> Result<u64> {
            s.get(8 * i..8 * i + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| Error::Integrity("truncated trainer state".into()))
        };
        tr.t_global = word(0)?;
        tr.episodes = word(1)?;
        tr.counts.model = word(2)?;
        tr.counts.rl = word(3)?;
        tr.counts.rl_skipped = word(4)?;
        tr.counts.pretrain_step = Some(word(5)?).filter(|v| *v != u64::MAX);
        let mid_episode = *s.get(48).ok_or_else(|| Error::Integrity("truncated trainer state".into()))? != 0;
        let n = s.get(49..57).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")));
        let n = n.ok_or_else(|| Error::Integrity("truncated trainer state".into()))? as usize;
        if s.len() != 57 + 8 * n {
            return Err(Error::Integrity("trainer state length".into()));
        }
        tr.recent = s[57..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        tr.rows = read_csv(c.blob("log")?)?;
        if mid_episode {
            // Only a finished run may stop mid-episode; it takes no more steps.
            tr.rollout = Some(Rollout::start(vec![0.0; tr.agent.dims.obs_dim], &tr.agent, tr.model.as_ref())?);
        }
        Ok(tr)
    }

    /// Frozen-parameter rollouts on a fresh environment seeded with `seed`.
    pub fn evaluate(&self, policy: EvalPolicy, episodes: usize, seed: u64) -> Result<EvalReport> {
        evaluate_with(&self.cfg.env, &self.agent, self.model.as_ref(), policy, episodes, seed)
    }
}

fn restore(c: &Checkpoint, prefix: &str, store: &mut ParameterStore, opt: Option<&mut Adam>) -> Result<()> {
    c.restore_store(prefix, store)?;
    if let Some(opt) = opt {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in store.names() {
            m.push(c.tensor(&format!("adam.{prefix}.m/{name}"))?.clone());
            v.push(c.tensor(&format!("adam.{prefix}.v/{name}"))?.clone());
        }
        let t = c.blob(&format!("adam.{prefix}.t"))?;
        let t = u64::from_le_bytes(t.try_into().map_err(|_| Error::Integrity("optimizer step count".into()))?);
        opt.set_state(t, m, v)?;
    }
    Ok(())
}

/// Runs `episodes` evaluation episodes with parameters held fixed. The
/// environment and action noise use the evaluation streams of `seed`.
pub fn evaluate_with(
    env_cfg: &EnvConfig,
    agent: &Agent,
    model: Option<&BlockModel>,
    policy: EvalPolicy,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let mut env = Env::new(env_cfg.clone(), stream_rng(seed, Stream::Eval))?;
    let mut rng = stream_rng(seed, Stream::EvalAgent);
    let scale = env.action_scale();
    let mut report = EvalReport { returns: Vec::with_capacity(episodes), successes: 0 };
    for _ in 0..episodes {
        let obs = env.reset();
        let mut ro = Rollout::start(obs, agent, model)?;
        loop {
            let action: Vec<f64> = match policy {
                EvalPolicy::Agent { deterministic } => {
                    agent.select_action(&ro.z, &ro.obs, ro.prev_reward, deterministic, &mut rng)?.0
                }
                EvalPolicy::Random => (0..agent.dims.act_dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
                EvalPolicy::Zero => vec![0.0; agent.dims.act_dim],
            };
            let env_action: Vec<f64> = action.iter().map(|a| a * scale).collect();
            let res = env.step(&env_action)?;
            let done = res.done;
            if matches!(policy, EvalPolicy::Agent { .. }) {
                ro.absorb(agent, model, &action, &res, &mut rng)?;
            } else {
                ro.ret += res.reward;
                ro.success |= res.info.success;
            }
            if done {
                break;
            }
        }
        report.returns.push(ro.ret);
        report.successes += usize::from(ro.success);
    }
    Ok(report)
}
