//! Soft actor-critic agent whose inputs come from a recurrent encoder over
//! embedded step rows and, depending on the mode, the block model's
//! summaries.

mod replay;

pub use replay::{ReplayMemory, Transition, Window};

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{BlockModel, Embedding, ModelMode, StepDims};
use crate::nn::{Activation, GruCell, LstmCell, Mlp};
use crate::tensor::{Adam, AdamConfig, ParameterStore, Tape, Tensor, Var};

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AgentMode {
    /// Block model summaries plus a stepwise GRU.
    #[default]
    Proposed,
    /// Raw observations only.
    Sac,
    /// An LSTM over embedded rows, trained end to end.
    Lstm,
    /// Compressed attention output of the previous block, trained end to end.
    AttentionOnly,
    /// Block model with a feed-forward block encoder instead of attention.
    BlockwiseRnnOnly,
}

impl AgentMode {
    pub fn name(self) -> &'static str {
        match self {
            AgentMode::Proposed => "proposed",
            AgentMode::Sac => "sac",
            AgentMode::Lstm => "lstm",
            AgentMode::AttentionOnly => "attention-only",
            AgentMode::BlockwiseRnnOnly => "blockwise-rnn-only",
        }
    }

    /// The block model variant this agent reads from, if any.
    pub fn model_mode(self) -> Option<ModelMode> {
        match self {
            AgentMode::Proposed => Some(ModelMode::Full),
            AgentMode::AttentionOnly => Some(ModelMode::AttentionOnly),
            AgentMode::BlockwiseRnnOnly => Some(ModelMode::BlockwiseRnnOnly),
            AgentMode::Sac | AgentMode::Lstm => None,
        }
    }

    /// Whether the block model is trained with its own SNIS objective.
    pub fn trains_model(self) -> bool {
        matches!(self, AgentMode::Proposed | AgentMode::BlockwiseRnnOnly)
    }
}

impl fmt::Display for AgentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('_', "-").as_str() {
            "proposed" => AgentMode::Proposed,
            "sac" | "sac-raw" => AgentMode::Sac,
            "lstm" => AgentMode::Lstm,
            "attention-only" => AgentMode::AttentionOnly,
            "blockwise-rnn-only" => AgentMode::BlockwiseRnnOnly,
            other => return Err(Error::config(format!("unknown agent `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub mode: AgentMode,
    /// Width of both hidden layers of every SAC network.
    pub hidden: usize,
    /// Size of the recurrent RL input `z`.
    pub z_dim: usize,
    /// Embedding width of the LSTM baseline.
    pub embed_dim: usize,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Window length `T` sampled from replay.
    pub seq_len: usize,
    /// Windows per update.
    pub batch: usize,
}

impl AgentConfig {
    pub fn paper() -> Self {
        AgentConfig {
            mode: AgentMode::Proposed,
            hidden: 256,
            z_dim: 256,
            embed_dim: 256,
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.2,
            lr: 3e-4,
            seq_len: 64,
            batch: 4,
        }
    }

    /// Reduced widths for CPU-scale runs.
    pub fn desk() -> Self {
        AgentConfig { hidden: 64, z_dim: 64, embed_dim: 64, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.z_dim == 0 || self.embed_dim == 0 {
            return Err(Error::config("agent widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("gamma and tau must lie in [0, 1]"));
        }
        if self.alpha < 0.0 || self.lr <= 0.0 {
            return Err(Error::config("alpha must be nonnegative and lr positive"));
        }
        if self.seq_len == 0 || self.batch == 0 {
            return Err(Error::config("seq_len and batch must be positive"));
        }
        Ok(())
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Recurrent RL-input state; `c` is only used by the LSTM baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ZState {
    pub z: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SacLosses {
    pub actor: f64,
    pub critic: f64,
    pub value: f64,
}

/// Windows and policy noise for one update.
#[derive(Clone, Debug)]
pub struct SacBatch {
    pub windows: Vec<Window>,
    /// `(T * N) x act_dim` standard normal draws, time-major.
    pub eps: Tensor,
    /// Fixed `(q_target, v_target)` replacing the bootstrapped ones.
    pub targets: Option<(Tensor, Tensor)>,
}

/// Recorded losses of one update plus the intermediate targets.
#[derive(Clone, Debug)]
pub struct SacGraph {
    /// Twin-Q regression loss.
    pub critic: Var,
    pub value: Var,
    pub actor: Var,
    /// Q regression targets, one per row.
    pub q_target: Tensor,
    /// Value regression targets, one per row.
    pub v_target: Tensor,
    pub q1_new: Var,
    pub q2_new: Var,
    pub log_pi: Var,
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub dims: StepDims,
    /// Q1, Q2, V and the RL-input encoder.
    pub critic: ParameterStore,
    pub policy: ParameterStore,
    /// Slow copy of the `v.*` entries of `critic`.
    pub target: ParameterStore,
    pub opt_critic: Adam,
    pub opt_policy: Adam,
    ctx_dim: usize,
    embed: Option<Embedding>,
    gru: Option<GruCell>,
    lstm: Option<LstmCell>,
    pi: Mlp,
    q1: Mlp,
    q2: Mlp,
    v: Mlp,
}

impl Agent {
    /// `model` must be present, with the matching mode, for agents that read
    /// from a block model.
    pub fn new<R: Rng + ?Sized>(
        cfg: AgentConfig,
        dims: StepDims,
        model: Option<&BlockModel>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut critic = ParameterStore::new();
        let mut policy = ParameterStore::new();
        let (mut embed, mut gru, mut lstm) = (None, None, None);
        let mut ctx_dim = 0;
        let z_dim = match (cfg.mode.model_mode(), model) {
            (None, _) if cfg.mode == AgentMode::Sac => 0,
            (None, _) => {
                embed = Some(Embedding::new(&mut critic, "z_embed", dims, cfg.embed_dim, cfg.embed_dim, rng)?);
                lstm = Some(LstmCell::new(&mut critic, "z_lstm", cfg.embed_dim, cfg.z_dim, rng)?);
                cfg.z_dim
            }
            (Some(want), Some(m)) if m.cfg.mode == want && m.dims == dims => {
                ctx_dim = if m.has_latent() { 2 * m.cfg.latent_dim } else { m.compressed_dim() };
                gru = Some(GruCell::new(&mut critic, "z_gru", m.cfg.d + ctx_dim, cfg.z_dim, rng)?);
                cfg.z_dim
            }
            (Some(want), _) => {
                return Err(Error::config(format!(
                    "agent `{}` needs a `{}` block model with matching dimensions",
                    cfg.mode,
                    want.name()
                )))
            }
        };
        let s_dim = z_dim + dims.obs_dim + 1;
        let a = dims.act_dim;
        let h = cfg.hidden;
        let pi = Mlp::new(&mut policy, "pi", &[s_dim, h, h, 2 * a], Activation::Relu, rng)?;
        let q1 = Mlp::new(&mut critic, "q1", &[s_dim + a, h, h, 1], Activation::Relu, rng)?;
        let q2 = Mlp::new(&mut critic, "q2", &[s_dim + a, h, h, 1], Activation::Relu, rng)?;
        let v = Mlp::new(&mut critic, "v", &[s_dim, h, h, 1], Activation::Relu, rng)?;
        let mut target = ParameterStore::new();
        for (name, value) in critic.iter() {
            if name.starts_with("v.") {
                target.insert(name, value.clone())?;
            }
        }
        let opt_critic = Adam::new(&critic, AdamConfig::with_lr(cfg.lr));
        let opt_policy = Adam::new(&policy, AdamConfig::with_lr(cfg.lr));
        Ok(Agent { cfg, dims, critic, policy, target, opt_critic, opt_policy, ctx_dim, embed, gru, lstm, pi, q1, q2, v })
    }

    /// Size of `z` (zero for the raw-observation baseline).
    pub fn z_dim(&self) -> usize {
        if self.gru.is_some() || self.lstm.is_some() {
            self.cfg.z_dim
        } else {
            0
        }
    }

    /// Length of the per-step context appended to the embedded row.
    pub fn context_dim(&self) -> usize {
        self.ctx_dim
    }

    pub fn state_dim(&self) -> usize {
        self.z_dim() + self.dims.obs_dim + 1
    }

    /// Episode-start state: `z_0 = 0`.
    pub fn initial_z(&self) -> ZState {
        let n = self.z_dim();
        ZState { z: Tensor::zeros(&[1, n]), c: Tensor::zeros(&[1, n]) }
    }

    /// Folds one new step row `[a; r; o]` into `z`. `ctx` holds `[mu; sigma]`
    /// of the last completed block, or its compressed output in
    /// attention-only mode.
    pub fn step_z(&self, state: &ZState, row: &[f64], ctx: &[f64], model: Option<&BlockModel>) -> Result<ZState> {
        if ctx.len() != self.ctx_dim {
            return Err(Error::shape(format!("context needs {} values, got {}", self.ctx_dim, ctx.len())));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(row));
        let z = tape.constant(state.z.clone());
        if let (Some(embed), Some(lstm)) = (&self.embed, &self.lstm) {
            let e = embed.forward(&mut tape, &self.critic, x)?;
            let xp = lstm.project_input(&mut tape, &self.critic, e)?;
            let c = tape.constant(state.c.clone());
            let (h, c) = lstm.step_projected(&mut tape, &self.critic, xp, z, c)?;
            return Ok(ZState { z: tape.value(h).clone(), c: tape.value(c).clone() });
        }
        let Some(gru) = &self.gru else {
            return Ok(state.clone());
        };
        let model = model.ok_or_else(|| Error::config("this agent needs the block model to step z"))?;
        let e = model.embed(&mut tape, x)?;
        let c = tape.constant(Tensor::row(ctx));
        let input = tape.concat_cols(&[e, c])?;
        let z = gru.step(&mut tape, &self.critic, input, z)?;
        Ok(ZState { z: tape.value(z).clone(), c: state.c.clone() })
    }

    /// `[z; o; r_prev]`.
    pub fn policy_input(&self, z: &ZState, obs: &[f64], r_prev: f64) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.state_dim());
        s.extend_from_slice(z.z.data());
        s.extend_from_slice(obs);
        s.push(r_prev);
        s
    }

    /// Squashed Gaussian sample for each row of `s` given standard normal
    /// noise `eps`. Returns actions in `[-1, 1]` and `n x 1` log-densities.
    pub fn sample_policy(&self, tape: &mut Tape, policy: &ParameterStore, s: Var, eps: &Tensor) -> Result<(Var, Var)> {
        let a_dim = self.dims.act_dim;
        let out = self.pi.forward(tape, policy, s)?;
        let mean = tape.slice_cols(out, 0, a_dim)?;
        let raw = tape.slice_cols(out, a_dim, 2 * a_dim)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let std = tape.exp(log_std);
        let e = tape.constant(eps.clone());
        let noise = tape.mul(std, e)?;
        let u = tape.add(mean, noise)?;
        let action = tape.tanh(u);
        let base = tape.constant(eps.map(|x| -0.5 * x * x - 0.5 * (2.0 * PI).ln()));
        let m2u = tape.scale(u, -2.0);
        let sp = tape.softplus(m2u);
        let u_sp = tape.add(u, sp)?;
        let neg = tape.neg(u_sp);
        let shifted = tape.add_scalar(neg, LN_2);
        let corr = tape.scale(shifted, 2.0);
        let lp = tape.sub(base, log_std)?;
        let lp = tape.sub(lp, corr)?;
        let log_pi = tape.sum_cols(lp)?;
        Ok((action, log_pi))
    }

    /// Normalized action and its log-density. Deterministic mode returns
    /// `tanh` of the mean.
    pub fn select_action(
        &self,
        z: &ZState,
        obs: &[f64],
        r_prev: f64,
        deterministic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(&self.policy_input(z, obs, r_prev)));
        let eps: Vec<f64> = (0..self.dims.act_dim)
            .map(|_| if deterministic { 0.0 } else { rng.sample(StandardNormal) })
            .collect();
        let (a, lp) = self.sample_policy(&mut tape, &self.policy, s, &Tensor::row(&eps))?;
        Ok((tape.value(a).data().to_vec(), tape.value(lp).item()?))
    }

    /// Draws windows and policy noise for one update.
    pub fn sample_batch(&self, memory: &ReplayMemory, rng: &mut ChaCha8Rng) -> Result<SacBatch> {
        if memory.seq_len() != self.cfg.seq_len {
            return Err(Error::config(format!(
                "replay windows are {} long, agent expects {}",
                memory.seq_len(),
                self.cfg.seq_len
            )));
        }
        let windows = memory.sample(self.cfg.batch, rng)?;
        let n = self.cfg.seq_len * self.cfg.batch;
        let eps: Vec<f64> = (0..n * self.dims.act_dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(SacBatch { windows, eps: Tensor::matrix(n, self.dims.act_dim, eps)?, targets: None })
    }

    /// `z_0..z_T` for every window, each `N x z_dim`.
    fn encode_windows(
        &self,
        tape: &mut Tape,
        critic: &ParameterStore,
        windows: &[Window],
        model: Option<&BlockModel>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Var>> {
        let (t_len, n) = (self.cfg.seq_len, windows.len());
        let z_dim = self.z_dim();
        let mut zs = vec![tape.constant(Tensor::zeros(&[n, z_dim]))];
        if z_dim == 0 {
            zs.resize(t_len + 1, zs[0]);
            return Ok(zs);
        }
        let row_tensor = |w: &Window| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = w.steps.iter().map(Transition::row).collect();
            Tensor::from_rows(&rows)
        };
        // Window-major to time-major.
        let perm: Vec<usize> = (0..t_len * n).map(|r| (r % n) * t_len + r / n).collect();

        if let (Some(embed), Some(lstm)) = (&self.embed, &self.lstm) {
            let rows = windows.iter().map(row_tensor).collect::<Result<Vec<_>>>()?;
            let all: Vec<Vec<f64>> = perm
                .iter()
                .map(|&p| rows[p / t_len].row_slice(p % t_len).to_vec())
                .collect();
            let x = tape.constant(Tensor::from_rows(&all)?);
            let e = embed.forward(tape, critic, x)?;
            let xp = lstm.project_input(tape, critic, e)?;
            let mut c = tape.constant(Tensor::zeros(&[n, z_dim]));
            for s in 0..t_len {
                let xs = tape.slice_rows(xp, s * n, (s + 1) * n)?;
                let (h, c2) = lstm.step_projected(tape, critic, xs, zs[s], c)?;
                zs.push(h);
                c = c2;
            }
            return Ok(zs);
        }

        let gru = self.gru.as_ref().ok_or_else(|| Error::config("agent has no z encoder"))?;
        let model = model.ok_or_else(|| Error::config("this agent needs the block model"))?;
        let l = model.cfg.block_len;
        let mut per_window = Vec::with_capacity(n);
        for w in windows {
            let rows = row_tensor(w)?;
            if model.has_latent() {
                let summaries = model.window_summaries(&rows, rng)?;
                let emb = model.embed_values(&rows)?;
                let mut data = Vec::with_capacity(t_len * (model.cfg.d + self.ctx_dim));
                for s in 0..t_len {
                    let st = &summaries[s / l];
                    data.extend_from_slice(emb.row_slice(s));
                    data.extend_from_slice(st.mu.data());
                    data.extend_from_slice(st.sigma.data());
                }
                per_window.push(tape.constant(Tensor::matrix(t_len, model.cfg.d + self.ctx_dim, data)?));
            } else {
                if t_len % l != 0 {
                    return Err(Error::Blockification { len: t_len, block_len: l });
                }
                let x = tape.constant(rows);
                let e = model.embed(tape, x)?;
                let h0 = tape.constant(Tensor::zeros(&[1, model.cfg.rnn_hidden]));
                let mut ctx = vec![tape.constant(Tensor::zeros(&[l, self.ctx_dim]))];
                for b in 0..t_len / l - 1 {
                    let block = tape.slice_rows(e, b * l, (b + 1) * l)?;
                    let summary = model.infer_block(tape, block, h0, rng, true)?;
                    ctx.push(tape.broadcast_rows(summary.yk, l)?);
                }
                let ctx = tape.concat_rows(&ctx)?;
                per_window.push(tape.concat_cols(&[e, ctx])?);
            }
        }
        let stacked = tape.concat_rows(&per_window)?;
        let inputs = tape.gather_rows(stacked, &perm)?;
        let xp = gru.project_input(tape, critic, inputs)?;
        for s in 0..t_len {
            let xs = tape.slice_rows(xp, s * n, (s + 1) * n)?;
            let z = gru.step_projected(tape, critic, xs, zs[s])?;
            zs.push(z);
        }
        Ok(zs)
    }

    /// Records every SAC loss on `tape` against the given parameter stores.
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &self,
        tape: &mut Tape,
        critic: &ParameterStore,
        policy: &ParameterStore,
        batch: &SacBatch,
        model: Option<&BlockModel>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SacGraph> {
        let windows = &batch.windows;
        let (t_len, n) = (self.cfg.seq_len, windows.len());
        if windows.iter().any(|w| w.steps.len() != t_len) {
            return Err(Error::shape(format!("windows must hold {t_len} steps")));
        }
        let rows = t_len * n;
        if batch.eps.shape() != [rows, self.dims.act_dim] {
            return Err(Error::shape(format!("policy noise must be {rows} x {}", self.dims.act_dim)));
        }
        let zs = self.encode_windows(tape, critic, windows, model, rng)?;

        let step = |r: usize| &windows[r % n].steps[r / n];
        let gather = |f: &dyn Fn(&Transition) -> Vec<f64>| -> Result<Tensor> {
            let data: Vec<Vec<f64>> = (0..rows).map(|r| f(step(r))).collect();
            Tensor::from_rows(&data)
        };
        let obs = gather(&|t| t.obs.clone())?;
        let next_obs = gather(&|t| t.next_obs.clone())?;
        let r_prev = gather(&|t| vec![t.prev_reward])?;
        let reward = gather(&|t| vec![t.reward])?;
        let actions = gather(&|t| t.action.clone())?;
        let mask = Tensor::matrix(
            rows,
            1,
            (0..rows).map(|r| if r / n < windows[r % n].valid { 1.0 } else { 0.0 }).collect(),
        )?;
        let valid = mask.sum().max(1.0);

        let z_now = tape.concat_rows(&zs[..t_len])?;
        let z_next = tape.concat_rows(&zs[1..])?;
        let (o, rp) = (tape.constant(obs), tape.constant(r_prev));
        let (o2, r) = (tape.constant(next_obs), tape.constant(reward.clone()));
        let s = self.concat_state(tape, z_now, o, rp)?;
        let s_next = self.concat_state(tape, z_next, o2, r)?;

        let next_sg = tape.stop_gradient(s_next);
        let v_bar = self.v.forward(tape, &self.target, next_sg)?;
        let mut q_target = Tensor::matrix(
            rows,
            1,
            (0..rows)
                .map(|i| {
                    let cont = if step(i).terminal { 0.0 } else { 1.0 };
                    reward.data()[i] + self.cfg.gamma * cont * tape.value(v_bar).data()[i]
                })
                .collect(),
        )?;

        if let Some((q, _)) = &batch.targets {
            q_target = q.clone();
        }
        let a = tape.constant(actions);
        let sa = tape.concat_cols(&[s, a])?;
        let q1 = self.q1.forward(tape, critic, sa)?;
        let q2 = self.q2.forward(tape, critic, sa)?;
        let y = tape.constant(q_target.clone());
        let m = tape.constant(mask.clone());
        let d1 = tape.sub(q1, y)?;
        let d2 = tape.sub(q2, y)?;
        let sq1 = tape.square(d1);
        let sq2 = tape.square(d2);
        let sq = tape.add(sq1, sq2)?;
        let sq = tape.mul(sq, m)?;
        let total = tape.sum(sq);
        let critic_loss = tape.scale(total, 0.5 / valid);

        let s_sg = tape.stop_gradient(s);
        let (a_new, log_pi) = self.sample_policy(tape, policy, s_sg, &batch.eps)?;
        let sa_new = tape.concat_cols(&[s_sg, a_new])?;
        let q1_new = self.q1.forward(tape, critic, sa_new)?;
        let q2_new = self.q2.forward(tape, critic, sa_new)?;
        let q_min = tape.min(q1_new, q2_new)?;

        let alpha = self.cfg.alpha;
        let v_target = match &batch.targets {
            Some((_, v)) => v.clone(),
            None => tape.value(q_min).zip_map(tape.value(log_pi), |q, lp| q - alpha * lp),
        };
        let v = self.v.forward(tape, critic, s)?;
        let vt = tape.constant(v_target.clone());
        let dv = tape.sub(v, vt)?;
        let sqv = tape.square(dv);
        let sqv = tape.mul(sqv, m)?;
        let total_v = tape.sum(sqv);
        let value_loss = tape.scale(total_v, 0.5 / valid);

        let ent = tape.scale(log_pi, alpha);
        let adv = tape.sub(ent, q_min)?;
        let adv = tape.mul(adv, m)?;
        let total_a = tape.sum(adv);
        let actor_loss = tape.scale(total_a, 1.0 / valid);

        Ok(SacGraph {
            critic: critic_loss,
            value: value_loss,
            actor: actor_loss,
            q_target,
            v_target,
            q1_new,
            q2_new,
            log_pi,
            mask,
        })
    }

    fn concat_state(&self, tape: &mut Tape, z: Var, o: Var, r: Var) -> Result<Var> {
        if self.z_dim() == 0 {
            tape.concat_cols(&[o, r])
        } else {
            tape.concat_cols(&[z, o, r])
        }
    }

    /// One SAC step: samples a batch, steps the critic (and, in
    /// attention-only mode, the block encoder) and the policy, then moves
    /// the target value network toward the value network.
    pub fn update(
        &mut self,
        memory: &ReplayMemory,
        model: Option<&mut BlockModel>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SacLosses> {
        let batch = self.sample_batch(memory, rng)?;
        self.update_batch(&batch, model, rng)
    }

    /// [`Agent::update`] on an already sampled batch.
    pub fn update_batch(
        &mut self,
        batch: &SacBatch,
        model: Option<&mut BlockModel>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SacLosses> {
        let end_to_end = self.cfg.mode == AgentMode::AttentionOnly;
        let mut tape = Tape::new();
        let graph = self.record(&mut tape, &self.critic, &self.policy, batch, model.as_deref(), rng)?;
        let losses = SacLosses {
            actor: tape.value(graph.actor).item()?,
            critic: tape.value(graph.critic).item()?,
            value: tape.value(graph.value).item()?,
        };
        if !(losses.actor.is_finite() && losses.critic.is_finite() && losses.value.is_finite()) {
            return Err(Error::NonFinite(format!("agent losses {losses:?}")));
        }
        let critic_total = tape.add(graph.critic, graph.value)?;
        self.critic.zero_grad();
        self.policy.zero_grad();
        match model {
            Some(m) if end_to_end => {
                m.phi.zero_grad();
                tape.backward(critic_total, &mut [&mut self.critic, &mut m.phi])?;
                m.opt_phi.step(&mut m.phi)?;
            }
            _ => tape.backward(critic_total, &mut [&mut self.critic])?,
        }
        tape.backward(graph.actor, &mut [&mut self.policy])?;
        self.opt_critic.step(&mut self.critic)?;
        self.opt_policy.step(&mut self.policy)?;
        self.target.soft_update_from(&self.critic, self.cfg.tau)?;
        if !self.critic.all_finite() || !self.policy.all_finite() {
            return Err(Error::NonFinite("agent parameters after update".into()));
        }
        Ok(losses)
    }
}
