//! The blockwise generative model `p_theta` and inference model `q_phi`.
//!
//! Raw step rows `x_t = [a_{t-1}; r_{t-1}; o_t]` are embedded, cut into
//! blocks of `L` rows, compressed by attention (or a per-row network) and
//! folded by a blockwise GRU whose state feeds Gaussian heads for the block
//! latent. The generative side is a scalar energy network on the compressed
//! block and a latent sample.

mod oracle;
mod snis;

pub use oracle::{analytic_oracle, OracleModel, OracleResult};
pub use snis::{
    diag_gaussian_log_density, generative_grad, inference_grad, sample_latents, snis_normalize,
    weighted_surrogate, LatentBatch,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    stack_forward, Activation, AttentionLayer, Compression, Compressor, FnnBlockEncoder, GruCell,
    Linear, Mlp,
};
use crate::tensor::{Adam, AdamConfig, ParameterStore, Tape, Tensor, Var};

const SIGMA_FLOOR: f64 = 1e-6;

/// Which parts of the block pipeline are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModelMode {
    /// Attention, compression, blockwise GRU and Gaussian heads.
    #[default]
    Full,
    /// Attention and compression only; blocks stay disconnected.
    AttentionOnly,
    /// A per-row feed-forward encoder replaces attention.
    BlockwiseRnnOnly,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Full => "full",
            ModelMode::AttentionOnly => "attention_only",
            ModelMode::BlockwiseRnnOnly => "blockwise_rnn_only",
        }
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => ModelMode::Full,
            "attention_only" => ModelMode::AttentionOnly,
            "blockwise_rnn_only" => ModelMode::BlockwiseRnnOnly,
            other => return Err(Error::config(format!("unknown model mode `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Block length `L`.
    pub block_len: usize,
    /// Rows kept by compression.
    pub k: usize,
    /// Latent samples per block.
    pub k_sp: usize,
    /// Embedding width.
    pub d: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Attention layers in the stack.
    pub depth: usize,
    pub embed_hidden: usize,
    /// Blockwise GRU state width.
    pub rnn_hidden: usize,
    /// Hidden width of the mean and scale heads.
    pub head_hidden: usize,
    /// Hidden width of the generative network.
    pub joint_hidden: usize,
    pub dropout: f64,
    pub mode: ModelMode,
    pub compression: Compression,
    pub lr: f64,
}

impl ModelConfig {
    /// Published network sizes.
    pub fn paper() -> Self {
        ModelConfig {
            block_len: 32,
            k: 2,
            k_sp: 50,
            d: 256,
            latent_dim: 64,
            heads: 4,
            head_dim: 64,
            depth: 2,
            embed_hidden: 256,
            rnn_hidden: 256,
            head_hidden: 128,
            joint_hidden: 256,
            dropout: 0.1,
            mode: ModelMode::Full,
            compression: Compression::TopK,
            lr: 8e-4,
        }
    }

    /// Reduced sizes for single-CPU runs.
    pub fn desk() -> Self {
        ModelConfig {
            d: 64,
            latent_dim: 16,
            head_dim: 16,
            k_sp: 20,
            embed_hidden: 64,
            rnn_hidden: 64,
            head_hidden: 32,
            joint_hidden: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self, act_dim: usize) -> Result<()> {
        if self.heads == 0 || self.d != self.heads * self.head_dim {
            return Err(Error::config(format!(
                "d = {} must equal heads ({}) x head_dim ({})",
                self.d, self.heads, self.head_dim
            )));
        }
        if self.k == 0 || self.k > self.block_len {
            return Err(Error::config(format!("k = {} must lie in 1..=L = {}", self.k, self.block_len)));
        }
        if self.k_sp == 0 {
            return Err(Error::config("K_sp must be at least 1"));
        }
        if self.depth == 0 {
            return Err(Error::config("attention stack needs at least one layer"));
        }
        if self.d <= act_dim {
            return Err(Error::config(format!("d = {} must exceed the action dim {act_dim}", self.d)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mode == ModelMode::BlockwiseRnnOnly {
            FnnBlockEncoder::s_fnn_for(self.block_len, self.k, self.d)?;
        }
        Ok(())
    }
}

/// Widths of the raw step row `[a_prev; r_prev; o]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepDims {
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl StepDims {
    pub fn row_dim(self) -> usize {
        self.act_dim + 1 + self.obs_dim
    }

    /// Assembles `[a_prev; r_prev; o]`.
    pub fn row(self, a_prev: &[f64], r_prev: f64, o: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.row_dim());
        x.extend_from_slice(a_prev);
        x.push(r_prev);
        x.extend_from_slice(o);
        x
    }
}

/// `[net([o; r_prev]); a_prev]`, with `net` one tanh hidden layer wide.
#[derive(Clone, Debug)]
pub struct Embedding {
    dims: StepDims,
    hidden: Linear,
    out: Linear,
    pub d: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        dims: StepDims,
        hidden: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d <= dims.act_dim {
            return Err(Error::config(format!("embedding dim {d} must exceed action dim {}", dims.act_dim)));
        }
        let h = Linear::new(store, &format!("{prefix}.hidden"), dims.obs_dim + 1, hidden, rng)?;
        let out = Linear::new(store, &format!("{prefix}.out"), hidden, d - dims.act_dim, rng)?;
        Ok(Embedding { dims, hidden: h, out, d })
    }

    /// Embeds every row of `x` (`n x row_dim`) to `n x d`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let (_, cols) = tape.value(x).dims2()?;
        if cols != self.dims.row_dim() {
            return Err(Error::shape(format!("step rows need {} columns, got {cols}", self.dims.row_dim())));
        }
        let a = tape.slice_cols(x, 0, self.dims.act_dim)?;
        let ro = tape.slice_cols(x, self.dims.act_dim, cols)?;
        let h = self.hidden.forward(tape, store, ro)?;
        let h = tape.tanh(h);
        let e = self.out.forward(tape, store, h)?;
        tape.concat_cols(&[e, a])
    }
}

/// Output of the inference pipeline for one block.
#[derive(Clone, Debug)]
pub struct BlockSummary {
    /// Compressed block `Y^k_n`, `1 x compressed_dim`.
    pub yk: Var,
    /// Blockwise GRU state `h_n`, absent in attention-only mode.
    pub h: Option<Var>,
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
    pub positions: Vec<usize>,
}

/// Surrogate losses from one model update, averaged over sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelLosses {
    pub gen_loss: f64,
    pub inf_loss: f64,
}

/// Block summary values carried across an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryState {
    pub h: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockModel {
    pub cfg: ModelConfig,
    pub dims: StepDims,
    /// Inference parameters: embedding, encoder, blockwise GRU and heads.
    pub phi: ParameterStore,
    /// Generative parameters.
    pub theta: ParameterStore,
    pub opt_phi: Adam,
    pub opt_theta: Adam,
    embedding: Embedding,
    attention: Vec<AttentionLayer>,
    compressor: Option<Compressor>,
    fnn: Option<FnnBlockEncoder>,
    gru: Option<GruCell>,
    mu_head: Option<Mlp>,
    sigma_head: Option<Mlp>,
    joint: Option<Mlp>,
}

impl BlockModel {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, dims: StepDims, rng: &mut R) -> Result<Self> {
        cfg.validate(dims.act_dim)?;
        let mut phi = ParameterStore::new();
        let mut theta = ParameterStore::new();
        let embedding = Embedding::new(&mut phi, "embed", dims, cfg.embed_hidden, cfg.d, rng)?;
        let mut attention = Vec::new();
        let mut compressor = None;
        let mut fnn = None;
        let compressed_dim = match cfg.mode {
            ModelMode::Full | ModelMode::AttentionOnly => {
                for i in 0..cfg.depth {
                    attention.push(AttentionLayer::new(
                        &mut phi,
                        &format!("attn{i}"),
                        cfg.d,
                        cfg.heads,
                        cfg.dropout,
                        rng,
                    )?);
                }
                let c = Compressor::new(&mut phi, "compress", cfg.compression, cfg.k, cfg.block_len, cfg.d, rng)?;
                let dim = c.output_dim();
                compressor = Some(c);
                dim
            }
            ModelMode::BlockwiseRnnOnly => {
                let s_fnn = FnnBlockEncoder::s_fnn_for(cfg.block_len, cfg.k, cfg.d)?;
                fnn = Some(FnnBlockEncoder::new(&mut phi, "fnn", cfg.d, cfg.d, s_fnn, rng)?);
                cfg.block_len * s_fnn
            }
        };
        let (mut gru, mut mu_head, mut sigma_head, mut joint) = (None, None, None, None);
        if cfg.mode != ModelMode::AttentionOnly {
            gru = Some(GruCell::new(&mut phi, "block_gru", compressed_dim, cfg.rnn_hidden, rng)?);
            let head = [cfg.rnn_hidden, cfg.head_hidden, cfg.latent_dim];
            mu_head = Some(Mlp::new(&mut phi, "mu_head", &head, Activation::Tanh, rng)?);
            sigma_head = Some(Mlp::new(&mut phi, "sigma_head", &head, Activation::Tanh, rng)?);
            joint = Some(Mlp::new(
                &mut theta,
                "joint",
                &[compressed_dim + cfg.latent_dim, cfg.joint_hidden, 1],
                Activation::Tanh,
                rng,
            )?);
        }
        let opt_phi = Adam::new(&phi, AdamConfig::with_lr(cfg.lr));
        let opt_theta = Adam::new(&theta, AdamConfig::with_lr(cfg.lr));
        Ok(BlockModel {
            cfg,
            dims,
            phi,
            theta,
            opt_phi,
            opt_theta,
            embedding,
            attention,
            compressor,
            fnn,
            gru,
            mu_head,
            sigma_head,
            joint,
        })
    }

    pub fn compressed_dim(&self) -> usize {
        match (&self.compressor, &self.fnn) {
            (Some(c), _) => c.output_dim(),
            (None, Some(f)) => self.cfg.block_len * f.s_fnn,
            _ => 0,
        }
    }

    pub fn has_latent(&self) -> bool {
        self.gru.is_some()
    }

    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.embedding.forward(tape, &self.phi, x)
    }

    /// `(mu, sigma)` from a blockwise state; `sigma = softplus(.) + 1e-6`.
    pub fn heads(&self, tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
        let (Some(mh), Some(sh)) = (&self.mu_head, &self.sigma_head) else {
            return Err(Error::config("attention-only model has no latent heads"));
        };
        let mu = mh.forward(tape, &self.phi, h)?;
        let raw = sh.forward(tape, &self.phi, h)?;
        let sp = tape.softplus(raw);
        Ok((mu, tape.add_scalar(sp, SIGMA_FLOOR)))
    }

    /// Runs one embedded block (`L x d`) through the inference pipeline.
    /// Dropout is active when `training` is set; `rng` also drives random
    /// compression.
    pub fn infer_block(
        &self,
        tape: &mut Tape,
        block: Var,
        h_prev: Var,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<BlockSummary> {
        let (l, d) = tape.value(block).dims2()?;
        if l != self.cfg.block_len || d != self.cfg.d {
            return Err(Error::shape(format!(
                "block must be {} x {}, got {l} x {d}",
                self.cfg.block_len, self.cfg.d
            )));
        }
        let (yk, positions) = match (&self.compressor, &self.fnn) {
            (Some(c), _) => {
                let dropout = if training { Some(&mut *rng) } else { None };
                let out = stack_forward(tape, &self.phi, &self.attention, block, dropout)?;
                c.compress(tape, &self.phi, &out, rng)?
            }
            (None, Some(f)) => (f.encode(tape, &self.phi, block)?, (0..l).collect()),
            _ => return Err(Error::config("model has no block encoder")),
        };
        let Some(gru) = &self.gru else {
            return Ok(BlockSummary { yk, h: None, mu: None, sigma: None, positions });
        };
        let h = gru.step(tape, &self.phi, yk, h_prev)?;
        let (mu, sigma) = self.heads(tape, h)?;
        Ok(BlockSummary { yk, h: Some(h), mu: Some(mu), sigma: Some(sigma), positions })
    }

    /// Generative log-density for each latent row of `b` (`K x latent`), given
    /// a compressed block `yk` (`1 x compressed_dim`). Returns `K x 1`.
    pub fn log_joint(&self, tape: &mut Tape, yk: Var, b: Var) -> Result<Var> {
        let Some(joint) = &self.joint else {
            return Err(Error::config("attention-only model has no generative network"));
        };
        let k = tape.value(b).rows();
        let y = tape.broadcast_rows(yk, k)?;
        let input = tape.concat_cols(&[y, b])?;
        joint.forward(tape, &self.theta, input)
    }

    /// State at episode start: `h_0 = 0` and the heads evaluated on it.
    pub fn initial_state(&self) -> Result<SummaryState> {
        let h = Tensor::zeros(&[1, self.cfg.rnn_hidden]);
        if !self.has_latent() {
            return Ok(SummaryState { h, mu: Tensor::zeros(&[1, 0]), sigma: Tensor::zeros(&[1, 0]) });
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let (mu, sigma) = self.heads(&mut tape, hv)?;
        Ok(SummaryState { h, mu: tape.value(mu).clone(), sigma: tape.value(sigma).clone() })
    }

    /// Embedding values for raw rows, without recording gradients.
    pub fn embed_values(&self, rows: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(rows.clone());
        let e = self.embed(&mut tape, x)?;
        Ok(tape.value(e).clone())
    }

    /// Folds one completed block of raw rows into the carried summary, in
    /// evaluation mode. Returns the new state and the compressed block.
    pub fn advance(&self, state: &SummaryState, rows: &Tensor, rng: &mut ChaCha8Rng) -> Result<(SummaryState, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(rows.clone());
        let e = self.embed(&mut tape, x)?;
        let h = tape.constant(state.h.clone());
        let s = self.infer_block(&mut tape, e, h, rng, false)?;
        let yk = tape.value(s.yk).clone();
        let next = match (s.h, s.mu, s.sigma) {
            (Some(h), Some(mu), Some(sigma)) => SummaryState {
                h: tape.value(h).clone(),
                mu: tape.value(mu).clone(),
                sigma: tape.value(sigma).clone(),
            },
            _ => state.clone(),
        };
        Ok((next, yk))
    }

    /// Summaries available to each block of a `T`-row window that starts from
    /// `h_0 = 0`: entry `n` is the state after `n` blocks, for `n < N`.
    pub fn window_summaries(&self, rows: &Tensor, rng: &mut ChaCha8Rng) -> Result<Vec<SummaryState>> {
        let l = self.cfg.block_len;
        let t = rows.rows();
        if !t.is_multiple_of(l) {
            return Err(Error::Blockification { len: t, block_len: l });
        }
        let n = t / l;
        let mut states = vec![self.initial_state()?];
        for i in 0..n.saturating_sub(1) {
            let block = Tensor::matrix(l, rows.cols(), rows.data()[i * l * rows.cols()..(i + 1) * l * rows.cols()].to_vec())?;
            let (next, _) = self.advance(&states[i], &block, rng)?;
            states.push(next);
        }
        Ok(states)
    }

    /// Records the SNIS surrogate losses for one sequence of raw rows.
    fn record_sequence(
        &self,
        tape: &mut Tape,
        seq: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let l = self.cfg.block_len;
        let (t, _) = seq.dims2()?;
        if t % l != 0 || t == 0 {
            return Err(Error::Blockification { len: t, block_len: l });
        }
        let x = tape.constant(seq.clone());
        let e = self.embed(tape, x)?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.cfg.rnn_hidden]));
        let (mut gen, mut inf) = (Vec::new(), Vec::new());
        for n in 0..t / l {
            let block = tape.slice_rows(e, n * l, (n + 1) * l)?;
            let s = self.infer_block(tape, block, h, rng, true)?;
            let (Some(hn), Some(mu), Some(sigma)) = (s.h, s.mu, s.sigma) else {
                return Err(Error::config("model updates need the latent heads"));
            };
            let batch = sample_latents(tape.value(mu).data(), tape.value(sigma).data(), self.cfg.k_sp, rng)?;
            let b = tape.constant(batch.samples);
            let mu_k = tape.broadcast_rows(mu, self.cfg.k_sp)?;
            let sigma_k = tape.broadcast_rows(sigma, self.cfg.k_sp)?;
            let log_q = tape.gaussian_log_density(b, mu_k, sigma_k)?;
            let yk = tape.stop_gradient(s.yk);
            let log_p = self.log_joint(tape, yk, b)?;
            let log_w: Vec<f64> = tape
                .value(log_p)
                .data()
                .iter()
                .zip(tape.value(log_q).data())
                .map(|(p, q)| p - q)
                .collect();
            let w = snis_normalize(&log_w)?;
            gen.push(weighted_surrogate(tape, log_p, &w)?);
            inf.push(weighted_surrogate(tape, log_q, &w)?);
            h = hn;
        }
        Ok((gen, inf))
    }

    /// Accumulates the SNIS gradients for a minibatch of raw-row sequences
    /// into `theta` and `phi` (summed over blocks, averaged over sequences)
    /// without stepping the optimizers.
    pub fn accumulate_gradients(&mut self, seqs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<ModelLosses> {
        if seqs.is_empty() {
            return Err(Error::config("model update needs at least one sequence"));
        }
        let mut tape = Tape::new();
        let (mut gen, mut inf) = (Vec::new(), Vec::new());
        for seq in seqs {
            let (g, i) = self.record_sequence(&mut tape, seq, rng)?;
            gen.extend(g);
            inf.extend(i);
        }
        let scale = 1.0 / seqs.len() as f64;
        let gen_total = sum_scalars(&mut tape, &gen)?;
        let inf_total = sum_scalars(&mut tape, &inf)?;
        let gen_loss = tape.scale(gen_total, scale);
        let inf_loss = tape.scale(inf_total, scale);
        let total = tape.add(gen_loss, inf_loss)?;
        let losses = ModelLosses {
            gen_loss: tape.value(gen_loss).item()?,
            inf_loss: tape.value(inf_loss).item()?,
        };
        if !losses.gen_loss.is_finite() || !losses.inf_loss.is_finite() {
            return Err(Error::NonFinite(format!("model losses {losses:?}")));
        }
        tape.backward(total, &mut [&mut self.phi, &mut self.theta])?;
        Ok(losses)
    }

    /// One optimizer step on both parameter sets from a minibatch of
    /// sequences, each `T x row_dim` with `T` a multiple of `L`.
    pub fn update(&mut self, seqs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<ModelLosses> {
        self.phi.zero_grad();
        self.theta.zero_grad();
        let losses = self.accumulate_gradients(seqs, rng)?;
        self.opt_phi.step(&mut self.phi)?;
        self.opt_theta.step(&mut self.theta)?;
        if !self.phi.all_finite() || !self.theta.all_finite() {
            return Err(Error::NonFinite("model parameters after update".into()));
        }
        Ok(losses)
    }
}

fn sum_scalars(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut it = parts.iter();
    let mut acc = *it.next().ok_or_else(|| Error::config("no blocks to sum"))?;
    for &p in it {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests;
