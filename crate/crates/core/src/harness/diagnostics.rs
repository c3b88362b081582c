//! Numerical self-checks shared by the CLI and the acceptance tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentConfig, AgentMode, ReplayMemory, Transition};
use crate::error::Result;
use crate::model::{BlockModel, Embedding, ModelConfig, ModelMode, OracleModel, StepDims};
use crate::nn::{stack_forward, Activation, AttentionLayer, GruCell, LstmCell, Mlp};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{finite_difference_check, ParameterStore, Tape, Tensor, Var};

pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckLine {
    pub network: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches")
}

/// `sum(c * y)` with a fixed random `c`, so that every output entry matters.
fn project(tape: &mut Tape, y: Var, c: &Tensor) -> Result<Var> {
    let c = tape.constant(c.clone());
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, store: &mut ParameterStore, f: F) -> Result<GradCheckLine>
where
    F: FnMut(&ParameterStore) -> Result<(Tape, Var)>,
{
    let report = finite_difference_check(store, GRADCHECK_STEP, Some(24), f)?;
    Ok(GradCheckLine {
        network: name.to_string(),
        max_rel_error: report.max_rel_error(),
        entries: report.params.iter().map(|p| p.checked).sum(),
    })
}

fn tiny_memory(seed: u64, dims: StepDims, seq_len: usize) -> ReplayMemory {
    let mut rng = stream_rng(seed, Stream::Env);
    let mut m = ReplayMemory::new(10_000, seq_len).expect("valid memory");
    for ep in 0..2 {
        let len = seq_len + 3 + ep;
        let mut prev_a = vec![0.0; dims.act_dim];
        let mut prev_r = 0.0;
        let mut obs: Vec<f64> = (0..dims.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for t in 0..len {
            let action: Vec<f64> = (0..dims.act_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let next: Vec<f64> = (0..dims.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let reward = rng.random_range(-1.0..1.0);
            m.push(Transition {
                obs: obs.clone(),
                prev_action: prev_a,
                prev_reward: prev_r,
                action: action.clone(),
                reward,
                next_obs: next.clone(),
                terminal: false,
                done: t + 1 == len,
            });
            prev_a = action;
            prev_r = reward;
            obs = next;
        }
    }
    m
}

/// Finite-difference checks of every network at small widths.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckLine>> {
    let mut rng = stream_rng(seed, Stream::Init);
    let dims = StepDims { obs_dim: 3, act_dim: 2 };
    let (l, d) = (4, 8);
    let mut lines = Vec::new();

    let mut store = ParameterStore::new();
    let embed = Embedding::new(&mut store, "embed", dims, 6, d, &mut rng)?;
    let x = random(l, dims.row_dim(), &mut rng);
    let c = random(l, d, &mut rng);
    lines.push(check("embedding", &mut store, |st| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = embed.forward(&mut tape, st, xv)?;
        let loss = project(&mut tape, y, &c)?;
        Ok((tape, loss))
    })?);

    let mut store = ParameterStore::new();
    let layers = vec![
        AttentionLayer::new(&mut store, "attn0", d, 2, 0.0, &mut rng)?,
        AttentionLayer::new(&mut store, "attn1", d, 2, 0.0, &mut rng)?,
    ];
    let b = random(l, d, &mut rng);
    let c = random(l, d, &mut rng);
    lines.push(check("attention stack", &mut store, |st| {
        let mut tape = Tape::new();
        let bv = tape.constant(b.clone());
        let out = stack_forward(&mut tape, st, &layers, bv, None)?;
        let loss = project(&mut tape, out.y, &c)?;
        Ok((tape, loss))
    })?);

    let mut store = ParameterStore::new();
    let gru = GruCell::new(&mut store, "block_gru", 2 * d, 6, &mut rng)?;
    let (ys, h0) = (random(3, 2 * d, &mut rng), random(1, 6, &mut rng));
    let c = random(1, 6, &mut rng);
    lines.push(check("blockwise GRU", &mut store, |st| {
        let mut tape = Tape::new();
        let mut h = tape.constant(h0.clone());
        for r in 0..3 {
            let y = tape.constant(Tensor::row(ys.row_slice(r)));
            h = gru.step(&mut tape, st, y, h)?;
        }
        let loss = project(&mut tape, h, &c)?;
        Ok((tape, loss))
    })?);

    let mut store = ParameterStore::new();
    let mu_head = Mlp::new(&mut store, "mu_head", &[6, 5, 3], Activation::Tanh, &mut rng)?;
    let sigma_head = Mlp::new(&mut store, "sigma_head", &[6, 5, 3], Activation::Tanh, &mut rng)?;
    let h = random(1, 6, &mut rng);
    let (c1, c2) = (random(1, 3, &mut rng), random(1, 3, &mut rng));
    lines.push(check("mu/sigma heads", &mut store, |st| {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let mu = mu_head.forward(&mut tape, st, hv)?;
        let raw = sigma_head.forward(&mut tape, st, hv)?;
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, 1e-6);
        let a = project(&mut tape, mu, &c1)?;
        let b = project(&mut tape, sigma, &c2)?;
        let loss = tape.add(a, b)?;
        Ok((tape, loss))
    })?);

    let mut store = ParameterStore::new();
    let joint = Mlp::new(&mut store, "joint", &[2 * d + 3, 7, 1], Activation::Tanh, &mut rng)?;
    let yk = random(1, 2 * d, &mut rng);
    let bs = random(5, 3, &mut rng);
    let w = random(5, 1, &mut rng);
    lines.push(check("log-joint network", &mut store, |st| {
        let mut tape = Tape::new();
        let y = tape.constant(yk.clone());
        let y = tape.broadcast_rows(y, 5)?;
        let bv = tape.constant(bs.clone());
        let input = tape.concat_cols(&[y, bv])?;
        let lp = joint.forward(&mut tape, st, input)?;
        let loss = project(&mut tape, lp, &w)?;
        Ok((tape, loss))
    })?);

    let mut store = ParameterStore::new();
    let lstm = LstmCell::new(&mut store, "z_lstm", d, 6, &mut rng)?;
    let xs = random(3, d, &mut rng);
    let c = random(1, 6, &mut rng);
    lines.push(check("z-LSTM", &mut store, |st| {
        let mut tape = Tape::new();
        let mut h = tape.constant(Tensor::zeros(&[1, 6]));
        let mut cell = tape.constant(Tensor::zeros(&[1, 6]));
        for r in 0..3 {
            let x = tape.constant(Tensor::row(xs.row_slice(r)));
            let xp = lstm.project_input(&mut tape, st, x)?;
            (h, cell) = lstm.step_projected(&mut tape, st, xp, h, cell)?;
        }
        let loss = project(&mut tape, h, &c)?;
        Ok((tape, loss))
    })?);

    let model_cfg = ModelConfig {
        block_len: l,
        k: 2,
        k_sp: 5,
        d,
        latent_dim: 3,
        heads: 2,
        head_dim: 4,
        depth: 1,
        embed_hidden: 6,
        rnn_hidden: 6,
        head_hidden: 5,
        joint_hidden: 6,
        dropout: 0.0,
        mode: ModelMode::Full,
        ..ModelConfig::desk()
    };
    let model = BlockModel::new(model_cfg, dims, &mut rng)?;
    let agent_cfg = AgentConfig {
        mode: AgentMode::Proposed,
        hidden: 6,
        z_dim: 5,
        embed_dim: 6,
        seq_len: 2 * l,
        batch: 2,
        ..AgentConfig::desk()
    };
    let mut agent = Agent::new(agent_cfg, dims, Some(&model), &mut rng)?;
    let memory = tiny_memory(seed, dims, 2 * l);
    let mut batch = agent.sample_batch(&memory, &mut stream_rng(seed, Stream::Agent))?;
    let mut tape = Tape::new();
    let g = agent.record(&mut tape, &agent.critic, &agent.policy, &batch, Some(&model), &mut rng.clone())?;
    batch.targets = Some((g.q_target, g.v_target));
    let (policy, probe) = (agent.policy.clone(), agent.clone());
    lines.push(check("z-GRU, Q1, Q2, V (critic losses)", &mut agent.critic, |st| {
        let mut tape = Tape::new();
        let g = probe.record(&mut tape, st, &policy, &batch, Some(&model), &mut stream_rng(seed, Stream::Model))?;
        let loss = tape.add(g.critic, g.value)?;
        Ok((tape, loss))
    })?);
    let critic = agent.critic.clone();
    lines.push(check("policy (actor loss)", &mut agent.policy, |st| {
        let mut tape = Tape::new();
        let g = probe.record(&mut tape, &critic, st, &batch, Some(&model), &mut stream_rng(seed, Stream::Model))?;
        Ok((tape, g.actor))
    })?);
    Ok(lines)
}

/// Median relative error of the SNIS generative-gradient estimate against
/// the closed form, for each sample count.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyLine {
    pub k_sp: usize,
    pub median_rel_error: f64,
}

/// Proposal used by [`generative_consistency`]: the exact posterior with its
/// mean moved by `shift` and its standard deviations multiplied by `scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub shift: f64,
    pub scale: f64,
}

impl Proposal {
    pub const EXACT: Proposal = Proposal { shift: 0.0, scale: 1.0 };
    pub const MISMATCHED: Proposal = Proposal { shift: 0.25, scale: 1.3 };
}

/// Generative-gradient consistency on the linear-Gaussian oracle.
pub fn generative_consistency(ks: &[usize], seeds: u64, proposal: Proposal) -> Result<Vec<ConsistencyLine>> {
    let oracle = OracleModel::standard();
    let exact = oracle.exact()?;
    let (mean, sd) = oracle.diagonal_posterior()?;
    let q_mu: Vec<f64> = mean.iter().map(|m| m + proposal.shift).collect();
    let q_sigma: Vec<f64> = sd.iter().map(|s| s * proposal.scale).collect();
    let norm = exact.grad.norm();
    let mut out = Vec::new();
    for &k in ks {
        let mut errs = (0..seeds)
            .map(|s| {
                let mut rng = stream_rng(s, Stream::Model);
                let est = oracle.generative_estimate(&q_mu, &q_sigma, k, &mut rng)?;
                Ok((est - &exact.grad).norm() / norm)
            })
            .collect::<Result<Vec<f64>>>()?;
        errs.sort_by(f64::total_cmp);
        let n = errs.len();
        let median = if n % 2 == 1 { errs[n / 2] } else { 0.5 * (errs[n / 2 - 1] + errs[n / 2]) };
        out.push(ConsistencyLine { k_sp: k, median_rel_error: median });
    }
    Ok(out)
}

/// Mean of the inference-gradient estimate over `batches` batches of `k`
/// draws with the proposal set to the exact posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct StationarityReport {
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
}

impl StationarityReport {
    pub fn mean_norm(&self) -> f64 {
        self.mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Norm of the per-coordinate standard errors.
    pub fn se_norm(&self) -> f64 {
        self.standard_error.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn inference_stationarity(batches: usize, k: usize, seed: u64) -> Result<StationarityReport> {
    let oracle = OracleModel::standard();
    let (mean, sd) = oracle.diagonal_posterior()?;
    let mut rng = stream_rng(seed, Stream::Model);
    let mut sum = vec![0.0; 2 * mean.len()];
    let mut sq = vec![0.0; 2 * mean.len()];
    for _ in 0..batches {
        let g = oracle.inference_estimate(&mean, &sd, k, &mut rng)?;
        for (i, v) in g.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = batches as f64;
    let m: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sq.iter().zip(&m).map(|(q, mu)| ((q / n - mu * mu) * n / (n - 1.0)).max(0.0).sqrt() / n.sqrt()).collect();
    Ok(StationarityReport { mean: m, standard_error: se })
}
