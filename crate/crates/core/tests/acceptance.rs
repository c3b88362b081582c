//! End-to-end acceptance criteria. Every test prints one `PASS`/`FAIL`
//! line (uncaptured) before asserting.

use std::io::Write;
use std::time::{Duration, Instant};

use blockseq::agent::AgentMode;
use blockseq::env::{reward_map, Env, EnvConfig, EnvKind, MountainHike};
use blockseq::harness::diagnostics::{self, Proposal};
use blockseq::harness::{
    welch_t_test, Checkpoint, EvalPolicy, LogRow, RowKind, Scale, TrainConfig, Trainer,
};
use blockseq::nn::{compress_topk, stack_forward, AttentionLayer, Compression, Compressor};
use blockseq::rng::{stream_rng, Stream};
use blockseq::{ParameterStore, Tape, Tensor};
use rand::Rng;

fn report(criterion: &str, pass: bool, detail: &str) {
    let line = format!("[acceptance] {} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn within(started: Instant, limit: Duration) -> bool {
    started.elapsed() < limit
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn generative_gradient_consistency() {
    let started = Instant::now();
    let lines = diagnostics::generative_consistency(&[10, 100, 1000, 10_000], 20, Proposal::MISMATCHED).unwrap();
    let errs: Vec<f64> = lines.iter().map(|l| l.median_rel_error).collect();
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let pass = monotone && errs[3] < 0.02 && within(started, Duration::from_secs(60));
    let detail = format!(
        "median relative error {:?} at K_sp 10..1e4 (need < 0.02 at 1e4, decreasing), {:.1}s",
        errs.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>(),
        started.elapsed().as_secs_f64()
    );
    report("SNIS generative-gradient consistency", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn inference_gradient_stationarity() {
    let started = Instant::now();
    let r = diagnostics::inference_stationarity(10_000, 10, 0).unwrap();
    let pass = r.mean_norm() < 3.0 * r.se_norm() && within(started, Duration::from_secs(60));
    let detail = format!(
        "|mean| {:.3e} vs 3 SE {:.3e} over 1e4 batches, {:.1}s",
        r.mean_norm(),
        3.0 * r.se_norm(),
        started.elapsed().as_secs_f64()
    );
    report("SNIS inference-gradient stationarity", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn gradient_integrity() {
    let started = Instant::now();
    let lines = diagnostics::gradcheck_suite(0).unwrap();
    let worst = lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    let pass = worst < 1e-4 && lines.len() == 8 && within(started, Duration::from_secs(120));
    let detail = format!(
        "{} networks, worst max relative error {worst:.2e} (step 1e-5), {:.1}s",
        lines.len(),
        started.elapsed().as_secs_f64()
    );
    report("gradient integrity", pass, &detail);
    assert!(pass, "{detail} {lines:?}");
}

fn tiny(kind: EnvKind, mode: AgentMode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::preset(kind, Scale::Desk);
    for (k, v) in [
        ("model.block_len", "8"),
        ("model.d", "16"),
        ("model.latent_dim", "4"),
        ("model.heads", "2"),
        ("model.head_dim", "8"),
        ("model.k_sp", "6"),
        ("agent.hidden", "16"),
        ("agent.z_dim", "8"),
        ("agent.embed_dim", "16"),
        ("schedule.seq_len", "16"),
        ("schedule.batch", "3"),
        ("schedule.i_pre", "60"),
        ("schedule.s_pre", "7"),
        ("schedule.i_rl", "2"),
        ("schedule.i_model", "5"),
        ("schedule.max_steps", "243"),
        ("env.max_steps", "40"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.agent.mode = mode;
    cfg.seed = seed;
    cfg
}

#[test]
fn stop_gradient_boundary() {
    let mut tr = Trainer::new(tiny(EnvKind::PendulumMissing, AgentMode::Proposed, 1)).unwrap();
    tr.run().unwrap();
    let mut rng = stream_rng(2, Stream::Agent);
    let batch = tr.agent.sample_batch(&tr.memory, &mut rng).unwrap();
    let model = tr.model.as_mut().unwrap();
    model.phi.zero_grad();
    model.theta.zero_grad();
    let agent = &mut tr.agent;
    let mut tape = Tape::new();
    let g = agent.record(&mut tape, &agent.critic, &agent.policy, &batch, Some(model), &mut rng).unwrap();
    let a = tape.add(g.critic, g.value).unwrap();
    let total = tape.add(a, g.actor).unwrap();
    tape.backward(total, &mut [&mut agent.critic, &mut agent.policy, &mut model.phi, &mut model.theta]).unwrap();
    let rl_clean = model.phi.grads_all_zero() && model.theta.grads_all_zero();
    let rl_live = !agent.critic.grads_all_zero() && !agent.policy.grads_all_zero();

    agent.critic.zero_grad();
    agent.policy.zero_grad();
    let seqs: Vec<Tensor> = tr
        .memory
        .sample(3, &mut rng)
        .unwrap()
        .iter()
        .map(|w| Tensor::from_rows(&w.steps.iter().map(|s| s.row()).collect::<Vec<_>>()).unwrap())
        .collect();
    model.accumulate_gradients(&seqs, &mut rng).unwrap();
    let model_clean =
        agent.critic.grads_all_zero() && agent.policy.grads_all_zero() && agent.target.grads_all_zero();
    let model_live = !model.phi.grads_all_zero() && !model.theta.grads_all_zero();

    let pass = rl_clean && rl_live && model_clean && model_live;
    let detail = format!(
        "RL loss: theta/phi grads zero = {rl_clean}; model loss: agent grads zero = {model_clean}"
    );
    report("stop-gradient boundary", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn attention_invariants() {
    let mut rng = stream_rng(3, Stream::Init);
    let mut store = ParameterStore::new();
    let layers: Vec<AttentionLayer> =
        (0..2).map(|i| AttentionLayer::new(&mut store, &format!("a{i}"), 16, 4, 0.0, &mut rng).unwrap()).collect();
    let (mut worst_row, mut worst_contrib, mut topk_ok) = (0.0f64, 0.0f64, true);
    for instance in 0..1000 {
        let l = 4 + instance % 29;
        let k = 1 + instance % l;
        let mut tape = Tape::new();
        let b = tape.constant(random(l, 16, &mut rng));
        let out = stack_forward(&mut tape, &store, &layers, b, None).unwrap();
        for w in &out.weights {
            for r in 0..l {
                worst_row = worst_row.max((w.row_slice(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst_contrib = worst_contrib.max((out.contributions.iter().sum::<f64>() - l as f64).abs());

        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&a, &b| out.contributions[b].partial_cmp(&out.contributions[a]).unwrap().then(a.cmp(&b)));
        let mut expect = order[..k].to_vec();
        expect.sort();
        let (sel, picked) = compress_topk(&mut tape, out.y, &out.contributions, k).unwrap();
        let y = tape.value(out.y).clone();
        let want: Vec<f64> = expect.iter().flat_map(|&r| y.row_slice(r).to_vec()).collect();
        topk_ok &= picked == expect && tape.value(sel).data() == &want[..];
    }
    let pass = worst_row < 1e-9 && worst_contrib < 1e-6 && topk_ok;
    let detail = format!(
        "max |row sum - 1| {worst_row:.1e}, max |sum contributions - L| {worst_contrib:.1e}, top-k vs sort on 1000 instances: {topk_ok}"
    );
    report("attention invariants", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn compression_variant_equivalences() {
    let mut rng = stream_rng(4, Stream::Init);
    let (l, d, k) = (8, 6, 3);
    let mut store = ParameterStore::new();
    let layer = AttentionLayer::new(&mut store, "a", d, 2, 0.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let b = tape.constant(random(l, d, &mut rng));
    let out = stack_forward(&mut tape, &store, std::slice::from_ref(&layer), b, None).unwrap();
    let y = tape.value(out.y).clone();
    let mut sample_rng = stream_rng(5, Stream::Model);

    let pool = Compressor::new(&mut store, "p", Compression::Pooling, k, l, d, &mut rng).unwrap();
    let (pv, _) = pool.compress(&mut tape, &store, &out, &mut sample_rng).unwrap();
    let oracle: Vec<f64> = (0..d).map(|c| (0..l).map(|r| y.row_slice(r)[c]).sum()).collect();
    let pooling_ok = tape.value(pv).data().iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-12);

    let avg = Compressor::new(&mut store, "t", Compression::TopKAverage, k, l, d, &mut rng).unwrap();
    let (av, pos) = avg.compress(&mut tape, &store, &out, &mut sample_rng).unwrap();
    let total: f64 = pos.iter().map(|&p| out.contributions[p]).sum();
    let weights: Vec<f64> = pos.iter().map(|&p| out.contributions[p] / total).collect();
    let expect: Vec<f64> = (0..d).map(|c| pos.iter().zip(&weights).map(|(&p, w)| w * y.row_slice(p)[c]).sum()).collect();
    let avg_ok = (weights.iter().sum::<f64>() - 1.0).abs() < 1e-12
        && tape.value(av).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12);

    let mut lin_store = ParameterStore::new();
    let lin = Compressor::new(&mut lin_store, "l", Compression::Linear, 4, l, d, &mut rng).unwrap();
    let (lv, _) = lin.compress(&mut tape, &lin_store, &out, &mut sample_rng).unwrap();
    let linear_ok = lin.output_dim() == 4 * d && tape.value(lv).numel() == 4 * d;

    let all = Compressor::new(&mut store, "r", Compression::Random, l, l, d, &mut rng).unwrap();
    let (rv, rpos) = all.compress(&mut tape, &store, &out, &mut sample_rng).unwrap();
    let random_ok = rpos == (0..l).collect::<Vec<_>>() && tape.value(rv).data() == y.data();

    let pass = pooling_ok && avg_ok && linear_ok && random_ok;
    let detail = format!(
        "pooling = row sum: {pooling_ok}; topk_average weights sum to 1: {avg_ok}; linear dim k*d: {linear_ok}; random k=L keeps all rows: {random_ok}"
    );
    report("compression-variant equivalences", pass, &detail);
    assert!(pass, "{detail}");
}

fn replay(cfg: &EnvConfig, seed: u64, steps: usize) -> Vec<u64> {
    let mut env = Env::new(cfg.clone(), stream_rng(seed, Stream::Env)).unwrap();
    let mut act_rng = stream_rng(seed, Stream::Agent);
    let scale = env.action_scale();
    let mut out: Vec<u64> = env.reset().iter().map(|v| v.to_bits()).collect();
    for _ in 0..steps {
        let a: Vec<f64> = (0..env.act_dim()).map(|_| act_rng.random_range(-1.0..1.0) * scale).collect();
        let r = env.step(&a).unwrap();
        out.extend(r.observation.iter().map(|v| v.to_bits()));
        out.push(r.reward.to_bits());
        if r.done {
            out.extend(env.reset().iter().map(|v| v.to_bits()));
        }
    }
    out
}

#[test]
fn environment_determinism_and_constants() {
    let kinds = [EnvKind::MountainHike, EnvKind::PendulumMissing, EnvKind::SequentialTarget];
    let replay_ok = kinds.iter().all(|&k| {
        let cfg = EnvConfig::new(k);
        replay(&cfg, 7, 500) == replay(&cfg, 7, 500) && replay(&cfg, 7, 500) != replay(&cfg, 8, 500)
    });

    let mh_cfg = EnvConfig::new(EnvKind::MountainHike);
    let mh = MountainHike::new(&mh_cfg);
    let clipped = mh.clip_action(&[1.0, 0.0]);
    let clip_ok = (clipped[0] - 0.1).abs() < 1e-12 && clipped[1] == 0.0 && mh_cfg.c_thres == 0.1;
    let sigma_ok = mh_cfg.sigma_error == 3.0;
    let quiet = EnvConfig { sigma_error: 0.0, transition_var: 0.0, ..mh_cfg };
    let mut env = Env::new(quiet, stream_rng(0, Stream::Env)).unwrap();
    env.reset();
    env.set_state(&[0.0, -8.0]).unwrap();
    let a = [0.06, -0.08];
    let r = env.step(&a).unwrap();
    let expect = reward_map([0.06, -8.08]) - 0.01 * 0.1;
    let penalty_ok = (r.reward - expect).abs() < 1e-12;

    let pend = EnvConfig::new(EnvKind::PendulumMissing);
    let mut env = Env::new(pend, stream_rng(1, Stream::Env)).unwrap();
    env.reset();
    let (mut zeros, mut total) = (0usize, 0usize);
    while total < 100_000 * 3 {
        let r = env.step(&[0.3]).unwrap();
        zeros += r.observation.iter().filter(|v| **v == 0.0).count();
        total += 3;
        if r.done {
            env.reset();
        }
    }
    let rate = zeros as f64 / total as f64;
    let mask_ok = (0.095..=0.105).contains(&rate);

    let seq = EnvConfig { r: 3.0, ..EnvConfig::new(EnvKind::SequentialTarget) };
    let mut env = Env::new(seq, stream_rng(2, Stream::Env)).unwrap();
    let mut act_rng = stream_rng(2, Stream::Agent);
    let allowed = [0.0, 10.0, 40.0, 100.0];
    let mut seen = std::collections::BTreeSet::new();
    let mut returns_ok = true;
    for _ in 0..300 {
        env.reset();
        let mut ret = 0.0;
        loop {
            let a: Vec<f64> = (0..2).map(|_| act_rng.random_range(-1.0..1.0) * env.action_scale()).collect();
            let r = env.step(&a).unwrap();
            ret += r.reward;
            if r.done {
                break;
            }
        }
        returns_ok &= allowed.iter().any(|v| (ret - v).abs() < 1e-9);
        seen.insert(ret as i64);
    }

    let pass = replay_ok && clip_ok && sigma_ok && penalty_ok && mask_ok && returns_ok;
    let detail = format!(
        "seed replay bit-exact: {replay_ok}; clip (1,0) -> {clipped:?}; sigma^2_error 3.0: {sigma_ok}; \
         -0.01|a| penalty: {penalty_ok}; masking rate {rate:.4}; sequential returns {seen:?} within {{0,10,40,100}}: {returns_ok}"
    );
    report("environment determinism and constants", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn algorithm_schedule() {
    let mut all_ok = true;
    let mut detail = String::new();
    for mode in [AgentMode::Proposed, AgentMode::BlockwiseRnnOnly, AgentMode::Sac] {
        let cfg = tiny(EnvKind::MountainHike, mode, 5);
        let s = cfg.schedule.clone();
        let mut tr = Trainer::new(cfg).unwrap();
        let mut fired_at = Vec::new();
        let mut before = 0;
        while tr.step().unwrap() {
            let now = tr.counts().model;
            if now - before > 1 {
                fired_at.push((tr.global_step(), now - before));
            }
            before = now;
        }
        let c = tr.counts();
        let pretrain_ok = if mode.trains_model() {
            fired_at == vec![(s.i_pre + 1, s.s_pre)]
                && tr.rows().iter().filter(|r| r.kind == RowKind::Pretrain).count() == 1
        } else {
            fired_at.is_empty() && c.pretrain_step.is_none()
        };
        let model_ok = c.model == if mode.trains_model() { s.expected_model_updates() } else { 0 };
        let rl_ok = c.rl + c.rl_skipped == s.expected_rl_updates();
        all_ok &= pretrain_ok && model_ok && rl_ok;
        detail += &format!(
            "{}: pretrain {:?}, model {} (closed form {}), rl {}+{} skipped (closed form {}); ",
            mode.name(),
            fired_at,
            c.model,
            if mode.trains_model() { s.expected_model_updates() } else { 0 },
            c.rl,
            c.rl_skipped,
            s.expected_rl_updates()
        );
    }
    report("training schedule", all_ok, detail.trim_end_matches("; "));
    assert!(all_ok, "{detail}");
}

#[test]
fn welch_reference_values() {
    let cases: [(&[f64], &[f64], f64); 5] = [
        (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], 0.8267032464563329),
        (&[10.5, 12.1, 9.8, 11.4, 13.0], &[8.2, 9.9, 10.1, 7.5, 9.0], 0.00627716050456427),
        (
            &[-300.2, -280.5, -350.1, -310.0, -295.7],
            &[-420.3, -390.8, -505.2, -460.0, -399.9],
            0.0008169930030452172,
        ),
        (&[0.1, 0.4, 0.35, 0.2], &[0.3, 0.1, 0.25, 0.15, 0.4, 0.22], 0.38166927146223123),
        (&[5.0, 5.5], &[1.0, 9.0, 3.0, 7.0, 2.0, 8.0], 0.43305173101267863),
    ];
    let worst = cases.iter().map(|(a, b, p)| (welch_t_test(a, b).unwrap().p - p).abs()).fold(0.0, f64::max);
    let same = welch_t_test(&[1.0, 4.0, 2.0], &[1.0, 4.0, 2.0]).unwrap();
    let pass = worst < 1e-6 && same.p == 0.5 && same.t == 0.0;
    let detail = format!("max |p - reference| {worst:.1e} over 5 pairs; identical sets p = {}", same.p);
    report("Welch t-test", pass, &detail);
    assert!(pass, "{detail}");
}

fn csv(rows: &[LogRow]) -> Vec<u8> {
    let mut out = Vec::new();
    blockseq::harness::write_csv(&mut out, rows).unwrap();
    out
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let mut ok = true;
    for mode in [AgentMode::Proposed, AgentMode::Sac, AgentMode::AttentionOnly] {
        let cfg = tiny(EnvKind::SequentialTarget, mode, 9);
        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.run().unwrap();
        let mut part = Trainer::new(cfg).unwrap();
        part.run_episodes(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        part.checkpoint().unwrap().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        ok &= loaded.to_bytes() == bytes;
        let mut resumed = Trainer::from_checkpoint(&loaded).unwrap();
        ok &= resumed.checkpoint().unwrap().to_bytes() == bytes;
        resumed.run().unwrap();
        ok &= csv(resumed.rows()) == csv(full.rows());
        ok &= resumed.checkpoint().unwrap().to_bytes() == full.checkpoint().unwrap().to_bytes();
    }
    let detail = "save -> load -> save byte-identical; resumed runs reproduce the uninterrupted CSV and final checkpoint";
    report("checkpoint round trip and deterministic resume", ok, detail);
    assert!(ok);
}

fn smoke_config(kind: EnvKind, mode: AgentMode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::preset(kind, Scale::Desk);
    cfg.agent.mode = mode;
    cfg.seed = seed;
    cfg
}

#[test]
fn pendulum_learning_smoke() {
    let mut wins = 0;
    let mut detail = String::new();
    for seed in 0..3 {
        let mut finals = Vec::new();
        for mode in [AgentMode::Proposed, AgentMode::Sac] {
            let cfg = smoke_config(EnvKind::PendulumMissing, mode, seed);
            assert_eq!((cfg.env.p_miss, cfg.schedule.max_steps), (0.1, 30_000));
            let mut tr = Trainer::new(cfg).unwrap();
            tr.run().unwrap();
            finals.push(tr.avg_return_100().unwrap());
        }
        wins += usize::from(finals[0] > finals[1]);
        detail += &format!("seed {seed}: proposed {:.1} vs sac {:.1}; ", finals[0], finals[1]);
    }
    let pass = wins >= 2;
    detail += &format!("proposed ahead in {wins} of 3 seeds");
    report("pendulum learning smoke test", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn sequential_task_smoke() {
    let mut gaps = Vec::new();
    let mut detail = String::new();
    for seed in 0..3 {
        let mut cfg = smoke_config(EnvKind::SequentialTarget, AgentMode::Proposed, seed);
        cfg.env.r = 5.0;
        let mut tr = Trainer::new(cfg).unwrap();
        tr.run().unwrap();
        let agent = tr.evaluate(EvalPolicy::Agent { deterministic: true }, 100, 1000 + seed).unwrap();
        let random = tr.evaluate(EvalPolicy::Random, 100, 1000 + seed).unwrap();
        gaps.push(agent.success_rate() - random.success_rate());
        detail += &format!(
            "seed {seed}: proposed {:.0}% vs random {:.0}%; ",
            100.0 * agent.success_rate(),
            100.0 * random.success_rate()
        );
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let pass = mean_gap >= 0.20;
    detail += &format!("mean gap {:.1} percentage points (need >= 20)", 100.0 * mean_gap);
    report("sequential-task smoke test", pass, &detail);
    assert!(pass, "{detail}");
}
