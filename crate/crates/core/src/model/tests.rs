use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

const DIMS: StepDims = StepDims { obs_dim: 3, act_dim: 1 };

fn small_cfg() -> ModelConfig {
    ModelConfig {
        block_len: 4,
        k: 2,
        k_sp: 8,
        d: 8,
        latent_dim: 3,
        heads: 2,
        head_dim: 4,
        depth: 1,
        embed_hidden: 8,
        rnn_hidden: 8,
        head_hidden: 6,
        joint_hidden: 8,
        dropout: 0.0,
        ..ModelConfig::desk()
    }
}

fn model(seed: u64) -> BlockModel {
    BlockModel::new(small_cfg(), DIMS, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn gaussian_rows(t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * DIMS.row_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(t, DIMS.row_dim(), data).unwrap()
}

fn block_losses(m: &BlockModel, seq: &Tensor, seed: u64) -> Vec<(f64, f64)> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gen, inf) = m.record_sequence(&mut tape, seq, &mut rng).unwrap();
    gen.iter()
        .zip(&inf)
        .map(|(&g, &i)| (tape.value(g).item().unwrap(), tape.value(i).item().unwrap()))
        .collect()
}

#[test]
fn length_not_divisible_by_block_is_rejected() {
    let mut m = model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = m.update(&[gaussian_rows(6, 2)], &mut rng).unwrap_err();
    assert!(matches!(err, Error::Blockification { len: 6, block_len: 4 }));
    assert!(m.update(&[gaussian_rows(0, 2)], &mut rng).is_err());
}

#[test]
fn one_block_matches_the_first_block_of_a_longer_sequence() {
    let m = model(3);
    let long = gaussian_rows(12, 4);
    let first = Tensor::matrix(4, DIMS.row_dim(), long.data()[..4 * DIMS.row_dim()].to_vec()).unwrap();
    let single = block_losses(&m, &first, 5);
    let all = block_losses(&m, &long, 5);
    assert_eq!(single.len(), 1);
    assert_eq!(all.len(), 3);
    assert_eq!(single[0], all[0]);
}

#[test]
fn identical_streams_give_identical_deltas() {
    let seqs = [gaussian_rows(8, 6), gaussian_rows(8, 7)];
    let run = || {
        let mut m = model(8);
        let before = m.phi.clone();
        m.update(&seqs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        before
            .iter()
            .zip(m.phi.iter())
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| y - x).collect::<Vec<_>>())
            .collect::<Vec<f64>>()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().any(|d| *d != 0.0));
    assert_eq!(a, b);
}

#[test]
fn loss_trends_down_on_gaussian_data() {
    let mut m = model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut trace = Vec::new();
    for i in 0..500 {
        let seqs = [gaussian_rows(8, 1000 + 2 * i), gaussian_rows(8, 1001 + 2 * i)];
        let l = m.update(&seqs, &mut rng).unwrap();
        trace.push(l.gen_loss + l.inf_loss);
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&trace[..50]), mean(&trace[450..]));
    assert!(tail < head, "first 50 mean {head}, last 50 mean {tail}");
}
