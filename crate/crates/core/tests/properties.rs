use blockseq::agent::{ReplayMemory, Transition};
use blockseq::env::wrap_angle;
use blockseq::env::EnvKind;
use blockseq::harness::{welch_t_test, Checkpoint, Scale, TrainConfig};
use blockseq::nn::topk_positions;
use blockseq::tensor::softmax_rows;
use blockseq::Tensor;
use proptest::prelude::*;

fn transition(tag: f64, done: bool) -> Transition {
    Transition {
        obs: vec![tag],
        prev_action: vec![0.0],
        prev_reward: 0.0,
        action: vec![0.0],
        reward: tag,
        next_obs: vec![tag],
        terminal: false,
        done,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
        let s = softmax_rows(&Tensor::matrix(rows, cols, data).unwrap()).unwrap();
        for r in 0..rows {
            let row = s.row_slice(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_matches_a_full_sort(values in prop::collection::vec(-5i32..5, 1..40), k_frac in 0.0f64..1.0) {
        let c: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let k = 1 + ((c.len() - 1) as f64 * k_frac) as usize;
        let mut pairs: Vec<(f64, usize)> = c.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
        expect.sort();
        prop_assert_eq!(topk_positions(&c, k).unwrap(), expect);
    }

    #[test]
    fn welch_is_antisymmetric(a in prop::collection::vec(-100.0f64..100.0, 2..8),
                              b in prop::collection::vec(-100.0f64..100.0, 2..8)) {
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        prop_assert!((ab.p + ba.p - 1.0).abs() < 1e-9);
        prop_assert!((ab.t + ba.t).abs() < 1e-9);
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(any::<f64>(), 1..30), blob in prop::collection::vec(any::<u8>(), 0..40)) {
        let mut c = Checkpoint { config: "seed = 1".into(), ..Default::default() };
        c.push_tensor("t", Tensor::matrix(1, values.len(), values.clone()).unwrap());
        c.push_blob("b", blob.clone());
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let got: Vec<u64> = back.tensor("t").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!(back.blob("b").unwrap(), &blob[..]);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn wrapped_angles_stay_in_range(x in -1e4f64..1e4) {
        let w = wrap_angle(x);
        prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
        let turns = (x - w) / (2.0 * std::f64::consts::PI);
        prop_assert!((turns - turns.round()).abs() < 1e-6);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), p_miss in 0.0f64..1.0, gamma in 0.5f64..1.0) {
        let mut cfg = TrainConfig::preset(EnvKind::PendulumMissing, Scale::Desk);
        cfg.seed = seed;
        cfg.env.p_miss = p_miss;
        cfg.agent.gamma = gamma;
        prop_assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn replay_windows_stay_inside_one_episode(lengths in prop::collection::vec(1usize..20, 1..8), t in 1usize..6) {
        let mut m = ReplayMemory::new(1000, t).unwrap();
        for (e, &len) in lengths.iter().enumerate() {
            for s in 0..len {
                m.push(transition(e as f64, s + 1 == len));
            }
        }
        for i in 0..m.num_windows() {
            let w = m.window(i).unwrap();
            prop_assert_eq!(w.steps.len(), t);
            let tag = w.steps[0].obs[0];
            prop_assert!(w.steps.iter().all(|s| s.obs[0] == tag));
            prop_assert!(w.valid >= 1 && w.valid <= t);
        }
        let expected: usize = lengths.iter().map(|&l| if l >= t { l - t + 1 } else { 1 }).sum();
        prop_assert_eq!(m.num_windows(), expected);
    }
}
