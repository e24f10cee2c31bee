use std::path::Path;

use pama::bench::{read_bench_csv, write_bench_csv};
use pama::checkpoint::Checkpoint;
use pama::config::{AlgorithmName, AnchorName, GranularityName, OptimizerName, RewardSection, RunConfig};
use pama_core::analysis::{BenchMethod, BenchRecord};
use pama_core::autodiff::{Architecture, Init, PolicyBundle};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, (1e-300..1e-3f64), any::<i32>().prop_map(|x| x as f64)]
}

fn reward() -> impl Strategy<Value = RewardSection> {
    prop_oneof![
        (0.1..100.0f64, 0.0..0.5f64, 0.5..2.0f64).prop_map(|(scale, lo, hi)| RewardSection::LengthClip { scale, lo, hi }),
        Just(RewardSection::ClassScore {
            positive: vec![0, 1, 11],
            negative: vec![4, 5]
        }),
        finite().prop_map(|value| RewardSection::Constant { value }),
    ]
}

prop_compose! {
    fn run_config()(
        lr in 1e-9..1.0f64,
        clip in 0.01..0.99f64,
        beta in 0.0..2.0f64,
        lambda in 0.0..=1.0f64,
        seed in 0..i64::MAX as u64,
        batch in 1usize..512,
        rewards in prop::collection::vec(reward(), 1..4),
        raw_weights in prop::collection::vec(0.01..1.0f64, 3),
        use_morlhf in any::<bool>(),
        whiten in any::<bool>(),
        sgd in any::<bool>(),
    ) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.trainer.learning_rate = lr;
        cfg.trainer.clip = clip;
        cfg.trainer.kl_beta = beta;
        cfg.trainer.lambda = lambda;
        cfg.trainer.seed = seed;
        cfg.trainer.batch_size = batch;
        cfg.trainer.whiten = whiten;
        cfg.trainer.optimizer = if sgd { OptimizerName::Sgd } else { OptimizerName::Adam };
        cfg.trainer.granularity = if whiten { GranularityName::BatchMean } else { GranularityName::Token };
        cfg.trainer.ratio_anchor = if sgd { AnchorName::Reference } else { AnchorName::Rollout };
        let n = rewards.len();
        if use_morlhf {
            let w = &raw_weights[..n];
            let total: f64 = w.iter().sum();
            let mut w: Vec<f64> = w.iter().map(|x| x / total).collect();
            let head: f64 = w[..n - 1].iter().sum();
            w[n - 1] = 1.0 - head;
            cfg.trainer.algorithm = AlgorithmName::Morlhf;
            cfg.trainer.fixed_weights = Some(w);
        }
        cfg.rewards = rewards;
        cfg
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn config_round_trip_is_identity(cfg in run_config()) {
        let text = cfg.to_toml();
        let parsed = RunConfig::parse(&text, Path::new("generated.toml"));
        prop_assert!(parsed.is_ok(), "{:?}\n{}", parsed.err(), text);
        let parsed = parsed.unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.to_toml(), text);
    }

    #[test]
    fn bench_csv_round_trip(rows in prop::collection::vec((any::<bool>(), 1usize..100, 1usize..1_000_000, 1e-12..10.0f64), 0..20)) {
        let records: Vec<BenchRecord> = rows
            .into_iter()
            .map(|(cf, n, d, t)| {
                let m = if cf { BenchMethod::ClosedForm } else { BenchMethod::GramPlusQp };
                BenchRecord::new(m, n, d, t)
            })
            .collect();
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &records).unwrap();
        prop_assert_eq!(read_bench_csv(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), heads in 1usize..4, random in any::<bool>()) {
        let init = if random { Init::Random } else { Init::ZeroHeads };
        let bundle = PolicyBundle::new(Architecture::new(12, heads), seed, init).unwrap();
        let ck = Checkpoint::Policy(bundle);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, ck);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let ck = Checkpoint::Theory {
        theta: vec![1.0 / 3.0, -0.0, 1e-310],
    };
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ck.to_bytes());
}

#[test]
fn truncated_payload_is_rejected() {
    let bundle = PolicyBundle::new(Architecture::new(12, 2), 1, Init::Random).unwrap();
    let bytes = Checkpoint::Policy(bundle).to_bytes();
    for cut in [8, 15, 40, bytes.len() - 8] {
        assert!(Checkpoint::from_bytes(&bytes[..cut], Path::new("mem")).is_err(), "cut {cut}");
    }
}
