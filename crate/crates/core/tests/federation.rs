use std::io::Write;

use fedopt_core::agent::ActionStrategy;
use fedopt_core::aggregation::Strategy;
use fedopt_core::nn::{proximal_cross_entropy, Mlp, ParamVector};
use fedopt_core::orchestrator::{run_federated, sample_clients, DataConfig, ExperimentConfig, ModelConfig, RoundRecord};
use fedopt_core::records::{from_jsonl, to_jsonl};
use fedopt_core::seed;
use ndarray::Array2;
use rand::Rng;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        clients: 5,
        rounds: 6,
        data: DataConfig {
            classes: 3,
            samples_per_class: 60,
            dim: 5,
            ..Default::default()
        },
        model: ModelConfig { hidden: vec![10] },
        ..Default::default()
    }
}

#[test]
fn test_sampling_inclusion_frequency() {
    let mut rng = seed::rng(11, &[]);
    let draws = 10_000;
    let mut hits = [0usize; 8];
    for _ in 0..draws {
        let s = sample_clients(8, 0.5, &mut rng);
        assert_eq!(s.len(), 4);
        for k in s {
            hits[k] += 1;
        }
    }
    for h in hits {
        let freq = h as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "inclusion frequency {freq}");
    }
}

#[test]
fn test_samples_used_never_exceed_train_size() {
    for strategy in [ActionStrategy::Normalized, ActionStrategy::WeightedMetric] {
        let out = run_federated(&ExperimentConfig { action_strategy: strategy, ..small() }).unwrap();
        for r in &out.rounds {
            for c in &r.clients {
                assert!(c.samples_used <= c.train_size);
            }
            let o = r.optimized.as_ref().unwrap();
            assert_eq!(o.samples_used, r.clients[0].samples_used);
        }
    }
}

#[test]
fn test_ablation_uses_full_split() {
    let out = run_federated(&ExperimentConfig { naive_all: true, ..small() }).unwrap();
    for r in &out.rounds {
        for c in &r.clients {
            assert_eq!(c.samples_used, c.train_size);
        }
    }
}

#[test]
fn test_round_records_survive_jsonl() {
    let out = run_federated(&ExperimentConfig { aggregation: Strategy::FedCda, ..small() }).unwrap();
    let text = to_jsonl(&out.rounds).unwrap();
    assert_eq!(text.lines().count(), 6);
    let back: Vec<RoundRecord> = from_jsonl(&text).unwrap();
    assert_eq!(back, out.rounds);
}

#[test]
fn test_csv_dataset_drives_a_run() {
    let mut rng = seed::rng(3, &[]);
    let mut file = tempfile::NamedTempFile::new().unwrap();
    for i in 0..120 {
        let label = i % 3;
        let a = label as f64 * 4.0 + rng.random_range(-1.0..1.0);
        let b = rng.random_range(-1.0..1.0);
        writeln!(file, "{a},{b},{label}").unwrap();
    }
    file.flush().unwrap();
    let cfg = ExperimentConfig {
        clients: 3,
        rounds: 3,
        data: DataConfig {
            csv: Some(file.path().to_path_buf()),
            ..Default::default()
        },
        ..small()
    };
    let out = run_federated(&cfg).unwrap();
    assert_eq!(out.arch.first(), Some(&2));
    assert_eq!(out.arch.last(), Some(&3));
}

#[test]
fn test_fedprox_gradient_matches_finite_differences() {
    let arch = [3, 5, 2];
    let model = Mlp::new(&arch, 4).unwrap();
    let global = ParamVector(model.params().0.iter().map(|p| p + 0.3).collect());
    let mut rng = seed::rng(4, &[]);
    let x = Array2::from_shape_simple_fn((6, 3), || rng.random_range(-1.0..1.0));
    let y = vec![0, 1, 1, 0, 1, 0];
    let mu = 0.7;
    let loss = |p: &ParamVector| {
        let m = Mlp::from_params(&arch, p).unwrap();
        proximal_cross_entropy(m.logits(x.view()).unwrap().view(), &y, p, &global, mu).unwrap().0
    };
    let (logits, cache) = model.forward(x.view()).unwrap();
    let (_, d_logits, extra) = proximal_cross_entropy(logits.view(), &y, &model.params(), &global, mu).unwrap();
    let mut grads = model.backward(&cache, d_logits.view()).unwrap();
    grads.add_assign(&extra).unwrap();
    let p = model.params();
    for i in 0..p.len() {
        let (mut hi, mut lo) = (p.clone(), p.clone());
        hi.0[i] += 1e-5;
        lo.0[i] -= 1e-5;
        let numeric = (loss(&hi) - loss(&lo)) / 2e-5;
        assert!((numeric - grads.0[i]).abs() < 1e-6, "param {i}: {numeric} vs {}", grads.0[i]);
    }
}
