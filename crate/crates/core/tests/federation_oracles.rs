use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use silofl::data::{GeoPoint, Record, SiloDataset};
use silofl::federation::{
    aggregate, epoch_batches, evaluate, run_federation, select_silos, silo_update, Aggregation, EarlyStopping,
    FedConfig, LocalModel, LrSchedule, SiloSplits,
};
use silofl::nncore::{
    backward, forward, init_model, predict, sgd_step, update_running_stats, Mode, ModelSpec, ParameterSet,
};

fn silo(id: &str, n: usize, seed: u64) -> SiloDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let y = 2.0 * x[0] - x[1] + x[2] * x[2] + r.random_range(-0.1..0.1);
            Record { features: x, target: y, year: 2000 }
        })
        .collect();
    SiloDataset::new(id, GeoPoint::new(40.0, -90.0).unwrap(), records).unwrap()
}

fn cfg(rounds: usize, epochs: usize, seed: u64) -> FedConfig {
    FedConfig {
        rounds,
        fraction: 1.0,
        local_epochs: epochs,
        batch_size: 16,
        lr_schedule: LrSchedule::constant(0.05),
        aggregation: Aggregation::Fedavg,
        early_stopping: EarlyStopping { enabled: false, patience: 1 },
        seed,
        checkpoint_dir: None,
    }
}

fn spec() -> ModelSpec {
    ModelSpec::new(3, &[(8, true), (4, true)])
}

#[test]
fn selection_frequency_matches_fraction() {
    let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let draws = 10_000;
    for t in 0..draws {
        let picked = select_silos(&ids, 0.5, t, 77);
        assert_eq!(picked.len(), 2);
        for id in picked {
            *counts.entry(id).or_default() += 1;
        }
    }
    for (id, c) in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "{id}: {f}");
    }
}

#[test]
fn single_silo_update_is_plain_sgd() {
    let s = silo("a", 150, 1);
    let c = cfg(1, 3, 5);
    let start = init_model(&spec(), 2).unwrap();
    let update = silo_update(&start, &s, &c, None, 0).unwrap();
    let mut p = start.clone();
    for epoch in 0..3 {
        for idx in epoch_batches(s.len(), 16, 5, "a", epoch) {
            let b = s.batch(&idx).unwrap();
            let (_, cache) = forward(&p, &b, Mode::Train).unwrap();
            let g = backward(&p, &cache, b.targets()).unwrap();
            update_running_stats(&mut p, &cache).unwrap();
            p = sgd_step(&p, &g, 0.05).unwrap();
        }
    }
    for (a, b) in update.params.entries.iter().zip(&p.entries) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-12, "{}: {x} vs {y}", a.name);
        }
    }
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let start = init_model(&spec(), 2).unwrap();
    let update = silo_update(&start, &silo("a", 50, 1), &cfg(1, 0, 5), None, 0).unwrap();
    assert_eq!(update.params, start);
}

#[test]
fn more_local_epochs_lower_training_loss() {
    let mut one = Vec::new();
    let mut many = Vec::new();
    for seed in 0..5 {
        let s = silo("a", 300, seed);
        let start = init_model(&spec(), seed).unwrap();
        let full = s.to_batch().unwrap();
        let loss = |p: &ParameterSet| {
            let preds = predict(p, full.features(), 3).unwrap();
            silofl::nncore::loss_mse(&preds, full.targets()).unwrap()
        };
        one.push(loss(&silo_update(&start, &s, &cfg(1, 1, seed), None, 0).unwrap().params));
        many.push(loss(&silo_update(&start, &s, &cfg(1, 5, seed), None, 0).unwrap().params));
    }
    assert!(silofl::harness::median(&many) <= silofl::harness::median(&one), "{many:?} vs {one:?}");
}

#[test]
fn aggregation_is_affine_equivariant() {
    // averaging commutes with x -> a·x + c applied to every coordinate
    let (a, c) = (1.7, -0.3);
    let base = init_model(&spec(), 0).unwrap();
    let locals: Vec<LocalModel> = (0..3)
        .map(|k| LocalModel { silo_id: format!("s{k}"), params: init_model(&spec(), k + 10).unwrap(), n: 10 + 7 * k as usize })
        .collect();
    let map = |p: &ParameterSet| {
        let mut q = p.clone();
        q.entries.iter_mut().for_each(|e| e.data.iter_mut().for_each(|v| *v = a * *v + c));
        q
    };
    let mapped: Vec<LocalModel> = locals.iter().map(|l| LocalModel { params: map(&l.params), ..l.clone() }).collect();
    let (g, _) = aggregate(&locals, Aggregation::Fedavg, &base).unwrap();
    let (gm, _) = aggregate(&mapped, Aggregation::Fedavg, &base).unwrap();
    for (x, y) in map(&g).entries.iter().zip(&gm.entries) {
        for (u, v) in x.data.iter().zip(&y.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn no_rounds_returns_the_initial_model() {
    let splits = vec![SiloSplits { train: silo("a", 40, 1), val: silo("a", 10, 2) }];
    let res = run_federation(&splits, &spec(), &cfg(0, 1, 3), None).unwrap();
    assert_eq!(res.global, init_model(&spec(), 3).unwrap());
    assert!(res.history.is_empty());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let splits: Vec<SiloSplits> = (0..5)
        .map(|k| SiloSplits { train: silo(&format!("s{k}"), 80 + 10 * k, k as u64), val: silo(&format!("s{k}"), 20, 50 + k as u64) })
        .collect();
    let mut c = cfg(6, 2, 9);
    c.fraction = 0.6;
    c.aggregation = Aggregation::Fedbn;
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_federation(&splits, &spec(), &c, None).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.global, b.global);
    assert_eq!(a.per_silo_bn, b.per_silo_bn);
    assert_eq!(a.history, b.history);
}

#[test]
fn evaluation_matches_recomputed_rmse() {
    let splits = vec![SiloSplits { train: silo("a", 120, 1), val: silo("a", 30, 2) }];
    let res = run_federation(&splits, &spec(), &cfg(3, 1, 4), None).unwrap();
    let test = silo("a", 60, 3);
    let ev = evaluate(&res.global, &res.per_silo_bn, &test, Aggregation::Fedavg).unwrap();
    let preds = predict(&res.global, &test.feature_matrix(), 3).unwrap();
    let mut sse = 0.0;
    for (p, r) in preds.iter().zip(&test.records) {
        sse += (p - r.target) * (p - r.target);
    }
    let rmse = (sse / preds.len() as f64).sqrt();
    assert!((ev.rmse - rmse).abs() <= 1e-12);
}
