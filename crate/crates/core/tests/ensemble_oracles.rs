use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use silofl::data::{FeatureStats, GeoPoint, Record, SiloDataset};
use silofl::ensemble::{
    ensemble_weights, evaluate_ensemble, predict_ensemble, rank_distances, train_local, ModelBundle, RankToWeight,
    RankWeighting, WeightingMode,
};
use silofl::federation::{Aggregation, EarlyStopping, FedConfig, LrSchedule, SiloSplits};
use silofl::nncore::{init_model, predict, rmse, ModelSpec};

const LINEAR: RankWeighting = RankWeighting { mode: WeightingMode::DistanceRank, rank_to_weight: RankToWeight::LinearReversed };

fn spec() -> ModelSpec {
    ModelSpec::new(2, &[(6, true)])
}

fn identity_stats() -> FeatureStats {
    FeatureStats { mean: vec![0.0; 2], std: vec![1.0; 2] }
}

fn random_point(r: &mut ChaCha8Rng) -> GeoPoint {
    GeoPoint::new(r.random_range(-60.0..60.0), r.random_range(-170.0..170.0)).unwrap()
}

fn bundle(id: &str, loc: GeoPoint, seed: u64) -> ModelBundle {
    ModelBundle { silo_id: id.into(), params: init_model(&spec(), seed).unwrap(), train_location: loc, norm_stats: identity_stats() }
}

fn constant(id: &str, loc: GeoPoint, c: f64) -> ModelBundle {
    let mut b = bundle(id, loc, 0);
    b.params.get_mut("head.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    b.params.get_mut("head.bias").unwrap().data[0] = c;
    b
}

fn bundles(r: &mut ChaCha8Rng, k: usize) -> Vec<ModelBundle> {
    (0..k).map(|i| bundle(&format!("s{i:02}"), random_point(r), 100 + i as u64)).collect()
}

/// Haversine written out from scratch with the mean Earth radius.
fn haversine(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let r = 6371.0088;
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((b.lon - a.lon).to_radians() / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().asin()
}

#[test]
fn ranks_follow_great_circle_distance() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let bs = bundles(&mut r, 7);
        let q = random_point(&mut r);
        let mut d: Vec<(f64, String)> = bs.iter().map(|b| (haversine(&q, &b.train_location), b.silo_id.clone())).collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let ranks = rank_distances(&q, &bs);
        for (i, (_, id)) in d.iter().enumerate() {
            assert_eq!(ranks[id], i + 1);
        }
    }
}

#[test]
fn weights_are_normalized_and_decrease_with_rank() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let bs = bundles(&mut r, 6);
    let q = random_point(&mut r);
    let ranks = rank_distances(&q, &bs);
    for w in [RankWeighting::INVERSE_RANK, LINEAR, RankWeighting::UNIFORM] {
        let ws = ensemble_weights(&q, &bs, w);
        assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // bundles are already in id order
        let mut by_rank: Vec<(usize, f64)> = bs.iter().zip(&ws).map(|(b, &x)| (ranks[&b.silo_id], x)).collect();
        by_rank.sort_by_key(|p| p.0);
        assert!(by_rank.windows(2).all(|p| p[0].1 >= p[1].1));
    }
}

#[test]
fn constant_members_give_the_constant() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let bs: Vec<ModelBundle> = (0..5).map(|i| constant(&format!("s{i}"), random_point(&mut r), 2.5)).collect();
    for w in [RankWeighting::INVERSE_RANK, LINEAR, RankWeighting::UNIFORM] {
        let p = predict_ensemble(&[0.3, -1.0], &random_point(&mut r), &bs, w).unwrap();
        assert!((p - 2.5).abs() < 1e-12);
    }
}

#[test]
fn prediction_lies_within_member_range() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let bs = bundles(&mut r, 5);
        let x = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let members: Vec<f64> = bs.iter().map(|b| predict(&b.params, &x, 2).unwrap()[0]).collect();
        let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for w in [RankWeighting::INVERSE_RANK, LINEAR, RankWeighting::UNIFORM] {
            let p = predict_ensemble(&x, &random_point(&mut r), &bs, w).unwrap();
            assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }
}

#[test]
fn member_order_does_not_matter() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let bs = bundles(&mut r, 6);
    let q = random_point(&mut r);
    let mut shuffled = bs.clone();
    shuffled.reverse();
    shuffled.swap(0, 3);
    for w in [RankWeighting::INVERSE_RANK, LINEAR, RankWeighting::UNIFORM] {
        let a = predict_ensemble(&[0.1, 0.2], &q, &bs, w).unwrap();
        let b = predict_ensemble(&[0.1, 0.2], &q, &shuffled, w).unwrap();
        assert_eq!(a, b);
    }
}

fn silo(id: &str, n: usize, seed: u64) -> SiloDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let x = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let y = 3.0 * x[0] - 2.0 * x[1] + 1.0 + r.random_range(-0.2..0.2);
            Record { features: x, target: y, year: 2000 }
        })
        .collect();
    SiloDataset::new(id, GeoPoint::new(10.0, 20.0).unwrap(), records).unwrap()
}

#[test]
fn local_training_beats_the_untrained_model() {
    let cfg = |seed| FedConfig {
        rounds: 20,
        fraction: 1.0,
        local_epochs: 1,
        batch_size: 16,
        lr_schedule: LrSchedule::constant(0.05),
        aggregation: Aggregation::Fedavg,
        early_stopping: EarlyStopping { enabled: true, patience: 5 },
        seed,
        checkpoint_dir: None,
    };
    let (mut trained, mut untrained) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let splits = SiloSplits { train: silo("a", 300, seed), val: silo("a", 60, seed + 10) };
        let test = silo("a", 100, seed + 20);
        let b = train_local(&splits, identity_stats(), &spec(), &cfg(seed), None).unwrap();
        trained.push(evaluate_ensemble(&[b], std::slice::from_ref(&test), RankWeighting::UNIFORM).unwrap()["a"]);
        let p0 = init_model(&spec(), seed).unwrap();
        untrained.push(rmse(&predict(&p0, &test.feature_matrix(), 2).unwrap(), &test.targets()).unwrap());
    }
    assert!(silofl::harness::median(&trained) < silofl::harness::median(&untrained), "{trained:?} vs {untrained:?}");
}
