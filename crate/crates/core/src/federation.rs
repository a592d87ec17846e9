//! Federated averaging across silos.
//!
//! Each round the server samples `m = max(⌈C·K⌉, 1)` silos, every selected
//! silo runs `E` local epochs of minibatch SGD (optionally DP-SGD) starting
//! from the current global model, and the server replaces the global model
//! with the `n_k / n`-weighted average of the returned models.
//!
//! Under FedBN the batch-norm entries never leave the silo in effect: each
//! silo keeps its own copy, which is spliced into the global model before
//! local training and before evaluation. The global model's batch-norm
//! entries still hold the weighted mean and serve as a fallback for silos
//! that never trained.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SiloDataset;
use crate::error::{Error, Result};
use crate::nncore::{
    self, backward, forward, init_model, per_example_gradients_with_predictions, sgd_step_in_place,
    update_running_stats, Mode, ModelSpec, ParamEntry, ParameterSet,
};
use crate::privacy::{self, AccountantState, PrivacySpec};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Fedavg,
    Fedbn,
}

/// Step decay indexed by cumulative local epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_points: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, decay_points: Vec::new(), decay_factor: 1.0 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_points.iter().filter(|&&p| p <= epoch).count();
        self.base * self.decay_factor.powi(decays as i32)
    }

    fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::config("lr_schedule.base", "must be positive"));
        }
        if !self.decay_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("lr_schedule.decay_points", "must be strictly increasing"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("lr_schedule.decay_factor", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub enabled: bool,
    /// Rounds without validation improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self { enabled: true, patience: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub aggregation: Aggregation,
    pub early_stopping: EarlyStopping,
    pub seed: u64,
    /// Write the global model after every round when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 && self.local_epochs == 0 {
            // allowed: nothing to do
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("federation.fraction", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("federation.batch_size", "must be positive"));
        }
        self.lr_schedule.validate()
    }
}

/// Train and validation splits of one silo.
#[derive(Debug, Clone, PartialEq)]
pub struct SiloSplits {
    pub train: SiloDataset,
    pub val: SiloDataset,
}

impl SiloSplits {
    pub fn id(&self) -> &str {
        &self.train.silo_id
    }
}

/// Per-silo privacy settings; silos may override the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyPolicy {
    pub default: PrivacySpec,
    #[serde(default)]
    pub overrides: BTreeMap<String, PrivacySpec>,
}

impl PrivacyPolicy {
    pub fn uniform(spec: PrivacySpec) -> Self {
        Self { default: spec, overrides: BTreeMap::new() }
    }

    pub fn for_silo(&self, silo_id: &str) -> &PrivacySpec {
        self.overrides.get(silo_id).unwrap_or(&self.default)
    }

    pub fn validate(&self) -> Result<()> {
        self.default.validate()?;
        self.overrides.values().try_for_each(PrivacySpec::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<String>,
    /// Final-epoch mean training loss per selected silo; `None` if the silo
    /// could not take a single step.
    pub train_loss: BTreeMap<String, Option<f64>>,
    /// Pooled validation MSE of the aggregated model.
    pub val_loss: Option<f64>,
    /// ε spent so far by every silo (0 without DP).
    pub epsilon: BTreeMap<String, f64>,
    pub dp_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct FederationResult {
    pub global: ParameterSet,
    /// Batch-norm entries kept by each silo (FedBN only).
    pub per_silo_bn: BTreeMap<String, Vec<ParamEntry>>,
    pub history: Vec<RoundRecord>,
    /// Round whose model was returned.
    pub best_round: Option<usize>,
    pub epsilon: BTreeMap<String, f64>,
}

/// `m = max(⌈C·K⌉, 1)` silos sampled without replacement, returned in
/// canonical (sorted) order.
pub fn select_silos(all: &[String], fraction: f64, round: usize, seed: u64) -> Vec<String> {
    let mut ids = all.to_vec();
    ids.sort();
    let k = ids.len();
    // tolerate representation error such as 0.3 * 10 = 3.0000000000000004
    let m = (((fraction * k as f64) - 1e-9).ceil() as usize).clamp(1, k.max(1));
    if m >= k {
        return ids;
    }
    let mut r = rng::substream(seed, &[tag::SELECT, round as u64]);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut r, k, m).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| ids[i].clone()).collect()
}

/// Minibatch index lists for one epoch of one silo.
///
/// The permutation is keyed by `(seed, silo_id, epoch)`. The last partial
/// batch is kept; a trailing batch of one row is merged into the previous
/// batch so train-mode batch norm always sees at least two rows.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, silo_id: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::substream(seed, &[tag::SHUFFLE, rng::hash_str(silo_id), epoch as u64]);
    order.shuffle(&mut r);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// A silo's privacy spec and accountant, carried through a local update.
#[derive(Debug, Clone)]
pub struct DpContext {
    pub spec: PrivacySpec,
    pub accountant: AccountantState,
}

#[derive(Debug, Clone)]
pub struct SiloUpdate {
    pub params: ParameterSet,
    pub train_loss: Option<f64>,
    pub dp_steps: u64,
    pub dp: Option<DpContext>,
}

/// Local training on one silo for `cfg.local_epochs` epochs.
pub fn silo_update(
    global: &ParameterSet,
    train: &SiloDataset,
    cfg: &FedConfig,
    dp: Option<DpContext>,
    round: usize,
) -> Result<SiloUpdate> {
    let mut params = global.clone();
    let mut dp = dp;
    let mut loss = None;
    let mut dp_steps = 0;
    if cfg.local_epochs == 0 {
        return Ok(SiloUpdate { params, train_loss: None, dp_steps, dp });
    }
    if train.is_empty() {
        return Err(Error::EmptyData(format!("silo `{}` has an empty training split", train.silo_id)));
    }
    if dp.is_none() && params.has_bn() && train.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "silo `{}` has fewer than 2 training rows for batch norm",
            train.silo_id
        )));
    }
    let mut noise = rng::substream(cfg.seed, &[tag::NOISE, rng::hash_str(&train.silo_id), round as u64]);
    'epochs: for e in 0..cfg.local_epochs {
        let epoch = round * cfg.local_epochs + e;
        let lr = cfg.lr_schedule.lr_at(epoch);
        let mut sse = 0.0;
        let mut count = 0usize;
        for idx in epoch_batches(train.len(), cfg.batch_size, cfg.seed, &train.silo_id, epoch) {
            let batch = train.batch(&idx)?;
            let (preds, grads) = match dp.as_mut() {
                None => {
                    let (preds, cache) = forward(&params, &batch, Mode::Train)?;
                    let grads = backward(&params, &cache, batch.targets())?;
                    update_running_stats(&mut params, &cache)?;
                    (preds, grads)
                }
                Some(ctx) => {
                    if privacy::next_step_exceeds(&ctx.accountant, &ctx.spec) {
                        if count > 0 {
                            loss = Some(sse / count as f64);
                        }
                        break 'epochs;
                    }
                    let (per_example, preds) = per_example_gradients_with_predictions(&params, &batch)?;
                    let grads = privacy::privatize(&per_example, &ctx.spec, &mut noise)?;
                    ctx.accountant = privacy::account_step(&ctx.accountant);
                    dp_steps += 1;
                    (preds, grads)
                }
            };
            sse += preds.iter().zip(batch.targets()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
            count += preds.len();
            sgd_step_in_place(&mut params, &grads, lr)?;
        }
        let epoch_loss = sse / count as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "silo `{}` round {round} epoch {e}: training loss {epoch_loss} (lr {lr})",
                train.silo_id
            )));
        }
        loss = Some(epoch_loss);
    }
    if let Some(l) = loss {
        if !l.is_finite() {
            return Err(Error::Diverged(format!("silo `{}` round {round}: training loss {l}", train.silo_id)));
        }
    }
    Ok(SiloUpdate { params, train_loss: loss, dp_steps, dp })
}

/// One silo's contribution to aggregation.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub silo_id: String,
    pub params: ParameterSet,
    pub n: usize,
}

/// `n_k / n`-weighted average of the local models, summed in the order given.
///
/// Under FedBN the batch-norm entries of each local model are also returned,
/// keyed by silo, for the caller's per-silo store. With no locals the
/// previous global model is returned unchanged.
pub fn aggregate(
    locals: &[LocalModel],
    mode: Aggregation,
    previous_global: &ParameterSet,
) -> Result<(ParameterSet, BTreeMap<String, Vec<ParamEntry>>)> {
    for l in locals {
        previous_global.check_structure(&l.params)?;
        if l.n == 0 {
            return Err(Error::InvalidInput(format!("silo `{}` reports zero records", l.silo_id)));
        }
    }
    if locals.is_empty() {
        return Ok((previous_global.clone(), BTreeMap::new()));
    }
    let total: usize = locals.iter().map(|l| l.n).sum();
    let mut global = previous_global.clone();
    for (ei, entry) in global.entries.iter_mut().enumerate() {
        entry.data.iter_mut().for_each(|v| *v = 0.0);
        for l in locals {
            let w = l.n as f64 / total as f64;
            for (dst, src) in entry.data.iter_mut().zip(&l.params.entries[ei].data) {
                *dst += w * src;
            }
        }
    }
    let store = match mode {
        Aggregation::Fedavg => BTreeMap::new(),
        Aggregation::Fedbn => locals
            .iter()
            .filter(|l| l.params.has_bn())
            .map(|l| (l.silo_id.clone(), l.params.bn_entries()))
            .collect(),
    };
    Ok((global, store))
}

/// Global model with the silo's own batch-norm entries, if it has any.
pub fn model_for_silo(
    global: &ParameterSet,
    per_silo_bn: &BTreeMap<String, Vec<ParamEntry>>,
    silo_id: &str,
) -> Result<(ParameterSet, bool)> {
    match per_silo_bn.get(silo_id) {
        Some(bn) => {
            let mut p = global.clone();
            p.splice_bn(bn)?;
            Ok((p, true))
        }
        None => Ok((global.clone(), false)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub rmse: f64,
    pub n: usize,
    /// FedBN evaluation of a silo that has no batch-norm state of its own.
    pub used_fallback_bn: bool,
}

pub fn evaluate(
    global: &ParameterSet,
    per_silo_bn: &BTreeMap<String, Vec<ParamEntry>>,
    test: &SiloDataset,
    mode: Aggregation,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyData(format!("silo `{}` has an empty test split", test.silo_id)));
    }
    let (params, own) = match mode {
        Aggregation::Fedbn => model_for_silo(global, per_silo_bn, &test.silo_id)?,
        Aggregation::Fedavg => (global.clone(), false),
    };
    let dim = test.feature_dim().unwrap_or(0);
    let preds = nncore::predict(&params, &test.feature_matrix(), dim)?;
    Ok(Evaluation {
        rmse: nncore::rmse(&preds, &test.targets())?,
        n: test.len(),
        used_fallback_bn: mode == Aggregation::Fedbn && global.has_bn() && !own,
    })
}

/// Pooled validation MSE across silos with a non-empty validation split.
fn pooled_val_loss(
    global: &ParameterSet,
    per_silo_bn: &BTreeMap<String, Vec<ParamEntry>>,
    silos: &[SiloSplits],
    mode: Aggregation,
) -> Result<Option<f64>> {
    let mut sse = 0.0;
    let mut n = 0usize;
    for s in silos.iter().filter(|s| !s.val.is_empty()) {
        let ev = evaluate(global, per_silo_bn, &s.val, mode)?;
        sse += ev.rmse * ev.rmse * ev.n as f64;
        n += ev.n;
    }
    Ok((n > 0).then(|| sse / n as f64))
}

struct Snapshot {
    val: f64,
    round: usize,
    global: ParameterSet,
    per_silo_bn: BTreeMap<String, Vec<ParamEntry>>,
}

/// Runs the full server loop.
///
/// Silo updates within a round run in parallel; results are aggregated in
/// canonical silo order, so the outcome does not depend on the thread count.
pub fn run_federation(
    silos: &[SiloSplits],
    spec: &ModelSpec,
    cfg: &FedConfig,
    dp: Option<&PrivacyPolicy>,
) -> Result<FederationResult> {
    cfg.validate()?;
    if silos.is_empty() {
        return Err(Error::EmptyData("federation needs at least one silo".into()));
    }
    let mut silos = silos.to_vec();
    silos.sort_by(|a, b| a.id().cmp(b.id()));
    let trains: Vec<SiloDataset> = silos.iter().map(|s| s.train.clone()).collect();
    let dim = crate::data::check_federation(&trains)?;
    if dim != spec.input_dim {
        return Err(Error::DimensionMismatch { expected: spec.input_dim, got: dim });
    }
    if let Some(p) = dp {
        p.validate()?;
    }

    let mut global = init_model(spec, cfg.seed)?;
    let mut per_silo_bn: BTreeMap<String, Vec<ParamEntry>> = BTreeMap::new();
    let mut accountants: BTreeMap<String, DpContext> = BTreeMap::new();
    if let Some(policy) = dp {
        for s in &silos {
            let spec = *policy.for_silo(s.id());
            let q = (cfg.batch_size as f64 / s.train.len().max(1) as f64).min(1.0);
            for w in spec.regime_warnings(q) {
                log::debug!("silo `{}`: {w}", s.id());
            }
            accountants.insert(
                s.id().to_owned(),
                DpContext { spec, accountant: AccountantState::new(q, spec.noise_multiplier) },
            );
        }
    }
    let by_id: BTreeMap<&str, &SiloSplits> = silos.iter().map(|s| (s.id(), s)).collect();
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut best: Option<Snapshot> = None;
    let mut since_best = 0usize;

    for t in 0..cfg.rounds {
        let eligible: Vec<String> = silos
            .iter()
            .map(|s| s.id().to_owned())
            .filter(|id| accountants.get(id).is_none_or(|c| !privacy::next_step_exceeds(&c.accountant, &c.spec)))
            .collect();
        if eligible.is_empty() {
            log::info!("round {t}: every silo has exhausted its privacy budget; stopping");
            break;
        }
        let selected = select_silos(&eligible, cfg.fraction, t, cfg.seed);
        let updates: Vec<(String, SiloUpdate)> = selected
            .par_iter()
            .map(|id| {
                let start = match cfg.aggregation {
                    Aggregation::Fedbn => model_for_silo(&global, &per_silo_bn, id)?.0,
                    Aggregation::Fedavg => global.clone(),
                };
                let ctx = accountants.get(id).cloned();
                silo_update(&start, &by_id[id.as_str()].train, cfg, ctx, t).map(|u| (id.clone(), u))
            })
            .collect::<Result<_>>()?;

        let locals: Vec<LocalModel> = updates
            .iter()
            .map(|(id, u)| LocalModel { silo_id: id.clone(), params: u.params.clone(), n: by_id[id.as_str()].train.len() })
            .collect();
        let (next, bn) = aggregate(&locals, cfg.aggregation, &global)?;
        global = next;
        per_silo_bn.extend(bn);

        let mut train_loss = BTreeMap::new();
        for (id, u) in updates {
            train_loss.insert(id.clone(), u.train_loss);
            if let Some(ctx) = u.dp {
                accountants.insert(id, ctx);
            }
        }
        let val_loss = pooled_val_loss(&global, &per_silo_bn, &silos, cfg.aggregation)?;
        let epsilon = epsilon_by_silo(&silos, &accountants)?;
        let dp_steps = silos
            .iter()
            .map(|s| (s.id().to_owned(), accountants.get(s.id()).map_or(0, |c| c.accountant.steps)))
            .collect();
        history.push(RoundRecord { round: t, selected, train_loss, val_loss, epsilon, dp_steps });

        if let Some(dir) = &cfg.checkpoint_dir {
            nncore::write_checkpoint(&dir.join(format!("round_{t:04}.ckpt")), &global)?;
        }

        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|b| v < b.val) {
                best = Some(Snapshot { val: v, round: t, global: global.clone(), per_silo_bn: per_silo_bn.clone() });
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stopping.enabled && since_best >= cfg.early_stopping.patience {
                    log::debug!("early stopping after round {t}");
                    break;
                }
            }
        }
    }

    let epsilon = epsilon_by_silo(&silos, &accountants)?;
    let last_round = history.last().map(|r| r.round);
    match best {
        Some(b) if cfg.early_stopping.enabled => Ok(FederationResult {
            global: b.global,
            per_silo_bn: b.per_silo_bn,
            history,
            best_round: Some(b.round),
            epsilon,
        }),
        _ => Ok(FederationResult { global, per_silo_bn, history, best_round: last_round, epsilon }),
    }
}

fn epsilon_by_silo(silos: &[SiloSplits], accountants: &BTreeMap<String, DpContext>) -> Result<BTreeMap<String, f64>> {
    silos
        .iter()
        .map(|s| {
            let eps = match accountants.get(s.id()) {
                Some(c) => privacy::epsilon(&c.accountant, c.spec.delta)?,
                None => 0.0,
            };
            Ok((s.id().to_owned(), eps))
        })
        .collect()
}

/// Writes one row per (round, silo) of the history.
pub fn write_history_csv(path: &std::path::Path, history: &[RoundRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "silo", "selected", "train_loss", "val_loss", "epsilon", "dp_steps"])?;
    let fmt = |v: Option<f64>| v.map(crate::harness::format_sig).unwrap_or_default();
    for r in history {
        for (silo, eps) in &r.epsilon {
            let loss = r.train_loss.get(silo).copied().flatten();
            w.write_record([
                r.round.to_string(),
                silo.clone(),
                u8::from(r.selected.contains(silo)).to_string(),
                fmt(loss),
                fmt(r.val_loss),
                crate::harness::format_sig(*eps),
                r.dp_steps.get(silo).copied().unwrap_or(0).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
