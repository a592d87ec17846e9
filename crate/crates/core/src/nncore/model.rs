//! Dense + batch-norm + ReLU regressor with hand-written backpropagation.
//!
//! Each hidden layer is `dense -> [batch norm] -> relu`; the network ends in a
//! dense head with a single output. The layer layout is recovered from the
//! entry kinds of the [`ParameterSet`], so a checkpoint is self-describing.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::params::{EntryKind, GradEntry, GradientSet, ParamEntry, ParameterSet};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch statistics in the running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub use_bn: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<HiddenLayer>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: &[(usize, bool)]) -> Self {
        Self {
            input_dim,
            hidden_layers: hidden.iter().map(|&(width, use_bn)| HiddenLayer { width, use_bn }).collect(),
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if let Some(i) = self.hidden_layers.iter().position(|h| h.width == 0) {
            return Err(Error::InvalidSpec(format!("hidden layer {i} has zero width")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics inside batch norm; running statistics may be updated.
    Train,
    /// Running statistics inside batch norm.
    Eval,
}

/// A row-major feature matrix with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, dim: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidBatch("batch must contain at least one row".into()));
        }
        if dim == 0 || features.len() != targets.len() * dim {
            return Err(Error::InvalidBatch(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                targets.len()
            )));
        }
        if !features.iter().chain(&targets).all(|v| v.is_finite()) {
            return Err(Error::InvalidBatch("non-finite value".into()));
        }
        Ok(Self { features, targets, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidBatch("ragged rows".into()));
        }
        Self::new(rows.concat(), targets.to_vec(), dim)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Single-row batch.
    pub fn select(&self, i: usize) -> Batch {
        Batch { features: self.row(i).to_vec(), targets: vec![self.targets[i]], dim: self.dim }
    }
}

/// Entry indices of one dense layer and its optional batch norm.
#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    weight: usize,
    bias: usize,
    /// gain, bias, running mean, running variance
    bn: Option<[usize; 4]>,
    in_dim: usize,
    out_dim: usize,
}

fn layout(params: &ParameterSet) -> Result<Vec<LayerIdx>> {
    let entries = &params.entries;
    let bad = |msg: String| Error::Structure(msg);
    let mut layers = Vec::new();
    let mut i = 0;
    while i < entries.len() {
        let w = &entries[i];
        if w.kind != EntryKind::DenseWeight || w.shape.len() != 2 {
            return Err(bad(format!("expected a dense weight matrix at `{}`", w.name)));
        }
        let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
        let b = entries.get(i + 1).ok_or_else(|| bad(format!("missing bias after `{}`", w.name)))?;
        if b.kind != EntryKind::DenseBias || b.shape != [out_dim] {
            return Err(bad(format!("expected a bias of length {out_dim} at `{}`", b.name)));
        }
        let mut layer = LayerIdx { weight: i, bias: i + 1, bn: None, in_dim, out_dim };
        i += 2;
        if entries.get(i).is_some_and(|e| e.kind == EntryKind::BnGain) {
            let kinds = [EntryKind::BnGain, EntryKind::BnBias, EntryKind::BnRunningMean, EntryKind::BnRunningVar];
            for (k, kind) in kinds.iter().enumerate() {
                let e = entries.get(i + k).ok_or_else(|| bad("truncated batch-norm block".into()))?;
                if e.kind != *kind || e.shape != [out_dim] {
                    return Err(bad(format!("malformed batch-norm entry `{}`", e.name)));
                }
            }
            layer.bn = Some([i, i + 1, i + 2, i + 3]);
            i += 4;
        }
        if let Some(prev) = layers.last() {
            let prev: &LayerIdx = prev;
            if prev.out_dim != in_dim {
                return Err(bad(format!("layer input {in_dim} does not match previous output {}", prev.out_dim)));
            }
        }
        layers.push(layer);
    }
    match layers.last() {
        Some(head) if head.out_dim == 1 && head.bn.is_none() => Ok(layers),
        _ => Err(bad("network must end in a single-output dense head".into())),
    }
}

/// Input feature dimension expected by a parameter set.
pub fn input_dim(params: &ParameterSet) -> Result<usize> {
    Ok(layout(params)?[0].in_dim)
}

pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = rng::substream(seed, &[tag::INIT]);
    let mut entries = Vec::new();
    let mut fan_in = spec.input_dim;
    let mut dense = |name: &str, fan_in: usize, fan_out: usize, entries: &mut Vec<ParamEntry>| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let w = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
        entries.push(ParamEntry::new(format!("{name}.weight"), EntryKind::DenseWeight, vec![fan_out, fan_in], w));
        entries.push(ParamEntry::new(format!("{name}.bias"), EntryKind::DenseBias, vec![fan_out], vec![0.0; fan_out]));
    };
    for (l, h) in spec.hidden_layers.iter().enumerate() {
        dense(&format!("dense{l}"), fan_in, h.width, &mut entries);
        if h.use_bn {
            let w = h.width;
            entries.push(ParamEntry::new(format!("bn{l}.gain"), EntryKind::BnGain, vec![w], vec![1.0; w]));
            entries.push(ParamEntry::new(format!("bn{l}.bias"), EntryKind::BnBias, vec![w], vec![0.0; w]));
            entries.push(ParamEntry::new(format!("bn{l}.running_mean"), EntryKind::BnRunningMean, vec![w], vec![0.0; w]));
            entries.push(ParamEntry::new(format!("bn{l}.running_var"), EntryKind::BnRunningVar, vec![w], vec![1.0; w]));
        }
        fan_in = h.width;
    }
    dense("head", fan_in, 1, &mut entries);
    Ok(ParameterSet::new(entries))
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    /// Biased (1/n) batch variance; only meaningful in train mode.
    batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    bn: Option<BnCache>,
    /// Value fed to the activation (hidden layers only).
    pre_act: Vec<f64>,
}

/// Activations recorded by [`forward`] for use by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    n: usize,
    layers: Vec<LayerCache>,
    predictions: Vec<f64>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }
}

fn dense_forward(x: &[f64], n: usize, w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * out_dim];
    for i in 0..n {
        let row = &x[i * in_dim..(i + 1) * in_dim];
        let dst = &mut out[i * out_dim..(i + 1) * out_dim];
        for (o, d) in dst.iter_mut().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            *d = b[o] + wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

/// Runs the network without touching `params`.
///
/// In [`Mode::Train`] batch norm normalizes with batch statistics, which are
/// recorded in the cache; call [`update_running_stats`] (or use
/// [`forward_train`]) to fold them into the running averages.
pub fn forward(params: &ParameterSet, batch: &Batch, mode: Mode) -> Result<(Vec<f64>, ForwardCache)> {
    let layers = layout(params)?;
    let n = batch.len();
    if batch.dim() != layers[0].in_dim {
        return Err(Error::DimensionMismatch { expected: layers[0].in_dim, got: batch.dim() });
    }
    if mode == Mode::Train && n < 2 && layers.iter().any(|l| l.bn.is_some()) {
        return Err(Error::DegenerateBatch("train-mode batch norm needs at least 2 rows".into()));
    }
    let e = &params.entries;
    let mut x = batch.features().to_vec();
    let mut caches = Vec::with_capacity(layers.len());
    let last = layers.len() - 1;
    for (li, l) in layers.iter().enumerate() {
        let z = dense_forward(&x, n, &e[l.weight].data, &e[l.bias].data, l.in_dim, l.out_dim);
        if li == last {
            caches.push(LayerCache { input: x, bn: None, pre_act: Vec::new() });
            x = z;
            break;
        }
        let d = l.out_dim;
        let (pre_act, bn) = match l.bn {
            None => (z, None),
            Some([gi, bi, mi, vi]) => {
                let (gain, beta) = (&e[gi].data, &e[bi].data);
                let (mean, var) = match mode {
                    Mode::Train => column_moments(&z, n, d),
                    Mode::Eval => (e[mi].data.clone(), e[vi].data.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; n * d];
                let mut y = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        let h = (z[i * d + j] - mean[j]) * inv_std[j];
                        xhat[i * d + j] = h;
                        y[i * d + j] = gain[j] * h + beta[j];
                    }
                }
                (y, Some(BnCache { xhat, inv_std, batch_mean: mean, batch_var: var }))
            }
        };
        let next = pre_act.iter().map(|&v| v.max(0.0)).collect();
        caches.push(LayerCache { input: x, bn, pre_act });
        x = next;
    }
    let predictions = x;
    if !predictions.iter().all(|p| p.is_finite()) {
        return Err(Error::Diverged("non-finite prediction".into()));
    }
    Ok((predictions.clone(), ForwardCache { mode, n, layers: caches, predictions }))
}

fn column_moments(z: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in z.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in z.chunks_exact(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

/// Folds the batch statistics of a train-mode cache into the running averages.
/// The running variance uses the unbiased batch variance.
pub fn update_running_stats(params: &mut ParameterSet, cache: &ForwardCache) -> Result<()> {
    if cache.mode != Mode::Train {
        return Ok(());
    }
    let layers = layout(params)?;
    let n = cache.n as f64;
    for (l, lc) in layers.iter().zip(&cache.layers) {
        let (Some([_, _, mi, vi]), Some(bn)) = (l.bn, &lc.bn) else { continue };
        for (r, m) in params.entries[mi].data.iter_mut().zip(&bn.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in params.entries[vi].data.iter_mut().zip(&bn.batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * n / (n - 1.0);
        }
    }
    Ok(())
}

/// Train-mode forward that also updates the running statistics in place.
pub fn forward_train(params: &mut ParameterSet, batch: &Batch) -> Result<(Vec<f64>, ForwardCache)> {
    let (pred, cache) = forward(params, batch, Mode::Train)?;
    update_running_stats(params, &cache)?;
    Ok((pred, cache))
}

/// Eval-mode predictions for a flat row-major feature matrix.
pub fn predict(params: &ParameterSet, features: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::InvalidBatch("feature matrix is not a whole number of rows".into()));
    }
    let n = features.len() / dim;
    if n == 0 {
        return Ok(Vec::new());
    }
    let batch = Batch::new(features.to_vec(), vec![0.0; n], dim)?;
    forward(params, &batch, Mode::Eval).map(|(p, _)| p)
}

pub fn loss_mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: targets.len(), got: predictions.len() });
    }
    if targets.is_empty() {
        return Err(Error::InvalidInput("loss of an empty batch".into()));
    }
    let sse: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / targets.len() as f64)
}

/// Root of [`loss_mse`].
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    loss_mse(predictions, targets).map(f64::sqrt)
}

/// Analytic gradient of the mean-squared error w.r.t. every trainable tensor.
///
/// The batch-norm convention follows the cache: batch statistics (with their
/// full dependence on every row) for a train-mode cache, fixed running
/// statistics for an eval-mode cache.
pub fn backward(params: &ParameterSet, cache: &ForwardCache, targets: &[f64]) -> Result<GradientSet> {
    let layers = layout(params)?;
    let n = cache.n;
    if targets.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: targets.len() });
    }
    let e = &params.entries;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; e.len()];
    // dL/d(output)
    let mut delta: Vec<f64> =
        cache.predictions.iter().zip(targets).map(|(p, t)| 2.0 * (p - t) / n as f64).collect();
    let last = layers.len() - 1;
    for li in (0..layers.len()).rev() {
        let l = &layers[li];
        let lc = &cache.layers[li];
        let (din, dout) = (l.in_dim, l.out_dim);
        if li != last {
            // through relu
            for (d, &a) in delta.iter_mut().zip(&lc.pre_act) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            if let (Some([gi, bi, _, _]), Some(bn)) = (l.bn, &lc.bn) {
                let gain = &e[gi].data;
                let mut dgain = vec![0.0; dout];
                let mut dbeta = vec![0.0; dout];
                for i in 0..n {
                    for j in 0..dout {
                        let dy = delta[i * dout + j];
                        dgain[j] += dy * bn.xhat[i * dout + j];
                        dbeta[j] += dy;
                    }
                }
                match cache.mode {
                    Mode::Train => {
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..dout {
                                let k = i * dout + j;
                                delta[k] = gain[j] * bn.inv_std[j] / nf
                                    * (nf * delta[k] - dbeta[j] - bn.xhat[k] * dgain[j]);
                            }
                        }
                    }
                    Mode::Eval => {
                        for i in 0..n {
                            for j in 0..dout {
                                delta[i * dout + j] *= gain[j] * bn.inv_std[j];
                            }
                        }
                    }
                }
                grads[gi] = Some(dgain);
                grads[bi] = Some(dbeta);
            }
        }
        let w = &e[l.weight].data;
        let mut dw = vec![0.0; dout * din];
        let mut db = vec![0.0; dout];
        let mut dx = vec![0.0; n * din];
        for i in 0..n {
            let xr = &lc.input[i * din..(i + 1) * din];
            let dxr = &mut dx[i * din..(i + 1) * din];
            for o in 0..dout {
                let d = delta[i * dout + o];
                if d == 0.0 {
                    continue;
                }
                db[o] += d;
                let dwr = &mut dw[o * din..(o + 1) * din];
                let wr = &w[o * din..(o + 1) * din];
                for k in 0..din {
                    dwr[k] += d * xr[k];
                    dxr[k] += d * wr[k];
                }
            }
        }
        grads[l.weight] = Some(dw);
        grads[l.bias] = Some(db);
        delta = dx;
    }
    let entries = e
        .iter()
        .zip(grads)
        .filter(|(p, _)| p.kind.is_trainable())
        .map(|(p, g)| GradEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: g.unwrap_or_else(|| vec![0.0; p.len()]),
        })
        .collect();
    Ok(GradientSet { entries })
}

/// Gradient of each example's own squared error, batch norm evaluated with
/// running statistics so every gradient depends on its example alone.
pub fn per_example_gradients(params: &ParameterSet, batch: &Batch) -> Result<Vec<GradientSet>> {
    per_example_gradients_with_predictions(params, batch).map(|(g, _)| g)
}

pub(crate) fn per_example_gradients_with_predictions(
    params: &ParameterSet,
    batch: &Batch,
) -> Result<(Vec<GradientSet>, Vec<f64>)> {
    let mut grads = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let single = batch.select(i);
        let (p, cache) = forward(params, &single, Mode::Eval)?;
        grads.push(backward(params, &cache, single.targets())?);
        preds.push(p[0]);
    }
    Ok((grads, preds))
}

pub fn sgd_step(params: &ParameterSet, grads: &GradientSet, lr: f64) -> Result<ParameterSet> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut ParameterSet, grads: &GradientSet, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
    }
    let mut g = grads.entries.iter();
    for p in params.entries.iter_mut().filter(|p| p.kind.is_trainable()) {
        let ge = g.next().ok_or_else(|| Error::Structure(format!("no gradient for `{}`", p.name)))?;
        if ge.name != p.name || ge.shape != p.shape {
            return Err(Error::Structure(format!("gradient `{}` does not match parameter `{}`", ge.name, p.name)));
        }
        for (w, d) in p.data.iter_mut().zip(&ge.data) {
            *w -= lr * d;
        }
    }
    if g.next().is_some() {
        return Err(Error::Structure("more gradient entries than trainable parameters".into()));
    }
    Ok(())
}
