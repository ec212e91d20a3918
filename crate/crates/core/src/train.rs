//! Supervised training on expert demonstrations.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vinlab_tensor::{grad_check, Real, RmsProp, Tape, Tensor, TensorError, Var};

use crate::dataset::{subsample_dataset, Dataset, Sample};
use crate::eval::{prediction_loss, NetworkPolicy};
use crate::models::{argmax_action, ModelWeights, Network};
use crate::rng::{derive_seed, Rng};
use crate::{Error, Result};

/// Tolerance of the pre-training gradient check.
pub const MODEL_GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub seed: u64,
    /// Fraction of training domains kept, in (0, 1].
    pub data_fraction: f64,
    /// Batch shards computed in parallel.
    pub threads: usize,
    /// Reuse one map-level forward pass for all samples of a domain within
    /// a batch.
    pub domain_cache: bool,
    /// Domains whose samples are pooled and shuffled together before being
    /// cut into batches. 1 keeps each domain contiguous (cheapest, since a
    /// map is planned once per batch); larger values mix more maps per batch.
    pub mix_domains: usize,
    /// Gradient-check one small batch at 64-bit before training.
    pub grad_check: bool,
    /// Evaluate the training loss before the first update.
    pub initial_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            lr: 0.002,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-6,
            seed: 0,
            data_fraction: 1.0,
            threads: 1,
            domain_cache: true,
            mix_domains: 1,
            grad_check: true,
            initial_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 || self.mix_domains == 0 {
            return Err(Error::Config(
                "epochs, batch size, threads and domain mixing must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_eps > 0.0) {
            return Err(Error::Config("RMSProp decay must be in [0, 1) and eps positive".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data fraction {} not in (0, 1]",
                self.data_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples, measured before each
    /// batch's update.
    pub train_loss: f64,
    /// Fraction of training samples whose argmax differed from the label.
    pub train_error: f64,
    pub val_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub family: String,
    pub param_count: usize,
    pub train_domains: usize,
    pub train_samples: usize,
    pub initial_loss: Option<f64>,
    pub grad_check_error: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub wall_seconds: f64,
}

/// Gradient, summed loss and correct count of one batch shard.
struct ShardResult<T: Real> {
    grads: Vec<Tensor<T>>,
    loss: f64,
    correct: usize,
}

/// Per-sample cross-entropies recorded on `tape`, planning each domain once
/// when `cache` is set.
fn record_losses<T: Real>(
    tape: &mut Tape<T>,
    net: &Network<'_>,
    images: &[Tensor<T>],
    batch: &[Sample],
    cache: bool,
) -> Result<Vec<(Var, bool)>> {
    let mut plans: HashMap<usize, Var> = HashMap::new();
    let mut out = Vec::with_capacity(batch.len());
    for s in batch {
        let plan = match (cache, plans.get(&s.domain)) {
            (true, Some(&p)) => p,
            _ => {
                let p = net.plan(tape, &images[s.domain])?;
                plans.insert(s.domain, p);
                p
            }
        };
        let logits = net.logits(tape, plan, s.state)?;
        let hit = argmax_action(tape.value(logits)) == s.label;
        out.push((tape.softmax_cross_entropy(logits, s.label.index())?, hit));
    }
    Ok(out)
}

fn shard_grads<T: Real>(
    weights: &ModelWeights<T>,
    images: &[Tensor<T>],
    shard: &[Sample],
    scale: f64,
    cache: bool,
) -> Result<ShardResult<T>> {
    let mut tape = Tape::new();
    let net = weights.bind(&mut tape)?;
    let losses = record_losses(&mut tape, &net, images, shard, cache)?;
    let loss = losses.iter().map(|&(v, _)| tape.value(v).item().as_f64()).sum();
    let correct = losses.iter().filter(|l| l.1).count();
    let terms: Vec<(Var, f64)> = losses.iter().map(|&(v, _)| (v, scale)).collect();
    let root = tape.weighted_sum(&terms)?;
    let grads = tape.backward(root)?.by_param_id(&weights.shapes());
    Ok(ShardResult { grads, loss, correct })
}

/// Splits a batch into at most `threads` contiguous shards without cutting
/// a run of same-domain samples where possible.
fn shards(batch: &[Sample], threads: usize) -> Vec<&[Sample]> {
    if threads <= 1 || batch.len() < 2 {
        return vec![batch];
    }
    let target = batch.len().div_ceil(threads);
    let mut out = Vec::new();
    let mut lo = 0;
    while lo < batch.len() {
        let mut hi = (lo + target).min(batch.len());
        while hi < batch.len() && hi > lo + 1 && batch[hi].domain == batch[hi - 1].domain && hi - lo < 2 * target {
            hi += 1;
        }
        out.push(&batch[lo..hi]);
        lo = hi;
    }
    out
}

/// Mean-loss gradient of one batch, shards reduced in order.
fn batch_grads<T: Real>(
    weights: &ModelWeights<T>,
    images: &[Tensor<T>],
    batch: &[Sample],
    threads: usize,
    cache: bool,
) -> Result<ShardResult<T>> {
    let scale = 1.0 / batch.len() as f64;
    let parts = shards(batch, threads);
    let results: Vec<Result<ShardResult<T>>> = if parts.len() == 1 {
        vec![shard_grads(weights, images, parts[0], scale, cache)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = parts
                .iter()
                .map(|&p| s.spawn(move || shard_grads(weights, images, p, scale, cache)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };
    let mut iter = results.into_iter();
    let mut total = iter.next().expect("at least one shard")?;
    for r in iter {
        let r = r?;
        for (g, h) in total.grads.iter_mut().zip(&r.grads) {
            g.add_assign(h);
        }
        total.loss += r.loss;
        total.correct += r.correct;
    }
    Ok(total)
}

/// Epoch order: domains are shuffled and taken `mix` at a time; the samples
/// of each group are shuffled together and the concatenation is cut into
/// batches. Batches therefore span few domains, which lets one map-level
/// forward pass serve many samples.
pub fn epoch_batches(samples_by_domain: &[Vec<Sample>], batch_size: usize, mix: usize, seed: u64) -> Vec<Vec<Sample>> {
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..samples_by_domain.len()).collect();
    rng.shuffle(&mut order);
    let mut flat = Vec::new();
    for group in order.chunks(mix.max(1)) {
        let mut s: Vec<Sample> = group
            .iter()
            .flat_map(|&d| samples_by_domain[d].iter().copied())
            .collect();
        rng.shuffle(&mut s);
        flat.extend(s);
    }
    flat.chunks(batch_size).map(<[Sample]>::to_vec).collect()
}

/// Mean cross-entropy of `weights` over `samples`, forward only.
pub fn mean_loss<T: Real>(weights: &ModelWeights<T>, ds: &Dataset, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let images: Vec<Tensor<T>> = ds.domains.iter().map(|d| d.map.image()).collect();
    let mut by_domain: HashMap<usize, Vec<Sample>> = HashMap::new();
    for &s in samples {
        by_domain.entry(s.domain).or_default().push(s);
    }
    let mut keys: Vec<usize> = by_domain.keys().copied().collect();
    keys.sort_unstable();
    let mut total = 0.0;
    for d in keys {
        let mut tape = Tape::new();
        let net = weights.bind(&mut tape)?;
        for (v, _) in record_losses(&mut tape, &net, &images, &by_domain[&d], true)? {
            total += tape.value(v).item().as_f64();
        }
    }
    Ok(total / samples.len() as f64)
}

/// Finite-difference check of the full model on a few samples of the first
/// domain, at 64-bit. Large tensors are checked on an evenly spread subset
/// of coordinates.
///
/// Biases get a small random offset first: with zero biases, empty image
/// regions put rectifiers exactly at their kink and make value channels tie,
/// where one-sided derivatives disagree and the check is meaningless.
pub fn check_model_gradients<T: Real>(weights: &ModelWeights<T>, ds: &Dataset, samples: usize) -> Result<f64> {
    check_model_gradients_with_fault(weights, ds, samples, None)
}

/// As [`check_model_gradients`], optionally corrupting convolution kernel
/// gradients as a negative control.
#[doc(hidden)]
pub fn check_model_gradients_with_fault<T: Real>(
    weights: &ModelWeights<T>,
    ds: &Dataset,
    samples: usize,
    conv_fault: Option<f64>,
) -> Result<f64> {
    let mut w64 = weights.cast::<f64>();
    w64.jitter_biases(0.1, 0x6AD);
    let batch: Vec<Sample> = ds.samples().into_iter().take(samples.max(1)).collect();
    if batch.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let images: Vec<Tensor<f64>> = ds.domains.iter().map(|d| d.map.image()).collect();
    let scale = 1.0 / batch.len() as f64;
    let report = grad_check(w64.tensors(), 1e-6, Some(4), |tape, vars| {
        if let Some(f) = conv_fault {
            tape.inject_conv_grad_fault(f);
        }
        let net = Network::new(w64.config(), w64.names(), vars.to_vec());
        let losses = record_losses(tape, &net, &images, &batch, true).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        })?;
        let terms: Vec<(Var, f64)> = losses.iter().map(|&(v, _)| (v, scale)).collect();
        tape.weighted_sum(&terms)
    })?;
    Ok(report.max_rel_error)
}

/// Imitation learning: minibatch RMSProp on the mean softmax cross-entropy
/// against expert labels. `val` (if given) is scored with the 0-1 loss after
/// every epoch. Deterministic given the seed when `threads == 1`.
pub fn train<T: Real>(
    mut weights: ModelWeights<T>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelWeights<T>, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let subset;
    let data = if cfg.data_fraction < 1.0 {
        subset = subsample_dataset(data, cfg.data_fraction, derive_seed(cfg.seed, 0xDA7A))?;
        &subset
    } else {
        data
    };
    let mc = weights.config();
    if (mc.m, mc.n) != (data.m, data.n) {
        return Err(Error::Config(format!(
            "model is for {}x{} maps but the dataset has {}x{}",
            mc.m, mc.n, data.m, data.n
        )));
    }
    let samples = data.samples();
    if samples.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    let mut by_domain: Vec<Vec<Sample>> = vec![Vec::new(); data.domains.len()];
    for &s in &samples {
        by_domain[s.domain].push(s);
    }
    let images: Vec<Tensor<T>> = data.domains.iter().map(|d| d.map.image()).collect();

    let mut report = TrainReport {
        family: weights.config().family.to_string(),
        param_count: weights.param_count(),
        train_domains: data.domains.len(),
        train_samples: samples.len(),
        ..Default::default()
    };
    if cfg.grad_check {
        let err = check_model_gradients(&weights, data, 3)?;
        report.grad_check_error = Some(err);
        if !(err < MODEL_GRAD_TOL) {
            return Err(Error::GradCheck {
                error: err,
                tol: MODEL_GRAD_TOL,
            });
        }
    }
    if cfg.initial_loss {
        report.initial_loss = Some(mean_loss(&weights, data, &samples)?);
    }

    let mut opt = RmsProp::<T>::new(cfg.lr, cfg.rmsprop_decay, cfg.rmsprop_eps);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let batches = epoch_batches(
            &by_domain,
            cfg.batch_size,
            cfg.mix_domains,
            derive_seed(cfg.seed, epoch as u64 + 1),
        );
        let (mut loss, mut correct) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let out = batch_grads(&weights, &images, batch, cfg.threads, cfg.domain_cache);
            let out = match out {
                Ok(o) if o.loss.is_finite() => o,
                Ok(o) => return Err(non_finite(epoch, b, &o.grads)),
                Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(non_finite::<T>(epoch, b, &[])),
                Err(e) => return Err(e),
            };
            if let Err(e) = opt.step(weights.tensors_mut(), &out.grads) {
                return Err(match e {
                    TensorError::NonFinite { .. } => non_finite(epoch, b, &out.grads),
                    e => e.into(),
                });
            }
            loss += out.loss;
            correct += out.correct;
        }
        let val_error = match val {
            Some(v) => Some(prediction_loss(&NetworkPolicy::new(&weights), v, cfg.threads)?),
            None => None,
        };
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss / samples.len() as f64,
            train_error: 1.0 - correct as f64 / samples.len() as f64,
            val_error,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((weights, report))
}

fn non_finite<T: Real>(epoch: usize, batch: usize, grads: &[Tensor<T>]) -> Error {
    let max_grad = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().abs())
        .fold(
            0.0f64,
            |a, b| if b.is_nan() || a.is_nan() { f64::NAN } else { a.max(b) },
        );
    Error::NonFiniteLoss {
        epoch: epoch + 1,
        batch,
        max_grad: if grads.is_empty() { f64::NAN } else { max_grad },
    }
}
