//! Per-token cross-entropy objective, Adam, global-norm clipping, selective
//! L2, dropout masks and the early-stopping training loop.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{batches, EncodedSentence};
use crate::evaluation::prf_from_spans;
use crate::iob::{decode, Tag, TokenSpan};
use crate::layers::{ModelError, ModelParams};
use crate::numerics::{
    clip_global_norm, grad_check, Fault, GradCheckReport, Gradients, Graph, NodeId, NumericsError, Parameterized, Scalar,
    Tensor, DEFAULT_EPS,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training input: {0}")]
    Validation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_norm: f64,
    pub l2_coeff: f64,
    pub l2_params: Vec<String>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Stop as soon as validation F1 reaches this value.
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            max_norm: 5.0,
            l2_coeff: 1e-5,
            l2_params: vec!["tag.w".into(), "char.proj.w".into()],
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout_rate: 0.5,
            max_epochs: 150,
            patience: 25,
            val_fraction: 0.2,
            seed: 1,
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Validation(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        let rates = [
            ("max_norm", self.max_norm),
            ("l2_coeff", self.l2_coeff),
            ("learning_rate", self.learning_rate),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Inverted dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>, TrainError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TrainError::Validation(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Where the per-sentence dropout generators come from: sentence `i` of a
/// batch draws from ChaCha stream `first_stream + i` of `seed`.
#[derive(Clone, Copy, Debug)]
pub struct DropoutStreams {
    pub rate: f64,
    pub seed: u64,
    pub first_stream: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossOptions {
    /// `None` disables dropout.
    pub dropout: Option<DropoutStreams>,
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug)]
pub struct BatchLoss<T: Scalar> {
    /// Mean token cross-entropy plus the L2 term.
    pub loss: f64,
    pub data_loss: f64,
    pub l2_loss: f64,
    pub tokens: usize,
    pub grads: Gradients<T>,
}

fn sentence_loss<T: Scalar>(
    m: &ModelParams<T>,
    s: &EncodedSentence,
    rng: Option<(f64, &mut ChaCha8Rng)>,
    fault: Option<Fault>,
) -> Result<(f64, Gradients<T>), TrainError> {
    if s.tags.len() != s.word_ids.len() {
        return Err(TrainError::Validation("tag and word counts differ".into()));
    }
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let nodes = m.register(&mut g)?;
    let qs = m.forward_graph(&mut g, &nodes, &s.word_ids, &s.char_ids, rng)?;
    let mut terms = Vec::with_capacity(qs.len());
    for (q, tag) in qs.iter().zip(&s.tags) {
        terms.push(g.cross_entropy(*q, tag.index())?);
    }
    let total = add_all(&mut g, &terms)?;
    Ok((g.value(total).item()?.as_f64(), g.backward(total)?))
}

fn add_all<T: Scalar>(g: &mut Graph<'_, T>, terms: &[NodeId]) -> Result<NodeId, NumericsError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `l2_coeff * sum ||P||^2` over the named parameters, with its gradient.
pub fn l2_penalty<T: Scalar>(m: &ModelParams<T>, cfg: &TrainConfig) -> Result<(f64, Gradients<T>), TrainError> {
    if cfg.l2_coeff == 0.0 {
        return Ok((0.0, Gradients::new()));
    }
    let mut selected = Vec::new();
    m.visit_params(&mut |name, t| {
        if cfg.l2_params.iter().any(|p| p == name) {
            selected.push((name.to_string(), t));
        }
    });
    if selected.is_empty() {
        return Ok((0.0, Gradients::new()));
    }
    let mut g = Graph::new();
    let mut sums = Vec::with_capacity(selected.len());
    for (name, t) in &selected {
        let p = g.param(name, t)?;
        let sq = g.hadamard(p, p)?;
        sums.push(g.sum(sq));
    }
    let total = add_all(&mut g, &sums)?;
    let scaled = g.scale(total, T::from_f64(cfg.l2_coeff));
    Ok((g.value(scaled).item()?.as_f64(), g.backward(scaled)?))
}

/// Mean per-token cross-entropy over `batch` plus the L2 term, and the
/// gradient of that loss. Sentences are processed in parallel; their
/// gradients are summed in batch order.
pub fn batch_loss<T: Scalar>(
    m: &ModelParams<T>,
    batch: &[&EncodedSentence],
    cfg: &TrainConfig,
    opts: &LossOptions,
) -> Result<BatchLoss<T>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Validation("empty batch".into()));
    }
    let per_sentence: Vec<Result<(f64, Gradients<T>), TrainError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| match opts.dropout {
            Some(d) => {
                let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
                rng.set_stream(d.first_stream + i as u64);
                sentence_loss(m, s, Some((d.rate, &mut rng)), opts.fault)
            }
            None => sentence_loss(m, s, None, opts.fault),
        })
        .collect();

    let tokens: usize = batch.iter().map(|s| s.len()).sum();
    let mut sum_loss = 0.0;
    let mut grads = Gradients::new();
    for r in per_sentence {
        let (l, g) = r?;
        sum_loss += l;
        grads.accumulate(&g)?;
    }
    let inv = T::from_f64(1.0 / tokens as f64);
    for (_, g) in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    let (l2_loss, l2_grads) = l2_penalty(m, cfg)?;
    grads.accumulate(&l2_grads)?;
    let data_loss = sum_loss / tokens as f64;
    Ok(BatchLoss {
        loss: data_loss + l2_loss,
        data_loss,
        l2_loss,
        tokens,
        grads,
    })
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f64>>,
    pub v: BTreeMap<String, Tensor<f64>>,
    pub t: u64,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<T: Scalar, P: Parameterized<T> + ?Sized>(
    state: &mut AdamState,
    params: &mut P,
    grads: &Gradients<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut err = None;
    params.visit_params_mut(&mut |name, w| {
        let Some(g) = grads.get(name) else { return };
        if g.shape() != w.shape() {
            err.get_or_insert(NumericsError::Shape {
                op: "adam_step",
                left: w.shape().to_vec(),
                right: g.shape().to_vec(),
            });
            return;
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(w.shape()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(w.shape()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (wi, gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi.as_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *wi = T::from_f64(wi.as_f64() - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps));
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    TargetReached,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::TargetReached => "target_f1",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stop_reason: StopReason,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.epochs {
            writeln!(f, "{}\t{:.6}\t{:.4}", e.epoch, e.loss, e.val_f1)?;
        }
        writeln!(f, "best_epoch\t{}", self.best_epoch)?;
        writeln!(f, "stop_reason\t{}", self.stop_reason)
    }
}

/// Tags the sentences with dropout off and returns exact-match F1 against
/// their gold tags.
pub fn tagging_f1<T: Scalar>(m: &ModelParams<T>, data: &[EncodedSentence]) -> Result<f64, TrainError> {
    let pred: Vec<Vec<Tag>> = data
        .par_iter()
        .map(|s| m.predict_tags(s))
        .collect::<Result<_, _>>()?;
    let gold_spans: Vec<Vec<TokenSpan>> = data.iter().map(|s| decode(&s.tags)).collect();
    let pred_spans: Vec<Vec<TokenSpan>> = pred.iter().map(|t| decode(t)).collect();
    Ok(prf_from_spans(&gold_spans, &pred_spans).f1)
}

/// Seeded shuffle of `0..n` split into (train, validation) index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if n < 2 {
        return Err(TrainError::Validation(format!("need at least 2 sentences to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = order.split_off(n - n_val);
    Ok((order, val))
}

/// Stream offset keeping dropout draws apart from batch shuffling.
const DROPOUT_SEED_SALT: u64 = 0x5EED_D80F;

/// Trains on `train_set`, scoring `val_set` after every epoch, and returns
/// the parameters of the best validation epoch.
pub fn train_with_validation<T: Scalar>(
    mut model: ModelParams<T>,
    train_set: &[EncodedSentence],
    val_set: &[EncodedSentence],
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Validation("training and validation sets must be nonempty".into()));
    }
    model.config.dropout = cfg.dropout_rate;
    let mut adam = AdamState::default();
    let mut best: Option<(ModelParams<T>, usize, f64)> = None;
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut sentences_seen = 0u64;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for idx in batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let batch: Vec<&EncodedSentence> = idx.iter().map(|&i| &train_set[i]).collect();
            let opts = LossOptions {
                dropout: Some(DropoutStreams {
                    rate: cfg.dropout_rate,
                    seed: cfg.seed ^ DROPOUT_SEED_SALT,
                    first_stream: sentences_seen,
                }),
                fault: None,
            };
            sentences_seen += batch.len() as u64;
            let mut out = batch_loss(&model, &batch, cfg, &opts)?;
            out.grads.check_finite()?;
            clip_global_norm(&mut out.grads, cfg.max_norm);
            adam_step(&mut adam, &mut model, &out.grads, cfg)?;
            loss_sum += out.loss * out.tokens as f64;
            token_sum += out.tokens;
        }
        let loss = loss_sum / token_sum as f64;
        let val_f1 = tagging_f1(&model, val_set)?;
        log::info!("epoch {epoch}: loss {loss:.4}, validation F1 {val_f1:.4}");
        epochs.push(EpochRecord { epoch, loss, val_f1 });

        if best.as_ref().is_none_or(|(_, _, f)| val_f1 > *f) {
            best = Some((model.clone(), epoch, val_f1));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_f1.is_some_and(|t| val_f1 >= t) {
            stop_reason = StopReason::TargetReached;
            break;
        }
        if since_best >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (params, best_epoch, best_val_f1) = best.expect("at least one epoch ran");
    Ok((
        params,
        TrainReport {
            epochs,
            best_epoch,
            best_val_f1,
            stop_reason,
        },
    ))
}

/// Seeded 80/20 (by default) split of `data`, then [`train_with_validation`].
pub fn train<T: Scalar>(
    model: ModelParams<T>,
    data: &[EncodedSentence],
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Validation("training corpus is empty".into()));
    }
    let (tr, va) = split_indices(data.len(), cfg.val_fraction, cfg.seed)?;
    let train_set: Vec<EncodedSentence> = tr.iter().map(|&i| data[i].clone()).collect();
    let val_set: Vec<EncodedSentence> = va.iter().map(|&i| data[i].clone()).collect();
    train_with_validation(model, &train_set, &val_set, cfg)
}

/// (train, held-out) index lists of one fold.
pub type Fold = (Vec<usize>, Vec<usize>);

/// Seeded shuffle of `0..n` cut into `k` contiguous folds. Fold sizes
/// differ by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>, TrainError> {
    if k < 2 || n < k {
        return Err(TrainError::Validation(format!("cannot cut {n} sentences into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    order.shuffle(&mut rng);
    let folds = (0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let held = order[lo..hi].to_vec();
            let rest = order[..lo].iter().chain(&order[hi..]).copied().collect();
            (rest, held)
        })
        .collect();
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    /// Held-out F1 averaged over folds, one entry per epoch.
    pub mean_f1: Vec<f64>,
    /// 1-based epoch maximizing `mean_f1`.
    pub best_epoch: usize,
    pub best_mean_f1: f64,
}

/// K-fold cross validation. Every fold trains a copy of `model` for
/// exactly `cfg.max_epochs` epochs (no early stopping) so the per-epoch
/// curves can be averaged.
pub fn cross_validate<T: Scalar>(
    model: &ModelParams<T>,
    data: &[EncodedSentence],
    k: usize,
    cfg: &TrainConfig,
) -> Result<CvResult, TrainError> {
    let folds = kfold_indices(data.len(), k, cfg.seed)?;
    let cfg = TrainConfig {
        patience: cfg.max_epochs,
        target_f1: None,
        ..cfg.clone()
    };
    let curves: Vec<Vec<f64>> = folds
        .par_iter()
        .map(|(tr, va)| {
            let train_set: Vec<EncodedSentence> = tr.iter().map(|&i| data[i].clone()).collect();
            let val_set: Vec<EncodedSentence> = va.iter().map(|&i| data[i].clone()).collect();
            let (_, report) = train_with_validation(model.clone(), &train_set, &val_set, &cfg)?;
            Ok(report.epochs.iter().map(|e| e.val_f1).collect())
        })
        .collect::<Result<_, TrainError>>()?;
    let mean_f1: Vec<f64> = (0..cfg.max_epochs)
        .map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / k as f64)
        .collect();
    let (best, &best_mean_f1) = mean_f1
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (i, f)| if *f > *acc.1 { (i, f) } else { acc });
    Ok(CvResult {
        mean_f1,
        best_epoch: best + 1,
        best_mean_f1,
    })
}

/// Finite-difference check of the full objective (dropout off, L2 on) of a
/// 64-bit model on `batch`.
pub fn model_grad_check(
    model: &mut ModelParams<f64>,
    batch: &[EncodedSentence],
    cfg: &TrainConfig,
    fault: Option<Fault>,
) -> Result<GradCheckReport, TrainError> {
    let refs: Vec<&EncodedSentence> = batch.iter().collect();
    let opts = LossOptions { dropout: None, fault };
    let mut failure = None;
    let report = grad_check(model, DEFAULT_EPS, |m| match batch_loss(m, &refs, cfg, &opts) {
        Ok(out) => Ok((out.loss, out.grads)),
        Err(TrainError::Numerics(e)) => Err(e),
        Err(e) => {
            let msg = e.to_string();
            failure = Some(e);
            Err(NumericsError::Contract(msg))
        }
    });
    match (report, failure) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r?),
    }
}
