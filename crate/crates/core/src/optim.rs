//! Binary cross-entropy, L2 regularization, Adam and the training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedBatch, PAD};
use crate::error::{Error, Result};
use crate::metrics::{gauc, WeightMode};
use crate::model::{DinModel, Gradients};
use crate::numerics::{grad_check, GradCheckReport, Matrix, SeededRng};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// RNG stream used for mini-batch shuffling.
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct BceOutput {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Derivative of the mean loss with respect to each probability.
    pub grad: Vec<f64>,
}

/// Mean binary cross-entropy.
///
/// The gradient is evaluated at the clamped probability, so saturated
/// predictions keep a finite, nonzero training signal.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<BceOutput> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        if y > 1 {
            return Err(Error::InvalidInput(format!("label {y} is not binary")));
        }
        if p.is_nan() {
            return Err(Error::NonFinite("probability".into()));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if y == 1 {
            total -= p.ln();
            grad.push(-1.0 / (p * n));
        } else {
            total -= (1.0 - p).ln();
            grad.push(1.0 / ((1.0 - p) * n));
        }
    }
    Ok(BceOutput {
        loss: total / n,
        grad,
    })
}

/// Same value as [`bce_loss`], which it calls.
pub fn log_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(bce_loss(probs, labels)?.loss)
}

/// `lambda * sum(w^2)` over `weights`, adding `2 lambda w` into `grad`.
pub fn l2_term(weights: &[f64], lambda: f64, grad: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (g, &w) in grad.iter_mut().zip(weights) {
        sum += w * w;
        *g += 2.0 * lambda * w;
    }
    lambda * sum
}

/// Embedding rows referenced by a batch, padding excluded.
pub fn touched_items(batch: &EncodedBatch) -> BTreeSet<usize> {
    batch
        .ads
        .iter()
        .chain(
            batch
                .behaviors
                .iter()
                .zip(&batch.mask)
                .filter(|(_, &m)| m)
                .map(|(b, _)| b),
        )
        .copied()
        .filter(|&i| i != PAD)
        .collect()
}

/// L2 penalty over every MLP weight matrix and the embedding rows the batch
/// touches. Biases and the padding row are exempt.
pub fn l2_penalty(model: &DinModel, batch: &EncodedBatch, lambda: f64, grads: &mut Gradients) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let d = model.config.embedding_dim;
    let mut penalty = 0.0;
    for i in touched_items(batch) {
        let g = grads.items.entry(i).or_insert_with(|| vec![0.0; d]);
        penalty += l2_term(model.items.row(i), lambda, g);
    }
    if let Some(users) = &model.users {
        let touched: BTreeSet<usize> = batch.users.iter().copied().filter(|&u| u != PAD).collect();
        for u in touched {
            let g = grads.users.entry(u).or_insert_with(|| vec![0.0; d]);
            penalty += l2_term(users.row(u), lambda, g);
        }
    }
    for (layer, g) in model.mlp.layers.iter().zip(&mut grads.layers) {
        penalty += l2_term(layer.weights.as_slice(), lambda, g.weights.as_mut_slice());
    }
    penalty
}

/// Regularized mean BCE of `model` on `batch`, with its gradients.
pub fn loss_and_gradients(
    model: &DinModel,
    batch: &EncodedBatch,
    l2_lambda: f64,
) -> Result<(f64, f64, Gradients)> {
    let fwd = model.forward(batch)?;
    let bce = bce_loss(&fwd.probs, &batch.labels)?;
    let mut grads = model.backward(batch, &fwd, &bce.grad)?;
    let penalty = l2_penalty(model, batch, l2_lambda, &mut grads);
    Ok((bce.loss, penalty, grads))
}

/// Finite-difference check of the full regularized training loss.
pub fn check_model_gradients(
    model: &DinModel,
    batch: &EncodedBatch,
    l2_lambda: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, _, grads) = loss_and_gradients(model, batch, l2_lambda)?;
    let analytic = grads.to_flat(model);
    let mut probe = model.clone();
    grad_check(
        |params| {
            probe.set_flat(params)?;
            let probs = probe.predict(batch)?;
            let mut scratch = Gradients::zeros_like(&probe);
            Ok(bce_loss(&probs, &batch.labels)?.loss + l2_penalty(&probe, batch, l2_lambda, &mut scratch))
        },
        &model.to_flat(),
        &analytic,
        eps,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `params` in place, at step `t` (1-based).
pub fn adam_update(
    config: &AdamConfig,
    t: u64,
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let c1 = 1.0 - config.beta1.powf(t as f64);
    let c2 = 1.0 - config.beta2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

impl Moments {
    fn like(shape: (usize, usize)) -> Self {
        Self {
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
        }
    }
}

/// Adam moments mirroring the model's parameters.
///
/// Embedding rows are updated lazily: a row's moments only move on steps
/// where the batch touches it. The bias correction uses the global step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    items: Moments,
    users: Option<Moments>,
    layers: Vec<(Moments, Moments)>,
}

impl AdamState {
    pub fn new(model: &DinModel, config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            items: Moments::like(model.items.weights.shape()),
            users: model.users.as_ref().map(|u| Moments::like(u.weights.shape())),
            layers: model
                .mlp
                .layers
                .iter()
                .map(|l| (Moments::like(l.weights.shape()), Moments::like((1, l.bias.len()))))
                .collect(),
        }
    }

    pub fn second_moments_nonnegative(&self) -> bool {
        let tables = std::iter::once(&self.items).chain(self.users.as_ref());
        let layers = self.layers.iter().flat_map(|(w, b)| [w, b]);
        tables
            .chain(layers)
            .all(|mo| mo.v.as_slice().iter().all(|&x| x >= 0.0))
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient in {name}")))
    }
}

/// Applies one Adam step. The padding rows are never updated.
pub fn adam_step(state: &mut AdamState, model: &mut DinModel, grads: &Gradients) -> Result<()> {
    for (row, g) in &grads.items {
        check_finite(&format!("item_embedding row {row}"), g)?;
    }
    for (row, g) in &grads.users {
        check_finite(&format!("user_embedding row {row}"), g)?;
    }
    for (i, g) in grads.layers.iter().enumerate() {
        check_finite(&format!("mlp.{i}.weights"), g.weights.as_slice())?;
        check_finite(&format!("mlp.{i}.bias"), &g.bias)?;
    }
    if grads.layers.len() != model.mlp.layers.len() {
        return Err(Error::DimensionMismatch("gradient layer count".into()));
    }

    state.t += 1;
    let t = state.t;
    let cfg = state.config;

    let sparse = |table: &mut Matrix, mo: &mut Moments, rows: &BTreeMap<usize, Vec<f64>>| {
        for (&r, g) in rows {
            if r == PAD || r >= table.rows() {
                continue;
            }
            adam_update(&cfg, t, table.row_mut(r), g, mo.m.row_mut(r), mo.v.row_mut(r));
        }
    };
    sparse(&mut model.items.weights, &mut state.items, &grads.items);
    if let (Some(table), Some(mo)) = (model.users.as_mut(), state.users.as_mut()) {
        sparse(&mut table.weights, mo, &grads.users);
    }
    for ((layer, g), (mw, mb)) in model
        .mlp
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.layers)
    {
        adam_update(
            &cfg,
            t,
            layer.weights.as_mut_slice(),
            g.weights.as_slice(),
            mw.m.as_mut_slice(),
            mw.v.as_mut_slice(),
        );
        adam_update(
            &cfg,
            t,
            &mut layer.bias,
            &g.bias,
            mb.m.as_mut_slice(),
            mb.v.as_mut_slice(),
        );
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2_lambda: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation GAUC improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            l2_lambda: 1e-5,
            seed: 1,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.l2_lambda >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::InvalidConfig(
                "lr and l2_lambda must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean unregularized BCE over the epoch's mini-batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_gauc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV with header `epoch,train_loss,val_loss,val_gauc,seconds`.
    ///
    /// With `wall_time` off the seconds column is written as 0 so the file
    /// depends only on the seed, config and data.
    pub fn to_csv(&self, wall_time: bool) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,train_loss,val_loss,val_gauc,seconds\n");
        for e in &self.epochs {
            let secs = if wall_time { e.seconds } else { 0.0 };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_gauc),
                secs
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub val_gauc: f64,
    pub model: DinModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the last completed epoch.
    pub model: DinModel,
    /// Best validation-GAUC snapshot; tracked only when patience is set.
    pub best: Option<BestModel>,
    pub history: TrainHistory,
    pub steps: u64,
}

/// Validation loss and impression-weighted GAUC.
pub fn validate(model: &DinModel, val: &EncodedBatch) -> Result<(f64, Option<f64>)> {
    let probs = model.predict(val)?;
    let loss = log_loss(&probs, &val.labels)?;
    let g = match gauc(&probs, &val.labels, &val.groups, WeightMode::Impressions) {
        Ok(g) => Some(g.value),
        Err(Error::NoUsableGroups(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((loss, g))
}

/// Mini-batch Adam with L2 over seeded shuffles of `train`.
pub fn train(
    mut model: DinModel,
    train: &EncodedBatch,
    val: &EncodedBatch,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if config.patience.is_some() && val.is_empty() {
        return Err(Error::InvalidInput(
            "early stopping needs a validation set".into(),
        ));
    }
    train.validate()?;
    if !val.is_empty() {
        val.validate()?;
    }

    let mut state = AdamState::new(
        &model,
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let mut rng = SeededRng::derive(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<BestModel> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.select(chunk);
            let (loss, _, grads) = loss_and_gradients(&model, &batch, config.l2_lambda)?;
            adam_step(&mut state, &mut model, &grads)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let (val_loss, val_gauc) = if val.is_empty() {
            (None, None)
        } else {
            let (l, g) = validate(&model, val)?;
            (Some(l), g)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_gauc,
            seconds: started.elapsed().as_secs_f64(),
        });

        if let Some(patience) = config.patience {
            let score = val_gauc.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|b| score > b.val_gauc) {
                best = Some(BestModel {
                    epoch,
                    val_gauc: score,
                    model: model.clone(),
                });
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        history,
        steps: state.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmbeddingTable, ModelConfig};

    fn tiny(seed: u64, use_attention: bool) -> DinModel {
        let mut rng = SeededRng::new(seed);
        let config = ModelConfig {
            item_vocab_size: 8,
            user_vocab_size: 3,
            embedding_dim: 4,
            hidden: vec![8],
            max_seq_len: 4,
            temperature: 1.0,
            use_attention,
            use_user_profile: false,
        };
        let mut m = DinModel::init(config, &mut rng).unwrap();
        m.items = EmbeddingTable::uniform(8, 4, 0.8, &mut rng);
        m
    }

    fn batch() -> EncodedBatch {
        let rows: [(usize, [usize; 4], u8); 4] = [
            (3, [2, 4, 6, 0], 1),
            (5, [6, 7, 0, 0], 0),
            (2, [2, 3, 3, 5], 1),
            (7, [1, 0, 0, 0], 0),
        ];
        let mut b = EncodedBatch::empty(4);
        for (g, (ad, row, y)) in rows.iter().enumerate() {
            b.ads.push(*ad);
            b.behaviors.extend_from_slice(row);
            b.mask.extend(row.iter().map(|&x| x != 0));
            b.labels.push(*y);
            b.groups.push(g % 2);
            b.users.push(2);
        }
        b
    }

    #[test]
    fn bce_examples() {
        let out = bce_loss(&[0.5; 3], &[1, 0, 1]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1, 0]).unwrap().loss < 1e-6);
        let v = bce_loss(&[0.9, 0.2], &[1, 0]).unwrap().loss;
        assert!((v - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-15);
        assert!((v - 0.164252).abs() < 1e-6);
        assert!(matches!(bce_loss(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let p = [0.3, 0.71, 0.05, 0.92];
        let y = [1, 0, 0, 1];
        let analytic = bce_loss(&p, &y).unwrap().grad;
        let r = grad_check(|q| Ok(bce_loss(q, &y)?.loss), &p, &analytic, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn l2_examples() {
        let mut g = [0.0];
        assert_eq!(l2_term(&[3.0], 0.0, &mut g), 0.0);
        assert_eq!(g, [0.0]);
        let pen = l2_term(&[3.0], 0.1, &mut g);
        assert!((pen - 0.9).abs() < 1e-15);
        assert!((g[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn l2_penalty_matches_direct_sum() {
        let m = tiny(1, true);
        let b = batch();
        let mut grads = Gradients::zeros_like(&m);
        let lambda = 0.01;
        let pen = l2_penalty(&m, &b, lambda, &mut grads);
        let mut direct = 0.0;
        for i in [2usize, 3, 4, 5, 6, 7, 1] {
            direct += m.items.row(i).iter().map(|w| w * w).sum::<f64>();
        }
        for l in &m.mlp.layers {
            direct += l.weights.as_slice().iter().map(|w| w * w).sum::<f64>();
        }
        assert!((pen - lambda * direct).abs() < 1e-12);
        assert!(!grads.items.contains_key(&PAD));

        let mut g0 = Gradients::zeros_like(&m);
        assert_eq!(l2_penalty(&m, &b, 0.0, &mut g0), 0.0);
        assert!(g0.is_zero());
    }

    #[test]
    fn regularized_loss_exceeds_plain() {
        let m = tiny(2, false);
        let (l, pen, _) = loss_and_gradients(&m, &batch(), 1e-3).unwrap();
        assert!(pen > 0.0 && l + pen > l);
    }

    #[test]
    fn full_loss_gradient_check() {
        for attention in [true, false] {
            let r = check_model_gradients(&tiny(3, attention), &batch(), 1e-3, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "attention={attention}: {r:?}");
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = AdamConfig::default();
        for g in [0.37, -2.5, 1e-3] {
            let mut p = [1.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_update(&cfg, 1, &mut p, &[g], &mut m, &mut v);
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - 1.0 - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_two_step_hand_trace() {
        // Hand trace with lr = 0.1, g1 = g2 = 1:
        // t=1: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
        //      p = 1 - 0.1 / (1 + 1e-8)
        // t=2: m = 0.19, v = 0.001999, m_hat = 0.19/0.19 = 1,
        //      v_hat = 0.001999/0.001999 = 1, p -= 0.1 / (1 + 1e-8)
        let step = 0.1 / (1.0 + 1e-8);
        let expected = (1.0 - step) - step;
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&cfg, 1, &mut p, &[1.0], &mut m, &mut v);
        adam_update(&cfg, 2, &mut p, &[1.0], &mut m, &mut v);
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((m[0] - 0.19).abs() < 1e-15);
        assert!((v[0] - 0.001999).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr_are_noops() {
        let mut m = tiny(4, true);
        let before = m.clone();
        let mut state = AdamState::new(&m, AdamConfig::default());
        let zero = Gradients::zeros_like(&m);
        for _ in 0..10 {
            adam_step(&mut state, &mut m, &zero).unwrap();
        }
        assert_eq!(m, before);
        assert_eq!(state.t, 10);

        let (_, _, grads) = loss_and_gradients(&m, &batch(), 1e-3).unwrap();
        let mut state = AdamState::new(
            &m,
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
        );
        adam_step(&mut state, &mut m, &grads).unwrap();
        assert_eq!(m, before);
        assert!(state.second_moments_nonnegative());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut m = tiny(5, true);
        let mut grads = Gradients::zeros_like(&m);
        grads.layers[1].bias[0] = f64::NAN;
        let mut state = AdamState::new(&m, AdamConfig::default());
        let err = adam_step(&mut state, &mut m, &grads).unwrap_err().to_string();
        assert!(err.contains("mlp.1.bias"), "{err}");
        assert_eq!(state.t, 0);
    }

    #[test]
    fn lazy_rows_untouched_stay_put() {
        let mut m = tiny(6, true);
        let before = m.clone();
        let mut b = batch();
        b = b.select(&[0]);
        let (_, _, grads) = loss_and_gradients(&m, &b, 0.0).unwrap();
        let mut state = AdamState::new(&m, AdamConfig::default());
        adam_step(&mut state, &mut m, &grads).unwrap();
        assert_eq!(m.items.row(7), before.items.row(7));
        assert_ne!(m.items.row(3), before.items.row(3));
    }

    #[test]
    fn one_epoch_full_batch_is_one_step() {
        let b = batch();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 100,
            ..Default::default()
        };
        let out = train(tiny(7, true), &b, &b, &cfg).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.history.epochs.len(), 1);
    }

    #[test]
    fn training_is_deterministic_and_keeps_pad_zero() {
        let b = batch();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            lr: 0.05,
            ..Default::default()
        };
        let a = train(tiny(8, true), &b, &b, &cfg).unwrap();
        let c = train(tiny(8, true), &b, &b, &cfg).unwrap();
        assert_eq!(a.model.to_flat(), c.model.to_flat());
        assert_eq!(a.history.to_csv(false), c.history.to_csv(false));
        assert!(a.model.items.row(PAD).iter().all(|&v| v == 0.0));
        assert!(a.history.epochs.last().unwrap().train_loss < a.history.epochs[0].train_loss);
    }

    #[test]
    fn patience_requires_validation_and_tracks_best() {
        let b = batch();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 4,
            patience: Some(2),
            ..Default::default()
        };
        assert!(train(tiny(9, true), &b, &EncodedBatch::empty(4), &cfg).is_err());
        let out = train(tiny(9, true), &b, &b, &cfg).unwrap();
        let best = out.best.unwrap();
        let max = out
            .history
            .epochs
            .iter()
            .filter_map(|e| e.val_gauc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.val_gauc, max);
    }

    #[test]
    fn history_csv_format() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: None,
                val_gauc: Some(0.75),
                seconds: 1.25,
            }],
        };
        assert_eq!(
            h.to_csv(true),
            "epoch,train_loss,val_loss,val_gauc,seconds\n1,0.5,,0.75,1.25\n"
        );
        assert_eq!(
            h.to_csv(false),
            "epoch,train_loss,val_loss,val_gauc,seconds\n1,0.5,,0.75,0\n"
        );
    }
}
