//! Deep Interest Network forward and backward passes.
//!
//! Per record the network looks up the ad embedding `v_a` and the behavior
//! embeddings `v_i` from one shared item table, weights each behavior by
//! `softmax_i(v_i . v_a / temperature)`, pools `v_u = sum_i w_i v_i`, and
//! feeds `[v_u, v_a, v_u * v_a]` (plus an optional user-profile embedding)
//! to a ReLU MLP ending in a single sigmoid unit.
//!
//! The base model is the same network with uniform pooling weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedBatch, PAD};
use crate::error::{Error, Result};
use crate::numerics::{dot, relu, sigmoid, softmax, Matrix, SeededRng};

pub const EMBEDDING_INIT_LIMIT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub item_vocab_size: usize,
    pub user_vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub max_seq_len: usize,
    pub temperature: f64,
    pub use_attention: bool,
    pub use_user_profile: bool,
}

impl ModelConfig {
    pub fn new(item_vocab_size: usize, user_vocab_size: usize) -> Self {
        Self {
            item_vocab_size,
            user_vocab_size,
            embedding_dim: 8,
            hidden: vec![64, 32],
            max_seq_len: crate::data::DEFAULT_MAX_SEQ_LEN,
            temperature: 1.0,
            use_attention: true,
            use_user_profile: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.item_vocab_size < 2 || (self.use_user_profile && self.user_vocab_size < 2) {
            return fail("vocabularies need at least the PAD and OOV rows");
        }
        if self.embedding_dim == 0 || self.max_seq_len == 0 || self.hidden.contains(&0) {
            return fail("dimensions must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        Ok(())
    }

    /// `3d`, or `4d` with the user-profile embedding.
    pub fn mlp_input_dim(&self) -> usize {
        self.embedding_dim * if self.use_user_profile { 4 } else { 3 }
    }
}

/// One dense row per sparse id. Row 0 is padding and stays zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Matrix,
}

impl EmbeddingTable {
    pub fn uniform(vocab_size: usize, dim: usize, limit: f64, rng: &mut SeededRng) -> Self {
        let mut weights = Matrix::uniform(vocab_size, dim, limit, rng);
        weights.row_mut(PAD).fill(0.0);
        Self { weights }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.weights.row(index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// `y = act(x W + b)` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.weights.row(i)) {
                *o += xi * w;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub layers: Vec<Dense>,
}

impl MlpHead {
    /// Glorot-uniform weights, zero biases; ReLU hidden layers, sigmoid output.
    pub fn glorot(input_dim: usize, hidden: &[usize], rng: &mut SeededRng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    weights: Matrix::uniform(w[0], w[1], limit, rng),
                    bias: vec![0.0; w[1]],
                    activation: if l + 2 == dims.len() {
                        Activation::Sigmoid
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.rows()
    }
}

/// Attention weights over the (padded) behavior slots of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights(pub Vec<f64>);

impl AttentionWeights {
    /// `1/N` on every unmasked slot: the base model's pooling.
    pub fn uniform(mask: &[bool]) -> Result<Self> {
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::NoBehaviors);
        }
        let w = 1.0 / n as f64;
        Ok(Self(mask.iter().map(|&m| if m { w } else { 0.0 }).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `softmax` over unmasked slots of `(v_i . v_a) / temperature`.
pub fn attention_weights(
    behavior_embs: &Matrix,
    ad_emb: &[f64],
    mask: &[bool],
    temperature: f64,
) -> Result<AttentionWeights> {
    if behavior_embs.cols() != ad_emb.len() || behavior_embs.rows() != mask.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} behaviors, ad of width {}, mask of length {}",
            behavior_embs.rows(),
            behavior_embs.cols(),
            ad_emb.len(),
            mask.len()
        )));
    }
    let scores: Vec<f64> = (0..behavior_embs.rows())
        .map(|i| {
            if mask[i] {
                dot(behavior_embs.row(i), ad_emb) / temperature
            } else {
                0.0
            }
        })
        .collect();
    match softmax(&scores, mask) {
        Ok(w) => Ok(AttentionWeights(w)),
        Err(Error::EmptyBehaviorSequence) => Err(Error::NoBehaviors),
        Err(e) => Err(e),
    }
}

/// `sum_i w_i v_i`. Slots with zero weight are skipped.
pub fn pool_user_embedding(behavior_embs: &Matrix, weights: &AttentionWeights) -> Result<Vec<f64>> {
    if behavior_embs.rows() != weights.0.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} behavior rows vs {} weights",
            behavior_embs.rows(),
            weights.0.len()
        )));
    }
    let mut pooled = vec![0.0; behavior_embs.cols()];
    for (i, &w) in weights.0.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (p, &v) in pooled.iter_mut().zip(behavior_embs.row(i)) {
            *p += w * v;
        }
    }
    Ok(pooled)
}

/// Dot product of the pooled user embedding and the ad embedding.
pub fn interaction(user: &[f64], ad: &[f64]) -> Result<f64> {
    if user.len() != ad.len() {
        return Err(Error::DimensionMismatch(format!(
            "interaction of widths {} and {}",
            user.len(),
            ad.len()
        )));
    }
    Ok(dot(user, ad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DinModel {
    pub config: ModelConfig,
    pub items: EmbeddingTable,
    pub users: Option<EmbeddingTable>,
    pub mlp: MlpHead,
}

/// Gradients with the model's parameter shapes; embedding gradients are
/// kept only for rows touched by the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub items: BTreeMap<usize, Vec<f64>>,
    pub users: BTreeMap<usize, Vec<f64>>,
    pub layers: Vec<DenseGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &DinModel) -> Self {
        Self {
            items: BTreeMap::new(),
            users: BTreeMap::new(),
            layers: model
                .mlp
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Dense gradient in [`DinModel::to_flat`] order.
    pub fn to_flat(&self, model: &DinModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.num_parameters());
        let push_table = |out: &mut Vec<f64>, table: &EmbeddingTable, rows: &BTreeMap<usize, Vec<f64>>| {
            for r in 0..table.vocab_size() {
                match rows.get(&r) {
                    Some(g) => out.extend_from_slice(g),
                    None => out.extend(std::iter::repeat_n(0.0, table.dim())),
                }
            }
        };
        push_table(&mut out, &model.items, &self.items);
        if let Some(users) = &model.users {
            push_table(&mut out, users, &self.users);
        }
        for g in &self.layers {
            out.extend_from_slice(g.weights.as_slice());
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.items
            .values()
            .chain(self.users.values())
            .flatten()
            .all(|&v| v == 0.0)
            && self
                .layers
                .iter()
                .all(|g| g.weights.as_slice().iter().chain(&g.bias).all(|&v| v == 0.0))
    }
}

struct RecordCache {
    ad: usize,
    user: Option<usize>,
    /// Item index of each unmasked slot.
    behaviors: Vec<usize>,
    /// Pooling weight of each unmasked slot.
    weights: Vec<f64>,
    pooled: Vec<f64>,
    /// `layer_inputs[l]` is the input to layer `l`.
    layer_inputs: Vec<Vec<f64>>,
}

/// Output of [`DinModel::forward`] with what backward needs.
pub struct Forward {
    pub probs: Vec<f64>,
    records: Vec<RecordCache>,
}

impl Forward {
    /// Attention (or uniform) weights of record `r` over its real behaviors.
    pub fn weights(&self, r: usize) -> &[f64] {
        &self.records[r].weights
    }

    pub fn pooled(&self, r: usize) -> &[f64] {
        &self.records[r].pooled
    }
}

impl DinModel {
    /// Uniform(+-0.05) embeddings with a zero pad row, Glorot MLP, zero biases.
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.embedding_dim;
        let items = EmbeddingTable::uniform(config.item_vocab_size, d, EMBEDDING_INIT_LIMIT, rng);
        let users = config
            .use_user_profile
            .then(|| EmbeddingTable::uniform(config.user_vocab_size, d, EMBEDDING_INIT_LIMIT, rng));
        let mlp = MlpHead::glorot(config.mlp_input_dim(), &config.hidden, rng);
        Ok(Self {
            config,
            items,
            users,
            mlp,
        })
    }

    pub fn num_parameters(&self) -> usize {
        let tables = self.items.weights.as_slice().len()
            + self.users.as_ref().map_or(0, |u| u.weights.as_slice().len());
        tables
            + self
                .mlp
                .layers
                .iter()
                .map(|l| l.weights.as_slice().len() + l.bias.len())
                .sum::<usize>()
    }

    /// Parameters in a fixed order: item table, user table, then each
    /// layer's weights followed by its bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        out.extend_from_slice(self.items.weights.as_slice());
        if let Some(u) = &self.users {
            out.extend_from_slice(u.weights.as_slice());
        }
        for l in &self.mlp.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(self.items.weights.as_mut_slice());
        if let Some(u) = &mut self.users {
            take(u.weights.as_mut_slice());
        }
        for l in &mut self.mlp.layers {
            take(l.weights.as_mut_slice());
            take(&mut l.bias);
        }
        Ok(())
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.max_seq_len != self.config.max_seq_len {
            return Err(Error::DimensionMismatch(format!(
                "batch sequence length {} vs model {}",
                batch.max_seq_len, self.config.max_seq_len
            )));
        }
        let vocab = self.items.vocab_size();
        for &i in batch.ads.iter().chain(&batch.behaviors) {
            if i >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: i,
                    size: vocab,
                });
            }
        }
        if let Some(users) = &self.users {
            if batch.users.len() != batch.len() {
                return Err(Error::DimensionMismatch("batch lacks user indices".into()));
            }
            if let Some(&u) = batch.users.iter().find(|&&u| u >= users.vocab_size()) {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: u,
                    size: users.vocab_size(),
                });
            }
        }
        Ok(())
    }

    /// Click probability per record, caching intermediates for [`Self::backward`].
    pub fn forward(&self, batch: &EncodedBatch) -> Result<Forward> {
        self.check_batch(batch)?;
        let d = self.config.embedding_dim;
        let l = self.config.max_seq_len;
        let mut probs = Vec::with_capacity(batch.len());
        let mut records = Vec::with_capacity(batch.len());
        let mut embs = Matrix::zeros(l, d);

        for r in 0..batch.len() {
            let slots = batch.behavior_row(r);
            let mask = batch.mask_row(r);
            for (s, (&b, &m)) in slots.iter().zip(mask).enumerate() {
                if m {
                    embs.row_mut(s).copy_from_slice(self.items.row(b));
                } else {
                    embs.row_mut(s).fill(0.0);
                }
            }
            let ad = batch.ads[r];
            let ad_emb = self.items.row(ad);
            let weights = if self.config.use_attention {
                attention_weights(&embs, ad_emb, mask, self.config.temperature)?
            } else {
                AttentionWeights::uniform(mask)?
            };
            let pooled = pool_user_embedding(&embs, &weights)?;

            let mut input = Vec::with_capacity(self.config.mlp_input_dim());
            input.extend_from_slice(&pooled);
            input.extend_from_slice(ad_emb);
            input.extend(pooled.iter().zip(ad_emb).map(|(u, a)| u * a));
            let user = self.users.as_ref().map(|table| {
                let u = batch.users[r];
                input.extend_from_slice(table.row(u));
                u
            });

            let mut layer_inputs = Vec::with_capacity(self.mlp.layers.len());
            let mut x = input;
            for layer in &self.mlp.layers {
                let mut z = layer.pre_activation(&x);
                layer_inputs.push(x);
                match layer.activation {
                    Activation::Relu => z.iter_mut().for_each(|v| *v = relu(*v)),
                    Activation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
                }
                x = z;
            }
            probs.push(x[0]);

            let (behaviors, kept): (Vec<usize>, Vec<f64>) = slots
                .iter()
                .zip(mask)
                .zip(&weights.0)
                .filter(|((_, &m), _)| m)
                .map(|((&b, _), &w)| (b, w))
                .unzip();
            records.push(RecordCache {
                ad,
                user,
                behaviors,
                weights: kept,
                pooled,
                layer_inputs,
            });
        }
        Ok(Forward { probs, records })
    }

    pub fn predict(&self, batch: &EncodedBatch) -> Result<Vec<f64>> {
        Ok(self.forward(batch)?.probs)
    }

    /// Analytic gradients of `sum_r upstream[r] * prob[r]`.
    pub fn backward(&self, batch: &EncodedBatch, cache: &Forward, upstream: &[f64]) -> Result<Gradients> {
        if cache.records.len() != batch.len() || upstream.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!(
                "backward over {} records with a cache of {} and {} upstream gradients",
                batch.len(),
                cache.records.len(),
                upstream.len()
            )));
        }
        let d = self.config.embedding_dim;
        let temperature = self.config.temperature;
        let mut grads = Gradients::zeros_like(self);

        for (r, rec) in cache.records.iter().enumerate() {
            let p = cache.probs[r];
            // Through the output sigmoid.
            let mut delta = vec![upstream[r] * p * (1.0 - p)];
            let mut dx = Vec::new();
            for (li, layer) in self.mlp.layers.iter().enumerate().rev() {
                let x = &rec.layer_inputs[li];
                let g = &mut grads.layers[li];
                for (i, &xi) in x.iter().enumerate() {
                    if xi != 0.0 {
                        for (gw, &dj) in g.weights.row_mut(i).iter_mut().zip(&delta) {
                            *gw += xi * dj;
                        }
                    }
                }
                for (gb, &dj) in g.bias.iter_mut().zip(&delta) {
                    *gb += dj;
                }
                dx = (0..x.len()).map(|i| dot(layer.weights.row(i), &delta)).collect();
                if li > 0 {
                    // x is the ReLU output of the previous layer.
                    for (v, &xi) in dx.iter_mut().zip(x) {
                        if xi <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    delta = std::mem::take(&mut dx);
                }
            }

            let ad_emb = self.items.row(rec.ad);
            let (d_pooled_direct, rest) = dx.split_at(d);
            let (d_ad_direct, rest) = rest.split_at(d);
            let (d_product, d_user) = rest.split_at(d);

            let d_pooled: Vec<f64> = (0..d)
                .map(|k| d_pooled_direct[k] + d_product[k] * ad_emb[k])
                .collect();
            let mut d_ad: Vec<f64> = (0..d)
                .map(|k| d_ad_direct[k] + d_product[k] * rec.pooled[k])
                .collect();

            let mut add_item = |index: usize, scale: f64, v: &[f64]| {
                let row = grads.items.entry(index).or_insert_with(|| vec![0.0; d]);
                for (g, &x) in row.iter_mut().zip(v) {
                    *g += scale * x;
                }
            };

            for (&b, &w) in rec.behaviors.iter().zip(&rec.weights) {
                add_item(b, w, &d_pooled);
            }
            if self.config.use_attention {
                // Softmax Jacobian: ds_i = w_i (dw_i - sum_j w_j dw_j).
                let d_w: Vec<f64> = rec
                    .behaviors
                    .iter()
                    .map(|&b| dot(self.items.row(b), &d_pooled))
                    .collect();
                let mean: f64 = rec.weights.iter().zip(&d_w).map(|(w, g)| w * g).sum();
                for ((&b, &w), &gw) in rec.behaviors.iter().zip(&rec.weights).zip(&d_w) {
                    let ds = w * (gw - mean) / temperature;
                    if ds == 0.0 {
                        continue;
                    }
                    let v_b = self.items.row(b);
                    for (g, &x) in d_ad.iter_mut().zip(v_b) {
                        *g += ds * x;
                    }
                    add_item(b, ds, ad_emb);
                }
            }
            add_item(rec.ad, 1.0, &d_ad);

            if let Some(u) = rec.user {
                let row = grads.users.entry(u).or_insert_with(|| vec![0.0; d]);
                for (g, &x) in row.iter_mut().zip(d_user) {
                    *g += x;
                }
            }
        }

        if let Some(row) = grads.items.get_mut(&PAD) {
            row.fill(0.0);
        }
        if let Some(row) = grads.users.get_mut(&PAD) {
            row.fill(0.0);
        }
        Ok(grads)
    }
}
