//! Impression records, vocabularies, batch encoding, splitting, JSONL
//! persistence and the synthetic ad-log generator.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, SeededRng};

pub const PAD: usize = 0;
pub const OOV: usize = 1;
pub const PAD_TOKEN: &str = "<PAD>";
pub const OOV_TOKEN: &str = "<OOV>";
/// Stands in for an empty behavior history so attention always has a slot.
pub const NO_HISTORY_TOKEN: &str = "<NO_HISTORY>";

pub const DEFAULT_MAX_SEQ_LEN: usize = 32;

/// One ad display and whether it was clicked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub user_id: String,
    pub ad_id: String,
    /// Oldest first; the tail is the most recent behavior.
    pub behavior_ids: Vec<String>,
    pub label: u8,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bid: Option<f64>,
}

impl ImpressionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidInput(format!(
                "label must be 0 or 1, got {}",
                self.label
            )));
        }
        if let Some(bid) = self.bid {
            if !(bid >= 0.0 && bid.is_finite()) {
                return Err(Error::InvalidInput(format!("bid must be nonnegative, got {bid}")));
            }
        }
        Ok(())
    }
}

/// Token to index map with reserved `PAD = 0` and `OOV = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
        let index = tokens.iter().cloned().zip(0..).collect();
        Self {
            tokens,
            index,
            frozen: false,
        }
    }

    /// Rebuilds a frozen vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[OOV] != OOV_TOKEN {
            return Err(Error::InvalidInput(
                "vocabulary must start with the reserved PAD and OOV tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            frozen: true,
        })
    }

    /// Returns the token's index, adding it unless the vocabulary is frozen.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        if self.frozen {
            return OOV;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or `OOV` when unknown.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(OOV)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }
}

/// Builds frozen `(users, items)` vocabularies in first-seen order.
///
/// Ads and behaviors share the item vocabulary. The no-history token is
/// appended only when some record has an empty history.
pub fn build_vocab(records: &[ImpressionRecord]) -> (Vocabulary, Vocabulary) {
    let mut users = Vocabulary::new();
    let mut items = Vocabulary::new();
    let mut any_empty = false;
    for r in records {
        users.insert(&r.user_id);
        items.insert(&r.ad_id);
        for b in &r.behavior_ids {
            items.insert(b);
        }
        any_empty |= r.behavior_ids.is_empty();
    }
    if any_empty {
        items.insert(NO_HISTORY_TOKEN);
    }
    users.freeze();
    items.freeze();
    (users, items)
}

/// Fixed-shape index representation of a set of records.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub max_seq_len: usize,
    pub ads: Vec<usize>,
    /// `len × max_seq_len`, row-major, 0-padded.
    pub behaviors: Vec<usize>,
    pub mask: Vec<bool>,
    pub labels: Vec<u8>,
    /// GAUC group per record.
    pub groups: Vec<usize>,
    /// User vocabulary index per record.
    pub users: Vec<usize>,
}

impl EncodedBatch {
    pub fn empty(max_seq_len: usize) -> Self {
        Self {
            max_seq_len,
            ads: Vec::new(),
            behaviors: Vec::new(),
            mask: Vec::new(),
            labels: Vec::new(),
            groups: Vec::new(),
            users: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ads.is_empty()
    }

    pub fn behavior_row(&self, r: usize) -> &[usize] {
        &self.behaviors[r * self.max_seq_len..(r + 1) * self.max_seq_len]
    }

    pub fn mask_row(&self, r: usize) -> &[bool] {
        &self.mask[r * self.max_seq_len..(r + 1) * self.max_seq_len]
    }

    /// Sub-batch with the given records, in the given order.
    pub fn select(&self, rows: &[usize]) -> EncodedBatch {
        let l = self.max_seq_len;
        let mut out = EncodedBatch::empty(l);
        out.behaviors.reserve(rows.len() * l);
        out.mask.reserve(rows.len() * l);
        for &r in rows {
            out.ads.push(self.ads[r]);
            out.behaviors.extend_from_slice(self.behavior_row(r));
            out.mask.extend_from_slice(self.mask_row(r));
            out.labels.push(self.labels[r]);
            out.groups.push(self.groups[r]);
            out.users.push(self.users[r]);
        }
        out
    }

    /// Checks the shape and mask invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let l = self.max_seq_len;
        if l == 0 {
            return Err(Error::InvalidInput("max_seq_len must be positive".into()));
        }
        if self.behaviors.len() != n * l
            || self.mask.len() != n * l
            || self.labels.len() != n
            || self.groups.len() != n
            || self.users.len() != n
        {
            return Err(Error::DimensionMismatch(format!(
                "encoded batch of {n} records has inconsistent field lengths"
            )));
        }
        for r in 0..n {
            let row = self.behavior_row(r);
            let mask = self.mask_row(r);
            if row.iter().zip(mask).any(|(&b, &m)| m != (b != PAD)) {
                return Err(Error::InvalidInput(format!(
                    "record {r}: mask disagrees with padding"
                )));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::NoBehaviors);
            }
            if self.labels[r] > 1 {
                return Err(Error::InvalidInput(format!("record {r}: label not binary")));
            }
        }
        Ok(())
    }
}

/// Counters for the silent parts of encoding.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub records: usize,
    pub oov_ads: usize,
    pub oov_behaviors: usize,
    pub oov_users: usize,
    pub truncated: usize,
    pub empty_history: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub batch: EncodedBatch,
    /// `group_names[g]` is the user id behind group key `g`.
    pub group_names: Vec<String>,
    pub stats: EncodeStats,
}

/// Encodes records against frozen vocabularies.
///
/// Histories longer than `max_seq_len` keep their most recent tail. Group
/// keys number the distinct user ids of `records` in first-seen order, so
/// users unknown to the vocabulary still form separate groups.
pub fn encode(
    records: &[ImpressionRecord],
    users: &Vocabulary,
    items: &Vocabulary,
    max_seq_len: usize,
) -> Result<Encoded> {
    if max_seq_len == 0 {
        return Err(Error::InvalidConfig("max_seq_len must be positive".into()));
    }
    let no_history = items.lookup(NO_HISTORY_TOKEN);
    let mut batch = EncodedBatch::empty(max_seq_len);
    let mut stats = EncodeStats {
        records: records.len(),
        ..Default::default()
    };
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    let mut group_names = Vec::new();

    for r in records {
        let ad = items.lookup(&r.ad_id);
        stats.oov_ads += (ad == OOV) as usize;
        let user = users.lookup(&r.user_id);
        stats.oov_users += (user == OOV) as usize;

        let start = r.behavior_ids.len().saturating_sub(max_seq_len);
        stats.truncated += (start > 0) as usize;
        let mut row = vec![PAD; max_seq_len];
        if r.behavior_ids.is_empty() {
            stats.empty_history += 1;
            row[0] = no_history;
        } else {
            for (slot, token) in row.iter_mut().zip(&r.behavior_ids[start..]) {
                *slot = items.lookup(token);
                stats.oov_behaviors += (*slot == OOV) as usize;
            }
        }

        let next = group_names.len();
        let group = *group_of.entry(r.user_id.as_str()).or_insert_with(|| {
            group_names.push(r.user_id.clone());
            next
        });

        batch.ads.push(ad);
        batch.mask.extend(row.iter().map(|&b| b != PAD));
        batch.behaviors.extend(row);
        batch.labels.push(r.label);
        batch.groups.push(group);
        batch.users.push(user);
    }
    Ok(Encoded {
        batch,
        group_names,
        stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Sort by timestamp; the most recent fraction is held out.
    Temporal,
    /// Seeded shuffle, then cut.
    Random,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(Self::Temporal),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidConfig(format!("unknown split mode {other:?}"))),
        }
    }
}

/// Partitions records into `(train, validation)`.
pub fn split(
    mut records: Vec<ImpressionRecord>,
    mode: SplitMode,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImpressionRecord>, Vec<ImpressionRecord>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    match mode {
        SplitMode::Temporal => records.sort_by_key(|r| r.timestamp),
        SplitMode::Random => SeededRng::new(seed).shuffle(&mut records),
    }
    let n_val = (validation_fraction * records.len() as f64).round() as usize;
    if n_val == 0 || n_val >= records.len() {
        return Err(Error::InvalidInput(format!(
            "split of {} records with fraction {validation_fraction} leaves one side empty",
            records.len()
        )));
    }
    let validation = records.split_off(records.len() - n_val);
    Ok((records, validation))
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<ImpressionRecord>> {
    parse_jsonl(reader, |record: &ImpressionRecord| record.validate())
}

/// Parses one JSON object per non-blank line; errors carry 1-based line numbers.
pub fn parse_jsonl<T, R, V>(reader: R, validate: V) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
    V: Fn(&T) -> Result<()>,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        validate(&value).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<ImpressionRecord>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

pub fn save_jsonl(records: &[ImpressionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), records)
}

/// Parameters of the synthetic click process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub min_behaviors: usize,
    pub max_behaviors: usize,
    pub impressions: usize,
    /// Logit gain per unit of match fraction.
    pub alpha: f64,
    pub base_logit: f64,
    /// Share of a user's behaviors drawn from their dominant cluster.
    pub gamma: f64,
    pub days: u32,
    pub start_ts: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 100,
            num_clusters: 10,
            min_behaviors: 10,
            max_behaviors: 30,
            impressions: 25_000,
            alpha: 4.0,
            base_logit: -1.0,
            gamma: 0.8,
            days: 8,
            start_ts: 1_700_006_400,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.num_clusters == 0 {
            return fail("num_clusters must be at least 1".into());
        }
        if self.num_users == 0 || self.impressions == 0 || self.days == 0 {
            return fail("num_users, impressions and days must be positive".into());
        }
        if self.num_items < self.num_clusters {
            return fail(format!(
                "num_items ({}) must be at least num_clusters ({})",
                self.num_items, self.num_clusters
            ));
        }
        if self.min_behaviors > self.max_behaviors {
            return fail("min_behaviors exceeds max_behaviors".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !self.base_logit.is_finite() {
            return fail("base_logit must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        Ok(())
    }

    pub fn item_id(i: usize) -> String {
        format!("i{i}")
    }

    pub fn user_id(u: usize) -> String {
        format!("u{u}")
    }

    /// Clusters are assigned round-robin.
    pub fn cluster_of(&self, item: usize) -> usize {
        item % self.num_clusters
    }
}

/// Hidden state of a generated dataset, for oracle checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SyntheticConfig,
    pub item_cluster: BTreeMap<String, usize>,
    pub user_dominant_cluster: BTreeMap<String, usize>,
    /// Per record, aligned with the generated record list.
    pub match_fraction: Vec<f64>,
    pub true_p: Vec<f64>,
}

impl GroundTruth {
    pub fn mean_true_p(&self) -> f64 {
        self.true_p.iter().sum::<f64>() / self.true_p.len() as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<ImpressionRecord>,
    pub truth: GroundTruth,
}

/// Generates an ad log where clicks depend on how much of the user's
/// history falls in the shown ad's cluster:
/// `p = sigmoid(base_logit + alpha * match_fraction)`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let k = config.num_clusters;
    let mut rng = SeededRng::new(config.seed);

    let cluster_size = |c: usize| (config.num_items - c).div_ceil(k);
    let mut histories = Vec::with_capacity(config.num_users);
    let mut dominant = Vec::with_capacity(config.num_users);
    for _ in 0..config.num_users {
        let dom = rng.below(k);
        let n = rng.between(config.min_behaviors, config.max_behaviors);
        let history: Vec<usize> = (0..n)
            .map(|_| {
                let c = if k == 1 || rng.bernoulli(config.gamma) {
                    dom
                } else {
                    let c = rng.below(k - 1);
                    if c >= dom {
                        c + 1
                    } else {
                        c
                    }
                };
                c + k * rng.below(cluster_size(c))
            })
            .collect();
        dominant.push(dom);
        histories.push(history);
    }

    let span = i64::from(config.days) * 86_400;
    let mut stamps: Vec<i64> = (0..config.impressions)
        .map(|_| config.start_ts + (rng.uniform() * span as f64) as i64)
        .collect();
    stamps.sort_unstable();

    let mut records = Vec::with_capacity(config.impressions);
    let mut match_fraction = Vec::with_capacity(config.impressions);
    let mut true_p = Vec::with_capacity(config.impressions);
    for ts in stamps {
        let user = rng.below(config.num_users);
        let ad = rng.below(config.num_items);
        let history = &histories[user];
        let ad_cluster = config.cluster_of(ad);
        let matches = history
            .iter()
            .filter(|&&b| config.cluster_of(b) == ad_cluster)
            .count();
        let fraction = if history.is_empty() {
            0.0
        } else {
            matches as f64 / history.len() as f64
        };
        let p = sigmoid(config.base_logit + config.alpha * fraction);
        let label = rng.bernoulli(p) as u8;
        let bid = (rng.uniform_range(0.5, 3.0) * 100.0).round() / 100.0;
        records.push(ImpressionRecord {
            user_id: SyntheticConfig::user_id(user),
            ad_id: SyntheticConfig::item_id(ad),
            behavior_ids: history.iter().map(|&b| SyntheticConfig::item_id(b)).collect(),
            label,
            timestamp: ts,
            bid: Some(bid),
        });
        match_fraction.push(fraction);
        true_p.push(p);
    }

    let truth = GroundTruth {
        config: config.clone(),
        item_cluster: (0..config.num_items)
            .map(|i| (SyntheticConfig::item_id(i), config.cluster_of(i)))
            .collect(),
        user_dominant_cluster: dominant
            .iter()
            .enumerate()
            .map(|(u, &c)| (SyntheticConfig::user_id(u), c))
            .collect(),
        match_fraction,
        true_p,
    };
    Ok(SyntheticData { records, truth })
}
