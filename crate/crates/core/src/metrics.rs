//! AUC, group-weighted AUC, log loss, accuracy, and the CTR/eCPM formulas
//! used to rank ad candidates.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::optim::log_loss;

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {l} is not binary")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    Ok(())
}

/// Mann-Whitney AUC with midranks for ties, in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of positives keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let positives = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        // Ranks start+1..=end; their midrank doubled is start + end + 1.
        twice_rank_sum += positives * (start + end + 1) as u128;
        start = end;
    }
    let n_pos = n_pos as u128;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg as u128) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Impressions,
    Clicks,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impressions" => Ok(Self::Impressions),
            "clicks" => Ok(Self::Clicks),
            other => Err(Error::InvalidConfig(format!("unknown weight mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAuc {
    pub group: usize,
    pub weight: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gauc {
    pub value: f64,
    pub groups: Vec<GroupAuc>,
    pub n_groups_used: usize,
    pub n_groups_skipped: usize,
}

/// Weighted mean of per-group AUCs.
///
/// Groups without both classes are skipped (and, in click mode, so are
/// groups with no clicks). Weights are normalized before the sum, so a
/// single usable group reproduces its AUC exactly.
pub fn gauc(scores: &[f64], labels: &[u8], groups: &[usize], mode: WeightMode) -> Result<Gauc> {
    check_labels(scores, labels)?;
    if groups.len() != scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} group keys",
            scores.len(),
            groups.len()
        )));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let total = members.len();
    let mut table = Vec::new();
    for (&group, idx) in &members {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let clicks = l.iter().filter(|&&y| y == 1).count();
        if clicks == 0 || clicks == l.len() {
            continue;
        }
        let weight = match mode {
            WeightMode::Impressions => l.len() as f64,
            WeightMode::Clicks => clicks as f64,
        };
        table.push(GroupAuc {
            group,
            weight,
            auc: auc(&s, &l)?,
        });
    }
    if table.is_empty() {
        return Err(Error::NoUsableGroups(total));
    }
    let weight_sum: f64 = table.iter().map(|g| g.weight).sum();
    let value = table.iter().map(|g| (g.weight / weight_sum) * g.auc).sum();
    Ok(Gauc {
        value,
        n_groups_used: table.len(),
        n_groups_skipped: total - table.len(),
        groups: table,
    })
}

/// Share of records where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_labels(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == (y == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Clicks per impression.
pub fn ctr(clicks: u64, impressions: u64) -> Result<f64> {
    if impressions == 0 {
        return Err(Error::InvalidInput("CTR needs at least one impression".into()));
    }
    if clicks > impressions {
        return Err(Error::InvalidInput(format!(
            "{clicks} clicks exceed {impressions} impressions"
        )));
    }
    Ok(clicks as f64 / impressions as f64)
}

/// Expected value of one impression, `ctr * bid` (no per-mille factor).
pub fn ecpm(ctr: f64, bid: f64) -> Result<f64> {
    if !(bid >= 0.0 && bid.is_finite()) {
        return Err(Error::InvalidInput(format!("bid must be nonnegative, got {bid}")));
    }
    if !(0.0..=1.0).contains(&ctr) {
        return Err(Error::InvalidInput(format!("ctr must lie in [0, 1], got {ctr}")));
    }
    Ok(ctr * bid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdCandidate {
    pub ad_id: String,
    pub bid: f64,
    pub predicted_ctr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAd {
    pub ad_id: String,
    pub p: f64,
    pub bid: f64,
    pub ecpm: f64,
}

/// Sorts by eCPM descending, then `ad_id` ascending.
pub fn rank_ads(candidates: &[AdCandidate]) -> Result<Vec<RankedAd>> {
    let mut ranked = candidates
        .iter()
        .map(|c| {
            Ok(RankedAd {
                ad_id: c.ad_id.clone(),
                p: c.predicted_ctr,
                bid: c.bid,
                ecpm: ecpm(c.predicted_ctr, c.bid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| match b.ecpm.total_cmp(&a.ecpm) {
        Ordering::Equal => a.ad_id.cmp(&b.ad_id),
        o => o,
    });
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub weight: f64,
    pub auc: f64,
}

/// All evaluation metrics of one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub gauc: f64,
    pub weight_mode: WeightMode,
    pub log_loss: f64,
    pub accuracy: f64,
    pub n_records: usize,
    pub n_groups_used: usize,
    pub n_groups_skipped: usize,
    pub groups: Vec<GroupRow>,
}

impl EvalReport {
    /// `group_names[g]` labels group key `g` in the per-group table.
    pub fn compute(
        scores: &[f64],
        labels: &[u8],
        groups: &[usize],
        group_names: &[String],
        mode: WeightMode,
    ) -> Result<Self> {
        let g = gauc(scores, labels, groups, mode)?;
        let name = |k: usize| group_names.get(k).cloned().unwrap_or_else(|| k.to_string());
        Ok(Self {
            auc: auc(scores, labels)?,
            gauc: g.value,
            weight_mode: mode,
            log_loss: log_loss(scores, labels)?,
            accuracy: accuracy(scores, labels, 0.5)?,
            n_records: scores.len(),
            n_groups_used: g.n_groups_used,
            n_groups_skipped: g.n_groups_skipped,
            groups: g
                .groups
                .iter()
                .map(|row| GroupRow {
                    group: name(row.group),
                    weight: row.weight,
                    auc: row.auc,
                })
                .collect(),
        })
    }

    /// `group,weight,auc` with a header line.
    pub fn groups_csv(&self) -> String {
        let mut out = String::from("group,weight,auc\n");
        for g in &self.groups {
            out.push_str(&format!("{},{},{}\n", csv_field(&g.group), g.weight, g.auc));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
