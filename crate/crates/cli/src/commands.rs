//! Subcommand bodies plus the pipeline steps they share.
//!
//! Every command writes its machine-readable summary to `out`; file
//! outputs go to the paths in the resolved config.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use din_ctr::data::{parse_jsonl, write_jsonl, EncodeStats, Encoded};
use din_ctr::model::EmbeddingTable;
use din_ctr::optim::check_model_gradients;
use din_ctr::{
    build_vocab, encode, generate_synthetic, load_jsonl, rank_ads, save_jsonl, split, train as fit,
    AdCandidate, Checkpoint, DinModel, EncodedBatch, Error, EvalReport, ImpressionRecord, ModelConfig,
    SeededRng, TrainOutcome, Vocabulary, WeightMode,
};
use serde::{Deserialize, Serialize};

use crate::config::{EvalSplit, RunConfig};

/// Stream id for model initialization, kept apart from the data and
/// shuffle streams of the same seed.
pub const INIT_STREAM: u64 = 1;

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

fn write_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<Vec<ImpressionRecord>> {
    load_jsonl(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

// ---------------------------------------------------------------- generate

#[derive(Serialize)]
struct GenerateSummary<'a> {
    records: usize,
    positives: usize,
    empirical_ctr: f64,
    mean_true_p: f64,
    dataset: &'a Path,
    metadata: &'a Path,
    config: &'a RunConfig,
}

pub fn generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let data = generate_synthetic(&cfg.synthetic())?;
    save_jsonl(&data.records, &cfg.dataset)
        .with_context(|| format!("writing dataset {}", cfg.dataset.display()))?;
    data.truth
        .save(&cfg.metadata)
        .with_context(|| format!("writing metadata {}", cfg.metadata.display()))?;
    let positives = data.records.iter().filter(|r| r.label == 1).count();
    write_json(
        out,
        &GenerateSummary {
            records: data.records.len(),
            positives,
            empirical_ctr: din_ctr::ctr(positives as u64, data.records.len() as u64)?,
            mean_true_p: data.truth.mean_true_p(),
            dataset: &cfg.dataset,
            metadata: &cfg.metadata,
            config: cfg,
        },
    )
}

// ------------------------------------------------------------------- train

/// Train/validation data encoded against the training vocabulary.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub users: Vocabulary,
    pub items: Vocabulary,
    pub train: Encoded,
    pub validation: Encoded,
}

pub fn split_records(
    cfg: &RunConfig,
    records: Vec<ImpressionRecord>,
) -> Result<(Vec<ImpressionRecord>, Vec<ImpressionRecord>)> {
    Ok(split(records, cfg.split, cfg.validation_fraction, cfg.seed)?)
}

/// Splits, builds the vocabulary from the training side only, and encodes.
pub fn prepare(cfg: &RunConfig, records: Vec<ImpressionRecord>) -> Result<Prepared> {
    let (train, validation) = split_records(cfg, records)?;
    let (users, items) = build_vocab(&train);
    let train = encode(&train, &users, &items, cfg.max_seq_len)?;
    let validation = encode(&validation, &users, &items, cfg.max_seq_len)?;
    Ok(Prepared {
        users,
        items,
        train,
        validation,
    })
}

pub fn init_model(cfg: &RunConfig, prepared: &Prepared) -> Result<DinModel> {
    let config = cfg.model_config(prepared.items.len(), prepared.users.len());
    Ok(DinModel::init(
        config,
        &mut SeededRng::derive(cfg.seed, INIT_STREAM),
    )?)
}

pub fn fit_prepared(cfg: &RunConfig, prepared: &Prepared) -> Result<TrainOutcome> {
    let model = init_model(cfg, prepared)?;
    Ok(fit(
        model,
        &prepared.train.batch,
        &prepared.validation.batch,
        &cfg.train_config(),
    )?)
}

fn best_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    train_records: usize,
    validation_records: usize,
    item_vocab_size: usize,
    user_vocab_size: usize,
    parameters: usize,
    epochs_run: usize,
    steps: u64,
    train_loss: f64,
    val_loss: Option<f64>,
    val_gauc: Option<f64>,
    best_epoch: Option<usize>,
    best_val_gauc: Option<f64>,
    train_encoding: &'a EncodeStats,
    validation_encoding: &'a EncodeStats,
    checkpoint: &'a Path,
    best_checkpoint: Option<PathBuf>,
    history: &'a Path,
    config: &'a RunConfig,
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let records = load_dataset(&cfg.dataset)?;
    let prepared = prepare(cfg, records)?;
    let outcome = fit_prepared(cfg, &prepared)?;

    let save = |model: &DinModel, path: &Path| -> Result<()> {
        let ckpt = Checkpoint::new(model.clone(), prepared.users.clone(), prepared.items.clone())?;
        write_file(path, &ckpt.to_bytes()?)
    };
    save(&outcome.model, &cfg.checkpoint)?;
    let best_checkpoint = match &outcome.best {
        Some(best) => {
            let path = best_path(&cfg.checkpoint);
            save(&best.model, &path)?;
            Some(path)
        }
        None => None,
    };
    write_file(
        &cfg.history,
        outcome.history.to_csv(cfg.record_wall_time).as_bytes(),
    )?;

    let last = outcome.history.epochs.last().expect("at least one epoch");
    write_json(
        out,
        &TrainSummary {
            train_records: prepared.train.batch.len(),
            validation_records: prepared.validation.batch.len(),
            item_vocab_size: prepared.items.len(),
            user_vocab_size: prepared.users.len(),
            parameters: outcome.model.num_parameters(),
            epochs_run: outcome.history.epochs.len(),
            steps: outcome.steps,
            train_loss: last.train_loss,
            val_loss: last.val_loss,
            val_gauc: last.val_gauc,
            best_epoch: outcome.best.as_ref().map(|b| b.epoch),
            best_val_gauc: outcome.best.as_ref().map(|b| b.val_gauc),
            train_encoding: &prepared.train.stats,
            validation_encoding: &prepared.validation.stats,
            checkpoint: &cfg.checkpoint,
            best_checkpoint,
            history: &cfg.history,
            config: cfg,
        },
    )
}

// -------------------------------------------------------------------- eval

/// Metrics under both GAUC weightings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub split: EvalSplit,
    pub use_attention: bool,
    pub impressions: EvalReport,
    pub clicks: EvalReport,
    pub config: RunConfig,
}

/// Records of the configured evaluation split, cut exactly as `train` cut them.
pub fn eval_records(cfg: &RunConfig) -> Result<Vec<ImpressionRecord>> {
    let records = load_dataset(&cfg.dataset)?;
    Ok(match cfg.eval_split {
        EvalSplit::All => records,
        EvalSplit::Train => split_records(cfg, records)?.0,
        EvalSplit::Validation => split_records(cfg, records)?.1,
    })
}

pub fn evaluate(ckpt: &Checkpoint, records: &[ImpressionRecord]) -> Result<(EvalReport, EvalReport)> {
    let enc = encode(records, &ckpt.users, &ckpt.items, ckpt.model.config.max_seq_len)?;
    let probs = ckpt.model.predict(&enc.batch)?;
    let b = &enc.batch;
    let report = |mode| EvalReport::compute(&probs, &b.labels, &b.groups, &enc.group_names, mode);
    Ok((report(WeightMode::Impressions)?, report(WeightMode::Clicks)?))
}

fn eval_one(cfg: &RunConfig, path: &Path, records: &[ImpressionRecord]) -> Result<EvalOutput> {
    let ckpt = load_checkpoint(path)?;
    cfg.check_checkpoint(&ckpt.model.config)?;
    let (impressions, clicks) = evaluate(&ckpt, records)?;
    Ok(EvalOutput {
        checkpoint: path.to_path_buf(),
        split: cfg.eval_split,
        use_attention: ckpt.model.config.use_attention,
        impressions,
        clicks,
        config: cfg.clone(),
    })
}

pub fn eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let records = eval_records(cfg)?;
    let report = eval_one(cfg, &cfg.checkpoint, &records)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write_file(&cfg.report, text.as_bytes())?;
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn column_name(path: &Path, other: &Path) -> String {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned());
    match (stem(path), stem(other)) {
        (Some(a), Some(b)) if a != b => a,
        _ => path.display().to_string(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

type MetricRow = (&'static str, fn(&EvalOutput) -> String);

/// One row per metric, one column per checkpoint.
pub fn comparison_csv(names: [&str; 2], reports: [&EvalOutput; 2]) -> String {
    let rows: [MetricRow; 8] = [
        ("auc", |r| r.impressions.auc.to_string()),
        ("gauc_impressions", |r| r.impressions.gauc.to_string()),
        ("gauc_clicks", |r| r.clicks.gauc.to_string()),
        ("log_loss", |r| r.impressions.log_loss.to_string()),
        ("accuracy", |r| r.impressions.accuracy.to_string()),
        ("records", |r| r.impressions.n_records.to_string()),
        ("groups_used", |r| r.impressions.n_groups_used.to_string()),
        ("groups_skipped", |r| r.impressions.n_groups_skipped.to_string()),
    ];
    let mut out = format!("metric,{},{}\n", csv_field(names[0]), csv_field(names[1]));
    for (metric, value) in rows {
        out.push_str(&format!("{metric},{},{}\n", value(reports[0]), value(reports[1])));
    }
    out
}

pub fn compare(cfg: &RunConfig, a: &Path, b: &Path, out: &mut dyn Write) -> Result<()> {
    let records = eval_records(cfg)?;
    let ra = eval_one(cfg, a, &records)?;
    let rb = eval_one(cfg, b, &records)?;
    let names = [column_name(a, b), column_name(b, a)];
    out.write_all(comparison_csv([&names[0], &names[1]], [&ra, &rb]).as_bytes())?;
    Ok(())
}

// ----------------------------------------------------------------- predict

/// A record to score; the label is ignored when present.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub user_id: String,
    pub ad_id: String,
    #[serde(default)]
    pub behavior_ids: Vec<String>,
    #[serde(default)]
    pub label: Option<u8>,
    #[serde(default)]
    pub ts: Option<i64>,
    #[serde(default)]
    pub bid: Option<f64>,
}

impl Query {
    fn to_record(&self) -> ImpressionRecord {
        ImpressionRecord {
            user_id: self.user_id.clone(),
            ad_id: self.ad_id.clone(),
            behavior_ids: self.behavior_ids.clone(),
            label: 0,
            timestamp: self.ts.unwrap_or(0),
            bid: self.bid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: String,
    pub ad_id: String,
    pub p: f64,
}

fn read_queries(path: &Path, validate: impl Fn(&Query) -> din_ctr::Result<()>) -> Result<Vec<Query>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_jsonl(BufReader::new(file), validate).with_context(|| format!("reading {}", path.display()))
}

fn check_label(q: &Query) -> din_ctr::Result<()> {
    match q.label {
        Some(l) if l > 1 => Err(Error::InvalidInput(format!("label must be 0 or 1, got {l}"))),
        _ => Ok(()),
    }
}

/// Probabilities through the same forward pass `eval` uses.
pub fn score(ckpt: &Checkpoint, queries: &[Query]) -> Result<Vec<f64>> {
    let records: Vec<ImpressionRecord> = queries.iter().map(Query::to_record).collect();
    let enc = encode(&records, &ckpt.users, &ckpt.items, ckpt.model.config.max_seq_len)?;
    Ok(ckpt.model.predict(&enc.batch)?)
}

fn sink<'a>(path: Option<&Path>, out: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(out),
    })
}

pub fn predict(cfg: &RunConfig, input: &Path, output: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    cfg.check_checkpoint(&ckpt.model.config)?;
    let queries = read_queries(input, check_label)?;
    let probs = score(&ckpt, &queries)?;
    let rows: Vec<Prediction> = queries
        .iter()
        .zip(probs)
        .map(|(q, p)| Prediction {
            user_id: q.user_id.clone(),
            ad_id: q.ad_id.clone(),
            p,
        })
        .collect();
    write_jsonl(sink(output, out)?, &rows)?;
    Ok(())
}

// -------------------------------------------------------------------- rank

pub fn rank(cfg: &RunConfig, candidates: &Path, output: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    cfg.check_checkpoint(&ckpt.model.config)?;
    let queries = read_queries(candidates, |q| {
        check_label(q)?;
        match q.bid {
            None => Err(Error::InvalidInput(format!("candidate {} has no bid", q.ad_id))),
            Some(b) if !(b >= 0.0 && b.is_finite()) => Err(Error::InvalidInput(format!(
                "candidate {} has invalid bid {b}",
                q.ad_id
            ))),
            Some(_) => Ok(()),
        }
    })?;
    if queries.is_empty() {
        bail!("no candidates in {}", candidates.display());
    }
    let probs = score(&ckpt, &queries)?;
    let pool: Vec<AdCandidate> = queries
        .iter()
        .zip(probs)
        .map(|(q, p)| AdCandidate {
            ad_id: q.ad_id.clone(),
            bid: q.bid.expect("validated"),
            predicted_ctr: p,
        })
        .collect();
    write_jsonl(sink(output, out)?, &rank_ads(&pool)?)?;
    Ok(())
}

// --------------------------------------------------------------- gradcheck

const GC_ITEMS: usize = 12;
const GC_USERS: usize = 4;
const GC_SEQ: usize = 6;

/// A d=4, hidden=(8,) model with embeddings widened to ±0.5 so attention
/// is visibly non-uniform, and a random 4-record batch.
pub fn gradcheck_fixture(cfg: &RunConfig) -> Result<(DinModel, EncodedBatch)> {
    let mut rng = SeededRng::new(cfg.seed);
    let config = ModelConfig {
        item_vocab_size: GC_ITEMS,
        user_vocab_size: GC_USERS,
        embedding_dim: 4,
        hidden: vec![8],
        max_seq_len: GC_SEQ,
        temperature: cfg.temperature,
        use_attention: cfg.model.use_attention(),
        use_user_profile: cfg.user_profile,
    };
    let mut model = DinModel::init(config, &mut rng)?;
    model.items = EmbeddingTable::uniform(GC_ITEMS, 4, 0.5, &mut rng);
    if model.users.is_some() {
        model.users = Some(EmbeddingTable::uniform(GC_USERS, 4, 0.5, &mut rng));
    }

    let mut batch = EncodedBatch::empty(GC_SEQ);
    for r in 0..4 {
        let len = rng.between(1, GC_SEQ);
        let mut row = vec![0; GC_SEQ];
        for slot in &mut row[..len] {
            *slot = rng.between(1, GC_ITEMS - 1);
        }
        batch.ads.push(rng.between(2, GC_ITEMS - 1));
        batch.mask.extend(row.iter().map(|&x| x != 0));
        batch.behaviors.extend(row);
        batch.labels.push((r % 2) as u8);
        batch.groups.push(r);
        batch.users.push(rng.between(2, GC_USERS - 1));
    }
    Ok((model, batch))
}

#[derive(Serialize)]
struct GradcheckSummary<'a> {
    use_attention: bool,
    parameters: usize,
    eps: f64,
    threshold: f64,
    max_rel_error: f64,
    worst_index: usize,
    analytic: f64,
    numeric: f64,
    passed: bool,
    config: &'a RunConfig,
}

pub fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let (model, batch) = gradcheck_fixture(cfg)?;
    let report = check_model_gradients(&model, &batch, cfg.l2_lambda, GRADCHECK_EPS)?;
    let passed = report.max_rel_error < GRADCHECK_THRESHOLD;
    write_json(
        out,
        &GradcheckSummary {
            use_attention: model.config.use_attention,
            parameters: model.num_parameters(),
            eps: GRADCHECK_EPS,
            threshold: GRADCHECK_THRESHOLD,
            max_rel_error: report.max_rel_error,
            worst_index: report.worst_index,
            analytic: report.analytic,
            numeric: report.numeric,
            passed,
            config: cfg,
        },
    )?;
    Ok(passed)
}
