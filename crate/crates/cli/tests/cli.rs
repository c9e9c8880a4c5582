//! End-to-end runs of the `ctr` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use din_ctr::{auc, encode, load_jsonl, Checkpoint, GroundTruth};
use serde_json::Value;
use tempfile::TempDir;

/// A temp directory holding a small config file; runs happen inside it.
struct Workspace {
    dir: TempDir,
}

const SMALL: &str = "\
impressions = 3000
num_users = 60
epochs = 2
record_wall_time = false
";

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn small() -> Self {
        Self::new(SMALL)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ctr"))
            .args(args)
            .args(["--config", "run.toml"])
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "ctr {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "ctr {args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn json(&self, args: &[&str]) -> Value {
        serde_json::from_str(&self.ok(args)).unwrap()
    }

    fn read(&self, name: &str) -> Vec<u8> {
        fs::read(self.path(name)).unwrap()
    }

    /// Dataset plus a trained checkpoint for `model`, named `<model>.ckpt`.
    fn trained(model: &str) -> Self {
        let ws = Self::small();
        ws.ok(&["generate"]);
        let ckpt = format!("{model}.ckpt");
        ws.ok(&["train", "--model", model, "--checkpoint", &ckpt]);
        ws
    }
}

fn lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn write_lines(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

#[test]
fn generate_default_matches_generator_mean() {
    let ws = Workspace::new("");
    let stats = ws.json(&["generate"]);
    assert_eq!(stats["records"], 25_000);
    let n = 25_000.0;
    let truth = GroundTruth::load(ws.path("data.meta.json")).unwrap();
    // Bernoulli sum with varying p: variance is the sum of p(1-p).
    let var: f64 = truth.true_p.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n);
    let empirical = stats["empirical_ctr"].as_f64().unwrap();
    assert!((empirical - truth.mean_true_p()).abs() < 3.0 * var.sqrt());
    assert_eq!(stats["mean_true_p"].as_f64().unwrap(), truth.mean_true_p());
    let positives = stats["positives"].as_f64().unwrap();
    assert_eq!(empirical, positives / n);
    assert_eq!(stats["config"]["impressions"], 25_000);
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let ws = Workspace::small();
    ws.ok(&["generate"]);
    let first = ws.read("data.jsonl");
    let meta = ws.read("data.meta.json");
    ws.ok(&["generate"]);
    assert_eq!(ws.read("data.jsonl"), first);
    assert_eq!(ws.read("data.meta.json"), meta);
    ws.ok(&["generate", "--seed", "9"]);
    assert_ne!(ws.read("data.jsonl"), first);
}

#[test]
fn generate_errors_exit_nonzero() {
    let ws = Workspace::small();
    let err = ws.fails(&["generate", "--set", "impressions=0"]);
    assert!(err.contains("impressions"), "{err}");
    let err = ws.fails(&["generate", "--dataset", "no/such/dir/data.jsonl"]);
    assert!(err.contains("no/such/dir"), "{err}");
    ws.fails(&["generate", "--set", "unknown_key=1"]);
}

#[test]
fn flags_override_set_which_overrides_file() {
    let ws = Workspace::new("impressions = 3000\nnum_users = 60\nepochs = 4\nseed = 3\n");
    ws.ok(&["generate"]);
    let summary = ws.json(&["train", "--set", "epochs=3", "--epochs", "1"]);
    assert_eq!(summary["epochs_run"], 1);
    assert_eq!(summary["config"]["seed"], 3);
    let summary = ws.json(&["train", "--set", "epochs=3"]);
    assert_eq!(summary["epochs_run"], 3);
}

#[test]
fn train_missing_dataset_fails() {
    let ws = Workspace::small();
    let err = ws.fails(&["train"]);
    assert!(err.contains("data.jsonl"), "{err}");
}

#[test]
fn din_and_base_checkpoints_differ_only_in_pooling() {
    let ws = Workspace::small();
    ws.ok(&["generate"]);
    ws.ok(&["train", "--model", "din", "--checkpoint", "din.ckpt"]);
    ws.ok(&["train", "--model", "base", "--checkpoint", "base.ckpt"]);
    let din = Checkpoint::load(ws.path("din.ckpt")).unwrap();
    let base = Checkpoint::load(ws.path("base.ckpt")).unwrap();
    assert!(din.model.config.use_attention);
    assert!(!base.model.config.use_attention);
    let mut cfg = base.model.config.clone();
    cfg.use_attention = true;
    assert_eq!(cfg, din.model.config);
    assert_eq!(din.items, base.items);
    assert_eq!(din.users, base.users);
}

#[test]
fn train_is_deterministic_and_writes_history() {
    let ws = Workspace::small();
    ws.ok(&["generate"]);
    let summary = ws.ok(&["train", "--epochs", "5"]);
    let ckpt = ws.read("model.ckpt");
    let history = String::from_utf8(ws.read("history.csv")).unwrap();
    assert_eq!(ws.ok(&["train", "--epochs", "5"]), summary);
    assert_eq!(ws.read("model.ckpt"), ckpt);
    assert_eq!(String::from_utf8(ws.read("history.csv")).unwrap(), history);

    let rows: Vec<&str> = history.lines().collect();
    assert_eq!(rows[0], "epoch,train_loss,val_loss,val_gauc,seconds");
    assert_eq!(rows.len(), 6);
    for (i, row) in rows[1..].iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], (i + 1).to_string());
        for f in &fields[1..] {
            f.parse::<f64>().unwrap();
        }
    }
}

#[test]
fn patience_writes_best_checkpoint() {
    let ws = Workspace::small();
    ws.ok(&["generate"]);
    let summary = ws.json(&["train", "--set", "patience=1", "--epochs", "3"]);
    assert!(summary["best_epoch"].as_u64().unwrap() >= 1);
    Checkpoint::load(ws.path("model.ckpt.best")).unwrap();
}

#[test]
fn eval_reports_both_modes_and_is_repeatable() {
    let ws = Workspace::trained("din");
    let first = ws.ok(&["eval", "--checkpoint", "din.ckpt"]);
    let report = ws.read("report.json");
    assert_eq!(ws.ok(&["eval", "--checkpoint", "din.ckpt"]), first);
    assert_eq!(ws.read("report.json"), report);
    assert_eq!(first.as_bytes(), report.as_slice());

    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["impressions"]["weight_mode"], "impressions");
    assert_eq!(v["clicks"]["weight_mode"], "clicks");
    assert_eq!(v["impressions"]["auc"], v["clicks"]["auc"]);
    assert_eq!(v["impressions"]["n_records"], 600);
    assert_eq!(v["config"]["checkpoint"], "din.ckpt");
}

#[test]
fn untrained_model_is_near_chance_on_balanced_data() {
    let ws = Workspace::new(
        "impressions = 4000\nnum_users = 80\nalpha = 0.0\nbase_logit = 0.0\n\
         epochs = 1\nlr = 0.0\neval_split = \"all\"\n",
    );
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    let v = ws.json(&["eval"]);
    let auc = v["impressions"]["auc"].as_f64().unwrap();
    assert!((0.45..=0.55).contains(&auc), "{auc}");
}

#[test]
fn eval_rejects_mismatched_model_config() {
    let ws = Workspace::trained("din");
    let err = ws.fails(&["eval", "--checkpoint", "din.ckpt", "--set", "embedding_dim=16"]);
    assert!(err.contains("embedding_dim"), "{err}");
    let err = ws.fails(&["eval", "--checkpoint", "din.ckpt", "--set", "hidden=[16]"]);
    assert!(err.contains("hidden"), "{err}");
    ws.fails(&["eval", "--checkpoint", "missing.ckpt"]);
}

#[test]
fn compare_emits_metric_table() {
    let ws = Workspace::trained("din");
    ws.ok(&["train", "--model", "base", "--checkpoint", "base.ckpt"]);
    let table = ws.ok(&["eval", "--compare", "din.ckpt", "base.ckpt"]);
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["metric", "din", "base"]);
    let metrics: Vec<&str> = rows[1..].iter().map(|r| r[0]).collect();
    assert_eq!(
        metrics,
        [
            "auc",
            "gauc_impressions",
            "gauc_clicks",
            "log_loss",
            "accuracy",
            "records",
            "groups_used",
            "groups_skipped"
        ]
    );
    for r in &rows[1..] {
        assert_eq!(r.len(), 3);
        r[1].parse::<f64>().unwrap();
        r[2].parse::<f64>().unwrap();
    }
    let din: Value = serde_json::from_str(&ws.ok(&["eval", "--checkpoint", "din.ckpt"])).unwrap();
    assert_eq!(
        rows[1][1],
        din["impressions"]["auc"].as_f64().unwrap().to_string()
    );
}

#[test]
fn predict_matches_eval_forward_bit_for_bit() {
    let ws = Workspace::trained("din");
    let records = load_jsonl(ws.path("data.jsonl")).unwrap();
    let sample = &records[..50];
    let rows: Vec<Value> = sample
        .iter()
        .map(|r| serde_json::json!({"user_id": r.user_id, "ad_id": r.ad_id, "behavior_ids": r.behavior_ids}))
        .collect();
    write_lines(&ws.path("queries.jsonl"), &rows);

    let out = lines(&ws.ok(&["predict", "--checkpoint", "din.ckpt", "--input", "queries.jsonl"]));
    assert_eq!(out.len(), sample.len());

    let ckpt = Checkpoint::load(ws.path("din.ckpt")).unwrap();
    let enc = encode(sample, &ckpt.users, &ckpt.items, ckpt.model.config.max_seq_len).unwrap();
    let probs = ckpt.model.predict(&enc.batch).unwrap();
    for ((line, rec), p) in out.iter().zip(sample).zip(&probs) {
        assert_eq!(line["user_id"], rec.user_id.as_str());
        assert_eq!(line["ad_id"], rec.ad_id.as_str());
        assert_eq!(line["p"].as_f64().unwrap().to_bits(), p.to_bits());
    }
    assert!(auc(&probs, &enc.batch.labels).is_ok());

    ws.ok(&[
        "predict",
        "--checkpoint",
        "din.ckpt",
        "--input",
        "queries.jsonl",
        "--output",
        "p.jsonl",
    ]);
    assert_eq!(lines(&String::from_utf8(ws.read("p.jsonl")).unwrap()), out);
}

#[test]
fn predict_handles_unseen_tokens_and_reports_bad_lines() {
    let ws = Workspace::trained("din");
    write_lines(
        &ws.path("q.jsonl"),
        &[
            serde_json::json!({"user_id": "stranger", "ad_id": "never-seen", "behavior_ids": ["nope", "i3"]}),
            serde_json::json!({"user_id": "u1", "ad_id": "i2", "behavior_ids": [], "label": 1}),
        ],
    );
    let out = lines(&ws.ok(&["predict", "--checkpoint", "din.ckpt", "--input", "q.jsonl"]));
    assert_eq!(out.len(), 2);
    for line in &out {
        let p = line["p"].as_f64().unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    fs::write(
        ws.path("bad.jsonl"),
        "{\"user_id\":\"u1\",\"ad_id\":\"i2\"}\n{oops\n",
    )
    .unwrap();
    let err = ws.fails(&["predict", "--checkpoint", "din.ckpt", "--input", "bad.jsonl"]);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn rank_orders_by_ecpm() {
    let ws = Workspace::trained("din");
    let candidates: Vec<Value> = (2..8)
        .map(|i| {
            serde_json::json!({
                "user_id": "u3",
                "ad_id": format!("i{i}"),
                "behavior_ids": ["i1", "i11", "i21"],
                "bid": 0.5 * i as f64,
            })
        })
        .collect();
    write_lines(&ws.path("c.jsonl"), &candidates);
    let out = lines(&ws.ok(&["rank", "--checkpoint", "din.ckpt", "--candidates", "c.jsonl"]));
    assert_eq!(out.len(), candidates.len());
    for w in out.windows(2) {
        assert!(w[0]["ecpm"].as_f64().unwrap() >= w[1]["ecpm"].as_f64().unwrap());
    }
    for line in &out {
        let keys: Vec<&String> = line.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        let (p, bid) = (line["p"].as_f64().unwrap(), line["bid"].as_f64().unwrap());
        assert_eq!(line["ecpm"].as_f64().unwrap(), p * bid);
    }

    write_lines(&ws.path("one.jsonl"), &candidates[..1]);
    let out = ws.ok(&["rank", "--checkpoint", "din.ckpt", "--candidates", "one.jsonl"]);
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn rank_requires_bids() {
    let ws = Workspace::trained("din");
    write_lines(
        &ws.path("c.jsonl"),
        &[
            serde_json::json!({"user_id": "u1", "ad_id": "i4", "behavior_ids": [], "bid": 1.0}),
            serde_json::json!({"user_id": "u1", "ad_id": "i9", "behavior_ids": []}),
        ],
    );
    let err = ws.fails(&["rank", "--checkpoint", "din.ckpt", "--candidates", "c.jsonl"]);
    assert!(err.contains("i9") && err.contains("no bid"), "{err}");
}

#[test]
fn gradcheck_passes_and_repeats() {
    let ws = Workspace::small();
    for model in ["din", "base"] {
        let first = ws.ok(&["gradcheck", "--model", model]);
        let v: Value = serde_json::from_str(&first).unwrap();
        assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
        assert_eq!(v["passed"], true);
        assert_eq!(ws.ok(&["gradcheck", "--model", model]), first);
    }
}

#[test]
fn user_profile_round_trip_through_cli() {
    let ws = Workspace::new(&format!("{SMALL}user_profile = true\n"));
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    let ckpt = Checkpoint::load(ws.path("model.ckpt")).unwrap();
    assert!(ckpt.model.users.is_some());
    ws.ok(&["eval"]);
    let err = ws.fails(&["eval", "--set", "user_profile=false"]);
    assert!(err.contains("user_profile"), "{err}");
}
