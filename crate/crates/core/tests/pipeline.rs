//! The public API end to end: generate, split, encode, train, save, reload.

use din_ctr::{
    build_vocab, encode, generate_synthetic, load_jsonl, rank_ads, save_jsonl, split, train, AdCandidate,
    Checkpoint, DinModel, EvalReport, ModelConfig, SeededRng, SplitMode, SyntheticConfig, TrainConfig,
    WeightMode,
};

fn small() -> SyntheticConfig {
    SyntheticConfig {
        num_users: 50,
        num_items: 40,
        impressions: 2000,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn train_save_reload_predicts_identically() {
    let data = generate_synthetic(&small()).unwrap();
    let (tr, va) = split(data.records, SplitMode::Temporal, 0.2, 11).unwrap();
    assert!(tr.iter().map(|r| r.timestamp).max() <= va.iter().map(|r| r.timestamp).min());

    let (users, items) = build_vocab(&tr);
    let tr = encode(&tr, &users, &items, 16).unwrap();
    let va = encode(&va, &users, &items, 16).unwrap();
    let config = ModelConfig {
        max_seq_len: 16,
        ..ModelConfig::new(items.len(), users.len())
    };
    let model = DinModel::init(config, &mut SeededRng::new(11)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let out = train(model, &tr.batch, &va.batch, &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), 2);
    assert_eq!(out.steps, 2 * tr.batch.len().div_ceil(cfg.batch_size) as u64);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::new(out.model.clone(), users, items)
        .unwrap()
        .save(&path)
        .unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let before = out.model.predict(&va.batch).unwrap();
    assert_eq!(back.model.predict(&va.batch).unwrap(), before);

    let report = EvalReport::compute(
        &before,
        &va.batch.labels,
        &va.batch.groups,
        &va.group_names,
        WeightMode::Clicks,
    )
    .unwrap();
    assert_eq!(report.n_records, va.batch.len());
    assert!(report.groups_csv().starts_with("group,weight,auc\n"));
}

#[test]
fn dataset_file_round_trip() {
    let data = generate_synthetic(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_jsonl(&data.records, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = load_jsonl(&path).unwrap();
    assert_eq!(loaded, data.records);
    save_jsonl(&loaded, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn ranking_example_prefers_higher_ecpm() {
    let ranked = rank_ads(&[
        AdCandidate {
            ad_id: "a".into(),
            bid: 1.0,
            predicted_ctr: 0.1,
        },
        AdCandidate {
            ad_id: "b".into(),
            bid: 3.0,
            predicted_ctr: 0.05,
        },
    ])
    .unwrap();
    assert_eq!(ranked[0].ad_id, "b");
    assert!((ranked[0].ecpm - 0.15).abs() < 1e-15);
}
