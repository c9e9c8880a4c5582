//! Trains DIN and the uniform-pooling baseline on one synthetic dataset and
//! prints validation metrics per epoch next to the Bayes-optimal predictor
//! (the generator's true click probability).
//!
//! `cargo run --release -p din-ctr --example compare -- [seed] [alpha] [epochs]`

use din_ctr::data::DEFAULT_MAX_SEQ_LEN;
use din_ctr::{
    auc, build_vocab, encode, gauc, generate_synthetic, split, train, DinModel, ModelConfig, SeededRng,
    SplitMode, SyntheticConfig, TrainConfig, WeightMode,
};

const VALIDATION_FRACTION: f64 = 0.2;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() -> din_ctr::Result<()> {
    let seed: u64 = arg(1, 1);
    let alpha: f64 = arg(2, 4.0);
    let epochs: usize = arg(3, 5);

    let data = generate_synthetic(&SyntheticConfig {
        alpha,
        seed,
        ..Default::default()
    })?;

    // The temporal split is a stable sort by timestamp; mirror it to line
    // the true probabilities up with the validation rows.
    let mut order: Vec<usize> = (0..data.records.len()).collect();
    order.sort_by_key(|&i| data.records[i].timestamp);
    let n_val = (VALIDATION_FRACTION * order.len() as f64).round() as usize;
    let true_p: Vec<f64> = order[order.len() - n_val..]
        .iter()
        .map(|&i| data.truth.true_p[i])
        .collect();

    let (train_set, val_set) = split(data.records, SplitMode::Temporal, VALIDATION_FRACTION, seed)?;
    let (users, items) = build_vocab(&train_set);
    let tr = encode(&train_set, &users, &items, DEFAULT_MAX_SEQ_LEN)?;
    let va = encode(&val_set, &users, &items, DEFAULT_MAX_SEQ_LEN)?;
    let labels = &va.batch.labels;

    println!(
        "bayes: auc {:.4} gauc {:.4}",
        auc(&true_p, labels)?,
        gauc(&true_p, labels, &va.batch.groups, WeightMode::Impressions)?.value
    );

    let config = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    for use_attention in [true, false] {
        let model_config = ModelConfig {
            use_attention,
            ..ModelConfig::new(items.len(), users.len())
        };
        let model = DinModel::init(model_config, &mut SeededRng::derive(seed, 1))?;
        let started = std::time::Instant::now();
        let out = train(model, &tr.batch, &va.batch, &config)?;
        let name = if use_attention { "din" } else { "base" };
        for e in &out.history.epochs {
            println!(
                "{name} epoch {} train {:.4} val {:.4} gauc {:.4}",
                e.epoch,
                e.train_loss,
                e.val_loss.unwrap_or(f64::NAN),
                e.val_gauc.unwrap_or(f64::NAN)
            );
        }
        println!("{name} took {:.1}s", started.elapsed().as_secs_f64());
    }
    Ok(())
}
