//! Trains a small model on a planted-regime synthetic panel and reports
//! validation loss against the uniform baseline ln(402).
//!
//! cargo run --release --example train_synthetic -- [steps] [batch]

use std::time::Instant;

use returnformer::data::{generate_synthetic, split, SplitSpec, SyntheticSpec};
use returnformer::model::{Gpt, ModelConfig};
use returnformer::rng;
use returnformer::train::{train_with, TrainConfig};

fn main() -> returnformer::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(500);
    let batch = args.get(1).copied().unwrap_or(16);

    let syn = generate_synthetic(&SyntheticSpec::default())?;
    let cal = syn.panel.calendar();
    let splits = split(
        &syn.panel,
        &SplitSpec {
            train: (cal[0], cal[699]),
            validation: (cal[700], cal[999]),
            test: (cal[1000], cal[1999]),
        },
    )?;
    let config = ModelConfig {
        block_size: 64,
        d_model: 32,
        n_blocks: 2,
        n_heads: 4,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps,
        batch_size: batch,
        seed: 7,
        eval_interval: 100,
        eval_batches: 8,
        ..TrainConfig::default()
    };
    let model = Gpt::new(config, &mut rng::stream(cfg.seed, "init"))?;
    println!("{} parameters, baseline loss {:.3}", model.num_params(), 402f64.ln());
    let t0 = Instant::now();
    let out = train_with(model, &splits.train, Some(&splits.validation), &cfg, |row| {
        println!(
            "step {:>5}  train {:.4}  val {:.4}  ({:.1}s)",
            row.step,
            row.train_loss,
            row.val_loss.unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
    })?;
    println!("final validation loss {:.4}", out.final_val_loss().unwrap_or(f64::NAN));
    Ok(())
}
