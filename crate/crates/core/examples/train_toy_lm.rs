//! Baseline vs AltUp on the same corpus and seed.
//!
//! ```bash
//! cargo run --release --example train_toy_lm -- 400
//! ```

use sparse_memory_lab::experiments::config::Consumption;
use sparse_memory_lab::experiments::{fmt_float, train_model, ExperimentConfig};
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut cfg = ExperimentConfig::default();
    cfg.training.steps = steps;
    cfg.training.eval_every = (steps / 4).max(1);
    for consumption in [Consumption::None, Consumption::AltUp] {
        cfg.memory.consumption = consumption;
        let out = train_model(&cfg, None)?;
        println!("{} (embedding {}, non-embedding {})", consumption.name(), out.counts.embedding, out.counts.non_embedding);
        for r in &out.rows {
            println!("  step {:>5} train {} eval {} acc {}", r.step, fmt_float(r.train_loss), fmt_float(r.eval_loss), fmt_float(r.eval_accuracy));
        }
        if let Some((floor, _)) = out.eval_floor {
            println!("  entropy floor on the eval stream {}", fmt_float(floor));
        }
    }
    Ok(())
}
