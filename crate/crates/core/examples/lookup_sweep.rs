//! Rank x buckets sweep with a short training run per cell.

use sparse_memory_lab::experiments::bench::write_csv;
use sparse_memory_lab::experiments::config::BenchEntry;
use sparse_memory_lab::experiments::{run_lookup_benchmark, ExperimentConfig};
use sparse_memory_lab::memory_lookup::LookupKind;
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.model.d = 16;
    cfg.model.d_ff = 32;
    cfg.training.steps = 60;
    cfg.training.eval_every = 60;
    let mut grid = Vec::new();
    for lookup in [LookupKind::Softmax, LookupKind::HyperplaneLsh] {
        for rank in [0, 4] {
            for buckets in [8, 32] {
                grid.push(BenchEntry { lookup, rank, buckets });
            }
        }
    }
    let rows = run_lookup_benchmark(&cfg, &grid)?;
    write_csv(std::io::stdout().lock(), &rows)
}
