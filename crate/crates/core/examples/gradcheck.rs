use sparse_memory_lab::experiments::config::{Consumption, PccVariant};
use sparse_memory_lab::experiments::train::gradcheck_language_model;
use sparse_memory_lab::experiments::ExperimentConfig;
use sparse_memory_lab::memory_lookup::LookupKind;
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.model.d = 8;
    cfg.model.d_ff = 16;
    cfg.model.vocab = 12;
    cfg.model.seq_len = 5;
    cfg.training.batch = 2;
    cfg.memory.lookup = Some(LookupKind::Softmax);
    cfg.memory.rank = 2;
    cfg.memory.buckets = 4;
    cfg.memory.top_k = 2;
    for (consumption, variant) in [
        (Consumption::Sum, PccVariant::Simplified),
        (Consumption::AltUp, PccVariant::Simplified),
        (Consumption::AltUp, PccVariant::Full),
    ] {
        cfg.memory.consumption = consumption;
        cfg.altup.variant = variant;
        let report = gradcheck_language_model(&cfg, 1e-5, 1e-4)?;
        println!("{} {variant:?}: max rel err {:.2e} over {} tensors", consumption.name(), report.max_rel_error, report.params.len());
        for p in report.params.iter().filter(|p| p.name.contains("memory") || p.name.contains("pcc")) {
            println!("    {:<28} {:.2e}", p.name, p.max_rel_error);
        }
    }
    Ok(())
}
