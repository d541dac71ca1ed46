use sparse_memory_lab::experiments::{checkpoint, train_model, ExperimentConfig, LanguageModel};
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("sparse-memory-lab-checkpoint-example");
    let mut cfg = ExperimentConfig::default();
    cfg.training.steps = 20;
    cfg.training.eval_every = 10;
    let out = train_model(&cfg, Some(&dir))?;

    let path = dir.join("checkpoint.bin");
    let ck = checkpoint::load(&path)?;
    println!("{} at step {}:", path.display(), ck.step);
    for (name, t) in ck.tensors.iter().take(6) {
        println!("  {name:<24} {:?}", t.shape());
    }
    println!("  ... {} tensors", ck.tensors.len());

    let mut fresh = LanguageModel::new(&cfg)?;
    checkpoint::restore(&path, fresh.params_mut())?;
    let ids: Vec<usize> = (0..cfg.model.seq_len).collect();
    let same = fresh.predict(&ids)? == out.trainer.model.predict(&ids)?;
    println!("restored model reproduces predictions: {same}");
    Ok(())
}
