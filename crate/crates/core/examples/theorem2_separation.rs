//! Feeding a looked-up vector only at the input versus at the output layer.

use sparse_memory_lab::experiments::theorem2::{median_test_mse, run_theorem2_experiment, Architecture, Theorem2Model, Theorem2Task};
use sparse_memory_lab::experiments::ExperimentConfig;
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    let mut s = ExperimentConfig::default().theorem2;
    s.seeds = 3;
    s.steps = 800;

    let task = Theorem2Task::generate(&s, 0)?;
    let oracle = Theorem2Model::per_layer_oracle(&task)?;
    println!("per-layer model with the generator copied in: test mse {:.3e}", oracle.mse(&task.test)?);

    let rows = run_theorem2_experiment(&s, 0)?;
    for &m in &s.width_multipliers {
        let w = m * s.d;
        for arch in [Architecture::InputOnly, Architecture::PerLayer] {
            println!("{:<10} width {w:>3}: median test mse {:.4e}", arch.name(), median_test_mse(&rows, arch, w));
        }
    }
    Ok(())
}
