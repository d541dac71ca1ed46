//! Toy-scale training, lookup sweeps, the input-versus-output embedding
//! experiment, configuration, checkpoints and the command line.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod model;
pub mod optim;
pub mod theorem2;
pub mod train;

pub use bench::{run_lookup_benchmark, BenchRow};
pub use config::ExperimentConfig;
pub use corpus::{generate_markov_corpus, MarkovChain, MarkovCorpus};
pub use model::{LanguageModel, ParamCounts};
pub use theorem2::{run_theorem2_experiment, Architecture, Theorem2Row};
pub use train::{train_model, MetricsRow, TrainOutcome, Trainer};

/// Formats a float with 9 significant digits in its shortest exact form.
pub fn fmt_float(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting() {
        assert_eq!(fmt_float(0.5), "0.5");
        assert_eq!(fmt_float(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_float(123456789012.0), "123456789000");
        assert_eq!(fmt_float(2.0), "2");
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }
}
