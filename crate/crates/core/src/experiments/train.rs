//! Next-token training on a generated corpus.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::experiments::checkpoint;
use crate::experiments::config::ExperimentConfig;
use crate::experiments::corpus::{generate_markov_corpus_with, read_byte_corpus, MarkovChain};
use crate::experiments::fmt_float;
use crate::experiments::model::{split_windows, LanguageModel, ParamCounts};
use crate::experiments::optim::Optimizer;
use crate::tensor_nn::gradcheck::{finite_diff_check, GradCheckReport};
use crate::tensor_nn::init::{derive_seed, seeded, SeededRng};
use crate::tensor_nn::tape::Tape;
use crate::tensor_nn::tensor::Tensor;

/// Train and held-out token streams.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    /// Present for generated corpora.
    pub chain: Option<MarkovChain>,
}

impl CorpusSplit {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let c = &cfg.corpus;
        let (tokens, chain) = match &c.path {
            Some(path) => (read_byte_corpus(path)?, None),
            None => {
                let corpus = generate_markov_corpus_with(
                    cfg.model.vocab,
                    c.alpha,
                    c.transition_seed,
                    c.length,
                    derive_seed(c.transition_seed, 7),
                )?;
                (corpus.tokens, Some(corpus.chain))
            }
        };
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.model.vocab) {
            return Err(Error::OutOfVocabulary { id: bad, n: cfg.model.vocab });
        }
        let cut = tokens.len() - (tokens.len() as f64 * c.eval_fraction).round() as usize;
        Ok(Self { train: tokens[..cut].to_vec(), eval: tokens[cut..].to_vec(), chain })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training loss since the previous row (nats per token).
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub counts: ParamCounts,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingRow {
    pub step: usize,
    pub examples_per_sec: f64,
}

pub const METRICS_HEADER: &str = "step,train_loss,eval_loss,eval_accuracy,embedding_params,non_embedding_params";
pub const TIMING_HEADER: &str = "step,examples_per_sec";

/// A model, its optimizer state and the seeded streams that drive training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: LanguageModel,
    optimizer: Optimizer,
    batch_rng: SeededRng,
    jitter_rng: SeededRng,
    use_jitter: bool,
    batch: usize,
    eval_windows: Vec<Vec<usize>>,
    corpus: CorpusSplit,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Self::with_corpus(cfg, CorpusSplit::from_config(cfg)?)
    }

    pub fn with_corpus(cfg: &ExperimentConfig, corpus: CorpusSplit) -> Result<Self> {
        let model = LanguageModel::new(cfg)?;
        let seq = cfg.model.seq_len;
        let need = cfg.training.eval_batches * cfg.training.batch;
        let eval_windows: Vec<Vec<usize>> = corpus.eval.chunks_exact(seq + 1).take(need).map(<[usize]>::to_vec).collect();
        if eval_windows.len() < need {
            return Err(Error::Config(format!(
                "held-out stream has {} windows of {} tokens, need {need}",
                eval_windows.len(),
                seq + 1
            )));
        }
        if corpus.train.len() <= seq + 1 {
            return Err(Error::Config("training stream shorter than one window".into()));
        }
        let optimizer = Optimizer::new(cfg.training.optimizer, cfg.training.learning_rate, model.params());
        let seed = cfg.training.seed;
        Ok(Self {
            model,
            optimizer,
            batch_rng: seeded(derive_seed(seed, 2)),
            jitter_rng: seeded(derive_seed(seed, 3)),
            use_jitter: cfg.training.jitter,
            batch: cfg.training.batch,
            eval_windows,
            corpus,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn corpus(&self) -> &CorpusSplit {
        &self.corpus
    }

    pub fn eval_windows(&self) -> &[Vec<usize>] {
        &self.eval_windows
    }

    pub fn sample_batch(&mut self) -> Vec<Vec<usize>> {
        let seq = self.model.seq_len();
        let hi = self.corpus.train.len() - (seq + 1);
        (0..self.batch)
            .map(|_| {
                let start = self.batch_rng.gen_range(0..=hi);
                self.corpus.train[start..start + seq + 1].to_vec()
            })
            .collect()
    }

    /// One optimizer step on a fresh batch; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let windows = self.sample_batch();
        self.step += 1;
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape);
        let jitter = if self.use_jitter { Some(&mut self.jitter_rng) } else { None };
        let loss = self.model.loss(&mut tape, &bound, &windows, jitter)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence { step: self.step, detail: format!("training loss {value}") });
        }
        let grads = tape.backward(loss)?;
        let grads = self.model.params().collect_grads(&bound, &grads);
        if let Some(bad) = grads.iter().position(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite gradient for {}", self.model.params().name(self.model.params().ids().nth(bad).expect("index"))),
            });
        }
        self.optimizer.step(self.model.params_mut(), &grads)?;
        Ok(value)
    }

    /// Mean loss and next-token accuracy over the fixed held-out windows.
    pub fn evaluate(&self) -> Result<EvalResult> {
        let seq = self.model.seq_len();
        let (mut loss, mut correct, mut count) = (0.0, 0usize, 0usize);
        for chunk in self.eval_windows.chunks(self.batch) {
            let (inputs, targets) = split_windows(chunk, seq)?;
            let logits = self.model.predict(&inputs)?;
            let (l, c) = loss_and_hits(&logits, &targets);
            loss += l;
            correct += c;
            count += targets.len();
        }
        let result = EvalResult { loss: loss / count as f64, accuracy: correct as f64 / count as f64 };
        if !result.loss.is_finite() {
            return Err(Error::Divergence { step: self.step, detail: format!("eval loss {}", result.loss) });
        }
        Ok(result)
    }

    /// Mean and standard error of the true chain's per-token loss on the
    /// held-out targets; the floor no model can beat in expectation.
    pub fn eval_entropy_floor(&self) -> Option<(f64, f64)> {
        let chain = self.corpus.chain.as_ref()?;
        let vals: Vec<f64> = self
            .eval_windows
            .iter()
            .flat_map(|w| w.windows(2).map(|p| -chain.transition()[p[0]][p[1]].ln()).collect::<Vec<_>>())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some((mean, (var / n).sqrt()))
    }
}

/// Summed cross-entropy and argmax hits of `rows x V` logits.
fn loss_and_hits(logits: &Tensor, targets: &[usize]) -> (f64, usize) {
    let mut loss = 0.0;
    let mut hits = 0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row_slice(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        let arg = crate::memory_lookup::top_k(row, 1)[0];
        hits += usize::from(arg == t);
    }
    (loss, hits)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub timing: Vec<TimingRow>,
    pub counts: ParamCounts,
    /// Analytic entropy rate of a generated corpus.
    pub entropy_rate: Option<f64>,
    pub eval_floor: Option<(f64, f64)>,
    pub trainer: Trainer,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Trains for `training.steps` steps, evaluating every `eval_every` steps
/// and after the last one. With `out_dir`, writes `metrics.csv`,
/// `timing.csv` and `checkpoint.bin`.
pub fn train_model(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let counts = trainer.model.count_params();
    let entropy_rate = trainer.corpus.chain.as_ref().map(MarkovChain::entropy_rate);
    let eval_floor = trainer.eval_entropy_floor();
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    let mut clock = Instant::now();
    let mut examples = 0usize;
    for step in 1..=cfg.training.steps {
        acc += trainer.step()?;
        acc_n += 1;
        examples += cfg.training.batch;
        if step % cfg.training.eval_every == 0 || step == cfg.training.steps {
            let elapsed = clock.elapsed().as_secs_f64();
            timing.push(TimingRow { step, examples_per_sec: examples as f64 / elapsed.max(1e-9) });
            let eval = trainer.evaluate()?;
            rows.push(MetricsRow {
                step,
                train_loss: acc / acc_n as f64,
                eval_loss: eval.loss,
                eval_accuracy: eval.accuracy,
                counts,
            });
            (acc, acc_n, examples) = (0.0, 0, 0);
            clock = Instant::now();
        }
        if let Some(dir) = out_dir {
            if cfg.io.checkpoint_every > 0 && step % cfg.io.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("checkpoint-{step}.bin")), trainer.model.params(), step as u64)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_metrics(std::fs::File::create(dir.join("metrics.csv"))?, &rows)?;
        write_timing(std::fs::File::create(dir.join("timing.csv"))?, &timing)?;
        checkpoint::save(&dir.join("checkpoint.bin"), trainer.model.params(), cfg.training.steps as u64)?;
    }
    Ok(TrainOutcome { rows, timing, counts, entropy_rate, eval_floor, trainer })
}

/// Finite-difference check of every model parameter on one seeded batch,
/// with jitter off.
pub fn gradcheck_language_model(cfg: &ExperimentConfig, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut trainer = Trainer::new(cfg)?;
    let windows = trainer.sample_batch();
    let model = trainer.model.clone();
    finite_diff_check(model.params(), epsilon, tolerance, |tape, p| model.loss(tape, p, &windows, None))
}

pub fn write_metrics<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            fmt_float(r.train_loss),
            fmt_float(r.eval_loss),
            fmt_float(r.eval_accuracy),
            r.counts.embedding,
            r.counts.non_embedding
        )?;
    }
    Ok(())
}

pub fn write_timing<W: Write>(mut out: W, rows: &[TimingRow]) -> Result<()> {
    writeln!(out, "{TIMING_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{}", r.step, fmt_float(r.examples_per_sec))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_text(
            "model.d = 8\nmodel.heads = 2\nmodel.d_ff = 16\nmodel.vocab = 8\nmodel.seq_len = 6\n\
             training.steps = 30\ntraining.batch = 4\ntraining.eval_every = 10\ntraining.eval_batches = 2\n\
             corpus.length = 4000\n",
        )
        .unwrap()
    }

    #[test]
    fn training_reduces_loss() {
        let out = train_model(&tiny(), None).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert!(out.rows[2].train_loss < out.rows[0].train_loss);
        assert!(out.rows.iter().all(|r| r.eval_loss.is_finite()));
    }

    #[test]
    fn same_seed_same_metrics() {
        let a = train_model(&tiny(), None).unwrap();
        let b = train_model(&tiny(), None).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn too_short_eval_stream_is_reported() {
        let mut cfg = tiny();
        cfg.corpus.length = 60;
        assert!(matches!(Trainer::new(&cfg), Err(Error::Config(_))));
    }
}
