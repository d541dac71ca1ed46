//! Flat `section.key = value` configuration.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected so a
//! typo cannot silently fall back to a default in the middle of a sweep.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::altup::BlockSelection;
use crate::error::{Error, Result};
use crate::memory_lookup::LookupKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consumption {
    None,
    Sum,
    SameUp,
    AltUp,
}

impl Consumption {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Consumption::None,
            "sum" => Consumption::Sum,
            "sameup" => Consumption::SameUp,
            "altup" => Consumption::AltUp,
            other => return Err(Error::Config(format!("unknown consumption '{other}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Consumption::None => "none",
            Consumption::Sum => "sum",
            Consumption::SameUp => "sameup",
            Consumption::AltUp => "altup",
        }
    }

    /// Whether the representation is `K d` wide between layers.
    pub fn is_wide(self) -> bool {
        matches!(self, Consumption::SameUp | Consumption::AltUp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PccVariant {
    Full,
    Simplified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// Output table reads the whole `K d` vector.
    Concat,
    Block0,
    Mean,
    /// Learned `K d -> d` projection before a `d`-wide output table.
    Proj,
}

impl HeadMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "concat" => HeadMode::Concat,
            "block0" => HeadMode::Block0,
            "mean" => HeadMode::Mean,
            "proj" => HeadMode::Proj,
            other => return Err(Error::Config(format!("unknown head '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryConfig {
    /// `None` disables partial-expert memory.
    pub lookup: Option<LookupKind>,
    pub rank: usize,
    pub buckets: usize,
    pub top_k: usize,
    pub projections: usize,
    pub bucket_width: f64,
    pub consumption: Consumption,
    /// Layers that carry a memory table; `None` means all of them.
    pub layers: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AltUpConfig {
    pub k: usize,
    pub selection: BlockSelection,
    pub variant: PccVariant,
    pub head: HeadMode,
    pub e: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub jitter: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub alpha: f64,
    pub transition_seed: u64,
    pub length: usize,
    pub eval_fraction: f64,
    /// Byte-level corpus read from a file instead of the Markov chain.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchEntry {
    pub lookup: LookupKind,
    pub rank: usize,
    pub buckets: usize,
}

impl fmt::Display for BenchEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lookup.name(), self.rank, self.buckets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub grid: Vec<BenchEntry>,
    /// Also train the model without memory as a reference row.
    pub include_baseline: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem2Settings {
    pub d: usize,
    pub num_u: usize,
    pub phi_layers: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seeds: usize,
    /// Trained widths as multiples of `d`.
    pub width_multipliers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LshSimSettings {
    pub families: Vec<crate::lsh_sim::Family>,
    pub f: Vec<f64>,
    pub n: Vec<usize>,
    pub l: usize,
    pub d: usize,
    pub trials: usize,
    pub full_route: bool,
    pub projections: usize,
    /// `None` selects the entropy-matched width.
    pub width: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub altup: AltUpConfig,
    pub training: TrainingConfig,
    pub corpus: CorpusConfig,
    pub io: IoConfig,
    pub bench: BenchConfig,
    pub theorem2: Theorem2Settings,
    pub lshsim: LshSimSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { d: 32, layers: 2, heads: 2, d_ff: 64, vocab: 64, seq_len: 16 },
            memory: MemoryConfig {
                lookup: None,
                rank: 4,
                buckets: 32,
                top_k: 1,
                projections: 4,
                bucket_width: crate::memory_lookup::DEFAULT_BUCKET_WIDTH,
                consumption: Consumption::None,
                layers: None,
            },
            altup: AltUpConfig {
                k: 2,
                selection: BlockSelection::Alternating,
                variant: PccVariant::Simplified,
                head: HeadMode::Concat,
                e: 0,
            },
            training: TrainingConfig {
                steps: 200,
                batch: 8,
                learning_rate: 3e-3,
                optimizer: OptimizerKind::Adam,
                seed: 0,
                eval_every: 50,
                eval_batches: 4,
                jitter: true,
            },
            corpus: CorpusConfig { alpha: 0.1, transition_seed: 1, length: 200_000, eval_fraction: 0.1, path: None },
            io: IoConfig { out_dir: PathBuf::from("out"), checkpoint_every: 0 },
            bench: BenchConfig { grid: Vec::new(), include_baseline: true },
            theorem2: Theorem2Settings {
                d: 16,
                num_u: 64,
                phi_layers: 2,
                train_size: 2048,
                test_size: 512,
                steps: 1500,
                batch: 64,
                learning_rate: 3e-3,
                seeds: 5,
                width_multipliers: vec![1, 2],
            },
            lshsim: LshSimSettings {
                families: crate::lsh_sim::Family::ALL.to_vec(),
                f: vec![0.25, 0.5, 0.75],
                n: vec![256],
                l: 32,
                d: 64,
                trials: 10_000,
                full_route: false,
                projections: crate::lsh_sim::DEFAULT_PROJECTIONS,
                width: None,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn parse_bench_grid(value: &str) -> Result<Vec<BenchEntry>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let [kind, rank, buckets] = parts.as_slice() else {
                return Err(Error::Config(format!("bench.grid entry '{item}' is not kind:rank:buckets")));
            };
            Ok(BenchEntry {
                lookup: LookupKind::parse(kind)?,
                rank: parse("bench.grid", rank)?,
                buckets: parse("bench.grid", buckets)?,
            })
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.d" => self.model.d = parse(key, value)?,
            "model.layers" => self.model.layers = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.d_ff" => self.model.d_ff = parse(key, value)?,
            "model.vocab" => self.model.vocab = parse(key, value)?,
            "model.seq_len" => self.model.seq_len = parse(key, value)?,

            "memory.lookup" => {
                self.memory.lookup = if value == "none" { None } else { Some(LookupKind::parse(value)?) }
            }
            "memory.rank" => self.memory.rank = parse(key, value)?,
            "memory.buckets" => self.memory.buckets = parse(key, value)?,
            "memory.top_k" => self.memory.top_k = parse(key, value)?,
            "memory.projections" => self.memory.projections = parse(key, value)?,
            "memory.bucket_width" => self.memory.bucket_width = parse(key, value)?,
            "memory.consumption" => self.memory.consumption = Consumption::parse(value)?,
            "memory.layers" => {
                self.memory.layers = if value == "all" { None } else { Some(parse_list(key, value)?) }
            }

            "altup.K" => self.altup.k = parse(key, value)?,
            "altup.selection" => {
                self.altup.selection = match value {
                    "alternating" => BlockSelection::Alternating,
                    "same" => BlockSelection::Same(0),
                    other => return Err(Error::Config(format!("unknown selection '{other}'"))),
                }
            }
            "altup.variant" => {
                self.altup.variant = match value {
                    "full" => PccVariant::Full,
                    "simplified" => PccVariant::Simplified,
                    other => return Err(Error::Config(format!("unknown variant '{other}'"))),
                }
            }
            "altup.head" => self.altup.head = HeadMode::parse(value)?,
            "altup.e" => self.altup.e = parse(key, value)?,

            "training.steps" => self.training.steps = parse(key, value)?,
            "training.batch" => self.training.batch = parse(key, value)?,
            "training.learning_rate" => self.training.learning_rate = parse(key, value)?,
            "training.optimizer" => {
                self.training.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
                }
            }
            "training.seed" => self.training.seed = parse(key, value)?,
            "training.eval_every" => self.training.eval_every = parse(key, value)?,
            "training.eval_batches" => self.training.eval_batches = parse(key, value)?,
            "training.jitter" => self.training.jitter = parse_bool(key, value)?,

            "corpus.alpha" => self.corpus.alpha = parse(key, value)?,
            "corpus.transition_seed" => self.corpus.transition_seed = parse(key, value)?,
            "corpus.length" => self.corpus.length = parse(key, value)?,
            "corpus.eval_fraction" => self.corpus.eval_fraction = parse(key, value)?,
            "corpus.path" => self.corpus.path = if value.is_empty() { None } else { Some(PathBuf::from(value)) },

            "io.out_dir" => self.io.out_dir = PathBuf::from(value),
            "io.checkpoint_every" => self.io.checkpoint_every = parse(key, value)?,

            "bench.grid" => self.bench.grid = parse_bench_grid(value)?,
            "bench.include_baseline" => self.bench.include_baseline = parse_bool(key, value)?,

            "theorem2.d" => self.theorem2.d = parse(key, value)?,
            "theorem2.num_u" => self.theorem2.num_u = parse(key, value)?,
            "theorem2.phi_layers" => self.theorem2.phi_layers = parse(key, value)?,
            "theorem2.train_size" => self.theorem2.train_size = parse(key, value)?,
            "theorem2.test_size" => self.theorem2.test_size = parse(key, value)?,
            "theorem2.steps" => self.theorem2.steps = parse(key, value)?,
            "theorem2.batch" => self.theorem2.batch = parse(key, value)?,
            "theorem2.learning_rate" => self.theorem2.learning_rate = parse(key, value)?,
            "theorem2.seeds" => self.theorem2.seeds = parse(key, value)?,
            "theorem2.width_multipliers" => self.theorem2.width_multipliers = parse_list(key, value)?,

            "lshsim.families" => {
                self.lshsim.families = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(crate::lsh_sim::Family::parse)
                    .collect::<Result<_>>()?
            }
            "lshsim.f" => self.lshsim.f = parse_list(key, value)?,
            "lshsim.n" => self.lshsim.n = parse_list(key, value)?,
            "lshsim.l" => self.lshsim.l = parse(key, value)?,
            "lshsim.d" => self.lshsim.d = parse(key, value)?,
            "lshsim.trials" => self.lshsim.trials = parse(key, value)?,
            "lshsim.full_route" => self.lshsim.full_route = parse_bool(key, value)?,
            "lshsim.projections" => self.lshsim.projections = parse(key, value)?,
            "lshsim.width" => {
                self.lshsim.width = if value == "entropy" { None } else { Some(parse(key, value)?) }
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Number of blocks of the token representation.
    pub fn blocks(&self) -> usize {
        match self.memory.consumption {
            Consumption::None => 1,
            _ => self.altup.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.d", m.d),
            ("model.layers", m.layers),
            ("model.heads", m.heads),
            ("model.d_ff", m.d_ff),
            ("model.vocab", m.vocab),
            ("model.seq_len", m.seq_len),
            ("training.batch", self.training.batch),
            ("training.eval_every", self.training.eval_every),
            ("training.eval_batches", self.training.eval_batches),
            ("altup.K", self.altup.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !m.d.is_multiple_of(m.heads) {
            return Err(Error::Config(format!("model.heads={} must divide model.d={}", m.heads, m.d)));
        }
        if !(self.training.learning_rate > 0.0) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        if !(self.corpus.eval_fraction > 0.0 && self.corpus.eval_fraction < 1.0) {
            return Err(Error::Config("corpus.eval_fraction must lie in (0, 1)".into()));
        }
        if self.altup.e > 0 {
            if !self.memory.consumption.is_wide() {
                return Err(Error::Config("altup.e needs memory.consumption = altup or sameup".into()));
            }
            if self.altup.k < 2 || !self.altup.e.is_multiple_of(self.altup.k - 1) {
                return Err(Error::Config(format!(
                    "altup.K - 1 = {} must be a positive divisor of altup.e = {}",
                    self.altup.k as i64 - 1,
                    self.altup.e
                )));
            }
        }
        if let Some(kind) = self.memory.lookup {
            let mem = &self.memory;
            if mem.buckets == 0 {
                return Err(Error::Config("memory.buckets must be positive".into()));
            }
            if kind == LookupKind::TokenId && mem.buckets != m.vocab {
                return Err(Error::Config("token_id lookup needs memory.buckets = model.vocab".into()));
            }
            if kind == LookupKind::Softmax && (mem.top_k == 0 || mem.top_k > mem.buckets) {
                return Err(Error::Config("memory.top_k must lie in 1..=memory.buckets".into()));
            }
            if kind == LookupKind::HyperplaneLsh && (mem.projections == 0 || !(mem.bucket_width > 0.0)) {
                return Err(Error::Config("hyperplane lookup needs projections > 0 and bucket_width > 0".into()));
            }
            if let Some(layers) = &mem.layers {
                if let Some(bad) = layers.iter().find(|&&l| l >= m.layers) {
                    return Err(Error::Config(format!("memory.layers entry {bad} out of range")));
                }
            }
        }
        Ok(())
    }

    pub fn has_memory(&self, layer: usize) -> bool {
        self.memory.lookup.is_some() && self.memory.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }

    pub fn memory_layer_count(&self) -> usize {
        (0..self.model.layers).filter(|&l| self.has_memory(l)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = ExperimentConfig::from_text(
            "# toy\nmodel.d = 16\nmemory.consumption = altup  # wide\naltup.K=3\nmemory.layers = 0,1\n",
        )
        .unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.memory.consumption, Consumption::AltUp);
        assert_eq!(cfg.blocks(), 3);
        assert_eq!(cfg.memory.layers, Some(vec![0, 1]));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = ExperimentConfig::from_text("model.dd = 3").unwrap_err();
        assert!(err.to_string().contains("model.dd"));
        assert!(ExperimentConfig::from_text("model.d").is_err());
        assert!(ExperimentConfig::from_text("model.d = x").is_err());
    }

    #[test]
    fn overrides_apply_last() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("training.steps=7").unwrap();
        assert_eq!(cfg.training.steps, 7);
        assert!(cfg.apply_override("training.steps").is_err());
    }

    #[test]
    fn bench_grid_parses() {
        let cfg = ExperimentConfig::from_text("bench.grid = softmax:4:32, token_id:0:64").unwrap();
        assert_eq!(cfg.bench.grid.len(), 2);
        assert_eq!(cfg.bench.grid[1].to_string(), "token_id:0:64");
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.model.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.memory.lookup = Some(LookupKind::TokenId);
        assert!(cfg.validate().is_err());
        cfg.memory.buckets = cfg.model.vocab;
        cfg.validate().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.memory.consumption = Consumption::AltUp;
        cfg.altup.k = 3;
        cfg.altup.e = 5;
        assert!(cfg.validate().is_err());
        cfg.altup.e = 6;
        cfg.validate().unwrap();
    }
}
