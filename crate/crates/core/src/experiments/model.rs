//! Decoder-only toy language model with optional partial-expert memory and
//! widened token representations (Sum, SameUp, AltUp).

use crate::altup::{select_block, BlockSelection, PccLayer};
use crate::error::{Error, Result};
use crate::experiments::config::{Consumption, ExperimentConfig, HeadMode, PccVariant};
use crate::memory_lookup::{MemoryLayer, MemorySpec};
use crate::tensor_nn::init::{derive_seed, lecun_normal, normal, seeded, SeededRng};
use crate::tensor_nn::layers::{TransformerBlock, TransformerBlockParams};
use crate::tensor_nn::params::{Bound, ParamId, ParamStore};
use crate::tensor_nn::tape::{Tape, Var};
use crate::tensor_nn::tensor::Tensor;

/// Standard deviation of token embedding entries.
pub const EMBEDDING_INIT_STD: f64 = 1.0;

#[derive(Clone, Debug)]
enum Embedding {
    /// One `V x d` table per block.
    Tables(Vec<ParamId>),
    /// A `V x d` primary table plus a `V x e` augmentation split into
    /// `K - 1` chunks, each projected to `d`.
    DivideProject { primary: ParamId, aug: ParamId, projections: Vec<ParamId> },
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Concat { out: ParamId },
    Block0 { out: ParamId },
    Mean { out: ParamId },
    Proj { proj: ParamId, out: ParamId },
}

/// Embedding versus non-embedding trainable scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub embedding: usize,
    pub non_embedding: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embedding + self.non_embedding
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    store: ParamStore,
    d: usize,
    k: usize,
    vocab: usize,
    seq_len: usize,
    consumption: Consumption,
    selection: BlockSelection,
    embedding: Embedding,
    blocks: Vec<TransformerBlock>,
    memory: Vec<Option<MemoryLayer>>,
    pcc: Vec<PccLayer>,
    final_ln: (ParamId, ParamId),
    head: Head,
}

impl LanguageModel {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let (d, v) = (m.d, m.vocab);
        let k = cfg.blocks();
        let consumption = cfg.memory.consumption;
        let mut rng = seeded(derive_seed(cfg.training.seed, 1));
        let mut store = ParamStore::new();

        let embedding = if consumption.is_wide() && cfg.altup.e > 0 {
            let e = cfg.altup.e;
            let chunk = e / (k - 1);
            let primary = store.add("embed.primary", normal(&[v, d], EMBEDDING_INIT_STD, &mut rng)?)?;
            let aug = store.add("embed.aug", normal(&[v, e], EMBEDDING_INIT_STD, &mut rng)?)?;
            let projections = (0..k - 1)
                .map(|i| store.add(format!("divide.project{i}"), lecun_normal(&[chunk, d], chunk, &mut rng)?))
                .collect::<Result<_>>()?;
            Embedding::DivideProject { primary, aug, projections }
        } else {
            let tables = (0..k)
                .map(|i| store.add(format!("embed.{i}"), normal(&[v, d], EMBEDDING_INIT_STD, &mut rng)?))
                .collect::<Result<_>>()?;
            Embedding::Tables(tables)
        };

        let spec = MemorySpec {
            kind: cfg.memory.lookup.unwrap_or(crate::memory_lookup::LookupKind::TokenId),
            buckets: cfg.memory.buckets,
            rank: cfg.memory.rank,
            top_k: cfg.memory.top_k,
            hyperplane_projections: cfg.memory.projections,
            bucket_width: cfg.memory.bucket_width,
        };
        let wide = consumption.is_wide() && k > 1;
        let mut blocks = Vec::with_capacity(m.layers);
        let mut memory = Vec::with_capacity(m.layers);
        let mut pcc = Vec::new();
        for i in 0..m.layers {
            let prefix = format!("layer{i}");
            let params = TransformerBlockParams::init(d, m.heads, m.d_ff, &mut rng)?;
            blocks.push(TransformerBlock::register(params, &mut store, &format!("{prefix}.block"))?);
            memory.push(if cfg.has_memory(i) {
                Some(MemoryLayer::build(&spec, d, &mut store, &format!("{prefix}.memory"), &mut rng)?)
            } else {
                None
            });
            if wide {
                pcc.push(match cfg.altup.variant {
                    PccVariant::Simplified => PccLayer::register_simplified(k, &mut store, &prefix)?,
                    PccVariant::Full => PccLayer::register_full(k, d, &mut store, &prefix)?,
                });
            }
        }

        let final_ln = (
            store.add("final_ln.gamma", Tensor::filled(&[1, d], 1.0))?,
            store.add("final_ln.beta", Tensor::zeros(&[1, d]))?,
        );
        let head = match (wide, cfg.altup.head) {
            (true, HeadMode::Concat) => Head::Concat { out: store.add("head.out", lecun_normal(&[k * d, v], k * d, &mut rng)?)? },
            (true, HeadMode::Mean) => Head::Mean { out: store.add("head.out", lecun_normal(&[d, v], d, &mut rng)?)? },
            (true, HeadMode::Proj) => {
                let proj = store.add("head.proj", lecun_normal(&[k * d, d], k * d, &mut rng)?)?;
                Head::Proj { proj, out: store.add("head.out", lecun_normal(&[d, v], d, &mut rng)?)? }
            }
            _ => Head::Block0 { out: store.add("head.out", lecun_normal(&[d, v], d, &mut rng)?)? },
        };

        let selection = match consumption {
            Consumption::SameUp => BlockSelection::Same(0),
            _ => cfg.altup.selection,
        };
        Ok(Self {
            store,
            d,
            k,
            vocab: v,
            seq_len: m.seq_len,
            consumption,
            selection,
            embedding,
            blocks,
            memory,
            pcc,
            final_ln,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn blocks(&self) -> usize {
        self.k
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Input and output tables count as embedding parameters; everything
    /// else (blocks, PCC scalars, projections, experts, routers) does not.
    pub fn count_params(&self) -> ParamCounts {
        let mut counts = ParamCounts { embedding: 0, non_embedding: 0 };
        for (name, t) in self.store.iter() {
            if is_embedding_param(name) {
                counts.embedding += t.len();
            } else {
                counts.non_embedding += t.len();
            }
        }
        counts
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        match &self.embedding {
            Embedding::Tables(tables) => {
                let parts: Vec<Var> = tables.iter().map(|&t| tape.gather_rows(p.get(t), ids)).collect::<Result<_>>()?;
                if parts.len() == 1 {
                    return Ok(parts[0]);
                }
                match self.consumption {
                    Consumption::Sum => {
                        let mut acc = parts[0];
                        for &x in &parts[1..] {
                            acc = tape.add(acc, x)?;
                        }
                        Ok(acc)
                    }
                    _ => tape.concat_cols(&parts),
                }
            }
            Embedding::DivideProject { primary, aug, projections } => {
                let x0 = tape.gather_rows(p.get(*primary), ids)?;
                let a = tape.gather_rows(p.get(*aug), ids)?;
                let chunk = tape.value(a).cols() / projections.len();
                let mut parts = vec![x0];
                for (i, &proj) in projections.iter().enumerate() {
                    let c = tape.slice_cols(a, i * chunk, chunk)?;
                    parts.push(tape.matmul(c, p.get(proj))?);
                }
                tape.concat_cols(&parts)
            }
        }
    }

    fn layer(
        &self,
        tape: &mut Tape,
        p: &Bound,
        i: usize,
        x: Var,
        ids: &[usize],
        jitter: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let out = self.blocks[i].forward(tape, p, x, self.seq_len, true)?;
        match &self.memory[i] {
            Some(mem) => {
                let m = mem.forward(tape, p, x, ids, jitter)?;
                tape.add(out, m)
            }
            None => Ok(out),
        }
    }

    /// Logits (`rows x V`) for a flat batch of whole sequences of `seq_len` ids.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, ids: &[usize], mut jitter: Option<&mut SeededRng>) -> Result<Var> {
        if ids.is_empty() || !ids.len().is_multiple_of(self.seq_len) {
            return Err(Error::ShapeMismatch(format!("{} ids for sequences of {}", ids.len(), self.seq_len)));
        }
        let mut x = self.embed(tape, p, ids)?;
        let wide = !self.pcc.is_empty();
        for i in 0..self.blocks.len() {
            x = if wide {
                let j = select_block(i, self.k, self.selection)?;
                let jit = jitter.as_deref_mut();
                self.pcc[i].forward(tape, p, x, j, |tape, xj| self.layer(tape, p, i, xj, ids, jit))?
            } else {
                self.layer(tape, p, i, x, ids, jitter.as_deref_mut())?
            };
        }
        self.head(tape, p, x)
    }

    fn head(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (gamma, beta) = (p.get(self.final_ln.0), p.get(self.final_ln.1));
        let d = self.d;
        match self.head {
            Head::Block0 { out } => {
                let x0 = if self.pcc.is_empty() { x } else { tape.slice_cols(x, 0, d)? };
                let h = tape.layer_norm(x0, gamma, beta)?;
                tape.matmul(h, p.get(out))
            }
            Head::Concat { out } => {
                let mut parts = Vec::with_capacity(self.k);
                for j in 0..self.k {
                    let b = tape.slice_cols(x, j * d, d)?;
                    parts.push(tape.layer_norm(b, gamma, beta)?);
                }
                let h = tape.concat_cols(&parts)?;
                tape.matmul(h, p.get(out))
            }
            Head::Mean { out } => {
                let mut acc = tape.slice_cols(x, 0, d)?;
                for j in 1..self.k {
                    let b = tape.slice_cols(x, j * d, d)?;
                    acc = tape.add(acc, b)?;
                }
                let mean = tape.scale(acc, 1.0 / self.k as f64);
                let h = tape.layer_norm(mean, gamma, beta)?;
                tape.matmul(h, p.get(out))
            }
            Head::Proj { proj, out } => {
                let z = tape.matmul(x, p.get(proj))?;
                let h = tape.layer_norm(z, gamma, beta)?;
                tape.matmul(h, p.get(out))
            }
        }
    }

    /// Mean next-token cross-entropy of a batch of windows, each
    /// `seq_len + 1` tokens long.
    pub fn loss(&self, tape: &mut Tape, p: &Bound, windows: &[Vec<usize>], jitter: Option<&mut SeededRng>) -> Result<Var> {
        let (inputs, targets) = split_windows(windows, self.seq_len)?;
        let logits = self.logits(tape, p, &inputs, jitter)?;
        tape.cross_entropy(logits, &targets)
    }

    /// Inference-mode logits for a batch of input sequences.
    pub fn predict(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.logits(&mut tape, &bound, ids, None)?;
        Ok(tape.value(out).clone())
    }
}

pub(crate) fn is_embedding_param(name: &str) -> bool {
    name.starts_with("embed.") || name == "head.out"
}

/// Inputs and next-token targets of windows of `seq_len + 1` tokens.
pub fn split_windows(windows: &[Vec<usize>], seq_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let mut inputs = Vec::with_capacity(windows.len() * seq_len);
    let mut targets = Vec::with_capacity(windows.len() * seq_len);
    for w in windows {
        if w.len() != seq_len + 1 {
            return Err(Error::ShapeMismatch(format!("window of {} tokens, expected {}", w.len(), seq_len + 1)));
        }
        inputs.extend_from_slice(&w[..seq_len]);
        targets.extend_from_slice(&w[1..]);
    }
    Ok((inputs, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_lookup::LookupKind;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.d = 8;
        cfg.model.heads = 2;
        cfg.model.d_ff = 16;
        cfg.model.vocab = 16;
        cfg.model.seq_len = 4;
        cfg.model.layers = 2;
        cfg
    }

    #[test]
    fn baseline_counts() {
        let mut cfg = tiny();
        cfg.model.vocab = 256;
        cfg.model.d = 64;
        let m = LanguageModel::new(&cfg).unwrap();
        let c = m.count_params();
        assert_eq!(c.embedding, 2 * 256 * 64);
        assert_eq!(c.total(), m.params().scalar_count());
    }

    #[test]
    fn altup_doubles_embeddings() {
        let cfg = tiny();
        let base = LanguageModel::new(&cfg).unwrap().count_params();
        let mut wide_cfg = cfg.clone();
        wide_cfg.memory.consumption = Consumption::AltUp;
        let wide = LanguageModel::new(&wide_cfg).unwrap().count_params();
        assert_eq!(wide.embedding, 2 * base.embedding);
        assert_eq!(wide.non_embedding, base.non_embedding + 2 * (4 + 2));
    }

    #[test]
    fn softmax_memory_adds_experts_and_router() {
        let mut cfg = tiny();
        cfg.memory.layers = Some(vec![1]);
        let base = LanguageModel::new(&cfg).unwrap().count_params();
        cfg.memory.lookup = Some(LookupKind::Softmax);
        let with = LanguageModel::new(&cfg).unwrap().count_params();
        assert_eq!(with.non_embedding - base.non_embedding, 2 * 4 * 32 * 8 + 32 * 8);
        assert_eq!(with.embedding, base.embedding);
    }

    #[test]
    fn every_consumption_runs() {
        for (c, head) in [
            (Consumption::None, HeadMode::Concat),
            (Consumption::Sum, HeadMode::Concat),
            (Consumption::SameUp, HeadMode::Mean),
            (Consumption::AltUp, HeadMode::Proj),
            (Consumption::AltUp, HeadMode::Block0),
        ] {
            let mut cfg = tiny();
            cfg.memory.consumption = c;
            cfg.altup.head = head;
            cfg.memory.lookup = Some(LookupKind::HyperplaneLsh);
            let m = LanguageModel::new(&cfg).unwrap();
            let logits = m.predict(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
            assert_eq!(logits.shape(), &[8, 16]);
        }
    }

    #[test]
    fn divide_project_embedding() {
        let mut cfg = tiny();
        cfg.memory.consumption = Consumption::AltUp;
        cfg.altup.k = 3;
        cfg.altup.e = 12;
        let m = LanguageModel::new(&cfg).unwrap();
        assert_eq!(m.count_params().embedding, 16 * (8 + 12) + 3 * 8 * 16);
        assert_eq!(m.predict(&[0, 1, 2, 3]).unwrap().shape(), &[4, 16]);
    }

    #[test]
    fn causal_prefix_is_stable() {
        let m = LanguageModel::new(&tiny()).unwrap();
        let a = m.predict(&[1, 2, 3, 4]).unwrap();
        let b = m.predict(&[1, 2, 9, 9]).unwrap();
        for c in 0..16 {
            assert_eq!(a.get(0, c), b.get(0, c));
            assert_eq!(a.get(1, c), b.get(1, c));
        }
    }
}
