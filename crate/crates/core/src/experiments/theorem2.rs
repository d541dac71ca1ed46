//! Embedding lookups at the input versus at the output layer.
//!
//! The target is `y = <Psi(u), Phi(q)>` for a categorical feature `u` with a
//! fixed random table `Psi` and a dense input `q` passed through a fixed
//! random tanh network `Phi` of width `d`. Two trainable architectures of
//! width `h` fit it on MSE:
//!
//! * `InputOnly`: `g1 E[u] + g2 q B` (two scalar gates) is fed into a tanh
//!   network whose last layer outputs the score.
//! * `PerLayer`: a tanh network maps `q` to `d` outputs, and a learned table
//!   `Psi_hat[u]` is dotted with them at the output layer.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experiments::config::{OptimizerKind, Theorem2Settings};
use crate::experiments::fmt_float;
use crate::experiments::optim::Optimizer;
use crate::tensor_nn::init::{derive_seed, lecun_normal, normal, seeded, SeededRng};
use crate::tensor_nn::params::{Bound, ParamId, ParamStore};
use crate::tensor_nn::tape::{Tape, Var};
use crate::tensor_nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Architecture {
    InputOnly,
    PerLayer,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::InputOnly => "input_only",
            Architecture::PerLayer => "per_layer",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub u: Vec<usize>,
    /// `n x d`.
    pub q: Tensor,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> Result<(Vec<usize>, Tensor, Vec<f64>)> {
        let d = self.q.cols();
        let mut q = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            q.extend_from_slice(self.q.row_slice(i));
        }
        Ok((
            idx.iter().map(|&i| self.u[i]).collect(),
            Tensor::matrix(idx.len(), d, q)?,
            idx.iter().map(|&i| self.y[i]).collect(),
        ))
    }
}

/// Ground truth: `Psi` (`num_u x d`) and the layers of `Phi`.
#[derive(Clone, Debug)]
pub struct Theorem2Task {
    pub d: usize,
    pub psi: Tensor,
    /// `d x d` matrices; tanh between them, none after the last.
    pub phi: Vec<Tensor>,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn phi_forward(phi: &[Tensor], q: &Tensor) -> Result<Tensor> {
    let mut h = q.clone();
    for (i, w) in phi.iter().enumerate() {
        h = h.matmul(w)?;
        if i + 1 < phi.len() {
            h = h.map(f64::tanh);
        }
    }
    Ok(h)
}

impl Theorem2Task {
    pub fn generate(s: &Theorem2Settings, seed: u64) -> Result<Self> {
        if s.d == 0 || s.num_u == 0 || s.phi_layers == 0 || s.train_size == 0 || s.test_size == 0 {
            return Err(Error::Config("theorem2 sizes must be positive".into()));
        }
        let mut rng = seeded(seed);
        let psi = normal(&[s.num_u, s.d], (1.0 / s.d as f64).sqrt(), &mut rng)?;
        let phi = (0..s.phi_layers)
            .map(|_| lecun_normal(&[s.d, s.d], s.d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let make = |n: usize, rng: &mut SeededRng| -> Result<Dataset> {
            let u: Vec<usize> = (0..n).map(|_| rng.gen_range(0..s.num_u)).collect();
            let q = Tensor::matrix(n, s.d, (0..n * s.d).map(|_| StandardNormal.sample(rng)).collect())?;
            let f = phi_forward(&phi, &q)?;
            let y = (0..n)
                .map(|i| crate::tensor_nn::tensor::dot(psi.row_slice(u[i]), f.row_slice(i)))
                .collect();
            Ok(Dataset { u, q, y })
        };
        let train = make(s.train_size, &mut rng)?;
        let test = make(s.test_size, &mut rng)?;
        Ok(Self { d: s.d, psi, phi, train, test })
    }
}

/// Trainable model of either architecture.
#[derive(Clone, Debug)]
pub struct Theorem2Model {
    pub arch: Architecture,
    pub width: usize,
    pub store: ParamStore,
    table: ParamId,
    /// `InputOnly`: `q` embedding `B`; unused otherwise.
    q_embed: Option<ParamId>,
    gates: Option<(ParamId, ParamId)>,
    layers: Vec<ParamId>,
}

impl Theorem2Model {
    pub fn new(arch: Architecture, d: usize, num_u: usize, width: usize, depth: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let h = width;
        Ok(match arch {
            Architecture::PerLayer => {
                let table = store.add("psi_hat", normal(&[num_u, d], (1.0 / d as f64).sqrt(), &mut rng)?)?;
                let mut layers = Vec::with_capacity(depth);
                for i in 0..depth {
                    let rows = if i == 0 { d } else { h };
                    let cols = if i + 1 == depth { d } else { h };
                    layers.push(store.add(format!("net{i}"), lecun_normal(&[rows, cols], rows, &mut rng)?)?);
                }
                Self { arch, width, store, table, q_embed: None, gates: None, layers }
            }
            Architecture::InputOnly => {
                let table = store.add("embed_u", normal(&[num_u, h], 1.0, &mut rng)?)?;
                let q_embed = store.add("embed_q", lecun_normal(&[d, h], d, &mut rng)?)?;
                let gates = (
                    store.add("gate_u", Tensor::scalar(1.0)?)?,
                    store.add("gate_q", Tensor::scalar(1.0)?)?,
                );
                let mut layers = Vec::with_capacity(depth);
                for i in 1..depth {
                    layers.push(store.add(format!("net{i}"), lecun_normal(&[h, h], h, &mut rng)?)?);
                }
                layers.push(store.add("out", lecun_normal(&[h, 1], h, &mut rng)?)?);
                Self { arch, width, store, table, q_embed: Some(q_embed), gates: Some(gates), layers }
            }
        })
    }

    /// PerLayer at width `d` holding the ground-truth weights.
    pub fn per_layer_oracle(task: &Theorem2Task) -> Result<Self> {
        let mut m = Self::new(Architecture::PerLayer, task.d, task.psi.rows(), task.d, task.phi.len(), 0)?;
        m.store.set(m.table, task.psi.clone())?;
        for (id, w) in m.layers.clone().into_iter().zip(&task.phi) {
            m.store.set(id, w.clone())?;
        }
        Ok(m)
    }

    /// Scores (`rows x 1`).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, u: &[usize], q: Var) -> Result<Var> {
        match self.arch {
            Architecture::PerLayer => {
                let mut h = q;
                for (i, &w) in self.layers.iter().enumerate() {
                    h = tape.matmul(h, p.get(w))?;
                    if i + 1 < self.layers.len() {
                        h = tape.tanh(h);
                    }
                }
                let psi = tape.gather_rows(p.get(self.table), u)?;
                tape.row_dot(psi, h)
            }
            Architecture::InputOnly => {
                let (gu, gq) = self.gates.expect("input-only gates");
                let e = tape.gather_rows(p.get(self.table), u)?;
                let e = tape.scale_by(e, p.get(gu))?;
                let qe = tape.matmul(q, p.get(self.q_embed.expect("input-only q embedding")))?;
                let qe = tape.scale_by(qe, p.get(gq))?;
                let mut h = tape.add(e, qe)?;
                for &w in &self.layers {
                    h = tape.tanh(h);
                    h = tape.matmul(h, p.get(w))?;
                }
                Ok(h)
            }
        }
    }

    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let q = tape.leaf(data.q.clone());
        let pred = self.forward(&mut tape, &p, &data.u, q)?;
        let loss = tape.mse(pred, &data.y)?;
        Ok(tape.scalar(loss))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem2Row {
    pub arch: Architecture,
    pub width: usize,
    pub seed: u64,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Variance of the test targets, for scale.
    pub target_var: f64,
}

pub fn train_theorem2_model(
    task: &Theorem2Task,
    arch: Architecture,
    width: usize,
    s: &Theorem2Settings,
    seed: u64,
) -> Result<Theorem2Model> {
    let mut model = Theorem2Model::new(arch, task.d, task.psi.rows(), width, task.phi.len(), derive_seed(seed, 11))?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, s.learning_rate, &model.store);
    let mut rng = seeded(derive_seed(seed, 12));
    let n = task.train.len();
    for step in 1..=s.steps {
        let idx: Vec<usize> = (0..s.batch.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let (u, q, y) = task.train.rows(&idx)?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let qv = tape.leaf(q);
        let pred = model.forward(&mut tape, &p, &u, qv)?;
        let loss = tape.mse(pred, &y)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence { step, detail: format!("{} width {width}: loss {value}", arch.name()) });
        }
        let g = tape.backward(loss)?;
        let grads = model.store.collect_grads(&p, &g);
        opt.step(&mut model.store, &grads)?;
    }
    Ok(model)
}

fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Trains both architectures at every width for `seeds` tasks; rows are
/// sorted by seed, architecture and width.
pub fn run_theorem2_experiment(s: &Theorem2Settings, base_seed: u64) -> Result<Vec<Theorem2Row>> {
    let mut cells = Vec::new();
    for i in 0..s.seeds as u64 {
        for arch in [Architecture::InputOnly, Architecture::PerLayer] {
            for &mult in &s.width_multipliers {
                cells.push((i, arch, mult * s.d));
            }
        }
    }
    let mut rows = cells
        .into_par_iter()
        .map(|(i, arch, width)| {
            let seed = derive_seed(base_seed, i);
            let task = Theorem2Task::generate(s, seed)?;
            let model = train_theorem2_model(&task, arch, width, s, seed)?;
            Ok(Theorem2Row {
                arch,
                width,
                seed: i,
                train_mse: model.mse(&task.train)?,
                test_mse: model.mse(&task.test)?,
                target_var: variance(&task.test.y),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|a| (a.seed, a.arch, a.width));
    Ok(rows)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_test_mse(rows: &[Theorem2Row], arch: Architecture, width: usize) -> f64 {
    median(rows.iter().filter(|r| r.arch == arch && r.width == width).map(|r| r.test_mse).collect())
}

pub const CSV_HEADER: &str = "architecture,width,seed,train_mse,test_mse,target_var";

pub fn write_csv<W: Write>(mut out: W, rows: &[Theorem2Row]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.arch.name(),
            r.width,
            r.seed,
            fmt_float(r.train_mse),
            fmt_float(r.test_mse),
            fmt_float(r.target_var)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Theorem2Settings {
        Theorem2Settings {
            d: 4,
            num_u: 8,
            phi_layers: 2,
            train_size: 256,
            test_size: 64,
            steps: 200,
            batch: 32,
            learning_rate: 1e-2,
            seeds: 1,
            width_multipliers: vec![1, 2],
        }
    }

    #[test]
    fn oracle_is_exact() {
        let task = Theorem2Task::generate(&small(), 3).unwrap();
        let oracle = Theorem2Model::per_layer_oracle(&task).unwrap();
        assert!(oracle.mse(&task.test).unwrap() < 1e-28);
    }

    #[test]
    fn training_lowers_error() {
        let s = small();
        let task = Theorem2Task::generate(&s, 4).unwrap();
        for arch in [Architecture::InputOnly, Architecture::PerLayer] {
            let before = Theorem2Model::new(arch, 4, 8, 8, 2, derive_seed(4, 11)).unwrap().mse(&task.train).unwrap();
            let after = train_theorem2_model(&task, arch, 8, &s, 4).unwrap().mse(&task.train).unwrap();
            assert!(after < before, "{arch:?}: {before} -> {after}");
        }
    }

    #[test]
    fn rows_are_sorted_and_deterministic() {
        let mut s = small();
        s.steps = 20;
        let a = run_theorem2_experiment(&s, 1).unwrap();
        let b = run_theorem2_experiment(&s, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!((a[0].arch, a[0].width), (Architecture::InputOnly, 4));
    }
}
