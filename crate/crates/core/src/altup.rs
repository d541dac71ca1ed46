//! Alternating Updates: a `K d`-wide representation updated by `d`-wide
//! layers through predict, compute and correct steps.
//!
//! ```text
//! x_hat     = P x_old                      (predict, every block)
//! x_tilde   = L(x_old[j*])                 (compute, one block)
//! x_new     = x_hat + G (x_tilde - x_hat[j*])   (correct)
//! ```
//!
//! The simplified variant restricts `P` and `G` to scalar multiples of the
//! identity per block, `P = (p_ij I)`, `G = (g_i I)`.

use crate::error::{shape_err, Error, Result};
use crate::tensor_nn::init::SeededRng;
use crate::tensor_nn::layers::TransformerBlockParams;
use crate::tensor_nn::params::{Bound, ParamId, ParamStore};
use crate::tensor_nn::tape::{Tape, Var};
use crate::tensor_nn::tensor::{matmul_nt_into, Tensor};
use crate::tensor_nn::init::normal;
use crate::tensor_nn::layers::transformer_block_forward;

/// `K` contiguous blocks of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct WideRepresentation {
    k: usize,
    d: usize,
    data: Vec<f64>,
}

impl WideRepresentation {
    pub fn new(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!("K={k}, d={d}")));
        }
        if data.len() != k * d {
            return shape_err(format!("wide vector of length {} for K={k}, d={d}", data.len()));
        }
        Ok(Self { k, d, data })
    }

    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        let d = blocks.first().map(Vec::len).ok_or(Error::EmptyInput("blocks"))?;
        if blocks.iter().any(|b| b.len() != d) {
            return shape_err("blocks of unequal width");
        }
        Self::new(blocks.len(), d, blocks.concat())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn block(&self, j: usize) -> &[f64] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn blocks(&self) -> Vec<Vec<f64>> {
        (0..self.k).map(|j| self.block(j).to_vec()).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PccFullParams {
    /// `K d x K d`.
    pub p: Tensor,
    /// `K d x d`.
    pub g: Tensor,
    k: usize,
    d: usize,
}

impl PccFullParams {
    pub fn new(k: usize, d: usize, p: Tensor, g: Tensor) -> Result<Self> {
        if p.shape() != [k * d, k * d] || g.shape() != [k * d, d] {
            return shape_err(format!("P {:?}, G {:?} for K={k}, d={d}", p.shape(), g.shape()));
        }
        Ok(Self { p, g, k, d })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PccSimplifiedParams {
    /// `K x K` grid `p_ij`.
    pub p: Tensor,
    /// Gains `g_i`.
    pub g: Vec<f64>,
}

impl PccSimplifiedParams {
    pub fn new(p: Tensor, g: Vec<f64>) -> Result<Self> {
        let (k, k2) = p.dims2()?;
        if k != k2 || g.len() != k || k == 0 {
            return shape_err(format!("p {:?} with {} gains", p.shape(), g.len()));
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { p, g })
    }

    /// Identity prediction and unit gains.
    pub fn identity(k: usize) -> Self {
        Self { p: Tensor::identity(k), g: vec![1.0; k] }
    }

    pub fn k(&self) -> usize {
        self.g.len()
    }

    /// The block-structured `P = (p_ij I)`, `G = (g_i I)`.
    pub fn to_full(&self, d: usize) -> Result<PccFullParams> {
        let k = self.k();
        let kd = k * d;
        let p = Tensor::from_fn(kd, kd, |r, c| if r % d == c % d { self.p.get(r / d, c / d) } else { 0.0 })?;
        let g = Tensor::from_fn(kd, d, |r, c| if r % d == c { self.g[r / d] } else { 0.0 })?;
        PccFullParams::new(k, d, p, g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSelection {
    Same(usize),
    Alternating,
}

pub fn select_block(layer_index: usize, k: usize, selection: BlockSelection) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    match selection {
        BlockSelection::Same(j) if j >= k => Err(Error::InvalidArgument(format!("fixed block {j} with K={k}"))),
        BlockSelection::Same(j) => Ok(j),
        BlockSelection::Alternating => Ok(layer_index % k),
    }
}

fn check_layer_output(out: &[f64], d: usize) -> Result<()> {
    if out.len() != d {
        return shape_err(format!("layer returned width {}, expected {d}", out.len()));
    }
    Ok(())
}

pub fn pcc_forward_full<L>(x_old: &WideRepresentation, params: &PccFullParams, layer: L, j: usize) -> Result<WideRepresentation>
where
    L: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let (k, d) = (x_old.k(), x_old.d());
    if params.k() != k || params.d() != d || j >= k {
        return shape_err(format!("PCC params K={}, d={} for input K={k}, d={d}, j*={j}", params.k(), params.d()));
    }
    let x_hat = params.p.matvec(x_old.as_slice())?;
    let x_tilde = layer(x_old.block(j))?;
    check_layer_output(&x_tilde, d)?;
    let innovation: Vec<f64> = x_tilde.iter().zip(&x_hat[j * d..(j + 1) * d]).map(|(a, b)| a - b).collect();
    let correction = params.g.matvec(&innovation)?;
    WideRepresentation::new(k, d, x_hat.iter().zip(&correction).map(|(a, b)| a + b).collect())
}

pub fn pcc_forward_simplified<L>(
    x_old: &WideRepresentation,
    params: &PccSimplifiedParams,
    layer: L,
    j: usize,
) -> Result<WideRepresentation>
where
    L: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let (k, d) = (x_old.k(), x_old.d());
    if params.k() != k || j >= k {
        return shape_err(format!("PCC params K={} for input K={k}, j*={j}", params.k()));
    }
    let mut x_hat = vec![0.0; k * d];
    for i in 0..k {
        let out = &mut x_hat[i * d..(i + 1) * d];
        for jj in 0..k {
            let p = params.p.get(i, jj);
            for (o, x) in out.iter_mut().zip(x_old.block(jj)) {
                *o += p * x;
            }
        }
    }
    let x_tilde = layer(x_old.block(j))?;
    check_layer_output(&x_tilde, d)?;
    let innovation: Vec<f64> = x_tilde.iter().zip(&x_hat[j * d..(j + 1) * d]).map(|(a, b)| a - b).collect();
    for i in 0..k {
        for (o, e) in x_hat[i * d..(i + 1) * d].iter_mut().zip(&innovation) {
            *o += params.g[i] * e;
        }
    }
    WideRepresentation::new(k, d, x_hat)
}

/// Adds a looked-up memory vector into the token representation.
pub fn sum_consume(x: &[f64], mem: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mem.len() {
        return shape_err(format!("sum of lengths {} and {}", x.len(), mem.len()));
    }
    Ok(x.iter().zip(mem).map(|(a, b)| a + b).collect())
}

#[derive(Clone, Debug)]
pub struct DivideProjectParams {
    e: usize,
    /// `K - 1` matrices of shape `(e / (K - 1)) x d`.
    projections: Vec<Tensor>,
}

impl DivideProjectParams {
    pub fn new(e: usize, d: usize, projections: Vec<Tensor>) -> Result<Self> {
        let parts = projections.len();
        if e == 0 && parts == 0 {
            return Ok(Self { e, projections });
        }
        if parts == 0 || !e.is_multiple_of(parts) {
            return Err(Error::InvalidArgument(format!("{parts} chunks do not divide e={e}")));
        }
        for t in &projections {
            if t.shape() != [e / parts, d] {
                return shape_err(format!("projection {:?}, expected [{}, {d}]", t.shape(), e / parts));
            }
        }
        Ok(Self { e, projections })
    }

    pub fn random(e: usize, d: usize, k_minus_1: usize, rng: &mut SeededRng) -> Result<Self> {
        if k_minus_1 == 0 || !e.is_multiple_of(k_minus_1) {
            return Err(Error::InvalidArgument(format!("{k_minus_1} chunks do not divide e={e}")));
        }
        let chunk = e / k_minus_1;
        let projections = (0..k_minus_1)
            .map(|_| normal(&[chunk, d], (1.0 / chunk as f64).sqrt(), rng))
            .collect::<Result<_>>()?;
        Self::new(e, d, projections)
    }

    pub fn e(&self) -> usize {
        self.e
    }

    pub fn k_minus_1(&self) -> usize {
        self.projections.len()
    }

    /// `K` once the primary block is prepended.
    pub fn k(&self) -> usize {
        self.projections.len() + 1
    }
}

/// Splits `aug` into `K - 1` chunks and projects each to width `d`.
pub fn divide_and_project(aug: &[f64], params: &DivideProjectParams) -> Result<Vec<Vec<f64>>> {
    if aug.len() != params.e {
        return shape_err(format!("augmentation of length {} for e={}", aug.len(), params.e));
    }
    let parts = params.k_minus_1();
    if parts == 0 {
        return Ok(Vec::new());
    }
    let chunk = params.e / parts;
    params
        .projections
        .iter()
        .enumerate()
        .map(|(i, m)| m.transpose()?.matvec(&aug[i * chunk..(i + 1) * chunk]))
        .collect()
}

/// Multiplies per token for simplified prediction and correction.
pub fn pcc_simplified_multiplies(k: usize, d: usize) -> usize {
    k * k * d + 2 * k * d + d
}

/// Multiplies per token for the full-matrix variant.
pub fn pcc_full_multiplies(k: usize, d: usize) -> usize {
    (k * d) * (k * d) + k * d * d
}

/// Per-layer update rule parameters of a stack.
#[derive(Clone, Debug, PartialEq)]
pub enum PccParams {
    Full(PccFullParams),
    Simplified(PccSimplifiedParams),
}

/// Applies prediction and correction to every row of `x_old` (`rows x K d`)
/// given the computed block `x_tilde` (`rows x d`).
fn pcc_rows(x_old: &Tensor, x_tilde: &Tensor, params: &PccParams, k: usize, j: usize) -> Result<Tensor> {
    let (rows, width) = x_old.dims2()?;
    let d = width / k;
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let x = WideRepresentation::new(k, d, x_old.row_slice(r).to_vec())?;
        let tilde = x_tilde.row_slice(r).to_vec();
        let next = match params {
            PccParams::Full(p) => pcc_forward_full(&x, p, |_| Ok(tilde), j)?,
            PccParams::Simplified(p) => pcc_forward_simplified(&x, p, |_| Ok(tilde), j)?,
        };
        out.extend(next.into_flat());
    }
    Tensor::matrix(rows, width, out)
}

fn column_block(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let rows = x.rows();
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&x.row_slice(r)[start..start + len]);
    }
    Tensor::matrix(rows, len, data)
}

/// Result of [`altup_stack_forward`].
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// `seq x K d` final representation.
    pub representation: Tensor,
    /// Block computed at each layer.
    pub trace: Vec<usize>,
}

/// Runs a stack of blocks over one token sequence. With `K = 1` every layer
/// is applied directly, with no prediction or correction.
pub fn altup_stack_forward(
    tokens: &[usize],
    tables: &[Tensor],
    layers: &[TransformerBlockParams],
    selection: BlockSelection,
    pcc: &[PccParams],
    causal: bool,
) -> Result<StackOutput> {
    let k = tables.len();
    if k == 0 || layers.is_empty() || tokens.is_empty() {
        return Err(Error::EmptyInput("tokens, tables or layers"));
    }
    let d = tables[0].cols();
    if tables.iter().any(|t| t.cols() != d) || layers.iter().any(|l| l.width() != d) {
        return shape_err("tables and layers must share width d");
    }
    if k > 1 && pcc.len() != layers.len() {
        return shape_err(format!("{} PCC parameter sets for {} layers", pcc.len(), layers.len()));
    }
    let seq = tokens.len();
    let mut data = Vec::with_capacity(seq * k * d);
    for &t in tokens {
        for table in tables {
            if t >= table.rows() {
                return Err(Error::OutOfVocabulary { id: t, n: table.rows() });
            }
            data.extend_from_slice(table.row_slice(t));
        }
    }
    let mut x = Tensor::matrix(seq, k * d, data)?;
    let mut trace = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let j = select_block(i, k, selection)?;
        trace.push(j);
        if k == 1 {
            x = transformer_block_forward(&x, layer, causal)?;
            continue;
        }
        let x_tilde = transformer_block_forward(&column_block(&x, j * d, d)?, layer, causal)?;
        x = pcc_rows(&x, &x_tilde, &pcc[i], k, j)?;
    }
    Ok(StackOutput { representation: x, trace })
}

/// Trainable per-layer PCC parameters.
#[derive(Clone, Copy, Debug)]
pub enum PccLayer {
    /// `p` is `K x K`, `g` is `1 x K`.
    Simplified { p: ParamId, g: ParamId, k: usize },
    /// `p` is `K d x K d`, `g` is `K d x d`.
    Full { p: ParamId, g: ParamId, k: usize },
}

impl PccLayer {
    /// Identity prediction, unit gains.
    pub fn register_simplified(k: usize, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let init = PccSimplifiedParams::identity(k);
        Ok(PccLayer::Simplified {
            p: store.add(format!("{prefix}.pcc.p"), init.p)?,
            g: store.add(format!("{prefix}.pcc.g"), Tensor::filled(&[1, k], 1.0))?,
            k,
        })
    }

    /// The block-structured embedding of the simplified initialization.
    pub fn register_full(k: usize, d: usize, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let init = PccSimplifiedParams::identity(k).to_full(d)?;
        Ok(PccLayer::Full {
            p: store.add(format!("{prefix}.pcc.p"), init.p)?,
            g: store.add(format!("{prefix}.pcc.g"), init.g)?,
            k,
        })
    }

    pub fn k(&self) -> usize {
        match *self {
            PccLayer::Simplified { k, .. } | PccLayer::Full { k, .. } => k,
        }
    }

    /// One predict, compute, correct step on `x_old` (`rows x K d`).
    pub fn forward<L>(&self, tape: &mut Tape, params: &Bound, x_old: Var, j: usize, layer: L) -> Result<Var>
    where
        L: FnOnce(&mut Tape, Var) -> Result<Var>,
    {
        let k = self.k();
        let (_, width) = tape.value(x_old).dims2()?;
        if width % k != 0 || j >= k {
            return shape_err(format!("width {width} with K={k}, j*={j}"));
        }
        let d = width / k;
        let computed_in = tape.slice_cols(x_old, j * d, d)?;
        match *self {
            PccLayer::Simplified { p, g, .. } => {
                let (p, g) = (params.get(p), params.get(g));
                let blocks: Vec<Var> = (0..k).map(|i| tape.slice_cols(x_old, i * d, d)).collect::<Result<_>>()?;
                let mut x_hat = Vec::with_capacity(k);
                for i in 0..k {
                    let mut acc: Option<Var> = None;
                    for (jj, &b) in blocks.iter().enumerate() {
                        let pij = tape.element(p, i * k + jj)?;
                        let term = tape.scale_by(b, pij)?;
                        acc = Some(match acc {
                            Some(a) => tape.add(a, term)?,
                            None => term,
                        });
                    }
                    x_hat.push(acc.expect("K >= 1"));
                }
                let x_tilde = layer(tape, computed_in)?;
                let innovation = tape.sub(x_tilde, x_hat[j])?;
                let mut out = Vec::with_capacity(k);
                for (i, &h) in x_hat.iter().enumerate() {
                    let gi = tape.element(g, i)?;
                    let c = tape.scale_by(innovation, gi)?;
                    out.push(tape.add(h, c)?);
                }
                tape.concat_cols(&out)
            }
            PccLayer::Full { p, g, .. } => {
                let x_hat = tape.matmul_nt(x_old, params.get(p))?;
                let x_tilde = layer(tape, computed_in)?;
                let predicted = tape.slice_cols(x_hat, j * d, d)?;
                let innovation = tape.sub(x_tilde, predicted)?;
                let correction = tape.matmul_nt(innovation, params.get(g))?;
                tape.add(x_hat, correction)
            }
        }
    }
}

/// `out = x P^T` for a batch of wide rows; exposed for oracle tests.
pub fn predict_rows(x: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (m, kd) = x.dims2()?;
    if p.shape() != [kd, kd] {
        return shape_err(format!("P {:?} for width {kd}", p.shape()));
    }
    let mut out = vec![0.0; m * kd];
    matmul_nt_into(x.data(), p.data(), &mut out, m, kd, kd);
    Tensor::matrix(m, kd, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::init::seeded;
    use rand::Rng;

    fn random_vec(n: usize, rng: &mut SeededRng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_wide(k: usize, d: usize, rng: &mut SeededRng) -> WideRepresentation {
        WideRepresentation::new(k, d, random_vec(k * d, rng)).unwrap()
    }

    #[test]
    fn selection_examples() {
        let trace: Vec<usize> = (0..6).map(|i| select_block(i, 2, BlockSelection::Alternating).unwrap()).collect();
        assert_eq!(trace, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(select_block(5, 3, BlockSelection::Same(0)).unwrap(), 0);
        assert_eq!(select_block(7, 3, BlockSelection::Alternating).unwrap(), 1);
        assert!(select_block(0, 3, BlockSelection::Same(3)).is_err());
    }

    #[test]
    fn wide_blocks_roundtrip() {
        let w = WideRepresentation::from_blocks(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(w.block(1), &[3.0, 4.0]);
        assert_eq!(w.blocks().concat(), w.as_slice());
    }

    #[test]
    fn full_selector_gain_replaces_block() {
        let (k, d, j) = (3, 2, 1);
        let mut rng = seeded(1);
        let x = random_wide(k, d, &mut rng);
        let g = Tensor::from_fn(k * d, d, |r, c| if r / d == j && r % d == c { 1.0 } else { 0.0 }).unwrap();
        let params = PccFullParams::new(k, d, Tensor::identity(k * d), g).unwrap();
        let out = pcc_forward_full(&x, &params, |v| Ok(v.iter().map(|a| a * 3.0 + 1.0).collect()), j).unwrap();
        for i in 0..k {
            if i == j {
                let want: Vec<f64> = x.block(j).iter().map(|a| a * 3.0 + 1.0).collect();
                assert_eq!(out.block(i), want.as_slice());
            } else {
                assert_eq!(out.block(i), x.block(i));
            }
        }
    }

    #[test]
    fn zero_innovation_keeps_input() {
        let mut rng = seeded(2);
        let x = random_wide(2, 3, &mut rng);
        let full = PccFullParams::new(2, 3, Tensor::identity(6), normal(&[6, 3], 1.0, &mut rng).unwrap()).unwrap();
        assert_eq!(pcc_forward_full(&x, &full, |v| Ok(v.to_vec()), 0).unwrap(), x);
        let simple = PccSimplifiedParams::new(Tensor::identity(2), vec![0.3, -2.0]).unwrap();
        assert_eq!(pcc_forward_simplified(&x, &simple, |v| Ok(v.to_vec()), 1).unwrap(), x);
    }

    #[test]
    fn full_matches_scripted_formula() {
        let (k, d, j) = (2, 3, 1);
        let mut rng = seeded(3);
        let x = random_wide(k, d, &mut rng);
        let p = normal(&[6, 6], 1.0, &mut rng).unwrap();
        let g = normal(&[6, 3], 1.0, &mut rng).unwrap();
        let params = PccFullParams::new(k, d, p.clone(), g.clone()).unwrap();
        let layer = |v: &[f64]| Ok(v.iter().map(|a| a.tanh()).collect::<Vec<f64>>());
        let out = pcc_forward_full(&x, &params, layer, j).unwrap();

        let xs = x.as_slice();
        let mut hat = [0.0; 6];
        for r in 0..6 {
            for c in 0..6 {
                hat[r] += p.get(r, c) * xs[c];
            }
        }
        let innov: Vec<f64> = (0..3).map(|c| xs[3 + c].tanh() - hat[3 + c]).collect();
        for r in 0..6 {
            let mut want = hat[r];
            for c in 0..3 {
                want += g.get(r, c) * innov[c];
            }
            assert!((out.as_slice()[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn simplified_replaces_selected_block() {
        let mut rng = seeded(4);
        let x = random_wide(2, 4, &mut rng);
        let params = PccSimplifiedParams::new(Tensor::identity(2), vec![1.0, 0.0]).unwrap();
        let out = pcc_forward_simplified(&x, &params, |v| Ok(v.iter().map(|a| -a).collect()), 0).unwrap();
        let neg: Vec<f64> = x.block(0).iter().map(|a| -a).collect();
        assert_eq!(out.block(0), neg.as_slice());
        assert_eq!(out.block(1), x.block(1));
    }

    #[test]
    fn simplified_matches_block_structured_full() {
        let mut rng = seeded(5);
        let (k, d) = (3, 4);
        let x = random_wide(k, d, &mut rng);
        let s = PccSimplifiedParams::new(normal(&[k, k], 1.0, &mut rng).unwrap(), random_vec(k, &mut rng)).unwrap();
        let layer = |v: &[f64]| Ok(v.iter().map(|a| a.sin()).collect::<Vec<f64>>());
        let a = pcc_forward_simplified(&x, &s, layer, 2).unwrap();
        let b = pcc_forward_full(&x, &s.to_full(d).unwrap(), layer, 2).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_gain_gives_prediction() {
        let mut rng = seeded(6);
        let x = random_wide(2, 2, &mut rng);
        let p = normal(&[2, 2], 1.0, &mut rng).unwrap();
        let s = PccSimplifiedParams::new(p.clone(), vec![0.0, 0.0]).unwrap();
        let out = pcc_forward_simplified(&x, &s, |_| Ok(vec![100.0, 100.0]), 0).unwrap();
        let full = s.to_full(2).unwrap();
        assert_eq!(out.into_flat(), full.p.matvec(x.as_slice()).unwrap());
    }

    #[test]
    fn sum_consume_examples() {
        assert_eq!(sum_consume(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sum_consume(&[0.0, 0.0], &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(sum_consume(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn divide_and_project_chunks() {
        let empty = DivideProjectParams::new(0, 64, vec![]).unwrap();
        assert_eq!(empty.k(), 1);
        assert!(divide_and_project(&[], &empty).unwrap().is_empty());

        let mut rng = seeded(7);
        let params = DivideProjectParams::random(96, 64, 2, &mut rng).unwrap();
        let aug = random_vec(96, &mut rng);
        let out = divide_and_project(&aug, &params).unwrap();
        assert_eq!(out.len(), 2);
        for (i, block) in out.iter().enumerate() {
            assert_eq!(block.len(), 64);
            let m = &params.projections[i];
            for c in 0..64 {
                let want: f64 = (0..48).map(|r| aug[i * 48 + r] * m.get(r, c)).sum();
                assert!((block[c] - want).abs() < 1e-12);
            }
        }
        assert!(DivideProjectParams::random(96, 64, 5, &mut rng).is_err());
    }

    #[test]
    fn flop_formula() {
        assert_eq!(pcc_simplified_multiplies(2, 64), 4 * 64 + 4 * 64 + 64);
        assert!(pcc_simplified_multiplies(2, 64) < crate::tensor_nn::transformer_layer_multiplies(64, 256, 1));
    }

    #[test]
    fn stack_trace_alternates() {
        let mut rng = seeded(8);
        let tables: Vec<Tensor> = (0..2).map(|_| normal(&[5, 4], 1.0, &mut rng).unwrap()).collect();
        let layers: Vec<TransformerBlockParams> =
            (0..2).map(|_| TransformerBlockParams::init(4, 2, 8, &mut rng).unwrap()).collect();
        let pcc = vec![PccParams::Simplified(PccSimplifiedParams::identity(2)); 2];
        let out = altup_stack_forward(&[1, 3, 0], &tables, &layers, BlockSelection::Alternating, &pcc, true).unwrap();
        assert_eq!(out.trace, vec![0, 1]);
        assert_eq!(out.representation.shape(), &[3, 8]);
    }

    #[test]
    fn stack_with_one_block_is_baseline() {
        let mut rng = seeded(9);
        let table = normal(&[5, 4], 1.0, &mut rng).unwrap();
        let layers: Vec<TransformerBlockParams> =
            (0..3).map(|_| TransformerBlockParams::init(4, 1, 8, &mut rng).unwrap()).collect();
        let tokens = [4, 2, 2, 0];
        let out = altup_stack_forward(&tokens, std::slice::from_ref(&table), &layers, BlockSelection::Alternating, &[], true).unwrap();
        let mut x = Tensor::from_fn(4, 4, |r, c| table.get(tokens[r], c)).unwrap();
        for l in &layers {
            x = transformer_block_forward(&x, l, true).unwrap();
        }
        assert!(out.representation.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn tape_simplified_matches_vector_form() {
        let mut rng = seeded(10);
        let (k, d) = (3, 2);
        let x = random_wide(k, d, &mut rng);
        let mut store = ParamStore::new();
        let layer = PccLayer::register_simplified(k, &mut store, "l0").unwrap();
        let PccLayer::Simplified { p, g, .. } = layer else { unreachable!() };
        let pv = normal(&[k, k], 1.0, &mut rng).unwrap();
        let gv = random_vec(k, &mut rng);
        store.set(p, pv.clone()).unwrap();
        store.set(g, Tensor::row(&gv).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.leaf(Tensor::row(x.as_slice()).unwrap());
        let out = layer.forward(&mut tape, &bound, xv, 1, |t, v| Ok(t.tanh(v))).unwrap();
        let want = pcc_forward_simplified(
            &x,
            &PccSimplifiedParams::new(pv, gv).unwrap(),
            |v| Ok(v.iter().map(|a| a.tanh()).collect()),
            1,
        )
        .unwrap();
        for (a, b) in tape.value(out).data().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
