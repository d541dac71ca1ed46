//! Lookup functions, memory tables of partial experts, and the
//! memory-augmented layer `L(x) + sum_i w_i(x) f_i(x)`.
//!
//! Five lookup functions map a token representation `x` (and the token id)
//! to table indices:
//!
//! * Token-ID: the vocabulary index itself, identical at every layer.
//! * Softmax router: `p = softmax(W x)`, top-k indices weighted by `p_i`.
//!   Weighting by the probabilities is what lets the router receive
//!   gradients through the otherwise discrete selection.
//! * Hyperplane LSH: random equispaced hyperplanes partition the input
//!   space into a grid; the cell tuple is mixed into one of `n` buckets.
//! * Spherical LSH: nearest random unit anchor in angle (Voronoi cells on
//!   the sphere).
//! * Min-hash: the element of a token set with the smallest rank under a
//!   random permutation of the universe.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::tensor_nn::init::{lecun_normal, normal, SeededRng};
use crate::tensor_nn::layers::{apply_expert, ConstantExpertParams, ExpertParams, TwoLayerExpertParams};
use crate::tensor_nn::params::{Bound, ParamId, ParamStore};
use crate::tensor_nn::tape::{softmax_in_place, Tape, Var};
use crate::tensor_nn::tensor::{dot, Tensor};

/// Router weights are drawn from `Normal(0, ROUTER_INIT_STD)`.
pub const ROUTER_INIT_STD: f64 = 2e-2;
/// Multiplicative jitter half-width used in train mode.
pub const DEFAULT_JITTER_EPSILON: f64 = 0.01;
/// Hyperplane bucket width for unit-norm inputs.
pub const DEFAULT_BUCKET_WIDTH: f64 = 1.0;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a grid-cell tuple.
pub fn mix_cells(cells: &[i64], seed: u64) -> u64 {
    let mut h = splitmix64(seed ^ cells.len() as u64);
    for &c in cells {
        h = splitmix64(h ^ c as u64);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenContext {
    pub id: usize,
}

/// Selected table indices with their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteResult {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RouteResult {
    fn single(index: usize) -> Self {
        Self { indices: vec![index], weights: vec![1.0] }
    }
}

pub fn token_id_lookup(ctx: TokenContext, n: usize) -> Result<RouteResult> {
    if ctx.id >= n {
        return Err(Error::OutOfVocabulary { id: ctx.id, n });
    }
    Ok(RouteResult::single(ctx.id))
}

#[derive(Clone, Debug)]
pub struct SoftmaxRouterParams {
    /// `n x d_in`.
    pub w: Tensor,
    pub k: usize,
    pub jitter_epsilon: f64,
}

impl SoftmaxRouterParams {
    pub fn new(w: Tensor, k: usize, jitter_epsilon: f64) -> Result<Self> {
        let (n, _) = w.dims2()?;
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("top-k {k} for {n} experts")));
        }
        if !(jitter_epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("jitter epsilon {jitter_epsilon}")));
        }
        Ok(Self { w, k, jitter_epsilon })
    }

    pub fn init(n: usize, d_in: usize, k: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::new(normal(&[n, d_in], ROUTER_INIT_STD, rng)?, k, DEFAULT_JITTER_EPSILON)
    }

    pub fn n(&self) -> usize {
        self.w.rows()
    }
}

/// Multiplicative noise factors uniform in `[1 - eps, 1 + eps]`.
pub fn jitter_factors(len: usize, epsilon: f64, rng: &mut SeededRng) -> Vec<f64> {
    if epsilon == 0.0 {
        return vec![1.0; len];
    }
    (0..len).map(|_| rng.gen_range(1.0 - epsilon..=1.0 + epsilon)).collect()
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Full router distribution `softmax(W x)` before top-k truncation.
pub fn router_probabilities(x: &[f64], params: &SoftmaxRouterParams, jitter: Option<&mut SeededRng>) -> Result<Vec<f64>> {
    let d = params.w.cols();
    if x.len() != d {
        return shape_err(format!("router input {} vs {d}", x.len()));
    }
    let input: Vec<f64> = match jitter {
        Some(rng) => jitter_factors(d, params.jitter_epsilon, rng)
            .iter()
            .zip(x)
            .map(|(f, v)| f * v)
            .collect(),
        None => x.to_vec(),
    };
    let mut p = params.w.matvec(&input)?;
    softmax_in_place(&mut p);
    Ok(p)
}

/// Softmax routing. Passing a generator enables train-mode jitter.
pub fn softmax_route(x: &[f64], params: &SoftmaxRouterParams, jitter: Option<&mut SeededRng>) -> Result<RouteResult> {
    let p = router_probabilities(x, params, jitter)?;
    let indices = top_k(&p, params.k);
    let weights = indices.iter().map(|&i| p[i]).collect();
    Ok(RouteResult { indices, weights })
}

#[derive(Clone, Debug)]
pub struct HyperplaneLshParams {
    /// `k_h x d_in`, i.i.d. standard normal.
    directions: Tensor,
    offsets: Vec<f64>,
    width: f64,
    n: usize,
    mix_seed: u64,
}

impl HyperplaneLshParams {
    pub fn new(directions: Tensor, offsets: Vec<f64>, width: f64, n: usize, mix_seed: u64) -> Result<Self> {
        let (k, _) = directions.dims2()?;
        if offsets.len() != k || k == 0 {
            return shape_err(format!("{k} directions with {} offsets", offsets.len()));
        }
        if !(width > 0.0) || n == 0 {
            return Err(Error::InvalidArgument(format!("bucket width {width}, table size {n}")));
        }
        Ok(Self { directions, offsets, width, n, mix_seed })
    }

    pub fn random(d_in: usize, num_projections: usize, width: f64, n: usize, rng: &mut SeededRng) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidArgument(format!("bucket width {width}")));
        }
        let directions = normal(&[num_projections, d_in], 1.0, rng)?;
        let offsets = (0..num_projections).map(|_| rng.gen_range(0.0..width)).collect();
        let mix_seed = rng.gen();
        Self::new(directions, offsets, width, n, mix_seed)
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_projections(&self) -> usize {
        self.offsets.len()
    }

    pub fn d_in(&self) -> usize {
        self.directions.cols()
    }

    /// Grid cell `floor((a_j . x + b_j) / w)` per projection.
    pub fn cells(&self, x: &[f64]) -> Result<Vec<i64>> {
        let proj = self.directions.matvec(x)?;
        Ok(proj
            .iter()
            .zip(&self.offsets)
            .map(|(p, b)| ((p + b) / self.width).floor() as i64)
            .collect())
    }

    pub fn bucket_of_cells(&self, cells: &[i64]) -> usize {
        (mix_cells(cells, self.mix_seed) % self.n as u64) as usize
    }
}

pub fn hyperplane_lsh_lookup(x: &[f64], params: &HyperplaneLshParams) -> Result<RouteResult> {
    let cells = params.cells(x)?;
    Ok(RouteResult::single(params.bucket_of_cells(&cells)))
}

#[derive(Clone, Debug)]
pub struct SphericalLshParams {
    /// `n x d_in`, unit rows.
    anchors: Tensor,
}

impl SphericalLshParams {
    pub fn new(anchors: Tensor) -> Result<Self> {
        let (n, _) = anchors.dims2()?;
        if n == 0 {
            return Err(Error::EmptyInput("spherical anchors"));
        }
        for i in 0..n {
            let norm = dot(anchors.row_slice(i), anchors.row_slice(i)).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("anchor {i} has norm {norm}")));
            }
        }
        Ok(Self { anchors })
    }

    /// `n` anchors drawn uniformly from the unit sphere.
    pub fn random(n: usize, d_in: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut data = Vec::with_capacity(n * d_in);
        for _ in 0..n {
            let v: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dot(&v, &v).sqrt();
            data.extend(v.iter().map(|x| x / norm));
        }
        Self::new(Tensor::matrix(n, d_in, data)?)
    }

    pub fn n(&self) -> usize {
        self.anchors.rows()
    }

    pub fn anchors(&self) -> &Tensor {
        &self.anchors
    }
}

pub fn spherical_lsh_lookup(x: &[f64], params: &SphericalLshParams) -> Result<RouteResult> {
    let norm = dot(x, x).sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("spherical lookup of the zero vector".into()));
    }
    let unit: Vec<f64> = x.iter().map(|v| v / norm).collect();
    let scores = params.anchors.matvec(&unit)?;
    Ok(RouteResult::single(top_k(&scores, 1)[0]))
}

#[derive(Clone, Debug)]
pub struct MinHashParams {
    /// `ranks[e]` is the position of element `e` in the random order.
    ranks: Vec<u32>,
    n: usize,
}

impl MinHashParams {
    pub fn new(universe: usize, n: usize, rng: &mut SeededRng) -> Result<Self> {
        if universe == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!("universe {universe}, table size {n}")));
        }
        let mut order: Vec<u32> = (0..universe as u32).collect();
        order.shuffle(rng);
        let mut ranks = vec![0u32; universe];
        for (pos, &e) in order.iter().enumerate() {
            ranks[e as usize] = pos as u32;
        }
        Ok(Self { ranks, n })
    }

    pub fn universe(&self) -> usize {
        self.ranks.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self, element: usize) -> Option<u32> {
        self.ranks.get(element).copied()
    }
}

pub fn minhash_lookup(token_set: &BTreeSet<usize>, params: &MinHashParams) -> Result<RouteResult> {
    let mut best: Option<(u32, usize)> = None;
    for &e in token_set {
        let r = params
            .rank(e)
            .ok_or(Error::OutOfVocabulary { id: e, n: params.universe() })?;
        if best.is_none_or(|(br, _)| r < br) {
            best = Some((r, e));
        }
    }
    let (_, element) = best.ok_or(Error::EmptyInput("min-hash token set"))?;
    Ok(RouteResult::single(element % params.n))
}

/// Lookup function `q(x, id)`.
#[derive(Clone, Debug)]
pub enum LookupFunction {
    TokenId { n: usize },
    Softmax(SoftmaxRouterParams),
    HyperplaneLsh(HyperplaneLshParams),
    SphericalLsh(SphericalLshParams),
    /// Hashes the singleton token set `{id}`.
    MinHash(MinHashParams),
}

impl LookupFunction {
    pub fn n(&self) -> usize {
        match self {
            LookupFunction::TokenId { n } => *n,
            LookupFunction::Softmax(p) => p.n(),
            LookupFunction::HyperplaneLsh(p) => p.n(),
            LookupFunction::SphericalLsh(p) => p.n(),
            LookupFunction::MinHash(p) => p.n(),
        }
    }

    pub fn route(&self, x: &[f64], ctx: TokenContext, jitter: Option<&mut SeededRng>) -> Result<RouteResult> {
        match self {
            LookupFunction::TokenId { n } => token_id_lookup(ctx, *n),
            LookupFunction::Softmax(p) => softmax_route(x, p, jitter),
            LookupFunction::HyperplaneLsh(p) => hyperplane_lsh_lookup(&unit_or_zero(x), p),
            LookupFunction::SphericalLsh(p) => spherical_lsh_lookup(x, p),
            LookupFunction::MinHash(p) => minhash_lookup(&BTreeSet::from([ctx.id]), p),
        }
    }
}

fn unit_or_zero(x: &[f64]) -> Vec<f64> {
    let norm = dot(x, x).sqrt();
    if norm == 0.0 {
        x.to_vec()
    } else {
        x.iter().map(|v| v / norm).collect()
    }
}

/// Expert parameters for all `n` buckets of a table.
#[derive(Clone, Debug, PartialEq)]
pub enum ExpertTable {
    /// `u`, `v` of shape `[n, d_in, rank]`.
    TwoLayer { u: Tensor, v: Tensor },
    /// `b` of shape `[n, d_in]`.
    Constant { b: Tensor },
}

/// Memory table `T : [n] -> F`, all entries of one kind.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTable {
    entries: ExpertTable,
}

impl MemoryTable {
    pub fn new(entries: ExpertTable) -> Result<Self> {
        match &entries {
            ExpertTable::TwoLayer { u, v } => {
                if u.shape().len() != 3 || u.shape() != v.shape() || u.shape()[2] == 0 {
                    return shape_err(format!("expert tables {:?}/{:?}", u.shape(), v.shape()));
                }
            }
            ExpertTable::Constant { b } => {
                b.dims2()?;
            }
        }
        Ok(Self { entries })
    }

    /// LeCun-normal two-layer experts, or zero constants when `rank == 0`.
    pub fn init(n: usize, d_in: usize, rank: usize, rng: &mut SeededRng) -> Result<Self> {
        if n == 0 || d_in == 0 {
            return Err(Error::InvalidArgument(format!("table size {n}, d_in {d_in}")));
        }
        if rank == 0 {
            return Self::new(ExpertTable::Constant { b: Tensor::zeros(&[n, d_in]) });
        }
        let u = lecun_normal(&[n, d_in, rank], d_in, rng)?;
        let v = lecun_normal(&[n, d_in, rank], rank, rng)?;
        Self::new(ExpertTable::TwoLayer { u, v })
    }

    pub fn n(&self) -> usize {
        match &self.entries {
            ExpertTable::TwoLayer { u, .. } => u.shape()[0],
            ExpertTable::Constant { b } => b.rows(),
        }
    }

    pub fn d_in(&self) -> usize {
        match &self.entries {
            ExpertTable::TwoLayer { u, .. } => u.shape()[1],
            ExpertTable::Constant { b } => b.cols(),
        }
    }

    /// 0 for constant experts.
    pub fn rank(&self) -> usize {
        match &self.entries {
            ExpertTable::TwoLayer { u, .. } => u.shape()[2],
            ExpertTable::Constant { .. } => 0,
        }
    }

    pub fn entries(&self) -> &ExpertTable {
        &self.entries
    }

    pub fn into_entries(self) -> ExpertTable {
        self.entries
    }

    pub fn expert(&self, i: usize) -> Result<ExpertParams> {
        if i >= self.n() {
            return Err(Error::OutOfVocabulary { id: i, n: self.n() });
        }
        let d = self.d_in();
        Ok(match &self.entries {
            ExpertTable::TwoLayer { u, v } => {
                let r = self.rank();
                let slice = |t: &Tensor| Tensor::matrix(d, r, t.data()[i * d * r..(i + 1) * d * r].to_vec());
                ExpertParams::TwoLayer(TwoLayerExpertParams::new(slice(u)?, slice(v)?)?)
            }
            ExpertTable::Constant { b } => ExpertParams::Constant(ConstantExpertParams { b: b.row_slice(i).to_vec() }),
        })
    }
}

/// `L(x) + sum_{i in T} w_i(x) f_i(x)` for a single token.
pub fn memory_augmented_forward<L>(
    layer: L,
    x: &[f64],
    ctx: TokenContext,
    lookup: &LookupFunction,
    table: &MemoryTable,
    jitter: Option<&mut SeededRng>,
) -> Result<Vec<f64>>
where
    L: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if lookup.n() != table.n() {
        return shape_err(format!("lookup over {} buckets, table has {}", lookup.n(), table.n()));
    }
    let route = lookup.route(x, ctx, jitter)?;
    let mut out = layer(x)?;
    if out.len() != x.len() {
        return shape_err(format!("layer maps width {} to {}", x.len(), out.len()));
    }
    for (&i, &w) in route.indices.iter().zip(&route.weights) {
        let f = apply_expert(x, &table.expert(i)?)?;
        for (o, fv) in out.iter_mut().zip(f) {
            *o += w * fv;
        }
    }
    Ok(out)
}

/// Parameter counts for `buckets` partial experts of a given rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartialExpertCount {
    /// `max(2 rank, 1) * buckets`, the width-free figure used to compare lookups.
    pub comparison: usize,
    /// `max(2 rank, 1) * buckets * d_in`, the scalars actually added.
    pub full: usize,
    /// `2 max(rank, 1) * buckets * d_in`, the alternative closed form; differs at rank 0.
    pub full_alternative: usize,
}

pub fn partial_expert_param_count(rank: usize, buckets: usize, d_in: usize) -> PartialExpertCount {
    let per_bucket = (2 * rank).max(1);
    PartialExpertCount {
        comparison: per_bucket * buckets,
        full: per_bucket * buckets * d_in,
        full_alternative: 2 * rank.max(1) * buckets * d_in,
    }
}

/// Kind of lookup used by a trainable [`MemoryLayer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookupKind {
    TokenId,
    Softmax,
    HyperplaneLsh,
    SphericalLsh,
    MinHash,
}

impl LookupKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "token_id" | "tokenid" => LookupKind::TokenId,
            "softmax" => LookupKind::Softmax,
            "hyperplane" | "lsh" => LookupKind::HyperplaneLsh,
            "spherical" => LookupKind::SphericalLsh,
            "minhash" => LookupKind::MinHash,
            other => return Err(Error::Config(format!("unknown lookup kind '{other}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LookupKind::TokenId => "token_id",
            LookupKind::Softmax => "softmax",
            LookupKind::HyperplaneLsh => "hyperplane",
            LookupKind::SphericalLsh => "spherical",
            LookupKind::MinHash => "minhash",
        }
    }
}

#[derive(Clone, Debug)]
enum Router {
    Fixed(LookupFunction),
    Softmax { w: ParamId, k: usize, jitter_epsilon: f64 },
}

#[derive(Clone, Debug)]
enum TableIds {
    TwoLayer { u: ParamId, v: ParamId },
    Constant { b: ParamId },
}

/// Trainable partial-expert memory attached to one layer. Its output is
/// added to the layer output.
#[derive(Clone, Debug)]
pub struct MemoryLayer {
    router: Router,
    table: TableIds,
    n: usize,
    d_in: usize,
}

/// Options for [`MemoryLayer::build`].
#[derive(Clone, Copy, Debug)]
pub struct MemorySpec {
    pub kind: LookupKind,
    pub buckets: usize,
    pub rank: usize,
    pub top_k: usize,
    pub hyperplane_projections: usize,
    pub bucket_width: f64,
}

impl MemoryLayer {
    pub fn build(spec: &MemorySpec, d_in: usize, store: &mut ParamStore, prefix: &str, rng: &mut SeededRng) -> Result<Self> {
        let n = spec.buckets;
        let table = match MemoryTable::init(n, d_in, spec.rank, rng)?.into_entries() {
            ExpertTable::TwoLayer { u, v } => TableIds::TwoLayer {
                u: store.add(format!("{prefix}.experts.u"), u)?,
                v: store.add(format!("{prefix}.experts.v"), v)?,
            },
            ExpertTable::Constant { b } => TableIds::Constant { b: store.add(format!("{prefix}.experts.b"), b)? },
        };
        let router = match spec.kind {
            LookupKind::TokenId => Router::Fixed(LookupFunction::TokenId { n }),
            LookupKind::Softmax => {
                let p = SoftmaxRouterParams::init(n, d_in, spec.top_k, rng)?;
                Router::Softmax {
                    w: store.add(format!("{prefix}.router.w"), p.w)?,
                    k: p.k,
                    jitter_epsilon: p.jitter_epsilon,
                }
            }
            LookupKind::HyperplaneLsh => Router::Fixed(LookupFunction::HyperplaneLsh(HyperplaneLshParams::random(
                d_in,
                spec.hyperplane_projections,
                spec.bucket_width,
                n,
                rng,
            )?)),
            LookupKind::SphericalLsh => Router::Fixed(LookupFunction::SphericalLsh(SphericalLshParams::random(n, d_in, rng)?)),
            // Singleton sets: the bucket is `id mod n` whatever the permutation.
            LookupKind::MinHash => Router::Fixed(LookupFunction::MinHash(MinHashParams::new(n.max(1), n, rng)?)),
        };
        Ok(Self { router, table, n, d_in })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `sum_i w_i(x_t) f_i(x_t)` for every row `x_t` of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, token_ids: &[usize], jitter: Option<&mut SeededRng>) -> Result<Var> {
        let (m, d) = tape.value(x).dims2()?;
        if d != self.d_in || token_ids.len() != m {
            return shape_err(format!("memory input {m}x{d} with {} ids, d_in {}", token_ids.len(), self.d_in));
        }
        let (routes, weights) = match &self.router {
            Router::Softmax { w, k, jitter_epsilon } => {
                let router_in = match jitter {
                    Some(rng) => {
                        let noise = Tensor::matrix(m, d, jitter_factors(m * d, *jitter_epsilon, rng))?;
                        let noise = tape.leaf(noise);
                        tape.mul(x, noise)?
                    }
                    None => x,
                };
                let logits = tape.matmul_nt(router_in, p.get(*w))?;
                let probs = tape.softmax_rows(logits)?;
                let n = self.n;
                let pv = tape.value(probs).data();
                let routes: Vec<Vec<usize>> = (0..m).map(|t| top_k(&pv[t * n..(t + 1) * n], *k)).collect();
                let weights = tape.pick_per_row(probs, routes.clone())?;
                (routes, weights)
            }
            Router::Fixed(lookup) => {
                let xv = tape.value(x).clone();
                let mut routes = Vec::with_capacity(m);
                for (t, &id) in token_ids.iter().enumerate() {
                    routes.push(lookup.route(xv.row_slice(t), TokenContext { id }, None)?.indices);
                }
                let ones = tape.leaf(Tensor::filled(&[m, 1], 1.0));
                (routes, ones)
            }
        };
        match self.table {
            TableIds::TwoLayer { u, v } => tape.expert_mix(x, p.get(u), p.get(v), weights, routes),
            TableIds::Constant { b } => tape.const_mix(p.get(b), weights, routes),
        }
    }
}
