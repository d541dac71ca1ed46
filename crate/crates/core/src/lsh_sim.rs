//! Monte Carlo collision estimates for sentence pairs under the four
//! lookup families.
//!
//! A pair of length-`l` sentences shares `round(f l)` token ids; every id
//! carries an independent uniform unit embedding, and a sentence is mixed
//! into one vector by averaging. For each trial we draw a fresh pair and
//! fresh hash parameters and record whether both mixed vectors land in the
//! same bucket.
//!
//! Both geometric families are rotation invariant, so a trial only depends
//! on the angle between the two mixed vectors. [`SimRoute::Reduced`] uses
//! this: it works in the plane spanned by the pair and draws each Gaussian
//! direction as two in-plane normals plus, for spherical anchors, a
//! chi-square draw for the out-of-plane norm. [`SimRoute::Full`] runs the
//! lookup functions of [`crate::memory_lookup`] in the full dimension.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::memory_lookup::{
    hyperplane_lsh_lookup, minhash_lookup, mix_cells, spherical_lsh_lookup, HyperplaneLshParams, MinHashParams,
    SphericalLshParams,
};
use crate::tensor_nn::init::{derive_seed, seeded, SeededRng};
use crate::tensor_nn::tensor::dot;

/// Trials per independently seeded chunk. Fixed so results do not depend
/// on the thread count.
const CHUNK: usize = 1000;

pub const DEFAULT_PROJECTIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SentencePairSpec {
    pub l: usize,
    pub f: f64,
    pub d: usize,
    pub seed: u64,
}

impl SentencePairSpec {
    pub fn shared(&self) -> usize {
        shared_count(self.f, self.l)
    }
}

pub fn shared_count(f: f64, l: usize) -> usize {
    (f * l as f64).round() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    /// `embeddings[id]` is the unit vector of token `id`.
    pub embeddings: Vec<Vec<f64>>,
}

impl SentencePair {
    pub fn embeddings_of(&self, sentence: &[usize]) -> Vec<&[f64]> {
        sentence.iter().map(|&i| self.embeddings[i].as_slice()).collect()
    }
}

fn check_pair_args(f: f64, l: usize, d: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&f) || l == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("f={f}, l={l}, d={d}")));
    }
    Ok(())
}

fn unit_vector(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 0.0 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Ids `0..m` are shared, `m..l` belong to the first sentence only and
/// `l..2l-m` to the second.
pub fn make_sentence_pair(spec: &SentencePairSpec) -> Result<SentencePair> {
    check_pair_args(spec.f, spec.l, spec.d)?;
    let (l, m) = (spec.l, spec.shared());
    let s1: Vec<usize> = (0..l).collect();
    let s2: Vec<usize> = (0..m).chain(l..2 * l - m).collect();
    let mut rng = seeded(spec.seed);
    let embeddings = (0..2 * l - m).map(|_| unit_vector(spec.d, &mut rng)).collect();
    Ok(SentencePair { s1, s2, embeddings })
}

pub fn mix_average(embeddings: &[&[f64]]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or(Error::EmptyInput("sentence"))?;
    let mut out = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != out.len() {
            return Err(Error::ShapeMismatch("embeddings of unequal width".into()));
        }
        for (o, v) in out.iter_mut().zip(*e) {
            *o += v;
        }
    }
    let l = embeddings.len() as f64;
    out.iter_mut().for_each(|o| *o /= l);
    Ok(out)
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> Result<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return Err(Error::EmptyInput("both sets"));
    }
    Ok(a.intersection(b).count() as f64 / union as f64)
}

/// Near/far thresholds and collision bounds of an LSH family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LshAnalysisParams {
    pub r1: f64,
    pub r2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl LshAnalysisParams {
    pub fn new(r1: f64, r2: f64, p1: f64, p2: f64) -> Result<Self> {
        if !(r1 > 0.0 && r2 > r1) || !(p2 > 0.0 && p2 <= p1 && p1 <= 1.0) {
            return Err(Error::InvalidArgument(format!("r1={r1}, r2={r2}, p1={p1}, p2={p2}")));
        }
        Ok(Self { r1, r2, p1, p2 })
    }

    pub fn c(&self) -> f64 {
        self.r2 / self.r1
    }

    /// `ln(1/p1) / ln(1/p2)`; zero when `p2 = 1`.
    pub fn rho(&self) -> f64 {
        if self.p2 == 1.0 {
            0.0
        } else {
            self.p1.ln() / self.p2.ln()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Hyperplane,
    Spherical,
    MinHash,
    TokenId,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Hyperplane, Family::Spherical, Family::MinHash, Family::TokenId];

    pub fn name(self) -> &'static str {
        match self {
            Family::Hyperplane => "hyperplane",
            Family::Spherical => "spherical",
            Family::MinHash => "minhash",
            Family::TokenId => "token_id",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "hyperplane" => Family::Hyperplane,
            "spherical" => Family::Spherical,
            "minhash" => Family::MinHash,
            "token_id" | "tokenid" => Family::TokenId,
            other => return Err(Error::InvalidArgument(format!("unknown family '{other}'"))),
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimRoute {
    Reduced,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BucketWidth {
    Fixed(f64),
    /// Width at which the grid's cell entropy equals `ln n`.
    EntropyMatched,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenIdMode {
    Analytic,
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimOptions {
    pub route: SimRoute,
    pub projections: usize,
    pub width: BucketWidth,
    pub token_id: TokenIdMode,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            route: SimRoute::Reduced,
            projections: DEFAULT_PROJECTIONS,
            width: BucketWidth::EntropyMatched,
            token_id: TokenIdMode::Analytic,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionEstimate {
    pub family: Family,
    pub f: f64,
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub trials: usize,
    pub collisions: usize,
    pub p_hat: f64,
    pub stderr: f64,
}

impl CollisionEstimate {
    fn from_counts(family: Family, f: f64, n: usize, l: usize, d: usize, trials: usize, collisions: usize) -> Self {
        let p_hat = collisions as f64 / trials as f64;
        Self { family, f, n, l, d, trials, collisions, p_hat, stderr: binomial_stderr(p_hat, trials) }
    }

    /// `-ln p_hat / ln n`.
    pub fn rho_hat(&self) -> f64 {
        rho_hat(self.p_hat, self.n)
    }
}

pub fn binomial_stderr(p: f64, trials: usize) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

pub fn rho_hat(p: f64, n: usize) -> f64 {
    if p == 1.0 {
        0.0
    } else {
        -p.ln() / (n as f64).ln()
    }
}

/// Expected entropy (nats) of `floor((z + b) / w)` for `z ~ N(0, 1)` and
/// `b ~ U[0, w)`.
pub fn grid_cell_entropy(w: f64) -> f64 {
    const OFFSETS: usize = 32;
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    let mut total = 0.0;
    for s in 0..OFFSETS {
        let b = (s as f64 + 0.5) / OFFSETS as f64 * w;
        let lo = ((-10.0 + b) / w).floor() as i64 - 1;
        let hi = ((10.0 + b) / w).ceil() as i64 + 1;
        let mut h = 0.0;
        for k in lo..=hi {
            let p = phi.cdf((k + 1) as f64 * w - b) - phi.cdf(k as f64 * w - b);
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / OFFSETS as f64
}

/// Bucket width giving `projections` grid cells a joint entropy of `ln n`.
pub fn entropy_matched_width(n: usize, projections: usize) -> Result<f64> {
    if n < 2 || projections == 0 {
        return Err(Error::InvalidArgument(format!("n={n}, projections={projections}")));
    }
    let target = (n as f64).ln() / projections as f64;
    let (mut lo, mut hi) = (1e-3_f64.ln(), 1e3_f64.ln());
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if grid_cell_entropy(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

fn resolve_width(opts: &SimOptions, n: usize) -> Result<f64> {
    match opts.width {
        BucketWidth::Fixed(w) if w > 0.0 => Ok(w),
        BucketWidth::Fixed(w) => Err(Error::InvalidArgument(format!("bucket width {w}"))),
        BucketWidth::EntropyMatched => entropy_matched_width(n, opts.projections),
    }
}

/// Mixed averages of a freshly drawn pair, normalized to unit length.
fn mixed_pair(l: usize, m: usize, d: usize, rng: &mut SeededRng) -> (Vec<f64>, Vec<f64>) {
    let mut shared = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let add = |acc: &mut Vec<f64>, rng: &mut SeededRng| {
        for (o, v) in acc.iter_mut().zip(unit_vector(d, rng)) {
            *o += v;
        }
    };
    for _ in 0..m {
        add(&mut shared, rng);
    }
    for _ in m..l {
        add(&mut a, rng);
    }
    for _ in m..l {
        add(&mut b, rng);
    }
    let finish = |u: Vec<f64>| -> Vec<f64> {
        let v: Vec<f64> = shared.iter().zip(&u).map(|(s, x)| (s + x) / l as f64).collect();
        let norm = dot(&v, &v).sqrt();
        v.iter().map(|x| x / norm).collect()
    };
    (finish(a), finish(b))
}

fn cos_sin(x1: &[f64], x2: &[f64]) -> (f64, f64) {
    let c = dot(x1, x2).clamp(-1.0, 1.0);
    (c, (1.0 - c * c).max(0.0).sqrt())
}

struct Trial<'a> {
    family: Family,
    l: usize,
    m: usize,
    d: usize,
    n: usize,
    width: f64,
    opts: &'a SimOptions,
}

impl Trial<'_> {
    fn run(&self, rng: &mut SeededRng) -> Result<bool> {
        match self.family {
            Family::TokenId => {
                let pos = rng.gen_range(0..self.l);
                Ok(pos < self.m)
            }
            Family::MinHash => self.minhash(rng),
            Family::Hyperplane | Family::Spherical => {
                let (x1, x2) = mixed_pair(self.l, self.m, self.d, rng);
                if self.m == self.l {
                    return Ok(true);
                }
                match (self.family, self.opts.route) {
                    (Family::Hyperplane, SimRoute::Reduced) => Ok(self.hyperplane_reduced(&x1, &x2, rng)),
                    (Family::Spherical, SimRoute::Reduced) => Ok(self.spherical_reduced(&x1, &x2, rng)),
                    (Family::Hyperplane, SimRoute::Full) => {
                        let p = HyperplaneLshParams::random(self.d, self.opts.projections, self.width, self.n, rng)?;
                        Ok(hyperplane_lsh_lookup(&x1, &p)? == hyperplane_lsh_lookup(&x2, &p)?)
                    }
                    _ => {
                        let p = SphericalLshParams::random(self.n, self.d, rng)?;
                        Ok(spherical_lsh_lookup(&x1, &p)? == spherical_lsh_lookup(&x2, &p)?)
                    }
                }
            }
        }
    }

    fn minhash(&self, rng: &mut SeededRng) -> Result<bool> {
        let universe = 2 * self.l - self.m;
        let s1: BTreeSet<usize> = (0..self.l).collect();
        let s2: BTreeSet<usize> = (0..self.m).chain(self.l..universe).collect();
        let p = MinHashParams::new(universe, self.n, rng)?;
        Ok(minhash_lookup(&s1, &p)? == minhash_lookup(&s2, &p)?)
    }

    fn hyperplane_reduced(&self, x1: &[f64], x2: &[f64], rng: &mut SeededRng) -> bool {
        let (c, s) = cos_sin(x1, x2);
        let k = self.opts.projections;
        let mut c1 = Vec::with_capacity(k);
        let mut c2 = Vec::with_capacity(k);
        for _ in 0..k {
            let g1: f64 = StandardNormal.sample(rng);
            let g2: f64 = StandardNormal.sample(rng);
            let b = rng.gen_range(0.0..self.width);
            c1.push(((g1 + b) / self.width).floor() as i64);
            c2.push(((g1 * c + g2 * s + b) / self.width).floor() as i64);
        }
        let seed: u64 = rng.gen();
        c1 == c2 || mix_cells(&c1, seed) % self.n as u64 == mix_cells(&c2, seed) % self.n as u64
    }

    fn spherical_reduced(&self, x1: &[f64], x2: &[f64], rng: &mut SeededRng) -> bool {
        let (c, s) = cos_sin(x1, x2);
        let rest = if self.d > 2 {
            Some(Gamma::new((self.d - 2) as f64 / 2.0, 2.0).expect("positive shape"))
        } else {
            None
        };
        let (mut best1, mut best2) = ((f64::NEG_INFINITY, 0usize), (f64::NEG_INFINITY, 0usize));
        for i in 0..self.n {
            let g1: f64 = StandardNormal.sample(rng);
            let g2: f64 = StandardNormal.sample(rng);
            let tail = rest.as_ref().map_or(0.0, |r| r.sample(rng));
            let inv = 1.0 / (g1 * g1 + g2 * g2 + tail).sqrt();
            let s1 = g1 * inv;
            let s2 = (g1 * c + g2 * s) * inv;
            if s1 > best1.0 {
                best1 = (s1, i);
            }
            if s2 > best2.0 {
                best2 = (s2, i);
            }
        }
        best1.1 == best2.1
    }
}

/// Collision estimate with default options.
pub fn estimate_collision(family: Family, f: f64, n: usize, l: usize, d: usize, trials: usize, seed: u64) -> Result<CollisionEstimate> {
    estimate_collision_with(family, f, n, l, d, trials, seed, &SimOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_collision_with(
    family: Family,
    f: f64,
    n: usize,
    l: usize,
    d: usize,
    trials: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<CollisionEstimate> {
    check_pair_args(f, l, d)?;
    if trials == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("trials={trials}, n={n}")));
    }
    let m = shared_count(f, l);
    if family == Family::TokenId && opts.token_id == TokenIdMode::Analytic {
        let p_hat = m as f64 / l as f64;
        return Ok(CollisionEstimate {
            family,
            f,
            n,
            l,
            d,
            trials,
            collisions: (p_hat * trials as f64).round() as usize,
            p_hat,
            stderr: 0.0,
        });
    }
    let width = match family {
        Family::Hyperplane => resolve_width(opts, n)?,
        _ => 1.0,
    };
    let trial = Trial { family, l, m, d, n, width, opts };
    let chunks = trials.div_ceil(CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seeded(derive_seed(seed, c as u64));
            let len = CHUNK.min(trials - c * CHUNK);
            let mut hits = 0;
            for _ in 0..len {
                hits += usize::from(trial.run(&mut rng)?);
            }
            Ok(hits)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(CollisionEstimate::from_counts(family, f, n, l, d, trials, counts.iter().sum()))
}

/// Collision rates of one family across table sizes.
#[derive(Clone, Debug)]
pub struct RhoEstimate {
    pub estimates: Vec<CollisionEstimate>,
    pub rho_hat: Vec<f64>,
    /// Least-squares slope of `ln p_hat` against `ln n`.
    pub slope: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_rho(
    family: Family,
    f: f64,
    n_grid: &[usize],
    l: usize,
    d: usize,
    trials: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<RhoEstimate> {
    if n_grid.len() < 2 {
        return Err(Error::InvalidArgument("need at least two table sizes".into()));
    }
    let mut estimates = Vec::with_capacity(n_grid.len());
    for (i, &n) in n_grid.iter().enumerate() {
        let e = estimate_collision_with(family, f, n, l, d, trials, derive_seed(seed, i as u64), opts)?;
        if e.collisions == 0 || e.p_hat == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "no collisions for {family} at n={n}, f={f}; raise trials or lower n"
            )));
        }
        estimates.push(e);
    }
    let rho_hat = estimates.iter().map(CollisionEstimate::rho_hat).collect();
    let xs: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = estimates.iter().map(|e| e.p_hat.ln()).collect();
    Ok(RhoEstimate { estimates, rho_hat, slope: least_squares_slope(&xs, &ys) })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Dot product of the two sentence averages over many fresh pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixingEstimate {
    pub pairs: usize,
    /// Mean of `l <a1, a2>`; `1 / l` is the expected squared norm of an average.
    pub mean_scaled_dot: f64,
    pub stderr: f64,
    /// Mean cosine of the two averages.
    pub mean_cosine: f64,
}

pub fn mixing_dot_product(f: f64, l: usize, d: usize, pairs: usize, seed: u64) -> Result<MixingEstimate> {
    check_pair_args(f, l, d)?;
    if pairs < 2 {
        return Err(Error::InvalidArgument(format!("pairs={pairs}")));
    }
    let chunks = pairs.div_ceil(CHUNK);
    let parts: Vec<(f64, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seeded(derive_seed(seed, c as u64));
            let (mut s, mut s2, mut cs) = (0.0, 0.0, 0.0);
            for t in 0..CHUNK.min(pairs - c * CHUNK) {
                let spec = SentencePairSpec { l, f, d, seed: rng.gen::<u64>() ^ t as u64 };
                let pair = make_sentence_pair(&spec).expect("validated arguments");
                let a1 = mix_average(&pair.embeddings_of(&pair.s1)).expect("nonempty");
                let a2 = mix_average(&pair.embeddings_of(&pair.s2)).expect("nonempty");
                let v = l as f64 * dot(&a1, &a2);
                s += v;
                s2 += v * v;
                cs += dot(&a1, &a2) / (dot(&a1, &a1) * dot(&a2, &a2)).sqrt();
            }
            (s, s2, cs)
        })
        .collect();
    let (s, s2, cs) = parts.iter().fold((0.0, 0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    let n = pairs as f64;
    let mean = s / n;
    let var = (s2 - n * mean * mean) / (n - 1.0);
    Ok(MixingEstimate { pairs, mean_scaled_dot: mean, stderr: (var / n).sqrt(), mean_cosine: cs / n })
}

/// Empirical min-hash collision rate of two fixed sets over `permutations`
/// random orders of `0..universe`.
pub fn minhash_collision_rate(a: &BTreeSet<usize>, b: &BTreeSet<usize>, universe: usize, permutations: usize, seed: u64) -> Result<f64> {
    if permutations == 0 {
        return Err(Error::InvalidArgument("permutations must be positive".into()));
    }
    let chunks = permutations.div_ceil(CHUNK);
    let hits = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seeded(derive_seed(seed, c as u64));
            let mut hits = 0usize;
            for _ in 0..CHUNK.min(permutations - c * CHUNK) {
                let p = MinHashParams::new(universe, universe, &mut rng)?;
                hits += usize::from(minhash_lookup(a, &p)? == minhash_lookup(b, &p)?);
            }
            Ok(hits)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / permutations as f64)
}

pub const CSV_HEADER: &str = "family,f,n,l,d,trials,p_hat,stderr,rho_hat";

pub fn write_csv<W: Write>(mut out: W, rows: &[CollisionEstimate]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.family,
            crate::experiments::fmt_float(r.f),
            r.n,
            r.l,
            r.d,
            r.trials,
            crate::experiments::fmt_float(r.p_hat),
            crate::experiments::fmt_float(r.stderr),
            crate::experiments::fmt_float(r.rho_hat()),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_overlap_counts() {
        for (f, l, shared) in [(1.0, 8, 8), (0.0, 8, 0), (0.5, 32, 16)] {
            let p = make_sentence_pair(&SentencePairSpec { l, f, d: 4, seed: 1 }).unwrap();
            let a: BTreeSet<usize> = p.s1.iter().copied().collect();
            let b: BTreeSet<usize> = p.s2.iter().copied().collect();
            assert_eq!(a.intersection(&b).count(), shared);
            assert_eq!((p.s1.len(), p.s2.len()), (l, l));
            for e in &p.embeddings {
                assert!((dot(e, e) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tokens_average_to_themselves() {
        let e = [0.6, 0.8];
        let avg = mix_average(&[&e, &e, &e]).unwrap();
        assert!(avg.iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(mix_average(&[]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let a: BTreeSet<usize> = [0, 1, 2, 3].into();
        let b: BTreeSet<usize> = [2, 3, 4, 5].into();
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &[7, 8].into()).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0);
        assert!(jaccard(&BTreeSet::new(), &BTreeSet::new()).is_err());
    }

    #[test]
    fn analysis_params() {
        let p = LshAnalysisParams::new(1.0, 2.0, 0.5, 0.25).unwrap();
        assert_eq!(p.c(), 2.0);
        assert!((p.rho() - 0.5).abs() < 1e-15);
        assert!(LshAnalysisParams::new(2.0, 1.0, 0.5, 0.25).is_err());
    }

    #[test]
    fn full_overlap_always_collides() {
        for family in Family::ALL {
            let e = estimate_collision(family, 1.0, 64, 8, 16, 300, 3).unwrap();
            assert_eq!(e.p_hat, 1.0, "{family}");
            assert_eq!(e.rho_hat(), 0.0);
        }
    }

    #[test]
    fn token_id_is_overlap_fraction() {
        let e = estimate_collision(Family::TokenId, 0.5, 256, 32, 64, 1000, 1).unwrap();
        assert_eq!(e.p_hat, 0.5);
    }

    #[test]
    fn same_seed_same_estimate() {
        let a = estimate_collision(Family::Spherical, 0.5, 64, 16, 32, 2500, 9).unwrap();
        let b = estimate_collision(Family::Spherical, 0.5, 64, 16, 32, 2500, 9).unwrap();
        assert_eq!(a.p_hat.to_bits(), b.p_hat.to_bits());
    }

    #[test]
    fn entropy_width_is_monotone() {
        assert!(grid_cell_entropy(0.5) > grid_cell_entropy(1.0));
        let w256 = entropy_matched_width(256, 4).unwrap();
        let w1024 = entropy_matched_width(1024, 4).unwrap();
        assert!(w1024 < w256);
        assert!((4.0 * grid_cell_entropy(w256) - (256f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn slope_of_a_line() {
        assert!((least_squares_slope(&[1.0, 2.0, 3.0], &[2.0, 0.0, -2.0]) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn csv_header_and_row() {
        let e = estimate_collision(Family::TokenId, 0.25, 256, 32, 64, 10, 0).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &[e]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap().split(',').count(), 9);
    }
}
