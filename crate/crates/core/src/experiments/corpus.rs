//! Order-1 Markov chain corpora with a known entropy rate.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor_nn::init::seeded;

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    transition: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
    stationary: Vec<f64>,
}

impl MarkovChain {
    pub fn new(transition: Vec<Vec<f64>>) -> Result<Self> {
        let n = transition.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("{n} symbols; need at least 2")));
        }
        for (i, row) in transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n || row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("transition row {i} is not a distribution")));
            }
        }
        let cumulative = transition
            .iter()
            .map(|row| {
                row.iter()
                    .scan(0.0, |acc, p| {
                        *acc += p;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        let stationary = stationary_distribution(&transition)?;
        Ok(Self { transition, cumulative, stationary })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![vec![1.0 / n as f64; n]; n])
    }

    /// `i -> i + 1 mod n` with probability one.
    pub fn cycle(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| (0..n).map(|j| f64::from(j == (i + 1) % n)).collect()).collect())
    }

    /// Rows drawn from a symmetric Dirichlet with concentration `alpha`.
    pub fn random(n: usize, alpha: f64, seed: u64) -> Result<Self> {
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(format!("alpha {alpha}: {e}")))?;
        let mut rng = seeded(seed);
        let rows = (0..n)
            .map(|_| loop {
                let row: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    break row.iter().map(|v| v / sum).collect();
                }
            })
            .collect();
        Self::new(rows)
    }

    pub fn num_symbols(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// `-sum_i pi_i sum_j P_ij ln P_ij` in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        self.stationary
            .iter()
            .zip(&self.transition)
            .map(|(pi, row)| pi * row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
            .sum()
    }

    fn draw(cumulative: &[f64], u: f64) -> usize {
        cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
    }

    /// Sample path started from the stationary distribution.
    pub fn sample(&self, length: usize, seed: u64) -> Vec<usize> {
        let mut rng = seeded(seed);
        let start_cdf: Vec<f64> = self
            .stationary
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let mut out = Vec::with_capacity(length);
        if length == 0 {
            return out;
        }
        let mut s = Self::draw(&start_cdf, rng.gen());
        out.push(s);
        for _ in 1..length {
            s = Self::draw(&self.cumulative[s], rng.gen());
            out.push(s);
        }
        out
    }

    /// Mean and standard error of `-ln P(x_t | x_{t-1})` along `tokens`.
    pub fn nll_stats(&self, tokens: &[usize]) -> Result<(f64, f64)> {
        if tokens.len() < 3 {
            return Err(Error::EmptyInput("token stream"));
        }
        let vals: Vec<f64> = tokens.windows(2).map(|w| -self.transition[w[0]][w[1]].ln()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok((mean, (var / n).sqrt()))
    }
}

/// Solves `pi P = pi`, `sum pi = 1` by Gaussian elimination.
fn stationary_distribution(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = p.len();
    // Rows of (P^T - I) with the last equation replaced by the normalization.
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| p[j][i] - f64::from(i == j)).collect();
            row.push(0.0);
            row
        })
        .collect();
    a[n - 1] = vec![1.0; n + 1];
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("nonempty range");
        if a[pivot][col].abs() < 1e-13 {
            return Err(Error::InvalidArgument("chain has no unique stationary distribution".into()));
        }
        a.swap(col, pivot);
        for r in 0..n {
            if r != col {
                let factor = a[r][col] / a[col][col];
                if factor != 0.0 {
                    for c in col..=n {
                        a[r][c] -= factor * a[col][c];
                    }
                }
            }
        }
    }
    Ok((0..n).map(|i| (a[i][n] / a[i][i]).max(0.0)).collect())
}

/// A generated token stream with its analytic entropy rate.
#[derive(Clone, Debug)]
pub struct MarkovCorpus {
    pub tokens: Vec<usize>,
    pub chain: MarkovChain,
    pub entropy_rate: f64,
}

pub fn generate_markov_corpus(num_symbols: usize, transition_seed: u64, length: usize, corpus_seed: u64) -> Result<MarkovCorpus> {
    generate_markov_corpus_with(num_symbols, 0.1, transition_seed, length, corpus_seed)
}

pub fn generate_markov_corpus_with(
    num_symbols: usize,
    alpha: f64,
    transition_seed: u64,
    length: usize,
    corpus_seed: u64,
) -> Result<MarkovCorpus> {
    let chain = MarkovChain::random(num_symbols, alpha, transition_seed)?;
    let tokens = chain.sample(length, corpus_seed);
    let entropy_rate = chain.entropy_rate();
    Ok(MarkovCorpus { tokens, chain, entropy_rate })
}

/// Bytes of a file as tokens in `0..256`.
pub fn read_byte_corpus(path: &Path) -> Result<Vec<usize>> {
    Ok(std::fs::read(path)?.into_iter().map(usize::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_entropy_is_ln_n() {
        let c = MarkovChain::uniform(4).unwrap();
        assert!((c.entropy_rate() - 4f64.ln()).abs() < 1e-12);
        for p in c.stationary() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cycle_has_zero_entropy() {
        let c = MarkovChain::cycle(5).unwrap();
        assert_eq!(c.entropy_rate(), 0.0);
        let s = c.sample(12, 3);
        for w in s.windows(2) {
            assert_eq!(w[1], (w[0] + 1) % 5);
        }
    }

    #[test]
    fn degenerate_rows_rejected() {
        assert!(MarkovChain::new(vec![vec![0.5, 0.4], vec![0.5, 0.5]]).is_err());
        assert!(MarkovChain::new(vec![vec![1.0]]).is_err());
        assert!(MarkovChain::new(vec![vec![1.5, -0.5], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn stationary_is_fixed_point() {
        let c = MarkovChain::random(6, 0.5, 2).unwrap();
        let pi = c.stationary();
        for j in 0..6 {
            let next: f64 = (0..6).map(|i| pi[i] * c.transition()[i][j]).sum();
            assert!((next - pi[j]).abs() < 1e-12);
        }
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seeded() {
        let c = generate_markov_corpus(8, 1, 500, 2).unwrap();
        let d = generate_markov_corpus(8, 1, 500, 2).unwrap();
        assert_eq!(c.tokens, d.tokens);
        assert!(c.tokens.iter().all(|&t| t < 8));
    }
}
