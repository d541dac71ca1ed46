use crate::error::{shape_err, Error, Result};
use crate::tensor_nn::init::{lecun_normal, SeededRng};
use crate::tensor_nn::params::{Bound, ParamId, ParamStore};
use crate::tensor_nn::tape::{Tape, Var};
use crate::tensor_nn::tensor::Tensor;

/// Partial expert `x -> V relu(U^T x)` with `U, V` of shape `d_in x rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerExpertParams {
    u: Tensor,
    v: Tensor,
}

impl TwoLayerExpertParams {
    pub fn new(u: Tensor, v: Tensor) -> Result<Self> {
        let (d, rank) = u.dims2()?;
        if v.shape() != u.shape() {
            return shape_err(format!("U {:?} vs V {:?}", u.shape(), v.shape()));
        }
        if rank == 0 || d == 0 {
            return Err(Error::InvalidArgument("two-layer expert needs rank >= 1 and d_in >= 1".into()));
        }
        Ok(Self { u, v })
    }

    pub fn d_in(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }
}

/// Constant partial expert `x -> b` (rank 0).
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantExpertParams {
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExpertParams {
    TwoLayer(TwoLayerExpertParams),
    Constant(ConstantExpertParams),
}

impl ExpertParams {
    pub fn d_in(&self) -> usize {
        match self {
            ExpertParams::TwoLayer(p) => p.d_in(),
            ExpertParams::Constant(c) => c.b.len(),
        }
    }
}

pub fn apply_expert(x: &[f64], params: &ExpertParams) -> Result<Vec<f64>> {
    if x.len() != params.d_in() {
        return shape_err(format!("expert input {} vs d_in {}", x.len(), params.d_in()));
    }
    match params {
        ExpertParams::Constant(c) => Ok(c.b.clone()),
        ExpertParams::TwoLayer(p) => {
            let hidden: Vec<f64> = p.u.transpose()?.matvec(x)?.into_iter().map(|h| h.max(0.0)).collect();
            p.v.matvec(&hidden)
        }
    }
}

/// Weights of a pre-layer-norm transformer block of width `d`.
#[derive(Clone, Debug)]
pub struct TransformerBlockParams {
    pub n_heads: usize,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl TransformerBlockParams {
    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn ffn_width(&self) -> usize {
        self.w1.cols()
    }

    /// Zero projections with unit layer-norm scales: the block is the identity.
    pub fn zeros(d: usize, n_heads: usize, d_ff: usize) -> Result<Self> {
        Self::check_dims(d, n_heads, d_ff)?;
        Ok(Self {
            n_heads,
            ln1_gamma: Tensor::filled(&[1, d], 1.0),
            ln1_beta: Tensor::zeros(&[1, d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2_gamma: Tensor::filled(&[1, d], 1.0),
            ln2_beta: Tensor::zeros(&[1, d]),
            w1: Tensor::zeros(&[d, d_ff]),
            w2: Tensor::zeros(&[d_ff, d]),
        })
    }

    /// LeCun-normal projections, unit layer-norm scales, zero biases.
    pub fn init(d: usize, n_heads: usize, d_ff: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(d, n_heads, d_ff)?;
        p.wq = lecun_normal(&[d, d], d, rng)?;
        p.wk = lecun_normal(&[d, d], d, rng)?;
        p.wv = lecun_normal(&[d, d], d, rng)?;
        p.wo = lecun_normal(&[d, d], d, rng)?;
        p.w1 = lecun_normal(&[d, d_ff], d, rng)?;
        p.w2 = lecun_normal(&[d_ff, d], d_ff, rng)?;
        Ok(p)
    }

    fn check_dims(d: usize, n_heads: usize, d_ff: usize) -> Result<()> {
        if d == 0 || d_ff == 0 || n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::InvalidArgument(format!(
                "block dims d={d}, heads={n_heads}, d_ff={d_ff}: heads must divide d"
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let d = self.width();
        let d_ff = self.ffn_width();
        Self::check_dims(d, self.n_heads, d_ff)?;
        let expected: [(&Tensor, [usize; 2]); 10] = [
            (&self.ln1_gamma, [1, d]),
            (&self.ln1_beta, [1, d]),
            (&self.wq, [d, d]),
            (&self.wk, [d, d]),
            (&self.wv, [d, d]),
            (&self.wo, [d, d]),
            (&self.ln2_gamma, [1, d]),
            (&self.ln2_beta, [1, d]),
            (&self.w1, [d, d_ff]),
            (&self.w2, [d_ff, d]),
        ];
        for (t, shape) in expected {
            if t.shape() != shape {
                return shape_err(format!("block weight {:?}, expected {shape:?}", t.shape()));
            }
        }
        Ok(())
    }
}

/// A transformer block whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    d: usize,
    n_heads: usize,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    w1: ParamId,
    w2: ParamId,
}

impl TransformerBlock {
    pub fn register(params: TransformerBlockParams, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        params.validate()?;
        let d = params.width();
        let n_heads = params.n_heads;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            d,
            n_heads,
            ln1_gamma: add("ln1.gamma", params.ln1_gamma)?,
            ln1_beta: add("ln1.beta", params.ln1_beta)?,
            wq: add("attn.wq", params.wq)?,
            wk: add("attn.wk", params.wk)?,
            wv: add("attn.wv", params.wv)?,
            wo: add("attn.wo", params.wo)?,
            ln2_gamma: add("ln2.gamma", params.ln2_gamma)?,
            ln2_beta: add("ln2.beta", params.ln2_beta)?,
            w1: add("ffn.w1", params.w1)?,
            w2: add("ffn.w2", params.w2)?,
        })
    }

    pub fn width(&self) -> usize {
        self.d
    }

    /// Applies the block to `x`, a stack of sequences of `seq_len` rows each.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, seq_len: usize, causal: bool) -> Result<Var> {
        let (rows, width) = tape.value(x).dims2()?;
        if width != self.d {
            return shape_err(format!("block width {} got input width {width}", self.d));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return shape_err(format!("{rows} rows are not a whole number of length-{seq_len} sequences"));
        }
        let ln = tape.layer_norm(x, p.get(self.ln1_gamma), p.get(self.ln1_beta))?;
        let q = tape.matmul(ln, p.get(self.wq))?;
        let k = tape.matmul(ln, p.get(self.wk))?;
        let v = tape.matmul(ln, p.get(self.wv))?;
        let dh = self.d / self.n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut seqs = Vec::with_capacity(rows / seq_len);
        for start in (0..rows).step_by(seq_len) {
            let (qs, ks, vs) = (
                tape.slice_rows(q, start, seq_len)?,
                tape.slice_rows(k, start, seq_len)?,
                tape.slice_rows(v, start, seq_len)?,
            );
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let qh = tape.slice_cols(qs, h * dh, dh)?;
                let kh = tape.slice_cols(ks, h * dh, dh)?;
                let vh = tape.slice_cols(vs, h * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = if causal {
                    tape.causal_softmax_rows(scores)?
                } else {
                    tape.softmax_rows(scores)?
                };
                heads.push(tape.matmul(probs, vh)?);
            }
            seqs.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? });
        }
        let attn = if seqs.len() == 1 { seqs[0] } else { tape.concat_rows(&seqs)? };
        let attn = tape.matmul(attn, p.get(self.wo))?;
        let h = tape.add(x, attn)?;
        let ln2 = tape.layer_norm(h, p.get(self.ln2_gamma), p.get(self.ln2_beta))?;
        let f = tape.matmul(ln2, p.get(self.w1))?;
        let f = tape.relu(f);
        let f = tape.matmul(f, p.get(self.w2))?;
        tape.add(h, f)
    }
}

/// Evaluates one block on a single `seq x d` sequence.
pub fn transformer_block_forward(x: &Tensor, params: &TransformerBlockParams, causal: bool) -> Result<Tensor> {
    let (seq, d) = x.dims2()?;
    if d != params.width() {
        return shape_err(format!("input width {d}, block width {}", params.width()));
    }
    let mut store = ParamStore::new();
    let block = TransformerBlock::register(params.clone(), &mut store, "block")?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = block.forward(&mut tape, &bound, xv, seq, causal)?;
    Ok(tape.value(out).clone())
}

/// Multiplies per token of one block: four `d x d` projections, the two
/// attention products over `seq_len` keys, and the two FFN matrices.
pub fn transformer_layer_multiplies(d: usize, d_ff: usize, seq_len: usize) -> usize {
    4 * d * d + 2 * seq_len * d + 2 * d * d_ff
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::init::seeded;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_expert_is_zero() {
        let p = ExpertParams::TwoLayer(
            TwoLayerExpertParams::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[4, 2])).unwrap(),
        );
        assert_eq!(apply_expert(&[1.0, -2.0, 3.0, 0.5], &p).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn constant_expert_returns_bias() {
        let b = vec![0.5, -1.0, 2.0];
        let p = ExpertParams::Constant(ConstantExpertParams { b: b.clone() });
        assert_eq!(apply_expert(&[9.0, 9.0, 9.0], &p).unwrap(), b);
        assert!(apply_expert(&[1.0], &p).is_err());
    }

    #[test]
    fn expert_matches_elementwise_oracle() {
        let mut rng = seeded(5);
        let (u, v) = (random(4, 2, &mut rng), random(4, 2, &mut rng));
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Oracle: h_j = max(0, sum_i U[i][j] x_i); y_i = sum_j V[i][j] h_j.
        let mut h = [0.0; 2];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, xi) in x.iter().enumerate() {
                s += u.get(i, j) * xi;
            }
            *hj = if s > 0.0 { s } else { 0.0 };
        }
        let expected: Vec<f64> = (0..4).map(|i| v.get(i, 0) * h[0] + v.get(i, 1) * h[1]).collect();
        let params = ExpertParams::TwoLayer(TwoLayerExpertParams::new(u, v).unwrap());
        let got = apply_expert(&x, &params).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_zero_two_layer_rejected() {
        assert!(TwoLayerExpertParams::new(Tensor::zeros(&[3, 0]), Tensor::zeros(&[3, 0])).is_err());
        assert!(TwoLayerExpertParams::new(Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn zero_block_passes_input_through() {
        let mut rng = seeded(1);
        let x = random(5, 8, &mut rng);
        let params = TransformerBlockParams::zeros(8, 2, 16).unwrap();
        let y = transformer_block_forward(&x, &params, true).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn single_position_ignores_causal_flag() {
        let mut rng = seeded(2);
        let x = random(1, 8, &mut rng);
        let params = TransformerBlockParams::init(8, 2, 16, &mut rng).unwrap();
        let a = transformer_block_forward(&x, &params, true).unwrap();
        let b = transformer_block_forward(&x, &params, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn width_mismatch_rejected() {
        let params = TransformerBlockParams::zeros(8, 2, 16).unwrap();
        assert!(transformer_block_forward(&Tensor::zeros(&[2, 4]), &params, false).is_err());
        assert!(TransformerBlockParams::zeros(8, 3, 16).is_err());
    }
}
