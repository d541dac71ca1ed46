//! Independent reference computations checked against the library.

use std::collections::BTreeSet;

use rand::Rng;
use sparse_memory_lab::altup::{altup_stack_forward, divide_and_project, BlockSelection, DivideProjectParams, PccParams, PccSimplifiedParams};
use sparse_memory_lab::lsh_sim::{estimate_collision, estimate_rho, minhash_collision_rate, Family, SimOptions};
use sparse_memory_lab::memory_lookup::{
    hyperplane_lsh_lookup, memory_augmented_forward, partial_expert_param_count, softmax_route, spherical_lsh_lookup,
    ExpertTable, HyperplaneLshParams, LookupFunction, MemoryTable, SoftmaxRouterParams, SphericalLshParams,
    TokenContext,
};
use sparse_memory_lab::tensor_nn::init::{normal, seeded, SeededRng};
use sparse_memory_lab::tensor_nn::layers::{transformer_block_forward, TransformerBlockParams};
use sparse_memory_lab::Tensor;

fn uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

// Plain nested-loop helpers, deliberately not using Tensor arithmetic.
fn mat_vec_rows(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum()).collect()
}

fn row_times_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols()).map(|c| (0..m.rows()).map(|r| x[r] * m.get(r, c)).sum()).collect()
}

fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + 1e-6).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / s * g.get(0, i) + b.get(0, i)).collect()
}

fn reference_block(x: &[Vec<f64>], p: &TransformerBlockParams, causal: bool) -> Vec<Vec<f64>> {
    let seq = x.len();
    let d = p.width();
    let dh = d / p.n_heads;
    let ln: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &p.ln1_gamma, &p.ln1_beta)).collect();
    let q: Vec<Vec<f64>> = ln.iter().map(|r| row_times_mat(r, &p.wq)).collect();
    let k: Vec<Vec<f64>> = ln.iter().map(|r| row_times_mat(r, &p.wk)).collect();
    let v: Vec<Vec<f64>> = ln.iter().map(|r| row_times_mat(r, &p.wv)).collect();
    let mut out = Vec::new();
    for t in 0..seq {
        let mut attn = vec![0.0; d];
        for h in 0..p.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let visible = if causal { t + 1 } else { seq };
            let scores: Vec<f64> = (0..visible)
                .map(|s| cols.clone().map(|c| q[t][c] * k[s][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (s, sc) in scores.iter().enumerate() {
                let w = (sc - m).exp() / z;
                for c in cols.clone() {
                    attn[c] += w * v[s][c];
                }
            }
        }
        let o = row_times_mat(&attn, &p.wo);
        let h: Vec<f64> = x[t].iter().zip(&o).map(|(a, b)| a + b).collect();
        let l2 = layer_norm(&h, &p.ln2_gamma, &p.ln2_beta);
        let f: Vec<f64> = row_times_mat(&l2, &p.w1).into_iter().map(|z| z.max(0.0)).collect();
        let f = row_times_mat(&f, &p.w2);
        out.push(h.iter().zip(&f).map(|(a, b)| a + b).collect());
    }
    out
}

#[test]
fn attention_block_matches_reference() {
    let mut rng = seeded(68);
    let mut p = TransformerBlockParams::init(8, 2, 16, &mut rng).unwrap();
    p.ln1_gamma = uniform(1, 8, &mut rng);
    p.ln2_beta = uniform(1, 8, &mut rng);
    let x = uniform(3, 8, &mut rng);
    let rows: Vec<Vec<f64>> = (0..3).map(|r| x.row_slice(r).to_vec()).collect();
    for causal in [false, true] {
        let got = transformer_block_forward(&x, &p, causal).unwrap();
        let want = reference_block(&rows, &p, causal);
        for (r, w) in want.iter().enumerate() {
            close(got.row_slice(r), w, 1e-12);
        }
    }
}

#[test]
fn softmax_route_matches_full_sort() {
    let mut rng = seeded(164);
    for _ in 0..50 {
        let w = uniform(8, 4, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let params = SoftmaxRouterParams::new(w.clone(), 2, 0.01).unwrap();
        let logits = mat_vec_rows(&w, &x);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut probs: Vec<(usize, f64)> = logits.iter().map(|l| l.exp() / z).enumerate().collect();
        probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let r = softmax_route(&x, &params, None).unwrap();
        assert_eq!(r.indices, vec![probs[0].0, probs[1].0]);
        close(&r.weights, &[probs[0].1, probs[1].1], 1e-14);
    }
}

#[test]
fn near_pairs_collide_more_than_far_pairs() {
    let mut rng = seeded(173);
    let (mut near, mut far) = (0, 0);
    let w = 1.0;
    for _ in 0..10_000 {
        let p = HyperplaneLshParams::random(16, 4, w, 1 << 20, &mut rng).unwrap();
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let at = |dist: f64| -> Vec<f64> { x.iter().zip(&dir).map(|(a, u)| a + dist * w * u / norm).collect() };
        let base = hyperplane_lsh_lookup(&x, &p).unwrap();
        near += usize::from(base == hyperplane_lsh_lookup(&at(0.1), &p).unwrap());
        far += usize::from(base == hyperplane_lsh_lookup(&at(10.0), &p).unwrap());
    }
    assert!(near > far, "near {near}, far {far}");
}

#[test]
fn spherical_matches_nearest_angle_scan() {
    let mut rng = seeded(182);
    for _ in 0..100 {
        let p = SphericalLshParams::random(32, 8, &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..32 {
            let a = p.anchors().row_slice(i);
            let cos = a.iter().zip(&x).map(|(u, v)| u * v).sum::<f64>() / norm;
            if cos > best.1 {
                best = (i, cos);
            }
        }
        assert_eq!(spherical_lsh_lookup(&x, &p).unwrap().indices, vec![best.0]);
    }
}

#[test]
fn minhash_half_jaccard() {
    let a: BTreeSet<usize> = (0..30).collect();
    let b: BTreeSet<usize> = (10..40).collect();
    let rate = minhash_collision_rate(&a, &b, 40, 100_000, 191).unwrap();
    assert!((rate - 0.5).abs() <= 0.01, "rate {rate}");
}

#[test]
fn memory_forward_matches_scripted_formula() {
    let mut rng = seeded(200);
    let (d, n, r) = (4, 3, 2);
    let w = uniform(n, d, &mut rng);
    let router = SoftmaxRouterParams::new(w.clone(), 2, 0.01).unwrap();
    let u = uniform(n * d, r, &mut rng);
    let v = uniform(n * d, r, &mut rng);
    let table = MemoryTable::new(ExpertTable::TwoLayer {
        u: u.clone().reshape(vec![n, d, r]).unwrap(),
        v: v.clone().reshape(vec![n, d, r]).unwrap(),
    })
    .unwrap();
    let lookup = LookupFunction::Softmax(router);
    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let layer = |x: &[f64]| -> sparse_memory_lab::Result<Vec<f64>> { Ok(x.iter().map(|v| v.sin()).collect()) };
    let got = memory_augmented_forward(layer, &x, TokenContext { id: 0 }, &lookup, &table, None).unwrap();

    let logits = mat_vec_rows(&w, &x);
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
    let mut want: Vec<f64> = x.iter().map(|v| v.sin()).collect();
    for &i in &order[..2] {
        for (c, out) in want.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..r {
                let h: f64 = (0..d).map(|k| u.get(i * d + k, j) * x[k]).sum::<f64>().max(0.0);
                acc += v.get(i * d + c, j) * h;
            }
            *out += p[i] * acc;
        }
    }
    close(&got, &want, 1e-12);
}

#[test]
fn parameter_count_examples() {
    assert_eq!(partial_expert_param_count(128, 128, 1).comparison, 32_768);
    assert_eq!(partial_expert_param_count(0, 32_000, 1).comparison, 32_000);
    assert_eq!(partial_expert_param_count(4, 1024, 1).comparison, 8192);
    assert_eq!(partial_expert_param_count(4, 32, 64).full, 2 * 4 * 32 * 64);
}

#[test]
fn divide_and_project_matches_chunked_products() {
    let mut rng = seeded(312);
    let params = DivideProjectParams::random(96, 64, 2, &mut rng).unwrap();
    let aug: Vec<f64> = (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out = divide_and_project(&aug, &params).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|o| o.len() == 64));
    // Reconstruct each projection column by feeding unit vectors.
    for (i, block) in out.iter().enumerate() {
        let mut want = vec![0.0; 64];
        for c in 0..48 {
            let mut e = vec![0.0; 96];
            e[i * 48 + c] = 1.0;
            let col = &divide_and_project(&e, &params).unwrap()[i];
            for (w, v) in want.iter_mut().zip(col) {
                *w += aug[i * 48 + c] * v;
            }
        }
        close(block, &want, 1e-12);
    }
}

#[test]
fn stack_matches_scripted_trace() {
    let mut rng = seeded(322);
    let (k, d) = (2, 4);
    let tables = vec![uniform(5, d, &mut rng), uniform(5, d, &mut rng)];
    let layers: Vec<TransformerBlockParams> = (0..2).map(|_| TransformerBlockParams::init(d, 2, 8, &mut rng).unwrap()).collect();
    let pcc: Vec<PccSimplifiedParams> = (0..2)
        .map(|_| PccSimplifiedParams::new(uniform(k, k, &mut rng), vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).unwrap())
        .collect();
    let tokens = [3, 0, 4];
    let out = altup_stack_forward(
        &tokens,
        &tables,
        &layers,
        BlockSelection::Alternating,
        &pcc.iter().cloned().map(PccParams::Simplified).collect::<Vec<_>>(),
        true,
    )
    .unwrap();
    assert_eq!(out.trace, vec![0, 1]);

    let mut x: Vec<Vec<Vec<f64>>> = tokens.iter().map(|&t| tables.iter().map(|tb| tb.row_slice(t).to_vec()).collect()).collect();
    for (i, (layer, pp)) in layers.iter().zip(&pcc).enumerate() {
        let j = i % k;
        let computed = reference_block(&x.iter().map(|blocks| blocks[j].clone()).collect::<Vec<_>>(), layer, true);
        for (pos, blocks) in x.iter_mut().enumerate() {
            let hat: Vec<Vec<f64>> = (0..k)
                .map(|a| (0..d).map(|c| (0..k).map(|b| pp.p.get(a, b) * blocks[b][c]).sum()).collect())
                .collect();
            *blocks = (0..k)
                .map(|a| (0..d).map(|c| hat[a][c] + pp.g[a] * (computed[pos][c] - hat[j][c])).collect())
                .collect();
        }
    }
    for (pos, blocks) in x.iter().enumerate() {
        close(out.representation.row_slice(pos), &blocks.concat(), 1e-12);
    }
}

#[test]
fn hyperplane_rate_reproduces_with_independent_seed() {
    let a = estimate_collision(Family::Hyperplane, 0.75, 1024, 32, 64, 100_000, 397).unwrap();
    let b = estimate_collision(Family::Hyperplane, 0.75, 1024, 32, 64, 100_000, 3970).unwrap();
    let z = (a.p_hat - b.p_hat).abs() / a.stderr.hypot(b.stderr);
    assert!(z < 4.0, "{} vs {} ({z:.2} se)", a.p_hat, b.p_hat);
}

#[test]
fn spherical_rho_below_hyperplane_rho() {
    let sph = estimate_collision(Family::Spherical, 0.5, 1024, 32, 64, 100_000, 405).unwrap();
    let hyp = estimate_collision(Family::Hyperplane, 0.5, 1024, 32, 64, 100_000, 406).unwrap();
    // rho = -ln p / ln n; compare through p with a delta-method standard error.
    let ln_n = 1024f64.ln();
    let se = |p: f64, s: f64| s / (p * ln_n);
    let gap = hyp.rho_hat() - sph.rho_hat();
    assert!(gap > 3.0 * se(sph.p_hat, sph.stderr).hypot(se(hyp.p_hat, hyp.stderr)), "rho {} vs {}", sph.rho_hat(), hyp.rho_hat());
}

#[test]
fn minhash_rate_does_not_depend_on_table_size() {
    let est = estimate_rho(Family::MinHash, 0.5, &[64, 256, 1024], 32, 64, 20_000, 406, &SimOptions::default()).unwrap();
    let ps: Vec<f64> = est.estimates.iter().map(|e| e.p_hat).collect();
    for e in &est.estimates {
        let z = (e.p_hat - ps[0]).abs() / e.stderr.hypot(est.estimates[0].stderr);
        assert!(z < 4.0, "p_hat {ps:?}");
    }
    assert!(est.rho_hat[0] > est.rho_hat[1] && est.rho_hat[1] > est.rho_hat[2]);
    assert!(est.slope.abs() < 0.05, "slope {}", est.slope);
}

#[test]
fn lecun_variance_large_sample() {
    let t = normal(&[1000, 1000], (1.0f64 / 1000.0).sqrt(), &mut seeded(84)).unwrap();
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((var - 1e-3).abs() < 0.05e-3, "variance {var}");
}
