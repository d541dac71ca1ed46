//! A layer output plus a sparse mix of low-rank experts picked by a router.
//!
//! ```bash
//! cargo run --release --example memory_layer
//! ```

use sparse_memory_lab::memory_lookup::{
    memory_augmented_forward, partial_expert_param_count, LookupFunction, MemoryTable, SoftmaxRouterParams,
    TokenContext,
};
use sparse_memory_lab::tensor_nn::init::seeded;
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    let (d, n, rank) = (8, 16, 2);
    let mut rng = seeded(7);
    let table = MemoryTable::init(n, d, rank, &mut rng)?;
    let router = LookupFunction::Softmax(SoftmaxRouterParams::init(n, d, 2, &mut rng)?);

    let x: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).cos()).collect();
    let layer = |v: &[f64]| Ok(v.iter().map(|z| z.tanh()).collect());
    let route = router.route(&x, TokenContext { id: 0 }, None)?;
    println!("router picked {:?} with weights {:.4?}", route.indices, route.weights);

    let plain: Vec<f64> = x.iter().map(|z| z.tanh()).collect();
    let out = memory_augmented_forward(layer, &x, TokenContext { id: 0 }, &router, &table, None)?;
    for (i, (a, b)) in plain.iter().zip(&out).enumerate() {
        println!("  [{i}] layer {a:+.4}  with memory {b:+.4}");
    }

    // Jitter only perturbs the router input in training mode.
    let mut jitter = seeded(1);
    let noisy = router.route(&x, TokenContext { id: 0 }, Some(&mut jitter))?;
    println!("with jitter: {:?}", noisy.indices);

    println!("\nadded parameters per table (d = {d}):");
    for (r, b) in [(0, 256), (2, 16), (4, 32), (128, 128)] {
        let c = partial_expert_param_count(r, b, d);
        println!("  rank {r:>3} buckets {b:>4}: {:>6} width-free, {:>7} scalars", c.comparison, c.full);
    }
    Ok(())
}
