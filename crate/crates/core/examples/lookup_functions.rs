//! The five ways of choosing a table entry, side by side.

use std::collections::BTreeSet;

use sparse_memory_lab::memory_lookup::{
    hyperplane_lsh_lookup, minhash_lookup, spherical_lsh_lookup, token_id_lookup, HyperplaneLshParams, MinHashParams,
    SoftmaxRouterParams, SphericalLshParams, TokenContext,
};
use sparse_memory_lab::memory_lookup::softmax_route;
use sparse_memory_lab::tensor_nn::init::seeded;
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    let (d, n) = (16, 64);
    let mut rng = seeded(3);
    let softmax = SoftmaxRouterParams::init(n, d, 2, &mut rng)?;
    let hyper = HyperplaneLshParams::random(d, 4, 1.0, n, &mut rng)?;
    let sph = SphericalLshParams::random(n, d, &mut rng)?;
    let minhash = MinHashParams::new(1000, n, &mut rng)?;

    let base: Vec<f64> = (0..d).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
    let nudged: Vec<f64> = base.iter().enumerate().map(|(i, v)| v + 0.01 * (i % 3) as f64).collect();
    let flipped: Vec<f64> = base.iter().map(|v| -v).collect();

    println!("{:<10} {:>10} {:>10} {:>10}", "lookup", "x", "x+noise", "-x");
    for (name, f) in [
        ("softmax", Box::new(|x: &[f64]| softmax_route(x, &softmax, None).map(|r| r.indices[0])) as Box<dyn Fn(&[f64]) -> Result<usize>>),
        ("hyperplane", Box::new(|x: &[f64]| hyperplane_lsh_lookup(x, &hyper).map(|r| r.indices[0]))),
        ("spherical", Box::new(|x: &[f64]| spherical_lsh_lookup(x, &sph).map(|r| r.indices[0]))),
    ] {
        println!("{name:<10} {:>10} {:>10} {:>10}", f(&base)?, f(&nudged)?, f(&flipped)?);
    }

    println!("\ntoken id 42 -> {:?}", token_id_lookup(TokenContext { id: 42 }, n)?.indices);

    let a: BTreeSet<usize> = [3, 17, 99, 250, 640].into();
    let b: BTreeSet<usize> = [3, 17, 99, 251, 641].into();
    println!(
        "min-hash of two sets sharing 3 of 7 ids: {:?} vs {:?}",
        minhash_lookup(&a, &minhash)?.indices,
        minhash_lookup(&b, &minhash)?.indices
    );
    Ok(())
}
