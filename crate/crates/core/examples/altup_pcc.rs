//! Predict, compute, correct on a K-block representation.

use sparse_memory_lab::altup::{
    altup_stack_forward, pcc_forward_full, pcc_forward_simplified, pcc_full_multiplies, pcc_simplified_multiplies,
    select_block, BlockSelection, PccParams, PccSimplifiedParams, WideRepresentation,
};
use sparse_memory_lab::tensor_nn::init::{normal, seeded};
use sparse_memory_lab::tensor_nn::layers::{transformer_layer_multiplies, TransformerBlockParams};
use sparse_memory_lab::{Result, Tensor};

fn main() -> Result<()> {
    let (k, d) = (2, 4);
    let x = WideRepresentation::from_blocks(&[vec![1.0, 0.0, -1.0, 0.5], vec![0.2, 0.2, 0.2, 0.2]])?;
    let layer = |v: &[f64]| Ok(v.iter().map(|z| 2.0 * z + 1.0).collect());

    let p = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.3, 0.7])?;
    let simple = PccSimplifiedParams::new(p, vec![1.0, 0.5])?;
    let a = pcc_forward_simplified(&x, &simple, layer, 0)?;
    let b = pcc_forward_full(&x, &simple.to_full(d)?, layer, 0)?;
    println!("simplified: {:?}", a.blocks());
    println!("full:       {:?}", b.blocks());

    let trace: Vec<usize> = (0..6).map(|i| select_block(i, k, BlockSelection::Alternating)).collect::<Result<_>>()?;
    println!("alternating blocks over 6 layers: {trace:?}");

    let mut rng = seeded(5);
    let tables = vec![normal(&[10, d], 1.0, &mut rng)?, normal(&[10, d], 1.0, &mut rng)?];
    let layers: Vec<_> = (0..4).map(|_| TransformerBlockParams::init(d, 2, 8, &mut rng)).collect::<Result<_>>()?;
    let pcc = vec![PccParams::Simplified(PccSimplifiedParams::identity(k)); 4];
    let out = altup_stack_forward(&[1, 4, 2], &tables, &layers, BlockSelection::Alternating, &pcc, true)?;
    println!("stack output {:?}, computed blocks {:?}", out.representation.shape(), out.trace);

    println!("\nmultiplies per token (d = 512, d_ff = 2048, seq 512):");
    let block = transformer_layer_multiplies(512, 2048, 512);
    for k in [2, 4] {
        let s = pcc_simplified_multiplies(k, 512);
        println!("  K={k}: simplified {s} ({:.2}% of a block), full {}", 100.0 * s as f64 / block as f64, pcc_full_multiplies(k, 512));
    }
    Ok(())
}
