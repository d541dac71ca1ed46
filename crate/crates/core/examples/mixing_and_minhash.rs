use std::collections::BTreeSet;

use sparse_memory_lab::lsh_sim::{jaccard, minhash_collision_rate, mixing_dot_product};
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    println!("scaled dot product of sentence averages (l=32, d=64):");
    for f in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let m = mixing_dot_product(f, 32, 64, 5000, 1)?;
        println!("  f={f:<4} mean {:.4} ± {:.4}  cosine {:.4}", m.mean_scaled_dot, m.stderr, m.mean_cosine);
    }

    println!("\nmin-hash agreement vs Jaccard:");
    for (lo, hi) in [(0, 20), (5, 25), (10, 30), (15, 35)] {
        let a: BTreeSet<usize> = (0..20).collect();
        let b: BTreeSet<usize> = (lo..hi).collect();
        let rate = minhash_collision_rate(&a, &b, 40, 20_000, 2)?;
        println!("  jaccard {:.3}  min-hash {:.3}", jaccard(&a, &b)?, rate);
    }
    Ok(())
}
