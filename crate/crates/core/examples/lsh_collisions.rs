//! Collision rates of sentence pairs with a shared fraction `f` of tokens.
//!
//! ```bash
//! cargo run --release --example lsh_collisions -- 20000
//! ```

use sparse_memory_lab::lsh_sim::{estimate_collision, estimate_rho, Family, SimOptions};
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    let trials: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let (n, l, d) = (1024, 32, 64);
    println!("n={n} l={l} d={d}, {trials} trials per cell\n");
    println!("{:<11} {:>9} {:>9} {:>9}", "family", "f=0.25", "f=0.5", "f=0.75");
    for family in Family::ALL {
        let mut row = format!("{:<11}", family.name());
        for (i, f) in [0.25, 0.5, 0.75].into_iter().enumerate() {
            let e = estimate_collision(family, f, n, l, d, trials, 10 + i as u64)?;
            row.push_str(&format!(" {:>9.4}", e.p_hat));
        }
        println!("{row}");
    }

    println!("\nfitted exponent of p against n at f=0.5:");
    for family in [Family::Spherical, Family::Hyperplane] {
        let r = estimate_rho(family, 0.5, &[64, 256, 1024], l, d, trials, 99, &SimOptions::default())?;
        println!("  {:<10} slope {:+.3}  rho_hat {:.3?}", family.name(), r.slope, r.rho_hat);
    }
    Ok(())
}
