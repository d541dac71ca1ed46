use sparse_memory_lab::experiments::corpus::generate_markov_corpus_with;
use sparse_memory_lab::experiments::MarkovChain;
use sparse_memory_lab::Result;

fn main() -> Result<()> {
    println!("uniform over 4: {:.4} nats", MarkovChain::uniform(4)?.entropy_rate());
    println!("cycle of 4:     {:.4} nats", MarkovChain::cycle(4)?.entropy_rate() + 0.0);
    for alpha in [0.05, 0.1, 1.0] {
        let c = generate_markov_corpus_with(64, alpha, 1, 50_000, 2)?;
        let (nll, se) = c.chain.nll_stats(&c.tokens)?;
        println!("alpha {alpha:<5} entropy rate {:.4}, sample nll {nll:.4} ± {se:.4}", c.entropy_rate);
    }
    Ok(())
}
