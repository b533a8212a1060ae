//! Key-query prompt retrieval: rank a pool by cosine distance, take the
//! top kappa, and see the tie and scale-invariance rules in action.
//!
//! ```text
//! cargo run --example retrieval
//! ```

use fedprompt::pool::{distance, select_topk, PoolKind, Prompt, PromptPool};
use fedprompt::rng::{stream_rng, Stream};
use fedprompt::tensor::Tensor;

fn main() -> fedprompt::Result<()> {
    let mut rng = stream_rng(21, Stream::Pools);
    let pool = PromptPool::init(PoolKind::Inter, 10, 1, 8, 4, &mut rng);
    let query = Tensor::randn(1, 4, 1.0, &mut rng);

    println!("distances from the query to each prompt key:");
    for (i, p) in pool.prompts.iter().enumerate() {
        println!("  prompt {i}: {:.4}", distance(&query, p)?);
    }

    let kappa = 3;
    let picked = select_topk(&query, &pool, kappa)?;
    println!("top-{kappa} selection: {picked:?}");

    // Cosine only cares about direction, so rescaling the query changes
    // nothing about the ranking.
    for c in [0.1, 10.0] {
        let mut scaled = query.clone();
        scaled.scale_in_place(c);
        assert_eq!(select_topk(&scaled, &pool, kappa)?, picked);
    }
    println!("scaling the query by 0.1 or 10 picks the same prompts");

    // Duplicate keys tie exactly; the lower index wins the tie, and the
    // copy ranks directly after its original.
    let best = picked[0];
    let mut tied = pool.clone();
    tied.prompts.push(Prompt {
        tokens: tied.prompts[best].tokens.clone(),
        key: tied.prompts[best].key.clone(),
    });
    let with_dup = select_topk(&query, &tied, 2)?;
    assert_eq!(with_dup, vec![best, 10]);
    println!("with prompt {best} duplicated at index 10, the top-2 ranking is {with_dup:?}");
    Ok(())
}
