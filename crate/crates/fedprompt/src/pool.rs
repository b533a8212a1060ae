//! Prompt pools, key-query retrieval, and the retrieval regularizer.
//!
//! A prompt is a small block of trainable tokens plus a trainable key vector.
//! Retrieval ranks prompts by distance `1 - cos(query, key)` and takes the
//! closest `kappa`; the regularizer penalises the summed distance of the
//! selected keys so that keys drift toward the queries that select them.
//! The raw-cosine variant (the formula as printed, summing `cos` itself) is
//! available behind a flag; it leaves the ranking unchanged because `1 - cos`
//! is monotone decreasing in `cos`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape};
use crate::tensor::{cosine, Tensor};
use crate::{Error, Result};

/// Keys whose norm falls below this are re-normalized.
pub const KEY_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    /// Aligned across clients by server-side clustering.
    Inter,
    /// Averaged across clients by FedAvg.
    Intra,
}

/// One trainable prompt: `p_len x d_model` tokens and a `1 x d_q` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Tensor,
    pub key: Tensor,
}

impl Prompt {
    /// Restores the key-norm invariant: keys at or below [`KEY_NORM_FLOOR`]
    /// are rescaled to unit norm (an exactly zero key falls back to the
    /// first basis vector, since it carries no direction to keep).
    pub fn sanitize_key(&mut self) {
        let norm = self.key.norm();
        if norm < KEY_NORM_FLOOR {
            if norm == 0.0 {
                let d = self.key.cols();
                self.key = Tensor::from_fn(1, d, |_, j| f64::from(j == 0));
            } else {
                self.key.scale_in_place(1.0 / norm);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub kind: PoolKind,
    pub prompts: Vec<Prompt>,
}

impl PromptPool {
    /// Fresh pool: tokens `N(0, 0.02)`, keys unit-normalized Gaussian.
    #[must_use]
    pub fn init(
        kind: PoolKind,
        tau: usize,
        p_len: usize,
        d_model: usize,
        d_q: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let prompts = (0..tau)
            .map(|_| {
                let tokens = Tensor::randn(p_len, d_model, 0.02, rng);
                let mut key = Tensor::randn(1, d_q, 1.0, rng);
                let norm = key.norm();
                if norm > 0.0 {
                    key.scale_in_place(1.0 / norm);
                }
                let mut p = Prompt { tokens, key };
                p.sanitize_key();
                p
            })
            .collect();
        Self { kind, prompts }
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Tokens of the given prompts stacked into one `k*p_len x d_model`
    /// matrix, in selection order.
    pub fn stack_tokens(&self, indices: &[usize]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.prompts[i].tokens).collect();
        Tensor::vstack(&parts)
    }

    /// Keys of the given prompts stacked into `k x d_q`, in selection order.
    pub fn stack_keys(&self, indices: &[usize]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.prompts[i].key).collect();
        Tensor::vstack(&parts)
    }
}

/// Retrieval distance `1 - cos(query, key)`, in `[0, 2]`.
pub fn distance(query: &Tensor, prompt: &Prompt) -> Result<f64> {
    Ok(1.0 - cosine(query.data(), prompt.key.data())?)
}

/// Indices of the `kappa` prompts closest to `query`, ordered by ascending
/// distance with ties broken toward the lower index.
pub fn select_topk(query: &Tensor, pool: &PromptPool, kappa: usize) -> Result<Vec<usize>> {
    if kappa > pool.len() {
        return Err(Error::Contract(format!(
            "cannot select {kappa} prompts from a pool of {}",
            pool.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = pool
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| distance(query, p).map(|d| (d, i)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(kappa).map(|(_, i)| i).collect())
}

/// Records the retrieval regularizer on the tape: the summed distance
/// between the query and every selected key, across all provided selections.
///
/// `key_matrices` are `k_i x d_q` nodes of stacked selected keys (the
/// trainable leaves); `query` is a constant, so gradients reach keys only.
/// With `raw_cosine` the literal printed formula (summing `cos` itself) is
/// used instead of `1 - cos`.
pub fn regularizer(
    tape: &mut Tape,
    query: NodeId,
    key_matrices: &[NodeId],
    raw_cosine: bool,
) -> NodeId {
    let mut terms: Vec<NodeId> = Vec::new();
    for &keys in key_matrices {
        let k = tape.value(keys).rows();
        for row in 0..k {
            let key = tape.gather_rows(keys, vec![row]);
            let cos = tape.cosine(query, key);
            terms.push(cos);
        }
    }
    let total = match terms.len() {
        0 => tape.constant(Tensor::scalar(0.0)),
        _ => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            acc
        }
    };
    if raw_cosine {
        total
    } else {
        let count = tape.constant(Tensor::scalar(terms.len() as f64));
        tape.sub(count, total)
    }
}

/// Uniform positionwise mean of pools: entry (i, j) of every prompt's tokens
/// and key is averaged across clients. Averaged keys are re-normalized if
/// cancellation collapses them.
pub fn fedavg_pools(pools: &[PromptPool]) -> Result<PromptPool> {
    let first = pools
        .first()
        .ok_or_else(|| Error::Contract("fedavg_pools needs at least one pool".into()))?;
    for p in pools {
        if p.len() != first.len() || p.kind != first.kind {
            return Err(Error::Contract(format!(
                "fedavg_pools size/kind mismatch: {}/{:?} vs {}/{:?}",
                p.len(),
                p.kind,
                first.len(),
                first.kind
            )));
        }
        for (a, b) in p.prompts.iter().zip(&first.prompts) {
            if a.tokens.shape() != b.tokens.shape() || a.key.shape() != b.key.shape() {
                return Err(Error::Contract("fedavg_pools prompt shape mismatch".into()));
            }
        }
    }
    let inv = 1.0 / pools.len() as f64;
    let prompts = (0..first.len())
        .map(|i| {
            let mut tokens = Tensor::zeros(first.prompts[i].tokens.rows(), first.prompts[i].tokens.cols());
            let mut key = Tensor::zeros(1, first.prompts[i].key.cols());
            for p in pools {
                tokens.axpy(inv, &p.prompts[i].tokens);
                key.axpy(inv, &p.prompts[i].key);
            }
            let mut prompt = Prompt { tokens, key };
            prompt.sanitize_key();
            prompt
        })
        .collect();
    Ok(PromptPool { kind: first.kind, prompts })
}

/// Flattens a prompt to the server's clustering coordinates
/// `[tokens row-major ∥ key]` of width `p_len*d_model + d_q`.
#[must_use]
pub fn flatten_prompt(p: &Prompt) -> Vec<f64> {
    let mut v = Vec::with_capacity(p.tokens.len() + p.key.len());
    v.extend_from_slice(p.tokens.data());
    v.extend_from_slice(p.key.data());
    v
}

/// Rebuilds a prompt from clustering coordinates. Inverse of
/// [`flatten_prompt`]; the key is sanitized on the way back.
pub fn unflatten_prompt(flat: &[f64], p_len: usize, d_model: usize, d_q: usize) -> Result<Prompt> {
    if flat.len() != p_len * d_model + d_q {
        return Err(Error::Contract(format!(
            "flat prompt has {} values, expected {}",
            flat.len(),
            p_len * d_model + d_q
        )));
    }
    let tokens = Tensor::new(p_len, d_model, flat[..p_len * d_model].to_vec())?;
    let key = Tensor::new(1, d_q, flat[p_len * d_model..].to_vec())?;
    let mut p = Prompt { tokens, key };
    p.sanitize_key();
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn pool(seed: u64, tau: usize) -> PromptPool {
        let mut rng = stream_rng(seed, Stream::Pools);
        PromptPool::init(PoolKind::Inter, tau, 1, 8, 4, &mut rng)
    }

    #[test]
    fn init_respects_invariants() {
        let p = pool(1, 20);
        assert_eq!(p.len(), 20);
        for prompt in &p.prompts {
            assert!((prompt.key.norm() - 1.0).abs() < 1e-12, "keys start unit-norm");
            assert_eq!(prompt.tokens.shape(), (1, 8));
        }
    }

    #[test]
    fn distance_basics() {
        let q = Tensor::row(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut p = Prompt { tokens: Tensor::zeros(1, 8), key: q.clone() };
        assert!(distance(&q, &p).unwrap().abs() < 1e-15);
        p.key.scale_in_place(-1.0);
        assert!((distance(&q, &p).unwrap() - 2.0).abs() < 1e-15);
        p.key = Tensor::zeros(1, 4);
        assert!(distance(&q, &p).is_err());
    }

    #[test]
    fn distance_matches_cosine_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = Tensor::randn(1, 4, 1.0, &mut rng);
            let p = Prompt { tokens: Tensor::zeros(1, 8), key: Tensor::randn(1, 4, 1.0, &mut rng) };
            let d = distance(&q, &p).unwrap();
            let expected = 1.0 - cosine(q.data(), p.key.data()).unwrap();
            assert!((d - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn select_topk_matches_full_sort_and_honors_ties() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = pool(3, 20);
        let q = Tensor::randn(1, 4, 1.0, &mut rng);
        let got = select_topk(&q, &p, 5).unwrap();

        let mut ranked: Vec<(f64, usize)> = p
            .prompts
            .iter()
            .enumerate()
            .map(|(i, pr)| (distance(&q, pr).unwrap(), i))
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = ranked.into_iter().take(5).map(|(_, i)| i).collect();
        assert_eq!(got, expected);

        // All keys identical: pure index tie-break.
        let mut tied = pool(4, 6);
        let shared = tied.prompts[0].key.clone();
        for pr in &mut tied.prompts {
            pr.key = shared.clone();
        }
        assert_eq!(select_topk(&q, &tied, 3).unwrap(), vec![0, 1, 2]);

        assert!(select_topk(&q, &tied, 7).is_err());
    }

    #[test]
    fn select_all_returns_sorted_pool() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let p = pool(5, 6);
        let q = Tensor::randn(1, 4, 1.0, &mut rng);
        let got = select_topk(&q, &p, 6).unwrap();
        let mut sorted = got.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5]);
        for w in got.windows(2) {
            let da = distance(&q, &p.prompts[w[0]]).unwrap();
            let db = distance(&q, &p.prompts[w[1]]).unwrap();
            assert!(da <= db);
        }
    }

    proptest! {
        #[test]
        fn select_topk_is_query_scale_invariant(seed in 0u64..10_000, scale_idx in 0usize..2) {
            let scale = [0.1, 10.0][scale_idx];
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let p = pool(seed, 12);
            let q = Tensor::randn(1, 4, 1.0, &mut rng);
            let mut scaled = q.clone();
            scaled.scale_in_place(scale);
            prop_assert_eq!(
                select_topk(&q, &p, 4).unwrap(),
                select_topk(&scaled, &p, 4).unwrap()
            );
        }
    }

    #[test]
    fn regularizer_values_and_gradient_targets() {
        let q_t = Tensor::row(vec![1.0, 0.0, 0.0, 0.0]).unwrap();

        // All selected keys equal to q: zero regularizer.
        let mut tape = Tape::new();
        let q = tape.constant(q_t.clone());
        let keys = tape.param(Tensor::new(3, 4, [1.0, 0.0, 0.0, 0.0].repeat(3)).unwrap());
        let r = regularizer(&mut tape, q, &[keys], false);
        assert!(tape.item(r).abs() < 1e-12);

        // One orthogonal key per pool: 1 + 1.
        let mut tape = Tape::new();
        let q = tape.constant(q_t.clone());
        let k1 = tape.param(Tensor::row(vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let k2 = tape.param(Tensor::row(vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let r = regularizer(&mut tape, q, &[k1, k2], false);
        assert!((tape.item(r) - 2.0).abs() < 1e-12);

        // Raw-cosine flag: literal sum of cosines.
        let mut tape = Tape::new();
        let q = tape.constant(q_t);
        let k = tape.param(Tensor::row(vec![-1.0, 0.0, 0.0, 0.0]).unwrap());
        let r = regularizer(&mut tape, q, &[k], true);
        assert!((tape.item(r) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn regularizer_matches_distance_sum_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let p = pool(6, 10);
        let q_t = Tensor::randn(1, 4, 1.0, &mut rng);
        let sel = select_topk(&q_t, &p, 4).unwrap();

        let mut tape = Tape::new();
        let q = tape.constant(q_t.clone());
        let keys = tape.param(p.stack_keys(&sel).unwrap());
        let r = regularizer(&mut tape, q, &[keys], false);

        let oracle: f64 = sel.iter().map(|&i| distance(&q_t, &p.prompts[i]).unwrap()).sum();
        assert!((tape.item(r) - oracle).abs() < 1e-12);

        // The regularizer moves only the keys it saw: its gradient exists for
        // the stacked selection leaf and the loss ignores unselected keys by
        // construction (they are not on the tape at all).
        let grads = tape.backward(r).unwrap();
        let g = grads.get(keys).unwrap();
        assert_eq!(g.shape(), (4, 4));
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fedavg_pools_identities() {
        let a = pool(7, 5);
        let avg = fedavg_pools(&[a.clone(), a.clone(), a.clone()]).unwrap();
        for (x, y) in avg.prompts.iter().zip(&a.prompts) {
            assert!(x.tokens.dist(&y.tokens) < 1e-15);
            assert!(x.key.dist(&y.key) < 1e-15);
        }

        let mut b = a.clone();
        for pr in &mut b.prompts {
            pr.tokens.scale_in_place(-1.0);
            pr.key.scale_in_place(-1.0);
        }
        let zero = fedavg_pools(&[a.clone(), b]).unwrap();
        for pr in &zero.prompts {
            assert!(pr.tokens.norm() < 1e-15, "tokens cancel");
            // Cancelled keys are re-normalized back to a valid direction.
            assert!(pr.key.norm() > 0.0);
        }
    }

    #[test]
    fn fedavg_pools_matches_elementwise_mean_oracle() {
        let pools: Vec<PromptPool> = (0..3).map(|s| pool(20 + s, 4)).collect();
        let avg = fedavg_pools(&pools).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                let expected: f64 =
                    pools.iter().map(|p| p.prompts[i].tokens.at(0, j)).sum::<f64>() / 3.0;
                assert!((avg.prompts[i].tokens.at(0, j) - expected).abs() < 1e-12);
            }
            for j in 0..4 {
                let expected: f64 =
                    pools.iter().map(|p| p.prompts[i].key.at(0, j)).sum::<f64>() / 3.0;
                assert!((avg.prompts[i].key.at(0, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fedavg_pools_rejects_mismatch() {
        let a = pool(8, 5);
        let b = pool(9, 6);
        assert!(matches!(fedavg_pools(&[a, b]), Err(Error::Contract(_))));
        assert!(fedavg_pools(&[]).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let p = pool(10, 3);
        for prompt in &p.prompts {
            let flat = flatten_prompt(prompt);
            assert_eq!(flat.len(), 8 + 4);
            let back = unflatten_prompt(&flat, 1, 8, 4).unwrap();
            assert_eq!(&back, prompt);
        }
        assert!(unflatten_prompt(&[0.0; 5], 1, 8, 4).is_err());
    }

    #[test]
    fn sanitize_key_restores_norm() {
        let mut p = Prompt { tokens: Tensor::zeros(1, 8), key: Tensor::zeros(1, 4) };
        p.sanitize_key();
        assert!((p.key.norm() - 1.0).abs() < 1e-12);

        let mut tiny = Prompt {
            tokens: Tensor::zeros(1, 8),
            key: Tensor::row(vec![1e-10, 0.0, 0.0, 0.0]).unwrap(),
        };
        tiny.sanitize_key();
        assert!((tiny.key.norm() - 1.0).abs() < 1e-12);
        assert_eq!(tiny.key.at(0, 0), 1.0, "direction preserved");
    }
}
