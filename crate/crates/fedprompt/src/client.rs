//! Client-side local training: adopt the global prompt state, then run SGD
//! on the regularized loss over the local dataset.
//!
//! Every method variant funnels through [`sample_program`], which records one
//! sample's composite loss `task + lambda_r * regularizer` on a tape with the
//! selected prompt tokens, selected keys, and head as the trainable leaves.
//! Selection is hard top-k, recomputed per sample per step; gradients do not
//! flow through the selection indices, and prompts that are never selected in
//! an epoch are bit-identical afterwards.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, task_loss, BackboneParams, HeadNodes, HeadParams, PreparedSample};
use crate::pool::{distance, regularizer, select_topk, PromptPool};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Global or local prompt parameters, shaped by the method in play.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PromptState {
    /// Dual pools with key-query retrieval from each (the full method).
    Dual { inter: PromptPool, intra: PromptPool },
    /// One pool with `2*kappa` prompts retrieved per input (ablations).
    Single { pool: PromptPool },
    /// One fixed token block per missing pattern, no retrieval (prompt
    /// FedAvg baselines). Indexed by [`crate::backbone::MissPattern::index`].
    Blocks { blocks: Vec<Tensor> },
}

impl PromptState {
    /// Size reported as the `pool_size` metric: the inter pool for dual
    /// state, the pool itself for single, the block count otherwise.
    #[must_use]
    pub fn reported_size(&self) -> usize {
        match self {
            PromptState::Dual { inter, .. } => inter.len(),
            PromptState::Single { pool } => pool.len(),
            PromptState::Blocks { blocks } => blocks.len(),
        }
    }
}

/// Local-training hyperparameters shared by all methods.
#[derive(Debug, Clone, Copy)]
pub struct TrainHyper {
    pub kappa: usize,
    pub lambda_r: f64,
    pub raw_cosine: bool,
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

/// Trainable prompt leaves of one sample's tape, with the pool indices they
/// map back to.
pub enum PromptLeaves {
    Dual {
        inter_tokens: NodeId,
        inter_keys: NodeId,
        inter_idx: Vec<usize>,
        intra_tokens: NodeId,
        intra_keys: NodeId,
        intra_idx: Vec<usize>,
    },
    Single {
        tokens: NodeId,
        keys: NodeId,
        idx: Vec<usize>,
    },
    Block {
        tokens: NodeId,
        pattern: usize,
    },
}

/// One sample's recorded loss program.
pub struct SampleProgram {
    pub loss: NodeId,
    pub task: NodeId,
    pub logits: NodeId,
    pub head: HeadNodes,
    pub leaves: PromptLeaves,
}

fn stacked_leaves(
    tape: &mut Tape,
    pool: &PromptPool,
    query: &Tensor,
    want: usize,
    trainable: bool,
) -> Result<(NodeId, NodeId, Vec<usize>)> {
    let k = want.min(pool.len());
    let idx = select_topk(query, pool, k)?;
    let tokens = pool.stack_tokens(&idx)?;
    let keys = pool.stack_keys(&idx)?;
    let (t, kn) = if trainable {
        (tape.param(tokens), tape.param(keys))
    } else {
        (tape.constant(tokens), tape.constant(keys))
    };
    Ok((t, kn, idx))
}

/// Records one sample's forward pass and composite loss.
///
/// Retrieval counts are `kappa` per pool for dual state and `2*kappa` for a
/// single pool, clamped to the pool size (relevant only at evaluation time,
/// when an aligned global pool may be smaller than the retrieval budget).
pub fn sample_program(
    tape: &mut Tape,
    state: &PromptState,
    sample: &PreparedSample,
    bb: &BackboneParams,
    head: &HeadParams,
    hyper: &TrainHyper,
    trainable: bool,
) -> Result<SampleProgram> {
    let head_nodes = head.nodes(tape, trainable);
    let (prompt_node, reg_keys, leaves) = match state {
        PromptState::Dual { inter, intra } => {
            let (it, ik, iidx) =
                stacked_leaves(tape, inter, &sample.query, hyper.kappa, trainable)?;
            let (at, ak, aidx) =
                stacked_leaves(tape, intra, &sample.query, hyper.kappa, trainable)?;
            let prompt_node = tape.concat_rows(it, at);
            let leaves = PromptLeaves::Dual {
                inter_tokens: it,
                inter_keys: ik,
                inter_idx: iidx.clone(),
                intra_tokens: at,
                intra_keys: ak,
                intra_idx: aidx,
            };
            (prompt_node, vec![ik, ak], leaves)
        }
        PromptState::Single { pool } => {
            let (t, k, idx) =
                stacked_leaves(tape, pool, &sample.query, 2 * hyper.kappa, trainable)?;
            (t, vec![k], PromptLeaves::Single { tokens: t, keys: k, idx })
        }
        PromptState::Blocks { blocks } => {
            let pattern = sample.pattern.index();
            let block = blocks
                .get(pattern)
                .ok_or_else(|| Error::Contract(format!("no prompt block for pattern {pattern}")))?;
            let t = if trainable {
                tape.param(block.clone())
            } else {
                tape.constant(block.clone())
            };
            (t, Vec::new(), PromptLeaves::Block { tokens: t, pattern })
        }
    };

    let logits = forward(tape, prompt_node, &sample.tokens, bb, head_nodes);
    let task = task_loss(tape, logits, sample.label);
    let loss = if reg_keys.is_empty() {
        task
    } else {
        let q = tape.constant(sample.query.clone());
        let reg = regularizer(tape, q, &reg_keys, hyper.raw_cosine);
        let weighted = tape.scale(reg, hyper.lambda_r);
        tape.add(task, weighted)
    };
    Ok(SampleProgram { loss, task, logits, head: head_nodes, leaves })
}

/// Per-pool gradient accumulators, indexed like the pool.
struct PoolGrads {
    tokens: Vec<Option<Tensor>>,
    keys: Vec<Option<Tensor>>,
}

impl PoolGrads {
    fn new(len: usize) -> Self {
        Self { tokens: (0..len).map(|_| None).collect(), keys: (0..len).map(|_| None).collect() }
    }

    fn absorb(&mut self, grads: &Gradients, tokens_leaf: NodeId, keys_leaf: NodeId, idx: &[usize]) {
        if let Some(g) = grads.get(tokens_leaf) {
            let p_len = g.rows() / idx.len();
            for (j, &prompt) in idx.iter().enumerate() {
                let slot = self.tokens[prompt].get_or_insert_with(|| {
                    Tensor::zeros(p_len, g.cols())
                });
                for r in 0..p_len {
                    let src = g.row_slice(j * p_len + r);
                    for (a, b) in slot.row_slice_mut(r).iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        if let Some(g) = grads.get(keys_leaf) {
            for (j, &prompt) in idx.iter().enumerate() {
                let slot = self.keys[prompt]
                    .get_or_insert_with(|| Tensor::zeros(1, g.cols()));
                for (a, b) in slot.data_mut().iter_mut().zip(g.row_slice(j)) {
                    *a += b;
                }
            }
        }
    }

    fn apply(self, pool: &mut PromptPool, step: f64) {
        for (i, g) in self.tokens.into_iter().enumerate() {
            if let Some(g) = g {
                pool.prompts[i].tokens.axpy(step, &g);
            }
        }
        for (i, g) in self.keys.into_iter().enumerate() {
            if let Some(g) = g {
                pool.prompts[i].key.axpy(step, &g);
                pool.prompts[i].sanitize_key();
            }
        }
    }
}

/// Outcome of one client's local pass.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// Mean composite loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    /// Mean composite loss over every processed sample.
    pub mean_loss: f64,
    pub samples_seen: usize,
}

/// Runs `local_epochs` of mini-batch SGD over `data`, updating `state` and
/// `head` in place.
///
/// Batch gradients are the mean of per-sample gradients; each step touches
/// the head plus exactly the prompts selected by the batch's samples.
pub fn local_update(
    state: &mut PromptState,
    head: &mut HeadParams,
    data: &[PreparedSample],
    bb: &BackboneParams,
    hyper: &TrainHyper,
    rng: &mut impl Rng,
) -> Result<LocalOutcome> {
    if data.is_empty() {
        return Err(Error::Contract("local_update on empty dataset".into()));
    }
    if hyper.lr < 0.0 || hyper.batch_size == 0 || hyper.local_epochs == 0 {
        return Err(Error::Contract(
            "local_update needs lr >= 0, batch_size >= 1, local_epochs >= 1".into(),
        ));
    }

    let mut epoch_losses = Vec::with_capacity(hyper.local_epochs);
    let mut total_loss = 0.0;
    let mut total_samples = 0usize;

    for _ in 0..hyper.local_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut epoch_loss = 0.0;

        for batch in order.chunks(hyper.batch_size) {
            let mut head_acc = HeadParams::zeros(head.pooler_w.rows(), head.cls_w.cols());
            let mut dual_acc = match state {
                PromptState::Dual { inter, intra } => {
                    Some((PoolGrads::new(inter.len()), PoolGrads::new(intra.len())))
                }
                _ => None,
            };
            let mut single_acc = match state {
                PromptState::Single { pool } => Some(PoolGrads::new(pool.len())),
                _ => None,
            };
            let mut block_acc: Vec<Option<Tensor>> = match state {
                PromptState::Blocks { blocks } => (0..blocks.len()).map(|_| None).collect(),
                _ => Vec::new(),
            };

            for &i in batch {
                let mut tape = Tape::new();
                let prog = sample_program(&mut tape, state, &data[i], bb, head, hyper, true)?;
                epoch_loss += tape.item(prog.loss);
                let grads = tape.backward(prog.loss)?;

                for (acc, node) in [
                    (&mut head_acc.pooler_w, prog.head.pooler_w),
                    (&mut head_acc.pooler_b, prog.head.pooler_b),
                    (&mut head_acc.cls_w, prog.head.cls_w),
                    (&mut head_acc.cls_b, prog.head.cls_b),
                ] {
                    if let Some(g) = grads.get(node) {
                        acc.axpy(1.0, g);
                    }
                }

                match &prog.leaves {
                    PromptLeaves::Dual {
                        inter_tokens,
                        inter_keys,
                        inter_idx,
                        intra_tokens,
                        intra_keys,
                        intra_idx,
                    } => {
                        let (gi, ga) = dual_acc.as_mut().expect("dual accumulator");
                        gi.absorb(&grads, *inter_tokens, *inter_keys, inter_idx);
                        ga.absorb(&grads, *intra_tokens, *intra_keys, intra_idx);
                    }
                    PromptLeaves::Single { tokens, keys, idx } => {
                        single_acc
                            .as_mut()
                            .expect("single accumulator")
                            .absorb(&grads, *tokens, *keys, idx);
                    }
                    PromptLeaves::Block { tokens, pattern } => {
                        if let Some(g) = grads.get(*tokens) {
                            let slot = block_acc[*pattern]
                                .get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
                            slot.axpy(1.0, g);
                        }
                    }
                }
            }

            let step = -hyper.lr / batch.len() as f64;
            head.axpy_all(step, &head_acc);
            match state {
                PromptState::Dual { inter, intra } => {
                    let (gi, ga) = dual_acc.take().expect("dual accumulator");
                    gi.apply(inter, step);
                    ga.apply(intra, step);
                }
                PromptState::Single { pool } => {
                    single_acc.take().expect("single accumulator").apply(pool, step);
                }
                PromptState::Blocks { blocks } => {
                    for (block, g) in blocks.iter_mut().zip(block_acc) {
                        if let Some(g) = g {
                            block.axpy(step, &g);
                        }
                    }
                }
            }
        }

        epoch_losses.push(epoch_loss / data.len() as f64);
        total_loss += epoch_loss;
        total_samples += data.len();
    }

    Ok(LocalOutcome {
        mean_loss: total_loss / total_samples as f64,
        epoch_losses,
        samples_seen: total_samples,
    })
}

impl HeadParams {
    /// `self += alpha * other`, across all four head tensors.
    pub fn axpy_all(&mut self, alpha: f64, other: &HeadParams) {
        self.pooler_w.axpy(alpha, &other.pooler_w);
        self.pooler_b.axpy(alpha, &other.pooler_b);
        self.cls_w.axpy(alpha, &other.cls_w);
        self.cls_b.axpy(alpha, &other.cls_b);
    }
}

/// Builds the client's working prompt state from the global one.
///
/// Dual/single pools adopt the retrieval-relevant slice of the global pool:
/// when the global pool holds at least `tau` prompts, the `tau` with the
/// smallest mean distance to the client's queries are kept (original order
/// preserved); when it holds fewer, all are taken and the pool is refilled to
/// `tau` with `N(0, 0.01)`-perturbed copies. Intra pools and pattern blocks
/// are copied verbatim.
pub fn adopt_global(
    global: &PromptState,
    data: &[PreparedSample],
    tau: usize,
    rng: &mut impl Rng,
) -> Result<PromptState> {
    match global {
        PromptState::Dual { inter, intra } => Ok(PromptState::Dual {
            inter: adopt_pool(inter, data, tau, rng)?,
            intra: intra.clone(),
        }),
        PromptState::Single { pool } => {
            Ok(PromptState::Single { pool: adopt_pool(pool, data, tau, rng)? })
        }
        PromptState::Blocks { blocks } => Ok(PromptState::Blocks { blocks: blocks.clone() }),
    }
}

fn adopt_pool(
    global: &PromptPool,
    data: &[PreparedSample],
    tau: usize,
    rng: &mut impl Rng,
) -> Result<PromptPool> {
    if global.is_empty() {
        return Err(Error::Contract("global inter pool is empty".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("adopt needs at least one local sample".into()));
    }
    if global.len() >= tau {
        let mut ranked: Vec<(f64, usize)> = global
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mean = data
                    .iter()
                    .map(|s| distance(&s.query, p))
                    .sum::<Result<f64>>()?
                    / data.len() as f64;
                Ok((mean, i))
            })
            .collect::<Result<_>>()?;
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = ranked.into_iter().take(tau).map(|(_, i)| i).collect();
        keep.sort_unstable();
        Ok(PromptPool {
            kind: global.kind,
            prompts: keep.into_iter().map(|i| global.prompts[i].clone()).collect(),
        })
    } else {
        let mut prompts = global.prompts.clone();
        for i in 0..tau - global.len() {
            let mut copy = global.prompts[i % global.len()].clone();
            let token_noise = Tensor::randn(copy.tokens.rows(), copy.tokens.cols(), 0.01, rng);
            copy.tokens.axpy(1.0, &token_noise);
            let key_noise = Tensor::randn(1, copy.key.cols(), 0.01, rng);
            copy.key.axpy(1.0, &key_noise);
            copy.sanitize_key();
            prompts.push(copy);
        }
        Ok(PromptPool { kind: global.kind, prompts })
    }
}

/// Mean composite loss of `state` over a dataset, without training. Used by
/// tests and diagnostics.
pub fn mean_composite_loss(
    state: &PromptState,
    head: &HeadParams,
    data: &[PreparedSample],
    bb: &BackboneParams,
    hyper: &TrainHyper,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("loss over empty dataset".into()));
    }
    let mut total = 0.0;
    for sample in data {
        let mut tape = Tape::new();
        let prog = sample_program(&mut tape, state, sample, bb, head, hyper, false)?;
        total += tape.item(prog.loss);
    }
    Ok(total / data.len() as f64)
}
