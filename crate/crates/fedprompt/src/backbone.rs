//! Frozen two-modality encoder surrogate and the trainable prediction head.
//!
//! The encoder is a single self-attention block plus MLP, both with residual
//! connections, operating on the sequence `[prompts ∥ tokens]`. Positional
//! embeddings are deliberately absent; tokens carry modality-type embeddings
//! only, which makes logits invariant under prompt-order permutation, a
//! property the tests assert. Backbone weights are drawn once from
//! `N(0, 1/d_model)` and never receive gradients; only prompt tokens, keys,
//! and the head are trainable.
//!
//! Tokenisation and the query function are frozen, so both are precomputed
//! per sample into a [`PreparedSample`] at the start of a run.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which modalities a sample is missing. `Complete` means both present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissPattern {
    Complete,
    TextMissing,
    ImageMissing,
}

impl MissPattern {
    #[must_use]
    pub fn of(present_a: bool, present_b: bool) -> Self {
        match (present_a, present_b) {
            (true, true) => MissPattern::Complete,
            (true, false) => MissPattern::TextMissing,
            (false, true) => MissPattern::ImageMissing,
            (false, false) => panic!("sample missing both modalities"),
        }
    }

    /// Stable index used to pick per-pattern prompt blocks.
    #[must_use]
    pub fn index(self) -> usize {
        match self {
            MissPattern::Complete => 0,
            MissPattern::TextMissing => 1,
            MissPattern::ImageMissing => 2,
        }
    }
}

/// Frozen encoder weights, shared verbatim by every party.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub d_model: usize,
    pub d_ff: usize,
    pub d_q: usize,
    pub embed_a: Tensor,
    pub embed_b: Tensor,
    /// Row 0 for modality A, row 1 for modality B.
    pub type_emb: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    /// Frozen random map `(d_model + 2) -> d_q` behind the query function.
    pub query_proj: Tensor,
}

impl BackboneParams {
    /// Draws all frozen weights from `N(0, 1/d_model)` in a fixed order.
    #[must_use]
    pub fn init(d_raw: usize, d_model: usize, d_ff: usize, d_q: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / d_model as f64).sqrt();
        Self {
            d_model,
            d_ff,
            d_q,
            embed_a: Tensor::randn(d_raw, d_model, std, rng),
            embed_b: Tensor::randn(d_raw, d_model, std, rng),
            type_emb: Tensor::randn(2, d_model, std, rng),
            w_q: Tensor::randn(d_model, d_model, std, rng),
            w_k: Tensor::randn(d_model, d_model, std, rng),
            w_v: Tensor::randn(d_model, d_model, std, rng),
            w_o: Tensor::randn(d_model, d_model, std, rng),
            w1: Tensor::randn(d_model, d_ff, std, rng),
            w2: Tensor::randn(d_ff, d_model, std, rng),
            query_proj: Tensor::randn(d_model + 2, d_q, std, rng),
        }
    }
}

/// Trainable pooler + classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub pooler_w: Tensor,
    pub pooler_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl HeadParams {
    /// Small Gaussian weights, zero biases.
    #[must_use]
    pub fn init(d_model: usize, c_classes: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / d_model as f64).sqrt();
        Self {
            pooler_w: Tensor::randn(d_model, d_model, std, rng),
            pooler_b: Tensor::zeros(1, d_model),
            cls_w: Tensor::randn(d_model, c_classes, std, rng),
            cls_b: Tensor::zeros(1, c_classes),
        }
    }

    #[must_use]
    pub fn zeros(d_model: usize, c_classes: usize) -> Self {
        Self {
            pooler_w: Tensor::zeros(d_model, d_model),
            pooler_b: Tensor::zeros(1, d_model),
            cls_w: Tensor::zeros(d_model, c_classes),
            cls_b: Tensor::zeros(1, c_classes),
        }
    }

    #[must_use]
    pub fn c_classes(&self) -> usize {
        self.cls_w.cols()
    }
}

/// Head leaves registered on a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub pooler_w: NodeId,
    pub pooler_b: NodeId,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
}

impl HeadParams {
    /// Registers the head on `tape`; `trainable` decides whether gradients
    /// will be reported for it.
    #[must_use]
    pub fn nodes(&self, tape: &mut Tape, trainable: bool) -> HeadNodes {
        let mut add = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        HeadNodes {
            pooler_w: add(&self.pooler_w),
            pooler_b: add(&self.pooler_b),
            cls_w: add(&self.cls_w),
            cls_b: add(&self.cls_b),
        }
    }

    /// Applies one SGD step from tape gradients; leaves entries untouched
    /// when a gradient is absent.
    pub fn apply_grads(&mut self, grads: &crate::tape::Gradients, nodes: HeadNodes, lr: f64) {
        for (param, node) in [
            (&mut self.pooler_w, nodes.pooler_w),
            (&mut self.pooler_b, nodes.pooler_b),
            (&mut self.cls_w, nodes.cls_w),
            (&mut self.cls_b, nodes.cls_b),
        ] {
            if let Some(g) = grads.get(node) {
                param.axpy(-lr, g);
            }
        }
    }
}

/// A sample after the frozen stages: embedded tokens, missing pattern, and
/// the retrieval query. Computed once per run per sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub tokens: Tensor,
    pub pattern: MissPattern,
    pub query: Tensor,
    pub label: usize,
}

/// Embeds a sample's raw tokens: `raw · embed + type_embedding`, A rows first.
///
/// A missing modality has zero raw tokens, so its rows equal the type
/// embedding exactly.
#[must_use]
pub fn tokenize(sample: &Sample, bb: &BackboneParams) -> (Tensor, MissPattern) {
    let emb_a = sample.tokens_a.matmul(&bb.embed_a);
    let emb_b = sample.tokens_b.matmul(&bb.embed_b);
    let mut tokens = Tensor::vstack(&[&emb_a, &emb_b]).expect("embed maps share d_model");
    let t_a = emb_a.rows();
    for i in 0..tokens.rows() {
        let type_row = if i < t_a { bb.type_emb.row_slice(0) } else { bb.type_emb.row_slice(1) };
        for (x, t) in tokens.row_slice_mut(i).iter_mut().zip(type_row) {
            *x += t;
        }
    }
    (tokens, MissPattern::of(sample.present_a, sample.present_b))
}

/// Frozen query function: mean of present-modality token embeddings,
/// concatenated with the two presence bits, through the random projection.
#[must_use]
pub fn query(tokens: &Tensor, pattern: MissPattern, t_a: usize, bb: &BackboneParams) -> Tensor {
    let rows: std::ops::Range<usize> = match pattern {
        MissPattern::Complete => 0..tokens.rows(),
        MissPattern::TextMissing => 0..t_a,
        MissPattern::ImageMissing => t_a..tokens.rows(),
    };
    let count = rows.len();
    let mut mean = vec![0.0; bb.d_model];
    for i in rows {
        for (m, v) in mean.iter_mut().zip(tokens.row_slice(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let (bit_a, bit_b) = match pattern {
        MissPattern::Complete => (1.0, 1.0),
        MissPattern::TextMissing => (1.0, 0.0),
        MissPattern::ImageMissing => (0.0, 1.0),
    };
    mean.push(bit_a);
    mean.push(bit_b);
    let extended = Tensor::new(1, bb.d_model + 2, mean).expect("finite query features");
    extended.matmul(&bb.query_proj)
}

/// Runs [`tokenize`] and [`query`] over a dataset once.
#[must_use]
pub fn prepare(samples: &[Sample], bb: &BackboneParams) -> Vec<PreparedSample> {
    samples
        .iter()
        .map(|s| {
            let (tokens, pattern) = tokenize(s, bb);
            let q = query(&tokens, pattern, s.tokens_a.rows(), bb);
            PreparedSample { tokens, pattern, query: q, label: s.label }
        })
        .collect()
}

/// Records the encoder and head forward pass on `tape`, returning the
/// `1 x C` logits node.
///
/// `prompts` is the already-selected `K_tot x d_model` prompt-token node;
/// `tokens` are the frozen embedded tokens of one sample. Backbone weights
/// enter as constants, so backward reaches prompts and head only.
pub fn forward(
    tape: &mut Tape,
    prompts: NodeId,
    tokens: &Tensor,
    bb: &BackboneParams,
    head: HeadNodes,
) -> NodeId {
    assert_eq!(
        tape.value(prompts).cols(),
        bb.d_model,
        "prompt tokens must be {} wide",
        bb.d_model
    );
    let tokens_node = tape.constant(tokens.clone());
    let w_q = tape.constant(bb.w_q.clone());
    let w_k = tape.constant(bb.w_k.clone());
    let w_v = tape.constant(bb.w_v.clone());
    let w_o = tape.constant(bb.w_o.clone());
    let w1 = tape.constant(bb.w1.clone());
    let w2 = tape.constant(bb.w2.clone());

    let seq = tape.concat_rows(prompts, tokens_node);
    let q = tape.matmul(seq, w_q);
    let k = tape.matmul(seq, w_k);
    let v = tape.matmul(seq, w_v);
    let kt = tape.transpose(k);
    let raw_scores = tape.matmul(q, kt);
    let scores = tape.scale(raw_scores, 1.0 / (bb.d_model as f64).sqrt());
    let attn = tape.softmax_rows(scores);
    let ctx = tape.matmul(attn, v);
    let proj = tape.matmul(ctx, w_o);
    let h1 = tape.add(seq, proj);

    let pre = tape.matmul(h1, w1);
    let act = tape.tanh(pre);
    let mlp = tape.matmul(act, w2);
    let h2 = tape.add(h1, mlp);

    let pooled = tape.mean_rows(h2);
    let pooler_lin = tape.matmul(pooled, head.pooler_w);
    let pooler_aff = tape.add(pooler_lin, head.pooler_b);
    let pooler_out = tape.tanh(pooler_aff);
    let cls_lin = tape.matmul(pooler_out, head.cls_w);
    tape.add(cls_lin, head.cls_b)
}

/// Cross-entropy with a stable log-softmax, composed from tape primitives.
///
/// The row max is subtracted as a detached constant, which leaves the exact
/// gradient `softmax - onehot` intact.
pub fn task_loss(tape: &mut Tape, logits: NodeId, label: usize) -> NodeId {
    let c = tape.value(logits).cols();
    assert_eq!(tape.value(logits).rows(), 1, "logits must be a row vector");
    assert!(label < c, "label {label} out of range for {c} classes");
    let max = tape
        .value(logits)
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let max_row = tape.constant(Tensor::filled(1, c, max));
    let shifted = tape.sub(logits, max_row);
    let exp = tape.exp(shifted);
    let total = tape.sum_all(exp);
    let log_total = tape.log(total);
    let onehot = tape.constant(Tensor::from_fn(c, 1, |i, _| f64::from(i == label)));
    let z_label = tape.matmul(shifted, onehot);
    tape.sub(log_total, z_label)
}
