//! Server-side aggregation: align inter-client prompt pools by constrained
//! clustering with a learnable diagonal metric and a popularity regularizer,
//! plus plain FedAvg for heads and per-pattern prompt blocks.
//!
//! Alignment alternates continuous minimization of the joint objective
//! `G + R` over (centroids, metric, popularity net) with exact per-client
//! assignment updates solved by the Hungarian algorithm on
//! `v(p, q) = c(p, theta_q; gamma) + logit U(theta_q)`. Because the
//! assignment block is solved exactly, the objective is non-increasing at
//! every alpha update; the diagnostics assert that.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::HeadParams;
use crate::hungarian::{self, CostMatrix};
use crate::pool::{flatten_prompt, unflatten_prompt, PromptPool};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Two-layer popularity net `d_p -> 16 -> 1` with tanh hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub const POP_HIDDEN: usize = 16;

impl PopularityNet {
    #[must_use]
    pub fn init(d_p: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Tensor::randn(d_p, POP_HIDDEN, (1.0 / d_p as f64).sqrt(), rng),
            b1: Tensor::zeros(1, POP_HIDDEN),
            w2: Tensor::randn(POP_HIDDEN, 1, (1.0 / POP_HIDDEN as f64).sqrt(), rng),
            b2: Tensor::zeros(1, 1),
        }
    }

    #[must_use]
    pub fn zeros(d_p: usize) -> Self {
        Self {
            w1: Tensor::zeros(d_p, POP_HIDDEN),
            b1: Tensor::zeros(1, POP_HIDDEN),
            w2: Tensor::zeros(POP_HIDDEN, 1),
            b2: Tensor::zeros(1, 1),
        }
    }

    /// Raw pre-sigmoid output `g(theta_q; zeta)` for one centroid row.
    #[must_use]
    pub fn raw(&self, theta_row: &[f64]) -> f64 {
        let mut out = self.b2.at(0, 0);
        for j in 0..POP_HIDDEN {
            let mut h = self.b1.at(0, j);
            for (i, &x) in theta_row.iter().enumerate() {
                h += x * self.w1.at(i, j);
            }
            out += h.tanh() * self.w2.at(j, 0);
        }
        out
    }
}

/// Server state that persists across federated rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerParams {
    /// Log-scale diagonal metric; zeros give the plain squared Euclidean.
    pub gamma: Tensor,
    pub zeta: PopularityNet,
}

impl ServerParams {
    #[must_use]
    pub fn init(d_p: usize, rng: &mut impl Rng) -> Self {
        Self { gamma: Tensor::zeros(1, d_p), zeta: PopularityNet::init(d_p, rng) }
    }
}

/// Alignment loop knobs.
#[derive(Debug, Clone, Copy)]
pub struct AlignConfig {
    /// Alternations of (continuous steps, assignment pass).
    pub e_srv: usize,
    /// Gradient steps on (theta, gamma, zeta) per alternation.
    pub t_grad: usize,
    pub lr_server: f64,
    /// Swap the popularity term's sign (see [`assignment_values`]).
    pub popularity_flipped: bool,
}

/// Diagnostics from one alignment call.
#[derive(Debug, Clone, Default)]
pub struct AlignDiag {
    pub objective_start: f64,
    pub objective_end: f64,
    pub alpha_updates: usize,
    /// Alpha updates that increased the objective by more than 1e-9.
    pub monotonicity_violations: usize,
    pub worst_alpha_increase: f64,
    pub eq9_violations: usize,
    pub injectivity_violations: usize,
    pub clusters_pruned: usize,
    pub pool_size: usize,
    /// Distinct clusters in the final assignment, counted from alpha itself;
    /// pruning is exact iff this equals `pool_size`.
    pub assigned_clusters: usize,
    /// Mean pairwise Euclidean distance between surviving centroids.
    pub mean_centroid_dist: f64,
}

/// Stacks a pool's prompts as flattened `[tokens || key]` rows.
#[must_use]
pub fn pool_matrix(pool: &PromptPool) -> Tensor {
    let d_p = pool.prompts[0].tokens.len() + pool.prompts[0].key.len();
    let mut data = Vec::with_capacity(pool.len() * d_p);
    for p in &pool.prompts {
        data.extend_from_slice(&flatten_prompt(p));
    }
    Tensor::new(pool.len(), d_p, data).expect("pool prompts are finite")
}

/// Learnable cluster cost `c = sum_i exp(2 gamma_i) (p_i - theta_i)^2`.
#[must_use]
pub fn cluster_cost(p: &[f64], theta_q: &[f64], gamma: &[f64]) -> f64 {
    p.iter()
        .zip(theta_q)
        .zip(gamma)
        .map(|((a, b), g)| (2.0 * g).exp() * (a - b) * (a - b))
        .sum()
}

/// Popularity `U(theta_q; zeta) = sigmoid(g(theta_q; zeta))`, strictly in (0,1).
#[must_use]
pub fn popularity(theta_q: &[f64], zeta: &PopularityNet) -> f64 {
    sigmoid(zeta.raw(theta_q))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Assignment value matrix `v(p, q) = c(p, theta_q; gamma) + s * logit U(theta_q)`
/// with `s = -1` when the popularity sign is flipped.
///
/// The log-odds term is computed from the same clamped logs as
/// [`objective_value`], so a Hungarian solve over these values minimizes
/// exactly the quantity the objective measures and every assignment update
/// is non-increasing even when the popularity net saturates. Away from
/// saturation this equals the raw net output.
pub fn assignment_values(
    client_rows: &Tensor,
    theta: &Tensor,
    gamma: &Tensor,
    zeta: &PopularityNet,
    flipped: bool,
) -> Result<CostMatrix> {
    if client_rows.cols() != theta.cols() || gamma.cols() != theta.cols() {
        return Err(Error::Contract("assignment_values dimension mismatch".into()));
    }
    let clamp = crate::tape::LOG_CLAMP;
    let sign = if flipped { -1.0 } else { 1.0 };
    let logits: Vec<f64> = (0..theta.rows())
        .map(|q| {
            let u = popularity(theta.row_slice(q), zeta);
            sign * (u.max(clamp).ln() - (1.0 - u).max(clamp).ln())
        })
        .collect();
    let mut v = Tensor::zeros(client_rows.rows(), theta.rows());
    for p in 0..client_rows.rows() {
        for q in 0..theta.rows() {
            let c = cluster_cost(client_rows.row_slice(p), theta.row_slice(q), gamma.data());
            v.set(p, q, c + logits[q]);
        }
    }
    v.validate_finite("assignment values")?;
    Ok(v)
}

/// Optimal injective prompt-to-cluster map for one client at fixed
/// continuous parameters. Errors when fewer clusters than prompts exist.
pub fn assign_client(values: &CostMatrix) -> Result<Vec<usize>> {
    if values.rows() > values.cols() {
        return Err(Error::Infeasible(format!(
            "{} prompts cannot map injectively into {} clusters",
            values.rows(),
            values.cols()
        )));
    }
    hungarian::solve(values)
}

/// Joint objective `G + R` evaluated without a tape.
///
/// `q_of_row[r]` is the cluster assigned to flattened prompt row `r`; `G`
/// sums the metric cost of assigned pairs, and `R` is the popularity term
/// `sum_q counts_q log U_q + (m - counts_q) log(1 - U_q)` (logs clamped at
/// 1e-12, swapped when flipped).
#[must_use]
pub fn objective_value(
    p_matrix: &Tensor,
    q_of_row: &[usize],
    theta: &Tensor,
    gamma: &Tensor,
    zeta: &PopularityNet,
    flipped: bool,
) -> f64 {
    let m = p_matrix.rows();
    let mut g = 0.0;
    for r in 0..m {
        g += cluster_cost(p_matrix.row_slice(r), theta.row_slice(q_of_row[r]), gamma.data());
    }
    let mut counts = vec![0.0f64; theta.rows()];
    for &q in q_of_row {
        counts[q] += 1.0;
    }
    let clamp = crate::tape::LOG_CLAMP;
    let mut r_term = 0.0;
    for q in 0..theta.rows() {
        let u = popularity(theta.row_slice(q), zeta);
        let (lu, l1mu) = (u.max(clamp).ln(), (1.0 - u).max(clamp).ln());
        let (assigned, unassigned) = if flipped { (l1mu, lu) } else { (lu, l1mu) };
        r_term += counts[q] * assigned + (m as f64 - counts[q]) * unassigned;
    }
    g + r_term
}

struct ObjHandles {
    theta: NodeId,
    gamma: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// Records the joint objective on a tape with (theta, gamma, zeta) trainable.
fn objective_program(
    tape: &mut Tape,
    p_matrix: &Tensor,
    q_of_row: &[usize],
    theta: &Tensor,
    gamma: &Tensor,
    zeta: &PopularityNet,
    flipped: bool,
) -> (NodeId, ObjHandles) {
    let handles = ObjHandles {
        theta: tape.param(theta.clone()),
        gamma: tape.param(gamma.clone()),
        w1: tape.param(zeta.w1.clone()),
        b1: tape.param(zeta.b1.clone()),
        w2: tape.param(zeta.w2.clone()),
        b2: tape.param(zeta.b2.clone()),
    };
    let p_const = tape.constant(p_matrix.clone());

    let gathered = tape.gather_rows(handles.theta, q_of_row.to_vec());
    let diff = tape.sub(p_const, gathered);
    let diff2 = tape.mul(diff, diff);
    let two_gamma = tape.scale(handles.gamma, 2.0);
    let weights = tape.exp(two_gamma);
    let weighted = tape.mul_rowvec(diff2, weights);
    let g_term = tape.sum_all(weighted);

    let q_total = theta.rows();
    let m = p_matrix.rows() as f64;
    let mut counts = vec![0.0f64; q_total];
    for &q in q_of_row {
        counts[q] += 1.0;
    }
    let pre = tape.matmul(handles.theta, handles.w1);
    let pre_b = tape.add_rowvec(pre, handles.b1);
    let hidden = tape.tanh(pre_b);
    let out = tape.matmul(hidden, handles.w2);
    let out_b = tape.add_rowvec(out, handles.b2);
    let u = tape.sigmoid(out_b);
    let ones = tape.constant(Tensor::filled(q_total, 1, 1.0));
    let one_minus_u = tape.sub(ones, u);
    let log_u = tape.log(u);
    let log_1mu = tape.log(one_minus_u);
    let (assigned_log, unassigned_log) =
        if flipped { (log_1mu, log_u) } else { (log_u, log_1mu) };
    let counts_c = tape.constant(Tensor::new(q_total, 1, counts.clone()).expect("finite counts"));
    let rest_c = tape.constant(
        Tensor::new(q_total, 1, counts.iter().map(|c| m - c).collect()).expect("finite counts"),
    );
    let assigned_term = tape.mul(counts_c, assigned_log);
    let unassigned_term = tape.mul(rest_c, unassigned_log);
    let a_sum = tape.sum_all(assigned_term);
    let u_sum = tape.sum_all(unassigned_term);
    let r_term = tape.add(a_sum, u_sum);

    let obj = tape.add(g_term, r_term);
    (obj, handles)
}

/// One gradient step on (theta, gamma, zeta) at fixed assignments.
fn continuous_step(
    p_matrix: &Tensor,
    q_of_row: &[usize],
    theta: &mut Tensor,
    server: &mut ServerParams,
    lr: f64,
    flipped: bool,
) -> Result<()> {
    let mut tape = Tape::new();
    let (obj, handles) =
        objective_program(&mut tape, p_matrix, q_of_row, theta, &server.gamma, &server.zeta, flipped);
    let grads = tape.backward(obj)?;
    let step = |t: &mut Tensor, node: NodeId| {
        if let Some(g) = grads.get(node) {
            t.axpy(-lr, g);
        }
    };
    step(theta, handles.theta);
    step(&mut server.gamma, handles.gamma);
    step(&mut server.zeta.w1, handles.w1);
    step(&mut server.zeta.b1, handles.b1);
    step(&mut server.zeta.w2, handles.w2);
    step(&mut server.zeta.b2, handles.b2);
    Ok(())
}

/// Aligns the clients' inter pools into a new global pool.
///
/// `pools` must be in ascending client-id order, all of equal size. Centroids
/// start as the received prompt rows with the identity assignment; after
/// `e_srv` alternations, clusters that no prompt maps to are dropped and the
/// survivors are returned as prompts.
pub fn align(
    pools: &[PromptPool],
    server: &mut ServerParams,
    cfg: &AlignConfig,
) -> Result<(PromptPool, AlignDiag)> {
    if pools.is_empty() {
        return Err(Error::Contract("align needs at least one pool".into()));
    }
    let tau = pools[0].len();
    let kind = pools[0].kind;
    if tau == 0 {
        return Err(Error::Contract("align received an empty pool".into()));
    }
    let p_len = pools[0].prompts[0].tokens.rows();
    let d_model = pools[0].prompts[0].tokens.cols();
    let d_q = pools[0].prompts[0].key.cols();
    for pool in pools {
        if pool.len() != tau || pool.kind != kind {
            return Err(Error::Contract("align pools must share size and kind".into()));
        }
        for p in &pool.prompts {
            if p.tokens.shape() != (p_len, d_model) || p.key.shape() != (1, d_q) {
                return Err(Error::Contract("align pools must share prompt shapes".into()));
            }
        }
    }
    let d_p = p_len * d_model + d_q;
    if server.gamma.cols() != d_p || server.zeta.w1.rows() != d_p {
        return Err(Error::Contract(format!(
            "server params sized for d_p={}, pools have d_p={d_p}",
            server.gamma.cols()
        )));
    }

    let n = pools.len();
    let m = n * tau;
    let matrices: Vec<Tensor> = pools.iter().map(pool_matrix).collect();
    let p_matrix = {
        let refs: Vec<&Tensor> = matrices.iter().collect();
        Tensor::vstack(&refs)?
    };
    let mut theta = p_matrix.clone();
    let mut alpha: Vec<Vec<usize>> = (0..n).map(|t| (t * tau..(t + 1) * tau).collect()).collect();
    let flat_alpha = |alpha: &[Vec<usize>]| -> Vec<usize> {
        alpha.iter().flatten().copied().collect()
    };

    let mut diag = AlignDiag {
        objective_start: objective_value(
            &p_matrix,
            &flat_alpha(&alpha),
            &theta,
            &server.gamma,
            &server.zeta,
            cfg.popularity_flipped,
        ),
        ..AlignDiag::default()
    };

    for _ in 0..cfg.e_srv {
        let q_of_row = flat_alpha(&alpha);
        for _ in 0..cfg.t_grad {
            continuous_step(
                &p_matrix,
                &q_of_row,
                &mut theta,
                server,
                cfg.lr_server,
                cfg.popularity_flipped,
            )?;
        }

        for t in 0..n {
            let before = objective_value(
                &p_matrix,
                &flat_alpha(&alpha),
                &theta,
                &server.gamma,
                &server.zeta,
                cfg.popularity_flipped,
            );
            let values =
                assignment_values(&matrices[t], &theta, &server.gamma, &server.zeta, cfg.popularity_flipped)?;
            let assignment = assign_client(&values)?;

            if assignment.len() != tau {
                diag.eq9_violations += 1;
            }
            let mut seen = vec![false; theta.rows()];
            for &q in &assignment {
                if seen[q] {
                    diag.injectivity_violations += 1;
                }
                seen[q] = true;
            }
            alpha[t] = assignment;

            let after = objective_value(
                &p_matrix,
                &flat_alpha(&alpha),
                &theta,
                &server.gamma,
                &server.zeta,
                cfg.popularity_flipped,
            );
            diag.alpha_updates += 1;
            let delta = after - before;
            diag.worst_alpha_increase = diag.worst_alpha_increase.max(delta);
            if delta > 1e-9 {
                diag.monotonicity_violations += 1;
            }
        }
    }

    diag.objective_end = objective_value(
        &p_matrix,
        &flat_alpha(&alpha),
        &theta,
        &server.gamma,
        &server.zeta,
        cfg.popularity_flipped,
    );

    let mut assigned = vec![false; theta.rows()];
    for q in flat_alpha(&alpha) {
        assigned[q] = true;
    }
    let survivors: Vec<usize> = (0..theta.rows()).filter(|&q| assigned[q]).collect();
    diag.clusters_pruned = theta.rows() - survivors.len();
    diag.pool_size = survivors.len();
    diag.assigned_clusters =
        alpha.iter().flatten().copied().collect::<std::collections::BTreeSet<_>>().len();
    debug_assert!(diag.pool_size <= m && diag.pool_size >= 1);

    let mut prompts = Vec::with_capacity(survivors.len());
    for &q in &survivors {
        let mut prompt = unflatten_prompt(theta.row_slice(q), p_len, d_model, d_q)?;
        prompt.sanitize_key();
        prompts.push(prompt);
    }

    if survivors.len() > 1 {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..survivors.len() {
            for j in i + 1..survivors.len() {
                let a = theta.row_slice(survivors[i]);
                let b = theta.row_slice(survivors[j]);
                total +=
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                pairs += 1;
            }
        }
        diag.mean_centroid_dist = total / pairs as f64;
    }

    Ok((PromptPool { kind, prompts }, diag))
}

/// Uniform elementwise mean of client heads.
pub fn fedavg_heads(heads: &[HeadParams]) -> Result<HeadParams> {
    if heads.is_empty() {
        return Err(Error::Contract("fedavg_heads on empty list".into()));
    }
    let mut out = HeadParams::zeros(heads[0].pooler_w.rows(), heads[0].cls_w.cols());
    for h in heads {
        if h.pooler_w.shape() != out.pooler_w.shape() || h.cls_w.shape() != out.cls_w.shape() {
            return Err(Error::Contract("fedavg_heads shape mismatch".into()));
        }
        out.axpy_all(1.0, h);
    }
    let inv = 1.0 / heads.len() as f64;
    out.pooler_w.scale_in_place(inv);
    out.pooler_b.scale_in_place(inv);
    out.cls_w.scale_in_place(inv);
    out.cls_b.scale_in_place(inv);
    Ok(out)
}

/// Uniform elementwise mean of per-pattern prompt blocks.
pub fn fedavg_blocks(clients: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    if clients.is_empty() {
        return Err(Error::Contract("fedavg_blocks on empty list".into()));
    }
    let patterns = clients[0].len();
    let mut out: Vec<Tensor> = clients[0]
        .iter()
        .map(|b| Tensor::zeros(b.rows(), b.cols()))
        .collect();
    for c in clients {
        if c.len() != patterns {
            return Err(Error::Contract("fedavg_blocks pattern count mismatch".into()));
        }
        for (acc, b) in out.iter_mut().zip(c) {
            if acc.shape() != b.shape() {
                return Err(Error::Contract("fedavg_blocks shape mismatch".into()));
            }
            acc.axpy(1.0, b);
        }
    }
    let inv = 1.0 / clients.len() as f64;
    for b in &mut out {
        b.scale_in_place(inv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::PoolKind;
    use crate::rng::{stream_rng, Stream};
    use crate::selftest::brute_force_assignment;

    fn test_pool(seed: u64, tau: usize) -> PromptPool {
        let mut rng = stream_rng(seed, Stream::Pools);
        PromptPool::init(PoolKind::Inter, tau, 1, 6, 4, &mut rng)
    }

    fn d_p_of(pool: &PromptPool) -> usize {
        pool.prompts[0].tokens.len() + pool.prompts[0].key.len()
    }

    #[test]
    fn cluster_cost_examples() {
        let p = [1.0, 2.0, 3.0];
        assert_eq!(cluster_cost(&p, &p, &[0.0; 3]), 0.0);

        let theta = [0.0, 1.0, 5.0];
        let euclid: f64 = p.iter().zip(&theta).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((cluster_cost(&p, &theta, &[0.0; 3]) - euclid).abs() < 1e-15);

        let g = [2.0f64.ln(), 0.0, 0.0];
        let expected = 4.0 * 1.0 + 1.0 + 4.0;
        assert!((cluster_cost(&p, &theta, &g) - expected).abs() < 1e-12);
    }

    #[test]
    fn popularity_examples() {
        let zeta = PopularityNet::zeros(4);
        assert_eq!(popularity(&[1.0, -2.0, 0.5, 3.0], &zeta), 0.5);

        let mut rng = stream_rng(11, Stream::Pools);
        let zeta = PopularityNet::init(4, &mut rng);
        for trial in 0..20 {
            let row: Vec<f64> = (0..4).map(|i| (trial * 4 + i) as f64 * 0.37 - 3.0).collect();
            let u = popularity(&row, &zeta);
            assert!(u > 0.0 && u < 1.0);

            // Independent recomputation with explicit matrix ops.
            let x = Tensor::new(1, 4, row.clone()).unwrap();
            let mut h = x.matmul(&zeta.w1);
            h.axpy(1.0, &zeta.b1);
            let h = Tensor::new(1, POP_HIDDEN, h.data().iter().map(|v| v.tanh()).collect()).unwrap();
            let mut o = h.matmul(&zeta.w2);
            o.axpy(1.0, &zeta.b2);
            let expected = 1.0 / (1.0 + (-o.item()).exp());
            assert!((u - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_and_plain_objective_agree() {
        let mut rng = stream_rng(12, Stream::Pools);
        let p_matrix = Tensor::randn(6, 5, 1.0, &mut rng);
        let theta = Tensor::randn(6, 5, 1.0, &mut rng);
        let gamma = Tensor::randn(1, 5, 0.3, &mut rng);
        let zeta = PopularityNet::init(5, &mut rng);
        let q_of_row = vec![2, 0, 1, 5, 3, 3];

        for flipped in [false, true] {
            let plain = objective_value(&p_matrix, &q_of_row, &theta, &gamma, &zeta, flipped);
            let mut tape = Tape::new();
            let (obj, _) =
                objective_program(&mut tape, &p_matrix, &q_of_row, &theta, &gamma, &zeta, flipped);
            let on_tape = tape.item(obj);
            assert!(
                (plain - on_tape).abs() <= 1e-10 * plain.abs().max(1.0),
                "flipped={flipped}: {plain} vs {on_tape}"
            );
        }
    }

    #[test]
    fn identity_assignment_to_own_centroids_zeroes_g() {
        let mut rng = stream_rng(13, Stream::Pools);
        let p_matrix = Tensor::randn(4, 3, 1.0, &mut rng);
        let theta = p_matrix.clone();
        let gamma = Tensor::zeros(1, 3);
        let zeta = PopularityNet::init(3, &mut rng);
        let q_of_row = vec![0, 1, 2, 3];

        let obj = objective_value(&p_matrix, &q_of_row, &theta, &gamma, &zeta, false);
        // R alone: every cluster has exactly one assignment.
        let m = 4.0;
        let mut r = 0.0;
        for q in 0..4 {
            let u = popularity(theta.row_slice(q), &zeta);
            r += u.ln() + (m - 1.0) * (1.0 - u).ln();
        }
        assert!((obj - r).abs() < 1e-12, "G must vanish: {obj} vs {r}");
    }

    #[test]
    fn hand_computed_objective_single_prompt_two_clusters() {
        let p_matrix = Tensor::new(1, 2, vec![1.0, 0.0]).unwrap();
        let theta = Tensor::new(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::zeros(1, 2);
        let zeta = PopularityNet::zeros(2);
        // c(p, theta_0) = 1; U = 0.5 everywhere, so
        // R = [1*ln(.5) + 0*ln(.5)] + [0*ln(.5) + 1*ln(.5)] = 2 ln(0.5).
        let expected = 1.0 + 2.0 * 0.5f64.ln();
        let got = objective_value(&p_matrix, &[0], &theta, &gamma, &zeta, false);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn tiny_gradient_step_decreases_objective() {
        for seed in 0..5u64 {
            let mut rng = stream_rng(20 + seed, Stream::Pools);
            let p_matrix = Tensor::randn(6, 4, 1.0, &mut rng);
            let mut theta = Tensor::randn(6, 4, 1.0, &mut rng);
            let mut server = ServerParams::init(4, &mut rng);
            let q_of_row = vec![0, 1, 2, 3, 4, 5];
            let before =
                objective_value(&p_matrix, &q_of_row, &theta, &server.gamma, &server.zeta, false);
            continuous_step(&p_matrix, &q_of_row, &mut theta, &mut server, 1e-4, false).unwrap();
            let after =
                objective_value(&p_matrix, &q_of_row, &theta, &server.gamma, &server.zeta, false);
            assert!(after <= before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn zero_popularity_reduces_assignment_to_nearest_centroid_matching() {
        let mut rng = stream_rng(30, Stream::Pools);
        let client = Tensor::randn(3, 4, 1.0, &mut rng);
        let theta = Tensor::randn(5, 4, 1.0, &mut rng);
        let gamma = Tensor::randn(1, 4, 0.2, &mut rng);
        let zeta = PopularityNet::zeros(4);

        let v = assignment_values(&client, &theta, &gamma, &zeta, false).unwrap();
        // With U = 0.5 the log-odds vanish, so v is the pure metric cost.
        for p in 0..3 {
            for q in 0..5 {
                let c = cluster_cost(client.row_slice(p), theta.row_slice(q), gamma.data());
                assert!((v.at(p, q) - c).abs() < 1e-12);
            }
        }
        let got = assign_client(&v).unwrap();
        let (want, _) = brute_force_assignment(&v);
        let total_got: f64 = got.iter().enumerate().map(|(p, &q)| v.at(p, q)).sum();
        let total_want: f64 = want.iter().enumerate().map(|(p, &q)| v.at(p, q)).sum();
        assert!((total_got - total_want).abs() < 1e-12);
    }

    #[test]
    fn identical_prompts_take_distinct_clusters() {
        let client = Tensor::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let theta = Tensor::new(3, 2, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let v = assignment_values(&client, &theta, &Tensor::zeros(1, 2), &PopularityNet::zeros(2), false)
            .unwrap();
        let a = assign_client(&v).unwrap();
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn too_few_clusters_is_infeasible() {
        let v = Tensor::zeros(3, 2);
        assert!(matches!(assign_client(&v), Err(Error::Infeasible(_))));
    }

    #[test]
    fn small_assignment_instances_match_enumeration() {
        for seed in 0..25u64 {
            let mut rng = stream_rng(40 + seed, Stream::Pools);
            let client = Tensor::randn(3, 4, 1.0, &mut rng);
            let theta = Tensor::randn(5, 4, 1.0, &mut rng);
            let gamma = Tensor::randn(1, 4, 0.3, &mut rng);
            let zeta = PopularityNet::init(4, &mut rng);
            for flipped in [false, true] {
                let v = assignment_values(&client, &theta, &gamma, &zeta, flipped).unwrap();
                let got = assign_client(&v).unwrap();
                let (_, best) = brute_force_assignment(&v);
                let total: f64 = got.iter().enumerate().map(|(p, &q)| v.at(p, q)).sum();
                assert!((total - best).abs() < 1e-12, "seed {seed} flipped {flipped}");
            }
        }
    }

    #[test]
    fn single_client_with_frozen_params_returns_its_own_pool() {
        let pool = test_pool(50, 4);
        let mut rng = stream_rng(51, Stream::Pools);
        let mut server = ServerParams::init(d_p_of(&pool), &mut rng);
        let cfg = AlignConfig { e_srv: 3, t_grad: 0, lr_server: 0.01, popularity_flipped: false };
        let (out, diag) = align(std::slice::from_ref(&pool), &mut server, &cfg).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(diag.clusters_pruned, 0);
        assert_eq!(out.prompts, pool.prompts);
    }

    #[test]
    fn identical_pools_merge_pairwise() {
        let pool = test_pool(52, 3);
        let pools = vec![pool.clone(), pool.clone()];
        let d_p = d_p_of(&pool);
        let mut server =
            ServerParams { gamma: Tensor::zeros(1, d_p), zeta: PopularityNet::zeros(d_p) };
        let cfg = AlignConfig { e_srv: 2, t_grad: 0, lr_server: 0.01, popularity_flipped: false };
        let (out, diag) = align(&pools, &mut server, &cfg).unwrap();
        assert_eq!(out.len(), 3, "duplicates must merge: {diag:?}");
        assert_eq!(diag.clusters_pruned, 3);
        assert_eq!(out.prompts, pool.prompts);
    }

    #[test]
    fn alignment_diagnostics_stay_clean_on_random_instances() {
        let pools: Vec<PromptPool> = (0..3).map(|s| test_pool(60 + s, 4)).collect();
        let mut rng = stream_rng(63, Stream::Pools);
        let mut server = ServerParams::init(d_p_of(&pools[0]), &mut rng);
        let cfg = AlignConfig { e_srv: 4, t_grad: 10, lr_server: 0.01, popularity_flipped: false };
        let (out, diag) = align(&pools, &mut server, &cfg).unwrap();
        assert_eq!(diag.monotonicity_violations, 0, "worst {}", diag.worst_alpha_increase);
        assert_eq!(diag.eq9_violations, 0);
        assert_eq!(diag.injectivity_violations, 0);
        assert_eq!(diag.alpha_updates, 12);
        assert_eq!(out.len(), diag.pool_size);
        assert!(out.len() <= 12 && out.len() >= 4);
        assert!(diag.objective_end <= diag.objective_start + 1e-9);
    }

    #[test]
    fn align_output_is_client_order_invariant_when_frozen() {
        let pools: Vec<PromptPool> = (0..3).map(|s| test_pool(70 + s, 3)).collect();
        let permuted = vec![pools[2].clone(), pools[0].clone(), pools[1].clone()];
        let d_p = d_p_of(&pools[0]);
        let mut rng = stream_rng(73, Stream::Pools);
        let server0 = ServerParams::init(d_p, &mut rng);
        let cfg = AlignConfig { e_srv: 3, t_grad: 0, lr_server: 0.01, popularity_flipped: false };

        let (out_a, _) = align(&pools, &mut server0.clone(), &cfg).unwrap();
        let (out_b, _) = align(&permuted, &mut server0.clone(), &cfg).unwrap();
        assert_eq!(out_a.len(), out_b.len());

        // Set equality of centroid multisets within 1e-9.
        let rows_a: Vec<Vec<f64>> = out_a.prompts.iter().map(flatten_prompt).collect();
        let mut rows_b: Vec<Vec<f64>> = out_b.prompts.iter().map(flatten_prompt).collect();
        for a in &rows_a {
            let pos = rows_b.iter().position(|b| {
                a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9)
            });
            let pos = pos.expect("centroid present under permutation");
            rows_b.remove(pos);
        }
        assert!(rows_b.is_empty());
    }

    #[test]
    fn pruning_matches_assignment_union() {
        let pools: Vec<PromptPool> = (0..2).map(|s| test_pool(80 + s, 3)).collect();
        let d_p = d_p_of(&pools[0]);
        let mut rng = stream_rng(82, Stream::Pools);
        let mut server = ServerParams::init(d_p, &mut rng);
        let cfg = AlignConfig { e_srv: 1, t_grad: 0, lr_server: 0.01, popularity_flipped: false };
        let (out, diag) = align(&pools, &mut server, &cfg).unwrap();

        // Independent recount: replay the single round's assignments.
        let theta = {
            let ms: Vec<Tensor> = pools.iter().map(pool_matrix).collect();
            let refs: Vec<&Tensor> = ms.iter().collect();
            Tensor::vstack(&refs).unwrap()
        };
        let mut assigned = [false; 6];
        for pool in &pools {
            let v = assignment_values(&pool_matrix(pool), &theta, &server.gamma, &server.zeta, false)
                .unwrap();
            for q in assign_client(&v).unwrap() {
                assigned[q] = true;
            }
        }
        let union = assigned.iter().filter(|&&b| b).count();
        assert_eq!(out.len(), union);
        assert_eq!(diag.clusters_pruned, 6 - union);
    }

    #[test]
    fn fedavg_heads_examples() {
        let mut rng = stream_rng(90, Stream::Head);
        let h1 = HeadParams::init(4, 3, &mut rng);
        let same = fedavg_heads(&[h1.clone(), h1.clone()]).unwrap();
        assert!(same.pooler_w.dist(&h1.pooler_w) < 1e-15);

        let mut neg = h1.clone();
        neg.pooler_w.scale_in_place(-1.0);
        neg.pooler_b.scale_in_place(-1.0);
        neg.cls_w.scale_in_place(-1.0);
        neg.cls_b.scale_in_place(-1.0);
        let zero = fedavg_heads(&[h1.clone(), neg]).unwrap();
        assert!(zero.pooler_w.norm() < 1e-15);
        assert!(zero.cls_w.norm() < 1e-15);

        let hs: Vec<HeadParams> = (0..3).map(|i| {
            let mut r = stream_rng(91 + i, Stream::Head);
            HeadParams::init(4, 3, &mut r)
        }).collect();
        let mean = fedavg_heads(&hs).unwrap();
        for (i, j) in [(0usize, 1usize), (2, 2)] {
            let expect =
                (hs[0].cls_w.at(i, j) + hs[1].cls_w.at(i, j) + hs[2].cls_w.at(i, j)) / 3.0;
            assert!((mean.cls_w.at(i, j) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn fedavg_blocks_averages_per_pattern() {
        let a = vec![Tensor::filled(2, 3, 1.0), Tensor::filled(2, 3, 5.0)];
        let b = vec![Tensor::filled(2, 3, 3.0), Tensor::filled(2, 3, -1.0)];
        let mean = fedavg_blocks(&[a, b]).unwrap();
        assert_eq!(mean[0], Tensor::filled(2, 3, 2.0));
        assert_eq!(mean[1], Tensor::filled(2, 3, 2.0));
    }
}
