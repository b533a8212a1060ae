//! The runnable oracle suites behind `fedprompt selftest` and the
//! acceptance tests. Each suite re-derives its expected values from scratch
//! (plain loops, exhaustive search, finite differences) rather than calling
//! the code under test twice.

use rand::Rng;

use super::{brute_force_assignment, fd_gradient, random_cost, rel_err, suite_rng, SuiteReport};
use crate::backbone::{forward, prepare, task_loss, BackboneParams, HeadNodes, HeadParams, PreparedSample};
use crate::client::{sample_program, PromptLeaves, PromptState, TrainHyper};
use crate::data::Sample;
use crate::hungarian;
use crate::pool::{regularizer, select_topk, PoolKind, PromptPool};
use crate::server::{assign_client, assignment_values, PopularityNet};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Hungarian totals versus exhaustive enumeration; exact equality expected.
#[must_use]
pub fn hungarian_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = suite_rng(seed, 0x4855_4e47);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let rows = rng.random_range(1..=5);
        let cols = rng.random_range(rows..=9);
        let cost = random_cost(rows, cols, &mut rng);
        let assign = hungarian::solve(&cost).expect("feasible by construction");
        let total = hungarian::assignment_total(&cost, &assign);
        let (_, best) = brute_force_assignment(&cost);
        let diff = (total - best).abs();
        worst = worst.max(diff);
        if diff != 0.0 {
            failures += 1;
        }
    }
    SuiteReport { name: "hungarian-vs-bruteforce", cases, failures, worst, detail: String::new() }
}

fn oracle_cluster_cost(p: &[f64], theta: &[f64], gamma: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let d = p[i] - theta[i];
        total += (2.0 * gamma[i]).exp() * d * d;
    }
    total
}

fn oracle_log_odds(theta: &[f64], zeta: &PopularityNet) -> f64 {
    let hidden: Vec<f64> = (0..zeta.w1.cols())
        .map(|j| {
            let mut h = zeta.b1.at(0, j);
            for (i, &x) in theta.iter().enumerate() {
                h += x * zeta.w1.at(i, j);
            }
            h.tanh()
        })
        .collect();
    let mut out = zeta.b2.at(0, 0);
    for (j, h) in hidden.iter().enumerate() {
        out += h * zeta.w2.at(j, 0);
    }
    let u = 1.0 / (1.0 + (-out).exp());
    (u / (1.0 - u)).ln()
}

/// Client assignment (tau=3, Q=5) versus enumeration over injective maps.
#[must_use]
pub fn assignment_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = suite_rng(seed, 0x4153_5347);
    let (tau, q_total, d_p) = (3, 5, 6);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let client = Tensor::randn(tau, d_p, 1.0, &mut rng);
        let theta = Tensor::randn(q_total, d_p, 1.0, &mut rng);
        let gamma = Tensor::randn(1, d_p, 0.3, &mut rng);
        let zeta = PopularityNet::init(d_p, &mut rng);
        let flipped = rng.random::<bool>();

        let v = assignment_values(&client, &theta, &gamma, &zeta, flipped).expect("valid dims");
        let assign = assign_client(&v).expect("Q >= tau");

        // Independent value matrix: plain-loop metric cost plus the log-odds
        // of an explicitly recomputed sigmoid.
        let sign = if flipped { -1.0 } else { 1.0 };
        let oracle_v = Tensor::from_fn(tau, q_total, |p, q| {
            oracle_cluster_cost(client.row_slice(p), theta.row_slice(q), gamma.data())
                + sign * oracle_log_odds(theta.row_slice(q), &zeta)
        });
        let (_, best_total) = brute_force_assignment(&oracle_v);
        let got_total: f64 = assign.iter().enumerate().map(|(p, &q)| oracle_v.at(p, q)).sum();
        let diff = (got_total - best_total).abs();
        worst = worst.max(diff);
        if diff > 1e-12 {
            failures += 1;
        }
    }
    SuiteReport { name: "assignment-vs-enumeration", cases, failures, worst, detail: String::new() }
}

struct GradCase {
    state: PromptState,
    head: HeadParams,
    bb: BackboneParams,
    sample: PreparedSample,
    hyper: TrainHyper,
}

fn random_grad_case(rng: &mut impl Rng) -> GradCase {
    let d_model = [4, 6, 8][rng.random_range(0..3)];
    let d_q = [3, 4][rng.random_range(0..2)];
    let d_raw = rng.random_range(3..=6);
    let d_ff = rng.random_range(4..=8);
    let t_a = rng.random_range(1..=3);
    let t_b = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let p_len = rng.random_range(1..=2);
    let tau = rng.random_range(4..=6);
    let kappa = rng.random_range(1..=2);

    let bb = BackboneParams::init(d_raw, d_model, d_ff, d_q, rng);
    let head = HeadParams::init(d_model, classes, rng);
    let dual = rng.random::<bool>();
    let state = if dual {
        PromptState::Dual {
            inter: PromptPool::init(PoolKind::Inter, tau, p_len, d_model, d_q, rng),
            intra: PromptPool::init(PoolKind::Intra, tau, p_len, d_model, d_q, rng),
        }
    } else {
        PromptState::Single {
            pool: PromptPool::init(PoolKind::Inter, tau, p_len, d_model, d_q, rng),
        }
    };

    let (present_a, present_b) = [(true, true), (true, false), (false, true)][rng.random_range(0..3)];
    let sample = Sample {
        tokens_a: Tensor::randn(t_a, d_raw, 1.0, rng),
        tokens_b: Tensor::randn(t_b, d_raw, 1.0, rng),
        present_a,
        present_b,
        label: rng.random_range(0..classes),
    };
    let sample = prepare(std::slice::from_ref(&sample), &bb).remove(0);

    let hyper = TrainHyper {
        kappa,
        lambda_r: [0.5, 1.0, 2.0][rng.random_range(0..3)],
        raw_cosine: rng.random_ratio(1, 4),
        lr: 0.05,
        local_epochs: 1,
        batch_size: 1,
    };
    GradCase { state, head, bb, sample, hyper }
}

/// Rebuilds the composite loss from explicit leaf values (fixed selection).
fn composite_loss(
    params: &[Tensor],
    dual: bool,
    case: &GradCase,
) -> f64 {
    let mut tape = Tape::new();
    let (prompt, reg_keys, head_at) = if dual {
        let it = tape.param(params[0].clone());
        let ik = tape.param(params[1].clone());
        let at = tape.param(params[2].clone());
        let ak = tape.param(params[3].clone());
        (tape.concat_rows(it, at), vec![ik, ak], 4)
    } else {
        let t = tape.param(params[0].clone());
        let k = tape.param(params[1].clone());
        (t, vec![k], 2)
    };
    let head = HeadNodes {
        pooler_w: tape.param(params[head_at].clone()),
        pooler_b: tape.param(params[head_at + 1].clone()),
        cls_w: tape.param(params[head_at + 2].clone()),
        cls_b: tape.param(params[head_at + 3].clone()),
    };
    let logits = forward(&mut tape, prompt, &case.sample.tokens, &case.bb, head);
    let task = task_loss(&mut tape, logits, case.sample.label);
    let q = tape.constant(case.sample.query.clone());
    let reg = regularizer(&mut tape, q, &reg_keys, case.hyper.raw_cosine);
    let weighted = tape.scale(reg, case.hyper.lambda_r);
    let loss = tape.add(task, weighted);
    tape.item(loss)
}

/// Backward-pass gradients versus central finite differences on the
/// composite per-sample loss, every trainable leaf.
#[must_use]
pub fn gradcheck_suite(configs: usize, seed: u64) -> SuiteReport {
    let mut rng = suite_rng(seed, 0x4752_4144);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let case = random_grad_case(&mut rng);
        let mut tape = Tape::new();
        let prog = sample_program(
            &mut tape,
            &case.state,
            &case.sample,
            &case.bb,
            &case.head,
            &case.hyper,
            true,
        )
        .expect("valid case");
        let grads = tape.backward(prog.loss).expect("finite loss");

        let (dual, mut leaf_nodes, mut params) = match &prog.leaves {
            PromptLeaves::Dual {
                inter_tokens,
                inter_keys,
                inter_idx,
                intra_tokens,
                intra_keys,
                intra_idx,
            } => {
                let (inter, intra) = match &case.state {
                    PromptState::Dual { inter, intra } => (inter, intra),
                    _ => unreachable!(),
                };
                (
                    true,
                    vec![*inter_tokens, *inter_keys, *intra_tokens, *intra_keys],
                    vec![
                        inter.stack_tokens(inter_idx).unwrap(),
                        inter.stack_keys(inter_idx).unwrap(),
                        intra.stack_tokens(intra_idx).unwrap(),
                        intra.stack_keys(intra_idx).unwrap(),
                    ],
                )
            }
            PromptLeaves::Single { tokens, keys, idx } => {
                let pool = match &case.state {
                    PromptState::Single { pool } => pool,
                    _ => unreachable!(),
                };
                (
                    false,
                    vec![*tokens, *keys],
                    vec![pool.stack_tokens(idx).unwrap(), pool.stack_keys(idx).unwrap()],
                )
            }
            PromptLeaves::Block { .. } => unreachable!("suite builds pool states"),
        };
        leaf_nodes.extend([prog.head.pooler_w, prog.head.pooler_b, prog.head.cls_w, prog.head.cls_b]);
        params.extend([
            case.head.pooler_w.clone(),
            case.head.pooler_b.clone(),
            case.head.cls_w.clone(),
            case.head.cls_b.clone(),
        ]);

        let eval = |ps: &[Tensor]| composite_loss(ps, dual, &case);
        let fd = fd_gradient(&eval, &params, 1e-5);

        let mut case_worst = 0.0f64;
        for (node, fd_grad) in leaf_nodes.iter().zip(&fd) {
            let got = grads.get(*node).expect("trainable leaf has a gradient");
            for (a, b) in got.data().iter().zip(fd_grad.data()) {
                case_worst = case_worst.max(rel_err(*a, *b));
            }
        }
        worst = worst.max(case_worst);
        if case_worst > 1e-4 {
            failures += 1;
        }
    }
    SuiteReport { name: "gradcheck-vs-fd", cases: configs, failures, worst, detail: String::new() }
}

fn oracle_topk(query: &[f64], pool: &PromptPool, kappa: usize) -> Vec<usize> {
    let dist = |key: &Tensor| -> f64 {
        let k = key.data();
        let dot: f64 = query.iter().zip(k).map(|(a, b)| a * b).sum();
        let nq: f64 = query.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nk: f64 = k.iter().map(|a| a * a).sum::<f64>().sqrt();
        1.0 - dot / (nq * nk)
    };
    let mut ranked: Vec<(f64, usize)> = pool
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| (dist(&p.key), i))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    ranked.into_iter().take(kappa).map(|(_, i)| i).collect()
}

/// Top-k retrieval versus a full-sort oracle, with forced ties and query
/// rescaling by 0.1 and 10.
#[must_use]
pub fn topk_suite(pairs: usize, seed: u64) -> SuiteReport {
    let mut rng = suite_rng(seed, 0x544f_504b);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for case in 0..pairs {
        let d_q = [3, 4, 8][rng.random_range(0..3)];
        let size = rng.random_range(3..=25);
        let mut pool = PromptPool::init(PoolKind::Inter, size, 1, 4, d_q, &mut rng);
        if case % 5 == 0 {
            // Duplicate keys force exact distance ties.
            let src = pool.prompts[0].key.clone();
            let dup = rng.random_range(1..size);
            pool.prompts[dup].key = src;
        }
        let kappa = rng.random_range(1..=size);
        let query = Tensor::randn(1, d_q, 1.0, &mut rng);

        let got = select_topk(&query, &pool, kappa).expect("kappa <= size");
        let want = oracle_topk(query.data(), &pool, kappa);
        let mut bad = got != want;

        for c in [0.1, 10.0] {
            let mut scaled = query.clone();
            scaled.scale_in_place(c);
            let rescaled = select_topk(&scaled, &pool, kappa).expect("kappa <= size");
            bad |= rescaled != got;
        }
        if bad {
            failures += 1;
            worst = 1.0;
        }
    }
    SuiteReport {
        name: "topk-vs-fullsort",
        cases: pairs,
        failures,
        worst,
        detail: "includes tie and scale-invariance checks".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_at_reduced_sizes() {
        let reports = [
            hungarian_suite(40, 1),
            assignment_suite(20, 2),
            gradcheck_suite(5, 3),
            topk_suite(60, 4),
        ];
        for r in &reports {
            assert!(r.passed(), "{}", r.line());
        }
    }
}
