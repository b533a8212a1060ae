//! The federated loop: data setup, per-round client updates, server
//! aggregation per method, evaluation, and metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{prepare, BackboneParams, HeadParams, PreparedSample};
use crate::client::{
    adopt_global, local_update, mean_composite_loss, sample_program, PromptState, TrainHyper,
};
use crate::config::{Method, RunConfig};
use crate::data::{
    self, majority_class_accuracy, nearest_mean_accuracy, partition, RefMode, Sample,
};
use crate::metrics::{argmax, classification_scores, RoundMetrics};
use crate::pool::{fedavg_pools, PoolKind, PromptPool};
use crate::rng::{stream_rng, Stream};
use crate::server::{align, fedavg_blocks, fedavg_heads, AlignConfig, ServerParams};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Everything the server carries between rounds; also the checkpoint payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    /// Last completed round (0 before training).
    pub round: usize,
    pub prompts: PromptState,
    pub head: HeadParams,
    pub server: ServerParams,
}

/// Reference scores anchoring what the learned models achieve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub majority_class_accuracy: f64,
    pub nearest_mean_joint: f64,
    pub nearest_mean_image_only: f64,
    pub nearest_mean_text_only: f64,
    pub initial_test_loss: f64,
    pub initial_test_acc: f64,
    pub initial_test_f1: f64,
}

/// Alignment diagnostics summed over every align call of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignAudit {
    pub align_calls: usize,
    pub alpha_updates: usize,
    pub monotonicity_violations: usize,
    pub worst_alpha_increase: f64,
    pub eq9_violations: usize,
    pub injectivity_violations: usize,
    /// Align calls whose surviving pool size differed from the number of
    /// distinct clusters in the final assignment.
    pub prune_mismatches: usize,
}

impl AlignAudit {
    fn absorb(&mut self, d: &crate::server::AlignDiag) {
        self.align_calls += 1;
        self.alpha_updates += d.alpha_updates;
        self.monotonicity_violations += d.monotonicity_violations;
        self.worst_alpha_increase = self.worst_alpha_increase.max(d.worst_alpha_increase);
        self.eq9_violations += d.eq9_violations;
        self.injectivity_violations += d.injectivity_violations;
        self.prune_mismatches += usize::from(d.pool_size != d.assigned_clusters);
    }
}

pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub state: GlobalState,
    pub references: References,
    pub align_audit: AlignAudit,
}

/// Execution controls beyond the config: resuming from a checkpointed state,
/// stopping early, and observing each completed round.
#[derive(Default)]
pub struct ExecHooks<'a> {
    pub resume: Option<GlobalState>,
    pub stop_after: Option<usize>,
    #[allow(clippy::type_complexity)]
    pub on_round: Option<&'a mut dyn FnMut(&GlobalState, &RoundMetrics) -> Result<()>>,
}

/// Clients training in `round`: a seeded shuffle of all ids, truncated to
/// the participation share (at least one), returned sorted.
#[must_use]
pub fn participants(seed: u64, round: usize, n_clients: usize, participation: f64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let m = data::floor_share(participation, n_clients).max(1);
    let mut ids: Vec<usize> = (0..n_clients).collect();
    let mut rng = stream_rng(seed, Stream::Participation { round: round as u64 });
    ids.shuffle(&mut rng);
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

/// Mean task loss, accuracy, and macro-F1 of the global model on `test`.
pub fn evaluate(
    state: &PromptState,
    head: &HeadParams,
    test: &[PreparedSample],
    bb: &BackboneParams,
    hyper: &TrainHyper,
    classes: usize,
) -> Result<(f64, f64, f64)> {
    if test.is_empty() {
        return Err(Error::Contract("evaluate needs a non-empty test set".into()));
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for sample in test {
        let mut tape = Tape::new();
        let prog = sample_program(&mut tape, state, sample, bb, head, hyper, false)?;
        loss += tape.item(prog.task);
        preds.push(argmax(tape.value(prog.logits).row_slice(0)));
        labels.push(sample.label);
    }
    let (acc, f1) = classification_scores(&preds, &labels, classes)?;
    Ok((loss / test.len() as f64, acc, f1))
}

/// Train/test synthetic splits sharing one set of class means.
///
/// Budgets that do not divide evenly hand the remainder to the lowest
/// labels, one extra sample each.
fn build_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.data;
    let share = |n: usize, c: usize| n / d.c_classes + usize::from(c < n % d.c_classes);
    let counts: Vec<usize> =
        (0..d.c_classes).map(|c| share(d.n_train, c) + share(d.n_test, c)).collect();
    let mut rng = stream_rng(cfg.run.seed, Stream::Data);
    let all =
        data::generate_with_counts(d.c_classes, &counts, d.t_a, d.t_b, d.d_raw, d.sigma, &mut rng)?;

    let mut train = Vec::with_capacity(d.n_train);
    let mut test = Vec::with_capacity(d.n_test);
    let mut start = 0;
    for c in 0..d.c_classes {
        let train_c = share(d.n_train, c);
        train.extend_from_slice(&all[start..start + train_c]);
        test.extend_from_slice(&all[start + train_c..start + counts[c]]);
        start += counts[c];
    }
    debug_assert!(train.len() == d.n_train && test.len() == d.n_test);

    let mut rng = stream_rng(cfg.run.seed, Stream::Missing);
    data::apply_missing(&mut train, cfg.scenario.train, cfg.scenario.eta, &mut rng)?;
    let mut rng = stream_rng(cfg.run.seed, Stream::TestData);
    let test = data::make_test(test, cfg.scenario.test, cfg.scenario.train, cfg.scenario.eta, &mut rng)?;
    Ok((train, test))
}

fn init_prompts(cfg: &RunConfig) -> PromptState {
    let m = &cfg.model;
    let mut rng = stream_rng(cfg.run.seed, Stream::Pools);
    match cfg.run.method {
        Method::FedPrime => PromptState::Dual {
            inter: PromptPool::init(PoolKind::Inter, cfg.client.tau, m.p_len, m.d_model, m.d_q, &mut rng),
            intra: PromptPool::init(PoolKind::Intra, cfg.client.tau, m.p_len, m.d_model, m.d_q, &mut rng),
        },
        Method::FedInter | Method::FedIntra => PromptState::Single {
            pool: PromptPool::init(PoolKind::Inter, cfg.client.tau, m.p_len, m.d_model, m.d_q, &mut rng),
        },
        Method::FedavgP | Method::CentralizedP => PromptState::Blocks {
            blocks: (0..3)
                .map(|_| Tensor::randn(m.p_len * 2 * cfg.client.kappa, m.d_model, 0.02, &mut rng))
                .collect(),
        },
    }
}

fn init_state(cfg: &RunConfig) -> GlobalState {
    let mut head_rng = stream_rng(cfg.run.seed, Stream::Head);
    let mut server_rng = stream_rng(cfg.run.seed, Stream::ServerInit { round: 0 });
    GlobalState {
        round: 0,
        prompts: init_prompts(cfg),
        head: HeadParams::init(cfg.model.d_model, cfg.data.c_classes, &mut head_rng),
        server: ServerParams::init(cfg.d_p(), &mut server_rng),
    }
}

fn hyper_of(cfg: &RunConfig) -> TrainHyper {
    TrainHyper {
        kappa: cfg.client.kappa,
        lambda_r: cfg.client.lambda_r,
        raw_cosine: cfg.client.raw_cosine_regularizer,
        lr: cfg.client.lr_client,
        local_epochs: cfg.client.local_epochs,
        batch_size: cfg.client.batch_size,
    }
}

/// Runs the federated loop. See [`ExecHooks`] for resume/interruption.
pub fn execute(cfg: &RunConfig, mut hooks: ExecHooks) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.normalize();
    cfg.validate()?;
    let seed = cfg.run.seed;
    let n = cfg.run.n_clients;
    let hyper = hyper_of(&cfg);

    let (train, test) = build_splits(&cfg)?;
    let mut part_rng = stream_rng(seed, Stream::Partition);
    let clients = partition(train.clone(), n, cfg.data.partition, &mut part_rng)?;

    let mut bb_rng = stream_rng(seed, Stream::Backbone);
    let bb = BackboneParams::init(cfg.data.d_raw, cfg.model.d_model, cfg.model.d_ff, cfg.model.d_q, &mut bb_rng);
    let prepared_train: Vec<Vec<PreparedSample>> =
        clients.iter().map(|c| prepare(&c.samples, &bb)).collect();
    let prepared_test = prepare(&test, &bb);

    let fresh = init_state(&cfg);
    let references = {
        let (loss, acc, f1) =
            evaluate(&fresh.prompts, &fresh.head, &prepared_test, &bb, &hyper, cfg.data.c_classes)?;
        References {
            majority_class_accuracy: majority_class_accuracy(&train, &test)?,
            nearest_mean_joint: nearest_mean_accuracy(&train, &test, RefMode::Joint)?,
            nearest_mean_image_only: nearest_mean_accuracy(&train, &test, RefMode::AOnly)?,
            nearest_mean_text_only: nearest_mean_accuracy(&train, &test, RefMode::BOnly)?,
            initial_test_loss: loss,
            initial_test_acc: acc,
            initial_test_f1: f1,
        }
    };

    let mut state = match hooks.resume.take() {
        Some(resumed) => {
            if resumed.round >= cfg.run.rounds {
                return Err(Error::Config(format!(
                    "checkpoint is at round {} but the run ends at round {}",
                    resumed.round, cfg.run.rounds
                )));
            }
            resumed
        }
        None => fresh,
    };

    let align_cfg = AlignConfig {
        e_srv: cfg.server.e_srv,
        t_grad: cfg.server.t_grad,
        lr_server: cfg.server.lr_server,
        popularity_flipped: cfg.server.popularity_sign.flipped(),
    };

    let mut rows = Vec::new();
    let mut audit = AlignAudit::default();
    let last_round = hooks.stop_after.map_or(cfg.run.rounds, |s| s.min(cfg.run.rounds));
    for h in state.round + 1..=last_round {
        let started = Instant::now();
        let ids = participants(seed, h, n, cfg.run.participation);

        let mut local_prompts = Vec::with_capacity(ids.len());
        let mut local_heads = Vec::with_capacity(ids.len());
        let mut loss_sum = 0.0;
        let mut sample_sum = 0usize;
        for &t in &ids {
            let mut adopt_rng =
                stream_rng(seed, Stream::Adopt { client_id: t as u64, round: h as u64 });
            let mut prompts =
                adopt_global(&state.prompts, &prepared_train[t], cfg.client.tau, &mut adopt_rng)?;
            let mut head = state.head.clone();
            let mut rng = stream_rng(seed, Stream::Client { client_id: t as u64, round: h as u64 });
            let outcome =
                local_update(&mut prompts, &mut head, &prepared_train[t], &bb, &hyper, &mut rng)?;
            loss_sum += outcome.mean_loss * outcome.samples_seen as f64;
            sample_sum += outcome.samples_seen;
            local_prompts.push(prompts);
            local_heads.push(head);
        }
        let train_loss = loss_sum / sample_sum as f64;

        if !cfg.server.persist_server_params {
            let mut rng = stream_rng(seed, Stream::ServerInit { round: h as u64 });
            state.server = ServerParams::init(cfg.d_p(), &mut rng);
        }

        let mut centroid_dist = 0.0;
        state.prompts = match cfg.run.method {
            Method::FedPrime => {
                let inters: Vec<PromptPool> = local_prompts
                    .iter()
                    .map(|p| match p {
                        PromptState::Dual { inter, .. } => inter.clone(),
                        _ => unreachable!("fed-prime trains dual state"),
                    })
                    .collect();
                let intras: Vec<PromptPool> = local_prompts
                    .iter()
                    .map(|p| match p {
                        PromptState::Dual { intra, .. } => intra.clone(),
                        _ => unreachable!("fed-prime trains dual state"),
                    })
                    .collect();
                let (inter, diag) = align(&inters, &mut state.server, &align_cfg)?;
                audit.absorb(&diag);
                centroid_dist = diag.mean_centroid_dist;
                PromptState::Dual { inter, intra: fedavg_pools(&intras)? }
            }
            Method::FedInter => {
                let pools: Vec<PromptPool> = local_prompts
                    .iter()
                    .map(|p| match p {
                        PromptState::Single { pool } => pool.clone(),
                        _ => unreachable!("fed-inter trains single state"),
                    })
                    .collect();
                let (pool, diag) = align(&pools, &mut state.server, &align_cfg)?;
                audit.absorb(&diag);
                centroid_dist = diag.mean_centroid_dist;
                PromptState::Single { pool }
            }
            Method::FedIntra => {
                let pools: Vec<PromptPool> = local_prompts
                    .iter()
                    .map(|p| match p {
                        PromptState::Single { pool } => pool.clone(),
                        _ => unreachable!("fed-intra trains single state"),
                    })
                    .collect();
                PromptState::Single { pool: fedavg_pools(&pools)? }
            }
            Method::FedavgP | Method::CentralizedP => {
                let blocks: Vec<Vec<Tensor>> = local_prompts
                    .into_iter()
                    .map(|p| match p {
                        PromptState::Blocks { blocks } => blocks,
                        _ => unreachable!("block methods train block state"),
                    })
                    .collect();
                PromptState::Blocks { blocks: fedavg_blocks(&blocks)? }
            }
        };
        state.head = fedavg_heads(&local_heads)?;
        state.round = h;

        let (test_loss, test_acc, test_f1) =
            evaluate(&state.prompts, &state.head, &prepared_test, &bb, &hyper, cfg.data.c_classes)?;
        let row = RoundMetrics {
            round: h,
            train_loss,
            test_loss,
            test_acc,
            test_f1,
            pool_size: state.prompts.reported_size(),
            centroid_dist,
            seconds: if cfg.run.zero_seconds { 0.0 } else { started.elapsed().as_secs_f64() },
        };
        if let Some(cb) = hooks.on_round.as_mut() {
            cb(&state, &row)?;
        }
        rows.push(row);
    }

    Ok(RunOutput { metrics: rows, state, references, align_audit: audit })
}

/// Dataset access for the data-dump CLI and examples: the exact splits a run
/// would train and evaluate on.
pub fn materialized_splits(cfg: &RunConfig) -> Result<(Vec<data::ClientDataset>, Vec<Sample>)> {
    let mut cfg = cfg.clone();
    cfg.normalize();
    cfg.validate()?;
    let (train, test) = build_splits(&cfg)?;
    let mut part_rng = stream_rng(cfg.run.seed, Stream::Partition);
    let clients = partition(train, cfg.run.n_clients, cfg.data.partition, &mut part_rng)?;
    Ok((clients, test))
}

/// Composite-loss view of the global model over pooled client data; handy in
/// examples for watching the quantity clients actually minimize.
pub fn global_train_composite_loss(
    cfg: &RunConfig,
    state: &GlobalState,
) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.normalize();
    cfg.validate()?;
    let (train, _) = build_splits(&cfg)?;
    let mut bb_rng = stream_rng(cfg.run.seed, Stream::Backbone);
    let bb = BackboneParams::init(cfg.data.d_raw, cfg.model.d_model, cfg.model.d_ff, cfg.model.d_q, &mut bb_rng);
    let prepared = prepare(&train, &bb);
    mean_composite_loss(&state.prompts, &state.head, &prepared, &bb, &hyper_of(&cfg))
}
