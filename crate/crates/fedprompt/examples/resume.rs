//! Determinism and exact resume: stop a run halfway, checkpoint, reload,
//! and verify the continuation reproduces the uninterrupted run byte for
//! byte.
//!
//! Round-level randomness is derived from `(seed, round)` rather than a
//! mutating generator, so the checkpointed state plus the round index is all
//! a resume needs.
//!
//! ```text
//! cargo run --example resume
//! ```

use fedprompt::checkpoint;
use fedprompt::config::RunConfig;
use fedprompt::metrics::RoundMetrics;
use fedprompt::run::{execute, ExecHooks};

fn csv_rows(metrics: &[RoundMetrics]) -> Vec<String> {
    metrics.iter().map(RoundMetrics::csv_row).collect()
}

fn main() -> fedprompt::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.c_classes = 4;
    cfg.data.n_train = 200;
    cfg.data.n_test = 100;
    cfg.run.n_clients = 3;
    cfg.run.rounds = 8;
    cfg.client.tau = 6;
    cfg.client.kappa = 2;
    cfg.run.zero_seconds = true;

    let full = execute(&cfg, ExecHooks::default())?;
    let again = execute(&cfg, ExecHooks::default())?;
    assert_eq!(csv_rows(&full.metrics), csv_rows(&again.metrics));
    println!("two full runs: all {} metric rows identical", full.metrics.len());

    let half = execute(&cfg, ExecHooks { stop_after: Some(4), ..Default::default() })?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("halfway.json");
    checkpoint::save(&path, &cfg, &half.state)?;
    println!("stopped after round {}, checkpoint written", half.state.round);

    let restored = checkpoint::load(&path, &cfg)?;
    let resumed = execute(&cfg, ExecHooks { resume: Some(restored), ..Default::default() })?;
    assert_eq!(csv_rows(&resumed.metrics), csv_rows(&full.metrics[4..]));
    assert_eq!(resumed.state, full.state);
    println!(
        "resumed rounds {}..={} match the uninterrupted run exactly",
        resumed.metrics.first().map_or(0, |m| m.round),
        resumed.metrics.last().map_or(0, |m| m.round),
    );

    let mut other = cfg.clone();
    other.run.seed = 2;
    match checkpoint::load(&path, &other) {
        Err(e) => println!("loading under a different config refuses: {e}"),
        Ok(_) => unreachable!("config mismatch must be rejected"),
    }
    Ok(())
}
