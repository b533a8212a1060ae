//! Minimal end-to-end federation: a small fed-prime run, printed per round.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use fedprompt::config::RunConfig;
use fedprompt::run::{execute, ExecHooks};

fn main() -> fedprompt::Result<()> {
    // Shrink the default setup so the example finishes in a few seconds.
    let mut cfg = RunConfig::default();
    cfg.data.c_classes = 4;
    cfg.data.n_train = 400;
    cfg.data.n_test = 200;
    cfg.run.n_clients = 4;
    cfg.run.rounds = 15;
    cfg.client.tau = 8;
    cfg.client.kappa = 2;
    cfg.scenario.eta = 0.7;

    let out = execute(&cfg, ExecHooks::default())?;

    println!("references (untrained model and classical baselines):");
    let r = &out.references;
    println!("  majority class   {:.4}", r.majority_class_accuracy);
    println!("  nearest mean     {:.4} (joint)", r.nearest_mean_joint);
    println!("  initial test acc {:.4}", r.initial_test_acc);
    println!();
    println!("round  train_loss  test_loss  test_acc  pool");
    for m in &out.metrics {
        println!(
            "{:>5}  {:>10.4}  {:>9.4}  {:>8.4}  {:>4}",
            m.round, m.train_loss, m.test_loss, m.test_acc, m.pool_size
        );
    }

    let last = out.metrics.last().expect("at least one round");
    println!();
    println!(
        "final: acc {:.4}, macro-F1 {:.4} ({} prompts in the global pool)",
        last.test_acc, last.test_f1, last.pool_size
    );
    println!(
        "alignment audit: {} calls, {} assignment updates, {} monotonicity violations",
        out.align_audit.align_calls,
        out.align_audit.alpha_updates,
        out.align_audit.monotonicity_violations
    );
    Ok(())
}
