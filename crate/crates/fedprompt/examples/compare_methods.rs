//! Every aggregation method on one small federation, side by side.
//!
//! Runs the dual-pool method and its ablations on identical data (miss-both
//! at eta 0.7) and prints final test metrics next to the classical anchors.
//! Takes around a minute.
//!
//! ```text
//! cargo run --release --example compare_methods
//! ```

use fedprompt::config::{Method, RunConfig, ALL_METHODS};
use fedprompt::run::{execute, ExecHooks};

fn small(method: Method) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.c_classes = 4;
    cfg.data.n_train = 600;
    cfg.data.n_test = 300;
    cfg.run.n_clients = 4;
    cfg.run.rounds = 20;
    cfg.client.tau = 8;
    cfg.client.kappa = 2;
    cfg.scenario.eta = 0.7;
    cfg.run.method = method;
    cfg
}

fn main() -> fedprompt::Result<()> {
    println!("{:<14} {:>9} {:>9} {:>10} {:>6}", "method", "test_acc", "macro_f1", "test_loss", "pool");
    let mut reference = None;
    for method in ALL_METHODS {
        let out = execute(&small(method), ExecHooks::default())?;
        let last = out.metrics.last().expect("rounds ran");
        println!(
            "{:<14} {:>9.4} {:>9.4} {:>10.4} {:>6}",
            method.to_string(),
            last.test_acc,
            last.test_f1,
            last.test_loss,
            last.pool_size
        );
        reference.get_or_insert(out.references);
    }

    let r = reference.expect("at least one run");
    println!();
    println!("anchors: chance 0.2500, majority {:.4}, nearest-mean joint {:.4}",
        r.majority_class_accuracy, r.nearest_mean_joint);
    println!("         untrained prompts scored {:.4}", r.initial_test_acc);
    Ok(())
}
