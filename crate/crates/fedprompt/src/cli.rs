//! Command-line front end: `run`, `sweep`, `ablate-pool`, and `selftest`.
//!
//! Output lands under a root directory chosen by `--out`, then the
//! `FEDPROMPT_OUT` environment variable, then `./runs`. Each run writes its
//! resolved config, a metrics CSV, reference scores, and a final checkpoint
//! into its own subdirectory.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{Method, PopularitySign, RunConfig, ALL_METHODS};
use crate::data::{dump_csv, ClientDataset, TestScenario, TrainScenario};
use crate::metrics::{RoundMetrics, CSV_HEADER};
use crate::run::{execute, materialized_splits, ExecHooks, GlobalState};
use crate::selftest::{assignment_suite, gradcheck_suite, hungarian_suite, topk_suite};
use crate::{Error, Result};

pub const OUT_ENV: &str = "FEDPROMPT_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "fedprompt",
    about = "Federated prompt-tuning simulator with heterogeneous missing modalities",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a single experiment.
    Run(RunArgs),
    /// Grid over missing rates and methods.
    Sweep(SweepArgs),
    /// Pool-size ablation.
    AblatePool(AblateArgs),
    /// Oracle self-checks (Hungarian, assignment, gradients, retrieval).
    Selftest(SelftestArgs),
}

/// Config file plus field-level overrides shared by the experiment commands.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply for anything unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    train_scenario: Option<TrainScenario>,
    #[arg(long)]
    test_scenario: Option<TestScenario>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    n_clients: Option<usize>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lr_client: Option<f64>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    e_srv: Option<usize>,
    #[arg(long)]
    t_grad: Option<usize>,
    #[arg(long)]
    lr_server: Option<f64>,
    #[arg(long)]
    popularity_sign: Option<PopularitySign>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    c_classes: Option<usize>,
    /// Write 0 to the seconds column (byte-reproducible CSV).
    #[arg(long)]
    zero_seconds: bool,
    /// Use the literal sum-of-cosines key regularizer.
    #[arg(long)]
    raw_cosine_regularizer: bool,
    /// Preset: 20 clients, 250 rounds.
    #[arg(long)]
    paper_scale: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if self.paper_scale {
            cfg.apply_paper_scale();
        }
        macro_rules! set {
            ($field:expr, $opt:expr) => {
                if let Some(v) = $opt {
                    $field = v;
                }
            };
        }
        set!(cfg.run.method, self.method);
        set!(cfg.scenario.train, self.train_scenario);
        set!(cfg.scenario.test, self.test_scenario);
        set!(cfg.scenario.eta, self.eta);
        set!(cfg.run.rounds, self.rounds);
        set!(cfg.run.n_clients, self.n_clients);
        set!(cfg.run.participation, self.participation);
        set!(cfg.run.seed, self.seed);
        set!(cfg.client.tau, self.tau);
        set!(cfg.client.kappa, self.kappa);
        set!(cfg.client.lambda_r, self.lambda_r);
        set!(cfg.client.lr_client, self.lr_client);
        set!(cfg.client.local_epochs, self.local_epochs);
        set!(cfg.client.batch_size, self.batch_size);
        set!(cfg.server.e_srv, self.e_srv);
        set!(cfg.server.t_grad, self.t_grad);
        set!(cfg.server.lr_server, self.lr_server);
        set!(cfg.server.popularity_sign, self.popularity_sign);
        set!(cfg.data.sigma, self.sigma);
        set!(cfg.data.n_train, self.n_train);
        set!(cfg.data.n_test, self.n_test);
        set!(cfg.data.c_classes, self.c_classes);
        if self.zero_seconds {
            cfg.run.zero_seconds = true;
        }
        if self.raw_cosine_regularizer {
            cfg.client.raw_cosine_regularizer = true;
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write a checkpoint every N rounds (the final one is always written).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop after this round even if the config asks for more (simulates an
    /// interrupted run; the checkpoint then resumes it).
    #[arg(long)]
    stop_after: Option<usize>,
    /// Dump the train/test datasets as CSV next to the metrics.
    #[arg(long)]
    dump_data: bool,
    /// Run directory name (defaults to a method/scenario/seed slug).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated methods (default: all five).
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated missing rates (default: 0,0.25,0.5,0.75,1.0).
    #[arg(long)]
    etas: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated pool sizes (default: 10,15,20,25,30).
    #[arg(long)]
    taus: Option<String>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Smaller case counts for a quick signal.
    #[arg(long)]
    fast: bool,
}

/// Parses argv and runs the requested command, returning a process exit code.
pub fn cli_main(argv: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(&args),
        Cmd::Sweep(args) => cmd_sweep(&args),
        Cmd::AblatePool(args) => cmd_ablate(&args),
        Cmd::Selftest(args) => cmd_selftest(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn slug(cfg: &RunConfig) -> String {
    format!(
        "{}-{}-eta{}-seed{}",
        cfg.run.method, cfg.scenario.train, cfg.scenario.eta, cfg.run.seed
    )
}

/// Executes one configured run into `dir`, writing config.toml, metrics.csv,
/// references.json, and checkpoint.json.
fn run_into_dir(
    cfg: &RunConfig,
    dir: &Path,
    resume: Option<GlobalState>,
    checkpoint_every: Option<usize>,
    stop_after: Option<usize>,
    quiet: bool,
) -> Result<RoundMetrics> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;

    let metrics_path = dir.join("metrics.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(csv, "{CSV_HEADER}")?;

    let ck_path = dir.join("checkpoint.json");
    let ck_cfg = cfg.clone();
    let mut on_round = |state: &GlobalState, row: &RoundMetrics| -> Result<()> {
        writeln!(csv, "{}", row.csv_row())?;
        csv.flush()?;
        if !quiet {
            println!(
                "round {:>4}  train_loss {:.4}  test_loss {:.4}  test_acc {:.4}  pool {}",
                row.round, row.train_loss, row.test_loss, row.test_acc, row.pool_size
            );
        }
        if let Some(every) = checkpoint_every {
            if every > 0 && state.round.is_multiple_of(every) {
                checkpoint::save(&ck_path, &ck_cfg, state)?;
            }
        }
        Ok(())
    };

    let out = execute(
        cfg,
        ExecHooks { resume, stop_after, on_round: Some(&mut on_round) },
    )?;

    checkpoint::save(&ck_path, cfg, &out.state)?;
    std::fs::write(
        dir.join("references.json"),
        serde_json::to_string_pretty(&out.references)? + "\n",
    )?;

    out.metrics
        .last()
        .cloned()
        .ok_or_else(|| Error::Contract("run produced no rounds".into()))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let dir = args.cfg.out_root().join(args.name.clone().unwrap_or_else(|| slug(&cfg)));

    let resume = match &args.resume {
        Some(path) => Some(checkpoint::load(path, &cfg)?),
        None => None,
    };

    if args.dump_data {
        std::fs::create_dir_all(&dir)?;
        let (clients, test) = materialized_splits(&cfg)?;
        dump_csv(&dir.join("train_data.csv"), &clients)?;
        dump_csv(
            &dir.join("test_data.csv"),
            &[ClientDataset { client_id: 0, samples: test }],
        )?;
    }

    let last = run_into_dir(&cfg, &dir, resume, args.checkpoint_every, args.stop_after, false)?;
    println!(
        "done: {} rounds, final test_acc {:.4}, test_f1 {:.4} -> {}",
        last.round,
        last.test_acc,
        last.test_f1,
        dir.display()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("bad {what} '{s}': {e}"))))
        .collect()
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.cfg.resolve()?;
    let methods: Vec<Method> = match &args.methods {
        Some(list) => parse_list(list, "method")?,
        None => ALL_METHODS.to_vec(),
    };
    let etas: Vec<f64> = match &args.etas {
        Some(list) => parse_list(list, "eta")?,
        None => vec![0.0, 0.25, 0.5, 0.75, 1.0],
    };
    let root = args.cfg.out_root();

    for &method in &methods {
        for &eta in &etas {
            let mut cfg = base.clone();
            cfg.run.method = method;
            cfg.scenario.eta = eta;
            cfg.normalize();
            cfg.validate()?;
            let dir = root.join(format!("sweep-{method}-eta{eta}"));
            let last = run_into_dir(&cfg, &dir, None, None, None, true)?;
            println!(
                "sweep {method} eta={eta}: test_acc {:.4}, test_f1 {:.4} -> {}",
                last.test_acc,
                last.test_f1,
                dir.display()
            );
        }
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.cfg.resolve()?;
    let taus: Vec<usize> = match &args.taus {
        Some(list) => parse_list(list, "tau")?,
        None => vec![10, 15, 20, 25, 30],
    };
    let root = args.cfg.out_root();

    for &tau in &taus {
        let mut cfg = base.clone();
        cfg.client.tau = tau;
        cfg.validate()?;
        let dir = root.join(format!("ablate-tau{tau}"));
        let last = run_into_dir(&cfg, &dir, None, None, None, true)?;
        println!(
            "ablate tau={tau}: test_acc {:.4}, test_f1 {:.4} -> {}",
            last.test_acc,
            last.test_f1,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_selftest(args: &SelftestArgs) -> Result<()> {
    let reports = if args.fast {
        vec![
            hungarian_suite(60, 1),
            assignment_suite(30, 2),
            gradcheck_suite(8, 3),
            topk_suite(120, 4),
        ]
    } else {
        vec![
            hungarian_suite(500, 1),
            assignment_suite(200, 2),
            gradcheck_suite(50, 3),
            topk_suite(1000, 4),
        ]
    };
    let mut ok = true;
    for r in &reports {
        println!("{}", r.line());
        ok &= r.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(Error::Contract("selftest failures (see lines above)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(parts: &[&str]) -> Vec<String> {
        std::iter::once("fedprompt")
            .chain(parts.iter().copied())
            .map(String::from)
            .collect()
    }

    fn tiny_overrides(out: &Path) -> Vec<String> {
        argv(&[
            "run",
            "--out",
            out.to_str().unwrap(),
            "--c-classes",
            "4",
            "--n-train",
            "40",
            "--n-test",
            "20",
            "--rounds",
            "1",
            "--n-clients",
            "2",
            "--tau",
            "4",
            "--kappa",
            "2",
            "--batch-size",
            "10",
            "--e-srv",
            "1",
            "--t-grad",
            "2",
            "--zero-seconds",
        ])
    }

    #[test]
    fn run_writes_the_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let code = cli_main(tiny_overrides(dir.path()));
        assert_eq!(code, 0);

        let run_dir = dir.path().join("fed-prime-miss-both-eta0.7-seed1");
        let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.count(), 1);
        assert!(run_dir.join("config.toml").exists());
        assert!(run_dir.join("references.json").exists());
        assert!(run_dir.join("checkpoint.json").exists());
    }

    #[test]
    fn bad_flags_exit_nonzero() {
        assert_ne!(cli_main(argv(&["run", "--method", "nope"])), 0);
        assert_ne!(cli_main(argv(&["frobnicate"])), 0);
        assert_ne!(cli_main(argv(&["run", "--eta", "1.5"])), 0);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(cli_main(argv(&["--help"])), 0);
    }
}
