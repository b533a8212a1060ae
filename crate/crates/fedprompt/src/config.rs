//! Run configuration: TOML sections with desk-scale defaults, validation,
//! and method selection.
//!
//! Every field has a default, so a config file only needs the keys it
//! overrides. Unknown keys are rejected rather than silently ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Partition, TestScenario, TrainScenario};
use crate::{Error, Result};

/// Which training/aggregation variant a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Dual pools, alignment for inter, FedAvg for intra.
    FedPrime,
    /// Single pool aggregated by alignment.
    FedInter,
    /// Single pool aggregated by FedAvg.
    FedIntra,
    /// Per-pattern prompt blocks, FedAvg, no retrieval.
    FedavgP,
    /// FEDAVG_P trained on the pooled dataset (one client).
    CentralizedP,
}

pub const ALL_METHODS: [Method; 5] = [
    Method::FedPrime,
    Method::FedInter,
    Method::FedIntra,
    Method::FedavgP,
    Method::CentralizedP,
];

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::FedPrime => "fed-prime",
            Method::FedInter => "fed-inter",
            Method::FedIntra => "fed-intra",
            Method::FedavgP => "fedavg-p",
            Method::CentralizedP => "centralized-p",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fed-prime" => Ok(Method::FedPrime),
            "fed-inter" => Ok(Method::FedInter),
            "fed-intra" => Ok(Method::FedIntra),
            "fedavg-p" => Ok(Method::FedavgP),
            "centralized-p" => Ok(Method::CentralizedP),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected fed-prime, fed-inter, fed-intra, fedavg-p, \
                 centralized-p)"
            ))),
        }
    }
}

/// Sign convention for the popularity term in the alignment objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopularitySign {
    /// The objective's literal form: assigned clusters contribute `+log U`.
    AsWritten,
    /// Negated variant: assigned clusters contribute `+log(1-U)`.
    Flipped,
}

impl PopularitySign {
    #[must_use]
    pub fn flipped(self) -> bool {
        matches!(self, PopularitySign::Flipped)
    }
}

impl std::fmt::Display for PopularitySign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PopularitySign::AsWritten => "as-written",
            PopularitySign::Flipped => "flipped",
        })
    }
}

impl std::str::FromStr for PopularitySign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(PopularitySign::AsWritten),
            "flipped" => Ok(PopularitySign::Flipped),
            other => Err(Error::Config(format!(
                "unknown popularity sign '{other}' (expected as-written, flipped)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub c_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub t_a: usize,
    pub t_b: usize,
    pub d_raw: usize,
    pub sigma: f64,
    pub partition: Partition,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            c_classes: 8,
            n_train: 2000,
            n_test: 500,
            t_a: 4,
            t_b: 4,
            d_raw: 16,
            sigma: 0.5,
            partition: Partition::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub train: TrainScenario,
    pub eta: f64,
    pub test: TestScenario,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { train: TrainScenario::MissBoth, eta: 0.7, test: TestScenario::SimTrain }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub d_q: usize,
    pub p_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 32, d_ff: 64, d_q: 16, p_len: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub tau: usize,
    pub kappa: usize,
    pub lambda_r: f64,
    /// Restores the literal sum-of-cosines regularizer instead of `1 - cos`.
    pub raw_cosine_regularizer: bool,
    pub lr_client: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            tau: 20,
            kappa: 5,
            lambda_r: 1.0,
            raw_cosine_regularizer: false,
            lr_client: 0.05,
            local_epochs: 1,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub e_srv: usize,
    pub t_grad: usize,
    pub lr_server: f64,
    pub popularity_sign: PopularitySign,
    pub tau_max: usize,
    /// Keep gamma and the popularity net across rounds (re-initialized each
    /// round when false).
    pub persist_server_params: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            e_srv: 5,
            t_grad: 20,
            lr_server: 0.01,
            popularity_sign: PopularitySign::AsWritten,
            tau_max: 30,
            persist_server_params: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub rounds: usize,
    pub n_clients: usize,
    /// Share of clients training each round, in (0, 1].
    pub participation: f64,
    pub seed: u64,
    /// Write 0 to the seconds column for byte-reproducible metrics files.
    pub zero_seconds: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: Method::FedPrime,
            rounds: 60,
            n_clients: 8,
            participation: 1.0,
            seed: 1,
            zero_seconds: false,
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub client: ClientConfig,
    pub server: ServerConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    #[must_use]
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Flattened prompt dimension `P_len * d_model + d_q`.
    #[must_use]
    pub fn d_p(&self) -> usize {
        self.model.p_len * self.model.d_model + self.model.d_q
    }

    /// Applies structural overrides: the centralized baseline always runs
    /// with a single client holding the pooled dataset.
    pub fn normalize(&mut self) {
        if self.run.method == Method::CentralizedP {
            self.run.n_clients = 1;
            self.run.participation = 1.0;
        }
    }

    /// Switches to the paper-scale preset (more clients, more rounds).
    pub fn apply_paper_scale(&mut self) {
        self.run.n_clients = 20;
        self.run.rounds = 250;
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));

        let d = &self.data;
        if d.c_classes < 2 {
            return fail(format!("c_classes must be >= 2, got {}", d.c_classes));
        }
        if d.n_train == 0 || d.n_test == 0 {
            return fail("n_train and n_test must be positive".into());
        }
        if d.n_train < d.c_classes || d.n_test < d.c_classes {
            return fail(format!(
                "n_train ({}) and n_test ({}) must each cover all {} classes",
                d.n_train, d.n_test, d.c_classes
            ));
        }
        if d.t_a == 0 || d.t_b == 0 || d.d_raw == 0 {
            return fail("t_a, t_b, d_raw must be positive".into());
        }
        if !d.sigma.is_finite() || d.sigma < 0.0 {
            return fail(format!("sigma must be finite and >= 0, got {}", d.sigma));
        }
        if let Partition::Dirichlet { alpha } = d.partition {
            if !alpha.is_finite() || alpha <= 0.0 {
                return fail(format!("dirichlet alpha must be positive, got {alpha}"));
            }
        }

        let s = &self.scenario;
        if !s.eta.is_finite() || !(0.0..=1.0).contains(&s.eta) {
            return fail(format!("eta must lie in [0, 1], got {}", s.eta));
        }

        let m = &self.model;
        if m.d_model == 0 || m.d_ff == 0 || m.d_q == 0 || m.p_len == 0 {
            return fail("d_model, d_ff, d_q, p_len must be positive".into());
        }

        let c = &self.client;
        if c.tau == 0 || c.kappa == 0 {
            return fail("tau and kappa must be positive".into());
        }
        if 2 * c.kappa > c.tau {
            return fail(format!(
                "2*kappa ({}) cannot exceed tau ({}): single-pool methods retrieve 2*kappa prompts",
                2 * c.kappa,
                c.tau
            ));
        }
        if !c.lambda_r.is_finite() || c.lambda_r < 0.0 {
            return fail(format!("lambda_r must be finite and >= 0, got {}", c.lambda_r));
        }
        if !c.lr_client.is_finite() || c.lr_client < 0.0 {
            return fail(format!("lr_client must be finite and >= 0, got {}", c.lr_client));
        }
        if c.local_epochs == 0 || c.batch_size == 0 {
            return fail("local_epochs and batch_size must be positive".into());
        }

        let srv = &self.server;
        if !srv.lr_server.is_finite() || srv.lr_server < 0.0 {
            return fail(format!("lr_server must be finite and >= 0, got {}", srv.lr_server));
        }
        if srv.tau_max == 0 {
            return fail("tau_max must be positive".into());
        }
        if c.tau > srv.tau_max {
            return fail(format!("tau ({}) cannot exceed tau_max ({})", c.tau, srv.tau_max));
        }

        let r = &self.run;
        if r.rounds == 0 {
            return fail("rounds must be >= 1".into());
        }
        if r.n_clients == 0 {
            return fail("n_clients must be >= 1".into());
        }
        if !r.participation.is_finite() || r.participation <= 0.0 || r.participation > 1.0 {
            return fail(format!("participation must lie in (0, 1], got {}", r.participation));
        }
        if r.method == Method::CentralizedP && r.n_clients != 1 {
            return fail("centralized-p requires n_clients = 1 (normalize() applies it)".into());
        }
        if d.n_train < r.n_clients {
            return fail(format!(
                "n_train ({}) must cover n_clients ({}) without empty clients",
                d.n_train, r.n_clients
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_overrides_only_named_keys() {
        let cfg = RunConfig::from_toml_str(
            "[run]\nmethod = \"fed-intra\"\nseed = 7\n\n[scenario]\neta = 0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.run.method, Method::FedIntra);
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.scenario.eta, 0.25);
        assert_eq!(cfg.run.rounds, 60);
        assert_eq!(cfg.client.tau, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[run]\nronuds = 3\n").is_err());
        assert!(RunConfig::from_toml_str("[cluent]\ntau = 3\n").is_err());
    }

    #[test]
    fn dirichlet_partition_parses() {
        let cfg = RunConfig::from_toml_str(
            "[data]\npartition = { kind = \"dirichlet\", alpha = 0.5 }\n",
        )
        .unwrap();
        assert_eq!(cfg.data.partition, Partition::Dirichlet { alpha: 0.5 });
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut cfg = RunConfig::default();
        cfg.scenario.eta = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.client.kappa = 11;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.run.participation = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data.n_test = 4;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.client.tau = 31;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn centralized_normalizes_to_one_client() {
        let mut cfg = RunConfig::default();
        cfg.run.method = Method::CentralizedP;
        assert!(cfg.validate().is_err(), "pre-normalize n_clients=8 must fail");
        cfg.normalize();
        assert_eq!(cfg.run.n_clients, 1);
        cfg.validate().unwrap();
    }

    #[test]
    fn paper_scale_preset() {
        let mut cfg = RunConfig::default();
        cfg.apply_paper_scale();
        assert_eq!(cfg.run.n_clients, 20);
        assert_eq!(cfg.run.rounds, 250);
        cfg.validate().unwrap();
    }

    #[test]
    fn method_names_roundtrip() {
        for m in ALL_METHODS {
            assert_eq!(Method::from_str(&m.to_string()).unwrap(), m);
        }
        assert!(Method::from_str("fedprime").is_err());
    }
}
