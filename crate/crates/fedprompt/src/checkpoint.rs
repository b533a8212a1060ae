//! Versioned run snapshots for exact resume.
//!
//! A checkpoint stores the full configuration next to the global state, and
//! loading demands an exactly matching configuration: resuming under a
//! different setup would silently change what the remaining rounds compute.
//! All round-level randomness is derived statelessly from `(seed, round)`,
//! so the state plus the completed-round index is enough for bit-exact
//! continuation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::run::GlobalState;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub state: GlobalState,
}

/// Serializes a checkpoint. JSON floats use shortest-roundtrip formatting,
/// so reloading reproduces every value bit-for-bit.
pub fn save(path: &Path, config: &RunConfig, state: &GlobalState) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        state: state.clone(),
    };
    let text = serde_json::to_string(&ck)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a checkpoint, verifying the version and that `config` matches the
/// one the checkpoint was written under.
pub fn load(path: &Path, config: &RunConfig) -> Result<GlobalState> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    if &ck.config != config {
        return Err(Error::Checkpoint(
            "checkpoint was written under a different configuration; refusing to resume".into(),
        ));
    }
    Ok(ck.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::run::{execute, ExecHooks};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.c_classes = 4;
        cfg.data.n_train = 40;
        cfg.data.n_test = 20;
        cfg.data.t_a = 2;
        cfg.data.t_b = 2;
        cfg.data.d_raw = 5;
        cfg.model.d_model = 6;
        cfg.model.d_ff = 6;
        cfg.model.d_q = 4;
        cfg.client.tau = 4;
        cfg.client.kappa = 2;
        cfg.client.batch_size = 10;
        cfg.server.e_srv = 1;
        cfg.server.t_grad = 2;
        cfg.run.method = Method::FedPrime;
        cfg.run.rounds = 1;
        cfg.run.n_clients = 2;
        cfg.run.zero_seconds = true;
        cfg
    }

    #[test]
    fn roundtrip_preserves_state_exactly() {
        let cfg = small_cfg();
        let out = execute(&cfg, ExecHooks::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save(&path, &cfg, &out.state).unwrap();
        let back = load(&path, &cfg).unwrap();
        assert_eq!(back, out.state);
    }

    #[test]
    fn config_mismatch_is_refused() {
        let cfg = small_cfg();
        let out = execute(&cfg, ExecHooks::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save(&path, &cfg, &out.state).unwrap();

        let mut other = cfg.clone();
        other.run.seed = 99;
        assert!(matches!(load(&path, &other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_refused() {
        let cfg = small_cfg();
        let out = execute(&cfg, ExecHooks::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save(&path, &cfg, &out.state).unwrap();
        let tampered = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(load(&path, &cfg), Err(Error::Checkpoint(_))));
    }
}
