//! Study configuration: a flat key/value file in TOML syntax. See
//! `docs/config.md` for every key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelSpec};
use crate::partition::StateLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Lorenz96,
    Varcost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    /// Truth run of the same model plus Gaussian noise.
    Twin,
    /// Observations read from `observation_file`.
    File,
    /// No observations: every update is the identity.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemberFailurePolicy {
    Drop,
    #[serde(alias = "replace")]
    ReplaceWithPerturbed,
}

/// Kill `count` runners shortly after cycle `cycle` starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerKill {
    pub cycle: u32,
    pub count: usize,
}

/// Change the runner target when cycle `cycle` starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resize {
    pub cycle: u32,
    pub runners: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub name: String,

    pub model: ModelName,
    pub n_dynamic: usize,
    /// Defaults to `n_dynamic`.
    pub n_assimilated: Option<usize>,
    pub forcing: f64,
    pub dt: f64,
    pub base_ms: f64,
    pub spread_ms: f64,
    /// Sleep after every propagation; changes walltime, never results.
    pub propagation_delay_ms: u64,

    pub members: usize,
    pub cycles: u32,
    pub nsteps: u32,
    pub noise_amplitude: f64,
    pub seed: u64,

    pub observations: ObservationMode,
    pub observation_file: Option<PathBuf>,
    /// Evenly spaced observed components; defaults to half the assimilated state.
    pub obs_count: Option<usize>,
    pub obs_variance: f64,
    pub perturb_observations: bool,

    pub runners: usize,
    pub runner_parts: usize,
    pub server_shards: usize,

    pub runner_timeout_ms: u64,
    pub server_timeout_ms: u64,
    pub connect_timeout_ms: u64,
    pub max_member_restarts: u32,
    pub member_failure_policy: MemberFailurePolicy,
    pub max_restarts: u32,

    pub host: String,
    pub base_port: u16,
    pub work_dir: PathBuf,
    pub metrics_path: Option<PathBuf>,
    pub final_ensemble_path: Option<PathBuf>,

    pub kill_runners: Vec<RunnerKill>,
    pub kill_delay_ms: u64,
    pub kill_server_after_cycle: Option<u32>,
    pub resize: Vec<Resize>,
    pub control_file: Option<PathBuf>,
    /// Member whose initial state is poisoned with NaN, for failure tests.
    pub poison_member: Option<u32>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            name: "study".into(),
            model: ModelName::Lorenz96,
            n_dynamic: 40,
            n_assimilated: None,
            forcing: 8.0,
            dt: 0.05,
            base_ms: 150.0,
            spread_ms: 100.0,
            propagation_delay_ms: 0,
            members: 16,
            cycles: 5,
            nsteps: 1,
            noise_amplitude: 1.0,
            seed: 1,
            observations: ObservationMode::Twin,
            observation_file: None,
            obs_count: None,
            obs_variance: 1.0,
            perturb_observations: true,
            runners: 2,
            runner_parts: 1,
            server_shards: 1,
            runner_timeout_ms: 25_000,
            server_timeout_ms: 10_000,
            connect_timeout_ms: 10_000,
            max_member_restarts: 3,
            member_failure_policy: MemberFailurePolicy::Drop,
            max_restarts: 10,
            host: "127.0.0.1".into(),
            base_port: 0,
            work_dir: PathBuf::from("ensda-work"),
            metrics_path: None,
            final_ensemble_path: None,
            kill_runners: Vec::new(),
            kill_delay_ms: 50,
            kill_server_after_cycle: None,
            resize: Vec::new(),
            control_file: None,
            poison_member: None,
        }
    }
}

/// Fields that determine the numerical result of a study. Restoring a
/// checkpoint is refused when any of these changed.
#[derive(Serialize)]
struct ResultDefiningFields<'a> {
    model: ModelName,
    n_dynamic: usize,
    n_assimilated: usize,
    forcing: f64,
    dt: f64,
    base_ms: f64,
    spread_ms: f64,
    members: usize,
    cycles: u32,
    nsteps: u32,
    noise_amplitude: f64,
    seed: u64,
    observations: ObservationMode,
    observation_file: &'a Option<PathBuf>,
    obs_count: usize,
    obs_variance: f64,
    perturb_observations: bool,
    max_member_restarts: u32,
    member_failure_policy: MemberFailurePolicy,
    poison_member: Option<u32>,
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: StudyConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn n_assimilated(&self) -> usize {
        self.n_assimilated.unwrap_or(self.n_dynamic)
    }

    pub fn obs_count(&self) -> usize {
        match self.observations {
            ObservationMode::None => 0,
            _ => self
                .obs_count
                .unwrap_or_else(|| (self.n_assimilated() / 2).max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        self.model_spec().build()?;
        if self.members < 2 {
            return Err(Error::config("members must be >= 2"));
        }
        if self.cycles == 0 {
            return Err(Error::config("cycles must be >= 1"));
        }
        if self.runner_parts == 0 || self.server_shards == 0 {
            return Err(Error::config("runner_parts and server_shards must be >= 1"));
        }
        if self.obs_count() > self.n_assimilated() {
            return Err(Error::config(format!(
                "obs_count {} exceeds the assimilated state size {}",
                self.obs_count(),
                self.n_assimilated()
            )));
        }
        if !(self.obs_variance > 0.0) {
            return Err(Error::config("obs_variance must be > 0"));
        }
        if self.observations == ObservationMode::File && self.observation_file.is_none() {
            return Err(Error::config("observations = \"file\" needs observation_file"));
        }
        if self.runner_timeout_ms == 0 || self.server_timeout_ms == 0 {
            return Err(Error::config("timeouts must be > 0"));
        }
        if let Some(p) = self.poison_member {
            if p as usize >= self.members {
                return Err(Error::config("poison_member out of range"));
            }
        }
        if self.kill_runners.iter().any(|k| k.cycle == 0) || self.resize.iter().any(|r| r.cycle == 0) {
            return Err(Error::config(
                "kill/resize timelines start at cycle 1 (cycle 0 has no preceding boundary)",
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let kind = match self.model {
            ModelName::Lorenz96 => ModelKind::Lorenz96 {
                forcing: self.forcing,
                dt: self.dt,
            },
            ModelName::Varcost => ModelKind::VarCost {
                base_ms: self.base_ms,
                spread_ms: self.spread_ms,
            },
        };
        ModelSpec {
            kind,
            n_dynamic: self.n_dynamic,
            n_assimilated: self.n_assimilated(),
        }
    }

    pub fn layout(&self) -> Result<StateLayout> {
        self.model_spec().layout()
    }

    pub fn config_hash(&self) -> u64 {
        let fields = ResultDefiningFields {
            model: self.model,
            n_dynamic: self.n_dynamic,
            n_assimilated: self.n_assimilated(),
            forcing: self.forcing,
            dt: self.dt,
            base_ms: self.base_ms,
            spread_ms: self.spread_ms,
            members: self.members,
            cycles: self.cycles,
            nsteps: self.nsteps,
            noise_amplitude: self.noise_amplitude,
            seed: self.seed,
            observations: self.observations,
            observation_file: &self.observation_file,
            obs_count: self.obs_count(),
            obs_variance: self.obs_variance,
            perturb_observations: self.perturb_observations,
            max_member_restarts: self.max_member_restarts,
            member_failure_policy: self.member_failure_policy,
            poison_member: self.poison_member,
        };
        let json = serde_json::to_vec(&fields).expect("fields serialize");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.work_dir.join("server.ckpt")
    }

    pub fn endpoint_file(&self) -> PathBuf {
        self.work_dir.join("server.endpoint")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics_path
            .clone()
            .unwrap_or_else(|| self.work_dir.join("metrics.jsonl"))
    }

    pub fn final_ensemble_path(&self) -> PathBuf {
        self.final_ensemble_path
            .clone()
            .unwrap_or_else(|| self.work_dir.join("final_ensemble.bin"))
    }

    /// Runner heartbeat period.
    pub fn heartbeat_period_ms(&self) -> u64 {
        (self.runner_timeout_ms / 5).max(1)
    }

    /// Server→launcher heartbeat period.
    pub fn server_heartbeat_period_ms(&self) -> u64 {
        (self.server_timeout_ms / 5).max(1)
    }
}
