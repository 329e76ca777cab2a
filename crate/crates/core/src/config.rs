//! Run configuration: one JSON document with serde defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::PolicyId;
use crate::mesh::{Channel24, MeshError, RouterId};
use crate::propagation::{read_trace, PropagationError, ThroughputModel};
use crate::sim::SimParams;
use crate::te::TeParams;
use crate::workload::{generate, GeneratorParams, Scenario, ScenarioKind, WorkloadError, WorkloadFile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Channel(#[from] MeshError),
    #[error(transparent)]
    Trace(#[from] PropagationError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// Grid overrides applied on top of the generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub grid_side: Option<u32>,
    pub spacing_m: Option<f64>,
    pub gateways: Option<u32>,
    /// 2.4 GHz channel per router id.
    pub channels: BTreeMap<u32, u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub scale: f64,
    pub params: GeneratorParams,
    /// Replay a saved workload instead of generating one.
    pub file: Option<PathBuf>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            kind: ScenarioKind::Scattered,
            seed: 0,
            scale: 1.0,
            params: GeneratorParams::default(),
            file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub topology: TopologyConfig,
    pub workload: WorkloadConfig,
    /// Trace to fit; the bundled fit when absent.
    pub trace: Option<PathBuf>,
    pub policy: PolicyId,
    pub te: TeParams,
    pub sim: SimParams,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            topology: TopologyConfig::default(),
            workload: WorkloadConfig::default(),
            trace: None,
            policy: PolicyId::CentralRouting,
            te: TeParams::default(),
            sim: SimParams::default(),
            out: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Uses `seed` for the workload, the planner and the variation streams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.workload.seed = seed;
        self.sim.seed = seed;
        self.sim.variation.rng_seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.sim.seed
    }

    /// Checks everything that can fail before simulating.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for &c in self.topology.channels.values() {
            Channel24::new(c)?;
        }
        if let Some(s) = self.topology.grid_side {
            if s == 0 {
                return Err(invalid("grid_side must be positive"));
            }
            if let Some(&r) = self.topology.channels.keys().find(|&&r| r >= s * s) {
                return Err(MeshError::UnknownRouter(r).into());
            }
        }
        if self.topology.spacing_m.is_some_and(|s| !(s > 0.0)) {
            return Err(MeshError::BadSpacing.into());
        }
        if self.topology.gateways == Some(0) {
            return Err(MeshError::NoGateway.into());
        }
        if !(self.workload.scale > 0.0 && self.workload.scale <= 1.0) {
            return Err(WorkloadError::InvalidScale(self.workload.scale).into());
        }
        if !self.te.is_valid() {
            return Err(invalid("te parameters out of range"));
        }
        if !self.sim.is_valid() {
            return Err(invalid("sim parameters out of range"));
        }
        if (self.te.channel_switch_penalty_s - self.sim.channel_switch_penalty_s).abs() > 0.0 {
            return Err(invalid("te and sim disagree on the channel switch penalty"));
        }
        for p in self.trace.iter().chain(self.workload.file.iter()) {
            if !p.is_file() {
                return Err(invalid(format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Stable short hash of the effective config, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serializes"));
        hex::encode(&digest[..6])
    }

    /// Directory name of a run: config hash plus seed.
    pub fn run_name(&self) -> String {
        format!("{}-s{}", self.hash(), self.seed())
    }

    pub fn model(&self) -> Result<ThroughputModel, ConfigError> {
        match &self.trace {
            None => Ok(ThroughputModel::bundled().clone()),
            Some(p) => {
                let f = std::fs::File::open(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                Ok(ThroughputModel::fit_all(&read_trace(f)?)?)
            }
        }
    }

    pub fn scenario(&self, model: &ThroughputModel) -> Result<Scenario, ConfigError> {
        let mut scenario = match &self.workload.file {
            Some(p) => {
                let s = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                let f: WorkloadFile = serde_json::from_str(&s)?;
                Scenario::from_file(f)?
            }
            None => {
                let mut params = self.workload.params.clone();
                params.horizon = self.sim.horizon;
                if let Some(s) = self.topology.grid_side {
                    params.grid_side = s;
                }
                if let Some(s) = self.topology.spacing_m {
                    params.spacing_m = s;
                }
                if let Some(g) = self.topology.gateways {
                    params.gateways = g;
                }
                generate(self.workload.kind, self.workload.seed, self.workload.scale, &params, model)?
            }
        };
        for (&r, &c) in &self.topology.channels {
            let ch = Channel24::new(c)?;
            let router =
                scenario.topology.routers.get_mut(r as usize).ok_or(MeshError::UnknownRouter(RouterId(r).0))?;
            router.channel24 = ch;
        }
        Ok(scenario)
    }
}
