//! Two-tier farm mesh simulation and centralized traffic engineering.

pub mod baselines;
pub mod capacity;
pub mod config;
pub mod experiment;
pub mod fairness;
pub mod mesh;
pub mod oracle;
pub mod propagation;
pub mod sim;
pub mod te;
pub mod workload;

pub use baselines::PolicyId;
pub use capacity::{ContentionLedger, HopSpec, ResourceFootprint, Slot};
pub use config::{ConfigError, RunConfig};
pub use experiment::RunError;
pub use mesh::{Channel24, Device, DeviceId, MeshTopology, NodeId, Point, RouterId};
pub use propagation::{Mode, ThroughputModel, VariationModel};
pub use sim::{SimParams, SimReport};
pub use te::{TeEngine, TeParams, TePlan};
pub use workload::{FlowId, Scenario, ScenarioKind, TaskKind, TaskSpec};
