//! Tasks, per-flow progress, slack, and seeded scenario generators.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{
    centered_gateways, Device, DeviceId, MeshError, MeshTopology, Point, RouterId, Trajectory, Waypoint,
};
use crate::propagation::{derive_seed, Mode, ThroughputModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u32);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    RealTime,
    DataCollection,
}

/// One task; each task is carried by exactly one flow with the same id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: FlowId,
    pub kind: TaskKind,
    pub source: DeviceId,
    pub request_epoch: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand_mbps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_volume_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_epochs: Option<u32>,
    pub deadline_epoch: u32,
    pub preemptible: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("scale {0} is outside (0, 1]")]
    InvalidScale(f64),
    #[error("task {0}: {1}")]
    InvalidTask(FlowId, &'static str),
    #[error("duplicate task id {0}")]
    DuplicateTask(FlowId),
    #[error("could not place real-time arrivals under the concurrency cap")]
    Thinning,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m| Err(WorkloadError::InvalidTask(self.id, m));
        if self.deadline_epoch < self.request_epoch {
            return bad("deadline precedes request");
        }
        match self.kind {
            TaskKind::RealTime => {
                if !self.demand_mbps.is_some_and(|d| d > 0.0 && d.is_finite()) {
                    return bad("real-time task needs a positive demand");
                }
                if !self.duration_epochs.is_some_and(|d| d > 0) {
                    return bad("real-time task needs a positive duration");
                }
            }
            TaskKind::DataCollection => {
                if !self.data_volume_mb.is_some_and(|v| v > 0.0 && v.is_finite()) {
                    return bad("data-collection task needs a positive volume");
                }
                if !self.preemptible {
                    return bad("data-collection tasks are always preemptible");
                }
            }
        }
        Ok(())
    }

    pub fn is_realtime(&self) -> bool {
        self.kind == TaskKind::RealTime
    }

    pub fn demand(&self) -> f64 {
        self.demand_mbps.unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowStatus {
    Pending,
    Active,
    Paused,
    Done,
    Expired,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Remaining {
    Epochs(u32),
    Megabytes(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub remaining: Remaining,
    pub status: FlowStatus,
    /// Rate assigned in the most recent epoch the flow was scheduled.
    pub last_rate: Option<f64>,
    /// `(epoch, delivered Mbps)` for every epoch the flow was scheduled.
    pub history: Vec<(u32, f64)>,
}

impl FlowState {
    pub fn new(task: &TaskSpec) -> Self {
        let remaining = match task.kind {
            TaskKind::RealTime => Remaining::Epochs(task.duration_epochs.unwrap_or(0)),
            TaskKind::DataCollection => Remaining::Megabytes(task.data_volume_mb.unwrap_or(0.0)),
        };
        FlowState { remaining, status: FlowStatus::Pending, last_rate: None, history: Vec::new() }
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.status, FlowStatus::Done | FlowStatus::Expired)
    }

    pub fn remaining_epochs(&self) -> u32 {
        match self.remaining {
            Remaining::Epochs(e) => e,
            Remaining::Megabytes(_) => 0,
        }
    }

    pub fn remaining_mb(&self) -> f64 {
        match self.remaining {
            Remaining::Megabytes(m) => m,
            Remaining::Epochs(_) => 0.0,
        }
    }
}

/// Epochs a flow can still wait and finish by its deadline.
pub fn slack(task: &TaskSpec, state: &FlowState, now: u32, epoch_s: f64) -> f64 {
    let left = task.deadline_epoch as f64 - now as f64;
    match state.remaining {
        Remaining::Epochs(e) => left - e as f64,
        Remaining::Megabytes(mb) => match state.last_rate {
            Some(r) if r > 0.0 => left - mb * 8.0 / (r * epoch_s),
            _ => f64::INFINITY,
        },
    }
}

/// A generated or loaded workload.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub topology: MeshTopology,
    pub tasks: Vec<TaskSpec>,
    pub horizon: u32,
    /// Groups of co-located real-time tasks; empty for scattered workloads.
    pub clusters: Vec<Vec<FlowId>>,
}

/// Serialized form of a [`Scenario`], replayable with `Scenario::from_file`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadFile {
    pub topology: MeshTopology,
    pub tasks: Vec<TaskSpec>,
    pub horizon: u32,
    #[serde(default)]
    pub clusters: Vec<Vec<FlowId>>,
}

impl Scenario {
    pub fn to_file(&self) -> WorkloadFile {
        WorkloadFile {
            topology: self.topology.clone(),
            tasks: self.tasks.clone(),
            horizon: self.horizon,
            clusters: self.clusters.clone(),
        }
    }

    pub fn from_file(f: WorkloadFile) -> Result<Scenario, WorkloadError> {
        let s = Scenario { topology: f.topology.reindex()?, tasks: f.tasks, horizon: f.horizon, clusters: f.clusters };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(t.id) {
                return Err(WorkloadError::DuplicateTask(t.id));
            }
            self.topology.device(t.source)?;
        }
        Ok(())
    }

    /// Largest number of real-time tasks whose request-time execution windows overlap.
    pub fn max_requested_concurrency(&self) -> usize {
        let mut occ = vec![0usize; self.horizon as usize + 64];
        for t in self.tasks.iter().filter(|t| t.is_realtime()) {
            let d = t.duration_epochs.unwrap_or(0);
            for e in t.request_epoch..t.request_epoch + d {
                if let Some(c) = occ.get_mut(e as usize) {
                    *c += 1;
                }
            }
        }
        occ.into_iter().max().unwrap_or(0)
    }
}

/// Knobs of the scenario generators, at scale 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub grid_side: u32,
    pub spacing_m: f64,
    pub gateways: u32,
    pub horizon: u32,
    pub daily_tasks: u32,
    pub daily_mb: f64,
    pub daily_deadline: u32,
    pub weekly_tasks: u32,
    pub weekly_mb: f64,
    pub realtime_tasks: u32,
    pub demand_mbps: (f64, f64),
    pub duration_epochs: (u32, u32),
    pub slack_epochs: (u32, u32),
    pub mobile_fraction: f64,
    pub speed_m_per_epoch: (f64, f64),
    pub max_concurrent: u32,
    /// Real-time deadlines fall at or before this epoch.
    pub realtime_window_end: u32,
    pub cluster_max: u32,
    /// Cluster radius as a fraction of the under-canopy 2.4 GHz cutoff.
    pub cluster_radius_fraction: f64,
    /// Spread of request epochs within one cluster.
    pub cluster_request_spread: u32,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            grid_side: 15,
            spacing_m: 90.0,
            gateways: 3,
            horizon: 250,
            daily_tasks: 40,
            daily_mb: 15.0,
            daily_deadline: 200,
            weekly_tasks: 8,
            weekly_mb: 500.0,
            realtime_tasks: 100,
            demand_mbps: (10.0, 20.0),
            duration_epochs: (5, 20),
            slack_epochs: (0, 10),
            mobile_fraction: 0.3,
            speed_m_per_epoch: (5.0, 10.0),
            max_concurrent: 15,
            realtime_window_end: 250,
            cluster_max: 5,
            cluster_radius_fraction: 0.4,
            cluster_request_spread: 2,
        }
    }
}

/// One week in epochs.
pub const WEEK_EPOCHS: u32 = 7 * 24 * 60;

fn scaled(n: u32, scale: f64) -> u32 {
    if n == 0 {
        0
    } else {
        ((n as f64 * scale).round() as u32).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Uniformly scattered robots and sensors.
    Scattered,
    /// Robots in small groups around a router.
    Clustered,
}

pub fn generate_scenario1(seed: u64, scale: f64) -> Result<Scenario, WorkloadError> {
    generate(ScenarioKind::Scattered, seed, scale, &GeneratorParams::default(), ThroughputModel::bundled())
}

pub fn generate_scenario2(seed: u64, scale: f64, model: &ThroughputModel) -> Result<Scenario, WorkloadError> {
    generate(ScenarioKind::Clustered, seed, scale, &GeneratorParams::default(), model)
}

struct Occupancy {
    counts: Vec<u32>,
    cap: u32,
}

impl Occupancy {
    fn fits(&self, start: u32, dur: u32) -> bool {
        (start..start + dur).all(|e| self.counts.get(e as usize).map_or(true, |c| *c < self.cap))
    }
    fn fits_all(&self, spans: &[(u32, u32)]) -> bool {
        let mut extra = std::collections::BTreeMap::<u32, u32>::new();
        for &(s, d) in spans {
            for e in s..s + d {
                *extra.entry(e).or_default() += 1;
            }
        }
        extra.iter().all(|(e, k)| self.counts.get(*e as usize).map_or(true, |c| c + k <= self.cap))
    }
    fn take(&mut self, start: u32, dur: u32) {
        for e in start..start + dur {
            if let Some(c) = self.counts.get_mut(e as usize) {
                *c += 1;
            }
        }
    }
}

struct RtDraw {
    demand: f64,
    duration: u32,
    slack: u32,
}

fn draw_rt(rng: &mut ChaCha8Rng, p: &GeneratorParams) -> RtDraw {
    RtDraw {
        demand: rng.gen_range(p.demand_mbps.0..=p.demand_mbps.1),
        duration: rng.gen_range(p.duration_epochs.0..=p.duration_epochs.1),
        slack: rng.gen_range(p.slack_epochs.0..=p.slack_epochs.1),
    }
}

fn uniform_point(rng: &mut ChaCha8Rng, hi: Point) -> Point {
    Point::new(rng.gen_range(0.0..=hi.x), rng.gen_range(0.0..=hi.y))
}

/// Back-and-forth motion along x from `start`, starting at `from` and stopping at `until`.
fn row_trajectory(start: Point, speed: f64, dir: f64, from: u32, until: u32, max_x: f64) -> Trajectory {
    let mut waypoints = vec![Waypoint { x: start.x, y: start.y, epoch: from as f64 }];
    let mut x = start.x;
    let mut dir = dir;
    for e in from + 1..=until {
        let mut nx = x + dir * speed;
        if nx > max_x {
            nx = 2.0 * max_x - nx;
            dir = -dir;
        }
        if nx < 0.0 {
            nx = -nx;
            dir = -dir;
        }
        x = nx.clamp(0.0, max_x);
        waypoints.push(Waypoint { x, y: start.y, epoch: e as f64 });
    }
    Trajectory { waypoints }
}

/// Builds a scenario of the given kind.
pub fn generate(
    kind: ScenarioKind,
    seed: u64,
    scale: f64,
    p: &GeneratorParams,
    model: &ThroughputModel,
) -> Result<Scenario, WorkloadError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(WorkloadError::InvalidScale(scale));
    }
    let tag = match kind {
        ScenarioKind::Scattered => 1,
        ScenarioKind::Clustered => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5343_454e, tag]));
    let side = scaled(p.grid_side, scale);
    let gateways = centered_gateways(side, scaled(p.gateways, scale));
    let mut topo = MeshTopology::grid(side, side, p.spacing_m, &gateways)?;
    topo.assign_random_channels(derive_seed(seed, &[0x4348_414e]));
    let (_, hi) = topo.extent();
    let horizon = p.horizon;

    let mut tasks = Vec::new();
    let mut devices = Vec::new();
    let mut next_id = 0u32;
    let mut push_dc =
        |rng: &mut ChaCha8Rng, tasks: &mut Vec<TaskSpec>, devices: &mut Vec<Device>, mb: f64, deadline: u32| {
            let id = next_id;
            next_id += 1;
            devices.push(Device {
                id: DeviceId(id),
                trajectory: Trajectory::stationary(uniform_point(rng, hi)),
                above_canopy: false,
            });
            tasks.push(TaskSpec {
                id: FlowId(id),
                kind: TaskKind::DataCollection,
                source: DeviceId(id),
                request_epoch: 0,
                demand_mbps: None,
                data_volume_mb: Some(mb),
                duration_epochs: None,
                deadline_epoch: deadline,
                preemptible: true,
            });
        };
    for _ in 0..scaled(p.daily_tasks, scale) {
        push_dc(&mut rng, &mut tasks, &mut devices, p.daily_mb, p.daily_deadline);
    }
    for _ in 0..scaled(p.weekly_tasks, scale) {
        push_dc(&mut rng, &mut tasks, &mut devices, p.weekly_mb, horizon + WEEK_EPOCHS);
    }

    let n_rt = scaled(p.realtime_tasks, scale);
    let mut occ = Occupancy { counts: vec![0; horizon as usize + 1], cap: scaled(p.max_concurrent, scale) };
    let window_end = p.realtime_window_end.min(horizon);
    let first_rt = next_id;
    let mut clusters = Vec::new();

    match kind {
        ScenarioKind::Scattered => {
            let n_mobile = (n_rt as f64 * p.mobile_fraction).round() as usize;
            let mut mobile = vec![false; n_rt as usize];
            mobile.iter_mut().take(n_mobile).for_each(|m| *m = true);
            mobile.shuffle(&mut rng);
            for (i, is_mobile) in mobile.into_iter().enumerate() {
                let id = first_rt + i as u32;
                let d = draw_rt(&mut rng, p);
                let latest = window_end.saturating_sub(d.duration + d.slack);
                let mut placed = None;
                for _ in 0..10_000 {
                    let req = rng.gen_range(0..=latest);
                    if occ.fits(req, d.duration) {
                        placed = Some(req);
                        break;
                    }
                }
                let req = placed.ok_or(WorkloadError::Thinning)?;
                occ.take(req, d.duration);
                let start = uniform_point(&mut rng, hi);
                let deadline = req + d.duration + d.slack;
                let trajectory = if is_mobile {
                    let speed = rng.gen_range(p.speed_m_per_epoch.0..=p.speed_m_per_epoch.1);
                    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    row_trajectory(start, speed, dir, req, deadline, hi.x)
                } else {
                    Trajectory::stationary(start)
                };
                devices.push(Device { id: DeviceId(id), trajectory, above_canopy: false });
                tasks.push(rt_task(id, req, &d, deadline));
            }
        }
        ScenarioKind::Clustered => {
            let radius = p.cluster_radius_fraction * model.cutoff(Mode::UC24).unwrap_or(100.0);
            let mut left = n_rt;
            let mut id = first_rt;
            while left > 0 {
                let size = rng.gen_range(2..=p.cluster_max.max(2)).min(left);
                left -= size;
                let center = topo.routers[rng.gen_range(0..topo.routers.len())].position;
                let draws: Vec<RtDraw> = (0..size).map(|_| draw_rt(&mut rng, p)).collect();
                let offsets: Vec<u32> = (0..size).map(|_| rng.gen_range(0..=p.cluster_request_spread)).collect();
                let longest = draws.iter().zip(&offsets).map(|(d, o)| o + d.duration + d.slack).max().unwrap_or(0);
                let latest = window_end.saturating_sub(longest);
                let mut placed = None;
                for _ in 0..10_000 {
                    let base = rng.gen_range(0..=latest);
                    let spans: Vec<(u32, u32)> =
                        draws.iter().zip(&offsets).map(|(d, o)| (base + o, d.duration)).collect();
                    if occ.fits_all(&spans) {
                        placed = Some(base);
                        break;
                    }
                }
                let base = placed.ok_or(WorkloadError::Thinning)?;
                let mut members = Vec::new();
                for (d, o) in draws.iter().zip(&offsets) {
                    members.push(FlowId(id));
                    let req = base + o;
                    occ.take(req, d.duration);
                    let r = radius * rng.gen::<f64>().sqrt();
                    let th = rng.gen_range(0.0..std::f64::consts::TAU);
                    let pos = Point::new(
                        (center.x + r * th.cos()).clamp(0.0, hi.x),
                        (center.y + r * th.sin()).clamp(0.0, hi.y),
                    );
                    devices.push(Device {
                        id: DeviceId(id),
                        trajectory: Trajectory::stationary(pos),
                        above_canopy: false,
                    });
                    tasks.push(rt_task(id, req, d, req + d.duration + d.slack));
                    id += 1;
                }
                clusters.push(members);
            }
        }
    }

    let topology = topo.with_devices(devices)?;
    let scenario = Scenario { topology, tasks, horizon, clusters };
    scenario.validate()?;
    Ok(scenario)
}

fn rt_task(id: u32, req: u32, d: &RtDraw, deadline: u32) -> TaskSpec {
    TaskSpec {
        id: FlowId(id),
        kind: TaskKind::RealTime,
        source: DeviceId(id),
        request_epoch: req,
        demand_mbps: Some(d.demand),
        data_volume_mb: None,
        duration_epochs: Some(d.duration),
        deadline_epoch: deadline,
        preemptible: true,
    }
}

/// Router nearest to `p` (lowest id on ties).
pub fn nearest_router(topo: &MeshTopology, p: Point) -> Option<RouterId> {
    topo.routers
        .iter()
        .map(|r| (crate::mesh::distance(p, r.position), r.id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|x| x.1)
}
