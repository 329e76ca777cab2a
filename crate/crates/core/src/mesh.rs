//! Grid topology of above-canopy routers and under-canopy devices.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::propagation::{Mode, ThroughputModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouterId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

/// Any radio in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Router(RouterId),
    Device(DeviceId),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Router(r) => write!(f, "r{}", r.0),
            NodeId::Device(d) => write!(f, "d{}", d.0),
        }
    }
}

impl From<RouterId> for NodeId {
    fn from(r: RouterId) -> Self {
        NodeId::Router(r)
    }
}

impl From<DeviceId> for NodeId {
    fn from(d: DeviceId) -> Self {
        NodeId::Device(d)
    }
}

/// A non-overlapping 2.4 GHz channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Channel24(u8);

impl Channel24 {
    pub const ALL: [Channel24; 3] = [Channel24(1), Channel24(6), Channel24(11)];

    pub fn new(ch: u8) -> Result<Self, MeshError> {
        match ch {
            1 | 6 | 11 => Ok(Channel24(ch)),
            other => Err(MeshError::InvalidChannel(other)),
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Channel24 {
    type Error = MeshError;
    fn try_from(v: u8) -> Result<Self, MeshError> {
        Channel24::new(v)
    }
}

impl From<Channel24> for u8 {
    fn from(c: Channel24) -> u8 {
        c.0
    }
}

impl fmt::Display for Channel24 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The single mesh channel shared by every router on 5 GHz.
pub const MESH_CHANNEL_5: u8 = 36;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("2.4 GHz channel {0} is not one of 1, 6, 11")]
    InvalidChannel(u8),
    #[error("unknown router {0}")]
    UnknownRouter(u32),
    #[error("unknown device {0}")]
    UnknownDevice(u32),
    #[error("grid must have at least one row and column")]
    EmptyGrid,
    #[error("grid spacing must be positive")]
    BadSpacing,
    #[error("at least one gateway is required")]
    NoGateway,
    #[error("trajectory for device {0} is empty or not time-ordered")]
    BadTrajectory(u32),
    #[error("duplicate device id {0}")]
    DuplicateDevice(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub id: RouterId,
    pub position: Point,
    pub channel24: Channel24,
    pub channel5: u8,
    pub is_gateway: bool,
}

/// A position at a given (possibly fractional) epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub epoch: f64,
}

/// Piecewise-linear trajectory; stationary before the first and after the last waypoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn stationary(p: Point) -> Self {
        Trajectory { waypoints: vec![Waypoint { x: p.x, y: p.y, epoch: 0.0 }] }
    }

    pub fn is_valid(&self) -> bool {
        !self.waypoints.is_empty()
            && self.waypoints.iter().all(|w| w.x.is_finite() && w.y.is_finite() && w.epoch.is_finite())
            && self.waypoints.windows(2).all(|w| w[0].epoch < w[1].epoch)
    }

    pub fn position_at(&self, epoch: f64) -> Point {
        let w = &self.waypoints;
        let first = w[0];
        if epoch <= first.epoch || w.len() == 1 {
            return Point::new(first.x, first.y);
        }
        for pair in w.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if epoch <= b.epoch {
                let t = (epoch - a.epoch) / (b.epoch - a.epoch);
                return Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
            }
        }
        let last = w[w.len() - 1];
        Point::new(last.x, last.y)
    }

    pub fn is_static(&self) -> bool {
        let p = self.waypoints[0];
        self.waypoints.iter().all(|w| w.x == p.x && w.y == p.y)
    }

    /// Highest speed between consecutive waypoints, in meters per epoch.
    pub fn max_speed(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|p| (p[1].x - p[0].x).hypot(p[1].y - p[0].y) / (p[1].epoch - p[0].epoch))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: DeviceId,
    pub trajectory: Trajectory,
    /// Sends its first hop from above the canopy.
    #[serde(default)]
    pub above_canopy: bool,
}

impl Device {
    pub fn position(&self, epoch: u32) -> Point {
        self.trajectory.position_at(epoch as f64)
    }

    pub fn access_mode(&self) -> Mode {
        if self.above_canopy {
            Mode::AC24
        } else {
            Mode::UC24
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshTopology {
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub spacing: f64,
    pub routers: Vec<Router>,
    pub devices: Vec<Device>,
    pub gateway_ids: Vec<RouterId>,
    #[serde(skip)]
    device_index: BTreeMap<DeviceId, usize>,
}

/// `count` gateways spread evenly across the first row.
pub fn default_gateways(cols: u32, count: u32) -> Vec<RouterId> {
    let count = count.clamp(1, cols.max(1));
    let mut ids: Vec<RouterId> = (0..count)
        .map(|i| {
            let c = ((i as f64 + 0.5) * cols as f64 / count as f64 - 0.5).round() as u32;
            RouterId(c.min(cols - 1))
        })
        .collect();
    ids.dedup();
    ids
}

/// `count` adjacent gateways centered in the first row.
pub fn centered_gateways(cols: u32, count: u32) -> Vec<RouterId> {
    let count = count.clamp(1, cols.max(1));
    let start = (cols - count) / 2;
    (start..start + count).map(RouterId).collect()
}

impl MeshTopology {
    /// Rectangular grid with router `row * cols + col` at `(col * spacing, row * spacing)`.
    /// Row 0 is the gateway row. All 2.4 GHz channels start at channel 1.
    pub fn grid(rows: u32, cols: u32, spacing: f64, gateways: &[RouterId]) -> Result<Self, MeshError> {
        if rows == 0 || cols == 0 {
            return Err(MeshError::EmptyGrid);
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(MeshError::BadSpacing);
        }
        if gateways.is_empty() {
            return Err(MeshError::NoGateway);
        }
        let n = rows * cols;
        if let Some(g) = gateways.iter().find(|g| g.0 >= n) {
            return Err(MeshError::UnknownRouter(g.0));
        }
        let mut gateway_ids = gateways.to_vec();
        gateway_ids.sort();
        gateway_ids.dedup();
        let routers = (0..n)
            .map(|i| Router {
                id: RouterId(i),
                position: Point::new((i % cols) as f64 * spacing, (i / cols) as f64 * spacing),
                channel24: Channel24::ALL[0],
                channel5: MESH_CHANNEL_5,
                is_gateway: gateway_ids.contains(&RouterId(i)),
            })
            .collect();
        Ok(MeshTopology {
            grid_rows: rows,
            grid_cols: cols,
            spacing,
            routers,
            devices: Vec::new(),
            gateway_ids,
            device_index: BTreeMap::new(),
        })
    }

    pub fn with_devices(mut self, devices: Vec<Device>) -> Result<Self, MeshError> {
        let mut index = BTreeMap::new();
        for (i, d) in devices.iter().enumerate() {
            if !d.trajectory.is_valid() {
                return Err(MeshError::BadTrajectory(d.id.0));
            }
            if index.insert(d.id, i).is_some() {
                return Err(MeshError::DuplicateDevice(d.id.0));
            }
        }
        self.devices = devices;
        self.device_index = index;
        Ok(self)
    }

    /// Rebuilds lookup tables after deserialization.
    pub fn reindex(self) -> Result<Self, MeshError> {
        if self.routers.len() != (self.grid_rows * self.grid_cols) as usize {
            return Err(MeshError::UnknownRouter(self.routers.len() as u32));
        }
        for (i, r) in self.routers.iter().enumerate() {
            if r.id.0 as usize != i || r.is_gateway != self.gateway_ids.contains(&r.id) {
                return Err(MeshError::UnknownRouter(r.id.0));
            }
        }
        let devices = self.devices.clone();
        self.with_devices(devices)
    }

    /// Draws an independent uniform channel per router.
    pub fn assign_random_channels(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in &mut self.routers {
            r.channel24 = Channel24::ALL[rng.gen_range(0..3)];
        }
    }

    pub fn router(&self, id: RouterId) -> Result<&Router, MeshError> {
        self.routers.get(id.0 as usize).ok_or(MeshError::UnknownRouter(id.0))
    }

    pub fn device(&self, id: DeviceId) -> Result<&Device, MeshError> {
        self.device_index.get(&id).map(|&i| &self.devices[i]).ok_or(MeshError::UnknownDevice(id.0))
    }

    pub fn router_count(&self) -> usize {
        self.routers.len()
    }

    pub fn row_col(&self, id: RouterId) -> (u32, u32) {
        (id.0 / self.grid_cols, id.0 % self.grid_cols)
    }

    pub fn router_at(&self, row: u32, col: u32) -> Option<RouterId> {
        (row < self.grid_rows && col < self.grid_cols).then(|| RouterId(row * self.grid_cols + col))
    }

    pub fn is_gateway(&self, id: RouterId) -> bool {
        self.routers.get(id.0 as usize).is_some_and(|r| r.is_gateway)
    }

    pub fn position(&self, node: NodeId, epoch: u32) -> Result<Point, MeshError> {
        match node {
            NodeId::Router(r) => Ok(self.router(r)?.position),
            NodeId::Device(d) => Ok(self.device(d)?.position(epoch)),
        }
    }

    /// Up/down/left/right neighbors in ascending id order.
    pub fn grid_neighbors(&self, id: RouterId) -> Result<Vec<RouterId>, MeshError> {
        self.router(id)?;
        let (r, c) = self.row_col(id);
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push(RouterId(id.0 - self.grid_cols));
        }
        if c > 0 {
            out.push(RouterId(id.0 - 1));
        }
        if c + 1 < self.grid_cols {
            out.push(RouterId(id.0 + 1));
        }
        if r + 1 < self.grid_rows {
            out.push(RouterId(id.0 + self.grid_cols));
        }
        Ok(out)
    }

    /// Routers with positive throughput from `pos` in `mode`, excluding `exclude`.
    pub fn routers_in_range(
        &self,
        pos: Point,
        mode: Mode,
        model: &ThroughputModel,
        exclude: Option<RouterId>,
    ) -> Vec<RouterId> {
        let Ok(curve) = model.curve(mode) else { return Vec::new() };
        self.routers
            .iter()
            .filter(|r| Some(r.id) != exclude)
            .filter(|r| {
                let d = distance(pos, r.position);
                d > 0.0 && curve.at(d) > 0.0 || d == 0.0
            })
            .map(|r| r.id)
            .collect()
    }

    pub fn neighbors_in_range(
        &self,
        node: NodeId,
        epoch: u32,
        mode: Mode,
        model: &ThroughputModel,
    ) -> Result<Vec<RouterId>, MeshError> {
        let pos = self.position(node, epoch)?;
        let exclude = match node {
            NodeId::Router(r) => Some(r),
            NodeId::Device(_) => None,
        };
        Ok(self.routers_in_range(pos, mode, model, exclude))
    }

    /// Bounding box of the router grid.
    pub fn extent(&self) -> (Point, Point) {
        (
            Point::new(0.0, 0.0),
            Point::new((self.grid_cols - 1) as f64 * self.spacing, (self.grid_rows - 1) as f64 * self.spacing),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::ModeCurve;

    fn model_with(mode: Mode, cutoff: f64) -> ThroughputModel {
        let mut m = ThroughputModel::default();
        // alpha + beta ln(cutoff) = 0
        m.curves.insert(mode, ModeCurve { alpha: 10.0 * cutoff.ln(), beta: -10.0, cutoff_m: cutoff });
        m
    }

    #[test]
    fn distances() {
        assert_eq!(distance(Point::new(0.0, 0.0), Point::new(0.0, 0.0)), 0.0);
        assert_eq!(distance(Point::new(0.0, 0.0), Point::new(3.0, 4.0)), 5.0);
        let t = MeshTopology::grid(2, 2, 90.0, &[RouterId(0)]).unwrap();
        assert_eq!(distance(t.routers[0].position, t.routers[1].position), 90.0);
    }

    #[test]
    fn grid_neighbor_counts() {
        let t = MeshTopology::grid(2, 2, 90.0, &[RouterId(0)]).unwrap();
        assert_eq!(t.grid_neighbors(RouterId(0)).unwrap().len(), 2);
        let t = MeshTopology::grid(15, 15, 90.0, &[RouterId(7)]).unwrap();
        assert_eq!(t.grid_neighbors(RouterId(16)).unwrap().len(), 4);
        let t = MeshTopology::grid(1, 1, 90.0, &[RouterId(0)]).unwrap();
        assert!(t.grid_neighbors(RouterId(0)).unwrap().is_empty());
        assert_eq!(t.grid_neighbors(RouterId(5)), Err(MeshError::UnknownRouter(5)));
    }

    #[test]
    fn interior_neighbors_are_nearest() {
        let t = MeshTopology::grid(5, 6, 90.0, &[RouterId(0)]).unwrap();
        for r in &t.routers {
            let (row, col) = t.row_col(r.id);
            if row == 0 || col == 0 || row + 1 == t.grid_rows || col + 1 == t.grid_cols {
                continue;
            }
            let mut by_dist: Vec<_> =
                t.routers.iter().filter(|o| o.id != r.id).map(|o| (distance(r.position, o.position), o.id)).collect();
            by_dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut nearest: Vec<_> = by_dist[..4].iter().map(|x| x.1).collect();
            nearest.sort();
            assert_eq!(nearest, t.grid_neighbors(r.id).unwrap());
        }
    }

    #[test]
    fn range_queries() {
        let m = model_with(Mode::AC5, 200.0);
        let t = MeshTopology::grid(3, 3, 90.0, &[RouterId(1)]).unwrap();
        let n = t.neighbors_in_range(NodeId::Router(RouterId(4)), 0, Mode::AC5, &m).unwrap();
        assert_eq!(n.len(), 8);
        assert!(!n.contains(&RouterId(4)));

        let m = model_with(Mode::UC24, 50.0);
        let t = MeshTopology::grid(3, 3, 90.0, &[RouterId(1)])
            .unwrap()
            .with_devices(vec![Device {
                id: DeviceId(1),
                trajectory: Trajectory::stationary(Point::new(10.0, 0.0)),
                above_canopy: false,
            }])
            .unwrap();
        let n = t.neighbors_in_range(NodeId::Device(DeviceId(1)), 0, Mode::UC24, &m).unwrap();
        assert_eq!(n, vec![RouterId(0)]);
        assert!(t.neighbors_in_range(NodeId::Device(DeviceId(2)), 0, Mode::UC24, &m).is_err());

        let empty = MeshTopology { routers: vec![], ..t };
        assert!(empty.routers_in_range(Point::new(0.0, 0.0), Mode::UC24, &m, None).is_empty());
    }

    #[test]
    fn channels_validated() {
        assert!(Channel24::new(6).is_ok());
        assert_eq!(Channel24::new(3), Err(MeshError::InvalidChannel(3)));
        let c: Result<Channel24, _> = serde_json::from_str("7");
        assert!(c.is_err());
    }

    #[test]
    fn random_channels_stay_in_domain() {
        let mut t = MeshTopology::grid(15, 15, 90.0, &default_gateways(15, 3)).unwrap();
        t.assign_random_channels(4);
        assert!(t.routers.iter().all(|r| Channel24::ALL.contains(&r.channel24)));
        assert!(t.routers.iter().all(|r| r.channel5 == MESH_CHANNEL_5));
        let distinct: std::collections::BTreeSet<_> = t.routers.iter().map(|r| r.channel24).collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn gateway_defaults() {
        assert_eq!(default_gateways(15, 3), vec![RouterId(2), RouterId(7), RouterId(12)]);
        assert_eq!(default_gateways(1, 1), vec![RouterId(0)]);
        assert_eq!(default_gateways(2, 5).len(), 2);
        assert_eq!(centered_gateways(15, 3), vec![RouterId(6), RouterId(7), RouterId(8)]);
        assert_eq!(centered_gateways(3, 1), vec![RouterId(1)]);
    }

    #[test]
    fn trajectory_interpolation() {
        let tr = Trajectory {
            waypoints: vec![Waypoint { x: 0.0, y: 0.0, epoch: 2.0 }, Waypoint { x: 10.0, y: 0.0, epoch: 4.0 }],
        };
        assert_eq!(tr.position_at(0.0), Point::new(0.0, 0.0));
        assert_eq!(tr.position_at(3.0), Point::new(5.0, 0.0));
        assert_eq!(tr.position_at(9.0), Point::new(10.0, 0.0));
        assert_eq!(tr.max_speed(), 5.0);
        assert!(!tr.is_static());
    }
}
