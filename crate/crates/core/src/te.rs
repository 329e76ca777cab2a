//! Centralized traffic engineering.
//!
//! The engine plans a window of epochs at every invocation. Each epoch is
//! planned from scratch: zero-slack real-time flows are forced in, remaining
//! real-time flows are admitted in slack order if their full-demand footprint
//! fits, admitted flows get max-min fair rates under the headroom, and
//! data-collection flows water-fill what is left.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::{flow_footprint, CapacityError, ContentionLedger, HopSpec, Placement, ResourceFootprint, Slot};
use crate::fairness::{max_min_fair, FairFlow};
use crate::mesh::{distance, Channel24, Device, DeviceId, MeshError, MeshTopology, NodeId, Point, RouterId};
use crate::propagation::{derive_seed, Band, Mode, ModeCurve, ThroughputModel};
use crate::workload::{slack, FlowId, FlowState, FlowStatus, Remaining, Scenario, TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeParams {
    pub invocation_period: u32,
    pub headroom: f64,
    pub hop_epsilon: f64,
    pub channel_switch_penalty_s: f64,
}

impl Default for TeParams {
    fn default() -> Self {
        TeParams { invocation_period: 5, headroom: 0.10, hop_epsilon: 1e-6, channel_switch_penalty_s: 5.2 }
    }
}

impl TeParams {
    pub fn is_valid(&self) -> bool {
        self.invocation_period > 0
            && (0.0..1.0).contains(&self.headroom)
            && self.hop_epsilon > 0.0
            && self.channel_switch_penalty_s > 0.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TeError {
    #[error("no access point in 2.4 GHz range of {0:?}")]
    NoApInRange(Point),
    #[error("no gateway reachable from router {0}")]
    NoGatewayReachable(u32),
    #[error("device leaves coverage at epoch {0}")]
    NoCoverage(u32),
    #[error("throughput model lacks mode {0}")]
    MissingMode(Mode),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Admission {
    /// Every flow runs from its request epoch.
    Immediate,
    /// Slack-ordered admission with forced zero-slack flows.
    Slack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateControl {
    /// Flows send at demand (or line rate) and the network sorts it out.
    Uncontrolled,
    Enforced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApPolicy {
    /// Nearest router on its fixed channel.
    Nearest,
    /// Minimize the contention score over routers and channels.
    Contention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutePolicy {
    MinHopRandom,
    MinHopLowestId,
    Weighted,
}

/// Feature switches that distinguish the planners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knobs {
    pub admission: Admission,
    pub rates: RateControl,
    pub ap: ApPolicy,
    pub routing: RoutePolicy,
    /// Allow router-to-router hops on 2.4 GHz above the canopy.
    pub above_canopy_24: bool,
}

impl Knobs {
    pub const FULL: Knobs = Knobs {
        admission: Admission::Slack,
        rates: RateControl::Enforced,
        ap: ApPolicy::Contention,
        routing: RoutePolicy::Weighted,
        above_canopy_24: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStatus {
    Scheduled,
    Paused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowAssignment {
    pub id: FlowId,
    pub status: PlanStatus,
    pub rate_mbps: f64,
    pub ap: Option<RouterId>,
    pub channel: Option<Channel24>,
    /// From the AP to a gateway.
    pub route: Vec<RouterId>,
    /// Band of each mesh hop when any hop is not on 5 GHz.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mesh_bands: Vec<Band>,
}

impl FlowAssignment {
    fn paused(id: FlowId) -> Self {
        FlowAssignment {
            id,
            status: PlanStatus::Paused,
            rate_mbps: 0.0,
            ap: None,
            channel: None,
            route: Vec::new(),
            mesh_bands: Vec::new(),
        }
    }

    pub fn is_scheduled(&self) -> bool {
        self.status == PlanStatus::Scheduled
    }

    pub fn hop_band(&self, i: usize) -> Band {
        self.mesh_bands.get(i).copied().unwrap_or(Band::GHz5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: u32,
    pub flows: Vec<FlowAssignment>,
    pub router_channels: BTreeMap<RouterId, Channel24>,
}

impl EpochPlan {
    pub fn assignment(&self, id: FlowId) -> Option<&FlowAssignment> {
        self.flows.binary_search_by_key(&id, |a| a.id).ok().map(|i| &self.flows[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TePlan {
    pub invoked_at: u32,
    pub epochs: Vec<EpochPlan>,
}

impl TePlan {
    pub fn epoch(&self, e: u32) -> Option<&EpochPlan> {
        e.checked_sub(self.invoked_at).and_then(|i| self.epochs.get(i as usize))
    }
}

/// Per-topology lookups shared by every invocation of a run.
#[derive(Clone, Debug)]
pub struct TopologyCache {
    pub ac5: ModeCurve,
    pub ac24: ModeCurve,
    pub t_ac5_spacing: f64,
    /// Routers within 5 GHz range of each router, with link throughput.
    pub ac5_neighbors: Vec<Vec<(RouterId, f64)>>,
    /// Routers within above-canopy 2.4 GHz range, with distance.
    pub ac24_neighbors: Vec<Vec<(RouterId, f64)>>,
    pub routers: Placement,
}

impl TopologyCache {
    pub fn new(topo: &MeshTopology, model: &ThroughputModel) -> Result<Self, TeError> {
        let ac5 = *model.curve(Mode::AC5).map_err(|_| TeError::MissingMode(Mode::AC5))?;
        let ac24 = model.curve(Mode::AC24).copied().unwrap_or(ModeCurve { alpha: 0.0, beta: -1.0, cutoff_m: 0.0 });
        let mut ac5_neighbors = Vec::with_capacity(topo.routers.len());
        let mut ac24_neighbors = Vec::with_capacity(topo.routers.len());
        let mut routers = Placement::new();
        for r in &topo.routers {
            routers.insert(NodeId::Router(r.id), r.position);
            let mut n5 = Vec::new();
            let mut n24 = Vec::new();
            for o in &topo.routers {
                if o.id == r.id {
                    continue;
                }
                let d = distance(r.position, o.position);
                let t = ac5.at(d.max(1.0));
                if t > 0.0 {
                    n5.push((o.id, t));
                }
                if ac24.at(d.max(1.0)) > 0.0 {
                    n24.push((o.id, d));
                }
            }
            ac5_neighbors.push(n5);
            ac24_neighbors.push(n24);
        }
        Ok(TopologyCache {
            ac5,
            ac24,
            t_ac5_spacing: ac5.at(topo.spacing.max(1.0)),
            ac5_neighbors,
            ac24_neighbors,
            routers,
        })
    }
}

/// 2.4 GHz channels in effect plus the ones pinned during the current plan.
#[derive(Clone, Debug)]
pub struct ChannelState {
    base: BTreeMap<RouterId, Channel24>,
    committed: BTreeMap<RouterId, Channel24>,
    /// Channels never change (baselines with per-run random channels).
    pub fixed: bool,
}

impl ChannelState {
    pub fn new(base: BTreeMap<RouterId, Channel24>, fixed: bool) -> Self {
        ChannelState { base, committed: BTreeMap::new(), fixed }
    }

    pub fn channel(&self, r: RouterId) -> Channel24 {
        self.committed.get(&r).or_else(|| self.base.get(&r)).copied().unwrap_or(Channel24::ALL[0])
    }

    pub fn current(&self, r: RouterId) -> Option<Channel24> {
        self.base.get(&r).copied()
    }

    pub fn is_committed(&self, r: RouterId) -> bool {
        self.fixed || self.committed.contains_key(&r)
    }

    pub fn commit(&mut self, r: RouterId, c: Channel24) {
        if !self.fixed {
            self.committed.insert(r, c);
        }
    }

    pub fn snapshot(&self) -> BTreeMap<RouterId, Channel24> {
        let mut m = self.base.clone();
        m.extend(self.committed.iter().map(|(k, v)| (*k, *v)));
        m
    }
}

/// Initial channels of a topology as a map.
pub fn initial_channels(topo: &MeshTopology) -> BTreeMap<RouterId, Channel24> {
    topo.routers.iter().map(|r| (r.id, r.channel24)).collect()
}

fn ties(a: f64, b: f64) -> bool {
    a.is_finite() && b.is_finite() && (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApSelection {
    pub ap: RouterId,
    pub channel: Channel24,
    pub score: f64,
}

/// Nearest router in access range, lowest id on ties.
pub fn nearest_ap(src: Point, access: Mode, topo: &MeshTopology, model: &ThroughputModel) -> Result<RouterId, TeError> {
    let curve = model.curve(access).map_err(|_| TeError::MissingMode(access))?;
    topo.routers
        .iter()
        .map(|r| (distance(src, r.position), r.id))
        .filter(|(d, _)| curve.at(d.max(1.0)) > 0.0)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|x| x.1)
        .ok_or(TeError::NoApInRange(src))
}

/// Contention score of every admissible `(AP, channel)` pair.
pub fn ap_scores(
    src: Point,
    demand: f64,
    access: Mode,
    sticky: Option<Channel24>,
    topo: &MeshTopology,
    model: &ThroughputModel,
    ledger: &ContentionLedger,
    channels: &ChannelState,
) -> Result<Vec<(ApSelection, f64)>, TeError> {
    let curve = model.curve(access).map_err(|_| TeError::MissingMode(access))?;
    let in_range: Vec<(RouterId, f64, f64)> = topo
        .routers
        .iter()
        .map(|r| {
            let d = distance(src, r.position);
            (r.id, d, curve.at(d.max(1.0)))
        })
        .filter(|x| x.2 > 0.0)
        .collect();
    if in_range.is_empty() {
        return Err(TeError::NoApInRange(src));
    }
    let mut out = Vec::new();
    for pass_sticky in [sticky, None] {
        for &(ap, d_ap, t_ap) in &in_range {
            let r_ap = demand / t_ap;
            let options: Vec<Channel24> =
                if channels.is_committed(ap) { vec![channels.channel(ap)] } else { Channel24::ALL.to_vec() };
            for c in options {
                if pass_sticky.is_some_and(|s| s != c) {
                    continue;
                }
                let slot = Slot::Ch24(c);
                let mut f = r_ap + ledger.committed(&(NodeId::Router(ap), slot));
                for &(rj, _, t_j) in &in_range {
                    if rj == ap || channels.channel(rj) != c {
                        continue;
                    }
                    f += r_ap * (t_j / t_ap).min(1.0) + ledger.committed(&(NodeId::Router(rj), slot));
                }
                out.push((ApSelection { ap, channel: c, score: f }, d_ap));
            }
        }
        if !out.is_empty() {
            break;
        }
    }
    Ok(out)
}

/// Router and channel minimizing the contention score.
///
/// Ties go to the nearer router, then the lower id, then the router's current
/// channel, then the lower channel number.
pub fn select_ap(
    src: Point,
    demand: f64,
    access: Mode,
    sticky: Option<Channel24>,
    topo: &MeshTopology,
    model: &ThroughputModel,
    ledger: &ContentionLedger,
    channels: &ChannelState,
) -> Result<ApSelection, TeError> {
    let scores = ap_scores(src, demand, access, sticky, topo, model, ledger, channels)?;
    let key = |s: &ApSelection| (channels.current(s.ap) != Some(s.channel), s.channel);
    scores
        .into_iter()
        .min_by(|(a, da), (b, db)| {
            if ties(a.score, b.score) {
                da.total_cmp(db).then(a.ap.cmp(&b.ap)).then(key(a).cmp(&key(b)))
            } else {
                a.score.total_cmp(&b.score)
            }
        })
        .map(|x| x.0)
        .ok_or(TeError::NoApInRange(src))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// AP first, gateway last.
    pub routers: Vec<RouterId>,
    /// Band of each hop; `routers.len() - 1` entries.
    pub bands: Vec<Band>,
}

/// Congestion weight of each router for a flow of `demand` Mbps on the 5 GHz mesh.
pub fn mesh_weights(demand: f64, cache: &TopologyCache, ledger: &ContentionLedger) -> Vec<f64> {
    let n = cache.ac5_neighbors.len();
    let c: Vec<f64> = (0..n).map(|i| ledger.committed(&(NodeId::Router(RouterId(i as u32)), Slot::Mesh5))).collect();
    let r = demand / cache.t_ac5_spacing;
    (0..n)
        .map(|i| {
            let own = (c[i] + 2.0 * r - 1.0).max(0.0);
            let nb: f64 = cache.ac5_neighbors[i]
                .iter()
                .map(|(rn, t)| (c[rn.0 as usize] + r * (t / cache.t_ac5_spacing).min(1.0) - 1.0).max(0.0))
                .sum();
            own + nb
        })
        .collect()
}

fn weight_24(
    v: RouterId,
    hop_m: f64,
    demand: f64,
    cache: &TopologyCache,
    ledger: &ContentionLedger,
    channels: &ChannelState,
) -> f64 {
    let t_hop = cache.ac24.at(hop_m.max(1.0));
    if t_hop <= 0.0 {
        return f64::INFINITY;
    }
    let ch = channels.channel(v);
    let slot = Slot::Ch24(ch);
    let r = demand / t_hop;
    let own = (ledger.committed(&(NodeId::Router(v), slot)) + 2.0 * r - 1.0).max(0.0);
    let nb: f64 = cache.ac24_neighbors[v.0 as usize]
        .iter()
        .filter(|(n, _)| channels.channel(*n) == ch)
        .map(|(n, d)| {
            let delta = (cache.ac24.at(d.max(1.0)) / t_hop).min(1.0);
            (ledger.committed(&(NodeId::Router(*n), slot)) + r * delta - 1.0).max(0.0)
        })
        .sum();
    own + nb
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, u32);
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Minimum-cost route from `src` to any gateway.
///
/// Node cost is the congestion weight (zero for the min-hop policies) plus
/// `hop_epsilon` per hop. Equal-cost routes are sampled uniformly with `rng`,
/// or resolved toward lower ids for [`RoutePolicy::MinHopLowestId`].
#[allow(clippy::too_many_arguments)]
pub fn route(
    src: RouterId,
    demand: f64,
    topo: &MeshTopology,
    cache: &TopologyCache,
    ledger: &ContentionLedger,
    channels: &ChannelState,
    params: &TeParams,
    policy: RoutePolicy,
    above_canopy_24: bool,
    rng: &mut impl Rng,
) -> Result<Route, TeError> {
    let n = topo.routers.len();
    if src.0 as usize >= n {
        return Err(TeError::NoGatewayReachable(src.0));
    }
    let w5 = match policy {
        RoutePolicy::Weighted => mesh_weights(demand, cache, ledger),
        _ => vec![0.0; n],
    };
    let mut dist = vec![f64::INFINITY; n];
    let mut preds: Vec<Vec<(u32, Band)>> = vec![Vec::new(); n];
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[src.0 as usize] = 0.0;
    heap.push(HeapItem(0.0, src.0));
    while let Some(HeapItem(d, u)) = heap.pop() {
        let ui = u as usize;
        if done[ui] || d > dist[ui] {
            continue;
        }
        done[ui] = true;
        order.push(u);
        let mut edges: Vec<(u32, Band, f64)> = topo
            .grid_neighbors(RouterId(u))
            .expect("router in grid")
            .into_iter()
            .map(|v| (v.0, Band::GHz5, w5[v.0 as usize]))
            .collect();
        if above_canopy_24 {
            let (ur, uc) = topo.row_col(RouterId(u));
            let ch = channels.channel(RouterId(u));
            for &(v, dm) in &cache.ac24_neighbors[ui] {
                let (vr, vc) = topo.row_col(v);
                if (vr == ur || vc == uc) && channels.channel(v) == ch {
                    let w = match policy {
                        RoutePolicy::Weighted => weight_24(v, dm, demand, cache, ledger, channels),
                        _ => 0.0,
                    };
                    edges.push((v.0, Band::GHz24, w));
                }
            }
        }
        for (v, band, w) in edges {
            let vi = v as usize;
            if done[vi] || !w.is_finite() {
                continue;
            }
            let nd = d + w + params.hop_epsilon;
            if ties(nd, dist[vi]) {
                // Prefer 5 GHz over a 2.4 GHz edge from the same predecessor.
                if let Some(p) = preds[vi].iter_mut().find(|p| p.0 == u) {
                    if band == Band::GHz5 {
                        p.1 = Band::GHz5;
                    }
                } else {
                    preds[vi].push((u, band));
                }
            } else if nd < dist[vi] {
                dist[vi] = nd;
                preds[vi] = vec![(u, band)];
                heap.push(HeapItem(nd, v));
            }
        }
    }
    let mut count = vec![0.0f64; n];
    count[src.0 as usize] = 1.0;
    for &u in &order {
        let ui = u as usize;
        if ui != src.0 as usize {
            count[ui] = preds[ui].iter().map(|(p, _)| count[*p as usize]).sum();
        }
    }
    let best = topo.gateway_ids.iter().map(|g| dist[g.0 as usize]).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(TeError::NoGatewayReachable(src.0));
    }
    let tied: Vec<RouterId> = topo.gateway_ids.iter().copied().filter(|g| ties(dist[g.0 as usize], best)).collect();
    let random = policy != RoutePolicy::MinHopLowestId;
    let pick = |items: &[(u32, Band)], rng: &mut dyn rand::RngCore| -> (u32, Band) {
        if !random || items.len() == 1 {
            return *items.iter().min_by_key(|x| (x.0, x.1 != Band::GHz5)).expect("non-empty");
        }
        let total: f64 = items.iter().map(|x| count[x.0 as usize]).sum();
        let mut t = rng.gen::<f64>() * total;
        for x in items {
            t -= count[x.0 as usize];
            if t < 0.0 {
                return *x;
            }
        }
        *items.last().expect("non-empty")
    };
    let gw_items: Vec<(u32, Band)> = tied.iter().map(|g| (g.0, Band::GHz5)).collect();
    let mut cur = pick(&gw_items, rng).0;
    let mut rev = vec![RouterId(cur)];
    let mut bands = Vec::new();
    while cur != src.0 {
        let (p, b) = pick(&preds[cur as usize], rng);
        rev.push(RouterId(p));
        bands.push(b);
        cur = p;
    }
    rev.reverse();
    bands.reverse();
    Ok(Route { routers: rev, bands })
}

/// Hops of a flow: the access hop followed by the mesh hops.
///
/// `gain` gives a throughput multiplier per hop index (0 = access hop).
#[allow(clippy::too_many_arguments)]
pub fn flow_hops(
    device: &Device,
    dev_pos: Point,
    ap: RouterId,
    channel: Channel24,
    route: &Route,
    topo: &MeshTopology,
    channels: &dyn Fn(RouterId) -> Channel24,
    rate: f64,
    gain: &dyn Fn(usize, NodeId) -> f64,
) -> Vec<HopSpec> {
    let ap_pos = topo.routers[ap.0 as usize].position;
    let dev = NodeId::Device(device.id);
    let mut hops = vec![HopSpec {
        src: dev,
        dst: NodeId::Router(ap),
        src_pos: dev_pos,
        dst_pos: ap_pos,
        mode: device.access_mode(),
        slot: Slot::Ch24(channel),
        rate,
        gain: gain(0, dev),
    }];
    for (i, pair) in route.routers.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let band = route.bands.get(i).copied().unwrap_or(Band::GHz5);
        let (mode, slot) = match band {
            Band::GHz5 => (Mode::AC5, Slot::Mesh5),
            Band::GHz24 => (Mode::AC24, Slot::Ch24(channels(a))),
        };
        hops.push(HopSpec {
            src: NodeId::Router(a),
            dst: NodeId::Router(b),
            src_pos: topo.routers[a.0 as usize].position,
            dst_pos: topo.routers[b.0 as usize].position,
            mode,
            slot,
            rate,
            gain: gain(i + 1, NodeId::Router(a)),
        });
    }
    hops
}

/// Everything the planner may look at.
pub struct PlanningInput<'a> {
    pub scenario: &'a Scenario,
    pub model: &'a ThroughputModel,
    pub cache: &'a TopologyCache,
    pub states: &'a BTreeMap<FlowId, FlowState>,
    pub router_channels: &'a BTreeMap<RouterId, Channel24>,
    pub device_channels: &'a BTreeMap<DeviceId, Channel24>,
    pub now: u32,
    pub window: u32,
    pub epoch_s: f64,
    pub seed: u64,
}

/// A policy that produces plans.
pub trait Planner: Send + Sync {
    fn plan(&self, input: &PlanningInput<'_>) -> TePlan;
    /// Epochs between invocations.
    fn period(&self) -> u32;
}

/// The planning engine, parameterized by [`Knobs`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeEngine {
    pub params: TeParams,
    pub knobs: Knobs,
}

struct Allocation {
    ap: RouterId,
    channel: Channel24,
    route: Route,
    per_mbps: ResourceFootprint,
}

struct EpochCtx<'a> {
    input: &'a PlanningInput<'a>,
    epoch: u32,
    placement: Placement,
}

const TAG_ROUTE: u64 = 0x524f_5554;
const TAG_WATER: u64 = 0x5741_5445;

impl TeEngine {
    pub fn new(params: TeParams, knobs: Knobs) -> Self {
        TeEngine { params, knobs }
    }

    pub fn full(params: TeParams) -> Self {
        TeEngine { params, knobs: Knobs::FULL }
    }

    fn device<'a>(&self, ctx: &'a EpochCtx<'_>, task: &TaskSpec) -> &'a Device {
        ctx.input.scenario.topology.device(task.source).expect("validated scenario")
    }

    #[allow(clippy::too_many_arguments)]
    fn allocate(
        &self,
        ctx: &EpochCtx<'_>,
        task: &TaskSpec,
        demand: f64,
        sticky: Option<Channel24>,
        ap_policy: ApPolicy,
        ledger: &ContentionLedger,
        channels: &ChannelState,
    ) -> Option<Allocation> {
        let input = ctx.input;
        let topo = &input.scenario.topology;
        let device = self.device(ctx, task);
        let pos = device.position(ctx.epoch);
        let access = device.access_mode();
        let (ap, channel) = match ap_policy {
            ApPolicy::Nearest => {
                let ap = nearest_ap(pos, access, topo, input.model).ok()?;
                (ap, channels.channel(ap))
            }
            ApPolicy::Contention => {
                let s = select_ap(pos, demand, access, sticky, topo, input.model, ledger, channels).ok()?;
                (s.ap, s.channel)
            }
        };
        let mut pinned = channels.clone();
        pinned.commit(ap, channel);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(input.seed, &[TAG_ROUTE, task.id.0 as u64, ap.0 as u64]));
        let route = route(
            ap,
            demand,
            topo,
            input.cache,
            ledger,
            &pinned,
            &self.params,
            self.knobs.routing,
            self.knobs.above_canopy_24,
            &mut rng,
        )
        .ok()?;
        let hops = flow_hops(device, pos, ap, channel, &route, topo, &|r| pinned.channel(r), 1.0, &|_, _| 1.0);
        let per_mbps = flow_footprint(&hops, &ctx.placement, input.model).ok()?;
        Some(Allocation { ap, channel, route, per_mbps })
    }

    fn commit(&self, channels: &mut ChannelState, a: &Allocation) {
        channels.commit(a.ap, a.channel);
        for (i, pair) in a.route.routers.windows(2).enumerate() {
            if a.route.bands.get(i) == Some(&Band::GHz24) {
                let c = channels.channel(pair[0]);
                channels.commit(pair[0], c);
                channels.commit(pair[1], c);
            }
        }
    }

    fn assignment(id: FlowId, rate: f64, a: &Allocation) -> FlowAssignment {
        let mesh_bands =
            if a.route.bands.iter().all(|b| *b == Band::GHz5) { Vec::new() } else { a.route.bands.clone() };
        FlowAssignment {
            id,
            status: PlanStatus::Scheduled,
            rate_mbps: rate,
            ap: Some(a.ap),
            channel: Some(a.channel),
            route: a.route.routers.clone(),
            mesh_bands,
        }
    }

    /// Line rate a collection flow would push on its access hop.
    fn line_rate(&self, ctx: &EpochCtx<'_>, task: &TaskSpec, state: &FlowState) -> f64 {
        let input = ctx.input;
        let device = self.device(ctx, task);
        let pos = device.position(ctx.epoch);
        let t = nearest_ap(pos, device.access_mode(), &input.scenario.topology, input.model)
            .ok()
            .and_then(|ap| {
                let d = distance(pos, input.scenario.topology.routers[ap.0 as usize].position);
                input.model.curve(device.access_mode()).ok().map(|c| c.at(d.max(1.0)))
            })
            .unwrap_or(0.0);
        t.min(state.remaining_mb() * 8.0 / input.epoch_s)
    }

    fn plan_epoch(
        &self,
        input: &PlanningInput<'_>,
        states: &BTreeMap<FlowId, FlowState>,
        router_channels: &BTreeMap<RouterId, Channel24>,
        device_channels: &BTreeMap<DeviceId, Channel24>,
        running: &BTreeSet<FlowId>,
        epoch: u32,
    ) -> EpochPlan {
        let topo = &input.scenario.topology;
        let visible: Vec<&TaskSpec> = input
            .scenario
            .tasks
            .iter()
            .filter(|t| t.request_epoch <= epoch && states.get(&t.id).is_some_and(|s| !s.is_finished()))
            .collect();
        let mut placement = input.cache.routers.clone();
        for t in &visible {
            let d = topo.device(t.source).expect("validated scenario");
            placement.insert(NodeId::Device(d.id), d.position(epoch));
        }
        let ctx = EpochCtx { input, epoch, placement };
        let mut channels = ChannelState::new(router_channels.clone(), self.knobs.ap == ApPolicy::Nearest);
        let mut out: BTreeMap<FlowId, FlowAssignment> = BTreeMap::new();

        if self.knobs.admission == Admission::Immediate {
            let empty = ContentionLedger::new();
            for t in &visible {
                let st = &states[&t.id];
                let demand = match t.kind {
                    TaskKind::RealTime => t.demand(),
                    TaskKind::DataCollection => self.line_rate(&ctx, t, st),
                };
                let a = if demand > 0.0 {
                    self.allocate(&ctx, t, demand, None, self.knobs.ap, &empty, &channels)
                } else {
                    None
                };
                match a {
                    Some(a) => {
                        self.commit(&mut channels, &a);
                        out.insert(t.id, Self::assignment(t.id, demand, &a));
                    }
                    None => {
                        out.insert(t.id, FlowAssignment::paused(t.id));
                    }
                }
            }
            return EpochPlan { epoch, flows: out.into_values().collect(), router_channels: channels.snapshot() };
        }

        let h = self.params.headroom;
        let sticky = |t: &TaskSpec| -> Option<Channel24> {
            (t.is_realtime() && running.contains(&t.id)).then(|| device_channels.get(&t.source).copied()).flatten()
        };

        struct Cand<'t> {
            task: &'t TaskSpec,
            slack: f64,
            demand: f64,
        }
        let mut zero = Vec::new();
        let mut run_list = Vec::new();
        let mut pending = Vec::new();
        let mut background = Vec::new();
        for t in &visible {
            let st = &states[&t.id];
            let s = slack(t, st, epoch, input.epoch_s);
            match t.kind {
                TaskKind::RealTime => {
                    let c = Cand { task: t, slack: s, demand: t.demand() };
                    if s <= 1e-9 {
                        zero.push(c);
                    } else if running.contains(&t.id) {
                        run_list.push(c);
                    } else {
                        pending.push(c);
                    }
                }
                TaskKind::DataCollection => {
                    let left = t.deadline_epoch.saturating_sub(epoch);
                    if left > 0 && s <= self.params.invocation_period as f64 {
                        let need = st.remaining_mb() * 8.0 / (left as f64 * input.epoch_s);
                        pending.push(Cand { task: t, slack: s, demand: need });
                    } else {
                        background.push(*t);
                    }
                }
            }
        }
        zero.sort_by(|a, b| b.demand.total_cmp(&a.demand).then(a.task.id.cmp(&b.task.id)));
        let by_slack = |a: &Cand<'_>, b: &Cand<'_>| a.slack.total_cmp(&b.slack).then(a.task.id.cmp(&b.task.id));
        run_list.sort_by(by_slack);
        pending.sort_by(by_slack);

        let mut ledger = ContentionLedger::new();
        let mut ledger_nz = ContentionLedger::new();
        let mut admitted: Vec<(FlowId, f64, Allocation)> = Vec::new();

        for c in &zero {
            match self.allocate(&ctx, c.task, c.demand, sticky(c.task), self.knobs.ap, &ledger, &channels) {
                Some(a) => {
                    ledger.add(c.task.id, a.per_mbps.scaled(c.demand));
                    self.commit(&mut channels, &a);
                    admitted.push((c.task.id, c.demand, a));
                }
                None => {
                    out.insert(c.task.id, FlowAssignment::paused(c.task.id));
                }
            }
        }
        for c in &run_list {
            let Some(a) = self.allocate(&ctx, c.task, c.demand, sticky(c.task), self.knobs.ap, &ledger, &channels)
            else {
                out.insert(c.task.id, FlowAssignment::paused(c.task.id));
                continue;
            };
            let fp = a.per_mbps.scaled(c.demand);
            let keep = ledger.fits(&fp, h) || !c.task.preemptible || !ledger_nz.fits(&fp, h);
            if keep {
                ledger.add(c.task.id, fp.clone());
                ledger_nz.add(c.task.id, fp);
                self.commit(&mut channels, &a);
                admitted.push((c.task.id, c.demand, a));
            } else {
                out.insert(c.task.id, FlowAssignment::paused(c.task.id));
            }
        }
        let mut urgent_rejected = Vec::new();
        for c in &pending {
            let admit = self
                .allocate(&ctx, c.task, c.demand, sticky(c.task), self.knobs.ap, &ledger, &channels)
                .filter(|a| ledger.fits(&a.per_mbps.scaled(c.demand), h));
            match admit {
                Some(a) => {
                    let fp = a.per_mbps.scaled(c.demand);
                    ledger.add(c.task.id, fp.clone());
                    ledger_nz.add(c.task.id, fp);
                    self.commit(&mut channels, &a);
                    admitted.push((c.task.id, c.demand, a));
                }
                None if c.task.is_realtime() => {
                    out.insert(c.task.id, FlowAssignment::paused(c.task.id));
                }
                None => urgent_rejected.push(c.task),
            }
        }

        let rates = match self.knobs.rates {
            RateControl::Enforced => {
                assign_rates_realtime(&admitted.iter().map(|(_, d, a)| (*d, &a.per_mbps)).collect::<Vec<_>>(), h)
            }
            RateControl::Uncontrolled => admitted.iter().map(|(_, d, _)| *d).collect(),
        };
        let mut ledger = ContentionLedger::new();
        for ((id, _, a), r) in admitted.iter().zip(&rates) {
            if *r > 0.0 {
                ledger.add(*id, a.per_mbps.scaled(*r));
            }
            out.insert(*id, Self::assignment(*id, *r, a));
        }

        background.extend(urgent_rejected);
        background.sort_by_key(|t| t.id);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(input.seed, &[TAG_WATER, epoch as u64]));
        background.shuffle(&mut rng);
        for t in background {
            let st = &states[&t.id];
            let desired = self.line_rate(&ctx, t, st);
            let cap = st.remaining_mb() * 8.0 / input.epoch_s;
            let alloc = if desired > 0.0 {
                self.allocate(&ctx, t, desired, None, ApPolicy::Nearest, &ledger, &channels)
            } else {
                None
            };
            let Some(a) = alloc else {
                out.insert(t.id, FlowAssignment::paused(t.id));
                continue;
            };
            let r = match self.knobs.rates {
                RateControl::Enforced => ledger.max_fitting_rate(&a.per_mbps, h).min(cap),
                RateControl::Uncontrolled => desired,
            };
            if r > 1e-9 {
                ledger.add(t.id, a.per_mbps.scaled(r));
                self.commit(&mut channels, &a);
                out.insert(t.id, Self::assignment(t.id, r, &a));
            } else {
                out.insert(t.id, FlowAssignment::paused(t.id));
            }
        }
        EpochPlan { epoch, flows: out.into_values().collect(), router_channels: channels.snapshot() }
    }

    /// Moves a handover target's channel switch one epoch earlier when the
    /// target router is idle then, so the switch costs no delivery.
    /// Moves each retune one epoch earlier when the router carries no
    /// 2.4 GHz traffic in that epoch, so no flow sees the outage.
    fn preswitch(&self, plan: &mut TePlan) {
        for k in 1..plan.epochs.len() {
            let (before, after) = plan.epochs.split_at_mut(k);
            let prev = &mut before[k - 1];
            let cur = &after[0];
            let busy: BTreeSet<RouterId> = prev
                .flows
                .iter()
                .filter(|a| a.is_scheduled())
                .flat_map(|a| {
                    let mut v: Vec<RouterId> = a.ap.into_iter().collect();
                    for (i, pair) in a.route.windows(2).enumerate() {
                        if a.hop_band(i) == Band::GHz24 {
                            v.extend_from_slice(pair);
                        }
                    }
                    v
                })
                .collect();
            for (r, ch) in &cur.router_channels {
                if prev.router_channels.get(r) != Some(ch) && !busy.contains(r) {
                    prev.router_channels.insert(*r, *ch);
                }
            }
        }
    }
}

/// Max-min fair rates for admitted real-time flows, capped at demand, under `1 - headroom`
/// at every key where some admitted flow transmits or receives.
pub fn assign_rates_realtime(flows: &[(f64, &ResourceFootprint)], headroom: f64) -> Vec<f64> {
    let mut keys: BTreeMap<(NodeId, Slot), usize> = BTreeMap::new();
    for (_, fp) in flows {
        for k in &fp.endpoints {
            let n = keys.len();
            keys.entry(*k).or_insert(n);
        }
    }
    let fair: Vec<FairFlow> = flows
        .iter()
        .map(|(d, fp)| FairFlow {
            cap: *d,
            coefs: fp.units.iter().filter_map(|(k, v)| keys.get(k).map(|i| (*i, *v))).collect(),
        })
        .collect();
    max_min_fair(&vec![1.0 - headroom; keys.len()], &fair)
}

/// Advances planner-side flow states by one planned epoch.
pub fn advance_states(
    states: &mut BTreeMap<FlowId, FlowState>,
    tasks: &[TaskSpec],
    plan: &EpochPlan,
    delivered: &BTreeMap<FlowId, f64>,
    epoch_s: f64,
) {
    for t in tasks {
        let Some(st) = states.get_mut(&t.id) else { continue };
        if st.is_finished() || t.request_epoch > plan.epoch {
            continue;
        }
        let a = plan.assignment(t.id);
        match a {
            Some(a) if a.is_scheduled() => {
                let got = delivered.get(&t.id).copied().unwrap_or(0.0);
                st.status = FlowStatus::Active;
                st.last_rate = Some(a.rate_mbps);
                st.history.push((plan.epoch, got));
                st.remaining = match st.remaining {
                    Remaining::Epochs(e) => Remaining::Epochs(e.saturating_sub(1)),
                    Remaining::Megabytes(mb) => {
                        let left = mb - got * epoch_s / 8.0;
                        Remaining::Megabytes(if left <= 1e-9 { 0.0 } else { left })
                    }
                };
            }
            _ => {
                if st.status == FlowStatus::Active {
                    st.status = FlowStatus::Paused;
                }
            }
        }
        let done = match st.remaining {
            Remaining::Epochs(e) => e == 0,
            Remaining::Megabytes(mb) => mb <= 0.0,
        };
        if done {
            st.status = FlowStatus::Done;
        } else if plan.epoch + 1 >= t.deadline_epoch {
            st.status = FlowStatus::Expired;
        }
    }
}

impl Planner for TeEngine {
    fn period(&self) -> u32 {
        match self.knobs.admission {
            Admission::Immediate => 1,
            Admission::Slack => self.params.invocation_period,
        }
    }

    fn plan(&self, input: &PlanningInput<'_>) -> TePlan {
        let mut states = input.states.clone();
        let mut rch = input.router_channels.clone();
        let mut dch = input.device_channels.clone();
        let mut running: BTreeSet<FlowId> =
            states.iter().filter(|(_, s)| s.status == FlowStatus::Active).map(|(id, _)| *id).collect();
        let mut plan = TePlan { invoked_at: input.now, epochs: Vec::with_capacity(input.window as usize) };
        for e in input.now..input.now + input.window {
            let ep = self.plan_epoch(input, &states, &rch, &dch, &running, e);
            let delivered: BTreeMap<FlowId, f64> =
                ep.flows.iter().filter(|a| a.is_scheduled()).map(|a| (a.id, a.rate_mbps)).collect();
            advance_states(&mut states, &input.scenario.tasks, &ep, &delivered, input.epoch_s);
            running = delivered.keys().copied().collect();
            for a in ep.flows.iter().filter(|a| a.is_scheduled()) {
                if let (Some(ch), Ok(t)) = (a.channel, find_task(&input.scenario.tasks, a.id)) {
                    dch.insert(t.source, ch);
                }
            }
            rch = ep.router_channels.clone();
            plan.epochs.push(ep);
        }
        self.preswitch(&mut plan);
        plan
    }
}

fn find_task(tasks: &[TaskSpec], id: FlowId) -> Result<&TaskSpec, ()> {
    tasks.iter().find(|t| t.id == id).ok_or(())
}

/// Attachment of a moving device over a range of epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct MobilityPlan {
    pub attachments: Vec<(u32, RouterId)>,
    /// `(epoch, from, to)`.
    pub handovers: Vec<(u32, RouterId, RouterId)>,
    /// `(epoch, router, channel)`: router retunes at the start of `epoch`.
    pub channel_switches: Vec<(u32, RouterId, Channel24)>,
}

/// Handovers for a device that follows its trajectory over `epochs`.
///
/// With `device_channel` set (a running real-time flow) the device keeps its
/// channel and each new AP is retuned one epoch before the handover. Without
/// it the device simply follows the AP's channel.
#[allow(clippy::too_many_arguments)]
pub fn plan_mobility(
    device: &Device,
    epochs: std::ops::Range<u32>,
    demand: f64,
    device_channel: Option<Channel24>,
    topo: &MeshTopology,
    model: &ThroughputModel,
    router_channels: &BTreeMap<RouterId, Channel24>,
) -> Result<MobilityPlan, TeError> {
    let ledger = ContentionLedger::new();
    let channels = ChannelState::new(router_channels.clone(), false);
    let start = epochs.start;
    let mut attachments = Vec::new();
    let mut handovers = Vec::new();
    let mut channel_switches = Vec::new();
    for e in epochs {
        let pos = device.position(e);
        let ap = match device_channel {
            Some(c) => {
                select_ap(pos, demand, device.access_mode(), Some(c), topo, model, &ledger, &channels)
                    .map_err(|_| TeError::NoCoverage(e))?
                    .ap
            }
            None => nearest_ap(pos, device.access_mode(), topo, model).map_err(|_| TeError::NoCoverage(e))?,
        };
        if let Some(&(_, prev)) = attachments.last() {
            if prev != ap {
                handovers.push((e, prev, ap));
                if let Some(c) = device_channel {
                    if channels.channel(ap) != c {
                        channel_switches.push((e.saturating_sub(1).max(start), ap, c));
                    }
                }
            }
        } else if let Some(c) = device_channel {
            if channels.channel(ap) != c {
                channel_switches.push((e, ap, c));
            }
        }
        attachments.push((e, ap));
    }
    Ok(MobilityPlan { attachments, handovers, channel_switches })
}

/// Structural checks on a plan: complete knobs, connected routes ending at a gateway,
/// and channels consistent with the router channel map.
pub fn validate_plan(plan: &TePlan, topo: &MeshTopology) -> Result<(), String> {
    for ep in &plan.epochs {
        for a in ep.flows.iter().filter(|a| a.is_scheduled()) {
            let (Some(ap), Some(ch)) = (a.ap, a.channel) else {
                return Err(format!("flow {} scheduled without AP/channel", a.id));
            };
            if a.route.first() != Some(&ap) {
                return Err(format!("flow {} route does not start at its AP", a.id));
            }
            if !a.route.last().is_some_and(|g| topo.is_gateway(*g)) {
                return Err(format!("flow {} route does not end at a gateway", a.id));
            }
            for (i, pair) in a.route.windows(2).enumerate() {
                let adjacent = topo.grid_neighbors(pair[0]).map_err(|e| e.to_string())?.contains(&pair[1]);
                if a.hop_band(i) == Band::GHz5 && !adjacent {
                    return Err(format!("flow {} route is not a grid path", a.id));
                }
            }
            if ep.router_channels.get(&ap) != Some(&ch) {
                return Err(format!("flow {} channel differs from its AP's", a.id));
            }
            if !(a.rate_mbps >= 0.0) {
                return Err(format!("flow {} has a negative rate", a.id));
            }
        }
    }
    Ok(())
}
