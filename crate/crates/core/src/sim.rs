//! Discrete-time simulator.
//!
//! Each epoch the current plan's flows attempt their assigned rates; the
//! delivered rates are the max-min fair allocation in Mbps under one resource
//! unit per live `(node, slot)`, with per-hop throughput scaled by the
//! variation model. Flows whose AP, device or 2.4 GHz relay retunes lose the
//! switch outage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::{flow_footprint, CapacityError, ContentionLedger, HopSpec, Key, Placement, Slot};
use crate::fairness::{max_min_fair, FairFlow};
use crate::mesh::{Channel24, DeviceId, NodeId, Point, RouterId};
use crate::propagation::{Band, Mode, ThroughputModel, VariationModel};
use crate::te::{
    advance_states, flow_hops, initial_channels, EpochPlan, Planner, PlanningInput, Route, TeError, TePlan,
    TopologyCache,
};
use crate::workload::{FlowId, FlowState, FlowStatus, Scenario, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub epoch_length_s: f64,
    pub horizon: u32,
    pub channel_switch_penalty_s: f64,
    pub control_propagation_s: f64,
    pub seed: u64,
    pub variation: VariationModel,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            epoch_length_s: 60.0,
            horizon: 250,
            channel_switch_penalty_s: 5.2,
            control_propagation_s: 1.3,
            seed: 0,
            variation: VariationModel::default(),
        }
    }
}

impl SimParams {
    pub fn is_valid(&self) -> bool {
        self.epoch_length_s > 0.0
            && self.horizon > 0
            && self.channel_switch_penalty_s > 0.0
            && self.control_propagation_s > 0.0
            && self.channel_switch_penalty_s < self.epoch_length_s
            && self.variation.is_valid()
    }

    /// Fraction of an epoch a flow still delivers when its channel switches.
    pub fn switch_factor(&self) -> f64 {
        1.0 - self.channel_switch_penalty_s / self.epoch_length_s
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no plan covers epoch {0}")]
    PlanMissing(u32),
    #[error("invalid simulation parameters")]
    InvalidParams,
    #[error(transparent)]
    Te(#[from] TeError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
}

/// Mutable state carried between epochs.
pub struct World<'a> {
    pub scenario: &'a Scenario,
    pub model: &'a ThroughputModel,
    pub cache: TopologyCache,
    pub states: BTreeMap<FlowId, FlowState>,
    pub router_channels: BTreeMap<RouterId, Channel24>,
    pub device_channels: BTreeMap<DeviceId, Channel24>,
}

impl<'a> World<'a> {
    pub fn new(scenario: &'a Scenario, model: &'a ThroughputModel) -> Result<Self, SimError> {
        Ok(World {
            scenario,
            model,
            cache: TopologyCache::new(&scenario.topology, model)?,
            states: scenario.tasks.iter().map(|t| (t.id, FlowState::new(t))).collect(),
            router_channels: initial_channels(&scenario.topology),
            device_channels: BTreeMap::new(),
        })
    }

    pub fn planning_input(&self, now: u32, window: u32, params: &SimParams) -> PlanningInput<'_> {
        PlanningInput {
            scenario: self.scenario,
            model: self.model,
            cache: &self.cache,
            states: &self.states,
            router_channels: &self.router_channels,
            device_channels: &self.device_channels,
            now,
            window,
            epoch_s: params.epoch_length_s,
            seed: params.seed,
        }
    }
}

/// Outcome of one epoch.
#[derive(Clone, Debug, Default)]
pub struct StepResult {
    pub epoch: u32,
    /// `(flow, assigned, delivered)` for every flow that attempted to send.
    pub flows: Vec<(FlowId, f64, f64)>,
    /// Units used per live key at the delivered rates.
    pub ledger: ContentionLedger,
    pub switched: Vec<FlowId>,
}

/// Advances the world by one epoch under `plan`.
pub fn step(world: &mut World<'_>, plan: &EpochPlan, params: &SimParams) -> Result<StepResult, SimError> {
    let epoch = plan.epoch;
    let topo = &world.scenario.topology;
    let var = &params.variation;
    let mut attempts: Vec<(FlowId, f64, Vec<HopSpec>, bool)> = Vec::new();
    let mut placement = world.cache.routers.clone();
    let tasks: BTreeMap<FlowId, _> = world.scenario.tasks.iter().map(|t| (t.id, t)).collect();
    for a in plan.flows.iter().filter(|a| a.is_scheduled()) {
        let Some(task) = tasks.get(&a.id) else { continue };
        let st = &world.states[&a.id];
        if st.is_finished() || task.request_epoch > epoch || epoch >= task.deadline_epoch {
            continue;
        }
        let (Some(ap), Some(ch)) = (a.ap, a.channel) else { continue };
        let device = topo.device(task.source).map_err(TeError::from)?;
        let pos = device.position(epoch);
        placement.insert(NodeId::Device(device.id), pos);
        let route = Route {
            routers: a.route.clone(),
            bands: (0..a.route.len().saturating_sub(1)).map(|i| a.hop_band(i)).collect(),
        };
        let chans = &plan.router_channels;
        let gain = |i: usize, sender: NodeId| match (i, sender) {
            (0, NodeId::Device(d)) => var.spatial_multiplier(d.0, epoch),
            (_, NodeId::Router(r)) => var.temporal_multiplier(r.0, epoch),
            _ => 1.0,
        };
        let hops = flow_hops(
            device,
            pos,
            ap,
            ch,
            &route,
            topo,
            &|r| chans.get(&r).copied().unwrap_or(Channel24::ALL[0]),
            1.0,
            &gain,
        );
        let retuned = |r: RouterId| world.router_channels.get(&r) != plan.router_channels.get(&r);
        let mut switched = retuned(ap) || world.device_channels.get(&device.id).is_some_and(|c| *c != ch);
        for (i, pair) in a.route.windows(2).enumerate() {
            if a.hop_band(i) == Band::GHz24 {
                switched |= retuned(pair[0]) || retuned(pair[1]);
            }
        }
        attempts.push((a.id, a.rate_mbps, hops, switched));
    }

    let mut footprints = Vec::with_capacity(attempts.len());
    for (_, _, hops, _) in &attempts {
        footprints.push(flow_footprint(hops, &placement, world.model)?);
    }
    let mut keys: BTreeMap<Key, usize> = BTreeMap::new();
    for fp in &footprints {
        for k in &fp.endpoints {
            let n = keys.len();
            keys.entry(*k).or_insert(n);
        }
    }
    let fair: Vec<FairFlow> = attempts
        .iter()
        .zip(&footprints)
        .map(|((_, rate, _, _), fp)| FairFlow {
            cap: *rate,
            coefs: fp.units.iter().filter_map(|(k, v)| keys.get(k).map(|i| (*i, *v))).collect(),
        })
        .collect();
    let rates = max_min_fair(&vec![1.0; keys.len()], &fair);

    let mut out = StepResult { epoch, ..Default::default() };
    let mut delivered = BTreeMap::new();
    for (((id, assigned, _, switched), fp), r) in attempts.iter().zip(&footprints).zip(&rates) {
        if *r > 0.0 {
            out.ledger.add(*id, fp.scaled(*r));
        }
        let d = if *switched { r * params.switch_factor() } else { *r };
        if *switched {
            out.switched.push(*id);
        }
        out.flows.push((*id, *assigned, d));
        delivered.insert(*id, d);
    }
    advance_states(&mut world.states, &world.scenario.tasks, plan, &delivered, params.epoch_length_s);
    for a in plan.flows.iter().filter(|a| a.is_scheduled() && delivered.contains_key(&a.id)) {
        if let (Some(t), Some(ch)) = (tasks.get(&a.id), a.channel) {
            world.device_channels.insert(t.source, ch);
        }
    }
    world.router_channels = plan.router_channels.clone();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub flow_id: FlowId,
    pub epoch: u32,
    pub assigned_mbps: f64,
    pub delivered_mbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub id: FlowId,
    pub kind: TaskKind,
    pub demand_mbps: Option<f64>,
    pub delivered_mb: f64,
    pub active_epochs: u32,
    /// Epochs between request and first delivery (or the end of the run).
    pub waiting_epochs: u32,
    /// Mean delivered/demand over active epochs; real-time flows only.
    pub normalized_throughput: Option<f64>,
    pub status: FlowStatus,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilRow {
    pub epoch: u32,
    pub node: NodeId,
    pub slot: Slot,
    pub units: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub horizon: u32,
    pub epoch_length_s: f64,
    pub series: Vec<SeriesRow>,
    pub flows: Vec<FlowSummary>,
    pub realtime_mb: f64,
    pub collection_mb: f64,
    pub total_mb: f64,
    pub violations: u32,
    #[serde(skip)]
    pub utilization: Vec<UtilRow>,
}

impl SimReport {
    /// Normalized throughput of every real-time flow; flows that never ran count as 0.
    pub fn normalized_throughputs(&self) -> Vec<f64> {
        self.flows
            .iter()
            .filter(|f| f.kind == TaskKind::RealTime)
            .map(|f| f.normalized_throughput.unwrap_or(0.0))
            .collect()
    }

    pub fn median_normalized(&self) -> f64 {
        median(&self.normalized_throughputs())
    }

    pub fn mean_normalized(&self) -> f64 {
        let v = self.normalized_throughputs();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Median with midpoint interpolation; 0 for an empty slice.
pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

/// Linear-interpolated quantile; 0 for an empty slice.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// What the caller sees after every epoch.
pub struct EpochRecord<'a> {
    pub plan: &'a EpochPlan,
    /// Set on epochs where the planner was invoked.
    pub invocation: Option<&'a TePlan>,
    pub step: &'a StepResult,
}

pub fn run(
    scenario: &Scenario,
    planner: &dyn Planner,
    params: &SimParams,
    model: &ThroughputModel,
) -> Result<SimReport, SimError> {
    run_observed(scenario, planner, params, model, &mut |_| {})
}

/// [`run`] with a callback per epoch, used for plan and ledger dumps.
pub fn run_observed(
    scenario: &Scenario,
    planner: &dyn Planner,
    params: &SimParams,
    model: &ThroughputModel,
    observe: &mut dyn FnMut(&EpochRecord<'_>),
) -> Result<SimReport, SimError> {
    if !params.is_valid() {
        return Err(SimError::InvalidParams);
    }
    let mut world = World::new(scenario, model)?;
    let horizon = params.horizon;
    let period = planner.period().max(1);
    let mut report = SimReport { horizon, epoch_length_s: params.epoch_length_s, ..Default::default() };
    let mut plan: Option<TePlan> = None;
    for e in 0..horizon {
        let invoked = e % period == 0;
        if invoked {
            let window = period.min(horizon - e);
            plan = Some(planner.plan(&world.planning_input(e, window, params)));
        }
        let current = plan.as_ref().and_then(|p| p.epoch(e)).ok_or(SimError::PlanMissing(e))?.clone();
        if e == 0 {
            // Channels are configured before traffic starts.
            world.router_channels = current.router_channels.clone();
        }
        let res = step(&mut world, &current, params)?;
        for (id, assigned, delivered) in &res.flows {
            report.series.push(SeriesRow {
                flow_id: *id,
                epoch: e,
                assigned_mbps: *assigned,
                delivered_mbps: *delivered,
            });
        }
        for (key, units, live) in res.ledger.entries() {
            if live {
                report.utilization.push(UtilRow { epoch: e, node: key.0, slot: key.1, units });
            }
        }
        observe(&EpochRecord { plan: &current, invocation: if invoked { plan.as_ref() } else { None }, step: &res });
    }
    finish_report(&mut report, scenario, &world.states, params);
    Ok(report)
}

fn finish_report(
    report: &mut SimReport,
    scenario: &Scenario,
    states: &BTreeMap<FlowId, FlowState>,
    params: &SimParams,
) {
    let mb = |mbps: f64| mbps * params.epoch_length_s / 8.0;
    let mut per_flow: BTreeMap<FlowId, Vec<&SeriesRow>> = BTreeMap::new();
    for row in &report.series {
        per_flow.entry(row.flow_id).or_default().push(row);
    }
    for t in &scenario.tasks {
        let rows = per_flow.get(&t.id).map(Vec::as_slice).unwrap_or(&[]);
        let delivered_mb: f64 = rows.iter().map(|r| mb(r.delivered_mbps)).sum();
        let active = rows.len() as u32;
        let first = rows.first().map(|r| r.epoch).unwrap_or(report.horizon);
        let normalized = match (t.kind, t.demand_mbps) {
            (TaskKind::RealTime, Some(d)) if active > 0 => {
                Some(rows.iter().map(|r| r.delivered_mbps / d).sum::<f64>() / active as f64)
            }
            _ => None,
        };
        let status = states.get(&t.id).map(|s| s.status).unwrap_or(FlowStatus::Pending);
        let violated = status == FlowStatus::Expired;
        if violated {
            report.violations += 1;
        }
        match t.kind {
            TaskKind::RealTime => report.realtime_mb += delivered_mb,
            TaskKind::DataCollection => report.collection_mb += delivered_mb,
        }
        report.flows.push(FlowSummary {
            id: t.id,
            kind: t.kind,
            demand_mbps: t.demand_mbps,
            delivered_mb,
            active_epochs: active,
            waiting_epochs: first.saturating_sub(t.request_epoch),
            normalized_throughput: normalized,
            status,
            violated,
        });
    }
    report.total_mb = report.series.iter().map(|r| mb(r.delivered_mbps)).sum();
}

/// Saturating end-to-end rate of one flow over a straight chain of `n_hops`
/// 5 GHz mesh hops at `spacing`.
pub fn chain_throughput(n_hops: u32, spacing: f64, model: &ThroughputModel) -> Result<f64, CapacityError> {
    if n_hops == 0 {
        return Err(CapacityError::BadRate(0.0));
    }
    let pos = |i: u32| Point::new(i as f64 * spacing, 0.0);
    let mut placement = Placement::new();
    for i in 0..=n_hops {
        placement.insert(NodeId::Router(RouterId(i)), pos(i));
    }
    let hops: Vec<HopSpec> = (0..n_hops)
        .map(|i| HopSpec {
            src: NodeId::Router(RouterId(i)),
            dst: NodeId::Router(RouterId(i + 1)),
            src_pos: pos(i),
            dst_pos: pos(i + 1),
            mode: Mode::AC5,
            slot: Slot::Mesh5,
            rate: 1.0,
            gain: 1.0,
        })
        .collect();
    let fp = flow_footprint(&hops, &placement, model)?;
    let keys: Vec<Key> = fp.endpoints.iter().copied().collect();
    let coefs = keys.iter().enumerate().map(|(i, k)| (i, fp.get(k))).collect();
    Ok(max_min_fair(&vec![1.0; keys.len()], &[FairFlow { cap: f64::INFINITY, coefs }])[0])
}
