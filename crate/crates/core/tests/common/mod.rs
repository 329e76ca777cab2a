#![allow(dead_code)]

use std::collections::BTreeMap;

use cropmesh_core::capacity::{flow_footprint, ContentionLedger, Placement};
use cropmesh_core::mesh::{Channel24, Device, DeviceId, MeshTopology, NodeId, Point, RouterId, Trajectory};
use cropmesh_core::propagation::ThroughputModel;
use cropmesh_core::sim::SimParams;
use cropmesh_core::te::{flow_hops, EpochPlan, FlowAssignment, PlanStatus, Route};
use cropmesh_core::workload::{FlowId, Scenario, TaskKind, TaskSpec};
use cropmesh_core::VariationModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ch(n: u8) -> Channel24 {
    Channel24::new(n).unwrap()
}

pub fn static_device(id: u32, p: Point) -> Device {
    Device { id: DeviceId(id), trajectory: Trajectory::stationary(p), above_canopy: false }
}

pub fn rt_task(id: u32, demand: f64, request: u32, duration: u32, deadline: u32) -> TaskSpec {
    TaskSpec {
        id: FlowId(id),
        kind: TaskKind::RealTime,
        source: DeviceId(id),
        request_epoch: request,
        demand_mbps: Some(demand),
        data_volume_mb: None,
        duration_epochs: Some(duration),
        deadline_epoch: deadline,
        preemptible: true,
    }
}

pub fn dc_task(id: u32, mb: f64, request: u32, deadline: u32) -> TaskSpec {
    TaskSpec {
        id: FlowId(id),
        kind: TaskKind::DataCollection,
        source: DeviceId(id),
        request_epoch: request,
        demand_mbps: None,
        data_volume_mb: Some(mb),
        duration_epochs: None,
        deadline_epoch: deadline,
        preemptible: true,
    }
}

/// Scenario on a grid with one device per task (device id = task id).
pub fn scenario(topo: MeshTopology, devices: Vec<Device>, tasks: Vec<TaskSpec>, horizon: u32) -> Scenario {
    let s = Scenario { topology: topo.with_devices(devices).unwrap(), tasks, horizon, clusters: vec![] };
    s.validate().unwrap();
    s
}

pub fn quiet_params(horizon: u32) -> SimParams {
    SimParams { horizon, variation: VariationModel::none(), ..SimParams::default() }
}

/// Single-hop assignment: the device's AP is its gateway.
pub fn direct(id: u32, rate: f64, ap: u32, channel: Channel24) -> FlowAssignment {
    FlowAssignment {
        id: FlowId(id),
        status: PlanStatus::Scheduled,
        rate_mbps: rate,
        ap: Some(RouterId(ap)),
        channel: Some(channel),
        route: vec![RouterId(ap)],
        mesh_bands: vec![],
    }
}

pub fn epoch_plan(epoch: u32, mut flows: Vec<FlowAssignment>, channels: &[(u32, Channel24)]) -> EpochPlan {
    flows.sort_by_key(|a| a.id);
    EpochPlan { epoch, flows, router_channels: channels.iter().map(|&(r, c)| (RouterId(r), c)).collect() }
}

/// Ledger of the scheduled flows of `kind` in `plan`, at planned rates and nominal throughput.
pub fn plan_ledger(scenario: &Scenario, plan: &EpochPlan, model: &ThroughputModel, kind: TaskKind) -> ContentionLedger {
    let topo = &scenario.topology;
    let tasks: BTreeMap<FlowId, &TaskSpec> = scenario.tasks.iter().map(|t| (t.id, t)).collect();
    let mut placement = Placement::new();
    for r in &topo.routers {
        placement.insert(NodeId::Router(r.id), r.position);
    }
    for t in &scenario.tasks {
        if t.request_epoch <= plan.epoch {
            let d = topo.device(t.source).unwrap();
            placement.insert(NodeId::Device(d.id), d.position(plan.epoch));
        }
    }
    let mut ledger = ContentionLedger::new();
    for a in plan.flows.iter().filter(|a| a.status == PlanStatus::Scheduled && a.rate_mbps > 0.0) {
        let t = tasks[&a.id];
        if t.kind != kind {
            continue;
        }
        let d = topo.device(t.source).unwrap();
        let route = Route {
            routers: a.route.clone(),
            bands: (0..a.route.len().saturating_sub(1)).map(|i| a.hop_band(i)).collect(),
        };
        let chans = &plan.router_channels;
        let hops = flow_hops(
            d,
            d.position(plan.epoch),
            a.ap.unwrap(),
            a.channel.unwrap(),
            &route,
            topo,
            &|r| chans[&r],
            a.rate_mbps,
            &|_, _| 1.0,
        );
        ledger.add(a.id, flow_footprint(&hops, &placement, model).unwrap());
    }
    ledger
}

/// Small random workload: devices within reach of some router, real-time tasks plus background collection.
pub fn small_workload(seed: u64, horizon: u32) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(2..=4u32);
    let cols = rng.gen_range(2..=4u32);
    let gw = RouterId(rng.gen_range(0..cols));
    let mut topo = MeshTopology::grid(rows, cols, 90.0, &[gw]).unwrap();
    topo.assign_random_channels(rng.gen());
    let n_rt = rng.gen_range(2..=8u32);
    let n_dc = rng.gen_range(0..=3u32);
    let mut devices = Vec::new();
    let mut tasks = Vec::new();
    for i in 0..n_rt + n_dc {
        let r = topo.routers[rng.gen_range(0..topo.routers.len())].position;
        devices.push(static_device(i, Point::new(r.x + rng.gen_range(-60.0..60.0), r.y + rng.gen_range(-60.0..60.0))));
        if i < n_rt {
            let req = rng.gen_range(0..horizon / 2);
            let dur = rng.gen_range(1..=5u32);
            let deadline = (req + dur + rng.gen_range(0..=3u32)).min(horizon);
            tasks.push(rt_task(i, rng.gen_range(10.0..20.0), req, dur.min(deadline - req), deadline));
        } else {
            // Deadlines far past the horizon keep collection flows in background mode.
            tasks.push(dc_task(i, rng.gen_range(5.0..200.0), 0, horizon + 10_000));
        }
    }
    scenario(topo, devices, tasks, horizon)
}
