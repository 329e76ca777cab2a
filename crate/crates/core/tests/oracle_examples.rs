mod common;

use common::*;
use cropmesh_core::mesh::{MeshTopology, Point, RouterId};
use cropmesh_core::oracle::{brute_force_optimal, simulate_tiny, TinyInstance};
use cropmesh_core::propagation::Mode;
use cropmesh_core::{PolicyId, ThroughputModel};

fn tiny(topo: MeshTopology, devices: Vec<Point>, tasks: Vec<cropmesh_core::TaskSpec>, horizon: u32) -> TinyInstance {
    let devices = devices.into_iter().enumerate().map(|(i, p)| static_device(i as u32, p)).collect();
    let inst = TinyInstance { scenario: scenario(topo, devices, tasks, horizon), epoch_s: 60.0 };
    inst.check().unwrap();
    inst
}

#[test]
fn single_flow_gets_its_demand() {
    let m = ThroughputModel::bundled();
    let topo = MeshTopology::grid(1, 2, 90.0, &[RouterId(0)]).unwrap();
    let inst = tiny(topo, vec![Point::new(5.0, 5.0)], vec![rt_task(0, 15.0, 0, 2, 2)], 2);
    let opt = brute_force_optimal(&inst, m).unwrap();
    assert!((opt.objective_mb - 15.0 * 2.0 * 60.0 / 8.0).abs() < 1e-9);
    assert_eq!(opt.epochs.len(), 2);
    assert!(opt.epochs.iter().all(|e| e.len() == 1 && e[0].ap == RouterId(0)));
}

#[test]
fn two_saturating_flows_share_one_router() {
    let m = ThroughputModel::bundled();
    let d = 20.0;
    let topo = MeshTopology::grid(1, 1, 90.0, &[RouterId(0)]).unwrap();
    let inst = tiny(
        topo,
        vec![Point::new(d, 0.0), Point::new(-d, 0.0)],
        vec![rt_task(0, 1000.0, 0, 1, 1), rt_task(1, 1000.0, 0, 1, 1)],
        1,
    );
    let opt = brute_force_optimal(&inst, m).unwrap();
    let t = m.throughput(Mode::UC24, d).unwrap();
    assert!((opt.objective_mb - t * 60.0 / 8.0).abs() < 1e-6, "{} vs {}", opt.objective_mb, t * 7.5);
    for p in [PolicyId::CentralRouting, PolicyId::NaiveMesh] {
        assert!(simulate_tiny(&inst, p, m) <= opt.objective_mb * (1.0 + 1e-9));
    }
}

#[test]
fn unreachable_device_contributes_nothing() {
    let m = ThroughputModel::bundled();
    let far = m.cutoff(Mode::UC24).unwrap() + 30.0;
    let topo = MeshTopology::grid(1, 2, 90.0, &[RouterId(0)]).unwrap();
    let inst = tiny(
        topo,
        vec![Point::new(0.0, far), Point::new(3.0, 3.0)],
        vec![rt_task(0, 12.0, 0, 1, 1), rt_task(1, 12.0, 0, 1, 1)],
        1,
    );
    let opt = brute_force_optimal(&inst, m).unwrap();
    assert!((opt.objective_mb - 12.0 * 60.0 / 8.0).abs() < 1e-9);
}
