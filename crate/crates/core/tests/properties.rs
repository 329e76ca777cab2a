mod common;

use common::*;
use cropmesh_core::baselines::planner_for;
use cropmesh_core::capacity::{flow_footprint, ledger_check, ContentionLedger, HopSpec, Placement, Slot};
use cropmesh_core::fairness::{max_min_fair, FairFlow};
use cropmesh_core::mesh::{NodeId, Point, RouterId};
use cropmesh_core::propagation::Mode;
use cropmesh_core::sim::{run, run_observed};
use cropmesh_core::workload::FlowId;
use cropmesh_core::{PolicyId, TeParams, ThroughputModel};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    (0.0..120.0f64, 0.0..120.0f64).prop_map(|(x, y)| Point::new(x, y))
}

/// Random single hop plus bystanders, restricted to links within range.
fn hop_and_nodes() -> impl Strategy<Value = (HopSpec, Placement)> {
    (point(), point(), prop::collection::vec(point(), 0..6), 0.0..30.0f64, any::<bool>()).prop_filter_map(
        "in range",
        |(a, b, others, rate, five)| {
            let m = ThroughputModel::bundled();
            let (mode, slot) = if five { (Mode::AC5, Slot::Mesh5) } else { (Mode::UC24, Slot::Ch24(ch(6))) };
            let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt().max(1.0);
            if d >= m.cutoff(mode).unwrap() {
                return None;
            }
            let hop = HopSpec {
                src: NodeId::Router(RouterId(0)),
                dst: NodeId::Router(RouterId(1)),
                src_pos: a,
                dst_pos: b,
                mode,
                slot,
                rate,
                gain: 1.0,
            };
            let mut p = Placement::new();
            p.insert(hop.src, a);
            p.insert(hop.dst, b);
            for (i, q) in others.into_iter().enumerate() {
                p.insert(NodeId::Router(RouterId(2 + i as u32)), q);
            }
            Some((hop, p))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn footprint_is_linear_in_rate((hop, placement) in hop_and_nodes(), k in 0.0..5.0f64) {
        let m = ThroughputModel::bundled();
        let base = flow_footprint(&[hop.with_rate(1.0)], &placement, m).unwrap();
        let scaled = flow_footprint(&[hop.with_rate(k)], &placement, m).unwrap();
        for (key, v) in &base.units {
            prop_assert!((scaled.get(key) - v * k).abs() <= 1e-12 * (1.0 + v * k));
        }
    }

    #[test]
    fn bystanders_never_pay_more_than_endpoints((hop, placement) in hop_and_nodes()) {
        let fp = flow_footprint(&[hop], &placement, ThroughputModel::bundled()).unwrap();
        let direct = fp.get(&(hop.src, hop.slot));
        for (key, v) in &fp.units {
            prop_assert!(*v <= direct + 1e-12, "{key:?} {v} > {direct}");
        }
    }

    #[test]
    fn ledger_remove_restores(
        hops in prop::collection::vec(hop_and_nodes(), 1..6),
        victim in 0usize..6,
    ) {
        let m = ThroughputModel::bundled();
        let fps: Vec<_> = hops.iter().map(|(h, p)| flow_footprint(&[*h], p, m).unwrap()).collect();
        let victim = victim % fps.len();
        let mut all = ContentionLedger::new();
        let mut rest = ContentionLedger::new();
        for (i, fp) in fps.iter().enumerate() {
            all.add(FlowId(i as u32), fp.clone());
            if i != victim {
                rest.add(FlowId(i as u32), fp.clone());
            }
        }
        all.remove(FlowId(victim as u32));
        let a: Vec<_> = all.entries().collect();
        let b: Vec<_> = rest.entries().collect();
        prop_assert_eq!(a.len(), b.len());
        for ((ka, ca, la), (kb, cb, lb)) in a.into_iter().zip(b) {
            prop_assert_eq!(ka, kb);
            prop_assert_eq!(la, lb);
            prop_assert!((ca - cb).abs() <= 1e-12);
        }
    }

    #[test]
    fn max_min_is_feasible_and_bottlenecked(
        flows in prop::collection::vec((0.5..50.0f64, prop::collection::vec((0usize..4, 0.001..0.2f64), 1..4)), 1..7),
    ) {
        let cap = vec![1.0; 4];
        let ff: Vec<FairFlow> = flows.iter().map(|(c, coefs)| {
            let mut coefs = coefs.clone();
            coefs.sort_by_key(|x| x.0);
            coefs.dedup_by_key(|x| x.0);
            FairFlow { cap: *c, coefs }
        }).collect();
        let rates = max_min_fair(&cap, &ff);
        let mut load = [0.0; 4];
        for (f, r) in ff.iter().zip(&rates) {
            prop_assert!(*r >= 0.0 && *r <= f.cap + 1e-9);
            for (k, c) in &f.coefs {
                load[*k] += c * r;
            }
        }
        for l in load {
            prop_assert!(l <= 1.0 + 1e-9);
        }
        for (i, (f, r)) in ff.iter().zip(&rates).enumerate() {
            if *r >= f.cap - 1e-9 {
                continue;
            }
            // Some saturated key where no other user has a larger rate.
            let bottleneck = f.coefs.iter().any(|(k, _)| {
                load[*k] >= 1.0 - 1e-7
                    && ff.iter().zip(&rates).all(|(g, s)| !g.coefs.iter().any(|(j, _)| j == k) || *s <= r + 1e-7)
            });
            prop_assert!(bottleneck, "flow {i} at {r} has no bottleneck");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_conserves_capacity_and_data(seed in 0u64..10_000, policy in 0usize..7) {
        let m = ThroughputModel::bundled();
        let s = small_workload(seed, 10);
        let p = PolicyId::ALL[policy];
        let params = quiet_params(10);
        let mut worst: Vec<String> = Vec::new();
        let report = run_observed(&s, &planner_for(p, TeParams::default()), &params, m, &mut |rec| {
            for o in ledger_check(&rec.step.ledger, 0.0) {
                worst.push(format!("epoch {} {o:?}", rec.step.epoch));
            }
            for (_, assigned, delivered) in &rec.step.flows {
                if *delivered > *assigned + 1e-9 {
                    worst.push(format!("epoch {} delivered {delivered} > {assigned}", rec.step.epoch));
                }
            }
        }).unwrap();
        prop_assert!(worst.is_empty(), "{:?}", worst);
        let per_flow: f64 = report.flows.iter().map(|f| f.delivered_mb).sum();
        prop_assert!((per_flow - report.total_mb).abs() <= 1e-9 * (1.0 + report.total_mb));
        prop_assert!((report.realtime_mb + report.collection_mb - report.total_mb).abs() <= 1e-9 * (1.0 + report.total_mb));
        for f in &report.flows {
            if let Some(n) = f.normalized_throughput {
                prop_assert!((0.0..=1.0 + 1e-9).contains(&n));
            }
        }
    }

    #[test]
    fn runs_are_deterministic(seed in 0u64..10_000) {
        let m = ThroughputModel::bundled();
        let s = small_workload(seed, 8);
        let mut params = quiet_params(8);
        params.variation = cropmesh_core::VariationModel::default();
        params.seed = seed;
        params.variation.rng_seed = seed;
        let planner = planner_for(PolicyId::CentralRouting, TeParams::default());
        let a = run(&s, &planner, &params, m).unwrap();
        let b = run(&s, &planner, &params, m).unwrap();
        prop_assert_eq!(a, b);
    }
}
