//! Resource-unit calculus.
//!
//! Every node owns one unit of airtime per radio slot. A hop sending `X` Mbps
//! over a link of throughput `T(d_AB)` consumes `X / T(d_AB)` at both ends and
//! `X / T(d_AB) * min(1, T(d_AC) / T(d_AB))` at each bystander `C` in range of
//! the sender. Charges from different hops and flows add up.
//!
//! Charges are keyed by `(node, slot)` so a footprint does not depend on which
//! channel a bystander happens to be tuned to. A key only constrains
//! scheduling once it is *live*, i.e. once the node actually transmits or
//! receives on that slot.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{distance, Channel24, NodeId, Point};
use crate::propagation::{Band, Mode, ModeCurve, ThroughputModel};
use crate::workload::FlowId;

/// Slack used when comparing committed fractions against a capacity bound.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Co-located radios are treated as this far apart.
pub const MIN_SEPARATION_M: f64 = 1.0;

/// A radio resource at a node: one 2.4 GHz channel or the shared 5 GHz mesh channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Ch24(Channel24),
    Mesh5,
}

impl Slot {
    pub fn band(self) -> Band {
        match self {
            Slot::Ch24(_) => Band::GHz24,
            Slot::Mesh5 => Band::GHz5,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Ch24(c) => write!(f, "2.4/ch{c}"),
            Slot::Mesh5 => f.write_str("5"),
        }
    }
}

pub type Key = (NodeId, Slot);

#[derive(Debug, Error, PartialEq)]
pub enum CapacityError {
    #[error("hop {src}->{dst} sends {rate} Mbps over {distance:.1} m, beyond range")]
    OutOfRange { src: NodeId, dst: NodeId, rate: f64, distance: f64 },
    #[error("path is discontiguous at hop {0}")]
    Discontiguous(usize),
    #[error("hop {0} uses mode {1} on slot {2}")]
    ChannelMismatch(usize, Mode, Slot),
    #[error("negative or non-finite rate {0}")]
    BadRate(f64),
    #[error("node {0} has no known position")]
    UnknownNode(NodeId),
    #[error("mode {0} is not present in the model")]
    ModeUnavailable(Mode),
}

fn curve(model: &ThroughputModel, mode: Mode) -> Result<&ModeCurve, CapacityError> {
    model.curves.get(&mode).ok_or(CapacityError::ModeUnavailable(mode))
}

/// One transmission of a flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HopSpec {
    pub src: NodeId,
    pub dst: NodeId,
    pub src_pos: Point,
    pub dst_pos: Point,
    pub mode: Mode,
    pub slot: Slot,
    /// Mbps.
    pub rate: f64,
    /// Multiplier on the link throughput (1.0 = model value).
    pub gain: f64,
}

impl HopSpec {
    pub fn length(&self) -> f64 {
        distance(self.src_pos, self.dst_pos).max(MIN_SEPARATION_M)
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }
}

fn link_throughput(hop: &HopSpec, curve: &ModeCurve) -> f64 {
    curve.at(hop.length()) * hop.gain
}

/// Units consumed at each endpoint of `hop`.
pub fn direct_units(hop: &HopSpec, model: &ThroughputModel) -> Result<f64, CapacityError> {
    if !(hop.rate >= 0.0) || !hop.rate.is_finite() {
        return Err(CapacityError::BadRate(hop.rate));
    }
    if hop.rate == 0.0 {
        return Ok(0.0);
    }
    let t = link_throughput(hop, curve(model, hop.mode)?);
    if t <= 0.0 {
        return Err(CapacityError::OutOfRange { src: hop.src, dst: hop.dst, rate: hop.rate, distance: hop.length() });
    }
    Ok(hop.rate / t)
}

/// Fraction of the hop's airtime that a bystander at `at` loses.
fn delta(hop: &HopSpec, curve: &ModeCurve, at: Point) -> f64 {
    let t_ab = curve.at(hop.length());
    let t_ac = curve.at(distance(hop.src_pos, at).max(MIN_SEPARATION_M));
    if t_ac <= 0.0 {
        0.0
    } else {
        (t_ac / t_ab).min(1.0)
    }
}

/// Units consumed at a same-channel bystander at `bystander`.
pub fn interference_units(hop: &HopSpec, bystander: Point, model: &ThroughputModel) -> Result<f64, CapacityError> {
    let direct = direct_units(hop, model)?;
    if direct == 0.0 {
        return Ok(0.0);
    }
    Ok(direct * delta(hop, curve(model, hop.mode)?, bystander))
}

const CELL_M: f64 = 100.0;

/// Positions of every radio that can be charged, with a coarse spatial index.
#[derive(Clone, Debug, Default)]
pub struct Placement {
    nodes: Vec<(NodeId, Point)>,
    index: HashMap<NodeId, usize>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

fn cell_of(p: Point) -> (i64, i64) {
    ((p.x / CELL_M).floor() as i64, (p.y / CELL_M).floor() as i64)
}

impl Placement {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: NodeId, pos: Point) {
        if let Some(&i) = self.index.get(&id) {
            let old = self.nodes[i].1;
            if let Some(v) = self.cells.get_mut(&cell_of(old)) {
                v.retain(|&j| j != i);
            }
            self.nodes[i].1 = pos;
            self.cells.entry(cell_of(pos)).or_default().push(i);
            return;
        }
        let i = self.nodes.len();
        self.nodes.push((id, pos));
        self.index.insert(id, i);
        self.cells.entry(cell_of(pos)).or_default().push(i);
    }

    pub fn position(&self, id: NodeId) -> Option<Point> {
        self.index.get(&id).map(|&i| self.nodes[i].1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(NodeId, Point)> {
        self.nodes.iter()
    }

    /// Nodes within `radius` of `center`, in unspecified but deterministic order.
    pub fn within(&self, center: Point, radius: f64) -> impl Iterator<Item = (NodeId, Point)> + '_ {
        let (cx, cy) = cell_of(center);
        let span = if radius.is_finite() { (radius / CELL_M).ceil() as i64 } else { 1 << 20 };
        let span = span.min(1 << 20);
        let all = !radius.is_finite() || span > 64;
        let r2 = radius * radius;
        let from_cells: Box<dyn Iterator<Item = usize> + '_> = if all {
            Box::new(0..self.nodes.len())
        } else {
            Box::new(
                (cx - span..=cx + span)
                    .flat_map(move |x| (cy - span..=cy + span).map(move |y| (x, y)))
                    .filter_map(|c| self.cells.get(&c))
                    .flat_map(|v| v.iter().copied()),
            )
        };
        from_cells.filter_map(move |i| {
            let (id, p) = self.nodes[i];
            let dx = p.x - center.x;
            let dy = p.y - center.y;
            (dx * dx + dy * dy <= r2).then_some((id, p))
        })
    }
}

/// Units a flow consumes per `(node, slot)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResourceFootprint {
    pub units: BTreeMap<Key, f64>,
    /// Keys where the flow transmits or receives.
    pub endpoints: BTreeSet<Key>,
}

impl ResourceFootprint {
    pub fn get(&self, key: &Key) -> f64 {
        self.units.get(key).copied().unwrap_or(0.0)
    }

    pub fn scaled(&self, k: f64) -> ResourceFootprint {
        if k == 0.0 {
            return ResourceFootprint::default();
        }
        ResourceFootprint {
            units: self.units.iter().map(|(key, v)| (*key, v * k)).collect(),
            endpoints: self.endpoints.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.units.values().all(|v| *v == 0.0)
    }

    fn charge(&mut self, key: Key, v: f64) {
        *self.units.entry(key).or_insert(0.0) += v;
    }
}

fn mode_matches_slot(mode: Mode, slot: Slot) -> bool {
    mode.band == slot.band()
}

/// Footprint of a flow over `hops`, charging bystanders drawn from `placement`.
///
/// Devices are only charged on 2.4 GHz slots; they have no 5 GHz radio.
pub fn flow_footprint(
    hops: &[HopSpec],
    placement: &Placement,
    model: &ThroughputModel,
) -> Result<ResourceFootprint, CapacityError> {
    for (i, pair) in hops.windows(2).enumerate() {
        if pair[0].dst != pair[1].src {
            return Err(CapacityError::Discontiguous(i + 1));
        }
    }
    let mut fp = ResourceFootprint::default();
    for (i, hop) in hops.iter().enumerate() {
        if !mode_matches_slot(hop.mode, hop.slot) {
            return Err(CapacityError::ChannelMismatch(i, hop.mode, hop.slot));
        }
        let direct = direct_units(hop, model)?;
        fp.endpoints.insert((hop.src, hop.slot));
        fp.endpoints.insert((hop.dst, hop.slot));
        fp.charge((hop.src, hop.slot), direct);
        fp.charge((hop.dst, hop.slot), direct);
        if direct == 0.0 {
            continue;
        }
        let curve = curve(model, hop.mode)?;
        for (id, pos) in placement.within(hop.src_pos, curve.cutoff_m) {
            if id == hop.src || id == hop.dst {
                continue;
            }
            if matches!(id, NodeId::Device(_)) && hop.slot == Slot::Mesh5 {
                continue;
            }
            let d = delta(hop, curve, pos);
            if d > 0.0 {
                fp.charge((id, hop.slot), direct * d);
            }
        }
    }
    Ok(fp)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct LedgerEntry {
    committed: f64,
    contributors: u32,
    direct: u32,
}

/// Sum of the footprints of the currently scheduled flows.
#[derive(Clone, Debug, Default)]
pub struct ContentionLedger {
    entries: BTreeMap<Key, LedgerEntry>,
    flows: BTreeMap<FlowId, ResourceFootprint>,
}

/// A live key whose commitment exceeds the allowed fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overcommit {
    pub node: NodeId,
    pub slot: Slot,
    pub committed: f64,
}

impl ContentionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a flow, replacing any footprint already recorded for it.
    pub fn add(&mut self, flow: FlowId, fp: ResourceFootprint) {
        self.remove(flow);
        for (key, v) in &fp.units {
            let e = self.entries.entry(*key).or_default();
            e.committed += v;
            e.contributors += 1;
        }
        for key in &fp.endpoints {
            self.entries.entry(*key).or_default().direct += 1;
        }
        self.flows.insert(flow, fp);
    }

    pub fn remove(&mut self, flow: FlowId) -> Option<ResourceFootprint> {
        let fp = self.flows.remove(&flow)?;
        for (key, v) in &fp.units {
            if let Some(e) = self.entries.get_mut(key) {
                e.committed -= v;
                e.contributors -= 1;
            }
        }
        for key in &fp.endpoints {
            if let Some(e) = self.entries.get_mut(key) {
                e.direct -= 1;
            }
        }
        let touched: Vec<Key> = fp.units.keys().chain(fp.endpoints.iter()).copied().collect();
        for key in touched {
            if let Some(e) = self.entries.get(&key) {
                if e.contributors == 0 && e.direct == 0 {
                    self.entries.remove(&key);
                }
            }
        }
        Some(fp)
    }

    pub fn committed(&self, key: &Key) -> f64 {
        self.entries.get(key).map_or(0.0, |e| e.committed)
    }

    pub fn is_live(&self, key: &Key) -> bool {
        self.entries.get(key).is_some_and(|e| e.direct > 0)
    }

    pub fn contains(&self, flow: FlowId) -> bool {
        self.flows.contains_key(&flow)
    }

    pub fn footprint(&self, flow: FlowId) -> Option<&ResourceFootprint> {
        self.flows.get(&flow)
    }

    pub fn flow_ids(&self) -> impl Iterator<Item = FlowId> + '_ {
        self.flows.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(key, committed, live)` for every key with a recorded charge.
    pub fn entries(&self) -> impl Iterator<Item = (Key, f64, bool)> + '_ {
        self.entries.iter().map(|(k, e)| (*k, e.committed, e.direct > 0))
    }

    /// Whether adding `fp` keeps every key that would be live within `1 - headroom`.
    pub fn fits(&self, fp: &ResourceFootprint, headroom: f64) -> bool {
        let limit = 1.0 - headroom + FEASIBILITY_TOL;
        fp.units.iter().all(|(key, v)| {
            let live = self.is_live(key) || fp.endpoints.contains(key);
            !live || self.committed(key) + v <= limit
        })
    }

    /// Largest scale `k` such that `per_mbps.scaled(k)` fits.
    pub fn max_fitting_rate(&self, per_mbps: &ResourceFootprint, headroom: f64) -> f64 {
        let limit = 1.0 - headroom;
        per_mbps
            .units
            .iter()
            .filter(|(key, v)| **v > 0.0 && (self.is_live(key) || per_mbps.endpoints.contains(key)))
            .map(|(key, v)| ((limit - self.committed(key)) / v).max(0.0))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Live keys committed beyond `1 - headroom`.
pub fn ledger_check(ledger: &ContentionLedger, headroom: f64) -> Vec<Overcommit> {
    let limit = 1.0 - headroom + FEASIBILITY_TOL;
    ledger
        .entries()
        .filter(|(_, c, live)| *live && *c > limit)
        .map(|((node, slot), committed, _)| Overcommit { node, slot, committed })
        .collect()
}

/// Writes `epoch,node,band,committed_fraction` rows for the live keys.
pub fn write_ledger_rows<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    epoch: u32,
    rows: impl Iterator<Item = (Key, f64)>,
) -> csv::Result<()> {
    for ((node, slot), c) in rows {
        w.write_record([epoch.to_string(), node.to_string(), slot.to_string(), format!("{c:.9}")])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{DeviceId, RouterId};
    use std::f64::consts::E;

    fn toy_model() -> ThroughputModel {
        let mut m = ThroughputModel::default();
        let c = ModeCurve { alpha: 12.0, beta: -2.0, cutoff_m: 6f64.exp() };
        m.curves.insert(Mode::UC24, c);
        m.curves.insert(Mode::AC5, c);
        m
    }

    fn r(i: u32) -> NodeId {
        NodeId::Router(RouterId(i))
    }

    fn hop(src: NodeId, sp: Point, dst: NodeId, dp: Point, rate: f64) -> HopSpec {
        HopSpec { src, dst, src_pos: sp, dst_pos: dp, mode: Mode::AC5, slot: Slot::Mesh5, rate, gain: 1.0 }
    }

    #[test]
    fn direct_examples() {
        let m = toy_model();
        let d = E * E;
        let h = hop(r(0), Point::new(0.0, 0.0), r(1), Point::new(d, 0.0), 8.0);
        assert!((direct_units(&h, &m).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(direct_units(&h.with_rate(0.0), &m).unwrap(), 0.0);
        let far = hop(r(0), Point::new(0.0, 0.0), r(1), Point::new(1000.0, 0.0), 1.0);
        assert!(matches!(direct_units(&far, &m), Err(CapacityError::OutOfRange { .. })));
        assert_eq!(direct_units(&far.with_rate(0.0), &m).unwrap(), 0.0);
    }

    #[test]
    fn interference_example() {
        let m = toy_model();
        let h = hop(r(0), Point::new(0.0, 0.0), r(1), Point::new(E * E, 0.0), 4.0);
        assert!((direct_units(&h, &m).unwrap() - 0.5).abs() < 1e-12);
        let i = interference_units(&h, Point::new(0.0, E.powi(4)), &m).unwrap();
        assert!((i - 0.25).abs() < 1e-12);
        let near = interference_units(&h, Point::new(1.0, 1.0), &m).unwrap();
        assert!((near - 0.5).abs() < 1e-12);
        assert_eq!(interference_units(&h, Point::new(0.0, 500.0), &m).unwrap(), 0.0);
    }

    #[test]
    fn single_hop_without_bystanders() {
        let m = toy_model();
        let mut pl = Placement::new();
        pl.insert(r(0), Point::new(0.0, 0.0));
        pl.insert(r(1), Point::new(E * E, 0.0));
        pl.insert(r(2), Point::new(1000.0, 0.0));
        let h = hop(r(0), Point::new(0.0, 0.0), r(1), Point::new(E * E, 0.0), 8.0);
        let fp = flow_footprint(&[h], &pl, &m).unwrap();
        assert_eq!(fp.units.len(), 2);
        assert!((fp.get(&(r(0), Slot::Mesh5)) - 1.0).abs() < 1e-12);
        assert!((fp.get(&(r(1), Slot::Mesh5)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn path_validation() {
        let m = toy_model();
        let pl = Placement::new();
        let a = hop(r(0), Point::new(0.0, 0.0), r(1), Point::new(5.0, 0.0), 1.0);
        let b = hop(r(2), Point::new(9.0, 0.0), r(3), Point::new(14.0, 0.0), 1.0);
        assert_eq!(flow_footprint(&[a, b], &pl, &m), Err(CapacityError::Discontiguous(1)));
        let mut c = a;
        c.slot = Slot::Ch24(Channel24::ALL[0]);
        assert!(matches!(flow_footprint(&[c], &pl, &m), Err(CapacityError::ChannelMismatch(0, ..))));
    }

    #[test]
    fn devices_not_charged_on_mesh_slot() {
        let m = toy_model();
        let mut pl = Placement::new();
        pl.insert(NodeId::Device(DeviceId(0)), Point::new(1.0, 1.0));
        let h = hop(r(0), Point::new(0.0, 0.0), r(1), Point::new(5.0, 0.0), 1.0);
        let fp = flow_footprint(&[h], &pl, &m).unwrap();
        assert_eq!(fp.units.len(), 2);
    }

    #[test]
    fn ledger_add_remove_restores() {
        let m = toy_model();
        let mut pl = Placement::new();
        for i in 0..4 {
            pl.insert(r(i), Point::new(i as f64 * 5.0, 0.0));
        }
        let f1 = flow_footprint(&[hop(r(0), Point::new(0.0, 0.0), r(1), Point::new(5.0, 0.0), 1.5)], &pl, &m).unwrap();
        let f2 =
            flow_footprint(&[hop(r(2), Point::new(10.0, 0.0), r(3), Point::new(15.0, 0.0), 0.7)], &pl, &m).unwrap();
        let mut only2 = ContentionLedger::new();
        only2.add(FlowId(2), f2.clone());
        let mut both = ContentionLedger::new();
        both.add(FlowId(1), f1);
        both.add(FlowId(2), f2);
        both.remove(FlowId(1));
        let a: Vec<_> = both.entries().collect();
        let b: Vec<_> = only2.entries().collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() < 1e-12);
            assert_eq!(x.2, y.2);
        }
        both.remove(FlowId(2));
        assert!(both.is_empty());
    }

    #[test]
    fn ledger_check_reports_live_overcommit() {
        let l = ContentionLedger::new();
        assert!(ledger_check(&l, 0.1).is_empty());
        let mut fp = ResourceFootprint::default();
        fp.units.insert((r(0), Slot::Mesh5), 0.95);
        fp.endpoints.insert((r(0), Slot::Mesh5));
        fp.units.insert((r(9), Slot::Mesh5), 3.0);
        let mut l = ContentionLedger::new();
        l.add(FlowId(0), fp);
        let rep = ledger_check(&l, 0.10);
        assert_eq!(rep.len(), 1);
        assert_eq!(rep[0].node, r(0));
        assert!(ledger_check(&l, 0.0).is_empty());
    }

    #[test]
    fn fits_and_max_rate() {
        let mut per = ResourceFootprint::default();
        per.units.insert((r(0), Slot::Mesh5), 0.1);
        per.endpoints.insert((r(0), Slot::Mesh5));
        per.units.insert((r(1), Slot::Mesh5), 0.2);
        let mut l = ContentionLedger::new();
        assert!((l.max_fitting_rate(&per, 0.1) - 9.0).abs() < 1e-12);
        let mut other = ResourceFootprint::default();
        other.units.insert((r(1), Slot::Mesh5), 0.5);
        other.endpoints.insert((r(1), Slot::Mesh5));
        l.add(FlowId(7), other);
        assert!((l.max_fitting_rate(&per, 0.1) - 2.0).abs() < 1e-12);
        assert!(l.fits(&per.scaled(2.0), 0.1));
        assert!(!l.fits(&per.scaled(2.1), 0.1));
    }

    #[test]
    fn placement_within_matches_scan() {
        let mut pl = Placement::new();
        for i in 0..200u32 {
            let x = ((i * 37) % 101) as f64 * 7.3;
            let y = ((i * 53) % 89) as f64 * 5.1;
            pl.insert(r(i), Point::new(x, y));
        }
        let c = Point::new(300.0, 200.0);
        for radius in [10.0, 107.0, 250.0, 5000.0, f64::INFINITY] {
            let mut a: Vec<_> = pl.within(c, radius).map(|x| x.0).collect();
            let mut b: Vec<_> = pl.iter().filter(|(_, p)| distance(*p, c) <= radius).map(|x| x.0).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
        pl.insert(r(0), Point::new(300.0, 200.0));
        assert!(pl.within(c, 1.0).any(|x| x.0 == r(0)));
    }
}
