//! Throughput-versus-distance models for the four radio modes.
//!
//! A trace of `(mode, distance, throughput)` samples is reduced to a
//! log-linear curve `T(d) = alpha + beta * ln(d)` per mode, clamped at zero
//! and cut off at a mode-specific distance. [`VariationModel`] supplies the
//! seeded multiplicative noise the simulator applies on top of the curves.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frequency band of a transmission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    GHz24,
    GHz5,
}

impl Band {
    pub fn label(self) -> &'static str {
        match self {
            Band::GHz24 => "2.4",
            Band::GHz5 => "5",
        }
    }
}

/// Height of the sender relative to the crop canopy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    UnderCanopy,
    AboveCanopy,
}

/// One of the four measured propagation modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mode {
    pub band: Band,
    pub tier: Tier,
}

impl Mode {
    pub const UC24: Mode = Mode { band: Band::GHz24, tier: Tier::UnderCanopy };
    pub const AC24: Mode = Mode { band: Band::GHz24, tier: Tier::AboveCanopy };
    pub const UC5: Mode = Mode { band: Band::GHz5, tier: Tier::UnderCanopy };
    pub const AC5: Mode = Mode { band: Band::GHz5, tier: Tier::AboveCanopy };

    pub const ALL: [Mode; 4] = [Mode::UC24, Mode::AC24, Mode::UC5, Mode::AC5];

    pub fn as_str(self) -> &'static str {
        match (self.band, self.tier) {
            (Band::GHz24, Tier::UnderCanopy) => "uc24",
            (Band::GHz24, Tier::AboveCanopy) => "ac24",
            (Band::GHz5, Tier::UnderCanopy) => "uc5",
            (Band::GHz5, Tier::AboveCanopy) => "ac5",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = PropagationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "uc24" => Ok(Mode::UC24),
            "ac24" => Ok(Mode::AC24),
            "uc5" => Ok(Mode::UC5),
            "ac5" => Ok(Mode::AC5),
            other => Err(PropagationError::UnknownMode(other.to_string())),
        }
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("unknown mode {0:?} (expected uc24|ac24|uc5|ac5)")]
    UnknownMode(String),
    #[error("mode {mode}: need at least 3 positive-throughput points, got {got}")]
    TooFewPoints { mode: Mode, got: usize },
    #[error("mode {mode}: all trace distances are identical")]
    IdenticalDistances { mode: Mode },
    #[error("mode {mode}: fitted slope {beta} is not negative")]
    NonNegativeSlope { mode: Mode, beta: f64 },
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("invalid trace point at distance {distance}: throughput {throughput}")]
    InvalidPoint { distance: f64, throughput: f64 },
    #[error("mode {0} is not present in the model")]
    ModeUnavailable(Mode),
    #[error("malformed trace: {0}")]
    Csv(#[from] csv::Error),
}

/// A single throughput measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub distance: f64,
    pub throughput: f64,
}

impl TracePoint {
    pub fn new(distance: f64, throughput: f64) -> Result<Self, PropagationError> {
        if !(distance > 0.0) || !distance.is_finite() || !(throughput >= 0.0) || !throughput.is_finite() {
            return Err(PropagationError::InvalidPoint { distance, throughput });
        }
        Ok(TracePoint { distance, throughput })
    }
}

/// Fitted curve for one mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCurve {
    pub alpha: f64,
    pub beta: f64,
    pub cutoff_m: f64,
}

impl ModeCurve {
    /// Throughput in Mbps at `d` meters. Callers guarantee `d > 0`.
    #[inline]
    pub fn at(&self, d: f64) -> f64 {
        if d >= self.cutoff_m {
            return 0.0;
        }
        (self.alpha + self.beta * d.ln()).max(0.0)
    }
}

/// Per-mode throughput curves. Modes absent from the trace are simply missing.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThroughputModel {
    pub curves: BTreeMap<Mode, ModeCurve>,
}

impl ThroughputModel {
    pub fn curve(&self, mode: Mode) -> Result<&ModeCurve, PropagationError> {
        self.curves.get(&mode).ok_or(PropagationError::ModeUnavailable(mode))
    }

    pub fn throughput(&self, mode: Mode, d: f64) -> Result<f64, PropagationError> {
        if !(d > 0.0) {
            return Err(PropagationError::NonPositiveDistance(d));
        }
        Ok(self.curve(mode)?.at(d))
    }

    pub fn cutoff(&self, mode: Mode) -> Result<f64, PropagationError> {
        Ok(self.curve(mode)?.cutoff_m)
    }

    pub fn has_all_modes(&self) -> bool {
        Mode::ALL.iter().all(|m| self.curves.contains_key(m))
    }

    /// Fits every mode present in `samples`.
    pub fn fit_all(samples: &[(Mode, TracePoint)]) -> Result<Self, PropagationError> {
        let mut by_mode: BTreeMap<Mode, Vec<TracePoint>> = BTreeMap::new();
        for (m, p) in samples {
            by_mode.entry(*m).or_default().push(*p);
        }
        let mut curves = BTreeMap::new();
        for (mode, pts) in by_mode {
            curves.insert(mode, fit_model(&pts, mode)?);
        }
        Ok(ThroughputModel { curves })
    }

    /// Model fitted from the bundled field-style trace.
    pub fn bundled() -> &'static ThroughputModel {
        static MODEL: OnceLock<ThroughputModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            let samples = read_trace(BUNDLED_TRACE.as_bytes()).expect("bundled trace parses");
            ThroughputModel::fit_all(&samples).expect("bundled trace fits")
        })
    }
}

/// The bundled trace CSV.
pub const BUNDLED_TRACE: &str = include_str!("../fixtures/farm_trace.csv");

/// Least-squares fit of `alpha + beta * ln(d)` on the positive-throughput points.
pub fn fit_model(points: &[TracePoint], mode: Mode) -> Result<ModeCurve, PropagationError> {
    for p in points {
        TracePoint::new(p.distance, p.throughput)?;
    }
    let positive: Vec<&TracePoint> = points.iter().filter(|p| p.throughput > 0.0).collect();
    if positive.len() < 3 {
        return Err(PropagationError::TooFewPoints { mode, got: positive.len() });
    }
    let n = positive.len() as f64;
    let xs: Vec<f64> = positive.iter().map(|p| p.distance.ln()).collect();
    let ys: Vec<f64> = positive.iter().map(|p| p.throughput).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= f64::EPSILON * n {
        return Err(PropagationError::IdenticalDistances { mode });
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let beta = sxy / sxx;
    if !(beta < 0.0) {
        return Err(PropagationError::NonNegativeSlope { mode, beta });
    }
    let alpha = my - beta * mx;
    let first_zero = points.iter().filter(|p| p.throughput == 0.0).map(|p| p.distance).fold(f64::INFINITY, f64::min);
    let cutoff_m = if first_zero.is_finite() { first_zero } else { (-alpha / beta).exp() };
    Ok(ModeCurve { alpha, beta, cutoff_m })
}

#[derive(Deserialize)]
struct TraceRow {
    mode: String,
    distance_m: f64,
    throughput_mbps: f64,
}

/// Parses a `mode,distance_m,throughput_mbps` CSV.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<(Mode, TracePoint)>, PropagationError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: TraceRow = row?;
        let mode: Mode = row.mode.parse()?;
        out.push((mode, TracePoint::new(row.distance_m, row.throughput_mbps)?));
    }
    Ok(out)
}

/// Seeded multiplicative throughput noise.
///
/// Every multiplier is a pure function of `(seed, stream, id, epoch)`; no state
/// is carried between queries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationModel {
    pub spatial_stddev_fraction: f64,
    pub temporal_stddev_fraction: f64,
    pub rng_seed: u64,
}

impl Default for VariationModel {
    fn default() -> Self {
        VariationModel { spatial_stddev_fraction: 0.30, temporal_stddev_fraction: 0.10, rng_seed: 0 }
    }
}

pub const MULTIPLIER_MIN: f64 = 0.1;
pub const MULTIPLIER_MAX: f64 = 2.0;

const STREAM_SPATIAL: u64 = 0x5350_4154;
const STREAM_TEMPORAL: u64 = 0x5445_4d50;

impl VariationModel {
    pub fn none() -> Self {
        VariationModel { spatial_stddev_fraction: 0.0, temporal_stddev_fraction: 0.0, rng_seed: 0 }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..1.0).contains(&self.spatial_stddev_fraction) && (0.0..1.0).contains(&self.temporal_stddev_fraction)
    }

    /// Access-hop multiplier for a device in an epoch.
    pub fn spatial_multiplier(&self, device_id: u32, epoch: u32) -> f64 {
        draw(self.rng_seed, STREAM_SPATIAL, device_id, epoch, self.spatial_stddev_fraction)
    }

    /// Mesh-hop multiplier for a sending router in an epoch.
    pub fn temporal_multiplier(&self, router_id: u32, epoch: u32) -> f64 {
        draw(self.rng_seed, STREAM_TEMPORAL, router_id, epoch, self.temporal_stddev_fraction)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent 64-bit seed from a base seed and a list of keys.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, k| splitmix(acc ^ splitmix(*k)))
}

fn draw(seed: u64, stream: u64, id: u32, epoch: u32, stddev: f64) -> f64 {
    if stddev <= 0.0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream, id as u64, epoch as u64]));
    let normal = Normal::new(1.0, stddev).expect("finite stddev");
    // Resample into the support; clamp only as a last resort.
    for _ in 0..32 {
        let v = normal.sample(&mut rng);
        if (MULTIPLIER_MIN..=MULTIPLIER_MAX).contains(&v) {
            return v;
        }
    }
    normal.sample(&mut rng).clamp(MULTIPLIER_MIN, MULTIPLIER_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn pts(v: &[(f64, f64)]) -> Vec<TracePoint> {
        v.iter().map(|&(d, t)| TracePoint::new(d, t).unwrap()).collect()
    }

    #[test]
    fn exact_log_linear_fit() {
        let c = fit_model(&pts(&[(E, 10.0), (E * E, 8.0), (E.powi(3), 6.0)]), Mode::UC24).unwrap();
        assert!((c.alpha - 12.0).abs() < 1e-12);
        assert!((c.beta + 2.0).abs() < 1e-12);
        assert!((c.cutoff_m - 6f64.exp()).abs() < 1e-9);
        assert!((c.at(E * E) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sample_sets_cutoff() {
        let c =
            fit_model(&pts(&[(10.0, 120.0), (20.0, 60.0), (30.0, 25.0), (40.0, 0.0), (60.0, 0.0)]), Mode::UC5).unwrap();
        assert_eq!(c.cutoff_m, 40.0);
        assert_eq!(c.at(40.0), 0.0);
        assert_eq!(c.at(55.0), 0.0);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit_model(&pts(&[(1.0, 2.0), (2.0, 1.0)]), Mode::UC24),
            Err(PropagationError::TooFewPoints { .. })
        ));
        assert!(matches!(
            fit_model(&pts(&[(5.0, 2.0), (5.0, 1.0), (5.0, 3.0)]), Mode::UC24),
            Err(PropagationError::IdenticalDistances { .. })
        ));
        assert!(matches!(
            fit_model(&pts(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]), Mode::UC24),
            Err(PropagationError::NonNegativeSlope { .. })
        ));
        assert!(TracePoint::new(0.0, 1.0).is_err());
    }

    #[test]
    fn throughput_rejects_nonpositive_distance() {
        let m = ThroughputModel::bundled();
        assert!(m.throughput(Mode::AC5, 0.0).is_err());
        assert!(m.throughput(Mode::AC5, -3.0).is_err());
        let c = m.cutoff(Mode::AC5).unwrap();
        assert_eq!(m.throughput(Mode::AC5, c).unwrap(), 0.0);
        assert_eq!(m.throughput(Mode::AC5, c * 3.0).unwrap(), 0.0);
    }

    #[test]
    fn bundled_model_has_all_modes() {
        let m = ThroughputModel::bundled();
        assert!(m.has_all_modes());
        assert!(m.cutoff(Mode::AC24).unwrap() > m.cutoff(Mode::AC5).unwrap());
    }

    #[test]
    fn models_json_round_trip() {
        let m = ThroughputModel::bundled();
        let s = serde_json::to_string(m).unwrap();
        assert!(s.contains("\"ac5\"") && s.contains("cutoff_m"));
        let back: ThroughputModel = serde_json::from_str(&s).unwrap();
        assert_eq!(&back, m);
    }

    #[test]
    fn multiplier_degenerate_and_deterministic() {
        let vm = VariationModel { spatial_stddev_fraction: 0.0, temporal_stddev_fraction: 0.0, rng_seed: 9 };
        assert_eq!(vm.spatial_multiplier(3, 4), 1.0);
        let vm = VariationModel { rng_seed: 9, ..Default::default() };
        assert_eq!(vm.spatial_multiplier(3, 4), vm.spatial_multiplier(3, 4));
        assert_ne!(vm.spatial_multiplier(3, 4), vm.spatial_multiplier(3, 5));
        assert_ne!(vm.spatial_multiplier(3, 4), vm.temporal_multiplier(3, 4));
    }

    #[test]
    fn multiplier_moments() {
        let vm = VariationModel { rng_seed: 77, ..Default::default() };
        let xs: Vec<f64> = (0..10_000u32).map(|i| vm.spatial_multiplier(i % 100, i / 100)).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((sd - 0.30).abs() < 0.02, "sd {sd}");
        assert!(xs.iter().all(|x| (MULTIPLIER_MIN..=MULTIPLIER_MAX).contains(x)));
    }

    #[test]
    fn trace_parse_errors() {
        assert!(read_trace("mode,distance_m,throughput_mbps\nxx,1,2\n".as_bytes()).is_err());
        assert!(read_trace("mode,distance_m,throughput_mbps\nuc24,abc,2\n".as_bytes()).is_err());
        assert!(read_trace("mode,distance_m,throughput_mbps\nuc24,-1,2\n".as_bytes()).is_err());
    }
}
