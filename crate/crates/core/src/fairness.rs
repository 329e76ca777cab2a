//! Max-min fair rates under linear per-resource budgets (progressive filling).

/// A flow's rate cap and its per-Mbps consumption at each constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct FairFlow {
    pub cap: f64,
    pub coefs: Vec<(usize, f64)>,
}

const SAT_TOL: f64 = 1e-12;

/// Raises all unfrozen rates together; a flow freezes when it hits its cap or
/// touches a saturated constraint. A flow with no positive coefficient and an
/// infinite cap gets `f64::INFINITY`.
pub fn max_min_fair(capacity: &[f64], flows: &[FairFlow]) -> Vec<f64> {
    let n = flows.len();
    let mut rate = vec![0.0; n];
    let mut frozen = vec![false; n];
    let mut used = vec![0.0; capacity.len()];
    let mut saturated: Vec<bool> = capacity.iter().map(|c| *c <= SAT_TOL).collect();

    for (i, f) in flows.iter().enumerate() {
        if f.cap <= 0.0 || f.coefs.iter().any(|&(k, a)| a > 0.0 && saturated[k]) {
            frozen[i] = true;
        }
    }

    loop {
        let active: Vec<usize> = (0..n).filter(|&i| !frozen[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut load = vec![0.0; capacity.len()];
        for &i in &active {
            for &(k, a) in &flows[i].coefs {
                if a > 0.0 {
                    load[k] += a;
                }
            }
        }
        let mut step = f64::INFINITY;
        let mut arg_k = None;
        for (k, &l) in load.iter().enumerate() {
            if l > 0.0 {
                let s = ((capacity[k] - used[k]) / l).max(0.0);
                if s < step {
                    step = s;
                    arg_k = Some(k);
                }
            }
        }
        let mut arg_f = None;
        for &i in &active {
            let s = (flows[i].cap - rate[i]).max(0.0);
            if s < step {
                step = s;
                arg_f = Some(i);
                arg_k = None;
            }
        }
        if !step.is_finite() {
            for &i in &active {
                rate[i] = flows[i].cap;
                frozen[i] = true;
            }
            break;
        }
        for &i in &active {
            rate[i] += step;
            for &(k, a) in &flows[i].coefs {
                if a > 0.0 {
                    used[k] += step * a;
                }
            }
        }
        if let Some(k) = arg_k {
            saturated[k] = true;
        }
        if let Some(i) = arg_f {
            rate[i] = flows[i].cap;
            frozen[i] = true;
        }
        for (k, s) in saturated.iter_mut().enumerate() {
            if load[k] > 0.0 && capacity[k] - used[k] <= SAT_TOL * capacity[k].abs().max(1.0) {
                *s = true;
            }
        }
        for &i in &active {
            if frozen[i] {
                continue;
            }
            if flows[i].cap.is_finite() && flows[i].cap - rate[i] <= SAT_TOL * flows[i].cap.max(1.0) {
                rate[i] = flows[i].cap;
                frozen[i] = true;
            } else if flows[i].coefs.iter().any(|&(k, a)| a > 0.0 && saturated[k]) {
                frozen[i] = true;
            }
        }
    }
    rate
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(cap: f64, coefs: &[(usize, f64)]) -> FairFlow {
        FairFlow { cap, coefs: coefs.to_vec() }
    }

    #[test]
    fn symmetric_split() {
        let r = max_min_fair(&[1.0], &[f(f64::INFINITY, &[(0, 0.1)]), f(f64::INFINITY, &[(0, 0.1)])]);
        assert!((r[0] - 5.0).abs() < 1e-12 && (r[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn caps_respected_and_leftover_redistributed() {
        let r = max_min_fair(&[1.0], &[f(2.0, &[(0, 0.1)]), f(f64::INFINITY, &[(0, 0.1)])]);
        assert!((r[0] - 2.0).abs() < 1e-12);
        assert!((r[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn equal_mbps_not_equal_units() {
        // Flow 0 costs twice as much per Mbps; max-min in Mbps still gives equal rates.
        let r = max_min_fair(&[1.0], &[f(f64::INFINITY, &[(0, 0.2)]), f(f64::INFINITY, &[(0, 0.1)])]);
        assert!((r[0] - r[1]).abs() < 1e-12);
        assert!((0.2 * r[0] + 0.1 * r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nested_bottlenecks() {
        // Flow 0 crosses both constraints, flow 1 only the second.
        let r = max_min_fair(&[0.5, 1.0], &[f(f64::INFINITY, &[(0, 0.1), (1, 0.1)]), f(f64::INFINITY, &[(1, 0.1)])]);
        assert!((r[0] - 5.0).abs() < 1e-12);
        assert!((r[1] - 5.0).abs() < 1e-12);
        let r = max_min_fair(&[0.3, 1.0], &[f(f64::INFINITY, &[(0, 0.1), (1, 0.1)]), f(f64::INFINITY, &[(1, 0.1)])]);
        assert!((r[0] - 3.0).abs() < 1e-12);
        assert!((r[1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn negative_capacity_blocks() {
        let r = max_min_fair(&[-0.2, 1.0], &[f(f64::INFINITY, &[(0, 0.1)]), f(3.0, &[(1, 0.1)])]);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_flow_gets_cap() {
        let r = max_min_fair(&[], &[f(4.0, &[]), f(0.0, &[])]);
        assert_eq!(r, vec![4.0, 0.0]);
    }
}
