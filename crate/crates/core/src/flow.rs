//! Suspension flow over the section map: return-time averages, segment
//! maxima and the flow extreme value law.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::evt::{gumbel_ks, phi_of_distance, GumbelKs, Metric};
use crate::maps::{Orbit, SectionPoint, System};
use crate::measure::LocalDimensionEstimate;
use crate::rng::{Domain, Seeder};

/// Roof function `h` of the suspension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Roof {
    /// `h(x, y) = -log|x| / lambda1 + tau0`.
    Logarithmic { lambda1: f64, tau0: f64 },
    Constant(f64),
}

impl Roof {
    /// The return time of the system: the Lorenz parameters, or
    /// `-log|x| + 1` for the reference maps.
    pub fn for_system(system: &System) -> Self {
        match system {
            System::Lorenz(m) => Roof::Logarithmic {
                lambda1: m.params().lambda1,
                tau0: m.params().tau0,
            },
            System::Baker | System::Doubling => Roof::Logarithmic { lambda1: 1.0, tau0: 1.0 },
        }
    }

    #[inline]
    pub fn height(&self, p: &SectionPoint) -> f64 {
        match *self {
            Roof::Logarithmic { lambda1, tau0 } => -p.x.abs().ln() / lambda1 + tau0,
            Roof::Constant(c) => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Roof::Logarithmic { lambda1, tau0 } if lambda1 > 0.0 && tau0 > 0.0 => Ok(()),
            Roof::Constant(c) if c > 0.0 => Ok(()),
            _ => Err(LabError::Config(format!("roof {self:?} must be positive"))),
        }
    }
}

/// `(p, u)` with `0 <= u < h(p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuspensionPoint {
    pub base: SectionPoint,
    pub u: f64,
}

impl SuspensionPoint {
    pub fn new(base: SectionPoint, u: f64, roof: &Roof) -> Result<Self> {
        let h = roof.height(&base);
        if base.x == 0.0 && matches!(roof, Roof::Logarithmic { .. }) {
            return Err(LabError::Singular);
        }
        if !(0.0..h).contains(&u) {
            return Err(LabError::Config(format!("height {u} outside [0, {h})")));
        }
        Ok(Self { base, u })
    }

    /// Base point with height `h(p) / 2`.
    pub fn centered(base: SectionPoint, roof: &Roof) -> Result<Self> {
        Self::new(base, roof.height(&base) / 2.0, roof)
    }
}

/// Flows `q` for time `t`, applying `(p, h(p)) ~ (F(p), 0)` at each return.
pub fn advance_flow(system: &System, roof: &Roof, q: SuspensionPoint, t: f64) -> Result<SuspensionPoint> {
    if !(t >= 0.0) {
        return Err(LabError::Config(format!("flow time {t} must be nonnegative")));
    }
    let mut p = q.base;
    let mut u = q.u + t;
    loop {
        if p.x == 0.0 && matches!(roof, Roof::Logarithmic { .. }) {
            return Err(LabError::Singular);
        }
        let h = roof.height(&p);
        if u < h {
            return Ok(SuspensionPoint { base: p, u });
        }
        u -= h;
        p = system.apply(p)?;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReturnTimeEstimate {
    pub mean: f64,
    pub n: u64,
    /// `(k, average over the first k returns)` at powers of ten.
    pub trace: Vec<(u64, f64)>,
}

/// Birkhoff average of `h` along one typical orbit.
pub fn mean_return_time(system: System, roof: &Roof, n: u64, burn_in: u64, seeder: &Seeder) -> Result<ReturnTimeEstimate> {
    if n < 1_000_000 {
        return Err(LabError::Config(format!("need at least 1e6 returns (got {n})")));
    }
    roof.validate()?;
    let mut orbit = Orbit::typical(system, seeder.stream(Domain::Ensemble, 0), burn_in)?;
    // Neumaier summation
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let mut trace = Vec::new();
    let mut next = 10;
    for k in 1..=n {
        let h = roof.height(&orbit.current());
        let t = sum + h;
        comp += if sum.abs() >= h.abs() { (sum - t) + h } else { (h - t) + sum };
        sum = t;
        if k == next {
            trace.push((k, (sum + comp) / k as f64));
            next *= 10;
        }
        if !orbit.advance() {
            return Err(LabError::Singular);
        }
    }
    let mean = (sum + comp) / n as f64;
    if trace.last().map(|t| t.0) != Some(n) {
        trace.push((n, mean));
    }
    Ok(ReturnTimeEstimate {
        mean,
        n,
        trace,
    })
}

/// Distance from `x0` to the flow segment `{(p, u) : 0 <= u < len}` in the
/// metric `sqrt(d(p, p0)^2 + |u - u0|^2)`.
#[inline]
pub fn segment_distance(metric: Metric, p: &SectionPoint, len: f64, x0: &SuspensionPoint) -> f64 {
    let d = metric.shape().distance(p, &x0.base);
    if x0.u < len {
        d
    } else {
        let gap = x0.u - len;
        (d * d + gap * gap).sqrt()
    }
}

/// `Phi(p) = max { phi(f_s(p)) : 0 <= s < h(p) }`.
pub fn segment_max_phi(roof: &Roof, metric: Metric, p: &SectionPoint, x0: &SuspensionPoint) -> Result<f64> {
    if p.is_singular() && matches!(roof, Roof::Logarithmic { .. }) {
        return Err(LabError::Singular);
    }
    Ok(phi_of_distance(segment_distance(metric, p, roof.height(p), x0)))
}

/// Closest approaches `(over [0, T) of the flow, over the first N
/// segments)` starting from `(p, 0)`.
pub fn flow_min_distances(
    orbit: &mut Orbit,
    roof: &Roof,
    metric: Metric,
    x0: &SuspensionPoint,
    horizon: f64,
    n_returns: u64,
) -> Option<(f64, f64)> {
    let mut elapsed = 0.0;
    let mut flow_min = f64::INFINITY;
    let mut map_min = f64::INFINITY;
    let mut k = 0u64;
    while elapsed < horizon || k < n_returns {
        let p = orbit.current();
        if p.x == 0.0 && matches!(roof, Roof::Logarithmic { .. }) {
            return None;
        }
        let h = roof.height(&p);
        if k < n_returns {
            map_min = map_min.min(segment_distance(metric, &p, h, x0));
        }
        if elapsed < horizon {
            let len = h.min(horizon - elapsed);
            flow_min = flow_min.min(segment_distance(metric, &p, len, x0));
        }
        elapsed += h;
        k += 1;
        if !orbit.advance() {
            return None;
        }
    }
    Some((flow_min, map_min))
}

/// `phi_T` at `(p, 0)`.
pub fn phi_t(system: System, roof: &Roof, metric: Metric, p: SectionPoint, x0: &SuspensionPoint, horizon: f64) -> Result<f64> {
    let mut orbit = Orbit::from_point(system, p, Seeder::new(0).stream(Domain::Trial, 0))?;
    flow_min_distances(&mut orbit, roof, metric, x0, horizon, 0)
        .map(|(d, _)| phi_of_distance(d))
        .ok_or(LabError::Singular)
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRow {
    pub epsilon: f64,
    /// `a_n |b_{ceil(n(1+eps))} - b_n|`.
    pub shift: f64,
    /// `|1 - a_{ceil(n(1+eps))} / a_n|`.
    pub ratio: f64,
}

/// Both normalization-stability terms for `a_n = d`,
/// `b_n = (log n + log c) / d`.
pub fn normalization_stability(dim: &LocalDimensionEstimate, n: u64, eps: &[f64]) -> Vec<StabilityRow> {
    let d = dim.dimension;
    let b = |m: u64| ((m as f64).ln() + dim.log_c) / d;
    eps.iter()
        .map(|&e| {
            let m = (n as f64 * (1.0 + e)).ceil() as u64;
            StabilityRow {
                epsilon: e,
                shift: d * (b(m) - b(n)).abs(),
                ratio: 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowMaxReport {
    pub horizon: f64,
    pub h_bar: f64,
    /// `floor(T / h_bar)`.
    pub n_returns: u64,
    pub phi_t: Vec<f64>,
    pub phi_n: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub ks_phi_t: GumbelKs,
    pub ks_phi_n: GumbelKs,
    pub stability: Vec<StabilityRow>,
    pub truncated: usize,
}

/// `phi_T` and `Phi_N` (`N = floor(T / h_bar)`) over independent typical
/// starts `(p, 0)`, both normalized by the map constants of `dim` at `N`.
pub fn flow_evl(
    system: System,
    roof: &Roof,
    metric: Metric,
    x0: &SuspensionPoint,
    horizon: f64,
    h_bar: f64,
    dim: &LocalDimensionEstimate,
    trials: usize,
    burn_in: u64,
    seeder: &Seeder,
) -> Result<FlowMaxReport> {
    if trials < 1000 {
        return Err(LabError::Config(format!("need at least 1000 trials (got {trials})")));
    }
    roof.validate()?;
    let n_returns = (horizon / h_bar).floor() as u64;
    if n_returns == 0 {
        return Err(LabError::Config(format!("horizon {horizon} shorter than h_bar = {h_bar}")));
    }
    let runs: Vec<Result<Option<(f64, f64)>>> = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let mut orbit = Orbit::typical(system, seeder.stream(Domain::Trial, k), burn_in)?;
            Ok(flow_min_distances(&mut orbit, roof, metric, x0, horizon, n_returns))
        })
        .collect();
    let mut phi_t = Vec::with_capacity(trials);
    let mut phi_n = Vec::with_capacity(trials);
    let mut truncated = 0;
    for r in runs {
        match r? {
            Some((ft, fn_)) => {
                phi_t.push(phi_of_distance(ft));
                phi_n.push(phi_of_distance(fn_));
            }
            None => truncated += 1,
        }
    }
    if truncated > 0 {
        log::warn!("{truncated} flow trials hit the singular line");
    }
    let (a, b) = crate::evt::gumbel_normalization(dim, n_returns);
    Ok(FlowMaxReport {
        horizon,
        h_bar,
        n_returns,
        ks_phi_t: gumbel_ks(&phi_t, a, b)?,
        ks_phi_n: gumbel_ks(&phi_n, a, b)?,
        phi_t,
        phi_n,
        a,
        b,
        stability: normalization_stability(dim, n_returns, &[0.1, 0.03, 0.01]),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evt::{independent_maxima, Observable};
    use crate::maps::{LorenzMap, ModelParams};

    fn lorenz() -> System {
        System::Lorenz(LorenzMap::new(ModelParams::default()).unwrap())
    }

    #[test]
    fn advance_identity_and_return() {
        let sys = lorenz();
        let roof = Roof::for_system(&sys);
        let p = SectionPoint::new(0.3, -0.1);
        let q = SuspensionPoint::new(p, 0.2, &roof).unwrap();
        assert_eq!(advance_flow(&sys, &roof, q, 0.0).unwrap(), q);
        let q0 = SuspensionPoint::new(p, 0.0, &roof).unwrap();
        let r = advance_flow(&sys, &roof, q0, roof.height(&p)).unwrap();
        assert_eq!(r.base, sys.apply(p).unwrap());
        assert_eq!(r.u, 0.0);
    }

    #[test]
    fn advance_composes() {
        let sys = lorenz();
        let roof = Roof::for_system(&sys);
        let q = SuspensionPoint::new(SectionPoint::new(-0.27, 0.2), 0.5, &roof).unwrap();
        for (s, t) in [(0.3, 1.7), (2.5, 4.0), (10.0, 0.1)] {
            let a = advance_flow(&sys, &roof, advance_flow(&sys, &roof, q, s).unwrap(), t).unwrap();
            let b = advance_flow(&sys, &roof, q, s + t).unwrap();
            assert_eq!(a.base, b.base);
            assert!((a.u - b.u).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_roof_mean_is_exact() {
        let est = mean_return_time(lorenz(), &Roof::Constant(1.7), 1_000_000, 0, &Seeder::new(1)).unwrap();
        assert!((est.mean - 1.7).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn baker_mean_return_time() {
        // 1 + int_{-1/2}^{1/2} -log|x| dx = 2 + log 2
        let exact = 2.0 + std::f64::consts::LN_2;
        let est = mean_return_time(System::Baker, &Roof::for_system(&System::Baker), 1_000_000, 0, &Seeder::new(2))
            .unwrap();
        assert!((est.mean / exact - 1.0).abs() < 0.01, "{}", est.mean);
        assert_eq!(est.trace.last().unwrap().0, 1_000_000);
    }

    #[test]
    fn segment_max_closed_forms() {
        let roof = Roof::Logarithmic { lambda1: 1.0, tau0: 1.0 };
        let p0 = SectionPoint::new(0.01, 0.1);
        let x0 = SuspensionPoint::centered(p0, &roof).unwrap();
        assert_eq!(segment_max_phi(&roof, Metric::Euclidean, &p0, &x0).unwrap(), crate::evt::PHI_CAP);
        let p = SectionPoint::new(0.01, 0.2);
        let phi = segment_max_phi(&roof, Metric::Euclidean, &p, &x0).unwrap();
        assert!((phi - 10f64.ln()).abs() < 1e-12);
        // a segment too short to reach u0
        let short = SectionPoint::new(0.45, 0.1);
        let h = roof.height(&short);
        assert!(h < x0.u);
        let d = ((0.44f64).powi(2) + (x0.u - h).powi(2)).sqrt();
        assert!((segment_max_phi(&roof, Metric::Euclidean, &short, &x0).unwrap() + d.ln()).abs() < 1e-12);
    }

    #[test]
    fn segment_max_matches_time_grid() {
        let roof = Roof::Logarithmic { lambda1: 1.0, tau0: 1.0 };
        let x0 = SuspensionPoint::new(SectionPoint::new(0.1, -0.2), 1.9, &roof).unwrap();
        for p in [SectionPoint::new(0.4, 0.0), SectionPoint::new(-0.05, -0.21), SectionPoint::new(0.3, -0.19)] {
            let h = roof.height(&p);
            let steps = (h / 1e-4) as usize;
            let grid = (0..steps)
                .map(|k| {
                    let u = k as f64 * 1e-4;
                    let d = (p.euclidean(&x0.base).powi(2) + (u - x0.u).powi(2)).sqrt();
                    phi_of_distance(d)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let exact = segment_max_phi(&roof, Metric::Euclidean, &p, &x0).unwrap();
            assert!(exact >= grid - 1e-12);
            assert!((exact - grid).abs() < 1e-3, "{exact} vs {grid}");
        }
    }

    #[test]
    fn phi_t_monotone_and_dominates_segments() {
        let sys = lorenz();
        let roof = Roof::for_system(&sys);
        let x0 = SuspensionPoint::centered(SectionPoint::new(0.17, -0.25), &roof).unwrap();
        let p = SectionPoint::new(-0.31, 0.22);
        let mut last = f64::NEG_INFINITY;
        for t in [0.5, 1.0, 5.0, 20.0, 80.0, 300.0] {
            let v = phi_t(sys, &roof, Metric::Euclidean, p, &x0, t).unwrap();
            assert!(v >= last);
            last = v;
        }
        // over complete segments phi_T equals the max of Phi(F^k p)
        let mut q = p;
        let mut t = 0.0;
        let mut best = f64::NEG_INFINITY;
        for _ in 0..40 {
            best = best.max(segment_max_phi(&roof, Metric::Euclidean, &q, &x0).unwrap());
            t += roof.height(&q);
            q = sys.apply(q).unwrap();
        }
        assert_eq!(phi_t(sys, &roof, Metric::Euclidean, p, &x0, t).unwrap(), best);
    }

    #[test]
    fn unit_roof_reduces_to_map() {
        let sys = System::Baker;
        let roof = Roof::Constant(1.0);
        let p0 = SectionPoint::new(0.13, -0.21);
        let x0 = SuspensionPoint::centered(p0, &roof).unwrap();
        let seeder = Seeder::new(31);
        let n = 500;
        let dim = LocalDimensionEstimate {
            center: p0,
            radii: vec![],
            masses: vec![],
            dimension: 2.0,
            log_c: std::f64::consts::PI.ln(),
            r_squared: 1.0,
        };
        let rep = flow_evl(sys, &roof, Metric::Euclidean, &x0, n as f64, 1.0, &dim, 1000, 0, &seeder).unwrap();
        let obs = Observable::new(p0, Metric::Euclidean);
        let map = independent_maxima(sys, &obs, n, 1000, 0, &seeder).unwrap();
        assert_eq!(rep.phi_t, map.maxima());
        assert_eq!(rep.phi_n, map.maxima());
    }

    #[test]
    fn stability_terms_shrink() {
        let dim = LocalDimensionEstimate {
            center: SectionPoint::new(0.0, 0.0),
            radii: vec![],
            masses: vec![],
            dimension: 1.1,
            log_c: 0.3,
            r_squared: 1.0,
        };
        let rows = normalization_stability(&dim, 100_000, &[0.1, 0.03, 0.01]);
        assert!(rows.windows(2).all(|w| w[1].shift < w[0].shift));
        assert!((rows[0].shift - 1.1f64.ln()).abs() < 1e-4);
    }
}
