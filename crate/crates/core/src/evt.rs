//! Extreme values of `phi = -log d(., x0)` along orbits: levels, maxima,
//! the dependence diagnostics D3 and D', and the rare-event point process.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::maps::{Orbit, SectionPoint, System};
use crate::measure::{LocalDimensionEstimate, OrbitScan, RadialMass, RadialProfile, Shape};
use crate::rng::{Domain, Seeder};
use crate::stats::{self, binomial_sigma, ks_distance, ks_two_sample, CountTest, GumbelFit};

/// Observable values are clamped here; events are decided on radii.
pub const PHI_CAP: f64 = 700.0;
/// Half-width of the dimension band in the level bracket.
pub const BRACKET_EPS: f64 = 0.1;
/// Horizon of the finite non-periodicity check.
pub const PERIODICITY_HORIZON: u64 = 50;
const MIN_EXCEEDANCES: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Max,
}

impl Metric {
    pub fn shape(self) -> Shape {
        match self {
            Metric::Euclidean => Shape::Ball,
            Metric::Max => Shape::Square,
        }
    }
}

pub fn phi_of_distance(d: f64) -> f64 {
    if d <= 0.0 {
        PHI_CAP
    } else {
        (-d.ln()).min(PHI_CAP)
    }
}

/// Radius of the level set `{phi > u}`.
pub fn level_radius(u: f64) -> f64 {
    (-u).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub center: SectionPoint,
    pub metric: Metric,
}

impl Observable {
    pub fn new(center: SectionPoint, metric: Metric) -> Self {
        Self { center, metric }
    }

    #[inline]
    pub fn distance(&self, p: &SectionPoint) -> f64 {
        self.metric.shape().distance(p, &self.center)
    }

    pub fn value(&self, p: &SectionPoint) -> f64 {
        phi_of_distance(self.distance(p))
    }

    /// `phi(p) > u`, i.e. `p` in the open ball of radius `e^-u`.
    pub fn exceeds(&self, p: &SectionPoint, u: f64) -> bool {
        self.distance(p) < level_radius(u)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Level {
    pub n: u64,
    pub v: f64,
    /// `e^-v / n`.
    pub target: f64,
    pub radius: f64,
    pub u: f64,
    pub mass: f64,
    /// `[(v + log n) / (d + eps), (v + log n) / (d - eps)]`.
    pub bracket: (f64, f64),
    pub in_bracket: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSchedule {
    pub center: SectionPoint,
    pub shape: Shape,
    pub levels: Vec<Level>,
    pub dimension: LocalDimensionEstimate,
}

impl LevelSchedule {
    pub fn get(&self, n: u64, v: f64) -> Option<&Level> {
        self.levels.iter().find(|l| l.n == n && l.v == v)
    }

    pub fn for_n(&self, n: u64) -> Vec<&Level> {
        self.levels.iter().filter(|l| l.n == n).collect()
    }
}

/// Power law `mu(B_r) = c r^d` through the points `(r_n(v), e^-v / n)`
/// obtained by inverting the measure on a grid of `v`.
pub fn level_fit(m: &dyn RadialMass, n: u64, v_grid: &[f64]) -> Result<LocalDimensionEstimate> {
    let mut radii = Vec::new();
    let mut masses = Vec::new();
    for &v in v_grid {
        let target = (-v).exp() / n as f64;
        radii.push(m.invert(target)?);
        masses.push(target);
    }
    fit_power_law(m.center(), radii, masses)
}

fn fit_power_law(center: SectionPoint, radii: Vec<f64>, masses: Vec<f64>) -> Result<LocalDimensionEstimate> {
    if radii.len() < 3 {
        return Err(LabError::Estimation("power-law fit needs at least three radii".into()));
    }
    let lx: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = masses.iter().map(|m| m.ln()).collect();
    let fit = stats::linear_fit(&lx, &ly)?;
    Ok(LocalDimensionEstimate {
        center,
        radii,
        masses,
        dimension: fit.slope,
        log_c: fit.intercept,
        r_squared: fit.r_squared,
    })
}

/// `v` grid of the power-law fit behind the linear Gumbel normalization.
pub const NORMALIZATION_V_GRID: [f64; 11] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

/// Levels `u_n(v) = -log r` with `mu(B_r) = e^-v / n`, by exact radius
/// inversion. The dimension used for the bracket is the power-law fit
/// through all levels of the schedule.
pub fn levels(m: &dyn RadialMass, v_grid: &[f64], n_grid: &[u64]) -> Result<LevelSchedule> {
    if v_grid.is_empty() || n_grid.is_empty() {
        return Err(LabError::Config("empty v or n grid".into()));
    }
    let mut raw = Vec::new();
    for &n in n_grid {
        for &v in v_grid {
            let target = (-v).exp() / n as f64;
            let radius = m.invert(target)?;
            let mass = m.count_within(radius) as f64 / m.total() as f64;
            raw.push((n, v, target, radius, mass));
        }
    }
    let (mut radii, mut targets): (Vec<f64>, Vec<f64>) = raw.iter().map(|l| (l.3, l.2)).unzip();
    if raw.len() < 3 {
        // too few schedule points for a slope; borrow the normalization grid
        for &v in &NORMALIZATION_V_GRID {
            let target = (-v).exp() / n_grid[0] as f64;
            radii.push(m.invert(target)?);
            targets.push(target);
        }
    }
    let dimension = fit_power_law(m.center(), radii, targets)?;
    let d = dimension.dimension;
    let levels = raw
        .into_iter()
        .map(|(n, v, target, radius, mass)| {
            let u = -radius.ln();
            let s = v + (n as f64).ln();
            let bracket = (s / (d + BRACKET_EPS), s / (d - BRACKET_EPS));
            Level {
                n,
                v,
                target,
                radius,
                u,
                mass,
                bracket,
                in_bracket: bracket.0 <= u && u <= bracket.1,
            }
        })
        .collect();
    Ok(LevelSchedule {
        center: m.center(),
        shape: m.shape(),
        levels,
        dimension,
    })
}

/// `-log(n mu(B_d))` for each trial minimum `d`: the maxima pushed through
/// the empirical level map, Gumbel in the limit without a power-law fit.
pub fn level_transformed(sample: &MaximaSample, m: &dyn RadialMass) -> Vec<f64> {
    let n = sample.n as f64;
    sample
        .min_distances
        .iter()
        .map(|&d| {
            let mass = (m.count_within(d) as f64).max(0.5) / m.total() as f64;
            -(n * mass).ln()
        })
        .collect()
}

/// A point of a typical orbit after `burn_in` steps: a center drawn from
/// the invariant measure.
pub fn generic_center(system: System, burn_in: u64, seeder: &Seeder) -> Result<SectionPoint> {
    Ok(Orbit::typical(system, seeder.stream(Domain::Center, 1), burn_in)?.current())
}

/// `min_{1 <= j <= horizon} d(F^j x0, x0)`; a periodic-center error if it
/// is not above `r`.
pub fn check_nonperiodic(system: System, obs: &Observable, r: f64, horizon: u64, seeder: &Seeder) -> Result<f64> {
    let mut orbit = Orbit::from_point(system, obs.center, seeder.stream(Domain::Center, 0))?;
    let mut closest = f64::INFINITY;
    for _ in 0..horizon {
        if !orbit.advance() {
            break;
        }
        closest = closest.min(obs.distance(&orbit.current()));
    }
    if closest <= r {
        return Err(LabError::Periodic(format!(
            "orbit of x0 returns within {closest:.3e} <= r = {r:.3e} in {horizon} steps"
        )));
    }
    Ok(closest)
}

/// Per-trial minima of `d(X_j, x0)` over `0 <= j < n`.
#[derive(Debug, Clone, Serialize)]
pub struct MaximaSample {
    pub n: u64,
    pub min_distances: Vec<f64>,
    pub excluded: usize,
}

impl MaximaSample {
    pub fn maxima(&self) -> Vec<f64> {
        self.min_distances.iter().map(|&d| phi_of_distance(d)).collect()
    }

    /// Fraction of trials with `M_n <= u` where `r = e^-u`: no visit to the
    /// open ball of radius `r`.
    pub fn fraction_below(&self, r: f64) -> f64 {
        let ok = self.min_distances.iter().filter(|&&d| d >= r).count();
        ok as f64 / self.min_distances.len() as f64
    }
}

/// Closest approach to the center along `n` points of an orbit.
pub fn orbit_min_distance(orbit: &mut Orbit, obs: &Observable, n: u64) -> Option<f64> {
    let c = obs.center;
    let mut best = f64::INFINITY;
    for j in 0..n {
        let p = orbit.current();
        let (dx, dy) = ((p.x - c.x).abs(), (p.y - c.y).abs());
        let d = match obs.metric {
            Metric::Euclidean => dx * dx + dy * dy,
            Metric::Max => dx.max(dy),
        };
        best = best.min(d);
        if j + 1 < n && !orbit.advance() {
            return None;
        }
    }
    Some(match obs.metric {
        Metric::Euclidean => best.sqrt(),
        Metric::Max => best,
    })
}

/// First `j < n` with `X_j > u` (distance below `r`), if any.
pub fn first_entry(orbit: &mut Orbit, obs: &Observable, r: f64, n: u64) -> Option<u64> {
    for j in 0..n {
        if obs.distance(&orbit.current()) < r {
            return Some(j);
        }
        if j + 1 < n && !orbit.advance() {
            return None;
        }
    }
    None
}

/// Maxima over `trials` independent typical orbits of length `n`.
pub fn independent_maxima(
    system: System,
    obs: &Observable,
    n: u64,
    trials: usize,
    burn_in: u64,
    seeder: &Seeder,
) -> Result<MaximaSample> {
    if trials < 1000 {
        return Err(LabError::Config(format!("need at least 1000 trials (got {trials})")));
    }
    let runs: Vec<Result<Option<f64>>> = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let mut orbit = Orbit::typical(system, seeder.stream(Domain::Trial, k), burn_in)?;
            Ok(orbit_min_distance(&mut orbit, obs, n))
        })
        .collect();
    let mut min_distances = Vec::with_capacity(trials);
    let mut excluded = 0;
    for r in runs {
        match r? {
            Some(d) => min_distances.push(d),
            None => excluded += 1,
        }
    }
    Ok(MaximaSample { n, min_distances, excluded })
}

/// Maxima over consecutive non-overlapping blocks of the scanned orbits.
/// Blocks without a recorded visit get the scan cap as their minimum.
pub fn block_maxima(scan: &OrbitScan, n: u64) -> MaximaSample {
    let mut min_distances = Vec::new();
    for seg in &scan.segments {
        let blocks = seg.len / n;
        let mut mins = vec![scan.r_cap; blocks as usize];
        for h in &seg.hits {
            let b = h.t / n;
            if b < blocks {
                let m = &mut mins[b as usize];
                *m = m.min(h.dist);
            }
        }
        min_distances.extend(mins);
    }
    MaximaSample {
        n,
        min_distances,
        excluded: scan.truncations,
    }
}

/// Positions `< len` of a Bernoulli(`p`) sequence, by geometric skips.
pub fn bernoulli_positions<R: Rng>(rng: &mut R, p: f64, len: u64) -> Vec<u64> {
    let mut out = Vec::new();
    if p <= 0.0 {
        return out;
    }
    if p >= 1.0 {
        return (0..len).collect();
    }
    let log_q = (-p).ln_1p();
    let mut pos = 0u64;
    loop {
        let u: f64 = 1.0 - rng.random::<f64>();
        let skip = (u.ln() / log_q).floor();
        if skip >= (len - pos) as f64 {
            return out;
        }
        pos += skip as u64;
        out.push(pos);
        pos += 1;
        if pos >= len {
            return out;
        }
    }
}

/// Maxima of `n` independent draws from the empirical measure: the number
/// of draws inside the profile cap is binomial, and each such draw takes a
/// uniformly chosen recorded distance.
pub fn iid_maxima(profile: &RadialProfile, n: u64, trials: usize, seeder: &Seeder) -> Result<MaximaSample> {
    if trials < 1000 {
        return Err(LabError::Config(format!("need at least 1000 trials (got {trials})")));
    }
    let d = profile.distances();
    if d.is_empty() {
        return Err(LabError::Resolution("empty radial profile".into()));
    }
    let p_cap = d.len() as f64 / profile.total as f64;
    let min_distances = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeder.stream(Domain::Control, k);
            let hits = bernoulli_positions(&mut rng, p_cap, n).len();
            (0..hits)
                .map(|_| d[rng.random_range(0..d.len())])
                .fold(profile.r_cap, f64::min)
        })
        .collect();
    Ok(MaximaSample {
        n,
        min_distances,
        excluded: 0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CdfRow {
    pub n: u64,
    pub v: f64,
    pub u: f64,
    pub radius: f64,
    pub p_hat: f64,
    pub limit: f64,
    pub sigma: f64,
}

/// `P(M_n <= u_n(v))` for every level of the schedule at the sample's `n`.
pub fn block_maxima_cdf(sample: &MaximaSample, schedule: &LevelSchedule) -> Vec<CdfRow> {
    schedule
        .for_n(sample.n)
        .into_iter()
        .map(|l| {
            let limit = stats::gumbel_cdf(l.v);
            CdfRow {
                n: l.n,
                v: l.v,
                u: l.u,
                radius: l.radius,
                p_hat: sample.fraction_below(l.radius),
                limit,
                sigma: binomial_sigma(limit, sample.min_distances.len()),
            }
        })
        .collect()
}

/// `a = d`, `b = (log n + log c) / d` from `mu(B_r) ~ c r^d`.
pub fn gumbel_normalization(dim: &LocalDimensionEstimate, n: u64) -> (f64, f64) {
    let d = dim.dimension;
    (d, ((n as f64).ln() + dim.log_c) / d)
}

#[derive(Debug, Clone, Serialize)]
pub struct GumbelKs {
    pub a: f64,
    pub b: f64,
    pub ks: f64,
    pub p_value: f64,
    /// Fit of the normalized sample; `(0, 1)` under the limit law.
    pub mle: GumbelFit,
}

pub fn gumbel_ks(maxima: &[f64], a: f64, b: f64) -> Result<GumbelKs> {
    if maxima.len() < 1000 {
        return Err(LabError::Config(format!("need at least 1000 maxima (got {})", maxima.len())));
    }
    let z: Vec<f64> = maxima.iter().map(|m| a * (m - b)).collect();
    let mle = stats::gumbel_mle(&z)?;
    let ks = ks_distance(&z, stats::gumbel_cdf);
    Ok(GumbelKs {
        a,
        b,
        ks,
        p_value: stats::kolmogorov_pvalue(ks, z.len()),
        mle,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DPrimeRow {
    pub n: u64,
    pub v: f64,
    pub k: u64,
    pub lag_max: u64,
    pub exceedances: u64,
    pub pairs: u64,
    pub e_hat: f64,
    pub sigma: f64,
    /// `e^-2v / k`, the value under independence.
    pub independent: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DPrimeTable {
    pub rows: Vec<DPrimeRow>,
    pub warnings: Vec<String>,
}

impl DPrimeTable {
    pub fn get(&self, n: u64, k: u64) -> Option<&DPrimeRow> {
        self.rows.iter().find(|r| r.n == n && r.k == k)
    }
}

/// Per-segment estimates of `n sum_{j=1}^{lag} mu(X_0 > u, X_j > u)` from
/// pair counts, with lag `j` normalized by the `len - j` available starts.
fn pair_sums(times: &[Vec<u64>], lens: &[u64], lag: u64, n: u64) -> (Vec<f64>, u64) {
    let mut total_pairs = 0;
    let per: Vec<f64> = times
        .iter()
        .zip(lens)
        .map(|(t, &len)| {
            let mut acc = 0.0;
            for (a, &s) in t.iter().enumerate() {
                for &e in t[a + 1..].iter().take_while(|&&e| e - s <= lag) {
                    acc += 1.0 / (len - (e - s)) as f64;
                    total_pairs += 1;
                }
            }
            n as f64 * acc
        })
        .collect();
    (per, total_pairs)
}

fn mean_and_sem(xs: &[f64]) -> (f64, f64) {
    let m = stats::mean(xs);
    let s = if xs.len() > 1 {
        stats::std_dev(xs) / (xs.len() as f64).sqrt()
    } else {
        f64::NAN
    };
    (m, s)
}

/// `E(n, k) = n sum_{j=1}^{floor(n/k)} mu(X_0 > u_n, X_j > u_n)` by pair
/// counting along the scanned orbits; the error is the spread over
/// segments.
pub fn d_prime_stat(scan: &OrbitScan, schedule: &LevelSchedule, v: f64, n_grid: &[u64], k_grid: &[u64]) -> Result<DPrimeTable> {
    let lens: Vec<u64> = scan.segments.iter().map(|s| s.len).collect();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &n in n_grid {
        let level = schedule
            .get(n, v)
            .ok_or_else(|| LabError::Config(format!("no level for n = {n}, v = {v}")))?;
        let times: Vec<Vec<u64>> = scan.segments.iter().map(|s| s.times_within(level.radius)).collect();
        let exceedances: u64 = times.iter().map(|t| t.len() as u64).sum();
        if exceedances < MIN_EXCEEDANCES {
            warnings.push(format!(
                "n = {n}: only {exceedances} exceedances (< {MIN_EXCEEDANCES}); widen the level or lengthen the scan"
            ));
        }
        for &k in k_grid {
            let lag_max = n / k;
            let (per, pairs) = pair_sums(&times, &lens, lag_max, n);
            let (e_hat, sigma) = mean_and_sem(&per);
            rows.push(DPrimeRow {
                n,
                v,
                k,
                lag_max,
                exceedances,
                pairs,
                e_hat,
                sigma,
                independent: (-2.0 * v).exp() / k as f64,
            });
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DPrimeTable { rows, warnings })
}

/// The same statistic for an i.i.d. Bernoulli(`p`) exceedance sequence.
pub fn d_prime_iid(p: f64, n: u64, k_grid: &[u64], segments: usize, seg_len: u64, seeder: &Seeder) -> Vec<DPrimeRow> {
    let times: Vec<Vec<u64>> = (0..segments as u64)
        .into_par_iter()
        .map(|s| bernoulli_positions(&mut seeder.stream(Domain::Control, s), p, seg_len))
        .collect();
    let lens = vec![seg_len; segments];
    let exceedances = times.iter().map(|t| t.len() as u64).sum();
    k_grid
        .iter()
        .map(|&k| {
            let lag_max = n / k;
            let (per, pairs) = pair_sums(&times, &lens, lag_max, n);
            let (e_hat, sigma) = mean_and_sem(&per);
            DPrimeRow {
                n,
                v: -(n as f64 * p).ln(),
                k,
                lag_max,
                exceedances,
                pairs,
                e_hat,
                sigma,
                independent: (n as f64 * p).powi(2) / k as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct D3Row {
    pub n: u64,
    pub t: u64,
    pub l: u64,
    pub exceedances: u64,
    /// Exceedances with a complete window `[s + t, s + t + l)`.
    pub anchored: u64,
    pub p: f64,
    /// `mu(M_l <= u)`.
    pub q: f64,
    /// `mu(M_{t,l} <= u | X_0 > u)`.
    pub q_cond: f64,
    /// Signed `mu(X_0 > u, M_{t,l} <= u) - mu(X_0 > u) mu(M_l <= u)`.
    pub gamma: f64,
    pub sigma: f64,
}

impl D3Row {
    pub fn within(&self, k: f64) -> bool {
        self.gamma.abs() <= k * self.sigma
    }
}

/// `(#positions s with no exceedance in [s, s + l), #positions)` in one
/// segment, counted from the gaps between exceedances.
fn clean_windows(times: &[u64], len: u64, l: u64) -> (u64, u64) {
    if l > len {
        return (0, 0);
    }
    let mut clean = 0;
    let mut prev: i64 = -1;
    for &t in times.iter().chain(std::iter::once(&len)) {
        let run = t as i64 - prev - 1;
        clean += (run - l as i64 + 1).max(0) as u64;
        prev = t as i64;
    }
    (clean, len - l + 1)
}

/// `gamma(n, t)` for each `t` in the grid at the level radius `r`; `l` is
/// the length of the later block.
pub fn d3_stat(scan: &OrbitScan, r: f64, n: u64, t_grid: &[u64], l: u64) -> Result<Vec<D3Row>> {
    if l > n {
        return Err(LabError::Config(format!("block length l = {l} exceeds n = {n}")));
    }
    for &t in t_grid {
        if t > n / 2 {
            log::warn!("t = {t} exceeds n/2 = {}", n / 2);
        }
    }
    let times: Vec<Vec<u64>> = scan.segments.iter().map(|s| s.times_within(r)).collect();
    let exceedances: u64 = times.iter().map(|t| t.len() as u64).sum();
    if exceedances < MIN_EXCEEDANCES {
        log::warn!("only {exceedances} exceedances (< {MIN_EXCEEDANCES})");
    }
    let total_len: u64 = scan.segments.iter().map(|s| s.len).sum();
    let p = exceedances as f64 / total_len as f64;
    let (clean, windows) = scan
        .segments
        .iter()
        .zip(&times)
        .map(|(s, t)| clean_windows(t, s.len, l))
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let q = if l == 0 { 1.0 } else { clean as f64 / windows as f64 };
    let rows = t_grid
        .iter()
        .map(|&t| {
            let mut anchored = 0u64;
            let mut kept = 0u64;
            let mut per_segment = Vec::with_capacity(times.len());
            for (seg, ts) in scan.segments.iter().zip(&times) {
                let (mut a_s, mut k_s) = (0u64, 0u64);
                for &s in ts {
                    let start = s + t;
                    if start + l > seg.len {
                        break;
                    }
                    a_s += 1;
                    let idx = ts.partition_point(|&x| x < start);
                    if idx == ts.len() || ts[idx] >= start + l {
                        k_s += 1;
                    }
                }
                anchored += a_s;
                kept += k_s;
                if l > 0 && a_s > 0 {
                    let (c_s, w_s) = clean_windows(ts, seg.len, l);
                    let p_s = ts.len() as f64 / seg.len as f64;
                    per_segment.push(p_s * (k_s as f64 / a_s as f64 - c_s as f64 / w_s as f64));
                }
            }
            let (q_cond, gamma, sigma) = if l == 0 {
                (1.0, 0.0, 0.0)
            } else {
                let qc = kept as f64 / anchored.max(1) as f64;
                (qc, p * (qc - q), mean_and_sem(&per_segment).1)
            };
            D3Row {
                n,
                t,
                l,
                exceedances,
                anchored,
                p,
                q,
                q_cond,
                gamma,
                sigma,
            }
        })
        .collect();
    Ok(rows)
}

/// `ceil((log n)^5)`.
pub fn d3_horizon(n: u64) -> u64 {
    (n as f64).ln().powi(5).ceil() as u64
}

/// A finite union of half-open intervals `[a, b)` in rescaled time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub intervals: Vec<(f64, f64)>,
}

impl Window {
    pub fn interval(a: f64, b: f64) -> Self {
        Self { intervals: vec![(a, b)] }
    }

    pub fn validate(&self) -> Result<()> {
        let mut iv = self.intervals.clone();
        iv.sort_by(|x, y| x.0.total_cmp(&y.0));
        for (k, &(a, b)) in iv.iter().enumerate() {
            if !(a >= 0.0 && b > a && b.is_finite()) {
                return Err(LabError::Config(format!("bad window interval [{a}, {b})")));
            }
            if k > 0 && a < iv[k - 1].1 {
                return Err(LabError::Config("window intervals overlap".into()));
            }
        }
        if iv.is_empty() {
            return Err(LabError::Config("empty window".into()));
        }
        Ok(())
    }

    pub fn end(&self) -> f64 {
        self.intervals.iter().map(|i| i.1).fold(0.0, f64::max)
    }

    /// Length in rescaled time: the Poisson mean of the count.
    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(|i| i.1 - i.0).sum()
    }

    /// `#{j in times : j / a_n in window}`.
    pub fn count(&self, times: &[u64], a_n: f64) -> u64 {
        self.intervals
            .iter()
            .map(|&(a, b)| {
                let lo = (a * a_n).ceil() as u64;
                let hi = (b * a_n).ceil() as u64;
                (times.partition_point(|&t| t < hi) - times.partition_point(|&t| t < lo)) as u64
            })
            .sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReppCounts {
    pub radius: f64,
    pub mass: f64,
    /// `1 / mu(X_0 > u_n)`.
    pub a_n: f64,
    pub windows: Vec<Window>,
    /// `counts[trial][window]`.
    pub counts: Vec<Vec<u64>>,
    /// Time from first to second exceedance divided by `a_n`.
    pub gaps: Vec<f64>,
    /// Trials whose second exceedance did not come within the gap horizon.
    pub censored_gaps: usize,
    pub partial: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReppSummary {
    pub windows: Vec<CountTest>,
    pub gap_ks: f64,
    pub gap_p_value: f64,
}

impl ReppCounts {
    pub fn window_counts(&self, w: usize) -> Vec<u64> {
        self.counts.iter().map(|c| c[w]).collect()
    }

    pub fn summary(&self) -> Result<ReppSummary> {
        let windows = (0..self.windows.len())
            .map(|w| stats::poisson_count_test(&self.window_counts(w), self.windows[w].measure()))
            .collect::<Result<Vec<_>>>()?;
        let gap_ks = ks_distance(&self.gaps, stats::exp_cdf);
        Ok(ReppSummary {
            windows,
            gap_ks,
            gap_p_value: stats::kolmogorov_pvalue(gap_ks, self.gaps.len()),
        })
    }
}

/// Gaps are followed for at most this many multiples of `a_n`.
pub const GAP_HORIZON: f64 = 30.0;

/// Exceedance counts `N_n(I) = #{j in a_n I : X_j > u_n}` over independent
/// typical orbits, with exceedance meaning distance `< radius` and
/// `a_n = 1 / mass`. Stops once `budget` map steps are used.
pub fn repp(
    system: System,
    obs: &Observable,
    radius: f64,
    mass: f64,
    windows: &[Window],
    trials: usize,
    budget: u64,
    seeder: &Seeder,
) -> Result<ReppCounts> {
    if windows.is_empty() {
        return Err(LabError::Config("no windows".into()));
    }
    for w in windows {
        w.validate()?;
    }
    if !(mass > 0.0 && mass < 1.0) {
        return Err(LabError::Config(format!("exceedance mass {mass} must lie in (0, 1)")));
    }
    let a_n = 1.0 / mass;
    let horizon = (windows.iter().map(Window::end).fold(0.0, f64::max) * a_n).ceil() as u64;
    let gap_cap = (GAP_HORIZON * a_n).ceil() as u64;
    let per_trial = horizon + gap_cap;
    let affordable = (budget / per_trial.max(1)) as usize;
    let used = trials.min(affordable.max(1));
    let partial = used < trials;
    if partial {
        log::warn!("budget {budget} covers {used} of {trials} trials");
    }
    let runs: Vec<Result<Option<(Vec<u64>, Option<u64>)>>> = (0..used as u64)
        .into_par_iter()
        .map(|k| {
            let mut orbit = Orbit::typical(system, seeder.stream(Domain::Trial, k), 0)?;
            let mut times = Vec::new();
            let mut first: Option<u64> = None;
            let mut gap = None;
            let mut j = 0u64;
            loop {
                if obs.distance(&orbit.current()) < radius {
                    if j < horizon {
                        times.push(j);
                    }
                    match first {
                        None => first = Some(j),
                        Some(f) if gap.is_none() => gap = Some(j - f),
                        _ => {}
                    }
                }
                j += 1;
                let gap_done = match first {
                    Some(f) => gap.is_some() || j > f + gap_cap,
                    None => j >= horizon,
                };
                if j >= horizon && gap_done {
                    break;
                }
                if !orbit.advance() {
                    return Ok(None);
                }
            }
            let counts = windows.iter().map(|w| w.count(&times, a_n)).collect();
            Ok(Some((counts, gap)))
        })
        .collect();
    let mut counts = Vec::with_capacity(used);
    let mut gaps = Vec::new();
    let mut censored_gaps = 0;
    for r in runs {
        if let Some((c, g)) = r? {
            counts.push(c);
            match g {
                Some(g) => gaps.push(g as f64 / a_n),
                None => censored_gaps += 1,
            }
        }
    }
    Ok(ReppCounts {
        radius,
        mass,
        a_n,
        windows: windows.to_vec(),
        counts,
        gaps,
        censored_gaps,
        partial,
    })
}

/// Window counts of a rate-one Poisson process built from Exp(1) gaps.
pub fn poisson_control(windows: &[Window], trials: usize, seeder: &Seeder) -> Result<ReppCounts> {
    for w in windows {
        w.validate()?;
    }
    let scale = 1e6;
    let end = windows.iter().map(Window::end).fold(0.0, f64::max);
    let runs: Vec<(Vec<u64>, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeder.stream(Domain::Control, k);
            let mut t = 0.0;
            let mut times = Vec::new();
            let mut first_gap = f64::NAN;
            loop {
                let e = -(1.0 - rng.random::<f64>()).ln();
                t += e;
                if times.len() == 1 {
                    first_gap = e;
                }
                if t >= end && !first_gap.is_nan() {
                    break;
                }
                if t < end {
                    times.push((t * scale) as u64);
                } else if times.is_empty() {
                    times.push(u64::MAX);
                }
            }
            times.retain(|&x| x != u64::MAX);
            (windows.iter().map(|w| w.count(&times, scale)).collect(), first_gap)
        })
        .collect();
    let (counts, gaps) = runs.into_iter().unzip();
    Ok(ReppCounts {
        radius: f64::NAN,
        mass: 1.0 / scale,
        a_n: scale,
        windows: windows.to_vec(),
        counts,
        gaps,
        censored_gaps: 0,
        partial: false,
    })
}

/// KS distance between `phi(X_j)` for `j in [0, n)` and `j in [n, 2n)`
/// along one typical orbit.
pub fn stationarity_ks(system: System, obs: &Observable, n: u64, burn_in: u64, seeder: &Seeder) -> Result<f64> {
    let mut orbit = Orbit::typical(system, seeder.stream(Domain::Trial, u64::MAX >> 16), burn_in)?;
    let mut first = Vec::with_capacity(n as usize);
    let mut second = Vec::with_capacity(n as usize);
    for j in 0..2 * n {
        let x = obs.value(&orbit.current());
        if j < n {
            first.push(x);
        } else {
            second.push(x);
        }
        if !orbit.advance() {
            return Err(LabError::Singular);
        }
    }
    Ok(ks_two_sample(&first, &second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{LorenzMap, ModelParams};
    use crate::measure::{EmpiricalMeasure, MeasureOptions};
    use rand::SeedableRng;

    #[test]
    fn level_set_is_open_ball() {
        let obs = Observable::new(SectionPoint::new(0.1, 0.1), Metric::Euclidean);
        let u = 3.0;
        let r = level_radius(u);
        let inside = SectionPoint::new(0.1 + 0.999 * r, 0.1);
        let edge = SectionPoint::new(0.1 + r * (1.0 + 1e-12), 0.1);
        assert!(obs.exceeds(&inside, u));
        assert!(!obs.exceeds(&edge, u));
        assert!(obs.value(&inside) > u);
        assert_eq!(obs.value(&obs.center), PHI_CAP);
    }

    #[test]
    fn max_metric_gives_squares() {
        let obs = Observable::new(SectionPoint::new(0.0, 0.0), Metric::Max);
        assert_eq!(obs.distance(&SectionPoint::new(0.1, -0.05)), 0.1);
    }

    fn baker_levels() -> (EmpiricalMeasure, LevelSchedule) {
        let m = EmpiricalMeasure::build(System::Baker, 2_000_000, 0, &Seeder::new(4), MeasureOptions::default()).unwrap();
        let c = SectionPoint::new(0.13, -0.21);
        let s = levels(&m.at(c, Shape::Ball), &[-1.0, 0.0, 1.0, 2.0], &[100, 1000]).unwrap();
        (m, s)
    }

    #[test]
    fn levels_round_trip_and_order() {
        let (_, s) = baker_levels();
        for l in &s.levels {
            let nm = l.n as f64 * l.mass;
            assert!((nm / (-l.v).exp() - 1.0).abs() < 0.04, "{l:?}");
        }
        for n in [100, 1000] {
            let us: Vec<f64> = s.for_n(n).iter().map(|l| l.u).collect();
            assert!(us.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(s.get(1000, 0.0).unwrap().u > s.get(100, 0.0).unwrap().u);
        // Lebesgue: pi r^2 = e^-v / n
        let l = s.get(1000, 0.0).unwrap();
        let exact = (1.0 / (1000.0 * std::f64::consts::PI)).sqrt();
        assert!((l.radius / exact - 1.0).abs() < 0.05);
        assert!((s.dimension.dimension - 2.0).abs() < 0.05);
    }

    #[test]
    fn bracket_arithmetic() {
        // v = 0, n = 1e6, d = 1.05
        let s = (1e6f64).ln();
        assert!((s / 1.05 - 13.157).abs() < 1e-3);
        assert!(s / 1.15 <= s / 1.05 && s / 1.05 <= s / 0.95);
    }

    #[test]
    fn baker_maxima_match_gumbel() {
        let (_, s) = baker_levels();
        let obs = Observable::new(s.center, Metric::Euclidean);
        let seeder = Seeder::new(8);
        check_nonperiodic(System::Baker, &obs, s.get(1000, -1.0).unwrap().radius, PERIODICITY_HORIZON, &seeder)
            .unwrap();
        let sample = independent_maxima(System::Baker, &obs, 1000, 2000, 0, &seeder).unwrap();
        for row in block_maxima_cdf(&sample, &s) {
            assert!((row.p_hat - row.limit).abs() < 4.0 * row.sigma + 0.01, "{row:?}");
        }
    }

    #[test]
    fn hitting_time_identity_and_monotone_coupling() {
        let obs = Observable::new(SectionPoint::new(0.2, 0.3), Metric::Euclidean);
        let seeder = Seeder::new(13);
        let (r1, r2) = (0.01, 0.02);
        for k in 0..200 {
            let mut a = Orbit::typical(System::Baker, seeder.stream(Domain::Trial, k), 0).unwrap();
            let mut b = a.clone();
            let d = orbit_min_distance(&mut a, &obs, 500).unwrap();
            let hit = first_entry(&mut b, &obs, r1, 500);
            assert_eq!(d >= r1, hit.is_none());
            // M_n <= u(r1) implies M_n <= u(r2) for r1 < r2 smaller levels
            if d >= r2 {
                assert!(d >= r1);
            }
        }
    }

    #[test]
    fn periodic_center_rejected() {
        let p = SectionPoint::new(0.0, 0.0);
        let obs = Observable::new(p, Metric::Euclidean);
        let err = check_nonperiodic(System::Baker, &obs, 1e-3, PERIODICITY_HORIZON, &Seeder::new(1));
        // baker fixes (0, 1/2), not (0, 0); (0, 0) maps to (0, 1/4) then toward 1/2
        assert!(err.is_ok());
        let map = LorenzMap::new(ModelParams::default()).unwrap();
        let lorenz = System::Lorenz(map);
        let q = map.period_two_orbit().unwrap()[0];
        let obs = Observable::new(q, Metric::Euclidean);
        assert!(matches!(
            check_nonperiodic(lorenz, &obs, 1e-4, PERIODICITY_HORIZON, &Seeder::new(1)),
            Err(LabError::Periodic(_))
        ));
    }

    #[test]
    fn synthetic_gumbel_ks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g: Vec<f64> = (0..10_000).map(|_| -(-(rng.random::<f64>()).ln()).ln()).collect();
        let r = gumbel_ks(&g, 1.0, 0.0).unwrap();
        assert!(r.ks <= 0.02, "{}", r.ks);
        assert!(r.mle.location.abs() < 0.05 && (r.mle.scale - 1.0).abs() < 0.05);
    }

    #[test]
    fn exponential_maxima_ks() {
        // max of n Exp(1) minus log n is Gumbel in the limit
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let n = 1000;
        let m: Vec<f64> = (0..1000)
            .map(|_| (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).fold(0.0, f64::max))
            .collect();
        let r = gumbel_ks(&m, 1.0, (n as f64).ln()).unwrap();
        assert!(r.ks <= 0.05, "{}", r.ks);
    }

    #[test]
    fn degenerate_maxima_rejected() {
        assert!(gumbel_ks(&vec![1.0; 1000], 1.0, 0.0).is_err());
        assert!(gumbel_ks(&[1.0, 2.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn bernoulli_positions_rate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pos = bernoulli_positions(&mut rng, 0.01, 1_000_000);
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!((pos.len() as f64 - 10_000.0).abs() < 400.0);
        assert_eq!(bernoulli_positions(&mut rng, 1.0, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn iid_d_prime_is_one_over_k() {
        let rows = d_prime_iid(1e-3, 1000, &[2, 5, 10], 50, 1_000_000, &Seeder::new(3));
        for r in &rows {
            assert!((r.e_hat - r.independent).abs() < 4.0 * r.sigma, "{r:?}");
        }
        assert!(rows.windows(2).all(|w| w[1].e_hat < w[0].e_hat));
    }

    #[test]
    fn clean_window_counting() {
        // exceedances at 2 and 5 in a length-8 segment: runs 2, 2, 2
        assert_eq!(clean_windows(&[2, 5], 8, 2), (3, 7));
        assert_eq!(clean_windows(&[], 8, 3), (6, 6));
        assert_eq!(clean_windows(&[2, 5], 8, 0), (9, 9));
    }

    #[test]
    fn d3_with_empty_block_is_zero() {
        let scan = OrbitScan::run(System::Baker, SectionPoint::new(0.1, 0.1), Shape::Ball, 0.05, 4, 100_000, 0, &Seeder::new(2))
            .unwrap();
        let rows = d3_stat(&scan, 0.02, 1000, &[1, 10], 0).unwrap();
        assert!(rows.iter().all(|r| r.gamma == 0.0));
        let rows = d3_stat(&scan, 0.02, 1000, &[50], 200).unwrap();
        assert!(rows[0].within(4.0), "{:?}", rows[0]);
    }

    #[test]
    fn horizon_of_d3() {
        assert_eq!(d3_horizon(100_000), 202_269);
    }

    #[test]
    fn window_counts_are_additive() {
        let times = [0u64, 3, 9, 10, 15, 19, 20, 31];
        let a_n = 10.0;
        let w01 = Window::interval(0.0, 1.0);
        let w12 = Window::interval(1.0, 2.0);
        let w02 = Window::interval(0.0, 2.0);
        let both = Window { intervals: vec![(0.0, 1.0), (1.0, 2.0)] };
        assert_eq!(w01.count(&times, a_n), 3);
        assert_eq!(w12.count(&times, a_n), 3);
        assert_eq!(w01.count(&times, a_n) + w12.count(&times, a_n), w02.count(&times, a_n));
        assert_eq!(both.count(&times, a_n), 6);
        assert!(Window { intervals: vec![(0.0, 1.0), (0.5, 2.0)] }.validate().is_err());
    }

    #[test]
    fn poisson_control_dispersion() {
        let w = [Window::interval(0.0, 1.0), Window::interval(1.0, 2.0)];
        let c = poisson_control(&w, 10_000, &Seeder::new(17)).unwrap();
        let s = c.summary().unwrap();
        for t in &s.windows {
            assert!((0.95..=1.05).contains(&t.dispersion), "{t:?}");
        }
        assert!(s.gap_ks < 0.02);
    }

    #[test]
    fn baker_repp_counts() {
        let obs = Observable::new(SectionPoint::new(0.21, -0.13), Metric::Euclidean);
        let r = (1.0 / (1000.0 * std::f64::consts::PI)).sqrt();
        let w = [Window::interval(0.0, 1.0), Window::interval(1.0, 2.0), Window::interval(0.0, 2.0)];
        let c = repp(System::Baker, &obs, r, 1e-3, &w, 2000, u64::MAX, &Seeder::new(19)).unwrap();
        for row in &c.counts {
            assert_eq!(row[0] + row[1], row[2]);
        }
        let s = c.summary().unwrap();
        assert!((s.windows[0].mean - 1.0).abs() < 0.1, "{:?}", s.windows[0]);
        assert!(s.gap_ks < 0.06, "{}", s.gap_ks);
    }

    #[test]
    fn stationarity_of_baker() {
        let obs = Observable::new(SectionPoint::new(0.1, 0.1), Metric::Euclidean);
        let ks = stationarity_ks(System::Baker, &obs, 1_000_000, 0, &Seeder::new(23)).unwrap();
        assert!(ks <= 0.02, "{ks}");
    }
}
