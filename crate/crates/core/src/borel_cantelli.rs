//! Shrinking targets and the strong Borel–Cantelli ratio `S_n / E_n`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::maps::{Orbit, SectionPoint, System};
use crate::measure::{EmpiricalMeasure, RadialMass, RadialProfile, Shape, MIN_BALL_SAMPLES};
use crate::rng::{Domain, Seeder};
use crate::stats::{mean, std_dev};

/// `E_N` below this is reported as too small for a meaningful ratio.
pub const DEFAULT_E_FLOOR: f64 = 5.0;

/// Nested targets `A_1 ⊇ A_2 ⊇ ...` around one center with
/// `mu(A_i) ≈ C i^-gamma1`.
#[derive(Debug, Clone, Serialize)]
pub struct TargetSequence {
    pub center: SectionPoint,
    pub shape: Shape,
    pub gamma1: f64,
    pub c: f64,
    /// `radii[i - 1]` is `r(i)`.
    pub radii: Vec<f64>,
    /// Achieved empirical masses.
    pub masses: Vec<f64>,
    /// `cumulative[n - 1] = E_n`.
    pub cumulative: Vec<f64>,
    pub requested_n: usize,
    /// `max_i log(i) * 2 r(i)`: the horizontal-extent side condition,
    /// reported rather than enforced.
    pub log_extent_bound: f64,
    pub suggested_gamma1: Option<f64>,
    pub warnings: Vec<String>,
}

impl TargetSequence {
    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn e_n(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.cumulative[n - 1]
        }
    }

    /// Every target is the whole section.
    pub fn full_space(center: SectionPoint, shape: Shape, n: usize) -> Self {
        let masses = vec![1.0; n];
        Self {
            center,
            shape,
            gamma1: 0.0,
            c: 1.0,
            radii: vec![shape.diameter(); n],
            cumulative: (1..=n).map(|i| i as f64).collect(),
            masses,
            requested_n: n,
            log_extent_bound: f64::INFINITY,
            suggested_gamma1: None,
            warnings: Vec::new(),
        }
    }

    /// Radii from exact inversion of the profile: `r(i)` is the smallest
    /// sample radius with mass `>= C i^-gamma1`. The sequence stops early
    /// (with a warning) where a target would hold fewer than
    /// [`MIN_BALL_SAMPLES`] samples.
    pub fn from_profile(profile: &RadialProfile, gamma1: f64, c: f64, n: usize, e_floor: f64) -> Result<Self> {
        if !(gamma1 > 0.0 && gamma1 <= 1.0) {
            return Err(LabError::Config(format!("gamma1 = {gamma1} must lie in (0, 1]")));
        }
        if n < 1000 {
            return Err(LabError::Config(format!("target sequence needs N >= 1000 (got {n})")));
        }
        if !(c > 0.0 && c < 1.0) {
            return Err(LabError::Config(format!("initial mass C = {c} must lie in (0, 1)")));
        }
        let total = profile.total() as f64;
        let mut radii = Vec::with_capacity(n);
        let mut masses = Vec::with_capacity(n);
        let mut warnings = Vec::new();
        for i in 1..=n {
            let target = c * (i as f64).powf(-gamma1);
            match profile.invert(target) {
                Ok(r) => {
                    radii.push(r);
                    masses.push(profile.count_within(r) as f64 / total);
                }
                Err(LabError::Resolution(msg)) if i > 1 => {
                    warnings.push(format!("N truncated from {n} to {}: {msg}", i - 1));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let mut cumulative = Vec::with_capacity(masses.len());
        let mut acc = 0.0;
        for m in &masses {
            acc += m;
            cumulative.push(acc);
        }
        let log_extent_bound = radii
            .iter()
            .enumerate()
            .map(|(k, r)| ((k + 1) as f64).ln() * 2.0 * r)
            .fold(0.0, f64::max);
        let mut suggested_gamma1 = None;
        if acc < e_floor {
            let suggestion = suggest_gamma1(c, radii.len(), e_floor);
            warnings.push(format!(
                "E_N = {acc:.4} is too small (floor {e_floor}); suggested gamma1 = {}",
                suggestion.map_or("none".into(), |g| format!("{g:.1}"))
            ));
            suggested_gamma1 = suggestion;
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(Self {
            center: profile.center,
            shape: profile.shape,
            gamma1,
            c,
            radii,
            masses,
            cumulative,
            requested_n: n,
            log_extent_bound,
            suggested_gamma1,
            warnings,
        })
    }
}

/// Largest `gamma1` on a 0.1 grid whose harmonic-type sum reaches `floor`.
pub fn suggest_gamma1(c: f64, n: usize, floor: f64) -> Option<f64> {
    (1..=10).rev().map(|k| k as f64 / 10.0).find(|&g| {
        let s: f64 = (1..=n).map(|i| (i as f64).powf(-g)).sum();
        c * s >= floor
    })
}

/// Targets around `center` on an empirical measure.
pub fn build_targets(
    m: &EmpiricalMeasure,
    center: SectionPoint,
    shape: Shape,
    gamma1: f64,
    c: f64,
    n: usize,
) -> Result<TargetSequence> {
    let r0 = m.invert_mass(center, c, shape)?;
    let profile = m.radial_profile(center, shape, r0);
    TargetSequence::from_profile(&profile, gamma1, c, n, DEFAULT_E_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberTrace {
    pub member: u64,
    /// `S_n` at each checkpoint.
    pub hits: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SbcReport {
    pub checkpoints: Vec<u64>,
    pub e_n: Vec<f64>,
    pub members: Vec<MemberTrace>,
    pub excluded: usize,
    pub mean_ratio: Vec<f64>,
    pub std_ratio: Vec<f64>,
}

impl SbcReport {
    fn new(checkpoints: Vec<u64>, targets: &TargetSequence, members: Vec<MemberTrace>, excluded: usize) -> Self {
        let e_n: Vec<f64> = checkpoints.iter().map(|&n| targets.e_n(n as usize)).collect();
        let mut mean_ratio = Vec::new();
        let mut std_ratio = Vec::new();
        for (k, e) in e_n.iter().enumerate() {
            let ratios: Vec<f64> = members.iter().map(|m| m.hits[k] as f64 / e).collect();
            mean_ratio.push(mean(&ratios));
            std_ratio.push(std_dev(&ratios));
        }
        Self {
            checkpoints,
            e_n,
            members,
            excluded,
            mean_ratio,
            std_ratio,
        }
    }

    pub fn terminal_ratios(&self) -> Vec<f64> {
        let k = self.checkpoints.len() - 1;
        let e = self.e_n[k];
        self.members.iter().map(|m| m.hits[k] as f64 / e).collect()
    }

    pub fn terminal_mean(&self) -> f64 {
        *self.mean_ratio.last().unwrap_or(&f64::NAN)
    }

    pub fn terminal_std(&self) -> f64 {
        *self.std_ratio.last().unwrap_or(&f64::NAN)
    }

    /// Standard error of the ensemble-mean terminal ratio.
    pub fn terminal_sem(&self) -> f64 {
        self.terminal_std() / (self.members.len() as f64).sqrt()
    }

    pub fn ratio_at(&self, n: u64) -> Option<(f64, f64)> {
        let k = self.checkpoints.iter().position(|&c| c == n)?;
        Some((self.mean_ratio[k], self.std_ratio[k]))
    }
}

/// Powers of ten below `n`, then `n` itself.
pub fn log_checkpoints(n: u64) -> Vec<u64> {
    let mut v = Vec::new();
    let mut c = 10;
    while c < n {
        v.push(c);
        c *= 10;
    }
    v.push(n);
    v
}

/// Runs one ensemble against several target sequences at once; every
/// member orbit is tested against all of them, so the sequences see
/// identical dynamics. Hits use exact point-in-shape tests:
/// `S_n = #{1 <= j <= n : F^j(x) in A_j}`.
pub fn run_sbc_multi(
    system: System,
    targets: &[&TargetSequence],
    ensemble: usize,
    burn_in: u64,
    seeder: &Seeder,
) -> Result<Vec<SbcReport>> {
    if targets.is_empty() {
        return Err(LabError::Config("no target sequences".into()));
    }
    if ensemble < 30 {
        return Err(LabError::Config(format!("ensemble must be >= 30 (got {ensemble})")));
    }
    let n = targets.iter().map(|t| t.len()).min().unwrap_or(0) as u64;
    if n == 0 {
        return Err(LabError::Config("empty target sequence".into()));
    }
    let checkpoints = log_checkpoints(n);
    let runs: Vec<Result<Option<Vec<MemberTrace>>>> = (0..ensemble as u64)
        .into_par_iter()
        .map(|member| {
            let mut orbit = Orbit::typical(system, seeder.stream(Domain::Ensemble, member), burn_in)?;
            let mut s = vec![0u64; targets.len()];
            let mut traces: Vec<MemberTrace> = targets
                .iter()
                .map(|_| MemberTrace { member, hits: Vec::with_capacity(checkpoints.len()) })
                .collect();
            let mut next_cp = 0;
            for j in 1..=n {
                if !orbit.advance() {
                    return Ok(None);
                }
                let p = orbit.current();
                for (k, t) in targets.iter().enumerate() {
                    let r = t.radii[(j - 1) as usize];
                    let (dx, dy) = (p.x - t.center.x, p.y - t.center.y);
                    let inside = match t.shape {
                        Shape::Ball => dx * dx + dy * dy <= r * r,
                        Shape::Square => dx.abs() <= r && dy.abs() <= r,
                    };
                    s[k] += inside as u64;
                }
                if j == checkpoints[next_cp] {
                    for (trace, &sk) in traces.iter_mut().zip(&s) {
                        trace.hits.push(sk);
                    }
                    next_cp += 1;
                }
            }
            Ok(Some(traces))
        })
        .collect();
    let mut per_target: Vec<Vec<MemberTrace>> = vec![Vec::new(); targets.len()];
    let mut excluded = 0;
    for run in runs {
        match run? {
            Some(traces) => {
                for (k, tr) in traces.into_iter().enumerate() {
                    per_target[k].push(tr);
                }
            }
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} ensemble orbits hit the singular line and were excluded");
    }
    Ok(per_target
        .into_iter()
        .zip(targets)
        .map(|(members, t)| SbcReport::new(checkpoints.clone(), t, members, excluded))
        .collect())
}

pub fn run_sbc(
    system: System,
    targets: &TargetSequence,
    ensemble: usize,
    burn_in: u64,
    seeder: &Seeder,
) -> Result<SbcReport> {
    Ok(run_sbc_multi(system, &[targets], ensemble, burn_in, seeder)?.remove(0))
}

#[derive(Debug, Clone, Serialize)]
pub struct SpReport {
    pub n: usize,
    pub window: usize,
    pub members: usize,
    /// Monte Carlo estimate of `sum_i sum_{i<j<=i+w} Cov(f_i, f_j)`.
    pub cov_sum: f64,
    pub e_sum: f64,
    /// `cov_sum / sum_i E(f_i)`.
    pub normalized: f64,
    /// Standard error of `normalized`.
    pub sigma: f64,
    pub partial: bool,
    /// `(i, empirical Var f_i, mu(A_i)(1 - mu(A_i)))` for the first targets.
    pub same_index: Vec<(usize, f64, f64)>,
}

/// `sum_{i<=n} sum_{i<j<=min(i+w, n)} E_i E_j` by prefix sums.
fn independent_baseline(masses: &[f64], window: usize) -> f64 {
    let mut prefix = vec![0.0; masses.len() + 1];
    for (i, m) in masses.iter().enumerate() {
        prefix[i + 1] = prefix[i] + m;
    }
    let n = masses.len();
    (0..n)
        .map(|i| masses[i] * (prefix[(i + 1 + window).min(n)] - prefix[i + 1]))
        .sum()
}

fn sp_from_hits(
    targets: &TargetSequence,
    window: usize,
    hit_lists: &[Vec<u32>],
    first_hits: &[Vec<bool>],
    partial: bool,
) -> SpReport {
    let n = targets.len();
    let baseline = independent_baseline(&targets.masses, window);
    let e_sum = targets.cumulative.last().copied().unwrap_or(0.0);
    let per_member: Vec<f64> = hit_lists
        .iter()
        .map(|hits| {
            let mut pairs = 0u64;
            for (a, &i) in hits.iter().enumerate() {
                pairs += hits[a + 1..]
                    .iter()
                    .take_while(|&&j| (j - i) as usize <= window)
                    .count() as u64;
            }
            pairs as f64 - baseline
        })
        .collect();
    let m = per_member.len();
    let cov_sum = mean(&per_member);
    let sigma = std_dev(&per_member) / (m as f64).sqrt() / e_sum;
    let same_index = (0..first_hits.first().map_or(0, |v| v.len()))
        .map(|k| {
            let p = first_hits.iter().filter(|v| v[k]).count() as f64 / m as f64;
            let mu = targets.masses[k];
            (k + 1, p * (1.0 - p), mu * (1.0 - mu))
        })
        .collect();
    SpReport {
        n,
        window,
        members: m,
        cov_sum,
        e_sum,
        normalized: cov_sum / e_sum,
        sigma,
        partial,
        same_index,
    }
}

const SAME_INDEX_ROWS: usize = 5;

/// Windowed second-moment (SP) diagnostic along `members` orbits of length
/// `targets.len()`; stops early and flags the report when `budget` map
/// steps would be exceeded.
pub fn sp_diagnostic(
    system: System,
    targets: &TargetSequence,
    window: usize,
    members: usize,
    budget: u64,
    burn_in: u64,
    seeder: &Seeder,
) -> Result<SpReport> {
    if window > 1000 {
        return Err(LabError::Config(format!("window {window} exceeds 1000")));
    }
    let n = targets.len();
    let affordable = (budget / n.max(1) as u64) as usize;
    let used = members.min(affordable);
    if used < 2 {
        return Err(LabError::Budget(format!("budget {budget} allows fewer than two orbits of length {n}")));
    }
    let runs: Vec<Result<Option<(Vec<u32>, Vec<bool>)>>> = (0..used as u64)
        .into_par_iter()
        .map(|member| {
            let mut orbit = Orbit::typical(system, seeder.stream(Domain::Ensemble, member), burn_in)?;
            let mut hits = Vec::new();
            let mut first = Vec::with_capacity(SAME_INDEX_ROWS);
            for j in 1..=n {
                if !orbit.advance() {
                    return Ok(None);
                }
                let p = orbit.current();
                let inside = targets.shape.distance(&p, &targets.center) <= targets.radii[j - 1];
                if inside {
                    hits.push(j as u32);
                }
                if j <= SAME_INDEX_ROWS {
                    first.push(inside);
                }
            }
            Ok(Some((hits, first)))
        })
        .collect();
    let mut hit_lists = Vec::new();
    let mut first_hits = Vec::new();
    for r in runs {
        if let Some((h, f)) = r? {
            hit_lists.push(h);
            first_hits.push(f);
        }
    }
    Ok(sp_from_hits(targets, window, &hit_lists, &first_hits, used < members))
}

/// Same statistic with `f_i` replaced by independent Bernoulli(`mu(A_i)`)
/// indicators.
pub fn sp_iid_control(targets: &TargetSequence, window: usize, members: usize, seeder: &Seeder) -> SpReport {
    let n = targets.len();
    let (hit_lists, first_hits): (Vec<Vec<u32>>, Vec<Vec<bool>>) = (0..members as u64)
        .into_par_iter()
        .map(|member| {
            let mut rng = seeder.stream(Domain::Control, member);
            let mut hits = Vec::new();
            let mut first = Vec::new();
            for j in 1..=n {
                let inside = rng.random::<f64>() < targets.masses[j - 1];
                if inside {
                    hits.push(j as u32);
                }
                if j <= SAME_INDEX_ROWS {
                    first.push(inside);
                }
            }
            (hits, first)
        })
        .unzip();
    sp_from_hits(targets, window, &hit_lists, &first_hits, false)
}

#[derive(Debug, Clone, Serialize)]
pub struct ShortReturnRow {
    pub radius: f64,
    pub j_max: usize,
    pub visits: u64,
    /// `ratios[j] = mu(B_r ∩ T^-j B_r) / mu(B_r)`, `ratios[0] = 1`.
    pub ratios: Vec<f64>,
    /// `max_{1 <= j <= j_max} ratios[j]`.
    pub sup: f64,
}

/// `ceil(|log r|^5)`, capped at `cap`.
pub fn short_return_horizon(r: f64, cap: usize) -> usize {
    (r.ln().abs().powi(5).ceil() as usize).clamp(1, cap)
}

/// Short-return ratios of the one-dimensional base map around `center`,
/// from one orbit of `len` steps per worker.
pub fn short_return_profile(
    system: System,
    center: f64,
    radii: &[f64],
    j_cap: usize,
    len: u64,
    members: usize,
    seeder: &Seeder,
) -> Result<Vec<ShortReturnRow>> {
    let r_max = radii.iter().copied().fold(0.0, f64::max);
    let horizons: Vec<usize> = radii.iter().map(|&r| short_return_horizon(r, j_cap)).collect();
    let h_max = horizons.iter().copied().max().unwrap_or(1);
    let per_member: Vec<Result<Vec<(u64, Vec<u64>)>>> = (0..members as u64)
        .into_par_iter()
        .map(|member| {
            let mut orbit = Orbit::typical(system, seeder.stream(Domain::Scan, member), 1000)?;
            let mut visits: Vec<(u64, f64)> = Vec::new();
            for t in 0..len {
                let d = (orbit.current().x - center).abs();
                if d <= r_max {
                    visits.push((t, d));
                }
                if !orbit.advance() {
                    break;
                }
            }
            Ok(radii
                .iter()
                .zip(&horizons)
                .map(|(&r, &jm)| {
                    let times: Vec<u64> = visits.iter().filter(|v| v.1 <= r).map(|v| v.0).collect();
                    let mut counts = vec![0u64; jm + 1];
                    let mut starts = 0u64;
                    for (a, &t) in times.iter().enumerate() {
                        if t + h_max as u64 >= len {
                            break;
                        }
                        starts += 1;
                        counts[0] += 1;
                        for &u in times[a + 1..].iter().take_while(|&&u| u - t <= jm as u64) {
                            counts[(u - t) as usize] += 1;
                        }
                    }
                    (starts, counts)
                })
                .collect())
        })
        .collect();
    let mut rows: Vec<(u64, Vec<u64>)> = horizons.iter().map(|&jm| (0, vec![0; jm + 1])).collect();
    for m in per_member {
        for (acc, (s, c)) in rows.iter_mut().zip(m?) {
            acc.0 += s;
            for (a, b) in acc.1.iter_mut().zip(c) {
                *a += b;
            }
        }
    }
    radii
        .iter()
        .zip(horizons)
        .zip(rows)
        .map(|((&r, jm), (starts, counts))| {
            if starts < MIN_BALL_SAMPLES {
                return Err(LabError::Resolution(format!(
                    "radius {r} visited only {starts} times (< {MIN_BALL_SAMPLES})"
                )));
            }
            let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / starts as f64).collect();
            let sup = ratios[1..].iter().copied().fold(0.0, f64::max);
            Ok(ShortReturnRow {
                radius: r,
                j_max: jm,
                visits: starts,
                ratios,
                sup,
            })
        })
        .collect()
}
