//! Monte Carlo estimates of the invariant measures.
//!
//! Two representations are provided:
//!
//! * [`EmpiricalMeasure`]: orbit samples bucketed on a uniform grid over
//!   `I x I`, answering ball/square mass queries anywhere.
//! * [`OrbitScan`] / [`RadialProfile`]: long orbits scanned against a single
//!   center, keeping only the close approaches. This resolves masses of order
//!   `1e-6` without storing `1e9` points.
//!
//! Both implement [`RadialMass`] (the latter directly, the former through
//! [`EmpiricalMeasure::at`]), which is all the level/target builders need.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::maps::{LorenzMap, Orbit, Rect, SectionPoint, System, SystemKind, HALF};
use crate::rng::{Domain, Seeder};

/// Fewest samples a ball may contain for its mass to be used in a fit or an
/// inversion.
pub const MIN_BALL_SAMPLES: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// Euclidean ball of radius `r`.
    #[default]
    Ball,
    /// Square of side `2r`, i.e. the max-metric ball.
    Square,
}

impl Shape {
    #[inline]
    pub fn distance(&self, a: &SectionPoint, b: &SectionPoint) -> f64 {
        match self {
            Shape::Ball => a.euclidean(b),
            Shape::Square => a.max_dist(b),
        }
    }

    /// Radius at which the shape covers the whole section from any center.
    pub fn diameter(&self) -> f64 {
        match self {
            Shape::Ball => std::f64::consts::SQRT_2,
            Shape::Square => 1.0,
        }
    }
}

/// Mass of balls around one fixed center.
pub trait RadialMass {
    fn center(&self) -> SectionPoint;
    fn shape(&self) -> Shape;
    /// Number of samples the masses are normalized by.
    fn total(&self) -> u64;
    /// Samples at distance `<= r`.
    fn count_within(&self, r: f64) -> u64;
    /// Smallest sample radius whose closed ball holds at least
    /// `ceil(target * total)` samples.
    fn invert(&self, target: f64) -> Result<f64>;

    /// Largest radius at which `count_within` is exact.
    fn radius_cap(&self) -> f64 {
        f64::INFINITY
    }

    fn mass(&self, r: f64) -> f64 {
        if r >= self.shape().diameter() {
            return 1.0;
        }
        self.count_within(r) as f64 / self.total() as f64
    }
}

fn target_count(target: f64, total: u64) -> Result<u64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(LabError::Config(format!("target mass {target} must lie in (0, 1)")));
    }
    let k = (target * total as f64).ceil() as u64;
    if k < MIN_BALL_SAMPLES {
        return Err(LabError::Resolution(format!(
            "target mass {target:.3e} holds {k} of {total} samples (< {MIN_BALL_SAMPLES})"
        )));
    }
    Ok(k)
}

/// Sorted distances of all recorded samples within `r_cap` of a center.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialProfile {
    pub center: SectionPoint,
    pub shape: Shape,
    pub r_cap: f64,
    pub total: u64,
    distances: Vec<f64>,
}

impl RadialProfile {
    pub fn new(center: SectionPoint, shape: Shape, r_cap: f64, total: u64, mut distances: Vec<f64>) -> Self {
        distances.sort_by(f64::total_cmp);
        Self {
            center,
            shape,
            r_cap,
            total,
            distances,
        }
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }
}

impl RadialMass for RadialProfile {
    fn center(&self) -> SectionPoint {
        self.center
    }

    fn shape(&self) -> Shape {
        self.shape
    }

    fn total(&self) -> u64 {
        self.total
    }

    fn count_within(&self, r: f64) -> u64 {
        self.distances.partition_point(|&d| d <= r) as u64
    }

    fn radius_cap(&self) -> f64 {
        self.r_cap
    }

    fn invert(&self, target: f64) -> Result<f64> {
        let k = target_count(target, self.total)?;
        if k as usize > self.distances.len() {
            return Err(LabError::Resolution(format!(
                "target mass {target:.3e} needs a radius beyond the profile cap {}",
                self.r_cap
            )));
        }
        Ok(self.distances[k as usize - 1])
    }
}

/// One close approach of a scanned orbit to the scan center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub t: u64,
    pub dist: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanSegment {
    pub len: u64,
    pub hits: Vec<Hit>,
}

impl ScanSegment {
    /// Times at which the orbit is strictly closer than `r` to the center.
    pub fn times_within(&self, r: f64) -> Vec<u64> {
        self.hits.iter().filter(|h| h.dist < r).map(|h| h.t).collect()
    }
}

/// Independent long orbits, each recording every visit within `r_cap` of
/// `center`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitScan {
    pub center: SectionPoint,
    pub shape: Shape,
    pub r_cap: f64,
    pub segments: Vec<ScanSegment>,
    pub truncations: usize,
}

impl OrbitScan {
    pub fn run(
        system: System,
        center: SectionPoint,
        shape: Shape,
        r_cap: f64,
        segments: usize,
        seg_len: u64,
        burn_in: u64,
        seeder: &Seeder,
    ) -> Result<Self> {
        let parts: Vec<Result<(ScanSegment, bool)>> = (0..segments)
            .into_par_iter()
            .map(|s| {
                let mut orbit = Orbit::typical(system, seeder.stream(Domain::Scan, s as u64), burn_in)?;
                let mut hits = Vec::new();
                let mut len = 0u64;
                let r2 = r_cap * r_cap;
                for t in 0..seg_len {
                    let p = orbit.current();
                    let (dx, dy) = (p.x - center.x, p.y - center.y);
                    let close = match shape {
                        Shape::Ball => dx * dx + dy * dy <= r2,
                        Shape::Square => dx.abs() <= r_cap && dy.abs() <= r_cap,
                    };
                    if close {
                        hits.push(Hit { t, dist: shape.distance(&p, &center) });
                    }
                    len += 1;
                    if t + 1 < seg_len && !orbit.advance() {
                        break;
                    }
                }
                Ok((ScanSegment { len, hits }, orbit.truncated()))
            })
            .collect();
        let mut out = Vec::with_capacity(segments);
        let mut truncations = 0;
        for part in parts {
            let (seg, trunc) = part?;
            truncations += trunc as usize;
            out.push(seg);
        }
        if truncations > 0 {
            log::warn!("{truncations} scan segments hit the singular line and were shortened");
        }
        Ok(Self {
            center,
            shape,
            r_cap,
            segments: out,
            truncations,
        })
    }

    /// Scan whose cap holds about `4 * max_mass` of the measure, sized from
    /// a pilot measure of `pilot` samples.
    pub fn for_mass(
        system: System,
        center: SectionPoint,
        shape: Shape,
        max_mass: f64,
        samples: u64,
        segments: usize,
        burn_in: u64,
        seeder: &Seeder,
    ) -> Result<Self> {
        let pilot_n = 2_000_000.min(samples);
        let pilot = EmpiricalMeasure::build(
            system,
            pilot_n,
            burn_in,
            &seeder.child(0x5ca1ab1e),
            MeasureOptions::default(),
        )?;
        let r_cap = match pilot.invert_mass(center, (4.0 * max_mass).min(0.5), shape) {
            Ok(r) => r,
            Err(LabError::Resolution(_)) => 0.05,
            Err(e) => return Err(e),
        };
        let seg_len = samples.div_ceil(segments as u64);
        Self::run(system, center, shape, r_cap, segments, seg_len, burn_in, seeder)
    }

    pub fn total_len(&self) -> u64 {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn profile(&self) -> RadialProfile {
        let d = self.segments.iter().flat_map(|s| s.hits.iter().map(|h| h.dist)).collect();
        RadialProfile::new(self.center, self.shape, self.r_cap, self.total_len(), d)
    }
}

/// Orbit samples bucketed on a `2^k x 2^k` grid over the section.
///
/// A measure may retain only the samples inside a `window`; `total` still
/// counts every sample so masses stay normalized, and queries are exact for
/// shapes contained in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    system: SystemKind,
    params_hash: String,
    cell_exp: u32,
    window: Rect,
    total: u64,
    /// CSR offsets: points of cell `c` are `points[offsets[c]..offsets[c+1]]`.
    offsets: Vec<u64>,
    points: Vec<SectionPoint>,
    truncations: usize,
}

pub const DEFAULT_CELL_EXP: u32 = 10;
const SNAPSHOT_MAGIC: &[u8; 8] = b"LLABMEAS";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureOptions {
    pub cell_exp: u32,
    pub window: Option<Rect>,
    pub members: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            cell_exp: DEFAULT_CELL_EXP,
            window: None,
            members: 8,
        }
    }
}

fn full_section() -> Rect {
    Rect::new(-HALF, HALF, -HALF, HALF)
}

fn params_hash_of(system: &System) -> String {
    match system {
        System::Lorenz(m) => m.params().hash_hex(),
        _ => String::from("0000000000000000"),
    }
}

impl EmpiricalMeasure {
    /// Builds a measure from `n` post-burn-in orbit points split evenly over
    /// `members` independent orbits.
    pub fn build(system: System, n: u64, burn_in: u64, seeder: &Seeder, opts: MeasureOptions) -> Result<Self> {
        if n < 1 || opts.members == 0 {
            return Err(LabError::Config("measure needs n >= 1 and at least one member".into()));
        }
        if opts.cell_exp == 0 || opts.cell_exp > 14 {
            return Err(LabError::Config("grid exponent must lie in 1..=14".into()));
        }
        let window = opts.window.unwrap_or_else(full_section);
        let m = opts.members as u64;
        let parts: Vec<Result<(Vec<SectionPoint>, u64, bool)>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let share = n / m + u64::from(i < n % m);
                let mut orbit = Orbit::typical(system, seeder.stream(Domain::Measure, i), burn_in)?;
                let mut pts = Vec::new();
                let mut count = 0u64;
                for k in 0..share {
                    let p = orbit.current();
                    if window.contains(&p) {
                        pts.push(p);
                    }
                    count += 1;
                    if k + 1 < share && !orbit.advance() {
                        break;
                    }
                }
                Ok((pts, count, orbit.truncated()))
            })
            .collect();
        let mut points = Vec::new();
        let mut total = 0;
        let mut truncations = 0;
        for part in parts {
            let (pts, count, trunc) = part?;
            points.extend(pts);
            total += count;
            truncations += trunc as usize;
        }
        if truncations > 0 {
            log::warn!("{truncations} measure orbits hit the singular line; sample shortened");
        }
        Ok(Self::from_points(
            system.kind(),
            params_hash_of(&system),
            opts.cell_exp,
            window,
            total,
            points,
            truncations,
        ))
    }

    fn from_points(
        system: SystemKind,
        params_hash: String,
        cell_exp: u32,
        window: Rect,
        total: u64,
        points: Vec<SectionPoint>,
        truncations: usize,
    ) -> Self {
        let g = 1usize << cell_exp;
        let mut counts = vec![0u64; g * g + 1];
        let cells: Vec<usize> = points.iter().map(|p| cell_of(cell_exp, p)).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..g * g {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut sorted = vec![SectionPoint::new(0.0, 0.0); points.len()];
        for (p, &c) in points.iter().zip(&cells) {
            sorted[cursor[c] as usize] = *p;
            cursor[c] += 1;
        }
        Self {
            system,
            params_hash,
            cell_exp,
            window,
            total,
            offsets: counts,
            points: sorted,
            truncations,
        }
    }

    pub fn system(&self) -> SystemKind {
        self.system
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn retained(&self) -> usize {
        self.points.len()
    }

    pub fn window(&self) -> Rect {
        self.window
    }

    pub fn truncations(&self) -> usize {
        self.truncations
    }

    pub fn cell_side(&self) -> f64 {
        1.0 / (1u64 << self.cell_exp) as f64
    }

    pub fn points(&self) -> &[SectionPoint] {
        &self.points
    }

    /// Whether the shape of radius `r` at `center` (clipped to the section)
    /// lies inside the retained window.
    pub fn covers(&self, center: SectionPoint, r: f64) -> bool {
        let w = &self.window;
        let clip = |v: f64| v.clamp(-HALF, HALF);
        clip(center.x - r) >= w.x0
            && clip(center.x + r) <= w.x1
            && clip(center.y - r) >= w.y0
            && clip(center.y + r) <= w.y1
    }

    fn cell_range(&self, lo: f64, hi: f64) -> (usize, usize) {
        let g = 1usize << self.cell_exp;
        let f = |v: f64| (((v + HALF) * g as f64).floor().max(0.0) as usize).min(g - 1);
        (f(lo), f(hi))
    }

    fn cell_points(&self, ix: usize, iy: usize) -> &[SectionPoint] {
        let c = iy * (1usize << self.cell_exp) + ix;
        &self.points[self.offsets[c] as usize..self.offsets[c + 1] as usize]
    }

    /// Visits the points of every cell that may intersect the shape, passing
    /// `true` when the whole cell lies inside it.
    fn for_cells<F: FnMut(&[SectionPoint], bool)>(&self, center: SectionPoint, r: f64, shape: Shape, mut f: F) {
        let side = self.cell_side();
        let (ix0, ix1) = self.cell_range(center.x - r, center.x + r);
        let (iy0, iy1) = self.cell_range(center.y - r, center.y + r);
        for iy in iy0..=iy1 {
            let cy0 = -HALF + iy as f64 * side;
            let (ny, fy) = axis_near_far(center.y, cy0, cy0 + side);
            for ix in ix0..=ix1 {
                let pts = self.cell_points(ix, iy);
                if pts.is_empty() {
                    continue;
                }
                let cx0 = -HALF + ix as f64 * side;
                let (nx, fx) = axis_near_far(center.x, cx0, cx0 + side);
                let (near, far) = match shape {
                    Shape::Ball => (nx.hypot(ny), fx.hypot(fy)),
                    Shape::Square => (nx.max(ny), fx.max(fy)),
                };
                if near > r {
                    continue;
                }
                f(pts, far <= r);
            }
        }
    }

    pub fn count_within(&self, center: SectionPoint, r: f64, shape: Shape) -> u64 {
        let mut n = 0u64;
        self.for_cells(center, r, shape, |pts, inside| {
            if inside {
                n += pts.len() as u64;
            } else {
                n += pts.iter().filter(|p| shape.distance(p, &center) <= r).count() as u64;
            }
        });
        n
    }

    /// Empirical mass of the closed ball (or square of side `2r`).
    pub fn ball_mass(&self, center: SectionPoint, r: f64, shape: Shape) -> f64 {
        if r >= shape.diameter() {
            return 1.0;
        }
        self.count_within(center, r, shape) as f64 / self.total as f64
    }

    /// `mass(B_{r+eps}) - mass(B_r)` for Euclidean balls.
    pub fn annulus_mass(&self, center: SectionPoint, r: f64, eps: f64) -> f64 {
        self.ball_mass(center, r + eps, Shape::Ball) - self.ball_mass(center, r, Shape::Ball)
    }

    pub fn invert_mass(&self, center: SectionPoint, target: f64, shape: Shape) -> Result<f64> {
        self.at(center, shape).invert(target)
    }

    pub fn local_dimension(&self, center: SectionPoint, r_max: f64, r_min: f64) -> Result<LocalDimensionEstimate> {
        local_dimension(&self.at(center, Shape::Ball), r_max, r_min)
    }

    pub fn at(&self, center: SectionPoint, shape: Shape) -> CenteredMeasure<'_> {
        CenteredMeasure {
            measure: self,
            center,
            shape,
        }
    }

    /// Masses of the four quadrants `{x<0,y<0}, {x>=0,y<0}, {x<0,y>=0},
    /// {x>=0,y>=0}`.
    pub fn quadrant_masses(&self) -> [f64; 4] {
        let mut q = [0u64; 4];
        for p in &self.points {
            q[(p.x >= 0.0) as usize + 2 * (p.y >= 0.0) as usize] += 1;
        }
        q.map(|c| c as f64 / self.total as f64)
    }

    /// Distance-sorted samples within `r_cap` of `center`.
    pub fn radial_profile(&self, center: SectionPoint, shape: Shape, r_cap: f64) -> RadialProfile {
        let mut d = Vec::new();
        self.for_cells(center, r_cap, shape, |pts, _| {
            d.extend(pts.iter().map(|p| shape.distance(p, &center)).filter(|&x| x <= r_cap));
        });
        RadialProfile::new(center, shape, r_cap, self.total, d)
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        let kind: u8 = match self.system {
            SystemKind::Lorenz => 0,
            SystemKind::Baker => 1,
            SystemKind::Doubling => 2,
        };
        w.write_all(&[kind])?;
        let mut hash = [b'0'; 16];
        for (dst, src) in hash.iter_mut().zip(self.params_hash.bytes()) {
            *dst = src;
        }
        w.write_all(&hash)?;
        w.write_all(&self.cell_exp.to_le_bytes())?;
        for v in [self.window.x0, self.window.x1, self.window.y0, self.window.y1] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.total.to_le_bytes())?;
        w.write_all(&(self.truncations as u64).to_le_bytes())?;
        w.write_all(&(self.points.len() as u64).to_le_bytes())?;
        // per-cell counts, then the cell-sorted points
        let g2 = 1usize << (2 * self.cell_exp);
        for c in 0..g2 {
            let count = (self.offsets[c + 1] - self.offsets[c]) as u32;
            w.write_all(&count.to_le_bytes())?;
        }
        for p in &self.points {
            w.write_all(&p.x.to_le_bytes())?;
            w.write_all(&p.y.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(LabError::Snapshot("not a measure snapshot".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(LabError::Snapshot(format!("unsupported snapshot version {version}")));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let system = match kind[0] {
            0 => SystemKind::Lorenz,
            1 => SystemKind::Baker,
            2 => SystemKind::Doubling,
            k => return Err(LabError::Snapshot(format!("unknown system tag {k}"))),
        };
        let mut hash = [0u8; 16];
        r.read_exact(&mut hash)?;
        let params_hash = String::from_utf8_lossy(&hash).into_owned();
        let cell_exp = read_u32(&mut r)?;
        if cell_exp == 0 || cell_exp > 14 {
            return Err(LabError::Snapshot(format!("bad grid exponent {cell_exp}")));
        }
        let window = Rect::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
        let total = read_u64(&mut r)?;
        let truncations = read_u64(&mut r)? as usize;
        let npoints = read_u64(&mut r)? as usize;
        let g2 = 1usize << (2 * cell_exp);
        let mut offsets = vec![0u64; g2 + 1];
        for c in 0..g2 {
            offsets[c + 1] = offsets[c] + read_u32(&mut r)? as u64;
        }
        if offsets[g2] as usize != npoints {
            return Err(LabError::Snapshot("grid counts disagree with point count".into()));
        }
        let mut points = Vec::with_capacity(npoints);
        for _ in 0..npoints {
            points.push(SectionPoint::new(read_f64(&mut r)?, read_f64(&mut r)?));
        }
        Ok(Self {
            system,
            params_hash,
            cell_exp,
            window,
            total,
            offsets,
            points,
            truncations,
        })
    }

    pub fn params_hash(&self) -> &str {
        &self.params_hash
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[inline]
fn cell_of(cell_exp: u32, p: &SectionPoint) -> usize {
    let g = 1usize << cell_exp;
    let f = |v: f64| (((v + HALF) * g as f64).floor().max(0.0) as usize).min(g - 1);
    f(p.y) * g + f(p.x)
}

/// Nearest and farthest offsets along one axis from `c` to `[lo, hi]`.
fn axis_near_far(c: f64, lo: f64, hi: f64) -> (f64, f64) {
    let near = if c < lo {
        lo - c
    } else if c > hi {
        c - hi
    } else {
        0.0
    };
    (near, (c - lo).abs().max((hi - c).abs()))
}

/// [`EmpiricalMeasure`] seen from a fixed center.
#[derive(Debug, Clone, Copy)]
pub struct CenteredMeasure<'a> {
    measure: &'a EmpiricalMeasure,
    center: SectionPoint,
    shape: Shape,
}

impl RadialMass for CenteredMeasure<'_> {
    fn center(&self) -> SectionPoint {
        self.center
    }

    fn shape(&self) -> Shape {
        self.shape
    }

    fn total(&self) -> u64 {
        self.measure.total
    }

    fn count_within(&self, r: f64) -> u64 {
        self.measure.count_within(self.center, r, self.shape)
    }

    fn invert(&self, target: f64) -> Result<f64> {
        let k = target_count(target, self.measure.total)?;
        let mut r = self.measure.cell_side();
        loop {
            if !self.measure.covers(self.center, r) {
                return Err(LabError::Resolution(format!(
                    "target mass {target:.3e} needs radius > {r:.3e}, outside the retained window"
                )));
            }
            if self.count_within(r) >= k {
                break;
            }
            if r >= self.shape.diameter() {
                return Err(LabError::Resolution(format!("target mass {target} not reachable")));
            }
            r *= 2.0;
        }
        let mut d: Vec<f64> = self.measure.radial_profile(self.center, self.shape, r).distances;
        let idx = k as usize - 1;
        d.select_nth_unstable_by(idx, f64::total_cmp);
        Ok(d[idx])
    }
}

/// Log-log regression of ball mass against radius.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalDimensionEstimate {
    pub center: SectionPoint,
    pub radii: Vec<f64>,
    pub masses: Vec<f64>,
    pub dimension: f64,
    /// `log c` in `mu(B_r) ~ c r^d`.
    pub log_c: f64,
    pub r_squared: f64,
}

impl LocalDimensionEstimate {
    /// Radius at which the fitted power law reaches `mass`.
    pub fn radius_for_mass(&self, mass: f64) -> f64 {
        ((mass.ln() - self.log_c) / self.dimension).exp()
    }
}

/// Least-squares slope of `log mu(B_r)` against `log r` over the dyadic
/// radii `r_max 2^-k >= r_min`. Radii holding fewer than
/// [`MIN_BALL_SAMPLES`] samples are dropped.
pub fn local_dimension(m: &dyn RadialMass, r_max: f64, r_min: f64) -> Result<LocalDimensionEstimate> {
    if !(r_min > 0.0 && r_max > r_min) {
        return Err(LabError::Config("local dimension needs 0 < r_min < r_max".into()));
    }
    let mut all = Vec::new();
    let mut r = r_max;
    while r >= r_min * (1.0 - 1e-12) {
        all.push(r);
        r /= 2.0;
    }
    if all.len() < 8 {
        return Err(LabError::Config(format!(
            "only {} dyadic radii between r_min and r_max (need 8)",
            all.len()
        )));
    }
    let mut radii = Vec::new();
    let mut masses = Vec::new();
    for r in all {
        let c = m.count_within(r);
        if c >= MIN_BALL_SAMPLES {
            radii.push(r);
            masses.push(c as f64 / m.total() as f64);
        }
    }
    if radii.len() < 4 {
        return Err(LabError::Estimation(format!(
            "only {} radii hold {MIN_BALL_SAMPLES}+ samples",
            radii.len()
        )));
    }
    let lx: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = masses.iter().map(|m| m.ln()).collect();
    let fit = crate::stats::linear_fit(&lx, &ly)?;
    Ok(LocalDimensionEstimate {
        center: m.center(),
        radii,
        masses,
        dimension: fit.slope,
        log_c: fit.intercept,
        r_squared: fit.r_squared,
    })
}

/// Writes `radius,count,mass` rows for the given radii.
pub fn write_radial_csv<W: Write>(m: &dyn RadialMass, radii: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["radius", "count", "mass"])?;
    for &r in radii {
        let c = m.count_within(r);
        out.write_record([format!("{r:e}"), c.to_string(), format!("{:e}", m.mass(r))])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum UlamMethod {
    PowerIteration,
    OrbitHistogram,
}

/// Invariant density of the one-dimensional base map on `k` equal cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UlamDensity {
    pub bins: usize,
    /// Density value on each cell; `sum(density) / bins == 1`.
    pub density: Vec<f64>,
    pub method: UlamMethod,
    pub residual: f64,
    pub iterations: usize,
}

impl UlamDensity {
    pub fn l1_distance(&self, other: &UlamDensity) -> f64 {
        // compare on the finer grid
        let (fine, coarse) = if self.bins >= other.bins { (self, other) } else { (other, self) };
        let ratio = fine.bins / coarse.bins;
        fine.density
            .iter()
            .enumerate()
            .map(|(i, v)| (v - coarse.density[i / ratio]).abs())
            .sum::<f64>()
            / fine.bins as f64
    }

    /// `max_i |rho(i+1) - rho(i)| * bins`, a discrete Lipschitz constant.
    pub fn lipschitz_ratio(&self) -> f64 {
        self.density
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max)
            * self.bins as f64
    }
}

/// Sparse row-stochastic Ulam matrix of the base map.
#[derive(Debug, Clone)]
pub struct UlamOperator {
    bins: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl UlamOperator {
    /// Exact Ulam discretization: entry `(i, j)` is the fraction of cell `i`
    /// that the base map sends into cell `j`. Both branches of the supported
    /// base maps are increasing, so each cell's image is an interval and the
    /// fractions follow from the branch inverses.
    pub fn new(system: &System, bins: usize) -> Result<Self> {
        if !bins.is_power_of_two() || !(64..=8192).contains(&bins) {
            return Err(LabError::Config(format!("bins = {bins} must be a power of two in [64, 8192]")));
        }
        let w = 1.0 / bins as f64;
        let edge = |i: usize| -HALF + i as f64 * w;
        let rows = (0..bins)
            .map(|i| {
                let (a, b) = (edge(i), edge(i + 1));
                let branch = Branch::of(system, a, b);
                let (ya, yb) = (branch.forward(a), branch.forward(b));
                let mut row = Vec::new();
                let j0 = (((ya + HALF) / w).floor().max(0.0) as usize).min(bins - 1);
                let j1 = (((yb + HALF) / w).ceil() as usize).clamp(j0 + 1, bins);
                for j in j0..j1 {
                    let lo = edge(j).max(ya);
                    let hi = edge(j + 1).min(yb);
                    if hi > lo {
                        let frac = (branch.inverse(hi) - branch.inverse(lo)) / w;
                        if frac > 0.0 {
                            row.push((j, frac));
                        }
                    }
                }
                let s: f64 = row.iter().map(|e| e.1).sum();
                for e in &mut row {
                    e.1 /= s;
                }
                row
            })
            .collect();
        Ok(Self { bins, rows })
    }

    /// Pushes cell probabilities forward one step.
    pub fn push(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        for (row, &pi) in self.rows.iter().zip(p) {
            for &(j, f) in row {
                out[j] += pi * f;
            }
        }
        out
    }

    /// `||P rho - rho||_1` in density units.
    pub fn residual(&self, density: &[f64]) -> f64 {
        let p: Vec<f64> = density.iter().map(|d| d / self.bins as f64).collect();
        self.push(&p).iter().zip(&p).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Increasing branch of the base map on a cell not straddling 0.
enum Branch {
    Lorenz { map: LorenzMap, positive: bool },
    Doubling { shift: f64 },
}

impl Branch {
    fn of(system: &System, a: f64, b: f64) -> Self {
        let mid = (a + b) / 2.0;
        match system {
            System::Lorenz(m) => Branch::Lorenz { map: *m, positive: mid > 0.0 },
            System::Baker | System::Doubling => {
                let d = 2.0 * mid;
                let shift = if d >= HALF {
                    -1.0
                } else if d < -HALF {
                    1.0
                } else {
                    0.0
                };
                Branch::Doubling { shift }
            }
        }
    }

    fn forward(&self, x: f64) -> f64 {
        match self {
            Branch::Lorenz { map, positive } => {
                let p = map.params();
                let xa = x.abs().powf(p.alpha());
                if *positive {
                    p.theta * xa + p.b0
                } else {
                    -p.theta * xa + p.b1
                }
            }
            Branch::Doubling { shift } => 2.0 * x + shift,
        }
    }

    fn inverse(&self, y: f64) -> f64 {
        match self {
            Branch::Lorenz { map, positive } => {
                let p = map.params();
                let inv_a = 1.0 / p.alpha();
                if *positive {
                    ((y - p.b0) / p.theta).max(0.0).powf(inv_a)
                } else {
                    -((p.b1 - y) / p.theta).max(0.0).powf(inv_a)
                }
            }
            Branch::Doubling { shift } => (y - shift) / 2.0,
        }
    }
}

pub const ULAM_TOLERANCE: f64 = 1e-10;
pub const ULAM_MAX_ITERATIONS: usize = 20_000;

/// Fixed point of the Ulam operator by power iteration from the uniform
/// density; falls back to an orbit histogram of `n` points if the iteration
/// does not reach [`ULAM_TOLERANCE`].
pub fn ulam_acim(system: &System, bins: usize, n: u64, seeder: &Seeder) -> Result<UlamDensity> {
    ulam_acim_with(system, bins, n, seeder, ULAM_MAX_ITERATIONS)
}

pub fn ulam_acim_with(system: &System, bins: usize, n: u64, seeder: &Seeder, max_iter: usize) -> Result<UlamDensity> {
    let op = UlamOperator::new(system, bins)?;
    let mut p = vec![1.0 / bins as f64; bins];
    for it in 1..=max_iter {
        let q = op.push(&p);
        let res: f64 = q.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = q;
        if res <= ULAM_TOLERANCE {
            return Ok(UlamDensity {
                bins,
                density: p.iter().map(|v| v * bins as f64).collect(),
                method: UlamMethod::PowerIteration,
                residual: res,
                iterations: it,
            });
        }
    }
    log::warn!("Ulam power iteration did not converge in {max_iter} steps; using orbit histogram");
    let density = orbit_histogram(system, bins, n, seeder)?;
    let residual = op.residual(&density);
    Ok(UlamDensity {
        bins,
        density,
        method: UlamMethod::OrbitHistogram,
        residual,
        iterations: max_iter,
    })
}

/// Histogram density of the base coordinate along orbits.
pub fn orbit_histogram(system: &System, bins: usize, n: u64, seeder: &Seeder) -> Result<Vec<f64>> {
    let members = 8u64;
    let parts: Vec<Result<Vec<u64>>> = (0..members)
        .into_par_iter()
        .map(|i| {
            let share = n / members + u64::from(i < n % members);
            let mut h = vec![0u64; bins];
            let mut orbit = Orbit::typical(*system, seeder.stream(Domain::Measure, 1000 + i), 1000)?;
            for _ in 0..share {
                let x = orbit.current().x;
                let b = (((x + HALF) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
                h[b] += 1;
                if !orbit.advance() {
                    break;
                }
            }
            Ok(h)
        })
        .collect();
    let mut h = vec![0u64; bins];
    for part in parts {
        for (a, b) in h.iter_mut().zip(part?) {
            *a += b;
        }
    }
    let total: u64 = h.iter().sum();
    Ok(h.iter().map(|&c| c as f64 * bins as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::ModelParams;

    fn baker_measure(n: u64) -> EmpiricalMeasure {
        EmpiricalMeasure::build(System::Baker, n, 1000, &Seeder::new(17), MeasureOptions::default()).unwrap()
    }

    #[test]
    fn baker_quadrants_are_quarters() {
        let m = baker_measure(1_000_000);
        for q in m.quadrant_masses() {
            assert!((q - 0.25).abs() < 0.01, "{q}");
        }
    }

    #[test]
    fn mass_edge_cases() {
        let m = baker_measure(200_000);
        let c = SectionPoint::new(0.1, -0.2);
        assert_eq!(m.ball_mass(c, 2.0, Shape::Ball), 1.0);
        assert_eq!(m.ball_mass(c, 1.0, Shape::Square), 1.0);
        assert_eq!(m.annulus_mass(c, 0.05, 0.0), 0.0);
        let mut last = 0.0;
        for k in 1..40 {
            let r = k as f64 * 0.01;
            let v = m.ball_mass(c, r, Shape::Ball);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn grid_counts_match_brute_force() {
        let m = baker_measure(100_000);
        let c = SectionPoint::new(-0.31, 0.07);
        for shape in [Shape::Ball, Shape::Square] {
            for r in [0.001, 0.013, 0.1, 0.37] {
                let brute = m.points().iter().filter(|p| shape.distance(p, &c) <= r).count() as u64;
                assert_eq!(m.count_within(c, r, shape), brute);
            }
        }
    }

    #[test]
    fn baker_square_mass_is_area() {
        let m = baker_measure(1_000_000);
        let c = SectionPoint::new(0.2, -0.1);
        let r: f64 = 0.1;
        let area = (2.0 * r) * (2.0 * r);
        let sigma = (area * (1.0 - area) / 1e6).sqrt();
        assert!((m.ball_mass(c, r, Shape::Square) - area).abs() < 3.0 * sigma);
        let ann = std::f64::consts::PI * ((r + 0.02f64).powi(2) - r * r);
        let sigma = (ann / 1e6).sqrt();
        assert!((m.annulus_mass(c, r, 0.02) - ann).abs() < 3.0 * sigma);
    }

    #[test]
    fn invert_mass_round_trip() {
        let m = baker_measure(1_000_000);
        let c = SectionPoint::new(0.05, 0.1);
        let r = m.invert_mass(c, 0.01, Shape::Square).unwrap();
        assert!((r - 0.05).abs() < 0.05 * 0.05, "{r}");
        for t in [0.001, 0.01, 0.2, 0.5] {
            let r = m.invert_mass(c, t, Shape::Ball).unwrap();
            let got = m.ball_mass(c, r, Shape::Ball);
            assert!(got >= t && got <= t + 2.0 / m.total() as f64, "{t} {got}");
            assert!(r < Shape::Ball.diameter());
        }
        assert!(matches!(m.invert_mass(c, 1e-7, Shape::Ball), Err(LabError::Resolution(_))));
    }

    #[test]
    fn profile_agrees_with_grid() {
        let m = baker_measure(300_000);
        let c = SectionPoint::new(-0.2, 0.3);
        let prof = m.radial_profile(c, Shape::Ball, 0.1);
        for r in [0.003, 0.02, 0.08] {
            assert_eq!(prof.count_within(r), m.count_within(c, r, Shape::Ball));
        }
        assert_eq!(prof.invert(0.01).unwrap(), m.invert_mass(c, 0.01, Shape::Ball).unwrap());
    }

    #[test]
    fn local_dimension_baker_and_doubling() {
        let m = baker_measure(1_000_000);
        let est = m.local_dimension(SectionPoint::new(0.1, 0.1), 0.2, 0.2 / 256.0).unwrap();
        assert!((est.dimension - 2.0).abs() < 0.1, "{est:?}");
        let d = EmpiricalMeasure::build(System::Doubling, 1_000_000, 0, &Seeder::new(2), MeasureOptions::default())
            .unwrap();
        let est = d.local_dimension(SectionPoint::new(0.1, 0.0), 0.2, 0.2 / 256.0).unwrap();
        assert!((est.dimension - 1.0).abs() < 0.05, "{est:?}");
    }

    #[test]
    fn local_dimension_needs_radii() {
        let m = baker_measure(100_000);
        assert!(m.local_dimension(SectionPoint::new(0.0, 0.0), 0.2, 0.05).is_err());
    }

    #[test]
    fn windowed_measure_matches_full() {
        let s = Seeder::new(4);
        let full = EmpiricalMeasure::build(System::Baker, 400_000, 10, &s, MeasureOptions::default()).unwrap();
        let win = EmpiricalMeasure::build(
            System::Baker,
            400_000,
            10,
            &s,
            MeasureOptions {
                window: Some(Rect::new(0.0, 0.2, 0.0, 0.2)),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(win.retained() < full.retained() / 10);
        let c = SectionPoint::new(0.1, 0.1);
        assert!(win.covers(c, 0.05));
        assert!(!win.covers(c, 0.15));
        assert_eq!(win.ball_mass(c, 0.05, Shape::Ball), full.ball_mass(c, 0.05, Shape::Ball));
        assert!(matches!(win.invert_mass(c, 0.2, Shape::Ball), Err(LabError::Resolution(_))));
    }

    #[test]
    fn snapshot_round_trip() {
        let m = EmpiricalMeasure::build(
            System::lorenz(ModelParams::default()).unwrap(),
            50_000,
            1000,
            &Seeder::new(1),
            MeasureOptions { cell_exp: 6, ..Default::default() },
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf).unwrap();
        let back = EmpiricalMeasure::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        buf[0] = b'X';
        assert!(EmpiricalMeasure::read_snapshot(buf.as_slice()).is_err());
    }

    #[test]
    fn ulam_doubling_is_uniform() {
        let d = ulam_acim(&System::Doubling, 256, 0, &Seeder::new(0)).unwrap();
        assert_eq!(d.method, UlamMethod::PowerIteration);
        assert!(d.density.iter().all(|v| (v - 1.0).abs() <= 1e-8));
    }

    #[test]
    fn ulam_rejects_bad_bins() {
        assert!(ulam_acim(&System::Doubling, 100, 0, &Seeder::new(0)).is_err());
        assert!(ulam_acim(&System::Doubling, 32, 0, &Seeder::new(0)).is_err());
    }

    #[test]
    fn ulam_falls_back_to_histogram() {
        let sys = System::lorenz(ModelParams::default()).unwrap();
        let d = ulam_acim_with(&sys, 64, 200_000, &Seeder::new(0), 1).unwrap();
        assert_eq!(d.method, UlamMethod::OrbitHistogram);
        let s: f64 = d.density.iter().sum::<f64>() / 64.0;
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ulam_rows_are_stochastic() {
        let sys = System::lorenz(ModelParams::default()).unwrap();
        let op = UlamOperator::new(&sys, 128).unwrap();
        for row in &op.rows {
            let s: f64 = row.iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
