//! The geometric Lorenz return map, its one-dimensional quotient, a
//! Lebesgue-preserving baker reference system, and orbit streams.
//!
//! The section is `I x I` with `I = [-1/2, 1/2]`; the line `x = 0` is the
//! stable manifold of the origin and the Lorenz map is undefined there.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::rng::uniform_point;

pub const HALF: f64 = 0.5;

/// Below this magnitude `|x|^a` is treated as zero instead of going through
/// `exp(a ln|x|)`.
const POW_GUARD: f64 = 1e-300;

/// Constants of the geometric Lorenz model.
///
/// `alpha = -lambda3/lambda1` and `beta = -lambda2/lambda1` are derived, not
/// stored, so they can never disagree with the eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub theta: f64,
    pub b0: f64,
    pub b1: f64,
    pub g_kappa: f64,
    pub g_c: f64,
    pub tau0: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: -2.0,
            lambda3: -0.6,
            theta: 1.4,
            b0: -0.5,
            b1: 0.5,
            g_kappa: 1.0,
            g_c: 0.25,
            tau0: 1.0,
        }
    }
}

impl ModelParams {
    pub fn alpha(&self) -> f64 {
        -self.lambda3 / self.lambda1
    }

    pub fn beta(&self) -> f64 {
        -self.lambda2 / self.lambda1
    }

    /// Checks every constraint of the construction and names the first one
    /// that fails.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(LabError::Params(msg));
        let fields = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.theta,
            self.b0,
            self.b1,
            self.g_kappa,
            self.g_c,
            self.tau0,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return fail("all parameters must be finite".into());
        }
        let (l1, l2, l3) = (self.lambda1, self.lambda2, self.lambda3);
        if !(l1 > 0.0) {
            return fail(format!("lambda1 > 0 violated (lambda1 = {l1})"));
        }
        if !(l1 / 2.0 <= -l3) {
            return fail(format!("lambda1/2 <= -lambda3 violated ({} > {})", l1 / 2.0, -l3));
        }
        if !(-l3 < l1) {
            return fail(format!("-lambda3 < lambda1 violated ({} >= {l1})", -l3));
        }
        if !(l1 < -l2) {
            return fail(format!("lambda1 < -lambda2 violated ({l1} >= {})", -l2));
        }
        let (a, b, th) = (self.alpha(), self.beta(), self.theta);
        let upper = th * 0.5f64.powf(a);
        if !(upper < 1.0) {
            return fail(format!("theta*(1/2)^alpha < 1 violated (value {upper:.6})"));
        }
        let slope = th * a * 2f64.powf(1.0 - a);
        if !(slope > 1.0) {
            return fail(format!("theta*alpha*2^(1-alpha) > 1 violated (value {slope:.6})"));
        }
        if (self.b0 + HALF).abs() > 1e-12 || (self.b1 - HALF).abs() > 1e-12 {
            return fail(format!(
                "T(0+) = -1/2 and T(0-) = +1/2 require b0 = -1/2, b1 = 1/2 (got {}, {})",
                self.b0, self.b1
            ));
        }
        if !(self.g_kappa > 0.0) {
            return fail(format!("g_kappa > 0 violated (g_kappa = {})", self.g_kappa));
        }
        let reach = self.g_kappa * 0.5f64.powf(b) * HALF;
        if !(self.g_c.abs() + reach <= HALF) {
            return fail(format!(
                "G-image containment |g_c| + g_kappa*2^(-beta-1) <= 1/2 violated (value {:.6})",
                self.g_c.abs() + reach
            ));
        }
        if !(self.g_c - reach > 0.0) {
            return fail(format!(
                "disjoint G branch images need g_c > g_kappa*2^(-beta-1) ({} <= {reach:.6})",
                self.g_c
            ));
        }
        if !(self.tau0 >= 0.0) {
            return fail(format!("tau0 >= 0 violated (tau0 = {})", self.tau0));
        }
        Ok(())
    }

    /// Stable hex digest of the parameter values, used to tie reports and
    /// snapshots to the model that produced them.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.theta,
            self.b0,
            self.b1,
            self.g_kappa,
            self.g_c,
            self.tau0,
        ] {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// A point of the Poincaré section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionPoint {
    pub x: f64,
    pub y: f64,
}

impl SectionPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_singular(&self) -> bool {
        self.x == 0.0
    }

    pub fn in_section(&self) -> bool {
        self.x.abs() <= HALF && self.y.abs() <= HALF
    }

    pub fn euclidean(&self, other: &SectionPoint) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn max_dist(&self, other: &SectionPoint) -> f64 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

#[inline]
fn abs_pow(ax: f64, ln_ax: f64, e: f64) -> f64 {
    if ax < POW_GUARD {
        0.0
    } else {
        (e * ln_ax).exp()
    }
}

/// Validated Lorenz parameters with the derived exponents cached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzMap {
    params: ModelParams,
    alpha: f64,
    beta: f64,
}

impl LorenzMap {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            alpha: params.alpha(),
            beta: params.beta(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn check_x(x: f64) -> Result<()> {
        if !(x.abs() <= HALF) {
            return Err(LabError::Domain(x));
        }
        if x == 0.0 {
            return Err(LabError::Singular);
        }
        Ok(())
    }

    /// The one-dimensional quotient map `T`.
    pub fn t(&self, x: f64) -> Result<f64> {
        Self::check_x(x)?;
        Ok(self.t_unchecked(x))
    }

    #[inline]
    pub fn t_unchecked(&self, x: f64) -> f64 {
        let ax = x.abs();
        let xa = abs_pow(ax, ax.ln(), self.alpha);
        if x > 0.0 {
            self.params.theta * xa + self.params.b0
        } else {
            -self.params.theta * xa + self.params.b1
        }
    }

    /// `T'(x) = theta * alpha * |x|^(alpha - 1)` on both branches.
    pub fn t_prime(&self, x: f64) -> Result<f64> {
        Self::check_x(x)?;
        let ax = x.abs();
        Ok(self.params.theta * self.alpha * ((self.alpha - 1.0) * ax.ln()).exp())
    }

    /// `G(x, y) = g_kappa * y * |x|^beta + sign(x) * g_c`.
    pub fn g(&self, x: f64, y: f64) -> Result<f64> {
        Self::check_x(x)?;
        let ax = x.abs();
        let xb = abs_pow(ax, ax.ln(), self.beta);
        Ok(self.params.g_kappa * y * xb + x.signum() * self.params.g_c)
    }

    /// The return map `F(x, y) = (T(x), G(x, y))`.
    pub fn apply(&self, p: SectionPoint) -> Result<SectionPoint> {
        Self::check_x(p.x)?;
        if !(p.y.abs() <= HALF) {
            return Err(LabError::Domain(p.y));
        }
        Ok(self.apply_unchecked(p))
    }

    #[inline]
    pub fn apply_unchecked(&self, p: SectionPoint) -> SectionPoint {
        let ax = p.x.abs();
        let l = ax.ln();
        let xa = abs_pow(ax, l, self.alpha);
        let xb = abs_pow(ax, l, self.beta);
        let fiber = self.params.g_kappa * p.y * xb;
        if p.x > 0.0 {
            SectionPoint::new(
                self.params.theta * xa + self.params.b0,
                fiber + self.params.g_c,
            )
        } else {
            SectionPoint::new(
                -self.params.theta * xa + self.params.b1,
                fiber - self.params.g_c,
            )
        }
    }

    /// Fiber contraction factor `|dG/dy| = g_kappa |x|^beta`.
    pub fn fiber_rate(&self, x: f64) -> f64 {
        self.params.g_kappa * x.abs().powf(self.beta)
    }

    /// Flow time between two section crossings:
    /// `-(1/lambda1) log|x| + tau0`.
    pub fn return_time(&self, p: SectionPoint) -> Result<f64> {
        Self::check_x(p.x)?;
        Ok(self.return_time_unchecked(p.x))
    }

    #[inline]
    pub fn return_time_unchecked(&self, x: f64) -> f64 {
        -x.abs().ln() / self.params.lambda1 + self.params.tau0
    }

    /// Interval containing `G(x, y)` for `x > 0`; the `x < 0` image is its
    /// mirror.
    pub fn positive_branch_fiber_image(&self) -> (f64, f64) {
        let reach = self.params.g_kappa * 0.5f64.powf(self.beta) * HALF;
        (self.params.g_c - reach, self.params.g_c + reach)
    }

    /// The period-two orbit `p <-> F(p)` with `p.x > 0` and `T(p.x) < 0`.
    pub fn period_two_orbit(&self) -> Result<[SectionPoint; 2]> {
        // T(x) + x changes sign on (0, 1/2] when T(1/2) > -1/2
        let f = |x: f64| self.t_unchecked(x) + x;
        let (mut lo, mut hi) = (1e-12, HALF);
        if f(lo) >= 0.0 || f(hi) <= 0.0 {
            return Err(LabError::Estimation("no sign change for T(x) = -x".into()));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        let x1 = self.t_unchecked(x);
        if (self.t_unchecked(x1) - x).abs() > 1e-9 {
            return Err(LabError::Estimation(format!("x = {x} is not of period two under T")));
        }
        // fibers contract, so iterating F^2 on the fiber over x converges
        let mut p = SectionPoint::new(x, 0.0);
        for _ in 0..200 {
            p = self.apply_unchecked(self.apply_unchecked(p));
            p.x = x;
        }
        Ok([p, self.apply_unchecked(p)])
    }
}

pub fn lorenz_t(params: &ModelParams, x: f64) -> Result<f64> {
    LorenzMap::new(*params)?.t(x)
}

pub fn lorenz_t_prime(params: &ModelParams, x: f64) -> Result<f64> {
    LorenzMap::new(*params)?.t_prime(x)
}

pub fn lorenz_f(params: &ModelParams, p: SectionPoint) -> Result<SectionPoint> {
    LorenzMap::new(*params)?.apply(p)
}

pub fn return_time(params: &ModelParams, p: SectionPoint) -> Result<f64> {
    LorenzMap::new(*params)?.return_time(p)
}

/// Doubling map of `I` onto itself: `2x` reduced mod 1 into `[-1/2, 1/2)`.
#[inline]
pub fn doubling(x: f64) -> f64 {
    let d = 2.0 * x;
    if d >= HALF {
        d - 1.0
    } else if d < -HALF {
        d + 1.0
    } else {
        d
    }
}

/// Baker-type skew product over the doubling map. Each half `x < 0`,
/// `x >= 0` is stretched by 2 horizontally and squeezed by 2 vertically onto
/// the lower/upper half of the square, so 2-D Lebesgue measure is preserved.
pub fn baker_f(p: SectionPoint) -> SectionPoint {
    let y = if p.x < 0.0 { p.y / 2.0 - 0.25 } else { p.y / 2.0 + 0.25 };
    SectionPoint::new(doubling(p.x), y)
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn contains(&self, p: &SectionPoint) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

/// Exact preimage of `r` under [`baker_f`] as a list of rectangles.
///
/// `r` is split along the lines `x = 0` and `y = 0`; on each piece the
/// inverse branch is affine with Jacobian 1.
pub fn baker_preimage(r: &Rect) -> Vec<Rect> {
    let mut out = Vec::new();
    let xs = [(r.x0, r.x1.min(0.0)), (r.x0.max(0.0), r.x1)];
    let ys = [(r.y0, r.y1.min(0.0)), (r.y0.max(0.0), r.y1)];
    for &(ya, yb) in &ys {
        if yb <= ya {
            continue;
        }
        // Lower half of the image comes from x < 0, upper half from x >= 0.
        let from_left = yb <= 0.0;
        let (pre_y0, pre_y1) = if from_left {
            (2.0 * (ya + 0.25), 2.0 * (yb + 0.25))
        } else {
            (2.0 * (ya - 0.25), 2.0 * (yb - 0.25))
        };
        for &(xa, xb) in &xs {
            if xb <= xa {
                continue;
            }
            let image_negative = xb <= 0.0;
            let shift = match (from_left, image_negative) {
                (true, true) => 0.0,
                (true, false) => -1.0,
                (false, true) => 1.0,
                (false, false) => 0.0,
            };
            out.push(Rect::new((xa + shift) / 2.0, (xb + shift) / 2.0, pre_y0, pre_y1));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Lorenz,
    Baker,
    Doubling,
}

/// A concrete dynamical system on the section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum System {
    Lorenz(LorenzMap),
    /// Baker skew product; invariant measure is 2-D Lebesgue.
    Baker,
    /// Doubling map on the `x` axis (`y` stays 0); invariant measure is
    /// 1-D Lebesgue.
    Doubling,
}

impl System {
    pub fn lorenz(params: ModelParams) -> Result<Self> {
        Ok(System::Lorenz(LorenzMap::new(params)?))
    }

    pub fn from_kind(kind: SystemKind, params: ModelParams) -> Result<Self> {
        match kind {
            SystemKind::Lorenz => Self::lorenz(params),
            SystemKind::Baker => Ok(System::Baker),
            SystemKind::Doubling => Ok(System::Doubling),
        }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            System::Lorenz(_) => SystemKind::Lorenz,
            System::Baker => SystemKind::Baker,
            System::Doubling => SystemKind::Doubling,
        }
    }

    /// One application of the map in plain floating point.
    pub fn apply(&self, p: SectionPoint) -> Result<SectionPoint> {
        match self {
            System::Lorenz(m) => m.apply(p),
            System::Baker => Ok(baker_f(p)),
            System::Doubling => Ok(SectionPoint::new(doubling(p.x), 0.0)),
        }
    }

    /// Quotient (expanding) coordinate map.
    pub fn base(&self, x: f64) -> Result<f64> {
        match self {
            System::Lorenz(m) => m.t(x),
            System::Baker | System::Doubling => Ok(doubling(x)),
        }
    }
}

/// Supplies fresh low-order bits to the dyadic systems.
#[derive(Debug, Clone)]
struct BitSource {
    rng: ChaCha8Rng,
    buf: u64,
    left: u32,
}

impl BitSource {
    #[inline]
    fn bit(&mut self) -> u64 {
        if self.left == 0 {
            self.buf = self.rng.next_u64();
            self.left = 64;
        }
        let b = self.buf & 1;
        self.buf >>= 1;
        self.left -= 1;
        b
    }
}

#[derive(Debug, Clone, Copy)]
enum State {
    Real(SectionPoint),
    /// Base point held as a 64-bit fraction `z = x mod 1` of the circle, so
    /// doubling is an exact left shift. Bits shifted in at the bottom are
    /// drawn from the stream's RNG: in plain f64 the doubling map collapses
    /// every orbit onto 0 within ~55 steps, whereas this follows the true
    /// orbit of a point whose unknown trailing binary digits are random.
    Dyadic { z: u64, y: f64 },
}

const TWO_POW_64: f64 = 18_446_744_073_709_551_616.0;

#[inline]
fn z_to_x(z: u64) -> f64 {
    let f = z as f64 / TWO_POW_64;
    if z >> 63 == 0 {
        f
    } else {
        f - 1.0
    }
}

fn x_to_z(x: f64) -> u64 {
    let f = x.rem_euclid(1.0);
    (f * TWO_POW_64) as u64
}

/// Stream of iterates `p0, F(p0), F^2(p0), ...`.
///
/// If an iterate lands exactly on the singular line the stream ends and
/// [`Orbit::truncated`] reports it; points are never perturbed.
#[derive(Debug, Clone)]
pub struct Orbit {
    system: System,
    state: State,
    bits: BitSource,
    emitted: u64,
    limit: Option<u64>,
    truncated: bool,
    start: Option<SectionPoint>,
}

impl Orbit {
    /// Orbit from an explicit point. `rng` supplies the binary digits beyond
    /// f64 precision for the dyadic systems.
    pub fn from_point(system: System, p0: SectionPoint, mut rng: ChaCha8Rng) -> Result<Self> {
        if !p0.in_section() {
            return Err(LabError::Domain(if p0.x.abs() > HALF { p0.x } else { p0.y }));
        }
        let state = match system {
            System::Lorenz(_) => {
                if p0.is_singular() {
                    return Err(LabError::Singular);
                }
                State::Real(p0)
            }
            System::Baker | System::Doubling => {
                let z = (x_to_z(p0.x) & !0x7ff) | (rng.next_u64() & 0x7ff);
                let y = if matches!(system, System::Doubling) { 0.0 } else { p0.y };
                State::Dyadic { z, y }
            }
        };
        Ok(Self {
            system,
            state,
            bits: BitSource { rng, buf: 0, left: 0 },
            emitted: 0,
            limit: None,
            truncated: false,
            start: Some(p0),
        })
    }

    /// Orbit from a uniformly drawn start pushed through `burn_in` steps, the
    /// Monte Carlo stand-in for a point drawn from the invariant measure.
    pub fn typical(system: System, mut rng: ChaCha8Rng, burn_in: u64) -> Result<Self> {
        for _ in 0..16 {
            let state = match system {
                System::Lorenz(_) => {
                    let p = uniform_point(&mut rng);
                    if p.is_singular() {
                        continue;
                    }
                    State::Real(p)
                }
                System::Baker => State::Dyadic {
                    z: rng.next_u64(),
                    y: rng.random::<f64>() - 0.5,
                },
                System::Doubling => State::Dyadic { z: rng.next_u64(), y: 0.0 },
            };
            let mut orbit = Self {
                system,
                state,
                bits: BitSource { rng: rng.clone(), buf: 0, left: 0 },
                emitted: 0,
                limit: None,
                truncated: false,
                start: None,
            };
            let mut ok = true;
            for _ in 0..burn_in {
                if !orbit.advance() {
                    ok = false;
                    break;
                }
            }
            if ok {
                orbit.truncated = false;
                return Ok(orbit);
            }
            rng = orbit.bits.rng;
        }
        Err(LabError::Singular)
    }

    pub fn with_limit(mut self, n: u64) -> Self {
        self.limit = Some(n);
        self
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    #[inline]
    pub fn current(&self) -> SectionPoint {
        match self.state {
            State::Real(p) => p,
            State::Dyadic { z, y } => SectionPoint::new(z_to_x(z), y),
        }
    }

    /// Applies the map once. Returns `false` (and marks the orbit truncated)
    /// if the current point is singular.
    #[inline]
    pub fn advance(&mut self) -> bool {
        match (&self.system, &mut self.state) {
            (System::Lorenz(m), State::Real(p)) => {
                if p.x == 0.0 {
                    self.truncated = true;
                    return false;
                }
                *p = m.apply_unchecked(*p);
                true
            }
            (sys, State::Dyadic { z, y }) => {
                let left_half = *z >> 63 == 1;
                *z = (*z << 1) | self.bits.bit();
                if matches!(sys, System::Baker) {
                    *y = *y / 2.0 + if left_half { -0.25 } else { 0.25 };
                }
                true
            }
            _ => unreachable!("orbit state does not match its system"),
        }
    }
}

impl Iterator for Orbit {
    type Item = SectionPoint;

    fn next(&mut self) -> Option<SectionPoint> {
        if self.truncated || self.limit.is_some_and(|n| self.emitted >= n) {
            return None;
        }
        if self.emitted > 0 && !self.advance() {
            return None;
        }
        self.emitted += 1;
        match self.start.take() {
            Some(p0) if self.emitted == 1 => Some(p0),
            _ => Some(self.current()),
        }
    }
}

/// Streams the first `n` points of the orbit of `p0`.
pub fn iterate_orbit(system: System, p0: SectionPoint, n: u64, rng: ChaCha8Rng) -> Result<Orbit> {
    if n == 0 {
        return Err(LabError::Config("orbit length must be at least 1".into()));
    }
    Ok(Orbit::from_point(system, p0, rng)?.with_limit(n))
}
