//! Small statistics toolkit: KS distances, Gumbel fitting, regression and
//! count-distribution tests.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{LabError, Result};

pub fn gumbel_cdf(z: f64) -> f64 {
    (-(-z).exp()).exp()
}

pub fn exp_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-x).exp_m1()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// One-sample Kolmogorov–Smirnov distance `sup |F_n - F|`.
pub fn ks_distance<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let v = sorted(sample);
    let n = v.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov tail `P(sqrt(n) D > t)`.
pub fn kolmogorov_pvalue(d: f64, n: usize) -> f64 {
    let t = d * (n as f64).sqrt();
    if t < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-2.0 * k * k * t * t).exp();
        s += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GumbelFit {
    pub location: f64,
    pub scale: f64,
}

/// Maximum-likelihood Gumbel fit via Newton iteration on the scale profile
/// equation `scale = mean(x) - sum(x w)/sum(w)`, `w = exp(-x/scale)`.
pub fn gumbel_mle(sample: &[f64]) -> Result<GumbelFit> {
    if sample.len() < 2 {
        return Err(LabError::Estimation("Gumbel fit needs at least two points".into()));
    }
    let m = mean(sample);
    let sd = std_dev(sample);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(LabError::Estimation("degenerate sample (zero variance)".into()));
    }
    let centered: Vec<f64> = sample.iter().map(|x| x - m).collect();
    let mut beta = sd * 6f64.sqrt() / std::f64::consts::PI;
    for _ in 0..200 {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &x in &centered {
            let w = (-x / beta).exp();
            s0 += w;
            s1 += x * w;
            s2 += x * x * w;
        }
        let g = beta + s1 / s0;
        // d/dbeta of s1/s0
        let dg = 1.0 + (s2 * s0 - s1 * s1) / (s0 * s0 * beta * beta);
        let step = g / dg;
        let next = if beta - step > 0.0 { beta - step } else { beta / 2.0 };
        if (next - beta).abs() < 1e-12 * beta {
            beta = next;
            break;
        }
        beta = next;
    }
    let s0: f64 = centered.iter().map(|x| (-x / beta).exp()).sum::<f64>() / centered.len() as f64;
    Ok(GumbelFit {
        location: m - beta * s0.ln(),
        scale: beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(LabError::Estimation("regression needs two or more paired points".into()));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(LabError::Estimation("regression abscissae are constant".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CountTest {
    pub mean: f64,
    pub variance: f64,
    pub dispersion: f64,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Dispersion index and Pearson chi-square of a count sample against the
/// Poisson law with the given mean. Cells with expected count below 5 are
/// pooled into the upper tail.
pub fn poisson_count_test(counts: &[u64], poisson_mean: f64) -> Result<CountTest> {
    if counts.len() < 2 {
        return Err(LabError::Estimation("count test needs at least two trials".into()));
    }
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let (m, v) = (mean(&xs), variance(&xs));
    let n = counts.len() as f64;
    let max = *counts.iter().max().unwrap_or(&0) as usize;
    let mut observed = vec![0u64; max + 2];
    for &c in counts {
        observed[c as usize] += 1;
    }
    let mut pmf = (-poisson_mean).exp();
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut cum = 0.0;
    let mut k = 0usize;
    loop {
        let tail = 1.0 - cum;
        if n * tail < 10.0 || k > max + 50 {
            let obs_tail: u64 = observed.iter().skip(k).sum();
            cells.push((obs_tail as f64, n * tail.max(0.0)));
            break;
        }
        let obs = observed.get(k).copied().unwrap_or(0) as f64;
        cells.push((obs, n * pmf));
        cum += pmf;
        k += 1;
        pmf *= poisson_mean / k as f64;
    }
    // merge low-expectation cells into their neighbour
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (o, e) in cells {
        match merged.last_mut() {
            Some(last) if last.1 < 5.0 => {
                last.0 += o;
                last.1 += e;
            }
            _ => merged.push((o, e)),
        }
    }
    while merged.len() > 1 && merged.last().is_some_and(|c| c.1 < 5.0) {
        let (o, e) = merged.pop().unwrap_or((0.0, 0.0));
        if let Some(last) = merged.last_mut() {
            last.0 += o;
            last.1 += e;
        }
    }
    let chi: f64 = merged.iter().filter(|c| c.1 > 0.0).map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = merged.len().saturating_sub(1).max(1);
    let p_value = ChiSquared::new(dof as f64)
        .map(|d| 1.0 - d.cdf(chi))
        .unwrap_or(f64::NAN);
    Ok(CountTest {
        mean: m,
        variance: v,
        dispersion: v / m,
        chi_square: chi,
        dof,
        p_value,
    })
}

/// Standard error of a binomial proportion.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
