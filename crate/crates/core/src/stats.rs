//! Distances to the Gaussian, moment checks, mixing and rate fits.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::constants::ModelConstants;
use crate::error::{domain, Result};
use crate::limit_chain::MixingSeries;
use crate::paths::{Decomposition, TruncationParams};
use crate::vector::random_unit;

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Standard normal CDF.
#[inline]
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `int_{-inf}^x Phi`.
#[inline]
fn phi_integral(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else {
        x * phi(x) + normal_pdf(x)
    }
}

/// `int_a^b |c - Phi(x)| dx` for a level `c` in `[0, 1]`.
fn gap_to_phi(a: f64, b: f64, c: f64) -> f64 {
    let below = |lo: f64, hi: f64| phi_integral(hi) - phi_integral(lo);
    let split = if c <= 0.0 {
        f64::NEG_INFINITY
    } else if c >= 1.0 {
        f64::INFINITY
    } else {
        normal_quantile(c)
    };
    let s = split.clamp(a, b);
    // Phi < c on [a, s], Phi > c on [s, b].
    let left = c * (s - a) - below(a, s);
    let right = below(s, b) - c * (b - s);
    left.max(0.0) + right.max(0.0)
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    StandardNormal,
    Sample(&'a [f64]),
}

/// One-dimensional Wasserstein-1 distance, `int |F - G|`, evaluated exactly
/// for the empirical law of `sample` against either the standard normal or
/// the empirical law of a second sample.
pub fn w1_1d(sample: &[f64], reference: Reference<'_>) -> Result<f64> {
    if sample.is_empty() {
        return domain("w1_1d: empty sample");
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return domain("w1_1d: non-finite sample value");
    }
    let xs = sorted(sample);
    match reference {
        Reference::StandardNormal => {
            let n = xs.len() as f64;
            let first = xs[0];
            let last = xs[xs.len() - 1];
            let mut total = phi_integral(first) + phi_integral(-last);
            for (i, w) in xs.windows(2).enumerate() {
                if w[1] > w[0] {
                    total += gap_to_phi(w[0], w[1], (i + 1) as f64 / n);
                }
            }
            Ok(total)
        }
        Reference::Sample(other) => {
            if other.is_empty() {
                return domain("w1_1d: empty reference sample");
            }
            let ys = sorted(other);
            let (na, nb) = (xs.len() as f64, ys.len() as f64);
            let (mut i, mut j) = (0usize, 0usize);
            let mut prev = xs[0].min(ys[0]);
            let mut total = 0.0;
            while i < xs.len() || j < ys.len() {
                let next = match (xs.get(i), ys.get(j)) {
                    (Some(&a), Some(&b)) => a.min(b),
                    (Some(&a), None) => a,
                    (None, Some(&b)) => b,
                    (None, None) => unreachable!(),
                };
                total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
                while i < xs.len() && xs[i] == next {
                    i += 1;
                }
                while j < ys.len() && ys[j] == next {
                    j += 1;
                }
                prev = next;
            }
            Ok(total)
        }
    }
}

/// `sup_x |F_n(x) - Phi(x)|`.
pub fn ks_1d(sample: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return domain("ks_1d: empty sample");
    }
    let xs = sorted(sample);
    let n = xs.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        let mut j = i;
        while j < xs.len() && xs[j] == xs[i] {
            j += 1;
        }
        let p = phi(xs[i]);
        worst = worst.max((p - i as f64 / n).abs()).max((j as f64 / n - p).abs());
        i = j;
    }
    Ok(worst)
}

/// Two-sample Kolmogorov distance `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return domain("ks_two_sample: empty sample");
    }
    let (xs, ys) = (sorted(a), sorted(b));
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut worst: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let t = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= t {
            i += 1;
        }
        while j < ys.len() && ys[j] <= t {
            j += 1;
        }
        worst = worst.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(worst)
}

/// `sup_z |P(W <= z coordinatewise) - prod_k Phi(z_k)|` over grid points.
/// `samples` holds `d`-dimensional rows.
pub fn ks_orthant(samples: &[f64], d: usize, grid: &[Vec<f64>]) -> Result<f64> {
    if d == 0 || samples.is_empty() || samples.len() % d != 0 {
        return domain("ks_orthant: empty or ragged samples");
    }
    if grid.is_empty() || grid.iter().any(|z| z.len() != d) {
        return domain("ks_orthant: grid must be non-empty with d-dimensional points");
    }
    let n = (samples.len() / d) as f64;
    let mut worst: f64 = 0.0;
    for z in grid {
        let hits = samples
            .chunks_exact(d)
            .filter(|w| w.iter().zip(z).all(|(x, zk)| x <= zk))
            .count();
        let target: f64 = z.iter().map(|&zk| phi(zk)).product();
        worst = worst.max((hits as f64 / n - target).abs());
    }
    Ok(worst.clamp(0.0, 1.0))
}

/// Tensor grid with `points` evenly spaced nodes per axis on `[lo, hi]`.
pub fn orthant_grid(d: usize, points: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..points)
        .map(|i| {
            if points == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (points - 1) as f64
            }
        })
        .collect();
    let mut grid = vec![Vec::new()];
    for _ in 0..d {
        grid = grid
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    grid
}

/// Uniform random projection directions.
pub fn projections<R: Rng + ?Sized>(d: usize, n_proj: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n_proj).map(|_| random_unit(d, rng)).collect()
}

fn project(samples: &[f64], d: usize, dir: &[f64]) -> Vec<f64> {
    samples
        .chunks_exact(d)
        .map(|w| w.iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect()
}

/// Mean over the given directions of the normal-reference W1 of the
/// projected samples.
pub fn sliced_w1_with(samples: &[f64], d: usize, dirs: &[Vec<f64>]) -> Result<f64> {
    if d == 0 || samples.is_empty() || samples.len() % d != 0 {
        return domain("sliced_w1: empty or ragged samples");
    }
    if dirs.is_empty() {
        return domain("sliced_w1: no projections");
    }
    let mut total = 0.0;
    for dir in dirs {
        total += w1_1d(&project(samples, d, dir), Reference::StandardNormal)?;
    }
    Ok(total / dirs.len() as f64)
}

pub fn sliced_w1<R: Rng + ?Sized>(samples: &[f64], d: usize, n_proj: usize, rng: &mut R) -> Result<f64> {
    if d < 2 || n_proj == 0 {
        return domain("sliced_w1: need d >= 2 and n_proj >= 1");
    }
    sliced_w1_with(samples, d, &projections(d, n_proj, rng))
}

/// Standard deviation of a statistic over `resamples` bootstrap resamples
/// of the rows of `samples`.
pub fn bootstrap_stderr<F>(samples: &[f64], d: usize, resamples: usize, seed: u64, stat: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let rows = samples.len() / d.max(1);
    if rows < 2 || resamples < 2 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; samples.len()];
    for _ in 0..resamples {
        for row in buf.chunks_exact_mut(d) {
            let k = rng.random_range(0..rows);
            row.copy_from_slice(&samples[k * d..(k + 1) * d]);
        }
        values.push(stat(&buf)?);
    }
    let m = values.iter().sum::<f64>() / resamples as f64;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (resamples - 1) as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    W1_1d,
    SlicedW1,
    KsOrthant,
}

impl DistanceMetric {
    pub fn name(&self) -> &'static str {
        match self {
            Self::W1_1d => "w1_1d",
            Self::SlicedW1 => "sliced_w1",
            Self::KsOrthant => "ks_orthant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub metric: DistanceMetric,
    /// `n` for discrete time, `t` for continuous time.
    pub horizon: f64,
    pub value: f64,
    pub stderr: f64,
    pub replicas: usize,
}

/// Distance of `samples` (rows of dimension `d`) to `N(0, I_d)` with a
/// bootstrap standard error. Sliced W1 keeps its projections fixed across
/// resamples; W1 in `d = 1` uses the normal reference directly.
pub fn distance_report(
    metric: DistanceMetric,
    samples: &[f64],
    d: usize,
    horizon: f64,
    seed: u64,
    n_proj: usize,
    grid: &[Vec<f64>],
) -> Result<DistanceReport> {
    let stat = |s: &[f64]| -> Result<f64> {
        match metric {
            DistanceMetric::W1_1d => w1_1d(s, Reference::StandardNormal),
            DistanceMetric::SlicedW1 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                sliced_w1(s, d, n_proj, &mut rng)
            }
            DistanceMetric::KsOrthant => ks_orthant(s, d, grid),
        }
    };
    let value = stat(samples)?;
    let stderr = bootstrap_stderr(samples, d, BOOTSTRAP_RESAMPLES, seed ^ 0x9e37_79b9_7f4a_7c15, stat)?;
    Ok(DistanceReport {
        metric,
        horizon,
        value,
        stderr,
        replicas: samples.len() / d.max(1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n: usize,
    pub r_n: f64,
    pub samples: usize,
    pub e_xi2: f64,
    pub e_xi3: f64,
    pub e_xi4: f64,
    pub e_m: f64,
    pub e_m2: f64,
    pub e_tilde2: f64,
    pub e_tilde4: f64,
    /// Leading term `d sigma_d^2 log n` of `E xi'^2`.
    pub predicted_xi2: f64,
    pub xi_bar: f64,
    /// `E xi'^2 / (d sigma_d^2 log n)`.
    pub xi2_ratio: f64,
    pub m_gap: f64,
    /// `E xi'^3 / r_n`.
    pub xi3_scaled: f64,
    /// `E xi'^4 / r_n^2`.
    pub xi4_scaled: f64,
    /// `E xi_tilde^4 / r_n^2`.
    pub tilde4_scaled: f64,
}

pub const MIN_MOMENT_SAMPLES: usize = 1000;

pub fn moment_suite(
    decomposition: &Decomposition,
    params: &TruncationParams,
    constants: &ModelConstants,
) -> Result<MomentReport> {
    let len = decomposition.xi_trunc.len();
    if len < MIN_MOMENT_SAMPLES {
        return domain(format!("moment_suite: {len} samples, need {MIN_MOMENT_SAMPLES}"));
    }
    let mean = |f: &dyn Fn(usize) -> f64| (0..len).map(f).sum::<f64>() / len as f64;
    let x = &decomposition.xi_trunc;
    let m = &decomposition.m;
    let t = &decomposition.xi_tilde;
    let e_xi2 = mean(&|i| x[i] * x[i]);
    let e_xi3 = mean(&|i| x[i].powi(3));
    let e_xi4 = mean(&|i| x[i].powi(4));
    let e_m = mean(&|i| m[i]);
    let e_m2 = mean(&|i| m[i] * m[i]);
    let e_tilde2 = mean(&|i| t[i] * t[i]);
    let e_tilde4 = mean(&|i| t[i].powi(4));
    let predicted_xi2 = constants.d as f64 * constants.sigma2_d * (params.n as f64).ln();
    let r = params.r_n;
    Ok(MomentReport {
        n: params.n,
        r_n: r,
        samples: len,
        e_xi2,
        e_xi3,
        e_xi4,
        e_m,
        e_m2,
        e_tilde2,
        e_tilde4,
        predicted_xi2,
        xi_bar: constants.xi_bar,
        xi2_ratio: e_xi2 / predicted_xi2,
        m_gap: e_m - constants.xi_bar,
        xi3_scaled: e_xi3 / r,
        xi4_scaled: e_xi4 / (r * r),
        tilde4_scaled: e_tilde4 / (r * r),
    })
}

pub const MIN_RATIO_REPLICAS: usize = 100;

/// `E |Q'_n|^2 / (d sigma_d^2 n log n)` over rows of truncated displacements.
pub fn second_moment_ratio(q_trunc: &[f64], d: usize, n: usize, constants: &ModelConstants) -> Result<f64> {
    if d == 0 || q_trunc.len() % d != 0 {
        return domain("second_moment_ratio: ragged rows");
    }
    let replicas = q_trunc.len() / d;
    if replicas < MIN_RATIO_REPLICAS {
        return domain(format!(
            "second_moment_ratio: {replicas} replicas, need {MIN_RATIO_REPLICAS}"
        ));
    }
    if n < 2 {
        return domain("second_moment_ratio: n < 2");
    }
    let e2 = q_trunc.iter().map(|x| x * x).sum::<f64>() / replicas as f64;
    let nf = n as f64;
    Ok(e2 / (d as f64 * constants.sigma2_d * nf * nf.ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// `c / sqrt(log n)`
    InvSqrtLog,
    /// `c sqrt(log log n / log n)`
    SqrtLogLogOverLog,
    /// `c / sqrt(n)`
    InvSqrt,
}

impl RateModel {
    pub const ALL: [RateModel; 3] = [Self::InvSqrtLog, Self::SqrtLogLogOverLog, Self::InvSqrt];

    pub fn shape(&self, n: f64) -> f64 {
        match self {
            Self::InvSqrtLog => 1.0 / n.ln().sqrt(),
            Self::SqrtLogLogOverLog => (n.ln().ln() / n.ln()).sqrt(),
            Self::InvSqrt => 1.0 / n.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub model: RateModel,
    pub c: f64,
    /// Root-mean-square residual in distance units.
    pub residual: f64,
}

/// Least-squares `c` for `distance ~ c g(n)`.
pub fn rate_fit(points: &[(f64, f64)], model: RateModel) -> Result<RateFit> {
    if points.len() < 3 {
        return domain(format!("rate_fit: {} points, need 3", points.len()));
    }
    if points.iter().any(|(n, _)| !(*n >= 3.0)) {
        return domain("rate_fit: every horizon must be >= 3");
    }
    let g: Vec<f64> = points.iter().map(|(n, _)| model.shape(*n)).collect();
    let sgy: f64 = g.iter().zip(points).map(|(g, (_, y))| g * y).sum();
    let sgg: f64 = g.iter().map(|g| g * g).sum();
    let c = sgy / sgg;
    let sse: f64 = g.iter().zip(points).map(|(g, (_, y))| (y - c * g).powi(2)).sum();
    Ok(RateFit {
        model,
        c,
        residual: (sse / points.len() as f64).sqrt(),
    })
}

/// Fits of every model, best (smallest residual) first.
pub fn compare_rate_models(points: &[(f64, f64)]) -> Result<Vec<RateFit>> {
    let mut fits = RateModel::ALL
        .iter()
        .map(|m| rate_fit(points, *m))
        .collect::<Result<Vec<_>>>()?;
    fits.sort_by(|a, b| a.residual.total_cmp(&b.residual));
    Ok(fits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingFit {
    Decay { c: f64, omega: f64, lags_used: usize },
    NoDecayDetected,
}

pub const MIN_MIXING_LAGS: usize = 4;

/// Log-linear fit `|cov(k)| ~ C omega^k` over the leading run of lags whose
/// magnitude clears three iid standard errors.
pub fn mixing_fit(series: &MixingSeries) -> Result<MixingFit> {
    if series.cov.len() < MIN_MIXING_LAGS + 1 {
        return domain(format!(
            "mixing_fit: {} lags, need {MIN_MIXING_LAGS}",
            series.cov.len().saturating_sub(1)
        ));
    }
    let floor = 3.0 * series.iid_stderr;
    let used: Vec<(f64, f64)> = series
        .cov
        .iter()
        .enumerate()
        .take_while(|(_, c)| c.abs() > floor && c.abs() > 0.0)
        .map(|(k, c)| (k as f64, c.abs().ln()))
        .collect();
    if used.len() < 2 {
        return Ok(MixingFit::NoDecayDetected);
    }
    let n = used.len() as f64;
    let mk = used.iter().map(|p| p.0).sum::<f64>() / n;
    let my = used.iter().map(|p| p.1).sum::<f64>() / n;
    let skk: f64 = used.iter().map(|p| (p.0 - mk).powi(2)).sum();
    let sky: f64 = used.iter().map(|p| (p.0 - mk) * (p.1 - my)).sum();
    let slope = sky / skk;
    let omega = slope.exp();
    if !(omega < 1.0) {
        return Ok(MixingFit::NoDecayDetected);
    }
    Ok(MixingFit::Decay {
        c: (my - slope * mk).exp(),
        omega,
        lags_used: used.len(),
    })
}
