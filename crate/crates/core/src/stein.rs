//! Multivariate Stein equation `Lap f - w . grad f = h - E h(Z)` solved
//! through the Ornstein-Uhlenbeck semigroup, and the one-flight resampling
//! exchangeable pair of the centred walk.
//!
//! With `s = e^{-u}` the solution and its derivatives are
//!
//! ```text
//! f(w)      = -int_0^1 (E h(s w + sqrt(1 - s^2) Z) - E h(Z)) / s ds
//! grad f(w) = -int_0^1 E grad h(s w + sqrt(1 - s^2) Z) ds
//! Hess f(w) = -int_0^1 s E D^2 h(s w + sqrt(1 - s^2) Z) ds
//! ```
//!
//! The `s`-integrands are smooth on `[0, 1]` because the Gaussian average is
//! even in the noise scale, so Gauss-Legendre in `s` converges quickly.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constants::ModelConstants;
use crate::error::{domain, Error, Result};
use crate::limit_chain::{sample_free_path, ChainStepper, KernelBackend};
use crate::paths::TruncationParams;
use crate::stats::phi;
use crate::vector::{dot, random_unit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
}

impl Bump {
    #[inline]
    fn value(&self, w: &[f64]) -> f64 {
        let b2 = self.width * self.width;
        let r2: f64 = w.iter().zip(&self.center).map(|(x, c)| (x - c) * (x - c)).sum();
        self.amplitude * (-0.5 * r2 / b2).exp()
    }

    fn add_grad(&self, w: &[f64], out: &mut [f64]) {
        let b2 = self.width * self.width;
        let v = self.value(w);
        for ((o, x), c) in out.iter_mut().zip(w).zip(&self.center) {
            *o -= v * (x - c) / b2;
        }
    }

    fn add_hess(&self, w: &[f64], out: &mut [f64]) {
        let d = w.len();
        let b2 = self.width * self.width;
        let v = self.value(w);
        for i in 0..d {
            let di = (w[i] - self.center[i]) / b2;
            for j in 0..d {
                let dj = (w[j] - self.center[j]) / b2;
                out[i * d + j] += v * (di * dj - if i == j { 1.0 / b2 } else { 0.0 });
            }
        }
    }

    /// `E h(a + eps Z)` in closed form.
    pub fn smoothed(&self, a: &[f64], eps: f64) -> f64 {
        let b2 = self.width * self.width;
        let t = b2 + eps * eps;
        let r2: f64 = a.iter().zip(&self.center).map(|(x, c)| (x - c) * (x - c)).sum();
        self.amplitude * (b2 / t).powf(a.len() as f64 / 2.0) * (-0.5 * r2 / t).exp()
    }

    fn dh_sup(&self) -> f64 {
        self.amplitude.abs() * (-0.5f64).exp() / self.width
    }

    fn d2h_sup(&self) -> f64 {
        self.amplitude.abs() / (self.width * self.width)
    }
}

/// Smooth test functions with analytic derivatives and declared sup-norms of
/// `Dh` (Euclidean) and `D^2 h` (operator norm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `a . w`
    Linear {
        coef: Vec<f64>,
    },
    /// `w_k^2`, with derivative norms taken over `|w| <= region_radius`.
    CoordinateSquare {
        d: usize,
        k: usize,
        region_radius: f64,
    },
    GaussianBump(Bump),
    BumpMixture {
        bumps: Vec<Bump>,
    },
    /// `Phi((level - e . w) / eps)` for a unit vector `e`.
    SmoothIndicator {
        direction: Vec<f64>,
        level: f64,
        eps: f64,
    },
    /// `sin(freq w_k)`
    SineCoordinate {
        d: usize,
        k: usize,
        freq: f64,
    },
}

impl TestFunction {
    pub fn dimension(&self) -> usize {
        match self {
            Self::Linear { coef } => coef.len(),
            Self::CoordinateSquare { d, .. } | Self::SineCoordinate { d, .. } => *d,
            Self::GaussianBump(b) => b.center.len(),
            Self::BumpMixture { bumps } => bumps.first().map_or(0, |b| b.center.len()),
            Self::SmoothIndicator { direction, .. } => direction.len(),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Self::Linear { coef } => format!("linear{coef:.3?}"),
            Self::CoordinateSquare { k, .. } => format!("square_w{}", k + 1),
            Self::GaussianBump(b) => format!("bump{:.3?}_b{:.3}", b.center, b.width),
            Self::BumpMixture { bumps } => format!("mixture{}", bumps.len()),
            Self::SmoothIndicator { level, eps, .. } => format!("indicator_l{level:.3}_e{eps:.3}"),
            Self::SineCoordinate { k, freq, .. } => format!("sin{freq:.3}_w{}", k + 1),
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        match self {
            Self::Linear { coef } => dot(coef, w),
            Self::CoordinateSquare { k, .. } => w[*k] * w[*k],
            Self::GaussianBump(b) => b.value(w),
            Self::BumpMixture { bumps } => bumps.iter().map(|b| b.value(w)).sum(),
            Self::SmoothIndicator { direction, level, eps } => phi((level - dot(direction, w)) / eps),
            Self::SineCoordinate { k, freq, .. } => (freq * w[*k]).sin(),
        }
    }

    /// Adds `grad h(w)` into `out`.
    pub fn add_grad(&self, w: &[f64], out: &mut [f64]) {
        match self {
            Self::Linear { coef } => out.iter_mut().zip(coef).for_each(|(o, a)| *o += a),
            Self::CoordinateSquare { k, .. } => out[*k] += 2.0 * w[*k],
            Self::GaussianBump(b) => b.add_grad(w, out),
            Self::BumpMixture { bumps } => bumps.iter().for_each(|b| b.add_grad(w, out)),
            Self::SmoothIndicator { direction, level, eps } => {
                let x = (level - dot(direction, w)) / eps;
                let g = -(-0.5 * x * x).exp() / ((2.0 * PI).sqrt() * eps);
                out.iter_mut().zip(direction).for_each(|(o, e)| *o += g * e);
            }
            Self::SineCoordinate { k, freq, .. } => out[*k] += freq * (freq * w[*k]).cos(),
        }
    }

    /// Adds the row-major Hessian of `h` at `w` into `out`.
    pub fn add_hess(&self, w: &[f64], out: &mut [f64]) {
        let d = w.len();
        match self {
            Self::Linear { .. } => {}
            Self::CoordinateSquare { k, .. } => out[k * d + k] += 2.0,
            Self::GaussianBump(b) => b.add_hess(w, out),
            Self::BumpMixture { bumps } => bumps.iter().for_each(|b| b.add_hess(w, out)),
            Self::SmoothIndicator { direction, level, eps } => {
                let x = (level - dot(direction, w)) / eps;
                // d/dx of the density is -x phi(x); two chain factors of -1/eps.
                let c = -x * (-0.5 * x * x).exp() / ((2.0 * PI).sqrt() * eps * eps);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] += c * direction[i] * direction[j];
                    }
                }
            }
            Self::SineCoordinate { k, freq, .. } => out[k * d + k] -= freq * freq * (freq * w[*k]).sin(),
        }
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        self.add_grad(w, &mut g);
        g
    }

    pub fn hess(&self, w: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; w.len() * w.len()];
        self.add_hess(w, &mut h);
        h
    }

    /// Declared `sup |Dh|`.
    pub fn dh_sup(&self) -> f64 {
        match self {
            Self::Linear { coef } => dot(coef, coef).sqrt(),
            Self::CoordinateSquare { region_radius, .. } => 2.0 * region_radius,
            Self::GaussianBump(b) => b.dh_sup(),
            Self::BumpMixture { bumps } => bumps.iter().map(Bump::dh_sup).sum(),
            Self::SmoothIndicator { eps, .. } => 1.0 / (eps * (2.0 * PI).sqrt()),
            Self::SineCoordinate { freq, .. } => freq.abs(),
        }
    }

    /// Declared `sup |D^2 h|` in operator norm.
    pub fn d2h_sup(&self) -> f64 {
        match self {
            Self::Linear { .. } => 0.0,
            Self::CoordinateSquare { .. } => 2.0,
            Self::GaussianBump(b) => b.d2h_sup(),
            Self::BumpMixture { bumps } => bumps.iter().map(Bump::d2h_sup).sum(),
            Self::SmoothIndicator { eps, .. } => (-0.5f64).exp() / ((2.0 * PI).sqrt() * eps * eps),
            Self::SineCoordinate { freq, .. } => freq * freq,
        }
    }

    /// Largest central-difference mismatch of the analytic gradient and
    /// Hessian over `probes`.
    pub fn derivative_mismatch(&self, probes: &[Vec<f64>]) -> f64 {
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for w in probes {
            let d = w.len();
            let g = self.grad(w);
            let h = self.hess(w);
            let mut p = w.clone();
            for k in 0..d {
                p[k] = w[k] + step;
                let (fp, gp) = (self.value(&p), self.grad(&p));
                p[k] = w[k] - step;
                let (fm, gm) = (self.value(&p), self.grad(&p));
                p[k] = w[k];
                worst = worst.max(((fp - fm) / (2.0 * step) - g[k]).abs());
                for i in 0..d {
                    worst = worst.max(((gp[i] - gm[i]) / (2.0 * step) - h[i * d + k]).abs());
                }
            }
        }
        worst
    }
}

/// Twelve functions in `d` dimensions: two linear maps, two coordinate
/// squares, four Gaussian bumps, two smoothed half-space indicators, a sine
/// and a three-bump mixture.
pub fn test_battery(d: usize, seed: u64) -> Vec<TestFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.random_range(-1.5..1.5)).collect() };
    let mut out = Vec::with_capacity(12);
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    out.push(TestFunction::Linear { coef: e1 });
    out.push(TestFunction::Linear {
        coef: random_unit(d, &mut rng).iter().map(|x| 0.5 * x).collect(),
    });
    out.push(TestFunction::CoordinateSquare {
        d,
        k: 0,
        region_radius: 3.0,
    });
    out.push(TestFunction::CoordinateSquare {
        d,
        k: d - 1,
        region_radius: 3.0,
    });
    for _ in 0..4 {
        let c = center(&mut rng);
        out.push(TestFunction::GaussianBump(Bump {
            center: c,
            width: rng.random_range(0.8..1.5),
            amplitude: 1.0,
        }));
    }
    for _ in 0..2 {
        out.push(TestFunction::SmoothIndicator {
            direction: random_unit(d, &mut rng),
            level: rng.random_range(-1.0..1.0),
            eps: rng.random_range(0.5..1.0),
        });
    }
    out.push(TestFunction::SineCoordinate { d, k: 0, freq: 1.0 });
    let bumps = (0..3)
        .map(|_| Bump {
            center: center(&mut rng),
            width: rng.random_range(0.8..1.5),
            amplitude: rng.random_range(-1.0..1.0),
        })
        .collect();
    out.push(TestFunction::BumpMixture { bumps });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Gauss-Legendre nodes in `s`.
    pub s_nodes: usize,
    /// Gauss-Hermite nodes per dimension (tensor rule) for `d <= 3`.
    pub hermite_nodes: usize,
    /// Gaussian draws replacing the tensor rule for `d > 3`.
    pub mc_draws: usize,
    pub mc_seed: u64,
    /// Tensor nodes with weight below this are dropped.
    pub prune: f64,
    /// Stein-equation residual checked at this many probes on solve.
    pub probes: usize,
    pub tolerance: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            s_nodes: 64,
            hermite_nodes: 32,
            mc_draws: 100_000,
            mc_seed: 0x5eed,
            prune: 1e-14,
            probes: 100,
            tolerance: 1e-3,
        }
    }
}

impl QuadratureSpec {
    /// Coarse rule for bulk evaluation at many points.
    pub fn coarse() -> Self {
        Self {
            s_nodes: 16,
            hermite_nodes: 10,
            ..Self::default()
        }
    }
}

fn nonzero(n: usize) -> Result<NonZeroUsize> {
    NonZeroUsize::new(n).ok_or_else(|| Error::Domain("quadrature needs at least one node".into()))
}

/// Nodes and weights of `E g(Z)`, `Z ~ N(0, I_d)`.
fn gaussian_rule(d: usize, quad: &QuadratureSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    if d > 3 {
        let mut rng = ChaCha8Rng::seed_from_u64(quad.mc_seed);
        let n = quad.mc_draws.max(1);
        let nodes = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        return Ok((nodes, vec![1.0 / n as f64; n]));
    }
    let gh = GaussHermite::new(nonzero(quad.hermite_nodes)?);
    let axis: Vec<(f64, f64)> = gh
        .iter()
        .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / PI.sqrt()))
        .collect();
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        let w: f64 = idx.iter().map(|&i| axis[i].1).product();
        if w >= quad.prune {
            nodes.extend(idx.iter().map(|&i| axis[i].0));
            weights.push(w);
        }
        let mut k = 0;
        loop {
            if k == d {
                let total: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= total);
                return Ok((nodes, weights));
            }
            idx[k] += 1;
            if idx[k] < axis.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SteinSolution {
    pub h: TestFunction,
    pub quad: QuadratureSpec,
    pub d: usize,
    s_rule: Vec<(f64, f64)>,
    z_nodes: Vec<f64>,
    z_weights: Vec<f64>,
    /// `E h(Z)` under the Gaussian rule.
    pub eh_z: f64,
    /// Largest Stein residual seen at the solve-time probes.
    pub max_residual: f64,
}

impl SteinSolution {
    fn for_each_node(&self, w: &[f64], mut visit: impl FnMut(f64, f64, &[f64])) {
        let d = self.d;
        let mut p = vec![0.0; d];
        for &(s, ws) in &self.s_rule {
            let eps = (1.0 - s * s).sqrt();
            for (z, &wz) in self.z_nodes.chunks_exact(d).zip(&self.z_weights) {
                for k in 0..d {
                    p[k] = s * w[k] + eps * z[k];
                }
                visit(s, ws * wz, &p);
            }
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each_node(w, |s, wt, p| acc += wt * (self.h.value(p) - self.eh_z) / s);
        -acc
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.d];
        let mut g = vec![0.0; self.d];
        self.for_each_node(w, |_, wt, p| {
            g.iter_mut().for_each(|x| *x = 0.0);
            self.h.add_grad(p, &mut g);
            acc.iter_mut().zip(&g).for_each(|(a, x)| *a -= wt * x);
        });
        acc
    }

    /// Row-major Hessian.
    pub fn hess(&self, w: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut acc = vec![0.0; d * d];
        let mut hbuf = vec![0.0; d * d];
        self.for_each_node(w, |s, wt, p| {
            hbuf.iter_mut().for_each(|x| *x = 0.0);
            self.h.add_hess(p, &mut hbuf);
            acc.iter_mut().zip(&hbuf).for_each(|(a, x)| *a -= s * wt * x);
        });
        acc
    }

    /// `Lap f(w) - w . grad f(w) - (h(w) - E h(Z))`.
    pub fn residual(&self, w: &[f64]) -> f64 {
        let g = self.grad(w);
        let h = self.hess(w);
        let lap: f64 = (0..self.d).map(|i| h[i * self.d + i]).sum();
        lap - dot(w, &g) - (self.h.value(w) - self.eh_z)
    }

    /// Third derivative tensor `T[i][j][k] = d_k Hess_ij` by central
    /// differences of the Hessian, flattened as `(i * d + j) * d + k`.
    pub fn third_derivative(&self, w: &[f64], step: f64) -> Vec<f64> {
        let d = self.d;
        let mut t = vec![0.0; d * d * d];
        let mut p = w.to_vec();
        for k in 0..d {
            p[k] = w[k] + step;
            let hp = self.hess(&p);
            p[k] = w[k] - step;
            let hm = self.hess(&p);
            p[k] = w[k];
            for ij in 0..d * d {
                t[ij * d + k] = (hp[ij] - hm[ij]) / (2.0 * step);
            }
        }
        t
    }
}

/// `sup_{|u| = 1} |T(u, u, u)|` for a (near) symmetric 3-tensor, by search
/// over directions.
pub fn symmetric_tensor_norm(t: &[f64], d: usize) -> f64 {
    let eval = |u: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    acc += t[(i * d + j) * d + k] * u[i] * u[j] * u[k];
                }
            }
        }
        acc.abs()
    };
    match d {
        1 => t[0].abs(),
        2 => (0..1440)
            .map(|i| {
                let a = PI * i as f64 / 1440.0;
                eval(&[a.cos(), a.sin()])
            })
            .fold(0.0, f64::max),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut best: f64 = 0.0;
            let mut e = vec![0.0; d];
            for k in 0..d {
                e.iter_mut().for_each(|x| *x = 0.0);
                e[k] = 1.0;
                best = best.max(eval(&e));
            }
            for _ in 0..4000 {
                best = best.max(eval(&random_unit(d, &mut rng)));
            }
            best
        }
    }
}

/// Probe points for residual checks: `N(0, 1.5^2 I)`, seeded.
pub fn default_probes(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..d).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

pub fn solve_stein(h: &TestFunction, quad: &QuadratureSpec) -> Result<SteinSolution> {
    let d = h.dimension();
    if d == 0 {
        return domain("solve_stein: zero-dimensional test function");
    }
    if !h.dh_sup().is_finite() {
        return domain("solve_stein: test function without a finite gradient bound");
    }
    let gl = GaussLegendre::new(nonzero(quad.s_nodes)?);
    let s_rule = gl.iter().map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
    let (z_nodes, z_weights) = gaussian_rule(d, quad)?;
    let eh_z = z_nodes
        .chunks_exact(d)
        .zip(&z_weights)
        .map(|(z, w)| w * h.value(z))
        .sum();
    let mut sol = SteinSolution {
        h: h.clone(),
        quad: *quad,
        d,
        s_rule,
        z_nodes,
        z_weights,
        eh_z,
        max_residual: 0.0,
    };
    let mut worst = (0.0f64, Vec::new());
    for w in default_probes(d, quad.probes, quad.mc_seed ^ 0xa5a5) {
        let r = sol.residual(&w).abs();
        if !(r <= worst.0) {
            worst = (r, w);
        }
    }
    if !(worst.0 <= quad.tolerance) {
        return Err(Error::Quadrature {
            max_residual: worst.0,
            worst_probe: worst.1,
        });
    }
    sol.max_residual = worst.0;
    Ok(sol)
}

pub const BOUND_SLACK: f64 = 0.05;
pub const THIRD_DERIVATIVE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub function: String,
    pub probes: usize,
    pub max_residual: f64,
    pub sup_df: f64,
    pub bound_df: f64,
    pub sup_hess_hs: f64,
    pub bound_hess_hs: f64,
    pub sup_d3f: f64,
    pub bound_d3f: f64,
    pub df_ok: bool,
    pub hess_ok: bool,
    pub d3f_ok: bool,
}

impl BoundReport {
    pub fn all_ok(&self) -> bool {
        self.df_ok && self.hess_ok && self.d3f_ok
    }
}

/// Empirical sups of `|Df|`, `|Hess f|_HS` and `|D^3 f|` over the probes
/// against `sqrt(pi/2) sup|Dh|`, `sup|Dh|` and `sqrt(2 pi)/4 sup|D^2 h|`.
pub fn check_derivative_bounds(h: &TestFunction, solution: &SteinSolution, probes: &[Vec<f64>]) -> Result<BoundReport> {
    if probes.len() < 100 {
        return domain(format!("check_derivative_bounds: {} probes, need 100", probes.len()));
    }
    let d = solution.d;
    let (mut sup_df, mut sup_hs, mut sup_d3, mut max_res) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for w in probes {
        let g = solution.grad(w);
        let hs = solution.hess(w);
        sup_df = sup_df.max(dot(&g, &g).sqrt());
        sup_hs = sup_hs.max(dot(&hs, &hs).sqrt());
        let t = solution.third_derivative(w, THIRD_DERIVATIVE_STEP);
        sup_d3 = sup_d3.max(symmetric_tensor_norm(&t, d));
        let lap: f64 = (0..d).map(|i| hs[i * d + i]).sum();
        max_res = max_res.max((lap - dot(w, &g) - (h.value(w) - solution.eh_z)).abs());
    }
    let bound_df = (PI / 2.0).sqrt() * h.dh_sup();
    let bound_hs = h.dh_sup();
    let bound_d3 = (2.0 * PI).sqrt() / 4.0 * h.d2h_sup();
    let ok = |sup: f64, bound: f64| sup <= bound * (1.0 + BOUND_SLACK);
    Ok(BoundReport {
        function: h.id(),
        probes: probes.len(),
        max_residual: max_res,
        sup_df,
        bound_df,
        sup_hess_hs: sup_hs,
        bound_hess_hs: bound_hs,
        sup_d3f: sup_d3,
        bound_d3f: bound_d3,
        df_ok: ok(sup_df, bound_df),
        hess_ok: ok(sup_hs, bound_hs),
        d3f_ok: ok(sup_d3, bound_d3),
    })
}

/// One replica of the exchangeable pair `(W~, W~')` obtained by redrawing
/// the centred free path of a uniformly chosen flight `I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub w: Vec<f64>,
    pub w_prime: Vec<f64>,
    /// One-based flight index.
    pub index: usize,
    pub xi_tilde_old: f64,
    pub xi_tilde_new: f64,
    /// `V_{I-1}`.
    pub v: Vec<f64>,
    /// `(1/n) sum_i V_{i-1} (xi~'_i - xi~_i) / s_n` with an independent
    /// redraw at every flight: the average of `W~' - W~` over `I`.
    pub mean_step: Vec<f64>,
    /// `(sigma^2 n^2 log n)^{-1} sum_i V V^t (E xi~^2 + xi~_i^2)`, row-major.
    pub quad_rhs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub n: usize,
    pub d: usize,
    /// `sigma_d sqrt(n log n)`.
    pub scale: f64,
    pub records: Vec<PairRecord>,
}

impl PairBatch {
    pub fn new(n: usize, d: usize, constants: &ModelConstants, records: Vec<PairRecord>) -> Result<Self> {
        if n < 2 {
            return domain(format!("exchangeable pair needs n >= 2, got {n}"));
        }
        Ok(Self {
            n,
            d,
            scale: pair_scale(n, constants),
            records,
        })
    }
}

pub fn pair_scale(n: usize, constants: &ModelConstants) -> f64 {
    let nf = n as f64;
    constants.sigma_d() * (nf * nf.ln()).sqrt()
}

/// Streaming builder for one replica: feed flights in order with
/// [`PairAccumulator::push`], then call [`PairAccumulator::finish`].
#[derive(Debug, Clone)]
pub struct PairAccumulator {
    n: usize,
    d: usize,
    scale: f64,
    index: usize,
    seen: usize,
    w: Vec<f64>,
    mean_step: Vec<f64>,
    quad: Vec<f64>,
    chosen: Option<(f64, f64, Vec<f64>)>,
}

impl PairAccumulator {
    /// `index` is the one-based resampled flight, drawn by the caller.
    pub fn new(n: usize, d: usize, index: usize, constants: &ModelConstants) -> Result<Self> {
        if n < 2 {
            return domain(format!("exchangeable pair needs n >= 2, got {n}"));
        }
        if !(1..=n).contains(&index) {
            return domain(format!("resampled index {index} outside 1..={n}"));
        }
        Ok(Self {
            n,
            d,
            scale: pair_scale(n, constants),
            index,
            seen: 0,
            w: vec![0.0; d],
            mean_step: vec![0.0; d],
            quad: vec![0.0; d * d],
            chosen: None,
        })
    }

    /// Flight `i` (one-based, in order): its centred free path, a fresh
    /// conditionally independent copy, `E(xi~^2 | eta)` and `V_{i-1}`.
    pub fn push(&mut self, old: f64, fresh: f64, cond_second: f64, v: &[f64]) {
        self.seen += 1;
        let d = self.d;
        for k in 0..d {
            self.w[k] += old * v[k];
            self.mean_step[k] += (fresh - old) * v[k];
        }
        let c = cond_second + old * old;
        for i in 0..d {
            for j in 0..d {
                self.quad[i * d + j] += c * v[i] * v[j];
            }
        }
        if self.seen == self.index {
            self.chosen = Some((old, fresh, v.to_vec()));
        }
    }

    pub fn finish(self) -> Result<PairRecord> {
        if self.seen != self.n {
            return domain(format!("pair accumulator saw {} of {} flights", self.seen, self.n));
        }
        let (old, fresh, v) = self.chosen.expect("index within 1..=n was visited");
        let nf = self.n as f64;
        let s = self.scale;
        let w: Vec<f64> = self.w.iter().map(|x| x / s).collect();
        let w_prime = w.iter().zip(&v).map(|(x, vk)| x + vk * (fresh - old) / s).collect();
        Ok(PairRecord {
            w,
            w_prime,
            index: self.index,
            xi_tilde_old: old,
            xi_tilde_new: fresh,
            v,
            mean_step: self.mean_step.iter().map(|x| x / (nf * s)).collect(),
            quad_rhs: self.quad.iter().map(|x| x / (nf * s * s)).collect(),
        })
    }
}

/// Pairs from stored replicas. `dirs[r]` is the flattened `V_0..V_{n-1}` of
/// replica `r`; `fresh(i, old, rng)` draws the copy of flight `i` (zero-based)
/// and `cond_second(i)` returns `E(xi~_i^2 | eta)`.
pub fn build_pair<R, F, G>(
    xi_tilde: &[Vec<f64>],
    dirs: &[Vec<f64>],
    d: usize,
    constants: &ModelConstants,
    rng: &mut R,
    mut fresh: F,
    cond_second: G,
) -> Result<PairBatch>
where
    R: Rng + ?Sized,
    F: FnMut(usize, f64, &mut R) -> f64,
    G: Fn(usize) -> f64,
{
    let n = xi_tilde.first().map_or(0, Vec::len);
    if n == 0 {
        return domain("build_pair: empty replicas");
    }
    if xi_tilde.len() != dirs.len() || xi_tilde.iter().zip(dirs).any(|(x, v)| x.len() != n || v.len() != n * d) {
        return domain("build_pair: replicas of unequal length");
    }
    let mut records = Vec::with_capacity(xi_tilde.len());
    for (xs, vs) in xi_tilde.iter().zip(dirs) {
        let index = rng.random_range(1..=n.max(1));
        let mut acc = PairAccumulator::new(n, d, index, constants)?;
        for (i, &x) in xs.iter().enumerate() {
            let f = fresh(i, x, rng);
            acc.push(x, f, cond_second(i), &vs[i * d..(i + 1) * d]);
        }
        records.push(acc.finish()?);
    }
    PairBatch::new(n, d, constants, records)
}

/// One surrogate-law replica of `n = params.n` flights streamed into a pair.
/// The copy of each centred free path is a fresh draw from the truncated,
/// centred law, and `E(xi~^2 | eta)` is its closed-form variance.
pub fn stream_surrogate_pair<R: Rng + ?Sized>(
    backend: &KernelBackend,
    v0: &[f64],
    params: &TruncationParams,
    constants: &ModelConstants,
    rng: &mut R,
) -> Result<PairRecord> {
    let law = backend
        .surrogate()
        .ok_or_else(|| Error::Domain("stream_surrogate_pair needs the surrogate backend".into()))?;
    let n = params.n;
    let r2 = params.r_n * params.r_n;
    let m = law.truncated_mean(params.r_n);
    let second = law.truncated_moment(2, params.r_n) - m * m;
    let trunc = |x: f64| if x * x <= r2 { x } else { 0.0 };
    let index = rng.random_range(1..=n.max(1));
    let mut acc = PairAccumulator::new(n, v0.len(), index, constants)?;
    let mut walk = ChainStepper::new(v0, backend)?;
    for _ in 0..n {
        let old = trunc(walk.advance(backend, rng)) - m;
        let fresh = trunc(sample_free_path(backend, rng)) - m;
        acc.push(old, fresh, second, walk.last_direction());
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCheck {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanCheck {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }

    pub fn z(&self, target: f64) -> f64 {
        if self.stderr > 0.0 {
            (self.mean - target).abs() / self.stderr
        } else if self.mean == target {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIdentityReport {
    pub n: usize,
    pub replicas: usize,
    pub target_slope: f64,
    /// Regression slope of the index-averaged step on `W~`.
    pub slope: f64,
    pub slope_stderr: f64,
    /// Same regression with the single sampled step `W~' - W~`.
    pub slope_single: f64,
    pub slope_relative_error: f64,
    /// Per component `(i, j)`: mean of `(W~'-W~)_i (W~'-W~)_j` and of the
    /// right side, row-major.
    pub quad_lhs: Vec<f64>,
    pub quad_rhs: Vec<f64>,
    /// Standard error of the per-replica difference of the two.
    pub quad_stderr: Vec<f64>,
    pub quad_max_z: f64,
}

impl PairIdentityReport {
    pub fn slope_ok(&self, rel_tol: f64) -> bool {
        self.slope_relative_error <= rel_tol
    }

    pub fn quad_ok(&self, k: f64) -> bool {
        self.quad_max_z <= k
    }
}

fn slope_through_origin(xs: impl Iterator<Item = (f64, f64)> + Clone) -> (f64, f64) {
    let sxx: f64 = xs.clone().map(|(x, _)| x * x).sum();
    let sxy: f64 = xs.clone().map(|(x, y)| x * y).sum();
    if sxx == 0.0 {
        return (0.0, 0.0);
    }
    let b = sxy / sxx;
    let m = xs.clone().count() as f64;
    let sse: f64 = xs.map(|(x, y)| (y - b * x).powi(2)).sum();
    let s2 = sse / (m - 1.0).max(1.0);
    (b, (s2 / sxx).sqrt())
}

pub fn verify_pair_identities(pairs: &PairBatch) -> Result<PairIdentityReport> {
    let r = pairs.records.len();
    if r < 2 {
        return domain("verify_pair_identities: need at least two replicas");
    }
    let d = pairs.d;
    let pooled = || {
        pairs
            .records
            .iter()
            .flat_map(move |p| (0..d).map(move |k| (p.w[k], p.mean_step[k])))
    };
    let (slope, slope_stderr) = slope_through_origin(pooled());
    let single = || {
        pairs
            .records
            .iter()
            .flat_map(move |p| (0..d).map(move |k| (p.w[k], p.w_prime[k] - p.w[k])))
    };
    let (slope_single, _) = slope_through_origin(single());
    let target = -1.0 / pairs.n as f64;
    let mut lhs = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * d];
    let mut stderr = vec![0.0; d * d];
    let mut max_z: f64 = 0.0;
    for ij in 0..d * d {
        let (i, j) = (ij / d, ij % d);
        let l: Vec<f64> = pairs
            .records
            .iter()
            .map(|p| (p.w_prime[i] - p.w[i]) * (p.w_prime[j] - p.w[j]))
            .collect();
        let diff: Vec<f64> = pairs.records.iter().zip(&l).map(|(p, l)| l - p.quad_rhs[ij]).collect();
        let dm = MeanCheck::from_values(&diff);
        lhs[ij] = l.iter().sum::<f64>() / r as f64;
        rhs[ij] = pairs.records.iter().map(|p| p.quad_rhs[ij]).sum::<f64>() / r as f64;
        stderr[ij] = dm.stderr;
        max_z = max_z.max(dm.z(0.0));
    }
    Ok(PairIdentityReport {
        n: pairs.n,
        replicas: r,
        target_slope: target,
        slope,
        slope_stderr,
        slope_single,
        slope_relative_error: ((slope - target) / target).abs(),
        quad_lhs: lhs,
        quad_rhs: rhs,
        quad_stderr: stderr,
        quad_max_z: max_z,
    })
}

/// Mean of `<W~' - W~, grad f(W~') + grad f(W~)>`, which vanishes for an
/// exchangeable pair.
pub fn antisymmetry_check(pairs: &PairBatch, solution: &SteinSolution) -> MeanCheck {
    let values: Vec<f64> = pairs
        .records
        .iter()
        .map(|p| {
            let g1 = solution.grad(&p.w);
            let g2 = solution.grad(&p.w_prime);
            (0..pairs.d).map(|k| (p.w_prime[k] - p.w[k]) * (g1[k] + g2[k])).sum()
        })
        .collect();
    MeanCheck::from_values(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadingErrorReport {
    pub function: String,
    pub n: usize,
    /// `E <I - (n/2) quad_rhs, Hess f(W~)>`.
    pub estimate: MeanCheck,
    /// `E h(W~)` against the Gaussian-rule `E h(Z)`.
    pub eh_w: MeanCheck,
    pub eh_z: f64,
    pub direct_gap: f64,
}

pub fn leading_error_term(pairs: &PairBatch, solution: &SteinSolution) -> LeadingErrorReport {
    let d = pairs.d;
    let half_n = pairs.n as f64 / 2.0;
    let (est, hw): (Vec<f64>, Vec<f64>) = pairs
        .records
        .iter()
        .map(|p| {
            let h = solution.hess(&p.w);
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let id = if i == j { 1.0 } else { 0.0 };
                    acc += (id - half_n * p.quad_rhs[i * d + j]) * h[i * d + j];
                }
            }
            (acc, solution.h.value(&p.w))
        })
        .unzip();
    let eh_w = MeanCheck::from_values(&hw);
    LeadingErrorReport {
        function: solution.h.id(),
        n: pairs.n,
        estimate: MeanCheck::from_values(&est),
        eh_w,
        eh_z: solution.eh_z,
        direct_gap: (eh_w.mean - solution.eh_z).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(d: usize) -> Vec<Vec<f64>> {
        (0..11).map(|i| vec![-2.5 + 0.5 * i as f64; d]).collect()
    }

    #[test]
    fn linear_and_quadratic_closed_forms() {
        let q = QuadratureSpec::default();
        let lin = solve_stein(&TestFunction::Linear { coef: vec![1.0] }, &q).unwrap();
        let sq = solve_stein(
            &TestFunction::CoordinateSquare {
                d: 1,
                k: 0,
                region_radius: 3.0,
            },
            &q,
        )
        .unwrap();
        for w in line(1) {
            assert!((lin.value(&w) + w[0]).abs() < 1e-10);
            assert!((sq.value(&w) - (1.0 - w[0] * w[0]) / 2.0).abs() < 1e-10);
            assert!(sq.residual(&w).abs() < 1e-10);
        }
    }

    #[test]
    fn pruned_gaussian_rule_integrates_moments() {
        let (z, w) = gaussian_rule(2, &QuadratureSpec::default()).unwrap();
        let m = |f: &dyn Fn(&[f64]) -> f64| z.chunks_exact(2).zip(&w).map(|(z, w)| w * f(z)).sum::<f64>();
        assert!((m(&|_| 1.0) - 1.0).abs() < 1e-14);
        let v2 = m(&|z| z[0] * z[0]);
        assert!((v2 - 1.0).abs() < 1e-10);
        assert!((m(&|z| z[0].powi(4)) - 3.0).abs() < 1e-9);
        assert!(m(&|z| z[0] * z[1]).abs() < 1e-14);
    }

    #[test]
    fn battery_derivatives_match_finite_differences() {
        let probes = default_probes(2, 20, 3);
        for h in test_battery(2, 11) {
            assert!(h.derivative_mismatch(&probes) < 1e-5, "{}", h.id());
        }
        assert_eq!(test_battery(3, 1).len(), 12);
    }

    #[test]
    fn tensor_norm_of_a_cube() {
        // T = e1 (x) e1 (x) e1 in d = 2.
        let mut t = vec![0.0; 8];
        t[0] = 2.0;
        assert!((symmetric_tensor_norm(&t, 2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pair_rejects_degenerate_horizons() {
        let c = crate::constants::make_constants(2).unwrap();
        assert!(PairAccumulator::new(1, 2, 1, &c).is_err());
        assert!(PairAccumulator::new(5, 2, 0, &c).is_err());
        assert!(PairBatch::new(1, 2, &c, vec![]).is_err());
    }
}
