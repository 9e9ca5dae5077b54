//! Sampler for the Boltzmann-Grad limit flight process.
//!
//! Each step draws a free path `xi_n` and a deflection `eta_n`, and rotates
//! the velocity `V_{n-1}` into `V_n`. The flight of length `xi_n` is travelled
//! along `V_{n-1}`.
//!
//! Two kernels are available. The surrogate draws `xi` iid from a density that
//! is flat up to `x0` and equal to `Theta_d x^{-3}` beyond, with `x0, c0`
//! chosen so that the mass is 1 and the mean is `xi_bar`; velocities are iid
//! uniform on the sphere. The empirical kernel resamples `(xi, deflection)`
//! pairs harvested from billiard runs and turns the velocity by the drawn
//! angle about a uniform axis.

use std::io::{self, BufRead, Write};

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::billiard::FlightRecord;
use crate::constants::ModelConstants;
use crate::error::{domain, Error, Result};
use crate::paths::Flights;
use crate::vector::{
    angle_between, dot, fill_random_orthogonal_unit, fill_random_unit, norm, normalize, random_orthogonal_unit,
    random_unit,
};

const CALIBRATION_TOL: f64 = 1e-10;

/// Plateau-plus-power-law free path law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub d: usize,
    pub theta: f64,
    pub xi_bar: f64,
    /// End of the plateau.
    pub x0: f64,
    /// Plateau density.
    pub c0: f64,
}

impl Surrogate {
    pub fn density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x <= self.x0 {
            self.c0
        } else {
            self.theta / (x * x * x)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x <= self.x0 {
            self.c0 * x
        } else {
            1.0 - self.theta / (2.0 * x * x)
        }
    }

    pub fn survival(&self, x: f64) -> f64 {
        if x <= self.x0 {
            1.0 - self.cdf(x)
        } else {
            self.theta / (2.0 * x * x)
        }
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let knee = self.c0 * self.x0;
        if u <= knee {
            u / self.c0
        } else {
            (self.theta / (2.0 * (1.0 - u))).sqrt()
        }
    }

    /// `int_0^r x^k p(x) dx`, i.e. `E[xi^k 1{xi <= r}]`; `r` may be infinite
    /// when the moment exists.
    pub fn truncated_moment(&self, k: u32, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let kp1 = f64::from(k + 1);
        let head = self.c0 * r.min(self.x0).powf(kp1) / kp1;
        if r <= self.x0 {
            return head;
        }
        let tail = match k {
            2 => self.theta * (r / self.x0).ln(),
            _ => {
                let e = f64::from(k) - 2.0;
                self.theta * (r.powf(e) - self.x0.powf(e)) / e
            }
        };
        head + tail
    }

    /// Mean of the truncated free path `xi 1{xi <= r}`.
    pub fn truncated_mean(&self, r: f64) -> f64 {
        self.truncated_moment(1, r)
    }

    /// Residuals of the mass and mean constraints, from the closed forms.
    pub fn constraint_residuals(&self) -> (f64, f64) {
        let mass = self.c0 * self.x0 + self.theta / (2.0 * self.x0 * self.x0);
        let mean = self.c0 * self.x0 * self.x0 / 2.0 + self.theta / self.x0;
        (mass - 1.0, mean - self.xi_bar)
    }
}

/// Solves for the plateau `(x0, c0)` by bisection on `x0`, with `c0` taken
/// from the mass constraint.
pub fn calibrate_surrogate(constants: &ModelConstants) -> Result<Surrogate> {
    let theta = constants.theta_d;
    let xi_bar = constants.xi_bar;
    let c0_of = |x0: f64| (1.0 - theta / (2.0 * x0 * x0)) / x0;
    let mean_gap = |x0: f64| c0_of(x0) * x0 * x0 / 2.0 + theta / x0 - xi_bar;
    // The gap equals (2x0^2 - 4 xi_bar x0 + 3 theta)/(4 x0): negative at
    // xi_bar when a solution exists, positive at 2 xi_bar.
    let (mut lo, mut hi) = (xi_bar, 2.0 * xi_bar);
    if !(mean_gap(lo) < 0.0 && mean_gap(hi) > 0.0) {
        return Err(Error::Calibration(format!(
            "no plateau solves mass and mean for d = {} (theta = {theta}, xi_bar = {xi_bar})",
            constants.d
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let x0 = 0.5 * (lo + hi);
    let s = Surrogate {
        d: constants.d,
        theta,
        xi_bar,
        x0,
        c0: c0_of(x0),
    };
    let (mass, mean) = s.constraint_residuals();
    if !(s.c0 > 0.0 && mass.abs() < CALIBRATION_TOL && mean.abs() < CALIBRATION_TOL) {
        return Err(Error::Calibration(format!(
            "plateau residuals too large: mass {mass:e}, mean {mean:e}, c0 {}",
            s.c0
        )));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Free path and deflection drawn from the same row.
    Paired,
    /// Free path and deflection drawn from independent rows.
    Independent,
}

/// Rows of `(free path, deflection angle)` harvested from billiard flights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTable {
    pub d: usize,
    pub entries: Vec<(f64, f64)>,
    pub mode: Resampling,
}

impl EmpiricalTable {
    pub fn new(d: usize, entries: Vec<(f64, f64)>, mode: Resampling) -> Result<Self> {
        if entries.is_empty() {
            return domain("empirical table is empty");
        }
        if let Some(&(xi, th)) = entries
            .iter()
            .find(|(xi, th)| !(*xi > 0.0 && xi.is_finite()) || !(0.0..=std::f64::consts::PI).contains(th))
        {
            return domain(format!("invalid table row (xi = {xi}, deflection = {th})"));
        }
        Ok(Self { d, entries, mode })
    }

    /// Scattered flights only; horizon-capped flights carry no deflection.
    pub fn from_flights(d: usize, flights: &[FlightRecord], mode: Resampling) -> Result<Self> {
        let entries = flights
            .iter()
            .filter_map(|f| f.scattering.as_ref().map(|s| (f.free_path, s.deflection_angle)))
            .collect();
        Self::new(d, entries, mode)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "xi,deflection")?;
        for (xi, th) in &self.entries {
            writeln!(out, "{xi},{th}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(d: usize, input: R, mode: Resampling) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Domain(format!("reading table: {e}")))?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',').map(|s| s.trim().parse::<f64>());
            match (parts.next(), parts.next()) {
                (Some(Ok(xi)), Some(Ok(th))) => entries.push((xi, th)),
                _ => return domain(format!("malformed table line {}: {line:?}", i + 1)),
            }
        }
        Self::new(d, entries, mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelBackend {
    SurrogateIid(Surrogate),
    Empirical(EmpiricalTable),
}

impl KernelBackend {
    pub fn dimension(&self) -> usize {
        match self {
            Self::SurrogateIid(s) => s.d,
            Self::Empirical(t) => t.d,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SurrogateIid(_) => "surrogate_iid",
            Self::Empirical(_) => "empirical",
        }
    }

    pub fn surrogate(&self) -> Option<&Surrogate> {
        match self {
            Self::SurrogateIid(s) => Some(s),
            Self::Empirical(_) => None,
        }
    }
}

/// Inverse-CDF draw in surrogate mode, uniform row in empirical mode.
pub fn sample_free_path<R: Rng + ?Sized>(backend: &KernelBackend, rng: &mut R) -> f64 {
    match backend {
        KernelBackend::SurrogateIid(s) => s.inverse_cdf(rng.sample(Open01)),
        KernelBackend::Empirical(t) => t.entries[rng.random_range(0..t.entries.len())].0,
    }
}

/// Deflection descriptor: the angle between consecutive velocities and the
/// unit vector orthogonal to the old velocity that the turn is towards. In
/// `d = 2` the axis is the sign of the angle; in `d >= 3` it fixes the
/// azimuth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaProxy {
    pub deflection: f64,
    pub axis: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// Length of the flight that ended at this collision.
    pub xi: f64,
    pub eta: EtaProxy,
    /// Velocity after this collision.
    pub v: Vec<f64>,
}

fn turn(v: &[f64], theta: f64, axis: &[f64]) -> Vec<f64> {
    if theta == std::f64::consts::PI {
        return v.iter().map(|x| -x).collect();
    }
    let (s, c) = theta.sin_cos();
    let mut out: Vec<f64> = v.iter().zip(axis).map(|(x, u)| c * x + s * u).collect();
    normalize(&mut out);
    out
}

fn draw_state<R: Rng + ?Sized>(v: &[f64], backend: &KernelBackend, rng: &mut R) -> ChainState {
    match backend {
        KernelBackend::SurrogateIid(s) => {
            let xi = s.inverse_cdf(rng.sample(Open01));
            let next = random_unit(v.len(), rng);
            let deflection = angle_between(v, &next);
            let axis = {
                let p: f64 = next.iter().zip(v).map(|(a, b)| a * b).sum();
                let mut u: Vec<f64> = next.iter().zip(v).map(|(a, b)| a - p * b).collect();
                let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-300 {
                    u.iter_mut().for_each(|x| *x /= n);
                    u
                } else {
                    random_orthogonal_unit(v, rng)
                }
            };
            ChainState {
                xi,
                eta: EtaProxy { deflection, axis },
                v: next,
            }
        }
        KernelBackend::Empirical(t) => {
            let len = t.entries.len();
            let i = rng.random_range(0..len);
            let xi = t.entries[i].0;
            let j = match t.mode {
                Resampling::Paired => i,
                Resampling::Independent => rng.random_range(0..len),
            };
            let deflection = t.entries[j].1;
            let axis = random_orthogonal_unit(v, rng);
            let next = turn(v, deflection, &axis);
            ChainState {
                xi,
                eta: EtaProxy { deflection, axis },
                v: next,
            }
        }
    }
}

impl ChainState {
    /// First collision of a chain started with velocity `v0`.
    pub fn initial<R: Rng + ?Sized>(v0: &[f64], backend: &KernelBackend, rng: &mut R) -> Result<Self> {
        if v0.len() != backend.dimension() {
            return domain(format!(
                "v0 has dimension {}, backend {}",
                v0.len(),
                backend.dimension()
            ));
        }
        let n: f64 = v0.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-12 {
            return domain(format!("v0 is not a unit vector (norm {n})"));
        }
        Ok(draw_state(v0, backend, rng))
    }
}

/// Next state of the chain; the new flight is travelled along `state.v`.
pub fn step_chain<R: Rng + ?Sized>(state: &ChainState, backend: &KernelBackend, rng: &mut R) -> ChainState {
    draw_state(&state.v, backend, rng)
}

/// Allocation-free walk over the chain that tracks only free paths and
/// velocities. Consumes the generator exactly as [`ChainState::initial`]
/// followed by [`step_chain`] does.
#[derive(Debug, Clone)]
pub struct ChainStepper {
    v: Vec<f64>,
    next: Vec<f64>,
    scratch: Vec<f64>,
}

impl ChainStepper {
    pub fn new(v0: &[f64], backend: &KernelBackend) -> Result<Self> {
        if v0.len() != backend.dimension() {
            return domain(format!(
                "v0 has dimension {}, backend {}",
                v0.len(),
                backend.dimension()
            ));
        }
        if (norm(v0) - 1.0).abs() > 1e-12 {
            return domain(format!("v0 is not a unit vector (norm {})", norm(v0)));
        }
        Ok(Self {
            v: v0.to_vec(),
            next: vec![0.0; v0.len()],
            scratch: vec![0.0; v0.len()],
        })
    }

    /// Direction of the next flight.
    pub fn velocity(&self) -> &[f64] {
        &self.v
    }

    /// Direction of the flight drawn by the last [`Self::advance`].
    pub fn last_direction(&self) -> &[f64] {
        &self.next
    }

    /// Draws the next free path, travelled along [`Self::velocity`], then
    /// turns the velocity at the collision that ends it.
    pub fn advance<R: Rng + ?Sized>(&mut self, backend: &KernelBackend, rng: &mut R) -> f64 {
        let xi = match backend {
            KernelBackend::SurrogateIid(s) => {
                let xi = s.inverse_cdf(rng.sample(Open01));
                fill_random_unit(&mut self.next, rng);
                let p = dot(&self.next, &self.v);
                let off: f64 = self
                    .next
                    .iter()
                    .zip(&self.v)
                    .map(|(a, b)| (a - p * b) * (a - p * b))
                    .sum();
                if off.sqrt() <= 1e-300 {
                    fill_random_orthogonal_unit(&self.v, &mut self.scratch, rng);
                }
                xi
            }
            KernelBackend::Empirical(t) => {
                let len = t.entries.len();
                let i = rng.random_range(0..len);
                let j = match t.mode {
                    Resampling::Paired => i,
                    Resampling::Independent => rng.random_range(0..len),
                };
                let theta = t.entries[j].1;
                fill_random_orthogonal_unit(&self.v, &mut self.scratch, rng);
                if theta == std::f64::consts::PI {
                    self.next.iter_mut().zip(&self.v).for_each(|(o, x)| *o = -x);
                } else {
                    let (s, c) = theta.sin_cos();
                    for ((o, x), u) in self.next.iter_mut().zip(&self.v).zip(&self.scratch) {
                        *o = c * x + s * u;
                    }
                    normalize(&mut self.next);
                }
                t.entries[i].0
            }
        };
        std::mem::swap(&mut self.v, &mut self.next);
        xi
    }
}

/// `n` flights of a chain started with velocity `v0`: `xi_j` and the
/// direction `V_{j-1}` it is travelled along.
pub fn sample_flights<R: Rng + ?Sized>(backend: &KernelBackend, v0: &[f64], n: usize, rng: &mut R) -> Result<Flights> {
    let d = backend.dimension();
    let mut xi = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n * d);
    let mut deflections = Vec::with_capacity(n);
    if n > 0 {
        let mut state = ChainState::initial(v0, backend, rng)?;
        dirs.extend_from_slice(v0);
        loop {
            xi.push(state.xi);
            deflections.push(state.eta.deflection);
            if xi.len() == n {
                break;
            }
            dirs.extend_from_slice(&state.v);
            state = step_chain(&state, backend, rng);
        }
    }
    Flights::new(d, xi, dirs, Some(deflections))
}

/// Lagged autocovariances of an observable series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingSeries {
    /// `cov[k]` for `k = 0..=max_lag`.
    pub cov: Vec<f64>,
    /// Standard error of each `cov[k]` from the spread of the lagged products.
    pub stderr: Vec<f64>,
    /// Standard error of `cov[k]`, `k >= 1`, if the series were iid.
    pub iid_stderr: f64,
    pub len: usize,
}

pub fn mixing_series(series: &[f64], max_lag: usize) -> Result<MixingSeries> {
    let n = series.len();
    if max_lag == 0 || n < 10 * max_lag {
        return domain(format!(
            "mixing_series: run of {n} is shorter than 10 x max lag {max_lag}"
        ));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let mut cov = Vec::with_capacity(max_lag + 1);
    let mut stderr = Vec::with_capacity(max_lag + 1);
    for k in 0..=max_lag {
        let m = n - k;
        let prods = (0..m).map(|i| c[i] * c[i + k]);
        let mu = prods.clone().sum::<f64>() / m as f64;
        let var = prods.map(|p| (p - mu) * (p - mu)).sum::<f64>() / (m as f64).max(2.0);
        cov.push(mu);
        stderr.push((var / m as f64).sqrt());
    }
    let iid_stderr = cov[0] / (n as f64).sqrt();
    Ok(MixingSeries {
        cov,
        stderr,
        iid_stderr,
        len: n,
    })
}
