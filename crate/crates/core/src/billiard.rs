//! Exact dynamics of the periodic Lorentz gas.
//!
//! A point particle moves with unit speed through `R^d` minus the balls of
//! radius `r` centred on the lattice `a Z^d`, reflecting specularly at each
//! scatterer. The lattice spacing `a` is either 1 or, in the Boltzmann-Grad
//! scaling, `r^{(d-1)/d}`, which keeps the mean free path of order one as
//! `r -> 0`.
//!
//! Collision search marches through the Voronoi cells of the lattice along the
//! ray. Since `2r < a`, every scatterer lies strictly inside its own cell, so
//! the first cell whose ball is hit yields the nearest collision.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constants::ModelConstants;
use crate::error::{domain, Error, Result};
use crate::vector::{angle_between, dot, norm, random_orthogonal_unit, random_unit};

/// Relative discriminant threshold under which a ray is considered tangent.
const TANGENCY_TOL: f64 = 1e-12;
/// Relative slack when deciding that a position sits on a scatterer surface.
const SURFACE_SLACK: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeScaling {
    /// Scatterers on `Z^d`.
    Raw,
    /// Scatterers on `r^{(d-1)/d} Z^d`.
    BoltzmannGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub d: usize,
    pub r: f64,
    pub scaling: LatticeScaling,
    /// Flights longer than this are cut and flagged.
    pub l_max: f64,
}

impl LatticeConfig {
    /// Configuration with the default horizon cap of `10^4` mean free paths.
    pub fn new(d: usize, r: f64, scaling: LatticeScaling) -> Result<Self> {
        let xi_bar = ModelConstants::new(d)?.xi_bar;
        let config = Self {
            d,
            r,
            scaling,
            l_max: 1e4 * xi_bar,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_l_max(mut self, l_max: f64) -> Result<Self> {
        self.l_max = l_max;
        self.validate()?;
        Ok(self)
    }

    pub fn spacing(&self) -> f64 {
        match self.scaling {
            LatticeScaling::Raw => 1.0,
            LatticeScaling::BoltzmannGrad => self.r.powf((self.d as f64 - 1.0) / self.d as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Configuration(format!("dimension {} < 2", self.d)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Configuration(format!("radius must be positive, got {}", self.r)));
        }
        if !(self.l_max > 0.0) {
            return Err(Error::Configuration(format!(
                "l_max must be positive, got {}",
                self.l_max
            )));
        }
        let a = self.spacing();
        if 2.0 * self.r >= a {
            return Err(Error::Configuration(format!(
                "scatterers overlap: 2r = {} >= spacing {a}",
                2.0 * self.r
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl ParticleState {
    pub fn new(position: Vec<f64>, velocity: Vec<f64>) -> Self {
        Self { position, velocity }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionEvent {
    pub free_path: f64,
    pub hit_point: Vec<f64>,
    /// Integer lattice coordinates of the scatterer that was hit.
    pub scatterer: Vec<i64>,
    pub v_in: Vec<f64>,
    pub v_out: Vec<f64>,
    pub impact_parameter: f64,
    pub deflection_angle: f64,
}

impl CollisionEvent {
    /// State of the particle leaving the scatterer.
    pub fn exit_state(&self) -> ParticleState {
        ParticleState::new(self.hit_point.clone(), self.v_out.clone())
    }

    /// Outward unit normal at the hit point.
    pub fn normal(&self, config: &LatticeConfig) -> Vec<f64> {
        let a = config.spacing();
        self.hit_point
            .iter()
            .zip(&self.scatterer)
            .map(|(x, k)| (x - a * *k as f64) / config.r)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlightOutcome {
    Collision(CollisionEvent),
    HorizonExceeded { l_max: f64 },
}

/// Specular reflection of `v_in` at a surface with outward `normal`.
pub fn reflect(v_in: &[f64], normal: &[f64]) -> Result<Vec<f64>> {
    if v_in.len() != normal.len() {
        return domain("reflect: dimension mismatch");
    }
    check_unit(v_in, "v_in")?;
    check_unit(normal, "normal")?;
    let c = dot(v_in, normal);
    if c >= 0.0 {
        return domain(format!("reflect: v_in . normal = {c} is not entering the surface"));
    }
    Ok(reflect_unchecked(v_in, normal, c))
}

fn reflect_unchecked(v_in: &[f64], normal: &[f64], c: f64) -> Vec<f64> {
    let mut out: Vec<f64> = v_in.iter().zip(normal).map(|(v, n)| v - 2.0 * c * n).collect();
    let nn = norm(&out);
    out.iter_mut().for_each(|x| *x /= nn);
    out
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return domain(format!("{what} is not a unit vector (norm {n})"));
    }
    Ok(())
}

/// Nearest collision of the ray leaving `state`, or `HorizonExceeded` when no
/// scatterer is met within `config.l_max`.
///
/// A starting point on a scatterer surface excludes that scatterer.
pub fn next_collision(state: &ParticleState, config: &LatticeConfig) -> Result<FlightOutcome> {
    config.validate()?;
    let d = config.d;
    if state.position.len() != d || state.velocity.len() != d {
        return domain(format!("state dimension does not match d = {d}"));
    }
    check_unit(&state.velocity, "velocity")?;
    let exclude_first = departs_from_surface(state, config)?;
    Ok(march(&state.position, &state.velocity, config, exclude_first))
}

/// Whether the position lies on the surface of its nearest scatterer.
fn departs_from_surface(state: &ParticleState, config: &LatticeConfig) -> Result<bool> {
    let a = config.spacing();
    let local: Vec<f64> = state.position.iter().map(|&x| x - a * (x / a).round()).collect();
    let dist = norm(&local);
    let r = config.r;
    if dist < r * (1.0 - SURFACE_SLACK) {
        return domain(format!("position lies inside a scatterer (distance {dist} < r = {r})"));
    }
    if dist <= r * (1.0 + SURFACE_SLACK) {
        if dot(&local, &state.velocity) < -UNIT_TOL * r {
            return domain("velocity points into the scatterer the particle sits on");
        }
        return Ok(true);
    }
    Ok(false)
}

fn march(p: &[f64], v: &[f64], config: &LatticeConfig, exclude_first: bool) -> FlightOutcome {
    let d = config.d;
    let a = config.spacing();
    let r = config.r;
    let r2 = r * r;
    let mut cell = vec![0i64; d];
    let mut t_max = vec![f64::INFINITY; d];
    let mut t_delta = vec![f64::INFINITY; d];
    let mut step = vec![0i64; d];
    for i in 0..d {
        let u = p[i] / a + 0.5;
        let c = u.floor();
        cell[i] = c as i64;
        if v[i] > 0.0 {
            t_max[i] = (c + 1.0 - u) * a / v[i];
            t_delta[i] = a / v[i];
            step[i] = 1;
        } else if v[i] < 0.0 {
            t_max[i] = (u - c) * a / -v[i];
            t_delta[i] = a / -v[i];
            step[i] = -1;
        }
    }
    let mut local = vec![0.0; d];
    let mut first = true;
    loop {
        if !(first && exclude_first) {
            for i in 0..d {
                local[i] = p[i] - a * cell[i] as f64;
            }
            let b = dot(&local, v);
            let ll = dot(&local, &local);
            let disc = b * b - (ll - r2);
            if disc > TANGENCY_TOL * r2 {
                let t = -b - disc.sqrt();
                if t > 0.0 {
                    if t > config.l_max {
                        return FlightOutcome::HorizonExceeded { l_max: config.l_max };
                    }
                    return FlightOutcome::Collision(collision(v, &local, &cell, t, b, ll, config));
                }
            }
        }
        first = false;
        let (axis, t_exit) = t_max
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &t)| if t < acc.1 { (i, t) } else { acc });
        if t_exit > config.l_max {
            return FlightOutcome::HorizonExceeded { l_max: config.l_max };
        }
        cell[axis] += step[axis];
        t_max[axis] += t_delta[axis];
    }
}

fn collision(
    v: &[f64],
    local: &[f64],
    cell: &[i64],
    t: f64,
    b: f64,
    ll: f64,
    config: &LatticeConfig,
) -> CollisionEvent {
    let a = config.spacing();
    let r = config.r;
    let mut normal: Vec<f64> = local.iter().zip(v).map(|(l, vi)| l + t * vi).collect();
    let nn = norm(&normal);
    normal.iter_mut().for_each(|x| *x /= nn);
    let hit_point: Vec<f64> = cell.iter().zip(&normal).map(|(k, n)| a * *k as f64 + r * n).collect();
    let c = dot(v, &normal);
    let v_out = reflect_unchecked(v, &normal, c);
    let impact_parameter = (ll - b * b).max(0.0).sqrt().min(r * (1.0 - f64::EPSILON));
    let deflection_angle = angle_between(v, &v_out);
    CollisionEvent {
        free_path: t,
        hit_point,
        scatterer: cell.to_vec(),
        v_in: v.to_vec(),
        v_out,
        impact_parameter,
        deflection_angle,
    }
}

/// Scattering data of a flight that ended on a scatterer.
#[derive(Debug, Clone, PartialEq)]
pub struct Scattering {
    pub scatterer: Vec<i64>,
    pub impact_parameter: f64,
    pub deflection_angle: f64,
}

/// One flight of a chained trajectory. `scattering` is `None` for flights cut
/// at the horizon, whose free path equals `l_max` and whose velocity is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightRecord {
    pub free_path: f64,
    pub end_point: Vec<f64>,
    pub v_in: Vec<f64>,
    pub v_out: Vec<f64>,
    pub scattering: Option<Scattering>,
}

impl FlightRecord {
    pub fn horizon(&self) -> bool {
        self.scattering.is_none()
    }

    pub fn deflection_angle(&self) -> f64 {
        self.scattering.as_ref().map_or(0.0, |s| s.deflection_angle)
    }
}

/// Iterator over the chained flights of one particle.
#[derive(Debug, Clone)]
pub struct BilliardWalker {
    config: LatticeConfig,
    state: ParticleState,
}

impl BilliardWalker {
    pub fn new(config: LatticeConfig, init: ParticleState) -> Result<Self> {
        config.validate()?;
        // Surface the state errors up front rather than on the first flight.
        next_collision(&init, &config)?;
        Ok(Self { config, state: init })
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    pub fn next_flight(&mut self) -> FlightRecord {
        let exclude = departs_from_surface(&self.state, &self.config).unwrap_or(false);
        let outcome = march(&self.state.position, &self.state.velocity, &self.config, exclude);
        match outcome {
            FlightOutcome::Collision(ev) => {
                let record = FlightRecord {
                    free_path: ev.free_path,
                    end_point: ev.hit_point.clone(),
                    v_in: ev.v_in,
                    v_out: ev.v_out.clone(),
                    scattering: Some(Scattering {
                        scatterer: ev.scatterer,
                        impact_parameter: ev.impact_parameter,
                        deflection_angle: ev.deflection_angle,
                    }),
                };
                self.state = ParticleState::new(ev.hit_point, ev.v_out);
                record
            }
            FlightOutcome::HorizonExceeded { l_max } => {
                let end: Vec<f64> = self
                    .state
                    .position
                    .iter()
                    .zip(&self.state.velocity)
                    .map(|(x, v)| x + l_max * v)
                    .collect();
                let record = FlightRecord {
                    free_path: l_max,
                    end_point: end.clone(),
                    v_in: self.state.velocity.clone(),
                    v_out: self.state.velocity.clone(),
                    scattering: None,
                };
                self.state.position = end;
                record
            }
        }
    }
}

impl Iterator for BilliardWalker {
    type Item = FlightRecord;

    fn next(&mut self) -> Option<FlightRecord> {
        Some(self.next_flight())
    }
}

/// How a flight sequence is started.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Given(ParticleState),
    /// A point on the scatterer at the origin, leaving it with the
    /// cosine-weighted law of the billiard map's invariant measure. Drawn from
    /// the sequence seed.
    RandomDeparture,
}

/// Departure state on the origin scatterer: uniform surface point, outgoing
/// direction with density proportional to the cosine with the normal.
pub fn random_departure<R: Rng + ?Sized>(config: &LatticeConfig, rng: &mut R) -> ParticleState {
    let d = config.d;
    let normal = random_unit(d, rng);
    let tangent = random_orthogonal_unit(&normal, rng);
    // Uniform in the unit (d-1)-ball of the tangent plane, lifted to the hemisphere.
    let rho: f64 = rng.random::<f64>().powf(1.0 / (d as f64 - 1.0));
    let lift = (1.0 - rho * rho).max(0.0).sqrt();
    let mut velocity: Vec<f64> = tangent.iter().zip(&normal).map(|(t, n)| rho * t + lift * n).collect();
    let nv = norm(&velocity);
    velocity.iter_mut().for_each(|x| *x /= nv);
    let position = normal.iter().map(|n| config.r * n).collect();
    ParticleState::new(position, velocity)
}

/// Chained flights from an initial condition. Deterministic given
/// `(seed, config, init)`; the seed only matters for a random departure.
pub fn sample_flight_sequence(
    seed: u64,
    n_flights: usize,
    config: &LatticeConfig,
    init: &InitialCondition,
) -> Result<Vec<FlightRecord>> {
    config.validate()?;
    let state = match init {
        InitialCondition::Given(s) => s.clone(),
        InitialCondition::RandomDeparture => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_departure(config, &mut rng)
        }
    };
    let walker = BilliardWalker::new(config.clone(), state)?;
    Ok(walker.take(n_flights).collect())
}

/// Empirical survival `P(xi > x)` at each grid point.
pub fn free_path_survival(free_paths: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if free_paths.is_empty() {
        return domain("free_path_survival: no flights");
    }
    let mut sorted = free_paths.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(grid
        .iter()
        .map(|&x| {
            let at_or_below = sorted.partition_point(|&v| v <= x);
            (sorted.len() - at_or_below) as f64 / n
        })
        .collect())
}

/// Least-squares slope of `log survival` against `log x` on a geometric grid
/// of `points` nodes spanning `[lo, hi]`.
pub fn survival_loglog_slope(free_paths: &[f64], lo: f64, hi: f64, points: usize) -> Result<f64> {
    if !(lo > 0.0 && hi > lo) || points < 2 {
        return domain("survival_loglog_slope: need 0 < lo < hi and points >= 2");
    }
    let grid: Vec<f64> = (0..points)
        .map(|i| lo * (hi / lo).powf(i as f64 / (points - 1) as f64))
        .collect();
    let surv = free_path_survival(free_paths, &grid)?;
    if surv.iter().any(|&s| s <= 0.0) {
        return domain("survival_loglog_slope: empty tail bin, not enough flights");
    }
    let xs: Vec<f64> = grid.iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = surv.iter().map(|s| s.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Write flights as CSV: index, xi, hit_1..hit_d, v_out_1..v_out_d,
/// impact_parameter, deflection_angle, horizon_flag. Horizon flights leave the
/// impact parameter empty.
pub fn write_flights_csv<W: Write>(mut out: W, flights: &[FlightRecord]) -> io::Result<()> {
    let d = flights.first().map_or(0, |f| f.end_point.len());
    let mut header = vec!["index".to_string(), "xi".to_string()];
    header.extend((1..=d).map(|i| format!("hit_{i}")));
    header.extend((1..=d).map(|i| format!("v_out_{i}")));
    header.extend(["impact_parameter", "deflection_angle", "horizon_flag"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for (i, f) in flights.iter().enumerate() {
        write!(out, "{},{}", i + 1, f.free_path)?;
        for x in f.end_point.iter().chain(&f.v_out) {
            write!(out, ",{x}")?;
        }
        match &f.scattering {
            Some(s) => writeln!(out, ",{},{},0", s.impact_parameter, s.deflection_angle)?,
            None => writeln!(out, ",,0,1")?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw2(r: f64) -> LatticeConfig {
        LatticeConfig::new(2, r, LatticeScaling::Raw).unwrap()
    }

    fn state(p: [f64; 2], v: [f64; 2]) -> ParticleState {
        ParticleState::new(p.to_vec(), v.to_vec())
    }

    #[test]
    fn head_on_collision() {
        let out = next_collision(&state([-0.5, 0.0], [1.0, 0.0]), &raw2(0.2)).unwrap();
        let FlightOutcome::Collision(ev) = out else {
            panic!("expected a hit")
        };
        assert!((ev.free_path - 0.3).abs() < 1e-12);
        assert!((ev.hit_point[0] + 0.2).abs() < 1e-12 && ev.hit_point[1].abs() < 1e-12);
        assert_eq!(ev.scatterer, vec![0, 0]);
        assert!((ev.v_out[0] + 1.0).abs() < 1e-12 && ev.v_out[1].abs() < 1e-12);
        assert!((ev.deflection_angle - std::f64::consts::PI).abs() < 1e-12);
        assert!(ev.impact_parameter.abs() < 1e-12);
    }

    #[test]
    fn corridor_and_tangency_miss() {
        let cfg = raw2(0.2).with_l_max(50.0).unwrap();
        let out = next_collision(&state([-0.5, 0.0], [0.0, 1.0]), &cfg).unwrap();
        assert_eq!(out, FlightOutcome::HorizonExceeded { l_max: 50.0 });
        let out = next_collision(&state([-0.5, 0.2], [1.0, 0.0]), &cfg).unwrap();
        assert_eq!(out, FlightOutcome::HorizonExceeded { l_max: 50.0 });
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), vec![-1.0, 0.0]);
        assert!(reflect(&[1.0, 0.0], &[0.0, 1.0]).is_err());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let out = reflect(&[h, -h], &[0.0, 1.0]).unwrap();
        assert!((out[0] - h).abs() < 1e-15 && (out[1] - h).abs() < 1e-15);
        assert!(reflect(&[2.0, 0.0], &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(
            LatticeConfig::new(2, 0.5, LatticeScaling::Raw),
            Err(Error::Configuration(_))
        ));
        // spacing sqrt(0.3) ~ 0.548 < 0.6
        assert!(LatticeConfig::new(2, 0.3, LatticeScaling::BoltzmannGrad).is_err());
        assert!(LatticeConfig::new(2, 0.2, LatticeScaling::Raw)
            .unwrap()
            .with_l_max(0.0)
            .is_err());
        let cfg = raw2(0.2);
        assert!(matches!(
            next_collision(&state([-0.5, 0.0], [1.0, 0.1]), &cfg),
            Err(Error::Domain(_))
        ));
        assert!(next_collision(&state([0.1, 0.0], [1.0, 0.0]), &cfg).is_err());
    }

    #[test]
    fn chained_head_on_flights() {
        let cfg = raw2(0.2);
        let init = InitialCondition::Given(state([-0.5, 0.0], [1.0, 0.0]));
        assert!(sample_flight_sequence(1, 0, &cfg, &init).unwrap().is_empty());
        let flights = sample_flight_sequence(1, 2, &cfg, &init).unwrap();
        assert!((flights[0].free_path - 0.3).abs() < 1e-12);
        assert!((flights[1].free_path - 0.6).abs() < 1e-12);
        assert_eq!(flights[1].scattering.as_ref().unwrap().scatterer, vec![-1, 0]);
        assert!((flights[1].end_point[0] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn horizon_flights_continue_from_the_cap() {
        let cfg = raw2(0.2).with_l_max(10.0).unwrap();
        let init = InitialCondition::Given(state([-0.5, 0.0], [0.0, 1.0]));
        let flights = sample_flight_sequence(3, 3, &cfg, &init).unwrap();
        for (i, f) in flights.iter().enumerate() {
            assert!(f.horizon());
            assert_eq!(f.free_path, 10.0);
            assert!((f.end_point[1] - 10.0 * (i + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn survival_examples() {
        assert_eq!(free_path_survival(&[0.3], &[0.1, 0.5]).unwrap(), vec![1.0, 0.0]);
        let s = free_path_survival(&[1.0, 2.0, 3.0], &[0.0, 1.5]).unwrap();
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(free_path_survival(&[], &[1.0]).is_err());
    }

    #[test]
    fn csv_has_documented_columns() {
        let cfg = raw2(0.2).with_l_max(5.0).unwrap();
        let init = InitialCondition::Given(state([-0.5, 0.0], [1.0, 0.0]));
        let mut flights = sample_flight_sequence(0, 1, &cfg, &init).unwrap();
        flights.extend(
            sample_flight_sequence(0, 1, &cfg, &InitialCondition::Given(state([-0.5, 0.0], [0.0, 1.0]))).unwrap(),
        );
        let mut buf = Vec::new();
        write_flights_csv(&mut buf, &flights).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "index,xi,hit_1,hit_2,v_out_1,v_out_2,impact_parameter,deflection_angle,horizon_flag"
        );
        assert!(lines[1].ends_with(",0"));
        assert!(lines[2].ends_with(",,0,1"));
    }
}
