//! Displacements, collision times and the truncation/centering of free paths.

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::billiard::FlightRecord;
use crate::constants::ModelConstants;
use crate::error::{domain, Error, Result};
use crate::limit_chain::{ChainStepper, KernelBackend, Surrogate};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated vector accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct KahanVec(Vec<KahanSum>);

impl KahanVec {
    pub fn zeros(d: usize) -> Self {
        Self(vec![KahanSum::new(); d])
    }

    #[inline]
    pub fn add_scaled(&mut self, s: f64, v: &[f64]) {
        for (acc, x) in self.0.iter_mut().zip(v) {
            acc.add(s * x);
        }
    }

    pub fn value(&self) -> Vec<f64> {
        self.0.iter().map(KahanSum::value).collect()
    }
}

/// A flight sequence: `xi[j]` is travelled along direction `j`, i.e.
/// `V_{j}` in zero-based indexing. `dirs` is flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flights {
    pub d: usize,
    pub xi: Vec<f64>,
    pub dirs: Vec<f64>,
    /// Deflection at the collision ending each flight, when known.
    pub deflections: Option<Vec<f64>>,
}

impl Flights {
    pub fn new(d: usize, xi: Vec<f64>, dirs: Vec<f64>, deflections: Option<Vec<f64>>) -> Result<Self> {
        if d == 0 || dirs.len() != d * xi.len() {
            return domain(format!(
                "{} directions of dimension {d} for {} flights",
                dirs.len(),
                xi.len()
            ));
        }
        if deflections.as_ref().is_some_and(|t| t.len() != xi.len()) {
            return domain("deflection count differs from flight count");
        }
        Ok(Self {
            d,
            xi,
            dirs,
            deflections,
        })
    }

    pub fn from_records(records: &[FlightRecord]) -> Result<Self> {
        let d = records.first().map_or(0, |f| f.v_in.len());
        if d == 0 {
            return domain("no flight records");
        }
        let xi = records.iter().map(|f| f.free_path).collect();
        let dirs = records.iter().flat_map(|f| f.v_in.iter().copied()).collect();
        let deflections = records.iter().map(FlightRecord::deflection_angle).collect();
        Self::new(d, xi, dirs, Some(deflections))
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn dir(&self, j: usize) -> &[f64] {
        &self.dirs[j * self.d..(j + 1) * self.d]
    }
}

fn weighted_sum(d: usize, weights: impl Iterator<Item = f64>, flights: &Flights) -> Vec<f64> {
    let mut acc = KahanVec::zeros(d);
    for (j, w) in weights.enumerate() {
        acc.add_scaled(w, flights.dir(j));
    }
    acc.value()
}

/// `Q_n = sum_j xi_j V_{j-1}`.
pub fn displacement(flights: &Flights) -> Result<Vec<f64>> {
    if flights.is_empty() {
        return domain("displacement: no flights");
    }
    Ok(weighted_sum(flights.d, flights.xi.iter().copied(), flights))
}

/// `sum_j w_j V_{j-1}` for per-flight weights such as truncated or centred
/// free paths.
pub fn weighted_displacement(flights: &Flights, weights: &[f64]) -> Result<Vec<f64>> {
    if flights.is_empty() || weights.len() != flights.len() {
        return domain("weighted_displacement: weights must match a non-empty flight sequence");
    }
    Ok(weighted_sum(flights.d, weights.iter().copied(), flights))
}

/// `Q_0, Q_1, ..., Q_n`.
pub fn partial_sums(flights: &Flights) -> Vec<Vec<f64>> {
    let mut acc = KahanVec::zeros(flights.d);
    let mut out = Vec::with_capacity(flights.len() + 1);
    out.push(acc.value());
    for (j, &x) in flights.xi.iter().enumerate() {
        acc.add_scaled(x, flights.dir(j));
        out.push(acc.value());
    }
    out
}

/// Final displacements of a batch of equal-length replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub n: usize,
    pub d: usize,
    pub replicas: usize,
    /// `replicas x d`, row-major.
    pub q: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn from_rows(n: usize, d: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != d) {
            return domain("trajectory rows of mixed dimension");
        }
        Ok(Self {
            n,
            d,
            replicas: rows.len(),
            q: rows.concat(),
        })
    }

    pub fn from_flights(batch: &[Flights]) -> Result<Self> {
        let first = batch.first().ok_or_else(|| Error::Domain("empty batch".into()))?;
        if batch.iter().any(|f| f.len() != first.len() || f.d != first.d) {
            return domain("replicas differ in length or dimension");
        }
        let rows = batch.iter().map(displacement).collect::<Result<Vec<_>>>()?;
        Self::from_rows(first.len(), first.d, &rows)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.q[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.q.chunks_exact(self.d)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let cols: Vec<String> = (1..=self.d).map(|k| format!("q_{k}")).collect();
        writeln!(out, "replica,n,{}", cols.join(","))?;
        for (i, row) in self.rows().enumerate() {
            write!(out, "{},{}", i, self.n)?;
            for x in row {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// `tau_0 = 0, tau_n = xi_1 + ... + xi_n`.
pub fn flight_times(xi: &[f64]) -> Result<Vec<f64>> {
    if let Some(x) = xi.iter().find(|x| !(**x > 0.0)) {
        return domain(format!("flight_times: non-positive free path {x}"));
    }
    let mut acc = KahanSum::new();
    let mut tau = Vec::with_capacity(xi.len() + 1);
    tau.push(0.0);
    for &x in xi {
        acc.add(x);
        tau.push(acc.value());
    }
    Ok(tau)
}

/// Largest `n` with `tau_n <= t`.
pub fn collisions_before(t: f64, tau: &[f64]) -> Result<usize> {
    if !(t >= 0.0) {
        return domain(format!("collisions_before: t = {t} < 0"));
    }
    let last = *tau.last().ok_or_else(|| Error::Domain("empty time sequence".into()))?;
    if t > last {
        return Err(Error::RequiresMoreFlights { t, covered: last });
    }
    Ok(tau.partition_point(|&s| s <= t) - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSample {
    pub t: f64,
    pub tau_nu: f64,
    pub nu_t: usize,
    pub x_t: Vec<f64>,
}

/// `X_t = Q_{nu_t} + (t - tau_{nu_t}) V_{nu_t}`.
pub fn continuous_position(t: f64, flights: &Flights) -> Result<ContinuousSample> {
    let tau = flight_times(&flights.xi)?;
    let nu = collisions_before(t, &tau)?;
    let mut acc = KahanVec::zeros(flights.d);
    for j in 0..nu {
        acc.add_scaled(flights.xi[j], flights.dir(j));
    }
    if nu < flights.len() {
        acc.add_scaled(t - tau[nu], flights.dir(nu));
    }
    Ok(ContinuousSample {
        t,
        tau_nu: tau[nu],
        nu_t: nu,
        x_t: acc.value(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationParams {
    pub gamma: f64,
    pub n: usize,
    /// `sqrt(n (log n)^gamma)`.
    pub r_n: f64,
}

impl TruncationParams {
    pub const DEFAULT_GAMMA: f64 = 0.5;

    pub fn new(gamma: f64, n: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return domain(format!("gamma = {gamma} outside (0, 1)"));
        }
        if n < 2 {
            return domain(format!("truncation horizon n = {n} < 2"));
        }
        let nf = n as f64;
        Ok(Self {
            gamma,
            n,
            r_n: (nf * nf.ln().powf(gamma)).sqrt(),
        })
    }
}

/// `xi' = xi 1{xi^2 <= r_n^2}`.
pub fn truncate(xi: &[f64], params: &TruncationParams) -> Vec<f64> {
    let r2 = params.r_n * params.r_n;
    xi.iter().map(|&x| if x * x <= r2 { x } else { 0.0 }).collect()
}

/// How the conditional mean `m = E(xi' | eta)` is estimated.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// Independent free paths: `m` is the truncated surrogate mean.
    Surrogate { law: &'a Surrogate, r_n: f64 },
    /// Means of `xi'` within equal-count bins of a descriptor.
    Binned { descriptor: &'a [f64], bins: usize },
}

impl<'a> Conditioning<'a> {
    pub const DEFAULT_BINS: usize = 32;

    pub fn for_backend(backend: &'a KernelBackend, flights: &'a Flights, r_n: f64, bins: usize) -> Result<Self> {
        match backend {
            KernelBackend::SurrogateIid(law) => Ok(Self::Surrogate { law, r_n }),
            KernelBackend::Empirical(_) => match &flights.deflections {
                Some(descriptor) => Ok(Self::Binned { descriptor, bins }),
                None => domain("empirical conditioning needs deflections"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub xi_trunc: Vec<f64>,
    pub m: Vec<f64>,
    pub xi_tilde: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSummary {
    pub gamma: f64,
    pub r_n: f64,
    pub mean_m: f64,
    pub var_xi_tilde: f64,
}

impl Decomposition {
    pub fn summary(&self, params: &TruncationParams) -> DecompositionSummary {
        let n = self.m.len().max(1) as f64;
        let mean_m = self.m.iter().sum::<f64>() / n;
        let mu = self.xi_tilde.iter().sum::<f64>() / n;
        let var = self.xi_tilde.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        DecompositionSummary {
            gamma: params.gamma,
            r_n: params.r_n,
            mean_m,
            var_xi_tilde: var,
        }
    }
}

/// Equal-count bin edges: `bins - 1` interior quantiles of `x`.
pub fn quantile_edges(x: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..bins)
        .map(|b| sorted[(b * sorted.len() / bins).min(sorted.len() - 1)])
        .collect()
}

/// Bin of `x` given sorted interior edges; values equal to an edge go up.
#[inline]
pub fn bin_of(x: f64, edges: &[f64]) -> usize {
    edges.partition_point(|&e| e <= x)
}

/// Splits `xi'` into its conditional mean and the centred remainder.
pub fn decompose(xi_trunc: &[f64], scheme: Conditioning<'_>) -> Result<Decomposition> {
    let m = match scheme {
        Conditioning::Surrogate { law, r_n } => vec![law.truncated_mean(r_n); xi_trunc.len()],
        Conditioning::Binned { descriptor, bins } => {
            if descriptor.len() != xi_trunc.len() {
                return domain("descriptor length differs from the free path count");
            }
            if bins == 0 || xi_trunc.is_empty() {
                return domain("binned conditioning needs bins >= 1 and data");
            }
            let edges = quantile_edges(descriptor, bins);
            let idx: Vec<usize> = descriptor.iter().map(|&x| bin_of(x, &edges)).collect();
            let mut sums = vec![KahanSum::new(); bins];
            let mut counts = vec![0usize; bins];
            for (&b, &x) in idx.iter().zip(xi_trunc) {
                sums[b].add(x);
                counts[b] += 1;
            }
            let empty = counts.iter().filter(|&&c| c == 0).count();
            if empty > 0 {
                return Err(Error::EmptyBins { bins, empty, counts });
            }
            let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s.value() / c as f64).collect();
            idx.iter().map(|&b| means[b]).collect()
        }
    };
    let xi_tilde = xi_trunc.iter().zip(&m).map(|(x, m)| x - m).collect();
    Ok(Decomposition {
        xi_trunc: xi_trunc.to_vec(),
        m,
        xi_tilde,
    })
}

/// `W_n = Q_n / (sigma_d sqrt(n log n))`, applied to every row of `q`.
pub fn normalize_discrete(q: &[f64], n: usize, constants: &ModelConstants) -> Result<Vec<f64>> {
    if n < 2 {
        return domain(format!("normalize_discrete: n = {n} < 2"));
    }
    let nf = n as f64;
    let scale = constants.sigma_d() * (nf * nf.ln()).sqrt();
    Ok(q.iter().map(|x| x / scale).collect())
}

/// `W_t = X_t / (Sigma_d sqrt(t log t))`.
pub fn normalize_continuous(x: &[f64], t: f64, constants: &ModelConstants) -> Result<Vec<f64>> {
    if !(t > 1.0) {
        return domain(format!("normalize_continuous: t = {t} <= 1"));
    }
    let scale = constants.big_sigma_d() * (t * t.ln()).sqrt();
    Ok(x.iter().map(|v| v / scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenewalRecord {
    pub t: f64,
    pub nu_t: usize,
    /// `floor(t / xi_bar)`.
    pub n_t: usize,
    pub deviation: usize,
}

pub fn renewal_compare(t: f64, tau: &[f64], constants: &ModelConstants) -> Result<RenewalRecord> {
    let nu_t = collisions_before(t, tau)?;
    let n_t = (t / constants.xi_bar).floor() as usize;
    Ok(RenewalRecord {
        t,
        nu_t,
        n_t,
        deviation: nu_t.abs_diff(n_t),
    })
}

/// Displacements of one surrogate-law replica, accumulated while the chain
/// is generated so that long horizons need no flight storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamedReplica {
    pub q: Vec<f64>,
    /// Displacement built from the truncated free paths.
    pub q_trunc: Vec<f64>,
    /// Displacement built from the truncated, centred free paths.
    pub q_tilde: Vec<f64>,
}

/// One replica of `n = params.n` flights; `m` is the centring constant.
pub fn stream_replica<R: Rng + ?Sized>(
    backend: &KernelBackend,
    v0: &[f64],
    params: &TruncationParams,
    m: f64,
    rng: &mut R,
) -> Result<StreamedReplica> {
    let d = v0.len();
    let r2 = params.r_n * params.r_n;
    let (mut q, mut qt, mut qc) = (KahanVec::zeros(d), KahanVec::zeros(d), KahanVec::zeros(d));
    let mut walk = ChainStepper::new(v0, backend)?;
    for _ in 0..params.n {
        let x = walk.advance(backend, rng);
        let dir = walk.last_direction();
        let xt = if x * x <= r2 { x } else { 0.0 };
        q.add_scaled(x, dir);
        qt.add_scaled(xt, dir);
        qc.add_scaled(xt - m, dir);
    }
    Ok(StreamedReplica {
        q: q.value(),
        q_trunc: qt.value(),
        q_tilde: qc.value(),
    })
}

/// Continuous-time position at `t` together with the discrete displacement
/// after `n` flights, both from the same replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamedContinuous {
    pub sample: ContinuousSample,
    pub q_n: Vec<f64>,
    pub n: usize,
}

pub fn stream_continuous<R: Rng + ?Sized>(
    backend: &KernelBackend,
    v0: &[f64],
    t: f64,
    n: usize,
    rng: &mut R,
) -> Result<StreamedContinuous> {
    if !(t >= 0.0) {
        return domain(format!("stream_continuous: t = {t} < 0"));
    }
    let d = v0.len();
    let mut pos = KahanVec::zeros(d);
    let mut clock = KahanSum::new();
    let mut q_n = None;
    let mut sample = None;
    let mut walk = ChainStepper::new(v0, backend)?;
    let mut j = 0usize;
    while q_n.is_none() || sample.is_none() {
        let xi = walk.advance(backend, rng);
        let dir = walk.last_direction();
        let tau = clock.value();
        if sample.is_none() && tau + xi > t {
            let mut x = pos.clone();
            x.add_scaled(t - tau, dir);
            sample = Some(ContinuousSample {
                t,
                tau_nu: tau,
                nu_t: j,
                x_t: x.value(),
            });
        }
        pos.add_scaled(xi, dir);
        clock.add(xi);
        j += 1;
        if j == n {
            q_n = Some(pos.value());
        }
    }
    Ok(StreamedContinuous {
        sample: sample.expect("loop exits with a sample"),
        q_n: q_n.expect("loop exits with q_n"),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::make_constants;

    fn flights(xi: &[f64], dirs: &[[f64; 2]]) -> Flights {
        Flights::new(2, xi.to_vec(), dirs.concat(), None).unwrap()
    }

    #[test]
    fn displacement_by_hand() {
        let f = flights(&[1.0, 1.0, 1.0], &[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        assert_eq!(displacement(&f).unwrap(), vec![0.0, 1.0]);
        let g = flights(&[2.0], &[[1.0, 0.0]]);
        assert_eq!(displacement(&g).unwrap(), vec![2.0, 0.0]);
        assert!(displacement(&flights(&[], &[])).is_err());
    }

    #[test]
    fn times_and_counters() {
        assert_eq!(flight_times(&[0.5, 0.5]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(flight_times(&[]).unwrap(), vec![0.0]);
        assert!(flight_times(&[0.5, 0.0]).is_err());
        let tau = flight_times(&[0.5; 8]).unwrap();
        assert_eq!(collisions_before(3.2, &tau).unwrap(), 6);
        assert_eq!(collisions_before(0.0, &tau).unwrap(), 0);
        assert_eq!(collisions_before(1.5, &tau).unwrap(), 3);
        assert!(matches!(
            collisions_before(4.5, &tau),
            Err(Error::RequiresMoreFlights { .. })
        ));
        assert!(collisions_before(-1.0, &tau).is_err());
    }

    #[test]
    fn position_interpolates() {
        let f = flights(&[0.5, 0.5, 0.5], &[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(continuous_position(0.75, &f).unwrap().x_t, vec![0.5, 0.25]);
        assert_eq!(continuous_position(1.0, &f).unwrap().x_t, vec![0.5, 0.5]);
        assert_eq!(continuous_position(1.5, &f).unwrap().x_t, vec![1.0, 0.5]);
    }

    #[test]
    fn truncation_level() {
        let p = TruncationParams::new(0.5, 100).unwrap();
        assert!((p.r_n * p.r_n - 214.596_602_628_9).abs() < 1e-6);
        assert!((p.r_n - 14.649_116_104).abs() < 1e-6);
        assert_eq!(truncate(&[20.0, 3.0], &p), vec![0.0, 3.0]);
        assert!(TruncationParams::new(1.0, 100).is_err());
        assert!(TruncationParams::new(0.5, 1).is_err());
    }

    #[test]
    fn binned_means() {
        let desc = [0.1, 0.2, 0.3, 0.4];
        let d = decompose(
            &[2.0; 4],
            Conditioning::Binned {
                descriptor: &desc,
                bins: 1,
            },
        )
        .unwrap();
        assert_eq!(d.m, vec![2.0; 4]);
        assert_eq!(d.xi_tilde, vec![0.0; 4]);
        let d = decompose(
            &[0.0, 2.0, 0.0, 2.0],
            Conditioning::Binned {
                descriptor: &desc,
                bins: 1,
            },
        )
        .unwrap();
        assert_eq!(d.m, vec![1.0; 4]);
        assert_eq!(d.xi_tilde, vec![-1.0, 1.0, -1.0, 1.0]);
        let tied = [0.5; 4];
        let err = decompose(
            &[1.0; 4],
            Conditioning::Binned {
                descriptor: &tied,
                bins: 2,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyBins { empty: 1, .. }));
    }

    #[test]
    fn normalisation() {
        let c = make_constants(2).unwrap();
        assert!(normalize_discrete(&[1.0, 0.0], 1, &c).is_err());
        assert_eq!(normalize_discrete(&[0.0, 0.0], 10, &c).unwrap(), vec![0.0, 0.0]);
        let a = normalize_discrete(&[1.0, 2.0], 50, &c).unwrap();
        let b = normalize_discrete(&[2.0, 4.0], 50, &c).unwrap();
        assert!((2.0 * a[1] - b[1]).abs() < 1e-15);
        assert!(normalize_continuous(&[1.0], 1.0, &c).is_err());
        assert_eq!(normalize_continuous(&[0.0], 5.0, &c).unwrap(), vec![0.0]);
    }

    #[test]
    fn renewal_of_deterministic_flights() {
        let c = make_constants(2).unwrap();
        let tau = flight_times(&[0.5; 100]).unwrap();
        let r = renewal_compare(0.0, &tau, &c).unwrap();
        assert_eq!((r.nu_t, r.n_t), (0, 0));
        for k in 0..400 {
            let r = renewal_compare(k as f64 * 0.123, &tau, &c).unwrap();
            assert!(r.deviation <= 1);
        }
    }

    #[test]
    fn neumaier_sum_recovers_cancellation() {
        let mut s = KahanSum::new();
        for x in [1.0, 1e100, 1.0, -1e100] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }
}
