//! One pipeline per experiment mode.

use std::fmt::Write as _;

use lorentz_core::billiard::{
    free_path_survival, random_departure, survival_loglog_slope, write_flights_csv, BilliardWalker, FlightRecord,
    LatticeConfig,
};
use lorentz_core::limit_chain::{calibrate_surrogate, mixing_series, sample_flights, EmpiricalTable, KernelBackend};
use lorentz_core::paths::{
    decompose, normalize_continuous, normalize_discrete, stream_continuous, stream_replica, truncate, Conditioning,
    TruncationParams,
};
use lorentz_core::stats::{
    compare_rate_models, distance_report, ks_1d, mixing_fit, moment_suite, orthant_grid, second_moment_ratio,
    DistanceMetric,
};
use lorentz_core::stein::{
    antisymmetry_check, check_derivative_bounds, default_probes, leading_error_term, solve_stein,
    stream_surrogate_pair, test_battery, verify_pair_identities, MeanCheck, PairBatch, QuadratureSpec,
};
use lorentz_core::vector::norm;
use rand::Rng;
use serde_json::{json, Value};

use crate::config::{BackendChoice, Mode};
use crate::error::{HarnessError, Result};
use crate::run::{Context, LedgerRow, ModeOutput};
use crate::streams::replica_stream;

const STAGE_TABLE: u64 = 1;
const STAGE_BILLIARD: u64 = 2;
const STAGE_LIMIT: u64 = 0x100;
const STAGE_MOMENTS: u64 = 0x200;
const STAGE_DISTANCES: u64 = 0x300;
const STAGE_BOOTSTRAP: u64 = 0x400;
const STAGE_RENEWAL: u64 = 0x500;
const STAGE_PAIRS: u64 = 0x600;

/// Billiard flights of the first trajectory kept for the trajectories file.
pub const TRAJECTORY_FLIGHTS: usize = 10_000;

/// Survival slope window and the point of the tail-constant estimate.
pub const TAIL_WINDOW: (f64, f64) = (5.0, 50.0);
pub const TAIL_POINT: f64 = 20.0;
const SLOPE_POINTS: usize = 16;
/// Renewal deviations are counted from `t^RENEWAL_EXPONENT` on.
pub const RENEWAL_EXPONENT: f64 = 0.75;

pub fn dispatch(ctx: &mut Context) -> Result<ModeOutput> {
    match ctx.config.mode {
        Mode::Billiard => billiard(ctx),
        Mode::Limit => limit(ctx),
        Mode::Distances => distances(ctx, false),
        Mode::Rates => distances(ctx, true),
        Mode::Renewal => renewal(ctx),
        Mode::SteinCheck => stein_check(ctx),
    }
}

fn unit_x(d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[0] = 1.0;
    v
}

fn lattice(ctx: &Context) -> Result<LatticeConfig> {
    let c = &ctx.config;
    let r = c.r.ok_or_else(|| HarnessError::config("r: required"))?;
    Ok(LatticeConfig::new(c.d, r, c.scaling)?)
}

fn backend(ctx: &mut Context) -> Result<(KernelBackend, Value)> {
    match ctx.config.backend {
        BackendChoice::SurrogateIid => {
            let law = calibrate_surrogate(&ctx.constants)?;
            let info = json!({ "kind": "surrogate_iid", "x0": law.x0, "c0": law.c0 });
            Ok((KernelBackend::SurrogateIid(law), info))
        }
        BackendChoice::Empirical => {
            let lat = lattice(ctx)?;
            let (flights, mode) = (ctx.config.table_flights, ctx.config.resampling);
            let mut rng = replica_stream(ctx.config.seed, 0, STAGE_TABLE);
            let table = ctx.timed("table", |_| {
                let walker = BilliardWalker::new(lat.clone(), random_departure(&lat, &mut rng))?;
                let records: Vec<FlightRecord> = walker.take(flights).collect();
                Ok(EmpiricalTable::from_flights(lat.d, &records, mode)?)
            })?;
            let mean = table.entries.iter().map(|e| e.0).sum::<f64>() / table.entries.len() as f64;
            let info = json!({
                "kind": "empirical",
                "r": lat.r,
                "resampling": mode,
                "rows": table.entries.len(),
                "mean_free_path": mean,
            });
            Ok((KernelBackend::Empirical(table), info))
        }
    }
}

/// Centring constant `E xi'` of the backend at truncation level `r_n`.
fn centring(backend: &KernelBackend, r_n: f64) -> f64 {
    match backend {
        KernelBackend::SurrogateIid(law) => law.truncated_mean(r_n),
        KernelBackend::Empirical(t) => {
            let r2 = r_n * r_n;
            t.entries
                .iter()
                .map(|&(x, _)| if x * x <= r2 { x } else { 0.0 })
                .sum::<f64>()
                / t.entries.len() as f64
        }
    }
}

/// Sum over coordinates of the sample variance, with a standard error.
fn total_variance(rows: &[Vec<f64>]) -> MeanCheck {
    let r = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..d)
        .map(|k| rows.iter().map(|q| q[k]).sum::<f64>() / r as f64)
        .collect();
    let bessel = r as f64 / (r as f64 - 1.0).max(1.0);
    let sq: Vec<f64> = rows
        .iter()
        .map(|q| bessel * q.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .collect();
    MeanCheck::from_values(&sq)
}

/// Largest per-coordinate KS distance to the standard normal.
fn ks_coordinates(flat: &[f64], d: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..d {
        let x: Vec<f64> = flat.iter().skip(k).step_by(d).copied().collect();
        worst = worst.max(ks_1d(&x)?);
    }
    Ok(worst)
}

fn flat_rows_csv(out: &mut String, key: f64, rows: &[Vec<f64>]) {
    for (i, w) in rows.iter().enumerate() {
        write!(out, "{key},{i}").unwrap();
        for x in w {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
}

fn coord_header(prefix: &str, d: usize) -> String {
    (1..=d).map(|k| format!(",{prefix}_{k}")).collect()
}

fn billiard(ctx: &mut Context) -> Result<ModeOutput> {
    let lat = lattice(ctx)?;
    let c = ctx.config.clone();
    let runs = ctx.timed("flights", |ctx| {
        ctx.par_map(c.replicas, |i| {
            let mut rng = replica_stream(c.seed, i, STAGE_BILLIARD);
            let walker = BilliardWalker::new(lat.clone(), random_departure(&lat, &mut rng))?;
            let mut paths = Vec::with_capacity(c.flights);
            let mut kept = Vec::new();
            let mut horizon = 0usize;
            for f in walker.take(c.flights) {
                paths.push(f.free_path);
                horizon += f.horizon() as usize;
                if i == 0 && kept.len() < TRAJECTORY_FLIGHTS {
                    kept.push(f);
                }
            }
            Ok((paths, horizon, kept))
        })
    })?;
    let first_paths = runs[0].0.clone();
    let horizon: usize = runs.iter().map(|r| r.1).sum();
    let mut traj = Vec::new();
    write_flights_csv(&mut traj, &runs[0].2).map_err(|e| HarnessError::io("trajectories.csv", e))?;
    let pooled: Vec<f64> = runs.into_iter().flat_map(|r| r.0).collect();

    let name = "billiard";
    let n = c.flights as f64;
    let mut out = ModeOutput::default();
    let mfp = MeanCheck::from_values(&pooled);
    let total = pooled.len() as f64;
    let p_tail = free_path_survival(&pooled, &[TAIL_POINT])?[0];
    let tail = TAIL_POINT * TAIL_POINT;
    out.ledger
        .push(ctx.row("mean_free_path", name, n, mfp.mean, Some(mfp.stderr)));
    out.ledger.push(ctx.row(
        "mean_free_path_ratio",
        name,
        n,
        mfp.mean / ctx.constants.xi_bar,
        Some(mfp.stderr / ctx.constants.xi_bar),
    ));
    let mut warnings = Vec::new();
    match survival_loglog_slope(&pooled, TAIL_WINDOW.0, TAIL_WINDOW.1, SLOPE_POINTS) {
        Ok(slope) => out.ledger.push(ctx.row("survival_slope", name, n, slope, None)),
        Err(e) => warnings.push(e.to_string()),
    }
    let tail_stderr = tail * (p_tail * (1.0 - p_tail) / total).sqrt();
    out.ledger
        .push(ctx.row("tail_constant", name, n, tail * p_tail, Some(tail_stderr)));
    out.ledger
        .push(ctx.row("horizon_fraction", name, n, horizon as f64 / total, None));

    let params = TruncationParams::new(c.gamma, c.flights.max(2))?;
    let series = truncate(&first_paths, &params);
    let mixing = match mixing_series(&series, c.max_lag) {
        Ok(m) => {
            let fit = mixing_fit(&m)?;
            json!({ "series": "truncated free path, first trajectory", "cov": m.cov, "iid_stderr": m.iid_stderr, "fit": fit })
        }
        Err(e) => json!({ "skipped": e.to_string() }),
    };
    let s = &mut out.summary;
    s.insert("flights_per_replica".into(), c.flights.into());
    s.insert("replicas".into(), c.replicas.into());
    s.insert("r".into(), lat.r.into());
    s.insert("spacing".into(), lat.spacing().into());
    s.insert("horizon_flights".into(), horizon.into());
    s.insert("tail_window".into(), json!([TAIL_WINDOW.0, TAIL_WINDOW.1]));
    s.insert("tail_point".into(), TAIL_POINT.into());
    s.insert("tail_reference".into(), (ctx.constants.theta_d / 2.0).into());
    s.insert("mixing".into(), mixing);
    s.insert("warnings".into(), warnings.into());
    out.trajectories = String::from_utf8(traj).expect("csv is utf-8");
    Ok(out)
}

fn limit(ctx: &mut Context) -> Result<ModeOutput> {
    let (backend, info) = backend(ctx)?;
    let c = ctx.config.clone();
    let v0 = unit_x(c.d);
    let name = backend.name();
    let mut out = ModeOutput {
        trajectories: format!("n,replica{}\n", coord_header("w", c.d)),
        ..Default::default()
    };
    let mut var_points = Vec::new();
    let mut moments = Vec::new();
    for (gi, &n) in c.n_grid.iter().enumerate() {
        let params = TruncationParams::new(c.gamma, n)?;
        let m = centring(&backend, params.r_n);
        let reps = ctx.timed(format!("replicas n={n}"), |ctx| {
            ctx.par_map(c.replicas, |i| {
                let mut rng = replica_stream(c.seed, i, STAGE_LIMIT + gi as u64);
                Ok(stream_replica(&backend, &v0, &params, m, &mut rng)?)
            })
        })?;
        let nf = n as f64;
        let q: Vec<Vec<f64>> = reps.iter().map(|r| r.q.clone()).collect();
        let qt: Vec<Vec<f64>> = reps.iter().map(|r| r.q_trunc.clone()).collect();
        let flat_qt: Vec<f64> = qt.concat();
        let denom = c.d as f64 * ctx.constants.sigma2_d * nf * nf.ln();
        let ratio = second_moment_ratio(&flat_qt, c.d, n, &ctx.constants)?;
        let per: Vec<f64> = qt
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>() / denom)
            .collect();
        out.ledger.push(ctx.row(
            "second_moment_ratio",
            name,
            nf,
            ratio,
            Some(MeanCheck::from_values(&per).stderr),
        ));
        let vt = total_variance(&qt);
        out.ledger
            .push(ctx.row("var_q_trunc", name, nf, vt.mean, Some(vt.stderr)));
        let vq = total_variance(&q);
        out.ledger.push(ctx.row("var_q", name, nf, vq.mean, Some(vq.stderr)));
        let gaps = reps
            .iter()
            .map(|r| {
                let diff: Vec<f64> = r.q.iter().zip(&r.q_trunc).map(|(a, b)| a - b).collect();
                Ok(norm(&normalize_discrete(&diff, n, &ctx.constants)?))
            })
            .collect::<Result<Vec<f64>>>()?;
        let gap = MeanCheck::from_values(&gaps);
        out.ledger
            .push(ctx.row("truncation_gap", name, nf, gap.mean, Some(gap.stderr)));
        var_points.push((n, vt.mean));

        let w = q
            .iter()
            .map(|x| normalize_discrete(x, n, &ctx.constants))
            .collect::<lorentz_core::Result<Vec<_>>>()?;
        flat_rows_csv(&mut out.trajectories, nf, &w);

        if c.moment_draws > 0 {
            let rep = ctx.timed(format!("moments n={n}"), |ctx| {
                let mut rng = replica_stream(c.seed, gi as u64, STAGE_MOMENTS);
                let flights = sample_flights(&backend, &v0, c.moment_draws, &mut rng)?;
                let xt = truncate(&flights.xi, &params);
                let scheme = Conditioning::for_backend(&backend, &flights, params.r_n, c.bins)?;
                Ok(moment_suite(&decompose(&xt, scheme)?, &params, &ctx.constants)?)
            })?;
            for (metric, value) in [
                ("xi2_ratio", rep.xi2_ratio),
                ("e_xi2", rep.e_xi2),
                ("e_m", rep.e_m),
                ("m_gap", rep.m_gap),
                ("xi3_scaled", rep.xi3_scaled),
                ("xi4_scaled", rep.xi4_scaled),
                ("tilde4_scaled", rep.tilde4_scaled),
            ] {
                out.ledger.push(ctx.row(metric, name, nf, value, None));
            }
            moments.push(rep);
        }
    }
    let s = &mut out.summary;
    s.insert("backend".into(), info);
    s.insert("replicas".into(), c.replicas.into());
    if let (Some(first), Some(last)) = (var_points.first(), var_points.last()) {
        if last.0 > first.0 {
            s.insert(
                "var_growth".into(),
                json!({
                    "from_n": first.0,
                    "to_n": last.0,
                    "ratio": last.1 / first.1,
                    "diffusive_ratio": last.0 as f64 / first.0 as f64,
                }),
            );
        }
    }
    if !moments.is_empty() {
        s.insert("moments".into(), serde_json::to_value(&moments)?);
    }
    Ok(out)
}

fn distances(ctx: &mut Context, fit_rates: bool) -> Result<ModeOutput> {
    let (backend, info) = backend(ctx)?;
    let c = ctx.config.clone();
    let v0 = unit_x(c.d);
    let name = backend.name();
    let grid = orthant_grid(c.d, c.grid_points, -3.0, 3.0);
    let mut out = ModeOutput {
        trajectories: format!("n,replica{}\n", coord_header("w", c.d)),
        ..Default::default()
    };
    let mut sliced_points = Vec::new();
    let mut orthant_points = Vec::new();
    for (gi, &n) in c.n_grid.iter().enumerate() {
        let params = TruncationParams::new(c.gamma, n)?;
        let w = ctx.timed(format!("replicas n={n}"), |ctx| {
            ctx.par_map(c.replicas, |i| {
                let mut rng = replica_stream(c.seed, i, STAGE_DISTANCES + gi as u64);
                let rep = stream_replica(&backend, &v0, &params, 0.0, &mut rng)?;
                Ok(normalize_discrete(&rep.q, n, &ctx.constants)?)
            })
        })?;
        let flat = w.concat();
        let nf = n as f64;
        let boot_seed: u64 = replica_stream(c.seed, gi as u64, STAGE_BOOTSTRAP).random();
        let (sliced, orthant) = ctx.timed(format!("distances n={n}"), |_| {
            Ok((
                distance_report(DistanceMetric::SlicedW1, &flat, c.d, nf, boot_seed, c.n_proj, &grid)?,
                distance_report(DistanceMetric::KsOrthant, &flat, c.d, nf, boot_seed, c.n_proj, &grid)?,
            ))
        })?;
        out.ledger
            .push(ctx.row("sliced_w1", name, nf, sliced.value, Some(sliced.stderr)));
        out.ledger
            .push(ctx.row("ks_orthant", name, nf, orthant.value, Some(orthant.stderr)));
        out.ledger
            .push(ctx.row("ks_coord_max", name, nf, ks_coordinates(&flat, c.d)?, None));
        sliced_points.push((nf, sliced.value));
        orthant_points.push((nf, orthant.value));
        flat_rows_csv(&mut out.trajectories, nf, &w);
    }
    if fit_rates {
        let last = *c.n_grid.last().expect("validated grid") as f64;
        let mut fits = serde_json::Map::new();
        for (metric, points) in [("sliced_w1", &sliced_points), ("ks_orthant", &orthant_points)] {
            let ranked = compare_rate_models(points)?;
            for f in &ranked {
                let model = serde_json::to_value(f.model)?;
                let model = model.as_str().unwrap_or_default();
                out.ledger
                    .push(ctx.row(format!("rate_c[{metric};{model}]"), name, last, f.c, None));
                out.ledger
                    .push(ctx.row(format!("rate_residual[{metric};{model}]"), name, last, f.residual, None));
            }
            fits.insert(metric.into(), serde_json::to_value(&ranked)?);
        }
        out.summary.insert("rate_fits".into(), fits.into());
    }
    out.summary.insert("backend".into(), info);
    out.summary.insert("replicas".into(), c.replicas.into());
    out.summary.insert("n_proj".into(), c.n_proj.into());
    out.summary.insert("orthant_grid_points".into(), grid.len().into());
    Ok(out)
}

fn renewal(ctx: &mut Context) -> Result<ModeOutput> {
    let (backend, info) = backend(ctx)?;
    let c = ctx.config.clone();
    let v0 = unit_x(c.d);
    let name = backend.name();
    let xi_bar = ctx.constants.xi_bar;
    let mut out = ModeOutput {
        trajectories: format!(
            "t,replica,nu_t,n_t{}{}\n",
            coord_header("x", c.d),
            coord_header("q", c.d)
        ),
        ..Default::default()
    };
    for (gi, &t) in c.t_grid.iter().enumerate() {
        let n_t = ((t / xi_bar).floor() as usize).max(2);
        let reps = ctx.timed(format!("replicas t={t}"), |ctx| {
            ctx.par_map(c.replicas, |i| {
                let mut rng = replica_stream(c.seed, i, STAGE_RENEWAL + gi as u64);
                Ok(stream_continuous(&backend, &v0, t, n_t, &mut rng)?)
            })
        })?;
        let threshold = t.powf(RENEWAL_EXPONENT);
        let dev: Vec<f64> = reps.iter().map(|r| r.sample.nu_t.abs_diff(n_t) as f64).collect();
        let exceed: Vec<f64> = dev.iter().map(|&x| (x >= threshold) as u8 as f64).collect();
        let p = MeanCheck::from_values(&exceed);
        let bound = 5.0 * t * t.ln() / t.powf(1.5);
        let x = reps
            .iter()
            .map(|r| normalize_continuous(&r.sample.x_t, t, &ctx.constants))
            .collect::<lorentz_core::Result<Vec<_>>>()?;
        let q = reps
            .iter()
            .map(|r| normalize_discrete(&r.q_n, n_t, &ctx.constants))
            .collect::<lorentz_core::Result<Vec<_>>>()?;
        let ks_cont = ks_coordinates(&x.concat(), c.d)?;
        let ks_disc = ks_coordinates(&q.concat(), c.d)?;
        let md = MeanCheck::from_values(&dev);
        out.ledger
            .push(ctx.row("renewal_exceed_prob", name, t, p.mean, Some(p.stderr)));
        out.ledger.push(ctx.row("renewal_bound", name, t, bound, None));
        out.ledger
            .push(ctx.row("renewal_mean_deviation", name, t, md.mean, Some(md.stderr)));
        out.ledger.push(ctx.row("ks_continuous", name, t, ks_cont, None));
        out.ledger.push(ctx.row("ks_discrete", name, t, ks_disc, None));
        out.ledger.push(ctx.row("ks_ratio", name, t, ks_cont / ks_disc, None));
        for (i, r) in reps.iter().enumerate() {
            write!(out.trajectories, "{t},{i},{},{n_t}", r.sample.nu_t).unwrap();
            for v in x[i].iter().chain(&q[i]) {
                write!(out.trajectories, ",{v}").unwrap();
            }
            out.trajectories.push('\n');
        }
    }
    out.summary.insert("backend".into(), info);
    out.summary.insert("replicas".into(), c.replicas.into());
    out.summary.insert("deviation_exponent".into(), RENEWAL_EXPONENT.into());
    Ok(out)
}

fn stein_check(ctx: &mut Context) -> Result<ModeOutput> {
    let (backend, info) = backend(ctx)?;
    let c = ctx.config.clone();
    let v0 = unit_x(c.d);
    let name = backend.name();
    let battery = test_battery(c.d, c.battery_seed);
    let probes = default_probes(c.d, 100, c.battery_seed);
    let solved = ctx.timed("solve", |ctx| {
        ctx.par_map(battery.len(), |k| {
            let h = &battery[k as usize];
            let fine = solve_stein(h, &QuadratureSpec::default())?;
            let bounds = check_derivative_bounds(h, &fine, &probes)?;
            let coarse = solve_stein(h, &QuadratureSpec::coarse())?;
            Ok((fine.max_residual, bounds, coarse))
        })
    })?;
    let mut out = ModeOutput::default();
    let mut per_function: Vec<Vec<Value>> = vec![Vec::new(); battery.len()];
    out.trajectories = format!(
        "n,replica,index{}{}\n",
        coord_header("w", c.d),
        coord_header("w_prime", c.d)
    );
    for (gi, &n) in c.n_grid.iter().enumerate() {
        let params = TruncationParams::new(c.gamma, n)?;
        let records = ctx.timed(format!("pairs n={n}"), |ctx| {
            ctx.par_map(c.replicas, |i| {
                let mut rng = replica_stream(c.seed, i, STAGE_PAIRS + gi as u64);
                Ok(stream_surrogate_pair(&backend, &v0, &params, &ctx.constants, &mut rng)?)
            })
        })?;
        let pairs = PairBatch::new(n, c.d, &ctx.constants, records)?;
        let id = verify_pair_identities(&pairs)?;
        let nf = n as f64;
        out.ledger
            .push(ctx.row("pair_slope", name, nf, id.slope, Some(id.slope_stderr)));
        out.ledger
            .push(ctx.row("pair_slope_target", name, nf, id.target_slope, None));
        out.ledger
            .push(ctx.row("pair_slope_rel_error", name, nf, id.slope_relative_error, None));
        out.ledger
            .push(ctx.row("pair_slope_single", name, nf, id.slope_single, None));
        for ij in 0..c.d * c.d {
            let tag = format!("{}{}", ij / c.d + 1, ij % c.d + 1);
            out.ledger.push(ctx.row(
                format!("quad_lhs_{tag}"),
                name,
                nf,
                id.quad_lhs[ij],
                Some(id.quad_stderr[ij]),
            ));
            out.ledger
                .push(ctx.row(format!("quad_rhs_{tag}"), name, nf, id.quad_rhs[ij], None));
        }
        out.ledger.push(ctx.row("quad_max_z", name, nf, id.quad_max_z, None));
        let evals = ctx.timed(format!("evaluate n={n}"), |ctx| {
            ctx.par_map(solved.len(), |k| {
                let sol = &solved[k as usize].2;
                Ok((antisymmetry_check(&pairs, sol), leading_error_term(&pairs, sol)))
            })
        })?;
        let mut worst_anti = 0.0f64;
        for (k, (anti, lead)) in evals.iter().enumerate() {
            let tag = format!("h{:02}", k + 1);
            out.ledger
                .push(ctx.row(format!("antisymmetry[{tag}]"), name, nf, anti.mean, Some(anti.stderr)));
            out.ledger.push(ctx.row(
                format!("leading_error[{tag}]"),
                name,
                nf,
                lead.estimate.mean,
                Some(lead.estimate.stderr),
            ));
            out.ledger.push(ctx.row(
                format!("direct_gap[{tag}]"),
                name,
                nf,
                lead.direct_gap,
                Some(lead.eh_w.stderr),
            ));
            worst_anti = worst_anti.max(anti.z(0.0));
            per_function[k].push(json!({
                "n": n,
                "estimate": lead.estimate,
                "eh_w": lead.eh_w,
                "eh_z": lead.eh_z,
                "direct_gap": lead.direct_gap,
                "antisymmetry": anti,
            }));
        }
        out.ledger
            .push(ctx.row("antisymmetry_max_z", name, nf, worst_anti, None));
        out.summary
            .insert(format!("pair_identities_n{n}"), serde_json::to_value(&id)?);
        for (i, p) in pairs.records.iter().enumerate() {
            write!(out.trajectories, "{n},{i},{}", p.index).unwrap();
            for v in p.w.iter().chain(&p.w_prime) {
                write!(out.trajectories, ",{v}").unwrap();
            }
            out.trajectories.push('\n');
        }
    }
    let mut index = Vec::new();
    for (k, (h, (fine_residual, bounds, coarse))) in battery.iter().zip(&solved).enumerate() {
        let tag = format!("h{:02}", k + 1);
        let record = json!({
            "function": h.id(),
            "bound_checks": bounds,
            "residuals": {
                "probes": probes.len(),
                "max_residual": bounds.max_residual,
                "solve_max_residual": fine_residual,
                "coarse_max_residual": coarse.max_residual,
            },
            "leading_error": per_function[k],
        });
        let mut bytes = serde_json::to_vec_pretty(&record)?;
        bytes.push(b'\n');
        out.extra.push((format!("stein/{tag}.json"), bytes));
        out.ledger
            .push(ctx.row(format!("max_residual[{tag}]"), name, 0.0, bounds.max_residual, None));
        out.ledger.push(ctx.row(
            format!("bounds_ok[{tag}]"),
            name,
            0.0,
            bounds.all_ok() as u8 as f64,
            None,
        ));
        index.push(json!({ "tag": tag, "function": h.id(), "bounds_ok": bounds.all_ok() }));
    }
    out.summary.insert("backend".into(), info);
    out.summary.insert("replicas".into(), c.replicas.into());
    out.summary.insert("battery_seed".into(), c.battery_seed.into());
    out.summary.insert("functions".into(), index.into());
    Ok(out)
}

/// Ledger rows of one metric as `(n_or_t, value)`.
pub fn series(rows: &[LedgerRow], metric: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.metric == metric)
        .map(|r| (r.n_or_t, r.value))
        .collect()
}
