//! Estimators of partition functions, finite-time free energies and their
//! diagnostics.

use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{sample_environment, truncation_radius, DisasterIndex, Environment, Window};
use crate::error::{invalid, Error, Result};
use crate::path_survival::{Beta, GapWalker};
use crate::rng::{SeedProvenance, SeedStream};
use crate::smc::{propagate, run_islands, IslandResult, SmcConfig, Target};
use crate::stats;

/// Retries after extinction, each with four times the particles.
pub const MAX_ESCALATIONS: u32 = 2;
/// Largest tolerated fraction of censored environments.
pub const MAX_CENSORED_FRACTION: f64 = 0.2;
/// Exponent in the superadditivity slack bound `-(s + t)^delta`.
pub const SUPERADDITIVITY_DELTA: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// `ln(value)`, kept separately because survival probabilities underflow.
    pub log_value: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: SeedProvenance,
    /// Every island died out; `value` is then 0.
    pub extinct: bool,
}

fn check_horizon(env: &Environment, t: f64) -> Result<()> {
    if !(t >= 0.0) {
        return invalid("horizon must be >= 0");
    }
    if t > env.window().t_max() {
        return Err(Error::WindowTooSmall { horizon: t, t_max: env.window().t_max() });
    }
    Ok(())
}

/// Plain Monte Carlo mean of per-path weights `exp(-beta * hits)`.
pub fn estimate_z_crude(env: &Environment, target: &Target, n_paths: usize, seed: SeedStream, tag: &str) -> Result<Estimate> {
    check_horizon(env, target.horizon)?;
    if n_paths < 2 {
        return invalid("n_paths must be >= 2");
    }
    let provenance = SeedProvenance::new(seed.master(), tag);
    if target.beta.is_zero() && !target.truncated {
        return Ok(Estimate { value: 1.0, log_value: 0.0, stderr: 0.0, n: n_paths, seed: provenance, extinct: false });
    }
    let index = DisasterIndex::new(env);
    let d = env.dimension();
    const BATCH: usize = 4096;
    let batches = n_paths.div_ceil(BATCH);
    let sums: Vec<(f64, f64)> = (0..batches as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed.index(b).rng();
            let mut walker = GapWalker::new(&index, target.horizon, target.min_time());
            let radius = truncation_radius(target.horizon);
            let gaps = gap_grid(target.horizon);
            let (mut x, mut end) = (vec![0.0; d], vec![0.0; d]);
            let count = BATCH.min(n_paths - b as usize * BATCH);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                x.iter_mut().for_each(|v| *v = 0.0);
                let mut w = 1.0;
                let mut t0 = 0.0;
                for &t1 in &gaps {
                    w *= propagate(&mut walker, &mut rng, target, radius, t0, &x, t1, &mut end);
                    if w == 0.0 {
                        break;
                    }
                    x.copy_from_slice(&end);
                    t0 = t1;
                }
                s1 += w;
                s2 += w * w;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = n_paths as f64;
    let mean = s1 / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(Estimate { value: mean, log_value: mean.ln(), stderr: (var / n).sqrt(), n: n_paths, seed: provenance, extinct: mean == 0.0 })
}

fn gap_grid(horizon: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (1..).map(|k| k as f64).take_while(|&k| k < horizon).collect();
    if horizon > 0.0 {
        g.push(horizon);
    }
    g
}

/// Combines independent unbiased island estimates of `Z` given in log scale.
pub(crate) fn combine_islands(logs: &[f64], n: usize, seed: SeedProvenance) -> Estimate {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Estimate { value: 0.0, log_value: f64::NEG_INFINITY, stderr: 0.0, n, seed, extinct: true };
    }
    let scaled: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let mean = stats::mean(&scaled);
    let sd = if scaled.len() > 1 { stats::std_dev(&scaled) } else { 0.0 };
    let log_value = m + mean.ln();
    Estimate {
        value: log_value.exp(),
        log_value,
        stderr: m.exp() * sd / (scaled.len() as f64).sqrt(),
        n,
        seed,
        extinct: false,
    }
}

/// Island-based SMC estimate of `Z`; see [`crate::smc`].
pub fn estimate_z_smc(env: &Environment, target: &Target, config: &SmcConfig, seed: SeedStream, tag: &str) -> Result<Estimate> {
    check_horizon(env, target.horizon)?;
    config.validate()?;
    let index = DisasterIndex::new(env);
    Ok(smc_with_index(&index, target, config, seed, tag))
}

fn smc_with_index(index: &DisasterIndex, target: &Target, config: &SmcConfig, seed: SeedStream, tag: &str) -> Estimate {
    let runs: Vec<IslandResult> = run_islands(index, target, config, None, seed);
    let logs: Vec<f64> = runs.iter().map(|r| r.log_z).collect();
    combine_islands(&logs, config.per_island() * config.islands, SeedProvenance::new(seed.master(), tag))
}

/// `E[Z] = exp(-t (1 - e^{-beta}))`: every path meets a Poisson(t) number of disasters.
pub fn annealed_z(beta: Beta, t: f64) -> f64 {
    match beta {
        Beta::Infinite => (-t).exp(),
        Beta::Finite(b) => (-t * (-(-b).exp_m1())).exp(),
    }
}

/// Outcome of the extinction retry protocol for one environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Censorable {
    Log(f64),
    Censored,
}

/// `ln Z` with up to [`MAX_ESCALATIONS`] fourfold particle increases after extinction.
pub fn log_z_with_retries(index: &DisasterIndex, target: &Target, config: &SmcConfig, seed: SeedStream) -> Censorable {
    let mut cfg = *config;
    for attempt in 0..=MAX_ESCALATIONS {
        let est = smc_with_index(index, target, &cfg, seed.tag("attempt").index(u64::from(attempt)), "");
        if !est.extinct {
            return Censorable::Log(est.log_value);
        }
        cfg = cfg.scaled(4);
    }
    Censorable::Censored
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyPoint {
    pub beta: Beta,
    pub t: f64,
    /// Mean over environments of `ln Z` (modified clock, truncation event on).
    pub a_hat: Estimate,
    pub n_env: usize,
    pub censored: usize,
    /// Per-environment `ln Z`, in environment order, censored ones omitted.
    pub log_estimates: Vec<f64>,
}

/// Shared description of an environment-averaged run.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvRun {
    pub dimension: usize,
    pub n_env: usize,
    pub config: SmcConfig,
    pub seed: SeedStream,
}

impl EnvRun {
    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.n_env == 0 {
            return invalid("n_env must be >= 1");
        }
        if self.dimension == 0 {
            return invalid("dimension must be >= 1");
        }
        Ok(())
    }

    /// Environment `i` of role `role` at grid slot `slot`; independent of beta.
    pub fn environment(&self, role: &str, slot: u64, i: u64, t: f64) -> Result<Environment> {
        let window = Window::for_horizon(t, self.dimension)?;
        Ok(sample_environment(&window, self.seed.tag(role).index(slot).index(i)))
    }

    pub fn path_seed(&self, role: &str, slot: u64, i: u64) -> SeedStream {
        self.seed.tag(role).tag("paths").index(slot).index(i)
    }
}

/// Per-environment `ln Z` at one horizon, censored entries as `None`.
fn quenched_logs(run: &EnvRun, role: &str, slot: u64, beta: Beta, t: f64) -> Result<Vec<Option<f64>>> {
    let target = Target { beta, horizon: t, modified: true, truncated: true };
    (0..run.n_env as u64)
        .into_par_iter()
        .map(|i| {
            let env = run.environment(role, slot, i, t)?;
            let index = DisasterIndex::new(&env);
            Ok(match log_z_with_retries(&index, &target, &run.config, run.path_seed(role, slot, i)) {
                Censorable::Log(l) => Some(l),
                Censorable::Censored => None,
            })
        })
        .collect()
}

fn summarize(run: &EnvRun, role: &str, beta: Beta, t: f64, logs: Vec<Option<f64>>) -> Result<FreeEnergyPoint> {
    let total = logs.len();
    let kept: Vec<f64> = logs.into_iter().flatten().collect();
    let censored = total - kept.len();
    if censored as f64 > MAX_CENSORED_FRACTION * total as f64 || kept.is_empty() {
        return Err(Error::ParticleBudget { t, censored, total });
    }
    let mean = stats::mean(&kept);
    let stderr = if kept.len() > 1 { stats::std_err(&kept) } else { 0.0 };
    Ok(FreeEnergyPoint {
        beta,
        t,
        a_hat: Estimate {
            value: mean,
            log_value: f64::NAN,
            stderr,
            n: kept.len(),
            seed: SeedProvenance::new(run.seed.master(), role),
            extinct: false,
        },
        n_env: total,
        censored,
        log_estimates: kept,
    })
}

/// `a_beta(t) = E ln P(tau^1_beta >= t, A_t)` over a grid of horizons.
pub fn free_energy_curve(beta: Beta, t_grid: &[f64], run: &EnvRun) -> Result<Vec<FreeEnergyPoint>> {
    free_energy_curve_role(beta, t_grid, run, "free-energy")
}

pub fn free_energy_curve_role(beta: Beta, t_grid: &[f64], run: &EnvRun, role: &str) -> Result<Vec<FreeEnergyPoint>> {
    run.validate()?;
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("t grid must be strictly increasing");
    }
    t_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| summarize(run, role, beta, t, quenched_logs(run, role, k as u64, beta, t)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub p_hat: f64,
    /// Coefficient of `t^{-1/2}`.
    pub slope: f64,
    pub stderr: f64,
    pub lower: f64,
    pub upper: f64,
    pub reduced_chi2: f64,
}

impl Extrapolation {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Weighted least squares of `a(t)/t = p + c t^{-1/2}`; the 95% interval is
/// inflated by the square root of the reduced chi-square when it exceeds one.
pub fn extrapolate_p(points: &[FreeEnergyPoint]) -> Result<Extrapolation> {
    if points.len() < 3 {
        return Err(Error::DegenerateDesign(format!("need >= 3 points, got {}", points.len())));
    }
    if points.windows(2).any(|w| w[0].t >= w[1].t) || points[0].t <= 0.0 {
        return Err(Error::DegenerateDesign("horizons must be positive and increasing".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.t.powf(-0.5)).collect();
    let y: Vec<f64> = points.iter().map(|p| p.a_hat.value / p.t).collect();
    let var: Vec<f64> = points.iter().map(|p| (p.a_hat.stderr / p.t).powi(2)).collect();
    let vmax = var.iter().copied().fold(0.0, f64::max);
    let w: Vec<f64> = if vmax == 0.0 {
        vec![1.0; points.len()]
    } else {
        var.iter().map(|v| 1.0 / v.max(vmax * 1e-12)).collect()
    };
    let (sw, swx, swxx) = (0..x.len()).fold((0.0, 0.0, 0.0), |a, i| (a.0 + w[i], a.1 + w[i] * x[i], a.2 + w[i] * x[i] * x[i]));
    let (swy, swxy) = (0..x.len()).fold((0.0, 0.0), |a, i| (a.0 + w[i] * y[i], a.1 + w[i] * x[i] * y[i]));
    let det = sw * swxx - swx * swx;
    if !(det.abs() > 1e-14 * sw * swxx) {
        return Err(Error::DegenerateDesign("singular design".into()));
    }
    let p_hat = (swxx * swy - swx * swxy) / det;
    let slope = (sw * swxy - swx * swy) / det;
    let dof = (points.len() - 2) as f64;
    let chi2: f64 = (0..x.len()).map(|i| w[i] * (y[i] - p_hat - slope * x[i]).powi(2)).sum();
    let reduced_chi2 = chi2 / dof;
    let stderr = if vmax == 0.0 {
        // unweighted fit: residual-based error only
        (reduced_chi2 * swxx / det).sqrt()
    } else {
        (swxx / det).sqrt() * reduced_chi2.max(1.0).sqrt()
    };
    let half = 1.96 * stderr;
    Ok(Extrapolation { p_hat, slope, stderr, lower: p_hat - half, upper: p_hat + half, reduced_chi2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperadditivityReport {
    pub beta: Beta,
    pub s: f64,
    pub t: f64,
    pub a_s: FreeEnergyPoint,
    pub a_t: FreeEnergyPoint,
    pub a_st: FreeEnergyPoint,
    /// `a(s + t) - a(s) - a(t)`.
    pub slack: f64,
    pub stderr: f64,
    /// `-(s + t)^delta`.
    pub bound: f64,
    pub holds: bool,
}

/// Estimates `a(s)`, `a(t)` and `a(s + t)` on independent environments.
pub fn superadditivity_check(beta: Beta, s: f64, t: f64, run: &EnvRun) -> Result<SuperadditivityReport> {
    if s < 2.0 || t < 2.0 {
        return invalid("superadditivity needs s, t >= 2");
    }
    let one = |role: &str, h: f64| -> Result<FreeEnergyPoint> {
        free_energy_curve_role(beta, &[h], run, role).map(|mut v| v.remove(0))
    };
    let a_s = one("superadditivity-s", s)?;
    let a_t = one("superadditivity-t", t)?;
    let a_st = one("superadditivity-st", s + t)?;
    let slack = a_st.a_hat.value - a_s.a_hat.value - a_t.a_hat.value;
    let stderr = (a_s.a_hat.stderr.powi(2) + a_t.a_hat.stderr.powi(2) + a_st.a_hat.stderr.powi(2)).sqrt();
    let bound = -(s + t).powf(SUPERADDITIVITY_DELTA);
    Ok(SuperadditivityReport { beta, s, t, holds: slack + 3.0 * stderr >= bound, a_s, a_t, a_st, slack, stderr, bound })
}

/// Mean over environments of `|ln Z(omega) - ln Z(omega without [r, r+1])|`
/// with common path seeds.
pub fn stripe_influence(beta: Beta, t: f64, r: u64, run: &EnvRun) -> Result<(Estimate, usize)> {
    run.validate()?;
    if (r as f64) < 1.0 || r as f64 > t - 1.0 {
        return invalid(format!("stripe index {r} must lie in [1, t - 1]"));
    }
    let target = Target { beta, horizon: t, modified: true, truncated: true };
    let role = "stripe-influence";
    let diffs: Vec<Option<f64>> = (0..run.n_env as u64)
        .into_par_iter()
        .map(|i| {
            let env = run.environment(role, 0, i, t)?;
            let cut = env.without(r as f64, r as f64 + 1.0);
            if beta.is_zero() || cut.len() == env.len() {
                return Ok(Some(0.0));
            }
            let seed = run.path_seed(role, 0, i);
            let a = log_z_with_retries(&DisasterIndex::new(&env), &target, &run.config, seed);
            let b = log_z_with_retries(&DisasterIndex::new(&cut), &target, &run.config, seed);
            Ok(match (a, b) {
                (Censorable::Log(x), Censorable::Log(y)) => Some((x - y).abs()),
                _ => None,
            })
        })
        .collect::<Result<_>>()?;
    let total = diffs.len();
    let kept: Vec<f64> = diffs.into_iter().flatten().collect();
    let censored = total - kept.len();
    if censored as f64 > MAX_CENSORED_FRACTION * total as f64 || kept.is_empty() {
        return Err(Error::ParticleBudget { t, censored, total });
    }
    let mean = stats::mean(&kept);
    let stderr = if kept.len() > 1 { stats::std_err(&kept) } else { 0.0 };
    Ok((
        Estimate { value: mean, log_value: mean.ln(), stderr, n: kept.len(), seed: SeedProvenance::new(run.seed.master(), role), extinct: false },
        censored,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedMean {
    pub m: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub rate: f64,
    pub horizon: f64,
    pub plain: Vec<TruncatedMean>,
    /// First disaster restricted to times after 1.
    pub modified: Vec<TruncatedMean>,
    /// OLS slope of the plain means against `ln M`.
    pub slope: f64,
    /// Modified mean at the largest `M` over that at the smallest.
    pub modified_ratio: f64,
}

/// Truncated means of `F^{-1} 1{F < horizon}` for the first time `F` at
/// which a disaster lands within `r_1 / 2` of the origin; `F ~ Exp(1/2)`.
pub fn first_disaster_mechanism(m_grid: &[f64], horizon: f64, n_samples: usize, seed: SeedStream) -> Result<MechanismReport> {
    if m_grid.is_empty() || m_grid.iter().any(|&m| m < std::f64::consts::E) {
        return invalid("M values must be >= e");
    }
    if n_samples < 2 {
        return invalid("n_samples must be >= 2");
    }
    let rate = 0.5;
    let exp = Exp::new(rate).expect("positive rate");
    let mut rng = seed.rng();
    let first: Vec<f64> = (0..n_samples).map(|_| exp.sample(&mut rng)).collect();
    let table = |shift: f64| -> Vec<TruncatedMean> {
        m_grid
            .iter()
            .map(|&m| {
                let v: Vec<f64> = first
                    .iter()
                    .map(|&f| {
                        let f = f + shift;
                        if f < horizon {
                            (1.0 / f).min(m)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                TruncatedMean { m, mean: stats::mean(&v), stderr: stats::std_err(&v) }
            })
            .collect()
    };
    let plain = table(0.0);
    let modified = table(1.0);
    let lx: Vec<f64> = m_grid.iter().map(|m| m.ln()).collect();
    let ly: Vec<f64> = plain.iter().map(|p| p.mean).collect();
    let slope = if m_grid.len() >= 2 { stats::ols(&lx, &ly).map_or(f64::NAN, |(_, b)| b) } else { f64::NAN };
    let modified_ratio = modified.last().expect("nonempty").mean / modified[0].mean;
    Ok(MechanismReport { rate, horizon, plain, modified, slope, modified_ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub t: f64,
    pub sd: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub rows: Vec<ConcentrationRow>,
    /// Slope of `ln sd` against `ln t`; `None` when some sd vanishes.
    pub slope: Option<f64>,
}

/// Fluctuation scaling of `ln Z` from already computed curve points.
pub fn concentration_from_points(points: &[FreeEnergyPoint], seed: SeedStream) -> ConcentrationReport {
    let rows: Vec<ConcentrationRow> = points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let sd = if p.log_estimates.len() > 1 { stats::std_dev(&p.log_estimates) } else { 0.0 };
            let (lo, hi) = stats::bootstrap_sd_ci(&p.log_estimates, 1000, 0.95, &mut seed.tag("bootstrap").index(k as u64).rng());
            ConcentrationRow { t: p.t, sd, ci_lower: lo, ci_upper: hi, n: p.log_estimates.len() }
        })
        .collect();
    let slope = if rows.len() >= 2 && rows.iter().all(|r| r.sd > 0.0) {
        let lx: Vec<f64> = rows.iter().map(|r| r.t.ln()).collect();
        let ly: Vec<f64> = rows.iter().map(|r| r.sd.ln()).collect();
        stats::ols(&lx, &ly).map(|(_, b)| b)
    } else {
        None
    };
    ConcentrationReport { rows, slope }
}

pub fn concentration_scan(beta: Beta, t_grid: &[f64], run: &EnvRun) -> Result<(Vec<FreeEnergyPoint>, ConcentrationReport)> {
    if run.n_env < 50 {
        return invalid("concentration scan needs n_env >= 50");
    }
    let points = free_energy_curve_role(beta, t_grid, run, "concentration")?;
    let report = concentration_from_points(&points, run.seed.tag("concentration"));
    Ok((points, report))
}

/// Mean of `ln Z_{2N} - ln Z_N` over environments: the plug-in log bias at
/// `N` is about twice this when the bias scales as `1/N`.
pub fn doubling_bias(beta: Beta, t: f64, run: &EnvRun) -> Result<Estimate> {
    run.validate()?;
    let target = Target { beta, horizon: t, modified: true, truncated: true };
    let role = "doubling";
    let diffs: Vec<Option<f64>> = (0..run.n_env as u64)
        .into_par_iter()
        .map(|i| {
            let env = run.environment(role, 0, i, t)?;
            let index = DisasterIndex::new(&env);
            let seed = run.path_seed(role, 0, i);
            let a = log_z_with_retries(&index, &target, &run.config, seed.tag("n"));
            let b = log_z_with_retries(&index, &target, &run.config.scaled(2), seed.tag("2n"));
            Ok(match (a, b) {
                (Censorable::Log(x), Censorable::Log(y)) => Some(y - x),
                _ => None,
            })
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = diffs.into_iter().flatten().collect();
    if kept.len() < 2 {
        return Err(Error::ParticleBudget { t, censored: run.n_env - kept.len(), total: run.n_env });
    }
    let mean = stats::mean(&kept);
    Ok(Estimate {
        value: mean,
        log_value: f64::NAN,
        stderr: stats::std_err(&kept),
        n: kept.len(),
        seed: SeedProvenance::new(run.seed.master(), role),
        extinct: false,
    })
}
