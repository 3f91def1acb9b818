//! Dispersion `M^p` of endpoint measures and the midpoint measure of the
//! polymer conditioned to survive with a time stripe removed.
//!
//! `M^p(nu) = sup_{x,y} min_{i<=p} nu(J5_x(i) x J5_y(i))` with
//! `J5_x(i) = x + 7i + [-5/2, 5/2]`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{DisasterIndex, Environment};
use crate::error::{invalid, Error, Result};
use crate::estimators::{EnvRun, MAX_CENSORED_FRACTION, MAX_ESCALATIONS};
use crate::path_survival::Beta;
use crate::rng::SeedStream;
use crate::smc::{run_island_from, run_islands, RecordTimes, SmcConfig, Target};
use crate::stats;

/// Box half-width.
pub const HALF_WIDTH: f64 = 2.5;
/// Shift between consecutive boxes.
pub const SHIFT: f64 = 7.0;
/// Default offset grid step.
pub const DEFAULT_GRID_STEP: f64 = 0.5;
/// Spacing of the grid on which backward survival is estimated.
pub const BACKWARD_STEP: f64 = 0.1;
/// Largest number of prefix-sum cells a single evaluation may allocate.
const MAX_CELLS: usize = 50_000_000;

/// Weighted atoms `((x, y), w)`, weights normalized to sum 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure2D {
    points: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure2D {
    pub fn new(points: Vec<(f64, f64)>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return invalid("points and weights differ in length");
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return invalid("measure atoms must be finite");
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return invalid("measure weights must be finite and >= 0");
        }
        let total: f64 = weights.iter().sum();
        if points.is_empty() || total <= 0.0 {
            return Err(Error::EmptyMeasure);
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { points, weights })
    }

    /// Equal weights.
    pub fn uniform(points: Vec<(f64, f64)>) -> Result<Self> {
        let w = vec![1.0; points.len()];
        Self::new(points, w)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `1 / sum w^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted mean of each coordinate.
    pub fn mean(&self) -> (f64, f64) {
        self.points.iter().zip(&self.weights).fold((0.0, 0.0), |(a, b), ((x, y), w)| (a + w * x, b + w * y))
    }

    pub fn shifted(&self, a: f64, b: f64) -> Self {
        Self { points: self.points.iter().map(|(x, y)| (x + a, y + b)).collect(), weights: self.weights.clone() }
    }

    /// `x,y,w` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,w")?;
        for ((x, y), w) in self.points.iter().zip(&self.weights) {
            writeln!(out, "{x},{y},{w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub p: usize,
    /// Best value over the offset grid; never above the true `M^p`.
    pub value: f64,
    pub x_star: f64,
    pub y_star: f64,
    pub grid_step: f64,
    /// The true `M^p` lies in `[value, value + loss_bound]`.
    pub loss_bound: f64,
}

/// 2-d prefix sums of the measure binned into cells `[-5/2 + j h, -5/2 + (j+1) h)`.
struct CellSums {
    x0: i64,
    y0: i64,
    nx: i64,
    ny: i64,
    sums: Vec<f64>,
}

impl CellSums {
    fn new(measure: &EmpiricalMeasure2D, m: i64) -> Result<Self> {
        let cell = |v: f64| ((v + HALF_WIDTH) * m as f64).floor() as i64;
        let cells: Vec<(i64, i64)> = measure.points.iter().map(|&(x, y)| (cell(x), cell(y))).collect();
        let x0 = cells.iter().map(|c| c.0).min().unwrap_or(0);
        let x1 = cells.iter().map(|c| c.0).max().unwrap_or(0);
        let y0 = cells.iter().map(|c| c.1).min().unwrap_or(0);
        let y1 = cells.iter().map(|c| c.1).max().unwrap_or(0);
        let (nx, ny) = (x1 - x0 + 1, y1 - y0 + 1);
        let size = (nx as u128 + 1) * (ny as u128 + 1);
        if size > MAX_CELLS as u128 {
            return invalid(format!("support hull needs {size} cells at this grid step; use a coarser step"));
        }
        let stride = (ny + 1) as usize;
        let mut sums = vec![0.0; (nx as usize + 1) * stride];
        for (&(cx, cy), w) in cells.iter().zip(&measure.weights) {
            sums[(cx - x0 + 1) as usize * stride + (cy - y0 + 1) as usize] += w;
        }
        for a in 1..=nx as usize {
            for b in 1..=ny as usize {
                sums[a * stride + b] += sums[(a - 1) * stride + b] + sums[a * stride + b - 1] - sums[(a - 1) * stride + b - 1];
            }
        }
        Ok(Self { x0, y0, nx, ny, sums })
    }

    /// Mass of absolute cells `[xa, xb) x [ya, yb)`.
    fn rect(&self, xa: i64, xb: i64, ya: i64, yb: i64) -> f64 {
        let cx = |v: i64| (v - self.x0).clamp(0, self.nx) as usize;
        let cy = |v: i64| (v - self.y0).clamp(0, self.ny) as usize;
        let (a0, a1, b0, b1) = (cx(xa), cx(xb), cy(ya), cy(yb));
        if a0 >= a1 || b0 >= b1 {
            return 0.0;
        }
        let s = (self.ny + 1) as usize;
        (self.sums[a1 * s + b1] - self.sums[a0 * s + b1] - self.sums[a1 * s + b0] + self.sums[a0 * s + b0]).max(0.0)
    }
}

/// `M^p` over offsets `(k h, l h)`.
///
/// `1 / grid_step` must be an integer so that every box edge falls on a cell
/// edge; grid values are then exact masses of half-open boxes.
pub fn dispersion(measure: &EmpiricalMeasure2D, p: usize, grid_step: f64) -> Result<DispersionReport> {
    if measure.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return invalid("grid_step must lie in (0, 1/2]");
    }
    let inv = 1.0 / grid_step;
    let m = inv.round() as i64;
    if (inv - m as f64).abs() > 1e-9 * inv {
        return invalid("1 / grid_step must be an integer");
    }
    let cells = CellSums::new(measure, m)?;
    let width = 5 * m;
    let shift = 7 * m;
    let min_over = |kx: i64, ky: i64, extra: i64| -> f64 {
        let mut v = f64::INFINITY;
        for i in 0..=p as i64 {
            let (ax, ay) = (kx + shift * i, ky + shift * i);
            v = v.min(cells.rect(ax, ax + width + extra, ay, ay + width + extra));
            if v == 0.0 {
                break;
            }
        }
        v
    };
    let (mut best, mut arg, mut upper) = (-1.0, (0, 0), 0.0f64);
    for kx in cells.x0 - width..=cells.x0 + cells.nx - 1 {
        for ky in cells.y0 - width..=cells.y0 + cells.ny - 1 {
            let v = min_over(kx, ky, 0);
            if v > best {
                best = v;
                arg = (kx, ky);
            }
            upper = upper.max(min_over(kx, ky, 1));
        }
    }
    Ok(DispersionReport {
        p,
        value: best,
        x_star: arg.0 as f64 * grid_step,
        y_star: arg.1 as f64 * grid_step,
        grid_step,
        loss_bound: (upper - best).max(0.0),
    })
}

/// Particle approximation of the law of `(B(r), B(s))` under the polymer
/// with disasters in `[r, s]` removed, on `tau^1 >= t` and `A_t`.
#[derive(Debug, Clone)]
pub struct MidpointSample {
    pub measure: EmpiricalMeasure2D,
    pub log_z: f64,
    /// Distinct time-`r` ancestors summed over islands. Small values mean
    /// the genealogy collapsed and the measure is carried by few lineages.
    pub distinct_ancestors: usize,
    /// Particles used in the successful attempt.
    pub n_particles: usize,
}

fn validate_times(env: &Environment, r: f64, s: f64, t: f64) -> Result<()> {
    if !(1.0 <= r && r <= s && s <= t) {
        return invalid("need 1 <= r <= s <= t");
    }
    if t > env.window().t_max() {
        return Err(Error::WindowTooSmall { horizon: t, t_max: env.window().t_max() });
    }
    Ok(())
}

fn midpoint_attempt(index: &DisasterIndex, target: &Target, r: f64, s: f64, config: &SmcConfig, seed: SeedStream) -> Option<MidpointSample> {
    let runs = run_islands(index, target, config, Some(RecordTimes { r, s }), seed);
    let top = runs.iter().map(|x| x.log_z).fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return None;
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut mass = 0.0;
    for run in &runs {
        let z = (run.log_z - top).exp();
        mass += z;
        for &(x, y, w) in &run.records {
            points.push((x, y));
            weights.push(w * z);
        }
    }
    let measure = EmpiricalMeasure2D::new(points, weights).ok()?;
    Some(MidpointSample {
        measure,
        log_z: top + (mass / runs.len() as f64).ln(),
        distinct_ancestors: runs.iter().map(|x| x.distinct_ancestors).sum(),
        n_particles: config.per_island() * config.islands,
    })
}

/// Samples the midpoint measure; `r = s` is allowed and gives a measure on the diagonal.
///
/// Extinction is retried with four times the particles, as for free-energy estimates.
pub fn sample_midpoint_measure(
    env: &Environment,
    beta: Beta,
    r: f64,
    s: f64,
    t: f64,
    config: &SmcConfig,
    seed: SeedStream,
) -> Result<MidpointSample> {
    validate_times(env, r, s, t)?;
    config.validate()?;
    let index = DisasterIndex::new(&env.without(r, s));
    sample_with_retries(&index, beta, r, s, t, config, seed).ok_or(Error::ParticleBudget { t, censored: 1, total: 1 })
}

fn sample_with_retries(index: &DisasterIndex, beta: Beta, r: f64, s: f64, t: f64, config: &SmcConfig, seed: SeedStream) -> Option<MidpointSample> {
    let target = Target { beta, horizon: t, modified: true, truncated: true };
    let mut cfg = *config;
    for attempt in 0..=MAX_ESCALATIONS {
        if let Some(sample) = midpoint_attempt(index, &target, r, s, &cfg, seed.tag("attempt").index(u64::from(attempt))) {
            return Some(sample);
        }
        cfg = cfg.scaled(4);
    }
    None
}

fn forward_filter(index: &DisasterIndex, target: &Target, r: f64, config: &SmcConfig, seed: SeedStream) -> Option<(Vec<(f64, f64)>, f64)> {
    let n = config.per_island();
    let record = Some(RecordTimes { r, s: r });
    let runs: Vec<_> = (0..config.islands as u64)
        .into_par_iter()
        .map(|k| run_island_from(index, target, 0.0, &[0.0], r, n, config, record, &mut seed.index(k).rng()))
        .collect();
    let top = runs.iter().map(|x| x.log_z_filter).fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return None;
    }
    let mut mass = 0.0;
    let mut particles = Vec::new();
    for run in &runs {
        let z = (run.log_z_filter - top).exp();
        mass += z;
        particles.extend(run.filter.iter().map(|&(x, w)| (x, w * z)));
    }
    Some((particles, top + (mass / runs.len() as f64).ln()))
}

/// `ln h(x)` at `x` from grid values `ln h(lo + j step)`, interpolated
/// linearly in `ln h` where both neighbours survive and in `h` otherwise.
fn interpolate_log(grid: &[f64], lo: f64, step: f64, x: f64) -> f64 {
    let u = ((x - lo) / step).clamp(0.0, (grid.len() - 1) as f64);
    let j = (u.floor() as usize).min(grid.len().saturating_sub(2));
    if grid.len() == 1 {
        return grid[0];
    }
    let f = u - j as f64;
    let (a, b) = (grid[j], grid[j + 1]);
    if a.is_finite() && b.is_finite() {
        a + f * (b - a)
    } else {
        ((1.0 - f) * a.exp() + f * b.exp()).ln()
    }
}

/// Diagonal midpoint measure (`r = s`) by two filters: the forward particle
/// filter at time `r`, reweighted by backward survival `h(x)` from `(r, x)`
/// to `t` estimated on a grid of step [`BACKWARD_STEP`].
///
/// Unlike [`sample_midpoint_measure`] every forward particle keeps its own
/// lineage, so the measure does not collapse onto the few time-`r` ancestors
/// that survive resampling after `r`. One dimension only.
pub fn sample_diagonal_measure(env: &Environment, beta: Beta, r: f64, t: f64, config: &SmcConfig, seed: SeedStream) -> Result<MidpointSample> {
    validate_times(env, r, r, t)?;
    config.validate()?;
    if env.dimension() != 1 {
        return invalid("the diagonal midpoint measure is one-dimensional");
    }
    let index = DisasterIndex::new(&env.without(r, r));
    diagonal_with_retries(&index, beta, r, t, config, seed).ok_or(Error::ParticleBudget { t, censored: 1, total: 1 })
}

fn diagonal_with_retries(index: &DisasterIndex, beta: Beta, r: f64, t: f64, config: &SmcConfig, seed: SeedStream) -> Option<MidpointSample> {
    let target = Target { beta, horizon: t, modified: true, truncated: true };
    let mut cfg = *config;
    for attempt in 0..=MAX_ESCALATIONS {
        if let Some(sample) = diagonal_attempt(index, &target, r, &cfg, seed.tag("attempt").index(u64::from(attempt))) {
            return Some(sample);
        }
        cfg = cfg.scaled(4);
    }
    None
}

fn diagonal_attempt(index: &DisasterIndex, target: &Target, r: f64, config: &SmcConfig, seed: SeedStream) -> Option<MidpointSample> {
    let (particles, log_forward) = forward_filter(index, target, r, config, seed.tag("forward"))?;
    let lo = (particles.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) / BACKWARD_STEP).floor() * BACKWARD_STEP;
    let hi = particles.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let cells = ((hi - lo) / BACKWARD_STEP).ceil() as usize + 1;
    let n = config.per_island();
    let backward = seed.tag("backward");
    let grid: Vec<f64> = (0..cells as u64)
        .into_par_iter()
        .map(|j| {
            let x = lo + j as f64 * BACKWARD_STEP;
            run_island_from(index, target, r, &[x], target.horizon, n, config, None, &mut backward.index(j).rng()).log_z
        })
        .collect();
    let logs: Vec<f64> = particles.iter().map(|&(x, w)| w.ln() + interpolate_log(&grid, lo, BACKWARD_STEP, x)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return None;
    }
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let mass: f64 = weights.iter().sum();
    let measure = EmpiricalMeasure2D::new(particles.iter().map(|p| (p.0, p.0)).collect(), weights).ok()?;
    Some(MidpointSample {
        distinct_ancestors: measure.weights().iter().filter(|w| **w > 0.0).count(),
        measure,
        log_z: log_forward + top + mass.ln() - particles.iter().map(|p| p.1).sum::<f64>().ln(),
        n_particles: n * config.islands,
    })
}

/// Summary of `|ln M^p|` over environments at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub t: f64,
    pub p: usize,
    /// Mean of `|ln M^p|`; infinite when some environment gave `M^p = 0`.
    pub mean_abs_log: f64,
    pub stderr: f64,
    /// Environments whose grid value of `M^p` was zero.
    pub zeros: usize,
    /// Per-environment `M^p`, censored environments omitted.
    pub values: Vec<f64>,
}

/// Lower envelope of `M^0` at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorRow {
    pub t: f64,
    pub min_m0: f64,
    pub min_m0_t4: f64,
    pub min_m0_t2: f64,
    pub mean_distinct_ancestors: f64,
    pub censored: usize,
    pub n_env: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionScan {
    pub beta: Beta,
    pub grid_step: f64,
    pub rows: Vec<ScanRow>,
    pub floors: Vec<FloorRow>,
    /// Slope of the mean of `ln M^0` against `ln t`, to set beside the
    /// competing floor exponents -4 and -2.
    pub m0_exponent: Option<f64>,
    /// Slope of `ln E|ln M^2|` against `ln ln t`: the polylog degree.
    pub polylog_degree: Option<f64>,
}

impl DispersionScan {
    /// `1e-2 * min_t min_env M^0 t^4`; meant to be taken from a `beta = 0` scan.
    pub fn floor_threshold(&self) -> f64 {
        1e-2 * self.floors.iter().map(|f| f.min_m0_t4).fold(f64::INFINITY, f64::min)
    }

    pub fn row(&self, t: f64, p: usize) -> Option<&ScanRow> {
        self.rows.iter().find(|r| r.t == t && r.p == p)
    }
}

/// Per-environment `(M^0, M^2, distinct lineages)` at one horizon, `None` when censored.
fn scan_slot(beta: Beta, t: f64, slot: u64, run: &EnvRun, grid_step: f64) -> Result<Vec<Option<(f64, f64, usize)>>> {
    let r = t / 2.0;
    (0..run.n_env as u64)
        .into_par_iter()
        .map(|i| {
            let env = run.environment("dispersion", slot, i, t)?;
            validate_times(&env, r, r, t)?;
            let index = DisasterIndex::new(&env.without(r, r));
            let Some(sample) = diagonal_with_retries(&index, beta, r, t, &run.config, run.path_seed("dispersion", slot, i)) else {
                return Ok(None);
            };
            let m0 = dispersion(&sample.measure, 0, grid_step)?.value;
            let m2 = dispersion(&sample.measure, 2, grid_step)?.value;
            Ok(Some((m0, m2, sample.distinct_ancestors)))
        })
        .collect()
}

fn scan_row(t: f64, p: usize, values: Vec<f64>) -> ScanRow {
    let zeros = values.iter().filter(|v| **v <= 0.0).count();
    let logs: Vec<f64> = values.iter().map(|v| v.ln().abs()).collect();
    let (mean_abs_log, stderr) = if zeros > 0 {
        (f64::INFINITY, f64::NAN)
    } else {
        (stats::mean(&logs), if logs.len() > 1 { stats::std_err(&logs) } else { 0.0 })
    };
    ScanRow { t, p, mean_abs_log, stderr, zeros, values }
}

/// `E|ln M^p|` for `p in {0, 2}` with `r = s = t/2`, plus the `M^0` floor.
///
/// Measures come from [`sample_diagonal_measure`]; one dimension only.
///
/// Environments and path seeds follow [`EnvRun`] under the role `dispersion`,
/// so scans at different `beta` share environments.
pub fn dispersion_scan(beta: Beta, t_grid: &[f64], run: &EnvRun, grid_step: f64) -> Result<DispersionScan> {
    run.config.validate()?;
    if run.n_env == 0 {
        return invalid("n_env must be >= 1");
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("t grid must be non-empty and strictly increasing");
    }
    if run.dimension != 1 {
        return invalid("dispersion scan is one-dimensional");
    }
    if t_grid[0] < 2.0 {
        return invalid("dispersion scan needs t >= 2 so that r = t/2 >= 1");
    }
    let mut rows = Vec::new();
    let mut floors = Vec::new();
    for (slot, &t) in t_grid.iter().enumerate() {
        let results = scan_slot(beta, t, slot as u64, run, grid_step)?;
        let kept: Vec<(f64, f64, usize)> = results.iter().flatten().copied().collect();
        let censored = results.len() - kept.len();
        if censored as f64 > MAX_CENSORED_FRACTION * results.len() as f64 || kept.is_empty() {
            return Err(Error::ParticleBudget { t, censored, total: results.len() });
        }
        let m0: Vec<f64> = kept.iter().map(|k| k.0).collect();
        let m2: Vec<f64> = kept.iter().map(|k| k.1).collect();
        let min_m0 = m0.iter().copied().fold(f64::INFINITY, f64::min);
        floors.push(FloorRow {
            t,
            min_m0,
            min_m0_t4: min_m0 * t.powi(4),
            min_m0_t2: min_m0 * t.powi(2),
            mean_distinct_ancestors: kept.iter().map(|k| k.2 as f64).sum::<f64>() / kept.len() as f64,
            censored,
            n_env: results.len(),
        });
        rows.push(scan_row(t, 0, m0));
        rows.push(scan_row(t, 2, m2));
    }
    let ln_t: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let mean_ln_m0: Vec<f64> = rows.iter().filter(|r| r.p == 0).map(|r| stats::mean(&r.values.iter().map(|v| v.ln()).collect::<Vec<_>>())).collect();
    let m0_exponent = if mean_ln_m0.iter().all(|v| v.is_finite()) { stats::ols(&ln_t, &mean_ln_m0).map(|(_, b)| b) } else { None };
    let e2: Vec<f64> = rows.iter().filter(|r| r.p == 2).map(|r| r.mean_abs_log.ln()).collect();
    let lnln: Vec<f64> = ln_t.iter().map(|l| l.ln()).collect();
    let polylog_degree = if e2.iter().all(|v| v.is_finite()) && lnln.iter().all(|v| v.is_finite()) {
        stats::ols(&lnln, &e2).map(|(_, b)| b)
    } else {
        None
    };
    Ok(DispersionScan { beta, grid_step, rows, floors, m0_exponent, polylog_degree })
}
