//! The renewal-based survival strategy in a one-dimensional tube.
//!
//! The path lives in `J6 = [-3, 3]`; only disasters in `J7 = [-7/2, 7/2]` can
//! reach it. `J5 = [-5/2, 5/2]` is cut into the five unit bands
//! `J1(x) = x + [-1/2, 1/2]`, `x = -2..=2`. At every disaster time the path is
//! parked in a band that neither that disaster nor the next one contaminates,
//! except across the gap before each renewal, where it stays put.

mod guided;
mod orderstat;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{invalid, Error, Result};
use crate::estimators::{combine_islands, Estimate};
use crate::rng::{SeedProvenance, SeedStream};

pub use guided::log_bridge_stay;
use guided::{run_guided, Plan, Step};
pub use orderstat::{orderstat_identities, rho_pmf, OrderStatReport, RenyiRow};

pub const J5: f64 = 2.5;
pub const J6: f64 = 3.0;
pub const J7: f64 = 3.5;
/// Indices of the unit bands covering `J5`.
pub const BAND_INDICES: [i32; 5] = [-2, -1, 0, 1, 2];
/// Spacing of the plain checkpoints added between disaster times.
pub const CHECKPOINT_SPACING: f64 = 0.1;

const ISLANDS: usize = 8;
const ESS_THRESHOLD: f64 = 0.5;

/// The closed band `J1(x)`.
pub fn band(x: i32) -> (f64, f64) {
    (f64::from(x) - 0.5, f64::from(x) + 0.5)
}

/// Bands meeting the kill zone `[d - 1/2, d + 1/2]`; closed intervals, so
/// tangency counts.
pub fn contaminated_intervals(d: f64) -> Result<Vec<i32>> {
    if !(d.abs() <= J7) {
        return invalid(format!("disaster position {d} outside [-3.5, 3.5]"));
    }
    Ok(BAND_INDICES.iter().copied().filter(|&x| (f64::from(x) - d).abs() <= 1.0).collect())
}

/// `s(j)`: the smallest band index contaminated by neither disaster `j` nor `j + 1`.
pub fn safe_sequence(positions: &[f64]) -> Result<Vec<i32>> {
    let bad: Vec<Vec<i32>> = positions.iter().map(|&d| contaminated_intervals(d)).collect::<Result<_>>()?;
    (0..positions.len())
        .map(|j| {
            BAND_INDICES
                .iter()
                .copied()
                .find(|x| !bad[j].contains(x) && !bad.get(j + 1).is_some_and(|b| b.contains(x)))
                // only reachable when two tangencies exclude all five bands
                .ok_or_else(|| Error::InvalidArgument(format!("no safe band at disaster {j}")))
        })
        .collect()
}

/// Renewal indices `rho_1 < rho_2 < ...` of `deltas = (D_0, D_1, ...)`, where
/// `rho_{i+1}` is the first `j > rho_i + 1` with `D_j > D_{j-1}` and `rho_0 = 0`.
pub fn renewal_times(deltas: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rho = 0usize;
    loop {
        match (rho + 2..deltas.len()).find(|&j| deltas[j] > deltas[j - 1]) {
            Some(j) => {
                out.push(j);
                rho = j;
            }
            None => return out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTrace {
    pub horizon: f64,
    /// Disasters in `[0, t) x J7`.
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub deltas: Vec<f64>,
    pub safe: Vec<i32>,
    /// `rho_1, rho_2, ...` (`rho_0 = 0` implicit).
    pub renewals: Vec<usize>,
    /// `R_0, R_1, ...`.
    pub renewal_times: Vec<f64>,
    /// `N(L_t)`.
    pub n_count: usize,
    /// `M(L_t)`.
    pub m_count: usize,
    pub first: f64,
    pub last: f64,
    pub sigma: usize,
    pub u: f64,
}

impl StrategyTrace {
    pub fn new(env: &Environment, t: f64) -> Result<Self> {
        if env.dimension() != 1 {
            return invalid("the tube strategy is one-dimensional");
        }
        if t > env.window().t_max() {
            return Err(Error::WindowTooSmall { horizon: t, t_max: env.window().t_max() });
        }
        let (times, positions): (Vec<f64>, Vec<f64>) = env
            .disasters()
            .iter()
            .filter(|d| d.time < t && d.position[0].abs() <= J7)
            .map(|d| (d.time, d.position[0]))
            .unzip();
        let deltas: Vec<f64> = times.iter().enumerate().map(|(i, &s)| if i == 0 { s } else { s - times[i - 1] }).collect();
        let safe = safe_sequence(&positions)?;
        let renewals = renewal_times(&deltas);
        let n = times.len();
        let (first, last) = if n == 0 { (t, 0.0) } else { (times[0], times[n - 1]) };
        let renewal_times: Vec<f64> = std::iter::once(0).chain(renewals.iter().copied()).filter(|_| n > 0).map(|j| times[j]).collect();
        let n_count = n.saturating_sub(1);
        let m_count = renewals.len();
        let u = if n == 0 { 0.0 } else { last - renewal_times[m_count] };
        Ok(Self { horizon: t, times, positions, deltas, safe, renewals, renewal_times, n_count, m_count, first, last, sigma: n_count - m_count, u })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Required band at each disaster and the stay windows `(from, to, band)`
    /// of the strategy event.
    fn requirements(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64, (f64, f64))>) {
        let n = self.len();
        let mut req = vec![(0.0, 0.0); n];
        let mut stays = Vec::new();
        if n == 0 {
            return (req, stays);
        }
        let s = |j: usize| band(self.safe[j]);
        let last = n - 1;
        req[0] = s(0);
        let mut a = 0usize;
        for &b in &self.renewals {
            for j in a..=b - 2 {
                req[j] = s(j);
            }
            req[b - 1] = s(b - 2);
            stays.push((self.times[b - 2], self.times[b - 1], s(b - 2)));
            req[b] = s(b);
            a = b;
        }
        if a < last {
            for j in a..last {
                req[j] = s(j);
            }
            req[last] = s(last - 1);
            stays.push((self.times[last - 1], self.times[last], s(last - 1)));
        }
        (req, stays)
    }

    fn grid(&self) -> Vec<(f64, Option<usize>)> {
        let t = self.horizon;
        let mut g: Vec<(f64, Option<usize>)> = (1..)
            .map(|k| k as f64 * CHECKPOINT_SPACING)
            .take_while(|&s| s < t)
            .filter(|s| self.times.binary_search_by(|x| x.total_cmp(s)).is_err())
            .map(|s| (s, None))
            .collect();
        g.extend(self.times.iter().enumerate().filter(|(_, &s)| s > 0.0).map(|(j, &s)| (s, Some(j))));
        g.push((t, None));
        g.sort_by(|a, b| a.0.total_cmp(&b.0));
        g
    }

    /// The strategy event as a guided plan; `audit` records disaster positions.
    fn strategy_plan(&self, x: f64, y: Option<f64>) -> Plan {
        let (req, stays) = self.requirements();
        let j6 = (-J6, J6);
        let mut steps = Vec::new();
        let mut from = 0.0;
        for (time, dis) in self.grid() {
            let confine = stays.iter().find(|w| from >= w.0 && time <= w.1).map_or(j6, |w| w.2);
            let target = match dis {
                Some(j) => vec![req[j]],
                None => vec![confine],
            };
            steps.push(Step { time, confine, target, disaster: dis.map(|j| self.positions[j]) });
            from = time;
        }
        Plan { start: x, steps, end: y }
    }

    /// Survival in the tube: avoid every kill zone, stay in `J6`.
    fn tube_plan(&self, x: f64, y: Option<f64>) -> Plan {
        let j6 = (-J6, J6);
        let steps = self
            .grid()
            .into_iter()
            .map(|(time, dis)| {
                let target = match dis {
                    Some(j) => {
                        let d = self.positions[j];
                        [(-J6, (d - 0.5).min(J6)), ((d + 0.5).max(-J6), J6)].into_iter().filter(|p| p.1 > p.0).collect()
                    }
                    None => vec![j6],
                };
                Step { time, confine: j6, target, disaster: None }
            })
            .collect();
        Plan { start: x, steps, end: y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEstimate {
    /// `P(S_t)`.
    pub strategy: Estimate,
    /// `P(tau_inf >= t, B stays in J6)` on common random numbers.
    pub tube: Estimate,
    pub trace: StrategyTrace,
}

/// A disaster at time 0 inside the start's kill zone, or with no admissible
/// position, makes a plan impossible; such plans report probability 0.
fn run_plan(plan: &Plan, n_paths: usize, seed: SeedStream, tag: &str) -> Result<Estimate> {
    let per = (n_paths / ISLANDS).max(2);
    let results: Vec<_> = (0..ISLANDS as u64)
        .into_par_iter()
        .map(|k| run_guided(plan, per, ESS_THRESHOLD, &mut seed.index(k).rng()))
        .collect();
    let unsound: usize = results.iter().map(|r| r.unsound).sum();
    if unsound > 0 {
        return Err(Error::StrategyUnsound(unsound));
    }
    let logs: Vec<f64> = results.iter().map(|r| r.log_z).collect();
    Ok(combine_islands(&logs, per * ISLANDS, SeedProvenance::new(seed.master(), tag)))
}

/// Estimates `P(S_t)` and the tube survival probability for a path from `x`,
/// pinned to `y` at `t` when given.
pub fn simulate_strategy(env: &Environment, t: f64, x: f64, y: Option<f64>, n_paths: usize, seed: SeedStream) -> Result<StrategyEstimate> {
    if !(x.abs() <= J5) || y.is_some_and(|y| !(y.abs() <= J5)) {
        return invalid("endpoints must lie in [-5/2, 5/2]");
    }
    if !(t > 0.0) {
        return invalid("horizon must be > 0");
    }
    if n_paths < 2 * ISLANDS {
        return invalid(format!("n_paths must be >= {}", 2 * ISLANDS));
    }
    let trace = StrategyTrace::new(env, t)?;
    if trace.times.first() == Some(&0.0) {
        return invalid("disaster at time 0 in the tube");
    }
    let strategy = run_plan(&trace.strategy_plan(x, y), n_paths, seed, "strategy")?;
    let tube = run_plan(&trace.tube_plan(x, y), n_paths, seed, "tube")?;
    Ok(StrategyEstimate { strategy, tube, trace })
}

/// `P_x(B(s) in [a, b], B stays in J6 on [0, s])` by the eigenfunction
/// expansion of the killed heat kernel.
pub fn killed_mass(x: f64, a: f64, b: f64, s: f64) -> f64 {
    let w = 2.0 * J6;
    let (xa, aa, ba) = (x + J6, a.max(-J6) + J6, b.min(J6) + J6);
    if !(ba > aa) || !(xa > 0.0 && xa < w) {
        return 0.0;
    }
    let mut sum = 0.0;
    for n in 1..100_000u32 {
        let k = f64::from(n) * std::f64::consts::PI / w;
        let decay = (-0.5 * k * k * s).exp();
        if decay < 1e-18 {
            break;
        }
        let integral = ((k * aa).cos() - (k * ba).cos()) / k;
        sum += (2.0 / w) * (k * xa).sin() * decay * integral;
    }
    sum.clamp(0.0, 1.0)
}

pub fn confinement_probability(x: f64, s: f64) -> f64 {
    killed_mass(x, -J6, J6, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub s: f64,
    pub p: f64,
    pub stderr: f64,
    /// `-ln p` divided by `1/s + s` (distinct bands) or `s` (same band).
    pub c_lower: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub x: i32,
    pub y: i32,
    pub rows: Vec<ProbeRow>,
    /// Smallest `C` valid across the grid with 3 sigma slack.
    pub c: f64,
}

/// Band-to-band confined transition probability from the centre of `J1(x)`
/// into `J1(y)` over each time in `s_grid`, and the fitted constant.
pub fn confinement_probe(s_grid: &[f64], x: i32, y: i32, n: usize, seed: SeedStream) -> Result<ProbeReport> {
    if !BAND_INDICES.contains(&x) || !BAND_INDICES.contains(&y) {
        return invalid("bands must be in -2..=2");
    }
    if s_grid.is_empty() || s_grid.iter().any(|&s| !(s > 0.0)) {
        return invalid("probe times must be > 0");
    }
    let rows = s_grid
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let dt = CHECKPOINT_SPACING.min(s / 20.0);
            let m = (s / dt).ceil() as usize;
            let steps = (1..=m)
                .map(|i| {
                    let time = if i == m { s } else { i as f64 * dt };
                    let target = if i == m { vec![band(y)] } else { vec![(-J6, J6)] };
                    Step { time, confine: (-J6, J6), target, disaster: None }
                })
                .collect();
            let plan = Plan { start: f64::from(x), steps, end: None };
            let est = run_plan(&plan, n, seed.index(k as u64), "confinement")?;
            let denom = if x == y { s } else { 1.0 / s + s };
            let p_lo = (est.value - 3.0 * est.stderr).max(est.value * 1e-3);
            Ok(ProbeRow { s, p: est.value, stderr: est.stderr, c_lower: -p_lo.ln() / denom })
        })
        .collect::<Result<Vec<_>>>()?;
    let c = rows.iter().map(|r| r.c_lower).fold(0.0, f64::max);
    Ok(ProbeReport { x, y, rows, c })
}
