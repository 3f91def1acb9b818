//! Slab-wise sequential Monte Carlo for survival probabilities.
//!
//! Particles are Brownian paths started at the origin. Over each gap of the
//! checkpoint grid a particle's weight is multiplied by its survival factor
//! `exp(-beta * hits)` (the indicator of no hit at `beta = inf`), times the
//! indicator of the truncation event when requested. The product of the mean
//! weights folded in at resampling epochs is an unbiased estimator of `Z`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{truncation_radius, DisasterIndex};
use crate::error::{invalid, Result};
use crate::path_survival::{truncation_gap_ok, Beta, GapWalker};
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Systematic,
    Multinomial,
}

impl std::str::FromStr for Resampling {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "systematic" => Ok(Self::Systematic),
            "multinomial" => Ok(Self::Multinomial),
            other => invalid(format!("unknown resampling scheme '{other}' (systematic, multinomial)")),
        }
    }
}

/// `n_particles` is the total over all islands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub islands: usize,
    pub slab: f64,
    pub ess_threshold: f64,
    pub resampling: Resampling,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self { n_particles: 10_000, islands: 8, slab: 1.0, ess_threshold: 0.5, resampling: Resampling::Systematic }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.islands == 0 {
            return invalid("islands must be >= 1");
        }
        if self.n_particles < 2 * self.islands {
            return invalid(format!("need at least 2 particles per island, got {} for {} islands", self.n_particles, self.islands));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return invalid("ess threshold must lie in (0, 1]");
        }
        if !(self.slab > 0.0 && self.slab.is_finite()) {
            return invalid("slab length must be > 0");
        }
        Ok(())
    }

    pub fn per_island(&self) -> usize {
        self.n_particles / self.islands
    }

    pub fn scaled(&self, factor: usize) -> Self {
        Self { n_particles: self.n_particles * factor, ..*self }
    }
}

/// What is being estimated: `P(tau >= horizon [, A_horizon])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub beta: Beta,
    pub horizon: f64,
    /// Ignore disasters before time 1.
    pub modified: bool,
    /// Restrict to the truncation event.
    pub truncated: bool,
}

impl Target {
    pub fn min_time(&self) -> f64 {
        if self.modified {
            1.0
        } else {
            0.0
        }
    }
}

/// Advances one path over `[t0, t1]` and returns its weight factor.
pub(crate) fn propagate(
    walker: &mut GapWalker<'_>,
    rng: &mut StreamRng,
    target: &Target,
    radius: f64,
    t0: f64,
    x: &[f64],
    t1: f64,
    end: &mut [f64],
) -> f64 {
    let hard = target.beta.is_infinite();
    walker.walk(rng, t0, x, t1, end, hard);
    let hits: u32 = walker.hits.iter().sum();
    let factor = target.beta.weight(hits);
    if factor == 0.0 || !target.truncated {
        return factor;
    }
    let d = x.len();
    let origin = [0.0f64; 8];
    let origin = &origin[..d];
    let mut prev_t = t0;
    let mut prev = x;
    for (i, &s) in walker.times.iter().enumerate() {
        let v = &walker.values[i * d..(i + 1) * d];
        if !truncation_gap_ok(prev, v, origin, s - prev_t, radius, rng) {
            return 0.0;
        }
        prev_t = s;
        prev = v;
    }
    if truncation_gap_ok(prev, end, origin, t1 - prev_t, radius, rng) {
        factor
    } else {
        0.0
    }
}

/// Ancestral positions `(B(r), B(s))` of first coordinates, recorded per particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordTimes {
    pub r: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct IslandResult {
    /// `-inf` on extinction.
    pub log_z: f64,
    /// `(B(r), B(s), normalized weight)` of final particles.
    pub records: Vec<(f64, f64, f64)>,
    /// Distinct time-`r` ancestors among final particles with positive weight.
    pub distinct_ancestors: usize,
    /// Filter at time `r`: `(B(r), weight normalized within the island)`.
    pub filter: Vec<(f64, f64)>,
    /// `ln` of the island estimate of survival up to time `r`.
    pub log_z_filter: f64,
}

fn resample(scheme: Resampling, w: &[f64], total: f64, rng: &mut StreamRng, out: &mut Vec<usize>) {
    let n = w.len();
    out.clear();
    match scheme {
        Resampling::Systematic => {
            let step = total / n as f64;
            let mut u = rng.random::<f64>() * step;
            let mut acc = 0.0;
            let mut j = 0;
            for _ in 0..n {
                while j + 1 < n && acc + w[j] <= u {
                    acc += w[j];
                    j += 1;
                }
                out.push(j);
                u += step;
            }
        }
        Resampling::Multinomial => {
            let mut cum = Vec::with_capacity(n);
            let mut acc = 0.0;
            for &x in w {
                acc += x;
                cum.push(acc);
            }
            for _ in 0..n {
                let u = rng.random::<f64>() * total;
                out.push(cum.partition_point(|c| *c <= u).min(n - 1));
            }
        }
    }
}

/// Gap endpoints after `start`: multiples of the slab, the horizon, and record times.
fn schedule(start: f64, horizon: f64, slab: f64, record: Option<RecordTimes>) -> Vec<(f64, bool)> {
    let mut ts: Vec<(f64, bool)> = Vec::new();
    let mut k = (start / slab).floor() as u64 + 1;
    while (k as f64) * slab < horizon {
        ts.push((k as f64 * slab, true));
        k += 1;
    }
    ts.push((horizon, true));
    if let Some(rec) = record {
        for s in [rec.r, rec.s] {
            if s > start && s < horizon && !ts.iter().any(|&(u, _)| u == s) {
                ts.push((s, false));
            }
        }
    }
    ts.sort_by(|a, b| a.0.total_cmp(&b.0));
    ts
}

pub(crate) fn run_island(
    index: &DisasterIndex,
    target: &Target,
    n: usize,
    config: &SmcConfig,
    record: Option<RecordTimes>,
    rng: &mut StreamRng,
) -> IslandResult {
    run_island_from(index, target, 0.0, &vec![0.0; index.dimension()], target.horizon, n, config, record, rng)
}

/// As [`run_island`] with every particle started at `(start, x0)` and the run
/// stopped at `stop <= target.horizon`. The truncation event stays centred at
/// the origin with the radius of the full horizon.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_island_from(
    index: &DisasterIndex,
    target: &Target,
    start: f64,
    x0: &[f64],
    stop: f64,
    n: usize,
    config: &SmcConfig,
    record: Option<RecordTimes>,
    rng: &mut StreamRng,
) -> IslandResult {
    let d = index.dimension();
    let radius = truncation_radius(target.horizon);
    let mut walker = GapWalker::new(index, target.horizon, target.min_time());
    let mut pos: Vec<f64> = x0.iter().copied().cycle().take(n * d).collect();
    let mut next = vec![0.0; n * d];
    let mut w = vec![1.0; n];
    let mut rec = vec![0.0; if record.is_some() { 2 * n } else { 0 }];
    let mut anc: Vec<u32> = vec![0; if record.is_some() { n } else { 0 }];
    let mut picks = Vec::with_capacity(n);
    let mut log_z = 0.0;
    let mut end = vec![0.0; d];
    let mut filter = Vec::new();
    let mut log_z_filter = f64::NEG_INFINITY;
    let extinct =
        IslandResult { log_z: f64::NEG_INFINITY, records: Vec::new(), distinct_ancestors: 0, filter: Vec::new(), log_z_filter };
    if stop <= start {
        return IslandResult { log_z: 0.0, records: Vec::new(), distinct_ancestors: 0, filter, log_z_filter: 0.0 };
    }
    let mut t0 = start;
    for (t1, epoch) in schedule(start, stop, config.slab, record) {
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let f = propagate(&mut walker, rng, target, radius, t0, &pos[i * d..(i + 1) * d], t1, &mut end);
            w[i] *= f;
            pos[i * d..(i + 1) * d].copy_from_slice(&end);
            if let Some(rt) = record {
                if t1 == rt.r {
                    rec[2 * i] = end[0];
                    anc[i] = i as u32;
                }
                if t1 == rt.s {
                    rec[2 * i + 1] = end[0];
                }
            }
        }
        t0 = t1;
        if record.is_some_and(|rt| rt.r == t1) {
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                log_z_filter = log_z + (total / n as f64).ln();
                filter = (0..n).filter(|&i| w[i] > 0.0).map(|i| (pos[i * d], w[i] / total)).collect();
            }
        }
        if !epoch {
            continue;
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return extinct;
        }
        if t1 == stop {
            break;
        }
        let sq: f64 = w.iter().map(|x| x * x).sum();
        let ess = total * total / sq;
        if ess < config.ess_threshold * n as f64 {
            log_z += (total / n as f64).ln();
            resample(config.resampling, &w, total, rng, &mut picks);
            for (k, &j) in picks.iter().enumerate() {
                next[k * d..(k + 1) * d].copy_from_slice(&pos[j * d..(j + 1) * d]);
            }
            std::mem::swap(&mut pos, &mut next);
            if record.is_some() {
                let old_rec = rec.clone();
                let old_anc = anc.clone();
                for (k, &j) in picks.iter().enumerate() {
                    rec[2 * k] = old_rec[2 * j];
                    rec[2 * k + 1] = old_rec[2 * j + 1];
                    anc[k] = old_anc[j];
                }
            }
            w.iter_mut().for_each(|x| *x = 1.0);
        } else {
            let m = w.iter().copied().fold(0.0, f64::max);
            if m < 1e-100 {
                w.iter_mut().for_each(|x| *x /= m);
                log_z += m.ln();
            }
        }
    }
    let total: f64 = w.iter().sum();
    log_z += (total / n as f64).ln();
    let (records, distinct_ancestors) = match record {
        None => (Vec::new(), 0),
        Some(_) => {
            let recs = (0..n).filter(|&i| w[i] > 0.0).map(|i| (rec[2 * i], rec[2 * i + 1], w[i] / total)).collect();
            let mut ids: Vec<u32> = (0..n).filter(|&i| w[i] > 0.0).map(|i| anc[i]).collect();
            ids.sort_unstable();
            ids.dedup();
            (recs, ids.len())
        }
    };
    IslandResult { log_z, records, distinct_ancestors, filter, log_z_filter }
}

/// Runs every island on its own substream of `seed`, in parallel, in index order.
pub(crate) fn run_islands(
    index: &DisasterIndex,
    target: &Target,
    config: &SmcConfig,
    record: Option<RecordTimes>,
    seed: SeedStream,
) -> Vec<IslandResult> {
    let n = config.per_island();
    (0..config.islands as u64)
        .into_par_iter()
        .map(|k| run_island(index, target, n, config, record, &mut seed.index(k).rng()))
        .collect()
}
