//! Fully adapted particle estimator for band-constrained one-dimensional
//! Brownian paths.
//!
//! A plan is a list of times with, for each gap, a confinement interval for
//! the whole gap and a target set for the position at the gap's end. Every
//! step draws the next position from the Gaussian transition truncated to
//! the target set and multiplies the weight by the target mass and by the
//! exact probability that the connecting bridge stays confined. The product
//! of weights is therefore an unbiased estimator of the plan's probability.

use rand::Rng;

use crate::rng::StreamRng;
use crate::stats::{log_mean_exp, log_normal_mass, sample_truncated_std_normal};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Step {
    pub time: f64,
    /// The path stays in this closed interval over the gap ending here.
    pub confine: (f64, f64),
    /// Admissible positions at `time`; disjoint, sorted intervals.
    pub target: Vec<(f64, f64)>,
    /// Disaster position at `time`, for the per-path hit audit.
    pub disaster: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plan {
    pub start: f64,
    pub steps: Vec<Step>,
    /// Pinned endpoint at the last step time (bridge plans).
    pub end: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GuidedResult {
    pub log_z: f64,
    /// Final particles that were hit by an audited disaster.
    pub unsound: usize,
}

/// `ln P(stay in [0, w] | B(0) = x, B(h) = y)` for `x, y` in `[0, w]`.
pub fn log_bridge_stay(x: f64, y: f64, w: f64, h: f64) -> f64 {
    if !(x >= 0.0 && x <= w && y >= 0.0 && y <= w) {
        return f64::NEG_INFINITY;
    }
    if h <= 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..200i32 {
        let kw = f64::from(k) * w;
        let mut terms = 0.0;
        let mut largest: f64 = 0.0;
        for sk in if k == 0 { vec![0.0] } else { vec![kw, -kw] } {
            let a = (-2.0 * sk * (sk + y - x) / h).exp();
            let b = (-2.0 * (sk + x) * (sk + y) / h).exp();
            terms += a - b;
            largest = largest.max(a).max(b);
        }
        sum += terms;
        if k > 0 && largest < 1e-17 {
            break;
        }
    }
    sum.clamp(0.0, 1.0).ln()
}

fn log_gauss_density(z: f64, h: f64) -> f64 {
    -0.5 * z * z / h - 0.5 * h.ln() - LN_SQRT_2PI
}

/// Moves one particle across a step; returns the log weight increment.
fn advance(rng: &mut StreamRng, z: &mut f64, from: f64, step: &Step, pinned: Option<f64>, masses: &mut Vec<f64>) -> f64 {
    let h = step.time - from;
    let (c0, c1) = step.confine;
    let start = *z;
    let mut log_w;
    if let Some(y) = pinned {
        log_w = log_gauss_density(y - start, h);
        *z = y;
    } else if h <= 0.0 {
        return if step.target.iter().any(|&(a, b)| a <= start && start <= b) { 0.0 } else { f64::NEG_INFINITY };
    } else {
        let sd = h.sqrt();
        masses.clear();
        masses.extend(step.target.iter().map(|&(a, b)| log_normal_mass((a - start) / sd, (b - start) / sd)));
        let lt = log_mean_exp(masses) + (masses.len() as f64).ln();
        if lt == f64::NEG_INFINITY {
            return lt;
        }
        let mut u = rng.random::<f64>();
        let mut pick = masses.len() - 1;
        for (i, m) in masses.iter().enumerate() {
            let p = (m - lt).exp();
            if u < p {
                pick = i;
                break;
            }
            u -= p;
        }
        let (a, b) = step.target[pick];
        let x = sample_truncated_std_normal(rng, (a - start) / sd, (b - start) / sd);
        *z = (start + sd * x).clamp(a, b);
        log_w = lt;
    }
    log_w += log_bridge_stay(start - c0, *z - c0, c1 - c0, h);
    log_w
}

pub(crate) fn run_guided(plan: &Plan, n: usize, ess_threshold: f64, rng: &mut StreamRng) -> GuidedResult {
    let mut pos = vec![plan.start; n];
    let mut logw = vec![0.0; n];
    let mut hits = vec![0u32; n];
    let mut log_z = 0.0;
    let mut masses = Vec::new();
    let mut from = 0.0;
    let last = plan.steps.len().saturating_sub(1);
    for (k, step) in plan.steps.iter().enumerate() {
        let pinned = if k == last { plan.end } else { None };
        for i in 0..n {
            if logw[i] == f64::NEG_INFINITY {
                continue;
            }
            logw[i] += advance(rng, &mut pos[i], from, step, pinned, &mut masses);
            if let Some(d) = step.disaster {
                if (pos[i] - d).abs() <= 0.5 {
                    hits[i] += 1;
                }
            }
        }
        from = step.time;
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return GuidedResult { log_z: m, unsound: 0 };
        }
        let (s1, s2) = logw.iter().fold((0.0, 0.0), |a, l| {
            let w = (l - m).exp();
            (a.0 + w, a.1 + w * w)
        });
        if k < last && s1 * s1 / s2 < ess_threshold * n as f64 {
            log_z += m + (s1 / n as f64).ln();
            let step_u = s1 / n as f64;
            let mut u = rng.random::<f64>() * step_u;
            let (mut acc, mut j) = (0.0, 0usize);
            let old_pos = pos.clone();
            let old_hits = hits.clone();
            let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
            for k2 in 0..n {
                while j + 1 < n && acc + w[j] <= u {
                    acc += w[j];
                    j += 1;
                }
                pos[k2] = old_pos[j];
                hits[k2] = old_hits[j];
                u += step_u;
            }
            logw.iter_mut().for_each(|l| *l = 0.0);
        }
    }
    log_z += log_mean_exp(&logw);
    if let Some(y) = plan.end {
        let total = plan.steps.last().map_or(0.0, |s| s.time);
        log_z -= log_gauss_density(y - plan.start, total);
    }
    let unsound = (0..n).filter(|&i| logw[i] > f64::NEG_INFINITY && hits[i] > 0).count();
    GuidedResult { log_z, unsound }
}
