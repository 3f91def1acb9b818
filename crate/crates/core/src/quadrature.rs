//! Deterministic grid oracle for one-dimensional survival probabilities.
//!
//! The law of `B` is propagated as cell masses on a uniform grid between
//! consecutive disaster times, multiplied at each disaster by the kill
//! factor. Only meant for a handful of disasters.

use crate::environment::{Environment, TubeGeometry};
use crate::error::{Error, Result};
use crate::path_survival::Beta;
use crate::stats::normal_cdf;

pub const ORACLE_MAX_DISASTERS: usize = 6;
pub const ORACLE_STEP: f64 = 0.005;

/// `Z_t` for a path started at 0, by recursive Gaussian convolution.
pub fn oracle_survival_quadrature(env: &Environment, beta: Beta, t: f64, modified: bool) -> Result<f64> {
    if env.dimension() != 1 {
        return Err(Error::OracleScaleExceeded(format!("dimension {} != 1", env.dimension())));
    }
    let min_time = if modified { 1.0 } else { 0.0 };
    let events: Vec<(f64, f64)> = env
        .disasters()
        .iter()
        .filter(|d| d.time < t && d.time >= min_time)
        .map(|d| (d.time, d.position[0]))
        .collect();
    if events.len() > ORACLE_MAX_DISASTERS {
        return Err(Error::OracleScaleExceeded(format!("{} disasters below t", events.len())));
    }
    if beta.is_zero() || events.is_empty() {
        return Ok(1.0);
    }
    let kill = 1.0 - beta.weight(1);
    let r = TubeGeometry::new(1).radius();
    let h = ORACLE_STEP;
    let half = ((10.0 * t.sqrt()).max(6.0) / h).ceil() as i64;
    let centre = |i: usize| (i as i64 - half) as f64 * h;
    let n = (2 * half + 1) as usize;

    // the path sits at 0 until the first positive disaster time
    let mut scalar = 1.0;
    let mut mass: Option<Vec<f64>> = None;
    let mut now = 0.0;
    for &(s, x) in &events {
        let dt = s - now;
        if dt > 0.0 {
            mass = Some(match mass {
                None => {
                    let sd = dt.sqrt();
                    (0..n)
                        .map(|i| scalar * (normal_cdf((centre(i) + h / 2.0) / sd) - normal_cdf((centre(i) - h / 2.0) / sd)))
                        .collect()
                }
                Some(m) => convolve(&m, dt, h),
            });
            now = s;
        }
        match mass.as_mut() {
            None => {
                if x.abs() <= r {
                    scalar *= 1.0 - kill;
                }
            }
            Some(m) => {
                for (i, v) in m.iter_mut().enumerate() {
                    let (a, b) = (centre(i) - h / 2.0, centre(i) + h / 2.0);
                    let overlap = (b.min(x + r) - a.max(x - r)).max(0.0) / h;
                    *v *= 1.0 - kill * overlap;
                }
            }
        }
    }
    Ok(match mass {
        None => scalar,
        Some(m) => m.iter().sum(),
    })
}

fn convolve(mass: &[f64], dt: f64, h: f64) -> Vec<f64> {
    let sd = dt.sqrt();
    let width = ((8.0 * sd) / h).ceil() as i64;
    let mut kernel: Vec<f64> = (-width..=width)
        .map(|j| normal_cdf((j as f64 + 0.5) * h / sd) - normal_cdf((j as f64 - 0.5) * h / sd))
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let n = mass.len() as i64;
    let mut out = vec![0.0; mass.len()];
    for (i, &m) in mass.iter().enumerate() {
        if m < 1e-300 {
            continue;
        }
        let lo = (i as i64 - width).max(0);
        let hi = (i as i64 + width).min(n - 1);
        for k in lo..=hi {
            out[k as usize] += m * kernel[(k - i as i64 + width) as usize];
        }
    }
    out
}
