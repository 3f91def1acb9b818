//! Small statistical toolkit: normal tails in log space, truncated normal
//! sampling, goodness-of-fit tests and summary statistics.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal upper tail `P(Z > x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// `ln P(Z > x)`, accurate far into the upper tail.
pub fn log_normal_sf(x: f64) -> f64 {
    if x < 30.0 {
        return normal_sf(x).ln();
    }
    // Mills-ratio expansion
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
    -0.5 * x2 - x.ln() - LN_SQRT_2PI + series.ln()
}

/// `ln P(a <= Z <= b)` for a standard normal `Z`.
pub fn log_normal_mass(a: f64, b: f64) -> f64 {
    if !(b > a) {
        return f64::NEG_INFINITY;
    }
    if a >= 0.0 {
        let la = log_normal_sf(a);
        let lb = log_normal_sf(b);
        la + (-(lb - la).exp()).ln_1p()
    } else if b <= 0.0 {
        log_normal_mass(-b, -a)
    } else {
        (-(normal_sf(b) + normal_sf(-a))).ln_1p()
    }
}

/// Draws `Z ~ N(0,1)` conditioned on `a <= Z <= b`. Either end may be infinite.
pub fn sample_truncated_std_normal<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    debug_assert!(b > a);
    if a >= 0.0 {
        upper_tail(rng, a, b)
    } else if b <= 0.0 {
        -upper_tail(rng, -b, -a)
    } else if b - a < 1.0 {
        uniform_rejection(rng, a, b, 0.0)
    } else {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a && z <= b {
                return z;
            }
        }
    }
}

fn uniform_rejection<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64, peak: f64) -> f64 {
    loop {
        let z = a + (b - a) * rng.random::<f64>();
        let u: f64 = rng.random();
        if u <= (-(z * z - peak * peak) / 2.0).exp() {
            return z;
        }
    }
}

// a >= 0
fn upper_tail<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if (b - a) * (b + a) <= 2.0 {
        return uniform_rejection(rng, a, b, a);
    }
    if a < 1.0 {
        loop {
            let z: f64 = rng.sample::<f64, _>(StandardNormal).abs();
            if z >= a && z <= b {
                return z;
            }
        }
    }
    // exponential proposal with the optimal rate
    let lambda = (a + (a * a + 4.0).sqrt()) / 2.0;
    let exp = Exp::new(lambda).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        if z > b {
            continue;
        }
        let u: f64 = rng.random();
        if u <= (-(z - lambda) * (z - lambda) / 2.0).exp() {
            return z;
        }
    }
}

/// Kolmogorov distribution survival function `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = f64::from(k);
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

impl TestResult {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value > level
    }
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> TestResult {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let nf = n as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    let sq = nf.sqrt();
    TestResult { statistic: d, p_value: kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d), n }
}

/// Two-sample Kolmogorov-Smirnov test. Infinite values are allowed.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> TestResult {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (n, m) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = if xa[i].total_cmp(&xb[j]).is_le() { xa[i] } else { xb[j] };
        while i < n && xa[i] == x {
            i += 1;
        }
        while j < m && xb[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    // whatever remains in one sample sits above everything in the other
    d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    let ne = (n * m) as f64 / (n + m) as f64;
    let sq = ne.sqrt();
    TestResult {
        statistic: d,
        p_value: kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d),
        n: n.min(m),
    }
}

/// Pearson chi-square goodness of fit of `observed` counts against bin
/// probabilities `expected` (which must sum to one).
pub fn chi_square(observed: &[u64], expected: &[f64]) -> TestResult {
    let n: u64 = observed.iter().sum();
    let nf = n as f64;
    let stat = observed
        .iter()
        .zip(expected)
        .map(|(&o, &p)| {
            let e = nf * p;
            (o as f64 - e).powi(2) / e
        })
        .sum::<f64>();
    let dof = (observed.len() - 1) as f64;
    let dist = ChiSquared::new(dof).expect("positive dof");
    TestResult { statistic: stat, p_value: dist.sf(stat), n: n as usize }
}

/// Two-sided test of zero Pearson correlation via `sqrt(n) r ~ N(0,1)`.
pub fn correlation_test(x: &[f64], y: &[f64]) -> TestResult {
    let r = pearson(x, y);
    let z = r * (x.len() as f64).sqrt();
    TestResult { statistic: r, p_value: 2.0 * normal_sf(z.abs()), n: x.len() }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn std_err(xs: &[f64]) -> f64 {
    std_dev(xs) / (xs.len() as f64).sqrt()
}

/// `ln(mean(exp(logs)))` without overflow.
pub fn log_mean_exp(logs: &[f64]) -> f64 {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    max + (s / logs.len() as f64).ln()
}

/// Ordinary least squares `y = a + b x`; returns `(a, b)`.
pub fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() < 2 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Percentile bootstrap interval for the sample standard deviation.
pub fn bootstrap_sd_ci<R: Rng + ?Sized>(
    xs: &[f64],
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> (f64, f64) {
    let n = xs.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let mut buf = vec![0.0; n];
    let mut sds: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = xs[rng.random_range(0..n)];
            }
            std_dev(&buf)
        })
        .collect();
    sds.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = sds[((alpha * resamples as f64) as usize).min(resamples - 1)];
    let hi = sds[(((1.0 - alpha) * resamples as f64) as usize).min(resamples - 1)];
    (lo, hi)
}
