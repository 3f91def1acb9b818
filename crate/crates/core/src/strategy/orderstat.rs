//! Distributional identities of the renewal structure for i.i.d. Exp(7)
//! interarrival times.

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{invalid, Result};
use crate::rng::SeedStream;
use crate::stats::{self, chi_square, correlation_test, ks_one_sample, ks_two_sample, TestResult};

/// Rate of the interarrival times of disasters in `J7`.
pub const RATE: f64 = 7.0;
/// Bins `2..=POOL-1` are separate; `rho_1 >= POOL` is pooled.
const POOL: usize = 8;

/// `P(rho_1 = k) = (k - 1) / k!` for `k >= 2`.
pub fn rho_pmf(k: usize) -> f64 {
    if k < 2 {
        return 0.0;
    }
    let fact: f64 = (1..=k).map(|i| i as f64).product();
    (k - 1) as f64 / fact
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenyiRow {
    /// `"k-j+1"` or `"k-j"`.
    pub variant: String,
    /// Smallest per-coordinate two-sample KS p-value.
    pub min_p_value: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStatReport {
    pub k: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// `rho_1 = 2..=7` and `>= 8`.
    pub pmf_counts: Vec<u64>,
    pub pmf_test: TestResult,
    /// `R_1 - R_0` given `rho_1 = k` against Gamma(k, 7).
    pub gamma_test: TestResult,
    pub conditional_mean: f64,
    pub conditional_mean_stderr: f64,
    pub renyi: Vec<RenyiRow>,
    /// The variant that matches, if exactly one does.
    pub renyi_match: Option<String>,
    /// Correlation of the sum with each normalized coordinate (smallest p-value).
    pub independence_test: TestResult,
    pub level: f64,
}

impl OrderStatReport {
    pub fn pmf_passes(&self) -> bool {
        self.pmf_test.passes(self.level)
    }

    pub fn gamma_passes(&self) -> bool {
        self.gamma_test.passes(self.level)
    }

    /// Bonferroni over the `k` coordinates.
    pub fn independence_passes(&self) -> bool {
        self.independence_test.passes(self.level / self.k as f64)
    }
}

/// Checks, for `2 <= k <= 8`: the law of `rho_1`; the Gamma law of
/// `R_1 - R_0` on `{rho_1 = k}`; which Renyi representation of Exp(7) order
/// statistics holds; independence of the sum from the normalized vector.
pub fn orderstat_identities(k: usize, n_samples: usize, seed: SeedStream) -> Result<OrderStatReport> {
    if !(2..=8).contains(&k) {
        return invalid("k must lie in 2..=8");
    }
    if n_samples < 100 {
        return invalid("n_samples must be >= 100");
    }
    let level = 0.01;
    let exp = Exp::new(RATE).expect("positive rate");

    let mut rng = seed.tag("renewal").rng();
    let mut counts = vec![0u64; POOL - 1];
    let mut conditional = Vec::new();
    for _ in 0..n_samples {
        let mut prev: f64 = exp.sample(&mut rng);
        let mut sum = prev;
        let mut len = 1usize;
        loop {
            let d: f64 = exp.sample(&mut rng);
            sum += d;
            len += 1;
            if d > prev {
                break;
            }
            prev = d;
        }
        counts[(len.min(POOL)) - 2] += 1;
        if len == k {
            conditional.push(sum);
        }
    }
    let mut probs: Vec<f64> = (2..POOL).map(rho_pmf).collect();
    probs.push(1.0 / (1..POOL).map(|i| i as f64).product::<f64>());
    let pmf_test = chi_square(&counts, &probs);
    let gamma = Gamma::new(k as f64, RATE).expect("valid gamma");
    let gamma_test = ks_one_sample(&conditional, |x| gamma.cdf(x));

    let mut rng = seed.tag("renyi").rng();
    let sorted: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| {
            let mut v: Vec<f64> = (0..k).map(|_| exp.sample(&mut rng)).collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let renyi: Vec<RenyiRow> = [("k-j+1", 1usize), ("k-j", 0usize)]
        .iter()
        .map(|&(name, offset)| {
            let mut rng = seed.tag("renyi").tag(name).rng();
            let sums: Vec<Vec<f64>> = (0..n_samples)
                .map(|_| {
                    let mut acc = 0.0;
                    (1..=k)
                        .map(|j| {
                            let e: f64 = exp.sample(&mut rng);
                            acc += e / (k - j + offset) as f64;
                            acc
                        })
                        .collect()
                })
                .collect();
            let min_p_value = (0..k)
                .map(|c| {
                    let a: Vec<f64> = sorted.iter().map(|v| v[c]).collect();
                    let b: Vec<f64> = sums.iter().map(|v| v[c]).collect();
                    ks_two_sample(&a, &b).p_value
                })
                .fold(1.0, f64::min);
            RenyiRow { variant: name.to_string(), min_p_value, passes: min_p_value > level / k as f64 }
        })
        .collect();
    let passing: Vec<&RenyiRow> = renyi.iter().filter(|r| r.passes).collect();
    let renyi_match = (passing.len() == 1).then(|| passing[0].variant.clone());

    let mut rng = seed.tag("independence").rng();
    let draws: Vec<Vec<f64>> = (0..n_samples).map(|_| (0..k).map(|_| exp.sample(&mut rng)).collect()).collect();
    let totals: Vec<f64> = draws.iter().map(|v| v.iter().sum()).collect();
    let independence_test = (0..k)
        .map(|c| {
            let ratio: Vec<f64> = draws.iter().zip(&totals).map(|(v, s)| v[c] / s).collect();
            correlation_test(&totals, &ratio)
        })
        .min_by(|a, b| a.p_value.total_cmp(&b.p_value))
        .expect("k >= 2");

    let conditional_mean = if conditional.is_empty() { f64::NAN } else { stats::mean(&conditional) };
    let conditional_mean_stderr = stats::std_err(&conditional);
    Ok(OrderStatReport {
        k,
        n_samples,
        seed: seed.master(),
        pmf_counts: counts,
        pmf_test,
        gamma_test,
        conditional_mean,
        conditional_mean_stderr,
        renyi,
        renyi_match,
        independence_test,
        level,
    })
}
