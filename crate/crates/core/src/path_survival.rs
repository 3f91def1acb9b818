//! Exact survival evaluation of Brownian paths among disasters.
//!
//! A path only interacts with the environment through its positions at
//! disaster times, so it is sampled on a *skeleton*: the integer checkpoints,
//! the horizon, and the times of every disaster that the path could reach.
//! Between two checkpoints the path is a Brownian bridge; a disaster is
//! skipped only when it lies more than [`BAND_MARGIN`] (plus the ball radius)
//! outside the range of the two bridge endpoints, an event of probability
//! below `2 d exp(-2 BAND_MARGIN^2)` per unit gap.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::environment::{truncation_radius, Candidate, DisasterIndex, Environment, TubeGeometry};
use crate::error::{invalid, Error, Result};
use crate::rng::{SeedStream, StreamRng};

pub use crate::quadrature::oracle_survival_quadrature;

/// Bridge excursions beyond this distance from the endpoint range are
/// neglected when choosing which disaster times to sample.
pub const BAND_MARGIN: f64 = 6.0;

/// Inverse temperature on `[0, inf]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_infinite() && value > 0.0 {
            Ok(Beta::Infinite)
        } else if value >= 0.0 {
            Ok(Beta::Finite(value))
        } else {
            invalid(format!("beta must be >= 0, got {value}"))
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Beta::Infinite)
    }

    pub fn is_zero(self) -> bool {
        self == Beta::Finite(0.0)
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Beta::Finite(b) => b,
            Beta::Infinite => f64::INFINITY,
        }
    }

    /// Survival weight `exp(-beta * hits)`, the indicator of `hits == 0` at infinity.
    pub fn weight(self, hits: u32) -> f64 {
        match self {
            Beta::Infinite => {
                if hits == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Beta::Finite(b) => {
                if hits == 0 {
                    1.0
                } else {
                    (-b * f64::from(hits)).exp()
                }
            }
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(b) => write!(f, "{b}"),
            Beta::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Beta::Infinite);
        }
        let v: f64 = s.parse().map_err(|_| Error::InvalidArgument(format!("cannot parse beta '{s}'")))?;
        if !v.is_finite() {
            return invalid(format!("cannot parse beta '{s}'"));
        }
        Beta::new(v)
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => s.serialize_f64(*b),
            Beta::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Beta::new(v).map_err(serde::de::Error::custom),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// The death mechanism of a single path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeathClock {
    pub beta: Beta,
    /// Exp(1) threshold; unused at `beta = inf`.
    pub xi: f64,
    /// Ignore disasters before time 1.
    pub modified: bool,
}

impl DeathClock {
    pub fn sample<R: Rng + ?Sized>(beta: Beta, modified: bool, rng: &mut R) -> Self {
        let xi: f64 = Exp1.sample(rng);
        Self { beta, xi: xi.max(f64::MIN_POSITIVE), modified }
    }

    pub fn min_time(&self) -> f64 {
        if self.modified {
            1.0
        } else {
            0.0
        }
    }
}

/// A Brownian path sampled at checkpoints and at the disaster times it can reach.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSkeleton {
    dimension: usize,
    times: Vec<f64>,
    values: Vec<f64>,
    checkpoints: Vec<usize>,
}

impl PathSkeleton {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn start(&self) -> &[f64] {
        self.value(0)
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("skeleton is never empty")
    }

    /// Position at a skeleton time, if that time is on the skeleton.
    pub fn at(&self, time: f64) -> Option<&[f64]> {
        let i = self.times.partition_point(|s| *s < time);
        (self.times.get(i) == Some(&time)).then(|| self.value(i))
    }

    /// Indices of the deterministic checkpoints (integers and the horizon).
    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    fn push(&mut self, time: f64, value: &[f64], checkpoint: bool) {
        if self.times.last() == Some(&time) {
            if checkpoint && self.checkpoints.last() != Some(&(self.times.len() - 1)) {
                self.checkpoints.push(self.times.len() - 1);
            }
            return;
        }
        self.times.push(time);
        self.values.extend_from_slice(value);
        if checkpoint {
            self.checkpoints.push(self.times.len() - 1);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalVerdict {
    pub hit_count: u32,
    pub weight: f64,
    pub death_time: f64,
    pub truncation_ok: bool,
}

/// Checkpoint times `0, 1, ..., floor(t), t` merged with extra times in `(0, t)`.
pub(crate) fn checkpoint_times(horizon: f64, extra: &[f64]) -> Vec<f64> {
    let mut ts: Vec<f64> = (0..=horizon.floor() as u64).map(|k| k as f64).collect();
    ts.push(horizon);
    ts.extend(extra.iter().copied().filter(|&s| s > 0.0 && s < horizon));
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

/// Samples one gap of a path: the endpoint, then bridge values at every
/// reachable disaster time inside `[t0, t1)`.
pub(crate) struct GapWalker<'a> {
    index: &'a DisasterIndex,
    geometry: TubeGeometry,
    /// Disasters at or after this time are ignored.
    horizon: f64,
    /// Disasters before this time are ignored.
    min_time: f64,
    cands: Vec<Candidate>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Interior points of the last gap: times, flat positions, hits per point.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub hits: Vec<u32>,
}

impl<'a> GapWalker<'a> {
    pub fn new(index: &'a DisasterIndex, horizon: f64, min_time: f64) -> Self {
        let d = index.dimension();
        Self {
            index,
            geometry: TubeGeometry::new(d),
            horizon,
            min_time,
            cands: Vec::new(),
            lo: vec![0.0; d],
            hi: vec![0.0; d],
            times: Vec::new(),
            values: Vec::new(),
            hits: Vec::new(),
        }
    }

    /// Fills `end` with `B(t1)` and the interior buffers. With `stop_on_hit`
    /// the interior stops at the first hit (the endpoint is still drawn).
    pub fn walk<R: Rng + ?Sized>(&mut self, rng: &mut R, t0: f64, x0: &[f64], t1: f64, end: &mut [f64], stop_on_hit: bool) {
        let d = x0.len();
        let sd = (t1 - t0).sqrt();
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            end[k] = x0[k] + sd * z;
        }
        self.times.clear();
        self.values.clear();
        self.hits.clear();
        let t_lo = t0.max(self.min_time);
        let t_hi = t1.min(self.horizon);
        if !(t_hi > t_lo) {
            return;
        }
        let reach = BAND_MARGIN + self.geometry.radius();
        for k in 0..d {
            self.lo[k] = x0[k].min(end[k]) - reach;
            self.hi[k] = x0[k].max(end[k]) + reach;
        }
        self.index.query(t_lo, t_hi, &self.lo, &self.hi, &mut self.cands);
        let mut prev_t = t0;
        let mut prev = [0.0f64; 8];
        let prev = if d <= 8 { &mut prev[..d] } else { unreachable!("dimension above 8") };
        prev.copy_from_slice(x0);
        for c in &self.cands {
            let s = c.time;
            if self.times.last() != Some(&s) {
                if s > prev_t {
                    let frac = (s - prev_t) / (t1 - prev_t);
                    let sd = ((s - prev_t) * (t1 - s) / (t1 - prev_t)).sqrt();
                    for k in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        prev[k] += frac * (end[k] - prev[k]) + sd * z;
                    }
                    prev_t = s;
                }
                self.times.push(s);
                self.values.extend_from_slice(prev);
                self.hits.push(0);
            }
            if self.geometry.is_hit(prev, self.index.coords(c)) {
                *self.hits.last_mut().expect("pushed above") += 1;
                if stop_on_hit {
                    return;
                }
            }
        }
    }
}

/// Reusable skeleton sampler for one environment and horizon.
pub struct SkeletonSampler {
    index: DisasterIndex,
    horizon: f64,
}

impl SkeletonSampler {
    pub fn new(env: &Environment, horizon: f64) -> Result<Self> {
        if horizon > env.window().t_max() {
            return Err(Error::WindowTooSmall { horizon, t_max: env.window().t_max() });
        }
        if !(horizon >= 0.0) {
            return invalid("horizon must be >= 0");
        }
        Ok(Self { index: DisasterIndex::new(env), horizon })
    }

    pub fn sample<R: Rng + ?Sized>(&self, start: &[f64], rng: &mut R) -> PathSkeleton {
        let d = start.len();
        assert_eq!(d, self.index.dimension(), "start has the wrong dimension");
        let checkpoints = checkpoint_times(self.horizon, &[]);
        let mut sk = PathSkeleton { dimension: d, times: Vec::new(), values: Vec::new(), checkpoints: Vec::new() };
        sk.push(0.0, start, true);
        let mut walker = GapWalker::new(&self.index, self.horizon, 0.0);
        let mut cur = start.to_vec();
        let mut end = vec![0.0; d];
        for w in checkpoints.windows(2) {
            walker.walk(rng, w[0], &cur, w[1], &mut end, false);
            for (i, &s) in walker.times.iter().enumerate() {
                sk.push(s, &walker.values[i * d..(i + 1) * d], false);
            }
            sk.push(w[1], &end, true);
            cur.copy_from_slice(&end);
        }
        sk
    }
}

pub fn sample_skeleton(env: &Environment, t: f64, start: &[f64], seed: SeedStream) -> Result<PathSkeleton> {
    if start.len() != env.dimension() {
        return invalid("start has the wrong dimension");
    }
    Ok(SkeletonSampler::new(env, t)?.sample(start, &mut seed.rng()))
}

/// Hit count, survival weight and death time of `skeleton` against `env` up to `t`.
///
/// `truncation_ok` reflects the skeleton values only; [`check_truncation`]
/// adds the between-points bridge test.
pub fn evaluate(skeleton: &PathSkeleton, env: &Environment, clock: &DeathClock, t: f64) -> Result<SurvivalVerdict> {
    if skeleton.dimension != env.dimension() {
        return invalid("skeleton and environment dimensions differ");
    }
    if t > skeleton.horizon() {
        return invalid(format!("horizon {t} exceeds skeleton horizon {}", skeleton.horizon()));
    }
    let geometry = TubeGeometry::new(env.dimension());
    let reach = BAND_MARGIN + geometry.radius();
    let min_time = clock.min_time();
    let mut hits = 0u32;
    let mut death_time = f64::INFINITY;
    for dis in env.disasters() {
        if dis.time >= t {
            break;
        }
        if dis.time < min_time {
            continue;
        }
        match skeleton.at(dis.time) {
            Some(pos) => {
                if geometry.is_hit(pos, &dis.position) {
                    hits += 1;
                    let fires = match clock.beta {
                        Beta::Infinite => true,
                        Beta::Finite(b) => b * f64::from(hits) >= clock.xi,
                    };
                    if fires && death_time.is_infinite() {
                        death_time = dis.time;
                    }
                }
            }
            None => {
                // must be provably out of reach of the enclosing bridge
                let cps = &skeleton.checkpoints;
                let k = cps.partition_point(|&i| skeleton.times[i] <= dis.time);
                if k == 0 || k >= cps.len() {
                    return Err(Error::SkeletonMismatch { time: dis.time });
                }
                let (a, b) = (skeleton.value(cps[k - 1]), skeleton.value(cps[k]));
                let inside = (0..a.len()).all(|j| {
                    let x = dis.position[j];
                    x >= a[j].min(b[j]) - reach && x <= a[j].max(b[j]) + reach
                });
                if inside {
                    return Err(Error::SkeletonMismatch { time: dis.time });
                }
            }
        }
    }
    let radius = truncation_radius(t);
    let start = skeleton.start();
    let end = skeleton.times.partition_point(|s| *s <= t);
    let truncation_ok = (0..end).all(|i| distance(skeleton.value(i), start) <= radius);
    Ok(SurvivalVerdict { hit_count: hits, weight: clock.beta.weight(hits), death_time, truncation_ok })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Probability that a one-dimensional Brownian bridge over time `h` whose
/// endpoints sit at distances `a0`, `a1` below a barrier touches it.
pub fn bridge_crossing_probability(a0: f64, a1: f64, h: f64) -> f64 {
    if a0 <= 0.0 || a1 <= 0.0 {
        return 1.0;
    }
    let e = 2.0 * a0 * a1 / h;
    if e > 745.0 {
        0.0
    } else {
        (-e).exp()
    }
}

/// Truncation test for one gap between consecutive skeleton points `a` and
/// `b`: endpoint bound plus one-sided bridge crossing tests for both sides of
/// every coordinate, combined as a union and decided by one uniform draw
/// (drawn only when the crossing probability is nonzero).
pub(crate) fn truncation_gap_ok<R: Rng + ?Sized>(a: &[f64], b: &[f64], start: &[f64], h: f64, radius: f64, rng: &mut R) -> bool {
    if distance(b, start) > radius {
        return false;
    }
    if h <= 0.0 {
        return true;
    }
    let mut survive = 1.0;
    for k in 0..a.len() {
        let (ua, ub) = (a[k] - start[k], b[k] - start[k]);
        survive *= 1.0 - bridge_crossing_probability(radius - ua, radius - ub, h);
        survive *= 1.0 - bridge_crossing_probability(radius + ua, radius + ub, h);
    }
    let p = 1.0 - survive;
    !(p > 0.0 && rng.random::<f64>() < p)
}

/// Whether the path stays within `ceil(t)^2` of its start up to `t`.
pub fn check_truncation(skeleton: &PathSkeleton, t: f64, seed: SeedStream) -> bool {
    check_truncation_with(skeleton, t, &mut seed.rng())
}

pub(crate) fn check_truncation_with(skeleton: &PathSkeleton, t: f64, rng: &mut StreamRng) -> bool {
    let radius = truncation_radius(t);
    let start = skeleton.start();
    let n = skeleton.times.partition_point(|s| *s <= t);
    (1..n).all(|i| {
        let h = skeleton.times[i] - skeleton.times[i - 1];
        truncation_gap_ok(skeleton.value(i - 1), skeleton.value(i), start, h, radius, rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Disaster, Window};
    use crate::stats;

    fn env1(points: &[(f64, f64)], t_max: f64) -> Environment {
        let w = Window::centered(t_max, 1, 20.0).unwrap();
        Environment::new(w, points.iter().map(|&(t, x)| Disaster::new(t, vec![x])).collect()).unwrap()
    }

    fn fixed_skeleton(times: &[f64], values: &[f64]) -> PathSkeleton {
        PathSkeleton {
            dimension: 1,
            times: times.to_vec(),
            values: values.to_vec(),
            checkpoints: (0..times.len()).collect(),
        }
    }

    #[test]
    fn beta_parsing() {
        assert_eq!("inf".parse::<Beta>().unwrap(), Beta::Infinite);
        assert_eq!("0.5".parse::<Beta>().unwrap(), Beta::Finite(0.5));
        assert!("-1".parse::<Beta>().is_err());
        assert!("abc".parse::<Beta>().is_err());
        let json = serde_json::to_string(&vec![Beta::Finite(2.0), Beta::Infinite]).unwrap();
        assert_eq!(json, r#"[2.0,"inf"]"#);
        let back: Vec<Beta> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![Beta::Finite(2.0), Beta::Infinite]);
    }

    #[test]
    fn empty_env_skeleton_is_checkpoints() {
        let env = env1(&[], 5.0);
        let sk = sample_skeleton(&env, 3.0, &[0.0], SeedStream::new(1)).unwrap();
        assert_eq!(sk.times(), &[0.0, 1.0, 2.0, 3.0]);
        let sk = sample_skeleton(&env, 2.5, &[0.0], SeedStream::new(1)).unwrap();
        assert_eq!(sk.times(), &[0.0, 1.0, 2.0, 2.5]);
    }

    #[test]
    fn skeleton_includes_reachable_disasters_and_is_deterministic() {
        let env = env1(&[(0.3, 0.0), (1.5, 1.0), (1.5, 2.0), (2.2, -1.0)], 5.0);
        let a = sample_skeleton(&env, 3.0, &[0.0], SeedStream::new(4)).unwrap();
        let b = sample_skeleton(&env, 3.0, &[0.0], SeedStream::new(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times(), &[0.0, 0.3, 1.0, 1.5, 2.0, 2.2, 3.0]);
        assert!(a.times().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn horizon_beyond_window_is_rejected() {
        let env = env1(&[], 2.0);
        assert!(matches!(
            sample_skeleton(&env, 3.0, &[0.0], SeedStream::new(1)),
            Err(Error::WindowTooSmall { .. })
        ));
    }

    #[test]
    fn unit_increment_variance() {
        let env = env1(&[], 2.0);
        let sampler = SkeletonSampler::new(&env, 1.0).unwrap();
        let root = SeedStream::new(77);
        let n = 100_000;
        let mut rng = root.rng();
        let xs: Vec<f64> = (0..n).map(|_| sampler.sample(&[0.0], &mut rng).value(1)[0]).collect();
        let m = stats::mean(&xs);
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "{var}");
    }

    #[test]
    fn evaluate_examples() {
        let clock = DeathClock { beta: Beta::Infinite, xi: 1.0, modified: false };
        let empty = env1(&[], 3.0);
        let sk = fixed_skeleton(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]);
        let v = evaluate(&sk, &empty, &clock, 2.0).unwrap();
        assert_eq!((v.hit_count, v.weight, v.death_time), (0, 1.0, f64::INFINITY));

        let one = env1(&[(1.0, 0.0)], 3.0);
        let v = evaluate(&sk, &one, &clock, 2.0).unwrap();
        assert_eq!((v.hit_count, v.weight, v.death_time), (1, 0.0, 1.0));

        let miss = env1(&[(1.0, 0.6)], 3.0);
        assert_eq!(evaluate(&sk, &miss, &clock, 2.0).unwrap().hit_count, 0);

        // boundary counts as a hit
        let edge = env1(&[(1.0, 0.5)], 3.0);
        assert_eq!(evaluate(&sk, &edge, &clock, 2.0).unwrap().hit_count, 1);

        // the modified clock ignores disasters before time 1
        let early = env1(&[(0.5, 0.0)], 3.0);
        let sk2 = fixed_skeleton(&[0.0, 0.5, 1.0, 2.0], &[0.0, 0.0, 0.0, 0.0]);
        let m = DeathClock { modified: true, ..clock };
        assert_eq!(evaluate(&sk2, &early, &m, 2.0).unwrap().hit_count, 0);
        assert_eq!(evaluate(&sk2, &early, &clock, 2.0).unwrap().hit_count, 1);
    }

    #[test]
    fn finite_beta_weight_and_death_time() {
        let env = env1(&[(0.5, 0.0), (1.5, 0.0)], 3.0);
        let sk = fixed_skeleton(&[0.0, 0.5, 1.0, 1.5, 2.0], &[0.0; 5]);
        let clock = DeathClock { beta: Beta::Finite(1.0), xi: 1.5, modified: false };
        let v = evaluate(&sk, &env, &clock, 2.0).unwrap();
        assert_eq!(v.hit_count, 2);
        assert!((v.weight - (-2.0f64).exp()).abs() < 1e-12);
        assert_eq!(v.death_time, 1.5);
        let zero = DeathClock { beta: Beta::Finite(0.0), ..clock };
        assert_eq!(evaluate(&sk, &env, &zero, 2.0).unwrap().weight, 1.0);
    }

    #[test]
    fn mismatched_skeleton_is_an_error() {
        let env = env1(&[(0.5, 0.1)], 3.0);
        let sk = fixed_skeleton(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]);
        let clock = DeathClock { beta: Beta::Infinite, xi: 1.0, modified: false };
        assert!(matches!(evaluate(&sk, &env, &clock, 2.0), Err(Error::SkeletonMismatch { .. })));
        // far away disasters need not be on the skeleton
        let far = env1(&[(0.5, 15.0)], 3.0);
        assert_eq!(evaluate(&sk, &far, &clock, 2.0).unwrap().hit_count, 0);
    }

    #[test]
    fn truncation_checks() {
        let sk = fixed_skeleton(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]);
        // per-gap crossing probability e^{-32}: accepted for every seed tried
        assert!((0..1000).all(|i| check_truncation(&sk, 2.0, SeedStream::new(i))));
        let far = fixed_skeleton(&[0.0, 1.0, 2.0], &[0.0, 4.5, 0.0]);
        assert!(!check_truncation(&far, 2.0, SeedStream::new(0)));
        assert!((bridge_crossing_probability(4.0, 4.0, 1.0) - (-32.0f64).exp()).abs() < 1e-25);
    }
}
