//! The space-time Poisson disaster field and its algebra: restriction to time
//! sets, shifts, stripe resampling, and a per-unit-time spatial index used by
//! the path samplers.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::SeedStream;

/// A point `(s, x)` of the disaster process.
#[derive(Debug, Clone, PartialEq)]
pub struct Disaster {
    pub time: f64,
    pub position: Vec<f64>,
}

impl Disaster {
    pub fn new(time: f64, position: Vec<f64>) -> Self {
        Self { time, position }
    }

    fn order(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then_with(|| {
            self.position
                .iter()
                .zip(&other.position)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }
}

/// Finite simulation domain `[0, t_max] x prod [lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    t_max: f64,
    space: Vec<(f64, f64)>,
}

impl Window {
    pub fn new(t_max: f64, space: Vec<(f64, f64)>) -> Result<Self> {
        if !(t_max >= 0.0) || !t_max.is_finite() {
            return invalid(format!("t_max must be finite and >= 0, got {t_max}"));
        }
        if space.is_empty() {
            return invalid("window needs at least one spatial coordinate");
        }
        if space.iter().any(|&(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite()) {
            return invalid("every spatial interval must be finite and nonempty");
        }
        Ok(Self { t_max, space })
    }

    /// `[0, t_max] x [-half_width, half_width]^d`.
    pub fn centered(t_max: f64, dimension: usize, half_width: f64) -> Result<Self> {
        Self::new(t_max, vec![(-half_width, half_width); dimension])
    }

    /// The smallest centred window that holds every disaster a path can meet
    /// on the truncation event up to `horizon`.
    pub fn for_horizon(horizon: f64, dimension: usize) -> Result<Self> {
        let reach = truncation_radius(horizon) + TubeGeometry::new(dimension).radius();
        Self::centered(horizon, dimension, reach)
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn space(&self) -> &[(f64, f64)] {
        &self.space
    }

    pub fn dimension(&self) -> usize {
        self.space.len()
    }

    pub fn space_volume(&self) -> f64 {
        self.space.iter().map(|(lo, hi)| hi - lo).product()
    }

    pub fn volume(&self) -> f64 {
        self.t_max * self.space_volume()
    }

    pub fn contains(&self, d: &Disaster) -> bool {
        d.time >= 0.0
            && d.time <= self.t_max
            && d.position.len() == self.space.len()
            && d.position.iter().zip(&self.space).all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }
}

/// `ceil(t)^2`, the radius of the truncation event `A_t`.
pub fn truncation_radius(t: f64) -> f64 {
    let c = t.ceil().max(0.0);
    c * c
}

/// Radius of the unit-volume ball in dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeGeometry {
    dimension: usize,
    radius: f64,
}

impl TubeGeometry {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= 1, "dimension must be >= 1");
        let d = dimension as f64;
        let radius = if dimension == 1 {
            0.5
        } else {
            // V_d r^d = 1 with V_d = pi^{d/2} / Gamma(d/2 + 1)
            (statrs::function::gamma::ln_gamma(d / 2.0 + 1.0) / d).exp() / std::f64::consts::PI.sqrt()
        };
        Self { dimension, radius }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Closed-ball membership: distance exactly `radius` is a hit.
    pub fn is_hit(&self, path: &[f64], disaster: &[f64]) -> bool {
        if self.dimension == 1 {
            return (path[0] - disaster[0]).abs() <= self.radius;
        }
        let d2: f64 = path.iter().zip(disaster).map(|(a, b)| (a - b) * (a - b)).sum();
        d2 <= self.radius * self.radius
    }
}

/// One interval of a [`TimeSet`], with per-endpoint closedness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub fn closed(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_closed: true, hi_closed: true }
    }

    pub fn half_open(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_closed: true, hi_closed: false }
    }

    pub fn contains(&self, t: f64) -> bool {
        (t > self.lo || (self.lo_closed && t == self.lo)) && (t < self.hi || (self.hi_closed && t == self.hi))
    }
}

/// A finite union of time intervals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeSet {
    intervals: Vec<Interval>,
}

impl TimeSet {
    pub fn new(intervals: Vec<Interval>) -> Self {
        Self { intervals }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn closed(lo: f64, hi: f64) -> Self {
        Self::new(vec![Interval::closed(lo, hi)])
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|i| i.contains(t))
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.intervals.iter().flat_map(|i| [i.lo, i.hi]).collect()
    }

    /// Rebuilds a canonical set from a membership predicate that is constant
    /// on the open pieces between `points`.
    fn assemble(mut points: Vec<f64>, member: impl Fn(f64) -> bool) -> Self {
        points.retain(|p| p.is_finite());
        points.sort_by(f64::total_cmp);
        points.dedup();
        let mut out: Vec<Interval> = Vec::new();
        let mut open: Option<Interval> = None;
        let mut push_piece = |lo: f64, hi: f64, lo_closed: bool, hi_closed: bool, inside: bool| {
            if inside {
                match open.as_mut() {
                    Some(cur) => {
                        cur.hi = hi;
                        cur.hi_closed = hi_closed;
                    }
                    None => open = Some(Interval { lo, hi, lo_closed, hi_closed }),
                }
            } else if let Some(cur) = open.take() {
                out.push(cur);
            }
        };
        for (k, &p) in points.iter().enumerate() {
            push_piece(p, p, true, true, member(p));
            if let Some(&next) = points.get(k + 1) {
                push_piece(p, next, false, false, member(0.5 * (p + next)));
            }
        }
        if let Some(cur) = open.take() {
            out.push(cur);
        }
        Self { intervals: out }
    }

    pub fn intersect(&self, other: &Self) -> Self {
        let mut pts = self.breakpoints();
        pts.extend(other.breakpoints());
        Self::assemble(pts, |t| self.contains(t) && other.contains(t))
    }

    /// Complement relative to `[0, t_max]`.
    pub fn complement(&self, t_max: f64) -> Self {
        let mut pts = self.breakpoints();
        pts.extend([0.0, t_max]);
        pts.retain(|p| *p >= 0.0 && *p <= t_max);
        Self::assemble(pts, |t| (0.0..=t_max).contains(&t) && !self.contains(t))
    }
}

/// A finite realization of the disaster field on a window.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    dimension: usize,
    window: Window,
    disasters: Vec<Disaster>,
}

impl Environment {
    /// Validates, sorts by time (ties by lexicographic position) and rejects
    /// duplicate points.
    pub fn new(window: Window, mut disasters: Vec<Disaster>) -> Result<Self> {
        let dimension = window.dimension();
        if let Some(d) = disasters.iter().find(|d| !window.contains(d)) {
            return invalid(format!("disaster at time {} lies outside the window", d.time));
        }
        disasters.sort_by(Disaster::order);
        if disasters.windows(2).any(|w| w[0] == w[1]) {
            return invalid("duplicate disasters");
        }
        Ok(Self { dimension, window, disasters })
    }

    pub fn empty(window: Window) -> Self {
        Self { dimension: window.dimension(), window, disasters: Vec::new() }
    }

    fn from_sorted(window: Window, disasters: Vec<Disaster>) -> Self {
        Self { dimension: window.dimension(), window, disasters }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn disasters(&self) -> &[Disaster] {
        &self.disasters
    }

    pub fn len(&self) -> usize {
        self.disasters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disasters.is_empty()
    }

    /// Number of disasters with time in `[lo, hi)`.
    pub fn count_in(&self, lo: f64, hi: f64) -> usize {
        let a = self.disasters.partition_point(|d| d.time < lo);
        let b = self.disasters.partition_point(|d| d.time < hi);
        b - a
    }

    /// Keeps exactly the disasters whose times lie in `keep`.
    pub fn restrict(&self, keep: &TimeSet) -> Self {
        let kept = self.disasters.iter().filter(|d| keep.contains(d.time)).cloned().collect();
        Self::from_sorted(self.window.clone(), kept)
    }

    /// The restriction to the complement of `[lo, hi]`.
    pub fn without(&self, lo: f64, hi: f64) -> Self {
        self.restrict(&TimeSet::closed(lo, hi).complement(self.window.t_max))
    }

    /// Maps `(t, x)` to `(t - dt, x - dx)`, dropping points that leave the window.
    pub fn shift(&self, dt: f64, dx: &[f64]) -> Result<Self> {
        if dx.len() != self.dimension {
            return invalid("shift vector has the wrong dimension");
        }
        let mut moved: Vec<Disaster> = self
            .disasters
            .iter()
            .map(|d| Disaster {
                time: d.time - dt,
                position: d.position.iter().zip(dx).map(|(x, s)| x - s).collect(),
            })
            .filter(|d| self.window.contains(d))
            .collect();
        moved.sort_by(Disaster::order);
        Ok(Self::from_sorted(self.window.clone(), moved))
    }

    /// Replaces the disasters of the stripe `[i, i+1)` by a fresh Poisson sample.
    pub fn resample_stripe(&self, i: u64, seed: SeedStream) -> Result<Self> {
        let lo = i as f64;
        if lo >= self.window.t_max {
            return invalid(format!("stripe {i} starts beyond t_max {}", self.window.t_max));
        }
        let hi = (lo + 1.0).min(self.window.t_max);
        let mut rng = seed.rng();
        let mut out: Vec<Disaster> = self
            .disasters
            .iter()
            .filter(|d| d.time < lo || d.time >= hi)
            .cloned()
            .collect();
        sample_points(&mut rng, lo, hi, &self.window, &mut out);
        out.sort_by(Disaster::order);
        out.dedup();
        Ok(Self::from_sorted(self.window.clone(), out))
    }

    pub fn to_json(&self) -> EnvironmentJson {
        EnvironmentJson {
            dimension: self.dimension,
            window: WindowJson { t_max: self.window.t_max, r#box: self.window.space.iter().map(|&(a, b)| [a, b]).collect() },
            disasters: self
                .disasters
                .iter()
                .map(|d| std::iter::once(d.time).chain(d.position.iter().copied()).collect())
                .collect(),
        }
    }

    pub fn from_json(json: &EnvironmentJson) -> Result<Self> {
        if json.window.r#box.len() != json.dimension {
            return invalid("window box does not match dimension");
        }
        let window = Window::new(json.window.t_max, json.window.r#box.iter().map(|p| (p[0], p[1])).collect())?;
        let disasters = json
            .disasters
            .iter()
            .map(|row| {
                if row.len() != json.dimension + 1 {
                    return invalid(format!("disaster row has {} entries, expected {}", row.len(), json.dimension + 1));
                }
                Ok(Disaster::new(row[0], row[1..].to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(window, disasters)
    }
}

/// Wire format: `{dimension, window: {t_max, box: [[lo, hi], ...]}, disasters: [[t, x1..xd], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentJson {
    pub dimension: usize,
    pub window: WindowJson,
    pub disasters: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowJson {
    pub t_max: f64,
    pub r#box: Vec<[f64; 2]>,
}

fn sample_points<R: Rng>(rng: &mut R, t_lo: f64, t_hi: f64, window: &Window, out: &mut Vec<Disaster>) {
    let volume = (t_hi - t_lo) * window.space_volume();
    if !(volume > 0.0) {
        return;
    }
    let count = Poisson::new(volume).expect("finite positive mean").sample(rng) as usize;
    out.reserve(count);
    for _ in 0..count {
        let time = t_lo + (t_hi - t_lo) * rng.random::<f64>();
        let position = window.space.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect();
        out.push(Disaster { time, position });
    }
}

/// Unit-intensity Poisson sample on `window`, deterministic in `seed`.
pub fn sample_environment(window: &Window, seed: SeedStream) -> Environment {
    let mut rng = seed.rng();
    let mut disasters = Vec::new();
    sample_points(&mut rng, 0.0, window.t_max, window, &mut disasters);
    disasters.sort_by(Disaster::order);
    disasters.dedup();
    Environment::from_sorted(window.clone(), disasters)
}

/// Disasters bucketed by unit time cell `floor(s)` and sorted by first
/// coordinate inside each cell, for banded range queries.
#[derive(Debug, Clone)]
pub struct DisasterIndex {
    dimension: usize,
    cells: Vec<Cell>,
}

#[derive(Debug, Clone, Default)]
struct Cell {
    x1: Vec<f64>,
    times: Vec<f64>,
    coords: Vec<f64>,
}

/// A disaster returned by [`DisasterIndex::query`]; `slot` addresses its coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub time: f64,
    cell: u32,
    slot: u32,
}

impl DisasterIndex {
    pub fn new(env: &Environment) -> Self {
        let d = env.dimension;
        let n_cells = env.window.t_max.floor() as usize + 1;
        let mut buckets: Vec<Vec<&Disaster>> = vec![Vec::new(); n_cells];
        for dis in &env.disasters {
            buckets[(dis.time.floor() as usize).min(n_cells - 1)].push(dis);
        }
        let cells = buckets
            .into_iter()
            .map(|mut b| {
                b.sort_by(|a, c| a.position[0].total_cmp(&c.position[0]));
                let mut cell = Cell {
                    x1: Vec::with_capacity(b.len()),
                    times: Vec::with_capacity(b.len()),
                    coords: Vec::with_capacity(b.len() * d),
                };
                for dis in b {
                    cell.x1.push(dis.position[0]);
                    cell.times.push(dis.time);
                    cell.coords.extend_from_slice(&dis.position);
                }
                cell
            })
            .collect();
        Self { dimension: d, cells }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn coords(&self, c: &Candidate) -> &[f64] {
        let d = self.dimension;
        let s = c.slot as usize * d;
        &self.cells[c.cell as usize].coords[s..s + d]
    }

    /// Appends every disaster with time in `[t_lo, t_hi)` whose position lies
    /// in the box `[lo, hi]`, then sorts `out` by time.
    pub fn query(&self, t_lo: f64, t_hi: f64, lo: &[f64], hi: &[f64], out: &mut Vec<Candidate>) {
        out.clear();
        if !(t_hi > t_lo) {
            return;
        }
        let d = self.dimension;
        let first = t_lo.floor().max(0.0) as usize;
        let last = (t_hi.ceil() as usize).min(self.cells.len());
        for ci in first..last {
            let cell = &self.cells[ci];
            let a = cell.x1.partition_point(|x| *x < lo[0]);
            let b = cell.x1.partition_point(|x| *x <= hi[0]);
            for j in a..b {
                let t = cell.times[j];
                if t < t_lo || t >= t_hi {
                    continue;
                }
                if d > 1 {
                    let p = &cell.coords[j * d..(j + 1) * d];
                    if (1..d).any(|k| p[k] < lo[k] || p[k] > hi[k]) {
                        continue;
                    }
                }
                out.push(Candidate { time: t, cell: ci as u32, slot: j as u32 });
            }
        }
        out.sort_by(|a, b| a.time.total_cmp(&b.time));
    }
}
