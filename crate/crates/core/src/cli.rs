//! Experiment orchestration behind the `polymer` binary: configuration,
//! seeding, dispatch and the `results.csv` / `results.json` pair.
//!
//! Every number in the outputs is a function of the configuration alone.
//! The worker count changes wall time and nothing else.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dispersion::{dispersion_scan, sample_diagonal_measure, DEFAULT_GRID_STEP};
use crate::environment::{sample_environment, Environment, EnvironmentJson, Window};
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    concentration_scan, estimate_z_crude, estimate_z_smc, extrapolate_p, first_disaster_mechanism, free_energy_curve,
    stripe_influence, superadditivity_check, EnvRun, FreeEnergyPoint,
};
use crate::path_survival::{oracle_survival_quadrature, Beta};
use crate::rng::SeedStream;
use crate::smc::{Resampling, SmcConfig, Target};
use crate::strategy::{orderstat_identities, simulate_strategy};

/// Header shared by every experiment that reports estimates.
pub const ESTIMATE_HEADER: &str = "quantity,beta,t,env_batch,value,stderr,n,censored_count";
pub const SAMPLE_ENV_HEADER: &str = "index,time,x1";
pub const STRATEGY_HEADER: &str = "env,strategy,strategy_stderr,tube,tube_stderr,disasters,renewals";
pub const ORDERSTAT_HEADER: &str = "test,k,statistic,p_value,n,passes";
pub const NONINTEGRABILITY_HEADER: &str = "variant,m,mean,stderr";
/// Expected disaster count above which an environment is refused.
pub const MAX_EXPECTED_DISASTERS: f64 = 2e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SampleEnv,
    EstimateZ,
    FreeEnergy,
    BetaSweep,
    Superadditivity,
    Concentration,
    StripeInfluence,
    StrategyVerify,
    OrderstatCheck,
    Dispersion,
    Nonintegrability,
}

impl Experiment {
    pub fn name(self) -> String {
        self.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
    }

    /// CSV header; `sample-env` adds `x2, ..., xd` in higher dimensions.
    pub fn header(self) -> &'static str {
        match self {
            Experiment::SampleEnv => SAMPLE_ENV_HEADER,
            Experiment::StrategyVerify => STRATEGY_HEADER,
            Experiment::OrderstatCheck => ORDERSTAT_HEADER,
            Experiment::Nonintegrability => NONINTEGRABILITY_HEADER,
            _ => ESTIMATE_HEADER,
        }
    }
}

/// Full description of a run. Every field has a default; a JSON file may set
/// any subset and command-line flags override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub dim: usize,
    pub beta: Beta,
    /// Grid for `beta-sweep`.
    pub betas: Vec<Beta>,
    /// Horizons, strictly increasing. Single-horizon experiments use the first.
    pub t: Vec<f64>,
    /// First length in `superadditivity`; the second is `t[0]`.
    pub s: f64,
    pub n_env: usize,
    pub smc: SmcConfig,
    /// Crude Monte Carlo paths in `estimate-z` (0 skips it) and paths per
    /// plan in `strategy-verify`.
    pub n_paths: usize,
    /// Samples in `orderstat-check` and `nonintegrability`.
    pub n_samples: usize,
    /// Values of `k` in `orderstat-check`.
    pub k: Vec<usize>,
    /// Stripe index `r` in `stripe-influence`.
    pub stripe: u64,
    /// Truncation levels `M` in `nonintegrability`.
    pub m_grid: Vec<f64>,
    pub grid_step: f64,
    /// Serialized environment for `estimate-z` and `strategy-verify`.
    pub env: Option<PathBuf>,
    /// `estimate-z` only: ignore disasters before time 1.
    pub modified: bool,
    /// `estimate-z` only: restrict to the truncation event.
    pub truncated: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::FreeEnergy,
            seed: 1,
            dim: 1,
            beta: Beta::Infinite,
            betas: [0.0, 0.5, 1.0, 2.0, 4.0, 8.0].into_iter().map(Beta::Finite).chain([Beta::Infinite]).collect(),
            t: vec![8.0, 16.0, 32.0, 64.0],
            s: 4.0,
            n_env: 20,
            smc: SmcConfig::default(),
            n_paths: 20_000,
            n_samples: 100_000,
            k: vec![2, 3, 5],
            stripe: 0,
            m_grid: vec![1e2, 1e3, 1e4],
            grid_step: DEFAULT_GRID_STEP,
            env: None,
            modified: false,
            truncated: false,
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.smc.validate()?;
        if self.t.is_empty() || self.t.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return invalid("t must be a non-empty list of positive horizons");
        }
        if self.t.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("t grid must be strictly increasing");
        }
        if self.dim == 0 {
            return invalid("dim must be >= 1");
        }
        if self.n_env == 0 {
            return invalid("n_env must be >= 1");
        }
        if self.betas.is_empty() {
            return invalid("betas must not be empty");
        }
        if !(self.s > 0.0) {
            return invalid("s must be > 0");
        }
        let horizon = self.t.last().copied().unwrap_or(0.0) + if self.experiment == Experiment::Superadditivity { self.s } else { 0.0 };
        let expected = Window::for_horizon(horizon, self.dim)?.volume();
        if expected > MAX_EXPECTED_DISASTERS && self.experiment != Experiment::Nonintegrability && self.experiment != Experiment::OrderstatCheck {
            return invalid(format!(
                "environment for t = {horizon}, d = {} would hold about {expected:.3e} disasters (limit {MAX_EXPECTED_DISASTERS:e})",
                self.dim
            ));
        }
        Ok(())
    }

    fn run(&self) -> EnvRun {
        EnvRun { dimension: self.dim, n_env: self.n_env, config: self.smc, seed: SeedStream::new(self.seed) }
    }

    fn horizon(&self) -> f64 {
        self.t[0]
    }
}

/// Command-line flags. Anything given here overrides the `--config` file.
#[derive(Debug, Parser)]
#[command(name = "polymer", version, about = "Brownian polymer among Poissonian disasters: experiments")]
pub struct Args {
    /// Experiment to run.
    pub experiment: Experiment,
    /// JSON file with any subset of the configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Inverse temperature: a number >= 0 or "inf".
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<Beta>,
    /// Comma-separated betas for beta-sweep.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub betas: Option<Vec<Beta>>,
    /// Comma-separated horizons.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub t: Option<Vec<f64>>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub n_env: Option<usize>,
    /// Total particles across islands.
    #[arg(long)]
    pub n_particles: Option<usize>,
    #[arg(long)]
    pub islands: Option<usize>,
    #[arg(long)]
    pub ess_threshold: Option<f64>,
    #[arg(long)]
    pub slab: Option<f64>,
    #[arg(long)]
    pub resampling: Option<Resampling>,
    #[arg(long)]
    pub n_paths: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub stripe: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub m_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Serialized environment (JSON).
    #[arg(long)]
    pub env: Option<PathBuf>,
    #[arg(long)]
    pub modified: bool,
    #[arg(long)]
    pub truncated: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; overrides POLYMER_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Args {
    /// File configuration (or defaults) with flags applied on top.
    pub fn to_config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => ExperimentConfig::default(),
        };
        c.experiment = self.experiment;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        set!(
            seed => seed, dim => dim, beta => beta, betas => betas, t => t, s => s, n_env => n_env,
            n_particles => smc.n_particles, islands => smc.islands, ess_threshold => smc.ess_threshold,
            slab => smc.slab, resampling => smc.resampling, n_paths => n_paths, n_samples => n_samples,
            k => k, stripe => stripe, m_grid => m_grid, grid_step => grid_step, out => out,
        );
        if self.env.is_some() {
            c.env = self.env.clone();
        }
        c.modified |= self.modified;
        c.truncated |= self.truncated;
        Ok(c)
    }

    /// `--threads`, else `POLYMER_THREADS`, else the rayon default.
    pub fn threads(&self) -> Option<usize> {
        self.threads.or_else(|| std::env::var("POLYMER_THREADS").ok().and_then(|v| v.parse().ok())).filter(|&n| n > 0)
    }
}

impl Error {
    /// 2 for invalid input, 3 for particle-budget failure, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidArgument(_)
            | Error::WindowTooSmall { .. }
            | Error::OracleScaleExceeded(_)
            | Error::DegenerateDesign(_)
            | Error::EmptyMeasure
            | Error::Json(_) => 2,
            Error::ParticleBudget { .. } => 3,
            _ => 1,
        }
    }
}

/// `git describe`-style version baked in at build time.
pub fn version() -> &'static str {
    env!("POLYMER_VERSION")
}

/// Deterministic products of a run: CSV text, the results JSON and any
/// extra files (name, contents).
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub csv: String,
    pub results: Value,
    pub extra: Vec<(String, String)>,
    /// Stream tags consumed below the master seed.
    pub streams: Vec<String>,
}

struct Csv(String);

impl Csv {
    fn new(header: &str) -> Self {
        Csv(format!("{header}\n"))
    }

    fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.0, "{}", fields.join(","));
    }

    #[allow(clippy::too_many_arguments)]
    fn estimate(&mut self, quantity: &str, beta: Option<Beta>, t: Option<f64>, batch: Option<u64>, value: f64, stderr: f64, n: usize, censored: usize) {
        let opt = |v: Option<String>| v.unwrap_or_default();
        self.row(&[
            quantity.to_string(),
            opt(beta.map(|b| b.to_string())),
            opt(t.map(|t| t.to_string())),
            opt(batch.map(|b| b.to_string())),
            value.to_string(),
            stderr.to_string(),
            n.to_string(),
            censored.to_string(),
        ]);
    }

    fn point(&mut self, p: &FreeEnergyPoint, slot: usize) {
        self.estimate("a_hat", Some(p.beta), Some(p.t), Some(slot as u64), p.a_hat.value, p.a_hat.stderr, p.a_hat.n, p.censored);
        self.estimate("a_over_t", Some(p.beta), Some(p.t), Some(slot as u64), p.a_hat.value / p.t, p.a_hat.stderr / p.t, p.a_hat.n, p.censored);
    }
}

fn load_env(path: &Path) -> Result<Environment> {
    let json: EnvironmentJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Environment::from_json(&json)
}

/// Runs the configured experiment without touching the filesystem beyond
/// reading `config.env`.
pub fn execute(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    let seed = SeedStream::new(config.seed);
    let role = |r: &str| vec![r.to_string()];
    match config.experiment {
        Experiment::SampleEnv => {
            let t = *config.t.last().expect("validated");
            let window = Window::for_horizon(t, config.dim)?;
            let env = sample_environment(&window, seed.tag("sample-env"));
            let mut header = SAMPLE_ENV_HEADER.to_string();
            for k in 2..=config.dim {
                let _ = write!(header, ",x{k}");
            }
            let mut csv = Csv::new(&header);
            for (i, d) in env.disasters().iter().enumerate() {
                let mut f = vec![i.to_string(), d.time.to_string()];
                f.extend(d.position.iter().map(|x| x.to_string()));
                csv.row(&f);
            }
            let env_json = serde_json::to_string_pretty(&env.to_json())?;
            Ok(Outcome {
                csv: csv.0,
                results: json!({ "t_max": t, "disasters": env.len(), "expected": window.volume() }),
                extra: vec![("env.json".into(), env_json + "\n")],
                streams: role("sample-env"),
            })
        }
        Experiment::EstimateZ => {
            let t = config.horizon();
            let env = match &config.env {
                Some(p) => load_env(p)?,
                None => sample_environment(&Window::for_horizon(t, config.dim)?, seed.tag("estimate-z").tag("env")),
            };
            let target = Target { beta: config.beta, horizon: t, modified: config.modified, truncated: config.truncated };
            let smc = estimate_z_smc(&env, &target, &config.smc, seed.tag("estimate-z").tag("smc"), "estimate-z/smc")?;
            let mut csv = Csv::new(ESTIMATE_HEADER);
            let mut rows = vec![("z_smc", smc.clone())];
            if config.n_paths >= 2 {
                let crude = estimate_z_crude(&env, &target, config.n_paths, seed.tag("estimate-z").tag("crude"), "estimate-z/crude")?;
                rows.push(("z_crude", crude));
            }
            let oracle = if env.dimension() == 1 && env.len() <= 6 && !config.truncated {
                Some(oracle_survival_quadrature(&env, config.beta, t, config.modified)?)
            } else {
                None
            };
            for (name, e) in &rows {
                csv.estimate(name, Some(config.beta), Some(t), Some(0), e.value, e.stderr, e.n, usize::from(e.extinct));
            }
            if let Some(z) = oracle {
                csv.estimate("z_oracle", Some(config.beta), Some(t), Some(0), z, 0.0, 0, 0);
            }
            let estimates: Vec<Value> = rows.iter().map(|(n, e)| json!({ "quantity": n, "estimate": e })).collect();
            Ok(Outcome {
                csv: csv.0,
                results: json!({ "disasters": env.len(), "estimates": estimates, "oracle": oracle }),
                extra: vec![],
                streams: vec!["estimate-z/env".into(), "estimate-z/smc".into(), "estimate-z/crude".into()],
            })
        }
        Experiment::FreeEnergy | Experiment::BetaSweep => {
            let betas = if config.experiment == Experiment::FreeEnergy { vec![config.beta] } else { config.betas.clone() };
            let run = config.run();
            let mut csv = Csv::new(ESTIMATE_HEADER);
            let mut curves = Vec::new();
            let mut p_hats = Vec::new();
            for &beta in &betas {
                let points = free_energy_curve(beta, &config.t, &run)?;
                for (slot, p) in points.iter().enumerate() {
                    csv.point(p, slot);
                }
                let ex = extrapolate_p(&points).ok();
                if let Some(ex) = ex {
                    let n = points.iter().map(|p| p.a_hat.n).sum();
                    let c = points.iter().map(|p| p.censored).sum();
                    csv.estimate("p_hat", Some(beta), None, None, ex.p_hat, ex.stderr, n, c);
                    p_hats.push(ex.p_hat);
                }
                curves.push(json!({ "beta": beta, "points": points, "extrapolation": ex }));
            }
            let monotone = p_hats.len() == betas.len() && p_hats.windows(2).all(|w| w[1] <= w[0]);
            Ok(Outcome {
                csv: csv.0,
                results: json!({ "curves": curves, "p_hat_nonincreasing": monotone }),
                extra: vec![],
                streams: role("free-energy"),
            })
        }
        Experiment::Superadditivity => {
            let t = config.horizon();
            let rep = superadditivity_check(config.beta, config.s, t, &config.run())?;
            let mut csv = Csv::new(ESTIMATE_HEADER);
            for (name, p) in [("a_s", &rep.a_s), ("a_t", &rep.a_t), ("a_st", &rep.a_st)] {
                csv.estimate(name, Some(rep.beta), Some(p.t), None, p.a_hat.value, p.a_hat.stderr, p.a_hat.n, p.censored);
            }
            let n = rep.a_st.a_hat.n;
            csv.estimate("slack", Some(rep.beta), Some(rep.s + rep.t), None, rep.slack, rep.stderr, n, 0);
            csv.estimate("bound", Some(rep.beta), Some(rep.s + rep.t), None, rep.bound, 0.0, 0, 0);
            Ok(Outcome {
                csv: csv.0,
                results: json!({ "report": rep }),
                extra: vec![],
                streams: vec!["superadditivity-s".into(), "superadditivity-t".into(), "superadditivity-st".into()],
            })
        }
        Experiment::Concentration => {
            let (points, rep) = concentration_scan(config.beta, &config.t, &config.run())?;
            let mut csv = Csv::new(ESTIMATE_HEADER);
            for (slot, (row, p)) in rep.rows.iter().zip(&points).enumerate() {
                let se = (row.ci_upper - row.ci_lower) / (2.0 * 1.96);
                csv.estimate("sd_log_z", Some(config.beta), Some(row.t), Some(slot as u64), row.sd, se, row.n, p.censored);
            }
            if let Some(slope) = rep.slope {
                csv.estimate("slope", Some(config.beta), None, None, slope, f64::NAN, rep.rows.len(), 0);
            }
            Ok(Outcome { csv: csv.0, results: json!({ "report": rep, "points": points }), extra: vec![], streams: role("concentration") })
        }
        Experiment::StripeInfluence => {
            let t = config.horizon();
            let (e, censored) = stripe_influence(config.beta, t, config.stripe, &config.run())?;
            let mut csv = Csv::new(ESTIMATE_HEADER);
            csv.estimate("stripe_influence", Some(config.beta), Some(t), Some(config.stripe), e.value, e.stderr, e.n, censored);
            Ok(Outcome {
                csv: csv.0,
                results: json!({ "stripe": config.stripe, "estimate": e, "censored": censored }),
                extra: vec![],
                streams: role("stripe-influence"),
            })
        }
        Experiment::StrategyVerify => strategy_verify(config, seed),
        Experiment::OrderstatCheck => {
            let mut csv = Csv::new(ORDERSTAT_HEADER);
            let mut reports = Vec::new();
            for &k in &config.k {
                let rep = orderstat_identities(k, config.n_samples, seed.tag("orderstat").index(k as u64))?;
                let mut push = |name: &str, stat: f64, p: f64, n: usize, pass: bool| {
                    csv.row(&[name.into(), k.to_string(), stat.to_string(), p.to_string(), n.to_string(), pass.to_string()]);
                };
                push("pmf_chi_square", rep.pmf_test.statistic, rep.pmf_test.p_value, rep.pmf_test.n, rep.pmf_passes());
                push("gamma_ks", rep.gamma_test.statistic, rep.gamma_test.p_value, rep.gamma_test.n, rep.gamma_passes());
                for r in &rep.renyi {
                    push(&format!("renyi[{}]", r.variant), f64::NAN, r.min_p_value, rep.gamma_test.n, r.passes);
                }
                let ind = &rep.independence_test;
                push("independence", ind.statistic, ind.p_value, ind.n, rep.independence_passes());
                reports.push(rep);
            }
            Ok(Outcome { csv: csv.0, results: json!({ "reports": reports }), extra: vec![], streams: role("orderstat") })
        }
        Experiment::Dispersion => dispersion_experiment(config),
        Experiment::Nonintegrability => {
            let horizon = *config.t.last().expect("validated");
            let rep = first_disaster_mechanism(&config.m_grid, horizon, config.n_samples, seed.tag("nonintegrability"))?;
            let mut csv = Csv::new(NONINTEGRABILITY_HEADER);
            for (variant, rows) in [("plain", &rep.plain), ("modified", &rep.modified)] {
                for r in rows {
                    csv.row(&[variant.into(), r.m.to_string(), r.mean.to_string(), r.stderr.to_string()]);
                }
            }
            Ok(Outcome { csv: csv.0, results: json!({ "report": rep }), extra: vec![], streams: role("nonintegrability") })
        }
    }
}

fn strategy_verify(config: &ExperimentConfig, seed: SeedStream) -> Result<Outcome> {
    if config.dim != 1 {
        return invalid("strategy-verify is one-dimensional");
    }
    let t = config.horizon();
    let run = config.run();
    let envs: Vec<Environment> = match &config.env {
        Some(p) => vec![load_env(p)?],
        None => (0..config.n_env as u64).map(|i| run.environment("strategy", 0, i, t)).collect::<Result<_>>()?,
    };
    let mut csv = Csv::new(STRATEGY_HEADER);
    let mut rows = Vec::new();
    for (i, env) in envs.iter().enumerate() {
        let est = simulate_strategy(env, t, 0.0, None, config.n_paths, seed.tag("strategy").tag("paths").index(i as u64))?;
        csv.row(&[
            i.to_string(),
            est.strategy.value.to_string(),
            est.strategy.stderr.to_string(),
            est.tube.value.to_string(),
            est.tube.stderr.to_string(),
            est.trace.len().to_string(),
            est.trace.renewals.len().to_string(),
        ]);
        rows.push(json!({ "strategy": est.strategy, "tube": est.tube, "renewals": est.trace.renewals }));
    }
    Ok(Outcome { csv: csv.0, results: json!({ "t": t, "environments": rows }), extra: vec![], streams: vec!["strategy".into()] })
}

fn dispersion_experiment(config: &ExperimentConfig) -> Result<Outcome> {
    let run = config.run();
    let scan = dispersion_scan(config.beta, &config.t, &run, config.grid_step)?;
    let calibration = dispersion_scan(Beta::Finite(0.0), &config.t, &run, config.grid_step)?;
    let threshold = calibration.floor_threshold();
    let mut csv = Csv::new(ESTIMATE_HEADER);
    for (slot, f) in scan.floors.iter().enumerate() {
        let b = Some(config.beta);
        for p in [0, 2] {
            let r = scan.row(f.t, p).expect("scan rows cover the grid");
            csv.estimate(&format!("mean_abs_log_m{p}"), b, Some(f.t), Some(slot as u64), r.mean_abs_log, r.stderr, r.values.len(), f.censored);
        }
        csv.estimate("min_m0_t4", b, Some(f.t), Some(slot as u64), f.min_m0_t4, f64::NAN, f.n_env - f.censored, f.censored);
        csv.estimate("min_m0_t2", b, Some(f.t), Some(slot as u64), f.min_m0_t2, f64::NAN, f.n_env - f.censored, f.censored);
    }
    csv.estimate("floor_threshold", Some(Beta::Finite(0.0)), None, None, threshold, f64::NAN, run.n_env, 0);
    if let Some(e) = scan.m0_exponent {
        csv.estimate("m0_exponent", Some(config.beta), None, None, e, f64::NAN, config.t.len(), 0);
    }
    let floor_holds: Vec<bool> = scan.floors.iter().map(|f| f.min_m0_t4 >= threshold).collect();
    let t = *config.t.last().expect("validated");
    let slot = (config.t.len() - 1) as u64;
    let env = run.environment("dispersion", slot, 0, t)?;
    let sample = sample_diagonal_measure(&env, config.beta, t / 2.0, t, &config.smc, run.path_seed("dispersion", slot, 0))?;
    let mut measure = Vec::new();
    sample.measure.write_csv(&mut measure)?;
    Ok(Outcome {
        csv: csv.0,
        results: json!({ "scan": scan, "calibration": calibration, "threshold": threshold, "floor_holds": floor_holds }),
        extra: vec![("measure.csv".into(), String::from_utf8(measure).expect("ascii csv"))],
        streams: vec!["dispersion".into()],
    })
}

/// Runs `config` and writes `results.csv`, `results.json` and any extra
/// files into `config.out`.
pub fn run(config: &ExperimentConfig, threads: Option<usize>) -> Result<Outcome> {
    let start = Instant::now();
    let outcome = execute(config)?;
    let wall = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(&config.out)?;
    std::fs::write(config.out.join("results.csv"), &outcome.csv)?;
    for (name, body) in &outcome.extra {
        std::fs::write(config.out.join(name), body)?;
    }
    let doc = json!({
        "experiment": config.experiment.name(),
        "version": version(),
        "config": config,
        "seed_provenance": { "master": config.seed, "streams": outcome.streams },
        "wall_time_seconds": wall,
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "results": outcome.results,
    });
    std::fs::write(config.out.join("results.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(outcome)
}

/// Binary entry point after argument parsing; returns the exit status.
pub fn main_with(args: Args) -> u8 {
    let threads = args.threads();
    if let Some(n) = threads {
        // Fails only if a global pool already exists, which then serves as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = args.to_config().and_then(|c| run(&c, threads));
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_kebab_case() {
        assert_eq!(Experiment::OrderstatCheck.name(), "orderstat-check");
        assert_eq!(Experiment::SampleEnv.name(), "sample-env");
        let v: ExperimentConfig = serde_json::from_str(r#"{"experiment": "beta-sweep", "beta": "inf"}"#).unwrap();
        assert_eq!(v.experiment, Experiment::BetaSweep);
        assert!(v.beta.is_infinite());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 9, "n_env": 7, "smc": {"n_particles": 64, "islands": 2, "slab": 1.0, "ess_threshold": 0.5, "resampling": "systematic"}}"#).unwrap();
        let args = Args::try_parse_from(["polymer", "free-energy", "--config", path.to_str().unwrap(), "--n-env", "3", "--beta", "2.5", "--t", "1,2"]).unwrap();
        let c = args.to_config().unwrap();
        assert_eq!((c.seed, c.n_env, c.smc.n_particles), (9, 3, 64));
        assert_eq!(c.beta, Beta::Finite(2.5));
        assert_eq!(c.t, vec![1.0, 2.0]);
    }

    #[test]
    fn validation() {
        assert!(Args::try_parse_from(["polymer", "free-energy", "--beta", "-1"]).is_err());
        assert!(Args::try_parse_from(["polymer", "no-such-thing"]).is_err());
        let bad = ExperimentConfig { t: vec![4.0, 2.0], ..ExperimentConfig::default() };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let huge = ExperimentConfig { dim: 3, ..ExperimentConfig::default() };
        assert!(huge.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
        assert_eq!(Error::ParticleBudget { t: 1.0, censored: 1, total: 1 }.exit_code(), 3);
    }

    #[test]
    fn unknown_config_field_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn estimate_header_row_widths() {
        let mut c = Csv::new(ESTIMATE_HEADER);
        c.estimate("q", Some(Beta::Infinite), None, Some(2), 0.5, 0.1, 3, 0);
        let line = c.0.lines().nth(1).unwrap();
        assert_eq!(line, "q,inf,,2,0.5,0.1,3,0");
        assert_eq!(line.split(',').count(), ESTIMATE_HEADER.split(',').count());
    }
}
