//! Experiment runner: configuration, Monte Carlo replications over a shared
//! truth/observation sequence, CSV output, N sweeps and the validation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::checks;
use crate::error::{FilterError, Result};
use crate::filters::{epf_step, gpf_step, svrpf_step, upf_step, ParticleSet, StepResult, SvrpfConfig, UkfParams};
use crate::kalman::KalmanFilter;
use crate::metrics::{ir_coverage, mean_sd, rmse, FilterTrace, RunRecord};
use crate::model::{simulate, LinearGaussian, NonlinearGrowth, StateSpaceModel, StateVector};
use crate::region::MinWidth;
use crate::resampling::ResamplingScheme;
use crate::rng::RandomStream;
use crate::svr_density::TubeShape;

/// Every recognised configuration key.
pub const CONFIG_KEYS: &[&str] = &[
    "model.name",
    "model.q",
    "model.r",
    "model.a",
    "model.c",
    "model.x0_mean",
    "model.x0_var",
    "experiment.t",
    "experiment.runs",
    "experiment.seed",
    "experiment.n",
    "experiment.filters",
    "experiment.out",
    "experiment.verbose",
    "filter.resampling",
    "filter.branching.a",
    "filter.branching.b",
    "filter.svrpf.m",
    "filter.svrpf.m_factor",
    "filter.svrpf.gamma",
    "filter.svrpf.epsilon",
    "filter.svrpf.tube",
    "filter.svrpf.bandwidth",
    "filter.svrpf.regularization",
    "filter.svrpf.tol_kkt",
    "filter.svrpf.max_iter",
    "filter.svrpf.min_width",
    "filter.svrpf.max_support",
    "filter.ukf.alpha",
    "filter.ukf.beta",
    "filter.ukf.kappa",
    "sweep.n",
];

/// `filter.svrpf.gamma` -> `SVRPF_FILTER_SVRPF_GAMMA`.
pub fn env_var_name(key: &str) -> String {
    format!("SVRPF_{}", key.to_ascii_uppercase().replace('.', "_"))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(FilterError::Config(format!("line {}: expected key = value", lineno + 1)));
        };
        let key = k.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(FilterError::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
        }
        map.insert(key.to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Growth { q: f64, r: f64, x0_mean: f64, x0_var: f64 },
    Linear { a: f64, c: f64, q: f64, r: f64, x0_mean: f64, x0_var: f64 },
}

/// A constructed model, keeping the concrete type for the Kalman reference.
#[derive(Debug, Clone)]
pub enum ModelInstance {
    Growth(NonlinearGrowth),
    Linear(LinearGaussian),
}

impl ModelInstance {
    pub fn as_dyn(&self) -> &dyn StateSpaceModel {
        match self {
            ModelInstance::Growth(m) => m,
            ModelInstance::Linear(m) => m,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<ModelInstance> {
        Ok(match *self {
            ModelSpec::Growth { q, r, x0_mean, x0_var } => {
                ModelInstance::Growth(NonlinearGrowth::with_initial(q, r, x0_mean, x0_var)?)
            }
            ModelSpec::Linear { a, c, q, r, x0_mean, x0_var } => {
                ModelInstance::Linear(LinearGaussian::scalar(a, c, q, r, x0_mean, x0_var)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterKind {
    Gpf(ResamplingScheme),
    Epf,
    Upf,
    Svrpf,
    Kalman,
}

/// A configured filter and the name it reports under.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub name: String,
    pub kind: FilterKind,
}

impl FilterSpec {
    /// `gpf`, `epf`, `upf`, `svrpf`, `kalman`, or `gpf-<scheme>`; `default`
    /// is the scheme used by the plain names.
    pub fn parse(name: &str, default: ResamplingScheme) -> Result<Self> {
        let kind = match name {
            "gpf" => FilterKind::Gpf(default),
            "epf" => FilterKind::Epf,
            "upf" => FilterKind::Upf,
            "svrpf" => FilterKind::Svrpf,
            "kalman" => FilterKind::Kalman,
            other => match other.strip_prefix("gpf-") {
                Some(scheme) => {
                    let s = match (scheme.parse()?, default) {
                        (ResamplingScheme::Branching { .. }, b @ ResamplingScheme::Branching { .. }) => b,
                        (s, _) => s,
                    };
                    FilterKind::Gpf(s)
                }
                None => return Err(FilterError::Config(format!("unknown filter {other:?}"))),
            },
        };
        Ok(Self {
            name: name.to_string(),
            kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
    pub n: usize,
    pub filters: Vec<FilterSpec>,
    pub out: PathBuf,
    pub verbose: bool,
    pub resampling: ResamplingScheme,
    /// Explicit `M`; otherwise `m_factor * N`.
    pub svrpf_m: Option<usize>,
    pub svrpf_m_factor: f64,
    pub svrpf: SvrpfConfig,
    pub ukf: UkfParams,
    pub sweep_n: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scheme = ResamplingScheme::Systematic;
        Self {
            model: ModelSpec::Growth {
                q: 10.0,
                r: 0.1,
                x0_mean: 0.0,
                x0_var: 5.0,
            },
            horizon: 100,
            runs: 100,
            seed: 1,
            n: 100,
            filters: ["gpf", "epf", "upf", "svrpf"]
                .iter()
                .map(|f| FilterSpec::parse(f, scheme).unwrap())
                .collect(),
            out: PathBuf::from("out"),
            verbose: false,
            resampling: scheme,
            svrpf_m: None,
            svrpf_m_factor: 2.0,
            svrpf: SvrpfConfig::default(),
            ukf: UkfParams::default(),
            sweep_n: vec![50, 100, 200, 500],
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| FilterError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Builds a configuration from key/value pairs over the defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let num = |k: &str, d: f64| -> Result<f64> { get(k).map_or(Ok(d), |v| parse_num(k, v)) };

        let name = get("model.name").unwrap_or("growth");
        let (q_def, r_def, m_def, v_def) = match &cfg.model {
            ModelSpec::Growth { q, r, x0_mean, x0_var } => (*q, *r, *x0_mean, *x0_var),
            ModelSpec::Linear { .. } => unreachable!(),
        };
        cfg.model = match name {
            "growth" => ModelSpec::Growth {
                q: num("model.q", q_def)?,
                r: num("model.r", r_def)?,
                x0_mean: num("model.x0_mean", m_def)?,
                x0_var: num("model.x0_var", v_def)?,
            },
            "linear" => ModelSpec::Linear {
                a: num("model.a", 0.9)?,
                c: num("model.c", 1.0)?,
                q: num("model.q", 1.0)?,
                r: num("model.r", 1.0)?,
                x0_mean: num("model.x0_mean", 0.0)?,
                x0_var: num("model.x0_var", 1.0)?,
            },
            other => return Err(FilterError::Config(format!("unknown model {other:?}"))),
        };

        if let Some(v) = get("experiment.t") {
            cfg.horizon = parse_num("experiment.t", v)?;
        }
        if let Some(v) = get("experiment.runs") {
            cfg.runs = parse_num("experiment.runs", v)?;
        }
        if let Some(v) = get("experiment.seed") {
            cfg.seed = parse_num("experiment.seed", v)?;
        }
        if let Some(v) = get("experiment.n") {
            cfg.n = parse_num("experiment.n", v)?;
        }
        if let Some(v) = get("experiment.out") {
            cfg.out = PathBuf::from(v);
        }
        if let Some(v) = get("experiment.verbose") {
            cfg.verbose = parse_num("experiment.verbose", v)?;
        }

        cfg.resampling = match get("filter.resampling").unwrap_or("systematic") {
            "branching" => ResamplingScheme::Branching {
                a: num("filter.branching.a", 0.25)?,
                b: num("filter.branching.b", 4.0)?,
            },
            other => other.parse()?,
        };
        let branching = ResamplingScheme::Branching {
            a: num("filter.branching.a", 0.25)?,
            b: num("filter.branching.b", 4.0)?,
        };
        if let Some(v) = get("experiment.filters") {
            cfg.filters = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|f| FilterSpec::parse(f, cfg.resampling))
                .collect::<Result<_>>()?;
        } else {
            for f in &mut cfg.filters {
                *f = FilterSpec::parse(&f.name, cfg.resampling)?;
            }
        }
        for f in &mut cfg.filters {
            if let FilterKind::Gpf(ResamplingScheme::Branching { .. }) = f.kind {
                f.kind = FilterKind::Gpf(branching);
            }
        }

        if let Some(v) = get("filter.svrpf.m") {
            cfg.svrpf_m = Some(parse_num("filter.svrpf.m", v)?);
        }
        cfg.svrpf_m_factor = num("filter.svrpf.m_factor", cfg.svrpf_m_factor)?;
        let s = &mut cfg.svrpf;
        s.gamma = num("filter.svrpf.gamma", s.gamma)?;
        if let Some(v) = get("filter.svrpf.epsilon") {
            s.qp.epsilon = Some(parse_num("filter.svrpf.epsilon", v)?);
        }
        if let Some(v) = get("filter.svrpf.tube") {
            s.qp.tube = TubeShape::from_str(v)?;
        }
        if let Some(v) = get("filter.svrpf.bandwidth") {
            s.bandwidth = Some(vec![parse_num("filter.svrpf.bandwidth", v)?]);
        }
        s.qp.regularization = num("filter.svrpf.regularization", s.qp.regularization)?;
        s.qp.tol_kkt = num("filter.svrpf.tol_kkt", s.qp.tol_kkt)?;
        if let Some(v) = get("filter.svrpf.max_iter") {
            s.qp.max_iterations = parse_num("filter.svrpf.max_iter", v)?;
        }
        if let Some(v) = get("filter.svrpf.min_width") {
            s.min_width = MinWidth::Absolute(parse_num("filter.svrpf.min_width", v)?);
        }
        if let Some(v) = get("filter.svrpf.max_support") {
            let cap: usize = parse_num("filter.svrpf.max_support", v)?;
            s.max_support = (cap > 0).then_some(cap);
        }
        cfg.ukf = UkfParams {
            alpha: num("filter.ukf.alpha", cfg.ukf.alpha)?,
            beta: num("filter.ukf.beta", cfg.ukf.beta)?,
            kappa: num("filter.ukf.kappa", cfg.ukf.kappa)?,
        };
        if let Some(v) = get("sweep.n") {
            cfg.sweep_n = parse_list("sweep.n", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// File (if any), then `SVRPF_*` environment overrides looked up through `env`.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_config_text(&std::fs::read_to_string(p)?)?,
            None => BTreeMap::new(),
        };
        for key in CONFIG_KEYS {
            if let Some(v) = env(&env_var_name(key)) {
                pairs.insert(key.to_string(), v);
            }
        }
        Self::from_pairs(&pairs)
    }

    /// `M` in effect for the configured `N`.
    pub fn m(&self) -> usize {
        self.svrpf_m
            .unwrap_or_else(|| (self.svrpf_m_factor * self.n as f64).round() as usize)
    }

    pub fn svrpf_config(&self) -> SvrpfConfig {
        SvrpfConfig {
            n: self.n,
            m: self.m(),
            ..self.svrpf.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FilterError::Config(msg));
        if self.horizon < 1 {
            return bad("experiment.t must be >= 1".into());
        }
        if self.n < 2 {
            return bad("experiment.n must be >= 2".into());
        }
        if self.runs < 1 {
            return bad("experiment.runs must be >= 1".into());
        }
        if self.filters.is_empty() {
            return bad("experiment.filters is empty".into());
        }
        if self.filters.iter().any(|f| f.kind == FilterKind::Svrpf) && self.m() < self.n {
            return bad(format!("filter.svrpf.m = {} is below N = {}", self.m(), self.n));
        }
        let kalman = self.filters.iter().any(|f| f.kind == FilterKind::Kalman);
        if kalman && !matches!(self.model, ModelSpec::Linear { .. }) {
            return bad("the kalman filter needs model.name = linear".into());
        }
        self.svrpf_config().validate()
    }
}

fn diagnostics_row(trace: &mut FilterTrace, out: &StepResult) {
    let d = &out.diagnostics;
    trace.estimates.push(out.estimate.clone());
    trace.ir.push(d.ir.clone());
    trace.pd.push(d.pd);
    trace.ess.push(d.ess);
    trace.ms.push(d.elapsed.as_secs_f64() * 1e3);
}

fn run_filter(
    cfg: &ExperimentConfig,
    model: &ModelInstance,
    spec: &FilterSpec,
    observations: &[StateVector],
    rng: &mut RandomStream,
    run: usize,
) -> FilterTrace {
    let mut trace = FilterTrace::new(&spec.name);
    let dynm = model.as_dyn();
    if spec.kind == FilterKind::Kalman {
        let ModelInstance::Linear(lin) = model else {
            trace.error = Some("kalman filter requires the linear model".into());
            return trace;
        };
        let mut kf = KalmanFilter::new(lin);
        for y in observations {
            let start = std::time::Instant::now();
            let mean = kf.step(y).mean.clone();
            trace.estimates.push(mean);
            trace.ir.push(None);
            trace.pd.push(f64::NAN);
            trace.ess.push(f64::NAN);
            trace.ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        return trace;
    }
    let svr = cfg.svrpf_config();
    let mut set = match ParticleSet::from_prior(dynm, cfg.n, rng) {
        Ok(s) => s,
        Err(e) => {
            trace.error = Some(e.to_string());
            return trace;
        }
    };
    for y in observations {
        let out = match &spec.kind {
            FilterKind::Gpf(scheme) => gpf_step(dynm, &set, y, *scheme, rng),
            FilterKind::Epf => epf_step(dynm, &set, y, cfg.resampling, rng),
            FilterKind::Upf => upf_step(dynm, &set, y, cfg.resampling, rng, cfg.ukf),
            FilterKind::Svrpf => svrpf_step(dynm, &set, y, &svr, rng),
            FilterKind::Kalman => unreachable!(),
        };
        match out {
            Ok(out) => {
                if cfg.verbose {
                    if let Some(q) = &out.diagnostics.qp {
                        eprintln!(
                            "run {run} t {} {}: qp iterations {} residual {:.3e} epsilon {:.3e} retries {}",
                            out.posterior.time, spec.name, q.iterations, q.max_residual, q.epsilon, q.retries
                        );
                    }
                }
                diagnostics_row(&mut trace, &out);
                set = out.posterior;
            }
            Err(e) => {
                eprintln!("run {run} {}: {e}", spec.name);
                trace.error = Some(e.to_string());
                break;
            }
        }
    }
    trace
}

/// One replication: a trajectory from stream `(seed, run)` and every filter on
/// its observations with its own split stream.
pub fn run_once(cfg: &ExperimentConfig, model: &ModelInstance, run: usize) -> RunRecord {
    let mut rng = RandomStream::new(cfg.seed, run as u64);
    let mut streams = rng.split(cfg.filters.len());
    let mut record = RunRecord {
        run,
        seed: cfg.seed,
        ..Default::default()
    };
    let traj = match simulate(model.as_dyn(), cfg.horizon, &mut rng) {
        Ok(t) => t,
        Err(e) => {
            for spec in &cfg.filters {
                let mut trace = FilterTrace::new(&spec.name);
                trace.error = Some(format!("simulation failed: {e}"));
                record.filters.push(trace);
            }
            return record;
        }
    };
    record.truth = traj.states;
    for (spec, stream) in cfg.filters.iter().zip(streams.iter_mut()) {
        let trace = run_filter(cfg, model, spec, &traj.observations, stream, run);
        record.filters.push(trace);
    }
    record
}

/// Runs every replication, in parallel, returned in run order.
pub fn run_records(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    Ok((0..cfg.runs).into_par_iter().map(|r| run_once(cfg, &model, r)).collect())
}

/// Summary statistics for one filter over the non-failed runs.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSummary {
    pub filter: String,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub coverage: f64,
    pub ms_mean: f64,
    pub failures: usize,
    /// Per-run RMSE of the non-failed runs, in run order.
    pub rmse: Vec<f64>,
}

pub fn summarize(cfg: &ExperimentConfig, records: &[RunRecord]) -> Vec<FilterSummary> {
    cfg.filters
        .iter()
        .map(|spec| {
            let mut rmses = Vec::new();
            let mut ms = Vec::new();
            let mut failures = 0;
            for rec in records {
                match rec.trace(&spec.name) {
                    Some(tr) if !tr.failed() => {
                        rmses.push(rmse(&tr.estimates, &rec.truth).unwrap_or(f64::NAN));
                        ms.extend(&tr.ms);
                    }
                    _ => failures += 1,
                }
            }
            let (rmse_mean, rmse_sd) = mean_sd(&rmses);
            FilterSummary {
                filter: spec.name.clone(),
                rmse_mean,
                rmse_sd,
                coverage: ir_coverage(records, &spec.name),
                ms_mean: mean_sd(&ms).0,
                failures,
                rmse: rmses,
            }
        })
        .collect()
}

/// Floats with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(";")
}

pub const STEPS_HEADER: &str = "run,t,filter,truth,estimate,ir_lo,ir_hi,pd,ess,ms";
pub const SUMMARY_HEADER: &str = "filter,rmse_mean,rmse_sd,coverage,ms_mean,failures";
pub const SWEEP_HEADER: &str = "filter,n,rmse_mean,rmse_sd,ms_mean";

/// Long-format per-step rows; vector fields are `;`-separated.
pub fn steps_csv(records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str(STEPS_HEADER);
    out.push('\n');
    for rec in records {
        for tr in &rec.filters {
            for (k, est) in tr.estimates.iter().enumerate() {
                let (lo, hi) = match &tr.ir[k] {
                    Some(ir) => (fmt_vec(ir.lo()), fmt_vec(ir.hi())),
                    None => ("NaN".to_string(), "NaN".to_string()),
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    rec.run,
                    k + 1,
                    tr.filter,
                    fmt_vec(rec.truth[k].as_slice()),
                    fmt_vec(est.as_slice()),
                    lo,
                    hi,
                    fmt_f64(tr.pd[k]),
                    fmt_f64(tr.ess[k]),
                    fmt_f64(tr.ms[k]),
                );
            }
        }
    }
    out
}

pub fn summary_csv(summaries: &[FilterSummary]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.filter,
            fmt_f64(s.rmse_mean),
            fmt_f64(s.rmse_sd),
            fmt_f64(s.coverage),
            fmt_f64(s.ms_mean),
            s.failures
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct OutputBundle {
    pub records: Vec<RunRecord>,
    pub summaries: Vec<FilterSummary>,
    pub steps_csv: String,
    pub summary_csv: String,
}

impl OutputBundle {
    /// Writes `steps.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("steps.csv"), &self.steps_csv)?;
        std::fs::write(dir.join("summary.csv"), &self.summary_csv)?;
        Ok(())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<OutputBundle> {
    let records = run_records(cfg)?;
    let summaries = summarize(cfg, &records);
    Ok(OutputBundle {
        steps_csv: steps_csv(&records),
        summary_csv: summary_csv(&summaries),
        records,
        summaries,
    })
}

/// One summary row per `(filter, N)`; `M` follows `N` unless fixed explicitly.
pub fn run_sweep(cfg: &ExperimentConfig, n_values: &[usize]) -> Result<String> {
    if n_values.is_empty() {
        return Err(FilterError::Config("sweep needs at least one N".into()));
    }
    if n_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FilterError::Config("sweep N values must be strictly ascending".into()));
    }
    let mut out = String::new();
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    for &n in n_values {
        let mut c = cfg.clone();
        c.n = n;
        let records = run_records(&c)?;
        for s in summarize(&c, &records) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.filter,
                n,
                fmt_f64(s.rmse_mean),
                fmt_f64(s.rmse_sd),
                fmt_f64(s.ms_mean)
            );
        }
    }
    Ok(out)
}

/// One line of the validation report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured <= threshold`.
    pub fn at_most(name: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            threshold,
            passed: measured <= threshold,
        }
    }

    /// Passes when `measured >= threshold`.
    pub fn at_least(name: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            threshold,
            passed: measured >= threshold,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<44} measured {:.6e} threshold {:.6e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold
            );
        }
        out
    }
}

/// `|Σ w - 1|` against the normalization tolerance.
pub fn check_normalization(weights: &[f64]) -> Check {
    let s = crate::resampling::compensated_sum(weights);
    let bad_entry = weights.iter().any(|w| !(w.is_finite() && *w >= 0.0));
    let measured = if bad_entry { f64::INFINITY } else { (s - 1.0).abs() };
    Check::at_most("weight normalization", measured, 1e-12)
}

/// A reduced-size run of the property suite.
pub fn validate(cfg: &ExperimentConfig) -> Result<Report> {
    let mut checks = Vec::new();
    let mut rng = RandomStream::new(cfg.seed, 0xA11);

    for scheme in [
        ResamplingScheme::Systematic,
        ResamplingScheme::MinimumVariance,
        ResamplingScheme::Residual,
        ResamplingScheme::DEFAULT_BRANCHING,
    ] {
        let out = checks::resampling_unbiasedness(scheme, 10, 100, 2000, &mut rng)?;
        checks.push(Check::at_most(
            &format!("resampling unbiased ({scheme}) max z"),
            out.max_z,
            checks::family_z(out.checks, 0.0027),
        ));
        if scheme == ResamplingScheme::MinimumVariance {
            checks.push(Check::at_most(
                "min-variance max |count - N w|",
                out.max_single_deviation,
                1.0,
            ));
        }
    }

    let mix = checks::MixtureSetup::default();
    let trials = 20;
    let mut ks = Vec::with_capacity(trials);
    for k in 0..trials {
        ks.push(checks::migration_trial(&mix, &mut RandomStream::new(cfg.seed, 0xB00 + k as u64))?);
    }
    let within = |f: &dyn Fn(&checks::MigrationTrial) -> f64| {
        ks.iter().filter(|t| f(t) <= 0.05).count() as f64 / trials as f64
    };
    let worst = |f: &dyn Fn(&checks::MigrationTrial) -> f64| ks.iter().map(f).fold(0.0, f64::max);
    checks.push(Check::at_least("migrated vs source: share of KS <= 0.05", within(&|t| t.ks_prior), 0.95));
    checks.push(Check::at_least("likelihood weights: share of KS <= 0.05", within(&|t| t.ks_likelihood), 0.95));
    checks.push(Check::at_least("mixed weights vs posterior: share of KS <= 0.05", within(&|t| t.ks_posterior), 0.90));
    checks.push(Check::at_most("migrated vs source: max KS", worst(&|t| t.ks_prior), 1.0));
    checks.push(Check::at_most("likelihood weights: max KS", worst(&|t| t.ks_likelihood), 1.0));
    checks.push(Check::at_most("mixed weights vs posterior: max KS", worst(&|t| t.ks_posterior), 1.0));

    let oracle = checks::kalman_agreement(
        &checks::KalmanSetup {
            n: 500,
            m: 1000,
            reps: 6,
            horizon: 20,
        },
        cfg.seed,
    )?;
    for (name, frac) in oracle {
        checks.push(Check::at_least(&format!("kalman oracle ({name}) fraction"), frac, 0.9));
    }

    let s = checks::svr_soundness(200, &mut RandomStream::new(cfg.seed, 0xC00))?;
    checks.push(Check::at_most("svr |sum beta - 1|", s.beta_sum_error, 1e-9));
    checks.push(Check::at_most("svr |mass - 1|", s.mass_error, 1e-3));
    checks.push(Check::at_most("svr residual excess over eps", s.residual_excess, 0.0));
    checks.push(Check::at_most("svr L1 density error", s.l1, 0.15));
    checks.push(check_normalization(&s.beta));

    Ok(Report { checks })
}
