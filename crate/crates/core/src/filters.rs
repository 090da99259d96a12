//! One-step particle filter updates: GPF, EPF, UPF and SVRPF.
//!
//! Every step maps the posterior set at `t-1` plus `y_t` to an estimate, the
//! posterior set at `t` and diagnostics. GPF/EPF/UPF compute the estimate from
//! the pre-resample weights and resample afterwards; SVRPF replaces resampling
//! by uniform placement in an amplified importance region.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};
use crate::model::{GaussianNoise, ObservationVector, StateSpaceModel, StateVector};
use crate::region::{amplify_ir, compute_ir, compute_pd, uniform_placement, ImportanceRegion, MinWidth};
use crate::resampling::{resample, systematic_resample_n, ResampleOutcome, ResamplingScheme, Weights};
use crate::rng::RandomStream;
use crate::svr_density::{fit_particles, FitDiagnostics, KernelPair, QpSettings, SvrDensityModel};

/// Weighted particle cloud; column `i` of `states` carries `weights[i]`.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub states: DMatrix<f64>,
    pub weights: Weights,
    pub time: usize,
}

impl ParticleSet {
    pub fn new(states: DMatrix<f64>, weights: Weights, time: usize) -> Result<Self> {
        if states.ncols() == 0 {
            return Err(FilterError::EmptyParticles);
        }
        if states.ncols() != weights.len() {
            return Err(FilterError::LengthMismatch(states.ncols(), weights.len()));
        }
        Ok(Self { states, weights, time })
    }

    /// `n` draws from the initial law with uniform weights, at `t = 0`.
    pub fn from_prior<M: StateSpaceModel + ?Sized>(model: &M, n: usize, rng: &mut RandomStream) -> Result<Self> {
        if n == 0 {
            return Err(FilterError::EmptyParticles);
        }
        let d = model.state_dim();
        let mut states = DMatrix::zeros(d, n);
        for i in 0..n {
            states.set_column(i, &model.sample_initial(rng));
        }
        Self::new(states, Weights::uniform(n), 0)
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn particle(&self, i: usize) -> StateVector {
        self.states.column(i).into_owned()
    }

    fn select(&self, outcome: &ResampleOutcome, time: usize) -> Result<Self> {
        let states = DMatrix::from_fn(self.dim(), outcome.len(), |r, c| self.states[(r, outcome.indices[c])]);
        Self::new(states, Weights::normalize(outcome.weights.clone())?, time)
    }
}

/// `Σ_i w_i x_i`.
pub fn estimate_state(particles: &DMatrix<f64>, weights: &Weights) -> StateVector {
    let mut est = DVector::zeros(particles.nrows());
    for (c, &w) in particles.column_iter().zip(weights.as_slice()) {
        if w != 0.0 {
            est.axpy(w, &c, 1.0);
        }
    }
    est
}

/// Per-particle Gaussian proposal `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct KalmanProposal {
    pub mean: StateVector,
    pub cov: DMatrix<f64>,
    /// Covariance was regularized or clamped.
    pub flagged: bool,
    law: GaussianNoise,
}

impl KalmanProposal {
    pub fn new(mean: StateVector, cov: DMatrix<f64>) -> Result<Self> {
        let (cov, flagged) = sanitize_cov(cov);
        let law = GaussianNoise::new(mean.clone(), cov.clone())?;
        Ok(Self { mean, cov, flagged, law })
    }

    pub fn sample(&self, rng: &mut RandomStream) -> StateVector {
        self.law.sample(rng)
    }

    /// `None` for a singular covariance.
    pub fn log_density(&self, x: &StateVector) -> Option<f64> {
        self.law.log_density(x)
    }
}

/// Symmetrizes and clamps negative eigenvalues; flags clamps below `-1e-10`.
fn sanitize_cov(cov: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (&cov + cov.transpose()) * 0.5;
    if sym.nrows() == 1 {
        let v = sym[(0, 0)];
        return (DMatrix::from_element(1, 1, v.max(0.0)), v < -1e-10);
    }
    if sym.clone().cholesky().is_some() {
        return (sym, false);
    }
    let eig = sym.clone().symmetric_eigen();
    let flagged = eig.eigenvalues.iter().any(|&l| l < -1e-10);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return (sym, flagged);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    ((&out + out.transpose()) * 0.5, flagged)
}

/// Inverse of an innovation covariance, adding `1e-10 I` if it is singular.
fn innovation_inverse(s: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(ch) = s.clone().cholesky() {
        return (ch.inverse(), false);
    }
    let n = s.nrows();
    let reg = s + DMatrix::identity(n, n) * 1e-10;
    let inv = reg.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n, n) * 1e10);
    (inv, true)
}

/// EKF proposal for one particle: predict `N(f(x), Q)` from the particle
/// treated as a point, then update with `y` linearized at `f(x)`.
pub fn ekf_proposal<M: StateSpaceModel + ?Sized>(
    model: &M,
    particle: &StateVector,
    y: &ObservationVector,
    t: usize,
) -> Result<KalmanProposal> {
    let (jf, _) = model.jacobians(particle, t)?;
    let d = model.state_dim();
    let x_pre = model.transition(particle, t);
    let p_prev = DMatrix::<f64>::zeros(d, d);
    let p_pre = &jf * p_prev * jf.transpose() + model.process_noise().cov();
    let (_, jh) = model.jacobians(&x_pre, t)?;
    let s = &jh * &p_pre * jh.transpose() + model.observation_noise().cov();
    let (s_inv, regularized) = innovation_inverse(s);
    let gain = &p_pre * jh.transpose() * s_inv;
    let innovation = y - model.observe(&x_pre) - model.observation_noise().mean();
    let mean = &x_pre + &gain * innovation;
    let cov = &p_pre - &gain * &jh * &p_pre;
    let mut prop = KalmanProposal::new(mean, cov)?;
    prop.flagged |= regularized;
    Ok(prop)
}

/// Scaled unscented transform parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

/// Unscented measurement update of the prior `N(mean, cov)`.
/// Returns the posterior proposal and the predicted observation mean.
pub fn ukf_update<M: StateSpaceModel + ?Sized>(
    model: &M,
    prior_mean: &StateVector,
    prior_cov: &DMatrix<f64>,
    y: &ObservationVector,
    params: UkfParams,
) -> Result<(KalmanProposal, ObservationVector)> {
    let d = prior_mean.len();
    let df = d as f64;
    let lambda = params.alpha * params.alpha * (df + params.kappa) - df;
    let spread = df + lambda;
    if !(spread > 0.0) {
        return Err(FilterError::InvalidArgument(format!(
            "unscented scaling d + lambda must be positive, got {spread}"
        )));
    }
    let (cov, mut flagged) = sanitize_cov(prior_cov * spread);
    let root = match cov.clone().cholesky() {
        Some(ch) => ch.l(),
        None => {
            let eig = cov.symmetric_eigen();
            &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
        }
    };
    let w0m = lambda / spread;
    let w0c = w0m + (1.0 - params.alpha * params.alpha + params.beta);
    let wi = 0.5 / spread;

    let mut sigma = Vec::with_capacity(2 * d + 1);
    sigma.push(prior_mean.clone());
    for k in 0..d {
        sigma.push(prior_mean + root.column(k));
    }
    for k in 0..d {
        sigma.push(prior_mean - root.column(k));
    }
    let ys: Vec<ObservationVector> = sigma.iter().map(|s| model.observe(s)).collect();
    let wm = |i: usize| if i == 0 { w0m } else { wi };
    let wc = |i: usize| if i == 0 { w0c } else { wi };

    let mut y_mean = ys[0].clone() * wm(0);
    for (i, yi) in ys.iter().enumerate().skip(1) {
        y_mean.axpy(wm(i), yi, 1.0);
    }
    let noise = model.observation_noise();
    let y_pred = &y_mean + noise.mean();
    let mut pyy = noise.cov().clone();
    let mut pxy = DMatrix::zeros(d, y_mean.len());
    for (i, (s, yi)) in sigma.iter().zip(&ys).enumerate() {
        let dy = yi - &y_mean;
        let dx = s - prior_mean;
        pyy += &dy * dy.transpose() * wc(i);
        pxy += &dx * dy.transpose() * wc(i);
    }
    let (s_inv, regularized) = innovation_inverse(pyy.clone());
    flagged |= regularized;
    let gain = &pxy * s_inv;
    let mean = prior_mean + &gain * (y - &y_pred);
    let post_cov = prior_cov - &gain * pyy * gain.transpose();
    let mut prop = KalmanProposal::new(mean, post_cov)?;
    prop.flagged |= flagged;
    Ok((prop, y_pred))
}

/// UKF proposal for one particle: prior `N(f(x), Q)`, unscented update with `y`.
pub fn ukf_proposal<M: StateSpaceModel + ?Sized>(
    model: &M,
    particle: &StateVector,
    y: &ObservationVector,
    t: usize,
    params: UkfParams,
) -> Result<KalmanProposal> {
    let x_pre = model.transition(particle, t) + model.process_noise().mean();
    ukf_update(model, &x_pre, model.process_noise().cov(), y, params).map(|(p, _)| p)
}

#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    /// GPF/EPF/UPF: box of the propagated particles; SVRPF: the SVR-IR.
    pub ir: Option<ImportanceRegion>,
    pub pd: f64,
    pub ess: f64,
    pub elapsed: Duration,
    /// Every likelihood hit the floor and the likelihood factor was dropped.
    pub degenerate: bool,
    /// Some proposal covariance was regularized or clamped.
    pub flagged: bool,
    pub qp: Option<FitDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub estimate: StateVector,
    pub posterior: ParticleSet,
    pub diagnostics: StepDiagnostics,
}

/// Log-likelihood per column and whether all of them sit on the floor.
fn log_likelihoods<M: StateSpaceModel + ?Sized>(model: &M, states: &DMatrix<f64>, y: &ObservationVector) -> (Vec<f64>, bool) {
    let floor = model.likelihood_floor().ln();
    let ll: Vec<f64> = states
        .column_iter()
        .map(|c| model.log_likelihood(&c.into_owned(), y))
        .collect();
    let all_floor = ll.iter().all(|&l| l <= floor);
    (ll, all_floor)
}

/// `ln w_prev + correction` combined with the log-likelihoods, or the
/// likelihood dropped when it is uninformative everywhere.
fn combine(log_base: &[f64], ll: &[f64], all_floor: bool) -> Result<Weights> {
    if all_floor {
        return Weights::from_log(log_base).or_else(|_| Ok(Weights::uniform(log_base.len())));
    }
    let lw: Vec<f64> = log_base.iter().zip(ll).map(|(b, l)| b + l).collect();
    Weights::from_log(&lw)
}

fn finish(
    predicted: DMatrix<f64>,
    weights: Weights,
    scheme: ResamplingScheme,
    time: usize,
    mut diagnostics: StepDiagnostics,
    rng: &mut RandomStream,
    start: Instant,
) -> Result<StepResult> {
    let estimate = estimate_state(&predicted, &weights);
    let ir = compute_ir(&predicted)?;
    diagnostics.pd = compute_pd(&ir, predicted.ncols());
    diagnostics.ir = Some(ir);
    diagnostics.ess = weights.ess();
    let outcome = resample(scheme, &weights, rng)?;
    let pre = ParticleSet::new(predicted, weights, time)?;
    let posterior = pre.select(&outcome, time)?;
    diagnostics.elapsed = start.elapsed();
    Ok(StepResult {
        estimate,
        posterior,
        diagnostics,
    })
}

fn log_prior_weights(prev: &ParticleSet) -> Vec<f64> {
    prev.weights.as_slice().iter().map(|w| w.ln()).collect()
}

/// Bootstrap filter: transition prior as proposal.
pub fn gpf_step<M: StateSpaceModel + ?Sized>(
    model: &M,
    prev: &ParticleSet,
    y: &ObservationVector,
    scheme: ResamplingScheme,
    rng: &mut RandomStream,
) -> Result<StepResult> {
    let start = Instant::now();
    let t = prev.time + 1;
    let mut step = || -> Result<StepResult> {
        let mut predicted = DMatrix::zeros(prev.dim(), prev.len());
        for i in 0..prev.len() {
            predicted.set_column(i, &model.transition_sample(&prev.particle(i), t, rng)?);
        }
        let (ll, all_floor) = log_likelihoods(model, &predicted, y);
        let weights = combine(&log_prior_weights(prev), &ll, all_floor)?;
        let diag = StepDiagnostics {
            degenerate: all_floor,
            ..Default::default()
        };
        finish(predicted, weights, scheme, t, diag, rng, start)
    };
    step().map_err(|e| e.at_step(t))
}

fn kalman_proposal_step<M, P>(
    model: &M,
    prev: &ParticleSet,
    y: &ObservationVector,
    scheme: ResamplingScheme,
    rng: &mut RandomStream,
    proposal: P,
) -> Result<StepResult>
where
    M: StateSpaceModel + ?Sized,
    P: Fn(&StateVector, usize) -> Result<KalmanProposal>,
{
    let start = Instant::now();
    let t = prev.time + 1;
    let mut step = || -> Result<StepResult> {
        let n = prev.len();
        let mut predicted = DMatrix::zeros(prev.dim(), n);
        let mut correction = log_prior_weights(prev);
        let mut flagged = false;
        for i in 0..n {
            let x_prev = prev.particle(i);
            let prop = proposal(&x_prev, t)?;
            flagged |= prop.flagged;
            let x = prop.sample(rng);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(FilterError::NonFinite {
                    t,
                    x_prev: x_prev.iter().copied().collect(),
                });
            }
            let log_q = prop
                .log_density(&x)
                .ok_or(FilterError::Unsupported("importance correction for a singular proposal"))?;
            correction[i] += model.log_transition_density(&x, &x_prev, t)? - log_q;
            predicted.set_column(i, &x);
        }
        let (ll, all_floor) = log_likelihoods(model, &predicted, y);
        let weights = combine(&correction, &ll, all_floor)?;
        let diag = StepDiagnostics {
            degenerate: all_floor,
            flagged,
            ..Default::default()
        };
        finish(predicted, weights, scheme, t, diag, rng, start)
    };
    step().map_err(|e| e.at_step(t))
}

/// Particle filter with per-particle EKF proposals.
pub fn epf_step<M: StateSpaceModel + ?Sized>(
    model: &M,
    prev: &ParticleSet,
    y: &ObservationVector,
    scheme: ResamplingScheme,
    rng: &mut RandomStream,
) -> Result<StepResult> {
    kalman_proposal_step(model, prev, y, scheme, rng, |x, t| ekf_proposal(model, x, y, t))
}

/// Particle filter with per-particle UKF proposals.
pub fn upf_step<M: StateSpaceModel + ?Sized>(
    model: &M,
    prev: &ParticleSet,
    y: &ObservationVector,
    scheme: ResamplingScheme,
    rng: &mut RandomStream,
    params: UkfParams,
) -> Result<StepResult> {
    kalman_proposal_step(model, prev, y, scheme, rng, |x, t| ukf_proposal(model, x, y, t, params))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrpfConfig {
    /// Particles carried between steps (`N`).
    pub n: usize,
    /// Points placed in the SVR-IR (`M >= N`).
    pub m: usize,
    pub gamma: f64,
    pub min_width: MinWidth,
    /// Fixed kernel bandwidth per dimension; Silverman's rule when `None`.
    pub bandwidth: Option<Vec<f64>>,
    pub qp: QpSettings,
    /// Cap on distinct support points handed to the QP.
    pub max_support: Option<usize>,
}

impl Default for SvrpfConfig {
    fn default() -> Self {
        Self {
            n: 500,
            m: 1000,
            gamma: 1.5,
            min_width: MinWidth::default(),
            bandwidth: None,
            qp: QpSettings::default(),
            max_support: Some(256),
        }
    }
}

impl SvrpfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.m < self.n {
            return Err(FilterError::InvalidArgument(format!(
                "need 1 <= N <= M, got N={} M={}",
                self.n, self.m
            )));
        }
        if !(self.gamma >= 1.0) {
            return Err(FilterError::InvalidGamma(self.gamma));
        }
        self.qp.validate()
    }
}

/// Result of moving a weighted cloud onto uniformly placed points.
#[derive(Debug, Clone)]
pub struct Migration {
    pub fit: SvrDensityModel,
    pub region: ImportanceRegion,
    pub placed: DMatrix<f64>,
    /// Normalized fitted density at the placed points.
    pub svr_weights: Weights,
}

/// Fits the density of `(predicted, weights)` and places `cfg.m` points in
/// the amplified box of `predicted`, weighted by the fitted density.
pub fn svr_migrate(
    predicted: &DMatrix<f64>,
    weights: &Weights,
    cfg: &SvrpfConfig,
    rng: &mut RandomStream,
) -> Result<Migration> {
    let kernel = match &cfg.bandwidth {
        Some(h) => KernelPair::gaussian(h.clone())?,
        None => KernelPair::silverman(predicted, weights),
    };
    let fit = fit_particles(predicted, weights, &kernel, &cfg.qp, cfg.max_support)?;
    let region = amplify_ir(&compute_ir(predicted)?, cfg.gamma, cfg.min_width)?;
    let placed = uniform_placement(&region, cfg.m, rng)?;
    let dens = fit.eval_density_columns(&placed);
    let svr_weights = Weights::normalize(dens).or_else(|_| Ok::<_, FilterError>(Weights::uniform(cfg.m)))?;
    Ok(Migration {
        fit,
        region,
        placed,
        svr_weights,
    })
}

/// SVR particle filter step. A posterior with more than `cfg.n` points is
/// first reduced to `cfg.n` by systematic resampling.
pub fn svrpf_step<M: StateSpaceModel + ?Sized>(
    model: &M,
    prev: &ParticleSet,
    y: &ObservationVector,
    cfg: &SvrpfConfig,
    rng: &mut RandomStream,
) -> Result<StepResult> {
    let start = Instant::now();
    let t = prev.time + 1;
    let mut step = || -> Result<StepResult> {
        cfg.validate()?;
        let reduced;
        let source = if prev.len() == cfg.n {
            prev
        } else {
            let outcome = systematic_resample_n(&prev.weights, cfg.n, rng);
            reduced = prev.select(&outcome, prev.time)?;
            &reduced
        };
        let mut predicted = DMatrix::zeros(source.dim(), source.len());
        for i in 0..source.len() {
            predicted.set_column(i, &model.transition_sample(&source.particle(i), t, rng)?);
        }
        let mig = svr_migrate(&predicted, &source.weights, cfg, rng)?;
        let (ll, all_floor) = log_likelihoods(model, &mig.placed, y);
        let log_svr: Vec<f64> = mig.svr_weights.as_slice().iter().map(|w| w.ln()).collect();
        let weights = combine(&log_svr, &ll, all_floor)?;
        let estimate = estimate_state(&mig.placed, &weights);
        let diagnostics = StepDiagnostics {
            pd: compute_pd(&mig.region, cfg.m),
            ess: weights.ess(),
            degenerate: all_floor,
            qp: Some(mig.fit.diagnostics().clone()),
            ir: Some(mig.region),
            ..Default::default()
        };
        let posterior = ParticleSet::new(mig.placed, weights, t)?;
        Ok(StepResult {
            estimate,
            posterior,
            diagnostics,
        })
    };
    let mut out = step().map_err(|e| e.at_step(t))?;
    out.diagnostics.elapsed = start.elapsed();
    Ok(out)
}
