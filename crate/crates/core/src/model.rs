//! State-space models `x_t = f(x_{t-1}, t) + u_t`, `y_t = h(x_t) + v_t`.
//!
//! Noise is additive Gaussian by default. A model with a different noise law
//! overrides the provided density methods of [`StateSpaceModel`].

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};
use crate::rng::RandomStream;

pub type StateVector = DVector<f64>;
pub type ObservationVector = DVector<f64>;

/// Smallest likelihood value ever returned, so weight vectors cannot vanish.
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Multivariate normal `N(mean, cov)`, possibly degenerate.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    precision: Option<DMatrix<f64>>,
    log_norm: Option<f64>,
}

impl GaussianNoise {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(FilterError::InvalidArgument(format!(
                "covariance is {}x{}, mean has length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if cov.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
            return Err(FilterError::InvalidArgument("non-finite noise parameters".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let (sqrt, precision, log_norm) = match sym.clone().cholesky() {
            Some(ch) => {
                let l = ch.l();
                let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let precision = ch.inverse();
                (l, Some(precision), Some(-0.5 * (d as f64 * LN_2PI + log_det)))
            }
            None => {
                let eig = sym.clone().symmetric_eigen();
                if eig.eigenvalues.iter().any(|&v| v < -1e-10 * (1.0 + sym.norm())) {
                    return Err(FilterError::InvalidArgument(
                        "covariance is not positive semidefinite".into(),
                    ));
                }
                let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
                (&eig.eigenvectors * root, None, None)
            }
        };
        Ok(Self {
            mean,
            cov: sym,
            sqrt,
            precision,
            log_norm,
        })
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        if var < 0.0 {
            return Err(FilterError::InvalidArgument(format!("negative variance {var}")));
        }
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// True when the covariance is singular (no density exists).
    pub fn is_degenerate(&self) -> bool {
        self.precision.is_none()
    }

    pub fn sample(&self, rng: &mut RandomStream) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.standard_normal());
        &self.mean + &self.sqrt * z
    }

    /// Log density at `mean + offset`.
    pub fn log_density_offset(&self, offset: &DVector<f64>) -> Option<f64> {
        let precision = self.precision.as_ref()?;
        let q = if offset.len() == 1 {
            offset[0] * offset[0] * precision[(0, 0)]
        } else {
            (offset.transpose() * precision * offset)[(0, 0)]
        };
        Some(self.log_norm? - 0.5 * q)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Option<f64> {
        self.log_density_offset(&(x - &self.mean))
    }
}

/// A discrete-time state-space model with additive noise.
pub trait StateSpaceModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    /// Noise-free transition `f(x, t)`.
    fn transition(&self, x: &StateVector, t: usize) -> StateVector;

    /// Noise-free observation map `h(x)`.
    fn observe(&self, x: &StateVector) -> ObservationVector;

    fn process_noise(&self) -> &GaussianNoise;
    fn observation_noise(&self) -> &GaussianNoise;
    fn initial(&self) -> &GaussianNoise;

    fn likelihood_floor(&self) -> f64 {
        LIKELIHOOD_FLOOR
    }

    /// Jacobians `(∂f/∂x, ∂h/∂x)` evaluated at `x`.
    fn jacobians(&self, _x: &StateVector, _t: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Err(FilterError::Unsupported("jacobians"))
    }

    fn sample_initial(&self, rng: &mut RandomStream) -> StateVector {
        self.initial().sample(rng)
    }

    /// `f(x_prev, t) + noise` with the noise supplied by the caller.
    fn transition_with_noise(&self, x_prev: &StateVector, t: usize, noise: &DVector<f64>) -> StateVector {
        self.transition(x_prev, t) + noise
    }

    fn transition_sample(&self, x_prev: &StateVector, t: usize, rng: &mut RandomStream) -> Result<StateVector> {
        let u = self.process_noise().sample(rng);
        let x = self.transition_with_noise(x_prev, t, &u);
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(FilterError::NonFinite {
                t,
                x_prev: x_prev.iter().copied().collect(),
            })
        }
    }

    /// `ln p(y | x)`, never below `ln(likelihood_floor)`.
    fn log_likelihood(&self, x: &StateVector, y: &ObservationVector) -> f64 {
        let floor = self.likelihood_floor().ln();
        let resid = y - self.observe(x);
        match self.observation_noise().log_density_offset(&resid) {
            Some(v) if v.is_finite() => v.max(floor),
            _ => floor,
        }
    }

    fn likelihood(&self, x: &StateVector, y: &ObservationVector) -> f64 {
        let floor = self.likelihood_floor();
        let ll = self.log_likelihood(x, y);
        if ll <= floor.ln() {
            floor
        } else {
            ll.exp().max(floor)
        }
    }

    fn log_transition_density(&self, x: &StateVector, x_prev: &StateVector, t: usize) -> Result<f64> {
        let resid = x - self.transition(x_prev, t);
        self.process_noise()
            .log_density_offset(&resid)
            .ok_or(FilterError::Unsupported("transition density for degenerate process noise"))
    }

    fn transition_density(&self, x: &StateVector, x_prev: &StateVector, t: usize) -> Result<f64> {
        self.log_transition_density(x, x_prev, t).map(f64::exp)
    }
}

/// `x_t = A x_{t-1} + u`, `y_t = C x_t + v`.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    q: GaussianNoise,
    r: GaussianNoise,
    x0: GaussianNoise,
    floor: f64,
}

impl LinearGaussian {
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        m0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || c.ncols() != d || m0.len() != d {
            return Err(FilterError::InvalidArgument("inconsistent linear model dimensions".into()));
        }
        Ok(Self {
            a,
            c,
            q: GaussianNoise::zero_mean(q)?,
            r: GaussianNoise::zero_mean(r)?,
            x0: GaussianNoise::new(m0, p0)?,
            floor: LIKELIHOOD_FLOOR,
        })
    }

    pub fn scalar(a: f64, c: f64, q: f64, r: f64, m0: f64, p0: f64) -> Result<Self> {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(c), m(q), m(r), DVector::from_element(1, m0), m(p0))
    }

    pub fn with_likelihood_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }
}

impl StateSpaceModel for LinearGaussian {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    fn transition(&self, x: &StateVector, _t: usize) -> StateVector {
        &self.a * x
    }

    fn observe(&self, x: &StateVector) -> ObservationVector {
        &self.c * x
    }

    fn process_noise(&self) -> &GaussianNoise {
        &self.q
    }

    fn observation_noise(&self) -> &GaussianNoise {
        &self.r
    }

    fn initial(&self) -> &GaussianNoise {
        &self.x0
    }

    fn likelihood_floor(&self) -> f64 {
        self.floor
    }

    fn jacobians(&self, _x: &StateVector, _t: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.c.clone()))
    }
}

/// Scalar nonlinear growth benchmark:
/// `x_t = x/2 + 25x/(1+x²) + 8cos(1.2t) + u`, `y_t = x²/20 + v`.
///
/// The observation map is even, so `x` and `-x` are indistinguishable from a
/// single observation.
#[derive(Debug, Clone)]
pub struct NonlinearGrowth {
    q: GaussianNoise,
    r: GaussianNoise,
    x0: GaussianNoise,
    floor: f64,
}

impl NonlinearGrowth {
    pub fn new(q: f64, r: f64) -> Result<Self> {
        Self::with_initial(q, r, 0.0, 5.0)
    }

    pub fn with_initial(q: f64, r: f64, x0_mean: f64, x0_var: f64) -> Result<Self> {
        Ok(Self {
            q: GaussianNoise::scalar(0.0, q)?,
            r: GaussianNoise::scalar(0.0, r)?,
            x0: GaussianNoise::scalar(x0_mean, x0_var)?,
            floor: LIKELIHOOD_FLOOR,
        })
    }

    pub fn with_likelihood_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn drift(x: f64, t: usize) -> f64 {
        0.5 * x + 25.0 * x / (1.0 + x * x) + 8.0 * (1.2 * t as f64).cos()
    }
}

impl StateSpaceModel for NonlinearGrowth {
    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn transition(&self, x: &StateVector, t: usize) -> StateVector {
        DVector::from_element(1, Self::drift(x[0], t))
    }

    fn observe(&self, x: &StateVector) -> ObservationVector {
        DVector::from_element(1, x[0] * x[0] / 20.0)
    }

    fn process_noise(&self) -> &GaussianNoise {
        &self.q
    }

    fn observation_noise(&self) -> &GaussianNoise {
        &self.r
    }

    fn initial(&self) -> &GaussianNoise {
        &self.x0
    }

    fn likelihood_floor(&self) -> f64 {
        self.floor
    }

    fn jacobians(&self, x: &StateVector, _t: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let v = x[0];
        let s = 1.0 + v * v;
        let df = 0.5 + 25.0 * (1.0 - v * v) / (s * s);
        Ok((DMatrix::from_element(1, 1, df), DMatrix::from_element(1, 1, v / 10.0)))
    }
}

/// Simulated ground truth and observations for `t = 1..=horizon`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x0: StateVector,
    pub states: Vec<StateVector>,
    pub observations: Vec<ObservationVector>,
}

pub fn simulate<M: StateSpaceModel + ?Sized>(
    model: &M,
    horizon: usize,
    rng: &mut RandomStream,
) -> Result<Trajectory> {
    let x0 = model.sample_initial(rng);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(horizon);
    let mut observations = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        x = model.transition_sample(&x, t, rng)?;
        let y = model.observe(&x) + model.observation_noise().sample(rng);
        states.push(x.clone());
        observations.push(y);
    }
    Ok(Trajectory {
        x0,
        states,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn zero_noise_identity_dynamics() {
        let m = LinearGaussian::scalar(1.0, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let mut rng = RandomStream::new(1, 0);
        for _ in 0..5 {
            assert_eq!(m.transition_sample(&v(2.0), 1, &mut rng).unwrap()[0], 2.0);
        }
    }

    #[test]
    fn zero_noise_growth_reduces_to_drift() {
        let m = NonlinearGrowth::new(0.0, 1.0).unwrap();
        let mut rng = RandomStream::new(1, 0);
        let x = m.transition_sample(&v(0.0), 1, &mut rng).unwrap()[0];
        assert_eq!(x.to_bits(), (8.0 * 1.2f64.cos()).to_bits());
        for t in 1..20 {
            let x_prev = v(t as f64 * 0.7 - 3.0);
            let a = m.transition_sample(&x_prev, t, &mut rng).unwrap();
            let b = m.transition_sample(&x_prev, t, &mut rng).unwrap();
            assert_eq!(a[0].to_bits(), m.transition(&x_prev, t)[0].to_bits());
            assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }

    #[test]
    fn transition_sample_mean() {
        let m = LinearGaussian::scalar(0.5, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let mut rng = RandomStream::new(2, 0);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| m.transition_sample(&v(0.0), 1, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn gaussian_likelihood_values() {
        let m = LinearGaussian::scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let l0 = m.likelihood(&v(0.0), &v(0.0));
        assert!((l0 - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        let l3 = m.likelihood(&v(0.0), &v(3.0));
        assert!((l3 / l0 - (-4.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn likelihood_is_floored() {
        let m = LinearGaussian::scalar(1.0, 1.0, 1.0, 1e-6, 0.0, 1.0).unwrap();
        let l = m.likelihood(&v(0.0), &v(1e6));
        assert_eq!(l, LIKELIHOOD_FLOOR);
        let custom = m.clone().with_likelihood_floor(1e-100);
        assert_eq!(custom.likelihood(&v(0.0), &v(1e6)), 1e-100);
    }

    #[test]
    fn growth_likelihood_is_even() {
        let m = NonlinearGrowth::new(10.0, 1.0).unwrap();
        let mut rng = RandomStream::new(4, 0);
        for _ in 0..100 {
            let x = rng.gaussian(0.0, 10.0);
            let y = rng.gaussian(5.0, 5.0);
            assert_eq!(
                m.likelihood(&v(x), &v(y)).to_bits(),
                m.likelihood(&v(-x), &v(y)).to_bits()
            );
        }
    }

    #[test]
    fn likelihood_integrates_to_one() {
        let r = 2.0f64;
        let m = LinearGaussian::scalar(1.0, 1.0, 1.0, r, 0.0, 1.0).unwrap();
        let sd = r.sqrt();
        let x = v(0.7);
        let n = 4000;
        let (lo, hi) = (0.7 - 8.0 * sd, 0.7 + 8.0 * sd);
        let dx = (hi - lo) / n as f64;
        // composite Simpson
        let mut s = 0.0;
        for i in 0..=n {
            let y = lo + i as f64 * dx;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * m.likelihood(&x, &v(y));
        }
        let integral = s * dx / 3.0;
        assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    }

    #[test]
    fn transition_density_values() {
        let m = LinearGaussian::scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let p = m.transition_density(&v(0.0), &v(0.0), 1).unwrap();
        assert!((p - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);

        let g = NonlinearGrowth::new(1.0, 1.0).unwrap();
        let x_prev = v(1.3);
        let f = g.transition(&x_prev, 4)[0];
        let best = (0..2001)
            .map(|i| f - 5.0 + i as f64 * 0.005)
            .max_by(|a, b| {
                let pa = g.transition_density(&v(*a), &x_prev, 4).unwrap();
                let pb = g.transition_density(&v(*b), &x_prev, 4).unwrap();
                pa.partial_cmp(&pb).unwrap()
            })
            .unwrap();
        assert!((best - f).abs() < 0.005);
    }

    #[test]
    fn transition_density_matches_samples() {
        // KS distance between the sampled transition law and the CDF obtained by
        // integrating transition_density.
        let m = NonlinearGrowth::new(2.0, 1.0).unwrap();
        let x_prev = v(0.4);
        let t = 3;
        let mut rng = RandomStream::new(8, 0);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| m.transition_sample(&x_prev, t, &mut rng).unwrap()[0])
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let f = m.transition(&x_prev, t)[0];
        let (lo, hi) = (f - 12.0, f + 12.0);
        let steps = 24_000;
        let dx = (hi - lo) / steps as f64;
        let mut cdf = vec![0.0; steps + 1];
        for i in 1..=steps {
            let a = lo + (i - 1) as f64 * dx;
            let b = a + dx;
            let mid = 0.5 * (a + b);
            let pa = m.transition_density(&v(a), &x_prev, t).unwrap();
            let pm = m.transition_density(&v(mid), &x_prev, t).unwrap();
            let pb = m.transition_density(&v(b), &x_prev, t).unwrap();
            cdf[i] = cdf[i - 1] + dx * (pa + 4.0 * pm + pb) / 6.0;
        }
        let mut ks: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let k = (((x - lo) / dx).round() as usize).min(steps);
            let c = cdf[k];
            ks = ks.max((c - i as f64 / n as f64).abs()).max((c - (i + 1) as f64 / n as f64).abs());
        }
        assert!(ks <= 0.02, "ks {ks}");
    }

    #[test]
    fn degenerate_process_noise_has_no_density() {
        let m = LinearGaussian::scalar(1.0, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            m.transition_density(&v(0.0), &v(0.0), 1),
            Err(FilterError::Unsupported(_))
        ));
    }

    #[test]
    fn linear_jacobians_are_exact() {
        let m = LinearGaussian::scalar(0.5, 2.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        for x in [-3.0, 0.0, 11.0] {
            let (f, h) = m.jacobians(&v(x), 1).unwrap();
            assert_eq!(f[(0, 0)], 0.5);
            assert_eq!(h[(0, 0)], 2.0);
        }
    }

    #[test]
    fn growth_observation_jacobian() {
        let m = NonlinearGrowth::new(1.0, 1.0).unwrap();
        let (_, h) = m.jacobians(&v(1.0), 1).unwrap();
        assert!((h[(0, 0)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn growth_jacobians_match_finite_differences() {
        let m = NonlinearGrowth::new(1.0, 1.0).unwrap();
        let mut rng = RandomStream::new(12, 0);
        let step = 1e-6;
        for t in 1..=100 {
            let x = rng.gaussian(0.0, 8.0);
            let (f, h) = m.jacobians(&v(x), t).unwrap();
            let fd_f = (m.transition(&v(x + step), t)[0] - m.transition(&v(x - step), t)[0]) / (2.0 * step);
            let fd_h = (m.observe(&v(x + step))[0] - m.observe(&v(x - step))[0]) / (2.0 * step);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel(f[(0, 0)], fd_f) <= 1e-6, "f' at {x}: {} vs {fd_f}", f[(0, 0)]);
            assert!(rel(h[(0, 0)], fd_h) <= 1e-6, "h' at {x}: {} vs {fd_h}", h[(0, 0)]);
        }
    }

    #[test]
    fn non_finite_transition_is_an_error() {
        let m = LinearGaussian::scalar(1.0, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let err = m.transition_sample(&v(f64::INFINITY), 7, &mut RandomStream::new(0, 0));
        assert!(matches!(err, Err(FilterError::NonFinite { t: 7, .. })));
    }

    #[test]
    fn simulate_lengths() {
        let m = NonlinearGrowth::new(10.0, 1.0).unwrap();
        let tr = simulate(&m, 25, &mut RandomStream::new(3, 0)).unwrap();
        assert_eq!(tr.states.len(), 25);
        assert_eq!(tr.observations.len(), 25);
    }
}
