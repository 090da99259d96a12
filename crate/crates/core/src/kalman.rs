//! Exact Kalman filter for [`LinearGaussian`] models, used as a reference.

use nalgebra::{DMatrix, DVector};

use crate::model::{LinearGaussian, StateSpaceModel};

#[derive(Debug, Clone)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Kalman measurement update of the prior `N(mean, cov)` with `y = C x + v`.
pub fn kalman_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> KalmanState {
    let s = c * cov * c.transpose() + r;
    let s_inv = s.try_inverse().expect("innovation covariance must be invertible");
    let gain = cov * c.transpose() * s_inv;
    let mean = mean + &gain * (y - c * mean);
    let cov = cov - &gain * c * cov;
    let cov = (&cov + cov.transpose()) * 0.5;
    KalmanState { mean, cov }
}

pub struct KalmanFilter<'a> {
    model: &'a LinearGaussian,
    state: KalmanState,
}

impl<'a> KalmanFilter<'a> {
    pub fn new(model: &'a LinearGaussian) -> Self {
        let x0 = model.initial();
        Self {
            model,
            state: KalmanState {
                mean: x0.mean().clone(),
                cov: x0.cov().clone(),
            },
        }
    }

    pub fn state(&self) -> &KalmanState {
        &self.state
    }

    /// Predict then update with `y`; returns the posterior.
    pub fn step(&mut self, y: &DVector<f64>) -> &KalmanState {
        let a = &self.model.a;
        let m = a * &self.state.mean;
        let p = a * &self.state.cov * a.transpose() + self.model.process_noise().cov();
        self.state = kalman_update(&m, &p, &self.model.c, self.model.observation_noise().cov(), y);
        &self.state
    }

    /// Posterior means for a whole observation sequence.
    pub fn filter(model: &'a LinearGaussian, observations: &[DVector<f64>]) -> Vec<KalmanState> {
        let mut kf = KalmanFilter::new(model);
        observations.iter().map(|y| kf.step(y).clone()).collect()
    }
}
