//! Constant-velocity Kalman filter over `(cx, cy, a, h)` box states.
//!
//! The state holds the box center, aspect ratio `a = w / h`, height, and the
//! per-frame velocity of each. Process and measurement noise scale with the
//! current box height.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

pub type StateVector = SVector<f64, 8>;
pub type StateCovariance = SMatrix<f64, 8, 8>;
type Observation = SVector<f64, 4>;
type ObservationMatrix = SMatrix<f64, 4, 8>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KalmanError {
    #[error("box {0:?} has zero area")]
    DegenerateBox(BBox),
    #[error("state has non-positive aspect ratio or height (a = {aspect}, h = {height})")]
    DegenerateState { aspect: f64, height: f64 },
}

/// Noise standard deviations, expressed as multiples of the box height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub position_weight: f64,
    pub velocity_weight: f64,
    /// Pin the aspect-ratio velocity at zero.
    #[serde(default)]
    pub freeze_aspect_velocity: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            position_weight: 1.0 / 20.0,
            velocity_weight: 1.0 / 160.0,
            freeze_aspect_velocity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

fn transition() -> StateCovariance {
    let mut f = StateCovariance::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> ObservationMatrix {
    let mut h = ObservationMatrix::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn measurement_of(b: &BBox) -> Result<Observation, KalmanError> {
    if !b.has_positive_area() {
        return Err(KalmanError::DegenerateBox(*b));
    }
    let (cx, cy) = b.center();
    Ok(Observation::new(cx, cy, b.width() / b.height(), b.height()))
}

fn symmetrize(p: &mut StateCovariance) {
    *p = (*p + p.transpose()) * 0.5;
}

/// Starts a track at `b` with zero velocity and inflated velocity variance.
pub fn init_from_box(b: &BBox, cfg: &NoiseConfig) -> Result<KalmanState, KalmanError> {
    let z = measurement_of(b)?;
    let h = z[3];
    let mut mean = StateVector::zeros();
    mean.fixed_rows_mut::<4>(0).copy_from(&z);

    let pw = cfg.position_weight;
    let vw = cfg.velocity_weight;
    let std = [
        2.0 * pw * h,
        2.0 * pw * h,
        1e-2,
        2.0 * pw * h,
        10.0 * vw * h,
        10.0 * vw * h,
        1e-5,
        10.0 * vw * h,
    ];
    let covariance = StateCovariance::from_diagonal(&StateVector::from_iterator(std.iter().map(|s| s * s)));
    Ok(KalmanState { mean, covariance })
}

/// One constant-velocity step: positions advance by their velocities and the
/// covariance grows by the process noise.
pub fn predict(s: &KalmanState, cfg: &NoiseConfig) -> KalmanState {
    let h = s.mean[3].abs();
    let pw = cfg.position_weight;
    let vw = cfg.velocity_weight;
    let std = [pw * h, pw * h, 1e-2, pw * h, vw * h, vw * h, 1e-5, vw * h];
    let q = StateCovariance::from_diagonal(&StateVector::from_iterator(std.iter().map(|s| s * s)));

    let f = transition();
    let mut mean = f * s.mean;
    if cfg.freeze_aspect_velocity {
        mean[6] = 0.0;
    }
    let mut covariance = f * s.covariance * f.transpose() + q;
    symmetrize(&mut covariance);
    KalmanState { mean, covariance }
}

/// Kalman correction on the four observed components. Uses the Joseph form so
/// the posterior covariance stays symmetric positive semi-definite.
pub fn update(s: &KalmanState, measurement: &BBox, cfg: &NoiseConfig) -> Result<KalmanState, KalmanError> {
    let z = measurement_of(measurement)?;
    let h_obs = observation();
    let h = s.mean[3].abs();
    let pw = cfg.position_weight;
    let r_std = [pw * h, pw * h, 1e-1, pw * h];
    let r = SMatrix::<f64, 4, 4>::from_diagonal(&Observation::from_iterator(r_std.iter().map(|v| v * v)));

    let pht = s.covariance * h_obs.transpose();
    let innovation_cov = h_obs * pht + r;
    let chol = innovation_cov
        .cholesky()
        .ok_or(KalmanError::DegenerateState { aspect: s.mean[2], height: s.mean[3] })?;
    // K = P H^T S^-1, solved as S K^T = H P.
    let gain = chol.solve(&pht.transpose()).transpose();

    let residual = z - h_obs * s.mean;
    let mut mean = s.mean + gain * residual;
    if cfg.freeze_aspect_velocity {
        mean[6] = 0.0;
    }
    let i_kh = StateCovariance::identity() - gain * h_obs;
    let mut covariance = i_kh * s.covariance * i_kh.transpose() + gain * r * gain.transpose();
    symmetrize(&mut covariance);
    Ok(KalmanState { mean, covariance })
}

/// Corner-format box at the state's mean.
pub fn state_to_box(s: &KalmanState) -> Result<BBox, KalmanError> {
    let (cx, cy, a, h) = (s.mean[0], s.mean[1], s.mean[2], s.mean[3]);
    if !(a > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() || !a.is_finite() || !h.is_finite() {
        return Err(KalmanError::DegenerateState { aspect: a, height: h });
    }
    let w = a * h;
    BBox::from_center(cx, cy, w, h).map_err(|_| KalmanError::DegenerateState { aspect: a, height: h })
}
