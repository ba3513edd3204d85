//! Constant-velocity Kalman filter over the target center.
//!
//! State layout is `(p_x, v_x, p_y, v_y)`; one frame is one time step.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point;

/// State transition.
pub fn transition() -> Matrix4<f64> {
    Matrix4::new(
        1.0, 1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 1.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Observation matrix (positions only).
pub fn observation() -> Matrix2x4<f64> {
    Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    )
}

pub fn process_noise() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(25.0, 10.0, 25.0, 10.0))
}

pub fn measurement_noise() -> Matrix2<f64> {
    Matrix2::from_diagonal(&Vector2::new(25.0, 25.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    /// Diagonal of the initial covariance.
    pub p0: [f64; 4],
    /// Diagonal of the process noise.
    pub process_noise: [f64; 4],
    /// Diagonal of the measurement noise.
    pub measurement_noise: [f64; 2],
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            p0: [25.0, 100.0, 25.0, 100.0],
            process_noise: [25.0, 10.0, 25.0, 10.0],
            measurement_noise: [25.0, 25.0],
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self.p0.iter().chain(&self.process_noise).chain(&self.measurement_noise);
        if all.into_iter().all(|v| v.is_finite() && *v >= 0.0) && self.measurement_noise.iter().all(|v| *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("kalman covariances must be finite and nonnegative, measurement noise positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    x: Vector4<f64>,
    p: Matrix4<f64>,
    q: Matrix4<f64>,
    r: Matrix2<f64>,
}

impl KalmanState {
    pub fn init(center: Point) -> Self {
        Self::init_with(center, &KalmanConfig::default())
    }

    pub fn init_with(center: Point, cfg: &KalmanConfig) -> Self {
        let [a, b, c, d] = cfg.p0;
        KalmanState {
            x: Vector4::new(center.x, 0.0, center.y, 0.0),
            p: Matrix4::from_diagonal(&Vector4::new(a, b, c, d)),
            q: Matrix4::from_diagonal(&Vector4::from(cfg.process_noise)),
            r: Matrix2::from_diagonal(&Vector2::from(cfg.measurement_noise)),
        }
    }

    /// Builds a state from explicit components with the default noise;
    /// `p` is row-major.
    pub fn from_parts(x: [f64; 4], p: [[f64; 4]; 4]) -> Self {
        KalmanState {
            x: Vector4::from(x),
            p: Matrix4::from_fn(|r, c| p[r][c]),
            q: process_noise(),
            r: measurement_noise(),
        }
    }

    /// Replaces mean and covariance, keeping the noise model.
    pub fn set_parts(&mut self, x: [f64; 4], p: [[f64; 4]; 4]) {
        self.x = Vector4::from(x);
        self.p = Matrix4::from_fn(|r, c| p[r][c]);
    }

    pub fn state(&self) -> [f64; 4] {
        self.x.into()
    }

    /// Covariance, row-major.
    pub fn covariance(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.p[(r, c)];
            }
        }
        out
    }

    pub fn position(&self) -> Point {
        Point::new(self.x[0], self.x[2])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.x[1], self.x[3])
    }

    /// Propagates one step and returns the predicted center.
    pub fn predict(&mut self) -> Point {
        let a = transition();
        self.x = a * self.x;
        self.p = a * self.p * a.transpose() + self.q;
        self.position()
    }

    /// Standard correction with the measured center `z`.
    pub fn update(&mut self, z: Point) -> Result<()> {
        let h = observation();
        let s = h * self.p * h.transpose() + self.r;
        let s_inv = s.try_inverse().ok_or(Error::SingularInnovation)?;
        let k = self.p * h.transpose() * s_inv;
        let innovation = Vector2::new(z.x, z.y) - h * self.x;
        self.x += k * innovation;
        self.p = (Matrix4::identity() - k * h) * self.p;
        // Guard against drift from floating-point asymmetry.
        self.p = (self.p + self.p.transpose()) * 0.5;
        Ok(())
    }

    pub fn zero_velocity(&mut self) {
        self.x[1] = 0.0;
        self.x[3] = 0.0;
    }

    pub fn trace(&self) -> f64 {
        self.p.trace()
    }

    /// Symmetric to 1e-9 with no eigenvalue below −1e-9.
    pub fn covariance_is_psd(&self) -> bool {
        let asym = (self.p - self.p.transpose()).abs().max();
        if asym > 1e-9 * self.p.abs().max().max(1.0) {
            return false;
        }
        self.p
            .symmetric_eigenvalues()
            .iter()
            .all(|&e| e >= -1e-9 * self.p.abs().max().max(1.0))
    }
}
