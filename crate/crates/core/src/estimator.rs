//! Extended Kalman filter over the piecewise model and belief rollouts.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ModeId, PiecewiseModel};
use crate::error::{Error, Result};
use crate::sim::{Vec2, Vec4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub mean: Vec4,
    pub cov: Matrix4<f64>,
    pub stamp: f64,
}

impl Belief {
    pub fn new(mean: Vec4, cov: Matrix4<f64>, stamp: f64) -> Self {
        Self { mean, cov, stamp }
    }

    /// Belief around a first position fix: position known to the sensor
    /// noise, velocity uncertain.
    pub fn from_position(z: Vec2, stamp: f64) -> Self {
        Self::new(Vec4::new(z.x, z.y, 0.0, 0.0), default_initial_cov(), stamp)
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.mean[0], self.mean[1])
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.mean[2], self.mean[3])
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov).eigenvalues.min()
    }

    /// Squared Mahalanobis distance of `truth` from the mean.
    pub fn nees(&self, truth: &Vec4) -> Option<f64> {
        let e = truth - self.mean;
        self.cov.cholesky().map(|c| e.dot(&c.solve(&e)))
    }

    fn check(self) -> Result<Self> {
        if self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite("belief"))
        }
    }
}

pub fn default_initial_cov() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vec4::new(1e-4, 1e-4, 0.25, 0.25))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub h: Matrix2x4<f64>,
    pub r: Matrix2<f64>,
}

impl ObservationModel {
    /// Position measurement with isotropic noise `sigma` per axis.
    pub fn position(sigma: f64) -> Self {
        Self {
            h: Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0),
            r: Matrix2::identity() * (sigma * sigma),
        }
    }
}

impl Default for ObservationModel {
    fn default() -> Self {
        Self::position(0.005)
    }
}

fn symmetrize(m: Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

/// Propagates the belief one model step. The mode is chosen from the mean;
/// `s_m = None` means the mallet is out of reach.
pub fn ekf_predict(belief: &Belief, s_m: Option<&Vec4>, model: &PiecewiseModel) -> Result<Belief> {
    ekf_predict_with_mode(belief, s_m, model).map(|(b, _)| b)
}

/// Same as [`ekf_predict`] but also reports the mode used.
pub fn ekf_predict_with_mode(
    belief: &Belief,
    s_m: Option<&Vec4>,
    model: &PiecewiseModel,
) -> Result<(Belief, ModeId)> {
    let mf = model.mode_frame(&belief.mean, s_m);
    let lin = model.linearize(&mf, &belief.mean, s_m);
    let cov = lin.jacobian * belief.cov * lin.jacobian.transpose() + lin.process_cov;
    Ok((Belief::new(lin.mean, symmetrize(cov), belief.stamp + model.dt).check()?, mf.mode))
}

/// Kalman measurement update with Joseph-form covariance.
pub fn ekf_update(belief: &Belief, z: &Vec2, obs: &ObservationModel) -> Result<Belief> {
    let h = obs.h;
    let innovation = z - h * belief.mean;
    let s = h * belief.cov * h.transpose() + obs.r;
    let s = (s + s.transpose()) * 0.5;
    let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
    // K = P H^T S^-1
    let pht: Matrix4x2<f64> = belief.cov * h.transpose();
    let gain: Matrix4x2<f64> = chol.solve(&pht.transpose()).transpose();
    let mean = belief.mean + gain * innovation;
    let i_kh = Matrix4::identity() - gain * h;
    let cov = i_kh * belief.cov * i_kh.transpose() + gain * obs.r * gain.transpose();
    Belief::new(mean, symmetrize(cov), belief.stamp).check()
}

/// Open-loop propagation over `k` steps. Returns `k + 1` beliefs starting
/// with the input.
pub fn rollout_belief(
    belief: &Belief,
    mallet_plan: Option<&[Vec4]>,
    k: usize,
    model: &PiecewiseModel,
) -> Result<Vec<Belief>> {
    if k == 0 {
        return Err(Error::Validation("rollout needs at least one step".into()));
    }
    if let Some(plan) = mallet_plan {
        if plan.len() < k {
            return Err(Error::Validation(format!(
                "mallet plan has {} states, rollout needs {k}",
                plan.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(k + 1);
    out.push(*belief);
    for i in 0..k {
        let s_m = mallet_plan.map(|p| &p[i]);
        let next = ekf_predict(out.last().unwrap(), s_m, model)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRecord {
    pub t: f64,
    pub z: [f64; 2],
    pub mean: [f64; 4],
    pub cov_diag: [f64; 4],
    pub mode: ModeId,
}

/// Filter state for a single puck track.
#[derive(Clone, Debug)]
pub struct Tracker {
    pub obs: ObservationModel,
    pub belief: Option<Belief>,
    pub last_mode: ModeId,
}

impl Tracker {
    pub fn new(obs: ObservationModel) -> Self {
        Self {
            obs,
            belief: None,
            last_mode: ModeId::Free,
        }
    }

    /// Predicts with the mallet state of the previous step, then folds in `z`.
    pub fn step(&mut self, z: Vec2, t: f64, s_m: Option<&Vec4>, model: &PiecewiseModel) -> Result<Belief> {
        let next = match &self.belief {
            None => Belief::from_position(z, t),
            Some(b) => {
                let (pred, mode) = ekf_predict_with_mode(b, s_m, model)?;
                self.last_mode = mode;
                let mut upd = ekf_update(&pred, &z, &self.obs)?;
                upd.stamp = t;
                upd
            }
        };
        self.belief = Some(next);
        Ok(next)
    }

    pub fn record(&self, z: Vec2) -> Option<EstimatorRecord> {
        self.belief.map(|b| EstimatorRecord {
            t: b.stamp,
            z: [z.x, z.y],
            mean: b.mean.into(),
            cov_diag: [b.cov[(0, 0)], b.cov[(1, 1)], b.cov[(2, 2)], b.cov[(3, 3)]],
            mode: self.last_mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearMode, ModeSet};
    use crate::sim::TableGeometry;

    fn noisy_identity(sigma: f64) -> PiecewiseModel {
        let mode = LinearMode {
            sigma: Matrix4::identity() * sigma * sigma,
            ..LinearMode::identity()
        };
        let modes = ModeSet {
            free: mode.clone(),
            wall: mode.clone(),
            mallet: mode,
        };
        PiecewiseModel::from_modes(modes, 0.02, TableGeometry::default())
    }

    fn belief() -> Belief {
        Belief::new(Vec4::new(0.1, -0.2, 0.0, 0.0), default_initial_cov(), 0.0)
    }

    #[test]
    fn identity_predict_keeps_belief() {
        let model = PiecewiseModel::identity(0.02, TableGeometry::default());
        let b = belief();
        let p = ekf_predict(&b, None, &model).unwrap();
        assert_eq!(p.mean, b.mean);
        assert_eq!(p.cov, b.cov);
        assert_eq!(p.stamp, 0.02);
    }

    #[test]
    fn additive_noise_grows_trace() {
        let sigma = 0.03;
        let b = belief();
        let p = ekf_predict(&b, None, &noisy_identity(sigma)).unwrap();
        assert!((p.cov.trace() - b.cov.trace() - 4.0 * sigma * sigma).abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_shrinks_cov() {
        let b = belief();
        let obs = ObservationModel::default();
        let u = ekf_update(&b, &b.position(), &obs).unwrap();
        assert_eq!(u.mean, b.mean);
        assert!(u.cov.trace() < b.cov.trace());
        assert!(u.min_eigenvalue() >= -1e-9);
    }

    #[test]
    fn huge_noise_leaves_belief() {
        let b = belief();
        let obs = ObservationModel {
            r: Matrix2::identity() * 1e12,
            ..Default::default()
        };
        let u = ekf_update(&b, &Vec2::new(5.0, 5.0), &obs).unwrap();
        assert!((u.mean - b.mean).norm() < 1e-6);
        assert!((u.cov - b.cov).norm() < 1e-6);
    }

    #[test]
    fn singular_innovation_is_an_error() {
        let b = Belief::new(Vec4::zeros(), Matrix4::zeros(), 0.0);
        let obs = ObservationModel {
            r: Matrix2::zeros(),
            ..Default::default()
        };
        assert!(matches!(ekf_update(&b, &Vec2::zeros(), &obs), Err(Error::SingularInnovation)));
    }

    #[test]
    fn rollout_composes_predict() {
        let model = noisy_identity(0.01);
        let b = belief();
        let r = rollout_belief(&b, None, 1, &model).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0], b);
        assert_eq!(r[1], ekf_predict(&b, None, &model).unwrap());
        assert!(rollout_belief(&b, None, 0, &model).is_err());
        assert!(rollout_belief(&b, Some(&[Vec4::zeros()]), 2, &model).is_err());
    }

    #[test]
    fn stationary_rollout_is_constant() {
        let model = PiecewiseModel::identity(0.02, TableGeometry::default());
        let r = rollout_belief(&belief(), None, 20, &model).unwrap();
        assert!(r.iter().all(|b| b.mean == r[0].mean));
    }
}
