//! Planar three-link arm carrying the mallet, tracked by a small box-constrained QP.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{MalletCommand, Vec2};

pub type Vec3 = Vector3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmModel {
    pub base: [f64; 2],
    pub lengths: [f64; 3],
    pub q_min: [f64; 3],
    pub q_max: [f64; 3],
    /// Symmetric joint speed limits, rad/s.
    pub qd_max: [f64; 3],
    pub q_ref: [f64; 3],
    pub lambda: f64,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            base: [-1.2, 0.0],
            lengths: [0.55, 0.45, 0.35],
            q_min: [-2.6; 3],
            q_max: [2.6; 3],
            qd_max: [3.0; 3],
            q_ref: [1.5, -2.0, -0.7],
            lambda: 0.01,
        }
    }
}

impl ArmModel {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.lengths[i] > 0.0) {
                return Err(Error::Validation("link lengths must be positive".into()));
            }
            if !(self.q_min[i] < self.q_max[i]) || !(self.qd_max[i] > 0.0) {
                return Err(Error::Validation("joint limits must be well ordered".into()));
            }
            if self.q_ref[i] < self.q_min[i] || self.q_ref[i] > self.q_max[i] {
                return Err(Error::Validation("q_ref outside joint limits".into()));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Validation("lambda must be non-negative".into()));
        }
        Ok(())
    }

    pub fn base(&self) -> Vec2 {
        Vec2::new(self.base[0], self.base[1])
    }

    pub fn reach(&self) -> f64 {
        self.lengths.iter().sum()
    }

    pub fn q_ref(&self) -> Vec3 {
        Vec3::from(self.q_ref)
    }

    pub fn contains(&self, q: &Vec3) -> bool {
        (0..3).all(|i| q[i] >= self.q_min[i] && q[i] <= self.q_max[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: Vec3,
    pub q_dot: Vec3,
}

impl JointState {
    pub fn at_rest(q: Vec3) -> Self {
        Self { q, q_dot: Vec3::zeros() }
    }
}

pub fn fk(q: &Vec3, arm: &ArmModel) -> Vec2 {
    let mut p = arm.base();
    let mut angle = 0.0;
    for i in 0..3 {
        angle += q[i];
        p += Vec2::new(angle.cos(), angle.sin()) * arm.lengths[i];
    }
    p
}

pub fn jacobian(q: &Vec3, arm: &ArmModel) -> Matrix2x3<f64> {
    let mut jac = Matrix2x3::zeros();
    let mut angle = 0.0;
    for i in 0..3 {
        angle += q[i];
        let (s, c) = angle.sin_cos();
        let l = arm.lengths[i];
        // link i moves with every joint up to and including i
        for j in 0..=i {
            jac[(0, j)] -= l * s;
            jac[(1, j)] += l * c;
        }
    }
    jac
}

/// Smallest singular value of the Jacobian.
pub fn min_singular_value(jac: &Matrix2x3<f64>) -> f64 {
    let jjt: Matrix2<f64> = jac * jac.transpose();
    let tr = jjt.trace();
    let det = jjt.determinant();
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    (tr / 2.0 - disc).max(0.0).sqrt()
}

/// Configuration placing the mallet at `target` with the last link pointing
/// radially away from the base, elbow on the negative side. `None` if out of reach.
pub fn radial_ik(target: &Vec2, arm: &ArmModel) -> Option<Vec3> {
    let [l1, l2, l3] = arm.lengths;
    let d = target - arm.base();
    let r = d.norm();
    let w = r - l3;
    if !(w >= (l1 - l2).abs() && w <= l1 + l2) || r == 0.0 {
        return None;
    }
    let heading = d.y.atan2(d.x);
    let cos_q2 = ((w * w - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = -cos_q2.acos();
    let alpha = (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    let q1 = heading - alpha;
    let q3 = heading - q1 - q2;
    Some(Vec3::new(q1, q2, q3))
}

/// Quadratic program `min |J u - v|^2 + lambda |q + u dt - q_ref|^2` over a box.
#[derive(Clone, Copy, Debug)]
pub struct TrackingQp {
    pub hessian: Matrix3<f64>,
    pub linear: Vec3,
    pub constant: f64,
    pub lo: Vec3,
    pub hi: Vec3,
}

impl TrackingQp {
    pub fn new(state: &JointState, v: &Vec2, arm: &ArmModel, dt: f64) -> Self {
        let jac = jacobian(&state.q, arm);
        let lam = arm.lambda;
        let e = state.q - arm.q_ref();
        let hessian = jac.transpose() * jac + Matrix3::identity() * (lam * dt * dt);
        let linear = -(jac.transpose() * v) + e * (lam * dt);
        let constant = v.norm_squared() + lam * e.norm_squared();
        let lo = Vec3::from_fn(|i, _| (-arm.qd_max[i]).max((arm.q_min[i] - state.q[i]) / dt));
        let hi = Vec3::from_fn(|i, _| arm.qd_max[i].min((arm.q_max[i] - state.q[i]) / dt));
        Self {
            hessian,
            linear,
            constant,
            lo,
            hi,
        }
    }

    pub fn objective(&self, u: &Vec3) -> f64 {
        u.dot(&(self.hessian * u)) + 2.0 * self.linear.dot(u) + self.constant
    }

    /// Half the objective gradient.
    pub fn gradient(&self, u: &Vec3) -> Vec3 {
        self.hessian * u + self.linear
    }

    pub fn feasible(&self, u: &Vec3) -> bool {
        (0..3).all(|i| u[i] >= self.lo[i] && u[i] <= self.hi[i])
    }

    /// Norm of the gradient projected onto the box's tangent cone.
    pub fn projected_gradient_norm(&self, u: &Vec3) -> f64 {
        let g = self.gradient(u) * 2.0;
        let tol = 1e-12;
        Vec3::from_fn(|i, _| {
            let at_lo = u[i] <= self.lo[i] + tol * (1.0 + self.lo[i].abs());
            let at_hi = u[i] >= self.hi[i] - tol * (1.0 + self.hi[i].abs());
            match (at_lo, at_hi) {
                (true, true) => 0.0,
                (true, false) => g[i].min(0.0),
                (false, true) => g[i].max(0.0),
                (false, false) => g[i],
            }
        })
        .norm()
    }

    /// Exact minimizer by enumerating the 27 assignments of each coordinate
    /// to free, lower bound or upper bound.
    pub fn solve(&self) -> Vec3 {
        let mut best = Vec3::zeros().zip_zip_map(&self.lo, &self.hi, |z, l, h| z.clamp(l, h));
        let mut best_f = self.objective(&best);
        for code in 0..27u32 {
            let mut state = [0u8; 3];
            let mut c = code;
            for s in state.iter_mut() {
                *s = (c % 3) as u8;
                c /= 3;
            }
            let mut u = Vec3::zeros();
            let mut free = Vec::with_capacity(3);
            for i in 0..3 {
                match state[i] {
                    0 => free.push(i),
                    1 => u[i] = self.lo[i],
                    _ => u[i] = self.hi[i],
                }
            }
            if !free.is_empty() {
                let n = free.len();
                let mut h = nalgebra::DMatrix::zeros(n, n);
                let mut rhs = nalgebra::DVector::zeros(n);
                for (a, &i) in free.iter().enumerate() {
                    let mut r = -self.linear[i];
                    for j in 0..3 {
                        if state[j] != 0 {
                            r -= self.hessian[(i, j)] * u[j];
                        }
                    }
                    rhs[a] = r;
                    for (b, &j) in free.iter().enumerate() {
                        h[(a, b)] = self.hessian[(i, j)];
                    }
                }
                let Some(chol) = h.cholesky() else { continue };
                let sol = chol.solve(&rhs);
                for (a, &i) in free.iter().enumerate() {
                    u[i] = sol[a];
                }
            }
            if !self.feasible(&u) {
                continue;
            }
            let f = self.objective(&u);
            if f < best_f {
                best_f = f;
                best = u;
            }
        }
        best
    }
}

/// One tracking step: returns the next joint state.
pub fn qp_track(state: &JointState, cmd: &MalletCommand, arm: &ArmModel, dt: f64) -> JointState {
    let qp = TrackingQp::new(state, &cmd.velocity(), arm, dt);
    let u = qp.solve();
    let q = Vec3::from_fn(|i, _| (state.q[i] + u[i] * dt).clamp(arm.q_min[i], arm.q_max[i]));
    JointState { q, q_dot: u }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub t: f64,
    pub q: [f64; 3],
    pub q_dot: [f64; 3],
    pub sv_min: f64,
}
