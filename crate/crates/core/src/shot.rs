//! Stochastic shot planning: pick the contact angle that maximizes a weighted
//! goal-probability / goal-line-speed objective under the learned dynamics.

use std::f64::consts::{FRAC_PI_2, SQRT_2};

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::arm::{jacobian, min_singular_value, radial_ik, ArmModel};
use crate::dynamics::{Frame, ModeFrame, ModeId, PiecewiseModel};
use crate::error::{Error, Result};
use crate::estimator::{ekf_predict, Belief};
use crate::sim::{MalletBounds, MalletState, PuckState, TableGeometry, Vec2, Vec4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShotWeights {
    pub w_goal: f64,
    /// Weight on expected goal-line speed, s/m.
    pub w_vel: f64,
    pub w_penalty: f64,
    pub p_min: f64,
}

impl Default for ShotWeights {
    fn default() -> Self {
        Self {
            w_goal: 1.0,
            w_vel: 0.1,
            w_penalty: 10.0,
            p_min: 0.2,
        }
    }
}

impl ShotWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_goal >= 0.0 && self.w_vel >= 0.0 && self.w_penalty >= 0.0) {
            return Err(Error::Validation("shot weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_min) {
            return Err(Error::Validation("p_min must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Largest mallet speed available at a contact position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContactSpeed {
    Constant { speed: f64 },
    /// Smallest-singular-value bound of the arm at the radial IK posture,
    /// capped at `cap`.
    Arm { arm: ArmModel, cap: f64 },
}

impl Default for ContactSpeed {
    fn default() -> Self {
        ContactSpeed::Constant { speed: 2.0 }
    }
}

pub fn max_contact_speed(pos: &Vec2, model: &ContactSpeed) -> f64 {
    match model {
        ContactSpeed::Constant { speed } => *speed,
        // singular values only depend on the distance from the base
        ContactSpeed::Arm { arm, cap } => match radial_ik(&(arm.base() + Vec2::new((pos - arm.base()).norm(), 0.0)), arm) {
            Some(q) => {
                let qd = arm.qd_max.iter().cloned().fold(f64::INFINITY, f64::min);
                (min_singular_value(&jacobian(&q, arm)) * qd).min(*cap)
            }
            None => 0.0,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShotConfig {
    pub weights: ShotWeights,
    pub grid_n: usize,
    /// Rollout cap, seconds.
    pub horizon: f64,
    /// Minimum lead time between planning and contact, seconds.
    pub contact_time: f64,
    pub speed: ContactSpeed,
}

impl Default for ShotConfig {
    fn default() -> Self {
        Self {
            weights: ShotWeights::default(),
            grid_n: 97,
            horizon: 3.0,
            contact_time: 0.5,
            speed: ContactSpeed::default(),
        }
    }
}

impl ShotConfig {
    pub fn horizon_steps(&self, dt: f64) -> usize {
        (self.horizon / dt - 1e-9).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactPose {
    pub position: Vec2,
    pub feasible: bool,
}

/// Mallet center touching the puck on the side opposite to direction `a`.
pub fn contact_pose_from_angle(puck_pos: &Vec2, a: f64, geom: &TableGeometry, bounds: &MalletBounds) -> ContactPose {
    let reach = geom.contact_distance();
    let position = puck_pos - Vec2::new(a.cos(), a.sin()) * reach;
    ContactPose {
        position,
        feasible: bounds.contains(&position),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotEval {
    pub cost: f64,
    pub p_goal: f64,
    /// Mean puck speed along x at the goal line; zero without a crossing.
    pub expected_speed: f64,
    pub feasible: bool,
    /// Interpolated step index of the goal-line crossing after contact.
    pub crossing: Option<f64>,
}

impl ShotEval {
    fn infeasible() -> Self {
        Self {
            cost: f64::INFINITY,
            p_goal: 0.0,
            expected_speed: 0.0,
            feasible: false,
            crossing: None,
        }
    }
}

/// Gaussian mass of `N(mu, sigma^2)` inside `(-half, half)`.
pub fn interval_mass(mu: f64, sigma: f64, half: f64) -> f64 {
    if sigma <= 0.0 {
        return if mu.abs() < half { 1.0 } else { 0.0 };
    }
    let s = sigma * SQRT_2;
    (0.5 * (erf((half - mu) / s) + erf((half + mu) / s))).clamp(0.0, 1.0)
}

/// Probability that a puck reaching the end plane at `y ~ N(mu, var)` with
/// velocity `(vx, vy)` stays inside the mouth until its center passes the goal line.
fn goal_mass(mu: f64, var: f64, vx: f64, vy: f64, g: &TableGeometry) -> f64 {
    let drift = if vx > 0.0 { vy / vx * g.puck_radius } else { 0.0 };
    interval_mass(mu + drift / 2.0, var.max(0.0).sqrt(), (g.goal_width - drift.abs()) / 2.0)
}

/// Context shared by every angle evaluated for one belief.
pub struct ShotProblem<'a> {
    pub belief: &'a Belief,
    pub model: &'a PiecewiseModel,
    pub bounds: &'a MalletBounds,
    pub cfg: &'a ShotConfig,
}

impl ShotProblem<'_> {
    pub fn mallet_at(&self, a: f64) -> Option<MalletState> {
        let pose = contact_pose_from_angle(&self.belief.position(), a, &self.model.geometry, self.bounds);
        if !pose.feasible {
            return None;
        }
        let speed = max_contact_speed(&pose.position, &self.cfg.speed);
        Some(MalletState::from_parts(pose.position, Vec2::new(a.cos(), a.sin()) * speed))
    }

    pub fn cost(&self, a: f64) -> ShotEval {
        match self.mallet_at(a) {
            Some(m) => shot_cost_with_mallet(a, &m, self.belief, self.model, &self.cfg.weights, self.cfg.horizon_steps(self.model.dt)),
            None => ShotEval::infeasible(),
        }
    }
}

/// Cost of striking along angle `a` with the belief at contact time.
pub fn shot_cost(
    a: f64,
    belief: &Belief,
    model: &PiecewiseModel,
    bounds: &MalletBounds,
    cfg: &ShotConfig,
) -> ShotEval {
    ShotProblem {
        belief,
        model,
        bounds,
        cfg,
    }
    .cost(a)
}

fn shot_cost_with_mallet(
    a: f64,
    mallet: &MalletState,
    belief: &Belief,
    model: &PiecewiseModel,
    w: &ShotWeights,
    k_max: usize,
) -> ShotEval {
    let g = &model.geometry;
    // the end wall or the goal mouth decides at the puck-center limit
    let goal_x = g.puck_x_limit();
    let s_m = mallet.to_vec();
    let mf = ModeFrame {
        mode: ModeId::Mallet,
        frame: Frame::contact(Vec2::new(a.cos(), a.sin())),
    };
    let lin = model.linearize(&mf, &belief.mean, Some(&s_m));
    let cov = lin.jacobian * belief.cov * lin.jacobian.transpose() + lin.process_cov;
    let mut cur = Belief::new(lin.mean, (cov + cov.transpose()) * 0.5, belief.stamp + model.dt);
    let free = ModeFrame {
        mode: ModeId::Free,
        frame: Frame::identity(),
    };

    let mut crossing = None;
    let mut p_goal = 0.0;
    let mut speed = 0.0;
    if cur.mean[0] >= goal_x {
        crossing = Some(1.0);
        p_goal = goal_mass(cur.mean[1], cur.cov[(1, 1)], cur.mean[2], cur.mean[3], g);
        speed = cur.mean[2];
    } else {
        for k in 1..k_max {
            // even undamped, the puck cannot reach the line in the time left
            let remaining = (k_max - k) as f64 * model.dt;
            if cur.velocity().norm() * remaining * 1.05 < goal_x - cur.mean[0] {
                break;
            }
            let ghost = model.linearize(&free, &cur.mean, None);
            if ghost.mean[0] >= goal_x {
                let var_next = (ghost.jacobian * cur.cov * ghost.jacobian.transpose() + ghost.process_cov)[(1, 1)];
                let f = (goal_x - cur.mean[0]) / (ghost.mean[0] - cur.mean[0]);
                let lerp = |u: f64, v: f64| u + (v - u) * f;
                let mu = lerp(cur.mean[1], ghost.mean[1]);
                speed = lerp(cur.mean[2], ghost.mean[2]);
                p_goal = goal_mass(mu, lerp(cur.cov[(1, 1)], var_next), speed, lerp(cur.mean[3], ghost.mean[3]), g);
                crossing = Some(k as f64 + f);
                break;
            }
            let Ok(next) = ekf_predict(&cur, None, model) else {
                break;
            };
            cur = next;
        }
    }
    let penalty = if p_goal < w.p_min { w.w_penalty } else { 0.0 };
    ShotEval {
        cost: -w.w_goal * p_goal - w.w_vel * speed + penalty,
        p_goal,
        expected_speed: speed,
        feasible: true,
        crossing,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotPlan {
    pub angle: f64,
    pub contact_mallet_state: MalletState,
    pub contact_time: f64,
    pub predicted_p_goal: f64,
    pub predicted_cost: f64,
}

/// Symmetric grid of `n` angles spanning `[-pi/2, pi/2]`.
pub fn angle_grid(n: usize) -> Vec<f64> {
    let m = (n - 1) as f64;
    (0..n).map(|j| FRAC_PI_2 * (2.0 * j as f64 - m) / m).collect()
}

fn better(cand: (f64, f64), best: (f64, f64)) -> bool {
    // (angle, cost): lower cost wins, ties go to the smaller |angle|
    cand.1 < best.1 || (cand.1 == best.1 && cand.0.abs() < best.0.abs())
}

/// Best grid angle followed by two bisection refinements. The belief is
/// taken as the belief at contact time.
pub fn solve_shot(
    belief: &Belief,
    model: &PiecewiseModel,
    bounds: &MalletBounds,
    cfg: &ShotConfig,
) -> Result<ShotPlan> {
    if cfg.grid_n < 8 {
        return Err(Error::Validation(format!("grid_n must be at least 8, got {}", cfg.grid_n)));
    }
    let problem = ShotProblem {
        belief,
        model,
        bounds,
        cfg,
    };
    let mut best = (0.0, f64::INFINITY);
    for a in angle_grid(cfg.grid_n) {
        let c = problem.cost(a).cost;
        if c.is_finite() && better((a, c), best) {
            best = (a, c);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::NoShot);
    }
    let mut h = std::f64::consts::PI / (cfg.grid_n - 1) as f64;
    for _ in 0..2 {
        h /= 2.0;
        let center = best.0;
        for a in [center - h, center + h] {
            if a.abs() > FRAC_PI_2 {
                continue;
            }
            let c = problem.cost(a).cost;
            if c.is_finite() && better((a, c), best) {
                best = (a, c);
            }
        }
    }
    let eval = problem.cost(best.0);
    let mallet = problem.mallet_at(best.0).ok_or(Error::NoShot)?;
    Ok(ShotPlan {
        angle: best.0,
        contact_mallet_state: mallet,
        contact_time: belief.stamp,
        predicted_p_goal: eval.p_goal,
        predicted_cost: eval.cost,
    })
}

/// Open-loop propagation of the belief over `lead` seconds with no mallet in reach.
pub fn belief_at_contact(belief: &Belief, lead: f64, model: &PiecewiseModel) -> Result<Belief> {
    let steps = (lead / model.dt).round() as usize;
    let mut b = *belief;
    for _ in 0..steps {
        b = ekf_predict(&b, None, model)?;
    }
    Ok(b)
}

/// Covariance assumed for dataset beliefs: a filtered, slowly moving puck
/// propagated to the contact time.
pub fn nominal_contact_cov() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vec4::new(2e-5, 2e-5, 1e-3, 1e-3))
}

/// Region and speed range of the puck states in the offline dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShotSampling {
    pub x_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub max_speed: f64,
}

impl Default for ShotSampling {
    fn default() -> Self {
        Self {
            x_min: -0.72,
            x_max: -0.12,
            y_max: 0.38,
            max_speed: 0.4,
        }
    }
}

impl ShotSampling {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PuckState {
        let x = rng.gen_range(self.x_min..self.x_max);
        let y = rng.gen_range(-self.y_max..self.y_max);
        let speed = rng.gen_range(0.0..self.max_speed);
        let heading: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        PuckState::new(x, y, speed * heading.cos(), speed * heading.sin())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub puck_state: [f64; 4],
    #[serde(rename = "a_hat")]
    pub angle: f64,
    pub cost: f64,
    pub p_goal: f64,
}

/// Solves `n` random contact beliefs; states without any feasible shot are
/// redrawn.
pub fn plan_shot_dataset(
    n: usize,
    sampling: &ShotSampling,
    model: &PiecewiseModel,
    bounds: &MalletBounds,
    cfg: &ShotConfig,
    seed: u64,
) -> Result<Vec<ShotRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        let puck = sampling.sample(&mut rng);
        let belief = Belief::new(puck.to_vec(), nominal_contact_cov(), 0.0);
        match solve_shot(&belief, model, bounds, cfg) {
            Ok(plan) => out.push(ShotRecord {
                puck_state: puck.to_array(),
                angle: plan.angle,
                cost: plan.predicted_cost,
                p_goal: plan.predicted_p_goal,
            }),
            Err(Error::NoShot) => {
                misses += 1;
                if misses > 10 * n + 100 {
                    return Err(Error::NoShot);
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
