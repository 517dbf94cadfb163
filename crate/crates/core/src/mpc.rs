//! Sampling MPC over minimum-acceleration mallet trajectories. The terminal
//! velocity is the decision variable; the first step of the best candidate
//! is sent to the mallet.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{clamp_norm, MalletBounds, MalletCommand, MalletState, Vec2};
use crate::tactics::ContactPlan;

/// Cubic Hermite basis sampled on a uniform grid of `k + 1` points.
///
/// Row `i` of each matrix maps the boundary tuple `(x0, v0, xT, vT)` of one
/// axis to the value at `t = i dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    pub k: usize,
    pub dt: f64,
    pub positions: DMatrix<f64>,
    pub velocities: DMatrix<f64>,
    pub accelerations: DMatrix<f64>,
}

pub fn build_basis(k: usize, dt: f64) -> Result<BasisSet> {
    if k < 2 {
        return Err(Error::HorizonTooShort { steps: k });
    }
    if !(dt > 0.0) {
        return Err(Error::Validation("dt must be positive".into()));
    }
    let t_total = k as f64 * dt;
    let mut positions = DMatrix::zeros(k + 1, 4);
    let mut velocities = DMatrix::zeros(k + 1, 4);
    let mut accelerations = DMatrix::zeros(k + 1, 4);
    for i in 0..=k {
        let s = i as f64 / k as f64;
        let (s2, s3) = (s * s, s * s * s);
        let p = [2.0 * s3 - 3.0 * s2 + 1.0, (s3 - 2.0 * s2 + s) * t_total, -2.0 * s3 + 3.0 * s2, (s3 - s2) * t_total];
        let v = [
            (6.0 * s2 - 6.0 * s) / t_total,
            3.0 * s2 - 4.0 * s + 1.0,
            (-6.0 * s2 + 6.0 * s) / t_total,
            3.0 * s2 - 2.0 * s,
        ];
        let tt = t_total * t_total;
        let a = [
            (12.0 * s - 6.0) / tt,
            (6.0 * s - 4.0) / t_total,
            (-12.0 * s + 6.0) / tt,
            (6.0 * s - 2.0) / t_total,
        ];
        for j in 0..4 {
            positions[(i, j)] = p[j];
            velocities[(i, j)] = v[j];
            accelerations[(i, j)] = a[j];
        }
    }
    Ok(BasisSet {
        k,
        dt,
        positions,
        velocities,
        accelerations,
    })
}

impl BasisSet {
    pub fn horizon(&self) -> f64 {
        self.k as f64 * self.dt
    }

    /// Positions of one axis on the grid.
    pub fn axis_positions(&self, x0: f64, v0: f64, xt: f64, vt: f64) -> Vec<f64> {
        let b = Vector4::new(x0, v0, xt, vt);
        (0..=self.k).map(|i| self.positions.row(i).transpose().dot(&b)).collect()
    }
}

/// Discrete acceleration functional `sum |a_k|^2 dt` with second differences.
pub fn discrete_effort(positions: &[Vec2], dt: f64) -> f64 {
    positions
        .windows(3)
        .map(|w| ((w[2] - w[1] * 2.0 + w[0]) / (dt * dt)).norm_squared() * dt)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub n_candidates: usize,
    /// Spread of the sampled terminal velocities, m/s.
    pub sigma: f64,
    pub speed_cap: f64,
    /// Clearance kept from the mallet workspace boundary, meters.
    pub wall_margin: f64,
    pub w_vel_err: f64,
    /// Penalty per meter of wall violation and per m/s of speed violation.
    pub penalty_weight: f64,
    /// Time the contact velocity is held after the contact, seconds.
    pub follow_through: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            n_candidates: 128,
            sigma: 0.4,
            speed_cap: 2.0,
            wall_margin: 0.01,
            w_vel_err: 1.0,
            penalty_weight: 1e3,
            follow_through: 0.06,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates < 1 {
            return Err(Error::Validation("n_candidates must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.speed_cap > 0.0 && self.wall_margin >= 0.0) {
            return Err(Error::Validation("invalid MPC sampling or limit parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryCandidate {
    pub terminal_velocity: Vec2,
    pub dt: f64,
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub accelerations: Vec<Vec2>,
    pub cost: f64,
    /// Hinge part of the cost, before weighting.
    pub penalty: f64,
    pub feasible: bool,
}

impl TrajectoryCandidate {
    /// Velocity over the first control step.
    pub fn first_action(&self) -> Vec2 {
        (self.positions[1] - self.positions[0]) / self.dt
    }

    /// Velocity over the last control step, the one the mallet carries into contact.
    pub fn arrival_velocity(&self) -> Vec2 {
        let k = self.positions.len() - 1;
        (self.positions[k] - self.positions[k - 1]) / self.dt
    }
}

/// Builds and scores the trajectory from `(x0, v0)` to the contact position
/// with terminal velocity `vt`.
pub fn rollout_candidate(
    basis: &BasisSet,
    x0: Vec2,
    v0: Vec2,
    contact: &ContactPlan,
    vt: Vec2,
    bounds: &MalletBounds,
    cfg: &MpcConfig,
) -> Result<TrajectoryCandidate> {
    if basis.k < 2 {
        return Err(Error::HorizonTooShort { steps: basis.k });
    }
    let xc = contact.contact_mallet_state.pos();
    let v_des = contact.contact_mallet_state.vel();
    let k = basis.k;
    let eval = |m: &DMatrix<f64>| -> Vec<Vec2> {
        let bx = Vector4::new(x0.x, v0.x, xc.x, vt.x);
        let by = Vector4::new(x0.y, v0.y, xc.y, vt.y);
        (0..=k)
            .map(|i| {
                let r = m.row(i).transpose();
                Vec2::new(r.dot(&bx), r.dot(&by))
            })
            .collect()
    };
    let positions = eval(&basis.positions);
    let velocities = eval(&basis.velocities);
    let accelerations = eval(&basis.accelerations);

    let inner = bounds.shrink(cfg.wall_margin);
    let mut penalty = 0.0;
    for i in 1..=k {
        penalty += inner.violation(&positions[i]);
        let step_speed = (positions[i] - positions[i - 1]).norm() / basis.dt;
        penalty += (step_speed - cfg.speed_cap).max(0.0);
    }
    let arrival = (positions[k] - positions[k - 1]) / basis.dt;
    let cost = cfg.w_vel_err * (arrival - v_des).norm_squared() + cfg.penalty_weight * penalty;
    Ok(TrajectoryCandidate {
        terminal_velocity: vt,
        dt: basis.dt,
        positions,
        velocities,
        accelerations,
        cost,
        penalty,
        feasible: penalty == 0.0,
    })
}

/// Terminal velocity whose last control step arrives exactly at `v_des`.
pub fn exact_arrival_velocity(basis: &BasisSet, x0: Vec2, v0: Vec2, xc: Vec2, v_des: Vec2) -> Vec2 {
    let k = basis.k;
    let row = |j: usize| (basis.positions[(k, j)] - basis.positions[(k - 1, j)]) / basis.dt;
    let offset = |x0: f64, v0: f64, xc: f64| row(0) * x0 + row(1) * v0 + row(2) * xc;
    let gain = row(3);
    Vec2::new(
        (v_des.x - offset(x0.x, v0.x, xc.x)) / gain,
        (v_des.y - offset(x0.y, v0.y, xc.y)) / gain,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcOutput {
    pub command: MalletCommand,
    pub feasible: bool,
    pub cost: f64,
    pub n_feasible: usize,
    pub chosen_vt: [f64; 2],
    /// Control steps left until contact when the command was computed.
    pub steps_to_contact: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcRecord {
    pub t: f64,
    pub n_feasible: usize,
    pub best_cost: f64,
    #[serde(rename = "chosen_vT")]
    pub chosen_vt: [f64; 2],
}

/// Controller state: configuration plus a basis cache keyed by horizon length.
#[derive(Clone, Debug)]
pub struct Mpc {
    pub cfg: MpcConfig,
    pub dt: f64,
    pub bounds: MalletBounds,
    cache: BTreeMap<usize, BasisSet>,
}

impl Mpc {
    pub fn new(cfg: MpcConfig, dt: f64, bounds: MalletBounds) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            dt,
            bounds,
            cache: BTreeMap::new(),
        })
    }

    pub fn basis(&mut self, k: usize) -> Result<&BasisSet> {
        if !self.cache.contains_key(&k) {
            let b = build_basis(k, self.dt)?;
            self.cache.insert(k, b);
        }
        Ok(&self.cache[&k])
    }

    /// Whole-step count until the contact, rounded to the control grid.
    pub fn steps_to(&self, contact_time: f64, now: f64) -> i64 {
        ((contact_time - now) / self.dt).round() as i64
    }

    /// Candidate terminal velocities: the desired one, the one with an exact
    /// arrival, then Gaussian samples around the desired one.
    fn candidates<R: Rng + ?Sized>(&self, basis: &BasisSet, x0: Vec2, v0: Vec2, contact: &ContactPlan, rng: &mut R) -> Vec<Vec2> {
        let n = self.cfg.n_candidates;
        let v_des = contact.contact_mallet_state.vel();
        let mut out = Vec::with_capacity(n);
        out.push(v_des);
        if n > 1 {
            out.push(exact_arrival_velocity(basis, x0, v0, contact.contact_mallet_state.pos(), v_des));
        }
        while out.len() < n {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            out.push(v_des + Vec2::new(nx, ny) * self.cfg.sigma);
        }
        out
    }

    /// One control step toward the contact plan.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        mallet: &MalletState,
        contact: &ContactPlan,
        now: f64,
        rng: &mut R,
    ) -> Result<MpcOutput> {
        let k = self.steps_to(contact.contact_time, now);
        let cap = self.cfg.speed_cap;
        let v_des = contact.contact_mallet_state.vel();
        if k <= 1 {
            // final approach lands exactly on the contact point; afterwards
            // the contact velocity is held
            let v = if k == 1 {
                (contact.contact_mallet_state.pos() - mallet.pos()) / self.dt
            } else {
                v_des
            };
            return Ok(MpcOutput {
                command: MalletCommand::new(clamp_norm(v, cap)),
                feasible: v.norm() <= cap + 1e-9,
                cost: 0.0,
                n_feasible: 0,
                chosen_vt: [v_des.x, v_des.y],
                steps_to_contact: k,
            });
        }
        let k = k as usize;
        let bounds = self.bounds;
        let cfg = self.cfg.clone();
        let (x0, v0) = (mallet.pos(), mallet.vel());
        let basis = self.basis(k)?.clone();
        let vts = self.candidates(&basis, x0, v0, contact, rng);
        let mut best: Option<TrajectoryCandidate> = None;
        let mut least_penalty: Option<TrajectoryCandidate> = None;
        let mut n_feasible = 0;
        for vt in vts {
            let cand = rollout_candidate(&basis, x0, v0, contact, vt, &bounds, &cfg)?;
            if cand.feasible {
                n_feasible += 1;
            }
            if least_penalty.as_ref().map_or(true, |b| cand.penalty < b.penalty) {
                least_penalty = Some(cand.clone());
            }
            if best.as_ref().map_or(true, |b| cand.cost < b.cost) {
                best = Some(cand);
            }
        }
        let chosen = if n_feasible > 0 { best } else { least_penalty }.expect("at least one candidate");
        let v = chosen.first_action();
        Ok(MpcOutput {
            command: MalletCommand::new(clamp_norm(v, cap)),
            feasible: chosen.feasible,
            cost: chosen.cost,
            n_feasible,
            chosen_vt: [chosen.terminal_velocity.x, chosen.terminal_velocity.y],
            steps_to_contact: k as i64,
        })
    }
}

/// Functional form of [`Mpc::step`] for one-off calls.
pub fn mpc_step<R: Rng + ?Sized>(
    mallet: &MalletState,
    contact: &ContactPlan,
    now: f64,
    cfg: &MpcConfig,
    dt: f64,
    bounds: &MalletBounds,
    rng: &mut R,
) -> Result<MpcOutput> {
    Mpc::new(cfg.clone(), dt, *bounds)?.step(mallet, contact, now, rng)
}

/// Contact lead time long enough for a rest-to-contact cubic to stay under
/// `speed` along the way.
pub fn reach_time(from: Vec2, to: Vec2, speed: f64, min_time: f64) -> f64 {
    (1.6 * (to - from).norm() / speed.max(1e-6)).max(min_time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;
    use crate::tactics::Objective;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plan(pos: Vec2, vel: Vec2, t: f64) -> ContactPlan {
        ContactPlan {
            contact_time: t,
            contact_mallet_state: MalletState::from_parts(pos, vel),
            objective: Objective::KillVelocity,
        }
    }

    #[test]
    fn zero_boundaries_give_zero_trajectory() {
        let b = build_basis(10, 0.02).unwrap();
        assert!(b.axis_positions(0.0, 0.0, 0.0, 0.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hermite_midpoint() {
        let b = build_basis(50, 0.02).unwrap();
        let x = b.axis_positions(0.0, 0.0, 1.0, 1.5);
        assert!((x[25] - 0.3125).abs() < 1e-12);
        assert!((x[50] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_horizon_is_rejected() {
        assert!(matches!(build_basis(1, 0.02), Err(Error::HorizonTooShort { steps: 1 })));
    }

    #[test]
    fn exact_arrival_candidate_has_zero_cost() {
        let bounds = SimConfig::default().agent_bounds();
        let b = build_basis(20, 0.02).unwrap();
        let c = plan(Vec2::new(-0.4, 0.0), Vec2::new(1.0, 0.0), 0.4);
        let x0 = Vec2::new(-0.7, 0.0);
        let vt = exact_arrival_velocity(&b, x0, Vec2::zeros(), c.contact_mallet_state.pos(), c.contact_mallet_state.vel());
        let cand = rollout_candidate(&b, x0, Vec2::zeros(), &c, vt, &bounds, &MpcConfig::default()).unwrap();
        assert!(cand.feasible);
        assert!(cand.cost < 1e-20);
        assert!((cand.positions[20] - c.contact_mallet_state.pos()).norm() < 1e-12);
    }

    #[test]
    fn contact_outside_margin_is_penalized() {
        let bounds = SimConfig::default().agent_bounds();
        let b = build_basis(20, 0.02).unwrap();
        let c = plan(Vec2::new(-0.4, bounds.y_max - 0.001), Vec2::zeros(), 0.4);
        let cand = rollout_candidate(&b, Vec2::new(-0.5, 0.0), Vec2::zeros(), &c, Vec2::zeros(), &bounds, &MpcConfig::default()).unwrap();
        assert!(!cand.feasible);
        assert!(cand.penalty > 0.0);
    }

    #[test]
    fn single_candidate_uses_desired_velocity() {
        let bounds = SimConfig::default().agent_bounds();
        let cfg = MpcConfig {
            n_candidates: 1,
            ..Default::default()
        };
        let mallet = MalletState::at_rest(-0.7, 0.1);
        let c = plan(Vec2::new(-0.4, 0.0), Vec2::new(1.0, 0.5), 0.3);
        let out = mpc_step(&mallet, &c, 0.0, &cfg, 0.02, &bounds, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = build_basis(15, 0.02).unwrap();
        let cand = rollout_candidate(&b, mallet.pos(), mallet.vel(), &c, c.contact_mallet_state.vel(), &bounds, &cfg).unwrap();
        assert_eq!(out.command.velocity(), cand.first_action());
    }
}
