//! Behavior state machine and the online contact planners for defending and
//! for lining up a puck stuck near a side wall.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::PiecewiseModel;
use crate::error::{Error, Result};
use crate::estimator::Belief;
use crate::sim::{MalletBounds, MalletState, TableGeometry, Vec2, Vec4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModeKind {
    Shoot,
    Defend,
    Prepare,
    Home,
}

impl ModeKind {
    pub const ALL: [ModeKind; 4] = [ModeKind::Shoot, ModeKind::Defend, ModeKind::Prepare, ModeKind::Home];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMode {
    pub kind: ModeKind,
    pub entered_at: f64,
}

impl BehaviorMode {
    pub fn new(kind: ModeKind, entered_at: f64) -> Self {
        Self { kind, entered_at }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Objective {
    ShotAngle(f64),
    KillVelocity,
    /// Desired puck velocity right after the contact.
    PrepareTarget([f64; 2]),
    /// Park the mallet, used when heading home.
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactPlan {
    /// Absolute time of the contact, seconds.
    pub contact_time: f64,
    pub contact_mallet_state: MalletState,
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TacticConfig {
    pub v_defend_threshold: f64,
    pub v_slow: f64,
    /// Pucks in the prepare zones are only struck below this speed, m/s.
    pub v_prepare: f64,
    pub prepare_wall_margin: f64,
    pub min_dwell: f64,
    pub defense_line_x: f64,
    pub target_prepare_speed: f64,
    /// How far ahead the defense planner follows the incoming puck, seconds.
    pub defense_horizon: f64,
    /// Forward offset of the point a prepare bounce aims at, meters.
    pub prepare_advance: f64,
    /// A held defense plan is kept while its predicted rebound |vx| stays below this, m/s.
    pub defense_keep_vx: f64,
}

impl Default for TacticConfig {
    fn default() -> Self {
        Self::for_table(&TableGeometry::default())
    }
}

impl TacticConfig {
    pub fn for_table(geom: &TableGeometry) -> Self {
        Self {
            v_defend_threshold: 0.3,
            v_slow: 0.4,
            v_prepare: 0.15,
            prepare_wall_margin: 0.12,
            min_dwell: 0.1,
            defense_line_x: -geom.length / 2.0 + 0.25,
            target_prepare_speed: 0.5,
            defense_horizon: 1.5,
            prepare_advance: 0.15,
            defense_keep_vx: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.v_defend_threshold,
            self.v_slow,
            self.v_prepare,
            self.prepare_wall_margin,
            self.target_prepare_speed,
            self.defense_horizon,
            self.prepare_advance,
            self.defense_keep_vx,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.min_dwell >= 0.0) || !self.defense_line_x.is_finite() {
            return Err(Error::Validation("tactic thresholds must be positive".into()));
        }
        if self.v_prepare > self.v_slow {
            return Err(Error::Validation("v_prepare must not exceed v_slow".into()));
        }
        Ok(())
    }
}

/// True when a straight or angled strike can be set up from inside `bounds`.
pub fn shot_reachable(pos: &Vec2, geom: &TableGeometry, bounds: &MalletBounds) -> bool {
    let reach = geom.contact_distance();
    [0.0, 0.5, -0.5, 1.0, -1.0]
        .iter()
        .any(|a: &f64| bounds.contains(&(pos - Vec2::new(a.cos(), a.sin()) * reach)))
}

/// Mode suggested by the rule table, ignoring dwell, with a short reason.
pub fn rule_mode(belief: &Belief, cfg: &TacticConfig, geom: &TableGeometry, bounds: &MalletBounds) -> (ModeKind, &'static str) {
    let p = belief.position();
    let v = belief.velocity();
    if p.x >= 0.0 {
        return (ModeKind::Home, "puck in opponent half");
    }
    if v.x < -cfg.v_defend_threshold {
        return (ModeKind::Defend, "puck approaching");
    }
    if v.norm() >= cfg.v_slow {
        return (ModeKind::Home, "puck moving");
    }
    let near_wall = p.y.abs() > geom.puck_y_limit() - cfg.prepare_wall_margin;
    if near_wall || p.x < cfg.defense_line_x {
        if v.norm() >= cfg.v_prepare {
            return (ModeKind::Home, "puck drifting");
        }
        let reason = if near_wall { "puck near side wall" } else { "puck behind defense line" };
        return (ModeKind::Prepare, reason);
    }
    if shot_reachable(&p, geom, bounds) {
        (ModeKind::Shoot, "slow puck in reach")
    } else {
        (ModeKind::Home, "no strike pose")
    }
}

/// Next behavior mode with the reason for it. Switches are held back until
/// the current mode has lasted `min_dwell`.
pub fn decide_mode_with_reason(
    belief: &Belief,
    current: BehaviorMode,
    cfg: &TacticConfig,
    geom: &TableGeometry,
    bounds: &MalletBounds,
    now: f64,
) -> (BehaviorMode, &'static str) {
    let (kind, reason) = rule_mode(belief, cfg, geom, bounds);
    if kind == current.kind {
        return (current, reason);
    }
    if now - current.entered_at < cfg.min_dwell {
        return (current, "dwell");
    }
    (BehaviorMode::new(kind, now), reason)
}

pub fn decide_mode(
    belief: &Belief,
    current: BehaviorMode,
    cfg: &TacticConfig,
    geom: &TableGeometry,
    bounds: &MalletBounds,
    now: f64,
) -> BehaviorMode {
    decide_mode_with_reason(belief, current, cfg, geom, bounds, now).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub t: f64,
    pub from: ModeKind,
    pub to: ModeKind,
    pub reason: String,
}

/// Post-contact velocity of a puck struck by an unyielding mallet.
pub fn struck_velocity(puck_vel: Vec2, mallet_vel: Vec2, normal: Vec2, restitution: f64) -> Vec2 {
    let rel = puck_vel - mallet_vel;
    let vn = rel.dot(&normal);
    if vn >= 0.0 {
        return puck_vel;
    }
    puck_vel - normal * ((1.0 + restitution) * vn)
}

/// True when a puck at `p` moving with `v` heads straight into the agent goal mouth.
pub fn heads_into_own_goal(p: Vec2, v: Vec2, geom: &TableGeometry) -> bool {
    if v.x >= 0.0 {
        return false;
    }
    let goal_x = -geom.length / 2.0;
    let y = p.y + v.y * (goal_x - p.x) / v.x;
    geom.in_goal_mouth(y)
}

#[derive(Clone, Copy, Debug)]
struct DefenseCandidate {
    step: usize,
    normal: Vec2,
    mallet_vel: Vec2,
}

/// Samples intercepts on the predicted puck path around the defense line and
/// picks the one whose predicted rebound has the smallest speed along x.
/// Candidate 0 is a stationary block at the nominal crossing.
#[allow(clippy::too_many_arguments)]
pub fn plan_defense<R: Rng + ?Sized>(
    belief: &Belief,
    mallet: &MalletState,
    model: &PiecewiseModel,
    bounds: &MalletBounds,
    cfg: &TacticConfig,
    speed_cap: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<ContactPlan> {
    if n_samples == 0 {
        return Err(Error::Validation("plan_defense needs at least one sample".into()));
    }
    let geom = &model.geometry;
    let reach = geom.contact_distance();
    let dt = model.dt;
    let steps = (cfg.defense_horizon / dt).ceil() as usize;
    let mut path: Vec<Vec4> = Vec::with_capacity(steps + 1);
    path.push(belief.mean);
    for _ in 0..steps {
        let next = model.predict_mean(path.last().unwrap(), None);
        path.push(next);
    }
    let min_step = 2;
    let crossing = (min_step..=steps)
        .find(|&k| path[k][0] <= cfg.defense_line_x && path[k][2] < 0.0)
        .ok_or_else(|| Error::NoPlan("puck does not cross the defense line".into()))?;

    let inner = bounds.shrink(0.01);
    let e = geom.mallet_restitution;
    let kill_speed = |v: Vec2, n: Vec2| -> Option<f64> {
        // mallet speed along n that cancels the rebound's x component
        if n.x.abs() < 0.2 {
            return None;
        }
        Some(v.dot(&n) - v.x / ((1.0 + e) * n.x))
    };
    let incoming = |k: usize| Vec2::new(path[k][2], path[k][3]);
    let facing = |k: usize| {
        let v = incoming(k);
        if v.norm() > 1e-9 {
            -v / v.norm()
        } else {
            Vec2::new(1.0, 0.0)
        }
    };

    let mut candidates = Vec::with_capacity(n_samples);
    candidates.push(DefenseCandidate {
        step: crossing,
        normal: facing(crossing),
        mallet_vel: Vec2::zeros(),
    });
    if n_samples > 1 {
        let n = facing(crossing);
        if let Some(s) = kill_speed(incoming(crossing), n) {
            candidates.push(DefenseCandidate {
                step: crossing,
                normal: n,
                mallet_vel: n * s,
            });
        }
    }
    while candidates.len() < n_samples {
        let shift: i64 = rng.gen_range(-4..=4);
        let step = (crossing as i64 + shift).clamp(min_step as i64, steps as i64) as usize;
        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.3;
        let base = facing(step);
        let (s, c) = jitter.sin_cos();
        let n = Vec2::new(base.x * c - base.y * s, base.x * s + base.y * c);
        let along = kill_speed(incoming(step), n).unwrap_or(0.0) + rng.sample::<f64, _>(StandardNormal) * 0.3;
        let tangent = Vec2::new(-n.y, n.x) * (rng.sample::<f64, _>(StandardNormal) * 0.2);
        candidates.push(DefenseCandidate {
            step,
            normal: n,
            mallet_vel: n * along + tangent,
        });
    }

    let mut best: Option<(f64, ContactPlan)> = None;
    for c in &candidates {
        let s_p = path[c.step];
        let p = Vec2::new(s_p[0], s_p[1]);
        let pos = p - c.normal * reach;
        let lead = c.step as f64 * dt;
        if !inner.contains(&pos) || c.mallet_vel.norm() > speed_cap {
            continue;
        }
        // rest-to-rest reachability at a comfortable fraction of the cap
        if (pos - mallet.pos()).norm() > 0.6 * speed_cap * lead {
            continue;
        }
        let s_m = MalletState::from_parts(pos, c.mallet_vel);
        let after = model.apply_mallet(&s_p, &s_m.to_vec());
        let (p_after, v_after) = (Vec2::new(after[0], after[1]), Vec2::new(after[2], after[3]));
        if heads_into_own_goal(p_after, v_after, geom) {
            continue;
        }
        let score = v_after.x.abs();
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((
                score,
                ContactPlan {
                    contact_time: belief.stamp + lead,
                    contact_mallet_state: s_m,
                    objective: Objective::KillVelocity,
                },
            ));
        }
    }
    best.map(|(_, plan)| plan)
        .ok_or_else(|| Error::NoPlan("no reachable intercept".into()))
}

/// Predicted puck velocity right after executing `plan` under the current
/// belief, or `None` when the predicted puck no longer meets the mallet there.
pub fn defense_rebound(belief: &Belief, plan: &ContactPlan, model: &PiecewiseModel) -> Option<Vec2> {
    let steps = ((plan.contact_time - belief.stamp) / model.dt).round();
    if steps < 1.0 {
        return None;
    }
    let mut s = belief.mean;
    for _ in 0..steps as usize {
        s = model.predict_mean(&s, None);
    }
    let m = plan.contact_mallet_state;
    let gap = (Vec2::new(s[0], s[1]) - m.pos()).norm();
    if (gap - model.geometry.contact_distance()).abs() > 0.005 {
        return None;
    }
    let after = model.apply_mallet(&s, &m.to_vec());
    let (p, v) = (Vec2::new(after[0], after[1]), Vec2::new(after[2], after[3]));
    (!heads_into_own_goal(p, v, &model.geometry)).then_some(v)
}

/// Puck velocity that, after one side-wall bounce, passes through the point
/// `advance` ahead of the puck on the center line. A puck on the center line
/// is nudged straight ahead.
pub fn prepare_target_velocity(p: Vec2, speed: f64, advance: f64, geom: &TableGeometry) -> Vec2 {
    if p.y == 0.0 {
        return Vec2::new(speed, 0.0);
    }
    let side = p.y.signum();
    let wall = geom.puck_y_limit();
    // x travel per unit |y| travel before and after the bounce, with the
    // bounce scaling the slope by e_t / e_n
    let ratio = geom.wall_tangential_retention / geom.wall_restitution;
    let slope = advance / ((wall - p.y.abs()) + ratio * wall);
    Vec2::new(slope, side).normalize() * speed
}

/// Straight flight with linear damping and side-wall bounces; returns the
/// closest approach to `target` within `horizon` seconds.
pub fn bounce_miss(p: Vec2, v: Vec2, target: Vec2, geom: &TableGeometry, horizon: f64) -> f64 {
    let h = 1e-3;
    let limit = geom.puck_y_limit();
    let (mut p, mut v) = (p, v);
    let mut best = (p - target).norm();
    let mut t = 0.0;
    while t < horizon {
        v *= 1.0 - geom.damping_coeff * h;
        p += v * h;
        if p.y.abs() > limit && p.y * v.y > 0.0 {
            p.y = p.y.signum() * (2.0 * limit - p.y.abs());
            v.y = -v.y * geom.wall_restitution;
            v.x *= geom.wall_tangential_retention;
        }
        best = best.min((p - target).norm());
        t += h;
    }
    best
}

/// Samples strike directions and speeds around the heuristic target velocity
/// and keeps the one whose simulated path passes closest to the aim point.
#[allow(clippy::too_many_arguments)]
pub fn plan_prepare<R: Rng + ?Sized>(
    belief: &Belief,
    mallet: &MalletState,
    geom: &TableGeometry,
    bounds: &MalletBounds,
    cfg: &TacticConfig,
    speed_cap: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<ContactPlan> {
    if n_samples == 0 {
        return Err(Error::Validation("plan_prepare needs at least one sample".into()));
    }
    let p = belief.position();
    let target_point = Vec2::new(p.x + cfg.prepare_advance, 0.0);
    let v_target = prepare_target_velocity(p, cfg.target_prepare_speed, cfg.prepare_advance, geom);
    let base_angle = v_target.y.atan2(v_target.x);
    let reach = geom.contact_distance();
    let inner = bounds.shrink(0.01);
    let e = geom.mallet_restitution;
    let horizon = 3.0;

    let mut best: Option<(f64, ContactPlan)> = None;
    for i in 0..n_samples {
        let (angle, speed) = if i == 0 {
            (base_angle, cfg.target_prepare_speed)
        } else {
            let da: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
            let ds: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
            (base_angle + da, cfg.target_prepare_speed * (1.0 + ds))
        };
        if angle.abs() > FRAC_PI_2 + 0.3 || !(speed > 0.0) {
            continue;
        }
        let n = Vec2::new(angle.cos(), angle.sin());
        let pos = p - n * reach;
        if !inner.contains(&pos) {
            continue;
        }
        let mallet_vel = n * (speed / (1.0 + e));
        if mallet_vel.norm() > speed_cap {
            continue;
        }
        let v_post = struck_velocity(belief.velocity(), mallet_vel, n, e);
        let miss = if p.y == 0.0 {
            (v_post.y / v_post.norm().max(1e-9)).abs()
        } else {
            bounce_miss(p, v_post, target_point, geom, horizon)
        };
        if best.as_ref().map_or(true, |(b, _)| miss < *b) {
            let lead = crate::mpc::reach_time(mallet.pos(), pos, 0.6 * speed_cap, 0.3);
            best = Some((
                miss,
                ContactPlan {
                    contact_time: belief.stamp + lead,
                    contact_mallet_state: MalletState::from_parts(pos, mallet_vel),
                    objective: Objective::PrepareTarget([v_post.x, v_post.y]),
                },
            ));
        }
    }
    best.map(|(_, plan)| plan)
        .ok_or_else(|| Error::NoPlan("no strike pose for a wall bounce".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::default_initial_cov;
    use crate::sim::SimConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn belief(x: f64, y: f64, vx: f64, vy: f64) -> Belief {
        Belief::new(Vec4::new(x, y, vx, vy), default_initial_cov(), 0.0)
    }

    fn decide(b: &Belief) -> ModeKind {
        let sim = SimConfig::default();
        let cfg = TacticConfig {
            v_defend_threshold: 0.5,
            ..Default::default()
        };
        decide_mode(b, BehaviorMode::new(ModeKind::Home, -1.0), &cfg, &sim.geometry, &sim.agent_bounds(), 0.0).kind
    }

    #[test]
    fn rule_table_examples() {
        let g = TableGeometry::default();
        assert_eq!(decide(&belief(0.4, 0.1, 1.0, 0.0)), ModeKind::Home);
        assert_eq!(decide(&belief(-0.4, 0.0, -1.5, 0.0)), ModeKind::Defend);
        assert_eq!(decide(&belief(-0.4, g.width / 2.0 - g.puck_radius - 0.01, 0.0, 0.0)), ModeKind::Prepare);
        assert_eq!(decide(&belief(-0.4, 0.0, 0.0, 0.0)), ModeKind::Shoot);
    }

    #[test]
    fn dwell_holds_the_mode() {
        let sim = SimConfig::default();
        let cfg = TacticConfig::default();
        let current = BehaviorMode::new(ModeKind::Home, 0.0);
        let b = belief(-0.4, 0.0, -1.5, 0.0);
        let held = decide_mode(&b, current, &cfg, &sim.geometry, &sim.agent_bounds(), 0.05);
        assert_eq!(held, current);
        let switched = decide_mode(&b, current, &cfg, &sim.geometry, &sim.agent_bounds(), 0.1);
        assert_eq!(switched, BehaviorMode::new(ModeKind::Defend, 0.1));
    }

    #[test]
    fn prepare_heuristic_geometry() {
        let g = TableGeometry::default();
        let v = prepare_target_velocity(Vec2::new(-0.4, 0.0), 0.5, 0.15, &g);
        assert_eq!(v, Vec2::new(0.5, 0.0));
        let v = prepare_target_velocity(Vec2::new(-0.4, 0.35), 0.5, 0.15, &g);
        assert!(v.y > 0.0 && v.x > 0.0);
        assert!((v.norm() - 0.5).abs() < 1e-12);
        let v = prepare_target_velocity(Vec2::new(-0.4, -0.35), 0.5, 0.15, &g);
        assert!(v.y < 0.0);
    }

    #[test]
    fn heuristic_bounce_reaches_aim_point() {
        let g = TableGeometry {
            damping_coeff: 0.0,
            ..Default::default()
        };
        let p = Vec2::new(-0.4, 0.3);
        let v = prepare_target_velocity(p, 0.5, 0.15, &g);
        assert!(bounce_miss(p, v, Vec2::new(-0.25, 0.0), &g, 3.0) < 2e-3);
    }

    #[test]
    fn defense_needs_samples() {
        let sim = SimConfig::default();
        let model = PiecewiseModel::identity(0.02, sim.geometry.clone());
        let err = plan_defense(
            &belief(-0.2, 0.0, -1.0, 0.0),
            &MalletState::at_rest(-0.8, 0.0),
            &model,
            &sim.agent_bounds(),
            &TacticConfig::default(),
            2.0,
            0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn own_goal_ray() {
        let g = TableGeometry::default();
        assert!(heads_into_own_goal(Vec2::new(-0.5, 0.0), Vec2::new(-1.0, 0.0), &g));
        assert!(!heads_into_own_goal(Vec2::new(-0.5, 0.0), Vec2::new(-1.0, 1.0), &g));
        assert!(!heads_into_own_goal(Vec2::new(-0.5, 0.0), Vec2::new(1.0, 0.0), &g));
    }
}
