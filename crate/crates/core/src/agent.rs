//! The 50 Hz agent: estimate, pick a behavior, plan a contact, track it.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{fk, jacobian, min_singular_value, qp_track, radial_ik, ArmModel, JointRecord, JointState};
use crate::dynamics::PiecewiseModel;
use crate::ebm::{ebm_infer, EnergyModel, SamplerConfig};
use crate::error::{Error, Result};
use crate::estimator::{Belief, EstimatorRecord, ObservationModel, Tracker};
use crate::mpc::{Mpc, MpcConfig, MpcRecord};
use crate::shot::{belief_at_contact, contact_pose_from_angle, max_contact_speed, ShotConfig};
use crate::sim::{clamp_norm, MalletBounds, MalletCommand, MalletState, TableGeometry, Vec2, Vec4};
use crate::tactics::{
    decide_mode_with_reason, defense_rebound, plan_defense, plan_prepare, BehaviorMode, ContactPlan, ModeKind, ModeRecord, Objective,
    TacticConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub tactics: TacticConfig,
    pub mpc: MpcConfig,
    pub sampler: SamplerConfig,
    pub shot: ShotConfig,
    /// Position measurement noise assumed by the filter, meters.
    pub obs_sigma: f64,
    pub home: [f64; 2],
    pub defense_samples: usize,
    pub prepare_samples: usize,
    /// The contact plan is frozen once this many steps remain.
    pub lock_steps: i64,
    /// Shortest lead between committing to a contact and the contact, seconds.
    pub min_lead: f64,
    /// A shot is only committed once the puck position standard deviation
    /// falls below this, meters.
    pub shot_settle_std: f64,
    /// Tracking the commanded velocity through the arm when present.
    pub arm: Option<ArmModel>,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::for_table(&TableGeometry::default())
    }
}

impl AgentConfig {
    pub fn for_table(geom: &TableGeometry) -> Self {
        Self {
            tactics: TacticConfig::for_table(geom),
            mpc: MpcConfig::default(),
            sampler: SamplerConfig::default(),
            shot: ShotConfig::default(),
            obs_sigma: 0.005,
            home: [-geom.length / 2.0 + 0.2, 0.0],
            defense_samples: 64,
            prepare_samples: 32,
            lock_steps: 3,
            min_lead: 0.3,
            shot_settle_std: 0.002,
            arm: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tactics.validate()?;
        self.mpc.validate()?;
        self.sampler.validate()?;
        self.shot.weights.validate()?;
        if let Some(arm) = &self.arm {
            arm.validate()?;
        }
        if !(self.obs_sigma > 0.0) || !(self.min_lead > 0.0) || !(self.shot_settle_std > 0.0) || self.defense_samples == 0 || self.prepare_samples == 0 {
            return Err(Error::Validation("agent noise, lead and sample counts must be positive".into()));
        }
        Ok(())
    }

    pub fn home(&self) -> Vec2 {
        Vec2::new(self.home[0], self.home[1])
    }
}

/// Wall-clock time spent in each stage of one cycle, milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub estimate: f64,
    pub decide: f64,
    pub plan: f64,
    pub mpc: f64,
    pub arm: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutput {
    pub command: MalletCommand,
    pub mode: ModeKind,
    pub belief: Belief,
    pub mode_change: Option<ModeRecord>,
    pub estimate: Option<EstimatorRecord>,
    pub mpc: Option<MpcRecord>,
    pub joint: Option<JointRecord>,
    /// Set on the cycle in which a shot reaches its contact time.
    pub shot_fired: bool,
    pub times: StageTimes,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Lead time for a cubic approach ending at speed `speed`: about twice the
/// distance over the speed keeps the approach free of both overshoot and
/// backswing.
pub fn approach_lead(from: Vec2, to: Vec2, speed: f64, min_lead: f64) -> f64 {
    (2.0 * (to - from).norm() / speed.max(0.5)).max(min_lead)
}

const RETREAT_DISTANCE: f64 = 0.1;
const RETREAT_TIME: f64 = 0.08;

pub struct Agent {
    pub cfg: AgentConfig,
    pub model: PiecewiseModel,
    pub ebm: EnergyModel,
    pub bounds: MalletBounds,
    pub speed_cap: f64,
    pub tracker: Tracker,
    pub mode: BehaviorMode,
    pub plan: Option<ContactPlan>,
    pub joints: Option<JointState>,
    mpc: Mpc,
    rng: ChaCha8Rng,
    previous: Option<Vec4>,
}

impl Agent {
    pub fn new(
        cfg: AgentConfig,
        model: PiecewiseModel,
        ebm: EnergyModel,
        bounds: MalletBounds,
        speed_cap: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        ebm.validate()?;
        let mpc = Mpc::new(
            MpcConfig {
                speed_cap: cfg.mpc.speed_cap.min(speed_cap),
                ..cfg.mpc.clone()
            },
            model.dt,
            bounds,
        )?;
        Ok(Self {
            tracker: Tracker::new(ObservationModel::position(cfg.obs_sigma)),
            mode: BehaviorMode::new(ModeKind::Home, f64::NEG_INFINITY),
            plan: None,
            joints: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            previous: None,
            cfg,
            model,
            ebm,
            bounds,
            speed_cap,
            mpc,
        })
    }

    /// Forgets the puck track, e.g. after a goal respawn.
    pub fn reset_track(&mut self) {
        self.tracker.belief = None;
        self.plan = None;
    }

    fn geometry(&self) -> &TableGeometry {
        &self.model.geometry
    }

    fn expired(&self, plan: &ContactPlan, now: f64) -> bool {
        now > plan.contact_time + self.cfg.mpc.follow_through - 1e-9
    }

    fn locked(&self, plan: &ContactPlan, now: f64) -> bool {
        self.mpc.steps_to(plan.contact_time, now) <= self.cfg.lock_steps
    }

    fn plan_shot(&mut self, belief: &Belief, mallet: &MalletState, now: f64) -> Result<ContactPlan> {
        let contact_time = match &self.plan {
            Some(p) if matches!(p.objective, Objective::ShotAngle(_)) => p.contact_time,
            _ => {
                if belief.cov[(0, 0)].max(belief.cov[(1, 1)]).sqrt() > self.cfg.shot_settle_std {
                    return Err(Error::NoPlan("puck estimate not settled".into()));
                }
                let guess = belief.position() - Vec2::new(self.geometry().contact_distance(), 0.0);
                let speed = max_contact_speed(&guess, &self.cfg.shot.speed);
                now + approach_lead(mallet.pos(), guess, speed, self.cfg.min_lead)
            }
        };
        let at_contact = belief_at_contact(belief, contact_time - now, &self.model)?;
        let a = ebm_infer(&self.ebm, &at_contact.mean, &self.cfg.sampler, &mut self.rng)?;
        let pose = contact_pose_from_angle(&at_contact.position(), a, self.geometry(), &self.bounds);
        if !pose.feasible {
            return Err(Error::NoPlan("strike pose outside the mallet workspace".into()));
        }
        let speed = max_contact_speed(&pose.position, &self.cfg.shot.speed).min(self.speed_cap);
        Ok(ContactPlan {
            contact_time,
            contact_mallet_state: MalletState::from_parts(pose.position, Vec2::new(a.cos(), a.sin()) * speed),
            objective: Objective::ShotAngle(a),
        })
    }

    /// After a prepare strike the mallet backs off so the puck coming off
    /// the wall does not run into it again.
    fn retreat_plan(&self, struck: &ContactPlan, now: f64) -> Option<ContactPlan> {
        if !matches!(struck.objective, Objective::PrepareTarget(_)) || now < struck.contact_time - 1e-9 {
            return None;
        }
        let target = self.bounds.clamp(struck.contact_mallet_state.pos() - Vec2::new(RETREAT_DISTANCE, 0.0));
        Some(ContactPlan {
            contact_time: now + RETREAT_TIME,
            contact_mallet_state: MalletState::from_parts(target, Vec2::zeros()),
            objective: Objective::Rest,
        })
    }

    fn home_plan(&self, mallet: &MalletState, now: f64) -> Option<ContactPlan> {
        let home = self.cfg.home();
        if (mallet.pos() - home).norm() < 0.005 && mallet.vel().norm() < 0.05 {
            return None;
        }
        let lead = approach_lead(mallet.pos(), home, 0.5 * self.speed_cap, self.cfg.min_lead);
        Some(ContactPlan {
            contact_time: now + lead,
            contact_mallet_state: MalletState::from_parts(home, Vec2::zeros()),
            objective: Objective::Rest,
        })
    }

    /// Updates the plan for the current mode; planner failures fall back to
    /// heading home.
    fn update_plan(&mut self, belief: &Belief, mallet: &MalletState, now: f64) {
        if let Some(p) = &self.plan {
            if self.expired(p, now) {
                self.plan = None;
            }
        }
        let keep = self.plan.as_ref().map_or(false, |p| {
            self.locked(p, now)
                || (self.mode.kind == ModeKind::Defend
                    && p.objective == Objective::KillVelocity
                    && defense_rebound(belief, p, &self.model).map_or(false, |v| v.x.abs() < self.cfg.tactics.defense_keep_vx))
        });
        if keep {
            return;
        }
        let result = match self.mode.kind {
            ModeKind::Shoot => self.plan_shot(belief, mallet, now),
            ModeKind::Defend => plan_defense(
                belief,
                mallet,
                &self.model,
                &self.bounds,
                &self.cfg.tactics,
                self.mpc.cfg.speed_cap,
                self.cfg.defense_samples,
                &mut self.rng,
            ),
            ModeKind::Prepare => match &self.plan {
                Some(p) if matches!(p.objective, Objective::PrepareTarget(_)) => Ok(*p),
                _ => plan_prepare(
                    belief,
                    mallet,
                    &self.model.geometry,
                    &self.bounds,
                    &self.cfg.tactics,
                    self.mpc.cfg.speed_cap,
                    self.cfg.prepare_samples,
                    &mut self.rng,
                ),
            },
            ModeKind::Home => Err(Error::NoPlan("home".into())),
        };
        self.plan = match result {
            Ok(p) => Some(p),
            Err(_) => match &self.plan {
                Some(p) if p.objective == Objective::Rest => Some(*p),
                _ => self.home_plan(mallet, now),
            },
        };
    }

    /// One control tick. `z` is the puck measurement, `mallet` the measured
    /// mallet state, `now` the logical time.
    pub fn cycle(&mut self, z: Vec2, mallet: &MalletState, now: f64) -> Result<CycleOutput> {
        let start = Instant::now();
        let mut times = StageTimes::default();

        let t = Instant::now();
        let belief = match self.tracker.step(z, now, self.previous.as_ref(), &self.model) {
            Ok(b) => b,
            Err(_) => {
                self.tracker.belief = None;
                self.tracker.step(z, now, None, &self.model)?
            }
        };
        let estimate = self.tracker.record(z);
        times.estimate = ms_since(t);

        let t = Instant::now();
        let geom = self.model.geometry.clone();
        let (next, reason) = decide_mode_with_reason(&belief, self.mode, &self.cfg.tactics, &geom, &self.bounds, now);
        let mode_change = (next.kind != self.mode.kind).then(|| ModeRecord {
            t: now,
            from: self.mode.kind,
            to: next.kind,
            reason: reason.to_string(),
        });
        if mode_change.is_some() {
            self.plan = self.plan.and_then(|p| self.retreat_plan(&p, now));
        }
        self.mode = next;
        times.decide = ms_since(t);

        let t = Instant::now();
        self.update_plan(&belief, mallet, now);
        times.plan = ms_since(t);

        let t = Instant::now();
        let mut shot_fired = false;
        let (command, mpc) = match self.plan {
            Some(plan) => {
                let out = self.mpc.step(mallet, &plan, now, &mut self.rng)?;
                if out.steps_to_contact == 0 && matches!(plan.objective, Objective::ShotAngle(_)) {
                    shot_fired = true;
                }
                let record = MpcRecord {
                    t: now,
                    n_feasible: out.n_feasible,
                    best_cost: out.cost,
                    chosen_vt: out.chosen_vt,
                };
                (out.command, Some(record))
            }
            None => (MalletCommand::stop(), None),
        };
        times.mpc = ms_since(t);

        let t = Instant::now();
        let (command, joint) = self.track_with_arm(command, mallet, now);
        times.arm = ms_since(t);

        let command = command.clamped(self.speed_cap);
        let v = command.velocity();
        assert!(
            v.iter().all(|c| c.is_finite()) && v.norm() <= self.speed_cap * (1.0 + 1e-12),
            "agent command must be finite and within the cap"
        );
        self.previous = Some(MalletState::from_parts(mallet.pos(), v).to_vec());
        times.total = ms_since(start);
        Ok(CycleOutput {
            command,
            mode: self.mode.kind,
            belief,
            mode_change,
            estimate,
            mpc,
            joint,
            shot_fired,
            times,
        })
    }

    fn track_with_arm(&mut self, cmd: MalletCommand, mallet: &MalletState, now: f64) -> (MalletCommand, Option<JointRecord>) {
        let Some(arm) = &self.cfg.arm else {
            return (cmd, None);
        };
        let dt = self.model.dt;
        let state = match self.joints {
            Some(j) => j,
            None => match radial_ik(&mallet.pos(), arm) {
                Some(q) if arm.contains(&q) => JointState::at_rest(q),
                _ => JointState::at_rest(arm.q_ref()),
            },
        };
        let next = qp_track(&state, &cmd, arm, dt);
        self.joints = Some(next);
        let v = clamp_norm((fk(&next.q, arm) - mallet.pos()) / dt, self.speed_cap);
        let record = JointRecord {
            t: now,
            q: next.q.into(),
            q_dot: next.q_dot.into(),
            sv_min: min_singular_value(&jacobian(&next.q, arm)),
        };
        (MalletCommand::new(v), Some(record))
    }
}
