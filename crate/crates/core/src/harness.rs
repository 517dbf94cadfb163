//! Match runner: steps the world, drives the agent and collects logs and metrics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, CycleOutput};
use crate::arm::JointRecord;
use crate::artifact::write_jsonl;
use crate::dynamics::PiecewiseModel;
use crate::ebm::{percentile, EnergyModel};
use crate::error::{Error, Result};
use crate::estimator::EstimatorRecord;
use crate::mpc::MpcRecord;
use crate::sim::{observe, GoalSide, MalletCommand, MalletState, PuckState, SimConfig, Vec2, WorldState};
use crate::tactics::{ModeKind, ModeRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opponent {
    None,
    /// A disc parked in front of the opponent goal.
    StaticWall,
    /// A second copy of the agent playing the other half.
    MirrorAgent,
}

/// How the puck is put on the table at the start and after each goal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PuckStart {
    /// Random resting puck in the agent half.
    AgentHalfRest,
    /// Puck launched from the opponent half toward the agent goal.
    LaunchAtAgent { speed: f64 },
    Fixed { state: [f64; 4] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub sim: SimConfig,
    pub agent: AgentConfig,
    pub opponent: Opponent,
    pub duration: f64,
    pub seed: u64,
    pub start: PuckStart,
    /// Position noise of the puck camera, meters.
    pub obs_noise: f64,
    /// A shot counts as scored when the goal follows within this time, seconds.
    pub shot_window: f64,
    /// Stop at the first goal instead of respawning.
    pub stop_on_goal: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            agent: AgentConfig::default(),
            opponent: Opponent::None,
            duration: 10.0,
            seed: 0,
            start: PuckStart::LaunchAtAgent { speed: 1.5 },
            obs_noise: 0.005,
            shot_window: 3.0,
            stop_on_goal: false,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.agent.validate()?;
        if !(self.duration > 0.0) || !(self.obs_noise >= 0.0) || !(self.shot_window > 0.0) {
            return Err(Error::Validation("duration and shot window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub puck: [f64; 4],
    pub mallet: [f64; 4],
    pub opponent: Option<[f64; 4]>,
    pub command: [f64; 2],
    pub mode: ModeKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchLogs {
    pub trajectory: Vec<TrajectoryRecord>,
    pub modes: Vec<ModeRecord>,
    pub mpc: Vec<MpcRecord>,
    pub estimator: Vec<EstimatorRecord>,
    pub joints: Vec<JointRecord>,
    /// Wall-clock cycle latencies, milliseconds. Not written to disk.
    #[serde(skip)]
    pub latencies: Vec<f64>,
}

pub const LOG_FILES: [&str; 5] = ["trajectory.jsonl", "modes.jsonl", "mpc.jsonl", "estimator.jsonl", "joints.jsonl"];

impl MatchLogs {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join(LOG_FILES[0]), &self.trajectory)?;
        write_jsonl(&dir.join(LOG_FILES[1]), &self.modes)?;
        write_jsonl(&dir.join(LOG_FILES[2]), &self.mpc)?;
        write_jsonl(&dir.join(LOG_FILES[3]), &self.estimator)?;
        write_jsonl(&dir.join(LOG_FILES[4]), &self.joints)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub goals_for: u32,
    pub goals_against: u32,
    pub shots_attempted: u32,
    pub shots_scored: u32,
    pub shot_success_rate: f64,
    pub latency_mean_ms: f64,
    pub latency_median_ms: f64,
    pub latency_p95_ms: f64,
    pub mode_fractions: BTreeMap<ModeKind, f64>,
    pub mode_transitions: u32,
    /// Root mean square error of the filtered puck position, meters.
    pub estimator_rmse: f64,
    pub cycles: u32,
}

impl Metrics {
    /// Copy with the wall-clock fields zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            latency_mean_ms: 0.0,
            latency_median_ms: 0.0,
            latency_p95_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub metrics: Metrics,
    pub logs: MatchLogs,
    pub final_world: WorldState,
    pub first_goal: Option<(GoalSide, f64)>,
}

pub fn latency_summary(latencies: &[f64]) -> (f64, f64, f64) {
    if latencies.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    (mean, percentile(&sorted, 0.5), percentile(&sorted, 0.95))
}

fn spawn(start: &PuckStart, sim: &SimConfig, rng: &mut ChaCha8Rng) -> PuckState {
    let g = &sim.geometry;
    match start {
        PuckStart::AgentHalfRest => {
            let (x, y) = stationary_trial_position(sim, rng);
            PuckState::at_rest(x, y)
        }
        PuckStart::LaunchAtAgent { speed } => {
            let x = rng.gen_range(0.2..0.6);
            let y = rng.gen_range(-0.3..0.3);
            let aim = Vec2::new(-g.length / 2.0, rng.gen_range(-0.8..0.8) * g.goal_width / 2.0);
            let v = (aim - Vec2::new(x, y)).normalize() * *speed;
            PuckState::new(x, y, v.x, v.y)
        }
        PuckStart::Fixed { state } => PuckState::new(state[0], state[1], state[2], state[3]),
    }
}

/// Random resting position in the agent half used by the shooting trials.
pub fn stationary_trial_position<R: Rng + ?Sized>(sim: &SimConfig, rng: &mut R) -> (f64, f64) {
    let g = &sim.geometry;
    let x = rng.gen_range(-g.length / 2.0 + 0.15..-0.1);
    let y_lim = g.puck_y_limit() - 0.01;
    (x, rng.gen_range(-y_lim..y_lim))
}

fn mirror(s: &MalletState) -> MalletState {
    MalletState::from_parts(-s.pos(), -s.vel())
}

/// Runs one match. The agent and, for self-play, its mirrored twin share the
/// learned models.
pub fn run_match(cfg: &MatchConfig, model: &PiecewiseModel, ebm: &EnergyModel) -> Result<MatchResult> {
    cfg.validate()?;
    let sim = &cfg.sim;
    let dt = model.dt;
    let bounds = sim.agent_bounds();
    let agent_cfg = AgentConfig {
        seed: cfg.seed,
        ..cfg.agent.clone()
    };
    let mut agent = Agent::new(agent_cfg.clone(), model.clone(), ebm.clone(), bounds, sim.mallet_speed_cap)?;
    let mut twin = match cfg.opponent {
        Opponent::MirrorAgent => Some(Agent::new(
            AgentConfig {
                seed: cfg.seed.wrapping_add(1),
                ..agent_cfg.clone()
            },
            model.clone(),
            ebm.clone(),
            bounds,
            sim.mallet_speed_cap,
        )?),
        _ => None,
    };

    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(k);
        r
    };
    let (mut sim_rng, mut obs_rng, mut spawn_rng) = (stream(1), stream(2), stream(3));

    let home = agent_cfg.home();
    let mut world = WorldState::new(spawn(&cfg.start, sim, &mut spawn_rng), MalletState::at_rest(home.x, home.y));
    world.opponent = match cfg.opponent {
        Opponent::None => None,
        Opponent::StaticWall => Some(MalletState::at_rest(sim.geometry.length / 2.0 - 0.12, 0.0)),
        Opponent::MirrorAgent => Some(MalletState::at_rest(-home.x, -home.y)),
    };

    let steps = (cfg.duration / dt).round() as usize;
    let mut logs = MatchLogs::default();
    let mut metrics = Metrics::default();
    let mut mode_counts: BTreeMap<ModeKind, u32> = BTreeMap::new();
    let mut sq_err = 0.0;
    let mut pending_shot: Option<f64> = None;
    let mut first_goal = None;

    for _ in 0..steps {
        let now = world.sim_time;
        let z = observe(&world, &mut obs_rng, cfg.obs_noise);
        let out: CycleOutput = agent.cycle(z, &world.mallet, now)?;
        let opp_cmd = match (&mut twin, &world.opponent) {
            (Some(t), Some(o)) => Some(MalletCommand::new(-t.cycle(-z, &mirror(o), now)?.command.velocity())),
            (None, Some(_)) => Some(MalletCommand::stop()),
            _ => None,
        };

        metrics.cycles += 1;
        *mode_counts.entry(out.mode).or_default() += 1;
        sq_err += (out.belief.position() - world.puck.pos()).norm_squared();
        logs.latencies.push(out.times.total);
        if let Some(r) = out.mode_change {
            logs.modes.push(r);
        }
        logs.mpc.extend(out.mpc);
        logs.estimator.extend(out.estimate);
        logs.joints.extend(out.joint);
        logs.trajectory.push(TrajectoryRecord {
            t: now,
            puck: world.puck.to_array(),
            mallet: world.mallet.to_array(),
            opponent: world.opponent.map(|o| o.to_array()),
            command: out.command.target_velocity,
            mode: out.mode,
        });
        if out.shot_fired {
            metrics.shots_attempted += 1;
            pending_shot = Some(now);
        }

        world = sim.step_with_opponent(&world, &out.command, opp_cmd.as_ref(), dt, &mut sim_rng)?;
        if let Some(side) = world.goal {
            match side {
                GoalSide::Theirs => {
                    metrics.goals_for += 1;
                    if pending_shot.map_or(false, |t| world.sim_time - t <= cfg.shot_window) {
                        metrics.shots_scored += 1;
                    }
                }
                GoalSide::Ours => metrics.goals_against += 1,
            }
            pending_shot = None;
            first_goal.get_or_insert((side, world.sim_time));
            if cfg.stop_on_goal {
                break;
            }
            world.puck = spawn(&cfg.start, sim, &mut spawn_rng);
            world.goal = None;
            agent.reset_track();
            if let Some(t) = &mut twin {
                t.reset_track();
            }
        }
    }

    let total = metrics.cycles.max(1) as f64;
    for kind in ModeKind::ALL {
        metrics.mode_fractions.insert(kind, *mode_counts.get(&kind).unwrap_or(&0) as f64 / total);
    }
    metrics.mode_transitions = logs.modes.len() as u32;
    metrics.estimator_rmse = (sq_err / total).sqrt();
    metrics.shot_success_rate = if metrics.shots_attempted > 0 {
        metrics.shots_scored as f64 / metrics.shots_attempted as f64
    } else {
        0.0
    };
    let (mean, median, p95) = latency_summary(&logs.latencies);
    metrics.latency_mean_ms = mean;
    metrics.latency_median_ms = median;
    metrics.latency_p95_ms = p95;
    Ok(MatchResult {
        metrics,
        logs,
        final_world: world,
        first_goal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub n: usize,
    pub scored: usize,
    pub conceded: usize,
    pub success_rate: f64,
    pub starts: Vec<[f64; 2]>,
    pub outcomes: Vec<Option<GoalSide>>,
}

/// Places a resting puck at `n` random spots of the agent half and counts how
/// often the agent scores within `timeout` seconds.
pub fn shooting_trials(
    n: usize,
    base: &MatchConfig,
    timeout: f64,
    model: &PiecewiseModel,
    ebm: &EnergyModel,
    seed: u64,
) -> Result<TrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrialReport {
        n,
        scored: 0,
        conceded: 0,
        success_rate: 0.0,
        starts: Vec::with_capacity(n),
        outcomes: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (x, y) = stationary_trial_position(&base.sim, &mut rng);
        let cfg = MatchConfig {
            duration: timeout,
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
            start: PuckStart::Fixed { state: [x, y, 0.0, 0.0] },
            stop_on_goal: true,
            opponent: Opponent::None,
            ..base.clone()
        };
        let result = run_match(&cfg, model, ebm)?;
        let outcome = result.first_goal.map(|(side, _)| side);
        match outcome {
            Some(GoalSide::Theirs) => report.scored += 1,
            Some(GoalSide::Ours) => report.conceded += 1,
            None => {}
        }
        report.starts.push([x, y]);
        report.outcomes.push(outcome);
    }
    report.success_rate = report.scored as f64 / n.max(1) as f64;
    Ok(report)
}
