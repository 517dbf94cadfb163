//! Offline pipeline stages and the online runs, reading and writing the
//! versioned artifacts in one output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, StageTimes};
use crate::artifact::{load_versioned, read_jsonl, save_json, write_jsonl, TRANSITIONS_VERSION};
use crate::dynamics::{collect_transitions, ExplorationPolicy, PiecewiseModel, TransitionSet};
use crate::ebm::{ebm_evaluate, ebm_train, percentile, EnergyModel, EvalReport, Normalization, SamplerConfig, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::harness::{run_match, shooting_trials, MatchConfig, MatchLogs, Metrics, Opponent, PuckStart, TrialReport, LOG_FILES};
use crate::shot::{plan_shot_dataset, ShotConfig, ShotRecord, ShotSampling};
use crate::sim::{observe, MalletState, PuckState, SimConfig, Vec4, WorldState};

pub const TRANSITIONS_FILE: &str = "transitions.json";
pub const DYNAMICS_FILE: &str = "dynamics.json";
pub const SHOTS_FILE: &str = "shots.jsonl";
pub const EBM_FILE: &str = "ebm.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    pub dt: f64,
    pub episodes: usize,
    pub exploration: ExplorationPolicy,
    pub shots: usize,
    /// Trailing shot records kept out of training for evaluation.
    pub holdout: usize,
    pub sampling: ShotSampling,
    pub shot: ShotConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub agent: AgentConfig,
    pub opponent: Opponent,
    pub duration: f64,
    pub start: PuckStart,
    pub trials: usize,
    pub trial_timeout: f64,
    pub bench_cycles: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            dt: 0.02,
            episodes: 500,
            exploration: ExplorationPolicy::default(),
            shots: 5500,
            holdout: 500,
            sampling: ShotSampling::default(),
            shot: ShotConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            agent: AgentConfig::default(),
            opponent: Opponent::None,
            duration: 10.0,
            start: PuckStart::LaunchAtAgent { speed: 1.5 },
            trials: 100,
            trial_timeout: 6.0,
            bench_cycles: 500,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.agent.validate()?;
        if !(self.dt > 0.0) || self.episodes == 0 || self.shots <= self.holdout || !(self.duration > 0.0) {
            return Err(Error::Validation(
                "dt, episodes and duration must be positive and shots must exceed holdout".into(),
            ));
        }
        Ok(())
    }

    /// Match settings shared by `play`, `eval` trials and the shooting runs.
    pub fn match_config(&self, seed: u64) -> MatchConfig {
        MatchConfig {
            sim: self.sim.clone(),
            agent: AgentConfig {
                shot: self.shot.clone(),
                sampler: self.sampler.clone(),
                ..self.agent.clone()
            },
            opponent: self.opponent,
            duration: self.duration,
            seed,
            start: self.start,
            ..Default::default()
        }
    }
}

/// Artifact paths inside one output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn model(&self) -> Result<PiecewiseModel> {
        load_versioned(&self.path(DYNAMICS_FILE))
    }

    pub fn ebm(&self) -> Result<EnergyModel> {
        load_versioned(&self.path(EBM_FILE))
    }

    pub fn shots(&self) -> Result<Vec<ShotRecord>> {
        read_jsonl(&self.path(SHOTS_FILE))
    }
}

/// Per-stage seeds derived from the run seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(stage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub samples: usize,
    pub per_mode: [usize; 3],
}

pub fn gen_data(cfg: &PipelineConfig, seed: u64, ws: &Workspace) -> Result<GenDataSummary> {
    let samples = collect_transitions(cfg.episodes, &cfg.exploration, &cfg.sim, cfg.dt, stage_seed(seed, 1))?;
    let mut per_mode = [0usize; 3];
    for s in &samples {
        per_mode[s.mode as usize] += 1;
    }
    let set = TransitionSet {
        version: TRANSITIONS_VERSION,
        dt: cfg.dt,
        geometry: cfg.sim.geometry.clone(),
        samples,
    };
    let path = ws.path(TRANSITIONS_FILE);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string(&set)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(GenDataSummary {
        samples: set.samples.len(),
        per_mode,
    })
}

pub fn fit_dynamics(ws: &Workspace) -> Result<PiecewiseModel> {
    let path = ws.path(TRANSITIONS_FILE);
    let set: TransitionSet = load_versioned(&path)?;
    let model = PiecewiseModel::fit(&set.samples, set.dt, &set.geometry)?;
    save_json(&ws.path(DYNAMICS_FILE), &model)?;
    Ok(model)
}

pub fn plan_shots(cfg: &PipelineConfig, seed: u64, ws: &Workspace) -> Result<Vec<ShotRecord>> {
    let model = ws.model()?;
    let records = plan_shot_dataset(cfg.shots, &cfg.sampling, &model, &cfg.sim.agent_bounds(), &cfg.shot, stage_seed(seed, 2))?;
    write_jsonl(&ws.path(SHOTS_FILE), &records)?;
    Ok(records)
}

fn pairs(records: &[ShotRecord]) -> Vec<(Vec4, f64)> {
    records.iter().map(|r| (Vec4::from(r.puck_state), r.angle)).collect()
}

/// Training and held-out pairs: the last `holdout` records are held out.
pub fn split_shots(records: &[ShotRecord], holdout: usize) -> Result<(Vec<(Vec4, f64)>, Vec<(Vec4, f64)>)> {
    if records.len() <= holdout {
        return Err(Error::NotEnoughSamples {
            needed: holdout + 1,
            got: records.len(),
        });
    }
    let (train, test) = records.split_at(records.len() - holdout);
    Ok((pairs(train), pairs(test)))
}

pub fn train_ebm(cfg: &PipelineConfig, seed: u64, ws: &Workspace) -> Result<TrainReport> {
    let records = ws.shots()?;
    let (train, _) = split_shots(&records, cfg.holdout)?;
    let train_cfg = TrainConfig {
        seed: stage_seed(seed, 3),
        ..cfg.train.clone()
    };
    let (model, report) = ebm_train(&train, Normalization::for_table(&cfg.sim.geometry), &train_cfg)?;
    save_json(&ws.path(EBM_FILE), &model)?;
    save_json(&ws.path("train_report.json"), &report)?;
    Ok(report)
}

pub fn eval_ebm(cfg: &PipelineConfig, seed: u64, ws: &Workspace) -> Result<EvalReport> {
    let model = ws.ebm()?;
    let records = ws.shots()?;
    let (_, test) = split_shots(&records, cfg.holdout)?;
    let report = ebm_evaluate(&model, &test, &cfg.sampler, stage_seed(seed, 4))?;
    save_json(&ws.path("ebm_eval.json"), &report)?;
    Ok(report)
}

pub fn play(cfg: &PipelineConfig, seed: u64, ws: &Workspace) -> Result<Metrics> {
    let model = ws.model()?;
    let ebm = ws.ebm()?;
    let result = run_match(&cfg.match_config(stage_seed(seed, 5)), &model, &ebm)?;
    result.logs.write(&ws.path("match"))?;
    save_json(&ws.path("metrics.json"), &result.metrics)?;
    Ok(result.metrics)
}

pub fn shooting_eval(cfg: &PipelineConfig, seed: u64, ws: &Workspace) -> Result<TrialReport> {
    let model = ws.model()?;
    let ebm = ws.ebm()?;
    let base = cfg.match_config(0);
    let report = shooting_trials(cfg.trials, &base, cfg.trial_timeout, &model, &ebm, stage_seed(seed, 6))?;
    save_json(&ws.path("shooting.json"), &report)?;
    Ok(report)
}

/// Summary recomputed from a match log directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub cycles: usize,
    pub mode_transitions: usize,
    pub mode_fractions: std::collections::BTreeMap<crate::tactics::ModeKind, f64>,
    pub mpc_cycles: usize,
    pub mean_best_cost: f64,
    pub estimator_rmse: f64,
}

pub fn read_logs(dir: &Path) -> Result<MatchLogs> {
    fn load<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<Vec<T>> {
        read_jsonl(&dir.join(name)).map_err(|e| match e {
            Error::MissingArtifact { path, .. } => Error::MissingArtifact {
                path,
                command: "airhockey play".into(),
            },
            other => other,
        })
    }
    Ok(MatchLogs {
        trajectory: load(dir, LOG_FILES[0])?,
        modes: load(dir, LOG_FILES[1])?,
        mpc: load(dir, LOG_FILES[2])?,
        estimator: load(dir, LOG_FILES[3])?,
        joints: load(dir, LOG_FILES[4])?,
        latencies: Vec::new(),
    })
}

pub fn summarize_logs(logs: &MatchLogs) -> LogSummary {
    let n = logs.trajectory.len().max(1) as f64;
    let mut fractions = std::collections::BTreeMap::new();
    for kind in crate::tactics::ModeKind::ALL {
        let c = logs.trajectory.iter().filter(|r| r.mode == kind).count();
        fractions.insert(kind, c as f64 / n);
    }
    let sq: f64 = logs
        .trajectory
        .iter()
        .zip(&logs.estimator)
        .map(|(t, e)| (t.puck[0] - e.mean[0]).powi(2) + (t.puck[1] - e.mean[1]).powi(2))
        .sum();
    let finite_costs: Vec<f64> = logs.mpc.iter().map(|r| r.best_cost).filter(|c| c.is_finite()).collect();
    LogSummary {
        cycles: logs.trajectory.len(),
        mode_transitions: logs.modes.len(),
        mode_fractions: fractions,
        mpc_cycles: logs.mpc.len(),
        mean_best_cost: finite_costs.iter().sum::<f64>() / finite_costs.len().max(1) as f64,
        estimator_rmse: (sq / logs.estimator.len().max(1) as f64).sqrt(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cycles: usize,
    pub estimate: StageStats,
    pub decide: StageStats,
    pub plan: StageStats,
    pub mpc: StageStats,
    pub arm: StageStats,
    pub total: StageStats,
    /// Sum of the per-stage means over the mean total.
    pub stage_sum_ratio: f64,
}

fn stats(values: &[f64]) -> StageStats {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    StageStats {
        median_ms: percentile(&v, 0.5),
        p95_ms: percentile(&v, 0.95),
        mean_ms: v.iter().sum::<f64>() / v.len().max(1) as f64,
    }
}

/// Times `cycles` agent cycles on a rotation of shooting, defending and
/// idle situations.
pub fn bench(
    cfg: &PipelineConfig,
    model: &PiecewiseModel,
    ebm: &EnergyModel,
    cycles: usize,
    seed: u64,
) -> Result<BenchReport> {
    let mcfg = cfg.match_config(seed);
    let sim = &mcfg.sim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times: Vec<StageTimes> = Vec::with_capacity(cycles);
    let starts = [
        PuckState::at_rest(-0.4, 0.1),
        PuckState::new(0.3, 0.05, -1.5, -0.05),
        PuckState::at_rest(-0.5, 0.43),
        PuckState::new(0.4, 0.2, 1.0, 0.0),
    ];
    let episode = 50;
    let mut k = 0;
    while times.len() < cycles {
        let [hx, hy] = mcfg.agent.home;
        let mut world = WorldState::new(starts[k % starts.len()], MalletState::at_rest(hx, hy));
        let mut agent = Agent::new(
            AgentConfig {
                seed: stage_seed(seed, k as u64),
                ..mcfg.agent.clone()
            },
            model.clone(),
            ebm.clone(),
            sim.agent_bounds(),
            sim.mallet_speed_cap,
        )?;
        for _ in 0..episode {
            if times.len() >= cycles {
                break;
            }
            let z = observe(&world, &mut rng, mcfg.obs_noise);
            let out = agent.cycle(z, &world.mallet, world.sim_time)?;
            times.push(out.times);
            world = sim.step(&world, &out.command, model.dt, &mut rng)?;
            if world.goal.is_some() {
                break;
            }
        }
        k += 1;
    }
    let pick = |f: fn(&StageTimes) -> f64| stats(&times.iter().map(f).collect::<Vec<_>>());
    let report = BenchReport {
        cycles: times.len(),
        estimate: pick(|t| t.estimate),
        decide: pick(|t| t.decide),
        plan: pick(|t| t.plan),
        mpc: pick(|t| t.mpc),
        arm: pick(|t| t.arm),
        total: pick(|t| t.total),
        stage_sum_ratio: 0.0,
    };
    let sum = report.estimate.mean_ms + report.decide.mean_ms + report.plan.mean_ms + report.mpc.mean_ms + report.arm.mean_ms;
    Ok(BenchReport {
        stage_sum_ratio: sum / report.total.mean_ms.max(1e-12),
        ..report
    })
}

/// Wall-clock duration of `f` in seconds together with its result.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

pub const GENERATION_COMMANDS: [&str; 5] = [
    "airhockey gen-data",
    "airhockey fit-dynamics",
    "airhockey plan-shots",
    "airhockey train-ebm",
    "airhockey play",
];

/// Commands that have to run, in order, to produce the artifact made by `command`.
pub fn generation_chain(command: &str) -> Vec<&'static str> {
    let last = command.rsplit("&&").next().unwrap_or(command).trim();
    match GENERATION_COMMANDS.iter().position(|c| *c == last) {
        Some(i) => GENERATION_COMMANDS[..=i].to_vec(),
        None => GENERATION_COMMANDS.to_vec(),
    }
}
