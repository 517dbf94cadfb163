#![allow(dead_code)]

use std::sync::OnceLock;

use airhockey::dynamics::{collect_transitions, ExplorationPolicy, PiecewiseModel};
use airhockey::ebm::{ebm_train, EnergyModel, Normalization, TrainConfig};
use airhockey::shot::{plan_shot_dataset, ShotConfig, ShotSampling};
use airhockey::sim::{SimConfig, Vec4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DT: f64 = 0.02;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noiseless() -> SimConfig {
    SimConfig {
        puck_velocity_noise: 0.0,
        ..SimConfig::default()
    }
}

/// Piecewise model fitted on the default noisy simulator.
pub fn fitted_model() -> &'static PiecewiseModel {
    static MODEL: OnceLock<PiecewiseModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let sim = SimConfig::default();
        let data = collect_transitions(500, &ExplorationPolicy::default(), &sim, DT, 1).unwrap();
        PiecewiseModel::fit(&data, DT, &sim.geometry).unwrap()
    })
}

/// A quickly trained shot policy, good enough to drive matches.
pub fn quick_ebm() -> &'static EnergyModel {
    static EBM: OnceLock<EnergyModel> = OnceLock::new();
    EBM.get_or_init(|| {
        let sim = SimConfig::default();
        let model = fitted_model();
        let records = plan_shot_dataset(800, &ShotSampling::default(), model, &sim.agent_bounds(), &ShotConfig::default(), 5).unwrap();
        let pairs: Vec<(Vec4, f64)> = records.iter().map(|r| (Vec4::from(r.puck_state), r.angle)).collect();
        let cfg = TrainConfig {
            epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        ebm_train(&pairs, Normalization::for_table(&sim.geometry), &cfg).unwrap().0
    })
}
