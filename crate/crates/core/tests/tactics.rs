mod common;

use airhockey::estimator::{default_initial_cov, Belief};
use airhockey::harness::{run_match, MatchConfig, PuckStart, TrajectoryRecord};
use airhockey::sim::*;
use airhockey::tactics::*;
use common::{fitted_model, noiseless, quick_ebm, rng, DT};
use proptest::prelude::*;
use rand::Rng;

fn belief(x: f64, y: f64, vx: f64, vy: f64) -> Belief {
    Belief::new(Vec4::new(x, y, vx, vy), default_initial_cov(), 0.0)
}

fn closed_loop(state: [f64; 4], seed: u64, duration: f64) -> Vec<TrajectoryRecord> {
    let cfg = MatchConfig {
        sim: noiseless(),
        obs_noise: 0.0,
        duration,
        seed,
        start: PuckStart::Fixed { state },
        stop_on_goal: true,
        ..MatchConfig::default()
    };
    run_match(&cfg, fitted_model(), quick_ebm()).unwrap().logs.trajectory
}

/// Index of the first record right after the mallet touched the puck.
fn first_contact(traj: &[TrajectoryRecord], reach: f64) -> Option<usize> {
    (1..traj.len()).find(|&k| {
        let (a, b) = (&traj[k - 1], &traj[k]);
        let dv = ((b.puck[2] - a.puck[2]).powi(2) + (b.puck[3] - a.puck[3]).powi(2)).sqrt();
        let gap = ((a.puck[0] - a.mallet[0]).powi(2) + (a.puck[1] - a.mallet[1]).powi(2)).sqrt();
        let closing = ((a.puck[2] - a.mallet[2]).powi(2) + (a.puck[3] - a.mallet[3]).powi(2)).sqrt();
        dv > 0.05 && gap < reach + 2.0 * closing * DT + 0.005
    })
}

#[test]
fn closed_loop_defense_kills_head_on_attacks() {
    let reach = TableGeometry::default().contact_distance();
    let mut r = rng(31);
    for i in 0..20 {
        let y = r.gen_range(-0.1..0.1);
        let speed = r.gen_range(1.0..2.0);
        let traj = closed_loop([0.6, y, -speed, 0.0], i, 3.0);
        let k = first_contact(&traj, reach).unwrap_or_else(|| panic!("no contact for y {y} speed {speed}"));
        let vx = traj[k].puck[2];
        assert!(vx.abs() < 0.1, "y {y} speed {speed}: vx after contact {vx}");
    }
}

#[test]
fn closed_loop_prepare_bounces_toward_the_aim_point() {
    let g = TableGeometry::default();
    let cfg = TacticConfig::default();
    let reach = g.contact_distance();
    let mut r = rng(41);
    for i in 0..20 {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let x = r.gen_range(-0.6..-0.2);
        let y = side * (g.puck_y_limit() - r.gen_range(0.01..cfg.prepare_wall_margin));
        let traj = closed_loop([x, y, 0.0, 0.0], i, 4.0);
        let k = first_contact(&traj, reach).unwrap_or_else(|| panic!("no contact from ({x}, {y})"));
        let target = Vec2::new(traj[k - 1].puck[0] + cfg.prepare_advance, 0.0);
        let after = &traj[k..];
        let end = first_contact(&after[10..], reach).map_or(after.len(), |e| e + 10);
        let miss = after[..end]
            .iter()
            .map(|t| (Vec2::new(t.puck[0], t.puck[1]) - target).norm())
            .fold(f64::INFINITY, f64::min);
        assert!(miss < 0.1, "start ({x}, {y}): miss {miss}");
    }
}

#[test]
fn defense_beats_the_stationary_block() {
    let model = fitted_model();
    let sim = SimConfig::default();
    let cfg = TacticConfig::default();
    let mut r = rng(5);
    for _ in 0..50 {
        let b = belief(r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2), -r.gen_range(0.8..2.0), r.gen_range(-0.2..0.2));
        let mallet = MalletState::at_rest(cfg.defense_line_x, b.mean[1]);
        let plan = plan_defense(&b, &mallet, model, &sim.agent_bounds(), &cfg, 2.0, 64, &mut r).unwrap();
        let mut path = vec![b.mean];
        for _ in 0..(cfg.defense_horizon / model.dt).ceil() as usize {
            path.push(model.predict_mean(path.last().unwrap(), None));
        }
        let score = |k: usize, m: &MalletState| model.apply_mallet(&path[k], &m.to_vec())[2].abs();
        let k_plan = ((plan.contact_time - b.stamp) / model.dt).round() as usize;
        let crossing = (2..path.len()).find(|&k| path[k][0] <= cfg.defense_line_x && path[k][2] < 0.0).unwrap();
        let v_in = Vec2::new(path[crossing][2], path[crossing][3]);
        let block = MalletState::from_parts(Vec2::new(path[crossing][0], path[crossing][1]) + v_in.normalize() * sim.geometry.contact_distance(), Vec2::zeros());
        assert!(score(k_plan, &plan.contact_mallet_state) <= score(crossing, &block) + 1e-12);
        assert_eq!(plan.objective, Objective::KillVelocity);
    }
}

#[test]
fn prepare_heuristic_examples() {
    let g = TableGeometry::default();
    let cfg = TacticConfig::default();
    let sim = SimConfig::default();
    let mallet = MalletState::at_rest(-0.8, 0.0);
    let plan = plan_prepare(&belief(-0.5, 0.0, 0.0, 0.0), &mallet, &g, &sim.agent_bounds(), &cfg, 2.0, 32, &mut rng(0)).unwrap();
    let Objective::PrepareTarget(v) = plan.objective else { panic!("wrong objective") };
    assert!(v[0] > 0.0 && v[1].abs() < 1e-9);
    let plan = plan_prepare(&belief(-0.5, 0.35, 0.0, 0.0), &mallet, &g, &sim.agent_bounds(), &cfg, 2.0, 32, &mut rng(0)).unwrap();
    let Objective::PrepareTarget(v) = plan.objective else { panic!("wrong objective") };
    assert!(v[1] > 0.0);
}

#[test]
fn rule_table() {
    let g = TableGeometry::default();
    let sim = SimConfig::default();
    let cfg = TacticConfig {
        v_defend_threshold: 0.5,
        ..TacticConfig::default()
    };
    let decide = |b: &Belief| decide_mode(b, BehaviorMode::new(ModeKind::Shoot, -1.0), &cfg, &g, &sim.agent_bounds(), 0.0).kind;
    assert_eq!(decide(&belief(0.4, 0.0, 1.0, 0.0)), ModeKind::Home);
    assert_eq!(decide(&belief(-0.4, 0.0, -1.5, 0.0)), ModeKind::Defend);
    assert_eq!(decide(&belief(-0.4, g.puck_y_limit() - 0.01, 0.0, 0.0)), ModeKind::Prepare);
    assert_eq!(decide(&belief(-0.4, 0.1, 0.0, 0.0)), ModeKind::Shoot);
}

fn arb_belief() -> impl Strategy<Value = Belief> {
    (-0.9..0.9f64, -0.45..0.45f64, -3.0..3.0f64, -1.0..1.0f64).prop_map(|(x, y, vx, vy)| belief(x, y, vx, vy))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn switches_respect_the_dwell(
        beliefs in prop::collection::vec(arb_belief(), 200),
        min_dwell in 0.05..0.5f64,
    ) {
        let g = TableGeometry::default();
        let bounds = SimConfig::default().agent_bounds();
        let cfg = TacticConfig { min_dwell, ..TacticConfig::default() };
        let mut mode = BehaviorMode::new(ModeKind::Home, f64::NEG_INFINITY);
        let mut switches = Vec::new();
        for (k, b) in beliefs.iter().enumerate() {
            let now = k as f64 * 0.02;
            let next = decide_mode(b, mode, &cfg, &g, &bounds, now);
            if next.kind != mode.kind {
                switches.push(now);
            }
            mode = next;
        }
        let cap = (1.0 / min_dwell).floor() as usize + 1;
        for (i, &t) in switches.iter().enumerate() {
            let in_window = switches[i..].iter().take_while(|&&s| s < t + 1.0).count();
            prop_assert!(in_window <= cap, "{in_window} switches in 1 s with dwell {min_dwell}");
        }
    }

    #[test]
    fn zero_dwell_is_memoryless(b in arb_belief(), now in 0.0..10.0f64) {
        let g = TableGeometry::default();
        let bounds = SimConfig::default().agent_bounds();
        let cfg = TacticConfig { min_dwell: 0.0, ..TacticConfig::default() };
        let kinds: Vec<_> = ModeKind::ALL
            .iter()
            .map(|&k| decide_mode(&b, BehaviorMode::new(k, now), &cfg, &g, &bounds, now).kind)
            .collect();
        prop_assert!(kinds.iter().all(|&k| k == kinds[0]));
    }

    #[test]
    fn defense_plans_are_valid_and_never_aim_at_our_goal(
        x in -0.3..0.5f64, y in -0.35..0.35f64, vx in -3.0..-0.4f64, vy in -1.0..1.0f64,
        mx in -0.9..-0.6f64, my in -0.3..0.3f64, seed in 0u64..1000,
    ) {
        let model = fitted_model();
        let sim = SimConfig::default();
        let bounds = sim.agent_bounds();
        let b = belief(x, y, vx, vy);
        let mallet = MalletState::at_rest(mx, my);
        if let Ok(plan) = plan_defense(&b, &mallet, model, &bounds, &TacticConfig::default(), 2.0, 32, &mut rng(seed)) {
            let m = plan.contact_mallet_state;
            prop_assert!(m.is_finite() && bounds.contains(&m.pos()));
            prop_assert!(m.vel().norm() <= 2.0 + 1e-12);
            prop_assert!(plan.contact_time > b.stamp);
            let k = ((plan.contact_time - b.stamp) / model.dt).round() as usize;
            let mut s = b.mean;
            for _ in 0..k {
                s = model.predict_mean(&s, None);
            }
            let after = model.apply_mallet(&s, &m.to_vec());
            prop_assert!(!heads_into_own_goal(Vec2::new(after[0], after[1]), Vec2::new(after[2], after[3]), &model.geometry));
        }
    }

    #[test]
    fn prepare_plans_are_valid(x in -0.85..-0.1f64, y in -0.45..0.45f64, seed in 0u64..1000) {
        let sim = SimConfig::default();
        let bounds = sim.agent_bounds();
        let b = belief(x, y.clamp(-sim.geometry.puck_y_limit(), sim.geometry.puck_y_limit()), 0.0, 0.0);
        if let Ok(plan) = plan_prepare(&b, &MalletState::at_rest(-0.8, 0.0), &sim.geometry, &bounds, &TacticConfig::default(), 2.0, 32, &mut rng(seed)) {
            let m = plan.contact_mallet_state;
            prop_assert!(m.is_finite() && bounds.contains(&m.pos()) && m.vel().norm() <= 2.0);
            prop_assert!(((m.pos() - b.position()).norm() - sim.geometry.contact_distance()).abs() < 1e-12);
            prop_assert!(plan.contact_time > b.stamp);
            prop_assert!(matches!(plan.objective, Objective::PrepareTarget(_)));
        }
    }
}


