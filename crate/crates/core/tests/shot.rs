mod common;

use airhockey::estimator::Belief;
use airhockey::shot::*;
use airhockey::sim::*;
use common::fitted_model;
use nalgebra::Matrix4;
use proptest::prelude::*;

fn tiny_cov() -> Matrix4<f64> {
    Matrix4::identity() * 1e-10
}

fn bounds() -> MalletBounds {
    SimConfig::default().agent_bounds()
}

#[test]
fn straight_shot_from_the_center_scores() {
    let model = fitted_model();
    let cfg = ShotConfig::default();
    let b = Belief::new(Vec4::new(0.0, 0.0, 0.0, 0.0), tiny_cov(), 0.0);
    let e = shot_cost(0.0, &b, model, &bounds(), &cfg);
    assert!(e.feasible && e.p_goal >= 0.999);
    let w = cfg.weights;
    assert!((e.cost - (-w.w_goal - w.w_vel * e.expected_speed)).abs() < 1e-3);
    assert!(e.expected_speed > 1.0);
}

#[test]
fn backward_strike_has_no_goal_chance() {
    let model = fitted_model();
    let cfg = ShotConfig::default();
    let b = Belief::new(Vec4::new(-0.5, 0.0, 0.0, 0.0), tiny_cov(), 0.0);
    let e = shot_cost(std::f64::consts::PI, &b, model, &bounds(), &cfg);
    assert_eq!(e.p_goal, 0.0);
    assert_eq!(e.cost, cfg.weights.w_penalty);
}

#[test]
fn centerline_puck_aims_straight() {
    let model = fitted_model();
    let cfg = ShotConfig::default();
    let b = Belief::new(Vec4::new(-0.4, 0.0, 0.0, 0.0), nominal_contact_cov(), 0.0);
    let plan = solve_shot(&b, model, &bounds(), &cfg).unwrap();
    let resolution = std::f64::consts::PI / (cfg.grid_n - 1) as f64 / 4.0;
    assert!(plan.angle.abs() <= resolution, "angle {}", plan.angle);
}

#[test]
fn off_center_puck_aims_back_toward_the_goal() {
    let model = fitted_model();
    let b = Belief::new(Vec4::new(-0.4, 0.2, 0.0, 0.0), nominal_contact_cov(), 0.0);
    let plan = solve_shot(&b, model, &bounds(), &ShotConfig::default()).unwrap();
    assert!(plan.angle < 0.0);
    let d = plan.contact_mallet_state.pos() - Vec2::new(-0.4, 0.2);
    assert!((d.norm() - model.geometry.contact_distance()).abs() < 1e-12);
}

#[test]
fn speed_weight_trades_goal_probability() {
    let model = fitted_model();
    let b = Belief::new(Vec4::new(-0.45, 0.25, 0.0, 0.0), nominal_contact_cov(), 0.0);
    let mut last = f64::INFINITY;
    for w_vel in [0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0] {
        let cfg = ShotConfig {
            weights: ShotWeights {
                w_vel,
                ..ShotWeights::default()
            },
            grid_n: 1025,
            ..ShotConfig::default()
        };
        let plan = solve_shot(&b, model, &bounds(), &cfg).unwrap();
        assert!(plan.predicted_p_goal <= last + 1e-9, "w_vel {w_vel}: {} after {last}", plan.predicted_p_goal);
        last = plan.predicted_p_goal;
    }
}

fn arb_state() -> impl Strategy<Value = Vec4> {
    (-0.75..-0.1f64, -0.38..0.38f64, -0.4..0.4f64, -0.4..0.4f64).prop_map(|(x, y, vx, vy)| Vec4::new(x, y, vx, vy))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mirrored_puck_gives_mirrored_angle(s in arb_state()) {
        let model = fitted_model();
        let cfg = ShotConfig::default();
        let b = Belief::new(s, nominal_contact_cov(), 0.0);
        let m = Belief::new(Vec4::new(s[0], -s[1], s[2], -s[3]), nominal_contact_cov(), 0.0);
        match (solve_shot(&b, model, &bounds(), &cfg), solve_shot(&m, model, &bounds(), &cfg)) {
            (Ok(p), Ok(q)) => prop_assert_eq!(p.angle, -q.angle),
            (Err(_), Err(_)) => {}
            (p, q) => prop_assert!(false, "asymmetric outcome {:?} {:?}", p, q),
        }
    }

    #[test]
    fn scaling_all_weights_keeps_the_argmin(s in arb_state(), k in 0i32..4) {
        let model = fitted_model();
        let base = ShotConfig::default();
        let c = 2f64.powi(k - 1);
        let scaled = ShotConfig {
            weights: ShotWeights {
                w_goal: base.weights.w_goal * c,
                w_vel: base.weights.w_vel * c,
                w_penalty: base.weights.w_penalty * c,
                ..base.weights
            },
            ..base.clone()
        };
        let b = Belief::new(s, nominal_contact_cov(), 0.0);
        if let (Ok(p), Ok(q)) = (solve_shot(&b, model, &bounds(), &base), solve_shot(&b, model, &bounds(), &scaled)) {
            prop_assert_eq!(p.angle, q.angle);
        }
    }

    #[test]
    fn cost_is_finite_exactly_when_feasible(s in arb_state(), a in -3.1..3.1f64) {
        let model = fitted_model();
        let b = Belief::new(s, nominal_contact_cov(), 0.0);
        let e = shot_cost(a, &b, model, &bounds(), &ShotConfig::default());
        prop_assert_eq!(e.cost.is_finite(), e.feasible);
        prop_assert!((0.0..=1.0).contains(&e.p_goal));
    }

    #[test]
    fn returned_plans_touch_the_puck(s in arb_state()) {
        let model = fitted_model();
        let b = Belief::new(s, nominal_contact_cov(), 0.0);
        if let Ok(plan) = solve_shot(&b, model, &bounds(), &ShotConfig::default()) {
            let d = (plan.contact_mallet_state.pos() - b.position()).norm();
            prop_assert!((d - model.geometry.contact_distance()).abs() < 1e-12);
            prop_assert!(bounds().contains(&plan.contact_mallet_state.pos()));
        }
    }
}
