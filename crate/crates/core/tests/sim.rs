mod common;

use airhockey::sim::*;
use common::{noiseless, rng, DT};
use proptest::prelude::*;
use rand::Rng;

/// Semi-implicit Euler at a fixed fine step, puck only, walls without goals.
fn fine_flight(mut p: Vec2, mut v: Vec2, g: &TableGeometry, duration: f64, h: f64) -> (Vec2, Vec2) {
    let ylim = g.width / 2.0 - g.puck_radius;
    let xlim = g.length / 2.0 - g.puck_radius;
    let steps = (duration / h).round() as usize;
    for _ in 0..steps {
        v *= (-g.damping_coeff * h).exp();
        p += v * h;
        if p.y.abs() > ylim {
            let s = p.y.signum();
            p.y = s * (ylim - (p.y.abs() - ylim) * g.wall_restitution);
            v.y = -v.y * g.wall_restitution;
            v.x *= g.wall_tangential_retention;
        }
        if p.x.abs() > xlim {
            let s = p.x.signum();
            p.x = s * (xlim - (p.x.abs() - xlim) * g.wall_restitution);
            v.x = -v.x * g.wall_restitution;
            v.y *= g.wall_tangential_retention;
        }
    }
    (p, v)
}

#[test]
fn wall_bounce_matches_fine_substep_oracle() {
    let sim = noiseless();
    let g = &sim.geometry;
    let mut world = WorldState::new(PuckState::new(-0.2, 0.3, 1.2, 1.2), MalletState::at_rest(-0.9, -0.4));
    let mut r = rng(0);
    for _ in 0..10 {
        world = sim.step(&world, &MalletCommand::stop(), DT, &mut r).unwrap();
    }
    let (p, v) = fine_flight(Vec2::new(-0.2, 0.3), Vec2::new(1.2, 1.2), g, 10.0 * DT, 1e-4);
    assert!(world.last_contact.is_some());
    assert!((world.puck.pos() - p).norm() < 1e-3, "{:?} vs {p:?}", world.puck);
    assert!((world.puck.vel() - v).norm() < 1e-2);
}

/// Spring-dashpot contact in the mallet frame, integrated finely. A linear
/// dashpot with damping ratio zeta restitutes exp(-zeta*pi/sqrt(1-zeta^2)).
fn soft_contact(r0: Vec2, u0: Vec2, reach: f64, e: f64) -> Vec2 {
    let ln_e = e.ln();
    let zeta = -ln_e / (std::f64::consts::PI.powi(2) + ln_e * ln_e).sqrt();
    let k: f64 = 1e8;
    let c = 2.0 * zeta * k.sqrt();
    let h = 1e-8;
    let (mut r, mut u) = (r0, u0);
    for _ in 0..1_000_000 {
        let d = r.norm();
        let depth = reach - d;
        let mut a = Vec2::zeros();
        if depth > 0.0 {
            let n = r / d;
            a = n * (k * depth - c * u.dot(&n));
        }
        u += a * h;
        r += u * h;
        if depth <= 0.0 && u.dot(&r) > 0.0 && d > reach {
            break;
        }
    }
    u
}

#[test]
fn mallet_contact_agrees_with_impulse_oracle() {
    let g = TableGeometry::default();
    let reach = g.contact_distance();
    let mut r = rng(3);
    for _ in 0..50 {
        let theta: f64 = r.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let n = Vec2::new(theta.cos(), theta.sin());
        let m = MalletState::new(-0.5, 0.0, r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let mut u = Vec2::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        if u.dot(&n) > -0.1 {
            u -= n * (u.dot(&n) + 0.5);
        }
        let puck = PuckState::from_parts(m.pos() + n * reach, m.vel() + u);
        let out = resolve_mallet_contact(&puck, &m, &g, g.mallet_restitution).unwrap();
        let u_out = out.vel() - m.vel();
        let oracle = soft_contact(n * reach, u, reach, g.mallet_restitution);
        assert!((u_out - oracle).norm() < 0.01 * u.norm(), "{u_out:?} vs {oracle:?}");
        // impulse along the normal, energy in the mallet frame does not grow
        let impulse = u_out - u;
        assert!(impulse.perp(&n).abs() < 1e-12 && impulse.dot(&n) > 0.0);
        assert!(u_out.norm_squared() <= u.norm_squared() + 1e-12);
    }
}

#[test]
fn goal_detection_matches_straight_line_rollout() {
    let sim = noiseless();
    let g = sim.geometry.clone();
    let xlim = g.puck_x_limit();
    let mut r = rng(11);
    let mut checked = 0;
    while checked < 1000 {
        let p0 = Vec2::new(r.gen_range(-0.6..0.5), r.gen_range(-0.35..0.35));
        let aim_y: f64 = r.gen_range(-0.3..0.3);
        let dir = (Vec2::new(xlim, aim_y) - p0).normalize();
        // straight flight must stay clear of the side walls
        if aim_y.abs() > g.puck_y_limit() - 0.01 {
            continue;
        }
        let y_line = p0.y + dir.y / dir.x * (g.length / 2.0 - p0.x);
        if (y_line.abs() - g.goal_width / 2.0).abs() < 0.005 || (aim_y.abs() - g.goal_width / 2.0).abs() < 0.005 {
            continue;
        }
        let expected = aim_y.abs() < g.goal_width / 2.0;
        if expected != (y_line.abs() < g.goal_width / 2.0) {
            continue;
        }
        let mut world = WorldState::new(PuckState::from_parts(p0, dir * 3.0), MalletState::at_rest(-0.9, 0.45));
        let mut goal = None;
        for _ in 0..50 {
            world = sim.step(&world, &MalletCommand::stop(), DT, &mut r).unwrap();
            if world.goal.is_some() {
                goal = world.goal;
                break;
            }
            if world.puck.vx < 0.0 {
                break;
            }
        }
        assert_eq!(goal == Some(GoalSide::Theirs), expected, "start {p0:?} aim {aim_y}");
        assert_eq!(check_goal(&world.puck, &g), goal);
        checked += 1;
    }
}

#[test]
fn puck_never_leaves_the_table() {
    let sim = SimConfig::default();
    let g = &sim.geometry;
    let mut r = rng(21);
    let mut steps = 0usize;
    let ylim = g.puck_y_limit();
    let xlim = g.puck_x_limit();
    while steps < 1_000_000 {
        let puck = PuckState::new(
            r.gen_range(-xlim..xlim),
            r.gen_range(-ylim..ylim),
            r.gen_range(-6.0..6.0),
            r.gen_range(-6.0..6.0),
        );
        let mut world = WorldState::new(puck, MalletState::at_rest(-0.6, r.gen_range(-0.4..0.4)));
        if (world.puck.pos() - world.mallet.pos()).norm() <= g.contact_distance() {
            continue;
        }
        for _ in 0..500 {
            let cmd = MalletCommand::new(Vec2::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)));
            world = sim.step(&world, &cmd, DT, &mut r).unwrap();
            steps += 1;
            let p = world.puck;
            assert!(p.is_finite());
            assert!(p.y.abs() <= ylim + 1e-12, "{p:?}");
            if world.goal.is_none() {
                assert!(p.x.abs() <= xlim + 1e-12 || g.in_goal_mouth(p.y), "{p:?}");
            } else {
                assert!(g.in_goal_mouth(p.y) && p.x.abs() >= g.length / 2.0);
                break;
            }
        }
    }
}

fn kinetic(v: Vec2) -> f64 {
    0.5 * v.norm_squared()
}

proptest! {
    #[test]
    fn wall_reflection_never_adds_energy(
        vx in -5.0..5.0f64, vy in -5.0..5.0f64, theta in 0.0..std::f64::consts::TAU,
        e_n in 0.05..=1.0f64, e_t in 0.05..=1.0f64,
    ) {
        let v = Vec2::new(vx, vy);
        let r = reflect_wall(v, Vec2::new(theta.cos(), theta.sin()), e_n, e_t);
        prop_assert!(kinetic(r.velocity) <= kinetic(v) * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn mallet_contact_never_adds_relative_energy(
        theta in 0.0..std::f64::consts::TAU, e in 0.05..=1.0f64,
        ux in -4.0..4.0f64, uy in -4.0..4.0f64, mvx in -2.0..2.0f64, mvy in -2.0..2.0f64,
    ) {
        let g = TableGeometry::default();
        let n = Vec2::new(theta.cos(), theta.sin());
        let m = MalletState::new(-0.4, 0.1, mvx, mvy);
        let puck = PuckState::from_parts(m.pos() + n * g.contact_distance(), m.vel() + Vec2::new(ux, uy));
        let out = resolve_mallet_contact(&puck, &m, &g, e).unwrap();
        prop_assert!(kinetic(out.vel() - m.vel()) <= kinetic(Vec2::new(ux, uy)) * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn elastic_undamped_bounces_keep_speed(
        x in -0.8..0.8f64, y in -0.4..0.4f64, heading in 0.0..std::f64::consts::TAU, speed in 0.5..4.0f64,
    ) {
        let sim = SimConfig {
            geometry: TableGeometry {
                damping_coeff: 0.0,
                wall_restitution: 1.0,
                wall_tangential_retention: 1.0,
                goal_width: 1e-3,
                ..TableGeometry::default()
            },
            puck_velocity_noise: 0.0,
            ..SimConfig::default()
        };
        let puck = PuckState::new(x, y, speed * heading.cos(), speed * heading.sin());
        let mut world = WorldState::new(puck, MalletState::at_rest(-0.92, 0.47));
        world.mallet = MalletState::at_rest(sim.agent_bounds().x_min, sim.agent_bounds().y_max);
        prop_assume!((world.puck.pos() - world.mallet.pos()).norm() > 0.3);
        let mut r = rng(0);
        let reach = sim.geometry.contact_distance() + speed * DT;
        for _ in 0..100 {
            world = sim.step(&world, &MalletCommand::stop(), DT, &mut r).unwrap();
            if (world.puck.pos() - world.mallet.pos()).norm() < reach || world.goal.is_some() {
                return Ok(());
            }
        }
        prop_assert!((world.puck.vel().norm() - speed).abs() <= 1e-6 * speed);
    }

    #[test]
    fn step_is_deterministic(seed in 0u64..1000, vx in -3.0..3.0f64, vy in -3.0..3.0f64, cx in -2.0..2.0f64) {
        let sim = SimConfig::default();
        let world = WorldState::new(PuckState::new(-0.3, 0.1, vx, vy), MalletState::at_rest(-0.7, 0.0));
        let cmd = MalletCommand::new(Vec2::new(cx, 0.5));
        let a = sim.step(&world, &cmd, DT, &mut rng(seed)).unwrap();
        let b = sim.step(&world, &cmd, DT, &mut rng(seed)).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
