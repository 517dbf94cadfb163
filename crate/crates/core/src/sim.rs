//! Planar air-hockey world: ground-truth puck physics, contacts, goals and
//! noisy position observations.
//!
//! Frame: origin at the table center, `+x` toward the opponent goal. The
//! agent defends the goal at `x = -length/2`.

use nalgebra::{Vector2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec4 = Vector4<f64>;

/// Contact tolerance used by [`classify_mode`].
pub const CONTACT_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableGeometry {
    pub length: f64,
    pub width: f64,
    pub goal_width: f64,
    pub puck_radius: f64,
    pub mallet_radius: f64,
    pub wall_restitution: f64,
    pub wall_tangential_retention: f64,
    pub mallet_restitution: f64,
    pub damping_coeff: f64,
}

impl Default for TableGeometry {
    fn default() -> Self {
        Self {
            length: 1.948,
            width: 1.038,
            goal_width: 0.25,
            puck_radius: 0.03165,
            mallet_radius: 0.04815,
            wall_restitution: 0.9,
            wall_tangential_retention: 0.95,
            mallet_restitution: 0.9,
            damping_coeff: 0.1,
        }
    }
}

impl TableGeometry {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.length,
            self.width,
            self.goal_width,
            self.puck_radius,
            self.mallet_radius,
            self.wall_restitution,
            self.wall_tangential_retention,
            self.mallet_restitution,
            self.damping_coeff,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("table geometry"));
        }
        if self.length <= 0.0 || self.width <= 0.0 || self.goal_width <= 0.0 {
            return Err(Error::Validation("table extents must be positive".into()));
        }
        if self.goal_width >= self.width {
            return Err(Error::Validation("goal_width must be smaller than width".into()));
        }
        if self.puck_radius <= 0.0 || self.mallet_radius <= 0.0 {
            return Err(Error::Validation("radii must be positive".into()));
        }
        if self.puck_radius + self.mallet_radius >= self.width / 2.0 {
            return Err(Error::Validation("puck and mallet do not fit across the table".into()));
        }
        for (name, e) in [
            ("wall_restitution", self.wall_restitution),
            ("wall_tangential_retention", self.wall_tangential_retention),
            ("mallet_restitution", self.mallet_restitution),
        ] {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Validation(format!("{name} must lie in (0, 1]")));
            }
        }
        if self.damping_coeff < 0.0 {
            return Err(Error::Validation("damping_coeff must be non-negative".into()));
        }
        Ok(())
    }

    /// Center distance at which puck and mallet touch.
    pub fn contact_distance(&self) -> f64 {
        self.puck_radius + self.mallet_radius
    }

    /// Largest |y| of the puck center.
    pub fn puck_y_limit(&self) -> f64 {
        self.width / 2.0 - self.puck_radius
    }

    /// Largest |x| of the puck center away from the goal mouths.
    pub fn puck_x_limit(&self) -> f64 {
        self.length / 2.0 - self.puck_radius
    }

    pub fn in_goal_mouth(&self, y: f64) -> bool {
        y.abs() < self.goal_width / 2.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PuckState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MalletState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

macro_rules! planar_state {
    ($t:ty) => {
        impl $t {
            pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
                Self { x, y, vx, vy }
            }

            pub fn at_rest(x: f64, y: f64) -> Self {
                Self::new(x, y, 0.0, 0.0)
            }

            pub fn from_parts(pos: Vec2, vel: Vec2) -> Self {
                Self::new(pos.x, pos.y, vel.x, vel.y)
            }

            pub fn from_vec(s: &Vec4) -> Self {
                Self::new(s[0], s[1], s[2], s[3])
            }

            pub fn pos(&self) -> Vec2 {
                Vec2::new(self.x, self.y)
            }

            pub fn vel(&self) -> Vec2 {
                Vec2::new(self.vx, self.vy)
            }

            pub fn to_vec(&self) -> Vec4 {
                Vec4::new(self.x, self.y, self.vx, self.vy)
            }

            pub fn to_array(&self) -> [f64; 4] {
                [self.x, self.y, self.vx, self.vy]
            }

            pub fn is_finite(&self) -> bool {
                self.x.is_finite() && self.y.is_finite() && self.vx.is_finite() && self.vy.is_finite()
            }
        }
    };
}

planar_state!(PuckState);
planar_state!(MalletState);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactKind {
    Wall,
    Mallet,
    Opponent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub kind: ContactKind,
    pub time: f64,
    /// Unit normal pointing from the obstacle into the puck.
    pub contact_normal: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalSide {
    /// The puck entered the agent's goal.
    Ours,
    /// The puck entered the opponent's goal.
    Theirs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub puck: PuckState,
    pub mallet: MalletState,
    /// Opponent disc, when one is on the table.
    pub opponent: Option<MalletState>,
    pub sim_time: f64,
    pub last_contact: Option<ContactEvent>,
    /// Set once the puck center has crossed a goal line; the puck is then frozen.
    pub goal: Option<GoalSide>,
    /// Number of contacts resolved during the last step.
    #[serde(default)]
    pub contacts: u32,
}

impl WorldState {
    pub fn new(puck: PuckState, mallet: MalletState) -> Self {
        Self {
            puck,
            mallet,
            opponent: None,
            sim_time: 0.0,
            last_contact: None,
            goal: None,
            contacts: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MalletCommand {
    pub target_velocity: [f64; 2],
}

impl MalletCommand {
    pub fn new(v: Vec2) -> Self {
        Self {
            target_velocity: [v.x, v.y],
        }
    }

    pub fn stop() -> Self {
        Self::default()
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.target_velocity[0], self.target_velocity[1])
    }

    /// Scales the command down so that its norm does not exceed `cap`.
    pub fn clamped(&self, cap: f64) -> Self {
        Self::new(clamp_norm(self.velocity(), cap))
    }
}

pub fn clamp_norm(v: Vec2, cap: f64) -> Vec2 {
    let n = v.norm();
    if n > cap && n > 0.0 {
        v * (cap / n)
    } else {
        v
    }
}

/// Axis-aligned box for a mallet center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalletBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl MalletBounds {
    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y.abs() <= self.y_max
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(p.x.clamp(self.x_min, self.x_max), p.y.clamp(-self.y_max, self.y_max))
    }

    /// Sum of per-axis distances outside the box, zero inside.
    pub fn violation(&self, p: &Vec2) -> f64 {
        (self.x_min - p.x).max(0.0) + (p.x - self.x_max).max(0.0) + (p.y.abs() - self.y_max).max(0.0)
    }

    pub fn shrink(&self, margin: f64) -> Self {
        Self {
            x_min: self.x_min + margin,
            x_max: self.x_max - margin,
            y_max: self.y_max - margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub geometry: TableGeometry,
    /// Mallet speed cap, m/s.
    pub mallet_speed_cap: f64,
    /// Closest approach of the agent mallet center to the center line, meters.
    pub mallet_margin: f64,
    /// Puck velocity diffusion, m/s per sqrt(s). Zero gives a noiseless world.
    pub puck_velocity_noise: f64,
    /// Integration substep, seconds.
    pub substep: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            geometry: TableGeometry::default(),
            mallet_speed_cap: 2.0,
            mallet_margin: 0.02,
            puck_velocity_noise: 0.01,
            substep: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reflection {
    pub velocity: Vec2,
    /// True when the velocity was already separating and was left untouched.
    pub separating: bool,
}

/// Reflects `v` off a wall with inward unit `normal`, scaling the normal
/// component by `e_n` and the tangential one by `e_t`.
pub fn reflect_wall(v: Vec2, normal: Vec2, e_n: f64, e_t: f64) -> Reflection {
    let vn = v.dot(&normal);
    if vn >= 0.0 {
        return Reflection {
            velocity: v,
            separating: true,
        };
    }
    let normal_part = normal * vn;
    let tangential = v - normal_part;
    Reflection {
        velocity: tangential * e_t - normal_part * e_n,
        separating: false,
    }
}

/// Resolves a puck/mallet contact treating the mallet as infinitely massive.
pub fn resolve_mallet_contact(
    puck: &PuckState,
    mallet: &MalletState,
    geom: &TableGeometry,
    e_m: f64,
) -> Result<PuckState> {
    let d = puck.pos() - mallet.pos();
    let dist = d.norm();
    if dist < 1e-12 {
        return Err(Error::DegenerateContact);
    }
    let reach = geom.contact_distance();
    if dist > reach + CONTACT_EPS {
        return Err(Error::Validation(format!(
            "puck and mallet are {dist:.4} m apart, not in contact"
        )));
    }
    let n = d / dist;
    let mut v_rel = puck.vel() - mallet.vel();
    let vn = v_rel.dot(&n);
    if vn < 0.0 {
        v_rel -= n * ((1.0 + e_m) * vn);
    }
    let v = mallet.vel() + v_rel;
    let p = if dist < reach { mallet.pos() + n * reach } else { puck.pos() };
    Ok(PuckState::from_parts(p, v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContactMode {
    Free,
    WallContact,
    MalletContact,
}

/// Distance from the puck center to the nearest wall segment.
fn wall_clearance(puck: &PuckState, geom: &TableGeometry) -> f64 {
    let side = geom.width / 2.0 - puck.y.abs();
    if geom.in_goal_mouth(puck.y) {
        side
    } else {
        side.min(geom.length / 2.0 - puck.x.abs())
    }
}

pub fn classify_mode(puck: &PuckState, mallet: &MalletState, geom: &TableGeometry) -> ContactMode {
    let dist = (puck.pos() - mallet.pos()).norm();
    if dist <= geom.contact_distance() + CONTACT_EPS {
        ContactMode::MalletContact
    } else if wall_clearance(puck, geom) <= geom.puck_radius + CONTACT_EPS {
        ContactMode::WallContact
    } else {
        ContactMode::Free
    }
}

pub fn check_goal(puck: &PuckState, geom: &TableGeometry) -> Option<GoalSide> {
    if !geom.in_goal_mouth(puck.y) {
        return None;
    }
    if puck.x >= geom.length / 2.0 {
        Some(GoalSide::Theirs)
    } else if puck.x <= -geom.length / 2.0 {
        Some(GoalSide::Ours)
    } else {
        None
    }
}

/// Noisy puck position measurement.
pub fn observe<R: Rng + ?Sized>(world: &WorldState, rng: &mut R, sigma_obs: f64) -> Vec2 {
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    world.puck.pos() + Vec2::new(nx, ny) * sigma_obs
}

struct MovingDisc {
    pos: Vec2,
    vel: Vec2,
    bounds: MalletBounds,
}

impl MovingDisc {
    fn advance(&mut self, h: f64) {
        let next = self.pos + self.vel * h;
        let clamped = self.bounds.clamp(next);
        if clamped.x != next.x {
            self.vel.x = 0.0;
        }
        if clamped.y != next.y {
            self.vel.y = 0.0;
        }
        self.pos = clamped;
    }

    fn state(&self) -> MalletState {
        MalletState::from_parts(self.pos, self.vel)
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(self.mallet_speed_cap > 0.0) || !(self.substep > 0.0) || !(self.puck_velocity_noise >= 0.0) {
            return Err(Error::Validation(
                "speed cap and substep must be positive, noise non-negative".into(),
            ));
        }
        if !(self.mallet_margin >= 0.0) {
            return Err(Error::Validation("mallet_margin must be non-negative".into()));
        }
        Ok(())
    }

    pub fn agent_bounds(&self) -> MalletBounds {
        let g = &self.geometry;
        MalletBounds {
            x_min: -g.length / 2.0 + g.mallet_radius,
            x_max: -self.mallet_margin,
            y_max: g.width / 2.0 - g.mallet_radius,
        }
    }

    pub fn opponent_bounds(&self) -> MalletBounds {
        let g = &self.geometry;
        MalletBounds {
            x_min: self.mallet_margin,
            x_max: g.length / 2.0 - g.mallet_radius,
            y_max: g.width / 2.0 - g.mallet_radius,
        }
    }

    /// Advances the world by `dt` with the agent mallet commanded by `cmd`.
    /// An opponent disc, if present, keeps its current velocity.
    pub fn step<R: Rng + ?Sized>(
        &self,
        world: &WorldState,
        cmd: &MalletCommand,
        dt: f64,
        rng: &mut R,
    ) -> Result<WorldState> {
        self.step_with_opponent(world, cmd, None, dt, rng)
    }

    pub fn step_with_opponent<R: Rng + ?Sized>(
        &self,
        world: &WorldState,
        cmd: &MalletCommand,
        opponent_cmd: Option<&MalletCommand>,
        dt: f64,
        rng: &mut R,
    ) -> Result<WorldState> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Validation(format!("dt must be positive, got {dt}")));
        }
        let cmd_v = cmd.velocity();
        let opp_v = opponent_cmd.map(|c| c.velocity());
        if !world.puck.is_finite()
            || !world.mallet.is_finite()
            || !world.sim_time.is_finite()
            || !cmd_v.iter().all(|v| v.is_finite())
            || world.opponent.map_or(false, |o| !o.is_finite())
            || opp_v.map_or(false, |v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite("world state or command"));
        }

        let g = &self.geometry;
        let mut next = world.clone();
        next.sim_time = world.sim_time + dt;
        next.contacts = 0;

        let mut mallet = MovingDisc {
            pos: world.mallet.pos(),
            vel: clamp_norm(cmd_v, self.mallet_speed_cap),
            bounds: self.agent_bounds(),
        };
        let mut opponent = world.opponent.map(|o| MovingDisc {
            pos: o.pos(),
            vel: clamp_norm(opp_v.unwrap_or_else(|| o.vel()), self.mallet_speed_cap),
            bounds: self.opponent_bounds(),
        });

        let mut p = world.puck.pos();
        let mut v = world.puck.vel();
        let frozen = world.goal.is_some();
        if !frozen && self.puck_velocity_noise > 0.0 {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            v += Vec2::new(nx, ny) * (self.puck_velocity_noise * dt.sqrt());
        }

        let n_sub = (dt / self.substep).ceil().max(1.0) as usize;
        let h = dt / n_sub as f64;
        let damp = (-g.damping_coeff * h).exp();
        let reach = g.contact_distance();

        for i in 0..n_sub {
            let t = world.sim_time + h * (i + 1) as f64;
            mallet.advance(h);
            if let Some(o) = opponent.as_mut() {
                o.advance(h);
            }
            if frozen || next.goal.is_some() {
                continue;
            }

            v *= damp;
            p += v * h;

            let discs = std::iter::once((ContactKind::Mallet, &mallet)).chain(opponent.as_ref().map(|o| (ContactKind::Opponent, o)));
            for (kind, disc) in discs {
                if (p - disc.pos).norm() <= reach {
                    let resolved = resolve_mallet_contact(
                        &PuckState::from_parts(p, v),
                        &disc.state(),
                        g,
                        g.mallet_restitution,
                    )?;
                    let n = (resolved.pos() - disc.pos).normalize();
                    p = resolved.pos();
                    v = resolved.vel();
                    next.contacts += 1;
                    next.last_contact = Some(ContactEvent {
                        kind,
                        time: t,
                        contact_normal: [n.x, n.y],
                    });
                }
            }

            if let Some(normal) = self.resolve_walls(&mut p, &mut v) {
                next.contacts += 1;
                next.last_contact = Some(ContactEvent {
                    kind: ContactKind::Wall,
                    time: t,
                    contact_normal: [normal.x, normal.y],
                });
            }

            let puck = PuckState::from_parts(p, v);
            if let Some(side) = check_goal(&puck, g) {
                next.goal = Some(side);
                v = Vec2::zeros();
            }
        }

        next.puck = PuckState::from_parts(p, v);
        next.mallet = mallet.state();
        next.opponent = opponent.map(|o| o.state());
        Ok(next)
    }

    /// Reflects the puck off any wall it penetrates. Returns the inward
    /// normal of the last wall hit.
    fn resolve_walls(&self, p: &mut Vec2, v: &mut Vec2) -> Option<Vec2> {
        let g = &self.geometry;
        let (e_n, e_t) = (g.wall_restitution, g.wall_tangential_retention);
        let ylim = g.puck_y_limit();
        let xlim = g.puck_x_limit();
        let mut hit = None;

        if p.y.abs() > ylim {
            let s = p.y.signum();
            let normal = Vec2::new(0.0, -s);
            let r = reflect_wall(*v, normal, e_n, e_t);
            *v = r.velocity;
            p.y = s * (ylim - (p.y.abs() - ylim) * e_n);
            p.y = p.y.clamp(-ylim, ylim);
            hit = Some(normal);
        }
        if p.x.abs() > xlim && !g.in_goal_mouth(p.y) {
            let s = p.x.signum();
            let normal = Vec2::new(-s, 0.0);
            let r = reflect_wall(*v, normal, e_n, e_t);
            *v = r.velocity;
            p.x = s * (xlim - (p.x.abs() - xlim) * e_n);
            p.x = p.x.clamp(-xlim, xlim);
            hit = Some(normal);
        }
        hit
    }
}
