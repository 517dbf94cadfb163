//! Piecewise-linear stochastic puck dynamics identified from simulator data.
//!
//! Each mode maps `(puck, mallet)` at step `k` to a Gaussian over the puck at
//! `k + 1`: mean `A s_p + B s_m`, covariance `Sigma`. Wall and mallet modes
//! are expressed in a canonical contact frame so that a single linear map
//! covers every wall and every contact direction:
//!
//! * wall frame: tangential coordinate and signed distance from the line the
//!   puck center touches, positive inside the table;
//! * mallet frame: rotation taking the contact normal to `+x`.

use nalgebra::{Matrix2, Matrix4, SMatrix, SVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{row_major, Versioned, DYNAMICS_VERSION, TRANSITIONS_VERSION};
use crate::error::{Error, Result};
use crate::sim::{MalletCommand, MalletState, PuckState, SimConfig, TableGeometry, Vec2, Vec4, WorldState};

/// Condition number of the column-scaled normal matrix above which a fit is refused.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeId {
    Free,
    Wall,
    Mallet,
}

impl ModeId {
    pub const ALL: [ModeId; 3] = [ModeId::Free, ModeId::Wall, ModeId::Mallet];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub s_p: [f64; 4],
    pub s_m: [f64; 4],
    pub s_p_next: [f64; 4],
    pub mode: ModeId,
}

impl TransitionSample {
    pub fn new(s_p: Vec4, s_m: Vec4, s_p_next: Vec4, mode: ModeId) -> Self {
        Self {
            s_p: s_p.into(),
            s_m: s_m.into(),
            s_p_next: s_p_next.into(),
            mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMode {
    #[serde(rename = "A", with = "row_major")]
    pub a: Matrix4<f64>,
    #[serde(rename = "B", with = "row_major")]
    pub b: Matrix4<f64>,
    #[serde(rename = "Sigma", with = "row_major")]
    pub sigma: Matrix4<f64>,
}

impl LinearMode {
    pub fn identity() -> Self {
        Self {
            a: Matrix4::identity(),
            b: Matrix4::zeros(),
            sigma: Matrix4::zeros(),
        }
    }

    pub fn predict(&self, s_p: &Vec4, s_m: Option<&Vec4>) -> Vec4 {
        match s_m {
            Some(m) => self.a * s_p + self.b * m,
            None => self.a * s_p,
        }
    }

    /// Projects onto the maps that commute with the diagonal sign flip `flip`.
    fn symmetrize(&mut self, flip: &Vec4) {
        let m = Matrix4::from_diagonal(flip);
        self.a = (self.a + m * self.a * m) * 0.5;
        self.b = (self.b + m * self.b * m) * 0.5;
        self.sigma = (self.sigma + m * self.sigma * m) * 0.5;
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).chain(self.sigma.iter()).all(|v| v.is_finite())
    }
}

/// Least-squares fit of `s_p_next ≈ A s_p + B s_m` with an unbiased residual
/// covariance. Samples are used as given; no frame change is applied.
pub fn fit_mode(samples: &[TransitionSample]) -> Result<LinearMode> {
    let mut gram = SMatrix::<f64, 8, 8>::zeros();
    let mut cross = SMatrix::<f64, 8, 4>::zeros();
    for s in samples {
        let x = regressor(s);
        let y = Vec4::from(s.s_p_next);
        gram += x * x.transpose();
        cross += x * y.transpose();
    }

    let diag: SVector<f64, 8> = gram.diagonal();
    let zero_cols: Vec<usize> = (0..8).filter(|&i| !(diag[i] > 0.0)).collect();
    if !zero_cols.is_empty() {
        return Err(Error::RankDeficient {
            columns: zero_cols,
            condition: f64::INFINITY,
        });
    }
    let scale = diag.map(|d| 1.0 / d.sqrt());
    let scaled = SMatrix::<f64, 8, 8>::from_fn(|i, j| gram[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled);
    let (mut imin, mut imax) = (0, 0);
    for i in 0..8 {
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[imax] {
            imax = i;
        }
    }
    let condition = if eig.eigenvalues[imin] > 0.0 {
        eig.eigenvalues[imax] / eig.eigenvalues[imin]
    } else {
        f64::INFINITY
    };
    if !(condition <= MAX_CONDITION) {
        let v = eig.eigenvectors.column(imin);
        let columns = (0..8).filter(|&i| v[i].abs() > 0.25).collect();
        return Err(Error::RankDeficient { columns, condition });
    }

    let chol = gram.cholesky().ok_or(Error::RankDeficient {
        columns: Vec::new(),
        condition,
    })?;
    // rows 0..4 hold A^T, rows 4..8 hold B^T
    let w = chol.solve(&cross);
    let a = w.fixed_view::<4, 4>(0, 0).transpose();
    let b = w.fixed_view::<4, 4>(4, 0).transpose();

    let mut sigma = Matrix4::zeros();
    for s in samples {
        let r = Vec4::from(s.s_p_next) - a * Vec4::from(s.s_p) - b * Vec4::from(s.s_m);
        sigma += r * r.transpose();
    }
    let dof = samples.len().saturating_sub(8).max(1) as f64;
    sigma /= dof;
    sigma = (sigma + sigma.transpose()) * 0.5;

    let mode = LinearMode { a, b, sigma };
    if !mode.is_finite() {
        return Err(Error::NonFinite("fitted mode"));
    }
    Ok(mode)
}

fn regressor(s: &TransitionSample) -> SVector<f64, 8> {
    let mut x = SVector::<f64, 8>::zeros();
    x.fixed_rows_mut::<4>(0).copy_from(&Vec4::from(s.s_p));
    x.fixed_rows_mut::<4>(4).copy_from(&Vec4::from(s.s_m));
    x
}

/// Residuals beyond this multiple of the median residual norm are refitted without.
pub const OUTLIER_FACTOR: f64 = 20.0;

/// Least-squares fit followed by one refit without gross outliers, such as
/// the rare transition where a contact slipped past the mode labelling.
pub fn trimmed_fit(samples: &[TransitionSample]) -> Result<LinearMode> {
    let first = fit_mode(samples)?;
    let residual = |s: &TransitionSample| {
        (first.predict(&Vec4::from(s.s_p), Some(&Vec4::from(s.s_m))) - Vec4::from(s.s_p_next)).norm()
    };
    let mut norms: Vec<f64> = samples.iter().map(residual).collect();
    norms.sort_by(|a, b| a.total_cmp(b));
    let limit = OUTLIER_FACTOR * norms[norms.len() / 2];
    let kept: Vec<TransitionSample> = samples.iter().filter(|s| residual(s) <= limit).cloned().collect();
    if kept.len() == samples.len() || kept.len() < 8 {
        return Ok(first);
    }
    fit_mode(&kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wall {
    Top,
    Bottom,
    Right,
    Left,
}

/// Affine frame change `pos -> Q pos + c`, `vel -> Q vel`, with `Q` orthogonal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    q: Matrix2<f64>,
    offset: Vec2,
}

impl Frame {
    pub fn identity() -> Self {
        Self {
            q: Matrix2::identity(),
            offset: Vec2::zeros(),
        }
    }

    pub fn wall(wall: Wall, geom: &TableGeometry) -> Self {
        let (q, lim) = match wall {
            Wall::Top => (Matrix2::new(1.0, 0.0, 0.0, -1.0), geom.puck_y_limit()),
            Wall::Bottom => (Matrix2::identity(), geom.puck_y_limit()),
            Wall::Right => (Matrix2::new(0.0, 1.0, -1.0, 0.0), geom.puck_x_limit()),
            Wall::Left => (Matrix2::new(0.0, 1.0, 1.0, 0.0), geom.puck_x_limit()),
        };
        Self {
            q,
            offset: Vec2::new(0.0, lim),
        }
    }

    /// Rotation taking the unit contact normal to `+x`.
    pub fn contact(normal: Vec2) -> Self {
        Self {
            q: Matrix2::new(normal.x, normal.y, -normal.y, normal.x),
            offset: Vec2::zeros(),
        }
    }

    pub fn forward(&self, s: &Vec4) -> Vec4 {
        let p = self.q * Vec2::new(s[0], s[1]) + self.offset;
        let v = self.q * Vec2::new(s[2], s[3]);
        Vec4::new(p.x, p.y, v.x, v.y)
    }

    pub fn inverse(&self, s: &Vec4) -> Vec4 {
        let qt = self.q.transpose();
        let p = qt * (Vec2::new(s[0], s[1]) - self.offset);
        let v = qt * Vec2::new(s[2], s[3]);
        Vec4::new(p.x, p.y, v.x, v.y)
    }

    /// Block-diagonal linear part acting on a 4-vector.
    pub fn linear(&self) -> Matrix4<f64> {
        let mut l = Matrix4::zeros();
        l.fixed_view_mut::<2, 2>(0, 0).copy_from(&self.q);
        l.fixed_view_mut::<2, 2>(2, 2).copy_from(&self.q);
        l
    }
}

/// Mode and frame governing the transition over the next `dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeFrame {
    pub mode: ModeId,
    pub frame: Frame,
}

/// Distance covered over `dt` by a puck of unit speed under exponential damping.
pub fn damped_travel(dt: f64, damping: f64) -> f64 {
    if damping > 0.0 {
        (1.0 - (-damping * dt).exp()) / damping
    } else {
        dt
    }
}

/// Contact normal of a mallet sweep: the direction from mallet to puck at
/// first touch over `[0, dt]`, or at closest approach if they never touch.
pub fn sweep_normal(s_p: &Vec4, s_m: &Vec4, geom: &TableGeometry, dt: f64) -> (Vec2, bool) {
    let reach = geom.contact_distance();
    let travel = damped_travel(dt, geom.damping_coeff) / dt;
    let d0 = Vec2::new(s_p[0] - s_m[0], s_p[1] - s_m[1]);
    let w = Vec2::new(s_p[2], s_p[3]) * travel - Vec2::new(s_m[2], s_m[3]);
    let c = d0.dot(&d0) - reach * reach;
    let dir = |d: Vec2| {
        let n = d.norm();
        if n > 0.0 {
            d / n
        } else {
            Vec2::new(1.0, 0.0)
        }
    };
    if c <= 0.0 {
        // already touching: a contact only if the discs are closing
        return (dir(d0), d0.dot(&w) < 0.0);
    }
    let a = w.dot(&w);
    let b = 2.0 * d0.dot(&w);
    if a > 0.0 && b < 0.0 {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let tau = (-b - disc.sqrt()) / (2.0 * a);
            if tau <= dt {
                return (dir(d0 + w * tau), true);
            }
        }
    }
    let tau = if a > 0.0 { (-d0.dot(&w) / a).clamp(0.0, dt) } else { 0.0 };
    (dir(d0 + w * tau), false)
}

/// Earliest wall the puck reaches within `dt`, if any.
pub fn sweep_wall(s_p: &Vec4, geom: &TableGeometry, dt: f64) -> Option<Wall> {
    let travel = damped_travel(dt, geom.damping_coeff);
    let (x, y, vx, vy) = (s_p[0], s_p[1], s_p[2], s_p[3]);
    let ylim = geom.puck_y_limit();
    let xlim = geom.puck_x_limit();
    let mut best: Option<(f64, Wall)> = None;
    let mut consider = |gap: f64, speed: f64, wall: Wall| {
        // gap: distance to the contact line (negative when penetrating)
        if speed <= 0.0 {
            return;
        }
        if gap <= speed * travel {
            let t = (gap / speed).max(0.0);
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, wall));
            }
        }
    };
    consider(ylim - y, vy, Wall::Top);
    consider(y + ylim, -vy, Wall::Bottom);
    for (gap, speed, wall) in [(xlim - x, vx, Wall::Right), (x + xlim, -vx, Wall::Left)] {
        if speed > 0.0 && gap <= speed * travel {
            let t = (gap / speed).max(0.0);
            // inside the mouth band the puck can still drift onto the post
            // before its center reaches the goal line
            let t_line = ((geom.length / 2.0 - x.abs()) / speed).clamp(t, travel.max(t));
            let y_hit = y + vy * t;
            let y_line = y + vy * t_line;
            let blocked = !geom.in_goal_mouth(y_hit) || !geom.in_goal_mouth(y_line);
            if blocked && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, wall));
            }
        }
    }
    best.map(|(_, w)| w)
}

/// Swept mode classification of a transition. Mallet contact has priority;
/// `s_m = None` means no mallet on the table.
pub fn transition_mode(s_p: &Vec4, s_m: Option<&Vec4>, geom: &TableGeometry, dt: f64) -> ModeFrame {
    if let Some(m) = s_m {
        let (normal, touching) = sweep_normal(s_p, m, geom, dt);
        if touching {
            return ModeFrame {
                mode: ModeId::Mallet,
                frame: Frame::contact(normal),
            };
        }
    }
    match sweep_wall(s_p, geom, dt) {
        Some(wall) => ModeFrame {
            mode: ModeId::Wall,
            frame: Frame::wall(wall, geom),
        },
        None => ModeFrame {
            mode: ModeId::Free,
            frame: Frame::identity(),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub free: LinearMode,
    pub wall: LinearMode,
    pub mallet: LinearMode,
}

impl ModeSet {
    pub fn get(&self, id: ModeId) -> &LinearMode {
        match id {
            ModeId::Free => &self.free,
            ModeId::Wall => &self.wall,
            ModeId::Mallet => &self.mallet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseModel {
    pub version: u32,
    pub dt: f64,
    pub geometry: TableGeometry,
    pub modes: ModeSet,
}

impl Versioned for PiecewiseModel {
    const VERSION: u32 = DYNAMICS_VERSION;
    const COMMAND: &'static str = "airhockey gen-data && airhockey fit-dynamics";
    fn version(&self) -> u32 {
        self.version
    }
}

/// Diagonal sign flips under which each canonical mode is symmetric.
fn mode_flip(id: ModeId) -> Vec4 {
    match id {
        // mirror about the table centerline
        ModeId::Free => Vec4::new(1.0, -1.0, 1.0, -1.0),
        // reversal of the tangential axis
        ModeId::Wall => Vec4::new(-1.0, 1.0, -1.0, 1.0),
        // mirror about the contact normal
        ModeId::Mallet => Vec4::new(1.0, -1.0, 1.0, -1.0),
    }
}

/// Linearized transition: mean, Jacobian w.r.t. the puck state, and process covariance.
#[derive(Clone, Copy, Debug)]
pub struct Linearization {
    pub mode: ModeId,
    pub mean: Vec4,
    pub jacobian: Matrix4<f64>,
    pub process_cov: Matrix4<f64>,
}

impl PiecewiseModel {
    pub fn from_modes(modes: ModeSet, dt: f64, geometry: TableGeometry) -> Self {
        Self {
            version: DYNAMICS_VERSION,
            dt,
            geometry,
            modes,
        }
    }

    /// A model with identity dynamics in every mode; useful for tests.
    pub fn identity(dt: f64, geometry: TableGeometry) -> Self {
        let modes = ModeSet {
            free: LinearMode::identity(),
            wall: LinearMode::identity(),
            mallet: LinearMode::identity(),
        };
        Self::from_modes(modes, dt, geometry)
    }

    /// Fits all three modes from labelled samples. Samples are mapped into
    /// their canonical frames, fitted, and each mode is projected onto its
    /// mirror-symmetric part.
    pub fn fit(samples: &[TransitionSample], dt: f64, geometry: &TableGeometry) -> Result<Self> {
        let mut buckets: [Vec<TransitionSample>; 3] = Default::default();
        for s in samples {
            let s_p = Vec4::from(s.s_p);
            let s_m = Vec4::from(s.s_m);
            let mf = transition_mode(&s_p, Some(&s_m), geometry, dt);
            let f = &mf.frame;
            let canon = TransitionSample::new(
                f.forward(&s_p),
                f.forward(&s_m),
                f.forward(&Vec4::from(s.s_p_next)),
                mf.mode,
            );
            let slot = match mf.mode {
                ModeId::Free => 0,
                ModeId::Wall => 1,
                ModeId::Mallet => 2,
            };
            buckets[slot].push(canon);
        }
        let mut fitted = Vec::with_capacity(3);
        for (id, bucket) in ModeId::ALL.iter().zip(buckets.iter()) {
            if bucket.len() < 8 {
                return Err(Error::NotEnoughSamples {
                    needed: 8,
                    got: bucket.len(),
                });
            }
            let mut m = trimmed_fit(bucket)?;
            m.symmetrize(&mode_flip(*id));
            fitted.push(m);
        }
        let mallet = fitted.pop().unwrap();
        let wall = fitted.pop().unwrap();
        let free = fitted.pop().unwrap();
        Ok(Self::from_modes(ModeSet { free, wall, mallet }, dt, geometry.clone()))
    }

    pub fn mode_frame(&self, s_p: &Vec4, s_m: Option<&Vec4>) -> ModeFrame {
        transition_mode(s_p, s_m, &self.geometry, self.dt)
    }

    /// Mean of the next puck state under a given mode and frame.
    pub fn apply(&self, mf: &ModeFrame, s_p: &Vec4, s_m: Option<&Vec4>) -> Vec4 {
        let f = &mf.frame;
        let m_c = s_m.map(|m| f.forward(m));
        let out = self.modes.get(mf.mode).predict(&f.forward(s_p), m_c.as_ref());
        f.inverse(&out)
    }

    pub fn predict_mean(&self, s_p: &Vec4, s_m: Option<&Vec4>) -> Vec4 {
        let mf = self.mode_frame(s_p, s_m);
        self.apply(&mf, s_p, s_m)
    }

    /// Mallet-mode prediction with the contact frame recomputed from the states.
    pub fn apply_mallet(&self, s_p: &Vec4, s_m: &Vec4) -> Vec4 {
        let (normal, _) = sweep_normal(s_p, s_m, &self.geometry, self.dt);
        let mf = ModeFrame {
            mode: ModeId::Mallet,
            frame: Frame::contact(normal),
        };
        self.apply(&mf, s_p, Some(s_m))
    }

    /// Linearizes the transition around `s_p`. In mallet mode the contact
    /// normal depends on the puck state, so the Jacobian is taken by central
    /// differences through the frame change.
    pub fn linearize(&self, mf: &ModeFrame, s_p: &Vec4, s_m: Option<&Vec4>) -> Linearization {
        let mode = self.modes.get(mf.mode);
        let l = mf.frame.linear();
        let process_cov = l.transpose() * mode.sigma * l;
        let mean = self.apply(mf, s_p, s_m);
        let jacobian = match (mf.mode, s_m) {
            (ModeId::Mallet, Some(m)) => {
                let h = 1e-6;
                let mut jac = Matrix4::zeros();
                for j in 0..4 {
                    let mut plus = *s_p;
                    let mut minus = *s_p;
                    plus[j] += h;
                    minus[j] -= h;
                    let col = (self.apply_mallet(&plus, m) - self.apply_mallet(&minus, m)) / (2.0 * h);
                    jac.set_column(j, &col);
                }
                jac
            }
            _ => l.transpose() * mode.a * l,
        };
        Linearization {
            mode: mf.mode,
            mean,
            jacobian,
            process_cov,
        }
    }
}

/// How the mallet moves while exploration data is collected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationPolicy {
    pub steps_per_episode: usize,
    /// Largest launch speed of a respawned puck, m/s.
    pub max_launch_speed: f64,
    /// Probability that a respawned puck starts nearly at rest.
    pub rest_fraction: f64,
    /// Probability that the puck respawns in the agent half.
    pub agent_half_fraction: f64,
    /// Probability that a mallet segment charges the puck rather than sweeping.
    pub strike_fraction: f64,
    /// Duration of one mallet behavior segment, seconds.
    pub segment: f64,
}

impl Default for ExplorationPolicy {
    fn default() -> Self {
        Self {
            steps_per_episode: 150,
            max_launch_speed: 3.0,
            rest_fraction: 0.4,
            agent_half_fraction: 0.7,
            strike_fraction: 0.6,
            segment: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSet {
    pub version: u32,
    pub dt: f64,
    pub geometry: TableGeometry,
    pub samples: Vec<TransitionSample>,
}

impl Versioned for TransitionSet {
    const VERSION: u32 = TRANSITIONS_VERSION;
    const COMMAND: &'static str = "airhockey gen-data";
    fn version(&self) -> u32 {
        self.version
    }
}

fn spawn_puck(rng: &mut ChaCha8Rng, sim: &SimConfig, policy: &ExplorationPolicy) -> PuckState {
    let g = &sim.geometry;
    let xlim = g.puck_x_limit();
    let ylim = g.puck_y_limit();
    let x = if rng.gen_bool(policy.agent_half_fraction) {
        rng.gen_range(-xlim..-g.puck_radius)
    } else {
        rng.gen_range(g.puck_radius..xlim)
    };
    let y = rng.gen_range(-ylim..ylim);
    let speed = if rng.gen_bool(policy.rest_fraction) {
        rng.gen_range(0.0..0.3)
    } else {
        rng.gen_range(0.0..policy.max_launch_speed)
    };
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    PuckState::new(x, y, speed * heading.cos(), speed * heading.sin())
}

enum Segment {
    Strike { speed: f64, aim_offset: Vec2 },
    Sweep { amp: Vec2, omega: f64, phase: f64 },
}

fn draw_segment(rng: &mut ChaCha8Rng, policy: &ExplorationPolicy, cap: f64) -> Segment {
    if rng.gen_bool(policy.strike_fraction) {
        Segment::Strike {
            speed: rng.gen_range(0.2..cap),
            aim_offset: Vec2::new(rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06)),
        }
    } else {
        Segment::Sweep {
            amp: Vec2::new(rng.gen_range(0.0..cap), rng.gen_range(0.0..cap)) * 0.7,
            omega: rng.gen_range(1.0..8.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }
}

/// Runs randomized episodes and labels every transition with its swept mode.
/// Transitions in which a goal is scored are discarded and the puck is
/// respawned; transitions with more than one contact are skipped. Each
/// episode yields exactly `steps_per_episode` samples.
pub fn collect_transitions(
    n_episodes: usize,
    policy: &ExplorationPolicy,
    sim: &SimConfig,
    dt: f64,
    seed: u64,
) -> Result<Vec<TransitionSample>> {
    if n_episodes == 0 {
        return Err(Error::Validation("n_episodes must be positive".into()));
    }
    sim.validate()?;
    let g = &sim.geometry;
    let bounds = sim.agent_bounds();
    let seg_steps = ((policy.segment / dt).round() as usize).max(1);
    let mut out = Vec::with_capacity(n_episodes * policy.steps_per_episode);

    for episode in 0..n_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(episode as u64 + 1);
        let mallet = MalletState::at_rest(
            rng.gen_range(bounds.x_min..bounds.x_max),
            rng.gen_range(-bounds.y_max..bounds.y_max),
        );
        let mut world = WorldState::new(spawn_puck(&mut rng, sim, policy), mallet);
        let mut segment = draw_segment(&mut rng, policy, sim.mallet_speed_cap);
        let mut k = 0usize;
        let mut attempts = 0usize;
        let mut stalled = 0usize;
        while k < policy.steps_per_episode {
            attempts += 1;
            if attempts % seg_steps == 0 {
                segment = draw_segment(&mut rng, policy, sim.mallet_speed_cap);
            }
            let v = match &segment {
                Segment::Strike { speed, aim_offset } => {
                    let to = world.puck.pos() + aim_offset - world.mallet.pos();
                    let n = to.norm();
                    if n > 1e-9 {
                        to * (speed / n)
                    } else {
                        Vec2::zeros()
                    }
                }
                Segment::Sweep { amp, omega, phase } => {
                    let t = world.sim_time;
                    Vec2::new(amp.x * (omega * t + phase).sin(), amp.y * (omega * t + phase).cos())
                }
            };
            let cmd = MalletCommand::new(v);
            let next = sim.step(&world, &cmd, dt, &mut rng)?;
            if next.goal.is_some() {
                world.puck = spawn_puck(&mut rng, sim, policy);
                world.goal = None;
                continue;
            }
            if next.contacts > 1 {
                // chained contacts within one step are outside every mode
                world = next;
                stalled += 1;
                if stalled > 50 {
                    world.puck = spawn_puck(&mut rng, sim, policy);
                    stalled = 0;
                }
                continue;
            }
            stalled = 0;
            // the mallet velocity in effect during the step
            let s_m = MalletState::from_parts(world.mallet.pos(), next.mallet.vel()).to_vec();
            let s_p = world.puck.to_vec();
            let mode = transition_mode(&s_p, Some(&s_m), g, dt).mode;
            out.push(TransitionSample::new(s_p, s_m, next.puck.to_vec(), mode));
            world = next;
            k += 1;
        }
    }
    Ok(out)
}
