//! Implicit shot policy: an energy network over (puck state, angle) trained
//! contrastively on planner solutions, queried by derivative-free sampling.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::artifact::{Versioned, EBM_VERSION};
use crate::error::{Error, Result};
use crate::sim::{TableGeometry, Vec4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub activation: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input: 5,
            hidden: vec![64, 64],
            activation: "silu".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub pos_scale: [f64; 2],
    pub vel_scale: f64,
    pub angle_scale: f64,
}

impl Normalization {
    pub fn for_table(geom: &TableGeometry) -> Self {
        Self {
            pos_scale: [geom.length / 2.0, geom.width / 2.0],
            vel_scale: 5.0,
            angle_scale: PI,
        }
    }

    fn state(&self, s: &Vec4) -> [f64; 4] {
        [
            s[0] / self.pos_scale[0],
            s[1] / self.pos_scale[1],
            s[2] / self.vel_scale,
            s[3] / self.vel_scale,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(rename = "W", with = "rows")]
    pub w: DMatrix<f64>,
    #[serde(with = "column")]
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: DMatrix::zeros(out, inp),
            b: DVector::zeros(out),
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

mod rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().cloned().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Deserialize::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged weight matrix"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

mod column {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Deserialize::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub version: u32,
    pub arch: Architecture,
    pub normalization: Normalization,
    pub layers: Vec<Layer>,
}

impl Versioned for EnergyModel {
    const VERSION: u32 = EBM_VERSION;
    const COMMAND: &'static str = "airhockey plan-shots && airhockey train-ebm";
    fn version(&self) -> u32 {
        self.version
    }
}

/// Values kept from a forward pass for backpropagation.
struct Tape {
    inputs: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl EnergyModel {
    pub fn zeros(arch: Architecture, normalization: Normalization) -> Self {
        let mut dims = vec![arch.input];
        dims.extend(&arch.hidden);
        dims.push(1);
        let layers = dims.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect();
        Self {
            version: EBM_VERSION,
            arch,
            normalization,
            layers,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, normalization: Normalization, seed: u64) -> Self {
        let mut model = Self::zeros(arch, normalization);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in model.layers.iter_mut() {
            let (out, inp) = layer.w.shape();
            let limit = (6.0 / (out + inp) as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = rng.gen_range(-limit..limit);
            }
        }
        model
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.activation != "silu" {
            return Err(Error::Validation(format!("unsupported activation {}", self.arch.activation)));
        }
        let mut dims = vec![self.arch.input];
        dims.extend(&self.arch.hidden);
        dims.push(1);
        if self.arch.input != 5 || self.layers.len() != dims.len() - 1 {
            return Err(Error::Validation("layer count does not match the architecture".into()));
        }
        for (layer, w) in self.layers.iter().zip(dims.windows(2)) {
            if layer.w.shape() != (w[1], w[0]) || layer.b.len() != w[1] {
                return Err(Error::Validation("layer shape does not match the architecture".into()));
            }
        }
        if !self.layers.iter().flat_map(|l| l.params()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("energy model parameters"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Normalized input columns for one state paired with each action.
    fn inputs_for(&self, s: &Vec4, actions: &[f64], out: &mut DMatrix<f64>, offset: usize) {
        let st = self.normalization.state(s);
        for (j, a) in actions.iter().enumerate() {
            let mut col = out.column_mut(offset + j);
            col[0] = st[0];
            col[1] = st[1];
            col[2] = st[2];
            col[3] = st[3];
            col[4] = a / self.normalization.angle_scale;
        }
    }

    fn forward(&self, inputs: DMatrix<f64>) -> (DVector<f64>, Tape) {
        let n = inputs.ncols();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        let mut x = inputs.clone();
        let mut energies = DVector::zeros(n);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &x;
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            if i == last {
                energies = DVector::from_iterator(n, z.row(0).iter().cloned());
                pre.push(z);
            } else {
                let h = z.map(silu);
                pre.push(z);
                post.push(h.clone());
                x = h;
            }
        }
        (energies, Tape { inputs, pre, post })
    }

    fn backward(&self, tape: &Tape, d_energy: &DVector<f64>) -> Vec<Layer> {
        let mut grads: Vec<Layer> = self.layers.iter().map(|l| Layer::zeros(l.w.nrows(), l.w.ncols())).collect();
        let mut delta = DMatrix::from_row_slice(1, d_energy.len(), d_energy.as_slice());
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { &tape.inputs } else { &tape.post[i - 1] };
            grads[i].w = &delta * input.transpose();
            grads[i].b = delta.column_sum();
            if i > 0 {
                let mut back = self.layers[i].w.transpose() * &delta;
                back.zip_apply(&tape.pre[i - 1], |d, z| *d *= silu_grad(z));
                delta = back;
            }
        }
        grads
    }

    /// Energies of one state paired with each action.
    pub fn energies(&self, s: &Vec4, actions: &[f64]) -> Vec<f64> {
        let mut inputs = DMatrix::zeros(self.arch.input, actions.len());
        self.inputs_for(s, actions, &mut inputs, 0);
        let (e, _) = self.forward(inputs);
        e.as_slice().to_vec()
    }

    pub fn energy(&self, s: &Vec4, a: f64) -> f64 {
        self.energies(s, &[a])[0]
    }

    /// Lipschitz bound of the energy in the raw angle, from weight norms.
    pub fn angle_lipschitz(&self) -> f64 {
        // silu' is bounded by about 1.1
        let act = 1.1f64;
        let mut bound = self.layers[0].w.column(4).norm() / self.normalization.angle_scale;
        for layer in &self.layers[1..] {
            bound *= act * layer.w.norm();
        }
        bound
    }
}

/// One contrastive example: a state, its demonstrated action and negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveExample {
    pub state: Vec4,
    pub positive: f64,
    pub negatives: Vec<f64>,
}

/// Mean InfoNCE loss over a batch and its parameter gradient.
pub fn ebm_grad(model: &EnergyModel, batch: &[ContrastiveExample]) -> Result<(f64, Vec<Layer>)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if batch.iter().any(|ex| ex.negatives.is_empty()) {
        return Err(Error::Validation("every example needs at least one negative".into()));
    }
    let total: usize = batch.iter().map(|ex| ex.negatives.len() + 1).sum();
    let mut inputs = DMatrix::zeros(model.arch.input, total);
    let mut offset = 0;
    let mut actions = Vec::new();
    for ex in batch {
        actions.clear();
        actions.push(ex.positive);
        actions.extend(&ex.negatives);
        model.inputs_for(&ex.state, &actions, &mut inputs, offset);
        offset += actions.len();
    }
    let (energies, tape) = model.forward(inputs);

    let scale = 1.0 / batch.len() as f64;
    let mut d_energy = DVector::zeros(total);
    let mut loss = 0.0;
    let mut offset = 0;
    for ex in batch {
        let m = ex.negatives.len() + 1;
        let e = energies.rows(offset, m);
        let e_min = e.min();
        let z: f64 = e.iter().map(|v| (-(v - e_min)).exp()).sum();
        let log_z = z.ln() - e_min;
        loss += e[0] + log_z;
        for j in 0..m {
            let p = (-(e[j] + log_z)).exp();
            d_energy[offset + j] = -p * scale;
        }
        d_energy[offset] += scale;
        offset += m;
    }
    let grads = model.backward(&tape, &d_energy);
    Ok((loss * scale, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_negatives: usize,
    pub learning_rate: f64,
    /// Learning rate at the end of training, as a fraction of the initial one.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub action_bounds: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_negatives: 256,
            learning_rate: 2e-3,
            final_lr_fraction: 0.05,
            batch_size: 32,
            epochs: 8,
            seed: 0,
            action_bounds: (-FRAC_PI_2, FRAC_PI_2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of every epoch.
    pub losses: Vec<f64>,
    pub steps: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut EnergyModel, grads: &[Layer], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let params = model.layers.iter_mut().flat_map(|l| l.params_mut());
        let g = grads.iter().flat_map(|l| l.params());
        for (((p, g), m), v) in params.zip(g).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Trains an energy model on `(state, action)` demonstrations with InfoNCE
/// and uniformly drawn negatives.
pub fn ebm_train(
    data: &[(Vec4, f64)],
    normalization: Normalization,
    cfg: &TrainConfig,
) -> Result<(EnergyModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if cfg.n_negatives == 0 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Validation("n_negatives, batch_size and epochs must be positive".into()));
    }
    let (lo, hi) = cfg.action_bounds;
    if !(lo < hi) {
        return Err(Error::Validation("action bounds must be ordered".into()));
    }
    let mut model = EnergyModel::init(Architecture::default(), normalization, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(model.n_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            for &i in chunk {
                let (state, positive) = data[i];
                let negatives = (0..cfg.n_negatives).map(|_| rng.gen_range(lo..hi)).collect();
                batch.push(ContrastiveExample {
                    state,
                    positive,
                    negatives,
                });
            }
            let (loss, grads) = ebm_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss });
            }
            let progress = step as f64 / total_steps.max(1) as f64;
            let cosine = 0.5 * (1.0 + (PI * progress).cos());
            let lr = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
            adam.step(&mut model, &grads, lr);
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        losses.push(epoch_loss / data.len() as f64);
    }
    model.validate()?;
    Ok((model, TrainReport { losses, steps: step }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub n_iters: usize,
    pub shrink: f64,
    /// Spread of the first Gaussian resampling round, radians.
    pub init_sigma: f64,
    pub bounds: (f64, f64),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 512,
            n_iters: 3,
            shrink: 0.5,
            init_sigma: 0.2,
            bounds: (-FRAC_PI_2, FRAC_PI_2),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 || self.n_iters < 1 {
            return Err(Error::Validation("sampler needs n_samples >= 2 and n_iters >= 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) || !(self.init_sigma > 0.0) {
            return Err(Error::Validation("shrink must lie in (0, 1) and init_sigma be positive".into()));
        }
        if !(self.bounds.0 < self.bounds.1) {
            return Err(Error::Validation("sampler bounds must be ordered".into()));
        }
        Ok(())
    }
}

/// Anything that scores a batch of actions for a state.
pub trait Energy {
    fn energies(&self, s: &Vec4, actions: &[f64]) -> Vec<f64>;
}

impl Energy for EnergyModel {
    fn energies(&self, s: &Vec4, actions: &[f64]) -> Vec<f64> {
        EnergyModel::energies(self, s, actions)
    }
}

/// Energy given by a plain function of the action.
pub struct FnEnergy<F: Fn(f64) -> f64>(pub F);

impl<F: Fn(f64) -> f64> Energy for FnEnergy<F> {
    fn energies(&self, _s: &Vec4, actions: &[f64]) -> Vec<f64> {
        actions.iter().map(|&a| (self.0)(a)).collect()
    }
}

/// Derivative-free argmin: uniform draws, then softmax-weighted recentering
/// with a shrinking Gaussian. Returns the lowest-energy action seen.
pub fn ebm_infer<E: Energy + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    s: &Vec4,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<f64> {
    cfg.validate()?;
    let (lo, hi) = cfg.bounds;
    let mut actions: Vec<f64> = (0..cfg.n_samples).map(|_| rng.gen_range(lo..hi)).collect();
    let mut best = (f64::INFINITY, actions[0]);
    let mut sigma = cfg.init_sigma;
    for iter in 0..cfg.n_iters {
        let e = energy.energies(s, &actions);
        for (&a, &v) in actions.iter().zip(&e) {
            if v < best.0 {
                best = (v, a);
            }
        }
        if iter + 1 == cfg.n_iters {
            break;
        }
        let e_min = e.iter().cloned().fold(f64::INFINITY, f64::min);
        if !e_min.is_finite() {
            return Err(Error::NonFinite("energy"));
        }
        let weights: Vec<f64> = e.iter().map(|v| (-(v - e_min)).exp()).collect();
        let pick = WeightedIndex::new(&weights).map_err(|_| Error::NonFinite("sampling weights"))?;
        let noise = Normal::new(0.0, sigma).map_err(|_| Error::Validation("bad sampler sigma".into()))?;
        actions = (0..cfg.n_samples)
            .map(|_| (actions[pick.sample(rng)] + noise.sample(rng)).clamp(lo, hi))
            .collect();
        sigma *= cfg.shrink;
    }
    if !best.0.is_finite() {
        return Err(Error::NonFinite("energy"));
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub median_error: f64,
    pub p95_error: f64,
    pub mean_error: f64,
}

/// Absolute angle errors of the policy against reference actions.
pub fn ebm_errors(model: &EnergyModel, data: &[(Vec4, f64)], cfg: &SamplerConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .map(|(s, a)| ebm_infer(model, s, cfg, &mut rng).map(|ah| (ah - a).abs()))
        .collect()
}

pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

pub fn ebm_evaluate(model: &EnergyModel, data: &[(Vec4, f64)], cfg: &SamplerConfig, seed: u64) -> Result<EvalReport> {
    let mut errors = ebm_errors(model, data, cfg, seed)?;
    errors.sort_by(|a, b| a.total_cmp(b));
    let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    Ok(EvalReport {
        n: errors.len(),
        median_error: percentile(&errors, 0.5),
        p95_error: percentile(&errors, 0.95),
        mean_error: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm() -> Normalization {
        Normalization::for_table(&TableGeometry::default())
    }

    #[test]
    fn zero_network_has_zero_energy() {
        let m = EnergyModel::zeros(Architecture::default(), norm());
        assert_eq!(m.energy(&Vec4::new(0.1, 0.2, 0.3, 0.4), 0.5), 0.0);
    }

    #[test]
    fn constant_energy_loss_is_log_count() {
        let m = EnergyModel::zeros(Architecture::default(), norm());
        let n = 256;
        let ex = ContrastiveExample {
            state: Vec4::new(-0.3, 0.1, 0.0, 0.0),
            positive: 0.2,
            negatives: vec![0.1; n],
        };
        let (loss, _) = ebm_grad(&m, &[ex.clone()]).unwrap();
        assert_eq!(loss, ((n + 1) as f64).ln());

        let doubled = ContrastiveExample {
            negatives: vec![0.1; 2 * n],
            ..ex
        };
        let (loss2, _) = ebm_grad(&m, &[doubled]).unwrap();
        let expected = ((2 * n + 1) as f64 / (n + 1) as f64).ln();
        assert!((loss2 - loss - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let m = EnergyModel::zeros(Architecture::default(), norm());
        let ex = ContrastiveExample {
            state: Vec4::zeros(),
            positive: 0.0,
            negatives: vec![],
        };
        assert!(ebm_grad(&m, &[ex]).is_err());
        assert!(ebm_train(&[], norm(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn quadratic_energy_minimum_is_found() {
        let e = FnEnergy(|a: f64| (a - 0.4) * (a - 0.4));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ebm_infer(&e, &Vec4::zeros(), &SamplerConfig::default(), &mut rng).unwrap();
        assert!((a - 0.4).abs() < 0.01, "{a}");
    }

    #[test]
    fn inference_is_seed_deterministic_and_bounded() {
        let e = FnEnergy(|_| 1.0);
        let cfg = SamplerConfig::default();
        let a = ebm_infer(&e, &Vec4::zeros(), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = ebm_infer(&e, &Vec4::zeros(), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a >= cfg.bounds.0 && a <= cfg.bounds.1);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = EnergyModel::init(Architecture::default(), norm(), 3);
        let text = serde_json::to_string(&m).unwrap();
        let back: EnergyModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let s = Vec4::new(-0.4, 0.2, 0.1, -0.1);
        assert_eq!(back.energy(&s, 0.3).to_bits(), m.energy(&s, 0.3).to_bits());
    }
}
