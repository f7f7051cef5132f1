//! Adam training loop.
//!
//! One gradient step per iteration: pick a batch, draw fresh collocation
//! points when `n_colloc > 0`, evaluate the objective and its gradient at the
//! current parameters, update.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheck};
use crate::error::{Error, Result};
use crate::gp::{sample_collocation, CollocationRegion, CollocationSet, Dataset};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchStrategy {
    /// Always the first batch.
    SingleBatch,
    /// Batch `step mod B`.
    CycleBatches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of gradient steps.
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Collocation points per step; 0 trains on the plain likelihood.
    pub n_colloc: usize,
    pub batch_strategy: BatchStrategy,
    pub seed: u64,
    /// Also update `log σ` and `log σ_z`.
    pub train_noise: bool,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20000,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            n_colloc: 0,
            batch_strategy: BatchStrategy::CycleBatches,
            seed: 0,
            train_noise: false,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be > 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("clip_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied so far.
    pub t: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Applies one bias-corrected Adam update to `params` in place.
pub fn adam_step(params: &mut [f64], state: &mut AdamState, grad: &[f64], cfg: &TrainConfig) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: grad.len() });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: usize,
    /// Loss at the pre-step parameters, one entry per step.
    pub losses: Vec<f64>,
    /// Wall-clock seconds since the start of training at the end of each
    /// step (not persisted in checkpoints).
    pub wall_seconds: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let n = params.num_params();
        TrainState { params, adam: AdamState::new(n), step: 0, losses: Vec::new(), wall_seconds: Vec::new() }
    }

    /// Writes `step,loss,wall_seconds` rows.
    pub fn write_loss_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,loss,wall_seconds")?;
        for (i, l) in self.losses.iter().enumerate() {
            let w = self.wall_seconds.get(i).copied().unwrap_or(0.0);
            writeln!(out, "{i},{l:e},{w:.6}")?;
        }
        Ok(())
    }
}

/// Where collocation points are drawn and which batch each step uses.
#[derive(Clone, Debug)]
pub struct TrainProblem<'a> {
    pub batches: &'a [Dataset],
    pub region: CollocationRegion,
}

impl<'a> TrainProblem<'a> {
    pub fn batch_for(&self, step: usize, strategy: BatchStrategy) -> &'a Dataset {
        match strategy {
            BatchStrategy::SingleBatch => &self.batches[0],
            BatchStrategy::CycleBatches => &self.batches[step % self.batches.len()],
        }
    }

    pub fn colloc_for(&self, step: usize, cfg: &TrainConfig) -> CollocationSet {
        if cfg.n_colloc == 0 {
            CollocationSet::default()
        } else {
            sample_collocation(&self.region, cfg.n_colloc, cfg.seed, step as u64)
        }
    }
}

/// Runs one step; returns the pre-step loss.
pub fn train_step(state: &mut TrainState, problem: &TrainProblem<'_>, cfg: &TrainConfig) -> Result<f64> {
    let step = state.step;
    let data = problem.batch_for(step, cfg.batch_strategy);
    let colloc = problem.colloc_for(step, cfg);
    let at = |e: Error| Error::AtStep { step, source: Box::new(e) };
    let lg = state.params.loss_and_grad(data, &colloc).map_err(at)?;
    let mut grad = lg.grad;
    if !cfg.train_noise {
        let k = state.params.hyper_offset();
        grad[k + 2] = 0.0;
        grad[k + 3] = 0.0;
    }
    if let Some(max) = cfg.clip_norm {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            grad.iter_mut().for_each(|g| *g *= max / norm);
        }
    }
    let mut flat = state.params.to_flat();
    adam_step(&mut flat, &mut state.adam, &grad, cfg).map_err(at)?;
    state.params.set_flat(&flat)?;
    state.step += 1;
    state.losses.push(lg.loss);
    Ok(lg.loss)
}

/// Trains for `cfg.epochs` steps. `on_step` sees the state after every
/// step (checkpointing, logging) and may abort by returning an error.
pub fn train_with<F>(
    params: ModelParams,
    problem: &TrainProblem<'_>,
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    if problem.batches.is_empty() || problem.batches.iter().any(Dataset::is_empty) {
        return Err(Error::InvalidConfig("training needs at least one nonempty batch".into()));
    }
    let mut state = TrainState::new(params);
    let start = Instant::now();
    for _ in 0..cfg.epochs {
        train_step(&mut state, problem, cfg)?;
        state.wall_seconds.push(start.elapsed().as_secs_f64());
        on_step(&state)?;
    }
    Ok(state)
}

pub fn train(params: ModelParams, problem: &TrainProblem<'_>, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(params, problem, cfg, |_| Ok(()))
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub simple: GradCheck,
    pub joint: GradCheck,
}

impl GradientReport {
    pub fn max_rel_err(&self) -> f64 {
        self.simple.max_rel_err.max(self.joint.max_rel_err)
    }
}

/// Finite-difference check of both objectives. Intended for networks with at
/// most a few hundred parameters.
pub fn validate_gradients(
    params: &ModelParams,
    data: &Dataset,
    colloc: &CollocationSet,
    step: f64,
) -> Result<GradientReport> {
    let flat = params.to_flat();
    let check = |c: &CollocationSet| -> Result<GradCheck> {
        let analytic = params.loss_and_grad(data, c)?.grad;
        // evaluate once up front so factorization errors surface as errors
        params.loss(data, c)?;
        let f = |p: &[f64]| params.with_flat(p).and_then(|m| m.loss(data, c)).unwrap_or(f64::NAN);
        Ok(grad_check(f, &flat, &analytic, step))
    };
    Ok(GradientReport { simple: check(&CollocationSet::default())?, joint: check(colloc)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurenet::{InputNormalization, SirenConfig, SirenParams};
    use crate::kernels::{KernelHyper, WaveOperator};
    use crate::SpacetimePoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CENTER: [f64; 3] = [0.0, 0.0, 0.0];
    const T_SPAN: f64 = 0.01;

    fn model(seed: u64) -> ModelParams {
        let config = SirenConfig {
            depth: 2,
            hidden: 8,
            out_dim: 8,
            normalization: InputNormalization::for_region(CENTER, 0.25, T_SPAN),
            ..SirenConfig::default()
        };
        let net = SirenParams::init(config, seed).unwrap();
        ModelParams::new(net, KernelHyper::new(1.0, 3.0).unwrap(), 0.1, 1.0, WaveOperator::default()).unwrap()
    }

    // Plane wave sampled at random points: smooth, wave-consistent data.
    fn batches(n_batches: usize, n: usize, seed: u64) -> Vec<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-0.25..0.25))).collect();
        (0..n_batches)
            .map(|b| {
                let x: Vec<_> = pos
                    .iter()
                    .enumerate()
                    .map(|(i, r)| SpacetimePoint::new(*r, (i % 4) as f64 * T_SPAN / 4.0))
                    .collect();
                let y = x
                    .iter()
                    .map(|p| (2.0 * std::f64::consts::PI * 200.0 * (p.t - p.r[0] / 343.0) + b as f64).sin())
                    .collect();
                Dataset::new(x, y).unwrap()
            })
            .collect()
    }

    fn region() -> CollocationRegion {
        CollocationRegion::cube(CENTER, 0.5, 0.0, T_SPAN)
    }

    fn cfg(steps: usize, n_colloc: usize) -> TrainConfig {
        TrainConfig { epochs: steps, learning_rate: 1e-2, n_colloc, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &mut s, &[0.0, 0.0], &TrainConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let c = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &mut s, &[3.0, -0.5], &c).unwrap();
        // m̂ = g, v̂ = g², Δ = −lr·g/(|g| + ε)
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        let r = adam_step(&mut p, &mut s, &[0.0, f64::NAN, 1.0], &TrainConfig::default());
        assert!(matches!(r, Err(Error::NonFiniteGradient { index: 1 })));
        assert_eq!(p, vec![0.0; 3]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn deterministic_and_consistent_losses() {
        let b = batches(3, 10, 1);
        let problem = TrainProblem { batches: &b, region: region() };
        let c = cfg(6, 3);
        let s1 = train(model(1), &problem, &c).unwrap();
        let s2 = train(model(1), &problem, &c).unwrap();
        assert_eq!(s1.params, s2.params);
        assert_eq!(s1.losses, s2.losses);
        assert_eq!(s1.losses.len(), 6);
        // recorded loss equals a fresh evaluation at the pre-step parameters
        let mut state = TrainState::new(model(1));
        for k in 0..6 {
            let fresh = state.params.loss(problem.batch_for(k, c.batch_strategy), &problem.colloc_for(k, &c)).unwrap();
            train_step(&mut state, &problem, &c).unwrap();
            assert!((fresh - s1.losses[k]).abs() <= 1e-12 * fresh.abs().max(1.0));
        }
    }

    #[test]
    fn zero_colloc_equals_plain_likelihood() {
        let b = batches(2, 8, 2);
        let problem = TrainProblem { batches: &b, region: region() };
        let s = train(model(2), &problem, &cfg(4, 0)).unwrap();
        let mut m = model(2);
        let mut st = AdamState::new(m.num_params());
        for k in 0..4 {
            let lg = m.loss_and_grad(&b[k % 2], &CollocationSet::default()).unwrap();
            assert_eq!(lg.loss, crate::gp::nll_simple(&m, &b[k % 2]).unwrap());
            assert_eq!(lg.loss, s.losses[k]);
            let mut g = lg.grad;
            let o = m.hyper_offset();
            g[o + 2] = 0.0;
            g[o + 3] = 0.0;
            let mut flat = m.to_flat();
            adam_step(&mut flat, &mut st, &g, &cfg(4, 0)).unwrap();
            m.set_flat(&flat).unwrap();
        }
        assert_eq!(m, s.params);
    }

    #[test]
    fn fixed_noise_stays_fixed() {
        let b = batches(1, 8, 3);
        let problem = TrainProblem { batches: &b, region: region() };
        let m0 = model(3);
        let s = train(m0.clone(), &problem, &cfg(3, 2)).unwrap();
        assert_eq!(s.params.log_sigma, m0.log_sigma);
        assert_eq!(s.params.log_sigma_z, m0.log_sigma_z);
        let c = TrainConfig { train_noise: true, ..cfg(3, 2) };
        let s = train(m0.clone(), &problem, &c).unwrap();
        assert_ne!(s.params.log_sigma, m0.log_sigma);
    }

    #[test]
    fn loss_trend_decreases() {
        let mut ratios = Vec::new();
        for seed in 0..5 {
            let b = batches(1, 16, 10 + seed);
            let problem = TrainProblem { batches: &b, region: region() };
            let s = train(model(seed), &problem, &cfg(50, 0)).unwrap();
            let head: f64 = s.losses[..5].iter().sum();
            let tail: f64 = s.losses[45..].iter().sum();
            ratios.push(tail - head);
        }
        ratios.sort_by(f64::total_cmp);
        assert!(ratios[2] < 0.0, "{ratios:?}");
    }

    #[test]
    fn gradient_validation_small_net() {
        let b = batches(1, 10, 4);
        let colloc = sample_collocation(&region(), 4, 1, 0);
        let r = validate_gradients(&model(4), &b[0], &colloc, 1e-6).unwrap();
        assert!(r.max_rel_err() < 1e-5, "{} {}", r.simple.max_rel_err, r.joint.max_rel_err);
    }

    #[test]
    fn step_errors_carry_index() {
        let b = batches(1, 4, 5);
        let problem = TrainProblem { batches: &b, region: region() };
        let mut m = model(5);
        m.hyper.log_sigma_kappa = f64::NAN;
        let e = train(m, &problem, &cfg(2, 0)).unwrap_err();
        assert!(matches!(e, Error::AtStep { step: 0, .. }), "{e:?}");
    }

    #[test]
    fn loss_csv_has_one_row_per_step() {
        let b = batches(1, 6, 6);
        let problem = TrainProblem { batches: &b, region: region() };
        let s = train(model(6), &problem, &cfg(3, 0)).unwrap();
        let mut out = Vec::new();
        s.write_loss_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,loss,wall_seconds\n0,"));
    }
}
