#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavekernel::featurenet::{InputNormalization, SirenConfig, SirenParams};
use wavekernel::gp::{CollocationSet, Dataset};
use wavekernel::kernels::{deep_kernel, wave_cross, wave_double, KernelHyper, WaveOperator};
use wavekernel::linalg::{min_eigenvalue, unit_diagonal};
use wavekernel::{DenseMatrix, ModelParams, SpacetimePoint};

pub const CENTER: [f64; 3] = [4.0, 3.0, 1.5];
pub const HALF: f64 = 0.25;
pub const SPAN: f64 = 31.0 / 3000.0;

pub fn net(depth: usize, hidden: usize, out: usize, seed: u64) -> SirenParams {
    let config = SirenConfig {
        depth,
        hidden,
        out_dim: out,
        normalization: InputNormalization::for_region(CENTER, HALF, SPAN),
        ..SirenConfig::default()
    };
    SirenParams::init(config, seed).unwrap()
}

pub fn random_point(rng: &mut ChaCha8Rng) -> SpacetimePoint {
    SpacetimePoint::new(CENTER.map(|c| c + rng.random_range(-HALF..HALF)), rng.random_range(0.0..SPAN))
}

pub fn random_net(rng: &mut ChaCha8Rng) -> SirenParams {
    let depth = [2, 3, 5][rng.random_range(0..3)];
    let hidden = [8, 32, 100][rng.random_range(0..3)];
    let out = [8, 32, 100][rng.random_range(0..3)];
    net(depth, hidden, out, rng.random())
}

pub fn random_hyper(rng: &mut ChaCha8Rng) -> KernelHyper {
    KernelHyper::new(rng.random_range(0.5..2.0), 10f64.powf(rng.random_range(0.0..1.5))).unwrap()
}

/// Central-difference wave operator in physical units.
pub fn fd_wave<F: Fn(&SpacetimePoint) -> f64>(f: F, x: &SpacetimePoint, c: f64, hs: f64, ht: f64) -> f64 {
    let f0 = f(x);
    let mut lap = 0.0;
    for i in 0..3 {
        let mut p = *x;
        let mut m = *x;
        p.r[i] += hs;
        m.r[i] -= hs;
        lap += (f(&p) - 2.0 * f0 + f(&m)) / (hs * hs);
    }
    let mut p = *x;
    let mut m = *x;
    p.t += ht;
    m.t -= ht;
    lap - (f(&p) - 2.0 * f0 + f(&m)) / (ht * ht) / (c * c)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// One random operator instance: network, hyperparameters and a nearby
/// point pair.
pub struct OperatorCase {
    pub net: SirenParams,
    pub hyper: KernelHyper,
    pub x: SpacetimePoint,
    pub xp: SpacetimePoint,
}

impl OperatorCase {
    pub fn draw(rng: &mut ChaCha8Rng, net: SirenParams) -> Self {
        let hyper = random_hyper(rng);
        let x = random_point(rng);
        let mut xp = x;
        for i in 0..3 {
            xp.r[i] += rng.random_range(-0.05..0.05);
        }
        xp.t += rng.random_range(-1e-3..1e-3);
        OperatorCase { net, hyper, x, xp }
    }

    /// Relative errors of `(wave_cross, wave_double)` against finite
    /// differences with steps `hs` (m) and `ht` (s).
    pub fn errors(&self, hs: f64, ht: f64) -> (f64, f64) {
        let op = WaveOperator::default();
        let (p, h, x, xp) = (&self.net, &self.hyper, &self.x, &self.xp);
        let cross = wave_cross(p, h, &op, x, xp);
        let cross_fd = fd_wave(|q| deep_kernel(p, h, x, q), xp, op.c, hs, ht);
        let double = wave_double(p, h, &op, x, xp);
        let double_fd = fd_wave(|q| wave_cross(p, h, &op, q, xp), x, op.c, hs, ht);
        (rel(cross, cross_fd), rel(double, double_fd))
    }
}

/// Worst relative errors of `(wave_cross, wave_double)` over `n` instances
/// of the default 5×100→100 network, steps 1e-4 m and 1e-7 s.
pub fn operator_errors(n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).fold((0.0f64, 0.0f64), |w, _| {
        let p = net(5, 100, 100, rng.random());
        let case = OperatorCase::draw(&mut rng, p);
        let e = case.errors(1e-4, 1e-7);
        (w.0.max(e.0), w.1.max(e.1))
    })
}

/// Random model, measurements and collocation points.
pub fn random_problem(rng: &mut ChaCha8Rng, nm: usize, nz: usize) -> (ModelParams, Dataset, CollocationSet) {
    let p = net(3, 32, 16, rng.random());
    let hyper = random_hyper(rng);
    let sigma = rng.random_range(0.05..0.5);
    let sigma_z = rng.random_range(1e-2..1.0) * hyper.sigma_kappa();
    let m = ModelParams::new(p, hyper, sigma, sigma_z, WaveOperator::default()).unwrap();
    let x: Vec<_> = (0..nm).map(|_| random_point(rng)).collect();
    let y = (0..nm).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xz = (0..nz).map(|_| random_point(rng)).collect();
    (m, Dataset::new(x, y).unwrap(), CollocationSet::new(xz))
}

/// `(raw, scale-free)` minimum eigenvalue; the second is computed on
/// `D^{-1/2} K D^{-1/2}`.
pub fn min_eigs(k: &DenseMatrix) -> (f64, f64) {
    (min_eigenvalue(k), min_eigenvalue(&unit_diagonal(k)))
}
