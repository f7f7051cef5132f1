//! Trainable deep-kernel model: network weights plus kernel and noise
//! hyperparameters, with the training objective and its gradient.
//!
//! Flat parameter layout: network (see [`SirenParams::write_flat`]) followed
//! by `log ℓ`, `log σ_κ`, `log σ`, `log σ_z`.

use nalgebra::DVector;

use crate::autodiff::{gradient, Jet2, Scalar};
use crate::error::{Error, Result};
use crate::featurenet::{jets_generic, SirenParams};
use crate::gp::{
    nll_joint_from_blocks_with_adjoint, CollocationSet, CovarianceModel, Dataset, JointCovarianceModel,
};
use crate::kernels::{
    se_feature_derivs, wave_cross_reference, wave_double_reference, GramBlocks, JointGram, KernelHyper,
    WaveOperator,
};
use crate::linalg::DenseMatrix;
use crate::SpacetimePoint;

/// Number of scalar hyperparameters appended after the network weights.
pub const NUM_HYPER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub net: SirenParams,
    pub hyper: KernelHyper,
    pub log_sigma: f64,
    pub log_sigma_z: f64,
    pub op: WaveOperator,
}

/// Loss value and gradient in flat layout.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl ModelParams {
    pub fn new(net: SirenParams, hyper: KernelHyper, sigma: f64, sigma_z: f64, op: WaveOperator) -> Result<Self> {
        if !(sigma > 0.0 && sigma_z > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise levels must be positive (sigma = {sigma}, sigma_z = {sigma_z})"
            )));
        }
        Ok(ModelParams { net, hyper, log_sigma: sigma.ln(), log_sigma_z: sigma_z.ln(), op })
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn sigma_z(&self) -> f64 {
        self.log_sigma_z.exp()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + NUM_HYPER
    }

    /// Index of the first hyperparameter in the flat vector.
    pub fn hyper_offset(&self) -> usize {
        self.net.num_params()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.net.write_flat(&mut out);
        out.extend([self.hyper.log_ell, self.hyper.log_sigma_kappa, self.log_sigma, self.log_sigma_z]);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: flat.len() });
        }
        let k = self.net.read_flat(flat)?;
        self.hyper.log_ell = flat[k];
        self.hyper.log_sigma_kappa = flat[k + 1];
        self.log_sigma = flat[k + 2];
        self.log_sigma_z = flat[k + 3];
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_flat(flat)?;
        Ok(m)
    }

    /// Objective: plain NLL when `colloc` is empty, otherwise the joint
    /// block objective with zero collocation targets.
    pub fn loss(&self, data: &Dataset, colloc: &CollocationSet) -> Result<f64> {
        let batch = self.net.forward_batch(&data.x, &colloc.xz);
        let blocks = GramBlocks::assemble(&batch, &self.hyper, &self.op);
        let g = JointGram::from_blocks(blocks, self.sigma(), self.sigma_z());
        crate::gp::nll_joint_from_blocks(&g, &data.y_vector())
    }

    /// Objective and its exact gradient. Kernel blocks are differentiated
    /// through their closed-form invariants, the network by a batched
    /// reverse pass over all points and jet channels.
    pub fn loss_and_grad(&self, data: &Dataset, colloc: &CollocationSet) -> Result<LossGrad> {
        let batch = self.net.forward_batch(&data.x, &colloc.xz);
        let blocks = GramBlocks::assemble(&batch, &self.hyper, &self.op);
        let g = JointGram::from_blocks(blocks.clone(), self.sigma(), self.sigma_z());
        let (loss, adj) = nll_joint_from_blocks_with_adjoint(&g, &data.y_vector())?;
        let (fadj, hgrad) = blocks.backprop(&batch, &self.hyper, &self.op, &adj);
        let mut grad = self.net.backward_batch(&batch, &fadj);
        let s2 = self.sigma() * self.sigma();
        let sz2 = self.sigma_z() * self.sigma_z();
        grad.extend([
            hgrad.log_ell,
            hgrad.log_sigma_kappa,
            2.0 * s2 * adj.uu.trace(),
            2.0 * sz2 * adj.zz.trace(),
        ]);
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        Ok(LossGrad { loss, grad })
    }

    /// Same objective evaluated entirely with scalar generic code: jets per
    /// point, explicit derivative tensors, the stacked joint matrix and a
    /// scalar Cholesky. Slow; meant for small networks.
    pub fn loss_reference<T: Scalar>(&self, flat: &[T], data: &Dataset, colloc: &CollocationSet) -> Result<T> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: flat.len() });
        }
        let k0 = self.hyper_offset();
        let layers = self.net.generic_layers(&flat[..k0]);
        let log_ell = flat[k0];
        let log_sk = flat[k0 + 1];
        let lambda = (log_ell * -2.0).exp();
        let variance = (log_sk * 2.0).exp();
        let s2 = (flat[k0 + 2] * 2.0).exp();
        let sz2 = (flat[k0 + 3] * 2.0).exp();

        let cfg = &self.net.config;
        let jets_u: Vec<[Vec<Jet2<T>>; 4]> = data.x.iter().map(|x| jets_generic(cfg, &layers, x)).collect();
        let jets_z: Vec<[Vec<Jet2<T>>; 4]> = colloc.xz.iter().map(|x| jets_generic(cfg, &layers, x)).collect();
        let feat = |j: &[Vec<Jet2<T>>; 4]| j[0].iter().map(|q| q.v).collect::<Vec<T>>();
        let fu: Vec<Vec<T>> = jets_u.iter().map(feat).collect();

        let n = data.len();
        let m = colloc.len();
        let dim = n + m;
        let mut k = vec![T::zero(); dim * dim];
        for i in 0..n {
            for j in 0..=i {
                let v = if i == j {
                    variance + s2
                } else {
                    se_feature_derivs(&fu[i], &fu[j], variance, lambda, 0).value
                };
                k[i * dim + j] = v;
                k[j * dim + i] = v;
            }
        }
        for (q, jz) in jets_z.iter().enumerate() {
            for i in 0..n {
                let v = wave_cross_reference(&fu[i], jz, variance, lambda, &self.op);
                k[i * dim + n + q] = v;
                k[(n + q) * dim + i] = v;
            }
            for p in 0..=q {
                let mut v = wave_double_reference(&jets_z[p], jz, variance, lambda, &self.op);
                if p == q {
                    v = v + sz2;
                }
                k[(n + p) * dim + n + q] = v;
                k[(n + q) * dim + n + p] = v;
            }
        }
        let mut y = data.y.clone();
        y.resize(dim, 0.0);
        nll_dense_generic(&k, dim, &y)
    }

    /// Gradient of [`loss_reference`](Self::loss_reference) by the reverse-mode tape.
    pub fn loss_and_grad_reference(&self, data: &Dataset, colloc: &CollocationSet) -> Result<LossGrad> {
        let (loss, grad) = gradient(&self.to_flat(), |_, p| self.loss_reference(p, data, colloc))?;
        Ok(LossGrad { loss, grad })
    }
}

/// `yᵀK⁻¹y + log|K|` for a dense row-major `K` over any scalar type.
pub fn nll_dense_generic<T: Scalar>(k: &[T], n: usize, y: &[f64]) -> Result<T> {
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut diag = k[j * n + j];
        for p in 0..j {
            diag = diag - l[j * n + p] * l[j * n + p];
        }
        if !(diag.value() > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag.value() });
        }
        let d = diag.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = k[i * n + j];
            for p in 0..j {
                s = s - l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / d;
        }
    }
    let mut z: Vec<T> = Vec::with_capacity(n);
    let mut quad = T::zero();
    let mut logdet = T::zero();
    for i in 0..n {
        let mut s = T::cst(y[i]);
        for (p, zp) in z.iter().enumerate() {
            s = s - l[i * n + p] * *zp;
        }
        let zi = s / l[i * n + i];
        quad = quad + zi * zi;
        logdet = logdet + l[i * n + i].ln() * 2.0;
        z.push(zi);
    }
    Ok(quad + logdet)
}

impl CovarianceModel for ModelParams {
    fn cross(&self, a: &[SpacetimePoint], b: &[SpacetimePoint]) -> DenseMatrix {
        let mut pts = Vec::with_capacity(a.len() + b.len());
        pts.extend_from_slice(a);
        pts.extend_from_slice(b);
        let batch = self.net.forward_batch(&pts, &[]);
        let h = batch.out_dim();
        let vals = batch.values.as_slice();
        let col = |c: usize| &vals[c * h..(c + 1) * h];
        let var = self.hyper.variance();
        let lambda = self.hyper.lambda();
        DenseMatrix::from_fn(a.len(), b.len(), |i, j| {
            let r2: f64 = col(i).iter().zip(col(a.len() + j)).map(|(u, v)| (u - v) * (u - v)).sum();
            var * (-0.5 * lambda * r2).exp()
        })
    }

    fn noise_variance(&self) -> f64 {
        self.sigma() * self.sigma()
    }

    fn gram(&self, x: &[SpacetimePoint]) -> DenseMatrix {
        GramBlocks::assemble(&self.net.forward_batch(x, &[]), &self.hyper, &self.op).kuu
    }
}

impl JointCovarianceModel for ModelParams {
    fn joint_gram(&self, x: &[SpacetimePoint], xz: &[SpacetimePoint]) -> Result<JointGram> {
        let batch = self.net.forward_batch(x, xz);
        let blocks = GramBlocks::assemble(&batch, &self.hyper, &self.op);
        Ok(JointGram::from_blocks(blocks, self.sigma(), self.sigma_z()))
    }
}

/// Prediction-only model using the diffuse-field kernel.
#[derive(Clone, Debug)]
pub struct DiffuseModel {
    pub kernel: crate::kernels::DiffuseKernel,
    pub sigma: f64,
}

impl CovarianceModel for DiffuseModel {
    fn cross(&self, a: &[SpacetimePoint], b: &[SpacetimePoint]) -> DenseMatrix {
        self.kernel.cross(a, b)
    }

    fn noise_variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    fn gram(&self, x: &[SpacetimePoint]) -> DenseMatrix {
        self.kernel.gram(x)
    }
}

/// Small helper for tests and tools: `y` as a vector.
pub fn as_vector(y: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_differences, grad_check};
    use crate::featurenet::{InputNormalization, SirenConfig};
    use crate::gp::{nll_joint_schur, nll_joint_stacked, nll_simple, sample_collocation, CollocationRegion};
    use crate::linalg::cholesky_auto;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CENTER: [f64; 3] = [4.0, 3.0, 1.5];
    const T_SPAN: f64 = 32.0 / 3000.0;

    fn tiny_model(seed: u64, ell: f64) -> ModelParams {
        let config = SirenConfig {
            depth: 2,
            hidden: 8,
            out_dim: 8,
            normalization: InputNormalization::for_region(CENTER, 0.25, T_SPAN),
            ..SirenConfig::default()
        };
        let net = SirenParams::init(config, seed).unwrap();
        ModelParams::new(net, KernelHyper::new(1.0, ell).unwrap(), 0.1, 0.5, WaveOperator::default()).unwrap()
    }

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<_> = (0..n)
            .map(|_| {
                SpacetimePoint::new(
                    CENTER.map(|c| c + rng.random_range(-0.25..0.25)),
                    rng.random_range(0.0..T_SPAN),
                )
            })
            .collect();
        let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Dataset::new(x, y).unwrap()
    }

    fn region() -> CollocationRegion {
        CollocationRegion::cube(CENTER, 0.5, 0.0, T_SPAN)
    }

    #[test]
    fn flat_roundtrip() {
        let m = tiny_model(1, 3.0);
        let flat = m.to_flat();
        assert_eq!(flat.len(), m.num_params());
        let back = m.with_flat(&flat).unwrap();
        assert_eq!(back, m);
        assert!(m.with_flat(&flat[1..]).is_err());
    }

    #[test]
    fn loss_matches_gp_functions() {
        let m = tiny_model(2, 3.0);
        let d = tiny_data(10, 3);
        let c = sample_collocation(&region(), 4, 5, 0);
        let l0 = m.loss(&d, &CollocationSet::default()).unwrap();
        assert_eq!(l0, nll_simple(&m, &d).unwrap());
        let l = m.loss(&d, &c).unwrap();
        assert_eq!(l, nll_joint_schur(&m, &d, &c).unwrap());
        let naive = nll_joint_stacked(&m, &d, &c).unwrap();
        assert!((l - naive).abs() < 1e-8 * naive.abs());
        assert_eq!(l, m.loss_and_grad(&d, &c).unwrap().loss);
    }

    #[test]
    fn reference_value_matches_fast() {
        let m = tiny_model(3, 4.0);
        let d = tiny_data(10, 4);
        let c = sample_collocation(&region(), 4, 6, 1);
        let flat = m.to_flat();
        for colloc in [CollocationSet::default(), c] {
            let fast = m.loss(&d, &colloc).unwrap();
            let slow = m.loss_reference(&flat, &d, &colloc).unwrap();
            assert!((fast - slow).abs() < 1e-8 * fast.abs().max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn gradient_matches_tape_and_fd() {
        let m = tiny_model(4, 4.0);
        let d = tiny_data(10, 5);
        let c = sample_collocation(&region(), 4, 7, 2);
        for colloc in [CollocationSet::default(), c] {
            let fast = m.loss_and_grad(&d, &colloc).unwrap();
            let tape = m.loss_and_grad_reference(&d, &colloc).unwrap();
            let scale = fast.grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            for (a, b) in fast.grad.iter().zip(&tape.grad) {
                assert!((a - b).abs() <= 1e-7 * scale, "{a} vs {b}");
            }
            let f = |p: &[f64]| m.with_flat(p).unwrap().loss(&d, &colloc).unwrap();
            let report = grad_check(f, &m.to_flat(), &fast.grad, 1e-6);
            assert!(report.max_rel_err < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn hyper_gradients_by_fd() {
        let m = tiny_model(5, 2.0);
        let d = tiny_data(8, 6);
        let c = sample_collocation(&region(), 3, 8, 3);
        let fast = m.loss_and_grad(&d, &c).unwrap();
        let k0 = m.hyper_offset();
        let fd = central_differences(|p| m.with_flat(p).unwrap().loss(&d, &c).unwrap(), &m.to_flat(), 1e-6);
        for i in k0..k0 + NUM_HYPER {
            assert!((fd[i] - fast.grad[i]).abs() < 1e-6 * fd[i].abs().max(1.0), "{i}: {} vs {}", fd[i], fast.grad[i]);
        }
    }

    #[test]
    fn collocation_shrinks_wave_variance() {
        let m = tiny_model(6, 3.0);
        let d = tiny_data(12, 9);
        let c = sample_collocation(&region(), 5, 9, 0);
        let g = m.joint_gram(&d.x, &c.xz).unwrap();
        let nz = c.len();
        let mut kzz = g.kzz.clone();
        for i in 0..nz {
            kzz[(i, i)] -= m.sigma_z() * m.sigma_z();
        }
        let fu = cholesky_auto(&g.kuu).unwrap();
        let v = fu.solve_lower(&g.kuz).unwrap();
        let without = &kzz - v.tr_mul(&v);
        let fj = cholesky_auto(&g.full()).unwrap();
        let mut kc = DenseMatrix::zeros(d.len() + nz, nz);
        kc.view_mut((0, 0), (d.len(), nz)).copy_from(&g.kuz);
        kc.view_mut((d.len(), 0), (nz, nz)).copy_from(&kzz);
        let w = fj.solve_lower(&kc).unwrap();
        let with = &kzz - w.tr_mul(&w);
        for i in 0..nz {
            assert!(with[(i, i)] <= without[(i, i)] + 1e-10 * without[(i, i)].abs().max(1.0));
        }
    }

    #[test]
    fn unused_parameter_gradient_is_zero() {
        // Constant kernel: zero weights in the last layer make all features
        // equal, so only σ_κ and σ matter.
        let mut m = tiny_model(7, 1.0);
        let last = m.net.layers.len() - 1;
        m.net.layers[last].weight.fill(0.0);
        let d = tiny_data(6, 10);
        let g = m.loss_and_grad(&d, &CollocationSet::default()).unwrap();
        let k0 = m.hyper_offset();
        let first_len = m.net.layers[0].weight.len() + m.net.layers[0].bias.len();
        assert!(g.grad[..first_len].iter().all(|v| *v == 0.0));
        assert_eq!(g.grad[k0], 0.0); // ℓ
        assert_eq!(g.grad[k0 + 3], 0.0); // σ_z without collocation
    }
}
