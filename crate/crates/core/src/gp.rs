//! GP inference and training objectives.
//!
//! Objectives drop the `N log 2π` constant and the factor `1/2`:
//! `nll = yᵀK̂⁻¹y + log|K̂|`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{GramAdjoint, JointGram};
use crate::linalg::{cholesky_auto, symmetrize, CholeskyFactor, DenseMatrix};
use crate::SpacetimePoint;

/// Measurements `Y` at spacetime points `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Vec<SpacetimePoint>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<SpacetimePoint>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        if !x.iter().all(SpacetimePoint::is_finite) || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("dataset contains non-finite values".into()));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }
}

/// Collocation points for pseudo-observations `Lu = 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollocationSet {
    pub xz: Vec<SpacetimePoint>,
}

impl CollocationSet {
    pub fn new(xz: Vec<SpacetimePoint>) -> Self {
        CollocationSet { xz }
    }

    pub fn len(&self) -> usize {
        self.xz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xz.is_empty()
    }

    /// Targets, identically zero.
    pub fn targets(&self) -> DVector<f64> {
        DVector::zeros(self.xz.len())
    }
}

/// Axis-aligned spatial box times a time interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollocationRegion {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub t0: f64,
    pub t1: f64,
}

impl CollocationRegion {
    pub fn cube(center: [f64; 3], side: f64, t0: f64, t1: f64) -> Self {
        let h = side / 2.0;
        CollocationRegion { lo: center.map(|c| c - h), hi: center.map(|c| c + h), t0, t1 }
    }

    pub fn contains(&self, p: &SpacetimePoint) -> bool {
        (0..3).all(|i| p.r[i] >= self.lo[i] && p.r[i] <= self.hi[i]) && p.t >= self.t0 && p.t <= self.t1
    }
}

/// `n` uniform points in `region`. The stream is selected by `counter`, so
/// `(seed, counter)` pins the draw.
pub fn sample_collocation(region: &CollocationRegion, n: usize, seed: u64, counter: u64) -> CollocationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let xz = (0..n)
        .map(|_| {
            let r = [
                draw(region.lo[0], region.hi[0]),
                draw(region.lo[1], region.hi[1]),
                draw(region.lo[2], region.hi[2]),
            ];
            SpacetimePoint::new(r, draw(region.t0, region.t1))
        })
        .collect();
    CollocationSet { xz }
}

/// Anything that can produce covariance matrices for GP regression.
pub trait CovarianceModel {
    /// Noise-free kernel matrix between two point sets.
    fn cross(&self, a: &[SpacetimePoint], b: &[SpacetimePoint]) -> DenseMatrix;

    /// Measurement noise variance `σ²`.
    fn noise_variance(&self) -> f64;

    /// Noise-free Gram over one set; must be exactly symmetric.
    fn gram(&self, x: &[SpacetimePoint]) -> DenseMatrix {
        let mut k = self.cross(x, x);
        symmetrize(&mut k);
        k
    }
}

/// A model that can also build the joint measurement/collocation covariance.
pub trait JointCovarianceModel: CovarianceModel {
    fn joint_gram(&self, x: &[SpacetimePoint], xz: &[SpacetimePoint]) -> Result<JointGram>;
}

fn noisy_gram<M: CovarianceModel + ?Sized>(model: &M, x: &[SpacetimePoint]) -> DenseMatrix {
    let mut k = model.gram(x);
    let s2 = model.noise_variance();
    for i in 0..k.nrows() {
        k[(i, i)] += s2;
    }
    k
}

/// Factorized training covariance, reusable across predictions.
#[derive(Clone, Debug)]
pub struct Posterior {
    x: Vec<SpacetimePoint>,
    factor: CholeskyFactor,
    alpha: DVector<f64>,
}

impl Posterior {
    pub fn fit<M: CovarianceModel + ?Sized>(model: &M, data: &Dataset) -> Result<Self> {
        let factor = cholesky_auto(&noisy_gram(model, &data.x))?;
        let alpha = factor.solve_vec(&data.y_vector())?;
        Ok(Posterior { x: data.x.clone(), factor, alpha })
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn mean<M: CovarianceModel + ?Sized>(&self, model: &M, xhat: &[SpacetimePoint]) -> DVector<f64> {
        model.cross(xhat, &self.x) * &self.alpha
    }

    pub fn cov<M: CovarianceModel + ?Sized>(&self, model: &M, xhat: &[SpacetimePoint]) -> Result<DenseMatrix> {
        let kxs = model.cross(&self.x, xhat);
        let v = self.factor.solve_lower(&kxs)?;
        let mut c = model.gram(xhat) - v.tr_mul(&v);
        symmetrize(&mut c);
        Ok(c)
    }
}

/// `K_{X̂X}(K + σ²I)⁻¹Y`
pub fn posterior_mean<M: CovarianceModel + ?Sized>(
    model: &M,
    data: &Dataset,
    xhat: &[SpacetimePoint],
) -> Result<DVector<f64>> {
    Ok(Posterior::fit(model, data)?.mean(model, xhat))
}

/// `K_{X̂X̂} − K_{X̂X}(K + σ²I)⁻¹K_{XX̂}`. `data.y` is never read.
pub fn posterior_cov<M: CovarianceModel + ?Sized>(
    model: &M,
    data: &Dataset,
    xhat: &[SpacetimePoint],
) -> Result<DenseMatrix> {
    let factor = cholesky_auto(&noisy_gram(model, &data.x))?;
    let v = factor.solve_lower(&model.cross(&data.x, xhat))?;
    let mut c = model.gram(xhat) - v.tr_mul(&v);
    symmetrize(&mut c);
    Ok(c)
}

pub fn nll_simple<M: CovarianceModel + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    nll_from_matrix(&noisy_gram(model, &data.x), &data.y_vector())
}

pub fn nll_joint_schur<M: JointCovarianceModel + ?Sized>(
    model: &M,
    data: &Dataset,
    colloc: &CollocationSet,
) -> Result<f64> {
    let g = model.joint_gram(&data.x, &colloc.xz)?;
    nll_joint_from_blocks(&g, &data.y_vector())
}

/// Naive joint NLL of the stacked system with targets `[Y; 0]`.
pub fn nll_joint_stacked<M: JointCovarianceModel + ?Sized>(
    model: &M,
    data: &Dataset,
    colloc: &CollocationSet,
) -> Result<f64> {
    let g = model.joint_gram(&data.x, &colloc.xz)?;
    nll_joint_stacked_from_blocks(&g, &data.y_vector())
}

/// `yᵀK⁻¹y + log|K|` for an already noisy `K`.
pub fn nll_from_matrix(k: &DenseMatrix, y: &DVector<f64>) -> Result<f64> {
    let f = cholesky_auto(k)?;
    let alpha = f.solve_vec(y)?;
    Ok(y.dot(&alpha) + f.logdet())
}

/// Value and `∂nll/∂K = K⁻¹ − ααᵀ` (full, symmetric).
pub fn nll_from_matrix_with_adjoint(k: &DenseMatrix, y: &DVector<f64>) -> Result<(f64, DenseMatrix)> {
    let f = cholesky_auto(k)?;
    let alpha = f.solve_vec(y)?;
    let value = y.dot(&alpha) + f.logdet();
    let mut w = f.inverse();
    w.ger(-1.0, &alpha, &alpha, 1.0);
    Ok((value, w))
}

fn factor_block(m: &DenseMatrix, block: &'static str) -> Result<CholeskyFactor> {
    cholesky_auto(m).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => Error::SchurNotPD { block },
        other => other,
    })
}

/// Pieces shared between the value and the adjoint of the joint objective.
struct SchurParts {
    fa: CholeskyFactor,
    fs: CholeskyFactor,
    /// `K̂uu⁻¹Kuz`
    g: DenseMatrix,
    /// `K̂uu⁻¹y`
    ay: DVector<f64>,
    /// `S⁻¹Gᵀy` with `S = K̂zz − Kzu K̂uu⁻¹ Kuz`
    sgy: DVector<f64>,
    value: f64,
}

fn schur_parts(g: &JointGram, y: &DVector<f64>) -> Result<SchurParts> {
    let fa = factor_block(&g.kuu, "uu")?;
    let gmat = fa.solve(&g.kuz)?;
    let mut s = &g.kzz - &g.kzu * &gmat;
    symmetrize(&mut s);
    let fs = factor_block(&s, "zz-schur")?;
    let ay = fa.solve_vec(y)?;
    let gy = gmat.tr_mul(y);
    let sgy = fs.solve_vec(&gy)?;
    // yᵀ(K̂uu − Kuz K̂zz⁻¹ Kzu)⁻¹y via Woodbury, then log|K̂uu| + log|S|.
    let value = y.dot(&ay) + gy.dot(&sgy) + fa.logdet() + fs.logdet();
    Ok(SchurParts { fa, fs, g: gmat, ay, sgy, value })
}

/// Block form of the joint objective with zero collocation targets.
pub fn nll_joint_from_blocks(g: &JointGram, y: &DVector<f64>) -> Result<f64> {
    check_joint(g, y)?;
    if g.kzz.nrows() == 0 {
        return nll_from_matrix(&g.kuu, y);
    }
    Ok(schur_parts(g, y)?.value)
}

/// Joint objective and block adjoints. `uz` in the result is the total
/// adjoint of `Kuz` including the mirrored `Kzu` block.
pub fn nll_joint_from_blocks_with_adjoint(g: &JointGram, y: &DVector<f64>) -> Result<(f64, GramAdjoint)> {
    check_joint(g, y)?;
    let n = g.kuu.nrows();
    let m = g.kzz.nrows();
    if m == 0 {
        let (v, w) = nll_from_matrix_with_adjoint(&g.kuu, y)?;
        return Ok((v, GramAdjoint { uu: w, uz: DMatrix::zeros(n, 0), zz: DMatrix::zeros(0, 0) }));
    }
    let p = schur_parts(g, y)?;
    let sinv = p.fs.inverse();
    let gs = &p.g * &sinv; // G S⁻¹
    // α = K̂⁻¹[y; 0]
    let alpha_u = &p.ay + &p.g * &p.sgy;
    let alpha_z = -&p.sgy;
    let mut uu = p.fa.inverse() + &gs * p.g.transpose();
    uu.ger(-1.0, &alpha_u, &alpha_u, 1.0);
    symmetrize(&mut uu);
    let mut uz = -gs;
    uz.ger(-1.0, &alpha_u, &alpha_z, 1.0);
    uz *= 2.0;
    let mut zz = sinv;
    zz.ger(-1.0, &alpha_z, &alpha_z, 1.0);
    symmetrize(&mut zz);
    Ok((p.value, GramAdjoint { uu, uz, zz }))
}

/// Dense oracle: factor the full `(NM + N_zM_z)²` matrix.
pub fn nll_joint_stacked_from_blocks(g: &JointGram, y: &DVector<f64>) -> Result<f64> {
    check_joint(g, y)?;
    let n = y.len();
    let mut yt = DVector::zeros(n + g.kzz.nrows());
    yt.rows_mut(0, n).copy_from(y);
    nll_from_matrix(&g.full(), &yt)
}

fn check_joint(g: &JointGram, y: &DVector<f64>) -> Result<()> {
    if g.kuu.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: g.kuu.nrows(), got: y.len() });
    }
    if g.kuz.ncols() != g.kzz.nrows() || g.kuz.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: g.kzz.nrows(), got: g.kuz.ncols() });
    }
    Ok(())
}
