//! Covariance functions.
//!
//! The deep kernel is `κ(φ(x), φ(x'))` with the squared-exponential
//! `κ(u, v) = σ_κ²·exp(−‖u − v‖²/(2ℓ²))`. Applying the wave operator
//! `L = Δ_r − c⁻²∂²_t` to one or both arguments goes through the chain rule:
//! jets of `φ` supply `∂φ/∂x_i` and `∂²φ/∂x_i²`, and derivatives of `κ` with
//! respect to the feature difference `d = u − v` are closed-form
//! polynomials in `d` times `κ`. For the SE kernel all contractions reduce to
//! dot products between `d` and the jet vectors, so every block entry costs
//! `O(h)`; [`se_feature_derivs`] keeps the explicit tensors around as a
//! reference.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::autodiff::{Jet2, Scalar};
use crate::error::{Error, Result};
use crate::featurenet::{FeatureAdjoint, FeatureBatch, SirenParams, INPUT_DIM};
use crate::linalg::{cholesky_auto, DenseMatrix};
use crate::SpacetimePoint;

/// Squared-exponential hyperparameters, stored as logs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelHyper {
    pub log_sigma_kappa: f64,
    pub log_ell: f64,
}

impl KernelHyper {
    pub fn new(sigma_kappa: f64, ell: f64) -> Result<Self> {
        if !(sigma_kappa > 0.0 && ell > 0.0) || !sigma_kappa.is_finite() || !ell.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "kernel scale and length-scale must be positive (got {sigma_kappa}, {ell})"
            )));
        }
        Ok(KernelHyper { log_sigma_kappa: sigma_kappa.ln(), log_ell: ell.ln() })
    }

    pub fn sigma_kappa(&self) -> f64 {
        self.log_sigma_kappa.exp()
    }

    pub fn ell(&self) -> f64 {
        self.log_ell.exp()
    }

    /// `σ_κ²`
    pub fn variance(&self) -> f64 {
        (2.0 * self.log_sigma_kappa).exp()
    }

    /// `1/ℓ²`
    pub fn lambda(&self) -> f64 {
        (-2.0 * self.log_ell).exp()
    }
}

/// `L = Σ_i w_i ∂²/∂x_i²` with `w = [1, 1, 1, −1/c²]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveOperator {
    pub c: f64,
}

impl WaveOperator {
    pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

    pub fn new(c: f64) -> Self {
        WaveOperator { c }
    }

    pub fn weights(&self) -> [f64; 4] {
        [1.0, 1.0, 1.0, -1.0 / (self.c * self.c)]
    }
}

impl Default for WaveOperator {
    fn default() -> Self {
        WaveOperator::new(Self::DEFAULT_SPEED_OF_SOUND)
    }
}

/// Feature value and its jets along the four coordinates at one point.
#[derive(Clone, Debug)]
pub struct PointJets {
    pub value: Vec<f64>,
    pub d1: [Vec<f64>; 4],
    pub d2: [Vec<f64>; 4],
}

impl PointJets {
    pub fn of(params: &SirenParams, x: &SpacetimePoint) -> Self {
        let b = params.forward_batch(&[], std::slice::from_ref(x));
        Self::from_batch(&b, 0)
    }

    /// Jets of the `k`-th jet point in a batch.
    pub fn from_batch(b: &FeatureBatch, k: usize) -> Self {
        let col = |m: &DMatrix<f64>, c: usize| m.column(c).iter().copied().collect::<Vec<_>>();
        PointJets {
            value: col(&b.values, b.n_plain + k),
            d1: std::array::from_fn(|i| col(&b.d1, INPUT_DIM * k + i)),
            d2: std::array::from_fn(|i| col(&b.d2, INPUT_DIM * k + i)),
        }
    }

    /// Identity embedding of a raw 4-vector: `φ(x) = x`.
    pub fn identity(x: &SpacetimePoint) -> Self {
        let unit = |i: usize| (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect();
        PointJets {
            value: x.coords().to_vec(),
            d1: std::array::from_fn(unit),
            d2: std::array::from_fn(|_| vec![0.0; 4]),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `σ_κ²·exp(−λ r²/2)`
pub fn se_value(u: &[f64], v: &[f64], hyper: &KernelHyper) -> f64 {
    se_from_r2(sq_dist(u, v), hyper.variance(), hyper.lambda())
}

fn se_from_r2(r2: f64, variance: f64, lambda: f64) -> f64 {
    variance * (-0.5 * lambda * r2).exp()
}

/// SE kernel and its derivatives with respect to `d = u − v` as dense
/// tensors (row-major, `h^k` entries for order `k`). Derivatives with
/// respect to `u` equal these; with respect to `v` they flip sign per order.
#[derive(Clone, Debug)]
pub struct SeDerivs<T> {
    pub dim: usize,
    pub value: T,
    pub grad: Vec<T>,
    pub hess: Vec<T>,
    pub third: Vec<T>,
    pub fourth: Vec<T>,
}

/// Explicit derivative tensors up to `order` (0..=4). Cost `O(h^order)`.
pub fn se_feature_derivs<T: Scalar>(u: &[T], v: &[T], variance: T, lambda: T, order: usize) -> SeDerivs<T> {
    assert!(order <= 4, "derivatives above order 4 are not provided");
    assert_eq!(u.len(), v.len());
    let h = u.len();
    let d: Vec<T> = u.iter().zip(v).map(|(a, b)| *a - *b).collect();
    let r2 = crate::autodiff::sum(d.iter().map(|x| *x * *x));
    let k = variance * (-(lambda * r2) * 0.5).exp();
    let l2 = lambda * lambda;
    let l3 = l2 * lambda;
    let l4 = l3 * lambda;
    let delta = |a: usize, b: usize| a == b;

    let grad = if order >= 1 { d.iter().map(|da| -(k * lambda * *da)).collect() } else { vec![] };
    let mut hess = Vec::new();
    if order >= 2 {
        hess.reserve(h * h);
        for a in 0..h {
            for b in 0..h {
                let mut t = l2 * d[a] * d[b];
                if delta(a, b) {
                    t = t - lambda;
                }
                hess.push(k * t);
            }
        }
    }
    let mut third = Vec::new();
    if order >= 3 {
        third.reserve(h * h * h);
        for a in 0..h {
            for b in 0..h {
                for c in 0..h {
                    let mut t = -(l3 * d[a] * d[b] * d[c]);
                    let mut s = T::zero();
                    let mut any = false;
                    if delta(a, b) {
                        s = s + d[c];
                        any = true;
                    }
                    if delta(a, c) {
                        s = s + d[b];
                        any = true;
                    }
                    if delta(b, c) {
                        s = s + d[a];
                        any = true;
                    }
                    if any {
                        t = t + l2 * s;
                    }
                    third.push(k * t);
                }
            }
        }
    }
    let mut fourth = Vec::new();
    if order >= 4 {
        fourth.reserve(h * h * h * h);
        for a in 0..h {
            for b in 0..h {
                for c in 0..h {
                    for e in 0..h {
                        let mut t = l4 * d[a] * d[b] * d[c] * d[e];
                        let pairs = [
                            (delta(a, b), c, e),
                            (delta(a, c), b, e),
                            (delta(a, e), b, c),
                            (delta(b, c), a, e),
                            (delta(b, e), a, c),
                            (delta(c, e), a, b),
                        ];
                        for (on, i, j) in pairs {
                            if on {
                                t = t - l3 * d[i] * d[j];
                            }
                        }
                        let n2 = [delta(a, b) && delta(c, e), delta(a, c) && delta(b, e), delta(a, e) && delta(b, c)]
                            .iter()
                            .filter(|x| **x)
                            .count();
                        if n2 > 0 {
                            t = t + l2 * (n2 as f64);
                        }
                        fourth.push(k * t);
                    }
                }
            }
        }
    }
    SeDerivs { dim: h, value: k, grad, hess, third, fourth }
}

/// `L` applied to the second argument, by explicit tensor contraction:
/// `Σ_j w_j [Σ_ab κ_ab J'_aj J'_bj − Σ_a κ_a S'_aj]`.
pub fn wave_cross_reference<T: Scalar>(
    u: &[T],
    v_jets: &[Vec<Jet2<T>>; 4],
    variance: T,
    lambda: T,
    op: &WaveOperator,
) -> T {
    let v: Vec<T> = v_jets[0].iter().map(|j| j.v).collect();
    let dv = se_feature_derivs(u, &v, variance, lambda, 2);
    let h = u.len();
    let w = op.weights();
    let mut total = T::zero();
    for (j, jets) in v_jets.iter().enumerate() {
        let mut acc = T::zero();
        for a in 0..h {
            for b in 0..h {
                acc = acc + dv.hess[a * h + b] * jets[a].d1 * jets[b].d1;
            }
            acc = acc - dv.grad[a] * jets[a].d2;
        }
        total = total + acc * w[j];
    }
    total
}

/// `L_x L_x'` by explicit contraction of derivative tensors up to order 4.
pub fn wave_double_reference<T: Scalar>(
    x_jets: &[Vec<Jet2<T>>; 4],
    v_jets: &[Vec<Jet2<T>>; 4],
    variance: T,
    lambda: T,
    op: &WaveOperator,
) -> T {
    let u: Vec<T> = x_jets[0].iter().map(|j| j.v).collect();
    let v: Vec<T> = v_jets[0].iter().map(|j| j.v).collect();
    let dv = se_feature_derivs(&u, &v, variance, lambda, 4);
    let h = u.len();
    let w = op.weights();
    let mut total = T::zero();
    for (j, pj) in v_jets.iter().enumerate() {
        // Contract the x'-side first: M4_ab = Σ_cd κ_abcd P_c P_d − Σ_c κ_abc Q_c,
        // M3_a = Σ_cd κ_acd P_c P_d − Σ_c κ_ac Q_c.
        let mut m4 = vec![T::zero(); h * h];
        let mut m3 = vec![T::zero(); h];
        for a in 0..h {
            for b in 0..h {
                let mut acc = T::zero();
                for c in 0..h {
                    for e in 0..h {
                        acc = acc + dv.fourth[((a * h + b) * h + c) * h + e] * pj[c].d1 * pj[e].d1;
                    }
                    acc = acc - dv.third[(a * h + b) * h + c] * pj[c].d2;
                }
                m4[a * h + b] = acc;
            }
            let mut acc = T::zero();
            for c in 0..h {
                for e in 0..h {
                    acc = acc + dv.third[(a * h + c) * h + e] * pj[c].d1 * pj[e].d1;
                }
                acc = acc - dv.hess[a * h + c] * pj[c].d2;
            }
            m3[a] = acc;
        }
        for (i, xi) in x_jets.iter().enumerate() {
            let mut acc = T::zero();
            for a in 0..h {
                for b in 0..h {
                    acc = acc + m4[a * h + b] * xi[a].d1 * xi[b].d1;
                }
                acc = acc + m3[a] * xi[a].d2;
            }
            total = total + acc * (w[i] * w[j]);
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Closed-form entries on dot-product invariants.

/// Invariants of a cross entry for one coordinate `j` of the second point.
#[derive(Clone, Copy, Debug, Default)]
struct CrossTerm {
    dp: f64,
    pp: f64,
    dq: f64,
}

fn cross_poly(terms: &[CrossTerm; 4], lambda: f64, w: &[f64; 4]) -> f64 {
    let l2 = lambda * lambda;
    terms
        .iter()
        .zip(w)
        .map(|(t, wj)| wj * (l2 * t.dp * t.dp - lambda * t.pp + lambda * t.dq))
        .sum()
}

/// Invariants of a double-operator entry for the coordinate pair `(i, j)`.
#[derive(Clone, Copy, Debug, Default)]
struct DoubleTerm {
    a: f64,   // d·J_i
    b: f64,   // d·P_j
    e: f64,   // d·S_i
    f: f64,   // d·Q_j
    aa: f64,  // J_i·J_i
    bb: f64,  // P_j·P_j
    c: f64,   // J_i·P_j
    dd: f64,  // J_i·Q_j
    ff: f64,  // S_i·P_j
    g: f64,   // S_i·Q_j
}

fn double_poly(t: &DoubleTerm, l: f64) -> f64 {
    let (l2, l3, l4) = (l * l, l * l * l, l * l * l * l);
    let DoubleTerm { a, b, e, f, aa, bb, c, dd, ff, g } = *t;
    l4 * a * a * b * b - l3 * (aa * b * b + 4.0 * a * b * c + bb * a * a) + l2 * (aa * bb + 2.0 * c * c)
        + l3 * a * a * f
        - l2 * (aa * f + 2.0 * dd * a)
        - l3 * e * b * b
        + l2 * (2.0 * ff * b + bb * e)
        - l2 * e * f
        + l * g
}

/// Partial derivatives of [`double_poly`] with respect to each invariant and λ.
fn double_poly_grad(t: &DoubleTerm, l: f64) -> (DoubleTerm, f64) {
    let (l2, l3, l4) = (l * l, l * l * l, l * l * l * l);
    let DoubleTerm { a, b, e, f, aa, bb, c, dd, ff, g } = *t;
    let grad = DoubleTerm {
        a: 2.0 * l4 * a * b * b - l3 * (4.0 * b * c + 2.0 * bb * a) + 2.0 * l3 * a * f - 2.0 * l2 * dd,
        b: 2.0 * l4 * a * a * b - l3 * (2.0 * aa * b + 4.0 * a * c) - 2.0 * l3 * e * b + 2.0 * l2 * ff,
        e: -l3 * b * b + l2 * bb - l2 * f,
        f: l3 * a * a - l2 * aa - l2 * e,
        aa: -l3 * b * b + l2 * bb - l2 * f,
        bb: -l3 * a * a + l2 * aa + l2 * e,
        c: -4.0 * l3 * a * b + 4.0 * l2 * c,
        dd: -2.0 * l2 * a,
        ff: 2.0 * l2 * b,
        g: l,
    };
    let dl = 4.0 * l3 * a * a * b * b - 3.0 * l2 * (aa * b * b + 4.0 * a * b * c + bb * a * a)
        + 2.0 * l * (aa * bb + 2.0 * c * c)
        + 3.0 * l2 * a * a * f
        - 2.0 * l * (aa * f + 2.0 * dd * a)
        - 3.0 * l2 * e * b * b
        + 2.0 * l * (2.0 * ff * b + bb * e)
        - 2.0 * l * e * f
        + g;
    (grad, dl)
}

/// Slices of one collocation point's features and jets.
struct JetView<'a> {
    value: &'a [f64],
    d1: [&'a [f64]; 4],
    d2: [&'a [f64]; 4],
}

impl<'a> JetView<'a> {
    fn of(p: &'a PointJets) -> Self {
        JetView {
            value: &p.value,
            d1: std::array::from_fn(|i| p.d1[i].as_slice()),
            d2: std::array::from_fn(|i| p.d2[i].as_slice()),
        }
    }
}

fn cross_terms(d: &[f64], q: &JetView<'_>, pp: &[f64; 4]) -> [CrossTerm; 4] {
    std::array::from_fn(|j| CrossTerm { dp: dot(d, q.d1[j]), pp: pp[j], dq: dot(d, q.d2[j]) })
}

fn cross_value(u: &[f64], q: &JetView<'_>, pp: &[f64; 4], variance: f64, lambda: f64, w: &[f64; 4]) -> f64 {
    let d: Vec<f64> = u.iter().zip(q.value).map(|(a, b)| a - b).collect();
    let r2 = dot(&d, &d);
    se_from_r2(r2, variance, lambda) * cross_poly(&cross_terms(&d, q, pp), lambda, w)
}

fn double_terms(p: &JetView<'_>, q: &JetView<'_>, i: usize, j: usize, pre: &DoublePre) -> DoubleTerm {
    DoubleTerm {
        a: pre.dj[i],
        b: pre.dp[j],
        e: pre.ds[i],
        f: pre.dq[j],
        aa: pre.jj[i],
        bb: pre.pp[j],
        c: dot(p.d1[i], q.d1[j]),
        dd: dot(p.d1[i], q.d2[j]),
        ff: dot(p.d2[i], q.d1[j]),
        g: dot(p.d2[i], q.d2[j]),
    }
}

struct DoublePre {
    dj: [f64; 4],
    ds: [f64; 4],
    dp: [f64; 4],
    dq: [f64; 4],
    jj: [f64; 4],
    pp: [f64; 4],
}

impl DoublePre {
    fn new(d: &[f64], p: &JetView<'_>, q: &JetView<'_>, jj: [f64; 4], pp: [f64; 4]) -> Self {
        DoublePre {
            dj: std::array::from_fn(|i| dot(d, p.d1[i])),
            ds: std::array::from_fn(|i| dot(d, p.d2[i])),
            dp: std::array::from_fn(|j| dot(d, q.d1[j])),
            dq: std::array::from_fn(|j| dot(d, q.d2[j])),
            jj,
            pp,
        }
    }
}

fn jet_norms(p: &JetView<'_>) -> [f64; 4] {
    std::array::from_fn(|i| dot(p.d1[i], p.d1[i]))
}

fn double_value(p: &JetView<'_>, q: &JetView<'_>, variance: f64, lambda: f64, w: &[f64; 4]) -> f64 {
    let d: Vec<f64> = p.value.iter().zip(q.value).map(|(a, b)| a - b).collect();
    let r2 = dot(&d, &d);
    let pre = DoublePre::new(&d, p, q, jet_norms(p), jet_norms(q));
    let mut poly = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            poly += w[i] * w[j] * double_poly(&double_terms(p, q, i, j, &pre), lambda);
        }
    }
    se_from_r2(r2, variance, lambda) * poly
}

/// `L_{x'}` applied to the SE kernel of given features: `u = φ(x)`, jets at `x'`.
pub fn wave_cross_features(u: &[f64], v: &PointJets, hyper: &KernelHyper, op: &WaveOperator) -> f64 {
    let q = JetView::of(v);
    cross_value(u, &q, &jet_norms(&q), hyper.variance(), hyper.lambda(), &op.weights())
}

/// `L_x L_{x'}` applied to the SE kernel of given feature jets.
pub fn wave_double_features(a: &PointJets, b: &PointJets, hyper: &KernelHyper, op: &WaveOperator) -> f64 {
    double_value(&JetView::of(a), &JetView::of(b), hyper.variance(), hyper.lambda(), &op.weights())
}

/// `κ_u(φ(x_i), φ(x_j))`
pub fn deep_kernel(params: &SirenParams, hyper: &KernelHyper, xi: &SpacetimePoint, xj: &SpacetimePoint) -> f64 {
    if xi == xj {
        return hyper.variance();
    }
    let b = params.forward_batch(&[*xi, *xj], &[]);
    let u = b.values.column(0);
    let v = b.values.column(1);
    se_value(u.as_slice(), v.as_slice(), hyper)
}

/// `L_{x'} κ_u(φ(x), φ(x'))`
pub fn wave_cross(
    params: &SirenParams,
    hyper: &KernelHyper,
    op: &WaveOperator,
    x: &SpacetimePoint,
    xp: &SpacetimePoint,
) -> f64 {
    let b = params.forward_batch(std::slice::from_ref(x), std::slice::from_ref(xp));
    let jets = PointJets::from_batch(&b, 0);
    wave_cross_features(b.values.column(0).as_slice(), &jets, hyper, op)
}

/// `L_x L_{x'} κ_u(φ(x), φ(x'))`
pub fn wave_double(
    params: &SirenParams,
    hyper: &KernelHyper,
    op: &WaveOperator,
    x: &SpacetimePoint,
    xp: &SpacetimePoint,
) -> f64 {
    let b = params.forward_batch(&[], &[*x, *xp]);
    wave_double_features(&PointJets::from_batch(&b, 0), &PointJets::from_batch(&b, 1), hyper, op)
}

// ---------------------------------------------------------------------------
// Batched blocks with adjoints.

/// Noise-free kernel blocks over measurement points `X` (plain points of a
/// feature batch) and collocation points `X_z` (its jet points).
#[derive(Clone, Debug)]
pub struct GramBlocks {
    pub kuu: DenseMatrix,
    pub kuz: DenseMatrix,
    pub kzz: DenseMatrix,
}

/// `∂loss/∂K` for each block. `uz` must already combine the `Kuz` and
/// `Kzuᵀ` contributions; `uu`/`zz` are full (both triangles).
#[derive(Clone, Debug)]
pub struct GramAdjoint {
    pub uu: DenseMatrix,
    pub uz: DenseMatrix,
    pub zz: DenseMatrix,
}

/// Gradient with respect to the log-hyperparameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HyperGrad {
    pub log_sigma_kappa: f64,
    pub log_ell: f64,
}

fn col(m: &DMatrix<f64>, c: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[c * n..(c + 1) * n]
}

fn col_mut(m: &mut DMatrix<f64>, c: usize) -> &mut [f64] {
    let n = m.nrows();
    &mut m.as_mut_slice()[c * n..(c + 1) * n]
}

fn batch_view(b: &FeatureBatch, k: usize) -> JetView<'_> {
    JetView {
        value: col(&b.values, b.n_plain + k),
        d1: std::array::from_fn(|i| col(&b.d1, INPUT_DIM * k + i)),
        d2: std::array::from_fn(|i| col(&b.d2, INPUT_DIM * k + i)),
    }
}

impl GramBlocks {
    pub fn assemble(batch: &FeatureBatch, hyper: &KernelHyper, op: &WaveOperator) -> Self {
        let n = batch.n_plain;
        let m = batch.n_jet;
        let var = hyper.variance();
        let lambda = hyper.lambda();
        let w = op.weights();

        let mut kuu = DMatrix::zeros(n, n);
        for q in 0..n {
            let vq = col(&batch.values, q);
            kuu[(q, q)] = var;
            for p in 0..q {
                let k = se_from_r2(sq_dist(col(&batch.values, p), vq), var, lambda);
                kuu[(p, q)] = k;
                kuu[(q, p)] = k;
            }
        }

        let views: Vec<JetView<'_>> = (0..m).map(|k| batch_view(batch, k)).collect();
        let norms: Vec<[f64; 4]> = views.iter().map(jet_norms).collect();
        let mut kuz = DMatrix::zeros(n, m);
        for (q, view) in views.iter().enumerate() {
            for p in 0..n {
                kuz[(p, q)] = cross_value(col(&batch.values, p), view, &norms[q], var, lambda, &w);
            }
        }

        let mut kzz = DMatrix::zeros(m, m);
        for q in 0..m {
            for p in 0..=q {
                let v = double_value(&views[p], &views[q], var, lambda, &w);
                kzz[(p, q)] = v;
                kzz[(q, p)] = v;
            }
        }
        GramBlocks { kuu, kuz, kzz }
    }

    /// Pulls block adjoints back to feature adjoints and hyperparameter gradients.
    pub fn backprop(
        &self,
        batch: &FeatureBatch,
        hyper: &KernelHyper,
        op: &WaveOperator,
        adj: &GramAdjoint,
    ) -> (FeatureAdjoint, HyperGrad) {
        let n = batch.n_plain;
        let m = batch.n_jet;
        let h = batch.out_dim();
        let var = hyper.variance();
        let lambda = hyper.lambda();
        let w = op.weights();
        let mut fa = batch.zero_adjoint();
        let mut g_lambda = 0.0;
        let mut g_logvar = 0.0; // ∂/∂log σ_κ²

        // Kuu: pair weight C_pq = (W_pq + W_qp)·(−λ κ_pq); ū_p = Σ_q C_pq (u_p − u_q).
        if n > 0 {
            let mut cmat = DMatrix::zeros(n, n);
            for q in 0..n {
                g_logvar += adj.uu[(q, q)] * self.kuu[(q, q)];
                for p in 0..q {
                    let wsum = adj.uu[(p, q)] + adj.uu[(q, p)];
                    if wsum == 0.0 {
                        continue;
                    }
                    let k = self.kuu[(p, q)];
                    let r2 = sq_dist(col(&batch.values, p), col(&batch.values, q));
                    g_logvar += wsum * k;
                    g_lambda += wsum * (-0.5 * r2) * k;
                    let c = -wsum * lambda * k;
                    cmat[(p, q)] = c;
                    cmat[(q, p)] = c;
                }
            }
            let u = batch.values.columns(0, n);
            let uc = u * &cmat;
            for p in 0..n {
                let rs: f64 = cmat.column(p).sum();
                let dst = col_mut(&mut fa.values, p);
                let up = col(&batch.values, p);
                for a in 0..h {
                    dst[a] += rs * up[a] - uc[(a, p)];
                }
            }
        }

        if m == 0 {
            let grad = HyperGrad { log_sigma_kappa: 2.0 * g_logvar, log_ell: -2.0 * lambda * g_lambda };
            return (fa, grad);
        }

        let views: Vec<JetView<'_>> = (0..m).map(|k| batch_view(batch, k)).collect();
        let norms: Vec<[f64; 4]> = views.iter().map(jet_norms).collect();
        // Accumulators for the collocation side, flushed into `fa` at the end.
        let mut zbar = vec![vec![0.0; h]; m];
        let mut jbar = vec![[(); 4].map(|_| vec![0.0; h]); m];
        let mut sbar = vec![[(); 4].map(|_| vec![0.0; h]); m];
        let mut d = vec![0.0; h];
        let mut dbar = vec![0.0; h];

        // Kuz
        for (q, view) in views.iter().enumerate() {
            for p in 0..n {
                let omega = adj.uz[(p, q)];
                if omega == 0.0 {
                    continue;
                }
                let up = col(&batch.values, p);
                for a in 0..h {
                    d[a] = up[a] - view.value[a];
                }
                let r2 = dot(&d, &d);
                let k = se_from_r2(r2, var, lambda);
                let terms = cross_terms(&d, view, &norms[q]);
                let poly = cross_poly(&terms, lambda, &w);
                let e = k * poly;
                g_logvar += omega * e;
                let mut dl_poly = 0.0;
                for (t, wj) in terms.iter().zip(&w) {
                    dl_poly += wj * (2.0 * lambda * t.dp * t.dp - t.pp + t.dq);
                }
                g_lambda += omega * (-0.5 * r2 * e + k * dl_poly);

                let ok = omega * k;
                dbar.iter_mut().zip(&d).for_each(|(b, di)| *b = omega * (-lambda * e) * di);
                for (j, t) in terms.iter().enumerate() {
                    let c_dp = ok * w[j] * 2.0 * lambda * lambda * t.dp;
                    let c_pp = -ok * w[j] * lambda;
                    let c_dq = ok * w[j] * lambda;
                    axpy(c_dp, view.d1[j], &mut dbar);
                    axpy(c_dq, view.d2[j], &mut dbar);
                    axpy(c_dp, &d, &mut jbar[q][j]);
                    axpy(2.0 * c_pp, view.d1[j], &mut jbar[q][j]);
                    axpy(c_dq, &d, &mut sbar[q][j]);
                }
                axpy(1.0, &dbar, col_mut(&mut fa.values, p));
                axpy(-1.0, &dbar, &mut zbar[q]);
            }
        }

        // Kzz (upper triangle incl. diagonal)
        for q in 0..m {
            for p in 0..=q {
                let omega = if p == q { adj.zz[(p, p)] } else { adj.zz[(p, q)] + adj.zz[(q, p)] };
                if omega == 0.0 {
                    continue;
                }
                let (vp, vq) = (&views[p], &views[q]);
                for a in 0..h {
                    d[a] = vp.value[a] - vq.value[a];
                }
                let r2 = dot(&d, &d);
                let k = se_from_r2(r2, var, lambda);
                let pre = DoublePre::new(&d, vp, vq, norms[p], norms[q]);
                let mut poly = 0.0;
                let mut dl_poly = 0.0;
                let mut ca = [0.0; 4];
                let mut ce = [0.0; 4];
                let mut c_aa = [0.0; 4];
                let mut cb = [0.0; 4];
                let mut cf = [0.0; 4];
                let mut c_bb = [0.0; 4];
                let mut cc = [[0.0; 4]; 4];
                let mut cd = [[0.0; 4]; 4];
                let mut cff = [[0.0; 4]; 4];
                let mut cg = [[0.0; 4]; 4];
                let ok = omega * k;
                for i in 0..4 {
                    for j in 0..4 {
                        let t = double_terms(vp, vq, i, j, &pre);
                        let ww = w[i] * w[j];
                        poly += ww * double_poly(&t, lambda);
                        let (gt, gl) = double_poly_grad(&t, lambda);
                        dl_poly += ww * gl;
                        let s = ok * ww;
                        ca[i] += s * gt.a;
                        ce[i] += s * gt.e;
                        c_aa[i] += s * gt.aa;
                        cb[j] += s * gt.b;
                        cf[j] += s * gt.f;
                        c_bb[j] += s * gt.bb;
                        cc[i][j] = s * gt.c;
                        cd[i][j] = s * gt.dd;
                        cff[i][j] = s * gt.ff;
                        cg[i][j] = s * gt.g;
                    }
                }
                let e = k * poly;
                g_logvar += omega * e;
                g_lambda += omega * (-0.5 * r2 * e + k * dl_poly);

                dbar.iter_mut().zip(&d).for_each(|(b, di)| *b = omega * (-lambda * e) * di);
                for i in 0..4 {
                    axpy(ca[i], vp.d1[i], &mut dbar);
                    axpy(ce[i], vp.d2[i], &mut dbar);
                    axpy(cb[i], vq.d1[i], &mut dbar);
                    axpy(cf[i], vq.d2[i], &mut dbar);
                }
                for i in 0..4 {
                    axpy(ca[i], &d, &mut jbar[p][i]);
                    axpy(2.0 * c_aa[i], vp.d1[i], &mut jbar[p][i]);
                    axpy(ce[i], &d, &mut sbar[p][i]);
                    for j in 0..4 {
                        axpy(cc[i][j], vq.d1[j], &mut jbar[p][i]);
                        axpy(cd[i][j], vq.d2[j], &mut jbar[p][i]);
                        axpy(cff[i][j], vq.d1[j], &mut sbar[p][i]);
                        axpy(cg[i][j], vq.d2[j], &mut sbar[p][i]);
                    }
                }
                for j in 0..4 {
                    axpy(cb[j], &d, &mut jbar[q][j]);
                    axpy(2.0 * c_bb[j], vq.d1[j], &mut jbar[q][j]);
                    axpy(cf[j], &d, &mut sbar[q][j]);
                    for i in 0..4 {
                        axpy(cc[i][j], vp.d1[i], &mut jbar[q][j]);
                        axpy(cff[i][j], vp.d2[i], &mut jbar[q][j]);
                        axpy(cd[i][j], vp.d1[i], &mut sbar[q][j]);
                        axpy(cg[i][j], vp.d2[i], &mut sbar[q][j]);
                    }
                }
                axpy(1.0, &dbar, &mut zbar[p]);
                axpy(-1.0, &dbar, &mut zbar[q]);
            }
        }

        for k in 0..m {
            axpy(1.0, &zbar[k], col_mut(&mut fa.values, n + k));
            for i in 0..4 {
                axpy(1.0, &jbar[k][i], col_mut(&mut fa.d1, INPUT_DIM * k + i));
                axpy(1.0, &sbar[k][i], col_mut(&mut fa.d2, INPUT_DIM * k + i));
            }
        }
        let grad = HyperGrad { log_sigma_kappa: 2.0 * g_logvar, log_ell: -2.0 * lambda * g_lambda };
        (fa, grad)
    }
}

/// Joint covariance of measurements and collocation pseudo-observations,
/// noise already on the diagonals.
#[derive(Clone, Debug)]
pub struct JointGram {
    pub kuu: DenseMatrix,
    pub kuz: DenseMatrix,
    pub kzu: DenseMatrix,
    pub kzz: DenseMatrix,
}

impl JointGram {
    pub fn from_blocks(blocks: GramBlocks, sigma: f64, sigma_z: f64) -> Self {
        let GramBlocks { mut kuu, kuz, mut kzz } = blocks;
        for i in 0..kuu.nrows() {
            kuu[(i, i)] += sigma * sigma;
        }
        for i in 0..kzz.nrows() {
            kzz[(i, i)] += sigma_z * sigma_z;
        }
        let kzu = kuz.transpose();
        JointGram { kuu, kuz, kzu, kzz }
    }

    /// The full `[[Kuu, Kuz], [Kzu, Kzz]]` matrix.
    pub fn full(&self) -> DenseMatrix {
        let n = self.kuu.nrows();
        let m = self.kzz.nrows();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.kuu);
        k.view_mut((0, n), (n, m)).copy_from(&self.kuz);
        k.view_mut((n, 0), (m, n)).copy_from(&self.kzu);
        k.view_mut((n, n), (m, m)).copy_from(&self.kzz);
        k
    }
}

pub fn assemble_joint(
    params: &SirenParams,
    hyper: &KernelHyper,
    op: &WaveOperator,
    x: &[SpacetimePoint],
    xz: &[SpacetimePoint],
    sigma: f64,
    sigma_z: f64,
) -> Result<JointGram> {
    if x.is_empty() {
        return Err(Error::DegenerateGrid("no measurement points".into()));
    }
    let batch = params.forward_batch(x, xz);
    let gram = JointGram::from_blocks(GramBlocks::assemble(&batch, hyper, op), sigma, sigma_z);
    if cholesky_auto(&gram.kuu).is_err() {
        return Err(Error::DegenerateGrid(
            "measurement Gram is singular even with jitter (duplicate points?)".into(),
        ));
    }
    Ok(gram)
}

// ---------------------------------------------------------------------------
// Diffuse-field baseline.

/// Equally spaced frequencies `f_lo..=f_hi`.
pub fn frequency_grid(f_lo: f64, f_hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![f_lo],
        _ => (0..count).map(|m| f_lo + (f_hi - f_lo) * m as f64 / (count - 1) as f64).collect(),
    }
}

/// Time-domain diffuse-field kernel: the average over a frequency grid of
/// spatial coherence `sinc(2πf‖r − r'‖/c)` times temporal `cos(2πf(t − t'))`,
/// multiplied by `scale`.
#[derive(Clone, Debug)]
pub struct DiffuseKernel {
    pub freqs: Vec<f64>,
    pub c: f64,
    pub scale: f64,
}

fn sinc(a: f64) -> f64 {
    if a == 0.0 {
        1.0
    } else {
        a.sin() / a
    }
}

/// Unscaled diffuse kernel between two spacetime points.
pub fn diffuse_kernel(x: &SpacetimePoint, xp: &SpacetimePoint, freqs: &[f64], c: f64) -> f64 {
    let dist = sq_dist(&x.r, &xp.r).sqrt();
    let dt = x.t - xp.t;
    let s: f64 = freqs
        .iter()
        .map(|f| sinc(2.0 * PI * f * dist / c) * (2.0 * PI * f * dt).cos())
        .sum();
    s / freqs.len() as f64
}

impl DiffuseKernel {
    pub fn new(freqs: Vec<f64>, c: f64, scale: f64) -> Self {
        DiffuseKernel { freqs, c, scale }
    }

    pub fn eval(&self, x: &SpacetimePoint, xp: &SpacetimePoint) -> f64 {
        self.scale * diffuse_kernel(x, xp, &self.freqs, self.c)
    }

    /// Kernel matrix between two point sets. Pairs sharing positions and
    /// time lags reuse the per-frequency sums.
    pub fn cross(&self, a: &[SpacetimePoint], b: &[SpacetimePoint]) -> DenseMatrix {
        let nf = self.freqs.len() as f64;
        let group = |pts: &[SpacetimePoint]| {
            let mut groups: Vec<([f64; 3], Vec<usize>)> = Vec::new();
            let mut index: HashMap<[u64; 3], usize> = HashMap::new();
            for (i, p) in pts.iter().enumerate() {
                let key = p.r.map(f64::to_bits);
                let g = *index.entry(key).or_insert_with(|| {
                    groups.push((p.r, Vec::new()));
                    groups.len() - 1
                });
                groups[g].1.push(i);
            }
            groups
        };
        let ga = group(a);
        let gb = group(b);
        let mut cos_cache: HashMap<u64, Vec<f64>> = HashMap::new();
        let mut out = DMatrix::zeros(a.len(), b.len());
        let mut coherence = vec![0.0; self.freqs.len()];
        for (ra, ia) in &ga {
            for (rb, ib) in &gb {
                let dist = sq_dist(ra, rb).sqrt();
                for (c, f) in coherence.iter_mut().zip(&self.freqs) {
                    *c = sinc(2.0 * PI * f * dist / self.c);
                }
                let mut lag_cache: HashMap<u64, f64> = HashMap::new();
                for &i in ia {
                    for &j in ib {
                        let dt = a[i].t - b[j].t;
                        let key = dt.to_bits();
                        let v = *lag_cache.entry(key).or_insert_with(|| {
                            let cosv = cos_cache.entry(key).or_insert_with(|| {
                                self.freqs.iter().map(|f| (2.0 * PI * f * dt).cos()).collect()
                            });
                            dot(&coherence, cosv) / nf
                        });
                        out[(i, j)] = self.scale * v;
                    }
                }
            }
        }
        out
    }

    /// Symmetric Gram over one point set.
    pub fn gram(&self, pts: &[SpacetimePoint]) -> DenseMatrix {
        let mut k = self.cross(pts, pts);
        crate::linalg::symmetrize(&mut k);
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurenet::{InputNormalization, SirenConfig};
    use crate::linalg::{cholesky, min_eigenvalue, unit_diagonal};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(depth: usize, hidden: usize, out: usize, seed: u64) -> SirenParams {
        let config = SirenConfig {
            depth,
            hidden,
            out_dim: out,
            normalization: InputNormalization::for_region([4.0, 3.0, 1.5], 0.25, 32.0 / 3000.0),
            ..SirenConfig::default()
        };
        SirenParams::init(config, seed).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng) -> SpacetimePoint {
        SpacetimePoint::new(
            [
                4.0 + rng.random_range(-0.25..0.25),
                3.0 + rng.random_range(-0.25..0.25),
                1.5 + rng.random_range(-0.25..0.25),
            ],
            rng.random_range(0.0..32.0 / 3000.0),
        )
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn se_at_coincidence() {
        let hyper = KernelHyper::new(1.7, 0.6).unwrap();
        let u = [0.3, -1.2, 0.8];
        let d = se_feature_derivs(&u, &u, hyper.variance(), hyper.lambda(), 2);
        assert!((d.value - 1.7 * 1.7).abs() < 1e-14);
        assert!(d.grad.iter().all(|g| *g == 0.0));
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { -hyper.variance() * hyper.lambda() } else { 0.0 };
                assert!((d.hess[a * 3 + b] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn se_at_sqrt2_ell() {
        let hyper = KernelHyper::new(2.0, 0.5).unwrap();
        let u = [0.5 * 2f64.sqrt(), 0.0];
        let v = [0.0, 0.0];
        assert!((se_value(&u, &v, &hyper) - 4.0 * (-1.0f64).exp()).abs() < 1e-14);
    }

    // Nested central differences in d of lower-order tensors.
    #[test]
    fn se_derivative_tensors_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hyper = KernelHyper::new(1.3, 0.9).unwrap();
        let (var, lam) = (hyper.variance(), hyper.lambda());
        for _ in 0..3 {
            let u: Vec<f64> = (0..5).map(|_| rng.random_range(-0.6..0.6)).collect();
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-0.6..0.6)).collect();
            let base = se_feature_derivs(&u, &v, var, lam, 4);
            let h = 1e-5;
            for a in 0..5 {
                let mut up = u.clone();
                up[a] += h;
                let mut um = u.clone();
                um[a] -= h;
                let p = se_feature_derivs(&up, &v, var, lam, 3);
                let m = se_feature_derivs(&um, &v, var, lam, 3);
                let fd = |x: &[f64], y: &[f64]| -> Vec<f64> {
                    x.iter().zip(y).map(|(a, b)| (a - b) / (2.0 * h)).collect()
                };
                let scale = |t: &[f64]| t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let g1 = (p.value - m.value) / (2.0 * h);
                assert!((base.grad[a] - g1).abs() < 1e-6 * scale(&base.grad));
                let g2 = fd(&p.grad, &m.grad);
                for b in 0..5 {
                    assert!((base.hess[b * 5 + a] - g2[b]).abs() < 1e-6 * scale(&base.hess));
                }
                let g3 = fd(&p.hess, &m.hess);
                for bc in 0..25 {
                    assert!((base.third[bc * 5 + a] - g3[bc]).abs() < 1e-4 * scale(&base.third));
                }
                let g4 = fd(&p.third, &m.third);
                for bcd in 0..125 {
                    assert!((base.fourth[bcd * 5 + a] - g4[bcd]).abs() < 1e-4 * scale(&base.fourth));
                }
            }
        }
    }

    #[test]
    fn deep_kernel_coincidence_and_symmetry() {
        let p = net(3, 16, 16, 1);
        let hyper = KernelHyper::new(0.8, 1.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let (a, b) = (random_point(&mut rng), random_point(&mut rng));
            assert_eq!(deep_kernel(&p, &hyper, &a, &a), hyper.variance());
            assert_eq!(deep_kernel(&p, &hyper, &a, &b), deep_kernel(&p, &hyper, &b, &a));
        }
    }

    #[test]
    fn closed_form_matches_tensor_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = WaveOperator::default();
        for s in 0..4 {
            let p = net(3, 6, 5, 10 + s);
            let hyper = KernelHyper::new(1.2, 2.0 + s as f64).unwrap();
            let x = random_point(&mut rng);
            let mut xp = random_point(&mut rng);
            xp.r[0] = x.r[0] + 0.01;
            let flat = {
                let mut f = Vec::new();
                p.write_flat(&mut f);
                f
            };
            let layers = p.generic_layers::<f64>(&flat);
            let jx = crate::featurenet::jets_generic(&p.config, &layers, &x);
            let jp = crate::featurenet::jets_generic(&p.config, &layers, &xp);
            let u: Vec<f64> = jx[0].iter().map(|j| j.v).collect();
            let cross_ref = wave_cross_reference(&u, &jp, hyper.variance(), hyper.lambda(), &op);
            let cross = wave_cross(&p, &hyper, &op, &x, &xp);
            assert!(rel(cross, cross_ref) < 1e-10, "{cross} vs {cross_ref}");
            let dbl_ref = wave_double_reference(&jx, &jp, hyper.variance(), hyper.lambda(), &op);
            let dbl = wave_double(&p, &hyper, &op, &x, &xp);
            assert!(rel(dbl, dbl_ref) < 1e-10, "{dbl} vs {dbl_ref}");
            let same = wave_double_reference(&jx, &jx, hyper.variance(), hyper.lambda(), &op);
            assert!(rel(wave_double(&p, &hyper, &op, &x, &x), same) < 1e-10);
        }
    }

    // Raw-input SE kernel: L_{x'} k = k·Σ_j w_j (λ² d_j² − λ).
    #[test]
    fn identity_features_symbolic_cross() {
        let hyper = KernelHyper::new(1.0, 0.7).unwrap();
        let op = WaveOperator::new(2.0);
        let x = SpacetimePoint::new([0.1, 0.2, -0.3], 0.4);
        let xp = SpacetimePoint::new([0.3, -0.1, 0.0], 0.1);
        let got = wave_cross_features(&x.coords(), &PointJets::identity(&xp), &hyper, &op);
        let (l, w) = (hyper.lambda(), op.weights());
        let d: Vec<f64> = x.coords().iter().zip(xp.coords()).map(|(a, b)| a - b).collect();
        let k = se_value(&x.coords(), &xp.coords(), &hyper);
        let expect: f64 = (0..4).map(|j| w[j] * k * (l * l * d[j] * d[j] - l)).sum();
        assert!(rel(got, expect) < 1e-13);
        // coincidence
        let at = wave_cross_features(&x.coords(), &PointJets::identity(&x), &hyper, &op);
        assert!(rel(at, -l * (3.0 - 0.25)) < 1e-13);
    }

    #[test]
    fn speed_of_sound_only_scales_time_term() {
        let p = net(2, 8, 8, 4);
        let hyper = KernelHyper::new(1.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_point(&mut rng);
        let xp = random_point(&mut rng);
        let spatial = wave_cross(&p, &hyper, &WaveOperator::new(f64::INFINITY), &x, &xp);
        let c1 = wave_cross(&p, &hyper, &WaveOperator::new(343.0), &x, &xp);
        let c2 = wave_cross(&p, &hyper, &WaveOperator::new(686.0), &x, &xp);
        let t1 = c1 - spatial;
        let t2 = c2 - spatial;
        assert!(rel(t2, t1 / 4.0) < 1e-6);
    }

    #[test]
    fn wave_double_symmetric() {
        let p = net(3, 12, 10, 6);
        let hyper = KernelHyper::new(1.0, 2.5).unwrap();
        let op = WaveOperator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let x = random_point(&mut rng);
            let mut xp = x;
            xp.r[1] += 0.004;
            xp.t += 2e-5;
            let a = wave_double(&p, &hyper, &op, &x, &xp);
            let b = wave_double(&p, &hyper, &op, &xp, &x);
            assert!(rel(a, b) < 1e-10);
        }
    }

    #[test]
    fn joint_assembly_shapes_and_symmetry() {
        let p = net(3, 12, 10, 7);
        let hyper = KernelHyper::new(1.0, 4.0).unwrap();
        let op = WaveOperator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<_> = (0..3).map(|_| random_point(&mut rng)).collect();
        let xz: Vec<_> = (0..2).map(|_| random_point(&mut rng)).collect();
        let g = assemble_joint(&p, &hyper, &op, &x, &xz, 0.1, 0.01).unwrap();
        let full = g.full();
        assert_eq!(full.shape(), (5, 5));
        assert_eq!(g.kzu, g.kuz.transpose());
        assert!((&full - full.transpose()).amax() <= 1e-12 * full.amax());
        let only = assemble_joint(&p, &hyper, &op, &x, &[], 0.1, 0.01).unwrap();
        assert_eq!(only.full(), only.kuu);
        assert_eq!(only.kuu, g.kuu);
        assert!(cholesky(&unit_diagonal(&full), 1e-8).is_ok());
    }

    #[test]
    fn duplicate_points_without_noise_are_degenerate() {
        let p = net(2, 4, 4, 1);
        let hyper = KernelHyper::new(1.0, 1.0).unwrap();
        let x = SpacetimePoint::new([4.0, 3.0, 1.5], 0.001);
        // jitter rescues a plain duplicate; it cannot rescue an empty grid
        assert!(assemble_joint(&p, &hyper, &WaveOperator::default(), &[x, x], &[], 0.0, 0.0).is_ok());
        assert!(matches!(
            assemble_joint(&p, &hyper, &WaveOperator::default(), &[], &[], 0.0, 0.0),
            Err(Error::DegenerateGrid(_))
        ));
    }

    #[test]
    fn deep_kernel_gram_is_psd() {
        let p = net(3, 16, 16, 9);
        let hyper = KernelHyper::new(1.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Vec<_> = (0..20).map(|_| random_point(&mut rng)).collect();
        let b = p.forward_batch(&x, &[]);
        let g = GramBlocks::assemble(&b, &hyper, &WaveOperator::default());
        assert!(cholesky(&g.kuu, 1e-8).is_ok());
        assert!(min_eigenvalue(&g.kuu) > -1e-8);
    }

    #[test]
    fn diffuse_basics() {
        let freqs = frequency_grid(50.0, 1000.0, 1025);
        assert_eq!(freqs.len(), 1025);
        assert_eq!(freqs[0], 50.0);
        assert_eq!(freqs[1024], 1000.0);
        let x = SpacetimePoint::new([1.0, 2.0, 3.0], 0.01);
        assert!((diffuse_kernel(&x, &x, &freqs, 343.0) - 1.0).abs() < 1e-14);
        let mut y = x;
        y.t += 0.0037;
        let mean_cos: f64 = freqs.iter().map(|f| (2.0 * PI * f * -0.0037).cos()).sum::<f64>() / 1025.0;
        assert!((diffuse_kernel(&x, &y, &freqs, 343.0) - mean_cos).abs() < 1e-14);
    }

    #[test]
    fn diffuse_cross_matches_direct() {
        let k = DiffuseKernel::new(frequency_grid(50.0, 1000.0, 101), 343.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pos: Vec<[f64; 3]> = (0..3).map(|_| random_point(&mut rng).r).collect();
        let pts: Vec<_> = pos
            .iter()
            .flat_map(|r| (0..4).map(move |n| SpacetimePoint::new(*r, n as f64 / 3000.0)))
            .collect();
        let g = k.cross(&pts[..5], &pts);
        for i in 0..5 {
            for j in 0..pts.len() {
                assert!((g[(i, j)] - k.eval(&pts[i], &pts[j])).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn diffuse_gram_psd() {
        let k = DiffuseKernel::new(frequency_grid(50.0, 1000.0, 1025), 343.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<_> = (0..30).map(|_| random_point(&mut rng)).collect();
        let g = k.gram(&pts);
        assert!(min_eigenvalue(&g) > -1e-8);
        assert!(cholesky(&g, 1e-8).is_ok());
    }
}
