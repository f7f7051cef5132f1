//! Sinusoidal (SIREN) feature map `φ: ℝ⁴ → ℝʰ` used to warp spacetime
//! before the squared-exponential kernel.
//!
//! Layer `l < L` computes `sin(ω₀·W_l·h + b_l)`, the last layer
//! `ω₀·W_L·h + b_L`. A fixed affine normalization maps physical
//! `(x, y, z, t)` into roughly `[-1, 1]⁴` before the first layer; the jet
//! channels are derivatives with respect to the *physical* coordinates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Jet2, Scalar};
use crate::error::{Error, Result};
use crate::SpacetimePoint;

pub const INPUT_DIM: usize = 4;

/// Which bound the first layer's uniform initialization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstLayerInit {
    /// `U(−1/L, 1/L)` with `L` the number of layers.
    LayerCount,
    /// `U(−1/n_in, 1/n_in)`, the usual SIREN convention.
    InputDim,
}

/// Per-coordinate affine map `s_i = scale_i·x_i + offset_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputNormalization {
    pub scale: [f64; 4],
    pub offset: [f64; 4],
}

impl InputNormalization {
    pub fn identity() -> Self {
        InputNormalization { scale: [1.0; 4], offset: [0.0; 4] }
    }

    /// `(r − center)/half_extent` in space, `2t/duration − 1` in time.
    pub fn for_region(center: [f64; 3], half_extent: f64, duration: f64) -> Self {
        let s = 1.0 / half_extent;
        InputNormalization {
            scale: [s, s, s, 2.0 / duration],
            offset: [-center[0] * s, -center[1] * s, -center[2] * s, -1.0],
        }
    }

    pub fn apply(&self, x: &SpacetimePoint) -> [f64; 4] {
        let c = x.coords();
        std::array::from_fn(|i| self.scale[i] * c[i] + self.offset[i])
    }
}

impl Default for InputNormalization {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenConfig {
    /// Number of layers `L` (hidden sine layers plus the final affine one).
    pub depth: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub omega0: f64,
    pub c0: f64,
    pub first_layer_init: FirstLayerInit,
    pub normalization: InputNormalization,
}

impl Default for SirenConfig {
    fn default() -> Self {
        SirenConfig {
            depth: 5,
            hidden: 100,
            out_dim: 100,
            omega0: 30.0,
            c0: 6.0,
            first_layer_init: FirstLayerInit::LayerCount,
            normalization: InputNormalization::identity(),
        }
    }
}

impl SirenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::InvalidConfig("hidden and output widths must be positive".into()));
        }
        if !(self.omega0 > 0.0) || !(self.c0 > 0.0) {
            return Err(Error::InvalidConfig("omega0 and c0 must be positive".into()));
        }
        Ok(())
    }

    /// `(rows, cols)` of each weight matrix, first layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let cols = if l == 0 { INPUT_DIM } else { self.hidden };
                let rows = if l + 1 == self.depth { self.out_dim } else { self.hidden };
                (rows, cols)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }

    pub fn first_layer_bound(&self) -> f64 {
        match self.first_layer_init {
            FirstLayerInit::LayerCount => 1.0 / self.depth as f64,
            FirstLayerInit::InputDim => 1.0 / INPUT_DIM as f64,
        }
    }

    /// `√(c₀/(ω₀²·H))`
    pub fn deep_layer_bound(&self) -> f64 {
        (self.c0 / (self.omega0 * self.omega0 * self.hidden as f64)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Network weights and biases together with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct SirenParams {
    pub config: SirenConfig,
    pub layers: Vec<SirenLayer>,
}

/// Generic-scalar copy of one layer, row-major weights.
#[derive(Clone, Debug)]
pub struct GenericLayer<T> {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl SirenParams {
    pub fn zeros(config: SirenConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| SirenLayer { weight: DMatrix::zeros(r, c), bias: DVector::zeros(r) })
            .collect();
        Ok(SirenParams { config, layers })
    }

    /// Uniform initialization, biases zero, deterministic per seed.
    pub fn init(config: SirenConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = p.config.first_layer_bound();
        let deep = p.config.deep_layer_bound();
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let bound = if l == 0 { first } else { deep };
            let (rows, cols) = layer.weight.shape();
            for i in 0..rows {
                for j in 0..cols {
                    layer.weight[(i, j)] = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.config.num_params()
    }

    /// Appends all parameters in layer order (weights row-major, then bias).
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            let (rows, cols) = layer.weight.shape();
            for i in 0..rows {
                for j in 0..cols {
                    out.push(layer.weight[(i, j)]);
                }
            }
            out.extend(layer.bias.iter());
        }
    }

    /// Reads parameters in [`write_flat`](Self::write_flat) order; returns the count consumed.
    pub fn read_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let n = self.num_params();
        if flat.len() < n {
            return Err(Error::DimensionMismatch { expected: n, got: flat.len() });
        }
        let mut k = 0;
        for layer in &mut self.layers {
            let (rows, cols) = layer.weight.shape();
            for i in 0..rows {
                for j in 0..cols {
                    layer.weight[(i, j)] = flat[k];
                    k += 1;
                }
            }
            for b in layer.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
        Ok(k)
    }

    /// Converts parameters (in flat order) into generic layers.
    pub fn generic_layers<T: Scalar>(&self, flat: &[T]) -> Vec<GenericLayer<T>> {
        let mut k = 0;
        self.config
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let weight = flat[k..k + rows * cols].to_vec();
                k += rows * cols;
                let bias = flat[k..k + rows].to_vec();
                k += rows;
                GenericLayer { rows, cols, weight, bias }
            })
            .collect()
    }

    pub fn forward(&self, x: &SpacetimePoint) -> Vec<f64> {
        let b = self.forward_batch(std::slice::from_ref(x), &[]);
        b.values.column(0).iter().copied().collect()
    }

    /// Feature jets along physical coordinate `coord` (0..3 = x, y, z, t).
    pub fn forward_jet(&self, x: &SpacetimePoint, coord: usize) -> Vec<Jet2> {
        assert!(coord < INPUT_DIM, "coordinate index {coord} out of range");
        let b = self.forward_batch(&[], std::slice::from_ref(x));
        (0..self.config.out_dim)
            .map(|a| Jet2::new(b.values[(a, 0)], b.d1[(a, coord)], b.d2[(a, coord)]))
            .collect()
    }

    /// Evaluates the network on `plain` points (values only) followed by
    /// `jet` points (values plus first/second derivatives along each of the
    /// four coordinates). Keeps what the backward pass needs.
    pub fn forward_batch(&self, plain: &[SpacetimePoint], jet: &[SpacetimePoint]) -> FeatureBatch {
        let n_plain = plain.len();
        let n_jet = jet.len();
        let n = n_plain + n_jet;
        let nj = INPUT_DIM * n_jet;
        let omega = self.config.omega0;
        let norm = &self.config.normalization;

        let mut v_in = DMatrix::zeros(INPUT_DIM, n);
        for (c, p) in plain.iter().chain(jet).enumerate() {
            let s = norm.apply(p);
            for i in 0..INPUT_DIM {
                v_in[(i, c)] = s[i];
            }
        }
        let mut d1_in = DMatrix::zeros(INPUT_DIM, nj);
        for p in 0..n_jet {
            for i in 0..INPUT_DIM {
                d1_in[(i, INPUT_DIM * p + i)] = norm.scale[i];
            }
        }
        let mut d2_in = DMatrix::zeros(INPUT_DIM, nj);

        let depth = self.layers.len();
        let mut caches = Vec::with_capacity(depth);
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l + 1 == depth;
            let mut qv = &layer.weight * &v_in;
            for mut col in qv.column_iter_mut() {
                for (q, b) in col.iter_mut().zip(layer.bias.iter()) {
                    *q = omega * *q + b;
                }
            }
            let (q1, q2) = if nj > 0 {
                let mut q1 = &layer.weight * &d1_in;
                q1 *= omega;
                let q2 = if l == 0 {
                    DMatrix::zeros(layer.weight.nrows(), nj)
                } else {
                    let mut q2 = &layer.weight * &d2_in;
                    q2 *= omega;
                    q2
                };
                (q1, q2)
            } else {
                (DMatrix::zeros(layer.weight.nrows(), 0), DMatrix::zeros(layer.weight.nrows(), 0))
            };

            let (v_out, d1_out, d2_out, sin_q, cos_q) = if last {
                (qv.clone(), q1.clone(), q2.clone(), None, None)
            } else {
                let sin_q = qv.map(f64::sin);
                let cos_q = qv.map(f64::cos);
                let mut d1o = q1.clone();
                let mut d2o = q2.clone();
                for p in 0..n_jet {
                    let vc = n_plain + p;
                    for i in 0..INPUT_DIM {
                        let c = INPUT_DIM * p + i;
                        for a in 0..qv.nrows() {
                            let (s, co) = (sin_q[(a, vc)], cos_q[(a, vc)]);
                            let g1 = q1[(a, c)];
                            d1o[(a, c)] = co * g1;
                            d2o[(a, c)] = co * q2[(a, c)] - s * g1 * g1;
                        }
                    }
                }
                (sin_q.clone(), d1o, d2o, Some(sin_q), Some(cos_q))
            };

            caches.push(LayerCache { v_in, d1_in, d2_in, q1, q2, sin_q, cos_q });
            v_in = v_out;
            d1_in = d1_out;
            d2_in = d2_out;
        }

        FeatureBatch { n_plain, n_jet, values: v_in, d1: d1_in, d2: d2_in, caches }
    }

    /// Vector-Jacobian product of [`forward_batch`](Self::forward_batch):
    /// given adjoints of the output value/d1/d2 matrices, returns the
    /// gradient in flat parameter order.
    pub fn backward_batch(&self, batch: &FeatureBatch, adj: &FeatureAdjoint) -> Vec<f64> {
        let omega = self.config.omega0;
        let n_plain = batch.n_plain;
        let n_jet = batch.n_jet;
        let has_jets = n_jet > 0;
        let mut gv = adj.values.clone();
        let mut g1 = adj.d1.clone();
        let mut g2 = adj.d2.clone();
        let depth = self.layers.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(depth);

        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let cache = &batch.caches[l];
            // Turn output adjoints into pre-activation adjoints.
            if let (Some(sin_q), Some(cos_q)) = (&cache.sin_q, &cache.cos_q) {
                let mut qv_bar = gv.component_mul(cos_q);
                if has_jets {
                    let mut q1_bar = g1.clone();
                    let mut q2_bar = g2.clone();
                    for p in 0..n_jet {
                        let vc = n_plain + p;
                        for i in 0..INPUT_DIM {
                            let c = INPUT_DIM * p + i;
                            for a in 0..layer.weight.nrows() {
                                let (s, co) = (sin_q[(a, vc)], cos_q[(a, vc)]);
                                let (o1, o2) = (g1[(a, c)], g2[(a, c)]);
                                let (z1, z2) = (cache.q1[(a, c)], cache.q2[(a, c)]);
                                q1_bar[(a, c)] = o1 * co - 2.0 * o2 * s * z1;
                                q2_bar[(a, c)] = o2 * co;
                                qv_bar[(a, vc)] += -o1 * s * z1 + o2 * (-s * z2 - co * z1 * z1);
                            }
                        }
                    }
                    g1 = q1_bar;
                    g2 = q2_bar;
                }
                gv = qv_bar;
            }
            // gv/g1/g2 now hold pre-activation adjoints.
            let mut w_bar = &gv * cache.v_in.transpose();
            if has_jets {
                w_bar += &g1 * cache.d1_in.transpose();
                if l > 0 {
                    w_bar += &g2 * cache.d2_in.transpose();
                }
            }
            w_bar *= omega;
            let b_bar = DVector::from_iterator(gv.nrows(), gv.row_iter().map(|r| r.sum()));
            grads.push((w_bar, b_bar));
            if l > 0 {
                let wt = layer.weight.transpose() * omega;
                gv = &wt * &gv;
                if has_jets {
                    g1 = &wt * &g1;
                    g2 = &wt * &g2;
                }
            }
        }

        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in grads.iter().rev() {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    flat.push(w[(i, j)]);
                }
            }
            flat.extend(b.iter());
        }
        flat
    }
}

struct LayerCache {
    v_in: DMatrix<f64>,
    d1_in: DMatrix<f64>,
    d2_in: DMatrix<f64>,
    q1: DMatrix<f64>,
    q2: DMatrix<f64>,
    sin_q: Option<DMatrix<f64>>,
    cos_q: Option<DMatrix<f64>>,
}

/// Output of [`SirenParams::forward_batch`].
///
/// `values` is `h × (n_plain + n_jet)`, plain points first. `d1`/`d2` are
/// `h × 4·n_jet`; column `4p + i` belongs to jet point `p` and coordinate `i`.
pub struct FeatureBatch {
    pub n_plain: usize,
    pub n_jet: usize,
    pub values: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    caches: Vec<LayerCache>,
}

impl FeatureBatch {
    pub fn out_dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn zero_adjoint(&self) -> FeatureAdjoint {
        FeatureAdjoint {
            values: DMatrix::zeros(self.values.nrows(), self.values.ncols()),
            d1: DMatrix::zeros(self.d1.nrows(), self.d1.ncols()),
            d2: DMatrix::zeros(self.d2.nrows(), self.d2.ncols()),
        }
    }
}

/// Adjoints with the same layout as a [`FeatureBatch`]'s outputs.
#[derive(Clone, Debug)]
pub struct FeatureAdjoint {
    pub values: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
}

/// Reference evaluation over any [`Scalar`]: features and their jets along
/// all four coordinates, one point at a time, with plain per-element loops.
pub fn jets_generic<T: Scalar>(
    config: &SirenConfig,
    layers: &[GenericLayer<T>],
    x: &SpacetimePoint,
) -> [Vec<Jet2<T>>; 4] {
    let s = config.normalization.apply(x);
    std::array::from_fn(|coord| {
        let mut h: Vec<Jet2<T>> = (0..INPUT_DIM)
            .map(|i| {
                let d1 = if i == coord { config.normalization.scale[i] } else { 0.0 };
                Jet2::new(T::cst(s[i]), T::cst(d1), T::zero())
            })
            .collect();
        for (l, layer) in layers.iter().enumerate() {
            let last = l + 1 == layers.len();
            h = (0..layer.rows)
                .map(|a| {
                    let mut acc = Jet2::constant(T::zero());
                    for (j, hj) in h.iter().enumerate() {
                        let w = layer.weight[a * layer.cols + j];
                        acc = acc + Jet2::new(hj.v * w, hj.d1 * w, hj.d2 * w);
                    }
                    let q = acc.scale(config.omega0).add_const(layer.bias[a]);
                    if last {
                        q
                    } else {
                        q.sin()
                    }
                })
                .collect();
        }
        h
    })
}
