//! Experiment configuration, evaluation metrics and the end-to-end runner.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::acoustics::{bandpass_taps, simulate, RoomScenario, SimulatedData};
use crate::error::{Error, Result};
use crate::featurenet::{FirstLayerInit, InputNormalization, SirenConfig, SirenParams};
use crate::gp::{posterior_mean, sample_collocation, CollocationRegion, CollocationSet, Dataset};
use crate::kernels::{frequency_grid, DiffuseKernel, KernelHyper, WaveOperator};
use crate::model::{DiffuseModel, ModelParams};
use crate::trainer::{train_with, BatchStrategy, TrainConfig, TrainProblem, TrainState};

/// Reported instead of `−∞` for an exact reconstruction.
pub const NMSE_FLOOR_DB: f64 = -120.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Diffuse,
    Dk,
    /// Deep kernel with this many collocation points per step.
    Dkpde(usize),
}

impl Method {
    pub fn is_trained(self) -> bool {
        !matches!(self, Method::Diffuse)
    }

    pub fn n_colloc(self) -> usize {
        match self {
            Method::Dkpde(n) => n,
            _ => 0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Diffuse => write!(f, "diffuse"),
            Method::Dk => write!(f, "dk"),
            Method::Dkpde(n) => write!(f, "dkpde{n}"),
        }
    }
}

impl Method {
    /// Parses `diffuse`, `dk`, `dkpde` (uses `default_colloc`) or `dkpdeN`.
    pub fn parse(s: &str, default_colloc: usize) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let m = match t.as_str() {
            "diffuse" => Method::Diffuse,
            "dk" => Method::Dk,
            "dkpde" => Method::Dkpde(default_colloc),
            _ => match t.strip_prefix("dkpde").map(usize::from_str) {
                Some(Ok(n)) => Method::Dkpde(n),
                _ => return Err(Error::InvalidConfig(format!("unknown method '{s}'"))),
            },
        };
        if m == Method::Dkpde(0) {
            return Err(Error::InvalidConfig("dkpde needs at least one collocation point".into()));
        }
        Ok(m)
    }

    pub fn parse_list(s: &str, default_colloc: usize) -> Result<Vec<Self>> {
        let v: Vec<Method> = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| Method::parse(p, default_colloc))
            .collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(Error::InvalidConfig("no method selected".into()));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandFilter {
    /// Zero-phase (symmetric, centre-aligned) windowed-sinc FIR.
    Fir,
    /// Ideal mask on the DFT of each signal.
    FftMask,
}

/// Flat key-value experiment configuration (TOML). Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // protocol
    pub seed: u64,
    pub realizations: usize,
    /// Comma-separated: `diffuse`, `dk`, `dkpde`, `dkpdeN`.
    pub methods: String,
    /// Collocation count used by a bare `dkpde`.
    pub n_colloc: usize,
    pub output: String,
    /// Write 0 for all timings so reports are byte-reproducible.
    pub deterministic: bool,

    // scenario
    pub room: [f64; 3],
    pub absorption: f64,
    pub max_order: usize,
    pub c: f64,
    pub fs: f64,
    pub source: [f64; 3],
    pub array_center: [f64; 3],
    pub array_side: f64,
    pub mics: usize,
    pub batch_len: usize,
    pub batches: usize,
    pub snr_db: f64,
    pub eval_positions: usize,
    pub band_lo: f64,
    pub band_hi: f64,

    // training
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_strategy: BatchStrategy,
    pub train_noise: bool,
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,

    // model
    pub depth: usize,
    pub hidden: usize,
    pub features: usize,
    pub omega0: f64,
    pub c0: f64,
    pub first_layer_init: FirstLayerInit,
    pub ell_init: f64,
    /// `σ_z = sigma_z_rel · σ_κ` at initialization.
    pub sigma_z_rel: f64,

    // baseline
    pub diffuse_freqs: usize,

    // evaluation
    pub bands: Vec<[f64; 2]>,
    pub band_filter: BandFilter,
    pub band_taps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = RoomScenario::default();
        let t = TrainConfig::default();
        let n = SirenConfig::default();
        ExperimentConfig {
            seed: 0,
            realizations: 10,
            methods: "diffuse,dk,dkpde10,dkpde20".into(),
            n_colloc: 20,
            output: "results".into(),
            deterministic: false,
            room: s.room,
            absorption: s.absorption,
            max_order: s.max_order,
            c: s.c,
            fs: s.fs,
            source: s.source,
            array_center: s.array_center,
            array_side: s.array_side,
            mics: s.mics,
            batch_len: s.batch_len,
            batches: s.batches,
            snr_db: s.snr_db,
            eval_positions: s.eval_positions,
            band_lo: s.band_lo,
            band_hi: s.band_hi,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_strategy: t.batch_strategy,
            train_noise: t.train_noise,
            clip_norm: t.clip_norm,
            checkpoint_every: 0,
            depth: n.depth,
            hidden: n.hidden,
            features: n.out_dim,
            omega0: n.omega0,
            c0: n.c0,
            first_layer_init: n.first_layer_init,
            ell_init: 1.0,
            sigma_z_rel: 1e-2,
            diffuse_freqs: 1025,
            bands: vec![[50.0, 200.0], [200.0, 400.0], [400.0, 700.0], [700.0, 1000.0]],
            band_filter: BandFilter::Fir,
            band_taps: 129,
        }
    }
}

impl ExperimentConfig {
    pub fn methods(&self) -> Result<Vec<Method>> {
        Method::parse_list(&self.methods, self.n_colloc)
    }

    /// Scenario of realization `r`.
    pub fn scenario(&self, r: usize) -> RoomScenario {
        RoomScenario {
            room: self.room,
            absorption: self.absorption,
            max_order: self.max_order,
            c: self.c,
            fs: self.fs,
            source: self.source,
            array_center: self.array_center,
            array_side: self.array_side,
            mics: self.mics,
            batch_len: self.batch_len,
            batches: self.batches,
            snr_db: self.snr_db,
            eval_positions: self.eval_positions,
            band_lo: self.band_lo,
            band_hi: self.band_hi,
            seed: realization_seed(self.seed, r, 0),
        }
    }

    pub fn train_config(&self, method: Method, r: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            n_colloc: method.n_colloc(),
            batch_strategy: self.batch_strategy,
            seed: realization_seed(self.seed, r, 2),
            train_noise: self.train_noise,
            clip_norm: self.clip_norm,
        }
    }

    pub fn siren_config(&self) -> SirenConfig {
        SirenConfig {
            depth: self.depth,
            hidden: self.hidden,
            out_dim: self.features,
            omega0: self.omega0,
            c0: self.c0,
            first_layer_init: self.first_layer_init,
            normalization: InputNormalization::for_region(
                self.array_center,
                self.array_side / 2.0,
                (self.batch_len as f64 - 1.0) / self.fs,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(Error::InvalidConfig("realizations must be >= 1".into()));
        }
        self.methods()?;
        self.scenario(0).validate()?;
        self.train_config(Method::Dk, 0).validate()?;
        self.siren_config().validate()?;
        if !(self.ell_init > 0.0) || !(self.sigma_z_rel > 0.0) {
            return Err(Error::InvalidConfig("ell_init and sigma_z_rel must be positive".into()));
        }
        if self.diffuse_freqs == 0 {
            return Err(Error::InvalidConfig("diffuse_freqs must be positive".into()));
        }
        for b in &self.bands {
            if !(b[0] < b[1]) || b[0] < 0.0 || b[1] > self.fs / 2.0 {
                return Err(Error::InvalidConfig(format!("invalid band [{}, {}]", b[0], b[1])));
            }
        }
        if self.band_filter == BandFilter::Fir && self.band_taps.is_multiple_of(2) {
            return Err(Error::InvalidConfig("band_taps must be odd".into()));
        }
        Ok(())
    }

    /// Canonical TOML of the configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a hash of the canonical TOML.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

/// Seed for `(base, realization, purpose)`; purposes: 0 scenario,
/// 1 network init, 2 collocation stream.
pub fn realization_seed(base: u64, r: usize, purpose: u64) -> u64 {
    fnv1a(&[base.to_le_bytes(), (r as u64).to_le_bytes(), purpose.to_le_bytes()].concat())
}

fn parse_error(text: &str, e: toml::de::Error) -> Error {
    let (line, key) = match e.span() {
        Some(span) => {
            let line_no = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let line = text.lines().nth(line_no - 1).unwrap_or("");
            let key = line.split('=').next().map(|k| k.trim().to_string()).filter(|k| !k.is_empty());
            (Some(line_no), key)
        }
        None => (None, None),
    };
    Error::Parse { key, line, message: e.message().to_string() }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Metrics

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

fn ratio_db(err: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::ZeroReference);
    }
    let r = err / reference;
    Ok(if r > 0.0 { (10.0 * r.log10()).max(NMSE_FLOOR_DB) } else { NMSE_FLOOR_DB })
}

/// `10·log10(‖u − û‖²/‖u‖²)` pooled over all samples.
pub fn nmse(u_true: &[f64], u_est: &[f64]) -> Result<f64> {
    check_lengths(u_true, u_est)?;
    let err: f64 = u_true.iter().zip(u_est).map(|(a, b)| (a - b) * (a - b)).sum();
    let reference: f64 = u_true.iter().map(|a| a * a).sum();
    ratio_db(err, reference)
}

/// NMSE over several signals pooled together.
pub fn nmse_signals(u_true: &[Vec<f64>], u_est: &[Vec<f64>]) -> Result<f64> {
    if u_true.len() != u_est.len() {
        return Err(Error::DimensionMismatch { expected: u_true.len(), got: u_est.len() });
    }
    let mut err = 0.0;
    let mut reference = 0.0;
    for (a, b) in u_true.iter().zip(u_est) {
        check_lengths(a, b)?;
        err += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        reference += a.iter().map(|x| x * x).sum::<f64>();
    }
    ratio_db(err, reference)
}

/// Applies a symmetric FIR centred on each sample (zero-padded edges).
pub fn zero_phase_filter(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let mid = (taps.len() / 2) as i64;
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            taps.iter()
                .enumerate()
                .filter_map(|(k, h)| {
                    let j = i + mid - k as i64;
                    (0..n).contains(&j).then(|| h * x[j as usize])
                })
                .sum()
        })
        .collect()
}

/// Keeps DFT bins with `lo ≤ |f| < hi`.
pub fn fft_mask_filter(x: &[f64], fs: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return vec![];
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = k.min(n - k);
        let f = kk as f64 * fs / n as f64;
        if !(f >= lo && f < hi) {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandResult {
    pub lo: f64,
    pub hi: f64,
    pub nmse_db: f64,
    /// `‖u_band‖²`, the band's share of the reference energy.
    pub reference_energy: f64,
}

type BandFn = Box<dyn Fn(&[f64]) -> Vec<f64>>;

/// Per-band NMSE of position-wise signals; both sides get identical filters.
pub fn band_nmse(
    u_true: &[Vec<f64>],
    u_est: &[Vec<f64>],
    bands: &[[f64; 2]],
    fs: f64,
    filter: BandFilter,
    taps: usize,
) -> Result<Vec<BandResult>> {
    if u_true.len() != u_est.len() {
        return Err(Error::DimensionMismatch { expected: u_true.len(), got: u_est.len() });
    }
    bands
        .iter()
        .map(|&[lo, hi]| {
            let apply: BandFn = match filter {
                BandFilter::Fir => {
                    let h = bandpass_taps(lo.max(1e-9), hi, fs, taps);
                    Box::new(move |x| zero_phase_filter(x, &h))
                }
                BandFilter::FftMask => Box::new(move |x| fft_mask_filter(x, fs, lo, hi)),
            };
            let ft: Vec<Vec<f64>> = u_true.iter().map(|s| apply(s)).collect();
            let fe: Vec<Vec<f64>> = u_est.iter().map(|s| apply(s)).collect();
            let reference_energy = ft.iter().flatten().map(|v| v * v).sum();
            Ok(BandResult { lo, hi, nmse_db: nmse_signals(&ft, &fe)?, reference_energy })
        })
        .collect()
}

fn split_positions(y: &[f64], n: usize) -> Vec<Vec<f64>> {
    y.chunks(n).map(<[f64]>::to_vec).collect()
}

// ---------------------------------------------------------------------------
// Pipeline

/// Initial deep-kernel model for one realization.
pub fn init_model(cfg: &ExperimentConfig, data: &SimulatedData, r: usize) -> Result<ModelParams> {
    let net = SirenParams::init(cfg.siren_config(), realization_seed(cfg.seed, r, 1))?;
    let y: Vec<f64> = data.train_batches().iter().flat_map(|d| d.y.clone()).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let std = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64).sqrt();
    let sigma_kappa = if std > 0.0 { std } else { 1.0 };
    let hyper = KernelHyper::new(sigma_kappa, cfg.ell_init)?;
    ModelParams::new(net, hyper, data.noise_std, cfg.sigma_z_rel * sigma_kappa, WaveOperator::new(cfg.c))
}

/// Small problem for a finite-difference gradient check: a `depth`-layer,
/// width-`width` network initialized as in [`init_model`], `n_meas`
/// measurements spread over the first training batch and `n_colloc`
/// collocation points.
pub fn gradcheck_instance(
    cfg: &ExperimentConfig,
    data: &SimulatedData,
    depth: usize,
    width: usize,
    n_meas: usize,
    n_colloc: usize,
) -> Result<(ModelParams, Dataset, CollocationSet)> {
    let small = ExperimentConfig { depth, hidden: width, features: width, ..cfg.clone() };
    let full = init_model(&small, data, 0)?;
    let batch = &data.train_batches()[0];
    if n_meas == 0 || n_meas > batch.len() {
        return Err(Error::InvalidConfig(format!("need 1..={} measurements", batch.len())));
    }
    let idx: Vec<usize> = (0..n_meas).map(|k| k * batch.len() / n_meas).collect();
    let subset = Dataset::new(idx.iter().map(|&i| batch.x[i]).collect(), idx.iter().map(|&i| batch.y[i]).collect())?;
    let colloc = sample_collocation(&collocation_region(cfg), n_colloc, realization_seed(cfg.seed, 0, 2), 0);
    Ok((full, subset, colloc))
}

pub fn collocation_region(cfg: &ExperimentConfig) -> CollocationRegion {
    CollocationRegion::cube(cfg.array_center, cfg.array_side, 0.0, (cfg.batch_len as f64 - 1.0) / cfg.fs)
}

/// Trains the deep kernel of one realization. `on_step` sees every step.
pub fn train_realization<F>(
    cfg: &ExperimentConfig,
    data: &SimulatedData,
    method: Method,
    r: usize,
    on_step: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    let model = init_model(cfg, data, r)?;
    let batches = data.train_batches();
    let problem = TrainProblem { batches: &batches, region: collocation_region(cfg) };
    train_with(model, &problem, &cfg.train_config(method, r), on_step)
}

pub fn diffuse_model(cfg: &ExperimentConfig, data: &SimulatedData) -> DiffuseModel {
    let y = data.eval_conditioning().y;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64;
    let freqs = frequency_grid(cfg.band_lo, cfg.band_hi, cfg.diffuse_freqs);
    DiffuseModel { kernel: DiffuseKernel::new(freqs, cfg.c, if var > 0.0 { var } else { 1.0 }), sigma: data.noise_std }
}

/// Full-band and per-band NMSE of a GP model on the held-out batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub nmse_db: f64,
    pub bands: Vec<BandResult>,
}

pub fn evaluate<M: crate::gp::CovarianceModel>(
    cfg: &ExperimentConfig,
    model: &M,
    data: &SimulatedData,
) -> Result<Evaluation> {
    let cond: Dataset = data.eval_conditioning();
    let truth = data.eval_truth();
    let pred = posterior_mean(model, &cond, &truth.x)?;
    let n = cfg.batch_len;
    let ut = split_positions(&truth.y, n);
    let ue = split_positions(pred.as_slice(), n);
    Ok(Evaluation {
        nmse_db: nmse_signals(&ut, &ue)?,
        bands: band_nmse(&ut, &ue, &cfg.bands, cfg.fs, cfg.band_filter, cfg.band_taps)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub realization: usize,
    pub method: Method,
    /// `None` for the full-band row.
    pub band: Option<[f64; 2]>,
    pub nmse_db: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: u64,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Mean over realizations of the full-band NMSE of `method`.
    pub fn mean_nmse(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> =
            self.rows.iter().filter(|r| r.method == method && r.band.is_none()).map(|r| r.nmse_db).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn full_band(&self, method: Method) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method && r.band.is_none()).map(|r| r.nmse_db).collect()
    }

    pub fn write_rows_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "realization,method,band_lo,band_hi,nmse_db,seconds")?;
        for r in &self.rows {
            let (lo, hi) = match r.band {
                Some([lo, hi]) => (lo.to_string(), hi.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(out, "{},{},{},{},{:.6},{:.3}", r.realization, r.method, lo, hi, r.nmse_db, r.seconds)?;
        }
        Ok(())
    }

    /// Mean per (method, band) over realizations, rows in first-seen order.
    pub fn write_aggregate_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,band_lo,band_hi,mean_nmse_db,realizations")?;
        let mut keys: Vec<(Method, Option<[u64; 2]>)> = Vec::new();
        for r in &self.rows {
            let k = (r.method, r.band.map(|b| b.map(f64::to_bits)));
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (m, b) in keys {
            let v: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.method == m && r.band.map(|b| b.map(f64::to_bits)) == b)
                .map(|r| r.nmse_db)
                .collect();
            let (lo, hi) = match b {
                Some([lo, hi]) => (f64::from_bits(lo).to_string(), f64::from_bits(hi).to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(out, "{m},{lo},{hi},{:.6},{}", v.iter().sum::<f64>() / v.len() as f64, v.len())?;
        }
        Ok(())
    }
}

/// What [`run_with`] reports back while working.
pub enum Progress<'a> {
    Simulated { realization: usize },
    Step { realization: usize, method: Method, state: &'a TrainState },
    Evaluated { realization: usize, method: Method, nmse_db: f64 },
}

/// Runs every realization and method. With `out` set, writes
/// `results.csv`, `summary.csv`, `report.txt`, the configuration, and one
/// loss curve and checkpoint per trained model.
pub fn run_with<F>(cfg: &ExperimentConfig, out: Option<&Path>, mut progress: F) -> Result<EvalReport>
where
    F: FnMut(Progress<'_>),
{
    cfg.validate()?;
    let methods = cfg.methods()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::new();
    for r in 0..cfg.realizations {
        let at = |e: Error| Error::AtRealization { realization: r, source: Box::new(e) };
        let data = simulate(&cfg.scenario(r)).map_err(at)?;
        progress(Progress::Simulated { realization: r });
        for &method in &methods {
            let start = Instant::now();
            let eval = if method.is_trained() {
                let ckpt_path = out.map(|d| d.join(format!("model_r{r}_{method}.ckpt")));
                let every = cfg.checkpoint_every;
                let state = train_realization(cfg, &data, method, r, |s| {
                    progress(Progress::Step { realization: r, method, state: s });
                    if let (Some(p), true) = (&ckpt_path, every > 0 && s.step % every.max(1) == 0) {
                        crate::checkpoint::save(p, s)?;
                    }
                    Ok(())
                })
                .map_err(at)?;
                if let Some(dir) = out {
                    let mut st = state.clone();
                    if cfg.deterministic {
                        st.wall_seconds.clear();
                    }
                    let mut buf = Vec::new();
                    st.write_loss_csv(&mut buf)?;
                    std::fs::write(dir.join(format!("loss_r{r}_{method}.csv")), buf)?;
                    crate::checkpoint::save(&dir.join(format!("model_r{r}_{method}.ckpt")), &state)?;
                }
                evaluate(cfg, &state.params, &data).map_err(at)?
            } else {
                evaluate(cfg, &diffuse_model(cfg, &data), &data).map_err(at)?
            };
            let seconds = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
            progress(Progress::Evaluated { realization: r, method, nmse_db: eval.nmse_db });
            rows.push(ReportRow { realization: r, method, band: None, nmse_db: eval.nmse_db, seconds });
            for b in &eval.bands {
                rows.push(ReportRow { realization: r, method, band: Some([b.lo, b.hi]), nmse_db: b.nmse_db, seconds });
            }
        }
    }
    let report = EvalReport { config_hash: cfg.hash(), rows };
    if let Some(dir) = out {
        write_outputs(cfg, &report, dir)?;
    }
    Ok(report)
}

pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<EvalReport> {
    run_with(cfg, out, |_| {})
}

fn write_outputs(cfg: &ExperimentConfig, report: &EvalReport, dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    report.write_rows_csv(&mut buf)?;
    std::fs::write(dir.join("results.csv"), buf)?;
    let mut buf = Vec::new();
    report.write_aggregate_csv(&mut buf)?;
    std::fs::write(dir.join("summary.csv"), buf)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut txt = String::new();
    txt.push_str(&format!("config hash: {:016x}\n", report.config_hash));
    txt.push_str("NMSE: one pooled ratio over all evaluation positions and samples per realization, in dB, then the mean over realizations.\n");
    txt.push_str("Evaluation: GP posterior mean given the noisy microphone signals of a held-out batch, compared with clean signals at the evaluation positions.\n");
    txt.push_str(&format!(
        "Bands: {:?} Hz, {} filters.\n",
        cfg.bands,
        match cfg.band_filter {
            BandFilter::Fir => format!("zero-phase {}-tap FIR", cfg.band_taps),
            BandFilter::FftMask => "ideal DFT-mask".to_string(),
        }
    ));
    txt.push_str(&format!(
        "Diffuse baseline: time-domain average of sinc(2πf|Δr|/c)·cos(2πfΔt) over {} frequencies in [{}, {}] Hz, scaled by the empirical variance of the conditioning data.\n",
        cfg.diffuse_freqs, cfg.band_lo, cfg.band_hi
    ));
    txt.push_str("Signals are scaled to unit RMS over all microphone samples before measurement noise is added.\n");
    if let Some(c) = cfg.clip_norm {
        txt.push_str(&format!("Gradient-norm clipping at {c} was enabled.\n"));
    }
    txt.push_str("\nmethod  mean full-band NMSE [dB]\n");
    for m in cfg.methods()? {
        if let Some(v) = report.mean_nmse(m) {
            txt.push_str(&format!("{:<8}{:>8.2}\n", m.to_string(), v));
        }
    }
    std::fs::write(dir.join("report.txt"), txt)?;
    Ok(())
}

/// Default output directory of a configuration.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.mics, 30);
        assert_eq!(c.array_side, 0.5);
        assert_eq!(c.fs, 3000.0);
        assert_eq!(c.snr_db, 40.0);
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.epochs, 20000);
        assert_eq!(c.batch_len, 50);
        assert_eq!(c.max_order, 26);
        assert_eq!(c.absorption, 0.55);
        assert_eq!(c.diffuse_freqs, 1025);
        assert_eq!(c.array_center, [4.0, 3.0, 1.5]);
    }

    #[test]
    fn overrides_and_errors() {
        let c = parse_config_str("mics = 10\nmethods = \"dk\"\n").unwrap();
        assert_eq!(c.scenario(0).mics, 10);
        match parse_config_str("seed = 1\nmics = \"ten\"\n") {
            Err(Error::Parse { key, line, .. }) => {
                assert_eq!(key.as_deref(), Some("mics"));
                assert_eq!(line, Some(2));
            }
            other => panic!("{other:?}"),
        }
        match parse_config_str("bogus = 3\n") {
            Err(Error::Parse { key, .. }) => assert_eq!(key.as_deref(), Some("bogus")),
            other => panic!("{other:?}"),
        }
        assert!(parse_config_str("methods = \"dkpde0\"").is_err());
        assert!(parse_config_str("realizations = 0").is_err());
    }

    #[test]
    fn config_roundtrip() {
        let c = ExperimentConfig { clip_norm: Some(1.0), ..ExperimentConfig::default() };
        assert_eq!(parse_config_str(&c.to_toml()).unwrap(), c);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn method_names() {
        assert_eq!(Method::parse_list("diffuse, DK,dkpde,dkpde10", 20).unwrap(), vec![
            Method::Diffuse,
            Method::Dk,
            Method::Dkpde(20),
            Method::Dkpde(10)
        ]);
        assert_eq!(Method::Dkpde(20).to_string(), "dkpde20");
        assert!(Method::parse("gp", 1).is_err());
    }

    #[test]
    fn nmse_examples() {
        let u = [1.0, -2.0, 0.5];
        assert_eq!(nmse(&u, &u).unwrap(), NMSE_FLOOR_DB);
        assert!(nmse(&u, &[0.0; 3]).unwrap().abs() < 1e-12);
        let twice: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        assert!(nmse(&u, &twice).unwrap().abs() < 1e-12);
        assert!(matches!(nmse(&[0.0; 3], &u), Err(Error::ZeroReference)));
        assert!(nmse(&u, &u[..2]).is_err());
    }

    fn tone_mix(n: usize, fs: f64, freqs: &[f64]) -> Vec<f64> {
        (0..n)
            .map(|i| freqs.iter().map(|f| (2.0 * std::f64::consts::PI * f * i as f64 / fs + f).sin()).sum())
            .collect()
    }

    #[test]
    fn band_examples() {
        let fs = 3000.0;
        let u: Vec<Vec<f64>> = (0..3).map(|k| tone_mix(300, fs, &[100.0 + k as f64, 300.0, 550.0, 800.0])).collect();
        let bands = [[50.0, 200.0], [200.0, 400.0], [400.0, 700.0], [700.0, 1000.0]];
        for filter in [BandFilter::Fir, BandFilter::FftMask] {
            let r = band_nmse(&u, &u, &bands, fs, filter, 129).unwrap();
            assert!(r.iter().all(|b| b.nmse_db == NMSE_FLOOR_DB));
            let edges: Vec<[f64; 2]> = r.iter().map(|b| [b.lo, b.hi]).collect();
            assert_eq!(edges, bands.to_vec());
        }
        // keep only the 200–400 band in the estimate
        let est: Vec<Vec<f64>> = u.iter().map(|s| fft_mask_filter(s, fs, 200.0, 400.0)).collect();
        let r = band_nmse(&u, &est, &bands, fs, BandFilter::FftMask, 0).unwrap();
        assert!(r[1].nmse_db < -100.0);
        for b in [0, 2, 3] {
            assert!(r[b].nmse_db.abs() < 1e-6, "{:?}", r[b]);
        }
    }

    #[test]
    fn partition_bands_combine_to_full_band() {
        let fs = 3000.0;
        let u: Vec<Vec<f64>> = (0..4).map(|k| tone_mix(64, fs, &[130.0 + 10.0 * k as f64, 420.0, 900.0, 1300.0])).collect();
        let e: Vec<Vec<f64>> =
            u.iter().enumerate().map(|(k, s)| s.iter().map(|v| 0.7 * v + 0.1 * (k as f64 + v).sin()).collect()).collect();
        let bands = [[0.0, 200.0], [200.0, 600.0], [600.0, 1100.0], [1100.0, 1500.1]];
        let r = band_nmse(&u, &e, &bands, fs, BandFilter::FftMask, 0).unwrap();
        let total: f64 = r.iter().map(|b| b.reference_energy).sum();
        let combined: f64 = r.iter().map(|b| b.reference_energy / total * 10f64.powf(b.nmse_db / 10.0)).sum();
        let full = nmse_signals(&u, &e).unwrap();
        assert!((10.0 * combined.log10() - full).abs() < 1e-9);
    }

    #[test]
    fn zero_phase_filter_is_centred() {
        let mut x = vec![0.0; 21];
        x[10] = 1.0;
        let h = [0.25, 0.5, 0.25];
        let y = zero_phase_filter(&x, &h);
        assert_eq!(&y[9..12], &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn seeds_differ_by_purpose_and_realization() {
        let a = realization_seed(1, 0, 0);
        assert_ne!(a, realization_seed(1, 0, 1));
        assert_ne!(a, realization_seed(1, 1, 0));
        assert_ne!(a, realization_seed(2, 0, 0));
    }

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            realizations: 1,
            methods: "diffuse,dk,dkpde2".into(),
            mics: 4,
            batch_len: 6,
            batches: 2,
            eval_positions: 3,
            max_order: 4,
            epochs: 3,
            learning_rate: 1e-3,
            depth: 2,
            hidden: 8,
            features: 8,
            diffuse_freqs: 65,
            deterministic: true,
            band_taps: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn gradcheck_instance_passes() {
        let cfg = tiny_cfg();
        let data = simulate(&cfg.scenario(0)).unwrap();
        let (m, d, c) = gradcheck_instance(&cfg, &data, 2, 8, 10, 4).unwrap();
        assert_eq!((d.len(), c.xz.len(), m.net.config.hidden), (10, 4, 8));
        let r = crate::trainer::validate_gradients(&m, &d, &c, 1e-6).unwrap();
        assert!(r.max_rel_err() < 1e-5, "{} {}", r.simple.max_rel_err, r.joint.max_rel_err);
    }

    #[test]
    fn tiny_run_writes_reports() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let report = run(&cfg, Some(dir.path())).unwrap();
        assert_eq!(report.rows.len(), 3 * 5);
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(csv.starts_with("realization,method,band_lo,band_hi,nmse_db,seconds\n0,diffuse,,,"));
        assert!(csv.contains("\n0,dkpde2,50,200,"));
        let again = run(&cfg, None).unwrap();
        assert_eq!(again, report);
        assert!(dir.path().join("model_r0_dk.ckpt").exists());
        assert!(dir.path().join("summary.csv").exists());
    }
}
