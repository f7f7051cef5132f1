//! Image-source room simulation of the microphone-array experiment.
//!
//! A shoebox room with uniform wall absorption is excited by band-limited
//! white noise. Microphone signals are the source convolved with image-source
//! impulse responses, scaled to unit RMS and corrupted by white noise at a
//! configured SNR. Evaluation positions get clean signals.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Dataset;
use crate::SpacetimePoint;

/// Half-width of the fractional-delay kernel; it has `2·FD_HALF + 1` taps.
pub const FD_HALF: i64 = 40;
/// Taps of the source bandpass filter.
pub const SOURCE_TAPS: usize = 257;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomScenario {
    pub room: [f64; 3],
    /// Energy absorption coefficient shared by all six walls.
    pub absorption: f64,
    pub max_order: usize,
    pub c: f64,
    pub fs: f64,
    pub source: [f64; 3],
    pub array_center: [f64; 3],
    pub array_side: f64,
    pub mics: usize,
    /// Samples per batch `N`.
    pub batch_len: usize,
    /// Training batches; one further batch is held out for evaluation.
    pub batches: usize,
    pub snr_db: f64,
    pub eval_positions: usize,
    pub band_lo: f64,
    pub band_hi: f64,
    pub seed: u64,
}

impl Default for RoomScenario {
    fn default() -> Self {
        RoomScenario {
            room: [6.0, 5.0, 3.0],
            absorption: 0.55,
            max_order: 26,
            c: 343.0,
            fs: 3000.0,
            source: [1.0, 2.0, 1.5],
            array_center: [4.0, 3.0, 1.5],
            array_side: 0.5,
            mics: 30,
            batch_len: 50,
            batches: 10,
            snr_db: 40.0,
            eval_positions: 100,
            band_lo: 50.0,
            band_hi: 1000.0,
            seed: 0,
        }
    }
}

fn inside(room: &[f64; 3], p: &[f64; 3]) -> bool {
    (0..3).all(|i| p[i] > 0.0 && p[i] < room[i])
}

impl RoomScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.room.iter().any(|d| !(*d > 0.0)) {
            return bad(format!("room dimensions must be positive: {:?}", self.room));
        }
        if !(0.0..=1.0).contains(&self.absorption) {
            return bad(format!("absorption must lie in [0, 1], got {}", self.absorption));
        }
        if !(self.c > 0.0) || !(self.fs > 0.0) {
            return bad("c and fs must be positive".into());
        }
        if !(self.band_lo > 0.0 && self.band_lo < self.band_hi) {
            return bad(format!("invalid source band [{}, {}]", self.band_lo, self.band_hi));
        }
        if !(self.fs > 2.0 * self.band_hi) {
            return bad(format!("fs = {} does not exceed twice the band top {}", self.fs, self.band_hi));
        }
        if self.mics == 0 || self.batch_len == 0 || self.batches == 0 || self.eval_positions == 0 {
            return bad("mics, batch_len, batches and eval_positions must be positive".into());
        }
        if !(self.array_side > 0.0) {
            return bad("array_side must be positive".into());
        }
        if !inside(&self.room, &self.source) {
            return Err(Error::Placement(format!("source {:?} is not inside the room", self.source)));
        }
        Ok(())
    }

    /// Batch duration `(N − 1)/fs` covered by sample times `0, 1/fs, …`.
    pub fn batch_span(&self) -> f64 {
        (self.batch_len as f64 - 1.0) / self.fs
    }

    fn beta(&self) -> f64 {
        (1.0 - self.absorption).sqrt()
    }
}

/// One image source: position and amplitude `β^order/(4πd)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSource {
    pub position: [f64; 3],
    pub order: usize,
    pub amplitude: f64,
}

/// Image coordinate along one axis for index `k`: even `k` translate the
/// source, odd `k` mirror it. `|k|` reflections.
fn image_coord(k: i64, len: f64, xs: f64) -> f64 {
    if k.rem_euclid(2) == 0 {
        k as f64 * len + xs
    } else {
        (k + 1) as f64 * len - xs
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// All images with total reflection count `≤ max_order`, in a fixed order.
pub fn image_sources(s: &RoomScenario, mic: &[f64; 3]) -> Vec<ImageSource> {
    let n = s.max_order as i64;
    let beta = s.beta();
    let mut out = Vec::new();
    for kx in -n..=n {
        let rx = n - kx.abs();
        for ky in -rx..=rx {
            let rz = rx - ky.abs();
            for kz in -rz..=rz {
                let order = (kx.abs() + ky.abs() + kz.abs()) as usize;
                let position = [
                    image_coord(kx, s.room[0], s.source[0]),
                    image_coord(ky, s.room[1], s.source[1]),
                    image_coord(kz, s.room[2], s.source[2]),
                ];
                let d = distance(&position, mic);
                let amplitude = if order == 0 { 1.0 } else { beta.powi(order as i32) } / (4.0 * PI * d);
                out.push(ImageSource { position, order, amplitude });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseResponse {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl ImpulseResponse {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Hann-windowed sinc tap for offset `x = n − τ`.
fn fd_tap(x: f64) -> f64 {
    let w = 0.5 * (1.0 + (PI * x / (FD_HALF + 1) as f64).cos());
    let s = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    w * s
}

/// Sums fractional-delay impulses of every image. Taps that would land
/// before sample 0 are dropped (they sit at least `d/c·fs − 40` samples
/// away from the peak, where the windowed sinc is negligible).
pub fn render_rir(s: &RoomScenario, mic: &[f64; 3]) -> ImpulseResponse {
    let images = image_sources(s, mic);
    let max_d = images.iter().map(|im| distance(&im.position, mic)).fold(0.0, f64::max);
    let len = (max_d / s.c * s.fs).ceil() as usize + FD_HALF as usize + 2;
    let mut h = vec![0.0; len];
    for im in &images {
        if im.amplitude == 0.0 {
            continue;
        }
        let tau = distance(&im.position, mic) / s.c * s.fs;
        let n0 = tau.round() as i64;
        for n in (n0 - FD_HALF).max(0)..=(n0 + FD_HALF) {
            h[n as usize] += im.amplitude * fd_tap(n as f64 - tau);
        }
    }
    ImpulseResponse { samples: h, fs: s.fs }
}

/// Reverberation time from the Schroeder backward integral: a line fit on
/// the −5…−35 dB range of the energy decay curve (−5…−25 dB if the curve
/// never reaches −35 dB), extrapolated to 60 dB of decay.
pub fn schroeder_t60(rir: &ImpulseResponse) -> Option<f64> {
    let mut edc = vec![0.0; rir.len()];
    let mut acc = 0.0;
    for (i, v) in rir.samples.iter().enumerate().rev() {
        acc += v * v;
        edc[i] = acc;
    }
    if !(acc > 0.0) {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / acc).log10()).collect();
    let lowest = db.iter().copied().fold(0.0, f64::min);
    let end = if lowest <= -35.0 { -35.0 } else if lowest <= -25.0 { -25.0 } else { return None };
    let pts: Vec<(f64, f64)> = db
        .iter()
        .enumerate()
        .filter(|(_, d)| **d <= -5.0 && **d >= end)
        .map(|(i, d)| (i as f64 / rir.fs, *d))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Linear-phase bandpass: difference of two Hamming-windowed lowpass sincs.
pub fn bandpass_taps(f_lo: f64, f_hi: f64, fs: f64, taps: usize) -> Vec<f64> {
    let mid = (taps - 1) as f64 / 2.0;
    let lp = |fc: f64, x: f64| {
        let a = 2.0 * fc / fs;
        if x == 0.0 {
            a
        } else {
            (PI * a * x).sin() / (PI * x)
        }
    };
    (0..taps)
        .map(|k| {
            let x = k as f64 - mid;
            let w = 0.54 - 0.46 * (2.0 * PI * k as f64 / (taps - 1) as f64).cos();
            (lp(f_hi, x) - lp(f_lo, x)) * w
        })
        .collect()
}

/// `n` samples of unit-variance white Gaussian noise through the source
/// bandpass. `n + taps − 1` noise samples are drawn and only fully
/// overlapped outputs kept, which also removes the filter's group delay.
pub fn synth_source(s: &RoomScenario, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let h = bandpass_taps(s.band_lo, s.band_hi, s.fs, SOURCE_TAPS);
    let noise: Vec<f64> = (0..n + SOURCE_TAPS - 1).map(|_| rng.sample(StandardNormal)).collect();
    (0..n)
        .map(|i| h.iter().enumerate().map(|(k, hk)| hk * noise[i + SOURCE_TAPS - 1 - k]).sum())
        .collect()
}

/// Output samples `start..start + len` of `source * rir`.
fn convolve_window(source: &[f64], rir: &ImpulseResponse, start: usize, len: usize) -> Vec<f64> {
    (start..start + len)
        .map(|n| {
            let kmax = rir.len().min(n + 1);
            (0..kmax).map(|k| rir.samples[k] * source[n - k]).sum()
        })
        .collect()
}

/// Uniform positions in the array cube.
pub fn sample_positions(s: &RoomScenario, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    let h = s.array_side / 2.0;
    (0..n)
        .map(|_| {
            let p = s.array_center.map(|c| c + rng.random_range(-h..h));
            if inside(&s.room, &p) {
                Ok(p)
            } else {
                Err(Error::Placement(format!("position {p:?} falls outside the room {:?}", s.room)))
            }
        })
        .collect()
}

/// Everything one realization needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedData {
    pub scenario: RoomScenario,
    pub mic_positions: Vec<[f64; 3]>,
    pub eval_positions: Vec<[f64; 3]>,
    /// Noisy microphone signals, `[batch][mic][sample]`; the last batch is
    /// held out for evaluation.
    pub mic_signals: Vec<Vec<Vec<f64>>>,
    /// Clean signals at the evaluation positions during the held-out batch.
    pub eval_signals: Vec<Vec<f64>>,
    /// Noise standard deviation in the normalized units of the signals.
    pub noise_std: f64,
    /// Factor applied to the raw pressure to reach unit RMS.
    pub scale: f64,
    pub mic_rirs: Vec<ImpulseResponse>,
    pub eval_rirs: Vec<ImpulseResponse>,
}

/// Stream ids of the scenario RNG.
const STREAM_MICS: u64 = 0;
const STREAM_EVAL: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Points `(r_m, n/fs)` for every position and sample, position-major.
pub fn stacked_points(positions: &[[f64; 3]], n: usize, fs: f64) -> Vec<SpacetimePoint> {
    positions
        .iter()
        .flat_map(|r| (0..n).map(move |k| SpacetimePoint::new(*r, k as f64 / fs)))
        .collect()
}

impl SimulatedData {
    fn batch_dataset(&self, b: usize) -> Dataset {
        let x = stacked_points(&self.mic_positions, self.scenario.batch_len, self.scenario.fs);
        let y = self.mic_signals[b].iter().flatten().copied().collect();
        Dataset { x, y }
    }

    pub fn train_batches(&self) -> Vec<Dataset> {
        (0..self.scenario.batches).map(|b| self.batch_dataset(b)).collect()
    }

    /// Noisy microphone data of the held-out batch.
    pub fn eval_conditioning(&self) -> Dataset {
        self.batch_dataset(self.scenario.batches)
    }

    /// Clean field at the evaluation positions of the held-out batch.
    pub fn eval_truth(&self) -> Dataset {
        let x = stacked_points(&self.eval_positions, self.scenario.batch_len, self.scenario.fs);
        Dataset { x, y: self.eval_signals.iter().flatten().copied().collect() }
    }

    /// Per-sample SNR actually realized on the microphone signals.
    pub fn measured_snr_db(&self, clean: &[Vec<Vec<f64>>]) -> f64 {
        let mut ps = 0.0;
        let mut pn = 0.0;
        for (bn, bc) in self.mic_signals.iter().zip(clean) {
            for (mn, mc) in bn.iter().zip(bc) {
                for (n, c) in mn.iter().zip(mc) {
                    ps += c * c;
                    pn += (n - c) * (n - c);
                }
            }
        }
        10.0 * (ps / pn).log10()
    }
}

/// Simulates with a source drawn from the scenario seed.
pub fn simulate(s: &RoomScenario) -> Result<SimulatedData> {
    simulate_with(s, None).map(|(d, _)| d)
}

/// Like [`simulate`], also returning the clean (pre-noise, normalized)
/// microphone signals. `source` overrides the synthesized excitation; it
/// must hold at least [`source_len`] samples.
pub fn simulate_with(s: &RoomScenario, source: Option<&[f64]>) -> Result<(SimulatedData, Vec<Vec<Vec<f64>>>)> {
    s.validate()?;
    let mic_positions = sample_positions(s, s.mics, &mut rng_stream(s.seed, STREAM_MICS))?;
    let eval_positions = sample_positions(s, s.eval_positions, &mut rng_stream(s.seed, STREAM_EVAL))?;
    let mic_rirs: Vec<_> = mic_positions.iter().map(|p| render_rir(s, p)).collect();
    let eval_rirs: Vec<_> = eval_positions.iter().map(|p| render_rir(s, p)).collect();
    let warmup = mic_rirs.iter().chain(&eval_rirs).map(ImpulseResponse::len).max().unwrap_or(0);
    let total = (s.batches + 1) * s.batch_len;
    let synthesized;
    let src = match source {
        Some(src) => {
            if src.len() < warmup + total {
                return Err(Error::InvalidConfig(format!(
                    "source has {} samples, need {}",
                    src.len(),
                    warmup + total
                )));
            }
            src
        }
        None => {
            synthesized = synth_source(s, warmup + total, &mut rng_stream(s.seed, STREAM_SOURCE));
            &synthesized
        }
    };
    let raw_mics: Vec<Vec<f64>> = mic_rirs.iter().map(|h| convolve_window(src, h, warmup, total)).collect();
    let eval_start = warmup + s.batches * s.batch_len;
    let raw_eval: Vec<Vec<f64>> =
        eval_rirs.iter().map(|h| convolve_window(src, h, eval_start, s.batch_len)).collect();

    let count = (s.mics * total) as f64;
    let rms = (raw_mics.iter().flatten().map(|v| v * v).sum::<f64>() / count).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let noise_std = 10f64.powf(-s.snr_db / 20.0);

    let mut noise_rng = rng_stream(s.seed, STREAM_NOISE);
    let mut clean = Vec::with_capacity(s.batches + 1);
    let mut noisy = Vec::with_capacity(s.batches + 1);
    for b in 0..=s.batches {
        let range = b * s.batch_len..(b + 1) * s.batch_len;
        let cb: Vec<Vec<f64>> = raw_mics.iter().map(|m| m[range.clone()].iter().map(|v| v * scale).collect()).collect();
        let nb: Vec<Vec<f64>> = cb
            .iter()
            .map(|m| {
                m.iter()
                    .map(|v| v + noise_std * noise_rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        clean.push(cb);
        noisy.push(nb);
    }
    let eval_signals = raw_eval.iter().map(|e| e.iter().map(|v| v * scale).collect()).collect();
    let data = SimulatedData {
        scenario: s.clone(),
        mic_positions,
        eval_positions,
        mic_signals: noisy,
        eval_signals,
        noise_std,
        scale,
        mic_rirs,
        eval_rirs,
    };
    Ok((data, clean))
}

/// Samples of excitation [`simulate`] consumes.
pub fn source_len(s: &RoomScenario) -> Result<usize> {
    s.validate()?;
    let mics = sample_positions(s, s.mics, &mut rng_stream(s.seed, STREAM_MICS))?;
    let evals = sample_positions(s, s.eval_positions, &mut rng_stream(s.seed, STREAM_EVAL))?;
    let warmup = mics.iter().chain(&evals).map(|p| render_rir(s, p).len()).max().unwrap_or(0);
    Ok(warmup + (s.batches + 1) * s.batch_len)
}

// ---------------------------------------------------------------------------
// Dataset container.
//
// Little-endian:
//   magic b"WKDATA01"
//   u64 T, T bytes of UTF-8 TOML (the scenario)
//   f64 noise_std, f64 scale
//   u64 M, M × 3 f64 mic positions
//   u64 E, E × 3 f64 evaluation positions
//   u64 B, u64 N, B × M × N f64 mic signals
//   E × N f64 evaluation signals
//   M + E impulse responses, each u64 length then samples

const DATA_MAGIC: &[u8; 8] = b"WKDATA01";

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated dataset file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        let v = usize::try_from(v).map_err(|_| Error::Format("length overflow".into()))?;
        if v > self.buf.len() {
            return Err(Error::Format(format!("implausible length {v}")));
        }
        Ok(v)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn positions(&mut self) -> Result<Vec<[f64; 3]>> {
        let n = self.len()?;
        (0..n).map(|_| Ok([self.f64()?, self.f64()?, self.f64()?])).collect()
    }
}

pub fn write_dataset<W: Write>(mut out: W, d: &SimulatedData) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATA_MAGIC);
    let toml = toml::to_string(&d.scenario).map_err(|e| Error::Format(e.to_string()))?;
    put_u64(&mut buf, toml.len() as u64);
    buf.extend_from_slice(toml.as_bytes());
    put_f64(&mut buf, d.noise_std);
    put_f64(&mut buf, d.scale);
    for set in [&d.mic_positions, &d.eval_positions] {
        put_u64(&mut buf, set.len() as u64);
        set.iter().flatten().for_each(|v| put_f64(&mut buf, *v));
    }
    put_u64(&mut buf, d.mic_signals.len() as u64);
    put_u64(&mut buf, d.scenario.batch_len as u64);
    d.mic_signals.iter().flatten().flatten().for_each(|v| put_f64(&mut buf, *v));
    d.eval_signals.iter().flatten().for_each(|v| put_f64(&mut buf, *v));
    for h in d.mic_rirs.iter().chain(&d.eval_rirs) {
        put_u64(&mut buf, h.len() as u64);
        h.samples.iter().for_each(|v| put_f64(&mut buf, *v));
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<SimulatedData> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != DATA_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let tl = c.len()?;
    let text = std::str::from_utf8(c.take(tl)?).map_err(|e| Error::Format(e.to_string()))?;
    let scenario: RoomScenario = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    let noise_std = c.f64()?;
    let scale = c.f64()?;
    let mic_positions = c.positions()?;
    let eval_positions = c.positions()?;
    let nb = c.len()?;
    let n = c.len()?;
    if n != scenario.batch_len || mic_positions.len() != scenario.mics {
        return Err(Error::Format("array shapes disagree with the stored scenario".into()));
    }
    let mut mic_signals = Vec::with_capacity(nb);
    for _ in 0..nb {
        mic_signals.push((0..mic_positions.len()).map(|_| c.f64s(n)).collect::<Result<Vec<_>>>()?);
    }
    let eval_signals = (0..eval_positions.len()).map(|_| c.f64s(n)).collect::<Result<Vec<_>>>()?;
    let mut rirs = Vec::new();
    for _ in 0..mic_positions.len() + eval_positions.len() {
        let l = c.len()?;
        rirs.push(ImpulseResponse { samples: c.f64s(l)?, fs: scenario.fs });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes in dataset file", buf.len() - c.pos)));
    }
    let eval_rirs = rirs.split_off(mic_positions.len());
    Ok(SimulatedData {
        scenario,
        mic_positions,
        eval_positions,
        mic_signals,
        eval_signals,
        noise_std,
        scale,
        mic_rirs: rirs,
        eval_rirs,
    })
}

pub fn save_dataset(path: &Path, d: &SimulatedData) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, d)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SimulatedData> {
    read_dataset(std::fs::File::open(path)?)
}

/// Power spectrum fraction of `x` inside `[f_lo, f_hi]` and above `f_cut`.
pub fn band_power_fractions(x: &[f64], fs: f64, f_lo: f64, f_hi: f64, f_cut: f64) -> (f64, f64) {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mut total = 0.0;
    let mut inband = 0.0;
    let mut above = 0.0;
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * fs / n as f64;
        let p = c.norm_sqr();
        total += p;
        if f >= f_lo && f <= f_hi {
            inband += p;
        }
        if f > f_cut {
            above += p;
        }
    }
    (inband / total, above / total)
}
