//! Binary checkpoints of training state.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic    b"WKCKPT01"
//! u64      depth, hidden, out_dim
//! f64      omega0, c0
//! u8       first-layer init (0 = layer-count, 1 = input-dim)
//! f64 × 8  normalization scale[4], offset[4]
//! f64      speed of sound
//! u64      step
//! u64 P    parameter count (network + 4 hyperparameters)
//! f64 × P  flat parameters
//! f64 × P  Adam first moments
//! f64 × P  Adam second moments
//! u64 S    loss history length
//! f64 × S  losses
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::featurenet::{FirstLayerInit, InputNormalization, SirenConfig, SirenParams};
use crate::kernels::{KernelHyper, WaveOperator};
use crate::model::ModelParams;
use crate::trainer::{AdamState, TrainState};

const MAGIC: &[u8; 8] = b"WKCKPT01";

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        v.iter().try_for_each(|x| self.f64(*x))
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("count does not fit in usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn write_state<W: Write>(out: W, state: &TrainState) -> Result<()> {
    let mut w = Writer(out);
    w.0.write_all(MAGIC)?;
    let cfg = &state.params.net.config;
    w.u64(cfg.depth as u64)?;
    w.u64(cfg.hidden as u64)?;
    w.u64(cfg.out_dim as u64)?;
    w.f64(cfg.omega0)?;
    w.f64(cfg.c0)?;
    w.0.write_all(&[match cfg.first_layer_init {
        FirstLayerInit::LayerCount => 0,
        FirstLayerInit::InputDim => 1,
    }])?;
    w.f64s(&cfg.normalization.scale)?;
    w.f64s(&cfg.normalization.offset)?;
    w.f64(state.params.op.c)?;
    w.u64(state.step as u64)?;
    let flat = state.params.to_flat();
    w.u64(flat.len() as u64)?;
    w.f64s(&flat)?;
    w.f64s(&state.adam.m)?;
    w.f64s(&state.adam.v)?;
    w.u64(state.losses.len() as u64)?;
    w.f64s(&state.losses)?;
    Ok(())
}

pub fn read_state<R: Read>(input: R) -> Result<TrainState> {
    let mut r = Reader(input);
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let depth = r.usize()?;
    let hidden = r.usize()?;
    let out_dim = r.usize()?;
    let omega0 = r.f64()?;
    let c0 = r.f64()?;
    let first_layer_init = match r.bytes::<1>()?[0] {
        0 => FirstLayerInit::LayerCount,
        1 => FirstLayerInit::InputDim,
        b => return Err(Error::Format(format!("unknown first-layer init tag {b}"))),
    };
    let scale: [f64; 4] = r.f64s(4)?.try_into().expect("four values");
    let offset: [f64; 4] = r.f64s(4)?.try_into().expect("four values");
    let c = r.f64()?;
    let step = r.usize()?;
    let config = SirenConfig {
        depth,
        hidden,
        out_dim,
        omega0,
        c0,
        first_layer_init,
        normalization: InputNormalization { scale, offset },
    };
    let net = SirenParams::zeros(config)?;
    let mut params = ModelParams {
        net,
        hyper: KernelHyper { log_sigma_kappa: 0.0, log_ell: 0.0 },
        log_sigma: 0.0,
        log_sigma_z: 0.0,
        op: WaveOperator::new(c),
    };
    let p = r.usize()?;
    if p != params.num_params() {
        return Err(Error::Format(format!(
            "parameter count {p} does not match architecture ({})",
            params.num_params()
        )));
    }
    params.set_flat(&r.f64s(p)?)?;
    let m = r.f64s(p)?;
    let v = r.f64s(p)?;
    let s = r.usize()?;
    let losses = r.f64s(s)?;
    let mut rest = Vec::new();
    r.0.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    Ok(TrainState { params, adam: AdamState { m, v, t: step }, step, losses, wall_seconds: Vec::new() })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let mut buf = Vec::new();
    write_state(&mut buf, state)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    read_state(bytes.as_slice())
}
