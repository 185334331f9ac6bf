//! Binary chain checkpoints.
//!
//! ```text
//! "WFLW" | version u16 | payload_len u64 | payload | crc32(payload) u32
//! payload = meta | block* | base density
//!   meta    d u32, n_blocks u32, t_total f64
//!   block   t_a f64, t_b f64, scheme u8, steps u32, trained u8, time_scale f64,
//!           n_layers u32, then per layer: out u32, in u32, activation u8,
//!           weights (out·in f64, row-major), bias (out f64)
//!   base    kind u8 (0 gaussian, 1 mixture); gaussian: d u32, mean, cov (row-major);
//!           mixture: k u32, weights, k gaussians
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::datasets::{AnalyticDensity, Gaussian, Mixture};
use crate::numcore::Tensor;
use crate::odeint::{IntegratorConfig, Scheme};
use crate::velocity::{Activation, Layer, Mlp, VelocityField};
use crate::{Error, Result};

use super::{FlowBlock, FlowChain};

pub const MAGIC: [u8; 4] = *b"WFLW";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 8;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn gaussian(&mut self, g: &Gaussian) {
        self.u32(g.dim());
        self.f64s(g.mean());
        self.f64s(g.cov().data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "payload truncated at byte {} (wanted {n} more)",
                self.pos
            ))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        // bound the allocation by what is actually left
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint(format!("section of {n} floats overruns the payload")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn gaussian(&mut self) -> Result<Gaussian> {
        let d = self.u32()?;
        let mean = self.f64s(d)?;
        let cov = self.f64s(d * d)?;
        Gaussian::new(mean, Tensor::matrix(d, d, cov)?)
    }
}

fn encode(chain: &FlowChain) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(chain.dim());
    w.u32(chain.blocks().len());
    w.f64(chain.t_total());
    for b in chain.blocks() {
        let (ta, tb) = b.interval();
        w.f64(ta);
        w.f64(tb);
        w.u8(b.integrator.scheme.code());
        w.u32(b.integrator.steps);
        w.u8(b.trained as u8);
        w.f64(b.field.time_scale());
        let layers = b.field.mlp().layers();
        w.u32(layers.len());
        for l in layers {
            w.u32(l.out_dim());
            w.u32(l.in_dim());
            w.u8(l.activation.code());
            w.f64s(l.weight.data());
            w.f64s(l.bias.data());
        }
    }
    match chain.base() {
        AnalyticDensity::Gaussian(g) => {
            w.u8(0);
            w.gaussian(g);
        }
        AnalyticDensity::Mixture(m) => {
            w.u8(1);
            w.u32(m.weights().len());
            w.f64s(m.weights());
            for c in m.components() {
                w.gaussian(c);
            }
        }
    }
    w.0
}

fn decode(payload: &[u8]) -> Result<FlowChain> {
    let mut r = Reader { buf: payload, pos: 0 };
    let d = r.u32()?;
    let n = r.u32()?;
    let t_total = r.f64()?;
    let mut blocks = Vec::new();
    for i in 0..n {
        let ta = r.f64()?;
        let tb = r.f64()?;
        let scheme = Scheme::from_code(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("block {i}: unknown integrator scheme")))?;
        let steps = r.u32()?;
        let trained = r.u8()? != 0;
        let time_scale = r.f64()?;
        let n_layers = r.u32()?;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let out = r.u32()?;
            let inp = r.u32()?;
            let activation = Activation::from_code(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("block {i}: unknown activation")))?;
            let weight = Tensor::matrix(out, inp, r.f64s(out * inp)?)?;
            let bias = Tensor::vector(r.f64s(out)?);
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        let field = VelocityField::new(Mlp::new(layers)?, d, time_scale, (ta, tb))?;
        let cfg = IntegratorConfig {
            scheme,
            steps,
            interval: (ta, tb),
        };
        let mut block = FlowBlock::new(field, cfg)?;
        block.trained = trained;
        blocks.push(block);
    }
    let base = match r.u8()? {
        0 => AnalyticDensity::Gaussian(r.gaussian()?),
        1 => {
            let k = r.u32()?;
            let weights = r.f64s(k)?;
            let comps = (0..k).map(|_| r.gaussian()).collect::<Result<Vec<_>>>()?;
            AnalyticDensity::Mixture(Mixture::new(weights, comps)?)
        }
        other => return Err(Error::Checkpoint(format!("unknown base density kind {other}"))),
    };
    if r.pos != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the base density",
            payload.len() - r.pos
        )));
    }
    let chain = FlowChain::new(blocks, base)?;
    if chain.t_total() != t_total {
        return Err(Error::Checkpoint("block intervals disagree with T_total".into()));
    }
    Ok(chain)
}

/// Serialises `chain` to bytes in the checkpoint format.
pub fn to_bytes(chain: &FlowChain) -> Vec<u8> {
    let payload = encode(chain);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<FlowChain> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint("file truncated inside the header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let expected = (HEADER_LEN as u64).saturating_add(len).saturating_add(4);
    if (bytes.len() as u64) < expected {
        return Err(Error::Checkpoint(format!(
            "file truncated: {} bytes, header promises {expected}",
            bytes.len()
        )));
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::Checkpoint("trailing bytes after checksum".into()));
    }
    let len = len as usize;
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    decode(payload)
}

pub fn save_checkpoint(chain: &FlowChain, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(chain))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FlowChain> {
    from_bytes(&std::fs::read(path)?)
}
