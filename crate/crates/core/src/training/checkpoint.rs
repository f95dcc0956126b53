//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `"CECR"`, `u32` version, `u64`-length-prefixed train-config text,
//! `u64`-length-prefixed architecture text, `u64` epoch, shuffle-stream state
//! (`u64` seed, `u64` stream, `u128` word position), the parameter list, then a
//! `u8` flag and (if set) the momentum list. A list is a `u64` layer count and
//! per layer a `u8` presence flag followed by `u64` tensor count and, per
//! tensor, `u64` rank, `u64` dims and `f64` values.

use std::fs;
use std::path::Path;

use super::TrainConfig;
use crate::error::{fmt_err, Error, Result};
use crate::layers::LayerParams;
use crate::models::{Architecture, Network};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CECR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub net: Network,
    /// Completed epochs.
    pub epoch: usize,
    /// State of the per-epoch shuffling stream.
    pub rng: RngState,
    pub velocity: Option<Vec<Option<LayerParams>>>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_list(out: &mut Vec<u8>, list: &[Option<LayerParams>]) {
    put_u64(out, list.len() as u64);
    for layer in list {
        match layer {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                put_u64(out, p.tensors().count() as u64);
                for t in p.tensors() {
                    put_u64(out, t.rank() as u64);
                    for &d in t.shape() {
                        put_u64(out, d as u64);
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| fmt_err!("checkpoint truncated at byte {} (needed {n} more)", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| fmt_err!("implausible length {v} in checkpoint"))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| fmt_err!("checkpoint text is not UTF-8"))
    }

    fn list(&mut self) -> Result<Vec<Option<LayerParams>>> {
        let layers = self.len()?;
        let mut out = Vec::with_capacity(layers);
        for _ in 0..layers {
            match self.u8()? {
                0 => out.push(None),
                1 => {
                    let count = self.len()?;
                    if !(1..=2).contains(&count) {
                        return Err(fmt_err!("layer with {count} tensors in checkpoint"));
                    }
                    let mut tensors = Vec::with_capacity(count);
                    for _ in 0..count {
                        let rank = self.len()?;
                        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
                        let n: usize = shape.iter().product();
                        let raw = self.take(n.checked_mul(8).ok_or_else(|| fmt_err!("tensor too large"))?)?;
                        let data = raw
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect();
                        tensors.push(Tensor::new(shape, data).map_err(|e| fmt_err!("bad tensor in checkpoint: {e}"))?);
                    }
                    let mut it = tensors.into_iter();
                    out.push(Some(LayerParams {
                        weights: it.next().expect("one tensor"),
                        bias: it.next(),
                    }));
                }
                f => return Err(fmt_err!("bad presence flag {f} in checkpoint")),
            }
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_text(&mut out, &self.cfg.to_text());
        put_text(&mut out, &self.net.architecture().to_text());
        put_u64(&mut out, self.epoch as u64);
        put_u64(&mut out, self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_list(&mut out, self.net.params());
        match &self.velocity {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                put_list(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic = c.take(4).map_err(|_| fmt_err!("not a checkpoint: {} bytes", bytes.len()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(fmt_err!("bad checkpoint magic {magic:?}"));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"));
        }
        let as_fmt = |e: Error| fmt_err!("checkpoint header: {e}");
        let cfg = TrainConfig::from_text(&c.text()?).map_err(as_fmt)?;
        let arch = Architecture::from_text(&c.text()?).map_err(as_fmt)?;
        let epoch = c.len()?;
        let rng = RngState {
            seed: c.u64()?,
            stream: c.u64()?,
            word_pos: u128::from_le_bytes(c.take(16)?.try_into().expect("16 bytes")),
        };
        let params = c.list()?;
        let net = Network::from_parts(arch, params).map_err(|e| fmt_err!("checkpoint parameters: {e}"))?;
        let velocity = match c.u8()? {
            0 => None,
            1 => {
                let v = c.list()?;
                if v.len() != net.params().len() {
                    return Err(fmt_err!("momentum list does not match the network"));
                }
                for (p, vel) in net.params().iter().zip(&v) {
                    if let (Some(p), Some(vel)) = (p, vel) {
                        if p.tensors().map(Tensor::shape).ne(vel.tensors().map(Tensor::shape)) {
                            return Err(fmt_err!("momentum shapes do not match the network"));
                        }
                    } else if p.is_none() && vel.is_some() {
                        return Err(fmt_err!("momentum for a parameter-free layer"));
                    }
                }
                Some(v)
            }
            f => return Err(fmt_err!("bad momentum flag {f}")),
        };
        if c.pos != bytes.len() {
            return Err(fmt_err!("{} trailing bytes after checkpoint", bytes.len() - c.pos));
        }
        Ok(Checkpoint {
            cfg,
            net,
            epoch,
            rng,
            velocity,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
