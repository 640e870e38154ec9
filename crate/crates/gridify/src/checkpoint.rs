//! Checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "GRIDCKPT" u32 version u32 n_params
//! per parameter: u32 name_len, name, u8 flags (1 = decay, 2 = trainable),
//!                u32 ndim, u32 dims[ndim], f64 data[prod(dims)]
//! u8 has_optimizer
//! optimizer: f64 lr, beta1, beta2, eps, weight_decay, u64 step,
//!            then first moments of every parameter, then second moments
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use gridify_core::nn::{AdamW, ParamStore};
use gridify_core::Tensor;

use crate::error::{io_at, Error, Result};

pub const MAGIC: &[u8; 8] = b"GRIDCKPT";
const VERSION: u32 = 1;
const DECAY: u8 = 1;
const TRAINABLE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn new(store: ParamStore, optimizer: Option<AdamW>) -> Self {
        Self { store, optimizer }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(self.store.len())?);
        for (_, p) in self.store.iter() {
            put_u32(&mut out, len_u32(p.name.len())?);
            out.extend_from_slice(p.name.as_bytes());
            out.push(if p.decay { DECAY } else { 0 } | if p.trainable { TRAINABLE } else { 0 });
            put_u32(&mut out, len_u32(p.value.shape().len())?);
            for &d in p.value.shape() {
                put_u32(&mut out, len_u32(d)?);
            }
            put_f64s(&mut out, p.value.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_f64s(&mut out, &[opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay]);
                out.extend_from_slice(&opt.steps().to_le_bytes());
                let (m, v) = opt.moments();
                for moments in [m, v] {
                    if moments.len() != self.store.len() {
                        return Err(Error::Format("optimizer state does not match the parameters".into()));
                    }
                    for (buf, (_, p)) in moments.iter().zip(self.store.iter()) {
                        if buf.len() != p.value.len() {
                            return Err(Error::Format(format!("optimizer moment size differs for `{}`", p.name)));
                        }
                        put_f64s(&mut out, buf);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (missing GRIDCKPT header)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format(format!("parameter name at byte {} is not UTF-8", r.pos)))?
                .to_owned();
            let flags = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("shape of `{name}` overflows")))?;
            let data = r.f64s(len)?;
            let id = store.add(name, Tensor::new(shape, data)?, flags & DECAY != 0);
            store.set_trainable(id, flags & TRAINABLE != 0);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let h = r.f64s(5)?;
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.len()).collect();
                let m = sizes.iter().map(|&s| r.f64s(s)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&s| r.f64s(s)).collect::<Result<Vec<_>>>()?;
                Some(AdamW::from_state(h[0], h[1], h[2], h[3], h[4], step, m, v))
            }
            other => return Err(Error::Format(format!("bad optimizer marker {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { store, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(io_at(path))?;
        f.write_all(&bytes).map_err(io_at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_at(path))?)
    }

    /// Copies every parameter of `target` from the checkpoint entry of the
    /// same name. Missing names and shape changes are errors; extra
    /// checkpoint entries are ignored.
    pub fn restore_into(&self, target: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = target.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let src = self
                .store
                .find(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no parameter `{name}`")))?;
            target.set(id, self.store.value(src).clone())?;
        }
        Ok(())
    }
}

fn len_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("size {v} does not fit a checkpoint field")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos))
        })?;
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format("checkpoint array size overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
