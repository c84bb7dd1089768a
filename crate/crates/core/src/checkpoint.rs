//! `ERAC` checkpoint container.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic "ERAC" | version u32 | architecture hash [u8; 32] | iteration u64
//! tensor count u32, then per tensor:
//!     name length u32 | name (UTF-8) | rank u32 | dims u32 * rank | f64 * len
//! rng count u32, then per stream:
//!     name length u32 | name | seed [u8; 32] | stream u64 | word position u128
//! ```
//!
//! Tensors are every network parameter in registration order followed by
//! one `beta.<expert>` scalar per expert.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{hex, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{RngState, Trainer};

const MAGIC: &[u8; 4] = b"ERAC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub rngs: Vec<(String, RngState)>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn put_len(w: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| format_err("length exceeds u32"))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_len(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)?;
    if n > 1 << 16 {
        return Err(format_err(format!("name of {n} bytes")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| format_err("name is not UTF-8"))
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&self.iteration.to_le_bytes())?;
        put_len(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_str(w, name)?;
            put_len(w, t.shape().len())?;
            for &d in t.shape() {
                put_len(w, d)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        put_len(w, self.rngs.len())?;
        for (name, s) in &self.rngs {
            put_str(w, name)?;
            w.write_all(&s.seed)?;
            w.write_all(&s.stream.to_le_bytes())?;
            w.write_all(&s.word_pos.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format_err(format!("bad magic {magic:?}")));
        }
        let version = get_u32(r)?;
        if version != VERSION as usize {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let mut it = [0u8; 8];
        r.read_exact(&mut it)?;
        let iteration = u64::from_le_bytes(it);
        let count = get_u32(r)?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = get_str(r)?;
            let rank = get_u32(r)?;
            if rank == 0 || rank > 8 {
                return Err(format_err(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut data = vec![0.0; len];
            let mut b = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let n_rng = get_u32(r)?;
        let mut rngs = Vec::with_capacity(n_rng.min(64));
        for _ in 0..n_rng {
            let name = get_str(r)?;
            let mut seed = [0u8; 32];
            r.read_exact(&mut seed)?;
            let mut s = [0u8; 8];
            r.read_exact(&mut s)?;
            let mut wp = [0u8; 16];
            r.read_exact(&mut wp)?;
            rngs.push((
                name,
                RngState {
                    seed,
                    stream: u64::from_le_bytes(s),
                    word_pos: u128::from_le_bytes(wp),
                },
            ));
        }
        Ok(Self {
            config_hash,
            iteration,
            tensors,
            rngs,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let c = Self::read(&mut r)?;
        if !r.is_empty() {
            return Err(format_err(format!("{} trailing bytes", r.len())));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Write to `path` via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn check_hash(&self, config: &RunConfig) -> Result<()> {
        let expected = config.architecture_hash();
        if expected != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                found: hex(&self.config_hash),
                expected: hex(&expected),
            });
        }
        Ok(())
    }
}

/// Write-temp-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self.net.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        for (id, b) in self.beta.ids.iter().zip(&self.beta.beta) {
            tensors.push((format!("beta.{}", id.label()), Tensor::scalar(*b)));
        }
        Checkpoint {
            config_hash: self.config.architecture_hash(),
            iteration: self.iteration,
            tensors,
            rngs: self.rng_states(),
        }
    }

    /// Overwrite parameters, betas, stream positions and the iteration
    /// counter. With `force`, an architecture-hash mismatch is ignored
    /// (names and shapes must still line up).
    pub fn restore(&mut self, ckpt: &Checkpoint, force: bool) -> Result<()> {
        if !force {
            ckpt.check_hash(&self.config)?;
        }
        let n = self.net.params.len();
        if ckpt.tensors.len() != n + self.beta.len() {
            return Err(format_err(format!(
                "{} tensors stored, model needs {}",
                ckpt.tensors.len(),
                n + self.beta.len()
            )));
        }
        for (name, t) in &ckpt.tensors[..n] {
            let id = self.net.params.id(name)?;
            let slot = self.net.params.value_mut(id);
            if slot.shape() != t.shape() {
                return Err(format_err(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        for (k, (name, t)) in ckpt.tensors[n..].iter().enumerate() {
            let expected = format!("beta.{}", self.beta.ids[k].label());
            if *name != expected || !t.is_scalar() {
                return Err(format_err(format!("expected scalar `{expected}`, found `{name}`")));
            }
            self.beta.beta[k] = t.item();
        }
        self.beta.validate()?;
        self.set_rng_states(&ckpt.rngs)?;
        self.iteration = ckpt.iteration;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint.
    pub fn resume(config: &RunConfig, data: Dataset, ckpt: &Checkpoint, force: bool) -> Result<Self> {
        let mut t = Trainer::new(config, data)?;
        t.restore(ckpt, force)?;
        Ok(t)
    }
}
