//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ABLM1"
//! u32 n_ch, u32 n_sp, u32 n_fe1, u8 merge (0 concat, 1 sum), u32 n_fe3, u32 n_c,
//! u8 attention, u8 bidirectional, u8 nonlinearity (0 softmax, 1 sigmoid)
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, u32 dims..., f64 values...
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::{count_parameters, ModelParams};
use super::{AttentionNonlinearity, Merge, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"ABLM1";

pub fn write_checkpoint<W: Write>(
    mut w: W,
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<()> {
    params.validate(config)?;
    w.write_all(MAGIC)?;
    let u32le = |v: usize| (v as u32).to_le_bytes();
    w.write_all(&u32le(config.n_ch))?;
    w.write_all(&u32le(config.n_sp))?;
    w.write_all(&u32le(config.n_fe1))?;
    w.write_all(&[match config.merge {
        Merge::Concat => 0,
        Merge::Sum => 1,
    }])?;
    w.write_all(&u32le(config.n_fe3))?;
    w.write_all(&u32le(config.n_c))?;
    w.write_all(&[
        config.attention_enabled as u8,
        config.bidirectional_enabled as u8,
        match config.attention_nonlinearity {
            AttentionNonlinearity::Softmax => 0,
            AttentionNonlinearity::Sigmoid => 1,
        },
    ])?;
    let named = params.named();
    w.write_all(&u32le(named.len()))?;
    for (name, t) in named {
        w.write_all(&u32le(name.len()))?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32le(t.rank()))?;
        for &d in t.shape() {
            w.write_all(&u32le(d))?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint(format!("invalid {what} flag {v}"))),
        }
    }
}

/// Parses a checkpoint and validates it against its own config block.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(5)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an ABLM1 checkpoint".into()));
    }
    let n_ch = c.u32()?;
    let n_sp = c.u32()?;
    let n_fe1 = c.u32()?;
    let merge = match c.u8()? {
        0 => Merge::Concat,
        1 => Merge::Sum,
        v => return Err(Error::Checkpoint(format!("invalid merge mode {v}"))),
    };
    let n_fe3 = c.u32()?;
    let n_c = c.u32()?;
    let attention_enabled = c.flag("attention")?;
    let bidirectional_enabled = c.flag("bidirectional")?;
    let attention_nonlinearity = match c.u8()? {
        0 => AttentionNonlinearity::Softmax,
        1 => AttentionNonlinearity::Sigmoid,
        v => return Err(Error::Checkpoint(format!("invalid nonlinearity {v}"))),
    };
    let config = ModelConfig {
        n_ch,
        n_sp,
        n_fe1,
        merge,
        n_fe3,
        n_c,
        attention_enabled,
        bidirectional_enabled,
        attention_nonlinearity,
    };
    config.validate()?;

    let mut params = ModelParams::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = c.u32()?;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, config implies {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (ename, eshape) in &expected {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if &name != ename {
            return Err(Error::Checkpoint(format!("expected tensor {ename}, found {name}")));
        }
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        if &shape != eshape {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {shape:?}, config implies {eshape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        loaded.push(Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    if params.element_count() != count_parameters(&config) {
        return Err(Error::Checkpoint(format!(
            "{} stored values, config implies {}",
            params.element_count(),
            count_parameters(&config)
        )));
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
