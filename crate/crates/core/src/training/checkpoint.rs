//! `IAPL1` tensor archive: magic, little-endian `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and
//! little-endian `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{IaplError, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"IAPL1";

fn index(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && !s.starts_with('0')
}

/// Whether `name` belongs to the detector's tensor vocabulary.
pub fn is_valid_tensor_name(name: &str) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["embed", "patch", "weight" | "bias"] | ["embed", "cls" | "pos"] => true,
        ["blocks", j, "ln1" | "ln2", "gain" | "bias"] => index(j),
        ["blocks", j, "attn", "qkv" | "proj", "weight" | "bias"] => index(j),
        ["blocks", j, "mlp", "fc1" | "fc2", "weight" | "bias"] => index(j),
        ["norm", "gain" | "bias"] | ["head", "weight" | "bias"] => true,
        ["adapters", j, "down" | "up"] => index(j),
        ["tokens", j] => index(j),
        ["gates", "alpha_f" | "alpha_i"] => true,
        ["gates", j] => index(j),
        ["prompt", "adaptive"] => true,
        ["cil", "forgery" | "image", "proj", "weight" | "bias"] => true,
        ["cil", "forgery" | "image", conv, "weight" | "bias"] => conv
            .strip_prefix("conv")
            .is_some_and(|k| k == "0" || index(k)),
        ["cil", "aux", "weight" | "bias"] => true,
        _ => false,
    }
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(IaplError::Format(msg.into()))
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).or_else(|_| fmt_err(format!("tensor name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        let rank = u8::try_from(t.shape().len()).or_else(|_| fmt_err("tensor rank above 255"))?;
        out.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).or_else(|_| fmt_err("dimension above u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => fmt_err(format!("truncated checkpoint at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a whole archive; nothing is returned unless every tensor is valid.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return fmt_err("bad magic, not an IAPL1 checkpoint");
    }
    let count = c.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?).or_else(|_| fmt_err("tensor name is not UTF-8"))?;
        if !is_valid_tensor_name(name) {
            return fmt_err(format!("unknown tensor name `{name}`"));
        }
        if params.contains(name) {
            return fmt_err(format!("duplicate tensor name `{name}`"));
        }
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = c.u32()? as usize;
            numel = numel.checked_mul(d).map_or_else(|| fmt_err("tensor size overflow"), Ok)?;
            shape.push(d);
        }
        let bytes = c.take(numel.checked_mul(4).map_or_else(|| fmt_err("tensor size overflow"), Ok)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).or_else(|e| fmt_err(e.to_string()))?;
        params.insert(name, t).or_else(|e| fmt_err(e.to_string()))?;
    }
    if c.pos != buf.len() {
        return fmt_err(format!("{} trailing bytes after last tensor", buf.len() - c.pos));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(std::fs::File::open(path)?)
}
