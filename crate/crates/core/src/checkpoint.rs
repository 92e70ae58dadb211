//! Checkpoint persistence: a flat little-endian container of named f32
//! arrays.
//!
//! Layout: magic `"WVEN"`, `u32` version (currently 1), `u32` step, `u32`
//! config-echo byte length + UTF-8 echo, `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name, a `u8` rank, that many `u32` dims, and
//! the raw f32 data. Model parameters are stored under their `ParamSet`
//! names; optimizer state rides along as `adam.m.<name>` / `adam.v.<name>`
//! plus a one-element `adam.t` step counter (exact in f32 at any desk-scale
//! step count). Save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"WVEN";
pub const VERSION: u32 = 1;

/// One named array.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// A decoded checkpoint: training step, the model-shape echo of the config
/// that built the network, and every named array in serialization order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u32,
    pub config_echo: String,
    pub entries: Vec<Entry>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a checkpoint to its on-disk byte layout.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, ckpt.step);
    push_u32(&mut buf, ckpt.config_echo.len() as u32);
    buf.extend_from_slice(ckpt.config_echo.as_bytes());
    push_u32(&mut buf, ckpt.entries.len() as u32);
    for entry in &ckpt.entries {
        if entry.name.len() > u16::MAX as usize {
            return Err(Error::InvalidArg(format!(
                "checkpoint entry name longer than {} bytes",
                u16::MAX
            )));
        }
        if entry.dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArg(format!(
                "checkpoint entry `{}` has rank {}",
                entry.name,
                entry.dims.len()
            )));
        }
        let numel: usize = entry.dims.iter().map(|&d| d as usize).product();
        if numel != entry.data.len() {
            return Err(Error::InvalidArg(format!(
                "checkpoint entry `{}`: dims {:?} imply {} values, got {}",
                entry.name,
                entry.dims,
                numel,
                entry.data.len()
            )));
        }
        buf.extend_from_slice(&(entry.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(entry.name.as_bytes());
        buf.push(entry.dims.len() as u8);
        for &d in &entry.dims {
            push_u32(&mut buf, d);
        }
        for &v in &entry.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::CheckpointTruncated(what.to_string()));
        };
        let slice = &self.buf[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses the on-disk byte layout, distinguishing bad magic, unsupported
/// version, truncation, and structural corruption.
pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let step = r.u32("step")?;
    let echo_len = r.u32("config echo length")? as usize;
    let config_echo = std::str::from_utf8(r.take(echo_len, "config echo")?)
        .map_err(|_| Error::CheckpointCorrupt("config echo is not UTF-8".into()))?
        .to_string();
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name_len = r.u16(&format!("entry {i} name length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("entry {i} name"))?)
            .map_err(|_| Error::CheckpointCorrupt(format!("entry {i} name is not UTF-8")))?
            .to_string();
        let ndim = r.u8(&format!("entry `{name}` rank"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u32(&format!("entry `{name}` dims"))?;
            dims.push(d);
            numel = numel.checked_mul(d as usize).ok_or_else(|| {
                Error::CheckpointCorrupt(format!("entry `{name}`: dim product overflows"))
            })?;
        }
        let raw = r.take(numel * 4, &format!("entry `{name}` data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    if r.at != buf.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "{} trailing bytes after last entry",
            buf.len() - r.at
        )));
    }
    Ok(Checkpoint {
        step,
        config_echo,
        entries,
    })
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = dir.join(format!(".{stem}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

fn to_f32(data: &[impl Scalar + Copy]) -> Vec<f32> {
    data.iter().map(|v| v.as_f64() as f32).collect()
}

/// Snapshots a parameter set (and, when given, optimizer state) into a
/// checkpoint. Entry order follows the parameter set, so two captures of the
/// same model serialize identically.
pub fn capture<T: Scalar>(
    step: u32,
    config_echo: String,
    params: &ParamSet<T>,
    adam: Option<&Adam<T>>,
) -> Result<Checkpoint> {
    let mut entries = Vec::new();
    for (name, tensor) in params.iter() {
        let s = tensor.shape();
        entries.push(Entry {
            name: name.to_string(),
            dims: vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32],
            data: to_f32(&tensor.data()),
        });
    }
    if let Some(adam) = adam {
        let (m, v) = adam.moments();
        if !m.is_empty() {
            if m.len() != params.len() {
                return Err(Error::InvalidArg(format!(
                    "optimizer tracks {} parameters, model has {}",
                    m.len(),
                    params.len()
                )));
            }
            for (buffers, prefix) in [(m, "adam.m"), (v, "adam.v")] {
                for ((name, tensor), buf) in params.iter().zip(buffers) {
                    let s = tensor.shape();
                    entries.push(Entry {
                        name: format!("{prefix}.{name}"),
                        dims: vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32],
                        data: to_f32(buf),
                    });
                }
            }
        }
        entries.push(Entry {
            name: "adam.t".into(),
            dims: vec![1],
            data: vec![adam.step_count() as f32],
        });
    }
    Ok(Checkpoint {
        step,
        config_echo,
        entries,
    })
}

/// Loads checkpoint values into an existing model in place, and optionally
/// restores optimizer state. Every model parameter must be present with
/// matching dims; non-optimizer entries that match nothing are an error.
/// Optimizer entries are ignored unless `adam` is given, so evaluation can
/// load a training checkpoint without caring about moments.
pub fn install<T: Scalar>(
    ckpt: &Checkpoint,
    params: &ParamSet<T>,
    adam: Option<&mut Adam<T>>,
) -> Result<()> {
    let by_name: BTreeMap<&str, &Entry> =
        ckpt.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != ckpt.entries.len() {
        return Err(Error::CheckpointCorrupt("duplicate entry name".into()));
    }
    for entry in &ckpt.entries {
        if !entry.name.starts_with("adam.") && params.get(&entry.name).is_none() {
            return Err(Error::CheckpointCorrupt(format!(
                "entry `{}` matches no model parameter",
                entry.name
            )));
        }
    }
    for (name, tensor) in params.iter() {
        let entry = by_name.get(name).ok_or_else(|| {
            Error::CheckpointCorrupt(format!("model parameter `{name}` is absent"))
        })?;
        let s = tensor.shape();
        let dims = [s.n as u32, s.c as u32, s.h as u32, s.w as u32];
        if entry.dims != dims {
            return Err(Error::CheckpointCorrupt(format!(
                "parameter `{name}`: stored dims {:?}, model needs {:?}",
                entry.dims, dims
            )));
        }
        let data: Vec<T> = entry.data.iter().map(|&v| T::lit(v as f64)).collect();
        tensor.load_data(&data)?;
    }
    if let Some(adam) = adam {
        let Some(t_entry) = by_name.get("adam.t") else {
            // No optimizer state saved; leave the optimizer fresh.
            return Ok(());
        };
        let t = t_entry.data.first().copied().unwrap_or(0.0) as u64;
        let has_moments = by_name.keys().any(|k| k.starts_with("adam.m."));
        if !has_moments {
            if t != 0 {
                return Err(Error::CheckpointCorrupt(format!(
                    "optimizer step count is {t} but no moment buffers are stored"
                )));
            }
            return adam.restore(Vec::new(), Vec::new(), 0);
        }
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (target, prefix) in [(&mut m, "adam.m"), (&mut v, "adam.v")] {
            for (name, tensor) in params.iter() {
                let key = format!("{prefix}.{name}");
                let entry = by_name.get(key.as_str()).ok_or_else(|| {
                    Error::CheckpointCorrupt(format!("optimizer buffer `{key}` is absent"))
                })?;
                if entry.data.len() != tensor.numel() {
                    return Err(Error::CheckpointCorrupt(format!(
                        "optimizer buffer `{key}`: {} values for a parameter of {}",
                        entry.data.len(),
                        tensor.numel()
                    )));
                }
                target.push(entry.data.iter().map(|&x| T::lit(x as f64)).collect());
            }
        }
        adam.restore(m, v, t)?;
    }
    Ok(())
}
