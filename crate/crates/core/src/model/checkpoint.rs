//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes   "TUNETCK1"
//! header_len     u32
//! header         header_len bytes of UTF-8 `key = value` lines
//! record_count   u32
//! record*        name_len u32 | name bytes | dims 4×u32 (n, c, h, w) | values f32 × n·c·h·w
//! ```
//!
//! The header always carries `levels`, `base_filters`, `convs_per_level`,
//! `relu` and `variant`; any extra keys are caller metadata. Records hold every
//! kernel under its parameter name and, per batch-norm layer,
//! `<layer>.running_mean` and `<layer>.running_var` with dims `(1, c, 1, 1)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::UNetConfig;
use crate::model::unet::UNet;
use crate::tensor::{Scalar, Shape, Tensor};

const MAGIC: &[u8; 8] = b"TUNETCK1";
const RESERVED: [&str; 5] = ["levels", "base_filters", "convs_per_level", "relu", "variant"];

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_to<T: Scalar, W: Write>(mut w: W, net: &UNet<T>, meta: &BTreeMap<String, String>) -> Result<()> {
    let cfg = net.config();
    let mut header = format!(
        "levels = {}\nbase_filters = {}\nconvs_per_level = {}\nrelu = {}\nvariant = {}\n",
        cfg.levels, cfg.base_filters, cfg.convs_per_level, cfg.relu_enabled, cfg.variant
    );
    for (k, v) in meta {
        if RESERVED.contains(&k.as_str()) || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(bad(format!("metadata key '{k}' is reserved or malformed")));
        }
        header.push_str(&format!("{k} = {v}\n"));
    }

    let mut records: Vec<(String, Shape, Vec<f32>)> = Vec::new();
    for p in net.params() {
        records.push((p.name.clone(), p.value.shape(), p.value.data().iter().map(|v| v.f64() as f32).collect()));
    }
    for (name, bn) in net.bn_states() {
        let s = Shape::new(1, bn.channels(), 1, 1);
        records.push((format!("{name}.running_mean"), s, bn.running_mean.iter().map(|v| v.f64() as f32).collect()));
        records.push((format!("{name}.running_var"), s, bn.running_var.iter().map(|v| v.f64() as f32).collect()));
    }

    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(header.as_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, s, vals) in records {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        for d in s.dims() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for v in vals {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn parse_header(text: &str) -> Result<(UNetConfig, BTreeMap<String, String>)> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed header line '{line}'")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut take = |k: &str| kv.remove(k).ok_or_else(|| bad(format!("header lacks '{k}'")));
    let num = |s: String, k: &str| s.parse::<usize>().map_err(|_| bad(format!("header '{k}' is not an integer")));
    let cfg = UNetConfig {
        levels: num(take("levels")?, "levels")?,
        base_filters: num(take("base_filters")?, "base_filters")?,
        convs_per_level: num(take("convs_per_level")?, "convs_per_level")?,
        relu_enabled: take("relu")?.parse().map_err(|_| bad("header 'relu' is not a boolean"))?,
        variant: take("variant")?.parse()?,
    };
    Ok((cfg, kv))
}

pub fn read_from<T: Scalar, R: Read>(mut r: R) -> Result<(UNet<T>, BTreeMap<String, String>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a tinyunet checkpoint (bad magic)"));
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(|_| bad("truncated header"))?;
    let text = String::from_utf8(hbytes).map_err(|_| bad("header is not UTF-8"))?;
    let (cfg, meta) = parse_header(&text)?;
    let mut net = UNet::<T>::build(cfg, 0)?;

    let count = read_u32(&mut r)? as usize;
    let mut records: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb).map_err(|_| bad("truncated record name"))?;
        let name = String::from_utf8(nb).map_err(|_| bad("record name is not UTF-8"))?;
        let mut d = [0usize; 4];
        for v in &mut d {
            *v = read_u32(&mut r)? as usize;
        }
        let s = Shape::new(d[0], d[1], d[2], d[3]);
        let mut raw = vec![0u8; 4 * s.numel()];
        r.read_exact(&mut raw).map_err(|_| bad(format!("truncated values for '{name}'")))?;
        let vals = raw.chunks_exact(4).map(|c| T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        records.insert(name, Tensor::from_vec(s, vals)?);
    }

    let mut take = |name: &str, want: Shape| -> Result<Tensor<T>> {
        let t = records.remove(name).ok_or_else(|| bad(format!("missing record '{name}'")))?;
        if t.shape() != want {
            return Err(bad(format!("record '{name}' has shape {} but the model expects {want}", t.shape())));
        }
        Ok(t)
    };
    for p in net.params_mut() {
        p.value = take(&p.name, p.value.shape())?;
    }
    for (name, bn) in net.bn_states_mut() {
        let s = Shape::new(1, bn.channels(), 1, 1);
        bn.running_mean = take(&format!("{name}.running_mean"), s)?.into_vec();
        bn.running_var = take(&format!("{name}.running_var"), s)?.into_vec();
    }
    if let Some(extra) = records.keys().next() {
        return Err(bad(format!("unexpected record '{extra}'")));
    }
    Ok((net, meta))
}

pub fn save<T: Scalar>(path: &Path, net: &UNet<T>, meta: &BTreeMap<String, String>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(BufWriter::new(f), net, meta)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(UNet<T>, BTreeMap<String, String>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(BufReader::new(f))
}
