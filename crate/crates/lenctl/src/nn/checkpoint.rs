//! Binary checkpoints: little-endian, magic `LCTL`, a format version, a
//! length-prefixed JSON config, then named parameter arrays as
//! `(name, shape, f32 data)`.
//!
//! Parameters are kept f32-representable in memory, so save -> load is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, IoContextExt, Result};
use crate::nn::graph::Tensor;
use crate::nn::model::ParamSet;

const MAGIC: &[u8; 4] = b"LCTL";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &serde_json::Value,
    params: &ParamSet,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(
        File::create(path).io_context(format!("creating checkpoint {}", path.display()))?,
    );
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(tensor.rows as u32).to_le_bytes())?;
        w.write_all(&(tensor.cols as u32).to_le_bytes())?;
        for &x in &tensor.data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(serde_json::Value, ParamSet)> {
    let path = path.as_ref();
    let mut r = BufReader::new(
        File::open(path).io_context(format!("opening checkpoint {}", path.display()))?,
    );
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic (not a lenctl checkpoint)"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated version"))?;
    if version != VERSION {
        return Err(bad(&format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = read_u32(&mut r).map_err(|_| bad("truncated config length"))? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)
        .map_err(|_| bad("truncated config"))?;
    let config: serde_json::Value =
        serde_json::from_slice(&cfg_bytes).map_err(|e| bad(&format!("config not JSON: {e}")))?;

    let n = read_u32(&mut r).map_err(|_| bad("truncated parameter count"))? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name_len = read_u32(&mut r).map_err(|_| bad("truncated name length"))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name not utf-8"))?;
        let ndim = read_u32(&mut r).map_err(|_| bad("truncated ndim"))?;
        if ndim != 2 {
            return Err(bad(&format!("unsupported ndim {ndim}")));
        }
        let rows = read_u32(&mut r).map_err(|_| bad("truncated shape"))? as usize;
        let cols = read_u32(&mut r).map_err(|_| bad("truncated shape"))? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 4];
        for slot in data.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| bad(&format!("truncated data for {name}")))?;
            *slot = f32::from_le_bytes(buf) as f64;
        }
        params.push(name, Tensor::from_vec(rows, cols, data));
    }
    Ok((config, params))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
