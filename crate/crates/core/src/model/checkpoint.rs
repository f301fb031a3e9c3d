//! Binary checkpoint: `"SFCK"`, u16 version, u32-length-prefixed config JSON,
//! u32 parameter count, then per parameter a u32-length-prefixed UTF-8 name,
//! u32 rank, u32 dims, a requires-grad byte and f64 data. All little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{GlmModel, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ParamSet, Parameterized};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u16 = 1;

pub fn write_model<W: Write>(model: &GlmModel, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config)?;
    write_len(&mut w, cfg.len())?;
    w.write_all(&cfg)?;
    let mut entries = Vec::new();
    model.visit("", &mut |name, t| entries.push((name.to_string(), t.clone())));
    write_len(&mut w, entries.len())?;
    for (name, t) in entries {
        write_len(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_len(&mut w, t.shape().len())?;
        for &d in t.shape() {
            write_len(&mut w, d)?;
        }
        w.write_all(&[t.requires_grad() as u8])?;
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<GlmModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Framing("not a checkpoint file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(read_arr(&mut r)?);
    if version != VERSION {
        return Err(Error::Framing(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_len(&mut r)?;
    let cfg: ModelConfig = serde_json::from_slice(&read_vec(&mut r, cfg_len)?)?;
    let mut model = GlmModel::new(cfg, 0)?;
    let count = read_len(&mut r)?;
    let mut set = ParamSet::default();
    let mut flags = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = read_len(&mut r)?;
        let name = String::from_utf8(read_vec(&mut r, name_len)?)
            .map_err(|_| Error::Framing("parameter name is not UTF-8".into()))?;
        let rank = read_len(&mut r)?;
        let shape = (0..rank).map(|_| read_len(&mut r)).collect::<Result<Vec<_>>>()?;
        let [rg] = read_arr::<1, _>(&mut r)?;
        let n: usize = shape.iter().product();
        let bytes = read_vec(&mut r, n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        flags.insert(name.clone(), rg != 0);
        set.0.insert(name, Tensor::new(shape, data)?);
    }
    model.load(&set)?;
    model.visit_mut("", &mut |name, t| {
        if let Some(&rg) = flags.get(name) {
            t.set_requires_grad(rg);
        }
    });
    Ok(model)
}

pub fn save(model: &GlmModel, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GlmModel> {
    let f = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(f))
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Contract(format!("length {n} exceeds u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_arr<const K: usize, R: Read>(r: &mut R) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    Ok(u32::from_le_bytes(read_arr(r)?) as usize)
}

fn read_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(Error::Framing("truncated checkpoint".into()));
    }
    Ok(v)
}
