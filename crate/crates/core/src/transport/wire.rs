//! Little-endian primitives and the byte layouts of tensors, parameter sets
//! and capture files.

use std::io::{Read, Write};

use super::Dtype;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, x: u8) -> &mut Self {
        self.buf.push(x);
        self
    }

    pub fn u16(&mut self, x: u16) -> &mut Self {
        self.buf.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn u32(&mut self, x: u32) -> &mut Self {
        self.buf.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn u64(&mut self, x: u64) -> &mut Self {
        self.buf.extend_from_slice(&x.to_le_bytes());
        self
    }

    /// u32 length prefix, then the bytes.
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn shape(&mut self, shape: &[u32]) -> &mut Self {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d);
        }
        self
    }
}

/// Bounds-checked reader; every shortfall is a framing error.
#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Framing(format!("payload truncated: need {n} bytes, have {}", self.buf.len())));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn shape(&mut self) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        if n > 16 {
            return Err(Error::Framing(format!("tensor rank {n} is implausible")));
        }
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if !self.buf.is_empty() {
            return Err(Error::Framing(format!("{} trailing bytes after payload", self.buf.len())));
        }
        Ok(())
    }
}

pub fn shape_u32(shape: &[usize]) -> Result<Vec<u32>> {
    shape
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::Contract(format!("dimension {d} exceeds u32"))))
        .collect()
}

/// Element data only, little-endian in the given width.
pub fn tensor_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * dtype.size());
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Inverse of [`tensor_bytes`]; the byte count must equal
/// `product(shape) × dtype size`.
pub fn tensor_from_bytes(shape: &[u32], dtype: Dtype, bytes: &[u8]) -> Result<Tensor> {
    let shape: Vec<usize> = shape.iter().map(|&d| d as usize).collect();
    let n: usize = shape.iter().product();
    if bytes.len() != n * dtype.size() {
        return Err(Error::Protocol(format!(
            "tensor of shape {shape:?} needs {} bytes, got {}",
            n * dtype.size(),
            bytes.len()
        )));
    }
    let data = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor::new(shape, data)
}

/// Named f64 arrays: u32 count, then per entry name bytes, shape, data.
pub fn encode_param_set(set: &ParamSet) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.u32(set.len() as u32);
    for (name, t) in &set.0 {
        w.bytes(name.as_bytes());
        w.shape(&shape_u32(t.shape())?);
        w.buf.extend_from_slice(&tensor_bytes(t, Dtype::F64));
    }
    Ok(w.buf)
}

pub fn decode_param_set(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader::new(bytes);
    let n = r.u32()?;
    let mut set = ParamSet::default();
    for _ in 0..n {
        let name = std::str::from_utf8(r.bytes()?)
            .map_err(|_| Error::Framing("parameter name is not UTF-8".into()))?
            .to_string();
        let shape = r.shape()?;
        let count: usize = shape.iter().map(|&d| d as usize).product();
        let data = r.take(count * 8)?;
        set.0.insert(name, tensor_from_bytes(&shape, Dtype::F64, data)?);
    }
    r.finish()?;
    Ok(set)
}

/// Appends one capture record (shape, then f32 data) as seen at the server
/// boundary.
pub fn write_capture_record<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let mut h = Writer::default();
    h.shape(&shape_u32(t.shape())?);
    w.write_all(&h.buf)?;
    w.write_all(&tensor_bytes(t, Dtype::F32))?;
    Ok(())
}

/// Reads every record of a capture stream.
pub fn read_capture<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    let mut rd = Reader::new(&all);
    let mut out = Vec::new();
    while !rd.buf.is_empty() {
        let shape = rd.shape()?;
        let n: usize = shape.iter().map(|&d| d as usize).product();
        let data = rd.take(n * 4)?;
        out.push(tensor_from_bytes(&shape, Dtype::F32, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_set_round_trip_is_exact() {
        let mut set = ParamSet::default();
        set.0.insert("a.b".into(), Tensor::new(vec![2, 1], vec![0.1, -1e-300]).unwrap());
        set.0.insert("c".into(), Tensor::scalar(f64::MAX));
        let back = decode_param_set(&encode_param_set(&set).unwrap()).unwrap();
        assert_eq!(back, set);
        let enc = encode_param_set(&set).unwrap();
        assert!(decode_param_set(&enc[..enc.len() - 1]).is_err());
    }

    #[test]
    fn capture_round_trip() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.5]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![-1.0, 0.25]).unwrap();
        let mut buf = Vec::new();
        write_capture_record(&mut buf, &a).unwrap();
        write_capture_record(&mut buf, &b).unwrap();
        assert_eq!(read_capture(&buf[..]).unwrap(), vec![a, b]);
        assert!(read_capture(&[][..]).unwrap().is_empty());
    }

    #[test]
    fn tensor_length_must_match_shape() {
        assert!(matches!(tensor_from_bytes(&[2, 2], Dtype::F32, &[0; 15]), Err(Error::Protocol(_))));
    }
}
