//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian: magic `LMCK`, version `u32`, count
//! `u32`, then per parameter `name_len u32`, UTF-8 name, `rank u32`,
//! `dims u32 × rank`, and the `f64` payload.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::param::{Module, Parameter};
use super::tensor::Tensor;
use super::NumericsError;

pub const MAGIC: &[u8; 4] = b"LMCK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<M: Module + ?Sized, W: Write>(module: &M, mut w: W) -> Result<(), NumericsError> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    module.visit(&mut |p| entries.push((p.name.clone(), p.tensor.clone())));
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NumericsError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NumericsError::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Copies checkpoint tensors into `module` by name. Every parameter of the
/// module must be present with a matching shape.
pub fn restore<M: Module + ?Sized>(module: &mut M, entries: Vec<(String, Tensor)>) -> Result<(), NumericsError> {
    let mut by_name: HashMap<String, Tensor> = entries.into_iter().collect();
    let mut err = None;
    module.visit_mut(&mut |p: &mut Parameter| {
        if err.is_some() {
            return;
        }
        match by_name.remove(&p.name) {
            Some(t) if t.shape() == p.tensor.shape() => p.tensor = t,
            Some(t) => {
                err = Some(NumericsError::Format(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )))
            }
            None => err = Some(NumericsError::Format(format!("checkpoint is missing {}", p.name))),
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn save<M: Module + ?Sized>(module: &M, path: &Path) -> Result<(), NumericsError> {
    write_checkpoint(module, BufWriter::new(File::create(path)?))
}

pub fn load<M: Module + ?Sized>(module: &mut M, path: &Path) -> Result<(), NumericsError> {
    let entries = read_checkpoint(BufReader::new(File::open(path)?))?;
    restore(module, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let p = Parameter::new("ab", Tensor::row(vec![1.5]));
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"LMCK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..18], b"ab");
        assert_eq!(&buf[18..22], &2u32.to_le_bytes());
        assert_eq!(&buf[30..38], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 38);
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let mut p = Parameter::new("w", Tensor::row(vec![0.0]));
        assert!(restore(&mut p, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let n = values.len();
            let src = vec![
                Parameter::new("a.weight", Tensor::row(values.clone())),
                Parameter::new("b", Tensor::new(vec![n, 1], values.clone()).unwrap()),
            ];
            let mut buf = Vec::new();
            write_checkpoint(&src, &mut buf).unwrap();
            let mut dst = vec![
                Parameter::zeros("a.weight", &[1, n]),
                Parameter::zeros("b", &[n, 1]),
            ];
            restore(&mut dst, read_checkpoint(buf.as_slice()).unwrap()).unwrap();
            for (s, d) in src.iter().zip(&dst) {
                let sb: Vec<u64> = s.tensor.data().iter().map(|v| v.to_bits()).collect();
                let db: Vec<u64> = d.tensor.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(sb, db);
            }
        }
    }
}
