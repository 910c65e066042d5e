//! Little-endian named-tensor container ("OODW").
//!
//! Layout: magic `OODW`, version `u32`, then records until end of file, each
//! `name_len u32 | name utf-8 | rank u32 | dims u32[rank] | data f32[prod(dims)]`.

use std::io::{ErrorKind, Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"OODW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

impl Record {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Record {
            name: name.into(),
            tensor,
        }
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = r.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.tensor.numel() * 4);
        for v in r.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("weights file too short for header".into()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad weights magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut b = [0u8; 4];
        match r.read_exact(&mut b) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(b) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("record name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        out.push(Record { name, tensor });
    }
    Ok(out)
}
