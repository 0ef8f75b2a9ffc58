//! Versioned binary checkpoints: magic, version, kind, JSON header, then
//! one or more flat parameter stores (little-endian `f64`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{DenseMatrix, ParamStore};

const MAGIC: &[u8; 8] = b"RESUSCKP";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointKind {
    Shared,
    Meta,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Shared => 1,
            CheckpointKind::Meta => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            1 => Ok(CheckpointKind::Shared),
            2 => Ok(CheckpointKind::Meta),
            other => Err(Error::Format(format!("unknown checkpoint kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub header: serde_json::Value,
    pub stores: Vec<ParamStore>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header = serde_json::to_vec(&ckpt.header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&[ckpt.kind.tag()]).map_err(io)?;
    write_u32(&mut w, header.len()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    write_u32(&mut w, ckpt.stores.len()).map_err(io)?;
    for store in &ckpt.stores {
        write_u32(&mut w, store.len()).map_err(io)?;
        for (_, name, value) in store.iter() {
            write_u32(&mut w, name.len()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            write_u32(&mut w, value.rows()).map_err(io)?;
            write_u32(&mut w, value.cols()).map_err(io)?;
            for v in value.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
    if &magic != MAGIC {
        return Err(fmt("not a checkpoint file"));
    }
    let version = read_u32(&mut r).map_err(|_| fmt("truncated header"))?;
    if version != VERSION {
        return Err(fmt(&format!("unsupported checkpoint version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(|_| fmt("truncated header"))?;
    let kind = CheckpointKind::from_tag(tag[0])?;
    let hlen = read_u32(&mut r).map_err(|_| fmt("truncated header"))? as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header).map_err(|_| fmt("truncated header"))?;
    let header = serde_json::from_slice(&header).map_err(|e| fmt(&e.to_string()))?;
    let n_stores = read_u32(&mut r).map_err(|_| fmt("truncated payload"))?;
    let mut stores = Vec::with_capacity(n_stores as usize);
    for _ in 0..n_stores {
        let n = read_u32(&mut r).map_err(|_| fmt("truncated payload"))?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = read_u32(&mut r).map_err(|_| fmt("truncated payload"))? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| fmt("truncated payload"))?;
            let name = String::from_utf8(name).map_err(|_| fmt("parameter name is not UTF-8"))?;
            let rows = read_u32(&mut r).map_err(|_| fmt("truncated payload"))? as usize;
            let cols = read_u32(&mut r).map_err(|_| fmt("truncated payload"))? as usize;
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf).map_err(|_| fmt("truncated payload"))?;
                *v = f64::from_le_bytes(buf);
            }
            store.add(name, DenseMatrix::from_vec(rows, cols, data)?);
        }
        stores.push(store);
    }
    Ok(Checkpoint {
        kind,
        header,
        stores,
    })
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.add("a", DenseMatrix::from_rows(&[vec![1.5, -2.0], vec![0.0, 3.25]]));
        store.add("b", DenseMatrix::scalar(f64::MIN_POSITIVE));
        let ckpt = Checkpoint {
            kind: CheckpointKind::Shared,
            header: serde_json::json!({"arch": "fm"}),
            stores: vec![store.clone(), ParamStore::new()],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);

        std::fs::write(&path, b"NOTACKPT....").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }
}
