//! Parameter checkpoints: magic `SAHMRT`, a `u32` version and tensor
//! count, then each tensor's name and shape, then all values as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use sahmr_core::autodiff::{ParamStore, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"SAHMRT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + 8 * store.n_scalars());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.rows as u32).to_le_bytes());
        b.extend_from_slice(&(t.cols as u32).to_le_bytes());
    }
    for (_, t) in store.iter() {
        for x in &t.data {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let s = self.b.get(self.pos..self.pos + n).ok_or("truncated checkpoint")?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err("not a SAHMRT checkpoint".into());
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32()?;
    let mut heads = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "tensor name is not UTF-8")?.to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        heads.push((name, rows, cols));
    }
    let mut out = Vec::with_capacity(count);
    for (name, rows, cols) in heads {
        let n = rows.checked_mul(cols).ok_or("tensor size overflows")?;
        let raw = r.take(n.checked_mul(8).ok_or("tensor size overflows")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor { rows, cols, data }));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after checkpoint".into());
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

/// Overwrite the parameters of `store` from the checkpoint at `path`. Every
/// parameter must be present with the same shape.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(sahmr_core::Error::MissingCheckpoint(path.display().to_string()).into())
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let entries = decode(&bytes).map_err(|m| Error::format(path, m))?;
    if entries.len() != store.len() {
        return Err(Error::format(
            path,
            format!("checkpoint has {} tensors, model {}", entries.len(), store.len()),
        ));
    }
    store
        .load(entries.iter().map(|(n, t)| (n.as_str(), t.clone())))
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3e-300, f64::MAX, 0.1, -0.0]).unwrap());
        s.add("b", Tensor::scalar(7.0));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &s).unwrap();
        let mut t = ParamStore::new();
        t.add("a.w", Tensor::zeros(2, 3));
        t.add("b", Tensor::scalar(0.0));
        load_into(&p, &mut t).unwrap();
        let bits = |s: &ParamStore| s.iter().flat_map(|(_, t)| t.data.iter().map(|x| x.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&s), bits(&t));
    }

    #[test]
    fn header_layout() {
        let b = encode(&store());
        assert_eq!(&b[..6], b"SAHMRT");
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 2);
        // names, shapes and 7 values
        assert_eq!(b.len(), 14 + (4 + 3 + 8) + (4 + 1 + 8) + 7 * 8);
    }

    #[test]
    fn corrupt_or_mismatched_checkpoints_fail() {
        let b = encode(&store());
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut v = b.clone();
        v[6] = 9;
        assert!(decode(&v).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &store()).unwrap();
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(3, 2));
        other.add("b", Tensor::scalar(0.0));
        assert!(matches!(load_into(&p, &mut other), Err(Error::Format { .. })));
        let missing = load_into(&dir.path().join("none.ckpt"), &mut other).unwrap_err();
        assert_eq!(missing.exit_code(), 3);
    }
}
