//! Named-parameter archive (`HVCK`).
//!
//! Layout: magic, u32 version, then until end of file, per parameter:
//! u32 name length, UTF-8 name, u8 dtype tag, u32 rank, u64 extents and
//! little-endian values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HVCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, dtype: DType, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(dtype as u8);
        let shape = p.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            match dtype {
                DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads an archive. Every parameter comes back trainable and without decay;
/// callers copy values into a model built from its config via
/// [`ParamStore::load_from`].
pub fn read_checkpoint<R: Read>(mut r: R, origin: &Path) -> Result<ParamStore> {
    let bad = |message: String| Error::Format {
        path: origin.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing HVCK header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut pos = 8;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(bad(format!("truncated while reading {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut store = ParamStore::new();
    while let Ok(b) = take(4, "name length") {
        let name_len = u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len, "name")?.to_vec())
            .map_err(|_| bad("parameter name is not UTF-8".into()))?;
        let tag = take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| bad(format!("unknown dtype tag {tag} for `{name}`")))?;
        let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8, "extent")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * dtype.width(), "values")?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        store.add(&name, Tensor::new(shape, data)?, true, false)?;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last parameter".into()));
    }
    Ok(store)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let file = fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(store, DType::F64, &mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let file = fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a.weight",
            Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap(),
            true,
            true,
        )
        .unwrap();
        s.add("b", Tensor::scalar(0.5), false, false).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = sample_store();
        let mut bytes = Vec::new();
        write_checkpoint(&s, DType::F64, &mut bytes).unwrap();
        let back = read_checkpoint(&bytes[..], Path::new("mem")).unwrap();
        assert_eq!(
            back.get(back.id("a.weight").unwrap()).tensor,
            s.get(s.id("a.weight").unwrap()).tensor
        );
        assert_eq!(back.get(back.id("b").unwrap()).tensor.shape(), &[] as &[usize]);
        let mut again = Vec::new();
        write_checkpoint(&back, DType::F64, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncation_and_bad_tags_are_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample_store(), DType::F64, &mut bytes).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        let mut bad = bytes.clone();
        bad[8 + 4 + 8] = 9;
        assert!(read_checkpoint(&bad[..], Path::new("mem")).is_err());
    }

    #[test]
    fn f32_archive_reads_back_rounded() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample_store(), DType::F32, &mut bytes).unwrap();
        let back = read_checkpoint(&bytes[..], Path::new("mem")).unwrap();
        let t = &back.get(back.id("a.weight").unwrap()).tensor;
        assert_eq!(t.data()[1], -2.5);
        assert_eq!(t.data()[4], 0.0);
    }
}
