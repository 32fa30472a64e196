//! Versioned binary checkpoints with payload integrity and a config
//! fingerprint guard.
//!
//! Layout: magic, format version, fingerprint, parameter table (name, shape,
//! little-endian f64 data), then a SHA-256 of everything before it. Restoring
//! verifies the checksum, then the fingerprint (unless forced), then loads
//! strictly by name.

use crate::config::hex_string;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GCKP";
const VERSION: u32 = 1;

/// Serialize every parameter in the store.
pub fn save(path: &Path, store: &ParamStore, fingerprint: &str) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let fp = fingerprint.as_bytes();
    buf.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    buf.extend_from_slice(fp);
    let ids: Vec<_> = store.ids().collect();
    buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        let name = store.name(id).as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let v = store.value(id);
        buf.extend_from_slice(&(v.ndim() as u32).to_le_bytes());
        for d in v.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in v.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut h = Sha256::new();
    h.update(&buf);
    let digest = h.finalize();
    buf.extend_from_slice(&digest);
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Restore parameters into the store. `force` skips the fingerprint check
/// but never the integrity check.
pub fn restore(path: &Path, store: &mut ParamStore, fingerprint: &str, force: bool) -> Result<()> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 32 + 12 {
        return Err(Error::Integrity("file too short".into()));
    }
    let (payload, digest) = buf.split_at(buf.len() - 32);
    let mut h = Sha256::new();
    h.update(payload);
    if h.finalize().as_slice() != digest {
        return Err(Error::Integrity(format!(
            "checksum mismatch in {}",
            path.display()
        )));
    }
    let mut cur = payload;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Integrity("truncated checkpoint".into()));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported version {version}")));
    }
    let fp_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let found_fp = String::from_utf8_lossy(take(fp_len)?).into_owned();
    if found_fp != fingerprint && !force {
        return Err(Error::Fingerprint {
            expected: fingerprint.into(),
            found: found_fp,
        });
    }
    let n_params = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut loaded = 0usize;
    for _ in 0..n_params {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(name_len)?).into_owned();
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Integrity(format!("param {name}: {e}")))?;
        match store.id_by_name(&name) {
            Some(id) => {
                if store.value(id).shape() != arr.shape() {
                    return Err(Error::Config(format!(
                        "param {name}: checkpoint shape {:?} vs model {:?}",
                        arr.shape(),
                        store.value(id).shape()
                    )));
                }
                store.set_value(id, arr);
                loaded += 1;
            }
            None => {
                return Err(Error::Config(format!(
                    "checkpoint has unknown parameter {name}"
                )))
            }
        }
    }
    if loaded != store.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {loaded} of {} model parameters",
            store.len()
        )));
    }
    Ok(())
}

/// Fingerprint of a checkpoint file without loading it.
pub fn peek_fingerprint(path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 44 || &buf[0..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint".into()));
    }
    let fp_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    Ok(String::from_utf8_lossy(&buf[12..12 + fp_len]).into_owned())
}

/// SHA-256 of a whole file, hex-encoded; used to compare checkpoints
/// byte-for-byte in tests.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut h = Sha256::new();
    h.update(&buf);
    Ok(hex_string(&h.finalize()))
}
