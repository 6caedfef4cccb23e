//! Versioned binary checkpoints: a JSON metadata record, a shape table and
//! little-endian `f64` payloads, closed by a SHA-256 trailer.
//!
//! Layout: `MAGIC | u32 version | u32 meta_len | meta | u32 count |
//! count × (u16 name_len | name | u8 ndim | ndim × u64) | payloads | sha256`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DBCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, Value>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), Value::String(kind.into()));
        Self { meta, tensors: Vec::new() }
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(Value::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(Value::as_u64)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every parameter of `ps` under `prefix/`.
    pub fn add_store(&mut self, prefix: &str, ps: &ParamStore) {
        for (name, t) in ps.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn has_store(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Overwrites `ps` from the tensors under `prefix/`. Names and shapes
    /// must match exactly in both directions.
    pub fn load_store(&self, prefix: &str, ps: &mut ParamStore) -> Result<()> {
        let p = format!("{prefix}/");
        let stored: BTreeMap<&str, &Tensor> = self.tensors.iter().filter_map(|(n, t)| n.strip_prefix(&p).map(|k| (k, t))).collect();
        if stored.len() != ps.len() {
            return Err(Error::Checkpoint(format!("'{prefix}' holds {} tensors but the model has {}", stored.len(), ps.len())));
        }
        for pid in 0..ps.len() {
            let name = ps.name(pid).to_string();
            let t = stored.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("'{prefix}' lacks parameter '{name}'")))?;
            if t.shape() != ps.get(pid).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    ps.get(pid).shape()
                )));
            }
            ps.set(pid, (*t).clone());
        }
        Ok(())
    }

    pub fn add_adam(&mut self, prefix: &str, opt: &Adam) {
        self.set_meta(&format!("{prefix}.step"), opt.step);
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            self.push(format!("{prefix}/m{i}"), m.clone());
            self.push(format!("{prefix}/v{i}"), v.clone());
        }
    }

    pub fn load_adam(&self, prefix: &str, opt: &mut Adam) -> Result<()> {
        opt.step = self.meta_u64(&format!("{prefix}.step")).ok_or_else(|| Error::Checkpoint(format!("optimizer '{prefix}' missing")))?;
        for i in 0..opt.m.len() {
            for (slot, key) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let t = self
                    .get(&format!("{prefix}/{key}{i}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer '{prefix}' lacks {key}{i}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("optimizer '{prefix}' {key}{i} shape mismatch")));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
        out.extend_from_slice(&meta);
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u8(t.shape().len() as u8).unwrap();
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
        }
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.write_f64::<LittleEndian>(x).unwrap();
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (file truncated or corrupted)"));
        }
        let mut r = Cursor::new(&body[4..]);
        let eof = |_| bad("unexpected end of checkpoint");
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(eof)?;
        let meta: BTreeMap<String, Value> = serde_json::from_slice(&meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = r.read_u8().map_err(eof)? as usize;
            let shape =
                (0..ndim).map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>().map_err(eof)?;
            table.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(eof)?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if (r.position() as usize) != body.len() - 4 {
            return Err(bad("trailing bytes after tensor payloads"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// One-line-per-entry summary for inspection tools.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let scalars: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        out.push_str(&format!("tensors = {} ({scalars} values)\n", self.tensors.len()));
        for (name, t) in &self.tensors {
            out.push_str(&format!("  {name} {:?}\n", t.shape()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        Conv2d::k3(&mut ps, "a", 2, 3, &mut rng);
        Conv2d::k3(&mut ps, "b", 3, 1, &mut rng);
        ps
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ps = store(1);
        let mut opt = Adam::new(&ps);
        opt.step = 7;
        opt.m[0].data_mut()[0] = 0.25;
        let mut ck = Checkpoint::new("test");
        ck.set_meta("config_hash", "abc");
        ck.add_store("model", &ps);
        ck.add_adam("opt", &opt);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.kind(), Some("test"));
        assert_eq!(back.meta_str("config_hash"), Some("abc"));
        let mut other = store(2);
        back.load_store("model", &mut other).unwrap();
        assert_eq!(other.content_hash(), ps.content_hash());
        let mut opt2 = Adam::new(&ps);
        back.load_adam("opt", &mut opt2).unwrap();
        assert_eq!(opt2.step, 7);
        assert_eq!(opt2.m[0].data()[0], 0.25);
    }

    #[test]
    fn corruption_and_mismatch_detected() {
        let ps = store(1);
        let mut ck = Checkpoint::new("test");
        ck.add_store("model", &ps);
        let mut bytes = ck.to_bytes();
        bytes[40] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut wrong = ParamStore::new();
        Conv2d::k3(&mut wrong, "a", 2, 4, &mut rng);
        Conv2d::k3(&mut wrong, "b", 4, 1, &mut rng);
        assert!(matches!(ck.load_store("model", &mut wrong), Err(Error::Checkpoint(_))));
    }
}
