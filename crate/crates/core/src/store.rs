//! Named, shaped trainable arrays with gradient slots, plus the binary
//! checkpoint container.
//!
//! Checkpoint layout: an 8-byte little-endian header length, a UTF-8 JSON
//! header listing entries as `{name, dtype:"f32", shape, offset, byte_length}`
//! (offsets relative to the blob start, entries ordered by name), followed by
//! the contiguous little-endian f32 blob. Gradient slots are scratch state and
//! are not serialized.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

/// Single-writer map of named parameters; safe to read from many threads.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Param<T>>,
    step: u64,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Vec<T>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::invalid(format!(
                "parameter `{name}`: shape {shape:?} does not match length {}",
                value.len()
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let grad = vec![T::zero(); numel];
        self.entries.insert(
            name.to_string(),
            Param {
                shape,
                value,
                grad,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&[T]> {
        Ok(&self.get(name)?.value)
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.get(name)?.shape)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Vec<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&[T]> {
        Ok(&self.get(name)?.grad)
    }

    pub fn accum_grad(&mut self, name: &str, delta: &[T]) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if p.grad.len() != delta.len() {
            return Err(Error::invalid(format!(
                "gradient length mismatch for `{name}`"
            )));
        }
        for (g, d) in p.grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            for g in p.grad.iter_mut() {
                *g = T::zero();
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Move every entry of `other` into self (names must not collide).
    pub fn absorb(&mut self, other: ParameterStore<T>) -> Result<()> {
        for (name, p) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
            }
            self.entries.insert(name, p);
        }
        Ok(())
    }

    /// Clone only the entries under a namespace prefix.
    pub fn subset(&self, prefix: &str) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        out.step = self.step;
        for (name, p) in &self.entries {
            if name.starts_with(prefix) {
                out.entries.insert(name.clone(), p.clone());
            }
        }
        out
    }

    /// Order-stable content hash over names, shapes, and value bits of a
    /// namespace; used to verify freeze contracts.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, p) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            eat(name.as_bytes());
            for &d in &p.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for v in &p.value {
                eat(&v.to_f64().unwrap().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Bit-exact equality of shapes, values, and step; gradients excluded.
    pub fn values_equal(&self, other: &ParameterStore<T>) -> bool {
        if self.step != other.step || self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().zip(other.entries.iter()).all(
            |((an, ap), (bn, bp))| {
                an == bn
                    && ap.shape == bp.shape
                    && ap.value.len() == bp.value.len()
                    && ap
                        .value
                        .iter()
                        .zip(bp.value.iter())
                        .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
            },
        )
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        out.step = self.step;
        for (name, p) in &self.entries {
            out.entries.insert(
                name.clone(),
                Param {
                    shape: p.shape.clone(),
                    value: p
                        .value
                        .iter()
                        .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                        .collect(),
                    grad: vec![U::zero(); p.value.len()],
                },
            );
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_length: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    step: u64,
    entries: Vec<EntryMeta>,
}

impl ParameterStore<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut metas = Vec::with_capacity(self.entries.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, p) in &self.entries {
            let offset = blob.len() as u64;
            for v in &p.value {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            metas.push(EntryMeta {
                name: name.clone(),
                dtype: "f32".to_string(),
                shape: p.shape.clone(),
                offset,
                byte_length: (p.value.len() * 4) as u64,
            });
        }
        let header = CheckpointHeader {
            version: 1,
            step: self.step,
            entries: metas,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .and_then(|_| file.write_all(&header_bytes))
            .and_then(|_| file.write_all(&blob))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParameterStore<f32>> {
        let mut file = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Checkpoint(format!("missing checkpoint file {}", path.display()))
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("file shorter than header length field".into()));
        }
        let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        if 8 + header_len > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "declared header length {header_len} exceeds file size"
            )));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let blob = &bytes[8 + header_len..];
        let mut store = ParameterStore::new();
        store.step = header.step;
        for meta in &header.entries {
            if meta.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "entry `{}`: unsupported dtype `{}`",
                    meta.name, meta.dtype
                )));
            }
            let numel: usize = meta.shape.iter().product();
            if meta.byte_length as usize != numel * 4 {
                return Err(Error::Checkpoint(format!(
                    "entry `{}`: byte_length {} does not match shape {:?}",
                    meta.name, meta.byte_length, meta.shape
                )));
            }
            let start = meta.offset as usize;
            let end = start + meta.byte_length as usize;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "entry `{}`: truncated blob ({} bytes needed, {} available)",
                    meta.name,
                    end,
                    blob.len()
                )));
            }
            let value: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.entries.contains_key(&meta.name) {
                return Err(Error::Checkpoint(format!(
                    "duplicate entry name `{}`",
                    meta.name
                )));
            }
            store
                .insert(&meta.name, meta.shape.clone(), value)
                .map_err(|e| Error::Checkpoint(format!("entry `{}`: {e}", meta.name)))?;
        }
        store.step = header.step;
        Ok(store)
    }
}

pub fn save_checkpoint(params: &ParameterStore<f32>, path: &Path) -> Result<()> {
    params.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore<f32>> {
    ParameterStore::<f32>::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        let store = ParameterStore::<f32>::new();
        store.save(&path).unwrap();
        let loaded = ParameterStore::<f32>::load(&path).unwrap();
        assert!(loaded.is_empty());
        assert!(store.values_equal(&loaded));
    }

    #[test]
    fn small_store_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let mut store = ParameterStore::<f32>::new();
        store.insert("a/w", vec![2, 3], vec![0.0; 6]).unwrap();
        store
            .insert("b/w", vec![4], vec![1.5, -2.25, 3.0e-7, f32::MIN_POSITIVE])
            .unwrap();
        store.set_step(17);
        store.save(&path).unwrap();
        let loaded = ParameterStore::<f32>::load(&path).unwrap();
        assert!(store.values_equal(&loaded));
        // Re-saving the loaded store must reproduce the file byte for byte.
        let path2 = dir.path().join("s2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_files_are_named_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");

        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        let err = ParameterStore::<f32>::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));

        // Valid header, truncated blob.
        let mut store = ParameterStore::<f32>::new();
        store.insert("x", vec![8], vec![1.0; 8]).unwrap();
        store.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        let err = ParameterStore::<f32>::load(&path).unwrap_err();
        match err {
            Error::Checkpoint(msg) => assert!(msg.contains("x"), "message: {msg}"),
            other => panic!("unexpected error {other:?}"),
        }

        // Shape/byte-length mismatch is detected and names the entry.
        let mut store = ParameterStore::<f32>::new();
        store.insert("y", vec![2], vec![1.0, 2.0]).unwrap();
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let tampered = String::from_utf8(bytes[8..8 + hlen].to_vec())
            .unwrap()
            .replace("\"shape\":[2]", "\"shape\":[3]");
        let mut out = Vec::new();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[8 + hlen..]);
        std::fs::write(&path, &out).unwrap();
        let err = ParameterStore::<f32>::load(&path).unwrap_err();
        match err {
            Error::Checkpoint(msg) => assert!(msg.contains("y"), "message: {msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", vec![1], vec![0.0]).unwrap();
        assert!(store.insert("w", vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn fingerprint_tracks_namespace_only() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("face/w", vec![2], vec![1.0, 2.0]).unwrap();
        store.insert("ctx/w", vec![1], vec![3.0]).unwrap();
        let before = store.fingerprint("face/");
        store.value_mut("ctx/w").unwrap()[0] = 9.0;
        assert_eq!(before, store.fingerprint("face/"));
        store.value_mut("face/w").unwrap()[0] = 9.0;
        assert_ne!(before, store.fingerprint("face/"));
    }
}
