//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//! magic `PGN1`, u32 parameter count, then per parameter: u32 name length,
//! UTF-8 name, u32 rank, rank u32 dims, and the values as raw 32-bit floats
//! in row-major order. Reading a file and writing it back reproduces the
//! bytes exactly.

use crate::error::{Error, Result};
use rand::Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PGN1";

/// One named tensor with an optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// Named parameters in stable insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    UniformFanIn,
    Const(f64),
    Zero,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; duplicate names are a programming error.
    pub fn add<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut R) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let n = rows * cols;
        let values = match init {
            Init::UniformFanIn => {
                let limit = 1.0 / (rows as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
            Init::Const(v) => vec![v; n],
            Init::Zero => vec![0.0; n],
        };
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            values,
            grad: None,
        });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Names matching a dotted prefix (e.g. `proposal.`), insertion order.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `scale * grad` into the named parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64], scale: f64) -> Result<()> {
        let e = self
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if grad.len() != e.values.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for parameter {name:?} of length {}",
                grad.len(),
                e.values.len()
            )));
        }
        let buf = e.grad.get_or_insert_with(|| vec![0.0; grad.len()]);
        for (b, &g) in buf.iter_mut().zip(grad) {
            *b += g * scale;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Fills a zero gradient for every named parameter that received none
    /// this step (a parameter the loss does not touch has gradient zero,
    /// e.g. a per-class head whose class was absent from the batch).
    pub fn ensure_grads(&mut self, names: &[String]) -> Result<()> {
        for name in names {
            let e = self
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
            if e.grad.is_none() {
                e.grad = Some(vec![0.0; e.values.len()]);
            }
        }
        Ok(())
    }

    /// Merges every entry of `other` into this store; name collisions error.
    pub fn merge(&mut self, other: ParameterStore) -> Result<()> {
        for e in other.entries {
            if self.index.contains_key(&e.name) {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} present in both stores",
                    e.name
                )));
            }
            self.index.insert(e.name.clone(), self.entries.len());
            self.entries.push(e);
        }
        Ok(())
    }

    /// Saves entries (optionally restricted to a name prefix) in the `PGN1`
    /// binary format. Values are truncated to f32.
    pub fn save(&self, path: &Path, prefix: Option<&str>) -> Result<()> {
        let selected: Vec<&ParamEntry> = self
            .entries
            .iter()
            .filter(|e| prefix.is_none_or(|p| e.name.starts_with(p)))
            .collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(selected.len() as u32).to_le_bytes())?;
        for e in selected {
            let name = e.name.as_bytes();
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name)?;
            f.write_all(&2u32.to_le_bytes())?;
            f.write_all(&(e.rows as u32).to_le_bytes())?;
            f.write_all(&(e.cols as u32).to_le_bytes())?;
            for &v in &e.values {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Loads a `PGN1` checkpoint into a fresh store (file order preserved).
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad checkpoint magic {magic:?} in {}",
                path.display()
            )));
        }
        let count = read_u32(&mut f)? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            f.read_exact(&mut name_bytes)
                .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("non-UTF-8 parameter name: {e}")))?;
            let rank = read_u32(&mut f)? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("bad rank {rank} for {name:?}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut f)? as usize);
            }
            let n: usize = dims.iter().product();
            let (rows, cols) = match rank {
                1 => (1, dims[0]),
                2 => (dims[0], dims[1]),
                _ => (dims[0], n / dims[0].max(1)),
            };
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                f.read_exact(&mut buf).map_err(|e| {
                    Error::Checkpoint(format!("truncated values for {name:?}: {e}"))
                })?;
                values.push(f32::from_le_bytes(buf) as f64);
            }
            if store.index.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate parameter {name:?}")));
            }
            store.index.insert(name.clone(), store.entries.len());
            store.entries.push(ParamEntry {
                name,
                rows,
                cols,
                values,
                grad: None,
            });
        }
        Ok(store)
    }
}

fn read_u32<R: Read>(f: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_keeps_insertion_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new();
        s.add("b.w", 2, 3, Init::UniformFanIn, &mut rng);
        s.add("a.w", 1, 4, Init::Zero, &mut rng);
        s.add("b.bias", 1, 3, Init::Const(1.0), &mut rng);
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["b.w", "a.w", "b.bias"]);
        assert_eq!(s.names_with_prefix("b."), vec!["b.w", "b.bias"]);
        assert_eq!(s.get("b.bias").unwrap().values, vec![1.0; 3]);
    }

    #[test]
    fn grad_accumulation_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        s.add("w", 1, 2, Init::Zero, &mut rng);
        s.accumulate_grad("w", &[1.0, 2.0], 0.5).unwrap();
        s.accumulate_grad("w", &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(s.get("w").unwrap().grad.as_deref(), Some(&[1.0, 2.0][..]));
        assert!(s.accumulate_grad("w", &[1.0], 1.0).is_err());
        assert!(s.accumulate_grad("nope", &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParameterStore::new();
        s.add("proposal.enc.w", 7, 5, Init::UniformFanIn, &mut rng);
        s.add("proposal.enc.b", 1, 5, Init::Const(0.25), &mut rng);
        s.add("reasoning.u", 3, 3, Init::UniformFanIn, &mut rng);

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        s.save(&p1, None).unwrap();
        let loaded = ParameterStore::load(&p1).unwrap();
        loaded.save(&p2, None).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);

        let names: Vec<&str> = loaded.names().collect();
        assert_eq!(
            names,
            vec!["proposal.enc.w", "proposal.enc.b", "reasoning.u"]
        );
        for (a, b) in s.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.rows, b.rows);
            assert_eq!(a.cols, b.cols);
            for (&x, &y) in a.values.iter().zip(&b.values) {
                assert_eq!(x as f32, y as f32);
            }
        }
    }

    #[test]
    fn checkpoint_prefix_save() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParameterStore::new();
        s.add("proposal.w", 2, 2, Init::UniformFanIn, &mut rng);
        s.add("reasoning.w", 2, 2, Init::UniformFanIn, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.ckpt");
        s.save(&p, Some("proposal.")).unwrap();
        let loaded = ParameterStore::load(&p).unwrap();
        assert_eq!(loaded.len(), 1);
        assert!(loaded.contains("proposal.w"));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(ParameterStore::load(&p).is_err());
        std::fs::write(&p, b"PG").unwrap();
        assert!(ParameterStore::load(&p).is_err());
    }
}
