//! Named collection of trainable tensors with gradient slots.
//!
//! The on-disk archive is byte-stable across platforms: little-endian
//! integers and doubles throughout, with an FNV-1a checksum of the payload
//! so a corrupted file fails loudly on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;

use crate::scalar::{lit, Scalar};

const MAGIC: &[u8; 8] = b"CVECPRM\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad parameter file: {0}")]
    Format(String),
}

/// One trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn new(shape: Vec<usize>, values: Vec<T>) -> Self {
        let n = values.len();
        assert_eq!(shape.iter().product::<usize>(), n, "param shape/values mismatch");
        Self { shape, values, grad: vec![T::zero(); n] }
    }
}

/// Insertion-ordered store of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<T>) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.entries.insert(name.to_string(), Param::new(shape.to_vec(), values));
    }

    /// Uniform(-a, a) matrix with a = sqrt(6 / (fan_in + fan_out)).
    pub fn insert_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| lit::<T>(rng.gen_range(-a..a))).collect();
        self.insert(name, &[rows, cols], values);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![T::zero(); n]);
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    /// Removes an entry, preserving the order of the rest.
    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.entries.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_index(&self, index: usize) -> &Param<T> {
        self.entries.get_index(index).expect("param index in range").1
    }

    pub fn name_by_index(&self, index: usize) -> &str {
        self.entries.get_index(index).expect("param index in range").0
    }

    pub fn add_grad(&mut self, index: usize, grad: &[T]) {
        let (_, param) = self.entries.get_index_mut(index).expect("param index in range");
        debug_assert_eq!(param.grad.len(), grad.len());
        for (g, d) in param.grad.iter_mut().zip(grad) {
            *g += *d;
        }
    }

    pub fn zero_grads(&mut self) {
        for param in self.entries.values_mut() {
            param.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Global L2 norm over all gradient slots.
    pub fn grad_norm(&self) -> T {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| *g * *g)
            .sum::<T>()
            .sqrt()
    }

    /// Scales all gradients down so the global norm does not exceed `max`.
    pub fn clip_grads(&mut self, max: T) {
        let norm = self.grad_norm();
        if norm > max && norm > T::zero() {
            let s = max / norm;
            for param in self.entries.values_mut() {
                param.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
    }

    /// values -= lr · scale · grad.
    pub fn sgd_step(&mut self, lr: T, scale: T) {
        let step = lr * scale;
        for param in self.entries.values_mut() {
            for (v, g) in param.values.iter_mut().zip(&param.grad) {
                *v -= step * *g;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut payload = Vec::new();
        write_u32(&mut payload, self.entries.len() as u32);
        for (name, param) in &self.entries {
            write_u32(&mut payload, name.len() as u32);
            payload.extend_from_slice(name.as_bytes());
            write_u32(&mut payload, param.shape.len() as u32);
            for &d in &param.shape {
                write_u32(&mut payload, d as u32);
            }
            for v in &param.values {
                let x = v.to_f64().expect("scalar convertible to f64");
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&fnv1a(&payload).to_le_bytes())?;
        w.write_all(&payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ParamError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ParamError::Format(format!("unsupported version {version}")));
        }
        let mut sum = [0u8; 8];
        r.read_exact(&mut sum)?;
        let expect = u64::from_le_bytes(sum);
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if fnv1a(&payload) != expect {
            return Err(ParamError::Format("checksum mismatch (file corrupted)".into()));
        }

        let mut cur = payload.as_slice();
        let count = take_u32(&mut cur)?;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = take_u32(&mut cur)? as usize;
            let name_bytes = take_bytes(&mut cur, name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| ParamError::Format("non-utf8 name".into()))?
                .to_string();
            let ndim = take_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(take_u32(&mut cur)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take_bytes(&mut cur, numel * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| {
                    let x = f64::from_le_bytes(c.try_into().unwrap());
                    T::from_f64(x).ok_or_else(|| ParamError::Format("bad value".into()))
                })
                .collect::<Result<Vec<T>, _>>()?;
            if store.contains(&name) {
                return Err(ParamError::Format(format!("duplicate entry `{name}`")));
            }
            store.insert(&name, &shape, values);
        }
        if !cur.is_empty() {
            return Err(ParamError::Format("trailing bytes".into()));
        }
        Ok(store)
    }
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(r: &mut impl Read) -> Result<u32, ParamError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn take_bytes<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8], ParamError> {
    if cur.len() < n {
        return Err(ParamError::Format("truncated file".into()));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn take_u32(cur: &mut &[u8]) -> Result<u32, ParamError> {
    let b = take_bytes(cur, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert_xavier("layer.w", 3, 4, &mut rng);
        store.insert_zeros("layer.b", &[4]);
        store.insert("scalarish", &[1], vec![0.5]);
        store
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.params");
        let store = sample_store();
        store.save(&path).unwrap();
        let loaded = ParamStore::<f64>::load(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (name, p) in store.iter() {
            let q = loaded.get(name).unwrap();
            assert_eq!(p.shape, q.shape);
            assert_eq!(p.values, q.values);
        }
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let store = sample_store();
        store.save(&a).unwrap();
        store.save(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn corrupted_file_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.params");
        sample_store().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(ParamStore::<f64>::load(&path).is_err());
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", &[2], vec![0.0, 0.0]);
        store.add_grad(0, &[3.0, 4.0]);
        store.clip_grads(2.5);
        assert!((store.grad_norm() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn sgd_step_applies_scaled_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", &[2], vec![1.0, 2.0]);
        store.add_grad(0, &[0.5, -1.0]);
        store.sgd_step(0.1, 2.0);
        let w = store.get("w").unwrap();
        assert_eq!(w.values, vec![1.0 - 0.1 * 2.0 * 0.5, 2.0 + 0.1 * 2.0]);
    }
}
