use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named parameters; iteration is in name order, which fixes every
/// accumulation and serialization order downstream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn max_abs(&self) -> T {
        self.params.values().fold(T::zero(), |m, t| m.max(t.max_abs()))
    }

    /// Merge another store; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::Graph(format!("duplicate parameter {k}")));
            }
            self.params.insert(k, v);
        }
        Ok(())
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Clamp every parameter entry to `[-c, c]`.
pub fn clip_weights<T: Real>(store: &mut ParamStore<T>, c: T) {
    assert!(c > T::zero(), "clip bound must be positive");
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = v.max(-c).min(c);
        }
    }
}

/// RMSProp with per-parameter squared-gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub lr: T,
    pub decay: T,
    acc: BTreeMap<String, Tensor<T>>,
}

const RMS_EPS: f64 = 1e-8;

impl<T: Real> RmsProp<T> {
    pub fn new(lr: T, decay: T) -> Self {
        Self {
            lr,
            decay,
            acc: BTreeMap::new(),
        }
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor<T>> {
        self.acc.get(name)
    }

    /// Apply one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = store
                .get(name)
                .ok_or_else(|| Error::Graph(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    node: name.clone(),
                    expected: format!("{:?}", p.shape()),
                    actual: format!("{:?}", g.shape()),
                });
            }
        }
        let eps = T::lit(RMS_EPS);
        let one = T::one();
        for (name, g) in grads {
            let p = store.get_mut(name).expect("checked above");
            let acc = self.acc.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            if acc.shape() != g.shape() {
                return Err(Error::Shape {
                    node: format!("accumulator {name}"),
                    expected: format!("{:?}", acc.shape()),
                    actual: format!("{:?}", g.shape()),
                });
            }
            for ((w, a), &gv) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                *a = self.decay * *a + (one - self.decay) * gv * gv;
                *w -= self.lr * gv / (*a + eps).sqrt();
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"SSYNPARM";
const VERSION: u32 = 1;

/// Serialize parameters: magic, version, count, then per parameter the
/// name length, name, rank, dims and little-endian `f32` values.
pub fn checkpoint_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(bad("truncated"));
        }
        let (a, b) = r.split_at(n);
        r = b;
        Ok(a)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = u32_at(take(4)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("shape overflows"))?;
        let raw = take(n.checked_mul(4).ok_or_else(|| bad("shape overflows"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if store.get(&name).is_some() {
            return Err(bad(&format!("duplicate parameter {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}
