//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers `u64` little-endian):
//!
//! ```text
//! magic "VPCNCKPT" | version u8 | record*
//! record := path_len | path (utf-8) | rank | dim * rank | f64 LE * prod(dims)
//! ```
//!
//! Records are written in lexicographic path order. Optimizer moments are
//! stored as `<path>@adam.m` / `<path>@adam.v`; their presence marks a
//! parameter as trainable. `@meta.seed` and `@adam.step` hold the raw bits
//! of the init seed and optimizer step counter.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VPCNCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

const SEED_KEY: &str = "@meta.seed";
const STEP_KEY: &str = "@adam.step";
const M_SUFFIX: &str = "@adam.m";
const V_SUFFIX: &str = "@adam.v";

/// One stored tensor plus its Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Param {
    pub(crate) value: Tensor,
    pub trainable: bool,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Every learnable weight (and normalization buffer) of the network,
/// addressed by a stable dotted path.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, Param>,
    pub(crate) optimizer_step: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: BTreeMap::new(),
            optimizer_step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of Adam updates applied so far.
    pub fn optimizer_step(&self) -> u64 {
        self.optimizer_step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// Paths in lexicographic order.
    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Adds a tensor under a new path.
    pub fn insert(&mut self, path: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(path) || path.contains('@') {
            return Err(Error::InvalidArgument(format!("duplicate or reserved path `{path}`")));
        }
        let value = Tensor::leaf(shape, data, trainable)?;
        let n = value.numel();
        let (m, v) = if trainable {
            (vec![0.0; n], vec![0.0; n])
        } else {
            (Vec::new(), Vec::new())
        };
        self.entries.insert(
            path.to_string(),
            Param {
                value,
                trainable,
                m,
                v,
            },
        );
        Ok(())
    }

    /// Adds a trainable weight drawn uniformly from
    /// `[-sqrt(1/fan_in), sqrt(1/fan_in)]`. The draw depends only on the
    /// store seed and the path, not on insertion order.
    pub fn init_uniform(&mut self, path: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(path));
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(path, shape, data, true)
    }

    pub fn get(&self, path: &str) -> Result<Tensor> {
        self.entries
            .get(path)
            .map(|p| p.value.clone())
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn param(&self, path: &str) -> Result<&Param> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    /// Overwrites a tensor's values, keeping its shape and trainability.
    pub fn set_data(&mut self, path: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))?;
        let shape = p.value.shape().to_vec();
        p.value = Tensor::leaf(&shape, data, p.trainable)?;
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn zero_grad(&self) {
        for p in self.entries.values() {
            p.value.zero_grad();
        }
    }

    /// Euclidean norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|p| p.value.grad())
            .flat_map(|g| g.into_iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient of a trainable parameter, zeros if none has accumulated.
    pub fn grad_of(&self, path: &str) -> Result<Vec<f64>> {
        let p = self.param(path)?;
        Ok(p.value.grad().unwrap_or_else(|| vec![0.0; p.value.numel()]))
    }

    /// True when both stores hold the same paths, shapes, values, moments
    /// and counters, compared bit for bit.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.seed == other.seed
            && self.optimizer_step == other.optimizer_step
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.trainable == b.trainable
                    && a.value.shape() == b.value.shape()
                    && bits(a.value.data()) == bits(b.value.data())
                    && bits(&a.m) == bits(&b.m)
                    && bits(&a.v) == bits(&b.v)
            })
    }

    fn records(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (path, p) in &self.entries {
            out.push((path.clone(), p.value.shape().to_vec(), p.value.data()));
            if p.trainable {
                out.push((format!("{path}{M_SUFFIX}"), p.value.shape().to_vec(), &p.m));
                out.push((format!("{path}{V_SUFFIX}"), p.value.shape().to_vec(), &p.v));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Writes the checkpoint format described in the module docs.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        let seed = [f64::from_bits(self.seed)];
        let step = [f64::from_bits(self.optimizer_step)];
        let mut records = self.records();
        records.push((SEED_KEY.to_string(), vec![1], &seed));
        records.push((STEP_KEY.to_string(), vec![1], &step));
        records.sort_by(|a, b| a.0.cmp(&b.0));
        for (path, shape, data) in records {
            w.write_all(&(path.len() as u64).to_le_bytes())?;
            w.write_all(path.as_bytes())?;
            w.write_all(&(shape.len() as u64).to_le_bytes())?;
            for d in &shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = cur.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut raw: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        let mut last: Option<String> = None;
        while cur.pos < buf.len() {
            let at = cur.pos;
            let len = cur.u64()? as usize;
            let path = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("non-utf8 path at byte {at}")))?;
            if last.as_deref().is_some_and(|l| l >= path.as_str()) {
                return Err(Error::Checkpoint(format!("record `{path}` out of order at byte {at}")));
            }
            let rank = cur.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = cur.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            last = Some(path.clone());
            raw.insert(path, (shape, data));
        }
        let scalar_bits = |raw: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>, key: &str| -> Result<u64> {
            let (_, d) = raw
                .remove(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
            d.first()
                .map(|v| v.to_bits())
                .ok_or_else(|| Error::Checkpoint(format!("empty `{key}`")))
        };
        let seed = scalar_bits(&mut raw, SEED_KEY)?;
        let step = scalar_bits(&mut raw, STEP_KEY)?;
        let mut store = ParamStore::new(seed);
        store.optimizer_step = step;
        let moments: Vec<String> = raw.keys().filter(|k| k.contains('@')).cloned().collect();
        let mut m_bufs = BTreeMap::new();
        let mut v_bufs = BTreeMap::new();
        for key in moments {
            let (_, data) = raw.remove(&key).unwrap();
            if let Some(base) = key.strip_suffix(M_SUFFIX) {
                m_bufs.insert(base.to_string(), data);
            } else if let Some(base) = key.strip_suffix(V_SUFFIX) {
                v_bufs.insert(base.to_string(), data);
            } else {
                return Err(Error::Checkpoint(format!("unknown record `{key}`")));
            }
        }
        for (path, (shape, data)) in raw {
            let trainable = m_bufs.contains_key(&path);
            let value = Tensor::leaf(&shape, data, trainable)
                .map_err(|e| Error::Checkpoint(format!("`{path}`: {e}")))?;
            let n = value.numel();
            let (m, v) = if trainable {
                let m = m_bufs.remove(&path).unwrap();
                let v = v_bufs
                    .remove(&path)
                    .ok_or_else(|| Error::Checkpoint(format!("`{path}` has m but no v")))?;
                if m.len() != n || v.len() != n {
                    return Err(Error::Checkpoint(format!("moment size mismatch for `{path}`")));
                }
                (m, v)
            } else {
                (Vec::new(), Vec::new())
            };
            store.entries.insert(
                path,
                Param {
                    value,
                    trainable,
                    m,
                    v,
                },
            );
        }
        if let Some(orphan) = m_bufs.keys().chain(v_bufs.keys()).next() {
            return Err(Error::Checkpoint(format!("moments for unknown path `{orphan}`")));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(seed);
        s.init_uniform("encoder.mlp0.weight", &[3, 4], 3).unwrap();
        s.insert("encoder.mlp0.bias", &[4], vec![0.0; 4], true).unwrap();
        s.insert("encoder.mlp0.bn.running_var", &[4], vec![1.0; 4], false).unwrap();
        s
    }

    #[test]
    fn init_depends_on_path_not_order() {
        let mut a = ParamStore::new(7);
        a.init_uniform("x", &[2, 2], 2).unwrap();
        a.init_uniform("y", &[2, 2], 2).unwrap();
        let mut b = ParamStore::new(7);
        b.init_uniform("y", &[2, 2], 2).unwrap();
        b.init_uniform("x", &[2, 2], 2).unwrap();
        assert!(a.bit_eq(&b));
        let bound = 0.5f64.sqrt();
        assert!(a.get("x").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn paths_iterate_lexicographically() {
        let s = sample_store(1);
        let paths: Vec<&str> = s.paths().collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut s = sample_store(1);
        assert!(s.insert("encoder.mlp0.bias", &[1], vec![0.0], true).is_err());
    }

    #[test]
    fn bad_magic_and_truncation_are_reported() {
        let bytes = sample_store(3).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let err = ParamStore::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated at byte"));
    }

    proptest! {
        #[test]
        fn save_load_is_bit_exact(seed in any::<u64>(), vals in prop::collection::vec(-1e300f64..1e300, 12)) {
            let mut s = sample_store(seed);
            s.set_data("encoder.mlp0.weight", vals).unwrap();
            s.optimizer_step = seed >> 7;
            let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
            prop_assert!(s.bit_eq(&back));
            prop_assert_eq!(back.to_bytes(), s.to_bytes());
        }
    }
}
