//! Named parameter storage and its binary file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "GFPARAMS"
//! version  u32      1
//! seed     u64
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name bytes (utf-8, "<layer>/<role>")
//!   dtype    u8     1 = f32, 2 = f64
//!   ndim     u32, then ndim x u64 extents
//!   data     product(extents) x dtype-size bytes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::tensor::{DType, Real, Tensor};
use crate::error::{dim_err, input_err, GaitError, Result};

pub const PARAMS_MAGIC: &[u8; 8] = b"GFPARAMS";
pub const PARAMS_VERSION: u32 = 1;

/// Roles holding statistics rather than trainable weights.
pub fn is_buffer_role(role: &str) -> bool {
    role.starts_with("running_")
}

pub type LayerParams<T> = BTreeMap<String, Tensor<T>>;

/// Layer id -> role -> tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    pub seed: u64,
    layers: BTreeMap<String, LayerParams<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            layers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: &str, role: &str, tensor: Tensor<T>) {
        self.layers
            .entry(layer.to_string())
            .or_default()
            .insert(role.to_string(), tensor);
    }

    pub fn layer(&self, layer: &str) -> Option<&LayerParams<T>> {
        self.layers.get(layer)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn get(&self, layer: &str, role: &str) -> Result<&Tensor<T>> {
        self.layers
            .get(layer)
            .and_then(|l| l.get(role))
            .ok_or_else(|| input_err!("parameter {layer}/{role} missing"))
    }

    pub fn get_mut(&mut self, layer: &str, role: &str) -> Result<&mut Tensor<T>> {
        self.layers
            .get_mut(layer)
            .and_then(|l| l.get_mut(role))
            .ok_or_else(|| input_err!("parameter {layer}/{role} missing"))
    }

    /// Mutable access to two roles of the same layer at once.
    pub fn get_pair_mut(&mut self, layer: &str, a: &str, b: &str) -> Result<(&mut Tensor<T>, &mut Tensor<T>)> {
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| input_err!("layer {layer} missing"))?;
        let mut ta = None;
        let mut tb = None;
        for (role, t) in l.iter_mut() {
            if role == a {
                ta = Some(t);
            } else if role == b {
                tb = Some(t);
            }
        }
        match (ta, tb) {
            (Some(x), Some(y)) => Ok((x, y)),
            _ => Err(input_err!("parameters {layer}/{a} and {layer}/{b} required")),
        }
    }

    /// Flat iteration over `(layer, role, tensor)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|(l, roles)| roles.iter().map(move |(r, t)| (l.as_str(), r.as_str(), t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &str, &mut Tensor<T>)> {
        self.layers.iter_mut().flat_map(|(l, roles)| {
            roles
                .iter_mut()
                .map(move |(r, t)| (l.as_str(), r.as_str(), t))
        })
    }

    pub fn tensor_count(&self) -> usize {
        self.layers.values().map(BTreeMap::len).sum()
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.iter()
            .filter(|(_, r, _)| !is_buffer_role(r))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Zero tensors for every trainable entry (gradient / velocity buffers).
    pub fn zeros_like_trainable(&self) -> ParamStore<T> {
        let mut out = ParamStore::new(self.seed);
        for (l, r, t) in self.iter() {
            if !is_buffer_role(r) {
                out.insert(l, r, Tensor::zeros(t.shape()));
            }
        }
        out
    }

    pub fn zero_(&mut self) {
        for (_, _, t) in self.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `tensor` into the existing `layer/role` entry.
    pub fn accumulate(&mut self, layer: &str, role: &str, tensor: &Tensor<T>) -> Result<()> {
        self.get_mut(layer, role)?.add_assign(tensor)
    }

    pub fn accumulate_slice(&mut self, layer: &str, role: &str, values: &[T]) -> Result<()> {
        let t = self.get_mut(layer, role)?;
        if t.len() != values.len() {
            return Err(dim_err!(
                "{layer}/{role} has {} elements, got {}",
                t.len(),
                values.len()
            ));
        }
        for (a, &b) in t.data_mut().iter_mut().zip(values) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, _, t)| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new(self.seed);
        for (l, r, t) in self.iter() {
            out.insert(l, r, t.cast());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensor_count() as u32).to_le_bytes());
        for (l, r, t) in self.iter() {
            let name = format!("{l}/{r}");
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != PARAMS_MAGIC {
            return Err(input_err!("not a parameter file (bad magic)"));
        }
        let version = r.u32()?;
        if version != PARAMS_VERSION {
            return Err(input_err!("unsupported parameter file version {version}"));
        }
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut store = ParamStore::new(seed);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| input_err!("tensor name is not utf-8"))?
                .to_string();
            let (layer, role) = name
                .split_once('/')
                .ok_or_else(|| input_err!("tensor name {name} lacks a layer/role separator"))?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| input_err!("unknown dtype in {name}"))?;
            if dtype != T::DTYPE {
                return Err(input_err!("{name} stored as {dtype:?}, loading as {:?}", T::DTYPE));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.size())?;
            let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            store.insert(layer, role, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(input_err!("{} trailing bytes in parameter file", bytes.len() - r.pos));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| GaitError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GaitError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| GaitError::format(path, e.to_string()))
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(input_err!("unexpected end of data at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new(42);
        s.insert("conv1", "weight", Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| i as f32 * 0.5).collect()).unwrap());
        s.insert("bn1", "gamma", Tensor::full(&[2], 1.0));
        s.insert("bn1", "running_var", Tensor::full(&[2], 1.0));
        s
    }

    #[test]
    fn trainable_excludes_running_stats() {
        let s = sample_store();
        let g = s.zeros_like_trainable();
        assert!(g.get("bn1", "running_var").is_err());
        assert_eq!(g.tensor_count(), 2);
        assert_eq!(s.trainable_len(), 20);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let bytes = sample_store().to_bytes();
        assert!(ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::<f32>::from_bytes(&bad).is_err());
        assert!(ParamStore::<f64>::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f32>(), 1..64), seed in any::<u64>()) {
            let mut s = ParamStore::new(seed);
            let n = values.len();
            s.insert("dense", "weight", Tensor::from_vec(&[1, n], values).unwrap());
            let bytes = s.to_bytes();
            let back = ParamStore::<f32>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let a = s.get("dense", "weight").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            let b = back.get("dense", "weight").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.seed, seed);
        }
    }
}
