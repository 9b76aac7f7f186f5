//! Named parameter storage, initialization and the checkpoint archive.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::autodiff::BatchStats;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running-statistics momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.1;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Trainable parameters and non-trainable buffers, both keyed by
/// hierarchical dotted names such as `main.aspp.b1.conv.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }
}

/// Stable 64-bit FNV-1a hash, used to give every parameter its own stream.
pub(crate) fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn truncated_normal<T: Scalar>(shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(&mut rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable scalar count, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    /// Convolution weight `[cout, cin, k, k]`, truncated-normal, plus an
    /// optional zero bias.
    pub fn init_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, bias: bool, seed: u64) {
        let w = truncated_normal(&[cout, cin, k, k], INIT_STD, seed ^ name_hash(name));
        self.insert(format!("{name}.weight"), w);
        if bias {
            self.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
    }

    pub fn init_norm(&mut self, name: &str, channels: usize) {
        self.insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        self.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = T::of(BN_MOMENTUM);
        for s in stats {
            if let Some(rm) = self.buffers.get_mut(&format!("{}.running_mean", s.name)) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{}.running_var", s.name)) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    /// Copies every parameter and buffer under `from` to the same suffix
    /// under `to`.
    pub fn clone_prefix(&mut self, from: &str, to: &str) {
        let copy = |map: &mut BTreeMap<String, Tensor<T>>| {
            let items: Vec<_> = map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), v.clone())))
                .collect();
            map.extend(items);
        };
        copy(&mut self.params);
        copy(&mut self.buffers);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Writes parameters (prefixed `param/`), buffers (prefixed `buffer/`)
    /// and string metadata into a safetensors archive.
    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let dtype = match T::NAME {
            "f32" => Dtype::F32,
            _ => Dtype::F64,
        };
        let width = std::mem::size_of::<T>();
        let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, map) in [("param/", &self.params), ("buffer/", &self.buffers)] {
            for (k, v) in map {
                let mut bytes = Vec::with_capacity(v.len() * width);
                for &x in v.data() {
                    if width == 4 {
                        bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
                    } else {
                        bytes.extend_from_slice(&x.as_f64().to_le_bytes());
                    }
                }
                raw.push((format!("{prefix}{k}"), v.shape().to_vec(), bytes));
            }
        }
        let views = raw
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(dtype, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Reads an archive written by [`ParamStore::save`], converting the
    /// stored element type to `T`.
    pub fn load(path: &Path) -> Result<(Self, HashMap<String, String>)> {
        let bytes = std::fs::read(path)?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut store = Self::new();
        for (name, view) in st.tensors() {
            let data: Vec<T> = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                Dtype::F64 => {
                    view.data().chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect()
                }
                other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
            };
            let t = Tensor::from_vec(view.shape(), data)?;
            if let Some(k) = name.strip_prefix("param/") {
                store.insert(k, t);
            } else if let Some(k) = name.strip_prefix("buffer/") {
                store.insert_buffer(k, t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected entry {name}")));
            }
        }
        Ok((store, metadata))
    }
}

/// Mixes a run seed with a stream label into an independent seed.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(stream));
    rng.random()
}
