//! Named parameter storage with deterministic, order-independent initialization.
//!
//! Every parameter draws its initial values from a ChaCha stream keyed by the
//! store seed and the parameter's full dotted name, so building modules in a
//! different order never changes the weights they receive.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initial value distribution for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
}

impl Init {
    /// PyTorch-style default for linear and conv layers: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    /// He-normal init for ReLU networks.
    pub fn kaiming_normal(fan_in: usize) -> Self {
        Init::Normal {
            std: (2.0 / fan_in.max(1) as f64).sqrt(),
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }
}

enum Entry {
    Var(Var),
    Fixed(Tensor),
}

impl Entry {
    fn tensor(&self) -> &Tensor {
        match self {
            Entry::Var(v) => v.as_tensor(),
            Entry::Fixed(t) => t,
        }
    }
}

struct Inner {
    device: Device,
    dtype: DType,
    seed: u64,
    trainable: bool,
    preloaded: Option<HashMap<String, Tensor>>,
    entries: Mutex<BTreeMap<String, Entry>>,
}

/// Shared registry of named tensors. Trainable stores hand out [`Var`]-backed
/// tensors that collect gradients; frozen stores hand out plain tensors.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
}

impl ParamStore {
    pub fn trainable(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::build(seed, dtype, device, true, None)
    }

    pub fn frozen(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::build(seed, dtype, device, false, None)
    }

    /// A frozen store whose parameters must all come from `tensors`; asking for
    /// a name that is absent is an error rather than a fresh initialization.
    pub fn frozen_from(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self::build(0, dtype, device, false, Some(tensors))
    }

    fn build(
        seed: u64,
        dtype: DType,
        device: &Device,
        trainable: bool,
        preloaded: Option<HashMap<String, Tensor>>,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                device: device.clone(),
                dtype,
                seed,
                trainable,
                preloaded,
                entries: Mutex::new(BTreeMap::new()),
            }),
        }
    }

    pub fn root(&self) -> Params {
        Params {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable
    }

    fn get_or_init(&self, name: &str, shape: Shape, init: Init) -> Result<Tensor> {
        let mut entries = self.inner.entries.lock().expect("param store poisoned");
        if let Some(entry) = entries.get(name) {
            let t = entry.tensor();
            if t.shape() != &shape {
                return Err(Error::shape(format!(
                    "parameter `{name}` requested with shape {shape:?} but exists with {:?}",
                    t.shape()
                )));
            }
            return Ok(t.clone());
        }
        let value = match &self.inner.preloaded {
            Some(map) => {
                let t = map.get(name).ok_or_else(|| {
                    Error::shape(format!("weights file has no tensor named `{name}`"))
                })?;
                if t.dims() != shape.dims() {
                    return Err(Error::shape(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.inner.dtype)?.to_device(&self.inner.device)?
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.inner.seed, name));
                let values = init.sample(shape.elem_count(), &mut rng);
                Tensor::from_vec(values, shape, &self.inner.device)?.to_dtype(self.inner.dtype)?
            }
        };
        let entry = if self.inner.trainable {
            Entry::Var(Var::from_tensor(&value)?)
        } else {
            Entry::Fixed(value)
        };
        let out = entry.tensor().clone();
        entries.insert(name.to_string(), entry);
        Ok(out)
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .filter_map(|(k, e)| match e {
                Entry::Var(v) => Some((k.clone(), v.clone())),
                Entry::Fixed(_) => None,
            })
            .collect()
    }

    /// Snapshot of every parameter value in name order.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor().clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries.keys().cloned().collect()
    }

    pub fn num_elements(&self) -> usize {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries.values().map(|e| e.tensor().elem_count()).sum()
    }

    /// Overwrite a trainable parameter in place. Modules holding the tensor see
    /// the new value because storage is shared.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        match entries.get(name) {
            Some(Entry::Var(v)) => {
                v.set(&value.to_dtype(self.inner.dtype)?)?;
                Ok(())
            }
            Some(Entry::Fixed(_)) => Err(Error::config(format!(
                "parameter `{name}` belongs to a frozen store"
            ))),
            None => Err(Error::config(format!("no parameter named `{name}`"))),
        }
    }

    /// Fill every trainable parameter whose name satisfies `pred` with `value`.
    /// Returns how many parameters were touched.
    pub fn fill_where(&self, pred: impl Fn(&str) -> bool, value: f64) -> Result<usize> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        let mut n = 0;
        for (name, e) in entries.iter() {
            if let Entry::Var(v) = e {
                if pred(name) {
                    let filled = (v.as_tensor().zeros_like()? + value)?;
                    v.set(&filled)?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    /// Load values for existing parameters. With `strict`, every parameter must
    /// be present in `values` and no extra names are allowed.
    pub fn load(&self, values: &BTreeMap<String, Tensor>, strict: bool) -> Result<()> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        if strict {
            if let Some(extra) = values.keys().find(|k| !entries.contains_key(*k)) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint tensor `{extra}` does not match any model parameter"
                )));
            }
        }
        for (name, e) in entries.iter() {
            let Some(src) = values.get(name) else {
                if strict {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint is missing parameter `{name}`"
                    )));
                }
                continue;
            };
            let Entry::Var(v) = e else {
                return Err(Error::config(format!("parameter `{name}` is frozen")));
            };
            if src.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in checkpoint but {:?} in model",
                    src.dims(),
                    v.dims()
                )));
            }
            v.set(&src.to_dtype(self.inner.dtype)?.to_device(&self.inner.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over every parameter's name and little-endian f64 values.
    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut hasher = Sha256::new();
        for (name, t) in self.tensors() {
            hasher.update(name.as_bytes());
            for x in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(hasher.finalize().into())
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A view into a [`ParamStore`] under a dotted name prefix.
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    prefix: String,
}

impl Params {
    pub fn pp(&self, name: impl AsRef<str>) -> Params {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Params {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        self.store.get_or_init(&self.path(name), shape.into(), init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }
}
