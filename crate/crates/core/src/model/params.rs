//! Named parameter storage with seeded initialization.
//!
//! candle's own `Init` draws from a thread-local RNG; this store draws from a
//! seeded ChaCha stream instead so that a given seed always produces the same
//! parameters. It plugs into `candle_nn::VarBuilder`, so layers are built with
//! the usual `candle_nn` constructors.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Entry {
    Trainable(Var),
    Frozen(Tensor),
}

impl Entry {
    fn tensor(&self) -> &Tensor {
        match self {
            Entry::Trainable(v) => v.as_tensor(),
            Entry::Frozen(t) => t,
        }
    }
}

#[derive(Debug)]
struct Inner {
    entries: BTreeMap<String, Entry>,
    rng: Option<ChaCha8Rng>,
    trainable: bool,
}

/// A set of named tensors, either all trainable (`Var`) or all frozen.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl ParamStore {
    /// An empty store that creates missing parameters from `seed`.
    pub fn seeded(seed: u64, trainable: bool) -> Self {
        Self::with(BTreeMap::new(), Some(ChaCha8Rng::seed_from_u64(seed)), trainable)
    }

    /// A store over existing tensors; asking for a missing name is an error.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, trainable: bool) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, t) in tensors {
            let entry = if trainable {
                Entry::Trainable(Var::from_tensor(&t.copy()?.detach())?)
            } else {
                Entry::Frozen(t.copy()?.detach())
            };
            entries.insert(name, entry);
        }
        Ok(Self::with(entries, None, trainable))
    }

    fn with(entries: BTreeMap<String, Entry>, rng: Option<ChaCha8Rng>, trainable: bool) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries,
                rng,
                trainable,
            })),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.lock().unwrap().trainable
    }

    /// A detached, frozen deep copy. Further draws are disabled.
    pub fn frozen(&self) -> Result<Self> {
        Self::from_tensors(self.tensors(), false)
    }

    /// A trainable deep copy (fresh `Var`s).
    pub fn trainable_copy(&self) -> Result<Self> {
        Self::from_tensors(self.tensors(), true)
    }

    /// Stops creating parameters on demand.
    pub fn seal(&self) {
        self.inner.lock().unwrap().rng = None;
    }

    /// Snapshot of every tensor by name, in name order.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.inner.lock().unwrap();
        inner
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor().clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let inner = self.inner.lock().unwrap();
        inner.entries.get(name).map(|e| e.tensor().clone())
    }

    /// Trainable variables in name order; empty for a frozen store.
    pub fn vars(&self) -> Vec<Var> {
        let inner = self.inner.lock().unwrap();
        inner
            .entries
            .values()
            .filter_map(|e| match e {
                Entry::Trainable(v) => Some(v.clone()),
                Entry::Frozen(_) => None,
            })
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        let inner = self.inner.lock().unwrap();
        match inner.entries.get(name) {
            Some(Entry::Trainable(v)) => Some(v.clone()),
            _ => None,
        }
    }

    pub fn num_scalars(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner.entries.values().map(|e| e.tensor().elem_count()).sum()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails if any tensor has a NaN or infinite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }
}

fn sample(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..up)).collect()
    };
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            })
            .collect()
    };
    match init {
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = match fan {
                FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
            };
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
                NormalOrUniform::Normal => normal(rng, 0.0, std),
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(entry) = inner.entries.get(name) {
            let t = entry.tensor();
            if t.shape() != &s {
                candle_core::bail!(
                    "parameter {name}: stored shape {:?}, requested {:?}",
                    t.shape(),
                    s
                );
            }
            return t.to_dtype(dtype)?.to_device(dev);
        }
        let trainable = inner.trainable;
        let Some(rng) = inner.rng.as_mut() else {
            candle_core::bail!("parameter {name} is missing");
        };
        let values = sample(h, &s, rng);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let entry = if trainable {
            Entry::Trainable(Var::from_tensor(&t.copy()?.detach())?)
        } else {
            Entry::Frozen(t)
        };
        let out = entry.tensor().clone();
        inner.entries.insert(name.to_string(), entry);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let inner = self.inner.lock().unwrap();
        match inner.entries.get(name) {
            Some(e) => e.tensor().to_dtype(dtype)?.to_device(dev),
            None => candle_core::bail!("parameter {name} is missing"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.lock().unwrap().entries.contains_key(name)
    }
}
