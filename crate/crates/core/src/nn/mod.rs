//! Parameter registry and the small set of layers shared by the encoder,
//! the denoiser, and the conditioning heads.
//!
//! Every learnable tensor is a [`Param`] registered under a dotted path in a
//! [`ParamStore`]. A parameter's trainability is a runtime flag: frozen
//! parameters are handed to the graph detached, so they never receive a
//! gradient and never show up in a `GradStore`.

mod im2col;
mod layers;
pub mod ops;

pub use layers::{upsample_nearest2x, BatchNorm1d, Conv2d, GroupNorm, LayerNorm, Linear, SpatialShape};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Uniform { bound: f64 },
}

impl Init {
    /// Whether two draws of this initializer differ with probability one.
    pub fn is_random(&self) -> bool {
        matches!(self, Init::Normal { .. } | Init::Uniform { .. })
    }

    fn sample(&self, shape: &Shape, dtype: DType, device: &Device, rng: &mut impl Rng) -> Result<Tensor> {
        let n = shape.elem_count();
        let values: Vec<f64> = match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidArgument(format!("normal init: {e}")))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::InvalidArgument(format!("uniform init: {e}")))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimizable weight.
    Weight,
    /// Running statistic; checkpointed but never optimized.
    Buffer,
}

#[derive(Debug)]
struct ParamInner {
    name: String,
    var: Var,
    init: Init,
    kind: ParamKind,
    trainable: AtomicBool,
}

#[derive(Debug, Clone)]
pub struct Param(Arc<ParamInner>);

impl Param {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn var(&self) -> &Var {
        &self.0.var
    }

    pub fn kind(&self) -> ParamKind {
        self.0.kind
    }

    pub fn init(&self) -> Init {
        self.0.init
    }

    pub fn is_trainable(&self) -> bool {
        self.0.kind == ParamKind::Weight && self.0.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.trainable.store(trainable, Ordering::Relaxed);
    }

    /// The tensor to use inside a forward pass: tracked when trainable,
    /// detached otherwise.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.0.var.as_tensor().clone()
        } else {
            self.0.var.as_tensor().detach()
        }
    }

    /// Current value, always detached.
    pub fn value(&self) -> Tensor {
        self.0.var.as_tensor().detach()
    }

    pub fn set(&self, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.0.var.dtype())?;
        // A fresh contiguous copy never aliases the variable's own storage.
        let value = value.copy()?;
        self.0.var.set(&value)?;
        Ok(())
    }

    pub fn elem_count(&self) -> usize {
        self.0.var.elem_count()
    }

    pub fn reinit(&self, rng: &mut ChaCha8Rng) -> Result<()> {
        let v = self.0.var.as_tensor();
        let fresh = self.0.init.sample(v.shape(), v.dtype(), v.device(), rng)?;
        self.set(&fresh)
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Arc<Mutex<BTreeMap<String, Param>>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Param>> {
        self.params.lock().expect("parameter store poisoned")
    }

    pub fn builder(&self, prefix: &str, rng: ChaCha8Rng) -> Builder {
        Builder {
            store: self.clone(),
            prefix: prefix.to_string(),
            rng: Arc::new(Mutex::new(rng)),
        }
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.lock().get(name).cloned()
    }

    /// All parameters and buffers, sorted by name.
    pub fn all(&self) -> Vec<Param> {
        self.lock().values().cloned().collect()
    }

    pub fn weights(&self) -> Vec<Param> {
        self.all()
            .into_iter()
            .filter(|p| p.kind() == ParamKind::Weight)
            .collect()
    }

    pub fn trainable(&self) -> Vec<Param> {
        self.all().into_iter().filter(Param::is_trainable).collect()
    }

    pub fn with_prefix(&self, prefix: &str) -> Vec<Param> {
        self.all()
            .into_iter()
            .filter(|p| p.name().starts_with(prefix))
            .collect()
    }

    pub fn remove_prefix(&self, prefix: &str) -> usize {
        let mut map = self.lock();
        let before = map.len();
        map.retain(|k, _| !k.starts_with(prefix));
        before - map.len()
    }

    pub fn set_trainable_prefix(&self, prefix: &str, trainable: bool) {
        for p in self.with_prefix(prefix) {
            p.set_trainable(trainable);
        }
    }

    /// Snapshot of every value, keyed by parameter name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .iter()
            .map(|(k, p)| (k.clone(), p.value()))
            .collect()
    }

    /// Copies matching tensors into the store. Returns the names that were
    /// present in `tensors` but not registered in the store.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let map = self.lock();
        let mut unknown = Vec::new();
        for (name, value) in tensors {
            match map.get(name) {
                Some(p) => {
                    if p.var().shape() != value.shape() {
                        return Err(Error::Checkpoint(format!(
                            "{name}: stored shape {:?} vs model shape {:?}",
                            value.shape(),
                            p.var().shape()
                        )));
                    }
                    p.set(value)?;
                }
                None => unknown.push(name.clone()),
            }
        }
        Ok(unknown)
    }

    fn insert(&self, param: Param) -> Result<Param> {
        let mut map = self.lock();
        if map.contains_key(param.name()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {} registered twice",
                param.name()
            )));
        }
        map.insert(param.name().to_string(), param.clone());
        Ok(param)
    }
}

/// Scoped constructor for parameters, in the spirit of a var-builder.
#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl Builder {
    pub fn pp(&self, name: impl AsRef<str>) -> Builder {
        Builder {
            store: self.store.clone(),
            prefix: self.path(name.as_ref()),
            rng: self.rng.clone(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn create(&self, name: &str, shape: impl Into<Shape>, init: Init, kind: ParamKind) -> Result<Param> {
        let shape = shape.into();
        let value = {
            let mut rng = self.rng.lock().expect("rng poisoned");
            init.sample(&shape, self.store.dtype, &self.store.device, &mut *rng)?
        };
        let param = Param(Arc::new(ParamInner {
            name: self.path(name),
            var: Var::from_tensor(&value)?,
            init,
            kind,
            trainable: AtomicBool::new(kind == ParamKind::Weight),
        }));
        self.store.insert(param)
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Param> {
        self.create(name, shape, init, ParamKind::Weight)
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Param> {
        self.create(name, shape, init, ParamKind::Buffer)
    }
}
