use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{CogsError, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
}

enum Source {
    Random(ChaCha8Rng),
    Tensors(BTreeMap<String, Tensor>),
}

struct Inner {
    source: Source,
    dtype: DType,
    device: Device,
    trainable: bool,
    created: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

/// Hands out named parameters, either freshly initialised from a seeded
/// stream or read back from a tensor map. Cloning shares the underlying store.
#[derive(Clone)]
pub struct ParamBuilder {
    inner: Rc<RefCell<Inner>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn random(seed: u64, dtype: DType, trainable: bool) -> Self {
        Self::with_source(Source::Random(ChaCha8Rng::seed_from_u64(seed)), dtype, trainable)
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType, trainable: bool) -> Self {
        Self::with_source(Source::Tensors(tensors), dtype, trainable)
    }

    fn with_source(source: Source, dtype: DType, trainable: bool) -> Self {
        let inner = Inner {
            source,
            dtype,
            device: Device::Cpu,
            trainable,
            created: BTreeMap::new(),
            vars: BTreeMap::new(),
        };
        Self { inner: Rc::new(RefCell::new(inner)), prefix: String::new() }
    }

    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Self { inner: self.inner.clone(), prefix }
    }

    pub fn dtype(&self) -> DType {
        self.inner.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.borrow().device.clone()
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape: Shape = shape.into();
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = self.inner.borrow_mut();
        let dtype = inner.dtype;
        let device = inner.device.clone();
        let value = match &mut inner.source {
            Source::Random(rng) => {
                let n = shape.elem_count();
                let vals: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Constant(v) => vec![v; n],
                    Init::Normal { std } => {
                        let d = Normal::new(0.0, std).map_err(|e| CogsError::Config(e.to_string()))?;
                        (0..n).map(|_| d.sample(rng)).collect()
                    }
                    Init::Uniform { lo, hi } => {
                        let d = Uniform::new(lo, hi).map_err(|e| CogsError::Config(e.to_string()))?;
                        (0..n).map(|_| d.sample(rng)).collect()
                    }
                };
                Tensor::from_vec(vals, shape.clone(), &device)?.to_dtype(dtype)?
            }
            Source::Tensors(map) => {
                let t = map
                    .get(&full)
                    .ok_or_else(|| CogsError::Archive(format!("missing tensor `{full}`")))?;
                if t.shape() != &shape {
                    return Err(CogsError::Archive(format!(
                        "tensor `{full}` has shape {:?}, expected {:?}",
                        t.dims(),
                        shape.dims()
                    )));
                }
                t.to_dtype(dtype)?
            }
        };
        let value = if inner.trainable {
            let var = Var::from_tensor(&value)?;
            let t = var.as_tensor().clone();
            inner.vars.insert(full.clone(), var);
            t
        } else {
            value
        };
        inner.created.insert(full, value.clone());
        Ok(value)
    }

    /// All parameters handed out so far, by full name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.inner.borrow().created.clone()
    }

    /// Trainable variables handed out so far, by full name.
    pub fn vars(&self) -> BTreeMap<String, Var> {
        self.inner.borrow().vars.clone()
    }
}
