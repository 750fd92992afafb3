//! Named, layer-tagged parameter storage with per-layer trainability.
//!
//! Every model keeps its weights in a [`ParamStore`]. Each parameter carries a
//! layer id; the store's trainable set decides which parameters are handed to
//! optimizers and which are read detached during forward passes. Frozen
//! parameters never enter an optimizer, so their values stay bit-identical.

use std::collections::{BTreeSet, HashMap};

use candle_core::{DType, Device, Tensor, Var};

use crate::checkpoint::{NamedTensor, TensorData};
use crate::error::{FactoryError, Result};

/// Whether a forward pass should record gradients for trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tracking {
    /// Trainable parameters are live variables; frozen ones are detached.
    On,
    /// Everything is detached (pure inference, or a network that only passes gradients through).
    Off,
}

#[derive(Debug)]
struct Param {
    name: String,
    layer: usize,
    var: Var,
}

#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    trainable: BTreeSet<usize>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            trainable: BTreeSet::new(),
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

    pub fn add(&mut self, name: &str, layer: usize, dims: &[usize], values: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(FactoryError::config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            layer,
            var: Var::from_tensor(&t)?,
        });
        Ok(())
    }

    fn param(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| FactoryError::config(format!("unknown parameter `{name}`")))
    }

    /// Tensor view of a parameter for use in a forward pass.
    pub fn get(&self, name: &str, tracking: Tracking) -> Result<Tensor> {
        let p = self.param(name)?;
        if tracking == Tracking::On && self.trainable.contains(&p.layer) {
            Ok(p.var.as_tensor().clone())
        } else {
            Ok(p.var.as_tensor().detach())
        }
    }

    /// The live variable, regardless of trainability. Used by gradient checks.
    pub fn var(&self, name: &str) -> Result<&Var> {
        Ok(&self.param(name)?.var)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn layer_of(&self, name: &str) -> Result<usize> {
        Ok(self.param(name)?.layer)
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.params.iter().map(|p| p.layer).collect()
    }

    pub fn set_trainable(&mut self, layers: BTreeSet<usize>) {
        self.trainable = layers;
    }

    pub fn trainable(&self) -> &BTreeSet<usize> {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.trainable.contains(&self.param(name)?.layer))
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .iter()
            .filter(|p| self.trainable.contains(&p.layer))
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.param(name)?.var.as_tensor();
        Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// All parameter values of one layer, concatenated in registration order.
    pub fn layer_values(&self, layer: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.layer == layer) {
            out.extend(self.values(&p.name)?);
        }
        Ok(out)
    }

    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let p = self.param(name)?;
        let t = Tensor::from_slice(values, p.var.shape(), &self.device)?.to_dtype(self.dtype)?;
        p.var.set(&t)?;
        Ok(())
    }

    /// Independent copy: new storage for every parameter, same trainable set.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for p in &self.params {
            let t = p.var.as_tensor().copy()?;
            out.index.insert(p.name.clone(), out.params.len());
            out.params.push(Param {
                name: p.name.clone(),
                layer: p.layer,
                var: Var::from_tensor(&t)?,
            });
        }
        out.trainable = self.trainable.clone();
        Ok(out)
    }

    pub fn to_named_tensors(&self) -> Result<Vec<NamedTensor>> {
        self.params
            .iter()
            .map(|p| {
                let t = p.var.as_tensor();
                let data = match self.dtype {
                    DType::F64 => TensorData::F64(t.flatten_all()?.to_vec1::<f64>()?),
                    _ => TensorData::F32(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?),
                };
                Ok(NamedTensor {
                    name: p.name.clone(),
                    dims: t.dims().to_vec(),
                    data,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_named(&self, tensors: &[NamedTensor]) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for p in &self.params {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| FactoryError::config(format!("checkpoint is missing `{}`", p.name)))?;
            if t.dims != p.var.dims() {
                return Err(FactoryError::config(format!(
                    "checkpoint `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.dims,
                    p.var.dims()
                )));
            }
            let values = Tensor::from_vec(t.data.to_f64(), t.dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            p.var.set(&values)?;
        }
        Ok(())
    }
}
