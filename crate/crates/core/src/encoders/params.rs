//! Named parameter storage and batch-norm running statistics.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{contract_err, Result};
use crate::rng;
use crate::tensor::{BnRunning, Scalar, Tensor};

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    /// Uniform(±1/√fan_in) init drawn from a stream keyed by the parameter's position.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, seed: u64) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut r = rng::stream(seed, &[0x9a2a, self.tensors.len() as u64]);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(r.random_range(-bound..bound))).collect();
        self.insert(name, Tensor::new(shape, data).expect("valid shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, checking names and shapes agree.
    pub fn assign(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(contract_err(format!("expected {} parameters, got {}", self.len(), named.len())));
        }
        for (name, t) in named {
            let id = self.id(&name).ok_or_else(|| contract_err(format!("unknown parameter {name}")))?;
            if t.shape() != self.tensors[id].shape() {
                return Err(contract_err(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    self.tensors[id].shape()
                )));
            }
            self.tensors[id] = t;
        }
        Ok(())
    }
}

/// Named batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnSet<T> {
    names: Vec<String>,
    stats: Vec<BnRunning<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> BnSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), stats: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, channels: usize) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate batch norm {name}");
        let id = self.stats.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.stats.push(BnRunning::new(channels));
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &BnRunning<T> {
        &self.stats[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut BnRunning<T> {
        &mut self.stats[id]
    }

    /// Running mean and variance as named tensors, for checkpoints.
    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.len());
        for (name, st) in self.names.iter().zip(&self.stats) {
            let c = st.channels();
            out.push((format!("{name}.running_mean"), Tensor::new([c], st.mean.clone()).expect("c > 0")));
            out.push((format!("{name}.running_var"), Tensor::new([c], st.var.clone()).expect("c > 0")));
        }
        out
    }

    pub fn assign(&mut self, named: &HashMap<String, Tensor<T>>) -> Result<()> {
        for (name, st) in self.names.iter().zip(&mut self.stats) {
            let get = |suffix: &str| {
                named
                    .get(&format!("{name}.{suffix}"))
                    .filter(|t| t.len() == st.channels())
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| contract_err(format!("missing or mis-sized {name}.{suffix}")))
            };
            let (mean, var) = (get("running_mean")?, get("running_var")?);
            st.mean = mean;
            st.var = var;
        }
        Ok(())
    }
}
