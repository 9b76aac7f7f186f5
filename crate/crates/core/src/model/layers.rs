//! Binding of named parameters into a tape, plus the conv/BN/ReLU building
//! blocks shared by the backbones and decoders.

use std::collections::HashMap;

use crate::autodiff::kernels::ConvGeom;
use crate::autodiff::{Gradients, NormMode, Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One forward pass context: a tape plus the parameter leaves bound into it.
///
/// Parameters are bound lazily and at most once, so every use of a
/// parameter within the tape shares one gradient slot.
pub struct Forward<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    /// Normalize with batch statistics (training) instead of running ones.
    pub batch_stats: bool,
    /// Parameters become differentiable leaves.
    pub trainable: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, batch_stats: bool, trainable: bool) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new(), batch_stats, trainable }
    }

    /// Training forward: batch statistics, differentiable parameters.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self::new(store, true, true)
    }

    /// Inference forward: running statistics, constant parameters.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false, false)
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.trainable { self.tape.input(value) } else { self.tape.constant(value) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn conv(&mut self, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.store.contains(&bias_name) { Some(self.param(&bias_name)?) } else { None };
        self.tape.conv2d(x, w, b, geom)
    }

    pub fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        if self.batch_stats {
            self.tape.batch_norm(x, gamma, beta, NormMode::Batch, name)
        } else {
            let store = self.store;
            let mean = store.buffer(&format!("{name}.running_mean"))?.data();
            let var = store.buffer(&format!("{name}.running_var"))?.data();
            self.tape.batch_norm(x, gamma, beta, NormMode::Running { mean, var }, name)
        }
    }

    /// Convolution, batch norm, ReLU.
    pub fn cbr(&mut self, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
        let c = self.conv(name, x, geom)?;
        let n = self.norm(&format!("{name}.bn"), c)?;
        Ok(self.tape.relu(n))
    }

    /// Convolution and batch norm without the activation.
    pub fn cb(&mut self, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
        let c = self.conv(name, x, geom)?;
        self.norm(&format!("{name}.bn"), c)
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> HashMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }
}

pub fn init_cbr<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, seed: u64) {
    store.init_conv(name, cout, cin, k, false, seed);
    store.init_norm(&format!("{name}.bn"), cout);
}

pub const fn same(k: usize, stride: usize) -> ConvGeom {
    ConvGeom::new(stride, k / 2, 1)
}
