//! Named parameters, their gradients, and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    fn new(value: Tensor<T>) -> Self {
        let z = Tensor::zeros(value.shape());
        Self {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
        }
    }
}

/// Parameters keyed by unique name, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Parameter<T>>,
    adam_steps: u64,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            adam_steps: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.params.insert(name.to_string(), Parameter::new(value));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.grad)
    }

    /// Replaces a value in place; the shape is fixed at creation.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(shape_err(
                "set_value",
                format!("{name}: {:?} -> {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    /// Adds the parameter gradients of a backward pass into the store.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads.params() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            p.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Uniform initialization in `±1/sqrt(fan_in)` for a conv weight
    /// `[Cout, Cin, k, k]` and its bias.
    pub fn insert_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        self.insert(
            &format!("{prefix}.weight"),
            Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng),
        )?;
        if with_bias {
            self.insert(
                &format!("{prefix}.bias"),
                Tensor::uniform(&[cout], -bound, bound, rng),
            )?;
        }
        Ok(())
    }

    pub fn insert_group_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(&format!("{prefix}.gamma"), Tensor::ones(&[channels]))?;
        self.insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels]))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<T>)> {
        self.params.iter_mut()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step<T: Scalar>(&self, store: &mut ParameterStore<T>) {
        store.adam_steps += 1;
        let t = store.adam_steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step = T::of(self.lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        for (_, p) in store.params_mut() {
            let Parameter { value, grad, m, v } = p;
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                value.data_mut()[i] -= step * mi / ((vi * inv_c2).sqrt() + eps);
            }
            grad.fill(T::zero());
        }
    }
}
