//! Central finite-difference gradient checking in double precision.
//!
//! The checker only evaluates forward passes; the analytic gradient comes
//! from the tape. Relative error is `|a - n| / max(|a|, |n|, floor)`.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates probed per tensor (all when the tensor is smaller).
    pub probes: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            probes: 48,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if self.worst.is_none() || rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((label.to_string(), idx, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_err > self.max_rel_err) {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

fn probe_indices<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, k).into_vec();
        v.sort_unstable();
        v
    }
}

impl GradCheck {
    /// Checks gradients w.r.t. input tensors. `f` builds a scalar loss from
    /// leaves holding `inputs`.
    pub fn inputs<R: Rng, F>(&self, inputs: &[Tensor<f64>], rng: &mut R, f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::no_grad();
            let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let mut report = GradReport::default();
        let mut work = inputs.to_vec();
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            for i in probe_indices(inputs[k].len(), self.probes, rng) {
                let x0 = inputs[k].data()[i];
                work[k].data_mut()[i] = x0 + self.step;
                let up = eval(&work)?;
                work[k].data_mut()[i] = x0 - self.step;
                let dn = eval(&work)?;
                work[k].data_mut()[i] = x0;
                let numeric = (up - dn) / (2.0 * self.step);
                report.record(&format!("input{k}"), i, analytic.data()[i], numeric, self.floor);
            }
        }
        Ok(report)
    }

    /// Checks gradients w.r.t. the named parameters (all when `names` is
    /// `None`). `f` builds a scalar loss from the store.
    pub fn params<R: Rng, F>(
        &self,
        store: &ParameterStore<f64>,
        names: Option<&[&str]>,
        rng: &mut R,
        f: F,
    ) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let grads = tape.backward(loss)?;
        let selected: Vec<String> = match names {
            Some(n) => n.iter().map(|s| s.to_string()).collect(),
            None => store.names().map(str::to_string).collect(),
        };
        let mut work = store.clone();
        let mut report = GradReport::default();
        for name in &selected {
            let base = store
                .value(name)
                .ok_or_else(|| crate::TensorError::UnknownParameter(name.clone()))?
                .clone();
            let analytic = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
            for i in probe_indices(base.len(), self.probes, rng) {
                let mut t = base.clone();
                t.data_mut()[i] = base.data()[i] + self.step;
                work.set_value(name, t.clone())?;
                let up = {
                    let mut tp = Tape::no_grad();
                    let l = f(&mut tp, &work)?;
                    tp.value(l).item()
                };
                t.data_mut()[i] = base.data()[i] - self.step;
                work.set_value(name, t)?;
                let dn = {
                    let mut tp = Tape::no_grad();
                    let l = f(&mut tp, &work)?;
                    tp.value(l).item()
                };
                work.set_value(name, base.clone())?;
                let numeric = (up - dn) / (2.0 * self.step);
                report.record(name, i, analytic.data()[i], numeric, self.floor);
            }
        }
        Ok(report)
    }
}
