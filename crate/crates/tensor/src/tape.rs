//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and the recipe for its
//! vector-Jacobian product. `backward` consumes the tape, so the graph of one
//! forward pass is freed after its gradients are taken.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::ops::conv::{conv2d_backward, Conv2dOpts};
use crate::ops::norm::{group_norm_backward, group_norm_with_stats, GroupStats};
use crate::ops::reduce::{
    log_softmax_depth_backward, pool_depth_backward, pool_depth_with_index, softmax_depth_backward,
    PoolMode,
};
use crate::ops::resize::bilinear_resize_backward;
use crate::ops::sample::{bilinear_sample_backward, SampleGrid};
use crate::ops::{self};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    MulChannels(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        opts: Conv2dOpts,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Crop {
        input: Var,
        y0: usize,
        x0: usize,
    },
    StackDepth(Vec<Var>),
    Reshape(Var),
    PoolDepth {
        input: Var,
        mode: PoolMode,
        arg: Vec<u32>,
    },
    Resize(Var),
    Sample {
        input: Var,
        grid: Arc<SampleGrid>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    PickDepth {
        input: Var,
        targets: Arc<Vec<Option<u32>>>,
        coeff: T,
    },
    NegLogPick {
        input: Var,
        targets: Arc<Vec<Option<u32>>>,
        coeff: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created by [`Tape::leaf`]; `None` when the loss
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.remove(&v.0)
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that records values only; parameters enter as constants and no
    /// backward bookkeeping is kept.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    pub fn with_grad(enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: enabled,
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by live node values.
    pub fn live_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.value.as_ref())
            .map(Tensor::nbytes)
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("value of a node consumed by backward")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a named parameter. Repeated loads of one name share a node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Param,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_index.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = zip_map(x, y, |p, q| p + q);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = zip_map(x, y, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = zip_map(x, y, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push("scale", out, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + k);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a), &[a])
    }

    /// `x [C,H,W] * m [1,H,W]`, broadcasting `m` over channels.
    pub fn mul_channels(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(m));
        if xv.rank() != 3 || mv.rank() != 3 || mv.shape()[0] != 1 || xv.shape()[1..] != mv.shape()[1..] {
            return Err(shape_err(
                "mul_channels",
                format!("{:?} * {:?}", xv.shape(), mv.shape()),
            ));
        }
        let hw = mv.len();
        let md = mv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * md[i % hw])
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push("mul_channels", out, Op::MulChannels(x, m), &[x, m])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    // ---- layers ------------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            opts,
        )?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                opts,
            },
            &ins,
        )
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (out, stats) =
            group_norm_with_stats(self.value(input), groups, self.value(gamma), self.value(beta))?;
        self.push(
            "group_norm",
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            },
            &[input, gamma, beta],
        )
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let tail = self.value(inputs[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(shape_err("concat", format!("{:?} vs trailing {:?}", t.shape(), tail)));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat(inputs.to_vec()), inputs)
    }

    /// Slice `[start, start+len)` of axis 0.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input);
        if t.rank() == 0 || start + len > t.shape()[0] {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) of {:?}", start + len, t.shape()),
            ));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, data)?;
        self.push("narrow", out, Op::Narrow { input, start }, &[input])
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of a `[C,H,W]` map.
    pub fn crop(&mut self, input: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(input);
        if t.rank() != 3 || y0 + h > t.shape()[1] || x0 + w > t.shape()[2] {
            return Err(shape_err(
                "crop",
                format!("window ({y0},{x0}) {h}x{w} of {:?}", t.shape()),
            ));
        }
        let (c, iw) = (t.shape()[0], t.shape()[2]);
        let ih = t.shape()[1];
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in y0..y0 + h {
                let row = (ci * ih + y) * iw;
                data.extend_from_slice(&t.data()[row + x0..row + x0 + w]);
            }
        }
        let out = Tensor::new(&[c, h, w], data)?;
        self.push("crop", out, Op::Crop { input, y0, x0 }, &[input])
    }

    /// Stacks `Ds` maps `[C,H,W]` into `[C,Ds,H,W]`.
    pub fn stack_depth(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(invalid("stack_depth", "no inputs"));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        if shape.len() != 3 {
            return Err(shape_err("stack_depth", format!("{shape:?}")));
        }
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let ds = inputs.len();
        let mut data = vec![T::zero(); c * ds * hw];
        for (d, &v) in inputs.iter().enumerate() {
            let t = self.value(v);
            if t.shape() != &shape[..] {
                return Err(shape_err("stack_depth", format!("{:?} vs {shape:?}", t.shape())));
            }
            for ci in 0..c {
                data[(ci * ds + d) * hw..(ci * ds + d + 1) * hw].copy_from_slice(t.channel(ci));
            }
        }
        let out = Tensor::new(&[c, ds, shape[1], shape[2]], data)?;
        self.push("stack_depth", out, Op::StackDepth(inputs.to_vec()), inputs)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(input), &[input])
    }

    pub fn pool_depth(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let (out, arg) = pool_depth_with_index(self.value(input), mode)?;
        self.push("pool_depth", out, Op::PoolDepth { input, mode, arg }, &[input])
    }

    pub fn resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(input), out_h, out_w)?;
        self.push("bilinear_resize", out, Op::Resize(input), &[input])
    }

    /// Bilinear sampling; returns the sampled map and its validity mask.
    pub fn sample(&mut self, input: Var, grid: Arc<SampleGrid>) -> Result<(Var, Tensor<T>)> {
        let (out, mask) = ops::bilinear_sample(self.value(input), &grid)?;
        let v = self.push("bilinear_sample", out, Op::Sample { input, grid }, &[input])?;
        Ok((v, mask))
    }

    pub fn softmax_depth(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_depth(self.value(input))?;
        self.push("softmax_depth", out, Op::Softmax(input), &[input])
    }

    pub fn log_softmax_depth(&mut self, input: Var) -> Result<Var> {
        let out = ops::log_softmax_depth(self.value(input))?;
        self.push("log_softmax_depth", out, Op::LogSoftmax(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push("sum", out, Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = self.sum(input)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `coeff * sum_p x[t(p), p]` over pixels with a target, for `x [D,H,W]`.
    pub fn pick_depth(&mut self, input: Var, targets: Arc<Vec<Option<u32>>>, coeff: T) -> Result<Var> {
        let acc = self.gather_sum("pick_depth", input, &targets, |x| x)?;
        let out = Tensor::scalar(acc * coeff);
        self.push("pick_depth", out, Op::PickDepth { input, targets, coeff }, &[input])
    }

    /// `-coeff * sum_p ln p[t(p), p]` for a probability volume `p [D,H,W]`.
    pub fn neg_log_pick(&mut self, input: Var, targets: Arc<Vec<Option<u32>>>, coeff: T) -> Result<Var> {
        let acc = self.gather_sum("neg_log_pick", input, &targets, |x| x.ln())?;
        let out = Tensor::scalar(-acc * coeff);
        self.push("neg_log_pick", out, Op::NegLogPick { input, targets, coeff }, &[input])
    }

    fn gather_sum(
        &self,
        op: &'static str,
        input: Var,
        targets: &[Option<u32>],
        f: impl Fn(T) -> T,
    ) -> Result<T> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(shape_err(op, format!("expected [D,H,W], got {:?}", x.shape())));
        }
        let (d, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
        if targets.len() != hw {
            return Err(shape_err(op, format!("{} targets for {hw} pixels", targets.len())));
        }
        let mut acc = T::zero();
        for (p, t) in targets.iter().enumerate() {
            if let Some(k) = *t {
                let k = k as usize;
                if k >= d {
                    return Err(invalid(op, format!("target plane {k} >= {d}")));
                }
                acc += f(x.data()[k * hw + p]);
            }
        }
        Ok(acc)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let seed = Tensor::new(self.shape(loss), vec![T::one()])?;
        self.backward_with(vec![(loss, seed)])
    }

    /// Reverse pass seeded with upstream gradients for arbitrary outputs.
    pub fn backward_with(mut self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(TensorError::Internal(format!("seed {v:?} not on this tape")));
            }
            same_shape("backward seed", self.value(v), &g)?;
            top = top.max(v.0 + 1);
            accumulate(&mut grads, &self.nodes, v, g);
        }
        let mut out = Gradients::default();
        let param_of: HashMap<usize, String> =
            self.params.iter().map(|(n, v)| (v.0, n.clone())).collect();
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param => {
                    let name = param_of
                        .get(&i)
                        .ok_or_else(|| TensorError::Internal("unregistered parameter".into()))?;
                    out.params.push((name.clone(), g));
                }
                _ => {
                    let contributions = self.node_vjp(i, &g)?;
                    for (v, t) in contributions {
                        if v.0 >= i {
                            return Err(TensorError::Internal("graph cycle".into()));
                        }
                        accumulate(&mut grads, &self.nodes, v, t);
                    }
                }
            }
            self.nodes[i].value = None;
        }
        out.params.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    fn node_vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = self.nodes[i].value.as_ref().expect("live value");
        let v = |x: Var| self.value(x);
        let res = match &self.nodes[i].op {
            Op::Leaf | Op::Param => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, v(*b), |p, q| p * q)),
                (*b, zip_map(g, v(*a), |p, q| p * q)),
            ],
            Op::Scale(a, k) => {
                let k = *k;
                vec![(*a, g.map(|x| x * k))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Square(a) => vec![(*a, zip_map(g, v(*a), |p, q| p * (q + q)))],
            Op::MulChannels(x, m) => {
                let (xv, mv) = (v(*x), v(*m));
                let hw = mv.len();
                let md = mv.data();
                let dx = Tensor::new(
                    xv.shape(),
                    g.data().iter().enumerate().map(|(j, &gg)| gg * md[j % hw]).collect(),
                )?;
                let mut dm = vec![T::zero(); hw];
                for (j, (&gg, &xx)) in g.data().iter().zip(xv.data()).enumerate() {
                    dm[j % hw] += gg * xx;
                }
                vec![(*x, dx), (*m, Tensor::new(mv.shape(), dm)?)]
            }
            Op::Sigmoid(a) => vec![(*a, zip_map(g, y, |p, s| p * s * (T::one() - s)))],
            Op::Tanh(a) => vec![(*a, zip_map(g, y, |p, t| p * (T::one() - t * t)))],
            Op::Relu(a) => vec![(
                *a,
                zip_map(g, v(*a), |p, x| if x > T::zero() { p } else { T::zero() }),
            )],
            Op::Conv2d {
                input,
                weight,
                bias,
                opts,
            } => {
                let need = (
                    self.nodes[input.0].needs_grad,
                    self.nodes[weight.0].needs_grad,
                    bias.is_some_and(|b| self.nodes[b.0].needs_grad),
                );
                let cg = conv2d_backward(v(*input), v(*weight), *opts, g, need)?;
                let mut r = Vec::new();
                if let Some(t) = cg.input {
                    r.push((*input, t));
                }
                if let Some(t) = cg.weight {
                    r.push((*weight, t));
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    r.push((*b, t));
                }
                r
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) = group_norm_backward(v(*input), *groups, v(*gamma), stats, g);
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Concat(inputs) => {
                let mut off = 0;
                let mut r = Vec::with_capacity(inputs.len());
                for &x in inputs {
                    let n = v(x).len();
                    r.push((x, Tensor::new(v(x).shape(), g.data()[off..off + n].to_vec())?));
                    off += n;
                }
                r
            }
            Op::Narrow { input, start } => {
                let xv = v(*input);
                let inner: usize = xv.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); xv.len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                vec![(*input, Tensor::new(xv.shape(), dx)?)]
            }
            Op::Crop { input, y0, x0 } => {
                let xv = v(*input);
                let (c, ih, iw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let mut dx = vec![T::zero(); xv.len()];
                for ci in 0..c {
                    for y in 0..h {
                        let dst = (ci * ih + y0 + y) * iw + x0;
                        let src = (ci * h + y) * w;
                        dx[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                    }
                }
                vec![(*input, Tensor::new(xv.shape(), dx)?)]
            }
            Op::StackDepth(inputs) => {
                let s = g.shape();
                let (c, ds, hw) = (s[0], s[1], s[2] * s[3]);
                let mut r = Vec::with_capacity(ds);
                for (d, &x) in inputs.iter().enumerate() {
                    let mut dx = Vec::with_capacity(c * hw);
                    for ci in 0..c {
                        dx.extend_from_slice(&g.data()[(ci * ds + d) * hw..(ci * ds + d + 1) * hw]);
                    }
                    r.push((x, Tensor::new(v(x).shape(), dx)?));
                }
                r
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(v(*a).shape())?)],
            Op::PoolDepth { input, mode, arg } => {
                vec![(*input, pool_depth_backward(v(*input).shape(), *mode, arg, g))]
            }
            Op::Resize(a) => vec![(*a, bilinear_resize_backward(v(*a).shape(), g))],
            Op::Sample { input, grid } => {
                vec![(*input, bilinear_sample_backward(v(*input).shape(), grid, g))]
            }
            Op::Softmax(a) => vec![(*a, softmax_depth_backward(y, g))],
            Op::LogSoftmax(a) => vec![(*a, log_softmax_depth_backward(y, g))],
            Op::Sum(a) => {
                let gs = g.item();
                vec![(*a, Tensor::full(v(*a).shape(), gs))]
            }
            Op::PickDepth { input, targets, coeff } => {
                let xv = v(*input);
                let hw = xv.shape()[1] * xv.shape()[2];
                let gs = g.item() * *coeff;
                let mut dx = Tensor::zeros(xv.shape());
                for (p, t) in targets.iter().enumerate() {
                    if let Some(k) = *t {
                        dx.data_mut()[k as usize * hw + p] += gs;
                    }
                }
                vec![(*input, dx)]
            }
            Op::NegLogPick { input, targets, coeff } => {
                let xv = v(*input);
                let hw = xv.shape()[1] * xv.shape()[2];
                let gs = g.item() * *coeff;
                let mut dx = Tensor::zeros(xv.shape());
                for (p, t) in targets.iter().enumerate() {
                    if let Some(k) = *t {
                        let j = k as usize * hw + p;
                        dx.data_mut()[j] -= gs / xv.data()[j];
                    }
                }
                vec![(*input, dx)]
            }
        };
        Ok(res)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
