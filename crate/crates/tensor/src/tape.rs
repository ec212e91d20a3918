use crate::ops;
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<u32>,
    },
    MaxPool2 {
        input: Var,
        argidx: Vec<u32>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Tensor<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Upsample2 {
        input: Var,
    },
    PickCell {
        input: Var,
        i: usize,
        j: usize,
    },
    Crop {
        input: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Values are appended as ops run; [`Tape::backward`] walks the records in
/// reverse and accumulates vector-Jacobian products. Parameters are leaves
/// registered with [`Tape::param`] and keyed by a caller-chosen id.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, Var)>,
    conv_grad_fault: Option<T>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            conv_grad_fault: None,
        }
    }

    /// Scales every convolution-kernel gradient by `factor` during backward.
    /// Only useful as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn inject_conv_grad_fault(&mut self, factor: f64) {
        self.conv_grad_fault = Some(T::from_f64(factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a shared prefix
    /// (e.g. a planned value field) can be reused by many short queries.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|&(_, v)| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input (no gradient is reported for it).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Records a trainable leaf identified by `id`.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Result<Var> {
        let v = self.push(value, Op::Param, "param")?;
        self.params.push((id, v));
        Ok(v)
    }

    pub fn conv2d_same(&mut self, input: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::conv2d_same(self.value(input), self.value(kernels), bias.map(|b| self.value(b)))?;
        self.push(out, Op::Conv2d { input, kernels, bias }, "conv2d_same")
    }

    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let (values, argmax) = ops::channel_max(self.value(input))?;
        let (m, n) = (values.shape()[0], values.shape()[1]);
        let values = values.reshape(&[1, m, n])?;
        self.push(values, Op::ChannelMax { input, argmax }, "channel_max")
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argidx) = ops::maxpool2d(self.value(input))?;
        self.push(out, Op::MaxPool2 { input, argidx }, "maxpool2d")
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::dense(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::Dense { x, w, b }, "dense")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x }, "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                expected: format!("{:?}", va.shape()),
                got: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add { a, b }, "add")
    }

    /// Scalar loss `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), label)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, label, probs },
            "softmax_cross_entropy",
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        self.push(out, Op::Concat { a, b }, "concat_channels")
    }

    pub fn upsample_nearest(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample_nearest(self.value(input))?;
        self.push(out, Op::Upsample2 { input }, "upsample_nearest")
    }

    pub fn pick_cell(&mut self, input: Var, i: usize, j: usize) -> Result<Var> {
        let out = ops::pick_cell(self.value(input), i, j)?;
        self.push(out, Op::PickCell { input, i, j }, "pick_cell")
    }

    pub fn crop(&mut self, input: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = ops::crop(self.value(input), rows, cols)?;
        self.push(out, Op::Crop { input }, "crop")
    }

    /// `sum_i coef_i * x_i` over one-element values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = T::zero();
        let mut recorded = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            let x = self.value(v);
            if x.numel() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    expected: "scalar terms".into(),
                    got: x.shape().to_vec(),
                });
            }
            let c = T::from_f64(c);
            acc += c * x.item();
            recorded.push((v, c));
        }
        self.push(Tensor::scalar(acc), Op::WeightedSum { terms: recorded }, "weighted_sum")
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_shape = self.value(root).shape();
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_shape, T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => continue,
                Op::Param => {
                    g.ensure_finite("backward")?;
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, kernels, bias } => {
                    let (gi, mut gk, gb) = ops::conv2d_same_backward(self.value(*input), self.value(*kernels), &g)?;
                    if let Some(f) = self.conv_grad_fault {
                        gk.scale(f);
                    }
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernels, gk);
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::ChannelMax { input, argmax } => {
                    let gi = ops::channel_max_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::MaxPool2 { input, argidx } => {
                    let gi = ops::maxpool2d_backward(self.value(*input).shape(), argidx, &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let gi = Tensor::from_fn(xv.shape(), |f| {
                        if xv.data()[f] > T::zero() {
                            g.data()[f]
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, gi);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxCe { logits, label, probs } => {
                    let scale = g.item();
                    let mut gi = probs.clone();
                    gi.data_mut()[*label] -= T::one();
                    gi.scale(scale);
                    accumulate(&mut grads, *logits, gi);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape()[0];
                    let (ga, gb) = ops::split_channels(&g, ca)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Upsample2 { input } => {
                    let gi = ops::upsample_nearest_backward(self.value(*input).shape(), &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::PickCell { input, i, j } => {
                    let mut gi = Tensor::zeros(self.value(*input).shape());
                    for (ch, &v) in g.data().iter().enumerate() {
                        *gi.at3_mut(ch, *i, *j) += v;
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Crop { input } => {
                    let shape = self.value(*input).shape();
                    let (rows, cols) = (g.shape()[1], g.shape()[2]);
                    let mut gi = Tensor::zeros(shape);
                    for ch in 0..shape[0] {
                        for i in 0..rows {
                            for j in 0..cols {
                                *gi.at3_mut(ch, i, j) = g.at3(ch, i, j);
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::WeightedSum { terms } => {
                    let go = g.item();
                    for &(v, c) in terms {
                        accumulate(&mut grads, v, Tensor::scalar(c * go));
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep: gradients of the registered parameters.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient at a parameter leaf, or `None` if the root does not depend
    /// on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients summed per parameter id, for ids `0..count`. Parameters the
    /// root does not reach get zeros of the given shapes.
    pub fn by_param_id(&self, shapes: &[&[usize]]) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out[id].add_assign(g);
            }
        }
        out
    }
}
