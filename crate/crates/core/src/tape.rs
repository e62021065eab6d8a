//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Each operator call evaluates eagerly and appends a node holding its
//! output. Nodes only refer to earlier nodes, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::loss;
use crate::ops::{self, ConvCfg, PoolCfg};
use crate::tensor::{Dims, Real, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        cfg: ConvCfg,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMeanMax {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        cfg: PoolCfg,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Sum {
        x: Var,
    },
    Dice {
        pred: Var,
        target: Tensor4<T>,
        eps: f64,
        include_background: bool,
    },
    CrossEntropy {
        pred: Var,
        target: Tensor4<T>,
    },
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax_channels",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::ChannelMeanMax { .. } => "channel_mean_max",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Dice { .. } => "dice_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                x, kernel, bias, ..
            } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::Concat { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Dice { pred, .. } | Op::CrossEntropy { pred, .. } => vec![*pred],
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Softmax { x }
            | Op::GlobalAvgPool { x }
            | Op::GlobalMaxPool { x, .. }
            | Op::ChannelMeanMax { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Scale { x, .. }
            | Op::Sum { x } => vec![*x],
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor4<T>,
}

#[derive(Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor4<T>>>,
    dims: Vec<Dims>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor4<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(self.dims[v.0]))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    /// Operator name of node `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Direct inputs of node `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, op: Op<T>, value: Tensor4<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, cfg: ConvCfg) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            cfg,
        )?;
        Ok(self.push(
            Op::Conv2d {
                x,
                kernel,
                bias,
                cfg,
            },
            y,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = ops::leaky_relu(self.value(x), slope);
        self.push(Op::LeakyRelu { x, slope }, y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid { x }, y)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_channels(self.value(x))?;
        Ok(self.push(Op::Softmax { x }, y))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool { x }, y))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::global_max_pool(self.value(x))?;
        Ok(self.push(Op::GlobalMaxPool { x, argmax }, y))
    }

    pub fn channel_mean_max(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::channel_mean_max(self.value(x))?;
        Ok(self.push(Op::ChannelMeanMax { x, argmax }, y))
    }

    pub fn avg_pool2d(&mut self, x: Var, cfg: PoolCfg) -> Result<Var> {
        let y = ops::avg_pool2d(self.value(x), cfg)?;
        Ok(self.push(Op::AvgPool { x, cfg }, y))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(Op::Upsample { x, factor }, y))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat { a, b }, y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, y))
    }

    /// `a ⊙ b`, with `b` broadcast over channels or space (see [`ops::broadcast_ok`]).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul_broadcast(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, y))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kk = T::of(k);
        let y = self.value(x).map(|v| v * kk);
        self.push(Op::Scale { x, k }, y)
    }

    /// Sum of all elements as a `1×1×1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.push(Op::Sum { x }, Tensor4::scalar(T::of(s)))
    }

    /// Mean channel-wise Dice loss of softmaxed `pred` against one-hot `target`.
    pub fn dice_loss(
        &mut self,
        pred: Var,
        target: &Tensor4<T>,
        eps: f64,
        include_background: bool,
    ) -> Result<Var> {
        let per_class = loss::dice_per_class(self.value(pred), target, eps)?;
        let v = loss::mean_dice(&per_class, include_background);
        let op = Op::Dice {
            pred,
            target: target.clone(),
            eps,
            include_background,
        };
        Ok(self.push(op, Tensor4::scalar(T::of(v))))
    }

    /// Per-pixel mean categorical cross-entropy of softmaxed `pred`.
    pub fn cross_entropy(&mut self, pred: Var, target: &Tensor4<T>) -> Result<Var> {
        let v = loss::cross_entropy(self.value(pred), target)?;
        let op = Op::CrossEntropy {
            pred,
            target: target.clone(),
        };
        Ok(self.push(op, Tensor4::scalar(T::of(v))))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} ({}) has dims {}",
                loss.0,
                self.op_name(loss),
                root.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor4::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    cfg,
                } => {
                    let g = ops::conv2d_backward(self.value(*x), self.value(*kernel), &gy, *cfg);
                    accumulate(&mut grads, *x, g.x);
                    accumulate(&mut grads, *kernel, g.kernel);
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, g.bias);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let g = ops::leaky_relu_backward(self.value(*x), &gy, *slope);
                    accumulate(&mut grads, *x, g);
                }
                Op::Sigmoid { x } => {
                    let g = ops::sigmoid_backward(&node.value, &gy);
                    accumulate(&mut grads, *x, g);
                }
                Op::Softmax { x } => {
                    let g = ops::softmax_channels_backward(&node.value, &gy);
                    accumulate(&mut grads, *x, g);
                }
                Op::GlobalAvgPool { x } => {
                    let g = ops::global_avg_pool_backward(self.dims(*x), &gy);
                    accumulate(&mut grads, *x, g);
                }
                Op::GlobalMaxPool { x, argmax } => {
                    let g = ops::global_max_pool_backward(self.dims(*x), argmax, &gy);
                    accumulate(&mut grads, *x, g);
                }
                Op::ChannelMeanMax { x, argmax } => {
                    let g = ops::channel_mean_max_backward(self.dims(*x), argmax, &gy);
                    accumulate(&mut grads, *x, g);
                }
                Op::AvgPool { x, cfg } => {
                    let g = ops::avg_pool2d_backward(self.dims(*x), &gy, *cfg);
                    accumulate(&mut grads, *x, g);
                }
                Op::Upsample { x, factor } => {
                    let g = ops::upsample_nearest_backward(self.dims(*x), &gy, *factor);
                    accumulate(&mut grads, *x, g);
                }
                Op::Concat { a, b } => {
                    let ca = self.dims(*a).c;
                    let cb = self.dims(*b).c;
                    accumulate(&mut grads, *a, gy.slice_channels(0, ca)?);
                    accumulate(&mut grads, *b, gy.slice_channels(ca, ca + cb)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Mul { a, b } => {
                    let (ga, gb) = ops::mul_broadcast_backward(self.value(*a), self.value(*b), &gy);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { x, k } => {
                    let kk = T::of(*k);
                    accumulate(&mut grads, *x, gy.map(|v| v * kk));
                }
                Op::Sum { x } => {
                    let g = gy.data()[0];
                    accumulate(&mut grads, *x, Tensor4::filled(self.dims(*x), g));
                }
                Op::Dice {
                    pred,
                    target,
                    eps,
                    include_background,
                } => {
                    let g = loss::dice_backward(
                        self.value(*pred),
                        target,
                        *eps,
                        *include_background,
                        gy.data()[0].as_f64(),
                    );
                    accumulate(&mut grads, *pred, g);
                }
                Op::CrossEntropy { pred, target } => {
                    let g = loss::cross_entropy_backward(
                        self.value(*pred),
                        target,
                        gy.data()[0].as_f64(),
                    );
                    accumulate(&mut grads, *pred, g);
                }
            }
        }
        let dims = self.nodes.iter().map(|n| n.value.dims()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, dims })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
