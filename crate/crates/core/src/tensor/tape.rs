use super::ops::{self, BatchNormCache, BatchNormConfig, BatchNormState, ConvTransposeSpec};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Which statistics a batch-norm node normalizes with.
pub enum BatchNormStats<'a, T> {
    Train(&'a mut BatchNormState<T>),
    Infer(&'a BatchNormState<T>),
}

enum Op<T> {
    Leaf,
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ConvTranspose {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvTransposeSpec,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    AvgPool2 {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    /// Scalar whose gradient w.r.t. `input` was computed alongside its value.
    Precomputed {
        input: Var,
        grad: Tensor<T>,
    },
    /// `sum(input * weights)` with constant weights.
    Dot {
        input: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Values are appended in evaluation order, so reverse
/// insertion order is a valid reverse topological order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Leaves with `requires_grad` receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvTransposeSpec,
    ) -> Result<Var> {
        let out = ops::conv_transpose2d(
            self.value(input),
            &spec,
            self.value(weight),
            self.value(bias),
        )?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::ConvTranspose {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats<'_, T>,
        cfg: &BatchNormConfig,
    ) -> Result<Var> {
        let (x, g, b) = (self.value(input), self.value(gamma), self.value(beta));
        let (out, cache) = match stats {
            BatchNormStats::Train(state) => ops::batch_norm_train(x, g, b, state, cfg)?,
            BatchNormStats::Infer(state) => ops::batch_norm_infer(x, g, b, state, cfg)?,
        };
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(input), slope);
        let rg = self.needs(&[input]);
        self.push(out, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        let rg = self.needs(&[input]);
        self.push(out, Op::Sigmoid { input }, rg)
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let out = ops::avg_pool2(self.value(input))?.tensor;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::AvgPool2 { input }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Records a scalar `value` with a known gradient w.r.t. `input`.
    /// Loss functions that compute their own gradients enter the tape this way.
    pub fn precomputed(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "precomputed gradient",
                grad.shape(),
                self.value(input).shape(),
            ));
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { input, grad }, rg))
    }

    pub fn dot(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::shape("dot", x.shape(), weights.shape()));
        }
        let s = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, weights }, rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward root must be scalar",
                self.value(root).shape(),
                &[],
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut send = |v: Var, t: Tensor<T>| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (dx, dw, db) =
                        ops::dense_backward(self.value(*input), self.value(*weight), &g)?;
                    send(*input, dx)?;
                    send(*weight, dw)?;
                    send(*bias, db)?;
                }
                Op::ConvTranspose {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let want_params = self.needs(&[*weight, *bias]);
                    let (dx, params) = ops::conv_transpose2d_backward(
                        self.value(*input),
                        spec,
                        self.value(*weight),
                        &g,
                        self.nodes[input.0].requires_grad,
                        want_params,
                    )?;
                    if let Some(dx) = dx {
                        send(*input, dx)?;
                    }
                    if let Some((dw, db)) = params {
                        send(*weight, dw)?;
                        send(*bias, db)?;
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batch_norm_backward(cache, self.value(*gamma), &g)?;
                    send(*input, dx)?;
                    send(*gamma, dg)?;
                    send(*beta, db)?;
                }
                Op::LeakyRelu { input, slope } => {
                    send(
                        *input,
                        ops::leaky_relu_backward(self.value(*input), *slope, &g),
                    )?;
                }
                Op::Sigmoid { input } => {
                    send(*input, ops::sigmoid_backward(&node.value, &g))?;
                }
                Op::AvgPool2 { input } => {
                    send(
                        *input,
                        ops::avg_pool2_backward(self.value(*input).shape(), &g)?,
                    )?;
                }
                Op::Reshape { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    send(*input, g.reshape(shape)?)?;
                }
                Op::Precomputed { input, grad } => {
                    let s = g.data()[0];
                    send(*input, grad.map(|v| v * s))?;
                }
                Op::Dot { input, weights } => {
                    let s = g.data()[0];
                    send(*input, weights.map(|v| v * s))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaves only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
