use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{self, ConvDims};
use super::{ParamStore, Tensor, TensorError, LOG_FLOOR};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which covariance a [`Tape::covariance`] node computes over a `c x t` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovAxis {
    /// `c x c`, centred along time.
    Sensor,
    /// `t x t`, centred along channels.
    Time,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
        dims: ConvDims,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        d_in: usize,
        d_out: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Outer {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        n: usize,
    },
    Covariance {
        x: Var,
        axis: CovAxis,
        batch: usize,
        c: usize,
        t: usize,
        centred: Vec<f64>,
    },
    CrossEntropy {
        probs: Var,
        target: Vec<f64>,
    },
    Kl {
        probs: Var,
        target: Vec<f64>,
    },
    Mse {
        probs: Var,
        target: Vec<f64>,
    },
    Entropy(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<usize>,
}

/// Append-only computation graph. Nodes are pushed in evaluation order, so
/// the node list is a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, kept for leaf nodes only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradients aligned with `params`; parameters that did not take part in
    /// the loss get zeros. Repeated registrations of one parameter are summed.
    pub fn for_params(&self, tape: &Tape, params: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = params
            .values()
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Some(p), Some(g)) = (node.param, self.grads.get(i).and_then(|g| g.as_ref())) {
                kernels::axpy(1.0, g, out[p].data_mut());
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => kernels::axpy(1.0, &g, existing),
        slot @ None => *slot = Some(g),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn check_simplex_rows(op: &'static str, target: &[f64], width: usize) -> Result<(), TensorError> {
    for (row, t) in target.chunks(width).enumerate() {
        let sum: f64 = t.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || t.iter().any(|&v| v < -1e-6 || !v.is_finite()) {
            return Err(TensorError::InvalidTarget { op, row, sum });
        }
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers every parameter of `store` as a gradient-tracked leaf.
    pub fn params(&mut self, store: &ParamStore) -> Vec<Var> {
        (0..store.len())
            .map(|i| {
                let v = self.leaf(store.get(i).clone(), true);
                self.nodes[v.0].param = Some(i);
                v
            })
            .collect()
    }

    /// Registers parameters as constants (no gradient), e.g. for a teacher copy.
    pub fn frozen_params(&mut self, store: &ParamStore) -> Vec<Var> {
        (0..store.len())
            .map(|i| self.constant(store.get(i).clone()))
            .collect()
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<(), TensorError> {
        if self.nodes[x.0].value.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op, node: x.0 })
        }
    }

    /// 1D convolution, stride 1. `input` is `[C_in, L]` or `[N, C_in, L]`,
    /// `kernels` is `[C_out, C_in / groups, K]`, `bias` is `[C_out]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        padding: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv1d";
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let (batch, c_in, len_in) = match xs.as_slice() {
            [c, l] => (1, *c, *l),
            [n, c, l] => (*n, *c, *l),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 3,
                    found: xs.len(),
                })
            }
        };
        if ks.len() != 3 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 3,
                found: ks.len(),
            });
        }
        if groups == 0 || c_in % groups != 0 {
            return Err(TensorError::Argument {
                op: OP,
                reason: "input channels must be divisible by groups",
            });
        }
        let (c_out, kernel) = (ks[0], ks[2]);
        if c_out % groups != 0 {
            return Err(TensorError::Argument {
                op: OP,
                reason: "output channels must be divisible by groups",
            });
        }
        if ks[1] != c_in / groups {
            return Err(TensorError::Shape {
                op: OP,
                axis: "in_channels",
                expected: c_in / groups,
                found: ks[1],
            });
        }
        if bs != [c_out] {
            return Err(TensorError::Shape {
                op: OP,
                axis: "bias",
                expected: c_out,
                found: bs.iter().product(),
            });
        }
        if len_in + 2 * padding < kernel {
            return Err(TensorError::Shape {
                op: OP,
                axis: "length",
                expected: kernel,
                found: len_in + 2 * padding,
            });
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            len_in,
            kernel,
            padding,
            groups,
        };
        let out = kernels::conv1d_forward(
            &dims,
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let shape = if xs.len() == 2 {
            vec![c_out, dims.len_out()]
        } else {
            vec![batch, c_out, dims.len_out()]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Conv1d {
                input,
                kernels,
                bias,
                dims,
            },
            value,
            &[input, kernels, bias],
        ))
    }

    /// `weight · input + bias` for `input` of shape `[D_in]` or `[N, D_in]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "dense";
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let (batch, d_in) = match xs.as_slice() {
            [d] => (1, *d),
            [n, d] => (*n, *d),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 2,
                    found: xs.len(),
                })
            }
        };
        if ws.len() != 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                found: ws.len(),
            });
        }
        if ws[1] != d_in {
            return Err(TensorError::Shape {
                op: OP,
                axis: "in_features",
                expected: ws[1],
                found: d_in,
            });
        }
        let d_out = ws[0];
        if bs != [d_out] {
            return Err(TensorError::Shape {
                op: OP,
                axis: "bias",
                expected: d_out,
                found: bs.iter().product(),
            });
        }
        let out = kernels::dense_forward(
            batch,
            d_in,
            d_out,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let shape = if xs.len() == 1 {
            vec![d_out]
        } else {
            vec![batch, d_out]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                d_in,
                d_out,
            },
            value,
            &[input, weight, bias],
        ))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        Tensor {
            shape: src.shape().to_vec(),
            data,
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_finite("relu", x)?;
        let value = self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(Op::Relu(x), value, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_finite("sigmoid", x)?;
        let value = self.map_unary(x, stable_sigmoid);
        Ok(self.push(Op::Sigmoid(x), value, &[x]))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_finite("softmax", x)?;
        let src = self.value(x);
        let width = *src.shape().last().unwrap();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v = (*v / sum).max(f64::MIN_POSITIVE));
        }
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        Ok(self.push(Op::Softmax(x), value, &[x]))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Argument {
                op: "dropout",
                reason: "rate must lie in [0, 1)",
            });
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let src = self.value(x);
        let mask: Vec<f64> = (0..src.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        Ok(self.push(Op::Dropout { x, mask }, value, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                axis: "numel",
                expected: sa.iter().product(),
                found: sb.iter().product(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.map_unary(x, |v| v * factor);
        self.push(Op::Scale(x, factor), value, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value, &[x]))
    }

    /// Batched outer product: `[N, m] x [N, n] -> [N, m, n]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "outer";
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                found: if sa.len() != 2 { sa.len() } else { sb.len() },
            });
        }
        if sa[0] != sb[0] {
            return Err(TensorError::Shape {
                op: OP,
                axis: "batch",
                expected: sa[0],
                found: sb[0],
            });
        }
        let (batch, m, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; batch * m * n];
        for k in 0..batch {
            for i in 0..m {
                let ai = da[k * m + i];
                let row = &mut data[(k * m + i) * n..(k * m + i + 1) * n];
                for (r, bj) in row.iter_mut().zip(&db[k * n..(k + 1) * n]) {
                    *r = ai * bj;
                }
            }
        }
        let value = Tensor::new(vec![batch, m, n], data)?;
        Ok(self.push(Op::Outer { a, b, batch, m, n }, value, &[a, b]))
    }

    /// Sample covariance of a `[c, t]` (or `[N, c, t]`) feature map with
    /// centring matrix and `1/(n-1)` normalisation.
    pub fn covariance(&mut self, x: Var, axis: CovAxis) -> Result<Var, TensorError> {
        const OP: &str = "covariance";
        let xs = self.value(x).shape().to_vec();
        let (batch, c, t) = match xs.as_slice() {
            [c, t] => (1, *c, *t),
            [n, c, t] => (*n, *c, *t),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 3,
                    found: xs.len(),
                })
            }
        };
        if c < 2 || t < 2 {
            return Err(TensorError::Argument {
                op: OP,
                reason: "covariance needs at least two channels and two time steps",
            });
        }
        let src = self.value(x).data();
        let mut centred = Vec::with_capacity(src.len());
        let side = match axis {
            CovAxis::Sensor => c,
            CovAxis::Time => t,
        };
        // Sensor: Fc Fc^T / (t-1). Time: Fc^T Fc / (c-1).
        let (inner, a_st, b_st, norm) = match axis {
            CovAxis::Sensor => (t, (t, 1), (1, t), 1.0 / (t as f64 - 1.0)),
            CovAxis::Time => (c, (1, t), (t, 1), 1.0 / (c as f64 - 1.0)),
        };
        for k in 0..batch {
            let block = &src[k * c * t..(k + 1) * c * t];
            centred.extend(kernels::centre(block, c, t, matches!(axis, CovAxis::Sensor)));
        }
        let mut out = kernels::stacked_gemm(batch, side, side, |k| {
            let fc = &centred[k * c * t..(k + 1) * c * t];
            (inner, fc, a_st, fc, b_st)
        });
        out.iter_mut().for_each(|v| *v *= norm);
        let shape = if xs.len() == 2 {
            vec![side, side]
        } else {
            vec![batch, side, side]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Covariance {
                x,
                axis,
                batch,
                c,
                t,
                centred,
            },
            value,
            &[x],
        ))
    }

    fn row_loss_inputs(
        &self,
        op: &'static str,
        probs: Var,
        target: &Tensor,
        validate: bool,
    ) -> Result<usize, TensorError> {
        let ps = self.value(probs).shape();
        if ps != target.shape() {
            return Err(TensorError::Shape {
                op,
                axis: "classes",
                expected: ps.iter().product(),
                found: target.numel(),
            });
        }
        let width = *ps.last().unwrap();
        if validate {
            check_simplex_rows(op, target.data(), width)?;
        }
        Ok(width)
    }

    fn row_shape(&self, probs: Var) -> Vec<usize> {
        let s = self.value(probs).shape();
        if s.len() == 1 {
            vec![1]
        } else {
            s[..s.len() - 1].to_vec()
        }
    }

    /// Per-row `-sum target * ln(max(p, floor))` over the last axis.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor) -> Result<Var, TensorError> {
        let width = self.row_loss_inputs("cross_entropy", probs, target, true)?;
        let data = self
            .value(probs)
            .data()
            .chunks(width)
            .zip(target.data().chunks(width))
            .map(|(p, t)| {
                -p.iter()
                    .zip(t)
                    .map(|(&p, &t)| if t == 0.0 { 0.0 } else { t * libm::log(p.max(LOG_FLOOR)) })
                    .sum::<f64>()
            })
            .collect();
        let value = Tensor::new(self.row_shape(probs), data)?;
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                target: target.data().to_vec(),
            },
            value,
            &[probs],
        ))
    }

    /// Per-row KL(target || probs).
    pub fn kl_divergence(&mut self, probs: Var, target: &Tensor) -> Result<Var, TensorError> {
        let width = self.row_loss_inputs("kl_divergence", probs, target, true)?;
        let data = self
            .value(probs)
            .data()
            .chunks(width)
            .zip(target.data().chunks(width))
            .map(|(p, t)| {
                p.iter()
                    .zip(t)
                    .map(|(&p, &t)| {
                        if t <= 0.0 {
                            0.0
                        } else {
                            t * (libm::log(t.max(LOG_FLOOR)) - libm::log(p.max(LOG_FLOOR)))
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        let value = Tensor::new(self.row_shape(probs), data)?;
        Ok(self.push(
            Op::Kl {
                probs,
                target: target.data().to_vec(),
            },
            value,
            &[probs],
        ))
    }

    /// Per-row `(1/C) sum (p - target)^2`.
    pub fn mse(&mut self, probs: Var, target: &Tensor) -> Result<Var, TensorError> {
        let width = self.row_loss_inputs("mse", probs, target, true)?;
        let data = self
            .value(probs)
            .data()
            .chunks(width)
            .zip(target.data().chunks(width))
            .map(|(p, t)| {
                p.iter().zip(t).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / width as f64
            })
            .collect();
        let value = Tensor::new(self.row_shape(probs), data)?;
        Ok(self.push(
            Op::Mse {
                probs,
                target: target.data().to_vec(),
            },
            value,
            &[probs],
        ))
    }

    /// Per-row Shannon entropy of a probability vector.
    pub fn entropy(&mut self, probs: Var) -> Result<Var, TensorError> {
        let width = *self.value(probs).shape().last().unwrap();
        let data = self
            .value(probs)
            .data()
            .chunks(width)
            .map(|p| {
                -p.iter()
                    .map(|&p| if p <= 0.0 { 0.0 } else { p * libm::log(p.max(LOG_FLOOR)) })
                    .sum::<f64>()
            })
            .collect();
        let value = Tensor::new(self.row_shape(probs), data)?;
        Ok(self.push(Op::Entropy(probs), value, &[probs]))
    }

    /// Scalar `sum_i weights[i] * x[i]`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        if weights.len() != n {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                axis: "numel",
                expected: n,
                found: weights.len(),
            });
        }
        let v = kernels::dot(self.value(x).data(), &weights);
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(v), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![1.0 / n as f64; n])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![1.0; n])
    }

    /// Reverse pass from a scalar `loss`. Only leaves flagged with
    /// `requires_grad` receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(TensorError::BackwardBeforeForward { node: loss.0 });
        };
        if node.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                node: loss.0,
                numel: node.value.numel(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernels: k,
                bias,
                dims,
            } => {
                let want = [self.wants(*input), self.wants(*k), self.wants(*bias)];
                let (dx, dw, db) = kernels::conv1d_backward(
                    dims,
                    self.value(*input).data(),
                    self.value(*k).data(),
                    g,
                    want,
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *k, dw);
                }
                if let Some(db) = db {
                    accumulate(grads, *bias, db);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                d_in,
                d_out,
            } => {
                let want = [self.wants(*input), self.wants(*weight), self.wants(*bias)];
                let (dx, dw, db) = kernels::dense_backward(
                    *batch,
                    *d_in,
                    *d_out,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    want,
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *weight, dw);
                }
                if let Some(db) = db {
                    accumulate(grads, *bias, db);
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let width = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((d, gr), p) in dx
                    .chunks_mut(width)
                    .zip(g.chunks(width))
                    .zip(node.value.data().chunks(width))
                {
                    let s = kernels::dot(gr, p);
                    for ((d, g), p) in d.iter_mut().zip(gr).zip(p) {
                        *d = p * (g - s);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, g.iter().map(|g| g * f).collect());
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Outer { a, b, batch, m, n } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m];
                    for k in 0..*batch {
                        for i in 0..*m {
                            da[k * m + i] =
                                kernels::dot(&g[(k * m + i) * n..(k * m + i + 1) * n], &vb[k * n..(k + 1) * n]);
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; batch * n];
                    for k in 0..*batch {
                        for i in 0..*m {
                            kernels::axpy(
                                va[k * m + i],
                                &g[(k * m + i) * n..(k * m + i + 1) * n],
                                &mut db[k * n..(k + 1) * n],
                            );
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Covariance {
                x,
                axis,
                batch,
                c,
                t,
                centred,
            } => {
                let (c, t) = (*c, *t);
                let side = match axis {
                    CovAxis::Sensor => c,
                    CovAxis::Time => t,
                };
                let norm = 1.0 / ((c * t / side) as f64 - 1.0);
                let mut sym = Vec::with_capacity(g.len());
                for gk in g.chunks_exact(side * side) {
                    for a in 0..side {
                        sym.extend((0..side).map(|b| (gk[a * side + b] + gk[b * side + a]) * norm));
                    }
                }
                // Rows (sensor) or columns (time) of Fc already have zero
                // mean, so the centring projection is the identity here.
                let dx = kernels::stacked_gemm(*batch, c, t, |k| {
                    let fc = &centred[k * c * t..(k + 1) * c * t];
                    let sk = &sym[k * side * side..(k + 1) * side * side];
                    match axis {
                        CovAxis::Sensor => (c, sk, (c, 1), fc, (t, 1)),
                        CovAxis::Time => (t, fc, (t, 1), sk, (t, 1)),
                    }
                });
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { probs, target } | Op::Kl { probs, target } => {
                let p = self.value(*probs).data();
                let width = *self.value(*probs).shape().last().unwrap();
                let dx = p
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&p, &t))| {
                        if p > LOG_FLOOR && t != 0.0 {
                            -g[i / width] * t / p
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *probs, dx);
            }
            Op::Mse { probs, target } => {
                let p = self.value(*probs).data();
                let width = *self.value(*probs).shape().last().unwrap();
                let dx = p
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (p, t))| g[i / width] * 2.0 * (p - t) / width as f64)
                    .collect();
                accumulate(grads, *probs, dx);
            }
            Op::Entropy(probs) => {
                let p = self.value(*probs).data();
                let width = *self.value(*probs).shape().last().unwrap();
                let dx = p
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| -g[i / width] * (libm::log(p.max(LOG_FLOOR)) + if p > LOG_FLOOR { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(grads, *probs, dx);
            }
            Op::WeightedSum { x, weights } => {
                accumulate(grads, *x, weights.iter().map(|w| w * g[0]).collect());
            }
        }
    }
}
