//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that transitively depends on a
//! gradient-requiring leaf.

use super::batchnorm::{self, BnLayout, BnVariant};
use super::conv::{self, ConvGeom};
use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of a user-defined op: maps the output gradient to one
/// gradient buffer per input, in input order.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

/// Statistics source for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum Normalization<'a> {
    Batch { eps: f64 },
    Fixed { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Batch moments produced by a train-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Gap {
        input: Var,
        plane: usize,
    },
    Gmp {
        input: Var,
        plane: usize,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    SelectChannels {
        input: Var,
        channels: usize,
        inner: usize,
        index: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        rows: usize,
        inner: usize,
        outputs: usize,
    },
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Var>,
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf carrying the tensor's own `requires_grad` flag.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; recorded in registration order (see [`Graph::params`]).
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.clear_grad();
        let v = self.push(t, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of a node, typically a scalar loss.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient accumulated by the last [`Graph::backward`], if the node
    /// requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the node value with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("grad shape");
        }
        t
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let out = conv::forward(&geom, self.value(input).data(), self.value(kernel).data());
        let t = Tensor::new(&geom.output_shape(), out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(t, Op::Conv { input, kernel, geom }, rg))
    }

    /// Normalizes `x` per channel, then applies `gamma`/`beta`. Returns the
    /// batch moments when they were computed from `x`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        variant: BnVariant,
        norm: Normalization<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let layout = BnLayout::of(variant, self.value(x).shape())?;
        let ch = layout.channels;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != ch {
                return Err(Error::dim(
                    "batchnorm",
                    format!("{name} has {} entries but input axis 1 has {ch}", self.value(v).len()),
                ));
            }
        }
        let xs = self.value(x).data();
        let (mean, var, eps, moments) = match norm {
            Normalization::Batch { eps } => {
                if variant == BnVariant::Vector && layout.outer < 2 {
                    return Err(Error::DegenerateBatch {
                        op: "batchnorm",
                        detail: "vector variant needs N >= 2 in train mode (zero variance)".into(),
                    });
                }
                if layout.count() == 0 {
                    return Err(Error::DegenerateBatch {
                        op: "batchnorm",
                        detail: "empty batch".into(),
                    });
                }
                let (mean, var) = batchnorm::moments(xs, layout);
                let m = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: layout.count(),
                };
                (mean, var, eps, Some(m))
            }
            Normalization::Fixed { mean, var, eps } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::dim(
                        "batchnorm",
                        format!("running stats have {} entries, input axis 1 has {ch}", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("batchnorm: eps must be > 0".into()));
        }
        let (y, xhat, inv_std) = batchnorm::normalize(
            xs,
            layout,
            &mean,
            &var,
            eps,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(self.value(x).shape(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = moments.is_some();
        let v = self.push(
            t,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, moments))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(src.shape(), data).expect("shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let t = Tensor::new(src.shape(), data).expect("shape");
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(src.shape(), data).expect("shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(src.shape(), data).expect("shape");
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let s = src.iter().sum::<f64>() / src.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Global average pooling, NCHW → NC.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("gap")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("gap", "empty spatial extent"));
        }
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(&[n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gap { input: x, plane }, rg))
    }

    /// Global max pooling, NCHW → NC. Also returns the flat spatial argmax of
    /// every (n, c) plane; ties go to the lowest index.
    pub fn gmp(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let (n, c, h, w) = self.value(x).dims4("gmp")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("gmp", "empty spatial extent"));
        }
        let mut argmax = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for p in self.value(x).data().chunks(plane) {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate().skip(1) {
                if v > p[best] {
                    best = i;
                }
            }
            argmax.push(best);
            data.push(p[best]);
        }
        let t = Tensor::new(&[n, c], data)?;
        let rg = self.rg(x);
        let v = self.push(
            t,
            Op::Gmp {
                input: x,
                plane,
                argmax: argmax.clone(),
            },
            rg,
        );
        Ok((v, argmax))
    }

    /// Stacks tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for rank {}", base.len()),
            ));
        }
        let mut axis_len = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let off_axis_ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !off_axis_ok {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} off axis {axis}"),
                ));
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let blocks: Vec<usize> = xs
            .iter()
            .map(|&v| self.value(v).shape()[axis] * inner)
            .collect();
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for (&v, &b) in xs.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(v).data()[o * b..(o + 1) * b]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let t = Tensor::new(&shape, data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            t,
            Op::Concat {
                inputs: xs.to_vec(),
                outer,
                blocks,
            },
            rg,
        ))
    }

    /// Gathers along axis 1: `out[:, k, ..] = x[:, index[k], ..]`. Works for
    /// (N, J) logits and (N, C, H, W) maps alike.
    pub fn select_channels(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(
                "select_channels",
                format!("need rank >= 2, got {shape:?}"),
            ));
        }
        let channels = shape[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= channels) {
            return Err(Error::dim(
                "select_channels",
                format!("index {bad} out of range for axis 1 of size {channels}"),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(shape[0] * index.len() * inner);
        for n in 0..shape[0] {
            for &c in index {
                let start = (n * channels + c) * inner;
                data.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[1] = index.len();
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::SelectChannels {
                input: x,
                channels,
                inner,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// `x · weightᵀ` for x of shape (N, C) and weight of shape (J, C).
    pub fn linear(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (rows, inner) = self.value(x).dims2("linear")?;
        let (outputs, wc) = self.value(weight).dims2("linear")?;
        if wc != inner {
            return Err(Error::dim(
                "linear",
                format!("input axis 1 ({inner}) != weight axis 1 ({wc})"),
            ));
        }
        let mut out = vec![0.0; rows * outputs];
        gemm(
            rows,
            inner,
            outputs,
            self.value(x).data(),
            Layout::row_major(inner),
            self.value(weight).data(),
            Layout::transposed(inner),
            0.0,
            &mut out,
        );
        let t = Tensor::new(&[rows, outputs], out)?;
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(
            t,
            Op::Linear {
                input: x,
                weight,
                rows,
                inner,
                outputs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse pass from a single-element `loss`. Every gradient-requiring
    /// node receives a buffer (all-zero when not on a path from `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must have one element, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| vec![0.0; n.value.len()]))
            .collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernel,
                geom,
            } => {
                let (mut gi, mut gk) = (grads[input.0].take(), grads[kernel.0].take());
                conv::backward(
                    geom,
                    val(*input).data(),
                    val(*kernel).data(),
                    gout,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                grads[input.0] = gi;
                grads[kernel.0] = gk;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dg, db) = batchnorm::backward(
                    gout,
                    xhat,
                    inv_std,
                    val(*gamma).data(),
                    *layout,
                    *batch_stats,
                );
                accumulate(grads, *input, &dx);
                accumulate(grads, *gamma, &dg);
                accumulate(grads, *beta, &db);
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                if let Some(g) = grads[x.0].as_mut() {
                    for ((gi, &xi), &go) in g.iter_mut().zip(xs).zip(gout) {
                        if xi > 0.0 {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let ys = nodes[i].value.data();
                if let Some(g) = grads[x.0].as_mut() {
                    for ((gi, &y), &go) in g.iter_mut().zip(ys).zip(gout) {
                        *gi += go * y * (1.0 - y);
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gout);
                accumulate(grads, *b, gout);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let da: Vec<f64> = gout.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gout.iter().zip(va).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Scale(x, f) => {
                if let Some(g) = grads[x.0].as_mut() {
                    g.iter_mut().zip(gout).for_each(|(gi, go)| *gi += go * f);
                }
            }
            Op::AddScalar(x) => accumulate(grads, *x, gout),
            Op::Sum(x) => {
                if let Some(g) = grads[x.0].as_mut() {
                    g.iter_mut().for_each(|gi| *gi += gout[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = grads[x.0].as_mut() {
                    let s = gout[0] / g.len().max(1) as f64;
                    g.iter_mut().for_each(|gi| *gi += s);
                }
            }
            Op::Gap { input, plane } => {
                if let Some(g) = grads[input.0].as_mut() {
                    let inv = 1.0 / *plane as f64;
                    for (chunk, &go) in g.chunks_mut(*plane).zip(gout) {
                        chunk.iter_mut().for_each(|gi| *gi += go * inv);
                    }
                }
            }
            Op::Gmp {
                input,
                plane,
                argmax,
            } => {
                if let Some(g) = grads[input.0].as_mut() {
                    for (k, (&am, &go)) in argmax.iter().zip(gout).enumerate() {
                        g[k * plane + am] += go;
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                blocks,
            } => {
                let row: usize = blocks.iter().sum();
                let mut offset = 0;
                for (v, &b) in inputs.iter().zip(blocks) {
                    if let Some(g) = grads[v.0].as_mut() {
                        for o in 0..*outer {
                            let src = &gout[o * row + offset..o * row + offset + b];
                            g[o * b..(o + 1) * b]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(gi, s)| *gi += s);
                        }
                    }
                    offset += b;
                }
            }
            Op::SelectChannels {
                input,
                channels,
                inner,
                index,
            } => {
                if let Some(g) = grads[input.0].as_mut() {
                    let k = index.len();
                    for (j, chunk) in gout.chunks(*inner.max(&1)).enumerate() {
                        let (n, slot) = (j / k, j % k);
                        let start = (n * channels + index[slot]) * inner;
                        g[start..start + inner]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(gi, go)| *gi += go);
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                rows,
                inner,
                outputs,
            } => {
                if let Some(g) = grads[input.0].as_mut() {
                    // dX (N×C) += dY (N×J) · W (J×C)
                    gemm(
                        *rows,
                        *outputs,
                        *inner,
                        gout,
                        Layout::row_major(*outputs),
                        val(*weight).data(),
                        Layout::row_major(*inner),
                        1.0,
                        g,
                    );
                }
                if let Some(g) = grads[weight.0].as_mut() {
                    // dW (J×C) += dYᵀ (J×N) · X (N×C)
                    gemm(
                        *outputs,
                        *rows,
                        *inner,
                        gout,
                        Layout::transposed(*outputs),
                        val(*input).data(),
                        Layout::row_major(*inner),
                        1.0,
                        g,
                    );
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, gout),
            Op::Custom { inputs, backward } => {
                let parts = backward(gout);
                debug_assert_eq!(parts.len(), inputs.len());
                for (v, part) in inputs.iter().zip(&parts) {
                    accumulate(grads, *v, part);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
    if let Some(g) = grads[v.0].as_mut() {
        debug_assert_eq!(g.len(), contrib.len());
        g.iter_mut().zip(contrib).for_each(|(gi, c)| *gi += c);
    }
}
