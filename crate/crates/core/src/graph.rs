//! Recorded differentiable computation with reverse-mode gradients.
//!
//! A graph is built once through [`GraphBuilder`], owns its named parameters,
//! and is evaluated against named input bindings. Batch-first layouts are
//! used throughout: dense inputs are `[N, D]`, images are NHWC.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HalluxError, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{Scalar, Tensor};

pub type Bindings<T = f32> = BTreeMap<String, Tensor<T>>;
pub type ParamMap<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    Param(String),
    /// `[N, in] x [in, out] + [out]`.
    Dense { x: NodeId, w: NodeId, b: NodeId },
    /// NHWC input, `[kh, kw, c_in, c_out]` kernel, zero padding.
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize },
    /// `max(x, 0)` elementwise; also serves as the hinge of margin losses.
    Relu(NodeId),
    MaxPool { x: NodeId, size: usize, stride: usize },
    /// `[N, H, W, C] -> [N, C]`.
    GlobalAvgPool(NodeId),
    /// Concatenate along the last axis.
    Concat(Vec<NodeId>),
    /// Along the last axis.
    Softmax(NodeId),
    /// Categorical cross-entropy of `softmax(logits)` against target
    /// distributions, averaged over rows. Scalar output.
    CrossEntropy { logits: NodeId, target: NodeId },
    /// Row-wise squared L2 distance, `[N, D] x [N, D] -> [N]`.
    SquaredDistance(NodeId, NodeId),
    /// Row-wise unit-norm projection.
    L2Normalize(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, f64),
    /// Mean of all elements. Scalar output.
    Mean(NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Concat(_) => "concat",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SquaredDistance(..) => "squared_distance",
            Op::L2Normalize(_) => "l2_normalize",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::Dense { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu(x)
            | Op::MaxPool { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::Softmax(x)
            | Op::L2Normalize(x)
            | Op::AddScalar(x, _)
            | Op::Mean(x) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::CrossEntropy { logits, target } => vec![*logits, *target],
            Op::SquaredDistance(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
        }
    }

    /// Ops that do real arithmetic, as opposed to leaves.
    pub fn is_compute(&self) -> bool {
        !matches!(self, Op::Input(_) | Op::Param(_))
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    params: ParamMap,
    inputs: Vec<String>,
    outputs: BTreeMap<String, NodeId>,
}

pub type GradientMap = BTreeMap<String, Tensor<f32>>;

/// Builds an [`ExprGraph`]. Structural errors (duplicate names, dangling
/// ids) are recorded and reported by [`GraphBuilder::finish`].
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: ParamMap,
    param_nodes: BTreeMap<String, NodeId>,
    input_nodes: BTreeMap<String, NodeId>,
    inputs: Vec<String>,
    outputs: BTreeMap<String, NodeId>,
    error: Option<HalluxError>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        if self.error.is_none() {
            if let Some(bad) = op.inputs().into_iter().find(|i| i.0 >= id.0) {
                self.error = Some(HalluxError::InvalidArgument(format!(
                    "node {} references later node {}",
                    id.0, bad.0
                )));
            }
        }
        self.nodes.push(Node { op, label: None });
        id
    }

    /// Named placeholder. Re-declaring a name returns the existing node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.input_nodes.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.input_nodes.insert(name.to_string(), id);
        self.inputs.push(name.to_string());
        id
    }

    pub fn param(&mut self, name: &str, init: Tensor<f32>) -> NodeId {
        if self.params.contains_key(name) {
            self.error
                .get_or_insert_with(|| HalluxError::DuplicateParameter(name.to_string()));
            return self.param_nodes[name];
        }
        let id = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), init);
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    pub fn label(&mut self, id: NodeId, label: &str) {
        if let Some(node) = self.nodes.get_mut(id.0) {
            node.label = Some(label.to_string());
        }
    }

    /// Registers a named output that can be requested by name.
    pub fn output(&mut self, name: &str, id: NodeId) {
        self.label(id, name);
        self.outputs.insert(name.to_string(), id);
    }

    pub fn op(&mut self, op: Op) -> NodeId {
        self.push(op)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dense { x, w, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv2d { x, w, b, stride, padding })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize, stride: usize) -> NodeId {
        self.push(Op::MaxPool { x, size, stride })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Concat(xs.to_vec()))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, target: NodeId) -> NodeId {
        self.push(Op::CrossEntropy { logits, target })
    }

    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SquaredDistance(a, b))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2Normalize(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(x, c))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    /// Affine layer with He-normal weights and zero bias.
    pub fn dense_layer<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        x: NodeId,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> NodeId {
        let w = self.param(&format!("{prefix}.w"), he_normal(&[din, dout], din, rng));
        let b = self.param(&format!("{prefix}.b"), Tensor::zeros(&[dout]));
        self.dense(x, w, b)
    }

    pub fn conv_layer<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        x: NodeId,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> NodeId {
        let w = self.param(
            &format!("{prefix}.w"),
            he_normal(&[kernel, kernel, cin, cout], kernel * kernel * cin, rng),
        );
        let b = self.param(&format!("{prefix}.b"), Tensor::zeros(&[cout]));
        self.conv2d(x, w, b, 1, kernel / 2)
    }

    pub fn finish(self) -> Result<ExprGraph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok(ExprGraph {
            nodes: self.nodes,
            params: self.params,
            inputs: self.inputs,
            outputs: self.outputs,
        })
    }
}

pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Forward values of every node that was computed.
struct Values<'a, T: Scalar> {
    vals: Vec<Option<Cow<'a, Tensor<T>>>>,
}

impl<'a, T: Scalar> Values<'a, T> {
    fn get(&self, id: NodeId) -> &Tensor<T> {
        self.vals[id.0].as_deref().expect("dependency evaluated first")
    }
}

impl ExprGraph {
    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.params.iter_mut()
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| HalluxError::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(HalluxError::InvalidArgument(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Load every parameter whose name starts with `prefix` from `source`,
    /// where `source` keys omit the prefix.
    pub fn load_params(&mut self, prefix: &str, source: &ParamMap) -> Result<()> {
        for (name, value) in source {
            self.set_param(&format!("{prefix}{name}"), value.clone())?;
        }
        Ok(())
    }

    /// Parameters under `prefix`, with the prefix stripped.
    pub fn extract_params(&self, prefix: &str) -> ParamMap {
        self.params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| HalluxError::InvalidArgument(format!("no output named `{name}`")))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    fn node_name(&self, id: NodeId) -> String {
        match &self.nodes[id.0].label {
            Some(l) => format!("#{} `{l}`", id.0),
            None => format!("#{}", id.0),
        }
    }

    /// Marks the ancestors of `targets` (inclusive).
    fn needed(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for t in targets {
            need[t.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if need[i] {
                for inp in self.nodes[i].op.inputs() {
                    need[inp.0] = true;
                }
            }
        }
        need
    }

    /// Number of arithmetic nodes needed to compute `targets`, by kind.
    pub fn op_profile(&self, targets: &[NodeId]) -> BTreeMap<&'static str, usize> {
        let need = self.needed(targets);
        let mut out = BTreeMap::new();
        for (node, &n) in self.nodes.iter().zip(&need) {
            if n && node.op.is_compute() {
                *out.entry(node.op.kind()).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn evaluate(&self, bindings: &Bindings, outputs: &[NodeId]) -> Result<Vec<Tensor<f32>>> {
        let values = self.forward(&self.params, bindings, outputs)?;
        Ok(outputs.iter().map(|&o| values.get(o).clone()).collect())
    }

    pub fn evaluate_named(
        &self,
        bindings: &Bindings,
        names: &[&str],
    ) -> Result<BTreeMap<String, Tensor<f32>>> {
        let ids = names
            .iter()
            .map(|n| self.output_id(n))
            .collect::<Result<Vec<_>>>()?;
        let vals = self.evaluate(bindings, &ids)?;
        Ok(names.iter().map(|n| n.to_string()).zip(vals).collect())
    }

    /// Loss value and gradients for every parameter (zeros where the loss
    /// does not depend on a parameter).
    pub fn backward(&self, loss: NodeId, bindings: &Bindings) -> Result<(f32, GradientMap)> {
        self.backward_generic(&self.params, bindings, loss)
    }

    /// Like [`ExprGraph::backward`], also returning the forward values of
    /// `extras` from the same pass.
    pub fn backward_with(
        &self,
        loss: NodeId,
        extras: &[NodeId],
        bindings: &Bindings,
    ) -> Result<(f32, GradientMap, Vec<Tensor<f32>>)> {
        self.backward_impl(&self.params, bindings, loss, extras)
    }

    fn forward<'a, T: Scalar>(
        &self,
        params: &'a ParamMap<T>,
        bindings: &'a Bindings<T>,
        targets: &[NodeId],
    ) -> Result<Values<'a, T>> {
        if let Some(t) = targets.iter().find(|t| t.0 >= self.nodes.len()) {
            return Err(HalluxError::InvalidArgument(format!("unknown node #{}", t.0)));
        }
        let need = self.needed(targets);
        let mut values = Values {
            vals: (0..self.nodes.len()).map(|_| None).collect(),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if !need[i] {
                continue;
            }
            let v = self.eval_node(NodeId(i), &node.op, params, bindings, &values)?;
            values.vals[i] = Some(v);
        }
        Ok(values)
    }

    fn shape_err(&self, id: NodeId, op: &Op, detail: String) -> HalluxError {
        HalluxError::ShapeMismatch {
            node: self.node_name(id),
            op: op.kind(),
            detail,
        }
    }

    fn eval_node<'a, T: Scalar>(
        &self,
        id: NodeId,
        op: &Op,
        params: &'a ParamMap<T>,
        bindings: &'a Bindings<T>,
        values: &Values<'a, T>,
    ) -> Result<Cow<'a, Tensor<T>>> {
        let err = |detail: String| self.shape_err(id, op, detail);
        let out = match op {
            Op::Input(name) => {
                return bindings
                    .get(name)
                    .map(Cow::Borrowed)
                    .ok_or_else(|| HalluxError::UnboundPlaceholder(name.clone()));
            }
            Op::Param(name) => {
                return params
                    .get(name)
                    .map(Cow::Borrowed)
                    .ok_or_else(|| HalluxError::UnknownParameter(name.clone()));
            }
            Op::Dense { x, w, b } => {
                let (x, w, b) = (values.get(*x), values.get(*w), values.get(*b));
                let (n, din, dout) = dense_dims(x, w, b).map_err(err)?;
                Tensor::from_parts(
                    vec![n, dout],
                    kernels::dense_forward(x.data(), w.data(), b.data(), n, din, dout),
                )
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let (x, w, b) = (values.get(*x), values.get(*w), values.get(*b));
                let g = conv_geom(x, w, b, *stride, *padding).map_err(err)?;
                let (ho, wo) = g.out_hw().expect("checked");
                Tensor::from_parts(
                    vec![g.n, ho, wo, g.f],
                    kernels::conv2d_forward(x.data(), w.data(), b.data(), &g),
                )
            }
            Op::Relu(x) => values.get(*x).map(|v| v.max(T::zero())),
            Op::MaxPool { x, size, stride } => {
                let x = values.get(*x);
                let g = pool_geom(x, *size, *stride).map_err(err)?;
                let (ho, wo) = g.out_hw().expect("checked");
                Tensor::from_parts(vec![g.n, ho, wo, g.c], kernels::maxpool_forward(x.data(), &g))
            }
            Op::GlobalAvgPool(x) => {
                let x = values.get(*x);
                if x.ndim() != 4 {
                    return Err(err(format!("expected NHWC input, got {:?}", x.shape())));
                }
                let s = x.shape();
                Tensor::from_parts(
                    vec![s[0], s[3]],
                    kernels::gap_forward(x.data(), s[0], s[1] * s[2], s[3]),
                )
            }
            Op::Concat(xs) => {
                let parts: Vec<&Tensor<T>> = xs.iter().map(|&i| values.get(i)).collect();
                concat_last(&parts).map_err(err)?
            }
            Op::Softmax(x) => {
                let x = values.get(*x);
                let k = last_dim(x).map_err(err)?;
                Tensor::from_parts(x.shape().to_vec(), kernels::softmax_rows(x.data(), k))
            }
            Op::CrossEntropy { logits, target } => {
                let (z, t) = (values.get(*logits), values.get(*target));
                if z.shape() != t.shape() || z.ndim() != 2 {
                    return Err(err(format!(
                        "logits {:?} and targets {:?} must be equal [N, K]",
                        z.shape(),
                        t.shape()
                    )));
                }
                Tensor::scalar(kernels::softmax_xent_forward(z.data(), t.data(), z.shape()[1]))
            }
            Op::SquaredDistance(a, b) => {
                let (a, b) = (values.get(*a), values.get(*b));
                let (n, d) = rows_pair(a, b).map_err(err)?;
                Tensor::from_parts(vec![n], kernels::sqdist_rows(a.data(), b.data(), d))
            }
            Op::L2Normalize(x) => {
                let x = values.get(*x);
                let d = last_dim(x).map_err(err)?;
                Tensor::from_parts(x.shape().to_vec(), kernels::l2_normalize_rows(x.data(), d))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (values.get(*a), values.get(*b));
                if a.shape() != b.shape() {
                    return Err(err(format!("operands {:?} vs {:?}", a.shape(), b.shape())));
                }
                let f: fn(T, T) -> T = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                Tensor::from_parts(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
                )
            }
            Op::AddScalar(x, c) => {
                let c = T::from_f64(*c);
                values.get(*x).map(|v| v + c)
            }
            Op::Mean(x) => {
                let x = values.get(*x);
                let sum = x.data().iter().fold(T::zero(), |a, &v| a + v);
                Tensor::scalar(sum / T::from_f64(x.len() as f64))
            }
        };
        Ok(Cow::Owned(out))
    }

    pub(crate) fn backward_generic<T: Scalar>(
        &self,
        params: &ParamMap<T>,
        bindings: &Bindings<T>,
        loss: NodeId,
    ) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
        self.backward_impl(params, bindings, loss, &[]).map(|(l, g, _)| (l, g))
    }

    #[allow(clippy::type_complexity)]
    fn backward_impl<T: Scalar>(
        &self,
        params: &ParamMap<T>,
        bindings: &Bindings<T>,
        loss: NodeId,
        extras: &[NodeId],
    ) -> Result<(T, BTreeMap<String, Tensor<T>>, Vec<Tensor<T>>)> {
        let mut targets = vec![loss];
        targets.extend_from_slice(extras);
        let values = self.forward(params, bindings, &targets)?;
        let extra_vals: Vec<Tensor<T>> = extras.iter().map(|&e| values.get(e).clone()).collect();
        let loss_val = values.get(loss);
        if !loss_val.is_scalar() {
            return Err(HalluxError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let loss_scalar = loss_val.data()[0];
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            if let Op::Param(_) = op {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.node_backward(op, &values, NodeId(i), &g) {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let shape = params
                    .get(name)
                    .ok_or_else(|| HalluxError::UnknownParameter(name.clone()))?
                    .shape()
                    .to_vec();
                let t = match grads[i].take() {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                };
                out.insert(name.clone(), t);
            }
        }
        Ok((loss_scalar, out, extra_vals))
    }

    /// Gradient contributions to each input of `op`, given the output
    /// gradient `g`. Inputs that are leaves of kind Input are skipped.
    fn node_backward<T: Scalar>(
        &self,
        op: &Op,
        values: &Values<'_, T>,
        id: NodeId,
        g: &[T],
    ) -> Vec<(NodeId, Vec<T>)> {
        let wants = |n: NodeId| !matches!(self.nodes[n.0].op, Op::Input(_));
        let mut out = Vec::new();
        match op {
            Op::Input(_) | Op::Param(_) => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (values.get(*x), values.get(*w));
                let (n, din, dout) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                let (dx, dw, db) = kernels::dense_backward(xv.data(), wv.data(), g, n, din, dout);
                out.push((*x, dx));
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let (xv, wv, bv) = (values.get(*x), values.get(*w), values.get(*b));
                let geom = conv_geom(xv, wv, bv, *stride, *padding).expect("validated in forward");
                let (dx, dw, db) =
                    kernels::conv2d_backward(xv.data(), wv.data(), g, &geom, wants(*x));
                if wants(*x) {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::Relu(x) => {
                let xv = values.get(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::MaxPool { x, size, stride } => {
                let xv = values.get(*x);
                let geom = pool_geom(xv, *size, *stride).expect("validated in forward");
                out.push((*x, kernels::maxpool_backward(xv.data(), g, &geom)));
            }
            Op::GlobalAvgPool(x) => {
                let s = values.get(*x).shape().to_vec();
                out.push((*x, kernels::gap_backward(g, s[0], s[1] * s[2], s[3])));
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs
                    .iter()
                    .map(|&i| *values.get(i).shape().last().unwrap_or(&1))
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&xi, &wd) in xs.iter().zip(&widths) {
                    let mut part = Vec::with_capacity(rows * wd);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + wd]);
                    }
                    offset += wd;
                    out.push((xi, part));
                }
            }
            Op::Softmax(x) => {
                let y = values.get(id);
                let k = *y.shape().last().unwrap_or(&1);
                out.push((*x, kernels::softmax_backward(y.data(), g, k)));
            }
            Op::CrossEntropy { logits, target } => {
                let (z, t) = (values.get(*logits), values.get(*target));
                let k = z.shape()[1];
                out.push((*logits, kernels::softmax_xent_backward(z.data(), t.data(), k, g[0])));
                if wants(*target) {
                    // d/dt_k = log-sum-exp - z_k, scaled by 1/N.
                    let rows = z.shape()[0];
                    let scale = g[0] / T::from_f64(rows as f64);
                    let mut dt = Vec::with_capacity(z.len());
                    for zr in z.data().chunks_exact(k) {
                        let max = zr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                        let lse = zr.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
                        dt.extend(zr.iter().map(|&zv| (lse - zv) * scale));
                    }
                    out.push((*target, dt));
                }
            }
            Op::SquaredDistance(a, b) => {
                let (av, bv) = (values.get(*a), values.get(*b));
                let d = *av.shape().last().unwrap_or(&1);
                let two = T::from_f64(2.0);
                let da: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .enumerate()
                    .map(|(j, (&x, &y))| two * (x - y) * g[j / d])
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::L2Normalize(x) => {
                let xv = values.get(*x);
                let d = *xv.shape().last().unwrap_or(&1);
                out.push((*x, kernels::l2_normalize_backward(xv.data(), g, d)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (values.get(*a), values.get(*b));
                out.push((*a, g.iter().zip(bv.data()).map(|(&d, &y)| d * y).collect()));
                out.push((*b, g.iter().zip(av.data()).map(|(&d, &x)| d * x).collect()));
            }
            Op::AddScalar(x, _) => out.push((*x, g.to_vec())),
            Op::Mean(x) => {
                let n = values.get(*x).len();
                let v = g[0] / T::from_f64(n as f64);
                out.push((*x, vec![v; n]));
            }
        }
        out.retain(|(n, _)| wants(*n));
        out
    }
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize), String> {
    if x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1 {
        return Err(format!(
            "expected x [N, in], w [in, out], b [out]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    if w.shape()[0] != din || b.shape()[0] != w.shape()[1] {
        return Err(format!(
            "x {:?} incompatible with w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    Ok((n, din, w.shape()[1]))
}

fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, String> {
    if x.ndim() != 4 || w.ndim() != 4 || b.ndim() != 1 {
        return Err(format!(
            "expected x NHWC, w [kh, kw, c, f], b [f]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let (xs, ws) = (x.shape(), w.shape());
    if ws[2] != xs[3] || b.shape()[0] != ws[3] {
        return Err(format!(
            "input channels {} vs kernel {:?}, bias {:?}",
            xs[3],
            ws,
            b.shape()
        ));
    }
    let g = ConvGeom {
        n: xs[0],
        h: xs[1],
        w: xs[2],
        c: xs[3],
        kh: ws[0],
        kw: ws[1],
        f: ws[3],
        stride,
        pad,
    };
    if g.out_hw().is_none() {
        return Err(format!("kernel {ws:?} larger than padded input {xs:?}"));
    }
    Ok(g)
}

fn pool_geom<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize) -> Result<PoolGeom, String> {
    if x.ndim() != 4 {
        return Err(format!("expected NHWC input, got {:?}", x.shape()));
    }
    let s = x.shape();
    let g = PoolGeom { n: s[0], h: s[1], w: s[2], c: s[3], size, stride };
    if g.out_hw().is_none() {
        return Err(format!("pool window {size} larger than input {s:?}"));
    }
    Ok(g)
}

fn last_dim<T: Scalar>(x: &Tensor<T>) -> Result<usize, String> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| "expected at least one axis".to_string())
}

fn rows_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize), String> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(format!(
            "expected equal [N, D] operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn concat_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>, String> {
    let first = parts.first().ok_or_else(|| "concat of nothing".to_string())?;
    let lead = &first.shape()[..first.ndim().saturating_sub(1)];
    for p in parts {
        if p.ndim() != first.ndim() || &p.shape()[..p.ndim() - 1] != lead {
            return Err(format!(
                "leading dims differ: {:?} vs {:?}",
                first.shape(),
                p.shape()
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}

/// Compares reverse-mode gradients with central differences, both computed
/// in 64-bit. Returns the largest per-parameter relative error
/// `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.
pub fn finite_diff_check(graph: &ExprGraph, loss: NodeId, bindings: &Bindings, eps: f64) -> Result<f64> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(HalluxError::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut params: ParamMap<f64> = graph.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let binds: Bindings<f64> = bindings.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let (_, analytic) = graph.backward_generic(&params, &binds, loss)?;

    let eval = |p: &ParamMap<f64>| -> Result<f64> {
        let values = graph.forward(p, &binds, &[loss])?;
        Ok(values.get(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let n = params[&name].len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params[&name].data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let a = analytic[&name].data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        worst = worst.max(rel);
    }
    Ok(worst)
}
