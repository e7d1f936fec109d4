//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once per model; nodes are stored in topological
//! order (every input id precedes its consumer). [`Graph::evaluate`] runs the
//! forward pass for the requested nodes and their ancestors only, and
//! [`Graph::backward`] walks the stored values in reverse.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, ConvSpec, GrlSpec};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    Param(String),
    /// Inputs: `[x, weights, bias]`.
    Conv2d(ConvSpec),
    /// Inputs: `[x, weights, bias]`.
    ConvTranspose2d(ConvSpec),
    Relu,
    Sigmoid,
    /// `stream` selects the mask generator; nodes sharing a stream id in two
    /// graphs draw identical masks for the same seed.
    Dropout { rate: f64, stream: u64 },
    Add,
    GradientReversal(GrlSpec),
    /// Inputs: `[pred, target]`. The target receives no gradient.
    Bce,
    /// Inputs: `[logits, target]`. Cross-entropy of `sigmoid(logits)` in its
    /// unclamped logit form, with gradient `(σ(z) − t) / n`.
    BceWithLogits,
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub label: String,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: BTreeMap<String, NodeId>,
}

pub type Bindings = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub training: bool,
    pub seed: u64,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn training(seed: u64) -> Self {
        ForwardOptions { training: true, seed }
    }
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Option<Tensor>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }
}

fn accumulate(map: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize], grad: Vec<f64>) {
    match map.get_mut(name) {
        Some(t) => t.data_mut().iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
        None => {
            map.insert(
                name.to_string(),
                Tensor::new(shape.to_vec(), grad).expect("gradient matches value shape"),
            );
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn add_node(&mut self, op: Op, inputs: Vec<NodeId>, label: impl Into<String>) -> Result<NodeId> {
        let id = self.nodes.len();
        let label = label.into();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(Error::InvalidArgument(format!(
                "node `{label}` references input {bad} which does not precede it"
            )));
        }
        let arity = match &op {
            Op::Input(_) | Op::Param(_) => 0,
            Op::Conv2d(_) | Op::ConvTranspose2d(_) => 3,
            Op::Add | Op::Bce | Op::BceWithLogits => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "node `{label}` expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match &op {
            Op::Conv2d(spec) | Op::ConvTranspose2d(spec) => spec.validate()?,
            Op::Dropout { rate, .. } => layers::check_rate(*rate)?,
            _ => {}
        }
        self.nodes.push(Node { op, inputs, label });
        Ok(id)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.add_node(Op::Input(name.into()), vec![], name).expect("leaf node")
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.add_node(Op::Param(name.into()), vec![], name).expect("leaf node")
    }

    pub fn unary(&mut self, op: Op, x: NodeId, label: impl Into<String>) -> Result<NodeId> {
        self.add_node(op, vec![x], label)
    }

    /// Convolution with weights `{prefix}.weight` and bias `{prefix}.bias`.
    pub fn conv2d(&mut self, x: NodeId, spec: ConvSpec, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.add_node(Op::Conv2d(spec), vec![x, w, b], prefix)
    }

    pub fn conv2d_transpose(&mut self, x: NodeId, spec: ConvSpec, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.add_node(Op::ConvTranspose2d(spec), vec![x, w, b], prefix)
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("graph has no output `{name}`")))
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    /// Sets the coefficient of every gradient-reversal node.
    pub fn set_grl_lambda(&mut self, lambda: f64) -> Result<()> {
        let spec = GrlSpec::new(lambda)?;
        for node in &mut self.nodes {
            if let Op::GradientReversal(s) = &mut node.op {
                *s = spec;
            }
        }
        Ok(())
    }

    fn ancestors(&self, targets: &[NodeId]) -> Result<Vec<bool>> {
        let mut needed = vec![false; self.nodes.len()];
        for &t in targets {
            if t >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!("no node {t}")));
            }
            needed[t] = true;
        }
        for id in (0..self.nodes.len()).rev() {
            if needed[id] {
                for &i in &self.nodes[id].inputs {
                    needed[i] = true;
                }
            }
        }
        Ok(needed)
    }

    /// Forward pass over `targets` and their ancestors.
    pub fn evaluate(
        &self,
        params: &Parameters,
        bindings: &Bindings,
        opts: ForwardOptions,
        targets: &[NodeId],
    ) -> Result<Evaluation> {
        self.evaluate_with(params, bindings, opts, targets, None)
    }

    /// With `reversal_base`, every gradient-reversal node outputs
    /// `h₀ − λ(h − h₀)` where `h₀` is its input in the base evaluation: equal
    /// to `h` at the base point, with the reversed derivative around it.
    fn evaluate_with(
        &self,
        params: &Parameters,
        bindings: &Bindings,
        opts: ForwardOptions,
        targets: &[NodeId],
        reversal_base: Option<&Evaluation>,
    ) -> Result<Evaluation> {
        let needed = self.ancestors(targets)?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut masks: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if !needed[id] {
                continue;
            }
            let arg = |k: usize| values[node.inputs[k]].as_ref().expect("inputs evaluated first");
            let out = match &node.op {
                Op::Input(name) => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                Op::Param(name) => params.require(name)?.clone(),
                Op::Conv2d(spec) => layers::conv2d(arg(0), spec, arg(1), arg(2)).map_err(|e| relabel(e, &node.label))?,
                Op::ConvTranspose2d(spec) => {
                    layers::conv2d_transpose(arg(0), spec, arg(1), arg(2)).map_err(|e| relabel(e, &node.label))?
                }
                Op::Relu => layers::relu(arg(0)),
                Op::Sigmoid => layers::sigmoid(arg(0)),
                Op::Dropout { rate, stream } => {
                    let x = arg(0);
                    if opts.training && *rate > 0.0 {
                        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                        rng.set_stream(*stream);
                        let mask = layers::dropout_mask(x.len(), *rate, &mut rng)?;
                        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                        masks[id] = Some(mask);
                        Tensor::new(x.shape().to_vec(), data)?
                    } else {
                        x.clone()
                    }
                }
                Op::Add => {
                    let (a, b) = (arg(0), arg(1));
                    if a.shape() != b.shape() {
                        return Err(Error::shape(
                            &node.label,
                            format!("add of {:?} and {:?}", a.shape(), b.shape()),
                        ));
                    }
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape().to_vec(), data)?
                }
                Op::GradientReversal(spec) => match reversal_base.and_then(|b| b.value(node.inputs[0])) {
                    Some(h0) => {
                        let data = arg(0)
                            .data()
                            .iter()
                            .zip(h0.data())
                            .map(|(h, h0)| h0 - spec.lambda * (h - h0))
                            .collect();
                        Tensor::new(h0.shape().to_vec(), data)?
                    }
                    None => layers::gradient_reversal(arg(0), *spec),
                },
                Op::Bce => {
                    let (p, t) = (arg(0), arg(1));
                    Tensor::scalar(layers::bce_loss(p, t).map_err(|e| relabel(e, &node.label))?)
                }
                Op::BceWithLogits => {
                    let (z, t) = (arg(0), arg(1));
                    Tensor::scalar(layers::bce_with_logits_loss(z, t).map_err(|e| relabel(e, &node.label))?)
                }
                Op::Sum => Tensor::scalar(arg(0).data().iter().sum()),
                Op::Mean => {
                    let x = arg(0);
                    Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
                }
            };
            if !out.is_finite() {
                return Err(Error::NonFinite(node.label.clone()));
            }
            values[id] = Some(out);
        }
        Ok(Evaluation { values, masks })
    }

    /// Forward pass returning every named output.
    pub fn forward(&self, params: &Parameters, bindings: &Bindings, opts: ForwardOptions) -> Result<BTreeMap<String, Tensor>> {
        let targets: Vec<NodeId> = self.outputs.values().copied().collect();
        let eval = self.evaluate(params, bindings, opts, &targets)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, &id)| (name.clone(), eval.values[id].clone().expect("evaluated")))
            .collect())
    }

    /// Reverse pass from the scalar `loss` node of a completed evaluation.
    pub fn backward(&self, eval: &Evaluation, loss: NodeId) -> Result<Gradients> {
        let loss_value = eval
            .value(loss)
            .ok_or_else(|| Error::Backward(format!("node {loss} was not evaluated; run forward first")))?;
        if loss_value.shape() != [1] {
            return Err(Error::Backward(format!(
                "loss must have shape [1], got {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |k: usize| eval.values[node.inputs[k]].as_ref().expect("forward value");
            let mut push = |target: NodeId, delta: Vec<f64>| match &mut grads[target] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => grads[target] = Some(delta),
            };
            match &node.op {
                Op::Input(name) => {
                    let shape = eval.values[id].as_ref().expect("forward value").shape();
                    accumulate(&mut out.inputs, name, shape, g);
                }
                Op::Param(name) => {
                    let shape = eval.values[id].as_ref().expect("forward value").shape();
                    accumulate(&mut out.params, name, shape, g);
                }
                Op::Conv2d(spec) => {
                    let x = val(0);
                    let (h, w) = (x.shape()[1], x.shape()[2]);
                    let y = eval.values[id].as_ref().expect("forward value");
                    let geo = layers::conv_geometry(spec, (h, w), (y.shape()[1], y.shape()[2]));
                    let mut gx = vec![0.0; x.len()];
                    geo.scatter(&g, val(1).data(), &mut gx);
                    let mut gw = vec![0.0; val(1).len()];
                    geo.correlate_weights(&g, x.data(), &mut gw);
                    let gb = plane_sums(&g, spec.out_channels);
                    push(node.inputs[0], gx);
                    push(node.inputs[1], gw);
                    push(node.inputs[2], gb);
                }
                Op::ConvTranspose2d(spec) => {
                    let x = val(0);
                    let y = eval.values[id].as_ref().expect("forward value");
                    let geo = layers::transpose_geometry(
                        spec,
                        (x.shape()[1], x.shape()[2]),
                        (y.shape()[1], y.shape()[2]),
                    );
                    let mut gx = vec![0.0; x.len()];
                    geo.gather(&g, val(1).data(), &mut gx);
                    let mut gw = vec![0.0; val(1).len()];
                    geo.correlate_weights(x.data(), &g, &mut gw);
                    let gb = plane_sums(&g, spec.out_channels);
                    push(node.inputs[0], gx);
                    push(node.inputs[1], gw);
                    push(node.inputs[2], gb);
                }
                Op::Relu => {
                    let d = g
                        .iter()
                        .zip(val(0).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    push(node.inputs[0], d);
                }
                Op::Sigmoid => {
                    let y = eval.values[id].as_ref().expect("forward value");
                    let d = g.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    push(node.inputs[0], d);
                }
                Op::Dropout { .. } => {
                    let d = match &eval.masks[id] {
                        Some(mask) => g.iter().zip(mask).map(|(g, m)| g * m).collect(),
                        None => g,
                    };
                    push(node.inputs[0], d);
                }
                Op::Add => {
                    push(node.inputs[0], g.clone());
                    push(node.inputs[1], g);
                }
                Op::GradientReversal(spec) => {
                    push(node.inputs[0], layers::gradient_reversal_backward(&g, *spec));
                }
                Op::Bce => {
                    push(node.inputs[0], layers::bce_grad(val(0).data(), val(1).data(), g[0]));
                }
                Op::BceWithLogits => {
                    let n = val(0).len() as f64;
                    let d = val(0)
                        .data()
                        .iter()
                        .zip(val(1).data())
                        .map(|(&z, &t)| g[0] * (layers::sigmoid_scalar(z) - t) / n)
                        .collect();
                    push(node.inputs[0], d);
                }
                Op::Sum => {
                    push(node.inputs[0], vec![g[0]; val(0).len()]);
                }
                Op::Mean => {
                    let n = val(0).len();
                    push(node.inputs[0], vec![g[0] / n as f64; n]);
                }
            }
        }
        Ok(out)
    }

    /// Maximum relative error between the analytic gradient of `loss` with
    /// respect to parameter `param` and central finite differences.
    ///
    /// Per element: `|a − n| / max(|a|, |n|, 1e-8)`. Gradient-reversal nodes
    /// are probed through the surrogate `h₀ − λ(h − h₀)`, so paths through
    /// them are checked against the reversed derivative rather than the
    /// identity forward. The loss difference is accumulated per term through
    /// reductions, and a probe whose `θ ± ε` straddles a ReLU kink is retaken
    /// with a smaller ε, since a difference across a kink is not a derivative.
    pub fn grad_check(
        &self,
        params: &Parameters,
        bindings: &Bindings,
        opts: ForwardOptions,
        loss: NodeId,
        param: &str,
        epsilon: f64,
    ) -> Result<f64> {
        Ok(self.probe_all(params, bindings, opts, loss, param, epsilon)?.max_rel_error)
    }

    /// Like [`Graph::grad_check`], with counts of how each probe was taken.
    pub fn grad_check_report(
        &self,
        params: &Parameters,
        bindings: &Bindings,
        opts: ForwardOptions,
        loss: NodeId,
        param: &str,
        epsilon: f64,
    ) -> Result<GradCheckReport> {
        self.probe_all(params, bindings, opts, loss, param, epsilon)
    }

    fn probe_all(
        &self,
        params: &Parameters,
        bindings: &Bindings,
        opts: ForwardOptions,
        loss: NodeId,
        param: &str,
        epsilon: f64,
    ) -> Result<GradCheckReport> {
        if !(epsilon > 0.0 && epsilon <= 1e-3) {
            return Err(Error::InvalidArgument(format!("epsilon must be in (0, 1e-3], got {epsilon}")));
        }
        let eval = self.evaluate(params, bindings, opts, &[loss])?;
        let grads = self.backward(&eval, loss)?;
        let base = params.require(param)?;
        let zeros = vec![0.0; base.len()];
        let analytic = grads.param(param).map(Tensor::data).unwrap_or(&zeros);
        let relu_inputs: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu))
            .map(|n| n.inputs[0])
            .filter(|&i| eval.value(i).is_some())
            .collect();
        let crosses_kink = |e: &Evaluation| {
            relu_inputs.iter().any(|&i| {
                let (x, y) = (eval.value(i).expect("evaluated"), e.value(i).expect("evaluated"));
                x.data().iter().zip(y.data()).any(|(&u, &v)| (u > 0.0) != (v > 0.0))
            })
        };

        let mut probe = params.clone();
        let mut report = GradCheckReport::default();
        for (idx, &orig) in base.data().iter().enumerate() {
            let mut eval_at = |value: f64| -> Result<Evaluation> {
                probe.get_mut(param).expect("present").data_mut()[idx] = value;
                self.evaluate_with(&probe, bindings, opts, &[loss], Some(&eval))
            };
            let mut eps = epsilon;
            let mut refinements = 0;
            let numeric = loop {
                let plus = eval_at(orig + eps)?;
                let minus = eval_at(orig - eps)?;
                let kink = crosses_kink(&plus) || crosses_kink(&minus);
                if kink && refinements < MAX_KINK_REFINEMENTS {
                    eps /= 10.0;
                    refinements += 1;
                    continue;
                }
                if kink {
                    report.unresolved_kinks += 1;
                }
                break self.loss_delta(&plus, &minus, loss) / (2.0 * eps);
            };
            probe.get_mut(param).expect("present").data_mut()[idx] = orig;
            if refinements > 0 {
                report.refined_probes += 1;
            }
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.probes += 1;
            report.max_rel_error = report.max_rel_error.max(err);
        }
        Ok(report)
    }

    /// `L(a) − L(b)` for a scalar node, differenced term by term through
    /// reductions so the rounding of the totals does not swamp small changes.
    fn loss_delta(&self, a: &Evaluation, b: &Evaluation, id: NodeId) -> f64 {
        let node = &self.nodes[id];
        let vals = |k: usize| {
            let i = node.inputs[k];
            (a.value(i).expect("evaluated").data(), b.value(i).expect("evaluated").data())
        };
        let termwise = |term: fn(f64, f64) -> f64, xa: &[f64], xb: &[f64], t: &[f64]| {
            let total: f64 = xa.iter().zip(xb).zip(t).map(|((&p, &q), &t)| term(p, t) - term(q, t)).sum();
            total / t.len() as f64
        };
        match &node.op {
            Op::Add if a.value(id).is_some_and(|v| v.len() == 1) => {
                self.loss_delta(a, b, node.inputs[0]) + self.loss_delta(a, b, node.inputs[1])
            }
            Op::Sum | Op::Mean => {
                let (xa, xb) = vals(0);
                let total: f64 = xa.iter().zip(xb).map(|(p, q)| p - q).sum();
                if matches!(node.op, Op::Mean) {
                    total / xa.len() as f64
                } else {
                    total
                }
            }
            Op::Bce | Op::BceWithLogits => {
                let ((xa, xb), (t, _)) = (vals(0), vals(1));
                let term = if matches!(node.op, Op::Bce) { layers::bce_term } else { layers::bce_logit_term };
                termwise(term, xa, xb, t)
            }
            _ => a.value(id).expect("evaluated").data()[0] - b.value(id).expect("evaluated").data()[0],
        }
    }
}

/// Probes whose interval straddles a ReLU kink are retried with ε shrunk
/// tenfold, at most this many times.
const MAX_KINK_REFINEMENTS: usize = 4;

/// Outcome of a finite-difference check over one parameter tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    /// Probes retaken with a smaller ε because `θ ± ε` crossed a ReLU kink.
    pub refined_probes: usize,
    /// Probes that still crossed a kink at the smallest ε.
    pub unresolved_kinks: usize,
    /// `|a − n| / max(|a|, |n|, 1e-8)` over all probes.
    pub max_rel_error: f64,
}

fn plane_sums(g: &[f64], channels: usize) -> Vec<f64> {
    let plane = g.len() / channels;
    g.chunks(plane).map(|c| c.iter().sum()).collect()
}

fn relabel(err: Error, label: &str) -> Error {
    match err {
        Error::Shape { detail, node } => Error::Shape {
            node: format!("{label} ({node})"),
            detail,
        },
        other => other,
    }
}
