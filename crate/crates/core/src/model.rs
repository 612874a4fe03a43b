//! Residual graph-convolution network with attention readout.
//!
//! Per layer, with `Â` the normalized adjacency:
//!
//! ```text
//! A = ReLU(BN(H))
//! U = dropout(ReLU(Â A W))
//! H' = α U + (1 - α) H R
//! ```
//!
//! The final node states are pooled with softmax attention weights computed
//! by a small gate network, fed to a two-layer regressor, and mapped through
//! a scalar affine calibration. Gradients are computed in reverse mode by
//! [`backward`], from the cached activations in a [`ForwardTrace`].

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::ProjectionParams;
use crate::error::{IqaError, Result};
use crate::graph::{QualityGraph, SparseAdjacency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateVariant {
    /// `w_i = vᵀ tanh(V h_i + c)`
    PlainMlp,
    /// `w_i = uᵀ (tanh(V h_i + b) ⊙ σ(U h_i + c))`
    GatedTanhSigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Statistics batch norm normalizes with in eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BnEval {
    /// Mean and variance over the nodes of the graph being scored, as in
    /// training.
    Graph,
    /// Running averages collected during training.
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub gate_hidden: usize,
    pub head_hidden: usize,
    pub gate_variant: GateVariant,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub bn_eval: BnEval,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 512,
            layers: 3,
            alpha: 0.55,
            dropout: 0.15,
            gate_hidden: 128,
            head_hidden: 256,
            gate_variant: GateVariant::PlainMlp,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            bn_eval: BnEval::Graph,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(IqaError::InvalidConfig(msg));
        if self.d == 0 || self.gate_hidden == 0 || self.head_hidden == 0 {
            return bad("d, gate_hidden and head_hidden must be >= 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("batch-norm momentum must be in (0, 1] and eps > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub bn: BatchNormParams,
    /// Graph-convolution weight `W`, `d x d`.
    pub conv: Array2<f64>,
    /// Residual projection `R`, `d x d`.
    pub residual: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateParams {
    Plain {
        hidden_w: Array2<f64>,
        hidden_b: Array1<f64>,
        out_w: Array1<f64>,
    },
    Gated {
        tanh_w: Array2<f64>,
        tanh_b: Array1<f64>,
        sigmoid_w: Array2<f64>,
        sigmoid_b: Array1<f64>,
        out_w: Array1<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub out_w: Array1<f64>,
    pub out_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub scale: f64,
    pub offset: f64,
}

/// Every tensor of the model, including the input projection. Gradients use
/// the same type; their batch-norm running statistics stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub projection: ProjectionParams,
    pub layers: Vec<LayerParams>,
    pub gate: GateParams,
    pub head: HeadParams,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

/// A flattened tensor with its name and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn uniform2(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

fn uniform1(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_fn(len, |_| rng.gen_range(-bound..=bound))
}

impl ModelParams {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, zero
    /// biases, identity residual projections, unit calibration.
    pub fn init(config: &ModelConfig, d_raw: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let projection = ProjectionParams::init(d_raw, d, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                bn: BatchNormParams {
                    gamma: Array1::ones(d),
                    beta: Array1::zeros(d),
                    running_mean: Array1::zeros(d),
                    running_var: Array1::ones(d),
                },
                conv: uniform2(d, d, &mut rng),
                residual: Array2::eye(d),
            })
            .collect();
        let gh = config.gate_hidden;
        let gate = match config.gate_variant {
            GateVariant::PlainMlp => GateParams::Plain {
                hidden_w: uniform2(d, gh, &mut rng),
                hidden_b: Array1::zeros(gh),
                out_w: uniform1(gh, gh, &mut rng),
            },
            GateVariant::GatedTanhSigmoid => GateParams::Gated {
                tanh_w: uniform2(d, gh, &mut rng),
                tanh_b: Array1::zeros(gh),
                sigmoid_w: uniform2(d, gh, &mut rng),
                sigmoid_b: Array1::zeros(gh),
                out_w: uniform1(gh, gh, &mut rng),
            },
        };
        let hh = config.head_hidden;
        let head = HeadParams {
            hidden_w: uniform2(d, hh, &mut rng),
            hidden_b: Array1::zeros(hh),
            out_w: uniform1(hh, hh, &mut rng),
            out_b: 0.0,
        };
        Self {
            projection,
            layers,
            gate,
            head,
            calibration: Calibration {
                scale: 1.0,
                offset: 0.0,
            },
        }
    }

    pub fn d_raw(&self) -> usize {
        self.projection.weight.nrows()
    }

    pub fn d(&self) -> usize {
        self.projection.weight.ncols()
    }

    pub fn gate_variant(&self) -> GateVariant {
        match self.gate {
            GateParams::Plain { .. } => GateVariant::PlainMlp,
            GateParams::Gated { .. } => GateVariant::GatedTanhSigmoid,
        }
    }

    /// Calls `f` on every tensor in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], ParamKind, &[f64])) {
        use ParamKind::*;
        let p = &self.projection;
        f("proj.weight", p.weight.shape(), Trainable, p.weight.as_slice().unwrap());
        f("proj.bias", p.bias.shape(), Trainable, p.bias.as_slice().unwrap());
        for (l, layer) in self.layers.iter().enumerate() {
            let tensors: [(&str, &[usize], ParamKind, &[f64]); 6] = [
                ("bn.gamma", layer.bn.gamma.shape(), Trainable, layer.bn.gamma.as_slice().unwrap()),
                ("bn.beta", layer.bn.beta.shape(), Trainable, layer.bn.beta.as_slice().unwrap()),
                ("bn.running_mean", layer.bn.running_mean.shape(), Buffer, layer.bn.running_mean.as_slice().unwrap()),
                ("bn.running_var", layer.bn.running_var.shape(), Buffer, layer.bn.running_var.as_slice().unwrap()),
                ("conv.weight", layer.conv.shape(), Trainable, layer.conv.as_slice().unwrap()),
                ("residual.weight", layer.residual.shape(), Trainable, layer.residual.as_slice().unwrap()),
            ];
            for (name, shape, kind, data) in tensors {
                f(&format!("layers.{l}.{name}"), shape, kind, data);
            }
        }
        match &self.gate {
            GateParams::Plain { hidden_w, hidden_b, out_w } => {
                f("gate.hidden.weight", hidden_w.shape(), Trainable, hidden_w.as_slice().unwrap());
                f("gate.hidden.bias", hidden_b.shape(), Trainable, hidden_b.as_slice().unwrap());
                f("gate.out.weight", out_w.shape(), Trainable, out_w.as_slice().unwrap());
            }
            GateParams::Gated { tanh_w, tanh_b, sigmoid_w, sigmoid_b, out_w } => {
                f("gate.tanh.weight", tanh_w.shape(), Trainable, tanh_w.as_slice().unwrap());
                f("gate.tanh.bias", tanh_b.shape(), Trainable, tanh_b.as_slice().unwrap());
                f("gate.sigmoid.weight", sigmoid_w.shape(), Trainable, sigmoid_w.as_slice().unwrap());
                f("gate.sigmoid.bias", sigmoid_b.shape(), Trainable, sigmoid_b.as_slice().unwrap());
                f("gate.out.weight", out_w.shape(), Trainable, out_w.as_slice().unwrap());
            }
        }
        let h = &self.head;
        f("head.hidden.weight", h.hidden_w.shape(), Trainable, h.hidden_w.as_slice().unwrap());
        f("head.hidden.bias", h.hidden_b.shape(), Trainable, h.hidden_b.as_slice().unwrap());
        f("head.out.weight", h.out_w.shape(), Trainable, h.out_w.as_slice().unwrap());
        f("head.out.bias", &[], Trainable, std::slice::from_ref(&h.out_b));
        f("calibration.scale", &[], Trainable, std::slice::from_ref(&self.calibration.scale));
        f("calibration.offset", &[], Trainable, std::slice::from_ref(&self.calibration.offset));
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        use ParamKind::*;
        let p = &mut self.projection;
        f("proj.weight", Trainable, p.weight.as_slice_mut().unwrap());
        f("proj.bias", Trainable, p.bias.as_slice_mut().unwrap());
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{l}.bn.gamma"), Trainable, layer.bn.gamma.as_slice_mut().unwrap());
            f(&format!("layers.{l}.bn.beta"), Trainable, layer.bn.beta.as_slice_mut().unwrap());
            f(&format!("layers.{l}.bn.running_mean"), Buffer, layer.bn.running_mean.as_slice_mut().unwrap());
            f(&format!("layers.{l}.bn.running_var"), Buffer, layer.bn.running_var.as_slice_mut().unwrap());
            f(&format!("layers.{l}.conv.weight"), Trainable, layer.conv.as_slice_mut().unwrap());
            f(&format!("layers.{l}.residual.weight"), Trainable, layer.residual.as_slice_mut().unwrap());
        }
        match &mut self.gate {
            GateParams::Plain { hidden_w, hidden_b, out_w } => {
                f("gate.hidden.weight", Trainable, hidden_w.as_slice_mut().unwrap());
                f("gate.hidden.bias", Trainable, hidden_b.as_slice_mut().unwrap());
                f("gate.out.weight", Trainable, out_w.as_slice_mut().unwrap());
            }
            GateParams::Gated { tanh_w, tanh_b, sigmoid_w, sigmoid_b, out_w } => {
                f("gate.tanh.weight", Trainable, tanh_w.as_slice_mut().unwrap());
                f("gate.tanh.bias", Trainable, tanh_b.as_slice_mut().unwrap());
                f("gate.sigmoid.weight", Trainable, sigmoid_w.as_slice_mut().unwrap());
                f("gate.sigmoid.bias", Trainable, sigmoid_b.as_slice_mut().unwrap());
                f("gate.out.weight", Trainable, out_w.as_slice_mut().unwrap());
            }
        }
        let h = &mut self.head;
        f("head.hidden.weight", Trainable, h.hidden_w.as_slice_mut().unwrap());
        f("head.hidden.bias", Trainable, h.hidden_b.as_slice_mut().unwrap());
        f("head.out.weight", Trainable, h.out_w.as_slice_mut().unwrap());
        f("head.out.bias", Trainable, std::slice::from_mut(&mut h.out_b));
        f("calibration.scale", Trainable, std::slice::from_mut(&mut self.calibration.scale));
        f("calibration.offset", Trainable, std::slice::from_mut(&mut self.calibration.offset));
    }

    /// Same shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, s| s.fill(0.0));
        z
    }

    pub fn n_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, kind, s| {
            if kind == ParamKind::Trainable {
                n += s.len()
            }
        });
        n
    }

    /// `self += other`, every tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let flat = other.flatten(None);
        let mut off = 0;
        self.visit_mut(&mut |_, _, s| {
            for v in s.iter_mut() {
                *v += flat[off];
                off += 1;
            }
        });
    }

    /// Concatenation of all tensors (or those of one kind) in visit order.
    pub fn flatten(&self, kind: Option<ParamKind>) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, k, s| {
            if kind.is_none_or(|want| want == k) {
                out.extend_from_slice(s)
            }
        });
        out
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit(&mut |name, dims, _, data| {
            out.push(NamedTensor {
                name: name.to_string(),
                dims: dims.to_vec(),
                data: data.to_vec(),
            })
        });
        out
    }

    /// Rebuilds parameters from named tensors. Widths, depth and gate variant
    /// are inferred from the tensor names and shapes.
    pub fn from_named_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let malformed = |msg: String| IqaError::MalformedCheckpoint(msg);
        let mut by_name: HashMap<String, NamedTensor> = HashMap::new();
        for t in tensors {
            let expected: usize = t.dims.iter().product();
            if t.data.len() != expected {
                return Err(malformed(format!("tensor `{}` has {} values for dims {:?}", t.name, t.data.len(), t.dims)));
            }
            if by_name.insert(t.name.clone(), t).is_some() {
                return Err(malformed("duplicate tensor name".into()));
            }
        }
        let dims_of = |name: &str| -> Result<&[usize]> {
            by_name
                .get(name)
                .map(|t| t.dims.as_slice())
                .ok_or_else(|| malformed(format!("missing tensor `{name}`")))
        };
        let proj = dims_of("proj.weight")?;
        if proj.len() != 2 {
            return Err(malformed("proj.weight must be rank 2".into()));
        }
        let (d_raw, d) = (proj[0], proj[1]);
        let layers = (0..)
            .take_while(|l| by_name.contains_key(&format!("layers.{l}.conv.weight")))
            .count();
        let (gate_variant, gate_key) = if by_name.contains_key("gate.hidden.weight") {
            (GateVariant::PlainMlp, "gate.hidden.weight")
        } else {
            (GateVariant::GatedTanhSigmoid, "gate.tanh.weight")
        };
        let gate_hidden = *dims_of(gate_key)?
            .get(1)
            .ok_or_else(|| malformed(format!("{gate_key} must be rank 2")))?;
        let head_hidden = *dims_of("head.hidden.weight")?
            .get(1)
            .ok_or_else(|| malformed("head.hidden.weight must be rank 2".into()))?;
        let config = ModelConfig {
            d,
            layers,
            gate_hidden,
            head_hidden,
            gate_variant,
            ..ModelConfig::default()
        };
        if layers == 0 || d == 0 || d_raw == 0 {
            return Err(malformed("empty model".into()));
        }
        let mut params = ModelParams::init(&config, d_raw, 0);
        let mut shapes = HashMap::new();
        params.visit(&mut |name, dims, _, _| {
            shapes.insert(name.to_string(), dims.to_vec());
        });
        let mut failure = None;
        params.visit_mut(&mut |name, _, slot| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(name) {
                Some(t) if t.dims == shapes[name] => slot.copy_from_slice(&t.data),
                Some(t) => {
                    failure = Some(malformed(format!(
                        "tensor `{name}` has dims {:?}, expected {:?}",
                        t.dims, shapes[name]
                    )))
                }
                None => failure = Some(malformed(format!("missing tensor `{name}`"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(malformed(format!("unexpected tensor `{extra}`")));
        }
        Ok(params)
    }

    /// Rounds every value to `f32` precision, matching what a checkpoint
    /// stores.
    pub fn quantized_f32(&self) -> Self {
        let mut q = self.clone();
        q.visit_mut(&mut |_, _, s| s.iter_mut().for_each(|v| *v = *v as f32 as f64));
        q
    }

    /// Folds one graph's batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace, momentum: f64) {
        for (layer, lt) in self.layers.iter_mut().zip(&trace.layers) {
            let n = lt.input.nrows() as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            Zip::from(&mut layer.bn.running_mean)
                .and(&lt.batch_mean)
                .for_each(|r, &m| *r = (1.0 - momentum) * *r + momentum * m);
            Zip::from(&mut layer.bn.running_var)
                .and(&lt.batch_var)
                .for_each(|r, &v| *r = (1.0 - momentum) * *r + momentum * v * unbiased);
        }
    }
}

/// Cached activations of one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Array2<f64>,
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    /// `γ x̂ + β`
    pub pre_activation: Array2<f64>,
    /// `ReLU(γ x̂ + β)`
    pub activated: Array2<f64>,
    /// `Â · activated`
    pub aggregated: Array2<f64>,
    /// `Â · activated · W`
    pub conv_pre: Array2<f64>,
    /// Inverted-dropout multipliers (0 or `1/(1-p)`); `None` when inactive.
    pub dropout_mask: Option<Array2<f64>>,
    pub conv_out: Array2<f64>,
    pub residual_out: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutTrace {
    pub logits: Array1<f64>,
    pub weights: Array1<f64>,
    /// Tanh branch of the gate, `N x gate_hidden`.
    pub gate_tanh: Array2<f64>,
    /// Sigmoid branch, gated variant only.
    pub gate_sigmoid: Option<Array2<f64>>,
    pub pooled: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub hidden_pre: Array1<f64>,
    pub hidden: Array1<f64>,
    pub raw: f64,
    pub calibrated: f64,
}

/// Everything computed by one forward pass over one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub projected: Array2<f64>,
    pub layers: Vec<LayerTrace>,
    pub readout: ReadoutTrace,
    pub head: HeadTrace,
}

impl ForwardTrace {
    pub fn raw_score(&self) -> f64 {
        self.head.raw
    }

    pub fn prediction(&self) -> f64 {
        self.head.calibrated
    }

    pub fn attention(&self) -> ArrayView1<'_, f64> {
        self.readout.weights.view()
    }
}

fn uses_graph_stats(mode: Mode, config: &ModelConfig) -> bool {
    mode == Mode::Train || config.bn_eval == BnEval::Graph
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_finite(what: impl FnOnce() -> String, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(IqaError::NumericalBlowUp { location: what() })
    }
}

fn check_square(what: &'static str, a_hat: &SparseAdjacency, h: ArrayView2<f64>, w: &Array2<f64>) -> Result<()> {
    if a_hat.n() != h.nrows() {
        return Err(IqaError::shape(what, a_hat.n(), h.nrows()));
    }
    if w.nrows() != h.ncols() {
        return Err(IqaError::shape(what, h.ncols(), w.nrows()));
    }
    Ok(())
}

/// `ReLU(Â H W)`
pub fn gcn_layer(a_hat: &SparseAdjacency, h: ArrayView2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    check_square("graph convolution", a_hat, h, w)?;
    Ok(a_hat.matmul(h).dot(w).mapv(relu))
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn(shape, |_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

fn residual_block_traced(
    a_hat: &SparseAdjacency,
    h: ArrayView2<f64>,
    layer: &LayerParams,
    config: &ModelConfig,
    alpha: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<LayerTrace> {
    check_square("residual block", a_hat, h, &layer.conv)?;
    let n = h.nrows() as f64;
    let (batch_mean, batch_var) = if uses_graph_stats(mode, config) {
        let mean = h.sum_axis(Axis(0)) / n;
        let centered = &h - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        (mean, var)
    } else {
        (layer.bn.running_mean.clone(), layer.bn.running_var.clone())
    };
    let inv_std = batch_var.mapv(|v| 1.0 / (v + config.bn_eps).sqrt());
    let normalized = (&h - &batch_mean) * &inv_std;
    let pre_activation = &normalized * &layer.bn.gamma + &layer.bn.beta;
    let activated = pre_activation.mapv(relu);
    let aggregated = a_hat.matmul(activated.view());
    let conv_pre = aggregated.dot(&layer.conv);
    let mut conv_out = conv_pre.mapv(relu);
    let dropout_mask = if mode == Mode::Train && config.dropout > 0.0 {
        let mask = dropout_mask(conv_out.dim(), config.dropout, rng);
        conv_out *= &mask;
        Some(mask)
    } else {
        None
    };
    let residual_out = h.dot(&layer.residual);
    let output = &conv_out * alpha + &residual_out * (1.0 - alpha);
    Ok(LayerTrace {
        input: h.to_owned(),
        normalized,
        inv_std,
        batch_mean,
        batch_var,
        pre_activation,
        activated,
        aggregated,
        conv_pre,
        dropout_mask,
        conv_out,
        residual_out,
        output,
    })
}

/// One residual block: `α · dropout(ReLU(Â ReLU(BN(H)) W)) + (1 - α) · H R`.
///
/// `alpha` is taken as given (including the endpoints 0 and 1); dropout
/// masks are drawn from `seed` in train mode.
pub fn residual_block(
    a_hat: &SparseAdjacency,
    h: ArrayView2<f64>,
    layer: &LayerParams,
    config: &ModelConfig,
    alpha: f64,
    mode: Mode,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(residual_block_traced(a_hat, h, layer, config, alpha, mode, &mut rng)?.output)
}

fn gate_logits(h: ArrayView2<f64>, gate: &GateParams) -> (Array1<f64>, Array2<f64>, Option<Array2<f64>>) {
    match gate {
        GateParams::Plain { hidden_w, hidden_b, out_w } => {
            let t = (h.dot(hidden_w) + hidden_b).mapv(f64::tanh);
            (t.dot(out_w), t, None)
        }
        GateParams::Gated { tanh_w, tanh_b, sigmoid_w, sigmoid_b, out_w } => {
            let t = (h.dot(tanh_w) + tanh_b).mapv(f64::tanh);
            let s = (h.dot(sigmoid_w) + sigmoid_b).mapv(sigmoid);
            ((&t * &s).dot(out_w), t, Some(s))
        }
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn attention_readout_traced(h: ArrayView2<f64>, gate: &GateParams) -> ReadoutTrace {
    let (logits, gate_tanh, gate_sigmoid) = gate_logits(h, gate);
    let weights = softmax(logits.view());
    let pooled = weights.dot(&h);
    ReadoutTrace {
        logits,
        weights,
        gate_tanh,
        gate_sigmoid,
        pooled,
    }
}

/// Attention pooling: returns the pooled vector `z = Σ a_i h_i` and the
/// weights `a = softmax(g(h_i))`.
pub fn attention_readout(h: ArrayView2<f64>, gate: &GateParams) -> (Array1<f64>, Array1<f64>) {
    let t = attention_readout_traced(h, gate);
    (t.pooled, t.weights)
}

/// Pools precomputed logits; used where the gate network is bypassed.
pub fn pool_with_logits(h: ArrayView2<f64>, logits: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let a = softmax(logits);
    (a.dot(&h), a)
}

fn predict_head_traced(z: ArrayView1<f64>, head: &HeadParams, calibration: &Calibration) -> HeadTrace {
    let hidden_pre = z.dot(&head.hidden_w) + &head.hidden_b;
    let hidden = hidden_pre.mapv(relu);
    let raw = hidden.dot(&head.out_w) + head.out_b;
    HeadTrace {
        hidden_pre,
        hidden,
        raw,
        calibrated: calibration.scale * raw + calibration.offset,
    }
}

/// Regressor followed by calibration: returns `(ỹ, s·ỹ + b)`.
pub fn predict_head(z: ArrayView1<f64>, head: &HeadParams, calibration: &Calibration) -> (f64, f64) {
    let t = predict_head_traced(z, head, calibration);
    (t.raw, t.calibrated)
}

/// Full forward pass over one graph. `raw` holds the unprojected patch
/// features; dropout masks come from `seed` in train mode.
pub fn forward(
    graph: &QualityGraph,
    raw: ArrayView2<f64>,
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<ForwardTrace> {
    config.validate()?;
    if raw.nrows() != graph.n_nodes {
        return Err(IqaError::shape("node count", graph.n_nodes, raw.nrows()));
    }
    if raw.ncols() != params.d_raw() {
        return Err(IqaError::shape("feature width", params.d_raw(), raw.ncols()));
    }
    if params.layers.len() != config.layers || params.d() != config.d {
        return Err(IqaError::shape(
            "model layers x width",
            format!("{}x{}", config.layers, config.d),
            format!("{}x{}", params.layers.len(), params.d()),
        ));
    }
    let projected = crate::encoder::project(raw, &params.projection)?.matrix;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let input = layers
            .last()
            .map(|t: &LayerTrace| t.output.view())
            .unwrap_or(projected.view());
        let trace = residual_block_traced(&graph.a_hat, input, layer, config, config.alpha, mode, &mut rng)?;
        check_finite(|| format!("layer {l} forward"), trace.output.iter().copied())?;
        layers.push(trace);
    }
    let last = layers.last().expect("layers >= 1").output.view();
    let readout = attention_readout_traced(last, &params.gate);
    let head = predict_head_traced(readout.pooled.view(), &params.head, &params.calibration);
    check_finite(|| "prediction".into(), [head.calibrated])?;
    Ok(ForwardTrace {
        mode,
        projected,
        layers,
        readout,
        head,
    })
}

fn colsum(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Reverse pass: gradients of `d_pred · ŷ` with respect to every trainable
/// tensor, given the trace of a forward pass with the same inputs.
pub fn backward(
    graph: &QualityGraph,
    raw: ArrayView2<f64>,
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    d_pred: f64,
) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let alpha = config.alpha;

    // Calibration and regressor.
    let head = &trace.head;
    grads.calibration.scale = d_pred * head.raw;
    grads.calibration.offset = d_pred;
    let d_raw_score = d_pred * params.calibration.scale;
    grads.head.out_b = d_raw_score;
    grads.head.out_w = &head.hidden * d_raw_score;
    let d_hidden = Zip::from(&params.head.out_w)
        .and(&head.hidden_pre)
        .map_collect(|&w, &pre| if pre > 0.0 { d_raw_score * w } else { 0.0 });
    grads.head.hidden_w = outer(trace.readout.pooled.view(), d_hidden.view());
    grads.head.hidden_b = d_hidden.clone();
    let d_pooled = params.head.hidden_w.dot(&d_hidden);
    check_finite(|| "head backward".into(), d_pooled.iter().copied())?;

    // Attention readout.
    let ro = &trace.readout;
    let h_last = &trace.layers.last().expect("layers >= 1").output;
    let mut d_h = outer(ro.weights.view(), d_pooled.view());
    let d_weights = h_last.dot(&d_pooled);
    let mean_dw = ro.weights.dot(&d_weights);
    let d_logits = Zip::from(&ro.weights)
        .and(&d_weights)
        .map_collect(|&a, &da| a * (da - mean_dw));
    match (&params.gate, &mut grads.gate) {
        (GateParams::Plain { hidden_w, out_w, .. }, GateParams::Plain { hidden_w: gw, hidden_b: gb, out_w: go }) => {
            let t = &ro.gate_tanh;
            *go = t.t().dot(&d_logits);
            let mut d_pre = outer(d_logits.view(), out_w.view());
            Zip::from(&mut d_pre).and(t).for_each(|d, &tv| *d *= 1.0 - tv * tv);
            *gw = h_last.t().dot(&d_pre);
            *gb = colsum(&d_pre);
            d_h += &d_pre.dot(&hidden_w.t());
        }
        (
            GateParams::Gated { tanh_w, sigmoid_w, out_w, .. },
            GateParams::Gated { tanh_w: gtw, tanh_b: gtb, sigmoid_w: gsw, sigmoid_b: gsb, out_w: go },
        ) => {
            let t = &ro.gate_tanh;
            let s = ro.gate_sigmoid.as_ref().expect("gated trace has sigmoid branch");
            *go = (t * s).t().dot(&d_logits);
            let d_prod = outer(d_logits.view(), out_w.view());
            let d_t_pre = Zip::from(&d_prod)
                .and(t)
                .and(s)
                .map_collect(|&dp, &tv, &sv| dp * sv * (1.0 - tv * tv));
            let d_s_pre = Zip::from(&d_prod)
                .and(t)
                .and(s)
                .map_collect(|&dp, &tv, &sv| dp * tv * sv * (1.0 - sv));
            *gtw = h_last.t().dot(&d_t_pre);
            *gtb = colsum(&d_t_pre);
            *gsw = h_last.t().dot(&d_s_pre);
            *gsb = colsum(&d_s_pre);
            d_h += &d_t_pre.dot(&tanh_w.t());
            d_h += &d_s_pre.dot(&sigmoid_w.t());
        }
        _ => unreachable!("gradient set mirrors parameter variant"),
    }
    check_finite(|| "readout backward".into(), d_h.iter().copied())?;

    // Residual blocks, last to first.
    for (l, (lt, layer)) in trace.layers.iter().zip(&params.layers).enumerate().rev() {
        let g = &mut grads.layers[l];
        let d_out = d_h;
        let d_res = &d_out * (1.0 - alpha);
        g.residual = lt.input.t().dot(&d_res);
        let mut d_in = d_res.dot(&layer.residual.t());

        let mut d_conv_pre = &d_out * alpha;
        if let Some(mask) = &lt.dropout_mask {
            d_conv_pre *= mask;
        }
        Zip::from(&mut d_conv_pre)
            .and(&lt.conv_pre)
            .for_each(|d, &s| if s <= 0.0 { *d = 0.0 });
        g.conv = lt.aggregated.t().dot(&d_conv_pre);
        let d_aggregated = d_conv_pre.dot(&layer.conv.t());
        let mut d_pre_act = graph.a_hat.transpose_matmul(d_aggregated.view());
        Zip::from(&mut d_pre_act)
            .and(&lt.pre_activation)
            .for_each(|d, &y| if y <= 0.0 { *d = 0.0 });
        g.bn.gamma = colsum(&(&d_pre_act * &lt.normalized));
        g.bn.beta = colsum(&d_pre_act);
        let d_norm = &d_pre_act * &layer.bn.gamma;
        if uses_graph_stats(trace.mode, config) {
            let n = lt.input.nrows() as f64;
            let sum_d = colsum(&d_norm);
            let sum_dx = colsum(&(&d_norm * &lt.normalized));
            d_in += &(((&d_norm * n) - &sum_d - &(&lt.normalized * &sum_dx)) * &(&lt.inv_std / n));
        } else {
            d_in += &(&d_norm * &lt.inv_std);
        }
        let layer_grads = g.conv.iter().chain(g.residual.iter()).chain(g.bn.gamma.iter()).chain(g.bn.beta.iter());
        check_finite(|| format!("layer {l} backward"), layer_grads.copied().chain(d_in.iter().copied()))?;
        d_h = d_in;
    }

    // Input projection.
    grads.projection.weight = raw.t().dot(&d_h);
    grads.projection.bias = colsum(&d_h);
    check_finite(|| "projection backward".into(), grads.projection.weight.iter().copied())?;
    Ok(grads)
}

/// Train-mode forward and backward for one graph; returns the trace and the
/// gradients of `d_pred · ŷ`.
pub fn gradients(
    graph: &QualityGraph,
    raw: ArrayView2<f64>,
    params: &ModelParams,
    config: &ModelConfig,
    seed: u64,
    d_pred: f64,
) -> Result<(ForwardTrace, ModelParams)> {
    let trace = forward(graph, raw, params, config, Mode::Train, seed)?;
    let grads = backward(graph, raw, params, config, &trace, d_pred)?;
    Ok((trace, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphConfig};
    use ndarray::array;

    fn small_config(variant: GateVariant) -> ModelConfig {
        ModelConfig {
            d: 4,
            layers: 2,
            gate_hidden: 5,
            head_hidden: 6,
            gate_variant: variant,
            ..ModelConfig::default()
        }
    }

    fn instance(n: usize, d_raw: usize, seed: u64) -> (QualityGraph, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]).collect();
        let raw = Array2::from_shape_fn((n, d_raw), |_| rng.gen_range(-1.0..1.0));
        let cfg = GraphConfig {
            k: 3.min(n - 1),
            ..GraphConfig::default()
        };
        (build_graph(&centers, raw.view(), &cfg).unwrap(), raw)
    }

    fn identity_adjacency(n: usize) -> SparseAdjacency {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        SparseAdjacency::from_triplets(n, &t)
    }

    #[test]
    fn gcn_layer_examples() {
        let h = array![[0.5, 1.0], [2.0, 0.0], [0.0, 3.0]];
        let out = gcn_layer(&identity_adjacency(3), h.view(), &Array2::eye(2)).unwrap();
        assert_eq!(out, h);
        let zero = gcn_layer(&identity_adjacency(3), h.view(), &Array2::zeros((2, 2))).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let bad = gcn_layer(&identity_adjacency(2), h.view(), &Array2::eye(2));
        assert!(matches!(bad, Err(IqaError::ShapeMismatch { .. })));
    }

    #[test]
    fn gcn_layer_permutation_equivariant() {
        let (g, raw) = instance(7, 4, 1);
        let w = uniform2(4, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let mut ph = Array2::zeros((7, 4));
        for i in 0..7 {
            ph.row_mut(perm[i]).assign(&raw.row(i));
        }
        let base = gcn_layer(&g.a_hat, raw.view(), &w).unwrap();
        let permuted = gcn_layer(&g.a_hat.permuted(&perm), ph.view(), &w).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                assert!((permuted[[perm[i], j]] - base[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_mixing_endpoints() {
        let cfg = ModelConfig {
            bn_eval: BnEval::Running,
            ..small_config(GateVariant::PlainMlp)
        };
        let (g, h) = instance(6, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = LayerParams {
            bn: BatchNormParams {
                gamma: uniform1(4, 1, &mut rng),
                beta: uniform1(4, 1, &mut rng),
                running_mean: Array1::zeros(4),
                running_var: Array1::ones(4),
            },
            conv: uniform2(4, 4, &mut rng),
            residual: uniform2(4, 4, &mut rng),
        };
        let r = residual_block(&g.a_hat, h.view(), &layer, &cfg, 0.0, Mode::Eval, 0).unwrap();
        assert_eq!(r, h.dot(&layer.residual));
        // Eval mode with unit running statistics reduces BN to an affine map.
        let a = ((&h / (1.0 + cfg.bn_eps).sqrt()) * &layer.bn.gamma + &layer.bn.beta).mapv(relu);
        let u = residual_block(&g.a_hat, h.view(), &layer, &cfg, 1.0, Mode::Eval, 0).unwrap();
        let want = gcn_layer(&g.a_hat, a.view(), &layer.conv).unwrap();
        for (x, y) in u.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let cfg = ModelConfig {
            dropout: 0.5,
            ..small_config(GateVariant::PlainMlp)
        };
        let (g, raw) = instance(8, 3, 5);
        let p = ModelParams::init(&cfg, 3, 6);
        let train = forward(&g, raw.view(), &p, &cfg, Mode::Train, 9).unwrap();
        let mask = train.layers[0].dropout_mask.as_ref().unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        assert_eq!(forward(&g, raw.view(), &p, &cfg, Mode::Train, 9).unwrap(), train);
        let eval = forward(&g, raw.view(), &p, &cfg, Mode::Eval, 9).unwrap();
        assert!(eval.layers.iter().all(|l| l.dropout_mask.is_none()));
    }

    #[test]
    fn attention_examples() {
        let h = array![[1.0, -2.0, 0.5]];
        let gate = ModelParams::init(
            &ModelConfig {
                d: 3,
                ..small_config(GateVariant::PlainMlp)
            },
            2,
            0,
        )
        .gate;
        let (z, a) = attention_readout(h.view(), &gate);
        assert_eq!(a, array![1.0]);
        assert_eq!(z, h.row(0));

        let h = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
        let (z, a) = pool_with_logits(h.view(), array![0.7, 0.7, 0.7].view());
        assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!((z[0] - 3.0).abs() < 1e-12 && (z[1] - 5.0).abs() < 1e-12);

        let logits = array![0.3, -1.2, 2.5];
        let (z1, a1) = pool_with_logits(h.view(), logits.view());
        let (z2, a2) = pool_with_logits(h.view(), (&logits + 40.0).view());
        for (x, y) in a1.iter().chain(&z1).zip(a2.iter().chain(&z2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let a = softmax(array![1000.0, 1000.0, -1000.0].view());
        assert!((a[0] - 0.5).abs() < 1e-15 && a[2] == 0.0);
    }

    #[test]
    fn head_calibration_examples() {
        let cfg = small_config(GateVariant::PlainMlp);
        let p = ModelParams::init(&cfg, 3, 1);
        let z = array![0.3, -0.4, 0.9, 0.1];
        let (raw, cal) = predict_head(z.view(), &p.head, &p.calibration);
        assert_eq!(raw, cal);
        let (_, zeroed) = predict_head(z.view(), &p.head, &Calibration { scale: 0.0, offset: 0.25 });
        assert_eq!(zeroed, 0.25);
        let (raw2, cal2) = predict_head(z.view(), &p.head, &Calibration { scale: 2.0, offset: 1.0 });
        assert_eq!(raw2, raw);
        assert_eq!(cal2, 2.0 * raw + 1.0);
    }

    #[test]
    fn config_rejects_bad_values() {
        let base = small_config(GateVariant::PlainMlp);
        for bad in [
            ModelConfig { layers: 0, ..base },
            ModelConfig { alpha: 0.0, ..base },
            ModelConfig { alpha: 1.0, ..base },
            ModelConfig { dropout: 1.0, ..base },
        ] {
            assert!(matches!(bad.validate(), Err(IqaError::InvalidConfig(_))));
        }
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn eval_forward_is_deterministic_and_permutation_invariant() {
        for (variant, bn_eval) in [
            (GateVariant::PlainMlp, BnEval::Graph),
            (GateVariant::GatedTanhSigmoid, BnEval::Running),
        ] {
            let cfg = ModelConfig {
                bn_eval,
                ..small_config(variant)
            };
            let (g, raw) = instance(9, 5, 11);
            let mut p = ModelParams::init(&cfg, 5, 12);
            p.layers[0].bn.running_mean.fill(0.1);
            let a = forward(&g, raw.view(), &p, &cfg, Mode::Eval, 0).unwrap();
            let b = forward(&g, raw.view(), &p, &cfg, Mode::Eval, 77).unwrap();
            assert_eq!(a, b);
            assert!((a.attention().sum() - 1.0).abs() < 1e-12);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            for _ in 0..20 {
                let mut perm: Vec<usize> = (0..9).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                let mut praw = Array2::zeros(raw.dim());
                for i in 0..9 {
                    praw.row_mut(perm[i]).assign(&raw.row(i));
                }
                let pg = g.permuted(&perm);
                let y = forward(&pg, praw.view(), &p, &cfg, Mode::Eval, 0).unwrap().prediction();
                assert!((y - a.prediction()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_statistics_choice() {
        let cfg = ModelConfig {
            dropout: 0.0,
            ..small_config(GateVariant::PlainMlp)
        };
        let (g, raw) = instance(7, 3, 31);
        let mut p = ModelParams::init(&cfg, 3, 32);
        p.layers[0].bn.running_mean.fill(0.3);
        p.layers[0].bn.running_var.fill(2.0);
        let train = forward(&g, raw.view(), &p, &cfg, Mode::Train, 0).unwrap();
        let graph = forward(&g, raw.view(), &p, &cfg, Mode::Eval, 0).unwrap();
        assert_eq!(graph.prediction(), train.prediction());
        let running_cfg = ModelConfig {
            bn_eval: BnEval::Running,
            ..cfg
        };
        let running = forward(&g, raw.view(), &p, &running_cfg, Mode::Eval, 0).unwrap();
        assert!(running.layers[0].batch_mean.iter().all(|&m| m == 0.3));
        assert_ne!(running.prediction(), graph.prediction());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_config(GateVariant::GatedTanhSigmoid);
        let (g, raw) = instance(6, 3, 21);
        let p = ModelParams::init(&cfg, 3, 22);
        let (_, grads) = gradients(&g, raw.view(), &p, &cfg, 1, 0.0).unwrap();
        assert!(grads.flatten(None).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_node_offset_gradient_is_one() {
        let cfg = ModelConfig {
            dropout: 0.0,
            ..small_config(GateVariant::PlainMlp)
        };
        let g = QualityGraph {
            n_nodes: 1,
            edges: vec![],
            affinity: vec![],
            a_hat: identity_adjacency(1),
        };
        let p = ModelParams::init(&cfg, 2, 0);
        let raw = array![[0.4, -0.3]];
        let (trace, grads) = gradients(&g, raw.view(), &p, &cfg, 0, 1.0).unwrap();
        assert_eq!(grads.calibration.offset, 1.0);
        assert_eq!(grads.calibration.scale, trace.raw_score());
    }

    #[test]
    fn non_finite_input_reports_location() {
        let cfg = small_config(GateVariant::PlainMlp);
        let (g, mut raw) = instance(5, 3, 2);
        let p = ModelParams::init(&cfg, 3, 0);
        raw[[0, 0]] = f64::INFINITY;
        match forward(&g, raw.view(), &p, &cfg, Mode::Eval, 0) {
            Err(IqaError::NumericalBlowUp { location }) => assert!(location.contains("layer 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn named_tensor_round_trip() {
        for variant in [GateVariant::PlainMlp, GateVariant::GatedTanhSigmoid] {
            let p = ModelParams::init(&small_config(variant), 3, 5);
            assert_eq!(ModelParams::from_named_tensors(p.named_tensors()).unwrap(), p);
            let mut missing = p.named_tensors();
            missing.retain(|t| t.name != "head.out.bias");
            assert!(ModelParams::from_named_tensors(missing).is_err());
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let cfg = small_config(GateVariant::PlainMlp);
        let (g, raw) = instance(6, 3, 8);
        let mut p = ModelParams::init(&cfg, 3, 9);
        let trace = forward(&g, raw.view(), &p, &cfg, Mode::Train, 0).unwrap();
        p.update_running_stats(&trace, 0.1);
        let lt = &trace.layers[0];
        for j in 0..4 {
            assert!((p.layers[0].bn.running_mean[j] - 0.1 * lt.batch_mean[j]).abs() < 1e-15);
            let want = 0.9 + 0.1 * lt.batch_var[j] * 6.0 / 5.0;
            assert!((p.layers[0].bn.running_var[j] - want).abs() < 1e-15);
        }
    }
}
