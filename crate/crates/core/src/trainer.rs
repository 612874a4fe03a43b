//! Training loop: MOS normalization, batched forward/backward with the
//! balanced objective, AdamW, a weight-EMA shadow for evaluation,
//! checkpoint selection by validation SRCC and two-pass prediction.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IqaError, Result};
use crate::exec;
use crate::graph::QualityGraph;
use crate::metrics::MetricReport;
use crate::model::{backward, forward, ForwardTrace, Mode, ModelConfig, ModelParams, ParamKind};
use crate::objective::{evaluate_terms, normalized_total, EmaState, LossBreakdown, ObjectiveConfig, TermEvaluation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Z-scoring of MOS with training-set statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosNormalizer {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MosNormalizer {
    pub fn fit(mos: &[f64]) -> Result<Self> {
        if mos.len() < 2 || mos.iter().any(|v| !v.is_finite()) {
            return Err(IqaError::DegenerateMos);
        }
        let n = mos.len() as f64;
        let mean = mos.iter().sum::<f64>() / n;
        let var = mos.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(IqaError::DegenerateMos);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over all steps.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_ema_decay: f64,
    /// Use `min(decay, (1 + t) / (10 + t))` so the shadow tracks early steps.
    pub weight_ema_warmup: bool,
    pub tta_fraction: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 6e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            epochs: 200,
            seed: 0,
            weight_ema_decay: 0.999,
            weight_ema_warmup: true,
            tta_fraction: 0.5,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(IqaError::InvalidConfig(msg.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam epsilon must be > 0");
        }
        if self.batch_size < 2 {
            return bad("batch size must be >= 2");
        }
        if !(0.0..1.0).contains(&self.weight_ema_decay) {
            return bad("weight EMA decay must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.tta_fraction) {
            return bad("TTA fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// AdamW moment estimates over the trainable tensors, in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.n_trainable();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)` for every trainable value.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, config: &TrainConfig) {
        let g = grads.flatten(Some(ParamKind::Trainable));
        assert_eq!(g.len(), self.m.len(), "optimizer state does not match parameters");
        self.t += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = lr * config.weight_decay;
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, kind, values| {
            if kind != ParamKind::Trainable {
                return;
            }
            for theta in values.iter_mut() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + config.adam_epsilon);
                *theta -= decay * *theta + lr * update;
                i += 1;
            }
        });
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params` over every tensor, buffers
/// included.
pub fn weight_ema(shadow: &mut ModelParams, params: &ModelParams, decay: f64) {
    let live = params.flatten(None);
    let mut i = 0;
    shadow.visit_mut(&mut |_, _, values| {
        for s in values.iter_mut() {
            *s = decay * *s + (1.0 - decay) * live[i];
            i += 1;
        }
    });
}

/// One image ready for the network: its graph and raw patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub graph: QualityGraph,
    pub raw: Array2<f64>,
}

/// A labelled image with its canonical and (optional) offset-grid inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub canonical: GraphInput,
    pub offset: Option<GraphInput>,
    /// MOS on the original scale.
    pub mos: f64,
}

/// Train-mode forward passes over a batch, one dropout seed per graph.
pub fn forward_batch(
    inputs: &[&GraphInput],
    seeds: &[u64],
    params: &ModelParams,
    model: &ModelConfig,
) -> Result<Vec<ForwardTrace>> {
    if inputs.len() != seeds.len() {
        return Err(IqaError::LengthMismatch(inputs.len(), seeds.len()));
    }
    let jobs: Vec<(&GraphInput, u64)> = inputs.iter().copied().zip(seeds.iter().copied()).collect();
    exec::try_map_slice(&jobs, |(input, seed)| {
        forward(&input.graph, input.raw.view(), params, model, Mode::Train, *seed)
    })
}

/// Backpropagates per-sample upstream gradients and sums the results in
/// input order.
pub fn backward_batch(
    inputs: &[&GraphInput],
    traces: &[ForwardTrace],
    d_pred: &[f64],
    params: &ModelParams,
    model: &ModelConfig,
) -> Result<ModelParams> {
    if inputs.len() != traces.len() || inputs.len() != d_pred.len() {
        return Err(IqaError::LengthMismatch(inputs.len(), d_pred.len()));
    }
    let jobs: Vec<usize> = (0..inputs.len()).collect();
    let parts = exec::try_map_slice(&jobs, |&i| {
        backward(&inputs[i].graph, inputs[i].raw.view(), params, model, &traces[i], d_pred[i])
    })?;
    let mut total = params.zeros_like();
    for g in &parts {
        total.add_assign(g);
    }
    Ok(total)
}

/// Batch objective and its gradient with the scale estimates held fixed.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub terms: TermEvaluation,
    pub breakdown: LossBreakdown,
    pub grads: ModelParams,
    pub traces: Vec<ForwardTrace>,
}

pub fn batch_gradients(
    inputs: &[&GraphInput],
    targets: &[f64],
    seeds: &[u64],
    params: &ModelParams,
    model: &ModelConfig,
    objective: &ObjectiveConfig,
    ema: &EmaState,
) -> Result<BatchGradients> {
    let traces = forward_batch(inputs, seeds, params, model)?;
    let pred: Vec<f64> = traces.iter().map(ForwardTrace::prediction).collect();
    let terms = evaluate_terms(&pred, targets, objective)?;
    let breakdown = normalized_total(&terms, ema, objective)?;
    let grads = backward_batch(inputs, &traces, &breakdown.d_pred, params, model)?;
    Ok(BatchGradients {
        terms,
        breakdown,
        grads,
        traces,
    })
}

/// Mutable state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub shadow: ModelParams,
    pub optimizer: AdamW,
    pub ema: EmaState,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            shadow: params.clone(),
            optimizer: AdamW::new(&params),
            params,
            ema: EmaState::default(),
            step: 0,
        }
    }
}

/// All configuration consumed by a training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig<'a> {
    pub model: &'a ModelConfig,
    pub objective: &'a ObjectiveConfig,
    pub train: &'a TrainConfig,
    pub learning_rate: f64,
}

/// One optimization step on a batch of graphs with normalized targets.
///
/// On the very first step the loss scales are seeded from that step's raw
/// values before normalizing; afterwards the total is normalized by the
/// previous estimates and the estimates are updated after the parameter
/// update.
pub fn train_step(
    state: &mut TrainState,
    inputs: &[&GraphInput],
    targets: &[f64],
    config: StepConfig<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    if inputs.len() < 2 {
        return Err(IqaError::EmptyBatch);
    }
    let seeds: Vec<u64> = inputs.iter().map(|_| rng.gen()).collect();
    let traces = forward_batch(inputs, &seeds, &state.params, config.model)?;
    let pred: Vec<f64> = traces.iter().map(ForwardTrace::prediction).collect();
    let terms = evaluate_terms(&pred, targets, config.objective)?;
    let seeded_now = !state.ema.is_initialized();
    if seeded_now {
        state.ema.update(&terms.raw, config.objective);
    }
    let breakdown = normalized_total(&terms, &state.ema, config.objective)?;
    let grads = backward_batch(inputs, &traces, &breakdown.d_pred, &state.params, config.model)?;
    state
        .optimizer
        .step(&mut state.params, &grads, config.learning_rate, config.train);
    if state.params.flatten(None).iter().any(|v| !v.is_finite()) {
        return Err(IqaError::NumericalBlowUp {
            location: format!("parameter update at step {}", state.step),
        });
    }
    for trace in &traces {
        state.params.update_running_stats(trace, config.model.bn_momentum);
    }
    if !seeded_now {
        state.ema.update(&terms.raw, config.objective);
    }
    state.step += 1;
    let decay = if config.train.weight_ema_warmup {
        let t = state.step as f64;
        config.train.weight_ema_decay.min((1.0 + t) / (10.0 + t))
    } else {
        config.train.weight_ema_decay
    };
    weight_ema(&mut state.shadow, &state.params, decay);
    Ok(breakdown)
}

/// Eval-mode prediction on the normalized scale.
pub fn predict_normalized(input: &GraphInput, params: &ModelParams, model: &ModelConfig) -> Result<f64> {
    Ok(forward(&input.graph, input.raw.view(), params, model, Mode::Eval, 0)?.prediction())
}

/// Two-pass prediction on the original MOS scale: the mean of the canonical
/// and offset-grid normalized predictions, inverted. Without an offset input
/// this is a single pass.
pub fn predict_tta(
    canonical: &GraphInput,
    offset: Option<&GraphInput>,
    params: &ModelParams,
    model: &ModelConfig,
    normalizer: &MosNormalizer,
) -> Result<f64> {
    let first = predict_normalized(canonical, params, model)?;
    let mean = match offset {
        Some(o) => 0.5 * (first + predict_normalized(o, params, model)?),
        None => first,
    };
    Ok(normalizer.invert(mean))
}

/// Predictions (original scale) for every example, in order.
pub fn predict_examples(
    examples: &[Example],
    params: &ModelParams,
    model: &ModelConfig,
    normalizer: &MosNormalizer,
    tta: bool,
) -> Result<Vec<f64>> {
    exec::try_map_slice(examples, |ex| {
        let offset = if tta { ex.offset.as_ref() } else { None };
        predict_tta(&ex.canonical, offset, params, model, normalizer)
    })
}

pub fn evaluate(
    examples: &[Example],
    params: &ModelParams,
    model: &ModelConfig,
    normalizer: &MosNormalizer,
    tta: bool,
) -> Result<MetricReport> {
    let pred = predict_examples(examples, params, model, normalizer, tta)?;
    let mos: Vec<f64> = examples.iter().map(|e| e.mos).collect();
    MetricReport::compute(&pred, &mos)
}

/// An evaluated epoch with the value that would be kept if it wins.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub epoch: usize,
    pub val_srcc: f64,
    pub value: T,
}

/// The snapshot with the highest validation SRCC; ties go to the earliest
/// epoch.
pub fn select_checkpoint<T>(history: &[Snapshot<T>]) -> Result<&Snapshot<T>> {
    let mut best: Option<&Snapshot<T>> = None;
    for s in history {
        if best.is_none_or(|b| s.val_srcc > b.val_srcc) {
            best = Some(s);
        }
    }
    best.ok_or(IqaError::EmptyHistory)
}

/// Incremental form of [`select_checkpoint`] that keeps only the best value.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSelector<T> {
    best: Option<Snapshot<T>>,
}

impl<T> Default for CheckpointSelector<T> {
    fn default() -> Self {
        Self { best: None }
    }
}

impl<T> CheckpointSelector<T> {
    /// Offers an epoch; `make` is called only if it becomes the new best.
    pub fn offer(&mut self, epoch: usize, val_srcc: f64, make: impl FnOnce() -> T) -> bool {
        let better = self.best.as_ref().is_none_or(|b| val_srcc > b.val_srcc);
        if better {
            self.best = Some(Snapshot {
                epoch,
                val_srcc,
                value: make(),
            });
        }
        better
    }

    pub fn best(&self) -> Option<&Snapshot<T>> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Result<Snapshot<T>> {
        self.best.ok_or(IqaError::EmptyHistory)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: MetricReport,
    pub val: Option<MetricReport>,
    pub mean_loss: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_loss,train_plcc,train_srcc,train_rmse,val_plcc,val_srcc,val_rmse";

    pub fn to_csv_line(&self) -> String {
        let val = match &self.val {
            Some(v) => format!("{:.10},{:.10},{:.10}", v.plcc, v.srcc, v.rmse),
            None => ",,".into(),
        };
        format!(
            "{},{:.12e},{:.10},{:.10},{:.10},{}",
            self.epoch, self.mean_loss, self.train.plcc, self.train.srcc, self.train.rmse, val
        )
    }

    /// The score used for checkpoint selection: validation SRCC, or training
    /// SRCC when there is no validation split.
    pub fn selection_srcc(&self) -> f64 {
        self.val.as_ref().unwrap_or(&self.train).srcc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub best: Snapshot<ModelParams>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<LossBreakdown>,
    pub final_state: TrainState,
}

/// Runs the full loop. Every epoch the shadow weights are evaluated (eval
/// mode, two-pass when `tta`) on the training and validation sets; the
/// shadow snapshot with the best validation SRCC is returned, rounded to
/// checkpoint precision.
pub fn fit(
    train: &[Example],
    val: &[Example],
    params: ModelParams,
    model: &ModelConfig,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
    normalizer: &MosNormalizer,
    tta: bool,
) -> Result<FitOutcome> {
    model.validate()?;
    objective.validate()?;
    config.validate()?;
    if train.len() < 2 {
        return Err(IqaError::EmptyBatch);
    }
    let targets: Vec<f64> = train.iter().map(|e| normalizer.apply(e.mos)).collect();
    let batches_per_epoch = train.len() / config.batch_size + usize::from(train.len() % config.batch_size >= 2);
    let total_steps = (batches_per_epoch * config.epochs) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState::new(params);
    let mut selector = CheckpointSelector::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let inputs: Vec<&GraphInput> = chunk.iter().map(|&i| &train[i].canonical).collect();
            let batch_targets: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let step_config = StepConfig {
                model,
                objective,
                train: config,
                learning_rate: config.learning_rate_at(state.step, total_steps),
            };
            let breakdown = train_step(&mut state, &inputs, &batch_targets, step_config, &mut rng)?;
            loss_sum += breakdown.total;
            n_steps += 1;
            steps.push(breakdown);
        }
        let eval_params = state.shadow.quantized_f32();
        let train_report = evaluate(train, &eval_params, model, normalizer, tta)?;
        let val_report = if val.is_empty() {
            None
        } else {
            Some(evaluate(val, &eval_params, model, normalizer, tta)?)
        };
        let record = EpochRecord {
            epoch,
            train: train_report,
            val: val_report,
            mean_loss: loss_sum / n_steps.max(1) as f64,
        };
        selector.offer(epoch, record.selection_srcc(), || eval_params.clone());
        history.push(record);
    }
    Ok(FitOutcome {
        best: selector.into_best()?,
        history,
        steps,
        final_state: state,
    })
}
