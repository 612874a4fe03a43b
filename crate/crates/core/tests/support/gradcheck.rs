//! Central finite differences against the analytic batch gradient of the
//! balanced objective, for every trainable tensor.
#![allow(dead_code)]

use iqa_core::graph::{build_graph, GraphConfig};
use iqa_core::model::{GateVariant, ModelConfig, ModelParams, ParamKind};
use iqa_core::objective::{evaluate_terms, EmaState, LossTerm, ObjectiveConfig, PerTerm};
use iqa_core::trainer::{batch_gradients, forward_batch, GraphInput};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

struct Problem {
    inputs: Vec<GraphInput>,
    targets: Vec<f64>,
    seeds: Vec<u64>,
    model: ModelConfig,
    params: ModelParams,
}

fn problem(variant: GateVariant, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d_raw) = (8, 6);
    let inputs = (0..4)
        .map(|_| {
            let centers: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
            let raw = Array2::from_shape_fn((n, d_raw), |_| rng.gen_range(-1.0..1.0));
            let cfg = GraphConfig {
                k: 3,
                ..GraphConfig::default()
            };
            GraphInput {
                graph: build_graph(&centers, raw.view(), &cfg).unwrap(),
                raw,
            }
        })
        .collect();
    let model = ModelConfig {
        d: 4,
        layers: 2,
        gate_hidden: 8,
        head_hidden: 8,
        gate_variant: variant,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&model, d_raw, seed ^ 0x5eed);
    // Move away from the identity/zero initialization so every path is active.
    params.visit_mut(&mut |_, kind, values| {
        if kind == ParamKind::Trainable {
            for v in values.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    });
    Problem {
        inputs,
        targets: vec![-1.2, 0.3, 0.9, -0.1],
        seeds: vec![11, 12, 13, 14],
        model,
        params,
    }
}

fn predictions(p: &Problem, params: &ModelParams) -> Vec<f64> {
    let refs: Vec<&GraphInput> = p.inputs.iter().collect();
    forward_batch(&refs, &p.seeds, params, &p.model)
        .unwrap()
        .iter()
        .map(|t| t.prediction())
        .collect()
}

/// Objective with the scale estimates treated as constants.
fn detached(p: &Problem, params: &ModelParams, obj: &ObjectiveConfig, ema: &EmaState) -> f64 {
    let terms = evaluate_terms(&predictions(p, params), &p.targets, obj).unwrap();
    LossTerm::ALL
        .iter()
        .filter(|&&t| obj.is_active(t))
        .map(|&t| obj.lambda[t] * terms.raw[t] / (ema.scale(t, obj).unwrap() + obj.epsilon))
        .sum()
}

/// Same objective but with this step's values folded into the estimates
/// before dividing, so gradients would flow through them.
fn attached(p: &Problem, params: &ModelParams, obj: &ObjectiveConfig, ema: &EmaState) -> f64 {
    let terms = evaluate_terms(&predictions(p, params), &p.targets, obj).unwrap();
    let mut next = *ema;
    next.update(&terms.raw, obj);
    LossTerm::ALL
        .iter()
        .filter(|&&t| obj.is_active(t))
        .map(|&t| obj.lambda[t] * terms.raw[t] / (next.scale(t, obj).unwrap() + obj.epsilon))
        .sum()
}

fn with_offset(params: &ModelParams, index: usize, delta: f64) -> ModelParams {
    let mut q = params.clone();
    let mut i = 0;
    q.visit_mut(&mut |_, kind, values| {
        if kind != ParamKind::Trainable {
            return;
        }
        for v in values.iter_mut() {
            if i == index {
                *v += delta;
            }
            i += 1;
        }
    });
    q
}

fn numeric_gradient(p: &Problem, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    (0..p.params.n_trainable())
        .map(|i| (f(&with_offset(&p.params, i, STEP)) - f(&with_offset(&p.params, i, -STEP))) / (2.0 * STEP))
        .collect()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Worst relative error per trainable tensor.
fn per_group_errors(params: &ModelParams, analytic: &[f64], numeric: &[f64]) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut offset = 0;
    params.visit(&mut |name, _, kind, values| {
        if kind != ParamKind::Trainable {
            return;
        }
        let range = offset..offset + values.len();
        let worst = range
            .clone()
            .map(|i| rel_err(analytic[i], numeric[i]))
            .fold(0.0, f64::max);
        out.push((name.to_string(), worst));
        offset = range.end;
    });
    out
}

fn seeded_ema(p: &Problem, obj: &ObjectiveConfig) -> EmaState {
    let terms = evaluate_terms(&predictions(p, &p.params), &p.targets, obj).unwrap();
    let mut ema = EmaState::default();
    ema.update(&terms.raw, obj);
    // A second, different observation so the estimate is not just this batch.
    let shifted = PerTerm(terms.raw.0.map(|v| 1.7 * v + 0.05));
    ema.update(&shifted, &ObjectiveConfig { beta: 0.5, ..*obj });
    ema
}

/// Outcome of one finite-difference comparison.
pub struct GradReport {
    /// Worst relative error per trainable tensor.
    pub groups: Vec<(String, f64)>,
    /// Analytic total minus the directly evaluated objective.
    pub total_gap: f64,
    pub largest_gradient: f64,
    /// Worst relative error against differences taken through the scale estimate.
    pub attached_worst: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.1).fold(0.0, f64::max)
    }
}

pub fn run(variant: GateVariant, lambda: [f64; 4]) -> GradReport {
    let p = problem(variant, 7);
    let obj = ObjectiveConfig {
        lambda: PerTerm(lambda),
        ..ObjectiveConfig::default()
    };
    let ema = seeded_ema(&p, &obj);
    let refs: Vec<&GraphInput> = p.inputs.iter().collect();
    let bg = batch_gradients(&refs, &p.targets, &p.seeds, &p.params, &p.model, &obj, &ema).unwrap();
    let analytic = bg.grads.flatten(Some(ParamKind::Trainable));
    let total_gap = (bg.breakdown.total - detached(&p, &p.params, &obj, &ema)).abs();
    let numeric = numeric_gradient(&p, |q| detached(&p, q, &obj, &ema));
    let groups = per_group_errors(&p.params, &analytic, &numeric);
    let through = numeric_gradient(&p, |q| attached(&p, q, &obj, &ema));
    let attached_worst = analytic
        .iter()
        .zip(&through)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    GradReport {
        groups,
        total_gap,
        largest_gradient: analytic.iter().fold(0.0, |m, g| m.max(g.abs())),
        attached_worst,
    }
}
