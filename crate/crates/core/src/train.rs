//! Training: composite loss, Adam, and the mini-batch loop.
//!
//! The loss per example combines every supervision signal:
//!
//! ```text
//! w_src · CE(d_a, gold source)
//!   + w_xyz · ‖(x̂,ŷ,ẑ) − target‖²
//!   + w_θ · atan2(sin(θ̂−θg), cos(θ̂−θg))²
//!   + λ_a · H(d_a) + λ_op · H(d_op)
//! ```
//!
//! Cross-entropy runs on the raw logits (`logsumexp − logit[gold]`), the
//! angle error is wrapped inside the graph so a prediction a full turn
//! away costs nothing, and the entropy terms push both distributions
//! toward one-hot, which is what makes the operation bank readable.
//!
//! The loop shuffles with its own seeded stream, logs one structured
//! record per epoch, checkpoints the parameters with the best validation
//! distance, and aborts (restoring that checkpoint) if the loss ever
//! leaves the finite range.

use crate::config::Config;
use crate::eval::{evaluate, EvalMode, EvalReport, Sample};
use crate::model::{
    ExampleGraph, ExampleSpec, Model, ModelError, ModelParams, OpMode, SourceMode,
};
use crate::real::Real;
use crate::tape::{BnMode, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::world::BlockPose;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use std::fmt;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum TrainError {
    EmptyTrainSet,
    GoldSourceOutOfRange { id: usize, num_blocks: usize },
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyTrainSet => write!(f, "training set is empty"),
            TrainError::GoldSourceOutOfRange { id, num_blocks } => {
                write!(f, "gold source id {id} outside 1..={num_blocks}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

// ── Loss ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_src: f64,
    pub w_xyz: f64,
    pub w_theta: f64,
    pub lambda_a: f64,
    pub lambda_op: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        LossWeights {
            w_src: cfg.w_src,
            w_xyz: cfg.w_xyz,
            w_theta: cfg.w_theta,
            lambda_a: cfg.lambda_a,
            lambda_op: cfg.lambda_op,
        }
    }
}

/// Scalar handles for the batch-mean loss and its unweighted terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub src: Var,
    pub xyz: Var,
    pub theta: Var,
    pub ent_a: Var,
    pub ent_op: Var,
}

/// Plain-number view of [`LossVars`]; term values are unweighted means,
/// `total` is the weighted combination the optimizer minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub src: f64,
    pub xyz: f64,
    pub theta: f64,
    pub ent_a: f64,
    pub ent_op: f64,
}

/// Build the loss for a forwarded batch. `golds` is parallel to `graphs`:
/// the gold source id and target pose of each example.
pub fn loss_graph<R: Real>(
    tape: &mut Tape<R>,
    graphs: &[ExampleGraph],
    golds: &[(usize, BlockPose)],
    w: &LossWeights,
) -> Result<LossVars, TrainError> {
    assert_eq!(graphs.len(), golds.len(), "one gold per forwarded example");
    if graphs.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut src_terms = Vec::with_capacity(graphs.len());
    let mut xyz_terms = Vec::with_capacity(graphs.len());
    let mut theta_terms = Vec::with_capacity(graphs.len());
    let mut ent_a_terms = Vec::with_capacity(graphs.len());
    let mut ent_op_terms = Vec::with_capacity(graphs.len());

    for (g, (gold_source, target)) in graphs.iter().zip(golds) {
        let k = tape.value(g.lang.arg_logits).numel();
        if *gold_source == 0 || *gold_source > k {
            return Err(TrainError::GoldSourceOutOfRange {
                id: *gold_source,
                num_blocks: k,
            });
        }
        let lse = tape.logsumexp(g.lang.arg_logits)?;
        let gold_logit = tape.pick(g.lang.arg_logits, gold_source - 1)?;
        src_terms.push(tape.sub(lse, gold_logit)?);

        let mut sq_sum: Option<Var> = None;
        for (pred, gold) in [
            (g.pose.x, target.x),
            (g.pose.y, target.y),
            (g.pose.z, target.z),
        ] {
            let c = tape.constant(Tensor::scalar(R::from_f64(gold)));
            let d = tape.sub(pred, c)?;
            let sq = tape.mul(d, d)?;
            sq_sum = Some(match sq_sum {
                Some(acc) => tape.add(acc, sq)?,
                None => sq,
            });
        }
        xyz_terms.push(sq_sum.expect("three coordinate terms"));

        let c_theta = tape.constant(Tensor::scalar(R::from_f64(target.theta)));
        let d_theta = tape.sub(g.pose.theta, c_theta)?;
        let s = tape.sin(d_theta);
        let c = tape.cos(d_theta);
        let wrapped = tape.atan2(s, c)?;
        theta_terms.push(tape.mul(wrapped, wrapped)?);

        ent_a_terms.push(tape.entropy(g.lang.d_a)?);
        ent_op_terms.push(tape.entropy(g.lang.d_op)?);
    }

    let mut mean_of = |terms: &[Var]| -> Result<Var, TensorError> {
        let stacked = tape.concat(terms)?;
        Ok(tape.mean(stacked))
    };
    let src = mean_of(&src_terms)?;
    let xyz = mean_of(&xyz_terms)?;
    let theta = mean_of(&theta_terms)?;
    let ent_a = mean_of(&ent_a_terms)?;
    let ent_op = mean_of(&ent_op_terms)?;

    let parts = [
        (w.w_src, src),
        (w.w_xyz, xyz),
        (w.w_theta, theta),
        (w.lambda_a, ent_a),
        (w.lambda_op, ent_op),
    ];
    let mut total: Option<Var> = None;
    for (weight, term) in parts {
        let scaled = tape.scale(term, R::from_f64(weight));
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }

    Ok(LossVars {
        total: total.expect("five loss terms"),
        src,
        xyz,
        theta,
        ent_a,
        ent_op,
    })
}

pub fn extract_breakdown<R: Real>(tape: &Tape<R>, terms: &LossVars) -> LossBreakdown {
    let v = |x: Var| tape.value(x).item().to_f64();
    LossBreakdown {
        total: v(terms.total),
        src: v(terms.src),
        xyz: v(terms.xyz),
        theta: v(terms.theta),
        ent_a: v(terms.ent_a),
        ent_op: v(terms.ent_op),
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &Config) -> Self {
        AdamHyper {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// First and second moment estimates, one pair per parameter entry.
#[derive(Debug, Clone)]
pub struct AdamState<R> {
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
    pub t: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ModelParams<R>) -> Self {
        AdamState {
            m: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
            v: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
            t: 0,
        }
    }

    /// One bias-corrected update from the gradients on `tape`. `vars`
    /// must be the staged handles parallel to the parameter entries, as
    /// returned by `ModelParams::stage`.
    pub fn step(
        &mut self,
        params: &mut ModelParams<R>,
        tape: &Tape<R>,
        vars: &[Var],
        h: &AdamHyper,
    ) {
        assert_eq!(vars.len(), params.entries().len(), "one var per entry");
        self.t += 1;
        let corr1 = 1.0 - h.beta1.powi(self.t as i32);
        let corr2 = 1.0 - h.beta2.powi(self.t as i32);
        let (b1, b2) = (R::from_f64(h.beta1), R::from_f64(h.beta2));
        let one_m_b1 = R::from_f64(1.0 - h.beta1);
        let one_m_b2 = R::from_f64(1.0 - h.beta2);
        let (c1, c2) = (R::from_f64(corr1), R::from_f64(corr2));
        let (lr, eps) = (R::from_f64(h.lr), R::from_f64(h.eps));

        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let Some(grad) = tape.grad(vars[i]) else {
                continue; // parameter untouched by this graph
            };
            let g = grad.data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = entry.tensor.data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_m_b1 * g[j];
                v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

// ── Training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epochs: usize,
    pub early_stopped: bool,
    /// True when a non-finite loss aborted the run; the model holds the
    /// best checkpoint seen before the blow-up.
    pub aborted: bool,
    pub best_val_xyz: Option<f64>,
    pub final_val: Option<EvalReport>,
}

fn early_stop_met(cfg: &Config, report: &EvalReport) -> bool {
    let mut any = false;
    if cfg.early_stop_xyz > 0.0 {
        any = true;
        if report.mean_xyz > cfg.early_stop_xyz {
            return false;
        }
    }
    if cfg.early_stop_acc > 0.0 {
        any = true;
        if report.source_accuracy < cfg.early_stop_acc {
            return false;
        }
    }
    if cfg.early_stop_theta > 0.0 {
        any = true;
        if report.mean_abs_theta > cfg.early_stop_theta {
            return false;
        }
    }
    any
}

/// Run mini-batch training. One structured record per epoch goes to
/// `sink`; records use exact (`{:?}`) float formatting so a seeded rerun
/// is comparable byte for byte.
pub fn train<R: Real>(
    model: &mut Model<R>,
    train_set: &[Sample],
    val_set: &[Sample],
    sink: &mut dyn FnMut(&str),
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let cfg = model.cfg.clone();
    let weights = LossWeights::from_config(&cfg);
    let hyper = AdamHyper::from_config(&cfg);
    let batch_size = cfg.batch_size.max(1);
    // The init already consumed the stream seeded with cfg.seed; shuffling
    // gets its own deterministic stream one off.
    let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut state = AdamState::new(&model.params);

    let mut best: Option<(f64, ModelParams<R>)> = None;
    // The newest parameters known to produce a finite loss; what an abort
    // falls back to before any validation best exists.
    let mut last_good = model.params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = 0usize;
    let mut epochs = 0usize;
    let mut early_stopped = false;
    let mut aborted = false;
    let mut final_val: Option<EvalReport> = None;

    'epochs: while steps < cfg.max_steps {
        order.shuffle(&mut rng);
        epochs += 1;
        let mut sums = LossBreakdown {
            total: 0.0,
            src: 0.0,
            xyz: 0.0,
            theta: 0.0,
            ent_a: 0.0,
            ent_op: 0.0,
        };
        let mut seen = 0usize;

        for chunk in order.chunks(batch_size) {
            if steps >= cfg.max_steps {
                break;
            }
            let specs: Vec<ExampleSpec<'_>> = chunk
                .iter()
                .map(|&i| ExampleSpec {
                    token_ids: &train_set[i].token_ids,
                    world: &train_set[i].world,
                    source: SourceMode::Model,
                    op: OpMode::Model,
                })
                .collect();
            let golds: Vec<(usize, BlockPose)> = chunk
                .iter()
                .map(|&i| (train_set[i].gold_source, train_set[i].target))
                .collect();

            let mut tape = Tape::new();
            let (staged, graphs) = model.forward_batch(&mut tape, &specs, BnMode::Train)?;
            let terms = loss_graph(&mut tape, &graphs, &golds, &weights)?;
            let breakdown = extract_breakdown(&tape, &terms);
            if !breakdown.total.is_finite() {
                sink(&format!(
                    "epoch={epochs} step={steps} abort=non_finite_loss restore=best"
                ));
                model.params = match best {
                    Some((_, ref p)) => p.clone(),
                    None => last_good.clone(),
                };
                aborted = true;
                break 'epochs;
            }
            last_good = model.params.clone();
            tape.backward(terms.total)?;
            state.step(&mut model.params, &tape, &staged.vars, &hyper);

            steps += 1;
            let n = chunk.len() as f64;
            sums.total += breakdown.total * n;
            sums.src += breakdown.src * n;
            sums.xyz += breakdown.xyz * n;
            sums.theta += breakdown.theta * n;
            sums.ent_a += breakdown.ent_a * n;
            sums.ent_op += breakdown.ent_op * n;
            seen += chunk.len();
        }

        if seen == 0 {
            break;
        }
        let d = seen as f64;
        let mut record = format!(
            "epoch={} step={} loss={:?} src={:?} xyz={:?} theta={:?} ent_a={:?} ent_op={:?}",
            epochs,
            steps,
            sums.total / d,
            sums.src / d,
            sums.xyz / d,
            sums.theta / d,
            sums.ent_a / d,
            sums.ent_op / d,
        );

        let validate = !val_set.is_empty() && epochs % cfg.eval_every.max(1) == 0;
        if validate {
            let report = evaluate(model, val_set, EvalMode::EndToEnd, batch_size)?;
            record.push_str(&format!(
                " val_acc={:?} val_xyz={:?} val_xyz_median={:?} val_theta={:?}",
                report.source_accuracy,
                report.mean_xyz,
                report.median_xyz,
                report.mean_abs_theta,
            ));
            let is_better = match &best {
                Some((b, _)) => report.mean_xyz < *b,
                None => true,
            };
            if report.mean_xyz.is_finite() && is_better {
                best = Some((report.mean_xyz, model.params.clone()));
            }
            if early_stop_met(&cfg, &report) {
                record.push_str(" early_stop=1");
                early_stopped = true;
            }
            final_val = Some(report);
        }

        sink(&record);
        if early_stopped {
            break;
        }
    }

    // Leave the model at the best validation checkpoint when one exists.
    if !aborted {
        if let Some((_, ref p)) = best {
            model.params = p.clone();
        }
    }
    Ok(TrainOutcome {
        steps,
        epochs,
        early_stopped,
        aborted,
        best_val_xyz: best.map(|(b, _)| b),
        final_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{LangOut, Vocabulary};
    use crate::model::ParamEntry;
    use crate::tape::Tape;
    use crate::world::{GridDims, WorldGrid};
    use rand::Rng;
    use std::f64::consts::PI;

    // ── Loss ────────────────────────────────────────────────────────

    /// Hand-staged graph outputs for exercising the loss formula with
    /// chosen numbers (no model involved).
    fn fake_graph(
        tape: &mut Tape<f64>,
        arg_logits: Vec<f64>,
        op_logits: Vec<f64>,
        pose: (f64, f64, f64, f64),
    ) -> ExampleGraph {
        let arg = tape.constant(Tensor::from_vec(arg_logits));
        let op = tape.constant(Tensor::from_vec(op_logits));
        let d_a = tape.softmax(arg, 0).unwrap();
        let d_op = tape.softmax(op, 0).unwrap();
        let dummy = tape.constant(Tensor::scalar(0.0));
        ExampleGraph {
            lang: LangOut {
                h_a: dummy,
                h_o: dummy,
                arg_logits: arg,
                op_logits: op,
                d_a,
                d_op,
            },
            d_a_used: d_a,
            d_op_used: d_op,
            attention: dummy,
            v_op: dummy,
            pose: crate::decoder::PoseVars {
                x: tape.constant(Tensor::scalar(pose.0)),
                y: tape.constant(Tensor::scalar(pose.1)),
                z: tape.constant(Tensor::scalar(pose.2)),
                theta: tape.constant(Tensor::scalar(pose.3)),
            },
        }
    }

    fn unit_weights() -> LossWeights {
        LossWeights {
            w_src: 1.0,
            w_xyz: 1.0,
            w_theta: 1.0,
            lambda_a: 0.01,
            lambda_op: 0.01,
        }
    }

    #[test]
    fn perfect_saturated_prediction_has_zero_loss() {
        // Saturated logits make softmax exactly one-hot in floating
        // point, so cross-entropy and both entropies vanish along with
        // the exact pose match.
        let mut tape = Tape::new();
        let g = fake_graph(
            &mut tape,
            vec![1000.0, 0.0, 0.0],
            vec![0.0, 1000.0, 0.0, 0.0],
            (1.5, 2.5, 0.5, -0.3),
        );
        let gold = (1usize, BlockPose::new(1.5, 2.5, 0.5, -0.3));
        let terms = loss_graph(&mut tape, &[g], &[gold], &unit_weights()).unwrap();
        let b = extract_breakdown(&tape, &terms);
        assert_eq!(b.total, 0.0);
        assert_eq!(b.src, 0.0);
        assert_eq!(b.xyz, 0.0);
        assert_eq!(b.theta, 0.0);
        assert_eq!(b.ent_a, 0.0);
        assert_eq!(b.ent_op, 0.0);
    }

    #[test]
    fn uniform_d_op_contributes_its_maximum_entropy() {
        let mut tape = Tape::new();
        let g = fake_graph(
            &mut tape,
            vec![1000.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0],
            (0.0, 0.0, 0.0, 0.0),
        );
        let gold = (1usize, BlockPose::new(0.0, 0.0, 0.0, 0.0));
        let mut w = unit_weights();
        w.lambda_op = 0.5;
        let terms = loss_graph(&mut tape, &[g], &[gold], &w).unwrap();
        let b = extract_breakdown(&tape, &terms);
        assert!((b.ent_op - 4.0f64.ln()).abs() < 1e-15);
        assert!((b.total - 0.5 * 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn theta_term_wraps_full_turns_away_to_zero() {
        let mut tape = Tape::new();
        let g = fake_graph(
            &mut tape,
            vec![1000.0, 0.0, 0.0],
            vec![1000.0, 0.0, 0.0, 0.0],
            (0.0, 0.0, 0.0, 0.1 + 2.0 * PI),
        );
        let gold = (1usize, BlockPose::new(0.0, 0.0, 0.0, 0.1));
        let terms = loss_graph(&mut tape, &[g], &[gold], &unit_weights()).unwrap();
        let b = extract_breakdown(&tape, &terms);
        assert!(b.theta < 1e-28, "wrapped theta term {}", b.theta);
    }

    #[test]
    fn loss_matches_straight_line_recomputation() {
        // Independent oracle: rebuild every term from the same raw
        // numbers with plain f64 arithmetic.
        let mut rng = rand::rngs::StdRng::seed_from_u64(33);
        let mut tape = Tape::new();
        let mut graphs = Vec::new();
        let mut golds = Vec::new();
        let mut raw = Vec::new();
        for i in 0..3 {
            let arg: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let op: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let pose = (
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-7.0..7.0),
            );
            let gold = (
                1 + i % 4,
                BlockPose::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-1.0..1.0),
                ),
            );
            graphs.push(fake_graph(&mut tape, arg.clone(), op.clone(), pose));
            raw.push((arg, op, pose));
            golds.push(gold);
        }
        let w = LossWeights {
            w_src: 0.7,
            w_xyz: 1.3,
            w_theta: 0.9,
            lambda_a: 0.02,
            lambda_op: 0.05,
        };
        let terms = loss_graph(&mut tape, &graphs, &golds, &w).unwrap();
        let b = extract_breakdown(&tape, &terms);

        let softmax = |logits: &[f64]| {
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect::<Vec<f64>>()
        };
        let entropy = |p: &[f64]| -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
        let mut want = LossBreakdown {
            total: 0.0,
            src: 0.0,
            xyz: 0.0,
            theta: 0.0,
            ent_a: 0.0,
            ent_op: 0.0,
        };
        for ((arg, op, pose), (gold_src, target)) in raw.iter().zip(&golds) {
            let mx = arg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + arg.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
            want.src += lse - arg[gold_src - 1];
            want.xyz += (pose.0 - target.x).powi(2)
                + (pose.1 - target.y).powi(2)
                + (pose.2 - target.z).powi(2);
            let d = pose.3 - target.theta;
            want.theta += d.sin().atan2(d.cos()).powi(2);
            want.ent_a += entropy(&softmax(arg));
            want.ent_op += entropy(&softmax(op));
        }
        let n = golds.len() as f64;
        want.src /= n;
        want.xyz /= n;
        want.theta /= n;
        want.ent_a /= n;
        want.ent_op /= n;
        want.total = w.w_src * want.src
            + w.w_xyz * want.xyz
            + w.w_theta * want.theta
            + w.lambda_a * want.ent_a
            + w.lambda_op * want.ent_op;

        assert!((b.src - want.src).abs() < 1e-12);
        assert!((b.xyz - want.xyz).abs() < 1e-12);
        assert!((b.theta - want.theta).abs() < 1e-12);
        assert!((b.ent_a - want.ent_a).abs() < 1e-12);
        assert!((b.ent_op - want.ent_op).abs() < 1e-12);
        assert!((b.total - want.total).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_gold_source() {
        let mut tape = Tape::new();
        let g = fake_graph(&mut tape, vec![0.0, 0.0], vec![0.0], (0.0, 0.0, 0.0, 0.0));
        let gold = (3usize, BlockPose::new(0.0, 0.0, 0.0, 0.0));
        assert!(matches!(
            loss_graph(&mut tape, &[g], &[gold], &unit_weights()),
            Err(TrainError::GoldSourceOutOfRange { id: 3, .. })
        ));
    }

    // ── Adam ────────────────────────────────────────────────────────

    fn scalar_params(values: &[(&str, f64)]) -> ModelParams<f64> {
        ModelParams::from_entries(
            values
                .iter()
                .map(|(n, v)| ParamEntry {
                    name: n.to_string(),
                    tensor: Tensor::scalar(*v),
                })
                .collect(),
            None,
        )
    }

    fn default_hyper() -> AdamHyper {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_is_the_identity() {
        let mut params = scalar_params(&[("x", 1.25), ("y", -0.5)]);
        let mut state = AdamState::new(&params);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.25));
        let y = tape.leaf(Tensor::scalar(-0.5));
        // Loss touching neither leaf: gradients are backfilled zeros.
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mul(c, c).unwrap();
        tape.backward(loss).unwrap();
        state.step(&mut params, &tape, &[x, y], &default_hyper());
        assert_eq!(params.get("x").unwrap().item(), 1.25);
        assert_eq!(params.get("y").unwrap().item(), -0.5);
    }

    #[test]
    fn first_step_magnitude_is_the_learning_rate() {
        // With fresh moments, m̂ = g and v̂ = g², so the update is
        // lr·g/(|g|+ε) ≈ lr·sign(g) for any healthy gradient size.
        for &g in &[0.5, -2.0, 100.0, -1e-3] {
            let mut params = scalar_params(&[("x", 0.0)]);
            let mut state = AdamState::new(&params);
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::scalar(0.0));
            let c = tape.constant(Tensor::scalar(g));
            let loss = tape.mul(x, c).unwrap();
            let loss = tape.sum(loss);
            tape.backward(loss).unwrap();
            state.step(&mut params, &tape, &[x], &default_hyper());
            let delta = params.get("x").unwrap().item();
            let want = -1e-3 * g.signum();
            assert!(
                (delta - want).abs() < 1e-3 * 1e-4,
                "grad {g}: step {delta} vs {want}"
            );
        }
    }

    #[test]
    fn adam_converges_on_a_2d_quadratic() {
        // f(x, y) = (x − 3)² + 10·(y + 2)², minimum 0 at (3, −2).
        let mut params = scalar_params(&[("x", 0.0), ("y", 0.0)]);
        let mut state = AdamState::new(&params);
        let h = AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut last_f = f64::INFINITY;
        for step in 0..5000 {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(params.get("x").unwrap().clone());
            let y = tape.leaf(params.get("y").unwrap().clone());
            let c3 = tape.constant(Tensor::scalar(3.0));
            let cm2 = tape.constant(Tensor::scalar(-2.0));
            let dx = tape.sub(x, c3).unwrap();
            let dy = tape.sub(y, cm2).unwrap();
            let dx2 = tape.mul(dx, dx).unwrap();
            let dy2 = tape.mul(dy, dy).unwrap();
            let dy2s = tape.scale(dy2, 10.0);
            let f = tape.add(dx2, dy2s).unwrap();
            last_f = tape.value(f).item();
            if last_f <= 1e-6 {
                assert!(step > 0);
                break;
            }
            tape.backward(f).unwrap();
            state.step(&mut params, &tape, &[x, y], &h);
        }
        assert!(last_f <= 1e-6, "stalled at f = {last_f}");
    }

    // ── Training loop ───────────────────────────────────────────────

    fn toy_setup() -> (Model<f64>, Vec<Sample>) {
        let mut cfg = Config::default();
        cfg.world_d = 1;
        cfg.world_h = 4;
        cfg.world_w = 4;
        cfg.num_blocks = 2;
        cfg.n_op = 3;
        cfg.d_op_vec = 4;
        cfg.d_e = 4;
        cfg.hidden = 6;
        cfg.batch_size = 4;
        cfg.max_steps = 30;
        cfg.eval_every = 1;
        cfg.seed = 11;
        let vocab = Vocabulary::build(["move", "alpha", "beta", "left", "right", "."]);
        let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);
        let model = Model::init(cfg, vocab, &mut rng);

        let world = WorldGrid::from_poses(
            GridDims::new(1, 4, 4),
            2,
            &[
                (1, BlockPose::new(1.5, 1.5, 0.5, 0.0)),
                (2, BlockPose::new(2.5, 2.5, 0.5, 0.0)),
            ],
        )
        .unwrap();
        let mk = |name_id: usize, dir_id: usize, gold: usize, tx: f64| Sample {
            token_ids: vec![2, name_id, dir_id, 7],
            world: world.clone(),
            gold_source: gold,
            target: BlockPose::new(tx, 1.5, 0.5, 0.0),
        };
        let samples = vec![
            mk(3, 5, 1, 0.5),
            mk(4, 5, 2, 1.5),
            mk(3, 6, 1, 2.5),
            mk(4, 6, 2, 3.5),
        ];
        (model, samples)
    }

    #[test]
    fn seeded_reruns_log_identically_and_reach_identical_weights() {
        let run = || {
            let (mut model, samples) = toy_setup();
            let mut log: Vec<String> = Vec::new();
            let outcome =
                train(&mut model, &samples, &samples, &mut |l| log.push(l.to_string()))
                    .unwrap();
            (log, outcome, model.params)
        };
        let (log_a, outcome_a, params_a) = run();
        let (log_b, outcome_b, params_b) = run();
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b);
        assert_eq!(outcome_a, outcome_b);
        for (a, b) in params_a.entries().iter().zip(params_b.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn training_reduces_the_loss_on_a_toy_task() {
        let (mut model, samples) = toy_setup();
        let mut first = None;
        let mut last = None;
        let parse_loss = |line: &str| -> Option<f64> {
            line.split_whitespace()
                .find_map(|kv| kv.strip_prefix("loss="))
                .and_then(|v| v.parse().ok())
        };
        train(&mut model, &samples, &[], &mut |l| {
            let loss = parse_loss(l);
            if first.is_none() {
                first = loss;
            }
            last = loss;
        })
        .unwrap();
        let (first, last) = (first.unwrap(), last.unwrap());
        assert!(
            last < first,
            "loss did not improve: first {first}, last {last}"
        );
    }

    #[test]
    fn early_stop_fires_when_thresholds_are_met() {
        let (mut model, samples) = toy_setup();
        // Thresholds loose enough that the untrained model passes at the
        // first validation.
        model.cfg.early_stop_xyz = 100.0;
        model.cfg.early_stop_acc = 0.0;
        let mut lines = Vec::new();
        let outcome = train(&mut model, &samples, &samples, &mut |l| {
            lines.push(l.to_string())
        })
        .unwrap();
        assert!(outcome.early_stopped);
        assert_eq!(outcome.epochs, 1);
        assert!(lines[0].contains("early_stop=1"));
        assert!(outcome.final_val.is_some());
    }

    #[test]
    fn non_finite_loss_aborts_and_restores_best() {
        let (mut model, samples) = toy_setup();
        // An absurd learning rate overflows within a couple of steps.
        model.cfg.lr = 1e160;
        model.cfg.max_steps = 40;
        let initial = model.params.clone();
        let mut lines = Vec::new();
        let outcome = train(&mut model, &samples, &samples, &mut |l| {
            lines.push(l.to_string())
        })
        .unwrap();
        assert!(outcome.aborted);
        assert!(lines.iter().any(|l| l.contains("abort=non_finite_loss")));
        // Whatever checkpoint was restored must be finite.
        for e in model.params.entries() {
            assert!(e.tensor.all_finite(), "{} went non-finite", e.name);
        }
        // The first update already explodes the parameters, so no
        // validation best exists and the restore falls back to the last
        // finite-loss parameters: the initial ones.
        assert!(outcome.best_val_xyz.is_none());
        for (a, b) in initial.entries().iter().zip(model.params.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let (mut model, _) = toy_setup();
        assert!(matches!(
            train(&mut model, &[], &[], &mut |_| {}),
            Err(TrainError::EmptyTrainSet)
        ));
    }
}
