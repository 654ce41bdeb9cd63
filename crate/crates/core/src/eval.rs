//! Evaluation: pose metrics and batched scoring of a model on a dataset.
//!
//! Two numbers summarize a prediction against its gold target: the
//! Euclidean distance in world units and the wrapped angular gap
//! `atan2(sin(p−g), cos(p−g))`, whose magnitude never exceeds π no matter
//! how far either angle strayed from the principal branch.

use crate::model::{ExampleSpec, Model, ModelError, OpMode, Prediction, SourceMode};
use crate::real::Real;
use crate::tape::{BnMode, Tape};
use crate::world::{BlockPose, WorldGrid};

// ── Samples ─────────────────────────────────────────────────────────────

/// One scoring-ready example: tokens already mapped through the
/// vocabulary, plus the world and the gold answers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub token_ids: Vec<usize>,
    pub world: WorldGrid,
    pub gold_source: usize,
    pub target: BlockPose,
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// Euclidean distance between predicted and gold positions.
pub fn metric_xyz(pred: (f64, f64, f64), gold: (f64, f64, f64)) -> f64 {
    let dx = pred.0 - gold.0;
    let dy = pred.1 - gold.1;
    let dz = pred.2 - gold.2;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Signed wrapped angular error in (−π, π]; report its absolute value.
/// Swapping the arguments flips the sign (up to the ±π boundary).
pub fn metric_theta(pred: f64, gold: f64) -> f64 {
    let d = pred - gold;
    d.sin().atan2(d.cos())
}

// ── Dataset scoring ─────────────────────────────────────────────────────

/// Whether the decoder consumes the model's own source distribution or a
/// one-hot on the gold block (the ceiling measurement: language errors on
/// the source are factored out).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    EndToEnd,
    GoldSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    /// Fraction of examples whose `argmax d_a` names the gold source.
    pub source_accuracy: f64,
    pub mean_xyz: f64,
    pub median_xyz: f64,
    pub mean_abs_theta: f64,
    pub median_abs_theta: f64,
    /// Rotation-error histogram: counts of |θ error| below each edge in
    /// [`THETA_HIST_EDGES`] (radians), plus a final overflow bucket.
    pub theta_hist: Vec<usize>,
}

pub const THETA_HIST_EDGES: [f64; 4] = [0.05, 0.15, 0.5, 1.5];

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per-example scores, kept separate so callers can slice by metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub prediction: Prediction,
    pub xyz_err: f64,
    pub theta_err: f64,
    pub source_correct: bool,
}

/// Score every sample in inference mode, batching at `batch_size`.
pub fn score_samples<R: Real>(
    model: &mut Model<R>,
    samples: &[Sample],
    mode: EvalMode,
    batch_size: usize,
) -> Result<Vec<ScoredSample>, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let batch_size = batch_size.max(1);
    let mut scored = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let specs: Vec<ExampleSpec<'_>> = chunk
            .iter()
            .map(|s| ExampleSpec {
                token_ids: &s.token_ids,
                world: &s.world,
                source: match mode {
                    EvalMode::EndToEnd => SourceMode::Model,
                    EvalMode::GoldSource => SourceMode::GoldOneHot(s.gold_source),
                },
                op: OpMode::Model,
            })
            .collect();
        let mut tape = Tape::new();
        let (_, graphs) = model.forward_batch(&mut tape, &specs, BnMode::Eval)?;
        for (graph, sample) in graphs.iter().zip(chunk) {
            let prediction = crate::model::extract_prediction(&tape, graph);
            let xyz_err = metric_xyz(
                (prediction.x, prediction.y, prediction.z),
                (sample.target.x, sample.target.y, sample.target.z),
            );
            let theta_err = metric_theta(prediction.theta_raw, sample.target.theta);
            scored.push(ScoredSample {
                source_correct: prediction.source == sample.gold_source,
                prediction,
                xyz_err,
                theta_err,
            });
        }
    }
    Ok(scored)
}

/// Aggregate pre-scored samples into a report.
pub fn summarize(scored: &[ScoredSample]) -> Option<EvalReport> {
    if scored.is_empty() {
        return None;
    }
    let count = scored.len();
    let mut xyz: Vec<f64> = scored.iter().map(|s| s.xyz_err).collect();
    let mut theta: Vec<f64> = scored.iter().map(|s| s.theta_err.abs()).collect();
    let correct = scored.iter().filter(|s| s.source_correct).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut hist = vec![0usize; THETA_HIST_EDGES.len() + 1];
    for &e in &theta {
        let bucket = THETA_HIST_EDGES.iter().position(|&edge| e < edge);
        hist[bucket.unwrap_or(THETA_HIST_EDGES.len())] += 1;
    }
    let mean_xyz = mean(&xyz);
    let mean_abs_theta = mean(&theta);
    xyz.sort_by(|a, b| a.total_cmp(b));
    theta.sort_by(|a, b| a.total_cmp(b));
    Some(EvalReport {
        count,
        source_accuracy: correct as f64 / count as f64,
        mean_xyz,
        median_xyz: median(&xyz),
        mean_abs_theta,
        median_abs_theta: median(&theta),
        theta_hist: hist,
    })
}

/// Score and aggregate in one call.
pub fn evaluate<R: Real>(
    model: &mut Model<R>,
    samples: &[Sample],
    mode: EvalMode,
    batch_size: usize,
) -> Result<EvalReport, ModelError> {
    let scored = score_samples(model, samples, mode, batch_size)?;
    Ok(summarize(&scored).expect("scored set is non-empty"))
}
