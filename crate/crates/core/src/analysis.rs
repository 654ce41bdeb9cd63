//! Interpretability probes over a trained model: vector-field sweeps of a
//! single injected operation, interpolation between two operations, and
//! clustering of phrases by the operation they select.
//!
//! All three work through the same injection switches the forward pass
//! exposes (`SourceMode`, `OpMode`), so what they report is exactly what
//! the model computes, not a reimplementation.

use crate::data::InstructionExample;
use crate::model::{
    argmax, extract_prediction, ExampleSpec, Model, ModelError, OpMode, Prediction,
    SourceMode,
};
use crate::real::Real;
use crate::tape::{BnMode, Tape};
use crate::world::{BlockPose, GridDims, WorldGrid};
use std::collections::BTreeMap;
use std::fmt;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum AnalysisError {
    /// Operation index outside the bank.
    BadOpIndex { got: usize, n_op: usize },
    /// The probe grid must fit inside the world's horizontal extent.
    ProbeGridTooLarge { grid: usize, h: usize, w: usize },
    /// An interpolation needs at least one alpha.
    EmptyAlphas,
    Model(ModelError),
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::BadOpIndex { got, n_op } => {
                write!(f, "operation index {got} outside the bank of {n_op}")
            }
            AnalysisError::ProbeGridTooLarge { grid, h, w } => write!(
                f,
                "a {grid}x{grid} probe grid does not fit a {h}x{w} world"
            ),
            AnalysisError::EmptyAlphas => write!(f, "alpha list is empty"),
            AnalysisError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

impl From<ModelError> for AnalysisError {
    fn from(e: ModelError) -> Self {
        AnalysisError::Model(e)
    }
}

// ── Sweep ───────────────────────────────────────────────────────────────

/// One probe of a sweep: a block centered at `(x, y)` on the ground layer
/// and the model's predicted displacement away from that center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepProbe {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dtheta: f64,
}

/// A full vector field for one injected operation distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// 0-based column of the operation bank this field probes.
    pub op_index: usize,
    /// Probes per side; `probes.len() == grid * grid`, row-major from the
    /// south-west corner.
    pub grid: usize,
    pub probes: Vec<SweepProbe>,
}

/// A one-hot distribution of length `len`.
pub fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

fn probe_worlds<R: Real>(
    model: &Model<R>,
    grid: usize,
) -> Result<Vec<WorldGrid>, AnalysisError> {
    let cfg = &model.cfg;
    if grid == 0 || grid > cfg.world_h || grid > cfg.world_w {
        return Err(AnalysisError::ProbeGridTooLarge {
            grid,
            h: cfg.world_h,
            w: cfg.world_w,
        });
    }
    let dims = GridDims::new(cfg.world_d, cfg.world_h, cfg.world_w);
    let mut worlds = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let pose = BlockPose::new(col as f64 + 0.5, row as f64 + 0.5, 0.5, 0.0);
            let world = WorldGrid::from_poses(dims, cfg.num_blocks, &[(1, pose)])
                .expect("probe poses are in bounds by construction");
            worlds.push(world);
        }
    }
    Ok(worlds)
}

const PROBE_BATCH: usize = 32;

/// Run the model over a list of single-block worlds with `d_a` forced
/// one-hot on the block and `d_op` replaced by `weights`. The language
/// encoder still runs (on a single out-of-vocabulary token) but nothing
/// it produces reaches the prediction.
fn probe_predictions<R: Real>(
    model: &mut Model<R>,
    worlds: &[WorldGrid],
    weights: &[f64],
) -> Result<Vec<Prediction>, AnalysisError> {
    let dummy_tokens = [0usize];
    let mut out = Vec::with_capacity(worlds.len());
    for chunk in worlds.chunks(PROBE_BATCH) {
        let specs: Vec<ExampleSpec<'_>> = chunk
            .iter()
            .map(|world| ExampleSpec {
                token_ids: &dummy_tokens,
                world,
                source: SourceMode::GoldOneHot(1),
                op: OpMode::Inject(weights.to_vec()),
            })
            .collect();
        let mut tape = Tape::new();
        let (_, graphs) = model.forward_batch(&mut tape, &specs, BnMode::Eval)?;
        out.extend(graphs.iter().map(|g| extract_prediction(&tape, g)));
    }
    Ok(out)
}

fn field_from_predictions(
    op_index: usize,
    grid: usize,
    worlds: &[WorldGrid],
    preds: &[Prediction],
) -> SweepResult {
    let probes = worlds
        .iter()
        .zip(preds)
        .map(|(world, pred)| {
            let center = world.pose(1).expect("probe world holds block 1");
            SweepProbe {
                x: center.x,
                y: center.y,
                dx: pred.x - center.x,
                dy: pred.y - center.y,
                dz: pred.z - center.z,
                dtheta: crate::eval::metric_theta(pred.theta, center.theta),
            }
        })
        .collect();
    SweepResult {
        op_index,
        grid,
        probes,
    }
}

/// Probe one operation: place a single block at every cell of a
/// `grid x grid` lattice on the ground layer, force attention onto it and
/// the operation distribution one-hot onto `op_index`, and record the
/// predicted displacement from each block center.
pub fn sweep<R: Real>(
    model: &mut Model<R>,
    op_index: usize,
    grid: usize,
) -> Result<SweepResult, AnalysisError> {
    let n_op = model.cfg.n_op;
    if op_index >= n_op {
        return Err(AnalysisError::BadOpIndex {
            got: op_index,
            n_op,
        });
    }
    let worlds = probe_worlds(model, grid)?;
    let preds = probe_predictions(model, &worlds, &one_hot(n_op, op_index))?;
    Ok(field_from_predictions(op_index, grid, &worlds, &preds))
}

// ── Interpolation ───────────────────────────────────────────────────────

/// Vector fields for a family of mixtures between two operations.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationResult {
    pub k1: usize,
    pub k2: usize,
    /// `(alpha, field)` in the caller's alpha order; alpha 1 is pure `k1`,
    /// alpha 0 pure `k2`.
    pub fields: Vec<(f64, SweepResult)>,
    /// Interior probes whose displacement angle does not turn
    /// monotonically as alpha rises. Informational: interpolation quality
    /// is a property of the trained model, not a correctness gate.
    pub rotation_violations: usize,
    /// Interior probes that had enough signal to be checked.
    pub rotation_checked: usize,
}

/// Sweep the mixture `alpha * e_k1 + (1 - alpha) * e_k2` for each alpha.
/// `alphas = [1.0]` is exactly `sweep(k1)`; `[0.0]` is exactly
/// `sweep(k2)`.
pub fn interpolate_sweep<R: Real>(
    model: &mut Model<R>,
    k1: usize,
    k2: usize,
    alphas: &[f64],
    grid: usize,
) -> Result<InterpolationResult, AnalysisError> {
    let n_op = model.cfg.n_op;
    for &k in &[k1, k2] {
        if k >= n_op {
            return Err(AnalysisError::BadOpIndex { got: k, n_op });
        }
    }
    if alphas.is_empty() {
        return Err(AnalysisError::EmptyAlphas);
    }
    let worlds = probe_worlds(model, grid)?;
    let mut fields = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut weights = vec![0.0; n_op];
        weights[k1] += alpha;
        weights[k2] += 1.0 - alpha;
        let preds = probe_predictions(model, &worlds, &weights)?;
        // Label each field with the dominant endpoint for plotting.
        let label = if alpha >= 0.5 { k1 } else { k2 };
        fields.push((alpha, field_from_predictions(label, grid, &worlds, &preds)));
    }
    let (rotation_violations, rotation_checked) = rotation_monotonicity(&fields);
    Ok(InterpolationResult {
        k1,
        k2,
        fields,
        rotation_violations,
        rotation_checked,
    })
}

/// Signed smallest turn from angle `a` to angle `b`.
fn turn(a: f64, b: f64) -> f64 {
    crate::eval::metric_theta(b, a)
}

/// Count interior probes whose planar displacement angle fails to turn in
/// one consistent direction as alpha increases. Probes with a planar
/// magnitude under `1e-9` at any alpha are skipped (no defined angle).
fn rotation_monotonicity(fields: &[(f64, SweepResult)]) -> (usize, usize) {
    if fields.len() < 3 {
        return (0, 0);
    }
    let mut order: Vec<usize> = (0..fields.len()).collect();
    order.sort_by(|&a, &b| fields[a].0.partial_cmp(&fields[b].0).unwrap());
    let grid = fields[0].1.grid;
    if grid < 3 || fields.iter().any(|(_, f)| f.grid != grid) {
        return (0, 0);
    }
    let mut violations = 0;
    let mut checked = 0;
    for row in 1..grid - 1 {
        for col in 1..grid - 1 {
            let idx = row * grid + col;
            let mut angles = Vec::with_capacity(order.len());
            let mut defined = true;
            for &f in &order {
                let p = &fields[f].1.probes[idx];
                if (p.dx * p.dx + p.dy * p.dy).sqrt() < 1e-9 {
                    defined = false;
                    break;
                }
                angles.push(p.dy.atan2(p.dx));
            }
            if !defined {
                continue;
            }
            checked += 1;
            let mut pos = false;
            let mut neg = false;
            for pair in angles.windows(2) {
                let step = turn(pair[0], pair[1]);
                if step > 1e-9 {
                    pos = true;
                } else if step < -1e-9 {
                    neg = true;
                }
            }
            if pos && neg {
                violations += 1;
            }
        }
    }
    (violations, checked)
}

// ── Phrase clustering ───────────────────────────────────────────────────

/// One group of utterances that selected the same operation.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseCluster {
    /// 0-based argmax of `d_op` shared by the group.
    pub op_index: usize,
    pub count: usize,
    /// Share of members carrying the majority relation label.
    pub purity: f64,
    pub majority_relation: String,
    /// Up to three distinct member sentences, in corpus order.
    pub sample_phrases: Vec<String>,
    pub mean_entropy: f64,
}

/// Clustering of low-entropy utterances by their argmax operation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTable {
    /// Largest clusters first; ties broken by operation index.
    pub clusters: Vec<PhraseCluster>,
    /// Examples that passed the entropy gate.
    pub selected: usize,
    /// Examples examined.
    pub total: usize,
    /// Member-weighted mean purity: the share of all selected examples
    /// that carry their cluster's majority label.
    pub mean_purity: f64,
}

/// Natural-log entropy of a distribution; zero-probability entries
/// contribute nothing.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Group pre-computed `(op, entropy, example)` assignments into a table.
fn build_clusters(
    assignments: &[(usize, f64, usize)],
    examples: &[InstructionExample],
    total: usize,
) -> ClusterTable {
    let mut groups: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for &(op, h, idx) in assignments {
        groups.entry(op).or_default().push((h, idx));
    }
    let mut clusters: Vec<PhraseCluster> = groups
        .into_iter()
        .map(|(op_index, members)| {
            let count = members.len();
            let mut label_counts: BTreeMap<&str, usize> = BTreeMap::new();
            for &(_, idx) in &members {
                *label_counts
                    .entry(examples[idx].meta.relation.name())
                    .or_default() += 1;
            }
            let (majority_relation, majority) = label_counts
                .iter()
                .map(|(label, n)| (*label, *n))
                .max_by_key(|&(label, n)| (n, std::cmp::Reverse(label)))
                .map(|(label, n)| (label.to_string(), n))
                .expect("cluster is non-empty");
            let mut sample_phrases = Vec::new();
            for &(_, idx) in &members {
                let phrase = examples[idx].tokens.join(" ");
                if !sample_phrases.contains(&phrase) {
                    sample_phrases.push(phrase);
                    if sample_phrases.len() == 3 {
                        break;
                    }
                }
            }
            let mean_entropy =
                members.iter().map(|&(h, _)| h).sum::<f64>() / count as f64;
            PhraseCluster {
                op_index,
                count,
                purity: majority as f64 / count as f64,
                majority_relation,
                sample_phrases,
                mean_entropy,
            }
        })
        .collect();
    clusters.sort_by(|a, b| b.count.cmp(&a.count).then(a.op_index.cmp(&b.op_index)));
    let selected: usize = clusters.iter().map(|c| c.count).sum();
    let agreeing: f64 = clusters
        .iter()
        .map(|c| c.purity * c.count as f64)
        .sum::<f64>();
    let mean_purity = if selected == 0 {
        0.0
    } else {
        agreeing / selected as f64
    };
    ClusterTable {
        clusters,
        selected,
        total,
        mean_purity,
    }
}

const CLUSTER_BATCH: usize = 64;

/// Run every example through the model, keep those whose predicted
/// operation distribution has entropy at or below `threshold`, and group
/// them by argmax operation. An infinite threshold admits every example
/// exactly once; if nothing passes, the table is empty.
pub fn cluster_phrases<R: Real>(
    model: &mut Model<R>,
    examples: &[InstructionExample],
    threshold: f64,
) -> Result<ClusterTable, AnalysisError> {
    let mut assignments: Vec<(usize, f64, usize)> = Vec::new();
    let mut next = 0usize;
    for chunk in examples.chunks(CLUSTER_BATCH) {
        let encoded: Vec<Vec<usize>> = chunk
            .iter()
            .map(|ex| model.vocab.ids(&ex.tokens))
            .collect();
        let specs: Vec<ExampleSpec<'_>> = chunk
            .iter()
            .zip(&encoded)
            .map(|(ex, ids)| ExampleSpec {
                token_ids: ids,
                world: &ex.before,
                source: SourceMode::Model,
                op: OpMode::Model,
            })
            .collect();
        let mut tape = Tape::new();
        let (_, graphs) = model.forward_batch(&mut tape, &specs, BnMode::Eval)?;
        for graph in &graphs {
            let pred = extract_prediction(&tape, graph);
            let h = entropy(&pred.d_op);
            if h <= threshold {
                assignments.push((argmax(&pred.d_op), h, next));
            }
            next += 1;
        }
    }
    Ok(build_clusters(&assignments, examples, examples.len()))
}

// ── Tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::{generate_corpus, corpus_vocabulary};
    use crate::lang::Vocabulary;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn probe_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.world_d = 2;
        cfg.world_h = 9;
        cfg.world_w = 9;
        cfg.num_blocks = 3;
        cfg.n_op = 5;
        cfg.d_op_vec = 4;
        cfg.d_e = 4;
        cfg.hidden = 6;
        cfg
    }

    fn probe_model(seed: u64) -> Model<f64> {
        let vocab = Vocabulary::build(["move", "alpha", "left", "."]);
        Model::init(probe_cfg(), vocab, &mut StdRng::seed_from_u64(seed))
    }

    #[test]
    fn nine_by_nine_sweep_yields_81_records() {
        let mut model = probe_model(1);
        let field = sweep(&mut model, 2, 9).unwrap();
        assert_eq!(field.grid, 9);
        assert_eq!(field.probes.len(), 81);
        assert_eq!(field.op_index, 2);
        for (n, probe) in field.probes.iter().enumerate() {
            assert_eq!(probe.x, (n % 9) as f64 + 0.5);
            assert_eq!(probe.y, (n / 9) as f64 + 0.5);
            for v in [probe.dx, probe.dy, probe.dz, probe.dtheta] {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn zero_model_predicts_the_grid_centroid_everywhere() {
        // Zero parameters silence the conv stack, so confidences are
        // uniform and every probe reads out the same point: the centroid
        // of the voxel grid. The displacement field is then the constant
        // centroid minus each probe position.
        let mut model = probe_model(2);
        for entry in model.params.entries_mut() {
            for v in entry.tensor.data_mut() {
                *v = 0.0;
            }
        }
        let field = sweep(&mut model, 0, 5).unwrap();
        let (cx, cy, cz) = (4.5, 4.5, 1.0);
        for probe in &field.probes {
            assert!((probe.x + probe.dx - cx).abs() < 1e-9);
            assert!((probe.y + probe.dy - cy).abs() < 1e-9);
            assert!((0.5 + probe.dz - cz).abs() < 1e-9);
            assert!(probe.dtheta.abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_never_reads_the_language_encoder() {
        let mut model = probe_model(3);
        let before = sweep(&mut model, 1, 6).unwrap();
        let language_prefixes = [
            "embed", "arg_fwd", "arg_bwd", "op_fwd", "op_bwd", "w_a", "b_a",
            "w_o", "b_o",
        ];
        for entry in model.params.entries_mut() {
            if language_prefixes.iter().any(|p| entry.name.starts_with(p)) {
                for v in entry.tensor.data_mut() {
                    *v += 1.7;
                }
            }
        }
        let after = sweep(&mut model, 1, 6).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn sweep_rejects_bad_op_and_oversized_grid() {
        let mut model = probe_model(4);
        assert!(matches!(
            sweep(&mut model, 5, 4).unwrap_err(),
            AnalysisError::BadOpIndex { got: 5, n_op: 5 }
        ));
        assert!(matches!(
            sweep(&mut model, 0, 10).unwrap_err(),
            AnalysisError::ProbeGridTooLarge { grid: 10, .. }
        ));
    }

    #[test]
    fn interpolation_endpoints_reduce_to_pure_sweeps() {
        let mut model = probe_model(5);
        let pure1 = sweep(&mut model, 1, 5).unwrap();
        let pure3 = sweep(&mut model, 3, 5).unwrap();
        let interp = interpolate_sweep(&mut model, 1, 3, &[1.0, 0.0], 5).unwrap();
        assert_eq!(interp.fields.len(), 2);
        assert_eq!(interp.fields[0].1.probes, pure1.probes);
        assert_eq!(interp.fields[1].1.probes, pure3.probes);
        assert!(matches!(
            interpolate_sweep(&mut model, 1, 3, &[], 5).unwrap_err(),
            AnalysisError::EmptyAlphas
        ));
    }

    #[test]
    fn rotation_monotonicity_counts_back_and_forth_fields() {
        let field_at = |angle: f64| -> SweepResult {
            let probes = (0..9)
                .map(|n| SweepProbe {
                    x: (n % 3) as f64 + 0.5,
                    y: (n / 3) as f64 + 0.5,
                    dx: angle.cos(),
                    dy: angle.sin(),
                    dz: 0.0,
                    dtheta: 0.0,
                })
                .collect();
            SweepResult {
                op_index: 0,
                grid: 3,
                probes,
            }
        };
        // Steady counter-clockwise turn: no violation at the one interior
        // probe of a 3x3 grid.
        let steady = [
            (0.0, field_at(0.0)),
            (0.5, field_at(0.6)),
            (1.0, field_at(1.2)),
        ];
        assert_eq!(rotation_monotonicity(&steady), (0, 1));
        // Overshoot and come back: one violation.
        let wobble = [
            (0.0, field_at(0.0)),
            (0.5, field_at(1.4)),
            (1.0, field_at(0.7)),
        ];
        assert_eq!(rotation_monotonicity(&wobble), (1, 1));
        // Too few fields to judge.
        let short = [(0.0, field_at(0.0)), (1.0, field_at(1.0))];
        assert_eq!(rotation_monotonicity(&short), (0, 0));
    }

    #[test]
    fn infinite_threshold_clusters_every_example_once() {
        let mut cfg = probe_cfg();
        cfg.seed = 31;
        cfg.scenes = 3;
        cfg.examples_per_scene = 6;
        cfg.blocks_per_scene = 3;
        cfg.offset_step = 1.0;
        let corpus = generate_corpus(&cfg).unwrap();
        let vocab = corpus_vocabulary(corpus.train.iter());
        let mut model = Model::<f64>::init(cfg, vocab, &mut StdRng::seed_from_u64(6));
        let table =
            cluster_phrases(&mut model, &corpus.train, f64::INFINITY).unwrap();
        assert_eq!(table.total, corpus.train.len());
        assert_eq!(table.selected, corpus.train.len());
        let members: usize = table.clusters.iter().map(|c| c.count).sum();
        assert_eq!(members, corpus.train.len());
        for cluster in &table.clusters {
            assert!(cluster.op_index < model.cfg.n_op);
            assert!(!cluster.sample_phrases.is_empty());
            assert!(cluster.sample_phrases.len() <= 3);
            assert!(cluster.purity > 0.0 && cluster.purity <= 1.0);
        }
        // A fresh random model stays close to uniform: nothing clears a
        // tight entropy gate, which must yield an empty (not erroneous)
        // table.
        let strict = cluster_phrases(&mut model, &corpus.train, 1e-6).unwrap();
        assert_eq!(strict.selected, 0);
        assert!(strict.clusters.is_empty());
        assert_eq!(strict.mean_purity, 0.0);
    }

    #[test]
    fn purity_is_the_member_weighted_majority_share() {
        let mut cfg = probe_cfg();
        cfg.seed = 32;
        cfg.scenes = 2;
        cfg.examples_per_scene = 4;
        cfg.blocks_per_scene = 3;
        cfg.relations = vec!["left".into(), "on-top".into()];
        let corpus = generate_corpus(&cfg).unwrap();
        let mut all: Vec<InstructionExample> = corpus.train.clone();
        all.extend(corpus.val.iter().cloned());
        all.extend(corpus.test.iter().cloned());
        // Hand-built assignments: cluster 0 holds three examples, two of
        // which share a label; cluster 4 holds one.
        let left_idx: Vec<usize> = (0..all.len())
            .filter(|&i| all[i].meta.relation.name() == "left")
            .collect();
        let top_idx: Vec<usize> = (0..all.len())
            .filter(|&i| all[i].meta.relation.name() == "on-top")
            .collect();
        assert!(left_idx.len() >= 2 && !top_idx.is_empty());
        let assignments = [
            (0, 0.1, left_idx[0]),
            (0, 0.2, left_idx[1]),
            (0, 0.3, top_idx[0]),
            (4, 0.0, left_idx[0]),
        ];
        let table = build_clusters(&assignments, &all, all.len());
        assert_eq!(table.clusters.len(), 2);
        let big = &table.clusters[0];
        assert_eq!(big.op_index, 0);
        assert_eq!(big.count, 3);
        assert_eq!(big.majority_relation, "left");
        assert!((big.purity - 2.0 / 3.0).abs() < 1e-12);
        assert!((big.mean_entropy - 0.2).abs() < 1e-12);
        let small = &table.clusters[1];
        assert_eq!(small.count, 1);
        assert_eq!(small.purity, 1.0);
        // Weighted mean: (2 + 1) agreeing of 4 selected.
        assert!((table.mean_purity - 0.75).abs() < 1e-12);
    }
}
