//! Full model assembly: named parameters, graph construction, prediction.
//!
//! One forward pass wires the pieces together:
//!
//! ```text
//! tokens ──► shared embedding ──► arg bi-LSTM ──► d_a (block distribution)
//!                            └──► op  bi-LSTM ──► d_op (operation distribution)
//! d_a  ──► attention A (10 · d_a[id−1] at each block's voxel, 0 elsewhere)
//! d_op ──► v_op = M_op · d_op
//! A ⊗ v_op ──► conv stack ──► per-voxel offsets + confidences ──► pose
//! ```
//!
//! Diagnostic modes swap the *used* distributions without touching the
//! encoders: `SourceMode::GoldOneHot` builds the attention from the true
//! source block, `OpMode::Inject` drives the operation bank with an
//! explicit distribution. The [`Prediction`] returned to callers always
//! reports the encoder's own `d_a`/`d_op`, whatever was used downstream.

use crate::config::{Config, ConvMode, ModelConfig};
use crate::decoder::{
    broadcast_operation, conv_stack, readout, stage_grid, ConvStackStats, ConvStackVars,
    CoordinateGrid, PoseVars, READOUT_CHANNELS,
};
use crate::lang::{encode_sentence, EncoderVars, LangOut, LangVars, LstmVars, Vocabulary};
use crate::real::Real;
use crate::tape::{BnMode, BnStats, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::world::{normalize_angle, GridDims, WorldGrid};
use rand::Rng;
use std::fmt;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    EmptyBatch,
    WorldDims { got: GridDims, want: GridDims },
    BlockCount { got: usize, want: usize },
    GoldOutOfRange { id: usize, num_blocks: usize },
    InjectionLength { got: usize, want: usize },
    UnknownParam { name: String },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::EmptyBatch => write!(f, "forward pass needs at least one example"),
            ModelError::WorldDims { got, want } => write!(
                f,
                "world is {}x{}x{} but the model was built for {}x{}x{}",
                got.d, got.h, got.w, want.d, want.h, want.w
            ),
            ModelError::BlockCount { got, want } => write!(
                f,
                "world has {got} block types but the model expects {want}"
            ),
            ModelError::GoldOutOfRange { id, num_blocks } => write!(
                f,
                "gold source block id {id} outside 1..={num_blocks}"
            ),
            ModelError::InjectionLength { got, want } => write!(
                f,
                "injected operation distribution has {got} entries, bank has {want}"
            ),
            ModelError::UnknownParam { name } => write!(f, "no parameter named '{name}'"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

// ── Parameter store ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<R> {
    pub name: String,
    pub tensor: Tensor<R>,
}

/// Every trainable tensor of the model, in a fixed stable order, plus the
/// (non-trainable) batchnorm running moments when the conv stack uses
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R> {
    entries: Vec<ParamEntry<R>>,
    pub stats: Option<ConvStackStats<R>>,
}

/// The four LSTM directions share one init recipe; gate rows are fused
/// `[i; f; g; o]` and the forget-gate bias rows start at 1 so memory is
/// retained early in training.
fn lstm_entries<R: Real>(
    out: &mut Vec<ParamEntry<R>>,
    rng: &mut impl Rng,
    prefix: &str,
    d_in: usize,
    hidden: usize,
) {
    let wx_scale = 1.0 / (d_in as f64).sqrt();
    let wh_scale = 1.0 / (hidden as f64).sqrt();
    out.push(ParamEntry {
        name: format!("{prefix}_wx"),
        tensor: Tensor::uniform(rng, wx_scale, &[4 * hidden, d_in]),
    });
    out.push(ParamEntry {
        name: format!("{prefix}_wh"),
        tensor: Tensor::uniform(rng, wh_scale, &[4 * hidden, hidden]),
    });
    let mut b = Tensor::zeros(&[4 * hidden]);
    for g in hidden..2 * hidden {
        b.data_mut()[g] = R::ONE;
    }
    out.push(ParamEntry {
        name: format!("{prefix}_b"),
        tensor: b,
    });
}

impl<R: Real> ModelParams<R> {
    /// Fresh parameters for the given shapes. All random draws happen in
    /// f64 before narrowing, so a seed produces the same initial weights
    /// at every precision.
    pub fn init(mcfg: &ModelConfig, vocab_len: usize, rng: &mut impl Rng) -> Self {
        let (e, h, k, n_op, c) = (
            mcfg.d_e,
            mcfg.hidden,
            mcfg.num_blocks,
            mcfg.n_op,
            mcfg.d_op_vec,
        );
        let mut entries: Vec<ParamEntry<R>> = Vec::new();
        let push = |entries: &mut Vec<ParamEntry<R>>, name: &str, t: Tensor<R>| {
            entries.push(ParamEntry {
                name: name.to_string(),
                tensor: t,
            })
        };

        push(&mut entries, "embed", Tensor::uniform(rng, 0.1, &[vocab_len, e]));
        lstm_entries(&mut entries, rng, "arg_fwd", e, h);
        lstm_entries(&mut entries, rng, "arg_bwd", e, h);
        lstm_entries(&mut entries, rng, "op_fwd", e, h);
        lstm_entries(&mut entries, rng, "op_bwd", e, h);

        let proj_scale = 1.0 / (2.0 * h as f64).sqrt();
        push(&mut entries, "w_a", Tensor::uniform(rng, proj_scale, &[k, 2 * h]));
        push(&mut entries, "b_a", Tensor::zeros(&[k]));
        push(&mut entries, "w_o", Tensor::uniform(rng, proj_scale, &[n_op, 2 * h]));
        push(&mut entries, "b_o", Tensor::zeros(&[n_op]));

        push(
            &mut entries,
            "m_op",
            Tensor::uniform(rng, 1.0 / (c as f64).sqrt(), &[c, n_op]),
        );

        let (kd1, kh1, kw1) = mcfg.kernel1();
        let (kd2, kh2, kw2) = mcfg.kernel2();
        let k1_scale = 1.0 / ((kd1 * kh1 * kw1 * c) as f64).sqrt();
        let k2_scale = 1.0 / ((kd2 * kh2 * kw2 * c) as f64).sqrt();
        push(
            &mut entries,
            "conv1_k",
            Tensor::uniform(rng, k1_scale, &[kd1, kh1, kw1, c, c]),
        );
        push(&mut entries, "conv1_b", Tensor::zeros(&[c]));
        push(
            &mut entries,
            "conv2_k",
            Tensor::uniform(rng, k2_scale, &[kd2, kh2, kw2, c, c]),
        );
        push(&mut entries, "conv2_b", Tensor::zeros(&[c]));
        push(
            &mut entries,
            "proj_k",
            Tensor::uniform(rng, 1.0 / (c as f64).sqrt(), &[1, 1, 1, c, READOUT_CHANNELS]),
        );
        push(&mut entries, "proj_b", Tensor::zeros(&[READOUT_CHANNELS]));

        let stats = match mcfg.conv_mode {
            ConvMode::Tanh3d => None,
            ConvMode::ReluBatchNorm => {
                push(&mut entries, "bn1_gamma", Tensor::full(&[c], R::ONE));
                push(&mut entries, "bn1_beta", Tensor::zeros(&[c]));
                push(&mut entries, "bn2_gamma", Tensor::full(&[c], R::ONE));
                push(&mut entries, "bn2_beta", Tensor::zeros(&[c]));
                Some(ConvStackStats {
                    bn1: BnStats::new(c, mcfg.bn_momentum),
                    bn2: BnStats::new(c, mcfg.bn_momentum),
                })
            }
        };

        ModelParams { entries, stats }
    }

    pub fn from_entries(
        entries: Vec<ParamEntry<R>>,
        stats: Option<ConvStackStats<R>>,
    ) -> Self {
        ModelParams { entries, stats }
    }

    pub fn entries(&self) -> &[ParamEntry<R>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<R>] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Result<usize, ModelError> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| ModelError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>, ModelError> {
        Ok(&self.entries[self.index_of(name)?].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<R>, ModelError> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i].tensor)
    }

    /// Push every entry onto the tape as a gradient-tracked leaf and wire
    /// the handles into the structured views the graph builders take.
    pub fn stage(&self, tape: &mut Tape<R>) -> Result<StagedParams, ModelError> {
        let vars: Vec<Var> = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone()))
            .collect();
        self.wire(&vars)
    }

    /// Wire an externally staged, entry-ordered var list (used by the
    /// finite-difference harness, which owns the leaves itself).
    pub fn wire(&self, vars: &[Var]) -> Result<StagedParams, ModelError> {
        let v = |name: &str| self.index_of(name).map(|i| vars[i]);
        let enc = |p: &str| -> Result<EncoderVars, ModelError> {
            Ok(EncoderVars {
                fwd: LstmVars {
                    w_x: v(&format!("{p}_fwd_wx"))?,
                    w_h: v(&format!("{p}_fwd_wh"))?,
                    b: v(&format!("{p}_fwd_b"))?,
                },
                bwd: LstmVars {
                    w_x: v(&format!("{p}_bwd_wx"))?,
                    w_h: v(&format!("{p}_bwd_wh"))?,
                    b: v(&format!("{p}_bwd_b"))?,
                },
            })
        };
        let has_bn = self.entries.iter().any(|e| e.name == "bn1_gamma");
        Ok(StagedParams {
            vars: vars.to_vec(),
            lang: LangVars {
                embed: v("embed")?,
                arg: enc("arg")?,
                op: enc("op")?,
                w_a: v("w_a")?,
                b_a: v("b_a")?,
                w_o: v("w_o")?,
                b_o: v("b_o")?,
            },
            m_op: v("m_op")?,
            conv: ConvStackVars {
                conv1_k: v("conv1_k")?,
                conv1_b: v("conv1_b")?,
                conv2_k: v("conv2_k")?,
                conv2_b: v("conv2_b")?,
                proj_k: v("proj_k")?,
                proj_b: v("proj_b")?,
                bn1: if has_bn {
                    Some((v("bn1_gamma")?, v("bn1_beta")?))
                } else {
                    None
                },
                bn2: if has_bn {
                    Some((v("bn2_gamma")?, v("bn2_beta")?))
                } else {
                    None
                },
            },
        })
    }

    /// Cast every tensor (and the running stats) to another precision.
    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
            stats: self.stats.as_ref().map(|s| {
                let recast = |stats: &BnStats<R>| BnStats {
                    mean: stats.mean.iter().map(|v| S::from_f64(v.to_f64())).collect(),
                    var: stats.var.iter().map(|v| S::from_f64(v.to_f64())).collect(),
                    momentum: stats.momentum,
                };
                ConvStackStats {
                    bn1: recast(&s.bn1),
                    bn2: recast(&s.bn2),
                }
            }),
        }
    }
}

/// Tape handles for the whole parameter set, `vars` parallel to
/// `ModelParams::entries`.
#[derive(Debug, Clone)]
pub struct StagedParams {
    pub vars: Vec<Var>,
    pub lang: LangVars,
    pub m_op: Var,
    pub conv: ConvStackVars,
}

// ── Forward modes ───────────────────────────────────────────────────────

/// Which block distribution feeds the attention map.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceMode {
    /// The encoder's own `d_a`.
    Model,
    /// A one-hot on the given gold block id (1-based); the encoder still
    /// runs and its outputs are reported unchanged.
    GoldOneHot(usize),
}

/// Which operation distribution feeds the bank.
#[derive(Debug, Clone, PartialEq)]
pub enum OpMode {
    Model,
    /// An explicit distribution over the bank's operations.
    Inject(Vec<f64>),
}

/// One forward input: token ids, the world, and the two mode switches.
#[derive(Debug, Clone)]
pub struct ExampleSpec<'a> {
    pub token_ids: &'a [usize],
    pub world: &'a WorldGrid,
    pub source: SourceMode,
    pub op: OpMode,
}

// ── Graph construction ──────────────────────────────────────────────────

/// Tape handles for one example's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ExampleGraph {
    pub lang: LangOut,
    /// The distribution actually driving the attention (differs from
    /// `lang.d_a` only under gold injection).
    pub d_a_used: Var,
    pub d_op_used: Var,
    pub attention: Var,
    pub v_op: Var,
    pub pose: PoseVars,
}

/// `[D·H·W, K]` indicator: row v is one-hot on the visible block's id at
/// voxel v, all-zero on background. `A = 10 · indicator · d_a` then
/// matches the per-voxel attention definition exactly.
fn block_indicator<R: Real>(world: &WorldGrid, num_blocks: usize) -> Tensor<R> {
    let n = world.dims().numel();
    let mut data = vec![R::ZERO; n * num_blocks];
    for (v, &id) in world.ids().iter().enumerate() {
        if id > 0 {
            data[v * num_blocks + (id - 1)] = R::ONE;
        }
    }
    Tensor::new(vec![n, num_blocks], data).expect("indicator shape")
}

/// Build the forward graph for a batch. Every example must live on the
/// configured grid; the conv stack runs once over the stacked batch so
/// batchnorm sees batch-wide moments.
pub fn build_batch_graph<R: Real>(
    tape: &mut Tape<R>,
    staged: &StagedParams,
    stats: Option<&mut ConvStackStats<R>>,
    mcfg: &ModelConfig,
    batch: &[ExampleSpec<'_>],
    bn_mode: BnMode,
) -> Result<Vec<ExampleGraph>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let dims = mcfg.dims;
    let n = dims.numel();
    let c = mcfg.d_op_vec;

    let grid = stage_grid(tape, &CoordinateGrid::new(dims));
    let mut partial: Vec<(LangOut, Var, Var, Var, Var)> = Vec::with_capacity(batch.len());
    let mut feats: Vec<Var> = Vec::with_capacity(batch.len());

    for spec in batch {
        if spec.world.dims() != dims {
            return Err(ModelError::WorldDims {
                got: spec.world.dims(),
                want: dims,
            });
        }
        if spec.world.num_block_types() != mcfg.num_blocks {
            return Err(ModelError::BlockCount {
                got: spec.world.num_block_types(),
                want: mcfg.num_blocks,
            });
        }

        let lang = encode_sentence(tape, &staged.lang, spec.token_ids, mcfg.hidden)?;

        let d_a_used = match spec.source {
            SourceMode::Model => lang.d_a,
            SourceMode::GoldOneHot(id) => {
                if id == 0 || id > mcfg.num_blocks {
                    return Err(ModelError::GoldOutOfRange {
                        id,
                        num_blocks: mcfg.num_blocks,
                    });
                }
                let mut one_hot = Tensor::zeros(&[mcfg.num_blocks]);
                one_hot.data_mut()[id - 1] = R::ONE;
                tape.constant(one_hot)
            }
        };
        let d_op_used = match &spec.op {
            OpMode::Model => lang.d_op,
            OpMode::Inject(d) => {
                if d.len() != mcfg.n_op {
                    return Err(ModelError::InjectionLength {
                        got: d.len(),
                        want: mcfg.n_op,
                    });
                }
                let vals: Vec<R> = d.iter().map(|&x| R::from_f64(x)).collect();
                tape.constant(Tensor::from_vec(vals))
            }
        };

        let indicator = tape.constant(block_indicator::<R>(spec.world, mcfg.num_blocks));
        let raw = tape.matmul(indicator, d_a_used)?;
        let attention = tape.scale(raw, R::from_f64(10.0));
        let v_op = tape.matmul(staged.m_op, d_op_used)?;
        let feat = broadcast_operation(tape, attention, v_op)?;

        partial.push((lang, d_a_used, d_op_used, attention, v_op));
        feats.push(feat);
    }

    let stacked = tape.concat(&feats)?;
    let world_feat = tape.reshape(stacked, vec![batch.len(), dims.d, dims.h, dims.w, c])?;
    let out = conv_stack(
        tape,
        world_feat,
        &staged.conv,
        mcfg.conv_mode,
        stats,
        bn_mode,
        R::from_f64(mcfg.bn_eps),
    )?;

    let mut graphs = Vec::with_capacity(batch.len());
    for (b, (lang, d_a_used, d_op_used, attention, v_op)) in partial.into_iter().enumerate() {
        let span = n * READOUT_CHANNELS;
        let block = tape.slice(out, b * span, span)?;
        let pose = readout(tape, block, grid)?;
        graphs.push(ExampleGraph {
            lang,
            d_a_used,
            d_op_used,
            attention,
            v_op,
            pose,
        });
    }
    Ok(graphs)
}

// ── Prediction extraction ───────────────────────────────────────────────

/// Plain-number view of one example's outputs. `d_a`/`d_op` are always
/// the encoder's own distributions; `attention` is the map the decoder
/// actually consumed (gold-based under gold injection).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Raw readout before wrapping — the value training sees.
    pub theta_raw: f64,
    /// Wrapped into (−π, π] for reporting.
    pub theta: f64,
    pub d_a: Vec<f64>,
    pub d_op: Vec<f64>,
    /// Predicted source block id (argmax of `d_a`, ties to the lowest id).
    pub source: usize,
    pub attention: Vec<f64>,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn extract_prediction<R: Real>(tape: &Tape<R>, ex: &ExampleGraph) -> Prediction {
    let vec_f64 = |v: Var| -> Vec<f64> {
        tape.value(v).data().iter().map(|x| x.to_f64()).collect()
    };
    let d_a = vec_f64(ex.lang.d_a);
    let theta_raw = tape.value(ex.pose.theta).item().to_f64();
    Prediction {
        x: tape.value(ex.pose.x).item().to_f64(),
        y: tape.value(ex.pose.y).item().to_f64(),
        z: tape.value(ex.pose.z).item().to_f64(),
        theta_raw,
        theta: normalize_angle(theta_raw),
        source: argmax(&d_a) + 1,
        d_a,
        d_op: vec_f64(ex.lang.d_op),
        attention: vec_f64(ex.attention),
    }
}

// ── Model ───────────────────────────────────────────────────────────────

/// Parameters plus everything needed to run them: vocabulary and config.
#[derive(Debug, Clone)]
pub struct Model<R: Real> {
    pub cfg: Config,
    pub vocab: Vocabulary,
    pub params: ModelParams<R>,
}

impl<R: Real> Model<R> {
    pub fn init(cfg: Config, vocab: Vocabulary, rng: &mut impl Rng) -> Self {
        let params = ModelParams::init(&cfg.model(), vocab.len(), rng);
        Model { cfg, vocab, params }
    }

    /// Forward a batch on a caller-owned tape (training keeps the tape to
    /// run backward afterwards).
    pub fn forward_batch(
        &mut self,
        tape: &mut Tape<R>,
        batch: &[ExampleSpec<'_>],
        bn_mode: BnMode,
    ) -> Result<(StagedParams, Vec<ExampleGraph>), ModelError> {
        let mcfg = self.cfg.model();
        let staged = self.params.stage(tape)?;
        let graphs = build_batch_graph(
            tape,
            &staged,
            self.params.stats.as_mut(),
            &mcfg,
            batch,
            bn_mode,
        )?;
        Ok((staged, graphs))
    }

    /// One sentence against one world, in inference mode.
    pub fn predict(
        &mut self,
        sentence: &str,
        world: &WorldGrid,
        source: SourceMode,
        op: OpMode,
    ) -> Result<Prediction, ModelError> {
        let tokens = crate::lang::tokenize(sentence);
        let ids = self.vocab.ids(&tokens);
        let mut tape = Tape::new();
        let spec = ExampleSpec {
            token_ids: &ids,
            world,
            source,
            op,
        };
        let (_, graphs) = self.forward_batch(&mut tape, &[spec], BnMode::Eval)?;
        Ok(extract_prediction(&tape, &graphs[0]))
    }
}
