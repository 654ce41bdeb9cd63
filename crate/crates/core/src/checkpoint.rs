//! Binary checkpointing of a whole model.
//!
//! Layout (all integers little-endian u64 unless noted):
//!
//! ```text
//! magic   4 bytes  "BWCK"
//! version u32      1
//! config  len + UTF-8 text      (the flat key = value form)
//! vocab   count, then per token: len + UTF-8 bytes, in index order
//! params  count, then per tensor:
//!           name len + bytes
//!           ndim, then ndim dims
//!           numel f64 values (LE)
//! ```
//!
//! Every tensor is stored as f64 regardless of the run precision;
//! widening f32 → f64 is exact, so a save/load cycle at either precision
//! is bit-exact. Batchnorm running moments ride along as extra entries
//! named `bn*_running_*` and are routed back into the stats on load.
//! Optimizer state is deliberately not stored: a checkpoint is a model,
//! not a training session.

use crate::config::{Config, ConfigError, ConvMode};
use crate::decoder::ConvStackStats;
use crate::lang::Vocabulary;
use crate::model::{Model, ModelParams, ParamEntry};
use crate::real::Real;
use crate::tape::BnStats;
use crate::tensor::{Tensor, TensorError};
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"BWCK";
const VERSION: u32 = 1;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic { got: [u8; 4] },
    BadVersion { got: u32 },
    BadUtf8 { what: &'static str },
    Config(ConfigError),
    Tensor(TensorError),
    Inconsistent { what: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o: {e}"),
            CheckpointError::BadMagic { got } => {
                write!(f, "not a checkpoint file (magic {got:?})")
            }
            CheckpointError::BadVersion { got } => {
                write!(f, "unsupported checkpoint version {got}")
            }
            CheckpointError::BadUtf8 { what } => write!(f, "invalid UTF-8 in {what}"),
            CheckpointError::Config(e) => write!(f, "checkpoint config: {e}"),
            CheckpointError::Tensor(e) => write!(f, "checkpoint tensor: {e}"),
            CheckpointError::Inconsistent { what } => {
                write!(f, "inconsistent checkpoint: {what}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<ConfigError> for CheckpointError {
    fn from(e: ConfigError) -> Self {
        CheckpointError::Config(e)
    }
}

impl From<TensorError> for CheckpointError {
    fn from(e: TensorError) -> Self {
        CheckpointError::Tensor(e)
    }
}

// ── Primitive writers/readers ───────────────────────────────────────────

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read, what: &'static str) -> Result<String, CheckpointError> {
    let len = read_u64(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::BadUtf8 { what })
}

fn write_tensor_f64<R: Real>(w: &mut impl Write, name: &str, t: &Tensor<R>) -> io::Result<()> {
    write_str(w, name)?;
    write_u64(w, t.shape().len() as u64)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    for v in t.data() {
        w.write_all(&v.to_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor_f64(r: &mut impl Read) -> Result<(String, Tensor<f64>), CheckpointError> {
    let name = read_str(r, "parameter name")?;
    let ndim = read_u64(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((name, Tensor::new(shape, data)?))
}

// ── Save / load ─────────────────────────────────────────────────────────

pub fn save<R: Real>(path: &Path, model: &Model<R>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, &model.cfg.to_text())?;

    let tokens = model.vocab.token_list();
    write_u64(&mut w, tokens.len() as u64)?;
    for t in tokens {
        write_str(&mut w, t)?;
    }

    let entries = model.params.entries();
    let stat_tensors: Vec<(String, Tensor<R>)> = match &model.params.stats {
        Some(s) => vec![
            ("bn1_running_mean".into(), Tensor::from_vec(s.bn1.mean.clone())),
            ("bn1_running_var".into(), Tensor::from_vec(s.bn1.var.clone())),
            ("bn2_running_mean".into(), Tensor::from_vec(s.bn2.mean.clone())),
            ("bn2_running_var".into(), Tensor::from_vec(s.bn2.var.clone())),
        ],
        None => Vec::new(),
    };
    write_u64(&mut w, (entries.len() + stat_tensors.len()) as u64)?;
    for e in entries {
        write_tensor_f64(&mut w, &e.name, &e.tensor)?;
    }
    for (name, t) in &stat_tensors {
        write_tensor_f64(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut BufReader<File>) -> Result<Config, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { got: magic });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { got: version });
    }
    Ok(Config::parse(&read_str(r, "config text")?)?)
}

/// Read only the embedded config — cheap way to learn a checkpoint's
/// precision (and the rest of its settings) before choosing a parameter
/// type for a full [`load`].
pub fn peek_config(path: &Path) -> Result<Config, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

pub fn load<R: Real>(path: &Path) -> Result<Model<R>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let cfg = read_header(&mut r)?;

    let n_tokens = read_u64(&mut r)? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(read_str(&mut r, "vocabulary token")?);
    }
    let vocab = Vocabulary::from_token_list(tokens);

    let n_params = read_u64(&mut r)? as usize;
    let mut entries: Vec<ParamEntry<R>> = Vec::new();
    let mut running: Vec<(String, Vec<R>)> = Vec::new();
    for _ in 0..n_params {
        let (name, t) = read_tensor_f64(&mut r)?;
        if name.starts_with("bn1_running") || name.starts_with("bn2_running") {
            running.push((name, t.cast::<R>().into_data()));
        } else {
            entries.push(ParamEntry {
                name,
                tensor: t.cast(),
            });
        }
    }

    let stats = if running.is_empty() {
        None
    } else {
        let mut take = |want: &str| -> Result<Vec<R>, CheckpointError> {
            running
                .iter()
                .position(|(n, _)| n == want)
                .map(|i| running.remove(i).1)
                .ok_or_else(|| CheckpointError::Inconsistent {
                    what: format!("missing '{want}' alongside other running stats"),
                })
        };
        Some(ConvStackStats {
            bn1: BnStats {
                mean: take("bn1_running_mean")?,
                var: take("bn1_running_var")?,
                momentum: cfg.bn_momentum,
            },
            bn2: BnStats {
                mean: take("bn2_running_mean")?,
                var: take("bn2_running_var")?,
                momentum: cfg.bn_momentum,
            },
        })
    };

    let mcfg = cfg.model();
    if (mcfg.conv_mode == ConvMode::ReluBatchNorm) != stats.is_some() {
        return Err(CheckpointError::Inconsistent {
            what: "batchnorm running stats do not match the configured conv mode".into(),
        });
    }
    let params = ModelParams::from_entries(entries, stats);
    match params.get("embed") {
        Ok(t) if t.shape()[0] == vocab.len() => {}
        Ok(t) => {
            return Err(CheckpointError::Inconsistent {
                what: format!(
                    "embedding rows {} but vocabulary has {} tokens",
                    t.shape()[0],
                    vocab.len()
                ),
            })
        }
        Err(_) => {
            return Err(CheckpointError::Inconsistent {
                what: "no embedding parameter".into(),
            })
        }
    }

    Ok(Model { cfg, vocab, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OpMode, SourceMode};
    use crate::tape::{BnMode, Tape};
    use crate::world::{BlockPose, GridDims, WorldGrid};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn sample_model(seed: u64, depth: usize) -> Model<f64> {
        let mut cfg = Config::default();
        cfg.world_d = depth;
        cfg.world_h = 4;
        cfg.world_w = 4;
        cfg.num_blocks = 3;
        cfg.n_op = 4;
        cfg.d_op_vec = 4;
        cfg.d_e = 3;
        cfg.hidden = 4;
        cfg.seed = seed;
        let tokens = crate::lang::tokenize("shift the red cube toward blue .");
        let vocab = Vocabulary::build(tokens.iter().map(|s| s.as_str()));
        let mut rng = StdRng::seed_from_u64(seed);
        Model::init(cfg, vocab, &mut rng)
    }

    fn sample_world(depth: usize) -> WorldGrid {
        WorldGrid::from_poses(
            GridDims::new(depth, 4, 4),
            3,
            &[
                (1, BlockPose::new(0.5, 0.5, 0.5, 0.3)),
                (2, BlockPose::new(2.5, 2.5, 0.5, -0.7)),
            ],
        )
        .unwrap()
    }

    /// Run one train-mode batch so the running stats move off their init.
    fn warm_up(model: &mut Model<f64>) {
        let world = sample_world(1);
        let ids = vec![2, 4, 3];
        let spec = crate::model::ExampleSpec {
            token_ids: &ids,
            world: &world,
            source: SourceMode::Model,
            op: OpMode::Model,
        };
        let mut tape = Tape::new();
        model.forward_batch(&mut tape, &[spec], BnMode::Train).unwrap();
    }

    #[test]
    fn round_trip_is_bit_exact_with_batchnorm_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bwck");
        let mut model = sample_model(1, 1);
        warm_up(&mut model);
        let stats_before = model.params.stats.clone().unwrap();
        assert!(stats_before.bn1.mean.iter().any(|&m| m != 0.0));

        save(&path, &model).unwrap();
        let loaded: Model<f64> = load(&path).unwrap();

        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.vocab.token_list(), model.vocab.token_list());
        assert_eq!(loaded.params.entries().len(), model.params.entries().len());
        for (a, b) in model.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        let stats_after = loaded.params.stats.unwrap();
        assert_eq!(stats_after.bn1.mean, stats_before.bn1.mean);
        assert_eq!(stats_after.bn1.var, stats_before.bn1.var);
        assert_eq!(stats_after.bn2.mean, stats_before.bn2.mean);
        assert_eq!(stats_after.bn2.var, stats_before.bn2.var);
    }

    #[test]
    fn round_trip_is_bit_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model32.bwck");
        let mut cfg = Config::default();
        cfg.world_d = 2;
        cfg.world_h = 3;
        cfg.world_w = 3;
        cfg.num_blocks = 2;
        cfg.n_op = 3;
        cfg.d_op_vec = 3;
        cfg.d_e = 2;
        cfg.hidden = 3;
        let vocab = Vocabulary::build(["pick", "up"]);
        let mut rng = StdRng::seed_from_u64(5);
        let model: Model<f32> = Model::init(cfg, vocab, &mut rng);
        save(&path, &model).unwrap();
        let loaded: Model<f32> = load(&path).unwrap();
        for (a, b) in model.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        assert!(loaded.params.stats.is_none());
    }

    #[test]
    fn predictions_are_identical_after_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bwck");
        let mut model = sample_model(9, 1);
        warm_up(&mut model);
        let world = sample_world(1);
        let before = model
            .predict("shift the red cube toward blue .", &world, SourceMode::Model, OpMode::Model)
            .unwrap();
        save(&path, &model).unwrap();
        let mut loaded: Model<f64> = load(&path).unwrap();
        let after = loaded
            .predict("shift the red cube toward blue .", &world, SourceMode::Model, OpMode::Model)
            .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn peek_reads_the_embedded_config_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bwck");
        let model = sample_model(4, 1);
        save(&path, &model).unwrap();
        let cfg = peek_config(&path).unwrap();
        assert_eq!(cfg.to_text(), model.cfg.to_text());
        assert!(matches!(
            peek_config(&dir.path().join("missing.bwck")),
            Err(CheckpointError::Io(_))
        ));
    }

    #[test]
    fn rejects_foreign_and_damaged_files() {
        let dir = tempfile::tempdir().unwrap();

        let wrong = dir.path().join("wrong.bin");
        std::fs::write(&wrong, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load::<f64>(&wrong),
            Err(CheckpointError::BadMagic { .. })
        ));

        let path = dir.path().join("model.bwck");
        let model = sample_model(2, 2);
        save(&path, &model).unwrap();

        let full = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("short.bwck");
        std::fs::write(&truncated, &full[..full.len() / 2]).unwrap();
        assert!(matches!(
            load::<f64>(&truncated),
            Err(CheckpointError::Io(_))
        ));

        let mut versioned = full.clone();
        versioned[4] = 99;
        let vpath = dir.path().join("version.bwck");
        std::fs::write(&vpath, &versioned).unwrap();
        assert!(matches!(
            load::<f64>(&vpath),
            Err(CheckpointError::BadVersion { got: 99 })
        ));
    }
}
