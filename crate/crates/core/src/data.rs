//! Synthetic instruction corpus: scenes of named blocks with jittered
//! placements, relation templates that move one block relative to a
//! reference pose, and a line-oriented text format with a lossless,
//! field-exact round trip.
//!
//! Every example is exactly solvable: re-applying its relation's pose
//! function to the poses stored in the scene reproduces the stored target
//! bit for bit, so labels can never drift from the worlds they describe.

use crate::config::Config;
use crate::eval::Sample;
use crate::lang::{tokenize, Vocabulary};
use crate::world::{BlockPose, GridDims, WorldError, WorldGrid};
use rand::prelude::*;
use rand::rngs::StdRng;
use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::path::Path;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum DataError {
    /// A relation name in the config matches no known template.
    UnknownRelation { name: String },
    /// The relation list is empty.
    NoRelations,
    /// More block types requested than there are block names.
    BlockTypesExceedNames { types: usize, names: usize },
    /// A scene cannot contain more blocks than there are block types.
    SceneLargerThanPalette { blocks: usize, types: usize },
    /// Instruction generation needs at least two blocks in the scene.
    TooFewBlocks { have: usize },
    /// Could not place every block without overlap within the retry budget.
    SceneRetriesExhausted,
    /// Could not realize an in-bounds instruction within the retry budget.
    ExampleRetriesExhausted,
    /// An example refers to a block id absent from its scene.
    MissingBlock { id: usize },
    /// Split fractions must satisfy `train > 0`, `val >= 0`, `train+val <= 1`.
    BadSplit { train: f64, val: f64 },
    World(WorldError),
    Io(std::io::Error),
    /// A dataset record failed to parse; reports where and which field.
    Parse {
        line: usize,
        field: &'static str,
        detail: String,
    },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::UnknownRelation { name } => {
                write!(f, "unknown relation \"{name}\"")
            }
            DataError::NoRelations => write!(f, "relation list is empty"),
            DataError::BlockTypesExceedNames { types, names } => write!(
                f,
                "num_blocks {types} exceeds the {names} available block names"
            ),
            DataError::SceneLargerThanPalette { blocks, types } => write!(
                f,
                "blocks_per_scene {blocks} exceeds num_blocks {types}"
            ),
            DataError::TooFewBlocks { have } => write!(
                f,
                "scene has {have} block(s) but instructions need at least 2"
            ),
            DataError::SceneRetriesExhausted => {
                write!(f, "could not place all blocks within the retry budget")
            }
            DataError::ExampleRetriesExhausted => write!(
                f,
                "could not realize an in-bounds instruction within the retry budget"
            ),
            DataError::MissingBlock { id } => {
                write!(f, "block id {id} is not present in the scene")
            }
            DataError::BadSplit { train, val } => write!(
                f,
                "split fractions train={train} val={val} must satisfy \
                 train > 0, val >= 0, train + val <= 1"
            ),
            DataError::World(e) => write!(f, "world error: {e}"),
            DataError::Io(e) => write!(f, "io error: {e}"),
            DataError::Parse { line, field, detail } => {
                write!(f, "line {line}: bad {field}: {detail}")
            }
        }
    }
}

impl std::error::Error for DataError {}

impl From<WorldError> for DataError {
    fn from(e: WorldError) -> Self {
        DataError::World(e)
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

// ── Block names ─────────────────────────────────────────────────────────

/// Single-token names for block ids 1..=26, in id order.
pub const BLOCK_NAMES: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf",
    "hotel", "india", "juliett", "kilo", "lima", "mike", "november",
    "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform",
    "victor", "whiskey", "xray", "yankee", "zulu",
];

/// Name for a 1-based block id. Panics on ids outside the name table;
/// generation validates `num_blocks` up front so this cannot trip there.
pub fn block_name(id: usize) -> &'static str {
    BLOCK_NAMES[id - 1]
}

// ── Relations ───────────────────────────────────────────────────────────

/// Horizontal unit direction used by the counted-offset relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    None,
    East,
    West,
    North,
    South,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::None => "none",
            Direction::East => "east",
            Direction::West => "west",
            Direction::North => "north",
            Direction::South => "south",
        }
    }

    pub fn from_name(name: &str) -> Option<Direction> {
        Some(match name {
            "none" => Direction::None,
            "east" => Direction::East,
            "west" => Direction::West,
            "north" => Direction::North,
            "south" => Direction::South,
            _ => return None,
        })
    }

    /// Unit step in the horizontal plane: east = +x, north = +y.
    pub fn unit(self) -> (f64, f64) {
        match self {
            Direction::None => (0.0, 0.0),
            Direction::East => (1.0, 0.0),
            Direction::West => (-1.0, 0.0),
            Direction::North => (0.0, 1.0),
            Direction::South => (0.0, -1.0),
        }
    }
}

/// The eight spatial relations an instruction can request.
///
/// Every relation except `MirrorAcrossAxis` uses the moved block itself as
/// the reference: the target is a function of the source pose alone, which
/// keeps the label predictable from the attended block plus the operation.
/// Mirroring genuinely needs a second block to reflect across.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Left,
    Right,
    AboveNorth,
    BelowSouth,
    OnTop,
    MirrorAcrossAxis,
    Rotate45Clockwise,
    KLengthsOffset,
}

impl Relation {
    pub const ALL: [Relation; 8] = [
        Relation::Left,
        Relation::Right,
        Relation::AboveNorth,
        Relation::BelowSouth,
        Relation::OnTop,
        Relation::MirrorAcrossAxis,
        Relation::Rotate45Clockwise,
        Relation::KLengthsOffset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::AboveNorth => "above-north",
            Relation::BelowSouth => "below-south",
            Relation::OnTop => "on-top",
            Relation::MirrorAcrossAxis => "mirror-across-axis",
            Relation::Rotate45Clockwise => "rotate-45-clockwise",
            Relation::KLengthsOffset => "k-lengths-offset",
        }
    }

    pub fn from_name(name: &str) -> Option<Relation> {
        Relation::ALL.iter().copied().find(|r| r.name() == name)
    }

    /// Sentence templates. `{src}` and `{ref}` expand to block names,
    /// `{k}` to a counted unit phrase ("two blocks"), `{dir}` to a
    /// compass word. Each template names each role exactly once.
    pub fn paraphrases(self) -> &'static [&'static str] {
        match self {
            Relation::Left => &[
                "move {src} left.",
                "push {src} to the left.",
                "slide {src} a little to the left.",
                "shift {src} leftward.",
            ],
            Relation::Right => &[
                "move {src} right.",
                "push {src} to the right.",
                "slide {src} a little to the right.",
                "shift {src} rightward.",
            ],
            Relation::AboveNorth => &[
                "move {src} north.",
                "push {src} toward the north.",
                "slide {src} a little north.",
                "shift {src} northward.",
            ],
            Relation::BelowSouth => &[
                "move {src} south.",
                "push {src} toward the south.",
                "slide {src} a little south.",
                "shift {src} southward.",
            ],
            Relation::OnTop => &[
                "lift {src} up one layer.",
                "raise {src} one level.",
                "stack {src} one layer higher.",
                "pop {src} up a level.",
            ],
            Relation::MirrorAcrossAxis => &[
                "mirror {src} across {ref}.",
                "reflect {src} over {ref}.",
                "flip {src} to the far side of {ref}.",
                "place {src} at its mirror image across {ref}.",
            ],
            Relation::Rotate45Clockwise => &[
                "rotate {src} 45 degrees clockwise.",
                "turn {src} clockwise by 45 degrees.",
                "twist {src} 45 degrees to the right.",
                "give {src} a 45 degree clockwise spin.",
            ],
            Relation::KLengthsOffset => &[
                "move {src} {k} {dir}.",
                "shift {src} {k} {dir}.",
                "push {src} {k} to the {dir}.",
                "slide {src} {dir} by {k}.",
            ],
        }
    }

    /// Only mirroring references a block other than the one being moved.
    pub fn needs_distinct_reference(self) -> bool {
        matches!(self, Relation::MirrorAcrossAxis)
    }

    /// Whether the relation alters the block's yaw.
    pub fn changes_theta(self) -> bool {
        matches!(self, Relation::Rotate45Clockwise)
    }

    /// Pose function: where the source block should end up.
    ///
    /// * `Left`/`Right` shift x by ∓`magnitude`; `AboveNorth`/`BelowSouth`
    ///   shift y by ±`magnitude` (north = +y).
    /// * `OnTop` raises z by `magnitude` (always 1.0: one layer).
    /// * `MirrorAcrossAxis` reflects across the plane x = reference.x, so
    ///   a source at `x_ref + d` lands at `x_ref - d`; y, z, theta keep.
    /// * `Rotate45Clockwise` subtracts `magnitude` (π/4) from yaw in
    ///   place; clockwise is negative yaw, so theta 0 becomes -π/4.
    /// * `KLengthsOffset` steps `magnitude` (= k) block lengths along
    ///   `direction`.
    pub fn target(
        self,
        source: &BlockPose,
        reference: &BlockPose,
        magnitude: f64,
        direction: Direction,
    ) -> BlockPose {
        match self {
            Relation::Left => BlockPose::new(
                source.x - magnitude,
                source.y,
                source.z,
                source.theta,
            ),
            Relation::Right => BlockPose::new(
                source.x + magnitude,
                source.y,
                source.z,
                source.theta,
            ),
            Relation::AboveNorth => BlockPose::new(
                source.x,
                source.y + magnitude,
                source.z,
                source.theta,
            ),
            Relation::BelowSouth => BlockPose::new(
                source.x,
                source.y - magnitude,
                source.z,
                source.theta,
            ),
            Relation::OnTop => BlockPose::new(
                source.x,
                source.y,
                source.z + magnitude,
                source.theta,
            ),
            Relation::MirrorAcrossAxis => BlockPose::new(
                2.0 * reference.x - source.x,
                source.y,
                source.z,
                source.theta,
            ),
            Relation::Rotate45Clockwise => BlockPose::new(
                source.x,
                source.y,
                source.z,
                source.theta - magnitude,
            ),
            Relation::KLengthsOffset => {
                let (ux, uy) = direction.unit();
                BlockPose::new(
                    source.x + magnitude * ux,
                    source.y + magnitude * uy,
                    source.z,
                    source.theta,
                )
            }
        }
    }
}

/// Parse the config's relation names into templates.
pub fn parse_relations(cfg: &Config) -> Result<Vec<Relation>, DataError> {
    if cfg.relations.is_empty() {
        return Err(DataError::NoRelations);
    }
    cfg.relations
        .iter()
        .map(|name| {
            Relation::from_name(name).ok_or_else(|| DataError::UnknownRelation {
                name: name.clone(),
            })
        })
        .collect()
}

// ── Examples ────────────────────────────────────────────────────────────

/// Everything needed to regenerate an example's label from its scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleMeta {
    /// Index into the relation's paraphrase list.
    pub template: usize,
    pub relation: Relation,
    /// Reference block id; equals the source except for mirroring.
    pub reference: usize,
    /// Scene index, the unit of the train/val/test split.
    pub scene: usize,
    /// Offset length, layer count, k, or rotation angle the relation used.
    pub magnitude: f64,
    pub direction: Direction,
}

/// One instruction: a tokenized sentence, the world before the move, the
/// gold source block id, and the gold target pose.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionExample {
    pub tokens: Vec<String>,
    pub before: WorldGrid,
    pub source: usize,
    pub target: BlockPose,
    pub meta: ExampleMeta,
}

impl InstructionExample {
    /// Encode against a vocabulary for the model pipeline.
    pub fn to_sample(&self, vocab: &Vocabulary) -> Sample {
        Sample {
            token_ids: vocab.ids(&self.tokens),
            world: self.before.clone(),
            gold_source: self.source,
            target: self.target,
        }
    }
}

/// Recompute the target from the stored scene and metadata. Generation
/// stores exactly this function's output, so the result is bit-identical
/// to `example.target` for any uncorrupted example.
pub fn replay_target(example: &InstructionExample) -> Result<BlockPose, DataError> {
    let source = example
        .before
        .pose(example.source)
        .ok_or(DataError::MissingBlock { id: example.source })?;
    let reference = example
        .before
        .pose(example.meta.reference)
        .ok_or(DataError::MissingBlock {
            id: example.meta.reference,
        })?;
    Ok(example.meta.relation.target(
        source,
        reference,
        example.meta.magnitude,
        example.meta.direction,
    ))
}

// ── Scene generation ────────────────────────────────────────────────────

const PLACE_TRIES: usize = 200;
const EXAMPLE_TRIES: usize = 200;
/// Blocks must keep at least this center distance at placement time.
const MIN_SEPARATION: f64 = 1.0;

fn jittered(rng: &mut StdRng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Place `blocks_per_scene` distinct block types on the ground layer with
/// continuous jitter (`offset_jitter`) around voxel centers and optional
/// yaw noise (`yaw_jitter`). Placements keep pairwise center distances of
/// at least 1.0 and every block visible; a scene that cannot satisfy that
/// within the retry budget is rejected.
pub fn generate_scene(cfg: &Config, rng: &mut StdRng) -> Result<WorldGrid, DataError> {
    if cfg.num_blocks > BLOCK_NAMES.len() {
        return Err(DataError::BlockTypesExceedNames {
            types: cfg.num_blocks,
            names: BLOCK_NAMES.len(),
        });
    }
    if cfg.blocks_per_scene > cfg.num_blocks {
        return Err(DataError::SceneLargerThanPalette {
            blocks: cfg.blocks_per_scene,
            types: cfg.num_blocks,
        });
    }
    let dims = GridDims::new(cfg.world_d, cfg.world_h, cfg.world_w);
    let mut ids: Vec<usize> = (1..=cfg.num_blocks).collect();
    ids.shuffle(rng);
    ids.truncate(cfg.blocks_per_scene);

    let mut placed: Vec<(usize, BlockPose)> = Vec::with_capacity(ids.len());
    for &id in &ids {
        let mut ok = false;
        for _ in 0..PLACE_TRIES {
            let row = rng.gen_range(0..cfg.world_h);
            let col = rng.gen_range(0..cfg.world_w);
            let x = col as f64 + 0.5 + jittered(rng, cfg.offset_jitter);
            let y = row as f64 + 0.5 + jittered(rng, cfg.offset_jitter);
            let z = 0.5;
            let theta = jittered(rng, cfg.yaw_jitter);
            let far_enough = placed.iter().all(|(_, p)| {
                let dx = p.x - x;
                let dy = p.y - y;
                (dx * dx + dy * dy).sqrt() >= MIN_SEPARATION
            });
            if far_enough {
                placed.push((id, BlockPose::new(x, y, z, theta)));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(DataError::SceneRetriesExhausted);
        }
    }
    let grid = WorldGrid::from_poses(dims, cfg.num_blocks, &placed)?;
    if !grid.hidden_blocks().is_empty() {
        return Err(DataError::SceneRetriesExhausted);
    }
    Ok(grid)
}

// ── Instruction generation ──────────────────────────────────────────────

fn spelled_count(k: usize) -> &'static str {
    match k {
        1 => "one block",
        2 => "two blocks",
        _ => "three blocks",
    }
}

fn render(template: &str, src: &str, reference: &str, k: usize, dir: Direction) -> String {
    template
        .replace("{src}", src)
        .replace("{ref}", reference)
        .replace("{k}", spelled_count(k))
        .replace("{dir}", dir.name())
}

/// A target pose is in bounds when the unit cube around it fits inside
/// the world volume.
fn in_bounds(pose: &BlockPose, dims: GridDims) -> bool {
    pose.x >= 0.5
        && pose.x <= dims.w as f64 - 0.5
        && pose.y >= 0.5
        && pose.y <= dims.h as f64 - 0.5
        && pose.z >= 0.5
        && pose.z <= dims.d as f64 - 0.5
}

/// Draw one instruction for a scene: pick a relation, a source block, a
/// reference (mirroring only), and a jittered magnitude; keep the draw
/// only if the target stays in bounds, otherwise resample, and reject
/// after a bounded number of tries (e.g. every relation infeasible in
/// this world).
pub fn generate_example(
    cfg: &Config,
    relations: &[Relation],
    scene: &WorldGrid,
    scene_id: usize,
    rng: &mut StdRng,
) -> Result<InstructionExample, DataError> {
    if relations.is_empty() {
        return Err(DataError::NoRelations);
    }
    let ids: Vec<usize> = scene.poses().keys().copied().collect();
    if ids.len() < 2 {
        return Err(DataError::TooFewBlocks { have: ids.len() });
    }
    let dims = scene.dims();
    for _ in 0..EXAMPLE_TRIES {
        let relation = relations[rng.gen_range(0..relations.len())];
        let source = ids[rng.gen_range(0..ids.len())];
        let source_pose = *scene.pose(source).expect("scene lists this id");
        let reference = if relation.needs_distinct_reference() {
            // Reflecting across a plane through a near-coincident x would
            // be a no-op; require a substantial planar separation.
            let candidates: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|&id| {
                    id != source
                        && (scene.pose(id).unwrap().x - source_pose.x).abs()
                            >= MIN_SEPARATION / 2.0
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            candidates[rng.gen_range(0..candidates.len())]
        } else {
            source
        };
        let reference_pose = *scene.pose(reference).expect("scene lists this id");
        let (magnitude, direction) = match relation {
            Relation::Left
            | Relation::Right
            | Relation::AboveNorth
            | Relation::BelowSouth => (
                cfg.offset_step + jittered(rng, cfg.offset_jitter),
                Direction::None,
            ),
            Relation::OnTop => (1.0, Direction::None),
            Relation::MirrorAcrossAxis => (0.0, Direction::None),
            Relation::Rotate45Clockwise => (FRAC_PI_4, Direction::None),
            Relation::KLengthsOffset => {
                let k = rng.gen_range(1..=3usize);
                let dir = [
                    Direction::East,
                    Direction::West,
                    Direction::North,
                    Direction::South,
                ][rng.gen_range(0..4)];
                (k as f64, dir)
            }
        };
        let target = relation.target(&source_pose, &reference_pose, magnitude, direction);
        if !in_bounds(&target, dims) {
            continue;
        }
        let paraphrases = relation.paraphrases();
        let template = rng.gen_range(0..paraphrases.len());
        let text = render(
            paraphrases[template],
            block_name(source),
            block_name(reference),
            magnitude as usize,
            direction,
        );
        return Ok(InstructionExample {
            tokens: tokenize(&text),
            before: scene.clone(),
            source,
            target,
            meta: ExampleMeta {
                template,
                relation,
                reference,
                scene: scene_id,
                magnitude,
                direction,
            },
        });
    }
    Err(DataError::ExampleRetriesExhausted)
}

// ── Corpus generation and split ─────────────────────────────────────────

/// A generated corpus, already split by scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<InstructionExample>,
    pub val: Vec<InstructionExample>,
    pub test: Vec<InstructionExample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generate `scenes * examples_per_scene` instructions and split them by
/// scene: all examples of one scene land in exactly one of train, val, or
/// test, so evaluation scenes are never seen in training. The whole
/// corpus is a pure function of `cfg.seed` and the config.
pub fn generate_corpus(cfg: &Config) -> Result<Corpus, DataError> {
    let relations = parse_relations(cfg)?;
    if !(cfg.train_frac > 0.0
        && cfg.val_frac >= 0.0
        && cfg.train_frac + cfg.val_frac <= 1.0 + 1e-12)
    {
        return Err(DataError::BadSplit {
            train: cfg.train_frac,
            val: cfg.val_frac,
        });
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut per_scene: Vec<Vec<InstructionExample>> = Vec::with_capacity(cfg.scenes);
    for scene_id in 0..cfg.scenes {
        let scene = generate_scene(cfg, &mut rng)?;
        let mut batch = Vec::with_capacity(cfg.examples_per_scene);
        for _ in 0..cfg.examples_per_scene {
            batch.push(generate_example(cfg, &relations, &scene, scene_id, &mut rng)?);
        }
        per_scene.push(batch);
    }
    let mut order: Vec<usize> = (0..cfg.scenes).collect();
    order.shuffle(&mut rng);
    let n_train = ((cfg.scenes as f64) * cfg.train_frac).round() as usize;
    let n_train = n_train.min(cfg.scenes);
    let n_val = ((cfg.scenes as f64) * cfg.val_frac).round() as usize;
    let n_val = n_val.min(cfg.scenes - n_train);
    let mut corpus = Corpus {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (rank, &scene_id) in order.iter().enumerate() {
        let bucket = if rank < n_train {
            &mut corpus.train
        } else if rank < n_train + n_val {
            &mut corpus.val
        } else {
            &mut corpus.test
        };
        bucket.extend(per_scene[scene_id].iter().cloned());
    }
    Ok(corpus)
}

/// Vocabulary over every token that occurs in the given examples.
pub fn corpus_vocabulary<'a>(
    examples: impl IntoIterator<Item = &'a InstructionExample>,
) -> Vocabulary {
    let tokens: Vec<String> = examples
        .into_iter()
        .flat_map(|ex| ex.tokens.iter().cloned())
        .collect();
    Vocabulary::build(tokens.iter().map(|t| t.as_str()))
}

/// Encode a slice of examples against a vocabulary.
pub fn to_samples(examples: &[InstructionExample], vocab: &Vocabulary) -> Vec<Sample> {
    examples.iter().map(|ex| ex.to_sample(vocab)).collect()
}

// ── Text format ─────────────────────────────────────────────────────────
//
// One record per example, line-tagged, floats printed with `{:?}` (the
// shortest digits that parse back to the identical f64):
//
//   example
//   tokens move alpha left .
//   world dims 1 4 4 blocks 3
//   ids 0 0 1 0 ...          (d*h*w entries, layer-major)
//   pose 1 1.5 0.5 0.5 0.0   (one line per block, id then x y z theta)
//   source 1
//   target 0.25 0.5 0.5 0.0
//   meta template 2 relation left reference 1 scene 7 magnitude 1.5 direction none
//   end

/// Render examples in the dataset text format.
pub fn format_dataset(examples: &[InstructionExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str("example\n");
        out.push_str("tokens ");
        out.push_str(&ex.tokens.join(" "));
        out.push('\n');
        let dims = ex.before.dims();
        out.push_str(&format!(
            "world dims {} {} {} blocks {}\n",
            dims.d,
            dims.h,
            dims.w,
            ex.before.num_block_types()
        ));
        out.push_str("ids");
        for id in ex.before.ids() {
            out.push_str(&format!(" {id}"));
        }
        out.push('\n');
        for (id, p) in ex.before.poses() {
            out.push_str(&format!(
                "pose {id} {:?} {:?} {:?} {:?}\n",
                p.x, p.y, p.z, p.theta
            ));
        }
        out.push_str(&format!("source {}\n", ex.source));
        out.push_str(&format!(
            "target {:?} {:?} {:?} {:?}\n",
            ex.target.x, ex.target.y, ex.target.z, ex.target.theta
        ));
        out.push_str(&format!(
            "meta template {} relation {} reference {} scene {} magnitude {:?} direction {}\n",
            ex.meta.template,
            ex.meta.relation.name(),
            ex.meta.reference,
            ex.meta.scene,
            ex.meta.magnitude,
            ex.meta.direction.name()
        ));
        out.push_str("end\n");
    }
    out
}

pub fn write_dataset(path: &Path, examples: &[InstructionExample]) -> Result<(), DataError> {
    std::fs::write(path, format_dataset(examples))?;
    Ok(())
}

struct Lines<'a> {
    // (1-based line number, content) with blank lines dropped.
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Lines { items, pos: 0 }
    }

    fn peek(&self) -> Option<(usize, &'a str)> {
        self.items.get(self.pos).copied()
    }

    fn next_tagged(&mut self, tag: &'static str) -> Result<(usize, &'a str), DataError> {
        match self.peek() {
            Some((line, content)) => {
                let mut parts = content.splitn(2, ' ');
                let head = parts.next().unwrap_or("");
                if head != tag {
                    return Err(DataError::Parse {
                        line,
                        field: tag,
                        detail: format!("expected a \"{tag}\" line, found \"{content}\""),
                    });
                }
                self.pos += 1;
                Ok((line, parts.next().unwrap_or("").trim()))
            }
            None => Err(DataError::Parse {
                line: self.items.last().map(|(l, _)| *l).unwrap_or(0) + 1,
                field: tag,
                detail: "unexpected end of file".to_string(),
            }),
        }
    }
}

fn parse_usize(raw: &str, line: usize, field: &'static str) -> Result<usize, DataError> {
    raw.parse::<usize>().map_err(|e| DataError::Parse {
        line,
        field,
        detail: format!("\"{raw}\": {e}"),
    })
}

fn parse_f64(raw: &str, line: usize, field: &'static str) -> Result<f64, DataError> {
    let value = raw.parse::<f64>().map_err(|e| DataError::Parse {
        line,
        field,
        detail: format!("\"{raw}\": {e}"),
    })?;
    if !value.is_finite() {
        return Err(DataError::Parse {
            line,
            field,
            detail: format!("\"{raw}\": not finite"),
        });
    }
    Ok(value)
}

fn split_fields<'a>(
    rest: &'a str,
    count: usize,
    line: usize,
    field: &'static str,
) -> Result<Vec<&'a str>, DataError> {
    let parts: Vec<&str> = rest.split_whitespace().collect();
    if parts.len() != count {
        return Err(DataError::Parse {
            line,
            field,
            detail: format!("expected {count} fields, found {}", parts.len()),
        });
    }
    Ok(parts)
}

fn parse_example(lines: &mut Lines<'_>) -> Result<InstructionExample, DataError> {
    lines.next_tagged("example")?;

    let (tok_line, tok_rest) = lines.next_tagged("tokens")?;
    let tokens: Vec<String> = tok_rest.split_whitespace().map(|t| t.to_string()).collect();
    if tokens.is_empty() {
        return Err(DataError::Parse {
            line: tok_line,
            field: "tokens",
            detail: "empty token list".to_string(),
        });
    }

    let (world_line, world_rest) = lines.next_tagged("world")?;
    let parts = split_fields(world_rest, 6, world_line, "world")?;
    if parts[0] != "dims" || parts[4] != "blocks" {
        return Err(DataError::Parse {
            line: world_line,
            field: "world",
            detail: format!("expected \"dims D H W blocks K\", found \"{world_rest}\""),
        });
    }
    let d = parse_usize(parts[1], world_line, "world.dims")?;
    let h = parse_usize(parts[2], world_line, "world.dims")?;
    let w = parse_usize(parts[3], world_line, "world.dims")?;
    let blocks = parse_usize(parts[5], world_line, "world.blocks")?;
    let dims = GridDims::new(d, h, w);

    let (ids_line, ids_rest) = lines.next_tagged("ids")?;
    let stored_ids = split_fields(ids_rest, dims.numel(), ids_line, "ids")?
        .iter()
        .map(|raw| parse_usize(raw, ids_line, "ids"))
        .collect::<Result<Vec<usize>, DataError>>()?;

    let mut placements: Vec<(usize, BlockPose)> = Vec::new();
    while matches!(lines.peek(), Some((_, l)) if l.starts_with("pose ")) {
        let (pose_line, rest) = lines.next_tagged("pose")?;
        let parts = split_fields(rest, 5, pose_line, "pose")?;
        let id = parse_usize(parts[0], pose_line, "pose.id")?;
        let x = parse_f64(parts[1], pose_line, "pose.x")?;
        let y = parse_f64(parts[2], pose_line, "pose.y")?;
        let z = parse_f64(parts[3], pose_line, "pose.z")?;
        let theta = parse_f64(parts[4], pose_line, "pose.theta")?;
        placements.push((id, BlockPose { x, y, z, theta }));
    }
    if placements.is_empty() {
        let (line, _) = lines.peek().unwrap_or((0, ""));
        return Err(DataError::Parse {
            line,
            field: "pose",
            detail: "record lists no block poses".to_string(),
        });
    }
    let before = WorldGrid::from_poses(dims, blocks, &placements)?;
    if before.ids() != stored_ids.as_slice() {
        return Err(DataError::Parse {
            line: ids_line,
            field: "ids",
            detail: "id grid does not match the block poses".to_string(),
        });
    }

    let (src_line, src_rest) = lines.next_tagged("source")?;
    let source = parse_usize(src_rest, src_line, "source")?;
    if before.pose(source).is_none() {
        return Err(DataError::Parse {
            line: src_line,
            field: "source",
            detail: format!("block id {source} has no pose in this record"),
        });
    }

    let (tgt_line, tgt_rest) = lines.next_tagged("target")?;
    let parts = split_fields(tgt_rest, 4, tgt_line, "target")?;
    let target = BlockPose {
        x: parse_f64(parts[0], tgt_line, "target.x")?,
        y: parse_f64(parts[1], tgt_line, "target.y")?,
        z: parse_f64(parts[2], tgt_line, "target.z")?,
        theta: parse_f64(parts[3], tgt_line, "target.theta")?,
    };

    let (meta_line, meta_rest) = lines.next_tagged("meta")?;
    let parts = split_fields(meta_rest, 12, meta_line, "meta")?;
    let expect_key = |idx: usize, key: &'static str| -> Result<(), DataError> {
        if parts[idx] != key {
            return Err(DataError::Parse {
                line: meta_line,
                field: "meta",
                detail: format!("expected key \"{key}\", found \"{}\"", parts[idx]),
            });
        }
        Ok(())
    };
    expect_key(0, "template")?;
    expect_key(2, "relation")?;
    expect_key(4, "reference")?;
    expect_key(6, "scene")?;
    expect_key(8, "magnitude")?;
    expect_key(10, "direction")?;
    let template = parse_usize(parts[1], meta_line, "meta.template")?;
    let relation = Relation::from_name(parts[3]).ok_or(DataError::Parse {
        line: meta_line,
        field: "meta.relation",
        detail: format!("unknown relation \"{}\"", parts[3]),
    })?;
    let reference = parse_usize(parts[5], meta_line, "meta.reference")?;
    if before.pose(reference).is_none() {
        return Err(DataError::Parse {
            line: meta_line,
            field: "meta.reference",
            detail: format!("block id {reference} has no pose in this record"),
        });
    }
    let scene = parse_usize(parts[7], meta_line, "meta.scene")?;
    let magnitude = parse_f64(parts[9], meta_line, "meta.magnitude")?;
    let direction = Direction::from_name(parts[11]).ok_or(DataError::Parse {
        line: meta_line,
        field: "meta.direction",
        detail: format!("unknown direction \"{}\"", parts[11]),
    })?;

    lines.next_tagged("end")?;

    Ok(InstructionExample {
        tokens,
        before,
        source,
        target,
        meta: ExampleMeta {
            template,
            relation,
            reference,
            scene,
            magnitude,
            direction,
        },
    })
}

/// Parse a dataset from its text form. Any malformed record aborts the
/// parse with the offending line number and field name.
pub fn parse_dataset(text: &str) -> Result<Vec<InstructionExample>, DataError> {
    let mut lines = Lines::new(text);
    let mut examples = Vec::new();
    while lines.peek().is_some() {
        examples.push(parse_example(&mut lines)?);
    }
    Ok(examples)
}

pub fn read_dataset(path: &Path) -> Result<Vec<InstructionExample>, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text)
}

/// Adapter for records produced by an external pipeline that uses the
/// same field names; currently the formats coincide, so this simply
/// parses them.
pub fn import_records(text: &str) -> Result<Vec<InstructionExample>, DataError> {
    parse_dataset(text)
}

// ── Tests ───────────────────────────────────────────────────────────────
