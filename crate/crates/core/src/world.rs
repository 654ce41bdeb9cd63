//! Voxel world representation: block poses, the integer id grid, one-hot
//! encoding, attention-map construction, and angle conventions.
//!
//! Axes: `x` runs along width W (west→east), `y` along depth H
//! (south→north), `z` along height D. The voxel at grid index `(i, j, k)`
//! — layer i, row j, column k — has its center at `(k+0.5, j+0.5, i+0.5)`
//! in block-length units. A block is a unit cube centered at its pose, so
//! it occupies exactly the voxel whose center falls inside
//! `[pose − 0.5, pose + 0.5)` on each axis; when two blocks land on one
//! voxel the most recently placed id wins.
//!
//! Yaw is the rotation about the vertical axis, kept in `(−π, π]`.

use std::collections::BTreeMap;
use std::fmt;

use crate::tensor::Tensor;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum WorldError {
    /// Block id outside 1..=K.
    BadBlockId { id: usize, num_block_types: usize },
    /// The same id was placed twice in one scene.
    DuplicateId { id: usize },
    /// A block's voxel falls outside the grid.
    OutOfBounds {
        id: usize,
        pose: (f64, f64, f64),
        dims: (usize, usize, usize),
    },
    /// A block distribution of the wrong length.
    BadDistributionLen { got: usize, want: usize },
    /// Quaternion norm far from 1.
    NonUnitQuaternion { norm: f64 },
    /// Before/after scenes disagree on which blocks exist.
    InventoryMismatch,
    /// No blocks to compare.
    EmptyInventory,
}

impl fmt::Display for WorldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldError::BadBlockId { id, num_block_types } => {
                write!(f, "block id {id} outside 1..={num_block_types}")
            }
            WorldError::DuplicateId { id } => write!(f, "block id {id} placed twice"),
            WorldError::OutOfBounds { id, pose, dims } => write!(
                f,
                "block {id} at ({}, {}, {}) has no voxel inside a {}x{}x{} grid",
                pose.0, pose.1, pose.2, dims.0, dims.1, dims.2
            ),
            WorldError::BadDistributionLen { got, want } => {
                write!(f, "block distribution has {got} entries, world expects {want}")
            }
            WorldError::NonUnitQuaternion { norm } => {
                write!(f, "quaternion norm {norm} is not within 1e-6 of 1")
            }
            WorldError::InventoryMismatch => {
                write!(f, "before/after worlds hold different block inventories")
            }
            WorldError::EmptyInventory => write!(f, "no blocks present"),
        }
    }
}

impl std::error::Error for WorldError {}

// ── Types ───────────────────────────────────────────────────────────────

/// Voxel extents `(D, H, W)`: D height layers, H rows, W columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        GridDims { d, h, w }
    }
    pub fn numel(&self) -> usize {
        self.d * self.h * self.w
    }
    /// Flat index of voxel `(i, j, k)`.
    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.h + j) * self.w + k
    }
    /// World coordinate of the voxel center: `(x, y, z)`.
    pub fn center(&self, i: usize, j: usize, k: usize) -> (f64, f64, f64) {
        (k as f64 + 0.5, j as f64 + 0.5, i as f64 + 0.5)
    }
}

/// Pose of one block: position in block-lengths and yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
}

impl BlockPose {
    pub fn new(x: f64, y: f64, z: f64, theta: f64) -> Self {
        BlockPose {
            x,
            y,
            z,
            theta: normalize_angle(theta),
        }
    }

    /// Center-to-center Euclidean distance, ignoring yaw.
    pub fn distance(&self, other: &BlockPose) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// A voxelized scene: integer ids per voxel (0 = background) plus the
/// continuous pose of every block. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGrid {
    dims: GridDims,
    ids: Vec<usize>,
    poses: BTreeMap<usize, BlockPose>,
    num_block_types: usize,
}

/// Index of the unit interval `[v, v+1)` of voxel centers containing `p`'s
/// occupancy window `[p−0.5, p+0.5)`; may be out of grid bounds.
fn axis_voxel(p: f64) -> isize {
    p.ceil() as isize - 1
}

impl WorldGrid {
    /// Voxelize `placements` in order; later blocks overwrite earlier ones
    /// on shared voxels. Every block must resolve to an in-bounds voxel
    /// and ids must be unique and within `1..=num_block_types`.
    pub fn from_poses(
        dims: GridDims,
        num_block_types: usize,
        placements: &[(usize, BlockPose)],
    ) -> Result<Self, WorldError> {
        let mut ids = vec![0usize; dims.numel()];
        let mut poses = BTreeMap::new();
        for &(id, pose) in placements {
            if id == 0 || id > num_block_types {
                return Err(WorldError::BadBlockId {
                    id,
                    num_block_types,
                });
            }
            if poses.insert(id, pose).is_some() {
                return Err(WorldError::DuplicateId { id });
            }
            let (i, j, k) = (axis_voxel(pose.z), axis_voxel(pose.y), axis_voxel(pose.x));
            if i < 0
                || i >= dims.d as isize
                || j < 0
                || j >= dims.h as isize
                || k < 0
                || k >= dims.w as isize
            {
                return Err(WorldError::OutOfBounds {
                    id,
                    pose: (pose.x, pose.y, pose.z),
                    dims: (dims.d, dims.h, dims.w),
                });
            }
            ids[dims.flat(i as usize, j as usize, k as usize)] = id;
        }
        Ok(WorldGrid {
            dims,
            ids,
            poses,
            num_block_types,
        })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }
    pub fn num_block_types(&self) -> usize {
        self.num_block_types
    }
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
    pub fn poses(&self) -> &BTreeMap<usize, BlockPose> {
        &self.poses
    }
    pub fn pose(&self, id: usize) -> Option<&BlockPose> {
        self.poses.get(&id)
    }

    /// Ids whose voxel was fully overwritten by a later placement; the
    /// scene generator rejects scenes where this is nonempty.
    pub fn hidden_blocks(&self) -> Vec<usize> {
        self.poses
            .keys()
            .copied()
            .filter(|id| !self.ids.contains(id))
            .collect()
    }

    /// One-hot encoding `[D, H, W, K+1]`; channel 0 is background and
    /// channel `c ≥ 1` is 1 exactly where the id grid holds `c`.
    pub fn one_hot(&self) -> Tensor<f64> {
        let k1 = self.num_block_types + 1;
        let mut data = vec![0.0; self.dims.numel() * k1];
        for (v, &id) in self.ids.iter().enumerate() {
            data[v * k1 + id] = 1.0;
        }
        Tensor::new(
            vec![self.dims.d, self.dims.h, self.dims.w, k1],
            data,
        )
        .expect("shape matches data")
    }

    /// Attention map `A[i,j,k] = 10 · d_a[id − 1]` at block voxels, 0 at
    /// background: the model may not attend to empty space.
    pub fn attention_map(&self, d_a: &[f64]) -> Result<Tensor<f64>, WorldError> {
        if d_a.len() != self.num_block_types {
            return Err(WorldError::BadDistributionLen {
                got: d_a.len(),
                want: self.num_block_types,
            });
        }
        let data = self
            .ids
            .iter()
            .map(|&id| if id == 0 { 0.0 } else { 10.0 * d_a[id - 1] })
            .collect();
        Tensor::new(vec![self.dims.d, self.dims.h, self.dims.w], data)
            .map_err(|_| WorldError::EmptyInventory)
    }
}

// ── Angles ──────────────────────────────────────────────────────────────

/// Wrap an angle into `(−π, π]`. Values already inside pass through
/// unchanged (bit-exact), so the function is idempotent; the lower
/// boundary maps to the half-open side: `−π → π`.
pub fn normalize_angle(theta: f64) -> f64 {
    if theta > -std::f64::consts::PI && theta <= std::f64::consts::PI {
        return theta;
    }
    let pi = std::f64::consts::PI;
    pi - (pi - theta).rem_euclid(2.0 * pi)
}

/// Extract the yaw (rotation about the vertical axis, `Y` in the source
/// engine's basis) from a unit quaternion `(w, x, y, z)` by rotating the
/// unit x-axis and reading the heading of its horizontal image.
pub fn yaw_from_quaternion(q: (f64, f64, f64, f64)) -> Result<f64, WorldError> {
    let (w, x, y, z) = q;
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(WorldError::NonUnitQuaternion { norm });
    }
    // Image of (1, 0, 0) under the rotation; for a y-up engine basis the
    // horizontal plane is (x, −z).
    let vx = 1.0 - 2.0 * (y * y + z * z);
    let vz = 2.0 * (x * z - w * y);
    Ok(normalize_angle((-vz).atan2(vx)))
}

/// Build the quaternion for a pure yaw rotation (vertical axis, y-up
/// engine basis); inverse of [`yaw_from_quaternion`] for yaw-only inputs.
pub fn quaternion_from_yaw(theta: f64) -> (f64, f64, f64, f64) {
    let half = theta / 2.0;
    (half.cos(), 0.0, half.sin(), 0.0)
}

// ── Before/after comparison ─────────────────────────────────────────────

/// Id of the block that moved the furthest between two scenes with the
/// same inventory; exact ties resolve to the lowest id.
pub fn moved_furthest(before: &WorldGrid, after: &WorldGrid) -> Result<usize, WorldError> {
    if before.poses.is_empty() {
        return Err(WorldError::EmptyInventory);
    }
    if before.poses.len() != after.poses.len()
        || !before.poses.keys().all(|id| after.poses.contains_key(id))
    {
        return Err(WorldError::InventoryMismatch);
    }
    let mut best_id = 0;
    let mut best_dist = -1.0;
    for (&id, pose) in &before.poses {
        let dist = pose.distance(&after.poses[&id]);
        if dist > best_dist {
            best_dist = dist;
            best_id = id;
        }
    }
    Ok(best_id)
}
