//! Stage grids, fragment bounding volumes and the persistent global volume.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::rc::Rc;

use cdr_tensor::{Coord, CoordSet, GatherMap, SparseTensor3D, Tape, Tensor};

use crate::camera::{in_frustum, Frustum, Vec3};
use crate::error::{invalid, CdrError, Result};

pub const STAGES: [u8; 3] = [4, 3, 2];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub stage: u8,
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl GridSpec {
    /// Grid of stage `s` whose voxels are `finest * 2^(s-2)` wide.
    pub fn new(stage: u8, finest: f64, origin: Vec3) -> Result<Self> {
        if !(2..=4).contains(&stage) || !(finest > 0.0) {
            return invalid(format!("bad grid: stage {stage}, finest voxel {finest}"));
        }
        Ok(GridSpec {
            stage,
            voxel_size: finest * f64::from(1u32 << (stage - 2)),
            origin,
        })
    }

    pub fn center(&self, c: &Coord) -> Vec3 {
        self.origin + Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * self.voxel_size
    }

    /// Continuous grid coordinates in which voxel `c` has its center at `c`.
    pub fn to_grid(&self, p: &Vec3) -> [f64; 3] {
        let q = (p - self.origin) / self.voxel_size;
        [q.x - 0.5, q.y - 0.5, q.z - 0.5]
    }

    pub fn voxel_of(&self, p: &Vec3) -> Coord {
        let q = (p - self.origin) / self.voxel_size;
        [q.x.floor() as i32, q.y.floor() as i32, q.z.floor() as i32]
    }
}

pub fn parent(c: &Coord) -> Coord {
    [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)]
}

pub fn children(c: &Coord) -> [Coord; 8] {
    let mut out = [[0; 3]; 8];
    for (i, o) in out.iter_mut().enumerate() {
        *o = [
            2 * c[0] + (i >> 2) as i32,
            2 * c[1] + ((i >> 1) & 1) as i32,
            2 * c[2] + (i & 1) as i32,
        ];
    }
    out
}

/// All voxels within Chebyshev distance `r` of the input set.
pub fn dilate(coords: impl IntoIterator<Item = Coord>, r: i32) -> BTreeSet<Coord> {
    let mut out = BTreeSet::new();
    for c in coords {
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    out.insert([c[0] + dx, c[1] + dy, c[2] + dz]);
                }
            }
        }
    }
    out
}

/// Axis-aligned cube used to bound fragment volumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtentBox {
    pub center: Vec3,
    pub side: f64,
}

/// Voxels of `spec` whose centers lie inside at least one frustum (and
/// inside `extent`, if given). Sorted.
pub fn build_fbv(frusta: &[Frustum], spec: &GridSpec, extent: Option<&ExtentBox>) -> Result<CoordSet> {
    if frusta.is_empty() {
        return Err(CdrError::EmptyFragment("no views".into()));
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for f in frusta {
        for c in f.corners() {
            lo = lo.inf(&c);
            hi = hi.sup(&c);
        }
    }
    if let Some(e) = extent {
        let h = Vec3::repeat(e.side / 2.0);
        lo = lo.sup(&(e.center - h));
        hi = hi.inf(&(e.center + h));
    }
    let inside_box = |p: &Vec3| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
    let a = spec.voxel_of(&lo);
    let b = spec.voxel_of(&hi);
    let mut out = Vec::new();
    for x in a[0]..=b[0] {
        for y in a[1]..=b[1] {
            for z in a[2]..=b[2] {
                let c = [x, y, z];
                let p = spec.center(&c);
                if inside_box(&p) && frusta.iter().any(|f| in_frustum(&p, f)) {
                    out.push(c);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(CdrError::EmptyFragment(format!("no stage-{} voxel inside any frustum", spec.stage)));
    }
    Ok(CoordSet::new(out)?)
}

/// Children of `coarse` that belong to `allowed`, sorted, with a map
/// gathering each child's parent row.
pub fn upsample_map(coarse: &CoordSet, allowed: &CoordSet) -> (CoordSet, GatherMap) {
    let mut pairs: Vec<(Coord, usize)> = Vec::new();
    for (row, c) in coarse.iter().enumerate() {
        for ch in children(c) {
            if allowed.contains(&ch) {
                pairs.push((ch, row));
            }
        }
    }
    pairs.sort_unstable();
    let set = CoordSet::new(pairs.iter().map(|p| p.0).collect()).expect("children of unique parents are unique");
    let map = GatherMap::select(coarse.len(), pairs.iter().map(|p| Some(p.1)));
    (set, map)
}

/// Nearest-neighbour upsampling onto the next finer stage, clipped to `allowed`.
pub fn upsample2x(tape: &mut Tape, coarse: &SparseTensor3D, allowed: &CoordSet) -> Result<SparseTensor3D> {
    if coarse.stage <= 2 {
        return invalid("upsample2x: stage 2 is the finest");
    }
    let (set, map) = upsample_map(&coarse.coords, allowed);
    let values = tape.gather(coarse.values, Rc::new(map))?;
    Ok(SparseTensor3D::new(tape, Rc::new(set), values, coarse.stage - 1)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelState {
    pub tsdf: f64,
    pub occupancy: f64,
    /// `None` for voxels filled in from a coarser stage.
    pub label: Option<u32>,
    pub hidden: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalVolume {
    stages: BTreeMap<u8, BTreeMap<Coord, VoxelState>>,
}

impl GlobalVolume {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage(&self, s: u8) -> Option<&BTreeMap<Coord, VoxelState>> {
        self.stages.get(&s)
    }

    pub fn len(&self, s: u8) -> usize {
        self.stages.get(&s).map_or(0, |m| m.len())
    }

    pub fn is_empty(&self) -> bool {
        self.stages.values().all(|m| m.is_empty())
    }

    pub fn get(&self, s: u8, c: &Coord) -> Option<&VoxelState> {
        self.stages.get(&s)?.get(c)
    }

    /// Hidden state on `coords`; absent voxels read as zeros.
    pub fn mask_hidden(&self, s: u8, coords: &CoordSet, channels: usize) -> Tensor {
        let mut t = Tensor::zeros(&[coords.len(), channels]);
        if let Some(m) = self.stages.get(&s) {
            let data = t.data_mut();
            for (row, c) in coords.iter().enumerate() {
                if let Some(h) = m.get(c).and_then(|v| v.hidden.as_ref()) {
                    if h.len() == channels {
                        data[row * channels..(row + 1) * channels].copy_from_slice(h);
                    }
                }
            }
        }
        t
    }

    /// Overwrites the given voxels; all others stay untouched.
    pub fn fuse(&mut self, s: u8, updates: impl IntoIterator<Item = (Coord, VoxelState)>) {
        let m = self.stages.entry(s).or_default();
        for (c, v) in updates {
            m.insert(c, v);
        }
    }

    /// Text dump, one `s x y z tsdf occ label` line per voxel (label -1 when
    /// unknown), stages from coarse to fine.
    pub fn dump(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (s, m) in self.stages.iter().rev() {
            for (c, v) in m {
                let label = v.label.map_or(-1, |l| l as i64);
                writeln!(w, "{s} {} {} {} {:.6} {:.6} {label}", c[0], c[1], c[2], v.tsdf, v.occupancy)?;
            }
        }
        Ok(())
    }
}
