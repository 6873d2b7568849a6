//! Training targets from ground-truth depth and label maps.

use std::collections::BTreeMap;

use cdr_tensor::{Coord, CoordSet};

use crate::camera::{project, Frustum};
use crate::error::{invalid, Result};
use crate::synth::NO_LABEL;
use crate::volume::GridSpec;

/// Ground-truth depth (m, 0 = invalid) and labels of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub label: Vec<u8>,
}

impl FrameTruth {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, label: Vec<u8>) -> Result<Self> {
        if depth.len() != width * height || label.len() != width * height {
            return invalid("frame truth: map sizes differ from the image size");
        }
        Ok(FrameTruth { width, height, depth, label })
    }

    fn pixel(&self, s: u8, i: usize, j: usize) -> usize {
        let f = 1usize << s;
        let (x, y) = (i * f + f / 2, j * f + f / 2);
        y.min(self.height - 1) * self.width + x.min(self.width - 1)
    }

    /// Depth sampled at the center pixel of each stage-`s` cell.
    pub fn depth_at_stage(&self, s: u8) -> Vec<f64> {
        let (rows, cols) = (self.height >> s, self.width >> s);
        (0..rows * cols).map(|c| self.depth[self.pixel(s, c % cols, c / cols)]).collect()
    }

    /// Labels at the center pixel of each stage-`s` cell; `None` when unlabeled.
    pub fn labels_at_stage(&self, s: u8, num_classes: usize) -> Vec<Option<usize>> {
        let (rows, cols) = (self.height >> s, self.width >> s);
        (0..rows * cols)
            .map(|c| {
                let l = self.label[self.pixel(s, c % cols, c / cols)];
                (l != NO_LABEL && (l as usize) < num_classes).then_some(l as usize)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthVoxel {
    pub tsdf: f64,
    pub occupied: bool,
    pub label: Option<u32>,
}

/// Projective TSDF fusion of the ground-truth depth maps over `coords`:
/// each view that sees a voxel in front of (or less than one truncation
/// behind) its surface contributes `clamp((d - z) / trunc, -1, 1)`; labels are
/// voted by views where the voxel lies inside the band. Unobserved voxels are
/// left out.
pub fn fuse_truth(
    coords: &CoordSet,
    grid: &GridSpec,
    frusta: &[Frustum],
    frames: &[FrameTruth],
    truncation: f64,
    num_classes: usize,
) -> Result<BTreeMap<Coord, TruthVoxel>> {
    if frusta.len() != frames.len() {
        return invalid("fuse_truth: one truth frame per view required");
    }
    let mut out = BTreeMap::new();
    let mut votes = vec![0u32; num_classes];
    for c in coords.iter() {
        let p = grid.center(c);
        let mut sum = 0.0;
        let mut n = 0u32;
        votes.iter_mut().for_each(|v| *v = 0);
        for (f, t) in frusta.iter().zip(frames) {
            let q = project(&p, &f.intrinsics, &f.pose);
            if !q.in_front || !f.intrinsics.contains_pixel(q.u, q.v) {
                continue;
            }
            let idx = (q.v.floor() as usize).min(t.height - 1) * t.width + (q.u.floor() as usize).min(t.width - 1);
            let d = t.depth[idx];
            if !(d > 0.0) {
                continue;
            }
            let sdf = d - q.z;
            if sdf < -truncation {
                continue;
            }
            sum += (sdf / truncation).clamp(-1.0, 1.0);
            n += 1;
            let l = t.label[idx] as usize;
            if sdf.abs() < truncation && l < num_classes {
                votes[l] += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let tsdf = sum / f64::from(n);
        let best = (0..num_classes).fold(None, |b: Option<usize>, k| match b {
            Some(b) if votes[b] >= votes[k] => Some(b),
            _ if votes[k] > 0 => Some(k),
            _ => b,
        });
        out.insert(
            *c,
            TruthVoxel {
                tsdf,
                occupied: tsdf.abs() < 1.0,
                label: best.map(|b| b as u32),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose, Vec3};

    #[test]
    fn wall_in_front_of_camera() {
        let k = Intrinsics::new(16.0, 16.0, 16.0, 16.0, 32, 32).unwrap();
        let f = Frustum::new(k, Pose::identity(), 0.1, 5.0).unwrap();
        let t = FrameTruth::new(32, 32, vec![1.0; 1024], vec![2; 1024]).unwrap();
        let g = GridSpec::new(2, 0.1, Vec3::new(-0.05, -0.05, 0.0)).unwrap();
        let coords = CoordSet::new(vec![[0, 0, 5], [0, 0, 9], [0, 0, 10], [0, 0, 12], [0, 0, 14]]).unwrap();
        let v = fuse_truth(&coords, &g, &[f], &[t], 0.3, 5).unwrap();
        assert_eq!(v[&[0, 0, 5]].tsdf, 1.0);
        assert!(!v[&[0, 0, 5]].occupied && v[&[0, 0, 5]].label.is_none());
        // center at z = 0.95 and 1.05
        assert!((v[&[0, 0, 9]].tsdf - 0.05 / 0.3).abs() < 1e-12);
        assert!((v[&[0, 0, 10]].tsdf + 0.05 / 0.3).abs() < 1e-12);
        assert_eq!(v[&[0, 0, 10]].label, Some(2));
        assert!((v[&[0, 0, 12]].tsdf + 0.25 / 0.3).abs() < 1e-12);
        assert!(!v.contains_key(&[0, 0, 14]));
    }

    #[test]
    fn stage_sampling() {
        let depth: Vec<f64> = (0..64).map(f64::from).collect();
        let t = FrameTruth::new(8, 8, depth, vec![NO_LABEL; 64]).unwrap();
        assert_eq!(t.depth_at_stage(2), vec![18.0, 22.0, 50.0, 54.0]);
        assert!(t.labels_at_stage(2, 5).iter().all(Option::is_none));
    }
}
