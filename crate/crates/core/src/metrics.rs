//! Mesh accuracy/completeness metrics, mIoU, throughput and η₃D.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Vec3;
use crate::error::{CdrError, Result};
use crate::mesh::Mesh;

/// Frame rate above which a pipeline counts as real-time.
pub const REALTIME_FPS: f64 = 90.17;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

pub fn fscore(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Static 3D k-d tree over a point set.
pub struct KdTree {
    points: Vec<Vec3>,
    // implicit tree: node = (index into points, split axis) laid out by recursion
    nodes: Vec<(usize, u8)>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        Self::build(points, &mut idx, 0, &mut nodes);
        KdTree {
            points: points.to_vec(),
            nodes,
        }
    }

    fn build(points: &[Vec3], idx: &mut [usize], depth: usize, nodes: &mut Vec<(usize, u8)>) {
        if idx.is_empty() {
            return;
        }
        let axis = (depth % 3) as u8;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |a, b| {
            points[*a][axis as usize].total_cmp(&points[*b][axis as usize]).then(a.cmp(b))
        });
        nodes.push((idx[mid], axis));
        let (left, right) = idx.split_at_mut(mid);
        Self::build(points, left, depth + 1, nodes);
        Self::build(points, &mut right[1..], depth + 1, nodes);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the nearest point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.nodes.len(), q, &mut best);
        (best.0 != usize::MAX).then(|| (best.0, best.1.sqrt()))
    }

    fn search(&self, start: usize, len: usize, q: &Vec3, best: &mut (usize, f64)) {
        if len == 0 {
            return;
        }
        let mid = len / 2;
        let (pi, axis) = self.nodes[start];
        let p = &self.points[pi];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && pi < best.0) {
            *best = (pi, d2);
        }
        let diff = q[axis as usize] - p[axis as usize];
        let (near, far) = if diff < 0.0 {
            ((start + 1, mid), (start + 1 + mid, len - mid - 1))
        } else {
            ((start + 1 + mid, len - mid - 1), (start + 1, mid))
        };
        self.search(near.0, near.1, q, best);
        if diff * diff <= best.1 {
            self.search(far.0, far.1, q, best);
        }
    }
}

/// `n` points drawn uniformly by area from the mesh surface.
pub fn sample_surface(mesh: &Mesh, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        total += mesh.face_area(f);
        cum.push(total);
    }
    if total <= 0.0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let fi = cum.partition_point(|c| *c <= r).min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.faces[fi].map(|i| mesh.vertices[i as usize]);
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let su = u.sqrt();
            a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
        })
        .collect()
}

fn one_way(from: &[Vec3], to: &KdTree, tau: f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut hits = 0usize;
    for p in from {
        let d = to.nearest(p).map_or(f64::INFINITY, |x| x.1);
        sum += d;
        if d < tau {
            hits += 1;
        }
    }
    (sum / from.len() as f64, hits as f64 / from.len() as f64)
}

/// Metrics between two point samples.
pub fn point_metrics(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<MeshMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(CdrError::EmptyMesh);
    }
    let (accuracy, precision) = one_way(pred, &KdTree::new(gt), tau);
    let (completeness, recall) = one_way(gt, &KdTree::new(pred), tau);
    Ok(MeshMetrics {
        accuracy,
        completeness,
        precision,
        recall,
        fscore: fscore(precision, recall),
    })
}

/// Samples both surfaces with a seeded sampler and compares the samples.
pub fn mesh_metrics(pred: &Mesh, gt: &Mesh, tau: f64, n_samples: usize, seed: u64) -> Result<MeshMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(CdrError::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = sample_surface(pred, n_samples, &mut rng);
    let gs = sample_surface(gt, n_samples, &mut rng);
    point_metrics(&ps, &gs, tau)
}

/// Row = ground truth, column = prediction.
pub fn confusion_matrix(pred: &[u32], gt: &[u32], n_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (p, g) in pred.iter().zip(gt) {
        if (*p as usize) < n_classes && (*g as usize) < n_classes {
            m[*g as usize][*p as usize] += 1;
        }
    }
    m
}

/// Mean IoU over the classes that occur in the ground truth.
pub fn miou(pred: &[u32], gt: &[u32], n_classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(CdrError::InvalidArgument(format!(
            "miou: {} predictions vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    Ok(miou_from_confusion(&confusion_matrix(pred, gt, n_classes)))
}

pub fn miou_from_confusion(m: &[Vec<u64>]) -> f64 {
    let n = m.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..n {
        let gt_total: u64 = m[c].iter().sum();
        if gt_total == 0 {
            continue;
        }
        let tp = m[c][c];
        let fp: u64 = (0..n).filter(|r| *r != c).map(|r| m[r][c]).sum();
        let fn_ = gt_total - tp;
        sum += tp as f64 / (tp + fp + fn_) as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Labels of predicted vertices paired with the nearest ground-truth vertex
/// within `tau`; unmatched vertices are left out.
pub fn match_vertex_labels(pred: &Mesh, gt: &Mesh, tau: f64) -> (Vec<u32>, Vec<u32>) {
    let tree = KdTree::new(&gt.vertices);
    let mut p = Vec::new();
    let mut g = Vec::new();
    if pred.labels.len() != pred.vertices.len() || gt.labels.len() != gt.vertices.len() {
        return (p, g);
    }
    for (v, l) in pred.vertices.iter().zip(&pred.labels) {
        if let Some((i, d)) = tree.nearest(v) {
            if d <= tau {
                p.push(*l);
                g.push(gt.labels[i]);
            }
        }
    }
    (p, g)
}

pub fn vertex_miou(pred: &Mesh, gt: &Mesh, tau: f64, n_classes: usize) -> f64 {
    let (p, g) = match_vertex_labels(pred, gt, tau);
    miou(&p, &g, n_classes).unwrap_or(0.0)
}

/// Majority vertex label of every voxel of size `voxel` (ties go to the
/// smaller class).
fn voxel_labels(mesh: &Mesh, voxel: f64) -> BTreeMap<[i64; 3], u32> {
    let mut votes: BTreeMap<[i64; 3], BTreeMap<u32, usize>> = BTreeMap::new();
    for (v, l) in mesh.vertices.iter().zip(&mesh.labels) {
        let key = [(v.x / voxel).floor() as i64, (v.y / voxel).floor() as i64, (v.z / voxel).floor() as i64];
        *votes.entry(key).or_default().entry(*l).or_default() += 1;
    }
    votes
        .into_iter()
        .map(|(k, m)| {
            let best = m.iter().fold((0u32, 0usize), |b, (l, n)| if *n > b.1 { (*l, *n) } else { b });
            (k, best.0)
        })
        .collect()
}

/// mIoU over voxels that carry labelled vertices of both meshes.
pub fn voxel_miou(pred: &Mesh, gt: &Mesh, voxel: f64, n_classes: usize) -> f64 {
    if pred.labels.len() != pred.vertices.len() || gt.labels.len() != gt.vertices.len() {
        return 0.0;
    }
    let (p, g) = (voxel_labels(pred, voxel), voxel_labels(gt, voxel));
    let (pl, gl): (Vec<u32>, Vec<u32>) = p.iter().filter_map(|(k, l)| g.get(k).map(|m| (*l, *m))).unzip();
    miou(&pl, &gl, n_classes).unwrap_or(0.0)
}

pub fn eta3d(fps: f64, miou: f64, fscore: f64) -> f64 {
    fps * miou * fscore
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerceptionEfficiency {
    pub fps: f64,
    pub miou: f64,
    pub fscore: f64,
    pub eta3d: f64,
    pub realtime: bool,
}

impl PerceptionEfficiency {
    pub fn new(fps: f64, miou: f64, fscore: f64) -> Self {
        PerceptionEfficiency {
            fps,
            miou,
            fscore,
            eta3d: eta3d(fps, miou, fscore),
            realtime: fps >= REALTIME_FPS,
        }
    }
}

/// Frame bookkeeping of one timed pipeline run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Throughput {
    /// Every captured frame of the sequence, key frame or not.
    pub frames: usize,
    pub keyframes: usize,
    pub fragments: usize,
    pub seconds: f64,
}

impl Throughput {
    pub fn fps(&self) -> f64 {
        self.frames as f64 / self.seconds
    }

    pub fn kfps(&self) -> f64 {
        self.keyframes as f64 / self.seconds
    }
}

impl MeshMetrics {
    pub fn to_key_values(&self) -> String {
        format!(
            "accuracy={:.6}\ncompleteness={:.6}\nprecision={:.6}\nrecall={:.6}\nfscore={:.6}\n",
            self.accuracy, self.completeness, self.precision, self.recall, self.fscore
        )
    }

    pub const CSV_HEADER: &'static str = "scene,accuracy,completeness,precision,recall,fscore,miou";

    pub fn csv_row(&self, scene: &str, miou: f64) -> String {
        format!(
            "{scene},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy, self.completeness, self.precision, self.recall, self.fscore, miou
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(z: f64) -> Mesh {
        Mesh {
            vertices: vec![
                Vec3::new(0.0, 0.0, z),
                Vec3::new(1.0, 0.0, z),
                Vec3::new(1.0, 1.0, z),
                Vec3::new(0.0, 1.0, z),
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
            labels: vec![1, 1, 2, 2],
        }
    }

    #[test]
    fn identical_meshes_score_perfectly() {
        let m = mesh_metrics(&square(0.0), &square(0.0), 0.05, 2000, 1).unwrap();
        assert!(m.precision == 1.0 && m.recall == 1.0 && m.fscore == 1.0);
        let p = point_metrics(&square(0.0).vertices, &square(0.0).vertices, 0.05).unwrap();
        assert_eq!((p.accuracy, p.completeness), (0.0, 0.0));
    }

    #[test]
    fn shifted_plane_scores_zero() {
        let m = mesh_metrics(&square(0.1), &square(0.0), 0.05, 500, 2).unwrap();
        assert_eq!((m.precision, m.recall, m.fscore), (0.0, 0.0, 0.0));
        assert!(m.accuracy >= 0.1 - 1e-12 && m.accuracy < 0.15);
    }

    #[test]
    fn empty_mesh_is_rejected() {
        assert!(matches!(
            mesh_metrics(&Mesh::default(), &square(0.0), 0.05, 10, 0),
            Err(CdrError::EmptyMesh)
        ));
    }

    #[test]
    fn two_class_confusion() {
        // [[2,1],[1,2]]
        let gt = [0, 0, 0, 1, 1, 1];
        let pred = [0, 0, 1, 0, 1, 1];
        assert!((miou(&pred, &gt, 2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(miou(&gt, &gt, 4).unwrap(), 1.0);
        assert!(miou(&gt[..2], &gt, 2).is_err());
    }

    #[test]
    fn published_efficiency_triplets() {
        assert!((eta3d(158.0, 0.391, 0.612) - 37.81).abs() < 0.05);
        assert!((eta3d(66.3, 0.340, 0.499) - 11.25).abs() < 0.05);
        assert!((eta3d(228.0, 0.279, 0.516) - 32.82).abs() < 0.05);
        assert!(PerceptionEfficiency::new(158.0, 0.391, 0.612).realtime);
        assert!(!PerceptionEfficiency::new(66.3, 0.340, 0.499).realtime);
    }

    #[test]
    fn throughput_counts() {
        let t = Throughput {
            frames: 300,
            keyframes: 45,
            fragments: 5,
            seconds: 2.0,
        };
        assert_eq!(t.fps(), 150.0);
        assert_eq!(t.kfps(), 22.5);
    }
}
