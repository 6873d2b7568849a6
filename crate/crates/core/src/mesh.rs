//! Marching cubes, label transfer and PLY IO.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use cdr_tensor::Coord;

use crate::camera::Vec3;
use crate::error::{CdrError, Result};
use crate::mc_table::TRIANGLES;
use crate::synth::class_color;
use crate::volume::GridSpec;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Per-vertex class ids; empty for unlabeled meshes.
    pub labels: Vec<u32>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: &[u32; 3]) -> f64 {
        let [a, b, c] = f.map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    pub fn area(&self) -> f64 {
        self.faces.iter().map(|f| self.face_area(f)).sum()
    }

    /// Undirected edge -> number of incident faces.
    pub fn edge_counts(&self) -> BTreeMap<(u32, u32), usize> {
        let mut m = BTreeMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// True when every edge borders exactly two faces.
    pub fn is_closed(&self) -> bool {
        self.edge_counts().values().all(|&n| n == 2)
    }

    /// V - E + F over the vertices referenced by faces.
    pub fn euler_characteristic(&self) -> i64 {
        let used: BTreeSet<u32> = self.faces.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_counts().len() as i64 + self.faces.len() as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McOptions {
    pub iso: f64,
    /// Skip cells with an absent corner instead of treating it as +1.
    pub skip_absent: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            iso: 0.0,
            skip_absent: false,
        }
    }
}

const CORNERS: [Coord; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

const MIN_AREA: f64 = 1e-12;

fn add(a: &Coord, b: &Coord) -> Coord {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Extracts the `iso` level set of a sparse TSDF whose voxel centers are the
/// cube corners. Cells are visited in sorted order so the output does not
/// depend on how `tsdf` was filled.
pub fn marching_cubes(tsdf: &BTreeMap<Coord, f64>, spec: &GridSpec, opts: &McOptions) -> Mesh {
    let mut cells = BTreeSet::new();
    for c in tsdf.keys() {
        for o in &CORNERS {
            cells.insert([c[0] - o[0], c[1] - o[1], c[2] - o[2]]);
        }
    }
    let mut mesh = Mesh::default();
    let mut vertex_ids: HashMap<(Coord, Coord), u32> = HashMap::new();
    for base in &cells {
        let mut vals = [0.0; 8];
        let mut complete = true;
        for (i, o) in CORNERS.iter().enumerate() {
            match tsdf.get(&add(base, o)) {
                Some(v) => vals[i] = *v,
                None => {
                    complete = false;
                    vals[i] = 1.0;
                }
            }
        }
        if opts.skip_absent && !complete {
            continue;
        }
        let mut index = 0usize;
        for (i, v) in vals.iter().enumerate() {
            if *v < opts.iso {
                index |= 1 << i;
            }
        }
        if index == 0 || index == 255 {
            continue;
        }
        let row = &TRIANGLES[index];
        for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
            let mut ids = [0u32; 3];
            for (slot, &e) in ids.iter_mut().zip(tri) {
                let (a, b) = EDGES[e as usize];
                let (ca, cb) = (add(base, &CORNERS[a]), add(base, &CORNERS[b]));
                let (va, vb) = (vals[a], vals[b]);
                let t = (opts.iso - va) / (vb - va);
                let key = if t <= 0.0 {
                    (ca, ca)
                } else if t >= 1.0 {
                    (cb, cb)
                } else if ca < cb {
                    (ca, cb)
                } else {
                    (cb, ca)
                };
                *slot = *vertex_ids.entry(key).or_insert_with(|| {
                    let (pa, pb) = (spec.center(&ca), spec.center(&cb));
                    mesh.vertices.push(pa + (pb - pa) * t.clamp(0.0, 1.0));
                    (mesh.vertices.len() - 1) as u32
                });
            }
            if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] && mesh.face_area(&ids) > MIN_AREA {
                mesh.faces.push(ids);
            }
        }
    }
    mesh
}

/// Gives each vertex the label of the nearest labeled voxel center within two
/// voxels, or class 0 when there is none.
pub fn transfer_labels(mesh: &mut Mesh, labels: &BTreeMap<Coord, u32>, spec: &GridSpec) {
    let reach = 2.0 * spec.voxel_size;
    mesh.labels = mesh
        .vertices
        .iter()
        .map(|p| {
            let c = spec.voxel_of(p);
            let mut best: Option<(f64, Coord, u32)> = None;
            for dx in -2..=2 {
                for dy in -2..=2 {
                    for dz in -2..=2 {
                        let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                        let Some(&l) = labels.get(&q) else { continue };
                        let d = (spec.center(&q) - p).norm();
                        if d > reach + 1e-12 {
                            continue;
                        }
                        if best.is_none_or(|(bd, bq, _)| d < bd || (d == bd && q < bq)) {
                            best = Some((d, q, l));
                        }
                    }
                }
            }
            best.map_or(0, |b| b.2)
        })
        .collect();
}

pub fn to_ply(mesh: &Mesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", mesh.vertices.len()).unwrap();
    for p in ["x", "y", "z"] {
        writeln!(s, "property float {p}").unwrap();
    }
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nproperty ushort label\n");
    writeln!(s, "element face {}", mesh.faces.len()).unwrap();
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        let label = mesh.labels.get(i).copied().unwrap_or(0);
        let rgb = class_color(label).map(|c| (c * 255.0).round() as u8);
        writeln!(
            s,
            "{} {} {} {} {} {} {label}",
            v.x as f32, v.y as f32, v.z as f32, rgb[0], rgb[1], rgb[2]
        )
        .unwrap();
    }
    for f in &mesh.faces {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}

pub fn write_ply(path: &Path, mesh: &Mesh) -> Result<()> {
    std::fs::write(path, to_ply(mesh)).map_err(|e| CdrError::io(path, e))
}

/// Parses an ASCII PLY with at least `x y z` vertex properties. Polygons are
/// fan-triangulated; a `label` vertex property is read when present.
pub fn parse_ply(text: &str) -> Result<Mesh> {
    let bad = |m: &str| CdrError::Data(format!("ply: {m}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut n_vert = None;
    let mut n_face = 0usize;
    let mut vprops: Vec<String> = Vec::new();
    let mut current = "";
    loop {
        let line = lines.next().ok_or_else(|| bad("unterminated header"))?.trim();
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] if *fmt != "ascii" => return Err(bad("only ascii is supported")),
            ["element", "vertex", n] => {
                n_vert = Some(n.parse::<usize>().map_err(|_| bad("vertex count"))?);
                current = "vertex";
            }
            ["element", "face", n] => {
                n_face = n.parse::<usize>().map_err(|_| bad("face count"))?;
                current = "face";
            }
            ["element", ..] => current = "other",
            ["property", .., name] if current == "vertex" => vprops.push(name.to_string()),
            _ => {}
        }
    }
    let n_vert = n_vert.ok_or_else(|| bad("no vertex element"))?;
    let pos = |name: &str| vprops.iter().position(|p| p == name);
    let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("vertices need x, y, z")),
    };
    let il = pos("label");
    let mut mesh = Mesh::default();
    for _ in 0..n_vert {
        let line = lines.next().ok_or_else(|| bad("truncated vertices"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad("vertex value")))
            .collect::<Result<_>>()?;
        if vals.len() < vprops.len() {
            return Err(bad("short vertex line"));
        }
        mesh.vertices.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
        if let Some(il) = il {
            mesh.labels.push(vals[il] as u32);
        }
    }
    for _ in 0..n_face {
        let line = lines.next().ok_or_else(|| bad("truncated faces"))?;
        let idx: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| bad("face index")))
            .collect::<Result<_>>()?;
        let n = *idx.first().ok_or_else(|| bad("empty face line"))? as usize;
        if idx.len() != n + 1 || n < 3 {
            return Err(bad("face list length"));
        }
        if idx[1..].iter().any(|&i| i as usize >= n_vert) {
            return Err(bad("face index out of range"));
        }
        for k in 1..n - 1 {
            mesh.faces.push([idx[1], idx[k + 1], idx[k + 2]]);
        }
    }
    Ok(mesh)
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| CdrError::io(path, e))?;
    parse_ply(&text).map_err(|e| CdrError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_spec() -> GridSpec {
        GridSpec::new(2, 1.0, Vec3::repeat(-0.5)).unwrap()
    }

    #[test]
    fn positive_volume_has_no_surface() {
        let vol: BTreeMap<Coord, f64> = (0..3).map(|i| ([i, 0, 0], 0.5)).collect();
        assert!(marching_cubes(&vol, &unit_spec(), &McOptions::default()).is_empty());
    }

    #[test]
    fn one_negative_corner_gives_one_triangle() {
        let mut vol = BTreeMap::new();
        for o in &CORNERS {
            vol.insert(*o, 1.0);
        }
        vol.insert([0, 0, 0], -1.0);
        let opts = McOptions {
            skip_absent: true,
            ..Default::default()
        };
        let mesh = marching_cubes(&vol, &unit_spec(), &opts);
        assert_eq!(mesh.faces.len(), 1);
        assert_eq!(mesh.vertices.len(), 3);
        for v in &mesh.vertices {
            // midpoints of the three edges at the origin corner
            assert!((v.iter().filter(|c| (**c - 0.5).abs() < 1e-12).count()) == 1);
        }
    }

    #[test]
    fn uniform_labels_transfer() {
        let spec = unit_spec();
        let mut mesh = Mesh {
            vertices: vec![Vec3::new(0.3, 0.2, 0.1), Vec3::new(40.0, 0.0, 0.0)],
            faces: vec![],
            labels: vec![],
        };
        let labels: BTreeMap<Coord, u32> = (0..4).map(|i| ([i, 0, 0], 3)).collect();
        transfer_labels(&mut mesh, &labels, &spec);
        assert_eq!(mesh.labels, vec![3, 0]);
    }

    #[test]
    fn ply_round_trip() {
        let mesh = Mesh {
            vertices: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.5, -0.25)],
            faces: vec![[0, 1, 2]],
            labels: vec![1, 2, 4],
        };
        let back = parse_ply(&to_ply(&mesh)).unwrap();
        assert_eq!(back, mesh);
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }

    #[test]
    fn quads_are_triangulated() {
        let text = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n\
                    element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                    0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = parse_ply(text).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!((m.area() - 1.0).abs() < 1e-12);
    }
}
