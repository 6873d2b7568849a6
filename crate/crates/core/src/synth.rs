//! Procedural rooms with analytic signed distance, labels and rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cdr_tensor::Coord;
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Intrinsics, Pose, Vec3};
use crate::error::{invalid, CdrError, Result};
use crate::volume::GridSpec;

pub const NUM_CLASSES: usize = 5;
pub const FLOOR: u32 = 0;
pub const WALL: u32 = 1;
pub const CEILING: u32 = 2;
pub const FURNITURE: u32 = 3;
pub const OBJECT: u32 = 4;
/// Label value for pixels without a surface.
pub const NO_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Box with half extents, rotated about the world z axis by `yaw` radians.
    Box { half: Vec3, yaw: f64 },
    Sphere { radius: f64 },
    /// Half space; positive on the side `normal` points to.
    Plane { normal: Vec3 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub class: u32,
}

impl Primitive {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let q = p - self.center;
        match self.shape {
            Shape::Sphere { radius } => q.norm() - radius,
            Shape::Plane { normal } => q.dot(&normal),
            Shape::Box { half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let local = Vec3::new(c * q.x + s * q.y, -s * q.x + c * q.y, q.z);
                let d = local.abs() - half;
                let outside = d.sup(&Vec3::zeros()).norm();
                let inside = d.max().min(0.0);
                outside + inside
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub num_classes: usize,
    pub texture_seed: u64,
}

impl Scene {
    /// Empty room: floor, four walls and a ceiling.
    pub fn room(bounds_min: Vec3, bounds_max: Vec3) -> Result<Self> {
        if (0..3).any(|a| bounds_max[a] <= bounds_min[a]) {
            return invalid("room bounds are empty");
        }
        let plane = |center: Vec3, normal: Vec3, class| Primitive {
            shape: Shape::Plane { normal },
            center,
            class,
        };
        let (lo, hi) = (bounds_min, bounds_max);
        let primitives = vec![
            plane(lo, Vec3::z(), FLOOR),
            plane(hi, -Vec3::z(), CEILING),
            plane(lo, Vec3::x(), WALL),
            plane(hi, -Vec3::x(), WALL),
            plane(lo, Vec3::y(), WALL),
            plane(hi, -Vec3::y(), WALL),
        ];
        Ok(Scene {
            primitives,
            bounds_min,
            bounds_max,
            num_classes: NUM_CLASSES,
            texture_seed: 0,
        })
    }

    /// A room of the given size with a few boxes and spheres on the floor.
    pub fn random(seed: u64, size: Vec3) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = Vec3::new(-size.x / 2.0, -size.y / 2.0, 0.0);
        let hi = Vec3::new(size.x / 2.0, size.y / 2.0, size.z);
        let mut scene = Scene::room(lo, hi)?;
        scene.texture_seed = seed;
        let spread_x = size.x * 0.18;
        let spread_y = size.y * 0.18;
        for _ in 0..rng.gen_range(1..=3) {
            let half = Vec3::new(rng.gen_range(0.12..0.28), rng.gen_range(0.12..0.28), rng.gen_range(0.12..0.35));
            let center = Vec3::new(rng.gen_range(-spread_x..spread_x), rng.gen_range(-spread_y..spread_y), half.z);
            scene.primitives.push(Primitive {
                shape: Shape::Box {
                    half,
                    yaw: rng.gen_range(0.0..std::f64::consts::PI),
                },
                center,
                class: FURNITURE,
            });
        }
        for _ in 0..rng.gen_range(1..=2) {
            let radius = rng.gen_range(0.1..0.22);
            let center = Vec3::new(rng.gen_range(-spread_x..spread_x), rng.gen_range(-spread_y..spread_y), radius);
            scene.primitives.push(Primitive {
                shape: Shape::Sphere { radius },
                center,
                class: OBJECT,
            });
        }
        Ok(scene)
    }

    /// Mean of the object centers, or the room center for an empty room.
    pub fn centroid(&self) -> Vec3 {
        let objects: Vec<&Primitive> = self
            .primitives
            .iter()
            .filter(|p| !matches!(p.shape, Shape::Plane { .. }))
            .collect();
        if objects.is_empty() {
            return (self.bounds_min + self.bounds_max) / 2.0;
        }
        objects.iter().map(|p| p.center).sum::<Vec3>() / objects.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (a, b) = (self.bounds_min, self.bounds_max);
        writeln!(s, "room {} {} {} {} {} {}", a.x, a.y, a.z, b.x, b.y, b.z).unwrap();
        writeln!(s, "classes {}", self.num_classes).unwrap();
        writeln!(s, "texture {}", self.texture_seed).unwrap();
        for p in &self.primitives {
            let c = p.center;
            match p.shape {
                Shape::Box { half, yaw } => writeln!(
                    s,
                    "box {} {} {} {} {} {} {} {}",
                    c.x, c.y, c.z, half.x, half.y, half.z, yaw, p.class
                ),
                Shape::Sphere { radius } => writeln!(s, "sphere {} {} {} {} {}", c.x, c.y, c.z, radius, p.class),
                Shape::Plane { normal: n } => {
                    writeln!(s, "plane {} {} {} {} {} {} {}", c.x, c.y, c.z, n.x, n.y, n.z, p.class)
                }
            }
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| CdrError::Data(format!("bad scene line {line:?}"));
        let mut scene = Scene {
            primitives: Vec::new(),
            bounds_min: Vec3::zeros(),
            bounds_max: Vec3::zeros(),
            num_classes: NUM_CLASSES,
            texture_seed: 0,
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut it = line.split_whitespace();
            let kind = it.next().unwrap();
            let nums: Vec<f64> = it.map(|t| t.parse::<f64>().map_err(|_| bad(line))).collect::<Result<_>>()?;
            let v = |i: usize| Vec3::new(nums[i], nums[i + 1], nums[i + 2]);
            let class = |i: usize| -> Result<u32> {
                let c = nums[i];
                if c < 0.0 || c.fract() != 0.0 {
                    return Err(bad(line));
                }
                Ok(c as u32)
            };
            match (kind, nums.len()) {
                ("room", 6) => {
                    scene.bounds_min = v(0);
                    scene.bounds_max = v(3);
                }
                ("classes", 1) => scene.num_classes = nums[0] as usize,
                ("texture", 1) => scene.texture_seed = nums[0] as u64,
                ("box", 8) => scene.primitives.push(Primitive {
                    shape: Shape::Box { half: v(3), yaw: nums[6] },
                    center: v(0),
                    class: class(7)?,
                }),
                ("sphere", 5) => scene.primitives.push(Primitive {
                    shape: Shape::Sphere { radius: nums[3] },
                    center: v(0),
                    class: class(4)?,
                }),
                ("plane", 7) => scene.primitives.push(Primitive {
                    shape: Shape::Plane { normal: v(3) },
                    center: v(0),
                    class: class(6)?,
                }),
                _ => return Err(bad(line)),
            }
        }
        Ok(scene)
    }
}

/// Signed distance and class of the closest primitive; ties go to the
/// smallest class id.
pub fn scene_sdf(scene: &Scene, p: &Vec3) -> (f64, u32) {
    let mut best = (f64::INFINITY, u32::MAX);
    for prim in &scene.primitives {
        let d = prim.sdf(p);
        if d < best.0 || (d == best.0 && prim.class < best.1) {
            best = (d, prim.class);
        }
    }
    best
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: &Vec3, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let t = p - f;
    let s = t.map(|v| v * v * (3.0 - 2.0 * v));
    let (x, y, z) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1);
        let w = if dx == 1 { s.x } else { 1.0 - s.x }
            * if dy == 1 { s.y } else { 1.0 - s.y }
            * if dz == 1 { s.z } else { 1.0 - s.z };
        acc += w * hash3(x + dx, y + dy, z + dz, seed);
    }
    acc
}

/// Multi-octave world-space texture in [0, 1].
pub fn texture(p: &Vec3, seed: u64) -> f64 {
    let mut sum = 0.0;
    let mut amp = 0.5;
    let mut freq = 6.0;
    let mut norm = 0.0;
    for octave in 0..3 {
        sum += amp * value_noise(&(p * freq), seed.wrapping_add(octave));
        norm += amp;
        amp *= 0.5;
        freq *= 2.3;
    }
    sum / norm
}

pub fn class_color(class: u32) -> [f64; 3] {
    match class {
        FLOOR => [0.55, 0.43, 0.30],
        WALL => [0.80, 0.78, 0.72],
        CEILING => [0.90, 0.90, 0.95],
        FURNITURE => [0.62, 0.25, 0.20],
        OBJECT => [0.22, 0.38, 0.70],
        _ => [0.5, 0.5, 0.5],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB bytes.
    pub rgb: Vec<u8>,
    /// Depth along the optical axis in meters, 0 where invalid.
    pub depth: Vec<f64>,
    pub label: Vec<u8>,
}

const MAX_STEPS: usize = 1000;
const HIT_EPS: f64 = 1e-7;

/// Sphere-traces one pixel ray; returns the ray parameter and class of the hit.
fn trace(scene: &Scene, origin: &Vec3, dir: &Vec3, max_t: f64) -> Option<(f64, u32)> {
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        let (d, class) = scene_sdf(scene, &(origin + dir * t));
        if d.abs() < HIT_EPS {
            return Some((t, class));
        }
        t += d;
        if t > max_t || t < 0.0 {
            return None;
        }
    }
    None
}

pub fn render_view(scene: &Scene, k: &Intrinsics, pose: &Pose) -> RenderedView {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut out = RenderedView {
        width: k.width,
        height: k.height,
        rgb: vec![0; w * h * 3],
        depth: vec![0.0; w * h],
        label: vec![NO_LABEL; w * h],
    };
    let origin = pose.center();
    let rt = pose.rotation.transpose();
    let max_t = (scene.bounds_max - scene.bounds_min).norm() * 4.0 + 10.0;
    for v in 0..h {
        for u in 0..w {
            let ray_cam = Vec3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
            let dir = (rt * ray_cam).normalize();
            let Some((t, class)) = trace(scene, &origin, &dir, max_t) else { continue };
            let hit = origin + dir * t;
            let i = v * w + u;
            out.depth[i] = t / ray_cam.norm();
            out.label[i] = class as u8;
            let shade = 0.45 + 0.65 * texture(&hit, scene.texture_seed);
            let base = class_color(class);
            for c in 0..3 {
                out.rgb[i * 3 + c] = (base[c] * shade * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtVoxel {
    pub tsdf: f64,
    pub occupied: bool,
    pub label: u32,
}

/// Analytic TSDF of every voxel in the scene bounds (plus a margin of
/// `truncation`). Voxels at +1 with no neighbour inside the band are left out.
pub fn gt_volume(scene: &Scene, spec: &GridSpec, truncation: f64) -> BTreeMap<Coord, GtVoxel> {
    let margin = Vec3::repeat(truncation);
    let a = spec.voxel_of(&(scene.bounds_min - margin));
    let b = spec.voxel_of(&(scene.bounds_max + margin));
    let mut dense = BTreeMap::new();
    for x in a[0]..=b[0] {
        for y in a[1]..=b[1] {
            for z in a[2]..=b[2] {
                let c = [x, y, z];
                let (d, label) = scene_sdf(scene, &spec.center(&c));
                let tsdf = (d / truncation).clamp(-1.0, 1.0);
                dense.insert(
                    c,
                    GtVoxel {
                        tsdf,
                        occupied: tsdf.abs() < 1.0,
                        label,
                    },
                );
            }
        }
    }
    let near_band = |c: &Coord| {
        cdr_tensor::kernel_offsets()
            .iter()
            .any(|o| dense.get(&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]).is_some_and(|v| v.occupied))
    };
    dense
        .iter()
        .filter(|(c, v)| v.tsdf < 1.0 || near_band(c))
        .map(|(c, v)| (*c, *v))
        .collect()
}

/// `n` poses on a horizontal circle around `target`, all looking at it.
pub fn orbit_trajectory(target: Vec3, n: usize, radius: f64, height: f64, start_deg: f64) -> Result<Vec<Pose>> {
    if n == 0 || !(radius > 0.0) {
        return invalid("orbit needs n > 0 and radius > 0");
    }
    (0..n)
        .map(|i| {
            let a = start_deg.to_radians() + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = Vec3::new(target.x + radius * a.cos(), target.y + radius * a.sin(), height);
            Pose::look_at(eye, target, Vec3::z())
        })
        .collect()
}

/// Relative rotation angle between consecutive orbit poses in degrees.
pub fn orbit_step_angle(poses: &[Pose]) -> Vec<f64> {
    poses.windows(2).map(|w| w[1].rotation_angle_to(&w[0])).collect()
}

/// Rotation about world z; handy for building rigs in tests.
pub fn yaw_matrix(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, scene.to_text()).map_err(|e| CdrError::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| CdrError::io(path, e))?;
    Scene::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_scene() -> Scene {
        Scene {
            primitives: vec![Primitive {
                shape: Shape::Sphere { radius: 0.5 },
                center: Vec3::zeros(),
                class: OBJECT,
            }],
            bounds_min: Vec3::repeat(-1.0),
            bounds_max: Vec3::repeat(1.0),
            num_classes: NUM_CLASSES,
            texture_seed: 0,
        }
    }

    #[test]
    fn sphere_distance() {
        assert_eq!(scene_sdf(&sphere_scene(), &Vec3::new(1.0, 0.0, 0.0)), (0.5, OBJECT));
    }

    #[test]
    fn box_face_has_zero_distance() {
        let b = Primitive {
            shape: Shape::Box {
                half: Vec3::new(0.2, 0.3, 0.4),
                yaw: 0.7,
            },
            center: Vec3::new(0.1, 0.0, 0.4),
            class: FURNITURE,
        };
        // top face center
        assert!(b.sdf(&Vec3::new(0.1, 0.0, 0.8)).abs() < 1e-15);
        assert!((b.sdf(&Vec3::new(0.1, 0.0, 1.0)) - 0.2).abs() < 1e-12);
        assert!((b.sdf(&Vec3::new(0.1, 0.0, 0.4)) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_smaller_class() {
        let mut s = Scene::room(Vec3::repeat(-1.0), Vec3::repeat(1.0)).unwrap();
        s.primitives.reverse();
        // equidistant from the floor and the x walls
        assert_eq!(scene_sdf(&s, &Vec3::new(0.0, 0.0, -1.0 + 1.0)), (1.0, FLOOR));
        assert_eq!(scene_sdf(&s, &Vec3::new(-0.5, 0.0, -0.5)), (0.5, FLOOR));
    }

    #[test]
    fn wall_at_two_meters() {
        let scene = Scene::room(Vec3::new(-3.0, -3.0, -3.0), Vec3::new(3.0, 3.0, 2.0)).unwrap();
        let k = Intrinsics::from_fov(33, 21, 60.0).unwrap();
        let pose = Pose::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), Vec3::y()).unwrap();
        let view = render_view(&scene, &k, &pose);
        let center = (10 * 33 + 16) as usize;
        assert!((view.depth[center] - 2.0).abs() < 1e-4);
        assert_eq!(view.label[center] as u32, CEILING);
    }

    #[test]
    fn escaping_rays_are_invalid() {
        let k = Intrinsics::from_fov(8, 8, 60.0).unwrap();
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 4.0), Vec3::y()).unwrap();
        let view = render_view(&sphere_scene(), &k, &pose);
        assert!(view.depth.iter().all(|d| *d == 0.0));
        assert!(view.label.iter().all(|l| *l == NO_LABEL));
    }

    #[test]
    fn orbit_of_four() {
        let poses = orbit_trajectory(Vec3::zeros(), 4, 1.0, 0.0, 0.0).unwrap();
        let centers: Vec<Vec3> = poses.iter().map(|p| p.center()).collect();
        let expect = [Vec3::x(), Vec3::y(), -Vec3::x(), -Vec3::y()];
        for (c, e) in centers.iter().zip(expect) {
            assert!((c - e).norm() < 1e-12);
        }
        for a in orbit_step_angle(&poses) {
            assert!((a - 90.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gt_volume_surface_voxel() {
        let spec = GridSpec::new(2, 0.1, Vec3::repeat(-0.05)).unwrap();
        let vol = gt_volume(&sphere_scene(), &spec, 0.3);
        // voxel 5 has its center at x = 0.5, on the sphere
        let v = vol[&[5, 0, 0]];
        assert!(v.tsdf.abs() < 1e-12 && v.occupied);
        assert_eq!(vol[&[0, 0, 0]].tsdf, -1.0);
        assert!(!vol.contains_key(&[11, 11, 11]));
    }

    #[test]
    fn scene_text_round_trips() {
        let s = Scene::random(3, Vec3::new(2.4, 2.4, 1.6)).unwrap();
        assert_eq!(Scene::from_text(&s.to_text()).unwrap(), s);
        assert!(Scene::from_text("box 1 2").is_err());
    }
}
