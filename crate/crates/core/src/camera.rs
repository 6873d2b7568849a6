//! Pinhole cameras and rigid poses.
//!
//! Conventions: OpenCV camera axes (x right, y down, z forward) and
//! world-to-camera poses. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{invalid, CdrError, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics of a camera with the given horizontal field of view and the
    /// principal point at the image center.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self> {
        let f = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if !ok {
            return invalid(format!("bad intrinsics {self:?}"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Rigid world-to-camera transform `x_cam = R x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let p = Pose {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= 1e-9 && (det - 1.0).abs() <= 1e-9) || !self.translation.iter().all(|v| v.is_finite()) {
            return invalid(format!("pose is not a rigid transform (|RtR-I|={ortho:e}, det={det})"));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return invalid("look_at: eye equals target");
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return invalid("look_at: view direction parallel to up");
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let cam_to_world = Matrix3::from_columns(&[x, y, z]);
        let rotation = cam_to_world.transpose();
        Pose::new(rotation, -(rotation * eye))
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis in world coordinates.
    pub fn axis(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Builds a pose from a camera-to-world matrix. Rotations that are
    /// orthonormal only to printing precision are snapped to the nearest
    /// rotation.
    pub fn from_camera_to_world(m: &Matrix4<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(CdrError::Data("non-finite pose matrix".into()));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let t: Vec3 = m.fixed_view::<3, 1>(0, 3).into();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-3 || r.determinant() < 0.0 {
            return Err(CdrError::Data("pose matrix rotation is not orthonormal".into()));
        }
        let svd = r.svd(true, true);
        let r = svd.u.unwrap() * svd.v_t.unwrap();
        let cam_to_world = Pose {
            rotation: r,
            translation: t,
        };
        Ok(cam_to_world.inverse())
    }

    pub fn camera_to_world(&self) -> Matrix4<f64> {
        self.inverse().matrix()
    }

    /// Angle in degrees of the relative rotation between two poses.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    /// Distance between the two camera centers.
    pub fn translation_to(&self, other: &Pose) -> f64 {
        (self.center() - other.center()).norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub in_front: bool,
}

pub fn project(p: &Vec3, k: &Intrinsics, pose: &Pose) -> Projection {
    let pc = pose.transform(p);
    Projection {
        u: k.fx * pc.x / pc.z + k.cx,
        v: k.fy * pc.y / pc.z + k.cy,
        z: pc.z,
        in_front: pc.z > 0.0,
    }
}

pub fn backproject(u: f64, v: f64, d: f64, k: &Intrinsics, pose: &Pose) -> Result<Vec3> {
    if !(d > 0.0) {
        return invalid(format!("backproject: depth must be positive, got {d}"));
    }
    Ok(backproject_unchecked(u, v, d, k, pose))
}

pub(crate) fn backproject_unchecked(u: f64, v: f64, d: f64, k: &Intrinsics, pose: &Pose) -> Vec3 {
    let pc = Vec3::new((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d);
    pose.rotation.transpose() * (pc - pose.translation)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transfer {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

/// Maps a reference pixel through the fronto-parallel plane at depth `d`
/// into view `j`.
pub fn homography_transfer(
    u: f64,
    v: f64,
    d: f64,
    k_ref: &Intrinsics,
    t_ref: &Pose,
    k_j: &Intrinsics,
    t_j: &Pose,
) -> Transfer {
    let p = backproject_unchecked(u, v, d, k_ref, t_ref);
    let q = project(&p, k_j, t_j);
    Transfer {
        u: q.u,
        v: q.v,
        valid: q.in_front && k_j.contains_pixel(q.u, q.v),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frustum {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub d_min: f64,
    pub d_max: f64,
}

impl Frustum {
    pub fn new(intrinsics: Intrinsics, pose: Pose, d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min > 0.0 && d_min < d_max) {
            return invalid(format!("frustum needs 0 < d_min < d_max, got {d_min}, {d_max}"));
        }
        Ok(Frustum {
            intrinsics,
            pose,
            d_min,
            d_max,
        })
    }

    /// The eight frustum corners in world coordinates.
    pub fn corners(&self) -> [Vec3; 8] {
        let k = &self.intrinsics;
        let (w, h) = (k.width as f64, k.height as f64);
        let mut out = [Vec3::zeros(); 8];
        let mut i = 0;
        for d in [self.d_min, self.d_max] {
            for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
                out[i] = backproject_unchecked(u, v, d, k, &self.pose);
                i += 1;
            }
        }
        out
    }
}

pub fn in_frustum(p: &Vec3, f: &Frustum) -> bool {
    let q = project(p, &f.intrinsics, &f.pose);
    q.in_front && f.intrinsics.contains_pixel(q.u, q.v) && q.z >= f.d_min && q.z <= f.d_max
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CdrError::io(path, e))
}

fn parse_floats(text: &str, path: &Path) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CdrError::Data(format!("{}: bad number {t:?}", path.display())))
        })
        .collect()
}

/// Reads a 4x4 row-major camera-to-world matrix.
pub fn read_pose(path: &Path) -> Result<Pose> {
    let vals = parse_floats(&read_text(path)?, path)?;
    if vals.len() != 16 {
        return Err(CdrError::Data(format!("{}: expected 16 numbers, got {}", path.display(), vals.len())));
    }
    Pose::from_camera_to_world(&Matrix4::from_row_slice(&vals))
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<()> {
    let m = pose.camera_to_world();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:e}", m[(r, c)])).collect();
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    std::fs::write(path, s).map_err(|e| CdrError::io(path, e))
}

/// Reads one line `fx fy cx cy width height`.
pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let vals = parse_floats(&read_text(path)?, path)?;
    if vals.len() != 6 || vals[4].fract() != 0.0 || vals[5].fract() != 0.0 || vals[4] < 1.0 || vals[5] < 1.0 {
        return Err(CdrError::Data(format!("{}: expected `fx fy cx cy width height`", path.display())));
    }
    Intrinsics::new(vals[0], vals[1], vals[2], vals[3], vals[4] as u32, vals[5] as u32)
        .map_err(|e| CdrError::Data(format!("{}: {e}", path.display())))
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    let s = format!("{:e} {:e} {:e} {:e} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    std::fs::write(path, s).map_err(|e| CdrError::io(path, e))
}
