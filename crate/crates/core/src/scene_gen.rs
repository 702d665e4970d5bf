//! Analytic tabletop scenes: ray-cast depth and mask of a single primitive,
//! plus fingertip annotations from a canned power-grasp template.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affordance_net::{FingerAnnotation, FINGER_COUNT};
use crate::error::{Error, Result};
use crate::geometry::{arr, look_at, rpy_matrix, v, RigidTransform, Vec3};
use crate::scene_lifting::{CameraIntrinsics, PointCloud};
use crate::tensorkit::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
    Box { size: Vec3 },
    Capsule { radius: f64, length: f64 },
}

impl Primitive {
    fn dims(&self) -> Vec<f64> {
        match *self {
            Primitive::Cylinder { radius, height } => vec![radius, height],
            Primitive::Sphere { radius } => vec![radius],
            Primitive::Box { size } => size.to_vec(),
            Primitive::Capsule { radius, length } => vec![radius, length],
        }
    }

    /// Half extents of the object-frame bounding box.
    fn half_extents(&self) -> Vec3 {
        match *self {
            Primitive::Cylinder { radius, height } => [radius, radius, height / 2.0],
            Primitive::Sphere { radius } => [radius; 3],
            Primitive::Box { size } => size.map(|s| s / 2.0),
            Primitive::Capsule { radius, length } => [radius, radius, length / 2.0 + radius],
        }
    }

    /// First hit `t > 0` of `o + t d` (object frame) and the outward normal.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let mut best: Option<(f64, Vector3<f64>)> = None;
        let mut consider = |t: f64, n: Vector3<f64>| {
            if t > 1e-12 && best.as_ref().is_none_or(|b| t < b.0) {
                best = Some((t, n));
            }
        };
        match *self {
            Primitive::Sphere { radius } => {
                for t in sphere_hits(o, d, &Vector3::zeros(), radius) {
                    consider(t, (o + d * t) / radius);
                }
            }
            Primitive::Cylinder { radius, height } => {
                let h = height / 2.0;
                for t in side_hits(o, d, radius) {
                    let p = o + d * t;
                    if p.z.abs() <= h {
                        consider(t, Vector3::new(p.x / radius, p.y / radius, 0.0));
                    }
                }
                for s in [-1.0, 1.0] {
                    if d.z != 0.0 {
                        let t = (s * h - o.z) / d.z;
                        let p = o + d * t;
                        if p.x * p.x + p.y * p.y <= radius * radius {
                            consider(t, Vector3::new(0.0, 0.0, s));
                        }
                    }
                }
            }
            Primitive::Capsule { radius, length } => {
                let h = length / 2.0;
                for t in side_hits(o, d, radius) {
                    let p = o + d * t;
                    if p.z.abs() <= h {
                        consider(t, Vector3::new(p.x / radius, p.y / radius, 0.0));
                    }
                }
                for s in [-1.0, 1.0] {
                    let c = Vector3::new(0.0, 0.0, s * h);
                    for t in sphere_hits(o, d, &c, radius) {
                        let p = o + d * t;
                        if s * p.z >= h {
                            consider(t, (p - c) / radius);
                        }
                    }
                }
            }
            Primitive::Box { size } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 0.0;
                for a in 0..3 {
                    let half = size[a] / 2.0;
                    if d[a] == 0.0 {
                        if o[a].abs() > half {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((-half - o[a]) / d[a], (half - o[a]) / d[a]);
                    let mut s = -1.0;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        s = 1.0;
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis = a;
                        sign = s;
                    }
                    t1 = t1.min(tb);
                }
                if t0 <= t1 && t0 > 1e-12 {
                    let mut n = Vector3::zeros();
                    n[axis] = sign;
                    consider(t0, n);
                }
            }
        }
        best
    }
}

fn sphere_hits(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Vec<f64> {
    let oc = o - c;
    quadratic(d.dot(d), 2.0 * oc.dot(d), oc.dot(&oc) - r * r)
}

fn side_hits(o: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Vec<f64> {
    let a = d.x * d.x + d.y * d.y;
    if a == 0.0 {
        return Vec::new();
    }
    quadratic(a, 2.0 * (o.x * d.x + o.y * d.y), o.x * o.x + o.y * o.y - r * r)
}

/// Real roots of `a t^2 + b t + c`, computed without cancellation.
fn quadratic(a: f64, b: f64, c: f64) -> Vec<f64> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return Vec::new();
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return vec![0.0];
    }
    vec![q / a, c / q]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub xyz: Vec3,
    #[serde(default)]
    pub rpy: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: Vec3,
    pub target: Vec3,
    #[serde(default = "default_up")]
    pub up: Vec3,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_focal")]
    pub fx: f64,
    #[serde(default = "default_focal")]
    pub fy: f64,
}

fn default_up() -> Vec3 {
    [0.0, 0.0, 1.0]
}
fn default_width() -> usize {
    640
}
fn default_height() -> usize {
    320
}
fn default_focal() -> f64 {
    380.0
}

impl CameraSpec {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitive: Primitive,
    pub pose: Pose,
    pub camera: CameraSpec,
    #[serde(default)]
    pub depth_noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Height of the supporting table plane; `None` renders no table.
    #[serde(default = "default_table")]
    pub table_z: Option<f64>,
}

fn default_table() -> Option<f64> {
    Some(0.0)
}

/// Rendered scene. Depth is z-depth in meters, zero where nothing is hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub depth: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub intrinsics: CameraIntrinsics,
    pub camera_to_world: RigidTransform,
    /// Noiseless object surface points in the camera frame, one per mask pixel.
    pub gt_cloud: PointCloud,
    pub gt_normals: Vec<Vec3>,
}

struct Frames {
    cam: RigidTransform,
    obj_r: Matrix3<f64>,
    obj_t: Vector3<f64>,
}

impl Frames {
    fn new(spec: &SceneSpec) -> Result<Self> {
        Ok(Frames {
            cam: look_at(spec.camera.eye, spec.camera.target, spec.camera.up)?,
            obj_r: rpy_matrix(spec.pose.rpy),
            obj_t: v(spec.pose.xyz),
        })
    }

    /// Camera-frame ray -> object-frame ray.
    fn to_object(&self, o_cam: &Vector3<f64>, d_cam: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let rc = self.cam.matrix();
        let o_w = rc * o_cam + v(self.cam.translation);
        let d_w = rc * d_cam;
        let rt = self.obj_r.transpose();
        (rt * (o_w - self.obj_t), rt * d_w)
    }

    fn normal_to_camera(&self, n_obj: &Vector3<f64>) -> Vector3<f64> {
        self.cam.matrix().transpose() * (self.obj_r * n_obj)
    }

    fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.cam.matrix().transpose() * (p - v(self.cam.translation))
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitive.dims().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::invalid("primitive dimensions must be positive"));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return Err(Error::invalid("depth noise must be finite and non-negative"));
        }
        self.camera.intrinsics().validate()?;
        let f = Frames::new(self)?;
        let k = self.camera.intrinsics();
        let he = self.primitive.half_extents();
        for corner in 0..8 {
            let local = Vector3::new(
                if corner & 1 == 0 { -he[0] } else { he[0] },
                if corner & 2 == 0 { -he[1] } else { he[1] },
                if corner & 4 == 0 { -he[2] } else { he[2] },
            );
            let p = f.world_to_camera(&(f.obj_r * local + f.obj_t));
            let inside = p.z > 0.0 && {
                let col = k.fx * p.x / p.z + k.cx;
                let row = k.fy * p.y / p.z + k.cy;
                (0.0..=(k.width - 1) as f64).contains(&col) && (0.0..=(k.height - 1) as f64).contains(&row)
            };
            if !inside {
                return Err(Error::invalid("object is not fully inside the camera frustum"));
            }
        }
        Ok(())
    }
}

pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let f = Frames::new(spec)?;
    let k = spec.camera.intrinsics();
    let (h, w) = (k.height, k.width);
    let rows: Vec<Vec<(f64, bool, Vec3, Vec3)>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let d_cam = v(k.ray(row as f64, col as f64));
                    let (o, d) = f.to_object(&Vector3::zeros(), &d_cam);
                    let table = spec.table_z.and_then(|z| {
                        let rc = f.cam.matrix();
                        let dz = (rc * d_cam).z;
                        let t = (z - f.cam.translation[2]) / dz;
                        (dz != 0.0 && t > 0.0).then_some(t)
                    });
                    match spec.primitive.intersect(&o, &d) {
                        Some((t, n)) if table.is_none_or(|tt| t <= tt) => {
                            let p = d_cam * t;
                            (t, true, arr(&p), arr(&f.normal_to_camera(&n)))
                        }
                        _ => (table.unwrap_or(0.0), false, [0.0; 3], [0.0; 3]),
                    }
                })
                .collect()
        })
        .collect();
    let mut depth = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    let mut normals = Vec::new();
    for (r, line) in rows.into_iter().enumerate() {
        for (c, (t, hit, p, n)) in line.into_iter().enumerate() {
            depth.push(t);
            mask.push(if hit { 1.0 } else { 0.0 });
            if hit {
                points.push(p);
                pixels.push([r, c]);
                normals.push(n);
            }
        }
    }
    if spec.depth_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for d in depth.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            if *d > 0.0 {
                *d = (*d + spec.depth_noise * e).max(1e-6);
            }
        }
    }
    Ok(Scene {
        depth: Tensor::new(vec![h, w], depth)?,
        mask: Tensor::new(vec![h, w], mask)?,
        intrinsics: k,
        camera_to_world: f.cam,
        gt_cloud: PointCloud {
            points,
            pixels: Some(pixels),
        },
        gt_normals: normals,
    })
}

/// Azimuth (rad, relative to the direction toward the camera) and height
/// offset (m, relative to the object centre) of each fingertip contact.
pub const GRASP_TEMPLATE: [(f64, f64); FINGER_COUNT] = [
    (-70.0, 0.016),
    (70.0, 0.024),
    (70.0, 0.008),
    (70.0, -0.008),
    (70.0, -0.024),
];

/// Fingertip contacts of the template grasp, world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspContact {
    pub finger: usize,
    pub point: Vec3,
    pub normal: Vec3,
}

/// World-frame template contacts on the primitive surface.
pub fn template_contacts(spec: &SceneSpec) -> Result<Vec<GraspContact>> {
    spec.validate()?;
    let upright = spec.pose.rpy[0].abs() < 1e-9 && spec.pose.rpy[1].abs() < 1e-9;
    if !upright && !matches!(spec.primitive, Primitive::Sphere { .. }) {
        return Err(Error::invalid("grasp template needs an upright primitive"));
    }
    let f = Frames::new(spec)?;
    let centre = f.obj_t;
    let to_cam = v(spec.camera.eye) - centre;
    let horiz = Vector3::new(to_cam.x, to_cam.y, 0.0);
    if horiz.norm() < 1e-9 {
        return Err(Error::invalid("grasp template needs a camera off the object's vertical axis"));
    }
    let horiz = horiz.normalize();
    let reach = spec.primitive.half_extents().iter().map(|x| x * x).sum::<f64>().sqrt() * 4.0;
    let rt = f.obj_r.transpose();
    GRASP_TEMPLATE
        .iter()
        .enumerate()
        .map(|(finger, &(az, dz))| {
            let (s, c) = az.to_radians().sin_cos();
            let dir = Vector3::new(c * horiz.x - s * horiz.y, s * horiz.x + c * horiz.y, 0.0);
            let start = centre + Vector3::new(0.0, 0.0, dz) + dir * reach;
            let (o, d) = (rt * (start - f.obj_t), rt * (-dir));
            let (t, n) = spec
                .primitive
                .intersect(&o, &d)
                .ok_or_else(|| Error::invalid(format!("template ray for finger {finger} misses the object")))?;
            Ok(GraspContact {
                finger,
                point: arr(&(start - dir * t)),
                normal: arr(&(f.obj_r * n)),
            })
        })
        .collect()
}

/// Sub-pixel image annotations of the template contacts. Each contact must
/// be the visible surface along its camera ray.
pub fn annotate_grasp(spec: &SceneSpec) -> Result<Vec<FingerAnnotation>> {
    let contacts = template_contacts(spec)?;
    let f = Frames::new(spec)?;
    let k = spec.camera.intrinsics();
    contacts
        .iter()
        .map(|c| {
            let p = f.world_to_camera(&v(c.point));
            if p.z <= 0.0 {
                return Err(Error::invalid(format!("finger {} contact is behind the camera", c.finger)));
            }
            let row = k.fy * p.y / p.z + k.cy;
            let col = k.fx * p.x / p.z + k.cx;
            let (o, d) = f.to_object(&Vector3::zeros(), &v(k.ray(row, col)));
            let visible = spec
                .primitive
                .intersect(&o, &d)
                .is_some_and(|(t, _)| (t - p.z).abs() < 1e-6);
            let inside = (0.0..=(k.height - 1) as f64).contains(&row) && (0.0..=(k.width - 1) as f64).contains(&col);
            if !visible || !inside {
                return Err(Error::invalid(format!("finger {} contact is not visible", c.finger)));
            }
            Ok(FingerAnnotation {
                id: c.finger,
                row,
                col,
            })
        })
        .collect()
}
