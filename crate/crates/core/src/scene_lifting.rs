//! Depth + mask back-projection, per-finger contact selection and normals.

use serde::{Deserialize, Serialize};

use crate::affordance_net::Peak;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::io::PlyCloud;
use crate::tensorkit::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image extents must be positive"));
        }
        let inside = (0.0..=self.width as f64).contains(&self.cx) && (0.0..=self.height as f64).contains(&self.cy);
        if !inside {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    /// Camera-frame ray through a pixel, scaled to unit depth.
    pub fn ray(&self, row: f64, col: f64) -> Vec3 {
        [(col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0]
    }
}

/// Points in the camera frame (+z forward), optionally tagged with the pixel
/// `(row, col)` they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub pixels: Option<Vec<[usize; 2]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_ply(&self, normals: Option<Vec<Vec3>>) -> PlyCloud {
        PlyCloud {
            points: self.points.clone(),
            normals,
        }
    }

    pub fn from_ply(ply: PlyCloud) -> Result<Self> {
        if ply.points.iter().any(|p| !(p[2] > 0.0)) {
            return Err(Error::invalid("cloud points must lie in front of the camera"));
        }
        Ok(PointCloud {
            points: ply.points,
            pixels: None,
        })
    }
}

fn image_dims<S: Element>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match *t.dims() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!("{what} must be a rank-2 image, got {:?}", t.dims()))),
    }
}

/// Lifts every masked pixel with positive depth; the mask is thresholded at 0.5.
pub fn back_project<S: Element, M: Element>(
    depth: &Tensor<S>,
    mask: &Tensor<M>,
    k: &CameraIntrinsics,
) -> Result<PointCloud> {
    k.validate()?;
    let (h, w) = image_dims(depth, "depth")?;
    if image_dims(mask, "mask")? != (h, w) || (h, w) != (k.height, k.width) {
        return Err(Error::shape(format!(
            "depth {:?}, mask {:?} and intrinsics {}x{} disagree",
            depth.dims(),
            mask.dims(),
            k.height,
            k.width
        )));
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for (i, (d, m)) in depth.data().iter().zip(mask.data()).enumerate() {
        let d = d.to_f64();
        if d < 0.0 {
            return Err(Error::invalid("negative depth"));
        }
        if m.to_f64() < 0.5 || d == 0.0 {
            continue;
        }
        let (row, col) = (i / w, i % w);
        points.push([
            (col as f64 - k.cx) * d / k.fx,
            (row as f64 - k.cy) * d / k.fy,
            d,
        ]);
        pixels.push([row, col]);
    }
    Ok(PointCloud {
        points,
        pixels: Some(pixels),
    })
}

/// Sub-pixel `(row, col)` of each point.
pub fn project(points: &[Vec3], k: &CameraIntrinsics) -> Result<Vec<(f64, f64)>> {
    points
        .iter()
        .map(|p| {
            if !(p[2] > 0.0) {
                return Err(Error::invalid(format!("point {p:?} is not in front of the camera")));
            }
            Ok((k.fy * p[1] / p[2] + k.cy, k.fx * p[0] / p[2] + k.cx))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalOrientation {
    /// `n . (camera_origin - c) > 0`.
    #[default]
    CameraFacing,
    /// Away from the centroid of the whole cloud.
    Outward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftParams {
    /// Candidates per finger.
    pub neighbors: usize,
    /// Largest image distance (px) from a peak to its nearest candidate.
    pub radius_px: f64,
    /// Neighbourhood radius (m) of the tangent-plane fit.
    pub normal_radius: f64,
    pub orientation: NormalOrientation,
}

impl Default for LiftParams {
    fn default() -> Self {
        LiftParams {
            neighbors: 50,
            radius_px: 12.0,
            normal_radius: 0.015,
            orientation: NormalOrientation::CameraFacing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contact {
    pub finger: usize,
    pub position: Vec3,
    pub normal: Vec3,
    pub candidates: Vec<usize>,
    pub valid: bool,
    /// Fewer than the requested candidates were available.
    #[serde(default)]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSet {
    pub contacts: Vec<Contact>,
    /// Maps the camera frame the contacts are expressed in to the world frame.
    #[serde(default)]
    pub camera_to_world: RigidTransform,
}

impl ContactSet {
    pub fn validate(&self) -> Result<()> {
        self.camera_to_world.validate()?;
        let mut fingers: Vec<usize> = self.contacts.iter().map(|c| c.finger).collect();
        fingers.sort_unstable();
        if fingers.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate finger in contact set"));
        }
        for c in self.contacts.iter().filter(|c| c.valid) {
            let n = c.normal.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 || !c.position.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(format!("finger {} has a non-unit normal", c.finger)));
            }
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Candidate indices ordered by image distance to `(row, col)`, ties by index.
fn nearest_projected(proj: &[(f64, f64)], row: f64, col: f64, n: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = proj
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| (i, ((r - row).powi(2) + (c - col).powi(2)).sqrt()))
        .collect();
    let n = n.min(d.len());
    if n < d.len() {
        d.select_nth_unstable_by(n, |a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        d.truncate(n);
    }
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d
}

/// Median of the `N` cloud points projecting closest to each peak.
///
/// Peaks are in image pixels. Normals are left zero; see [`lift_contacts`].
pub fn select_contacts(peaks: &[Peak], cloud: &PointCloud, k: &CameraIntrinsics, params: &LiftParams) -> Result<ContactSet> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot select contacts from an empty cloud"));
    }
    if params.neighbors == 0 {
        return Err(Error::invalid("neighbor count must be positive"));
    }
    let proj = project(&cloud.points, k)?;
    let degraded = cloud.len() < params.neighbors;
    let contacts = peaks
        .iter()
        .map(|p| {
            let near = nearest_projected(&proj, p.row, p.col, params.neighbors);
            let candidates: Vec<usize> = near.iter().map(|x| x.0).collect();
            let position = [0, 1, 2].map(|a| median(candidates.iter().map(|&i| cloud.points[i][a]).collect()));
            let too_far = near[0].1 > params.radius_px;
            Contact {
                finger: p.finger,
                position,
                normal: [0.0; 3],
                candidates,
                valid: !too_far,
                degraded,
                reason: too_far.then(|| format!("nearest point {:.2} px from peak", near[0].1)),
            }
        })
        .collect();
    Ok(ContactSet {
        contacts,
        camera_to_world: RigidTransform::default(),
    })
}

/// Eigenvalues (ascending) of a symmetric 3x3 matrix, closed form.
pub fn symmetric_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let tr = m[0][0] + m[1][1] + m[2][2];
    if p1 == 0.0 {
        let mut e = [m[0][0], m[1][1], m[2][2]];
        e.sort_by(f64::total_cmp);
        return e;
    }
    let q = tr / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = |i: usize, j: usize| (m[i][j] - if i == j { q } else { 0.0 }) / p;
    let det_b = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
        + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
    let phi = (det_b / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [lo, tr - hi - lo, hi]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: Vec3) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit eigenvector of a symmetric 3x3 matrix for a simple eigenvalue `lambda`.
fn eigenvector_for(m: &[[f64; 3]; 3], lambda: f64) -> Vec3 {
    let r = |i: usize| [0, 1, 2].map(|j| m[i][j] - if i == j { lambda } else { 0.0 });
    let (r0, r1, r2) = (r(0), r(1), r(2));
    let cands = [cross(r0, r1), cross(r0, r2), cross(r1, r2)];
    let best = cands
        .into_iter()
        .max_by(|a, b| norm(*a).total_cmp(&norm(*b)))
        .expect("three candidates");
    let n = norm(best);
    best.map(|x| x / n)
}

/// Smallest-variance direction of a point neighbourhood.
///
/// Errors on fewer than three points or a neighbourhood of rank below two.
pub fn plane_normal(points: &[Vec3]) -> Result<Vec3> {
    if points.len() < 3 {
        return Err(Error::invalid(format!(
            "normal fit needs at least 3 neighbours, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean = [0, 1, 2].map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j] / n;
            }
        }
    }
    let scale = cov.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Err(Error::invalid("degenerate neighbourhood: all points coincide"));
    }
    for row in &mut cov {
        for x in row.iter_mut() {
            *x /= scale;
        }
    }
    let e = symmetric_eigenvalues(&cov);
    if e[1] <= 1e-10 * e[2] {
        return Err(Error::invalid("degenerate neighbourhood: points are collinear"));
    }
    Ok(eigenvector_for(&cov, e[0]))
}

/// Tangent-plane normal at `center`, signed by `orientation`.
pub fn estimate_normal(
    cloud: &PointCloud,
    center: Vec3,
    radius: f64,
    orientation: NormalOrientation,
) -> Result<Vec3> {
    let r2 = radius * radius;
    let near: Vec<Vec3> = cloud
        .points
        .iter()
        .copied()
        .filter(|p| (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>() <= r2)
        .collect();
    let n = plane_normal(&near)?;
    let reference = match orientation {
        NormalOrientation::CameraFacing => [-center[0], -center[1], -center[2]],
        NormalOrientation::Outward => {
            let m = cloud.len() as f64;
            let c = [0, 1, 2].map(|a| cloud.points.iter().map(|p| p[a]).sum::<f64>() / m);
            [center[0] - c[0], center[1] - c[1], center[2] - c[2]]
        }
    };
    let dot: f64 = n.iter().zip(reference).map(|(a, b)| a * b).sum();
    Ok(if dot < 0.0 { n.map(|x| -x) } else { n })
}

/// Contact selection followed by normal estimation; contacts whose normal
/// cannot be fitted are marked invalid.
pub fn lift_contacts(peaks: &[Peak], cloud: &PointCloud, k: &CameraIntrinsics, params: &LiftParams) -> Result<ContactSet> {
    let mut set = select_contacts(peaks, cloud, k, params)?;
    for c in set.contacts.iter_mut().filter(|c| c.valid) {
        match estimate_normal(cloud, c.position, params.normal_radius, params.orientation) {
            Ok(n) => c.normal = n,
            Err(e) => {
                c.valid = false;
                c.reason = Some(e.to_string());
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 380.0,
            fy: 380.0,
            cx: 319.5,
            cy: 159.5,
            width: 640,
            height: 320,
        }
    }

    fn angle_deg(a: Vec3, b: Vec3) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (d / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn principal_point_and_unit_offset() {
        let k = CameraIntrinsics {
            fx: 4.0,
            fy: 4.0,
            cx: 2.0,
            cy: 1.0,
            width: 8,
            height: 3,
        };
        let mut depth = vec![0.0f64; 24];
        depth[8 + 2] = 2.0; // (1, 2): principal point
        depth[8 + 6] = 3.0; // (1, 6): cx + fx
        depth[0] = 1.0;
        let mut mask = vec![1.0f64; 24];
        mask[0] = 0.0;
        let cloud = back_project(
            &Tensor::new(vec![3, 8], depth).unwrap(),
            &Tensor::new(vec![3, 8], mask).unwrap(),
            &k,
        )
        .unwrap();
        assert_eq!(cloud.points, vec![[0.0, 0.0, 2.0], [3.0, 0.0, 3.0]]);
        assert_eq!(cloud.pixels.as_ref().unwrap(), &vec![[1, 2], [1, 6]]);
        let empty = back_project(
            &Tensor::<f64>::zeros(&[3, 8]).unwrap(),
            &Tensor::<f64>::zeros(&[3, 8]).unwrap(),
            &k,
        )
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn projection_basics() {
        let k = cam();
        assert_eq!(project(&[[0.0, 0.0, 2.0]], &k).unwrap(), vec![(159.5, 319.5)]);
        let a = project(&[[0.1, -0.2, 0.7]], &k).unwrap()[0];
        let b = project(&[[0.3, -0.6, 2.1]], &k).unwrap()[0];
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        assert!(project(&[[0.0, 0.0, 0.0]], &k).is_err());
    }

    fn peak(finger: usize, row: f64, col: f64) -> Peak {
        Peak {
            finger,
            row,
            col,
            score: 1.0,
        }
    }

    #[test]
    fn selection_picks_nearest() {
        let k = cam();
        // Points on the row through cy at image distances {1,2,3,4,5,9} px from the peak.
        let z = 1.0;
        let pts: Vec<Vec3> = [9.0, 3.0, 1.0, 5.0, 2.0, 4.0]
            .iter()
            .map(|d| [d / k.fx * z, 0.0, z])
            .collect();
        let cloud = PointCloud {
            points: pts,
            pixels: None,
        };
        let params = LiftParams {
            neighbors: 5,
            ..LiftParams::default()
        };
        let set = select_contacts(&[peak(0, k.cy, k.cx)], &cloud, &k, &params).unwrap();
        let mut chosen = set.contacts[0].candidates.clone();
        chosen.sort();
        assert_eq!(chosen, vec![1, 2, 3, 4, 5]);
        let one = LiftParams {
            neighbors: 1,
            ..params
        };
        let exact = select_contacts(&[peak(2, k.cy, k.cx + 3.0)], &cloud, &k, &one).unwrap();
        assert_eq!(exact.contacts[0].position, cloud.points[1]);
        let far = select_contacts(&[peak(1, 0.0, 0.0)], &cloud, &k, &one).unwrap();
        assert!(!far.contacts[0].valid);
        let degraded = select_contacts(&[peak(0, k.cy, k.cx)], &cloud, &k, &LiftParams::default()).unwrap();
        assert!(degraded.contacts[0].degraded && degraded.contacts[0].candidates.len() == 6);
        assert!(select_contacts(&[], &PointCloud::default(), &k, &params).is_err());
    }

    #[test]
    fn symmetric_cluster_median_is_centre() {
        let k = cam();
        let c = [0.02, -0.01, 0.5];
        let offs = [[0.001, 0.0, 0.0], [-0.001, 0.0, 0.0], [0.0, 0.001, 0.0], [0.0, -0.001, 0.0], [0.0; 3]];
        let pts: Vec<Vec3> = offs.iter().map(|o| [c[0] + o[0], c[1] + o[1], c[2] + o[2]]).collect();
        let cloud = PointCloud {
            points: pts,
            pixels: None,
        };
        let (r, col) = project(&[c], &k).unwrap()[0];
        let set = select_contacts(&[peak(0, r, col)], &cloud, &k, &LiftParams::default()).unwrap();
        assert_eq!(set.contacts[0].position, c);
    }

    #[test]
    fn plane_normal_faces_camera() {
        let pts: Vec<Vec3> = (0..25).map(|i| [(i % 5) as f64 * 0.003, (i / 5) as f64 * 0.003, 0.6]).collect();
        let cloud = PointCloud {
            points: pts,
            pixels: None,
        };
        let n = estimate_normal(&cloud, [0.006, 0.006, 0.6], 0.02, NormalOrientation::CameraFacing).unwrap();
        assert!(angle_deg(n, [0.0, 0.0, -1.0]) < 1e-6);
        let two = PointCloud {
            points: cloud.points[..2].to_vec(),
            pixels: None,
        };
        assert!(estimate_normal(&two, [0.0, 0.0, 0.6], 0.02, NormalOrientation::CameraFacing).is_err());
        let line: Vec<Vec3> = (0..5).map(|i| [i as f64 * 0.001, 0.0, 0.6]).collect();
        assert!(plane_normal(&line).is_err());
    }

    #[test]
    fn sphere_patch_normal_is_radial() {
        let centre = [0.0, 0.0, 0.5];
        let r = 0.05;
        let mut pts = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                let th = std::f64::consts::PI * (0.6 + 0.4 * i as f64 / 39.0);
                let ph = 2.0 * std::f64::consts::PI * j as f64 / 40.0;
                pts.push([
                    centre[0] + r * th.sin() * ph.cos(),
                    centre[1] + r * th.sin() * ph.sin(),
                    centre[2] + r * th.cos(),
                ]);
            }
        }
        let cloud = PointCloud {
            points: pts,
            pixels: None,
        };
        let dir = [0.2f64, -0.1, -1.0];
        let len = norm(dir);
        let c = [0, 1, 2].map(|a| centre[a] + r * dir[a] / len);
        let n = estimate_normal(&cloud, c, 0.015, NormalOrientation::CameraFacing).unwrap();
        assert!(angle_deg(n, dir) < 5.0, "{}", angle_deg(n, dir));
        let out = estimate_normal(&cloud, c, 0.015, NormalOrientation::Outward).unwrap();
        assert!(angle_deg(out, dir) < 5.0);
    }

    #[test]
    fn closed_form_eigen_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a: Vec<f64> = (0..9).map(|_| rng.sample(StandardNormal)).collect();
            let a = Matrix3::from_row_slice(&a);
            let s = a * a.transpose();
            let m = [0, 1, 2].map(|i| [0, 1, 2].map(|j| s[(i, j)]));
            let mine = symmetric_eigenvalues(&m);
            let eig = SymmetricEigen::new(s);
            let mut reference: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            reference.sort_by(f64::total_cmp);
            for (x, y) in mine.iter().zip(&reference) {
                assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
            }
            let imin = eig.eigenvalues.imin();
            let oracle = eig.eigenvectors.column(imin);
            let vmine = eigenvector_for(&m, mine[0]);
            let dot: f64 = (0..3).map(|i| vmine[i] * oracle[i]).sum();
            assert!(dot.abs() > 1.0 - 1e-8);
        }
    }

    fn random_plane(seed: u64, noise: f64) -> (Vec<Vec3>, Vec3, Vec3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n: Vec3 = [0, 1, 2].map(|_| rng.sample(StandardNormal));
        let l = norm(n);
        n = n.map(|x| x / l);
        let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = cross(n, helper);
        let lu = norm(u);
        let u = u.map(|x| x / lu);
        let w = cross(n, u);
        let c = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.4..0.8)];
        let pts = (0..400)
            .map(|_| {
                let (a, b) = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
                let e: f64 = noise * rng.sample::<f64, _>(StandardNormal);
                [0, 1, 2].map(|i| c[i] + a * u[i] + b * w[i] + e * n[i])
            })
            .collect();
        (pts, n, c)
    }

    #[test]
    fn plane_fit_accuracy() {
        for seed in 0..50 {
            let (pts, n, c) = random_plane(seed, 0.0);
            let cloud = PointCloud {
                points: pts,
                pixels: None,
            };
            let est = estimate_normal(&cloud, c, 0.02, NormalOrientation::CameraFacing).unwrap();
            let a = angle_deg(est, n).min(angle_deg(est, n.map(|x| -x)));
            assert!(a < 0.1, "seed {seed}: {a}");
            let dot: f64 = est.iter().zip(c).map(|(x, y)| -x * y).sum();
            assert!(dot > 0.0);
        }
    }

    proptest! {
        #[test]
        fn round_trip_projection(row in 0usize..320, col in 0usize..640, d in 0.05f64..5.0) {
            let k = cam();
            let mut depth = vec![0.0f64; 320 * 640];
            depth[row * 640 + col] = d;
            let mask = vec![1.0f64; 320 * 640];
            let cloud = back_project(&Tensor::new(vec![320, 640], depth).unwrap(), &Tensor::new(vec![320, 640], mask).unwrap(), &k).unwrap();
            let (r, c) = project(&cloud.points, &k).unwrap()[0];
            prop_assert!((r - row as f64).abs() < 1e-6 && (c - col as f64).abs() < 1e-6);
        }

        #[test]
        fn normals_are_unit_and_camera_facing(seed in 0u64..1000) {
            let (pts, _, c) = random_plane(seed, 0.001);
            let cloud = PointCloud { points: pts, pixels: None };
            let n = estimate_normal(&cloud, c, 0.02, NormalOrientation::CameraFacing).unwrap();
            prop_assert!((norm(n) - 1.0).abs() < 1e-6);
            prop_assert!(n.iter().zip(c).map(|(x, y)| -x * y).sum::<f64>() > 0.0);
        }

        #[test]
        fn contact_inside_candidate_box(pts in prop::collection::vec((-0.1f64..0.1, -0.1f64..0.1, 0.3f64..0.9), 1..40), row in 0.0f64..320.0, col in 0.0f64..640.0, n in 1usize..20) {
            let cloud = PointCloud { points: pts.iter().map(|p| [p.0, p.1, p.2]).collect(), pixels: None };
            let params = LiftParams { neighbors: n, ..LiftParams::default() };
            let set = select_contacts(&[peak(0, row, col)], &cloud, &cam(), &params).unwrap();
            let c = &set.contacts[0];
            for a in 0..3 {
                let lo = c.candidates.iter().map(|&i| cloud.points[i][a]).fold(f64::INFINITY, f64::min);
                let hi = c.candidates.iter().map(|&i| cloud.points[i][a]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= c.position[a] && c.position[a] <= hi);
            }
        }
    }
}
