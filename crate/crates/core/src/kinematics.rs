//! Arm + hand kinematic trees: parsing, forward kinematics, fingertip
//! Jacobians and the linear coupling residual.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{arr, rpy_matrix, v, RigidTransform, Vec3};

/// Name of the implicit root link.
pub const ROOT_LINK: &str = "base";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Origin {
    #[serde(default)]
    pub xyz: Vec3,
    #[serde(default)]
    pub rpy: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointType,
    pub parent: String,
    #[serde(default)]
    pub origin: Origin,
    #[serde(default = "default_axis")]
    pub axis: Vec3,
    #[serde(default)]
    pub limits: Option<[f64; 2]>,
}

fn default_axis() -> Vec3 {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingertipSpec {
    pub name: String,
    pub link: String,
    #[serde(default)]
    pub offset: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    #[serde(rename = "C", default)]
    pub c: Vec<Vec<f64>>,
    #[serde(default)]
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    pub link: String,
    #[serde(default)]
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CollisionSpec {
    #[serde(default)]
    pub spheres: Vec<SphereSpec>,
    #[serde(default)]
    pub table_z: Option<f64>,
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub fingertips: Vec<FingertipSpec>,
    #[serde(default)]
    pub coupling: CouplingSpec,
    #[serde(default)]
    pub collision: CollisionSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointType,
    /// Index of the parent joint, `None` for the root link.
    pub parent: Option<usize>,
    pub origin_rotation: Matrix3<f64>,
    pub origin_translation: Vector3<f64>,
    pub axis: Vector3<f64>,
    /// Position in the configuration vector for movable joints.
    pub dof: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingertip {
    pub name: String,
    /// Joint whose child link carries the pad, `None` for the root.
    pub link: Option<usize>,
    pub offset: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sphere {
    pub link: Option<usize>,
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// Validated kinematic tree. Joints are stored parents-first.
#[derive(Debug, Clone, PartialEq)]
pub struct HandModel {
    pub name: String,
    pub joints: Vec<Joint>,
    pub fingertips: Vec<Fingertip>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub dof_names: Vec<String>,
    /// Joint index of every degree of freedom.
    pub dof_joint: Vec<usize>,
    pub coupling: DMatrix<f64>,
    pub coupling_offset: DVector<f64>,
    pub spheres: Vec<Sphere>,
    pub table_z: Option<f64>,
    /// `ancestors[j]` holds `j` and every joint above it.
    ancestors: Vec<Vec<bool>>,
}

fn unit_axis(axis: Vec3, name: &str) -> Result<Vector3<f64>> {
    let a = v(axis);
    if !a.iter().all(|x| x.is_finite()) || (a.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("joint {name}: axis {axis:?} is not unit length")));
    }
    Ok(a)
}

impl HandModel {
    pub fn parse(text: &str) -> Result<Self> {
        let desc: ModelDescription = crate::io::parse_json(text)?;
        Self::from_description(desc)
    }

    pub fn from_description(desc: ModelDescription) -> Result<Self> {
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        for (i, j) in desc.joints.iter().enumerate() {
            if j.name == ROOT_LINK || by_name.insert(j.name.as_str(), i).is_some() {
                return Err(Error::invalid(format!("duplicate link name {}", j.name)));
            }
        }
        let parent_of = |i: usize| -> Result<Option<usize>> {
            let p = desc.joints[i].parent.as_str();
            if p == ROOT_LINK {
                return Ok(None);
            }
            by_name
                .get(p)
                .copied()
                .map(Some)
                .ok_or_else(|| Error::invalid(format!("joint {}: unknown parent link {p}", desc.joints[i].name)))
        };
        // Depth-first ordering with cycle detection.
        let n = desc.joints.len();
        let mut order = Vec::with_capacity(n);
        let mut state = vec![0u8; n]; // 0 new, 1 on stack, 2 done
        for start in 0..n {
            let mut chain = Vec::new();
            let mut cur = Some(start);
            while let Some(c) = cur {
                match state[c] {
                    2 => break,
                    1 => {
                        return Err(Error::invalid(format!(
                            "kinematic cycle through link {}",
                            desc.joints[c].name
                        )))
                    }
                    _ => {
                        state[c] = 1;
                        chain.push(c);
                        cur = parent_of(c)?;
                    }
                }
            }
            for &c in chain.iter().rev() {
                state[c] = 2;
                order.push(c);
            }
        }
        let mut new_index = vec![0; n];
        for (k, &i) in order.iter().enumerate() {
            new_index[i] = k;
        }
        let mut joints = Vec::with_capacity(n);
        let (mut lower, mut upper, mut dof_names, mut dof_joint) = (vec![], vec![], vec![], vec![]);
        for &i in &order {
            let s = &desc.joints[i];
            let movable = s.kind != JointType::Fixed;
            let dof = if movable {
                let [lo, hi] = s
                    .limits
                    .ok_or_else(|| Error::invalid(format!("joint {}: movable joint needs limits", s.name)))?;
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::invalid(format!("joint {}: limits [{lo}, {hi}] need lo < hi", s.name)));
                }
                lower.push(lo);
                upper.push(hi);
                dof_names.push(s.name.clone());
                dof_joint.push(joints.len());
                Some(lower.len() - 1)
            } else {
                None
            };
            if !s.origin.xyz.iter().chain(&s.origin.rpy).all(|x| x.is_finite()) {
                return Err(Error::invalid(format!("joint {}: non-finite origin", s.name)));
            }
            joints.push(Joint {
                name: s.name.clone(),
                kind: s.kind,
                parent: parent_of(i)?.map(|p| new_index[p]),
                origin_rotation: rpy_matrix(s.origin.rpy),
                origin_translation: v(s.origin.xyz),
                axis: if movable { unit_axis(s.axis, &s.name)? } else { Vector3::z() },
                dof,
            });
        }
        let link = |name: &str, what: &str| -> Result<Option<usize>> {
            if name == ROOT_LINK {
                return Ok(None);
            }
            by_name
                .get(name)
                .map(|&i| Some(new_index[i]))
                .ok_or_else(|| Error::invalid(format!("{what} references unknown link {name}")))
        };
        if desc.fingertips.is_empty() {
            return Err(Error::invalid("model defines no fingertip frames"));
        }
        let fingertips = desc
            .fingertips
            .iter()
            .map(|f| {
                Ok(Fingertip {
                    name: f.name.clone(),
                    link: link(&f.link, &format!("fingertip {}", f.name))?,
                    offset: v(f.offset),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let nq = lower.len();
        let m = desc.coupling.c.len();
        if desc.coupling.d.len() != m || desc.coupling.c.iter().any(|r| r.len() != nq) {
            return Err(Error::shape(format!(
                "coupling must be {m}x{nq} with {m} offsets"
            )));
        }
        let coupling = DMatrix::from_fn(m, nq, |i, j| desc.coupling.c[i][j]);
        let coupling_offset = DVector::from_vec(desc.coupling.d.clone());
        let spheres = desc
            .collision
            .spheres
            .iter()
            .map(|s| {
                if !(s.radius > 0.0) {
                    return Err(Error::invalid("collision sphere radius must be positive"));
                }
                Ok(Sphere {
                    link: link(&s.link, "collision sphere")?,
                    center: v(s.center),
                    radius: s.radius,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ancestors = vec![vec![false; n]; n];
        for j in 0..n {
            let mut cur = Some(j);
            while let Some(c) = cur {
                ancestors[j][c] = true;
                cur = joints[c].parent;
            }
        }
        Ok(HandModel {
            name: desc.name,
            joints,
            fingertips,
            lower,
            upper,
            dof_names,
            dof_joint,
            coupling,
            coupling_offset,
            spheres,
            table_z: desc.collision.table_z,
            ancestors,
        })
    }

    pub fn dof(&self) -> usize {
        self.lower.len()
    }

    pub fn fingertip_count(&self) -> usize {
        self.fingertips.len()
    }

    pub fn clamp(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
            .collect()
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof() && q.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (lo, hi))| lo <= x && x <= hi)
    }

    /// Mid-range configuration.
    pub fn neutral(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Whether degree of freedom `dof` moves `link`.
    pub fn dof_moves(&self, dof: usize, link: Option<usize>) -> bool {
        link.is_some_and(|l| self.ancestors[l][self.dof_joint[dof]])
    }

    /// Movable joints lying on the path between two links.
    pub fn movable_between(&self, a: Option<usize>, b: Option<usize>) -> bool {
        (0..self.dof()).any(|d| self.dof_moves(d, a) != self.dof_moves(d, b))
    }

    /// Self-collision sphere pairs worth checking: different links, not
    /// parent and child, and separated by at least one movable joint.
    pub fn sphere_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.spheres.len() {
            for j in i + 1..self.spheres.len() {
                let (a, b) = (self.spheres[i].link, self.spheres[j].link);
                let parent = |x: Option<usize>, y: Option<usize>| match x {
                    Some(x) => self.joints[x].parent == y,
                    None => false,
                };
                if a == b || parent(a, b) || parent(b, a) || !self.movable_between(a, b) {
                    continue;
                }
                pairs.push((i, j));
            }
        }
        pairs
    }
}

pub fn parse_model(text: &str) -> Result<HandModel> {
    HandModel::parse(text)
}

/// Cached link poses and fingertip positions for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicState {
    pub q: Vec<f64>,
    /// World pose of each joint's child link.
    pub link_rotation: Vec<Matrix3<f64>>,
    pub link_translation: Vec<Vector3<f64>>,
    /// World frame of each joint before its own motion.
    pub joint_origin: Vec<Vector3<f64>>,
    pub joint_axis: Vec<Vector3<f64>>,
    pub fingertips: Vec<Vector3<f64>>,
    base: (Matrix3<f64>, Vector3<f64>),
}

impl KinematicState {
    fn link_pose(&self, link: Option<usize>) -> (&Matrix3<f64>, &Vector3<f64>) {
        match link {
            Some(l) => (&self.link_rotation[l], &self.link_translation[l]),
            None => (&self.base.0, &self.base.1),
        }
    }

    pub fn point_on(&self, link: Option<usize>, local: &Vector3<f64>) -> Vector3<f64> {
        let (r, t) = self.link_pose(link);
        r * local + t
    }

    pub fn fingertip(&self, k: usize) -> Vec3 {
        arr(&self.fingertips[k])
    }
}

pub fn forward_kinematics(model: &HandModel, q: &[f64]) -> Result<KinematicState> {
    forward_kinematics_with_base(model, q, &RigidTransform::default())
}

/// Forward kinematics with the root link placed at `base`.
pub fn forward_kinematics_with_base(model: &HandModel, q: &[f64], base: &RigidTransform) -> Result<KinematicState> {
    if q.len() != model.dof() {
        return Err(Error::shape(format!(
            "configuration has {} entries, model {} has {} degrees of freedom",
            q.len(),
            model.name,
            model.dof()
        )));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("joint configuration"));
    }
    let base = (base.matrix(), v(base.translation));
    let n = model.joints.len();
    let mut rot = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    let mut origin = Vec::with_capacity(n);
    let mut axes = Vec::with_capacity(n);
    for j in &model.joints {
        let (pr, pt) = match j.parent {
            Some(p) => (rot[p], trans[p]),
            None => base,
        };
        let r0: Matrix3<f64> = pr * j.origin_rotation;
        let t0: Vector3<f64> = pr * j.origin_translation + pt;
        let axis = r0 * j.axis;
        let val = j.dof.map_or(0.0, |d| q[d]);
        let (r, t) = match j.kind {
            JointType::Fixed => (r0, t0),
            JointType::Revolute => {
                let m = Rotation3::from_axis_angle(&Unit::new_unchecked(j.axis), val).into_inner();
                (r0 * m, t0)
            }
            JointType::Prismatic => (r0, t0 + axis * val),
        };
        rot.push(r);
        trans.push(t);
        origin.push(t0);
        axes.push(axis);
    }
    let mut state = KinematicState {
        q: q.to_vec(),
        link_rotation: rot,
        link_translation: trans,
        joint_origin: origin,
        joint_axis: axes,
        fingertips: Vec::new(),
        base,
    };
    state.fingertips = model
        .fingertips
        .iter()
        .map(|f| state.point_on(f.link, &f.offset))
        .collect();
    Ok(state)
}

/// Geometric Jacobian of a point rigidly attached to `link`, `3 x n_q`.
pub fn point_jacobian(model: &HandModel, state: &KinematicState, link: Option<usize>, point: &Vector3<f64>) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(3, model.dof());
    for d in 0..model.dof() {
        if !model.dof_moves(d, link) {
            continue;
        }
        let j = model.dof_joint[d];
        let a = state.joint_axis[j];
        let col = match model.joints[j].kind {
            JointType::Revolute => a.cross(&(point - state.joint_origin[j])),
            JointType::Prismatic => a,
            JointType::Fixed => unreachable!("fixed joints carry no degree of freedom"),
        };
        jac.set_column(d, &col);
    }
    jac
}

pub fn fingertip_jacobian(model: &HandModel, state: &KinematicState, k: usize) -> Result<DMatrix<f64>> {
    let f = model
        .fingertips
        .get(k)
        .ok_or_else(|| Error::invalid(format!("fingertip index {k} out of range")))?;
    Ok(point_jacobian(model, state, f.link, &state.fingertips[k]))
}

/// `e_c = C q - d` and its constant Jacobian `C`.
pub fn coupling_residual(model: &HandModel, q: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if q.len() != model.coupling.ncols() {
        return Err(Error::shape("coupling columns disagree with the configuration"));
    }
    let e = &model.coupling * DVector::from_column_slice(q) - &model.coupling_offset;
    Ok((e, model.coupling.clone()))
}

/// World-frame centres of every collision sphere.
pub fn sphere_centers(model: &HandModel, state: &KinematicState) -> Vec<Vector3<f64>> {
    model
        .spheres
        .iter()
        .map(|s| state.point_on(s.link, &s.center))
        .collect()
}
