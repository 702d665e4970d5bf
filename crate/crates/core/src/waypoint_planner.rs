//! Approach / closure / hold anchors along each contact normal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene_lifting::{Contact, ContactSet};

pub const THUMB: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Closure,
    Hold,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Approach, Phase::Closure, Phase::Hold];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Approach => "approach",
            Phase::Closure => "closure",
            Phase::Hold => "hold",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Signed offsets along the normal for each phase (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseOffsets {
    pub approach: f64,
    pub closure: f64,
    pub hold: f64,
}

impl Default for PhaseOffsets {
    fn default() -> Self {
        PhaseOffsets {
            approach: 0.04,
            closure: 0.005,
            hold: -0.003,
        }
    }
}

impl PhaseOffsets {
    pub fn validate(&self) -> Result<()> {
        if !(self.approach > self.closure && self.closure > 0.0 && 0.0 > self.hold) || !self.hold.is_finite() || !self.approach.is_finite() {
            return Err(Error::invalid(format!(
                "phase offsets must satisfy approach > closure > 0 > hold, got {} / {} / {}",
                self.approach, self.closure, self.hold
            )));
        }
        Ok(())
    }

    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Approach => self.approach,
            Phase::Closure => self.closure,
            Phase::Hold => self.hold,
        }
    }
}

/// `c + s n` for a unit normal `n`.
pub fn approach_point(contact: Vec3, normal: Vec3, s: f64) -> Result<Vec3> {
    let len = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("approach direction has norm {len}, expected 1")));
    }
    Ok([0, 1, 2].map(|i| contact[i] + s * normal[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerTarget {
    pub finger: usize,
    pub xyz: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseAnchor {
    pub name: Phase,
    pub s: f64,
    pub targets: Vec<FingerTarget>,
}

impl PhaseAnchor {
    pub fn target(&self, finger: usize) -> Option<Vec3> {
        self.targets.iter().find(|t| t.finger == finger).map(|t| t.xyz)
    }
}

/// Phase anchors in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspPlan {
    pub phases: Vec<PhaseAnchor>,
    /// Mean of the approach-phase finger targets.
    pub hand_waypoint: Vec3,
    pub fingers_used: Vec<usize>,
    /// World-frame contacts the plan was built from.
    #[serde(default)]
    pub contacts: Vec<Contact>,
}

impl GraspPlan {
    pub fn phase(&self, phase: Phase) -> Result<&PhaseAnchor> {
        self.phases
            .iter()
            .find(|p| p.name == phase)
            .ok_or_else(|| Error::invalid(format!("plan has no {phase} phase")))
    }

    /// Structural checks for plans read from disk.
    pub fn validate(&self) -> Result<()> {
        let names: Vec<Phase> = self.phases.iter().map(|p| p.name).collect();
        if names != Phase::ALL {
            return Err(Error::invalid("plan phases must be approach, closure, hold in order"));
        }
        if self.fingers_used.is_empty() {
            return Err(Error::invalid("plan uses no fingers"));
        }
        for p in &self.phases {
            let mut fingers: Vec<usize> = p.targets.iter().map(|t| t.finger).collect();
            if fingers != self.fingers_used {
                fingers.sort_unstable();
                if fingers != self.fingers_used {
                    return Err(Error::invalid(format!("{} targets disagree with fingers_used", p.name)));
                }
            }
            if p.targets.iter().any(|t| !t.xyz.iter().all(|x| x.is_finite())) {
                return Err(Error::invalid("non-finite plan target"));
            }
        }
        Ok(())
    }
}

/// Arithmetic mean of a set of points.
pub fn barycenter(points: &[Vec3]) -> Option<Vec3> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    Some([0, 1, 2].map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n))
}

/// Builds world-frame anchors from camera-frame contacts.
pub fn build_plan(contacts: &ContactSet, offsets: &PhaseOffsets) -> Result<GraspPlan> {
    offsets.validate()?;
    contacts.validate().map_err(|e| Error::Planning(e.to_string()))?;
    let mut valid: Vec<&Contact> = contacts.contacts.iter().filter(|c| c.valid).collect();
    valid.sort_by_key(|c| c.finger);
    if !valid.iter().any(|c| c.finger == THUMB) {
        return Err(Error::Planning("thumb contact is missing or invalid".into()));
    }
    if valid.len() < 2 {
        return Err(Error::Planning(format!("{} valid contact(s); at least 2 required", valid.len())));
    }
    let tf = &contacts.camera_to_world;
    let world: Vec<Contact> = valid
        .iter()
        .map(|c| Contact {
            position: tf.apply_point(c.position),
            normal: tf.apply_vector(c.normal),
            ..(*c).clone()
        })
        .collect();
    let phases = Phase::ALL
        .iter()
        .map(|&phase| {
            let s = offsets.get(phase);
            let targets = world
                .iter()
                .map(|c| {
                    Ok(FingerTarget {
                        finger: c.finger,
                        xyz: approach_point(c.position, c.normal, s)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PhaseAnchor {
                name: phase,
                s,
                targets,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let approach: Vec<Vec3> = phases[0].targets.iter().map(|t| t.xyz).collect();
    Ok(GraspPlan {
        hand_waypoint: barycenter(&approach).expect("at least two fingers"),
        fingers_used: world.iter().map(|c| c.finger).collect(),
        phases,
        contacts: world,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use proptest::prelude::*;

    fn contact(finger: usize, position: Vec3, normal: Vec3, valid: bool) -> Contact {
        Contact {
            finger,
            position,
            normal,
            candidates: vec![],
            valid,
            degraded: false,
            reason: None,
        }
    }

    fn five() -> ContactSet {
        ContactSet {
            contacts: (0..5)
                .map(|k| {
                    let a = k as f64 * 1.1;
                    contact(k, [0.03 * a.cos(), 0.03 * a.sin(), 0.5], [a.cos(), a.sin(), 0.0], true)
                })
                .collect(),
            camera_to_world: Default::default(),
        }
    }

    #[test]
    fn approach_point_cases() {
        let c = [0.1, -0.2, 0.3];
        assert_eq!(approach_point(c, [0.0, 1.0, 0.0], 0.0).unwrap(), c);
        let p = approach_point([0.0, 0.0, 0.5], [0.0, 0.0, -1.0], 0.04).unwrap();
        assert!((p[2] - 0.46).abs() < 1e-15 && p[0] == 0.0 && p[1] == 0.0);
        assert!(approach_point(c, [0.0, 2.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn full_plan_structure() {
        let plan = build_plan(&five(), &PhaseOffsets::default()).unwrap();
        assert_eq!(plan.phases.iter().map(|p| p.name).collect::<Vec<_>>(), Phase::ALL);
        assert_eq!(plan.phases.iter().map(|p| p.targets.len()).sum::<usize>(), 15);
        assert_eq!(plan.fingers_used, vec![0, 1, 2, 3, 4]);
        plan.validate().unwrap();
        let hold = plan.phase(Phase::Hold).unwrap();
        for c in &plan.contacts {
            let t = hold.target(c.finger).unwrap();
            // preload: beneath the surface along -n
            let d: f64 = (0..3).map(|i| (t[i] - c.position[i]) * c.normal[i]).sum();
            assert!((d + 0.003).abs() < 1e-12);
        }
    }

    #[test]
    fn two_finger_barycenter() {
        let pts = [[0.05, 0.0, 0.5], [-0.05, 0.0, 0.5]];
        assert_eq!(barycenter(&pts).unwrap(), [0.0, 0.0, 0.5]);
        let set = ContactSet {
            contacts: vec![
                contact(0, pts[0], [1.0, 0.0, 0.0], true),
                contact(2, pts[1], [-1.0, 0.0, 0.0], true),
                contact(3, [0.0; 3], [0.0; 3], false),
            ],
            camera_to_world: Default::default(),
        };
        let plan = build_plan(&set, &PhaseOffsets::default()).unwrap();
        assert_eq!(plan.fingers_used, vec![0, 2]);
        assert!(plan.hand_waypoint.iter().zip([0.0, 0.0, 0.5]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn planning_failures() {
        let mut set = five();
        set.contacts[0].valid = false;
        assert!(matches!(build_plan(&set, &PhaseOffsets::default()), Err(Error::Planning(_))));
        let only_thumb = ContactSet {
            contacts: vec![five().contacts[0].clone()],
            camera_to_world: Default::default(),
        };
        assert!(matches!(build_plan(&only_thumb, &PhaseOffsets::default()), Err(Error::Planning(_))));
        let bad = PhaseOffsets {
            closure: 0.05,
            ..PhaseOffsets::default()
        };
        assert!(build_plan(&five(), &bad).is_err());
    }

    #[test]
    fn contacts_are_moved_to_world() {
        let mut set = five();
        set.camera_to_world = look_at([0.0, -0.45, 0.3], [0.0, 0.0, 0.05], [0.0, 0.0, 1.0]).unwrap();
        let plan = build_plan(&set, &PhaseOffsets::default()).unwrap();
        for (c, src) in plan.contacts.iter().zip(&set.contacts) {
            assert_eq!(c.position, set.camera_to_world.apply_point(src.position));
        }
    }

    proptest! {
        #[test]
        fn targets_lie_on_the_normal_line(seed in prop::array::uniform3(-1.0f64..1.0), c in prop::array::uniform3(-0.5f64..0.5), app in 0.01f64..0.1, clo in 0.001f64..0.01, hold in -0.01f64..-0.0005) {
            let len = seed.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(len > 0.1);
            let n = seed.map(|x| x / len);
            let set = ContactSet {
                contacts: vec![contact(0, c, n, true), contact(1, c.map(|x| x + 0.01), n, true)],
                camera_to_world: Default::default(),
            };
            let offsets = PhaseOffsets { approach: app, closure: clo, hold };
            let plan = build_plan(&set, &offsets).unwrap();
            prop_assert_eq!(&plan, &build_plan(&set, &offsets).unwrap());
            let mut last = f64::INFINITY;
            for p in &plan.phases {
                let t = p.target(0).unwrap();
                let d = [t[0] - c[0], t[1] - c[1], t[2] - c[2]];
                let cr = [d[1] * n[2] - d[2] * n[1], d[2] * n[0] - d[0] * n[2], d[0] * n[1] - d[1] * n[0]];
                prop_assert!(cr.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-9);
                let signed: f64 = d.iter().zip(n).map(|(a, b)| a * b).sum();
                prop_assert!((signed - p.s).abs() < 1e-12);
                prop_assert!(signed < last);
                last = signed;
            }
            prop_assert!(last < 0.0);
        }
    }
}
