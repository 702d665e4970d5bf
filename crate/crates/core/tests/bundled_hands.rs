use fsaf_core::kinematics::HandModel;
use fsaf_core::scene_gen::{template_contacts, CameraSpec, Pose, Primitive, SceneSpec};
use fsaf_core::scene_lifting::{Contact, ContactSet};
use fsaf_core::tracker::{rollout, Outcome, TrackerConfig};
use fsaf_core::waypoint_planner::{build_plan, PhaseOffsets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn load(name: &str) -> HandModel {
    let path = format!("{}/../../data/{name}.json", env!("CARGO_MANIFEST_DIR"));
    HandModel::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn scene(primitive: Primitive, z: f64, yaw: f64) -> SceneSpec {
    SceneSpec {
        primitive,
        pose: Pose {
            xyz: [0.0, 0.0, z],
            rpy: [0.0, 0.0, yaw],
        },
        camera: CameraSpec {
            eye: [0.0, -0.42, 0.22],
            target: [0.0, 0.0, z],
            up: [0.0, 0.0, 1.0],
            width: 640,
            height: 320,
            fx: 380.0,
            fy: 380.0,
        },
        depth_noise: 0.0,
        seed: 0,
        table_z: Some(0.0),
    }
}

fn scenes() -> Vec<(&'static str, SceneSpec)> {
    vec![
        ("cylinder", scene(Primitive::Cylinder { radius: 0.03, height: 0.12 }, 0.06, 0.0)),
        ("sphere", scene(Primitive::Sphere { radius: 0.055 }, 0.055, 0.0)),
        ("box", scene(Primitive::Box { size: [0.06, 0.06, 0.12] }, 0.06, std::f64::consts::FRAC_PI_4)),
    ]
}

fn contact_set(spec: &SceneSpec, noise: f64, rng: &mut ChaCha8Rng) -> ContactSet {
    let contacts = template_contacts(spec)
        .unwrap()
        .into_iter()
        .map(|c| Contact {
            finger: c.finger,
            position: c.point.map(|x| x + noise * (2.0 * rng.random::<f64>() - 1.0)),
            normal: c.normal,
            candidates: vec![],
            valid: true,
            degraded: false,
            reason: None,
        })
        .collect();
    ContactSet {
        contacts,
        camera_to_world: Default::default(),
    }
}

#[test]
fn bundled_models_grasp_analytic_contacts() {
    let config = TrackerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for model_name in ["dexhand021", "l20"] {
        let model = load(model_name);
        for (name, spec) in scenes() {
            for noise in [0.0, 0.003] {
                let plan = build_plan(&contact_set(&spec, noise, &mut rng), &PhaseOffsets::default()).unwrap();
                let out = rollout(&model, &model.neutral(), &plan, &config).unwrap();
                let s = &out.summary;
                eprintln!(
                    "{model_name} {name} noise={noise}: {} in {} steps, residuals {:?} {:?}",
                    s.outcome, s.steps, s.final_residuals, s.message
                );
                assert_eq!(s.outcome, Outcome::Success, "{model_name} {name} noise={noise}");
                assert!(s.final_residuals.iter().all(|&r| r < 0.003));
            }
        }
    }
}
