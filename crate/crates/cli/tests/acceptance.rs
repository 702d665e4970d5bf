//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fsaf_cli::commands::synthetic_dataset;
use fsaf_core::affordance_net::{
    dataset_loss, net_config_for, AffordanceNet, label_sigma, synthesize_labels, train_decoder, FingerAnnotation, NetWeights, TrainConfig};
use fsaf_core::gradcheck::{check_network, layer_suite, toy_network, DEFAULT_STEP};
use fsaf_core::grounding_eval::{kld, nss, sim};
use fsaf_core::qp::{brute_force, solve, verify_kkt, QpSettings, QpStatus};
use fsaf_core::scene_gen::{render_scene, CameraSpec, Pose, Primitive, SceneSpec};
use fsaf_core::scene_lifting::{back_project, estimate_normal, plane_normal, project, NormalOrientation};
use fsaf_core::testbed::{random_qp, reaching_task};
use fsaf_core::tracker::{audit_rollout, rollout, Outcome, RolloutSummary, TrackerConfig};
use fsaf_core::waypoint_planner::Phase;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn fsaf(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fsaf"))
        .args(args)
        .output()
        .expect("spawn fsaf");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).trim().to_string(),
    )
}

fn labels() -> Verdict {
    let (h, w) = (320, 640);
    let sigma = label_sigma(h, w);
    let ann = [FingerAnnotation {
        id: 0,
        row: 160.0,
        col: 320.0,
    }];
    let stack = synthesize_labels(&ann, h, w).unwrap();
    let ch = stack.channel(0);
    let centre = ch[160 * w + 320] as f64;
    let at_sigma = ch[165 * w + 320] as f64;
    let expected = (-0.5f64).exp();
    verdict(
        sigma == 5.0 && centre == 1.0 && (at_sigma - 0.60653).abs() <= 1e-5 && (at_sigma - expected).abs() <= 1e-6,
        format!("sigma={sigma} centre={centre} value_at_sigma={at_sigma:.7}"),
    )
}

fn gradients() -> Verdict {
    let mut worst_layer: f64 = 0.0;
    for seed in 0..3 {
        for c in layer_suite(seed).unwrap() {
            worst_layer = worst_layer.max(c.max_relative_error);
        }
    }
    let mut worst_net: f64 = 0.0;
    for seed in 0..2 {
        let (net, acts, target) = toy_network(seed).unwrap();
        worst_net = worst_net.max(check_network(&net, &acts, &target, DEFAULT_STEP).unwrap().max_relative_error);
    }
    verdict(
        worst_layer < 1e-4 && worst_net < 1e-3,
        format!("max relative error: layers {worst_layer:.2e}, composite {worst_net:.2e}"),
    )
}

fn overfit() -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let data = synthetic_dataset(10, [64, 64], 11).unwrap();
        let cfg = TrainConfig {
            steps: 5000,
            seed: 3,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let init = AffordanceNet::<f32>::init(net_config_for(&data[0].0, &data[0].1, &cfg).unwrap(), cfg.seed).unwrap();
        let init_loss = dataset_loss(&init, &data).unwrap();
        let a = train_decoder(&data, &cfg).unwrap();
        let loss = dataset_loss(&a.net, &data).unwrap();
        let b = train_decoder(&data, &TrainConfig { steps: 50, ..cfg.clone() }).unwrap();
        let c = train_decoder(&data, &TrainConfig { steps: 50, ..cfg.clone() }).unwrap();
        let same = NetWeights::from_net(&b.net) == NetWeights::from_net(&c.net) && b.history == c.history;
        verdict(
            loss < 1e-3 && same,
            format!("loss {init_loss:.3e} -> {loss:.3e} after {} steps, repeat bit-identical: {same}", cfg.steps),
        )
    })
}

fn metrics() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        let good = (got - want).abs() <= tol;
        ok &= good;
        if !good {
            notes.push(format!("{name}: {got} vs {want}"));
        }
    };
    let (p, g) = ([0.9, 0.1], [0.5, 0.5]);
    check("kld two-pixel", kld(&p, &g).unwrap(), 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln(), 1e-6);
    let n = 64;
    let uniform = vec![1.0 / n as f64; n];
    let mut hot = vec![0.0; n];
    hot[5] = 1.0;
    check("kld one-hot", kld(&uniform, &hot).unwrap(), (n as f64).ln(), 1e-6);
    check("sim two-pixel", sim(&p, &g).unwrap(), 0.6, 1e-6);
    check("sim disjoint", sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0, 1e-6);
    check("nss one-hot", nss(&hot, 8, 8, 0.0, 5.0).unwrap(), ((n - 1) as f64).sqrt(), 1e-6);
    check("nss uniform", nss(&uniform, 8, 8, 3.0, 3.0).unwrap(), 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let dist: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let self_kld = kld(&dist, &dist).unwrap();
    ok &= self_kld <= 1e-9;
    let self_sim = sim(&dist, &dist).unwrap();
    let mass: f64 = dist.iter().sum();
    if self_sim != mass || (self_sim - 1.0).abs() > n as f64 * f64::EPSILON {
        ok = false;
        notes.push(format!("SIM(P,P)={self_sim:e}, sum P={mass:e}"));
    }
    let base = nss(&raw, 8, 8, 2.0, 6.0).unwrap();
    for (a, b) in [(2.0, 0.0), (0.5, 3.0), (1.0, -1.0)] {
        let affine: Vec<f64> = raw.iter().map(|v| a * v + b).collect();
        let d = (nss(&affine, 8, 8, 2.0, 6.0).unwrap() - base).abs();
        if d > 1e-12 {
            ok = false;
            notes.push(format!("NSS({a}P+{b}) off by {d:e}"));
        }
    }
    verdict(ok, format!("KLD(P,P)={self_kld:.1e} {}", notes.join("; ")))
}

fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot.abs() / (na * nb)).clamp(0.0, 1.0).acos().to_degrees()
}

fn box_scene(noise: f64) -> SceneSpec {
    SceneSpec {
        primitive: Primitive::Box { size: [0.08, 0.08, 0.12] },
        pose: Pose {
            xyz: [0.0, 0.0, 0.06],
            rpy: [0.0, 0.0, 0.5],
        },
        camera: CameraSpec {
            eye: [0.0, -0.42, 0.22],
            target: [0.0, 0.0, 0.06],
            up: [0.0, 0.0, 1.0],
            width: 640,
            height: 320,
            fx: 380.0,
            fy: 380.0,
        },
        depth_noise: noise,
        seed: 9,
        table_z: Some(0.0),
    }
}

fn geometry() -> Verdict {
    let scene = render_scene(&box_scene(0.0)).unwrap();
    let cloud = back_project(&scene.depth, &scene.mask, &scene.intrinsics).unwrap();
    let px = project(&cloud.points, &scene.intrinsics).unwrap();
    let round_trip = px
        .iter()
        .zip(cloud.pixels.as_ref().unwrap())
        .map(|((r, c), [pr, pc])| (r - *pr as f64).abs().max((c - *pc as f64).abs()))
        .fold(0.0, f64::max);

    // noiseless planes of random orientation
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut plane_err: f64 = 0.0;
    for _ in 0..50 {
        let n: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let u = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let t1 = cross(n, u);
        let t2 = cross(n, t1);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                let (a, b) = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
                [0, 1, 2].map(|i| 0.4 * (i == 2) as u8 as f64 + a * t1[i] + b * t2[i])
            })
            .collect();
        plane_err = plane_err.max(angle_deg(plane_normal(&pts).unwrap(), n));
    }

    // box faces under 1 mm depth noise, away from edges
    let noisy = render_scene(&box_scene(0.001)).unwrap();
    let cloud = back_project(&noisy.depth, &noisy.mask, &noisy.intrinsics).unwrap();
    let gt_pixels = noisy.gt_cloud.pixels.as_ref().unwrap();
    let gt: BTreeMap<[usize; 2], usize> = gt_pixels.iter().enumerate().map(|(k, p)| (*p, k)).collect();
    let mut noisy_err: f64 = 0.0;
    let mut checked = 0;
    for (i, p) in cloud.pixels.as_ref().unwrap().iter().enumerate().step_by(97) {
        let k = gt[p];
        let (c, n0) = (noisy.gt_cloud.points[k], noisy.gt_normals[k]);
        // skip points whose 2 cm ball reaches another face
        let interior = noisy.gt_cloud.points.iter().zip(&noisy.gt_normals).all(|(q, n)| {
            let d2: f64 = (0..3).map(|j| (q[j] - c[j]) * (q[j] - c[j])).sum();
            d2 > 0.025 * 0.025 || angle_deg(*n, n0) < 1e-6
        });
        if !interior {
            continue;
        }
        let est = estimate_normal(&cloud, cloud.points[i], 0.02, NormalOrientation::CameraFacing).unwrap();
        noisy_err = noisy_err.max(angle_deg(est, n0));
        checked += 1;
    }
    verdict(
        round_trip < 1e-6 && plane_err < 0.1 && noisy_err < 5.0 && checked > 20,
        format!(
            "round trip {round_trip:.1e} px, plane normals {plane_err:.1e} deg, 1 mm noise {noisy_err:.2} deg over {checked} face points"
        ),
    )
}

fn qp_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for seed in 0..500 {
        let prob = random_qp(seed);
        let sol = solve(&prob, None, QpSettings::default()).unwrap();
        let x_star = brute_force(&prob).unwrap();
        let err = (&sol.x - &x_star).amax();
        worst = worst.max(err);
        if sol.status != QpStatus::Solved || err >= 1e-5 || !verify_kkt(&prob, &sol, 1e-5).passed() {
            failures += 1;
        }
    }
    verdict(failures == 0, format!("500 instances, max |x - x*| {worst:.1e}, {failures} failures"))
}

fn tracker_contracts() -> Verdict {
    let config = TrackerConfig::default();
    let mut bad = Vec::new();
    let (mut closed_form, mut margin) = (0.0f64, f64::INFINITY);
    for seed in 0..50 {
        let task = reaching_task(seed);
        let out = rollout(&task.model, &task.q_init, &task.plan, &config).unwrap();
        let r = audit_rollout(&task.model, &task.plan, &config, &out).unwrap();
        closed_form = closed_form.max(r.max_closed_form_error);
        margin = margin.min(r.min_predicted_margin);
        if r.limit_violations > 0 || r.continuity_violations > 0 || r.max_closed_form_error > 1e-6 || r.min_predicted_margin < -1e-6 {
            bad.push(seed);
        }
    }
    verdict(
        bad.is_empty(),
        format!("50 tasks, closed-form error {closed_form:.1e}, min clearance slack {margin:.1e}, failing seeds {bad:?}"),
    )
}

fn read_summary(dir: &Path) -> RolloutSummary {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn grasped(s: &RolloutSummary) -> bool {
    s.outcome == Outcome::Success && s.final_phase == Phase::Hold && s.final_residuals.iter().all(|r| *r < 0.003)
}

fn end_to_end(root: &Path) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for scene in ["cylinder", "sphere", "box"] {
        let out = root.join(scene);
        let cfg = data_dir().join(format!("demo_{scene}.json"));
        let (code, err) = fsaf(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        if code != 0 {
            ok = false;
            notes.push(format!("{scene}: exit {code} {err}"));
            continue;
        }
        let s = read_summary(&out);
        let worst = s.final_residuals.iter().fold(0.0f64, |a, b| a.max(*b));
        ok &= grasped(&s);
        notes.push(format!("{scene} {} max hold residual {:.2} mm", s.outcome, worst * 1e3));
    }
    verdict(ok, notes.join(", "))
}

const PERCEPTION: [&str; 10] = [
    "scene/depth.tns",
    "scene/mask.tns",
    "annotations.json",
    "labels.tns",
    "acts/level0.tns",
    "acts/level1.tns",
    "heatmaps.tns",
    "peaks.json",
    "contacts.json",
    "plan.json",
];

fn cross_embodiment(root: &Path) -> Verdict {
    let cfg = data_dir().join("demo_cylinder.json");
    let mut notes = Vec::new();
    let mut ok = true;
    for model in ["dexhand021", "l20"] {
        let out = root.join(model);
        let m = data_dir().join(format!("{model}.json"));
        let (code, err) = fsaf(&[
            "pipeline",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--model",
            m.to_str().unwrap(),
        ]);
        if code != 0 {
            ok = false;
            notes.push(format!("{model}: exit {code} {err}"));
            continue;
        }
        let s = read_summary(&out);
        ok &= grasped(&s);
        notes.push(format!("{model} {} ({} dof)", s.outcome, s.final_q.len()));
    }
    let differing: Vec<&str> = PERCEPTION
        .iter()
        .copied()
        .filter(|f| std::fs::read(root.join("dexhand021").join(f)).ok() != std::fs::read(root.join("l20").join(f)).ok())
        .collect();
    ok &= differing.is_empty();
    notes.push(format!("perception files differing: {differing:?}"));
    verdict(ok, notes.join(", "))
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs every subcommand into `dir`; returns the failing invocations.
fn run_all(dir: &Path, seed: &str) -> Vec<String> {
    std::fs::create_dir_all(dir).unwrap();
    let d = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let data = data_dir();
    let scene = data.join("scenes/cylinder.json");
    let scene = scene.to_str().unwrap();
    let model = data.join("dexhand021.json");
    let weights = data.join("weights.json");
    let calls: Vec<Vec<String>> = vec![
        vec!["render-scene".into(), "--scene".into(), scene.into(), "--out".into(), d("scene")],
        vec!["annotate".into(), "--scene".into(), scene.into(), "--out".into(), d("ann.json")],
        vec!["gen-labels".into(), "--annotations".into(), d("ann.json"), "--out".into(), d("labels.tns")],
        vec!["synth-acts".into(), "--labels".into(), d("labels.tns"), "--out".into(), d("acts")],
        vec![
            "train".into(), "--synthetic".into(), "3".into(), "--size".into(), "64x64".into(), "--steps".into(),
            "10".into(), "--out".into(), d("small_weights.json"), "--history".into(), d("history.csv"),
        ],
        vec![
            "decode".into(), "--weights".into(), weights.to_str().unwrap().into(), "--acts".into(), d("acts"),
            "--out".into(), d("heat.tns"), "--peaks".into(), d("peaks.json"),
        ],
        vec![
            "eval".into(), "--pred".into(), d("heat.tns"), "--gt".into(), d("labels.tns"), "--annotations".into(),
            d("ann.json"), "--out".into(), d("report.json"), "--csv".into(), d("report.csv"),
        ],
        vec![
            "lift".into(), "--depth".into(), d("scene/depth.tns"), "--mask".into(), d("scene/mask.tns"),
            "--intrinsics".into(), d("scene/intrinsics.json"), "--camera".into(), d("scene/camera.json"),
            "--peaks".into(), d("peaks.json"), "--out".into(), d("contacts.json"), "--ply".into(), d("contacts.ply"),
        ],
        vec!["plan".into(), "--contacts".into(), d("contacts.json"), "--out".into(), d("plan.json")],
        vec![
            "track".into(), "--model".into(), model.to_str().unwrap().into(), "--plan".into(), d("plan.json"),
            "--out".into(), d("traj.jsonl"), "--summary".into(), d("summary.json"),
        ],
        vec![
            "render-overlay".into(), "--depth".into(), d("scene/depth.tns"), "--heatmaps".into(), d("heat.tns"),
            "--out".into(), d("overlay.ppm"),
        ],
        vec![
            "render-overlay".into(), "--depth".into(), d("scene/depth.tns"), "--heatmaps".into(), d("heat.tns"),
            "--out".into(), d("overlay.svg"),
        ],
        vec!["render-overlay".into(), "--trajectory".into(), d("traj.jsonl"), "--out".into(), d("residuals.svg")],
        vec![
            "pipeline".into(), "--config".into(), data.join("demo_box.json").to_str().unwrap().into(), "--out".into(),
            d("pipeline"),
        ],
    ];
    let mut failed = Vec::new();
    for mut c in calls {
        c.extend(["--seed".to_string(), seed.to_string()]);
        let args: Vec<&str> = c.iter().map(String::as_str).collect();
        let (code, err) = fsaf(&args);
        if code != 0 {
            failed.push(format!("{} exit {code}: {err}", c[0]));
        }
    }
    failed
}

fn determinism(root: &Path) -> Verdict {
    let mut failed = run_all(&root.join("a"), "17");
    failed.extend(run_all(&root.join("b"), "17"));
    failed.extend(run_all(&root.join("c"), "18"));
    let a = snapshot(&root.join("a"));
    let b = snapshot(&root.join("b"));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let c = snapshot(&root.join("c"));
    // the seed must actually reach the random stages
    let seeded = a.get(Path::new("acts/level0.tns")) != c.get(Path::new("acts/level0.tns"))
        && a.get(Path::new("scene/depth.tns")) != c.get(Path::new("scene/depth.tns"));
    verdict(
        failed.is_empty() && differing.is_empty() && seeded && a.len() > 20,
        format!(
            "{} files from 14 invocations, differing {differing:?}, failed {failed:?}, seed-sensitive {seeded}",
            a.len()
        ),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    type Criterion<'a> = (&'a str, Duration, Box<dyn Fn() -> Verdict + 'a>);
    let p = root.path();
    let criteria: Vec<Criterion> = vec![
        ("label correctness", Duration::from_secs(1), Box::new(labels)),
        ("gradient suite", Duration::from_secs(60), Box::new(gradients)),
        ("overfit", Duration::from_secs(600), Box::new(overfit)),
        ("metric oracles", Duration::MAX, Box::new(metrics)),
        ("geometry round trips", Duration::MAX, Box::new(geometry)),
        ("qp oracle equivalence", Duration::from_secs(30), Box::new(qp_oracle)),
        ("tracker contracts", Duration::MAX, Box::new(tracker_contracts)),
        ("end-to-end grasp", Duration::from_secs(120), Box::new(move || end_to_end(&p.join("e2e")))),
        ("cross-embodiment", Duration::MAX, Box::new(move || cross_embodiment(&p.join("cross")))),
        ("determinism", Duration::MAX, Box::new(move || determinism(&p.join("det")))),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut all = true;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t = Instant::now();
        let v = run();
        let elapsed = t.elapsed();
        let in_time = elapsed <= *limit;
        let pass = v.pass && in_time;
        all &= pass;
        let budget = if *limit == Duration::MAX {
            String::new()
        } else {
            format!(" / {:.0} s", limit.as_secs_f64())
        };
        println!(
            "{} {:>2} {name}: {} [{:.2} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            elapsed.as_secs_f64()
        );
    }
    if !all {
        std::process::exit(1);
    }
}
