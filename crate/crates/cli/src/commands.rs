//! One function per subcommand. Every output goes through an atomic write.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsaf_core::affordance_net::{
    extract_peaks, generate_synthetic_activations, synthesize_labels, train_decoder, ActivationSet,
    FingerAnnotation, HeatmapStack, NetWeights, NoiseSchedule, ShapeSpec, TrainConfig, FINGER_COUNT,
};
use fsaf_core::geometry::RigidTransform;
use fsaf_core::grounding_eval::{evaluate_set, pair_samples, report_csv_rows, EvalReport};
use fsaf_core::io::{
    read_json, read_json_lines, read_tensor, read_text, write_atomic, write_csv, write_json, write_json_lines,
    write_ply, write_tensor, PlyCloud,
};
use fsaf_core::kinematics::HandModel;
use fsaf_core::scene_gen::{annotate_grasp, render_scene, SceneSpec};
use fsaf_core::scene_lifting::{back_project, lift_contacts, CameraIntrinsics, ContactSet, LiftParams};
use fsaf_core::tracker::{rollout, RolloutSummary, TrackerConfig, TrajectoryStep};
use fsaf_core::waypoint_planner::{build_plan, GraspPlan, PhaseOffsets};
use fsaf_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::args::*;
use crate::formats::{read_activations, relative_to, write_activations, AnnotationFile, DatasetFile, PeakFile};
use crate::render::{heatmap_overlay, overlay_svg, trajectory_svg};
use crate::stage_seed;

pub const DEPTH_FILE: &str = "depth.tns";
pub const MASK_FILE: &str = "mask.tns";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const CAMERA_FILE: &str = "camera.json";
pub const CLOUD_FILE: &str = "cloud.ply";

/// Half-width (label px) of the cluster synthetic annotations are drawn from.
const SYNTHETIC_SPREAD: f64 = 8.0;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn read_stack(path: &Path) -> Result<HeatmapStack> {
    HeatmapStack::new(read_tensor(path)?)
}

fn read_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

pub fn gen_labels(a: &GenLabelsArgs) -> Result<()> {
    let file: AnnotationFile = read_json(&a.annotations)?;
    let [h, w] = a.size;
    let stack = synthesize_labels(&file.rescaled(a.size), h, w)?;
    write_tensor(&a.out, stack.tensor())
}

pub fn synth_acts(a: &SynthActsArgs, seed: u64) -> Result<()> {
    let labels = read_stack(&a.labels)?;
    let spec = match &a.spec {
        Some(p) => read_json(p)?,
        None => ShapeSpec::for_labels(labels.height(), labels.width()),
    };
    let acts = generate_synthetic_activations(
        &labels,
        stage_seed(seed, "synth-acts"),
        &spec,
        &NoiseSchedule::default(),
    )?;
    write_activations(&a.out, &acts)
}

/// Five annotations scattered around a random centre of the lattice.
pub fn random_annotations(rng: &mut ChaCha8Rng, [h, w]: [usize; 2]) -> Vec<FingerAnnotation> {
    let margin = SYNTHETIC_SPREAD + 2.0;
    let centre = |rng: &mut ChaCha8Rng, n: usize| {
        let n = n as f64;
        if n > 2.0 * margin {
            rng.random_range(margin..n - margin)
        } else {
            (n - 1.0) / 2.0
        }
    };
    let (r0, c0) = (centre(rng, h), centre(rng, w));
    (0..FINGER_COUNT)
        .map(|id| FingerAnnotation {
            id,
            row: (r0 + rng.random_range(-SYNTHETIC_SPREAD..SYNTHETIC_SPREAD)).clamp(0.0, (h - 1) as f64),
            col: (c0 + rng.random_range(-SYNTHETIC_SPREAD..SYNTHETIC_SPREAD)).clamp(0.0, (w - 1) as f64),
        })
        .collect()
}

/// Seeded dataset of random annotations and their activations.
pub fn synthetic_dataset(n: usize, size: [usize; 2], seed: u64) -> Result<Vec<(ActivationSet, HeatmapStack)>> {
    let spec = ShapeSpec::for_labels(size[0], size[1]);
    let schedule = NoiseSchedule::default();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, "synthetic-sample").wrapping_add(i as u64));
            let labels = synthesize_labels(&random_annotations(&mut rng, size), size[0], size[1])?;
            let acts = generate_synthetic_activations(&labels, rng.random(), &spec, &schedule)?;
            Ok((acts, labels))
        })
        .collect()
}

fn load_dataset(path: &Path) -> Result<Vec<(ActivationSet, HeatmapStack)>> {
    let file: DatasetFile = read_json(path)?;
    file.samples
        .par_iter()
        .map(|s| {
            Ok((
                read_activations(&relative_to(path, &s.acts))?,
                read_stack(&relative_to(path, &s.labels))?,
            ))
        })
        .collect()
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let mut cfg: TrainConfig = read_or_default(a.config.as_deref())?;
    cfg.seed = stage_seed(seed, "train");
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let dataset = match (&a.dataset, a.synthetic) {
        (Some(p), _) => load_dataset(p)?,
        (None, Some(n)) => synthetic_dataset(n, a.size, seed)?,
        (None, None) => return Err(Error::invalid("either a dataset or a synthetic sample count is required")),
    };
    let out = train_decoder(&dataset, &cfg)?;
    if let Some(p) = &a.history {
        let rows: Vec<Vec<String>> = out
            .history
            .iter()
            .map(|r| vec![r.step.to_string(), r.loss.to_string(), r.lr.to_string()])
            .collect();
        write_csv(p, &["step", "loss", "lr"], &rows)?;
    }
    write_json(&a.out, &NetWeights::from_net(&out.net))
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    let weights: NetWeights = read_json(&a.weights)?;
    let net = weights.into_net()?;
    let acts = read_activations(&a.acts)?;
    let stack = HeatmapStack::new(net.forward(&acts)?)?;
    write_tensor(&a.out, stack.tensor())?;
    if let Some(p) = &a.peaks {
        write_json(
            p,
            &PeakFile {
                h: stack.height(),
                w: stack.width(),
                peaks: extract_peaks(&stack, a.threshold),
            },
        )?;
    }
    Ok(())
}

/// Files of `dir` with extension `ext`, keyed by stem.
fn by_stem(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for e in entries {
        let p = e
            .map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if p.extension().is_some_and(|x| x == ext) {
            if let Some(stem) = p.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), p);
            }
        }
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport> {
    let triples: Vec<(String, PathBuf, PathBuf, PathBuf)> = if a.pred.is_dir() {
        let preds = by_stem(&a.pred, "tns")?;
        let gts = by_stem(&a.gt, "tns")?;
        let anns = by_stem(&a.annotations, "json")?;
        if preds.is_empty() {
            return Err(Error::invalid(format!("no .tns files in {}", a.pred.display())));
        }
        preds
            .into_iter()
            .map(|(id, p)| {
                let g = gts.get(&id).ok_or_else(|| Error::invalid(format!("no ground truth for {id}")))?;
                let n = anns.get(&id).ok_or_else(|| Error::invalid(format!("no annotations for {id}")))?;
                Ok((id, p, g.clone(), n.clone()))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(stem(&a.pred), a.pred.clone(), a.gt.clone(), a.annotations.clone())]
    };
    let loaded = triples
        .par_iter()
        .map(|(id, p, g, n)| {
            let pred = read_stack(p)?;
            let gt = read_stack(g)?;
            let anns: AnnotationFile = read_json(n)?;
            let fix = anns.rescaled([gt.height(), gt.width()]);
            Ok(((id.clone(), pred), (id.clone(), gt, fix)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (preds, gts) = loaded.into_iter().unzip();
    let report = evaluate_set(&pair_samples(preds, gts)?)?;
    write_json(&a.out, &report)?;
    if let Some(p) = &a.csv {
        write_csv(p, &["id", "kld", "sim", "nss"], &report_csv_rows(&report))?;
    }
    Ok(report)
}

fn scene_spec(path: &Path, seed: u64) -> Result<SceneSpec> {
    let mut spec: SceneSpec = read_json(path)?;
    spec.seed = stage_seed(seed, "render-scene");
    spec.validate()?;
    Ok(spec)
}

pub fn render_scene_cmd(a: &SceneArgs, seed: u64) -> Result<()> {
    let scene = render_scene(&scene_spec(&a.scene, seed)?)?;
    create_dir(&a.out)?;
    write_tensor(&a.out.join(DEPTH_FILE), &scene.depth)?;
    write_tensor(&a.out.join(MASK_FILE), &scene.mask)?;
    write_json(&a.out.join(INTRINSICS_FILE), &scene.intrinsics)?;
    write_json(&a.out.join(CAMERA_FILE), &scene.camera_to_world)?;
    write_ply(&a.out.join(CLOUD_FILE), &scene.gt_cloud.to_ply(Some(scene.gt_normals)))
}

pub fn annotate(a: &AnnotateArgs, seed: u64) -> Result<()> {
    let spec = scene_spec(&a.scene, seed)?;
    write_json(
        &a.out,
        &AnnotationFile {
            h: spec.camera.height,
            w: spec.camera.width,
            fingers: annotate_grasp(&spec)?,
        },
    )
}

pub fn lift(a: &LiftArgs) -> Result<()> {
    let depth = read_tensor(&a.depth)?;
    let mask = read_tensor(&a.mask)?;
    let k: CameraIntrinsics = read_json(&a.intrinsics)?;
    let peaks: PeakFile = read_json(&a.peaks)?;
    let params: LiftParams = read_or_default(a.params.as_deref())?;
    let camera: RigidTransform = read_or_default(a.camera.as_deref())?;
    let cloud = back_project(&depth, &mask, &k)?;
    let mut set = lift_contacts(&peaks.rescaled([k.height, k.width]), &cloud, &k, &params)?;
    set.camera_to_world = camera;
    write_json(&a.out, &set)?;
    if let Some(p) = &a.ply {
        let valid: Vec<_> = set.contacts.iter().filter(|c| c.valid).collect();
        write_ply(
            p,
            &PlyCloud {
                points: valid.iter().map(|c| c.position).collect(),
                normals: Some(valid.iter().map(|c| c.normal).collect()),
            },
        )?;
    }
    Ok(())
}

pub fn plan(a: &PlanArgs) -> Result<()> {
    let contacts: ContactSet = read_json(&a.contacts)?;
    let offsets: PhaseOffsets = read_or_default(a.offsets.as_deref())?;
    write_json(&a.out, &build_plan(&contacts, &offsets)?)
}

/// Writes the trajectory and summary; the caller decides what a
/// non-success outcome means for the exit status.
pub fn track(a: &TrackArgs) -> Result<RolloutSummary> {
    let model = HandModel::parse(&read_text(&a.model)?)?;
    let plan: GraspPlan = read_json(&a.plan)?;
    let config: TrackerConfig = read_or_default(a.config.as_deref())?;
    let q0 = match &a.init {
        Some(p) => read_json(p)?,
        None => model.neutral(),
    };
    let out = rollout(&model, &q0, &plan, &config)?;
    write_json_lines(&a.out, &out.steps)?;
    if let Some(p) = &a.summary {
        write_json(p, &out.summary)?;
    }
    Ok(out.summary)
}

pub fn render_overlay(a: &OverlayArgs) -> Result<()> {
    let svg_out = a.out.extension().is_some_and(|e| e == "svg");
    if let Some(t) = &a.trajectory {
        if !svg_out {
            return Err(Error::invalid("trajectory plots are written as .svg"));
        }
        let steps: Vec<TrajectoryStep> = read_json_lines(t)?;
        return write_atomic(&a.out, trajectory_svg(&steps)?.as_bytes());
    }
    let (Some(d), Some(h)) = (&a.depth, &a.heatmaps) else {
        return Err(Error::invalid("an overlay needs --depth and --heatmaps"));
    };
    let img = heatmap_overlay(&read_tensor(d)?, &read_stack(h)?)?;
    if svg_out {
        write_atomic(&a.out, overlay_svg(&img).as_bytes())
    } else if a.out.extension().is_some_and(|e| e == "ppm") {
        write_atomic(&a.out, &img.to_ppm())
    } else {
        Err(Error::invalid("overlay output must end in .ppm or .svg"))
    }
}
