//! End-to-end run from a single config file. Every stage goes through the
//! same files and subcommand functions a user would invoke by hand, so each
//! intermediate artifact can be regenerated on its own.

use std::path::{Path, PathBuf};

use fsaf_core::affordance_net::{TrainConfig, DEFAULT_PEAK_THRESHOLD};
use fsaf_core::io::{read_json, write_json};
use fsaf_core::scene_lifting::LiftParams;
use fsaf_core::tracker::{Outcome, RolloutSummary, TrackerConfig};
use fsaf_core::waypoint_planner::PhaseOffsets;
use fsaf_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::commands::{self, CAMERA_FILE, DEPTH_FILE, INTRINSICS_FILE, MASK_FILE};
use crate::formats::relative_to;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: PathBuf,
    /// `[height, width]` of the label and heatmap lattice.
    #[serde(default = "default_labels")]
    pub labels: [usize; 2],
    /// Activation shape spec; the default two-level layout when absent.
    #[serde(default)]
    pub activations: Option<PathBuf>,
    /// Decoder weights. Trained from `train` when absent.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default = "default_threshold")]
    pub peak_threshold: f64,
    #[serde(default)]
    pub lift: LiftParams,
    #[serde(default)]
    pub offsets: PhaseOffsets,
    pub model: PathBuf,
    #[serde(default)]
    pub tracker: TrackerConfig,
    /// Initial joint configuration; mid-range when absent.
    #[serde(default)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub samples: usize,
    #[serde(default)]
    pub config: TrainConfig,
}

fn default_labels() -> [usize; 2] {
    [80, 160]
}

fn default_threshold() -> f64 {
    DEFAULT_PEAK_THRESHOLD
}

/// Artifact paths of one run, relative to its output directory.
pub mod artifacts {
    pub const SCENE_DIR: &str = "scene";
    pub const ANNOTATIONS: &str = "annotations.json";
    pub const LABELS: &str = "labels.tns";
    pub const ACTS_DIR: &str = "acts";
    pub const TRAIN_CONFIG: &str = "train_config.json";
    pub const WEIGHTS: &str = "weights.json";
    pub const HISTORY: &str = "history.csv";
    pub const HEATMAPS: &str = "heatmaps.tns";
    pub const PEAKS: &str = "peaks.json";
    pub const LIFT_PARAMS: &str = "lift_params.json";
    pub const CONTACTS: &str = "contacts.json";
    pub const CONTACTS_PLY: &str = "contacts.ply";
    pub const OFFSETS: &str = "offsets.json";
    pub const PLAN: &str = "plan.json";
    pub const TRACKER_CONFIG: &str = "tracker.json";
    pub const TRAJECTORY: &str = "trajectory.jsonl";
    pub const SUMMARY: &str = "summary.json";
    pub const OVERLAY: &str = "overlay.ppm";
    pub const RESIDUALS: &str = "residuals.svg";
}

use artifacts::*;

pub fn run_one(
    config_path: &Path,
    out: &Path,
    model: Option<&Path>,
    weights: Option<&Path>,
    seed: u64,
) -> Result<RolloutSummary> {
    let cfg: PipelineConfig = read_json(config_path)?;
    let resolve = |p: &Path| relative_to(config_path, p);
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let o = |name: &str| out.join(name);
    let scene = resolve(&cfg.scene);
    let scene_dir = o(SCENE_DIR);

    commands::render_scene_cmd(
        &SceneArgs {
            scene: scene.clone(),
            out: scene_dir.clone(),
        },
        seed,
    )?;
    commands::annotate(
        &AnnotateArgs {
            scene,
            out: o(ANNOTATIONS),
        },
        seed,
    )?;
    commands::gen_labels(&GenLabelsArgs {
        annotations: o(ANNOTATIONS),
        size: cfg.labels,
        out: o(LABELS),
    })?;
    commands::synth_acts(
        &SynthActsArgs {
            labels: o(LABELS),
            out: o(ACTS_DIR),
            spec: cfg.activations.as_deref().map(resolve),
        },
        seed,
    )?;

    let weights = match (weights, &cfg.weights, &cfg.train) {
        (Some(w), _, _) => w.to_path_buf(),
        (None, Some(w), _) => resolve(w),
        (None, None, Some(t)) => {
            write_json(&o(TRAIN_CONFIG), &t.config)?;
            commands::train(
                &TrainArgs {
                    dataset: None,
                    synthetic: Some(t.samples),
                    size: cfg.labels,
                    config: Some(o(TRAIN_CONFIG)),
                    steps: None,
                    lr: None,
                    out: o(WEIGHTS),
                    history: Some(o(HISTORY)),
                },
                seed,
            )?;
            o(WEIGHTS)
        }
        (None, None, None) => return Err(Error::invalid("pipeline needs decoder weights or a train section")),
    };
    commands::decode(&DecodeArgs {
        weights,
        acts: o(ACTS_DIR),
        out: o(HEATMAPS),
        peaks: Some(o(PEAKS)),
        threshold: cfg.peak_threshold,
    })?;
    commands::render_overlay(&OverlayArgs {
        depth: Some(scene_dir.join(DEPTH_FILE)),
        heatmaps: Some(o(HEATMAPS)),
        trajectory: None,
        out: o(OVERLAY),
    })?;

    write_json(&o(LIFT_PARAMS), &cfg.lift)?;
    commands::lift(&LiftArgs {
        depth: scene_dir.join(DEPTH_FILE),
        mask: scene_dir.join(MASK_FILE),
        intrinsics: scene_dir.join(INTRINSICS_FILE),
        peaks: o(PEAKS),
        camera: Some(scene_dir.join(CAMERA_FILE)),
        params: Some(o(LIFT_PARAMS)),
        out: o(CONTACTS),
        ply: Some(o(CONTACTS_PLY)),
    })?;
    write_json(&o(OFFSETS), &cfg.offsets)?;
    commands::plan(&PlanArgs {
        contacts: o(CONTACTS),
        offsets: Some(o(OFFSETS)),
        out: o(PLAN),
    })?;

    write_json(&o(TRACKER_CONFIG), &cfg.tracker)?;
    let summary = commands::track(&TrackArgs {
        model: model.map_or_else(|| resolve(&cfg.model), Path::to_path_buf),
        plan: o(PLAN),
        config: Some(o(TRACKER_CONFIG)),
        init: cfg.init.as_deref().map(resolve),
        out: o(TRAJECTORY),
        summary: Some(o(SUMMARY)),
    })?;
    commands::render_overlay(&OverlayArgs {
        depth: None,
        heatmaps: None,
        trajectory: Some(o(TRAJECTORY)),
        out: o(RESIDUALS),
    })?;
    Ok(summary)
}

/// Runs every config; several configs go to per-config subdirectories and
/// run concurrently.
pub fn run(a: &PipelineArgs, seed: u64) -> Result<Vec<(String, RolloutSummary)>> {
    let names: Vec<String> = a
        .config
        .iter()
        .map(|c| c.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned()))
        .collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(Error::invalid("pipeline configs must have distinct file stems"));
    }
    let single = a.config.len() == 1;
    a.config
        .par_iter()
        .zip(&names)
        .map(|(c, name)| {
            let out = if single { a.out.clone() } else { a.out.join(name) };
            let s = run_one(c, &out, a.model.as_deref(), a.weights.as_deref(), seed)?;
            Ok((name.clone(), s))
        })
        .collect()
}

/// Error for a run that completed without reaching `success`.
pub fn outcome_error(name: &str, s: &RolloutSummary) -> Option<Error> {
    (s.outcome != Outcome::Success).then(|| {
        Error::Tracking(format!(
            "{name}: {} after {} steps{}",
            s.outcome,
            s.steps,
            s.message.as_deref().map_or_else(String::new, |m| format!(" ({m})"))
        ))
    })
}
