//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fsaf", version, about = "Finger-specific affordance grounding and grasp tracking")]
pub struct Cli {
    /// Root of every random stream; each stage derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gaussian label stack from fingertip annotations.
    GenLabels(GenLabelsArgs),
    /// Synthetic multi-timestep activations conditioned on a label stack.
    SynthActs(SynthActsArgs),
    /// Train the aggregator and decoder.
    Train(TrainArgs),
    /// Predict heatmaps and peaks from activations.
    Decode(DecodeArgs),
    /// KLD, SIM and NSS of predictions against ground truth.
    Eval(EvalArgs),
    /// Ray-cast a primitive on a table into depth, mask and point cloud.
    RenderScene(SceneArgs),
    /// Template fingertip annotations for a scene.
    Annotate(AnnotateArgs),
    /// Lift heatmap peaks to 3D contacts with normals.
    Lift(LiftArgs),
    /// Approach, closure and hold waypoints from contacts.
    Plan(PlanArgs),
    /// Track a plan with a hand model.
    Track(TrackArgs),
    /// Scene to trajectory in one run.
    Pipeline(PipelineArgs),
    /// Heatmap overlay (PPM or SVG) or residual plot (SVG).
    RenderOverlay(OverlayArgs),
}

/// `HxW`, e.g. `80x160`.
pub fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let size = [parse(h)?, parse(w)?];
    if size.contains(&0) {
        return Err("extents must be positive".into());
    }
    Ok(size)
}

#[derive(Debug, Clone, Args)]
pub struct GenLabelsArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Label lattice; annotations are rescaled onto it.
    #[arg(long, value_parser = parse_size, default_value = "80x160")]
    pub size: [usize; 2],
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthActsArgs {
    #[arg(long)]
    pub labels: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Activation shape spec JSON; defaults to two levels at full and half resolution.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset JSON listing activation directories and label files.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// Train on this many generated samples with random annotations.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Lattice of generated samples.
    #[arg(long, value_parser = parse_size, default_value = "80x160")]
    pub size: [usize; 2],
    /// Training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Activation directory.
    #[arg(long)]
    pub acts: PathBuf,
    /// Heatmap stack output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub peaks: Option<PathBuf>,
    #[arg(long, default_value_t = fsaf_core::affordance_net::DEFAULT_PEAK_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Prediction stack, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth stack, or a directory of them paired by file stem.
    #[arg(long)]
    pub gt: PathBuf,
    /// Annotation file, or a directory of them paired by file stem.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub peaks: PathBuf,
    /// Camera-to-world transform JSON; identity when absent.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Lifting parameters JSON.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Contacts with normals as PLY.
    #[arg(long)]
    pub ply: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub contacts: PathBuf,
    /// Phase offsets JSON.
    #[arg(long)]
    pub offsets: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Tracker config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial configuration as a JSON array; mid-range when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Trajectory as JSON lines.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Pipeline config; repeat to run several scenes concurrently.
    #[arg(long, required = true)]
    pub config: Vec<PathBuf>,
    /// Output directory; one subdirectory per config when several are given.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the hand model of every config.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Overrides the decoder weights of every config.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OverlayArgs {
    #[arg(long, requires = "heatmaps", required_unless_present = "trajectory")]
    pub depth: Option<PathBuf>,
    #[arg(long, requires = "depth")]
    pub heatmaps: Option<PathBuf>,
    /// Trajectory JSON lines; renders a residual plot instead.
    #[arg(long, conflicts_with = "depth")]
    pub trajectory: Option<PathBuf>,
    /// `.ppm` or `.svg`.
    #[arg(long)]
    pub out: PathBuf,
}
