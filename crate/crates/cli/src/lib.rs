//! Command-line front end: argument grammar, file layouts, subcommands and
//! the end-to-end pipeline.

pub mod args;
pub mod commands;
pub mod formats;
pub mod pipeline;
pub mod render;

use args::{Cli, Command};
use fsaf_core::Result;

/// Seed of one named stage, derived from the global seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a of the tag, then a splitmix64 finalizer
    let tag = stage
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    let mut z = (seed ^ tag).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Executes a parsed command line, printing a short report to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenLabels(a) => commands::gen_labels(a),
        Command::SynthActs(a) => commands::synth_acts(a, seed),
        Command::Train(a) => commands::train(a, seed),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => {
            let r = commands::eval(a)?;
            println!("kld={} sim={} nss={}", r.mean.kld, r.mean.sim, r.mean.nss);
            Ok(())
        }
        Command::RenderScene(a) => commands::render_scene_cmd(a, seed),
        Command::Annotate(a) => commands::annotate(a, seed),
        Command::Lift(a) => commands::lift(a),
        Command::Plan(a) => commands::plan(a),
        Command::Track(a) => {
            let s = commands::track(a)?;
            println!("outcome={} steps={}", s.outcome, s.steps);
            pipeline::outcome_error("track", &s).map_or(Ok(()), Err)
        }
        Command::Pipeline(a) => {
            let runs = pipeline::run(a, seed)?;
            for (name, s) in &runs {
                println!("{name} outcome={} steps={} residuals={:?}", s.outcome, s.steps, s.final_residuals);
            }
            runs.iter()
                .find_map(|(name, s)| pipeline::outcome_error(name, s))
                .map_or(Ok(()), Err)
        }
        Command::RenderOverlay(a) => commands::render_overlay(a),
    }
}
