#![no_main]

use fsaf_cli::args::parse_size;
use fsaf_cli::pipeline::PipelineConfig;
use fsaf_core::affordance_net::{ShapeSpec, TrainConfig};
use fsaf_core::io::parse_json;
use fsaf_core::scene_gen::SceneSpec;
use fsaf_core::scene_lifting::LiftParams;
use fsaf_core::tracker::TrackerConfig;
use fsaf_core::waypoint_planner::PhaseOffsets;
use libfuzzer_sys::fuzz_target;

// The first byte picks the schema.
fuzz_target!(|data: &[u8]| {
    let Some((&kind, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    match kind % 8 {
        0 => {
            if let Ok(c) = parse_json::<TrackerConfig>(text) {
                let _ = c.validate();
            }
        }
        1 => {
            let _ = parse_json::<TrainConfig>(text);
        }
        2 => {
            let _ = parse_json::<LiftParams>(text);
        }
        3 => {
            if let Ok(o) = parse_json::<PhaseOffsets>(text) {
                let _ = o.validate();
            }
        }
        4 => {
            if let Ok(s) = parse_json::<SceneSpec>(text) {
                let _ = s.validate();
            }
        }
        5 => {
            let _ = parse_json::<ShapeSpec>(text);
        }
        6 => {
            let _ = parse_json::<PipelineConfig>(text);
        }
        _ => {
            let _ = parse_size(text);
        }
    }
});
