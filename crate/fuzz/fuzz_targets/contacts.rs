#![no_main]

use fsaf_core::io::parse_json;
use fsaf_core::scene_lifting::ContactSet;
use fsaf_core::waypoint_planner::{build_plan, PhaseOffsets};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = parse_json::<ContactSet>(text) {
        let _ = build_plan(&set, &PhaseOffsets::default());
    }
});
