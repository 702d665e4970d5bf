#![no_main]

use fsaf_core::io::parse_json;
use fsaf_core::waypoint_planner::GraspPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = parse_json::<GraspPlan>(text) {
        let _ = plan.validate();
    }
});
