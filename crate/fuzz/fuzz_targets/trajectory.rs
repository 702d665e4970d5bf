#![no_main]

use fsaf_core::io::parse_json_lines;
use fsaf_core::tracker::TrajectoryStep;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_json_lines::<TrajectoryStep>(text);
});
