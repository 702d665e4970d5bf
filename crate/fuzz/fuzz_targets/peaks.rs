#![no_main]

use fsaf_cli::formats::PeakFile;
use fsaf_core::io::parse_json;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_json::<PeakFile>(text) {
        let _ = file.rescaled([320, 640]);
    }
});
