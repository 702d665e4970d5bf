#![no_main]

use fsaf_cli::formats::AnnotationFile;
use fsaf_core::affordance_net::synthesize_labels;
use fsaf_core::io::parse_json;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_json::<AnnotationFile>(text) {
        let _ = synthesize_labels(&file.rescaled([64, 64]), 64, 64);
    }
});
