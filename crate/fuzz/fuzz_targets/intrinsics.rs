#![no_main]

use fsaf_core::io::parse_json;
use fsaf_core::scene_lifting::CameraIntrinsics;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(k) = parse_json::<CameraIntrinsics>(text) {
        if k.validate().is_ok() {
            let _ = k.ray(0.0, 0.0);
        }
    }
});
