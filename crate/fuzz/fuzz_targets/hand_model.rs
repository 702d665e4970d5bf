#![no_main]

use fsaf_core::kinematics::{forward_kinematics, HandModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = HandModel::parse(text) {
        let _ = forward_kinematics(&model, &model.neutral());
    }
});
