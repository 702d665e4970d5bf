#![no_main]

use fsaf_core::io::{decode_ply, encode_ply};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cloud) = decode_ply(text) {
        let text = encode_ply(&cloud).expect("decoded cloud encodes");
        assert_eq!(decode_ply(&text).expect("encoded cloud decodes"), cloud);
    }
});
