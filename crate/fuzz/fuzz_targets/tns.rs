#![no_main]

use fsaf_core::io::{decode_tensor, encode_tensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        let again = decode_tensor(&encode_tensor(&t)).expect("re-encoded tensor decodes");
        assert_eq!(again.dims(), t.dims());
    }
});
