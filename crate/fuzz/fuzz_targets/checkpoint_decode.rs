#![no_main]

use halvingpool::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything accepted must re-encode to the same bytes
    if let Ok(model) = decode(data) {
        assert_eq!(encode(&model).expect("decoded model encodes"), data);
    }
});
