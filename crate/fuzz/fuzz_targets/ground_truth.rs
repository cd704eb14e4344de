#![no_main]

use libfuzzer_sys::fuzz_target;
use updetr::pretext::parse_ground_truth;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_ground_truth(text);
    }
});
