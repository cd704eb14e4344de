#![no_main]

use libfuzzer_sys::fuzz_target;
use updetr::eval::{parse_csv, to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_csv(text) {
        if let Ok(out) = to_csv(&records) {
            let again = parse_csv(&out).expect("written curves parse");
            assert_eq!(again.len(), records.len());
        }
    }
});
