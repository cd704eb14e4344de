#![no_main]

use libfuzzer_sys::fuzz_target;
use updetr::train::{AblationConfig, TrainConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_json(text) {
        TrainConfig::from_json(&cfg.to_json()).expect("serialized config parses");
    }
    let _ = AblationConfig::from_json(text);
});
