#![no_main]

use libfuzzer_sys::fuzz_target;
use updetr::checkpoint::Checkpoint;
use updetr::model::Model;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(ck.encode(), data);
        let _ = Model::from_checkpoint(&ck);
    }
});
