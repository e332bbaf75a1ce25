#![no_main]

use erc_core::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(ckpt) = Checkpoint::from_json(s) {
            let _ = ckpt.to_contextual();
            let _ = ckpt.to_classifier();
            let _ = ckpt.to_isolated();
        }
    }
});
