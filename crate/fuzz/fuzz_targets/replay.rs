#![no_main]

use erc_core::llm::{GenerationClient, ReplayClient};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(client) = ReplayClient::read(data) {
        let _ = client.generate("test:0", "");
    }
});
