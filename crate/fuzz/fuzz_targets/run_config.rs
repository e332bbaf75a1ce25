#![no_main]

use erc_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(c) = RunConfig::from_toml(s) {
            let _ = c.validate();
            let _ = c.echo();
        }
    }
});
