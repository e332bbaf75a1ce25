#![no_main]

use erc_core::corpus::parse_dialog_line;
use erc_core::llm::{build_prompt, PromptTemplate};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(t) = PromptTemplate::new("fuzz", s) {
            let dialog = parse_dialog_line("Hi ! __eou__ Fine . __eou__", "0 4", "fuzz:0").unwrap();
            let prompt = build_prompt(&dialog, &t).unwrap();
            assert!(prompt.contains("Fine ."));
        }
    }
});
