#![no_main]

use erc_core::corpus::LabelSpace;
use erc_core::llm::parse_label;
use erc_core::metrics::ClassLabel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        for space in [LabelSpace::All, LabelSpace::EmotionsOnly] {
            match parse_label(s, space) {
                ClassLabel::Emotion(e) => assert!(space.contains(e)),
                ClassLabel::Unparsable => {}
            }
        }
    }
});
