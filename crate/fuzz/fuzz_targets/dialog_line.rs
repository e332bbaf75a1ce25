#![no_main]

use erc_core::corpus::parse_dialog_line;
use libfuzzer_sys::fuzz_target;

// text line and label line separated by the first newline
fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let (text, labels) = s.split_once('\n').unwrap_or((s, ""));
        if let Ok(d) = parse_dialog_line(text, labels, "fuzz:0") {
            assert!(!d.is_empty());
            assert_eq!(d.labels().count(), d.len());
        }
    }
});
