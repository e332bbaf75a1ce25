#![no_main]

use erc_core::corpus::{read_split, Split};
use libfuzzer_sys::fuzz_target;

// dialogue file and label file separated by the first NUL byte
fuzz_target!(|data: &[u8]| {
    let (text, labels) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    if let Ok(c) = read_split(text, labels, Split::Train) {
        assert_eq!(c.n_utterances(), c.dialogs.iter().map(|d| d.len()).sum::<usize>());
    }
});
