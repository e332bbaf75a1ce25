#![no_main]

use erc_core::embedding::{OovPolicy, WordEmbeddingTable};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = WordEmbeddingTable::read(data, OovPolicy::Hashed { seed: 0 }) {
        assert_eq!(table.lookup("__missing__").len(), table.dim());
    }
});
