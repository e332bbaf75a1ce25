#![no_main]

use erc_core::embedding::SentenceEmbeddingStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = SentenceEmbeddingStore::read(data) {
        let mut out = Vec::new();
        store.write(&mut out).unwrap();
        let again = SentenceEmbeddingStore::read(&out[..]).unwrap();
        assert_eq!(again.len(), store.len());
    }
});
