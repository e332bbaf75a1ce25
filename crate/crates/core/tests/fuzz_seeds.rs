//! The checked-in fuzz seeds are valid inputs, so fuzzing starts from the
//! accepting paths of each parser.

use std::path::{Path, PathBuf};

use erc_core::checkpoint::Checkpoint;
use erc_core::config::RunConfig;
use erc_core::corpus::{parse_dialog_line, read_split, Split};
use erc_core::embedding::{EmbeddingSource, OovPolicy, SentenceEmbeddingStore, WordEmbeddingTable};
use erc_core::llm::{PromptTemplate, ReplayClient};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn dialog_line_seeds_parse() {
    for (p, b) in seeds("dialog_line") {
        let (t, l) = text(&b).split_once('\n').unwrap();
        parse_dialog_line(t, l, "seed:0").unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn split_seeds_parse() {
    for (p, b) in seeds("read_split") {
        let i = b.iter().position(|&c| c == 0).unwrap();
        read_split(&b[..i], &b[i + 1..], Split::Test).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn embedding_seeds_parse() {
    for (p, b) in seeds("sentence_store") {
        SentenceEmbeddingStore::read(&b[..]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("word_table") {
        WordEmbeddingTable::read(&b[..], OovPolicy::Zero).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("embedding_source") {
        text(&b).parse::<EmbeddingSource>().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn checkpoint_seeds_load() {
    let mut kinds: Vec<String> = seeds("checkpoint")
        .iter()
        .map(|(p, b)| {
            Checkpoint::from_json(text(b))
                .unwrap_or_else(|e| panic!("{}: {e}", p.display()))
                .kind()
                .to_string()
        })
        .collect();
    kinds.sort();
    assert_eq!(kinds, ["classifier", "contextual", "isolated"]);
}

#[test]
fn config_template_and_replay_seeds_parse() {
    for (p, b) in seeds("run_config") {
        RunConfig::from_toml(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("prompt_template") {
        PromptTemplate::new("seed", text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("replay") {
        ReplayClient::read(&b[..]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
