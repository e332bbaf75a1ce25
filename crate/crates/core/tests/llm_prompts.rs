use std::path::Path;

use erc_core::corpus::{load_split, Split};
use erc_core::llm::{build_prompt, PromptTemplate, BUILTIN_TEMPLATES};

fn fixture_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

#[test]
fn builtin_templates_match_golden_prompts() {
    let test = load_split(&fixture_dir().join("dailydialog"), Split::Test).unwrap();
    let dialog = &test.dialogs[0];
    for name in BUILTIN_TEMPLATES {
        let prompt = build_prompt(dialog, &PromptTemplate::builtin(name).unwrap()).unwrap();
        let golden = fixture_dir().join("prompts").join(format!("{name}.txt"));
        if std::env::var_os("ERC_BLESS").is_some() {
            std::fs::write(&golden, &prompt).unwrap();
        }
        assert_eq!(prompt, std::fs::read_to_string(&golden).unwrap(), "{name}");
    }
}

#[test]
fn template_files_load_by_path() {
    let t = PromptTemplate::resolve(concat!(env!("CARGO_MANIFEST_DIR"), "/templates/falcon-style.txt")).unwrap();
    assert_eq!(t.name(), "falcon-style");
    assert_eq!(t, PromptTemplate::builtin("falcon-style").unwrap());
}
