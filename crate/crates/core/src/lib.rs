//! An end-to-end, desk-scale open-world agent pipeline: a crafting knowledge
//! base, a deterministic seeded simulator, schematic snapshot rendering with
//! an invertible caption grammar, an instruction-dataset generator, a unified
//! visual/text token codec, a miniature decoder-only model, a skill-graph
//! planner, and the benchmark harness tying them together.

pub mod codec;
pub mod dataset;
pub mod eval;
pub mod kb;
pub mod model;
pub mod planner;
pub mod render;
pub mod seed;
pub mod sim;
pub mod wiki;

use std::path::PathBuf;

/// Directory of the bundled `minecraft_core` knowledge-base fixture.
pub fn fixture_kb_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/kb/minecraft_core")
}

/// Directory of the bundled wiki HTML fixture corpus.
pub fn fixture_wiki_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/wiki")
}

/// Directory of the frozen golden outputs for the wiki fixture corpus.
pub fn fixture_wiki_golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/wiki_golden")
}
