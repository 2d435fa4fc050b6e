//! Unified corpus: source descriptors, vocabulary merging, caption expansion,
//! the chat-record line format and the JSON-lines manifest.

mod chat;
mod expander;
mod manifest;
mod vocab;

use std::path::{Path, PathBuf};

pub use chat::{
    parse_chat_record, serialize_chat_record, ChatParseError, ChatParseErrorKind, ChatRecord,
    ChatRecordError, Segment, StreamId,
};
pub use expander::{
    parse_templates, standardize_label, CaptionExpander, CommandTransport, ServiceExpander,
    TemplateExpander, Transport,
};
pub use manifest::{
    build_manifest, summary_table, InteractionRecord, Manifest, CLIP_EXTENSIONS, MASK_EXTENSION,
};
pub use vocab::{
    build_vocabulary, bundled_sources, canonicalize, parse_sources, AliasRule, AliasScope,
    AliasTable, SourceDescriptor, UnifiedVocabulary,
};

/// Classes held out of training for open-set evaluation.
pub fn bundled_unseen_classes() -> Vec<String> {
    include_str!("../../data/unseen_classes.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("alias `{label}` maps to both `{first}` and `{second}`")]
    ConflictingAlias {
        label: String,
        first: String,
        second: String,
    },
    #[error("no template for label `{0}`")]
    NoTemplate(String),
    #[error("caption service failed for `{label}` after {attempts} attempts: {last_error}")]
    ExpanderUnavailable {
        label: String,
        attempts: u32,
        last_error: String,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
