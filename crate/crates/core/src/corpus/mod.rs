//! Regulatory text ingestion.
//!
//! A [`SourceDocument`] is an ordered list of blocks (paragraphs and
//! enumerated lists). Two units of analysis are derived from it:
//!
//! * sentence-level [`Provision`]s for concept classification, with list
//!   items expanded so that each item carries its list header as a prefix;
//! * token-bounded [`Passage`]s for compliance checking, one per block
//!   unless the block is too large for the budget.

mod chunk;
mod parse;
mod sentences;
mod tokens;

use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

pub use chunk::{chunk_paragraphs, chunk_paragraphs_with};
pub use parse::{parse_document, DocumentFormat};
pub use sentences::{expand_list_items, split_sentences, split_sentences_with, SentenceSplitter};
pub use tokens::{estimate_tokens, CharHeuristic, TokenCounter};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("malformed input at line {line}: {reason}")]
    MalformedInput { line: usize, reason: String },
    #[error("block {block}: a single sentence needs {tokens} tokens, budget is {budget}")]
    UnchunkableText {
        block: usize,
        tokens: usize,
        budget: usize,
    },
    #[error("token budget must be positive")]
    ZeroBudget,
}

impl CorpusError {
    pub(crate) fn malformed(line: usize, reason: impl Into<String>) -> Self {
        CorpusError::MalformedInput {
            line,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    #[serde(default)]
    pub jurisdiction: String,
    pub blocks: Vec<Block>,
}

impl SourceDocument {
    pub fn with_jurisdiction(mut self, tag: impl Into<String>) -> Self {
        self.jurisdiction = tag.into();
        self
    }
}

/// One item of an enumerated list. Items with children act as a nested
/// header for them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListItem {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ListItem>,
}

impl ListItem {
    pub fn leaf(text: impl Into<String>) -> Self {
        ListItem {
            text: text.into(),
            children: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    Paragraph {
        index: usize,
        text: String,
    },
    List {
        index: usize,
        header: String,
        items: Vec<ListItem>,
    },
}

impl Block {
    pub fn index(&self) -> usize {
        match self {
            Block::Paragraph { index, .. } | Block::List { index, .. } => *index,
        }
    }

    /// Block content as flat text. Lists render the header and then one
    /// line per item, depth first.
    pub fn text(&self) -> String {
        match self {
            Block::Paragraph { text, .. } => text.clone(),
            Block::List { header, items, .. } => {
                let mut lines = vec![header.clone()];
                fn walk(items: &[ListItem], lines: &mut Vec<String>) {
                    for item in items {
                        lines.push(item.text.clone());
                        walk(&item.children, lines);
                    }
                }
                walk(items, &mut lines);
                lines.join("\n")
            }
        }
    }
}

/// `doc_id:block:sentence`
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
pub struct ProvisionId {
    pub doc_id: String,
    pub block: usize,
    pub sentence: usize,
}

impl fmt::Display for ProvisionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.doc_id, self.block, self.sentence)
    }
}

impl Serialize for ProvisionId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Plain,
    ListExpanded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provision {
    pub id: ProvisionId,
    pub text: String,
    pub origin: Origin,
}

/// `doc_id#seq`
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
pub struct PassageId {
    pub doc_id: String,
    pub seq: usize,
}

impl fmt::Display for PassageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.seq)
    }
}

impl Serialize for PassageId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Passage {
    pub id: PassageId,
    pub text: String,
    pub token_estimate: usize,
    /// Inclusive block index range the passage was cut from.
    pub first_block: usize,
    pub last_block: usize,
}

/// Collapses every whitespace run to a single space and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
