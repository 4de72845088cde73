use std::collections::BTreeSet;
use std::ops::Range;

use super::{normalize_whitespace, Block, ListItem, Origin, Provision, ProvisionId, SourceDocument};

/// Abbreviations that end in a period but never end a sentence in
/// legislative drafting.
pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "s.", "ss.", "art.", "arts.", "no.", "nos.", "e.g.", "i.e.", "para.", "paras.", "subs.",
    "subpara.", "sec.", "secs.", "reg.", "regs.", "sch.", "ch.", "cl.", "p.", "pp.", "cf.", "v.",
    "vs.", "fig.", "approx.", "inc.", "ltd.", "co.", "corp.", "mr.", "ms.", "dr.", "st.",
];

/// Rule-based sentence boundary detector.
///
/// A boundary is a run of `.`, `!` or `?` (plus closing quotes or
/// brackets) followed by whitespace and a character that is not a
/// lowercase letter. Periods that close a known abbreviation or an
/// initialism such as `U.S.` are not boundaries.
#[derive(Debug, Clone)]
pub struct SentenceSplitter {
    abbreviations: BTreeSet<String>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        Self::with_abbreviations(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '”' | '’' | '»')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '“' | '‘' | '«')
}

fn is_initialism(token: &str) -> bool {
    let mut count = 0;
    let mut chars = token.chars();
    loop {
        match (chars.next(), chars.next()) {
            (None, _) => return count >= 2,
            (Some(l), Some('.')) if l.is_alphabetic() => count += 1,
            _ => return false,
        }
    }
}

impl SentenceSplitter {
    pub fn with_abbreviations<'a>(abbrevs: impl IntoIterator<Item = &'a str>) -> Self {
        SentenceSplitter {
            abbreviations: abbrevs.into_iter().map(|a| a.to_lowercase()).collect(),
        }
    }

    pub fn add_abbreviation(&mut self, abbrev: &str) {
        self.abbreviations.insert(abbrev.to_lowercase());
    }

    pub fn abbreviations(&self) -> impl Iterator<Item = &str> {
        self.abbreviations.iter().map(String::as_str)
    }

    /// Byte spans of the sentences in `text`, trimmed of surrounding
    /// whitespace. Every non-whitespace character falls in exactly one span.
    pub fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let n = chars.len();
        let mut spans = Vec::new();
        let mut start = 0usize;
        let mut i = 0usize;
        while i < n {
            let c = chars[i].1;
            if !matches!(c, '.' | '!' | '?') {
                i += 1;
                continue;
            }
            let term = i;
            let mut j = i + 1;
            while j < n && matches!(chars[j].1, '.' | '!' | '?') {
                j += 1;
            }
            while j < n && is_closer(chars[j].1) {
                j += 1;
            }
            if j >= n {
                break;
            }
            if !chars[j].1.is_whitespace() {
                i = j;
                continue;
            }
            let mut k = j;
            while k < n && chars[k].1.is_whitespace() {
                k += 1;
            }
            if k >= n {
                break;
            }
            if self.is_boundary(text, &chars, term, chars[k].1) {
                push_trimmed(text, start..chars[j].0, &mut spans);
                start = chars[k].0;
            }
            i = k;
        }
        push_trimmed(text, start..text.len(), &mut spans);
        spans
    }

    pub fn split<'t>(&self, text: &'t str) -> Vec<&'t str> {
        self.spans(text).into_iter().map(|r| &text[r]).collect()
    }

    fn is_boundary(&self, text: &str, chars: &[(usize, char)], term: usize, next: char) -> bool {
        if next.is_lowercase() {
            return false;
        }
        if chars[term].1 != '.' {
            return true;
        }
        let mut w = term;
        while w > 0 && !chars[w - 1].1.is_whitespace() {
            w -= 1;
        }
        let end = chars[term].0 + 1;
        let token = text[chars[w].0..end].trim_start_matches(is_opener);
        let lower = token.to_lowercase();
        !(self.abbreviations.contains(&lower) || is_initialism(token))
    }
}

fn push_trimmed(text: &str, range: Range<usize>, spans: &mut Vec<Range<usize>>) {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    if lead + trail < slice.len() {
        spans.push(range.start + lead..range.end - trail);
    }
}

pub fn split_sentences(doc: &SourceDocument) -> Vec<Provision> {
    split_sentences_with(doc, &SentenceSplitter::default())
}

/// Sentence-level provisions for every block in source order. List blocks
/// are expanded with their header prefix instead of being split.
pub fn split_sentences_with(doc: &SourceDocument, splitter: &SentenceSplitter) -> Vec<Provision> {
    let mut out = Vec::new();
    for block in &doc.blocks {
        match block {
            Block::Paragraph { index, text } => {
                for (sentence, span) in splitter.spans(text).into_iter().enumerate() {
                    out.push(Provision {
                        id: ProvisionId {
                            doc_id: doc.doc_id.clone(),
                            block: *index,
                            sentence,
                        },
                        text: normalize_whitespace(&text[span]),
                        origin: Origin::Plain,
                    });
                }
            }
            Block::List { .. } => out.extend(expand_list_items(&doc.doc_id, block)),
        }
    }
    out
}

/// One provision per leaf item: `header + " " + item`, with the headers of
/// nested lists composed outermost first. Non-list blocks yield nothing.
pub fn expand_list_items(doc_id: &str, block: &Block) -> Vec<Provision> {
    let Block::List {
        index,
        header,
        items,
    } = block
    else {
        return Vec::new();
    };
    let mut texts = Vec::new();
    expand(header.trim(), items, &mut texts);
    texts
        .into_iter()
        .enumerate()
        .map(|(sentence, text)| Provision {
            id: ProvisionId {
                doc_id: doc_id.to_string(),
                block: *index,
                sentence,
            },
            text,
            origin: Origin::ListExpanded,
        })
        .collect()
}

fn expand(prefix: &str, items: &[ListItem], out: &mut Vec<String>) {
    for item in items {
        let joined = format!("{prefix} {}", normalize_whitespace(&item.text));
        if item.children.is_empty() {
            out.push(joined);
        } else {
            expand(&joined, &item.children, out);
        }
    }
}
