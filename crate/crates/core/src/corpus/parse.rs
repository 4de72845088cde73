use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Block, CorpusError, ListItem, SourceDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DocumentFormat {
    /// Blank-line separated paragraphs; lists detected from enumeration
    /// markers at line starts.
    #[default]
    Plain,
    /// Line-oriented markup: `# ` title, `¶ ` paragraph, `* ` list header,
    /// `- ` list item (indent two spaces per nesting level).
    Structured,
}

impl FromStr for DocumentFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(DocumentFormat::Plain),
            "structured" => Ok(DocumentFormat::Structured),
            other => Err(format!("unknown format '{other}' (expected plain|structured)")),
        }
    }
}

pub fn parse_document(
    doc_id: &str,
    raw: &str,
    format: DocumentFormat,
) -> Result<SourceDocument, CorpusError> {
    if raw.trim().is_empty() {
        return Err(CorpusError::malformed(1, "empty document"));
    }
    let (title, blocks) = match format {
        DocumentFormat::Plain => (String::new(), parse_plain(raw)),
        DocumentFormat::Structured => parse_structured(raw)?,
    };
    if blocks.is_empty() {
        return Err(CorpusError::malformed(1, "document has no blocks"));
    }
    Ok(SourceDocument {
        doc_id: doc_id.to_string(),
        title,
        jurisdiction: String::new(),
        blocks,
    })
}

// ---------------------------------------------------------------------------
// structured

enum Pending {
    Paragraph { lines: Vec<String> },
    List { line: usize, header: String, items: Vec<ListItem> },
}

fn parse_structured(raw: &str) -> Result<(String, Vec<Block>), CorpusError> {
    let mut title: Option<String> = None;
    let mut blocks = Vec::new();
    let mut pending: Option<Pending> = None;

    for (n, line) in raw.lines().enumerate() {
        let lineno = n + 1;
        let trimmed_end = line.trim_end();
        if trimmed_end.trim().is_empty() {
            flush(&mut pending, &mut blocks)?;
            continue;
        }
        if let Some(rest) = trimmed_end.strip_prefix("# ") {
            if title.is_some() {
                return Err(CorpusError::malformed(lineno, "second title line"));
            }
            flush(&mut pending, &mut blocks)?;
            title = Some(rest.trim().to_string());
        } else if let Some(rest) = trimmed_end.strip_prefix("¶ ").or_else(|| {
            (trimmed_end == "¶").then_some("")
        }) {
            flush(&mut pending, &mut blocks)?;
            let text = rest.trim();
            if text.is_empty() {
                return Err(CorpusError::malformed(lineno, "empty paragraph"));
            }
            pending = Some(Pending::Paragraph {
                lines: vec![text.to_string()],
            });
        } else if let Some(rest) = trimmed_end.strip_prefix("* ").or_else(|| {
            (trimmed_end == "*").then_some("")
        }) {
            flush(&mut pending, &mut blocks)?;
            let header = rest.trim();
            if header.is_empty() {
                return Err(CorpusError::malformed(lineno, "empty list header"));
            }
            pending = Some(Pending::List {
                line: lineno,
                header: header.to_string(),
                items: Vec::new(),
            });
        } else if let Some((depth, text)) = structured_item(trimmed_end) {
            let Some(Pending::List { items, .. }) = pending.as_mut() else {
                return Err(CorpusError::malformed(lineno, "list item outside a list"));
            };
            if text.is_empty() {
                return Err(CorpusError::malformed(lineno, "empty list item"));
            }
            insert_at_depth(items, depth, ListItem::leaf(text))
                .map_err(|reason| CorpusError::malformed(lineno, reason))?;
        } else {
            // continuation line
            match pending.as_mut() {
                Some(Pending::Paragraph { lines, .. }) => lines.push(trimmed_end.trim().to_string()),
                Some(Pending::List { items, header, .. }) => {
                    let text = trimmed_end.trim();
                    match deepest_last(items) {
                        Some(item) => {
                            item.text.push(' ');
                            item.text.push_str(text);
                        }
                        None => {
                            header.push(' ');
                            header.push_str(text);
                        }
                    }
                }
                None => {
                    return Err(CorpusError::malformed(
                        lineno,
                        "text outside a paragraph or list",
                    ))
                }
            }
        }
    }
    flush(&mut pending, &mut blocks)?;
    Ok((title.unwrap_or_default(), blocks))
}

/// `- item` with optional two-space indentation per depth level.
fn structured_item(line: &str) -> Option<(usize, &str)> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    let rest = &line[indent..];
    let text = rest.strip_prefix("- ").or_else(|| (rest == "-").then_some(""))?;
    Some((indent / 2, text.trim()))
}

fn flush(pending: &mut Option<Pending>, blocks: &mut Vec<Block>) -> Result<(), CorpusError> {
    let index = blocks.len();
    match pending.take() {
        None => {}
        Some(Pending::Paragraph { lines, .. }) => blocks.push(Block::Paragraph {
            index,
            text: lines.join("\n"),
        }),
        Some(Pending::List { line, header, items }) => {
            if items.is_empty() {
                return Err(CorpusError::malformed(line, "unclosed list: header without items"));
            }
            blocks.push(Block::List {
                index,
                header,
                items,
            });
        }
    }
    Ok(())
}

fn insert_at_depth(items: &mut Vec<ListItem>, depth: usize, item: ListItem) -> Result<(), String> {
    if depth == 0 {
        items.push(item);
        return Ok(());
    }
    match items.last_mut() {
        Some(parent) => insert_at_depth(&mut parent.children, depth - 1, item),
        None => Err("nested item without a parent item".to_string()),
    }
}

fn deepest_last(items: &mut [ListItem]) -> Option<&mut ListItem> {
    let last = items.last_mut()?;
    if last.children.is_empty() {
        Some(last)
    } else {
        deepest_last(&mut last.children)
    }
}

// ---------------------------------------------------------------------------
// plain

static MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:\((?P<paren>[A-Za-z]{1,4}|\d{1,3})\)|(?P<dot>\d{1,3})\.)\s+\S").unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MarkerClass {
    Lower,
    Upper,
    RomanLower,
    RomanUpper,
    ParenNumber,
    DotNumber,
}

#[derive(Debug, Clone, Copy)]
struct Marker {
    class: MarkerClass,
    ordinal: u32,
}

fn is_roman(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| "ivxlcIVXLC".contains(c)) && roman_value(s).is_some()
}

fn roman_value(s: &str) -> Option<u32> {
    let digit = |c: char| match c.to_ascii_lowercase() {
        'i' => Some(1),
        'v' => Some(5),
        'x' => Some(10),
        'l' => Some(50),
        'c' => Some(100),
        _ => None,
    };
    let values = s.chars().map(digit).collect::<Option<Vec<u32>>>()?;
    // subtractive pairs (iv, ix, ...) count the smaller digit negatively
    let total = values
        .windows(2)
        .fold(values.iter().sum::<u32>(), |acc, w| {
            if w[1] > w[0] {
                acc.saturating_sub(2 * w[0])
            } else {
                acc
            }
        });
    Some(total)
}

fn letter_ordinal(s: &str) -> Option<u32> {
    let mut chars = s.chars();
    let c = chars.next()?;
    // "(aa)" style continuation after "(z)"
    if chars.all(|d| d == c) && c.is_ascii_alphabetic() {
        let base = c.to_ascii_lowercase() as u32 - 'a' as u32 + 1;
        Some(base + 26 * (s.len() as u32 - 1))
    } else {
        None
    }
}

/// Parses a marker token and resolves the letter/roman ambiguity of
/// tokens like `(i)` against the list levels already open.
fn classify_marker(line: &str, levels: &[Marker]) -> Option<Marker> {
    let caps = MARKER.captures(line)?;
    if let Some(dot) = caps.name("dot") {
        return Some(Marker {
            class: MarkerClass::DotNumber,
            ordinal: dot.as_str().parse().ok()?,
        });
    }
    let token = caps.name("paren")?.as_str();
    if token.chars().all(|c| c.is_ascii_digit()) {
        return Some(Marker {
            class: MarkerClass::ParenNumber,
            ordinal: token.parse().ok()?,
        });
    }
    let upper = token.chars().all(|c| c.is_ascii_uppercase());
    let lower = token.chars().all(|c| c.is_ascii_lowercase());
    if !upper && !lower {
        return None;
    }
    let (letter_class, roman_class) = if upper {
        (MarkerClass::Upper, MarkerClass::RomanUpper)
    } else {
        (MarkerClass::Lower, MarkerClass::RomanLower)
    };
    let letter = letter_ordinal(token).map(|ordinal| Marker {
        class: letter_class,
        ordinal,
    });
    let roman = if is_roman(token) {
        roman_value(token).map(|ordinal| Marker {
            class: roman_class,
            ordinal,
        })
    } else {
        None
    };
    match (letter, roman) {
        (Some(l), Some(r)) => {
            let letter_level = levels.iter().find(|m| m.class == letter_class);
            let roman_open = levels.iter().any(|m| m.class == roman_class);
            match letter_level {
                Some(open) if open.ordinal + 1 == l.ordinal => Some(l),
                Some(_) => Some(r),
                None if roman_open => Some(r),
                // a fresh "(i)" opens a roman list; any other letter a letter list
                None if r.ordinal == 1 && !levels.is_empty() => Some(r),
                None => Some(l),
            }
        }
        (Some(l), None) => Some(l),
        (None, Some(r)) => Some(r),
        (None, None) => None,
    }
}

fn parse_plain(raw: &str) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut group: Vec<&str> = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !group.is_empty() {
                plain_group(&group, &mut blocks);
                group.clear();
            }
        } else {
            group.push(line);
        }
    }
    if !group.is_empty() {
        plain_group(&group, &mut blocks);
    }
    blocks
}

fn plain_group(lines: &[&str], blocks: &mut Vec<Block>) {
    let index = blocks.len();
    let first_marker = lines
        .iter()
        .position(|l| classify_marker(l, &[]).is_some());
    let header_end = match first_marker {
        Some(0) | None => {
            let text = lines.iter().map(|l| l.trim()).collect::<Vec<_>>().join("\n");
            blocks.push(Block::Paragraph { index, text });
            return;
        }
        Some(i) => i,
    };
    let header = lines[..header_end]
        .iter()
        .map(|l| l.trim())
        .collect::<Vec<_>>()
        .join(" ");

    let mut levels: Vec<Marker> = Vec::new();
    let mut items: Vec<ListItem> = Vec::new();
    for line in &lines[header_end..] {
        let text = line.trim();
        match classify_marker(line, &levels) {
            Some(marker) => {
                let depth = match levels.iter().position(|m| m.class == marker.class) {
                    Some(p) => {
                        levels.truncate(p + 1);
                        levels[p] = marker;
                        p
                    }
                    None => {
                        levels.push(marker);
                        levels.len() - 1
                    }
                };
                // depth never exceeds the open path, so this cannot fail
                let _ = insert_at_depth(&mut items, depth, ListItem::leaf(text));
            }
            None => {
                if let Some(item) = deepest_last(&mut items) {
                    item.text.push(' ');
                    item.text.push_str(text);
                }
            }
        }
    }
    blocks.push(Block::List {
        index,
        header,
        items,
    });
}
