use std::ops::Range;

use super::{Block, CorpusError, Passage, PassageId, SentenceSplitter, SourceDocument, TokenCounter};

pub fn chunk_paragraphs(
    doc: &SourceDocument,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<Passage>, CorpusError> {
    chunk_paragraphs_with(doc, budget, counter, &SentenceSplitter::default())
}

/// Cuts every block into passages whose token count fits `budget`.
///
/// A block that fits becomes one passage verbatim. An oversize block is
/// bisected at the sentence boundary (list blocks: item boundary) nearest
/// its middle, recursively, until every piece fits.
pub fn chunk_paragraphs_with(
    doc: &SourceDocument,
    budget: usize,
    counter: &dyn TokenCounter,
    splitter: &SentenceSplitter,
) -> Result<Vec<Passage>, CorpusError> {
    if budget == 0 {
        return Err(CorpusError::ZeroBudget);
    }
    let mut passages = Vec::new();
    for block in &doc.blocks {
        let text = block.text();
        let units = match block {
            Block::Paragraph { .. } => splitter.spans(&text),
            Block::List { .. } => line_spans(&text),
        };
        if units.is_empty() {
            continue;
        }
        let mut pieces = Vec::new();
        bisect(&text, &units, budget, counter, block.index(), &mut pieces)?;
        for (piece, tokens) in pieces {
            passages.push(Passage {
                id: PassageId {
                    doc_id: doc.doc_id.clone(),
                    seq: passages.len(),
                },
                text: text[piece].to_string(),
                token_estimate: tokens,
                first_block: block.index(),
                last_block: block.index(),
            });
        }
    }
    Ok(passages)
}

fn line_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut offset = 0;
    for line in text.split('\n') {
        let lead = line.len() - line.trim_start().len();
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            spans.push(offset + lead..offset + lead + trimmed.len());
        }
        offset += line.len() + 1;
    }
    spans
}

fn bisect(
    text: &str,
    units: &[Range<usize>],
    budget: usize,
    counter: &dyn TokenCounter,
    block: usize,
    out: &mut Vec<(Range<usize>, usize)>,
) -> Result<(), CorpusError> {
    let whole = units[0].start..units[units.len() - 1].end;
    let tokens = counter.count(&text[whole.clone()]);
    if tokens <= budget {
        out.push((whole, tokens));
        return Ok(());
    }
    if units.len() == 1 {
        return Err(CorpusError::UnchunkableText {
            block,
            tokens,
            budget,
        });
    }
    let mid = whole.start + (whole.end - whole.start) / 2;
    let cut = (1..units.len())
        .min_by_key(|&k| units[k].start.abs_diff(mid))
        .expect("at least two units");
    bisect(text, &units[..cut], budget, counter, block, out)?;
    bisect(text, &units[cut..], budget, counter, block, out)
}
