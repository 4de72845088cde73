//! Shared shape of model answers: a leading identifier clause followed by
//! free-text rationale, e.g. `R5, R7. Because both duties appear ...`.

/// Splits a response into its leading clause (up to and including the first
/// sentence terminator or line break) and the trimmed remainder.
pub fn leading_clause(raw: &str) -> (&str, &str) {
    let text = raw.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '\n' {
            return (text[..i].trim_end(), text[i..].trim());
        }
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => return (text, ""),
                Some(&(j, next)) if next.is_whitespace() => return (&text[..j], text[j..].trim()),
                _ => {}
            }
        }
    }
    (text, "")
}
