/// Token count estimator used to keep prompts inside a model's context
/// window.
///
/// Implementations must be deterministic and monotone under concatenation:
/// `count(a + b) >= max(count(a), count(b))`.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`, counted in Unicode scalar values.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharHeuristic;

impl TokenCounter for CharHeuristic {
    fn count(&self, text: &str) -> usize {
        estimate_tokens(text)
    }
}

impl<F> TokenCounter for F
where
    F: Fn(&str) -> usize + Send + Sync,
{
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_is_zero() {
        assert_eq!(estimate_tokens(""), 0);
    }

    #[test]
    fn eight_chars_is_two() {
        assert_eq!(estimate_tokens("abcdefgh"), 2);
        assert_eq!(estimate_tokens("abcdefghi"), 3);
    }

    #[test]
    fn counts_scalars_not_bytes() {
        assert_eq!(estimate_tokens("éééé"), 1);
    }

    proptest! {
        #[test]
        fn monotone_under_concatenation(a in ".{0,64}", b in ".{0,64}") {
            let joined = format!("{a}{b}");
            let whole = estimate_tokens(&joined);
            prop_assert!(whole >= estimate_tokens(&a));
            prop_assert!(whole >= estimate_tokens(&b));
        }
    }
}
