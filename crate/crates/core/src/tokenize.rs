//! Token counting.
//!
//! No tokenizer is fixed by the pipeline: every stage takes a
//! [`TokenCounter`] and reports name the counter used. The default counts
//! whitespace-delimited words.

use std::ops::Range;

pub trait TokenCounter: Send + Sync {
    /// Name recorded alongside token statistics.
    fn name(&self) -> &str;

    /// Byte ranges of each token in `text`, in order and non-overlapping.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenCounter;

impl TokenCounter for WhitespaceTokenCounter {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spans_cover_words() {
        let t = WhitespaceTokenCounter;
        let text = "  alpha beta\n\tgamma ";
        let words: Vec<&str> = t.token_spans(text).into_iter().map(|r| &text[r]).collect();
        assert_eq!(words, ["alpha", "beta", "gamma"]);
        assert_eq!(t.count(text), 3);
        assert_eq!(t.count(""), 0);
        assert_eq!(t.count("   \n"), 0);
    }

    proptest! {
        #[test]
        fn count_matches_spans(text in "\\PC{0,200}") {
            let t = WhitespaceTokenCounter;
            prop_assert_eq!(t.count(&text), t.token_spans(&text).len());
        }
    }
}
