use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::Note;
use crate::tokenize::TokenCounter;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkKey {
    pub patient_id: String,
    pub note_id: String,
    pub chunk_index: usize,
}

/// A contiguous slice of a note holding at most `window` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub patient_id: String,
    pub note_id: String,
    pub chunk_index: usize,
    pub note_date: NaiveDate,
    /// Token offsets `[start, end)` within the note.
    pub token_span: (usize, usize),
    pub text: String,
}

impl Chunk {
    pub fn key(&self) -> ChunkKey {
        ChunkKey {
            patient_id: self.patient_id.clone(),
            note_id: self.note_id.clone(),
            chunk_index: self.chunk_index,
        }
    }

    pub fn token_count(&self) -> usize {
        self.token_span.1 - self.token_span.0
    }

    /// Chronological order used for prompt injection.
    pub fn chronological_cmp(&self, other: &Chunk) -> std::cmp::Ordering {
        (self.note_date, &self.note_id, self.chunk_index).cmp(&(other.note_date, &other.note_id, other.chunk_index))
    }
}

/// Splits a note into consecutive windows of `window` tokens.
///
/// Whitespace between tokens stays with the preceding chunk and leading
/// whitespace with the first, so concatenating chunk texts in order gives
/// back the note text exactly.
pub fn chunk_text(note: &Note, window: usize, tokenizer: &dyn TokenCounter) -> Vec<Chunk> {
    assert!(window >= 1, "chunk window must be at least one token");
    let spans = tokenizer.token_spans(&note.text);
    let make = |index: usize, tokens: (usize, usize), bytes: (usize, usize)| Chunk {
        patient_id: note.patient_id.clone(),
        note_id: note.note_id.clone(),
        chunk_index: index,
        note_date: note.date,
        token_span: tokens,
        text: note.text[bytes.0..bytes.1].to_string(),
    };
    if spans.is_empty() {
        return vec![make(0, (0, 0), (0, note.text.len()))];
    }

    let n_chunks = spans.len().div_ceil(window);
    (0..n_chunks)
        .map(|i| {
            let first = i * window;
            let next = first + window;
            let start_byte = if i == 0 { 0 } else { spans[first].start };
            let end_byte = spans.get(next).map_or(note.text.len(), |s| s.start);
            make(i, (first, next.min(spans.len())), (start_byte, end_byte))
        })
        .collect()
}
