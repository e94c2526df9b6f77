use super::{EmbeddingBackend, EmbeddingError, Vector};

/// Feature-hashing bag-of-words embedder.
///
/// Lowercased alphanumeric word unigrams are hashed (FNV-1a, 64-bit) into a
/// fixed number of buckets; term counts are L2-normalized. Text without any
/// word maps to the zero vector.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    max_input_tokens: usize,
    id: String,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(4096)
    }
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        HashingEmbedder {
            dimension,
            max_input_tokens: usize::MAX,
            id: format!("hashing-{dimension}"),
        }
    }

    /// Caps the accepted input length, forcing long queries to be pooled.
    pub fn with_max_input_tokens(mut self, max_input_tokens: usize) -> Self {
        self.max_input_tokens = max_input_tokens;
        self
    }

    pub fn embed_one(&self, text: &str) -> Vector {
        let mut counts = vec![0f32; self.dimension];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let bucket = fnv1a(word.to_lowercase().as_bytes()) % self.dimension as u64;
            counts[bucket as usize] += 1.0;
        }
        Vector(counts).normalized()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl EmbeddingBackend for HashingEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
