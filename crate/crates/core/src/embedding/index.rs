//! The embedding database: one vector per note chunk plus one per criterion
//! and one for the concatenation of all criteria.
//!
//! Persisted as a single file: a JSON header line followed by binary records
//! `(u32 key length, key bytes, u32 dimension, dimension x f32)`, all
//! little-endian. Keys are unit-separator (0x1F) joined fields.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{chunk_text, cosine_similarity, embed, Chunk, EmbeddingBackend, EmbeddingError, Vector, DEFAULT_CHUNK_WINDOW};
use crate::corpus::{Corpus, CriterionSpec, Note};
use crate::retry::RetryPolicy;
use crate::tokenize::TokenCounter;

const FORMAT_NAME: &str = "trialmatch-embedding-index";
const FORMAT_VERSION: u32 = 1;
const SEP: char = '\u{1f}';

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueryKey {
    Criterion(String),
    /// All criteria concatenated, used by the all-criteria strategies.
    Concat,
}

impl fmt::Display for QueryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryKey::Criterion(id) => write!(f, "criterion {id:?}"),
            QueryKey::Concat => f.write_str("concatenated criteria"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndexConfig {
    pub chunk_window: usize,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            chunk_window: DEFAULT_CHUNK_WINDOW,
            batch_size: 32,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub format: String,
    pub version: u32,
    pub backend_id: String,
    pub chunk_window: usize,
    pub tokenizer: String,
    pub dimension: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct IndexedChunk {
    chunk: Chunk,
    vector: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    backend_id: String,
    chunk_window: usize,
    tokenizer: String,
    dimension: usize,
    patients: BTreeMap<String, Vec<IndexedChunk>>,
    queries: BTreeMap<QueryKey, Vector>,
}

/// Text embedded for a single criterion query.
pub fn criterion_query_text(criterion: &CriterionSpec) -> String {
    format!("{}: {}", criterion.criterion_id, criterion.definition)
}

/// Text embedded for the concatenated-criteria query.
pub fn concat_query_text(criteria: &[CriterionSpec]) -> String {
    criteria.iter().map(criterion_query_text).collect::<Vec<_>>().join("\n")
}

impl EmbeddingIndex {
    /// Chunks every note, embeds chunks in concurrent batches, and embeds
    /// each criterion plus the concatenated criteria.
    pub fn build(
        corpus: &Corpus,
        criteria: &[CriterionSpec],
        backend: &dyn EmbeddingBackend,
        tokenizer: &dyn TokenCounter,
        config: &IndexConfig,
    ) -> Result<Self, EmbeddingError> {
        let chunks: Vec<Chunk> = corpus
            .patients()
            .iter()
            .flat_map(|p| &p.notes)
            .flat_map(|n| chunk_text(n, config.chunk_window, tokenizer))
            .collect();
        let vectors = embed_concurrently(backend, &chunks, config)?;

        let mut patients: BTreeMap<String, Vec<IndexedChunk>> = BTreeMap::new();
        for (chunk, vector) in chunks.into_iter().zip(vectors) {
            patients
                .entry(chunk.patient_id.clone())
                .or_default()
                .push(IndexedChunk { chunk, vector });
        }
        for list in patients.values_mut() {
            list.sort_by(|a, b| a.chunk.chronological_cmp(&b.chunk));
        }

        let mut queries = BTreeMap::new();
        for criterion in criteria {
            let v = embed_query(backend, &criterion_query_text(criterion), tokenizer, &config.retry)?;
            queries.insert(QueryKey::Criterion(criterion.criterion_id.clone()), v);
        }
        if !criteria.is_empty() {
            let v = embed_query(backend, &concat_query_text(criteria), tokenizer, &config.retry)?;
            queries.insert(QueryKey::Concat, v);
        }

        Ok(EmbeddingIndex {
            backend_id: backend.backend_id().to_string(),
            chunk_window: config.chunk_window,
            tokenizer: tokenizer.name().to_string(),
            dimension: backend.dimension(),
            patients,
            queries,
        })
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn chunk_window(&self) -> usize {
        self.chunk_window
    }

    pub fn tokenizer(&self) -> &str {
        &self.tokenizer
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn covers_patient(&self, patient_id: &str) -> bool {
        self.patients.contains_key(patient_id)
    }

    /// All chunks of a patient in chronological order.
    pub fn patient_chunks(&self, patient_id: &str) -> Result<Vec<&Chunk>, EmbeddingError> {
        self.patients
            .get(patient_id)
            .map(|list| list.iter().map(|c| &c.chunk).collect())
            .ok_or_else(|| EmbeddingError::UnknownPatient(patient_id.to_string()))
    }

    pub fn chunk_vectors(&self, patient_id: &str) -> Result<Vec<(&Chunk, &Vector)>, EmbeddingError> {
        self.patients
            .get(patient_id)
            .map(|list| list.iter().map(|c| (&c.chunk, &c.vector)).collect())
            .ok_or_else(|| EmbeddingError::UnknownPatient(patient_id.to_string()))
    }

    pub fn query_vector(&self, key: &QueryKey) -> Result<&Vector, EmbeddingError> {
        self.queries
            .get(key)
            .ok_or_else(|| EmbeddingError::UnknownQuery(key.to_string()))
    }

    pub fn chunk_count(&self) -> usize {
        self.patients.values().map(Vec::len).sum()
    }

    /// The `k` chunks most similar to the query, returned in chronological
    /// order. Ties on score prefer the more recent note, then the smaller
    /// note id, then the earlier chunk. A chunk with a zero vector scores 0.
    pub fn top_k_chunks(&self, patient_id: &str, query: &QueryKey, k: usize) -> Result<Vec<&Chunk>, EmbeddingError> {
        if k == 0 {
            return Err(EmbeddingError::InvalidK);
        }
        let list = self
            .patients
            .get(patient_id)
            .ok_or_else(|| EmbeddingError::UnknownPatient(patient_id.to_string()))?;
        let q = self.query_vector(query)?;

        let mut scored: Vec<(f64, &Chunk)> = Vec::with_capacity(list.len());
        for item in list {
            let score = match cosine_similarity(q, &item.vector) {
                Ok(s) => s,
                Err(EmbeddingError::ZeroVector) => 0.0,
                Err(e) => return Err(e),
            };
            scored.push((score, &item.chunk));
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| rank_cmp(a.0, a.1, b.0, b.1));
            scored.truncate(k);
        }
        let mut picked: Vec<&Chunk> = scored.into_iter().map(|(_, c)| c).collect();
        picked.sort_by(|a, b| a.chronological_cmp(b));
        Ok(picked)
    }

    pub fn header(&self) -> IndexHeader {
        IndexHeader {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            backend_id: self.backend_id.clone(),
            chunk_window: self.chunk_window,
            tokenizer: self.tokenizer.clone(),
            dimension: self.dimension,
            records: self.queries.len() + self.chunk_count(),
        }
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), EmbeddingError> {
        let mut w = BufWriter::new(writer);
        serde_json::to_writer(&mut w, &self.header()).map_err(|e| EmbeddingError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for (key, vector) in &self.queries {
            let key = match key {
                QueryKey::Criterion(id) => join_key(&["criterion", id])?,
                QueryKey::Concat => "concat".to_string(),
            };
            write_record(&mut w, &key, vector)?;
        }
        for list in self.patients.values() {
            for item in list {
                let c = &item.chunk;
                let key = join_key(&["chunk", &c.patient_id, &c.note_id, &c.chunk_index.to_string()])?;
                write_record(&mut w, &key, &item.vector)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        self.write_to(std::fs::File::create(&tmp)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read_header(path: impl AsRef<Path>) -> Result<IndexHeader, EmbeddingError> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        read_header_line(&mut reader)
    }

    /// Loads a persisted index, re-deriving chunk text and spans from the
    /// corpus with the stored window. Every chunk and criterion must have a
    /// stored vector.
    pub fn load(
        path: impl AsRef<Path>,
        corpus: &Corpus,
        criteria: &[CriterionSpec],
        tokenizer: &dyn TokenCounter,
    ) -> Result<Self, EmbeddingError> {
        Self::read_from(std::fs::File::open(path)?, corpus, criteria, tokenizer)
    }

    pub fn read_from<R: Read>(
        reader: R,
        corpus: &Corpus,
        criteria: &[CriterionSpec],
        tokenizer: &dyn TokenCounter,
    ) -> Result<Self, EmbeddingError> {
        let mut reader = BufReader::new(reader);
        let header = read_header_line(&mut reader)?;
        if header.tokenizer != tokenizer.name() {
            return Err(EmbeddingError::Format(format!(
                "index built with tokenizer {:?}, expected {:?}",
                header.tokenizer,
                tokenizer.name()
            )));
        }
        let mut records = BTreeMap::new();
        for _ in 0..header.records {
            let (key, vector) = read_record(&mut reader)?;
            if vector.dimension() != header.dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    left: vector.dimension(),
                    right: header.dimension,
                });
            }
            records.insert(key, vector);
        }

        let mut queries = BTreeMap::new();
        for c in criteria {
            let key = join_key(&["criterion", &c.criterion_id])?;
            let v = records
                .remove(&key)
                .ok_or_else(|| EmbeddingError::Incomplete(format!("no vector for criterion {:?}", c.criterion_id)))?;
            queries.insert(QueryKey::Criterion(c.criterion_id.clone()), v);
        }
        if !criteria.is_empty() {
            let v = records
                .remove("concat")
                .ok_or_else(|| EmbeddingError::Incomplete("no concatenated-criteria vector".into()))?;
            queries.insert(QueryKey::Concat, v);
        }

        let mut patients = BTreeMap::new();
        for patient in corpus.patients() {
            let mut list = Vec::new();
            for note in &patient.notes {
                for chunk in chunk_text(note, header.chunk_window, tokenizer) {
                    let key = join_key(&["chunk", &chunk.patient_id, &chunk.note_id, &chunk.chunk_index.to_string()])?;
                    let vector = records.remove(&key).ok_or_else(|| {
                        EmbeddingError::Incomplete(format!(
                            "no vector for chunk {} of note {:?} (patient {:?})",
                            chunk.chunk_index, chunk.note_id, chunk.patient_id
                        ))
                    })?;
                    list.push(IndexedChunk { chunk, vector });
                }
            }
            list.sort_by(|a, b| a.chunk.chronological_cmp(&b.chunk));
            patients.insert(patient.patient_id.clone(), list);
        }

        Ok(EmbeddingIndex {
            backend_id: header.backend_id,
            chunk_window: header.chunk_window,
            tokenizer: header.tokenizer,
            dimension: header.dimension,
            patients,
            queries,
        })
    }

    /// Reuses the file at `path` when its header matches the requested
    /// backend, window and tokenizer and it covers the corpus; otherwise
    /// rebuilds and overwrites it.
    pub fn load_or_build(
        path: impl AsRef<Path>,
        corpus: &Corpus,
        criteria: &[CriterionSpec],
        backend: &dyn EmbeddingBackend,
        tokenizer: &dyn TokenCounter,
        config: &IndexConfig,
    ) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        if path.exists() {
            match Self::read_header(path) {
                Ok(h)
                    if h.backend_id == backend.backend_id()
                        && h.chunk_window == config.chunk_window
                        && h.tokenizer == tokenizer.name()
                        && h.dimension == backend.dimension() =>
                {
                    match Self::load(path, corpus, criteria, tokenizer) {
                        Ok(index) => return Ok(index),
                        Err(e) => log::info!("rebuilding index at {}: {e}", path.display()),
                    }
                }
                Ok(_) => log::info!("index header at {} does not match config; rebuilding", path.display()),
                Err(e) => log::info!("unreadable index at {}: {e}; rebuilding", path.display()),
            }
        }
        let index = Self::build(corpus, criteria, backend, tokenizer, config)?;
        index.save(path)?;
        Ok(index)
    }
}

fn rank_cmp(sa: f64, a: &Chunk, sb: f64, b: &Chunk) -> std::cmp::Ordering {
    sb.total_cmp(&sa)
        .then_with(|| b.note_date.cmp(&a.note_date))
        .then_with(|| a.note_id.cmp(&b.note_id))
        .then_with(|| a.chunk_index.cmp(&b.chunk_index))
}

fn embed_concurrently(backend: &dyn EmbeddingBackend, chunks: &[Chunk], config: &IndexConfig) -> Result<Vec<Vector>, EmbeddingError> {
    let batch_size = config.batch_size.max(1);
    let batches: Vec<&[Chunk]> = chunks.chunks(batch_size).collect();
    let results: Mutex<Vec<Option<Vec<Vector>>>> = Mutex::new(vec![None; batches.len()]);
    let first_error: Mutex<Option<EmbeddingError>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let workers = config.max_in_flight.clamp(1, batches.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(batch) = batches.get(i) else { break };
                let texts: Vec<&str> = batch.iter().map(|c| c.text.as_str()).collect();
                match embed(backend, &texts, &config.retry) {
                    Ok(v) => results.lock().expect("poisoned")[i] = Some(v),
                    Err(e) => {
                        failed.store(true, Ordering::SeqCst);
                        first_error.lock().expect("poisoned").get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("poisoned") {
        return Err(e);
    }
    Ok(results
        .into_inner()
        .expect("poisoned")
        .into_iter()
        .flat_map(|b| b.expect("every batch embedded"))
        .collect())
}

/// Embeds a query, mean-pooling over windows when it exceeds the backend's
/// input limit.
fn embed_query(
    backend: &dyn EmbeddingBackend,
    text: &str,
    tokenizer: &dyn TokenCounter,
    retry: &RetryPolicy,
) -> Result<Vector, EmbeddingError> {
    let limit = backend.max_input_tokens().max(1);
    if tokenizer.count(text) <= limit {
        return Ok(embed(backend, &[text], retry)?.remove(0));
    }
    let pseudo = Note {
        note_id: "query".into(),
        patient_id: "query".into(),
        date: chrono::NaiveDate::MIN,
        text: text.to_string(),
    };
    let pieces = chunk_text(&pseudo, limit, tokenizer);
    let texts: Vec<&str> = pieces.iter().map(|c| c.text.as_str()).filter(|t| !t.trim().is_empty()).collect();
    let vectors = embed(backend, &texts, retry)?;
    Ok(Vector::mean_pool(&vectors).expect("at least one piece"))
}

fn join_key(parts: &[&str]) -> Result<String, EmbeddingError> {
    if let Some(p) = parts.iter().find(|p| p.contains(SEP)) {
        return Err(EmbeddingError::Format(format!("identifier {p:?} contains the key separator")));
    }
    Ok(parts.join(&SEP.to_string()))
}

fn write_record<W: Write>(w: &mut W, key: &str, vector: &Vector) -> Result<(), EmbeddingError> {
    let key_len = u32::try_from(key.len()).map_err(|_| EmbeddingError::Format("key too long".into()))?;
    w.write_all(&key_len.to_le_bytes())?;
    w.write_all(key.as_bytes())?;
    w.write_all(&(vector.dimension() as u32).to_le_bytes())?;
    for v in vector.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, EmbeddingError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| EmbeddingError::Format(format!("truncated record: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_record<R: Read>(r: &mut R) -> Result<(String, Vector), EmbeddingError> {
    let key_len = read_u32(r)? as usize;
    let mut key = vec![0u8; key_len];
    r.read_exact(&mut key)
        .map_err(|e| EmbeddingError::Format(format!("truncated key: {e}")))?;
    let key = String::from_utf8(key).map_err(|e| EmbeddingError::Format(e.to_string()))?;
    let dim = read_u32(r)? as usize;
    let mut raw = vec![0u8; dim * 4];
    r.read_exact(&mut raw)
        .map_err(|e| EmbeddingError::Format(format!("truncated vector: {e}")))?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((key, Vector(values)))
}

fn read_header_line<R: BufRead>(r: &mut R) -> Result<IndexHeader, EmbeddingError> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: IndexHeader = serde_json::from_slice(&line).map_err(|e| EmbeddingError::Format(format!("bad header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(EmbeddingError::Format(format!(
            "unsupported index format {:?} v{}",
            header.format, header.version
        )));
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Aggregation, Patient};
    use crate::embedding::HashingEmbedder;
    use crate::tokenize::WhitespaceTokenCounter;
    use chrono::NaiveDate;

    /// Maps known texts to fixed 2-d vectors so scores are controlled.
    struct Table(Vec<(&'static str, [f32; 2])>);

    impl EmbeddingBackend for Table {
        fn backend_id(&self) -> &str {
            "table"
        }
        fn dimension(&self) -> usize {
            2
        }
        fn max_input_tokens(&self) -> usize {
            usize::MAX
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
            Ok(texts
                .iter()
                .map(|t| {
                    let v = self.0.iter().find(|(k, _)| t.trim() == *k).map(|(_, v)| *v).unwrap_or([1.0, 0.0]);
                    Vector(v.to_vec())
                })
                .collect())
        }
    }

    fn note(id: &str, date: (i32, u32, u32), text: &str) -> Note {
        Note {
            note_id: id.into(),
            patient_id: "p".into(),
            date: NaiveDate::from_ymd_opt(date.0, date.1, date.2).unwrap(),
            text: text.into(),
        }
    }

    fn angle(cos: f32) -> [f32; 2] {
        [cos, (1.0 - cos * cos).sqrt()]
    }

    #[test]
    fn top_k_picks_highest_scores_in_date_order() {
        let corpus = Corpus::new(vec![Patient::new(
            "p",
            vec![
                note("c1", (2024, 1, 1), "one"),
                note("c2", (2024, 2, 1), "two"),
                note("c3", (2024, 3, 1), "three"),
            ],
        )])
        .unwrap();
        let criteria = vec![CriterionSpec::new("Q", "query", Aggregation::Max)];
        let backend = Table(vec![
            ("Q: query", [1.0, 0.0]),
            ("one", angle(0.9)),
            ("two", angle(0.2)),
            ("three", angle(0.5)),
        ]);
        let cfg = IndexConfig {
            chunk_window: 512,
            ..Default::default()
        };
        let index = EmbeddingIndex::build(&corpus, &criteria, &backend, &WhitespaceTokenCounter, &cfg).unwrap();
        let q = QueryKey::Criterion("Q".into());
        let picked: Vec<&str> = index.top_k_chunks("p", &q, 2).unwrap().iter().map(|c| c.note_id.as_str()).collect();
        assert_eq!(picked, ["c1", "c3"]);
        assert_eq!(index.top_k_chunks("p", &q, 10).unwrap().len(), 3);
        assert!(matches!(index.top_k_chunks("p", &q, 0), Err(EmbeddingError::InvalidK)));
        assert_eq!(index.top_k_chunks("nobody", &q, 1).unwrap_err().code(), "UNKNOWN_PATIENT");
        let unknown = QueryKey::Criterion("Z".into());
        assert_eq!(index.top_k_chunks("p", &unknown, 1).unwrap_err().code(), "UNKNOWN_QUERY");
    }

    #[test]
    fn ties_prefer_recent_notes() {
        let corpus = Corpus::new(vec![Patient::new(
            "p",
            vec![note("a", (2024, 1, 1), "same"), note("b", (2024, 5, 1), "same")],
        )])
        .unwrap();
        let criteria = vec![CriterionSpec::new("Q", "query", Aggregation::Max)];
        let index = EmbeddingIndex::build(
            &corpus,
            &criteria,
            &HashingEmbedder::default(),
            &WhitespaceTokenCounter,
            &IndexConfig::default(),
        )
        .unwrap();
        let picked = index.top_k_chunks("p", &QueryKey::Concat, 1).unwrap();
        assert_eq!(picked[0].note_id, "b");
    }

    #[test]
    fn persistence_round_trip_and_determinism() {
        let (corpus, _) = crate::corpus::generate_synthetic_corpus(
            &crate::corpus::SyntheticConfig {
                n_patients: 4,
                filler_words: 150,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let criteria = crate::corpus::canonical_criteria();
        let cfg = IndexConfig {
            chunk_window: 64,
            batch_size: 5,
            ..Default::default()
        };
        let backend = HashingEmbedder::default();
        let a = EmbeddingIndex::build(&corpus, &criteria, &backend, &WhitespaceTokenCounter, &cfg).unwrap();
        let b = EmbeddingIndex::build(&corpus, &criteria, &backend, &WhitespaceTokenCounter, &cfg).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);

        let loaded = EmbeddingIndex::read_from(ba.as_slice(), &corpus, &criteria, &WhitespaceTokenCounter).unwrap();
        assert_eq!(loaded, a);

        let fewer = &criteria[..3];
        let mut partial = Vec::new();
        EmbeddingIndex::build(&corpus, fewer, &backend, &WhitespaceTokenCounter, &cfg)
            .unwrap()
            .write_to(&mut partial)
            .unwrap();
        let err = EmbeddingIndex::read_from(partial.as_slice(), &corpus, &criteria, &WhitespaceTokenCounter).unwrap_err();
        assert!(matches!(err, EmbeddingError::Incomplete(_)));
    }

    #[test]
    fn load_or_build_rebuilds_on_header_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let corpus = Corpus::new(vec![Patient::new("p", vec![note("a", (2024, 1, 1), "alpha beta gamma delta")])]).unwrap();
        let criteria = vec![CriterionSpec::new("Q", "alpha", Aggregation::Max)];
        let backend = HashingEmbedder::default();
        let small = IndexConfig {
            chunk_window: 2,
            ..Default::default()
        };
        let first = EmbeddingIndex::load_or_build(&path, &corpus, &criteria, &backend, &WhitespaceTokenCounter, &small).unwrap();
        assert_eq!(first.chunk_count(), 2);
        let header = EmbeddingIndex::read_header(&path).unwrap();
        assert_eq!(header.chunk_window, 2);
        assert_eq!(header.backend_id, "hashing-4096");

        let big = IndexConfig::default();
        let second = EmbeddingIndex::load_or_build(&path, &corpus, &criteria, &backend, &WhitespaceTokenCounter, &big).unwrap();
        assert_eq!(second.chunk_count(), 1);
        assert_eq!(EmbeddingIndex::read_header(&path).unwrap().chunk_window, 512);
    }

    #[test]
    fn long_concat_query_is_pooled() {
        let corpus = Corpus::new(vec![Patient::new("p", vec![note("a", (2024, 1, 1), "alpha")])]).unwrap();
        let criteria: Vec<CriterionSpec> = (0..5)
            .map(|i| CriterionSpec::new(format!("C{i}"), format!("word{i} word{i} other{i} more{i} x"), Aggregation::Max))
            .collect();
        let capped = HashingEmbedder::default().with_max_input_tokens(4);
        let index = EmbeddingIndex::build(&corpus, &criteria, &capped, &WhitespaceTokenCounter, &IndexConfig::default()).unwrap();
        let v = index.query_vector(&QueryKey::Concat).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-5);
        // Oracle: embed each 4-word window separately, average, renormalize.
        let words: Vec<String> = concat_query_text(&criteria).split_whitespace().map(String::from).collect();
        let e = HashingEmbedder::default();
        let parts: Vec<Vec<f32>> = words.chunks(4).map(|w| e.embed_one(&w.join(" ")).0).collect();
        let mut mean = vec![0f64; 4096];
        for p in &parts {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += *x as f64 / parts.len() as f64;
            }
        }
        let n = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        for (got, want) in v.values().iter().zip(&mean) {
            assert!((*got as f64 - want / n).abs() < 1e-6);
        }
    }
}
