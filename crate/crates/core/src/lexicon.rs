//! Vocabulary, word embeddings, and the embedding-space synonym index that
//! feeds the word-level attacks.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Error;

/// Reserved padding token, id 0.
pub const PAD_TOKEN: &str = "<pad>";
/// Reserved unknown-word token, id 1.
pub const UNK_TOKEN: &str = "<unk>";
/// Id of [`PAD_TOKEN`].
pub const PAD_ID: u32 = 0;
/// Id of [`UNK_TOKEN`].
pub const UNK_ID: u32 = 1;

/// Word/id bijection with the two reserved entries at ids 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build a vocabulary from an iterator of words. Duplicates collapse;
    /// non-reserved words are assigned ids in sorted order starting at 2.
    pub fn build<I, S>(words: I) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut uniq: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| w != PAD_TOKEN && w != UNK_TOKEN)
            .collect();
        uniq.sort();
        uniq.dedup();

        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(uniq);
        let ids = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words: all, ids }
    }

    /// Vocabulary over every token in the given texts.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Vocabulary {
        Vocabulary::build(texts.into_iter().flat_map(tokenize))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the two reserved entries
    }

    /// Id for a token; unknown tokens map to [`UNK_ID`].
    pub fn encode(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// All words in id order, including the reserved entries.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One word per line, id = line index.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut body = String::new();
        for w in &self.words {
            body.push_str(w);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary, Error> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if words.first().map(String::as_str) != Some(PAD_TOKEN)
            || words.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Vocabulary { words, ids })
    }
}

/// Lowercase and split a text into tokens.
///
/// Chunks are split on whitespace; leading and trailing non-alphanumeric
/// characters become separate single-character tokens, so `"ride."` yields
/// `["ride", "."]` while an internal apostrophe (`"don't"`) is retained.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && !chars[start].is_alphanumeric() {
            start += 1;
        }
        while end > start && !chars[end - 1].is_alphanumeric() {
            end -= 1;
        }
        for &c in &chars[..start] {
            out.push(c.to_string());
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        for &c in &chars[end..] {
            out.push(c.to_string());
        }
    }
    out
}

/// Join tokens back into a sentence with single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// True for tokens the attacks may substitute: an alphabetic core, not a
/// reserved token.
pub fn is_word_token(token: &str) -> bool {
    token != PAD_TOKEN && token != UNK_TOKEN && token.chars().any(|c| c.is_alphabetic())
}

/// Word embeddings, L2-normalized at load time.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dimension: usize,
    words: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
    duplicate_count: usize,
}

impl EmbeddingStore {
    /// Parse the plain-text format: one `word v1 v2 ... vd` entry per line.
    /// `source` only labels error messages.
    pub fn parse(text: &str, source: &str) -> Result<EmbeddingStore, Error> {
        let mut dimension = None;
        let mut words: Vec<String> = Vec::new();
        let mut vectors: Vec<Vec<f32>> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut duplicate_count = 0;

        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap().to_string();
            let mut vector = Vec::new();
            for part in parts {
                let v: f32 = part.parse().map_err(|_| Error::Parse {
                    path: source.to_string(),
                    line: lineno,
                    message: format!("malformed float {part:?}"),
                })?;
                vector.push(v);
            }
            if vector.is_empty() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: lineno,
                    message: "entry has no vector components".into(),
                });
            }
            match dimension {
                None => dimension = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(Error::Parse {
                        path: source.to_string(),
                        line: lineno,
                        message: format!("dimension {} does not match store dimension {d}", vector.len()),
                    });
                }
                _ => {}
            }
            normalize(&mut vector);
            match index.get(&word) {
                Some(&slot) => {
                    // Last entry wins.
                    vectors[slot] = vector;
                    duplicate_count += 1;
                }
                None => {
                    index.insert(word.clone(), words.len());
                    words.push(word);
                    vectors.push(vector);
                }
            }
        }
        if duplicate_count > 0 {
            log::warn!("{source}: {duplicate_count} duplicate embedding entries, last occurrence kept");
        }
        Ok(EmbeddingStore {
            dimension: dimension.unwrap_or(0),
            words,
            vectors,
            index,
            duplicate_count,
        })
    }

    pub fn load(path: &Path) -> Result<EmbeddingStore, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmbeddingStore::parse(&text, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn duplicate_count(&self) -> usize {
        self.duplicate_count
    }

    pub fn vector(&self, word: &str) -> Option<&[f32]> {
        self.index.get(word).map(|&i| self.vectors[i].as_slice())
    }

    /// Cosine similarity between two stored words (vectors are unit length,
    /// so this is a dot product).
    pub fn cosine(&self, a: &str, b: &str) -> Option<f32> {
        let va = self.vector(a)?;
        let vb = self.vector(b)?;
        Some(dot(va, vb))
    }

    /// Top-`k` synonyms of `word` by cosine similarity, descending, keeping
    /// only candidates with cosine >= `min_cos`. Ties break toward the
    /// lexicographically smaller word. A word absent from the store has no
    /// synonyms.
    pub fn nearest_synonyms(&self, word: &str, k: usize, min_cos: f32) -> Vec<(String, f32)> {
        assert!(k >= 1, "synonym count k must be >= 1, got {k}");
        assert!(
            (0.0..=1.0).contains(&min_cos),
            "min_cos must lie in [0, 1], got {min_cos}"
        );
        let query = match self.vector(word) {
            Some(v) => v,
            None => return Vec::new(),
        };
        let mut scored: Vec<(String, f32)> = self
            .words
            .iter()
            .zip(&self.vectors)
            .filter(|(w, _)| w.as_str() != word)
            .map(|(w, v)| (w.clone(), dot(query, v)))
            .filter(|(_, cos)| *cos >= min_cos)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

fn normalize(v: &mut [f32]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Precomputed synonym lists for every vocabulary word.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymIndex {
    entries: HashMap<String, Vec<(String, f32)>>,
    k: usize,
    min_cos: f32,
}

const INDEX_MAGIC: &[u8; 4] = b"QGSY";
const INDEX_VERSION: u16 = 1;

impl SynonymIndex {
    /// Precompute [`EmbeddingStore::nearest_synonyms`] for every vocabulary
    /// word; lookups afterwards are O(1).
    pub fn build(store: &EmbeddingStore, vocab: &Vocabulary, k: usize, min_cos: f32) -> SynonymIndex {
        let entries = vocab
            .words()
            .iter()
            .skip(2) // reserved tokens are never substitution targets
            .map(|w| (w.clone(), store.nearest_synonyms(w, k, min_cos)))
            .collect();
        SynonymIndex { entries, k, min_cos }
    }

    /// Synonyms of `word`, best first. Unknown words have none.
    pub fn synonyms(&self, word: &str) -> &[(String, f32)] {
        self.entries.get(word).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains_pair(&self, word: &str, replacement: &str) -> bool {
        self.synonyms(word).iter().any(|(s, _)| s == replacement)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn min_cos(&self) -> f32 {
        self.min_cos
    }

    /// Serialize to the binary cache format. Entries are sorted by word so
    /// identical inputs always produce identical bytes.
    pub fn to_bytes(&self, input_fingerprint: &[u8; 32]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(input_fingerprint);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&self.min_cos.to_le_bytes());
        let mut words: Vec<&String> = self.entries.keys().collect();
        words.sort();
        out.extend_from_slice(&(words.len() as u32).to_le_bytes());
        for word in words {
            write_str(&mut out, word);
            let syns = &self.entries[word];
            out.extend_from_slice(&(syns.len() as u32).to_le_bytes());
            for (syn, cos) in syns {
                write_str(&mut out, syn);
                out.extend_from_slice(&cos.to_le_bytes());
            }
        }
        out
    }

    /// Write the cache file.
    pub fn save(&self, path: &Path, input_fingerprint: &[u8; 32]) -> Result<(), Error> {
        let bytes = self.to_bytes(input_fingerprint);
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Load the cache if it exists and its fingerprint matches; `None` means
    /// the cache is absent or stale and the index must be rebuilt.
    pub fn load_cached(path: &Path, input_fingerprint: &[u8; 32]) -> Option<SynonymIndex> {
        let bytes = fs::read(path).ok()?;
        Self::from_bytes(&bytes, input_fingerprint)
    }

    fn from_bytes(bytes: &[u8], input_fingerprint: &[u8; 32]) -> Option<SynonymIndex> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
            let slice = bytes.get(*pos..*pos + n)?;
            *pos += n;
            Some(slice)
        };
        if take(&mut pos, 4)? != INDEX_MAGIC {
            return None;
        }
        if u16::from_le_bytes(take(&mut pos, 2)?.try_into().ok()?) != INDEX_VERSION {
            return None;
        }
        if take(&mut pos, 32)? != input_fingerprint {
            return None;
        }
        let k = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?) as usize;
        let min_cos = f32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?);
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?) as usize;
        let mut entries = HashMap::with_capacity(count);
        for _ in 0..count {
            let word = read_str(bytes, &mut pos)?;
            let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?) as usize;
            let mut syns = Vec::with_capacity(n);
            for _ in 0..n {
                let syn = read_str(bytes, &mut pos)?;
                let cos = f32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?);
                syns.push((syn, cos));
            }
            entries.insert(word, syns);
        }
        Some(SynonymIndex { entries, k, min_cos })
    }
}

/// Fingerprint of the inputs a synonym index was built from, used for cache
/// staleness checks.
pub fn index_fingerprint(embedding_text: &str, vocab: &Vocabulary, k: usize, min_cos: f32) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(embedding_text.as_bytes());
    for w in vocab.words() {
        hasher.update(w.as_bytes());
        hasher.update([0u8]);
    }
    hasher.update((k as u64).to_le_bytes());
    hasher.update(min_cos.to_le_bytes());
    hasher.finalize().into()
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_str(bytes: &[u8], pos: &mut usize) -> Option<String> {
    let len = u16::from_le_bytes(bytes.get(*pos..*pos + 2)?.try_into().ok()?) as usize;
    *pos += 2;
    let s = std::str::from_utf8(bytes.get(*pos..*pos + len)?).ok()?;
    *pos += len;
    Some(s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_edge_punctuation() {
        assert_eq!(
            tokenize("A refreshingly novel ride."),
            vec!["a", "refreshingly", "novel", "ride", "."]
        );
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_keeps_internal_apostrophe() {
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
    }

    #[test]
    fn tokenize_round_trip_preserves_word_tokens() {
        let text = "Much of the way, though, this is a (refreshingly) novel ride!";
        let tokens = tokenize(text);
        let again = tokenize(&detokenize(&tokens));
        assert_eq!(tokens, again);
        let words: Vec<&String> = tokens.iter().filter(|t| is_word_token(t)).collect();
        let words_again: Vec<&String> = again.iter().filter(|t| is_word_token(t)).collect();
        assert_eq!(words, words_again);
    }

    #[test]
    fn vocabulary_reserves_pad_and_unk() {
        let v = Vocabulary::build(["b", "a", "b"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.encode(PAD_TOKEN), PAD_ID);
        assert_eq!(v.encode(UNK_TOKEN), UNK_ID);
        assert_eq!(v.encode("a"), 2);
        assert_eq!(v.encode("b"), 3);
        assert_eq!(v.encode("zebra"), UNK_ID);
        assert_eq!(v.word(3), "b");
    }

    #[test]
    fn embeddings_are_normalized_at_load() {
        let store = EmbeddingStore::parse("cat 3 4\ndog 0 2\neel 5 0\n", "test").unwrap();
        assert_eq!(store.len(), 3);
        for word in ["cat", "dog", "eel"] {
            let v = store.vector(word).unwrap();
            let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn orthogonal_vectors_have_zero_cosine() {
        let store = EmbeddingStore::parse("cat 1 0\ndog 0 1\n", "test").unwrap();
        assert_eq!(store.cosine("cat", "dog"), Some(0.0));
    }

    #[test]
    fn malformed_float_cites_line() {
        let mut text = String::new();
        for i in 0..6 {
            text.push_str(&format!("w{i} 1 0\n"));
        }
        text.push_str("bad 1 oops\n");
        let err = EmbeddingStore::parse(&text, "lex.txt").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimension_cites_line() {
        let err = EmbeddingStore::parse("a 1 0\nb 1 0 0\n", "lex.txt").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("dimension"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_words_last_wins() {
        let store = EmbeddingStore::parse("a 1 0\na 0 1\n", "test").unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.duplicate_count(), 1);
        assert_eq!(store.vector("a").unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn nearest_synonyms_absent_word_is_empty() {
        let store = EmbeddingStore::parse("a 1 0\n", "test").unwrap();
        assert!(store.nearest_synonyms("zzz", 5, 0.0).is_empty());
    }

    #[test]
    fn nearest_synonyms_brute_force_case() {
        // Brute force over the 2 candidates: b at cosine 1.0 passes the
        // threshold, c at cosine 0.0 does not.
        let store = EmbeddingStore::parse("a 1 0\nb 1 0\nc 0 1\n", "test").unwrap();
        let syns = store.nearest_synonyms("a", 5, 0.5);
        assert_eq!(syns, vec![("b".to_string(), 1.0)]);
    }

    #[test]
    fn nearest_synonyms_tie_breaks_lexicographically() {
        let store = EmbeddingStore::parse("query 1 0\nzed 1 0\nfoo 1 0\n", "test").unwrap();
        let syns = store.nearest_synonyms("query", 1, 0.5);
        assert_eq!(syns.len(), 1);
        assert_eq!(syns[0].0, "foo");
    }

    #[test]
    fn synonyms_need_not_be_symmetric() {
        // b's nearest neighbour is a, but a prefers c; membership one way
        // does not imply the other once k truncates.
        let store =
            EmbeddingStore::parse("a 1 0 0\nc 0.99 0.141 0\nb 0.9 -0.436 0\n", "test").unwrap();
        let of_a = store.nearest_synonyms("a", 1, 0.5);
        assert_eq!(of_a[0].0, "c");
        let of_b = store.nearest_synonyms("b", 1, 0.5);
        assert_eq!(of_b[0].0, "a");
        assert!(!of_a.iter().any(|(w, _)| w == "b"));
    }

    #[test]
    fn index_matches_on_the_fly_queries() {
        let text = crate::toy::lexicon_text();
        let store = EmbeddingStore::parse(&text, "toy").unwrap();
        let vocab = Vocabulary::build(store_words(&store));
        let index = SynonymIndex::build(&store, &vocab, 4, 0.5);
        // Every 4th word keeps the comparison cheap while covering clusters.
        for word in store_words(&store).iter().step_by(4).take(50) {
            assert_eq!(index.synonyms(word), store.nearest_synonyms(word, 4, 0.5).as_slice());
        }
    }

    #[test]
    fn index_on_empty_store_is_all_empty() {
        let store = EmbeddingStore::parse("", "test").unwrap();
        let vocab = Vocabulary::build(["one", "two"]);
        let index = SynonymIndex::build(&store, &vocab, 3, 0.5);
        assert!(index.synonyms("one").is_empty());
        assert!(index.synonyms("two").is_empty());
    }

    #[test]
    fn min_cos_one_keeps_only_exact_duplicates() {
        let store = EmbeddingStore::parse("a 1 0\nb 1 0\nc 0.9 0.1\n", "test").unwrap();
        let vocab = Vocabulary::build(["a", "b", "c"]);
        let index = SynonymIndex::build(&store, &vocab, 5, 1.0);
        assert_eq!(index.synonyms("a"), &[("b".to_string(), 1.0)]);
        assert!(index.synonyms("c").is_empty());
    }

    #[test]
    fn index_serialization_is_deterministic() {
        let text = crate::toy::lexicon_text();
        let store = EmbeddingStore::parse(&text, "toy").unwrap();
        let vocab = Vocabulary::build(store_words(&store));
        let fp = index_fingerprint(&text, &vocab, 8, 0.5);
        let a = SynonymIndex::build(&store, &vocab, 8, 0.5).to_bytes(&fp);
        let b = SynonymIndex::build(&store, &vocab, 8, 0.5).to_bytes(&fp);
        assert_eq!(a, b);
    }

    #[test]
    fn index_cache_round_trips_and_detects_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("syn.qgsy");
        let store = EmbeddingStore::parse("a 1 0\nb 1 0\n", "test").unwrap();
        let vocab = Vocabulary::build(["a", "b"]);
        let fp = index_fingerprint("a 1 0\nb 1 0\n", &vocab, 4, 0.5);
        let index = SynonymIndex::build(&store, &vocab, 4, 0.5);
        index.save(&path, &fp).unwrap();
        let loaded = SynonymIndex::load_cached(&path, &fp).unwrap();
        assert_eq!(loaded, index);
        let stale_fp = index_fingerprint("a 1 0\n", &vocab, 4, 0.5);
        assert!(SynonymIndex::load_cached(&path, &stale_fp).is_none());
    }

    fn store_words(store: &EmbeddingStore) -> Vec<String> {
        store.words.clone()
    }
}
