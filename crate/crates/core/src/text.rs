//! Tokenization and vocabulary construction over the product text corpus.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved vocabulary id for out-of-vocabulary tokens.
pub const OOV_ID: u32 = 0;

/// Lowercase and split on runs of non-alphanumeric characters (Unicode-aware).
/// Empty tokens are dropped, order is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token ids assigned by descending frequency (ties lexicographic), id 0
/// reserved for OOV. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, u32>,
    min_count: u64,
}

impl Vocabulary {
    /// Count tokens across documents and keep those with frequency >=
    /// min_count. An empty corpus yields a valid empty vocabulary.
    pub fn build<I, D>(docs: I, min_count: u64) -> Self
    where
        I: IntoIterator<Item = D>,
        D: AsRef<str>,
    {
        assert!(min_count >= 1, "min_count must be >= 1");
        let mut freq: HashMap<String, u64> = HashMap::new();
        for doc in docs {
            for tok in tokenize(doc.as_ref()) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut pairs: Vec<(String, u64)> =
            freq.into_iter().filter(|(_, c)| *c >= min_count).collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_pairs(pairs, min_count)
    }

    fn from_pairs(pairs: Vec<(String, u64)>, min_count: u64) -> Self {
        let mut tokens = Vec::with_capacity(pairs.len() + 1);
        let mut counts = Vec::with_capacity(pairs.len() + 1);
        tokens.push(String::new()); // id 0: OOV sentinel, not a real token
        counts.push(0);
        let mut ids = HashMap::with_capacity(pairs.len());
        for (tok, count) in pairs {
            ids.insert(tok.clone(), tokens.len() as u32);
            tokens.push(tok);
            counts.push(count);
        }
        Vocabulary { tokens, counts, ids, min_count }
    }

    /// Rebuild a vocabulary from an already-ordered token list (ids 1..=n),
    /// as stored in a vectors file. Counts are unknown and recorded as zero.
    pub(crate) fn from_ordered_tokens(ordered: Vec<String>) -> Self {
        Self::from_pairs(ordered.into_iter().map(|t| (t, 0)).collect(), 1)
    }

    /// Id for a known token; None means OOV.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Token text for an id; id 0 yields the empty OOV sentinel.
    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    /// Number of ids including the reserved OOV slot.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when no real tokens survive the frequency threshold.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() == 1
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    /// Map a token sequence to ids, dropping OOV tokens.
    pub fn known_ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().filter_map(|t| self.id(t)).collect()
    }

    /// Hex SHA-256 over the ordered token list; recorded in checkpoints and
    /// indexes to catch vocabulary mismatches between pipeline stages.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for tok in &self.tokens[1..] {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
        }
        hex(&hasher.finalize())
    }

    /// Text format: header line `VOCAB v1 tokens=<n> min_count=<m>`, then one
    /// `token<TAB>count` line per id starting at id 1. Tokens never contain
    /// whitespace (tokenize splits on it), so the encoding is unambiguous.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "VOCAB v1 tokens={} min_count={}", self.tokens.len() - 1, self.min_count)?;
        for id in 1..self.tokens.len() {
            writeln!(out, "{}\t{}", self.tokens[id], self.counts[id])?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(path, "missing header"))??;
        let (n, min_count) = parse_vocab_header(&header)
            .ok_or_else(|| Error::format(path, format!("bad header {header:?}")))?;
        let mut pairs = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 2, "expected token<TAB>count"))?;
            let count: u64 = count
                .parse()
                .map_err(|e| Error::parse(path, i + 2, format!("bad count: {e}")))?;
            pairs.push((tok.to_string(), count));
        }
        if pairs.len() != n {
            return Err(Error::format(
                path,
                format!("header says {n} tokens, file has {}", pairs.len()),
            ));
        }
        Ok(Self::from_pairs(pairs, min_count))
    }
}

fn parse_vocab_header(header: &str) -> Option<(usize, u64)> {
    let rest = header.strip_prefix("VOCAB v1 tokens=")?;
    let (n, mc) = rest.split_once(" min_count=")?;
    Some((n.parse().ok()?, mc.parse().ok()?))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_on_non_alphanumeric() {
        assert_eq!(tokenize("café 2-door"), vec!["café", "2", "door"]);
        assert_eq!(tokenize("Hello,  WORLD!"), vec!["hello", "world"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("--- ---"), Vec::<String>::new());
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        let v = Vocabulary::build(["a a b"], 2);
        assert_eq!(v.len(), 2);
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
    }

    #[test]
    fn ids_ordered_by_descending_frequency() {
        let v = Vocabulary::build(["a a b"], 1);
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.id("a").unwrap(), 1);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let v = Vocabulary::build(["x y"], 1);
        assert!(v.id("x").unwrap() < v.id("y").unwrap());
    }

    #[test]
    fn empty_corpus_is_a_valid_empty_vocabulary() {
        let v = Vocabulary::build(Vec::<&str>::new(), 1);
        assert!(v.is_empty());
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn round_trips_through_file_losslessly() {
        let v = Vocabulary::build(["lamp lamp chair sofa sofa sofa", "chair lamp"], 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(v.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn known_ids_drop_oov() {
        let v = Vocabulary::build(["a a b b"], 1);
        let toks = vec!["a".to_string(), "zzz".to_string(), "b".to_string()];
        let ids = v.known_ids(&toks);
        assert_eq!(ids.len(), 2);
        assert!(!ids.contains(&OOV_ID));
    }

    #[test]
    fn fingerprint_changes_with_content() {
        let a = Vocabulary::build(["a b c"], 1);
        let b = Vocabulary::build(["a b d"], 1);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
