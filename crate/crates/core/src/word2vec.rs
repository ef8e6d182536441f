//! Skip-gram word2vec with negative sampling, trained on the product
//! title + description corpus. Supplies initial tower embeddings and the
//! retrieval baseline's vectors.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::Vocabulary;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Word2vecConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Tokens seen fewer times than this stay out of the vocabulary.
    /// Consumed when the vocabulary is built, not by training itself.
    pub min_count: u64,
    pub seed: u64,
}

impl Default for Word2vecConfig {
    fn default() -> Self {
        Word2vecConfig {
            dim: 64,
            window: 4,
            negatives: 5,
            epochs: 5,
            min_count: 1,
            seed: 42,
        }
    }
}

/// One vector per vocabulary id. Row 0 is the OOV row and is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    vocab: Vocabulary,
    dim: usize,
    data: Vec<f32>, // [vocab.len() * dim], row-major
}

impl WordVectors {
    #[cfg(test)]
    pub(crate) fn from_raw(vocab: Vocabulary, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), vocab.len() * dim);
        WordVectors { vocab, dim, data }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        let i = id as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Arithmetic mean of the vectors of in-vocabulary tokens; all-OOV or
    /// empty input yields the zero vector.
    pub fn mean_embedding(&self, tokens: &[String]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.dim];
        let mut n = 0usize;
        for tok in tokens {
            if let Some(id) = self.vocab.id(tok) {
                for (o, v) in out.iter_mut().zip(self.vector(id)) {
                    *o += v;
                }
                n += 1;
            }
        }
        if n > 0 {
            let inv = 1.0 / n as f32;
            for o in &mut out {
                *o *= inv;
            }
        }
        out
    }

    /// All rows as one row-major slice, including the zero OOV row; used to
    /// initialize tower embedding tables.
    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// File layout, bit-exact on round-trip:
    ///   line `W2V v1 tokens=<n> dim=<d>`
    ///   n records, ids 1..=n in order: token bytes, one space,
    ///   d little-endian f32 values, newline.
    /// The OOV row is not stored; it is zero by invariant.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.vocab.len() - 1;
        let mut out = Vec::with_capacity(32 + n * (8 + self.dim * 4));
        writeln!(out, "W2V v1 tokens={} dim={}", n, self.dim)?;
        for id in 1..=n as u32 {
            out.extend_from_slice(self.vocab.token(id).as_bytes());
            out.push(b' ');
            for v in self.vector(id) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(b'\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let (n, dim) = parse_header(header.trim_end())
            .ok_or_else(|| Error::format(path, format!("bad header {header:?}")))?;
        let mut tokens = Vec::with_capacity(n);
        let mut data = vec![0.0f32; (n + 1) * dim];
        let mut float_buf = vec![0u8; dim * 4];
        for id in 1..=n {
            let mut token_bytes = Vec::new();
            reader.read_until(b' ', &mut token_bytes)?;
            if token_bytes.pop() != Some(b' ') {
                return Err(Error::format(path, format!("truncated record {id}")));
            }
            let token = String::from_utf8(token_bytes)
                .map_err(|e| Error::format(path, format!("record {id}: {e}")))?;
            reader.read_exact(&mut float_buf)?;
            for (j, chunk) in float_buf.chunks_exact(4).enumerate() {
                data[id * dim + j] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            let mut nl = [0u8; 1];
            reader.read_exact(&mut nl)?;
            if nl[0] != b'\n' {
                return Err(Error::format(path, format!("record {id}: missing newline")));
            }
            tokens.push(token);
        }
        if reader.bytes().next().is_some() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        // Counts are not stored; the reconstructed vocabulary keeps the id
        // order and fingerprint, which is all downstream stages need.
        let vocab = Vocabulary::from_ordered_tokens(tokens);
        Ok(WordVectors { vocab, dim, data })
    }
}

fn parse_header(header: &str) -> Option<(usize, usize)> {
    let rest = header.strip_prefix("W2V v1 tokens=")?;
    let (n, d) = rest.split_once(" dim=")?;
    Some((n.parse().ok()?, d.parse().ok()?))
}

/// Train skip-gram embeddings over in-vocabulary token streams. Single
/// threaded and fully deterministic given the seed. Returns the vectors and
/// the mean negative-sampling loss per epoch.
pub fn train_word2vec(
    vocab: &Vocabulary,
    docs: &[Vec<u32>],
    config: &Word2vecConfig,
) -> Result<(WordVectors, Vec<f64>)> {
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    assert!(config.dim >= 1 && config.window >= 1 && config.epochs >= 1);

    let v = vocab.len();
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_W2V_INIT));

    // Classic init: input rows uniform in (-0.5/d, 0.5/d), output rows zero.
    // Row 0 stays zero (OOV invariant).
    let mut input = vec![0.0f32; v * dim];
    for x in input.iter_mut().skip(dim) {
        *x = (rng.random::<f32>() - 0.5) / dim as f32;
    }
    let mut output = vec![0.0f32; v * dim];

    // Unigram^0.75 cumulative table over real ids for negative sampling.
    let mut cum = Vec::with_capacity(v - 1);
    let mut total = 0.0f64;
    for id in 1..v as u32 {
        total += (vocab.count(id) as f64).powf(0.75);
        cum.push(total);
    }
    if total <= 0.0 {
        return Err(Error::EmptyVocabulary);
    }

    let pairs_per_epoch: usize = docs
        .iter()
        .map(|d| d.len().saturating_mul(config.window))
        .sum();
    let total_steps = (pairs_per_epoch * config.epochs).max(1);

    const LR_START: f32 = 0.025;
    const LR_MIN: f32 = 1e-4;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut grad_in = vec![0.0f32; dim];

    let mut sample_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_W2V_SAMPLE));
    for _epoch in 0..config.epochs {
        let mut loss_sum = 0.0f64;
        let mut loss_pairs = 0u64;
        for doc in docs {
            for (pos, &center) in doc.iter().enumerate() {
                // Dynamic window, as in the reference implementation.
                let span = sample_rng.random_range(1..=config.window);
                let lo = pos.saturating_sub(span);
                let hi = (pos + span).min(doc.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = doc[ctx_pos];
                    let lr = {
                        let t = step as f32 / total_steps as f32;
                        (LR_START * (1.0 - t)).max(LR_MIN)
                    };
                    step += 1;
                    let ci = center as usize * dim;
                    let center_row = input[ci..ci + dim].to_vec();
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let mut pair_loss = 0.0f64;
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0f32)
                        } else {
                            let t = sample_unigram(&cum, &mut sample_rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0f32)
                        };
                        let ti = target as usize * dim;
                        let mut dot = 0.0f32;
                        for j in 0..dim {
                            dot += center_row[j] * output[ti + j];
                        }
                        let p = sigmoid(dot);
                        pair_loss -= if label > 0.5 {
                            (p.max(1e-7) as f64).ln()
                        } else {
                            ((1.0 - p).max(1e-7) as f64).ln()
                        };
                        let g = (label - p) * lr;
                        for j in 0..dim {
                            grad_in[j] += g * output[ti + j];
                            output[ti + j] += g * center_row[j];
                        }
                    }
                    for j in 0..dim {
                        input[ci + j] += grad_in[j];
                    }
                    loss_sum += pair_loss;
                    loss_pairs += 1;
                }
            }
        }
        epoch_losses.push(if loss_pairs > 0 {
            loss_sum / loss_pairs as f64
        } else {
            0.0
        });
    }

    Ok((
        WordVectors {
            vocab: vocab.clone(),
            dim,
            data: input,
        },
        epoch_losses,
    ))
}

fn sample_unigram(cum: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let total = *cum.last().expect("non-empty table");
    let x = rng.random::<f64>() * total;
    let idx = cum.partition_point(|&c| c <= x);
    (idx.min(cum.len() - 1) + 1) as u32
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// SplitMix64; used to derive independent named RNG streams from one seed.
pub(crate) fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_W2V_INIT: u64 = 1;
pub(crate) const STREAM_W2V_SAMPLE: u64 = 2;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn ids(vocab: &Vocabulary, docs: &[String]) -> Vec<Vec<u32>> {
        docs.iter()
            .map(|d| vocab.known_ids(&tokenize(d)))
            .collect()
    }

    fn planted_corpus() -> Vec<String> {
        // 12 synonym pairs, each sharing a private context vocabulary.
        let mut docs = Vec::new();
        for pair in 0..12 {
            for rep in 0..50 {
                let word = if rep % 2 == 0 {
                    format!("syna{pair}")
                } else {
                    format!("synb{pair}")
                };
                docs.push(format!(
                    "ctx{pair}x{} {} ctx{pair}x{}",
                    rep % 3,
                    word,
                    (rep + 1) % 3
                ));
            }
        }
        docs
    }

    #[test]
    fn planted_synonyms_score_above_cross_pairs() {
        let docs = planted_corpus();
        let vocab = Vocabulary::build(docs.iter(), 1);
        let (vectors, _) =
            train_word2vec(&vocab, &ids(&vocab, &docs), &Word2vecConfig::default()).unwrap();
        let cos = |a: &str, b: &str| {
            let (va, vb) = (
                vectors.vector(vocab.id(a).unwrap()),
                vectors.vector(vocab.id(b).unwrap()),
            );
            let d = crate::tensor::dot(va, vb);
            d / (crate::tensor::l2_norm(va) * crate::tensor::l2_norm(vb))
        };
        let mut wins = 0;
        let mut total = 0;
        for i in 0..12 {
            let planted = cos(&format!("syna{i}"), &format!("synb{i}"));
            let cross = cos(&format!("syna{i}"), &format!("synb{}", (i + 5) % 12));
            total += 1;
            if planted > cross {
                wins += 1;
            }
        }
        assert!(
            wins * 10 >= total * 9,
            "only {wins}/{total} planted pairs beat cross pairs"
        );
    }

    #[test]
    fn loss_is_non_increasing_with_tolerance() {
        let docs = planted_corpus();
        let vocab = Vocabulary::build(docs.iter(), 1);
        let (_, losses) =
            train_word2vec(&vocab, &ids(&vocab, &docs), &Word2vecConfig::default()).unwrap();
        for w in losses.windows(2) {
            assert!(
                w[1] <= w[0] * 1.05,
                "loss increased beyond tolerance: {losses:?}"
            );
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let docs = planted_corpus();
        let vocab = Vocabulary::build(docs.iter(), 1);
        let run = || {
            let (v, _) =
                train_word2vec(&vocab, &ids(&vocab, &docs), &Word2vecConfig::default()).unwrap();
            v.raw().iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_token_corpus_completes_with_finite_vector() {
        let docs = vec!["hello".to_string()];
        let vocab = Vocabulary::build(docs.iter(), 1);
        let (vectors, losses) =
            train_word2vec(&vocab, &ids(&vocab, &docs), &Word2vecConfig::default()).unwrap();
        assert!(vectors.vector(1).iter().all(|v| v.is_finite()));
        assert_eq!(losses.len(), 5);
    }

    #[test]
    fn empty_vocabulary_is_an_error() {
        let vocab = Vocabulary::build(Vec::<&str>::new(), 1);
        let err = train_word2vec(&vocab, &[], &Word2vecConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyVocabulary));
    }

    #[test]
    fn oov_row_is_zero_and_mean_embedding_skips_it() {
        let docs = vec!["a a b b".to_string()];
        let vocab = Vocabulary::build(docs.iter(), 1);
        let (vectors, _) =
            train_word2vec(&vocab, &ids(&vocab, &docs), &Word2vecConfig::default()).unwrap();
        assert!(vectors.vector(0).iter().all(|&v| v == 0.0));
        let mean = vectors.mean_embedding(&["zzz".to_string()]);
        assert!(mean.iter().all(|&v| v == 0.0));
        let single = vectors.mean_embedding(&["a".to_string()]);
        assert_eq!(single.as_slice(), vectors.vector(vocab.id("a").unwrap()));
    }

    #[test]
    fn mean_embedding_averages_known_vectors() {
        let docs = vec!["a b".to_string()];
        let vocab = Vocabulary::build(docs.iter(), 1);
        let (vectors, _) =
            train_word2vec(&vocab, &ids(&vocab, &docs), &Word2vecConfig::default()).unwrap();
        let (ia, ib) = (vocab.id("a").unwrap(), vocab.id("b").unwrap());
        let mean = vectors.mean_embedding(&["a".to_string(), "b".to_string()]);
        for j in 0..vectors.dim() {
            let want = (vectors.vector(ia)[j] + vectors.vector(ib)[j]) / 2.0;
            assert!((mean[j] - want).abs() < 1e-7);
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let docs = planted_corpus();
        let vocab = Vocabulary::build(docs.iter(), 1);
        let (vectors, _) =
            train_word2vec(&vocab, &ids(&vocab, &docs), &Word2vecConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.w2v");
        vectors.save(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let loaded = WordVectors::load(&path).unwrap();
        assert_eq!(loaded.dim(), vectors.dim());
        assert_eq!(loaded.raw(), vectors.raw());
        assert_eq!(loaded.vocab().fingerprint(), vectors.vocab().fingerprint());
        let path2 = dir.path().join("vectors2.w2v");
        loaded.save(&path2).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }
}
