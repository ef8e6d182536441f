//! Serving path: geo-radius filter, recency-M prefetch, exact top-N scoring,
//! and the two baselines (pure recency, word2vec keyword similarity).
//!
//! All ranking is brute force over at most M candidates. Ties break by
//! ascending product id everywhere so results are fully deterministic.

use serde::{Deserialize, Serialize};

use crate::catalog::{haversine_km, Catalog, UserProfile};
use crate::error::{Error, Result};
use crate::index::{EmbeddingIndex, IndexEntry};
use crate::tensor::{dot, l2_norm};
use crate::text::tokenize;
use crate::towers::{score, ModelCheckpoint};
use crate::word2vec::WordVectors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lowercase")]
pub enum Strategy {
    Pairnn,
    Word2vec,
    Time,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Pairnn => "pairnn",
            Strategy::Word2vec => "word2vec",
            Strategy::Time => "time",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairnn" => Ok(Strategy::Pairnn),
            "word2vec" => Ok(Strategy::Word2vec),
            "time" => Ok(Strategy::Time),
            other => Err(Error::InvalidRequest {
                msg: format!("unknown strategy {other:?} (expected pairnn | word2vec | time)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalRequest {
    pub user_id: u64,
    /// Recency window: how many most-recent in-radius products to score.
    pub m: usize,
    /// Result count; n <= m.
    pub n: usize,
    pub strategy: Strategy,
    /// Only products created strictly before this timestamp are eligible.
    /// Replay sets it to the event time; live queries leave it unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub as_of: Option<i64>,
}

impl RetrievalRequest {
    pub fn validate(&self) -> Result<()> {
        validate_window(self.m, self.n)
    }
}

fn validate_window(m: usize, n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidRequest {
            msg: format!("n must be >= 1, got {n}"),
        });
    }
    if m < n {
        return Err(Error::InvalidRequest {
            msg: format!("m must be >= n, got m={m} n={n}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredProduct {
    pub product_id: u64,
    pub score: f32,
}

/// In-radius products, most recent first (ties by ascending id), truncated
/// to the window size. An empty result is valid.
pub fn candidate_set<'a>(
    index: &'a EmbeddingIndex,
    user: &UserProfile,
    m: usize,
) -> Result<Vec<&'a IndexEntry>> {
    candidate_set_as_of(index, user, m, None)
}

pub fn candidate_set_as_of<'a>(
    index: &'a EmbeddingIndex,
    user: &UserProfile,
    m: usize,
    as_of: Option<i64>,
) -> Result<Vec<&'a IndexEntry>> {
    if m < 1 {
        return Err(Error::InvalidRequest {
            msg: format!("m must be >= 1, got {m}"),
        });
    }
    let mut cands = Vec::new();
    for e in index.entries() {
        if let Some(ts) = as_of {
            if e.created_at >= ts {
                continue;
            }
        }
        if haversine_km(user.location, e.location)? <= user.radius_km {
            cands.push(e);
        }
    }
    cands.sort_by(|a, b| {
        b.created_at
            .cmp(&a.created_at)
            .then(a.product_id.cmp(&b.product_id))
    });
    cands.truncate(m);
    Ok(cands)
}

fn top_n(mut scored: Vec<ScoredProduct>, n: usize) -> Vec<ScoredProduct> {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.product_id.cmp(&b.product_id))
    });
    scored.truncate(n);
    scored
}

/// pairnn strategy: dot product of the user embedding against every
/// candidate's stored product embedding, top N descending.
pub fn retrieve(
    index: &EmbeddingIndex,
    user: &UserProfile,
    user_embedding: &[f32],
    m: usize,
    n: usize,
    as_of: Option<i64>,
) -> Result<Vec<ScoredProduct>> {
    validate_window(m, n)?;
    let scored = candidate_set_as_of(index, user, m, as_of)?
        .into_iter()
        .map(|e| ScoredProduct {
            product_id: e.product_id,
            score: score(user_embedding, &e.embedding),
        })
        .collect();
    Ok(top_n(scored, n))
}

/// Recency baseline: the candidate window order itself, truncated to N. No
/// model is involved; scores are reported as 0.
pub fn retrieve_time_based(
    index: &EmbeddingIndex,
    user: &UserProfile,
    m: usize,
    n: usize,
    as_of: Option<i64>,
) -> Result<Vec<ScoredProduct>> {
    validate_window(m, n)?;
    Ok(candidate_set_as_of(index, user, m, as_of)?
        .into_iter()
        .take(n)
        .map(|e| ScoredProduct {
            product_id: e.product_id,
            score: 0.0,
        })
        .collect())
}

fn cosine_or_zero(a: &[f32], b: &[f32]) -> f32 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// word2vec baseline: cosine between the mean keyword vector of the user and
/// the mean title-token vector of each candidate. A zero mean on either side
/// scores 0.
pub fn retrieve_word2vec(
    vectors: &WordVectors,
    catalog: &Catalog,
    index: &EmbeddingIndex,
    user: &UserProfile,
    m: usize,
    n: usize,
    as_of: Option<i64>,
) -> Result<Vec<ScoredProduct>> {
    validate_window(m, n)?;
    let user_mean = vectors.mean_embedding(&user.keywords);
    let mut scored = Vec::new();
    for e in candidate_set_as_of(index, user, m, as_of)? {
        let product = catalog.require_product(e.product_id)?;
        let title_mean = vectors.mean_embedding(&tokenize(&product.title));
        scored.push(ScoredProduct {
            product_id: e.product_id,
            score: cosine_or_zero(&user_mean, &title_mean),
        });
    }
    Ok(top_n(scored, n))
}

/// Retrieval output passes downstream unchanged; a separate ranking stage is
/// outside this system.
pub fn ranking_handoff(results: Vec<ScoredProduct>) -> Vec<ScoredProduct> {
    results
}

/// Everything needed to answer requests for any strategy. Artifacts are
/// optional; a request whose strategy needs a missing one fails with a named
/// error. Immutable once built, safe to share across threads.
pub struct Retriever {
    pub catalog: Catalog,
    pub index: EmbeddingIndex,
    pub checkpoint: Option<ModelCheckpoint>,
    pub vectors: Option<WordVectors>,
}

impl Retriever {
    /// Cross-checks artifact fingerprints: a checkpoint must match both the
    /// vocabulary carried by the vectors and the index built from it.
    pub fn new(
        catalog: Catalog,
        index: EmbeddingIndex,
        checkpoint: Option<ModelCheckpoint>,
        vectors: Option<WordVectors>,
    ) -> Result<Self> {
        if let Some(ckpt) = &checkpoint {
            let vectors = vectors.as_ref().ok_or(Error::MissingArtifact {
                strategy: "pairnn",
                artifact: "word vectors (vocabulary source)",
            })?;
            ckpt.check_vocab(vectors.vocab())?;
            let fp = ckpt.payload_fingerprint();
            if index.checkpoint_fingerprint() != fp {
                return Err(Error::FingerprintMismatch {
                    expected: fp,
                    got: index.checkpoint_fingerprint().to_string(),
                });
            }
        }
        Ok(Retriever {
            catalog,
            index,
            checkpoint,
            vectors,
        })
    }

    pub fn retrieve(&self, req: &RetrievalRequest) -> Result<Vec<ScoredProduct>> {
        req.validate()?;
        let user = self.catalog.require_user(req.user_id)?;
        match req.strategy {
            Strategy::Pairnn => {
                let ckpt = self.checkpoint.as_ref().ok_or(Error::MissingArtifact {
                    strategy: "pairnn",
                    artifact: "model checkpoint",
                })?;
                let vectors = self.vectors.as_ref().ok_or(Error::MissingArtifact {
                    strategy: "pairnn",
                    artifact: "word vectors (vocabulary source)",
                })?;
                let emb = ckpt.model.embed_user(user, vectors.vocab())?;
                retrieve(&self.index, user, emb.data(), req.m, req.n, req.as_of)
            }
            Strategy::Word2vec => {
                let vectors = self.vectors.as_ref().ok_or(Error::MissingArtifact {
                    strategy: "word2vec",
                    artifact: "word vectors",
                })?;
                retrieve_word2vec(
                    vectors,
                    &self.catalog,
                    &self.index,
                    user,
                    req.m,
                    req.n,
                    req.as_of,
                )
            }
            Strategy::Time => retrieve_time_based(&self.index, user, req.m, req.n, req.as_of),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{GeoPoint, ProductRecord};
    use crate::text::Vocabulary;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn user_at(lat: f64, lon: f64, radius_km: f64) -> UserProfile {
        UserProfile {
            user_id: 1,
            keywords: vec!["bike".into()],
            demographics: vec![0.5; 4],
            location: GeoPoint { lat, lon },
            radius_km,
        }
    }

    fn entry(id: u64, lat: f64, lon: f64, created_at: i64, emb: Vec<f32>) -> IndexEntry {
        IndexEntry {
            product_id: id,
            embedding: emb,
            location: GeoPoint { lat, lon },
            created_at,
        }
    }

    fn axis(dim: usize, i: usize, sign: f32) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i % dim] = sign;
        v
    }

    fn random_index(n: usize, rng: &mut ChaCha8Rng) -> EmbeddingIndex {
        let entries: Vec<IndexEntry> = (0..n as u64)
            .map(|i| {
                let mut emb: Vec<f32> = (0..8).map(|_| rng.random::<f32>() - 0.5).collect();
                let norm = l2_norm(&emb);
                emb.iter_mut().for_each(|v| *v /= norm);
                entry(
                    i + 1,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    1_700_000_000 + rng.random_range(0..500_i64) * 3600,
                    emb,
                )
            })
            .collect();
        EmbeddingIndex::new(8, "t".into(), entries).unwrap()
    }

    #[test]
    fn candidate_set_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(900);
        let index = random_index(300, &mut rng);
        for trial in 0..20 {
            let user = user_at(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                20.0 + rng.random::<f64>() * 120.0,
            );
            let m = 1 + (trial % 12);
            // Oracle: independent filter, full sort, truncate.
            let mut oracle: Vec<(i64, u64)> = index
                .entries()
                .iter()
                .filter(|e| haversine_km(user.location, e.location).unwrap() <= user.radius_km)
                .map(|e| (e.created_at, e.product_id))
                .collect();
            oracle.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            oracle.truncate(m);
            let got: Vec<(i64, u64)> = candidate_set(&index, &user, m)
                .unwrap()
                .iter()
                .map(|e| (e.created_at, e.product_id))
                .collect();
            assert_eq!(got, oracle, "trial {trial}");
        }
    }

    #[test]
    fn retrieve_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(901);
        let index = random_index(200, &mut rng);
        let user = user_at(0.0, 0.0, 200.0);
        let mut emb: Vec<f32> = (0..8).map(|_| rng.random::<f32>() - 0.5).collect();
        let norm = l2_norm(&emb);
        emb.iter_mut().for_each(|v| *v /= norm);
        let m = 150;
        let n = 10;
        let got = retrieve(&index, &user, &emb, m, n, None).unwrap();
        let mut oracle: Vec<ScoredProduct> = candidate_set(&index, &user, m)
            .unwrap()
            .iter()
            .map(|e| ScoredProduct {
                product_id: e.product_id,
                score: score(&emb, &e.embedding),
            })
            .collect();
        oracle.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.product_id.cmp(&b.product_id)));
        oracle.truncate(n);
        assert_eq!(got, oracle);
        // Sorted descending; every id came from the window.
        assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn out_of_radius_products_are_excluded() {
        let index = EmbeddingIndex::new(
            2,
            "t".into(),
            vec![
                entry(1, 0.0, 0.0, 100, axis(2, 0, 1.0)),
                entry(2, 0.0, 3.0, 200, axis(2, 1, 1.0)),
            ],
        )
        .unwrap();
        // 3 degrees of longitude at the equator is ~333 km.
        let user = user_at(0.0, 0.0, 50.0);
        let cands = candidate_set(&index, &user, 10).unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].product_id, 1);
        let none = candidate_set(&index, &user_at(45.0, 90.0, 10.0), 10).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn recency_ties_break_by_ascending_id() {
        let index = EmbeddingIndex::new(
            2,
            "t".into(),
            vec![
                entry(5, 0.0, 0.0, 100, axis(2, 0, 1.0)),
                entry(2, 0.0, 0.0, 100, axis(2, 0, 1.0)),
                entry(9, 0.0, 0.0, 300, axis(2, 0, 1.0)),
            ],
        )
        .unwrap();
        let user = user_at(0.0, 0.0, 10.0);
        let ids: Vec<u64> = candidate_set(&index, &user, 10)
            .unwrap()
            .iter()
            .map(|e| e.product_id)
            .collect();
        assert_eq!(ids, vec![9, 2, 5]);
    }

    #[test]
    fn score_ties_break_by_ascending_id() {
        let index = EmbeddingIndex::new(
            2,
            "t".into(),
            vec![
                entry(7, 0.0, 0.0, 100, axis(2, 0, 1.0)),
                entry(3, 0.0, 0.0, 200, axis(2, 0, 1.0)),
                entry(5, 0.0, 0.0, 300, axis(2, 1, 1.0)),
            ],
        )
        .unwrap();
        let user = user_at(0.0, 0.0, 10.0);
        let got = retrieve(&index, &user, &[1.0, 0.0], 10, 3, None).unwrap();
        let ids: Vec<u64> = got.iter().map(|s| s.product_id).collect();
        assert_eq!(ids, vec![3, 7, 5]);
    }

    #[test]
    fn time_based_equals_candidate_prefix_and_ignores_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(902);
        let index_a = random_index(100, &mut rng);
        // Same ids/locations/timestamps, different embeddings.
        let entries_b: Vec<IndexEntry> = index_a
            .entries()
            .iter()
            .map(|e| IndexEntry {
                embedding: axis(8, e.product_id as usize, -1.0),
                ..e.clone()
            })
            .collect();
        let index_b = EmbeddingIndex::new(8, "other".into(), entries_b).unwrap();
        let user = user_at(0.0, 0.0, 500.0);
        let a = retrieve_time_based(&index_a, &user, 30, 10, None).unwrap();
        let b = retrieve_time_based(&index_b, &user, 30, 10, None).unwrap();
        assert_eq!(a, b);
        let prefix: Vec<u64> = candidate_set(&index_a, &user, 30)
            .unwrap()
            .iter()
            .take(10)
            .map(|e| e.product_id)
            .collect();
        assert_eq!(a.iter().map(|s| s.product_id).collect::<Vec<_>>(), prefix);
    }

    fn w2v_fixture() -> (WordVectors, Catalog) {
        // Orthogonal-by-construction vectors: bike on axis 0, sofa on axis 1.
        let vocab = Vocabulary::build(["bike bike sofa"].iter(), 1);
        let dim = 4;
        let mut data = vec![0.0f32; vocab.len() * dim];
        let bike = vocab.id("bike").unwrap() as usize;
        let sofa = vocab.id("sofa").unwrap() as usize;
        data[bike * dim] = 2.0;
        data[sofa * dim + 1] = 3.0;
        let vectors = WordVectors::from_raw(vocab, dim, data);
        let products = vec![
            ProductRecord {
                product_id: 1,
                title: "bike".into(),
                description: String::new(),
                image_features: None,
                location: GeoPoint { lat: 0.0, lon: 0.0 },
                created_at: 100,
            },
            ProductRecord {
                product_id: 2,
                title: "sofa".into(),
                description: String::new(),
                image_features: None,
                location: GeoPoint { lat: 0.0, lon: 0.0 },
                created_at: 200,
            },
            ProductRecord {
                product_id: 3,
                title: "zzzunknown".into(),
                description: String::new(),
                image_features: None,
                location: GeoPoint { lat: 0.0, lon: 0.0 },
                created_at: 300,
            },
        ];
        let catalog = Catalog::new(vec![user_at(0.0, 0.0, 10.0)], products).unwrap();
        (vectors, catalog)
    }

    fn index_for(catalog: &Catalog) -> EmbeddingIndex {
        let entries: Vec<IndexEntry> = catalog
            .products()
            .iter()
            .map(|p| entry(p.product_id, p.location.lat, p.location.lon, p.created_at, axis(2, 0, 1.0)))
            .collect();
        EmbeddingIndex::new(2, "t".into(), entries).unwrap()
    }

    #[test]
    fn word2vec_identical_keyword_and_title_score_one() {
        let (vectors, catalog) = w2v_fixture();
        let index = index_for(&catalog);
        let user = user_at(0.0, 0.0, 10.0);
        let got = retrieve_word2vec(&vectors, &catalog, &index, &user, 10, 3, None).unwrap();
        assert_eq!(got[0].product_id, 1);
        assert!((got[0].score - 1.0).abs() < 1e-6);
        // Orthogonal title scores ~0; unknown-token title scores exactly 0.
        let sofa = got.iter().find(|s| s.product_id == 2).unwrap();
        assert!(sofa.score.abs() < 1e-6);
        let unknown = got.iter().find(|s| s.product_id == 3).unwrap();
        assert_eq!(unknown.score, 0.0);
    }

    #[test]
    fn word2vec_ranking_matches_brute_force_oracle() {
        let (vectors, catalog) = w2v_fixture();
        let index = index_for(&catalog);
        let user = user_at(0.0, 0.0, 10.0);
        let got = retrieve_word2vec(&vectors, &catalog, &index, &user, 10, 2, None).unwrap();
        let user_mean = vectors.mean_embedding(&user.keywords);
        let mut oracle: Vec<ScoredProduct> = catalog
            .products()
            .iter()
            .map(|p| ScoredProduct {
                product_id: p.product_id,
                score: cosine_or_zero(&user_mean, &vectors.mean_embedding(&tokenize(&p.title))),
            })
            .collect();
        oracle.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.product_id.cmp(&b.product_id)));
        oracle.truncate(2);
        assert_eq!(got, oracle);
    }

    #[test]
    fn as_of_excludes_products_created_at_or_after() {
        let (_, catalog) = w2v_fixture();
        let index = index_for(&catalog);
        let user = user_at(0.0, 0.0, 10.0);
        let ids: Vec<u64> = candidate_set_as_of(&index, &user, 10, Some(200))
            .unwrap()
            .iter()
            .map(|e| e.product_id)
            .collect();
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn all_strategies_agree_on_a_single_candidate() {
        let (vectors, catalog) = w2v_fixture();
        let entries = vec![entry(2, 0.0, 0.0, 50, axis(2, 1, 1.0))];
        let index = EmbeddingIndex::new(2, "t".into(), entries).unwrap();
        let user = user_at(0.0, 0.0, 10.0);
        let t = retrieve_time_based(&index, &user, 1, 1, None).unwrap();
        let p = retrieve(&index, &user, &[0.3, 0.4], 1, 1, None).unwrap();
        let w = retrieve_word2vec(&vectors, &catalog, &index, &user, 1, 1, None).unwrap();
        let ids = |v: &[ScoredProduct]| v.iter().map(|s| s.product_id).collect::<Vec<_>>();
        assert_eq!(ids(&t), vec![2]);
        assert_eq!(ids(&t), ids(&p));
        assert_eq!(ids(&t), ids(&w));
    }

    #[test]
    fn window_validation_rejects_bad_m_n() {
        let (_, catalog) = w2v_fixture();
        let index = index_for(&catalog);
        let user = user_at(0.0, 0.0, 10.0);
        assert!(matches!(
            retrieve_time_based(&index, &user, 5, 0, None),
            Err(Error::InvalidRequest { .. })
        ));
        assert!(matches!(
            retrieve_time_based(&index, &user, 3, 5, None),
            Err(Error::InvalidRequest { .. })
        ));
    }

    #[test]
    fn retriever_names_missing_artifacts() {
        let (vectors, catalog) = w2v_fixture();
        let index = index_for(&catalog);
        let retriever = Retriever::new(catalog, index, None, Some(vectors)).unwrap();
        let req = RetrievalRequest {
            user_id: 1,
            m: 10,
            n: 2,
            strategy: Strategy::Pairnn,
            as_of: None,
        };
        match retriever.retrieve(&req) {
            Err(Error::MissingArtifact { strategy, .. }) => assert_eq!(strategy, "pairnn"),
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
        let req = RetrievalRequest {
            user_id: 99,
            m: 10,
            n: 2,
            strategy: Strategy::Time,
            as_of: None,
        };
        assert!(matches!(
            retriever.retrieve(&req),
            Err(Error::UnknownId { .. })
        ));
    }
}
