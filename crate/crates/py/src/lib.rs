//! Python bindings over the pairnn crate: the text/geo primitives, the
//! ranking metrics, and file-level pipeline operations (generate, train,
//! index, retrieve, replay). Structured results cross the boundary as JSON
//! strings; paths are plain strings.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use pairnn::catalog::{load_catalog, read_jsonl, write_jsonl, Catalog, ProductRecord};
use pairnn::eval;
use pairnn::index::{build_index, EmbeddingIndex};
use pairnn::retrieval::{RetrievalRequest, Strategy};
use pairnn::synthetic::{generate_synthetic, SyntheticConfig};
use pairnn::text::{tokenize as tokenize_rs, Vocabulary};
use pairnn::towers::ModelCheckpoint;
use pairnn::training::{
    build_triples, evaluate_split, is_validation_user, time_split_cutoff, train as train_rs,
    TrainConfig, TrainingTriple,
};
use pairnn::word2vec::{train_word2vec as train_word2vec_rs, Word2vecConfig, WordVectors};

fn err(e: pairnn::Error) -> PyErr {
    match e {
        pairnn::Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn jerr(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("config: {e}"))
}

fn parse_config<T: Default + serde::de::DeserializeOwned>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(text) => serde_json::from_str(text).map_err(jerr),
        None => Ok(T::default()),
    }
}

/// Lowercase alphanumeric tokenization, identical to the Rust side.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tokenize_rs(text)
}

/// Great-circle distance in km between (lat, lon) pairs in degrees.
#[pyfunction]
fn haversine_km(lat_a: f64, lon_a: f64, lat_b: f64, lon_b: f64) -> PyResult<f64> {
    pairnn::catalog::haversine_km(
        pairnn::catalog::GeoPoint { lat: lat_a, lon: lon_a },
        pairnn::catalog::GeoPoint { lat: lat_b, lon: lon_b },
    )
    .map_err(err)
}

/// Share of (positive, negative) score pairs ranked correctly; ties count
/// as incorrect.
#[pyfunction]
fn accuracy(pairs: Vec<(f64, f64)>) -> PyResult<f64> {
    let tuples: Vec<eval::ScoredTuple> = pairs
        .iter()
        .map(|&(p, n)| eval::ScoredTuple {
            positive_score: p,
            negative_score: n,
        })
        .collect();
    eval::accuracy(&tuples).map_err(err)
}

/// Mean hinge rank loss max(0, neg - pos + margin) over score pairs.
#[pyfunction]
#[pyo3(signature = (pairs, margin=1.0))]
fn average_loss(pairs: Vec<(f64, f64)>, margin: f64) -> PyResult<f64> {
    let tuples: Vec<eval::ScoredTuple> = pairs
        .iter()
        .map(|&(p, n)| eval::ScoredTuple {
            positive_score: p,
            negative_score: n,
        })
        .collect();
    eval::average_loss(&tuples, margin).map_err(err)
}

/// Generate a synthetic catalog + event log into out_dir (users.jsonl,
/// products.jsonl, events.jsonl). config is a JSON object mirroring the
/// gen-data options; omitted keys take their defaults. Returns
/// (users, products, events) counts.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn gen_data(out_dir: &str, config: Option<&str>) -> PyResult<(usize, usize, usize)> {
    let cfg: SyntheticConfig = parse_config(config)?;
    let data = generate_synthetic(&cfg).map_err(err)?;
    let dir = Path::new(out_dir);
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("users.jsonl"), &data.users).map_err(err)?;
    write_jsonl(&dir.join("products.jsonl"), &data.products).map_err(err)?;
    write_jsonl(&dir.join("events.jsonl"), &data.events).map_err(err)?;
    Ok((data.users.len(), data.products.len(), data.events.len()))
}

/// Train word vectors on product titles + descriptions and save them.
/// Returns the per-epoch mean SGNS loss.
#[pyfunction]
#[pyo3(signature = (products, output, config=None))]
fn train_word2vec(products: &str, output: &str, config: Option<&str>) -> PyResult<Vec<f64>> {
    let cfg: Word2vecConfig = parse_config(config)?;
    let records: Vec<ProductRecord> = read_jsonl(Path::new(products)).map_err(err)?;
    let docs: Vec<String> = records
        .iter()
        .map(|p| format!("{} {}", p.title, p.description))
        .collect();
    let vocab = Vocabulary::build(docs.iter(), cfg.min_count);
    let id_docs: Vec<Vec<u32>> = docs
        .iter()
        .map(|d| vocab.known_ids(&tokenize_rs(d)))
        .collect();
    let (vectors, losses) = train_word2vec_rs(&vocab, &id_docs, &cfg).map_err(err)?;
    vectors.save(Path::new(output)).map_err(err)?;
    Ok(losses)
}

fn split_triples(
    users: &str,
    products: &str,
    events: &str,
    cfg: &TrainConfig,
    time_split: f64,
) -> PyResult<(Catalog, Vec<TrainingTriple>)> {
    let catalog = load_catalog(Path::new(users), Path::new(products)).map_err(err)?;
    let all_events = pairnn::catalog::load_events(Path::new(events)).map_err(err)?;
    let cutoff = time_split_cutoff(&all_events, time_split).map_err(err)?;
    let train_events: Vec<_> = all_events
        .into_iter()
        .filter(|e| e.timestamp < cutoff)
        .collect();
    let built = build_triples(&train_events, cfg.negatives_per_positive, cfg.seed).map_err(err)?;
    Ok((catalog, built.triples))
}

/// Train the two-tower model and save a checkpoint. Returns per-epoch
/// metrics as a JSON string (a list of objects). config mirrors the train
/// options; omitted keys take their defaults.
#[pyfunction]
#[pyo3(signature = (users, products, events, vectors, output, config=None, time_split=0.8))]
#[allow(clippy::too_many_arguments)]
fn train(
    users: &str,
    products: &str,
    events: &str,
    vectors: &str,
    output: &str,
    config: Option<&str>,
    time_split: f64,
) -> PyResult<String> {
    let cfg: TrainConfig = parse_config(config)?;
    let (catalog, triples) = split_triples(users, products, events, &cfg, time_split)?;
    let word_vectors = WordVectors::load(Path::new(vectors)).map_err(err)?;
    let out = train_rs(&catalog, &triples, &word_vectors, &cfg).map_err(err)?;
    out.checkpoint.save(Path::new(output)).map_err(err)?;
    if let Some(epoch) = out.diverged_at_epoch {
        return Err(PyValueError::new_err(format!(
            "training diverged at epoch {epoch}; kept the last stable checkpoint"
        )));
    }
    serde_json::to_string(&out.metrics).map_err(jerr)
}

/// Score a saved checkpoint on the validation (or training) user split.
/// Returns {"accuracy": .., "average_loss": ..} as a JSON string.
#[pyfunction]
#[pyo3(signature = (users, products, events, vectors, checkpoint, split="val", time_split=0.8))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    users: &str,
    products: &str,
    events: &str,
    vectors: &str,
    checkpoint: &str,
    split: &str,
    time_split: f64,
) -> PyResult<String> {
    let ckpt = ModelCheckpoint::load(Path::new(checkpoint)).map_err(err)?;
    let cfg: TrainConfig = serde_json::from_value(ckpt.train_config.clone()).map_err(jerr)?;
    let (catalog, triples) = split_triples(users, products, events, &cfg, time_split)?;
    let chosen: Vec<TrainingTriple> = match split {
        "val" => triples
            .into_iter()
            .filter(|t| is_validation_user(t.user_id))
            .collect(),
        "train" => triples
            .into_iter()
            .filter(|t| !is_validation_user(t.user_id))
            .collect(),
        other => {
            return Err(PyValueError::new_err(format!(
                "split must be \"train\" or \"val\", got {other:?}"
            )))
        }
    };
    let word_vectors = WordVectors::load(Path::new(vectors)).map_err(err)?;
    let metrics = evaluate_split(&ckpt, &catalog, word_vectors.vocab(), &chosen).map_err(err)?;
    Ok(serde_json::json!({
        "accuracy": metrics.accuracy,
        "average_loss": metrics.average_loss,
    })
    .to_string())
}

/// Embed every product with the checkpoint's product tower and save the
/// index. Returns the number of indexed products.
#[pyfunction]
#[pyo3(signature = (products, checkpoint, vectors, output, workers=1))]
fn index(
    products: &str,
    checkpoint: &str,
    vectors: &str,
    output: &str,
    workers: usize,
) -> PyResult<usize> {
    let records: Vec<ProductRecord> = read_jsonl(Path::new(products)).map_err(err)?;
    let catalog = Catalog::new(Vec::new(), records).map_err(err)?;
    let ckpt = ModelCheckpoint::load(Path::new(checkpoint)).map_err(err)?;
    let word_vectors = WordVectors::load(Path::new(vectors)).map_err(err)?;
    let idx = build_index(&catalog, &ckpt, word_vectors.vocab(), workers).map_err(err)?;
    idx.save(Path::new(output)).map_err(err)?;
    Ok(idx.len())
}

/// Loaded artifacts answering retrieval queries in-process.
#[pyclass]
struct Retriever {
    inner: pairnn::retrieval::Retriever,
}

#[pymethods]
impl Retriever {
    #[new]
    #[pyo3(signature = (users, products, index, checkpoint=None, vectors=None))]
    fn new(
        users: &str,
        products: &str,
        index: &str,
        checkpoint: Option<&str>,
        vectors: Option<&str>,
    ) -> PyResult<Self> {
        let catalog = load_catalog(Path::new(users), Path::new(products)).map_err(err)?;
        let idx = EmbeddingIndex::load(Path::new(index)).map_err(err)?;
        let ckpt = match checkpoint {
            Some(p) => Some(ModelCheckpoint::load(Path::new(p)).map_err(err)?),
            None => None,
        };
        let vecs = match vectors {
            Some(p) => Some(WordVectors::load(Path::new(p)).map_err(err)?),
            None => None,
        };
        Ok(Retriever {
            inner: pairnn::retrieval::Retriever::new(catalog, idx, ckpt, vecs).map_err(err)?,
        })
    }

    /// Top-n (product_id, score) for a user under a strategy
    /// ("pairnn" | "word2vec" | "time").
    #[pyo3(signature = (user_id, strategy, m=500, n=50, as_of=None))]
    fn retrieve(
        &self,
        user_id: u64,
        strategy: &str,
        m: usize,
        n: usize,
        as_of: Option<i64>,
    ) -> PyResult<Vec<(u64, f32)>> {
        let strategy: Strategy = strategy.parse().map_err(err)?;
        let req = RetrievalRequest {
            user_id,
            m,
            n,
            strategy,
            as_of,
        };
        let results = self.inner.retrieve(&req).map_err(err)?;
        Ok(results.iter().map(|r| (r.product_id, r.score)).collect())
    }
}

/// Replay held-out events (timestamp >= the time-split cutoff) against the
/// index and return the report records as a JSON-lines string.
#[pyfunction]
#[pyo3(signature = (users, products, events, index, checkpoint=None, vectors=None, strategies=vec!["pairnn".into(), "word2vec".into(), "time".into()], m=500, n=50, time_split=0.8, workers=1))]
#[allow(clippy::too_many_arguments)]
fn replay(
    users: &str,
    products: &str,
    events: &str,
    index: &str,
    checkpoint: Option<&str>,
    vectors: Option<&str>,
    strategies: Vec<String>,
    m: usize,
    n: usize,
    time_split: f64,
    workers: usize,
) -> PyResult<String> {
    let catalog = load_catalog(Path::new(users), Path::new(products)).map_err(err)?;
    let idx = EmbeddingIndex::load(Path::new(index)).map_err(err)?;
    let ckpt = match checkpoint {
        Some(p) => Some(ModelCheckpoint::load(Path::new(p)).map_err(err)?),
        None => None,
    };
    let vecs = match vectors {
        Some(p) => Some(WordVectors::load(Path::new(p)).map_err(err)?),
        None => None,
    };
    let retriever = pairnn::retrieval::Retriever::new(catalog, idx, ckpt, vecs).map_err(err)?;
    let all_events = pairnn::catalog::load_events(Path::new(events)).map_err(err)?;
    let cutoff = time_split_cutoff(&all_events, time_split).map_err(err)?;
    let held_out: Vec<_> = all_events
        .into_iter()
        .filter(|e| e.timestamp >= cutoff)
        .collect();
    let parsed: Vec<Strategy> = strategies
        .iter()
        .map(|s| s.parse().map_err(err))
        .collect::<PyResult<_>>()?;
    let report = eval::replay(&retriever, &held_out, &parsed, m, n, workers).map_err(err)?;
    Ok(report.lines())
}

#[pymodule]
fn pairnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(haversine_km, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(average_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_word2vec, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(index, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_class::<Retriever>()?;
    Ok(())
}
