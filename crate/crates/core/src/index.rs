//! Product embedding index: an immutable snapshot of every product run
//! through the frozen product tower, with the location and creation time
//! needed by the serving path. Exact brute-force search over it is the
//! retrieval backend; the recency window bounds query cost.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, GeoPoint};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::l2_norm;
use crate::text::Vocabulary;
use crate::towers::{forward_product, ModelCheckpoint};

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub product_id: u64,
    pub embedding: Vec<f32>,
    pub location: GeoPoint,
    pub created_at: i64,
}

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    checkpoint_fingerprint: String,
    /// Sorted by product id; ids unique.
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
    checkpoint_fingerprint: String,
}

const INDEX_FORMAT: &str = "pairnn-index";
const INDEX_VERSION: u32 = 1;
/// Products per tape when embedding; bounds forward-graph memory.
const EMBED_CHUNK: usize = 128;

impl EmbeddingIndex {
    pub fn new(dim: usize, checkpoint_fingerprint: String, mut entries: Vec<IndexEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.product_id);
        for pair in entries.windows(2) {
            if pair[0].product_id == pair[1].product_id {
                return Err(Error::DuplicateId {
                    kind: "product",
                    id: pair[0].product_id,
                });
            }
        }
        for e in &entries {
            if e.embedding.len() != dim {
                return Err(Error::shape(
                    "index entry",
                    format!("[{dim}]"),
                    format!("[{}] for product {}", e.embedding.len(), e.product_id),
                ));
            }
        }
        Ok(EmbeddingIndex {
            dim,
            checkpoint_fingerprint,
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn checkpoint_fingerprint(&self) -> &str {
        &self.checkpoint_fingerprint
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, product_id: u64) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by_key(&product_id, |e| e.product_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Largest |norm - 1| over stored embeddings; the build contract keeps
    /// it below 1e-5.
    pub fn max_norm_deviation(&self) -> f32 {
        self.entries
            .iter()
            .map(|e| (l2_norm(&e.embedding) - 1.0).abs())
            .fold(0.0, f32::max)
    }

    /// File layout: one JSON manifest line (format, version, dim, count,
    /// checkpoint fingerprint), then `count` fixed-width records: product id
    /// (u64 LE), dim little-endian f32, lat (f64 LE), lon (f64 LE),
    /// created_at (i64 LE).
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = IndexManifest {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            dim: self.dim,
            count: self.entries.len(),
            checkpoint_fingerprint: self.checkpoint_fingerprint.clone(),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        for e in &self.entries {
            out.extend_from_slice(&e.product_id.to_le_bytes());
            for v in &e.embedding {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&e.location.lat.to_le_bytes());
            out.extend_from_slice(&e.location.lon.to_le_bytes());
            out.extend_from_slice(&e.created_at.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let manifest: IndexManifest = serde_json::from_str(header.trim_end())
            .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
        if manifest.format != INDEX_FORMAT || manifest.version != INDEX_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported format {}/{}", manifest.format, manifest.version),
            ));
        }
        let record = 8 + manifest.dim * 4 + 8 + 8 + 8;
        let mut entries = Vec::with_capacity(manifest.count);
        let mut buf = vec![0u8; record];
        for i in 0..manifest.count {
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::format(path, format!("truncated at record {i}")))?;
            let product_id = u64::from_le_bytes(buf[0..8].try_into().unwrap());
            let embedding: Vec<f32> = buf[8..8 + manifest.dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let rest = 8 + manifest.dim * 4;
            let lat = f64::from_le_bytes(buf[rest..rest + 8].try_into().unwrap());
            let lon = f64::from_le_bytes(buf[rest + 8..rest + 16].try_into().unwrap());
            let created_at = i64::from_le_bytes(buf[rest + 16..rest + 24].try_into().unwrap());
            entries.push(IndexEntry {
                product_id,
                embedding,
                location: GeoPoint { lat, lon },
                created_at,
            });
        }
        if reader.bytes().next().is_some() {
            return Err(Error::format(path, "trailing bytes after records"));
        }
        EmbeddingIndex::new(manifest.dim, manifest.checkpoint_fingerprint, entries)
    }
}

/// Embed every product with the frozen product tower. Deterministic and
/// independent of `workers`: each product's forward pass is self-contained,
/// and results are assembled in catalog id order.
pub fn build_index(
    catalog: &Catalog,
    checkpoint: &ModelCheckpoint,
    vocab: &Vocabulary,
    workers: usize,
) -> Result<EmbeddingIndex> {
    checkpoint.check_vocab(vocab)?;
    let config = &checkpoint.model.config;
    if config.modality.has_image() {
        let missing: Vec<u64> = catalog
            .products()
            .iter()
            .filter(|p| p.image_features.is_none())
            .map(|p| p.product_id)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingImageFeatures { ids: missing });
        }
    }
    let embed_chunk = |products: &[crate::catalog::ProductRecord]| -> Result<Vec<IndexEntry>> {
        let mut out = Vec::with_capacity(products.len());
        for chunk in products.chunks(EMBED_CHUNK) {
            let mut tape = Tape::<f32>::new();
            let vars = checkpoint.model.bind(&mut tape);
            for p in chunk {
                let v = forward_product(config, &mut tape, &vars, p, vocab)?;
                out.push(IndexEntry {
                    product_id: p.product_id,
                    embedding: tape.value(v).data().to_vec(),
                    location: p.location,
                    created_at: p.created_at,
                });
            }
        }
        Ok(out)
    };
    let entries: Vec<IndexEntry> = if workers > 1 {
        let pool = crate::worker_pool(workers)?;
        let chunks: Vec<&[crate::catalog::ProductRecord]> =
            catalog.products().chunks(EMBED_CHUNK * 4).collect();
        let nested: Vec<Vec<IndexEntry>> = pool.install(|| {
            chunks
                .par_iter()
                .map(|c| embed_chunk(c))
                .collect::<Result<Vec<_>>>()
        })?;
        nested.into_iter().flatten().collect()
    } else {
        embed_chunk(catalog.products())?
    };
    EmbeddingIndex::new(
        crate::towers::OUT_DIM,
        checkpoint.payload_fingerprint(),
        entries,
    )
}
