//! The pairnn two-tower model: a user tower and a product tower emitting
//! L2-normalized 50-d embeddings in a shared space, scored by dot product
//! (equal to cosine at unit norm).
//!
//! User side: keyword embeddings, average pooling, demographics concat, MLP.
//! Product side: token embeddings through 1-D convolutions with max-over-time
//! pooling (text branch) and a fixed externally supplied image feature vector
//! (image branch), each branch scale-balanced to unit norm, concatenated into
//! the same MLP stack. Hidden widths are 100, 100; output 50.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{ProductRecord, UserProfile};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var, NORM_EPS};
use crate::tensor::{dot, l2_norm, Scalar, Tensor};
use crate::text::{tokenize, Vocabulary};
use crate::word2vec::{mix, WordVectors};

pub const HIDDEN: usize = 100;
pub const OUT_DIM: usize = 50;
const INIT_RANGE: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Both,
}

impl Modality {
    pub fn has_text(self) -> bool {
        matches!(self, Modality::Text | Modality::Both)
    }

    pub fn has_image(self) -> bool {
        matches!(self, Modality::Image | Modality::Both)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub modality: Modality,
    pub word_dim: usize,
    /// Embedding table rows including the reserved zero OOV row.
    pub vocab_rows: usize,
    pub d_demo: usize,
    pub d_img: usize,
    pub conv_widths: Vec<usize>,
    pub conv_channels: usize,
    pub max_tokens: usize,
}

impl TowerConfig {
    pub fn new(modality: Modality, vectors: &WordVectors, d_demo: usize, d_img: usize) -> Self {
        TowerConfig {
            modality,
            word_dim: vectors.dim(),
            vocab_rows: vectors.vocab().len(),
            d_demo,
            d_img,
            conv_widths: vec![2, 3],
            conv_channels: 32,
            max_tokens: 128,
        }
    }

    pub fn text_dim(&self) -> usize {
        if self.modality.has_text() {
            self.conv_widths.len() * self.conv_channels
        } else {
            0
        }
    }

    pub fn image_dim(&self) -> usize {
        if self.modality.has_image() {
            self.d_img
        } else {
            0
        }
    }

    pub fn product_mlp_in(&self) -> usize {
        self.text_dim() + self.image_dim()
    }

    pub fn user_mlp_in(&self) -> usize {
        self.word_dim + self.d_demo
    }

    /// Canonical (name, shape) list; parameter storage, checkpoint payload
    /// order, and optimizer state all follow it.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("user.embed".into(), vec![self.vocab_rows, self.word_dim]),
            ("user.mlp1.w".into(), vec![HIDDEN, self.user_mlp_in()]),
            ("user.mlp1.b".into(), vec![HIDDEN]),
            ("user.mlp2.w".into(), vec![HIDDEN, HIDDEN]),
            ("user.mlp2.b".into(), vec![HIDDEN]),
            ("user.out.w".into(), vec![OUT_DIM, HIDDEN]),
            ("user.out.b".into(), vec![OUT_DIM]),
        ];
        if self.modality.has_text() {
            out.push(("product.embed".into(), vec![self.vocab_rows, self.word_dim]));
            for &w in &self.conv_widths {
                out.push((
                    format!("product.conv{w}.w"),
                    vec![self.conv_channels, w * self.word_dim],
                ));
                out.push((format!("product.conv{w}.b"), vec![self.conv_channels]));
            }
        }
        out.push(("product.mlp1.w".into(), vec![HIDDEN, self.product_mlp_in()]));
        out.push(("product.mlp1.b".into(), vec![HIDDEN]));
        out.push(("product.mlp2.w".into(), vec![HIDDEN, HIDDEN]));
        out.push(("product.mlp2.b".into(), vec![HIDDEN]));
        out.push(("product.out.w".into(), vec![OUT_DIM, HIDDEN]));
        out.push(("product.out.b".into(), vec![OUT_DIM]));
        out
    }
}

/// Named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
}

impl Parameter {
    pub fn new(name: String, value: Tensor<f32>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone)]
pub struct PairModel {
    pub config: TowerConfig,
    params: Vec<Parameter>,
}

impl PairModel {
    /// Fresh model: embedding tables copied from the word2vec vectors (both
    /// towers get separate trainable copies, OOV row zero), weights uniform
    /// in (-0.05, 0.05), biases zero.
    pub fn new(config: TowerConfig, vectors: &WordVectors, seed: u64) -> Result<Self> {
        if config.vocab_rows != vectors.vocab().len() || config.word_dim != vectors.dim() {
            return Err(Error::shape(
                "model init",
                format!("embedding table [{} x {}]", config.vocab_rows, config.word_dim),
                format!("vectors [{} x {}]", vectors.vocab().len(), vectors.dim()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, STREAM_MODEL_INIT));
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".embed") {
                vectors.raw().to_vec()
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                (0..n)
                    .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * INIT_RANGE)
                    .collect()
            };
            params.push(Parameter::new(name, Tensor::new(shape, data)?));
        }
        Ok(PairModel { config, params })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Replace all parameters with a snapshot taken from this same model
    /// (the divergence-recovery path).
    pub fn set_params(&mut self, params: Vec<Parameter>) {
        assert_eq!(params.len(), self.params.len(), "snapshot layout mismatch");
        self.params = params;
    }

    pub fn param(&self, name: &str) -> &Parameter {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Record every parameter as a tape leaf, in layout order.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|p| (p.name.clone(), tape.leaf(p.value.cast())))
            .collect();
        ParamVars { vars }
    }

    pub fn embed_user(&self, user: &UserProfile, vocab: &Vocabulary) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape);
        let out = forward_user(&self.config, &mut tape, &vars, user, vocab)?;
        Ok(tape.value(out).clone())
    }

    pub fn embed_product(&self, product: &ProductRecord, vocab: &Vocabulary) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape);
        let out = forward_product(&self.config, &mut tape, &vars, product, vocab)?;
        Ok(tape.value(out).clone())
    }
}

/// Parameter leaves bound on some tape, addressable by name.
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Build directly from (name, leaf) pairs; the gradient-check harness
    /// binds its own f64 leaves.
    pub fn from_pairs(vars: Vec<(String, Var)>) -> Self {
        ParamVars { vars }
    }
}

fn mlp<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    input: Var,
) -> Result<Var> {
    let h1 = tape.affine(input, vars.get(&format!("{prefix}.mlp1.w")), vars.get(&format!("{prefix}.mlp1.b")))?;
    let a1 = tape.relu(h1);
    let h2 = tape.affine(a1, vars.get(&format!("{prefix}.mlp2.w")), vars.get(&format!("{prefix}.mlp2.b")))?;
    let a2 = tape.relu(h2);
    tape.affine(a2, vars.get(&format!("{prefix}.out.w")), vars.get(&format!("{prefix}.out.b")))
}

/// Normalize the tower output. A degenerate (near-zero) vector maps to a
/// fixed unit basis vector instead of erroring: it keeps the "finite
/// unit-norm output" contract for empty-input products at initialization,
/// carries no gradient, and disappears as soon as biases move off zero.
fn normalize_or_basis<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let norm = l2_norm(tape.value(v).data()).to_f64();
    if norm <= NORM_EPS {
        let mut e1 = vec![T::zero(); tape.value(v).len()];
        e1[0] = T::one();
        return Ok(tape.leaf(Tensor::vector(e1)));
    }
    tape.l2_normalize(v)
}

/// Scale-balance one product input branch to unit norm before the concat.
/// Raw image features and max-pooled conv activations differ by more than
/// an order of magnitude, and the louder branch would own the shared MLP;
/// each branch must enter at unit scale. A near-zero branch (empty text)
/// stays zero: it carries no evidence and must not be inflated into one.
fn normalize_branch<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let norm = l2_norm(tape.value(v).data()).to_f64();
    if norm <= NORM_EPS {
        return Ok(v);
    }
    tape.l2_normalize(v)
}

pub fn forward_user<T: Scalar>(
    config: &TowerConfig,
    tape: &mut Tape<T>,
    vars: &ParamVars,
    user: &UserProfile,
    vocab: &Vocabulary,
) -> Result<Var> {
    if user.demographics.len() != config.d_demo {
        return Err(Error::shape(
            "embed_user",
            format!("demographics [{}]", config.d_demo),
            format!("[{}] for user {}", user.demographics.len(), user.user_id),
        ));
    }
    let rows: Vec<usize> = user
        .keywords
        .iter()
        .filter_map(|k| vocab.id(k))
        .map(|id| id as usize)
        .collect();
    let table = vars.get("user.embed");
    let pooled = tape.embedding_mean(table, &rows)?;
    let demo = tape.leaf(Tensor::vector(
        user.demographics.iter().map(|&v| T::from_f32(v)).collect(),
    ));
    let joined = tape.concat(&[pooled, demo])?;
    let out = mlp(tape, vars, "user", joined)?;
    normalize_or_basis(tape, out)
}

/// Title tokens first, then description, truncated to max_tokens, OOV
/// dropped.
pub fn product_token_rows(config: &TowerConfig, product: &ProductRecord, vocab: &Vocabulary) -> Vec<usize> {
    let mut tokens = tokenize(&product.title);
    tokens.extend(tokenize(&product.description));
    tokens.truncate(config.max_tokens);
    tokens
        .iter()
        .filter_map(|t| vocab.id(t))
        .map(|id| id as usize)
        .collect()
}

pub fn forward_product<T: Scalar>(
    config: &TowerConfig,
    tape: &mut Tape<T>,
    vars: &ParamVars,
    product: &ProductRecord,
    vocab: &Vocabulary,
) -> Result<Var> {
    let mut branches: Vec<Var> = Vec::with_capacity(2);
    if config.modality.has_text() {
        let rows = product_token_rows(config, product, vocab);
        if rows.is_empty() {
            branches.push(tape.leaf(Tensor::zeros(&[config.text_dim()])));
        } else {
            let table = vars.get("product.embed");
            let seq = tape.embedding_seq(table, &rows)?;
            let mut pooled = Vec::with_capacity(config.conv_widths.len());
            for &w in &config.conv_widths {
                pooled.push(tape.conv_max_pool(
                    seq,
                    vars.get(&format!("product.conv{w}.w")),
                    vars.get(&format!("product.conv{w}.b")),
                    w,
                )?);
            }
            let text = tape.concat(&pooled)?;
            branches.push(normalize_branch(tape, text)?);
        }
    }
    if config.modality.has_image() {
        let feats = product
            .image_features
            .as_ref()
            .ok_or(Error::MissingImage { id: product.product_id })?;
        if feats.len() != config.d_img {
            return Err(Error::shape(
                "embed_product",
                format!("image_features [{}]", config.d_img),
                format!("[{}] for product {}", feats.len(), product.product_id),
            ));
        }
        let image = tape.leaf(Tensor::vector(
            feats.iter().map(|&v| T::from_f32(v)).collect(),
        ));
        branches.push(normalize_branch(tape, image)?);
    }
    let joined = tape.concat(&branches)?;
    let out = mlp(tape, vars, "product", joined)?;
    normalize_or_basis(tape, out)
}

/// r_ui as a plain dot product over unit-norm embeddings, clamped to the
/// cosine range to absorb float rounding.
pub fn score(user_emb: &[f32], product_emb: &[f32]) -> f32 {
    dot(user_emb, product_emb).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    config: TowerConfig,
    vocab_fingerprint: String,
    train_config: serde_json::Value,
    params: Vec<ParamInfo>,
}

const CHECKPOINT_FORMAT: &str = "pairnn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Frozen model plus the metadata needed to audit or resume a run.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub model: PairModel,
    pub vocab_fingerprint: String,
    pub train_config: serde_json::Value,
}

impl ModelCheckpoint {
    /// File layout: one JSON manifest line (format, version, tower config,
    /// vocabulary fingerprint, training config echo, named shapes), then the
    /// parameter payloads as little-endian f32 concatenated in manifest
    /// order. Load then save is byte-identical.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            train_config: self.train_config.clone(),
            params: self
                .model
                .params()
                .iter()
                .map(|p| ParamInfo {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        for p in self.model.params() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let manifest: CheckpointManifest = serde_json::from_str(header.trim_end())
            .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported format {}/{}", manifest.format, manifest.version),
            ));
        }
        let expected = manifest.config.layout();
        let found: Vec<(String, Vec<usize>)> = manifest
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        if expected != found {
            return Err(Error::format(path, "parameter list does not match tower config"));
        }
        let mut params = Vec::with_capacity(found.len());
        for (name, shape) in found {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::format(path, format!("truncated payload for {name}")))?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Parameter::new(name, Tensor::new(shape, data)?));
        }
        if reader.bytes().next().is_some() {
            return Err(Error::format(path, "trailing bytes after parameter payload"));
        }
        Ok(ModelCheckpoint {
            model: PairModel {
                config: manifest.config,
                params,
            },
            vocab_fingerprint: manifest.vocab_fingerprint,
            train_config: manifest.train_config,
        })
    }

    /// Hex SHA-256 over the parameter payload; stamped into indexes built
    /// from this checkpoint.
    pub fn payload_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in self.model.params() {
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        crate::text::hex(&hasher.finalize())
    }

    /// Guard against mixing pipeline stages built on different corpora.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let got = vocab.fingerprint();
        if got != self.vocab_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.vocab_fingerprint.clone(),
                got,
            });
        }
        Ok(())
    }
}

pub(crate) const STREAM_MODEL_INIT: u64 = 21;
