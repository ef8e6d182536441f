//! Triple construction from event logs and minibatch training of the
//! two-tower model under the hinge ranking objective
//! max(0, r_neg - r_pos + margin), mean-reduced per batch.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, EventKind, EventRecord};
use crate::error::{Error, Result};
use crate::eval::{accuracy, average_loss, ScoredTuple};
use crate::tape::{Tape, Var};
use crate::text::Vocabulary;
use crate::towers::{
    forward_product, forward_user, score, Modality, ModelCheckpoint, PairModel, Parameter,
    TowerConfig,
};
use crate::word2vec::{mix, WordVectors};

/// One training example: the user messaged `positive_id` and impressed but
/// never messaged `negative_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub user_id: u64,
    pub positive_id: u64,
    pub negative_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleBuild {
    pub triples: Vec<TrainingTriple>,
    /// Users that had positives but no negative candidates.
    pub skipped_users: usize,
}

/// Per user: positives are products with at least one message event,
/// negative candidates are impressed products with no message event. Each
/// positive is paired with up to `negatives_per_positive` distinct sampled
/// negatives. Deterministic given the seed and invariant to event order.
pub fn build_triples(
    events: &[EventRecord],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<TripleBuild> {
    if negatives_per_positive < 1 {
        return Err(Error::InvalidConfig {
            msg: format!("negatives_per_positive must be >= 1, got {negatives_per_positive}"),
        });
    }
    let mut by_user: BTreeMap<u64, (BTreeSet<u64>, BTreeSet<u64>)> = BTreeMap::new();
    for e in events {
        let entry = by_user.entry(e.user_id).or_default();
        match e.kind {
            EventKind::Message => {
                entry.0.insert(e.product_id);
            }
            EventKind::Impression => {
                entry.1.insert(e.product_id);
            }
        }
    }
    let mut triples = Vec::new();
    let mut skipped_users = 0;
    for (&user_id, (messaged, impressed)) in &by_user {
        if messaged.is_empty() {
            continue;
        }
        // A messaged product is never a negative, even if also impressed.
        let negatives: Vec<u64> = impressed.difference(messaged).copied().collect();
        if negatives.is_empty() {
            skipped_users += 1;
            continue;
        }
        for &positive_id in messaged {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix(mix(mix(seed, STREAM_TRIPLES), user_id), positive_id));
            let k = negatives_per_positive.min(negatives.len());
            let mut pool = negatives.clone();
            for i in 0..k {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
                triples.push(TrainingTriple {
                    user_id,
                    positive_id,
                    negative_id: pool[i],
                });
            }
        }
    }
    Ok(TripleBuild {
        triples,
        skipped_users,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub negatives_per_positive: usize,
    /// Decoupled weight decay per step on weights and embeddings (biases
    /// exempt). Slows memorization of label noise, which otherwise erodes
    /// validation accuracy within a few epochs.
    pub weight_decay: f32,
    pub seed: u64,
    pub modality: Modality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 1.0,
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            negatives_per_positive: 14,
            weight_decay: 0.0,
            seed: 42,
            modality: Modality::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig {
                msg: format!("margin must be >= 0, got {}", self.margin),
            });
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig {
                msg: "batch_size must be >= 1".into(),
            });
        }
        if self.negatives_per_positive < 1 {
            return Err(Error::InvalidConfig {
                msg: "negatives_per_positive must be >= 1".into(),
            });
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig {
                msg: format!("learning_rate must be finite and >= 0, got {}", self.learning_rate),
            });
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig {
                msg: format!("weight_decay must be finite and >= 0, got {}", self.weight_decay),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when the user-hash split left no validation triples.
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutput {
    /// Parameters from the epoch with the highest validation accuracy
    /// (ties to the earlier epoch), or the final state when the user-hash
    /// split produced no validation triples.
    pub checkpoint: ModelCheckpoint,
    pub metrics: Vec<EpochMetrics>,
    /// Set when a batch loss went non-finite; training stops there and the
    /// checkpoint falls back over the epochs that did complete.
    pub diverged_at_epoch: Option<usize>,
    /// Epoch whose parameters the checkpoint holds; None = final state.
    pub kept_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub average_loss: f64,
}

/// Train/validation membership by user id hash, 90/10. Fixed salt: the
/// split never depends on the run seed, so runs with different seeds are
/// comparable on the same held-out users.
pub fn is_validation_user(user_id: u64) -> bool {
    mix(SPLIT_SALT, user_id) % 10 == 0
}

/// Timestamp cutting an event log into a training prefix and a held-out
/// suffix: events with timestamp < cutoff train, the rest are replayed.
/// `fraction` is the share of events on the training side; boundary ties go
/// to the held-out side.
pub fn time_split_cutoff(events: &[EventRecord], fraction: f64) -> Result<i64> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig {
            msg: format!("time_split must be in [0, 1], got {fraction}"),
        });
    }
    let mut ts: Vec<i64> = events.iter().map(|e| e.timestamp).collect();
    ts.sort_unstable();
    let idx = (ts.len() as f64 * fraction) as usize;
    Ok(if idx >= ts.len() { i64::MAX } else { ts[idx] })
}

struct Adam {
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

enum Optimizer {
    Sgd,
    Adam(Adam),
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, params: &[Parameter]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                t: 0,
                m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
                v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            }),
        }
    }

    fn step(&mut self, params: &mut [Parameter], lr: f32, weight_decay: f32) {
        match self {
            Optimizer::Sgd => {
                for p in params.iter_mut() {
                    let grad = p.grad.data().to_vec();
                    for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
                        *w -= lr * g;
                    }
                }
            }
            Optimizer::Adam(state) => {
                state.t += 1;
                let bc1 = 1.0 - BETA1.powi(state.t as i32);
                let bc2 = 1.0 - BETA2.powi(state.t as i32);
                for (i, p) in params.iter_mut().enumerate() {
                    let grad = p.grad.data().to_vec();
                    let m = &mut state.m[i];
                    let v = &mut state.v[i];
                    for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                        let g = g as f64;
                        let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * g;
                        let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * g * g;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        let update = (lr as f64) * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                        *w -= update as f32;
                    }
                }
            }
        }
        // Decoupled decay: applied after the gradient step, skipping biases.
        if weight_decay > 0.0 {
            let shrink = 1.0 - lr * weight_decay;
            for p in params.iter_mut().filter(|p| !p.name.ends_with(".b")) {
                for w in p.value.data_mut() {
                    *w *= shrink;
                }
            }
        }
    }
}

/// Embed the distinct users and products referenced by the triples (frozen
/// parameters, chunked tapes) and score every triple.
fn score_triples(
    model: &PairModel,
    vocab: &Vocabulary,
    catalog: &Catalog,
    triples: &[TrainingTriple],
) -> Result<Vec<ScoredTuple>> {
    let user_ids: BTreeSet<u64> = triples.iter().map(|t| t.user_id).collect();
    let mut product_ids: BTreeSet<u64> = triples.iter().map(|t| t.positive_id).collect();
    product_ids.extend(triples.iter().map(|t| t.negative_id));
    let mut user_emb: HashMap<u64, Vec<f32>> = HashMap::new();
    let mut product_emb: HashMap<u64, Vec<f32>> = HashMap::new();
    let user_ids: Vec<u64> = user_ids.into_iter().collect();
    for chunk in user_ids.chunks(64) {
        let mut tape = Tape::<f32>::new();
        let vars = model.bind(&mut tape);
        for &id in chunk {
            let u = catalog.require_user(id)?;
            let v = forward_user(&model.config, &mut tape, &vars, u, vocab)?;
            user_emb.insert(id, tape.value(v).data().to_vec());
        }
    }
    let product_ids: Vec<u64> = product_ids.into_iter().collect();
    for chunk in product_ids.chunks(128) {
        let mut tape = Tape::<f32>::new();
        let vars = model.bind(&mut tape);
        for &id in chunk {
            let p = catalog.require_product(id)?;
            let v = forward_product(&model.config, &mut tape, &vars, p, vocab)?;
            product_emb.insert(id, tape.value(v).data().to_vec());
        }
    }
    Ok(triples
        .iter()
        .map(|t| ScoredTuple {
            positive_score: score(&user_emb[&t.user_id], &product_emb[&t.positive_id]) as f64,
            negative_score: score(&user_emb[&t.user_id], &product_emb[&t.negative_id]) as f64,
        })
        .collect())
}

/// Accuracy and average hinge loss of a frozen checkpoint over the given
/// triples; the margin comes from the checkpoint's config echo.
pub fn evaluate_split(
    checkpoint: &ModelCheckpoint,
    catalog: &Catalog,
    vocab: &Vocabulary,
    triples: &[TrainingTriple],
) -> Result<SplitMetrics> {
    if triples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    checkpoint.check_vocab(vocab)?;
    let config: TrainConfig = serde_json::from_value(checkpoint.train_config.clone())
        .map_err(|e| Error::InvalidConfig {
            msg: format!("checkpoint train_config echo: {e}"),
        })?;
    let scored = score_triples(&checkpoint.model, vocab, catalog, triples)?;
    Ok(SplitMetrics {
        accuracy: accuracy(&scored)?,
        average_loss: average_loss(&scored, config.margin as f64)?,
    })
}

/// One minibatch: forward every triple on a shared tape (each distinct user
/// and product embedded once), mean the hinge terms, run one backward pass,
/// and leave the gradients in the parameters. Returns the batch loss.
fn train_batch(
    model: &mut PairModel,
    vocab: &Vocabulary,
    catalog: &Catalog,
    batch: &[TrainingTriple],
    margin: f32,
) -> Result<f32> {
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let mut user_vars: HashMap<u64, Var> = HashMap::new();
    let mut product_vars: HashMap<u64, Var> = HashMap::new();
    let mut hinges = Vec::with_capacity(batch.len());
    for t in batch {
        let u = match user_vars.get(&t.user_id) {
            Some(&v) => v,
            None => {
                let profile = catalog.require_user(t.user_id)?;
                let v = forward_user(&model.config, &mut tape, &vars, profile, vocab)?;
                user_vars.insert(t.user_id, v);
                v
            }
        };
        let mut product_var = |tape: &mut Tape<f32>, id: u64| -> Result<Var> {
            if let Some(&v) = product_vars.get(&id) {
                return Ok(v);
            }
            let record = catalog.require_product(id)?;
            let v = forward_product(&model.config, tape, &vars, record, vocab)?;
            product_vars.insert(id, v);
            Ok(v)
        };
        let pos = product_var(&mut tape, t.positive_id)?;
        let neg = product_var(&mut tape, t.negative_id)?;
        let s_pos = tape.dot(u, pos)?;
        let s_neg = tape.dot(u, neg)?;
        hinges.push(tape.hinge_rank_loss(s_pos, s_neg, margin)?);
    }
    let loss = tape.mean_scalars(&hinges)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    let grads = tape.backward(loss)?;
    for (param, (_, var)) in model.params_mut().iter_mut().zip(vars.iter()) {
        param.zero_grad();
        if let Some(g) = grads.wrt(var) {
            param.grad.data_mut().copy_from_slice(g);
        }
    }
    Ok(loss_value)
}

/// Minibatch training over the triples. The 90/10 user-hash split holds out
/// validation users entirely; per-epoch metrics report mean training loss
/// and frozen-parameter validation accuracy/loss. The returned checkpoint
/// holds the parameters of the best validation epoch. Deterministic given
/// the config seed.
pub fn train(
    catalog: &Catalog,
    triples: &[TrainingTriple],
    vectors: &WordVectors,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if triples.is_empty() {
        return Err(Error::NoTriples);
    }
    let users = catalog.users();
    let d_demo = users.first().map(|u| u.demographics.len()).unwrap_or(0);
    if let Some(u) = users.iter().find(|u| u.demographics.len() != d_demo) {
        return Err(Error::shape(
            "train",
            format!("demographics [{d_demo}] for all users"),
            format!("[{}] for user {}", u.demographics.len(), u.user_id),
        ));
    }
    if config.modality.has_image() {
        let mut referenced: BTreeSet<u64> = triples.iter().map(|t| t.positive_id).collect();
        referenced.extend(triples.iter().map(|t| t.negative_id));
        let missing: Vec<u64> = referenced
            .iter()
            .copied()
            .filter(|&id| {
                catalog
                    .product(id)
                    .map(|p| p.image_features.is_none())
                    .unwrap_or(false)
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingImageFeatures { ids: missing });
        }
    }
    let d_img = catalog
        .products()
        .iter()
        .find_map(|p| p.image_features.as_ref().map(Vec::len))
        .unwrap_or(0);
    let tower_config = TowerConfig::new(config.modality, vectors, d_demo, d_img);
    let mut model = PairModel::new(tower_config, vectors, config.seed)?;
    let vocab = vectors.vocab();

    let train_set: Vec<TrainingTriple> = triples
        .iter()
        .filter(|t| !is_validation_user(t.user_id))
        .copied()
        .collect();
    let val_set: Vec<TrainingTriple> = triples
        .iter()
        .filter(|t| is_validation_user(t.user_id))
        .copied()
        .collect();
    if train_set.is_empty() {
        return Err(Error::NoTriples);
    }

    let mut optimizer = Optimizer::new(config.optimizer, model.params());
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut last_good: Vec<Parameter> = model.params().to_vec();
    let mut best: Option<(f64, usize, Vec<Parameter>)> = None;
    let mut diverged_at_epoch = None;

    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(config.seed, STREAM_SHUFFLE), epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainingTriple> = chunk.iter().map(|&i| train_set[i]).collect();
            let batch_loss = train_batch(&mut model, vocab, catalog, &batch, config.margin)?;
            if !batch_loss.is_finite() {
                diverged_at_epoch = Some(epoch);
                model.set_params(last_good);
                break 'epochs;
            }
            optimizer.step(model.params_mut(), config.learning_rate, config.weight_decay);
            loss_sum += batch_loss as f64 * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let (val_accuracy, val_loss) = if val_set.is_empty() {
            (None, None)
        } else {
            let scored = score_triples(&model, vocab, catalog, &val_set)?;
            (
                Some(accuracy(&scored)?),
                Some(average_loss(&scored, config.margin as f64)?),
            )
        };
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.params().to_vec()));
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy,
            val_loss,
        });
        last_good = model.params().to_vec();
    }

    // Hinge training on noisy labels overfits past its early peak; the kept
    // parameters are the validation-selected epoch, not the final one.
    let kept_epoch = best.as_ref().map(|&(_, epoch, _)| epoch);
    if let Some((_, _, params)) = best {
        model.set_params(params);
    }
    let checkpoint = ModelCheckpoint {
        model,
        vocab_fingerprint: vocab.fingerprint(),
        train_config: serde_json::to_value(config)?,
    };
    Ok(TrainOutput {
        checkpoint,
        metrics,
        diverged_at_epoch,
        kept_epoch,
    })
}

const SPLIT_SALT: u64 = 0x5eed_0001;
pub(crate) const STREAM_TRIPLES: u64 = 31;
pub(crate) const STREAM_SHUFFLE: u64 = 32;
