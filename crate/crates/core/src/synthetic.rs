//! Seeded synthetic marketplace with planted topic structure.
//!
//! Every user and product carries a latent topic. Title words come from the
//! product's topic slice diluted with background filler, descriptions are
//! pure boilerplate, user keywords bleed across topics, image features come
//! from topic-dependent Gaussians, and message probability depends on topic
//! match (p_hi vs p_lo). Geography is a handful of city-like centers with
//! Gaussian spread. All randomness flows from one seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{EventKind, EventRecord, GeoPoint, ProductRecord, UserProfile};
use crate::error::{Error, Result};
use crate::word2vec::mix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_products: usize,
    pub n_topics: usize,
    pub vocab_size: usize,
    /// Probability that a title token is drawn from the product's own topic
    /// slice rather than the shared background slice. Descriptions are
    /// always background boilerplate. 0 = text carries no topic information.
    pub text_signal: f64,
    /// Scale of the topic prototype inside image features:
    /// features = image_signal * prototype + unit Gaussian noise.
    pub image_signal: f64,
    /// Probability that a user keyword is drawn from the user's own topic
    /// slice; the rest come from a uniformly random topic (interest bleed).
    pub keyword_signal: f64,
    /// Message probability when user and product topics match.
    pub p_hi: f64,
    /// Message probability on topic mismatch.
    pub p_lo: f64,
    /// Gaussian spread (km) of users/products around their geo center.
    pub geo_spread_km: f64,
    pub d_img: usize,
    pub d_demo: usize,
    pub n_centers: usize,
    /// User search radius written into every profile.
    pub radius_km: f64,
    pub impressions_per_user: usize,
    /// Impressions are sampled from the most recent `impression_window`
    /// eligible products at event time, mirroring the recency-M prefetch.
    pub impression_window: usize,
    /// Length of the simulated activity window in days.
    pub event_days: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 42,
            n_users: 2000,
            n_products: 10000,
            n_topics: 10,
            vocab_size: 600,
            text_signal: 0.8,
            image_signal: 0.8,
            keyword_signal: 0.9,
            p_hi: 0.3,
            p_lo: 0.01,
            geo_spread_km: 20.0,
            d_img: 64,
            d_demo: 8,
            n_centers: 5,
            radius_km: 80.0,
            impressions_per_user: 30,
            impression_window: 500,
            event_days: 30.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig { msg: msg.to_string() });
        if !(0.0..=1.0).contains(&self.p_lo) || !(0.0..=1.0).contains(&self.p_hi) || self.p_lo > self.p_hi {
            return bad("require 0 <= p_lo <= p_hi <= 1");
        }
        if !(0.0..=1.0).contains(&self.text_signal) {
            return bad("text_signal must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.keyword_signal) {
            return bad("keyword_signal must be in [0, 1]");
        }
        if self.image_signal < 0.0 {
            return bad("image_signal must be >= 0");
        }
        if self.n_topics == 0 || self.n_centers == 0 {
            return bad("n_topics and n_centers must be >= 1");
        }
        if self.vocab_size < self.n_topics * 4 {
            return bad("vocab_size must be at least 4 tokens per topic");
        }
        if self.radius_km <= 0.0 || self.geo_spread_km < 0.0 || self.event_days <= 0.0 {
            return bad("radius_km and event_days must be positive");
        }
        if self.impression_window == 0 {
            return bad("impression_window must be >= 1");
        }
        Ok(())
    }
}

/// Epoch base for generated timestamps: 2024-01-01T00:00:00Z.
const T0: i64 = 1_704_067_200;
const KM_PER_DEG_LAT: f64 = 111.32;
/// Demographics = 0.3 * topic prototype + 0.7 * uniform noise: weakly
/// informative, never sufficient alone.
const DEMO_MIX: f32 = 0.3;

struct Topics {
    /// vocab token strings; first 60% sliced per topic, rest background.
    words: Vec<String>,
    topic_slices: Vec<(usize, usize)>,
    background: (usize, usize),
    image_proto: Vec<Vec<f32>>,
    demo_proto: Vec<Vec<f32>>,
}

fn build_topics(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Topics {
    let words: Vec<String> = (0..cfg.vocab_size).map(|i| format!("w{i:04}")).collect();
    let topical = (cfg.vocab_size * 6 / 10).max(cfg.n_topics);
    let per_topic = topical / cfg.n_topics;
    let topic_slices: Vec<(usize, usize)> = (0..cfg.n_topics)
        .map(|t| (t * per_topic, (t + 1) * per_topic))
        .collect();
    let background = (cfg.n_topics * per_topic, cfg.vocab_size);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let image_proto = (0..cfg.n_topics)
        .map(|_| (0..cfg.d_img).map(|_| normal.sample(rng) as f32).collect())
        .collect();
    let demo_proto = (0..cfg.n_topics)
        .map(|_| (0..cfg.d_demo).map(|_| rng.random::<f32>()).collect())
        .collect();
    Topics { words, topic_slices, background, image_proto, demo_proto }
}

/// Keyword with cross-topic interest bleed: own slice w.p. p_own, else the
/// slice of a uniformly random topic. Bleed is structured noise; unlike
/// background filler it pulls the profile toward a concrete wrong topic,
/// and with only a handful of keywords per user it does not average out.
fn pick_keyword<'a>(
    topics: &'a Topics,
    topic: usize,
    p_own: f64,
    n_topics: usize,
    rng: &mut ChaCha8Rng,
) -> &'a str {
    let t = if rng.random::<f64>() < p_own {
        topic
    } else {
        rng.random_range(0..n_topics)
    };
    let (lo, hi) = topics.topic_slices[t];
    &topics.words[rng.random_range(lo..hi)]
}

/// Title word: own topic slice w.p. p_topical, else background filler.
fn pick_title_word<'a>(
    topics: &'a Topics,
    topic: usize,
    p_topical: f64,
    rng: &mut ChaCha8Rng,
) -> &'a str {
    if rng.random::<f64>() < p_topical {
        let (lo, hi) = topics.topic_slices[topic];
        &topics.words[rng.random_range(lo..hi)]
    } else {
        pick_background_word(topics, rng)
    }
}

fn pick_background_word<'a>(topics: &'a Topics, rng: &mut ChaCha8Rng) -> &'a str {
    let (lo, hi) = topics.background;
    &topics.words[rng.random_range(lo..hi)]
}

/// City-like centers, pairwise at least 600 km apart so radius + spread
/// never bridges two centers.
fn place_centers(n: usize, rng: &mut ChaCha8Rng) -> Vec<GeoPoint> {
    let mut centers: Vec<GeoPoint> = Vec::with_capacity(n);
    while centers.len() < n {
        let cand = GeoPoint {
            lat: rng.random_range(-55.0..65.0),
            lon: rng.random_range(-170.0..170.0),
        };
        let ok = centers.iter().all(|c| {
            crate::catalog::haversine_km(*c, cand).expect("in-bounds centers") >= 600.0
        });
        if ok {
            centers.push(cand);
        }
    }
    centers
}

fn jitter(center: GeoPoint, spread_km: f64, rng: &mut ChaCha8Rng) -> GeoPoint {
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let dlat = normal.sample(rng) * spread_km / KM_PER_DEG_LAT;
    let coslat = center.lat.to_radians().cos().max(0.2);
    let dlon = normal.sample(rng) * spread_km / (KM_PER_DEG_LAT * coslat);
    GeoPoint {
        lat: (center.lat + dlat).clamp(-89.9, 89.9),
        lon: (center.lon + dlon).clamp(-179.9, 179.9),
    }
}

pub struct SyntheticData {
    pub users: Vec<UserProfile>,
    pub products: Vec<ProductRecord>,
    pub events: Vec<EventRecord>,
    /// Latent user topics by user index; test-only introspection.
    pub user_topics: Vec<usize>,
    pub product_topics: Vec<usize>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let span = (cfg.event_days * 86400.0) as i64;

    let mut topic_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_TOPICS));
    let topics = build_topics(cfg, &mut topic_rng);
    let centers = place_centers(cfg.n_centers, &mut topic_rng);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");

    let mut user_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_USERS));
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut user_topics = Vec::with_capacity(cfg.n_users);
    for i in 0..cfg.n_users {
        let topic = user_rng.random_range(0..cfg.n_topics);
        let center = centers[user_rng.random_range(0..cfg.n_centers)];
        let n_kw = user_rng.random_range(2..=4);
        let keywords = (0..n_kw)
            .map(|_| {
                pick_keyword(&topics, topic, cfg.keyword_signal, cfg.n_topics, &mut user_rng)
                    .to_string()
            })
            .collect();
        let demographics = (0..cfg.d_demo)
            .map(|j| {
                let noise: f32 = user_rng.random();
                (DEMO_MIX * topics.demo_proto[topic][j] + (1.0 - DEMO_MIX) * noise).clamp(0.0, 1.0)
            })
            .collect();
        users.push(UserProfile {
            user_id: (i + 1) as u64,
            keywords,
            demographics,
            location: jitter(center, cfg.geo_spread_km, &mut user_rng),
            radius_km: cfg.radius_km,
        });
        user_topics.push(topic);
    }

    let mut product_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_PRODUCTS));
    let mut products = Vec::with_capacity(cfg.n_products);
    let mut product_topics = Vec::with_capacity(cfg.n_products);
    for i in 0..cfg.n_products {
        let topic = product_rng.random_range(0..cfg.n_topics);
        let center = centers[product_rng.random_range(0..cfg.n_centers)];
        let n_title = product_rng.random_range(3..=5);
        let n_desc = product_rng.random_range(6..=10);
        let title = (0..n_title)
            .map(|_| pick_title_word(&topics, topic, cfg.text_signal, &mut product_rng))
            .collect::<Vec<_>>()
            .join(" ");
        // Descriptions are condition/shipping boilerplate: background words
        // only. Topic information in text lives in the title.
        let description = (0..n_desc)
            .map(|_| pick_background_word(&topics, &mut product_rng))
            .collect::<Vec<_>>()
            .join(" ");
        let image_features = (0..cfg.d_img)
            .map(|j| {
                cfg.image_signal as f32 * topics.image_proto[topic][j]
                    + normal.sample(&mut product_rng) as f32
            })
            .collect();
        products.push(ProductRecord {
            product_id: (i + 1) as u64,
            title,
            description,
            image_features: Some(image_features),
            location: jitter(center, cfg.geo_spread_km, &mut product_rng),
            created_at: T0 + product_rng.random_range(0..span),
        });
        product_topics.push(topic);
    }

    let mut event_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_EVENTS));
    let mut events = Vec::new();
    for (ui, user) in users.iter().enumerate() {
        // Geo-eligible products for this user, ascending by creation time
        // (ties by id), so a binary search gives "created before ts".
        let mut eligible: Vec<(i64, usize)> = products
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                crate::catalog::haversine_km(user.location, p.location).expect("generated in-bounds")
                    <= user.radius_km
            })
            .map(|(pi, p)| (p.created_at, pi))
            .collect();
        eligible.sort_unstable();
        for _ in 0..cfg.impressions_per_user {
            let ts = T0 + event_rng.random_range(span / 5..span);
            let cut = eligible.partition_point(|&(c, _)| c < ts);
            if cut == 0 {
                continue;
            }
            let window_lo = cut.saturating_sub(cfg.impression_window);
            let pick = event_rng.random_range(window_lo..cut);
            let pi = eligible[pick].1;
            events.push(EventRecord {
                kind: EventKind::Impression,
                user_id: user.user_id,
                product_id: products[pi].product_id,
                timestamp: ts,
            });
            let p_msg = if user_topics[ui] == product_topics[pi] {
                cfg.p_hi
            } else {
                cfg.p_lo
            };
            if event_rng.random::<f64>() < p_msg {
                events.push(EventRecord {
                    kind: EventKind::Message,
                    user_id: user.user_id,
                    product_id: products[pi].product_id,
                    timestamp: ts + 30,
                });
            }
        }
    }
    events.sort_by_key(|e| {
        (
            e.timestamp,
            e.user_id,
            e.product_id,
            matches!(e.kind, EventKind::Message) as u8,
        )
    });

    Ok(SyntheticData {
        users,
        products,
        events,
        user_topics,
        product_topics,
    })
}

pub(crate) const STREAM_TOPICS: u64 = 11;
pub(crate) const STREAM_USERS: u64 = 12;
pub(crate) const STREAM_PRODUCTS: u64 = 13;
pub(crate) const STREAM_EVENTS: u64 = 14;
