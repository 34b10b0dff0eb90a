//! Seeded synthetic card-not-present transaction generator.
//!
//! Legitimate traffic is a homogeneous Poisson process per card with
//! log-normal amounts around a per-card location parameter, merchants drawn
//! from per-card preferences, coordinates from the card's home city cluster,
//! and IPs from the card's usual networks. Fraud arrives as short bursts on a
//! compromised subset of cards: compressed in time, elevated amounts, biased
//! IP and geo choices, an elevated CVV mismatch rate, and most of the volume
//! funneled through a small pool of fence merchants. A final
//! thinning/boosting pass lands the overall fraud count on the configured
//! target rate, so the realized rate is stable across configurations.
//!
//! The same seed always yields a byte-identical dataset.

use rand::distributions::{Distribution, WeightedIndex};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, Poisson};

use crate::component_seed;
use crate::data::{
    Dataset, Transaction, CVV_MATCH, CVV_MISMATCH, CVV_MISSING, IP_NETWORKS, MERCHANT_CATEGORIES,
    MS_PER_DAY, MS_PER_HOUR, MS_PER_WEEK,
};
use crate::error::{Error, Result};

/// Generation horizon origin: 2025-01-06 00:00:00 UTC, a Monday.
pub const EPOCH_MS: i64 = 1_736_121_600_000;

/// City cluster centers legitimate coordinates are drawn around.
pub const CITY_CLUSTERS: [(f64, f64); 10] = [
    (40.71, -74.01),
    (34.05, -118.24),
    (41.88, -87.63),
    (51.51, -0.13),
    (48.86, 2.35),
    (40.42, -3.70),
    (52.52, 13.40),
    (35.68, 139.69),
    (-23.55, -46.63),
    (19.43, -99.13),
];

const GEO_JITTER_STD: f64 = 0.35;
const BURST_SPAN_MIN_MS: i64 = MS_PER_HOUR;
const BURST_SPAN_MAX_MS: i64 = 6 * MS_PER_HOUR;
const BURST_MARGIN_MS: i64 = MS_PER_DAY;
/// First IP network index reserved mostly for fraud traffic.
const RISKY_IP_START: u8 = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_cards: u32,
    pub n_merchants: u32,
    /// Horizon length in weeks; fractional values are allowed.
    pub weeks: f64,
    /// Mean legitimate transactions per card per week.
    pub legit_rate: f64,
    /// Fraction of cards that get a fraud burst.
    pub fraud_card_fraction: f64,
    /// Mean fraud events per compromised card before rate correction.
    pub fraud_burst_size: f64,
    /// Overall fraud rate the generator steers toward.
    pub target_fraud_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_cards: 5_000,
            n_merchants: 200,
            weeks: 20.0,
            legit_rate: 2.0,
            fraud_card_fraction: 0.06,
            fraud_burst_size: 8.0,
            target_fraud_rate: 0.012,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cards == 0 || self.n_merchants == 0 {
            return Err(Error::Config("n_cards and n_merchants must be at least 1".into()));
        }
        if !self.weeks.is_finite() || self.weeks <= 0.0 {
            return Err(Error::Config("weeks must be positive and finite".into()));
        }
        if !self.legit_rate.is_finite() || self.legit_rate <= 0.0 {
            return Err(Error::Config("legit_rate must be positive and finite".into()));
        }
        if !(0.0..=1.0).contains(&self.fraud_card_fraction) {
            return Err(Error::Config("fraud_card_fraction must lie in [0, 1]".into()));
        }
        if self.fraud_card_fraction > 0.0 && self.fraud_burst_size < 1.0 {
            return Err(Error::Config("fraud_burst_size must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.target_fraud_rate) {
            return Err(Error::Config("target_fraud_rate must lie in [0, 0.5)".into()));
        }
        let horizon_ms = (self.weeks * MS_PER_WEEK as f64) as i64;
        if self.fraud_card_fraction > 0.0
            && horizon_ms < 2 * BURST_MARGIN_MS + BURST_SPAN_MAX_MS
        {
            return Err(Error::Config(
                "horizon too short to place fraud bursts away from its edges".into(),
            ));
        }
        Ok(())
    }

    pub fn horizon_ms(&self) -> i64 {
        (self.weeks * MS_PER_WEEK as f64) as i64
    }
}

struct CardProfile {
    network: u8,
    home_cluster: usize,
    mu_amount: f64,
    sigma_amount: f64,
    cvv_mismatch_p: f64,
    cvv_missing_p: f64,
    preferred_merchants: Vec<u32>,
    home_ips: [u8; 2],
}

struct MerchantProfile {
    category: u8,
    fraud_prone: bool,
}

struct BurstWindow {
    card: u32,
    start: i64,
    span: i64,
    /// Fence merchant most of the burst funnels through, when one exists.
    fence: Option<u32>,
}

/// Generates a dataset. Same config (including seed) yields byte-identical
/// rows; event ids are assigned in final time order.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let horizon = config.horizon_ms();

    let mut rng_world = ChaCha8Rng::seed_from_u64(component_seed(config.seed, "synth.world"));
    let merchants = build_merchants(config, &mut rng_world);
    let popularity: Vec<f64> = {
        let dist = LogNormal::new(0.0, 1.2).unwrap();
        (0..config.n_merchants).map(|_| dist.sample(&mut rng_world)).collect()
    };
    let popularity_index = WeightedIndex::new(&popularity)
        .map_err(|e| Error::Config(format!("merchant popularity weights: {e}")))?;
    let cards = build_cards(config, &popularity_index, &mut rng_world);

    let mut rng_legit = ChaCha8Rng::seed_from_u64(component_seed(config.seed, "synth.legit"));
    let mut events = generate_legit(config, horizon, &cards, &merchants, &popularity_index, &mut rng_legit);
    let n_legit = events.len();

    let mut rng_fraud = ChaCha8Rng::seed_from_u64(component_seed(config.seed, "synth.fraud"));
    let n_compromised = (config.n_cards as f64 * config.fraud_card_fraction).round() as usize;
    if n_compromised > 0 {
        let target = config.target_fraud_rate;
        let wanted = (target / (1.0 - target) * n_legit as f64).round() as usize;
        let mut fraud = generate_fraud(
            config,
            horizon,
            n_compromised,
            &cards,
            &merchants,
            &popularity_index,
            wanted,
            &mut rng_fraud,
        );
        events.append(&mut fraud);
    }

    // Stable order: time, then generation sequence; ids then follow time order.
    let mut seq: Vec<(usize, Transaction)> = events.into_iter().enumerate().collect();
    seq.sort_by_key(|(i, tx)| (tx.timestamp, *i));
    let rows: Vec<Transaction> = seq
        .into_iter()
        .enumerate()
        .map(|(id, (_, mut tx))| {
            tx.event_id = id as u64;
            tx
        })
        .collect();
    Dataset::from_rows(rows)
}

fn build_merchants(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<MerchantProfile> {
    // Mild skew toward everyday categories; indices into MERCHANT_CATEGORIES.
    let weights = [14.0, 12.0, 9.0, 7.0, 8.0, 5.0, 9.0, 4.0, 6.0, 7.0, 6.0, 6.0];
    assert_eq!(weights.len(), MERCHANT_CATEGORIES.len());
    let cat_index = WeightedIndex::new(weights).unwrap();
    (0..config.n_merchants)
        .map(|_| {
            let category = cat_index.sample(rng) as u8;
            // Fraud concentrates where resale is easy.
            let prone_p = match MERCHANT_CATEGORIES[category as usize] {
                "digital_goods" | "gift_cards" => 0.55,
                "electronics" | "travel" => 0.12,
                _ => 0.02,
            };
            let fraud_prone = rng.gen_bool(prone_p);
            MerchantProfile { category, fraud_prone }
        })
        .collect()
}

fn build_cards(
    config: &GeneratorConfig,
    popularity: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<CardProfile> {
    let network_index = WeightedIndex::new([0.45, 0.35, 0.12, 0.08]).unwrap();
    let mu_dist = Normal::new(3.3, 0.5).unwrap();
    (0..config.n_cards)
        .map(|_| {
            let n_pref = rng.gen_range(3..=10usize).min(config.n_merchants as usize);
            let mut preferred: Vec<u32> = Vec::with_capacity(n_pref);
            for _ in 0..n_pref * 3 {
                if preferred.len() == n_pref {
                    break;
                }
                let m = popularity.sample(rng) as u32;
                if !preferred.contains(&m) {
                    preferred.push(m);
                }
            }
            if preferred.is_empty() {
                preferred.push(0);
            }
            CardProfile {
                network: network_index.sample(rng) as u8,
                home_cluster: rng.gen_range(0..CITY_CLUSTERS.len()),
                mu_amount: mu_dist.sample(rng),
                sigma_amount: rng.gen_range(0.6..1.0),
                cvv_mismatch_p: rng.gen_range(0.01..0.06),
                cvv_missing_p: rng.gen_range(0.02..0.05),
                preferred_merchants: preferred,
                home_ips: [rng.gen_range(0..RISKY_IP_START), rng.gen_range(0..RISKY_IP_START)],
            }
        })
        .collect()
}

fn sample_geo(cluster: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (lat, lon) = CITY_CLUSTERS[cluster];
    let jitter = Normal::new(0.0, GEO_JITTER_STD).unwrap();
    let la = (lat + jitter.sample(rng)).clamp(-90.0, 90.0);
    let lo = (lon + jitter.sample(rng)).clamp(-180.0, 180.0);
    (round6(la), round6(lo))
}

fn poisson_count(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Amounts are quantized to the CSV precision at creation so in-memory data
/// and persisted data are the same numbers.
fn sample_amount(mu: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let dist = LogNormal::new(mu, sigma).unwrap();
    round6(dist.sample(rng)).max(0.01)
}

fn generate_legit(
    config: &GeneratorConfig,
    horizon: i64,
    cards: &[CardProfile],
    merchants: &[MerchantProfile],
    popularity: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Transaction> {
    let mut events = Vec::new();
    for (card_id, card) in cards.iter().enumerate() {
        let n = poisson_count(config.legit_rate * config.weeks, rng);
        for _ in 0..n {
            let timestamp = EPOCH_MS + rng.gen_range(0..horizon.max(1));
            let merchant_id = if rng.gen_bool(0.8) {
                card.preferred_merchants[rng.gen_range(0..card.preferred_merchants.len())]
            } else {
                popularity.sample(rng) as u32
            };
            let ip_network = {
                let r: f64 = rng.gen();
                if r < 0.85 {
                    card.home_ips[0]
                } else if r < 0.95 {
                    card.home_ips[1]
                } else {
                    rng.gen_range(0..RISKY_IP_START)
                }
            };
            let cvv_match = {
                let r: f64 = rng.gen();
                if r < card.cvv_mismatch_p {
                    CVV_MISMATCH
                } else if r < card.cvv_mismatch_p + card.cvv_missing_p {
                    CVV_MISSING
                } else {
                    CVV_MATCH
                }
            };
            let (latitude, longitude) = sample_geo(card.home_cluster, rng);
            events.push(Transaction {
                event_id: 0,
                timestamp,
                amount: sample_amount(card.mu_amount, card.sigma_amount, rng),
                card_id: card_id as u32,
                card_network: card.network,
                cvv_match,
                merchant_id,
                merchant_category: merchants[merchant_id as usize].category,
                latitude,
                longitude,
                ip_network,
                label: 0,
            });
        }
    }
    events
}

#[allow(clippy::too_many_arguments)]
fn generate_fraud(
    config: &GeneratorConfig,
    horizon: i64,
    n_compromised: usize,
    cards: &[CardProfile],
    merchants: &[MerchantProfile],
    popularity: &WeightedIndex<f64>,
    wanted: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Transaction> {
    let fraud_prone: Vec<u32> = merchants
        .iter()
        .enumerate()
        .filter(|(_, m)| m.fraud_prone)
        .map(|(i, _)| i as u32)
        .collect();

    // Stolen goods move through a handful of fence merchants, so most of the
    // fraud volume funnels into a small pool and their traffic profiles spike.
    let fences: Vec<u32> = {
        let mut pool = fraud_prone.clone();
        pool.shuffle(rng);
        let keep = (config.n_merchants as usize / 50).clamp(2, 8).min(pool.len());
        pool.truncate(keep);
        pool
    };

    let mut card_ids: Vec<u32> = (0..config.n_cards).collect();
    card_ids.shuffle(rng);
    card_ids.truncate(n_compromised);

    let place_limit = horizon - 2 * BURST_MARGIN_MS - BURST_SPAN_MAX_MS;
    let mut windows = Vec::with_capacity(card_ids.len());
    let mut events = Vec::new();
    for &card_id in &card_ids {
        let start = EPOCH_MS + BURST_MARGIN_MS + rng.gen_range(0..=place_limit.max(0));
        let span = rng.gen_range(BURST_SPAN_MIN_MS..=BURST_SPAN_MAX_MS);
        let fence = if fences.is_empty() {
            None
        } else {
            Some(fences[rng.gen_range(0..fences.len())])
        };
        let window = BurstWindow { card: card_id, start, span, fence };
        let n = 1 + poisson_count((config.fraud_burst_size - 1.0).max(0.0), rng);
        for _ in 0..n {
            events.push(fraud_event(&window, cards, merchants, popularity, &fraud_prone, rng));
        }
        windows.push(window);
    }

    // Deterministic correction toward the target count.
    if events.len() > wanted {
        events.shuffle(rng);
        events.truncate(wanted);
    } else {
        while events.len() < wanted {
            let w = &windows[rng.gen_range(0..windows.len())];
            events.push(fraud_event(w, cards, merchants, popularity, &fraud_prone, rng));
        }
    }
    events
}

fn fraud_event(
    window: &BurstWindow,
    cards: &[CardProfile],
    merchants: &[MerchantProfile],
    popularity: &WeightedIndex<f64>,
    fraud_prone: &[u32],
    rng: &mut ChaCha8Rng,
) -> Transaction {
    let card = &cards[window.card as usize];
    let timestamp = window.start + rng.gen_range(0..=window.span);
    let merchant_id = match window.fence {
        Some(fence) if rng.gen_bool(0.75) => fence,
        _ if !fraud_prone.is_empty() && rng.gen_bool(0.5) => {
            fraud_prone[rng.gen_range(0..fraud_prone.len())]
        }
        _ => popularity.sample(rng) as u32,
    };
    // Coordinates come from somewhere that is not the cardholder's home.
    let cluster = {
        let c = rng.gen_range(0..CITY_CLUSTERS.len() - 1);
        if c >= card.home_cluster {
            c + 1
        } else {
            c
        }
    };
    let (latitude, longitude) = sample_geo(cluster, rng);
    let ip_network = if rng.gen_bool(0.7) {
        rng.gen_range(RISKY_IP_START..IP_NETWORKS.len() as u8)
    } else {
        rng.gen_range(0..IP_NETWORKS.len() as u8)
    };
    let cvv_match = {
        let r: f64 = rng.gen();
        if r < 0.55 {
            CVV_MISMATCH
        } else if r < 0.65 {
            CVV_MISSING
        } else {
            CVV_MATCH
        }
    };
    Transaction {
        event_id: 0,
        timestamp,
        amount: sample_amount(card.mu_amount + 3f64.ln(), card.sigma_amount * 0.8, rng),
        card_id: window.card,
        card_network: card.network,
        cvv_match,
        merchant_id,
        merchant_category: merchants[merchant_id as usize].category,
        latitude,
        longitude,
        ip_network,
        label: 1,
    }
}
