//! The attacker's action space and its cost norm.
//!
//! An attack perturbs up to five slots of one transaction: IP network,
//! coordinates, timestamp, amount, and the card itself (reset to a fresh card
//! or switch to a different observed card's attribute bundle). Each perturbed
//! slot contributes a cost; flat for categorical-style changes, logarithmic in
//! magnitude for amount scaling and time shifts. The attack norm is the sum
//! over perturbed slots and spans [0, 100] with every component at its
//! maximum: 3 + 4 + 18 + 26 + 49.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Transaction, FRESH_CARD_ID, MS_PER_WEEK};
use crate::error::{Error, Result};
use crate::features::geo_cell;

pub const AMOUNT_SCALE_MIN: f64 = 0.02;
pub const AMOUNT_SCALE_MAX: f64 = 5.0;
pub const TIME_SHIFT_MAX_MS: i64 = MS_PER_WEEK;
pub const TIME_SHIFT_MIN_ABS_MS: i64 = 60_000;

pub const GEO_SAMPLE_JITTER_STD: f64 = 0.3;

/// Per-slot perturbation costs. The logarithmic slots store their maximum
/// cost, reached at the edge of the admissible range.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub network: f64,
    pub geo: f64,
    pub temporal_max: f64,
    pub amount_max: f64,
    pub card_reset: f64,
    pub card_switch: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            network: 3.0,
            geo: 4.0,
            temporal_max: 18.0,
            amount_max: 26.0,
            card_reset: 33.0,
            card_switch: 49.0,
        }
    }
}

impl CostModel {
    /// Cost of scaling the amount by `scale`, log in the scale factor and
    /// normalized so both range edges cost `amount_max`. Scaling up is dearer
    /// per unit of log-magnitude because the admissible up-range is shorter.
    pub fn amount_cost(&self, scale: f64) -> Result<f64> {
        if !(AMOUNT_SCALE_MIN..=AMOUNT_SCALE_MAX).contains(&scale) {
            return Err(Error::Domain(format!(
                "amount scale {scale} outside [{AMOUNT_SCALE_MIN}, {AMOUNT_SCALE_MAX}]"
            )));
        }
        if scale > 1.0 {
            Ok(self.amount_max / AMOUNT_SCALE_MAX.ln() * scale.ln())
        } else {
            Ok(self.amount_max / AMOUNT_SCALE_MIN.recip().ln() * scale.recip().ln())
        }
    }

    /// Cost of shifting the timestamp by `delta_ms`, log in the shift size
    /// and normalized so a one-week shift costs `temporal_max`.
    pub fn temporal_cost(&self, delta_ms: i64) -> Result<f64> {
        let mag = delta_ms.unsigned_abs();
        if mag > TIME_SHIFT_MAX_MS as u64 {
            return Err(Error::Domain(format!(
                "time shift {delta_ms} ms exceeds one week"
            )));
        }
        let scale = self.temporal_max / ((TIME_SHIFT_MAX_MS + 1) as f64).ln();
        Ok(scale * ((mag + 1) as f64).ln())
    }

    /// Sum of the perturbed slots' costs.
    pub fn attack_norm(&self, attack: &AttackVector) -> Result<f64> {
        let mut norm = 0.0;
        if attack.network_change.is_some() {
            norm += self.network;
        }
        if attack.geo_change.is_some() {
            norm += self.geo;
        }
        if let Some(delta) = attack.time_shift_ms {
            if delta == 0 {
                return Err(Error::Domain("time shift of 0 must be an absent slot".into()));
            }
            norm += self.temporal_cost(delta)?;
        }
        if let Some(scale) = attack.amount_scale {
            if scale == 1.0 {
                return Err(Error::Domain("amount scale of 1 must be an absent slot".into()));
            }
            norm += self.amount_cost(scale)?;
        }
        match attack.card_action {
            CardAction::None => {}
            CardAction::Reset => norm += self.card_reset,
            CardAction::Switch(_) => norm += self.card_switch,
        }
        Ok(norm)
    }

    /// Norm of an attack perturbing every slot at maximal cost.
    pub fn max_norm(&self) -> f64 {
        self.network + self.geo + self.temporal_max + self.amount_max + self.card_switch
    }
}

/// Card attributes carried over by a card switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CardBundle {
    pub card_network: u8,
    pub cvv_match: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CardAction {
    #[default]
    None,
    /// New card, same attributes: profile history restarts.
    Reset,
    /// New card with another observed card's attribute bundle.
    Switch(CardBundle),
}

/// One candidate perturbation of one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttackVector {
    pub network_change: Option<u8>,
    pub geo_change: Option<(f64, f64)>,
    /// Nonzero when present.
    pub time_shift_ms: Option<i64>,
    /// In [0.02, 5] and not 1 when present.
    pub amount_scale: Option<f64>,
    pub card_action: CardAction,
}

impl AttackVector {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.network_change.is_none()
            && self.geo_change.is_none()
            && self.time_shift_ms.is_none()
            && self.amount_scale.is_none()
            && self.card_action == CardAction::None
    }

    pub fn slot_count(&self) -> usize {
        usize::from(self.network_change.is_some())
            + usize::from(self.geo_change.is_some())
            + usize::from(self.time_shift_ms.is_some())
            + usize::from(self.amount_scale.is_some())
            + usize::from(self.card_action != CardAction::None)
    }

    /// The perturbed raw transaction. Label and event id stay; a card action
    /// moves the row onto a fresh card id with no history.
    pub fn apply(&self, tx: &Transaction) -> Transaction {
        let mut out = tx.clone();
        if let Some(ip) = self.network_change {
            out.ip_network = ip;
        }
        if let Some((lat, lon)) = self.geo_change {
            out.latitude = lat;
            out.longitude = lon;
        }
        if let Some(delta) = self.time_shift_ms {
            out.timestamp += delta;
        }
        if let Some(scale) = self.amount_scale {
            out.amount = tx.amount * scale;
        }
        match self.card_action {
            CardAction::None => {}
            CardAction::Reset => out.card_id = FRESH_CARD_ID,
            CardAction::Switch(bundle) => {
                out.card_id = FRESH_CARD_ID;
                out.card_network = bundle.card_network;
                out.cvv_match = bundle.cvv_match;
            }
        }
        out
    }
}

/// Attack slots an attacker can perturb. `Card` covers reset and switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Network,
    Geo,
    Temporal,
    Amount,
    Card,
}

impl Slot {
    pub const ALL: [Slot; 5] = [Slot::Network, Slot::Geo, Slot::Temporal, Slot::Amount, Slot::Card];
}

/// A sampled value for one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotValue {
    Network(u8),
    Geo(f64, f64),
    TimeShift(i64),
    AmountScale(f64),
    Card(CardAction),
}

impl SlotValue {
    pub fn write_into(&self, attack: &mut AttackVector) {
        match *self {
            SlotValue::Network(ip) => attack.network_change = Some(ip),
            SlotValue::Geo(lat, lon) => attack.geo_change = Some((lat, lon)),
            SlotValue::TimeShift(d) => attack.time_shift_ms = Some(d),
            SlotValue::AmountScale(s) => attack.amount_scale = Some(s),
            SlotValue::Card(action) => attack.card_action = action,
        }
    }
}

/// Observed-data statistics the sampler draws plausible values from. Built on
/// the training split so attack search never peeks at later data.
#[derive(Debug, Clone)]
pub struct DatasetStats {
    /// IP network codes observed at least once, ascending.
    pub ip_vocab: Vec<u8>,
    /// One bundle per observed card: its network and most common CVV outcome.
    pub card_bundles: Vec<CardBundle>,
    /// Centers of geo cells holding a meaningful share of traffic.
    pub geo_clusters: Vec<(f64, f64)>,
}

impl DatasetStats {
    pub fn from_rows(rows: &[Transaction]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot build attack stats from zero rows".into()));
        }
        let mut ip_seen = [false; 256];
        for tx in rows {
            ip_seen[tx.ip_network as usize] = true;
        }
        let ip_vocab: Vec<u8> =
            (0..=255u8).filter(|&c| ip_seen[c as usize]).collect();

        // (network, cvv counts) per card, then dominant cvv per card.
        let mut per_card: std::collections::BTreeMap<u32, (u8, [u32; 3])> =
            std::collections::BTreeMap::new();
        for tx in rows {
            let entry = per_card.entry(tx.card_id).or_insert((tx.card_network, [0; 3]));
            entry.1[tx.cvv_match as usize] += 1;
        }
        let card_bundles: Vec<CardBundle> = per_card
            .values()
            .map(|(network, cvv_counts)| {
                let cvv = (0..3).max_by_key(|&i| cvv_counts[i]).unwrap() as u8;
                CardBundle { card_network: *network, cvv_match: cvv }
            })
            .collect();

        // Dense cells: at least 0.5% of rows and at least 5 events.
        let mut cells: std::collections::BTreeMap<i64, (f64, f64, u32)> =
            std::collections::BTreeMap::new();
        for tx in rows {
            let cell = geo_cell(tx.latitude, tx.longitude) as i64;
            let e = cells.entry(cell).or_insert((0.0, 0.0, 0));
            e.0 += tx.latitude;
            e.1 += tx.longitude;
            e.2 += 1;
        }
        let min_count = ((rows.len() as f64 * 0.005) as u32).max(5);
        let geo_clusters: Vec<(f64, f64)> = cells
            .values()
            .filter(|(_, _, n)| *n >= min_count)
            .map(|(lat_sum, lon_sum, n)| (lat_sum / *n as f64, lon_sum / *n as f64))
            .collect();

        Ok(DatasetStats { ip_vocab, card_bundles, geo_clusters })
    }

    pub fn from_dataset(ds: &Dataset, range: std::ops::Range<usize>) -> Result<Self> {
        Self::from_rows(&ds.rows()[range])
    }
}

/// Draws a random admissible value for one slot of one transaction.
pub fn sample_slot(
    slot: Slot,
    tx: &Transaction,
    stats: &DatasetStats,
    rng: &mut ChaCha8Rng,
) -> Result<SlotValue> {
    match slot {
        Slot::Network => {
            let candidates: Vec<u8> = stats
                .ip_vocab
                .iter()
                .copied()
                .filter(|&ip| ip != tx.ip_network)
                .collect();
            if candidates.is_empty() {
                return Err(Error::Domain(
                    "ip vocabulary has a single value; nothing to change to".into(),
                ));
            }
            Ok(SlotValue::Network(candidates[rng.gen_range(0..candidates.len())]))
        }
        Slot::Geo => {
            if stats.geo_clusters.is_empty() {
                return Err(Error::Domain("no dense geo clusters in the data".into()));
            }
            let (lat, lon) = stats.geo_clusters[rng.gen_range(0..stats.geo_clusters.len())];
            let jitter = Normal::new(0.0, GEO_SAMPLE_JITTER_STD).unwrap();
            Ok(SlotValue::Geo(
                (lat + jitter.sample(rng)).clamp(-90.0, 90.0),
                (lon + jitter.sample(rng)).clamp(-180.0, 180.0),
            ))
        }
        Slot::Temporal => {
            let sign = if rng.gen_bool(0.5) { 1 } else { -1 };
            let lo = (TIME_SHIFT_MIN_ABS_MS as f64).ln();
            let hi = (TIME_SHIFT_MAX_MS as f64).ln();
            let mag = rng.gen_range(lo..hi).exp() as i64;
            Ok(SlotValue::TimeShift(sign * mag.clamp(TIME_SHIFT_MIN_ABS_MS, TIME_SHIFT_MAX_MS)))
        }
        Slot::Amount => {
            let lo = AMOUNT_SCALE_MIN.ln();
            let hi = AMOUNT_SCALE_MAX.ln();
            loop {
                let s = rng.gen_range(lo..hi).exp();
                if s != 1.0 {
                    return Ok(SlotValue::AmountScale(s));
                }
            }
        }
        Slot::Card => {
            if rng.gen_bool(0.5) {
                Ok(SlotValue::Card(CardAction::Reset))
            } else {
                if stats.card_bundles.is_empty() {
                    return Err(Error::Domain("no observed card bundles".into()));
                }
                let b = stats.card_bundles[rng.gen_range(0..stats.card_bundles.len())];
                Ok(SlotValue::Card(CardAction::Switch(b)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn tx() -> Transaction {
        Transaction {
            event_id: 0,
            timestamp: 1_000_000,
            amount: 100.0,
            card_id: 3,
            card_network: 1,
            cvv_match: 0,
            merchant_id: 5,
            merchant_category: 6,
            latitude: 40.0,
            longitude: -3.0,
            ip_network: 2,
            label: 1,
        }
    }

    #[test]
    fn amount_cost_reference_points() {
        let costs = CostModel::default();
        assert_abs_diff_eq!(costs.amount_cost(1.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(costs.amount_cost(5.0).unwrap(), 26.0, epsilon = 1e-9);
        assert_abs_diff_eq!(costs.amount_cost(0.02).unwrap(), 26.0, epsilon = 1e-9);
        let doubling = costs.amount_cost(2.0).unwrap();
        assert_abs_diff_eq!(doubling, 26.0 * 2f64.ln() / 5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(doubling, 11.20, epsilon = 0.005);
        // Halving is cheaper than doubling: the down-range is longer.
        assert!(costs.amount_cost(0.5).unwrap() < doubling);
    }

    #[test]
    fn amount_cost_domain() {
        let costs = CostModel::default();
        assert!(costs.amount_cost(0.01).is_err());
        assert!(costs.amount_cost(5.1).is_err());
        assert!(costs.amount_cost(f64::NAN).is_err());
    }

    #[test]
    fn temporal_cost_reference_points() {
        let costs = CostModel::default();
        assert_abs_diff_eq!(costs.temporal_cost(0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(costs.temporal_cost(TIME_SHIFT_MAX_MS).unwrap(), 18.0, epsilon = 1e-9);
        assert_abs_diff_eq!(
            costs.temporal_cost(-TIME_SHIFT_MAX_MS).unwrap(),
            18.0,
            epsilon = 1e-9
        );
        let hour = costs.temporal_cost(3_600_000).unwrap();
        assert_abs_diff_eq!(hour, 13.44, epsilon = 0.005);
        assert!(costs.temporal_cost(TIME_SHIFT_MAX_MS + 1).is_err());
    }

    #[test]
    fn norm_adds_present_components() {
        let costs = CostModel::default();
        assert_eq!(costs.attack_norm(&AttackVector::empty()).unwrap(), 0.0);
        let a = AttackVector {
            network_change: Some(7),
            geo_change: Some((10.0, 20.0)),
            ..AttackVector::empty()
        };
        assert_abs_diff_eq!(costs.attack_norm(&a).unwrap(), 7.0, epsilon = 1e-12);
        let all_max = AttackVector {
            network_change: Some(7),
            geo_change: Some((10.0, 20.0)),
            time_shift_ms: Some(TIME_SHIFT_MAX_MS),
            amount_scale: Some(5.0),
            card_action: CardAction::Switch(CardBundle { card_network: 0, cvv_match: 0 }),
        };
        assert_abs_diff_eq!(costs.attack_norm(&all_max).unwrap(), 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(costs.max_norm(), 100.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_slot_values_are_rejected() {
        let costs = CostModel::default();
        let zero_shift = AttackVector { time_shift_ms: Some(0), ..AttackVector::empty() };
        assert!(costs.attack_norm(&zero_shift).is_err());
        let unit_scale = AttackVector { amount_scale: Some(1.0), ..AttackVector::empty() };
        assert!(costs.attack_norm(&unit_scale).is_err());
    }

    #[test]
    fn apply_card_reset_moves_to_fresh_card() {
        let a = AttackVector { card_action: CardAction::Reset, ..AttackVector::empty() };
        let out = a.apply(&tx());
        assert_eq!(out.card_id, FRESH_CARD_ID);
        assert_eq!(out.card_network, tx().card_network);
        let b = AttackVector {
            card_action: CardAction::Switch(CardBundle { card_network: 3, cvv_match: 2 }),
            ..AttackVector::empty()
        };
        let out = b.apply(&tx());
        assert_eq!(out.card_id, FRESH_CARD_ID);
        assert_eq!(out.card_network, 3);
        assert_eq!(out.cvv_match, 2);
    }

    fn stats() -> DatasetStats {
        DatasetStats {
            ip_vocab: vec![0, 1, 2, 3, 4],
            card_bundles: vec![
                CardBundle { card_network: 0, cvv_match: 0 },
                CardBundle { card_network: 2, cvv_match: 1 },
            ],
            geo_clusters: vec![(40.7, -74.0), (51.5, -0.1)],
        }
    }

    #[test]
    fn network_sampling_excludes_current_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            match sample_slot(Slot::Network, &tx(), &stats(), &mut rng).unwrap() {
                SlotValue::Network(ip) => assert_ne!(ip, tx().ip_network),
                other => panic!("unexpected {other:?}"),
            }
        }
        let single = DatasetStats { ip_vocab: vec![2], ..stats() };
        assert!(sample_slot(Slot::Network, &tx(), &single, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_slot(Slot::Amount, &tx(), &stats(), &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn time_shift_signs_and_magnitudes_are_log_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 10_000;
        let mut positives = 0usize;
        let mut logs: Vec<f64> = Vec::with_capacity(n);
        for _ in 0..n {
            match sample_slot(Slot::Temporal, &tx(), &stats(), &mut rng).unwrap() {
                SlotValue::TimeShift(d) => {
                    assert!(d != 0);
                    assert!(d.unsigned_abs() >= TIME_SHIFT_MIN_ABS_MS as u64);
                    assert!(d.unsigned_abs() <= TIME_SHIFT_MAX_MS as u64);
                    if d > 0 {
                        positives += 1;
                    }
                    logs.push((d.unsigned_abs() as f64).ln());
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        let ratio = positives as f64 / n as f64;
        assert!((0.47..=0.53).contains(&ratio), "sign ratio {ratio}");

        // KS distance between the scaled log-magnitudes and uniform [0, 1].
        let lo = (TIME_SHIFT_MIN_ABS_MS as f64).ln();
        let hi = (TIME_SHIFT_MAX_MS as f64).ln();
        let mut unit: Vec<f64> = logs.iter().map(|l| (l - lo) / (hi - lo)).collect();
        unit.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = unit
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let hi_side = ((i + 1) as f64 / n as f64 - u).abs();
                let lo_side = (u - i as f64 / n as f64).abs();
                hi_side.max(lo_side)
            })
            .fold(0.0f64, f64::max);
        assert!(ks < 0.02, "KS distance {ks}");
    }

    #[test]
    fn amount_scale_samples_stay_in_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2_000 {
            match sample_slot(Slot::Amount, &tx(), &stats(), &mut rng).unwrap() {
                SlotValue::AmountScale(s) => {
                    assert!((AMOUNT_SCALE_MIN..=AMOUNT_SCALE_MAX).contains(&s));
                    assert!(s != 1.0);
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn norm_is_bounded_and_grows_per_slot(
            use_network in proptest::bool::ANY,
            use_geo in proptest::bool::ANY,
            shift in proptest::option::of(1i64..=TIME_SHIFT_MAX_MS),
            scale in proptest::option::of(0.02f64..=5.0),
            card in 0u8..3,
        ) {
            let costs = CostModel::default();
            let attack = AttackVector {
                network_change: use_network.then_some(1),
                geo_change: use_geo.then_some((12.0, 34.0)),
                time_shift_ms: shift,
                amount_scale: scale.filter(|s| *s != 1.0),
                card_action: match card {
                    0 => CardAction::None,
                    1 => CardAction::Reset,
                    _ => CardAction::Switch(CardBundle { card_network: 0, cvv_match: 0 }),
                },
            };
            let norm = costs.attack_norm(&attack).unwrap();
            proptest::prop_assert!(norm >= 0.0);
            proptest::prop_assert!(norm <= costs.max_norm() + 1e-9);

            // Dropping any present slot lowers the norm except a zero-cost one.
            if attack.network_change.is_some() {
                let without = AttackVector { network_change: None, ..attack };
                proptest::prop_assert!(costs.attack_norm(&without).unwrap() < norm);
            }
            if let Some(s) = attack.amount_scale {
                let without = AttackVector { amount_scale: None, ..attack };
                let dropped = costs.attack_norm(&without).unwrap();
                if s != 1.0 {
                    proptest::prop_assert!(dropped <= norm);
                    proptest::prop_assert!(norm - dropped >= 0.0);
                }
            }
            if attack.card_action != CardAction::None {
                let without = AttackVector { card_action: CardAction::None, ..attack };
                proptest::prop_assert!(costs.attack_norm(&without).unwrap() < norm);
            }
        }
    }

    #[test]
    fn stats_from_rows_collects_vocab_and_bundles() {
        let mut rows = Vec::new();
        for i in 0..40u32 {
            let mut t = tx();
            t.event_id = i as u64;
            t.card_id = i % 4;
            t.ip_network = (i % 3) as u8;
            t.card_network = (i % 4 % 4) as u8;
            rows.push(t);
        }
        let stats = DatasetStats::from_rows(&rows).unwrap();
        assert_eq!(stats.ip_vocab, vec![0, 1, 2]);
        assert_eq!(stats.card_bundles.len(), 4);
        assert!(!stats.geo_clusters.is_empty());
        assert!(DatasetStats::from_rows(&[]).is_err());
    }
}
