//! Black-box attack search against a scoring model.
//!
//! The attacker sees raw model scores but nothing of the model's insides, and
//! pays for every perturbation under a shared cost budget. Three families are
//! provided:
//!
//! * random search draws independent candidate attacks, one Bernoulli trial
//!   per slot, and keeps the lowest-scoring feasible candidate;
//! * stochastic coordinate descent sweeps slots in random order, exploring a
//!   value grid per slot and accepting either the lowest score (greedy) or
//!   the best score-drop per unit of cost (cost-efficient);
//! * greedy search scans every slot's full grid each iteration and commits
//!   the single best move.
//!
//! An attack counts as a success when it flips the model's decision at the
//! operating threshold: the clean row alarmed, the perturbed row does not.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attack::{
    AttackVector, CardAction, CostModel, DatasetStats, Slot, SlotValue, sample_slot,
    AMOUNT_SCALE_MAX, AMOUNT_SCALE_MIN, GEO_SAMPLE_JITTER_STD, TIME_SHIFT_MAX_MS,
    TIME_SHIFT_MIN_ABS_MS,
};
use crate::component_seed;
use crate::data::Transaction;
use crate::error::{Error, Result};
use crate::metrics::Scorer;
use crate::par;
use crate::propagate::AttackPropagator;

/// Slack when pre-filtering grid values against the remaining budget. Final
/// feasibility is always re-checked on the exact attack norm.
const BUDGET_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStrategy {
    Random,
    ScdGreedy,
    ScdCostEfficient,
    Greedy,
}

impl SearchStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SearchStrategy::Random => "random",
            SearchStrategy::ScdGreedy => "scd-greedy",
            SearchStrategy::ScdCostEfficient => "scd-cost-efficient",
            SearchStrategy::Greedy => "greedy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "random" => Ok(SearchStrategy::Random),
            "scd-greedy" => Ok(SearchStrategy::ScdGreedy),
            "scd-cost-efficient" => Ok(SearchStrategy::ScdCostEfficient),
            "greedy" => Ok(SearchStrategy::Greedy),
            other => Err(Error::Config(format!("unknown search strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub strategy: SearchStrategy,
    pub norm_cap: f64,
    /// Maximum model score evaluations per victim, the clean score included.
    pub budget: u32,
    pub random_iters: u32,
    pub bernoulli_p: f64,
    pub grid_points: usize,
    pub seed: u64,
    /// Offer the time-shift slot to the attacker.
    pub temporal: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            strategy: SearchStrategy::Random,
            norm_cap: 100.0,
            budget: 2000,
            random_iters: 500,
            bernoulli_p: 0.2,
            grid_points: 16,
            seed: 0,
            temporal: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.norm_cap) {
            return Err(Error::Config(format!(
                "norm_cap must lie in [0, 100], got {}",
                self.norm_cap
            )));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.random_iters == 0 {
            return Err(Error::Config("random_iters must be at least 1".into()));
        }
        if !(self.bernoulli_p > 0.0 && self.bernoulli_p <= 1.0) {
            return Err(Error::Config(format!(
                "bernoulli_p must lie in (0, 1], got {}",
                self.bernoulli_p
            )));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("grid_points must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub event_id: u64,
    pub attack: AttackVector,
    pub clean_score: f64,
    pub score: f64,
    pub norm: f64,
    pub success: bool,
    pub evals: u32,
    pub iterations: u32,
    pub truncated: bool,
}

pub fn success_rate(results: &[AttackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Metric("success rate of an empty result set".into()));
    }
    let hits = results.iter().filter(|r| r.success).count();
    Ok(hits as f64 / results.len() as f64)
}

/// One search problem: a scorer under attack, a propagator to realize
/// candidate rows, and the cost model the attacker pays under.
pub struct Searcher<'a> {
    scorer: &'a dyn Scorer,
    propagator: &'a AttackPropagator<'a>,
    stats: &'a DatasetStats,
    costs: CostModel,
    /// Alarm threshold; scores at or above it are flagged.
    threshold: f64,
    config: SearchConfig,
    slots: Vec<Slot>,
}

struct Incumbent {
    attack: AttackVector,
    score: f64,
    norm: f64,
}

impl<'a> Searcher<'a> {
    pub fn new(
        scorer: &'a dyn Scorer,
        propagator: &'a AttackPropagator<'a>,
        stats: &'a DatasetStats,
        costs: CostModel,
        threshold: f64,
        config: SearchConfig,
    ) -> Result<Self> {
        config.validate()?;
        let slots = Slot::ALL
            .iter()
            .copied()
            .filter(|s| config.temporal || *s != Slot::Temporal)
            .collect();
        Ok(Searcher { scorer, propagator, stats, costs, threshold, config, slots })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn attack_rows(&self, indices: &[usize]) -> Result<Vec<AttackResult>> {
        par::map_slice(indices, |&i| self.attack_row(i)).into_iter().collect()
    }

    pub fn attack_row(&self, row_index: usize) -> Result<AttackResult> {
        let rows = self.propagator.dataset().rows();
        let victim = rows
            .get(row_index)
            .ok_or_else(|| Error::Data(format!("row index {row_index} out of range")))?
            .clone();
        let mut rng = ChaCha8Rng::seed_from_u64(component_seed(
            self.config.seed,
            &format!("search.victim.{}", victim.event_id),
        ));
        match self.config.strategy {
            SearchStrategy::Random => self.random_search(row_index, &victim, &mut rng),
            SearchStrategy::ScdGreedy => self.scd_search(row_index, &victim, &mut rng, false),
            SearchStrategy::ScdCostEfficient => self.scd_search(row_index, &victim, &mut rng, true),
            SearchStrategy::Greedy => self.greedy_search(row_index, &victim, &mut rng),
        }
    }

    fn evaluate(&self, row_index: usize, attack: &AttackVector) -> Result<f64> {
        let row = self.propagator.apply(row_index, attack)?;
        Ok(self.scorer.score_enriched(&row))
    }

    /// Exact norm if the attack fits the cap, `None` otherwise.
    fn feasible_norm(&self, attack: &AttackVector) -> Option<f64> {
        match self.costs.attack_norm(attack) {
            Ok(n) if n <= self.config.norm_cap => Some(n),
            _ => None,
        }
    }

    fn finish(
        &self,
        victim_id: u64,
        clean_score: f64,
        inc: Incumbent,
        evals: u32,
        iterations: u32,
        truncated: bool,
    ) -> AttackResult {
        let success = clean_score >= self.threshold && inc.score < self.threshold;
        AttackResult {
            event_id: victim_id,
            attack: inc.attack,
            clean_score,
            score: inc.score,
            norm: inc.norm,
            success,
            evals,
            iterations,
            truncated,
        }
    }

    fn random_search(
        &self,
        row_index: usize,
        victim: &Transaction,
        rng: &mut ChaCha8Rng,
    ) -> Result<AttackResult> {
        let clean_score = self.evaluate(row_index, &AttackVector::empty())?;
        let mut evals: u32 = 1;
        let mut inc =
            Incumbent { attack: AttackVector::empty(), score: clean_score, norm: 0.0 };
        let mut truncated = false;
        let mut iterations = 0;
        for _ in 0..self.config.random_iters {
            if evals >= self.config.budget {
                truncated = true;
                break;
            }
            iterations += 1;
            let Some((cand, norm)) = self.random_candidate(victim, rng) else {
                continue;
            };
            if cand.is_empty() {
                continue;
            }
            let score = self.evaluate(row_index, &cand)?;
            evals += 1;
            if score < inc.score {
                inc = Incumbent { attack: cand, score, norm };
            }
        }
        Ok(self.finish(victim.event_id, clean_score, inc, evals, iterations, truncated))
    }

    /// One Bernoulli trial per slot, resampled a few times when the draw
    /// busts the cap, dropped afterwards.
    fn random_candidate(
        &self,
        victim: &Transaction,
        rng: &mut ChaCha8Rng,
    ) -> Option<(AttackVector, f64)> {
        for _ in 0..10 {
            let mut cand = AttackVector::empty();
            for &slot in &self.slots {
                if rng.gen_bool(self.config.bernoulli_p) {
                    if let Ok(v) = sample_slot(slot, victim, self.stats, rng) {
                        v.write_into(&mut cand);
                    }
                }
            }
            if let Some(norm) = self.feasible_norm(&cand) {
                return Some((cand, norm));
            }
        }
        None
    }

    fn scd_search(
        &self,
        row_index: usize,
        victim: &Transaction,
        rng: &mut ChaCha8Rng,
        cost_efficient: bool,
    ) -> Result<AttackResult> {
        let clean_score = self.evaluate(row_index, &AttackVector::empty())?;
        let mut evals: u32 = 1;
        let mut inc =
            Incumbent { attack: AttackVector::empty(), score: clean_score, norm: 0.0 };
        let mut sweeps = 0;
        let mut truncated = false;
        'outer: loop {
            sweeps += 1;
            let mut order = self.slots.clone();
            order.shuffle(rng);
            let mut improved = false;
            for slot in order {
                let base = without_slot(&inc.attack, slot);
                let base_norm = self.costs.attack_norm(&base)?;
                let remaining = self.config.norm_cap - base_norm;
                let grid = self.grid(slot, victim, remaining, rng);
                let mut choice: Option<Incumbent> = None;
                for value in grid {
                    if evals >= self.config.budget {
                        truncated = true;
                        break 'outer;
                    }
                    let mut cand = base.clone();
                    value.write_into(&mut cand);
                    let Some(norm) = self.feasible_norm(&cand) else { continue };
                    let score = self.evaluate(row_index, &cand)?;
                    evals += 1;
                    if score >= inc.score {
                        continue;
                    }
                    let accept = match &choice {
                        None => true,
                        Some(best) => {
                            if cost_efficient {
                                ratio_beats(&inc, score, norm, best)
                            } else {
                                score < best.score
                            }
                        }
                    };
                    if accept {
                        choice = Some(Incumbent { attack: cand, score, norm });
                    }
                }
                if let Some(best) = choice {
                    inc = best;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        Ok(self.finish(victim.event_id, clean_score, inc, evals, sweeps, truncated))
    }

    fn greedy_search(
        &self,
        row_index: usize,
        victim: &Transaction,
        rng: &mut ChaCha8Rng,
    ) -> Result<AttackResult> {
        let clean_score = self.evaluate(row_index, &AttackVector::empty())?;
        let mut evals: u32 = 1;
        let mut inc =
            Incumbent { attack: AttackVector::empty(), score: clean_score, norm: 0.0 };
        let mut iterations = 0;
        let mut truncated = false;
        'outer: loop {
            iterations += 1;
            let mut best: Option<Incumbent> = None;
            for &slot in &self.slots {
                let base = without_slot(&inc.attack, slot);
                let base_norm = self.costs.attack_norm(&base)?;
                let remaining = self.config.norm_cap - base_norm;
                for value in self.grid(slot, victim, remaining, rng) {
                    if evals >= self.config.budget {
                        truncated = true;
                        break 'outer;
                    }
                    let mut cand = base.clone();
                    value.write_into(&mut cand);
                    let Some(norm) = self.feasible_norm(&cand) else { continue };
                    let score = self.evaluate(row_index, &cand)?;
                    evals += 1;
                    let floor = best.as_ref().map_or(inc.score, |b| b.score);
                    if score < floor {
                        best = Some(Incumbent { attack: cand, score, norm });
                    }
                }
            }
            match best {
                Some(b) => inc = b,
                None => break,
            }
        }
        Ok(self.finish(victim.event_id, clean_score, inc, evals, iterations, truncated))
    }

    /// Candidate values for one slot, pre-filtered so the marginal cost fits
    /// the remaining budget.
    fn grid(
        &self,
        slot: Slot,
        victim: &Transaction,
        remaining: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<SlotValue> {
        let mut out = Vec::new();
        match slot {
            Slot::Network => {
                if self.costs.network <= remaining + BUDGET_EPS {
                    for &v in &self.stats.ip_vocab {
                        if v != victim.ip_network {
                            out.push(SlotValue::Network(v));
                        }
                    }
                }
            }
            Slot::Geo => {
                if self.costs.geo <= remaining + BUDGET_EPS {
                    let jitter = Normal::new(0.0, GEO_SAMPLE_JITTER_STD).unwrap();
                    for &(lat, lon) in &self.stats.geo_clusters {
                        let la = (lat + jitter.sample(rng)).clamp(-90.0, 90.0);
                        let lo = (lon + jitter.sample(rng)).clamp(-180.0, 180.0);
                        out.push(SlotValue::Geo(la, lo));
                    }
                }
            }
            Slot::Temporal => {
                let per_sign = (self.config.grid_points / 2).max(1);
                for m in log_spaced(TIME_SHIFT_MIN_ABS_MS as f64, TIME_SHIFT_MAX_MS as f64, per_sign)
                {
                    let mag = (m.round() as i64).clamp(TIME_SHIFT_MIN_ABS_MS, TIME_SHIFT_MAX_MS);
                    for shift in [mag, -mag] {
                        if let Ok(cost) = self.costs.temporal_cost(shift) {
                            if cost <= remaining + BUDGET_EPS {
                                out.push(SlotValue::TimeShift(shift));
                            }
                        }
                    }
                }
            }
            Slot::Amount => {
                for s in log_spaced(AMOUNT_SCALE_MIN, AMOUNT_SCALE_MAX, self.config.grid_points) {
                    let s = s.clamp(AMOUNT_SCALE_MIN, AMOUNT_SCALE_MAX);
                    if (s - 1.0).abs() <= 1e-12 {
                        continue;
                    }
                    if let Ok(cost) = self.costs.amount_cost(s) {
                        if cost <= remaining + BUDGET_EPS {
                            out.push(SlotValue::AmountScale(s));
                        }
                    }
                }
            }
            Slot::Card => {
                if self.costs.card_reset <= remaining + BUDGET_EPS {
                    out.push(SlotValue::Card(CardAction::Reset));
                }
                if self.costs.card_switch <= remaining + BUDGET_EPS
                    && !self.stats.card_bundles.is_empty()
                {
                    let k = SWITCH_GRID_BUNDLES.min(self.stats.card_bundles.len());
                    for idx in rand::seq::index::sample(rng, self.stats.card_bundles.len(), k) {
                        out.push(SlotValue::Card(CardAction::Switch(self.stats.card_bundles[idx])));
                    }
                }
            }
        }
        out
    }
}

/// Replacement cards sampled per card-slot exploration.
const SWITCH_GRID_BUNDLES: usize = 8;

/// Cost-efficient acceptance: does (score, norm) beat the held candidate on
/// score drop per unit of extra cost? Moves that add no cost rank above all
/// costed ones and compete among themselves on raw score drop.
fn ratio_beats(inc: &Incumbent, score: f64, norm: f64, best: &Incumbent) -> bool {
    let key = |s: f64, n: f64| -> (bool, f64) {
        let drop = inc.score - s;
        let dn = n - inc.norm;
        if dn <= BUDGET_EPS {
            (true, drop)
        } else {
            (false, drop / dn)
        }
    };
    let (cand_free, cand_val) = key(score, norm);
    let (best_free, best_val) = key(best.score, best.norm);
    match (cand_free, best_free) {
        (true, false) => true,
        (false, true) => false,
        _ => cand_val > best_val,
    }
}

fn without_slot(attack: &AttackVector, slot: Slot) -> AttackVector {
    let mut out = attack.clone();
    match slot {
        Slot::Network => out.network_change = None,
        Slot::Geo => out.geo_change = None,
        Slot::Temporal => out.time_shift_ms = None,
        Slot::Amount => out.amount_scale = None,
        Slot::Card => out.card_action = CardAction::None,
    }
    out
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, EntityIndex};
    use crate::features::{compute_features, EnrichedDataset, EnrichedRow, FeaturePlan};
    use crate::propagate::Estimators;
    use approx::assert_abs_diff_eq;

    fn tx(id: u64, amount: f64, ip: u8) -> Transaction {
        Transaction {
            event_id: id,
            timestamp: id as i64 * 600_000,
            amount,
            card_id: id as u32,
            card_network: (id % 4) as u8,
            cvv_match: 0,
            merchant_id: 9,
            merchant_category: 3,
            latitude: (-60.0 + 11.0 * id as f64).clamp(-88.0, 88.0),
            longitude: (-150.0 + 23.0 * id as f64).rem_euclid(360.0) - 180.0,
            ip_network: ip,
            label: 1,
        }
    }

    struct Fixture {
        ds: Dataset,
        enriched: EnrichedDataset,
        index: EntityIndex,
        est: Estimators,
        stats: DatasetStats,
    }

    fn fixture(ips: &[u8], victim_amount: f64) -> Fixture {
        let n = 12;
        let rows: Vec<Transaction> = (0..n)
            .map(|i| {
                let amount = if i == n - 1 { victim_amount } else { 40.0 + i as f64 };
                tx(i as u64, amount, ips[i % ips.len()])
            })
            .collect();
        let plan = FeaturePlan::parse("profile card_count_1h count card 1h\n").unwrap();
        let ds = Dataset::from_rows(rows).unwrap();
        let enriched = compute_features(&ds, &plan).unwrap();
        let index = EntityIndex::build(&ds);
        let est = Estimators::all_exact(&plan);
        let stats = DatasetStats::from_rows(ds.rows()).unwrap();
        Fixture { ds, enriched, index, est, stats }
    }

    fn victim_index(f: &Fixture) -> usize {
        f.ds.rows().len() - 1
    }

    fn propagator(f: &Fixture) -> AttackPropagator<'_> {
        AttackPropagator::new(&f.ds, &f.enriched, &f.index, &f.est).unwrap()
    }

    struct AmountScorer;
    impl Scorer for AmountScorer {
        fn score_enriched(&self, row: &EnrichedRow) -> f64 {
            row.base.amount / 1000.0
        }
    }

    struct ConstScorer(f64);
    impl Scorer for ConstScorer {
        fn score_enriched(&self, _row: &EnrichedRow) -> f64 {
            self.0
        }
    }

    struct PiecewiseAmount;
    impl Scorer for PiecewiseAmount {
        fn score_enriched(&self, row: &EnrichedRow) -> f64 {
            if row.base.amount < 3.0 {
                0.30
            } else if row.base.amount < 60.0 {
                0.35
            } else {
                0.90
            }
        }
    }

    struct AdditiveStub;
    impl Scorer for AdditiveStub {
        fn score_enriched(&self, row: &EnrichedRow) -> f64 {
            let net = match row.base.ip_network {
                3 => 0.2,
                2 => 0.1,
                _ => 0.0,
            };
            let amt = if row.base.amount < 3.0 {
                0.2
            } else if row.base.amount < 60.0 {
                0.1
            } else {
                0.0
            };
            0.8 - net - amt
        }
    }

    fn amount_only_config(strategy: SearchStrategy) -> SearchConfig {
        SearchConfig {
            strategy,
            norm_cap: 30.0,
            budget: 200,
            temporal: false,
            seed: 11,
            ..SearchConfig::default()
        }
    }

    fn grid_scale(i: usize) -> f64 {
        let a = AMOUNT_SCALE_MIN.ln();
        let b = AMOUNT_SCALE_MAX.ln();
        (a + (b - a) * i as f64 / 15.0).exp()
    }

    #[test]
    fn cap_zero_leaves_the_row_alone() {
        let f = fixture(&[2, 3, 1], 500.0);
        let scorer = AmountScorer;
        let config = SearchConfig {
            norm_cap: 0.0,
            budget: 50,
            seed: 3,
            ..SearchConfig::default()
        };
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.2, config).unwrap();
        let r = s.attack_row(victim_index(&f)).unwrap();
        assert!(r.attack.is_empty());
        assert_abs_diff_eq!(r.score, 0.5);
        assert_abs_diff_eq!(r.norm, 0.0);
        assert_eq!(r.evals, 1);
        assert!(!r.success);
        assert!(!r.truncated);
    }

    #[test]
    fn random_search_scales_a_monotone_amount_down() {
        let f = fixture(&[2, 3, 1], 500.0);
        let scorer = AmountScorer;
        let config = SearchConfig { norm_cap: 30.0, seed: 5, ..SearchConfig::default() };
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.2, config).unwrap();
        let r = s.attack_row(victim_index(&f)).unwrap();
        let scale = r.attack.amount_scale.expect("amount slot should be attacked");
        assert!(scale < 1.0, "scale {scale}");
        assert!(r.score < r.clean_score);
        assert!(r.success);
        assert!(r.norm <= 30.0);
        assert!(r.evals <= s.config().budget);

        let again = s.attack_row(victim_index(&f)).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn constant_score_converges_in_one_sweep() {
        let f = fixture(&[2, 3, 1], 500.0);
        let scorer = ConstScorer(0.5);
        let config = SearchConfig {
            strategy: SearchStrategy::ScdGreedy,
            norm_cap: 82.0,
            budget: 500,
            seed: 7,
            ..SearchConfig::default()
        };
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.4, config).unwrap();
        let r = s.attack_row(victim_index(&f)).unwrap();
        assert!(r.attack.is_empty());
        assert_eq!(r.iterations, 1);
        assert!(!r.success);
        assert!(!r.truncated);
    }

    #[test]
    fn scd_picks_the_grid_minimum_within_budget() {
        let f = fixture(&[4], 500.0);
        let scorer = AmountScorer;
        let config = amount_only_config(SearchStrategy::ScdGreedy);
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.2, config).unwrap();
        let r = s.attack_row(victim_index(&f)).unwrap();
        assert_abs_diff_eq!(r.attack.amount_scale.unwrap(), 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(r.norm, 26.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.score, 0.01, epsilon = 1e-12);
        assert_eq!(r.iterations, 2);
        // One clean score plus a full amount grid per sweep.
        assert_eq!(r.evals, 1 + 32);
        assert!(r.success);
    }

    #[test]
    fn cost_efficient_trades_score_drop_against_cost() {
        let f = fixture(&[4], 100.0);
        let scorer = PiecewiseAmount;
        let config = amount_only_config(SearchStrategy::ScdCostEfficient);
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.32, config).unwrap();
        let ce = s.attack_row(victim_index(&f)).unwrap();
        // Sweep one takes the cheap 0.35 band, sweep two upgrades to the
        // cheaper of the two 0.30 scales.
        assert_abs_diff_eq!(ce.attack.amount_scale.unwrap(), grid_scale(1), epsilon = 1e-12);
        assert_abs_diff_eq!(ce.score, 0.30);
        assert_eq!(ce.iterations, 3);
        assert_eq!(ce.evals, 1 + 48);
        assert!(ce.success);

        let config = amount_only_config(SearchStrategy::ScdGreedy);
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.32, config).unwrap();
        let greedy = s.attack_row(victim_index(&f)).unwrap();
        assert_abs_diff_eq!(greedy.attack.amount_scale.unwrap(), 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(greedy.score, 0.30);
        // Same final score, but the cost-efficient attack spends less.
        assert!(ce.norm < greedy.norm - 1.0);
    }

    #[test]
    fn greedy_search_matches_scd_on_an_additive_stub() {
        let f = fixture(&[2, 3, 1], 100.0);
        let scorer = AdditiveStub;
        let config = SearchConfig {
            strategy: SearchStrategy::Greedy,
            norm_cap: 30.0,
            budget: 200,
            temporal: false,
            seed: 13,
            ..SearchConfig::default()
        };
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.5, config).unwrap();
        let greedy = s.attack_row(victim_index(&f)).unwrap();
        assert_eq!(greedy.attack.network_change, Some(3));
        assert_abs_diff_eq!(greedy.attack.amount_scale.unwrap(), 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(greedy.score, 0.4);
        assert_abs_diff_eq!(greedy.norm, 29.0, epsilon = 1e-9);
        // Two commits plus the no-improvement iteration, each scanning the
        // two network values and the sixteen amount scales.
        assert_eq!(greedy.iterations, 3);
        assert_eq!(greedy.evals, 1 + 3 * 18);
        assert!(greedy.success);

        let config = SearchConfig {
            strategy: SearchStrategy::ScdGreedy,
            norm_cap: 30.0,
            budget: 200,
            temporal: false,
            seed: 13,
            ..SearchConfig::default()
        };
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.5, config).unwrap();
        let scd = s.attack_row(victim_index(&f)).unwrap();
        assert_eq!(scd.attack, greedy.attack);
        assert_eq!(scd.iterations, 2);
        assert_eq!(scd.evals, 1 + 2 * 18);
    }

    #[test]
    fn budget_exhaustion_returns_the_incumbent_flagged() {
        let f = fixture(&[4], 100.0);
        let scorer = PiecewiseAmount;
        let config = SearchConfig { budget: 5, ..amount_only_config(SearchStrategy::ScdGreedy) };
        let prop = propagator(&f);
        let s =
            Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.32, config).unwrap();
        let r = s.attack_row(victim_index(&f)).unwrap();
        assert!(r.truncated);
        assert_eq!(r.evals, 5);
        assert!(r.attack.is_empty());
        assert_abs_diff_eq!(r.score, 0.90);
    }

    #[test]
    fn results_respect_cap_and_budget_across_caps() {
        let f = fixture(&[2, 3, 1], 240.0);
        let scorer = AdditiveStub;
        for cap in [0.0, 7.0, 30.0, 49.0, 65.0, 82.0] {
            let config = SearchConfig {
                norm_cap: cap,
                budget: 400,
                random_iters: 120,
                seed: 17,
                ..SearchConfig::default()
            };
            let prop = propagator(&f);
            let s = Searcher::new(&scorer, &prop, &f.stats, CostModel::default(), 0.45, config)
                .unwrap();
            for r in s.attack_rows(&[2, 7, victim_index(&f)]).unwrap() {
                assert!(r.norm <= cap, "norm {} over cap {cap}", r.norm);
                assert!(r.evals <= 400);
                let recomputed = if r.attack.is_empty() {
                    0.0
                } else {
                    CostModel::default().attack_norm(&r.attack).unwrap()
                };
                assert_abs_diff_eq!(recomputed, r.norm, epsilon = 1e-12);
                if r.success {
                    assert!(r.clean_score >= 0.45 && r.score < 0.45);
                }
            }
        }
    }

    #[test]
    fn success_rate_counts_flips() {
        let base = AttackResult {
            event_id: 0,
            attack: AttackVector::empty(),
            clean_score: 0.9,
            score: 0.1,
            norm: 0.0,
            success: false,
            evals: 1,
            iterations: 1,
            truncated: false,
        };
        let mut results = vec![base.clone(); 20];
        for r in results.iter_mut().take(5) {
            r.success = true;
        }
        assert_abs_diff_eq!(success_rate(&results).unwrap(), 0.25);
        for r in results.iter_mut() {
            r.success = true;
        }
        assert_abs_diff_eq!(success_rate(&results).unwrap(), 1.0);
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = SearchConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SearchConfig { norm_cap: -1.0, ..ok.clone() }.validate().is_err());
        assert!(SearchConfig { norm_cap: 101.0, ..ok.clone() }.validate().is_err());
        assert!(SearchConfig { budget: 0, ..ok.clone() }.validate().is_err());
        assert!(SearchConfig { bernoulli_p: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SearchConfig { grid_points: 1, ..ok }.validate().is_err());
        assert!(SearchStrategy::parse("scd-greedy").is_ok());
        assert!(SearchStrategy::parse("anneal").is_err());
    }
}
