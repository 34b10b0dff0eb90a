//! The adversarial training loop.
//!
//! Each round samples a fresh slice of training positives, attacks them and
//! every validation positive against the current model, swaps the victims'
//! enriched rows for their best attacks, and warm-starts more boosting rounds
//! on the poisoned copies. The updated model is then judged against freshly
//! generated validation attacks, and the loop stops once that adversarial
//! pAUC stalls. Attacked rows keep their positive labels throughout: the
//! point is teaching the model that a disguised fraud is still a fraud.

use std::fmt::Write as _;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{CostModel, DatasetStats};
use crate::component_seed;
use crate::data::{Dataset, EntityIndex};
use crate::error::{Error, Result};
use crate::features::{EnrichedDataset, EnrichedRow};
use crate::gbdt::GbdtModel;
use crate::metrics::{evaluate, threshold_at_fpr, EvalReport, Scorer};
use crate::par;
use crate::propagate::{AttackPropagator, Estimators};
use crate::search::{AttackResult, SearchConfig, Searcher};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Attack after every fixed number of boosting rounds.
    Periodic(usize),
    /// Boost with early stopping until validation pAUC converges, then attack.
    OnConvergence,
}

/// What the scheduler says to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateDecision {
    pub attack_now: bool,
    pub keep_boosting: bool,
}

/// Boosting progress since the last attack round.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScheduleState {
    pub rounds_since_attack: usize,
    pub non_improving_rounds: usize,
    pub patience: usize,
}

pub fn schedule_gate(state: &ScheduleState, schedule: Schedule) -> GateDecision {
    let attack_now = match schedule {
        Schedule::Periodic(k) => state.rounds_since_attack >= k,
        Schedule::OnConvergence => state.non_improving_rounds >= state.patience,
    };
    GateDecision { attack_now, keep_boosting: !attack_now }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvTrainConfig {
    /// Fraction of training positives attacked each round.
    pub adversarial_fraction: f64,
    pub schedule: Schedule,
    pub search: SearchConfig,
    pub max_adv_rounds: usize,
    pub stop_epsilon: f64,
    pub stop_patience: usize,
    /// Boosting budget per round when the schedule is on-convergence.
    pub boost_rounds: usize,
    /// Append attacked training rows instead of replacing the originals.
    pub augment: bool,
    pub pauc_alpha: f64,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig {
            adversarial_fraction: 0.05,
            schedule: Schedule::OnConvergence,
            search: SearchConfig::default(),
            max_adv_rounds: 25,
            stop_epsilon: 0.002,
            stop_patience: 3,
            boost_rounds: 50,
            augment: false,
            pauc_alpha: 0.01,
            seed: 0,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adversarial_fraction > 0.0 && self.adversarial_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "adversarial_fraction must lie in (0, 1], got {}",
                self.adversarial_fraction
            )));
        }
        if self.max_adv_rounds == 0 {
            return Err(Error::Config("max_adv_rounds must be at least 1".into()));
        }
        if self.stop_patience == 0 {
            return Err(Error::Config("stop_patience must be at least 1".into()));
        }
        if self.boost_rounds == 0 {
            return Err(Error::Config("boost_rounds must be at least 1".into()));
        }
        if let Schedule::Periodic(0) = self.schedule {
            return Err(Error::Config("periodic schedule needs at least 1 round".into()));
        }
        if !(self.pauc_alpha > 0.0 && self.pauc_alpha <= 1.0) {
            return Err(Error::Config("pauc_alpha must lie in (0, 1]".into()));
        }
        self.search.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvRoundRecord {
    pub round: usize,
    pub clean_pauc: f64,
    pub adversarial_pauc: f64,
    pub success_rate: f64,
    pub n_attacked: usize,
    pub trees_added: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdvTrainTrace {
    pub rounds: Vec<AdvRoundRecord>,
}

impl AdvTrainTrace {
    /// Round index holding the best adversarial pAUC.
    pub fn best_round(&self) -> Option<usize> {
        self.rounds
            .iter()
            .max_by(|a, b| a.adversarial_pauc.total_cmp(&b.adversarial_pauc))
            .map(|r| r.round)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("round,clean_pauc,adversarial_pauc,success_rate,n_attacked,trees_added\n");
        for r in &self.rounds {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{}",
                r.round, r.clean_pauc, r.adversarial_pauc, r.success_rate, r.n_attacked,
                r.trees_added
            )
            .unwrap();
        }
        out
    }
}

/// Everything the loop reads but never writes.
pub struct AdvTrainInputs<'a> {
    pub ds: &'a Dataset,
    pub enriched: &'a EnrichedDataset,
    pub index: &'a EntityIndex,
    pub estimators: &'a Estimators,
    pub stats: &'a DatasetStats,
    pub costs: CostModel,
    pub train: Range<usize>,
    pub val: Range<usize>,
}

pub fn adversarial_train(
    baseline: &GbdtModel,
    inputs: &AdvTrainInputs<'_>,
    config: &AdvTrainConfig,
) -> Result<(GbdtModel, AdvTrainTrace)> {
    config.validate()?;
    let enriched = &inputs.enriched.rows;
    if inputs.train.end > enriched.len() || inputs.val.end > enriched.len() {
        return Err(Error::Data("split ranges exceed the dataset".into()));
    }
    let train_pos: Vec<usize> =
        inputs.train.clone().filter(|&i| enriched[i].base.label == 1).collect();
    let val_pos: Vec<usize> = inputs.val.clone().filter(|&i| enriched[i].base.label == 1).collect();
    if train_pos.is_empty() || val_pos.is_empty() {
        return Err(Error::Data(format!(
            "adversarial training needs positives in both splits ({} train, {} val)",
            train_pos.len(),
            val_pos.len()
        )));
    }

    let propagator =
        AttackPropagator::new(inputs.ds, inputs.enriched, inputs.index, inputs.estimators)?;
    let clean_val: &[EnrichedRow] = &enriched[inputs.val.clone()];

    let mut model = baseline.clone();
    let mut work_train: Vec<EnrichedRow> = enriched[inputs.train.clone()].to_vec();
    let mut work_val: Vec<EnrichedRow> = clean_val.to_vec();

    let n_victims = (config.adversarial_fraction * train_pos.len() as f64).ceil() as usize;
    let n_victims = n_victims.clamp(1, train_pos.len());

    let mut trace = AdvTrainTrace::default();
    let mut best: Option<(f64, GbdtModel)> = None;
    let mut running_best = f64::NEG_INFINITY;
    let mut stalled = 0usize;
    // Validation attacks against the current model. Each round's evaluation
    // regenerates them against the updated model, and since the searcher is
    // deterministic and that model is the next round's current model, the
    // evaluation results double as the next round's replacements.
    let mut val_attacks: Option<Vec<AttackResult>> = None;

    for round in 1..=config.max_adv_rounds {
        let threshold = operating_threshold(&model, clean_val, config.pauc_alpha)?;
        let searcher = Searcher::new(
            &model,
            &propagator,
            inputs.stats,
            inputs.costs.clone(),
            threshold,
            config.search.clone(),
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(component_seed(
            config.seed,
            &format!("advtrain.round.{round}"),
        ));
        let mut sampled: Vec<usize> = rand::seq::index::sample(&mut rng, train_pos.len(), n_victims)
            .into_iter()
            .map(|i| train_pos[i])
            .collect();
        sampled.sort_unstable();

        let train_results = searcher.attack_rows(&sampled)?;
        let val_results = match val_attacks.take() {
            Some(results) => results,
            None => searcher.attack_rows(&val_pos)?,
        };

        replace_rows(&propagator, &mut work_train, inputs.train.start, &train_results, config)?;
        for (i, r) in val_pos.iter().zip(&val_results) {
            work_val[i - inputs.val.start] = propagator.apply(*i, &r.attack)?;
        }

        let x_train: Vec<Vec<f64>> =
            par::map_slice(&work_train, |r| model.gather(&r.features));
        let y_train: Vec<u8> = work_train.iter().map(|r| r.base.label).collect();
        let before = model.n_trees();
        model = match config.schedule {
            Schedule::Periodic(k) => model.continue_fit(k, &x_train, &y_train, None)?,
            Schedule::OnConvergence => {
                let x_val: Vec<Vec<f64>> =
                    par::map_slice(&work_val, |r| model.gather(&r.features));
                let y_val: Vec<u8> = work_val.iter().map(|r| r.base.label).collect();
                model.continue_fit(
                    config.boost_rounds,
                    &x_train,
                    &y_train,
                    Some((&x_val, &y_val)),
                )?
            }
        };
        let trees_added = model.n_trees() - before;

        let updated_threshold = operating_threshold(&model, clean_val, config.pauc_alpha)?;
        let eval_searcher = Searcher::new(
            &model,
            &propagator,
            inputs.stats,
            inputs.costs.clone(),
            updated_threshold,
            config.search.clone(),
        )?;
        let fresh = eval_searcher.attack_rows(&val_pos)?;
        let attacked_rows: Vec<EnrichedRow> = val_pos
            .iter()
            .zip(&fresh)
            .map(|(&i, r)| propagator.apply(i, &r.attack))
            .collect::<Result<_>>()?;
        let report: EvalReport = evaluate(
            &model,
            clean_val,
            &attacked_rows,
            config.pauc_alpha,
            config.search.norm_cap,
        )?;
        val_attacks = Some(fresh);

        trace.rounds.push(AdvRoundRecord {
            round,
            clean_pauc: report.clean_pauc,
            adversarial_pauc: report.adversarial_pauc,
            success_rate: report.success_rate,
            n_attacked: sampled.len() + val_pos.len(),
            trees_added,
        });

        let adv = report.adversarial_pauc;
        if best.as_ref().map_or(true, |(b, _)| adv > *b) {
            best = Some((adv, model.clone()));
        }
        if adv > running_best + config.stop_epsilon {
            running_best = adv;
            stalled = 0;
        } else {
            running_best = running_best.max(adv);
            stalled += 1;
            if stalled >= config.stop_patience {
                break;
            }
        }
    }

    let (_, best_model) = best.expect("at least one round ran");
    Ok((best_model, trace))
}

fn operating_threshold(model: &GbdtModel, rows: &[EnrichedRow], alpha: f64) -> Result<f64> {
    let scores: Vec<f64> = par::map_slice(rows, |r| model.score_enriched(r));
    let labels: Vec<u8> = rows.iter().map(|r| r.base.label).collect();
    threshold_at_fpr(&scores, &labels, alpha)
}

fn replace_rows(
    propagator: &AttackPropagator<'_>,
    work: &mut Vec<EnrichedRow>,
    offset: usize,
    results: &[AttackResult],
    config: &AdvTrainConfig,
) -> Result<()> {
    for r in results {
        let global = propagator
            .dataset()
            .position_of(r.event_id)
            .ok_or_else(|| Error::Data(format!("unknown event {}", r.event_id)))?;
        let attacked = propagator.apply(global, &r.attack)?;
        if config.augment {
            work.push(attacked);
        } else {
            work[global - offset] = attacked;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::CardAction;
    use crate::data::Transaction;
    use crate::features::{compute_features, FeaturePlan};
    use crate::gbdt::GbdtParams;
    use crate::search::SearchStrategy;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gate_fires_per_schedule() {
        let mut state = ScheduleState { rounds_since_attack: 0, ..Default::default() };
        for round in 1..=6 {
            state.rounds_since_attack += 1;
            let g = schedule_gate(&state, Schedule::Periodic(3));
            assert_eq!(g.attack_now, round % 3 == 0, "round {round}");
            assert_eq!(g.keep_boosting, !g.attack_now);
            if g.attack_now {
                state.rounds_since_attack = 0;
            }
        }

        let every = ScheduleState { rounds_since_attack: 1, ..Default::default() };
        assert!(schedule_gate(&every, Schedule::Periodic(1)).attack_now);

        let mut conv = ScheduleState { patience: 5, ..Default::default() };
        for stall in 0..5 {
            conv.non_improving_rounds = stall;
            assert!(!schedule_gate(&conv, Schedule::OnConvergence).attack_now);
        }
        conv.non_improving_rounds = 5;
        assert!(schedule_gate(&conv, Schedule::OnConvergence).attack_now);
    }

    fn tx(id: u64, amount: f64, card: u32, label: u8) -> Transaction {
        Transaction {
            event_id: id,
            timestamp: id as i64 * 3_600_000,
            amount,
            card_id: card,
            card_network: (card % 4) as u8,
            cvv_match: 0,
            merchant_id: 9,
            merchant_category: 3,
            latitude: 40.0,
            longitude: -3.0,
            ip_network: (id % 3) as u8,
            label,
        }
    }

    struct LoopWorld {
        ds: Dataset,
        enriched: EnrichedDataset,
        index: EntityIndex,
        est: Estimators,
        stats: DatasetStats,
        baseline: GbdtModel,
    }

    fn loop_world() -> LoopWorld {
        let rows: Vec<Transaction> = (0..60)
            .map(|i| {
                let label = u8::from(i % 6 == 0);
                let amount =
                    if label == 1 { 100.0 + i as f64 } else { 20.0 + (i % 7) as f64 };
                tx(i, amount, (i % 6) as u32, label)
            })
            .collect();
        let plan = FeaturePlan::parse(
            "rowmap log_amount log_amount\n\
             profile card_count_1d count card 1d\n\
             profile card_mean_1d mean card 1d\n",
        )
        .unwrap();
        let ds = Dataset::from_rows(rows).unwrap();
        let enriched = compute_features(&ds, &plan).unwrap();
        let index = EntityIndex::build(&ds);
        let est = Estimators::all_exact(&plan);
        let stats = DatasetStats::from_rows(&ds.rows()[..40]).unwrap();

        let params = GbdtParams {
            n_rounds: 25,
            max_depth: 3,
            early_stopping_rounds: 0,
            ..GbdtParams::default()
        };
        let x: Vec<Vec<f64>> = enriched.rows[..40].iter().map(|r| r.features.clone()).collect();
        let y: Vec<u8> = ds.rows()[..40].iter().map(|r| r.label).collect();
        let baseline = GbdtModel::fit_classifier(&params, &x, &y, None).unwrap();
        LoopWorld { ds, enriched, index, est, stats, baseline }
    }

    fn inputs(w: &LoopWorld) -> AdvTrainInputs<'_> {
        AdvTrainInputs {
            ds: &w.ds,
            enriched: &w.enriched,
            index: &w.index,
            estimators: &w.est,
            stats: &w.stats,
            costs: CostModel::default(),
            train: 0..40,
            val: 40..60,
        }
    }

    fn loop_config(norm_cap: f64, rounds: usize) -> AdvTrainConfig {
        AdvTrainConfig {
            adversarial_fraction: 0.4,
            schedule: Schedule::Periodic(2),
            search: SearchConfig {
                strategy: SearchStrategy::ScdGreedy,
                norm_cap,
                budget: 300,
                temporal: false,
                seed: 9,
                ..SearchConfig::default()
            },
            max_adv_rounds: rounds,
            seed: 41,
            ..AdvTrainConfig::default()
        }
    }

    #[test]
    fn cap_zero_degenerates_to_clean_training() {
        let w = loop_world();
        let (model, trace) = adversarial_train(&w.baseline, &inputs(&w), &loop_config(0.0, 2))
            .unwrap();
        assert!(!trace.rounds.is_empty());
        for r in &trace.rounds {
            assert_abs_diff_eq!(r.adversarial_pauc, r.clean_pauc, epsilon = 1e-12);
            assert_eq!(r.trees_added, 2);
            // Three sampled training positives plus the three validation ones.
            assert_eq!(r.n_attacked, 6);
        }
        assert!(model.n_trees() > w.baseline.n_trees());
    }

    #[test]
    fn single_round_produces_one_record() {
        let w = loop_world();
        let (model, trace) = adversarial_train(&w.baseline, &inputs(&w), &loop_config(65.0, 1))
            .unwrap();
        assert_eq!(trace.rounds.len(), 1);
        assert_eq!(trace.rounds[0].round, 1);
        assert_eq!(trace.rounds[0].trees_added, 2);
        assert_eq!(model.n_trees(), w.baseline.n_trees() + 2);

        let csv = trace.to_csv();
        assert!(csv.starts_with("round,clean_pauc,adversarial_pauc"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn returned_model_matches_the_best_round() {
        let w = loop_world();
        let (model, trace) = adversarial_train(&w.baseline, &inputs(&w), &loop_config(65.0, 4))
            .unwrap();
        let best = trace.best_round().unwrap();
        let trees: usize = trace
            .rounds
            .iter()
            .filter(|r| r.round <= best)
            .map(|r| r.trees_added)
            .sum();
        assert_eq!(model.n_trees(), w.baseline.n_trees() + trees);
    }

    #[test]
    fn stalling_stops_before_the_round_cap() {
        let w = loop_world();
        let config = AdvTrainConfig {
            stop_epsilon: 1.0,
            stop_patience: 1,
            ..loop_config(30.0, 6)
        };
        let (_, trace) = adversarial_train(&w.baseline, &inputs(&w), &config).unwrap();
        assert_eq!(trace.rounds.len(), 2);
    }

    #[test]
    fn augment_mode_keeps_the_originals() {
        let w = loop_world();
        let config = AdvTrainConfig { augment: true, ..loop_config(65.0, 1) };
        let (model, trace) = adversarial_train(&w.baseline, &inputs(&w), &config).unwrap();
        assert_eq!(trace.rounds.len(), 1);
        assert!(model.n_trees() > w.baseline.n_trees());
    }

    #[test]
    fn missing_positives_error() {
        let w = loop_world();
        let mut bad = inputs(&w);
        bad.val = 41..42;
        let err = adversarial_train(&w.baseline, &bad, &loop_config(65.0, 1));
        assert!(err.is_err());

        let bad_config = AdvTrainConfig {
            adversarial_fraction: 0.0,
            ..AdvTrainConfig::default()
        };
        assert!(bad_config.validate().is_err());
        assert!(AdvTrainConfig { max_adv_rounds: 0, ..Default::default() }.validate().is_err());
        assert!(
            AdvTrainConfig { schedule: Schedule::Periodic(0), ..Default::default() }
                .validate()
                .is_err()
        );
    }

    #[test]
    fn attacked_rows_keep_their_labels() {
        let w = loop_world();
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &w.est).unwrap();
        let attack = crate::attack::AttackVector {
            amount_scale: Some(0.1),
            card_action: CardAction::Reset,
            ..crate::attack::AttackVector::empty()
        };
        let out = prop.apply(6, &attack).unwrap();
        assert_eq!(out.base.label, 1);
    }
}
