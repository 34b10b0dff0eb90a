//! Pushing a raw-field perturbation through to the engineered features.
//!
//! A perturbed transaction changes more than its own columns: every window
//! aggregate that would have seen the row shifts with it. Each profile
//! feature gets an update strategy:
//!
//! * `Exact` recomputes the true window from the entity index, using staged
//!   difference updates when membership is unchanged and a bounded rescan
//!   when a time shift moves the window or a shrinking amount may have held
//!   the maximum.
//! * `Lookup` reads a binned time-of-training table of the feature's mean,
//!   for profiles with enough events per window for a population average to
//!   be meaningful.
//! * `Regression` predicts the post-shift value with a multi-output boosted
//!   model over the raw row, its unperturbed features, and the signed shift.
//! * `Discarded` marks a profile no estimator handles acceptably; it is cut
//!   from the classifier's inputs along with anything derived from it.
//!
//! Updates run in a fixed stage order: direct fields, then the time shift,
//! then amount scaling, then card actions, with row maps and higher-order
//! features recomputed at the end. Any attack leaving the timestamp alone is
//! handled exactly under every strategy, because window membership is then
//! unchanged; estimation only enters once the row moves in time.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{AttackVector, CardAction, TIME_SHIFT_MAX_MS, TIME_SHIFT_MIN_ABS_MS};
use crate::data::{Dataset, EntityIndex, GroupKey, Transaction, MS_PER_HOUR};
use crate::error::{Error, Result};
use crate::features::{
    higher_value, recompute_row, row_map_value, Aggregation, EnrichedDataset, EnrichedRow,
    FeatureKind, FeaturePlan, WindowStats,
};
use crate::gbdt::{GbdtModel, GbdtParams, Objective};
use crate::metrics::r_squared;

const ESTIMATORS_MAGIC: &str = "tabadv-estimators 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Exact,
    Lookup,
    Regression,
    Discarded,
}

impl EstimatorKind {
    fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::Lookup => "lookup",
            EstimatorKind::Regression => "regression",
            EstimatorKind::Discarded => "discarded",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EstimatorKind::Exact),
            "lookup" => Ok(EstimatorKind::Lookup),
            "regression" => Ok(EstimatorKind::Regression),
            "discarded" => Ok(EstimatorKind::Discarded),
            other => Err(Error::Estimator(format!("unknown estimator kind {other}"))),
        }
    }
}

/// Held-out fit diagnostics for one regression-candidate profile.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorQuality {
    pub r_squared: f64,
    /// R-squared of simply predicting the unshifted feature value.
    pub identity_r_squared: f64,
    /// Residual spread divided by the held-out target deviation.
    pub residual_range: f64,
}

impl EstimatorQuality {
    pub fn passes(&self, config: &EstimatorConfig) -> bool {
        self.r_squared >= config.r_min
            && self.residual_range <= config.q_max
            && self.r_squared > self.identity_r_squared
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Whether time-shift attacks are in scope. When they are not, every
    /// remaining slot admits associative updates and all profiles are exact.
    pub temporal_enabled: bool,
    /// Expected events per entity window at or above which a lookup table's
    /// population mean is trusted.
    pub volume_threshold: f64,
    /// Minimum held-out R-squared for a regression estimator.
    pub r_min: f64,
    /// Maximum normalized residual range for a regression estimator.
    pub q_max: f64,
    pub lookup_bin_ms: i64,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub seed: u64,
    pub gbdt: GbdtParams,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            temporal_enabled: true,
            volume_threshold: 50.0,
            r_min: 0.5,
            q_max: 10.0,
            lookup_bin_ms: MS_PER_HOUR,
            train_pairs: 4000,
            val_pairs: 1200,
            seed: 0,
            gbdt: GbdtParams {
                n_rounds: 240,
                max_depth: 5,
                early_stopping_rounds: 15,
                ..GbdtParams::default()
            },
        }
    }
}

/// Time-binned mean of one profile feature over the training period.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    t0: i64,
    bin_ms: i64,
    values: Vec<f64>,
}

impl LookupTable {
    /// Bins rows by timestamp and averages the feature over each bin's rows.
    /// Bins nobody hit borrow the nearest filled bin, ties going left.
    pub fn build(
        rows: &[EnrichedRow],
        feature_index: usize,
        t0: i64,
        t1: i64,
        bin_ms: i64,
    ) -> Result<Self> {
        if bin_ms <= 0 || t1 < t0 {
            return Err(Error::Estimator(format!(
                "bad lookup span [{t0}, {t1}] at {bin_ms} ms bins"
            )));
        }
        if rows.is_empty() {
            return Err(Error::Estimator("lookup table needs rows".into()));
        }
        let n_bins = ((t1 - t0) / bin_ms + 1) as usize;
        let mut sums = vec![0.0f64; n_bins];
        let mut counts = vec![0u32; n_bins];
        for row in rows {
            let bin = ((row.base.timestamp - t0) / bin_ms).clamp(0, n_bins as i64 - 1) as usize;
            sums[bin] += row.features[feature_index];
            counts[bin] += 1;
        }
        if counts.iter().all(|c| *c == 0) {
            return Err(Error::Estimator("lookup table got only out-of-span rows".into()));
        }
        let filled: Vec<usize> = (0..n_bins).filter(|&b| counts[b] > 0).collect();
        let values: Vec<f64> = (0..n_bins)
            .map(|b| {
                if counts[b] > 0 {
                    sums[b] / counts[b] as f64
                } else {
                    let nearest = filled
                        .iter()
                        .copied()
                        .min_by_key(|f| (b.abs_diff(*f), *f))
                        .unwrap();
                    sums[nearest] / counts[nearest] as f64
                }
            })
            .collect();
        Ok(LookupTable { t0, bin_ms, values })
    }

    /// Mean feature value at this time, clamped to the covered span.
    pub fn query(&self, timestamp: i64) -> f64 {
        let bin = ((timestamp - self.t0) / self.bin_ms).clamp(0, self.values.len() as i64 - 1);
        self.values[bin as usize]
    }

    pub fn n_bins(&self) -> usize {
        self.values.len()
    }
}

/// One profile feature's update strategy and supporting data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEstimator {
    pub feature_index: usize,
    pub name: String,
    pub kind: EstimatorKind,
    pub lookup: Option<LookupTable>,
    pub quality: Option<EstimatorQuality>,
}

/// Update strategies for every profile feature of a plan, plus the shared
/// regression model when any profile uses one.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimators {
    pub config: EstimatorConfig,
    /// One entry per profile feature, in plan order. Regression outputs are
    /// indexed by position in this list.
    pub profiles: Vec<ProfileEstimator>,
    pub regression: Option<GbdtModel>,
}

impl Estimators {
    /// Every profile exact; the only valid assignment when time-shift
    /// attacks are out of scope.
    pub fn all_exact(plan: &FeaturePlan) -> Self {
        let profiles = plan
            .profile_indices()
            .into_iter()
            .map(|idx| ProfileEstimator {
                feature_index: idx,
                name: plan.specs()[idx].name.clone(),
                kind: EstimatorKind::Exact,
                lookup: None,
                quality: None,
            })
            .collect();
        Estimators {
            config: EstimatorConfig { temporal_enabled: false, ..EstimatorConfig::default() },
            profiles,
            regression: None,
        }
    }

    pub fn kind_of(&self, feature_index: usize) -> Option<EstimatorKind> {
        self.profiles
            .iter()
            .find(|p| p.feature_index == feature_index)
            .map(|p| p.kind)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        writeln!(out, "{ESTIMATORS_MAGIC}").unwrap();
        writeln!(
            out,
            "config temporal {} volume_threshold {} r_min {} q_max {} lookup_bin_ms {} \
             train_pairs {} val_pairs {} seed {}",
            u8::from(c.temporal_enabled),
            c.volume_threshold,
            c.r_min,
            c.q_max,
            c.lookup_bin_ms,
            c.train_pairs,
            c.val_pairs,
            c.seed
        )
        .unwrap();
        let g = &c.gbdt;
        writeln!(
            out,
            "gbdt_params {} {} {} {} {} {} {} {} {} {}",
            g.n_rounds,
            g.learning_rate,
            g.max_depth,
            g.lambda,
            g.min_child_weight,
            g.n_bins,
            g.feature_subsample,
            g.early_stopping_rounds,
            g.pauc_alpha,
            g.seed
        )
        .unwrap();
        writeln!(out, "profiles {}", self.profiles.len()).unwrap();
        for p in &self.profiles {
            write!(out, "profile {} {} {}", p.feature_index, p.name, p.kind.name()).unwrap();
            if let Some(q) = &p.quality {
                write!(out, " quality {} {} {}", q.r_squared, q.identity_r_squared, q.residual_range)
                    .unwrap();
            }
            out.push('\n');
            if let Some(table) = &p.lookup {
                write!(out, "lookup {} {} {}", table.t0, table.bin_ms, table.values.len()).unwrap();
                for v in &table.values {
                    write!(out, " {v}").unwrap();
                }
                out.push('\n');
            }
        }
        match &self.regression {
            None => writeln!(out, "regression none").unwrap(),
            Some(model) => {
                let text = model.to_text();
                writeln!(out, "regression {}", text.lines().count()).unwrap();
                out.push_str(&text);
            }
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Estimator(format!("estimators parse: {msg}"));
        let mut lines = text.lines().peekable();
        let mut next = |what: &str| -> Result<&str> {
            lines.next().ok_or_else(|| bad(&format!("missing {what}")))
        };
        if next("header")? != ESTIMATORS_MAGIC {
            return Err(bad("unrecognized header"));
        }

        let config_line = next("config")?;
        let t: Vec<&str> = config_line.split_whitespace().collect();
        if t.len() != 17 || t[0] != "config" {
            return Err(bad("config line"));
        }
        let fp = |s: &str| s.parse::<f64>().map_err(|_| bad("config number"));
        let temporal_enabled = t[2] == "1";
        let volume_threshold = fp(t[4])?;
        let r_min = fp(t[6])?;
        let q_max = fp(t[8])?;
        let lookup_bin_ms: i64 = t[10].parse().map_err(|_| bad("lookup_bin_ms"))?;
        let train_pairs: usize = t[12].parse().map_err(|_| bad("train_pairs"))?;
        let val_pairs: usize = t[14].parse().map_err(|_| bad("val_pairs"))?;
        let seed: u64 = t[16].parse().map_err(|_| bad("seed"))?;

        let gbdt_line = next("gbdt_params")?;
        let t: Vec<&str> = gbdt_line.split_whitespace().collect();
        if t.len() != 11 || t[0] != "gbdt_params" {
            return Err(bad("gbdt_params line"));
        }
        let ip = |s: &str| s.parse::<usize>().map_err(|_| bad("gbdt integer"));
        let gbdt = GbdtParams {
            n_rounds: ip(t[1])?,
            learning_rate: fp(t[2])?,
            max_depth: ip(t[3])?,
            lambda: fp(t[4])?,
            min_child_weight: fp(t[5])?,
            n_bins: ip(t[6])?,
            feature_subsample: fp(t[7])?,
            early_stopping_rounds: ip(t[8])?,
            pauc_alpha: fp(t[9])?,
            seed: t[10].parse().map_err(|_| bad("gbdt seed"))?,
        };

        let profiles_line = next("profiles")?;
        let n_profiles: usize = profiles_line
            .strip_prefix("profiles ")
            .ok_or_else(|| bad("expected profiles"))?
            .parse()
            .map_err(|_| bad("profile count"))?;
        let mut profiles = Vec::with_capacity(n_profiles);
        for _ in 0..n_profiles {
            let line = next("profile")?;
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() < 4 || t[0] != "profile" {
                return Err(bad("profile line"));
            }
            let feature_index: usize = t[1].parse().map_err(|_| bad("feature index"))?;
            let name = t[2].to_string();
            let kind = EstimatorKind::parse(t[3])?;
            let quality = if t.len() > 4 {
                if t.len() != 8 || t[4] != "quality" {
                    return Err(bad("quality clause"));
                }
                Some(EstimatorQuality {
                    r_squared: fp(t[5])?,
                    identity_r_squared: fp(t[6])?,
                    residual_range: fp(t[7])?,
                })
            } else {
                None
            };
            let lookup = if kind == EstimatorKind::Lookup {
                let line = next("lookup")?;
                let t: Vec<&str> = line.split_whitespace().collect();
                if t.len() < 4 || t[0] != "lookup" {
                    return Err(bad("lookup line"));
                }
                let t0: i64 = t[1].parse().map_err(|_| bad("lookup t0"))?;
                let bin_ms: i64 = t[2].parse().map_err(|_| bad("lookup bin"))?;
                let n: usize = t[3].parse().map_err(|_| bad("lookup size"))?;
                let values: Vec<f64> = t[4..]
                    .iter()
                    .map(|s| fp(s))
                    .collect::<Result<_>>()?;
                if values.len() != n {
                    return Err(bad("lookup value count"));
                }
                Some(LookupTable { t0, bin_ms, values })
            } else {
                None
            };
            profiles.push(ProfileEstimator { feature_index, name, kind, lookup, quality });
        }

        let regression_line = next("regression")?;
        let regression = match regression_line.strip_prefix("regression ") {
            Some("none") => None,
            Some(count) => {
                let n: usize = count.parse().map_err(|_| bad("regression line count"))?;
                let mut text = String::new();
                for _ in 0..n {
                    text.push_str(next("regression body")?);
                    text.push('\n');
                }
                Some(GbdtModel::from_text(&text)?)
            }
            None => return Err(bad("expected regression")),
        };
        if next("end")? != "end" {
            return Err(bad("missing end marker"));
        }
        Ok(Estimators {
            config: EstimatorConfig {
                temporal_enabled,
                volume_threshold,
                r_min,
                q_max,
                lookup_bin_ms,
                train_pairs,
                val_pairs,
                seed,
                gbdt,
            },
            profiles,
            regression,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingPrerequisite(format!("estimators file {}: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }
}

/// Expected events per entity window for this profile's group, the quantity
/// the lookup-versus-regression decision thresholds on.
pub fn profile_volume(group: GroupKey, window_ms: i64, rows: &[Transaction]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mut entities = std::collections::HashSet::new();
    for tx in rows {
        entities.insert(group.value(tx));
    }
    let horizon = (rows.last().unwrap().timestamp - rows.first().unwrap().timestamp).max(1);
    let per_group = rows.len() as f64 / entities.len() as f64;
    per_group * window_ms as f64 / horizon as f64
}

/// Input vector for the regression estimator: raw fields that survive in the
/// perturbed row, the unperturbed engineered features, and the signed shift.
fn regression_input(tx: &Transaction, features: &[f64], delta_ms: i64) -> Vec<f64> {
    let mut v = Vec::with_capacity(8 + features.len() + 1);
    v.push(tx.timestamp as f64);
    v.push(tx.amount);
    v.push(tx.latitude);
    v.push(tx.longitude);
    v.push(tx.card_network as f64);
    v.push(tx.cvv_match as f64);
    v.push(tx.merchant_category as f64);
    v.push(tx.ip_network as f64);
    v.extend_from_slice(features);
    v.push(delta_ms as f64);
    v
}

fn sample_shift(rng: &mut ChaCha8Rng) -> i64 {
    let sign = if rng.gen_bool(0.5) { 1 } else { -1 };
    let lo = (TIME_SHIFT_MIN_ABS_MS as f64).ln();
    let hi = (TIME_SHIFT_MAX_MS as f64).ln();
    let mag = (rng.gen_range(lo..hi).exp() as i64).clamp(TIME_SHIFT_MIN_ABS_MS, TIME_SHIFT_MAX_MS);
    sign * mag
}

/// Supervised pairs for the regression estimator: a row, a random time
/// shift, and the true post-shift profile features from full recomputation.
pub struct RegressionPairs {
    pub inputs: Vec<Vec<f64>>,
    /// One column per profile feature, in plan profile order.
    pub targets: Vec<Vec<f64>>,
}

/// Samples (row, shift) pairs and recomputes the shifted profiles as targets.
/// Rows are drawn half from positives and half uniformly, since the trained
/// estimator is queried almost exclusively on attacked positives.
pub fn build_regression_pairs(
    ds: &Dataset,
    enriched: &EnrichedDataset,
    index: &EntityIndex,
    rows: Range<usize>,
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RegressionPairs> {
    if rows.is_empty() {
        return Err(Error::Estimator("empty row range for regression pairs".into()));
    }
    let positives: Vec<usize> =
        rows.clone().filter(|&i| ds.rows()[i].label == 1).collect();
    let plan = &enriched.plan;
    let profile_indices = plan.profile_indices();
    let mut inputs = Vec::with_capacity(n_pairs);
    let mut targets = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let i = if k % 2 == 0 || positives.is_empty() {
            rng.gen_range(rows.clone())
        } else {
            positives[rng.gen_range(0..positives.len())]
        };
        let tx = &ds.rows()[i];
        let delta = sample_shift(rng);
        let mut shifted = tx.clone();
        shifted.timestamp += delta;
        let recomputed = recompute_row(ds, index, plan, &shifted)?;
        inputs.push(regression_input(tx, &enriched.rows[i].features, delta));
        targets.push(profile_indices.iter().map(|&f| recomputed.features[f]).collect());
    }
    Ok(RegressionPairs { inputs, targets })
}

/// Decides an update strategy for every profile feature.
///
/// With temporal attacks out of scope everything is exact. Otherwise
/// high-volume profiles get lookup tables built on the training split, and
/// the rest share one multi-output regression model, kept per profile only
/// when its held-out fit beats the identity baseline and the quality gates.
pub fn assign_estimators(
    ds: &Dataset,
    enriched: &EnrichedDataset,
    index: &EntityIndex,
    train: Range<usize>,
    val: Range<usize>,
    config: &EstimatorConfig,
) -> Result<Estimators> {
    let plan = &enriched.plan;
    if !config.temporal_enabled {
        let mut est = Estimators::all_exact(plan);
        est.config = config.clone();
        return Ok(est);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Estimator("estimator assignment needs train and val rows".into()));
    }

    let train_rows = &ds.rows()[train.clone()];
    let train_start = train_rows.first().unwrap().timestamp;
    let train_end = train_rows.last().unwrap().timestamp;
    let profile_indices = plan.profile_indices();

    #[derive(Clone, Copy, PartialEq)]
    enum Provisional {
        Lookup,
        Candidate,
    }
    let provisional: Vec<Provisional> = profile_indices
        .iter()
        .map(|&f| match plan.specs()[f].kind {
            FeatureKind::Profile { group, window_ms, .. } => {
                if profile_volume(group, window_ms, train_rows) >= config.volume_threshold {
                    Provisional::Lookup
                } else {
                    Provisional::Candidate
                }
            }
            _ => unreachable!("profile_indices returned a non-profile"),
        })
        .collect();

    let any_candidate = provisional.contains(&Provisional::Candidate);
    let (model, qualities) = if any_candidate {
        if config.train_pairs == 0 || config.val_pairs == 0 {
            return Err(Error::Estimator(
                "regression candidates exist but pair counts are zero".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::component_seed(config.seed, "estimators.pairs"));
        let fit = build_regression_pairs(ds, enriched, index, train.clone(), config.train_pairs, &mut rng)?;
        let held = build_regression_pairs(ds, enriched, index, val.clone(), config.val_pairs, &mut rng)?;
        let model = GbdtModel::fit_regressor(
            &config.gbdt,
            &fit.inputs,
            &fit.targets,
            Some((&held.inputs, &held.targets)),
        )?;

        let preds: Vec<Vec<f64>> = held.inputs.iter().map(|row| model.predict_multi(row)).collect();
        let qualities: Vec<EstimatorQuality> = (0..profile_indices.len())
            .map(|o| {
                let target: Vec<f64> = held.targets.iter().map(|t| t[o]).collect();
                let pred: Vec<f64> = preds.iter().map(|p| p[o]).collect();
                // The unshifted feature sits just before the trailing delta
                // in the input layout.
                let identity: Vec<f64> = held
                    .inputs
                    .iter()
                    .map(|row| row[8 + profile_indices[o]])
                    .collect();
                let r2 = r_squared(&pred, &target).unwrap_or(0.0);
                let identity_r2 = r_squared(&identity, &target).unwrap_or(0.0);
                let n = target.len() as f64;
                let mean = target.iter().sum::<f64>() / n;
                let std =
                    (target.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
                let residuals: Vec<f64> =
                    pred.iter().zip(&target).map(|(p, y)| p - y).collect();
                let spread = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - residuals.iter().cloned().fold(f64::INFINITY, f64::min);
                let residual_range = if std > 0.0 { spread / std } else { f64::INFINITY };
                EstimatorQuality { r_squared: r2, identity_r_squared: identity_r2, residual_range }
            })
            .collect();
        (Some(model), qualities)
    } else {
        (None, Vec::new())
    };

    let mut profiles = Vec::with_capacity(profile_indices.len());
    let mut any_regression = false;
    for (pos, &f) in profile_indices.iter().enumerate() {
        let name = plan.specs()[f].name.clone();
        match provisional[pos] {
            Provisional::Lookup => {
                let table = LookupTable::build(
                    &enriched.rows[train.clone()],
                    f,
                    train_start,
                    train_end,
                    config.lookup_bin_ms,
                )?;
                profiles.push(ProfileEstimator {
                    feature_index: f,
                    name,
                    kind: EstimatorKind::Lookup,
                    lookup: Some(table),
                    quality: None,
                });
            }
            Provisional::Candidate => {
                let quality = qualities[pos].clone();
                let kind = if quality.passes(config) {
                    any_regression = true;
                    EstimatorKind::Regression
                } else {
                    EstimatorKind::Discarded
                };
                profiles.push(ProfileEstimator {
                    feature_index: f,
                    name,
                    kind,
                    lookup: None,
                    quality: Some(quality),
                });
            }
        }
    }

    Ok(Estimators {
        config: config.clone(),
        profiles,
        regression: if any_regression { model } else { None },
    })
}

/// Feature columns the classifier may use: everything except discarded
/// profiles and higher-order features built on anything excluded.
pub fn usable_feature_columns(plan: &FeaturePlan, estimators: &Estimators) -> Vec<usize> {
    let mut excluded = vec![false; plan.len()];
    for p in &estimators.profiles {
        if p.kind == EstimatorKind::Discarded {
            excluded[p.feature_index] = true;
        }
    }
    for (i, spec) in plan.specs().iter().enumerate() {
        match &spec.kind {
            FeatureKind::ZScore { value, mean, std }
                if excluded[*value] || excluded[*mean] || excluded[*std] =>
            {
                excluded[i] = true;
            }
            FeatureKind::Ratio { numer, denom, .. }
                if excluded[*numer] || excluded[*denom] =>
            {
                excluded[i] = true;
            }
            _ => {}
        }
    }
    (0..plan.len()).filter(|&i| !excluded[i]).collect()
}

struct ProfileWiring {
    feature_index: usize,
    stat_idx: usize,
    agg: Aggregation,
    group: GroupKey,
    kind: EstimatorKind,
    /// Position in the estimators profile list; regression output index.
    position: usize,
    sibling_count: Option<usize>,
    sibling_mean: Option<usize>,
}

/// Applies attacks to rows of an enriched dataset, producing the perturbed
/// row with features updated per the estimator assignment.
pub struct AttackPropagator<'a> {
    ds: &'a Dataset,
    enriched: &'a EnrichedDataset,
    index: &'a EntityIndex,
    estimators: &'a Estimators,
    wiring: Vec<ProfileWiring>,
    /// Stat sets referenced by at least one exact profile.
    exact_stat_sets: Vec<bool>,
}

impl<'a> AttackPropagator<'a> {
    pub fn new(
        ds: &'a Dataset,
        enriched: &'a EnrichedDataset,
        index: &'a EntityIndex,
        estimators: &'a Estimators,
    ) -> Result<Self> {
        let plan = &enriched.plan;
        let profile_indices = plan.profile_indices();
        if estimators.profiles.len() != profile_indices.len()
            || estimators
                .profiles
                .iter()
                .zip(&profile_indices)
                .any(|(p, &f)| p.feature_index != f)
        {
            return Err(Error::Estimator(
                "estimator assignment does not match the feature plan".into(),
            ));
        }
        if enriched.rows.len() != ds.rows().len() {
            return Err(Error::Data("enriched rows out of step with dataset".into()));
        }
        let needs_regression = estimators
            .profiles
            .iter()
            .any(|p| p.kind == EstimatorKind::Regression);
        if needs_regression {
            match &estimators.regression {
                None => {
                    return Err(Error::Estimator(
                        "regression-assigned profiles but no regression model".into(),
                    ))
                }
                Some(m) => {
                    if m.objective != (Objective::MultiSquaredError { n_outputs: profile_indices.len() }) {
                        return Err(Error::Estimator(
                            "regression model outputs do not match the profile count".into(),
                        ));
                    }
                }
            }
        }

        // Sibling map: (group, window, agg) -> feature index.
        let mut by_shape: HashMap<(GroupKey, i64, u8), usize> = HashMap::new();
        for &f in &profile_indices {
            if let FeatureKind::Profile { agg, group, window_ms, .. } = plan.specs()[f].kind {
                by_shape.insert((group, window_ms, agg_tag(agg)), f);
            }
        }

        let mut wiring = Vec::with_capacity(profile_indices.len());
        let mut exact_stat_sets = vec![false; plan.stat_sets().len()];
        for (position, p) in estimators.profiles.iter().enumerate() {
            if let FeatureKind::Profile { agg, group, window_ms, stat_idx } =
                plan.specs()[p.feature_index].kind
            {
                if p.kind == EstimatorKind::Exact {
                    exact_stat_sets[stat_idx] = true;
                }
                wiring.push(ProfileWiring {
                    feature_index: p.feature_index,
                    stat_idx,
                    agg,
                    group,
                    kind: p.kind,
                    position,
                    sibling_count: by_shape
                        .get(&(group, window_ms, agg_tag(Aggregation::Count)))
                        .copied(),
                    sibling_mean: by_shape
                        .get(&(group, window_ms, agg_tag(Aggregation::Mean)))
                        .copied(),
                });
            }
        }
        Ok(AttackPropagator { ds, enriched, index, estimators, wiring, exact_stat_sets })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    /// The enriched row the scorer would see if this attack landed on row
    /// `row_index`. Exact stat sets in the result are true recomputations.
    /// When the row moved in time, stat sets only estimated profiles
    /// reference keep their original stats, since estimates exist at the
    /// feature level.
    pub fn apply(&self, row_index: usize, attack: &AttackVector) -> Result<EnrichedRow> {
        let rows = self.ds.rows();
        if row_index >= rows.len() {
            return Err(Error::Data(format!("row index {row_index} out of range")));
        }
        let victim = &rows[row_index];
        let original = &self.enriched.rows[row_index];
        let plan = &self.enriched.plan;
        let perturbed = attack.apply(victim);

        let delta_t = attack.time_shift_ms.unwrap_or(0);
        let amount_changed = attack.amount_scale.is_some();
        let card_changed = attack.card_action != CardAction::None;

        // Without a time shift, window membership is unchanged and every
        // profile is computable exactly whatever its assignment; estimation
        // only enters once the row moves in time.
        let exact_all = delta_t == 0;

        // Exact window stats at the final perturbed state.
        let mut stats = original.stats.clone();
        for (si, &(group, window_ms)) in plan.stat_sets().iter().enumerate() {
            if !self.exact_stat_sets[si] && !exact_all {
                continue;
            }
            let card_set = group == GroupKey::Card;
            if card_set && card_changed {
                stats[si] = WindowStats::single(perturbed.amount);
            } else if delta_t != 0 {
                stats[si] = self.rescan(group, window_ms, &perturbed);
            } else if amount_changed {
                let s = &mut stats[si];
                let old = victim.amount;
                let new = perturbed.amount;
                if new < old && victim.amount >= s.max {
                    // The shrinking row may have held the window maximum.
                    *s = self.rescan(group, window_ms, &perturbed);
                } else {
                    s.replace_amount(old, new);
                }
            }
        }

        let mut features = original.features.clone();

        // Exact profiles read their recomputed windows.
        for w in &self.wiring {
            if w.kind == EstimatorKind::Exact || exact_all {
                features[w.feature_index] = w.agg.of(&stats[w.stat_idx]);
            }
        }

        if !exact_all {
            // Estimated profiles: time-shift estimate first, for every
            // estimated profile, so amount deltas can consult sibling stage
            // values.
            let regression_preds: Option<Vec<f64>> =
                if self.wiring.iter().any(|w| w.kind == EstimatorKind::Regression) {
                    let input = regression_input(victim, &original.features, delta_t);
                    Some(self.estimators.regression.as_ref().unwrap().predict_multi(&input))
                } else {
                    None
                };

            let mut stage: HashMap<usize, f64> = HashMap::new();
            for w in &self.wiring {
                let value = match w.kind {
                    EstimatorKind::Lookup => self.estimators.profiles[w.position]
                        .lookup
                        .as_ref()
                        .expect("lookup assignment carries a table")
                        .query(perturbed.timestamp),
                    EstimatorKind::Regression => regression_preds.as_ref().unwrap()[w.position],
                    _ => continue,
                };
                stage.insert(w.feature_index, value);
            }

            for w in &self.wiring {
                if !matches!(w.kind, EstimatorKind::Lookup | EstimatorKind::Regression) {
                    continue;
                }
                let mut value = stage[&w.feature_index];
                if amount_changed && !(card_changed && w.group == GroupKey::Card) {
                    let old = victim.amount;
                    let new = perturbed.amount;
                    let delta = new - old;
                    let count = self.sibling_stage_count(w, &features, &stage);
                    match w.agg {
                        Aggregation::Count => {}
                        Aggregation::Sum => value += delta,
                        Aggregation::Mean => {
                            if let Some(n) = count {
                                value += delta / n;
                            }
                        }
                        Aggregation::Stddev => {
                            let mean = self.sibling_stage_mean(w, &features, &stage, delta, count);
                            if let (Some(n), Some(m)) = (count, mean) {
                                let new_mean = m + delta / n;
                                let var = value * value + (new * new - old * old) / n + m * m
                                    - new_mean * new_mean;
                                value = var.max(0.0).sqrt();
                            }
                        }
                        Aggregation::Max => value = value.max(new),
                    }
                }
                if card_changed && w.group == GroupKey::Card {
                    value = match w.agg {
                        Aggregation::Count => 1.0,
                        Aggregation::Stddev => 0.0,
                        Aggregation::Sum | Aggregation::Mean | Aggregation::Max => perturbed.amount,
                    };
                }
                features[w.feature_index] = value;
            }
        }

        // Row maps and higher-order features settle last, over final values.
        for (i, spec) in plan.specs().iter().enumerate() {
            match &spec.kind {
                FeatureKind::RowMap(f) => features[i] = row_map_value(*f, &perturbed),
                FeatureKind::ZScore { .. } | FeatureKind::Ratio { .. } => {
                    features[i] = higher_value(&spec.kind, &features)
                }
                FeatureKind::Profile { .. } => {}
            }
        }

        Ok(EnrichedRow { base: perturbed, features, stats })
    }

    /// The sibling count's value after the time-shift stage. Counts never
    /// move with amounts, so an exact sibling's final value works directly.
    fn sibling_stage_count(
        &self,
        w: &ProfileWiring,
        features: &[f64],
        stage: &HashMap<usize, f64>,
    ) -> Option<f64> {
        let idx = w.sibling_count?;
        let value = match stage.get(&idx) {
            Some(v) => *v,
            None => match self.estimators.kind_of(idx) {
                Some(EstimatorKind::Exact) => features[idx],
                _ => return None,
            },
        };
        (value >= 1.0).then_some(value)
    }

    /// The sibling mean's value after the time-shift stage. An exact
    /// sibling's final value already includes the amount delta, which is
    /// backed out to recover the stage value.
    fn sibling_stage_mean(
        &self,
        w: &ProfileWiring,
        features: &[f64],
        stage: &HashMap<usize, f64>,
        amount_delta: f64,
        count: Option<f64>,
    ) -> Option<f64> {
        let idx = w.sibling_mean?;
        match stage.get(&idx) {
            Some(v) => Some(*v),
            None => match self.estimators.kind_of(idx) {
                Some(EstimatorKind::Exact) => Some(features[idx] - amount_delta / count?),
                _ => None,
            },
        }
    }

    /// True window stats for the perturbed row via binary search over the
    /// entity's events, plus the perturbed row itself.
    fn rescan(&self, group: GroupKey, window_ms: i64, perturbed: &Transaction) -> WindowStats {
        let rows = self.ds.rows();
        let entity = group.value(perturbed);
        let events = self.index.events(group, entity);
        let t = perturbed.timestamp;
        let vid = perturbed.event_id;

        let lo = events.partition_point(|&ri| rows[ri as usize].timestamp <= t - window_ms);
        let hi = events.partition_point(|&ri| {
            let tx = &rows[ri as usize];
            (tx.timestamp, tx.event_id) < (t, vid)
        });

        let mut stats = WindowStats::single(perturbed.amount);
        for &ri in &events[lo..hi] {
            let tx = &rows[ri as usize];
            if tx.event_id == vid {
                continue;
            }
            stats.count += 1.0;
            stats.sum += tx.amount;
            stats.sumsq += tx.amount * tx.amount;
            stats.max = stats.max.max(tx.amount);
        }
        stats
    }
}

fn agg_tag(agg: Aggregation) -> u8 {
    match agg {
        Aggregation::Count => 0,
        Aggregation::Sum => 1,
        Aggregation::Mean => 2,
        Aggregation::Stddev => 3,
        Aggregation::Max => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{sample_slot, CardBundle, DatasetStats, Slot};
    use crate::features::compute_features;
    use crate::synth::{generate, GeneratorConfig};
    use approx::{assert_abs_diff_eq, relative_eq};

    fn tx(id: u64, ts: i64, amount: f64, card: u32, merchant: u32) -> Transaction {
        Transaction {
            event_id: id,
            timestamp: ts,
            amount,
            card_id: card,
            card_network: 0,
            cvv_match: 0,
            merchant_id: merchant,
            merchant_category: 0,
            latitude: 40.0,
            longitude: -3.0,
            ip_network: 1,
            label: 0,
        }
    }

    fn card_plan() -> FeaturePlan {
        FeaturePlan::parse(
            "profile card_count_1h count card 1h\n\
             profile card_sum_1h sum card 1h\n\
             profile card_mean_1h mean card 1h\n\
             profile card_stddev_1h stddev card 1h\n\
             profile card_max_1h max card 1h\n\
             profile merchant_count_1h count merchant 1h\n",
        )
        .unwrap()
    }

    struct World {
        ds: Dataset,
        enriched: EnrichedDataset,
        index: EntityIndex,
    }

    fn world(rows: Vec<Transaction>, plan: &FeaturePlan) -> World {
        let ds = Dataset::from_rows(rows).unwrap();
        let enriched = compute_features(&ds, plan).unwrap();
        let index = EntityIndex::build(&ds);
        World { ds, enriched, index }
    }

    fn feature(plan: &FeaturePlan, row: &EnrichedRow, name: &str) -> f64 {
        row.features[plan.index_of(name).unwrap()]
    }

    #[test]
    fn empty_attack_is_identity() {
        let plan = card_plan();
        let w = world(
            vec![
                tx(0, 0, 100.0, 1, 9),
                tx(1, 600_000, 40.0, 1, 9),
                tx(2, 1_200_000, 60.0, 1, 8),
            ],
            &plan,
        );
        let est = Estimators::all_exact(&plan);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();
        for i in 0..3 {
            let out = prop.apply(i, &AttackVector::empty()).unwrap();
            assert_eq!(out, w.enriched.rows[i]);
        }
    }

    #[test]
    fn amount_scaling_updates_window_aggregates() {
        let plan = card_plan();
        let w = world(
            vec![
                tx(0, 0, 1000.0, 1, 9),
                tx(1, 600_000, 100.0, 1, 9),
                tx(2, 1_200_000, 100.0, 1, 9),
            ],
            &plan,
        );
        let est = Estimators::all_exact(&plan);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();
        let attack = AttackVector { amount_scale: Some(0.5), ..AttackVector::empty() };
        let out = prop.apply(2, &attack).unwrap();
        assert_abs_diff_eq!(feature(&plan, &out, "card_sum_1h"), 1150.0, epsilon = 1e-9);
        assert_abs_diff_eq!(feature(&plan, &out, "card_count_1h"), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(feature(&plan, &out, "card_mean_1h"), 1150.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(feature(&plan, &out, "card_max_1h"), 1000.0, epsilon = 1e-12);

        let reference = recompute_row(&w.ds, &w.index, &plan, &out.base).unwrap();
        for (a, b) in out.features.iter().zip(&reference.features) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn card_reset_restarts_history() {
        let plan = card_plan();
        let rows: Vec<Transaction> =
            (0..5).map(|i| tx(i, i as i64 * 300_000, 50.0 + i as f64, 1, 9)).collect();
        let w = world(rows, &plan);
        let est = Estimators::all_exact(&plan);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();

        assert_abs_diff_eq!(feature(&plan, &w.enriched.rows[4], "card_count_1h"), 5.0);
        let attack = AttackVector { card_action: CardAction::Reset, ..AttackVector::empty() };
        let out = prop.apply(4, &attack).unwrap();
        assert_abs_diff_eq!(feature(&plan, &out, "card_count_1h"), 1.0);
        assert_abs_diff_eq!(feature(&plan, &out, "card_sum_1h"), 54.0);
        assert_abs_diff_eq!(feature(&plan, &out, "card_mean_1h"), 54.0);
        assert_abs_diff_eq!(feature(&plan, &out, "card_max_1h"), 54.0);
        assert_abs_diff_eq!(feature(&plan, &out, "card_stddev_1h"), 0.0);
        // The merchant still saw all five events.
        assert_abs_diff_eq!(feature(&plan, &out, "merchant_count_1h"), 5.0);
    }

    #[test]
    fn shift_and_reset_compose() {
        let plan = card_plan();
        let w = world(
            vec![
                tx(0, 0, 50.0, 1, 9),
                tx(1, MS_PER_HOUR, 100.0, 1, 9),
                tx(2, 3 * MS_PER_HOUR, 70.0, 2, 9),
            ],
            &plan,
        );
        let est = Estimators::all_exact(&plan);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();
        let attack = AttackVector {
            time_shift_ms: Some(2 * MS_PER_HOUR + 1_800_000),
            card_action: CardAction::Reset,
            ..AttackVector::empty()
        };
        let out = prop.apply(1, &attack).unwrap();
        assert_abs_diff_eq!(feature(&plan, &out, "card_count_1h"), 1.0);
        // At the shifted time the merchant window covers the row at 3h plus
        // the victim itself.
        assert_abs_diff_eq!(feature(&plan, &out, "merchant_count_1h"), 2.0);

        let reference = recompute_row(&w.ds, &w.index, &plan, &out.base).unwrap();
        for (a, b) in out.features.iter().zip(&reference.features) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn shrinking_the_window_maximum_rescans() {
        let plan = card_plan();
        let w = world(vec![tx(0, 0, 30.0, 1, 9), tx(1, 60_000, 40.0, 1, 9)], &plan);
        let est = Estimators::all_exact(&plan);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();
        let attack = AttackVector { amount_scale: Some(0.25), ..AttackVector::empty() };
        let out = prop.apply(1, &attack).unwrap();
        assert_abs_diff_eq!(feature(&plan, &out, "card_max_1h"), 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(feature(&plan, &out, "card_sum_1h"), 40.0, epsilon = 1e-9);
    }

    #[test]
    fn random_attacks_match_full_recomputation() {
        let config = GeneratorConfig {
            n_cards: 60,
            n_merchants: 12,
            weeks: 3.0,
            legit_rate: 1.5,
            seed: 23,
            ..GeneratorConfig::default()
        };
        let ds = generate(&config).unwrap();
        let plan = FeaturePlan::default_plan();
        let enriched = compute_features(&ds, &plan).unwrap();
        let index = EntityIndex::build(&ds);
        let est = Estimators::all_exact(&plan);
        let prop = AttackPropagator::new(&ds, &enriched, &index, &est).unwrap();
        let stats = DatasetStats::from_rows(ds.rows()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..80 {
            let i = rng.gen_range(0..ds.rows().len());
            let mut attack = AttackVector::empty();
            for slot in Slot::ALL {
                if rng.gen_bool(0.5) {
                    if let Ok(v) = sample_slot(slot, &ds.rows()[i], &stats, &mut rng) {
                        v.write_into(&mut attack);
                    }
                }
            }
            let out = prop.apply(i, &attack).unwrap();
            let reference = recompute_row(&ds, &index, &plan, &out.base).unwrap();
            for (f, (a, b)) in out.features.iter().zip(&reference.features).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-9 || relative_eq!(a, b, max_relative = 1e-9),
                    "feature {f} mismatch on row {i}: {a} vs {b} (attack {attack:?})"
                );
            }
        }
    }

    #[test]
    fn lookup_table_bins_average_and_clamp() {
        let plan = FeaturePlan::parse("profile card_sum_1h sum card 1h\n").unwrap();
        let mk = |id: u64, ts: i64, f: f64| EnrichedRow {
            base: tx(id, ts, 10.0, 1, 9),
            features: vec![f],
            stats: vec![WindowStats::single(10.0)],
        };
        let rows = vec![
            mk(0, 600_000, 2.0),
            mk(1, 1_200_000, 4.0),
            mk(2, 2 * MS_PER_HOUR + 600_000, 10.0),
        ];
        let _ = &plan;
        let table = LookupTable::build(&rows, 0, 0, 2 * MS_PER_HOUR + 600_000, MS_PER_HOUR).unwrap();
        assert_eq!(table.n_bins(), 3);
        assert_abs_diff_eq!(table.query(1_800_000), 3.0);
        // The untouched middle bin ties between neighbors and takes the left.
        assert_abs_diff_eq!(table.query(MS_PER_HOUR + 1_800_000), 3.0);
        assert_abs_diff_eq!(table.query(2 * MS_PER_HOUR + 1), 10.0);
        assert_abs_diff_eq!(table.query(-5 * MS_PER_HOUR), 3.0);
        assert_abs_diff_eq!(table.query(9 * MS_PER_HOUR), 10.0);
    }

    fn single_profile_world() -> (FeaturePlan, World) {
        let plan = FeaturePlan::parse("profile card_sum_1h sum card 1h\n").unwrap();
        let w = world(
            vec![tx(0, 600_000, 10.0, 1, 9), tx(1, 900_000, 30.0, 1, 9)],
            &plan,
        );
        (plan, w)
    }

    fn lookup_estimators(plan: &FeaturePlan, table: LookupTable) -> Estimators {
        let mut est = Estimators::all_exact(plan);
        est.config.temporal_enabled = true;
        est.profiles[0].kind = EstimatorKind::Lookup;
        est.profiles[0].lookup = Some(table);
        est
    }

    #[test]
    fn amount_only_attack_is_exact_under_any_assignment() {
        let (plan, w) = single_profile_world();
        let table = LookupTable {
            t0: 0,
            bin_ms: MS_PER_HOUR,
            values: vec![999.0, 999.0],
        };
        let est = lookup_estimators(&plan, table);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();
        let attack = AttackVector { amount_scale: Some(2.0), ..AttackVector::empty() };
        let out = prop.apply(1, &attack).unwrap();
        // Sum was 40; doubling the 30 gives 70, with no lookup involved.
        assert_abs_diff_eq!(feature(&plan, &out, "card_sum_1h"), 70.0, epsilon = 1e-9);
        let reference = recompute_row(&w.ds, &w.index, &plan, &out.base).unwrap();
        assert_abs_diff_eq!(out.features[0], reference.features[0], epsilon = 1e-9);
    }

    #[test]
    fn time_shift_reads_the_lookup_estimate() {
        let (plan, w) = single_profile_world();
        let table = LookupTable {
            t0: 0,
            bin_ms: MS_PER_HOUR,
            values: vec![5.0, 9.0],
        };
        let est = lookup_estimators(&plan, table);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();

        let shift_only = AttackVector {
            time_shift_ms: Some(90 * 60_000),
            ..AttackVector::empty()
        };
        let out = prop.apply(0, &shift_only).unwrap();
        assert_abs_diff_eq!(out.features[0], 9.0, epsilon = 1e-12);

        // With an amount change on top, the sum picks up the delta.
        let shift_and_scale = AttackVector {
            time_shift_ms: Some(90 * 60_000),
            amount_scale: Some(1.5),
            ..AttackVector::empty()
        };
        let out = prop.apply(0, &shift_and_scale).unwrap();
        assert_abs_diff_eq!(out.features[0], 9.0 + 5.0, epsilon = 1e-9);

        // A card action on a card profile overrides the estimate entirely.
        let shift_and_reset = AttackVector {
            time_shift_ms: Some(90 * 60_000),
            amount_scale: Some(1.5),
            card_action: CardAction::Reset,
            ..AttackVector::empty()
        };
        let out = prop.apply(0, &shift_and_reset).unwrap();
        assert_abs_diff_eq!(out.features[0], 15.0, epsilon = 1e-9);
    }

    #[test]
    fn regression_estimate_reads_the_model_output() {
        let (plan, w) = single_profile_world();
        // A zero-round regressor predicts its base, the target mean.
        let params = GbdtParams { n_rounds: 0, early_stopping_rounds: 0, ..GbdtParams::default() };
        let inputs = vec![vec![0.0; 10], vec![1.0; 10]];
        let targets = vec![vec![6.0], vec![8.0]];
        let model = GbdtModel::fit_regressor(&params, &inputs, &targets, None).unwrap();

        let mut est = Estimators::all_exact(&plan);
        est.config.temporal_enabled = true;
        est.profiles[0].kind = EstimatorKind::Regression;
        est.profiles[0].quality = Some(EstimatorQuality {
            r_squared: 0.9,
            identity_r_squared: 0.1,
            residual_range: 1.0,
        });
        est.regression = Some(model);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();

        let attack = AttackVector { time_shift_ms: Some(-3_600_000), ..AttackVector::empty() };
        let out = prop.apply(1, &attack).unwrap();
        assert_abs_diff_eq!(out.features[0], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn propagator_rejects_mismatched_estimators() {
        let (plan, w) = single_profile_world();
        let other_plan = card_plan();
        let est = Estimators::all_exact(&other_plan);
        assert!(AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).is_err());

        let mut est = Estimators::all_exact(&plan);
        est.profiles[0].kind = EstimatorKind::Regression;
        assert!(AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).is_err());
    }

    #[test]
    fn volume_counts_events_per_entity_window() {
        // 100 events over ~10 hours on two cards: 50 per card, so a one-hour
        // window expects about five.
        let rows: Vec<Transaction> = (0..100)
            .map(|i| tx(i, i as i64 * 360_000, 20.0, (i % 2) as u32, 9))
            .collect();
        let v = profile_volume(GroupKey::Card, MS_PER_HOUR, &rows);
        assert!((v - 5.0).abs() < 0.2, "volume {v}");
        let vm = profile_volume(GroupKey::Merchant, MS_PER_HOUR, &rows);
        assert!((vm - 10.0).abs() < 0.4, "volume {vm}");
    }

    #[test]
    fn quality_gates_are_conjunctive() {
        let config = EstimatorConfig::default();
        let good = EstimatorQuality {
            r_squared: 0.8,
            identity_r_squared: 0.3,
            residual_range: 4.0,
        };
        assert!(good.passes(&config));
        assert!(!EstimatorQuality { r_squared: 0.4, ..good.clone() }.passes(&config));
        assert!(!EstimatorQuality { residual_range: 11.0, ..good.clone() }.passes(&config));
        assert!(!EstimatorQuality { identity_r_squared: 0.85, ..good }.passes(&config));
    }

    #[test]
    fn assignment_follows_volume_and_quality() {
        let config = GeneratorConfig {
            n_cards: 80,
            n_merchants: 10,
            weeks: 4.0,
            legit_rate: 2.0,
            seed: 31,
            ..GeneratorConfig::default()
        };
        let ds = generate(&config).unwrap();
        let plan = FeaturePlan::default_plan();
        let enriched = compute_features(&ds, &plan).unwrap();
        let index = EntityIndex::build(&ds);
        let n = ds.rows().len();
        let train = 0..(n * 6 / 10);
        let val = (n * 6 / 10)..(n * 8 / 10);

        let est_config = EstimatorConfig {
            train_pairs: 400,
            val_pairs: 200,
            volume_threshold: 3.0,
            seed: 5,
            gbdt: GbdtParams {
                n_rounds: 40,
                max_depth: 4,
                early_stopping_rounds: 5,
                ..GbdtParams::default()
            },
            ..EstimatorConfig::default()
        };
        let est = assign_estimators(&ds, &enriched, &index, train.clone(), val, &est_config).unwrap();

        assert_eq!(est.profiles.len(), plan.profile_indices().len());
        let train_rows = &ds.rows()[train];
        let mut saw_lookup = false;
        for p in &est.profiles {
            let (group, window_ms) = match plan.specs()[p.feature_index].kind {
                FeatureKind::Profile { group, window_ms, .. } => (group, window_ms),
                _ => unreachable!(),
            };
            let volume = profile_volume(group, window_ms, train_rows);
            match p.kind {
                EstimatorKind::Lookup => {
                    saw_lookup = true;
                    assert!(volume >= est_config.volume_threshold);
                    assert!(p.lookup.is_some());
                }
                EstimatorKind::Regression => {
                    assert!(volume < est_config.volume_threshold);
                    assert!(p.quality.as_ref().unwrap().passes(&est_config));
                }
                EstimatorKind::Discarded => {
                    assert!(volume < est_config.volume_threshold);
                    assert!(!p.quality.as_ref().unwrap().passes(&est_config));
                }
                EstimatorKind::Exact => panic!("exact assignment under temporal attacks"),
            }
        }
        assert!(saw_lookup, "expected at least one lookup profile");
        let has_regression = est.profiles.iter().any(|p| p.kind == EstimatorKind::Regression);
        assert_eq!(est.regression.is_some(), has_regression);

        let disabled = EstimatorConfig { temporal_enabled: false, ..est_config };
        let n6 = n * 6 / 10;
        let exact =
            assign_estimators(&ds, &enriched, &index, 0..n6, n6..(n * 8 / 10), &disabled).unwrap();
        assert!(exact.profiles.iter().all(|p| p.kind == EstimatorKind::Exact));
        assert!(exact.regression.is_none());
    }

    #[test]
    fn discarded_profiles_take_derived_features_with_them() {
        let plan = FeaturePlan::parse(
            "rowmap amount amount\n\
             profile card_mean_7d mean card 7d\n\
             profile card_stddev_7d stddev card 7d\n\
             higher amount_z zscore amount card_mean_7d card_stddev_7d\n\
             higher amount_over_mean ratio amount card_mean_7d 1\n",
        )
        .unwrap();
        let mut est = Estimators::all_exact(&plan);
        est.profiles[1].kind = EstimatorKind::Discarded;
        let usable = usable_feature_columns(&plan, &est);
        assert_eq!(usable, vec![0, 1, 4]);
    }

    #[test]
    fn estimators_round_trip_through_text() {
        let (plan, _) = single_profile_world();
        let params = GbdtParams { n_rounds: 0, early_stopping_rounds: 0, ..GbdtParams::default() };
        let model = GbdtModel::fit_regressor(
            &params,
            &[vec![0.0; 4], vec![1.0; 4]],
            &[vec![2.0], vec![4.0]],
            None,
        )
        .unwrap();
        let est = Estimators {
            config: EstimatorConfig { temporal_enabled: true, seed: 77, ..Default::default() },
            profiles: vec![ProfileEstimator {
                feature_index: 0,
                name: plan.specs()[0].name.clone(),
                kind: EstimatorKind::Regression,
                lookup: None,
                quality: Some(EstimatorQuality {
                    r_squared: 0.75,
                    identity_r_squared: 0.25,
                    residual_range: 2.5,
                }),
            }],
            regression: Some(model),
        };
        let text = est.to_text();
        let reloaded = Estimators::from_text(&text).unwrap();
        assert_eq!(reloaded, est);

        let with_lookup = Estimators {
            config: EstimatorConfig::default(),
            profiles: vec![ProfileEstimator {
                feature_index: 0,
                name: "card_sum_1h".into(),
                kind: EstimatorKind::Lookup,
                lookup: Some(LookupTable {
                    t0: 120,
                    bin_ms: MS_PER_HOUR,
                    values: vec![1.5, 2.25, 3.0],
                }),
                quality: None,
            }],
            regression: None,
        };
        let text = with_lookup.to_text();
        assert_eq!(Estimators::from_text(&text).unwrap(), with_lookup);
        assert!(Estimators::from_text("nope").is_err());
    }

    #[test]
    fn switch_bundle_changes_attributes_and_restarts_card() {
        let plan = card_plan();
        let rows: Vec<Transaction> =
            (0..4).map(|i| tx(i, i as i64 * 60_000, 25.0, 1, 9)).collect();
        let w = world(rows, &plan);
        let est = Estimators::all_exact(&plan);
        let prop = AttackPropagator::new(&w.ds, &w.enriched, &w.index, &est).unwrap();
        let attack = AttackVector {
            card_action: CardAction::Switch(CardBundle { card_network: 2, cvv_match: 1 }),
            ..AttackVector::empty()
        };
        let out = prop.apply(3, &attack).unwrap();
        assert_eq!(out.base.card_network, 2);
        assert_eq!(out.base.cvv_match, 1);
        assert_abs_diff_eq!(feature(&plan, &out, "card_count_1h"), 1.0);
        assert_abs_diff_eq!(feature(&plan, &out, "merchant_count_1h"), 4.0);
        let reference = recompute_row(&w.ds, &w.index, &plan, &out.base).unwrap();
        for (a, b) in out.features.iter().zip(&reference.features) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }
}
