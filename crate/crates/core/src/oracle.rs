//! Slow reference implementations kept deliberately independent of the
//! optimized paths. Tests compare the streaming feature engine and the fast
//! metrics against these quadratic versions, so nothing here may share window
//! bookkeeping or ROC code with the modules under test.

use crate::data::{Dataset, GroupKey, Transaction};
use crate::features::{Aggregation, FeatureKind, FeaturePlan, RowMapFn};

fn oracle_row_map(func: RowMapFn, tx: &Transaction) -> f64 {
    match func {
        RowMapFn::Amount => tx.amount,
        RowMapFn::LogAmount => tx.amount.ln(),
        RowMapFn::HourOfDay => (tx.timestamp.div_euclid(3_600_000).rem_euclid(24)) as f64,
        RowMapFn::GeoCell => {
            let lat_idx = (((tx.latitude + 90.0) / 10.0).floor() as i64).clamp(0, 17);
            let lon_idx = (((tx.longitude + 180.0) / 10.0).floor() as i64).clamp(0, 35);
            (lat_idx * 36 + lon_idx) as f64
        }
        RowMapFn::CardNetwork => tx.card_network as f64,
        RowMapFn::CvvMatch => tx.cvv_match as f64,
        RowMapFn::MerchantCategory => tx.merchant_category as f64,
        RowMapFn::IpNetwork => tx.ip_network as f64,
    }
}

fn group_value(group: GroupKey, tx: &Transaction) -> u32 {
    match group {
        GroupKey::Card => tx.card_id,
        GroupKey::Merchant => tx.merchant_id,
    }
}

/// Window aggregate for row `i` by scanning every row of the dataset.
fn oracle_profile(
    rows: &[Transaction],
    i: usize,
    agg: Aggregation,
    group: GroupKey,
    window_ms: i64,
) -> f64 {
    let me = &rows[i];
    let entity = group_value(group, me);
    let mut count = 0u64;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut max = f64::NEG_INFINITY;
    for other in rows {
        if group_value(group, other) != entity {
            continue;
        }
        let in_past = (other.timestamp, other.event_id) <= (me.timestamp, me.event_id);
        let in_window = other.timestamp > me.timestamp - window_ms;
        if in_past && in_window {
            count += 1;
            sum += other.amount;
            sumsq += other.amount * other.amount;
            max = max.max(other.amount);
        }
    }
    match agg {
        Aggregation::Count => count as f64,
        Aggregation::Sum => sum,
        Aggregation::Mean => {
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        }
        Aggregation::Stddev => {
            if count <= 1 {
                0.0
            } else {
                let mean = sum / count as f64;
                (sumsq / count as f64 - mean * mean).max(0.0).sqrt()
            }
        }
        Aggregation::Max => {
            if count == 0 {
                0.0
            } else {
                max
            }
        }
    }
}

/// Feature matrix computed with quadratic scans, one full pass per row.
pub fn brute_force_features(ds: &Dataset, plan: &FeaturePlan) -> Vec<Vec<f64>> {
    let rows = ds.rows();
    let mut out = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        let mut features: Vec<f64> = Vec::with_capacity(plan.len());
        for spec in plan.specs() {
            let v = match &spec.kind {
                FeatureKind::RowMap(f) => oracle_row_map(*f, &rows[i]),
                FeatureKind::Profile { agg, group, window_ms, .. } => {
                    oracle_profile(rows, i, *agg, *group, *window_ms)
                }
                FeatureKind::ZScore { value, mean, std } => {
                    let s = features[*std];
                    if s > 0.0 {
                        (features[*value] - features[*mean]) / s
                    } else {
                        0.0
                    }
                }
                FeatureKind::Ratio { numer, denom, offset } => {
                    let d = features[*denom] + offset;
                    if d != 0.0 && d.is_finite() {
                        features[*numer] / d
                    } else {
                        0.0
                    }
                }
            };
            features.push(v);
        }
        out.push(features);
    }
    out
}

/// Probability that a random positive outscores a random negative, ties
/// counting half. Quadratic over all cross-class pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (sp, lp) in scores.iter().zip(labels) {
        if *lp != 1 {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if *ln != 0 {
                continue;
            }
            pairs += 1;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}
