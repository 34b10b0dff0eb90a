//! Ranking metrics at a fixed false-positive budget.
//!
//! The headline metric is partial AUC over the low-FPR region, the slice a
//! fraud model actually operates in. ROC points come from grouped score ties
//! and the area from trapezoids, so at `alpha = 1` the value coincides with
//! the pairwise win probability. Operating thresholds pick the most inclusive
//! score cutoff whose false-positive rate stays within the budget.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::features::EnrichedRow;
use crate::par;

/// How the partial area is mapped to a reportable score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaucNormalization {
    /// Area divided by `alpha`; a random ranker scores `alpha / 2`.
    #[default]
    Ratio,
    /// McClish rescaling; a random ranker scores 0.5, a perfect one 1.
    McClish,
}

/// Anything that maps an enriched row to a fraud score, higher = more
/// suspicious. Models and test stubs implement this.
pub trait Scorer: Sync {
    fn score_enriched(&self, row: &EnrichedRow) -> f64;
}

fn validate_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let mut pos = 0usize;
    let mut neg = 0usize;
    for &l in labels {
        match l {
            0 => neg += 1,
            1 => pos += 1,
            other => return Err(Error::Metric(format!("label {other} is not 0/1"))),
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// ROC vertices after grouping tied scores, from (0, 0) to (1, 1).
fn roc_vertices(scores: &[f64], labels: &[u8], pos: usize, neg: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut vertices = Vec::with_capacity(scores.len() + 1);
    vertices.push((0.0, 0.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        vertices.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    vertices
}

/// Partial AUC over the FPR range [0, alpha].
pub fn pauc_at_fpr(
    scores: &[f64],
    labels: &[u8],
    alpha: f64,
    normalization: PaucNormalization,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Metric(format!("alpha {alpha} outside (0, 1]")));
    }
    let (pos, neg) = validate_inputs(scores, labels)?;
    let vertices = roc_vertices(scores, labels, pos, neg);

    let mut area = 0.0;
    for pair in vertices.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        if x0 >= alpha {
            break;
        }
        if x1 <= alpha {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_alpha = y0 + (y1 - y0) * (alpha - x0) / (x1 - x0);
            area += (alpha - x0) * (y0 + y_alpha) / 2.0;
            break;
        }
    }

    match normalization {
        PaucNormalization::Ratio => Ok(area / alpha),
        PaucNormalization::McClish => {
            let a_min = alpha * alpha / 2.0;
            let a_max = alpha;
            Ok(0.5 * (1.0 + (area - a_min) / (a_max - a_min)))
        }
    }
}

/// Largest score cutoff achieving FPR <= alpha, alarms firing on
/// `score >= threshold`. Infinity when even the top score group overshoots
/// the budget, meaning the alarm can never fire at this operating point.
pub fn threshold_at_fpr(scores: &[f64], labels: &[u8], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Metric(format!("alpha {alpha} outside [0, 1]")));
    }
    let (_, neg) = validate_inputs(scores, labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut best = f64::INFINITY;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 0 {
                fp += 1;
            }
            i += 1;
        }
        if fp as f64 / neg as f64 <= alpha {
            best = score;
        } else {
            break;
        }
    }
    Ok(best)
}

/// True-positive rate at the FPR budget: recall of the alarm that
/// `threshold_at_fpr` configures.
pub fn recall_at_fpr(scores: &[f64], labels: &[u8], alpha: f64) -> Result<f64> {
    let (pos, _) = validate_inputs(scores, labels)?;
    let threshold = threshold_at_fpr(scores, labels, alpha)?;
    let caught = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| **l == 1 && **s >= threshold)
        .count();
    Ok(caught as f64 / pos as f64)
}

/// Coefficient of determination. Constant targets explain nothing, so a zero
/// total sum of squares maps to 0 rather than dividing by it.
pub fn r_squared(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Metric(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let sst: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    if sst <= 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - sse / sst)
}

/// Clean-versus-attacked comparison of one model at one cost cap.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub clean_pauc: f64,
    pub adversarial_pauc: f64,
    /// Fraction of attacked positives scoring under the operating threshold.
    pub success_rate: f64,
    /// Recall on the attacked set at the clean operating threshold.
    pub recall_at_fpr: f64,
    pub operating_threshold: f64,
    pub norm_cap: f64,
    pub n_clean: usize,
    pub n_attacked: usize,
}

/// Scores the clean set, swaps in attacked versions of positives by event id,
/// and reports both views. The threshold is set on clean scores only, the way
/// an operator would configure the alarm before any attack lands.
pub fn evaluate(
    scorer: &dyn Scorer,
    clean: &[EnrichedRow],
    attacked: &[EnrichedRow],
    alpha: f64,
    norm_cap: f64,
) -> Result<EvalReport> {
    let clean_scores = par::map_slice(clean, |row| scorer.score_enriched(row));
    let labels: Vec<u8> = clean.iter().map(|row| row.base.label).collect();

    let clean_pauc = pauc_at_fpr(&clean_scores, &labels, alpha, PaucNormalization::Ratio)?;
    let operating_threshold = threshold_at_fpr(&clean_scores, &labels, alpha)?;

    let mut replacement: HashMap<u64, f64> = HashMap::with_capacity(attacked.len());
    for row in attacked {
        if row.base.label != 1 {
            return Err(Error::Metric(format!(
                "attacked row {} is not a positive",
                row.base.event_id
            )));
        }
        replacement.insert(row.base.event_id, scorer.score_enriched(row));
    }

    let mut adv_scores = clean_scores.clone();
    let mut seen = 0usize;
    for (score, row) in adv_scores.iter_mut().zip(clean) {
        if let Some(&attacked_score) = replacement.get(&row.base.event_id) {
            *score = attacked_score;
            seen += 1;
        }
    }
    if seen != replacement.len() {
        return Err(Error::Metric(
            "attacked rows reference event ids missing from the clean set".into(),
        ));
    }

    let adversarial_pauc = pauc_at_fpr(&adv_scores, &labels, alpha, PaucNormalization::Ratio)?;
    let evading = replacement.values().filter(|s| **s < operating_threshold).count();
    let success_rate = if replacement.is_empty() {
        0.0
    } else {
        evading as f64 / replacement.len() as f64
    };
    let recall = recall_on_adv(&adv_scores, &labels, operating_threshold);

    Ok(EvalReport {
        clean_pauc,
        adversarial_pauc,
        success_rate,
        recall_at_fpr: recall,
        operating_threshold,
        norm_cap,
        n_clean: clean.len(),
        n_attacked: replacement.len(),
    })
}

fn recall_on_adv(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let pos = labels.iter().filter(|l| **l == 1).count();
    if pos == 0 {
        return 0.0;
    }
    let caught = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| **l == 1 && **s >= threshold)
        .count();
    caught as f64 / pos as f64
}
