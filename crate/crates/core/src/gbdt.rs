//! Gradient boosted decision trees over quantile-binned features.
//!
//! Trees grow breadth-first to a depth cap, splits come from per-feature
//! histograms of gradient and hessian sums, and leaf values are the usual
//! second-order estimate -G / (H + lambda), scaled by the learning rate only
//! when accumulated into a margin. Two objectives: logistic for the fraud
//! classifier and joint multi-output squared error for feature estimators,
//! which trains one tree per output per round.
//!
//! Results are identical at any thread count: histograms build per feature in
//! parallel, but the argmax over candidate splits walks features in index
//! order sequentially. `continue_fit` never touches existing trees, and with
//! feature subsampling off, fitting n rounds then continuing for m more
//! reproduces a single (n + m)-round fit bit for bit.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::EnrichedRow;
use crate::metrics::{pauc_at_fpr, r_squared, PaucNormalization, Scorer};
use crate::par;

const MIN_SPLIT_GAIN: f64 = 1e-12;
const HESS_FLOOR: f64 = 1e-16;
const MODEL_MAGIC: &str = "tabadv-gbdt 1";

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtParams {
    /// Maximum boosting rounds; early stopping may keep fewer.
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub lambda: f64,
    /// Minimum hessian sum on each side of a split.
    pub min_child_weight: f64,
    /// At most 256 so bin indices fit a byte.
    pub n_bins: usize,
    /// Fraction of features drawn per tree; 1 disables subsampling.
    pub feature_subsample: f64,
    /// Rounds without validation improvement before stopping; 0 disables.
    pub early_stopping_rounds: usize,
    /// FPR budget of the validation metric for classification.
    pub pauc_alpha: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            n_rounds: 200,
            learning_rate: 0.1,
            max_depth: 6,
            lambda: 1.0,
            min_child_weight: 1.0,
            n_bins: 256,
            feature_subsample: 1.0,
            early_stopping_rounds: 20,
            pauc_alpha: 0.01,
            seed: 0,
        }
    }
}

impl GbdtParams {
    fn validate(&self) -> Result<()> {
        if self.n_bins < 2 || self.n_bins > 256 {
            return Err(Error::Model(format!("n_bins {} outside [2, 256]", self.n_bins)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Model(format!("learning rate {}", self.learning_rate)));
        }
        if self.max_depth == 0 || self.max_depth > 16 {
            return Err(Error::Model(format!("max_depth {} outside [1, 16]", self.max_depth)));
        }
        if !(self.feature_subsample > 0.0 && self.feature_subsample <= 1.0) {
            return Err(Error::Model(format!(
                "feature_subsample {} outside (0, 1]",
                self.feature_subsample
            )));
        }
        if !(self.pauc_alpha > 0.0 && self.pauc_alpha <= 1.0) {
            return Err(Error::Model(format!("pauc_alpha {} outside (0, 1]", self.pauc_alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Logistic,
    /// Squared error over `n_outputs` targets fitted jointly.
    MultiSquaredError { n_outputs: usize },
}

impl Objective {
    pub fn n_outputs(&self) -> usize {
        match self {
            Objective::Logistic => 1,
            Objective::MultiSquaredError { n_outputs } => *n_outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    feature: usize,
    threshold: f64,
    left: u32,
    right: u32,
    value: f64,
    is_leaf: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.is_leaf {
                return node.value;
            }
            idx = if row[node.feature] < node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// A fitted boosted ensemble plus the bookkeeping needed to score enriched
/// rows and to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub params: GbdtParams,
    pub objective: Objective,
    base: Vec<f64>,
    trees: Vec<Tree>,
    /// Enriched-feature indices this model was trained on; None means the
    /// whole feature vector in order.
    pub columns: Option<Vec<usize>>,
    /// Cost cap the adversarial training ran at, if any.
    pub trained_norm_cap: Option<f64>,
    /// Calibrated alarm threshold on probability scores, if set.
    pub threshold: Option<f64>,
}

struct BinnedMatrix {
    n_rows: usize,
    cuts: Vec<Vec<f64>>,
    bins: Vec<Vec<u8>>,
}

impl BinnedMatrix {
    fn build(x: &[Vec<f64>], n_bins: usize) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Model("cannot fit on zero rows".into()));
        }
        let n_features = x[0].len();
        if n_features == 0 {
            return Err(Error::Model("cannot fit on zero features".into()));
        }
        for (i, row) in x.iter().enumerate() {
            if row.len() != n_features {
                return Err(Error::Model(format!(
                    "row {i} has {} features, expected {n_features}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Model(format!("non-finite feature value in row {i}")));
            }
        }

        let per_feature = par::map_range(n_features, |f| {
            let mut distinct: Vec<f64> = x.iter().map(|row| row[f]).collect();
            distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
            distinct.dedup();
            let cuts: Vec<f64> = if distinct.len() <= n_bins {
                distinct[1..].to_vec()
            } else {
                let mut picked: Vec<f64> = (1..n_bins)
                    .map(|k| distinct[k * distinct.len() / n_bins])
                    .collect();
                picked.dedup();
                picked
            };
            let bins: Vec<u8> = x
                .iter()
                .map(|row| cuts.partition_point(|c| *c <= row[f]) as u8)
                .collect();
            (cuts, bins)
        });

        let mut cuts = Vec::with_capacity(n_features);
        let mut bins = Vec::with_capacity(n_features);
        for (c, b) in per_feature {
            cuts.push(c);
            bins.push(b);
        }
        Ok(BinnedMatrix { n_rows: x.len(), cuts, bins })
    }
}

struct TreeBuilder<'a> {
    binned: &'a BinnedMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    features: &'a [usize],
}

impl TreeBuilder<'_> {
    fn build(&self) -> Tree {
        let mut nodes: Vec<Node> = Vec::new();
        let mut queue: VecDeque<(usize, Vec<u32>, usize)> = VecDeque::new();
        nodes.push(self.placeholder());
        queue.push_back((0, (0..self.binned.n_rows as u32).collect(), 0));

        while let Some((idx, rows, depth)) = queue.pop_front() {
            let mut g = 0.0;
            let mut h = 0.0;
            for &r in &rows {
                g += self.grad[r as usize];
                h += self.hess[r as usize];
            }
            let leaf_value = -g / (h + self.params.lambda);

            let split = if depth < self.params.max_depth && rows.len() >= 2 {
                self.find_split(&rows, g, h)
            } else {
                None
            };
            match split {
                None => {
                    nodes[idx] = Node {
                        feature: 0,
                        threshold: 0.0,
                        left: 0,
                        right: 0,
                        value: leaf_value,
                        is_leaf: true,
                    };
                }
                Some((feature, bin)) => {
                    let column = &self.binned.bins[feature];
                    let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
                        rows.iter().partition(|&&r| column[r as usize] <= bin);
                    let left = nodes.len() as u32;
                    let right = left + 1;
                    nodes.push(self.placeholder());
                    nodes.push(self.placeholder());
                    nodes[idx] = Node {
                        feature,
                        threshold: self.binned.cuts[feature][bin as usize],
                        left,
                        right,
                        value: 0.0,
                        is_leaf: false,
                    };
                    queue.push_back((left as usize, left_rows, depth + 1));
                    queue.push_back((right as usize, right_rows, depth + 1));
                }
            }
        }
        Tree { nodes }
    }

    fn placeholder(&self) -> Node {
        Node { feature: 0, threshold: 0.0, left: 0, right: 0, value: 0.0, is_leaf: true }
    }

    /// Best (feature, bin) split of this node, or None when nothing clears
    /// the gain and child-weight constraints. Candidates are scored per
    /// feature in parallel; the winner is chosen walking features in index
    /// order so the result never depends on scheduling.
    fn find_split(&self, rows: &[u32], g_total: f64, h_total: f64) -> Option<(usize, u8)> {
        let parent_score = g_total * g_total / (h_total + self.params.lambda);
        let candidates = par::map_slice(self.features, |&f| {
            self.best_for_feature(f, rows, g_total, h_total, parent_score)
        });
        let mut best: Option<(f64, usize, u8)> = None;
        for (&f, candidate) in self.features.iter().zip(&candidates) {
            if let Some((gain, bin)) = candidate {
                if best.map_or(true, |(bg, _, _)| *gain > bg) {
                    best = Some((*gain, f, *bin));
                }
            }
        }
        best.map(|(_, f, b)| (f, b))
    }

    fn best_for_feature(
        &self,
        feature: usize,
        rows: &[u32],
        g_total: f64,
        h_total: f64,
        parent_score: f64,
    ) -> Option<(f64, u8)> {
        let n_cuts = self.binned.cuts[feature].len();
        if n_cuts == 0 {
            return None;
        }
        let column = &self.binned.bins[feature];
        let mut hist = vec![(0.0f64, 0.0f64, 0u32); n_cuts + 1];
        for &r in rows {
            let slot = &mut hist[column[r as usize] as usize];
            slot.0 += self.grad[r as usize];
            slot.1 += self.hess[r as usize];
            slot.2 += 1;
        }

        let total_count = rows.len() as u32;
        let lambda = self.params.lambda;
        let mcw = self.params.min_child_weight;
        let mut g_left = 0.0;
        let mut h_left = 0.0;
        let mut c_left = 0u32;
        let mut best: Option<(f64, u8)> = None;
        for (bin, &(g, h, c)) in hist.iter().take(n_cuts).enumerate() {
            g_left += g;
            h_left += h;
            c_left += c;
            if c_left == 0 || c_left == total_count {
                continue;
            }
            let g_right = g_total - g_left;
            let h_right = h_total - h_left;
            if h_left < mcw || h_right < mcw {
                continue;
            }
            let gain = g_left * g_left / (h_left + lambda)
                + g_right * g_right / (h_right + lambda)
                - parent_score;
            if gain > MIN_SPLIT_GAIN && best.map_or(true, |(bg, _)| gain > bg) {
                best = Some((gain, bin as u8));
            }
        }
        best
    }
}

enum Targets<'a> {
    Binary(&'a [f64]),
    Multi(&'a [Vec<f64>]),
}

impl Targets<'_> {
    fn grad_hess(&self, output: usize, margins: &[f64], grad: &mut [f64], hess: &mut [f64]) {
        match self {
            Targets::Binary(y) => {
                for i in 0..margins.len() {
                    let p = sigmoid(margins[i]);
                    grad[i] = p - y[i];
                    hess[i] = (p * (1.0 - p)).max(HESS_FLOOR);
                }
            }
            Targets::Multi(y) => {
                for i in 0..margins.len() {
                    grad[i] = margins[i] - y[i][output];
                    hess[i] = 1.0;
                }
            }
        }
    }
}

pub fn sigmoid(margin: f64) -> f64 {
    1.0 / (1.0 + (-margin).exp())
}

fn logit(p: f64) -> f64 {
    let clamped = p.clamp(1e-6, 1.0 - 1e-6);
    (clamped / (1.0 - clamped)).ln()
}

struct ValSet<'a> {
    x: &'a [Vec<f64>],
    labels: Vec<u8>,
    targets: Option<&'a [Vec<f64>]>,
}

impl GbdtModel {
    /// Fits a binary classifier on 0/1 labels. With a validation set and a
    /// patience, training stops once the validation partial AUC stalls and
    /// the ensemble is cut back to its best round.
    pub fn fit_classifier(
        params: &GbdtParams,
        x: &[Vec<f64>],
        y: &[u8],
        val: Option<(&[Vec<f64>], &[u8])>,
    ) -> Result<Self> {
        let model = Self::empty_classifier(params, y)?;
        model.boost(params.n_rounds, x, y, val)
    }

    /// Fits a multi-output squared-error regressor; early stopping watches
    /// mean validation R-squared.
    #[allow(clippy::type_complexity)]
    pub fn fit_regressor(
        params: &GbdtParams,
        x: &[Vec<f64>],
        y: &[Vec<f64>],
        val: Option<(&[Vec<f64>], &[Vec<f64>])>,
    ) -> Result<Self> {
        params.validate()?;
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Model(format!("{} rows vs {} targets", x.len(), y.len())));
        }
        let k = y[0].len();
        if k == 0 || y.iter().any(|t| t.len() != k) {
            return Err(Error::Model("inconsistent target widths".into()));
        }
        let base: Vec<f64> = (0..k)
            .map(|o| y.iter().map(|t| t[o]).sum::<f64>() / y.len() as f64)
            .collect();
        let model = GbdtModel {
            params: params.clone(),
            objective: Objective::MultiSquaredError { n_outputs: k },
            base,
            trees: Vec::new(),
            columns: None,
            trained_norm_cap: None,
            threshold: None,
        };
        let val_set = match val {
            None => None,
            Some((vx, vy)) => {
                if vx.len() != vy.len() || vx.is_empty() {
                    return Err(Error::Model("bad validation set".into()));
                }
                Some(ValSet { x: vx, labels: Vec::new(), targets: Some(vy) })
            }
        };
        model.boost_inner(params.n_rounds, x, Targets::Multi(y), val_set)
    }

    /// Clones this classifier and appends up to `extra_rounds` more rounds
    /// fitted against the given data. Existing trees are never modified, so
    /// any prefix of the returned ensemble scores exactly like before.
    pub fn continue_fit(
        &self,
        extra_rounds: usize,
        x: &[Vec<f64>],
        y: &[u8],
        val: Option<(&[Vec<f64>], &[u8])>,
    ) -> Result<Self> {
        if self.objective != Objective::Logistic {
            return Err(Error::Model("continue_fit supports the classifier objective".into()));
        }
        self.boost(extra_rounds, x, y, val)
    }

    fn empty_classifier(params: &GbdtParams, y: &[u8]) -> Result<Self> {
        params.validate()?;
        let pos = y.iter().filter(|l| **l == 1).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::Model(format!(
                "training labels contain a single class ({pos} of {} positive)",
                y.len()
            )));
        }
        Ok(GbdtModel {
            params: params.clone(),
            objective: Objective::Logistic,
            base: vec![logit(pos as f64 / y.len() as f64)],
            trees: Vec::new(),
            columns: None,
            trained_norm_cap: None,
            threshold: None,
        })
    }

    fn boost(
        &self,
        rounds: usize,
        x: &[Vec<f64>],
        y: &[u8],
        val: Option<(&[Vec<f64>], &[u8])>,
    ) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Model(format!("{} rows vs {} labels", x.len(), y.len())));
        }
        if y.iter().any(|l| *l > 1) {
            return Err(Error::Model("labels must be 0/1".into()));
        }
        let y_f: Vec<f64> = y.iter().map(|l| *l as f64).collect();
        let val_set = match val {
            None => None,
            Some((vx, vy)) => {
                if vx.len() != vy.len() || vx.is_empty() {
                    return Err(Error::Model("bad validation set".into()));
                }
                Some(ValSet { x: vx, labels: vy.to_vec(), targets: None })
            }
        };
        self.boost_inner(rounds, x, Targets::Binary(&y_f), val_set)
    }

    fn boost_inner(
        &self,
        rounds: usize,
        x: &[Vec<f64>],
        targets: Targets<'_>,
        val: Option<ValSet<'_>>,
    ) -> Result<Self> {
        let params = &self.params;
        let k = self.objective.n_outputs();
        let n = x.len();
        let binned = BinnedMatrix::build(x, params.n_bins)?;
        let n_features = binned.cuts.len();

        // Margins the existing ensemble leaves each row at, per output.
        let start_margins = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let per_row = par::map_slice(rows, |row| self.raw_margins(row));
            (0..k)
                .map(|o| per_row.iter().map(|m| m[o]).collect::<Vec<f64>>())
                .collect()
        };
        let mut margins: Vec<Vec<f64>> = start_margins(x);
        let mut val_margins: Vec<Vec<f64>> = match &val {
            Some(v) => start_margins(v.x),
            None => Vec::new(),
        };

        let mut trees = self.trees.clone();
        let existing = trees.len();
        let all_features: Vec<usize> = (0..n_features).collect();
        let subsample_count =
            ((params.feature_subsample * n_features as f64).ceil() as usize).clamp(1, n_features);

        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut best_metric = f64::NEG_INFINITY;
        let mut best_round = 0usize;
        let mut stalled = 0usize;
        let patience_active = val.is_some() && params.early_stopping_rounds > 0;
        let mut completed = 0usize;

        for round in 0..rounds {
            for output in 0..k {
                targets.grad_hess(output, &margins[output], &mut grad, &mut hess);

                let tree_index = existing + round * k + output;
                let chosen: Vec<usize>;
                let features = if subsample_count == n_features {
                    &all_features
                } else {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(tree_index as u64));
                    let mut picked = rand::seq::index::sample(&mut rng, n_features, subsample_count)
                        .into_vec();
                    picked.sort_unstable();
                    chosen = picked;
                    &chosen
                };

                let tree = TreeBuilder {
                    binned: &binned,
                    grad: &grad,
                    hess: &hess,
                    params,
                    features,
                }
                .build();

                let deltas = par::map_slice(x, |row| tree.predict(row));
                for (m, d) in margins[output].iter_mut().zip(&deltas) {
                    *m += params.learning_rate * d;
                }
                if let Some(v) = &val {
                    let val_deltas = par::map_slice(v.x, |row| tree.predict(row));
                    for (m, d) in val_margins[output].iter_mut().zip(&val_deltas) {
                        *m += params.learning_rate * d;
                    }
                }
                trees.push(tree);
            }
            completed = round + 1;

            if patience_active {
                let v = val.as_ref().unwrap();
                let metric = match &targets {
                    Targets::Binary(_) => pauc_at_fpr(
                        &val_margins[0],
                        &v.labels,
                        params.pauc_alpha,
                        PaucNormalization::Ratio,
                    )?,
                    Targets::Multi(_) => {
                        let vt = v.targets.unwrap();
                        let mut total = 0.0;
                        for (o, preds) in val_margins.iter().enumerate() {
                            let column: Vec<f64> = vt.iter().map(|t| t[o]).collect();
                            total += r_squared(preds, &column)?;
                        }
                        total / k as f64
                    }
                };
                if metric > best_metric {
                    best_metric = metric;
                    best_round = completed;
                    stalled = 0;
                } else {
                    stalled += 1;
                    if stalled >= params.early_stopping_rounds {
                        break;
                    }
                }
            }
        }

        let kept_rounds = if patience_active { best_round } else { completed };
        trees.truncate(existing + kept_rounds * k);

        Ok(GbdtModel {
            params: self.params.clone(),
            objective: self.objective,
            base: self.base.clone(),
            trees,
            columns: self.columns.clone(),
            trained_norm_cap: self.trained_norm_cap,
            threshold: self.threshold,
        })
    }

    /// Raw additive margins, one per output, accumulated in tree order.
    pub fn raw_margins(&self, row: &[f64]) -> Vec<f64> {
        let k = self.objective.n_outputs();
        let mut acc = self.base.clone();
        for (i, tree) in self.trees.iter().enumerate() {
            acc[i % k] += self.params.learning_rate * tree.predict(row);
        }
        acc
    }

    /// Margins using only the first `n_trees` trees, for diagnostics.
    pub fn margins_prefix(&self, row: &[f64], n_trees: usize) -> Vec<f64> {
        let k = self.objective.n_outputs();
        let mut acc = self.base.clone();
        for (i, tree) in self.trees.iter().take(n_trees).enumerate() {
            acc[i % k] += self.params.learning_rate * tree.predict(row);
        }
        acc
    }

    /// Fraud probability of one feature row (classification models).
    pub fn score(&self, row: &[f64]) -> f64 {
        sigmoid(self.raw_margins(row)[0])
    }

    /// All regression outputs for one input row.
    pub fn predict_multi(&self, row: &[f64]) -> Vec<f64> {
        self.raw_margins(row)
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Gathers the model's feature columns from an enriched feature vector.
    pub fn gather(&self, features: &[f64]) -> Vec<f64> {
        match &self.columns {
            Some(cols) => cols.iter().map(|&c| features[c]).collect(),
            None => features.to_vec(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = &self.params;
        writeln!(out, "{MODEL_MAGIC}").unwrap();
        match self.objective {
            Objective::Logistic => writeln!(out, "objective logistic").unwrap(),
            Objective::MultiSquaredError { n_outputs } => {
                writeln!(out, "objective multi {n_outputs}").unwrap()
            }
        }
        write!(out, "params {} {} {} {} {} {} {} {} {} {}", p.n_rounds, p.learning_rate,
            p.max_depth, p.lambda, p.min_child_weight, p.n_bins, p.feature_subsample,
            p.early_stopping_rounds, p.pauc_alpha, p.seed).unwrap();
        out.push('\n');
        write!(out, "base {}", self.base.len()).unwrap();
        for b in &self.base {
            write!(out, " {b}").unwrap();
        }
        out.push('\n');
        match &self.columns {
            None => writeln!(out, "columns none").unwrap(),
            Some(cols) => {
                write!(out, "columns {}", cols.len()).unwrap();
                for c in cols {
                    write!(out, " {c}").unwrap();
                }
                out.push('\n');
            }
        }
        match self.trained_norm_cap {
            None => writeln!(out, "norm_cap none").unwrap(),
            Some(v) => writeln!(out, "norm_cap {v}").unwrap(),
        }
        match self.threshold {
            None => writeln!(out, "threshold none").unwrap(),
            Some(v) => writeln!(out, "threshold {v}").unwrap(),
        }
        writeln!(out, "trees {}", self.trees.len()).unwrap();
        for tree in &self.trees {
            writeln!(out, "tree {}", tree.nodes.len()).unwrap();
            for node in &tree.nodes {
                if node.is_leaf {
                    writeln!(out, "leaf {}", node.value).unwrap();
                } else {
                    writeln!(
                        out,
                        "split {} {} {} {}",
                        node.feature, node.threshold, node.left, node.right
                    )
                    .unwrap();
                }
            }
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Model(format!("model parse: {msg}"));
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| bad(&format!("missing {what}")))
        };
        if next("header")? != MODEL_MAGIC {
            return Err(bad("unrecognized header"));
        }

        let objective_line = next("objective")?;
        let mut parts = objective_line.split_whitespace();
        if parts.next() != Some("objective") {
            return Err(bad("expected objective"));
        }
        let objective = match parts.next() {
            Some("logistic") => Objective::Logistic,
            Some("multi") => {
                let k: usize = parts
                    .next()
                    .ok_or_else(|| bad("missing output count"))?
                    .parse()
                    .map_err(|_| bad("output count"))?;
                Objective::MultiSquaredError { n_outputs: k }
            }
            _ => return Err(bad("unknown objective")),
        };

        let params_line = next("params")?;
        let tokens: Vec<&str> = params_line.split_whitespace().collect();
        if tokens.len() != 11 || tokens[0] != "params" {
            return Err(bad("params line"));
        }
        let fp = |s: &str| s.parse::<f64>().map_err(|_| bad("params number"));
        let ip = |s: &str| s.parse::<usize>().map_err(|_| bad("params integer"));
        let params = GbdtParams {
            n_rounds: ip(tokens[1])?,
            learning_rate: fp(tokens[2])?,
            max_depth: ip(tokens[3])?,
            lambda: fp(tokens[4])?,
            min_child_weight: fp(tokens[5])?,
            n_bins: ip(tokens[6])?,
            feature_subsample: fp(tokens[7])?,
            early_stopping_rounds: ip(tokens[8])?,
            pauc_alpha: fp(tokens[9])?,
            seed: tokens[10].parse().map_err(|_| bad("seed"))?,
        };

        let base_line = next("base")?;
        let mut parts = base_line.split_whitespace();
        if parts.next() != Some("base") {
            return Err(bad("expected base"));
        }
        let n_base: usize = parts.next().ok_or_else(|| bad("base count"))?.parse()
            .map_err(|_| bad("base count"))?;
        let base: Vec<f64> = parts
            .map(|t| t.parse::<f64>().map_err(|_| bad("base value")))
            .collect::<Result<_>>()?;
        if base.len() != n_base || n_base != objective.n_outputs() {
            return Err(bad("base width"));
        }

        let columns_line = next("columns")?;
        let mut parts = columns_line.split_whitespace();
        if parts.next() != Some("columns") {
            return Err(bad("expected columns"));
        }
        let columns = match parts.next() {
            Some("none") => None,
            Some(count) => {
                let n: usize = count.parse().map_err(|_| bad("columns count"))?;
                let cols: Vec<usize> = parts
                    .map(|t| t.parse::<usize>().map_err(|_| bad("column index")))
                    .collect::<Result<_>>()?;
                if cols.len() != n {
                    return Err(bad("columns count mismatch"));
                }
                Some(cols)
            }
            None => return Err(bad("columns line")),
        };

        let parse_opt = |line: &str, key: &str| -> Result<Option<f64>> {
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected {key}")));
            }
            match parts.next() {
                Some("none") => Ok(None),
                Some(v) => Ok(Some(v.parse().map_err(|_| bad(key))?)),
                None => Err(bad(key)),
            }
        };
        let trained_norm_cap = parse_opt(next("norm_cap")?, "norm_cap")?;
        let threshold = parse_opt(next("threshold")?, "threshold")?;

        let trees_line = next("trees")?;
        let n_trees: usize = trees_line
            .strip_prefix("trees ")
            .ok_or_else(|| bad("expected trees"))?
            .parse()
            .map_err(|_| bad("tree count"))?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let header = next("tree header")?;
            let n_nodes: usize = header
                .strip_prefix("tree ")
                .ok_or_else(|| bad("expected tree"))?
                .parse()
                .map_err(|_| bad("node count"))?;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let line = next("node")?;
                let tokens: Vec<&str> = line.split_whitespace().collect();
                match tokens.as_slice() {
                    ["leaf", v] => nodes.push(Node {
                        feature: 0,
                        threshold: 0.0,
                        left: 0,
                        right: 0,
                        value: v.parse().map_err(|_| bad("leaf value"))?,
                        is_leaf: true,
                    }),
                    ["split", f, t, l, r] => nodes.push(Node {
                        feature: f.parse().map_err(|_| bad("split feature"))?,
                        threshold: t.parse().map_err(|_| bad("split threshold"))?,
                        left: l.parse().map_err(|_| bad("split left"))?,
                        right: r.parse().map_err(|_| bad("split right"))?,
                        value: 0.0,
                        is_leaf: false,
                    }),
                    _ => return Err(bad("node line")),
                }
            }
            for node in &nodes {
                if !node.is_leaf
                    && (node.left as usize >= nodes.len() || node.right as usize >= nodes.len())
                {
                    return Err(bad("child index out of range"));
                }
            }
            trees.push(Tree { nodes });
        }
        if next("end")? != "end" {
            return Err(bad("missing end marker"));
        }
        Ok(GbdtModel { params, objective, base, trees, columns, trained_norm_cap, threshold })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingPrerequisite(format!("model file {}: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }
}

impl Scorer for GbdtModel {
    fn score_enriched(&self, row: &EnrichedRow) -> f64 {
        match &self.columns {
            Some(_) => self.score(&self.gather(&row.features)),
            None => self.score(&row.features),
        }
    }
}
