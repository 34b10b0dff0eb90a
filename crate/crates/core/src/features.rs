//! Feature plans and their computation.
//!
//! A plan is an ordered list of named feature specs of three kinds: row maps
//! (pure functions of one row), profiles (sliding-window aggregations of the
//! amount, grouped by card or merchant), and higher-order features (functions
//! of previously declared features). Profiles use trailing windows `(t-w, t]`
//! that include the event itself; ties in timestamp are broken by event id,
//! so an event sees same-timestamp events with smaller ids but not larger.
//!
//! `compute_features` runs one streaming pass over the time-sorted dataset
//! with per-entity ring buffers, amortized O(total events) per window spec.
//! `recompute_row` answers "what would this row's features be if its raw
//! fields were these instead", with every other row left untouched; it is the
//! ground truth that estimator training and exact attack propagation are
//! measured against.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use crate::data::{hour_of_day, Dataset, EntityIndex, GroupKey, Transaction, MS_PER_HOUR};
use crate::error::{Error, Result};

const MS_PER_MINUTE: i64 = 60_000;
const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;
const MS_PER_WEEK: i64 = 7 * MS_PER_DAY;

/// Pure per-row features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowMapFn {
    Amount,
    LogAmount,
    HourOfDay,
    GeoCell,
    CardNetwork,
    CvvMatch,
    MerchantCategory,
    IpNetwork,
}

impl RowMapFn {
    pub fn name(&self) -> &'static str {
        match self {
            RowMapFn::Amount => "amount",
            RowMapFn::LogAmount => "log_amount",
            RowMapFn::HourOfDay => "hour_of_day",
            RowMapFn::GeoCell => "geo_cell",
            RowMapFn::CardNetwork => "card_network",
            RowMapFn::CvvMatch => "cvv_match",
            RowMapFn::MerchantCategory => "merchant_category",
            RowMapFn::IpNetwork => "ip_network",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "amount" => RowMapFn::Amount,
            "log_amount" => RowMapFn::LogAmount,
            "hour_of_day" => RowMapFn::HourOfDay,
            "geo_cell" => RowMapFn::GeoCell,
            "card_network" => RowMapFn::CardNetwork,
            "cvv_match" => RowMapFn::CvvMatch,
            "merchant_category" => RowMapFn::MerchantCategory,
            "ip_network" => RowMapFn::IpNetwork,
            other => return Err(Error::Plan(format!("unknown row map '{other}'"))),
        })
    }
}

/// Window aggregations over the amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Count,
    Sum,
    Mean,
    Stddev,
    Max,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Count => "count",
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
            Aggregation::Stddev => "stddev",
            Aggregation::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "count" => Aggregation::Count,
            "sum" => Aggregation::Sum,
            "mean" => Aggregation::Mean,
            "stddev" => Aggregation::Stddev,
            "max" => Aggregation::Max,
            other => return Err(Error::Plan(format!("unknown aggregation '{other}'"))),
        })
    }

    /// Reads this aggregation off accumulated window stats.
    pub fn of(&self, stats: &WindowStats) -> f64 {
        match self {
            Aggregation::Count => stats.count,
            Aggregation::Sum => stats.sum,
            Aggregation::Mean => stats.mean(),
            Aggregation::Stddev => stats.stddev(),
            Aggregation::Max => stats.max,
        }
    }
}

/// One feature spec. Higher-order kinds hold resolved indices of earlier
/// features in the same plan.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    RowMap(RowMapFn),
    Profile { agg: Aggregation, group: GroupKey, window_ms: i64, stat_idx: usize },
    ZScore { value: usize, mean: usize, std: usize },
    Ratio { numer: usize, denom: usize, offset: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn is_profile(&self) -> bool {
        matches!(self.kind, FeatureKind::Profile { .. })
    }
}

/// Validated, ordered feature plan.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlan {
    specs: Vec<FeatureSpec>,
    /// Distinct (group, window) pairs used by profile specs.
    stat_sets: Vec<(GroupKey, i64)>,
}

/// Raw accumulators for one (group, window) pair at one row: the ingredients
/// every aggregation is derived from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub count: f64,
    pub sum: f64,
    pub sumsq: f64,
    pub max: f64,
}

impl WindowStats {
    /// Stats of a window holding exactly one event of this amount.
    pub fn single(amount: f64) -> Self {
        WindowStats { count: 1.0, sum: amount, sumsq: amount * amount, max: amount }
    }

    pub fn mean(&self) -> f64 {
        if self.count > 0.0 {
            self.sum / self.count
        } else {
            0.0
        }
    }

    /// Population standard deviation; exactly 0 for singletons.
    pub fn stddev(&self) -> f64 {
        if self.count <= 1.0 {
            return 0.0;
        }
        let m = self.mean();
        (self.sumsq / self.count - m * m).max(0.0).sqrt()
    }

    /// Replaces one contribution `old` by `new`, leaving membership intact.
    pub fn replace_amount(&mut self, old: f64, new: f64) {
        self.sum += new - old;
        self.sumsq += new * new - old * old;
        // A shrinking contribution cannot be resolved associatively; the max
        // keeps its old value, which is exact unless the row held it alone.
        if new >= old {
            self.max = self.max.max(new);
        }
    }
}

/// One row with computed features and per-(group, window) raw stats.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedRow {
    pub base: Transaction,
    pub features: Vec<f64>,
    pub stats: Vec<WindowStats>,
}

#[derive(Debug, Clone)]
pub struct EnrichedDataset {
    pub plan: FeaturePlan,
    pub rows: Vec<EnrichedRow>,
}

impl FeaturePlan {
    pub fn new(specs: Vec<FeatureSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Plan("feature plan is empty".into()));
        }
        let mut stat_sets: Vec<(GroupKey, i64)> = Vec::new();
        let mut resolved = Vec::with_capacity(specs.len());
        let mut names: HashMap<String, usize> = HashMap::new();
        for (i, mut spec) in specs.into_iter().enumerate() {
            if spec.name.is_empty() || spec.name.contains([' ', ',', '\t']) {
                return Err(Error::Plan(format!("bad feature name '{}'", spec.name)));
            }
            if names.insert(spec.name.clone(), i).is_some() {
                return Err(Error::Plan(format!("duplicate feature name '{}'", spec.name)));
            }
            match &mut spec.kind {
                FeatureKind::Profile { window_ms, group, stat_idx, .. } => {
                    if *window_ms <= 0 {
                        return Err(Error::Plan(format!(
                            "feature '{}': window must be positive",
                            spec.name
                        )));
                    }
                    let key = (*group, *window_ms);
                    *stat_idx = match stat_sets.iter().position(|s| *s == key) {
                        Some(p) => p,
                        None => {
                            stat_sets.push(key);
                            stat_sets.len() - 1
                        }
                    };
                }
                FeatureKind::ZScore { value, mean, std } => {
                    for r in [*value, *mean, *std] {
                        if r >= i {
                            return Err(Error::Plan(format!(
                                "feature '{}': references a feature not declared earlier",
                                spec.name
                            )));
                        }
                    }
                }
                FeatureKind::Ratio { numer, denom, .. } => {
                    for r in [*numer, *denom] {
                        if r >= i {
                            return Err(Error::Plan(format!(
                                "feature '{}': references a feature not declared earlier",
                                spec.name
                            )));
                        }
                    }
                }
                FeatureKind::RowMap(_) => {}
            }
            resolved.push(spec);
        }
        Ok(FeaturePlan { specs: resolved, stat_sets })
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn stat_sets(&self) -> &[(GroupKey, i64)] {
        &self.stat_sets
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Indices of profile features, in plan order.
    pub fn profile_indices(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_profile())
            .map(|(i, _)| i)
            .collect()
    }

    /// The default plan: card velocity profiles over short windows, merchant
    /// volume profiles over long ones, raw-field maps, amount normalizations
    /// against card history, and a merchant activity normalization against the
    /// merchant's own monthly volume.
    pub fn default_plan() -> Self {
        let mut text = String::new();
        for f in [
            "amount", "log_amount", "hour_of_day", "geo_cell", "card_network", "cvv_match",
            "merchant_category", "ip_network",
        ] {
            text.push_str(&format!("rowmap {f} {f}\n"));
        }
        for w in ["1h", "24h", "7d"] {
            for a in ["count", "sum", "mean", "stddev"] {
                text.push_str(&format!("profile card_{a}_{w} {a} card {w}\n"));
            }
        }
        for w in ["24h", "30d"] {
            for a in ["count", "sum"] {
                text.push_str(&format!("profile merchant_{a}_{w} {a} merchant {w}\n"));
            }
        }
        text.push_str("higher amount_z_7d zscore amount card_mean_7d card_stddev_7d\n");
        text.push_str("higher amount_ratio_24h ratio amount card_mean_24h 1\n");
        text.push_str("higher merchant_volume_ratio ratio merchant_count_24h merchant_count_30d 1\n");
        Self::parse(&text).expect("default plan must parse")
    }

    /// Parses the plain-text plan format: one spec per line, `#` comments.
    ///
    /// ```text
    /// rowmap  <name> <func>
    /// profile <name> <agg> <group> <window>
    /// higher  <name> zscore <value> <mean> <std>
    /// higher  <name> ratio <numer> <denom> <offset>
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut specs: Vec<FeatureSpec> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let at = |i: usize| -> Result<&str> {
                f.get(i)
                    .copied()
                    .ok_or_else(|| Error::Plan(format!("line {}: missing field", lineno + 1)))
            };
            let resolve = |name: &str| -> Result<usize> {
                names.iter().position(|n| n == name).ok_or_else(|| {
                    Error::Plan(format!(
                        "line {}: '{name}' is not declared earlier in the plan",
                        lineno + 1
                    ))
                })
            };
            let kind = match at(0)? {
                "rowmap" => FeatureKind::RowMap(RowMapFn::parse(at(2)?)?),
                "profile" => FeatureKind::Profile {
                    agg: Aggregation::parse(at(2)?)?,
                    group: GroupKey::parse(at(3)?)?,
                    window_ms: parse_window(at(4)?)?,
                    stat_idx: 0,
                },
                "higher" => match at(2)? {
                    "zscore" => FeatureKind::ZScore {
                        value: resolve(at(3)?)?,
                        mean: resolve(at(4)?)?,
                        std: resolve(at(5)?)?,
                    },
                    "ratio" => FeatureKind::Ratio {
                        numer: resolve(at(3)?)?,
                        denom: resolve(at(4)?)?,
                        offset: at(5)?.parse().map_err(|_| {
                            Error::Plan(format!("line {}: bad ratio offset", lineno + 1))
                        })?,
                    },
                    other => {
                        return Err(Error::Plan(format!(
                            "line {}: unknown higher-order function '{other}'",
                            lineno + 1
                        )))
                    }
                },
                other => {
                    return Err(Error::Plan(format!("line {}: unknown spec kind '{other}'", lineno + 1)))
                }
            };
            names.push(at(1)?.to_string());
            specs.push(FeatureSpec { name: at(1)?.to_string(), kind });
        }
        Self::new(specs)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for spec in &self.specs {
            match &spec.kind {
                FeatureKind::RowMap(f) => {
                    out.push_str(&format!("rowmap {} {}\n", spec.name, f.name()))
                }
                FeatureKind::Profile { agg, group, window_ms, .. } => out.push_str(&format!(
                    "profile {} {} {} {}\n",
                    spec.name,
                    agg.name(),
                    group.name(),
                    format_window(*window_ms)
                )),
                FeatureKind::ZScore { value, mean, std } => out.push_str(&format!(
                    "higher {} zscore {} {} {}\n",
                    spec.name, self.specs[*value].name, self.specs[*mean].name, self.specs[*std].name
                )),
                FeatureKind::Ratio { numer, denom, offset } => out.push_str(&format!(
                    "higher {} ratio {} {} {}\n",
                    spec.name, self.specs[*numer].name, self.specs[*denom].name, offset
                )),
            }
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingPrerequisite(format!("feature plan {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }
}

pub fn parse_window(s: &str) -> Result<i64> {
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: i64 = num
        .parse()
        .map_err(|_| Error::Plan(format!("bad window '{s}'")))?;
    let factor = match unit {
        "ms" => 1,
        "m" => MS_PER_MINUTE,
        "h" => MS_PER_HOUR,
        "d" => MS_PER_DAY,
        "w" => MS_PER_WEEK,
        _ => return Err(Error::Plan(format!("bad window unit in '{s}'"))),
    };
    if n <= 0 {
        return Err(Error::Plan(format!("window '{s}' must be positive")));
    }
    Ok(n * factor)
}

pub fn format_window(ms: i64) -> String {
    for (factor, unit) in
        [(MS_PER_WEEK, "w"), (MS_PER_DAY, "d"), (MS_PER_HOUR, "h"), (MS_PER_MINUTE, "m")]
    {
        if ms % factor == 0 {
            return format!("{}{}", ms / factor, unit);
        }
    }
    format!("{ms}ms")
}

/// 10-degree grid cell id for coordinates; a coarse stand-in for a city id.
pub fn geo_cell(latitude: f64, longitude: f64) -> f64 {
    let lat_idx = (((latitude + 90.0) / 10.0).floor() as i64).clamp(0, 17);
    let lon_idx = (((longitude + 180.0) / 10.0).floor() as i64).clamp(0, 35);
    (lat_idx * 36 + lon_idx) as f64
}

pub fn row_map_value(func: RowMapFn, tx: &Transaction) -> f64 {
    match func {
        RowMapFn::Amount => tx.amount,
        RowMapFn::LogAmount => tx.amount.ln(),
        RowMapFn::HourOfDay => hour_of_day(tx.timestamp),
        RowMapFn::GeoCell => geo_cell(tx.latitude, tx.longitude),
        RowMapFn::CardNetwork => tx.card_network as f64,
        RowMapFn::CvvMatch => tx.cvv_match as f64,
        RowMapFn::MerchantCategory => tx.merchant_category as f64,
        RowMapFn::IpNetwork => tx.ip_network as f64,
    }
}

/// Evaluates a higher-order feature from already computed features. A zero
/// stddev yields a z-score of 0; a non-finite or zero denominator yields 0.
pub fn higher_value(kind: &FeatureKind, features: &[f64]) -> f64 {
    match kind {
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
        _ => unreachable!("not a higher-order feature"),
    }
}

/// Assembles the feature vector for one row given its window stats.
pub fn assemble_features(plan: &FeaturePlan, tx: &Transaction, stats: &[WindowStats]) -> Vec<f64> {
    let mut features = Vec::with_capacity(plan.len());
    for spec in plan.specs() {
        let v = match &spec.kind {
            FeatureKind::RowMap(f) => row_map_value(*f, tx),
            FeatureKind::Profile { agg, stat_idx, .. } => agg.of(&stats[*stat_idx]),
            higher => higher_value(higher, &features),
        };
        features.push(v);
    }
    features
}

/// Ring buffer over one entity's recent events for one window length.
#[derive(Debug, Default)]
struct EntityWindow {
    items: VecDeque<(i64, u64, f64)>,
    sum: f64,
    sumsq: f64,
    /// Decreasing (event_id, amount) pairs; front is the window max.
    maxq: VecDeque<(u64, f64)>,
}

impl EntityWindow {
    fn push(&mut self, t: i64, id: u64, amount: f64, window_ms: i64) {
        let cutoff = t - window_ms;
        while let Some(&(ts, eid, a)) = self.items.front() {
            if ts > cutoff {
                break;
            }
            self.items.pop_front();
            self.sum -= a;
            self.sumsq -= a * a;
            if self.maxq.front().map(|&(qid, _)| qid) == Some(eid) {
                self.maxq.pop_front();
            }
        }
        self.items.push_back((t, id, amount));
        self.sum += amount;
        self.sumsq += amount * amount;
        while let Some(&(_, back)) = self.maxq.back() {
            if back <= amount {
                self.maxq.pop_back();
            } else {
                break;
            }
        }
        self.maxq.push_back((id, amount));
    }

    fn stats(&self) -> WindowStats {
        WindowStats {
            count: self.items.len() as f64,
            sum: self.sum,
            sumsq: self.sumsq,
            max: self.maxq.front().map(|&(_, a)| a).unwrap_or(0.0),
        }
    }
}

/// Streaming pass over the whole dataset. Returns one enriched row per input
/// row, in dataset order.
pub fn compute_features(ds: &Dataset, plan: &FeaturePlan) -> Result<EnrichedDataset> {
    let n_sets = plan.stat_sets().len();
    let mut states: Vec<HashMap<u32, EntityWindow>> = (0..n_sets).map(|_| HashMap::new()).collect();
    let mut rows = Vec::with_capacity(ds.len());
    for tx in ds.rows() {
        let mut stats = Vec::with_capacity(n_sets);
        for (set_idx, (group, window_ms)) in plan.stat_sets().iter().enumerate() {
            let entity = group.value(tx);
            let state = states[set_idx].entry(entity).or_default();
            state.push(tx.timestamp, tx.event_id, tx.amount, *window_ms);
            stats.push(state.stats());
        }
        let features = assemble_features(plan, tx, &stats);
        rows.push(EnrichedRow { base: tx.clone(), features, stats });
    }
    Ok(EnrichedDataset { plan: plan.clone(), rows })
}

/// Recomputes one row's features as if its raw fields were `modified`, other
/// rows unchanged. The modified row replaces its original by event id; window
/// membership follows the perturbed `(timestamp, event_id)` sort position.
pub fn recompute_row(
    ds: &Dataset,
    index: &EntityIndex,
    plan: &FeaturePlan,
    modified: &Transaction,
) -> Result<EnrichedRow> {
    if ds.position_of(modified.event_id).is_none() {
        return Err(Error::Data(format!(
            "event_id {} not present in dataset",
            modified.event_id
        )));
    }
    let t = modified.timestamp;
    let vid = modified.event_id;
    let mut stats = Vec::with_capacity(plan.stat_sets().len());
    for (group, window_ms) in plan.stat_sets() {
        let entity = group.value(modified);
        let mut values = vec![modified.amount];
        for &ri in index.events(*group, entity) {
            let tx = &ds.rows()[ri as usize];
            if tx.event_id == vid {
                continue;
            }
            let in_past = tx.timestamp < t || (tx.timestamp == t && tx.event_id < vid);
            if in_past && tx.timestamp > t - window_ms {
                values.push(tx.amount);
            }
        }
        let count = values.len() as f64;
        let sum: f64 = values.iter().sum();
        let sumsq: f64 = values.iter().map(|v| v * v).sum();
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        stats.push(WindowStats { count, sum, sumsq, max });
    }
    let features = assemble_features(plan, modified, &stats);
    Ok(EnrichedRow { base: modified.clone(), features, stats })
}

impl EnrichedDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Positions of label-1 rows within `range`.
    pub fn positives_in(&self, range: std::ops::Range<usize>) -> Vec<usize> {
        range.filter(|&i| self.rows[i].base.label == 1).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(
            w,
            "event_id,timestamp,amount,card_id,card_network,cvv_match,merchant_id,\
             merchant_category,latitude,longitude,ip_network,label"
        )?;
        for name in self.plan.names() {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for row in &self.rows {
            let tx = &row.base;
            write!(
                w,
                "{},{},{:.6},{},{},{},{},{},{:.6},{:.6},{},{}",
                tx.event_id,
                tx.timestamp,
                tx.amount,
                tx.card_id,
                crate::data::CARD_NETWORKS[tx.card_network as usize],
                crate::data::CVV_RESULTS[tx.cvv_match as usize],
                tx.merchant_id,
                crate::data::MERCHANT_CATEGORIES[tx.merchant_category as usize],
                tx.latitude,
                tx.longitude,
                crate::data::IP_NETWORKS[tx.ip_network as usize],
                tx.label,
            )?;
            for v in &row.features {
                write!(w, ",{v:.6}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}
