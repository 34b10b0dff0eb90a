//! Transaction schema, dataset container, CSV persistence, and chronological
//! splitting.
//!
//! Rows are card-not-present payment events. Categorical fields are stored as
//! integer codes into fixed vocabularies; the CSV form uses the vocabulary
//! strings. Datasets are kept sorted by `(timestamp, event_id)` and that order
//! is the basis for every windowed computation downstream.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const MS_PER_HOUR: i64 = 3_600_000;
pub const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;
pub const MS_PER_WEEK: i64 = 7 * MS_PER_DAY;

pub const CARD_NETWORKS: [&str; 4] = ["vera", "mastro", "axiom", "dispatch"];
pub const CVV_RESULTS: [&str; 3] = ["match", "mismatch", "missing"];
pub const MERCHANT_CATEGORIES: [&str; 12] = [
    "grocery",
    "restaurant",
    "fuel",
    "electronics",
    "fashion",
    "travel",
    "digital_goods",
    "gift_cards",
    "health",
    "entertainment",
    "home",
    "services",
];
pub const IP_NETWORKS: [&str; 16] = [
    "net00", "net01", "net02", "net03", "net04", "net05", "net06", "net07", "net08", "net09",
    "net10", "net11", "net12", "net13", "net14", "net15",
];

pub const CVV_MATCH: u8 = 0;
pub const CVV_MISMATCH: u8 = 1;
pub const CVV_MISSING: u8 = 2;

/// card_id given to a victim row after a card reset or switch. Guaranteed not
/// to collide with generated ids, which are assigned from 0 upward.
pub const FRESH_CARD_ID: u32 = u32::MAX;

/// One payment event. `card_network` is fixed per card and `cvv_match` follows
/// a per-card distribution, so card-level fields are internally consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub event_id: u64,
    pub timestamp: i64,
    pub amount: f64,
    pub card_id: u32,
    pub card_network: u8,
    pub cvv_match: u8,
    pub merchant_id: u32,
    pub merchant_category: u8,
    pub latitude: f64,
    pub longitude: f64,
    pub ip_network: u8,
    pub label: u8,
}

impl Transaction {
    /// Sort key shared by every windowed computation: time, then event id.
    pub fn sort_key(&self) -> (i64, u64) {
        (self.timestamp, self.event_id)
    }
}

/// Profile grouping key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKey {
    Card,
    Merchant,
}

impl GroupKey {
    pub fn name(&self) -> &'static str {
        match self {
            GroupKey::Card => "card",
            GroupKey::Merchant => "merchant",
        }
    }

    /// The grouping id this key reads off a row.
    pub fn value(&self, tx: &Transaction) -> u32 {
        match self {
            GroupKey::Card => tx.card_id,
            GroupKey::Merchant => tx.merchant_id,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "card" => Ok(GroupKey::Card),
            "merchant" => Ok(GroupKey::Merchant),
            other => Err(Error::Plan(format!("unknown group key '{other}'"))),
        }
    }
}

/// Time-sorted collection of transactions.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    rows: Vec<Transaction>,
}

impl Dataset {
    /// Sorts rows into canonical order and validates field domains.
    pub fn from_rows(mut rows: Vec<Transaction>) -> Result<Self> {
        rows.sort_by_key(|tx| tx.sort_key());
        for w in rows.windows(2) {
            if w[0].event_id == w[1].event_id {
                return Err(Error::Data(format!("duplicate event_id {}", w[0].event_id)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for tx in &rows {
            validate_row(tx)?;
            if !seen.insert(tx.event_id) {
                return Err(Error::Data(format!("duplicate event_id {}", tx.event_id)));
            }
        }
        Ok(Dataset { rows })
    }

    pub fn rows(&self) -> &[Transaction] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn start_ms(&self) -> Option<i64> {
        self.rows.first().map(|tx| tx.timestamp)
    }

    pub fn end_ms(&self) -> Option<i64> {
        self.rows.last().map(|tx| tx.timestamp)
    }

    pub fn fraud_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let pos = self.rows.iter().filter(|tx| tx.label == 1).count();
        pos as f64 / self.rows.len() as f64
    }

    /// Index of the row with this event id, if present.
    pub fn position_of(&self, event_id: u64) -> Option<usize> {
        // ids are assigned in sort order by the generator, but loaded data may
        // not follow that convention, so fall back to a scan.
        if let Some(tx) = self.rows.get(event_id as usize) {
            if tx.event_id == event_id {
                return Some(event_id as usize);
            }
        }
        self.rows.iter().position(|tx| tx.event_id == event_id)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "event_id,timestamp,amount,card_id,card_network,cvv_match,merchant_id,\
             merchant_category,latitude,longitude,ip_network,label"
        )?;
        for tx in &self.rows {
            writeln!(
                w,
                "{},{},{:.6},{},{},{},{},{},{:.6},{:.6},{},{}",
                tx.event_id,
                tx.timestamp,
                tx.amount,
                tx.card_id,
                CARD_NETWORKS[tx.card_network as usize],
                CVV_RESULTS[tx.cvv_match as usize],
                tx.merchant_id,
                MERCHANT_CATEGORIES[tx.merchant_category as usize],
                tx.latitude,
                tx.longitude,
                IP_NETWORKS[tx.ip_network as usize],
                tx.label,
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty dataset file".into()))??;
        let expected = "event_id,timestamp,amount,card_id,card_network,cvv_match,merchant_id,\
                        merchant_category,latitude,longitude,ip_network,label";
        if header.trim() != expected {
            return Err(Error::Data(format!("unexpected dataset header '{header}'")));
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 12 {
                return Err(Error::Data(format!(
                    "line {}: expected 12 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let tx = Transaction {
                event_id: parse_field(fields[0], "event_id", lineno)?,
                timestamp: parse_field(fields[1], "timestamp", lineno)?,
                amount: parse_field(fields[2], "amount", lineno)?,
                card_id: parse_field(fields[3], "card_id", lineno)?,
                card_network: vocab_code(&CARD_NETWORKS, fields[4], "card_network")?,
                cvv_match: vocab_code(&CVV_RESULTS, fields[5], "cvv_match")?,
                merchant_id: parse_field(fields[6], "merchant_id", lineno)?,
                merchant_category: vocab_code(&MERCHANT_CATEGORIES, fields[7], "merchant_category")?,
                latitude: parse_field(fields[8], "latitude", lineno)?,
                longitude: parse_field(fields[9], "longitude", lineno)?,
                ip_network: vocab_code(&IP_NETWORKS, fields[10], "ip_network")?,
                label: parse_field(fields[11], "label", lineno)?,
            };
            rows.push(tx);
        }
        Dataset::from_rows(rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::MissingPrerequisite(format!("dataset file {}: {e}", path.display()))
        })?;
        Self::read_csv(BufReader::new(file))
    }
}

fn validate_row(tx: &Transaction) -> Result<()> {
    if !tx.amount.is_finite() || tx.amount <= 0.0 {
        return Err(Error::Data(format!(
            "event {}: amount must be positive and finite, got {}",
            tx.event_id, tx.amount
        )));
    }
    if !(-90.0..=90.0).contains(&tx.latitude) || !(-180.0..=180.0).contains(&tx.longitude) {
        return Err(Error::Data(format!(
            "event {}: coordinates out of range ({}, {})",
            tx.event_id, tx.latitude, tx.longitude
        )));
    }
    if tx.card_network as usize >= CARD_NETWORKS.len()
        || tx.cvv_match as usize >= CVV_RESULTS.len()
        || tx.merchant_category as usize >= MERCHANT_CATEGORIES.len()
        || tx.ip_network as usize >= IP_NETWORKS.len()
    {
        return Err(Error::Data(format!("event {}: categorical code out of vocabulary", tx.event_id)));
    }
    if tx.label > 1 {
        return Err(Error::Data(format!("event {}: label must be 0 or 1", tx.event_id)));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, lineno: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Data(format!("line {}: bad {name} value '{s}'", lineno + 2)))
}

fn vocab_code(vocab: &[&str], value: &str, field: &str) -> Result<u8> {
    vocab
        .iter()
        .position(|v| *v == value.trim())
        .map(|i| i as u8)
        .ok_or_else(|| Error::Data(format!("unknown {field} value '{value}'")))
}

/// Week counts for the chronological split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitWeeks {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitWeeks {
    fn default() -> Self {
        SplitWeeks { train: 10, validation: 4, test: 6 }
    }
}

/// Contiguous index ranges into a dataset's sorted rows. Rows past the end of
/// the test window belong to no range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SplitIndices {
    pub fn ranges(&self) -> [&Range<usize>; 3] {
        [&self.train, &self.validation, &self.test]
    }
}

/// Splits by timestamp boundaries at whole weeks from the first row. Row
/// ranges are half-open, so a row on a boundary falls into the later split.
pub fn split(ds: &Dataset, weeks: SplitWeeks) -> Result<SplitIndices> {
    let start = ds
        .start_ms()
        .ok_or_else(|| Error::Data("cannot split an empty dataset".into()))?;
    let end = ds.end_ms().unwrap();
    let horizon_weeks = ((end - start) / MS_PER_WEEK + 1) as u32;
    let total = weeks.train + weeks.validation + weeks.test;
    if total == 0 {
        return Err(Error::Config("split weeks sum to zero".into()));
    }
    if total > horizon_weeks {
        return Err(Error::Config(format!(
            "split weeks {total} exceed dataset horizon of {horizon_weeks} weeks"
        )));
    }
    let b1 = start + weeks.train as i64 * MS_PER_WEEK;
    let b2 = b1 + weeks.validation as i64 * MS_PER_WEEK;
    let b3 = b2 + weeks.test as i64 * MS_PER_WEEK;
    let rows = ds.rows();
    let i1 = rows.partition_point(|tx| tx.timestamp < b1);
    let i2 = rows.partition_point(|tx| tx.timestamp < b2);
    let i3 = rows.partition_point(|tx| tx.timestamp < b3);
    Ok(SplitIndices { train: 0..i1, validation: i1..i2, test: i2..i3 })
}

/// Per-entity event lists: for each card and merchant, the indices of its rows
/// in dataset order. Backbone of single-row recomputation and of the exact
/// propagation path.
#[derive(Debug, Clone, Default)]
pub struct EntityIndex {
    cards: HashMap<u32, Vec<u32>>,
    merchants: HashMap<u32, Vec<u32>>,
}

impl EntityIndex {
    pub fn build(ds: &Dataset) -> Self {
        let mut cards: HashMap<u32, Vec<u32>> = HashMap::new();
        let mut merchants: HashMap<u32, Vec<u32>> = HashMap::new();
        for (i, tx) in ds.rows().iter().enumerate() {
            cards.entry(tx.card_id).or_default().push(i as u32);
            merchants.entry(tx.merchant_id).or_default().push(i as u32);
        }
        EntityIndex { cards, merchants }
    }

    /// Row indices for this entity, ascending in dataset order.
    pub fn events(&self, key: GroupKey, id: u32) -> &[u32] {
        static EMPTY: Vec<u32> = Vec::new();
        let map = match key {
            GroupKey::Card => &self.cards,
            GroupKey::Merchant => &self.merchants,
        };
        map.get(&id).unwrap_or(&EMPTY)
    }

    pub fn n_groups(&self, key: GroupKey) -> usize {
        match key {
            GroupKey::Card => self.cards.len(),
            GroupKey::Merchant => self.merchants.len(),
        }
    }
}

/// UTC hour of day for a millisecond timestamp.
pub fn hour_of_day(timestamp_ms: i64) -> f64 {
    (timestamp_ms.div_euclid(MS_PER_HOUR).rem_euclid(24)) as f64
}
