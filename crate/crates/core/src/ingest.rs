//! Check-in parsing, iterative filtering, chronological splitting and
//! per-POI aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use chrono::{DateTime, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
/// Foursquare dumps: `Tue Apr 03 18:00:09 +0000 2012`.
pub const FOURSQUARE_TIME_FORMAT: &str = "%a %b %d %H:%M:%S %z %Y";

pub(crate) mod timestamp_format {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    const FORMAT: &str = "%Y-%m-%d %H:%M:%S";

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&t.format(FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveDateTime::parse_from_str(&raw, FORMAT).map_err(serde::de::Error::custom)
    }
}

/// One visit event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user_id: String,
    pub poi_id: String,
    #[serde(with = "timestamp_format")]
    pub timestamp: NaiveDateTime,
    pub category: String,
    pub latitude: f64,
    pub longitude: f64,
}

/// Zero-based column positions of the fields in a delimited check-in file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub user: usize,
    pub poi: usize,
    pub time: usize,
    pub category: usize,
    pub latitude: usize,
    pub longitude: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatSpec {
    pub delimiter: u8,
    pub has_header: bool,
    pub columns: ColumnMap,
    pub time_format: String,
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self {
            delimiter: b'\t',
            has_header: false,
            columns: ColumnMap {
                user: 0,
                poi: 1,
                time: 2,
                category: 3,
                latitude: 4,
                longitude: 5,
            },
            time_format: DEFAULT_TIME_FORMAT.to_string(),
        }
    }
}

impl FormatSpec {
    /// Layout of the public Foursquare NYC/TKY dumps.
    pub fn foursquare() -> Self {
        Self {
            delimiter: b'\t',
            has_header: false,
            columns: ColumnMap {
                user: 0,
                poi: 1,
                time: 7,
                category: 3,
                latitude: 4,
                longitude: 5,
            },
            time_format: FOURSQUARE_TIME_FORMAT.to_string(),
        }
    }

    fn parse_time(&self, raw: &str) -> Option<NaiveDateTime> {
        let try_format = |fmt: &str| {
            NaiveDateTime::parse_from_str(raw, fmt)
                .ok()
                .or_else(|| DateTime::parse_from_str(raw, fmt).ok().map(|t| t.naive_local()))
        };
        try_format(&self.time_format)
            .or_else(|| try_format(DEFAULT_TIME_FORMAT))
            .or_else(|| try_format(FOURSQUARE_TIME_FORMAT))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub checkins: Vec<CheckIn>,
    pub rejects: Vec<RejectedRow>,
    pub rows: usize,
}

impl ParseOutcome {
    pub fn write_rejects(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "rows\t{}\naccepted\t{}\nrejected\t{}",
            self.rows,
            self.checkins.len(),
            self.rejects.len()
        )?;
        for r in &self.rejects {
            writeln!(w, "line {}: {}", r.line, r.reason)?;
        }
        Ok(())
    }
}

fn parse_row(record: &csv::StringRecord, spec: &FormatSpec) -> std::result::Result<CheckIn, String> {
    let c = &spec.columns;
    let field = |idx: usize, name: &str| -> std::result::Result<&str, String> {
        match record.get(idx).map(str::trim) {
            Some("") => Err(format!("empty {name}")),
            Some(v) => Ok(v),
            None => Err(format!("missing {name} column {idx}")),
        }
    };
    let user_id = field(c.user, "user")?;
    let poi_id = field(c.poi, "poi")?;
    let category = field(c.category, "category")?;
    let raw_time = field(c.time, "timestamp")?;
    let timestamp = spec
        .parse_time(raw_time)
        .ok_or_else(|| format!("unparseable timestamp `{raw_time}`"))?;
    let latitude: f64 = field(c.latitude, "latitude")?
        .parse()
        .map_err(|_| "unparseable latitude".to_string())?;
    let longitude: f64 = field(c.longitude, "longitude")?
        .parse()
        .map_err(|_| "unparseable longitude".to_string())?;
    if !(-90.0..=90.0).contains(&latitude) {
        return Err(format!("latitude {latitude} out of range"));
    }
    if !(-180.0..=180.0).contains(&longitude) {
        return Err(format!("longitude {longitude} out of range"));
    }
    Ok(CheckIn {
        user_id: user_id.to_string(),
        poi_id: poi_id.to_string(),
        timestamp,
        category: category.to_string(),
        latitude,
        longitude,
    })
}

/// Parses a delimited check-in log. Malformed rows are collected in the
/// rejects report; more than half the rows rejected is a hard error.
pub fn parse_checkins(input: impl Read, spec: &FormatSpec) -> Result<ParseOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter)
        .has_headers(spec.has_header)
        .flexible(true)
        .quoting(spec.delimiter != b'\t')
        .from_reader(input);
    let mut checkins = Vec::new();
    let mut rejects = Vec::new();
    let mut rows = 0usize;
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map(|p| p.line()).unwrap_or(line);
                if record.len() == 1 && record[0].trim().is_empty() {
                    continue;
                }
                rows += 1;
                match parse_row(&record, spec) {
                    Ok(c) => checkins.push(c),
                    Err(reason) => rejects.push(RejectedRow { line, reason }),
                }
            }
            Err(e) if matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) => {
                rows += 1;
                rejects.push(RejectedRow {
                    line: e.position().map(|p| p.line()).unwrap_or(line),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(Error::Parse(e.to_string())),
        }
    }
    if rejects.len() * 2 > rows {
        return Err(Error::TooManyRejects {
            rejected: rejects.len(),
            total: rows,
        });
    }
    Ok(ParseOutcome {
        checkins,
        rejects,
        rows,
    })
}

/// Aggregated metadata of one POI, computed from training check-ins only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub poi_id: String,
    pub category_id: usize,
    pub latitude: f64,
    pub longitude: f64,
    pub visit_count: u32,
    pub visitor_histogram: BTreeMap<String, u32>,
    pub hour_histogram: [u32; 24],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub min_poi_interactions: usize,
    pub min_user_checkins: usize,
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            min_poi_interactions: 10,
            min_user_checkins: 10,
            ratios: [0.8, 0.1, 0.1],
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::Config(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                self.ratios
            )));
        }
        Ok(())
    }
}

pub type UserSequences = BTreeMap<String, Vec<CheckIn>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub input_events: usize,
    pub kept_events: usize,
    /// Number of filter/split rounds until no validation or test event
    /// referenced an unseen user or POI.
    pub rounds: usize,
    pub dropped_unseen: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: UserSequences,
    pub validation: UserSequences,
    pub test: UserSequences,
    pub category_vocab: Vec<String>,
    pub user_vocab: Vec<String>,
    pub poi_table: BTreeMap<String, PoiRecord>,
    pub report: SplitReport,
}

impl DatasetSplit {
    pub fn category_name(&self, poi: &PoiRecord) -> &str {
        &self.category_vocab[poi.category_id]
    }

    /// Every event of `user` across all three splits, in chronological order.
    pub fn full_sequence(&self, user: &str) -> Vec<&CheckIn> {
        [&self.train, &self.validation, &self.test]
            .iter()
            .filter_map(|s| s.get(user))
            .flatten()
            .collect()
    }
}

/// Removes POIs and users below the thresholds until neither removal
/// changes the event set.
pub fn filter_to_fixpoint(
    mut events: Vec<CheckIn>,
    min_poi_interactions: usize,
    min_user_checkins: usize,
) -> Vec<CheckIn> {
    loop {
        let before = events.len();
        let mut poi_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *poi_counts.entry(&e.poi_id).or_default() += 1;
        }
        let keep_poi: HashSet<String> = poi_counts
            .into_iter()
            .filter(|(_, n)| *n >= min_poi_interactions)
            .map(|(p, _)| p.to_string())
            .collect();
        events.retain(|e| keep_poi.contains(&e.poi_id));

        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *user_counts.entry(&e.user_id).or_default() += 1;
        }
        let keep_user: HashSet<String> = user_counts
            .into_iter()
            .filter(|(_, n)| *n >= min_user_checkins)
            .map(|(u, _)| u.to_string())
            .collect();
        events.retain(|e| keep_user.contains(&e.user_id));
        if events.len() == before {
            return events;
        }
    }
}

fn chronological_key(a: &CheckIn, b: &CheckIn) -> std::cmp::Ordering {
    a.timestamp
        .cmp(&b.timestamp)
        .then_with(|| a.user_id.cmp(&b.user_id))
        .then_with(|| a.poi_id.cmp(&b.poi_id))
}

fn group_by_user(events: Vec<CheckIn>) -> UserSequences {
    let mut out = UserSequences::new();
    for e in events {
        out.entry(e.user_id.clone()).or_default().push(e);
    }
    out
}

/// Filters the log, sorts it globally by time and cuts it into
/// train/validation/test.
///
/// Validation and test events referring to a user or POI missing from train
/// are dropped; when that happens the remaining events are filtered and
/// split again so that the thresholds still hold on the final data.
pub fn filter_and_split(checkins: Vec<CheckIn>, cfg: &SplitConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let input_events = checkins.len();
    let mut events = checkins;
    let mut rounds = 0;
    let mut dropped_unseen = 0;
    let (train, validation, test) = loop {
        rounds += 1;
        events = filter_to_fixpoint(events, cfg.min_poi_interactions, cfg.min_user_checkins);
        events.sort_by(chronological_key);
        let n = events.len();
        let cut_train = (n as f64 * cfg.ratios[0]).round() as usize;
        let cut_val = ((n as f64 * (cfg.ratios[0] + cfg.ratios[1])).round() as usize).max(cut_train);
        let mut rest = events.split_off(cut_train.min(n));
        let train = events;
        if train.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        let test = rest.split_off((cut_val - cut_train).min(rest.len()));
        let validation = rest;

        let users: HashSet<&str> = train.iter().map(|e| e.user_id.as_str()).collect();
        let pois: HashSet<&str> = train.iter().map(|e| e.poi_id.as_str()).collect();
        let seen = |e: &CheckIn| users.contains(e.user_id.as_str()) && pois.contains(e.poi_id.as_str());
        let unseen = validation.iter().chain(&test).filter(|e| !seen(e)).count();
        if unseen == 0 {
            break (train, validation, test);
        }
        dropped_unseen += unseen;
        let validation: Vec<CheckIn> = validation.into_iter().filter(|e| seen(e)).collect();
        let test: Vec<CheckIn> = test.into_iter().filter(|e| seen(e)).collect();
        events = train;
        events.extend(validation);
        events.extend(test);
    };
    let kept_events = train.len() + validation.len() + test.len();
    let train = group_by_user(train);
    let aggregates = aggregate_pois(&train)?;
    Ok(DatasetSplit {
        user_vocab: train.keys().cloned().collect(),
        validation: group_by_user(validation),
        test: group_by_user(test),
        train,
        category_vocab: aggregates.category_vocab,
        poi_table: aggregates.poi_table,
        report: SplitReport {
            input_events,
            kept_events,
            rounds,
            dropped_unseen,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiAggregates {
    pub category_vocab: Vec<String>,
    pub poi_table: BTreeMap<String, PoiRecord>,
}

/// Builds per-POI visitor and hour-of-day histograms from training events.
///
/// A POI's category is its most frequent training category (ties to the
/// lexically smallest) and its coordinates come from its earliest training
/// check-in.
pub fn aggregate_pois(train: &UserSequences) -> Result<PoiAggregates> {
    if train.values().all(Vec::is_empty) {
        return Err(Error::EmptyTrainSplit);
    }
    struct Acc<'a> {
        first: &'a CheckIn,
        categories: BTreeMap<&'a str, u32>,
        visitors: BTreeMap<String, u32>,
        hours: [u32; 24],
    }
    let mut accs: BTreeMap<&str, Acc> = BTreeMap::new();
    for e in train.values().flatten() {
        let acc = accs.entry(&e.poi_id).or_insert_with(|| Acc {
            first: e,
            categories: BTreeMap::new(),
            visitors: BTreeMap::new(),
            hours: [0; 24],
        });
        if chronological_key(e, acc.first).is_lt() {
            acc.first = e;
        }
        *acc.categories.entry(&e.category).or_default() += 1;
        *acc.visitors.entry(e.user_id.clone()).or_default() += 1;
        acc.hours[e.timestamp.hour() as usize] += 1;
    }
    let modal = |cats: &BTreeMap<&str, u32>| -> String {
        let best = cats.values().copied().max().unwrap_or(0);
        cats.iter()
            .find(|(_, &n)| n == best)
            .map(|(c, _)| c.to_string())
            .unwrap_or_default()
    };
    let category_vocab: Vec<String> = accs
        .values()
        .map(|a| modal(&a.categories))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let category_index: HashMap<&str, usize> = category_vocab
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let poi_table = accs
        .into_iter()
        .map(|(poi, acc)| {
            let category = modal(&acc.categories);
            let record = PoiRecord {
                poi_id: poi.to_string(),
                category_id: category_index[category.as_str()],
                latitude: acc.first.latitude,
                longitude: acc.first.longitude,
                visit_count: acc.hours.iter().sum(),
                visitor_histogram: acc.visitors,
                hour_histogram: acc.hours,
            };
            (poi.to_string(), record)
        })
        .collect();
    Ok(PoiAggregates {
        category_vocab,
        poi_table,
    })
}

/// A held-out next visit and the check-ins that precede it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user_id: String,
    pub history: Vec<CheckIn>,
    pub target: CheckIn,
}

#[derive(Debug, Clone, Default)]
pub struct EvalCases {
    pub cases: Vec<EvalCase>,
    /// Users without any test event.
    pub skipped_users: usize,
}

/// For each user with test events, holds out the final test check-in and
/// takes up to `history_len` preceding events from the concatenated
/// train, validation and test sequences.
pub fn build_eval_instances(split: &DatasetSplit, history_len: usize) -> EvalCases {
    let mut out = EvalCases::default();
    for user in &split.user_vocab {
        if split.test.get(user).is_none_or(Vec::is_empty) {
            out.skipped_users += 1;
            continue;
        }
        let full = split.full_sequence(user);
        let (target, before) = full.split_last().expect("user has a test event");
        if before.is_empty() {
            out.skipped_users += 1;
            continue;
        }
        let start = before.len().saturating_sub(history_len);
        out.cases.push(EvalCase {
            user_id: user.clone(),
            history: before[start..].iter().map(|c| (*c).clone()).collect(),
            target: (*target).clone(),
        });
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRecord {
    split: String,
    #[serde(flatten)]
    checkin: CheckIn,
}

/// Writes all three splits as one JSON object per line, train first.
pub fn write_split_records(split: &DatasetSplit, mut w: impl Write) -> std::io::Result<()> {
    for (name, seqs) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        for c in seqs.values().flatten() {
            let rec = SplitRecord {
                split: name.to_string(),
                checkin: c.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reloads a split written by [`write_split_records`]; aggregates are
/// recomputed from the train records.
pub fn read_split_records(r: impl Read) -> Result<DatasetSplit> {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SplitRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("split record line {}: {e}", i + 1)))?;
        match rec.split.as_str() {
            "train" => train.push(rec.checkin),
            "validation" => validation.push(rec.checkin),
            "test" => test.push(rec.checkin),
            other => return Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
    let kept_events = train.len() + validation.len() + test.len();
    let train = group_by_user(train);
    let aggregates = aggregate_pois(&train)?;
    Ok(DatasetSplit {
        user_vocab: train.keys().cloned().collect(),
        validation: group_by_user(validation),
        test: group_by_user(test),
        train,
        category_vocab: aggregates.category_vocab,
        poi_table: aggregates.poi_table,
        report: SplitReport {
            input_events: kept_events,
            kept_events,
            rounds: 0,
            dropped_unseen: 0,
        },
    })
}

#[derive(Serialize)]
struct PoiLine<'a> {
    #[serde(flatten)]
    record: &'a PoiRecord,
    category: &'a str,
}

pub fn write_poi_table(split: &DatasetSplit, mut w: impl Write) -> std::io::Result<()> {
    for rec in split.poi_table.values() {
        let line = PoiLine {
            record: rec,
            category: split.category_name(rec),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, NaiveDate};

    fn ts(day: u32, hour: u32, min: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2012, 4, day)
            .unwrap()
            .and_hms_opt(hour, min, 0)
            .unwrap()
    }

    fn checkin(user: &str, poi: &str, t: NaiveDateTime) -> CheckIn {
        CheckIn {
            user_id: user.into(),
            poi_id: poi.into(),
            timestamp: t,
            category: "Cafe".into(),
            latitude: 40.7,
            longitude: -74.0,
        }
    }

    #[test]
    fn parses_well_formed_rows() {
        let raw = "u1\tp1\t2012-04-03 18:00:09\tCafe\t40.7\t-74.0\n\
                   u2\tp2\t2012-04-03 19:00:00\tBar\t40.8\t-73.9\n\
                   u1\tp2\t2012-04-04 08:30:00\tBar\t40.8\t-73.9\n";
        let out = parse_checkins(raw.as_bytes(), &FormatSpec::default()).unwrap();
        assert_eq!(out.checkins.len(), 3);
        assert_eq!(out.rows, 3);
        assert!(out.rejects.is_empty());
        assert_eq!(out.checkins[2].timestamp, ts(4, 8, 30));
    }

    #[test]
    fn out_of_range_latitude_is_rejected() {
        let raw = "u1\tp1\t2012-04-03 18:00:09\tCafe\t40.7\t-74.0\n\
                   u1\tp1\t2012-04-03 18:00:09\tCafe\t91.0\t-74.0\n\
                   u1\tp1\t2012-04-03 18:00:09\tCafe\t40.7\t-74.0\n";
        let out = parse_checkins(raw.as_bytes(), &FormatSpec::default()).unwrap();
        assert_eq!(out.checkins.len(), 2);
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].line, 2);
        assert!(out.rejects[0].reason.contains("latitude"));
    }

    #[test]
    fn majority_rejects_is_an_error() {
        let raw = "u1\tp1\tnot a time\tCafe\t40.7\t-74.0\n\
                   u1\t\t2012-04-03 18:00:09\tCafe\t40.7\t-74.0\n\
                   u1\tp1\t2012-04-03 18:00:09\tCafe\t40.7\t-74.0\n";
        let err = parse_checkins(raw.as_bytes(), &FormatSpec::default()).unwrap_err();
        assert!(matches!(err, Error::TooManyRejects { rejected: 2, total: 3 }));
    }

    #[test]
    fn foursquare_layout() {
        let raw = "470\t49bbd6c0f964a520f4531fe3\t4bf58dd8d48988d127951735\tArts & Crafts Store\t40.719810375488535\t-74.00258103213994\t-240\tTue Apr 03 18:00:09 +0000 2012\n";
        let out = parse_checkins(raw.as_bytes(), &FormatSpec::foursquare()).unwrap();
        assert_eq!(out.checkins.len(), 1);
        assert_eq!(out.checkins[0].timestamp, ts(3, 18, 0) + Duration::seconds(9));
        assert_eq!(out.checkins[0].category, "Arts & Crafts Store");
    }

    #[test]
    fn below_threshold_user_empties_the_split() {
        let events = (0..9).map(|i| checkin("u1", "p1", ts(1, i, 0))).collect();
        let err = filter_and_split(events, &SplitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyTrainSplit));
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let cfg = SplitConfig {
            ratios: [0.8, 0.1, 0.2],
            ..Default::default()
        };
        assert!(matches!(filter_and_split(vec![], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn hour_histogram_counts_visit_hours() {
        let mut train = UserSequences::new();
        train.insert(
            "u1".into(),
            vec![
                checkin("u1", "p1", ts(1, 9, 15)),
                checkin("u1", "p1", ts(1, 9, 40)),
                checkin("u1", "p1", ts(1, 21, 5)),
            ],
        );
        let agg = aggregate_pois(&train).unwrap();
        let rec = &agg.poi_table["p1"];
        assert_eq!(rec.hour_histogram[9], 2);
        assert_eq!(rec.hour_histogram[21], 1);
        assert_eq!(rec.hour_histogram.iter().sum::<u32>(), 3);
        assert_eq!(rec.visit_count, 3);
    }

    #[test]
    fn single_visitor_histogram() {
        let mut train = UserSequences::new();
        train.insert(
            "u7".into(),
            (0..4).map(|i| checkin("u7", "p9", ts(2, i, 0))).collect(),
        );
        let agg = aggregate_pois(&train).unwrap();
        assert_eq!(
            agg.poi_table["p9"].visitor_histogram,
            BTreeMap::from([("u7".to_string(), 4)])
        );
    }

    #[test]
    fn modal_category_with_lexical_ties() {
        let mut a = checkin("u1", "p1", ts(1, 1, 0));
        a.category = "Zoo".into();
        let mut b = checkin("u1", "p1", ts(1, 2, 0));
        b.category = "Bar".into();
        let mut train = UserSequences::new();
        train.insert("u1".into(), vec![a, b]);
        let agg = aggregate_pois(&train).unwrap();
        assert_eq!(agg.category_vocab, vec!["Bar".to_string()]);
    }

    fn split_with(train: Vec<CheckIn>, test: Vec<CheckIn>) -> DatasetSplit {
        let train = group_by_user(train);
        let agg = aggregate_pois(&train).unwrap();
        DatasetSplit {
            user_vocab: train.keys().cloned().collect(),
            validation: UserSequences::new(),
            test: group_by_user(test),
            train,
            category_vocab: agg.category_vocab,
            poi_table: agg.poi_table,
            report: SplitReport::default(),
        }
    }

    #[test]
    fn eval_window_keeps_most_recent_history() {
        let events: Vec<CheckIn> = (0..60)
            .map(|i| checkin("u1", &format!("p{i}"), ts(1, 0, 0) + Duration::minutes(i)))
            .collect();
        let split = split_with(events[..55].to_vec(), events[55..].to_vec());
        let cases = build_eval_instances(&split, 50);
        assert_eq!(cases.cases.len(), 1);
        let case = &cases.cases[0];
        assert_eq!(case.history.len(), 50);
        assert_eq!(case.history[0], events[9]);
        assert_eq!(case.history[49], events[58]);
        assert_eq!(case.target, events[59]);
    }

    #[test]
    fn short_history_and_skipped_users() {
        let events: Vec<CheckIn> = (0..3)
            .map(|i| checkin("u1", "p1", ts(1, i, 0)))
            .collect();
        let mut train = events[..2].to_vec();
        train.push(checkin("u2", "p1", ts(1, 5, 0)));
        let split = split_with(train, events[2..].to_vec());
        let cases = build_eval_instances(&split, 50);
        assert_eq!(cases.cases.len(), 1);
        assert_eq!(cases.cases[0].history.len(), 2);
        assert_eq!(cases.skipped_users, 1);
    }

    #[test]
    fn split_records_round_trip() {
        let events: Vec<CheckIn> = (0..6)
            .map(|i| checkin("u1", "p1", ts(1, i, 0)))
            .collect();
        let split = split_with(events[..5].to_vec(), events[5..].to_vec());
        let mut buf = Vec::new();
        write_split_records(&split, &mut buf).unwrap();
        let back = read_split_records(&buf[..]).unwrap();
        assert_eq!(back.train, split.train);
        assert_eq!(back.test, split.test);
        assert_eq!(back.poi_table, split.poi_table);
    }
}
