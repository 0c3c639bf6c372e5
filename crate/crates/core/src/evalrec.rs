//! Acc@1 scoring, a first-order Markov baseline over semantic IDs, scoring
//! of externally produced predictions, and the prefix-similarity analysis.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use chrono::{NaiveDateTime, Timelike};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EvalCase;
use crate::promptgen::{eval_example, PromptVariant};
use crate::sidregistry::{shared_prefix_len, SidRegistry, SidScanner};

pub const HISTORY_BUCKETS: usize = 10;
pub const HOUR_BUCKETS: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub uid: String,
    /// Rendered SIDs with visit times, oldest first.
    #[serde(with = "history_serde")]
    pub history: Vec<(String, NaiveDateTime)>,
    pub target_sid: String,
    #[serde(with = "crate::ingest::timestamp_format")]
    pub target_time: NaiveDateTime,
}

mod history_serde {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    const FORMAT: &str = "%Y-%m-%d %H:%M:%S";

    pub fn serialize<S: Serializer>(h: &[(String, NaiveDateTime)], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<(&str, String)> = h.iter().map(|(sid, t)| (sid.as_str(), t.format(FORMAT).to_string())).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, NaiveDateTime)>, D::Error> {
        let rows = Vec::<(String, String)>::deserialize(d)?;
        rows.into_iter()
            .map(|(sid, t)| {
                NaiveDateTime::parse_from_str(&t, FORMAT)
                    .map(|t| (sid, t))
                    .map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

impl EvalInstance {
    pub fn from_case(case: &EvalCase, registry: &SidRegistry) -> Result<Self> {
        let history = case
            .history
            .iter()
            .map(|c| Ok((registry.require(&c.poi_id)?.render(), c.timestamp)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            uid: case.user_id.clone(),
            history,
            target_sid: registry.require(&case.target.poi_id)?.render(),
            target_time: case.target.timestamp,
        })
    }

    pub fn last_sid(&self) -> Option<&str> {
        self.history.last().map(|(s, _)| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub n: usize,
    pub hits: usize,
}

impl Bucket {
    pub fn acc1(&self) -> Option<f64> {
        (self.n > 0).then(|| self.hits as f64 / self.n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub hits: usize,
    pub acc1: f64,
    /// Predictions that held no SID-shaped token.
    pub unparseable: usize,
    /// By history length, in tenths of the longest history.
    pub by_history: Vec<Bucket>,
    /// By hour of the target visit.
    pub by_hour: Vec<Bucket>,
}

impl EvalReport {
    fn empty() -> Self {
        Self {
            n: 0,
            hits: 0,
            acc1: 0.0,
            unparseable: 0,
            by_history: vec![Bucket::default(); HISTORY_BUCKETS],
            by_hour: vec![Bucket::default(); HOUR_BUCKETS],
        }
    }

    fn finish(mut self) -> Self {
        self.acc1 = if self.n == 0 { 0.0 } else { self.hits as f64 / self.n as f64 };
        self
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "n = {}", self.n)?;
        writeln!(w, "hits = {}", self.hits)?;
        writeln!(w, "acc1 = {:.6}", self.acc1)?;
        writeln!(w, "unparseable = {}", self.unparseable)?;
        for (name, buckets) in [("history", &self.by_history), ("hour", &self.by_hour)] {
            for (i, b) in buckets.iter().enumerate() {
                writeln!(w, "{name}.{i} = {} / {}", b.hits, b.n)?;
            }
        }
        Ok(())
    }
}

/// Exact-string Acc@1 over aligned predictions and targets.
pub fn acc_at_1(predictions: &[String], targets: &[String]) -> Result<EvalReport> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch(predictions.len(), targets.len()));
    }
    let mut report = EvalReport::empty();
    report.n = targets.len();
    report.hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(report.finish())
}

pub fn history_bucket(len: usize, max_len: usize) -> usize {
    if max_len == 0 || len == 0 {
        return 0;
    }
    ((len - 1) * HISTORY_BUCKETS / max_len).min(HISTORY_BUCKETS - 1)
}

/// Acc@1 with per-bucket breakdowns; `None` predictions count as
/// unparseable misses.
pub fn score_instances(predictions: &[Option<String>], instances: &[EvalInstance]) -> Result<EvalReport> {
    if predictions.len() != instances.len() {
        return Err(Error::LengthMismatch(predictions.len(), instances.len()));
    }
    let max_len = instances.iter().map(|i| i.history.len()).max().unwrap_or(0);
    let mut report = EvalReport::empty();
    for (p, inst) in predictions.iter().zip(instances) {
        let hit = p.as_deref() == Some(inst.target_sid.as_str());
        report.n += 1;
        report.hits += hit as usize;
        report.unparseable += p.is_none() as usize;
        for b in [
            &mut report.by_history[history_bucket(inst.history.len(), max_len)],
            &mut report.by_hour[inst.target_time.hour() as usize],
        ] {
            b.n += 1;
            b.hits += hit as usize;
        }
    }
    Ok(report.finish())
}

/// Scores a prediction file with one line per instance. Each line is
/// searched for its first SID-shaped token, so decoration around the ID
/// is ignored.
pub fn score_external(predictions: impl BufRead, instances: &[EvalInstance], num_layers: usize) -> Result<EvalReport> {
    let scanner = SidScanner::new(num_layers)?;
    let mut parsed = Vec::new();
    for (i, line) in predictions.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(format!("prediction line {}: {e}", i + 1)))?;
        let sid = scanner.find(&line).map(|s| s.render());
        if sid.is_none() {
            log::warn!("prediction line {} holds no semantic ID", i + 1);
        }
        parsed.push(sid);
    }
    score_instances(&parsed, instances)
}

/// First-order transition counts over rendered SIDs.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    smoothing: f64,
    transitions: BTreeMap<String, BTreeMap<String, u64>>,
    popularity: BTreeMap<String, u64>,
    /// Most frequent SID, lexically smallest on ties.
    top: Option<String>,
}

impl MarkovModel {
    pub fn fit<'a, I, S>(sequences: I, smoothing: f64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[&'a str]>,
    {
        let mut transitions: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        let mut popularity: BTreeMap<String, u64> = BTreeMap::new();
        for seq in sequences {
            let seq = seq.as_ref();
            for s in seq {
                *popularity.entry(s.to_string()).or_default() += 1;
            }
            for pair in seq.windows(2) {
                *transitions
                    .entry(pair[0].to_string())
                    .or_default()
                    .entry(pair[1].to_string())
                    .or_default() += 1;
            }
        }
        let top = argmax(&popularity);
        Self {
            smoothing,
            transitions,
            popularity,
            top,
        }
    }

    pub fn vocabulary_size(&self) -> usize {
        self.popularity.len()
    }

    pub fn count(&self, from: &str, to: &str) -> u64 {
        self.transitions.get(from).and_then(|r| r.get(to)).copied().unwrap_or(0)
    }

    /// Smoothed transition probability over the training vocabulary.
    pub fn probability(&self, from: &str, to: &str) -> f64 {
        let v = self.vocabulary_size() as f64;
        let row: u64 = self.transitions.get(from).map_or(0, |r| r.values().sum());
        (self.count(from, to) as f64 + self.smoothing) / (row as f64 + self.smoothing * v)
    }

    pub fn most_popular(&self) -> Option<&str> {
        self.top.as_deref()
    }

    /// Argmax of the smoothed row for the last SID; with add-k smoothing
    /// that is the largest count, ties going to the lexically smallest SID.
    /// Contexts never seen as a source fall back to popularity.
    pub fn predict_next(&self, last: Option<&str>) -> Option<&str> {
        last.and_then(|l| self.transitions.get(l))
            .and_then(|row| row.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))))
            .map(|(s, _)| s.as_str())
            .or(self.most_popular())
    }

    pub fn predict(&self, instance: &EvalInstance) -> Option<&str> {
        self.predict_next(instance.last_sid())
    }
}

fn argmax(counts: &BTreeMap<String, u64>) -> Option<String> {
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(s, _)| s.clone())
}

/// One line of the eval manifest: the instance and the prompt an external
/// model should answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    #[serde(flatten)]
    pub instance: EvalInstance,
    pub instruction: String,
    pub input: String,
}

pub fn build_manifest(cases: &[EvalCase], registry: &SidRegistry, variant: PromptVariant) -> Result<Vec<ManifestRow>> {
    cases
        .iter()
        .enumerate()
        .map(|(index, case)| {
            let prompt = eval_example(case, registry, variant)?;
            Ok(ManifestRow {
                index,
                instance: EvalInstance::from_case(case, registry)?,
                instruction: prompt.instruction,
                input: prompt.input,
            })
        })
        .collect()
}

pub fn write_manifest(rows: &[ManifestRow], mut w: impl Write) -> std::io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(r: impl BufRead) -> Result<Vec<ManifestRow>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let row: ManifestRow =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("manifest line {}: {e}", n + 1)))?;
        if row.index != out.len() {
            return Err(Error::Parse(format!(
                "manifest line {} has index {}, expected {}",
                n + 1,
                row.index,
                out.len()
            )));
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanInterval {
    pub pairs: usize,
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

impl MeanInterval {
    pub fn overlaps(&self, other: &MeanInterval) -> bool {
        self.low <= other.high && other.low <= self.high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSimilarity {
    pub same: MeanInterval,
    pub cross: MeanInterval,
}

impl PrefixSimilarity {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "pairs", "mean_shared_prefix", "ci_low", "ci_high"])
            .map_err(|e| Error::Parse(e.to_string()))?;
        for (name, m) in [("same", &self.same), ("cross", &self.cross)] {
            out.write_record([
                name.to_string(),
                m.pairs.to_string(),
                format!("{:.6}", m.mean),
                format!("{:.6}", m.low),
                format!("{:.6}", m.high),
            ])
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityConfig {
    pub pairs: usize,
    pub resamples: usize,
    /// Two-sided coverage of the bootstrap interval.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            pairs: 2000,
            resamples: 1000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

const MIN_PAIRS: usize = 30;

/// Mean shared prefix length of random same-label and cross-label POI
/// pairs with percentile bootstrap intervals. POIs missing from `labels`
/// are ignored.
pub fn prefix_similarity_report(
    registry: &SidRegistry,
    labels: &HashMap<String, String>,
    config: &SimilarityConfig,
) -> Result<PrefixSimilarity> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pois: Vec<(&str, &str)> = registry
        .iter()
        .filter_map(|(p, _)| labels.get(p).map(|l| (p, l.as_str())))
        .collect();
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for &(p, l) in &pois {
        groups.entry(l).or_default().push(p);
    }
    let shareable: Vec<&Vec<&str>> = groups.values().filter(|g| g.len() >= 2).collect();
    let depth = |a: &str, b: &str| -> Result<f64> {
        Ok(shared_prefix_len(registry.require(a)?, registry.require(b)?)? as f64)
    };

    let mut same = Vec::new();
    if !shareable.is_empty() {
        for _ in 0..config.pairs {
            let g = shareable.choose(&mut rng).expect("non-empty");
            let pick: Vec<&&str> = g.choose_multiple(&mut rng, 2).collect();
            same.push(depth(pick[0], pick[1])?);
        }
    }
    let mut cross = Vec::new();
    if groups.len() >= 2 {
        while cross.len() < config.pairs {
            let a = pois.choose(&mut rng).expect("non-empty");
            let b = pois.choose(&mut rng).expect("non-empty");
            if a.1 != b.1 {
                cross.push(depth(a.0, b.0)?);
            }
        }
    }
    for (name, v) in [("same-label", &same), ("cross-label", &cross)] {
        if v.len() < MIN_PAIRS {
            log::warn!("only {} {name} pairs; intervals are unreliable", v.len());
        }
    }
    Ok(PrefixSimilarity {
        same: bootstrap_mean(&same, config, &mut rng),
        cross: bootstrap_mean(&cross, config, &mut rng),
    })
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_mean(values: &[f64], config: &SimilarityConfig, rng: &mut impl Rng) -> MeanInterval {
    let n = values.len();
    if n == 0 {
        return MeanInterval {
            pairs: 0,
            mean: f64::NAN,
            low: f64::NAN,
            high: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..config.resamples.max(1))
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - config.confidence) / 2.0;
    let at = |q: f64| means[((q * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    MeanInterval {
        pairs: n,
        mean,
        low: at(tail),
        high: at(1.0 - tail),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidregistry::assign_sids;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn t(h: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2012, 4, 3).unwrap().and_hms_opt(h, 0, 0).unwrap()
    }

    fn instance(history: &[&str], target: &str, hour: u32) -> EvalInstance {
        EvalInstance {
            uid: "u".into(),
            history: history.iter().map(|s| (s.to_string(), t(0))).collect(),
            target_sid: target.into(),
            target_time: t(hour),
        }
    }

    #[test]
    fn acc_identity_disjoint_and_mismatch() {
        let a: Vec<String> = ["<a_1><b_2>", "<a_3><b_4>"].map(String::from).to_vec();
        let b: Vec<String> = ["<a_0><b_0>", "<a_0><b_1>"].map(String::from).to_vec();
        assert_eq!(acc_at_1(&a, &a).unwrap().acc1, 1.0);
        assert_eq!(acc_at_1(&b, &a).unwrap().acc1, 0.0);
        assert!(matches!(acc_at_1(&a[..1], &a), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn suffix_counts_in_matching() {
        let p = vec!["<a_1><b_2><c_0>".to_string()];
        let q = vec!["<a_1><b_2><c_1>".to_string()];
        assert_eq!(acc_at_1(&p, &q).unwrap().hits, 0);
    }

    proptest! {
        #[test]
        fn acc_is_permutation_equivariant(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60), seed in 0u64..100) {
            let p: Vec<String> = pairs.iter().map(|x| x.0.to_string()).collect();
            let q: Vec<String> = pairs.iter().map(|x| x.1.to_string()).collect();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            let ps: Vec<String> = idx.iter().map(|&i| p[i].clone()).collect();
            let qs: Vec<String> = idx.iter().map(|&i| q[i].clone()).collect();
            prop_assert_eq!(acc_at_1(&p, &q).unwrap().acc1, acc_at_1(&ps, &qs).unwrap().acc1);
        }
    }

    #[test]
    fn buckets_add_up() {
        let inst = vec![instance(&["<a_1>"], "<a_2>", 9), instance(&["<a_1>"; 10], "<a_1>", 9), instance(&["<a_1>"; 5], "<a_3>", 21)];
        let preds = vec![Some("<a_2>".to_string()), None, Some("<a_3>".to_string())];
        let r = score_instances(&preds, &inst).unwrap();
        assert_eq!((r.n, r.hits, r.unparseable), (3, 2, 1));
        assert_eq!(r.by_hour[9], Bucket { n: 2, hits: 1 });
        assert_eq!(r.by_hour[21], Bucket { n: 1, hits: 1 });
        assert_eq!(r.by_history.iter().map(|b| b.n).sum::<usize>(), 3);
        assert_eq!(r.by_history[0].n, 1);
        assert_eq!(r.by_history[9].n, 1);
        assert_eq!(r.by_history[4].n, 1);
    }

    #[test]
    fn markov_chain_and_fallback() {
        let m = MarkovModel::fit([vec!["A", "B", "A", "B", "A", "B"]], 0.01);
        assert_eq!(m.predict_next(Some("A")), Some("B"));
        assert_eq!(m.predict_next(Some("Z")), Some("A"));
        assert_eq!(m.predict_next(None), Some("A"));
    }

    #[test]
    fn markov_hand_counts() {
        let seq = ["A", "B", "C", "A", "B", "A", "C", "C", "B", "A"];
        let m = MarkovModel::fit([seq.to_vec()], 0.01);
        let mut hand: HashMap<(&str, &str), u64> = HashMap::new();
        for i in 0..seq.len() - 1 {
            *hand.entry((seq[i], seq[i + 1])).or_default() += 1;
        }
        for a in ["A", "B", "C"] {
            let row: u64 = ["A", "B", "C"].iter().map(|b| hand.get(&(a, *b)).copied().unwrap_or(0)).sum();
            for b in ["A", "B", "C"] {
                let c = hand.get(&(a, b)).copied().unwrap_or(0);
                assert_eq!(m.count(a, b), c);
                let p = (c as f64 + 0.01) / (row as f64 + 0.03);
                assert!((m.probability(a, b) - p).abs() < 1e-15);
            }
        }
        // A -> B twice, A -> C once.
        assert_eq!(m.predict_next(Some("A")), Some("B"));
        // B -> C, B -> A twice: A wins outright.
        assert_eq!(m.predict_next(Some("B")), Some("A"));
        // C -> A, C -> C, C -> B once each: lexical tie break.
        assert_eq!(m.predict_next(Some("C")), Some("A"));
    }

    #[test]
    fn external_scoring_is_lenient() {
        let inst = vec![instance(&["<a_1><b_1>"], "<a_2><b_3>", 1), instance(&["<a_1><b_1>"], "<a_0><b_0><c_1>", 2)];
        let text = "  The answer is <a_2> <b_3>.  \n<a_0><b_0><c_1>\t\n";
        let r = score_external(text.as_bytes(), &inst, 2).unwrap();
        assert_eq!(r.hits, 2);
        let r = score_external("\n\n".as_bytes(), &inst, 2).unwrap();
        assert_eq!((r.hits, r.unparseable), (0, 2));
        assert!(score_external("\n".as_bytes(), &inst, 2).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let rows = vec![ManifestRow {
            index: 0,
            instance: instance(&["<a_1><b_1>"], "<a_2><b_3>", 1),
            instruction: "i".into(),
            input: "x".into(),
        }];
        let mut buf = Vec::new();
        write_manifest(&rows, &mut buf).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn category_built_registry_shares_everything() {
        let reg = assign_sids((0..40).map(|i| (format!("p{i:02}"), vec![i % 4, i % 4, i % 4])), 8, 3).unwrap();
        let labels: HashMap<String, String> = (0..40).map(|i| (format!("p{i:02}"), format!("c{}", i % 4))).collect();
        let r = prefix_similarity_report(&reg, &labels, &SimilarityConfig::default()).unwrap();
        assert_eq!(r.same.mean, 3.0);
        assert_eq!(r.cross.mean, 0.0);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn bootstrap_interval_brackets_mean() {
        let values: Vec<f64> = (0..200).map(|i| (i % 7) as f64).collect();
        let m = bootstrap_mean(&values, &SimilarityConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(m.low <= m.mean && m.mean <= m.high);
        assert!(m.high - m.low < 1.0);
    }
}
