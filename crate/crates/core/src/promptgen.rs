//! Fine-tuning prompts for next-POI generation.
//!
//! Three variants share one layout: `full` (semantic IDs with visit
//! times), `no_sid` (numeric POI IDs like `<3312>` with times) and
//! `no_time` (semantic IDs, no times). Long check-in sequences are cropped
//! into windows, and every `blank_rate`-th sample becomes a
//! fill-in-the-blank task.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CheckIn, EvalCase, UserSequences};
use crate::sidregistry::SidRegistry;

pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M";
pub const BLANK_TOKEN: &str = "<blank>";

const INSTRUCTION_TIMED: &str = "Here is a record of a user's POI accesses, your task is based on the history to predict the POI that the user is likely to access at the specified time.";
const INSTRUCTION_UNTIMED: &str = "Here is a record of a user's POI accesses, your task is based on the history to predict the next POI that the user is likely to access.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    #[default]
    Full,
    NoSid,
    NoTime,
}

impl PromptVariant {
    pub fn instruction(self) -> &'static str {
        match self {
            PromptVariant::Full | PromptVariant::NoSid => INSTRUCTION_TIMED,
            PromptVariant::NoTime => INSTRUCTION_UNTIMED,
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptVariant::Full => "full",
            PromptVariant::NoSid => "no_sid",
            PromptVariant::NoTime => "no_time",
        })
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PromptVariant::Full),
            "no_sid" => Ok(PromptVariant::NoSid),
            "no_time" => Ok(PromptVariant::NoTime),
            _ => Err(Error::Config(format!(
                "prompt variant must be full, no_sid or no_time, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Next,
    Blank,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub user_id: String,
    pub split: String,
    pub kind: SampleKind,
    pub variant: PromptVariant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub meta: PromptMeta,
}

/// One rendered visit: the POI token and when it happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub token: String,
    pub time: NaiveDateTime,
}

/// The input text for `uid`'s history and the time being asked about.
pub fn render_input(uid: &str, history: &[Visit], target_time: NaiveDateTime, variant: PromptVariant) -> Result<String> {
    if history.is_empty() {
        return Err(Error::Invalid(format!("empty history for user {uid}")));
    }
    let mut out = format!("The user_<{uid}> visited: ");
    for (i, v) in history.iter().enumerate() {
        if i > 0 {
            out.push_str(", visited ");
        }
        out.push_str(&v.token);
        if variant != PromptVariant::NoTime {
            out.push_str(" at ");
            out.push_str(&v.time.format(TIME_FORMAT).to_string());
        }
    }
    match variant {
        PromptVariant::NoTime => {
            out.push_str(&format!(", and in the next time user_<{uid}> is likely to visit:"));
        }
        _ => out.push_str(&format!(
            ". When {} user_<{uid}> is likely to visit:",
            target_time.format(TIME_FORMAT)
        )),
    }
    Ok(out)
}

pub fn render_prompt(
    uid: &str,
    history: &[Visit],
    target_time: NaiveDateTime,
    target: &str,
    variant: PromptVariant,
    split: &str,
    kind: SampleKind,
) -> Result<PromptExample> {
    Ok(PromptExample {
        instruction: variant.instruction().to_string(),
        input: render_input(uid, history, target_time, variant)?,
        output: target.to_string(),
        meta: PromptMeta {
            user_id: uid.to_string(),
            split: split.to_string(),
            kind,
            variant,
        },
    })
}

/// Maps POIs to the token a variant shows: the rendered semantic ID, or
/// `<n>` with `n` the POI's numeric ID.
#[derive(Debug, Clone)]
pub struct TokenMap<'a> {
    registry: &'a SidRegistry,
    numeric: Option<HashMap<String, usize>>,
}

impl<'a> TokenMap<'a> {
    pub fn new(registry: &'a SidRegistry, variant: PromptVariant) -> Self {
        let numeric = (variant == PromptVariant::NoSid).then(|| registry.numeric_ids());
        Self { registry, numeric }
    }

    pub fn token(&self, poi: &str) -> Result<String> {
        let sid = self.registry.require(poi)?;
        Ok(match &self.numeric {
            Some(ids) => format!("<{}>", ids[poi]),
            None => sid.render(),
        })
    }

    pub fn visits(&self, checkins: &[CheckIn]) -> Result<Vec<Visit>> {
        checkins
            .iter()
            .map(|c| {
                Ok(Visit {
                    token: self.token(&c.poi_id)?,
                    time: c.timestamp,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPolicy {
    pub max_history: usize,
    /// One sample in every `blank_rate` becomes fill-in-the-blank.
    pub blank_rate: usize,
    pub variant: PromptVariant,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            max_history: 50,
            blank_rate: 5,
            variant: PromptVariant::Full,
        }
    }
}

impl AugmentPolicy {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.max_history < 2 {
            out.push(format!("prompts.max_history must be at least 2, got {}", self.max_history));
        }
        if self.blank_rate < 1 {
            out.push("prompts.blank_rate must be at least 1".to_string());
        }
        out
    }
}

/// Index windows over a sequence of length `len`.
///
/// Up to `max` events: one window with everything. Up to `2 max`: the
/// first and the last `max` events, which overlap whenever `len < 2 max`
/// and are the only placement of two such windows that covers every
/// event. Longer: consecutive windows of `max`; a final remainder of two or
/// more events is kept as is, a single leftover event is covered by a
/// window over the last two events.
pub fn crop_sequences(len: usize, max: usize) -> Vec<Range<usize>> {
    assert!(max >= 2, "max_history must be at least 2");
    if len <= max {
        return vec![0..len];
    }
    if len <= 2 * max {
        return vec![0..max, len - max..len];
    }
    let mut out: Vec<Range<usize>> = (0..len / max).map(|i| i * max..(i + 1) * max).collect();
    match len % max {
        0 => {}
        1 => out.push(len - 2..len),
        _ => out.push(len / max * max..len),
    }
    out
}

/// Next-visit examples from every user's training sequence, with
/// fill-in-the-blank substitution and a final seeded shuffle.
///
/// Users are visited in lexical order and windows in sequence order. Sample
/// `c` of that stream is a blank sample when `(c + offset) % blank_rate == 0`
/// for a seed-derived `offset`, so exactly `⌈·⌉` or `⌊·⌋` of `n / blank_rate`
/// samples are blanks.
pub fn make_training_set(
    train: &UserSequences,
    registry: &SidRegistry,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<Vec<PromptExample>> {
    let problems = policy.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let tokens = TokenMap::new(registry, policy.variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..policy.blank_rate);
    let mut out = Vec::new();
    let mut counter = 0usize;
    for (user, seq) in train {
        let visits = tokens.visits(seq)?;
        for w in crop_sequences(seq.len(), policy.max_history) {
            if w.len() < 2 {
                continue;
            }
            let window = &visits[w.clone()];
            let events = &seq[w];
            let (history, last) = window.split_at(window.len() - 1);
            let blank = (counter + offset) % policy.blank_rate == 0;
            counter += 1;
            let example = if blank {
                let j = rng.random_range(0..history.len());
                let mut masked = history.to_vec();
                masked[j].token = BLANK_TOKEN.to_string();
                let target = registry.require(&events[j].poi_id)?.render();
                render_prompt(user, &masked, history[j].time, &target, policy.variant, "train", SampleKind::Blank)?
            } else {
                let target = registry.require(&events[events.len() - 1].poi_id)?.render();
                render_prompt(user, history, last[0].time, &target, policy.variant, "train", SampleKind::Next)?
            };
            out.push(example);
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// The held-out prompt for one evaluation case: the case history, the
/// target's time as the query, the target's SID as the expected output.
pub fn eval_example(case: &EvalCase, registry: &SidRegistry, variant: PromptVariant) -> Result<PromptExample> {
    let tokens = TokenMap::new(registry, variant);
    let history = tokens.visits(&case.history)?;
    let target = registry.require(&case.target.poi_id)?.render();
    render_prompt(&case.user_id, &history, case.target.timestamp, &target, variant, "test", SampleKind::Next)
}

pub fn write_jsonl(examples: &[PromptExample], mut w: impl Write) -> std::io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<PromptExample>> {
    r.lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.is_empty()))
        .map(|(n, line)| {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidregistry::assign_sids;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn at(d: u32, h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2012, 5, d).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    #[test]
    fn single_visit_has_one_clause() {
        let v = [Visit {
            token: "<3312>".into(),
            time: at(21, 23, 15),
        }];
        let s = render_input("1", &v, at(22, 8, 0), PromptVariant::NoSid).unwrap();
        assert_eq!(s, "The user_<1> visited: <3312> at 2012-05-21 23:15. When 2012-05-22 08:00 user_<1> is likely to visit:");
        assert_eq!(s.matches("visited").count(), 1);
        assert!(render_input("1", &[], at(1, 0, 0), PromptVariant::Full).is_err());
    }

    #[test]
    fn crop_examples() {
        assert_eq!(crop_sequences(120, 50), vec![0..50, 50..100, 100..120]);
        assert_eq!(crop_sequences(70, 50), vec![0..50, 20..70]);
        assert_eq!(crop_sequences(30, 50), vec![0..30]);
        assert_eq!(crop_sequences(101, 50), vec![0..50, 50..100, 99..101]);
    }

    proptest! {
        #[test]
        fn crop_covers_every_index(len in 0usize..400, max in 2usize..60) {
            let windows = crop_sequences(len, max);
            let mut covered = vec![false; len];
            for w in &windows {
                prop_assert!(w.end <= len && w.len() <= max);
                prop_assert!(len <= 1 || w.len() >= 2);
                covered[w.clone()].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
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

    fn fixture(users: usize, len: usize) -> (UserSequences, SidRegistry) {
        let mut train = UserSequences::new();
        for u in 0..users {
            let seq = (0..len)
                .map(|i| checkin(&format!("{u}"), &format!("p{}", (u + i) % 7), at(1 + (i as u32 % 28), 9, 0)))
                .collect();
            train.insert(format!("{u}"), seq);
        }
        let reg = assign_sids((0..7).map(|i| (format!("p{i}"), vec![i % 3, i, 0])), 8, 3).unwrap();
        (train, reg)
    }

    #[test]
    fn blank_counts_are_exact() {
        let (train, reg) = fixture(10, 6);
        for seed in 0..5 {
            let ex = make_training_set(&train, &reg, &AugmentPolicy::default(), seed).unwrap();
            assert_eq!(ex.len(), 10);
            assert_eq!(ex.iter().filter(|e| e.meta.kind == SampleKind::Blank).count(), 2);
        }
        let every = AugmentPolicy {
            blank_rate: 1,
            ..AugmentPolicy::default()
        };
        let ex = make_training_set(&train, &reg, &every, 3).unwrap();
        assert!(ex.iter().all(|e| e.meta.kind == SampleKind::Blank && e.input.contains(BLANK_TOKEN)));
    }

    #[test]
    fn targets_resolve_and_do_not_leak() {
        let (train, reg) = fixture(4, 12);
        let ex = make_training_set(&train, &reg, &AugmentPolicy::default(), 1).unwrap();
        for e in &ex {
            assert!(e.input.ends_with("is likely to visit:"));
            assert!(reg.poi_of(&e.output).is_some());
            if e.meta.kind == SampleKind::Next {
                let last = e.input.rsplit(", visited ").next().unwrap();
                assert!(!last.starts_with(&e.output), "{}", e.input);
            }
        }
    }

    #[test]
    fn unmapped_poi_is_named() {
        let (mut train, reg) = fixture(1, 3);
        train.get_mut("0").unwrap()[1].poi_id = "ghost".into();
        let err = make_training_set(&train, &reg, &AugmentPolicy::default(), 0).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn jsonl_round_trip_and_determinism() {
        let (train, reg) = fixture(5, 9);
        let a = make_training_set(&train, &reg, &AugmentPolicy::default(), 7).unwrap();
        let b = make_training_set(&train, &reg, &AugmentPolicy::default(), 7).unwrap();
        let (mut wa, mut wb) = (Vec::new(), Vec::new());
        write_jsonl(&a, &mut wa).unwrap();
        write_jsonl(&b, &mut wb).unwrap();
        assert_eq!(wa, wb);
        assert_eq!(wa.iter().filter(|&&c| c == b'\n').count(), a.len());
        assert_eq!(read_jsonl(wa.as_slice()).unwrap(), a);
    }
}
