//! Flat `section.key = value` configuration with environment and flag
//! overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use poisid::ingest::{FormatSpec, SplitConfig};
use poisid::promptgen::{AugmentPolicy, PromptVariant};
use poisid::rqvae::RqvaeConfig;

pub const ENV_PREFIX: &str = "POISID_";

/// Keys outside the `rqvae` section with their defaults.
const BASE_KEYS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("output.dir", "out"),
    ("data.checkins", ""),
    ("data.format", "default"),
    ("data.delimiter", "tab"),
    ("data.has_header", "false"),
    ("data.time_format", ""),
    ("filter.min_poi_interactions", "10"),
    ("filter.min_user_checkins", "10"),
    ("filter.ratios", "0.8,0.1,0.1"),
    ("features.region_precision", "8"),
    ("features.top_k_slots", "10"),
    ("features.top_k_visitors", "10"),
    ("prompts.variant", "full"),
    ("prompts.max_history", "50"),
    ("prompts.blank_rate", "5"),
    ("eval.history_len", "50"),
    ("baseline.smoothing", "0.01"),
    ("analyze.pairs", "2000"),
    ("analyze.resamples", "1000"),
];

/// The per-stage seeds come from `run.seed`, so the model seed is not a
/// separate key.
const DERIVED_KEYS: &[&str] = &["rqvae.seed"];

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkins: Option<PathBuf>,
    pub format: FormatSpec,
    pub split: SplitConfig,
    pub region_precision: usize,
    pub top_k_slots: usize,
    pub top_k_visitors: usize,
    pub rqvae: RqvaeConfig,
    pub prompts: AugmentPolicy,
    pub eval_history_len: usize,
    pub smoothing: f64,
    pub analyze_pairs: usize,
    pub analyze_resamples: usize,
    /// Every resolved key, for manifests.
    pub resolved: BTreeMap<String, String>,
}

pub fn default_values() -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = BASE_KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    for (k, v) in RqvaeConfig::default().entries() {
        let key = format!("rqvae.{k}");
        if !DERIVED_KEYS.contains(&key.as_str()) {
            out.insert(key, v);
        }
    }
    out
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

/// Parses `section.key = value` lines; `#` starts a comment line.
pub fn parse_file(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", origin.display(), n + 1);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolves defaults, then the file, then `POISID_*` variables, then
/// `--set` pairs. All problems are reported together.
pub fn resolve(
    file: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    overrides: &[String],
) -> Result<PipelineConfig> {
    let mut values = default_values();
    let mut problems = Vec::new();
    fn apply(values: &mut BTreeMap<String, String>, k: String, v: String, origin: &str, problems: &mut Vec<String>) {
        if values.contains_key(&k) {
            values.insert(k, v);
        } else if DERIVED_KEYS.contains(&k.as_str()) {
            problems.push(format!("{origin}: `{k}` is derived from run.seed and cannot be set"));
        } else {
            problems.push(format!("{origin}: unknown key `{k}`"));
        }
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (k, v) in parse_file(&text, path)? {
            apply(&mut values, k, v, &path.display().to_string(), &mut problems);
        }
    }
    let keys: Vec<String> = values.keys().cloned().collect();
    for k in keys {
        if let Some(v) = env(&env_name(&k)) {
            apply(&mut values, k.clone(), v, &env_name(&k), &mut problems);
        }
    }
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) => apply(&mut values, k.trim().to_string(), v.trim().to_string(), "--set", &mut problems),
            None => problems.push(format!("--set `{o}`: expected key=value")),
        }
    }
    let config = build(&values, &mut problems);
    if !problems.is_empty() {
        bail!("invalid configuration:\n  {}", problems.join("\n  "));
    }
    Ok(config.expect("no problems implies a config"))
}

fn build(values: &BTreeMap<String, String>, problems: &mut Vec<String>) -> Option<PipelineConfig> {
    let before = problems.len();
    let get = |k: &str| values[k].as_str();
    fn num<T: std::str::FromStr>(values: &BTreeMap<String, String>, k: &str, problems: &mut Vec<String>) -> T
    where
        T: Default,
    {
        values[k].parse().unwrap_or_else(|_| {
            problems.push(format!("{k}: cannot parse `{}`", values[k]));
            T::default()
        })
    }

    let seed: u64 = num(values, "run.seed", problems);
    let mut format = match get("data.format") {
        "default" => FormatSpec::default(),
        "foursquare" => FormatSpec::foursquare(),
        other => {
            problems.push(format!("data.format must be default or foursquare, got `{other}`"));
            FormatSpec::default()
        }
    };
    match get("data.delimiter") {
        "tab" => format.delimiter = b'\t',
        "comma" => format.delimiter = b',',
        other => problems.push(format!("data.delimiter must be tab or comma, got `{other}`")),
    }
    format.has_header = num(values, "data.has_header", problems);
    if !get("data.time_format").is_empty() {
        format.time_format = get("data.time_format").to_string();
    }

    let ratios: Vec<f64> = get("filter.ratios")
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .unwrap_or_default();
    let split = SplitConfig {
        min_poi_interactions: num(values, "filter.min_poi_interactions", problems),
        min_user_checkins: num(values, "filter.min_user_checkins", problems),
        ratios: match ratios[..] {
            [a, b, c] => [a, b, c],
            _ => {
                problems.push(format!("filter.ratios must be three numbers, got `{}`", get("filter.ratios")));
                [0.8, 0.1, 0.1]
            }
        },
    };
    if let Err(e) = split.validate() {
        problems.push(format!("filter.ratios: {e}"));
    }

    let region_precision: usize = num(values, "features.region_precision", problems);
    if let Err(e) = poisid::geocode::cell_size(region_precision) {
        problems.push(format!("features.region_precision: {e}"));
    }
    let top_k_slots: usize = num(values, "features.top_k_slots", problems);
    let top_k_visitors: usize = num(values, "features.top_k_visitors", problems);
    for (k, v) in [("features.top_k_slots", top_k_slots), ("features.top_k_visitors", top_k_visitors)] {
        if v == 0 {
            problems.push(format!("{k} must be positive"));
        }
    }

    let mut rqvae = RqvaeConfig::default();
    for key in RqvaeConfig::KEYS {
        let full = format!("rqvae.{key}");
        if let Some(v) = values.get(&full) {
            if let Err(e) = rqvae.set(key, v) {
                problems.push(e.to_string());
            }
        }
    }
    rqvae.seed = stage_seed(seed, "rqvae");
    problems.extend(rqvae.problems());

    let variant = get("prompts.variant").parse::<PromptVariant>().unwrap_or_else(|e| {
        problems.push(e.to_string());
        PromptVariant::Full
    });
    let prompts = AugmentPolicy {
        max_history: num(values, "prompts.max_history", problems),
        blank_rate: num(values, "prompts.blank_rate", problems),
        variant,
    };
    problems.extend(prompts.problems());

    let eval_history_len: usize = num(values, "eval.history_len", problems);
    if eval_history_len == 0 {
        problems.push("eval.history_len must be positive".into());
    }
    let smoothing: f64 = num(values, "baseline.smoothing", problems);
    if !(smoothing > 0.0) {
        problems.push(format!("baseline.smoothing must be positive, got {smoothing}"));
    }

    let checkins = (!get("data.checkins").is_empty()).then(|| PathBuf::from(get("data.checkins")));
    let config = PipelineConfig {
        seed,
        output_dir: PathBuf::from(get("output.dir")),
        checkins,
        format,
        split,
        region_precision,
        top_k_slots,
        top_k_visitors,
        rqvae,
        prompts,
        eval_history_len,
        smoothing,
        analyze_pairs: num(values, "analyze.pairs", problems),
        analyze_resamples: num(values, "analyze.resamples", problems),
        resolved: values.clone(),
    };
    (problems.len() == before).then_some(config)
}

/// A stage's seed: the master seed mixed with the stage name.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    // FNV-1a over the name, folded into the master seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    master ^ h
}
