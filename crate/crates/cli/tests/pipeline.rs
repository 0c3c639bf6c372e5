use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use poisid::sidregistry::{stats_from_group_sizes, SemanticId};
use poisid::synth::{checkins, write_checkins_tsv, CheckinSpec};

const STAGES: [&str; 9] = [
    "ingest",
    "features",
    "train-codebook",
    "assign-sids",
    "stats",
    "emit-prompts",
    "emit-eval",
    "baseline",
    "analyze",
];

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/checkins_200.tsv")
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poisid"))
        .args(args)
        .arg("--set")
        .arg(format!("data.checkins={}", fixture().display()))
        .arg("--set")
        .arg(format!("output.dir={}", out.display()))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn bundled_fixture_matches_generator() {
    let mut buf = Vec::new();
    write_checkins_tsv(&checkins(&CheckinSpec::default()), &mut buf).unwrap();
    assert_eq!(std::fs::read(fixture()).unwrap(), buf);
}

#[test]
fn full_pipeline_runs_and_stages_are_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let start = Instant::now();
    let mut stats_stdout = String::new();
    for stage in STAGES {
        let stdout = run_ok(&out, &[stage]);
        if stage == "stats" {
            stats_stdout = stdout;
        }
    }
    assert!(start.elapsed() < Duration::from_secs(300), "{:?}", start.elapsed());
    let first = snapshot(&out);
    for dir in ["ingest", "features", "codebook", "sids", "stats", "prompts", "eval", "baseline", "analyze"] {
        assert!(first.contains_key(&Path::new(dir).join("manifest.txt")), "{dir}");
    }

    // Stats against an independent count over the written registry.
    let registry = String::from_utf8(first[Path::new("sids/registry.tsv")].clone()).unwrap();
    let mut groups: HashMap<Vec<usize>, usize> = HashMap::new();
    for line in registry.lines().filter(|l| !l.is_empty()) {
        let (_, sid) = line.split_once('\t').unwrap();
        *groups.entry(SemanticId::parse(sid, 3).unwrap().indices).or_default() += 1;
    }
    let oracle = stats_from_group_sizes(groups.values().copied());
    assert!(stats_stdout.contains(&format!("unique = {}\n", oracle.unique)), "{stats_stdout}");
    assert!(stats_stdout.contains(&format!("colliding_pois = {}\n", oracle.colliding_pois)));

    // Scoring the targets themselves is a perfect run.
    let targets = out.join("eval/targets.txt");
    let stdout = run_ok(&out, &["score", "--predictions", targets.to_str().unwrap()]);
    assert!(stdout.starts_with("acc1 = 1.000000"), "{stdout}");

    // Deleting downstream artifacts and rerunning leaves upstream alone.
    std::fs::remove_dir_all(out.join("prompts")).unwrap();
    run_ok(&out, &["emit-prompts"]);
    let again = snapshot(&out);
    for (k, v) in &first {
        assert_eq!(again.get(k), Some(v), "{}", k.display());
    }
}

#[test]
fn missing_upstream_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["features"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ingest/splits.jsonl"), "{err}");
}

#[test]
fn config_problems_are_listed_together() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        tmp.path(),
        &["ingest", "--set", "rqvae.codebook_size=0", "--set", "prompts.blank_rate=0", "--set", "bogus.key=1"],
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    for needle in ["codebook_size", "blank_rate", "bogus.key"] {
        assert!(err.contains(needle), "{needle}: {err}");
    }
}

#[test]
fn config_file_and_env_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "rqvae.codebook_size = 0\n").unwrap();
    let o = run(tmp.path(), &["ingest", "--config", conf.to_str().unwrap()]);
    assert!(!o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_poisid"))
        .args(["ingest", "--config", conf.to_str().unwrap()])
        .arg("--set")
        .arg(format!("data.checkins={}", fixture().display()))
        .arg("--set")
        .arg(format!("output.dir={}", tmp.path().join("out").display()))
        .env("POISID_RQVAE_CODEBOOK_SIZE", "16")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(tmp.path().join("out/ingest/manifest.txt")).unwrap();
    assert!(manifest.contains("config.rqvae.codebook_size = 16\n"));
}
