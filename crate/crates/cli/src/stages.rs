//! One function per subcommand. Each stage reads its upstream artifacts
//! from the output directory and writes its own directory with a
//! `manifest.txt`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use log::info;
use sha2::{Digest, Sha256};

use poisid::evalrec::{self, MarkovModel, SimilarityConfig};
use poisid::features::{build_feature_matrix, FeatureMatrix, FeatureSpace};
use poisid::geocode::{build_region_vocab, RegionVocab};
use poisid::ingest::{self, build_eval_instances, DatasetSplit};
use poisid::numcore::Tensor;
use poisid::promptgen;
use poisid::rqvae::{self, RqvaeModel};
use poisid::sidregistry::{self, SidRegistry};

use crate::config::{stage_seed, PipelineConfig};

pub const MANIFEST: &str = "manifest.txt";

const SPLITS: &str = "ingest/splits.jsonl";
const FEATURES: &str = "features/features.txt";
const MODEL: &str = "codebook/model.ckpt";
const REGISTRY: &str = "sids/registry.tsv";
const INSTANCES: &str = "eval/instances.jsonl";

pub struct Context {
    pub config: PipelineConfig,
}

impl Context {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.config.output_dir.join(rel)
    }

    /// An upstream artifact that must already exist.
    fn upstream(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            bail!("missing upstream artifact {}", p.display());
        }
        Ok(p)
    }

    fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.path(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn manifest(&self, dir: &Path, stage: &str, inputs: &[&Path], seed: Option<u64>) -> Result<()> {
        let mut lines = vec![
            format!("stage = {stage}"),
            format!("version = {}", env!("CARGO_PKG_VERSION")),
            format!("seed = {}", self.config.seed),
        ];
        if let Some(s) = seed {
            lines.push(format!("stage_seed = {s}"));
        }
        for p in inputs {
            lines.push(format!("input.{} = {}", p.display(), sha256_file(p)?));
        }
        for (k, v) in &self.config.resolved {
            lines.push(format!("config.{k} = {v}"));
        }
        write_text(&dir.join(MANIFEST), &(lines.join("\n") + "\n"))
    }
}

fn sha256_file(p: &Path) -> Result<String> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn finish(mut w: BufWriter<File>, p: &Path) -> Result<()> {
    w.flush().with_context(|| format!("writing {}", p.display()))
}

fn load_split(ctx: &Context) -> Result<(DatasetSplit, PathBuf)> {
    let p = ctx.upstream(SPLITS)?;
    let split = ingest::read_split_records(open(&p)?).with_context(|| format!("reading {}", p.display()))?;
    Ok((split, p))
}

fn load_features(ctx: &Context) -> Result<(FeatureMatrix, PathBuf)> {
    let p = ctx.upstream(FEATURES)?;
    let m = FeatureMatrix::read_from(open(&p)?).with_context(|| format!("reading {}", p.display()))?;
    Ok((m, p))
}

fn load_model(ctx: &Context) -> Result<(RqvaeModel, PathBuf)> {
    let p = ctx.upstream(MODEL)?;
    let m = RqvaeModel::read_checkpoint(open(&p)?).with_context(|| format!("reading {}", p.display()))?;
    Ok((m, p))
}

fn load_registry(ctx: &Context) -> Result<(SidRegistry, PathBuf)> {
    let p = ctx.upstream(REGISTRY)?;
    let r = &ctx.config.rqvae;
    let reg = SidRegistry::read_from(open(&p)?, r.codebook_size, r.num_layers)
        .with_context(|| format!("reading {}", p.display()))?;
    Ok((reg, p))
}

fn load_instances(ctx: &Context) -> Result<(Vec<evalrec::ManifestRow>, PathBuf)> {
    let p = ctx.upstream(INSTANCES)?;
    let rows = evalrec::read_manifest(open(&p)?).with_context(|| format!("reading {}", p.display()))?;
    Ok((rows, p))
}

fn dense(m: &FeatureMatrix) -> Result<Tensor> {
    Ok(Tensor::from_vec(m.len(), m.width(), m.to_dense())?)
}

pub fn ingest(ctx: &Context) -> Result<()> {
    let Some(input) = ctx.config.checkins.clone() else {
        bail!("data.checkins is not set");
    };
    if !input.is_file() {
        bail!("missing input file {}", input.display());
    }
    let dir = ctx.stage_dir("ingest")?;
    let parsed = ingest::parse_checkins(open(&input)?, &ctx.config.format)
        .with_context(|| format!("parsing {}", input.display()))?;
    info!("parsed {} rows, {} rejected", parsed.rows, parsed.rejects.len());
    let p = dir.join("rejects.tsv");
    let mut w = create(&p)?;
    parsed.write_rejects(&mut w)?;
    finish(w, &p)?;

    let split = ingest::filter_and_split(parsed.checkins, &ctx.config.split)?;
    let p = dir.join("splits.jsonl");
    let mut w = create(&p)?;
    ingest::write_split_records(&split, &mut w)?;
    finish(w, &p)?;
    let p = dir.join("pois.jsonl");
    let mut w = create(&p)?;
    ingest::write_poi_table(&split, &mut w)?;
    finish(w, &p)?;

    let r = &split.report;
    let count = |s: &ingest::UserSequences| s.values().map(Vec::len).sum::<usize>();
    let report = format!(
        "input_events = {}\nkept_events = {}\nrounds = {}\ndropped_unseen = {}\nusers = {}\npois = {}\ncategories = {}\ntrain_events = {}\nvalidation_events = {}\ntest_events = {}\n",
        r.input_events,
        r.kept_events,
        r.rounds,
        r.dropped_unseen,
        split.user_vocab.len(),
        split.poi_table.len(),
        split.category_vocab.len(),
        count(&split.train),
        count(&split.validation),
        count(&split.test),
    );
    write_text(&dir.join("report.txt"), &report)?;
    info!("{} users, {} POIs after filtering", split.user_vocab.len(), split.poi_table.len());
    ctx.manifest(&dir, "ingest", &[&input], None)
}

pub fn features(ctx: &Context) -> Result<()> {
    let (split, input) = load_split(ctx)?;
    let dir = ctx.stage_dir("features")?;
    let regions: RegionVocab = build_region_vocab(
        split.poi_table.values().map(|p| (p.latitude, p.longitude)),
        ctx.config.region_precision,
    )?;
    let space = FeatureSpace::new(
        split.category_vocab.clone(),
        regions.clone(),
        split.user_vocab.clone(),
        ctx.config.top_k_slots,
        ctx.config.top_k_visitors,
    )?;
    let matrix = build_feature_matrix(split.poi_table.values(), &space)?;
    let p = dir.join("features.txt");
    let mut w = create(&p)?;
    matrix.write_to(&mut w)?;
    finish(w, &p)?;
    let p = dir.join("regions.txt");
    let mut w = create(&p)?;
    regions.write_to(&mut w)?;
    finish(w, &p)?;
    info!("{} POIs x {} features", matrix.len(), matrix.width());
    ctx.manifest(&dir, "features", &[&input], None)
}

pub fn train_codebook(ctx: &Context) -> Result<()> {
    let (matrix, input) = load_features(ctx)?;
    let dir = ctx.stage_dir("codebook")?;
    let x = dense(&matrix)?;
    let (model, report) = rqvae::train(&x, &ctx.config.rqvae)?;
    if let Some(msg) = &report.aborted {
        log::warn!("training aborted: {msg}");
    }
    let p = dir.join("training_log.tsv");
    let mut w = create(&p)?;
    report.write_log(&mut w)?;
    finish(w, &p)?;
    let p = dir.join("model.ckpt");
    let mut w = create(&p)?;
    model.write_checkpoint(&mut w)?;
    finish(w, &p)?;
    info!(
        "trained {} epochs, kept epoch {:?}",
        report.epochs.len(),
        report.best_epoch
    );
    ctx.manifest(&dir, "train-codebook", &[&input], Some(ctx.config.rqvae.seed))
}

pub fn assign_sids(ctx: &Context) -> Result<()> {
    let (matrix, features_path) = load_features(ctx)?;
    let (model, model_path) = load_model(ctx)?;
    let dir = ctx.stage_dir("sids")?;
    let tuples = model.infer_indices(&dense(&matrix)?)?;
    let cfg = model.config();
    let registry = sidregistry::assign_sids(
        matrix.rows.iter().map(|r| r.poi_id.clone()).zip(tuples),
        cfg.codebook_size,
        cfg.num_layers,
    )?;
    let p = dir.join("registry.tsv");
    let mut w = create(&p)?;
    registry.write_to(&mut w)?;
    finish(w, &p)?;
    let stats = registry.stats();
    info!("{} POIs, {} unique base tuples", stats.pois, stats.unique);
    ctx.manifest(&dir, "assign-sids", &[&features_path, &model_path], None)
}

pub fn stats(ctx: &Context) -> Result<()> {
    let (registry, input) = load_registry(ctx)?;
    let dir = ctx.stage_dir("stats")?;
    let mut buf = Vec::new();
    registry.stats().write_to(&mut buf)?;
    writeln!(buf, "registry_sha256 = {}", registry.content_hash())?;
    let text = String::from_utf8(buf)?;
    print!("{text}");
    write_text(&dir.join("stats.txt"), &text)?;
    ctx.manifest(&dir, "stats", &[&input], None)
}

pub fn emit_prompts(ctx: &Context) -> Result<()> {
    let (split, split_path) = load_split(ctx)?;
    let (registry, registry_path) = load_registry(ctx)?;
    let dir = ctx.stage_dir("prompts")?;
    let seed = stage_seed(ctx.config.seed, "prompts");
    let examples = promptgen::make_training_set(&split.train, &registry, &ctx.config.prompts, seed)?;
    if examples.is_empty() {
        bail!("no training windows with at least two check-ins");
    }
    let p = dir.join("train.jsonl");
    let mut w = create(&p)?;
    promptgen::write_jsonl(&examples, &mut w)?;
    finish(w, &p)?;
    write_text(
        &dir.join("registry_hash.txt"),
        &format!("{}\n", registry.content_hash()),
    )?;
    info!("{} training prompts", examples.len());
    ctx.manifest(&dir, "emit-prompts", &[&split_path, &registry_path], Some(seed))
}

pub fn emit_eval(ctx: &Context) -> Result<()> {
    let (split, split_path) = load_split(ctx)?;
    let (registry, registry_path) = load_registry(ctx)?;
    let dir = ctx.stage_dir("eval")?;
    let cases = build_eval_instances(&split, ctx.config.eval_history_len);
    if cases.skipped_users > 0 {
        info!("{} users without a test check-in", cases.skipped_users);
    }
    let rows = evalrec::build_manifest(&cases.cases, &registry, ctx.config.prompts.variant)?;
    let p = dir.join("instances.jsonl");
    let mut w = create(&p)?;
    evalrec::write_manifest(&rows, &mut w)?;
    finish(w, &p)?;
    let targets: String = rows.iter().map(|r| format!("{}\n", r.instance.target_sid)).collect();
    write_text(&dir.join("targets.txt"), &targets)?;
    info!("{} evaluation instances", rows.len());
    ctx.manifest(&dir, "emit-eval", &[&split_path, &registry_path], None)
}

pub fn baseline(ctx: &Context) -> Result<()> {
    let (split, split_path) = load_split(ctx)?;
    let (registry, registry_path) = load_registry(ctx)?;
    let (rows, instances_path) = load_instances(ctx)?;
    let dir = ctx.stage_dir("baseline")?;
    let sequences: Vec<Vec<String>> = split
        .train
        .values()
        .map(|seq| {
            seq.iter()
                .map(|c| Ok(registry.require(&c.poi_id)?.render()))
                .collect::<poisid::Result<Vec<_>>>()
        })
        .collect::<poisid::Result<_>>()?;
    let refs: Vec<Vec<&str>> = sequences.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
    let model = MarkovModel::fit(refs, ctx.config.smoothing);
    let instances: Vec<evalrec::EvalInstance> = rows.into_iter().map(|r| r.instance).collect();
    let predictions: Vec<Option<String>> = instances.iter().map(|i| model.predict(i).map(str::to_string)).collect();
    let text: String = predictions.iter().map(|p| format!("{}\n", p.as_deref().unwrap_or(""))).collect();
    write_text(&dir.join("predictions.txt"), &text)?;
    let report = evalrec::score_instances(&predictions, &instances)?;
    let p = dir.join("report.txt");
    let mut w = create(&p)?;
    report.write_to(&mut w)?;
    finish(w, &p)?;
    println!("markov acc1 = {:.6} ({} / {})", report.acc1, report.hits, report.n);
    ctx.manifest(&dir, "baseline", &[&split_path, &registry_path, &instances_path], None)
}

pub fn score(ctx: &Context, predictions: &Path) -> Result<()> {
    let (rows, instances_path) = load_instances(ctx)?;
    if !predictions.is_file() {
        bail!("missing prediction file {}", predictions.display());
    }
    let dir = ctx.stage_dir("score")?;
    let instances: Vec<evalrec::EvalInstance> = rows.into_iter().map(|r| r.instance).collect();
    let report = evalrec::score_external(open(predictions)?, &instances, ctx.config.rqvae.num_layers)?;
    let p = dir.join("report.txt");
    let mut w = create(&p)?;
    report.write_to(&mut w)?;
    finish(w, &p)?;
    println!(
        "acc1 = {:.6} ({} / {}, {} unparseable)",
        report.acc1, report.hits, report.n, report.unparseable
    );
    ctx.manifest(&dir, "score", &[&instances_path, predictions], None)
}

pub fn analyze(ctx: &Context) -> Result<()> {
    let (split, split_path) = load_split(ctx)?;
    let (registry, registry_path) = load_registry(ctx)?;
    let (matrix, features_path) = load_features(ctx)?;
    let (model, model_path) = load_model(ctx)?;
    let dir = ctx.stage_dir("analyze")?;
    let categories: HashMap<String, String> = split
        .poi_table
        .values()
        .map(|p| (p.poi_id.clone(), split.category_name(p).to_string()))
        .collect();
    for depth in 1..=registry.num_layers() {
        let profiles = sidregistry::prefix_category_profile(&registry, &categories, depth)?;
        let p = dir.join(format!("prefix_profile_l{depth}.csv"));
        let mut w = create(&p)?;
        sidregistry::write_profile_csv(&profiles, &mut w)?;
        finish(w, &p)?;
    }
    let seed = stage_seed(ctx.config.seed, "analyze");
    let sim = evalrec::prefix_similarity_report(
        &registry,
        &categories,
        &SimilarityConfig {
            pairs: ctx.config.analyze_pairs,
            resamples: ctx.config.analyze_resamples,
            confidence: 0.95,
            seed,
        },
    )?;
    let p = dir.join("prefix_similarity.csv");
    let mut w = create(&p)?;
    sim.write_csv(&mut w)?;
    finish(w, &p)?;

    // Encoder outputs with SIDs and categories for external plotting.
    let z = model.encode(&dense(&matrix)?)?;
    let p = dir.join("embeddings.tsv");
    let mut w = create(&p)?;
    let dims: Vec<String> = (0..z.cols()).map(|j| format!("z{j}")).collect();
    writeln!(w, "poi\tcategory\tsid\t{}", dims.join("\t"))?;
    let mut order: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in matrix.rows.iter().enumerate() {
        order.insert(&r.poi_id, i);
    }
    for (poi, i) in order {
        let values: Vec<String> = z.row(i).iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            w,
            "{poi}\t{}\t{}\t{}",
            categories.get(poi).map_or("", String::as_str),
            registry.require(poi)?,
            values.join("\t")
        )?;
    }
    finish(w, &p)?;
    info!(
        "shared prefix: same-category {:.3}, cross-category {:.3}",
        sim.same.mean, sim.cross.mean
    );
    ctx.manifest(
        &dir,
        "analyze",
        &[&split_path, &registry_path, &features_path, &model_path],
        Some(seed),
    )
}
