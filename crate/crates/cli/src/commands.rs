use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use pr2r_core::checkpoint;
use pr2r_core::condense::{condense_update, init_synthetic, CondenseConfig, Roi, SyntheticSample};
use pr2r_core::data::{generate_benchmark, read_dataset, write_dataset, BenchmarkConfig, Sample, Split, TaskStream};
use pr2r_core::lifelong::{run_sequence, Learner, RunConfig, RunReport};
use pr2r_core::metrics::{evaluate_domain, MetricsRecord};
use pr2r_core::model::{ModelParams, ParamSet};
use pr2r_core::Tensor;

use crate::config::{parse_config, render_config, MANIFEST_SECTION};
use crate::ppm::Ppm;
use crate::{CliError, EvalArgs, GenDataArgs, PreviewArgs, RunArgs, SEED_ENV};

pub const METRICS_HEADER: [&str; 7] = ["domain", "stage", "map", "rank1", "queries", "gallery", "role"];
pub const EVAL_HEADER: [&str; 6] = ["domain", "stage", "map", "rank1", "queries", "gallery"];
pub const FORGETTING_HEADER: [&str; 5] = ["domain", "role", "best_map", "final_map", "forgetting"];
pub const TRACE_HEADER: [&str; 5] = ["step", "total", "grad_match", "ce", "triplet"];
const STAGE_KEY: &str = "meta.stage";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.kind() {
        csv::ErrorKind::Io(_) => io_err(path, e),
        _ => CliError::Runtime(format!("{}: {e}", path.display())),
    }
}

/// `--seed`, then `PR2R_SEED`, then `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if args.domains == 0 {
        return Err(CliError::Usage("--domains must be at least 1".into()));
    }
    if args.ids < 4 || args.samples < 4 {
        return Err(CliError::Usage("--ids and --samples must both be at least 4".into()));
    }
    let config = BenchmarkConfig {
        domains: args.domains,
        unseen_domains: args.unseen,
        ids_per_domain: args.ids,
        samples_per_id: args.samples,
        seed: resolve_seed(args.seed, BenchmarkConfig::default().seed)?,
        ..BenchmarkConfig::default()
    };
    let stream = generate_benchmark(&config).map_err(|e| match e {
        pr2r_core::Error::InvalidArgument { .. } => CliError::Usage(e.to_string()),
        other => other.into(),
    })?;
    let digest = write_dataset(&stream, &args.out)?;
    println!("samples {}", stream.sample_count());
    println!("digest {digest}");
    Ok(())
}

fn role(report_seen: &[usize], domain: usize) -> &'static str {
    if report_seen.contains(&domain) {
        "seen"
    } else {
        "unseen"
    }
}

fn write_metrics(path: &Path, report: &RunReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in &report.records {
        w.write_record([
            r.domain.to_string(),
            r.stage.to_string(),
            r.map.to_string(),
            r.rank1.to_string(),
            r.queries.to_string(),
            r.gallery.to_string(),
            role(&report.seen, r.domain).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_forgetting(path: &Path, report: &RunReport) -> Result<(), CliError> {
    let agg = &report.aggregate;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(FORGETTING_HEADER).map_err(|e| csv_err(path, e))?;
    let last = agg.matrix.len() - 1;
    for (j, &d) in agg.domains.iter().enumerate() {
        let best = agg.matrix.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
        w.write_record([
            d.to_string(),
            role(&report.seen, d).to_string(),
            best.to_string(),
            agg.matrix[last][j].to_string(),
            agg.forgetting[j].to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn model_checkpoint(model: &ModelParams, stage: usize) -> Vec<(String, Tensor)> {
    let mut entries = model.params().entries().to_vec();
    entries.push((STAGE_KEY.to_string(), Tensor::scalar(stage as f64)));
    entries
}

/// Splits a checkpoint into the model and its recorded stage (0 if absent).
pub fn model_from_checkpoint(entries: Vec<(String, Tensor)>) -> Result<(ModelParams, usize), CliError> {
    let mut stage = 0;
    let mut params = Vec::new();
    for (name, t) in entries {
        if name == STAGE_KEY {
            stage = t.data().first().copied().unwrap_or(0.0) as usize;
        } else {
            params.push((name, t));
        }
    }
    Ok((ModelParams::from_params(ParamSet::new(params))?, stage))
}

fn sample_index(stream: &TaskStream) -> BTreeMap<usize, &Sample> {
    stream.all_domains().flat_map(|d| &d.samples).map(|s| (s.id, s)).collect()
}

fn triptych_name(e: &SyntheticSample, k: usize) -> String {
    format!("d{}_id{}_{}.ppm", e.domain, e.identity, k)
}

/// Writes one original | masked | condensed PPM per memory entry.
pub fn write_triptychs(dir: &Path, entries: &[SyntheticSample], stream: &TaskStream) -> Result<(), CliError> {
    create_dir(dir)?;
    let samples = sample_index(stream);
    for (k, e) in entries.iter().enumerate() {
        let original = samples
            .get(&e.source)
            .ok_or_else(|| CliError::Runtime(format!("memory entry {k} refers to unknown sample {}", e.source)))?;
        let ppm = Ppm::from_panels(&[&original.image, &e.initial, &e.pixels]).map_err(CliError::Runtime)?;
        write_file(&dir.join(triptych_name(e, k)), &ppm.encode())?;
    }
    Ok(())
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn check_batch_fits(cfg: &RunConfig, stream: &TaskStream) -> Result<(), CliError> {
    let pk = cfg.p_ids * cfg.k_instances;
    for d in &stream.domains {
        let n = d.split(Split::Train).count();
        if pk > n {
            return Err(CliError::Usage(format!(
                "batch of {} identities x {} instances exceeds the {n} training samples of domain {}",
                cfg.p_ids, cfg.k_instances, d.id
            )));
        }
    }
    Ok(())
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    if args.no_replay {
        cfg.lambda = 0.0;
    }
    if args.no_style {
        cfg.gamma = 0.0;
    }
    if args.no_condense {
        cfg.condense = false;
    }
    let stream = read_dataset(&args.data)?;
    if stream.domains.is_empty() {
        return Err(CliError::Usage(format!("{} has no training domains", args.data.display())));
    }
    check_batch_fits(&cfg, &stream)?;
    create_dir(&args.out)?;
    let started = unix_seconds();
    let report = run_sequence(&stream, &cfg)?;
    let finished = unix_seconds();

    write_metrics(&args.out.join("metrics.csv"), &report)?;
    write_forgetting(&args.out.join("forgetting.csv"), &report)?;

    let ckpt = args.out.join("checkpoints");
    create_dir(&ckpt)?;
    for (t, model) in report.stage_models.iter().enumerate() {
        checkpoint::save(&ckpt.join(format!("stage_{}.pr2r", t + 1)), &model_checkpoint(model, t + 1))?;
    }
    for style in &report.learner.styles {
        checkpoint::save(&ckpt.join(format!("style_{}.pr2r", style.domain)), style.params().entries())?;
    }
    report.learner.memory.save(&args.out.join("memory"))?;
    write_triptychs(&args.out.join("condensed"), &report.learner.memory.entries, &stream)?;

    let per_stage = stream.all_domains().count();
    let mut manifest = render_config(&cfg);
    manifest.push_str(&format!("\n[{MANIFEST_SECTION}]\n"));
    manifest.push_str(&format!("dataset_digest = {}\n", stream.digest()));
    manifest.push_str(&format!("code_version = {} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")));
    manifest.push_str(&format!("seed = {}\n", cfg.seed));
    manifest.push_str(&format!("started = {started}\n"));
    manifest.push_str(&format!("finished = {finished}\n"));
    for (t, f) in report.finished.iter().enumerate() {
        let first = t * per_stage + 2;
        manifest.push_str(&format!(
            "stage_{} = metrics.csv rows {}-{}; trained domain {}; budget {}\n",
            t + 1,
            first,
            first + per_stage - 1,
            f.domain,
            f.budget
        ));
    }
    write_file(&args.out.join("run_manifest.txt"), manifest.as_bytes())?;

    let agg = &report.aggregate;
    println!("seen_map {:.4} seen_rank1 {:.4}", agg.seen_map, agg.seen_rank1);
    if let (Some(m), Some(r)) = (agg.unseen_map, agg.unseen_rank1) {
        println!("unseen_map {m:.4} unseen_rank1 {r:.4}");
    }
    Ok(())
}

fn domain_filter<'a>(stream: &'a TaskStream, wanted: &[usize]) -> Result<Vec<&'a pr2r_core::data::Domain>, CliError> {
    let all: Vec<_> = stream.all_domains().collect();
    if wanted.is_empty() {
        return Ok(all);
    }
    let valid: Vec<String> = all.iter().map(|d| d.id.to_string()).collect();
    wanted
        .iter()
        .map(|&w| {
            all.iter().copied().find(|d| d.id == w).ok_or_else(|| {
                CliError::Usage(format!("unknown domain {w}; valid domain ids: {}", valid.join(", ")))
            })
        })
        .collect()
}

pub fn eval_records(model: &ModelParams, stage: usize, domains: &[&pr2r_core::data::Domain]) -> Result<Vec<MetricsRecord>, CliError> {
    domains
        .iter()
        .map(|d| evaluate_domain(model, d, stage).map_err(CliError::from))
        .collect()
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let entries = checkpoint::load(&args.checkpoint).map_err(|e| match e {
        pr2r_core::Error::Format { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Io(other.to_string()),
    })?;
    let (model, stage) = model_from_checkpoint(entries)?;
    let stream = read_dataset(&args.data)?;
    let domains = domain_filter(&stream, &args.domains)?;
    let records = eval_records(&model, stage, &domains)?;
    let mut w = csv::Writer::from_writer(out);
    let stdout = Path::new("<stdout>");
    w.write_record(EVAL_HEADER).map_err(|e| csv_err(stdout, e))?;
    for r in records {
        w.write_record([
            r.domain.to_string(),
            r.stage.to_string(),
            r.map.to_string(),
            r.rank1.to_string(),
            r.queries.to_string(),
            r.gallery.to_string(),
        ])
        .map_err(|e| csv_err(stdout, e))?;
    }
    w.flush().map_err(|e| io_err(stdout, e))
}

pub fn condense_preview(args: &PreviewArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    let stream = read_dataset(&args.data)?;
    let valid: Vec<String> = stream.domains.iter().map(|d| d.id.to_string()).collect();
    let domain = stream.domains.iter().find(|d| d.id == args.domain).ok_or_else(|| {
        CliError::Usage(format!(
            "domain {} is not a training domain; valid domain ids: {}",
            args.domain,
            valid.join(", ")
        ))
    })?;
    create_dir(&args.out)?;
    let mut learner = Learner::new(cfg.clone())?;
    learner.begin_task(domain)?;
    let trace = learner.train_task(domain, None)?;
    let model = learner.model()?;
    let train: Vec<&Sample> = domain.split(Split::Train).collect();
    let mut synthetic = init_synthetic(&train, model, cfg.budget, Roi::face(), cfg.mask_sigma)?;
    let steps = condense_update(
        &mut synthetic,
        &train,
        &trace.snapshots,
        learner.labels.as_map(),
        &CondenseConfig {
            alpha: cfg.alpha,
            eta_s: cfg.eta_s,
            momentum: cfg.momentum,
            epochs: cfg.condense_epochs,
            real_batch: cfg.condense_real_batch,
            seed: cfg.seed,
        },
    )?;
    let path = args.out.join("trace.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(TRACE_HEADER).map_err(|e| csv_err(&path, e))?;
    for s in &steps {
        let part = |name: &str| s.loss.get(name).unwrap_or(0.0).to_string();
        w.write_record([s.step.to_string(), s.loss.total.to_string(), part("grad_match"), part("ce"), part("triplet")])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    write_triptychs(&args.out.join("triptychs"), &synthetic, &stream)?;
    let mean_drift = synthetic.iter().map(SyntheticSample::mean_abs_drift).sum::<f64>() / synthetic.len() as f64;
    println!("entries {} steps {} mean_abs_drift {mean_drift:.6}", synthetic.len(), steps.len());
    Ok(())
}
