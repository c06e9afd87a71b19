//! Plot-ready tables from a run's `metrics.csv`: per-domain accuracy
//! tendency across stages and per-stage seen/unseen averages.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::commands::METRICS_HEADER;
use crate::{CliError, ReportArgs};

pub const TENDENCY_HEADER: [&str; 5] = ["domain", "role", "stage", "map", "rank1"];
pub const AVERAGES_HEADER: [&str; 5] = ["stage", "seen_map", "seen_rank1", "unseen_map", "unseen_rank1"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub domain: usize,
    pub stage: usize,
    pub map: f64,
    pub rank1: f64,
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageAverage {
    pub stage: usize,
    pub seen_map: f64,
    pub seen_rank1: f64,
    pub unseen: Option<(f64, f64)>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
        .clone();
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(CliError::Runtime(format!(
            "{}: row 1: expected header {}",
            path.display(),
            METRICS_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let bad = |msg: String| CliError::Runtime(format!("{}: row {row}: {msg}", path.display()));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(bad(format!("expected {} fields, found {}", METRICS_HEADER.len(), rec.len())));
        }
        let int = |k: usize| rec[k].trim().parse::<usize>().map_err(|_| bad(format!("{} is not an integer", METRICS_HEADER[k])));
        let real = |k: usize| {
            rec[k]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| bad(format!("{} is not a number in [0, 1]", METRICS_HEADER[k])))
        };
        let seen = match rec[6].trim() {
            "seen" => true,
            "unseen" => false,
            other => return Err(bad(format!("role `{other}` is neither seen nor unseen"))),
        };
        rows.push(MetricRow {
            domain: int(0)?,
            stage: int(1)?,
            map: real(2)?,
            rank1: real(3)?,
            seen,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Runtime(format!("{}: no metric rows", path.display())));
    }
    check_complete(&rows).map_err(|msg| CliError::Runtime(format!("{}: {msg}", path.display())))?;
    Ok(rows)
}

/// Every stage from 1 to the last must have a row for every domain.
pub fn check_complete(rows: &[MetricRow]) -> Result<(), String> {
    let domains: BTreeSet<usize> = rows.iter().map(|r| r.domain).collect();
    let last = rows.iter().map(|r| r.stage).max().unwrap_or(0);
    let present: BTreeSet<(usize, usize)> = rows.iter().map(|r| (r.stage, r.domain)).collect();
    let mut missing = Vec::new();
    for s in 1..=last {
        for &d in &domains {
            if !present.contains(&(s, d)) {
                missing.push(format!("stage {s} domain {d}"));
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(format!("missing rows: {}", missing.join(", ")))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn stage_averages(rows: &[MetricRow]) -> Vec<StageAverage> {
    let mut by_stage: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        by_stage.entry(r.stage).or_default().push(r);
    }
    by_stage
        .into_iter()
        .map(|(stage, rs)| {
            let pick = |seen: bool, f: fn(&MetricRow) -> f64| -> Vec<f64> { rs.iter().filter(|r| r.seen == seen).map(|r| f(r)).collect() };
            let unseen_map = pick(false, |r| r.map);
            StageAverage {
                stage,
                seen_map: mean(&pick(true, |r| r.map)),
                seen_rank1: mean(&pick(true, |r| r.rank1)),
                unseen: (!unseen_map.is_empty()).then(|| (mean(&unseen_map), mean(&pick(false, |r| r.rank1)))),
            }
        })
        .collect()
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let rows = read_metrics(&args.run.join("metrics.csv"))?;
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let write_err = |p: &Path, e: csv::Error| CliError::Io(format!("{}: {e}", p.display()));

    let path = out.join("tendency.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| write_err(&path, e))?;
    w.write_record(TENDENCY_HEADER).map_err(|e| write_err(&path, e))?;
    let mut sorted = rows.clone();
    sorted.sort_by_key(|r| (r.domain, r.stage));
    for r in &sorted {
        let role = if r.seen { "seen" } else { "unseen" };
        w.write_record([r.domain.to_string(), role.to_string(), r.stage.to_string(), r.map.to_string(), r.rank1.to_string()])
            .map_err(|e| write_err(&path, e))?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;

    let path = out.join("averages.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| write_err(&path, e))?;
    w.write_record(AVERAGES_HEADER).map_err(|e| write_err(&path, e))?;
    let averages = stage_averages(&rows);
    for a in &averages {
        let (um, ur) = a.unseen.map(|(m, r)| (m.to_string(), r.to_string())).unwrap_or_default();
        w.write_record([a.stage.to_string(), a.seen_map.to_string(), a.seen_rank1.to_string(), um, ur])
            .map_err(|e| write_err(&path, e))?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if let Some(last) = averages.last() {
        println!("stages {} final seen_map {:.4}", averages.len(), last.seen_map);
    }
    Ok(())
}
