//! End-to-end checks of the `pr2r` binary: exit codes, file contracts and
//! reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pr2r_cli::ppm::{verify_triptych, Ppm};
use pr2r_core::condense::Roi;
use pr2r_core::data::read_dataset;

const TINY_CONFIG: &str = "\
# small enough for a few seconds per run
[training]
steps_per_task = 12
warmup_steps = 3
p_ids = 4
k_instances = 2
snapshots = 2

[memory]
condense_epochs = 1

[style]
style_steps = 5
";

fn pr2r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pr2r"))
        .args(args)
        .env_remove("PR2R_SEED")
        .output()
        .expect("binary runs")
}

fn pr2r_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pr2r"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let o = pr2r(&[
            "gen-data", "--out", s(&ws.data()), "--domains", "2", "--unseen", "1", "--ids", "4", "--samples", "6", "--seed", "3",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::write(ws.config(), TINY_CONFIG).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.toml")
    }

    fn run(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let (data, config) = (self.data(), self.config());
        let mut args = vec!["run", "--data", s(&data), "--config", s(&config), "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = pr2r(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    }
}

#[test]
fn argument_errors_exit_2() {
    assert_eq!(code(&pr2r(&[])), 2);
    assert_eq!(code(&pr2r(&["frobnicate"])), 2);
    assert_eq!(code(&pr2r(&["gen-data"])), 2);
    assert_eq!(code(&pr2r(&["--help"])), 0);
    assert_eq!(code(&pr2r(&["--version"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let o = pr2r(&["gen-data", "--out", s(dir.path()), "--ids", "2"]);
    assert_eq!(code(&o), 2);
    let o = pr2r(&["gen-data", "--out", s(dir.path()), "--domains", "0"]);
    assert_eq!(code(&o), 2);
    let o = pr2r_env(&["gen-data", "--out", s(&dir.path().join("x"))], "PR2R_SEED", "seven");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("PR2R_SEED"));
}

#[test]
fn io_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let o = pr2r(&["gen-data", "--out", s(&blocker.join("sub")), "--ids", "4", "--samples", "6", "--domains", "1"]);
    assert_eq!(code(&o), 1);
    assert!(!stderr(&o).is_empty());

    let o = pr2r(&["run", "--data", s(&dir.path().join("missing")), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 1);
    let o = pr2r(&[
        "eval", "--checkpoint", s(&dir.path().join("none.pr2r")), "--data", s(&dir.path().join("missing")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_data_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = pr2r(&["gen-data", "--out", s(&dir.path().join("a"))]);
    let b = pr2r(&["gen-data", "--out", s(&dir.path().join("b"))]);
    assert_eq!(code(&a), 0);
    assert!(stdout(&a).contains("samples 480"), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(read_dataset(&dir.path().join("a")).unwrap().sample_count(), 480);
    let c = pr2r_env(&["gen-data", "--out", s(&dir.path().join("c"))], "PR2R_SEED", "8");
    assert_ne!(stdout(&a), stdout(&c));
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new();
    let bad = ws.path("bad.toml");
    fs::write(&bad, "[objective]\n\ngamma = abc\n").unwrap();
    let o = pr2r(&["run", "--data", s(&ws.data()), "--config", s(&bad), "--out", s(&ws.path("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gamma") && stderr(&o).contains('3'), "{}", stderr(&o));
    fs::write(&bad, "colour = 3\n").unwrap();
    let o = pr2r(&["run", "--data", s(&ws.data()), "--config", s(&bad), "--out", s(&ws.path("o"))]);
    assert_eq!(code(&o), 2);
    fs::write(&bad, "p_ids = 40\n").unwrap();
    let o = pr2r(&["run", "--data", s(&ws.data()), "--config", s(&bad), "--out", s(&ws.path("o"))]);
    assert_eq!(code(&o), 2);
    let o = pr2r(&["run", "--data", s(&ws.data()), "--config", s(&ws.path("absent.toml")), "--out", s(&ws.path("o"))]);
    assert_eq!(code(&o), 1);
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn run_outputs_and_reproducibility() {
    let ws = Workspace::new();
    let out = ws.run("run1", &["--seed", "5"]);

    let metrics = read(&out.join("metrics.csv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "domain,stage,map,rank1,queries,gallery,role");
    // 2 stages × 3 domains.
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(read(&out.join("forgetting.csv")).starts_with("domain,role,best_map,final_map,forgetting"));
    for f in ["stage_1.pr2r", "stage_2.pr2r", "style_0.pr2r", "style_1.pr2r"] {
        assert!(out.join("checkpoints").join(f).is_file(), "{f}");
    }
    assert!(out.join("memory").join("memory.csv").is_file());
    let manifest = read(&out.join("run_manifest.txt"));
    for key in ["gamma", "lambda", "alpha", "eta_s", "style_jitter", "dataset_digest", "seed = 5"] {
        assert!(manifest.contains(key), "manifest lacks {key}");
    }

    // Every exported triptych passes the privacy checks.
    let stream = read_dataset(&ws.data()).unwrap();
    let mut count = 0;
    for entry in fs::read_dir(out.join("condensed")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        let identity: usize = name.split('_').nth(1).unwrap().trim_start_matches("id").parse().unwrap();
        let raw: Vec<_> = stream
            .all_domains()
            .flat_map(|d| &d.samples)
            .filter(|x| x.identity == identity)
            .map(|x| &x.image)
            .collect();
        verify_triptych(&fs::read(&path).unwrap(), Roi::face(), &raw).unwrap_or_else(|e| panic!("{name}: {e}"));
        count += 1;
    }
    let memory_rows = read(&out.join("memory").join("memory.csv")).lines().count() - 1;
    assert_eq!(count, memory_rows);

    // Same seed: identical metrics. Restart from the manifest: identical too.
    let again = ws.run("run2", &["--seed", "5"]);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());
    let from_manifest = ws.path("run3");
    let o = pr2r(&[
        "run", "--data", s(&ws.data()), "--config", s(&out.join("run_manifest.txt")), "--out", s(&from_manifest),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(from_manifest.join("metrics.csv")).unwrap());

    // The environment seed applies when no flag is given.
    let env_run = ws.path("run4");
    let o = pr2r_env(
        &["run", "--data", s(&ws.data()), "--config", s(&ws.config()), "--out", s(&env_run)],
        "PR2R_SEED",
        "5",
    );
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(env_run.join("metrics.csv")).unwrap());

    // Eval: fixed header, deterministic, checkpoint stage carried through.
    let ckpt = out.join("checkpoints").join("stage_2.pr2r");
    let e1 = pr2r(&["eval", "--checkpoint", s(&ckpt), "--data", s(&ws.data())]);
    let e2 = pr2r(&["eval", "--checkpoint", s(&ckpt), "--data", s(&ws.data())]);
    assert_eq!(code(&e1), 0, "{}", stderr(&e1));
    assert_eq!(stdout(&e1), stdout(&e2));
    let table = stdout(&e1);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "domain,stage,map,rank1,queries,gallery");
    assert_eq!(rows.len(), 4);
    for (row, metric) in rows[1..].iter().zip(&lines[4..]) {
        assert!(metric.starts_with(row), "{row} vs {metric}");
    }
    let one = pr2r(&["eval", "--checkpoint", s(&ckpt), "--data", s(&ws.data()), "--domain", "1"]);
    assert_eq!(stdout(&one).lines().count(), 2);
    let bad = pr2r(&["eval", "--checkpoint", s(&ckpt), "--data", s(&ws.data()), "--domain", "9"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("0, 1, 2"), "{}", stderr(&bad));
    let garbage = ws.path("garbage.pr2r");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&pr2r(&["eval", "--checkpoint", s(&garbage), "--data", s(&ws.data())])), 1);

    // Report: tendency and averages recomputed from metrics.csv.
    let o = pr2r(&["report", "--run", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tendency = read(&out.join("tendency.csv"));
    assert_eq!(tendency.lines().count(), 1 + 2 * 3);
    let averages = read(&out.join("averages.csv"));
    let last: Vec<f64> = averages.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let seen: Vec<f64> = lines[4..6].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!((last[1] - (seen[0] + seen[1]) / 2.0).abs() <= 1e-9);

    // Report errors name the problem.
    let broken = ws.path("broken");
    fs::create_dir_all(&broken).unwrap();
    let without_row: Vec<&str> = lines.iter().enumerate().filter(|(i, _)| *i != 5).map(|(_, l)| *l).collect();
    fs::write(broken.join("metrics.csv"), without_row.join("\n")).unwrap();
    let o = pr2r(&["report", "--run", s(&broken)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stage 2 domain 1"), "{}", stderr(&o));
    let mut malformed: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    malformed[3] = malformed[3].replacen(",1,", ",one,", 1);
    fs::write(broken.join("metrics.csv"), malformed.join("\n")).unwrap();
    let o = pr2r(&["report", "--run", s(&broken)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("row 4"), "{}", stderr(&o));
}

#[test]
fn single_stage_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&pr2r(&["gen-data", "--out", s(&data), "--domains", "1", "--ids", "4", "--samples", "6"])), 0);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = pr2r(&["run", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&pr2r(&["report", "--run", s(&out)])), 0);
    assert_eq!(read(&out.join("tendency.csv")).lines().count(), 2);
}

#[test]
fn ablation_flags_change_the_run() {
    let ws = Workspace::new();
    let full = ws.run("full", &[]);
    let naive = ws.run("naive", &["--no-replay", "--no-style"]);
    let plain = ws.run("plain", &["--no-condense"]);
    // Metrics can saturate on a tiny benchmark; the weights cannot.
    let last = |p: &Path| fs::read(p.join("checkpoints").join("stage_2.pr2r")).unwrap();
    assert_ne!(last(&full), last(&naive));
    assert_ne!(last(&full), last(&plain));
    assert!(!naive.join("checkpoints").join("style_0.pr2r").exists());
    assert!(read(&naive.join("run_manifest.txt")).contains("lambda = 0"));
    let memory = read(&plain.join("memory").join("memory.csv"));
    for row in memory.lines().skip(1) {
        // update_steps column
        assert_eq!(row.split(',').nth(6), Some("0"), "{row}");
    }
}

#[test]
fn condense_preview_outputs() {
    let ws = Workspace::new();
    let out = ws.path("preview");
    let o = pr2r(&[
        "condense-preview", "--data", s(&ws.data()), "--domain", "1", "--config", s(&ws.config()), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = read(&out.join("trace.csv"));
    assert_eq!(trace.lines().next(), Some("step,total,grad_match,ce,triplet"));
    assert_eq!(trace.lines().count(), 1 + 4);
    assert!(stdout(&o).contains("mean_abs_drift"));

    let frozen = ws.path("frozen.toml");
    fs::write(&frozen, format!("{TINY_CONFIG}\n[memory]\neta_s = 0\n")).unwrap();
    let out = ws.path("preview0");
    let o = pr2r(&[
        "condense-preview", "--data", s(&ws.data()), "--domain", "0", "--config", s(&frozen), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut seen = 0;
    for entry in fs::read_dir(out.join("triptychs")).unwrap() {
        let ppm = Ppm::decode(&fs::read(entry.unwrap().path()).unwrap()).unwrap();
        assert_eq!(ppm.panel(1, 3), ppm.panel(2, 3));
        seen += 1;
    }
    assert_eq!(seen, 4 * 2);

    let o = pr2r(&[
        "condense-preview", "--data", s(&ws.data()), "--domain", "2", "--config", s(&ws.config()), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 2);
}
