use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[grid]
nx = 4
ny = 4
neurons_per_column = 60

[run]
duration = "100ms"
seed = 3
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs the binary with `--config small.toml` appended.
    fn corticarc(&self, args: &[&str]) -> Output {
        let out = Command::new(env!("CARGO_BIN_EXE_corticarc"))
            .args(args)
            .arg("--config")
            .arg(self.path("small.toml"))
            .output()
            .unwrap();
        if !out.status.success() {
            eprintln!("{}", String::from_utf8_lossy(&out.stderr));
        }
        out
    }

    fn run_to(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let mut args = vec!["run", "--output", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = self.corticarc(&args);
        assert!(o.status.success(), "run {extra:?} failed");
        dir
    }
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn raster(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("raster.tsv")).unwrap()
}

#[test]
fn zero_duration_builds_without_simulating() {
    let ws = Workspace::new();
    let dir = ws.run_to("zero", &["--duration", "0s"]);
    let r = report(&dir);
    assert_eq!(r["steps"], 0);
    assert_eq!(r["total_spikes"], 0);
    assert!(r["recurrent_synapses"].as_u64().unwrap() > 0);
    assert_eq!(raster(&dir), b"time_ms\tgid\n");
    let echo = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(echo.contains("duration = \"0ms\""), "{echo}");
}

#[test]
fn same_seed_gives_byte_identical_rasters() {
    let ws = Workspace::new();
    let a = ws.run_to("a", &["--seed", "7"]);
    let b = ws.run_to("b", &["--seed", "7"]);
    let c = ws.run_to("c", &["--seed", "8"]);
    assert!(raster(&a).len() > 100, "no activity to compare");
    assert_eq!(raster(&a), raster(&b));
    assert_ne!(raster(&a), raster(&c));
}

#[test]
fn worker_count_and_transport_do_not_change_the_raster() {
    let ws = Workspace::new();
    let one = ws.run_to("one", &["--workers", "1"]);
    let four = ws.run_to("four", &["--workers", "4", "--transport", "inprocess"]);
    let procs = ws.run_to("procs", &["--workers", "2", "--transport", "multiprocess"]);
    assert_eq!(raster(&one), raster(&four));
    assert_eq!(raster(&one), raster(&procs));
    assert_eq!(report(&one)["checksum"], report(&four)["checksum"]);
    assert_eq!(report(&one)["checksum"], report(&procs)["checksum"]);
    assert_eq!(report(&procs)["workers"], 2);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("grid,workers,kernel"), "{header}");
    lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn strong_bench_writes_one_row_per_worker_count() {
    let ws = Workspace::new();
    let out = ws.path("strong");
    let o = ws.corticarc(&["bench", "--workers", "1,2,4", "--mode", "strong", "--output", out.to_str().unwrap()]);
    assert!(o.status.success());
    let rows = csv_rows(&out.join("scaling.csv"));
    assert_eq!(rows.len(), 3);
    let workers: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(workers, ["1", "2", "4"]);
    // Recurrent and external event counts.
    assert!(rows.iter().all(|r| r[5] == rows[0][5] && r[6] == rows[0][6]));
    assert!(rows.iter().all(|r| r[0] == "4x4"));
}

#[test]
fn weak_bench_grows_the_grid_with_the_workers() {
    let ws = Workspace::new();
    let out = ws.path("weak");
    let o = ws.corticarc(&[
        "bench",
        "--workers",
        "1,2,4",
        "--mode",
        "weak",
        "--base-grid",
        "6x6",
        "--duration",
        "20ms",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let grids: Vec<String> = csv_rows(&out.join("scaling.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(grids, ["6x6", "8x8", "12x12"]);
}

#[test]
fn bench_without_worker_list_prints_usage() {
    let ws = Workspace::new();
    let o = ws.corticarc(&["bench"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--workers") && err.contains("Usage"), "{err}");
}

#[test]
fn configuration_errors_exit_with_two() {
    let ws = Workspace::new();
    std::fs::write(ws.path("small.toml"), "[grid]\nnxx = 4\n").unwrap();
    let o = ws.corticarc(&["run", "--output", ws.path("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nxx"));

    std::fs::write(ws.path("small.toml"), "[run]\nduration = 1.0\n").unwrap();
    let o = ws.corticarc(&["analyze"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_fault() {
    let ws = Workspace::new();
    std::fs::write(ws.path("blocker"), "").unwrap();
    let out = ws.path("blocker").join("out");
    let o = ws.corticarc(&["run", "--duration", "0s", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn analyze_reports_stencil_and_sizes() {
    let ws = Workspace::new();
    let o = ws.corticarc(&["analyze", "--stencil"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("stencil 7x7"), "{text}");
    assert!(text.contains("neurons 960 "), "{text}");
    // One matrix row per window row.
    assert_eq!(text.lines().filter(|l| l.matches('\t').count() == 6).count(), 7);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let o = Command::new(env!("CARGO_BIN_EXE_corticarc"))
                .args(["analyze", "--config"])
                .arg(&path)
                .output()
                .unwrap();
            assert!(o.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&o.stderr));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
