//! Runs `suite acceptance --seed 42` twice through the binary, prints one
//! line per criterion and checks that every CSV output is byte-identical
//! across the two runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

const BIN: &str = env!("CARGO_BIN_EXE_rough-young");

fn run_suite(out: &Path) -> i32 {
    let status = Command::new(BIN)
        .args(["suite", "acceptance", "--seed", "42", "--out"])
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("binary runs");
    status.code().unwrap_or(-1)
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("output dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Row {
    id: u32,
    name: String,
    pass: bool,
    value: String,
    tolerance: String,
}

fn summary(dir: &Path) -> Vec<Row> {
    let text = std::fs::read_to_string(dir.join("acceptance/acceptance_summary.csv")).expect("summary written");
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Row {
                id: f[0].parse().unwrap(),
                name: f[1].into(),
                pass: f[2] == "true",
                value: f[3].into(),
                tolerance: f[4].into(),
            }
        })
        .collect()
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let (first, second) = (tmp.path().join("first"), tmp.path().join("second"));
    let code_first = run_suite(&first);
    let code_second = run_suite(&second);
    let (a, b) = (csv_files(&first), csv_files(&second));
    let identical = !a.is_empty() && a == b;

    let rows = summary(&first);
    let mut err = std::io::stderr().lock();
    let mut all = code_first == 0 && code_second == 0;
    for r in &rows {
        let pass = if r.id == 14 { r.pass && identical } else { r.pass };
        all &= pass;
        let _ = writeln!(
            err,
            "criterion {:>2} {:<30} {}  value {} tolerance {}",
            r.id,
            r.name,
            if pass { "PASS" } else { "FAIL" },
            r.value,
            r.tolerance
        );
    }
    let _ = writeln!(err, "two runs: {} CSV files, byte-identical: {identical}", a.len());
    if rows.len() != 14 {
        let _ = writeln!(err, "expected 14 criteria, found {}", rows.len());
        all = false;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        let _ = writeln!(err, "exit statuses: {code_first}, {code_second}");
        ExitCode::FAILURE
    }
}
