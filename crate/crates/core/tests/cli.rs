//! Command-line behaviour, both in-process and through the built binary.

use std::path::PathBuf;
use std::process::Command;

use mobile_former::cli::{run, OUT_DIR_ENV};
use mobile_former::cost::CostEntry;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mobile-former-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn binary() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mobile-former"));
    cmd.env_remove(OUT_DIR_ENV);
    cmd
}

#[test]
fn summarize_prints_totals() {
    let r = run(["mobile-former", "summarize", "294M", "--res", "224"]);
    assert_eq!(r.code, 0, "{}", r.report);
    assert!(r.report.contains("total"), "{}", r.report);
    for pillar in ["stem", "mobile", "former", "bridge", "head"] {
        assert!(r.report.contains(pillar), "{pillar}");
    }
}

#[test]
fn summarize_records_parse_and_land_on_disk() {
    let dir = scratch("records");
    let path = dir.join("costs.csv");
    let r = run([
        "mobile-former",
        "summarize",
        "52M",
        "--format",
        "records",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 0, "{}", r.report);
    assert_eq!(r.output.as_deref(), Some(path.as_path()));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, r.report);
    let entries: Vec<CostEntry> = text
        .lines()
        .map(|l| CostEntry::from_record(l).unwrap())
        .collect();
    let madds: u64 = entries.iter().map(|e| e.madds).sum();
    assert!((45e6..60e6).contains(&(madds as f64)), "{madds}");
}

#[test]
fn summarize_reads_spec_files() {
    let dir = scratch("specfile");
    let path = dir.join("tiny.spec");
    std::fs::write(&path, mobile_former::arch::tiny_spec(4).serialize()).unwrap();
    let r = run(["mobile-former", "summarize", path.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.report);

    std::fs::write(&path, "name=broken\ntokens=3\n").unwrap();
    let r = run(["mobile-former", "summarize", path.to_str().unwrap()]);
    assert_eq!(r.code, 2, "{}", r.report);
}

#[test]
fn ablations_exit_cleanly() {
    for extra in [
        vec!["--tokens", "1"],
        vec!["--token-dim", "64"],
        vec!["--no-ffn"],
        vec!["--kernel", "5"],
        vec!["--no-former", "--static-relu"],
    ] {
        let mut argv = vec!["mobile-former", "ablate", "--base", "294M"];
        argv.extend(extra.iter().copied());
        let r = run(argv);
        assert_eq!(r.code, 0, "{extra:?}: {}", r.report);
        assert!(r.report.contains("PASS"), "{extra:?}: {}", r.report);
    }
}

#[test]
fn single_variant_verification() {
    let r = run(["mobile-former", "verify-costs", "--variant", "508M"]);
    assert_eq!(r.code, 0, "{}", r.report);
    assert_eq!(
        r.report.lines().filter(|l| l.starts_with("508M")).count(),
        1,
        "{}",
        r.report
    );
    // A zero tolerance cannot be met by any measured count.
    let r = run([
        "mobile-former",
        "verify-costs",
        "--variant",
        "508M",
        "--tol",
        "0",
    ]);
    assert_eq!(r.code, 1, "{}", r.report);
}

#[test]
fn usage_errors_exit_two() {
    for argv in [
        vec!["mobile-former", "verify-costs", "--variant", "nonexistent"],
        vec!["mobile-former", "summarize", "1000M"],
        vec!["mobile-former", "launch"],
        vec!["mobile-former", "summarize", "294M", "--res", "lots"],
        vec!["mobile-former"],
    ] {
        let r = run(argv.clone());
        assert_eq!(r.code, 2, "{argv:?}: {}", r.report);
        let report = r.report.to_lowercase();
        assert!(
            report.contains("usage") || report.contains("--help"),
            "{argv:?}: {}",
            r.report
        );
    }
    assert_eq!(run(["mobile-former", "--help"]).code, 0);
}

#[test]
fn gradcheck_passes() {
    let r = run(["mobile-former", "gradcheck", "--tiny"]);
    assert_eq!(r.code, 0, "{}", r.report);
}

#[test]
fn train_toy_writes_metrics() {
    let dir = scratch("train");
    let path = dir.join("m.csv");
    let argv = [
        "mobile-former",
        "train-toy",
        "--steps",
        "12",
        "--seed",
        "5",
        "--out",
        path.to_str().unwrap(),
    ];
    let r = run(argv);
    assert_eq!(r.code, 0, "{}", r.report);
    let first = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = first.lines().collect();
    assert_eq!(rows.len(), 12);
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f.len() == 3 || f.len() == 4, "{row}");
        assert_eq!(f[0].parse::<usize>().unwrap(), i);
        assert!(f[1].parse::<f64>().unwrap() >= 0.0);
        assert!(f[2].parse::<f64>().unwrap().is_finite());
    }
    // Same seed, same bytes.
    assert_eq!(run(argv).code, 0);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), first);
}

#[test]
fn attention_export_honours_flag_and_environment() {
    let dir = scratch("attention");
    let explicit = dir.join("explicit.csv");
    let out = binary()
        .args([
            "export-attention",
            "--spec",
            "tiny",
            "--out",
            explicit.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(std::fs::read_to_string(&explicit).unwrap().lines().count() > 1);

    let out = binary()
        .args(["export-attention", "--spec", "tiny"])
        .env(OUT_DIR_ENV, &dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        std::fs::read_to_string(dir.join("attention.csv")).unwrap(),
        std::fs::read_to_string(&explicit).unwrap()
    );

    let out = binary()
        .args(["export-attention", "--spec", "tiny"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn binary_reports_on_the_right_stream() {
    let out = binary().args(["summarize", "96M"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(!out.stdout.is_empty());
    let out = binary()
        .args(["verify-costs", "--variant", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x"));
}
