use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use micrometric::cli::{self, Metric, ScoreReport, SATURATION_REPORT_SCHEMA, SCORE_REPORT_SCHEMA, SYNTH_METADATA_SCHEMA};
use micrometric::io::load_manifest;
use micrometric::DatasetCalibration;
use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micrometric"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", s(dir)];
    args.extend_from_slice(extra);
    let out = bin(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.jsonl")
}

fn assert_valid(schema: &str, doc: &Value) {
    let schema: Value = serde_json::from_str(schema).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let msgs: Vec<String> = match compiled.validate(doc) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("schema violations: {msgs:?}");
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_pairs_manifest_and_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let small = ["--pairs", "3", "--height", "64", "--width", "48", "--seed", "11"];
    let manifest = synth(&a, &small);
    synth(&b, &small);
    let m = load_manifest(&manifest).unwrap();
    assert_eq!(m.entries.len(), 3);
    let images = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "tif"))
        .count();
    assert_eq!(images, 6);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let meta = read_json(&a.join("metadata.json"));
    assert_valid(SYNTH_METADATA_SCHEMA, &meta);
    assert_eq!(meta["params"]["seed"], 11);
    assert_eq!(meta["rng"], "chacha8");

    // Pixel sums of the written 16-bit files match the generator's bookkeeping.
    for (entry, pair) in m.entries.iter().zip(meta["pairs"].as_array().unwrap()) {
        let gt = micrometric::load_image(&entry.gt).unwrap();
        assert_eq!(gt.bit_depth(), Some(16));
        let sum: f64 = gt.pixels().iter().sum();
        assert_eq!(sum, pair["metadata"]["gt_sum"].as_f64().unwrap());
    }
}

#[test]
fn calibrate_recovers_scale_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth(
        &data,
        &[
            "--pairs", "4", "--height", "96", "--width", "96", "--poisson-gain", "0", "--read-noise", "0", "--format", "mfr",
        ],
    );
    let meta = read_json(&data.join("metadata.json"));
    let scale = meta["params"]["scale"].as_f64().unwrap();
    let c1 = tmp.path().join("c1.txt");
    let c2 = tmp.path().join("c2.txt");
    for c in [&c1, &c2] {
        let out = bin(&["calibrate", "--manifest", s(&manifest), "--out", s(c)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8(out.stdout).unwrap();
        for key in ["beta_gt:", "beta_pred:", "max_gt:", "alpha:", "iterations:"] {
            assert!(stdout.contains(key), "{stdout}");
        }
    }
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    let cal: DatasetCalibration = fs::read_to_string(&c1).unwrap().parse().unwrap();
    assert!((cal.alpha() / scale - 1.0).abs() < 0.01, "alpha {} vs scale {scale}", cal.alpha());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = bin(&["calibrate", "--manifest", s(&empty), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty manifest"));

    let out = bin(&["score", "--manifest", s(&empty), "--metric", "microssim"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibration required"));

    let out = bin(&["score", "--manifest", s(&tmp.path().join("missing.jsonl")), "--metric", "ssim"]);
    assert_eq!(out.status.code(), Some(2));

    let out = bin(&["score", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let out = bin(&["--version"]);
    assert_eq!(out.status.code(), Some(0));

    // A constant prediction leaves the closed-form seed undefined.
    let data = tmp.path().join("flat");
    fs::create_dir(&data).unwrap();
    let gt = micrometric::Image::from_fn(32, 32, |r, c| 10.0 + (r * c % 7) as f64).unwrap();
    let flat = micrometric::Image::filled(32, 32, 5.0).unwrap();
    micrometric::save_image(&gt, data.join("g.mfr"), micrometric::ImageFormat::Mfr).unwrap();
    micrometric::save_image(&flat, data.join("p.mfr"), micrometric::ImageFormat::Mfr).unwrap();
    let m = data.join("m.jsonl");
    fs::write(&m, "{\"id\": \"a\", \"gt\": \"g.mfr\", \"pred\": \"p.mfr\"}\n").unwrap();
    let out = bin(&["calibrate", "--manifest", s(&m), "--out", s(&data.join("c"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn identical_pairs_score_one_for_every_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--pairs", "2", "--height", "192", "--width", "192"]);
    let m = load_manifest(data.join("manifest.jsonl")).unwrap();
    let same = tmp.path().join("same.jsonl");
    let lines: String = m
        .entries
        .iter()
        .map(|e| format!("{{\"id\": \"{}\", \"gt\": \"{}\", \"pred\": \"{}\"}}\n", e.id, s(&e.gt), s(&e.gt)))
        .collect();
    fs::write(&same, lines).unwrap();
    let cal = tmp.path().join("cal.txt");
    assert!(bin(&["calibrate", "--manifest", s(&same), "--out", s(&cal)]).status.success());
    let report_path = tmp.path().join("report.json");
    let csv = tmp.path().join("report.csv");
    let out = bin(&[
        "score",
        "--manifest",
        s(&same),
        "--calibration",
        s(&cal),
        "--metric",
        "microssim,microms3im,ssim,zscore-ssim,care-ssim,ms-ssim",
        "--out",
        s(&report_path),
        "--csv",
        s(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&report_path);
    assert_valid(SCORE_REPORT_SCHEMA, &json);
    let report: ScoreReport = serde_json::from_value(json).unwrap();
    assert_eq!(report.records.len(), 12);
    for r in &report.records {
        assert!((r.value - 1.0).abs() < 1e-9, "{} {}: {}", r.pair_id, r.metric.as_str(), r.value);
    }
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 13);
}

#[test]
fn report_summary_matches_records() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth(&data, &["--pairs", "5", "--height", "80", "--width", "80"]);
    let out = tmp.path().join("r.json");
    assert!(bin(&["score", "--manifest", s(&manifest), "--metric", "ssim,care-ssim", "--out", s(&out)])
        .status
        .success());
    let text = fs::read_to_string(&out).unwrap();
    let json: Value = serde_json::from_str(&text).unwrap();
    assert_valid(SCORE_REPORT_SCHEMA, &json);
    let report: ScoreReport = serde_json::from_value(json).unwrap();
    for metric in [Metric::Ssim, Metric::CareSsim] {
        let v = report.values(metric);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let summary = report.summary_for(metric).unwrap();
        assert_eq!(summary.count, 5);
        assert!((summary.mean.unwrap() - mean).abs() < 1e-14);
        assert!((summary.std.unwrap() - std).abs() < 1e-14);
    }
    // Floats keep 17 significant digits.
    let token = text.split("\"value\": ").nth(1).unwrap().split(',').next().unwrap();
    let mantissa = token.split('e').next().unwrap().replace(['.', '-'], "");
    assert_eq!(mantissa.len(), 17, "{token}");
}

#[test]
fn care_ssim_background_lags_foreground() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth(
        &data,
        &["--pairs", "6", "--height", "192", "--width", "192", "--read-noise", "4", "--gt-read-noise", "2", "--format", "mfr"],
    );
    let cal = tmp.path().join("cal.txt");
    assert!(bin(&["calibrate", "--manifest", s(&manifest), "--out", s(&cal)]).status.success());
    let args = cli::Cli::try_parse_from([
        "micrometric",
        "score",
        "--manifest",
        s(&manifest),
        "--calibration",
        s(&cal),
        "--metric",
        "microssim,care-ssim,ms-ssim",
        "--out",
        s(&tmp.path().join("r.json")),
    ])
    .unwrap();
    let cli::Command::Score(a) = args.command else { unreachable!() };
    let report = cli::run_score(&a).unwrap();
    let mean = |m: Metric, f: fn(&cli::ScoreRecord) -> Option<f64>| {
        let v: Vec<f64> = report.records.iter().filter(|r| r.metric == m).filter_map(f).collect();
        assert_eq!(v.len(), 6);
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (bg, fg) = (mean(Metric::CareSsim, |r| r.background), mean(Metric::CareSsim, |r| r.foreground));
    assert!(bg < fg, "care-ssim background {bg} vs foreground {fg}");
    mean(Metric::MicroSsim, |r| r.background);
    assert!(report.records.iter().filter(|r| r.metric == Metric::MsSsim).all(|r| r.background.is_none()));
}

#[test]
fn diagnose_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth(&data, &["--pairs", "4", "--height", "96", "--width", "96", "--gt-read-noise", "2"]);
    let cal = tmp.path().join("cal.txt");
    assert!(bin(&["calibrate", "--manifest", s(&manifest), "--out", s(&cal)]).status.success());
    let out = tmp.path().join("diag");
    let run = bin(&[
        "diagnose",
        "--manifest",
        s(&manifest),
        "--calibration",
        s(&cal),
        "--out",
        s(&out),
        "--sweep-points",
        "201",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    let sat = read_json(&out.join("saturation.json"));
    assert_valid(SATURATION_REPORT_SCHEMA, &sat);
    let variants = sat["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 4);
    let (raw, full) = (&variants[0], &variants[3]);
    assert_eq!(raw["variant"], "raw");
    assert_eq!(full["variant"], "full");
    for c in ["luminance", "contrast", "structure"] {
        let (r, f) = (raw[c]["mean"].as_f64().unwrap(), full[c]["mean"].as_f64().unwrap());
        assert!(r >= f, "{c}: raw {r} < full {f}");
    }
    assert_eq!(fs::read_to_string(out.join("saturation.csv")).unwrap().lines().count(), 13);

    // Exactly one local maximum, marked, within a grid step of the calibrated α.
    let alpha = fs::read_to_string(&cal).unwrap().parse::<DatasetCalibration>().unwrap().alpha();
    let rows: Vec<(f64, f64, u8)> = fs::read_to_string(out.join("alpha_sweep.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 201);
    let maxima: Vec<usize> = (1..rows.len() - 1)
        .filter(|&i| rows[i].1 > rows[i - 1].1 && rows[i].1 > rows[i + 1].1)
        .collect();
    assert_eq!(maxima.len(), 1, "{maxima:?}");
    let i = maxima[0];
    assert_eq!(rows[i].2, 1);
    assert_eq!(rows.iter().filter(|r| r.2 == 1).count(), 1);
    let step = (rows[1].0 / rows[0].0).ln();
    assert!((rows[i].0 / alpha).ln().abs() <= step, "argmax {} vs alpha {alpha}", rows[i].0);

    // The zero-offset row reproduces unswept scores.
    let sweep: Vec<Vec<f64>> = fs::read_to_string(out.join("offset_sweep.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(sweep.len(), 4);
    assert_eq!(sweep[0][0], 0.0);
    let report = tmp.path().join("r.json");
    assert!(bin(&[
        "score",
        "--manifest",
        s(&manifest),
        "--calibration",
        s(&cal),
        "--metric",
        "microssim,ssim",
        "--out",
        s(&report)
    ])
    .status
    .success());
    let report: ScoreReport = serde_json::from_value(read_json(&report)).unwrap();
    let ssim_mean = report.summary_for(Metric::Ssim).unwrap().mean.unwrap();
    let micro_mean = report.summary_for(Metric::MicroSsim).unwrap().mean.unwrap();
    assert!((sweep[0][2] - ssim_mean).abs() < 1e-12, "{} vs {ssim_mean}", sweep[0][2]);
    assert!((sweep[0][3] - micro_mean).abs() < 1e-12, "{} vs {micro_mean}", sweep[0][3]);
    // Vanilla luminance grows with the offset.
    assert!(sweep.windows(2).all(|w| w[1][1] > w[0][1]));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth(&data, &["--pairs", "3", "--height", "64", "--width", "64"]);
    let mut files = Vec::new();
    for t in ["1", "8"] {
        let cal = tmp.path().join(format!("cal{t}.txt"));
        let rep = tmp.path().join(format!("rep{t}.json"));
        assert!(bin(&["--threads", t, "calibrate", "--manifest", s(&manifest), "--out", s(&cal)])
            .status
            .success());
        assert!(bin(&[
            "score",
            "--threads",
            t,
            "--manifest",
            s(&manifest),
            "--calibration",
            s(&cal),
            "--metric",
            "microssim,ssim,care-ssim",
            "--out",
            s(&rep)
        ])
        .status
        .success());
        files.push((fs::read(&cal).unwrap(), fs::read(&rep).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}
