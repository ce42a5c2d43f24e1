use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const EPOCH: &str = "1714545000";

fn cowfinder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cowfinder"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", EPOCH)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cowfinder(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = cowfinder(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a scenario file and synthesizes it into `dir/name/`.
fn synth(dir: &Path, name: &str, scenario: &str) -> PathBuf {
    let toml = dir.join(format!("{name}.toml"));
    fs::write(&toml, scenario).unwrap();
    let out = dir.join(name);
    ok(&["synth", "--scenario", s(&toml), "--output", s(&out)]);
    out
}

fn clip_scenario(seed: u64, path_seed: u64) -> String {
    format!("path_seed = {path_seed}\n\n[[cow]]\ncow_seed = {seed}\nenter_time_s = 0.0\nexit_time_s = 1.0\n")
}

const STREAM: &str = "\
path_seed = 9
noise_sigma = 0.01

[[cow]]
cow_seed = 11
enter_time_s = 0.5
exit_time_s = 3.0

[[cow]]
cow_seed = 12
enter_time_s = 4.0
exit_time_s = 6.5

[[cow]]
cow_seed = 13
enter_time_s = 7.5
exit_time_s = 10.0
";

fn enroll_herd(dir: &Path, catalog: &Path) {
    for seed in [11, 12, 13] {
        let clip = synth(dir, &format!("clip{seed}"), &clip_scenario(seed, seed + 100));
        let stdout = ok(&[
            "enroll",
            "--stream",
            s(&clip.join("stream.jsonl")),
            "--cow-id",
            &seed.to_string(),
            "--catalog",
            s(catalog),
        ]);
        assert!(stdout.contains(&format!("enrolled `{seed}`")));
    }
}

#[test]
fn synth_enroll_identify_find_evaluate() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let catalog = dir.join("herd.toml");
    enroll_herd(dir, &catalog);
    let text = fs::read_to_string(&catalog).unwrap();
    assert_eq!(text.matches("[[entry]]").count(), 3);
    assert!(dir.join("herd.toml.manifest.json").exists());

    let probe = synth(dir, "probe", &clip_scenario(12, 555));
    let report = dir.join("identify.txt");
    let stdout = ok(&[
        "identify",
        "--stream",
        s(&probe.join("stream.jsonl")),
        "--catalog",
        s(&catalog),
        "--report",
        s(&report),
    ]);
    assert!(stdout.starts_with("predicted_id = 12\n"), "{stdout}");
    assert_eq!(fs::read_to_string(&report).unwrap(), stdout);

    let stream = synth(dir, "stream", STREAM);
    let segments = dir.join("segments.csv");
    ok(&[
        "find",
        "--stream",
        s(&stream.join("stream.jsonl")),
        "--catalog",
        s(&catalog),
        "--output",
        s(&segments),
    ]);
    let csv = fs::read_to_string(&segments).unwrap();
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["11", "12", "13"]);

    let manifest = fs::read_to_string(dir.join("segments.csv.manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["subcommand"], "find");
    assert_eq!(manifest["config"][1]["reject_threshold"], 128);
    assert_eq!(manifest["config"][1]["max_gap_frames"], 30);

    let metrics = ok(&[
        "evaluate",
        "--predicted",
        s(&segments),
        "--truth",
        s(&stream.join("truth.csv")),
    ]);
    assert!(metrics.contains("found = 3\n"), "{metrics}");
    assert!(metrics.contains("retrieval_rate = 1.000\n"), "{metrics}");
}

#[test]
fn duplicate_enrollment_is_a_conflict() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let clip = synth(dir, "clip", &clip_scenario(21, 1));
    let catalog = dir.join("c.toml");
    let stream = clip.join("stream.jsonl");
    let args = [
        "enroll",
        "--stream",
        s(&stream),
        "--cow-id",
        "21",
        "--catalog",
        s(&catalog),
    ];
    ok(&args);
    let before = fs::read(&catalog).unwrap();
    let stderr = fail(&args);
    assert!(stderr.contains("conflict"), "{stderr}");
    assert_eq!(fs::read(&catalog).unwrap(), before);
}

#[test]
fn clipped_clip_has_no_enrollable_frame() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let narrow = format!("{}\n[render]\nwidth = 480\n", clip_scenario(22, 2));
    let clip = synth(dir, "narrow", &narrow);
    let catalog = dir.join("c.toml");
    let stderr = fail(&[
        "enroll",
        "--stream",
        s(&clip.join("stream.jsonl")),
        "--cow-id",
        "22",
        "--catalog",
        s(&catalog),
    ]);
    assert!(stderr.contains("no enrollable frame"), "{stderr}");
    assert!(!catalog.exists());
}

const HEADER: &str = "cow_id,start_frame,end_frame,start_time_s,end_time_s,n_frames,min_distance,mean_distance\n";

#[test]
fn evaluate_counts_contained_segments() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut truth = String::from(HEADER);
    let mut predicted = String::from(HEADER);
    for i in 0..36 {
        let start = 10.0 * i as f64;
        truth.push_str(&format!("c{i},0,0,{start},{},1,0,0.000\n", start + 8.0));
        let (ps, pe) = if i < 5 { (start - 1.0, start + 4.0) } else { (start + 1.0, start + 7.0) };
        predicted.push_str(&format!("c{i},0,0,{ps},{pe},1,0,0.000\n"));
    }
    fs::write(dir.join("truth.csv"), &truth).unwrap();
    fs::write(dir.join("pred.csv"), &predicted).unwrap();
    let report = dir.join("metrics.txt");
    let out = ok(&[
        "evaluate",
        "--predicted",
        s(&dir.join("pred.csv")),
        "--truth",
        s(&dir.join("truth.csv")),
        "--report",
        s(&report),
    ]);
    assert_eq!(out, "found = 31\nmissed = 5\nspurious = 5\nretrieval_rate = 0.861\n");
    assert_eq!(fs::read_to_string(&report).unwrap(), out);

    let exact = ok(&[
        "evaluate",
        "--predicted",
        s(&dir.join("truth.csv")),
        "--truth",
        s(&dir.join("truth.csv")),
    ]);
    assert!(exact.contains("retrieval_rate = 1.000"));
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("manifest.json") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical() {
    let runs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for tmp in &runs {
        let dir = tmp.path();
        let catalog = dir.join("herd.toml");
        enroll_herd(dir, &catalog);
        let stream = synth(dir, "stream", STREAM);
        ok(&[
            "find",
            "--stream",
            s(&stream.join("stream.jsonl")),
            "--catalog",
            s(&catalog),
            "--output",
            s(&dir.join("segments.csv")),
        ]);
    }
    let (a, b) = (files(runs[0].path()), files(runs[1].path()));
    assert!(a.len() > 100);
    let names = |v: &[(PathBuf, Vec<u8>)]| v.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
    for (x, y) in a.iter().zip(&b) {
        // catalogs record the clip path, which differs between the two temp dirs
        if x.0.ends_with("herd.toml") {
            let strip = |t: &[u8]| {
                String::from_utf8_lossy(t)
                    .lines()
                    .filter(|l| !l.starts_with("source_ref"))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            assert_eq!(strip(&x.1), strip(&y.1));
        } else {
            assert!(x.1 == y.1, "{} differs", x.0.display());
        }
    }
}

#[test]
fn bad_arguments_fail_cleanly() {
    let stderr = fail(&["find", "--stream", "missing.jsonl", "--catalog", "missing.toml", "--output", "x.csv", "--fps", "0"]);
    assert!(stderr.contains("--fps must be positive"), "{stderr}");
    let stderr = fail(&["identify", "--stream", "/nonexistent/stream.jsonl", "--catalog", "/nonexistent/c.toml"]);
    assert!(stderr.starts_with("error:"), "{stderr}");
}
