//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{barcode_at, herd_catalog, stamp};
use cowfinder_core::alignment::{align_to_template, PiecewiseWarp};
use cowfinder_core::annotations::write_stream;
use cowfinder_core::barcode::BARCODE_BITS;
use cowfinder_core::cowfinder::segments_to_csv;
use cowfinder_core::raster::BitRaster;
use cowfinder_core::synthherd::{
    generate_coat, generate_scenario, single_cow_clip, Pose, RenderConfig, WalkEntry, WalkSchedule,
};
use cowfinder_core::template::TEMPLATE_ID;
use cowfinder_core::{
    bitwise_mode, evaluate_segments, find_cows, hamming, Barcode, Cattlog, CattlogEntry, FinderConfig,
    PipelineConfig, Recognizer, Segment, TemplateShape,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_barcode(rng: &mut ChaCha8Rng) -> Barcode {
    Barcode::from_words(std::array::from_fn(|_| rng.random()))
}

/// Flips each bit of `b` with probability `p`.
fn perturb(b: &Barcode, p: f64, rng: &mut ChaCha8Rng) -> Barcode {
    Barcode::from_fn(|i| b.bit(i) ^ rng.random_bool(p))
}

fn naive_hamming(a: &Barcode, b: &Barcode) -> u32 {
    (0..BARCODE_BITS).filter(|&i| a.bit(i) != b.bit(i)).count() as u32
}

fn hamming_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let a = random_barcode(&mut rng);
        let b = if rng.random_bool(0.5) {
            random_barcode(&mut rng)
        } else {
            perturb(&a, rng.random_range(0.0..0.2), &mut rng)
        };
        if hamming(&a, &b) != naive_hamming(&a, &b) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("10000 pairs, {mismatches} mismatches, {:.3} s", elapsed.as_secs_f64()),
    )
}

fn mode_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut tie_bits = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..=9);
        let base = random_barcode(&mut rng);
        let codes: Vec<Barcode> = (0..n).map(|_| perturb(&base, 0.3, &mut rng)).collect();
        let oracle = Barcode::from_fn(|i| {
            let ones = codes.iter().filter(|c| c.bit(i)).count();
            if 2 * ones == n {
                tie_bits += 1;
            }
            2 * ones > n
        });
        if bitwise_mode(&codes).unwrap() != oracle {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0 && tie_bits > 0,
        format!("1000 sets, {mismatches} mismatches, {tie_bits} tied bits resolved to 0"),
    )
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..10_000 {
        let a = random_barcode(&mut rng);
        let b = perturb(&a, rng.random_range(0.0..0.5), &mut rng);
        let c = if rng.random_bool(0.5) {
            perturb(&b, rng.random_range(0.0..0.5), &mut rng)
        } else {
            random_barcode(&mut rng)
        };
        let (ab, ba, bc, ac) = (hamming(&a, &b), hamming(&b, &a), hamming(&b, &c), hamming(&a, &c));
        if ab != ba || ac > ab + bc || hamming(&a, &a) != 0 {
            violations += 1;
        }
    }
    check(violations == 0, format!("10000 triples, {violations} violations"))
}

fn alignment_fixed_point() -> Outcome {
    let t = TemplateShape::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = image::GrayImage::from_fn(t.width(), t.height(), |_, _| image::Luma([rng.random()]));
    let mask = BitRaster::from_fn(t.width(), t.height(), |_, _| rng.random_bool(0.5));
    let k = t.keypoints(1.0);
    let warp = PiecewiseWarp::new(&k, t).map_err(|e| e.to_string())?;
    let aligned = align_to_template(&image, &k, t).map_err(|e| e.to_string())?;
    let image_exact = aligned == image;
    let mask_exact = warp.warp_mask(&mask) == mask;

    let mut worst = 0.0f64;
    let cfg = RenderConfig::default();
    for _ in 0..50 {
        let pose = Pose {
            rotation_deg: rng.random_range(-20.0..20.0),
            scale: rng.random_range(0.8..1.2),
            ..Pose::centered(&cfg).translated(rng.random_range(-40.0..40.0), rng.random_range(-30.0..30.0))
        };
        let kp = k.map_points(|x, y| pose.apply((x, y))).map_err(|e| e.to_string())?;
        let w = PiecewiseWarp::new(&kp, t).map_err(|e| e.to_string())?;
        for (l, p) in kp.iter() {
            let (x, y) = w.forward((p.x, p.y)).ok_or("keypoint outside the warp")?;
            let (cx, cy) = t.canonical(l);
            worst = worst.max((x - cx).abs()).max((y - cy).abs());
        }
    }
    check(
        image_exact && mask_exact && worst <= 1e-6,
        format!("identity image exact: {image_exact}, mask exact: {mask_exact}, worst keypoint error {worst:.2e} px"),
    )
}

fn pose_invariance() -> Outcome {
    const COAT: u64 = 1;
    let cfg = RenderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let poses: Vec<Pose> = (0..20)
        .map(|_| {
            let r: f64 = rng.random_range(0.0..=50.0);
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Pose {
                rotation_deg: rng.random_range(-15.0..=15.0),
                ..Pose::centered(&cfg).translated(r * a.cos(), r * a.sin())
            }
        })
        .collect();
    let coat = generate_coat(COAT);
    let codes: Vec<Barcode> = poses.par_iter().map(|p| barcode_at(&coat, p)).collect();
    let others: Vec<Barcode> = (2..=36u64)
        .into_par_iter()
        .map(|s| barcode_at(&generate_coat(s), &Pose::centered(&cfg)))
        .collect();
    let mut genuine = 0;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            genuine = genuine.max(hamming(&codes[i], &codes[j]));
        }
    }
    let impostor = codes
        .iter()
        .flat_map(|c| others.iter().map(move |o| hamming(c, o)))
        .min()
        .unwrap();
    check(
        genuine <= 64 && impostor >= 256,
        format!("max distance across 20 poses {genuine} (limit 64), min distance to 35 other coats {impostor} (limit 256)"),
    )
}

const HERD: std::ops::RangeInclusive<u64> = 1..=36;
const ENROLL_PATH: u64 = 600;

fn herd() -> &'static Cattlog {
    static CATALOG: OnceLock<Cattlog> = OnceLock::new();
    CATALOG.get_or_init(|| herd_catalog(&HERD.collect::<Vec<_>>(), ENROLL_PATH))
}

fn closed_set_identification() -> Outcome {
    let start = Instant::now();
    let catalog = herd();
    let rec = Recognizer::new(catalog, PipelineConfig::default()).map_err(|e| e.to_string())?;
    let correct = |path_seed: u64, noise: f64| -> Vec<u64> {
        HERD.collect::<Vec<_>>()
            .into_par_iter()
            .filter(|&s| {
                let clip = single_cow_clip(s, 30, path_seed, noise);
                rec.recognize_video(&clip.stream, &clip.frames)
                    .is_ok_and(|p| p.predicted_id == s.to_string())
            })
            .collect()
    };
    let noisy = correct(ENROLL_PATH + 1, 5.0 / 255.0).len();
    let clean = correct(ENROLL_PATH, 0.0).len();
    let elapsed = start.elapsed();
    check(
        noisy >= 34 && clean == 36 && elapsed < Duration::from_secs(60),
        format!(
            "held-out noisy clips {noisy}/36 (need 34), unperturbed clean clips {clean}/36, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn single_file(seeds: &[u64], path_seed: u64) -> WalkSchedule {
    WalkSchedule {
        path_seed,
        entries: seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| WalkEntry {
                cow_seed: s,
                enter_time_s: 0.5 + 4.0 * i as f64,
                exit_time_s: 3.5 + 4.0 * i as f64,
            })
            .collect(),
        ..WalkSchedule::default()
    }
}

fn stream_retrieval() -> Outcome {
    let enrolled: Vec<u64> = (201..=210).collect();
    let catalog = herd_catalog(&enrolled, 700);
    let cfg = FinderConfig::default();
    let pipeline = PipelineConfig::default();

    let scenario = generate_scenario(&single_file(&enrolled, 701)).map_err(|e| e.to_string())?;
    let found = find_cows(&scenario.stream, &scenario.frames, &catalog, &cfg, &pipeline).map_err(|e| e.to_string())?;
    let ids_ok = found.iter().map(|s| s.cow_id.clone()).eq(enrolled.iter().map(u64::to_string));
    let worst = found
        .iter()
        .zip(&scenario.truth)
        .map(|(p, t)| p.start_frame.abs_diff(t.start_frame).max(p.end_frame.abs_diff(t.end_frame)))
        .max()
        .unwrap_or(u64::MAX);

    let mut with_stranger = enrolled.clone();
    with_stranger.insert(5, 299);
    let scenario2 = generate_scenario(&single_file(&with_stranger, 702)).map_err(|e| e.to_string())?;
    let found2 =
        find_cows(&scenario2.stream, &scenario2.frames, &catalog, &cfg, &pipeline).map_err(|e| e.to_string())?;
    let stranger = &scenario2.truth[5];
    let intruding = found2
        .iter()
        .filter(|s| s.end_time_s >= stranger.start_time_s && s.start_time_s < stranger.end_time_s)
        .count();

    check(
        found.len() == 10 && ids_ok && worst <= 30 && intruding == 0 && found2.len() == 10,
        format!(
            "{} segments, ids in order: {ids_ok}, worst boundary error {worst} frames (limit 30); \
             with an unenrolled cow: {} segments, {intruding} in its interval",
            found.len(),
            found2.len()
        ),
    )
}

fn span(id: &str, start: f64, end: f64) -> Segment {
    Segment {
        cow_id: id.to_string(),
        start_frame: (start * 30.0) as u64,
        end_frame: (end * 30.0) as u64,
        start_time_s: start,
        end_time_s: end,
        n_frames: ((end - start) * 30.0) as usize,
        min_distance: 0,
        mean_distance: 0.0,
    }
}

fn evaluation_rule() -> Outcome {
    let truth: Vec<Segment> = (0..36)
        .map(|i| span(&format!("c{i}"), 10.0 * i as f64, 10.0 * i as f64 + 8.0))
        .collect();
    let predicted: Vec<Segment> = truth
        .iter()
        .enumerate()
        .map(|(i, t)| match i % 7 {
            3 if i < 35 => span(&t.cow_id, t.start_time_s - 1.0, t.end_time_s - 2.0),
            _ => span(&t.cow_id, t.start_time_s + 0.5, t.end_time_s - 0.5),
        })
        .collect();
    let m = evaluate_segments(&predicted, &truth);
    let text = m.to_string();
    let overlap = evaluate_segments(&[span("x", 4.0, 12.0)], &[span("x", 5.0, 15.0)]);
    check(
        m.found == 31
            && (m.retrieval_rate - 31.0 / 36.0).abs() < 1e-12
            && text.contains("retrieval_rate = 0.861")
            && overlap.found == 0
            && overlap.missed == 1,
        format!(
            "found {} of 36, rate {:.3}; overlapping-not-contained prediction: found {}, missed {}",
            m.found, m.retrieval_rate, overlap.found, overlap.missed
        ),
    )
}

fn throughput() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut catalog = Cattlog::new();
    for i in 0..1000 {
        catalog
            .add_entry(CattlogEntry {
                cow_id: format!("cow{i:04}"),
                barcode: random_barcode(&mut rng),
                frames_used: 1,
                source_ref: String::new(),
                enrolled_at: stamp(),
                template_id: TEMPLATE_ID.to_string(),
            })
            .map_err(|e| e.to_string())?;
    }
    let mut times: Vec<Duration> = (0..501)
        .map(|_| {
            let q = random_barcode(&mut rng);
            let t = Instant::now();
            let hits = catalog.match_top_k(&q, 3).unwrap();
            let dt = t.elapsed();
            std::hint::black_box(hits);
            dt
        })
        .collect();
    times.sort();
    let median = times[times.len() / 2];
    check(
        median < Duration::from_millis(1),
        format!("median match against 1000 entries {:.1} us", median.as_secs_f64() * 1e6),
    )
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let schedule = single_file(&[401, 402, 403], 801);
    let scenario = generate_scenario(&schedule).map_err(|e| e.to_string())?;
    write_stream(&dir.join("stream.jsonl"), &scenario.stream).map_err(|e| e.to_string())?;
    scenario.frames.write_images(dir, &scenario.stream).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("truth.csv"), segments_to_csv(&scenario.truth)).map_err(|e| e.to_string())?;
    let catalog = herd_catalog(&[401, 402, 403], 800);
    catalog.save(&dir.join("catalog.toml")).map_err(|e| e.to_string())?;
    let found = find_cows(
        &scenario.stream,
        &scenario.frames,
        &catalog,
        &FinderConfig::default(),
        &PipelineConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(dir.join("segments.csv"), segments_to_csv(&found)).map_err(|e| e.to_string())
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism_and_persistence() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let identical = ta == tb;

    let catalog = herd();
    let path = a.path().join("herd.toml");
    catalog.save(&path).map_err(|e| e.to_string())?;
    let loaded = Cattlog::load(&path).map_err(|e| e.to_string())?;
    let lossless = &loaded == catalog && loaded.to_toml() == catalog.to_toml();
    check(
        identical && lossless && catalog.len() == 36,
        format!(
            "two runs byte-identical over {} files: {identical}; {}-entry catalog round trip lossless: {lossless}",
            ta.len(),
            catalog.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("hamming oracle exactness", hamming_oracle),
        ("mode oracle exactness", mode_oracle),
        ("metric properties", metric_properties),
        ("alignment fixed point", alignment_fixed_point),
        ("pose invariance", pose_invariance),
        ("closed-set identification", closed_set_identification),
        ("stream retrieval", stream_retrieval),
        ("evaluation rule", evaluation_rule),
        ("matching throughput", throughput),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let mut failures = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {:2}. {name}: {detail}", n + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {:2}. {name}: {detail}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
