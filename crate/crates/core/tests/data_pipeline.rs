mod support;

use std::fs;
use std::path::Path;

use gcf_core::data::{
    generate_synthetic, load_image, split_stratified, write_pgm, DataError, RunManifest,
    SynthOptions,
};
use image::{Rgb, RgbImage};
use support::oracles;

fn touch_images(dir: &Path, names: &[&str]) {
    for n in names {
        write_pgm(&dir.join(n), 4, 4, &[128; 16]).unwrap();
    }
}

#[test]
fn three_line_manifest() {
    let dir = tempfile::tempdir().unwrap();
    touch_images(dir.path(), &["a.pgm", "b.pgm"]);
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,label\na.pgm,happy\nb.pgm,sad\n").unwrap();
    let m = RunManifest::load(&path).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m.num_classes(), 2);
    assert_eq!(m.class_names, ["happy", "sad"]);
}

#[test]
fn undeclared_label_names_line() {
    let dir = tempfile::tempdir().unwrap();
    touch_images(dir.path(), &["a.pgm", "b.pgm"]);
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,label\r\n#classes:happy,sad\r\na.pgm,happy\r\nb.pgm,angry\r\n").unwrap();
    match RunManifest::load(&path) {
        Err(DataError::Manifest { line, msg }) => {
            assert_eq!(line, 4);
            assert!(msg.contains("angry"), "{msg}");
        }
        other => panic!("expected manifest error, got {other:?}"),
    }
}

#[test]
fn missing_image_and_duplicate_path_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    touch_images(dir.path(), &["a.pgm"]);
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,label\na.pgm,x\nmissing.pgm,x\n").unwrap();
    assert!(matches!(RunManifest::load(&path), Err(DataError::Manifest { line: 3, .. })));
    fs::write(&path, "path,label\na.pgm,x\na.pgm,y\n").unwrap();
    assert!(matches!(RunManifest::load(&path), Err(DataError::Manifest { line: 3, .. })));
    assert!(matches!(
        RunManifest::load(dir.path().join("absent.csv")),
        Err(DataError::Io { .. })
    ));
}

/// Seven classes with 213 rows in total.
pub const JAFFE_COUNTS: [usize; 7] = [30, 29, 32, 31, 31, 30, 30];

#[test]
fn jaffe_shaped_histogram_matches_line_count() {
    let classes = gcf_core::data::DEFAULT_CLASSES;
    let mut text = format!("path,label\n#classes:{}\n", classes.join(","));
    for (c, &n) in JAFFE_COUNTS.iter().enumerate() {
        for i in 0..n {
            text.push_str(&format!("img/{}{i:03}.pgm,{}\n", &classes[c][..2], classes[c]));
        }
    }
    let m = RunManifest::parse(&text, ".".into(), false).unwrap();
    assert_eq!(m.len(), 213);
    // independent count: lines ending in ",<label>"
    for (c, name) in classes.iter().enumerate() {
        let suffix = format!(",{name}");
        let count = text
            .lines()
            .filter(|l| !l.starts_with('#') && l.ends_with(&suffix))
            .count();
        assert_eq!(m.histogram()[c], count, "{name}");
    }
}

#[test]
fn constant_pgm_loads_as_ones() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("white.pgm");
    write_pgm(&p, 48, 48, &[255; 48 * 48]).unwrap();
    let t = load_image::<f64>(&p, 48, 1).unwrap();
    assert_eq!(t.shape(), &[1, 48, 48]);
    assert!(t.data().iter().all(|v| *v == 1.0));
}

#[test]
fn constant_image_stays_constant_after_resize() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("grey.pgm");
    write_pgm(&p, 96, 96, &[77; 96 * 96]).unwrap();
    let t = load_image::<f64>(&p, 48, 1).unwrap();
    assert!(t.data().iter().all(|v| (v - 77.0 / 255.0).abs() < 1e-12));
}

#[test]
fn checkerboard_upsampling_matches_hand_bilinear() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("check.pgm");
    write_pgm(&p, 2, 2, &[0, 255, 255, 0]).unwrap();
    let t = load_image::<f64>(&p, 4, 1).unwrap();
    let src = [0.0, 1.0, 1.0, 0.0];
    for y in 0..4 {
        for x in 0..4 {
            // corner-aligned: output pixel i samples source coordinate i·(2−1)/(4−1)
            let expected = oracles::bilinear_at(&src, 2, 2, y as f64 / 3.0, x as f64 / 3.0);
            assert!((t.data()[y * 4 + x] - expected).abs() < 1e-6, "({y},{x})");
        }
    }
    // hand values on the first row: 0, 1/3, 2/3, 1
    let row: Vec<f64> = t.data()[..4].to_vec();
    for (v, e) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
        assert!((v - e).abs() < 1e-6);
    }
}

#[test]
fn rgb_png_converts_to_luma_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rgb.png");
    RgbImage::from_pixel(6, 6, Rgb([200, 100, 50])).save(&p).unwrap();
    let gray = load_image::<f64>(&p, 6, 1).unwrap();
    let expected = (0.299 * 200.0 + 0.587 * 100.0 + 0.114 * 50.0) / 255.0;
    assert!(gray.data().iter().all(|v| (v - expected).abs() < 1e-9));
    let rgb = load_image::<f64>(&p, 6, 3).unwrap();
    assert_eq!(rgb.shape(), &[3, 6, 6]);
    assert!((rgb.data()[0] - 200.0 / 255.0).abs() < 1e-12);
    assert!((rgb.data()[36] - 100.0 / 255.0).abs() < 1e-12);
}

#[test]
fn corrupt_file_is_a_decode_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.png");
    fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
    assert!(matches!(load_image::<f32>(&p, 8, 1), Err(DataError::Decode { .. })));
}

fn synthetic(n: usize, seed: u64) -> (tempfile::TempDir, RunManifest) {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions {
        n_per_class: n,
        seed,
        ..Default::default()
    };
    let m = generate_synthetic(&opts, dir.path()).unwrap();
    (dir, m)
}

#[test]
fn synthetic_counts_and_manifest() {
    let (dir, m) = synthetic(10, 3);
    assert_eq!(m.len(), 70);
    assert_eq!(m.histogram(), vec![10; 7]);
    let reloaded = RunManifest::load(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(reloaded.samples, m.samples);
    assert_eq!(reloaded.class_names, m.class_names);
}

#[test]
fn distinct_seeds_give_distinct_pixels() {
    let (a, ma) = synthetic(2, 1);
    let (b, _) = synthetic(2, 2);
    let first = &ma.samples[0].path;
    assert_ne!(
        fs::read(a.path().join(first)).unwrap(),
        fs::read(b.path().join(first)).unwrap()
    );
}

#[test]
fn split_arithmetic_and_determinism() {
    let (_dir, m) = synthetic(10, 4);
    let s = split_stratified(&m, 9, 0.2).unwrap();
    assert_eq!(s.test.len(), 14);
    let mut per_class = [0; 7];
    for &i in &s.test {
        per_class[m.samples[i].label] += 1;
    }
    assert_eq!(per_class, [2; 7]);
    assert_eq!(s.to_json(), split_stratified(&m, 9, 0.2).unwrap().to_json());
    assert_ne!(s.test, split_stratified(&m, 10, 0.2).unwrap().test);
}

#[test]
fn split_of_700_is_stratified() {
    let (_dir, m) = synthetic(100, 5);
    let s = split_stratified(&m, 42, 0.2).unwrap();
    let mut seen = vec![false; m.len()];
    for &i in s.train.iter().chain(&s.test) {
        assert!(!seen[i], "index {i} in both sides");
        seen[i] = true;
    }
    assert!(seen.iter().all(|&b| b));
    for (c, &n) in m.histogram().iter().enumerate() {
        let test = s.test.iter().filter(|&&i| m.samples[i].label == c).count();
        let target = 0.2 * n as f64;
        assert!((test as f64 - target).abs() <= 1.0, "class {c}: {test} of {n}");
    }
}

#[test]
fn region_mean_nearest_centroid_separates_classes() {
    let (dir, m) = synthetic(100, 42);
    let s = split_stratified(&m, 42, 0.2).unwrap();
    let features = |i: usize| -> Vec<f64> {
        let img = load_image::<f64>(&dir.path().join(&m.samples[i].path), 48, 1).unwrap();
        oracles::slice_regions(img.data(), 1, 48, 48)
    };
    let mut centroids = vec![vec![0.0; 9]; 7];
    let mut counts = [0usize; 7];
    for &i in &s.train {
        let label = m.samples[i].label;
        for (c, f) in centroids[label].iter_mut().zip(features(i)) {
            *c += f;
        }
        counts[label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = s
        .test
        .iter()
        .filter(|&&i| {
            let f = features(i);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..7)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == m.samples[i].label
        })
        .count();
    let accuracy = correct as f64 / s.test.len() as f64;
    assert!(accuracy >= 0.9, "nearest-centroid accuracy {accuracy}");
}

#[test]
fn class_with_one_sample_cannot_be_split() {
    let text = "path,label\na.png,x\nb.png,x\nc.png,y\n";
    let m = RunManifest::parse(text, ".".into(), false).unwrap();
    match split_stratified(&m, 0, 0.2) {
        Err(DataError::Contract(msg)) => assert!(msg.contains("`y`"), "{msg}"),
        other => panic!("{other:?}"),
    }
}
