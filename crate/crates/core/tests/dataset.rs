mod common;

use std::fs;
use std::path::Path;

use cfrg::dataset::{self, load_sample, preprocess_dir, scan_layout, Label, Split, TileManifest, TileSpec};
use cfrg::toy::{self, ToySpec};
use cfrg::Error;
use image::{GrayImage, Luma, Rgb, RgbImage};

fn write_rgb(path: &Path, w: u32, h: u32) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 128]))
        .save(path)
        .unwrap();
}

fn write_mask(path: &Path, w: u32, h: u32, on: impl Fn(u32, u32) -> bool) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(w, h, |x, y| Luma([if on(x, y) { 255 } else { 0 }]))
        .save(path)
        .unwrap();
}

/// `cat/train/good` (10), `cat/test/good` (2), `cat/test/scratch` (3) with masks.
fn small_tree(root: &Path) {
    let cat = root.join("cat");
    for i in 0..10 {
        write_rgb(&cat.join(format!("train/good/{i:03}.png")), 16, 16);
    }
    for i in 0..2 {
        write_rgb(&cat.join(format!("test/good/{i:03}.png")), 16, 16);
    }
    for i in 0..3 {
        write_rgb(&cat.join(format!("test/scratch/{i:03}.png")), 16, 16);
        write_mask(&cat.join(format!("ground_truth/scratch/{i:03}_mask.png")), 16, 16, |x, _| x < 4);
    }
}

#[test]
fn scan_counts_samples_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let idx = scan_layout(dir.path(), "cat").unwrap();
    assert_eq!(idx.entries.len(), 15);
    assert_eq!(idx.entries.iter().filter(|e| e.mask.is_some()).count(), 3);
    assert!(idx.split(Split::Train).all(|e| e.defect_type == "good" && e.mask.is_none()));
    for e in &idx.entries {
        assert_eq!(e.mask.is_some(), e.label == Label::Anomalous);
    }
    let paths: Vec<_> = idx.entries.iter().map(|e| e.image.clone()).collect();
    let mut sorted = paths.clone();
    sorted.sort();
    assert_eq!(paths, sorted);
}

#[test]
fn scan_reports_missing_mask() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    fs::remove_file(dir.path().join("cat/ground_truth/scratch/001_mask.png")).unwrap();
    match scan_layout(dir.path(), "cat") {
        Err(Error::MissingMask { image, .. }) => assert!(image.ends_with("test/scratch/001.png")),
        other => panic!("expected a missing-mask error, got {other:?}"),
    }
}

#[test]
fn scan_rejects_empty_category() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("cat")).unwrap();
    assert!(matches!(scan_layout(dir.path(), "cat"), Err(Error::MalformedTree { .. })));
}

#[test]
fn scan_rejects_defects_in_train_split() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    write_rgb(&dir.path().join("cat/train/scratch/000.png"), 16, 16);
    let e = scan_layout(dir.path(), "cat").unwrap_err();
    assert!(matches!(e, Error::MalformedTree { .. }));
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn bundled_dataset_matches_golden_manifest() {
    let idx = scan_layout(&common::toy_root(), "weave").unwrap();
    let golden: serde_json::Value =
        serde_json::from_slice(&fs::read(common::fixtures().join("toy_manifest.json")).unwrap()).unwrap();
    assert_eq!(idx.manifest(), golden);
}

#[test]
fn bundled_dataset_is_reproduced_by_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    toy::generate(dir.path(), &ToySpec::default()).unwrap();
    let ours = scan_layout(dir.path(), "weave").unwrap();
    assert_eq!(ours.manifest(), scan_layout(&common::toy_root(), "weave").unwrap().manifest());
    for e in &ours.entries {
        let rel = e.image.strip_prefix(dir.path()).unwrap();
        let a = image::open(&e.image).unwrap().to_rgb8();
        let b = image::open(common::toy_root().join(rel)).unwrap().to_rgb8();
        assert_eq!(a, b, "{}", rel.display());
    }
}

#[test]
fn load_sample_resizes_image_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("big.png");
    let mask = dir.path().join("big_mask.png");
    write_rgb(&img, 1024, 1024);
    write_mask(&mask, 1024, 1024, |_, _| false);
    let entry = dataset::SampleEntry {
        image: img,
        mask: Some(mask),
        split: Split::Test,
        defect_type: "x".into(),
        label: Label::Anomalous,
        source_id: "big".into(),
    };
    let s = load_sample(&entry, 256).unwrap();
    assert_eq!(s.image.dim(), (256, 256, 3));
    assert!(s.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    let m = s.mask.unwrap();
    assert_eq!(m.dim(), (256, 256));
    assert!(m.iter().all(|&v| v == 0));
}

#[test]
fn load_sample_masks_stay_binary() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    let mask = dir.path().join("a_mask.png");
    write_rgb(&img, 100, 60);
    // Gray anti-aliased edge values are defect pixels too.
    fs::create_dir_all(dir.path()).unwrap();
    GrayImage::from_fn(100, 60, |x, y| Luma([((x * 7 + y * 3) % 256) as u8])).save(&mask).unwrap();
    let entry = dataset::SampleEntry {
        image: img,
        mask: Some(mask),
        split: Split::Test,
        defect_type: "x".into(),
        label: Label::Anomalous,
        source_id: "a".into(),
    };
    let m = load_sample(&entry, 32).unwrap().mask.unwrap();
    assert!(m.iter().all(|&v| v <= 1));
    assert!(m.iter().any(|&v| v == 1));
}

#[test]
fn decode_failure_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.png");
    fs::write(&bad, b"not an image").unwrap();
    let entry = dataset::SampleEntry {
        image: bad.clone(),
        mask: None,
        split: Split::Train,
        defect_type: "good".into(),
        label: Label::Normal,
        source_id: "broken".into(),
    };
    let e = load_sample(&entry, 32).unwrap_err();
    assert!(e.to_string().contains("broken.png"), "{e}");
}

#[test]
fn preprocess_writes_tiles_and_manifest() {
    let input = tempfile::tempdir().unwrap();
    let output = tempfile::tempdir().unwrap();
    write_rgb(&input.path().join("good/wide.png"), 2048, 1024);
    write_rgb(&input.path().join("good/small.png"), 800, 800);
    write_mask(&input.path().join("gt/wide_mask.png"), 2048, 1024, |x, _| x > 1500);
    let manifest = preprocess_dir(input.path(), output.path(), &TileSpec::default()).unwrap();

    let wide: Vec<_> = manifest.entries.iter().filter(|e| e.source == "good/wide.png").collect();
    let xs: Vec<u32> = wide.iter().map(|e| e.offset[0]).collect();
    assert_eq!(xs, vec![0, 819, 1024]);
    assert!(wide.iter().all(|e| e.size == [1024, 1024] && e.offset[1] == 0));
    let small: Vec<_> = manifest.entries.iter().filter(|e| e.source == "good/small.png").collect();
    assert_eq!(small.len(), 1);
    assert_eq!(small[0].size, [800, 800]);
    // Masks keep their suffix so they still pair with their tile.
    assert!(manifest.entries.iter().any(|e| e.tile == "gt/wide_y0_x1024_mask.png"));

    for e in &manifest.entries {
        let t = image::open(output.path().join(&e.tile)).unwrap();
        assert_eq!([t.width(), t.height()], e.size);
    }
    let written: TileManifest =
        serde_json::from_slice(&fs::read(output.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(written, manifest);
}
