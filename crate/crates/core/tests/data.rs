mod common;

use std::collections::{BTreeMap, BTreeSet};

use freestyle_core::data::{generate_synthetic_gallery, load_manifest, write_manifest, DataConfig, Split, StyleTag};

#[test]
fn hundred_records_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_gallery(25, 9, dir.path(), &DataConfig::default()).unwrap();
    let records = load_manifest(&manifest).unwrap();
    assert_eq!(records.len(), 100);
    let copy = dir.path().join("copy.jsonl");
    write_manifest(&copy, &records).unwrap();
    assert_eq!(load_manifest(&copy).unwrap(), records);
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = DataConfig::default();
    let ma = generate_synthetic_gallery(40, 7, a.path(), &config).unwrap();
    let mb = generate_synthetic_gallery(40, 7, b.path(), &config).unwrap();
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    for r in load_manifest(&ma).unwrap() {
        for p in [Some(&r.image_path), r.query_path.as_ref()].into_iter().flatten() {
            assert_eq!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(b.path().join(p)).unwrap());
        }
    }
    let c = tempfile::tempdir().unwrap();
    let mc = generate_synthetic_gallery(40, 8, c.path(), &config).unwrap();
    assert_ne!(std::fs::read(&ma).unwrap(), std::fs::read(&mc).unwrap());
}

#[test]
fn two_hundred_items_cover_the_attribute_space() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_gallery(200, 0, dir.path(), &DataConfig::default()).unwrap();
    let records = load_manifest(&manifest).unwrap();

    let combos: BTreeSet<_> = records.iter().filter_map(|r| r.attributes.clone()).collect();
    assert!(combos.len() >= 64, "{} combinations", combos.len());

    let mut styles: BTreeMap<&str, BTreeSet<StyleTag>> = BTreeMap::new();
    let mut splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for r in &records {
        styles.entry(&r.gallery_id).or_default().insert(r.style);
        splits.entry(&r.gallery_id).or_default().insert(r.split);
    }
    assert_eq!(styles.len(), 200);
    assert!(styles.values().all(|s| s.len() == 4 && !s.contains(&StyleTag::Image)));
    assert!(splits.values().all(|s| s.len() == 1));
    let test = splits.values().filter(|s| s.contains(&Split::Test)).count();
    assert_eq!(test, 40);
}

#[test]
fn every_query_image_has_the_gallery_shape() {
    let dir = tempfile::tempdir().unwrap();
    let config = DataConfig::default();
    let manifest = generate_synthetic_gallery(6, 2, dir.path(), &config).unwrap();
    for r in load_manifest(&manifest).unwrap() {
        if let Some(q) = r.query_path {
            let img = image::open(dir.path().join(q)).unwrap().to_rgb8();
            assert_eq!(img.dimensions(), (config.image_size, config.image_size));
        }
    }
}

#[test]
fn malformed_lines_report_their_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "\n{\"v\":1,\"oops\":true}\n").unwrap();
    match load_manifest(&path) {
        Err(freestyle_core::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&path, "").unwrap();
    assert!(load_manifest(&path).unwrap().is_empty());
}
