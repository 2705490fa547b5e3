mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mammodg::metrics::auc;
use mammodg::synthdata::{
    augment_image, augment_pair, compose_batch, domain_style, generate_dataset, malignant_count, read_lesions,
    AugmentParams, BatchComposer, DataError, DatasetManifest, GenConfig, LesionKind, Split, MANIFEST_FILE,
    MANIFEST_HEADER,
};
use mammodg::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> GenConfig {
    GenConfig::new(4, 12, 0.25, 32, seed)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_byte_identical_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small(5), a.path()).unwrap();
    generate_dataset(&small(5), b.path()).unwrap();
    let (da, db) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(da.len(), 4 * 12 * 2 + 2);
    assert_eq!(da, db);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small(6), c.path()).unwrap();
    assert_ne!(da, dir_bytes(c.path()));
}

#[test]
fn malignant_fraction_rounds_to_exact_counts() {
    assert_eq!(malignant_count(400, 0.25), 100);
    assert_eq!(malignant_count(10, 0.01), 1);
    assert_eq!(malignant_count(10, 0.99), 9);
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&GenConfig::new(3, 40, 0.25, 16, 1), dir.path()).unwrap();
    for d in 0..3 {
        assert_eq!(m.rows.iter().filter(|r| r.domain_id == d && r.label == 1).count(), 10);
    }
}

#[test]
fn generation_rejects_bad_configs_and_unwritable_dirs() {
    for cfg in [GenConfig::new(1, 8, 0.25, 32, 0), GenConfig::new(3, 3, 0.25, 32, 0), GenConfig::new(3, 8, 1.0, 32, 0)] {
        assert!(matches!(generate_dataset(&cfg, Path::new("/tmp/never")), Err(DataError::Config(_))));
    }
    let f = tempfile::NamedTempFile::new().unwrap();
    let err = generate_dataset(&small(0), &f.path().join("sub")).unwrap_err();
    assert!(matches!(err, DataError::Io { .. }), "{err}");
}

#[test]
fn reference_benchmark_properties() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&GenConfig::reference(), dir.path()).unwrap();
    assert_eq!(m.seen_domains, vec![0, 1, 2]);
    assert_eq!(m.unseen_domains, vec![3]);

    // per-domain mean intensities are pairwise separated
    let mut means = [0.0f64; 4];
    for r in &m.rows {
        let (cc, mlo) = m.load(r).unwrap();
        let s: f64 = cc.data().iter().chain(mlo.data()).map(|&v| v as f64).sum();
        means[r.domain_id] += s / (2.0 * cc.numel() as f64) / 400.0;
    }
    for i in 0..4 {
        for j in i + 1..4 {
            assert!((means[i] - means[j]).abs() >= 0.05, "domains {i},{j}: {means:?}");
        }
    }

    // the trivial peak-intensity classifier works inside a domain, not pooled
    let recs = common::trivial_records(&m);
    for d in 0..4 {
        let part: Vec<_> = recs.iter().filter(|r| r.domain_id == d).cloned().collect();
        let a = auc(&part).unwrap();
        assert!(a >= 0.75, "domain {d} trivial AUC {a}");
    }
    let pooled = auc(&recs).unwrap();
    assert!(pooled <= 0.65, "pooled trivial AUC {pooled}");
}

#[test]
fn lesion_columns_correspond_between_views() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig::new(2, 40, 0.5, 64, 3);
    let m = generate_dataset(&cfg, dir.path()).unwrap();
    let lesions = read_lesions(dir.path()).unwrap();
    assert_eq!(lesions.len(), m.rows.len());
    let mut malignant = 0;
    for (row, (id, meta)) in m.rows.iter().zip(&lesions) {
        assert_eq!(&row.sample_id, id);
        match meta.kind {
            LesionKind::Malignant => {
                assert_eq!(row.label, 1);
                malignant += 1;
                for w in [32.0, 16.0, 8.0, 4.0] {
                    let k = |c: f64| (c / 64.0 * w).floor();
                    assert!((k(meta.cc_col) - k(meta.mlo_col)).abs() <= 1.0);
                }
                // the rendered peak near the lesion sits in the lesion column
                let (cc, mlo) = m.load(row).unwrap();
                for (img, r0) in [(&cc, meta.cc_row), (&mlo, meta.mlo_row)] {
                    let d = img.data();
                    let (mut best, mut col) = (f32::MIN, 0usize);
                    let win = (2.0 * meta.radius).ceil() as i64;
                    for y in (r0 as i64 - win).max(0)..(r0 as i64 + win).min(63) {
                        for x in (meta.cc_col as i64 - win).max(0)..(meta.cc_col as i64 + win).min(63) {
                            let v = d[y as usize * 64 + x as usize];
                            if v > best {
                                best = v;
                                col = x as usize;
                            }
                        }
                    }
                    assert!((col as f64 + 0.5 - meta.cc_col).abs() <= meta.radius + 1.0, "{id}: peak col {col}");
                }
            }
            LesionKind::Benign | LesionKind::None => assert_eq!(row.label, 0),
        }
    }
    assert_eq!(malignant, 40);
}

#[test]
fn manifest_round_trips_field_by_field() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(2), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().next(), Some(MANIFEST_HEADER));
    let back = DatasetManifest::read(dir.path()).unwrap();
    assert_eq!(back, m);
    back.verify().unwrap();

    let again = tempfile::tempdir().unwrap();
    back.write(&again.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(fs::read_to_string(again.path().join(MANIFEST_FILE)).unwrap(), text);
}

#[test]
fn manifest_rejects_bad_header_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(MANIFEST_FILE);
    fs::write(&p, "id,cc,mlo,label,domain,split\n").unwrap();
    assert!(DatasetManifest::read(&p).is_err());
    fs::write(&p, format!("{MANIFEST_HEADER}\na,x,y,2,0,train\n")).unwrap();
    assert!(DatasetManifest::read(&p).is_err());
    fs::write(&p, format!("{MANIFEST_HEADER}\na,x,y,1,0,val\n")).unwrap();
    assert!(DatasetManifest::read(&p).is_err());
    fs::write(&p, format!("{MANIFEST_HEADER}\na,x,y,1,0,train\na,x,y,0,1,test\n")).unwrap();
    assert!(DatasetManifest::read(&p).is_err());
    fs::write(&p, format!("{MANIFEST_HEADER}\na,x,y,1,0,train\n")).unwrap();
    let m = DatasetManifest::read(&p).unwrap();
    assert!(m.verify().is_err());
}

#[test]
fn styles_are_distinct_and_valid() {
    let s: Vec<_> = (0..12).map(domain_style).collect();
    for (i, a) in s.iter().enumerate() {
        assert!(a.intensity_scale > 0.0 && a.gamma_exponent > 0.0);
        for b in &s[i + 1..] {
            assert_ne!(
                (a.intensity_offset, a.intensity_scale, a.gamma_exponent),
                (b.intensity_offset, b.intensity_scale, b.gamma_exponent)
            );
        }
    }
    GenConfig::new(12, 4, 0.5, 16, 0).validate().unwrap();
}

fn reference_like() -> (tempfile::TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&GenConfig::new(4, 30, 0.25, 16, 9), dir.path()).unwrap();
    (dir, m)
}

#[test]
fn batches_are_domain_even() {
    let (_d, m) = reference_like();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (bs, per) in [(12, 4), (3, 1)] {
        for _ in 0..5 {
            let b = compose_batch(&m, bs, &[0, 1, 2], &mut rng).unwrap();
            assert_eq!(b.len(), bs);
            for d in 0..3 {
                assert_eq!(b.iter().filter(|&&i| m.rows[i].domain_id == d).count(), per);
            }
            assert!(b.iter().all(|&i| m.rows[i].split == Split::Train));
        }
    }
    assert!(matches!(compose_batch(&m, 10, &[0, 1, 2], &mut rng), Err(DataError::Config(_))));
}

#[test]
fn epoch_draws_cover_each_domain_evenly() {
    let (_d, m) = reference_like();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut comp = BatchComposer::new(&m, &[0, 1, 2], 12, Split::Train).unwrap();
    let pool = m.select(Split::Train, &[0]).len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut seen_before_reshuffle = std::collections::BTreeSet::new();
    let per = comp.per_domain();
    for step in 0..comp.batches_per_epoch() {
        for i in comp.next_batch(&mut rng) {
            *counts.entry(i).or_default() += 1;
            if m.rows[i].domain_id == 0 && (step + 1) * per <= pool {
                assert!(seen_before_reshuffle.insert(i), "row {i} repeated before its domain ran out");
            }
        }
    }
    // counting oracle: each row is drawn ⌊k/pool⌋ or ⌈k/pool⌉ times
    for d in 0..3 {
        let rows = m.select(Split::Train, &[d]);
        let drawn: Vec<usize> = rows.iter().map(|i| counts.get(i).copied().unwrap_or(0)).collect();
        let (lo, hi) = (*drawn.iter().min().unwrap(), *drawn.iter().max().unwrap());
        assert!(hi - lo <= 1, "domain {d}: {lo}..{hi}");
    }
}

fn ramp(s: usize) -> Tensor<f32> {
    Tensor::new(vec![1, s, s], (0..s * s).map(|i| (i % 7) as f32 / 7.0 + (i / s) as f32 / (2.0 * s as f32)).collect()).unwrap()
}

#[test]
fn identity_augmentation_is_exact() {
    let img = ramp(16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(AugmentParams::IDENTITY.apply(&img, &mut rng), img);
}

#[test]
fn double_flip_recovers_the_image() {
    let img = ramp(16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let flip = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
    let once = flip.apply(&img, &mut rng);
    assert_ne!(once, img);
    assert_eq!(once.data()[0], img.data()[15]);
    let twice = flip.apply(&once, &mut rng);
    for (a, b) in twice.data().iter().zip(img.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn augmentation_is_seeded_and_train_only() {
    let img = ramp(32);
    let run = |seed| augment_image(&img, Split::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(3).data(), run(3).data());
    assert_ne!(run(3).data(), run(4).data());
    assert!(matches!(augment_image(&img, Split::Test, &mut ChaCha8Rng::seed_from_u64(0)), Err(DataError::TestSplit)));
    assert!(augment_pair(&img, &img, Split::Test, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(run(3).data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn paired_augmentation_shares_geometry() {
    // identical inputs differ only by per-view pixel noise
    let img = ramp(32);
    let (a, b) = augment_pair(&img, &img, Split::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let max_diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(max_diff > 0.0 && max_diff < 0.05, "{max_diff}");
}

#[test]
fn pure_translation_shifts_pixels() {
    let img = ramp(16);
    let p = AugmentParams { translate: (2.0, 0.0), ..AugmentParams::IDENTITY };
    let out = p.apply(&img, &mut ChaCha8Rng::seed_from_u64(0));
    for y in 0..16 {
        assert_eq!(out.data()[y * 16], 0.0);
        assert_eq!(out.data()[y * 16 + 1], 0.0);
        for x in 2..16 {
            assert!((out.data()[y * 16 + x] - img.data()[y * 16 + x - 2]).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn augmented_pixels_stay_in_range(seed in 0u64..10_000) {
        let img = ramp(16);
        let out = augment_image(&img, Split::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.dims(), img.dims());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sampled_parameters_respect_ranges(seed in 0u64..10_000) {
        let p = AugmentParams::sample(100, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(p.angle_deg.abs() <= 15.0 && p.shear_deg.abs() <= 25.0);
        prop_assert!((0.8..=1.6).contains(&p.scale));
        prop_assert!(p.translate.0.abs() <= 10.0 && p.translate.1.abs() <= 10.0);
        prop_assert_eq!(p.noise_sigma, 0.005);
    }
}
