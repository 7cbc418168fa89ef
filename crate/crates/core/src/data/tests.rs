use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::YganError;

fn write_idx(dir: &Path, n: usize, rows: usize, cols: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        images.extend((d as u32).to_be_bytes());
    }
    images.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    labels.extend((0..n).map(|i| (i % 10) as u8));
    let (ip, lp) = (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"));
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    (ip, lp)
}

/// Ten-class set where sample `i` has label `i % 10` and constant pixels.
fn toy_set(n: usize) -> ImageSet {
    let mut set = ImageSet::new(1, 4);
    for i in 0..n {
        set.push(&[((i % 7) as f32 / 7.0) * 2.0 - 1.0; 16], i % 10, false, i);
    }
    set
}

#[test]
fn idx_pair_parses_and_rescales() {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), 5, 28, 28);
    let spec = DatasetSpec {
        path: dir.path().to_path_buf(),
        ..Default::default()
    };
    let set = load_dataset(&spec).unwrap();
    assert_eq!(set.len(), 5);
    assert_eq!(set.size, 32);
    assert_eq!(set.image(0).len(), 32 * 32);
    assert_eq!(set.labels, vec![0, 1, 2, 3, 4]);
    assert!(set.pixel_range_ok());
}

#[test]
fn idx_bad_magic_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx(dir.path(), 2, 28, 28);
    let mut bytes = std::fs::read(&ip).unwrap();
    bytes[3] = 0x01;
    std::fs::write(&ip, bytes).unwrap();
    let spec = DatasetSpec {
        path: ip.clone(),
        labels: Some(lp),
        ..Default::default()
    };
    match load_dataset(&spec) {
        Err(YganError::Ingest { file, .. }) => assert_eq!(file, ip),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn idx_truncated_body_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, _) = write_idx(dir.path(), 3, 28, 28);
    let bytes = std::fs::read(&ip).unwrap();
    std::fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(read_idx_images(&ip), Err(YganError::Ingest { .. })));
}

#[test]
fn image_folder_labels_follow_sorted_directory_names() {
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = (0..14).map(|i| format!("class_{i:02}")).collect();
    for (i, name) in names.iter().enumerate().rev() {
        let class_dir = dir.path().join(name);
        std::fs::create_dir_all(class_dir.join("anomalous")).unwrap();
        let px = vec![(i as f32 / 14.0) * 2.0 - 1.0; 3 * 20 * 20];
        write_image(&class_dir.join("a.png"), &px, 3, 20, 20).unwrap();
        if i % 2 == 0 {
            write_image(&class_dir.join("anomalous").join("b.png"), &px, 3, 20, 20).unwrap();
        }
    }
    let (set, found) = load_image_folder(dir.path(), 32, 3).unwrap();
    assert_eq!(found, names);
    assert_eq!(set.classes(), (0..14).collect::<Vec<_>>());
    assert_eq!(set.len(), 21);
    assert_eq!(set.anomalous.iter().filter(|a| **a).count(), 7);
    for i in 0..set.len() {
        if set.anomalous[i] {
            assert_eq!(set.labels[i] % 2, 0);
        }
    }
    assert!(set.pixel_range_ok());
}

#[test]
fn split_removes_anomalies_and_remaps_labels() {
    let set = toy_set(1000);
    let split = k_classes_out_split(&set, &SplitSpec::default()).unwrap();
    assert_eq!(split.num_classes(), 9);
    assert_eq!(split.manifest.label_map, (1..10).collect::<Vec<_>>());
    assert_eq!(split.train.classes(), (0..9).collect::<Vec<_>>());
    assert!(split.train.ids.iter().all(|&id| set.labels[id] != 0));
    assert_eq!(split.train.len(), 720);
    // 180 normal test samples, balanced against 100 anomalies
    assert_eq!(split.test.len(), 200);
    assert_eq!(split.test.anomalous.iter().filter(|a| **a).count(), 100);

    let unbalanced = SplitSpec {
        balance_test: false,
        ..Default::default()
    };
    let split = k_classes_out_split(&set, &unbalanced).unwrap();
    assert_eq!(split.test.len(), 280);
}

#[test]
fn split_fraction_arithmetic() {
    let mut set = toy_set(0);
    for i in 0..1100 {
        set.push(&[0.0; 16], if i < 1000 { 1 + i % 2 } else { 0 }, false, i);
    }
    let split = k_classes_out_split(
        &set,
        &SplitSpec {
            balance_test: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(split.train.len(), 800);
    assert_eq!(split.test.len() - 100, 200);
}

#[test]
fn split_is_reproducible_and_seed_dependent() {
    let set = toy_set(500);
    let a = k_classes_out_split(&set, &SplitSpec::default()).unwrap();
    let b = k_classes_out_split(&set, &SplitSpec::default()).unwrap();
    assert_eq!(a.manifest, b.manifest);
    let c = k_classes_out_split(
        &set,
        &SplitSpec {
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    assert_ne!(a.manifest.train_ids, c.manifest.train_ids);
}

#[test]
fn external_anomalies_come_from_flags() {
    let mut set = toy_set(200);
    for i in 0..200 {
        set.anomalous[i] = i % 5 == 0;
    }
    let spec = SplitSpec {
        anomaly_class: AnomalyClass::External,
        ..Default::default()
    };
    let split = k_classes_out_split(&set, &spec).unwrap();
    assert!(split.train.ids.iter().all(|&id| id % 5 != 0));
    for (k, &id) in split.test.ids.iter().enumerate() {
        assert_eq!(split.test.anomalous[k], id % 5 == 0);
    }
}

#[test]
fn split_without_anomalies_is_a_protocol_error() {
    let set = toy_set(100);
    let spec = SplitSpec {
        anomaly_class: AnomalyClass::Class(42),
        ..Default::default()
    };
    assert!(matches!(k_classes_out_split(&set, &spec), Err(YganError::Protocol(_))));
}

#[test]
fn balanced_hold_out_excludes_training_samples() {
    let set = toy_set(1000);
    let split = k_classes_out_split(&set, &SplitSpec::default()).unwrap();
    let held = held_out_balanced(&set, &split.manifest, 50, 4).unwrap();
    assert!(held.ids.iter().all(|id| !split.manifest.train_ids.contains(id)));
    // Each class contributes its held-out samples, capped at 50.
    let count = |labels: &[usize], c: usize| labels.iter().filter(|&&l| l == c).count();
    let outside: Vec<usize> =
        (0..set.len()).filter(|&i| !split.manifest.train_ids.contains(&set.ids[i])).map(|i| set.labels[i]).collect();
    assert_eq!(count(&held.labels, 0), 50);
    assert!((0..10).all(|c| count(&held.labels, c) == count(&outside, c).min(50)));
    assert!((1..10).any(|c| count(&held.labels, c) > 0));
    assert!(held.labels.iter().zip(&held.anomalous).all(|(&l, &a)| a == (l == 0)));
    assert_eq!(held, held_out_balanced(&set, &split.manifest, 50, 4).unwrap());
    assert!(held_out_balanced(&set, &split.manifest, 0, 4).is_err());
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 40usize..400, seed in any::<u64>(), cls in 0usize..10, balance in any::<bool>()) {
        let set = toy_set(n);
        let spec = SplitSpec { anomaly_class: AnomalyClass::Class(cls), seed, balance_test: balance, ..Default::default() };
        let split = k_classes_out_split(&set, &spec).unwrap();
        let mut seen = vec![false; n];
        for &id in split.train.ids.iter().chain(&split.test.ids) {
            prop_assert!(!seen[id]);
            seen[id] = true;
        }
        prop_assert!(split.train.ids.iter().all(|&id| set.labels[id] != cls));
        prop_assert!(split.train.anomalous.iter().all(|a| !a));
    }
}

fn gray_digits(n: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ImageSet::new(1, 8);
    for i in 0..n {
        let img: Vec<f32> = (0..64).map(|_| if rng.random_bool(0.3) { 1.0 } else { -1.0 }).collect();
        set.push(&img, rng.random_range(0..10), false, i);
    }
    set
}

#[test]
fn color_mnist_construction() {
    let src = gray_digits(50, 1);
    let palette = default_palette();
    assert_eq!(palette.len(), 10);
    let out = make_color_mnist(&src, &palette, 3).unwrap();
    assert_eq!(out.set.channels, 3);
    assert_eq!(out.set.labels, src.labels);
    for i in 0..src.len() {
        let rgb = palette[out.colors[i]].rgb.map(|v| v as f32 / 127.5 - 1.0);
        for (p, &v) in src.image(i).iter().enumerate() {
            for c in 0..3 {
                let o = out.set.image(i)[c * 64 + p];
                if v > 0.0 {
                    assert_eq!(o, -1.0);
                } else {
                    assert_eq!(o, rgb[c]);
                }
            }
        }
    }
    assert!(out.set.pixel_range_ok());
    assert!(matches!(make_color_mnist(&out.set, &palette, 0), Err(YganError::Input(_))));
}

#[test]
fn color_mnist_colors_are_balanced_and_independent_of_digits() {
    let src = gray_digits(10_000, 2);
    let out = make_color_mnist(&src, &default_palette(), 7).unwrap();
    let mut per_color = [0usize; 10];
    let mut joint = [[0f64; 10]; 10];
    for i in 0..src.len() {
        per_color[out.colors[i]] += 1;
        joint[src.labels[i]][out.colors[i]] += 1.0;
    }
    // binomial sd is 30; 5 sd either side
    assert!(per_color.iter().all(|&c| (850..=1150).contains(&c)), "{per_color:?}");
    let n = src.len() as f64;
    let rows: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..10).map(|c| joint.iter().map(|r| r[c]).sum()).collect();
    let mut chi2 = 0.0;
    for d in 0..10 {
        for c in 0..10 {
            let e = rows[d] * cols[c] / n;
            chi2 += (joint[d][c] - e).powi(2) / e;
        }
    }
    // 81 degrees of freedom; 0.999 quantile is about 129
    assert!(chi2 < 129.0, "chi-square {chi2}");
}

#[test]
fn color_mnist_is_seeded() {
    let src = gray_digits(100, 4);
    let a = make_color_mnist(&src, &default_palette(), 5).unwrap();
    let b = make_color_mnist(&src, &default_palette(), 5).unwrap();
    assert_eq!(a.colors, b.colors);
    assert_eq!(a.set, b.set);
}

#[test]
fn augment_identity_flip_and_determinism() {
    let set = synthetic_shapes(3, 2, 32, 3, 0);
    let img = set.image(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(img, 3, 32, &AugmentPolicy::default(), &mut rng), img);

    let flip = AugmentPolicy {
        flip: 1.0,
        ..Default::default()
    };
    let once = augment(img, 3, 32, &flip, &mut rng);
    assert_ne!(once, img);
    assert_eq!(augment(&once, 3, 32, &flip, &mut rng), img);

    let policy = AugmentPolicy {
        sharpen: 1.0,
        emboss: 0.5,
        equalize: 0.5,
        ..AugmentPolicy::conservative()
    };
    let a = augment(img, 3, 32, &policy, &mut ChaCha8Rng::seed_from_u64(8));
    let b = augment(img, 3, 32, &policy, &mut ChaCha8Rng::seed_from_u64(8));
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn augment_set_multiplies_corpus() {
    let set = synthetic_shapes(2, 3, 32, 1, 0);
    let policy = AugmentPolicy::conservative();
    policy.validate().unwrap();
    let out = augment_set(&set, &policy, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(out.len(), 5 * set.len());
    assert_eq!(out.labels[set.len()..set.len() + 6], set.labels[..]);
    assert!(out.pixel_range_ok());
}

proptest! {
    #[test]
    fn augmentation_keeps_range(seed in any::<u64>()) {
        let set = synthetic_shapes(2, 1, 32, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = AugmentPolicy { sharpen: 0.5, emboss: 0.5, equalize: 0.5, ..AugmentPolicy::conservative() };
        let out = augment(set.image(0), 1, 32, &policy, &mut rng);
        prop_assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn batch_counts() {
    assert_eq!(batches(100, 32, 0, 0, true).len(), 3);
    let all = batches(100, 32, 0, 0, false);
    assert_eq!(all.len(), 4);
    let mut covered: Vec<usize> = all.concat();
    covered.sort_unstable();
    assert_eq!(covered, (0..100).collect::<Vec<_>>());
    assert_eq!(sequential_batches(100, 32)[3], (96..100).collect::<Vec<_>>());
}

#[test]
fn batch_order_varies_by_epoch_and_reproduces() {
    let e0 = batches(64, 8, 11, 0, true);
    let e1 = batches(64, 8, 11, 1, true);
    assert_ne!(e0, e1);
    assert_eq!(e1, batches(64, 8, 11, 1, true));
}

#[test]
fn synthetic_dataset_through_spec() {
    let spec = DatasetSpec {
        source: SourceKind::Synthetic,
        num_classes: 4,
        per_class: 5,
        ..Default::default()
    };
    let set = load_dataset(&spec).unwrap();
    assert_eq!(set.len(), 20);
    assert_eq!(set.classes(), vec![0, 1, 2, 3]);
    assert!(set.pixel_range_ok());
    let t = set.batch::<f32>(&[0, 3]);
    assert_eq!(t.shape(), &[2, 1, 32, 32]);
}
