use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::synthetic_shapes;

fn blobs(k: usize, per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..k {
        let center = [(c % 3) as f64 * 10.0, (c / 3) as f64 * 10.0];
        for _ in 0..per {
            x.push(center.iter().map(|m| m + sigma * rng.sample::<f64, _>(normal)).collect());
            y.push(c);
        }
    }
    (x, y)
}

#[test]
fn pca_recovers_axis_variances() {
    let x = vec![
        vec![3.0, 0.0, 0.0],
        vec![-3.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, -1.0, 0.0],
    ];
    let (pca, proj) = pca_reduce(&x, 2).unwrap();
    assert!((pca.eigenvalues[0] - 6.0).abs() < 1e-12);
    assert!((pca.eigenvalues[1] - 2.0 / 3.0).abs() < 1e-12);
    assert!(pca.eigenvalues[2].abs() < 1e-12);
    // Axes are unique up to sign.
    assert!((pca.components[0][0].abs() - 1.0).abs() < 1e-12);
    assert!((pca.components[1][1].abs() - 1.0).abs() < 1e-12);
    assert!((proj[0][0].abs() - 3.0).abs() < 1e-12 && (proj[0][0] + proj[1][0]).abs() < 1e-12);
    let ratio = pca.explained_variance_ratio();
    assert!((ratio[0] + ratio[1] - 1.0).abs() < 1e-12);
}

#[test]
fn pca_on_a_plane_keeps_two_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (u, v) = ([1.0, 2.0, 0.5, 0.0], [0.0, -1.0, 1.0, 3.0]);
    let x: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (0..4).map(|d| 5.0 + a * u[d] + b * v[d]).collect()
        })
        .collect();
    let (pca, proj) = pca_reduce(&x, 3).unwrap();
    assert_eq!(pca.out_dims(), 2, "rank-2 data keeps two components");
    // Projections preserve pairwise distances within the plane.
    let d = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    assert!((d(&proj[0], &proj[1]) - d(&x[0], &x[1])).abs() < 1e-9);
    assert!(pca_reduce(&x, 5).is_err());
    assert!(pca_reduce(&x[..2], 2).is_err());
}

#[test]
fn kmeans_separates_distant_groups() {
    let (x, y) = blobs(3, 30, 0.5, 2);
    let km = kmeans(&x, 3, 0, 300, 1e-6).unwrap();
    assert_eq!(cluster_purity(&km.assignments, &y).unwrap(), 1.0);
    assert_eq!(km.centroids.len(), 3);
    let again = kmeans(&x, 3, 0, 300, 1e-6).unwrap();
    assert_eq!(km, again);
    assert!(kmeans(&x, 91, 0, 10, 1e-6).is_err());
    // One cluster: centroid is the mean.
    let one = kmeans_single(&x, 1, 0, 10, 1e-9).unwrap();
    let mean0 = x.iter().map(|r| r[0]).sum::<f64>() / x.len() as f64;
    assert!((one.centroids[0][0] - mean0).abs() < 1e-9);
}

#[test]
fn kmeans_restarts_never_do_worse_than_one_run() {
    let (x, _) = blobs(5, 20, 3.0, 3);
    let best = kmeans(&x, 5, 4, 300, 1e-6).unwrap();
    let single = kmeans_single(&x, 5, 4000, 300, 1e-6).unwrap();
    assert!(best.inertia <= single.inertia + 1e-9);
}

proptest! {
    #[test]
    fn lloyd_iterations_do_not_increase_inertia(seed in 0u64..500, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let km = kmeans_single(&x, k, seed, 100, 0.0).unwrap();
        for w in km.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        prop_assert!(km.inertia <= km.inertia_trace[0] + 1e-9);
        prop_assert!(km.assignments.iter().all(|&a| a < k));
    }

    #[test]
    fn purity_is_a_fraction(assign in prop::collection::vec(0usize..4, 1..50), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = assign.iter().map(|_| rng.random_range(0..3)).collect();
        let p = cluster_purity(&assign, &truth).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(cluster_purity(&truth, &truth).unwrap(), 1.0);
    }
}

#[test]
fn silhouette_reference_value() {
    let x = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
    let expect = (9.5 / 10.5 + 8.5 / 9.5) / 2.0;
    assert!((silhouette(&x, &[0, 0, 1, 1]).unwrap() - expect).abs() < 1e-12);
    // A singleton contributes zero.
    let s = silhouette(&[vec![0.0], vec![1.0], vec![10.0]], &[0, 0, 1]).unwrap();
    let expect = ((10.0 - 1.0) / 10.0 + (9.0 - 1.0) / 9.0) / 3.0;
    assert!((s - expect).abs() < 1e-12);
    assert!(silhouette(&x, &[0, 0, 0, 0]).is_err());
    assert!(silhouette(&x, &[0, 1]).is_err());
}

#[test]
fn purity_reference_value() {
    assert_eq!(cluster_purity(&[0, 0, 1, 1], &[5, 5, 5, 6]).unwrap(), 0.75);
    assert!(cluster_purity(&[], &[]).is_err());
}

#[test]
fn silhouette_selects_the_true_cluster_count() {
    let (x, y) = blobs(4, 40, 0.6, 5);
    let sel = select_k_silhouette(&x, 2..=7, 0).unwrap();
    assert_eq!(sel.k, 4);
    assert_eq!(sel.scores.len(), 6);
    assert!(cluster_purity(&sel.clustering.assignments, &y).unwrap() > 0.99);
    assert!(select_k_silhouette(&x, 1..=3, 0).is_err());
    assert!(select_k_silhouette(&x[..5], 2..=5, 0).is_err());
}

#[test]
fn weak_label_manifest_round_trips_and_relabels() {
    let set = synthetic_shapes(3, 20, 32, 1, 6);
    let manifest = weak_labels(&set, &RawPixels, 20, 2..=5, 1).unwrap();
    assert_eq!(manifest.rows.len(), set.len());
    assert!((2..=5).contains(&manifest.meta.k));
    assert_eq!(manifest.meta.extractor, "raw_pixels");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weak.csv");
    manifest.write(&path).unwrap();
    let back = WeakLabelManifest::read(&path).unwrap();
    assert_eq!(back, manifest);

    let relabeled = back.relabel(&set).unwrap();
    assert_eq!(relabeled.labels, manifest.rows.iter().map(|r| r.weak_label).collect::<Vec<_>>());
    assert_eq!(relabeled.pixels, set.pixels);
    let mut stranger = set.clone();
    stranger.ids[0] = 10_000;
    assert!(matches!(back.relabel(&stranger), Err(YganError::Input(_))));
}

#[test]
fn random_conv_features_are_fixed() {
    let set = synthetic_shapes(2, 3, 32, 1, 7);
    let net = RandomConvNet::new(32, 1, 12, 3).unwrap();
    let a = extract_features(&set, &net).unwrap();
    let b = extract_features(&set, &RandomConvNet::new(32, 1, 12, 3).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].len(), 12);
    assert_ne!(a[0], a[3]);
}
