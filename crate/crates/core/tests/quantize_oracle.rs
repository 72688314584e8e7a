//! k-means against exhaustive partitions, closed forms and a linear scan.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgcb_core::quantize::{kmeans_assign, kmeans_fit, CodebookSource, FeatureKind, KmeansConfig};

fn source() -> CodebookSource {
    CodebookSource {
        kind: FeatureKind::Raw,
        model_hash: None,
        layer: None,
    }
}

fn config(k: usize, seed: u64) -> KmeansConfig {
    KmeansConfig {
        k,
        seed,
        max_iters: 100,
        rel_tol: 0.0,
    }
}

fn random_points(n: usize, f: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, f), |_| rng.gen_range(-5.0..5.0))
}

/// Mean squared distance of each point to its cluster mean.
fn partition_cost(points: &ArrayView2<f64>, labels: &[usize], k: usize) -> f64 {
    let f = points.ncols();
    let mut sums = vec![vec![0.0; f]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for d in 0..f {
            sums[c][d] += points[[i, d]];
        }
    }
    let mut cost = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        for d in 0..f {
            let m = sums[c][d] / counts[c] as f64;
            cost += (points[[i, d]] - m).powi(2);
        }
    }
    cost / labels.len() as f64
}

/// Optimal distortion over every labelling of the points into `k` non-empty clusters.
fn optimal_distortion(points: &ArrayView2<f64>, k: usize) -> f64 {
    let n = points.nrows();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().all(|&u| u) {
            best = best.min(partition_cost(points, &labels, k));
        }
    }
    best
}

fn linear_scan(centroids: &Array2<f64>, points: &ArrayView2<f64>) -> Vec<u16> {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (j, c) in centroids.rows().into_iter().enumerate() {
                let d: f64 = p.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0 as u16
        })
        .collect()
}

// Relative gap (lloyd - optimum) / optimum observed for seeds 0..6 when these
// fixtures were recorded; each seed's gap must not grow past it.
const RECORDED_GAPS: [f64; 6] = [0.217605, 0.034524, 0.097988, 0.140467, 0.168237, 0.0];

#[test]
fn lloyd_versus_exhaustive_partitions() {
    for (seed, &recorded) in RECORDED_GAPS.iter().enumerate() {
        let points = random_points(12, 2, 100 + seed as u64);
        let optimum = optimal_distortion(&points.view(), 3);
        let cb = kmeans_fit(&points.view(), &config(3, seed as u64), source()).unwrap();
        let lloyd = *cb.distortion_history.last().unwrap();
        let gap = (lloyd - optimum) / optimum;
        println!("seed {seed}: lloyd {lloyd:.6} optimum {optimum:.6} gap {gap:.6}");
        assert!(lloyd >= optimum - 1e-12);
        assert!(gap <= recorded + 1e-9, "seed {seed}: gap {gap} above recorded {recorded}");
    }
}

#[test]
fn distortion_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for fit in 0..100u64 {
        let n = rng.gen_range(20..200);
        let f = rng.gen_range(1..6);
        let k = rng.gen_range(1..=n.min(12));
        let points = random_points(n, f, 1000 + fit);
        let cb = kmeans_fit(&points.view(), &config(k, fit), source()).unwrap();
        for w in cb.distortion_history.windows(2) {
            assert!(w[1] <= w[0], "fit {fit}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn closed_form_cases() {
    for seed in 0..10u64 {
        let points = random_points(40, 3, seed);
        // K = 1: the centroid is the mean, distortion the summed per-dimension variance.
        let cb = kmeans_fit(&points.view(), &config(1, seed), source()).unwrap();
        let mean = points.mean_axis(ndarray::Axis(0)).unwrap();
        let var: f64 = (0..3).map(|d| points.column(d).mapv(|v| (v - mean[d]).powi(2)).mean().unwrap()).sum();
        for d in 0..3 {
            assert_eq!(cb.centroids[[0, d]], mean[d] as f32 as f64);
        }
        assert!((cb.distortion_history.last().unwrap() - var).abs() < 1e-12 * var);

        // K = N distinct points: every point is its own centroid.
        let cb = kmeans_fit(&points.view(), &config(40, seed), source()).unwrap();
        assert_eq!(*cb.distortion_history.last().unwrap(), 0.0);
    }
}

#[test]
fn assignment_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50u64 {
        let f = rng.gen_range(1..8);
        let k = rng.gen_range(1..20);
        let train = random_points(k + 50, f, 2 * trial);
        let cb = kmeans_fit(&train.view(), &config(k, trial), source()).unwrap();
        let mut probe = random_points(300, f, 2 * trial + 1);
        // Include exact centroids so ties at zero distance are exercised.
        for j in 0..k.min(10) {
            probe.row_mut(j).assign(&cb.centroids.row(j));
        }
        assert_eq!(
            kmeans_assign(&cb, &probe.view()).unwrap(),
            linear_scan(&cb.centroids, &probe.view())
        );
    }
}

#[test]
fn refit_is_bit_identical() {
    let points = random_points(500, 4, 3);
    let a = kmeans_fit(&points.view(), &config(16, 5), source()).unwrap();
    let b = kmeans_fit(&points.view(), &config(16, 5), source()).unwrap();
    assert_eq!(a.centroids, b.centroids);
    assert_eq!(a.distortion_history, b.distortion_history);
}
