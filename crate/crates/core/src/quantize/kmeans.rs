use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::codebook::{Codebook, CodebookSource};
use super::QuantizeError;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once `(d_prev - d) / d_prev` falls below this.
    pub rel_tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            k: 32,
            seed: 0,
            max_iters: 50,
            rel_tol: 1e-4,
        }
    }
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = squared_distance(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(centroids: &ArrayView2<f64>, x: &ArrayView2<f64>) -> Vec<(usize, f64)> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| nearest(centroids, x.row(i)))
        .collect()
}

fn kmeans_plus_plus(x: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut dist: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| squared_distance(r, x.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Round-off can walk past the end; fall back to the last
            // point with positive weight.
            if dist[pick] == 0.0 {
                pick = dist.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (i, r) in x.rows().into_iter().enumerate() {
            dist[i] = dist[i].min(squared_distance(r, x.row(next)));
        }
    }
    let mut c = Array2::zeros((k, x.ncols()));
    for (j, &i) in chosen.iter().enumerate() {
        c.row_mut(j).assign(&x.row(i));
    }
    c
}

/// k-means++ seeding followed by Lloyd iterations. Distortion is the mean
/// squared distance to the assigned centroid; `distortion_history[i]` is the
/// distortion of the i-th assignment step, and the returned centroids are
/// those that produced the last entry (then rounded to f32).
pub fn kmeans_fit(
    features: &ArrayView2<f64>,
    config: &KmeansConfig,
    source: CodebookSource,
) -> Result<Codebook, QuantizeError> {
    let (n, f) = features.dim();
    let k = config.k;
    if k == 0 {
        return Err(QuantizeError::InvalidConfig("k must be >= 1".into()));
    }
    if n < k {
        return Err(QuantizeError::TooFewPoints { n, k });
    }
    if !(config.rel_tol >= 0.0) {
        return Err(QuantizeError::InvalidConfig("rel_tol must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = kmeans_plus_plus(features, k, &mut rng);
    let mut history = Vec::new();

    for iter in 0..config.max_iters.max(1) {
        let assigned = assign_all(&centroids.view(), features);
        let distortion = assigned.iter().map(|a| a.1).sum::<f64>() / n as f64;
        let converged = match history.last() {
            Some(&prev) => prev <= 0.0 || (prev - distortion) / prev < config.rel_tol,
            None => distortion == 0.0,
        };
        history.push(distortion);
        if converged || iter + 1 == config.max_iters.max(1) {
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, f));
        let mut counts = vec![0usize; k];
        for (i, &(j, _)) in assigned.iter().enumerate() {
            let mut row = sums.row_mut(j);
            row += &features.row(i);
            counts[j] += 1;
        }
        let mut residual: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for j in 0..k {
            if counts[j] > 0 {
                let mean: Array1<f64> = sums.row(j).mapv(|v| v / counts[j] as f64);
                centroids.row_mut(j).assign(&mean);
            } else {
                // Farthest point from its own centroid; ties to lowest index.
                let mut far = 0;
                for (i, &d) in residual.iter().enumerate() {
                    if d > residual[far] {
                        far = i;
                    }
                }
                centroids.row_mut(j).assign(&features.row(far));
                residual[far] = 0.0;
            }
        }
    }

    Ok(Codebook {
        centroids: centroids.mapv(|v| v as f32 as f64),
        source,
        seed: config.seed,
        distortion_history: history,
    })
}

/// Nearest centroid per row; ties go to the lowest centroid index.
pub fn kmeans_assign(codebook: &Codebook, features: &ArrayView2<f64>) -> Result<Vec<u16>, QuantizeError> {
    if features.ncols() != codebook.dim() {
        return Err(QuantizeError::DimMismatch {
            expected: codebook.dim(),
            got: features.ncols(),
        });
    }
    Ok(assign_all(&codebook.centroids.view(), features)
        .into_iter()
        .map(|(j, _)| j as u16)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::FeatureKind;
    use ndarray::array;

    fn src() -> CodebookSource {
        CodebookSource {
            kind: FeatureKind::Raw,
            model_hash: None,
            layer: None,
        }
    }

    fn cfg(k: usize, seed: u64) -> KmeansConfig {
        KmeansConfig {
            k,
            seed,
            max_iters: 100,
            rel_tol: 0.0,
        }
    }

    #[test]
    fn exact_cover_has_zero_distortion() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [5.0, 5.0], [0.0, 0.0]];
        for seed in 0..10 {
            let cb = kmeans_fit(&x.view(), &cfg(4, seed), src()).unwrap();
            assert_eq!(*cb.distortion_history.last().unwrap(), 0.0);
        }
    }

    #[test]
    fn single_cluster_is_mean() {
        let x = array![[1.0, 2.0], [3.0, 6.0], [2.0, 1.0], [6.0, 3.0]];
        let cb = kmeans_fit(&x.view(), &cfg(1, 9), src()).unwrap();
        assert_eq!(cb.centroids, array![[3.0, 3.0]]);
        // population variances: 3.5 and 3.5
        assert_eq!(*cb.distortion_history.last().unwrap(), 7.0);
    }

    #[test]
    fn too_few_points_and_dim_mismatch() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            kmeans_fit(&x.view(), &cfg(3, 0), src()),
            Err(QuantizeError::TooFewPoints { n: 2, k: 3 })
        ));
        let cb = kmeans_fit(&x.view(), &cfg(2, 0), src()).unwrap();
        assert!(matches!(
            kmeans_assign(&cb, &array![[0.0, 1.0]].view()),
            Err(QuantizeError::DimMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook {
            centroids: array![[9.0], [9.0], [-1.0], [7.0], [8.0], [1.0]],
            source: src(),
            seed: 0,
            distortion_history: vec![],
        };
        assert_eq!(kmeans_assign(&cb, &array![[0.0], [-1.0], [9.0]].view()).unwrap(), vec![2, 2, 0]);
    }
}
