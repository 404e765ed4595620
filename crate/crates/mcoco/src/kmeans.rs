//! Lloyd's algorithm with k-means++ seeding and restarts.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{McocoError, Result};

pub struct KMeansConfig {
    pub n_restarts: usize,
    pub max_iters: usize,
    /// Relative WCSS improvement below which an iteration stops.
    pub rel_tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_restarts: 10,
            max_iters: 300,
            rel_tol: 1e-4,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c.as_slice().unwrap());
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeanspp_seed(data: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let d = data.ncols();
    let mut centroids = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut dists: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i).as_slice().unwrap(), centroids.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = dists.iter().sum();
        let idx = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in dists.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        };
        centroids.row_mut(c).assign(&data.row(idx));
        for i in 0..n {
            let d2 = sq_dist(data.row(i).as_slice().unwrap(), centroids.row(c).as_slice().unwrap());
            if d2 < dists[i] {
                dists[i] = d2;
            }
        }
    }
    centroids
}

fn lloyd(
    data: &ArrayView2<f64>,
    mut centroids: Array2<f64>,
    cfg: &KMeansConfig,
) -> (Array2<f64>, Vec<usize>, f64) {
    let n = data.nrows();
    let d = data.ncols();
    let k = centroids.nrows();
    let mut assign = vec![0usize; n];
    let mut prev_wcss = f64::INFINITY;
    let mut wcss;
    for _ in 0..cfg.max_iters {
        wcss = 0.0;
        for i in 0..n {
            let (j, dist) = nearest(data.row(i).as_slice().unwrap(), &centroids);
            assign[i] = j;
            wcss += dist;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assign[i];
            counts[j] += 1;
            let mut row = sums.row_mut(j);
            row += &data.row(i);
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Reseed an empty centroid to the point farthest from its own centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(
                            data.row(a).as_slice().unwrap(),
                            centroids.row(assign[a]).as_slice().unwrap(),
                        );
                        let db = sq_dist(
                            data.row(b).as_slice().unwrap(),
                            centroids.row(assign[b]).as_slice().unwrap(),
                        );
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(j).assign(&data.row(far));
            } else {
                let c = counts[j] as f64;
                centroids
                    .row_mut(j)
                    .assign(&sums.row(j).mapv(|x| x / c));
            }
        }
        if prev_wcss.is_finite() && (prev_wcss - wcss).abs() <= cfg.rel_tol * prev_wcss.max(1e-12) {
            break;
        }
        prev_wcss = wcss;
    }
    // Final assignment with the updated centroids.
    wcss = 0.0;
    for i in 0..n {
        let (j, dist) = nearest(data.row(i).as_slice().unwrap(), &centroids);
        assign[i] = j;
        wcss += dist;
    }
    (centroids, assign, wcss)
}

/// Runs k-means with restarts; keeps the lowest-WCSS solution.
pub fn kmeans(
    data: &ArrayView2<f64>,
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>, f64)> {
    let n = data.nrows();
    if k == 0 {
        return Err(McocoError::InvalidInput("k must be positive".into()));
    }
    if k > n {
        return Err(McocoError::InvalidInput(format!(
            "k = {} exceeds number of points {}",
            k, n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Array2<f64>, Vec<usize>, f64)> = None;
    for _ in 0..cfg.n_restarts.max(1) {
        let seedc = kmeanspp_seed(data, k, &mut rng);
        let run = lloyd(data, seedc, cfg);
        if best.as_ref().map_or(true, |b| run.2 < b.2) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}
