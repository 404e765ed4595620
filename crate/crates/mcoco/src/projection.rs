//! 2-D embeddings of latent codes for external plotting: exact PCA by
//! default, and an optional seeded stochastic neighbor embedding.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{McocoError, Result};

/// Which embedding algorithm `project_2d` runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectionMethod {
    /// Center the data and project onto the top two principal components.
    Pca,
    /// Gradient-descent neighbor embedding with a Student's-t output kernel.
    Tsne { perplexity: f64, iters: usize, seed: u64 },
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues (descending) and the matching eigenvectors as columns.
fn symmetric_eig(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(d);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let (mip, miq) = (m[[i, p]], m[[i, q]]);
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for i in 0..d {
                    let (mpi, mqi) = (m[[p, i]], m[[q, i]]);
                    m[[p, i]] = c * mpi - s * mqi;
                    m[[q, i]] = s * mpi + c * mqi;
                }
                for i in 0..d {
                    let (vip, viq) = (v[[i, p]], v[[i, q]]);
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::zeros((d, d));
    for (newc, &oldc) in order.iter().enumerate() {
        for r in 0..d {
            vecs[[r, newc]] = v[[r, oldc]];
        }
    }
    (vals, vecs)
}

/// Centers the data and projects it onto the top two principal components.
///
/// Deterministic; the sign of each component is fixed so that its
/// largest-magnitude coordinate is positive.
pub fn pca_2d(data: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = data.nrows();
    let d = data.ncols();
    if n < 2 {
        return Err(McocoError::InvalidInput(
            "need at least 2 points to project".into(),
        ));
    }
    if d < 2 {
        return Err(McocoError::InvalidInput(
            "need at least 2 feature dimensions to project to 2-D".into(),
        ));
    }
    let mean = data.mean_axis(Axis(0)).unwrap();
    let centered = data.to_owned() - &mean.broadcast((n, d)).unwrap();
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0).max(1.0);
    let (_, vecs) = symmetric_eig(&cov);
    let mut basis = vecs.slice(ndarray::s![.., 0..2]).to_owned();
    for mut col in basis.columns_mut() {
        let lead = col
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap();
        if lead < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
    Ok(centered.dot(&basis))
}

/// Binary search for the Gaussian bandwidth giving the requested perplexity.
fn conditional_probs(d2_row: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let n = d2_row.len();
    let target = perplexity.ln();
    let mut beta = 1.0;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut p = vec![0.0; n];
    for _ in 0..64 {
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-beta * d2_row[j]).exp() };
            sum += p[j];
        }
        if sum <= 0.0 {
            break;
        }
        let mut h = 0.0;
        for j in 0..n {
            if p[j] > 0.0 {
                let pj = p[j] / sum;
                h -= pj * pj.ln();
            }
            p[j] /= sum;
        }
        let diff = h - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    p
}

/// Seeded stochastic neighbor embedding with a Student's-t output kernel.
/// O(N²) per iteration; intended for plotting-sized datasets.
pub fn tsne_2d(
    data: &ArrayView2<f64>,
    perplexity: f64,
    iters: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let n = data.nrows();
    if n < 4 {
        return Err(McocoError::InvalidInput(
            "need at least 4 points for a neighbor embedding".into(),
        ));
    }
    if !(perplexity > 0.0) || perplexity >= n as f64 {
        return Err(McocoError::InvalidInput(format!(
            "perplexity must be in (0, n); got {}",
            perplexity
        )));
    }
    // pairwise squared distances
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = data
                .row(i)
                .iter()
                .zip(data.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[[i, j]] = dist;
            d2[[j, i]] = dist;
        }
    }
    // symmetrized high-dimensional affinities
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = conditional_probs(d2.row(i).as_slice().unwrap(), i, perplexity);
        for j in 0..n {
            p[[i, j]] = row[j];
        }
    }
    let pt = p.t().to_owned();
    p += &pt;
    p /= 2.0 * n as f64;
    p.mapv_inplace(|x| x.max(1e-12));

    // seeded Gaussian init, then gradient descent with momentum
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).unwrap();
    let mut y = Array2::<f64>::zeros((n, 2));
    y.mapv_inplace(|_| normal.sample(&mut rng));
    let mut vel = Array2::<f64>::zeros((n, 2));
    let lr = 10.0;
    for it in 0..iters {
        // low-dimensional Student's-t affinities
        let mut num = Array2::<f64>::zeros((n, n));
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let w = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[[i, j]] = w;
                num[[j, i]] = w;
                z += 2.0 * w;
            }
        }
        let z = z.max(1e-12);
        // early exaggeration for the first quarter of the schedule
        let exag = if it * 4 < iters { 4.0 } else { 1.0 };
        let momentum = if it * 4 < iters { 0.5 } else { 0.8 };
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[[i, j]] / z;
                let coeff = 4.0 * (exag * p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += coeff * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += coeff * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        vel = momentum * &vel - lr * &grad;
        y += &vel;
        // keep the embedding centered
        let mean = y.mean_axis(Axis(0)).unwrap();
        y -= &mean.broadcast((n, 2)).unwrap();
    }
    Ok(y)
}

/// Runs the selected method.
pub fn project_2d(data: &ArrayView2<f64>, method: ProjectionMethod) -> Result<Array2<f64>> {
    match method {
        ProjectionMethod::Pca => pca_2d(data),
        ProjectionMethod::Tsne {
            perplexity,
            iters,
            seed,
        } => tsne_2d(data, perplexity, iters, seed),
    }
}
