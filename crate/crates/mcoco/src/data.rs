//! Multi-view dataset model, on-disk format, normalization, and synthetic
//! data generation.
//!
//! On-disk layout of a dataset directory:
//! - `manifest.json` — `n_samples`, `n_views`, `view_dims`, `has_labels`,
//!   `k` (nullable), `format_version` (`"1"`).
//! - `view_{i}.bin` — two little-endian `u32` (N, D_i), then N·D_i
//!   little-endian `f32`, row-major.
//! - `labels.bin` — one little-endian `u32` (N), then N little-endian `u32`.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{McocoError, Result};

pub const FORMAT_VERSION: &str = "1";

/// m feature matrices over the same N samples, with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub views: Vec<Array2<f32>>,
    pub labels: Option<Vec<u32>>,
    pub k_hint: Option<usize>,
}

impl MultiViewDataset {
    pub fn new(
        views: Vec<Array2<f32>>,
        labels: Option<Vec<u32>>,
        k_hint: Option<usize>,
    ) -> Result<Self> {
        let ds = Self {
            views,
            labels,
            k_hint,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_samples(&self) -> usize {
        self.views.first().map_or(0, |v| v.nrows())
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.ncols()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(McocoError::InvalidInput(format!(
                "need at least 2 views, got {}",
                self.views.len()
            )));
        }
        let n = self.views[0].nrows();
        if n < 1 {
            return Err(McocoError::InvalidInput("need at least 1 sample".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.nrows() != n {
                return Err(McocoError::DimensionMismatch(format!(
                    "view {} has {} rows, expected {}",
                    i,
                    v.nrows(),
                    n
                )));
            }
            if v.ncols() < 1 {
                return Err(McocoError::InvalidInput(format!("view {} has 0 columns", i)));
            }
            if let Some(off) = v.iter().position(|x| !x.is_finite()) {
                return Err(McocoError::NonFinite {
                    file: format!("view {}", i),
                    offset: off,
                });
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(McocoError::DimensionMismatch(format!(
                    "labels length {} does not match n_samples {}",
                    labels.len(),
                    n
                )));
            }
            let k = self
                .k_hint
                .ok_or_else(|| McocoError::InvalidInput("labels present but k_hint missing".into()))?;
            let mut seen = vec![false; k];
            for &l in labels {
                let l = l as usize;
                if l >= k {
                    return Err(McocoError::InvalidInput(format!(
                        "label {} out of range [0, {})",
                        l, k
                    )));
                }
                seen[l] = true;
            }
            if !seen.iter().all(|&s| s) {
                return Err(McocoError::InvalidInput(
                    "some class in [0, k) has no samples".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Controls for [`generate_synthetic`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_clusters: usize,
    pub n_views: usize,
    pub latent_dim: usize,
    pub view_dims: Vec<usize>,
    pub noise_sigmas: Vec<f64>,
    pub cluster_separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(McocoError::InvalidInput("n_clusters must be >= 2".into()));
        }
        if self.n_views < 2 {
            return Err(McocoError::InvalidInput("n_views must be >= 2".into()));
        }
        if self.n_samples < self.n_clusters {
            return Err(McocoError::InvalidInput(
                "n_samples must be >= n_clusters".into(),
            ));
        }
        if self.latent_dim == 0 {
            return Err(McocoError::InvalidInput("latent_dim must be positive".into()));
        }
        if self.view_dims.len() != self.n_views || self.noise_sigmas.len() != self.n_views {
            return Err(McocoError::InvalidInput(
                "view_dims and noise_sigmas must have length n_views".into(),
            ));
        }
        if self.view_dims.iter().any(|&d| d == 0) {
            return Err(McocoError::InvalidInput("every view_dim must be positive".into()));
        }
        if self.noise_sigmas.iter().any(|&s| s < 0.0) {
            return Err(McocoError::InvalidInput("noise_sigmas must be >= 0".into()));
        }
        if self.cluster_separation <= 0.0 {
            return Err(McocoError::InvalidInput(
                "cluster_separation must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn standard_normal_mat(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| StandardNormal.sample(rng))
}

/// Draws a labeled multi-view dataset from a shared latent mixture.
///
/// Cluster means are standard-normal draws rescaled so their minimum pairwise
/// distance equals `cluster_separation`. Each sample is its cluster mean plus
/// unit Gaussian jitter; view i applies an independent random linear map
/// followed by `tanh`, plus Gaussian noise of scale `noise_sigmas[i]`. The
/// RNG is ChaCha8 seeded with `spec.seed`, so output is reproducible across
/// platforms.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.n_clusters;
    let n = spec.n_samples;
    let d = spec.latent_dim;

    // Cluster means with controlled minimum pairwise distance.
    let mut means = standard_normal_mat(&mut rng, k, d);
    let mut min_dist = f64::INFINITY;
    for a in 0..k {
        for b in (a + 1)..k {
            let dist: f64 = means
                .row(a)
                .iter()
                .zip(means.row(b).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    if min_dist < 1e-9 {
        // Astronomically unlikely with a continuous draw, but keep it total.
        return Err(McocoError::DegenerateInput(
            "coincident cluster means; try another seed".into(),
        ));
    }
    means.mapv_inplace(|x| x * spec.cluster_separation / min_dist);

    // Round-robin cluster assignment, then a random permutation of sample order.
    let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }

    let mut latent = Array2::zeros((n, d));
    for i in 0..n {
        let c = labels[i] as usize;
        for j in 0..d {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            latent[[i, j]] = means[[c, j]] + jitter;
        }
    }

    let mut views = Vec::with_capacity(spec.n_views);
    for v in 0..spec.n_views {
        let dv = spec.view_dims[v];
        let w = standard_normal_mat(&mut rng, d, dv).mapv(|x| x / (d as f64).sqrt());
        let mut x = latent.dot(&w);
        x.mapv_inplace(f64::tanh);
        let sigma = spec.noise_sigmas[v];
        if sigma > 0.0 {
            for e in x.iter_mut() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *e += sigma * noise;
            }
        }
        views.push(x.mapv(|e| e as f32));
    }

    MultiViewDataset::new(views, Some(labels), Some(k))
}

/// Rescales every feature column of every view to [0, 1] by per-column
/// min-max; constant columns map to 0. Labels unchanged. Idempotent.
pub fn normalize_views(ds: &MultiViewDataset) -> Result<MultiViewDataset> {
    ds.validate()?;
    let views = ds
        .views
        .iter()
        .map(|v| {
            let mut out = v.clone();
            for mut col in out.columns_mut() {
                let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                if hi > lo {
                    let range = hi - lo;
                    col.mapv_inplace(|x| (x - lo) / range);
                } else {
                    col.fill(0.0);
                }
            }
            out
        })
        .collect();
    Ok(MultiViewDataset {
        views,
        labels: ds.labels.clone(),
        k_hint: ds.k_hint,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n_samples: usize,
    n_views: usize,
    view_dims: Vec<usize>,
    has_labels: bool,
    k: Option<usize>,
    format_version: String,
}

fn write_matrix_f32(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + m.len() * 4);
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for &x in m.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| McocoError::io(path.display().to_string(), e))
}

fn read_matrix_f32(path: &Path) -> Result<Array2<f32>> {
    let fname = path.display().to_string();
    let mut f = fs::File::open(path).map_err(|e| McocoError::io(fname.clone(), e))?;
    let mut header = [0u8; 8];
    f.read_exact(&mut header)
        .map_err(|_| McocoError::MalformedFile {
            file: fname.clone(),
            reason: "truncated header".into(),
        })?;
    let n = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| McocoError::io(fname.clone(), e))?;
    if bytes.len() != n * d * 4 {
        return Err(McocoError::MalformedFile {
            file: fname,
            reason: format!(
                "expected {} f32 values ({} bytes), found {} bytes",
                n * d,
                n * d * 4,
                bytes.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for (idx, chunk) in bytes.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(McocoError::NonFinite {
                file: fname,
                offset: idx,
            });
        }
        data.push(x);
    }
    Array2::from_shape_vec((n, d), data).map_err(|e| McocoError::MalformedFile {
        file: fname,
        reason: e.to_string(),
    })
}

/// Writes a dataset directory in the documented format.
pub fn save_dataset(ds: &MultiViewDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| McocoError::io(dir.display().to_string(), e))?;
    let manifest = Manifest {
        n_samples: ds.n_samples(),
        n_views: ds.n_views(),
        view_dims: ds.view_dims(),
        has_labels: ds.labels.is_some(),
        k: ds.k_hint,
        format_version: FORMAT_VERSION.to_string(),
    };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| McocoError::io(mpath.display().to_string(), e))?;
    for (i, v) in ds.views.iter().enumerate() {
        write_matrix_f32(&dir.join(format!("view_{}.bin", i)), v)?;
    }
    if let Some(labels) = &ds.labels {
        let lpath = dir.join("labels.bin");
        let mut buf = Vec::with_capacity(4 + labels.len() * 4);
        buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
        for &l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        fs::write(&lpath, buf).map_err(|e| McocoError::io(lpath.display().to_string(), e))?;
    }
    Ok(())
}

/// Loads a dataset directory, validating against its manifest.
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let mpath = dir.join("manifest.json");
    let mtext =
        fs::read_to_string(&mpath).map_err(|e| McocoError::io(mpath.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&mtext).map_err(|e| McocoError::MalformedFile {
            file: mpath.display().to_string(),
            reason: e.to_string(),
        })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(McocoError::FormatVersion(manifest.format_version));
    }
    if manifest.view_dims.len() != manifest.n_views {
        return Err(McocoError::MalformedFile {
            file: mpath.display().to_string(),
            reason: "view_dims length does not match n_views".into(),
        });
    }
    let mut views = Vec::with_capacity(manifest.n_views);
    for i in 0..manifest.n_views {
        let vpath = dir.join(format!("view_{}.bin", i));
        let m = read_matrix_f32(&vpath)?;
        if m.nrows() != manifest.n_samples || m.ncols() != manifest.view_dims[i] {
            return Err(McocoError::MalformedFile {
                file: vpath.display().to_string(),
                reason: format!(
                    "matrix is {}x{}, manifest declares {}x{}",
                    m.nrows(),
                    m.ncols(),
                    manifest.n_samples,
                    manifest.view_dims[i]
                ),
            });
        }
        views.push(m);
    }
    let labels = if manifest.has_labels {
        let lpath = dir.join("labels.bin");
        let fname = lpath.display().to_string();
        let bytes = fs::read(&lpath).map_err(|e| McocoError::io(fname.clone(), e))?;
        if bytes.len() < 4 {
            return Err(McocoError::MalformedFile {
                file: fname,
                reason: "truncated header".into(),
            });
        }
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        if n != manifest.n_samples || bytes.len() != 4 + n * 4 {
            return Err(McocoError::MalformedFile {
                file: fname,
                reason: format!("label count {} does not match manifest", n),
            });
        }
        Some(
            bytes[4..]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    MultiViewDataset::new(views, labels, manifest.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_samples: 300,
            n_clusters: 3,
            n_views: 2,
            latent_dim: 4,
            view_dims: vec![6, 8],
            noise_sigmas: vec![0.0, 0.0],
            cluster_separation: 10.0,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_shapes_and_labels() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(ds.n_views(), 2);
        assert_eq!(ds.n_samples(), 300);
        assert_eq!(ds.view_dims(), vec![6, 8]);
        let labels = ds.labels.as_ref().unwrap();
        let mut distinct: Vec<u32> = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct, vec![0, 1, 2]);
    }

    #[test]
    fn synthetic_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        let mut s = small_spec();
        s.n_views = 1;
        assert!(generate_synthetic(&s).is_err());
        let mut s = small_spec();
        s.noise_sigmas = vec![0.0];
        assert!(generate_synthetic(&s).is_err());
        let mut s = small_spec();
        s.n_samples = 2;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn roundtrip_identity() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn roundtrip_without_labels() {
        let mut ds = generate_synthetic(&small_spec()).unwrap();
        ds.labels = None;
        ds.k_hint = None;
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.labels.is_none());
        assert_eq!(ds, back);
    }

    #[test]
    fn load_rejects_row_mismatch() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        // Rewrite view_1.bin with one row fewer than the manifest declares.
        let truncated = ds.views[1].slice(ndarray::s![..299, ..]).to_owned();
        write_matrix_f32(&dir.path().join("view_1.bin"), &truncated).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("view_1.bin"), "{}", err);
    }

    #[test]
    fn load_rejects_non_finite() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mut v = ds.views[0].clone();
        v[[3, 2]] = f32::NAN;
        // bypass validation by writing the raw matrix
        write_matrix_f32(&dir.path().join("view_0.bin"), &v).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("view_0.bin") && msg.contains("offset"), "{}", msg);
    }

    #[test]
    fn normalize_minmax_and_constant_columns() {
        let v0 = Array2::from_shape_vec((3, 2), vec![2.0, 5.0, 4.0, 5.0, 6.0, 5.0]).unwrap();
        let v1 = Array2::from_shape_vec((3, 1), vec![1.0, 0.0, 0.5]).unwrap();
        let ds = MultiViewDataset::new(vec![v0, v1], None, None).unwrap();
        let out = normalize_views(&ds).unwrap();
        assert_eq!(
            out.views[0].column(0).to_vec(),
            vec![0.0, 0.5, 1.0],
            "min-max column"
        );
        assert_eq!(out.views[0].column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        // idempotence
        let again = normalize_views(&out).unwrap();
        for (a, b) in again.views[0].iter().zip(out.views[0].iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_preserves_labels_and_shapes() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let out = normalize_views(&ds).unwrap();
        assert_eq!(out.labels, ds.labels);
        assert_eq!(out.view_dims(), ds.view_dims());
        assert_eq!(out.n_samples(), ds.n_samples());
    }
}
