//! Per-view encoder/decoder networks, the shared semantic generator, cluster
//! centroids, and the forward computations that produce latent codes, semantic
//! labels, and Student's-t soft assignments.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{McocoError, Result};
use crate::kmeans::{kmeans, KMeansConfig};

/// Layer widths for every network in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub view_dims: Vec<usize>,
    /// Hidden widths of each encoder (decoders are mirrored).
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub n_clusters: usize,
    /// Hidden widths of the semantic generator.
    pub generator_hidden: Vec<usize>,
}

impl Architecture {
    /// Encoder widths D_i–500–500–2000–D_Z with a D_Z–256–k generator.
    pub fn with_defaults(view_dims: Vec<usize>, latent_dim: usize, n_clusters: usize) -> Self {
        Self {
            view_dims,
            encoder_hidden: vec![500, 500, 2000],
            latent_dim,
            n_clusters,
            generator_hidden: vec![256],
        }
    }

    pub fn n_views(&self) -> usize {
        self.view_dims.len()
    }

    fn encoder_widths(&self, view: usize) -> Vec<usize> {
        let mut w = vec![self.view_dims[view]];
        w.extend_from_slice(&self.encoder_hidden);
        w.push(self.latent_dim);
        w
    }

    fn decoder_widths(&self, view: usize) -> Vec<usize> {
        let mut w = self.encoder_widths(view);
        w.reverse();
        w
    }

    fn generator_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend_from_slice(&self.generator_hidden);
        w.push(self.n_clusters);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Linear,
    Softmax,
}

/// Fully connected network with ReLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    /// 1 × width rows, broadcast over the batch.
    pub biases: Vec<Array2<f64>>,
    pub output: OutputActivation,
}

impl Mlp {
    /// Fan-in scaled uniform weights, zero biases.
    fn init(widths: &[usize], output: OutputActivation, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.gen_range(-bound..bound)
            }));
            biases.push(Array2::zeros((1, fan_out)));
        }
        Self {
            weights,
            biases,
            output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    /// Registers every parameter tensor as a tape leaf (w0, b0, w1, b1, ...).
    pub fn tape_params(&self, tape: &mut Tape) -> Vec<Var> {
        let mut vars = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            vars.push(tape.leaf(w.clone()));
            vars.push(tape.leaf(b.clone()));
        }
        vars
    }

    /// Forward pass through previously registered parameter leaves.
    pub fn tape_forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let n_layers = self.weights.len();
        let mut h = x;
        for l in 0..n_layers {
            let y = tape.matmul(h, params[2 * l]);
            let y = tape.add_bias(y, params[2 * l + 1]);
            h = if l + 1 < n_layers {
                tape.relu(y)
            } else {
                match self.output {
                    OutputActivation::Linear => y,
                    OutputActivation::Softmax => tape.row_softmax(y),
                }
            };
        }
        h
    }

    /// Plain forward pass on owned parameters.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_owned());
        let params = self.tape_params(&mut tape);
        let out = self.tape_forward(&mut tape, &params, xv);
        tape.value(out).clone()
    }

    /// Parameter tensors in the same order as [`Mlp::tape_params`].
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// Every learnable network in the model: per-view encoders and decoders plus
/// one semantic generator shared by all views.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub encoders: Vec<Mlp>,
    pub decoders: Vec<Mlp>,
    pub generator: Mlp,
    pub arch: Architecture,
}

impl ModelParameters {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = (0..arch.n_views())
            .map(|v| Mlp::init(&arch.encoder_widths(v), OutputActivation::Linear, &mut rng))
            .collect();
        let decoders = (0..arch.n_views())
            .map(|v| Mlp::init(&arch.decoder_widths(v), OutputActivation::Linear, &mut rng))
            .collect();
        let generator = Mlp::init(&arch.generator_widths(), OutputActivation::Softmax, &mut rng);
        Self {
            encoders,
            decoders,
            generator,
            arch: arch.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .chain(std::iter::once(&self.generator))
            .flat_map(|m| m.tensors())
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Per-view learnable cluster centroids, each k × D_Z.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub per_view: Vec<Array2<f64>>,
}

/// Role of an [`AssignmentMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentRole {
    /// Soft cluster assignment.
    Q,
    /// Sharpened assignment target.
    P,
    /// Semantic labels.
    S,
    /// Sharpened semantic target.
    SPrime,
}

/// Row-stochastic N × k matrix tagged with its role and view.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub values: Array2<f64>,
    pub role: AssignmentRole,
    pub view: usize,
}

impl AssignmentMatrix {
    pub fn new(values: Array2<f64>, role: AssignmentRole, view: usize) -> Result<Self> {
        for (i, row) in values.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(McocoError::InvalidInput(format!(
                    "row {} sums to {}, not 1",
                    i, sum
                )));
            }
            if row.iter().any(|&x| !(0.0..=1.0 + 1e-9).contains(&x)) {
                return Err(McocoError::InvalidInput(format!(
                    "row {} has entries outside [0, 1]",
                    i
                )));
            }
        }
        Ok(Self { values, role, view })
    }
}

fn check_cols(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(McocoError::DimensionMismatch(format!(
            "{}: got {} columns, expected {}",
            name, got, want
        )));
    }
    Ok(())
}

/// Maps a batch of view samples into the D_Z-dimensional feature space.
pub fn encode(params: &ModelParameters, view: usize, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let enc = params
        .encoders
        .get(view)
        .ok_or_else(|| McocoError::InvalidInput(format!("no view {}", view)))?;
    check_cols("encode input", x.ncols(), enc.in_dim())?;
    Ok(enc.forward(x))
}

/// Reconstructs view samples from latent codes.
pub fn decode(params: &ModelParameters, view: usize, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let dec = params
        .decoders
        .get(view)
        .ok_or_else(|| McocoError::InvalidInput(format!("no view {}", view)))?;
    check_cols("decode input", z.ncols(), dec.in_dim())?;
    Ok(dec.forward(z))
}

/// Semantic labels from the shared generator; row-stochastic [B × k].
pub fn semantic_labels(params: &ModelParameters, z: &ArrayView2<f64>) -> Result<AssignmentMatrix> {
    check_cols("semantic_labels input", z.ncols(), params.generator.in_dim())?;
    let s = params.generator.forward(z);
    Ok(AssignmentMatrix {
        values: s,
        role: AssignmentRole::S,
        view: 0,
    })
}

/// Student's-t soft assignment of latent rows against centroid rows:
/// Q_ij = (1 + ‖z_i − μ_j‖²)⁻¹ / Σ_j′ (1 + ‖z_i − μ_j′‖²)⁻¹.
pub fn soft_assign(z: &ArrayView2<f64>, centroids: &ArrayView2<f64>) -> Result<Array2<f64>> {
    check_cols("soft_assign", z.ncols(), centroids.ncols())?;
    if z.iter().any(|x| !x.is_finite()) || centroids.iter().any(|x| !x.is_finite()) {
        return Err(McocoError::InvalidInput(
            "non-finite value in soft_assign input".into(),
        ));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.to_owned());
    let mv = tape.constant(centroids.to_owned());
    let q = tape.student_t(zv, mv);
    Ok(tape.value(q).clone())
}

fn nearest_centroid_labels(z: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|row| {
            centroids
                .rows()
                .into_iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = row.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = row.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0
        })
        .collect()
}

/// Reorders every view's centroid rows so that cluster index j means the
/// same group of samples in all views. Each view is matched against view 0
/// by maximum assignment overlap (Hungarian matching on the contingency
/// table). Without this, cross-view consistency targets would mix clusters
/// that merely happen to share an index.
fn align_centroid_indices(latents: &[Array2<f64>], per_view: &mut [Array2<f64>]) {
    let k = per_view[0].nrows();
    let reference = nearest_centroid_labels(&latents[0], &per_view[0]);
    for v in 1..per_view.len() {
        let labels = nearest_centroid_labels(&latents[v], &per_view[v]);
        let overlap = pathfinding::matrix::Matrix::from_fn(k, k, |(a, b)| {
            reference
                .iter()
                .zip(&labels)
                .filter(|&(&r, &l)| r == a && l == b)
                .count() as i64
        });
        let (_, assignment) = pathfinding::kuhn_munkres::kuhn_munkres(&overlap);
        // assignment[a] = the view-v cluster matching reference cluster a
        let old = per_view[v].clone();
        for (a, &b) in assignment.iter().enumerate() {
            per_view[v].row_mut(a).assign(&old.row(b));
        }
    }
}

/// Initializes one centroid set per view by k-means on that view's latents,
/// then aligns cluster indices across views.
pub fn init_centroids(
    latents: &[Array2<f64>],
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<CentroidSet> {
    let mut per_view = Vec::with_capacity(latents.len());
    for (v, z) in latents.iter().enumerate() {
        let (centroids, _, _) = kmeans(&z.view(), k, cfg, seed.wrapping_add(v as u64))?;
        per_view.push(centroids);
    }
    align_centroid_indices(latents, &mut per_view);
    Ok(CentroidSet { per_view })
}
