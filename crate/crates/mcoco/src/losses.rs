//! Loss terms: within-view reconstruction, contrastive semantic consistency,
//! assignment sharpening, and the multi-level KL collaboration, plus their
//! composition into the total objective.
//!
//! Every term exists twice: as a pure function on plain matrices (testable
//! against scalar-loop oracles) and as a tape builder the trainer
//! differentiates. A consistency test keeps the two in agreement.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, EPS};
use crate::error::{McocoError, Result};
use crate::model::ModelParameters;

/// Count of zero-norm columns encountered by [`column_cosine`].
static ZERO_NORM_COLUMNS: AtomicU64 = AtomicU64::new(0);

pub fn zero_norm_column_count() -> u64 {
    ZERO_NORM_COLUMNS.load(Ordering::Relaxed)
}

/// Per-term values of the total objective
/// L = L_Re + λ₁·L_Se + λ₂·L_Ml.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub semantic: f64,
    pub multilevel: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn compose(
        reconstruction: f64,
        semantic: f64,
        multilevel: f64,
        lambda1: f64,
        lambda2: f64,
        tau: f64,
    ) -> Self {
        Self {
            total: reconstruction + lambda1 * semantic + lambda2 * multilevel,
            reconstruction,
            semantic,
            multilevel,
            lambda1,
            lambda2,
            tau,
        }
    }
}

/// Σ over views and samples of the squared reconstruction error
/// ‖x − D(E(x))‖₂².
pub fn reconstruction_loss(
    params: &ModelParameters,
    batches: &[ArrayView2<f64>],
) -> Result<f64> {
    if batches.len() != params.arch.n_views() {
        return Err(McocoError::DimensionMismatch(format!(
            "{} batches for {} views",
            batches.len(),
            params.arch.n_views()
        )));
    }
    let b = batches[0].nrows();
    if batches.iter().any(|x| x.nrows() != b) {
        return Err(McocoError::DimensionMismatch(
            "batch sizes differ across views".into(),
        ));
    }
    let mut total = 0.0;
    for (v, x) in batches.iter().enumerate() {
        let z = crate::model::encode(params, v, x)?;
        let xr = crate::model::decode(params, v, &z.view())?;
        total += (&xr - x).mapv(|d| d * d).sum();
    }
    Ok(total)
}

/// Cosine similarity between two semantic column vectors; zero-norm inputs
/// yield 0 and bump a diagnostic counter.
pub fn column_cosine(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= EPS || nb <= EPS {
        ZERO_NORM_COLUMNS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>, tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(McocoError::InvalidInput("temperature must be positive".into()));
    }
    if a.dim() != b.dim() {
        return Err(McocoError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Cluster-level contrastive loss between the semantic labels of two views:
///
/// −(1/k) Σ_c log[ e^{d(S·c⁽ⁱ⁾,S·c⁽ʲ⁾)/τ} /
///   (Σ_w (e^{d(S·c⁽ⁱ⁾,S·w⁽ⁱ⁾)/τ} + e^{d(S·c⁽ⁱ⁾,S·w⁽ʲ⁾)/τ}) − e^{1/τ}) ]
///
/// where d is column cosine similarity and the subtracted e^{1/τ} removes
/// the within-view self pair.
pub fn pairwise_semantic_loss(
    s_i: &ArrayView2<f64>,
    s_j: &ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    check_pair(s_i, s_j, tau)?;
    let k = s_i.ncols();
    let mut loss = 0.0;
    for c in 0..k {
        let pos = column_cosine(&s_i.column(c), &s_j.column(c));
        let mut denom = -(1.0 / tau).exp();
        for w in 0..k {
            denom += (column_cosine(&s_i.column(c), &s_i.column(w)) / tau).exp();
            denom += (column_cosine(&s_i.column(c), &s_j.column(w)) / tau).exp();
        }
        loss -= ((pos / tau).exp() / denom.max(EPS)).max(EPS).ln();
    }
    Ok(loss / k as f64)
}

/// Mean-probability regularizer Σ_c p̄_c log p̄_c of one view's labels.
fn mean_entropy_term(s: &ArrayView2<f64>) -> f64 {
    let n = s.nrows() as f64;
    (0..s.ncols())
        .map(|c| {
            let p = s.column(c).sum() / n;
            if p <= EPS {
                0.0
            } else {
                p * p.ln()
            }
        })
        .sum()
}

/// L_Se: half-sum of all ordered pairwise contrastive losses plus the
/// per-view regularizer that discourages collapsing to one cluster.
pub fn semantic_consistency_loss(views: &[ArrayView2<f64>], tau: f64) -> Result<f64> {
    if views.len() < 2 {
        return Err(McocoError::InvalidInput("need at least 2 views".into()));
    }
    let mut loss = 0.0;
    for i in 0..views.len() {
        for j in 0..views.len() {
            if i != j {
                loss += 0.5 * pairwise_semantic_loss(&views[i], &views[j], tau)?;
            }
        }
        loss += mean_entropy_term(&views[i]);
    }
    Ok(loss)
}

/// Square-and-normalize sharpening:
/// T_ij = (A_ij² / f_j) / Σ_j′ (A_ij′² / f_j′) with f_j = Σ_i A_ij.
pub fn sharpen(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, k) = a.dim();
    let freq: Vec<f64> = (0..k).map(|j| a.column(j).sum()).collect();
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..k {
            let num = if freq[j] <= EPS {
                0.0
            } else {
                a[[i, j]] * a[[i, j]] / freq[j]
            };
            out[[i, j]] = num;
            row_sum += num;
        }
        if row_sum <= EPS {
            return Err(McocoError::DegenerateInput(format!(
                "sharpen: row {} has no mass after squaring",
                i
            )));
        }
        for j in 0..k {
            out[[i, j]] /= row_sum;
        }
    }
    Ok(out)
}

fn kl_sum(p: &ArrayView2<f64>, q: &ArrayView2<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| {
            if pi <= EPS {
                0.0
            } else {
                pi * (pi.max(EPS) / qi.max(EPS)).ln()
            }
        })
        .sum()
}

/// L_Ml: Σ_k [ Σ_c KL(P⁽ᶜ⁾ ‖ Q⁽ᵏ⁾) + KL(S′⁽ᵏ⁾ ‖ Q⁽ᵏ⁾) ]. Targets are
/// constants; `include_semantic_term` switches the S′ half off for ablation.
pub fn multilevel_loss_with<'a>(
    qs: &[ArrayView2<'a, f64>],
    ps: &[ArrayView2<'a, f64>],
    s_primes: &[ArrayView2<'a, f64>],
    include_semantic_term: bool,
) -> Result<f64> {
    if qs.len() != ps.len() || (include_semantic_term && qs.len() != s_primes.len()) {
        return Err(McocoError::DimensionMismatch(
            "view counts differ across Q, P, S'".into(),
        ));
    }
    let dim = qs[0].dim();
    for m in qs.iter().chain(ps.iter()).chain(s_primes.iter()) {
        if m.dim() != dim {
            return Err(McocoError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                m.dim(),
                dim
            )));
        }
    }
    let mut loss = 0.0;
    for (k, q) in qs.iter().enumerate() {
        for p in ps {
            loss += kl_sum(p, q);
        }
        if include_semantic_term {
            loss += kl_sum(&s_primes[k], q);
        }
    }
    Ok(loss)
}

pub fn multilevel_loss<'a>(
    qs: &[ArrayView2<'a, f64>],
    ps: &[ArrayView2<'a, f64>],
    s_primes: &[ArrayView2<'a, f64>],
) -> Result<f64> {
    multilevel_loss_with(qs, ps, s_primes, true)
}

/// Assembles the full objective from independently computed terms.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<'a>(
    params: &ModelParameters,
    batches: &[ArrayView2<'a, f64>],
    semantic: &[ArrayView2<'a, f64>],
    qs: &[ArrayView2<'a, f64>],
    ps: &[ArrayView2<'a, f64>],
    s_primes: &[ArrayView2<'a, f64>],
    lambda1: f64,
    lambda2: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    let l_re = reconstruction_loss(params, batches)?;
    let l_se = semantic_consistency_loss(semantic, tau)?;
    let l_ml = multilevel_loss(qs, ps, s_primes)?;
    Ok(LossBreakdown::compose(l_re, l_se, l_ml, lambda1, lambda2, tau))
}

// ---------------------------------------------------------------------------
// Tape builders (differentiable forms used by the trainer)
// ---------------------------------------------------------------------------

/// l(i, j) on the tape; gradients flow into both semantic label matrices.
pub fn tape_pairwise_semantic(tape: &mut Tape, s_i: Var, s_j: Var, tau: f64) -> Var {
    let k = tape.value(s_i).ncols();
    let a = tape.col_normalize(s_i);
    let b = tape.col_normalize(s_j);
    let c_ab = tape.gram_t(a, b);
    let c_aa = tape.gram_t(a, a);
    let e_ab = tape.exp_scale(c_ab, 1.0 / tau);
    let e_aa = tape.exp_scale(c_aa, 1.0 / tau);
    let rs_ab = tape.row_sum(e_ab);
    let rs_aa = tape.row_sum(e_aa);
    let denom = tape.add(rs_aa, rs_ab);
    let denom = tape.sub_const(denom, (1.0 / tau).exp());
    let num = tape.diag(e_ab);
    let ln_num = tape.log(num);
    let ln_den = tape.log(denom);
    let diff = tape.sub(ln_num, ln_den);
    let s = tape.sum(diff);
    tape.scale(s, -1.0 / k as f64)
}

/// L_Se on the tape.
pub fn tape_semantic_consistency(tape: &mut Tape, s_vars: &[Var], tau: f64) -> Var {
    let mut acc: Option<Var> = None;
    for i in 0..s_vars.len() {
        for j in 0..s_vars.len() {
            if i != j {
                let l = tape_pairwise_semantic(tape, s_vars[i], s_vars[j], tau);
                let l = tape.scale(l, 0.5);
                acc = Some(match acc {
                    Some(a) => tape.add(a, l),
                    None => l,
                });
            }
        }
        let m = tape.col_mean(s_vars[i]);
        let reg = tape.xlogx_sum(m);
        acc = Some(match acc {
            Some(a) => tape.add(a, reg),
            None => reg,
        });
    }
    acc.expect("at least one view")
}

/// L_Ml on the tape; sharpened targets enter as constants.
pub fn tape_multilevel(
    tape: &mut Tape,
    q_vars: &[Var],
    ps: &[Array2<f64>],
    s_primes: &[Array2<f64>],
    include_semantic_term: bool,
) -> Var {
    let mut acc: Option<Var> = None;
    for (k, &q) in q_vars.iter().enumerate() {
        for p in ps {
            let t = tape.kl_const(p.clone(), q);
            acc = Some(match acc {
                Some(a) => tape.add(a, t),
                None => t,
            });
        }
        if include_semantic_term {
            let t = tape.kl_const(s_primes[k].clone(), q);
            acc = Some(match acc {
                Some(a) => tape.add(a, t),
                None => t,
            });
        }
    }
    acc.expect("at least one view")
}
