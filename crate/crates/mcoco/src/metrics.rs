//! Final label fusion and clustering evaluation: unsupervised accuracy with
//! optimal cluster-to-class matching, normalized mutual information, Rand
//! index, and pair-counting F-score.

use ndarray::{Array2, ArrayView2};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{McocoError, Result};

/// Fused labels and per-view argmax labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub fused_labels: Vec<u32>,
    pub per_view_labels: Vec<Vec<u32>>,
    pub mean_assignment: Array2<f64>,
}

/// The four evaluation measures, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub rand_index: f64,
    pub fscore: f64,
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, &x) in row.iter().enumerate() {
        // ties break to the lowest index
        if x > best.1 {
            best = (j, x);
        }
    }
    best.0 as u32
}

/// Fuses per-view soft assignments by averaging and taking the row argmax.
pub fn final_assignment(qs: &[ArrayView2<f64>]) -> Result<ClusteringResult> {
    if qs.is_empty() {
        return Err(McocoError::InvalidInput("no views".into()));
    }
    let dim = qs[0].dim();
    for q in qs {
        if q.dim() != dim {
            return Err(McocoError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                q.dim(),
                dim
            )));
        }
    }
    let mut mean = Array2::<f64>::zeros(dim);
    for q in qs {
        mean += q;
    }
    mean.mapv_inplace(|x| x / qs.len() as f64);
    let fused_labels = mean.rows().into_iter().map(argmax_row).collect();
    let per_view_labels = qs
        .iter()
        .map(|q| q.rows().into_iter().map(argmax_row).collect())
        .collect();
    Ok(ClusteringResult {
        fused_labels,
        per_view_labels,
        mean_assignment: mean,
    })
}

fn contingency(pred: &[u32], truth: &[u32]) -> (Vec<Vec<usize>>, usize, usize) {
    let kp = pred.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let kt = truth.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut c = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        c[p as usize][t as usize] += 1;
    }
    (c, kp, kt)
}

fn check_labels(pred: &[u32], truth: &[u32], min_n: usize) -> Result<()> {
    if pred.is_empty() || truth.is_empty() {
        return Err(McocoError::InvalidInput("empty label vector".into()));
    }
    if pred.len() != truth.len() {
        return Err(McocoError::DimensionMismatch(format!(
            "pred has {} labels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < min_n {
        return Err(McocoError::InvalidInput(format!(
            "need at least {} samples",
            min_n
        )));
    }
    Ok(())
}

/// Unsupervised clustering accuracy: best one-to-one matching of predicted
/// clusters to classes, found on the zero-padded contingency matrix.
pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    check_labels(pred, truth, 1)?;
    let (c, kp, kt) = contingency(pred, truth);
    let side = kp.max(kt);
    let weights = Matrix::from_fn(side, side, |(i, j)| {
        if i < kp && j < kt {
            c[i][j] as i64
        } else {
            0
        }
    });
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI with geometric-mean normalization:
/// I(pred; true) / sqrt(H(pred) · H(true)).
pub fn nmi(pred: &[u32], truth: &[u32]) -> Result<f64> {
    nmi_with(pred, truth, NmiNorm::Geometric)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmiNorm {
    Geometric,
    Arithmetic,
}

pub fn nmi_with(pred: &[u32], truth: &[u32], norm: NmiNorm) -> Result<f64> {
    check_labels(pred, truth, 1)?;
    let n = pred.len() as f64;
    let (c, kp, kt) = contingency(pred, truth);
    let a: Vec<usize> = (0..kp).map(|i| c[i].iter().sum()).collect();
    let b: Vec<usize> = (0..kt).map(|j| (0..kp).map(|i| c[i][j]).sum()).collect();
    let hp = entropy(&a, n);
    let ht = entropy(&b, n);
    if hp == 0.0 || ht == 0.0 {
        // both partitions trivial and identical → 1; otherwise → 0
        return Ok(if hp == 0.0 && ht == 0.0 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for i in 0..kp {
        for j in 0..kt {
            if c[i][j] > 0 {
                let pij = c[i][j] as f64 / n;
                mi += pij * (pij * n * n / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    let denom = match norm {
        NmiNorm::Geometric => (hp * ht).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (hp + ht),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn choose2(x: usize) -> u64 {
    (x as u64) * (x.saturating_sub(1) as u64) / 2
}

fn pair_counts(pred: &[u32], truth: &[u32]) -> (u64, u64, u64, u64) {
    let n = pred.len();
    let (c, kp, kt) = contingency(pred, truth);
    let tp: u64 = c.iter().flatten().map(|&x| choose2(x)).sum();
    let pred_same: u64 = (0..kp).map(|i| choose2(c[i].iter().sum())).sum();
    let true_same: u64 = (0..kt)
        .map(|j| choose2((0..kp).map(|i| c[i][j]).sum()))
        .sum();
    let fp = pred_same - tp;
    let fn_ = true_same - tp;
    let tn = choose2(n) - tp - fp - fn_;
    (tp, fp, fn_, tn)
}

/// Fraction of sample pairs on which the two partitions agree.
pub fn rand_index(pred: &[u32], truth: &[u32]) -> Result<f64> {
    check_labels(pred, truth, 2)?;
    let (tp, fp, fn_, tn) = pair_counts(pred, truth);
    Ok((tp + tn) as f64 / (tp + fp + fn_ + tn) as f64)
}

/// Pair-counting F-score: harmonic mean of precision and recall over
/// same-cluster pairs.
pub fn fscore(pred: &[u32], truth: &[u32]) -> Result<f64> {
    check_labels(pred, truth, 2)?;
    let (tp, fp, fn_, _) = pair_counts(pred, truth);
    if tp == 0 {
        // no agreeing same-cluster pairs: perfect only if neither side has any
        return Ok(if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 });
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * p * r / (p + r))
}

/// All four measures at once.
pub fn report(pred: &[u32], truth: &[u32]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        acc: accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        rand_index: rand_index(pred, truth)?,
        fscore: fscore(pred, truth)?,
    })
}
