//! Reverse-mode automatic differentiation on dense matrices.
//!
//! A [`Tape`] records a sequence of matrix operations; [`Tape::backward`]
//! propagates gradients from a scalar output back to every leaf. The op set
//! is exactly what the networks and loss terms need, no more. All values are
//! `f64` so gradient checks against central finite differences are meaningful.

use ndarray::{Array2, Axis};

/// Floor for logarithm arguments and KL denominators.
pub const EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a · b
    MatMul(usize, usize),
    /// x + bias (bias is 1 × n, broadcast over rows)
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Relu(usize),
    /// softmax over each row
    RowSoftmax(usize),
    /// Σ aᵢⱼ² as 1×1
    SumSq(usize),
    /// Σ aᵢⱼ as 1×1
    Sum(usize),
    /// c · a
    Scale(usize, f64),
    /// a − c elementwise; the constant is baked into the value at build time
    /// and does not affect the gradient, so only the operand index is kept.
    SubConst(usize),
    /// ln(max(a, EPS)) elementwise
    Log(usize),
    /// e^(a / τ) elementwise
    ExpScale(usize, f64),
    /// each column scaled to unit Euclidean norm; stores the original norms
    ColNormalize(usize, Vec<f64>),
    /// aᵀ · b
    GramT(usize, usize),
    /// row sums as n×1
    RowSum(usize),
    /// column means as 1×n
    ColMean(usize),
    /// diagonal of a square matrix as k×1
    Diag(usize),
    /// Σ a ln a with 0·ln 0 := 0, as 1×1
    XLogXSum(usize),
    /// Student's-t soft assignment of rows of z against centroid rows; caches
    /// the unnormalized kernel u and row sums r
    StudentT {
        z: usize,
        mu: usize,
        u: Array2<f64>,
        r: Vec<f64>,
    },
    /// Σ p ln(p/q) with constant target p, as 1×1
    KlConst(Array2<f64>, usize),
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A Wengert list of matrix operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node {
            value,
            grad,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].grad
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[[0, 0]]
    }

    fn track(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let t = self.track(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), t)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let v = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        let t = self.track(&[x.0, bias.0]);
        self.push(v, Op::AddBias(x.0, bias.0), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let t = self.track(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let t = self.track(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let t = self.track(&[a.0]);
        self.push(v, Op::Relu(a.0), t)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let t = self.track(&[a.0]);
        self.push(v, Op::RowSoftmax(a.0), t)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        let t = self.track(&[a.0]);
        self.push(Array2::from_elem((1, 1), s), Op::SumSq(a.0), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let t = self.track(&[a.0]);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a.0), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        let t = self.track(&[a.0]);
        self.push(v, Op::Scale(a.0, c), t)
    }

    pub fn sub_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x - c);
        let t = self.track(&[a.0]);
        self.push(v, Op::SubConst(a.0), t)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(EPS).ln());
        let t = self.track(&[a.0]);
        self.push(v, Op::Log(a.0), t)
    }

    pub fn exp_scale(&mut self, a: Var, inv_temp: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| (x * inv_temp).exp());
        let t = self.track(&[a.0]);
        self.push(v, Op::ExpScale(a.0, inv_temp), t)
    }

    pub fn col_normalize(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let norms: Vec<f64> = x
            .columns()
            .into_iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS))
            .collect();
        let mut v = x.clone();
        for (j, mut col) in v.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|x| x / norms[j]);
        }
        let t = self.track(&[a.0]);
        self.push(v, Op::ColNormalize(a.0, norms), t)
    }

    pub fn gram_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.t().dot(&self.nodes[b.0].value);
        let t = self.track(&[a.0, b.0]);
        self.push(v, Op::GramT(a.0, b.0), t)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum_axis(Axis(1));
        let n = s.len();
        let t = self.track(&[a.0]);
        self.push(s.into_shape_with_order((n, 1)).unwrap(), Op::RowSum(a.0), t)
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean_axis(Axis(0)).unwrap();
        let n = m.len();
        let t = self.track(&[a.0]);
        self.push(m.into_shape_with_order((1, n)).unwrap(), Op::ColMean(a.0), t)
    }

    pub fn diag(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let k = x.nrows();
        let v = Array2::from_shape_fn((k, 1), |(i, _)| x[[i, i]]);
        let t = self.track(&[a.0]);
        self.push(v, Op::Diag(a.0), t)
    }

    pub fn xlogx_sum(&mut self, a: Var) -> Var {
        let s: f64 = self
            .nodes[a.0]
            .value
            .iter()
            .map(|&x| if x <= EPS { 0.0 } else { x * x.ln() })
            .sum();
        let t = self.track(&[a.0]);
        self.push(Array2::from_elem((1, 1), s), Op::XLogXSum(a.0), t)
    }

    /// Q_ij = (1 + ‖z_i − μ_j‖²)⁻¹ normalized over j.
    pub fn student_t(&mut self, z: Var, mu: Var) -> Var {
        let zv = &self.nodes[z.0].value;
        let mv = &self.nodes[mu.0].value;
        let (n, k) = (zv.nrows(), mv.nrows());
        let mut u = Array2::zeros((n, k));
        for i in 0..n {
            for j in 0..k {
                let d: f64 = zv
                    .row(i)
                    .iter()
                    .zip(mv.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                u[[i, j]] = 1.0 / (1.0 + d);
            }
        }
        let r: Vec<f64> = u.rows().into_iter().map(|row| row.sum()).collect();
        let mut q = u.clone();
        for (i, mut row) in q.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| x / r[i]);
        }
        let t = self.track(&[z.0, mu.0]);
        self.push(
            q,
            Op::StudentT {
                z: z.0,
                mu: mu.0,
                u,
                r,
            },
            t,
        )
    }

    /// KL(p ‖ q) with a constant target p, summed over all entries.
    pub fn kl_const(&mut self, p: Array2<f64>, q: Var) -> Var {
        let qv = &self.nodes[q.0].value;
        assert_eq!(p.raw_dim(), qv.raw_dim(), "KL shape mismatch");
        let s: f64 = p
            .iter()
            .zip(qv.iter())
            .map(|(&pi, &qi)| {
                if pi <= EPS {
                    0.0
                } else {
                    pi * (pi.max(EPS) / qi.max(EPS)).ln()
                }
            })
            .sum();
        let t = self.track(&[q.0]);
        self.push(Array2::from_elem((1, 1), s), Op::KlConst(p, q.0), t)
    }

    /// Propagate gradients from a 1×1 output back to every leaf.
    pub fn backward(&mut self, out: Var) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        self.nodes[out.0].grad[[0, 0]] = 1.0;
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = self.nodes[idx].grad.clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&g);
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::AddBias(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    self.nodes[x].grad += &g;
                    let gb = g.sum_axis(Axis(0));
                    let m = gb.len();
                    self.nodes[bias].grad += &gb.into_shape_with_order((1, m)).unwrap();
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.nodes[a].grad += &g;
                    self.nodes[b].grad += &g;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.nodes[a].grad += &g;
                    self.nodes[b].grad -= &g;
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.nodes[a].grad += &(&g * &mask);
                }
                Op::RowSoftmax(a) => {
                    let a = *a;
                    let y = self.nodes[idx].value.clone();
                    let mut da = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = y.row(i).iter().zip(g.row(i).iter()).map(|(a, b)| a * b).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    self.nodes[a].grad += &da;
                }
                Op::SumSq(a) => {
                    let a = *a;
                    let c = 2.0 * g[[0, 0]];
                    let da = self.nodes[a].value.mapv(|x| c * x);
                    self.nodes[a].grad += &da;
                }
                Op::Sum(a) => {
                    let a = *a;
                    let c = g[[0, 0]];
                    let da = Array2::from_elem(self.nodes[a].value.raw_dim(), c);
                    self.nodes[a].grad += &da;
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.nodes[a].grad += &g.mapv(|x| c * x);
                }
                Op::SubConst(a) => {
                    let a = *a;
                    self.nodes[a].grad += &g;
                }
                Op::Log(a) => {
                    let a = *a;
                    let da = &g / &self.nodes[a].value.mapv(|x| x.max(EPS));
                    self.nodes[a].grad += &da;
                }
                Op::ExpScale(a, inv_temp) => {
                    let (a, it) = (*a, *inv_temp);
                    let da = &g * &self.nodes[idx].value.mapv(|x| x * it);
                    self.nodes[a].grad += &da;
                }
                Op::ColNormalize(a, norms) => {
                    let a = *a;
                    let norms = norms.clone();
                    let y = self.nodes[idx].value.clone();
                    let mut da = Array2::zeros(y.raw_dim());
                    for j in 0..y.ncols() {
                        let yc = y.column(j);
                        let gc = g.column(j);
                        let dot: f64 = yc.iter().zip(gc.iter()).map(|(a, b)| a * b).sum();
                        for i in 0..y.nrows() {
                            da[[i, j]] = (gc[i] - dot * yc[i]) / norms[j];
                        }
                    }
                    self.nodes[a].grad += &da;
                }
                Op::GramT(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = self.nodes[b].value.dot(&g.t());
                    let db = self.nodes[a].value.dot(&g);
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::RowSum(a) => {
                    let a = *a;
                    let (n, m) = self.nodes[a].value.dim();
                    let da = Array2::from_shape_fn((n, m), |(i, _)| g[[i, 0]]);
                    self.nodes[a].grad += &da;
                }
                Op::ColMean(a) => {
                    let a = *a;
                    let (n, m) = self.nodes[a].value.dim();
                    let da = Array2::from_shape_fn((n, m), |(_, j)| g[[0, j]] / n as f64);
                    self.nodes[a].grad += &da;
                }
                Op::Diag(a) => {
                    let a = *a;
                    let k = g.nrows();
                    let mut da = Array2::zeros(self.nodes[a].value.raw_dim());
                    for i in 0..k {
                        da[[i, i]] = g[[i, 0]];
                    }
                    self.nodes[a].grad += &da;
                }
                Op::XLogXSum(a) => {
                    let a = *a;
                    let c = g[[0, 0]];
                    let da = self.nodes[a].value.mapv(|x| {
                        if x <= EPS {
                            0.0
                        } else {
                            c * (x.ln() + 1.0)
                        }
                    });
                    self.nodes[a].grad += &da;
                }
                Op::StudentT { z, mu, u, r } => {
                    let (z, mu) = (*z, *mu);
                    let u = u.clone();
                    let r = r.clone();
                    let q = &self.nodes[idx].value;
                    let (n, k) = q.dim();
                    // dL/du_il = (g_il − Σ_j g_ij q_ij) / r_i ; h = −u² dL/du
                    let mut h = Array2::zeros((n, k));
                    for i in 0..n {
                        let dot: f64 =
                            g.row(i).iter().zip(q.row(i).iter()).map(|(a, b)| a * b).sum();
                        for l in 0..k {
                            let du = (g[[i, l]] - dot) / r[i];
                            h[[i, l]] = -u[[i, l]] * u[[i, l]] * du;
                        }
                    }
                    let zv = self.nodes[z].value.clone();
                    let mv = self.nodes[mu].value.clone();
                    // dZ_i = 2 Σ_l h_il (z_i − μ_l), dμ_l = −2 Σ_i h_il (z_i − μ_l)
                    let hrow = h.sum_axis(Axis(1));
                    let hcol = h.sum_axis(Axis(0));
                    let mut dz = &zv * &hrow.insert_axis(Axis(1));
                    dz -= &h.dot(&mv);
                    dz.mapv_inplace(|x| 2.0 * x);
                    let mut dmu = &mv * &hcol.insert_axis(Axis(1));
                    dmu -= &h.t().dot(&zv);
                    dmu.mapv_inplace(|x| 2.0 * x);
                    self.nodes[z].grad += &dz;
                    self.nodes[mu].grad += &dmu;
                }
                Op::KlConst(p, q) => {
                    let q = *q;
                    let c = g[[0, 0]];
                    let da = ndarray::Zip::from(p)
                        .and(&self.nodes[q].value)
                        .map_collect(|&pi, &qi| {
                            if pi <= EPS {
                                0.0
                            } else {
                                -c * pi / qi.max(EPS)
                            }
                        });
                    self.nodes[q].grad += &da;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar-valued builder wrt one leaf.
    fn fd_check<F>(leaf_value: Array2<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_value.clone());
        let out = build(&mut tape, leaf);
        tape.backward(out);
        let analytic = tape.grad(leaf).clone();

        let h = 1e-6;
        let mut fd = Array2::zeros(leaf_value.raw_dim());
        for i in 0..leaf_value.nrows() {
            for j in 0..leaf_value.ncols() {
                let mut plus = leaf_value.clone();
                plus[[i, j]] += h;
                let mut minus = leaf_value.clone();
                minus[[i, j]] -= h;
                let mut tp = Tape::new();
                let lp = tp.leaf(plus);
                let op = build(&mut tp, lp);
                let mut tm = Tape::new();
                let lm = tm.leaf(minus);
                let om = build(&mut tm, lm);
                fd[[i, j]] = (tp.scalar(op) - tm.scalar(om)) / (2.0 * h);
            }
        }
        let num = (&analytic - &fd).mapv(|x| x * x).sum().sqrt();
        let den = fd.mapv(|x| x * x).sum().sqrt().max(1e-8);
        assert!(
            num / den < tol,
            "grad mismatch: rel err {}\nanalytic {:?}\nfd {:?}",
            num / den,
            analytic,
            fd
        );
    }

    #[test]
    fn matmul_and_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 3, 4);
        let x = rand_mat(&mut rng, 5, 3);
        fd_check(w, |t, leaf| {
            let xc = t.constant(x.clone());
            let y = t.matmul(xc, leaf);
            t.sum_sq(y)
        }, 1e-6);

        let b = rand_mat(&mut rng, 1, 4);
        let w2 = rand_mat(&mut rng, 3, 4);
        fd_check(b, |t, leaf| {
            let xc = t.constant(x.clone());
            let wc = t.constant(w2.clone());
            let y = t.matmul(xc, wc);
            let y = t.add_bias(y, leaf);
            let y = t.relu(y);
            t.sum_sq(y)
        }, 1e-5);
    }

    #[test]
    fn softmax_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 4, 3);
        let target = rand_mat(&mut rng, 4, 3).mapv(f64::abs);
        fd_check(x, |t, leaf| {
            let s = t.row_softmax(leaf);
            t.kl_const(target.clone(), s)
        }, 1e-6);
    }

    #[test]
    fn student_t_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_mat(&mut rng, 6, 3);
        let mu = rand_mat(&mut rng, 4, 3);
        let p = {
            let mut p = rand_mat(&mut rng, 6, 4).mapv(f64::abs);
            for mut row in p.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            p
        };
        let mu2 = mu.clone();
        let p2 = p.clone();
        fd_check(z.clone(), move |t, leaf| {
            let m = t.constant(mu2.clone());
            let q = t.student_t(leaf, m);
            t.kl_const(p2.clone(), q)
        }, 1e-6);
        fd_check(mu, move |t, leaf| {
            let zc = t.constant(z.clone());
            let q = t.student_t(zc, leaf);
            t.kl_const(p.clone(), q)
        }, 1e-6);
    }

    #[test]
    fn contrastive_building_blocks_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = rand_mat(&mut rng, 6, 3).mapv(|x| x.abs() + 0.1);
        let other = rand_mat(&mut rng, 6, 3).mapv(|x| x.abs() + 0.1);
        fd_check(s, |t, leaf| {
            let a = t.col_normalize(leaf);
            let bc = t.constant(other.clone());
            let b = t.col_normalize(bc);
            let cab = t.gram_t(a, b);
            let caa = t.gram_t(a, a);
            let eab = t.exp_scale(cab, 2.0);
            let eaa = t.exp_scale(caa, 2.0);
            let rs1 = t.row_sum(eab);
            let rs2 = t.row_sum(eaa);
            let denom = t.add(rs1, rs2);
            let denom = t.sub_const(denom, (2.0f64).exp());
            let num = t.diag(eab);
            let ln = t.log(num);
            let ld = t.log(denom);
            let diff = t.sub(ln, ld);
            let s = t.sum(diff);
            t.scale(s, -1.0 / 3.0)
        }, 1e-6);
    }

    #[test]
    fn colmean_xlogx_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = rand_mat(&mut rng, 5, 3).mapv(|x| x.abs() + 0.05);
        fd_check(s, |t, leaf| {
            let m = t.col_mean(leaf);
            t.xlogx_sum(m)
        }, 1e-6);
    }

    #[test]
    fn scalar_accessor() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let s = t.sum(a);
        assert_eq!(t.scalar(s), 10.0);
    }
}
