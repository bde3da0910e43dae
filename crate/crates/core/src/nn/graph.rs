//! Reverse-mode tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so walking them backwards is a
//! valid topological order. Only the operations the patch network needs are
//! provided.

use ndarray::{concatenate, s, Array2, Axis};

use super::{Gradients, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    /// `x w^T + b` with `w` (out, in) and `b` (1, out).
    Linear(Var, Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    Add(Var, Var),
    /// Rows of the first argument scaled by the (n, 1) second argument.
    MulCol(Var, Var),
    /// Column-wise maximum; stores the winning row per column.
    MaxRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    SliceRows(Var),
    KernelWeights {
        theta1: Var,
        theta2: Var,
        dist: Vec<f64>,
        raw: Vec<f64>,
    },
    PlaneFeatures {
        weights: Var,
        points: Vec<[f64; 3]>,
        candidates: Vec<[f64; 3]>,
    },
    Mse(Var, Array2<f64>),
    Mae(Var, Array2<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Second moments of `points` under non-negative `weights`.
struct Moments {
    total: f64,
    mean: [f64; 3],
    /// Second moment about the origin divided by `total`.
    second: [[f64; 3]; 3],
    cov: [[f64; 3]; 3],
    trace: f64,
}

/// Keeps the plane statistics finite when every weight vanishes.
const WEIGHT_FLOOR: f64 = 1e-12;
const TRACE_FLOOR: f64 = 1e-12;
/// Softens the square root of the plane residual at zero.
const ROOT_EPS: f64 = 1e-8;

fn moments(weights: &[f64], points: &[[f64; 3]]) -> Moments {
    let total = weights.iter().sum::<f64>().max(WEIGHT_FLOOR);
    let mut mean = [0.0; 3];
    let mut second = [[0.0; 3]; 3];
    for (w, p) in weights.iter().zip(points) {
        for a in 0..3 {
            mean[a] += w * p[a];
            for b in 0..3 {
                second[a][b] += w * p[a] * p[b];
            }
        }
    }
    for a in 0..3 {
        mean[a] /= total;
        for b in 0..3 {
            second[a][b] /= total;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            cov[a][b] = second[a][b] - mean[a] * mean[b];
        }
    }
    let trace = cov[0][0] + cov[1][1] + cov[2][2];
    Moments {
        total,
        mean,
        second,
        cov,
        trace,
    }
}

fn quadratic(cov: &[[f64; 3]; 3], v: &[f64; 3]) -> f64 {
    let mut quad = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            quad += v[a] * cov[a][b] * v[b];
        }
    }
    quad
}

/// Sum that does not depend on the order of `values`, so that shuffled
/// neighbors get bit-identical weights.
pub fn order_free_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

/// Residual and offset of a weighted point set along direction `v`:
/// `sqrt(q + eps) - sqrt(eps)` with `q = v^T C v / tr C`, and `v . mean`.
/// The residual is near-linear in the angle between `v` and the plane normal.
pub fn plane_features(weights: &[f64], points: &[[f64; 3]], v: &[f64; 3]) -> (f64, f64) {
    let m = moments(weights, points);
    let q = quadratic(&m.cov, v) / m.trace.max(TRACE_FLOOR);
    let o = (0..3).map(|a| v[a] * m.mean[a]).sum();
    ((q + ROOT_EPS).sqrt() - ROOT_EPS.sqrt(), o)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A trainable leaf whose gradient lands in block `block`.
    pub fn param(&mut self, block: usize, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(block))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value = self.value(x).dot(&self.value(w).t()) + self.value(b);
        self.push(value, Op::Linear(x, w, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = vec![0usize; x.ncols()];
        let mut value = Array2::from_elem((1, x.ncols()), f64::NEG_INFINITY);
        for (i, row) in x.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > value[[0, j]] {
                    value[[0, j]] = v;
                    arg[j] = i;
                }
            }
        }
        self.push(value, Op::MaxRows(a, arg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = concatenate![Axis(1), *self.value(a), *self.value(b)];
        self.push(value, Op::ConcatCols(a, b))
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1);
        let value = row.broadcast((n, row.ncols())).unwrap().to_owned();
        self.push(value, Op::BroadcastRows(a))
    }

    /// The first `n` rows.
    pub fn slice_rows(&mut self, a: Var, n: usize) -> Var {
        let value = self.value(a).slice(s![..n, ..]).to_owned();
        self.push(value, Op::SliceRows(a))
    }

    /// `d_i = sigmoid(theta1 - theta2 * dist_i)`, returned normalized to sum
    /// to one as an (n, 1) column.
    pub fn kernel_weights(&mut self, theta1: Var, theta2: Var, dist: &[f64]) -> Var {
        let (t1, t2) = (self.scalar(theta1), self.scalar(theta2));
        let raw: Vec<f64> = dist.iter().map(|r| sigmoid(t1 - t2 * r)).collect();
        let total = order_free_sum(&raw);
        let value = Array2::from_shape_fn((raw.len(), 1), |(i, _)| raw[i] / total);
        self.push(
            value,
            Op::KernelWeights {
                theta1,
                theta2,
                dist: dist.to_vec(),
                raw,
            },
        )
    }

    /// For each candidate direction, the weighted plane residual and centroid
    /// offset of [`plane_features`] as a (candidates, 2) matrix.
    pub fn plane_features(&mut self, weights: Var, points: &[[f64; 3]], candidates: &[[f64; 3]]) -> Var {
        let w = self.value(weights).column(0).to_vec();
        let mut value = Array2::zeros((candidates.len(), 2));
        for (c, v) in candidates.iter().enumerate() {
            let (q, o) = plane_features(&w, points, v);
            value[[c, 0]] = q;
            value[[c, 1]] = o;
        }
        self.push(
            value,
            Op::PlaneFeatures {
                weights,
                points: points.to_vec(),
                candidates: candidates.to_vec(),
            },
        )
    }

    pub fn mse(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let d = self.value(pred) - &target;
        let value = Array2::from_elem((1, 1), d.mapv(|x| x * x).mean().unwrap());
        self.push(value, Op::Mse(pred, target))
    }

    pub fn mae(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let d = self.value(pred) - &target;
        let value = Array2::from_elem((1, 1), d.mapv(f64::abs).mean().unwrap());
        self.push(value, Op::Mae(pred, target))
    }

    /// Applies `net` row-wise; `first_block` is the index of its first
    /// weight block in the enclosing parameter list.
    pub fn mlp(&mut self, net: &Mlp, first_block: usize, x: Var) -> Var {
        assert!(net.skip_at().is_none(), "graph MLPs have no skip connection");
        let last = net.depth() - 1;
        let mut h = x;
        for (l, layer) in net.layers().iter().enumerate() {
            let w = self.param(first_block + 2 * l, layer.weight.clone());
            let b = self.param(first_block + 2 * l + 1, layer.bias.clone().insert_axis(Axis(0)));
            h = self.linear(h, w, b);
            if l < last {
                h = self.relu(h);
            }
        }
        h
    }

    /// Accumulates d`output`/d(param) into `grads` for every parameter leaf.
    /// `output` must be a 1x1 node.
    pub fn backward(&self, output: Var, grads: &mut Gradients) {
        assert_eq!(self.value(output).dim(), (1, 1));
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Array2::ones((1, 1)));
        fn acc(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }
        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param(block) => {
                    for (dst, src) in grads.blocks[*block].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                }
                Op::Linear(x, w, b) => {
                    acc(&mut adj, *x, g.dot(self.value(*w)));
                    acc(&mut adj, *w, g.t().dot(self.value(*x)));
                    acc(&mut adj, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut adj, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    acc(&mut adj, *a, d);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g * *s),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::MulCol(a, col) => {
                    let dc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut adj, *a, &g * self.value(*col));
                    acc(&mut adj, *col, dc);
                }
                Op::MaxRows(a, arg) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (j, &i) in arg.iter().enumerate() {
                        d[[i, j]] = g[[0, j]];
                    }
                    acc(&mut adj, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    acc(&mut adj, *a, g.slice(s![.., ..ca]).to_owned());
                    acc(&mut adj, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::BroadcastRows(a) => acc(&mut adj, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::SliceRows(a) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![..g.nrows(), ..]).assign(&g);
                    acc(&mut adj, *a, d);
                }
                Op::KernelWeights {
                    theta1,
                    theta2,
                    dist,
                    raw,
                } => {
                    let total: f64 = raw.iter().sum();
                    let w = &node.value;
                    let gw: f64 = (0..raw.len()).map(|i| g[[i, 0]] * w[[i, 0]]).sum();
                    let (mut d1, mut d2) = (0.0, 0.0);
                    for i in 0..raw.len() {
                        let d_raw = (g[[i, 0]] - gw) / total;
                        let slope = raw[i] * (1.0 - raw[i]);
                        d1 += d_raw * slope;
                        d2 -= d_raw * slope * dist[i];
                    }
                    acc(&mut adj, *theta1, Array2::from_elem((1, 1), d1));
                    acc(&mut adj, *theta2, Array2::from_elem((1, 1), d2));
                }
                Op::PlaneFeatures {
                    weights,
                    points,
                    candidates,
                } => {
                    let w = self.value(*weights).column(0).to_vec();
                    acc(&mut adj, *weights, plane_features_backward(&w, points, candidates, &g));
                }
                Op::Mse(pred, target) => {
                    let n = target.len() as f64;
                    let d = (self.value(*pred) - target) * (2.0 * g[[0, 0]] / n);
                    acc(&mut adj, *pred, d);
                }
                Op::Mae(pred, target) => {
                    let n = target.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let mut d = self.value(*pred) - target;
                    d.mapv_inplace(|x| if x == 0.0 { 0.0 } else { x.signum() * scale });
                    acc(&mut adj, *pred, d);
                }
            }
        }
    }
}

/// Gradient of `sum_c g[c,0] q_c + g[c,1] o_c` with respect to the weights.
fn plane_features_backward(
    weights: &[f64],
    points: &[[f64; 3]],
    candidates: &[[f64; 3]],
    g: &Array2<f64>,
) -> Array2<f64> {
    let m = moments(weights, points);
    let clamped = m.trace <= TRACE_FLOOR;
    let t = m.trace.max(TRACE_FLOOR);
    // sensitivities of the loss to cov (dc) and mean (dm)
    let mut dc = [[0.0; 3]; 3];
    let mut dm = [0.0; 3];
    for (c, v) in candidates.iter().enumerate() {
        let quad = quadratic(&m.cov, v);
        let root = (quad / t + ROOT_EPS).sqrt();
        let (gq, go) = (g[[c, 0]] / (2.0 * root), g[[c, 1]]);
        for a in 0..3 {
            for b in 0..3 {
                dc[a][b] += gq * v[a] * v[b] / t;
            }
            if !clamped {
                dc[a][a] -= gq * quad / (t * t);
            }
            dm[a] += go * v[a];
        }
    }
    // cov = second - mean mean^T, second = S2 / U, mean = S1 / U
    let mut d_mean = dm;
    for a in 0..3 {
        for b in 0..3 {
            d_mean[a] -= (dc[a][b] + dc[b][a]) * m.mean[b];
        }
    }
    let u = m.total;
    // d/dU of (S2/U) and (S1/U) at fixed S
    let mut d_total = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            d_total -= dc[a][b] * m.second[a][b] / u;
        }
        d_total -= d_mean[a] * m.mean[a] / u;
    }
    let below_floor = weights.iter().sum::<f64>() < WEIGHT_FLOOR;
    Array2::from_shape_fn((weights.len(), 1), |(i, _)| {
        let p = points[i];
        let mut d = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                d += dc[a][b] * p[a] * p[b] / u;
            }
            d += d_mean[a] * p[a] / u;
        }
        if below_floor {
            d
        } else {
            d + d_total
        }
    })
}
