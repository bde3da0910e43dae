//! Value and input gradient of a 3 -> 1 network in one batched pass, plus
//! parameter gradients of losses that depend on both.
//!
//! The input gradient is carried forward as three tangent channels stacked
//! under the primal rows: for a batch of `B` points every layer sees a
//! `4B x width` matrix (primal, d/dx, d/dy, d/dz). ReLU masks come from the
//! primal rows and are applied to all four blocks. Because the tangent
//! channels are an ordinary function of the weights, back-propagating a seed
//! over all four blocks yields the full gradient of a loss on `(f, grad f)`,
//! including the second-order path through the input gradient. Masks are
//! constants in that pass.

use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;

use super::{Gradients, Mlp, Parameterized};
use crate::error::{Error, Result};
use crate::pointcloud::Vec3;

/// Lower bound on the gradient norm used when normalizing it.
pub const NORM_GUARD: f64 = 1e-12;

/// Points per tape; larger batches are split and reduced in order.
const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldEval {
    pub value: f64,
    pub gradient: Vec3,
}

/// Per-point loss and its sensitivities to the field value and input gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointLoss {
    pub loss: f64,
    pub d_value: f64,
    pub d_gradient: Vec3,
}

/// Recorded forward pass of a batch in dual form.
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    /// Input matrix of every layer, `4B x fan_in`.
    inputs: Vec<Array2<f64>>,
    /// Output of the final layer, `4B x 1`.
    output: Array2<f64>,
}

impl Tape {
    pub fn record(net: &Mlp, points: &[Vec3]) -> Result<Tape> {
        if net.input_dim() != 3 || net.output_dim() != 1 {
            return Err(Error::ShapeMismatch("tape expects a 3 -> 1 network".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("network input {i}")));
        }
        let b = points.len();
        let seed = dual_input(points);
        let mut inputs = Vec::with_capacity(net.depth());
        let last = net.depth() - 1;
        let mut h = seed.clone();
        for (l, layer) in net.layers().iter().enumerate() {
            if net.skip_at() == Some(l) {
                h = concatenate![Axis(1), h, seed];
            }
            let mut z = h.dot(&layer.weight.t());
            z.slice_mut(s![..b, ..]).scaled_add(1.0, &layer.bias);
            inputs.push(h);
            if l < last {
                apply_mask(&mut z, b);
            }
            h = z;
        }
        Ok(Tape {
            batch: b,
            inputs,
            output: h,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn values(&self) -> Vec<FieldEval> {
        let b = self.batch;
        (0..b)
            .map(|i| FieldEval {
                value: self.output[[i, 0]],
                gradient: Vec3::new(
                    self.output[[b + i, 0]],
                    self.output[[2 * b + i, 0]],
                    self.output[[3 * b + i, 0]],
                ),
            })
            .collect()
    }

    /// Re-runs the primal rows from the recorded layer inputs.
    pub fn replay(&self, net: &Mlp) -> Vec<f64> {
        let b = self.batch;
        let last = net.depth() - 1;
        let input = self.inputs[last].slice(s![..b, ..]);
        let mut out = input.dot(&net.layers()[last].weight.t());
        out += &net.layers()[last].bias;
        out.column(0).to_vec()
    }

    /// Back-propagates per-point sensitivities `(dL/df, dL/dgrad)` to the
    /// parameters of `net`.
    pub fn backward(&self, net: &Mlp, seeds: &[(f64, Vec3)]) -> Gradients {
        let b = self.batch;
        assert_eq!(seeds.len(), b, "one seed per recorded point");
        let mut g = Array2::zeros((4 * b, 1));
        for (i, (dv, dg)) in seeds.iter().enumerate() {
            g[[i, 0]] = *dv;
            g[[b + i, 0]] = dg.x;
            g[[2 * b + i, 0]] = dg.y;
            g[[3 * b + i, 0]] = dg.z;
        }
        let mut grads = net.zero_gradients();
        for l in (0..net.depth()).rev() {
            let layer = &net.layers()[l];
            let input = &self.inputs[l];
            let dw = g.t().dot(input);
            for (dst, src) in grads.blocks[2 * l].iter_mut().zip(dw.iter()) {
                *dst = *src;
            }
            let db = g.slice(s![..b, ..]).sum_axis(Axis(0));
            for (dst, src) in grads.blocks[2 * l + 1].iter_mut().zip(db.iter()) {
                *dst = *src;
            }
            if l == 0 {
                break;
            }
            let prev_width = net.layers()[l - 1].output_dim();
            let mut dh = g.dot(&layer.weight.slice(s![.., ..prev_width]));
            let act = input.slice(s![..b, ..prev_width]);
            for i in 0..b {
                for j in 0..prev_width {
                    if act[[i, j]] <= 0.0 {
                        for c in 0..4 {
                            dh[[c * b + i, j]] = 0.0;
                        }
                    }
                }
            }
            g = dh;
        }
        grads
    }
}

fn dual_input(points: &[Vec3]) -> Array2<f64> {
    let b = points.len();
    let mut x = Array2::zeros((4 * b, 3));
    for (i, p) in points.iter().enumerate() {
        for k in 0..3 {
            x[[i, k]] = p[k];
            x[[(k + 1) * b + i, k]] = 1.0;
        }
    }
    x
}

fn apply_mask(z: &mut Array2<f64>, b: usize) {
    let width = z.ncols();
    for i in 0..b {
        for j in 0..width {
            if z[[i, j]] <= 0.0 {
                for c in 0..4 {
                    z[[c * b + i, j]] = 0.0;
                }
            }
        }
    }
}

impl Mlp {
    /// Gradient of the scalar output with respect to the input point.
    pub fn input_gradient(&self, x: &Vec3) -> Result<Vec3> {
        Ok(Tape::record(self, std::slice::from_ref(x))?.values()[0].gradient)
    }

    /// Value and input gradient at every point.
    pub fn eval_with_gradient(&self, points: &[Vec3]) -> Result<Vec<FieldEval>> {
        let chunks: Vec<Result<Vec<FieldEval>>> = points
            .par_chunks(CHUNK)
            .map(|c| Ok(Tape::record(self, c)?.values()))
            .collect();
        let mut out = Vec::with_capacity(points.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Sums `loss(i, eval_i)` over the points and returns the total with its
/// parameter gradient. Chunks are evaluated in parallel and reduced in index
/// order, so the result does not depend on the thread count.
pub fn loss_gradients<F>(net: &Mlp, points: &[Vec3], loss: F) -> Result<(f64, Gradients)>
where
    F: Fn(usize, &FieldEval) -> PointLoss + Sync,
{
    let parts: Vec<Result<(f64, Gradients)>> = points
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let tape = Tape::record(net, chunk)?;
            let mut total = 0.0;
            let seeds: Vec<(f64, Vec3)> = tape
                .values()
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    if !e.value.is_finite() || !e.gradient.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(format!("network output at point {}", c * CHUNK + i)));
                    }
                    let pl = loss(c * CHUNK + i, e);
                    total += pl.loss;
                    Ok((pl.d_value, pl.d_gradient))
                })
                .collect::<Result<_>>()?;
            Ok((total, tape.backward(net, &seeds)))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = net.zero_gradients();
    for p in parts {
        let (l, g) = p?;
        total += l;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// `g / max(|g|, NORM_GUARD)` together with the divisor used.
pub fn normalize_guarded(g: &Vec3) -> (Vec3, f64) {
    let n = g.norm().max(NORM_GUARD);
    (g / n, n)
}

/// Pulls a sensitivity on the normalized vector back to the raw vector.
/// Below the guard the map is `g / NORM_GUARD`, whose Jacobian is diagonal.
pub fn normalize_backward(g: &Vec3, d_unit: &Vec3) -> Vec3 {
    let n = g.norm();
    if n < NORM_GUARD {
        return d_unit / NORM_GUARD;
    }
    let v = g / n;
    (d_unit - v * v.dot(d_unit)) / n
}
