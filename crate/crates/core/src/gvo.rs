//! Patch network that scores candidate normals and refines a coarse field.
//!
//! Each point is described by its `m` nearest neighbors, centered on the
//! point and scaled to the unit ball. A stack of kernel layers pools
//! distance-weighted neighbor features while halving the neighbor count. Two
//! heads sit on top: a per-neighbor inlier score and, for every candidate
//! direction, the predicted angle to the true normal. Refinement samples
//! candidates around the coarse vector and keeps the one with the smallest
//! predicted angle.

use std::f64::consts::PI;
use std::fmt;
use std::time::Instant;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ngl::{NormalField, Stage};
use crate::nn::graph::{order_free_sum, Graph, Var};
use crate::nn::{Adam, AdamConfig, Checkpointable, Gradients, Mlp, Parameterized};
use crate::pointcloud::synth::random_unit;
use crate::pointcloud::{PointCloud, SpatialIndex, Vec3};

/// Lower bound of the inlier bandwidth.
pub const RHO_FLOOR: f64 = 0.05 * 0.05;

/// Neighborhood of one point, centered on it and scaled so the farthest
/// neighbor has norm 1. Neighbors are ordered by distance.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborPatch {
    pub center: usize,
    pub indices: Vec<usize>,
    pub coords: Vec<Vec3>,
    /// Scaled distance of each neighbor to the center.
    pub distances: Vec<f64>,
    /// Original distance of the farthest neighbor.
    pub radius: f64,
}

impl NeighborPatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn coord_matrix(&self, rows: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, 3), |(i, k)| self.coords[i][k])
    }

    fn coord_rows(&self, rows: usize) -> Vec<[f64; 3]> {
        self.coords[..rows].iter().map(|c| [c.x, c.y, c.z]).collect()
    }
}

/// The `m` nearest neighbors of point `i`, including the point itself.
pub fn build_patch(cloud: &PointCloud, index: &SpatialIndex, i: usize, m: usize) -> Result<NeighborPatch> {
    if cloud.len() < 2 {
        return Err(Error::InvalidInput("a patch needs at least two points".into()));
    }
    if i >= cloud.len() {
        return Err(Error::InvalidInput(format!("point {i} out of range")));
    }
    if m == 0 {
        return Err(Error::InvalidInput("patch size must be >= 1".into()));
    }
    if m > cloud.len() {
        warn!("patch size {m} exceeds cloud size {}; using every point", cloud.len());
    }
    let center = cloud.points()[i];
    let neighbors = index.knn(&center, m);
    let radius = neighbors.last().map_or(0.0, |n| n.distance);
    if !(radius > 0.0) {
        return Err(Error::Degenerate(format!(
            "all neighbors of point {i} coincide with it"
        )));
    }
    Ok(NeighborPatch {
        center: i,
        indices: neighbors.iter().map(|n| n.index).collect(),
        coords: neighbors
            .iter()
            .map(|n| (cloud.points()[n.index] - center) / radius)
            .collect(),
        distances: neighbors.iter().map(|n| n.distance / radius).collect(),
        radius,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Normalized kernel weights `d_j / sum d` with `d_j = sigmoid(t1 - t2 r_j)`.
pub fn kernel_weights(patch: &NeighborPatch, theta1: f64, theta2: f64) -> Vec<f64> {
    let d: Vec<f64> = patch.distances.iter().map(|r| sigmoid(theta1 - theta2 * r)).collect();
    let total = order_free_sum(&d);
    d.iter().map(|x| x / total).collect()
}

/// Inlier bandwidth of a patch for normal `n`.
pub fn delta_rho(patch: &NeighborPatch, n: &Vec3) -> f64 {
    let mean_sq = patch.coords.iter().map(|x| x.dot(n).powi(2)).sum::<f64>() / patch.len() as f64;
    RHO_FLOOR.max(0.3 * mean_sq)
}

/// Inlier targets `exp(-(x.n)^2 / rho^2)` for every neighbor.
pub fn delta_targets(patch: &NeighborPatch, n: &Vec3) -> Vec<f64> {
    let rho = delta_rho(patch, n);
    patch
        .coords
        .iter()
        .map(|x| (-(x.dot(n).powi(2)) / (rho * rho)).exp())
        .collect()
}

/// Angle between two unit vectors in `[0, pi]`.
pub fn vector_angle(a: &Vec3, b: &Vec3) -> f64 {
    if a == b {
        return 0.0;
    }
    if *a == -b {
        return PI;
    }
    // atan2 stays accurate near 0 and pi where acos does not
    a.cross(b).norm().atan2(a.dot(b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleSource {
    TrainUniform,
    TestGaussian { center: Vec3, eta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorSampleSet {
    pub candidates: Vec<Vec3>,
    /// Predicted angles, once evaluated.
    pub angles: Option<Vec<f64>>,
    pub source: SampleSource,
}

impl VectorSampleSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn with_angles(mut self, angles: Vec<f64>) -> Result<Self> {
        if angles.len() != self.candidates.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} angles for {} candidates",
                angles.len(),
                self.candidates.len()
            )));
        }
        self.angles = Some(angles);
        Ok(self)
    }
}

/// `count` directions uniform on the sphere.
pub fn sample_train_vectors(count: usize, seed: u64) -> VectorSampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VectorSampleSet {
        candidates: (0..count).map(|_| random_unit(&mut rng)).collect(),
        angles: None,
        source: SampleSource::TrainUniform,
    }
}

/// Standard deviation of the candidate angle around the coarse vector.
pub fn test_angle_std(eta: f64) -> f64 {
    eta * PI / 4.0
}

/// `count` directions around `center`: candidate 0 is `center` itself, the
/// rest are rotated away from it by a zero-mean Gaussian angle with standard
/// deviation `eta * 45` degrees, about a uniformly random tangent axis.
pub fn sample_test_vectors(center: &Vec3, count: usize, eta: f64, seed: u64) -> VectorSampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = test_angle_std(eta);
    let helper = if center.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = center.cross(&helper).normalize();
    let e2 = center.cross(&e1);
    let mut candidates = Vec::with_capacity(count);
    if count > 0 {
        candidates.push(*center);
    }
    while candidates.len() < count {
        let phi = rng.gen_range(0.0..PI);
        let g: f64 = rng.sample(StandardNormal);
        let theta = g * std;
        let axis = e1 * phi.cos() + e2 * phi.sin();
        if theta == 0.0 {
            candidates.push(*center);
            continue;
        }
        let v = center * theta.cos() + axis * theta.sin();
        candidates.push(v.normalize());
    }
    VectorSampleSet {
        candidates,
        angles: None,
        source: SampleSource::TestGaussian { center: *center, eta },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GvoConfig {
    /// Neighbors per patch.
    pub m: usize,
    /// Uniform candidates per training patch.
    pub train_vectors: usize,
    /// Candidates per point at refinement time.
    pub test_vectors: usize,
    /// Spread of refinement candidates, in units of 45 degrees.
    pub eta: f64,
    /// Weight of the angle loss.
    pub lambda: f64,
    pub disable_score: bool,
    pub disable_kernel_weight: bool,
    /// Drop refinement candidates that face away from the coarse vector.
    pub hemisphere_filter: bool,
    /// Feature width of each kernel layer.
    pub widths: Vec<usize>,
    pub head_width: usize,
    pub epochs: usize,
    /// Patch centers drawn from each training shape per epoch.
    pub patches_per_shape: usize,
    /// Patches per optimizer step.
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for GvoConfig {
    fn default() -> Self {
        GvoConfig {
            m: 700,
            train_vectors: 500,
            test_vectors: 4000,
            eta: 0.4,
            lambda: 0.5,
            disable_score: false,
            disable_kernel_weight: false,
            hemisphere_filter: false,
            widths: vec![64, 128, 256],
            head_width: 128,
            epochs: 50,
            patches_per_shape: 1000,
            batch: 32,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl GvoConfig {
    /// Small patches and networks that train on three 5k-point shapes in
    /// about half a minute on one core.
    pub fn desk() -> Self {
        GvoConfig {
            m: 128,
            train_vectors: 64,
            test_vectors: 1000,
            widths: vec![16, 32, 64],
            head_width: 64,
            patches_per_shape: 256,
            batch: 16,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..GvoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.train_vectors == 0 || self.test_vectors == 0 {
            return Err(Error::InvalidInput("m must be >= 2 and vector counts >= 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.head_width == 0 {
            return Err(Error::InvalidInput("network widths must be >= 1".into()));
        }
        if self.batch == 0 || self.patches_per_shape == 0 {
            return Err(Error::InvalidInput("batch and patches_per_shape must be >= 1".into()));
        }
        if !(self.lambda > 0.0) || !(self.eta >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::InvalidInput("lambda and lr must be > 0, eta >= 0".into()));
        }
        Ok(())
    }
}

/// One pooling stage: `gamma(x_l, beta(max_j alpha(w_j x_j)))` over the
/// retained nearest half of the neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayer {
    pub alpha: Mlp,
    pub beta: Mlp,
    pub gamma: Mlp,
    /// Offset and distance slope of the kernel.
    pub thetas: [f64; 2],
}

/// Inputs to the angle head besides the pooled feature and the candidate:
/// two plane residuals and two centroid offsets.
const PLANE_INPUTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GvoNetwork {
    layers: Vec<KernelLayer>,
    score_head: Mlp,
    angle_head: Mlp,
    disable_score: bool,
    disable_kernel_weight: bool,
}

/// Graph nodes of a forward pass.
struct Forward {
    scores: Option<Var>,
    angles: Var,
    retained: usize,
}

fn col(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((values.len(), 1), |(i, _)| values[i])
}

impl GvoNetwork {
    pub fn new(cfg: &GvoConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.gen::<u64>();
        let mut layers = Vec::with_capacity(cfg.widths.len());
        let mut c_in = 3;
        for &c in &cfg.widths {
            layers.push(KernelLayer {
                alpha: Mlp::random(c_in, &[c, c], None, next())?,
                beta: Mlp::random(c, &[c], None, next())?,
                gamma: Mlp::random(c_in + c, &[c], None, next())?,
                thetas: [1.0, 1.0],
            });
            c_in = c;
        }
        let h = cfg.head_width;
        Ok(GvoNetwork {
            layers,
            score_head: Mlp::random(c_in, &[h, 1], None, next())?,
            angle_head: Mlp::random(c_in + 3 + PLANE_INPUTS, &[h, h, 1], None, next())?,
            disable_score: cfg.disable_score,
            disable_kernel_weight: cfg.disable_kernel_weight,
        })
    }

    pub fn layers(&self) -> &[KernelLayer] {
        &self.layers
    }

    pub fn uses_scores(&self) -> bool {
        !self.disable_score
    }

    pub fn uses_kernel_weights(&self) -> bool {
        !self.disable_kernel_weight
    }

    /// Neighbors left after the kernel stack for a patch of `m`.
    pub fn retained(&self, m: usize) -> usize {
        self.layers.iter().fold(m, |n, _| (n / 2).max(1))
    }

    fn forward(&self, g: &mut Graph, patch: &NeighborPatch, candidates: &[Vec3]) -> Forward {
        let mut block = 0;
        let mut n = patch.len();
        let mut feat = g.constant(patch.coord_matrix(n));
        let mut first_weights = None;
        for layer in &self.layers {
            let t1 = g.param(
                block + 2 * layer.alpha.depth() + 2 * layer.beta.depth() + 2 * layer.gamma.depth(),
                col(&layer.thetas[..1]),
            );
            let t2 = g.param(
                block + 2 * layer.alpha.depth() + 2 * layer.beta.depth() + 2 * layer.gamma.depth() + 1,
                col(&layer.thetas[1..]),
            );
            let w = if self.disable_kernel_weight {
                g.constant(Array2::from_elem((n, 1), 1.0 / n as f64))
            } else {
                g.kernel_weights(t1, t2, &patch.distances[..n])
            };
            first_weights.get_or_insert(w);
            // scaled by n so the weighted inputs keep their magnitude
            let w_scaled = g.scale(w, n as f64);
            let weighted = g.mul_col(feat, w_scaled);
            let a = g.mlp(&layer.alpha, block, weighted);
            let a = g.relu(a);
            block += 2 * layer.alpha.depth();
            let pooled = g.max_rows(a);
            let b = g.mlp(&layer.beta, block, pooled);
            let b = g.relu(b);
            block += 2 * layer.beta.depth();
            let keep = (n / 2).max(1);
            let kept = g.slice_rows(feat, keep);
            let spread = g.broadcast_rows(b, keep);
            let joined = g.concat_cols(kept, spread);
            let c = g.mlp(&layer.gamma, block, joined);
            feat = g.relu(c);
            block += 2 * layer.gamma.depth() + 2;
            n = keep;
        }
        let first_weights = first_weights.expect("at least one kernel layer");
        let scores = if self.disable_score {
            None
        } else {
            let s = g.mlp(&self.score_head, block, feat);
            Some(g.sigmoid(s))
        };
        block += 2 * self.score_head.depth();
        let gated = match scores {
            Some(s) => g.mul_col(feat, s),
            None => feat,
        };
        let pooled = g.max_rows(gated);

        let cands: Vec<[f64; 3]> = candidates.iter().map(|v| [v.x, v.y, v.z]).collect();
        let all_plane = g.plane_features(first_weights, &patch.coord_rows(patch.len()), &cands);
        let near_weights = g.slice_rows(first_weights, n);
        let near_weights = match scores {
            Some(s) => g.mul_col(near_weights, s),
            None => near_weights,
        };
        let near_plane = g.plane_features(near_weights, &patch.coord_rows(n), &cands);
        let cand_matrix = g.constant(Array2::from_shape_fn((cands.len(), 3), |(i, k)| cands[i][k]));
        let spread = g.broadcast_rows(pooled, cands.len());
        let planes = g.concat_cols(all_plane, near_plane);
        let extra = g.concat_cols(cand_matrix, planes);
        let input = g.concat_cols(spread, extra);
        let raw = g.mlp(&self.angle_head, block, input);
        let squashed = g.sigmoid(raw);
        let angles = g.scale(squashed, PI);
        Forward {
            scores,
            angles,
            retained: n,
        }
    }

    /// Predicted inlier score of each retained neighbor, nearest first.
    /// All ones when scores are disabled.
    pub fn scores(&self, patch: &NeighborPatch) -> Vec<f64> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, patch, &[Vec3::z()]);
        match f.scores {
            Some(s) => g.value(s).column(0).to_vec(),
            None => vec![1.0; f.retained],
        }
    }

    /// Losses of one patch against its true normal `normal`, and their
    /// parameter gradient.
    pub fn losses_with_gradient(
        &self,
        patch: &NeighborPatch,
        candidates: &[Vec3],
        normal: &Vec3,
        lambda: f64,
    ) -> (GvoLosses, Gradients) {
        let mut g = Graph::new();
        let f = self.forward(&mut g, patch, candidates);
        let target = Array2::from_shape_fn((candidates.len(), 1), |(i, _)| vector_angle(&candidates[i], normal));
        let angle_loss = g.mae(f.angles, target);
        let weighted = g.scale(angle_loss, lambda);
        let (score_loss, total) = match f.scores {
            Some(s) => {
                let delta = delta_targets(patch, normal);
                let l1 = g.mse(s, col(&delta[..f.retained]));
                (Some(l1), g.add(l1, weighted))
            }
            None => (None, weighted),
        };
        let mut grads = self.zero_gradients();
        g.backward(total, &mut grads);
        let losses = GvoLosses {
            score: score_loss.map_or(0.0, |l| g.scalar(l)),
            angle: g.scalar(angle_loss),
            total: g.scalar(total),
        };
        (losses, grads)
    }
}

/// Score loss, angle loss and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GvoLosses {
    pub score: f64,
    pub angle: f64,
    pub total: f64,
}

/// Combines per-neighbor scores and per-candidate angles with their targets.
/// With `scores` absent the score loss is left out.
pub fn gvo_losses(scores: Option<(&[f64], &[f64])>, angles: &[f64], target_angles: &[f64], lambda: f64) -> GvoLosses {
    let score = scores.map_or(0.0, |(s, d)| {
        s.iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.len() as f64
    });
    let angle = angles
        .iter()
        .zip(target_angles)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / angles.len() as f64;
    GvoLosses {
        score,
        angle,
        total: score + lambda * angle,
    }
}

impl Parameterized for GvoNetwork {
    fn param_blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.alpha.param_blocks());
            out.extend(l.beta.param_blocks());
            out.extend(l.gamma.param_blocks());
            out.push(&l.thetas[..1]);
            out.push(&l.thetas[1..]);
        }
        out.extend(self.score_head.param_blocks());
        out.extend(self.angle_head.param_blocks());
        out
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.alpha.param_blocks_mut());
            out.extend(l.beta.param_blocks_mut());
            out.extend(l.gamma.param_blocks_mut());
            let (t1, t2) = l.thetas.split_at_mut(1);
            out.push(t1);
            out.push(t2);
        }
        out.extend(self.score_head.param_blocks_mut());
        out.extend(self.angle_head.param_blocks_mut());
        out
    }

    fn block_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let prefixed = |p: &str, net: &Mlp| {
            net.block_names()
                .into_iter()
                .map(|n| format!("{p}.{n}"))
                .collect::<Vec<_>>()
        };
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("kernel{i}.alpha"), &l.alpha));
            out.extend(prefixed(&format!("kernel{i}.beta"), &l.beta));
            out.extend(prefixed(&format!("kernel{i}.gamma"), &l.gamma));
            out.push(format!("kernel{i}.theta1"));
            out.push(format!("kernel{i}.theta2"));
        }
        out.extend(prefixed("score", &self.score_head));
        out.extend(prefixed("angle", &self.angle_head));
        out
    }
}

impl Checkpointable for GvoNetwork {
    const KIND: [u8; 4] = *b"GVO ";

    /// `[flags, head_width, layer widths...]`.
    fn descriptor(&self) -> Vec<u64> {
        let flags = self.disable_score as u64 | (self.disable_kernel_weight as u64) << 1;
        let mut d = vec![flags, self.angle_head.layers()[0].output_dim() as u64];
        d.extend(self.layers.iter().map(|l| l.beta.output_dim() as u64));
        d
    }

    fn from_descriptor(descriptor: &[u64]) -> Result<Self> {
        if descriptor.len() < 3 || descriptor[0] > 3 {
            return Err(Error::Checkpoint("malformed patch network descriptor".into()));
        }
        let cfg = GvoConfig {
            disable_score: descriptor[0] & 1 != 0,
            disable_kernel_weight: descriptor[0] & 2 != 0,
            head_width: descriptor[1] as usize,
            widths: descriptor[2..].iter().map(|&w| w as usize).collect(),
            ..GvoConfig::default()
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        GvoNetwork::new(&cfg, 0)
    }
}

/// Anything that predicts the angle between candidate directions and the
/// true normal of a patch.
pub trait AnglePredictor: Sync {
    fn predict_angles(&self, patch: &NeighborPatch, candidates: &[Vec3]) -> Result<Vec<f64>>;
}

impl AnglePredictor for GvoNetwork {
    fn predict_angles(&self, patch: &NeighborPatch, candidates: &[Vec3]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, patch, candidates);
        let out = g.value(f.angles).column(0).to_vec();
        if let Some(i) = out.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("predicted angle of candidate {i}")));
        }
        Ok(out)
    }
}

/// Index of the smallest value; the first one wins ties.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Replaces `coarse` by the sampled candidate with the smallest predicted
/// angle.
pub fn refine_normal<P: AnglePredictor + ?Sized>(
    net: &P,
    patch: &NeighborPatch,
    coarse: &Vec3,
    cfg: &GvoConfig,
    seed: u64,
) -> Result<Vec3> {
    if !((coarse.norm() - 1.0).abs() <= 1e-6) {
        return Err(Error::InvalidInput("coarse vector is not unit length".into()));
    }
    let mut set = sample_test_vectors(coarse, cfg.test_vectors, cfg.eta, seed);
    if cfg.hemisphere_filter {
        set.candidates.retain(|v| v.dot(coarse) > 0.0);
    }
    let angles = net.predict_angles(patch, &set.candidates)?;
    Ok(set.candidates[argmin(&angles)])
}

/// Candidate seed of point `i`, independent of which other points are refined.
fn point_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Refines the listed points. Each point depends only on its own patch and
/// seed, so any subset gives the same vectors as a full run.
pub fn refine_points<P: AnglePredictor + ?Sized>(
    net: &P,
    cloud: &PointCloud,
    index: &SpatialIndex,
    coarse: &NormalField,
    points: &[usize],
    cfg: &GvoConfig,
    seed: u64,
) -> Result<Vec<Vec3>> {
    if coarse.len() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} coarse vectors for {} points",
            coarse.len(),
            cloud.len()
        )));
    }
    points
        .par_iter()
        .map(|&i| {
            let patch = build_patch(cloud, index, i, cfg.m)?;
            refine_normal(net, &patch, &coarse.vectors[i], cfg, point_seed(seed, i))
        })
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::at_point(points[k], e)))
        .collect()
}

pub fn refine_field<P: AnglePredictor + ?Sized>(
    net: &P,
    cloud: &PointCloud,
    coarse: &NormalField,
    cfg: &GvoConfig,
    seed: u64,
) -> Result<NormalField> {
    cfg.validate()?;
    let index = SpatialIndex::build(cloud.points());
    let all: Vec<usize> = (0..cloud.len()).collect();
    let vectors = refine_points(net, cloud, &index, coarse, &all, cfg, seed)?;
    NormalField::new(vectors, Stage::Refined)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochEntry {
    pub epoch: usize,
    pub losses: GvoLosses,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GvoLog {
    pub entries: Vec<EpochEntry>,
}

impl GvoLog {
    pub fn totals(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.losses.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,score_loss,angle_loss,total_loss,wall_ms\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{:.1}\n",
                e.epoch, e.losses.score, e.losses.angle, e.losses.total, e.wall_ms
            ));
        }
        s
    }
}

impl fmt::Display for GvoLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

struct Shape<'a> {
    cloud: &'a PointCloud,
    normals: &'a [Vec3],
    index: SpatialIndex,
}

/// Trains the patch network on clouds with known normals. Each epoch draws
/// `patches_per_shape` random centers per cloud, shuffles them and takes one
/// optimizer step per batch. The reported epoch loss is the mean over its
/// patches.
pub fn train_gvo(dataset: &[PointCloud], cfg: &GvoConfig, seed: u64) -> Result<(GvoNetwork, GvoLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training needs at least one cloud".into()));
    }
    let shapes: Vec<Shape> = dataset
        .iter()
        .enumerate()
        .map(|(s, cloud)| {
            let normals = cloud
                .gt_normals()
                .ok_or_else(|| Error::InvalidInput(format!("training cloud {s} has no normals")))?;
            if cloud.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "training cloud {s} has fewer than two points"
                )));
            }
            Ok(Shape {
                cloud,
                normals,
                index: SpatialIndex::build(cloud.points()),
            })
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = GvoNetwork::new(cfg, rng.gen())?;
    let mut opt = Adam::new(cfg.adam);
    let mut log = GvoLog::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut items: Vec<(usize, usize, u64)> = Vec::new();
        for (s, shape) in shapes.iter().enumerate() {
            for _ in 0..cfg.patches_per_shape {
                items.push((s, rng.gen_range(0..shape.cloud.len()), rng.gen()));
            }
        }
        items.shuffle(&mut rng);
        let mut sum = GvoLosses::default();
        for batch in items.chunks(cfg.batch) {
            let parts: Vec<Result<(GvoLosses, Gradients)>> = batch
                .par_iter()
                .map(|&(s, i, item_seed)| {
                    let shape = &shapes[s];
                    let patch = build_patch(shape.cloud, &shape.index, i, cfg.m)?;
                    let cands = sample_train_vectors(cfg.train_vectors, item_seed);
                    Ok(net.losses_with_gradient(&patch, &cands.candidates, &shape.normals[i], cfg.lambda))
                })
                .collect();
            let mut grads = net.zero_gradients();
            for p in parts {
                let (l, g) = p?;
                sum.score += l.score;
                sum.angle += l.angle;
                sum.total += l.total;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut net, &grads).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence {
                    stage: "epoch",
                    step: epoch,
                },
                other => other,
            })?;
        }
        let n = items.len() as f64;
        let losses = GvoLosses {
            score: sum.score / n,
            angle: sum.angle / n,
            total: sum.total / n,
        };
        if !losses.total.is_finite() {
            return Err(Error::Divergence {
                stage: "epoch",
                step: epoch,
            });
        }
        info!(
            "gvo epoch {epoch}: score {:.5} angle {:.5} total {:.5}",
            losses.score, losses.angle, losses.total
        );
        log.entries.push(EpochEntry {
            epoch,
            losses,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{decode, encode};
    use crate::pointcloud::{synth_shape, ShapeKind};

    fn tiny_cfg() -> GvoConfig {
        GvoConfig {
            m: 16,
            train_vectors: 5,
            test_vectors: 20,
            widths: vec![4, 5],
            head_width: 6,
            ..GvoConfig::default()
        }
    }

    fn sphere_patch(m: usize) -> NeighborPatch {
        let cloud = synth_shape(ShapeKind::Sphere, 400, 1).unwrap();
        let index = SpatialIndex::build(cloud.points());
        build_patch(&cloud, &index, 0, m).unwrap()
    }

    #[test]
    fn patch_is_centered_and_scaled() {
        let p = sphere_patch(32);
        assert_eq!(p.len(), 32);
        assert_eq!(p.indices[0], 0);
        assert_eq!(p.coords[0], Vec3::zeros());
        let max = p.coords.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_point_patch() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 1.0, 1.0), Vec3::new(1.0, 3.0, 1.0)]).unwrap();
        let index = SpatialIndex::build(cloud.points());
        let p = build_patch(&cloud, &index, 0, 2).unwrap();
        assert_eq!(p.coords, vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)]);
        assert_eq!(p.radius, 2.0);
        // asking for more than exists falls back to the whole cloud
        assert_eq!(build_patch(&cloud, &index, 1, 10).unwrap().len(), 2);
    }

    #[test]
    fn coincident_patch_is_degenerate() {
        let cloud = PointCloud::new(vec![Vec3::zeros(); 3]).unwrap();
        let index = SpatialIndex::build(cloud.points());
        assert!(matches!(build_patch(&cloud, &index, 0, 3), Err(Error::Degenerate(_))));
    }

    #[test]
    fn kernel_weights_uniform_when_equidistant() {
        let mut p = sphere_patch(8);
        p.distances = vec![0.5; 8];
        for w in kernel_weights(&p, 1.0, 1.0) {
            assert!((w - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_targets_on_plane() {
        let mut p = sphere_patch(8);
        p.coords.iter_mut().for_each(|c| c.z = 0.0);
        assert_eq!(delta_rho(&p, &Vec3::z()), RHO_FLOOR);
        assert!(delta_targets(&p, &Vec3::z()).iter().all(|&d| d == 1.0));
    }

    #[test]
    fn angles_of_opposite_vectors() {
        let v = Vec3::new(0.3, -0.4, 0.5).normalize();
        assert_eq!(vector_angle(&v, &v), 0.0);
        assert_eq!(vector_angle(&v, &-v), PI);
        let u = Vec3::new(1.0, 2.0, 2.0).normalize();
        assert_eq!(vector_angle(&u, &v), vector_angle(&v, &u));
    }

    #[test]
    fn test_vectors_start_at_center() {
        let c = Vec3::new(0.0, 0.6, 0.8);
        let set = sample_test_vectors(&c, 50, 0.4, 3);
        assert_eq!(set.candidates[0], c);
        assert!(set.candidates.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        let flat = sample_test_vectors(&c, 10, 0.0, 3);
        assert!(flat.candidates.iter().all(|v| (v - c).norm() < 1e-15));
        assert_eq!(set, sample_test_vectors(&c, 50, 0.4, 3));
    }

    #[test]
    fn network_outputs_in_range() {
        let net = GvoNetwork::new(&tiny_cfg(), 4).unwrap();
        let p = sphere_patch(16);
        let cands = sample_train_vectors(30, 1).candidates;
        let a = net.predict_angles(&p, &cands).unwrap();
        assert!(a.iter().all(|&x| (0.0..=PI).contains(&x)));
        let s = net.scores(&p);
        assert_eq!(s.len(), net.retained(16));
        assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn network_gradient_matches_differences() {
        let cfg = tiny_cfg();
        let net = GvoNetwork::new(&cfg, 5).unwrap();
        let p = sphere_patch(16);
        let cands = sample_train_vectors(5, 2).candidates;
        let n = Vec3::new(0.2, 0.3, 0.9).normalize();
        let (_, grads) = net.losses_with_gradient(&p, &cands, &n, 0.5);
        let analytic = grads.flat();
        let params = net.flat_parameters();
        let eval = |flat: &[f64]| {
            let mut m = net.clone();
            let mut off = 0;
            for b in m.param_blocks_mut() {
                b.copy_from_slice(&flat[off..off + b.len()]);
                off += b.len();
            }
            m.losses_with_gradient(&p, &cands, &n, 0.5).0.total
        };
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..params.len()).step_by(3) {
            let mut up = params.clone();
            up[i] += h;
            let mut down = params.clone();
            down[i] -= h;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
            assert!(
                (analytic[i] - numeric).abs() < 1e-5 * (1.0 + numeric.abs()),
                "{}: {} vs {numeric}",
                i,
                analytic[i]
            );
            checked += 1;
        }
        assert!(checked > 50);
        // the kernel offsets receive gradient
        let names = net.block_names();
        let t = names.iter().position(|n| n == "kernel0.theta1").unwrap();
        assert!(grads.blocks[t][0] != 0.0);
    }

    #[test]
    fn ablated_network_skips_scores() {
        let cfg = GvoConfig {
            disable_score: true,
            disable_kernel_weight: true,
            ..tiny_cfg()
        };
        let net = GvoNetwork::new(&cfg, 6).unwrap();
        let p = sphere_patch(16);
        let (l, _) = net.losses_with_gradient(&p, &[Vec3::z()], &Vec3::z(), 0.5);
        assert_eq!(l.score, 0.0);
        assert_eq!(l.total, 0.5 * l.angle);
        assert!(net.scores(&p).iter().all(|&s| s == 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = GvoConfig {
            disable_kernel_weight: true,
            ..tiny_cfg()
        };
        let net = GvoNetwork::new(&cfg, 7).unwrap();
        let back: GvoNetwork = decode(&encode(&net)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn loss_arithmetic() {
        let l = gvo_losses(Some((&[0.5], &[0.5])), &[1.0], &[1.0], 0.5);
        assert_eq!(l, GvoLosses::default());
        let l = gvo_losses(None, &[0.0, 1.0], &[0.4, 0.6], 0.5);
        assert!((l.total - 0.2).abs() < 1e-15);
    }

    struct Oracle(Vec3);

    impl AnglePredictor for Oracle {
        fn predict_angles(&self, _: &NeighborPatch, c: &[Vec3]) -> Result<Vec<f64>> {
            Ok(c.iter().map(|v| vector_angle(v, &self.0)).collect())
        }
    }

    #[test]
    fn refine_picks_closest_candidate() {
        let p = sphere_patch(8);
        let truth = Vec3::new(0.1, 0.2, 1.0).normalize();
        let v0 = Vec3::z();
        let cfg = GvoConfig {
            test_vectors: 200,
            ..tiny_cfg()
        };
        let got = refine_normal(&Oracle(truth), &p, &v0, &cfg, 9).unwrap();
        let set = sample_test_vectors(&v0, 200, cfg.eta, 9);
        let best = set
            .candidates
            .iter()
            .map(|v| vector_angle(v, &truth))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(vector_angle(&got, &truth), best);
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = GvoConfig {
            m: 32,
            train_vectors: 16,
            widths: vec![8, 8],
            head_width: 16,
            epochs: 6,
            patches_per_shape: 24,
            batch: 8,
            ..GvoConfig::default()
        };
        let data = vec![synth_shape(ShapeKind::Sphere, 600, 1).unwrap()];
        let (_, log) = train_gvo(&data, &cfg, 3).unwrap();
        let t = log.totals();
        assert!(t.last().unwrap() < &t[0], "{t:?}");
        let (_, again) = train_gvo(&data, &cfg, 3).unwrap();
        assert_eq!(again.totals(), t);
    }
}
