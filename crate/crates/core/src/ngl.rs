//! Neural gradient learning: fit a scalar field to one cloud so that its
//! normalized input gradient gives consistently oriented coarse normals.
//!
//! Training queries are cloud points jittered by an isotropic Gaussian whose
//! width is the distance to the `sigma_rank`-th neighbor. At each query `x`
//! the field value times its unit gradient, `f(x) v(x)`, is pulled toward the
//! offset of `x` from the centroid of its `k` nearest cloud points.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{
    loss_gradients, normalize_backward, normalize_guarded, Adam, AdamConfig, FieldEval, InitKind, Mlp, PointLoss,
};
use crate::pointcloud::{neighbor_centroid, PointCloud, SpatialIndex, Vec3};

/// Neighbors used to patch a point whose field gradient vanishes.
const FALLBACK_NEIGHBORS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// `|f v - (x - mean of kNN)|`
    #[default]
    NeighborMean,
    /// `|(f v - x) + mean of kNN|`; algebraically the same as `NeighborMean`.
    Extension,
    /// `|(x - f v) - p|` with `p` the nearest cloud point.
    Pull,
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighbor-mean" | "eq6" => Ok(LossVariant::NeighborMean),
            "extension" | "eq8" => Ok(LossVariant::Extension),
            "pull" | "eq4" => Ok(LossVariant::Pull),
            other => Err(Error::InvalidInput(format!("unknown loss variant '{other}'"))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::NeighborMean => "neighbor-mean",
            LossVariant::Extension => "extension",
            LossVariant::Pull => "pull",
        })
    }
}

/// How the residual vector is turned into a scalar loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    L2,
    L1,
    Mse,
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(DistanceKind::L2),
            "l1" => Ok(DistanceKind::L1),
            "mse" => Ok(DistanceKind::Mse),
            other => Err(Error::InvalidInput(format!("unknown distance '{other}'"))),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::L2 => "l2",
            DistanceKind::L1 => "l1",
            DistanceKind::Mse => "mse",
        })
    }
}

impl DistanceKind {
    /// Loss value and its derivative with respect to the residual.
    pub fn eval(self, r: &Vec3) -> (f64, Vec3) {
        match self {
            DistanceKind::L2 => {
                let n = r.norm();
                if n > 0.0 {
                    (n, r / n)
                } else {
                    (0.0, Vec3::zeros())
                }
            }
            DistanceKind::L1 => (r.abs().sum(), r.map(|c| if c == 0.0 { 0.0 } else { c.signum() })),
            DistanceKind::Mse => (r.norm_squared(), 2.0 * r),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NglConfig {
    /// Neighbors averaged for the target offset.
    pub k: usize,
    /// Queries per iteration.
    pub batch: usize,
    pub iterations: usize,
    pub loss: LossVariant,
    pub distance: DistanceKind,
    /// Which neighbor's distance sets the query jitter.
    pub sigma_rank: usize,
    /// Lower bound on the jitter, relative to the unit-ball radius.
    pub sigma_floor: f64,
    /// Hidden width of the eight-layer field network.
    pub width: usize,
    pub init: InitKind,
    pub init_radius: f64,
    pub adam: AdamConfig,
}

impl Default for NglConfig {
    fn default() -> Self {
        NglConfig {
            k: 64,
            batch: 5000,
            iterations: 10_000,
            loss: LossVariant::NeighborMean,
            distance: DistanceKind::L2,
            sigma_rank: 50,
            sigma_floor: 1e-4,
            width: 256,
            init: InitKind::Geometric,
            init_radius: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

impl NglConfig {
    /// Reduced budget that trains a 5k-point shape in a couple of minutes on
    /// one core.
    pub fn desk() -> Self {
        NglConfig {
            batch: 500,
            iterations: 2000,
            width: 64,
            ..NglConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch == 0 || self.sigma_rank == 0 || self.width < 2 {
            return Err(Error::InvalidInput(
                "k, batch, sigma_rank must be >= 1 and width >= 2".into(),
            ));
        }
        if !(self.sigma_floor >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::InvalidInput("sigma_floor must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Draws training queries around the cloud points.
#[derive(Clone, Debug)]
pub struct QuerySampler {
    points: Vec<Vec3>,
    sigmas: Vec<f64>,
    rng: ChaCha8Rng,
}

impl QuerySampler {
    pub fn new(cloud: &PointCloud, index: &SpatialIndex, sigma_rank: usize, sigma_floor: f64, seed: u64) -> Self {
        if cloud.len() <= sigma_rank {
            warn!(
                "cloud has {} points, fewer than sigma rank {sigma_rank} + 1; using the farthest neighbor",
                cloud.len()
            );
        }
        let sigmas = cloud
            .points()
            .par_iter()
            .map(|p| {
                let nn = index.knn(p, sigma_rank + 1);
                nn.last().map_or(0.0, |n| n.distance).max(sigma_floor)
            })
            .collect();
        QuerySampler {
            points: cloud.points().to_vec(),
            sigmas,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sample(&mut self, count: usize) -> Vec<Vec3> {
        self.sample_with_sources(count).into_iter().map(|(q, _)| q).collect()
    }

    /// Queries together with the index of the cloud point each came from.
    pub fn sample_with_sources(&mut self, count: usize) -> Vec<(Vec3, usize)> {
        (0..count)
            .map(|_| {
                let i = self.rng.gen_range(0..self.points.len());
                let eps = Vec3::new(
                    self.rng.sample(StandardNormal),
                    self.rng.sample(StandardNormal),
                    self.rng.sample(StandardNormal),
                );
                (self.points[i] + eps * self.sigmas[i], i)
            })
            .collect()
    }
}

/// Per-query geometry the loss compares against.
fn anchors(variant: LossVariant, queries: &[Vec3], index: &SpatialIndex, cloud: &PointCloud, k: usize) -> Vec<Vec3> {
    let k = if variant == LossVariant::Pull { 1 } else { k };
    queries
        .par_iter()
        .map(|q| neighbor_centroid(index, cloud, q, k))
        .collect()
}

/// Residual whose size the loss measures, and the Jacobian sign of the
/// residual with respect to `f v`.
fn residual(variant: LossVariant, fv: &Vec3, x: &Vec3, anchor: &Vec3) -> (Vec3, f64) {
    match variant {
        LossVariant::NeighborMean => (fv - (x - anchor), 1.0),
        LossVariant::Extension => ((fv - x) + anchor, 1.0),
        LossVariant::Pull => ((x - fv) - anchor, -1.0),
    }
}

fn point_loss(
    variant: LossVariant,
    distance: DistanceKind,
    x: &Vec3,
    anchor: &Vec3,
    e: &FieldEval,
    scale: f64,
) -> PointLoss {
    let (v, _) = normalize_guarded(&e.gradient);
    let fv = v * e.value;
    let (r, sign) = residual(variant, &fv, x, anchor);
    let (loss, d_r) = distance.eval(&r);
    let d_fv = d_r * (sign * scale);
    PointLoss {
        loss: loss * scale,
        d_value: d_fv.dot(&v),
        d_gradient: normalize_backward(&e.gradient, &(d_fv * e.value)),
    }
}

/// Mean loss over the queries for the configured variant and distance.
pub fn ngl_loss(net: &Mlp, queries: &[Vec3], index: &SpatialIndex, cloud: &PointCloud, cfg: &NglConfig) -> Result<f64> {
    variant_loss(net, queries, index, cloud, cfg, cfg.loss)
}

/// The noise-free rearrangement of [`ngl_loss`].
pub fn extension_loss(
    net: &Mlp,
    queries: &[Vec3],
    index: &SpatialIndex,
    cloud: &PointCloud,
    cfg: &NglConfig,
) -> Result<f64> {
    variant_loss(net, queries, index, cloud, cfg, LossVariant::Extension)
}

/// Loss toward the nearest cloud point, `k` forced to 1.
pub fn pull_loss(
    net: &Mlp,
    queries: &[Vec3],
    index: &SpatialIndex,
    cloud: &PointCloud,
    cfg: &NglConfig,
) -> Result<f64> {
    variant_loss(net, queries, index, cloud, cfg, LossVariant::Pull)
}

pub fn variant_loss(
    net: &Mlp,
    queries: &[Vec3],
    index: &SpatialIndex,
    cloud: &PointCloud,
    cfg: &NglConfig,
    variant: LossVariant,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("no queries".into()));
    }
    let evals = net.eval_with_gradient(queries)?;
    let anchors = anchors(variant, queries, index, cloud, cfg.k);
    let scale = 1.0 / queries.len() as f64;
    let mut total = 0.0;
    for ((x, a), e) in queries.iter().zip(&anchors).zip(&evals) {
        if !e.value.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        total += point_loss(variant, cfg.distance, x, a, e, scale).loss;
    }
    Ok(total)
}

/// Loss and parameter gradient for one batch of queries.
///
/// The neighbor-mean loss and its noise-free rearrangement are the same
/// function, so both train through a single expression and give
/// bit-identical runs.
pub fn ngl_loss_gradients(
    net: &Mlp,
    queries: &[Vec3],
    index: &SpatialIndex,
    cloud: &PointCloud,
    cfg: &NglConfig,
) -> Result<(f64, crate::nn::Gradients)> {
    let variant = match cfg.loss {
        LossVariant::Extension => LossVariant::NeighborMean,
        other => other,
    };
    let anchors = anchors(variant, queries, index, cloud, cfg.k);
    let scale = 1.0 / queries.len() as f64;
    loss_gradients(net, queries, |i, e| {
        point_loss(variant, cfg.distance, &queries[i], &anchors[i], e, scale)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    /// Mean loss over the first `window` entries.
    pub fn head_mean(&self, window: usize) -> f64 {
        let n = window.min(self.entries.len()).max(1);
        self.entries[..n].iter().map(|e| e.loss).sum::<f64>() / n as f64
    }

    /// Mean loss over the last `window` entries.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let n = window.min(self.entries.len()).max(1);
        let s = self.entries.len() - n;
        self.entries[s..].iter().map(|e| e.loss).sum::<f64>() / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,wall_ms\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{:.3}\n", e.iteration, e.loss, e.wall_ms));
        }
        s
    }
}

/// Fits the field to a normalized cloud.
pub fn train_ngl(cloud: &PointCloud, cfg: &NglConfig, seed: u64) -> Result<(Mlp, TrainingLog)> {
    cfg.validate()?;
    if cloud.len() < 2 {
        return Err(Error::InvalidInput("need at least two points to fit a field".into()));
    }
    let index = SpatialIndex::build(cloud.points());
    let mut net = Mlp::field(cfg.width);
    net.initialize(cfg.init, cfg.init_radius, seed);
    let mut sampler = QuerySampler::new(
        cloud,
        &index,
        cfg.sigma_rank,
        cfg.sigma_floor,
        seed ^ 0x9e37_79b9_7f4a_7c15,
    );
    let mut opt = Adam::new(cfg.adam);
    let mut log = TrainingLog::default();
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let queries = sampler.sample(cfg.batch);
        let (loss, grads) = ngl_loss_gradients(&net, &queries, &index, cloud, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "iteration",
                step: it,
            });
        }
        log.entries.push(LogEntry {
            iteration: it,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        opt.step(&mut net, &grads).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                stage: "iteration",
                step: it,
            },
            other => other,
        })?;
        if it % 500 == 0 {
            info!("ngl iteration {it}: loss {loss:.6}");
        }
    }
    Ok((net, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Normalized field gradients.
    Coarse,
    /// Candidates selected by the angle network.
    Refined,
    /// Produced by a classical method.
    Baseline,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Refined => "refined",
            Stage::Baseline => "baseline",
        })
    }
}

/// Unit vectors aligned with cloud order.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub vectors: Vec<Vec3>,
    pub stage: Stage,
}

impl NormalField {
    pub fn new(vectors: Vec<Vec3>, stage: Stage) -> Result<Self> {
        if let Some(i) = vectors.iter().position(|v| !((v.norm() - 1.0).abs() <= 1e-6)) {
            return Err(Error::NonFinite(format!("normal {i} is not unit length")));
        }
        Ok(NormalField { vectors, stage })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Normalized field gradients at the cloud points. Points where the gradient
/// vanishes take the normalized mean of their neighbors' vectors; their
/// indices are returned.
pub fn extract_gradients(net: &Mlp, cloud: &PointCloud) -> Result<(NormalField, Vec<usize>)> {
    let evals = net.eval_with_gradient(cloud.points())?;
    let mut vectors: Vec<Option<Vec3>> = evals
        .iter()
        .map(|e| {
            let n = e.gradient.norm();
            (n > crate::nn::NORM_GUARD && n.is_finite()).then(|| e.gradient / n)
        })
        .collect();
    let bad: Vec<usize> = (0..vectors.len()).filter(|&i| vectors[i].is_none()).collect();
    if !bad.is_empty() {
        warn!(
            "{} points have a vanishing field gradient; using neighbor means",
            bad.len()
        );
        let index = SpatialIndex::build(cloud.points());
        let patched: Vec<(usize, Vec3)> = bad
            .iter()
            .map(|&i| {
                let mut sum = Vec3::zeros();
                let mut k = FALLBACK_NEIGHBORS + 1;
                // widen the search until some neighbor has a usable vector
                while k <= cloud.len() * 2 {
                    sum = index
                        .knn(&cloud.points()[i], k)
                        .iter()
                        .filter_map(|n| vectors[n.index])
                        .sum();
                    if sum.norm() > 0.0 || k >= cloud.len() {
                        break;
                    }
                    k *= 2;
                }
                let n = sum.norm();
                if n > 0.0 {
                    Ok((i, sum / n))
                } else {
                    Err(Error::Degenerate(format!("no usable gradient near point {i}")))
                }
            })
            .collect::<Result<_>>()?;
        for (i, v) in patched {
            vectors[i] = Some(v);
        }
    }
    let field = NormalField::new(vectors.into_iter().map(Option::unwrap).collect(), Stage::Coarse)?;
    Ok((field, bad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_geometric, Linear};
    use crate::pointcloud::{synth_shape, ShapeKind};
    use ndarray::array;

    /// `f(x) = a . x + c`
    fn affine(a: [f64; 3], c: f64) -> Mlp {
        Mlp::from_layers(
            vec![Linear {
                weight: array![[a[0], a[1], a[2]]],
                bias: array![c],
            }],
            None,
        )
        .unwrap()
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        // f = z, v = e_z, so f v = (0, 0, z); with the only cloud point at
        // (x, y, 0) the k = 1 target offset is exactly (0, 0, z)
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.0)]).unwrap();
        let index = SpatialIndex::build(cloud.points());
        let cfg = NglConfig {
            k: 1,
            ..NglConfig::default()
        };
        let net = affine([0.0, 0.0, 1.0], 0.0);
        let queries = vec![Vec3::new(0.0, 0.0, 0.3), Vec3::new(0.0, 0.0, -0.8)];
        assert_eq!(ngl_loss(&net, &queries, &index, &cloud, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_single_query() {
        // x = (0,0,1), neighbor mean at origin, f v = (0,0,0.5) -> |(0,0,-0.5)|
        let cloud = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let index = SpatialIndex::build(cloud.points());
        let cfg = NglConfig {
            k: 1,
            ..NglConfig::default()
        };
        let net = affine([0.0, 0.0, 1.0], -0.5);
        let queries = vec![Vec3::new(0.0, 0.0, 1.0)];
        let l = ngl_loss(&net, &queries, &index, &cloud, &cfg).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_pull_has_zero_loss() {
        // f(x) = |x - p| below p = (0,0,1), whose gradient (x - p)/|x - p|
        // moves x by f onto p
        let p = Vec3::new(0.0, 0.0, 1.0);
        let cloud = PointCloud::new(vec![p]).unwrap();
        let index = SpatialIndex::build(cloud.points());
        let cfg = NglConfig {
            k: 1,
            ..NglConfig::default()
        };
        let net = affine([0.0, 0.0, -1.0], 1.0);
        let queries = vec![Vec3::new(0.0, 0.0, 0.25), Vec3::new(0.0, 0.0, -0.5)];
        assert_eq!(pull_loss(&net, &queries, &index, &cloud, &cfg).unwrap(), 0.0);
        assert_eq!(extension_loss(&net, &queries, &index, &cloud, &cfg).unwrap(), 0.0);
        // the signed version (f = z - 1, v = e_z) gives the same product f v
        let signed = affine([0.0, 0.0, 1.0], -1.0);
        assert_eq!(pull_loss(&signed, &queries, &index, &cloud, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn sampler_is_deterministic_and_floored() {
        let cloud = synth_shape(ShapeKind::Sphere, 300, 1).unwrap();
        let index = SpatialIndex::build(cloud.points());
        let mut a = QuerySampler::new(&cloud, &index, 50, 1e-4, 7);
        let mut b = QuerySampler::new(&cloud, &index, 50, 1e-4, 7);
        assert_eq!(a.sample(100), b.sample(100));
        assert!(a.sigmas().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn zero_variance_queries_hit_cloud_points() {
        // every point duplicated: the first neighbor other than itself is at 0
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                let p = Vec3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0);
                pts.push(p);
                pts.push(p);
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let index = SpatialIndex::build(cloud.points());
        let mut s = QuerySampler::new(&cloud, &index, 1, 0.0, 3);
        for (q, src) in s.sample_with_sources(200) {
            assert_eq!(q, cloud.points()[src]);
        }
    }

    #[test]
    fn extracted_field_is_unit_and_radial_at_init() {
        let cloud = synth_shape(ShapeKind::Sphere, 400, 2).unwrap();
        let net = init_geometric(&Mlp::field(64), 0.5, 5);
        let (field, fallback) = extract_gradients(&net, &cloud).unwrap();
        assert!(fallback.is_empty());
        let outward = field
            .vectors
            .iter()
            .zip(cloud.points())
            .filter(|(v, p)| v.dot(p) > 0.0)
            .count();
        assert!(outward as f64 >= 0.95 * cloud.len() as f64);
        assert!(field.vectors.iter().all(|v| (v.norm() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn vanishing_gradient_uses_neighbors() {
        // the constant network has zero gradient everywhere, so every point
        // fails and no neighbor can help
        let cloud = synth_shape(ShapeKind::Sphere, 50, 2).unwrap();
        let mut net = Mlp::field(4);
        net.layers_mut()[7].bias[0] = 1.0;
        assert!(matches!(extract_gradients(&net, &cloud), Err(Error::Degenerate(_))));
    }
}
