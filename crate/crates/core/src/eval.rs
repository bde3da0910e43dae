//! Accuracy metrics, classical baselines and error maps.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ngl::{NormalField, Stage};
use crate::pointcloud::{write_ply, PlyEncoding, PlyWriteOptions, PointCloud, SpatialIndex, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AngleMode {
    Oriented,
    /// Ignores the sign of the estimate.
    Unoriented,
}

/// Angle between an estimate and the true normal, in degrees. Uses `atan2`
/// so that identical and opposite vectors give exactly 0 and 180.
pub fn angle_error(v: &Vec3, truth: &Vec3, mode: AngleMode) -> f64 {
    let theta = v.cross(truth).norm().atan2(v.dot(truth)).to_degrees();
    match mode {
        AngleMode::Oriented => theta,
        AngleMode::Unoriented => theta.min(180.0 - theta),
    }
}

pub fn angle_errors(estimates: &[Vec3], truth: &[Vec3], mode: AngleMode) -> Result<Vec<f64>> {
    if estimates.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimates for {} reference normals",
            estimates.len(),
            truth.len()
        )));
    }
    Ok(estimates
        .iter()
        .zip(truth)
        .map(|(v, n)| angle_error(v, n, mode))
        .collect())
}

pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("rmse of an empty list".into()));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Thresholds 1, 2, ..., 180 degrees.
pub fn default_thresholds() -> Vec<f64> {
    (1..=180).map(f64::from).collect()
}

/// Fraction of errors at or below each threshold.
pub fn pgp_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("thresholds must be sorted ascending".into()));
    }
    if errors.is_empty() {
        return Ok(vec![0.0; thresholds.len()]);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|t| sorted.partition_point(|e| e <= t) as f64 / n)
        .collect())
}

/// Fraction of estimates on the same side as the reference.
pub fn orientation_agreement(estimates: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::ShapeMismatch("orientation needs equal, non-empty lists".into()));
    }
    let good = estimates.iter().zip(truth).filter(|(v, n)| v.dot(n) > 0.0).count();
    Ok(good as f64 / estimates.len() as f64)
}

/// Relative eigenvalue gap below which two eigenvalues count as equal.
const EIGEN_TOL: f64 = 1e-12;

/// Direction of least spread of a neighborhood: the eigenvector of the
/// smallest eigenvalue of its covariance. Among equally good directions and
/// their negations the lexicographically largest is returned.
pub fn pca_normal(patch: &[Vec3]) -> Result<Vec3> {
    if patch.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "plane fit needs 3 points, got {}",
            patch.len()
        )));
    }
    let mean = patch.iter().sum::<Vec3>() / patch.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in patch {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= patch.len() as f64;
    if !cov.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("patch covariance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let scale = vals[2];
    if !(scale > 0.0) || vals[1] <= EIGEN_TOL * scale {
        return Err(Error::Degenerate("patch points are collinear".into()));
    }
    let tied = vals.iter().filter(|&&v| v - vals[0] <= EIGEN_TOL * scale).count();
    let best = order[..tied]
        .iter()
        .flat_map(|&i| {
            let v: Vec3 = eig.eigenvectors.column(i).into_owned().normalize();
            [v, -v]
        })
        .max_by(lexicographic)
        .expect("at least one eigenvector");
    Ok(best)
}

fn lexicographic(a: &Vec3, b: &Vec3) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// Unoriented plane-fit normals over the `k` nearest neighbors of every point.
pub fn pca_normals(cloud: &PointCloud, k: usize) -> Result<NormalField> {
    let index = SpatialIndex::build(cloud.points());
    let vectors = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let patch: Vec<Vec3> = index
                .knn(&cloud.points()[i], k)
                .iter()
                .map(|n| cloud.points()[n.index])
                .collect();
            pca_normal(&patch).map_err(|e| Error::at_point(i, e))
        })
        .collect::<Result<Vec<_>>>()?;
    NormalField::new(vectors, Stage::Baseline)
}

/// Edge of the minimum spanning tree frontier, popped lightest first and
/// then by lowest child and parent index.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Edge {
    weight: f64,
    child: usize,
    parent: usize,
}

impl Eq for Edge {}

impl Ord for Edge {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .weight
            .total_cmp(&self.weight)
            .then(other.child.cmp(&self.child))
            .then(other.parent.cmp(&self.parent))
    }
}

impl PartialOrd for Edge {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Index of the highest point among those not yet visited; lowest index on ties.
fn highest_unvisited(points: &[Vec3], visited: &[bool]) -> Option<usize> {
    (0..points.len())
        .filter(|&i| !visited[i])
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if points[b].z >= points[i].z => Some(b),
            _ => Some(i),
        })
}

/// Consistent signs for an unoriented field by propagation along a minimum
/// spanning tree of the `k`-nearest-neighbor graph, with edge cost
/// `1 - |n_i . n_j|`. Each connected component is rooted at its highest
/// point, whose normal is made to point up; a child is flipped when it
/// disagrees with its parent.
pub fn mst_orient(cloud: &PointCloud, field: &NormalField, k: usize) -> Result<NormalField> {
    if field.len() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} normals for {} points",
            field.len(),
            cloud.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("graph degree must be >= 1".into()));
    }
    let points = cloud.points();
    let index = SpatialIndex::build(points);
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); points.len()];
    for (i, p) in points.iter().enumerate() {
        for n in index.knn(p, k + 1) {
            if n.index != i {
                adjacency[i].push(n.index);
                adjacency[n.index].push(i);
            }
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }
    let mut normals = field.vectors.clone();
    let mut visited = vec![false; points.len()];
    let mut components = 0;
    while let Some(root) = highest_unvisited(points, &visited) {
        components += 1;
        if normals[root].z < 0.0 {
            normals[root] = -normals[root];
        }
        visited[root] = true;
        let mut heap = BinaryHeap::new();
        let push_from = |heap: &mut BinaryHeap<Edge>, i: usize, normals: &[Vec3], visited: &[bool]| {
            for &j in &adjacency[i] {
                if !visited[j] {
                    heap.push(Edge {
                        weight: 1.0 - normals[i].dot(&normals[j]).abs(),
                        child: j,
                        parent: i,
                    });
                }
            }
        };
        push_from(&mut heap, root, &normals, &visited);
        while let Some(e) = heap.pop() {
            if visited[e.child] {
                continue;
            }
            visited[e.child] = true;
            if normals[e.parent].dot(&normals[e.child]) < 0.0 {
                normals[e.child] = -normals[e.child];
            }
            push_from(&mut heap, e.child, &normals, &visited);
        }
    }
    if components > 1 {
        warn!("neighbor graph has {components} components; each was oriented on its own");
    }
    NormalField::new(normals, Stage::Baseline)
}

/// A neighbor pair for the naive sign-propagation rule: an oriented normal
/// `n1`, an unoriented estimate `n2` at a nearby point, and that point's
/// true normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipCase {
    pub n1: Vec3,
    pub n2: Vec3,
    pub gt2: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipVerdict {
    pub flipped: bool,
    pub result: Vec3,
    /// Whether the propagated normal lies within 90 degrees of the truth.
    pub correct: bool,
}

/// Applies "flip `n2` if `n1 . n2 < 0`" to every case.
pub fn flip_rule_table(cases: &[FlipCase]) -> Vec<FlipVerdict> {
    cases
        .iter()
        .map(|c| {
            let flipped = c.n1.dot(&c.n2) < 0.0;
            let result = if flipped { -c.n2 } else { c.n2 };
            FlipVerdict {
                flipped,
                result,
                correct: angle_error(&result, &c.gt2, AngleMode::Oriented) < 90.0,
            }
        })
        .collect()
}

/// Neighbor pairs on a bent surface: the first normal points along +z and
/// is correct, the second true normal is tilted by 0..180 degrees in `steps`
/// increments, and the second estimate has either sign.
pub fn flip_rule_sweep(steps: usize) -> Vec<FlipCase> {
    let steps = steps.max(1);
    let mut cases = Vec::with_capacity(2 * (steps + 1));
    for s in 0..=steps {
        let bend = std::f64::consts::PI * s as f64 / steps as f64;
        let gt2 = Vec3::new(bend.sin(), 0.0, bend.cos());
        for sign in [1.0, -1.0] {
            cases.push(FlipCase {
                n1: Vec3::z(),
                n2: gt2 * sign,
                gt2,
            });
        }
    }
    cases
}

pub fn flip_failure_rate(verdicts: &[FlipVerdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    verdicts.iter().filter(|v| !v.correct).count() as f64 / verdicts.len() as f64
}

/// Blue at 0 degrees to red at 90 degrees and above.
pub fn error_color(degrees: f64) -> [u8; 3] {
    let t = (degrees / 90.0).clamp(0.0, 1.0);
    let r = (255.0 * t).round() as u8;
    [r, 0, 255 - r]
}

/// Writes the cloud as a binary PLY colored by per-point error, with the
/// RMSE of the errors in a comment.
pub fn export_error_map(cloud: &PointCloud, errors: &[f64], path: &Path) -> Result<()> {
    if errors.len() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} errors for {} points",
            errors.len(),
            cloud.len()
        )));
    }
    let colors: Vec<[u8; 3]> = errors.iter().map(|&e| error_color(e)).collect();
    write_ply(
        path,
        cloud.points(),
        &PlyWriteOptions {
            encoding: PlyEncoding::BinaryLittleEndian,
            normals: None,
            colors: Some(&colors),
            comments: vec![format!("RMSE={}", rmse(errors)?)],
        },
    )
}

/// Descriptive fields carried into the report header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportMeta {
    pub shape: String,
    pub noise: f64,
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub oriented: Vec<f64>,
    pub unoriented: Vec<f64>,
    pub rmse_oriented: f64,
    pub rmse_unoriented: f64,
    /// Oriented errors against thresholds 1..180 degrees.
    pub pgp: Vec<(f64, f64)>,
    pub agreement: f64,
}

impl EvalReport {
    pub fn new(estimates: &[Vec3], truth: &[Vec3], meta: ReportMeta) -> Result<Self> {
        let oriented = angle_errors(estimates, truth, AngleMode::Oriented)?;
        let unoriented = angle_errors(estimates, truth, AngleMode::Unoriented)?;
        let thresholds = default_thresholds();
        let fractions = pgp_curve(&oriented, &thresholds)?;
        Ok(EvalReport {
            meta,
            rmse_oriented: rmse(&oriented)?,
            rmse_unoriented: rmse(&unoriented)?,
            pgp: thresholds.into_iter().zip(fractions).collect(),
            agreement: orientation_agreement(estimates, truth)?,
            oriented,
            unoriented,
        })
    }

    pub fn mean_oriented(&self) -> f64 {
        self.oriented.iter().sum::<f64>() / self.oriented.len() as f64
    }

    pub fn mean_unoriented(&self) -> f64 {
        self.unoriented.iter().sum::<f64>() / self.unoriented.len() as f64
    }

    fn pgp_at(&self, threshold: f64) -> f64 {
        self.pgp.iter().find(|(t, _)| *t == threshold).map_or(f64::NAN, |p| p.1)
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "shape = {}", self.meta.shape);
        let _ = writeln!(s, "noise = {}", self.meta.noise);
        let _ = writeln!(s, "stage = {}", self.meta.stage);
        let _ = writeln!(s, "points = {}", self.oriented.len());
        let _ = writeln!(s, "rmse_oriented = {}", self.rmse_oriented);
        let _ = writeln!(s, "rmse_unoriented = {}", self.rmse_unoriented);
        let _ = writeln!(s, "mean_oriented = {}", self.mean_oriented());
        let _ = writeln!(s, "mean_unoriented = {}", self.mean_unoriented());
        let _ = writeln!(s, "orientation_agreement = {}", self.agreement);
        for t in [5.0, 10.0, 20.0, 30.0] {
            let _ = writeln!(s, "pgp_{t} = {}", self.pgp_at(t));
        }
        s
    }

    pub fn pgp_csv(&self) -> String {
        let mut s = String::from("threshold_deg,fraction\n");
        for (t, f) in &self.pgp {
            let _ = writeln!(s, "{t},{f}");
        }
        s
    }
}

/// Per-shape RMSE averaged over shapes, as `(oriented, unoriented)`.
pub fn mean_over_shapes(reports: &[EvalReport]) -> Result<(f64, f64)> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to average".into()));
    }
    let n = reports.len() as f64;
    Ok((
        reports.iter().map(|r| r.rmse_oriented).sum::<f64>() / n,
        reports.iter().map(|r| r.rmse_unoriented).sum::<f64>() / n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{load_cloud, synth_shape, CloudFormat, ShapeKind};

    #[test]
    fn angle_modes() {
        let n = Vec3::new(0.0, 0.6, 0.8);
        assert_eq!(angle_error(&n, &n, AngleMode::Oriented), 0.0);
        assert_eq!(angle_error(&-n, &n, AngleMode::Oriented), 180.0);
        assert_eq!(angle_error(&-n, &n, AngleMode::Unoriented), 0.0);
        let perp = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(angle_error(&perp, &n, AngleMode::Oriented), 90.0);
        assert_eq!(angle_error(&perp, &n, AngleMode::Unoriented), 90.0);
    }

    #[test]
    fn rmse_examples() {
        assert!((rmse(&[3.0, 4.0]).unwrap() - 3.53553).abs() < 1e-5);
        assert_eq!(rmse(&[0.0; 4]).unwrap(), 0.0);
        assert!(rmse(&[]).is_err());
    }

    #[test]
    fn pgp_counts() {
        assert_eq!(pgp_curve(&[5.0, 15.0, 25.0], &[10.0]).unwrap(), vec![1.0 / 3.0]);
        assert_eq!(pgp_curve(&[5.0, 179.0], &[180.0]).unwrap(), vec![1.0]);
        assert!(pgp_curve(&[1.0], &[10.0, 5.0]).is_err());
    }

    #[test]
    fn pca_of_flat_square() {
        let patch = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        assert_eq!(pca_normal(&patch).unwrap(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn pca_rejects_lines() {
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(pca_normal(&line), Err(Error::Degenerate(_))));
        assert!(pca_normal(&line[..2]).is_err());
    }

    #[test]
    fn pca_tie_is_deterministic() {
        // regular octahedron vertices: every direction is equally good
        let patch = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()];
        let n = pca_normal(&patch).unwrap();
        assert!((n.norm() - 1.0).abs() < 1e-12);
        assert_eq!(n, pca_normal(&patch).unwrap());
        assert!(n.x >= 0.0);
    }

    #[test]
    fn mst_single_edge() {
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.1, 0.0, 0.9)]).unwrap();
        let field = NormalField::new(vec![Vec3::z(), -Vec3::new(0.1, 0.0, 1.0).normalize()], Stage::Baseline).unwrap();
        let out = mst_orient(&cloud, &field, 12).unwrap();
        assert_eq!(out.vectors[0], Vec3::z());
        assert_eq!(out.vectors[1], Vec3::new(0.1, 0.0, 1.0).normalize());
    }

    #[test]
    fn mst_fixes_signs_on_sphere() {
        let cloud = synth_shape(ShapeKind::Sphere, 2000, 4).unwrap();
        let pca = pca_normals(&cloud, 16).unwrap();
        let oriented = mst_orient(&cloud, &pca, 12).unwrap();
        let agree = orientation_agreement(&oriented.vectors, cloud.gt_normals().unwrap()).unwrap();
        assert!(agree > 0.99, "{agree}");
        for (a, b) in oriented.vectors.iter().zip(&pca.vectors) {
            assert!(a == b || *a == -b);
        }
    }

    #[test]
    fn naive_flip_rule_fails_on_sharp_bends() {
        let ok = flip_rule_table(&[FlipCase {
            n1: Vec3::z(),
            n2: Vec3::z(),
            gt2: Vec3::z(),
        }]);
        assert!(!ok[0].flipped && ok[0].correct);
        let gt2 = Vec3::new(0.0, 1.0, -0.2).normalize();
        let bad = flip_rule_table(&[FlipCase {
            n1: Vec3::z(),
            n2: -gt2,
            gt2,
        }]);
        assert!(!bad[0].flipped && !bad[0].correct);
        assert!(flip_failure_rate(&flip_rule_table(&flip_rule_sweep(36))) > 0.0);
    }

    #[test]
    fn error_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("err.ply");
        let cloud = synth_shape(ShapeKind::Torus, 50, 2).unwrap();
        let errors: Vec<f64> = (0..50).map(|i| i as f64 * 2.0).collect();
        export_error_map(&cloud, &errors, &path).unwrap();
        let back = load_cloud(&path, CloudFormat::Ply).unwrap();
        for (a, b) in back.points().iter().zip(cloud.points()) {
            assert!((a - b).norm() < 1e-6);
        }
        let bytes = std::fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&bytes[..400]);
        assert!(header.contains(&format!("comment RMSE={}", rmse(&errors).unwrap())));
        assert_eq!(error_color(0.0), [0, 0, 255]);
        assert_eq!(error_color(120.0), [255, 0, 0]);
    }

    #[test]
    fn perfect_report() {
        let cloud = synth_shape(ShapeKind::Sphere, 100, 1).unwrap();
        let gt = cloud.gt_normals().unwrap();
        let r = EvalReport::new(gt, gt, ReportMeta::default()).unwrap();
        assert_eq!(r.rmse_oriented, 0.0);
        assert!(r.pgp.iter().all(|p| p.1 == 1.0));
        assert_eq!(r.pgp_csv().lines().count(), 181);
        assert!(r.to_text().contains("rmse_oriented = 0\n"));
    }
}
