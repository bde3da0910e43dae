//! Point clouds: storage, normalization, file formats, neighbor search and
//! synthetic test shapes.

mod io;
mod kdtree;
pub(crate) mod synth;

pub use io::{
    load_cloud, load_normals, save_cloud, save_normals, write_ply, CloudFormat, PlyEncoding, PlyWriteOptions,
};
pub use kdtree::{Neighbor, SpatialIndex};
pub use synth::{corrupt, synth_shape, DensityPattern, ShapeKind};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Unit normals may drift this far from norm 1 before they are rejected.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Normalization applied to a cloud: `normalized = (original - centroid) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub centroid: Vec3,
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        centroid: Vector3::new(0.0, 0.0, 0.0),
        scale: 1.0,
    };

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.centroid) / self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.centroid
    }

    /// The transform equivalent to applying `self` first and then `next`.
    pub fn then(&self, next: &Transform) -> Transform {
        Transform {
            centroid: self.centroid + next.centroid * self.scale,
            scale: self.scale * next.scale,
        }
    }
}

impl Default for Transform {
    fn default() -> Self {
        Transform::IDENTITY
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    gt_normals: Option<Vec<Vec3>>,
    transform: Transform,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        Self::with_normals(points, None)
    }

    /// Builds a cloud, checking that every coordinate is finite and that
    /// optional normals are unit length and aligned with the points.
    pub fn with_normals(points: Vec<Vec3>, gt_normals: Option<Vec<Vec3>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        if let Some(normals) = &gt_normals {
            if normals.len() != points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} normals for {} points",
                    normals.len(),
                    points.len()
                )));
            }
            if let Some(i) = normals.iter().position(|n| !((n.norm() - 1.0).abs() <= UNIT_TOLERANCE)) {
                return Err(Error::InvalidInput(format!("normal {i} is not unit length")));
            }
        }
        Ok(PointCloud {
            points,
            gt_normals,
            transform: Transform::IDENTITY,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn gt_normals(&self) -> Option<&[Vec3]> {
        self.gt_normals.as_deref()
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Option<Vec<Vec3>>, Transform) {
        (self.points, self.gt_normals, self.transform)
    }

    pub(crate) fn from_parts_unchecked(points: Vec<Vec3>, gt_normals: Option<Vec<Vec3>>, transform: Transform) -> Self {
        PointCloud {
            points,
            gt_normals,
            transform,
        }
    }

    pub fn set_gt_normals(&mut self, normals: Vec<Vec3>) -> Result<()> {
        let checked = PointCloud::with_normals(self.points.clone(), Some(normals))?;
        self.gt_normals = checked.gt_normals;
        Ok(())
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Keeps the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        if indices.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            gt_normals: self
                .gt_normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            transform: self.transform,
        })
    }

    /// Positions mapped back to the coordinates the cloud was loaded in.
    pub fn original_points(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| self.transform.invert(p)).collect()
    }
}

/// Centers the cloud on its centroid and scales it uniformly so the farthest
/// point lands on the unit sphere. Normals are left untouched since a
/// translation plus positive uniform scale does not change them.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let centroid = cloud.centroid();
    let scale = cloud.points.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate("all points coincide; cannot normalize".into()));
    }
    let step = Transform { centroid, scale };
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| step.apply(p)).collect(),
        gt_normals: cloud.gt_normals.clone(),
        transform: cloud.transform.then(&step),
    })
}

/// The offset from the centroid of the `k` nearest cloud points of `x` to `x`.
pub fn mean_neighbor_vector(index: &SpatialIndex, cloud: &PointCloud, x: &Vec3, k: usize) -> Vec3 {
    x - neighbor_centroid(index, cloud, x, k)
}

pub fn neighbor_centroid(index: &SpatialIndex, cloud: &PointCloud, x: &Vec3, k: usize) -> Vec3 {
    let neighbors = index.knn(x, k);
    let sum: Vec3 = neighbors.iter().map(|n| cloud.points[n.index]).sum();
    sum / neighbors.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        assert!(PointCloud::new(vec![v(0.0, f64::NAN, 0.0)]).is_err());
        assert!(PointCloud::with_normals(vec![v(0.0, 0.0, 0.0)], Some(vec![v(0.0, 0.0, 2.0)])).is_err());
        assert!(PointCloud::with_normals(vec![v(0.0, 0.0, 0.0)], Some(vec![])).is_err());
    }

    #[test]
    fn normalize_two_points() {
        let cloud = PointCloud::new(vec![v(0.0, 0.0, 0.0), v(2.0, 0.0, 0.0)]).unwrap();
        let n = normalize_cloud(&cloud).unwrap();
        assert_eq!(n.points(), &[v(-1.0, 0.0, 0.0), v(1.0, 0.0, 0.0)]);
        assert_eq!(n.transform().centroid, v(1.0, 0.0, 0.0));
        assert_eq!(n.transform().scale, 1.0);
    }

    #[test]
    fn normalize_identical_points_fails() {
        let cloud = PointCloud::new(vec![v(1.0, 1.0, 1.0); 3]).unwrap();
        assert!(matches!(normalize_cloud(&cloud), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_twice_composes_transform() {
        let cloud = PointCloud::new(vec![v(3.0, 1.0, 0.0), v(5.0, 2.0, 7.0), v(-1.0, 0.5, 2.0)]).unwrap();
        let once = normalize_cloud(&cloud).unwrap();
        let twice = normalize_cloud(&once).unwrap();
        for (a, b) in cloud.points().iter().zip(twice.original_points()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn mean_neighbor_vector_symmetric_and_single() {
        let cloud = PointCloud::new(vec![v(0.0, 0.0, 0.0), v(2.0, 0.0, 0.0)]).unwrap();
        let index = SpatialIndex::build(cloud.points());
        assert_eq!(
            mean_neighbor_vector(&index, &cloud, &v(1.0, 0.0, 0.0), 2),
            Vec3::zeros()
        );

        let cloud = PointCloud::new(vec![v(0.0, 0.0, 0.0), v(5.0, 0.0, 0.0)]).unwrap();
        let index = SpatialIndex::build(cloud.points());
        assert_eq!(
            mean_neighbor_vector(&index, &cloud, &v(0.0, 0.0, 1.0), 1),
            v(0.0, 0.0, 1.0)
        );
    }
}
