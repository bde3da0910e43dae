//! Analytic test shapes and PCPNet-style corruptions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

pub const TORUS_MAJOR: f64 = 0.7;
pub const TORUS_MINOR: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    /// Unit sphere at the origin.
    Sphere,
    /// Axis-aligned cube of side 1 centered at the origin.
    Cube,
    /// Torus around the z axis, major radius 0.7, tube radius 0.25.
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube" => Ok(ShapeKind::Cube),
            "torus" => Ok(ShapeKind::Torus),
            other => Err(Error::InvalidInput(format!(
                "unknown shape kind '{other}' (expected sphere, cube or torus)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DensityPattern {
    #[default]
    None,
    /// Keep probability rises linearly from 0.1 at min x to 1.0 at max x.
    Gradient,
}

impl FromStr for DensityPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DensityPattern::None),
            "gradient" => Ok(DensityPattern::Gradient),
            other => Err(Error::InvalidInput(format!("unknown density pattern '{other}'"))),
        }
    }
}

impl fmt::Display for DensityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityPattern::None => "none",
            DensityPattern::Gradient => "gradient",
        })
    }
}

fn gaussian3(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Uniform direction on the unit sphere.
pub(crate) fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let g = gaussian3(rng);
        let n = g.norm();
        if n > 1e-12 {
            return g / n;
        }
    }
}

/// Samples `n` points uniformly by area on the surface, with outward normals.
pub fn synth_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, nrm) = match kind {
            ShapeKind::Sphere => {
                let u = random_unit(&mut rng);
                (u, u)
            }
            ShapeKind::Cube => sample_cube(&mut rng),
            ShapeKind::Torus => sample_torus(&mut rng),
        };
        points.push(p);
        normals.push(nrm);
    }
    PointCloud::with_normals(points, Some(normals))
}

fn sample_cube(rng: &mut impl Rng) -> (Vec3, Vec3) {
    let face = rng.gen_range(0..6usize);
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut p = Vec3::new(
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
    );
    p[axis] = 0.5 * sign;
    let mut n = Vec3::zeros();
    n[axis] = sign;
    (p, n)
}

fn sample_torus(rng: &mut impl Rng) -> (Vec3, Vec3) {
    // area element is proportional to (R + r cos(phi)), so reject on phi
    loop {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let phi = rng.gen_range(0.0..2.0 * PI);
        let accept: f64 = rng.gen_range(0.0..1.0);
        if accept * (TORUS_MAJOR + TORUS_MINOR) > TORUS_MAJOR + TORUS_MINOR * phi.cos() {
            continue;
        }
        let n = Vec3::new(theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin());
        let ring = Vec3::new(theta.cos(), theta.sin(), 0.0) * TORUS_MAJOR;
        return (ring + n * TORUS_MINOR, n);
    }
}

/// Adds Gaussian noise with std `noise_pct` times the bounding-box diagonal
/// and optionally thins the cloud with a density pattern. Ground-truth normals
/// of surviving points are kept as they were.
pub fn corrupt(cloud: &PointCloud, noise_pct: f64, density: DensityPattern, seed: u64) -> Result<PointCloud> {
    if !(noise_pct >= 0.0) || !noise_pct.is_finite() {
        return Err(Error::InvalidInput(format!("noise_pct must be >= 0, got {noise_pct}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = match density {
        DensityPattern::None => cloud.clone(),
        DensityPattern::Gradient => {
            let (lo, hi) = cloud.bounding_box();
            let span = hi.x - lo.x;
            let keep: Vec<usize> = cloud
                .points()
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    let t = if span > 0.0 { (p.x - lo.x) / span } else { 1.0 };
                    rng.gen::<f64>() < 0.1 + 0.9 * t
                })
                .map(|(i, _)| i)
                .collect();
            cloud.select(&keep)?
        }
    };
    if noise_pct == 0.0 {
        return Ok(kept);
    }
    let std = noise_pct * cloud.bbox_diagonal();
    let normal = StandardNormal;
    let (points, normals, transform) = kept.into_parts();
    let noisy = points
        .into_iter()
        .map(|p| {
            let e: Vec3 = Vec3::from_fn(|_, _| normal.sample(&mut rng));
            p + e * std
        })
        .collect();
    Ok(PointCloud::from_parts_unchecked(noisy, normals, transform))
}
