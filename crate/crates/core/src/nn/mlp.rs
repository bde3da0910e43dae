use std::f64::consts::PI;

use nalgebra::{Quaternion, UnitQuaternion};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::Parameterized;
use crate::error::{Error, Result};
use crate::pointcloud::Vec3;

/// Dense layer `y = W x + b` with `W` stored as (out, in).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-batched application: `X W^T + b`.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitKind {
    /// Starts as an approximate signed distance to a sphere.
    #[default]
    Geometric,
    /// He-normal weights, zero biases.
    Plain,
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(InitKind::Geometric),
            "plain" => Ok(InitKind::Plain),
            other => Err(Error::InvalidInput(format!("unknown init '{other}'"))),
        }
    }
}

impl std::fmt::Display for InitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitKind::Geometric => "geometric",
            InitKind::Plain => "plain",
        })
    }
}

/// Multilayer perceptron with ReLU on every layer but the last.
///
/// When `skip_at` is `Some(l)`, layer `l` receives the previous activation
/// with the raw network input concatenated after it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    skip_at: Option<usize>,
}

impl Mlp {
    /// Zero-initialized network. `widths` lists the output size of every layer.
    pub fn new(input_dim: usize, widths: &[usize], skip_at: Option<usize>) -> Result<Self> {
        if widths.is_empty() || input_dim == 0 || widths.contains(&0) {
            return Err(Error::InvalidInput("network needs at least one non-empty layer".into()));
        }
        if let Some(s) = skip_at {
            if s == 0 || s >= widths.len() {
                return Err(Error::InvalidInput(format!(
                    "skip layer {s} must be in 1..{}",
                    widths.len()
                )));
            }
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for (l, &w) in widths.iter().enumerate() {
            let fan_in = prev + if skip_at == Some(l) { input_dim } else { 0 };
            layers.push(Linear::zeros(fan_in, w));
            prev = w;
        }
        Ok(Mlp { layers, skip_at })
    }

    /// Builds a network from explicit layers, checking dimensions.
    pub fn from_layers(layers: Vec<Linear>, skip_at: Option<usize>) -> Result<Self> {
        let widths: Vec<usize> = layers.iter().map(Linear::output_dim).collect();
        let input_dim = layers.first().map(Linear::input_dim).unwrap_or(0);
        let shell = Mlp::new(input_dim, &widths, skip_at)?;
        for (l, (a, b)) in shell.layers.iter().zip(&layers).enumerate() {
            if a.weight.dim() != b.weight.dim() || b.bias.len() != b.weight.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: weight {:?}, expected {:?}",
                    b.weight.dim(),
                    a.weight.dim()
                )));
            }
        }
        Ok(Mlp { layers, skip_at })
    }

    /// The field architecture: eight layers, `width` hidden units, input
    /// re-injected at layer 4, scalar output.
    pub fn field(width: usize) -> Self {
        let mut widths = vec![width; 7];
        widths.push(1);
        Mlp::new(3, &widths, Some(4)).expect("valid field architecture")
    }

    /// He-initialized network (ReLU-friendly), deterministic under `seed`.
    pub fn random(input_dim: usize, widths: &[usize], skip_at: Option<usize>, seed: u64) -> Result<Self> {
        let mut net = Mlp::new(input_dim, widths, skip_at)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let std = (2.0 / layer.input_dim() as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            layer.weight.mapv_inplace(|_| dist.sample(&mut rng));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn skip_at(&self) -> Option<usize> {
        self.skip_at
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Row-batched inference.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            if self.skip_at == Some(l) {
                h = concatenate![Axis(1), h, x];
            }
            h = layer.apply(h.view());
            if l < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    /// Scalar field value at a 3D point.
    pub fn forward(&self, x: &Vec3) -> Result<f64> {
        if !x.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        if self.input_dim() != 3 || self.output_dim() != 1 {
            return Err(Error::ShapeMismatch("forward expects a 3 -> 1 network".into()));
        }
        let row = Array2::from_shape_vec((1, 3), vec![x.x, x.y, x.z]).unwrap();
        Ok(self.forward_batch(row.view())[[0, 0]])
    }

    /// Initializes this 3 -> 1 network in place. See [`init_geometric`].
    pub fn initialize(&mut self, kind: InitKind, radius: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match kind {
            InitKind::Plain => {
                for layer in &mut self.layers {
                    let dist = Normal::new(0.0, (2.0 / layer.input_dim() as f64).sqrt()).unwrap();
                    layer.weight.mapv_inplace(|_| dist.sample(&mut rng));
                    layer.bias.fill(0.0);
                }
            }
            InitKind::Geometric => self.initialize_radial(radius, &mut rng),
        }
    }

    /// First layer: antipodal pairs `relu(u.x)`, `relu(-u.x)` over a
    /// randomly rotated Fibonacci hemisphere, so each pair sums to `|u.x|`.
    /// Hidden layers pass their input through unchanged (exact on
    /// non-negative activations); the output averages the pairs, which
    /// approximates `|x|` and makes the field roughly `|x| - radius`.
    fn initialize_radial(&mut self, radius: f64, rng: &mut ChaCha8Rng) {
        let rotation = UnitQuaternion::from_quaternion(Quaternion::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ));
        let first_width = self.layers[0].output_dim();
        let pairs = (first_width / 2).max(1);
        let golden = PI * (1.0 + 5f64.sqrt());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
            let (out, fan_in) = layer.weight.dim();
            if l == 0 {
                for i in 0..pairs.min(out / 2) {
                    let t = i as f64 + 0.5;
                    let polar = (1.0 - t / pairs as f64).acos();
                    let azimuth = golden * t;
                    let u = rotation * Vec3::new(azimuth.cos() * polar.sin(), azimuth.sin() * polar.sin(), polar.cos());
                    for k in 0..3 {
                        layer.weight[[2 * i, k]] = u[k];
                        layer.weight[[2 * i + 1, k]] = -u[k];
                    }
                }
            } else if l == last {
                // every hidden unit carries one half of a pair
                let used = 2 * pairs.min(first_width / 2);
                for j in 0..used.min(fan_in) {
                    layer.weight[[0, j]] = 2.0 / pairs as f64;
                }
                layer.bias.fill(-radius);
            } else {
                for j in 0..out.min(fan_in) {
                    layer.weight[[j, j]] = 1.0;
                }
            }
        }
    }
}

/// Initializes a field network so that `f(x) ~ |x| - radius` and its
/// gradient points away from the origin.
pub fn init_geometric(net: &Mlp, radius: f64, seed: u64) -> Mlp {
    let mut out = net.clone();
    out.initialize(InitKind::Geometric, radius, seed);
    out
}

impl Parameterized for Mlp {
    fn param_blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    fn block_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| [format!("layer{l}.weight"), format!("layer{l}.bias")])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_affine_layer() {
        let net = Mlp::from_layers(
            vec![Linear {
                weight: array![[1.0, 1.0, 1.0]],
                bias: array![0.0],
            }],
            None,
        )
        .unwrap();
        assert_eq!(net.forward(&Vec3::new(1.0, 2.0, 3.0)).unwrap(), 6.0);
    }

    #[test]
    fn constant_network() {
        let mut net = Mlp::new(3, &[4, 4, 1], None).unwrap();
        net.layers_mut()[2].bias[0] = 0.5;
        for x in [Vec3::zeros(), Vec3::new(-3.0, 1.0, 9.0)] {
            assert_eq!(net.forward(&x).unwrap(), 0.5);
        }
    }

    #[test]
    fn rejects_non_finite_input_and_bad_shapes() {
        let net = Mlp::field(8);
        assert!(matches!(
            net.forward(&Vec3::new(f64::INFINITY, 0.0, 0.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(Mlp::new(3, &[4, 1], Some(0)).is_err());
        assert!(Mlp::new(3, &[], None).is_err());
        let bad = vec![Linear::zeros(3, 4), Linear::zeros(5, 1)];
        assert!(Mlp::from_layers(bad, None).is_err());
    }

    #[test]
    fn field_architecture_shapes() {
        let net = Mlp::field(16);
        assert_eq!(net.depth(), 8);
        assert_eq!(net.layers()[4].input_dim(), 16 + 3);
        // 3->16, three 16->16, 19->16, two 16->16, 16->1
        assert_eq!(net.num_parameters(), 64 + 3 * 272 + 320 + 2 * 272 + 17);
    }

    #[test]
    fn geometric_init_orders_center_below_sphere() {
        let net = init_geometric(&Mlp::field(64), 0.5, 11);
        let center = net.forward(&Vec3::zeros()).unwrap();
        assert!(center < 0.0);
        for d in [Vec3::x(), -Vec3::y(), Vec3::new(1.0, 1.0, 1.0).normalize()] {
            assert!(net.forward(&d).unwrap() > center);
        }
        assert_eq!(net, init_geometric(&Mlp::field(64), 0.5, 11));
    }
}
