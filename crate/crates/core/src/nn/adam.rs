use super::{Gradients, Parameterized};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Fails without touching anything if a gradient
    /// block has the wrong size or holds a non-finite value.
    pub fn step<P: Parameterized + ?Sized>(&mut self, params: &mut P, grads: &Gradients) -> Result<()> {
        let names = params.block_names();
        let sizes: Vec<usize> = params.param_blocks().iter().map(|b| b.len()).collect();
        grads.check_matches(&names, &sizes)?;
        for (g, name) in grads.blocks.iter().zip(&names) {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        if self.first.is_empty() {
            self.first = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.second = self.first.clone();
        } else if self.first.iter().map(Vec::len).ne(sizes.iter().copied()) {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (b, block) in params.param_blocks_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.first[b], &mut self.second[b], &grads.blocks[b]);
            for i in 0..block.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                block[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Vector(Vec<f64>);

    impl Parameterized for Vector {
        fn param_blocks(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
        fn block_names(&self) -> Vec<String> {
            vec!["v".into()]
        }
    }

    fn grads(v: Vec<f64>) -> Gradients {
        Gradients { blocks: vec![v] }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Vector(vec![1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            opt.step(&mut p, &grads(vec![0.0, 0.0])).unwrap();
        }
        assert_eq!(p.0, vec![1.0, -2.0]);
    }

    #[test]
    fn moves_against_constant_gradient() {
        let mut p = Vector(vec![0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..50 {
            opt.step(&mut p, &grads(vec![3.0, -0.5])).unwrap();
        }
        assert!(p.0[0] < 0.0 && p.0[1] > 0.0);
    }

    #[test]
    fn quadratic_bowl_decreases() {
        let target = [0.3, -0.7, 1.1];
        let loss = |p: &[f64]| p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut p = Vector(vec![2.0, 2.0, -2.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.01,
            ..Default::default()
        });
        let mut prev = loss(&p.0);
        for _ in 0..100 {
            let g = p.0.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.step(&mut p, &grads(g)).unwrap();
            let now = loss(&p.0);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = Vector(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut p, &grads(vec![f64::NAN])).unwrap_err();
        assert!(err.to_string().contains("gradient of v"));
        assert!(opt.step(&mut p, &grads(vec![1.0, 2.0])).is_err());
        assert_eq!(p.0, vec![1.0]);
    }
}
