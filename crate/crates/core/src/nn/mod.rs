//! Small dense-network engine.
//!
//! `Mlp` is the only layer type. The NGL field needs the gradient of its
//! output with respect to the input and then parameter gradients of losses
//! built from that input gradient; `dual` does both with a batched tape.
//! `graph` is a reverse-mode tape over matrices used by the patch network.

mod adam;
mod checkpoint;
mod dual;
pub mod graph;
mod mlp;

pub use adam::{Adam, AdamConfig};
#[cfg(test)]
pub(crate) use checkpoint::{decode, encode};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpointable};
pub use dual::{loss_gradients, normalize_backward, normalize_guarded, FieldEval, PointLoss, Tape, NORM_GUARD};
pub use mlp::{init_geometric, InitKind, Linear, Mlp};

use crate::error::{Error, Result};

/// Anything with trainable parameters laid out as flat `f64` blocks.
pub trait Parameterized {
    fn param_blocks(&self) -> Vec<&[f64]>;
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]>;
    fn block_names(&self) -> Vec<String>;

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            blocks: self.param_blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    fn flat_parameters(&self) -> Vec<f64> {
        self.param_blocks().concat()
    }
}

/// Parameter gradients, one flat block per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.concat()
    }

    pub(crate) fn check_matches(&self, names: &[String], sizes: &[usize]) -> Result<()> {
        if self.blocks.len() != sizes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient blocks for {} parameter blocks",
                self.blocks.len(),
                sizes.len()
            )));
        }
        for ((g, &n), name) in self.blocks.iter().zip(sizes).zip(names) {
            if g.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name} has {} entries, expected {n}",
                    g.len()
                )));
            }
        }
        Ok(())
    }
}
