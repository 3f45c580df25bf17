//! Unfolded networks over named parameter stores: the RLS-induced channel
//! estimator, the SCA-induced hybrid beamformer and a fully connected baseline.

pub mod blackbox;
pub mod cedun;
pub mod checkpoint;
pub mod hbdun;

pub use blackbox::{BlackboxLayout, BlackboxParams};
pub use cedun::{CedunLayout, CedunParams};
pub use checkpoint::{Checkpoint, CheckpointMeta, NetworkSection};
pub use hbdun::{HbdunLayout, HbdunMode, HbdunParams};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::CMatrix;

/// One named trainable block. Real blocks keep a zero imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: CMatrix,
    pub real: bool,
}

/// Ordered collection of parameter blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: CMatrix, real: bool) -> usize {
        self.blocks.push(ParamBlock {
            name: name.into(),
            value,
            real,
        });
        self.blocks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, i: usize) -> &CMatrix {
        &self.blocks[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut CMatrix {
        &mut self.blocks[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Total number of real scalars.
    pub fn scalar_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| if b.real { b.value.len() } else { 2 * b.value.len() })
            .sum()
    }

    /// Places every block on the tape, as a parameter if `trainable` accepts its name.
    pub fn leaves<'t>(&self, tape: &'t Tape, trainable: &dyn Fn(&str) -> bool) -> Vec<Var<'t>> {
        self.blocks
            .iter()
            .map(|b| {
                if trainable(&b.name) {
                    tape.param(b.value.clone(), b.real)
                } else {
                    tape.constant(b.value.clone())
                }
            })
            .collect()
    }

    /// Checks that `other` has the same names, shapes and kinds.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Schema(format!("{} blocks vs {}", self.len(), other.len())));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.real != b.real {
                return Err(Error::Schema(format!(
                    "block `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.is_finite())
    }
}

pub(crate) fn real_scalar(v: f64) -> CMatrix {
    CMatrix::from_real(1, 1, &[v])
}
