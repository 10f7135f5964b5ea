//! The interface every factorization model exposes to the training harness.
//!
//! Parameters are grouped into two blocks: [`ParamGroup::Network`] (the
//! prediction function's weights, never penalized) and
//! [`ParamGroup::Features`] (per-row and per-column latent variables, carried
//! by the `lambda` penalty). Alternating optimization updates one group at a
//! time.

use std::fmt;
use std::str::FromStr;

use crate::data::Observation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Network,
    Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Nnmf,
    Pmf,
    BiasedMf,
    Ntn,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Nnmf => 1,
            ModelKind::Pmf => 2,
            ModelKind::BiasedMf => 3,
            ModelKind::Ntn => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Nnmf),
            2 => Some(ModelKind::Pmf),
            3 => Some(ModelKind::BiasedMf),
            4 => Some(ModelKind::Ntn),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Nnmf => "nnmf",
            ModelKind::Pmf => "pmf",
            ModelKind::BiasedMf => "biasedmf",
            ModelKind::Ntn => "ntn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nnmf" => Ok(ModelKind::Nnmf),
            "pmf" => Ok(ModelKind::Pmf),
            "biasedmf" | "biased_mf" | "biased-mf" => Ok(ModelKind::BiasedMf),
            "ntn" => Ok(ModelKind::Ntn),
            other => Err(Error::InvalidConfig(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Read-only view of one parameter array in row-major order.
#[derive(Debug)]
pub struct Block<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct BlockMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// A trainable factorization model.
///
/// Gradients are returned as a value of the model type itself, so every
/// gradient block lines up with the parameter block of the same name.
pub trait Model: Clone + Send + Sync {
    fn kind(&self) -> ModelKind;

    fn n_rows(&self) -> usize;

    fn n_cols(&self) -> usize;

    /// Prediction for one entry. Indices are checked.
    fn predict(&self, row: usize, col: usize) -> Result<f64>;

    /// Predictions for many entries; indices must be in range.
    fn predict_batch(&self, obs: &[Observation]) -> Vec<f64> {
        obs.iter()
            .map(|o| self.predict(o.row, o.col).expect("observation index in range"))
            .collect()
    }

    /// Gradient of the squared-error term only, plus the error sum itself.
    fn data_gradient(&self, obs: &[Observation]) -> (Self, f64);

    /// All parameter blocks in a fixed order.
    fn blocks(&self) -> Vec<Block<'_>>;

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>>;

    /// A model of identical shape with every parameter zero.
    fn zeros_like(&self) -> Self;

    fn check_index(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.n_rows() || col >= self.n_cols() {
            return Err(Error::IndexOutOfRange {
                row,
                col,
                n_rows: self.n_rows(),
                n_cols: self.n_cols(),
            });
        }
        Ok(())
    }

    fn check_observations(&self, obs: &[Observation]) -> Result<()> {
        obs.iter().try_for_each(|o| self.check_index(o.row, o.col))
    }

    /// `sum ||feature||^2` over the features group.
    fn feature_penalty(&self) -> f64 {
        self.blocks()
            .iter()
            .filter(|b| b.group == ParamGroup::Features)
            .map(|b| b.data.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    fn num_params(&self, group: ParamGroup) -> usize {
        self.blocks()
            .iter()
            .filter(|b| b.group == group)
            .map(|b| b.data.len())
            .sum()
    }
}

/// Sum of squared residuals, accumulated in observation order.
pub fn squared_error<M: Model>(model: &M, obs: &[Observation]) -> f64 {
    model
        .predict_batch(obs)
        .iter()
        .zip(obs)
        .map(|(p, o)| (p - o.value) * (p - o.value))
        .sum()
}

/// First non-finite entry over all blocks, reported as `block[index]`.
pub fn find_non_finite<M: Model>(model: &M) -> Option<String> {
    model.blocks().into_iter().find_map(|b| {
        b.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|i| format!("{}[{i}]", b.name))
    })
}

/// Copy every block of `src` into `dst`. Shapes must agree.
pub fn copy_group<M: Model>(dst: &mut M, src: &M, group: ParamGroup) {
    let src_blocks = src.blocks();
    for (d, s) in dst.blocks_mut().into_iter().zip(src_blocks) {
        debug_assert_eq!(d.name, s.name);
        if d.group == group {
            d.data.copy_from_slice(s.data);
        }
    }
}

/// Flattened copy of one group, for bit-level comparisons.
pub fn group_snapshot<M: Model>(model: &M, group: ParamGroup) -> Vec<f64> {
    model
        .blocks()
        .iter()
        .filter(|b| b.group == group)
        .flat_map(|b| b.data.iter().copied())
        .collect()
}
