//! Model selection by configuration: [`ModelConfig`] describes a model
//! family and its sizes, [`AnyModel`] holds any trained instance.

use crate::baselines::{BiasedMf, Ntn, Pmf};
use crate::data::Observation;
use crate::error::{Error, Result};
use crate::latent::{InitSpec, ModelDims, MlpNetwork, LatentState, Nnmf};
use crate::model::{Block, BlockMut, Model, ModelKind};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Nnmf {
        d: usize,
        d_prime: usize,
        k: usize,
        layer_dims: Vec<usize>,
    },
    Pmf {
        d: usize,
    },
    BiasedMf {
        d: usize,
    },
    Ntn {
        d: usize,
        hidden: usize,
        output_sigmoid: bool,
    },
}

impl ModelConfig {
    /// Three hidden layers of 50 sigmoid units over `D = 10`, `D' = 60`.
    pub fn nnmf_3hl() -> Self {
        ModelConfig::Nnmf {
            d: 10,
            d_prime: 60,
            k: 1,
            layer_dims: vec![80, 50, 50, 50, 1],
        }
    }

    /// Four hidden layers of 20 units over `D = 10`, `D' = 80`.
    pub fn nnmf_4hl() -> Self {
        ModelConfig::Nnmf {
            d: 10,
            d_prime: 80,
            k: 1,
            layer_dims: vec![100, 20, 20, 20, 20, 1],
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Nnmf { .. } => ModelKind::Nnmf,
            ModelConfig::Pmf { .. } => ModelKind::Pmf,
            ModelConfig::BiasedMf { .. } => ModelKind::BiasedMf,
            ModelConfig::Ntn { .. } => ModelKind::Ntn,
        }
    }

    /// Whether predictions pass through a logistic output, so targets must
    /// be mapped into `[0, 1]`.
    pub fn bounded_output(&self) -> bool {
        matches!(
            self,
            ModelConfig::Ntn {
                output_sigmoid: true,
                ..
            }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self {
            ModelConfig::Nnmf {
                d,
                d_prime,
                k,
                layer_dims,
            } => {
                if *k == 0 {
                    return bad("K must be >= 1".into());
                }
                if layer_dims.first() != Some(&(2 * d + d_prime)) || layer_dims.last() != Some(&1) {
                    return bad(format!(
                        "layer_dims {layer_dims:?} must run from 2D+D' = {} to 1",
                        2 * d + d_prime
                    ));
                }
                if layer_dims.contains(&0) {
                    return bad(format!("layer_dims {layer_dims:?} has a zero-width layer"));
                }
            }
            ModelConfig::Pmf { d } | ModelConfig::BiasedMf { d } => {
                if *d == 0 {
                    return bad("D must be >= 1".into());
                }
            }
            ModelConfig::Ntn { d, hidden, .. } => {
                if *d == 0 || *hidden == 0 {
                    return bad("NTN needs D >= 1 and H >= 1".into());
                }
            }
        }
        Ok(())
    }

    /// Randomly initialized model. `global_mean` seeds the BiasedMF global
    /// bias and is ignored otherwise.
    pub fn init(&self, n_rows: usize, n_cols: usize, init: &InitSpec, global_mean: f64) -> Result<AnyModel> {
        self.validate()?;
        Ok(match self {
            ModelConfig::Nnmf {
                d,
                d_prime,
                k,
                layer_dims,
            } => {
                let dims = ModelDims {
                    n_rows,
                    n_cols,
                    d: *d,
                    d_prime: *d_prime,
                    k: *k,
                };
                AnyModel::Nnmf(Nnmf::init(dims, layer_dims, init)?)
            }
            ModelConfig::Pmf { d } => AnyModel::Pmf(Pmf::init(n_rows, n_cols, *d, init.feature_std, init.seed)?),
            ModelConfig::BiasedMf { d } => AnyModel::BiasedMf(BiasedMf::init(
                n_rows,
                n_cols,
                *d,
                init.feature_std,
                global_mean,
                init.seed,
            )?),
            ModelConfig::Ntn {
                d,
                hidden,
                output_sigmoid,
            } => AnyModel::Ntn(Ntn::init(
                n_rows,
                n_cols,
                *d,
                *hidden,
                *output_sigmoid,
                init.feature_std,
                init.seed,
            )?),
        })
    }

    /// All-zero model of this shape.
    pub fn zeros(&self, n_rows: usize, n_cols: usize) -> Result<AnyModel> {
        self.validate()?;
        Ok(match self {
            ModelConfig::Nnmf {
                d,
                d_prime,
                k,
                layer_dims,
            } => {
                let dims = ModelDims {
                    n_rows,
                    n_cols,
                    d: *d,
                    d_prime: *d_prime,
                    k: *k,
                };
                AnyModel::Nnmf(Nnmf::new(MlpNetwork::zeros(layer_dims)?, LatentState::zeros(&dims))?)
            }
            ModelConfig::Pmf { d } => AnyModel::Pmf(Pmf::zeros(n_rows, n_cols, *d)),
            ModelConfig::BiasedMf { d } => AnyModel::BiasedMf(BiasedMf::zeros(n_rows, n_cols, *d)),
            ModelConfig::Ntn {
                d,
                hidden,
                output_sigmoid,
            } => AnyModel::Ntn(Ntn::zeros(n_rows, n_cols, *d, *hidden, *output_sigmoid)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Nnmf(Nnmf),
    Pmf(Pmf),
    BiasedMf(BiasedMf),
    Ntn(Ntn),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::Nnmf($m) => $body,
            AnyModel::Pmf($m) => $body,
            AnyModel::BiasedMf($m) => $body,
            AnyModel::Ntn($m) => $body,
        }
    };
}

macro_rules! dispatch_wrap {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::Nnmf($m) => AnyModel::Nnmf($body),
            AnyModel::Pmf($m) => AnyModel::Pmf($body),
            AnyModel::BiasedMf($m) => AnyModel::BiasedMf($body),
            AnyModel::Ntn($m) => AnyModel::Ntn($body),
        }
    };
}

impl AnyModel {
    /// The configuration that reproduces this model's shape.
    pub fn config(&self) -> ModelConfig {
        match self {
            AnyModel::Nnmf(m) => {
                let dims = m.dims();
                ModelConfig::Nnmf {
                    d: dims.d,
                    d_prime: dims.d_prime,
                    k: dims.k,
                    layer_dims: m.net.layer_dims.clone(),
                }
            }
            AnyModel::Pmf(m) => ModelConfig::Pmf { d: m.rank() },
            AnyModel::BiasedMf(m) => ModelConfig::BiasedMf { d: m.pmf.rank() },
            AnyModel::Ntn(m) => ModelConfig::Ntn {
                d: m.rank(),
                hidden: m.hidden(),
                output_sigmoid: m.output_sigmoid,
            },
        }
    }
}

impl Model for AnyModel {
    fn kind(&self) -> ModelKind {
        dispatch!(self, m => m.kind())
    }

    fn n_rows(&self) -> usize {
        dispatch!(self, m => m.n_rows())
    }

    fn n_cols(&self) -> usize {
        dispatch!(self, m => m.n_cols())
    }

    fn predict(&self, row: usize, col: usize) -> Result<f64> {
        dispatch!(self, m => m.predict(row, col))
    }

    fn predict_batch(&self, obs: &[Observation]) -> Vec<f64> {
        dispatch!(self, m => m.predict_batch(obs))
    }

    fn data_gradient(&self, obs: &[Observation]) -> (Self, f64) {
        match self {
            AnyModel::Nnmf(m) => {
                let (g, f) = m.data_gradient(obs);
                (AnyModel::Nnmf(g), f)
            }
            AnyModel::Pmf(m) => {
                let (g, f) = m.data_gradient(obs);
                (AnyModel::Pmf(g), f)
            }
            AnyModel::BiasedMf(m) => {
                let (g, f) = m.data_gradient(obs);
                (AnyModel::BiasedMf(g), f)
            }
            AnyModel::Ntn(m) => {
                let (g, f) = m.data_gradient(obs);
                (AnyModel::Ntn(g), f)
            }
        }
    }

    fn blocks(&self) -> Vec<Block<'_>> {
        dispatch!(self, m => m.blocks())
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        dispatch!(self, m => m.blocks_mut())
    }

    fn zeros_like(&self) -> Self {
        dispatch_wrap!(self, m => m.zeros_like())
    }

    fn feature_penalty(&self) -> f64 {
        dispatch!(self, m => m.feature_penalty())
    }
}
