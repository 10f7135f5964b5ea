//! The penalized squared-error objective, its exact gradient, and a
//! central-difference oracle used to check that gradient.
//!
//! ```text
//! objective = sum_{(n,m) in J} (X_nm - Xhat_nm)^2 + lambda * sum ||feature||^2
//! ```
//!
//! Only the features group is penalized; network weights are not.

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::model::{find_non_finite, squared_error, Model, ParamGroup};

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

pub fn objective<M: Model>(model: &M, obs: &[Observation], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    model.check_observations(obs)?;
    Ok(squared_error(model, obs) + lambda * model.feature_penalty())
}

/// Exact gradient of [`objective`] and the objective value.
///
/// Residuals contribute `2 (Xhat - X) dXhat/dparam`, accumulated in
/// observation order; each feature additionally receives `2 lambda feature`.
pub fn backward<M: Model>(model: &M, obs: &[Observation], lambda: f64) -> Result<(M, f64)> {
    check_lambda(lambda)?;
    model.check_observations(obs)?;
    let (mut grad, sse) = model.data_gradient(obs);
    if lambda > 0.0 {
        for (g, p) in grad.blocks_mut().into_iter().zip(model.blocks()) {
            if g.group == ParamGroup::Features {
                for (gi, pi) in g.data.iter_mut().zip(p.data) {
                    *gi += 2.0 * lambda * pi;
                }
            }
        }
    }
    let value = sse + lambda * model.feature_penalty();
    if let Some(location) = find_non_finite(&grad) {
        return Err(Error::NonFinite {
            location: format!("gradient {location}"),
        });
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            location: "objective".into(),
        });
    }
    Ok((grad, value))
}

/// Central differences `(f(p + h) - f(p - h)) / 2h` for every scalar
/// parameter of the model.
///
/// The difference is accumulated term by term,
/// `sum_j (r+_j - r-_j)(r+_j + r-_j) + lambda ((p + h)^2 - (p - h)^2)`,
/// so terms that do not depend on the probed parameter cancel exactly
/// instead of contributing rounding error.
pub fn finite_diff_gradient<M: Model>(
    model: &M,
    obs: &[Observation],
    lambda: f64,
    h: f64,
) -> Result<M> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    check_lambda(lambda)?;
    model.check_observations(obs)?;
    let residuals = |m: &M| -> Vec<f64> {
        m.predict_batch(obs)
            .iter()
            .zip(obs)
            .map(|(p, o)| p - o.value)
            .collect()
    };
    let mut grad = model.zeros_like();
    let mut probe = model.clone();
    let groups: Vec<ParamGroup> = model.blocks().iter().map(|b| b.group).collect();
    for (b, group) in groups.into_iter().enumerate() {
        let len = model.blocks()[b].data.len();
        for i in 0..len {
            let orig = probe.blocks()[b].data[i];
            probe.blocks_mut()[b].data[i] = orig + h;
            let plus = residuals(&probe);
            probe.blocks_mut()[b].data[i] = orig - h;
            let minus = residuals(&probe);
            probe.blocks_mut()[b].data[i] = orig;
            let mut diff: f64 = plus
                .iter()
                .zip(&minus)
                .map(|(a, b)| (a - b) * (a + b))
                .sum();
            if group == ParamGroup::Features {
                diff += lambda * ((orig + h) * (orig + h) - (orig - h) * (orig - h));
            }
            grad.blocks_mut()[b].data[i] = diff / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Disagreement between two gradients on one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    /// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
    pub max_rel_error: f64,
    /// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|, floor)`: the error
    /// relative to the block's own scale.
    pub block_rel_error: f64,
}

pub fn relative_errors<M: Model>(analytic: &M, numeric: &M, floor: f64) -> Vec<BlockError> {
    analytic
        .blocks()
        .into_iter()
        .zip(numeric.blocks())
        .map(|(a, n)| {
            let pairs = || a.data.iter().zip(n.data);
            let max_rel_error = pairs()
                .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
                .fold(0.0, f64::max);
            let max_abs_error = pairs().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let scale = pairs()
                .map(|(x, y)| x.abs().max(y.abs()))
                .fold(floor, f64::max);
            BlockError {
                name: a.name,
                max_rel_error,
                block_rel_error: max_abs_error / scale,
            }
        })
        .collect()
}

/// Runs [`backward`] against [`finite_diff_gradient`] and reports per-block
/// relative errors.
pub fn gradient_check<M: Model>(
    model: &M,
    obs: &[Observation],
    lambda: f64,
    h: f64,
) -> Result<Vec<BlockError>> {
    let (analytic, _) = backward(model, obs, lambda)?;
    let numeric = finite_diff_gradient(model, obs, lambda, h)?;
    Ok(relative_errors(&analytic, &numeric, 1e-8))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;
    use crate::latent::{InitSpec, LatentState, MlpNetwork, ModelDims, Nnmf};
    use crate::model::{Block, BlockMut, ModelKind};

    /// `f(p) = p^2` expressed as a one-parameter model with one observation
    /// at target 0.
    #[derive(Clone)]
    struct Scalar(Vec<f64>);

    impl Model for Scalar {
        fn kind(&self) -> ModelKind {
            ModelKind::Pmf
        }
        fn n_rows(&self) -> usize {
            1
        }
        fn n_cols(&self) -> usize {
            1
        }
        fn predict(&self, _: usize, _: usize) -> Result<f64> {
            Ok(self.0[0])
        }
        fn data_gradient(&self, obs: &[Observation]) -> (Self, f64) {
            let r = self.0[0] - obs[0].value;
            (Scalar(vec![2.0 * r]), r * r)
        }
        fn blocks(&self) -> Vec<Block<'_>> {
            vec![Block {
                name: "p".into(),
                group: ParamGroup::Network,
                shape: vec![1],
                data: &self.0,
            }]
        }
        fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
            vec![BlockMut {
                name: "p".into(),
                group: ParamGroup::Network,
                shape: vec![1],
                data: &mut self.0,
            }]
        }
        fn zeros_like(&self) -> Self {
            Scalar(vec![0.0])
        }
    }

    #[test]
    fn central_difference_exact_on_quadratic() {
        let obs = [Observation::new(0, 0, 0.0)];
        for h in [0.5, 0.25, 1.0] {
            let g = finite_diff_gradient(&Scalar(vec![3.0]), &obs, 0.0, h).unwrap();
            assert_eq!(g.0[0], 6.0);
        }
        assert!(finite_diff_gradient(&Scalar(vec![3.0]), &obs, 0.0, 0.0).is_err());
    }

    fn hand_instance() -> Nnmf {
        // One-layer network with weights chosen so the prediction is 1.5.
        let mut net = MlpNetwork::zeros(&[3, 1]).unwrap();
        net.biases[0][0] = 1.5;
        let state = LatentState {
            u: array![[1.0]],
            v: array![[2.0]],
            u_prime: array![[[3.0]]],
            v_prime: array![[[0.0]]],
        };
        Nnmf::new(net, state).unwrap()
    }

    #[test]
    fn objective_by_hand() {
        let model = hand_instance();
        let obs = [Observation::new(0, 0, 2.0)];
        assert_abs_diff_eq!(objective(&model, &obs, 1.0).unwrap(), 14.25);
        assert_abs_diff_eq!(objective(&model, &obs, 0.0).unwrap(), 0.25);
        let perfect = [Observation::new(0, 0, 1.5)];
        assert_eq!(objective(&model, &perfect, 0.0).unwrap(), 0.0);
        assert!(objective(&model, &obs, -1.0).is_err());
    }

    #[test]
    fn regularizer_only_gradient_for_empty_data() {
        let model = Nnmf::init(
            ModelDims {
                n_rows: 3,
                n_cols: 2,
                d: 2,
                d_prime: 2,
                k: 1,
            },
            &[6, 3, 1],
            &InitSpec::default(),
        )
        .unwrap();
        let (g, value) = backward(&model, &[], 0.7).unwrap();
        assert_abs_diff_eq!(value, 0.7 * model.feature_penalty(), epsilon = 1e-15);
        for (gb, pb) in g.blocks().iter().zip(model.blocks()) {
            for (x, p) in gb.data.iter().zip(pb.data) {
                match gb.group {
                    ParamGroup::Network => assert_eq!(*x, 0.0),
                    ParamGroup::Features => assert_eq!(*x, 2.0 * 0.7 * p),
                }
            }
        }
    }

    #[test]
    fn perfect_fit_is_stationary() {
        let model = hand_instance();
        let obs = [Observation::new(0, 0, 1.5)];
        let (g, value) = backward(&model, &obs, 0.0).unwrap();
        assert_eq!(value, 0.0);
        assert!(g.blocks().iter().all(|b| b.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut model = hand_instance();
        model.net.biases[0][0] = f64::MAX;
        let obs = [Observation::new(0, 0, -f64::MAX)];
        assert!(matches!(
            backward(&model, &obs, 0.0),
            Err(Error::NonFinite { .. })
        ));
    }
}
