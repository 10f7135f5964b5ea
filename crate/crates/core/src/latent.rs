//! Neural network matrix factorization: latent row/column features feeding a
//! feed-forward network that predicts each array entry.
//!
//! The network input for entry `(n, m)` is `[U_n, V_m, p]` where
//! `p_d = sum_k U'_n[d, k] * V'_m[d, k]`, so the network sees `2D + D'`
//! values. With `K = 1` the last `D'` inputs are the element-wise product of
//! the two `D'`-vectors.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::model::{Block, BlockMut, Model, ModelKind, ParamGroup};

/// Observations processed per dense forward/backward pass.
pub(crate) const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Sigmoid {
            z.mapv_inplace(sigmoid);
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Sizes of the arrays and latent features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_rows: usize,
    pub n_cols: usize,
    pub d: usize,
    pub d_prime: usize,
    pub k: usize,
}

impl ModelDims {
    pub fn input_width(&self) -> usize {
        2 * self.d + self.d_prime
    }
}

/// Per-row and per-column latent features.
///
/// `u` is `N x D`, `v` is `M x D`, `u_prime` is `N x D' x K` and `v_prime` is
/// `M x D' x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub u_prime: Array3<f64>,
    pub v_prime: Array3<f64>,
}

impl LatentState {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            u: Array2::zeros((dims.n_rows, dims.d)),
            v: Array2::zeros((dims.n_cols, dims.d)),
            u_prime: Array3::zeros((dims.n_rows, dims.d_prime, dims.k)),
            v_prime: Array3::zeros((dims.n_cols, dims.d_prime, dims.k)),
        }
    }

    pub fn dims(&self) -> ModelDims {
        let (n_rows, d) = self.u.dim();
        let (_, d_prime, k) = self.u_prime.dim();
        ModelDims {
            n_rows,
            n_cols: self.v.nrows(),
            d,
            d_prime,
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.v.ncols() != dims.d
            || self.u_prime.dim().0 != dims.n_rows
            || self.v_prime.dim() != (dims.n_cols, dims.d_prime, dims.k)
        {
            return Err(Error::Dimension(format!(
                "inconsistent latent shapes u={:?} v={:?} u'={:?} v'={:?}",
                self.u.dim(),
                self.v.dim(),
                self.u_prime.dim(),
                self.v_prime.dim()
            )));
        }
        let finite = self
            .u
            .iter()
            .chain(self.v.iter())
            .chain(self.u_prime.iter())
            .chain(self.v_prime.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                location: "latent state".into(),
            });
        }
        Ok(())
    }
}

/// Fully connected network `f_theta`. `weights[l]` maps layer `l` to layer
/// `l + 1` and has shape `(layer_dims[l + 1], layer_dims[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpNetwork {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Dimension(format!(
                "layer_dims {layer_dims:?} need at least two positive sizes"
            )));
        }
        if *layer_dims.last().unwrap() != 1 {
            return Err(Error::Dimension(format!(
                "layer_dims {layer_dims:?} must end with a single output unit"
            )));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation: Activation::Sigmoid,
            output_activation: Activation::Identity,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> usize {
        self.layer_dims[0]
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// Outputs of every layer for a batch of inputs (one row per example);
    /// element 0 is the input itself.
    pub fn forward_all(&self, input: Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(input);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            self.activation(l).apply(&mut z);
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, input: ArrayView1<f64>) -> Result<f64> {
        if input.len() != self.input_width() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                input.len()
            )));
        }
        let x = input.to_owned().insert_axis(Axis(0));
        Ok(self.forward_all(x).last().unwrap()[[0, 0]])
    }

    /// Gradients of `sum_j weight_j * f(x_j)` with respect to every weight,
    /// bias and input, given the cached activations of a batch.
    /// Accumulates into `grad` and returns the input gradient.
    fn backward_into(
        &self,
        acts: &[Array2<f64>],
        output_weights: Array1<f64>,
        grad: &mut MlpNetwork,
    ) -> Array2<f64> {
        let layers = self.num_layers();
        let out = &acts[layers];
        let mut delta = output_weights.insert_axis(Axis(1));
        let out_act = self.output_activation;
        delta.zip_mut_with(out, |d, &y| *d *= out_act.derivative_from_output(y));
        for l in (0..layers).rev() {
            grad.weights[l] += &delta.t().dot(&acts[l]);
            grad.biases[l] += &delta.sum_axis(Axis(0));
            let mut back = delta.dot(&self.weights[l]);
            if l == 0 {
                return back;
            }
            let act = self.hidden_activation;
            back.zip_mut_with(&acts[l], |d, &y| *d *= act.derivative_from_output(y));
            delta = back;
        }
        unreachable!("network has at least one layer")
    }
}

/// Weight and feature initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    /// Standard deviation of the zero-mean Gaussian latent features.
    pub feature_std: f64,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            feature_std: 0.1,
            seed: 0,
        }
    }
}

/// Half-width of the uniform weight initialization for a layer:
/// `4 * sqrt(6) / sqrt(n_in + n_out)`.
pub fn weight_init_bound(n_in: usize, n_out: usize) -> f64 {
    4.0 * 6f64.sqrt() / ((n_in + n_out) as f64).sqrt()
}

/// Layer sizes for `hidden` units per hidden layer on top of the NNMF input.
pub fn layer_dims_for(d: usize, d_prime: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(2 * d + d_prime);
    dims.extend_from_slice(hidden);
    dims.push(1);
    dims
}

pub(crate) fn fill_normal(rng: &mut ChaCha8Rng, data: &mut [f64], std: f64) -> Result<()> {
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::InvalidConfig(format!("feature_std {std}: {e}")))?;
    data.iter_mut().for_each(|x| *x = normal.sample(rng));
    Ok(())
}

pub(crate) fn fill_uniform(rng: &mut ChaCha8Rng, data: &mut [f64], bound: f64) -> Result<()> {
    let uniform = Uniform::new_inclusive(-bound, bound)
        .map_err(|e| Error::InvalidConfig(format!("uniform bound {bound}: {e}")))?;
    data.iter_mut().for_each(|x| *x = uniform.sample(rng));
    Ok(())
}

/// Random network and latent features. Weights are uniform within
/// [`weight_init_bound`], biases zero and features Gaussian.
pub fn init_model(
    dims: ModelDims,
    layer_dims: &[usize],
    spec: &InitSpec,
) -> Result<(MlpNetwork, LatentState)> {
    if !(spec.feature_std > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "feature_std must be positive, got {}",
            spec.feature_std
        )));
    }
    if dims.k == 0 || dims.n_rows == 0 || dims.n_cols == 0 {
        return Err(Error::Dimension(format!("degenerate dims {dims:?}")));
    }
    if layer_dims.first() != Some(&dims.input_width()) {
        return Err(Error::Dimension(format!(
            "layer_dims {layer_dims:?} must start at 2D+D' = {}",
            dims.input_width()
        )));
    }
    let mut net = MlpNetwork::zeros(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for w in &mut net.weights {
        let (n_out, n_in) = w.dim();
        let bound = weight_init_bound(n_in, n_out);
        fill_uniform(&mut rng, w.as_slice_mut().unwrap(), bound)?;
    }
    let mut state = LatentState::zeros(&dims);
    for block in [
        state.u.as_slice_mut().unwrap(),
        state.v.as_slice_mut().unwrap(),
        state.u_prime.as_slice_mut().unwrap(),
        state.v_prime.as_slice_mut().unwrap(),
    ] {
        fill_normal(&mut rng, block, spec.feature_std)?;
    }
    Ok((net, state))
}

/// Network input for one entry: `[u_n, v_m, p]` with `p_d` the inner product
/// of row `d` of `u_prime_n` and row `d` of `v_prime_m`.
pub fn build_input(
    u_n: ArrayView1<f64>,
    v_m: ArrayView1<f64>,
    u_prime_n: ArrayView2<f64>,
    v_prime_m: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    if u_n.len() != v_m.len() || u_prime_n.dim() != v_prime_m.dim() {
        return Err(Error::Dimension(format!(
            "u {} vs v {}, u' {:?} vs v' {:?}",
            u_n.len(),
            v_m.len(),
            u_prime_n.dim(),
            v_prime_m.dim()
        )));
    }
    let d = u_n.len();
    let d_prime = u_prime_n.nrows();
    let mut x = Array1::zeros(2 * d + d_prime);
    x.slice_mut(s![..d]).assign(&u_n);
    x.slice_mut(s![d..2 * d]).assign(&v_m);
    for (i, (a, b)) in u_prime_n.outer_iter().zip(v_prime_m.outer_iter()).enumerate() {
        x[2 * d + i] = a.dot(&b);
    }
    Ok(x)
}

/// Network weights plus latent features.
#[derive(Debug, Clone, PartialEq)]
pub struct Nnmf {
    pub net: MlpNetwork,
    pub state: LatentState,
}

impl Nnmf {
    pub fn new(net: MlpNetwork, state: LatentState) -> Result<Self> {
        state.validate()?;
        let dims = state.dims();
        if net.input_width() != dims.input_width() {
            return Err(Error::Dimension(format!(
                "network input {} does not match 2D+D' = {}",
                net.input_width(),
                dims.input_width()
            )));
        }
        for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
            let expect = (net.layer_dims[l + 1], net.layer_dims[l]);
            if w.dim() != expect || b.len() != expect.0 {
                return Err(Error::Dimension(format!(
                    "layer {l} weight {:?} bias {} do not chain with {:?}",
                    w.dim(),
                    b.len(),
                    net.layer_dims
                )));
            }
        }
        Ok(Self { net, state })
    }

    pub fn init(dims: ModelDims, layer_dims: &[usize], spec: &InitSpec) -> Result<Self> {
        let (net, state) = init_model(dims, layer_dims, spec)?;
        Self::new(net, state)
    }

    pub fn dims(&self) -> ModelDims {
        self.state.dims()
    }

    fn input_matrix(&self, obs: &[Observation]) -> Array2<f64> {
        let ModelDims { d, d_prime, k, .. } = self.dims();
        let width = 2 * d + d_prime;
        let u = self.state.u.as_slice().unwrap();
        let v = self.state.v.as_slice().unwrap();
        let up = self.state.u_prime.as_slice().unwrap();
        let vp = self.state.v_prime.as_slice().unwrap();
        let mut x = Array2::zeros((obs.len(), width));
        for (row, o) in x.outer_iter_mut().zip(obs) {
            let row = row.into_slice().unwrap();
            row[..d].copy_from_slice(&u[o.row * d..(o.row + 1) * d]);
            row[d..2 * d].copy_from_slice(&v[o.col * d..(o.col + 1) * d]);
            let ub = o.row * d_prime * k;
            let vb = o.col * d_prime * k;
            for (i, slot) in row[2 * d..].iter_mut().enumerate() {
                let a = &up[ub + i * k..ub + (i + 1) * k];
                let b = &vp[vb + i * k..vb + (i + 1) * k];
                *slot = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        x
    }

    /// Route input gradients back onto the latent features of each entry.
    fn scatter_input_grad(&self, obs: &[Observation], dx: &Array2<f64>, grad: &mut LatentState) {
        let ModelDims { d, d_prime, k, .. } = self.dims();
        let up = self.state.u_prime.as_slice().unwrap();
        let vp = self.state.v_prime.as_slice().unwrap();
        let gu = grad.u.as_slice_mut().unwrap();
        let gv = grad.v.as_slice_mut().unwrap();
        let gup = grad.u_prime.as_slice_mut().unwrap();
        let gvp = grad.v_prime.as_slice_mut().unwrap();
        for (row, o) in dx.outer_iter().zip(obs) {
            let row = row.to_slice().unwrap();
            for (g, x) in gu[o.row * d..(o.row + 1) * d].iter_mut().zip(&row[..d]) {
                *g += x;
            }
            for (g, x) in gv[o.col * d..(o.col + 1) * d].iter_mut().zip(&row[d..2 * d]) {
                *g += x;
            }
            let ub = o.row * d_prime * k;
            let vb = o.col * d_prime * k;
            for (i, &g) in row[2 * d..].iter().enumerate() {
                for j in 0..k {
                    gup[ub + i * k + j] += g * vp[vb + i * k + j];
                    gvp[vb + i * k + j] += g * up[ub + i * k + j];
                }
            }
        }
    }
}

/// `f_theta(build_input(U_n, V_m, U'_n, V'_m))`.
pub fn predict(net: &MlpNetwork, state: &LatentState, n: usize, m: usize) -> Result<f64> {
    let dims = state.dims();
    if n >= dims.n_rows || m >= dims.n_cols {
        return Err(Error::IndexOutOfRange {
            row: n,
            col: m,
            n_rows: dims.n_rows,
            n_cols: dims.n_cols,
        });
    }
    let x = build_input(
        state.u.row(n),
        state.v.row(m),
        state.u_prime.index_axis(Axis(0), n),
        state.v_prime.index_axis(Axis(0), m),
    )?;
    net.forward(x.view())
}

impl Model for Nnmf {
    fn kind(&self) -> ModelKind {
        ModelKind::Nnmf
    }

    fn n_rows(&self) -> usize {
        self.state.u.nrows()
    }

    fn n_cols(&self) -> usize {
        self.state.v.nrows()
    }

    fn predict(&self, row: usize, col: usize) -> Result<f64> {
        predict(&self.net, &self.state, row, col)
    }

    fn predict_batch(&self, obs: &[Observation]) -> Vec<f64> {
        let mut out = Vec::with_capacity(obs.len());
        for chunk in obs.chunks(CHUNK) {
            let acts = self.net.forward_all(self.input_matrix(chunk));
            out.extend(acts.last().unwrap().column(0).iter().copied());
        }
        out
    }

    fn data_gradient(&self, obs: &[Observation]) -> (Self, f64) {
        let mut grad = self.zeros_like();
        let mut sse = 0.0;
        for chunk in obs.chunks(CHUNK) {
            let acts = self.net.forward_all(self.input_matrix(chunk));
            let preds = acts.last().unwrap().column(0);
            let mut dpred = Array1::zeros(chunk.len());
            for ((g, p), o) in dpred.iter_mut().zip(preds.iter()).zip(chunk) {
                let r = p - o.value;
                sse += r * r;
                *g = 2.0 * r;
            }
            let dx = self.net.backward_into(&acts, dpred, &mut grad.net);
            self.scatter_input_grad(chunk, &dx, &mut grad.state);
        }
        (grad, sse)
    }

    fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = Vec::with_capacity(2 * self.net.num_layers() + 4);
        for (l, (w, b)) in self.net.weights.iter().zip(&self.net.biases).enumerate() {
            out.push(Block {
                name: format!("w{l}"),
                group: ParamGroup::Network,
                shape: w.shape().to_vec(),
                data: w.as_slice().unwrap(),
            });
            out.push(Block {
                name: format!("b{l}"),
                group: ParamGroup::Network,
                shape: b.shape().to_vec(),
                data: b.as_slice().unwrap(),
            });
        }
        let s = &self.state;
        for (name, shape, data) in [
            ("u", s.u.shape(), s.u.as_slice().unwrap()),
            ("v", s.v.shape(), s.v.as_slice().unwrap()),
            ("u_prime", s.u_prime.shape(), s.u_prime.as_slice().unwrap()),
            ("v_prime", s.v_prime.shape(), s.v_prime.as_slice().unwrap()),
        ] {
            out.push(Block {
                name: name.into(),
                group: ParamGroup::Features,
                shape: shape.to_vec(),
                data,
            });
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out = Vec::with_capacity(2 * self.net.num_layers() + 4);
        for (l, (w, b)) in self
            .net
            .weights
            .iter_mut()
            .zip(self.net.biases.iter_mut())
            .enumerate()
        {
            out.push(BlockMut {
                name: format!("w{l}"),
                group: ParamGroup::Network,
                shape: w.shape().to_vec(),
                data: w.as_slice_mut().unwrap(),
            });
            out.push(BlockMut {
                name: format!("b{l}"),
                group: ParamGroup::Network,
                shape: b.shape().to_vec(),
                data: b.as_slice_mut().unwrap(),
            });
        }
        let s = &mut self.state;
        let shapes = [
            s.u.shape().to_vec(),
            s.v.shape().to_vec(),
            s.u_prime.shape().to_vec(),
            s.v_prime.shape().to_vec(),
        ];
        let datas = [
            s.u.as_slice_mut().unwrap(),
            s.v.as_slice_mut().unwrap(),
            s.u_prime.as_slice_mut().unwrap(),
            s.v_prime.as_slice_mut().unwrap(),
        ];
        for ((name, shape), data) in ["u", "v", "u_prime", "v_prime"]
            .into_iter()
            .zip(shapes)
            .zip(datas)
        {
            out.push(BlockMut {
                name: name.into(),
                group: ParamGroup::Features,
                shape,
                data,
            });
        }
        out
    }

    fn zeros_like(&self) -> Self {
        let mut net = MlpNetwork::zeros(&self.net.layer_dims).expect("valid layer dims");
        net.hidden_activation = self.net.hidden_activation;
        net.output_activation = self.net.output_activation;
        Self {
            net,
            state: LatentState::zeros(&self.dims()),
        }
    }
}
