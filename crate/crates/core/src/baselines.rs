//! Fixed-function baselines (PMF and BiasedMF), the neural tensor network,
//! and the construction that writes the first NNMF layer as an NTN tensor.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::latent::{fill_normal, fill_uniform, sigmoid, weight_init_bound, CHUNK};
use crate::model::{Block, BlockMut, Model, ModelKind, ParamGroup};

fn block<'a>(name: &str, group: ParamGroup, shape: &[usize], data: &'a [f64]) -> Block<'a> {
    Block {
        name: name.into(),
        group,
        shape: shape.to_vec(),
        data,
    }
}

fn block_mut<'a>(
    name: &str,
    group: ParamGroup,
    shape: Vec<usize>,
    data: &'a mut [f64],
) -> BlockMut<'a> {
    BlockMut {
        name: name.into(),
        group,
        shape,
        data,
    }
}

fn row_dot(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    a.row(i).dot(&b.row(j))
}

/// Rank-`D` factorization with mean `U_n . V_m`. Both factors are features.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

pub type PmfState = Pmf;

impl Pmf {
    pub fn zeros(n_rows: usize, n_cols: usize, d: usize) -> Self {
        Self {
            u: Array2::zeros((n_rows, d)),
            v: Array2::zeros((n_cols, d)),
        }
    }

    pub fn init(n_rows: usize, n_cols: usize, d: usize, feature_std: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(n_rows, n_cols, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fill_normal(&mut rng, model.u.as_slice_mut().unwrap(), feature_std)?;
        fill_normal(&mut rng, model.v.as_slice_mut().unwrap(), feature_std)?;
        Ok(model)
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    fn accumulate(&self, o: &Observation, g: f64, grad: &mut Pmf) {
        grad.u
            .row_mut(o.row)
            .scaled_add(g, &self.v.row(o.col));
        grad.v
            .row_mut(o.col)
            .scaled_add(g, &self.u.row(o.row));
    }
}

pub fn pmf_predict(state: &Pmf, n: usize, m: usize) -> Result<f64> {
    state.check_index(n, m)?;
    Ok(row_dot(&state.u, n, &state.v, m))
}

impl Model for Pmf {
    fn kind(&self) -> ModelKind {
        ModelKind::Pmf
    }

    fn n_rows(&self) -> usize {
        self.u.nrows()
    }

    fn n_cols(&self) -> usize {
        self.v.nrows()
    }

    fn predict(&self, row: usize, col: usize) -> Result<f64> {
        pmf_predict(self, row, col)
    }

    fn data_gradient(&self, obs: &[Observation]) -> (Self, f64) {
        let mut grad = self.zeros_like();
        let mut sse = 0.0;
        for o in obs {
            let r = row_dot(&self.u, o.row, &self.v, o.col) - o.value;
            sse += r * r;
            self.accumulate(o, 2.0 * r, &mut grad);
        }
        (grad, sse)
    }

    fn blocks(&self) -> Vec<Block<'_>> {
        vec![
            block("u", ParamGroup::Features, self.u.shape(), self.u.as_slice().unwrap()),
            block("v", ParamGroup::Features, self.v.shape(), self.v.as_slice().unwrap()),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let (us, vs) = (self.u.shape().to_vec(), self.v.shape().to_vec());
        vec![
            block_mut("u", ParamGroup::Features, us, self.u.as_slice_mut().unwrap()),
            block_mut("v", ParamGroup::Features, vs, self.v.as_slice_mut().unwrap()),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.n_rows(), self.n_cols(), self.rank())
    }
}

/// PMF plus row biases `mu`, column biases `tau` and a global bias `beta`.
///
/// `mu` and `tau` are per-entity latent variables and sit in the features
/// group with `U` and `V`; `beta` is shared and sits in the network group.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasedMf {
    pub pmf: Pmf,
    pub mu: Array1<f64>,
    pub tau: Array1<f64>,
    pub beta: f64,
}

pub type BiasedMfState = BiasedMf;

impl BiasedMf {
    pub fn zeros(n_rows: usize, n_cols: usize, d: usize) -> Self {
        Self {
            pmf: Pmf::zeros(n_rows, n_cols, d),
            mu: Array1::zeros(n_rows),
            tau: Array1::zeros(n_cols),
            beta: 0.0,
        }
    }

    /// Gaussian factors, zero biases, `beta = global_mean`.
    pub fn init(
        n_rows: usize,
        n_cols: usize,
        d: usize,
        feature_std: f64,
        global_mean: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            pmf: Pmf::init(n_rows, n_cols, d, feature_std, seed)?,
            mu: Array1::zeros(n_rows),
            tau: Array1::zeros(n_cols),
            beta: global_mean,
        })
    }

    fn mean(&self, n: usize, m: usize) -> f64 {
        row_dot(&self.pmf.u, n, &self.pmf.v, m) + self.mu[n] + self.tau[m] + self.beta
    }
}

pub fn biasedmf_predict(state: &BiasedMf, n: usize, m: usize) -> Result<f64> {
    state.check_index(n, m)?;
    Ok(state.mean(n, m))
}

impl Model for BiasedMf {
    fn kind(&self) -> ModelKind {
        ModelKind::BiasedMf
    }

    fn n_rows(&self) -> usize {
        self.pmf.n_rows()
    }

    fn n_cols(&self) -> usize {
        self.pmf.n_cols()
    }

    fn predict(&self, row: usize, col: usize) -> Result<f64> {
        biasedmf_predict(self, row, col)
    }

    fn data_gradient(&self, obs: &[Observation]) -> (Self, f64) {
        let mut grad = self.zeros_like();
        let mut sse = 0.0;
        for o in obs {
            let r = self.mean(o.row, o.col) - o.value;
            sse += r * r;
            let g = 2.0 * r;
            self.pmf.accumulate(o, g, &mut grad.pmf);
            grad.mu[o.row] += g;
            grad.tau[o.col] += g;
            grad.beta += g;
        }
        (grad, sse)
    }

    fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = self.pmf.blocks();
        out.push(block("mu", ParamGroup::Features, self.mu.shape(), self.mu.as_slice().unwrap()));
        out.push(block("tau", ParamGroup::Features, self.tau.shape(), self.tau.as_slice().unwrap()));
        out.push(block("beta", ParamGroup::Network, &[1], std::slice::from_ref(&self.beta)));
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let (ms, ts) = (self.mu.shape().to_vec(), self.tau.shape().to_vec());
        let mut out = self.pmf.blocks_mut();
        out.push(block_mut("mu", ParamGroup::Features, ms, self.mu.as_slice_mut().unwrap()));
        out.push(block_mut("tau", ParamGroup::Features, ts, self.tau.as_slice_mut().unwrap()));
        out.push(block_mut(
            "beta",
            ParamGroup::Network,
            vec![1],
            std::slice::from_mut(&mut self.beta),
        ));
        out
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.n_rows(), self.n_cols(), self.pmf.rank())
    }
}

/// Neural tensor network:
/// `a . tanh(U_n^T Q^[1:H] V_m + W [U_n; V_m] + b)`, optionally followed by
/// a logistic output.
///
/// `q` has shape `(D, D, H)` with `q[[i, j, h]]` the `(i, j)` entry of slice
/// `h`; `w` is `H x 2D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ntn {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub q: Array3<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub a: Array1<f64>,
    pub output_sigmoid: bool,
}

pub type NtnModel = Ntn;

impl Ntn {
    pub fn zeros(n_rows: usize, n_cols: usize, d: usize, h: usize, output_sigmoid: bool) -> Self {
        Self {
            u: Array2::zeros((n_rows, d)),
            v: Array2::zeros((n_cols, d)),
            q: Array3::zeros((d, d, h)),
            w: Array2::zeros((h, 2 * d)),
            b: Array1::zeros(h),
            a: Array1::zeros(h),
            output_sigmoid,
        }
    }

    /// Gaussian features; `Q`, `W` and `a` uniform within
    /// [`weight_init_bound`] of their fan-in/fan-out; `b = 0`.
    pub fn init(
        n_rows: usize,
        n_cols: usize,
        d: usize,
        h: usize,
        output_sigmoid: bool,
        feature_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if h == 0 || d == 0 {
            return Err(Error::Dimension("NTN needs D >= 1 and H >= 1".into()));
        }
        let mut model = Self::zeros(n_rows, n_cols, d, h, output_sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fill_uniform(&mut rng, model.q.as_slice_mut().unwrap(), weight_init_bound(d * d, h))?;
        fill_uniform(&mut rng, model.w.as_slice_mut().unwrap(), weight_init_bound(2 * d, h))?;
        fill_uniform(&mut rng, model.a.as_slice_mut().unwrap(), weight_init_bound(h, 1))?;
        fill_normal(&mut rng, model.u.as_slice_mut().unwrap(), feature_std)?;
        fill_normal(&mut rng, model.v.as_slice_mut().unwrap(), feature_std)?;
        Ok(model)
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.a.len()
    }

    /// Hidden pre-activations for one `(U_n, V_m)` pair.
    pub fn preactivations(&self, u_n: ArrayView1<f64>, v_m: ArrayView1<f64>) -> Array1<f64> {
        let d = self.rank();
        let mut z = self.b.clone();
        for (h, zh) in z.iter_mut().enumerate() {
            let slice = self.q.index_axis(Axis(2), h);
            *zh += u_n.dot(&slice.dot(&v_m));
            *zh += self.w.slice(s![h, ..d]).dot(&u_n) + self.w.slice(s![h, d..]).dot(&v_m);
        }
        z
    }

    fn gather(&self, obs: &[Observation]) -> (Array2<f64>, Array2<f64>) {
        let d = self.rank();
        let mut ub = Array2::zeros((obs.len(), d));
        let mut vb = Array2::zeros((obs.len(), d));
        for (j, o) in obs.iter().enumerate() {
            ub.row_mut(j).assign(&self.u.row(o.row));
            vb.row_mut(j).assign(&self.v.row(o.col));
        }
        (ub, vb)
    }

    /// Batched forward pass. Returns `(U Q, tanh activations, outputs)`;
    /// `U Q` is laid out as `[j, e * H + h]`.
    fn forward_batch(&self, ub: &Array2<f64>, vb: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let (d, h) = (self.rank(), self.hidden());
        let qm = self.q.view().into_shape_with_order((d, d * h)).unwrap();
        let uq = ub.dot(&qm);
        let mut z = ub.dot(&self.w.slice(s![.., ..d]).t()) + vb.dot(&self.w.slice(s![.., d..]).t());
        z += &self.b;
        for ((mut zj, uqj), vj) in z.outer_iter_mut().zip(uq.outer_iter()).zip(vb.outer_iter()) {
            for (e, &ve) in vj.iter().enumerate() {
                zj.scaled_add(ve, &uqj.slice(s![e * h..(e + 1) * h]));
            }
        }
        z.mapv_inplace(f64::tanh);
        let mut out = z.dot(&self.a);
        if self.output_sigmoid {
            out.mapv_inplace(sigmoid);
        }
        (uq, z, out)
    }
}

pub fn ntn_predict(model: &Ntn, n: usize, m: usize) -> Result<f64> {
    model.check_index(n, m)?;
    let z = model.preactivations(model.u.row(n), model.v.row(m));
    let out = z.mapv(f64::tanh).dot(&model.a);
    Ok(if model.output_sigmoid { sigmoid(out) } else { out })
}

impl Model for Ntn {
    fn kind(&self) -> ModelKind {
        ModelKind::Ntn
    }

    fn n_rows(&self) -> usize {
        self.u.nrows()
    }

    fn n_cols(&self) -> usize {
        self.v.nrows()
    }

    fn predict(&self, row: usize, col: usize) -> Result<f64> {
        ntn_predict(self, row, col)
    }

    fn predict_batch(&self, obs: &[Observation]) -> Vec<f64> {
        let mut out = Vec::with_capacity(obs.len());
        for chunk in obs.chunks(CHUNK) {
            let (ub, vb) = self.gather(chunk);
            out.extend(self.forward_batch(&ub, &vb).2);
        }
        out
    }

    fn data_gradient(&self, obs: &[Observation]) -> (Self, f64) {
        let (d, h) = (self.rank(), self.hidden());
        let mut grad = self.zeros_like();
        let mut sse = 0.0;
        let qm = self.q.view().into_shape_with_order((d, d * h)).unwrap();
        for chunk in obs.chunks(CHUNK) {
            let (ub, vb) = self.gather(chunk);
            let (uq, t, out) = self.forward_batch(&ub, &vb);
            let mut dout = Array1::zeros(chunk.len());
            for ((g, &y), o) in dout.iter_mut().zip(&out).zip(chunk) {
                let r = y - o.value;
                sse += r * r;
                *g = 2.0 * r * if self.output_sigmoid { y * (1.0 - y) } else { 1.0 };
            }
            grad.a += &t.t().dot(&dout);
            // dz[j, h] = dout_j a_h (1 - t_jh^2)
            let mut dz = t;
            for (mut row, &g) in dz.outer_iter_mut().zip(&dout) {
                row.zip_mut_with(&self.a, |x, &a| *x = g * a * (1.0 - *x * *x));
            }
            grad.b += &dz.sum_axis(Axis(0));
            grad.w.slice_mut(s![.., ..d]).scaled_add(1.0, &dz.t().dot(&ub));
            grad.w.slice_mut(s![.., d..]).scaled_add(1.0, &dz.t().dot(&vb));
            // outer[j, e * H + h] = V[j, e] dz[j, h]
            let mut outer = Array2::zeros((chunk.len(), d * h));
            for ((mut orow, vj), dzj) in outer.outer_iter_mut().zip(vb.outer_iter()).zip(dz.outer_iter()) {
                for (e, &ve) in vj.iter().enumerate() {
                    orow.slice_mut(s![e * h..(e + 1) * h]).scaled_add(ve, &dzj);
                }
            }
            let mut gq = grad.q.view_mut().into_shape_with_order((d, d * h)).unwrap();
            gq += &ub.t().dot(&outer);
            let du = outer.dot(&qm.t()) + dz.dot(&self.w.slice(s![.., ..d]));
            let mut dv = dz.dot(&self.w.slice(s![.., d..]));
            for ((mut dvj, uqj), dzj) in dv.outer_iter_mut().zip(uq.outer_iter()).zip(dz.outer_iter()) {
                for (e, x) in dvj.iter_mut().enumerate() {
                    *x += uqj.slice(s![e * h..(e + 1) * h]).dot(&dzj);
                }
            }
            for (j, o) in chunk.iter().enumerate() {
                grad.u.row_mut(o.row).scaled_add(1.0, &du.row(j));
                grad.v.row_mut(o.col).scaled_add(1.0, &dv.row(j));
            }
        }
        (grad, sse)
    }

    fn blocks(&self) -> Vec<Block<'_>> {
        use ParamGroup::*;
        vec![
            block("q", Network, self.q.shape(), self.q.as_slice().unwrap()),
            block("w", Network, self.w.shape(), self.w.as_slice().unwrap()),
            block("b", Network, self.b.shape(), self.b.as_slice().unwrap()),
            block("a", Network, self.a.shape(), self.a.as_slice().unwrap()),
            block("u", Features, self.u.shape(), self.u.as_slice().unwrap()),
            block("v", Features, self.v.shape(), self.v.as_slice().unwrap()),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        use ParamGroup::*;
        let shapes: Vec<Vec<usize>> = vec![
            self.q.shape().to_vec(),
            self.w.shape().to_vec(),
            self.b.shape().to_vec(),
            self.a.shape().to_vec(),
            self.u.shape().to_vec(),
            self.v.shape().to_vec(),
        ];
        let mut shapes = shapes.into_iter();
        let mut next = || shapes.next().unwrap();
        vec![
            block_mut("q", Network, next(), self.q.as_slice_mut().unwrap()),
            block_mut("w", Network, next(), self.w.as_slice_mut().unwrap()),
            block_mut("b", Network, next(), self.b.as_slice_mut().unwrap()),
            block_mut("a", Network, next(), self.a.as_slice_mut().unwrap()),
            block_mut("u", Features, next(), self.u.as_slice_mut().unwrap()),
            block_mut("v", Features, next(), self.v.as_slice_mut().unwrap()),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.n_rows(), self.n_cols(), self.rank(), self.hidden(), self.output_sigmoid)
    }
}

/// The first NNMF layer written as an NTN bilinear form over padded feature
/// vectors `[U_n; 1_D; U'_n]` and `[1_D; V_m; V'_m]`, with diagonal slices
/// `Q^h_ii = W'_hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct NtnEmbedding {
    /// Shape `(2D + D', 2D + D', H)`.
    pub q: Array3<f64>,
    pub d: usize,
    pub d_prime: usize,
}

pub fn embed_nnmf_first_layer(
    w_prime: ArrayView2<f64>,
    d: usize,
    d_prime: usize,
    k: usize,
) -> Result<NtnEmbedding> {
    if k != 1 {
        return Err(Error::Unsupported(format!(
            "the NTN embedding needs K = 1, got K = {k}"
        )));
    }
    let width = 2 * d + d_prime;
    if w_prime.ncols() != width {
        return Err(Error::Dimension(format!(
            "first-layer weights have {} columns, expected 2D+D' = {width}",
            w_prime.ncols()
        )));
    }
    let hidden = w_prime.nrows();
    let mut q = Array3::zeros((width, width, hidden));
    for h in 0..hidden {
        for i in 0..width {
            q[[i, i, h]] = w_prime[[h, i]];
        }
    }
    Ok(NtnEmbedding { q, d, d_prime })
}

impl NtnEmbedding {
    fn check(&self, features: ArrayView1<f64>, prime: ArrayView2<f64>) -> Result<()> {
        if features.len() != self.d || prime.dim() != (self.d_prime, 1) {
            return Err(Error::Dimension(format!(
                "expected D = {} and D' x K = {} x 1, got {} and {:?}",
                self.d,
                self.d_prime,
                features.len(),
                prime.dim()
            )));
        }
        Ok(())
    }

    /// `[U_n; 1_D; U'_n]`.
    pub fn pad_row(&self, u_n: ArrayView1<f64>, u_prime_n: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check(u_n, u_prime_n)?;
        let mut out = Array1::ones(2 * self.d + self.d_prime);
        out.slice_mut(s![..self.d]).assign(&u_n);
        out.slice_mut(s![2 * self.d..]).assign(&u_prime_n.column(0));
        Ok(out)
    }

    /// `[1_D; V_m; V'_m]`.
    pub fn pad_col(&self, v_m: ArrayView1<f64>, v_prime_m: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check(v_m, v_prime_m)?;
        let mut out = Array1::ones(2 * self.d + self.d_prime);
        out.slice_mut(s![self.d..2 * self.d]).assign(&v_m);
        out.slice_mut(s![2 * self.d..]).assign(&v_prime_m.column(0));
        Ok(out)
    }

    /// `Ubar^T Q^h Vbar` for every slice `h`.
    pub fn bilinear(&self, u_bar: ArrayView1<f64>, v_bar: ArrayView1<f64>) -> Array1<f64> {
        let hidden = self.q.dim().2;
        Array1::from_iter((0..hidden).map(|h| {
            let slice = self.q.index_axis(Axis(2), h);
            u_bar.dot(&slice.dot(&v_bar))
        }))
    }
}
