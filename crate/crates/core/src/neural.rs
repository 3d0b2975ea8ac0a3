//! Fixed-topology feedforward networks with hand-written backpropagation
//! and the Adam optimiser.
//!
//! A network with `hidden_layers = L - 1` computes
//! `A_L ∘ tanh ∘ A_{L-1} ∘ ... ∘ tanh ∘ A_1`, where `A_l(x) = W_l x + b_l`.
//! Inputs are batches with one sample per row.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Tanh => tanh(z),
        }
    }

    /// Derivative expressed through the activation output `a = psi(z)`.
    #[inline]
    fn slope_from_output<S: Scalar>(self, a: S) -> S {
        match self {
            Activation::Tanh => S::one() - a * a,
        }
    }
}

/// `tanh` through a single `exp`; several times cheaper than the libm
/// routine, absolute error a few ulp.
#[inline]
pub fn tanh<S: Scalar>(z: S) -> S {
    let e = (-(z.abs() + z.abs())).exp();
    ((S::one() - e) / (S::one() + e)).copysign(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    /// Per-timestep network for a d-dimensional state: input `(t, x)`,
    /// three hidden layers of 50 units, output `(Y, Z_1..Z_d)`.
    pub fn stage_default(d: usize) -> Self {
        MlpSpec {
            input_dim: d + 1,
            hidden_width: 50,
            hidden_layers: 3,
            output_dim: d + 1,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("network dims must be >= 1: {self:?}")));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// Widths `N_0, ..., N_L`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        dims.push(self.output_dim);
        dims
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Network weights `W_l` (`N_l x N_{l-1}`) and biases `b_l`.
///
/// Every mutation gets a new identity so tapes recorded before an update
/// cannot be replayed against the updated parameters.
#[derive(Clone, Debug)]
pub struct MlpParams<S: Scalar = f64> {
    spec: MlpSpec,
    weights: Vec<Array2<S>>,
    biases: Vec<Array1<S>>,
    seed: Option<u64>,
    id: u64,
}

impl<S: Scalar> PartialEq for MlpParams<S> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.weights == other.weights && self.biases == other.biases
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<S: Scalar>(spec: &MlpSpec, seed: u64) -> Result<MlpParams<S>> {
    spec.validate()?;
    let dims = spec.layer_dims();
    let mut r = rng::seeded(seed);
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), || S::of(r.random_range(-limit..limit))));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpParams { spec: *spec, weights, biases, seed: Some(seed), id: fresh_id() })
}

/// Cached layer inputs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape<S: Scalar = f64> {
    params_id: u64,
    /// `inputs[l]` is the input to affine map `l` (the raw batch for `l = 0`).
    inputs: Vec<Array2<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn batch(&self) -> usize {
        self.inputs[0].nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<S: Scalar = f64> {
    pub weights: Vec<Array2<S>>,
    pub biases: Vec<Array1<S>>,
}

impl<S: Scalar> GradientBundle<S> {
    pub fn flat(&self) -> Vec<S> {
        flatten(&self.weights, &self.biases)
    }

    pub fn first_non_finite(&self) -> Option<String> {
        non_finite_path(&self.weights, &self.biases)
    }
}

fn flatten<S: Scalar>(weights: &[Array2<S>], biases: &[Array1<S>]) -> Vec<S> {
    let mut out = Vec::new();
    for w in weights {
        out.extend(w.iter().copied());
    }
    for b in biases {
        out.extend(b.iter().copied());
    }
    out
}

fn non_finite_path<S: Scalar>(weights: &[Array2<S>], biases: &[Array1<S>]) -> Option<String> {
    for (l, w) in weights.iter().enumerate() {
        if let Some(((i, j), _)) = w.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Some(format!("layers[{l}].weight[{i},{j}]"));
        }
    }
    for (l, b) in biases.iter().enumerate() {
        if let Some((i, _)) = b.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Some(format!("layers[{l}].bias[{i}]"));
        }
    }
    None
}

impl<S: Scalar> MlpParams<S> {
    /// Builds parameters from explicit matrices; shapes are checked
    /// against `spec`.
    pub fn from_parts(spec: MlpSpec, weights: Vec<Array2<S>>, biases: Vec<Array1<S>>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if weights.len() != dims.len() - 1 || biases.len() != dims.len() - 1 {
            return Err(Error::Contract(format!(
                "expected {} layers, got {} weights and {} biases",
                dims.len() - 1,
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in dims.windows(2).enumerate() {
            if weights[l].dim() != (pair[1], pair[0]) || biases[l].len() != pair[1] {
                return Err(Error::Contract(format!("layer {l} has the wrong shape")));
            }
        }
        if let Some(path) = non_finite_path(&weights, &biases) {
            return Err(Error::NonFinite { path });
        }
        Ok(MlpParams { spec, weights, biases, seed: None, id: fresh_id() })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<S>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<S>] {
        &self.biases
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn flat(&self) -> Vec<S> {
        flatten(&self.weights, &self.biases)
    }

    /// Overwrites all parameters from a flat vector (layout of [`Self::flat`]).
    pub fn set_flat(&mut self, values: &[S]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} entries, network has {}",
                values.len(),
                self.num_params()
            )));
        }
        let mut it = values.iter().copied();
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.id = fresh_id();
        Ok(())
    }

    /// Runs the network and records the tape needed by [`Self::backward`].
    pub fn forward(&self, input: ArrayView2<S>) -> Result<(Array2<S>, Tape<S>)> {
        if input.ncols() != self.spec.input_dim {
            return Err(Error::Contract(format!(
                "input width {} does not match network input {}",
                input.ncols(),
                self.spec.input_dim
            )));
        }
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut a = input.to_owned();
        for l in 0..layers {
            let mut z = a.dot(&self.weights[l].t());
            z += &self.biases[l];
            inputs.push(a);
            if l + 1 < layers {
                let act = self.spec.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            a = z;
        }
        Ok((a, Tape { params_id: self.id, inputs }))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, input: ArrayView2<S>) -> Result<Array2<S>> {
        if input.ncols() != self.spec.input_dim {
            return Err(Error::Contract(format!(
                "input width {} does not match network input {}",
                input.ncols(),
                self.spec.input_dim
            )));
        }
        let layers = self.weights.len();
        let mut a = input.dot(&self.weights[0].t());
        a += &self.biases[0];
        for l in 1..layers {
            let act = self.spec.activation;
            a.mapv_inplace(|v| act.apply(v));
            let mut z = a.dot(&self.weights[l].t());
            z += &self.biases[l];
            a = z;
        }
        Ok(a)
    }

    /// Reverse-mode gradient of `loss = (1/M) sum_j l_j(out_j)`, where
    /// `output_grad[j] = dl_j/d out_j` is the per-sample sensitivity.
    pub fn backward(&self, tape: &Tape<S>, output_grad: ArrayView2<S>) -> Result<GradientBundle<S>> {
        if tape.params_id != self.id {
            return Err(Error::Contract("tape was recorded with different parameters".into()));
        }
        let batch = tape.batch();
        if output_grad.dim() != (batch, self.spec.output_dim) {
            return Err(Error::Contract(format!(
                "output gradient shape {:?} does not match ({batch}, {})",
                output_grad.dim(),
                self.spec.output_dim
            )));
        }
        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        let mut delta = output_grad.mapv(|g| g / S::of_usize(batch));
        for l in (0..layers).rev() {
            let a_in = &tape.inputs[l];
            gw[l] = delta.t().dot(a_in);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                let act = self.spec.activation;
                Zip::from(&mut back).and(a_in).for_each(|d, &a| *d = *d * act.slope_from_output(a));
                delta = back;
            }
        }
        Ok(GradientBundle { weights: gw, biases: gb })
    }

    pub fn cast<T: Scalar>(&self) -> MlpParams<T> {
        MlpParams {
            spec: self.spec,
            weights: self.weights.iter().map(|w| w.mapv(|v| T::of(v.as_f64()))).collect(),
            biases: self.biases.iter().map(|b| b.mapv(|v| T::of(v.as_f64()))).collect(),
            seed: self.seed,
            id: fresh_id(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    pub config: AdamConfig,
    first_w: Vec<Array2<S>>,
    first_b: Vec<Array1<S>>,
    second_w: Vec<Array2<S>>,
    second_b: Vec<Array1<S>>,
    step_count: u64,
}

impl<S: Scalar> AdamState<S> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &MlpParams<S>, config: AdamConfig) -> Self {
        let zw: Vec<Array2<S>> = params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
        let zb: Vec<Array1<S>> = params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
        AdamState {
            config,
            first_w: zw.clone(),
            first_b: zb.clone(),
            second_w: zw,
            second_b: zb,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> Vec<S> {
        flatten(&self.first_w, &self.first_b)
    }

    pub fn second_moment(&self) -> Vec<S> {
        flatten(&self.second_w, &self.second_b)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<S: Scalar>(params: &mut MlpParams<S>, grads: &GradientBundle<S>, state: &mut AdamState<S>) -> Result<()> {
    if grads.weights.len() != params.weights.len()
        || grads.weights.iter().zip(&params.weights).any(|(g, w)| g.dim() != w.dim())
        || grads.biases.iter().zip(&params.biases).any(|(g, b)| g.len() != b.len())
        || state.first_w.iter().zip(&params.weights).any(|(m, w)| m.dim() != w.dim())
    {
        return Err(Error::Contract("gradient or optimiser state shape mismatch".into()));
    }
    if let Some(path) = grads.first_non_finite() {
        return Err(Error::NonFinite { path: format!("gradient {path}") });
    }
    let c = state.config;
    let t = state.step_count + 1;
    let b1 = S::of(c.beta1);
    let b2 = S::of(c.beta2);
    let one = S::one();
    let bias1 = S::of(1.0 - c.beta1.powi(t as i32));
    let bias2 = S::of(1.0 - c.beta2.powi(t as i32));
    let lr = S::of(c.lr);
    let eps = S::of(c.eps);
    let update = |p: &mut S, m: &mut S, v: &mut S, g: S| {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    };
    for l in 0..params.weights.len() {
        Zip::from(&mut params.weights[l])
            .and(&mut state.first_w[l])
            .and(&mut state.second_w[l])
            .and(&grads.weights[l])
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut params.biases[l])
            .and(&mut state.first_b[l])
            .and(&mut state.second_b[l])
            .and(&grads.biases[l])
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    state.step_count = t;
    params.id = fresh_id();
    Ok(())
}

/// JSON shape manifest written next to the binary blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamManifest {
    pub layer_dims: Vec<usize>,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub seed: Option<u64>,
    pub dtype: String,
    pub values: usize,
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<prefix>.json` and `<prefix>.bin` (flat little-endian `f64`,
/// weights row-major layer by layer, then biases).
pub fn save_params<S: Scalar>(params: &MlpParams<S>, prefix: &Path) -> Result<()> {
    let flat = params.flat();
    let manifest = ParamManifest {
        layer_dims: params.spec.layer_dims(),
        hidden_layers: params.spec.hidden_layers,
        activation: params.spec.activation,
        seed: params.seed,
        dtype: S::DTYPE.to_string(),
        values: flat.len(),
    };
    let mut bytes = Vec::with_capacity(8 * flat.len());
    for v in &flat {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    let json_path = with_ext(prefix, ".json");
    let bin_path = with_ext(prefix, ".bin");
    fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn load_params<S: Scalar>(prefix: &Path) -> Result<MlpParams<S>> {
    let json_path = with_ext(prefix, ".json");
    let bin_path = with_ext(prefix, ".bin");
    let manifest: ParamManifest =
        serde_json::from_slice(&fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?)?;
    let dims = &manifest.layer_dims;
    if dims.len() < 2 || manifest.hidden_layers + 2 != dims.len() {
        return Err(Error::Data(format!("{}: inconsistent layer_dims", json_path.display())));
    }
    let spec = MlpSpec {
        input_dim: dims[0],
        hidden_width: if manifest.hidden_layers > 0 { dims[1] } else { 0 },
        hidden_layers: manifest.hidden_layers,
        output_dim: *dims.last().unwrap(),
        activation: manifest.activation,
    };
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != 8 * manifest.values {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            bin_path.display(),
            8 * manifest.values,
            bytes.len()
        )));
    }
    let values: Vec<S> = bytes
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let mut params = init_params::<S>(&spec, 0)?;
    params.set_flat(&values)?;
    params.seed = manifest.seed;
    Ok(params)
}
