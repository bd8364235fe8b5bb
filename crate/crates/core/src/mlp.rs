//! Small fully connected networks with hand-written backprop and Adam.
//!
//! Parameters live in one flat `Vec<f64>` (layer by layer: weights row-major
//! `in x out`, then biases), so optimizers, checkpoints and finite-difference
//! checks all work on plain slices.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Probability rows over `k` outputs.
    Softmax,
    /// A single unconstrained output.
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    head: Head,
    params: Vec<f64>,
}

/// Gradient with the same layout as [`Mlp::params`].
pub type Grads = Vec<f64>;

/// Activations kept from a forward pass for the backward pass.
struct Tape {
    /// Input followed by every post-ReLU hidden activation.
    inputs: Vec<Array2<f64>>,
    outputs: Array2<f64>,
}

impl Mlp {
    /// `input -> hidden[0] -> ... -> out`. For [`Head::Scalar`] `out` must be 1.
    pub fn new(input: usize, hidden: &[usize], out: usize, head: Head, rng: &mut impl Rng) -> Result<Mlp> {
        if input == 0 || out == 0 || hidden.contains(&0) {
            return input_err("layer widths must be positive");
        }
        if head == Head::Scalar && out != 1 {
            return input_err("a scalar head has exactly one output");
        }
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(out);
        let mut params = Vec::with_capacity(param_count(&dims));
        let last = dims.len() - 2;
        for (l, pair) in dims.windows(2).enumerate() {
            let bound = if l == last { 1e-3 } else { (6.0 / pair[0] as f64).sqrt() };
            params.extend((0..pair[0] * pair[1]).map(|_| rng.gen_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, pair[1]));
        }
        Ok(Mlp { dims, head, params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let start = layer_offset(&self.dims, l);
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let w = ArrayView2::from_shape((n_in, n_out), &self.params[start..start + n_in * n_out]).expect("layer layout");
        let b = ArrayView1::from(&self.params[start + n_in * n_out..start + n_in * n_out + n_out]);
        (w, b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return input_err(format!("feature width {} but network expects {}", x.ncols(), self.input_dim()));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<f64>) -> Tape {
        let n_layers = self.dims.len() - 1;
        let mut inputs = vec![x.to_owned()];
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let mut z = inputs[l].dot(&w);
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(|v| v.max(0.0));
                inputs.push(z);
            } else {
                let outputs = match self.head {
                    Head::Softmax => softmax_rows(z),
                    Head::Scalar => z,
                };
                return Tape { inputs, outputs };
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Batched forward pass: probability rows or an `n x 1` column.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.run(x).outputs)
    }

    /// Scalar-head convenience: one value per row.
    pub fn forward_scalar(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if self.head != Head::Scalar {
            return input_err("forward_scalar on a softmax network");
        }
        Ok(self.forward(x)?.column(0).to_vec())
    }

    /// Evaluate `loss(outputs) -> (L, dL/doutputs)` and backpropagate it into
    /// parameter gradients. For softmax heads `outputs` are probabilities.
    pub fn loss_grad<F>(&self, x: ArrayView2<f64>, loss: F) -> Result<(f64, Grads)>
    where
        F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        self.check_input(&x)?;
        let tape = self.run(x);
        let (value, d_out) = loss(&tape.outputs)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        if d_out.dim() != tape.outputs.dim() {
            return input_err("loss gradient shape differs from the outputs");
        }
        let mut delta = match self.head {
            Head::Softmax => {
                let p = &tape.outputs;
                let inner = (p * &d_out).sum_axis(Axis(1)).insert_axis(Axis(1));
                p * &(&d_out - &inner)
            }
            Head::Scalar => d_out,
        };
        let mut grads = vec![0.0; self.params.len()];
        for l in (0..self.dims.len() - 1).rev() {
            let start = layer_offset(&self.dims, l);
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let gw = tape.inputs[l].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            ArrayViewMut2::from_shape((n_in, n_out), &mut grads[start..start + n_in * n_out])
                .expect("layer layout")
                .assign(&gw);
            grads[start + n_in * n_out..start + n_in * n_out + n_out].copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut back = delta.dot(&w.t());
                back.zip_mut_with(&tape.inputs[l], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok((value, grads))
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[match self.head {
            Head::Softmax => 0u8,
            Head::Scalar => 1u8,
        }])?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Mlp> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an MLP checkpoint".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let head = match read_array::<1>(&mut r)?[0] {
            0 => Head::Softmax,
            1 => Head::Scalar,
            other => return Err(Error::Format(format!("unknown head kind {other}"))),
        };
        let n_dims = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Format(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.contains(&0) || (head == Head::Scalar && dims[n_dims - 1] != 1) {
            return Err(Error::Format(format!("bad layer widths {dims:?}")));
        }
        let params = (0..param_count(&dims))
            .map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter in checkpoint".into()));
        }
        Ok(Mlp { dims, head, params })
    }
}

/// Checkpoint layout (little-endian): 8-byte magic, `u32` version, `u8` head
/// kind (0 softmax, 1 scalar), `u32` layer-width count, that many `u64`
/// widths, then every parameter as `f64` in [`Mlp::params`] order.
const CHECKPOINT_MAGIC: &[u8; 8] = b"ZSIRLMLP";
const CHECKPOINT_VERSION: u32 = 1;

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

fn layer_offset(dims: &[usize], l: usize) -> usize {
    param_count(&dims[..=l])
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    z
}

/// Select rows of a feature matrix (used for minibatches).
pub fn gather_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (dst, &r) in rows.iter().enumerate() {
        out.slice_mut(s![dst, ..]).assign(&x.row(r));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> AdamConfig {
        AdamConfig { learning_rate, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Adam {
        Adam { config, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn for_net(config: AdamConfig, net: &Mlp) -> Adam {
        Adam::new(config, net.params().len())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected descent step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return input_err("Adam state, parameters and gradients differ in length");
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Optimizer state layout (little-endian): 8-byte magic, `u32` version,
/// learning rate, beta1, beta2, eps as `f64`, `u64` step count, `u64`
/// length, then the first and second moments as `f64`.
const ADAM_MAGIC: &[u8; 8] = b"ZSIRLADM";
const ADAM_VERSION: u32 = 1;

impl Adam {
    pub fn write_state<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(ADAM_MAGIC)?;
        w.write_all(&ADAM_VERSION.to_le_bytes())?;
        let c = &self.config;
        for x in [c.learning_rate, c.beta1, c.beta2, c.eps] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for x in self.m.iter().chain(&self.v) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_state<R: Read>(mut r: R) -> Result<Adam> {
        if &read_array::<8>(&mut r)? != ADAM_MAGIC {
            return Err(Error::Format("not an optimizer state file".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != ADAM_VERSION {
            return Err(Error::Format(format!("unsupported optimizer state version {version}")));
        }
        let mut f = || -> Result<f64> { Ok(f64::from_le_bytes(read_array(&mut r)?)) };
        let config = AdamConfig { learning_rate: f()?, beta1: f()?, beta2: f()?, eps: f()? };
        let step = u64::from_le_bytes(read_array(&mut r)?);
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let mut moments = (0..2 * n).map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?))).collect::<Result<Vec<_>>>()?;
        let v = moments.split_off(n);
        Ok(Adam { config, step, m: moments, v })
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(|a|_inf, |b|_inf, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = a.iter().chain(b).fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use ndarray::array;

    fn random_net(head: Head, out: usize, seed: u64) -> (Mlp, Array2<f64>) {
        let mut rng = RngStream::new(seed, 0).rng();
        let mut net = Mlp::new(4, &[7, 5], out, head, &mut rng).unwrap();
        // Heads start tiny; widen them so the check is not trivially flat.
        for p in net.params_mut() {
            *p += rng.gen_range(-0.5..0.5);
        }
        let x = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        (net, x)
    }

    fn check_grad(net: &Mlp, x: &Array2<f64>, weights: &Array2<f64>) -> f64 {
        // loss = sum(weights * outputs^2) / 2
        let loss = |o: &Array2<f64>| Ok(((weights * o * o).sum() / 2.0, weights * o));
        let (_, grads) = net.loss_grad(x.view(), loss).unwrap();
        let numeric = finite_difference(net.params(), 1e-5, |p| {
            let mut probe = net.clone();
            probe.params_mut().copy_from_slice(p);
            let o = probe.forward(x.view()).unwrap();
            (weights * &o * &o).sum() / 2.0
        });
        relative_error(&grads, &numeric, 1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let (net, x) = random_net(Head::Softmax, 3, seed);
            let w = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
            assert!(check_grad(&net, &x, &w) < 1e-6);
            let (net, x) = random_net(Head::Scalar, 1, seed + 100);
            let w = Array2::from_shape_fn((6, 1), |(i, _)| 1.0 + i as f64);
            assert!(check_grad(&net, &x, &w) < 1e-6);
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let mut net = Mlp::new(3, &[4], 5, Head::Softmax, &mut RngStream::new(0, 0).rng()).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let out = net.forward(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert!(out.iter().all(|p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance_and_rows() {
        let z = array![[1.0, 2.0, 3.0], [0.5, 0.5, -1.0]];
        let a = softmax_rows(z.clone());
        let b = softmax_rows(z + 100.0);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9 && row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn single_row_matches_batch() {
        let (net, x) = random_net(Head::Softmax, 3, 7);
        let batch = net.forward(x.view()).unwrap();
        for i in 0..x.nrows() {
            let one = net.forward(x.slice(s![i..i + 1, ..])).unwrap();
            assert_eq!(one.row(0), batch.row(i));
        }
    }

    #[test]
    fn constant_loss_and_perfect_fit_have_zero_gradient() {
        let (net, x) = random_net(Head::Scalar, 1, 3);
        let (_, g) = net.loss_grad(x.view(), |o| Ok((4.0, Array2::zeros(o.dim())))).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let target = net.forward(x.view()).unwrap();
        let (l, g) = net
            .loss_grad(x.view(), |o| {
                let d = o - &target;
                Ok(((&d * &d).sum(), 2.0 * d))
            })
            .unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_and_numeric_errors() {
        let (net, _) = random_net(Head::Scalar, 1, 4);
        assert!(matches!(net.forward(Array2::zeros((2, 3)).view()), Err(Error::Input(_))));
        let err = net.loss_grad(Array2::zeros((2, 4)).view(), |o| Ok((f64::NAN, o.clone())));
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert!(Mlp::new(4, &[3], 2, Head::Scalar, &mut RngStream::new(0, 0).rng()).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), 3);
        adam.step(&mut params, &[3.0, -0.2, 0.0]).unwrap();
        // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        assert!((params[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((params[1] - (-2.0 + 0.01 * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);
        assert_eq!(params[2], 0.5);
        assert_eq!(adam.steps(), 1);
        assert!(adam.step(&mut params, &[1.0]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.3; 4];
            let mut adam = Adam::new(AdamConfig::with_lr(0.1), 4);
            for k in 0..10 {
                let g: Vec<f64> = (0..4).map(|i| ((i + k) as f64).sin()).collect();
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (net, _) = random_net(Head::Softmax, 3, 9);
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(Mlp::read_checkpoint(buf.as_slice()).unwrap(), net);
        buf[0] = b'X';
        assert!(matches!(Mlp::read_checkpoint(buf.as_slice()), Err(Error::Format(_))));
        assert!(Mlp::read_checkpoint(&b"ZSIRLMLP"[..]).is_err());
    }

    #[test]
    fn adam_state_round_trip() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), 3);
        let mut params = vec![1.0, -2.0, 0.5];
        adam.step(&mut params, &[0.3, -0.1, 2.0]).unwrap();
        let mut buf = Vec::new();
        adam.write_state(&mut buf).unwrap();
        assert_eq!(Adam::read_state(buf.as_slice()).unwrap(), adam);
        buf[0] = b'X';
        assert!(Adam::read_state(buf.as_slice()).is_err());
    }
}
