//! Plain (tape-free) forward passes, generic over the scalar type so the
//! same code runs on `f64` for values and on [`DualScalar`] when time
//! derivatives are needed.

use super::{Dims, ModelKind, ModelParams, NeuralError, ObservationWindow};
use crate::autodiff::{DualScalar, Scalar};

// Array slot order fixed by `init_params`.
pub(crate) mod slots {
    pub const ENC_W: usize = 0;
    pub const ENC_B: usize = 1;
    pub const ENC_HEAD_W: usize = 2;
    pub const ENC_HEAD_B: usize = 3;
    pub const GEN_W1: usize = 4;
    pub const GEN_B1: usize = 5;
    pub const GEN_W2: usize = 6;
    pub const GEN_B2: usize = 7;
    pub const GEN_W3: usize = 8;
    pub const GEN_B3: usize = 9;

    pub const NET_W1: usize = 0;
    pub const NET_B1: usize = 1;
    pub const NET_W2: usize = 2;
    pub const NET_B2: usize = 3;
    pub const NET_W3: usize = 4;
    pub const NET_B3: usize = 5;

    pub const HYPER_W1: usize = 0;
    pub const HYPER_B1: usize = 1;
    pub const HYPER_W2: usize = 2;
    pub const HYPER_B2: usize = 3;
    pub const HYPER_W3: usize = 4;
    pub const HYPER_B3: usize = 5;
}

/// Offsets into the flat generated-weight vector of the target net
/// [1, th, th, 1]: `[w1 th][b1 th][w2 th*th][b2 th][w3 th][b3 1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TargetLayout {
    pub th: usize,
}

impl TargetLayout {
    pub fn new(dims: &Dims) -> Self {
        TargetLayout { th: dims.target_hidden }
    }
    pub fn w1(&self, j: usize) -> usize {
        j
    }
    pub fn b1(&self, j: usize) -> usize {
        self.th + j
    }
    pub fn w2(&self, j: usize, k: usize) -> usize {
        2 * self.th + j * self.th + k
    }
    pub fn b2(&self, j: usize) -> usize {
        2 * self.th + self.th * self.th + j
    }
    pub fn w3(&self, k: usize) -> usize {
        3 * self.th + self.th * self.th + k
    }
    pub fn b3(&self) -> usize {
        4 * self.th + self.th * self.th
    }
}

fn expect_kind(params: &ModelParams, allowed: &[ModelKind], what: &str) -> Result<(), NeuralError> {
    if allowed.contains(&params.kind) {
        Ok(())
    } else {
        Err(NeuralError::ShapeMismatch(format!(
            "{what} needs one of {allowed:?}, got {:?}",
            params.kind
        )))
    }
}

/// One step of the canonical LSTM cell (gate order i, f, g, o).
///
/// `w` is `[4*hidden x (input_dim + hidden)]` row-major with each row the
/// weights of one gate unit over `[input, h_prev]`; `b` is `[4*hidden]`.
pub fn lstm_cell(
    input: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w: &[f64],
    b: &[f64],
    hidden: usize,
) -> Result<(Vec<f64>, Vec<f64>), NeuralError> {
    let d = input.len() + hidden;
    if h_prev.len() != hidden
        || c_prev.len() != hidden
        || w.len() != 4 * hidden * d
        || b.len() != 4 * hidden
    {
        return Err(NeuralError::ShapeMismatch(format!(
            "lstm_cell: input {} h {} c {} w {} b {} hidden {hidden}",
            input.len(),
            h_prev.len(),
            c_prev.len(),
            w.len(),
            b.len()
        )));
    }
    let pre = |row: usize| -> f64 {
        let ws = &w[row * d..(row + 1) * d];
        let mut acc = b[row];
        for (k, &x) in input.iter().enumerate() {
            acc += ws[k] * x;
        }
        for (k, &h) in h_prev.iter().enumerate() {
            acc += ws[input.len() + k] * h;
        }
        acc
    };
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for j in 0..hidden {
        let i_g = pre(j).sigmoid();
        let f_g = pre(hidden + j).sigmoid();
        let g_g = pre(2 * hidden + j).tanh();
        let o_g = pre(3 * hidden + j).sigmoid();
        c[j] = f_g * c_prev[j] + i_g * g_g;
        h[j] = o_g * c[j].tanh();
    }
    Ok((h, c))
}

/// Run the LSTM over a window and map the last hidden state to the latent
/// vector. Deterministic; the window's f0 label is ignored here.
pub fn encoder_forward(
    params: &ModelParams,
    window: &ObservationWindow,
) -> Result<Vec<f64>, NeuralError> {
    expect_kind(params, &[ModelKind::Tapinn, ModelKind::MultiOutput], "encoder_forward")?;
    let dims = &params.dims;
    if window.len() != dims.window_len {
        return Err(NeuralError::ShapeMismatch(format!(
            "window has {} steps, config says {}",
            window.len(),
            dims.window_len
        )));
    }
    let h_n = dims.lstm_hidden;
    let w = &params.arrays[slots::ENC_W].data;
    let b = &params.arrays[slots::ENC_B].data;
    let mut h = vec![0.0; h_n];
    let mut c = vec![0.0; h_n];
    for &(x, v) in &window.xv {
        let (h2, c2) = lstm_cell(&[x, v], &h, &c, w, b, h_n)?;
        h = h2;
        c = c2;
    }
    let hw = &params.arrays[slots::ENC_HEAD_W].data;
    let hb = &params.arrays[slots::ENC_HEAD_B].data;
    let mut z = vec![0.0; dims.d_z];
    for (j, zj) in z.iter_mut().enumerate() {
        let mut acc = hb[j];
        for (k, &hk) in h.iter().enumerate() {
            acc += hw[j * h_n + k] * hk;
        }
        *zj = acc;
    }
    Ok(z)
}

fn mlp3<S: Scalar>(
    inputs: &[S],
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    w3: &[f64],
    b3: &[f64],
    hidden: usize,
) -> Vec<S> {
    let d = inputs.len();
    let mut h1 = Vec::with_capacity(hidden);
    for j in 0..hidden {
        let mut acc = S::from_f64(b1[j]);
        for (k, x) in inputs.iter().enumerate() {
            acc = acc + *x * S::from_f64(w1[j * d + k]);
        }
        h1.push(acc.tanh());
    }
    let mut h2 = Vec::with_capacity(hidden);
    for j in 0..hidden {
        let mut acc = S::from_f64(b2[j]);
        for (k, x) in h1.iter().enumerate() {
            acc = acc + *x * S::from_f64(w2[j * hidden + k]);
        }
        h2.push(acc.tanh());
    }
    let n_out = b3.len();
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let mut acc = S::from_f64(b3[j]);
        for (k, x) in h2.iter().enumerate() {
            acc = acc + *x * S::from_f64(w3[j * hidden + k]);
        }
        out.push(acc);
    }
    out
}

/// All output heads of the generator at `(t, z)`; the final layer is linear
/// so the prediction is not amplitude-bounded.
pub fn generator_heads<S: Scalar>(params: &ModelParams, t: S, z: &[f64]) -> Vec<S> {
    let dims = &params.dims;
    let mut inputs = Vec::with_capacity(1 + z.len());
    inputs.push(t * S::from_f64(1.0 / dims.t_scale));
    inputs.extend(z.iter().map(|&v| S::from_f64(v)));
    mlp3(
        &inputs,
        &params.arrays[slots::GEN_W1].data,
        &params.arrays[slots::GEN_B1].data,
        &params.arrays[slots::GEN_W2].data,
        &params.arrays[slots::GEN_B2].data,
        &params.arrays[slots::GEN_W3].data,
        &params.arrays[slots::GEN_B3].data,
        dims.gen_hidden,
    )
}

/// Predicted displacement of the latent-conditioned generator.
pub fn generator_forward(
    params: &ModelParams,
    t: f64,
    z: &[f64],
) -> Result<f64, NeuralError> {
    expect_kind(params, &[ModelKind::Tapinn, ModelKind::MultiOutput], "generator_forward")?;
    if z.len() != params.dims.d_z {
        return Err(NeuralError::ShapeMismatch(format!(
            "latent has {} dims, config says {}",
            z.len(),
            params.dims.d_z
        )));
    }
    Ok(generator_heads(params, t, z)[0])
}

/// Baseline I: MLP on the explicit parameter, inputs (t, lambda).
pub fn parametric_eval<S: Scalar>(params: &ModelParams, t: S, lambda: f64) -> S {
    let dims = &params.dims;
    let inputs = [t * S::from_f64(1.0 / dims.t_scale), S::from_f64(lambda)];
    mlp3(
        &inputs,
        &params.arrays[slots::NET_W1].data,
        &params.arrays[slots::NET_B1].data,
        &params.arrays[slots::NET_W2].data,
        &params.arrays[slots::NET_B2].data,
        &params.arrays[slots::NET_W3].data,
        &params.arrays[slots::NET_B3].data,
        dims.parametric_hidden,
    )[0]
}

pub fn parametric_forward(
    params: &ModelParams,
    t: f64,
    lambda: f64,
) -> Result<f64, NeuralError> {
    expect_kind(params, &[ModelKind::Parametric], "parametric_forward")?;
    Ok(parametric_eval(params, t, lambda))
}

/// Baseline II: map lambda to the flattened weights of the target net.
pub fn hypernet_forward(params: &ModelParams, lambda: f64) -> Result<Vec<f64>, NeuralError> {
    expect_kind(params, &[ModelKind::Hypernet], "hypernet_forward")?;
    Ok(mlp3(
        &[lambda],
        &params.arrays[slots::HYPER_W1].data,
        &params.arrays[slots::HYPER_B1].data,
        &params.arrays[slots::HYPER_W2].data,
        &params.arrays[slots::HYPER_B2].data,
        &params.arrays[slots::HYPER_W3].data,
        &params.arrays[slots::HYPER_B3].data,
        params.dims.hyper_hidden,
    ))
}

/// Evaluate the generated target net [1, th, th, 1] on `t`.
pub fn target_eval<S: Scalar>(weights: &[f64], dims: &Dims, t: S) -> S {
    let lay = TargetLayout::new(dims);
    let th = lay.th;
    let tn = t * S::from_f64(1.0 / dims.t_scale);
    let mut h1 = Vec::with_capacity(th);
    for j in 0..th {
        let acc = tn * S::from_f64(weights[lay.w1(j)]) + S::from_f64(weights[lay.b1(j)]);
        h1.push(acc.tanh());
    }
    let mut h2 = Vec::with_capacity(th);
    for j in 0..th {
        let mut acc = S::from_f64(weights[lay.b2(j)]);
        for (k, x) in h1.iter().enumerate() {
            acc = acc + *x * S::from_f64(weights[lay.w2(j, k)]);
        }
        h2.push(acc.tanh());
    }
    let mut out = S::from_f64(weights[lay.b3()]);
    for (k, x) in h2.iter().enumerate() {
        out = out + *x * S::from_f64(weights[lay.w3(k)]);
    }
    out
}

/// Baseline III forward: encoder + two-head generator, returning
/// (x, learned x') at `t`.
pub fn multi_output_forward(
    params: &ModelParams,
    window: &ObservationWindow,
    t: f64,
) -> Result<(f64, f64), NeuralError> {
    expect_kind(params, &[ModelKind::MultiOutput], "multi_output_forward")?;
    let z = encoder_forward(params, window)?;
    let heads = generator_heads(params, t, &z);
    Ok((heads[0], heads[1]))
}

// ---------------------------------------------------------------------------
// Solution-of-time views used by the physics residual
// ---------------------------------------------------------------------------

/// A conditioned scalar solution x(t) that can be evaluated with plain or
/// dual scalars.
pub trait TimeModel {
    fn eval<S: Scalar>(&self, t: S) -> S;

    /// (x, dx/dt, d2x/dt2) at `t` via a seeded dual evaluation.
    fn time_derivatives(&self, t: f64) -> (f64, f64, f64) {
        let y = self.eval(DualScalar::seed(t));
        (y.v, y.d1, y.d2)
    }
}

/// Generator fixed at a latent vector (head 0).
pub struct ConditionedGenerator<'a> {
    pub params: &'a ModelParams,
    pub z: &'a [f64],
}

impl TimeModel for ConditionedGenerator<'_> {
    fn eval<S: Scalar>(&self, t: S) -> S {
        generator_heads(self.params, t, self.z)[0]
    }
}

/// Parametric baseline fixed at a forcing amplitude.
pub struct ParametricSolution<'a> {
    pub params: &'a ModelParams,
    pub lambda: f64,
}

impl TimeModel for ParametricSolution<'_> {
    fn eval<S: Scalar>(&self, t: S) -> S {
        parametric_eval(self.params, t, self.lambda)
    }
}

/// Generated target net fixed at its weights.
pub struct TargetNet<'a> {
    pub weights: &'a [f64],
    pub dims: &'a Dims,
}

impl TimeModel for TargetNet<'_> {
    fn eval<S: Scalar>(&self, t: S) -> S {
        target_eval(self.weights, self.dims, t)
    }
}
