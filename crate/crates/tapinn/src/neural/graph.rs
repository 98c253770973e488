//! Tape-recorded forward passes. Accumulation order matches the plain
//! forwards in [`super::forward`] so tape values agree with tape-free
//! evaluation to the last bit.

use super::forward::{slots, TargetLayout};
use super::{ModelParams, ObservationWindow};
use crate::autodiff::{Lane, NodeId, Tape};

/// Record the LSTM encoder over a batch of windows (one lane per window).
/// Returns the `d_z` latent nodes, each holding every window's component.
pub fn encoder_on_tape<L: Lane>(
    tape: &mut Tape<L>,
    params: &ModelParams,
    windows: &[&ObservationWindow],
) -> Vec<NodeId> {
    let dims = &params.dims;
    let h_n = dims.lstm_hidden;
    let b = windows.len();
    debug_assert!(windows.iter().all(|w| w.len() == dims.window_len));

    let zero = tape.constant_f64s(&vec![0.0; b]);
    let mut h: Vec<NodeId> = vec![zero; h_n];
    let mut c: Vec<NodeId> = vec![zero; h_n];
    let d = 2 + h_n;
    let mut inputs: Vec<NodeId> = Vec::with_capacity(d);
    let mut lane_buf = vec![0.0; b];

    for step in 0..dims.window_len {
        for (i, w) in windows.iter().enumerate() {
            lane_buf[i] = w.xv[step].0;
        }
        let x_node = tape.constant_f64s(&lane_buf);
        for (i, w) in windows.iter().enumerate() {
            lane_buf[i] = w.xv[step].1;
        }
        let v_node = tape.constant_f64s(&lane_buf);

        inputs.clear();
        inputs.push(x_node);
        inputs.push(v_node);
        inputs.extend_from_slice(&h);

        let mut h_next = Vec::with_capacity(h_n);
        let mut c_next = Vec::with_capacity(h_n);
        for j in 0..h_n {
            let row = |gate: usize| (gate * h_n + j) * d;
            let brow = |gate: usize| gate * h_n + j;
            let pre_i = tape.affine(params, &inputs, (slots::ENC_W, row(0)), Some((slots::ENC_B, brow(0))));
            let pre_f = tape.affine(params, &inputs, (slots::ENC_W, row(1)), Some((slots::ENC_B, brow(1))));
            let pre_g = tape.affine(params, &inputs, (slots::ENC_W, row(2)), Some((slots::ENC_B, brow(2))));
            let pre_o = tape.affine(params, &inputs, (slots::ENC_W, row(3)), Some((slots::ENC_B, brow(3))));
            let i_g = tape.sigmoid(pre_i);
            let f_g = tape.sigmoid(pre_f);
            let g_g = tape.tanh(pre_g);
            let o_g = tape.sigmoid(pre_o);
            let fc = tape.mul(f_g, c[j]);
            let ig = tape.mul(i_g, g_g);
            let c_new = tape.add(fc, ig);
            let tc = tape.tanh(c_new);
            let h_new = tape.mul(o_g, tc);
            c_next.push(c_new);
            h_next.push(h_new);
        }
        h = h_next;
        c = c_next;
    }

    (0..dims.d_z)
        .map(|j| {
            tape.affine(
                params,
                &h,
                (slots::ENC_HEAD_W, j * h_n),
                Some((slots::ENC_HEAD_B, j)),
            )
        })
        .collect()
}

/// Record the generator at `(t, z)`; `t_node` is the *raw* time (the t/T
/// normalisation happens here) and `z_nodes` must share its lane width.
/// Returns one node per output head.
pub fn generator_heads_on_tape<L: Lane>(
    tape: &mut Tape<L>,
    params: &ModelParams,
    t_node: NodeId,
    z_nodes: &[NodeId],
) -> Vec<NodeId> {
    let dims = &params.dims;
    let g = dims.gen_hidden;
    let tn = tape.mul_c(t_node, 1.0 / dims.t_scale);
    let mut inputs = Vec::with_capacity(1 + z_nodes.len());
    inputs.push(tn);
    inputs.extend_from_slice(z_nodes);
    let d = inputs.len();

    let mut h1 = Vec::with_capacity(g);
    for j in 0..g {
        let pre = tape.affine(params, &inputs, (slots::GEN_W1, j * d), Some((slots::GEN_B1, j)));
        h1.push(tape.tanh(pre));
    }
    let mut h2 = Vec::with_capacity(g);
    for j in 0..g {
        let pre = tape.affine(params, &h1, (slots::GEN_W2, j * g), Some((slots::GEN_B2, j)));
        h2.push(tape.tanh(pre));
    }
    let n_out = params.arrays[slots::GEN_B3].data.len();
    (0..n_out)
        .map(|o| tape.affine(params, &h2, (slots::GEN_W3, o * g), Some((slots::GEN_B3, o))))
        .collect()
}

/// Record the parametric baseline at `(t, lambda)`.
pub fn parametric_on_tape<L: Lane>(
    tape: &mut Tape<L>,
    params: &ModelParams,
    t_node: NodeId,
    lambda_node: NodeId,
) -> NodeId {
    let dims = &params.dims;
    let p = dims.parametric_hidden;
    let tn = tape.mul_c(t_node, 1.0 / dims.t_scale);
    let inputs = [tn, lambda_node];
    let mut h1 = Vec::with_capacity(p);
    for j in 0..p {
        let pre = tape.affine(params, &inputs, (slots::NET_W1, j * 2), Some((slots::NET_B1, j)));
        h1.push(tape.tanh(pre));
    }
    let mut h2 = Vec::with_capacity(p);
    for j in 0..p {
        let pre = tape.affine(params, &h1, (slots::NET_W2, j * p), Some((slots::NET_B2, j)));
        h2.push(tape.tanh(pre));
    }
    tape.affine(params, &h2, (slots::NET_W3, 0), Some((slots::NET_B3, 0)))
}

/// Record the hypernetwork at `lambda`, returning the generated target
/// weights as single-lane nodes in flat layout order.
pub fn hypernet_on_tape<L: Lane>(
    tape: &mut Tape<L>,
    params: &ModelParams,
    lambda: f64,
) -> Vec<NodeId> {
    let dims = &params.dims;
    let hh = dims.hyper_hidden;
    let lam = tape.scalar(lambda);
    let inputs = [lam];
    let mut h1 = Vec::with_capacity(hh);
    for j in 0..hh {
        let pre = tape.affine(params, &inputs, (slots::HYPER_W1, j), Some((slots::HYPER_B1, j)));
        h1.push(tape.tanh(pre));
    }
    let mut h2 = Vec::with_capacity(hh);
    for j in 0..hh {
        let pre = tape.affine(params, &h1, (slots::HYPER_W2, j * hh), Some((slots::HYPER_B2, j)));
        h2.push(tape.tanh(pre));
    }
    (0..dims.target_weight_count())
        .map(|j| tape.affine(params, &h2, (slots::HYPER_W3, j * hh), Some((slots::HYPER_B3, j))))
        .collect()
}

/// Record the generated target net on `t_node`, with weights taken from the
/// hypernetwork's output nodes so gradients flow back through it.
pub fn target_on_tape<L: Lane>(
    tape: &mut Tape<L>,
    params: &ModelParams,
    target_weights: &[NodeId],
    t_node: NodeId,
) -> NodeId {
    let dims = &params.dims;
    let lay = TargetLayout::new(dims);
    let th = lay.th;
    let tn = tape.mul_c(t_node, 1.0 / dims.t_scale);

    let mut h1 = Vec::with_capacity(th);
    for j in 0..th {
        let pre = tape.lin_comb(
            &[tn],
            &target_weights[lay.w1(j)..=lay.w1(j)],
            Some(target_weights[lay.b1(j)]),
        );
        h1.push(tape.tanh(pre));
    }
    let mut h2 = Vec::with_capacity(th);
    for j in 0..th {
        let pre = tape.lin_comb(
            &h1,
            &target_weights[lay.w2(j, 0)..lay.w2(j, 0) + th],
            Some(target_weights[lay.b2(j)]),
        );
        h2.push(tape.tanh(pre));
    }
    tape.lin_comb(
        &h2,
        &target_weights[lay.w3(0)..lay.w3(0) + th],
        Some(target_weights[lay.b3()]),
    )
}

#[cfg(test)]
mod tests {
    use super::super::{
        encoder_forward, generator_heads, hypernet_forward, init_params, target_eval, Dims,
        ModelKind, ModelParams, ObservationWindow,
    };
    use super::*;
    use crate::autodiff::{fd_grad, DualScalar, GradientVector, ParamStore, Tape};

    fn tiny_dims() -> Dims {
        Dims {
            window_len: 4,
            lstm_hidden: 3,
            d_z: 2,
            gen_hidden: 5,
            parametric_hidden: 4,
            hyper_hidden: 3,
            target_hidden: 2,
            t_scale: 10.0,
        }
    }

    fn windows(n: usize, len: usize) -> Vec<ObservationWindow> {
        (0..n)
            .map(|i| ObservationWindow {
                f0: 0.3 + 0.1 * i as f64,
                xv: (0..len)
                    .map(|k| {
                        let t = k as f64 * 0.3 + i as f64;
                        (t.sin() * 0.8, t.cos() * 0.4)
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn encoder_tape_matches_plain_forward() {
        let dims = tiny_dims();
        let p = init_params(ModelKind::Tapinn, 17, &dims);
        let ws = windows(3, dims.window_len);
        let refs: Vec<&ObservationWindow> = ws.iter().collect();
        let mut tape: Tape<f64> = Tape::new();
        let z_nodes = encoder_on_tape(&mut tape, &p, &refs);
        for (i, w) in ws.iter().enumerate() {
            let z = encoder_forward(&p, w).unwrap();
            for (j, node) in z_nodes.iter().enumerate() {
                let got = tape.lane_values(*node)[i];
                assert!(
                    (got - z[j]).abs() < 1e-14,
                    "window {i} z[{j}]: tape {got} plain {}",
                    z[j]
                );
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let p = init_params(ModelKind::Tapinn, 8, &dims);
        let ws = windows(2, dims.window_len);
        let refs: Vec<&ObservationWindow> = ws.iter().collect();

        // loss: sum over windows and latent dims of z^2
        let build = |tape: &mut Tape<f64>, p: &ModelParams| {
            let z = encoder_on_tape(tape, p, &refs);
            let sq: Vec<_> = z.iter().map(|&n| tape.mul(n, n)).collect();
            let total = tape.sum_n(&sq);
            tape.sum(total)
        };
        let mut tape: Tape<f64> = Tape::new();
        let out = build(&mut tape, &p);
        let loss = tape.value(out);
        let mut g = GradientVector::zeros_like(&p);
        tape.backward(&p, &[(out, 0, 1.0)], &mut g);

        let raw: Vec<Vec<f64>> = p.arrays.iter().map(|a| a.data.clone()).collect();
        let eval = |arrs: &[Vec<f64>]| {
            let mut q = p.clone();
            for (slot, a) in arrs.iter().enumerate() {
                q.array_mut(slot).copy_from_slice(a);
            }
            ws.iter()
                .map(|w| encoder_forward(&q, w).unwrap().iter().map(|z| z * z).sum::<f64>())
                .sum::<f64>()
        };
        assert!((loss - eval(&raw)).abs() < 1e-12);
        let fd = fd_grad(&raw, eval, 1e-5);
        for slot in 0..raw.len() {
            for i in 0..raw[slot].len() {
                let a = g.arrays[slot][i];
                let b = fd[slot][i];
                // absolute floor at central-difference rounding noise
                assert!(
                    (a - b).abs() <= 1e-5 * a.abs().max(b.abs()) + 1e-9,
                    "slot {slot} [{i}]: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn generator_dual_tape_matches_plain_dual_eval() {
        let dims = tiny_dims();
        let p = init_params(ModelKind::Tapinn, 5, &dims);
        let z = vec![0.4, -0.2];
        let ts = [0.3, 2.0, 7.7];
        let mut tape: Tape<DualScalar> = Tape::new();
        let lanes: Vec<DualScalar> = ts.iter().map(|&t| DualScalar::seed(t)).collect();
        let t_node = tape.constant(&lanes);
        let z_nodes: Vec<_> = z
            .iter()
            .map(|&zj| {
                let s = tape.constant(&[DualScalar::constant(zj)]);
                tape.bcast(s, ts.len())
            })
            .collect();
        let heads = generator_heads_on_tape(&mut tape, &p, t_node, &z_nodes);
        for (l, &t) in ts.iter().enumerate() {
            let plain = generator_heads(&p, DualScalar::seed(t), &z)[0];
            let got = tape.lane_values(heads[0])[l];
            assert!((got.v - plain.v).abs() < 1e-14, "v at lane {l}");
            assert!((got.d1 - plain.d1).abs() < 1e-14, "d1 at lane {l}");
            assert!((got.d2 - plain.d2).abs() < 1e-13, "d2 at lane {l}");
        }
    }

    #[test]
    fn generator_residual_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let p = init_params(ModelKind::Tapinn, 2, &dims);
        let z = vec![0.1, 0.6];
        let ts = [0.5, 4.0];

        // loss = mean_l (x''(t_l) + x(t_l))^2
        let eval = |arrs: &[Vec<f64>]| {
            let mut q = p.clone();
            for (slot, a) in arrs.iter().enumerate() {
                q.array_mut(slot).copy_from_slice(a);
            }
            ts.iter()
                .map(|&t| {
                    let y = generator_heads(&q, DualScalar::seed(t), &z)[0];
                    let r = y.d2 + y.v;
                    r * r
                })
                .sum::<f64>()
                / ts.len() as f64
        };

        let mut tape: Tape<DualScalar> = Tape::new();
        let lanes: Vec<DualScalar> = ts.iter().map(|&t| DualScalar::seed(t)).collect();
        let t_node = tape.constant(&lanes);
        let z_nodes: Vec<_> = z
            .iter()
            .map(|&zj| {
                let s = tape.constant(&[DualScalar::constant(zj)]);
                tape.bcast(s, ts.len())
            })
            .collect();
        let x = generator_heads_on_tape(&mut tape, &p, t_node, &z_nodes)[0];
        let xdd = tape.extract_d2(x);
        let r = tape.add(xdd, x);
        let r2 = tape.mul(r, r);
        let loss_node = tape.mean(r2);
        let raw: Vec<Vec<f64>> = p.arrays.iter().map(|a| a.data.clone()).collect();
        assert!((tape.value(loss_node) - eval(&raw)).abs() < 1e-13);

        let mut g = GradientVector::zeros_like(&p);
        tape.backward(&p, &[(loss_node, 0, 1.0)], &mut g);
        let fd = fd_grad(&raw, eval, 1e-5);
        // generator arrays only; encoder arrays get zero gradient
        for slot in 0..raw.len() {
            for i in 0..raw[slot].len() {
                let a = g.arrays[slot][i];
                let b = fd[slot][i];
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
                assert!(rel < 1e-4, "slot {slot} [{i}]: {a} vs {b}");
            }
        }
    }

    #[test]
    fn hypernet_target_tape_matches_plain_and_finite_differences() {
        let dims = tiny_dims();
        let p = init_params(ModelKind::Hypernet, 31, &dims);
        let lambda = 0.5;
        let ts = [1.0, 6.0];

        let eval = |arrs: &[Vec<f64>]| {
            let mut q = p.clone();
            for (slot, a) in arrs.iter().enumerate() {
                q.array_mut(slot).copy_from_slice(a);
            }
            let wts = hypernet_forward(&q, lambda).unwrap();
            ts.iter()
                .map(|&t| {
                    let y = target_eval(&wts, &dims, DualScalar::seed(t));
                    let r = y.d2 + 0.5 * y.v;
                    r * r
                })
                .sum::<f64>()
                / ts.len() as f64
        };

        let mut tape: Tape<DualScalar> = Tape::new();
        let tw = hypernet_on_tape(&mut tape, &p, lambda);
        // plain parity of generated weights
        let plain_w = hypernet_forward(&p, lambda).unwrap();
        for (j, &n) in tw.iter().enumerate() {
            assert!((tape.lane_values(n)[0].v - plain_w[j]).abs() < 1e-14, "w[{j}]");
        }
        let lanes: Vec<DualScalar> = ts.iter().map(|&t| DualScalar::seed(t)).collect();
        let t_node = tape.constant(&lanes);
        let x = target_on_tape(&mut tape, &p, &tw, t_node);
        for (l, &t) in ts.iter().enumerate() {
            let plain = target_eval(&plain_w, &dims, DualScalar::seed(t));
            let got = tape.lane_values(x)[l];
            assert!((got.v - plain.v).abs() < 1e-14);
            assert!((got.d2 - plain.d2).abs() < 1e-12);
        }
        let xdd = tape.extract_d2(x);
        let xh = tape.mul_c(x, 0.5);
        let r = tape.add(xdd, xh);
        let r2 = tape.mul(r, r);
        let loss_node = tape.mean(r2);
        let raw: Vec<Vec<f64>> = p.arrays.iter().map(|a| a.data.clone()).collect();
        assert!((tape.value(loss_node) - eval(&raw)).abs() < 1e-13);
        let mut g = GradientVector::zeros_like(&p);
        tape.backward(&p, &[(loss_node, 0, 1.0)], &mut g);
        let fd = fd_grad(&raw, eval, 1e-5);
        for slot in 0..raw.len() {
            for i in 0..raw[slot].len() {
                let a = g.arrays[slot][i];
                let b = fd[slot][i];
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
                assert!(rel < 1e-4, "slot {slot} [{i}]: {a} vs {b}");
            }
        }
    }

    #[test]
    fn parametric_tape_matches_plain() {
        let dims = tiny_dims();
        let p = init_params(ModelKind::Parametric, 44, &dims);
        let mut tape: Tape<f64> = Tape::new();
        let ts = [0.0, 5.0, 9.9];
        let t_node = tape.constant_f64s(&ts);
        let lam = tape.scalar(0.8);
        let lam_b = tape.bcast(lam, 3);
        let out = parametric_on_tape(&mut tape, &p, t_node, lam_b);
        for (l, &t) in ts.iter().enumerate() {
            let plain = super::super::parametric_forward(&p, t, 0.8).unwrap();
            assert!((tape.lane_values(out)[l] - plain).abs() < 1e-14);
        }
        let _ = p.array(0); // silence unused import warnings in some configs
    }
}
