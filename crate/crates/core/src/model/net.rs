//! Graph-level building blocks: linear maps, recurrent cells, convolutions,
//! batch normalization, dropout.

use crate::model::params::Bound;
use crate::tensor::{AxSlice, Scalar, Tid};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `x @ w + b` for `x: [N, in]`.
pub fn linear<F: Scalar>(b: &mut Bound<F>, x: Tid, w: &str, bias: &str) -> Tid {
    let w = b.p(w);
    let bias = b.p(bias);
    let y = b.g.matmul(x, w);
    b.g.add(y, bias)
}

/// Inverted dropout with a fresh mask; identity when `active` is false.
pub fn dropout<F: Scalar>(
    b: &mut Bound<F>,
    x: Tid,
    rate: f64,
    active: bool,
    rng: &mut ChaCha8Rng,
) -> Tid {
    if !active || rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = b.g.value(x).shape().to_vec();
    let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        if rng.gen_range(0.0..1.0) < keep {
            F::from_f64(1.0 / keep)
        } else {
            F::from_f64(0.0)
        }
    });
    let mask = b.g.constant(mask);
    b.g.mul(x, mask)
}

pub struct LstmState {
    pub h: Tid,
    pub c: Tid,
}

/// One LSTM step. Weights: `w: [in, 4H]`, `u: [H, 4H]`, `b: [4H]` with gate
/// order (input, forget, cell, output).
pub fn lstm_step<F: Scalar>(
    bd: &mut Bound<F>,
    x: Tid,
    state: &LstmState,
    w: &str,
    u: &str,
    b: &str,
) -> LstmState {
    let h_dim = bd.g.value(state.h).shape()[1];
    let w = bd.p(w);
    let u = bd.p(u);
    let b = bd.p(b);
    let xw = bd.g.matmul(x, w);
    let hu = bd.g.matmul(state.h, u);
    let s = bd.g.add(xw, hu);
    let gates = bd.g.add(s, b);

    let i = bd.g.slice_axis(gates, 1, 0, h_dim);
    let i = bd.g.sigmoid(i);
    let f = bd.g.slice_axis(gates, 1, h_dim, 2 * h_dim);
    let f = bd.g.sigmoid(f);
    let c_tilde = bd.g.slice_axis(gates, 1, 2 * h_dim, 3 * h_dim);
    let c_tilde = bd.g.tanh(c_tilde);
    let o = bd.g.slice_axis(gates, 1, 3 * h_dim, 4 * h_dim);
    let o = bd.g.sigmoid(o);

    let fc = bd.g.mul(f, state.c);
    let ic = bd.g.mul(i, c_tilde);
    let c = bd.g.add(fc, ic);
    let tc = bd.g.tanh(c);
    let h = bd.g.mul(o, tc);
    LstmState { h, c }
}

/// One GRU step. Weights: `w: [in, 3H]`, `u: [H, 3H]`, `b: [3H]` with gate
/// order (reset, update, candidate).
pub fn gru_step<F: Scalar>(
    bd: &mut Bound<F>,
    x: Tid,
    h: Tid,
    w: &str,
    u: &str,
    b: &str,
) -> Tid {
    let h_dim = bd.g.value(h).shape()[1];
    let w = bd.p(w);
    let u = bd.p(u);
    let b = bd.p(b);
    let xw = bd.g.matmul(x, w);
    let hu = bd.g.matmul(h, u);

    let slice3 = |bd: &mut Bound<F>, t: Tid, k: usize| -> Tid {
        bd.g.slice_axis(t, 1, k * h_dim, (k + 1) * h_dim)
    };
    let b_r = bd.g.slice_axis(b, 0, 0, h_dim);
    let b_z = bd.g.slice_axis(b, 0, h_dim, 2 * h_dim);
    let b_n = bd.g.slice_axis(b, 0, 2 * h_dim, 3 * h_dim);

    let xr = slice3(bd, xw, 0);
    let hr = slice3(bd, hu, 0);
    let r = bd.g.add(xr, hr);
    let r = bd.g.add(r, b_r);
    let r = bd.g.sigmoid(r);

    let xz = slice3(bd, xw, 1);
    let hz = slice3(bd, hu, 1);
    let z = bd.g.add(xz, hz);
    let z = bd.g.add(z, b_z);
    let z = bd.g.sigmoid(z);

    let xn = slice3(bd, xw, 2);
    let hn = slice3(bd, hu, 2);
    let rhn = bd.g.mul(r, hn);
    let n = bd.g.add(xn, rhn);
    let n = bd.g.add(n, b_n);
    let n = bd.g.tanh(n);

    // h' = (1 - z) * n + z * h
    let zn = bd.g.mul(z, n);
    let n_minus = bd.g.sub(n, zn);
    let zh = bd.g.mul(z, h);
    bd.g.add(n_minus, zh)
}

/// Same-padded 1-d convolution over the time axis of `x: [B, T, C_in]`.
/// Weight layout: `[K, C_in, C_out]`.
pub fn conv1d_same<F: Scalar>(bd: &mut Bound<F>, x: Tid, w: &str, b: &str) -> Tid {
    let w = bd.p(w);
    let b = bd.p(b);
    let (batch, t, c_in) = {
        let s = bd.g.value(x).shape();
        (s[0], s[1], s[2])
    };
    let (k, c_out) = {
        let s = bd.g.value(w).shape();
        assert_eq!(s[1], c_in, "conv1d input channels");
        (s[0], s[2])
    };
    let pad = (k - 1) / 2;
    let xp = bd.g.pad_zero(x, 1, pad, k - 1 - pad);

    let mut acc: Option<Tid> = None;
    for tap in 0..k {
        let xk = bd.g.slice_axis(xp, 1, tap, tap + t);
        let xk = bd.g.reshape(xk, &[batch * t, c_in]);
        let wk = bd.g.slice_axis(w, 0, tap, tap + 1);
        let wk = bd.g.reshape(wk, &[c_in, c_out]);
        let y = bd.g.matmul(xk, wk);
        acc = Some(match acc {
            Some(a) => bd.g.add(a, y),
            None => y,
        });
    }
    let y = acc.expect("kernel size >= 1");
    let y = bd.g.add(y, b);
    bd.g.reshape(y, &[batch, t, c_out])
}

/// 3x3 stride-2 2-d convolution over `x: [B, H, W, C_in]` with ceil-mode
/// same padding; output `[B, ceil(H/2), ceil(W/2), C_out]`. Weight layout:
/// `[9, C_in, C_out]` indexed by `3*dh + dw`.
pub fn conv2d_stride2<F: Scalar>(bd: &mut Bound<F>, x: Tid, w: &str, b: &str) -> Tid {
    let w = bd.p(w);
    let b = bd.p(b);
    let (batch, h, wd, c_in) = {
        let s = bd.g.value(x).shape();
        (s[0], s[1], s[2], s[3])
    };
    let c_out = bd.g.value(w).shape()[2];
    let h_out = h.div_ceil(2);
    let w_out = wd.div_ceil(2);
    let pad_h = (2 * (h_out - 1) + 3).saturating_sub(h);
    let pad_w = (2 * (w_out - 1) + 3).saturating_sub(wd);
    let xp = bd.g.pad_zero(x, 1, pad_h / 2, pad_h - pad_h / 2);
    let xp = bd.g.pad_zero(xp, 2, pad_w / 2, pad_w - pad_w / 2);
    let hp = h + pad_h;
    let wp = wd + pad_w;

    let mut acc: Option<Tid> = None;
    for dh in 0..3 {
        for dw in 0..3 {
            let spec = vec![
                AxSlice::all(batch),
                AxSlice::strided(dh, (2 * (h_out - 1) + dh + 1).min(hp), 2),
                AxSlice::strided(dw, (2 * (w_out - 1) + dw + 1).min(wp), 2),
                AxSlice::all(c_in),
            ];
            let xk = bd.g.slice(xp, &spec);
            let xk = bd.g.reshape(xk, &[batch * h_out * w_out, c_in]);
            let idx = 3 * dh + dw;
            let wk = bd.g.slice_axis(w, 0, idx, idx + 1);
            let wk = bd.g.reshape(wk, &[c_in, c_out]);
            let y = bd.g.matmul(xk, wk);
            acc = Some(match acc {
                Some(a) => bd.g.add(a, y),
                None => y,
            });
        }
    }
    let y = acc.unwrap();
    let y = bd.g.add(y, b);
    bd.g.reshape(y, &[batch, h_out, w_out, c_out])
}

pub struct BnOut<F: Scalar> {
    pub y: Tid,
    /// Batch statistics for the running-average update (training mode only).
    pub batch_mean: Option<ArrayD<F>>,
    pub batch_var: Option<ArrayD<F>>,
}

/// Batch normalization over `x: [N, C]`. Training mode normalizes with batch
/// statistics; eval mode uses the stored running statistics.
pub fn batch_norm<F: Scalar>(
    bd: &mut Bound<F>,
    x: Tid,
    gamma: &str,
    beta: &str,
    running_mean: &str,
    running_var: &str,
    training: bool,
) -> BnOut<F> {
    let eps = F::from_f64(1e-5);
    let gamma = bd.p(gamma);
    let beta = bd.p(beta);
    if training {
        let n = bd.g.value(x).shape()[0];
        let mean = bd.g.sum_axis_keep(x, 0);
        let mean = bd.g.scale(mean, F::from_f64(1.0 / n as f64));
        let centered = bd.g.sub(x, mean);
        let sq = bd.g.square(centered);
        let var = bd.g.sum_axis_keep(sq, 0);
        let var = bd.g.scale(var, F::from_f64(1.0 / n as f64));
        let var_eps = bd.g.offset(var, eps);
        let std = bd.g.sqrt(var_eps);
        let xhat = bd.g.div(centered, std);
        let scaled = bd.g.mul(xhat, gamma);
        let y = bd.g.add(scaled, beta);
        BnOut {
            y,
            batch_mean: Some(bd.g.value(mean).clone()),
            batch_var: Some(bd.g.value(var).clone()),
        }
    } else {
        let rm = bd.p(running_mean);
        let rv = bd.p(running_var);
        let centered = bd.g.sub(x, rm);
        let rv_eps = bd.g.offset(rv, eps);
        let std = bd.g.sqrt(rv_eps);
        let xhat = bd.g.div(centered, std);
        let scaled = bd.g.mul(xhat, gamma);
        let y = bd.g.add(scaled, beta);
        BnOut { y, batch_mean: None, batch_var: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{glorot, zeros, Params};
    use crate::tensor::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn params_for_conv1d(k: usize, c_in: usize, c_out: usize) -> Params<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Params::new();
        p.insert("w", glorot(&[k, c_in, c_out], k * c_in, k * c_out, &mut rng), true);
        p.insert("b", zeros(&[c_out]), true);
        p
    }

    #[test]
    fn conv1d_matches_naive_convolution() {
        let (batch, t, c_in, c_out, k) = (2usize, 7usize, 3usize, 4usize, 5usize);
        let params = params_for_conv1d(k, c_in, c_out);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ArrayD::from_shape_fn(IxDyn(&[batch, t, c_in]), |_| {
            rand::Rng::gen_range(&mut rng, -1.0..1.0)
        });

        let mut bd = Bound::new(&params, false);
        let xt = bd.g.constant(x.clone());
        let y = conv1d_same(&mut bd, xt, "w", "b");
        let y = bd.g.value(y).clone();

        let w = params.get("w");
        let pad = (k - 1) / 2;
        for bi in 0..batch {
            for ti in 0..t {
                for co in 0..c_out {
                    let mut acc = 0.0f64;
                    for tap in 0..k {
                        let src = ti as isize + tap as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        for ci in 0..c_in {
                            acc += x[[bi, src as usize, ci]] * w[[tap, ci, co]];
                        }
                    }
                    let got = y[[bi, ti, co]];
                    assert!((got - acc).abs() < 1e-12, "({bi},{ti},{co}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv2d_output_shape_is_ceil_halved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = Params::new();
        p.insert("w", glorot(&[9, 2, 3], 18, 27, &mut rng), true);
        p.insert("b", zeros(&[3]), true);
        for (h, w) in [(5usize, 7usize), (4, 4), (1, 3)] {
            let mut bd = Bound::new(&p, false);
            let x = bd.g.constant(ArrayD::from_elem(IxDyn(&[2, h, w, 2]), 1.0f64));
            let y = conv2d_stride2(&mut bd, x, "w", "b");
            assert_eq!(
                bd.g.value(y).shape(),
                &[2, h.div_ceil(2), w.div_ceil(2), 3],
                "h={h} w={w}"
            );
        }
    }

    #[test]
    fn batch_norm_train_normalizes_batch() {
        let mut p = Params::<f64>::new();
        p.insert("g", ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        p.insert("be", zeros(&[2]), true);
        p.insert("rm", zeros(&[1, 2]), false);
        p.insert("rv", ArrayD::from_elem(IxDyn(&[1, 2]), 1.0), false);
        let mut bd = Bound::new(&p, false);
        let x = bd.g.constant(
            ArrayD::from_shape_vec(IxDyn(&[4, 2]), vec![1., 10., 2., 20., 3., 30., 4., 40.])
                .unwrap(),
        );
        let out = batch_norm(&mut bd, x, "g", "be", "rm", "rv", true);
        let y = bd.g.value(out.y);
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| y[[r, c]]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(out.batch_mean.is_some());
    }

    #[test]
    fn lstm_and_gru_steps_have_expected_shapes_and_gradients() {
        let (bsz, in_dim, h_dim) = (3usize, 4usize, 5usize);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = Params::<f64>::new();
        p.insert("w", glorot(&[in_dim, 4 * h_dim], in_dim, 4 * h_dim, &mut rng), true);
        p.insert("u", glorot(&[h_dim, 4 * h_dim], h_dim, 4 * h_dim, &mut rng), true);
        p.insert("b", zeros(&[4 * h_dim]), true);
        p.insert("gw", glorot(&[in_dim, 3 * h_dim], in_dim, 3 * h_dim, &mut rng), true);
        p.insert("gu", glorot(&[h_dim, 3 * h_dim], h_dim, 3 * h_dim, &mut rng), true);
        p.insert("gb", zeros(&[3 * h_dim]), true);

        let mut bd = Bound::new(&p, true);
        let x = bd.g.constant(ArrayD::from_elem(IxDyn(&[bsz, in_dim]), 0.3f64));
        let h0 = bd.g.zeros(&[bsz, h_dim]);
        let c0 = bd.g.zeros(&[bsz, h_dim]);
        let s1 = lstm_step(&mut bd, x, &LstmState { h: h0, c: c0 }, "w", "u", "b");
        let s2 = lstm_step(&mut bd, x, &s1, "w", "u", "b");
        assert_eq!(bd.g.value(s2.h).shape(), &[bsz, h_dim]);

        let hg = gru_step(&mut bd, x, s2.h, "gw", "gu", "gb");
        assert_eq!(bd.g.value(hg).shape(), &[bsz, h_dim]);

        let loss = bd.g.sum(hg);
        let loss = bd.g.square(loss);
        let grads = bd.g.backward(loss);
        // every recurrent weight participates
        for (name, tid) in bd.mounted() {
            assert!(grads[tid.0].is_some(), "no grad for {name}");
        }
    }

    #[test]
    fn dropout_scales_to_preserve_expectation() {
        let mut g = Graph::<f64>::new();
        let _ = &mut g;
        let p = Params::<f64>::new();
        let mut bd = Bound::new(&p, false);
        let x = bd.g.constant(ArrayD::from_elem(IxDyn(&[100, 100]), 1.0f64));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = dropout(&mut bd, x, 0.5, true, &mut rng);
        let mean: f64 =
            bd.g.value(y).iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        // inactive mode is the identity
        let y2 = dropout(&mut bd, x, 0.5, false, &mut rng);
        assert_eq!(y2, x);
    }
}
