//! Forward pass over a left-padded window, with the activation caches the
//! backward pass needs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderParams, LN_EPS, PAD};
use crate::linalg::{matmul_nn, matmul_nt, Matrix};

#[derive(Debug, Clone)]
pub(crate) struct Window {
    pub slots: Vec<u32>,
    pub pad_start: usize,
}

/// Left-pads (or truncates to the most recent M items) a sequence.
pub(crate) fn make_window(seq: &[u32], m: usize) -> Window {
    let w = seq.len().min(m);
    let mut slots = vec![PAD; m];
    slots[m - w..].copy_from_slice(&seq[seq.len() - w..]);
    Window {
        slots,
        pad_start: m - w,
    }
}

const GELU_COEF: f64 = 0.044715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let a = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (a * (x + GELU_COEF * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_prime(x: f64) -> f64 {
    let a = (2.0 / std::f64::consts::PI).sqrt();
    let u = a * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * a * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Row-wise layer norm; returns (normalized input x̂, 1/std per row) for
/// the backward pass. `out[i] = gamma ⊙ x̂[i] + beta`.
pub(crate) fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut invstd = vec![0.0; rows];
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        invstd[i] = inv;
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..cols {
            let h = (row[j] - mean) * inv;
            xh[j] = h;
            o[j] = gamma[j] * h + beta[j];
        }
    }
    (out, xhat, invstd)
}

/// y = x·W + b, row-wise bias.
pub(crate) fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = matmul_nn(x, w);
    for i in 0..y.rows() {
        for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

/// Copies columns `[h·w..(h+1)·w)` into a dense M×w matrix.
pub(crate) fn extract_head(x: &Matrix, h: usize, w: usize) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w);
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&x.row(i)[h * w..(h + 1) * w]);
    }
    out
}

pub(crate) fn scatter_head(dst: &mut Matrix, src: &Matrix, h: usize, w: usize) {
    for i in 0..dst.rows() {
        dst.row_mut(i)[h * w..(h + 1) * w].copy_from_slice(src.row(i));
    }
}

/// Causal + padding masked row softmax. Row `i` attends to slots
/// `[pad_start, i]`; rows before `pad_start` are zeroed.
pub(crate) fn masked_softmax(scores: &mut Matrix, pad_start: usize) {
    let n = scores.rows();
    for i in 0..n {
        let row = scores.row_mut(i);
        if i < pad_start {
            row.fill(0.0);
            continue;
        }
        let active = &mut row[pad_start..=i];
        let max = active.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in active.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in active.iter_mut() {
            *v /= sum;
        }
        for v in row[..pad_start].iter_mut() {
            *v = 0.0;
        }
        for v in row[i + 1..].iter_mut() {
            *v = 0.0;
        }
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let scale = 1.0 / (1.0 - p);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.gen::<f64>() >= p { scale } else { 0.0 })
            .collect(),
    )
}

fn apply_mask(x: &mut Matrix, mask: &Matrix) {
    for (v, m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per-head attention probabilities (softmax output, pre-dropout).
    pub p_raw: Vec<Matrix>,
    /// Per-head dropout multipliers; absent when dropout is off.
    pub p_mask: Option<Vec<Matrix>>,
    /// Concatenated attention context.
    pub c: Matrix,
    pub a_mask: Option<Matrix>,
    pub xhat1: Matrix,
    pub invstd1: Vec<f64>,
    pub x_mid: Matrix,
    /// FFN pre-activation.
    pub f_pre: Matrix,
    pub g_mask: Option<Matrix>,
    pub xhat2: Matrix,
    pub invstd2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    pub window: Vec<u32>,
    pub pad_start: usize,
    pub e_raw: Matrix,
    pub xhat_in: Matrix,
    pub invstd_in: Vec<f64>,
    pub in_mask: Option<Matrix>,
    pub x0: Matrix,
    pub layers: Vec<LayerCache>,
    pub x_final: Matrix,
}

/// Forward with caches; applies dropout when `dropout_rng` is provided and
/// the configured rate is positive. Mask draw order is fixed: input mask,
/// then per layer: per-head attention masks, attention-output mask, FFN
/// output mask.
pub(crate) fn forward_cached(
    params: &EncoderParams,
    window: &Window,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Cache {
    let cfg = &params.config;
    let (m_len, d) = (cfg.max_seq_len, cfg.hidden_size);
    let heads = cfg.heads;
    let hd = d / heads;
    let p = cfg.dropout;
    let use_dropout = p > 0.0 && dropout_rng.is_some();
    let mut mask = |rows: usize, cols: usize, rng: &mut Option<&mut ChaCha8Rng>| -> Option<Matrix> {
        if use_dropout {
            Some(dropout_mask(rows, cols, p, rng.as_mut().unwrap()))
        } else {
            None
        }
    };

    // Input embeddings: item + position; padded slots carry position only.
    let mut e_raw = Matrix::zeros(m_len, d);
    for t in 0..m_len {
        let row = e_raw.row_mut(t);
        row.copy_from_slice(params.positional_embeddings.row(t));
        let item = window.slots[t];
        if item != PAD {
            for (v, &emb) in row.iter_mut().zip(params.item_embeddings.row(item as usize)) {
                *v += emb;
            }
        }
    }
    let (mut x0, xhat_in, invstd_in) = layer_norm(&e_raw, &params.ln_in_gamma, &params.ln_in_beta);
    let in_mask = mask(m_len, d, &mut dropout_rng);
    if let Some(mk) = &in_mask {
        apply_mask(&mut x0, mk);
    }

    let mut x = x0.clone();
    let mut layer_caches = Vec::with_capacity(cfg.layers);
    let scale = 1.0 / (hd as f64).sqrt();

    for layer in &params.layers {
        let x_in = x.clone();
        let q = linear(&x_in, &layer.wq, &layer.bq);
        let k = linear(&x_in, &layer.wk, &layer.bk);
        let v = linear(&x_in, &layer.wv, &layer.bv);

        let mut c = Matrix::zeros(m_len, d);
        let mut p_raw = Vec::with_capacity(heads);
        let mut p_masks = if use_dropout { Some(Vec::with_capacity(heads)) } else { None };
        for h in 0..heads {
            let qh = extract_head(&q, h, hd);
            let kh = extract_head(&k, h, hd);
            let vh = extract_head(&v, h, hd);
            let mut s = matmul_nt(&qh, &kh);
            for val in s.data_mut() {
                *val *= scale;
            }
            masked_softmax(&mut s, window.pad_start);
            let hm = mask(m_len, m_len, &mut dropout_rng);
            let ch = if let Some(mk) = &hm {
                let mut pd = s.clone();
                apply_mask(&mut pd, mk);
                matmul_nn(&pd, &vh)
            } else {
                matmul_nn(&s, &vh)
            };
            if let Some(masks) = &mut p_masks {
                masks.push(hm.unwrap());
            }
            p_raw.push(s);
            scatter_head(&mut c, &ch, h, hd);
        }

        let mut a = linear(&c, &layer.wo, &layer.bo);
        let a_mask = mask(m_len, d, &mut dropout_rng);
        if let Some(mk) = &a_mask {
            apply_mask(&mut a, mk);
        }
        let mut res1 = a;
        res1.add_scaled(1.0, &x_in);
        let (x_mid, xhat1, invstd1) = layer_norm(&res1, &layer.ln1_gamma, &layer.ln1_beta);

        let f_pre = linear(&x_mid, &layer.w1, &layer.b1);
        let mut f_act = f_pre.clone();
        for val in f_act.data_mut() {
            *val = gelu(*val);
        }
        let mut g = linear(&f_act, &layer.w2, &layer.b2);
        let g_mask = mask(m_len, d, &mut dropout_rng);
        if let Some(mk) = &g_mask {
            apply_mask(&mut g, mk);
        }
        let mut res2 = g;
        res2.add_scaled(1.0, &x_mid);
        let (x_out, xhat2, invstd2) = layer_norm(&res2, &layer.ln2_gamma, &layer.ln2_beta);

        layer_caches.push(LayerCache {
            x_in,
            q,
            k,
            v,
            p_raw,
            p_mask: p_masks,
            c,
            a_mask,
            xhat1,
            invstd1,
            x_mid,
            f_pre,
            g_mask,
            xhat2,
            invstd2,
        });
        x = x_out;
    }

    Cache {
        window: window.slots.clone(),
        pad_start: window.pad_start,
        e_raw,
        xhat_in,
        invstd_in,
        in_mask,
        x0,
        layers: layer_caches,
        x_final: x,
    }
}

/// Dropout-free forward returning only the final hidden states.
pub(crate) fn forward_eval(params: &EncoderParams, window: &Window) -> Matrix {
    forward_cached(params, window, None).x_final
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            n_items: 10,
            hidden_size: 8,
            layers: 2,
            heads: 2,
            ffn_size: 16,
            max_seq_len: 5,
            dropout: 0.5,
            lr: 0.001,
            batch: 4,
            max_epochs: 1,
            patience: 1,
            seed: 5,
        }
    }

    #[test]
    fn make_window_pads_left() {
        let w = make_window(&[7, 8], 5);
        assert_eq!(w.pad_start, 3);
        assert_eq!(w.slots, vec![PAD, PAD, PAD, 7, 8]);
        let w = make_window(&[1, 2, 3, 4, 5, 6, 7], 5);
        assert_eq!(w.pad_start, 0);
        assert_eq!(w.slots, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn causality_later_items_do_not_affect_earlier_states() {
        let params = init_encoder(&cfg()).unwrap();
        let w1 = make_window(&[1, 2, 3, 4, 5], 5);
        let mut w2 = w1.clone();
        w2.slots[3] = 9; // change item at position 3
        let s1 = forward_eval(&params, &w1);
        let s2 = forward_eval(&params, &w2);
        for t in 0..3 {
            for j in 0..8 {
                assert_eq!(s1.get(t, j), s2.get(t, j), "state changed at pos {t}");
            }
        }
        // and the changed position itself must differ
        assert_ne!(s1.row(3), s2.row(3));
    }

    #[test]
    fn eval_equals_train_path_without_dropout() {
        let mut c = cfg();
        c.dropout = 0.0;
        let params = init_encoder(&c).unwrap();
        let w = make_window(&[1, 2, 3], 5);
        let mut rng = crate::rng::rng_from_seed(99);
        let cached = forward_cached(&params, &w, Some(&mut rng));
        let eval = forward_eval(&params, &w);
        assert_eq!(cached.x_final, eval);
    }

    #[test]
    fn dropout_is_deterministic_given_rng_seed() {
        let params = init_encoder(&cfg()).unwrap();
        let w = make_window(&[1, 2, 3], 5);
        let a = forward_cached(&params, &w, Some(&mut crate::rng::rng_from_seed(7))).x_final;
        let b = forward_cached(&params, &w, Some(&mut crate::rng::rng_from_seed(7))).x_final;
        let c = forward_cached(&params, &w, Some(&mut crate::rng::rng_from_seed(8))).x_final;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_over_active_span() {
        let mut s = Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0);
        masked_softmax(&mut s, 1);
        assert!(s.row(0).iter().all(|&v| v == 0.0)); // padded row
        for i in 1..4 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..4 {
                if j < 1 || j > i {
                    assert_eq!(s.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn gelu_prime_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn zero_params_produce_finite_states() {
        let c = cfg();
        let mut params = init_encoder(&c).unwrap();
        params.item_embeddings.fill(0.0);
        params.positional_embeddings.fill(0.0);
        for l in &mut params.layers {
            l.wq.fill(0.0);
            l.wk.fill(0.0);
            l.wv.fill(0.0);
            l.wo.fill(0.0);
            l.w1.fill(0.0);
            l.w2.fill(0.0);
        }
        let w = make_window(&[1, 2], 5);
        let s = forward_eval(&params, &w);
        assert!(s.is_finite());
    }
}
