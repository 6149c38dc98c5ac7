//! Hand-derived backward pass, mirror image of `forward.rs`.

use super::forward::{extract_head, gelu, gelu_prime, scatter_head, Cache};
use super::{EncoderGrads, EncoderParams, PAD};
use crate::linalg::{add_matmul_tn, matmul_nn, matmul_nt, Matrix};

/// Layer-norm backward for one activation matrix.
///
/// Given dY (grad wrt `gamma ⊙ x̂ + beta`), returns dX and accumulates
/// dgamma/dbeta.
fn layer_norm_backward(
    dy: &Matrix,
    xhat: &Matrix,
    invstd: &[f64],
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let (rows, cols) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(rows, cols);
    let n = cols as f64;
    for i in 0..rows {
        let dyr = dy.row(i);
        let xhr = xhat.row(i);
        let mut mg = 0.0;
        let mut mgx = 0.0;
        for j in 0..cols {
            let g = gamma[j] * dyr[j];
            mg += g;
            mgx += g * xhr[j];
            dgamma[j] += dyr[j] * xhr[j];
            dbeta[j] += dyr[j];
        }
        mg /= n;
        mgx /= n;
        let dxr = dx.row_mut(i);
        for j in 0..cols {
            let g = gamma[j] * dyr[j];
            dxr[j] = (g - mg - xhr[j] * mgx) * invstd[i];
        }
    }
    dx
}

fn colsum_into(dy: &Matrix, out: &mut [f64]) {
    for i in 0..dy.rows() {
        for (o, &v) in out.iter_mut().zip(dy.row(i)) {
            *o += v;
        }
    }
}

fn hadamard(x: &mut Matrix, mask: &Matrix) {
    for (v, m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
}

/// Softmax backward restricted to each row's active span `[pad_start, i]`.
fn masked_softmax_backward(dp: &Matrix, p: &Matrix, pad_start: usize) -> Matrix {
    let n = dp.rows();
    let mut ds = Matrix::zeros(n, n);
    for i in pad_start..n {
        let dpr = dp.row(i);
        let pr = p.row(i);
        let mut inner = 0.0;
        for j in pad_start..=i {
            inner += dpr[j] * pr[j];
        }
        let dsr = ds.row_mut(i);
        for j in pad_start..=i {
            dsr[j] = pr[j] * (dpr[j] - inner);
        }
    }
    ds
}

/// Accumulates gradients for one example into `grads`, given the gradient
/// of the loss with respect to the final hidden states.
pub(crate) fn backward_example(
    params: &EncoderParams,
    cache: &Cache,
    d_xfinal: Matrix,
    grads: &mut EncoderGrads,
) {
    let cfg = &params.config;
    let (m_len, d) = (cfg.max_seq_len, cfg.hidden_size);
    let heads = cfg.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let pad_start = cache.pad_start;

    let mut dx = d_xfinal;
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let lg = &mut grads.layers[l];

        // LN after the FFN sublayer
        let d_res2 = layer_norm_backward(
            &dx,
            &lc.xhat2,
            &lc.invstd2,
            &layer.ln2_gamma,
            &mut lg.ln2_gamma,
            &mut lg.ln2_beta,
        );
        let mut d_g = d_res2.clone();
        if let Some(mk) = &lc.g_mask {
            hadamard(&mut d_g, mk);
        }
        let mut d_xmid = d_res2; // residual branch

        // FFN: g = gelu(x_mid·W1 + b1)·W2 + b2
        let mut f_act = lc.f_pre.clone();
        for v in f_act.data_mut() {
            *v = gelu(*v);
        }
        let mut d_fact = matmul_nt(&d_g, &layer.w2);
        add_matmul_tn(&f_act, &d_g, &mut lg.w2);
        colsum_into(&d_g, &mut lg.b2);
        for (v, &pre) in d_fact.data_mut().iter_mut().zip(lc.f_pre.data()) {
            *v *= gelu_prime(pre);
        }
        let d_fpre = d_fact;
        d_xmid.add_scaled(1.0, &matmul_nt(&d_fpre, &layer.w1));
        add_matmul_tn(&lc.x_mid, &d_fpre, &mut lg.w1);
        colsum_into(&d_fpre, &mut lg.b1);

        // LN after the attention sublayer
        let d_res1 = layer_norm_backward(
            &d_xmid,
            &lc.xhat1,
            &lc.invstd1,
            &layer.ln1_gamma,
            &mut lg.ln1_gamma,
            &mut lg.ln1_beta,
        );
        let mut d_a = d_res1.clone();
        if let Some(mk) = &lc.a_mask {
            hadamard(&mut d_a, mk);
        }
        let mut d_xin = d_res1; // residual branch

        // output projection: a = c·Wo + bo
        let d_c = matmul_nt(&d_a, &layer.wo);
        add_matmul_tn(&lc.c, &d_a, &mut lg.wo);
        colsum_into(&d_a, &mut lg.bo);

        // attention heads
        let mut d_q = Matrix::zeros(m_len, d);
        let mut d_k = Matrix::zeros(m_len, d);
        let mut d_v = Matrix::zeros(m_len, d);
        for h in 0..heads {
            let qh = extract_head(&lc.q, h, hd);
            let kh = extract_head(&lc.k, h, hd);
            let vh = extract_head(&lc.v, h, hd);
            let d_ch = extract_head(&d_c, h, hd);

            let p_drop = match &lc.p_mask {
                Some(masks) => {
                    let mut pd = lc.p_raw[h].clone();
                    hadamard(&mut pd, &masks[h]);
                    pd
                }
                None => lc.p_raw[h].clone(),
            };

            // c_h = p_drop · v_h
            let mut d_pdrop = matmul_nt(&d_ch, &vh);
            let mut d_vh = Matrix::zeros(m_len, hd);
            add_matmul_tn(&p_drop, &d_ch, &mut d_vh);

            if let Some(masks) = &lc.p_mask {
                hadamard(&mut d_pdrop, &masks[h]);
            }
            let mut d_s = masked_softmax_backward(&d_pdrop, &lc.p_raw[h], pad_start);
            for v in d_s.data_mut() {
                *v *= scale;
            }

            // s = scale · q_h · k_hᵀ
            let d_qh = matmul_nn(&d_s, &kh);
            let mut d_kh = Matrix::zeros(m_len, hd);
            add_matmul_tn(&d_s, &qh, &mut d_kh);

            scatter_head(&mut d_q, &d_qh, h, hd);
            scatter_head(&mut d_k, &d_kh, h, hd);
            scatter_head(&mut d_v, &d_vh, h, hd);
        }

        // input projections
        d_xin.add_scaled(1.0, &matmul_nt(&d_q, &layer.wq));
        d_xin.add_scaled(1.0, &matmul_nt(&d_k, &layer.wk));
        d_xin.add_scaled(1.0, &matmul_nt(&d_v, &layer.wv));
        add_matmul_tn(&lc.x_in, &d_q, &mut lg.wq);
        add_matmul_tn(&lc.x_in, &d_k, &mut lg.wk);
        add_matmul_tn(&lc.x_in, &d_v, &mut lg.wv);
        colsum_into(&d_q, &mut lg.bq);
        colsum_into(&d_k, &mut lg.bk);
        colsum_into(&d_v, &mut lg.bv);

        dx = d_xin;
    }

    // input stage: dropout, layer norm, embedding lookups
    if let Some(mk) = &cache.in_mask {
        hadamard(&mut dx, mk);
    }
    let d_eraw = layer_norm_backward(
        &dx,
        &cache.xhat_in,
        &cache.invstd_in,
        &params.ln_in_gamma,
        &mut grads.ln_in_gamma,
        &mut grads.ln_in_beta,
    );
    for t in 0..m_len {
        let src = d_eraw.row(t);
        for (g, &v) in grads.positional_embeddings.row_mut(t).iter_mut().zip(src) {
            *g += v;
        }
        let item = cache.window[t];
        if item != PAD {
            for (g, &v) in grads
                .item_embeddings
                .row_mut(item as usize)
                .iter_mut()
                .zip(src)
            {
                *g += v;
            }
        }
    }
}
