//! Shared helpers for integration tests.

use popsteer::encoder::{compute_loss_and_grads, EncoderConfig, EncoderParams, TrainExample};

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        return 0.0;
    }
    (a - b).abs() / denom
}

/// Central finite differences over every encoder parameter; returns the
/// worst relative error against the analytic gradients.
pub fn encoder_gradient_max_err(
    params: &EncoderParams,
    batch: &[(TrainExample, u64)],
    h: f64,
) -> f64 {
    let (_, grads) = compute_loss_and_grads(params, batch).unwrap();
    let analytic = grads.tensors();

    let mut worst: f64 = 0.0;
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        let len = analytic[ti].1.len();
        for i in 0..len {
            let mut p_plus = params.clone();
            p_plus.tensors_mut()[ti].1[i] += h;
            let (l_plus, _) = compute_loss_and_grads(&p_plus, batch).unwrap();

            let mut p_minus = params.clone();
            p_minus.tensors_mut()[ti].1[i] -= h;
            let (l_minus, _) = compute_loss_and_grads(&p_minus, batch).unwrap();

            let numeric = (l_plus - l_minus) / (2.0 * h);
            let err = rel_err(analytic[ti].1[i], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// d=8, single layer, single head toy model with a couple of short
/// training windows.
pub fn tiny_encoder_setup() -> (EncoderParams, Vec<(TrainExample, u64)>) {
    let config = EncoderConfig {
        n_items: 12,
        hidden_size: 8,
        layers: 1,
        heads: 1,
        ffn_size: 16,
        max_seq_len: 5,
        dropout: 0.0,
        lr: 0.001,
        batch: 4,
        max_epochs: 1,
        patience: 1,
        seed: 42,
    };
    let params = popsteer::encoder::init_encoder(&config).unwrap();
    let batch = vec![
        (
            TrainExample::from_sequence(&[1, 4, 2, 7, 3, 9], 5).unwrap(),
            11,
        ),
        (TrainExample::from_sequence(&[0, 5, 11], 5).unwrap(), 12),
        (TrainExample::from_sequence(&[8, 8, 6, 1], 5).unwrap(), 13),
    ];
    (params, batch)
}
