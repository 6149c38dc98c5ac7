//! Cross-entropy training with Adam and early stopping on validation nDCG.

use rayon::prelude::*;

use super::backward::backward_example;
use super::forward::{forward_cached, forward_eval, make_window};
use super::{EncoderConfig, EncoderGrads, EncoderParams, TrainExample};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::linalg::{add_matmul_tn, matmul_nn, matmul_nt, Matrix};
use crate::opt::Adam;
use crate::rng::SeedTree;

/// Examples per deterministic accumulation chunk.
const CHUNK: usize = 8;
/// Chunks processed concurrently per wave (bounds peak memory).
const WAVE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_ndcg\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.epoch,
                crate::emit::sig6(r.train_loss),
                crate::emit::sig6(r.val_ndcg)
            ));
        }
        out
    }
}

/// Loss and gradients over a batch; each example carries its dropout key.
/// Returns (mean loss per target, target count, grads scaled for the mean).
pub(crate) fn loss_and_grads_batch(
    params: &EncoderParams,
    batch: &[(TrainExample, u64)],
) -> Result<(f64, EncoderGrads)> {
    let (loss, _count, grads) = loss_grads_counted(params, batch)?;
    Ok((loss, grads))
}

pub(crate) fn loss_grads_counted(
    params: &EncoderParams,
    batch: &[(TrainExample, u64)],
) -> Result<(f64, usize, EncoderGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let total_targets: usize = batch
        .iter()
        .map(|(ex, _)| params.config.max_seq_len - ex.pad_start)
        .sum();
    let inv_total = 1.0 / total_targets as f64;

    let mut total = EncoderGrads::zeros_like(params);
    let mut loss_sum = 0.0;

    let chunks: Vec<&[(TrainExample, u64)]> = batch.chunks(CHUNK).collect();
    for wave in chunks.chunks(WAVE) {
        let partials: Vec<(f64, EncoderGrads)> = wave
            .par_iter()
            .map(|chunk| {
                let mut grads = EncoderGrads::zeros_like(params);
                let mut loss = 0.0;
                for (ex, dropout_key) in chunk.iter() {
                    loss += example_pass(params, ex, *dropout_key, inv_total, &mut grads);
                }
                (loss, grads)
            })
            .collect();
        for (l, g) in partials {
            loss_sum += l;
            total.accumulate(&g);
        }
    }

    Ok((loss_sum * inv_total, total_targets, total))
}

/// Forward + cross-entropy + backward for one example. Gradients are
/// pre-scaled by `inv_total`; returns the summed (unscaled) loss.
fn example_pass(
    params: &EncoderParams,
    ex: &TrainExample,
    dropout_key: u64,
    inv_total: f64,
    grads: &mut EncoderGrads,
) -> f64 {
    let cfg = &params.config;
    let (m_len, d, m_items) = (cfg.max_seq_len, cfg.hidden_size, cfg.n_items);
    let window = super::forward::Window {
        slots: ex.window.clone(),
        pad_start: ex.pad_start,
    };
    let cache = if cfg.dropout > 0.0 {
        let mut rng = crate::rng::rng_from_seed(dropout_key);
        forward_cached(params, &window, Some(&mut rng))
    } else {
        forward_cached(params, &window, None)
    };

    let w = m_len - ex.pad_start;
    let mut h_valid = Matrix::zeros(w, d);
    for (r, t) in (ex.pad_start..m_len).enumerate() {
        h_valid.row_mut(r).copy_from_slice(cache.x_final.row(t));
    }

    // full-softmax cross-entropy at every valid slot
    let mut logits = matmul_nt(&h_valid, &params.item_embeddings);
    debug_assert_eq!(logits.cols(), m_items);
    let mut loss = 0.0;
    for (r, t) in (ex.pad_start..m_len).enumerate() {
        let target = ex.targets[t] as usize;
        let row = logits.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted_target = row[target] - max;
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() - shifted_target;
        // rows become scaled softmax-minus-onehot gradients in place
        for v in row.iter_mut() {
            *v = *v / sum * inv_total;
        }
        row[target] -= inv_total;
    }

    // d(loss)/d(item embeddings) via the scoring path
    add_matmul_tn(&logits, &h_valid, &mut grads.item_embeddings);

    // d(loss)/d(final hidden states)
    let d_hvalid = matmul_nn(&logits, &params.item_embeddings);
    let mut d_xfinal = Matrix::zeros(m_len, d);
    for (r, t) in (ex.pad_start..m_len).enumerate() {
        d_xfinal.row_mut(t).copy_from_slice(d_hvalid.row(r));
    }

    backward_example(params, &cache, d_xfinal, grads);
    loss
}

/// Validation nDCG@k under leave-one-out: rank the held-out item against
/// the full catalog minus the user's training items.
pub fn validation_ndcg(params: &EncoderParams, data: &SplitDataset, k: usize) -> f64 {
    let per_user: Vec<f64> = data
        .users
        .par_iter()
        .map(|u| {
            let window = make_window(&u.train, params.config.max_seq_len);
            let states = forward_eval(params, &window);
            let x = states.row(params.config.max_seq_len - 1);
            let scores: Vec<f64> = (0..params.config.n_items)
                .map(|i| crate::linalg::dot(params.item_embeddings.row(i), x))
                .collect();
            let mut excluded = vec![false; params.config.n_items];
            for &i in &u.train {
                excluded[i as usize] = true;
            }
            let target = u.val as usize;
            if excluded[target] {
                return 0.0;
            }
            let st = scores[target];
            let mut rank = 1usize;
            for (i, &s) in scores.iter().enumerate() {
                if i == target || excluded[i] {
                    continue;
                }
                if s > st || (s == st && i < target) {
                    rank += 1;
                }
            }
            if rank <= k {
                1.0 / ((rank + 1) as f64).log2()
            } else {
                0.0
            }
        })
        .collect();
    if per_user.is_empty() {
        return 0.0;
    }
    per_user.iter().sum::<f64>() / per_user.len() as f64
}

/// Trains with Adam on next-item cross-entropy; stops when validation
/// nDCG@10 fails to improve for `patience` epochs and returns the
/// best-validation checkpoint.
pub fn train_encoder(
    data: &SplitDataset,
    config: &EncoderConfig,
) -> Result<(EncoderParams, TrainingHistory)> {
    config.validate()?;
    let examples: Vec<TrainExample> = data
        .users
        .iter()
        .filter_map(|u| TrainExample::from_sequence(&u.train, config.max_seq_len))
        .collect();
    if examples.is_empty() {
        return Err(Error::InvalidConfig(
            "no user has enough training interactions to form an example".into(),
        ));
    }

    let tree = SeedTree::new(config.seed);
    let mut params = init_params(config)?;
    let mut adam = Adam::new(config.lr);

    let mut history = TrainingHistory::default();
    let mut best: Option<EncoderParams> = None;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut step = 0usize;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        shuffle(&mut order, &mut tree.rng_at("epoch_order", epoch as u64));

        let mut loss_weighted = 0.0;
        let mut targets_seen = 0usize;
        for batch_ids in order.chunks(config.batch) {
            let batch: Vec<(TrainExample, u64)> = batch_ids
                .iter()
                .map(|&i| {
                    let key =
                        tree.seed_at("dropout", (epoch as u64) * examples.len() as u64 + i as u64);
                    (examples[i].clone(), key)
                })
                .collect();
            let (loss, count, grads) = loss_grads_counted(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { step });
            }
            loss_weighted += loss * count as f64;
            targets_seen += count;

            adam.begin_step();
            apply_grads(&mut adam, &mut params, &grads);
            step += 1;
        }

        let val_ndcg = validation_ndcg(&params, data, 10);
        history.rows.push(HistoryRow {
            epoch,
            train_loss: loss_weighted / targets_seen.max(1) as f64,
            val_ndcg,
        });

        if val_ndcg > best_ndcg {
            best_ndcg = val_ndcg;
            best = Some(params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    Ok((best.unwrap_or(params), history))
}

fn init_params(config: &EncoderConfig) -> Result<EncoderParams> {
    super::init_encoder(config)
}

fn shuffle(xs: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

fn apply_grads(adam: &mut Adam, params: &mut EncoderParams, grads: &EncoderGrads) {
    let mut slot = 0;
    let mut upd = |adam: &mut Adam, p: &mut [f64], g: &[f64]| {
        adam.update(slot, p, g);
        slot += 1;
    };
    upd(
        adam,
        params.item_embeddings.data_mut(),
        grads.item_embeddings.data(),
    );
    upd(
        adam,
        params.positional_embeddings.data_mut(),
        grads.positional_embeddings.data(),
    );
    upd(adam, &mut params.ln_in_gamma, &grads.ln_in_gamma);
    upd(adam, &mut params.ln_in_beta, &grads.ln_in_beta);
    for (lp, lg) in params.layers.iter_mut().zip(&grads.layers) {
        upd(adam, lp.wq.data_mut(), lg.wq.data());
        upd(adam, &mut lp.bq, &lg.bq);
        upd(adam, lp.wk.data_mut(), lg.wk.data());
        upd(adam, &mut lp.bk, &lg.bk);
        upd(adam, lp.wv.data_mut(), lg.wv.data());
        upd(adam, &mut lp.bv, &lg.bv);
        upd(adam, lp.wo.data_mut(), lg.wo.data());
        upd(adam, &mut lp.bo, &lg.bo);
        upd(adam, lp.w1.data_mut(), lg.w1.data());
        upd(adam, &mut lp.b1, &lg.b1);
        upd(adam, lp.w2.data_mut(), lg.w2.data());
        upd(adam, &mut lp.b2, &lg.b2);
        upd(adam, &mut lp.ln1_gamma, &lg.ln1_gamma);
        upd(adam, &mut lp.ln1_beta, &lg.ln1_beta);
        upd(adam, &mut lp.ln2_gamma, &lg.ln2_gamma);
        upd(adam, &mut lp.ln2_beta, &lg.ln2_beta);
    }
}
