//! A small causal self-attention next-item model.
//!
//! Two post-norm transformer blocks over item + position embeddings,
//! trained with full-softmax cross-entropy over every position of each
//! user's training sequence. The final-position hidden state is the user
//! embedding consumed by the autoencoder stages.
//!
//! Sequences are left-padded (or truncated) to `max_seq_len`; padded slots
//! are masked out of attention and loss.

mod backward;
mod forward;
mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeedTree;

pub use train::{train_encoder, TrainingHistory};

pub(crate) const LN_EPS: f64 = 1e-12;
/// Sentinel item index marking a padded slot.
pub(crate) const PAD: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Catalog size m.
    pub n_items: usize,
    /// Embedding width d.
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_size: usize,
    /// Window length M; longer sequences keep their most recent M items.
    pub max_seq_len: usize,
    /// Applied to input embeddings, attention probabilities and sublayer
    /// outputs during training only.
    pub dropout: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn defaults(n_items: usize) -> Self {
        Self {
            n_items,
            hidden_size: 64,
            layers: 2,
            heads: 2,
            ffn_size: 256,
            max_seq_len: 50,
            dropout: 0.5,
            lr: 0.001,
            batch: 2048,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.hidden_size % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} must be divisible by head count {}",
                self.hidden_size, self.heads
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::InvalidConfig("max_seq_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.n_items == 0 || self.layers == 0 || self.ffn_size == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("zero-sized dimension".into()));
        }
        Ok(())
    }
}

/// Weights of one transformer block. Linear maps are stored input×output,
/// applied as `y = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// m×d, shared between the input lookup and output scoring.
    pub item_embeddings: Matrix,
    /// M×d, indexed by window slot.
    pub positional_embeddings: Matrix,
    pub ln_in_gamma: Vec<f64>,
    pub ln_in_beta: Vec<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    pub fn is_finite(&self) -> bool {
        self.for_each_tensor_ok(|t| t.iter().all(|v| v.is_finite()))
    }

    fn for_each_tensor_ok(&self, mut f: impl FnMut(&[f64]) -> bool) -> bool {
        let mut ok = f(self.item_embeddings.data())
            && f(self.positional_embeddings.data())
            && f(&self.ln_in_gamma)
            && f(&self.ln_in_beta);
        for l in &self.layers {
            ok = ok
                && f(l.wq.data())
                && f(&l.bq)
                && f(l.wk.data())
                && f(&l.bk)
                && f(l.wv.data())
                && f(&l.bv)
                && f(l.wo.data())
                && f(&l.bo)
                && f(l.w1.data())
                && f(&l.b1)
                && f(l.w2.data())
                && f(&l.b2)
                && f(&l.ln1_gamma)
                && f(&l.ln1_beta)
                && f(&l.ln2_gamma)
                && f(&l.ln2_beta);
        }
        ok
    }
}

const INIT_STD: f64 = 0.02;

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, INIT_STD).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Weights drawn from N(0, 0.02²), biases zero, layer norms identity.
/// Deterministic given `config.seed`.
pub fn init_encoder(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let tree = SeedTree::new(config.seed);
    let d = config.hidden_size;
    let ffn = config.ffn_size;

    let item_embeddings = normal_matrix(config.n_items, d, &mut tree.rng("init/item_emb"));
    let positional_embeddings =
        normal_matrix(config.max_seq_len, d, &mut tree.rng("init/pos_emb"));

    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let r = |name: &str, rows: usize, cols: usize| {
            normal_matrix(rows, cols, &mut tree.rng(&format!("init/layer{l}/{name}")))
        };
        layers.push(LayerParams {
            wq: r("wq", d, d),
            bq: vec![0.0; d],
            wk: r("wk", d, d),
            bk: vec![0.0; d],
            wv: r("wv", d, d),
            bv: vec![0.0; d],
            wo: r("wo", d, d),
            bo: vec![0.0; d],
            w1: r("w1", d, ffn),
            b1: vec![0.0; ffn],
            w2: r("w2", ffn, d),
            b2: vec![0.0; d],
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
        });
    }

    Ok(EncoderParams {
        config: config.clone(),
        item_embeddings,
        positional_embeddings,
        ln_in_gamma: vec![1.0; d],
        ln_in_beta: vec![0.0; d],
        layers,
    })
}

/// Final-position hidden state for one sequence.
///
/// Sequences longer than M are truncated to their most recent M items.
/// Eval mode (`train_mode = false`) is deterministic; train mode applies
/// dropout seeded from the model seed (fixed per input).
pub fn encode_user(params: &EncoderParams, sequence: &[u32], train_mode: bool) -> Result<Vec<f64>> {
    let states = hidden_states(params, sequence, train_mode)?;
    Ok(states.row(params.config.max_seq_len - 1).to_vec())
}

/// Final-layer hidden states for every window slot (padded slots included).
pub fn hidden_states(
    params: &EncoderParams,
    sequence: &[u32],
    train_mode: bool,
) -> Result<Matrix> {
    if sequence.is_empty() {
        return Err(Error::EmptySequence);
    }
    let window = forward::make_window(sequence, params.config.max_seq_len);
    if train_mode && params.config.dropout > 0.0 {
        let mut rng = SeedTree::new(params.config.seed).rng("encode_user/dropout");
        let cache = forward::forward_cached(params, &window, Some(&mut rng));
        Ok(cache.x_final)
    } else {
        Ok(forward::forward_eval(params, &window))
    }
}

/// Relevance scores for every catalog item: `s_i = x · item_embedding_i`.
pub fn score_all(params: &EncoderParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.config.hidden_size {
        return Err(Error::DimensionMismatch {
            expected: params.config.hidden_size,
            got: x.len(),
        });
    }
    Ok((0..params.config.n_items)
        .map(|i| crate::linalg::dot(params.item_embeddings.row(i), x))
        .collect())
}

/// Eval-mode embeddings for a batch of sequences (rows follow input order).
pub fn encode_users(params: &EncoderParams, sequences: &[Vec<u32>]) -> Result<Matrix> {
    let d = params.config.hidden_size;
    let mut out = Matrix::zeros(sequences.len(), d);
    let rows: Vec<Vec<f64>> = sequences
        .par_iter()
        .map(|seq| encode_user(params, seq, false))
        .collect::<Result<_>>()?;
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

// ── Checkpoint I/O ──────────────────────────────────────────────────────────

const ENCODER_MAGIC: &[u8; 4] = b"PSEC";
const ENCODER_VERSION: u32 = 1;

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_u32::<LittleEndian>(m.rows() as u32)?;
    w.write_u32::<LittleEndian>(m.cols() as u32)?;
    for &v in m.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    for v in data.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

fn write_vec(w: &mut impl Write, v: &[f64]) -> Result<()> {
    w.write_u32::<LittleEndian>(v.len() as u32)?;
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_vec(r: &mut impl Read) -> Result<Vec<f64>> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut v = vec![0.0; len];
    for x in v.iter_mut() {
        *x = r.read_f64::<LittleEndian>()?;
    }
    Ok(v)
}

pub fn save_encoder(path: &Path, params: &EncoderParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ENCODER_MAGIC)?;
    w.write_u32::<LittleEndian>(ENCODER_VERSION)?;
    let c = &params.config;
    for v in [
        c.n_items,
        c.hidden_size,
        c.layers,
        c.heads,
        c.ffn_size,
        c.max_seq_len,
        c.batch,
        c.max_epochs,
        c.patience,
    ] {
        w.write_u64::<LittleEndian>(v as u64)?;
    }
    w.write_f64::<LittleEndian>(c.dropout)?;
    w.write_f64::<LittleEndian>(c.lr)?;
    w.write_u64::<LittleEndian>(c.seed)?;

    write_matrix(&mut w, &params.item_embeddings)?;
    write_matrix(&mut w, &params.positional_embeddings)?;
    write_vec(&mut w, &params.ln_in_gamma)?;
    write_vec(&mut w, &params.ln_in_beta)?;
    for l in &params.layers {
        write_matrix(&mut w, &l.wq)?;
        write_vec(&mut w, &l.bq)?;
        write_matrix(&mut w, &l.wk)?;
        write_vec(&mut w, &l.bk)?;
        write_matrix(&mut w, &l.wv)?;
        write_vec(&mut w, &l.bv)?;
        write_matrix(&mut w, &l.wo)?;
        write_vec(&mut w, &l.bo)?;
        write_matrix(&mut w, &l.w1)?;
        write_vec(&mut w, &l.b1)?;
        write_matrix(&mut w, &l.w2)?;
        write_vec(&mut w, &l.b2)?;
        write_vec(&mut w, &l.ln1_gamma)?;
        write_vec(&mut w, &l.ln1_beta)?;
        write_vec(&mut w, &l.ln2_gamma)?;
        write_vec(&mut w, &l.ln2_beta)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ENCODER_MAGIC {
        return Err(Error::CorruptFile {
            kind: "encoder checkpoint",
            reason: "bad magic".into(),
        });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != ENCODER_VERSION {
        return Err(Error::BadFileVersion {
            kind: "encoder checkpoint",
            got: version,
            expected: ENCODER_VERSION,
        });
    }
    let mut nums = [0u64; 9];
    for n in nums.iter_mut() {
        *n = r.read_u64::<LittleEndian>()?;
    }
    let dropout = r.read_f64::<LittleEndian>()?;
    let lr = r.read_f64::<LittleEndian>()?;
    let seed = r.read_u64::<LittleEndian>()?;
    let config = EncoderConfig {
        n_items: nums[0] as usize,
        hidden_size: nums[1] as usize,
        layers: nums[2] as usize,
        heads: nums[3] as usize,
        ffn_size: nums[4] as usize,
        max_seq_len: nums[5] as usize,
        batch: nums[6] as usize,
        max_epochs: nums[7] as usize,
        patience: nums[8] as usize,
        dropout,
        lr,
        seed,
    };

    let item_embeddings = read_matrix(&mut r)?;
    let positional_embeddings = read_matrix(&mut r)?;
    let ln_in_gamma = read_vec(&mut r)?;
    let ln_in_beta = read_vec(&mut r)?;
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        layers.push(LayerParams {
            wq: read_matrix(&mut r)?,
            bq: read_vec(&mut r)?,
            wk: read_matrix(&mut r)?,
            bk: read_vec(&mut r)?,
            wv: read_matrix(&mut r)?,
            bv: read_vec(&mut r)?,
            wo: read_matrix(&mut r)?,
            bo: read_vec(&mut r)?,
            w1: read_matrix(&mut r)?,
            b1: read_vec(&mut r)?,
            w2: read_matrix(&mut r)?,
            b2: read_vec(&mut r)?,
            ln1_gamma: read_vec(&mut r)?,
            ln1_beta: read_vec(&mut r)?,
            ln2_gamma: read_vec(&mut r)?,
            ln2_beta: read_vec(&mut r)?,
        });
    }
    Ok(EncoderParams {
        config,
        item_embeddings,
        positional_embeddings,
        ln_in_gamma,
        ln_in_beta,
        layers,
    })
}

// ── Gradients ───────────────────────────────────────────────────────────────

/// Gradient buffers mirroring [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub item_embeddings: Matrix,
    pub positional_embeddings: Matrix,
    pub ln_in_gamma: Vec<f64>,
    pub ln_in_beta: Vec<f64>,
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let d = params.config.hidden_size;
        let ffn = params.config.ffn_size;
        Self {
            item_embeddings: Matrix::zeros(params.config.n_items, d),
            positional_embeddings: Matrix::zeros(params.config.max_seq_len, d),
            ln_in_gamma: vec![0.0; d],
            ln_in_beta: vec![0.0; d],
            layers: (0..params.config.layers)
                .map(|_| LayerGrads {
                    wq: Matrix::zeros(d, d),
                    bq: vec![0.0; d],
                    wk: Matrix::zeros(d, d),
                    bk: vec![0.0; d],
                    wv: Matrix::zeros(d, d),
                    bv: vec![0.0; d],
                    wo: Matrix::zeros(d, d),
                    bo: vec![0.0; d],
                    w1: Matrix::zeros(d, ffn),
                    b1: vec![0.0; ffn],
                    w2: Matrix::zeros(ffn, d),
                    b2: vec![0.0; d],
                    ln1_gamma: vec![0.0; d],
                    ln1_beta: vec![0.0; d],
                    ln2_gamma: vec![0.0; d],
                    ln2_beta: vec![0.0; d],
                })
                .collect(),
        }
    }

    /// self += other
    pub fn accumulate(&mut self, other: &EncoderGrads) {
        fn addv(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        addv(self.item_embeddings.data_mut(), other.item_embeddings.data());
        addv(
            self.positional_embeddings.data_mut(),
            other.positional_embeddings.data(),
        );
        addv(&mut self.ln_in_gamma, &other.ln_in_gamma);
        addv(&mut self.ln_in_beta, &other.ln_in_beta);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            addv(a.wq.data_mut(), b.wq.data());
            addv(&mut a.bq, &b.bq);
            addv(a.wk.data_mut(), b.wk.data());
            addv(&mut a.bk, &b.bk);
            addv(a.wv.data_mut(), b.wv.data());
            addv(&mut a.bv, &b.bv);
            addv(a.wo.data_mut(), b.wo.data());
            addv(&mut a.bo, &b.bo);
            addv(a.w1.data_mut(), b.w1.data());
            addv(&mut a.b1, &b.b1);
            addv(a.w2.data_mut(), b.w2.data());
            addv(&mut a.b2, &b.b2);
            addv(&mut a.ln1_gamma, &b.ln1_gamma);
            addv(&mut a.ln1_beta, &b.ln1_beta);
            addv(&mut a.ln2_gamma, &b.ln2_gamma);
            addv(&mut a.ln2_beta, &b.ln2_beta);
        }
    }
}

impl EncoderParams {
    /// Mutable views of every parameter tensor, in a stable order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("item_embeddings".into(), self.item_embeddings.data_mut()),
            (
                "positional_embeddings".into(),
                self.positional_embeddings.data_mut(),
            ),
            ("ln_in_gamma".into(), self.ln_in_gamma.as_mut_slice()),
            ("ln_in_beta".into(), self.ln_in_beta.as_mut_slice()),
        ];
        for (l, lp) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.wq"), lp.wq.data_mut()));
            out.push((format!("layer{l}.bq"), lp.bq.as_mut_slice()));
            out.push((format!("layer{l}.wk"), lp.wk.data_mut()));
            out.push((format!("layer{l}.bk"), lp.bk.as_mut_slice()));
            out.push((format!("layer{l}.wv"), lp.wv.data_mut()));
            out.push((format!("layer{l}.bv"), lp.bv.as_mut_slice()));
            out.push((format!("layer{l}.wo"), lp.wo.data_mut()));
            out.push((format!("layer{l}.bo"), lp.bo.as_mut_slice()));
            out.push((format!("layer{l}.w1"), lp.w1.data_mut()));
            out.push((format!("layer{l}.b1"), lp.b1.as_mut_slice()));
            out.push((format!("layer{l}.w2"), lp.w2.data_mut()));
            out.push((format!("layer{l}.b2"), lp.b2.as_mut_slice()));
            out.push((format!("layer{l}.ln1_gamma"), lp.ln1_gamma.as_mut_slice()));
            out.push((format!("layer{l}.ln1_beta"), lp.ln1_beta.as_mut_slice()));
            out.push((format!("layer{l}.ln2_gamma"), lp.ln2_gamma.as_mut_slice()));
            out.push((format!("layer{l}.ln2_beta"), lp.ln2_beta.as_mut_slice()));
        }
        out
    }
}

impl EncoderGrads {
    /// Read views of every gradient tensor, aligned with
    /// [`EncoderParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("item_embeddings".into(), self.item_embeddings.data()),
            (
                "positional_embeddings".into(),
                self.positional_embeddings.data(),
            ),
            ("ln_in_gamma".into(), self.ln_in_gamma.as_slice()),
            ("ln_in_beta".into(), self.ln_in_beta.as_slice()),
        ];
        for (l, lg) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.wq"), lg.wq.data()));
            out.push((format!("layer{l}.bq"), lg.bq.as_slice()));
            out.push((format!("layer{l}.wk"), lg.wk.data()));
            out.push((format!("layer{l}.bk"), lg.bk.as_slice()));
            out.push((format!("layer{l}.wv"), lg.wv.data()));
            out.push((format!("layer{l}.bv"), lg.bv.as_slice()));
            out.push((format!("layer{l}.wo"), lg.wo.data()));
            out.push((format!("layer{l}.bo"), lg.bo.as_slice()));
            out.push((format!("layer{l}.w1"), lg.w1.data()));
            out.push((format!("layer{l}.b1"), lg.b1.as_slice()));
            out.push((format!("layer{l}.w2"), lg.w2.data()));
            out.push((format!("layer{l}.b2"), lg.b2.as_slice()));
            out.push((format!("layer{l}.ln1_gamma"), lg.ln1_gamma.as_slice()));
            out.push((format!("layer{l}.ln1_beta"), lg.ln1_beta.as_slice()));
            out.push((format!("layer{l}.ln2_gamma"), lg.ln2_gamma.as_slice()));
            out.push((format!("layer{l}.ln2_beta"), lg.ln2_beta.as_slice()));
        }
        out
    }
}

/// One training example: a left-padded window plus per-slot next-item
/// targets (valid at slots ≥ `pad_start`).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub window: Vec<u32>,
    pub targets: Vec<u32>,
    pub pad_start: usize,
}

impl TrainExample {
    /// Builds the windowed example from a chronological training sequence
    /// (needs at least 2 items to form an input/target pair).
    pub fn from_sequence(train_items: &[u32], max_seq_len: usize) -> Option<Self> {
        let len = train_items.len();
        if len < 2 {
            return None;
        }
        let w = (len - 1).min(max_seq_len);
        let pad_start = max_seq_len - w;
        let mut window = vec![PAD; max_seq_len];
        let mut targets = vec![PAD; max_seq_len];
        for j in 0..w {
            let src = len - 1 - w + j;
            window[pad_start + j] = train_items[src];
            targets[pad_start + j] = train_items[src + 1];
        }
        Some(Self {
            window,
            targets,
            pad_start,
        })
    }
}

/// Mean cross-entropy loss over the batch's valid positions, plus exact
/// analytic gradients for every parameter.
///
/// Dropout masks (when `dropout > 0`) derive from each example's
/// `dropout_key`, so results do not depend on batching or threading.
pub fn compute_loss_and_grads(
    params: &EncoderParams,
    batch: &[(TrainExample, u64)],
) -> Result<(f64, EncoderGrads)> {
    train::loss_and_grads_batch(params, batch)
}
