//! Neuron-level diagnostics: activation statistics under synthetic and
//! real populations, Cohen's d effect sizes, normality checks, head-share
//! analysis of top activators, and the controlled manipulation study.
//!
//! All statistics run over the hidden activations `z` (pre-TopAct), where
//! the interventions also apply.

use rayon::prelude::*;

use crate::data::PopularityPartition;
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{gini, RecommendationBatch};
use crate::sae::{self, SaeParams};
use crate::steer::{steer_hidden, Direction, SteeringPlan};

/// Single-pass running moments (mean through fourth), one track per
/// neuron. Updates use the standard incremental formulas; merging two
/// accumulators is exact pairwise combination, so chunked accumulation in
/// a fixed order is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    pub count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
    m4: Vec<f64>,
}

impl RunningMoments {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
            m3: vec![0.0; width],
            m4: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.width());
        let n1 = self.count as f64;
        self.count += 1;
        let n = self.count as f64;
        for (j, &x) in values.iter().enumerate() {
            let delta = x - self.mean[j];
            let delta_n = delta / n;
            let delta_n2 = delta_n * delta_n;
            let term1 = delta * delta_n * n1;
            self.mean[j] += delta_n;
            self.m4[j] += term1 * delta_n2 * (n * n - 3.0 * n + 3.0)
                + 6.0 * delta_n2 * self.m2[j]
                - 4.0 * delta_n * self.m3[j];
            self.m3[j] += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2[j];
            self.m2[j] += term1;
        }
    }

    /// Exact combination of two accumulators.
    pub fn merge(&mut self, other: &RunningMoments) {
        assert_eq!(self.width(), other.width());
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for j in 0..self.width() {
            let delta = other.mean[j] - self.mean[j];
            let d2 = delta * delta;
            let d3 = d2 * delta;
            let d4 = d2 * d2;
            let m2 = self.m2[j] + other.m2[j] + d2 * na * nb / n;
            let m3 = self.m3[j]
                + other.m3[j]
                + d3 * na * nb * (na - nb) / (n * n)
                + 3.0 * delta * (na * other.m2[j] - nb * self.m2[j]) / n;
            let m4 = self.m4[j]
                + other.m4[j]
                + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
                + 6.0 * d2 * (na * na * other.m2[j] + nb * nb * self.m2[j]) / (n * n)
                + 4.0 * delta * (na * other.m3[j] - nb * self.m3[j]) / n;
            self.mean[j] += delta * nb / n;
            self.m2[j] = m2;
            self.m3[j] = m3;
            self.m4[j] = m4;
        }
        self.count += other.count;
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.mean[j]
    }

    /// Sample variance (n−1 denominator); 0 for fewer than 2 samples.
    pub fn variance(&self, j: usize) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        self.m2[j] / (self.count - 1) as f64
    }

    pub fn std(&self, j: usize) -> f64 {
        self.variance(j).sqrt()
    }

    /// Moment-based skewness g₁ = m₃/m₂^{3/2} (population moments).
    pub fn skewness(&self, j: usize) -> f64 {
        let n = self.count as f64;
        let m2 = self.m2[j] / n;
        if m2 <= 0.0 {
            return 0.0;
        }
        (self.m3[j] / n) / m2.powf(1.5)
    }

    /// Excess kurtosis g₂ = m₄/m₂² − 3 (population moments).
    pub fn excess_kurtosis(&self, j: usize) -> f64 {
        let n = self.count as f64;
        let m2 = self.m2[j] / n;
        if m2 <= 0.0 {
            return 0.0;
        }
        (self.m4[j] / n) / (m2 * m2) - 3.0
    }

    pub fn means(&self) -> &[f64] {
        &self.mean
    }

    pub fn stds(&self) -> Vec<f64> {
        (0..self.width()).map(|j| self.std(j)).collect()
    }
}

/// Hidden-activation moments over a population of sequences, where
/// sequence `i` comes from the pure generator `gen(i)`.
///
/// Per-sequence work runs in parallel; accumulation happens chunk by chunk
/// in index order.
pub fn activation_stats_from<F>(
    encoder: &EncoderParams,
    sae: &SaeParams,
    n: usize,
    gen: F,
) -> Result<RunningMoments>
where
    F: Fn(usize) -> Vec<u32> + Sync,
{
    if n == 0 {
        return Err(Error::EmptyPopulation);
    }
    let width = sae.hidden_width();
    const CHUNK: usize = 256;
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let partials: Vec<Result<RunningMoments>> = starts
        .par_iter()
        .map(|&start| {
            let mut acc = RunningMoments::new(width);
            for i in start..(start + CHUNK).min(n) {
                let seq = gen(i);
                let x = encoder::encode_user(encoder, &seq, false)?;
                let z = sae::encode(sae, &x)?;
                acc.push(&z);
            }
            Ok(acc)
        })
        .collect();
    let mut total = RunningMoments::new(width);
    for p in partials {
        total.merge(&p?);
    }
    Ok(total)
}

/// Moments over an already-materialized set of sequences.
pub fn activation_stats(
    encoder: &EncoderParams,
    sae: &SaeParams,
    sequences: &[Vec<u32>],
) -> Result<RunningMoments> {
    activation_stats_from(encoder, sae, sequences.len(), |i| sequences[i].clone())
}

/// Cohen's d per neuron:
/// `d_j = (μ_pop − μ_unpop) / sqrt((σ²_pop + σ²_unpop)/2)`.
///
/// Neurons with zero pooled variance get `d = 0` and a degeneracy flag.
pub fn cohens_d(pop: &RunningMoments, unpop: &RunningMoments) -> Result<(Vec<f64>, Vec<bool>)> {
    if pop.width() != unpop.width() {
        return Err(Error::DimensionMismatch {
            expected: pop.width(),
            got: unpop.width(),
        });
    }
    if pop.count < 2 || unpop.count < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: pop.count.min(unpop.count) as usize,
        });
    }
    let mut d = vec![0.0; pop.width()];
    let mut degenerate = vec![false; pop.width()];
    for j in 0..pop.width() {
        let pooled = (pop.variance(j) + unpop.variance(j)) / 2.0;
        if pooled > 0.0 {
            d[j] = (pop.mean(j) - unpop.mean(j)) / pooled.sqrt();
        } else {
            degenerate[j] = true;
        }
    }
    Ok((d, degenerate))
}

/// Per-neuron activation statistics under the three populations, plus
/// effect sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronProfile {
    pub mean_pop: Vec<f64>,
    pub std_pop: Vec<f64>,
    pub mean_unpop: Vec<f64>,
    pub std_unpop: Vec<f64>,
    pub mean_real: Vec<f64>,
    pub std_real: Vec<f64>,
    pub cohens_d: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl NeuronProfile {
    pub fn from_moments(
        pop: &RunningMoments,
        unpop: &RunningMoments,
        real: &RunningMoments,
    ) -> Result<Self> {
        let (d, degenerate) = cohens_d(pop, unpop)?;
        Ok(Self {
            mean_pop: pop.means().to_vec(),
            std_pop: pop.stds(),
            mean_unpop: unpop.means().to_vec(),
            std_unpop: unpop.stds(),
            mean_real: real.means().to_vec(),
            std_real: real.stds(),
            cohens_d: d,
            degenerate,
        })
    }

    pub fn n_neurons(&self) -> usize {
        self.cohens_d.len()
    }

    /// Index of the neuron with the largest d (most popularity-aligned).
    pub fn most_positive(&self) -> usize {
        (0..self.n_neurons())
            .max_by(|&a, &b| self.cohens_d[a].partial_cmp(&self.cohens_d[b]).unwrap())
            .unwrap()
    }

    /// Index of the neuron with the smallest d (most tail-aligned).
    pub fn most_negative(&self) -> usize {
        (0..self.n_neurons())
            .min_by(|&a, &b| self.cohens_d[a].partial_cmp(&self.cohens_d[b]).unwrap())
            .unwrap()
    }

    pub const CSV_HEADER: &'static str =
        "neuron_id,mean_pop,std_pop,mean_unpop,std_unpop,mean_real,std_real,cohens_d,degenerate";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let s = crate::emit::sig6;
        for j in 0..self.n_neurons() {
            out.push_str(&format!(
                "{j},{},{},{},{},{},{},{},{}\n",
                s(self.mean_pop[j]),
                s(self.std_pop[j]),
                s(self.mean_unpop[j]),
                s(self.std_unpop[j]),
                s(self.mean_real[j]),
                s(self.std_real[j]),
                s(self.cohens_d[j]),
                u8::from(self.degenerate[j]),
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut profile = NeuronProfile {
            mean_pop: vec![],
            std_pop: vec![],
            mean_unpop: vec![],
            std_unpop: vec![],
            mean_real: vec![],
            std_real: vec![],
            cohens_d: vec![],
            degenerate: vec![],
        };
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    reason: "expected 9 fields".into(),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::MalformedRecord {
                    line: i + 1,
                    reason: format!("bad float {s:?}"),
                })
            };
            profile.mean_pop.push(parse(f[1])?);
            profile.std_pop.push(parse(f[2])?);
            profile.mean_unpop.push(parse(f[3])?);
            profile.std_unpop.push(parse(f[4])?);
            profile.mean_real.push(parse(f[5])?);
            profile.std_real.push(parse(f[6])?);
            profile.cohens_d.push(parse(f[7])?);
            profile.degenerate.push(f[8] == "1");
        }
        Ok(profile)
    }
}

/// Skewness/kurtosis summary with the usual approximate-normality bands.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalityReport {
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    /// Fraction with |skew| < 0.5.
    pub pct_skew_ok: f64,
    /// Fraction with |excess kurtosis| < 1.
    pub pct_kurt_ok: f64,
}

pub fn normality_diagnostics(moments: &RunningMoments) -> Result<NormalityReport> {
    if moments.count < 4 {
        return Err(Error::InsufficientSamples {
            needed: 4,
            got: moments.count as usize,
        });
    }
    let n = moments.width();
    let skewness: Vec<f64> = (0..n).map(|j| moments.skewness(j)).collect();
    let excess_kurtosis: Vec<f64> = (0..n).map(|j| moments.excess_kurtosis(j)).collect();
    let skew_ok = skewness.iter().filter(|s| s.abs() < 0.5).count();
    let kurt_ok = excess_kurtosis.iter().filter(|k| k.abs() < 1.0).count();
    Ok(NormalityReport {
        skewness,
        excess_kurtosis,
        pct_skew_ok: skew_ok as f64 / n as f64,
        pct_kurt_ok: kurt_ok as f64 / n as f64,
    })
}

impl NormalityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("neuron_id,skewness,excess_kurtosis\n");
        for j in 0..self.skewness.len() {
            out.push_str(&format!(
                "{j},{},{}\n",
                crate::emit::sig6(self.skewness[j]),
                crate::emit::sig6(self.excess_kurtosis[j])
            ));
        }
        out
    }
}

/// Fraction of a history's interactions that land on head items.
pub fn head_share(history: &[u32], partition: &PopularityPartition) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let head = history.iter().filter(|&&i| partition.is_head(i)).count();
    Ok(head as f64 / history.len() as f64)
}

/// Head-share summary of a neuron's strongest activators.
#[derive(Debug, Clone, PartialEq)]
pub struct TopActivatorReport {
    pub neuron: usize,
    /// Mean head share of the `top_n` users with the highest activation.
    pub top_mean_h: f64,
    /// Min, lower quartile, median, upper quartile, max of H over all users.
    pub population_h: [f64; 5],
}

/// Ranks users by neuron activation over precomputed embeddings (ties by
/// user index) and summarizes head shares.
pub fn top_activator_report(
    neuron: usize,
    sae: &SaeParams,
    embeddings: &Matrix,
    histories: &[Vec<u32>],
    partition: &PopularityPartition,
    top_n: usize,
) -> Result<TopActivatorReport> {
    let n_users = embeddings.rows();
    if n_users < top_n || n_users == 0 {
        return Err(Error::InsufficientSamples {
            needed: top_n,
            got: n_users,
        });
    }
    let z_col: Vec<f64> = (0..n_users)
        .into_par_iter()
        .map(|i| {
            let z = sae::encode(sae, embeddings.row(i)).expect("dimension checked");
            z[neuron]
        })
        .collect();
    let h: Vec<f64> = histories
        .iter()
        .map(|seq| head_share(seq, partition))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..n_users).collect();
    order.sort_by(|&a, &b| z_col[b].partial_cmp(&z_col[a]).unwrap().then(a.cmp(&b)));
    let top_mean_h = order[..top_n].iter().map(|&i| h[i]).sum::<f64>() / top_n as f64;

    let mut sorted_h = h.clone();
    sorted_h.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (sorted_h.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted_h[lo] * (1.0 - frac) + sorted_h[hi] * frac
    };
    Ok(TopActivatorReport {
        neuron,
        top_mean_h,
        population_h: [
            sorted_h[0],
            quantile(0.25),
            quantile(0.5),
            quantile(0.75),
            sorted_h[sorted_h.len() - 1],
        ],
    })
}

/// Which side of the effect-size axis the manipulation study targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManipulationSign {
    /// Neurons with d > 1 (popularity-aligned).
    Positive,
    /// Neurons with d < −1 (tail-aligned).
    Negative,
}

/// Gini of the top-k lists after suppressing the `k'` strongest-effect
/// neurons of the chosen sign by one real-population standard deviation,
/// for every `k'` in `0..=k_max`.
///
/// `embeddings`/`exclusions` describe the users to re-rank; curve index 0
/// is the unmanipulated baseline.
pub fn manipulation_study(
    encoder: &EncoderParams,
    sae: &SaeParams,
    profile: &NeuronProfile,
    embeddings: &Matrix,
    exclusions: &[Vec<u32>],
    k_max: usize,
    sign: ManipulationSign,
    list_k: usize,
) -> Result<Vec<f64>> {
    let n = profile.n_neurons();
    let mut qualifying: Vec<usize> = (0..n)
        .filter(|&j| match sign {
            ManipulationSign::Positive => profile.cohens_d[j] > 1.0,
            ManipulationSign::Negative => profile.cohens_d[j] < -1.0,
        })
        .collect();
    if qualifying.len() < k_max {
        return Err(Error::NoQualifyingNeurons);
    }
    qualifying.sort_by(|&a, &b| {
        profile.cohens_d[b]
            .abs()
            .partial_cmp(&profile.cohens_d[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });

    let m = encoder.n_items();
    let mut curve = Vec::with_capacity(k_max + 1);
    for kp in 0..=k_max {
        // suppress the top-kp neurons by one standard deviation each
        let mut directions = vec![Direction::None; n];
        let mut weights = vec![0.0; n];
        for &j in &qualifying[..kp] {
            directions[j] = Direction::Suppress;
            weights[j] = 1.0;
        }
        let plan = SteeringPlan {
            weights,
            directions,
            sigmas: profile.std_real.clone(),
        };

        let lists: Vec<Vec<u32>> = (0..embeddings.rows())
            .into_par_iter()
            .map(|i| {
                let z = sae::encode(sae, embeddings.row(i)).expect("dim");
                let zs = steer_hidden(&z, &plan).expect("dim");
                let a = sae::top_act(&zs, sae.config.sparsity);
                let p = sae::decode(sae, &a).expect("dim");
                let scores = encoder::score_all(encoder, &p).expect("dim");
                crate::eval::rank_top_k(&scores, &exclusions[i], m, list_k)
            })
            .collect();
        let batch = RecommendationBatch {
            lists,
            targets: vec![0; embeddings.rows()],
            k: list_k,
        };
        curve.push(gini(&batch.exposure_counts(m))?);
    }
    Ok(curve)
}
