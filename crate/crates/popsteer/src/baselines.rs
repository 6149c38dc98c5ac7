//! Reference methods and ablation variants that share the evaluation
//! harness: random sub-sampling of a long list, inverse-popularity
//! rescaling, Gaussian-noise steering, and random-neuron steering.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::neurons::NeuronProfile;
use crate::rng::rng_from_seed;
use crate::steer::{compute_plan, Direction, SteeringConfig, SteeringPlan};

/// Ablation variant selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AblationVariant {
    /// Same neuron selection as the steered method, Gaussian perturbation.
    Noise,
    /// Same weights and directions, random neuron selection.
    RandomSelect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub variant: AblationVariant,
    /// Gaussian standard deviation for the Noise variant.
    pub xi: f64,
    pub seed: u64,
    pub steering: SteeringConfig,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xi < 0.0 {
            return Err(Error::InvalidConfig("xi must be non-negative".into()));
        }
        self.steering.validate()
    }
}

/// Uniformly samples `k` of the top-`t` items without replacement,
/// preserving their original relative order.
pub fn random_baseline(long_list: &[u32], k: usize, seed: u64) -> Result<Vec<u32>> {
    let t = long_list.len();
    if t < k {
        return Err(Error::ListTooShort { needed: k, got: t });
    }
    if t == k {
        return Ok(long_list.to_vec());
    }
    // Floyd's algorithm for a uniform k-subset of 0..t
    let mut rng = rng_from_seed(seed);
    let mut chosen = std::collections::BTreeSet::new();
    for j in t - k..t {
        let r = rng.gen_range(0..=j);
        if !chosen.insert(r) {
            chosen.insert(j);
        }
    }
    Ok(chosen.into_iter().map(|i| long_list[i]).collect())
}

/// `s̃_i = s_i / (1 + α·ρ_i)` with `ρ_i = pop(i) / max_j pop(j)`.
pub fn ipr_rescale(scores: &[f64], popularity: &[u64], alpha: f64) -> Vec<f64> {
    debug_assert_eq!(scores.len(), popularity.len());
    let max_pop = popularity.iter().copied().max().unwrap_or(0);
    if max_pop == 0 {
        return scores.to_vec();
    }
    scores
        .iter()
        .zip(popularity)
        .map(|(&s, &p)| s / (1.0 + alpha * (p as f64 / max_pop as f64)))
        .collect()
}

/// Adds independent N(0, ξ²) draws to the selected neurons only.
pub fn noise_ablation(z: &[f64], selected: &[u32], xi: f64, seed: u64) -> Vec<f64> {
    let mut out = z.to_vec();
    if xi == 0.0 || selected.is_empty() {
        return out;
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, xi).expect("xi >= 0");
    for &j in selected {
        out[j as usize] += normal.sample(&mut rng);
    }
    out
}

/// Steering plan over uniformly sampled neurons: draws as many neurons as
/// the profile-driven plan steers at this config, then hands them the
/// steered neurons' (weight, direction) pairs through a seeded random
/// bijection. Sigmas stay each target neuron's own.
pub fn random_select_ablation(
    profile: &NeuronProfile,
    config: &SteeringConfig,
    seed: u64,
) -> Result<SteeringPlan> {
    let reference = compute_plan(profile, config)?;
    let n = reference.n_neurons();
    let mut donors: Vec<(f64, Direction)> = (0..n)
        .filter(|&j| !matches!(reference.directions[j], Direction::None))
        .map(|j| (reference.weights[j], reference.directions[j]))
        .collect();
    let count = donors.len();

    let mut plan = SteeringPlan::identity(n, profile.std_real.clone());
    if count == 0 {
        return Ok(plan);
    }

    let mut rng = rng_from_seed(seed);
    // uniform sample of `count` target neurons without replacement
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let targets = &pool[..count];
    // random bijection: shuffle the donor multiset
    for i in (1..donors.len()).rev() {
        let j = rng.gen_range(0..=i);
        donors.swap(i, j);
    }
    for (&t, &(w, dir)) in targets.iter().zip(&donors) {
        plan.weights[t] = w;
        plan.directions[t] = dir;
    }
    Ok(plan)
}
