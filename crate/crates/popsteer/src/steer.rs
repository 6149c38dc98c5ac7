//! Neuron steering: per-neuron weights from effect sizes, hidden-state
//! adjustment, and steered ranking.
//!
//! Steering is inference-only; encoder and autoencoder weights never
//! change. A neuron is suppressed when its effect size exceeds `beta`,
//! boosted when it falls below `−beta`, and untouched otherwise; the
//! adjustment magnitude is `w_j · σ_j` with
//! `w_j = α · |d_j| / max_i |d_i|` (maximum over all neurons).

use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::neurons::NeuronProfile;
use crate::sae::{self, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringConfig {
    /// Strength for popularity-aligned (suppressed) neurons.
    pub alpha_pop: f64,
    /// Strength for tail-aligned (boosted) neurons.
    pub alpha_unpop: f64,
    /// Effect-size threshold for selecting neurons.
    pub beta: f64,
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_pop < 0.0 || self.alpha_unpop < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidConfig(
                "steering strengths and threshold must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Suppress,
    Boost,
    None,
}

/// Per-neuron steering decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub weights: Vec<f64>,
    pub directions: Vec<Direction>,
    /// Real-population standard deviation per neuron.
    pub sigmas: Vec<f64>,
}

impl SteeringPlan {
    pub fn n_neurons(&self) -> usize {
        self.weights.len()
    }

    /// A plan that steers nothing (identity pipeline).
    pub fn identity(n: usize, sigmas: Vec<f64>) -> Self {
        Self {
            weights: vec![0.0; n],
            directions: vec![Direction::None; n],
            sigmas,
        }
    }

    pub fn steered_count(&self) -> usize {
        self.directions
            .iter()
            .filter(|d| !matches!(d, Direction::None))
            .count()
    }

    pub const CSV_HEADER: &'static str = "neuron_id,direction,weight,sigma";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for j in 0..self.n_neurons() {
            let dir = match self.directions[j] {
                Direction::Suppress => "suppress",
                Direction::Boost => "boost",
                Direction::None => "none",
            };
            out.push_str(&format!(
                "{j},{dir},{},{}\n",
                crate::emit::sig6(self.weights[j]),
                crate::emit::sig6(self.sigmas[j])
            ));
        }
        out
    }
}

/// Builds the steering plan from a neuron profile:
/// suppress where `d_j > β`, boost where `d_j < −β`, weight
/// `α · |d_j| / max_i |d_i|` with the max over all neurons.
pub fn compute_plan(profile: &NeuronProfile, config: &SteeringConfig) -> Result<SteeringPlan> {
    config.validate()?;
    let n = profile.n_neurons();
    let max_abs = profile
        .cohens_d
        .iter()
        .fold(0.0f64, |acc, d| acc.max(d.abs()));
    if max_abs == 0.0 {
        return Err(Error::AllZeroEffectSizes);
    }
    let mut weights = vec![0.0; n];
    let mut directions = vec![Direction::None; n];
    for j in 0..n {
        let d = profile.cohens_d[j];
        if d > config.beta {
            directions[j] = Direction::Suppress;
            weights[j] = config.alpha_pop * d.abs() / max_abs;
        } else if d < -config.beta {
            directions[j] = Direction::Boost;
            weights[j] = config.alpha_unpop * d.abs() / max_abs;
        }
    }
    Ok(SteeringPlan {
        weights,
        directions,
        sigmas: profile.std_real.clone(),
    })
}

/// `z'_j = z_j − w_j σ_j` (suppress), `z_j + w_j σ_j` (boost), else `z_j`.
pub fn steer_hidden(z: &[f64], plan: &SteeringPlan) -> Result<Vec<f64>> {
    if z.len() != plan.n_neurons() {
        return Err(Error::DimensionMismatch {
            expected: plan.n_neurons(),
            got: z.len(),
        });
    }
    Ok(z.iter()
        .enumerate()
        .map(|(j, &v)| match plan.directions[j] {
            Direction::Suppress => v - plan.weights[j] * plan.sigmas[j],
            Direction::Boost => v + plan.weights[j] * plan.sigmas[j],
            Direction::None => v,
        })
        .collect())
}

/// Steered user embedding: decode(TopAct(steer(encode(x)))).
pub fn steered_embedding(sae: &SaeParams, x: &[f64], plan: &SteeringPlan) -> Result<Vec<f64>> {
    let z = sae::encode(sae, x)?;
    let z_steered = steer_hidden(&z, plan)?;
    let a = sae::top_act(&z_steered, sae.config.sparsity);
    sae::decode(sae, &a)
}

/// Top-k recommendation list under steering: embeds the sequence, steers,
/// scores every item, drops items already in the sequence, ranks by score
/// (ties by ascending item index).
pub fn steered_rank(
    encoder_params: &EncoderParams,
    sae: &SaeParams,
    plan: &SteeringPlan,
    user_sequence: &[u32],
    k: usize,
) -> Result<Vec<u32>> {
    let x = encoder::encode_user(encoder_params, user_sequence, false)?;
    let p = steered_embedding(sae, &x, plan)?;
    let scores = encoder::score_all(encoder_params, &p)?;
    Ok(crate::eval::rank_top_k(
        &scores,
        user_sequence,
        encoder_params.n_items(),
        k,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn profile_from_d(d: Vec<f64>, sigma: Vec<f64>) -> NeuronProfile {
        let n = d.len();
        NeuronProfile {
            mean_pop: vec![0.0; n],
            std_pop: vec![1.0; n],
            mean_unpop: vec![0.0; n],
            std_unpop: vec![1.0; n],
            mean_real: vec![0.0; n],
            std_real: sigma,
            cohens_d: d,
            degenerate: vec![false; n],
        }
    }

    #[test]
    fn plan_matches_direct_substitution() {
        let profile = profile_from_d(vec![2.0, -1.0, 0.2], vec![1.0; 3]);
        let config = SteeringConfig {
            alpha_pop: 1.0,
            alpha_unpop: 2.0,
            beta: 0.5,
        };
        let plan = compute_plan(&profile, &config).unwrap();
        assert_eq!(plan.directions[0], Direction::Suppress);
        assert_eq!(plan.directions[1], Direction::Boost);
        assert_eq!(plan.directions[2], Direction::None);
        assert!((plan.weights[0] - 1.0).abs() < 1e-12); // 1·2/2
        assert!((plan.weights[1] - 1.0).abs() < 1e-12); // 2·1/2
        assert_eq!(plan.weights[2], 0.0);
    }

    #[test]
    fn beta_above_max_selects_nothing() {
        let profile = profile_from_d(vec![0.5, -0.7, 0.1], vec![1.0; 3]);
        let config = SteeringConfig {
            alpha_pop: 3.0,
            alpha_unpop: 3.0,
            beta: 1.0,
        };
        let plan = compute_plan(&profile, &config).unwrap();
        assert_eq!(plan.steered_count(), 0);
        assert!(plan.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn plan_matches_per_neuron_formula_oracle() {
        let mut rng = crate::rng::rng_from_seed(7);
        for _ in 0..100 {
            let n = rng.gen_range(2..30);
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let config = SteeringConfig {
                alpha_pop: rng.gen_range(0.0..5.0),
                alpha_unpop: rng.gen_range(0.0..5.0),
                beta: rng.gen_range(0.0..2.0),
            };
            let profile = profile_from_d(d.clone(), sigma.clone());
            let plan = match compute_plan(&profile, &config) {
                Ok(p) => p,
                Err(Error::AllZeroEffectSizes) => {
                    assert!(d.iter().all(|&x| x == 0.0));
                    continue;
                }
                Err(e) => panic!("{e:?}"),
            };
            let max_abs = d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for j in 0..n {
                // scalar reference for Eq-style case structure
                let (dir, w) = if d[j] > config.beta {
                    (Direction::Suppress, config.alpha_pop * d[j].abs() / max_abs)
                } else if d[j] < -config.beta {
                    (Direction::Boost, config.alpha_unpop * d[j].abs() / max_abs)
                } else {
                    (Direction::None, 0.0)
                };
                assert_eq!(plan.directions[j], dir);
                assert!((plan.weights[j] - w).abs() < 1e-12);
                // selection matches |d| > β with matching sign
                let selected = !matches!(plan.directions[j], Direction::None);
                assert_eq!(selected, d[j].abs() > config.beta);
            }
        }
    }

    #[test]
    fn monotone_selection_in_beta() {
        let mut rng = crate::rng::rng_from_seed(9);
        let d: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let profile = profile_from_d(d, vec![1.0; 40]);
        let mut prev = usize::MAX;
        for beta in [0.0, 0.5, 1.0, 1.5, 2.0] {
            let plan = compute_plan(
                &profile,
                &SteeringConfig {
                    alpha_pop: 1.0,
                    alpha_unpop: 1.0,
                    beta,
                },
            )
            .unwrap();
            assert!(plan.steered_count() <= prev);
            prev = plan.steered_count();
        }
    }

    #[test]
    fn steer_hidden_arithmetic_and_identity() {
        let mut plan = SteeringPlan::identity(3, vec![0.5, 0.5, 0.5]);
        plan.directions[0] = Direction::Suppress;
        plan.weights[0] = 1.0;
        let z = vec![1.0, 2.0, 3.0];
        let zs = steer_hidden(&z, &plan).unwrap();
        assert!((zs[0] - 0.5).abs() < 1e-12);
        assert_eq!(zs[1], 2.0);
        assert_eq!(zs[2], 3.0);

        let none = SteeringPlan::identity(3, vec![1.0; 3]);
        assert_eq!(steer_hidden(&z, &none).unwrap(), z);
    }

    #[test]
    fn steer_hidden_matches_naive_loop_and_is_bounded() {
        let mut rng = crate::rng::rng_from_seed(15);
        for _ in 0..100 {
            let n = rng.gen_range(2..20);
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let config = SteeringConfig {
                alpha_pop: rng.gen_range(0.0..5.0),
                alpha_unpop: rng.gen_range(0.0..5.0),
                beta: rng.gen_range(0.0..1.5),
            };
            let profile = profile_from_d(d.clone(), sigma.clone());
            let plan = match compute_plan(&profile, &config) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let zs = steer_hidden(&z, &plan).unwrap();
            let max_alpha = config.alpha_pop.max(config.alpha_unpop);
            for j in 0..n {
                let expect = if d[j] > config.beta {
                    z[j] - plan.weights[j] * sigma[j]
                } else if d[j] < -config.beta {
                    z[j] + plan.weights[j] * sigma[j]
                } else {
                    z[j]
                };
                assert!((zs[j] - expect).abs() < 1e-12);
                assert!((zs[j] - z[j]).abs() <= max_alpha * sigma[j] + 1e-12);
            }
        }
    }

    #[test]
    fn weight_normalization_peaks_at_alpha() {
        let profile = profile_from_d(vec![3.0, 1.0, -2.0], vec![1.0; 3]);
        let config = SteeringConfig {
            alpha_pop: 2.5,
            alpha_unpop: 4.0,
            beta: 0.5,
        };
        let plan = compute_plan(&profile, &config).unwrap();
        // argmax-|d| neuron (0) is steered, so its w/α must be exactly 1
        assert!((plan.weights[0] / config.alpha_pop - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_effect_sizes_error() {
        let profile = profile_from_d(vec![0.0; 4], vec![1.0; 4]);
        assert!(matches!(
            compute_plan(
                &profile,
                &SteeringConfig {
                    alpha_pop: 1.0,
                    alpha_unpop: 1.0,
                    beta: 0.0
                }
            ),
            Err(Error::AllZeroEffectSizes)
        ));
    }
}
