//! Reward-weighted regression of a generator toward its own high-reward
//! samples.

use serde::{Deserialize, Serialize};

use super::reward::PlanScorer;
use crate::context::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::nn::sample_normal;
use crate::plan::{config_from_normalized, Plan, PlanGenerator, RegressionItem, RewardTunable};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub rounds: usize,
    /// Samples per condition per round; the first is the unperturbed output.
    pub samples: usize,
    pub lr: f64,
    /// Softmax temperature on rewards within a condition.
    pub temperature: f64,
    /// Standard deviation of the per-category log-normal perturbation.
    pub perturbation: f64,
    /// Regression steps per round.
    pub steps: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { rounds: 10, samples: 8, lr: 1e-4, temperature: 0.05, perturbation: 0.3, steps: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub initial_reward: f64,
    /// Held-out mean reward after each round.
    pub round_rewards: Vec<f64>,
    pub regression_loss: Vec<f64>,
}

/// Mean score over `conditions`, condition `i` generated with sub-seed
/// `derive_seed(seed, i)`.
pub fn mean_reward<T: Scalar, G: PlanGenerator<T> + ?Sized>(
    generator: &G,
    scorer: &dyn PlanScorer<T>,
    conditions: &[ConditionEmbedding<T>],
    seed: u64,
) -> Result<f64> {
    if conditions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (i, c) in conditions.iter().enumerate() {
        total += scorer.score(c, &generator.generate_plan(c, derive_seed(seed, i as u64))?)?;
    }
    Ok(total / conditions.len() as f64)
}

fn softmax_weights(rewards: &[f64], temperature: f64) -> Vec<f64> {
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = rewards.iter().map(|r| ((r - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Each round samples plans per training condition, perturbs them with
/// per-category log-normal factors, weights them by `softmax(reward / t)`
/// and regresses the generator toward the weighted mean. The held-out mean
/// reward is logged before training and after every round.
pub fn reward_weighted_finetune<T: Scalar, G: RewardTunable<T> + Clone>(
    generator: &G,
    scorer: &dyn PlanScorer<T>,
    train: &[ConditionEmbedding<T>],
    heldout: &[ConditionEmbedding<T>],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(G, FinetuneLog)> {
    if config.rounds == 0 || config.samples == 0 {
        return Err(Error::InvalidArgument("rounds and samples must be >= 1".into()));
    }
    if !(config.temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let eval_seed = derive_seed(seed, u64::MAX);
    let mut model = generator.clone();
    let mut opt = model.optimizer(config.lr);
    let mut log = FinetuneLog { initial_reward: mean_reward(&model, scorer, heldout, eval_seed)?, ..FinetuneLog::default() };
    let shape = model.shape().clone();
    let categories = shape.categories();

    for round in 0..config.rounds {
        let round_seed = derive_seed(seed, round as u64);
        let mut targets = Vec::with_capacity(train.len());
        for (i, condition) in train.iter().enumerate() {
            let mut outputs = Vec::with_capacity(config.samples);
            let mut rewards = Vec::with_capacity(config.samples);
            for j in 0..config.samples {
                let sub = derive_seed(round_seed, (i * config.samples + j) as u64);
                let mut y = model.normalized_output(condition, sub)?;
                if j > 0 {
                    let mut rng = seeded(sub);
                    let factors: Vec<T> = (0..categories)
                        .map(|_| (T::of(config.perturbation) * sample_normal::<T, _>(&mut rng)).exp())
                        .collect();
                    for (k, v) in y.iter_mut().enumerate() {
                        *v *= factors[k % categories];
                    }
                }
                let zone_map = model.generate_plan(condition, sub)?.zone_map;
                let plan = Plan { config: config_from_normalized(&shape, &y, model.cell_mass())?, zone_map };
                rewards.push(scorer.score(condition, &plan)?);
                outputs.push((sub, y));
            }
            let weights = softmax_weights(&rewards, config.temperature);
            let mut target = vec![T::zero(); shape.tensor_len()];
            for (w, (_, y)) in weights.iter().zip(&outputs) {
                for (t, &v) in target.iter_mut().zip(y) {
                    *t += T::of(*w) * v;
                }
            }
            targets.push((outputs.iter().map(|(s, _)| *s).collect::<Vec<_>>(), target));
        }
        let items: Vec<RegressionItem<'_, T>> = train
            .iter()
            .zip(&targets)
            .flat_map(|(condition, (seeds, target))| {
                seeds.iter().map(move |&seed| RegressionItem { condition, seed, target: target.clone() })
            })
            .collect();
        let mut loss = 0.0;
        for _ in 0..config.steps {
            loss = model.regression_step(&mut opt, &items)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: round, detail: "reward-weighted regression".into() });
            }
        }
        log.regression_loss.push(loss);
        log.round_rewards.push(mean_reward(&model, scorer, heldout, eval_seed)?);
    }
    Ok((model, log))
}
