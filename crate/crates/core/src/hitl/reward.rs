//! Oracle preferences and the pairwise reward model.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::context::ConditionEmbedding;
use crate::dataset::{ConditionEncoder, PlanSample};
use crate::error::{Error, Result};
use crate::eval::{hierarchy_consistency, instruction_compliance};
use crate::nn::{log_sigmoid, sigmoid, stack_rows, Activation, Adam, AdamConfig, Mlp, Parameters};
use crate::plan::Plan;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::spatial::{attribute_value, green_rate, Attribute, AttributeRegistry, CategoryZoneMapping, Instruction};

/// Anything that scores a plan under a condition; higher is better.
pub trait PlanScorer<T: Scalar> {
    fn score(&self, condition: &ConditionEmbedding<T>, plan: &Plan<T>) -> Result<f64>;
}

/// Lexicographic oracle: compliance first, hierarchy consistency second.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct OracleScore {
    pub compliance: f64,
    pub consistency: f64,
}

pub fn oracle_score<T: Scalar>(plan: &Plan<T>, instruction: &Instruction, mapping: &CategoryZoneMapping) -> Result<OracleScore> {
    let compliance = match instruction_compliance(&plan.config, instruction, mapping, instruction.levels) {
        Ok(c) => c,
        Err(Error::EmptyConfiguration) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(OracleScore { compliance, consistency: hierarchy_consistency(&plan.config, &plan.zone_map, mapping)? })
}

/// Smooth synthetic reward: per slot, one minus the distance between the
/// realized attribute and the centre of the requested level; averaged over
/// slots. An empty plan scores 0.
#[derive(Clone, Debug)]
pub struct OracleReward {
    pub registry: AttributeRegistry,
    pub mapping: CategoryZoneMapping,
}

impl<T: Scalar> PlanScorer<T> for OracleReward {
    fn score(&self, condition: &ConditionEmbedding<T>, plan: &Plan<T>) -> Result<f64> {
        let instruction = condition
            .decode_instruction(&self.registry)
            .ok_or_else(|| Error::InvalidArgument("condition carries no instruction".into()))?;
        let mut total = 0.0;
        for (&attribute, &level) in &instruction.slots {
            let value = match attribute_value(&plan.config, &self.mapping, attribute) {
                Ok(v) => v.to_f64_lossy(),
                Err(Error::EmptyConfiguration) => return Ok(0.0),
                Err(e) => return Err(e),
            };
            let centre = (level as f64 + 0.5) / instruction.levels as f64;
            total += 1.0 - (value - centre).abs();
        }
        Ok(total / instruction.slots.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceSource {
    Oracle,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PreferencePair<T = f64> {
    pub condition: ConditionEmbedding<T>,
    pub preferred: Plan<T>,
    pub rejected: Plan<T>,
    pub source: PreferenceSource,
}

impl<T: Scalar> PreferencePair<T> {
    pub fn flipped(&self) -> Self {
        Self { preferred: self.rejected.clone(), rejected: self.preferred.clone(), ..self.clone() }
    }
}

/// Plans competing under one condition.
#[derive(Clone, Debug)]
pub struct CandidateSet<T = f64> {
    pub condition: ConditionEmbedding<T>,
    pub instruction: Instruction,
    pub plans: Vec<Plan<T>>,
}

/// Candidate sets built from real plans: each set pairs one sample's context
/// with a random request (a green-rate level, plus a commercial-density level
/// half of the time) and `per_set` distinct plans drawn from the samples.
pub fn candidate_sets_from_samples<T: Scalar>(
    samples: &[PlanSample<T>],
    encoder: &ConditionEncoder<T>,
    sets: usize,
    per_set: usize,
    seed: u64,
) -> Result<Vec<CandidateSet<T>>> {
    if samples.len() < per_set.max(2) {
        return Err(Error::InsufficientData(format!("need at least {} samples", per_set.max(2))));
    }
    let levels = encoder.registry.levels;
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(sets);
    for _ in 0..sets {
        let anchor = &samples[rng.random_range(0..samples.len())];
        let mut slots = BTreeMap::from([(Attribute::GreenRate, rng.random_range(0..levels))]);
        if rng.random::<bool>() {
            slots.insert(Attribute::CommercialDensity, rng.random_range(0..levels));
        }
        let instruction = Instruction::new(slots, levels)?;
        let condition = encoder.condition(&anchor.context, &instruction, 0.0, 0)?.with_provenance(Some(anchor.id.clone()), Some(instruction.clone()));
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let plans = idx[..per_set.max(2)]
            .iter()
            .map(|&k| Plan { config: samples[k].config.clone(), zone_map: samples[k].zone_map.clone() })
            .collect();
        out.push(CandidateSet { condition, instruction, plans });
    }
    Ok(out)
}

/// Draws `count` oracle-labelled pairs. Each draw picks a candidate set and
/// two distinct plans in it; exact oracle ties are skipped.
pub fn synthesize_preferences<T: Scalar>(
    sets: &[CandidateSet<T>],
    mapping: &CategoryZoneMapping,
    count: usize,
    seed: u64,
) -> Result<Vec<PreferencePair<T>>> {
    if sets.is_empty() || sets.iter().any(|s| s.plans.len() < 2) {
        return Err(Error::InsufficientData("every condition needs at least two plans".into()));
    }
    let scores: Vec<Vec<OracleScore>> = sets
        .iter()
        .map(|s| s.plans.iter().map(|p| oracle_score(p, &s.instruction, mapping)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut rng = seeded(seed);
    let mut pairs = Vec::with_capacity(count);
    let budget = 50 * count.max(1);
    for _ in 0..budget {
        if pairs.len() == count {
            break;
        }
        let s = rng.random_range(0..sets.len());
        let mut idx: Vec<usize> = (0..sets[s].plans.len()).collect();
        idx.shuffle(&mut rng);
        let (a, b) = (idx[0], idx[1]);
        let (sa, sb) = (scores[s][a], scores[s][b]);
        let (win, lose) = match sa.partial_cmp(&sb) {
            Some(std::cmp::Ordering::Greater) => (a, b),
            Some(std::cmp::Ordering::Less) => (b, a),
            _ => continue,
        };
        pairs.push(PreferencePair {
            condition: sets[s].condition.clone(),
            preferred: sets[s].plans[win].clone(),
            rejected: sets[s].plans[lose].clone(),
            source: PreferenceSource::Oracle,
        });
    }
    if pairs.len() < count {
        return Err(Error::InsufficientData(format!("only {} untied pairs found", pairs.len())));
    }
    Ok(pairs)
}

/// Per-category share of POIs, green rate, hierarchy consistency and
/// instruction compliance; all zeros for an empty plan.
pub fn plan_features<T: Scalar>(plan: &Plan<T>, instruction: Option<&Instruction>, mapping: &CategoryZoneMapping) -> Result<Vec<T>> {
    let c = plan.config.categories();
    if plan.config.total() <= T::zero() {
        return Ok(vec![T::zero(); c + 3]);
    }
    let mut shares = vec![T::zero(); c];
    for ((_, _, k), &v) in plan.config.counts.indexed_iter() {
        shares[k] += v;
    }
    let total = plan.config.total();
    let mut out: Vec<T> = shares.into_iter().map(|v| v / total).collect();
    out.push(green_rate(&plan.config, mapping)?);
    out.push(T::of(hierarchy_consistency(&plan.config, &plan.zone_map, mapping)?));
    let compliance = match instruction {
        Some(i) => instruction_compliance(&plan.config, i, mapping, i.levels)?,
        None => 0.0,
    };
    out.push(T::of(compliance));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardHyper {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Fraction of pairs held out for the reported accuracy.
    pub holdout: f64,
}

impl Default for RewardHyper {
    fn default() -> Self {
        Self { hidden: 32, lr: 1e-2, epochs: 300, holdout: 0.2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardLog {
    pub loss: Vec<f64>,
    /// Training-pair accuracy after each epoch.
    pub accuracy: Vec<f64>,
    pub heldout_accuracy: Option<f64>,
    pub heldout_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RewardModel<T = f64> {
    pub network: Mlp<T>,
    /// Per-column standardization of `[condition | features]` fitted on
    /// the training rows.
    pub input_mean: Vec<T>,
    pub input_scale: Vec<T>,
    pub condition_dim: usize,
    pub feature_dim: usize,
    pub registry: AttributeRegistry,
    pub mapping: CategoryZoneMapping,
    pub hyper: RewardHyper,
    pub training_log: RewardLog,
    pub seed: u64,
}

impl<T: Scalar> RewardModel<T> {
    pub fn new(
        condition_dim: usize,
        registry: AttributeRegistry,
        mapping: CategoryZoneMapping,
        hyper: RewardHyper,
        seed: u64,
    ) -> Self {
        let feature_dim = mapping.categories() + 3;
        let network = Mlp::new(&[condition_dim + feature_dim, hyper.hidden, 1], Activation::Tanh, Activation::Identity, &mut seeded(seed));
        let width = condition_dim + feature_dim;
        Self {
            network,
            input_mean: vec![T::zero(); width],
            input_scale: vec![T::one(); width],
            condition_dim,
            feature_dim,
            registry,
            mapping,
            hyper,
            training_log: RewardLog::default(),
            seed,
        }
    }

    pub fn input_row(&self, condition: &ConditionEmbedding<T>, plan: &Plan<T>) -> Result<Vec<T>> {
        if condition.dim() != self.condition_dim {
            return Err(Error::dim("condition", self.condition_dim, condition.dim()));
        }
        if plan.config.categories() != self.mapping.categories() {
            return Err(Error::dim("plan categories", self.mapping.categories(), plan.config.categories()));
        }
        let instruction = condition.decode_instruction(&self.registry);
        let mut row = condition.values.clone();
        row.extend(plan_features(plan, instruction.as_ref(), &self.mapping)?);
        for ((v, &m), &s) in row.iter_mut().zip(&self.input_mean).zip(&self.input_scale) {
            *v = (*v - m) * s;
        }
        Ok(row)
    }

    fn pair_rows(&self, pairs: &[PreferencePair<T>]) -> Result<(Array2<T>, Array2<T>)> {
        let good: Vec<Vec<T>> = pairs.iter().map(|p| self.input_row(&p.condition, &p.preferred)).collect::<Result<_>>()?;
        let bad: Vec<Vec<T>> = pairs.iter().map(|p| self.input_row(&p.condition, &p.rejected)).collect::<Result<_>>()?;
        let g: Vec<&[T]> = good.iter().map(Vec::as_slice).collect();
        let b: Vec<&[T]> = bad.iter().map(Vec::as_slice).collect();
        Ok((stack_rows(&g), stack_rows(&b)))
    }

    /// Mean of `-log s(r(preferred) - r(rejected))` and its gradient.
    pub fn pairwise_loss_and_gradient(&self, pairs: &[PreferencePair<T>]) -> Result<(f64, Mlp<T>)> {
        if pairs.is_empty() {
            return Err(Error::InsufficientData("no preference pairs".into()));
        }
        let (good, bad) = self.pair_rows(pairs)?;
        Ok(self.loss_on_rows(&good, &bad))
    }

    fn loss_on_rows(&self, good: &Array2<T>, bad: &Array2<T>) -> (f64, Mlp<T>) {
        let n = T::of(good.nrows() as f64);
        let gc = self.network.forward(good);
        let bc = self.network.forward(bad);
        let mut loss = T::zero();
        let mut d_good = Array2::zeros(gc.out.dim());
        for r in 0..good.nrows() {
            let margin = gc.out[[r, 0]] - bc.out[[r, 0]];
            loss -= log_sigmoid(margin);
            d_good[[r, 0]] = (sigmoid(margin) - T::one()) / n;
        }
        let d_bad = d_good.mapv(|v| -v);
        let mut grad = self.network.zeroed();
        self.network.backward(&gc, &d_good, &mut grad, false);
        self.network.backward(&bc, &d_bad, &mut grad, false);
        ((loss / n).to_f64_lossy(), grad)
    }

    /// Share of pairs whose preferred plan scores strictly higher.
    pub fn pairwise_accuracy(&self, pairs: &[PreferencePair<T>]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::InsufficientData("no preference pairs".into()));
        }
        let (good, bad) = self.pair_rows(pairs)?;
        Ok(accuracy_on_rows(&self.network, &good, &bad))
    }
}

fn fit_standardization<T: Scalar>(model: &mut RewardModel<T>, good: &Array2<T>, bad: &Array2<T>) {
    let rows = ndarray::concatenate![ndarray::Axis(0), good.view(), bad.view()];
    let n = T::of(rows.nrows() as f64);
    for (j, col) in rows.columns().into_iter().enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let sd = var.sqrt();
        model.input_mean[j] = mean;
        model.input_scale[j] = if sd > T::of(1e-9) { sd.recip() } else { T::one() };
    }
}

fn accuracy_on_rows<T: Scalar>(network: &Mlp<T>, good: &Array2<T>, bad: &Array2<T>) -> f64 {
    let g = network.predict(good);
    let b = network.predict(bad);
    let wins = g.iter().zip(b.iter()).filter(|(x, y)| x > y).count();
    wins as f64 / good.nrows() as f64
}

/// Full-batch Adam on the pairwise logistic loss. A seeded shuffle holds out
/// `hyper.holdout` of the pairs (when that leaves at least one) for the
/// reported accuracy.
pub fn train_reward_model<T: Scalar>(
    pairs: &[PreferencePair<T>],
    registry: &AttributeRegistry,
    mapping: &CategoryZoneMapping,
    hyper: &RewardHyper,
    seed: u64,
) -> Result<RewardModel<T>> {
    if pairs.len() < 10 {
        return Err(Error::InsufficientData(format!("need at least 10 preference pairs, got {}", pairs.len())));
    }
    let mut model = RewardModel::new(pairs[0].condition.dim(), registry.clone(), mapping.clone(), hyper.clone(), seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut seeded(seed ^ 0x5eed));
    let held = ((pairs.len() as f64) * hyper.holdout).floor() as usize;
    let (held_idx, train_idx) = order.split_at(held);
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    let (train, heldout) = (pick(train_idx), pick(held_idx));
    let (good, bad) = model.pair_rows(&train)?;
    fit_standardization(&mut model, &good, &bad);
    let (good, bad) = model.pair_rows(&train)?;
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr));
    for epoch in 0..hyper.epochs {
        let (loss, grad) = model.loss_on_rows(&good, &bad);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, detail: "pairwise loss".into() });
        }
        opt.step(&mut model.network, &grad);
        model.training_log.loss.push(loss);
        model.training_log.accuracy.push(accuracy_on_rows(&model.network, &good, &bad));
    }
    model.training_log.heldout_pairs = heldout.len();
    if !heldout.is_empty() {
        model.training_log.heldout_accuracy = Some(model.pairwise_accuracy(&heldout)?);
    }
    Ok(model)
}

pub fn reward_score<T: Scalar>(model: &RewardModel<T>, condition: &ConditionEmbedding<T>, plan: &Plan<T>) -> Result<f64> {
    let row = model.input_row(condition, plan)?;
    Ok(model.network.predict(&stack_rows(&[&row]))[[0, 0]].to_f64_lossy())
}

impl<T: Scalar> PlanScorer<T> for RewardModel<T> {
    fn score(&self, condition: &ConditionEmbedding<T>, plan: &Plan<T>) -> Result<f64> {
        reward_score(self, condition, plan)
    }
}
