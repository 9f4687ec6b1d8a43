//! Conditional adversarial planner. The generator maps a condition and a
//! noise vector to a normalized configuration; the discriminator scores
//! (condition, configuration) pairs and is trained to accept well-planned
//! real samples while rejecting both poorly-planned real samples and fakes.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::ConditionEmbedding;
use crate::dataset::TrainingExample;
use crate::error::{Error, Result};
use crate::nn::{log_sigmoid, sample_normal, sigmoid, stack_rows, Activation, Adam, AdamConfig, Mlp, Parameters};
use crate::plan::{
    config_from_normalized, mean_cell_mass, normalized_counts, GeneratorKind, Plan, PlanGenerator, PlanShape, RegressionItem,
    RewardTunable,
};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;
use crate::spatial::{dominant_zone_map, LandUseConfiguration};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LucganHyper {
    pub hidden: usize,
    pub noise_dim: usize,
    pub lr: f64,
    pub beta1: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LucganHyper {
    fn default() -> Self {
        Self { hidden: 128, noise_dim: 16, lr: 1e-3, beta1: 0.5, epochs: 300, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean discriminator probability on good, bad and generated samples.
    pub score_good: f64,
    pub score_bad: f64,
    pub score_fake: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLog {
    pub epochs: Vec<GanEpoch>,
    /// After training: mean probability on the good training samples.
    pub final_score_good: f64,
    /// After training: mean probability on samples from the untrained generator.
    pub final_score_initial_fake: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanDims {
    pub condition: usize,
    pub noise: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GanWeights<T = f64> {
    pub generator: Mlp<T>,
    pub discriminator: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LucganModel<T = f64> {
    pub dims: GanDims,
    pub shape: PlanShape,
    /// Mean POI count per cell in the training data.
    pub cell_mass: f64,
    pub weights: GanWeights<T>,
    pub hyper: LucganHyper,
    pub training_log: GanLog,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorLoss {
    pub good: f64,
    pub bad: f64,
    pub fake: f64,
}

impl DiscriminatorLoss {
    pub fn total(&self) -> f64 {
        self.good + self.bad + self.fake
    }
}

/// Softplus bias that makes an untrained head emit roughly the mean
/// normalized entry (one unit of mass spread over the categories).
pub(crate) fn output_bias_init(categories: usize) -> f64 {
    let target = 1.0 / categories as f64;
    (target.exp() - 1.0).ln()
}

impl<T: Scalar> LucganModel<T> {
    pub fn new(shape: PlanShape, condition_dim: usize, hyper: LucganHyper, cell_mass: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let output = shape.tensor_len();
        let mut generator = Mlp::new(
            &[condition_dim + hyper.noise_dim, hyper.hidden, output],
            Activation::Relu,
            Activation::Softplus,
            &mut rng,
        );
        generator.layers[1].bias.fill(T::of(output_bias_init(shape.categories())));
        let discriminator = Mlp::new(&[condition_dim + output, hyper.hidden, 1], Activation::LeakyRelu, Activation::Identity, &mut rng);
        let dims = GanDims { condition: condition_dim, noise: hyper.noise_dim, hidden: hyper.hidden, output };
        Self { dims, shape, cell_mass, weights: GanWeights { generator, discriminator }, hyper, training_log: GanLog::default(), seed }
    }

    fn noise(&self, rows: usize, seed: u64) -> Array2<T> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((rows, self.dims.noise), || sample_normal::<T, _>(&mut rng))
    }

    fn generator_input(&self, conditions: &Array2<T>, noise: &Array2<T>) -> Array2<T> {
        ndarray::concatenate![ndarray::Axis(1), conditions.view(), noise.view()]
    }

    /// Generated normalized tensors, one row per condition row.
    pub fn generate_batch(&self, conditions: &Array2<T>, noise: &Array2<T>) -> Array2<T> {
        self.weights.generator.predict(&self.generator_input(conditions, noise))
    }

    pub fn logits(&self, conditions: &Array2<T>, configs: &Array2<T>) -> Array2<T> {
        self.weights.discriminator.predict(&ndarray::concatenate![ndarray::Axis(1), conditions.view(), configs.view()])
    }

    /// Discriminator loss `-[log s(good) + log(1 - s(bad)) + log(1 - s(fake))]`,
    /// each term averaged over its rows, and its gradient. Inputs are
    /// `[condition | normalized config]` rows.
    pub fn discriminator_loss_and_gradient(
        &self,
        good: &Array2<T>,
        bad: &Array2<T>,
        fake: &Array2<T>,
    ) -> (DiscriminatorLoss, Mlp<T>) {
        let mut grad = self.weights.discriminator.zeroed();
        let mut parts = [0.0; 3];
        for (k, (input, positive)) in [(good, true), (bad, false), (fake, false)].into_iter().enumerate() {
            if input.nrows() == 0 {
                continue;
            }
            let rows = T::of(input.nrows() as f64);
            let cache = self.weights.discriminator.forward(input);
            let mut d_out = Array2::zeros(cache.out.dim());
            let mut loss = T::zero();
            for (r, &l) in cache.out.column(0).iter().enumerate() {
                if positive {
                    loss -= log_sigmoid(l);
                    d_out[[r, 0]] = (sigmoid(l) - T::one()) / rows;
                } else {
                    loss -= log_sigmoid(-l);
                    d_out[[r, 0]] = sigmoid(l) / rows;
                }
            }
            parts[k] = (loss / rows).to_f64_lossy();
            self.weights.discriminator.backward(&cache, &d_out, &mut grad, false);
        }
        (DiscriminatorLoss { good: parts[0], bad: parts[1], fake: parts[2] }, grad)
    }

    /// Non-saturating generator loss `-mean log s(D(c, G(c, z)))` and its
    /// gradient with respect to the generator.
    pub fn generator_loss_and_gradient(&self, conditions: &Array2<T>, noise: &Array2<T>) -> (f64, Mlp<T>) {
        let rows = T::of(conditions.nrows() as f64);
        let g_cache = self.weights.generator.forward(&self.generator_input(conditions, noise));
        let d_in = ndarray::concatenate![ndarray::Axis(1), conditions.view(), g_cache.out.view()];
        let d_cache = self.weights.discriminator.forward(&d_in);
        let mut loss = T::zero();
        let mut d_out = Array2::zeros(d_cache.out.dim());
        for (r, &l) in d_cache.out.column(0).iter().enumerate() {
            loss -= log_sigmoid(l);
            d_out[[r, 0]] = (sigmoid(l) - T::one()) / rows;
        }
        let mut scratch = self.weights.discriminator.zeroed();
        let d_input = self.weights.discriminator.backward(&d_cache, &d_out, &mut scratch, true).expect("requested");
        let d_fake = d_input.slice(s![.., self.dims.condition..]).to_owned();
        let mut grad = self.weights.generator.zeroed();
        self.weights.generator.backward(&g_cache, &d_fake, &mut grad, false);
        ((loss / rows).to_f64_lossy(), grad)
    }

    fn condition_row(&self, condition: &ConditionEmbedding<T>) -> Result<Array2<T>> {
        self.check_condition(condition)?;
        Ok(stack_rows(&[&condition.values]))
    }
}

fn example_rows<T: Scalar>(examples: &[&TrainingExample<T>]) -> (Array2<T>, Array2<T>) {
    let conds: Vec<&[T]> = examples.iter().map(|e| e.condition.values.as_slice()).collect();
    let xs: Vec<Vec<T>> = examples.iter().map(|e| normalized_counts(&e.config)).collect();
    let xs_ref: Vec<&[T]> = xs.iter().map(Vec::as_slice).collect();
    (stack_rows(&conds), stack_rows(&xs_ref))
}

fn joined<T: Scalar>(conds: &Array2<T>, xs: &Array2<T>) -> Array2<T> {
    ndarray::concatenate![ndarray::Axis(1), conds.view(), xs.view()]
}

fn mean_probability<T: Scalar>(logits: &Array2<T>) -> f64 {
    let n = logits.nrows().max(1) as f64;
    logits.iter().map(|&l| sigmoid(l).to_f64_lossy()).sum::<f64>() / n
}

fn check_examples<T: Scalar>(examples: &[TrainingExample<T>], shape: &PlanShape, dim: usize) -> Result<()> {
    for e in examples {
        if e.condition.dim() != dim {
            return Err(Error::dim("condition", dim, e.condition.dim()));
        }
        if e.config.counts.len() != shape.tensor_len() {
            return Err(Error::dim("configuration", shape.tensor_len(), e.config.counts.len()));
        }
    }
    Ok(())
}

/// Alternating 1:1 minibatch updates of discriminator and generator.
pub fn train_lucgan<T: Scalar>(
    good: &[TrainingExample<T>],
    bad: &[TrainingExample<T>],
    shape: &PlanShape,
    hyper: &LucganHyper,
    seed: u64,
) -> Result<LucganModel<T>> {
    if good.is_empty() || bad.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
    }
    let dim = good[0].condition.dim();
    check_examples(good, shape, dim)?;
    check_examples(bad, shape, dim)?;
    let configs: Vec<_> = good.iter().chain(bad).map(|e| &e.config).collect();
    let mut model = LucganModel::new(shape.clone(), dim, hyper.clone(), mean_cell_mass(&configs), seed);
    let initial_generator = model.weights.generator.clone();
    let adam = AdamConfig { lr: hyper.lr, beta1: hyper.beta1, ..AdamConfig::default() };
    let (mut d_opt, mut g_opt) = (Adam::new(adam), Adam::new(adam));
    let mut rng = seeded(derive_seed(seed, 1));
    let mut good_order: Vec<usize> = (0..good.len()).collect();
    let mut bad_order: Vec<usize> = (0..bad.len()).collect();
    let mut bad_cursor = 0;
    let mut draw = 0u64;

    for epoch in 0..hyper.epochs {
        good_order.shuffle(&mut rng);
        let mut sums = GanEpoch { d_loss: 0.0, g_loss: 0.0, score_good: 0.0, score_bad: 0.0, score_fake: 0.0 };
        let mut batches = 0.0;
        for chunk in good_order.chunks(hyper.batch_size) {
            let good_batch: Vec<&TrainingExample<T>> = chunk.iter().map(|&i| &good[i]).collect();
            let bad_batch: Vec<&TrainingExample<T>> = (0..chunk.len())
                .map(|_| {
                    if bad_cursor == 0 {
                        bad_order.shuffle(&mut rng);
                    }
                    let e = &bad[bad_order[bad_cursor]];
                    bad_cursor = (bad_cursor + 1) % bad.len();
                    e
                })
                .collect();
            let (gc, gx) = example_rows(&good_batch);
            let (bc, bx) = example_rows(&bad_batch);
            draw += 1;
            let fake = model.generate_batch(&gc, &model.noise(gc.nrows(), derive_seed(seed, 1000 + draw)));
            let (good_in, bad_in, fake_in) = (joined(&gc, &gx), joined(&bc, &bx), joined(&gc, &fake));
            let (d_loss, d_grad) = model.discriminator_loss_and_gradient(&good_in, &bad_in, &fake_in);
            sums.score_good += mean_probability(&model.weights.discriminator.predict(&good_in));
            sums.score_bad += mean_probability(&model.weights.discriminator.predict(&bad_in));
            sums.score_fake += mean_probability(&model.weights.discriminator.predict(&fake_in));
            d_opt.step(&mut model.weights.discriminator, &d_grad);

            draw += 1;
            let noise = model.noise(gc.nrows(), derive_seed(seed, 1000 + draw));
            let (g_loss, g_grad) = model.generator_loss_and_gradient(&gc, &noise);
            g_opt.step(&mut model.weights.generator, &g_grad);

            if !(d_loss.total().is_finite() && g_loss.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, detail: format!("d_loss {d_loss:?}, g_loss {g_loss}") });
            }
            sums.d_loss += d_loss.total();
            sums.g_loss += g_loss;
            batches += 1.0;
        }
        model.training_log.epochs.push(GanEpoch {
            d_loss: sums.d_loss / batches,
            g_loss: sums.g_loss / batches,
            score_good: sums.score_good / batches,
            score_bad: sums.score_bad / batches,
            score_fake: sums.score_fake / batches,
        });
    }

    let all_good: Vec<&TrainingExample<T>> = good.iter().collect();
    let (gc, gx) = example_rows(&all_good);
    model.training_log.final_score_good = mean_probability(&model.logits(&gc, &gx));
    let initial = {
        let mut m = model.clone();
        m.weights.generator = initial_generator;
        m
    };
    let initial_fake = initial.generate_batch(&gc, &model.noise(gc.nrows(), derive_seed(seed, 2)));
    model.training_log.final_score_initial_fake = mean_probability(&model.logits(&gc, &initial_fake));
    Ok(model)
}

pub fn generate_config_gan<T: Scalar>(model: &LucganModel<T>, condition: &ConditionEmbedding<T>, seed: u64) -> Result<LandUseConfiguration<T>> {
    let values = model.normalized_output(condition, seed)?;
    config_from_normalized(&model.shape, &values, model.cell_mass)
}

/// Discriminator logit for a (condition, configuration) pair.
pub fn discriminator_score<T: Scalar>(
    model: &LucganModel<T>,
    condition: &ConditionEmbedding<T>,
    config: &LandUseConfiguration<T>,
) -> Result<T> {
    let cond = model.condition_row(condition)?;
    if config.counts.len() != model.dims.output {
        return Err(Error::dim("configuration", model.dims.output, config.counts.len()));
    }
    let x = normalized_counts(config);
    Ok(model.logits(&cond, &stack_rows(&[&x]))[[0, 0]])
}

impl<T: Scalar> PlanGenerator<T> for LucganModel<T> {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Gan
    }

    fn shape(&self) -> &PlanShape {
        &self.shape
    }

    fn condition_dim(&self) -> usize {
        self.dims.condition
    }

    fn cell_mass(&self) -> f64 {
        self.cell_mass
    }

    fn normalized_output(&self, condition: &ConditionEmbedding<T>, seed: u64) -> Result<Vec<T>> {
        let cond = self.condition_row(condition)?;
        Ok(self.generate_batch(&cond, &self.noise(1, seed)).row(0).to_vec())
    }

    fn generate_plan(&self, condition: &ConditionEmbedding<T>, seed: u64) -> Result<Plan<T>> {
        let config = generate_config_gan(self, condition, seed)?;
        let zone_map = dominant_zone_map(&config, &self.shape.mapping)?;
        Ok(Plan { config, zone_map })
    }
}

impl<T: Scalar> RewardTunable<T> for LucganModel<T> {
    fn optimizer(&self, lr: f64) -> Adam<T> {
        Adam::new(AdamConfig { lr, beta1: self.hyper.beta1, ..AdamConfig::default() })
    }

    fn regression_step(&mut self, opt: &mut Adam<T>, batch: &[RegressionItem<'_, T>]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let conds: Vec<&[T]> = batch.iter().map(|b| b.condition.values.as_slice()).collect();
        let mut noise = Array2::zeros((batch.len(), self.dims.noise));
        for (r, item) in batch.iter().enumerate() {
            noise.row_mut(r).assign(&self.noise(1, item.seed).row(0));
        }
        let cache = self.weights.generator.forward(&self.generator_input(&stack_rows(&conds), &noise));
        let targets: Vec<&[T]> = batch.iter().map(|b| b.target.as_slice()).collect();
        let diff = &cache.out - &stack_rows(&targets);
        let scale = T::of(1.0 / (batch.len() * self.shape.cells()) as f64);
        let loss = diff.iter().map(|&d| d * d).sum::<T>() * scale;
        let d_out = diff.mapv(|d| T::of(2.0) * d * scale);
        let mut grad = self.weights.generator.zeroed();
        self.weights.generator.backward(&cache, &d_out, &mut grad, false);
        opt.step(&mut self.weights.generator, &grad);
        Ok(loss.to_f64_lossy())
    }
}
