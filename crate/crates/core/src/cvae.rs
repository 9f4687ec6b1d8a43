//! Conditional variational planner with a Gaussian latent and two decoder
//! heads: the configuration tensor and the functional-zone map.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::ConditionEmbedding;
use crate::dataset::TrainingExample;
use crate::error::{Error, Result};
use crate::gan::output_bias_init;
use crate::nn::{sample_normal, stack_rows, Activation, Adam, AdamConfig, Dense, Mlp, Parameters};
use crate::plan::{
    config_from_normalized, mean_cell_mass, normalized_counts, zone_cross_entropy, zone_map_from_logits, GeneratorKind, Plan,
    PlanGenerator, PlanShape, RegressionItem, RewardTunable,
};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;
use crate::spatial::{LandUseConfiguration, ZoneMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CluvaeHyper {
    pub latent: usize,
    pub hidden: usize,
    pub lambda_zone: f64,
    pub beta_kl: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for CluvaeHyper {
    fn default() -> Self {
        Self { latent: 16, hidden: 128, lambda_zone: 1.0, beta_kl: 0.5, lr: 1e-3, epochs: 200, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CluvaeWeights<T = f64> {
    /// `[condition | config] -> [mu | log-variance]`.
    pub encoder: Mlp<T>,
    /// `[condition | z] -> hidden`, ReLU.
    pub trunk: Dense<T>,
    pub config_head: Dense<T>,
    pub zone_head: Dense<T>,
}

impl<T: Scalar> Parameters<T> for CluvaeWeights<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut out = self.encoder.slices();
        out.extend(self.trunk.slices());
        out.extend(self.config_head.slices());
        out.extend(self.zone_head.slices());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.encoder.slices_mut();
        out.extend(self.trunk.slices_mut());
        out.extend(self.config_head.slices_mut());
        out.extend(self.zone_head.slices_mut());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboComponents {
    pub recon_x: f64,
    pub recon_zone: f64,
    pub kl: f64,
}

impl ElboComponents {
    pub fn total(&self, lambda_zone: f64, beta_kl: f64) -> f64 {
        self.recon_x + lambda_zone * self.recon_zone + beta_kl * self.kl
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CluvaeEpoch {
    pub recon_x: f64,
    pub recon_zone: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CluvaeDims {
    pub condition: usize,
    pub latent: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CluvaeModel<T = f64> {
    pub dims: CluvaeDims,
    pub shape: PlanShape,
    pub cell_mass: f64,
    pub weights: CluvaeWeights<T>,
    pub hyper: CluvaeHyper,
    pub training_log: Vec<CluvaeEpoch>,
    pub seed: u64,
}

/// A minibatch with its reparameterization noise fixed.
#[derive(Clone, Debug)]
pub struct CvaeBatch<T = f64> {
    pub conditions: Array2<T>,
    /// Count-normalized configurations, one row per sample.
    pub configs: Array2<T>,
    /// Row-major zone labels, one row per sample.
    pub zones: Vec<Vec<usize>>,
    pub eps: Array2<T>,
}

impl<T: Scalar> CvaeBatch<T> {
    pub fn new(examples: &[&TrainingExample<T>], eps: Array2<T>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if eps.nrows() != examples.len() {
            return Err(Error::dim("noise rows", examples.len(), eps.nrows()));
        }
        let conds: Vec<&[T]> = examples.iter().map(|e| e.condition.values.as_slice()).collect();
        let xs: Vec<Vec<T>> = examples.iter().map(|e| normalized_counts(&e.config)).collect();
        let xs_ref: Vec<&[T]> = xs.iter().map(Vec::as_slice).collect();
        let zones = examples.iter().map(|e| e.zone_map.labels.iter().copied().collect()).collect();
        Ok(Self { conditions: stack_rows(&conds), configs: stack_rows(&xs_ref), zones, eps })
    }

    pub fn rows(&self) -> usize {
        self.conditions.nrows()
    }
}

/// `KL(N(mu, exp(lv)) || N(0, I)) = 1/2 sum(mu^2 + exp(lv) - lv - 1)`.
pub fn diagonal_gaussian_kl<T: Scalar>(mu: &[T], log_var: &[T]) -> T {
    let half = T::of(0.5);
    mu.iter().zip(log_var).map(|(&m, &lv)| half * (m * m + lv.exp_m1() - lv)).sum()
}

struct Pass<T> {
    enc: crate::nn::MlpCache<T>,
    mu: Array2<T>,
    log_var: Array2<T>,
    std: Array2<T>,
    dec_in: Array2<T>,
    h_pre: Array2<T>,
    h: Array2<T>,
    x_pre: Array2<T>,
    x_hat: Array2<T>,
    zone_logits: Array2<T>,
}

impl<T: Scalar> CluvaeModel<T> {
    pub fn new(shape: PlanShape, condition_dim: usize, hyper: CluvaeHyper, cell_mass: f64, seed: u64) -> Result<Self> {
        if hyper.latent < 2 {
            return Err(Error::InvalidArgument("latent dimension must be >= 2".into()));
        }
        if !(hyper.lambda_zone >= 0.0 && hyper.beta_kl >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        let mut rng = seeded(seed);
        let output = shape.tensor_len();
        let k = hyper.latent;
        let encoder = Mlp::new(&[condition_dim + output, hyper.hidden, 2 * k], Activation::Relu, Activation::Identity, &mut rng);
        let trunk = Dense::new(condition_dim + k, hyper.hidden, &mut rng);
        let mut config_head = Dense::new(hyper.hidden, output, &mut rng);
        config_head.bias.fill(T::of(output_bias_init(shape.categories())));
        let zone_head = Dense::new(hyper.hidden, shape.cells() * shape.zones(), &mut rng);
        let dims = CluvaeDims { condition: condition_dim, latent: k, hidden: hyper.hidden, output };
        Ok(Self {
            dims,
            shape,
            cell_mass,
            weights: CluvaeWeights { encoder, trunk, config_head, zone_head },
            hyper,
            training_log: Vec::new(),
            seed,
        })
    }

    /// Posterior mean and log-variance rows for `[condition | config]`.
    pub fn posterior(&self, conditions: &Array2<T>, configs: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let out = self.weights.encoder.predict(&ndarray::concatenate![ndarray::Axis(1), conditions.view(), configs.view()]);
        let k = self.dims.latent;
        (out.slice(s![.., ..k]).to_owned(), out.slice(s![.., k..]).to_owned())
    }

    /// Decoder heads for `[condition | z]`: normalized configuration and zone logits.
    pub fn decode(&self, conditions: &Array2<T>, z: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let h = Activation::Relu.forward(&self.weights.trunk.forward(&ndarray::concatenate![ndarray::Axis(1), conditions.view(), z.view()]));
        (Activation::Softplus.forward(&self.weights.config_head.forward(&h)), self.weights.zone_head.forward(&h))
    }

    fn check_batch(&self, batch: &CvaeBatch<T>) -> Result<()> {
        if batch.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch.conditions.ncols() != self.dims.condition {
            return Err(Error::dim("condition", self.dims.condition, batch.conditions.ncols()));
        }
        if batch.configs.ncols() != self.dims.output {
            return Err(Error::dim("configuration", self.dims.output, batch.configs.ncols()));
        }
        if batch.eps.ncols() != self.dims.latent || batch.eps.nrows() != batch.rows() {
            return Err(Error::dim("noise", self.dims.latent, batch.eps.ncols()));
        }
        let cells = self.shape.cells();
        if batch.zones.len() != batch.rows() || batch.zones.iter().any(|z| z.len() != cells) {
            return Err(Error::dim("zone labels", cells, batch.zones.first().map_or(0, Vec::len)));
        }
        if batch.zones.iter().flatten().any(|&z| z >= self.shape.zones()) {
            return Err(Error::InvalidArgument("zone label out of range".into()));
        }
        Ok(())
    }

    fn pass(&self, batch: &CvaeBatch<T>) -> Pass<T> {
        let w = &self.weights;
        let k = self.dims.latent;
        let enc = w.encoder.forward(&ndarray::concatenate![ndarray::Axis(1), batch.conditions.view(), batch.configs.view()]);
        let mu = enc.out.slice(s![.., ..k]).to_owned();
        let log_var = enc.out.slice(s![.., k..]).to_owned();
        let std = log_var.mapv(|lv| (lv * T::of(0.5)).exp());
        let z = &mu + &(&std * &batch.eps);
        let dec_in = ndarray::concatenate![ndarray::Axis(1), batch.conditions.view(), z.view()];
        let h_pre = w.trunk.forward(&dec_in);
        let h = Activation::Relu.forward(&h_pre);
        let x_pre = w.config_head.forward(&h);
        let x_hat = Activation::Softplus.forward(&x_pre);
        let zone_logits = w.zone_head.forward(&h);
        Pass { enc, mu, log_var, std, dec_in, h_pre, h, x_pre, x_hat, zone_logits }
    }

    /// Batch-mean ELBO components with the batch's fixed noise.
    pub fn elbo_components(&self, batch: &CvaeBatch<T>) -> Result<ElboComponents> {
        self.check_batch(batch)?;
        Ok(self.components_and_grad(batch, false).0)
    }

    /// Batch-mean loss `recon_x + lambda_zone * recon_zone + beta_kl * kl`
    /// and its gradient through the reparameterized draw.
    pub fn loss_and_gradient(&self, batch: &CvaeBatch<T>) -> Result<(ElboComponents, CluvaeWeights<T>)> {
        self.check_batch(batch)?;
        let (parts, grad) = self.components_and_grad(batch, true);
        Ok((parts, grad.expect("requested")))
    }

    fn components_and_grad(&self, batch: &CvaeBatch<T>, want_grad: bool) -> (ElboComponents, Option<CluvaeWeights<T>>) {
        let p = self.pass(batch);
        let rows = batch.rows();
        let b = T::of(rows as f64);
        let cells = T::of(self.shape.cells() as f64);
        let zones = self.shape.zones();
        let (lz, beta) = (T::of(self.hyper.lambda_zone), T::of(self.hyper.beta_kl));

        let diff = &p.x_hat - &batch.configs;
        let recon_x = diff.iter().map(|&d| d * d).sum::<T>() / cells / b;
        let mut recon_zone = T::zero();
        let mut d_zone = Array2::zeros(p.zone_logits.dim());
        for r in 0..rows {
            let logits = p.zone_logits.row(r).to_vec();
            let (loss, grad) = zone_cross_entropy(&logits, &batch.zones[r], zones);
            recon_zone += loss;
            for (dst, g) in d_zone.row_mut(r).iter_mut().zip(grad) {
                *dst = lz * g / b;
            }
        }
        recon_zone /= b;
        let kl = (0..rows)
            .map(|r| diagonal_gaussian_kl(p.mu.row(r).as_slice().expect("contiguous"), p.log_var.row(r).as_slice().expect("contiguous")))
            .sum::<T>()
            / b;
        let parts = ElboComponents { recon_x: recon_x.to_f64_lossy(), recon_zone: recon_zone.to_f64_lossy(), kl: kl.to_f64_lossy() };
        if !want_grad {
            return (parts, None);
        }

        let w = &self.weights;
        let mut grad = w.zeroed();
        let dx = diff.mapv(|d| T::of(2.0) * d / cells / b);
        let dx_pre = Activation::Softplus.backward(&p.x_pre, &p.x_hat, &dx);
        let mut dh = w.config_head.backward(&p.h, &dx_pre, &mut grad.config_head, true).expect("requested");
        dh += &w.zone_head.backward(&p.h, &d_zone, &mut grad.zone_head, true).expect("requested");
        let dh_pre = Activation::Relu.backward(&p.h_pre, &p.h, &dh);
        let d_dec_in = w.trunk.backward(&p.dec_in, &dh_pre, &mut grad.trunk, true).expect("requested");
        let dz = d_dec_in.slice(s![.., self.dims.condition..]).to_owned();
        let half = T::of(0.5);
        let d_mu = &dz + &p.mu.mapv(|m| beta * m / b);
        let d_lv = &(&dz * &batch.eps * &p.std).mapv(|v| v * half) + &p.log_var.mapv(|lv| beta * half * lv.exp_m1() / b);
        let d_enc = ndarray::concatenate![ndarray::Axis(1), d_mu.view(), d_lv.view()];
        w.encoder.backward(&p.enc, &d_enc, &mut grad.encoder, false);
        (parts, Some(grad))
    }

    fn prior_draw(&self, seed: u64) -> Array2<T> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((1, self.dims.latent), || sample_normal::<T, _>(&mut rng))
    }
}

fn noise<T: Scalar>(rows: usize, k: usize, seed: u64) -> Array2<T> {
    let mut rng = seeded(seed);
    Array2::from_shape_simple_fn((rows, k), || sample_normal::<T, _>(&mut rng))
}

pub fn train_cluvae<T: Scalar>(
    examples: &[TrainingExample<T>],
    shape: &PlanShape,
    hyper: &CluvaeHyper,
    seed: u64,
) -> Result<CluvaeModel<T>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
    }
    let configs: Vec<_> = examples.iter().map(|e| &e.config).collect();
    let mut model = CluvaeModel::new(shape.clone(), examples[0].condition.dim(), hyper.clone(), mean_cell_mass(&configs), seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut rng = seeded(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut draw = 0u64;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut sums = CluvaeEpoch { recon_x: 0.0, recon_zone: 0.0, kl: 0.0, total: 0.0 };
        let mut batches = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let items: Vec<&TrainingExample<T>> = chunk.iter().map(|&i| &examples[i]).collect();
            draw += 1;
            let batch = CvaeBatch::new(&items, noise(items.len(), hyper.latent, derive_seed(seed, 1000 + draw)))?;
            let (parts, grad) = model.loss_and_gradient(&batch)?;
            if parts.kl < 0.0 {
                return Err(Error::InvariantViolation(format!("negative KL {} at epoch {epoch}", parts.kl)));
            }
            let total = parts.total(hyper.lambda_zone, hyper.beta_kl);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, detail: format!("{parts:?}") });
            }
            opt.step(&mut model.weights, &grad);
            sums.recon_x += parts.recon_x;
            sums.recon_zone += parts.recon_zone;
            sums.kl += parts.kl;
            sums.total += total;
            batches += 1.0;
        }
        model.training_log.push(CluvaeEpoch {
            recon_x: sums.recon_x / batches,
            recon_zone: sums.recon_zone / batches,
            kl: sums.kl / batches,
            total: sums.total / batches,
        });
    }
    Ok(model)
}

/// Decodes a prior draw: the configuration head gives the tensor and the
/// zone head gives the map.
pub fn generate_config_cvae<T: Scalar>(
    model: &CluvaeModel<T>,
    condition: &ConditionEmbedding<T>,
    seed: u64,
) -> Result<(LandUseConfiguration<T>, ZoneMap)> {
    model.check_condition(condition)?;
    let (x, logits) = model.decode(&stack_rows(&[&condition.values]), &model.prior_draw(seed));
    let config = config_from_normalized(&model.shape, x.as_slice().expect("contiguous"), model.cell_mass)?;
    let zone_map = zone_map_from_logits(&model.shape.grid, logits.as_slice().expect("contiguous"), model.shape.zones())?;
    Ok((config, zone_map))
}

impl<T: Scalar> PlanGenerator<T> for CluvaeModel<T> {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Cvae
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
        self.check_condition(condition)?;
        Ok(self.decode(&stack_rows(&[&condition.values]), &self.prior_draw(seed)).0.into_raw_vec_and_offset().0)
    }

    fn generate_plan(&self, condition: &ConditionEmbedding<T>, seed: u64) -> Result<Plan<T>> {
        let (config, zone_map) = generate_config_cvae(self, condition, seed)?;
        Ok(Plan { config, zone_map })
    }
}

impl<T: Scalar> RewardTunable<T> for CluvaeModel<T> {
    fn optimizer(&self, lr: f64) -> Adam<T> {
        Adam::new(AdamConfig::with_lr(lr))
    }

    /// Squared error of the configuration head at the prior draws named by
    /// each item's seed; the encoder and zone head are left alone.
    fn regression_step(&mut self, opt: &mut Adam<T>, batch: &[RegressionItem<'_, T>]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let conds: Vec<&[T]> = batch.iter().map(|b| b.condition.values.as_slice()).collect();
        let mut z = Array2::zeros((batch.len(), self.dims.latent));
        for (r, item) in batch.iter().enumerate() {
            z.row_mut(r).assign(&self.prior_draw(item.seed).row(0));
        }
        let w = &self.weights;
        let dec_in = ndarray::concatenate![ndarray::Axis(1), stack_rows(&conds).view(), z.view()];
        let h_pre = w.trunk.forward(&dec_in);
        let h = Activation::Relu.forward(&h_pre);
        let x_pre = w.config_head.forward(&h);
        let x_hat = Activation::Softplus.forward(&x_pre);
        let targets: Vec<&[T]> = batch.iter().map(|b| b.target.as_slice()).collect();
        let diff = &x_hat - &stack_rows(&targets);
        let scale = T::of(1.0 / (batch.len() * self.shape.cells()) as f64);
        let loss = diff.iter().map(|&d| d * d).sum::<T>() * scale;
        let mut grad = w.zeroed();
        let dx_pre = Activation::Softplus.backward(&x_pre, &x_hat, &diff.mapv(|d| T::of(2.0) * d * scale));
        let dh = w.config_head.backward(&h, &dx_pre, &mut grad.config_head, true).expect("requested");
        let dh_pre = Activation::Relu.backward(&h_pre, &h, &dh);
        w.trunk.backward(&dec_in, &dh_pre, &mut grad.trunk, false);
        opt.step(&mut self.weights, &grad);
        Ok(loss.to_f64_lossy())
    }
}
