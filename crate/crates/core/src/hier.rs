//! Two-stage hierarchical planner: a zone-level sketch, a functionalizer
//! that projects the condition onto every zone, and a multi-head attention
//! block that turns the zone projections into per-cell category counts.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::ConditionEmbedding;
use crate::dataset::TrainingExample;
use crate::error::{Error, Result};
use crate::eval::hierarchy_consistency;
use crate::gan::output_bias_init;
use crate::nn::{masked_softmax, sample_normal, stack_rows, Activation, Adam, AdamConfig, Dense, Mlp, Parameters};
use crate::plan::{
    config_from_normalized, mean_cell_mass, normalized_counts, zone_cross_entropy, zone_map_from_logits, GeneratorKind, Plan,
    PlanGenerator, PlanShape, RegressionItem, RewardTunable,
};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;
use crate::spatial::{LandUseConfiguration, ZoneMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IhplannerHyper {
    pub hidden: usize,
    /// Width of the per-zone requirement embeddings.
    pub d_f: usize,
    pub heads: usize,
    pub d_k: usize,
    /// Weight of the grid reconstruction term.
    pub lambda_grid: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for IhplannerHyper {
    fn default() -> Self {
        Self { hidden: 128, d_f: 32, heads: 4, d_k: 8, lambda_grid: 1.0, lr: 1e-3, epochs: 200, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct IhWeights<T = f64> {
    /// Condition to `n*n x Z` zone logits.
    pub zone_stage: Mlp<T>,
    /// `Z x d`, added to the condition before the shared projection.
    pub zone_embed: Array2<T>,
    pub projection: Dense<T>,
    pub row_pos: Array2<T>,
    pub col_pos: Array2<T>,
    pub query: Dense<T>,
    pub key: Dense<T>,
    pub value: Dense<T>,
    pub attn_out: Dense<T>,
    pub output: Dense<T>,
}

impl<T: Scalar> IhWeights<T> {
    /// Parameters that only the grid stage and the functionalizer touch.
    pub fn grid_slices(&self) -> Vec<&[T]> {
        let mut out = vec![
            self.zone_embed.as_slice().expect("standard layout"),
            self.row_pos.as_slice().expect("standard layout"),
            self.col_pos.as_slice().expect("standard layout"),
        ];
        for d in [&self.projection, &self.query, &self.key, &self.value, &self.attn_out, &self.output] {
            out.extend(d.slices());
        }
        out
    }
}

impl<T: Scalar> Parameters<T> for IhWeights<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut out = self.zone_stage.slices();
        out.extend(self.grid_slices());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.zone_stage.slices_mut();
        out.push(self.zone_embed.as_slice_mut().expect("standard layout"));
        out.push(self.row_pos.as_slice_mut().expect("standard layout"));
        out.push(self.col_pos.as_slice_mut().expect("standard layout"));
        for d in [&mut self.projection, &mut self.query, &mut self.key, &mut self.value, &mut self.attn_out, &mut self.output] {
            out.extend(d.slices_mut());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IhDims {
    pub condition: usize,
    pub d_f: usize,
    pub heads: usize,
    pub d_k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IhEpoch {
    pub zone_ce: f64,
    pub grid_recon: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct IhplannerModel<T = f64> {
    pub dims: IhDims,
    pub shape: PlanShape,
    pub cell_mass: f64,
    pub weights: IhWeights<T>,
    pub hyper: IhplannerHyper,
    pub training_log: Vec<IhEpoch>,
    pub seed: u64,
}

/// Output of the full pipeline with its consistency recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct HierOutput<T = f64> {
    pub zone_map: ZoneMap,
    pub config: LandUseConfiguration<T>,
    pub hierarchy_consistency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IhLoss {
    pub zone_ce: f64,
    pub grid_recon: f64,
}

struct GridPass<T> {
    projections: Array2<T>,
    q0: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Vec<Array2<T>>,
    o: Array2<T>,
    hidden: Array2<T>,
    y_pre: Array2<T>,
    y: Array2<T>,
}

fn small_normal<T: Scalar>(rows: usize, cols: usize, scale: f64, rng: &mut impl rand::Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || sample_normal::<T, _>(rng) * T::of(scale))
}

impl<T: Scalar> IhplannerModel<T> {
    pub fn new(shape: PlanShape, condition_dim: usize, hyper: IhplannerHyper, cell_mass: f64, seed: u64) -> Result<Self> {
        if hyper.heads == 0 || hyper.d_k == 0 || hyper.d_f == 0 {
            return Err(Error::InvalidArgument("heads, d_k and d_f must be >= 1".into()));
        }
        let mut rng = seeded(seed);
        let (n, z, c) = (shape.grid.n, shape.zones(), shape.categories());
        let hk = hyper.heads * hyper.d_k;
        let zone_stage = Mlp::new(&[condition_dim, hyper.hidden, n * n * z], Activation::Relu, Activation::Identity, &mut rng);
        let zone_embed = small_normal(z, condition_dim, 0.5, &mut rng);
        let projection = Dense::new(condition_dim, hyper.d_f, &mut rng);
        let row_pos = small_normal(n, hyper.d_f, 0.1, &mut rng);
        let col_pos = small_normal(n, hyper.d_f, 0.1, &mut rng);
        let query = Dense::new(hyper.d_f, hk, &mut rng);
        let key = Dense::new(hyper.d_f, hk, &mut rng);
        let value = Dense::new(hyper.d_f, hk, &mut rng);
        let attn_out = Dense::new(hk, hyper.d_f, &mut rng);
        let mut output = Dense::new(hyper.d_f, c, &mut rng);
        output.bias.fill(T::of(output_bias_init(c)));
        let dims = IhDims { condition: condition_dim, d_f: hyper.d_f, heads: hyper.heads, d_k: hyper.d_k };
        let weights = IhWeights { zone_stage, zone_embed, projection, row_pos, col_pos, query, key, value, attn_out, output };
        Ok(Self { dims, shape, cell_mass, weights, hyper, training_log: Vec::new(), seed })
    }

    fn check_zone_map(&self, zone_map: &ZoneMap) -> Result<()> {
        if zone_map.grid.n != self.shape.grid.n {
            return Err(Error::dim("zone map side", self.shape.grid.n, zone_map.grid.n));
        }
        if zone_map.zone_count != self.shape.zones() {
            return Err(Error::dim("zone count", self.shape.zones(), zone_map.zone_count));
        }
        Ok(())
    }

    fn zone_inputs(&self, condition: &[T]) -> Array2<T> {
        let c = Array1::from(condition.to_vec());
        &self.weights.zone_embed + &c.insert_axis(Axis(0))
    }

    fn projections(&self, condition: &[T]) -> Array2<T> {
        self.weights.projection.forward(&self.zone_inputs(condition))
    }

    fn grid_pass(&self, zone_map: &ZoneMap, projections: Array2<T>) -> GridPass<T> {
        let w = &self.weights;
        let n = self.shape.grid.n;
        let zones = self.shape.zones();
        let present = {
            let mut mask = vec![false; zones];
            zone_map.labels.iter().for_each(|&z| mask[z] = true);
            mask
        };
        let mut q0 = Array2::zeros((n * n, self.dims.d_f));
        for ((i, j), &z) in zone_map.labels.indexed_iter() {
            let row = &(&projections.row(z) + &w.row_pos.row(i)) + &w.col_pos.row(j);
            q0.row_mut(i * n + j).assign(&row);
        }
        let q = w.query.forward(&q0);
        let k = w.key.forward(&projections);
        let v = w.value.forward(&projections);
        let dk = self.dims.d_k;
        let inv_sqrt = T::of(1.0 / (dk as f64).sqrt());
        let mut attn = Vec::with_capacity(self.dims.heads);
        let mut o = Array2::zeros((n * n, self.dims.heads * dk));
        for h in 0..self.dims.heads {
            let r = h * dk..(h + 1) * dk;
            let scores = q.slice(s![.., r.clone()]).dot(&k.slice(s![.., r.clone()]).t()) * inv_sqrt;
            let mut a = Array2::zeros(scores.dim());
            for (cell, row) in scores.outer_iter().enumerate() {
                let weights = masked_softmax(row.as_slice().expect("standard layout"), &present);
                a.row_mut(cell).assign(&Array1::from(weights));
            }
            o.slice_mut(s![.., r.clone()]).assign(&a.dot(&v.slice(s![.., r])));
            attn.push(a);
        }
        let hidden = &q0 + &w.attn_out.forward(&o);
        let y_pre = w.output.forward(&hidden);
        let y = Activation::Softplus.forward(&y_pre);
        GridPass { projections, q0, q, k, v, attn, o, hidden, y_pre, y }
    }

    /// Backpropagates `dy` (cells x C) through the grid stage and the
    /// functionalizer for one sample.
    fn grid_backward(&self, zone_map: &ZoneMap, zone_inputs: &Array2<T>, pass: &GridPass<T>, dy: &Array2<T>, grad: &mut IhWeights<T>) {
        let w = &self.weights;
        let n = self.shape.grid.n;
        let dk = self.dims.d_k;
        let inv_sqrt = T::of(1.0 / (dk as f64).sqrt());
        let dy_pre = Activation::Softplus.backward(&pass.y_pre, &pass.y, dy);
        let d_hidden = w.output.backward(&pass.hidden, &dy_pre, &mut grad.output, true).expect("requested");
        let mut d_q0 = d_hidden.clone();
        let d_o = w.attn_out.backward(&pass.o, &d_hidden, &mut grad.attn_out, true).expect("requested");
        let mut dq = Array2::zeros(pass.q.dim());
        let mut dkey = Array2::zeros(pass.k.dim());
        let mut dv = Array2::zeros(pass.v.dim());
        for (h, a) in pass.attn.iter().enumerate() {
            let r = h * dk..(h + 1) * dk;
            let d_oh = d_o.slice(s![.., r.clone()]);
            let d_a = d_oh.dot(&pass.v.slice(s![.., r.clone()]).t());
            dv.slice_mut(s![.., r.clone()]).assign(&a.t().dot(&d_oh));
            let row_dot = (&d_a * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_s = (a * &(&d_a - &row_dot)).mapv(|x| x * inv_sqrt);
            dq.slice_mut(s![.., r.clone()]).assign(&d_s.dot(&pass.k.slice(s![.., r.clone()])));
            dkey.slice_mut(s![.., r.clone()]).assign(&d_s.t().dot(&pass.q.slice(s![.., r])));
        }
        d_q0 += &w.query.backward(&pass.q0, &dq, &mut grad.query, true).expect("requested");
        let mut d_proj = w.key.backward(&pass.projections, &dkey, &mut grad.key, true).expect("requested");
        d_proj += &w.value.backward(&pass.projections, &dv, &mut grad.value, true).expect("requested");
        for ((i, j), &z) in zone_map.labels.indexed_iter() {
            let d = d_q0.row(i * n + j);
            let mut dp = d_proj.row_mut(z);
            dp += &d;
            let mut rp = grad.row_pos.row_mut(i);
            rp += &d;
            let mut cp = grad.col_pos.row_mut(j);
            cp += &d;
        }
        let d_in = w.projection.backward(zone_inputs, &d_proj, &mut grad.projection, true).expect("requested");
        grad.zone_embed += &d_in;
    }

    /// Per-head attention matrices (cells x Z) for a zone map and projections.
    pub fn attention_weights(&self, zone_map: &ZoneMap, projections: &Array2<T>) -> Result<Vec<Array2<T>>> {
        self.check_zone_map(zone_map)?;
        self.check_projections(projections)?;
        Ok(self.grid_pass(zone_map, projections.clone()).attn)
    }

    fn check_projections(&self, projections: &Array2<T>) -> Result<()> {
        if projections.dim() != (self.shape.zones(), self.dims.d_f) {
            return Err(Error::ShapeMismatch(format!(
                "projections are {:?}, expected ({}, {})",
                projections.dim(),
                self.shape.zones(),
                self.dims.d_f
            )));
        }
        Ok(())
    }

    /// Batch-mean `zone_ce + lambda_grid * grid_recon` with teacher-forced
    /// zone maps, and its gradient.
    pub fn loss_and_gradient(&self, batch: &[&TrainingExample<T>]) -> Result<(IhLoss, IhWeights<T>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for e in batch {
            self.check_condition(&e.condition)?;
            self.check_zone_map(&e.zone_map)?;
            if e.config.counts.len() != self.shape.tensor_len() {
                return Err(Error::dim("configuration", self.shape.tensor_len(), e.config.counts.len()));
            }
        }
        let w = &self.weights;
        let b = T::of(batch.len() as f64);
        let zones = self.shape.zones();
        let cells = self.shape.cells();
        let lambda = T::of(self.hyper.lambda_grid);
        let mut grad = w.zeroed();

        let conds: Vec<&[T]> = batch.iter().map(|e| e.condition.values.as_slice()).collect();
        let cache = w.zone_stage.forward(&stack_rows(&conds));
        let mut d_logits = Array2::zeros(cache.out.dim());
        let mut zone_ce = T::zero();
        for (r, e) in batch.iter().enumerate() {
            let labels: Vec<usize> = e.zone_map.labels.iter().copied().collect();
            let (loss, g) = zone_cross_entropy(cache.out.row(r).as_slice().expect("standard layout"), &labels, zones);
            zone_ce += loss;
            for (dst, gv) in d_logits.row_mut(r).iter_mut().zip(g) {
                *dst = gv / b;
            }
        }
        w.zone_stage.backward(&cache, &d_logits, &mut grad.zone_stage, false);

        let mut recon = T::zero();
        for e in batch {
            let zin = self.zone_inputs(&e.condition.values);
            let pass = self.grid_pass(&e.zone_map, w.projection.forward(&zin));
            let target = Array2::from_shape_vec((cells, self.shape.categories()), normalized_counts(&e.config)).expect("shape checked");
            let diff = &pass.y - &target;
            recon += diff.iter().map(|&d| d * d).sum::<T>() / T::of(cells as f64);
            let dy = diff.mapv(|d| lambda * T::of(2.0) * d / T::of(cells as f64) / b);
            self.grid_backward(&e.zone_map, &zin, &pass, &dy, &mut grad);
        }
        Ok((IhLoss { zone_ce: (zone_ce / b).to_f64_lossy(), grid_recon: (recon / b).to_f64_lossy() }, grad))
    }
}

pub fn train_ihplanner<T: Scalar>(
    examples: &[TrainingExample<T>],
    shape: &PlanShape,
    hyper: &IhplannerHyper,
    seed: u64,
) -> Result<IhplannerModel<T>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
    }
    let configs: Vec<_> = examples.iter().map(|e| &e.config).collect();
    let mut model = IhplannerModel::new(shape.clone(), examples[0].condition.dim(), hyper.clone(), mean_cell_mass(&configs), seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut rng = seeded(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut sums = IhEpoch { zone_ce: 0.0, grid_recon: 0.0, total: 0.0 };
        let mut batches = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let items: Vec<&TrainingExample<T>> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&items)?;
            let total = loss.zone_ce + hyper.lambda_grid * loss.grid_recon;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, detail: format!("{loss:?}") });
            }
            opt.step(&mut model.weights, &grad);
            sums.zone_ce += loss.zone_ce;
            sums.grid_recon += loss.grid_recon;
            sums.total += total;
            batches += 1.0;
        }
        model.training_log.push(IhEpoch { zone_ce: sums.zone_ce / batches, grid_recon: sums.grid_recon / batches, total: sums.total / batches });
    }
    Ok(model)
}

pub fn generate_zone_level<T: Scalar>(model: &IhplannerModel<T>, condition: &ConditionEmbedding<T>) -> Result<ZoneMap> {
    model.check_condition(condition)?;
    let logits = model.weights.zone_stage.predict(&stack_rows(&[&condition.values]));
    zone_map_from_logits(&model.shape.grid, logits.as_slice().expect("standard layout"), model.shape.zones())
}

/// Requirement embeddings `(c + E_z) W + b`, one row per zone, including
/// zones absent from the map.
pub fn functionalize<T: Scalar>(model: &IhplannerModel<T>, condition: &ConditionEmbedding<T>, zone_map: &ZoneMap) -> Result<Array2<T>> {
    model.check_condition(condition)?;
    model.check_zone_map(zone_map)?;
    Ok(model.projections(&condition.values))
}

pub fn generate_grid_level<T: Scalar>(model: &IhplannerModel<T>, zone_map: &ZoneMap, projections: &Array2<T>) -> Result<LandUseConfiguration<T>> {
    model.check_zone_map(zone_map)?;
    model.check_projections(projections)?;
    let y = model.grid_pass(zone_map, projections.clone()).y;
    config_from_normalized(&model.shape, y.as_slice().expect("standard layout"), model.cell_mass)
}

pub fn generate_config_hier<T: Scalar>(model: &IhplannerModel<T>, condition: &ConditionEmbedding<T>) -> Result<HierOutput<T>> {
    let zone_map = generate_zone_level(model, condition)?;
    let projections = functionalize(model, condition, &zone_map)?;
    let config = generate_grid_level(model, &zone_map, &projections)?;
    let consistency = hierarchy_consistency(&config, &zone_map, &model.shape.mapping)?;
    Ok(HierOutput { zone_map, config, hierarchy_consistency: consistency })
}

impl<T: Scalar> PlanGenerator<T> for IhplannerModel<T> {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Hier
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

    /// The hierarchical planner has no latent noise; `seed` is ignored.
    fn normalized_output(&self, condition: &ConditionEmbedding<T>, _seed: u64) -> Result<Vec<T>> {
        let zone_map = generate_zone_level(self, condition)?;
        let pass = self.grid_pass(&zone_map, self.projections(&condition.values));
        Ok(pass.y.into_raw_vec_and_offset().0)
    }

    fn generate_plan(&self, condition: &ConditionEmbedding<T>, _seed: u64) -> Result<Plan<T>> {
        let out = generate_config_hier(self, condition)?;
        Ok(Plan { config: out.config, zone_map: out.zone_map })
    }
}

impl<T: Scalar> RewardTunable<T> for IhplannerModel<T> {
    fn optimizer(&self, lr: f64) -> Adam<T> {
        Adam::new(AdamConfig::with_lr(lr))
    }

    /// Grid-stage regression on the model's own zone sketch; the zone stage
    /// is left alone.
    fn regression_step(&mut self, opt: &mut Adam<T>, batch: &[RegressionItem<'_, T>]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let cells = self.shape.cells();
        let b = T::of(batch.len() as f64);
        let mut grad = self.weights.zeroed();
        let mut loss = T::zero();
        for item in batch {
            let zone_map = generate_zone_level(self, item.condition)?;
            if item.target.len() != self.shape.tensor_len() {
                return Err(Error::dim("regression target", self.shape.tensor_len(), item.target.len()));
            }
            let zin = self.zone_inputs(&item.condition.values);
            let pass = self.grid_pass(&zone_map, self.weights.projection.forward(&zin));
            let target = Array2::from_shape_vec((cells, self.shape.categories()), item.target.clone()).expect("length checked");
            let diff = &pass.y - &target;
            loss += diff.iter().map(|&d| d * d).sum::<T>() / T::of(cells as f64) / b;
            let dy = diff.mapv(|d| T::of(2.0) * d / T::of(cells as f64) / b);
            self.grid_backward(&zone_map, &zin, &pass, &dy, &mut grad);
        }
        opt.step(&mut self.weights, &grad);
        Ok(loss.to_f64_lossy())
    }
}
