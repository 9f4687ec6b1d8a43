//! Plans and the common interface of the three generators.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::context::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::nn::{masked_softmax, Adam};
use crate::scalar::Scalar;
use crate::spatial::{CategoryZoneMapping, GridSpec, LandUseConfiguration, ZoneMap};

/// Output geometry shared by every generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanShape {
    pub grid: GridSpec,
    pub category_names: Vec<String>,
    pub mapping: CategoryZoneMapping,
}

impl PlanShape {
    pub fn new(grid: GridSpec, category_names: Vec<String>, mapping: CategoryZoneMapping) -> Result<Self> {
        if mapping.categories() != category_names.len() {
            return Err(Error::dim("mapping categories", category_names.len(), mapping.categories()));
        }
        Ok(Self { grid, category_names, mapping })
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn zones(&self) -> usize {
        self.mapping.zone_count
    }

    /// Length of a flattened `n x n x C` tensor.
    pub fn tensor_len(&self) -> usize {
        self.cells() * self.categories()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Plan<T = f64> {
    pub config: LandUseConfiguration<T>,
    pub zone_map: ZoneMap,
}

/// Row-major counts rescaled so the mean per-cell mass is 1
/// (`x * n^2 / sum(x)`); all zeros for an empty configuration.
pub fn normalized_counts<T: Scalar>(config: &LandUseConfiguration<T>) -> Vec<T> {
    let total = config.total();
    if total <= T::zero() {
        return vec![T::zero(); config.counts.len()];
    }
    let factor = T::of(config.grid.cells() as f64) / total;
    config.counts.iter().map(|&v| v * factor).collect()
}

/// Mean POI count per cell, the factor that maps normalized tensors back to counts.
pub fn mean_cell_mass<T: Scalar>(configs: &[&LandUseConfiguration<T>]) -> f64 {
    if configs.is_empty() {
        return 1.0;
    }
    let total: f64 = configs.iter().map(|c| c.total().to_f64_lossy() / c.grid.cells() as f64).sum();
    let mean = total / configs.len() as f64;
    if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

pub fn config_from_normalized<T: Scalar>(shape: &PlanShape, values: &[T], cell_mass: f64) -> Result<LandUseConfiguration<T>> {
    if values.len() != shape.tensor_len() {
        return Err(Error::dim("generated tensor", shape.tensor_len(), values.len()));
    }
    let n = shape.grid.n;
    let scale = T::of(cell_mass);
    let counts = Array3::from_shape_vec((n, n, shape.categories()), values.iter().map(|&v| v * scale).collect())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    LandUseConfiguration::new(shape.grid.clone(), counts, shape.category_names.clone())
}

/// Per-cell argmax of row-major `n*n x Z` logits; ties go to the lowest label.
pub fn zone_map_from_logits<T: Scalar>(grid: &GridSpec, logits: &[T], zones: usize) -> Result<ZoneMap> {
    if zones == 0 || logits.len() != grid.cells() * zones {
        return Err(Error::dim("zone logits", grid.cells() * zones, logits.len()));
    }
    let labels = logits
        .chunks(zones)
        .map(|cell| {
            let mut best = 0;
            for (z, &v) in cell.iter().enumerate() {
                if v > cell[best] {
                    best = z;
                }
            }
            best
        })
        .collect();
    ZoneMap::new(grid.clone(), Array2::from_shape_vec((grid.n, grid.n), labels).expect("cell count"), zones)
}

/// Mean per-cell cross-entropy of zone logits against labels, and its
/// gradient with respect to the logits (already divided by the cell count).
pub(crate) fn zone_cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], zones: usize) -> (T, Vec<T>) {
    let cells = T::of(labels.len() as f64);
    let mask = vec![true; zones];
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (cell, &label) in logits.chunks(zones).zip(labels) {
        let max = cell.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + cell.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - cell[label];
        let p = masked_softmax(cell, &mask);
        grad.extend(p.iter().enumerate().map(|(z, &pz)| (pz - if z == label { T::one() } else { T::zero() }) / cells));
    }
    (loss / cells, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Gan,
    Cvae,
    Hier,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gan" => Ok(Self::Gan),
            "cvae" => Ok(Self::Cvae),
            "hier" => Ok(Self::Hier),
            other => Err(Error::InvalidArgument(format!("unknown generator kind `{other}`"))),
        }
    }
}

pub trait PlanGenerator<T: Scalar> {
    fn kind(&self) -> GeneratorKind;
    fn shape(&self) -> &PlanShape;
    fn condition_dim(&self) -> usize;
    /// Mean POI count per cell that normalized outputs are scaled back to.
    fn cell_mass(&self) -> f64;

    /// Normalized `n x n x C` output for a condition; `seed` drives any
    /// latent or noise draw.
    fn normalized_output(&self, condition: &ConditionEmbedding<T>, seed: u64) -> Result<Vec<T>>;

    fn generate_plan(&self, condition: &ConditionEmbedding<T>, seed: u64) -> Result<Plan<T>>;

    fn check_condition(&self, condition: &ConditionEmbedding<T>) -> Result<()> {
        if condition.dim() != self.condition_dim() {
            return Err(Error::dim("condition", self.condition_dim(), condition.dim()));
        }
        Ok(())
    }
}

/// One regression target for reward-weighted fine-tuning.
pub struct RegressionItem<'a, T> {
    pub condition: &'a ConditionEmbedding<T>,
    pub seed: u64,
    pub target: Vec<T>,
}

pub trait RewardTunable<T: Scalar>: PlanGenerator<T> {
    /// Fresh optimizer bound to this model's parameter layout.
    fn optimizer(&self, lr: f64) -> Adam<T>;

    /// One step on the mean squared distance between `normalized_output`
    /// and each target. Returns the loss before the step.
    fn regression_step(&mut self, opt: &mut Adam<T>, batch: &[RegressionItem<'_, T>]) -> Result<f64>;
}
