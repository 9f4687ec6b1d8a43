//! Plan quality metrics and the evaluation report.

use std::collections::BTreeSet;
use std::f64::consts::LN_2;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spatial::{
    attribute_value, bucket_level, dominant_zone_of_cell, green_rate, CategoryZoneMapping, Instruction,
    LandUseConfiguration, ZoneMap,
};

pub const KL_EPSILON: f64 = 1e-9;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    for v in [p, q] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOLERANCE || v.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::NotNormalized(s));
        }
    }
    Ok(())
}

/// `sum p ln(p / q)` with `0 ln 0 = 0`. When `q` has no mass on some entry
/// where `p` does, `epsilon` is added to every entry of `q` and `q` is
/// renormalized so the divergence stays finite.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    check_pair(p, q)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("smoothing epsilon must be positive".into()));
    }
    let unsupported = p.iter().zip(q).any(|(&a, &b)| a > 0.0 && b == 0.0);
    let smoothed: Vec<f64> = if unsupported {
        let total: f64 = q.iter().map(|&b| b + epsilon).sum();
        q.iter().map(|&b| (b + epsilon) / total).collect()
    } else {
        q.to_vec()
    };
    let kl: f64 = p
        .iter()
        .zip(&smoothed)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum();
    Ok(kl.max(0.0))
}

pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_divergence(p, &m, KL_EPSILON)? + 0.5 * kl_divergence(q, &m, KL_EPSILON)?;
    Ok(js.clamp(0.0, LN_2))
}

fn check_same_grid<T: Scalar>(config: &LandUseConfiguration<T>, zone_map: &ZoneMap) -> Result<()> {
    let (a, b, _) = config.counts.dim();
    if (a, b) != zone_map.labels.dim() {
        return Err(Error::ShapeMismatch(format!("config {:?} vs zone map {:?}", (a, b), zone_map.labels.dim())));
    }
    Ok(())
}

/// Fraction of non-empty cells whose dominant mapped zone equals the zone
/// map's label. 1.0 when every cell is empty.
pub fn hierarchy_consistency<T: Scalar>(
    config: &LandUseConfiguration<T>,
    zone_map: &ZoneMap,
    mapping: &CategoryZoneMapping,
) -> Result<f64> {
    check_same_grid(config, zone_map)?;
    if config.categories() != mapping.categories() {
        return Err(Error::dim("mapping categories", config.categories(), mapping.categories()));
    }
    let (n, _, c) = config.counts.dim();
    let (mut occupied, mut agree) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if (0..c).all(|k| config.counts[[i, j, k]] <= T::zero()) {
                continue;
            }
            occupied += 1;
            if dominant_zone_of_cell(config, mapping, i, j) == zone_map.labels[[i, j]] {
                agree += 1;
            }
        }
    }
    Ok(if occupied == 0 { 1.0 } else { agree as f64 / occupied as f64 })
}

/// Share of instruction slots whose realized level matches the request.
pub fn instruction_compliance<T: Scalar>(
    config: &LandUseConfiguration<T>,
    instruction: &Instruction,
    mapping: &CategoryZoneMapping,
    levels: usize,
) -> Result<f64> {
    if instruction.slots.is_empty() {
        return Err(Error::InvalidArgument("instruction has no slots".into()));
    }
    let mut hits = 0;
    for (&attr, &level) in &instruction.slots {
        let value = attribute_value(config, mapping, attr)?.to_f64_lossy();
        if bucket_level(value, levels) == level {
            hits += 1;
        }
    }
    Ok(hits as f64 / instruction.slots.len() as f64)
}

fn shares<T: Scalar>(config: &LandUseConfiguration<T>) -> Result<Vec<f64>> {
    let total = config.total().to_f64_lossy();
    if !(total > 0.0) {
        return Err(Error::EmptyConfiguration);
    }
    Ok(config.counts.iter().map(|&v| v.to_f64_lossy() / total).collect())
}

/// Mean L1 distance between count-normalized tensors over unordered pairs.
pub fn diversity<T: Scalar>(configs: &[LandUseConfiguration<T>]) -> Result<f64> {
    if configs.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: configs.len() });
    }
    let dim = configs[0].counts.dim();
    if let Some(bad) = configs.iter().find(|c| c.counts.dim() != dim) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", bad.counts.dim(), dim)));
    }
    let normalized: Vec<Vec<f64>> = configs.iter().map(shares).collect::<Result<_>>()?;
    let (sum, pairs) = normalized
        .iter()
        .tuple_combinations()
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .fold((0.0, 0usize), |(s, k), d| (s + d, k + 1));
    Ok(sum / pairs as f64)
}

/// Gini coefficient of per-cell counts of the selected categories.
pub fn fairness_gini<T: Scalar>(config: &LandUseConfiguration<T>, categories: &BTreeSet<usize>) -> Result<f64> {
    let (n, _, c) = config.counts.dim();
    if let Some(&bad) = categories.iter().find(|&&k| k >= c) {
        return Err(Error::InvalidCategory { category: bad, count: c });
    }
    let mut cells: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| categories.iter().map(|&k| config.counts[[i, j, k]].to_f64_lossy()).sum())
        .collect();
    let total: f64 = cells.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptyConfiguration);
    }
    cells.sort_by(|a, b| a.total_cmp(b));
    let m = cells.len() as f64;
    let ranked: f64 = cells.iter().enumerate().map(|(i, &x)| (i as f64 + 1.0) * x).sum();
    let gini = 2.0 * ranked / (m * total) - (m + 1.0) / m;
    Ok(gini.clamp(0.0, (m - 1.0) / m))
}

/// Best agreement between two zone maps over all relabelings of the second.
pub fn permutation_matched_accuracy(truth: &ZoneMap, predicted: &ZoneMap) -> Result<f64> {
    if truth.labels.dim() != predicted.labels.dim() {
        return Err(Error::ShapeMismatch("zone maps differ in size".into()));
    }
    let z = truth.zone_count.max(predicted.zone_count);
    if z > 8 {
        return Err(Error::InvalidArgument("permutation matching is limited to 8 zones".into()));
    }
    let mut confusion = vec![vec![0usize; z]; z];
    for (&t, &p) in truth.labels.iter().zip(predicted.labels.iter()) {
        confusion[p][t] += 1;
    }
    let best = (0..z)
        .permutations(z)
        .map(|perm| (0..z).map(|p| confusion[p][perm[p]]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / truth.labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub kl: f64,
    pub js: f64,
    pub hierarchy_consistency: f64,
    pub compliance: f64,
    pub green_rate: f64,
    pub fairness_gini: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub kl: Summary,
    pub js: Summary,
    pub hierarchy_consistency: Summary,
    pub compliance: Summary,
    pub green_rate: Summary,
    pub fairness_gini: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub samples: Vec<SampleMetrics>,
    pub aggregates: Aggregates,
    pub diversity: Option<f64>,
    pub provenance: Provenance,
}

impl EvaluationReport {
    pub fn assemble(samples: Vec<SampleMetrics>, diversity: Option<f64>, provenance: Provenance) -> Self {
        let col = |f: fn(&SampleMetrics) -> f64| Summary::of(&samples.iter().map(f).collect::<Vec<_>>());
        let aggregates = Aggregates {
            kl: col(|s| s.kl),
            js: col(|s| s.js),
            hierarchy_consistency: col(|s| s.hierarchy_consistency),
            compliance: col(|s| s.compliance),
            green_rate: col(|s| s.green_rate),
            fairness_gini: col(|s| s.fairness_gini),
        };
        Self { samples, aggregates, diversity, provenance }
    }
}

/// Metrics of one generated plan against its reference configuration. The
/// fairness Gini is taken over green categories and is 0 for a plan without
/// green POIs; an entirely empty plan is an error.
pub fn sample_metrics<T: Scalar>(
    generated: &LandUseConfiguration<T>,
    zone_map: &ZoneMap,
    reference: &LandUseConfiguration<T>,
    instruction: &Instruction,
    mapping: &CategoryZoneMapping,
) -> Result<SampleMetrics> {
    let p: Vec<f64> = crate::spatial::poi_distribution(reference)?.into_iter().map(|v| v.to_f64_lossy()).collect();
    let q: Vec<f64> = crate::spatial::poi_distribution(generated)?.into_iter().map(|v| v.to_f64_lossy()).collect();
    let fairness = match fairness_gini(generated, &mapping.green_categories) {
        Ok(g) => g,
        Err(Error::EmptyConfiguration) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(SampleMetrics {
        kl: kl_divergence(&p, &q, KL_EPSILON)?,
        js: js_divergence(&p, &q)?,
        hierarchy_consistency: hierarchy_consistency(generated, zone_map, mapping)?,
        compliance: instruction_compliance(generated, instruction, mapping, instruction.levels)?,
        green_rate: green_rate(generated, mapping)?.to_f64_lossy(),
        fairness_gini: fairness,
    })
}
