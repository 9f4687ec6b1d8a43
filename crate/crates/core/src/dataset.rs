//! Synthetic datasets, their on-disk JSON form, and condition building.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{assemble_condition, embed_context, encode_instruction, ConditionEmbedding, ContextFeatures, GraphEncoder};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;
use crate::spatial::{
    from_nested2, nested2, Attribute, AttributeRegistry, CategoryZoneMapping, GridSpec, Instruction, LandUseConfiguration,
    ZoneMap,
};
use crate::synth::{generate_city_on, zone_bands, CityProfile};

/// One quantified community: configuration, zone map, surroundings and the
/// instruction it satisfies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "SampleRecord<T>", into = "SampleRecord<T>")]
pub struct PlanSample<T = f64> {
    pub id: String,
    pub config: LandUseConfiguration<T>,
    pub zone_map: ZoneMap,
    pub context: ContextFeatures,
    pub instruction: Instruction,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct SampleRecord<T> {
    id: String,
    grid: GridSpec,
    counts: Vec<Vec<Vec<T>>>,
    category_names: Vec<String>,
    zone_labels: Vec<Vec<usize>>,
    zone_count: usize,
    context: ContextFeatures,
    instruction: Instruction,
}

impl<T: Scalar> From<PlanSample<T>> for SampleRecord<T> {
    fn from(s: PlanSample<T>) -> Self {
        SampleRecord {
            id: s.id,
            counts: crate::spatial::nested3(&s.config.counts),
            grid: s.config.grid,
            category_names: s.config.category_names,
            zone_labels: nested2(&s.zone_map.labels),
            zone_count: s.zone_map.zone_count,
            context: s.context,
            instruction: s.instruction,
        }
    }
}

impl<T: Scalar> TryFrom<SampleRecord<T>> for PlanSample<T> {
    type Error = Error;

    fn try_from(r: SampleRecord<T>) -> Result<Self> {
        let counts = crate::spatial::from_nested3(&r.counts)?;
        let config = LandUseConfiguration::new(r.grid.clone(), counts, r.category_names)?;
        let zone_map = ZoneMap::new(r.grid, from_nested2(&r.zone_labels)?, r.zone_count)?;
        Ok(PlanSample { id: r.id, config, zone_map, context: r.context, instruction: r.instruction })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub zones: usize,
    pub categories: usize,
    pub features: usize,
    pub levels: usize,
    pub cities: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n: 16, zones: 5, categories: 10, features: 8, levels: 5, cities: 512, seed: 13 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub grid: GridSpec,
    pub profile: CityProfile,
    pub mapping: CategoryZoneMapping,
    pub registry: AttributeRegistry,
    pub files: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset<T = f64> {
    pub manifest: DatasetManifest,
    pub samples: Vec<PlanSample<T>>,
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Off-zone intensities are scaled by this factor so each zone's own
/// categories dominate its cells.
pub const OFF_ZONE_FACTOR: f64 = 1.0 / 3.0;

/// One city's deviation from the base profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityVariation {
    pub profile: CityProfile,
    /// Fraction of grid rows given to each zone.
    pub zone_shares: Vec<f64>,
}

/// The green zone covers a uniform share of the grid; the other zones split
/// the rest, with the commercial and residential zones weighted by
/// log-uniform factors in [1/2, 2]. The first three context features are
/// centred on these draws so the surroundings carry the signal.
pub fn vary_profile<R: Rng + ?Sized>(base: &CityProfile, mapping: &CategoryZoneMapping, rng: &mut R) -> Result<CityVariation> {
    let green = rng.random::<f64>();
    let commercial = log_uniform(rng, 0.5, 2.0);
    let residential = log_uniform(rng, 0.5, 2.0);
    let zones = base.zone_count;
    let zone_of = |cats: &std::collections::BTreeSet<usize>| cats.first().map(|&c| mapping.category_to_zone[c]);
    let green_zone = zone_of(&mapping.green_categories);
    let mut weights = vec![1.0; zones];
    if let Some(z) = zone_of(&mapping.commercial_categories) {
        weights[z] *= commercial;
    }
    if let Some(z) = zone_of(&mapping.residential_categories) {
        weights[z] *= residential;
    }
    let zone_shares = match green_zone {
        Some(g) if zones > 1 => {
            let rest: f64 = (0..zones).filter(|&z| z != g).map(|z| weights[z]).sum();
            (0..zones).map(|z| if z == g { green } else { (1.0 - green) * weights[z] / rest }).collect()
        }
        _ => weights.iter().map(|w| w / weights.iter().sum::<f64>()).collect(),
    };
    let mut rates = base.rates.clone();
    for ((z, c), r) in rates.indexed_iter_mut() {
        if mapping.category_to_zone[c] != z {
            *r *= OFF_ZONE_FACTOR;
        }
    }
    let mut mean = base.feature_mean.clone();
    let mut scale = base.feature_scale.clone();
    let signals = [2.0 * green - 1.0, commercial.ln() / 2f64.ln(), residential.ln() / 2f64.ln()];
    for (k, s) in signals.into_iter().enumerate().take(mean.len()) {
        mean[k] += s;
        scale[k] = 0.25;
    }
    let profile = CityProfile::new(rates, base.category_names.clone(), mean, scale)?;
    Ok(CityVariation { profile, zone_shares })
}

pub fn generate_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<SyntheticDataset<T>> {
    let grid = GridSpec::square(spec.n)?;
    let profile = CityProfile::planted(spec.zones, spec.categories, spec.features)?;
    let mapping = CategoryZoneMapping::banded(spec.categories, spec.zones)?;
    let registry = AttributeRegistry { attributes: Attribute::ALL.to_vec(), levels: spec.levels };
    let mut samples = Vec::with_capacity(spec.cities);
    for k in 0..spec.cities {
        let mut rng = seeded(derive_seed(spec.seed, 2 * k as u64));
        let variation = vary_profile(&profile, &mapping, &mut rng)?;
        let zone_map = zone_bands(&grid, &variation.zone_shares)?;
        let city = generate_city_on::<T>(&variation.profile, zone_map, &mapping, spec.levels, derive_seed(spec.seed, 2 * k as u64 + 1))?;
        samples.push(PlanSample {
            id: format!("city_{k:05}"),
            config: city.config,
            zone_map: city.zone_map,
            context: city.context,
            instruction: city.instruction,
        });
    }
    let files = samples.iter().map(|s| format!("{}.json", s.id)).collect();
    let manifest = DatasetManifest { spec: spec.clone(), grid, profile, mapping, registry, files };
    Ok(SyntheticDataset { manifest, samples })
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (sample, file) in self.samples.iter().zip(&self.manifest.files) {
            fs::write(dir.join(file), serde_json::to_vec(sample)?)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let samples = manifest
            .files
            .iter()
            .map(|f| Ok(serde_json::from_slice(&fs::read(dir.join(f))?)?))
            .collect::<Result<Vec<PlanSample<T>>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn sample(&self, id: &str) -> Option<&PlanSample<T>> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Graph encoder plus instruction registry: everything needed to turn a
/// context and an instruction into a condition vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConditionEncoder<T = f64> {
    pub encoder: GraphEncoder<T>,
    pub registry: AttributeRegistry,
}

impl<T: Scalar> ConditionEncoder<T> {
    pub fn new(encoder: GraphEncoder<T>, registry: AttributeRegistry) -> Self {
        Self { encoder, registry }
    }

    pub fn condition_dim(&self) -> usize {
        self.encoder.dims.embedding + self.registry.encoded_len()
    }

    pub fn context_embedding(&self, context: &ContextFeatures) -> Result<Vec<T>> {
        embed_context(&context.to_graph()?, &self.encoder)
    }

    pub fn condition_from_embedding(
        &self,
        embedding: &[T],
        instruction: &Instruction,
        sigma: f64,
        seed: u64,
    ) -> Result<ConditionEmbedding<T>> {
        let blocks = encode_instruction(instruction, &self.registry)?;
        Ok(assemble_condition(embedding, &blocks, self.registry.levels, sigma, seed)?
            .with_provenance(None, Some(instruction.clone())))
    }

    pub fn condition(&self, context: &ContextFeatures, instruction: &Instruction, sigma: f64, seed: u64) -> Result<ConditionEmbedding<T>> {
        let emb = self.context_embedding(context)?;
        self.condition_from_embedding(&emb, instruction, sigma, seed)
    }
}

/// A training triple for the generators.
#[derive(Clone, Debug)]
pub struct TrainingExample<T = f64> {
    pub condition: ConditionEmbedding<T>,
    pub config: LandUseConfiguration<T>,
    pub zone_map: ZoneMap,
}

/// Pair every sample with its own instruction.
pub fn training_examples<T: Scalar>(samples: &[PlanSample<T>], encoder: &ConditionEncoder<T>) -> Result<Vec<TrainingExample<T>>> {
    samples
        .iter()
        .map(|s| {
            let condition = encoder.condition(&s.context, &s.instruction, 0.0, 0)?.with_provenance(Some(s.id.clone()), Some(s.instruction.clone()));
            Ok(TrainingExample { condition, config: s.config.clone(), zone_map: s.zone_map.clone() })
        })
        .collect()
}

/// The same instruction with every slot moved to a different, uniformly
/// chosen level.
pub fn mismatched_instruction<R: Rng + ?Sized>(instruction: &Instruction, rng: &mut R) -> Instruction {
    let l = instruction.levels;
    let slots = instruction
        .slots
        .iter()
        .map(|(&a, &level)| {
            let shift = 1 + rng.random_range(0..l.max(2) - 1);
            (a, (level + shift) % l.max(1))
        })
        .collect();
    Instruction { slots, levels: l }
}

/// Training pairs whose instruction disagrees with the realized plan: each
/// example's instruction is moved to a different level.
pub fn mismatched_examples<T: Scalar>(examples: &[TrainingExample<T>], encoder: &ConditionEncoder<T>, seed: u64) -> Result<Vec<TrainingExample<T>>> {
    let mut rng = seeded(seed);
    examples
        .iter()
        .map(|e| {
            let original = e
                .condition
                .decode_instruction(&encoder.registry)
                .ok_or_else(|| Error::InvalidArgument("example condition carries no instruction".into()))?;
            let wrong = mismatched_instruction(&original, &mut rng);
            let condition = encoder.condition_from_embedding(e.condition.context(), &wrong, 0.0, 0)?;
            Ok(TrainingExample { condition: condition.with_provenance(e.condition.graph_id.clone(), Some(wrong)), ..e.clone() })
        })
        .collect()
}

/// Like [`training_examples`] with conditioning augmentation of scale
/// `sigma` on the context block; sample `k` uses noise seed
/// `derive_seed(seed, k)`.
pub fn augmented_examples<T: Scalar>(
    samples: &[PlanSample<T>],
    encoder: &ConditionEncoder<T>,
    sigma: f64,
    seed: u64,
) -> Result<Vec<TrainingExample<T>>> {
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let condition = encoder
                .condition(&s.context, &s.instruction, sigma, derive_seed(seed, k as u64))?
                .with_provenance(Some(s.id.clone()), Some(s.instruction.clone()));
            Ok(TrainingExample { condition, config: s.config.clone(), zone_map: s.zone_map.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_json_round_trips_with_canonical_fields() {
        let spec = DatasetSpec { n: 4, zones: 2, categories: 4, features: 3, cities: 3, ..DatasetSpec::default() };
        let data = generate_dataset::<f64>(&spec).unwrap();
        let json = serde_json::to_value(&data.samples[0]).unwrap();
        for key in ["grid", "counts", "category_names", "zone_labels", "zone_count"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["grid"]["n"], 4);
        let back: PlanSample<f64> = serde_json::from_value(json).unwrap();
        assert_eq!(back, data.samples[0]);
    }

    #[test]
    fn dataset_writes_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { n: 4, zones: 2, categories: 4, features: 3, cities: 5, ..DatasetSpec::default() };
        let data = generate_dataset::<f64>(&spec).unwrap();
        data.write(dir.path()).unwrap();
        let loaded = SyntheticDataset::<f64>::load(dir.path()).unwrap();
        assert_eq!(loaded.samples, data.samples);
        assert_eq!(loaded.manifest, data.manifest);
    }

    #[test]
    fn green_levels_spread_over_all_buckets() {
        let data = generate_dataset::<f64>(&DatasetSpec { cities: 300, ..DatasetSpec::default() }).unwrap();
        let mut hist = [0usize; 5];
        for s in &data.samples {
            hist[s.instruction.level(Attribute::GreenRate).unwrap()] += 1;
        }
        assert!(hist.iter().all(|&h| h >= 20), "{hist:?}");
    }

    #[test]
    fn mismatch_always_changes_level() {
        let mut rng = seeded(1);
        let instr = Instruction::single(Attribute::GreenRate, 2, 5).unwrap();
        for _ in 0..100 {
            let m = mismatched_instruction(&instr, &mut rng);
            assert_ne!(m.level(Attribute::GreenRate), Some(2));
        }
    }
}
