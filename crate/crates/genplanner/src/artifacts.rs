//! Checkpoint files and the default training recipe.

use std::fs;
use std::path::Path;

use genplanner_core::context::{train_graph_autoencoder, ConditionEmbedding};
use genplanner_core::cvae::{train_cluvae, CluvaeHyper, CluvaeModel};
use genplanner_core::dataset::{augmented_examples, mismatched_examples, training_examples, ConditionEncoder, PlanSample, SyntheticDataset};
use genplanner_core::gan::{train_lucgan, LucganHyper, LucganModel};
use genplanner_core::hier::{train_ihplanner, IhplannerHyper, IhplannerModel};
use genplanner_core::hitl::{
    candidate_sets_from_samples, reward_weighted_finetune, synthesize_preferences, train_reward_model, FinetuneConfig, FinetuneLog,
    PlanScorer, RewardHyper, RewardModel,
};
use genplanner_core::{Error, GeneratorKind, PlanGenerator, PlanShape, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn save_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(value)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// A trained generator of any kind, stored as `{"kind": ..., "model": ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum GeneratorCheckpoint {
    Gan(LucganModel<f64>),
    Cvae(CluvaeModel<f64>),
    Hier(IhplannerModel<f64>),
}

impl GeneratorCheckpoint {
    pub fn kind(&self) -> GeneratorKind {
        self.generator().kind()
    }

    pub fn generator(&self) -> &dyn PlanGenerator<f64> {
        match self {
            Self::Gan(m) => m,
            Self::Cvae(m) => m,
            Self::Hier(m) => m,
        }
    }

    pub fn finetune(
        &self,
        scorer: &dyn PlanScorer<f64>,
        train: &[ConditionEmbedding<f64>],
        heldout: &[ConditionEmbedding<f64>],
        config: &FinetuneConfig,
        seed: u64,
    ) -> Result<(Self, FinetuneLog)> {
        Ok(match self {
            Self::Gan(m) => {
                let (m, log) = reward_weighted_finetune(m, scorer, train, heldout, config, seed)?;
                (Self::Gan(m), log)
            }
            Self::Cvae(m) => {
                let (m, log) = reward_weighted_finetune(m, scorer, train, heldout, config, seed)?;
                (Self::Cvae(m), log)
            }
            Self::Hier(m) => {
                let (m, log) = reward_weighted_finetune(m, scorer, train, heldout, config, seed)?;
                (Self::Hier(m), log)
            }
        })
    }
}

/// Hyperparameters for every trainable component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub encoder_graphs: usize,
    pub encoder_epochs: usize,
    pub encoder_lr: f64,
    pub embedding: usize,
    pub encoder_hidden: usize,
    /// Conditioning-augmentation scale for CVAE and hierarchical training.
    pub augment_sigma: f64,
    pub gan: LucganHyper,
    pub cvae: CluvaeHyper,
    pub hier: IhplannerHyper,
    pub reward: RewardHyper,
    pub candidate_sets: usize,
    pub plans_per_set: usize,
    pub preference_pairs: usize,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            encoder_graphs: 64,
            encoder_epochs: 200,
            encoder_lr: 1e-2,
            embedding: 16,
            encoder_hidden: 32,
            augment_sigma: 0.2,
            gan: LucganHyper::default(),
            cvae: CluvaeHyper::default(),
            hier: IhplannerHyper::default(),
            reward: RewardHyper::default(),
            candidate_sets: 200,
            plans_per_set: 4,
            preference_pairs: 500,
        }
    }
}

impl Recipe {
    /// Overrides the epoch count of the generator of `kind`.
    pub fn with_epochs(mut self, kind: GeneratorKind, epochs: usize) -> Self {
        match kind {
            GeneratorKind::Gan => self.gan.epochs = epochs,
            GeneratorKind::Cvae => self.cvae.epochs = epochs,
            GeneratorKind::Hier => self.hier.epochs = epochs,
        }
        self
    }
}

pub fn plan_shape(data: &SyntheticDataset<f64>) -> Result<PlanShape> {
    let m = &data.manifest;
    PlanShape::new(m.grid.clone(), m.profile.category_names.clone(), m.mapping.clone())
}

pub fn train_encoder(samples: &[PlanSample<f64>], data: &SyntheticDataset<f64>, recipe: &Recipe, seed: u64) -> Result<ConditionEncoder<f64>> {
    let graphs = samples.iter().take(recipe.encoder_graphs).map(|s| s.context.to_graph()).collect::<Result<Vec<_>>>()?;
    let encoder = train_graph_autoencoder(&graphs, recipe.embedding, recipe.encoder_hidden, recipe.encoder_epochs, recipe.encoder_lr, seed)?;
    Ok(ConditionEncoder::new(encoder, data.manifest.registry.clone()))
}

pub fn train_generator(
    kind: GeneratorKind,
    samples: &[PlanSample<f64>],
    shape: &PlanShape,
    encoder: &ConditionEncoder<f64>,
    recipe: &Recipe,
    seed: u64,
) -> Result<GeneratorCheckpoint> {
    match kind {
        GeneratorKind::Gan => {
            let good = training_examples(samples, encoder)?;
            let bad = mismatched_examples(&good, encoder, seed)?;
            Ok(GeneratorCheckpoint::Gan(train_lucgan(&good, &bad, shape, &recipe.gan, seed)?))
        }
        GeneratorKind::Cvae => {
            let examples = augmented_examples(samples, encoder, recipe.augment_sigma, seed)?;
            Ok(GeneratorCheckpoint::Cvae(train_cluvae(&examples, shape, &recipe.cvae, seed)?))
        }
        GeneratorKind::Hier => {
            let examples = augmented_examples(samples, encoder, recipe.augment_sigma, seed)?;
            Ok(GeneratorCheckpoint::Hier(train_ihplanner(&examples, shape, &recipe.hier, seed)?))
        }
    }
}

pub fn train_reward(samples: &[PlanSample<f64>], encoder: &ConditionEncoder<f64>, shape: &PlanShape, recipe: &Recipe, seed: u64) -> Result<RewardModel<f64>> {
    if samples.len() < recipe.plans_per_set.max(2) {
        return Err(Error::InsufficientData("too few samples for preference synthesis".into()));
    }
    let sets = candidate_sets_from_samples(samples, encoder, recipe.candidate_sets, recipe.plans_per_set, seed)?;
    let pairs = synthesize_preferences(&sets, &shape.mapping, recipe.preference_pairs, seed)?;
    train_reward_model(&pairs, &encoder.registry, &shape.mapping, &recipe.reward, seed)
}
