//! Transport-independent planning service over a session store.

use std::time::{SystemTime, UNIX_EPOCH};

use genplanner_core::context::ContextFeatures;
use genplanner_core::dataset::{ConditionEncoder, SyntheticDataset};
use genplanner_core::hitl::{refine, Iteration, PlanningSession, Refiner, RewardModel, SessionMeta, SessionStatus, SessionStore, TurnKind};
use genplanner_core::rng::derive_seed;
use genplanner_core::{Error, Result};

use crate::artifacts::{load_json, GeneratorCheckpoint};
use crate::config::{ConfigError, ServiceConfig};
use crate::payload::CreateSessionRequest;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot load `{path}`: {source}")]
    Data { path: String, source: Error },
}

pub fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed for turn `index` of session `id`.
pub fn turn_seed(base: u64, id: &str, index: usize) -> u64 {
    derive_seed(base ^ fnv1a(id), index as u64)
}

pub struct Planner {
    pub config: ServiceConfig,
    pub encoder: ConditionEncoder<f64>,
    pub generator: GeneratorCheckpoint,
    pub reward: RewardModel<f64>,
    pub dataset: Option<SyntheticDataset<f64>>,
    pub store: SessionStore,
}

impl Planner {
    /// Loads every artifact named by a validated config.
    pub fn load(config: ServiceConfig) -> std::result::Result<Self, LoadError> {
        let data = |path: std::path::PathBuf| move |source| LoadError::Data { path: path.display().to_string(), source };
        let generator: GeneratorCheckpoint = load_json(&config.generator_path()).map_err(data(config.generator_path()))?;
        let reward: RewardModel<f64> = load_json(&config.reward_path()).map_err(data(config.reward_path()))?;
        let encoder: ConditionEncoder<f64> = load_json(&config.encoder_path()).map_err(data(config.encoder_path()))?;
        let dataset = match config.dataset_path() {
            Some(p) => Some(SyntheticDataset::load(&p).map_err(data(p))?),
            None => None,
        };
        let store = SessionStore::open(&config.data_dir).map_err(data(config.data_dir.clone()))?;
        Self::from_parts(config, encoder, generator, reward, dataset, store)
    }

    pub fn from_parts(
        config: ServiceConfig,
        encoder: ConditionEncoder<f64>,
        generator: GeneratorCheckpoint,
        reward: RewardModel<f64>,
        dataset: Option<SyntheticDataset<f64>>,
        store: SessionStore,
    ) -> std::result::Result<Self, LoadError> {
        let invalid = |m: String| LoadError::Config(ConfigError::Invalid(m));
        if generator.kind() != config.checkpoints.generator_kind {
            return Err(invalid(format!("generator checkpoint is {:?}, config names {:?}", generator.kind(), config.checkpoints.generator_kind)));
        }
        let shape = generator.generator().shape();
        let g = config.grid;
        if (shape.grid.n, shape.categories(), shape.zones(), encoder.registry.levels) != (g.n, g.categories, g.zones, g.levels) {
            return Err(invalid(format!(
                "checkpoints have n={}, C={}, Z={}, L={} but the grid defaults are n={}, C={}, Z={}, L={}",
                shape.grid.n,
                shape.categories(),
                shape.zones(),
                encoder.registry.levels,
                g.n,
                g.categories,
                g.zones,
                g.levels
            )));
        }
        if generator.generator().condition_dim() != encoder.condition_dim() || reward.condition_dim != encoder.condition_dim() {
            return Err(invalid("generator, reward model and encoder disagree on the condition size".into()));
        }
        Ok(Self { config, encoder, generator, reward, dataset, store })
    }

    fn resolve_context(&self, req: &CreateSessionRequest) -> Result<(Option<String>, ContextFeatures)> {
        match (&req.context_id, &req.context) {
            (Some(id), None) => {
                let sample = self.dataset.as_ref().and_then(|d| d.sample(id)).ok_or_else(|| Error::UnknownContext(id.clone()))?;
                Ok((Some(id.clone()), sample.context.clone()))
            }
            (None, Some(ctx)) => Ok((None, ctx.clone())),
            _ => Err(Error::InvalidArgument("give exactly one of context_id and context".into())),
        }
    }

    pub fn create_session(&self, req: &CreateSessionRequest) -> Result<SessionMeta<f64>> {
        let (context_id, context) = self.resolve_context(req)?;
        let expected = self.encoder.encoder.dims.features;
        if let Some(found) = std::iter::once(&context.target).chain(&context.neighbors).map(Vec::len).find(|&l| l != expected) {
            return Err(Error::DimensionMismatch { what: "context features", expected, found });
        }
        let embedding = self.encoder.context_embedding(&context)?;
        let meta = SessionMeta {
            id: uuid::Uuid::new_v4().simple().to_string(),
            context_id,
            context,
            embedding,
            created_ms: now_ms(),
            status: SessionStatus::Active,
        };
        self.store.create(&meta)?;
        Ok(meta)
    }

    /// One turn; the caller serializes turns per session.
    pub fn submit(&self, id: &str, text: &str, kind: TurnKind) -> Result<Iteration<f64>> {
        let mut session: PlanningSession<f64> = self.store.load(id)?;
        let refiner = Refiner {
            generator: self.generator.generator(),
            scorer: &self.reward,
            registry: &self.encoder.registry,
            k: self.config.k,
            sigma: self.config.sigma,
        };
        let seed = turn_seed(self.config.seed, id, session.history.len());
        let iteration = refine(&mut session, text, kind, &refiner, seed, now_ms())?.clone();
        self.store.append(id, &iteration)?;
        Ok(iteration)
    }

    pub fn session(&self, id: &str) -> Result<PlanningSession<f64>> {
        self.store.load(id)
    }
}
