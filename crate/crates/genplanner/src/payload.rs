//! JSON shapes exchanged with clients.

use std::collections::BTreeMap;

use genplanner_core::hitl::{render_instruction, Candidate, Iteration, IterationMetrics, SessionStatus, TurnKind};
use genplanner_core::{Error, Plan};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryLayer {
    pub category: String,
    pub total: f64,
    /// `n x n` counts of this category.
    pub cells: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanPayload {
    pub n: usize,
    pub categories: Vec<String>,
    /// `counts[i][j][c]`.
    pub counts: Vec<Vec<Vec<f64>>>,
    pub zone_map: Vec<Vec<usize>>,
    pub zone_count: usize,
    pub layers: Vec<CategoryLayer>,
}

impl PlanPayload {
    pub fn from_plan(plan: &Plan<f64>) -> Self {
        let config = &plan.config;
        let n = config.grid.n;
        let c = config.category_names.len();
        let counts = (0..n).map(|i| (0..n).map(|j| (0..c).map(|k| config.counts[[i, j, k]]).collect()).collect()).collect();
        let zone_map = (0..n).map(|i| (0..n).map(|j| plan.zone_map.labels[[i, j]]).collect()).collect();
        let layers = config
            .category_names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let cells: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| config.counts[[i, j, k]]).collect()).collect();
                CategoryLayer { category: name.clone(), total: cells.iter().flatten().sum(), cells }
            })
            .collect();
        Self { n, categories: config.category_names.clone(), counts, zone_map, zone_count: plan.zone_map.zone_count, layers }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationPayload {
    pub session_id: String,
    pub index: usize,
    pub kind: TurnKind,
    pub text: String,
    /// Attribute key -> level index.
    pub instruction: BTreeMap<String, usize>,
    pub instruction_text: String,
    pub plan: PlanPayload,
    pub metrics: IterationMetrics,
    pub reward: f64,
    pub seed: u64,
    pub candidates: Vec<Candidate>,
    pub timestamp_ms: i64,
}

impl IterationPayload {
    pub fn new(session_id: &str, it: &Iteration<f64>) -> Self {
        Self {
            session_id: session_id.to_string(),
            index: it.index,
            kind: it.kind,
            text: it.text.clone(),
            instruction: it.instruction.slots.iter().map(|(a, &l)| (a.key().to_string(), l)).collect(),
            instruction_text: render_instruction(&it.instruction).unwrap_or_default(),
            plan: PlanPayload::from_plan(&it.plan),
            metrics: it.metrics,
            reward: it.reward,
            seed: it.seed,
            candidates: it.candidates.clone(),
            timestamp_ms: it.timestamp_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPayload {
    pub session_id: String,
    pub status: SessionStatus,
    pub iterations: Vec<IterationPayload>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    /// Id of a dataset sample whose context is used.
    #[serde(default)]
    pub context_id: Option<String>,
    /// Raw features: target vector plus neighbor vectors.
    #[serde(default)]
    pub context: Option<genplanner_core::context::ContextFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub context_id: Option<String>,
    pub history_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRequest {
    pub text: String,
}

/// Error body `{code, message, suggestions?}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestions: Option<Vec<String>>,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into(), suggestions: None }
    }

    /// Stable code and HTTP status for a core error.
    pub fn from_error(err: &Error) -> (u16, Self) {
        let (status, code) = match err {
            Error::SessionNotFound(_) => (404, "session_not_found"),
            Error::UnknownContext(_) => (404, "unknown_context"),
            Error::UnparsableInstruction { .. } => (422, "unparsable_instruction"),
            Error::EmptyText => (422, "empty_text"),
            Error::DimensionMismatch { .. } | Error::ShapeMismatch(_) => (422, "dimension_mismatch"),
            Error::InvalidArgument(_) => (400, "invalid_argument"),
            Error::NoPriorPlan => (409, "no_prior_plan"),
            Error::SessionClosed => (409, "session_closed"),
            _ => (500, "internal"),
        };
        let mut body = Self::new(code, err.to_string());
        if let Error::UnparsableInstruction { suggestions, .. } = err {
            body.suggestions = Some(suggestions.clone());
        }
        (status, body)
    }
}
