//! Planning sessions and best-of-K refinement.

use serde::{Deserialize, Serialize};

use super::instruction::parse_instruction;
use super::reward::PlanScorer;
use crate::context::{assemble_condition, encode_instruction, ConditionEmbedding, ContextFeatures};
use crate::error::{Error, Result};
use crate::eval::{fairness_gini, hierarchy_consistency, instruction_compliance};
use crate::plan::{Plan, PlanGenerator};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::spatial::{green_rate, AttributeRegistry, CategoryZoneMapping, Instruction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    /// Replaces the session instruction.
    Instruction,
    /// Overrides the named slots of the session instruction.
    Feedback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub green_rate: f64,
    pub compliance: f64,
    pub consistency: f64,
    pub gini: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seed: u64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Iteration<T = f64> {
    pub index: usize,
    pub kind: TurnKind,
    pub text: String,
    /// Session instruction after this turn.
    pub instruction: Instruction,
    pub plan: Plan<T>,
    pub metrics: IterationMetrics,
    pub reward: f64,
    /// Sub-seed of the selected candidate.
    pub seed: u64,
    pub candidates: Vec<Candidate>,
    pub timestamp_ms: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SessionMeta<T = f64> {
    pub id: String,
    pub context_id: Option<String>,
    pub context: ContextFeatures,
    /// Graph embedding of the context, computed once at creation.
    pub embedding: Vec<T>,
    pub created_ms: i64,
    pub status: SessionStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PlanningSession<T = f64> {
    pub meta: SessionMeta<T>,
    pub instruction: Option<Instruction>,
    pub history: Vec<Iteration<T>>,
}

impl<T: Scalar> PlanningSession<T> {
    pub fn new(meta: SessionMeta<T>) -> Self {
        Self { meta, instruction: None, history: Vec::new() }
    }

    /// Rebuilds a session from its stored parts, checking indices and that
    /// replaying the turn texts reproduces every recorded instruction.
    pub fn from_parts(meta: SessionMeta<T>, history: Vec<Iteration<T>>) -> Result<Self> {
        let states = replay_instructions(&history)?;
        for (it, state) in history.iter().zip(&states) {
            if &it.instruction != state {
                return Err(Error::InvariantViolation(format!("iteration {} does not replay to its recorded instruction", it.index)));
            }
        }
        Ok(Self { meta, instruction: states.last().cloned(), history })
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn is_active(&self) -> bool {
        self.meta.status == SessionStatus::Active
    }

    pub fn close(&mut self) {
        self.meta.status = SessionStatus::Closed;
    }

    /// Clean condition for an instruction: the cached embedding plus the
    /// instruction blocks.
    pub fn condition(&self, instruction: &Instruction, registry: &AttributeRegistry) -> Result<ConditionEmbedding<T>> {
        condition_for(&self.meta.embedding, instruction, registry, 0.0, 0)
    }
}

fn condition_for<T: Scalar>(
    embedding: &[T],
    instruction: &Instruction,
    registry: &AttributeRegistry,
    sigma: f64,
    seed: u64,
) -> Result<ConditionEmbedding<T>> {
    let blocks = encode_instruction(instruction, registry)?;
    Ok(assemble_condition(embedding, &blocks, registry.levels, sigma, seed)?.with_provenance(None, Some(instruction.clone())))
}

/// Slot state after every turn, recomputed from the turn texts.
pub fn replay_instructions<T: Scalar>(history: &[Iteration<T>]) -> Result<Vec<Instruction>> {
    let mut current: Option<Instruction> = None;
    let mut out = Vec::with_capacity(history.len());
    for (i, it) in history.iter().enumerate() {
        if it.index != i {
            return Err(Error::InvariantViolation(format!("iteration index {} at position {i}", it.index)));
        }
        let parsed = parse_instruction(&it.text)?;
        let next = match (it.kind, &current) {
            (TurnKind::Feedback, Some(prev)) => prev.merged(&parsed),
            (TurnKind::Feedback, None) => return Err(Error::NoPriorPlan),
            (TurnKind::Instruction, _) => parsed,
        };
        out.push(next.clone());
        current = Some(next);
    }
    Ok(out)
}

pub fn plan_metrics<T: Scalar>(plan: &Plan<T>, instruction: &Instruction, mapping: &CategoryZoneMapping) -> Result<IterationMetrics> {
    let empty = plan.config.total() <= T::zero();
    let gini = match fairness_gini(&plan.config, &mapping.green_categories) {
        Ok(g) => g,
        Err(Error::EmptyConfiguration) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(IterationMetrics {
        green_rate: if empty { 0.0 } else { green_rate(&plan.config, mapping)?.to_f64_lossy() },
        compliance: if empty { 0.0 } else { instruction_compliance(&plan.config, instruction, mapping, instruction.levels)? },
        consistency: hierarchy_consistency(&plan.config, &plan.zone_map, mapping)?,
        gini,
    })
}

/// What a refinement turn needs besides the session.
pub struct Refiner<'a, T: Scalar> {
    pub generator: &'a dyn PlanGenerator<T>,
    pub scorer: &'a dyn PlanScorer<T>,
    pub registry: &'a AttributeRegistry,
    /// Candidates per turn.
    pub k: usize,
    /// Conditioning-augmentation scale applied to each candidate's condition.
    pub sigma: f64,
}

/// Parses `text`, updates the instruction, draws `k` candidates with
/// sub-seeds `derive_seed(seed, 0..k)`, keeps the highest-reward one (ties to
/// the lowest sub-seed) and appends it with a timestamp strictly after the
/// previous turn. The session is untouched on error.
pub fn refine<'s, T: Scalar>(
    session: &'s mut PlanningSession<T>,
    text: &str,
    kind: TurnKind,
    refiner: &Refiner<'_, T>,
    seed: u64,
    now_ms: i64,
) -> Result<&'s Iteration<T>> {
    if !session.is_active() {
        return Err(Error::SessionClosed);
    }
    if refiner.k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let parsed = parse_instruction(text)?;
    let instruction = match (kind, &session.instruction) {
        (TurnKind::Feedback, _) if session.history.is_empty() => return Err(Error::NoPriorPlan),
        (TurnKind::Feedback, Some(prev)) => prev.merged(&parsed),
        _ => parsed,
    };
    let clean = condition_for(&session.meta.embedding, &instruction, refiner.registry, 0.0, 0)?;
    let mut best: Option<(Candidate, Plan<T>)> = None;
    let mut candidates = Vec::with_capacity(refiner.k);
    for j in 0..refiner.k {
        let sub = derive_seed(seed, j as u64);
        let condition = condition_for(&session.meta.embedding, &instruction, refiner.registry, refiner.sigma, sub)?;
        let plan = refiner.generator.generate_plan(&condition, sub)?;
        let reward = refiner.scorer.score(&clean, &plan)?;
        if !reward.is_finite() {
            return Err(Error::InvariantViolation(format!("non-finite reward for sub-seed {sub}")));
        }
        let candidate = Candidate { seed: sub, reward };
        candidates.push(candidate);
        let better = match &best {
            None => true,
            Some((b, _)) => reward > b.reward || (reward == b.reward && sub < b.seed),
        };
        if better {
            best = Some((candidate, plan));
        }
    }
    let (chosen, plan) = best.expect("k >= 1");
    let metrics = plan_metrics(&plan, &instruction, &refiner.generator.shape().mapping)?;
    let timestamp_ms = session.history.last().map_or(now_ms, |last| now_ms.max(last.timestamp_ms + 1));
    session.history.push(Iteration {
        index: session.history.len(),
        kind,
        text: text.to_string(),
        instruction: instruction.clone(),
        plan,
        metrics,
        reward: chosen.reward,
        seed: chosen.seed,
        candidates,
        timestamp_ms,
    });
    session.instruction = Some(instruction);
    Ok(session.history.last().expect("just pushed"))
}
