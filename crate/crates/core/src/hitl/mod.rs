//! Human-in-the-loop layer: instruction grammar, preference reward model,
//! sessions with best-of-K refinement, and reward-weighted fine-tuning.

pub mod finetune;
pub mod instruction;
pub mod reward;
pub mod session;
pub mod store;

pub use finetune::{mean_reward, reward_weighted_finetune, FinetuneConfig, FinetuneLog};
pub use instruction::{parse_instruction, render_instruction, LEVEL_WORDS};
pub use reward::{
    candidate_sets_from_samples, oracle_score, plan_features, reward_score, synthesize_preferences, train_reward_model, CandidateSet, OracleReward, OracleScore,
    PlanScorer, PreferencePair, PreferenceSource, RewardHyper, RewardLog, RewardModel,
};
pub use session::{
    plan_metrics, refine, replay_instructions, Candidate, Iteration, IterationMetrics, PlanningSession, Refiner, SessionMeta,
    SessionStatus, TurnKind,
};
pub use store::SessionStore;
