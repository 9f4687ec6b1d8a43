mod common;

use common::{fixture, Fixture};
use genplanner_core::dataset::{mismatched_instruction, DatasetSpec};
use genplanner_core::hier::{train_ihplanner, IhplannerHyper, IhplannerModel};
use genplanner_core::hitl::*;
use genplanner_core::nn::Parameters;
use genplanner_core::rng::seeded;
use genplanner_core::spatial::validate_configuration;
use genplanner_core::{Attribute, Error, LandUseConfiguration, Plan, PlanGenerator};
use std::sync::OnceLock;

fn world() -> &'static Fixture {
    static W: OnceLock<Fixture> = OnceLock::new();
    W.get_or_init(|| fixture(DatasetSpec { n: 6, zones: 3, categories: 6, features: 4, cities: 160, ..DatasetSpec::default() }, 4))
}

fn generator() -> &'static IhplannerModel<f64> {
    static G: OnceLock<IhplannerModel<f64>> = OnceLock::new();
    G.get_or_init(|| {
        let w = world();
        let hyper = IhplannerHyper { hidden: 16, d_f: 8, heads: 2, d_k: 4, epochs: 20, batch_size: 16, ..IhplannerHyper::default() };
        train_ihplanner(&w.examples, &w.shape, &hyper, 3).unwrap()
    })
}

fn pairs(count: usize, seed: u64) -> Vec<PreferencePair<f64>> {
    let w = world();
    let sets = candidate_sets_from_samples(&w.data.samples, &w.encoder, 200, 4, seed).unwrap();
    synthesize_preferences(&sets, &w.shape.mapping, count, seed).unwrap()
}

fn reward_model() -> &'static RewardModel<f64> {
    static R: OnceLock<RewardModel<f64>> = OnceLock::new();
    R.get_or_init(|| {
        let w = world();
        train_reward_model(&pairs(500, 13), &w.encoder.registry, &w.shape.mapping, &RewardHyper::default(), 13).unwrap()
    })
}

fn session(id: &str) -> PlanningSession<f64> {
    let w = world();
    let context = w.data.samples[0].context.clone();
    let embedding = w.encoder.context_embedding(&context).unwrap();
    PlanningSession::new(SessionMeta { id: id.into(), context_id: Some(w.data.samples[0].id.clone()), context, embedding, created_ms: 0, status: SessionStatus::Active })
}

fn oracle() -> OracleReward {
    let w = world();
    OracleReward { registry: w.encoder.registry.clone(), mapping: w.shape.mapping.clone() }
}

#[test]
fn synthesized_pairs_are_untied_and_ordered() {
    let w = world();
    let p = pairs(500, 7);
    assert_eq!(p.len(), 500);
    for pair in &p {
        let ins = pair.condition.decode_instruction(&w.encoder.registry).unwrap();
        let good = oracle_score(&pair.preferred, &ins, &w.shape.mapping).unwrap();
        let bad = oracle_score(&pair.rejected, &ins, &w.shape.mapping).unwrap();
        assert!(good > bad);
        assert_ne!(pair.preferred, pair.rejected);
    }
    assert_eq!(p, pairs(500, 7));
}

#[test]
fn identical_plans_never_form_a_pair() {
    let w = world();
    let mut sets = candidate_sets_from_samples(&w.data.samples, &w.encoder, 3, 2, 1).unwrap();
    for s in &mut sets {
        s.plans[1] = s.plans[0].clone();
    }
    assert!(matches!(synthesize_preferences(&sets, &w.shape.mapping, 1, 1), Err(Error::InsufficientData(_))));
}

#[test]
fn compliant_plan_beats_non_compliant_plan() {
    let w = world();
    let mut sets = candidate_sets_from_samples(&w.data.samples, &w.encoder, 1, 2, 2).unwrap();
    let ins = genplanner_core::Instruction::single(Attribute::GreenRate, 4, 5).unwrap();
    let set = &mut sets[0];
    set.instruction = ins.clone();
    set.condition = w.encoder.condition(&w.data.samples[0].context, &ins, 0.0, 0).unwrap();
    let mut green = set.plans[0].clone();
    let mut grey = set.plans[0].clone();
    for ((_, _, c), v) in green.config.counts.indexed_iter_mut() {
        *v = if w.shape.mapping.green_categories.contains(&c) { 1.0 } else { 0.0 };
    }
    for ((_, _, c), v) in grey.config.counts.indexed_iter_mut() {
        *v = if w.shape.mapping.green_categories.contains(&c) { 0.0 } else { 1.0 };
    }
    set.plans = vec![green.clone(), grey];
    let p = synthesize_preferences(&sets, &w.shape.mapping, 1, 3).unwrap();
    assert_eq!(p[0].preferred, green);
}

#[test]
fn reward_model_generalizes_and_flipped_labels_invert_it() {
    let w = world();
    let model = reward_model();
    assert!(model.training_log.heldout_accuracy.unwrap() >= 0.8);
    let test = pairs(200, 99);
    assert!(model.pairwise_accuracy(&test).unwrap() >= 0.8);
    let flipped: Vec<_> = pairs(500, 13).iter().map(PreferencePair::flipped).collect();
    let inverted = train_reward_model(&flipped, &w.encoder.registry, &w.shape.mapping, &RewardHyper::default(), 13).unwrap();
    assert!(inverted.pairwise_accuracy(&test).unwrap() <= 0.2);
}

#[test]
fn swapping_a_pair_reverses_the_gradient() {
    let model = reward_model();
    let pair = pairs(1, 5).remove(0);
    let (_, g) = model.pairwise_loss_and_gradient(std::slice::from_ref(&pair)).unwrap();
    let (_, h) = model.pairwise_loss_and_gradient(&[pair.flipped()]).unwrap();
    let a: Vec<f64> = g.slices().concat();
    let b: Vec<f64> = h.slices().concat();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(na > 0.0);
    assert!((dot / (na * nb) + 1.0).abs() < 1e-9, "cosine {}", dot / (na * nb));
}

#[test]
fn single_repeated_pair_drives_loss_to_zero() {
    let w = world();
    let one = vec![pairs(1, 8).remove(0); 10];
    let hyper = RewardHyper { holdout: 0.0, ..RewardHyper::default() };
    let model = train_reward_model(&one, &w.encoder.registry, &w.shape.mapping, &hyper, 1).unwrap();
    let smoothed: Vec<f64> = model.training_log.loss.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(smoothed.windows(2).all(|p| p[1] <= p[0]));
    assert!(*model.training_log.loss.last().unwrap() < 1e-2);
}

#[test]
fn scores_are_deterministic_and_finite_for_empty_plans() {
    let w = world();
    let model = reward_model();
    let s = &w.data.samples[3];
    let cond = w.encoder.condition(&s.context, &s.instruction, 0.0, 0).unwrap();
    let plan = Plan { config: s.config.clone(), zone_map: s.zone_map.clone() };
    assert_eq!(reward_score(model, &cond, &plan).unwrap(), reward_score(model, &cond, &plan).unwrap());
    let empty = Plan { config: LandUseConfiguration::zeros(w.shape.grid.clone(), w.shape.category_names.clone()), zone_map: s.zone_map.clone() };
    assert!(reward_score(model, &cond, &empty).unwrap().is_finite());
    let mut short = cond.clone();
    short.values.pop();
    assert!(matches!(reward_score(model, &short, &plan), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn single_candidate_is_kept_whatever_its_reward() {
    let w = world();
    let mut s = session("k1");
    let refiner = Refiner { generator: generator(), scorer: reward_model(), registry: &w.encoder.registry, k: 1, sigma: 0.1 };
    let it = refine(&mut s, "green rate low", TurnKind::Instruction, &refiner, 4, 10).unwrap().clone();
    assert_eq!(it.candidates.len(), 1);
    assert_eq!(it.seed, it.candidates[0].seed);
    assert!(validate_configuration(&it.plan.config).is_ok());
}

#[test]
fn feedback_overrides_the_named_slot() {
    let w = world();
    let mut s = session("override");
    let refiner = Refiner { generator: generator(), scorer: &oracle(), registry: &w.encoder.registry, k: 2, sigma: 0.1 };
    refine(&mut s, "green rate low and commercial density high", TurnKind::Instruction, &refiner, 1, 10).unwrap();
    let it = refine(&mut s, "green rate very high", TurnKind::Feedback, &refiner, 2, 20).unwrap();
    assert_eq!(it.instruction.level(Attribute::GreenRate), Some(4));
    assert_eq!(it.instruction.level(Attribute::CommercialDensity), Some(3));
    let replayed = replay_instructions(&s.history).unwrap();
    assert_eq!(replayed, s.history.iter().map(|i| i.instruction.clone()).collect::<Vec<_>>());
}

#[test]
fn best_of_eight_matches_recomputed_rewards() {
    let w = world();
    let model = reward_model();
    let gen = generator();
    let before = (serde_json::to_string(gen).unwrap(), serde_json::to_string(model).unwrap());
    let mut s = session("k8");
    let refiner = Refiner { generator: gen, scorer: model, registry: &w.encoder.registry, k: 8, sigma: 0.1 };
    let it = refine(&mut s, "green rate high", TurnKind::Instruction, &refiner, 77, 5).unwrap().clone();
    assert_eq!(it.candidates.len(), 8);
    let max = it.candidates.iter().map(|c| c.reward).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(it.reward, max);
    let first_best = it.candidates.iter().find(|c| c.reward == max).unwrap();
    assert_eq!(it.seed, first_best.seed);
    let clean = w.encoder.condition_from_embedding(&s.meta.embedding, &it.instruction, 0.0, 0).unwrap();
    assert_eq!(reward_score(model, &clean, &it.plan).unwrap(), it.reward);
    assert_eq!(before, (serde_json::to_string(gen).unwrap(), serde_json::to_string(model).unwrap()));
}

#[test]
fn failed_turns_leave_the_session_untouched() {
    let w = world();
    let refiner = Refiner { generator: generator(), scorer: &oracle(), registry: &w.encoder.registry, k: 2, sigma: 0.1 };
    let mut s = session("errors");
    assert!(matches!(refine(&mut s, "green rate high", TurnKind::Feedback, &refiner, 1, 1), Err(Error::NoPriorPlan)));
    refine(&mut s, "green rate high", TurnKind::Instruction, &refiner, 1, 1).unwrap();
    let snapshot = s.clone();
    match refine(&mut s, "make it nicer", TurnKind::Feedback, &refiner, 2, 2) {
        Err(Error::UnparsableInstruction { suggestions, .. }) => assert!(!suggestions.is_empty()),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(s, snapshot);
    s.close();
    assert!(matches!(refine(&mut s, "green rate low", TurnKind::Feedback, &refiner, 3, 3), Err(Error::SessionClosed)));
}

#[test]
fn store_round_trips_sessions() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    let mut s = session("persisted");
    store.create(&s.meta).unwrap();
    let refiner = Refiner { generator: generator(), scorer: &oracle(), registry: &w.encoder.registry, k: 3, sigma: 0.1 };
    for (i, (text, kind)) in [("green rate low", TurnKind::Instruction), ("green rate high", TurnKind::Feedback), ("commercial density low", TurnKind::Feedback)]
        .into_iter()
        .enumerate()
    {
        let it = refine(&mut s, text, kind, &refiner, i as u64, 100 + i as i64).unwrap().clone();
        store.append(s.id(), &it).unwrap();
    }
    let reopened = SessionStore::open(dir.path()).unwrap();
    let loaded: PlanningSession<f64> = reopened.load("persisted").unwrap();
    assert_eq!(loaded, s);
    assert_eq!(loaded.history.iter().map(|i| i.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(loaded.history.windows(2).all(|p| p[0].timestamp_ms < p[1].timestamp_ms));
    assert!(matches!(reopened.load::<f64>("missing"), Err(Error::SessionNotFound(_))));
    assert!(reopened.create(&s.meta).is_err());
}

fn finetune_conditions() -> (Vec<genplanner_core::context::ConditionEmbedding<f64>>, Vec<genplanner_core::context::ConditionEmbedding<f64>>) {
    let w = world();
    let conds: Vec<_> = w.data.samples[..36]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ins = mismatched_instruction(&s.instruction, &mut seeded(i as u64));
            w.encoder.condition(&s.context, &ins, 0.0, 0).unwrap()
        })
        .collect();
    let (a, b) = conds.split_at(20);
    (a.to_vec(), b.to_vec())
}

#[test]
fn zero_learning_rate_leaves_the_generator_unchanged() {
    let (train, held) = finetune_conditions();
    let config = FinetuneConfig { rounds: 3, samples: 4, lr: 0.0, steps: 2, ..FinetuneConfig::default() };
    let (tuned, log) = reward_weighted_finetune(generator(), &oracle(), &train, &held, &config, 1).unwrap();
    assert_eq!(serde_json::to_string(&tuned).unwrap(), serde_json::to_string(generator()).unwrap());
    assert!(log.round_rewards.iter().all(|&r| r == log.initial_reward));
}

#[test]
fn one_round_logs_one_entry() {
    let (train, held) = finetune_conditions();
    let config = FinetuneConfig { rounds: 1, samples: 4, steps: 2, ..FinetuneConfig::default() };
    let (_, log) = reward_weighted_finetune(generator(), &oracle(), &train, &held, &config, 2).unwrap();
    assert_eq!(log.round_rewards.len(), 1);
    let config = FinetuneConfig { rounds: 0, ..config };
    assert!(reward_weighted_finetune(generator(), &oracle(), &train, &held, &config, 2).is_err());
    let g: &dyn PlanGenerator<f64> = generator();
    assert_eq!(g.condition_dim(), train[0].dim());
}
