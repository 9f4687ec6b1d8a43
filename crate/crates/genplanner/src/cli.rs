//! Command-line verbs. Exit codes: 0 success, 1 runtime failure, 2 config
//! or usage error, 3 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use genplanner_core::context::ConditionEmbedding;
use genplanner_core::dataset::{generate_dataset, mismatched_instruction, ConditionEncoder, DatasetSpec, SyntheticDataset};
use genplanner_core::eval::{diversity, sample_metrics, EvaluationReport, Provenance};
use genplanner_core::hitl::{
    parse_instruction, plan_metrics, refine, replay_instructions, FinetuneConfig, Iteration, PlanningSession, Refiner, RewardModel,
    SessionStore,
};
use genplanner_core::rng::{derive_seed, seeded};
use genplanner_core::{Error, GeneratorKind, Plan};

use crate::artifacts::{load_json, plan_shape, save_json, train_encoder, train_generator, train_reward, GeneratorCheckpoint, Recipe};
use crate::config::{ConfigError, ServiceConfig};
use crate::payload::PlanPayload;
use crate::planner::{turn_seed, LoadError, Planner};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Runtime(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Config(c) => c.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Gan,
    Cvae,
    Hier,
    Encoder,
    Reward,
}

#[derive(Debug, Parser)]
#[command(name = "genplanner", version, about = "Conditional land-use plan generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of planted cities.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        categories: usize,
        #[arg(long, default_value_t = 5)]
        zones: usize,
        #[arg(long, default_value_t = 8)]
        features: usize,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        #[arg(long, default_value_t = 512)]
        cities: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Train one component and write its checkpoint.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint; required for every model except `encoder`.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train on the first N samples only.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Reward-weighted fine-tuning of a generator checkpoint.
    Finetune {
        #[arg(long)]
        model_ckpt: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        #[arg(long, default_value_t = 60)]
        conditions: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Generate one plan and print it as JSON.
    Generate {
        #[arg(long)]
        model_ckpt: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        context_id: String,
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated plans against dataset references.
    Evaluate {
        #[arg(long)]
        model_ckpt: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate the last N samples.
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a stored session log; with `--config`, regenerate every turn
    /// and compare it to the stored plan.
    SessionReplay {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_encoder(path: Option<&Path>) -> Result<ConditionEncoder<f64>, CliError> {
    let path = path.ok_or_else(|| CliError::Config("--encoder is required for this model".into()))?;
    Ok(load_json(path)?)
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<(), CliError> {
    println!("{}", serde_json::to_string(value).map_err(Error::from)?);
    Ok(())
}

fn synth(out: &Path, spec: DatasetSpec) -> Result<(), CliError> {
    let data = generate_dataset::<f64>(&spec)?;
    data.write(out)?;
    eprintln!("wrote {} cities to {}", data.samples.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(model: ModelArg, data: &Path, out: &Path, encoder: Option<&Path>, epochs: Option<usize>, limit: Option<usize>, seed: u64) -> Result<(), CliError> {
    let dataset = SyntheticDataset::<f64>::load(data)?;
    let samples = &dataset.samples[..limit.unwrap_or(dataset.samples.len()).min(dataset.samples.len())];
    let mut recipe = Recipe::default();
    let shape = plan_shape(&dataset)?;
    match model {
        ModelArg::Encoder => {
            if let Some(e) = epochs {
                recipe.encoder_epochs = e;
            }
            let enc = train_encoder(samples, &dataset, &recipe, seed)?;
            eprintln!("encoder loss {:.4} -> {:.4}", enc.encoder.loss_curve[0], enc.encoder.loss_curve.last().copied().unwrap_or(f64::NAN));
            save_json(out, &enc)?;
        }
        ModelArg::Reward => {
            let enc = load_encoder(encoder)?;
            if let Some(e) = epochs {
                recipe.reward.epochs = e;
            }
            let model = train_reward(samples, &enc, &shape, &recipe, seed)?;
            eprintln!("reward model held-out accuracy {:?}", model.training_log.heldout_accuracy);
            save_json(out, &model)?;
        }
        ModelArg::Gan | ModelArg::Cvae | ModelArg::Hier => {
            let kind = match model {
                ModelArg::Gan => GeneratorKind::Gan,
                ModelArg::Cvae => GeneratorKind::Cvae,
                _ => GeneratorKind::Hier,
            };
            let enc = load_encoder(encoder)?;
            if let Some(e) = epochs {
                recipe = recipe.with_epochs(kind, e);
            }
            let ckpt = train_generator(kind, samples, &shape, &enc, &recipe, seed)?;
            save_json(out, &ckpt)?;
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Conditions pairing each sample's context with a request it does not
/// already satisfy.
pub fn mismatched_conditions(data: &SyntheticDataset<f64>, encoder: &ConditionEncoder<f64>, count: usize, seed: u64) -> Result<Vec<ConditionEmbedding<f64>>, Error> {
    data.samples
        .iter()
        .rev()
        .take(count)
        .enumerate()
        .map(|(i, s)| {
            let ins = mismatched_instruction(&s.instruction, &mut seeded(derive_seed(seed, i as u64)));
            encoder.condition(&s.context, &ins, 0.0, 0)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finetune(model: &Path, reward: &Path, encoder: &Path, data: &Path, out: &Path, rounds: usize, conditions: usize, seed: u64) -> Result<(), CliError> {
    let ckpt: GeneratorCheckpoint = load_json(model)?;
    let reward: RewardModel<f64> = load_json(reward)?;
    let encoder: ConditionEncoder<f64> = load_json(encoder)?;
    let dataset = SyntheticDataset::<f64>::load(data)?;
    let conds = mismatched_conditions(&dataset, &encoder, conditions, seed)?;
    let (train, held) = conds.split_at(conds.len() * 3 / 5);
    let config = FinetuneConfig { rounds, ..FinetuneConfig::default() };
    let (tuned, log) = ckpt.finetune(&reward, train, held, &config, seed)?;
    eprintln!("held-out reward {:.4} -> {:.4}", log.initial_reward, log.round_rewards.last().copied().unwrap_or(f64::NAN));
    save_json(out, &tuned)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate(model: &Path, encoder: &Path, data: &Path, context_id: &str, text: &str, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let ckpt: GeneratorCheckpoint = load_json(model)?;
    let encoder: ConditionEncoder<f64> = load_json(encoder)?;
    let dataset = SyntheticDataset::<f64>::load(data)?;
    let sample = dataset.sample(context_id).ok_or_else(|| Error::UnknownContext(context_id.into()))?;
    let instruction = parse_instruction(text)?;
    let cond = encoder.condition(&sample.context, &instruction, 0.0, 0)?;
    let plan = ckpt.generator().generate_plan(&cond, seed)?;
    let metrics = plan_metrics(&plan, &instruction, &ckpt.generator().shape().mapping)?;
    let value = serde_json::json!({ "plan": PlanPayload::from_plan(&plan), "metrics": metrics });
    match out {
        Some(path) => save_json(path, &value)?,
        None => print_json(&value)?,
    }
    Ok(())
}

pub fn evaluate_checkpoint(
    ckpt: &GeneratorCheckpoint,
    encoder: &ConditionEncoder<f64>,
    dataset: &SyntheticDataset<f64>,
    count: usize,
    seed: u64,
    provenance: Provenance,
) -> Result<EvaluationReport, Error> {
    let generator = ckpt.generator();
    let mapping = &generator.shape().mapping;
    let start = dataset.samples.len().saturating_sub(count);
    let mut samples = Vec::new();
    let mut configs = Vec::new();
    for (i, s) in dataset.samples[start..].iter().enumerate() {
        let cond = encoder.condition(&s.context, &s.instruction, 0.0, 0)?;
        let Plan { config, zone_map } = generator.generate_plan(&cond, derive_seed(seed, i as u64))?;
        samples.push(sample_metrics(&config, &zone_map, &s.config, &s.instruction, mapping)?);
        configs.push(config);
    }
    let div = if configs.len() >= 2 { Some(diversity(&configs)?) } else { None };
    Ok(EvaluationReport::assemble(samples, div, provenance))
}

fn evaluate(model: &Path, encoder: &Path, data: &Path, out: &Path, count: usize, seed: u64) -> Result<(), CliError> {
    let ckpt: GeneratorCheckpoint = load_json(model)?;
    let encoder: ConditionEncoder<f64> = load_json(encoder)?;
    let dataset = SyntheticDataset::<f64>::load(data)?;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let provenance = Provenance { model_id: format!("{:?}:{}", ckpt.kind(), stem(model)).to_lowercase(), dataset_id: stem(data), seed };
    let report = evaluate_checkpoint(&ckpt, &encoder, &dataset, count, seed, provenance)?;
    save_json(out, &report)?;
    eprintln!(
        "kl {:.4}  js {:.4}  consistency {:.4}  compliance {:.4}  diversity {:?}",
        report.aggregates.kl.mean, report.aggregates.js.mean, report.aggregates.hierarchy_consistency.mean, report.aggregates.compliance.mean, report.diversity
    );
    Ok(())
}

fn serve(config: &Path) -> Result<(), CliError> {
    let config = ServiceConfig::load(config)?;
    let planner = Planner::load(config)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(crate::service::serve(planner)).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Re-runs every stored turn of `session` on a fresh copy of it and
/// returns the indices whose regenerated plan or reward differs.
pub fn regenerate_mismatches(planner: &Planner, session: &PlanningSession<f64>) -> Result<Vec<usize>, Error> {
    let mut fresh = PlanningSession::new(session.meta.clone());
    let refiner = Refiner {
        generator: planner.generator.generator(),
        scorer: &planner.reward,
        registry: &planner.encoder.registry,
        k: planner.config.k,
        sigma: planner.config.sigma,
    };
    let mut bad = Vec::new();
    for stored in &session.history {
        let seed = turn_seed(planner.config.seed, &session.meta.id, stored.index);
        let it: &Iteration<f64> = refine(&mut fresh, &stored.text, stored.kind, &refiner, seed, stored.timestamp_ms)?;
        if it.plan != stored.plan || it.reward != stored.reward {
            bad.push(stored.index);
        }
    }
    Ok(bad)
}

fn session_replay(data_dir: &Path, id: &str, config: Option<&Path>) -> Result<(), CliError> {
    let store = SessionStore::open(data_dir)?;
    let session: PlanningSession<f64> = store.load(id)?;
    let states = replay_instructions(&session.history)?;
    for (it, state) in session.history.iter().zip(&states) {
        let slots: std::collections::BTreeMap<_, _> = state.slots.iter().map(|(a, l)| (a.key(), l)).collect();
        print_json(&serde_json::json!({ "index": it.index, "kind": it.kind, "text": it.text, "instruction": slots, "reward": it.reward }))?;
    }
    if let Some(config) = config {
        let mut config = ServiceConfig::load(config)?;
        config.data_dir = data_dir.to_path_buf();
        let planner = Planner::load(config)?;
        let bad = regenerate_mismatches(&planner, &session)?;
        if !bad.is_empty() {
            return Err(CliError::Data(format!("turns {bad:?} do not regenerate identically")));
        }
        eprintln!("all {} turns regenerate identically", session.history.len());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, n, categories, zones, features, levels, cities, seed } => {
            synth(&out, DatasetSpec { n, zones, categories, features, levels, cities, seed })
        }
        Command::Train { model, data, out, encoder, epochs, limit, seed } => train(model, &data, &out, encoder.as_deref(), epochs, limit, seed),
        Command::Finetune { model_ckpt, reward, encoder, data, out, rounds, conditions, seed } => {
            finetune(&model_ckpt, &reward, &encoder, &data, &out, rounds, conditions, seed)
        }
        Command::Generate { model_ckpt, encoder, data, context_id, instruction, seed, out } => {
            generate(&model_ckpt, &encoder, &data, &context_id, &instruction, seed, out.as_deref())
        }
        Command::Evaluate { model_ckpt, encoder, data, out, count, seed } => evaluate(&model_ckpt, &encoder, &data, &out, count, seed),
        Command::Serve { config } => serve(&config),
        Command::SessionReplay { data_dir, session, config } => session_replay(&data_dir, &session, config.as_deref()),
    }
}

/// Parses `args` and runs the verb, printing errors to stderr.
pub fn main_with<I: IntoIterator<Item = OsString>>(args: I) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
