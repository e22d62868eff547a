use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, ValueEnum};
use serde::Deserialize;

use super::commands::{read_input, write_output};
use super::{CliError, ExecArg};
use crate::costmodel::CostModel;
use crate::digest::sha256_hex;
use crate::evaluator::{CostOnlyEvaluator, Evaluator};
use crate::exec::ExecMode;
use crate::nsga2::GaParams;
use crate::orchestrator::{
    execute, hypervolume, overall_frontier, population_from_json, EvaluatorDescriptor,
    ExternalEvaluator, OrchestratorError, PoolConfig, RunManifest, RunStore, SeedingDescriptor,
    WorkerPool,
};
use crate::rng::{stream, RunRng};
use crate::schedule::{CachingSchedule, ModelTopology};
use crate::seeding::{build_initial_population, StrategyMix};
use crate::toydit::ToyEvaluator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    /// Built-in surrogate transformer (drift from full recompute).
    Toy,
    /// External worker processes speaking the NDJSON protocol.
    External,
    /// Cost only, zero quality loss.
    Cost,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["out", "resume"])))]
pub struct RunArgs {
    /// New run directory to create.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Existing run directory to continue.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSON file of run settings; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in name or path to a topology JSON file [default: pixart-like].
    #[arg(long)]
    pub topology: Option<String>,
    /// Quality evaluator [default: toy].
    #[arg(long, value_enum)]
    pub evaluator: Option<EvaluatorKind>,
    /// Seed of the toy model weights [default: 0].
    #[arg(long)]
    pub toy_seed: Option<u64>,
    /// External worker command line, split with shell quoting rules.
    #[arg(long)]
    pub worker_cmd: Option<String>,
    /// Number of external worker processes [default: available CPUs].
    #[arg(long, env = "ECAD_WORKERS")]
    pub workers: Option<usize>,
    /// Per-request timeout in seconds [default: 600].
    #[arg(long)]
    pub timeout_s: Option<f64>,
    /// Retries per request after a timeout or worker exit [default: 2].
    #[arg(long)]
    pub max_retries: Option<usize>,
    /// Prompt-set identifier forwarded to external workers [default: calibration].
    #[arg(long)]
    pub prompt_set: Option<String>,
    /// Images per prompt forwarded to external workers [default: 10].
    #[arg(long)]
    pub images_per_prompt: Option<u32>,
    /// Population size, a positive even number [default: 72].
    #[arg(long)]
    pub population: Option<usize>,
    /// Number of generations to reach [default: 100].
    #[arg(long)]
    pub generations: Option<usize>,
    /// Crossover probability [default: 0.9].
    #[arg(long)]
    pub crossover_prob: Option<f64>,
    /// Crossover points [default: 4].
    #[arg(long)]
    pub crossover_points: Option<usize>,
    /// Mutation probability [default: 0.05].
    #[arg(long)]
    pub mutation_prob: Option<f64>,
    /// Run seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Strategy mix JSON for the initial population.
    #[arg(long)]
    pub strategy_mix: Option<PathBuf>,
    /// Initial population file, e.g. from `seed` or a previous run.
    #[arg(long, conflicts_with = "strategy_mix")]
    pub init_population: Option<PathBuf>,
    /// In-process evaluation mode for the toy evaluator [default: parallel].
    #[arg(long, value_enum)]
    pub exec: Option<ExecArg>,
}

/// The `--config` file: same settings as the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFileConfig {
    topology: Option<String>,
    evaluator: Option<EvaluatorKind>,
    toy_seed: Option<u64>,
    worker_cmd: Option<String>,
    workers: Option<usize>,
    timeout_s: Option<f64>,
    max_retries: Option<usize>,
    prompt_set: Option<String>,
    images_per_prompt: Option<u32>,
    population: Option<usize>,
    generations: Option<usize>,
    crossover_prob: Option<f64>,
    crossover_points: Option<usize>,
    mutation_prob: Option<f64>,
    seed: Option<u64>,
    strategy_mix: Option<PathBuf>,
    init_population: Option<PathBuf>,
    exec: Option<ExecArg>,
}

/// Evaluator settings flattened so that overlays apply field by field.
#[derive(Debug, Clone)]
struct EvalSettings {
    kind: EvaluatorKind,
    toy_seed: u64,
    command: Vec<String>,
    prompt_set: String,
    images_per_prompt: u32,
    workers: usize,
    timeout_s: f64,
    max_retries: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            kind: EvaluatorKind::Toy,
            toy_seed: 0,
            command: Vec::new(),
            prompt_set: "calibration".into(),
            images_per_prompt: 10,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            timeout_s: 600.0,
            max_retries: 2,
        }
    }
}

impl EvalSettings {
    fn from_descriptor(d: &EvaluatorDescriptor) -> Self {
        let mut s = Self::default();
        match d {
            EvaluatorDescriptor::Toy { seed } => s.toy_seed = *seed,
            EvaluatorDescriptor::CostOnly => s.kind = EvaluatorKind::Cost,
            EvaluatorDescriptor::External {
                command,
                prompt_set,
                images_per_prompt,
                workers,
                timeout_s,
                max_retries,
            } => {
                s.kind = EvaluatorKind::External;
                s.command = command.clone();
                s.prompt_set = prompt_set.clone();
                s.images_per_prompt = *images_per_prompt;
                s.workers = *workers;
                s.timeout_s = *timeout_s;
                s.max_retries = *max_retries;
            }
        }
        s
    }

    fn descriptor(&self) -> EvaluatorDescriptor {
        match self.kind {
            EvaluatorKind::Toy => EvaluatorDescriptor::Toy {
                seed: self.toy_seed,
            },
            EvaluatorKind::Cost => EvaluatorDescriptor::CostOnly,
            EvaluatorKind::External => EvaluatorDescriptor::External {
                command: self.command.clone(),
                prompt_set: self.prompt_set.clone(),
                images_per_prompt: self.images_per_prompt,
                workers: self.workers,
                timeout_s: self.timeout_s,
                max_retries: self.max_retries,
            },
        }
    }
}

fn split_command(cmd: &str) -> Result<Vec<String>, CliError> {
    let argv = shlex::split(cmd)
        .ok_or_else(|| CliError::Validation(format!("cannot parse --worker-cmd `{cmd}`")))?;
    if argv.is_empty() {
        return Err(CliError::Validation("--worker-cmd is empty".into()));
    }
    Ok(argv)
}

/// Flag-over-file overlay of every optional setting.
struct Overrides {
    topology: Option<String>,
    evaluator: Option<EvaluatorKind>,
    toy_seed: Option<u64>,
    worker_cmd: Option<String>,
    workers: Option<usize>,
    timeout_s: Option<f64>,
    max_retries: Option<usize>,
    prompt_set: Option<String>,
    images_per_prompt: Option<u32>,
    population: Option<usize>,
    generations: Option<usize>,
    crossover_prob: Option<f64>,
    crossover_points: Option<usize>,
    mutation_prob: Option<f64>,
    seed: Option<u64>,
    strategy_mix: Option<PathBuf>,
    init_population: Option<PathBuf>,
    exec: Option<ExecArg>,
}

impl Overrides {
    fn merge(a: RunArgs, f: RunFileConfig) -> Self {
        Self {
            topology: a.topology.or(f.topology),
            evaluator: a.evaluator.or(f.evaluator),
            toy_seed: a.toy_seed.or(f.toy_seed),
            worker_cmd: a.worker_cmd.or(f.worker_cmd),
            workers: a.workers.or(f.workers),
            timeout_s: a.timeout_s.or(f.timeout_s),
            max_retries: a.max_retries.or(f.max_retries),
            prompt_set: a.prompt_set.or(f.prompt_set),
            images_per_prompt: a.images_per_prompt.or(f.images_per_prompt),
            population: a.population.or(f.population),
            generations: a.generations.or(f.generations),
            crossover_prob: a.crossover_prob.or(f.crossover_prob),
            crossover_points: a.crossover_points.or(f.crossover_points),
            mutation_prob: a.mutation_prob.or(f.mutation_prob),
            seed: a.seed.or(f.seed),
            strategy_mix: a.strategy_mix.or(f.strategy_mix),
            init_population: a.init_population.or(f.init_population),
            exec: a.exec.or(f.exec),
        }
    }

    fn params(&self, base: &GaParams) -> GaParams {
        GaParams {
            population_size: self.population.unwrap_or(base.population_size),
            generations: self.generations.unwrap_or(base.generations),
            crossover_probability: self.crossover_prob.unwrap_or(base.crossover_probability),
            crossover_points: self.crossover_points.unwrap_or(base.crossover_points),
            mutation_probability: self.mutation_prob.unwrap_or(base.mutation_probability),
            rng_seed: self.seed.unwrap_or(base.rng_seed),
        }
    }

    fn eval_settings(&self, base: EvalSettings) -> Result<EvalSettings, CliError> {
        let mut s = base;
        if let Some(k) = self.evaluator {
            s.kind = k;
        }
        if let Some(v) = self.toy_seed {
            s.toy_seed = v;
        }
        if let Some(c) = &self.worker_cmd {
            s.command = split_command(c)?;
        }
        if let Some(v) = self.workers {
            s.workers = v;
        }
        if let Some(v) = self.timeout_s {
            s.timeout_s = v;
        }
        if let Some(v) = self.max_retries {
            s.max_retries = v;
        }
        if let Some(v) = &self.prompt_set {
            s.prompt_set = v.clone();
        }
        if let Some(v) = self.images_per_prompt {
            s.images_per_prompt = v;
        }
        if s.kind == EvaluatorKind::External {
            if s.command.is_empty() {
                return Err(CliError::Validation(
                    "--evaluator external requires --worker-cmd".into(),
                ));
            }
            if s.workers == 0 {
                return Err(CliError::Validation("--workers must be >= 1".into()));
            }
            if !(s.timeout_s.is_finite() && s.timeout_s > 0.0) {
                return Err(CliError::Validation("--timeout-s must be positive".into()));
            }
        }
        Ok(s)
    }

    fn seeding(&self, topology: &ModelTopology) -> Result<SeedingDescriptor, CliError> {
        if let Some(p) = &self.init_population {
            let text = read_input(p)?;
            return Ok(SeedingDescriptor::File {
                path: p.display().to_string(),
                sha256: sha256_hex(text.as_bytes()),
            });
        }
        let mix = match &self.strategy_mix {
            Some(p) => StrategyMix::from_json(&read_input(p)?)?,
            None => StrategyMix::default_for(topology),
        };
        Ok(SeedingDescriptor::Mix { mix })
    }

    fn exec_mode(&self) -> ExecMode {
        match self.exec {
            Some(ExecArg::Sequential) => ExecMode::Sequential,
            _ => ExecMode::Parallel,
        }
    }
}

fn build_evaluator(
    settings: &EvalSettings,
    topology: &Arc<ModelTopology>,
    params: &GaParams,
    mode: ExecMode,
) -> Result<Box<dyn Evaluator>, CliError> {
    Ok(match settings.kind {
        EvaluatorKind::Toy => Box::new(ToyEvaluator::for_topology(
            topology.clone(),
            settings.toy_seed,
            mode,
        )?),
        EvaluatorKind::Cost => Box::new(CostOnlyEvaluator::new(CostModel::new(topology.clone()))),
        EvaluatorKind::External => {
            let pool = WorkerPool::new(PoolConfig {
                command: settings.command.clone(),
                workers: settings.workers,
                timeout: Duration::from_secs_f64(settings.timeout_s),
                max_retries: settings.max_retries,
            })
            .map_err(|e| CliError::Validation(e.to_string()))?;
            Box::new(ExternalEvaluator::new(
                pool,
                topology.clone(),
                settings.prompt_set.clone(),
                settings.images_per_prompt,
                params.rng_seed,
            ))
        }
    })
}

fn initial_seeds(
    seeding: &SeedingDescriptor,
    topology: &Arc<ModelTopology>,
    params: &GaParams,
) -> Result<Vec<CachingSchedule>, CliError> {
    match seeding {
        SeedingDescriptor::File { path, .. } => {
            let seeds = population_from_json(&read_input(Path::new(path))?, topology)?;
            if seeds.len() != params.population_size {
                return Err(CliError::Validation(format!(
                    "initial population file holds {} schedules, population size is {}",
                    seeds.len(),
                    params.population_size
                )));
            }
            Ok(seeds)
        }
        SeedingDescriptor::Mix { mix } => {
            let mut rng = RunRng::new(params.rng_seed, stream::SEEDING);
            Ok(
                build_initial_population(topology, mix, params.population_size, &mut rng)?
                    .into_iter()
                    .map(|c| c.schedule)
                    .collect(),
            )
        }
    }
}

pub fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => serde_json::from_str(&read_input(p)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => RunFileConfig::default(),
    };
    let out = args.out.clone();
    let resume = args.resume.clone();
    let ov = Overrides::merge(args, file);
    let mode = ov.exec_mode();

    let (store, manifest, topology) = if let Some(dir) = resume {
        let store = RunStore::open(&dir)?;
        let stored = store.manifest()?;
        let topology = store.topology()?;
        let mut requested = stored.clone();
        requested.params = ov.params(&stored.params);
        requested.evaluator = ov
            .eval_settings(EvalSettings::from_descriptor(&stored.evaluator))?
            .descriptor();
        if let Some(t) = &ov.topology {
            requested.topology = crate::orchestrator::TopologyRef::of(&ModelTopology::load(t)?);
        }
        if ov.init_population.is_some() || ov.strategy_mix.is_some() {
            requested.seeding = ov.seeding(&topology)?;
        }
        let diffs = stored.differences(&requested);
        if !diffs.is_empty() {
            return Err(OrchestratorError::ManifestMismatch(diffs).into());
        }
        (store, requested, topology)
    } else {
        let dir = out.expect("clap requires --out or --resume");
        let topology = Arc::new(ModelTopology::load(
            ov.topology.as_deref().unwrap_or("pixart-like"),
        )?);
        let params = ov.params(&GaParams::default());
        params.validate()?;
        let settings = ov.eval_settings(EvalSettings::default())?;
        let seeding = ov.seeding(&topology)?;
        let manifest = RunManifest::new(&topology, params.clone(), settings.descriptor(), seeding);
        let seeds = initial_seeds(&manifest.seeding, &topology, &params)?;
        let store = RunStore::create(&dir, &manifest, &topology, &seeds)?;
        (store, manifest, topology)
    };

    let params = manifest.params.clone();
    params.validate()?;
    let settings = EvalSettings::from_descriptor(&manifest.evaluator);
    let evaluator = build_evaluator(&settings, &topology, &params, mode)?;
    let total = params.generations;
    let result = execute(&store, &params, evaluator.as_ref(), |r| {
        log::info!(
            "generation {}/{}: {} new evaluations",
            r.generation,
            total,
            r.evaluations
        );
        eprintln!("generation {}/{total} done", r.generation);
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let done = store.history().map(|h| h.len()).unwrap_or(0);
            eprintln!(
                "run stopped after generation {done}; continue with `ecad run --resume {}`",
                store.dir().display()
            );
            return Err(e.into());
        }
    };
    let frontier = overall_frontier(&outcome.history, &topology)?;
    let baseline = CostModel::new(topology.clone())
        .total_tmacs(&CachingSchedule::new_full_recompute(topology.clone()))?;
    let max_loss = frontier
        .points
        .iter()
        .map(|p| p.quality_loss)
        .fold(0.0, f64::max);
    let summary = serde_json::json!({
        "run_dir": store.dir().display().to_string(),
        "generations": outcome.history.records.len(),
        "resumed_from": outcome.resumed_from,
        "overall_frontier_size": frontier.len(),
        "cheapest_tmacs": frontier.points.first().map(|p| p.cost_tmacs),
        "baseline_tmacs": baseline,
        "frontier_hypervolume": hypervolume(&frontier, (baseline, max_loss)),
    });
    write_output(None, &serde_json::to_string_pretty(&summary).unwrap())
}
