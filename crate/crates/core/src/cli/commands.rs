use std::fs;
use std::io::{self, BufReader};
use std::path::Path;
use std::sync::Arc;

use super::{
    CliError, Command, CostArgs, FrontierArgs, MockWorkerArgs, NormalizeArgs, RescaleArgs,
    ScheduleArgs, SeedArgs, SelectArgs, TopologyArgs,
};
use crate::costmodel::{normalized_latency, CostModel};
use crate::orchestrator::{
    export_frontier, frontier_csv, frontier_json, mock, overall_frontier, population_to_json,
    select_by_budget, FrontierExport, ParetoFrontier, RunStore,
};
use crate::rng::{stream, RunRng};
use crate::schedule::{CachingSchedule, ModelTopology};
use crate::seeding::{
    build_initial_population, component_only_schedule, cross_self_all_blocks_schedule,
    fora_schedule, tgate_schedule, true_random_schedule, uniform_random_schedule, StrategyMix,
};

pub(super) fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Topology(a) => cmd_topology(a),
        Command::Seed(a) => cmd_seed(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Run(a) => super::run::cmd_run(*a),
        Command::Frontier(a) => cmd_frontier(a),
        Command::Select(a) => cmd_select(a),
        Command::Rescale(a) => cmd_rescale(a),
        Command::Cost(a) => cmd_cost(a),
        Command::NormalizeLatency(a) => cmd_normalize(a),
        Command::MockWorker(a) => cmd_mock_worker(a),
    }
}

pub(super) fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Writes `text` to `path`, or to stdout when there is none.
pub(super) fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    let text = if text.ends_with('\n') {
        text.to_string()
    } else {
        format!("{text}\n")
    };
    match path {
        Some(p) => {
            fs::write(p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_topology(name: &str) -> Result<Arc<ModelTopology>, CliError> {
    Ok(Arc::new(ModelTopology::load(name)?))
}

/// Reads a schedule file against `--topology` or the topology named in its
/// header, adjusted to the header's step count.
fn load_schedule(path: &Path, topology: Option<&str>) -> Result<CachingSchedule, CliError> {
    let text = read_input(path)?;
    let (name, steps) = CachingSchedule::header_steps(&text)?;
    let base = ModelTopology::load(topology.unwrap_or(&name))?;
    let topo = if base.steps() == steps {
        base
    } else {
        base.with_steps(steps)?
    };
    Ok(CachingSchedule::from_json(&text, Arc::new(topo))?)
}

fn full_tmacs(topology: &Arc<ModelTopology>) -> Result<f64, CliError> {
    Ok(CostModel::new(topology.clone())
        .total_tmacs(&CachingSchedule::new_full_recompute(topology.clone()))?)
}

fn cmd_topology(a: TopologyArgs) -> Result<(), CliError> {
    if a.list {
        for n in ModelTopology::builtin_names() {
            println!("{n}");
        }
        return Ok(());
    }
    let t = load_topology(&a.topology)?;
    if a.json {
        return write_output(None, &t.to_json());
    }
    println!("name: {}", t.name());
    println!("steps: {}", t.steps());
    for g in t.groups() {
        let comps: Vec<String> = g
            .components
            .iter()
            .map(|c| format!("{} ({} GMACs)", c.name, c.mac_weight))
            .collect();
        println!(
            "group {}: {} blocks x [{}]",
            g.name,
            g.blocks,
            comps.join(", ")
        );
    }
    println!(
        "cells: {} per step, {} total",
        t.cells_per_step(),
        t.total_cells()
    );
    println!("full recompute: {:.4} TMACs", full_tmacs(&t)?);
    println!("hash: {}", t.hash());
    Ok(())
}

fn cmd_seed(a: SeedArgs) -> Result<(), CliError> {
    let t = load_topology(&a.topology)?;
    let mix = match &a.strategy_mix {
        Some(p) => StrategyMix::from_json(&read_input(p)?)?,
        None => StrategyMix::default_for(&t),
    };
    let mut rng = RunRng::new(a.seed, stream::SEEDING);
    let pop: Vec<CachingSchedule> = build_initial_population(&t, &mix, a.population, &mut rng)?
        .into_iter()
        .map(|c| c.schedule)
        .collect();
    write_output(a.out.as_deref(), &population_to_json(&pop))
}

fn parse_field<T: std::str::FromStr>(strategy: &str, s: &str) -> Result<T, CliError> {
    s.parse()
        .map_err(|_| CliError::Validation(format!("bad number `{s}` in strategy `{strategy}`")))
}

fn strategy_schedule(
    t: &Arc<ModelTopology>,
    strategy: &str,
    seed: u64,
) -> Result<CachingSchedule, CliError> {
    let parts: Vec<&str> = strategy.split(':').collect();
    let mut rng = RunRng::new(seed, stream::SEEDING);
    let arity = |n: usize| {
        if parts.len() == n {
            Ok(())
        } else {
            Err(CliError::Validation(format!(
                "strategy `{strategy}` expects {} fields",
                n - 1
            )))
        }
    };
    let s = match parts[0] {
        "full" => {
            arity(1)?;
            CachingSchedule::new_full_recompute(t.clone())
        }
        "cached" => {
            arity(1)?;
            CachingSchedule::from_bits_unvalidated(t.clone(), vec![false; t.total_cells()])?
                .enforce_first_step_recompute()
        }
        "fora" => {
            arity(2)?;
            fora_schedule(t, parse_field(strategy, parts[1])?)?
        }
        "tgate" => {
            arity(3)?;
            tgate_schedule(
                t,
                parse_field(strategy, parts[1])?,
                parse_field(strategy, parts[2])?,
            )?
        }
        "component" => {
            arity(4)?;
            component_only_schedule(
                t,
                parts[1],
                parse_field(strategy, parts[2])?,
                parse_field(strategy, parts[3])?,
            )?
        }
        "cross-self" => {
            arity(2)?;
            cross_self_all_blocks_schedule(t, parse_field(strategy, parts[1])?)?
        }
        "uniform" => {
            arity(1)?;
            uniform_random_schedule(t, &mut rng)
        }
        "random" => {
            arity(2)?;
            true_random_schedule(t, parse_field(strategy, parts[1])?, &mut rng)?
        }
        other => return Err(CliError::Validation(format!("unknown strategy `{other}`"))),
    };
    Ok(s)
}

fn cmd_schedule(a: ScheduleArgs) -> Result<(), CliError> {
    let t = load_topology(&a.topology)?;
    let s = strategy_schedule(&t, &a.strategy, a.seed)?;
    write_output(a.out.as_deref(), &s.to_json())
}

fn run_export(dir: &Path) -> Result<FrontierExport, CliError> {
    let store = RunStore::open(dir)?;
    let topology = store.topology()?;
    let history = store.load_history()?;
    Ok(export_frontier(
        &history,
        &topology,
        full_tmacs(&topology)?,
    )?)
}

fn cmd_frontier(a: FrontierArgs) -> Result<(), CliError> {
    let export = run_export(&a.run)?;
    if let Some(p) = &a.json {
        write_output(Some(p), &frontier_json(&export))?;
    }
    if a.csv.is_some() || a.json.is_none() {
        write_output(a.csv.as_deref(), &frontier_csv(&export))?;
    }
    Ok(())
}

fn cmd_select(a: SelectArgs) -> Result<(), CliError> {
    let (frontier, topology): (ParetoFrontier, Arc<ModelTopology>) = match (&a.run, &a.frontier) {
        (Some(dir), _) => {
            let store = RunStore::open(dir)?;
            let topology = store.topology()?;
            (
                overall_frontier(&store.load_history()?, &topology)?,
                topology,
            )
        }
        (None, Some(p)) => {
            let name = a
                .topology
                .as_deref()
                .ok_or_else(|| CliError::Validation("--frontier needs --topology".into()))?;
            let export: FrontierExport = serde_json::from_str(&read_input(p)?)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            (export.overall, load_topology(name)?)
        }
        (None, None) => unreachable!("clap requires --run or --frontier"),
    };
    let chosen = select_by_budget(&frontier, a.budget_tmacs)?;
    let index = frontier
        .points
        .iter()
        .position(|p| std::ptr::eq(p, chosen))
        .expect("selected point belongs to frontier");
    let schedule = frontier.schedule(index, &topology)?;
    eprintln!(
        "selected {}: {:.4} TMACs, quality loss {:.6}",
        chosen.schedule_hash, chosen.cost_tmacs, chosen.quality_loss
    );
    write_output(a.out.as_deref(), &schedule.to_json())
}

fn cmd_rescale(a: RescaleArgs) -> Result<(), CliError> {
    let s = load_schedule(&a.input, a.topology.as_deref())?;
    let out = s.rescale_to_steps(a.to_steps)?;
    write_output(a.out.as_deref(), &out.to_json())
}

fn cmd_cost(a: CostArgs) -> Result<(), CliError> {
    let s = load_schedule(&a.schedule, a.topology.as_deref())?;
    let b = CostModel::new(s.topology().clone()).breakdown(&s)?;
    for (kind, tmacs) in &b.per_component_kind {
        eprintln!("{kind:>20}: {tmacs:.4} TMACs");
    }
    eprintln!("{:>20}: {:.4} TMACs", "overhead", b.overhead_tmacs);
    eprintln!("{:>20}: {:.4} TMACs", "total", b.total_tmacs);
    write_output(None, &serde_json::to_string_pretty(&b).expect("breakdown"))
}

fn cmd_normalize(a: NormalizeArgs) -> Result<(), CliError> {
    let v = normalized_latency(a.cached_ms, a.unaccelerated_ms, a.ours_ms)?;
    write_output(
        None,
        &serde_json::json!({ "normalized_latency_ms": v }).to_string(),
    )
}

fn cmd_mock_worker(a: MockWorkerArgs) -> Result<(), CliError> {
    let mut opts = mock::MockOptions::new(load_topology(&a.topology)?);
    opts.protocol_version = a.protocol_version;
    opts.die_after = a.die_after;
    opts.hang_after = a.hang_after;
    opts.malformed_after = a.malformed_after;
    opts.duplicate = a.duplicate;
    opts.once_marker = a.once_marker;
    let stdin = io::stdin();
    let code = mock::serve(&opts, BufReader::new(stdin.lock()), io::stdout().lock())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if code != 0 {
        std::process::exit(code);
    }
    Ok(())
}
