//! The `brm` command line. Every subcommand writes into `--out`; the roadmap
//! is rebuilt only when `roadmap.json` there was made from a different
//! scenario, seed or node mode.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::export::{read_json, write_json, FiguresData, RolloutBundle, RunResult, VerificationSummary};
use crate::roadmap::{
    build_roadmap, load_roadmap, random_paths, shortest_path, simulate_path, verify_concatenation, EdgeContext,
    RoadmapDocument, RoadmapGraph,
};
use crate::scenario::{load_scenario_file, NodeMode, Scenario};

pub const ROADMAP_FILE: &str = "roadmap.json";
pub const RESULT_FILE: &str = "result.json";
pub const VERIFY_FILE: &str = "verify.json";
pub const FIGURES_FILE: &str = "figures.json";

#[derive(Debug, Parser)]
#[command(name = "brm", version, about = "Belief roadmaps with covariance steering edges")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample nodes and construct all admissible edges.
    Build(Common),
    /// Search the roadmap for a minimum cost path.
    Plan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        query: QueryArgs,
    },
    /// Monte-Carlo execution of the planned path.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, default_value_t = 500)]
        rollouts: usize,
        /// Rollout traces kept in result.json.
        #[arg(long, default_value_t = 50)]
        keep: usize,
        /// Keep every n-th state of a kept trace.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Check arrival covariances along the planned path and random walks.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, default_value_t = 100)]
        paths: usize,
        #[arg(long, default_value_t = 3)]
        legs: usize,
        /// Rollouts for sample covariances on the planned path; 0 disables.
        #[arg(long, default_value_t = 0)]
        rollouts: usize,
    },
    /// Write figures.json for the plotting scripts.
    ExportFiguresData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        query: QueryArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, env = "BRM_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Override the scenario's node mode.
    #[arg(long, value_enum)]
    pub mode: Option<NodeMode>,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct QueryArgs {
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 1)]
    pub goal: usize,
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok = 0,
    NoPath = 1,
    InvalidInput = 2,
    SolverFailure = 3,
    VerificationFailed = 4,
}

impl From<Outcome> for ExitCode {
    fn from(o: Outcome) -> Self {
        ExitCode::from(o as u8)
    }
}

impl Outcome {
    pub fn of_error(e: &Error) -> Self {
        if e.is_solver_failure() {
            Outcome::SolverFailure
        } else {
            Outcome::InvalidInput
        }
    }
}

pub fn run(cli: Cli) -> Outcome {
    let threads = match &cli.command {
        Command::Build(c) => c.threads,
        Command::Plan { common, .. }
        | Command::Simulate { common, .. }
        | Command::Verify { common, .. }
        | Command::ExportFiguresData { common, .. } => common.threads,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return Outcome::InvalidInput;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            Outcome::of_error(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Build(c) => {
            let scenario = effective_scenario(&c)?;
            std::fs::create_dir_all(&c.out)?;
            let graph = build_roadmap(&scenario, c.seed)?;
            save_roadmap(&c.out, &graph)?;
            report_build(&graph);
            Ok(Outcome::Ok)
        }
        Command::Plan { common, query } => {
            let graph = obtain_roadmap(&common)?;
            let result = plan(&graph, &common.out, query)?;
            Ok(report_plan(&result))
        }
        Command::Simulate {
            common,
            query,
            rollouts,
            keep,
            stride,
        } => {
            let graph = obtain_roadmap(&common)?;
            let mut result = plan(&graph, &common.out, query)?;
            let Some(path) = result.planned_path() else {
                return Ok(report_plan(&result));
            };
            let ctx = EdgeContext::new(&graph.scenario, graph.seed)?;
            let runs = simulate_path(&ctx, &graph, &path, rollouts, common.seed)?;
            let bundle = RolloutBundle::new(
                &runs,
                common.seed,
                graph.scenario.monte_carlo.collision_threshold,
                graph.scenario.position_dim(),
                keep,
                stride,
            );
            eprintln!(
                "simulated {} rollouts: {} collisions (rate {:.4}, threshold {})",
                bundle.count, bundle.collisions, bundle.collision_rate, bundle.collision_threshold
            );
            result.rollouts = Some(bundle);
            write_json(&common.out.join(RESULT_FILE), &result)?;
            Ok(Outcome::Ok)
        }
        Command::Verify {
            common,
            query,
            paths,
            legs,
            rollouts,
        } => {
            let graph = obtain_roadmap(&common)?;
            let ctx = EdgeContext::new(&graph.scenario, graph.seed)?;
            let mut reports = Vec::new();
            if let Some(p) = shortest_path(&graph, query.start, query.goal)?.filter(|p| !p.edges.is_empty()) {
                reports.push(verify_concatenation(&ctx, &graph, &p, rollouts, common.seed)?);
            }
            if paths > 0 && !graph.edges.is_empty() {
                for p in random_paths(&graph, paths, legs, common.seed)? {
                    reports.push(verify_concatenation(&ctx, &graph, &p, 0, common.seed)?);
                }
            }
            let summary = VerificationSummary::new(graph.scenario.content_hash()?, reports);
            write_json(&common.out.join(VERIFY_FILE), &summary)?;
            eprintln!(
                "verified {} paths: worst margin {:.3e} (tolerance {:.0e})",
                summary.paths, summary.worst_margin, summary.tolerance
            );
            Ok(if summary.holds {
                Outcome::Ok
            } else {
                Outcome::VerificationFailed
            })
        }
        Command::ExportFiguresData { common, query } => {
            let graph = obtain_roadmap(&common)?;
            let result = match read_json::<RunResult>(&common.out.join(RESULT_FILE)) {
                Ok(r) if result_matches(&r, &graph, query)? => r,
                _ => plan(&graph, &common.out, query)?,
            };
            write_json(&common.out.join(FIGURES_FILE), &FiguresData::new(&graph, &result))?;
            Ok(Outcome::Ok)
        }
    }
}

fn effective_scenario(c: &Common) -> Result<Scenario> {
    let mut scenario = load_scenario_file(&c.scenario)?;
    if let Some(mode) = c.mode {
        scenario.sampling.mode = mode;
        scenario.validate()?;
    }
    Ok(scenario)
}

/// Reuse `out/roadmap.json` when it matches the scenario, seed and mode;
/// otherwise build and save a fresh roadmap.
pub fn obtain_roadmap(c: &Common) -> Result<RoadmapGraph> {
    let scenario = effective_scenario(c)?;
    let file = c.out.join(ROADMAP_FILE);
    if file.exists() {
        match load_roadmap(&file) {
            Ok(g) if g.seed == c.seed && g.scenario.content_hash()? == scenario.content_hash()? => return Ok(g),
            Ok(_) => eprintln!("{} is stale, rebuilding", file.display()),
            Err(e) => eprintln!("{} unusable ({e}), rebuilding", file.display()),
        }
    }
    std::fs::create_dir_all(&c.out)?;
    let graph = build_roadmap(&scenario, c.seed)?;
    save_roadmap(&c.out, &graph)?;
    report_build(&graph);
    Ok(graph)
}

fn save_roadmap(out: &Path, graph: &RoadmapGraph) -> Result<()> {
    let mut text = RoadmapDocument::from_graph(graph)?.to_json()?;
    text.push('\n');
    std::fs::write(out.join(ROADMAP_FILE), text)?;
    Ok(())
}

fn result_matches(r: &RunResult, graph: &RoadmapGraph, q: QueryArgs) -> Result<bool> {
    Ok(r.roadmap.scenario_hash == graph.scenario.content_hash()?
        && r.roadmap.seed == graph.seed
        && r.query.start == q.start
        && r.query.goal == q.goal)
}

/// Search and write `result.json`; a missing path is a result, not an error.
pub fn plan(graph: &RoadmapGraph, out: &Path, q: QueryArgs) -> Result<RunResult> {
    let path = shortest_path(graph, q.start, q.goal)?;
    let result = RunResult::new(graph, ROADMAP_FILE, q.start, q.goal, path.as_ref())?;
    write_json(&out.join(RESULT_FILE), &result)?;
    Ok(result)
}

fn report_build(graph: &RoadmapGraph) {
    let rejected: Vec<String> = graph
        .rejection_counts()
        .iter()
        .map(|(g, n)| format!("{} {n}", g.name()))
        .collect();
    eprintln!(
        "roadmap: {} nodes, {} edges from {} attempts (rejected: {})",
        graph.nodes.len(),
        graph.edges.len(),
        graph.attempts.len(),
        rejected.join(", ")
    );
}

fn report_plan(result: &RunResult) -> Outcome {
    match &result.path {
        Some(p) => {
            eprintln!(
                "path {:?}: total {:.4} (mean {:.4}, cov {:.4}, collision probability sum {:.4})",
                p.nodes, p.total_cost, p.mean_cost, p.cov_cost, p.collision_probability_sum
            );
            Outcome::Ok
        }
        None => {
            eprintln!("no path from {} to {}", result.query.start, result.query.goal);
            Outcome::NoPath
        }
    }
}
