//! `steer`: run steering experiments from JSON configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use steer_core::harness::{
    emit_outputs, random_mps_survey, run_experiment, size_sweep, survey_csv, sweep_csv, with_threads, write_file,
    ExperimentConfig, HarnessError, HarnessResult, PolicySpec, SurveyConfig,
};
use steer_core::qsm::{build_steering_graph, coarse_grain, export_coarse_dot, export_dot, w_basis, Basis};
use steer_core::steering::FamilyTag;

#[derive(Parser)]
#[command(name = "steer", version, about = "Measurement-driven quantum state steering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; falls back to the config's `output.dir`, then `out`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn out_dir(&self, configured: Option<&PathBuf>) -> PathBuf {
        self.out_dir.clone().or_else(|| configured.cloned()).unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write runtimes CSV and summary JSON.
    Run(Common),
    /// Paired passive/active runs over system sizes.
    Sweep(Common),
    /// Random-MPS survey of paired speedups.
    Survey(Common),
    /// State-machine utilities.
    Qsm {
        #[command(subcommand)]
        command: QsmCommand,
    },
}

#[derive(Subcommand)]
enum QsmCommand {
    /// Write the multigraph and its coarse-graining as DOT and JSON.
    Export(Common),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    base: ExperimentConfig,
    sizes: Vec<usize>,
    passive: PolicySpec,
    active: PolicySpec,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> HarnessResult<T> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_str(&text)?)
}

fn load_experiment(c: &Common) -> HarnessResult<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_json(&c.config)?;
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stem_of(c: &Common) -> String {
    c.config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "experiment".into())
}

fn run(c: &Common) -> HarnessResult<()> {
    let cfg = load_experiment(c)?;
    let stem = cfg.output.stem.clone().or_else(|| cfg.name.clone()).unwrap_or_else(|| stem_of(c));
    let result = with_threads(c.threads, || run_experiment(&cfg))??;
    let paths = emit_outputs(&result, &c.out_dir(cfg.output.dir.as_ref()), &stem)?;
    println!("{}", serde_json::to_string(&result.stats)?);
    for p in paths {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn sweep(c: &Common) -> HarnessResult<()> {
    let mut f: SweepFile = read_json(&c.config)?;
    if let Some(s) = c.seed {
        f.base.master_seed = s;
    }
    f.base.validate()?;
    let rows = with_threads(c.threads, || size_sweep(&f.base, &f.sizes, &f.passive, &f.active))??;
    write_file(&c.out_dir(f.base.output.dir.as_ref()).join(format!("{}_sweep.csv", stem_of(c))), &sweep_csv(&rows))?;
    println!("{}", serde_json::to_string(&rows)?);
    Ok(())
}

fn survey(c: &Common) -> HarnessResult<()> {
    let mut sc: SurveyConfig = read_json(&c.config)?;
    if let Some(s) = c.seed {
        sc.seed = s;
    }
    let rows = with_threads(c.threads, || random_mps_survey(&sc))??;
    write_file(&c.out_dir(None).join(format!("{}_survey.csv", stem_of(c))), &survey_csv(&rows))?;
    println!("{}", serde_json::to_string(&rows)?);
    Ok(())
}

fn qsm_export(c: &Common) -> HarnessResult<()> {
    let cfg = load_experiment(c)?;
    let fam = steer_core::harness::build_family(&cfg)?;
    let basis = if fam.kind == FamilyTag::WState { w_basis() } else { Basis::computational(&fam.register) };
    let graph = build_steering_graph(&fam, &basis, cfg.dt)?;
    let coarse = coarse_grain(&graph);
    let stem = stem_of(c);
    let d = &c.out_dir(cfg.output.dir.as_ref());
    write_file(&d.join(format!("{stem}_qsm.dot")), &export_dot(&graph))?;
    write_file(&d.join(format!("{stem}_qsm.json")), &(graph.to_json() + "\n"))?;
    write_file(&d.join(format!("{stem}_coarse.dot")), &export_coarse_dot(&graph, &coarse))?;
    write_file(&d.join(format!("{stem}_coarse.json")), &(coarse.to_json() + "\n"))?;
    println!("{} vertices, {} edges, {} blocks", graph.n_vertices(), graph.edges.len(), coarse.blocks.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(c) => run(c),
        Command::Sweep(c) => sweep(c),
        Command::Survey(c) => survey(c),
        Command::Qsm { command: QsmCommand::Export(c) } => qsm_export(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let j = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{j}");
            ExitCode::FAILURE
        }
    }
}
