use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use envinvert_core::config::PipelineConfig;
use envinvert_core::harness::{reverify_instance, verify_gold, InversionRun};
use envinvert_core::llm::{MockProvider, MockScript};
use envinvert_core::packager::{bundle_dirs, emit_bundle, load_and_validate, TaskInstance};
use envinvert_core::pipeline::{
    collect_all, load_gold, read_json, write_json, Generator, SpecRecord, RUN_FILE, SPEC_FILE,
};
use envinvert_core::prompt::{templates, MemoryPool};
use envinvert_core::sandbox::{BackendKind, SandboxBackend, SimScenario};
use envinvert_core::stats::compute_stats;
use envinvert_core::trajectory::{export_dataset, filter_trajectories, load_trajectories, FilterVerdict, Trajectory};
use envinvert_core::{demo, GoldInstance};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "envinvert", version, about = "Derive environment repair tasks by degrading healthy environments")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the config value or the core count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that every test of a gold environment passes and write its description.
    BuildGold {
        repo_config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate degradation task specs for a gold environment.
    GenSpecs {
        gold: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Directory the spec files are written to.
        #[arg(long, default_value = "specs")]
        out: PathBuf,
        /// Dataset root whose task names seed the duplicate-avoidance pool.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the degradation agent for one spec, then verify and classify.
    Invert {
        gold: PathBuf,
        spec: PathBuf,
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Run directory for artifacts.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Turn an accepted run into task bundles.
    Package {
        run: PathBuf,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Let the solver attempt every bundle and save its trajectories.
    Collect {
        bundle_dir: PathBuf,
        #[arg(long, default_value = "trajectories")]
        out: PathBuf,
    },
    /// Drop short and cheating trajectories and export the rest.
    Filter {
        traj_dir: PathBuf,
        #[arg(long, default_value = "sft")]
        out: PathBuf,
    },
    /// Summary statistics over a dataset root.
    Stats {
        dataset_root: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Rebuild a bundle's environment and check its tests still split the same way.
    Verify { bundle: PathBuf },
    /// Write the embedded prompt templates for inspection.
    DumpTemplates {
        #[arg(long, default_value = "templates")]
        out: PathBuf,
    },
    /// Specs, inversions, and bundles for every configured gold.
    Generate {
        golds: Vec<PathBuf>,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        #[arg(long, default_value = "work")]
        work: PathBuf,
    },
    /// Offline end-to-end run on two simulated repositories.
    Demo {
        #[arg(default_value = "envinvert-demo")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum BackendArg {
    Container,
    Sim,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Scenario files named on the command line double as simulated environments.
fn attach_scenarios(cfg: &mut PipelineConfig, paths: &[PathBuf]) {
    for p in paths {
        let is_scenario = std::fs::read_to_string(p).is_ok_and(|t| SimScenario::parse(&t).is_ok());
        if is_scenario && !cfg.sandbox.scenarios.contains(p) {
            cfg.sandbox.scenarios.push(p.clone());
        }
    }
}

/// A generator; commands that never prompt get a provider that cannot answer.
fn generator(cfg: PipelineConfig, needs_llm: bool) -> Result<Generator> {
    if needs_llm {
        return Ok(Generator::from_config(cfg)?);
    }
    let catalog = cfg.catalog()?;
    let backend = cfg.backend()?;
    Ok(Generator::with_parts(cfg, Box::new(MockProvider::new(MockScript::default())), catalog, backend))
}

fn gold(path: &Path) -> Result<GoldInstance> {
    Ok(load_gold(path)?)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
}

fn bundles_under(dir: &Path) -> Result<Vec<TaskInstance>> {
    let dirs = if dir.join(envinvert_core::packager::META_JSON).is_file() {
        vec![dir.to_path_buf()]
    } else {
        bundle_dirs(dir)?
    };
    dirs.iter().map(|d| load_and_validate(d).with_context(|| format!("bundle {}", d.display()))).collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::BuildGold { repo_config, out } => {
            attach_scenarios(&mut cfg, std::slice::from_ref(&repo_config));
            let g = gold(&repo_config)?;
            verify_gold(&g, cfg.backend()?.as_ref())?;
            match out {
                Some(p) => write_json(&p, &g)?,
                None => print_json(&g),
            }
        }
        Command::GenSpecs { gold: path, count, out, dataset } => {
            attach_scenarios(&mut cfg, std::slice::from_ref(&path));
            let g = gold(&path)?;
            let count = count.unwrap_or(cfg.generation.tasks_per_gold);
            let gen = generator(cfg, true)?;
            let pool = match dataset {
                Some(root) => MemoryPool::from_dataset_root(&root)?,
                None => MemoryPool::new(),
            };
            let (specs, failures) = gen.generate_specs(std::slice::from_ref(&g), &pool, count);
            for s in &specs {
                write_json(&out.join(format!("{}-{:04}.json", s.repo, s.index)), s)?;
            }
            for (repo, index, e) in &failures {
                eprintln!("{repo} #{index}: {e}");
            }
            println!("{} specs written to {}, {} failed", specs.len(), out.display(), failures.len());
        }
        Command::Invert { gold: path, spec, budget, backend, out } => {
            if let Some(b) = budget {
                cfg.generation.budget_secs = b;
            }
            if let Some(b) = backend {
                cfg.sandbox.backend = match b {
                    BackendArg::Container => BackendKind::Container,
                    BackendArg::Sim => BackendKind::Simulated,
                };
            }
            attach_scenarios(&mut cfg, std::slice::from_ref(&path));
            let g = gold(&path)?;
            let record: SpecRecord = read_json(&spec)?;
            let run = generator(cfg, false)?.invert(&g, &record, &out)?;
            print_json(&serde_json::json!({
                "verdict": run.verdict,
                "reproduction": run.reproduction,
                "fail_to_pass": run.classification.fail_to_pass,
                "pass_to_pass": run.classification.pass_to_pass,
            }));
            if !run.accepted() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Package { run, out } => {
            let inversion: InversionRun = read_json(&run.join(RUN_FILE))?;
            let record: SpecRecord = read_json(&run.join(SPEC_FILE))?;
            if !inversion.accepted() {
                bail!("run in {} was not accepted", run.display());
            }
            let gen = generator(cfg, true)?;
            for instance in gen.instances_for(&inversion, &record)? {
                let bundle = emit_bundle(&instance, &out)?;
                println!("{}", bundle.root.display());
            }
        }
        Command::Collect { bundle_dir, out } => {
            let instances = bundles_under(&bundle_dir)?;
            let backend: Arc<dyn SandboxBackend> = cfg.backend()?;
            let ts = collect_all(&cfg, backend.as_ref(), &instances, &out)?;
            let solved = ts.iter().filter(|t| t.success).count();
            println!("{} trajectories in {}, {solved} solved", ts.len(), out.display());
        }
        Command::Filter { traj_dir, out } => {
            let (solved, unsolved): (Vec<Trajectory>, Vec<Trajectory>) =
                load_trajectories(&traj_dir)?.into_iter().partition(|t| t.success);
            let (kept, dropped) = filter_trajectories(solved, &cfg.cheat_rules()?)?;
            let short = dropped.iter().filter(|t| t.filter_verdict == Some(FilterVerdict::DroppedShort)).count();
            let manifest = export_dataset(&kept, &out)?;
            println!(
                "kept {}, dropped {short} short and {} cheating, skipped {} unsolved",
                kept.len(),
                dropped.len() - short,
                unsolved.len()
            );
            print_json(&manifest);
        }
        Command::Stats { dataset_root, json } => {
            let report = compute_stats(&dataset_root);
            for (dir, reason) in &report.skipped {
                eprintln!("skipped {}: {reason}", dir.display());
            }
            if json {
                print_json(&report.stats);
            } else {
                println!("{}", report.stats);
            }
        }
        Command::Verify { bundle } => {
            let instance = load_and_validate(&bundle)?;
            let r = reverify_instance(&instance, cfg.backend()?.as_ref())?;
            println!(
                "{}: fail-to-pass {}, pass-to-pass {}",
                instance.instance_id,
                if r.fail_to_pass_matches { "reproduced" } else { "changed" },
                if r.pass_to_pass_matches { "reproduced" } else { "changed" },
            );
            if !r.holds() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::DumpTemplates { out } => {
            std::fs::create_dir_all(&out)?;
            for (name, text) in templates::ALL {
                std::fs::write(out.join(name), text)?;
            }
            println!("{} templates written to {}", templates::ALL.len(), out.display());
        }
        Command::Generate { golds, out, work } => {
            let paths = if golds.is_empty() { cfg.golds.clone() } else { golds };
            if paths.is_empty() {
                bail!("no gold environments given on the command line or in the config");
            }
            attach_scenarios(&mut cfg, &paths);
            let gs = paths.iter().map(|p| gold(p)).collect::<Result<Vec<_>>>()?;
            let summary = generator(cfg, true)?.generate(&gs, &out, &work)?;
            print_json(&summary);
        }
        Command::Demo { dir } => demo_run(&cli.config, cli.jobs, cli.seed, &dir)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn demo_run(config: &Option<PathBuf>, jobs: Option<usize>, seed: Option<u64>, dir: &Path) -> Result<()> {
    if config.is_some() {
        bail!("demo writes its own configuration; drop --config");
    }
    let cfg_path = demo::write_demo(&dir.join("setup"), seed.unwrap_or(0))?;
    let mut cfg = PipelineConfig::load(&cfg_path)?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    let golds = cfg.golds.iter().map(|p| gold(p)).collect::<Result<Vec<_>>>()?;
    let dataset = dir.join("dataset");
    let gen = generator(cfg.clone(), true)?;
    let summary = gen.generate(&golds, &dataset, &dir.join("work"))?;
    println!(
        "generated {} bundles from {} specs ({} accepted runs)",
        summary.bundles.len(),
        summary.specs,
        summary.accepted
    );

    let instances = bundles_under(&dataset)?;
    let trajectories = collect_all(&cfg, gen.backend(), &instances, &dir.join("trajectories"))?;
    let (solved, unsolved): (Vec<_>, Vec<_>) = trajectories.into_iter().partition(|t| t.success);
    let (kept, dropped) = filter_trajectories(solved, &cfg.cheat_rules()?)?;
    let manifest = export_dataset(&kept, &dir.join("sft"))?;
    println!(
        "trajectories: {} kept, {} dropped, {} unsolved; dataset {}",
        manifest.count,
        dropped.len(),
        unsolved.len(),
        dir.join("sft").display()
    );
    println!("{}", compute_stats(&dataset).stats);
    Ok(())
}
