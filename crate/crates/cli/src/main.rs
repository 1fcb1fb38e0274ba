use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dotrecon::forward::{read_measurements, write_measurements, MeasurementSet};
use dotrecon::harness::{
    self, build_scenario, compute_metrics, export_field, field_from_csv, measurement_meta, metrics_csv,
    reconstruct_irgn, reconstruct_mcmc, snapshots_csv, sweep_csv, write_experiment, write_manifest,
    Engine, EngineOutput, ExperimentConfig,
};
use dotrecon::mcmc::{diagnostics, Chain, Schedule};
use dotrecon::mesh::{generate_disk_mesh, save_mesh};

#[derive(Parser)]
#[command(name = "dotrecon", version, about = "Diffuse optical tomography reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mesh utilities.
    Mesh {
        #[command(subcommand)]
        command: MeshCommand,
    },
    /// Simulate noisy boundary data from the configured phantom.
    Simulate(RunArgs),
    /// Reconstruct from measurements written by `simulate`.
    Reconstruct {
        #[command(subcommand)]
        engine: ReconstructCommand,
    },
    /// Full pipeline: simulate, reconstruct with the configured engine, score.
    Run(RunArgs),
    /// Score a reconstructed field against the configured truth.
    Metrics {
        #[command(flatten)]
        common: RunArgs,
        /// Field CSV (`triangle,D,mu`) on the coarse mesh.
        #[arg(long)]
        field: PathBuf,
        /// Measurements CSV the field was reconstructed from.
        #[arg(long)]
        data: PathBuf,
    },
    /// Convergence diagnostics for a stored chain.
    Diagnostics {
        /// Chain CSV written by `reconstruct mcmc` or `run`.
        #[arg(long)]
        chain: PathBuf,
        /// Iterations per adaption.
        #[arg(long, default_value_t = Schedule::FULL.m)]
        m: usize,
        /// Number of adaptions.
        #[arg(long, default_value_t = Schedule::FULL.adaptions)]
        adaptions: usize,
        #[arg(long, default_value_t = Schedule::FULL.burn_in)]
        burn_in: usize,
        /// Write the per-coordinate table here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Grid search over the `[sweep]` lists of the config.
    Sweep(RunArgs),
    /// Print the effective config (defaults plus overrides) as TOML.
    Config(RunArgs),
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Generate a disk mesh.
    Gen {
        #[arg(long, default_value_t = harness::DEFAULT_RADIUS)]
        radius: f64,
        #[arg(long, default_value_t = 541)]
        triangles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReconstructCommand {
    Irgn(ReconstructArgs),
    Mcmc(ReconstructArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_level: Option<f64>,
    /// Short chain schedule (m=25, M=100, B=10000, N=25000).
    #[arg(long)]
    fast: bool,
    /// Output directory (relative paths resolve against $DOT_OUTPUT_ROOT).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: RunArgs,
    /// Measurements CSV written by `simulate`.
    #[arg(long)]
    data: PathBuf,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let (mut cfg, base) = match &self.config {
            Some(path) => (
                ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (ExperimentConfig::default(), PathBuf::from(".")),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(level) = self.noise_level {
            cfg.noise_level = level;
        }
        if self.fast {
            cfg.mcmc.schedule = Schedule::FAST;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        Ok((cfg, base))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(args: &RunArgs) -> Result<()> {
    let (cfg, base) = args.load()?;
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    create_dir(&dir)?;
    let scn = build_scenario(&cfg, &base)?;
    let clean = harness::simulate(&scn)?;
    let (data, xi) = harness::add_noise(&clean, cfg.noise_level, cfg.seed)?;
    let meas = dir.join("measurements.csv");
    write_measurements(&data, &measurement_meta(&cfg, &data, xi), &meas)?;
    let mut files = vec![
        meas.clone(),
        meas.with_extension("meta.json"),
        meas.with_extension("sigma.csv"),
    ];
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml())?;
    files.push(cfg_path);
    files.extend(export_field(&scn.truth_coarse, scn.coarse(), &dir, "truth")?);
    write_manifest(&dir, &cfg, &files)?;
    println!("ξ = {xi:.6e}; wrote {}", dir.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<(MeasurementSet, f64)> {
    let (set, meta) = read_measurements(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((set, meta.noise_norm))
}

fn reconstruct(engine: Engine, args: &ReconstructArgs) -> Result<()> {
    let (cfg, base) = args.common.load()?;
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    create_dir(&dir)?;
    let scn = build_scenario(&cfg, &base)?;
    let (data, xi) = load_data(&args.data)?;
    if data.boundary_nodes != scn.coarse().boundary_nodes() {
        bail!("measurements do not match the coarse mesh boundary; simulate with the same config");
    }
    let data = scn.fitted_data(&data)?;
    let problem = &scn.problem;
    let mut files = Vec::new();
    let recon = match engine {
        Engine::Irgn => {
            let (field, rep) = reconstruct_irgn(problem, &scn.adjacency, &cfg.bounds, &cfg.irgn, &data, xi)?;
            let p = dir.join("irgn_history.csv");
            std::fs::write(&p, rep.to_csv())?;
            files.push(p);
            println!("{:?} after {} iterations", rep.termination, rep.iterations());
            field
        }
        Engine::Mcmc => {
            let (field, out) = reconstruct_mcmc(
                problem,
                &scn.adjacency,
                &cfg.bounds,
                &cfg.irgn,
                &cfg.mcmc,
                &cfg.regularizer.spec(cfg.phantom.background),
                &data,
                xi,
                cfg.seed,
            )?;
            if let EngineOutput::Mcmc {
                chain, diagnostics, ..
            } = &out
            {
                for (name, text) in [("chain.csv", chain.to_csv()), ("adaption.csv", snapshots_csv(chain))] {
                    let p = dir.join(name);
                    std::fs::write(&p, text)?;
                    files.push(p);
                }
                if let Some(d) = diagnostics {
                    print!("{}", d.summary());
                }
            }
            field
        }
    };
    files.extend(export_field(&recon, scn.coarse(), &dir, "reconstruction")?);
    let m = compute_metrics(&scn, &cfg.phantom, &recon, &data)?;
    let p = dir.join("metrics.csv");
    std::fs::write(&p, metrics_csv(&m))?;
    files.push(p);
    write_manifest(&dir, &cfg, &files)?;
    print!("{}", metrics_csv(&m));
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let (cfg, base) = args.load()?;
    let exp = harness::run_experiment(&cfg, &base)?;
    let dir = cfg.resolved_output_dir();
    write_experiment(&exp, &dir)?;
    print!("{}", metrics_csv(&exp.report.metrics));
    println!("wrote {}", dir.display());
    Ok(())
}

fn metrics(args: &RunArgs, field: &Path, data: &Path) -> Result<()> {
    let (cfg, base) = args.load()?;
    let scn = build_scenario(&cfg, &base)?;
    let text = std::fs::read_to_string(field).with_context(|| format!("reading {}", field.display()))?;
    let recon = field_from_csv(&text, cfg.phantom.background)?;
    if recon.len() != scn.coarse().triangle_count() {
        bail!(
            "field has {} triangles, coarse mesh has {}",
            recon.len(),
            scn.coarse().triangle_count()
        );
    }
    let (data, _) = load_data(data)?;
    let data = scn.fitted_data(&data)?;
    print!("{}", metrics_csv(&compute_metrics(&scn, &cfg.phantom, &recon, &data)?));
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let (cfg, base) = args.load()?;
    let (points, best) = harness::sweep(&cfg, &base)?;
    let dir = cfg.resolved_output_dir();
    create_dir(&dir)?;
    let p = dir.join("sweep.csv");
    let text = sweep_csv(&points, best);
    std::fs::write(&p, &text)?;
    write_manifest(&dir, &cfg, &[p])?;
    print!("{text}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Mesh {
            command:
                MeshCommand::Gen {
                    radius,
                    triangles,
                    seed,
                    output,
                },
        } => {
            let mesh = generate_disk_mesh(radius, triangles, seed)?;
            save_mesh(&mesh, &output)?;
            info!(
                "{} nodes, {} triangles → {}",
                mesh.node_count(),
                mesh.triangle_count(),
                output.display()
            );
        }
        Command::Simulate(args) => simulate(&args)?,
        Command::Reconstruct { engine } => match engine {
            ReconstructCommand::Irgn(a) => reconstruct(Engine::Irgn, &a)?,
            ReconstructCommand::Mcmc(a) => reconstruct(Engine::Mcmc, &a)?,
        },
        Command::Run(args) => run(&args)?,
        Command::Metrics { common, field, data } => metrics(&common, &field, &data)?,
        Command::Diagnostics {
            chain,
            m,
            adaptions,
            burn_in,
            csv,
        } => {
            let text = std::fs::read_to_string(&chain).with_context(|| format!("reading {}", chain.display()))?;
            let schedule = Schedule {
                m,
                adaptions,
                burn_in,
                total: 0,
            };
            let chain = Chain::from_csv(&text, schedule)?;
            let d = diagnostics(&chain)?;
            print!("{}", d.summary());
            match csv {
                Some(path) => std::fs::write(&path, d.to_csv())?,
                None => print!("{}", d.to_csv()),
            }
        }
        Command::Sweep(args) => sweep(&args)?,
        Command::Config(args) => {
            let (cfg, _) = args.load()?;
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}
