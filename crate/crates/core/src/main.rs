use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use markerslam::eval::{ate_rmse, read_trajectory_file, write_trajectory_file, TrajectoryRecord};
use markerslam::experiment::{
    build_prior_map, describe, render_tables, run_matrix, simulate_dataset, ExperimentConfig, TableFormat, TableKind,
};
use markerslam::map_store::{read_map_file, write_map_file, PerturbationConfig};
use markerslam::sim::{write_environment, write_sequence, NoiseConfig};
use markerslam::Mode;

#[derive(Parser)]
#[command(name = "markerslam", version, about = "Fiducial-marker pose-graph SLAM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Slam,
    SlamPrior,
    Localization,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Slam => Mode::Slam,
            ModeArg::SlamPrior => Mode::SlamWithPrior,
            ModeArg::Localization => Mode::Localization,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
}

#[derive(clap::Args)]
struct DatasetArgs {
    /// Master seed of the simulated dataset.
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// TOML file overriding the noise standard deviations (radians, meters).
    #[arg(long)]
    noise_profile: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the simulated dataset (ground-truth map, trajectories, detections, odometry).
    Simulate {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the prior marker map by running SLAM on the mapping sequence.
    Map {
        #[command(flatten)]
        data: DatasetArgs,
        /// Output directory; the map is written to `prior_map.mmap`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sweep over sequences, modes and map displacements.
    Run {
        #[command(flatten)]
        data: DatasetArgs,
        /// Restrict to one mode (repeatable).
        #[arg(long)]
        mode: Vec<ModeArg>,
        /// Restrict the displacement sweep (repeatable), meters.
        #[arg(long)]
        delta: Vec<f64>,
        /// Use this prior map instead of building one.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Directory for the result tables and prior map.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Md)]
        format: FormatArg,
        /// Run cells in parallel (timings become less comparable).
        #[arg(long)]
        parallel: bool,
    },
    /// ATE between an estimated and a reference trajectory file.
    Eval {
        estimate: PathBuf,
        reference: PathBuf,
        /// Maximum timestamp difference for association, seconds
        /// [default: half the median reference sample spacing].
        #[arg(long)]
        max_dt: Option<f64>,
        /// Also write the aligned estimate here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Displace every marker of a map by exactly `delta` meters.
    Perturb {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output map file.
        #[arg(long)]
        out: PathBuf,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn experiment_config(data: &DatasetArgs) -> Result<ExperimentConfig, AnyError> {
    let mut cfg = ExperimentConfig::default();
    cfg.recipe.master_seed = data.seed;
    if let Some(path) = &data.noise_profile {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let noise: NoiseConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if !noise.is_valid() {
            return Err(format!("{}: noise sigmas must be finite and non-negative", path.display()).into());
        }
        cfg.noise = noise;
    }
    Ok(cfg)
}

fn table_format(f: FormatArg) -> (TableFormat, &'static str) {
    match f {
        FormatArg::Csv => (TableFormat::Csv, "csv"),
        FormatArg::Md => (TableFormat::Markdown, "md"),
    }
}

fn median_spacing(traj: &TrajectoryRecord) -> f64 {
    let t: Vec<f64> = traj.timestamps().collect();
    let mut gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return 0.0;
    }
    gaps.sort_by(f64::total_cmp);
    gaps[gaps.len() / 2]
}

fn create_dir(dir: &Path) -> Result<(), AnyError> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()).into())
}

fn run(cli: Cli) -> Result<(), AnyError> {
    match cli.command {
        Command::Simulate { data, out } => {
            let cfg = experiment_config(&data)?;
            let dataset = simulate_dataset(&cfg)?;
            write_environment(&out, &dataset.environment)?;
            write_sequence(&out, &dataset.mapping)?;
            for seq in &dataset.evaluation {
                write_sequence(&out, seq)?;
            }
            println!(
                "wrote {} sequences and {} markers to {}",
                dataset.evaluation.len() + 1,
                dataset.environment.markers.len(),
                out.display()
            );
        }
        Command::Map { data, out } => {
            let cfg = experiment_config(&data)?;
            let dataset = simulate_dataset(&cfg)?;
            let map = build_prior_map(&cfg, &dataset)?;
            create_dir(&out)?;
            let path = out.join("prior_map.mmap");
            write_map_file(&map, &path)?;
            println!("wrote {} markers to {}", map.len(), path.display());
        }
        Command::Run {
            data,
            mode,
            delta,
            map,
            out,
            format,
            parallel,
        } => {
            let mut cfg = experiment_config(&data)?;
            if !mode.is_empty() {
                cfg.modes = mode.into_iter().map(Mode::from).collect();
            }
            if !delta.is_empty() {
                if let Some(d) = delta.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
                    return Err(format!("invalid displacement {d}").into());
                }
                cfg.deltas = delta;
            }
            cfg.parallel = parallel;
            cfg.out_dir = out;
            let dataset = simulate_dataset(&cfg)?;
            let prior = match &map {
                Some(path) => read_map_file(path).map_err(|e| format!("{}: {e}", path.display()))?,
                None => build_prior_map(&cfg, &dataset)?,
            };
            eprint!("{}", describe(&cfg));
            let table = run_matrix(&cfg, &dataset, &prior);
            let (fmt, ext) = table_format(format);
            let ate = render_tables(&table, fmt, TableKind::Ate);
            let runtime = render_tables(&table, fmt, TableKind::Runtime);
            print!("{ate}\n{runtime}");
            for row in table.errors() {
                if let Err(e) = &row.outcome {
                    eprintln!("sequence {} {} {:?}: {e}", row.sequence, row.mode, row.delta_p);
                }
            }
            if let Some(dir) = &cfg.out_dir {
                create_dir(dir)?;
                fs::write(dir.join(format!("ate.{ext}")), ate)?;
                fs::write(dir.join(format!("runtime.{ext}")), runtime)?;
                fs::write(dir.join("metadata.txt"), describe(&cfg))?;
                write_map_file(&prior, &dir.join("prior_map.mmap"))?;
            }
        }
        Command::Eval {
            estimate,
            reference,
            max_dt,
            out,
        } => {
            let est = read_trajectory_file(&estimate).map_err(|e| format!("{}: {e}", estimate.display()))?;
            let refr = read_trajectory_file(&reference).map_err(|e| format!("{}: {e}", reference.display()))?;
            let max_dt = max_dt.unwrap_or_else(|| 0.5 * median_spacing(&refr));
            let ate = ate_rmse(&est, &refr, max_dt)?;
            println!("pairs {}", ate.pairs);
            println!("rmse {}", ate.rmse);
            println!("mean {}", ate.mean);
            println!("median {}", ate.median);
            println!("max {}", ate.max);
            println!("alignment {}", ate.alignment);
            if let Some(path) = out {
                write_trajectory_file(&est.transformed(&ate.alignment), &path)?;
            }
        }
        Command::Perturb { map, delta, seed, out } => {
            let input = read_map_file(&map).map_err(|e| format!("{}: {e}", map.display()))?;
            let perturbed = PerturbationConfig { delta, seed }.apply(&input)?;
            write_map_file(&perturbed, &out)?;
            println!("wrote {} markers to {}", perturbed.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
