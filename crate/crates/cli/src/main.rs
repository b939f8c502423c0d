use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use odoslam::evaluation::{evaluate, export_plot_data, ground_truth_in_map, DEFAULT_MAX_DT};
use odoslam::simworld::{build_world, scripted_events, simulate_run};
use odoslam::*;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Pipeline(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn pipeline_err(e: impl std::fmt::Display) -> CliError {
    CliError::Pipeline(e.to_string())
}

#[derive(Parser)]
#[command(name = "odoslam", version, about = "Odometry-aided monocular SLAM on a simulated world")]
struct Cli {
    /// Print the default run configuration as JSON and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a run and write it as JSON.
    Simulate(SimulateArgs),
    /// Run the SLAM or localization pipeline over a simulated run.
    Slam(SlamArgs),
    /// Compare a trajectory against the ground truth of a run.
    Evaluate(EvaluateArgs),
    /// Map the lab and hall presets over several seeds and print an ATE table.
    Demo(DemoArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration JSON; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, CliError> {
        match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| config_err(format!("{}: {e}", path.display()))),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// World and trajectory preset (lab or hall); overrides the config.
    #[arg(long)]
    preset: Option<Preset>,
    /// Noise seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output run file.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SlamArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Run file produced by `simulate`.
    #[arg(long)]
    run: PathBuf,
    /// slam, localization-only or continue-mapping; overrides the config.
    #[arg(long)]
    mode: Option<Mode>,
    /// Map file to start from (required unless the mode is slam).
    #[arg(long)]
    map: Option<PathBuf>,
    /// Run mapping on a background worker thread.
    #[arg(long)]
    pipelined: bool,
    /// Artifact directory; defaults to the config's output_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trajectory CSV written by `slam`.
    #[arg(long)]
    trajectory: PathBuf,
    /// Run file holding the ground truth.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Run whose first ground-truth pose defines the map frame (the mapping
    /// session when evaluating a localization session). Defaults to the
    /// ground-truth run.
    #[arg(long)]
    anchor_run: Option<PathBuf>,
    /// Fit a planar rigid transform before computing the error.
    #[arg(long)]
    align: bool,
    /// Largest timestamp difference accepted when pairing samples.
    #[arg(long, default_value_t = DEFAULT_MAX_DT)]
    max_dt: f64,
    /// Directory for report.json and plot.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Noise seeds per preset.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Also write per-run artifacts below this directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn load_run(path: &Path) -> Result<Run, CliError> {
    Run::load(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn simulate_config(config: &RunConfig) -> Result<Run, CliError> {
    let world = build_world(&config.world_config()).map_err(config_err)?;
    let run = simulate_run(&world, &config.trajectory_config(), &config.intrinsics, &config.t_bc, &config.noise)
        .map_err(config_err)?;
    scripted_events(&run, &config.events).map_err(config_err)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut config = args.config.load()?;
    if let Some(p) = args.preset {
        config.preset = p;
    }
    if let Some(s) = args.seed {
        config.noise.seed = s;
    }
    let run = simulate_config(&config)?;
    run.save(&args.out).map_err(pipeline_err)?;
    println!("wrote {} ({} frames, {:.1} s)", args.out.display(), run.frames.len(), run.duration());
    Ok(())
}

fn cmd_slam(args: &SlamArgs) -> Result<(), CliError> {
    let config = args.config.load()?;
    let mode = args.mode.unwrap_or(config.mode);
    let run = load_run(&args.run)?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));
    let mut system = match (mode, &args.map) {
        (Mode::Slam, Some(_)) => return Err(config_err("--map requires --mode localization-only or continue-mapping")),
        (Mode::Slam, None) => System::new(config.slam.clone(), run.intrinsics, run.t_bc),
        (_, None) => return Err(config_err(format!("mode {} needs --map", mode.as_str()))),
        (_, Some(path)) => {
            let (map, k) = load_map(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            if k != run.intrinsics || map.t_bc != run.t_bc {
                return Err(config_err("map and run were recorded with different camera parameters"));
            }
            info!("loaded map {} with checksum {}", path.display(), map_checksum(&map, &k));
            let mut system = System::with_map(config.slam.clone(), map, k);
            system.set_mode(mode).map_err(config_err)?;
            system
        }
    };
    if args.pipelined {
        system.enable_pipelining();
    }
    let out = run_frames(system, &run.frames);
    out.write_artifacts(&out_dir).map_err(pipeline_err)?;
    let r = &out.report;
    if mode == Mode::Slam && r.initialized_at.is_none() {
        return Err(pipeline_err("map initialization never succeeded"));
    }
    if out.map.unscaled {
        return Err(pipeline_err(format!(
            "metric scale was never estimated ({} keyframes, {} resets)",
            r.keyframes,
            r.resets.len()
        )));
    }
    let map_path = out_dir.join("map.json");
    save_map(&out.map, &out.intrinsics, &map_path).map_err(pipeline_err)?;
    println!(
        "{} frames, {} keyframes, {} landmarks, {} loops, {} relocalizations; map checksum {}",
        r.frames,
        r.keyframes,
        r.landmarks,
        r.loops.len(),
        r.relocalizations.len(),
        map_checksum(&out.map, &out.intrinsics)
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let est = odoslam::evaluation::read_trajectory_csv(&args.trajectory)
        .map_err(|e| config_err(format!("{}: {e}", args.trajectory.display())))?;
    let run = load_run(&args.ground_truth)?;
    let anchor_run = match &args.anchor_run {
        Some(p) => load_run(p)?,
        None => run.clone(),
    };
    let anchor = anchor_run.ground_truth.first().ok_or_else(|| config_err("anchor run has no ground truth"))?.body_pose;
    let gt = ground_truth_in_map(&run.ground_truth, &anchor);
    let report = evaluate(&est, &gt, args.max_dt, args.align).map_err(pipeline_err)?;
    std::fs::create_dir_all(&args.out_dir).map_err(pipeline_err)?;
    let json = serde_json::to_string_pretty(&report.summary()).map_err(pipeline_err)?;
    std::fs::write(args.out_dir.join("report.json"), &json).map_err(pipeline_err)?;
    export_plot_data(&report, &args.out_dir.join("plot.csv")).map_err(pipeline_err)?;
    println!("{json}");
    Ok(())
}

fn cmd_demo(args: &DemoArgs) -> Result<(), CliError> {
    let base = args.config.load()?;
    println!(
        "{:<6} {:>4} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "place", "seed", "x [m]", "y [m]", "z [m]", "total", "coverage"
    );
    for preset in [Preset::Lab, Preset::Hall] {
        for seed in 0..args.seeds {
            let mut config = base.clone();
            config.preset = preset;
            config.noise.seed = seed;
            let run = simulate_config(&config)?;
            let out = run_frames(System::new(config.slam.clone(), run.intrinsics, run.t_bc), &run.frames);
            if let Some(dir) = &args.out_dir {
                out.write_artifacts(&dir.join(format!("{}-{seed}", preset.name()))).map_err(pipeline_err)?;
            }
            let gt = ground_truth_in_map(&run.ground_truth, &run.ground_truth[0].body_pose);
            match evaluate(&out.trajectory(), &gt, DEFAULT_MAX_DT, false) {
                Ok(r) => println!(
                    "{:<6} {:>4} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>9.2}",
                    preset.name(),
                    seed,
                    r.ate_x,
                    r.ate_y,
                    r.ate_z,
                    r.rmse_total,
                    r.visual_coverage
                ),
                Err(e) => println!("{:<6} {:>4} no estimate: {e}", preset.name(), seed),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.print_defaults {
        println!("{}", RunConfig::default().to_json());
        return ExitCode::SUCCESS;
    }
    let result = match &cli.command {
        Some(Command::Simulate(a)) => cmd_simulate(a),
        Some(Command::Slam(a)) => cmd_slam(a),
        Some(Command::Evaluate(a)) => cmd_evaluate(a),
        Some(Command::Demo(a)) => cmd_demo(a),
        None => Err(config_err("no subcommand given; see --help")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
