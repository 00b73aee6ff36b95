use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pare_cli::config::{AnalysisConfig, Window};
use pare_cli::demo::{write_demo_dataset, DemoOptions};
use pare_cli::error::{CliError, Result};
use pare_cli::{emit_reports, load_simulation_config, run_windows, simulate, Study};
use pare_core::simulation::{Parameter, SimulationConfig};
use pare_core::Method;

#[derive(Parser)]
#[command(name = "pare", version, about = "Point-to-area extreme rainfall estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse every station file and report coverage and warnings.
    IngestCheck(AnalysisArgs),
    /// Screen and fit stations in every window, without regional estimation.
    FitStations(AnalysisArgs),
    /// Regional estimates from the PARE model.
    Pare(AnalysisArgs),
    /// Regional estimates from block kriging.
    Krige(AnalysisArgs),
    /// Regional estimates from the regional daily maximum.
    RegionalMax(AnalysisArgs),
    /// Every configured method over every configured window.
    Windows(AnalysisArgs),
    /// Simulation study scoring the three estimators against a known truth.
    Simulate(SimulateArgs),
    /// Write a synthetic station network and config for trying the pipeline.
    DemoData(DemoArgs),
}

/// Flags override the matching fields of `--config`.
#[derive(Args)]
struct AnalysisArgs {
    /// TOML analysis config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Region polygons (GeoJSON, lon/lat).
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Threshold in tenths of a millimetre.
    #[arg(long)]
    threshold: Option<f64>,
    /// START-END, repeatable.
    #[arg(long = "window")]
    windows: Vec<Window>,
    /// Return periods in years, comma separated.
    #[arg(long, value_delimiter = ',')]
    periods: Vec<f64>,
    /// Methods for `windows`, comma separated (pare, kriging, regional_max).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
}

impl AnalysisArgs {
    fn resolve(self) -> Result<AnalysisConfig> {
        let mut cfg = match &self.config {
            Some(p) => AnalysisConfig::load(p)?,
            None => AnalysisConfig::default(),
        };
        if let Some(v) = self.data_dir {
            cfg.data_dir = v;
        }
        if let Some(v) = self.regions {
            cfg.regions_path = v;
        }
        if let Some(v) = self.output_dir {
            cfg.output_dir = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if !self.windows.is_empty() {
            cfg.windows = self.windows;
        }
        if !self.periods.is_empty() {
            cfg.return_periods = self.periods;
        }
        if !self.methods.is_empty() {
            cfg.methods = self.methods;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Region polygons (GeoJSON, lon/lat); defaults to the bundled synthetic layout.
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long, default_value = "sim_out")]
    output_dir: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rank-noise amplitude as a fraction of series length.
    #[arg(long)]
    noise_scale: Option<f64>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value = "demo")]
    dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    stations_per_region: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn ingest_check(cfg: AnalysisConfig) -> Result<()> {
    let study = Study::load(cfg)?;
    let ids = study.region_ids();
    println!("station_id,region,first_date,last_date,days,days_present");
    for (i, s) in study.data.series.iter().enumerate() {
        println!(
            "{},{},{},{},{},{}",
            s.station_id,
            ids[study.stations.region_of(i)],
            s.start,
            s.end().map(|d| d.to_string()).unwrap_or_default(),
            s.len(),
            s.n_present()
        );
    }
    for (j, c) in study.stations.counts().iter().enumerate() {
        eprintln!("region {}: {c} stations", ids[j]);
    }
    for t in study.stations.boundary_ties() {
        eprintln!("warning: station {t} sits on a shared region boundary");
    }
    for w in &study.data.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn analyse(mut cfg: AnalysisConfig, methods: &[Method]) -> Result<()> {
    if !methods.is_empty() {
        cfg.methods = methods.to_vec();
    }
    let out = cfg.output_dir.clone();
    let study = Study::load(cfg)?;
    let results = run_windows(&study, methods)?;
    let files = emit_reports(&study, &results, &out)?;
    for r in &results {
        eprintln!("window {}: {} of {} stations used", r.window, r.n_included(), r.stations.len());
    }
    eprintln!("wrote {} files under {}", files.len(), out.display());
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => load_simulation_config(p)?,
        None => SimulationConfig::default(),
    };
    if let Some(n) = args.iterations {
        cfg.n_iterations = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(v) = args.noise_scale {
        cfg.noise_scale = v;
    }
    let (report, files) = simulate(&cfg, args.regions.as_deref(), &args.output_dir)?;
    println!("parameter,region,method,truth,mean,rmse,mae");
    for p in [Parameter::Scale, Parameter::Shape] {
        for c in report.cells.iter().filter(|c| c.parameter == p) {
            println!(
                "{},{},{},{},{:.4},{:.4},{:.4}",
                p.as_str(),
                c.region_id,
                c.method,
                c.truth,
                c.mean,
                c.rmse,
                c.mae
            );
        }
    }
    if !report.failures.is_empty() {
        eprintln!("{} iterations failed and were excluded", report.failures.len());
    }
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestCheck(a) => ingest_check(a.resolve()?),
        Command::FitStations(a) => analyse(a.resolve()?, &[]),
        Command::Pare(a) => analyse(a.resolve()?, &[Method::Pare]),
        Command::Krige(a) => analyse(a.resolve()?, &[Method::BlockKriging]),
        Command::RegionalMax(a) => analyse(a.resolve()?, &[Method::RegionalMax]),
        Command::Windows(a) => {
            let cfg = a.resolve()?;
            let methods = cfg.methods.clone();
            analyse(cfg, &methods)
        }
        Command::Simulate(a) => run_simulate(a),
        Command::DemoData(a) => {
            let opts = DemoOptions {
                stations_per_region: a.stations_per_region,
                seed: a.seed,
                ..DemoOptions::default()
            };
            write_demo_dataset(&a.dir, &opts)?;
            eprintln!("demo data written; try: pare windows --config {}", a.dir.join("config.toml").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
