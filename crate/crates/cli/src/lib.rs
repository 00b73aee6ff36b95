//! Orchestration behind the `pare` command: configuration, ingestion of
//! station records, per-window estimation with every method, report files and
//! the simulation study driver.

pub mod config;
pub mod demo;
pub mod error;
pub mod ingest;
pub mod pipeline;
pub mod report;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use pare_core::geometry::RegionSet;
use pare_core::simulation::{run_simulation, SimulationConfig, SimulationReport, SimulationSetup};

pub use config::{AnalysisConfig, Window};
pub use error::{CliError, Result};
pub use pipeline::{run_window, run_windows, Study, WindowResult};
pub use report::emit_reports;

pub const SIM_SUMMARY_CSV: &str = "simulation_summary.csv";
pub const SIM_RAW_CSV: &str = "simulation_raw.csv";
pub const SIM_REPORT_JSON: &str = "simulation_report.json";

/// Reads a simulation config; `.json` files are JSON, anything else TOML.
pub fn load_simulation_config(path: &Path) -> Result<SimulationConfig> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Runs the simulation study on lon/lat `regions` (or the bundled synthetic
/// layout) and writes the summary, raw and JSON reports into `out_dir`.
pub fn simulate(
    config: &SimulationConfig,
    regions: Option<&Path>,
    out_dir: &Path,
) -> Result<(SimulationReport, Vec<PathBuf>)> {
    let setup = match regions {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            let (set, _) = RegionSet::from_geojson(&text)?;
            SimulationSetup::new(set, config)?
        }
        None => SimulationSetup::synthetic(config)?,
    };
    let report = run_simulation(&setup, config)?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let open = |name: &str| -> Result<BufWriter<File>> {
        let p = out_dir.join(name);
        Ok(BufWriter::new(File::create(&p).map_err(CliError::io(&p))?))
    };
    report.write_summary_csv(open(SIM_SUMMARY_CSV)?)?;
    report.write_raw_csv(open(SIM_RAW_CSV)?)?;
    serde_json::to_writer_pretty(open(SIM_REPORT_JSON)?, &report)?;
    let files = [SIM_SUMMARY_CSV, SIM_RAW_CSV, SIM_REPORT_JSON]
        .iter()
        .map(|f| out_dir.join(f))
        .collect();
    Ok((report, files))
}
