use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pare_core::RegionEstimates;
use serde::Serialize;

use crate::config::AnalysisConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{Study, WindowResult};

pub const LONG_CSV: &str = "return_levels_long.csv";
pub const MANIFEST: &str = "manifest.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(CliError::io(path))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(CliError::io(path))?;
    finish(w, path)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_station_fits(path: &Path, res: &WindowResult) -> Result<()> {
    let rows = res.stations.iter().map(|s| {
        let f = s.fit.as_ref();
        vec![
            s.station_id.clone(),
            s.region_id.clone(),
            s.days_present.to_string(),
            s.coverage.to_string(),
            s.n_exceed.to_string(),
            s.excluded.is_none().to_string(),
            opt(f.map(|f| f.scale)),
            opt(f.map(|f| f.scale_se())),
            opt(f.map(|f| f.shape)),
            opt(f.map(|f| f.shape_se())),
            opt(f.map(|f| f.rate)),
            opt(f.map(|f| f.rate_se)),
            s.excluded.clone().unwrap_or_default(),
        ]
    });
    write_csv(
        path,
        &[
            "station_id", "region", "days_present", "coverage", "n_exceed", "included", "scale",
            "scale_se", "shape", "shape_se", "rate", "rate_se", "note",
        ],
        rows,
    )
}

fn write_estimates(path: &Path, all: &[RegionEstimates]) -> Result<()> {
    let rows = all.iter().flat_map(|est| {
        est.estimates.iter().map(move |e| {
            vec![
                est.method.to_string(),
                e.region_id.clone(),
                e.threshold.to_string(),
                e.scale.to_string(),
                e.scale_se.to_string(),
                e.shape.to_string(),
                e.shape_se.to_string(),
                e.rate.to_string(),
                e.rate_se.to_string(),
            ]
        })
    });
    write_csv(
        path,
        &["method", "region", "threshold", "scale", "scale_se", "shape", "shape_se", "rate", "rate_se"],
        rows,
    )
}

fn level_rows<'a>(window: Option<String>, all: &'a [RegionEstimates]) -> impl Iterator<Item = Vec<String>> + 'a {
    all.iter().flat_map(move |est| {
        let window = window.clone();
        est.estimates.iter().flat_map(move |e| {
            let window = window.clone();
            e.return_levels.iter().map(move |r| {
                let mut row = Vec::with_capacity(6);
                if let Some(w) = &window {
                    row.push(w.clone());
                }
                row.extend([
                    e.region_id.clone(),
                    est.method.to_string(),
                    r.period.to_string(),
                    r.level.to_string(),
                    r.se.to_string(),
                ]);
                row
            })
        })
    })
}

#[derive(Serialize)]
struct ManifestWindow {
    window: String,
    jitter_seed: u64,
    block_seed: u64,
    stations_used: usize,
    stations_screened: usize,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    config: &'a AnalysisConfig,
    regions: Vec<String>,
    ingest_warnings: &'a [String],
    windows: Vec<ManifestWindow>,
    files: Vec<String>,
}

/// Writes every artifact under `out_dir` (created if missing) and returns the
/// paths written, relative to `out_dir`.
///
/// Layout: `window_<start>_<end>/{stations.csv, estimates.csv,
/// return_levels.csv, pare_fit.json, weights.csv, variogram.json,
/// regional_max_fits.json}`, plus `region_distances.csv`,
/// `return_levels_long.csv` and `manifest.json` at the top.
pub fn emit_reports(study: &Study, results: &[WindowResult], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let mut manifest_windows = Vec::new();

    if let Some(d) = &study.region_distances {
        let rel = PathBuf::from("region_distances.csv");
        let path = out_dir.join(&rel);
        let mut w = create(&path)?;
        d.write_csv(&mut w)?;
        finish(w, &path)?;
        written.push(rel);
    }

    for res in results {
        let dir_rel = PathBuf::from(format!("window_{}", res.window.slug()));
        let dir = out_dir.join(&dir_rel);
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        let mut files = Vec::new();
        let mut note = |name: &str| {
            files.push(dir_rel.join(name));
            dir.join(name)
        };

        write_station_fits(&note("stations.csv"), res)?;
        if !res.estimates.is_empty() {
            write_estimates(&note("estimates.csv"), &res.estimates)?;
            write_csv(
                &note("return_levels.csv"),
                &["region", "method", "period", "level", "se"],
                level_rows(None, &res.estimates),
            )?;
        }
        if let Some(p) = &res.pare {
            write_json(&note("pare_fit.json"), p)?;
        }
        if let Some(wm) = &res.weights {
            let path = note("weights.csv");
            let mut w = create(&path)?;
            wm.write_csv(&mut w)?;
            finish(w, &path)?;
        }
        if let Some(k) = &res.kriging {
            write_json(&note("variogram.json"), k)?;
        }
        if let Some(f) = &res.regional_max_fits {
            write_json(&note("regional_max_fits.json"), f)?;
        }
        manifest_windows.push(ManifestWindow {
            window: res.window.to_string(),
            jitter_seed: res.jitter_seed,
            block_seed: res.block_seed,
            stations_used: res.n_included(),
            stations_screened: res.stations.len(),
            files: files.iter().map(|f| f.display().to_string()).collect(),
        });
        written.extend(files);
    }

    let long_rel = PathBuf::from(LONG_CSV);
    write_csv(
        &out_dir.join(&long_rel),
        &["window", "region", "method", "period", "level", "se"],
        results
            .iter()
            .flat_map(|r| level_rows(Some(r.window.to_string()), &r.estimates)),
    )?;
    written.push(long_rel);

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        core_version: pare_core::VERSION,
        config: &study.config,
        regions: study.region_ids(),
        ingest_warnings: &study.data.warnings,
        windows: manifest_windows,
        files: written.iter().map(|f| f.display().to_string()).collect(),
    };
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    written.push(PathBuf::from(MANIFEST));
    Ok(written)
}
