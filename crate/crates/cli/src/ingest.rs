use std::fs::File;
use std::path::Path;

use pare_core::extremes::{read_series_csv, DailySeries};
use pare_core::geometry::{read_stations_csv, Projection, Station};

use crate::error::{CliError, Result};

/// 99.9th-percentile depths above this (tenths of a millimetre, 20 inches)
/// suggest a file recorded in the wrong unit.
pub const UNIT_SUSPECT_TENTHS_MM: f64 = 5080.0;

pub const STATIONS_FILE: &str = "stations.csv";

/// Stations and their daily records, in `stations.csv` order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub stations: Vec<Station>,
    pub series: Vec<DailySeries>,
    pub warnings: Vec<String>,
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    log::warn!("{msg}");
    warnings.push(msg);
}

fn percentile_999(series: &DailySeries) -> Option<f64> {
    let mut v: Vec<f64> = series.depths.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    Some(pare_core::geometry::quantile(&mut v, 0.999))
}

/// Reads `stations.csv` (`station_id,lon,lat`, projected with `proj`) and each
/// station's `<station_id>.csv`. Stations without a single usable day are
/// dropped with a warning. Stations whose depths look like the wrong unit are
/// kept, also with a warning.
pub fn ingest(data_dir: &Path, proj: &Projection) -> Result<Dataset> {
    let list = data_dir.join(STATIONS_FILE);
    let stations = read_stations_csv(File::open(&list).map_err(CliError::io(&list))?, proj)?;
    let mut out = Dataset {
        stations: Vec::new(),
        series: Vec::new(),
        warnings: Vec::new(),
    };
    for st in stations {
        let path = data_dir.join(format!("{}.csv", st.id));
        let file = File::open(&path).map_err(CliError::io(&path))?;
        let series = read_series_csv(file, &st.id, &path.display().to_string()).map_err(|source| {
            CliError::Extremes {
                context: format!("station {}", st.id),
                source,
            }
        })?;
        if series.n_present() == 0 {
            warn(&mut out.warnings, format!("station {} has no usable days; dropped", st.id));
            continue;
        }
        if let Some(p) = percentile_999(&series).filter(|&p| p > UNIT_SUSPECT_TENTHS_MM) {
            warn(
                &mut out.warnings,
                format!(
                    "station {}: 99.9th percentile depth {p} exceeds {UNIT_SUSPECT_TENTHS_MM} tenths of a mm; check units",
                    st.id
                ),
            );
        }
        out.stations.push(st);
        out.series.push(series);
    }
    Ok(out)
}
