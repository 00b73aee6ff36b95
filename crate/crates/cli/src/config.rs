use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pare_core::extremes::DEFAULT_THRESHOLD;
use pare_core::geometry::{DEFAULT_C, DEFAULT_JITTER_SD, DEFAULT_PITCH};
use pare_core::kriging::KrigingOptions;
use pare_core::Method;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Inclusive calendar-year window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[i32; 2]", into = "[i32; 2]")]
pub struct Window {
    pub start_year: i32,
    pub end_year: i32,
}

impl Window {
    pub fn new(start_year: i32, end_year: i32) -> Result<Self> {
        if start_year > end_year {
            return Err(CliError::Config(format!(
                "window {start_year}-{end_year} ends before it starts"
            )));
        }
        Ok(Window {
            start_year,
            end_year,
        })
    }

    /// Directory-safe label, `1981_2020`.
    pub fn slug(&self) -> String {
        format!("{}_{}", self.start_year, self.end_year)
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start_year, self.end_year)
    }
}

impl TryFrom<[i32; 2]> for Window {
    type Error = CliError;

    fn try_from(v: [i32; 2]) -> Result<Self> {
        Window::new(v[0], v[1])
    }
}

impl From<Window> for [i32; 2] {
    fn from(w: Window) -> Self {
        [w.start_year, w.end_year]
    }
}

impl FromStr for Window {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CliError::Config(format!("window {s:?} is not START-END"));
        let (a, b) = s.split_once(['-', ':']).ok_or_else(bad)?;
        Window::new(
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Holds `stations.csv` and one `<station_id>.csv` per station.
    pub data_dir: PathBuf,
    /// Region polygons as a GeoJSON FeatureCollection.
    pub regions_path: PathBuf,
    pub output_dir: PathBuf,
    /// Tenths of a millimetre.
    pub threshold: f64,
    pub windows: Vec<Window>,
    pub methods: Vec<Method>,
    pub return_periods: Vec<f64>,
    /// Root of every random stream (jitter, block sampling).
    pub seed: u64,
    pub c: f64,
    pub jitter_sd: f64,
    pub hausdorff_fraction: f64,
    pub hausdorff_pitch: f64,
    /// Minimum fraction of non-missing days in a window.
    pub min_coverage: f64,
    /// Minimum declustered exceedances in a window.
    pub min_exceedances: usize,
    pub kriging: KrigingOptions,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            data_dir: PathBuf::from("data"),
            regions_path: PathBuf::from("data/regions.geojson"),
            output_dir: PathBuf::from("out"),
            threshold: DEFAULT_THRESHOLD,
            windows: vec![
                Window::new(1921, 1960).unwrap(),
                Window::new(1951, 1990).unwrap(),
                Window::new(1981, 2020).unwrap(),
            ],
            methods: Method::ALL.to_vec(),
            return_periods: vec![25.0, 100.0, 500.0],
            seed: 0,
            c: DEFAULT_C,
            jitter_sd: DEFAULT_JITTER_SD,
            hausdorff_fraction: 0.5,
            hausdorff_pitch: DEFAULT_PITCH,
            min_coverage: 0.8,
            min_exceedances: 10,
            kriging: KrigingOptions::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: AnalysisConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.data_dir, &mut cfg.regions_path, &mut cfg.output_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.windows.is_empty() {
            return bad("no windows".into());
        }
        if self.windows.windows(2).any(|w| w[0] >= w[1]) {
            return bad("windows must be listed in increasing order without repeats".into());
        }
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if let Some(p) = self.return_periods.iter().find(|&&p| !(p >= 1.0)) {
            return bad(format!("return period {p} is below one year"));
        }
        if !(self.threshold > 0.0) {
            return bad(format!("threshold {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return bad(format!("min_coverage {}", self.min_coverage));
        }
        if !(self.hausdorff_fraction > 0.0 && self.hausdorff_fraction <= 1.0) {
            return bad(format!("hausdorff_fraction {}", self.hausdorff_fraction));
        }
        Ok(())
    }

    pub fn runs(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    /// Seed for stream `stream` of window `window_index`.
    pub fn derived_seed(&self, window_index: usize, stream: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((window_index as u64) << 8)
            .wrapping_add(stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_defaults_and_overrides() {
        let cfg = AnalysisConfig::from_toml_str(
            r#"
            windows = [[1981, 2020]]
            methods = ["pare", "kriging"]
            seed = 7
            [kriging]
            kind = "spherical"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.windows, vec![Window::new(1981, 2020).unwrap()]);
        assert_eq!(cfg.methods, vec![Method::Pare, Method::BlockKriging]);
        assert_eq!(cfg.return_periods, vec![25.0, 100.0, 500.0]);
        assert_eq!(cfg.threshold, 254.0);
        assert_eq!(cfg.kriging.n_bins, KrigingOptions::default().n_bins);
    }

    #[test]
    fn rejects_bad_windows_and_periods() {
        assert!(AnalysisConfig::from_toml_str("windows = [[1990, 1980]]").is_err());
        assert!(AnalysisConfig::from_toml_str("windows = [[1981, 2020], [1951, 1990]]").is_err());
        assert!(AnalysisConfig::from_toml_str("return_periods = [0.5]").is_err());
        assert!(AnalysisConfig::from_toml_str("unknown_key = 1").is_err());
    }

    #[test]
    fn window_parsing() {
        assert_eq!("1951-1990".parse::<Window>().unwrap(), Window::new(1951, 1990).unwrap());
        assert!("1951".parse::<Window>().is_err());
        assert_eq!(Window::new(1981, 2020).unwrap().slug(), "1981_2020");
    }
}
