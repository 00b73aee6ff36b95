use pare_core::extremes::{decluster, exceedances, fit_gpd, ExtremesError, FitOptions, GpdFit};
use pare_core::geometry::{
    assign_stations, block_distance_matrix, inverse_distance_weights, jitter_symmetrize,
    region_distance_matrix, DistanceMatrix, Projection, RegionSet, StationSet, WeightMatrix,
};
use pare_core::kriging::{krige_to_regions, BlockMethod, KrigingReport};
use pare_core::pare::{pare_regions, PareParameterFits};
use pare_core::regionalmax::{regional_max_fit, regional_max_series};
use pare_core::{Method, RegionEstimates};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AnalysisConfig, Window};
use crate::error::{CliError, Result};
use crate::ingest::{ingest, Dataset};

const JITTER_STREAM: u64 = 0;
const BLOCK_STREAM: u64 = 1;

/// Regions, stations and records loaded for one analysis.
#[derive(Clone, Debug)]
pub struct Study {
    pub config: AnalysisConfig,
    pub regions: RegionSet,
    pub projection: Projection,
    pub data: Dataset,
    /// Every ingested station with its region.
    pub stations: StationSet,
    /// Region extended-Hausdorff distances, present when PARE is requested.
    pub region_distances: Option<DistanceMatrix>,
}

impl Study {
    pub fn load(config: AnalysisConfig) -> Result<Self> {
        config.validate()?;
        let path = &config.regions_path;
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let (regions, projection) = RegionSet::from_geojson(&text)?;
        let data = ingest(&config.data_dir, &projection)?;
        let stations = assign_stations(data.stations.clone(), &regions)?;
        let region_distances = if config.runs(Method::Pare) {
            Some(region_distance_matrix(
                &regions,
                config.hausdorff_fraction,
                config.hausdorff_pitch,
            )?)
        } else {
            None
        };
        Ok(Study {
            config,
            regions,
            projection,
            data,
            stations,
            region_distances,
        })
    }

    pub fn region_ids(&self) -> Vec<String> {
        self.regions.ids()
    }
}

/// Per-station screening and fit for one window.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationRecord {
    pub station_id: String,
    pub region_id: String,
    pub days_present: usize,
    pub coverage: f64,
    pub n_exceed: usize,
    /// Why the station was left out, if it was.
    pub excluded: Option<String>,
    pub fit: Option<GpdFit>,
}

#[derive(Clone, Debug)]
pub struct WindowResult {
    pub window: Window,
    pub jitter_seed: u64,
    pub block_seed: u64,
    pub stations: Vec<StationRecord>,
    pub weights: Option<WeightMatrix>,
    pub pare: Option<PareParameterFits>,
    pub kriging: Option<KrigingReport>,
    pub regional_max_fits: Option<Vec<GpdFit>>,
    /// One entry per method run, in [`Method::ALL`] order.
    pub estimates: Vec<RegionEstimates>,
}

impl WindowResult {
    pub fn n_included(&self) -> usize {
        self.stations.iter().filter(|s| s.excluded.is_none()).count()
    }
}

/// Screens and fits stations for `window`, then runs `methods`.
///
/// A station is used when at least `min_coverage` of the window's days are
/// present and its declustered record has at least `min_exceedances`
/// exceedances of the threshold.
pub fn run_window(
    study: &Study,
    index: usize,
    window: Window,
    methods: &[Method],
) -> Result<WindowResult> {
    let cfg = &study.config;
    let ids = study.region_ids();
    let opts = FitOptions {
        min_exceedances: cfg.min_exceedances,
        ..FitOptions::default()
    };

    let mut records = Vec::with_capacity(study.stations.len());
    let mut windowed = Vec::with_capacity(study.stations.len());
    for (i, series) in study.data.series.iter().enumerate() {
        let w = series.window(window.start_year, window.end_year);
        let days_present = w.n_present();
        let coverage = days_present as f64 / w.len() as f64;
        let ex = exceedances(&decluster(&w), cfg.threshold);
        let mut rec = StationRecord {
            station_id: series.station_id.clone(),
            region_id: ids[study.stations.region_of(i)].clone(),
            days_present,
            coverage,
            n_exceed: ex.values.len(),
            excluded: None,
            fit: None,
        };
        if coverage < cfg.min_coverage {
            rec.excluded = Some(format!("coverage {coverage:.3} below {}", cfg.min_coverage));
        } else if ex.values.len() < cfg.min_exceedances {
            rec.excluded = Some(format!(
                "{} exceedances, {} required",
                ex.values.len(),
                cfg.min_exceedances
            ));
        } else {
            match fit_gpd(&ex.values, cfg.threshold, ex.n_days, &opts) {
                Ok(fit) => rec.fit = Some(fit),
                Err(e @ ExtremesError::NonConvergence(_)) => {
                    log::warn!("window {window}: station {} left out: {e}", rec.station_id);
                    rec.excluded = Some(e.to_string());
                }
                Err(source) => {
                    return Err(CliError::Extremes {
                        context: format!("window {window}: station {}", rec.station_id),
                        source,
                    })
                }
            }
        }
        records.push(rec);
        windowed.push(w);
    }

    let keep: Vec<bool> = records.iter().map(|r| r.fit.is_some()).collect();
    let used = study.stations.subset(|i| keep[i]);
    if let Some(j) = used.counts().iter().position(|&c| c == 0) {
        return Err(CliError::InsufficientData {
            window: window.to_string(),
            region: ids[j].clone(),
        });
    }
    let fits: Vec<GpdFit> = records.iter().filter_map(|r| r.fit.clone()).collect();
    let used_series: Vec<_> = windowed
        .into_iter()
        .zip(&keep)
        .filter_map(|(s, &k)| k.then_some(s))
        .collect();

    let mut result = WindowResult {
        window,
        jitter_seed: cfg.derived_seed(index, JITTER_STREAM),
        block_seed: cfg.derived_seed(index, BLOCK_STREAM),
        stations: records,
        weights: None,
        pare: None,
        kriging: None,
        regional_max_fits: None,
        estimates: Vec::new(),
    };
    let periods = &cfg.return_periods;
    for m in Method::ALL.into_iter().filter(|m| methods.contains(m)) {
        match m {
            Method::Pare => {
                let region_d = match &study.region_distances {
                    Some(d) => d.clone(),
                    None => region_distance_matrix(
                        &study.regions,
                        cfg.hausdorff_fraction,
                        cfg.hausdorff_pitch,
                    )?,
                };
                let block = block_distance_matrix(&region_d, &used, cfg.c)?;
                let jittered = jitter_symmetrize(&block, cfg.jitter_sd, result.jitter_seed)?;
                let weights = inverse_distance_weights(&jittered)?;
                let (fitted, est) =
                    pare_regions(&fits, &used, &weights, &ids, cfg.threshold, periods).map_err(
                        |source| CliError::Pare {
                            window: window.to_string(),
                            source,
                        },
                    )?;
                result.weights = Some(weights);
                result.pare = Some(fitted);
                result.estimates.push(est);
            }
            Method::BlockKriging => {
                let mut kopts = cfg.kriging.clone();
                if let BlockMethod::Random { n_samples, .. } = kopts.block {
                    kopts.block = BlockMethod::Random {
                        n_samples,
                        seed: result.block_seed,
                    };
                }
                let (est, report) =
                    krige_to_regions(&fits, &used, &study.regions, cfg.threshold, periods, &kopts)
                        .map_err(|source| CliError::Kriging {
                            window: window.to_string(),
                            source,
                        })?;
                result.kriging = Some(report);
                result.estimates.push(est);
            }
            Method::RegionalMax => {
                let rm_err = |source| CliError::RegionalMax {
                    window: window.to_string(),
                    source,
                };
                let series = regional_max_series(&used_series, &used, &ids).map_err(rm_err)?;
                let (rfits, est) =
                    regional_max_fit(&series, cfg.threshold, periods, true, &opts).map_err(rm_err)?;
                result.regional_max_fits = Some(rfits);
                result.estimates.push(est);
            }
        }
    }
    Ok(result)
}

/// Runs every configured window in parallel; results keep window order.
pub fn run_windows(study: &Study, methods: &[Method]) -> Result<Vec<WindowResult>> {
    study
        .config
        .windows
        .par_iter()
        .enumerate()
        .map(|(i, &w)| run_window(study, i, w, methods))
        .collect()
}
