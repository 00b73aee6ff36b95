//! Regional max baseline: the day-wise maximum over a region's stations,
//! modeled as a single univariate peaks-over-threshold series.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimates::{Method, RegionEstimate, RegionEstimates};
use crate::extremes::{
    decluster, exceedances, fit_gpd, DailySeries, ExtremesError, FitOptions, GpdFit,
};
use crate::geometry::StationSet;

#[derive(Debug, Error)]
pub enum RegionalMaxError {
    #[error("region {0} has no stations")]
    EmptyRegion(String),
    #[error("panel does not match stations: {0}")]
    PanelMismatch(String),
    #[error("region {region}: {source}")]
    Extremes {
        region: String,
        #[source]
        source: ExtremesError,
    },
}

type Result<T> = std::result::Result<T, RegionalMaxError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionalSeries {
    pub region_id: String,
    pub start: NaiveDate,
    /// Day-wise maximum in tenths of a millimetre; `None` when no station reported.
    pub max_depths: Vec<Option<f64>>,
    /// Stations reporting on each day.
    pub contributing_counts: Vec<usize>,
}

impl RegionalSeries {
    pub fn len(&self) -> usize {
        self.max_depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.max_depths.is_empty()
    }

    pub fn to_daily_series(&self) -> DailySeries {
        DailySeries::new(self.region_id.clone(), self.start, self.max_depths.clone())
    }
}

/// Consolidates `panel` (one series per station, in `stations` order) into one
/// day-wise maximum series per region. Records are aligned on the calendar
/// over the union of their date ranges.
pub fn regional_max_series(
    panel: &[DailySeries],
    stations: &StationSet,
    region_ids: &[String],
) -> Result<Vec<RegionalSeries>> {
    if panel.len() != stations.len() {
        return Err(RegionalMaxError::PanelMismatch(format!(
            "{} series for {} stations",
            panel.len(),
            stations.len()
        )));
    }
    if region_ids.len() != stations.n_regions() {
        return Err(RegionalMaxError::PanelMismatch(format!(
            "{} region ids for {} regions",
            region_ids.len(),
            stations.n_regions()
        )));
    }
    for (s, st) in panel.iter().zip(stations.stations()) {
        if s.station_id != st.id {
            return Err(RegionalMaxError::PanelMismatch(format!(
                "series {} in the slot of station {}",
                s.station_id, st.id
            )));
        }
    }
    let counts = stations.counts();
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(RegionalMaxError::EmptyRegion(region_ids[j].clone()));
    }

    let nonempty = || panel.iter().filter(|s| !s.is_empty());
    let from = nonempty().map(|s| s.start).min();
    let to = nonempty().filter_map(|s| s.end()).max();
    let (from, to) = match (from, to) {
        (Some(a), Some(b)) => (a, b),
        _ => (panel.first().map(|s| s.start).unwrap_or_default(), NaiveDate::MIN),
    };
    let len = ((to - from).num_days() + 1).max(0) as usize;

    let mut out: Vec<RegionalSeries> = region_ids
        .iter()
        .map(|id| RegionalSeries {
            region_id: id.clone(),
            start: from,
            max_depths: vec![None; len],
            contributing_counts: vec![0; len],
        })
        .collect();
    for (i, s) in panel.iter().enumerate() {
        let r = &mut out[stations.region_of(i)];
        let offset = (s.start - from).num_days().max(0) as usize;
        for (k, d) in s.depths.iter().enumerate() {
            let Some(v) = *d else { continue };
            let day = offset + k;
            r.contributing_counts[day] += 1;
            r.max_depths[day] = Some(r.max_depths[day].map_or(v, |m: f64| m.max(v)));
        }
    }
    Ok(out)
}

/// Fits each consolidated series with the GPD and computes return levels.
/// With `decluster_first` the maximum series is declustered before the
/// exceedances are taken.
pub fn regional_max_fit(
    series: &[RegionalSeries],
    threshold: f64,
    periods: &[f64],
    decluster_first: bool,
    opts: &FitOptions,
) -> Result<(Vec<GpdFit>, RegionEstimates)> {
    let mut fits = Vec::with_capacity(series.len());
    let mut estimates = Vec::with_capacity(series.len());
    for s in series {
        let wrap = |source| RegionalMaxError::Extremes {
            region: s.region_id.clone(),
            source,
        };
        let daily = s.to_daily_series();
        let daily = if decluster_first { decluster(&daily) } else { daily };
        let ex = exceedances(&daily, threshold);
        let fit = fit_gpd(&ex.values, threshold, ex.n_days, opts).map_err(wrap)?;
        let est = RegionEstimate::new(s.region_id.clone(), fit.params(), fit.covariance(), periods)
            .map_err(wrap)?;
        fits.push(fit);
        estimates.push(est);
    }
    Ok((
        fits,
        RegionEstimates {
            method: Method::RegionalMax,
            estimates,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extremes::{fit_series, Gpd};
    use crate::geometry::{assign_stations, Point, Polygon, Region, RegionSet, Station};
    use rand::distributions::Distribution;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2000, 1, d).unwrap()
    }

    fn two_regions() -> RegionSet {
        RegionSet::new(vec![
            Region::new("A", vec![Polygon::rectangle(Point::new(0.0, 0.0), Point::new(1.0, 1.0))]),
            Region::new("B", vec![Polygon::rectangle(Point::new(2.0, 0.0), Point::new(3.0, 1.0))]),
        ])
        .unwrap()
    }

    fn station_set(locs: &[(&str, f64)]) -> StationSet {
        let st = locs
            .iter()
            .map(|(id, x)| Station::new(*id, Point::new(*x, 0.5)))
            .collect();
        assign_stations(st, &two_regions()).unwrap()
    }

    fn ids() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    #[test]
    fn two_station_example() {
        let stations = station_set(&[("s1", 0.3), ("s2", 0.7), ("s3", 2.5)]);
        let panel = vec![
            DailySeries::from_values("s1", day(1), &[3.0, 7.0]),
            DailySeries::from_values("s2", day(1), &[5.0, 2.0]),
            DailySeries::from_values("s3", day(1), &[1.0, 1.0]),
        ];
        let rs = regional_max_series(&panel, &stations, &ids()).unwrap();
        assert_eq!(rs[0].max_depths, vec![Some(5.0), Some(7.0)]);
        assert_eq!(rs[0].contributing_counts, vec![2, 2]);
        assert_eq!(rs[1].max_depths, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn missing_only_when_all_missing_and_dates_align() {
        let stations = station_set(&[("s1", 0.3), ("s2", 0.7), ("s3", 2.5)]);
        let panel = vec![
            DailySeries::new("s1", day(1), vec![Some(3.0), None, None]),
            DailySeries::new("s2", day(2), vec![Some(4.0), None, Some(9.0)]),
            DailySeries::from_values("s3", day(1), &[0.0]),
        ];
        let rs = regional_max_series(&panel, &stations, &ids()).unwrap();
        assert_eq!(rs[0].start, day(1));
        assert_eq!(rs[0].max_depths, vec![Some(3.0), Some(4.0), None, Some(9.0)]);
        assert_eq!(rs[0].contributing_counts, vec![1, 1, 0, 1]);
        assert_eq!(rs[1].max_depths, vec![Some(0.0), None, None, None]);
    }

    #[test]
    fn empty_region_is_an_error() {
        let stations = station_set(&[("s1", 0.3)]);
        let panel = vec![DailySeries::from_values("s1", day(1), &[1.0])];
        let err = regional_max_series(&panel, &stations, &ids()).unwrap_err();
        assert!(matches!(err, RegionalMaxError::EmptyRegion(ref r) if r == "B"));
    }

    #[test]
    fn panel_order_must_match_stations() {
        let stations = station_set(&[("s1", 0.3), ("s3", 2.5)]);
        let panel = vec![
            DailySeries::from_values("s3", day(1), &[1.0]),
            DailySeries::from_values("s1", day(1), &[1.0]),
        ];
        assert!(matches!(
            regional_max_series(&panel, &stations, &ids()),
            Err(RegionalMaxError::PanelMismatch(_))
        ));
    }

    fn random_panel(rng: &mut ChaCha8Rng, ids: &[&str], len: usize) -> Vec<DailySeries> {
        let gpd = Gpd::new(200.0, 0.15);
        ids.iter()
            .map(|id| {
                let depths = (0..len)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        if u < 0.05 {
                            None
                        } else if u < 0.3 {
                            Some(gpd.sample(rng))
                        } else {
                            Some(0.0)
                        }
                    })
                    .collect();
                DailySeries::new(*id, day(1), depths)
            })
            .collect()
    }

    #[test]
    fn dominates_every_member_day_wise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stations = station_set(&[("s1", 0.2), ("s2", 0.5), ("s3", 0.8), ("s4", 2.5)]);
        let panel = random_panel(&mut rng, &["s1", "s2", "s3", "s4"], 500);
        let rs = regional_max_series(&panel, &stations, &ids()).unwrap();
        for (i, s) in panel.iter().enumerate() {
            let r = &rs[stations.region_of(i)];
            for (k, d) in s.depths.iter().enumerate() {
                if let Some(v) = d {
                    assert!(r.max_depths[k].unwrap() >= *v);
                }
            }
        }
    }

    #[test]
    fn adding_a_station_weakly_increases_the_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = station_set(&[("s1", 0.2), ("s2", 0.5), ("s4", 2.5)]);
        let panel = random_panel(&mut rng, &["s1", "s2", "s4"], 400);
        let sub = full.subset(|i| i != 1);
        let sub_panel = vec![panel[0].clone(), panel[2].clone()];
        let big = regional_max_series(&panel, &full, &ids()).unwrap();
        let small = regional_max_series(&sub_panel, &sub, &ids()).unwrap();
        for k in 0..400 {
            if let Some(v) = small[0].max_depths[k] {
                assert!(big[0].max_depths[k].unwrap() >= v);
            }
        }
    }

    #[test]
    fn single_station_region_matches_univariate_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stations = station_set(&[("s1", 0.5), ("s4", 2.5)]);
        let panel = random_panel(&mut rng, &["s1", "s4"], 4000);
        let rs = regional_max_series(&panel, &stations, &ids()).unwrap();
        let opts = FitOptions::default();
        let (fits, est) = regional_max_fit(&rs, 254.0, &[25.0, 100.0], true, &opts).unwrap();
        assert_eq!(est.method, Method::RegionalMax);
        for (j, s) in panel.iter().enumerate() {
            let direct = fit_series(s, 254.0, &opts).unwrap();
            assert_eq!(fits[j].scale, direct.scale);
            assert_eq!(fits[j].shape, direct.shape);
            assert_eq!(fits[j].rate, direct.rate);
            assert_eq!(fits[j].n_days, direct.n_days);
        }
    }
}
