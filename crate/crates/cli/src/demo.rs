//! Synthetic station network for trying the pipeline end to end. The rainfall
//! is a two-state Markov wet/dry chain with generalized Pareto wet-day depths.
//! It is not a model of any real climate.

use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use pare_core::extremes::Gpd;
use pare_core::geometry::{Point, Polygon, Projection, Region, RegionSet};
use pare_core::simulation::SYNTHETIC_REGIONS_GEOJSON;
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};
use crate::ingest::STATIONS_FILE;

pub const REGIONS_FILE: &str = "regions.geojson";
pub const CONFIG_FILE: &str = "config.toml";

/// Anchor of the demo layout in lon/lat degrees.
const ANCHOR: (f64, f64) = (-95.4, 29.8);
const P_WET_AFTER_DRY: f64 = 0.2;
const P_WET_AFTER_WET: f64 = 0.5;
const P_MISSING: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct DemoOptions {
    pub stations_per_region: usize,
    pub first_year: i32,
    pub last_year: i32,
    pub seed: u64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            stations_per_region: 8,
            first_year: 1915,
            last_year: 2020,
            seed: 1,
        }
    }
}

/// Wet-day depth distribution per region, tenths of a millimetre.
fn wet_day_gpd(region: usize) -> Gpd {
    match region % 3 {
        0 => Gpd::new(90.0, 0.12),
        1 => Gpd::new(100.0, 0.14),
        _ => Gpd::new(85.0, 0.10),
    }
}

/// Writes `regions.geojson`, `stations.csv`, one CSV per station and a
/// `config.toml` pointing at them into `dir`.
pub fn write_demo_dataset(dir: &Path, opts: &DemoOptions) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let planar = RegionSet::from_planar_geojson(SYNTHETIC_REGIONS_GEOJSON)?;
    let bb = planar.bbox();
    let centre = Point::new((bb.min.x + bb.max.x) / 2.0, (bb.min.y + bb.max.y) / 2.0);
    let proj = Projection::new(ANCHOR.0, ANCHOR.1);
    let shift = |p: Point| Point::new(p.x - centre.x, p.y - centre.y);
    let to_lonlat = |p: Point| proj.to_lonlat(shift(p));

    let recentred = RegionSet::new(
        planar
            .regions()
            .iter()
            .map(|r| {
                let parts = r
                    .parts
                    .iter()
                    .map(|poly| {
                        let ring = |pts: &[Point]| pts.iter().map(|&p| shift(p)).collect::<Vec<_>>();
                        Polygon::new(ring(poly.exterior()), poly.holes().iter().map(|h| ring(h)).collect())
                    })
                    .collect();
                Region::new(r.id.clone(), parts)
            })
            .collect(),
    )?;
    let geojson = recentred.to_geojson(&proj);
    let path = dir.join(REGIONS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&geojson)? + "\n").map_err(CliError::io(&path))?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut station_rows = String::from("station_id,lon,lat\n");
    let from = NaiveDate::from_ymd_opt(opts.first_year, 1, 1).expect("valid year");
    let to = NaiveDate::from_ymd_opt(opts.last_year, 12, 31).expect("valid year");
    let mut k = 0;
    for (j, region) in planar.regions().iter().enumerate() {
        let rb = region.bbox();
        for s in 0..opts.stations_per_region {
            let loc = loop {
                let p = Point::new(rng.gen_range(rb.min.x..rb.max.x), rng.gen_range(rb.min.y..rb.max.y));
                if planar.locate(p) == Some((j, false)) {
                    break p;
                }
            };
            k += 1;
            let id = format!("DEMO{k:03}");
            let (lon, lat) = to_lonlat(loc);
            station_rows.push_str(&format!("{id},{lon:.6},{lat:.6}\n"));
            // a few stations open late so coverage screening has work to do
            let start = if s == 0 {
                NaiveDate::from_ymd_opt(opts.first_year + 40, 1, 1).expect("valid year")
            } else {
                from
            };
            write_station(dir, &id, start, to, wet_day_gpd(j), &mut rng)?;
        }
    }
    let path = dir.join(STATIONS_FILE);
    fs::write(&path, station_rows).map_err(CliError::io(&path))?;

    let config = format!(
        "# Demo analysis over synthetic data.\n\
         data_dir = \".\"\n\
         regions_path = \"{REGIONS_FILE}\"\n\
         output_dir = \"out\"\n\
         seed = {}\n",
        opts.seed
    );
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config).map_err(CliError::io(&path))?;
    Ok(())
}

fn write_station(
    dir: &Path,
    id: &str,
    from: NaiveDate,
    to: NaiveDate,
    gpd: Gpd,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut body = String::from("date,prcp_tenths_mm\n");
    let mut wet = false;
    let mut day = from;
    while day <= to {
        let p = if wet { P_WET_AFTER_WET } else { P_WET_AFTER_DRY };
        wet = rng.gen::<f64>() < p;
        let depth = if wet { gpd.sample(rng).round().max(1.0) } else { 0.0 };
        // an outage every few decades, plus scattered missing days
        let outage = day.month() == 7 && day.year() % 23 == 0;
        if outage || rng.gen::<f64>() < P_MISSING {
            body.push_str(&format!("{day},\n"));
        } else {
            body.push_str(&format!("{day},{depth}\n"));
        }
        day = day.succ_opt().expect("date in range");
    }
    let path = dir.join(format!("{id}.csv"));
    fs::write(&path, body).map_err(CliError::io(&path))
}
