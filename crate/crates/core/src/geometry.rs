//! Planar polygon geometry, extended Hausdorff distances between regions, and
//! the distance, weight and indicator matrices used by the point-to-area model.
//!
//! All coordinates are planar and measured in miles. Longitude/latitude input
//! is projected with [`Projection`], a local equirectangular plane anchored at
//! the centre of the region set.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rstar::RTree;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default pitch (miles) of the point set used to discretize a region.
pub const DEFAULT_PITCH: f64 = 0.25;
/// Default within-region distance (miles).
pub const DEFAULT_C: f64 = 1.0;
/// Default standard deviation (miles) of the jitter added to the block matrix.
pub const DEFAULT_JITTER_SD: f64 = 0.1;

const EARTH_RADIUS_MILES: f64 = 3958.7613;
const BOUNDARY_EPS: f64 = 1e-9;
const MAX_JITTER_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("station {0} lies outside every region")]
    PointOutsideAllRegions(String),
    #[error("degenerate polygon in region {0}: zero area")]
    DegeneratePolygon(String),
    #[error("polygon in region {0} is self-intersecting")]
    SelfIntersecting(String),
    #[error("regions {0} and {1} overlap")]
    OverlappingRegions(String, String),
    #[error("duplicate region id {0}")]
    DuplicateRegionId(String),
    #[error("region set is empty")]
    EmptyRegionSet,
    #[error("quantile fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("discretization pitch must be positive, got {0}")]
    InvalidPitch(f64),
    #[error("within-region distance c = {c} must be positive and below the smallest between-region distance {min_off_diagonal}")]
    InvalidC { c: f64, min_off_diagonal: f64 },
    #[error("jitter standard deviation must be positive, got {0}")]
    InvalidJitter(f64),
    #[error("jitter left a non-positive distance after {0} attempts")]
    NonPositiveEntry(usize),
    #[error("zero distance at ({0}, {1})")]
    ZeroDistance(usize, usize),
    #[error("expected a {expected} distance matrix")]
    WrongMatrixKind { expected: &'static str },
    #[error("station assignment refers to {assigned} regions but the distance matrix has {matrix}")]
    DimensionMismatch { assigned: usize, matrix: usize },
    #[error("invalid GeoJSON: {0}")]
    GeoJson(String),
    #[error("station CSV: {0}")]
    StationCsv(String),
}

type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Local equirectangular projection from WGS84 degrees to miles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub lon0: f64,
    pub lat0: f64,
}

impl Projection {
    pub fn new(lon0: f64, lat0: f64) -> Self {
        Projection { lon0, lat0 }
    }

    pub fn to_plane(&self, lon: f64, lat: f64) -> Point {
        let k = EARTH_RADIUS_MILES * std::f64::consts::PI / 180.0;
        Point::new(
            k * self.lat0.to_radians().cos() * (lon - self.lon0),
            k * (lat - self.lat0),
        )
    }

    pub fn to_lonlat(&self, p: Point) -> (f64, f64) {
        let k = EARTH_RADIUS_MILES * std::f64::consts::PI / 180.0;
        (
            self.lon0 + p.x / (k * self.lat0.to_radians().cos()),
            self.lat0 + p.y / k,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Containment {
    Inside,
    Boundary,
    Outside,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    fn of(points: impl IntoIterator<Item = Point>) -> Self {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        BoundingBox { min, max }
    }

    fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min: Point::new(self.min.x.min(other.min.x), self.min.y.min(other.min.y)),
            max: Point::new(self.max.x.max(other.max.x), self.max.y.max(other.max.y)),
        }
    }

    fn intersects(&self, other: &BoundingBox) -> bool {
        self.min.x <= other.max.x
            && other.min.x <= self.max.x
            && self.min.y <= other.max.y
            && other.min.y <= self.max.y
    }
}

/// A simple polygon with optional holes. Rings are stored open (the closing
/// vertex is not repeated).
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    exterior: Vec<Point>,
    holes: Vec<Vec<Point>>,
}

fn open_ring(mut ring: Vec<Point>) -> Vec<Point> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

fn ring_signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let a = ring[i];
            let b = ring[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

fn ring_edges(ring: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    let n = ring.len();
    (0..n).map(move |i| (ring[i], ring[(i + 1) % n]))
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.distance(&a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.distance(&Point::new(a.x + t * dx, a.y + t * dy))
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// True when the open segments cross at a single interior point.
fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

impl Polygon {
    /// Builds a polygon from an exterior ring and holes. A repeated closing
    /// vertex is accepted and dropped.
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Self {
        Polygon {
            exterior: open_ring(exterior),
            holes: holes.into_iter().map(open_ring).collect(),
        }
    }

    pub fn rectangle(min: Point, max: Point) -> Self {
        Polygon::new(
            vec![
                min,
                Point::new(max.x, min.y),
                max,
                Point::new(min.x, max.y),
            ],
            Vec::new(),
        )
    }

    pub fn exterior(&self) -> &[Point] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<Point>] {
        &self.holes
    }

    fn rings(&self) -> impl Iterator<Item = &[Point]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(|h| h.as_slice()))
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.rings().flat_map(ring_edges)
    }

    pub fn area(&self) -> f64 {
        if self.exterior.len() < 3 {
            return 0.0;
        }
        let outer = ring_signed_area(&self.exterior).abs();
        let holes: f64 = self
            .holes
            .iter()
            .filter(|h| h.len() >= 3)
            .map(|h| ring_signed_area(h).abs())
            .sum();
        outer - holes
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::of(self.exterior.iter().copied())
    }

    pub fn contains(&self, p: Point) -> Containment {
        let mut inside = false;
        for ring in self.rings() {
            for (a, b) in ring_edges(ring) {
                if segment_distance(p, a, b) <= BOUNDARY_EPS {
                    return Containment::Boundary;
                }
                if (a.y > p.y) != (b.y > p.y) {
                    let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                    if p.x < x {
                        inside = !inside;
                    }
                }
            }
        }
        if inside {
            Containment::Inside
        } else {
            Containment::Outside
        }
    }

    fn validate(&self, id: &str) -> Result<()> {
        if self.exterior.len() < 3 || self.area() <= 0.0 {
            return Err(GeometryError::DegeneratePolygon(id.to_string()));
        }
        let edges: Vec<(Point, Point)> = self.edges().collect();
        for i in 0..edges.len() {
            for j in (i + 1)..edges.len() {
                let (a1, a2) = edges[i];
                let (b1, b2) = edges[j];
                if segments_cross(a1, a2, b1, b2) {
                    return Err(GeometryError::SelfIntersecting(id.to_string()));
                }
            }
        }
        Ok(())
    }
}

/// A named areal unit made of one or more polygons.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: String,
    pub parts: Vec<Polygon>,
}

impl Region {
    pub fn new(id: impl Into<String>, parts: Vec<Polygon>) -> Self {
        Region {
            id: id.into(),
            parts,
        }
    }

    pub fn area(&self) -> f64 {
        self.parts.iter().map(Polygon::area).sum()
    }

    pub fn bbox(&self) -> BoundingBox {
        self.parts
            .iter()
            .map(Polygon::bbox)
            .reduce(|a, b| a.union(&b))
            .expect("region has at least one polygon")
    }

    pub fn contains(&self, p: Point) -> Containment {
        let mut result = Containment::Outside;
        for part in &self.parts {
            match part.contains(p) {
                Containment::Inside => return Containment::Inside,
                Containment::Boundary => result = Containment::Boundary,
                Containment::Outside => {}
            }
        }
        result
    }

    pub fn covers(&self, p: Point) -> bool {
        self.contains(p) != Containment::Outside
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(GeometryError::DegeneratePolygon(self.id.clone()));
        }
        self.parts.iter().try_for_each(|p| p.validate(&self.id))
    }

    /// Grid points at integer multiples of `pitch` lying inside or on the
    /// boundary of the region.
    pub fn lattice_points(&self, pitch: f64) -> Vec<Point> {
        let bb = self.bbox();
        let i0 = (bb.min.x / pitch).floor() as i64;
        let i1 = (bb.max.x / pitch).ceil() as i64;
        let j0 = (bb.min.y / pitch).floor() as i64;
        let j1 = (bb.max.y / pitch).ceil() as i64;
        let mut out = Vec::new();
        for j in j0..=j1 {
            for i in i0..=i1 {
                let p = Point::new(i as f64 * pitch, j as f64 * pitch);
                if self.covers(p) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// Points every `pitch` miles (or closer) along every ring, vertices included.
    pub fn boundary_points(&self, pitch: f64) -> Vec<Point> {
        let mut out = Vec::new();
        for part in &self.parts {
            for (a, b) in part.edges() {
                let len = a.distance(&b);
                let steps = (len / pitch).ceil().max(1.0) as usize;
                for k in 0..steps {
                    let t = k as f64 / steps as f64;
                    out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
                }
            }
        }
        out
    }

    /// Areal point set used for Hausdorff distances: interior lattice plus
    /// boundary samples.
    pub fn discretize(&self, pitch: f64) -> Vec<Point> {
        let mut pts = self.lattice_points(pitch);
        pts.extend(self.boundary_points(pitch));
        pts
    }
}

/// Ordered, validated collection of non-overlapping regions.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    regions: Vec<Region>,
}

impl RegionSet {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        if regions.is_empty() {
            return Err(GeometryError::EmptyRegionSet);
        }
        let mut ids = HashSet::new();
        for r in &regions {
            if !ids.insert(r.id.clone()) {
                return Err(GeometryError::DuplicateRegionId(r.id.clone()));
            }
            r.validate()?;
        }
        for i in 0..regions.len() {
            for j in (i + 1)..regions.len() {
                if regions_overlap(&regions[i], &regions[j]) {
                    return Err(GeometryError::OverlappingRegions(
                        regions[i].id.clone(),
                        regions[j].id.clone(),
                    ));
                }
            }
        }
        Ok(RegionSet { regions })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn get(&self, i: usize) -> &Region {
        &self.regions[i]
    }

    pub fn ids(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.id.clone()).collect()
    }

    pub fn bbox(&self) -> BoundingBox {
        self.regions
            .iter()
            .map(Region::bbox)
            .reduce(|a, b| a.union(&b))
            .expect("non-empty region set")
    }

    /// Index of the region covering `p`. Boundary points shared by several
    /// regions go to the lowest index; the flag reports such a tie.
    pub fn locate(&self, p: Point) -> Option<(usize, bool)> {
        let mut hits = self
            .regions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.covers(p))
            .map(|(i, _)| i);
        let first = hits.next()?;
        Some((first, hits.next().is_some()))
    }

    /// Parses a GeoJSON FeatureCollection of Polygon/MultiPolygon features in
    /// lon/lat degrees, projecting onto a plane anchored at the bounding-box
    /// centre. Region ids come from the `region_id` property.
    pub fn from_geojson(text: &str) -> Result<(RegionSet, Projection)> {
        let raw = parse_geojson(text)?;
        let mut lon = (f64::INFINITY, f64::NEG_INFINITY);
        let mut lat = (f64::INFINITY, f64::NEG_INFINITY);
        for (_, polys) in &raw {
            for poly in polys {
                for ring in poly {
                    for &(x, y) in ring {
                        lon = (lon.0.min(x), lon.1.max(x));
                        lat = (lat.0.min(y), lat.1.max(y));
                    }
                }
            }
        }
        let proj = Projection::new((lon.0 + lon.1) / 2.0, (lat.0 + lat.1) / 2.0);
        let set = build_regions(raw, |x, y| proj.to_plane(x, y))?;
        Ok((set, proj))
    }

    /// Parses GeoJSON whose coordinates are already planar miles.
    pub fn from_planar_geojson(text: &str) -> Result<RegionSet> {
        build_regions(parse_geojson(text)?, Point::new)
    }

    /// Serializes back to lon/lat GeoJSON.
    pub fn to_geojson(&self, proj: &Projection) -> serde_json::Value {
        let ring = |r: &[Point]| {
            let mut coords: Vec<[f64; 2]> = r
                .iter()
                .map(|p| {
                    let (lo, la) = proj.to_lonlat(*p);
                    [lo, la]
                })
                .collect();
            if let Some(first) = coords.first().copied() {
                coords.push(first);
            }
            coords
        };
        let features: Vec<serde_json::Value> = self
            .regions
            .iter()
            .map(|r| {
                let polys: Vec<Vec<Vec<[f64; 2]>>> = r
                    .parts
                    .iter()
                    .map(|p| {
                        std::iter::once(ring(p.exterior()))
                            .chain(p.holes().iter().map(|h| ring(h)))
                            .collect()
                    })
                    .collect();
                serde_json::json!({
                    "type": "Feature",
                    "properties": { "region_id": r.id },
                    "geometry": { "type": "MultiPolygon", "coordinates": polys },
                })
            })
            .collect();
        serde_json::json!({ "type": "FeatureCollection", "features": features })
    }
}

fn regions_overlap(a: &Region, b: &Region) -> bool {
    if !a.bbox().intersects(&b.bbox()) {
        return false;
    }
    for pa in &a.parts {
        for pb in &b.parts {
            if !pa.bbox().intersects(&pb.bbox()) {
                continue;
            }
            for (a1, a2) in pa.edges() {
                for (b1, b2) in pb.edges() {
                    if segments_cross(a1, a2, b1, b2) {
                        return true;
                    }
                }
            }
            if pa.exterior().iter().any(|&v| pb.contains(v) == Containment::Inside)
                || pb.exterior().iter().any(|&v| pa.contains(v) == Containment::Inside)
            {
                return true;
            }
        }
    }
    false
}

type RawPolygon = Vec<Vec<(f64, f64)>>;

fn parse_geojson(text: &str) -> Result<Vec<(String, Vec<RawPolygon>)>> {
    let err = |m: &str| GeometryError::GeoJson(m.to_string());
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| GeometryError::GeoJson(e.to_string()))?;
    let features = value
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| err("expected a FeatureCollection"))?;

    let ring = |v: &serde_json::Value| -> Result<Vec<(f64, f64)>> {
        v.as_array()
            .ok_or_else(|| err("ring is not an array"))?
            .iter()
            .map(|c| {
                let c = c.as_array().ok_or_else(|| err("position is not an array"))?;
                match (c.first().and_then(|x| x.as_f64()), c.get(1).and_then(|y| y.as_f64())) {
                    (Some(x), Some(y)) => Ok((x, y)),
                    _ => Err(err("position needs two numbers")),
                }
            })
            .collect()
    };
    let polygon = |v: &serde_json::Value| -> Result<RawPolygon> {
        v.as_array()
            .ok_or_else(|| err("polygon is not an array of rings"))?
            .iter()
            .map(ring)
            .collect()
    };

    let mut out = Vec::with_capacity(features.len());
    for (k, feat) in features.iter().enumerate() {
        let id = match feat.get("properties").and_then(|p| p.get("region_id")) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(GeometryError::GeoJson(format!("feature {k} lacks region_id"))),
        };
        let geom = feat
            .get("geometry")
            .ok_or_else(|| err("feature without geometry"))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| err("geometry without coordinates"))?;
        let polys = match geom.get("type").and_then(|t| t.as_str()) {
            Some("Polygon") => vec![polygon(coords)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| err("MultiPolygon coordinates"))?
                .iter()
                .map(polygon)
                .collect::<Result<_>>()?,
            other => {
                return Err(GeometryError::GeoJson(format!(
                    "unsupported geometry type {other:?}"
                )))
            }
        };
        out.push((id, polys));
    }
    Ok(out)
}

fn build_regions(
    raw: Vec<(String, Vec<RawPolygon>)>,
    project: impl Fn(f64, f64) -> Point,
) -> Result<RegionSet> {
    let regions = raw
        .into_iter()
        .map(|(id, polys)| {
            let parts = polys
                .into_iter()
                .filter(|rings| !rings.is_empty())
                .map(|mut rings| {
                    let mut proj_ring =
                        |r: Vec<(f64, f64)>| r.into_iter().map(|(x, y)| project(x, y)).collect();
                    let exterior = proj_ring(rings.remove(0));
                    let holes = rings.into_iter().map(&mut proj_ring).collect();
                    Polygon::new(exterior, holes)
                })
                .collect();
            Region::new(id, parts)
        })
        .collect();
    RegionSet::new(regions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub location: Point,
}

impl Station {
    pub fn new(id: impl Into<String>, location: Point) -> Self {
        Station {
            id: id.into(),
            location,
        }
    }
}

/// Reads `station_id,lon,lat` rows and projects them.
pub fn read_stations_csv<R: std::io::Read>(reader: R, proj: &Projection) -> Result<Vec<Station>> {
    #[derive(Deserialize)]
    struct Row {
        station_id: String,
        lon: f64,
        lat: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| GeometryError::StationCsv(e.to_string()))?;
            Ok(Station::new(row.station_id, proj.to_plane(row.lon, row.lat)))
        })
        .collect()
}

/// Stations with their region assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct StationSet {
    stations: Vec<Station>,
    assignment: Vec<usize>,
    n_regions: usize,
    boundary_ties: Vec<String>,
}

impl StationSet {
    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn region_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    /// Stations that sat on a boundary shared by two or more regions.
    pub fn boundary_ties(&self) -> &[String] {
        &self.boundary_ties
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_regions];
        for &r in &self.assignment {
            counts[r] += 1;
        }
        counts
    }

    pub fn points(&self) -> Vec<Point> {
        self.stations.iter().map(|s| s.location).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.stations.iter().map(|s| s.id.clone()).collect()
    }

    /// Keeps the stations for which `keep` returns true, preserving order.
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> StationSet {
        let mut stations = Vec::new();
        let mut assignment = Vec::new();
        for i in 0..self.len() {
            if keep(i) {
                stations.push(self.stations[i].clone());
                assignment.push(self.assignment[i]);
            }
        }
        let ids: HashSet<&str> = stations.iter().map(|s| s.id.as_str()).collect();
        let boundary_ties = self
            .boundary_ties
            .iter()
            .filter(|t| ids.contains(t.as_str()))
            .cloned()
            .collect();
        StationSet {
            stations,
            assignment,
            n_regions: self.n_regions,
            boundary_ties,
        }
    }

    /// The n×r zero/one region indicator matrix.
    pub fn indicator_matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.len(), self.n_regions);
        for (i, &r) in self.assignment.iter().enumerate() {
            h[(i, r)] = 1.0;
        }
        h
    }
}

/// Maps every station to the region containing it.
pub fn assign_stations(stations: Vec<Station>, regions: &RegionSet) -> Result<StationSet> {
    let mut assignment = Vec::with_capacity(stations.len());
    let mut boundary_ties = Vec::new();
    for s in &stations {
        let (idx, tie) = regions
            .locate(s.location)
            .ok_or_else(|| GeometryError::PointOutsideAllRegions(s.id.clone()))?;
        if tie {
            log::warn!(
                "station {} lies on a shared region boundary; assigned to region {}",
                s.id,
                regions.get(idx).id
            );
            boundary_ties.push(s.id.clone());
        }
        assignment.push(idx);
    }
    Ok(StationSet {
        stations,
        assignment,
        n_regions: regions.len(),
        boundary_ties,
    })
}

/// Linear-interpolation quantile (R type 7) of an unsorted sample.
pub fn quantile(values: &mut [f64], f: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let h = (values.len() - 1) as f64 * f;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

fn directed_quantile(from: &[Point], to: &RTree<[f64; 2]>, f: f64) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|p| {
            let q = to
                .nearest_neighbor(&[p.x, p.y])
                .expect("non-empty target point set");
            p.distance(&Point::new(q[0], q[1]))
        })
        .collect();
    quantile(&mut d, f)
}

/// Extended Hausdorff distance between two point sets: the larger of the two
/// directed `f`-quantiles of point-to-set distances. `f = 1` is the classical
/// Hausdorff distance.
pub fn extended_hausdorff_points(a: &[Point], b: &[Point], f: f64) -> Result<f64> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(GeometryError::InvalidFraction(f));
    }
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::DegeneratePolygon("<empty point set>".into()));
    }
    let tree = |pts: &[Point]| RTree::bulk_load(pts.iter().map(|p| [p.x, p.y]).collect());
    let ab = directed_quantile(a, &tree(b), f);
    let ba = directed_quantile(b, &tree(a), f);
    Ok(ab.max(ba))
}

/// Extended Hausdorff distance between two regions discretized at `pitch`.
pub fn extended_hausdorff(a: &Region, b: &Region, f: f64, pitch: f64) -> Result<f64> {
    if !(pitch > 0.0) {
        return Err(GeometryError::InvalidPitch(pitch));
    }
    if !(f > 0.0 && f <= 1.0) {
        return Err(GeometryError::InvalidFraction(f));
    }
    for r in [a, b] {
        if r.area() <= 0.0 {
            return Err(GeometryError::DegeneratePolygon(r.id.clone()));
        }
    }
    extended_hausdorff_points(&a.discretize(pitch), &b.discretize(pitch), f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    RegionHausdorff,
    Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub entries: DMatrix<f64>,
    pub kind: DistanceKind,
    pub labels: Vec<String>,
    /// Within-region distance, for block matrices.
    pub c: Option<f64>,
    /// Jitter standard deviation, once jittered.
    pub jitter_sd: Option<f64>,
}

impl DistanceMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries == self.entries.transpose()
    }

    /// Smallest off-diagonal entry; `None` for a 1×1 matrix.
    pub fn min_off_diagonal(&self) -> Option<f64> {
        let n = self.dim();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.entries[(i, j)])
            .reduce(f64::min)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        write_labelled_matrix(w, &self.labels, &self.entries)
    }
}

fn write_labelled_matrix<W: std::io::Write>(
    w: W,
    labels: &[String],
    m: &DMatrix<f64>,
) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut row = vec![labels[i].clone()];
        row.extend((0..m.ncols()).map(|j| m[(i, j)].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Pairwise extended Hausdorff distances between regions.
pub fn region_distance_matrix(regions: &RegionSet, f: f64, pitch: f64) -> Result<DistanceMatrix> {
    use rayon::prelude::*;

    if !(pitch > 0.0) {
        return Err(GeometryError::InvalidPitch(pitch));
    }
    if !(f > 0.0 && f <= 1.0) {
        return Err(GeometryError::InvalidFraction(f));
    }
    let r = regions.len();
    let clouds: Vec<Vec<Point>> = regions
        .regions()
        .iter()
        .map(|reg| {
            if reg.area() <= 0.0 {
                Err(GeometryError::DegeneratePolygon(reg.id.clone()))
            } else {
                Ok(reg.discretize(pitch))
            }
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..r)
        .flat_map(|i| ((i + 1)..r).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| extended_hausdorff_points(&clouds[i], &clouds[j], f))
        .collect::<Result<_>>()?;
    let mut entries = DMatrix::zeros(r, r);
    for (&(i, j), &d) in pairs.iter().zip(&values) {
        entries[(i, j)] = d;
        entries[(j, i)] = d;
    }
    Ok(DistanceMatrix {
        entries,
        kind: DistanceKind::RegionHausdorff,
        labels: regions.ids(),
        c: None,
        jitter_sd: None,
    })
}

/// Expands a region distance matrix to stations: cross-region pairs take the
/// region distance, same-region pairs (including the diagonal) take `c`.
pub fn block_distance_matrix(
    region_d: &DistanceMatrix,
    stations: &StationSet,
    c: f64,
) -> Result<DistanceMatrix> {
    if region_d.kind != DistanceKind::RegionHausdorff {
        return Err(GeometryError::WrongMatrixKind {
            expected: "region_hausdorff",
        });
    }
    if stations.n_regions() != region_d.dim() {
        return Err(GeometryError::DimensionMismatch {
            assigned: stations.n_regions(),
            matrix: region_d.dim(),
        });
    }
    let min_off = region_d.min_off_diagonal().unwrap_or(f64::INFINITY);
    if !(c > 0.0 && c < min_off) {
        return Err(GeometryError::InvalidC {
            c,
            min_off_diagonal: min_off,
        });
    }
    let n = stations.len();
    let entries = DMatrix::from_fn(n, n, |i, j| {
        let (ri, rj) = (stations.region_of(i), stations.region_of(j));
        if ri == rj {
            c
        } else {
            region_d.entries[(ri, rj)]
        }
    });
    Ok(DistanceMatrix {
        entries,
        kind: DistanceKind::Block,
        labels: stations.ids(),
        c: Some(c),
        jitter_sd: None,
    })
}

/// Adds Normal(0, sd) noise to the lower triangle (diagonal included) and
/// mirrors it into the upper triangle. Draws are repeated, up to a bounded
/// number of attempts, if any entry would become non-positive.
pub fn jitter_symmetrize(d: &DistanceMatrix, sd: f64, seed: u64) -> Result<DistanceMatrix> {
    if !(sd > 0.0) {
        return Err(GeometryError::InvalidJitter(sd));
    }
    let normal = Normal::new(0.0, sd).map_err(|_| GeometryError::InvalidJitter(sd))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = d.dim();
    for _ in 0..MAX_JITTER_ATTEMPTS {
        let mut entries = d.entries.clone();
        let mut ok = true;
        for i in 0..n {
            for j in 0..=i {
                let v = d.entries[(i, j)] + normal.sample(&mut rng);
                if v <= 0.0 {
                    ok = false;
                }
                entries[(i, j)] = v;
                entries[(j, i)] = v;
            }
        }
        if ok {
            return Ok(DistanceMatrix {
                entries,
                kind: d.kind,
                labels: d.labels.clone(),
                c: d.c,
                jitter_sd: Some(sd),
            });
        }
    }
    Err(GeometryError::NonPositiveEntry(MAX_JITTER_ATTEMPTS))
}

/// Inverse-distance spatial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub entries: DMatrix<f64>,
    pub labels: Vec<String>,
    pub jitter_sd: Option<f64>,
    pub c: Option<f64>,
}

impl WeightMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        write_labelled_matrix(w, &self.labels, &self.entries)
    }
}

/// Element-wise reciprocal of a distance matrix. When the within-region
/// distance is not 1 the result is divided by its largest entry.
pub fn inverse_distance_weights(d: &DistanceMatrix) -> Result<WeightMatrix> {
    let n = d.dim();
    for i in 0..n {
        for j in 0..n {
            if !(d.entries[(i, j)] > 0.0) {
                return Err(GeometryError::ZeroDistance(i, j));
            }
        }
    }
    let mut entries = d.entries.map(|v| 1.0 / v);
    if d.c.is_some_and(|c| c != 1.0) {
        let max = entries.max();
        entries /= max;
    }
    Ok(WeightMatrix {
        entries,
        labels: d.labels.clone(),
        jitter_sd: d.jitter_sd,
        c: d.c,
    })
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}
