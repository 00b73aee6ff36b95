//! Daily rainfall series, declustering, generalized Pareto peaks-over-threshold
//! fitting and return levels.
//!
//! Depths are carried in tenths of a millimetre throughout; return levels are
//! reported in inches (254 tenths of a millimetre per inch).

use chrono::{Datelike, NaiveDate};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TENTHS_MM_PER_INCH: f64 = 254.0;
pub const DAYS_PER_YEAR: f64 = 365.25;
/// One inch, in tenths of a millimetre.
pub const DEFAULT_THRESHOLD: f64 = 254.0;
pub const DEFAULT_MIN_EXCEEDANCES: usize = 10;
pub const SHAPE_BOUNDS: (f64, f64) = (-0.5, 1.0);

const EXPONENTIAL_SHAPE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ExtremesError {
    #[error("{found} exceedances, at least {required} required")]
    TooFewExceedances { found: usize, required: usize },
    #[error("GPD likelihood maximization did not converge: {0}")]
    NonConvergence(String),
    #[error("return period {period} years gives {expected:.3} expected exceedances; need more than one")]
    SubAnnualReturn { period: f64, expected: f64 },
    #[error("return period must be at least one year, got {0}")]
    InvalidReturnPeriod(f64),
    #[error("{file}: line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
}

type Result<T> = std::result::Result<T, ExtremesError>;

/// One station's contiguous daily record. `None` marks a missing day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub station_id: String,
    pub start: NaiveDate,
    pub depths: Vec<Option<f64>>,
}

impl DailySeries {
    pub fn new(station_id: impl Into<String>, start: NaiveDate, depths: Vec<Option<f64>>) -> Self {
        DailySeries {
            station_id: station_id.into(),
            start,
            depths,
        }
    }

    /// Series with no missing days.
    pub fn from_values(station_id: impl Into<String>, start: NaiveDate, values: &[f64]) -> Self {
        Self::new(station_id, start, values.iter().map(|&v| Some(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn end(&self) -> Option<NaiveDate> {
        (!self.is_empty()).then(|| self.date(self.len() - 1))
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        self.start + chrono::Days::new(i as u64)
    }

    pub fn n_present(&self) -> usize {
        self.depths.iter().filter(|d| d.is_some()).count()
    }

    /// Re-indexes the record onto `[from, to]`, padding with missing days.
    pub fn slice_dates(&self, from: NaiveDate, to: NaiveDate) -> DailySeries {
        let len = (to - from).num_days() + 1;
        let offset = (from - self.start).num_days();
        let depths = (0..len.max(0))
            .map(|k| {
                let idx = offset + k;
                if idx >= 0 && (idx as usize) < self.depths.len() {
                    self.depths[idx as usize]
                } else {
                    None
                }
            })
            .collect();
        DailySeries::new(self.station_id.clone(), from, depths)
    }

    /// The calendar years `start_year..=end_year`.
    pub fn window(&self, start_year: i32, end_year: i32) -> DailySeries {
        let from = NaiveDate::from_ymd_opt(start_year, 1, 1).expect("valid year");
        let to = NaiveDate::from_ymd_opt(end_year, 12, 31).expect("valid year");
        self.slice_dates(from, to)
    }

    pub fn first_year(&self) -> i32 {
        self.start.year()
    }
}

/// Reads a station file with header `date,prcp_tenths_mm`. Empty depth
/// fields are missing days; calendar gaps are filled as missing.
pub fn read_series_csv<R: std::io::Read>(
    reader: R,
    station_id: &str,
    file: &str,
) -> Result<DailySeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let parse_err = |line: u64, message: String| ExtremesError::Parse {
        file: file.to_string(),
        line,
        message,
    };
    let mut start: Option<NaiveDate> = None;
    let mut last: Option<NaiveDate> = None;
    let mut depths: Vec<Option<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let date_field = rec.get(0).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_field, "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("bad date {date_field:?}: {e}")))?;
        if let Some(prev) = last {
            if date <= prev {
                return Err(parse_err(
                    line,
                    format!("date {date} does not follow {prev}"),
                ));
            }
            for _ in 1..(date - prev).num_days() {
                depths.push(None);
            }
        } else {
            start = Some(date);
        }
        let value = match rec.get(1).unwrap_or("") {
            "" => None,
            s => {
                let v: f64 = s
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad depth {s:?}")))?;
                if !(v >= 0.0) {
                    return Err(parse_err(line, format!("negative depth {v}")));
                }
                Some(v)
            }
        };
        depths.push(value);
        last = Some(date);
    }
    let start = start.unwrap_or_else(|| NaiveDate::from_ymd_opt(1900, 1, 1).unwrap());
    Ok(DailySeries::new(station_id, start, depths))
}

/// Keeps only the largest day of every run of consecutive nonzero days (the
/// earliest on ties). Missing days end a run.
pub fn decluster_values(depths: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut out = depths.to_vec();
    let mut i = 0;
    while i < out.len() {
        if !matches!(out[i], Some(v) if v > 0.0) {
            i += 1;
            continue;
        }
        let run_start = i;
        let mut best = i;
        while i < out.len() {
            match out[i] {
                Some(v) if v > 0.0 => {
                    if v > out[best].unwrap() {
                        best = i;
                    }
                    i += 1;
                }
                _ => break,
            }
        }
        for (k, slot) in out.iter_mut().enumerate().take(i).skip(run_start) {
            if k != best {
                *slot = Some(0.0);
            }
        }
    }
    out
}

pub fn decluster(series: &DailySeries) -> DailySeries {
    DailySeries::new(
        series.station_id.clone(),
        series.start,
        decluster_values(&series.depths),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exceedances {
    /// Depths strictly above the threshold, in date order.
    pub values: Vec<f64>,
    /// Non-missing days, the rate denominator.
    pub n_days: usize,
}

pub fn exceedances(series: &DailySeries, threshold: f64) -> Exceedances {
    Exceedances {
        values: series
            .depths
            .iter()
            .flatten()
            .copied()
            .filter(|&v| v > threshold)
            .collect(),
        n_days: series.n_present(),
    }
}

/// Generalized Pareto distribution of excesses over a threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gpd {
    pub scale: f64,
    pub shape: f64,
}

impl Gpd {
    pub fn new(scale: f64, shape: f64) -> Self {
        Gpd { scale, shape }
    }

    /// P(Y > y) for an excess y ≥ 0.
    pub fn survival(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 1.0;
        }
        if self.shape.abs() < 1e-12 {
            (-y / self.scale).exp()
        } else {
            let z = 1.0 + self.shape * y / self.scale;
            if z <= 0.0 {
                0.0
            } else {
                (-z.ln() / self.shape).exp()
            }
        }
    }

    /// Excess with survival probability `p`.
    pub fn inverse_survival(&self, p: f64) -> f64 {
        if self.shape.abs() < 1e-12 {
            -self.scale * p.ln()
        } else {
            self.scale * (-self.shape * p.ln()).exp_m1() / self.shape
        }
    }
}

impl rand::distributions::Distribution<f64> for Gpd {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // 1 - U lies in (0, 1]
        let p = 1.0 - rng.gen::<f64>();
        self.inverse_survival(p)
    }
}

/// GPD log-likelihood of excesses `y` (already shifted by the threshold).
pub fn gpd_loglik(excesses: &[f64], scale: f64, shape: f64) -> f64 {
    if !(scale > 0.0) {
        return f64::NEG_INFINITY;
    }
    let n = excesses.len() as f64;
    if shape.abs() < 1e-12 {
        return -n * scale.ln() - excesses.iter().sum::<f64>() / scale;
    }
    let mut acc = 0.0;
    for &y in excesses {
        let w = shape * y / scale;
        if w <= -1.0 {
            return f64::NEG_INFINITY;
        }
        acc += w.ln_1p();
    }
    -n * scale.ln() - (1.0 + 1.0 / shape) * acc
}

/// ((1+w)·ln(1+w) − w) / w²
fn h_series(w: f64) -> f64 {
    if w.abs() < 0.1 {
        let mut sum = 0.0;
        let mut pow = 1.0;
        for m in 2..40 {
            let mf = m as f64;
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * pow / (mf * (mf - 1.0));
            pow *= w;
        }
        sum
    } else {
        ((1.0 + w) * w.ln_1p() - w) / (w * w)
    }
}

/// (−2·ln(1+w) + 2w/(1+w) + w²/(1+w)²) / w³
fn k_series(w: f64) -> f64 {
    if w.abs() < 0.1 {
        let mut sum = 0.0;
        let mut pow = 1.0;
        for m in 3..40 {
            let mf = m as f64;
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * (mf - 3.0 + 2.0 / mf) * pow;
            pow *= w;
        }
        sum
    } else {
        let z = 1.0 + w;
        (-2.0 * w.ln_1p() + 2.0 * w / z + w * w / (z * z)) / (w * w * w)
    }
}

/// Gradient and Hessian of the log-likelihood in (scale, shape).
pub fn gpd_loglik_derivatives(excesses: &[f64], scale: f64, shape: f64) -> (Vector2<f64>, Matrix2<f64>) {
    let n = excesses.len() as f64;
    let (mut s1, mut s2, mut gx, mut hxx, mut hsx) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &y in excesses {
        let a = y / scale;
        let w = shape * a;
        let z = 1.0 + w;
        s1 += a / z;
        s2 += a / (z * z);
        gx += (a * a * h_series(w) - a) / z;
        hxx += a * a * a * k_series(w) + a * a / (z * z);
        hsx += a / z - (1.0 + shape) * a * a / (z * z);
    }
    let gs = (-n + (1.0 + shape) * s1) / scale;
    let hss = (n - (1.0 + shape) * (s1 + s2)) / (scale * scale);
    let grad = Vector2::new(gs, gx);
    let hess = Matrix2::new(hss, hsx / scale, hsx / scale, hxx);
    (grad, hess)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub min_exceedances: usize,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            min_exceedances: DEFAULT_MIN_EXCEEDANCES,
            max_iterations: 500,
        }
    }
}

/// Maximum-likelihood GPD fit with exceedance rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub threshold: f64,
    pub scale: f64,
    pub shape: f64,
    /// Per-day exceedance probability.
    pub rate: f64,
    pub n_exceed: usize,
    pub n_days: usize,
    /// Covariance of (scale, shape): inverse observed information.
    pub cov: [[f64; 2]; 2],
    /// False when the observed information was not positive definite.
    pub cov_ok: bool,
    pub rate_se: f64,
    pub loglik: f64,
    pub iterations: usize,
}

impl GpdFit {
    pub fn scale_se(&self) -> f64 {
        self.cov[0][0].max(0.0).sqrt()
    }

    pub fn shape_se(&self) -> f64 {
        self.cov[1][1].max(0.0).sqrt()
    }

    pub fn params(&self) -> GpdParams {
        GpdParams {
            threshold: self.threshold,
            scale: self.scale,
            shape: self.shape,
            rate: self.rate,
        }
    }

    /// Block-diagonal covariance of (scale, shape, rate).
    pub fn covariance(&self) -> Matrix3<f64> {
        let c = &self.cov;
        Matrix3::new(
            c[0][0], c[0][1], 0.0,
            c[1][0], c[1][1], 0.0,
            0.0, 0.0, self.rate_se * self.rate_se,
        )
    }
}

struct Candidate {
    log_scale: f64,
    shape: f64,
    loglik: f64,
    converged: bool,
    iterations: usize,
}

fn support_ok(excesses_max: f64, scale: f64, shape: f64) -> bool {
    shape >= 0.0 || 1.0 + shape * excesses_max / scale > 0.0
}

/// Bounded Newton ascent on (log scale, shape) from one starting point.
fn newton_from(excesses: &[f64], y_max: f64, start: (f64, f64), max_iter: usize) -> Candidate {
    let (lo, hi) = SHAPE_BOUNDS;
    let ll = |t: Vector2<f64>| {
        let s = t[0].exp();
        if !support_ok(y_max, s, t[1]) {
            f64::NEG_INFINITY
        } else {
            gpd_loglik(excesses, s, t[1])
        }
    };
    let mut theta = Vector2::new(start.0, start.1.clamp(lo, hi));
    let mut cur = ll(theta);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let s = theta[0].exp();
        let (g, h) = gpd_loglik_derivatives(excesses, s, theta[1]);
        // chain rule to (log scale, shape)
        let grad = Vector2::new(s * g[0], g[1]);
        let hess = Matrix2::new(
            s * s * h[(0, 0)] + s * g[0],
            s * h[(0, 1)],
            s * h[(0, 1)],
            h[(1, 1)],
        );
        let at_lo = theta[1] <= lo && grad[1] < 0.0;
        let at_hi = theta[1] >= hi && grad[1] > 0.0;
        let free_grad = if at_lo || at_hi {
            Vector2::new(grad[0], 0.0)
        } else {
            grad
        };
        if free_grad[0].abs() < 1e-9 * excesses.len() as f64 && free_grad[1].abs() < 1e-9 * excesses.len() as f64 {
            converged = true;
            break;
        }
        let neg = -hess;
        let mut dir = if at_lo || at_hi {
            if neg[(0, 0)] > 0.0 {
                Vector2::new(grad[0] / neg[(0, 0)], 0.0)
            } else {
                Vector2::new(grad[0].signum() * 0.1, 0.0)
            }
        } else {
            match neg.cholesky() {
                Some(ch) => ch.solve(&grad),
                None => {
                    let norm = grad.norm();
                    grad / norm * 0.1
                }
            }
        };
        // keep individual steps moderate
        let len = dir.amax();
        if len > 1.0 {
            dir /= len;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = theta + dir * alpha;
            cand[1] = cand[1].clamp(lo, hi);
            let v = ll(cand);
            if v.is_finite() && v >= cur {
                let moved = (cand - theta).amax();
                theta = cand;
                let gain = v - cur;
                cur = v;
                accepted = true;
                if moved < 1e-12 || gain.abs() < 1e-14 * (1.0 + cur.abs()) && moved < 1e-10 {
                    converged = true;
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no ascent possible along the direction: stationary up to rounding
            converged = free_grad.amax() < 1e-5 * excesses.len() as f64;
            break;
        }
        if converged {
            break;
        }
    }
    Candidate {
        log_scale: theta[0],
        shape: theta[1],
        loglik: cur,
        converged,
        iterations,
    }
}

/// Maximum-likelihood GPD fit to exceedances over `threshold`, with the
/// exceedance rate taken over `n_days` non-missing days. The result does not
/// depend on the order of `exceed`.
pub fn fit_gpd(exceed: &[f64], threshold: f64, n_days: usize, opts: &FitOptions) -> Result<GpdFit> {
    if exceed.len() < opts.min_exceedances.max(2) {
        return Err(ExtremesError::TooFewExceedances {
            found: exceed.len(),
            required: opts.min_exceedances.max(2),
        });
    }
    // sorted so the fit depends only on the multiset of exceedances
    let mut excesses: Vec<f64> = exceed.iter().map(|x| x - threshold).collect();
    excesses.sort_by(f64::total_cmp);
    let n = excesses.len() as f64;
    let mean = excesses.iter().sum::<f64>() / n;
    let var = excesses.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let y_max = excesses.iter().copied().fold(0.0, f64::max);
    if !(mean > 0.0) {
        return Err(ExtremesError::NonConvergence(
            "all exceedances sit on the threshold".into(),
        ));
    }

    let mut starts = vec![(mean, 0.0), (mean * 0.8, 0.2)];
    if var > 0.0 {
        let ratio = mean * mean / var;
        let xi = (0.5 * (1.0 - ratio)).clamp(-0.45, 0.9);
        let sigma = 0.5 * mean * (ratio + 1.0);
        starts.insert(0, (sigma, xi));
    }
    let mut best: Option<Candidate> = None;
    for (sigma, xi) in starts {
        let mut sigma = sigma.max(1e-8 * mean);
        if xi < 0.0 {
            sigma = sigma.max(-xi * y_max * 1.01);
        }
        let cand = newton_from(&excesses, y_max, (sigma.ln(), xi), opts.max_iterations);
        let better = match &best {
            None => true,
            Some(b) => {
                (cand.converged && !b.converged)
                    || (cand.converged == b.converged && cand.loglik > b.loglik)
            }
        };
        if better {
            best = Some(cand);
        }
    }
    let best = best.expect("at least one start");
    if !best.converged || !best.loglik.is_finite() {
        return Err(ExtremesError::NonConvergence(format!(
            "best loglik {} at scale {}, shape {} after {} iterations",
            best.loglik,
            best.log_scale.exp(),
            best.shape,
            best.iterations
        )));
    }
    let scale = best.log_scale.exp();
    let (_, hess) = gpd_loglik_derivatives(&excesses, scale, best.shape);
    let info = -hess;
    let (cov, cov_ok) = match info.cholesky() {
        Some(ch) => (ch.inverse(), true),
        None => {
            log::warn!("observed information not positive definite; covariance unusable");
            (info.try_inverse().unwrap_or(Matrix2::from_element(f64::NAN)), false)
        }
    };
    let rate = exceed.len() as f64 / n_days as f64;
    Ok(GpdFit {
        threshold,
        scale,
        shape: best.shape,
        rate,
        n_exceed: exceed.len(),
        n_days,
        cov: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        cov_ok,
        rate_se: (rate * (1.0 - rate) / n_days as f64).sqrt(),
        loglik: best.loglik,
        iterations: best.iterations,
    })
}

/// Declusters a series, extracts exceedances and fits the GPD.
pub fn fit_series(series: &DailySeries, threshold: f64, opts: &FitOptions) -> Result<GpdFit> {
    let ex = exceedances(&decluster(series), threshold);
    fit_gpd(&ex.values, threshold, ex.n_days, opts)
}

/// Threshold, scale, shape and per-day rate of a peaks-over-threshold model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub threshold: f64,
    pub scale: f64,
    pub shape: f64,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevelEstimate {
    pub period: f64,
    /// Inches.
    pub level: f64,
    /// Inches.
    pub se: f64,
}

fn expected_exceedances(p: &GpdParams, period: f64, days_per_year: f64) -> f64 {
    period * days_per_year * p.rate
}

/// Return level in tenths of a millimetre and its gradient with respect to
/// (scale, shape, rate).
pub fn return_level_tenths(
    p: &GpdParams,
    period: f64,
    days_per_year: f64,
) -> Result<(f64, Vector3<f64>)> {
    if !(period >= 1.0) {
        return Err(ExtremesError::InvalidReturnPeriod(period));
    }
    let m = expected_exceedances(p, period, days_per_year);
    if !(m > 1.0) {
        return Err(ExtremesError::SubAnnualReturn {
            period,
            expected: m,
        });
    }
    let lm = m.ln();
    let (sigma, xi) = (p.scale, p.shape);
    if xi.abs() < EXPONENTIAL_SHAPE_EPS {
        let level = p.threshold + sigma * lm;
        let grad = Vector3::new(lm, sigma * lm * lm / 2.0, sigma / p.rate);
        Ok((level, grad))
    } else {
        let em1 = (xi * lm).exp_m1();
        let mx = em1 + 1.0;
        let level = p.threshold + sigma / xi * em1;
        let grad = Vector3::new(
            em1 / xi,
            sigma * (mx * lm / xi - em1 / (xi * xi)),
            sigma * mx / p.rate,
        );
        Ok((level, grad))
    }
}

/// N-year return level in inches with a delta-method standard error.
/// `cov` is the covariance of (scale, shape, rate).
pub fn return_level(
    p: &GpdParams,
    cov: &Matrix3<f64>,
    period: f64,
    days_per_year: f64,
) -> Result<ReturnLevelEstimate> {
    let (level, grad) = return_level_tenths(p, period, days_per_year)?;
    let var = (grad.transpose() * cov * grad)[(0, 0)];
    Ok(ReturnLevelEstimate {
        period,
        level: level / TENTHS_MM_PER_INCH,
        se: var.max(0.0).sqrt() / TENTHS_MM_PER_INCH,
    })
}

pub fn fit_return_level(fit: &GpdFit, period: f64) -> Result<ReturnLevelEstimate> {
    return_level(&fit.params(), &fit.covariance(), period, DAYS_PER_YEAR)
}
