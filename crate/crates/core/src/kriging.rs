//! Ordinary kriging and cokriging of station GPD parameters, with block
//! averaging over regions.
//!
//! The constant mean is the generalized least squares estimate and the
//! prediction variance carries the GLS penalty term. When the nugget is
//! treated as measurement error it enters the data covariance `C_Z` only and
//! is filtered from predictions.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimates::{Method, RegionEstimate, RegionEstimates};
use crate::extremes::{ExtremesError, GpdFit, GpdParams};
use crate::geometry::{Point, Region, RegionSet, StationSet};
use crate::optimize::brent_max;
use crate::pare::backtransform_logscale;

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_BLOCK_SAMPLES: usize = 1000;
/// Above this many block sample points the within-block mean covariance is
/// computed from an evenly strided subsample.
const BLOCK_COV_POINTS: usize = 2000;

#[derive(Debug, Error)]
pub enum KrigingError {
    #[error("need at least {required} points, got {found}")]
    TooFewPoints { found: usize, required: usize },
    #[error("maximum lag distance must be positive, got {0}")]
    InvalidMaxDist(f64),
    #[error("need at least 3 non-empty variogram bins, got {0}")]
    TooFewBins(usize),
    #[error("variogram fit did not converge: {0}")]
    NonConvergence(String),
    #[error("covariance matrix is singular (duplicate locations without a nugget?)")]
    SingularCovariance,
    #[error("coregionalization matrix {0} is not positive semidefinite")]
    InvalidLmc(usize),
    #[error("region {0} has no interior sample points at this resolution")]
    NoInteriorPoints(String),
    #[error("values and points differ in length")]
    LengthMismatch,
    #[error(transparent)]
    Extremes(#[from] ExtremesError),
}

type Result<T> = std::result::Result<T, KrigingError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariogramKind {
    Exponential,
    Spherical,
    Gaussian,
}

impl VariogramKind {
    /// Unit-sill correlation of the structured component at lag `h`.
    pub fn correlation(&self, h: f64, range: f64) -> f64 {
        match self {
            VariogramKind::Exponential => (-h / range).exp(),
            VariogramKind::Gaussian => (-(h / range).powi(2)).exp(),
            VariogramKind::Spherical => {
                if h >= range {
                    0.0
                } else {
                    let t = h / range;
                    1.0 - 1.5 * t + 0.5 * t * t * t
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub kind: VariogramKind,
    pub nugget: f64,
    pub partial_sill: f64,
    /// Miles.
    pub range: f64,
}

impl VariogramModel {
    pub fn sill(&self) -> f64 {
        self.nugget + self.partial_sill
    }

    pub fn gamma(&self, h: f64) -> f64 {
        if h == 0.0 {
            0.0
        } else {
            self.nugget + self.partial_sill * (1.0 - self.kind.correlation(h, self.range))
        }
    }

    /// Covariance of the observed field, nugget included at zero lag.
    pub fn covariance(&self, h: f64) -> f64 {
        self.sill() - self.gamma(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalBin {
    pub lag: f64,
    pub gamma: f64,
    pub pairs: usize,
}

fn binned<F: Fn(usize, usize) -> f64>(
    points: &[Point],
    n_bins: usize,
    max_dist: f64,
    pair_value: F,
) -> Result<Vec<EmpiricalBin>> {
    if points.len() < 2 {
        return Err(KrigingError::TooFewPoints {
            found: points.len(),
            required: 2,
        });
    }
    if !(max_dist > 0.0) {
        return Err(KrigingError::InvalidMaxDist(max_dist));
    }
    let n_bins = n_bins.max(1);
    let width = max_dist / n_bins as f64;
    let mut lag_sum = vec![0.0; n_bins];
    let mut val_sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let h = points[i].distance(&points[j]);
            if h <= 0.0 || h > max_dist {
                continue;
            }
            let k = ((h / width).ceil() as usize).clamp(1, n_bins) - 1;
            lag_sum[k] += h;
            val_sum[k] += pair_value(i, j);
            count[k] += 1;
        }
    }
    let mut out = Vec::new();
    for k in 0..n_bins {
        if count[k] == 0 {
            log::warn!("variogram bin {k} is empty and was dropped");
            continue;
        }
        out.push(EmpiricalBin {
            lag: lag_sum[k] / count[k] as f64,
            gamma: val_sum[k] / count[k] as f64,
            pairs: count[k],
        });
    }
    Ok(out)
}

/// Binned semivariances `mean(½(v_i − v_j)²)` over pairs with lag in
/// `(0, max_dist]`, using `n_bins` equal-width bins. Empty bins are dropped.
pub fn empirical_variogram(
    points: &[Point],
    values: &[f64],
    n_bins: usize,
    max_dist: f64,
) -> Result<Vec<EmpiricalBin>> {
    if points.len() != values.len() {
        return Err(KrigingError::LengthMismatch);
    }
    binned(points, n_bins, max_dist, |i, j| {
        0.5 * (values[i] - values[j]).powi(2)
    })
}

/// Binned cross-semivariances `mean(½(a_i − a_j)(b_i − b_j))`.
pub fn empirical_cross_variogram(
    points: &[Point],
    a: &[f64],
    b: &[f64],
    n_bins: usize,
    max_dist: f64,
) -> Result<Vec<EmpiricalBin>> {
    if points.len() != a.len() || points.len() != b.len() {
        return Err(KrigingError::LengthMismatch);
    }
    binned(points, n_bins, max_dist, |i, j| {
        0.5 * (a[i] - a[j]) * (b[i] - b[j])
    })
}

/// Half the largest pairwise distance.
pub fn default_max_dist(points: &[Point]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            m = m.max(points[i].distance(&points[j]));
        }
    }
    m / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub model: VariogramModel,
    /// Partial sill collapsed to zero (nugget-only model).
    pub degenerate: bool,
    pub weighted_sse: f64,
}

fn bin_weights(bins: &[EmpiricalBin]) -> Vec<f64> {
    bins.iter()
        .map(|b| b.pairs as f64 / (b.lag * b.lag))
        .collect()
}

/// Weighted least squares for `gamma ≈ nugget + psill·g` with both
/// coefficients nonnegative. Returns (nugget, psill, sse).
fn nnls_two(g: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sse = |n: f64, p: f64| -> f64 {
        g.iter()
            .zip(y)
            .zip(w)
            .map(|((gk, yk), wk)| wk * (yk - n - p * gk).powi(2))
            .sum()
    };
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..g.len() {
        s0 += w[k];
        s1 += w[k] * g[k];
        s2 += w[k] * g[k] * g[k];
        t0 += w[k] * y[k];
        t1 += w[k] * g[k] * y[k];
    }
    let mut candidates = Vec::with_capacity(4);
    let det = s0 * s2 - s1 * s1;
    if det.abs() > 1e-300 {
        let n = (s2 * t0 - s1 * t1) / det;
        let p = (s0 * t1 - s1 * t0) / det;
        if n >= 0.0 && p >= 0.0 {
            candidates.push((n, p));
        }
    }
    if s2 > 0.0 {
        candidates.push((0.0, (t1 / s2).max(0.0)));
    }
    if s0 > 0.0 {
        candidates.push(((t0 / s0).max(0.0), 0.0));
    }
    candidates.push((0.0, 0.0));
    candidates
        .into_iter()
        .map(|(n, p)| (n, p, sse(n, p)))
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("candidates")
}

fn range_bounds(bins: &[EmpiricalBin]) -> (f64, f64) {
    let min_lag = bins.iter().map(|b| b.lag).fold(f64::INFINITY, f64::min);
    let max_lag = bins.iter().map(|b| b.lag).fold(0.0, f64::max);
    (min_lag * 0.05, max_lag * 20.0)
}

/// Minimizes `objective(range)` over log-range: a log-spaced scan followed by
/// Brent refinement.
fn search_range<F: Fn(f64) -> f64>(lo: f64, hi: f64, objective: F) -> (f64, f64) {
    let (llo, lhi) = (lo.ln(), hi.ln());
    let grid = 80;
    let xs: Vec<f64> = (0..grid)
        .map(|k| llo + (lhi - llo) * k as f64 / (grid - 1) as f64)
        .collect();
    let vals: Vec<f64> = xs.iter().map(|&x| objective(x.exp())).collect();
    let best = (0..grid)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap();
    let a = xs[best.saturating_sub(1)];
    let b = xs[(best + 1).min(grid - 1)];
    let (x, negv, _) = brent_max(|x| -objective(x.exp()), a, b, 1e-12);
    if -negv <= vals[best] {
        (x.exp(), -negv)
    } else {
        (xs[best].exp(), vals[best])
    }
}

/// Weighted least-squares variogram fit (weights = pairs / lag²) over
/// nugget, partial sill and range, with nonnegative coefficients.
pub fn fit_variogram(bins: &[EmpiricalBin], kind: VariogramKind) -> Result<VariogramFit> {
    if bins.len() < 3 {
        return Err(KrigingError::TooFewBins(bins.len()));
    }
    let w = bin_weights(bins);
    let y: Vec<f64> = bins.iter().map(|b| b.gamma).collect();
    let (lo, hi) = range_bounds(bins);
    let inner = |range: f64| {
        let g: Vec<f64> = bins
            .iter()
            .map(|b| 1.0 - kind.correlation(b.lag, range))
            .collect();
        nnls_two(&g, &y, &w)
    };
    let (range, sse) = search_range(lo, hi, |r| inner(r).2);
    if !sse.is_finite() {
        return Err(KrigingError::NonConvergence(format!("weighted SSE {sse}")));
    }
    let (nugget, psill, sse) = inner(range);
    let scale = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let degenerate = psill <= 1e-10 * scale.max(f64::MIN_POSITIVE);
    let model = if degenerate {
        let g0 = vec![0.0; bins.len()];
        let (n0, _, _) = nnls_two(&g0, &y, &w);
        VariogramModel {
            kind,
            nugget: n0,
            partial_sill: 0.0,
            range: lo,
        }
    } else {
        VariogramModel {
            kind,
            nugget,
            partial_sill: psill,
            range,
        }
    };
    if degenerate {
        log::warn!("variogram fit collapsed to a nugget-only model");
    }
    Ok(VariogramFit {
        model,
        degenerate,
        weighted_sse: sse,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrigePrediction {
    pub value: f64,
    pub variance: f64,
}

fn symmetric_cholesky(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    m.cholesky().ok_or(KrigingError::SingularCovariance)
}

/// Exact block-average covariance `mean_{i,j} cov(s_i, s_j)`, with
/// `diag_extra` added on coincident pairs.
fn mean_pair_correlation(samples: &[Point], corr: impl Fn(f64) -> f64) -> f64 {
    let pts: Vec<Point> = if samples.len() > BLOCK_COV_POINTS {
        let step = samples.len() as f64 / BLOCK_COV_POINTS as f64;
        (0..BLOCK_COV_POINTS)
            .map(|k| samples[(k as f64 * step) as usize])
            .collect()
    } else {
        samples.to_vec()
    };
    let m = pts.len();
    let mut acc = 0.0;
    for i in 0..m {
        acc += corr(0.0);
        for j in (i + 1)..m {
            acc += 2.0 * corr(pts[i].distance(&pts[j]));
        }
    }
    acc / (m * m) as f64
}

/// Ordinary kriging system factorized once for repeated prediction.
#[derive(Clone, Debug)]
pub struct OrdinaryKriging {
    points: Vec<Point>,
    model: VariogramModel,
    filter_nugget: bool,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    cinv_resid: DVector<f64>,
    cinv_one: DVector<f64>,
    one_cinv_one: f64,
    mu: f64,
}

impl OrdinaryKriging {
    pub fn new(
        points: &[Point],
        values: &[f64],
        model: VariogramModel,
        nugget_as_measurement_error: bool,
    ) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(KrigingError::TooFewPoints {
                found: 0,
                required: 1,
            });
        }
        if values.len() != n {
            return Err(KrigingError::LengthMismatch);
        }
        if model.sill() <= 0.0 {
            // a flat field: every prediction is the common value
            let first = values[0];
            if values.iter().any(|&v| v != first) {
                return Err(KrigingError::SingularCovariance);
            }
            return Ok(OrdinaryKriging {
                points: points.to_vec(),
                model,
                filter_nugget: nugget_as_measurement_error,
                chol: None,
                cinv_resid: DVector::zeros(n),
                cinv_one: DVector::zeros(n),
                one_cinv_one: f64::INFINITY,
                mu: first,
            });
        }
        let cz = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                model.sill()
            } else {
                let h = points[i].distance(&points[j]);
                if h == 0.0 {
                    model.partial_sill
                } else {
                    model.covariance(h)
                }
            }
        });
        let chol = symmetric_cholesky(cz)?;
        let z = DVector::from_column_slice(values);
        let one = DVector::from_element(n, 1.0);
        let cinv_one = chol.solve(&one);
        let one_cinv_one = one.dot(&cinv_one);
        let mu = cinv_one.dot(&z) / one_cinv_one;
        let cinv_resid = chol.solve(&(z - one * mu));
        Ok(OrdinaryKriging {
            points: points.to_vec(),
            model,
            filter_nugget: nugget_as_measurement_error,
            chol: Some(chol),
            cinv_resid,
            cinv_one,
            one_cinv_one,
            mu,
        })
    }

    /// GLS estimate of the constant mean.
    pub fn mean(&self) -> f64 {
        self.mu
    }

    /// Process covariance between `s0` and observation site `i`.
    fn cov_to_site(&self, s0: Point, i: usize) -> f64 {
        let h = s0.distance(&self.points[i]);
        let m = &self.model;
        if h == 0.0 {
            if self.filter_nugget {
                m.partial_sill
            } else {
                m.sill()
            }
        } else {
            m.covariance(h)
        }
    }

    fn point_variance(&self) -> f64 {
        if self.filter_nugget {
            self.model.partial_sill
        } else {
            self.model.sill()
        }
    }

    fn predict_from(&self, c: &DVector<f64>, c00: f64) -> KrigePrediction {
        let Some(chol) = &self.chol else {
            return KrigePrediction {
                value: self.mu,
                variance: 0.0,
            };
        };
        let cinv_c = chol.solve(c);
        let value = self.mu + c.dot(&self.cinv_resid);
        let gls = 1.0 - self.cinv_one.dot(c);
        let variance = c00 - c.dot(&cinv_c) + gls * gls / self.one_cinv_one;
        KrigePrediction {
            value,
            variance: variance.max(0.0),
        }
    }

    pub fn predict(&self, s0: Point) -> KrigePrediction {
        let c = DVector::from_fn(self.points.len(), |i, _| self.cov_to_site(s0, i));
        self.predict_from(&c, self.point_variance())
    }

    /// Weights `w` with `Y*(s0) = wᵀZ`.
    pub fn weights(&self, s0: Point) -> DVector<f64> {
        let n = self.points.len();
        let Some(chol) = &self.chol else {
            return DVector::from_element(n, 1.0 / n as f64);
        };
        let c = DVector::from_fn(n, |i, _| self.cov_to_site(s0, i));
        let cinv_c = chol.solve(&c);
        let gls = 1.0 - self.cinv_one.dot(&c);
        cinv_c + &self.cinv_one * (gls / self.one_cinv_one)
    }

    /// Prediction of the mean over `samples`, with the block prediction variance.
    pub fn predict_block(&self, samples: &[Point]) -> KrigePrediction {
        let n = self.points.len();
        let m = samples.len() as f64;
        let mut c = DVector::zeros(n);
        for &s in samples {
            for i in 0..n {
                c[i] += self.cov_to_site(s, i);
            }
        }
        c /= m;
        let model = self.model;
        let mut c00 = model.partial_sill
            * mean_pair_correlation(samples, |h| model.kind.correlation(h, model.range));
        if !self.filter_nugget {
            c00 += model.nugget / samples.len().min(BLOCK_COV_POINTS) as f64;
        }
        self.predict_from(&c, c00)
    }
}

/// Ordinary kriging prediction at `s0`.
pub fn ordinary_krige(
    points: &[Point],
    values: &[f64],
    model: VariogramModel,
    nugget_as_measurement_error: bool,
    s0: Point,
) -> Result<KrigePrediction> {
    Ok(OrdinaryKriging::new(points, values, model, nugget_as_measurement_error)?.predict(s0))
}

/// One nested structure of a linear model of coregionalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmcStructure {
    pub kind: VariogramKind,
    pub range: f64,
    /// 2×2 coefficient matrix, row-major.
    pub coefficients: [[f64; 2]; 2],
}

/// Bivariate linear model of coregionalization: a nugget matrix plus nested
/// unit-sill structures, each weighted by a positive semidefinite matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoregionalizationModel {
    pub nugget: [[f64; 2]; 2],
    pub structures: Vec<LmcStructure>,
}

fn mat2(m: &[[f64; 2]; 2]) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

fn is_psd(m: &[[f64; 2]; 2]) -> bool {
    let a = mat2(m);
    if (a[(0, 1)] - a[(1, 0)]).abs() > 1e-12 * (1.0 + a.amax()) {
        return false;
    }
    let eig = SymmetricEigen::new(a);
    eig.eigenvalues.min() >= -1e-12 * (1.0 + a.amax())
}

/// Nearest (Frobenius) positive semidefinite matrix.
pub fn nearest_psd(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let a = mat2(&m);
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let r = eig.eigenvectors * Matrix2::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    [[r[(0, 0)], r[(0, 1)]], [r[(1, 0)], r[(1, 1)]]]
}

impl CoregionalizationModel {
    pub fn validate(&self) -> Result<()> {
        if !is_psd(&self.nugget) {
            return Err(KrigingError::InvalidLmc(0));
        }
        for (k, s) in self.structures.iter().enumerate() {
            if !is_psd(&s.coefficients) {
                return Err(KrigingError::InvalidLmc(k + 1));
            }
        }
        Ok(())
    }

    /// Structured (nugget-free) cross-covariance at lag `h`.
    pub fn structured(&self, a: usize, b: usize, h: f64) -> f64 {
        self.structures
            .iter()
            .map(|s| s.coefficients[a][b] * s.kind.correlation(h, s.range))
            .sum()
    }

    pub fn total_sill(&self, a: usize, b: usize) -> f64 {
        self.nugget[a][b] + self.structured(a, b, 0.0)
    }

    /// Direct variogram of variable `a` implied by the model.
    pub fn direct(&self, a: usize) -> Option<VariogramModel> {
        let s = self.structures.first()?;
        Some(VariogramModel {
            kind: s.kind,
            nugget: self.nugget[a][a],
            partial_sill: self.structures.iter().map(|s| s.coefficients[a][a]).sum(),
            range: s.range,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CokrigePrediction {
    pub values: [f64; 2],
    /// Prediction error covariance of the two variables.
    pub cov: [[f64; 2]; 2],
}

impl CokrigePrediction {
    pub fn marginal(&self, a: usize) -> KrigePrediction {
        KrigePrediction {
            value: self.values[a],
            variance: self.cov[a][a],
        }
    }
}

/// Ordinary cokriging of two variables observed at the same sites.
#[derive(Clone, Debug)]
pub struct Cokriging {
    points: Vec<Point>,
    model: CoregionalizationModel,
    filter_nugget: bool,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// C⁻¹F (2n×2).
    cinv_f: DMatrix<f64>,
    /// (FᵀC⁻¹F)⁻¹.
    gls_inv: Matrix2<f64>,
    mu: [f64; 2],
    cinv_resid: DVector<f64>,
}

impl Cokriging {
    pub fn new(
        points: &[Point],
        a: &[f64],
        b: &[f64],
        model: CoregionalizationModel,
        nugget_as_measurement_error: bool,
    ) -> Result<Self> {
        model.validate()?;
        let n = points.len();
        if n == 0 {
            return Err(KrigingError::TooFewPoints {
                found: 0,
                required: 1,
            });
        }
        if a.len() != n || b.len() != n {
            return Err(KrigingError::LengthMismatch);
        }
        let cz = DMatrix::from_fn(2 * n, 2 * n, |p, q| {
            let (va, i) = (p / n, p % n);
            let (vb, j) = (q / n, q % n);
            let h = points[i].distance(&points[j]);
            let mut c = model.structured(va, vb, h);
            if i == j {
                c += model.nugget[va][vb];
            }
            c
        });
        let chol = symmetric_cholesky(cz)?;
        let f = DMatrix::from_fn(2 * n, 2, |p, v| if p / n == v { 1.0 } else { 0.0 });
        let cinv_f = chol.solve(&f);
        let ftcf = f.transpose() * &cinv_f;
        let gls_inv = Matrix2::new(ftcf[(0, 0)], ftcf[(0, 1)], ftcf[(1, 0)], ftcf[(1, 1)])
            .try_inverse()
            .ok_or(KrigingError::SingularCovariance)?;
        let z = DVector::from_iterator(2 * n, a.iter().chain(b.iter()).copied());
        let ftcz = cinv_f.transpose() * &z;
        let mu_v = gls_inv * nalgebra::Vector2::new(ftcz[0], ftcz[1]);
        let mu = [mu_v[0], mu_v[1]];
        let fitted = DVector::from_fn(2 * n, |p, _| mu[p / n]);
        let cinv_resid = chol.solve(&(z - fitted));
        Ok(Cokriging {
            points: points.to_vec(),
            model,
            filter_nugget: nugget_as_measurement_error,
            chol,
            cinv_f,
            gls_inv,
            mu,
            cinv_resid,
        })
    }

    pub fn means(&self) -> [f64; 2] {
        self.mu
    }

    fn cross_vectors(&self, s0: Point) -> [DVector<f64>; 2] {
        let n = self.points.len();
        let make = |a: usize| {
            DVector::from_fn(2 * n, |p, _| {
                let (v, i) = (p / n, p % n);
                let h = s0.distance(&self.points[i]);
                let mut c = self.model.structured(a, v, h);
                if h == 0.0 && !self.filter_nugget {
                    c += self.model.nugget[a][v];
                }
                c
            })
        };
        [make(0), make(1)]
    }

    fn predict_from(&self, c: &[DVector<f64>; 2], c00: Matrix2<f64>) -> CokrigePrediction {
        let cinv_c = [self.chol.solve(&c[0]), self.chol.solve(&c[1])];
        let values = [
            self.mu[0] + c[0].dot(&self.cinv_resid),
            self.mu[1] + c[1].dot(&self.cinv_resid),
        ];
        // f_a − Fᵀ C⁻¹ c_a
        let gls_vec = |a: usize| {
            let ftc = self.cinv_f.transpose() * &c[a];
            let mut v = nalgebra::Vector2::new(-ftc[0], -ftc[1]);
            v[a] += 1.0;
            v
        };
        let g = [gls_vec(0), gls_vec(1)];
        let mut cov = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] = c00[(a, b)] - c[a].dot(&cinv_c[b])
                    + (g[a].transpose() * self.gls_inv * g[b])[(0, 0)];
            }
        }
        for a in 0..2 {
            cov[a][a] = cov[a][a].max(0.0);
        }
        let off = 0.5 * (cov[0][1] + cov[1][0]);
        cov[0][1] = off;
        cov[1][0] = off;
        CokrigePrediction { values, cov }
    }

    pub fn predict(&self, s0: Point) -> CokrigePrediction {
        let c = self.cross_vectors(s0);
        let mut c00 = Matrix2::zeros();
        for a in 0..2 {
            for b in 0..2 {
                c00[(a, b)] = self.model.structured(a, b, 0.0)
                    + if self.filter_nugget { 0.0 } else { self.model.nugget[a][b] };
            }
        }
        self.predict_from(&c, c00)
    }

    pub fn predict_block(&self, samples: &[Point]) -> CokrigePrediction {
        let n = self.points.len();
        let m = samples.len() as f64;
        let mut c = [DVector::zeros(2 * n), DVector::zeros(2 * n)];
        for &s in samples {
            let cs = self.cross_vectors(s);
            c[0] += &cs[0];
            c[1] += &cs[1];
        }
        c[0] /= m;
        c[1] /= m;
        let mut c00 = Matrix2::zeros();
        for s in &self.model.structures {
            let g = mean_pair_correlation(samples, |h| s.kind.correlation(h, s.range));
            c00 += mat2(&s.coefficients) * g;
        }
        if !self.filter_nugget {
            c00 += mat2(&self.model.nugget) / samples.len().min(BLOCK_COV_POINTS) as f64;
        }
        self.predict_from(&c, c00)
    }
}

/// Ordinary cokriging predictions of both variables at `s0`.
pub fn cokrige(
    points: &[Point],
    a: &[f64],
    b: &[f64],
    model: CoregionalizationModel,
    nugget_as_measurement_error: bool,
    s0: Point,
) -> Result<[KrigePrediction; 2]> {
    let p = Cokriging::new(points, a, b, model, nugget_as_measurement_error)?.predict(s0);
    Ok([p.marginal(0), p.marginal(1)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmcFit {
    pub model: CoregionalizationModel,
    pub direct: [VariogramFit; 2],
    /// Cross coefficients were clipped to keep the model valid.
    pub projected: bool,
}

/// Fits a single-structure LMC: both direct variograms share a range (fit
/// jointly), then the cross-variogram is fit at that range and each
/// coefficient matrix is projected to the nearest PSD matrix.
pub fn fit_lmc(
    points: &[Point],
    a: &[f64],
    b: &[f64],
    n_bins: usize,
    max_dist: f64,
    kind: VariogramKind,
) -> Result<LmcFit> {
    let ea = empirical_variogram(points, a, n_bins, max_dist)?;
    let eb = empirical_variogram(points, b, n_bins, max_dist)?;
    let ec = empirical_cross_variogram(points, a, b, n_bins, max_dist)?;
    if ea.len() < 3 {
        return Err(KrigingError::TooFewBins(ea.len()));
    }
    let wa = bin_weights(&ea);
    let wb = bin_weights(&eb);
    let ya: Vec<f64> = ea.iter().map(|x| x.gamma).collect();
    let yb: Vec<f64> = eb.iter().map(|x| x.gamma).collect();
    // normalize each variable so neither dominates the shared-range search
    let va = ya.iter().sum::<f64>().abs().max(f64::MIN_POSITIVE);
    let vb = yb.iter().sum::<f64>().abs().max(f64::MIN_POSITIVE);
    let g_of = |bins: &[EmpiricalBin], r: f64| -> Vec<f64> {
        bins.iter().map(|x| 1.0 - kind.correlation(x.lag, r)).collect()
    };
    let joint = |r: f64| {
        let fa = nnls_two(&g_of(&ea, r), &ya, &wa);
        let fb = nnls_two(&g_of(&eb, r), &yb, &wb);
        fa.2 / (va * va) + fb.2 / (vb * vb)
    };
    let (lo, hi) = range_bounds(&ea);
    let (range, _) = search_range(lo, hi, joint);
    let (na, pa, sa) = nnls_two(&g_of(&ea, range), &ya, &wa);
    let (nb, pb, sb) = nnls_two(&g_of(&eb, range), &yb, &wb);

    // unconstrained weighted fit of the cross-variogram at the shared range
    let gc = g_of(&ec, range);
    let wc = bin_weights(&ec);
    let yc: Vec<f64> = ec.iter().map(|x| x.gamma).collect();
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..gc.len() {
        s0 += wc[k];
        s1 += wc[k] * gc[k];
        s2 += wc[k] * gc[k] * gc[k];
        t0 += wc[k] * yc[k];
        t1 += wc[k] * gc[k] * yc[k];
    }
    let det = s0 * s2 - s1 * s1;
    let (nc, pc) = if det.abs() > 1e-300 {
        ((s2 * t0 - s1 * t1) / det, (s0 * t1 - s1 * t0) / det)
    } else {
        (0.0, 0.0)
    };
    let raw_nugget = [[na, nc], [nc, nb]];
    let raw_struct = [[pa, pc], [pc, pb]];
    let nugget = nearest_psd(raw_nugget);
    let coefficients = nearest_psd(raw_struct);
    let projected = nugget != raw_nugget || coefficients != raw_struct;
    let model = CoregionalizationModel {
        nugget,
        structures: vec![LmcStructure {
            kind,
            range,
            coefficients,
        }],
    };
    let direct_fit = |n: f64, p: f64, sse: f64| VariogramFit {
        model: VariogramModel {
            kind,
            nugget: n,
            partial_sill: p,
            range,
        },
        degenerate: p <= 0.0,
        weighted_sse: sse,
    };
    Ok(LmcFit {
        model,
        direct: [direct_fit(na, pa, sa), direct_fit(nb, pb, sb)],
        projected,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum BlockMethod {
    /// Lattice at the given pitch (miles).
    Grid { resolution: f64 },
    /// Uniform random points.
    Random { n_samples: usize, seed: u64 },
}

impl Default for BlockMethod {
    fn default() -> Self {
        BlockMethod::Random {
            n_samples: DEFAULT_BLOCK_SAMPLES,
            seed: 0,
        }
    }
}

/// Points used to average predictions over a region.
pub fn block_sample_points(region: &Region, method: BlockMethod) -> Result<Vec<Point>> {
    let pts = match method {
        BlockMethod::Grid { resolution } => region.lattice_points(resolution),
        BlockMethod::Random { n_samples, seed } => {
            let bb = region.bbox();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::with_capacity(n_samples);
            let max_draws = n_samples.saturating_mul(10_000).max(10_000);
            let mut draws = 0;
            while out.len() < n_samples && draws < max_draws {
                draws += 1;
                let p = Point::new(
                    rng.gen_range(bb.min.x..=bb.max.x),
                    rng.gen_range(bb.min.y..=bb.max.y),
                );
                if region.covers(p) {
                    out.push(p);
                }
            }
            out
        }
    };
    if pts.is_empty() {
        return Err(KrigingError::NoInteriorPoints(region.id.clone()));
    }
    Ok(pts)
}

/// Something that predicts the mean over a set of points.
pub trait BlockPredictor {
    fn predict_mean(&self, samples: &[Point]) -> KrigePrediction;
}

impl BlockPredictor for OrdinaryKriging {
    fn predict_mean(&self, samples: &[Point]) -> KrigePrediction {
        self.predict_block(samples)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAverage {
    pub region_id: String,
    pub prediction: KrigePrediction,
    pub samples: Vec<Point>,
}

/// Averages point predictions over a region.
pub fn block_average<P: BlockPredictor>(
    predictor: &P,
    region: &Region,
    method: BlockMethod,
) -> Result<BlockAverage> {
    let samples = block_sample_points(region, method)?;
    Ok(BlockAverage {
        region_id: region.id.clone(),
        prediction: predictor.predict_mean(&samples),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KrigingOptions {
    pub kind: VariogramKind,
    pub n_bins: usize,
    /// Defaults to half the largest station separation.
    pub max_dist: Option<f64>,
    pub block: BlockMethod,
    pub nugget_as_measurement_error: bool,
}

impl Default for KrigingOptions {
    fn default() -> Self {
        KrigingOptions {
            kind: VariogramKind::Exponential,
            n_bins: DEFAULT_BINS,
            max_dist: None,
            block: BlockMethod::default(),
            nugget_as_measurement_error: true,
        }
    }
}

/// Fitted spatial models behind a block-kriging run, for export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrigingReport {
    /// Shape (variable 0) and log(scale) (variable 1).
    pub lmc: Option<LmcFit>,
    pub rate: Option<VariogramFit>,
    /// The shape/log-scale pair fell back to independent kriging.
    pub independent_fallback: bool,
}

/// Region `index` draws from its own stream so regions are independent.
fn block_for(index: usize, method: BlockMethod) -> BlockMethod {
    match method {
        BlockMethod::Random { n_samples, seed } => BlockMethod::Random {
            n_samples,
            seed: seed.wrapping_add(index as u64),
        },
        grid => grid,
    }
}

fn constant_or_kriging(
    points: &[Point],
    values: &[f64],
    opts: &KrigingOptions,
    max_dist: f64,
) -> Result<(OrdinaryKriging, Option<VariogramFit>)> {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        let model = VariogramModel {
            kind: opts.kind,
            nugget: 0.0,
            partial_sill: 0.0,
            range: 1.0,
        };
        return Ok((OrdinaryKriging::new(points, values, model, opts.nugget_as_measurement_error)?, None));
    }
    let bins = empirical_variogram(points, values, opts.n_bins, max_dist)?;
    let fit = fit_variogram(&bins, opts.kind)?;
    let ok = OrdinaryKriging::new(points, values, fit.model, opts.nugget_as_measurement_error)?;
    Ok((ok, Some(fit)))
}

/// Block kriging of station GPD parameters to regions: shape and log(scale)
/// are cokriged, the rate is kriged on its own, each is averaged over the
/// region, and return levels use the cokriging shape/log-scale covariance.
pub fn krige_to_regions(
    station_fits: &[GpdFit],
    stations: &StationSet,
    regions: &RegionSet,
    threshold: f64,
    periods: &[f64],
    opts: &KrigingOptions,
) -> Result<(RegionEstimates, KrigingReport)> {
    let n = stations.len();
    if n == 0 || station_fits.len() != n {
        return Err(KrigingError::LengthMismatch);
    }
    let points = stations.points();
    let shape: Vec<f64> = station_fits.iter().map(|f| f.shape).collect();
    let log_scale: Vec<f64> = station_fits.iter().map(|f| f.scale.ln()).collect();
    let rate: Vec<f64> = station_fits.iter().map(|f| f.rate).collect();

    if n == 1 {
        let f = &station_fits[0];
        let estimates = regions
            .regions()
            .iter()
            .map(|r| {
                RegionEstimate::new(r.id.clone(), f.params(), Matrix3::zeros(), periods)
                    .map_err(KrigingError::from)
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok((
            RegionEstimates {
                method: Method::BlockKriging,
                estimates,
            },
            KrigingReport {
                lmc: None,
                rate: None,
                independent_fallback: false,
            },
        ));
    }

    let max_dist = opts.max_dist.unwrap_or_else(|| default_max_dist(&points));
    let cok = fit_lmc(&points, &shape, &log_scale, opts.n_bins, max_dist, opts.kind)
        .and_then(|lmc| {
            let ck = Cokriging::new(
                &points,
                &shape,
                &log_scale,
                lmc.model.clone(),
                opts.nugget_as_measurement_error,
            )?;
            Ok((lmc, ck))
        });
    enum Pair {
        Joint(Cokriging),
        Separate(OrdinaryKriging, OrdinaryKriging),
    }
    let (pair, lmc) = match cok {
        Ok((lmc, ck)) => (Pair::Joint(ck), Some(lmc)),
        Err(e) => {
            log::warn!("cokriging unavailable ({e}); kriging shape and log(scale) separately");
            let (a, _) = constant_or_kriging(&points, &shape, opts, max_dist)?;
            let (b, _) = constant_or_kriging(&points, &log_scale, opts, max_dist)?;
            (Pair::Separate(a, b), None)
        }
    };
    let independent_fallback = lmc.is_none();
    let (rate_ok, rate_fit) = constant_or_kriging(&points, &rate, opts, max_dist)?;

    let mut estimates = Vec::with_capacity(regions.len());
    for (j, region) in regions.regions().iter().enumerate() {
        let samples = block_sample_points(region, block_for(j, opts.block))?;
        let (sh, ls, cross) = match &pair {
            Pair::Joint(ck) => {
                let p = ck.predict_block(&samples);
                (p.marginal(0), p.marginal(1), p.cov[0][1])
            }
            Pair::Separate(a, b) => (a.predict_block(&samples), b.predict_block(&samples), 0.0),
        };
        let rt = rate_ok.predict_block(&samples);
        let (scale, scale_se) = backtransform_logscale(ls.value, ls.variance);
        // d scale / d log(scale) = exp(log scale)
        let scale_shape = ls.value.exp() * cross;
        let cov = Matrix3::from_columns(&[
            Vector3::new(scale_se * scale_se, scale_shape, 0.0),
            Vector3::new(scale_shape, sh.variance, 0.0),
            Vector3::new(0.0, 0.0, rt.variance),
        ]);
        let params = GpdParams {
            threshold,
            scale,
            shape: sh.value,
            rate: rt.value,
        };
        estimates.push(RegionEstimate::new(region.id.clone(), params, cov, periods)?);
    }
    Ok((
        RegionEstimates {
            method: Method::BlockKriging,
            estimates,
        },
        KrigingReport {
            lmc,
            rate: rate_fit,
            independent_fallback,
        },
    ))
}
