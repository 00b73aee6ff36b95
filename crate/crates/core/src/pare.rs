//! Point-to-area random effects (PARE): a conditional autoregressive Gaussian
//! model on station-level GPD parameters with a region-indicator mean. The
//! fitted mean coefficients are the region-level parameter estimates.
//!
//! With `Q(ρ) = I − ρW` and `M = τ²I` the observations follow
//! `Z ~ N(Xβ, τ² Q(ρ)⁻¹)`. β and τ² are profiled out in closed form and ρ is
//! found by a bounded one-dimensional search. All ρ-dependent quantities are
//! evaluated in the eigenbasis of `W`, so each profile evaluation costs
//! `O(n r²)` after a single eigendecomposition.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimates::{Method, RegionEstimate, RegionEstimates};
use crate::extremes::{ExtremesError, GpdFit, GpdParams};
use crate::geometry::{StationSet, WeightMatrix};
use crate::optimize::grid_then_brent;

const RHO_MARGIN: f64 = 1e-6;
const RHO_TOL: f64 = 1e-8;
const RHO_GRID: usize = 201;

#[derive(Debug, Error)]
pub enum PareError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("weight matrix is not symmetric")]
    AsymmetricWeights,
    #[error("indicator row {0} does not sum to one")]
    BadIndicator(usize),
    #[error("rho = {rho} outside the admissible interval ({lo}, {hi})")]
    RhoOutOfRange { rho: f64, lo: f64, hi: f64 },
    #[error("generalized least squares system is singular (design is rank deficient)")]
    SingularGls,
    #[error("profile likelihood maximization failed: {0}")]
    NonConvergence(String),
    #[error(transparent)]
    Extremes(#[from] ExtremesError),
}

type Result<T> = std::result::Result<T, PareError>;

/// Observations, indicator design and spatial weights for one parameter.
#[derive(Clone, Debug)]
pub struct PareInputs {
    pub z: DVector<f64>,
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl PareInputs {
    pub fn new(z: DVector<f64>, x: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let n = z.len();
        if x.nrows() != n || w.nrows() != n || w.ncols() != n {
            return Err(PareError::Dimension(format!(
                "z has {n} rows, X is {}×{}, W is {}×{}",
                x.nrows(),
                x.ncols(),
                w.nrows(),
                w.ncols()
            )));
        }
        for i in 0..n {
            if (x.row(i).sum() - 1.0).abs() > 1e-12 {
                return Err(PareError::BadIndicator(i));
            }
        }
        let scale = w.amax().max(1.0);
        if (&w - w.transpose()).amax() > 1e-12 * scale {
            return Err(PareError::AsymmetricWeights);
        }
        Ok(PareInputs { z, x, w })
    }

    pub fn from_parts(values: &[f64], stations: &StationSet, weights: &WeightMatrix) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(values),
            stations.indicator_matrix(),
            weights.entries.clone(),
        )
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn n_regions(&self) -> usize {
        self.x.ncols()
    }
}

/// Profile quantities at one value of ρ.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfilePoint {
    pub rho: f64,
    pub loglik: f64,
    pub beta: DVector<f64>,
    pub tau2: f64,
    /// `(Xᵀ Q X)⁻¹`.
    pub xtqx_inv: DMatrix<f64>,
}

/// The CAR model with `W` diagonalized once.
#[derive(Clone, Debug)]
pub struct CarModel {
    eigenvalues: DVector<f64>,
    z_t: DVector<f64>,
    x_t: DMatrix<f64>,
    rho_interval: (f64, f64),
}

impl CarModel {
    pub fn new(inputs: &PareInputs) -> Self {
        let eig = SymmetricEigen::new(inputs.w.clone());
        let vt = eig.eigenvectors.transpose();
        let z_t = &vt * &inputs.z;
        let x_t = &vt * &inputs.x;
        let rho_interval = rho_interval_from(&eig.eigenvalues);
        CarModel {
            eigenvalues: eig.eigenvalues,
            z_t,
            x_t,
            rho_interval,
        }
    }

    pub fn n(&self) -> usize {
        self.z_t.len()
    }

    /// Admissible ρ keeping `I − ρW` positive definite, shrunk by a small margin.
    pub fn rho_interval(&self) -> (f64, f64) {
        self.rho_interval
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn profile(&self, rho: f64) -> Result<ProfilePoint> {
        let (lo, hi) = self.rho_interval;
        if !(rho >= lo && rho <= hi) {
            return Err(PareError::RhoOutOfRange { rho, lo, hi });
        }
        let n = self.n();
        let r = self.x_t.ncols();
        let q: Vec<f64> = self.eigenvalues.iter().map(|l| 1.0 - rho * l).collect();
        let mut xtqx = DMatrix::zeros(r, r);
        let mut xtqz = DVector::zeros(r);
        for k in 0..n {
            let row = self.x_t.row(k);
            for a in 0..r {
                xtqz[a] += q[k] * row[a] * self.z_t[k];
                for b in 0..r {
                    xtqx[(a, b)] += q[k] * row[a] * row[b];
                }
            }
        }
        let chol = xtqx.clone().cholesky().ok_or(PareError::SingularGls)?;
        let beta = chol.solve(&xtqz);
        let resid = &self.z_t - &self.x_t * &beta;
        let rss: f64 = (0..n).map(|k| q[k] * resid[k] * resid[k]).sum();
        let tau2 = rss / n as f64;
        let logdet: f64 = q.iter().map(|v| v.ln()).sum();
        let nf = n as f64;
        let loglik = -0.5 * nf * (2.0 * std::f64::consts::PI * tau2).ln() + 0.5 * logdet - 0.5 * nf;
        Ok(ProfilePoint {
            rho,
            loglik,
            beta,
            tau2,
            xtqx_inv: chol.inverse(),
        })
    }
}

fn rho_interval_from(eigenvalues: &DVector<f64>) -> (f64, f64) {
    let lmax = eigenvalues.max();
    let lmin = eigenvalues.min();
    let hi = if lmax > 0.0 { 1.0 / lmax } else { f64::INFINITY };
    let lo = if lmin < 0.0 { 1.0 / lmin } else { -hi };
    (lo + RHO_MARGIN * lo.abs(), hi - RHO_MARGIN * hi.abs())
}

/// Profile log-likelihood, GLS coefficients and conditional variance at ρ.
pub fn car_profile_loglik(rho: f64, inputs: &PareInputs) -> Result<ProfilePoint> {
    CarModel::new(inputs).profile(rho)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PareFit {
    pub beta: Vec<f64>,
    pub beta_cov: Vec<Vec<f64>>,
    pub rho: f64,
    pub tau2: f64,
    pub loglik: f64,
    pub rho_interval: (f64, f64),
    /// ρ̂ sits at the edge of the admissible interval.
    pub boundary_rho: bool,
    /// Observations are fitted exactly by the region means (τ² = 0).
    pub degenerate: bool,
}

impl PareFit {
    pub fn beta_se(&self) -> Vec<f64> {
        (0..self.beta.len())
            .map(|j| self.beta_cov[j][j].max(0.0).sqrt())
            .collect()
    }
}

fn indicator_means(inputs: &PareInputs) -> Result<DVector<f64>> {
    let xtx = inputs.x.transpose() * &inputs.x;
    let chol = xtx.cholesky().ok_or(PareError::SingularGls)?;
    Ok(chol.solve(&(inputs.x.transpose() * &inputs.z)))
}

/// Maximum-likelihood fit of the CAR model.
pub fn fit_pare(inputs: &PareInputs) -> Result<PareFit> {
    let model = CarModel::new(inputs);
    let (lo, hi) = model.rho_interval();

    let ols = indicator_means(inputs)?;
    let resid = &inputs.z - &inputs.x * &ols;
    if resid.amax() <= 1e-12 * (1.0 + inputs.z.amax()) {
        let r = inputs.n_regions();
        return Ok(PareFit {
            beta: ols.iter().copied().collect(),
            beta_cov: vec![vec![0.0; r]; r],
            rho: 0.0_f64.clamp(lo, hi),
            tau2: 0.0,
            loglik: f64::INFINITY,
            rho_interval: (lo, hi),
            boundary_rho: false,
            degenerate: true,
        });
    }

    let objective = |rho: f64| model.profile(rho).map(|p| p.loglik).unwrap_or(f64::NAN);
    let (rho, ll) = grid_then_brent(objective, lo, hi, RHO_GRID, RHO_TOL);
    if !ll.is_finite() {
        return Err(PareError::NonConvergence(format!(
            "profile log-likelihood not finite on ({lo}, {hi})"
        )));
    }
    let best = model.profile(rho)?;
    let width = hi - lo;
    let boundary_rho = (rho - lo) <= RHO_MARGIN * width || (hi - rho) <= RHO_MARGIN * width;
    if boundary_rho {
        log::warn!("rho estimate {rho} is at the edge of ({lo}, {hi})");
    }
    let cov = &best.xtqx_inv * best.tau2;
    let r = cov.nrows();
    Ok(PareFit {
        beta: best.beta.iter().copied().collect(),
        beta_cov: (0..r).map(|a| (0..r).map(|b| cov[(a, b)]).collect()).collect(),
        rho,
        tau2: best.tau2,
        loglik: best.loglik,
        rho_interval: (lo, hi),
        boundary_rho,
        degenerate: false,
    })
}

/// Mean and standard error of `exp(L)` for `L` with mean `beta_log` and
/// variance `var_log`: second-order Taylor for the mean, first-order for the
/// standard error.
pub fn backtransform_logscale(beta_log: f64, var_log: f64) -> (f64, f64) {
    let var = var_log.max(0.0);
    let e = beta_log.exp();
    (e * (1.0 + var / 2.0), e * var.sqrt())
}

/// Per-parameter PARE fits for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PareParameterFits {
    /// Fit to log(scale).
    pub log_scale: PareFit,
    pub shape: PareFit,
    pub rate: PareFit,
}

/// Region parameters and return levels from the three PARE fits. The
/// scale–shape covariance is taken as zero.
pub fn pare_return_levels(
    fits: &PareParameterFits,
    region_ids: &[String],
    threshold: f64,
    periods: &[f64],
) -> Result<RegionEstimates> {
    let r = region_ids.len();
    for f in [&fits.log_scale, &fits.shape, &fits.rate] {
        if f.beta.len() != r {
            return Err(PareError::Dimension(format!(
                "{} coefficients for {r} regions",
                f.beta.len()
            )));
        }
    }
    let estimates = (0..r)
        .map(|j| {
            let (scale, scale_se) =
                backtransform_logscale(fits.log_scale.beta[j], fits.log_scale.beta_cov[j][j]);
            let shape = fits.shape.beta[j];
            let rate = fits.rate.beta[j];
            let cov = Matrix3::from_diagonal(&nalgebra::Vector3::new(
                scale_se * scale_se,
                fits.shape.beta_cov[j][j].max(0.0),
                fits.rate.beta_cov[j][j].max(0.0),
            ));
            let params = GpdParams {
                threshold,
                scale,
                shape,
                rate,
            };
            RegionEstimate::new(region_ids[j].clone(), params, cov, periods).map_err(PareError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionEstimates {
        method: Method::Pare,
        estimates,
    })
}

/// Fits log(scale), shape and rate across stations and converts to region
/// estimates.
pub fn pare_regions(
    station_fits: &[GpdFit],
    stations: &StationSet,
    weights: &WeightMatrix,
    region_ids: &[String],
    threshold: f64,
    periods: &[f64],
) -> Result<(PareParameterFits, RegionEstimates)> {
    if station_fits.len() != stations.len() {
        return Err(PareError::Dimension(format!(
            "{} fits for {} stations",
            station_fits.len(),
            stations.len()
        )));
    }
    let fit_one = |values: Vec<f64>| -> Result<PareFit> {
        fit_pare(&PareInputs::from_parts(&values, stations, weights)?)
    };
    let fits = PareParameterFits {
        log_scale: fit_one(station_fits.iter().map(|f| f.scale.ln()).collect())?,
        shape: fit_one(station_fits.iter().map(|f| f.shape).collect())?,
        rate: fit_one(station_fits.iter().map(|f| f.rate).collect())?,
    };
    let est = pare_return_levels(&fits, region_ids, threshold, periods)?;
    Ok((fits, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Block inverse-distance weights for `counts` stations per region, jittered.
    fn block_weights(counts: &[usize], d: &[Vec<f64>], seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n: usize = counts.iter().sum();
        let region: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(j, &c)| std::iter::repeat(j).take(c))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dist = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let base = if region[i] == region[j] { 1.0 } else { d[region[i]][region[j]] };
                let v: f64 = base + 0.1 * rng.sample::<f64, _>(StandardNormal);
                dist[(i, j)] = v;
                dist[(j, i)] = v;
            }
        }
        let mut x = DMatrix::zeros(n, counts.len());
        for (i, &r) in region.iter().enumerate() {
            x[(i, r)] = 1.0;
        }
        (dist.map(|v| 1.0 / v), x)
    }

    fn random_inputs(seed: u64, counts: &[usize]) -> PareInputs {
        let d = vec![
            vec![0.0, 7.7, 27.6],
            vec![7.7, 0.0, 7.9],
            vec![27.6, 7.9, 0.0],
        ];
        let (w, x) = block_weights(counts, &d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let beta = [0.2, 0.23, 0.16];
        let z = DVector::from_fn(x.nrows(), |i, _| {
            let r = (0..3).find(|&j| x[(i, j)] == 1.0).unwrap();
            beta[r] + 0.04 * rng.sample::<f64, _>(StandardNormal)
        });
        PareInputs::new(z, x, w).unwrap()
    }

    fn dense_loglik(inputs: &PareInputs, rho: f64, beta: &DVector<f64>, tau2: f64) -> f64 {
        let n = inputs.n();
        let q = DMatrix::identity(n, n) - &inputs.w * rho;
        let sigma = q.try_inverse().unwrap() * tau2;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let chol = sigma.cholesky().unwrap();
        let r = &inputs.z - &inputs.x * beta;
        let quad = r.dot(&chol.solve(&r));
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
    }

    #[test]
    fn rho_zero_gives_group_means() {
        let inputs = random_inputs(1, &[4, 5, 3]);
        let p = car_profile_loglik(0.0, &inputs).unwrap();
        let mut pooled = 0.0;
        for j in 0..3 {
            let members: Vec<f64> = (0..inputs.n())
                .filter(|&i| inputs.x[(i, j)] == 1.0)
                .map(|i| inputs.z[i])
                .collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((p.beta[j] - mean).abs() < 1e-12);
            pooled += members.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        assert!((p.tau2 - pooled / inputs.n() as f64).abs() < 1e-14);
    }

    #[test]
    fn profile_matches_dense_density() {
        let inputs = random_inputs(2, &[6, 8, 5]);
        let model = CarModel::new(&inputs);
        let (lo, hi) = model.rho_interval();
        for rho in [lo * 0.5, 0.0, hi * 0.3, hi * 0.9] {
            let p = model.profile(rho).unwrap();
            let dense = dense_loglik(&inputs, rho, &p.beta, p.tau2);
            assert!((p.loglik - dense).abs() < 1e-8 * dense.abs(), "{rho}: {} vs {dense}", p.loglik);
        }
    }

    #[test]
    fn rho_outside_interval_rejected() {
        let inputs = random_inputs(3, &[3, 3, 3]);
        let model = CarModel::new(&inputs);
        let (_, hi) = model.rho_interval();
        assert!(matches!(model.profile(hi * 1.5), Err(PareError::RhoOutOfRange { .. })));
    }

    #[test]
    fn q_positive_definite_at_estimate() {
        let inputs = random_inputs(4, &[10, 12, 9]);
        let fit = fit_pare(&inputs).unwrap();
        let n = inputs.n();
        let q = DMatrix::identity(n, n) - &inputs.w * fit.rho;
        let eig = SymmetricEigen::new(q);
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn estimate_beats_grid() {
        let inputs = random_inputs(5, &[10, 12, 9]);
        let fit = fit_pare(&inputs).unwrap();
        let model = CarModel::new(&inputs);
        let (lo, hi) = model.rho_interval();
        for k in 0..101 {
            let rho = lo + (hi - lo) * k as f64 / 100.0;
            assert!(fit.loglik >= model.profile(rho).unwrap().loglik - 1e-12);
        }
    }

    #[test]
    fn exact_region_means_are_recovered() {
        let mut inputs = random_inputs(6, &[4, 4, 4]);
        let beta0 = [1.5, -0.3, 2.0];
        for i in 0..inputs.n() {
            let r = (0..3).find(|&j| inputs.x[(i, j)] == 1.0).unwrap();
            inputs.z[i] = beta0[r];
        }
        let fit = fit_pare(&inputs).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.tau2, 0.0);
        for j in 0..3 {
            assert!((fit.beta[j] - beta0[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let inputs = random_inputs(7, &[5, 6, 4]);
        let n = inputs.n();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted = PareInputs::new(
            DVector::from_fn(n, |i, _| inputs.z[perm[i]]),
            DMatrix::from_fn(n, 3, |i, j| inputs.x[(perm[i], j)]),
            DMatrix::from_fn(n, n, |i, j| inputs.w[(perm[i], perm[j])]),
        )
        .unwrap();
        let a = fit_pare(&inputs).unwrap();
        let b = fit_pare(&permuted).unwrap();
        for j in 0..3 {
            assert!((a.beta[j] - b.beta[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let z = DVector::from_column_slice(&[1.0, 2.0]);
        assert!(matches!(PareInputs::new(z.clone(), x.clone(), w), Err(PareError::AsymmetricWeights)));
        let bad_x = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(
            PareInputs::new(z, bad_x, DMatrix::identity(2, 2)),
            Err(PareError::BadIndicator(1))
        ));
    }

    #[test]
    fn backtransform_zero_variance() {
        let (s, se) = backtransform_logscale(215.08_f64.ln(), 0.0);
        assert_eq!(s, 215.08_f64.ln().exp());
        assert_eq!(se, 0.0);
    }

    #[test]
    fn backtransform_monte_carlo() {
        let (m, v): (f64, f64) = (5.0, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // antithetic pairs, 10^6 draws in total
        let pairs = 500_000;
        let mean: f64 = (0..pairs)
            .map(|_| {
                let e = v.sqrt() * rng.sample::<f64, _>(StandardNormal);
                (m + e).exp() + (m - e).exp()
            })
            .sum::<f64>()
            / (2 * pairs) as f64;
        let (approx, _) = backtransform_logscale(m, v);
        assert!(((mean - approx) / mean).abs() < 1e-4, "{mean} vs {approx}");
    }

    #[test]
    fn shape_only_variance_drives_se() {
        let fit = |beta: f64, var: f64| PareFit {
            beta: vec![beta],
            beta_cov: vec![vec![var]],
            rho: 0.0,
            tau2: 1.0,
            loglik: 0.0,
            rho_interval: (-1.0, 1.0),
            boundary_rho: false,
            degenerate: false,
        };
        let fits = PareParameterFits {
            log_scale: fit(215.0_f64.ln(), 4e-4),
            shape: fit(0.2, 0.0),
            rate: fit(0.06, 0.0),
        };
        let est = pare_return_levels(&fits, &["1".into()], 254.0, &[100.0]).unwrap();
        let e = &est.estimates[0];
        let (_, grad) = crate::extremes::return_level_tenths(&e.params(), 100.0, 365.25).unwrap();
        let expected = grad[0].abs() * e.scale_se / 254.0;
        assert!((e.return_levels[0].se - expected).abs() < 1e-12);
    }
}
