//! Region-level GPD parameters and return levels shared by all estimators.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::extremes::{return_level, ExtremesError, GpdParams, ReturnLevelEstimate, DAYS_PER_YEAR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pare,
    #[serde(alias = "kriging")]
    BlockKriging,
    RegionalMax,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pare, Method::BlockKriging, Method::RegionalMax];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pare => "pare",
            Method::BlockKriging => "block_kriging",
            Method::RegionalMax => "regional_max",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pare" => Ok(Method::Pare),
            "block_kriging" | "kriging" | "krige" => Ok(Method::BlockKriging),
            "regional_max" | "regional-max" => Ok(Method::RegionalMax),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEstimate {
    pub region_id: String,
    pub threshold: f64,
    pub scale: f64,
    pub scale_se: f64,
    pub shape: f64,
    pub shape_se: f64,
    pub rate: f64,
    pub rate_se: f64,
    /// Covariance of (scale, shape, rate) used for return-level errors.
    pub cov: [[f64; 3]; 3],
    pub return_levels: Vec<ReturnLevelEstimate>,
}

impl RegionEstimate {
    /// Computes return levels for `periods` from the parameters and covariance.
    pub fn new(
        region_id: impl Into<String>,
        params: GpdParams,
        cov: Matrix3<f64>,
        periods: &[f64],
    ) -> Result<Self, ExtremesError> {
        let return_levels = periods
            .iter()
            .map(|&n| return_level(&params, &cov, n, DAYS_PER_YEAR))
            .collect::<Result<Vec<_>, _>>()?;
        let se = |k: usize| cov[(k, k)].max(0.0).sqrt();
        Ok(RegionEstimate {
            region_id: region_id.into(),
            threshold: params.threshold,
            scale: params.scale,
            scale_se: se(0),
            shape: params.shape,
            shape_se: se(1),
            rate: params.rate,
            rate_se: se(2),
            cov: cov.transpose().into(),
            return_levels,
        })
    }

    pub fn params(&self) -> GpdParams {
        GpdParams {
            threshold: self.threshold,
            scale: self.scale,
            shape: self.shape,
            rate: self.rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEstimates {
    pub method: Method,
    pub estimates: Vec<RegionEstimate>,
}

impl RegionEstimates {
    pub fn get(&self, region_id: &str) -> Option<&RegionEstimate> {
        self.estimates.iter().find(|e| e.region_id == region_id)
    }
}
