// SPDX-License-Identifier: Apache-2.0

//! The spatio-temporal resource configuration attached to a pod.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::ConfigPoint;

#[derive(Debug, Error, PartialEq)]
pub enum ResourceError {
    #[error("sm_partition must be in (0, 100], got {0}")]
    SmPartition(f64),
    #[error("quota_request must be in (0, 1], got {0}")]
    QuotaRequest(f64),
    #[error("quota_limit must be in [quota_request, 1], got request={request} limit={limit}")]
    QuotaLimit { request: f64, limit: f64 },
}

/// `sm_partition` is a percent of the GPU's SMs; quotas are fractions of the
/// scheduling window. `quota_request` is the guaranteed share, `quota_limit`
/// the elastic ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceConfig {
    pub sm_partition: f64,
    pub quota_request: f64,
    pub quota_limit: f64,
    pub gpu_mem_mb: u64,
}

impl ResourceConfig {
    pub fn new(
        sm_partition: f64,
        quota_request: f64,
        quota_limit: f64,
        gpu_mem_mb: u64,
    ) -> Result<Self, ResourceError> {
        let cfg = Self {
            sm_partition,
            quota_request,
            quota_limit,
            gpu_mem_mb,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration for a profiled point; the limit is the point's quota plus
    /// `elastic_headroom`, capped at a full window.
    pub fn from_point(point: ConfigPoint, elastic_headroom: f64, gpu_mem_mb: u64) -> Result<Self, ResourceError> {
        let limit = (point.quota() + elastic_headroom.max(0.0)).min(1.0);
        Self::new(point.sm_partition(), point.quota(), limit, gpu_mem_mb)
    }

    pub fn validate(&self) -> Result<(), ResourceError> {
        let sm = self.sm_partition;
        if !(sm.is_finite() && sm > 0.0 && sm <= 100.0) {
            return Err(ResourceError::SmPartition(sm));
        }
        let req = self.quota_request;
        if !(req.is_finite() && req > 0.0 && req <= 1.0) {
            return Err(ResourceError::QuotaRequest(req));
        }
        let lim = self.quota_limit;
        if !(lim.is_finite() && lim >= req && lim <= 1.0) {
            return Err(ResourceError::QuotaLimit {
                request: req,
                limit: lim,
            });
        }
        Ok(())
    }

    /// The same configuration holding every SM (time sharing only).
    pub fn full_sm(self) -> Self {
        Self {
            sm_partition: 100.0,
            ..self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ResourceConfig::new(24.0, 0.3, 0.8, 1000).is_ok());
        assert!(matches!(
            ResourceConfig::new(24.0, 0.9, 0.8, 1000),
            Err(ResourceError::QuotaLimit { .. })
        ));
        assert!(ResourceConfig::new(0.0, 0.3, 0.8, 1000).is_err());
        assert!(ResourceConfig::new(24.0, 0.0, 0.8, 1000).is_err());
        assert!(ResourceConfig::new(24.0, 0.3, 1.2, 1000).is_err());
    }

    #[test]
    fn elastic_limit_is_capped() {
        let p = ConfigPoint::new(12.0, 0.8).unwrap();
        let cfg = ResourceConfig::from_point(p, 0.5, 0).unwrap();
        assert_eq!(cfg.quota_request, 0.8);
        assert_eq!(cfg.quota_limit, 1.0);
        assert_eq!(cfg.full_sm().sm_partition, 100.0);
    }
}
