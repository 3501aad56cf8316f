//! Cumulative wheel-tick logs and their conversion to constant-rate segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{rates_from_ticks, RateSegment};

/// Timestamps closer than this are treated as the same instant.
pub const TIME_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometrySample {
    pub t: f64,
    pub ticks: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryLog {
    pub ticks_per_rev: f64,
    pub samples: Vec<OdometrySample>,
}

impl OdometryLog {
    pub fn new(ticks_per_rev: f64, samples: Vec<OdometrySample>) -> Result<Self> {
        if !(ticks_per_rev > 0.0) {
            return Err(Error::Schema(format!("ticks_per_rev must be positive, got {ticks_per_rev}")));
        }
        let m = samples.first().map(|s| s.ticks.len()).unwrap_or(0);
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::Schema(format!("odometry timestamps not increasing at sample {}", i + 1)));
            }
        }
        if let Some(s) = samples.iter().find(|s| s.ticks.len() != m) {
            return Err(Error::DimensionMismatch { expected: m, got: s.ticks.len() });
        }
        Ok(Self { ticks_per_rev, samples })
    }

    pub fn wheel_count(&self) -> usize {
        self.samples.first().map(|s| s.ticks.len()).unwrap_or(0)
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// Index of the sample at time `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let i = self.samples.partition_point(|s| s.t < t - TIME_TOLERANCE);
        match self.samples.get(i) {
            Some(s) if (s.t - t).abs() <= TIME_TOLERANCE => Ok(i),
            _ => Err(Error::OdometryGap(format!("no odometry sample at t = {t}"))),
        }
    }

    /// Constant-rate segments between the samples at `tj` and `tk`.
    pub fn segments(&self, tj: f64, tk: f64) -> Result<Vec<RateSegment>> {
        let (a, b) = (self.index_of(tj)?, self.index_of(tk)?);
        if b <= a {
            return Err(Error::NonPositiveInterval(tk - tj));
        }
        Ok((a..b).map(|i| self.segment(i)).collect())
    }

    /// Segment between samples `i` and `i + 1`.
    pub fn segment(&self, i: usize) -> RateSegment {
        let (s0, s1) = (&self.samples[i], &self.samples[i + 1]);
        let dt = s1.t - s0.t;
        let d: Vec<i64> = s1.ticks.iter().zip(&s0.ticks).map(|(a, b)| a - b).collect();
        RateSegment { omega: rates_from_ticks(&d, self.ticks_per_rev, dt), dt }
    }

    /// Tick counts accumulated between `tj` and `tk`.
    pub fn delta_ticks(&self, tj: f64, tk: f64) -> Result<Vec<f64>> {
        let (a, b) = (self.index_of(tj)?, self.index_of(tk)?);
        if b <= a {
            return Err(Error::NonPositiveInterval(tk - tj));
        }
        Ok(self.samples[b].ticks.iter().zip(&self.samples[a].ticks).map(|(x, y)| (x - y) as f64).collect())
    }
}
