use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::cascade::StageQuotas;

/// Affine response time `base + Σ per_stage[s] · q_s` against a deadline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub base_ms: f64,
    pub per_stage_ms: [f64; 3],
    pub deadline_ms: f64,
}

impl LatencyModel {
    pub fn new(base_ms: f64, per_stage_ms: [f64; 3], deadline_ms: f64) -> Result<Self> {
        let m = Self {
            base_ms,
            per_stage_ms,
            deadline_ms,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_ms.is_finite() && self.base_ms >= 0.0) {
            return Err(Error::config("latency.base_ms", "must be finite and >= 0"));
        }
        for (i, a) in self.per_stage_ms.iter().enumerate() {
            if !(a.is_finite() && *a >= 0.0) {
                return Err(Error::config(
                    format!("latency.per_stage_ms[{i}]"),
                    "must be finite and >= 0",
                ));
            }
        }
        if !(self.deadline_ms.is_finite() && self.deadline_ms > 0.0) {
            return Err(Error::config("latency.deadline_ms", "must be positive"));
        }
        Ok(())
    }

    pub fn latency(&self, q: StageQuotas) -> f64 {
        self.base_ms
            + self
                .per_stage_ms
                .iter()
                .zip(q)
                .map(|(a, q)| a * q as f64)
                .sum::<f64>()
    }

    pub fn meets_deadline(&self, q: StageQuotas) -> bool {
        self.latency(q) <= self.deadline_ms
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            base_ms: 5.0,
            per_stage_ms: [0.5, 2.0, 8.0],
            deadline_ms: 300.0,
        }
    }
}

pub fn latency(model: &LatencyModel, q1: u32, q2: u32, q3: u32) -> f64 {
    model.latency([q1, q2, q3])
}

/// Cap triples whose worst-case latency meets the deadline, in input order.
pub fn feasible_caps(model: &LatencyModel, candidate_caps: &[StageQuotas]) -> Vec<StageQuotas> {
    candidate_caps
        .iter()
        .copied()
        .filter(|&c| model.meets_deadline(c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(deadline: f64) -> LatencyModel {
        LatencyModel::new(5.0, [0.01, 0.02, 0.1], deadline).unwrap()
    }

    #[test]
    fn affine_examples() {
        assert!((latency(&model(300.0), 1000, 100, 50) - 22.0).abs() < 1e-12);
        let flat = LatencyModel::new(7.0, [0.0; 3], 10.0).unwrap();
        assert_eq!(latency(&flat, 10, 20, 30), 7.0);
        assert_eq!(latency(&model(300.0), 0, 0, 0), 5.0);
    }

    #[test]
    fn filter_examples() {
        let m = model(300.0);
        assert!((m.latency([10000, 2000, 350]) - 180.0).abs() < 1e-9);
        assert_eq!(feasible_caps(&m, &[[10000, 2000, 350]]), vec![[10000, 2000, 350]]);
        assert!(feasible_caps(&m, &[]).is_empty());
        assert!(feasible_caps(&model(4.0), &[[0, 0, 0], [1, 1, 1]]).is_empty());
        assert_eq!(
            feasible_caps(&m, &[[30000, 1, 1], [1, 1, 1]]),
            vec![[1, 1, 1]]
        );
    }

    #[test]
    fn rejects_negative_coefficients() {
        assert!(LatencyModel::new(-1.0, [0.0; 3], 1.0).is_err());
        assert!(LatencyModel::new(0.0, [0.0, -1.0, 0.0], 1.0).is_err());
        assert!(LatencyModel::new(0.0, [0.0; 3], 0.0).is_err());
    }
}
