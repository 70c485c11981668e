//! Per-request revenue curves and the logarithmic revenue model.
//!
//! A [`RevenueCurve`] is the discrete step function obtained by replaying the
//! cascade at every candidate-set size `q = 1..=cap`. It is approximated by
//! `R * ln(q) + B`, fitted by ordinary least squares on the regressor `ln q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::Stage;

/// Empirical revenue as a function of candidate-set size.
///
/// Point `k` of `revenue` is the revenue at `q = k + 1`. Construction applies
/// a running maximum so the stored curve is always nondecreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RevenueCurve {
    request_key: String,
    stage: Stage,
    revenue: Vec<f64>,
}

impl RevenueCurve {
    /// Builds a curve from revenue samples at `q = 1, 2, ...`.
    pub fn from_samples(
        request_key: impl Into<String>,
        stage: Stage,
        samples: impl IntoIterator<Item = f64>,
    ) -> Result<Self> {
        let mut revenue = Vec::new();
        let mut running = 0.0_f64;
        for (i, y) in samples.into_iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::Curve(format!("non-finite revenue at q={}", i + 1)));
            }
            if y < 0.0 {
                return Err(Error::Curve(format!("negative revenue {y} at q={}", i + 1)));
            }
            running = if i == 0 { y } else { running.max(y) };
            revenue.push(running);
        }
        Ok(Self {
            request_key: request_key.into(),
            stage,
            revenue,
        })
    }

    /// Builds a curve from explicit `(q, revenue)` pairs. The `q` values must
    /// be exactly `1, 2, ..., n` in order.
    pub fn from_points(
        request_key: impl Into<String>,
        stage: Stage,
        points: &[(u32, f64)],
    ) -> Result<Self> {
        for (i, &(q, _)) in points.iter().enumerate() {
            if q as usize != i + 1 {
                return Err(Error::Curve(format!(
                    "q values must be contiguous from 1; found q={q} at position {i}"
                )));
            }
        }
        Self::from_samples(request_key, stage, points.iter().map(|&(_, y)| y))
    }

    pub fn request_key(&self) -> &str {
        &self.request_key
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Revenue values for `q = 1..=len`.
    pub fn revenue(&self) -> &[f64] {
        &self.revenue
    }

    pub fn len(&self) -> usize {
        self.revenue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.revenue.is_empty()
    }

    /// Revenue at quota `q`. Quotas past the end read the flat tail.
    pub fn at(&self, q: u32) -> Option<f64> {
        if q == 0 || self.revenue.is_empty() {
            return None;
        }
        let idx = (q as usize).min(self.revenue.len()) - 1;
        Some(self.revenue[idx])
    }

    /// `(q, revenue)` pairs.
    pub fn points(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.revenue
            .iter()
            .enumerate()
            .map(|(i, &y)| (i as u32 + 1, y))
    }
}

/// Fitted `R * ln(q) + B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRevenueModel {
    pub request_key: String,
    #[serde(rename = "stage_id")]
    pub stage: Stage,
    pub r_coeff: f64,
    pub b_offset: f64,
}

impl LogRevenueModel {
    pub fn new(request_key: impl Into<String>, stage: Stage, r_coeff: f64, b_offset: f64) -> Result<Self> {
        if !r_coeff.is_finite() || !b_offset.is_finite() {
            return Err(Error::Fit("model coefficients must be finite".into()));
        }
        if r_coeff < 0.0 {
            return Err(Error::Fit(format!("r_coeff must be >= 0, got {r_coeff}")));
        }
        Ok(Self {
            request_key: request_key.into(),
            stage,
            r_coeff,
            b_offset,
        })
    }

    pub fn evaluate(&self, q: f64) -> Result<f64> {
        evaluate(self.r_coeff, self.b_offset, q)
    }
}

/// `r * ln(q) + b`; fails for `q <= 0`.
pub fn evaluate(r_coeff: f64, b_offset: f64, q: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(Error::Domain(format!("ln(q) undefined for q = {q}")));
    }
    Ok(r_coeff * q.ln() + b_offset)
}

/// Least-squares fit of `R * ln(q) + B` to the curve.
///
/// A negative slope is clamped to `R = 0` with `B` set to the mean revenue.
pub fn fit_log_model(curve: &RevenueCurve) -> Result<LogRevenueModel> {
    let (r, b) = fit_log_coefficients(curve.revenue())?;
    LogRevenueModel::new(curve.request_key(), curve.stage(), r, b)
}

/// Closed-form OLS on `(ln q, y)` for `y` sampled at `q = 1..=n`.
pub fn fit_log_coefficients(revenue: &[f64]) -> Result<(f64, f64)> {
    let n = revenue.len();
    if n < 2 {
        return Err(Error::Fit(format!("need at least 2 points, got {n}")));
    }
    if let Some(bad) = revenue.iter().find(|y| !y.is_finite()) {
        return Err(Error::Fit(format!("non-finite revenue {bad}")));
    }
    if revenue.iter().all(|&y| y == revenue[0]) {
        return Ok((0.0, revenue[0]));
    }
    let nf = n as f64;
    let xs: Vec<f64> = (1..=n).map(|q| (q as f64).ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / nf;
    let y_mean = revenue.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(revenue) {
        let dx = x - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    let slope = sxy / sxx;
    if slope < 0.0 {
        return Ok((0.0, y_mean));
    }
    Ok((slope, y_mean - slope * x_mean))
}

/// Fit-quality summary in the column order MAE, MAPE(%), WMAPE(%), R2, average revenue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mae: f64,
    /// `None` when every observed value is zero.
    pub mape_pct: Option<f64>,
    pub wmape_pct: f64,
    pub r2: f64,
    pub mean_observed: f64,
}

impl FitReport {
    pub const CSV_HEADER: &'static str = "mae,mape_pct,wmape_pct,r2,mean_observed";

    pub fn csv_row(&self) -> String {
        let mape = match self.mape_pct {
            Some(m) => format!("{m}"),
            None => "NaN".to_string(),
        };
        format!(
            "{},{},{},{},{}",
            self.mae, mape, self.wmape_pct, self.r2, self.mean_observed
        )
    }

    /// Metrics from paired observed/predicted values.
    pub fn from_pairs(observed: &[f64], predicted: &[f64]) -> Result<Self> {
        if observed.len() != predicted.len() {
            return Err(Error::LengthMismatch {
                left: observed.len(),
                right: predicted.len(),
            });
        }
        if observed.is_empty() {
            return Err(Error::Fit("cannot score an empty curve".into()));
        }
        let n = observed.len() as f64;
        let mut abs_sum = 0.0;
        let mut obs_abs_sum = 0.0;
        let mut ape_sum = 0.0;
        let mut ape_n = 0usize;
        let mut ss_res = 0.0;
        let mean = observed.iter().sum::<f64>() / n;
        let mut ss_tot = 0.0;
        for (&y, &yhat) in observed.iter().zip(predicted) {
            let err = (y - yhat).abs();
            abs_sum += err;
            obs_abs_sum += y.abs();
            if y != 0.0 {
                ape_sum += err / y.abs();
                ape_n += 1;
            }
            ss_res += (y - yhat) * (y - yhat);
            ss_tot += (y - mean) * (y - mean);
        }
        let mape_pct = (ape_n > 0).then(|| 100.0 * ape_sum / ape_n as f64);
        let wmape_pct = if obs_abs_sum > 0.0 {
            100.0 * abs_sum / obs_abs_sum
        } else if abs_sum == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let r2 = if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        };
        Ok(Self {
            mae: abs_sum / n,
            mape_pct,
            wmape_pct,
            r2,
            mean_observed: mean,
        })
    }
}

/// Scores a model against the curve it approximates.
pub fn fit_metrics(curve: &RevenueCurve, model: &LogRevenueModel) -> Result<FitReport> {
    let predicted = predictions(curve, model);
    FitReport::from_pairs(curve.revenue(), &predicted)
}

/// Pooled metrics over many curve/model pairs, treating every point of every
/// curve as one observation.
pub fn pooled_fit_metrics<'a, I>(pairs: I) -> Result<FitReport>
where
    I: IntoIterator<Item = (&'a RevenueCurve, &'a LogRevenueModel)>,
{
    let mut observed = Vec::new();
    let mut predicted = Vec::new();
    for (curve, model) in pairs {
        observed.extend_from_slice(curve.revenue());
        predicted.extend(predictions(curve, model));
    }
    FitReport::from_pairs(&observed, &predicted)
}

fn predictions(curve: &RevenueCurve, model: &LogRevenueModel) -> Vec<f64> {
    curve
        .points()
        .map(|(q, _)| model.r_coeff * (q as f64).ln() + model.b_offset)
        .collect()
}
