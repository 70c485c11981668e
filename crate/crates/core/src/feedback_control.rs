//! Session-level pacing of the dual variable.
//!
//! Each stage runs one position-form PID controller. The measured value is the
//! realized total quota of a session, the reference is the compute budget, and
//! the actuator maps the control signal back to `α`:
//!
//! ```text
//! e(t)     = r(t) - y(t)
//! u(t)     = kp e(t) + ki Σ e(k) + kd (e(t) - e(t-1))
//! α(t + 1) = α(0) · exp(-u(t)) · scaler
//! ```
//!
//! Over budget gives `e < 0`, so `u` drops and `α` rises, which shrinks every
//! quota.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Result<Self> {
        for (name, v) in [("kp", kp), ("ki", ki), ("kd", kd)] {
            if !v.is_finite() {
                return Err(Error::Domain(format!("gain {name} must be finite, got {v}")));
            }
        }
        Ok(Self { kp, ki, kd })
    }
}

impl Default for PidGains {
    /// Integral-heavy: best step recovery in a gain sweep on reference traffic.
    fn default() -> Self {
        Self {
            kp: 0.1,
            ki: 0.9,
            kd: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidController {
    gains: PidGains,
    error_sum: f64,
    prev_error: f64,
    base_value: f64,
    session_index: u64,
    /// Symmetric bound on `error_sum`; `None` disables anti-windup.
    integral_clamp: Option<f64>,
}

impl PidController {
    pub fn new(gains: PidGains, base_value: f64) -> Result<Self> {
        if !(base_value > 0.0) || !base_value.is_finite() {
            return Err(Error::Domain(format!(
                "base value must be positive and finite, got {base_value}"
            )));
        }
        Ok(Self {
            gains,
            error_sum: 0.0,
            prev_error: 0.0,
            base_value,
            session_index: 0,
            integral_clamp: None,
        })
    }

    pub fn with_integral_clamp(mut self, clamp: Option<f64>) -> Result<Self> {
        if let Some(c) = clamp {
            if !(c > 0.0) {
                return Err(Error::Domain(format!("integral clamp must be positive, got {c}")));
            }
        }
        self.integral_clamp = clamp;
        Ok(self)
    }

    pub fn gains(&self) -> PidGains {
        self.gains
    }

    pub fn error_sum(&self) -> f64 {
        self.error_sum
    }

    pub fn prev_error(&self) -> f64 {
        self.prev_error
    }

    pub fn base_value(&self) -> f64 {
        self.base_value
    }

    pub fn session_index(&self) -> u64 {
        self.session_index
    }

    /// Consumes one error sample and returns the control signal.
    ///
    /// A non-finite error is refused and leaves the state untouched.
    pub fn step(&mut self, error: f64) -> Result<f64> {
        if !error.is_finite() {
            return Err(Error::NonFinite(error));
        }
        let mut sum = self.error_sum + error;
        if let Some(c) = self.integral_clamp {
            sum = sum.clamp(-c, c);
        }
        let PidGains { kp, ki, kd } = self.gains;
        let u = kp * error + ki * sum + kd * (error - self.prev_error);
        self.error_sum = sum;
        self.prev_error = error;
        self.session_index += 1;
        Ok(u)
    }

    /// Clears the error history but keeps gains and base value.
    pub fn reset(&mut self) {
        self.error_sum = 0.0;
        self.prev_error = 0.0;
        self.session_index = 0;
    }
}

/// `reference - measured`.
pub fn pid_error(reference: f64, measured: f64) -> f64 {
    reference - measured
}

/// Exponential actuator `base · exp(-u) · scaler`.
pub fn actuate(base_value: f64, control_signal: f64, scaler: f64) -> Result<f64> {
    if !(base_value > 0.0) {
        return Err(Error::Domain(format!("base value must be positive, got {base_value}")));
    }
    if !(scaler > 0.0) {
        return Err(Error::Domain(format!("scaler must be positive, got {scaler}")));
    }
    let next = base_value * (-control_signal).exp() * scaler;
    // exp underflow/overflow would make α invalid
    Ok(next.clamp(f64::MIN_POSITIVE, f64::MAX))
}

/// Per-session traffic-share multipliers, normalized to mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerProfile {
    pub session_counts: Vec<u64>,
    pub scalers: Vec<f64>,
}

impl ScalerProfile {
    /// All ones; feedback alone has to absorb traffic changes.
    pub fn uniform(sessions: usize) -> Self {
        Self {
            session_counts: vec![1; sessions],
            scalers: vec![1.0; sessions],
        }
    }

    /// Scaler for session `t`, wrapping around the profile length.
    pub fn scaler(&self, t: usize) -> f64 {
        if self.scalers.is_empty() {
            1.0
        } else {
            self.scalers[t % self.scalers.len()]
        }
    }
}

/// `scaler[t] = counts[t] · S / Σ counts`. Empty sessions borrow the smallest
/// positive scaler so the actuator never sees zero.
pub fn compute_scalers(session_counts: &[u64]) -> Result<ScalerProfile> {
    let total: u64 = session_counts.iter().sum();
    if total == 0 {
        return Err(Error::Degenerate("traffic profile has no requests".into()));
    }
    let mean = total as f64 / session_counts.len() as f64;
    let mut scalers: Vec<f64> = session_counts.iter().map(|&c| c as f64 / mean).collect();
    let min_pos = scalers
        .iter()
        .copied()
        .filter(|&s| s > 0.0)
        .fold(f64::INFINITY, f64::min);
    for s in &mut scalers {
        if *s == 0.0 {
            *s = min_pos;
        }
    }
    Ok(ScalerProfile {
        session_counts: session_counts.to_vec(),
        scalers,
    })
}

/// One row of a gain search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainScore {
    pub gains: PidGains,
    pub score: f64,
}

pub fn default_kp_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.1).collect()
}

pub fn default_ki_grid() -> Vec<f64> {
    (0..=15).map(|i| i as f64 * 0.1).collect()
}

pub fn default_kd_grid() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.5]
}

/// Exhaustive search over `kp × ki × kd`; `score` is lower-is-better (for
/// example the mean absolute relative tracking error of a replay). Returns
/// every evaluated point sorted best first; ties keep grid order.
pub fn grid_search_gains<F>(kp: &[f64], ki: &[f64], kd: &[f64], mut score: F) -> Vec<GainScore>
where
    F: FnMut(PidGains) -> f64,
{
    let mut out = Vec::with_capacity(kp.len() * ki.len() * kd.len());
    for &p in kp {
        for &i in ki {
            for &d in kd {
                let gains = PidGains { kp: p, ki: i, kd: d };
                let s = score(gains);
                out.push(GainScore {
                    gains,
                    score: if s.is_nan() { f64::INFINITY } else { s },
                });
            }
        }
    }
    out.sort_by(|a, b| a.score.total_cmp(&b.score));
    out
}

/// Replays a closed loop against a cost function `cost(α, session)` and
/// returns the relative error `(cost - reference) / reference` per session.
pub fn simulate_loop<F>(
    controller: &mut PidController,
    scalers: &ScalerProfile,
    reference: f64,
    sessions: usize,
    mut cost: F,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, usize) -> f64,
{
    let mut alpha = actuate(controller.base_value(), 0.0, scalers.scaler(0))?;
    let mut rel = Vec::with_capacity(sessions);
    for t in 0..sessions {
        let measured = cost(alpha, t);
        rel.push((measured - reference) / reference);
        let e = pid_error(reference, measured) / reference;
        let u = controller.step(e)?;
        alpha = actuate(controller.base_value(), u, scalers.scaler(t + 1))?;
    }
    Ok(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_sign_convention() {
        assert_eq!(pid_error(100.0, 100.0), 0.0);
        assert_eq!(pid_error(100.0, 120.0), -20.0);
        assert_eq!(pid_error(100.0, 80.0), 20.0);
    }

    #[test]
    fn step_examples() {
        let mut c = PidController::new(PidGains::new(1.0, 0.0, 0.0).unwrap(), 1.0).unwrap();
        assert_eq!(c.step(0.5).unwrap(), 0.5);

        let mut c = PidController::new(PidGains::new(0.5, 0.1, 0.2).unwrap(), 1.0).unwrap();
        c.step(1.0).unwrap();
        let u = c.step(0.5).unwrap();
        assert!((u - 0.3).abs() < 1e-12, "{u}");
        assert_eq!(c.session_index(), 2);
        assert!((c.error_sum() - 1.5).abs() < 1e-12);

        let mut c = PidController::new(PidGains::new(3.0, 2.0, 1.0).unwrap(), 1.0).unwrap();
        for _ in 0..5 {
            assert_eq!(c.step(0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn non_finite_error_preserves_state() {
        let mut c = PidController::new(PidGains::default(), 1.0).unwrap();
        c.step(0.25).unwrap();
        let snapshot = c.clone();
        assert!(matches!(c.step(f64::NAN), Err(Error::NonFinite(_))));
        assert!(c.step(f64::INFINITY).is_err());
        assert_eq!(c, snapshot);
    }

    #[test]
    fn integral_clamp_bounds_sum() {
        let mut c = PidController::new(PidGains::new(0.0, 1.0, 0.0).unwrap(), 1.0)
            .unwrap()
            .with_integral_clamp(Some(2.0))
            .unwrap();
        for _ in 0..10 {
            c.step(-1.0).unwrap();
        }
        assert_eq!(c.error_sum(), -2.0);
        assert_eq!(c.step(0.0).unwrap(), -2.0);
    }

    #[test]
    fn actuate_examples() {
        assert_eq!(actuate(2.0, 0.0, 1.0).unwrap(), 2.0);
        assert!((actuate(1.0, -(2f64.ln()), 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(actuate(1.0, 0.0, 0.5).unwrap(), 0.5);
        assert!(actuate(1.0, 0.0, 0.0).is_err());
        assert!(actuate(1.0, 0.0, -1.0).is_err());
        assert!(actuate(0.0, 0.0, 1.0).is_err());
        assert!(actuate(1.0, 1e6, 1.0).unwrap() > 0.0);
        assert!(actuate(1.0, -1e6, 1.0).unwrap().is_finite());
    }

    #[test]
    fn scaler_examples() {
        assert_eq!(compute_scalers(&[25, 25, 25, 25]).unwrap().scalers, vec![1.0; 4]);
        assert_eq!(compute_scalers(&[10, 30]).unwrap().scalers, vec![0.5, 1.5]);
        assert_eq!(compute_scalers(&[100]).unwrap().scalers, vec![1.0]);
        assert!(matches!(compute_scalers(&[0, 0]), Err(Error::Degenerate(_))));
        let p = compute_scalers(&[0, 10, 30]).unwrap();
        assert_eq!(p.scalers[0], p.scalers[1]);
        assert!(p.scalers.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn replay_is_reproducible() {
        let errors = [0.3, -0.1, 0.05, 0.0, -0.4];
        let run = || {
            let mut c = PidController::new(PidGains::new(0.7, 0.2, 0.1).unwrap(), 3.0).unwrap();
            errors.iter().map(|&e| c.step(e).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        let mut c = PidController::new(PidGains::new(0.7, 0.2, 0.1).unwrap(), 3.0).unwrap();
        let first: Vec<f64> = errors.iter().map(|&e| c.step(e).unwrap()).collect();
        c.reset();
        let second: Vec<f64> = errors.iter().map(|&e| c.step(e).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn grid_search_orders_by_score() {
        let res = grid_search_gains(&[0.1, 0.5, 1.0], &[0.0], &[0.0], |g| (g.kp - 0.5).abs());
        assert_eq!(res[0].gains.kp, 0.5);
        assert_eq!(res.len(), 3);
    }
}
