//! Quota allocation for one stage.
//!
//! With revenue `R_i ln q_i + B_i`, the budgeted problem
//! `max Σ R_i ln q_i  s.t.  Σ q_i <= C, 1 <= q_i <= D` has the solution
//! `q_i = clamp(R_i / α, 1, D)` where `α` is the multiplier of the budget
//! constraint. The cap and floor multipliers never need to be materialized:
//! complementary slackness turns them into the clamp.
//!
//! `α` is found by bisection on the nonincreasing cost `g(α) = Σ q_i(α)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::revenue_model::LogRevenueModel;
use crate::stage::Stage;

/// Smallest continuous quota handed to any request.
pub const Q_MIN: f64 = 1.0;

/// Default relative tolerance on `g(α)` when solving for the dual variable.
pub const DEFAULT_REL_TOLERANCE: f64 = 1e-9;

const MAX_BISECTION_STEPS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageBudget {
    pub stage: Stage,
    /// Total candidate-set size allowed per session (C).
    pub compute_budget: f64,
    /// Per-request candidate-set cap (D).
    pub latency_cap: u32,
}

impl StageBudget {
    pub fn new(stage: Stage, compute_budget: f64, latency_cap: u32) -> Result<Self> {
        if !(compute_budget > 0.0) || !compute_budget.is_finite() {
            return Err(Error::Domain(format!(
                "compute budget must be positive and finite, got {compute_budget}"
            )));
        }
        if latency_cap < 1 {
            return Err(Error::Domain("latency cap must be >= 1".into()));
        }
        Ok(Self {
            stage,
            compute_budget,
            latency_cap,
        })
    }
}

/// Shadow price of compute; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DualVariable(f64);

impl DualVariable {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(Self(alpha))
        } else {
            Err(Error::Domain(format!("alpha must be positive and finite, got {alpha}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub stage: Stage,
    pub quotas: Vec<u32>,
    /// `None` for the fixed-quota baseline.
    pub alpha_used: Option<DualVariable>,
    pub total_cost: u64,
}

impl Allocation {
    fn from_quotas(stage: Stage, quotas: Vec<u32>, alpha_used: Option<DualVariable>) -> Self {
        let total_cost = quotas.iter().map(|&q| q as u64).sum();
        Self {
            stage,
            quotas,
            alpha_used,
            total_cost,
        }
    }
}

/// `clamp(R / α, 1, D)`.
pub fn optimal_quota(r_coeff: f64, alpha: f64, latency_cap: u32) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    Ok(clamp_quota(r_coeff / alpha, latency_cap))
}

#[inline]
fn clamp_quota(q: f64, latency_cap: u32) -> f64 {
    q.clamp(Q_MIN, latency_cap as f64)
}

/// Continuous cost `g(α) = Σ clamp(R_i / α, 1, D)`.
pub fn cost_at(r_coeffs: &[f64], alpha: f64, latency_cap: u32) -> f64 {
    r_coeffs
        .iter()
        .map(|&r| clamp_quota(r / alpha, latency_cap))
        .sum()
}

/// Continuous quotas for every coefficient at a given `α`.
pub fn continuous_quotas(r_coeffs: &[f64], alpha: DualVariable, latency_cap: u32) -> Vec<f64> {
    r_coeffs
        .iter()
        .map(|&r| clamp_quota(r / alpha.0, latency_cap))
        .collect()
}

/// Finds `α*` with `|g(α*) - min(C, N·D)| <= tolerance` (absolute, in cost units).
///
/// When the budget cannot bind, returns the largest `α` at which every
/// request with `R > 0` already sits at the cap.
pub fn solve_alpha(r_coeffs: &[f64], budget: &StageBudget, tolerance: f64) -> Result<DualVariable> {
    if !(tolerance > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tolerance}")));
    }
    if let Some(bad) = r_coeffs.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::Domain(format!("r_coeff must be finite and >= 0, got {bad}")));
    }
    let n = r_coeffs.len();
    let cap = budget.latency_cap;
    let (min_pos, max_r) = r_coeffs
        .iter()
        .filter(|&&r| r > 0.0)
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    if max_r == 0.0 {
        return Err(Error::Degenerate("all r_coeffs are zero".into()));
    }
    let floor_cost = n as f64 * Q_MIN;
    if budget.compute_budget < floor_cost {
        return Err(Error::InfeasibleBudget {
            required: floor_cost,
            budget: budget.compute_budget,
        });
    }

    let target = budget.compute_budget.min(n as f64 * cap as f64);
    // Every positive-R request is at D for α <= min_pos / D; every request is
    // at the floor for α >= max_r.
    let mut lo = min_pos / cap as f64;
    let mut hi = max_r;
    let saturated = cost_at(r_coeffs, lo, cap);
    if saturated <= target + tolerance {
        return DualVariable::new(lo);
    }
    if (cost_at(r_coeffs, hi, cap) - target).abs() <= tolerance {
        return DualVariable::new(hi);
    }

    let mut mid = (lo * hi).sqrt();
    for _ in 0..MAX_BISECTION_STEPS {
        mid = (lo * hi).sqrt();
        let g = cost_at(r_coeffs, mid, cap);
        if (g - target).abs() <= tolerance {
            break;
        }
        if g > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 <= f64::EPSILON {
            break;
        }
    }
    DualVariable::new(mid)
}

/// [`solve_alpha`] with the default relative tolerance.
pub fn solve_alpha_default(r_coeffs: &[f64], budget: &StageBudget) -> Result<DualVariable> {
    let target = budget
        .compute_budget
        .min(r_coeffs.len() as f64 * budget.latency_cap as f64);
    solve_alpha(r_coeffs, budget, DEFAULT_REL_TOLERANCE * target.max(1.0))
}

/// Integer quotas `round(clamp(R_i / α, 1, D))` in input order.
pub fn allocate(models: &[LogRevenueModel], budget: &StageBudget, alpha: DualVariable) -> Result<Allocation> {
    if models.is_empty() {
        return Err(Error::Domain("allocate needs at least one model".into()));
    }
    let cap = budget.latency_cap;
    let quotas = models
        .iter()
        .map(|m| optimal_quota(m.r_coeff, alpha.0, cap).map(|q| round_quota(q, cap)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Allocation::from_quotas(budget.stage, quotas, Some(alpha)))
}

/// Nearest integer in `[1, D]`.
pub fn round_quota(q: f64, latency_cap: u32) -> u32 {
    (q.round() as u32).clamp(1, latency_cap)
}

/// Greedy integer repair toward the integer budget `min(floor(C), N·D)`.
///
/// Removes units with the smallest marginal loss while over budget, adds
/// units with the largest marginal gain while under budget, then moves
/// single units between requests while that strictly raises revenue. For
/// a separable concave objective the final point is integer-optimal.
pub fn repair_to_budget(models: &[LogRevenueModel], budget: &StageBudget, allocation: &mut Allocation) {
    let cap = budget.latency_cap;
    let q = &mut allocation.quotas;
    let n = q.len();
    let int_budget = (budget.compute_budget.floor() as u64).min(n as u64 * cap as u64);
    let gain = |i: usize, q: &[u32]| -> f64 {
        if q[i] >= cap {
            f64::NEG_INFINITY
        } else {
            models[i].r_coeff * ((q[i] as f64 + 1.0) / q[i] as f64).ln()
        }
    };
    let loss = |i: usize, q: &[u32]| -> f64 {
        if q[i] <= 1 {
            f64::INFINITY
        } else {
            models[i].r_coeff * (q[i] as f64 / (q[i] as f64 - 1.0)).ln()
        }
    };
    let argmax_gain = |q: &[u32]| -> Option<(usize, f64)> {
        (0..n)
            .map(|i| (i, gain(i, q)))
            .filter(|(_, g)| g.is_finite())
            .fold(None, |best: Option<(usize, f64)>, (i, g)| match best {
                Some((_, bg)) if bg >= g => best,
                _ => Some((i, g)),
            })
    };
    let argmin_loss = |q: &[u32]| -> Option<(usize, f64)> {
        (0..n)
            .map(|i| (i, loss(i, q)))
            .filter(|(_, l)| l.is_finite())
            .fold(None, |best: Option<(usize, f64)>, (i, l)| match best {
                Some((_, bl)) if bl <= l => best,
                _ => Some((i, l)),
            })
    };

    let mut total: u64 = q.iter().map(|&x| x as u64).sum();
    while total > int_budget {
        match argmin_loss(q) {
            Some((i, _)) => {
                q[i] -= 1;
                total -= 1;
            }
            None => break,
        }
    }
    while total < int_budget {
        match argmax_gain(q) {
            Some((i, g)) if g > 0.0 => {
                q[i] += 1;
                total += 1;
            }
            _ => break,
        }
    }
    // Pairwise exchange until no single-unit move helps.
    let eps = 1e-12;
    let mut guard = 0usize;
    let limit = 4 * (total as usize + n) + 16;
    while guard < limit {
        guard += 1;
        let Some((gi, g)) = argmax_gain(q) else { break };
        let Some((li, l)) = argmin_excluding(q, gi, &loss) else { break };
        if g > l + eps * g.abs().max(1.0) {
            q[gi] += 1;
            q[li] -= 1;
        } else {
            break;
        }
    }
    allocation.total_cost = q.iter().map(|&x| x as u64).sum();
}

fn argmin_excluding(q: &[u32], skip: usize, loss: &impl Fn(usize, &[u32]) -> f64) -> Option<(usize, f64)> {
    (0..q.len())
        .filter(|&i| i != skip)
        .map(|i| (i, loss(i, q)))
        .filter(|(_, l)| l.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, l)| match best {
            Some((_, bl)) if bl <= l => best,
            _ => Some((i, l)),
        })
}

/// Rounded allocation followed by [`repair_to_budget`].
pub fn allocate_repaired(
    models: &[LogRevenueModel],
    budget: &StageBudget,
    alpha: DualVariable,
) -> Result<Allocation> {
    let mut alloc = allocate(models, budget, alpha)?;
    repair_to_budget(models, budget, &mut alloc);
    Ok(alloc)
}

/// Every request gets the same quota.
pub fn baseline_allocate(n_requests: usize, fixed_quota: u32, budget: &StageBudget) -> Result<Allocation> {
    if n_requests == 0 {
        return Err(Error::Domain("baseline needs at least one request".into()));
    }
    if fixed_quota < 1 {
        return Err(Error::Domain("fixed quota must be >= 1".into()));
    }
    if fixed_quota > budget.latency_cap {
        return Err(Error::CapViolation {
            quota: fixed_quota,
            cap: budget.latency_cap,
        });
    }
    Ok(Allocation::from_quotas(
        budget.stage,
        vec![fixed_quota; n_requests],
        None,
    ))
}

/// `Σ R_i ln q_i + B_i`.
pub fn total_revenue(models: &[LogRevenueModel], quotas: &[u32]) -> Result<f64> {
    if models.len() != quotas.len() {
        return Err(Error::LengthMismatch {
            left: models.len(),
            right: quotas.len(),
        });
    }
    let mut sum = 0.0;
    for (m, &q) in models.iter().zip(quotas) {
        if q < 1 {
            return Err(Error::Domain("quota must be >= 1".into()));
        }
        sum += m.r_coeff * (q as f64).ln() + m.b_offset;
    }
    Ok(sum)
}

pub const BRUTE_FORCE_MAX_REQUESTS: usize = 6;
pub const BRUTE_FORCE_MAX_CAP: u32 = 25;

/// Exhaustive search over `[1, D]^N` with `Σ q <= floor(C)`.
///
/// Ties go to the lexicographically smallest vector. The last coordinate is
/// not enumerated: revenue is nondecreasing in it, so the best choice is the
/// remaining budget when `R > 0` and `1` otherwise.
pub fn brute_force_allocate(models: &[LogRevenueModel], budget: &StageBudget) -> Result<Allocation> {
    let n = models.len();
    let cap = budget.latency_cap;
    if n == 0 {
        return Err(Error::Domain("brute force needs at least one model".into()));
    }
    if n > BRUTE_FORCE_MAX_REQUESTS || cap > BRUTE_FORCE_MAX_CAP {
        return Err(Error::TooLarge(format!(
            "N={n} (max {BRUTE_FORCE_MAX_REQUESTS}), D={cap} (max {BRUTE_FORCE_MAX_CAP})"
        )));
    }
    let int_budget = budget.compute_budget.floor() as i64;
    if int_budget < n as i64 {
        return Err(Error::InfeasibleBudget {
            required: n as f64,
            budget: budget.compute_budget,
        });
    }
    let ln: Vec<f64> = (0..=cap).map(|q| if q == 0 { 0.0 } else { (q as f64).ln() }).collect();

    struct Search<'a> {
        models: &'a [LogRevenueModel],
        ln: &'a [f64],
        cap: u32,
        current: Vec<u32>,
        best: Vec<u32>,
        best_value: f64,
    }

    impl Search<'_> {
        fn run(&mut self, depth: usize, remaining: i64, acc: f64) {
            let n = self.models.len();
            let reserve = (n - depth - 1) as i64;
            if depth == n - 1 {
                let m = &self.models[depth];
                let q = if m.r_coeff > 0.0 {
                    (remaining.min(self.cap as i64)) as u32
                } else {
                    1
                };
                self.current[depth] = q;
                let value = acc + m.r_coeff * self.ln[q as usize];
                let tol = 1e-12 * value.abs().max(1.0);
                if value > self.best_value + tol {
                    self.best_value = value;
                    self.best.copy_from_slice(&self.current);
                }
                return;
            }
            let upper = (remaining - reserve).min(self.cap as i64);
            for q in 1..=upper {
                self.current[depth] = q as u32;
                let value = acc + self.models[depth].r_coeff * self.ln[q as usize];
                self.run(depth + 1, remaining - q, value);
            }
        }
    }

    let mut search = Search {
        models,
        ln: &ln,
        cap,
        current: vec![1; n],
        best: vec![1; n],
        best_value: f64::NEG_INFINITY,
    };
    search.run(0, int_budget, 0.0);
    Ok(Allocation::from_quotas(budget.stage, search.best, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models(rs: &[f64]) -> Vec<LogRevenueModel> {
        rs.iter()
            .enumerate()
            .map(|(i, &r)| LogRevenueModel::new(format!("r{i}"), Stage::Fine, r, 0.0).unwrap())
            .collect()
    }

    fn budget(c: f64, d: u32) -> StageBudget {
        StageBudget::new(Stage::Fine, c, d).unwrap()
    }

    #[test]
    fn optimal_quota_examples() {
        assert_eq!(optimal_quota(5.0, 2.0, 10).unwrap(), 2.5);
        assert_eq!(optimal_quota(50.0, 2.0, 10).unwrap(), 10.0);
        assert_eq!(optimal_quota(0.5, 2.0, 10).unwrap(), 1.0);
        assert_eq!(optimal_quota(0.0, 2.0, 10).unwrap(), 1.0);
        assert!(matches!(optimal_quota(1.0, 0.0, 10), Err(Error::Domain(_))));
        assert!(matches!(optimal_quota(1.0, -1.0, 10), Err(Error::Domain(_))));
    }

    #[test]
    fn solve_alpha_interior() {
        let b = budget(6.0 + 1e-9, 100);
        let a = solve_alpha(&[2.0, 4.0, 6.0], &b, 1e-10).unwrap();
        assert!((a.value() - 2.0).abs() < 1e-8, "{a:?}");
        let q = continuous_quotas(&[2.0, 4.0, 6.0], a, 100);
        for (got, want) in q.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn solve_alpha_both_clamped() {
        let b = budget(20.0, 10);
        let a = solve_alpha(&[1.0, 100.0], &b, 1e-9).unwrap();
        assert!((cost_at(&[1.0, 100.0], a.value(), 10) - 20.0).abs() <= 1e-9);
        assert!((a.value() - 0.1).abs() < 1e-12);
        assert_eq!(allocate(&models(&[1.0, 100.0]), &b, a).unwrap().quotas, vec![10, 10]);
    }

    #[test]
    fn solve_alpha_non_binding() {
        let b = budget(25.0, 5);
        let a = solve_alpha(&[10.0, 10.0], &b, 1e-9).unwrap();
        assert_eq!(a.value(), 2.0);
        assert_eq!(allocate(&models(&[10.0, 10.0]), &b, a).unwrap().quotas, vec![5, 5]);
    }

    #[test]
    fn solve_alpha_errors() {
        assert!(matches!(
            solve_alpha(&[0.0, 0.0], &budget(10.0, 5), 1e-9),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            solve_alpha(&[1.0, 2.0, 3.0], &budget(2.5, 5), 1e-9),
            Err(Error::InfeasibleBudget { .. })
        ));
        assert!(solve_alpha(&[1.0], &budget(2.0, 5), 0.0).is_err());
        assert!(solve_alpha(&[-1.0, 2.0], &budget(5.0, 5), 1e-9).is_err());
    }

    #[test]
    fn allocate_examples() {
        let alloc = allocate(&models(&[2.0, 4.0, 6.0]), &budget(6.0, 100), DualVariable::new(2.0).unwrap()).unwrap();
        assert_eq!(alloc.quotas, vec![1, 2, 3]);
        assert_eq!(alloc.total_cost, 6);

        let alloc = allocate(&models(&[7.0]), &budget(10.0, 5), DualVariable::new(7.0).unwrap()).unwrap();
        assert_eq!(alloc.quotas, vec![1]);

        let alloc = allocate(&models(&[50.0, 50.0]), &budget(100.0, 10), DualVariable::new(2.0).unwrap()).unwrap();
        assert_eq!(alloc.quotas, vec![10, 10]);
        assert_eq!(alloc.total_cost, 20);

        assert!(allocate(&[], &budget(1.0, 1), DualVariable::new(1.0).unwrap()).is_err());
    }

    #[test]
    fn dual_variable_must_be_positive() {
        assert!(DualVariable::new(0.0).is_err());
        assert!(DualVariable::new(f64::NAN).is_err());
        assert!(DualVariable::new(1e-300).is_ok());
    }

    #[test]
    fn baseline_examples() {
        let a = baseline_allocate(3, 350, &budget(1e6, 350)).unwrap();
        assert_eq!(a.quotas, vec![350, 350, 350]);
        assert!(a.alpha_used.is_none());
        assert_eq!(baseline_allocate(1, 1, &budget(10.0, 10)).unwrap().quotas, vec![1]);
        assert_eq!(baseline_allocate(4, 5, &budget(10.0, 10)).unwrap().total_cost, 20);
        assert!(matches!(
            baseline_allocate(2, 11, &budget(10.0, 10)),
            Err(Error::CapViolation { quota: 11, cap: 10 })
        ));
    }

    #[test]
    fn total_revenue_examples() {
        let ms = vec![
            LogRevenueModel::new("a", Stage::Fine, 2.0, 3.0).unwrap(),
            LogRevenueModel::new("b", Stage::Fine, 0.0, 1.0).unwrap(),
        ];
        assert_eq!(total_revenue(&ms[..1], &[1]).unwrap(), 3.0);
        assert!((total_revenue(&ms, &[10, 99]).unwrap() - 8.605170185988092).abs() < 1e-9);
        assert_eq!(total_revenue(&[], &[]).unwrap(), 0.0);
        assert!(matches!(total_revenue(&ms, &[1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn brute_force_examples() {
        let a = brute_force_allocate(&models(&[2.0, 4.0, 6.0]), &budget(6.0, 20)).unwrap();
        assert_eq!(a.quotas, vec![1, 2, 3]);
        let a = brute_force_allocate(&models(&[3.0]), &budget(40.0, 20)).unwrap();
        assert_eq!(a.quotas, vec![20]);
        let a = brute_force_allocate(&models(&[1.0, 1.0]), &budget(3.0, 20)).unwrap();
        assert_eq!(a.quotas, vec![1, 2]);
        assert!(matches!(
            brute_force_allocate(&models(&[1.0; 7]), &budget(30.0, 5)),
            Err(Error::TooLarge(_))
        ));
        assert!(matches!(
            brute_force_allocate(&models(&[1.0]), &budget(30.0, 26)),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn repair_meets_integer_budget() {
        let ms = models(&[3.0, 5.0, 9.0, 0.5]);
        let b = budget(17.0, 10);
        let alpha = solve_alpha_default(&[3.0, 5.0, 9.0, 0.5], &b).unwrap();
        let a = allocate_repaired(&ms, &b, alpha).unwrap();
        assert_eq!(a.total_cost, 17);
        let bf = brute_force_allocate(&ms, &b).unwrap();
        let got = total_revenue(&ms, &a.quotas).unwrap();
        let want = total_revenue(&ms, &bf.quotas).unwrap();
        assert!((got - want).abs() < 1e-9, "{:?} vs {:?}", a.quotas, bf.quotas);
    }

    #[test]
    fn b_offsets_do_not_move_quotas() {
        let b = budget(12.0, 8);
        let mut ms = models(&[1.0, 2.0, 5.0]);
        let alpha = solve_alpha_default(&[1.0, 2.0, 5.0], &b).unwrap();
        let before = allocate(&ms, &b, alpha).unwrap();
        ms[1].b_offset = 1e6;
        ms[2].b_offset = -3.0;
        assert_eq!(allocate(&ms, &b, alpha).unwrap().quotas, before.quotas);
    }
}
