//! The three-stage truncation cascade and offline revenue-curve replay.
//!
//! Quota `q_s` is the number of candidates entering stage `s`. The pre stage
//! takes the first `q_pre` items of the pool (retrieval order), keeps the
//! best `q_coarse` by pre score, coarse keeps the best `q_fine` by its score,
//! and fine serves its single top item. Revenue is the true value of that
//! served item.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::traffic::{mix_seed, Item, NoiseLevels, SyntheticRequest};
use crate::error::{Error, Result};
use crate::revenue_model::RevenueCurve;
use crate::stage::Stage;

/// Candidate-set sizes for (pre, coarse, fine).
pub type StageQuotas = [u32; 3];

/// Descending by score, ascending by index on ties. Total order.
#[inline]
fn rank(items: &[Item], stage: usize, a: usize, b: usize) -> Ordering {
    items[b]
        .score(stage)
        .total_cmp(&items[a].score(stage))
        .then(a.cmp(&b))
}

fn keep_top(items: &[Item], idx: &mut Vec<usize>, k: usize, stage: usize) {
    if idx.len() > k {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(items, stage, a, b));
        idx.truncate(k);
    }
}

fn best_by(items: &[Item], idx: &[usize], stage: usize) -> Option<usize> {
    idx.iter()
        .copied()
        .min_by(|&a, &b| rank(items, stage, a, b))
}

/// True value of the item served for the given quotas; `0` for an empty pool.
pub fn run_cascade(items: &[Item], quotas: StageQuotas) -> f64 {
    let [q1, q2, q3] = quotas.map(|q| q.max(1) as usize);
    let mut idx: Vec<usize> = (0..q1.min(items.len())).collect();
    keep_top(items, &mut idx, q2, 0);
    keep_top(items, &mut idx, q3, 1);
    best_by(items, &idx, 2).map_or(0.0, |i| items[i].true_value)
}

/// Bounded list kept sorted by `rank` for one stage.
struct TopList {
    stage: usize,
    cap: usize,
    idx: Vec<usize>,
}

impl TopList {
    fn new(stage: usize, cap: usize) -> Self {
        Self {
            stage,
            cap,
            idx: Vec::with_capacity(cap + 1),
        }
    }

    /// Returns whether the list changed.
    fn insert(&mut self, items: &[Item], i: usize) -> bool {
        let pos = self
            .idx
            .partition_point(|&j| rank(items, self.stage, j, i) == Ordering::Less);
        if pos >= self.cap {
            return false;
        }
        self.idx.insert(pos, i);
        self.idx.truncate(self.cap);
        true
    }
}

/// Adds the per-quota revenue for `q = 1..=out.len()` of `stage` into `out`,
/// other stages fixed at `defaults`.
pub fn accumulate_stage_curve(items: &[Item], stage: Stage, defaults: StageQuotas, out: &mut [f64]) {
    let [f1, f2, f3] = defaults.map(|q| q.max(1) as usize);
    let value = |w: Option<usize>| w.map_or(0.0, |i| items[i].true_value);
    match stage {
        Stage::Fine => {
            let mut idx: Vec<usize> = (0..f1.min(items.len())).collect();
            keep_top(items, &mut idx, f2, 0);
            idx.sort_unstable_by(|&a, &b| rank(items, 1, a, b));
            let mut best: Option<usize> = None;
            for (k, slot) in out.iter_mut().enumerate() {
                if let Some(&i) = idx.get(k) {
                    if best.is_none_or(|b| rank(items, 2, i, b) == Ordering::Less) {
                        best = Some(i);
                    }
                }
                *slot += value(best);
            }
        }
        Stage::Coarse => {
            let mut idx: Vec<usize> = (0..f1.min(items.len())).collect();
            idx.sort_unstable_by(|&a, &b| rank(items, 0, a, b));
            let mut top = TopList::new(1, f3);
            let mut winner: Option<usize> = None;
            for (k, slot) in out.iter_mut().enumerate() {
                if let Some(&i) = idx.get(k) {
                    if top.insert(items, i) {
                        winner = best_by(items, &top.idx, 2);
                    }
                }
                *slot += value(winner);
            }
        }
        Stage::Pre => {
            let mut top = TopList::new(0, f2);
            let mut scratch = Vec::with_capacity(f2);
            let mut winner: Option<usize> = None;
            for (k, slot) in out.iter_mut().enumerate() {
                if k < items.len() && top.insert(items, k) {
                    scratch.clear();
                    scratch.extend_from_slice(&top.idx);
                    keep_top(items, &mut scratch, f3, 1);
                    winner = best_by(items, &scratch, 2);
                }
                *slot += value(winner);
            }
        }
    }
}

/// Replay settings for building revenue curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSimConfig {
    /// Quotas of the stages that are not being varied.
    pub default_quotas: StageQuotas,
    /// Curve length per stage.
    pub caps: StageQuotas,
    pub noise: NoiseLevels,
    /// Replays per request; the first uses the logged scores.
    pub n_noise_draws: u32,
    pub seed: u64,
}

fn key_hash(key: &str) -> u64 {
    // FNV-1a; stable across platforms and runs
    key.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn raw_request_curve(request: &SyntheticRequest, stage: Stage, cfg: &CurveSimConfig) -> Vec<f64> {
    let len = cfg.caps[stage.index()].max(1) as usize;
    let mut acc = vec![0.0; len];
    let draws = cfg.n_noise_draws.max(1);
    accumulate_stage_curve(&request.items, stage, cfg.default_quotas, &mut acc);
    if draws > 1 {
        let salt = key_hash(&request.request_key) ^ (stage.index() as u64 + 1).rotate_left(48);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, salt));
        let dists: [Option<Normal<f64>>; 3] = cfg
            .noise
            .as_array()
            .map(|s| (s > 0.0).then(|| Normal::new(0.0, s).expect("validated noise")));
        let mut redrawn = request.items.clone();
        for _ in 1..draws {
            for (it, orig) in redrawn.iter_mut().zip(&request.items) {
                let v = orig.true_value;
                let mut s = [v; 3];
                for (x, d) in s.iter_mut().zip(&dists) {
                    if let Some(d) = d {
                        *x += d.sample(&mut rng);
                    }
                }
                *it = Item {
                    true_value: v,
                    score_pre: s[0],
                    score_coarse: s[1],
                    score_fine: s[2],
                };
            }
            accumulate_stage_curve(&redrawn, stage, cfg.default_quotas, &mut acc);
        }
    }
    let d = draws as f64;
    acc.iter_mut().for_each(|x| *x /= d);
    acc
}

/// Averaged replay curve of one request for one stage, monotonized.
pub fn simulate_revenue_curve(
    request: &SyntheticRequest,
    stage: Stage,
    cfg: &CurveSimConfig,
) -> Result<RevenueCurve> {
    let raw = raw_request_curve(request, stage, cfg);
    RevenueCurve::from_samples(request.request_key.clone(), stage, raw)
}

/// One curve per user: the mean of the raw curves of up to
/// `max_requests_per_user` of that user's requests, then monotonized.
/// Output is ordered by user key.
pub fn user_revenue_curves(
    requests: &[SyntheticRequest],
    stage: Stage,
    cfg: &CurveSimConfig,
    max_requests_per_user: usize,
) -> Result<Vec<RevenueCurve>> {
    let mut by_user: BTreeMap<&str, Vec<&SyntheticRequest>> = BTreeMap::new();
    for r in requests {
        let list = by_user.entry(r.user_key.as_str()).or_default();
        if list.len() < max_requests_per_user.max(1) {
            list.push(r);
        }
    }
    let groups: Vec<(&str, Vec<&SyntheticRequest>)> = by_user.into_iter().collect();
    groups
        .par_iter()
        .map(|(user, reqs)| {
            let len = cfg.caps[stage.index()].max(1) as usize;
            let mut acc = vec![0.0; len];
            for r in reqs {
                for (a, x) in acc.iter_mut().zip(raw_request_curve(r, stage, cfg)) {
                    *a += x;
                }
            }
            let n = reqs.len() as f64;
            RevenueCurve::from_samples(*user, stage, acc.into_iter().map(|x| x / n))
        })
        .collect()
}

/// `M · Y_pre(q1) · Y_coarse(q2) · Y_fine(q3)` with each discount curve in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeRevenueParams {
    max_revenue: f64,
    discounts: [RevenueCurve; 3],
}

impl CascadeRevenueParams {
    pub fn new(max_revenue: f64, discounts: [RevenueCurve; 3]) -> Result<Self> {
        if !(max_revenue > 0.0 && max_revenue.is_finite()) {
            return Err(Error::Domain(format!("max revenue must be positive, got {max_revenue}")));
        }
        for c in &discounts {
            if c.is_empty() || c.revenue().iter().any(|&y| y > 1.0) {
                return Err(Error::Curve(format!(
                    "discount curve for {} must be nonempty with values in [0, 1]",
                    c.stage()
                )));
            }
        }
        Ok(Self {
            max_revenue,
            discounts,
        })
    }
}

pub fn joint_revenue(params: &CascadeRevenueParams, q1: u32, q2: u32, q3: u32) -> Result<f64> {
    let mut out = params.max_revenue;
    for (curve, q) in params.discounts.iter().zip([q1, q2, q3]) {
        if q == 0 || q as usize > curve.len() {
            return Err(Error::Domain(format!(
                "q={q} outside 1..={} for stage {}",
                curve.len(),
                curve.stage()
            )));
        }
        out *= curve.revenue()[q as usize - 1];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(v: f64, pre: f64, coarse: f64, fine: f64) -> Item {
        Item {
            true_value: v,
            score_pre: pre,
            score_coarse: coarse,
            score_fine: fine,
        }
    }

    fn request(items: Vec<Item>) -> SyntheticRequest {
        SyntheticRequest {
            request_key: "r".into(),
            user_key: "u".into(),
            session: 0,
            items,
        }
    }

    fn cfg(caps: StageQuotas, draws: u32) -> CurveSimConfig {
        CurveSimConfig {
            default_quotas: [100, 100, 100],
            caps,
            noise: NoiseLevels::NONE,
            n_noise_draws: draws,
            seed: 7,
        }
    }

    #[test]
    fn perfect_upstream_gives_flat_curve() {
        let items = vec![item(3.0, 3.0, 3.0, 3.0), item(2.0, 2.0, 2.0, 2.0), item(1.0, 1.0, 1.0, 1.0)];
        let c = simulate_revenue_curve(&request(items), Stage::Fine, &cfg([3, 3, 3], 1)).unwrap();
        assert_eq!(c.revenue(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn coarse_order_hand_example() {
        // coarse ranks values [1, 3, 2]; fine is exact
        let items = vec![item(1.0, 0.0, 3.0, 1.0), item(3.0, 0.0, 2.0, 3.0), item(2.0, 0.0, 1.0, 2.0)];
        let c = simulate_revenue_curve(&request(items), Stage::Fine, &cfg([3, 3, 3], 1)).unwrap();
        assert_eq!(c.revenue(), &[1.0, 3.0, 3.0]);
    }

    #[test]
    fn single_item_pool_is_constant() {
        let r = request(vec![item(4.5, 0.3, -1.0, 2.0)]);
        for stage in Stage::ALL {
            let c = simulate_revenue_curve(&r, stage, &cfg([6, 6, 6], 5)).unwrap();
            assert!(c.revenue().iter().all(|&y| y == 4.5), "{stage}: {:?}", c.revenue());
        }
    }

    #[test]
    fn quota_past_pool_saturates() {
        let items = vec![item(1.0, 1.0, 1.0, 1.0), item(2.0, 2.0, 2.0, 2.0)];
        let c = simulate_revenue_curve(&request(items), Stage::Pre, &cfg([5, 5, 5], 1)).unwrap();
        assert_eq!(c.revenue(), &[1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn run_cascade_basic() {
        let items = vec![
            item(1.0, 5.0, 1.0, 1.0),
            item(9.0, 1.0, 9.0, 9.0),
            item(4.0, 4.0, 4.0, 4.0),
            item(8.0, 3.0, 8.0, 8.0),
        ];
        // pre keeps 2 by pre score: items 0 and 2
        assert_eq!(run_cascade(&items, [4, 2, 2]), 4.0);
        assert_eq!(run_cascade(&items, [4, 4, 4]), 9.0);
        assert_eq!(run_cascade(&items, [1, 4, 4]), 1.0);
        assert_eq!(run_cascade(&[], [1, 1, 1]), 0.0);
    }

    #[test]
    fn joint_revenue_examples() {
        let ones = |s| RevenueCurve::from_samples("k", s, [1.0; 4]).unwrap();
        let params = CascadeRevenueParams::new(10.0, [ones(Stage::Pre), ones(Stage::Coarse), ones(Stage::Fine)]).unwrap();
        assert_eq!(joint_revenue(&params, 1, 2, 3).unwrap(), 10.0);
        assert!(joint_revenue(&params, 0, 1, 1).is_err());
        assert!(joint_revenue(&params, 5, 1, 1).is_err());

        let c = |s, v| RevenueCurve::from_samples("k", s, [v]).unwrap();
        let params = CascadeRevenueParams::new(
            10.0,
            [c(Stage::Pre, 0.5), c(Stage::Coarse, 0.8), c(Stage::Fine, 0.9)],
        )
        .unwrap();
        assert!((joint_revenue(&params, 1, 1, 1).unwrap() - 3.6).abs() < 1e-12);

        let params = CascadeRevenueParams::new(
            10.0,
            [c(Stage::Pre, 0.5), c(Stage::Coarse, 0.8), c(Stage::Fine, 0.0)],
        )
        .unwrap();
        assert_eq!(joint_revenue(&params, 1, 1, 1).unwrap(), 0.0);

        assert!(CascadeRevenueParams::new(1.0, [c(Stage::Pre, 1.5), c(Stage::Coarse, 1.0), c(Stage::Fine, 1.0)]).is_err());
    }

    #[test]
    fn draws_are_deterministic() {
        let items: Vec<Item> = (0..30).map(|i| item(i as f64 * 0.1, 0.0, 0.0, 0.0)).collect();
        let mut c = cfg([20, 10, 5], 20);
        c.default_quotas = [25, 10, 4];
        c.noise = NoiseLevels::default();
        let r = request(items);
        let a = simulate_revenue_curve(&r, Stage::Coarse, &c).unwrap();
        let b = simulate_revenue_curve(&r, Stage::Coarse, &c).unwrap();
        assert_eq!(a, b);
    }
}
