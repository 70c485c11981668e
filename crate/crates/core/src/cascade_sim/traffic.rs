//! Synthetic request streams.
//!
//! Users are drawn once from a fixed population, so the same `user_key`
//! recurs across sessions. Each user owns a value distribution; items in a
//! request draw their true value from it, and every stage observes the value
//! through its own additive Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One candidate item with its true value and the three stage scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Item {
    pub true_value: f64,
    pub score_pre: f64,
    pub score_coarse: f64,
    pub score_fine: f64,
}

impl Item {
    pub fn noiseless(true_value: f64) -> Self {
        Self {
            true_value,
            score_pre: true_value,
            score_coarse: true_value,
            score_fine: true_value,
        }
    }

    #[inline]
    pub fn score(&self, stage: usize) -> f64 {
        match stage {
            0 => self.score_pre,
            1 => self.score_coarse,
            _ => self.score_fine,
        }
    }
}

impl From<[f64; 4]> for Item {
    fn from(a: [f64; 4]) -> Self {
        Self {
            true_value: a[0],
            score_pre: a[1],
            score_coarse: a[2],
            score_fine: a[3],
        }
    }
}

impl From<Item> for [f64; 4] {
    fn from(i: Item) -> Self {
        [i.true_value, i.score_pre, i.score_coarse, i.score_fine]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRequest {
    pub request_key: String,
    pub user_key: String,
    pub session: u32,
    pub items: Vec<Item>,
}

/// Standard deviation of the additive score noise at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub pre: f64,
    pub coarse: f64,
    pub fine: f64,
}

impl NoiseLevels {
    pub const NONE: NoiseLevels = NoiseLevels {
        pre: 0.0,
        coarse: 0.0,
        fine: 0.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.pre, self.coarse, self.fine]
    }

    pub fn validate(&self) -> Result<()> {
        let [p, c, f] = self.as_array();
        if [p, c, f].iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("noise", "noise levels must be finite and >= 0"));
        }
        if !(p >= c && c >= f) {
            return Err(Error::config(
                "noise",
                format!("noise must not increase along the cascade (pre {p} >= coarse {c} >= fine {f})"),
            ));
        }
        Ok(())
    }
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            pre: 2.0,
            coarse: 1.5,
            fine: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueDistribution {
    Lognormal,
    Uniform,
    /// `scale · spread · Exp(1)`.
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    /// Requests per session.
    pub session_counts: Vec<u64>,
    /// Size of the fixed user population.
    pub n_users: usize,
    /// Inclusive range of items per request.
    pub pool_size: [u32; 2],
    pub noise: NoiseLevels,
    pub value_distribution: ValueDistribution,
    /// Spread of per-user log value scale.
    pub user_scale_sigma: f64,
    /// Range of per-user item value dispersion.
    pub user_spread: [f64; 2],
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            session_counts: diurnal_profile(24, 400),
            n_users: 500,
            pool_size: [60, 120],
            noise: NoiseLevels::default(),
            value_distribution: ValueDistribution::Lognormal,
            user_scale_sigma: 0.5,
            user_spread: [0.1, 1.0],
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<()> {
        if self.session_counts.is_empty() {
            return Err(Error::config("traffic.session_counts", "must not be empty"));
        }
        if self.n_users == 0 {
            return Err(Error::config("traffic.n_users", "must be >= 1"));
        }
        let [lo, hi] = self.pool_size;
        if lo == 0 || lo > hi {
            return Err(Error::config(
                "traffic.pool_size",
                format!("empty pool range [{lo}, {hi}]"),
            ));
        }
        self.noise.validate().map_err(|e| match e {
            Error::Config { msg, .. } => Error::config("traffic.noise", msg),
            other => other,
        })?;
        if !(self.user_scale_sigma.is_finite() && self.user_scale_sigma >= 0.0) {
            return Err(Error::config("traffic.user_scale_sigma", "must be finite and >= 0"));
        }
        let [slo, shi] = self.user_spread;
        if !(slo.is_finite() && shi.is_finite() && slo > 0.0 && slo <= shi) {
            return Err(Error::config(
                "traffic.user_spread",
                "must be a positive nondecreasing pair",
            ));
        }
        Ok(())
    }
}

/// A smooth day shape: low at night, peak in the evening; mean close to `mean`.
pub fn diurnal_profile(sessions: usize, mean: u64) -> Vec<u64> {
    (0..sessions)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * (t as f64 - 20.0) / sessions as f64;
            let shape = 1.0 + 0.3 * phase.cos();
            (mean as f64 * shape).round().max(1.0) as u64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct UserProfile {
    log_scale: f64,
    spread: f64,
}

/// Deterministic stream of sessions for a seed.
///
/// Session `t` is generated from its own RNG stream, so sessions can be
/// produced lazily and in any order.
#[derive(Debug, Clone)]
pub struct TrafficGenerator {
    config: TrafficConfig,
    seed: u64,
    users: Vec<UserProfile>,
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrafficGenerator {
    pub fn new(config: TrafficConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
        let scale = Normal::new(0.0, config.user_scale_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::config("traffic.user_scale_sigma", e.to_string()))?;
        let [slo, shi] = config.user_spread;
        let users = (0..config.n_users)
            .map(|_| UserProfile {
                log_scale: if config.user_scale_sigma > 0.0 {
                    scale.sample(&mut rng)
                } else {
                    0.0
                },
                spread: if shi > slo { rng.random_range(slo..=shi) } else { slo },
            })
            .collect();
        Ok(Self {
            config,
            seed,
            users,
        })
    }

    pub fn config(&self) -> &TrafficConfig {
        &self.config
    }

    pub fn n_sessions(&self) -> usize {
        self.config.session_counts.len()
    }

    pub fn session(&self, t: usize) -> Vec<SyntheticRequest> {
        let count = self.config.session_counts[t];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, t as u64 + 1));
        let [lo, hi] = self.config.pool_size;
        let noise = self.config.noise.as_array();
        let noise_dists: [Option<Normal<f64>>; 3] =
            noise.map(|s| (s > 0.0).then(|| Normal::new(0.0, s).expect("validated noise")));
        (0..count)
            .map(|i| {
                let user = rng.random_range(0..self.users.len());
                let profile = self.users[user];
                let pool = rng.random_range(lo..=hi) as usize;
                let items = (0..pool)
                    .map(|_| {
                        let v = self.draw_value(profile, &mut rng);
                        let mut scores = [v; 3];
                        for (s, d) in scores.iter_mut().zip(&noise_dists) {
                            if let Some(d) = d {
                                *s += d.sample(&mut rng);
                            }
                        }
                        Item {
                            true_value: v,
                            score_pre: scores[0],
                            score_coarse: scores[1],
                            score_fine: scores[2],
                        }
                    })
                    .collect();
                SyntheticRequest {
                    request_key: format!("s{t}-r{i}"),
                    user_key: format!("u{user}"),
                    session: t as u32,
                    items,
                }
            })
            .collect()
    }

    fn draw_value(&self, profile: UserProfile, rng: &mut ChaCha8Rng) -> f64 {
        match self.config.value_distribution {
            ValueDistribution::Lognormal => LogNormal::new(profile.log_scale, profile.spread)
                .expect("finite lognormal parameters")
                .sample(rng),
            ValueDistribution::Exponential => {
                let e: f64 = Exp1.sample(rng);
                profile.log_scale.exp() * profile.spread * e
            }
            ValueDistribution::Uniform => {
                let top = profile.log_scale.exp() * 2.0 * profile.spread;
                rng.random_range(0.0..=top)
            }
        }
    }

    pub fn sessions(&self) -> impl Iterator<Item = Vec<SyntheticRequest>> + '_ {
        (0..self.n_sessions()).map(move |t| self.session(t))
    }
}

/// All sessions materialized in order.
pub fn generate_traffic(seed: u64, config: &TrafficConfig) -> Result<Vec<SyntheticRequest>> {
    let generator = TrafficGenerator::new(config.clone(), seed)?;
    Ok(generator.sessions().flatten().collect())
}

/// Splits a flat request list into per-session groups, indexed by session.
pub fn group_by_session(requests: Vec<SyntheticRequest>) -> Vec<Vec<SyntheticRequest>> {
    let n = requests.iter().map(|r| r.session as usize + 1).max().unwrap_or(0);
    let mut out = vec![Vec::new(); n];
    for r in requests {
        let s = r.session as usize;
        out[s].push(r);
    }
    out
}
