//! One-hop outage effective capacity.
//!
//! For a chain with per-round outages `P_m`, `g = P_out + (1 - P_out) e^{-θL}`
//! and `a_m = P_m - P_{m+1}` (`a_{M-1} = P_{M-1}`), the spectral radius of the
//! tilted transition matrix is the unique positive root of
//!
//! ```text
//! u^M - g * sum_m a_m u^{M-1-m} = 0.
//! ```
//!
//! The root is found for `v = ln u` from `ln sum_m a_m e^{-(m+1)v} + ln g = 0`,
//! which is decreasing and convex in `v` and never touches powers of `g` or
//! `p_0` directly. `J(θ) = -v` is in nats per block with `θ` per bit.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{first_failure_prob, ChannelModel, OutageModel};
use crate::error::{invalid, Error, Result};
use crate::harq::{chain_from_model, HarqChain};

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + (-(a - b).abs()).exp().ln_1p()
}

/// A delay exponent `J(θ) = -Λ_C(-θ)` of one queue.
pub trait DelayExponent: Sync {
    /// `J(θ)` and `dJ/dθ`.
    fn exponent_and_slope(&self, theta: f64) -> (f64, f64);

    fn exponent(&self, theta: f64) -> f64 {
        self.exponent_and_slope(theta).0
    }

    /// Supremum of `J` over `θ`, possibly infinite.
    fn max_exponent(&self) -> f64;

    /// Largest `θ` the exponent may be evaluated at when inverting.
    fn theta_ceiling(&self) -> f64 {
        f64::INFINITY
    }

    /// Mean goodput in bits per block, which is `J'(0)`.
    fn mean_service(&self) -> f64;

    /// Probability that a packet is eventually dropped.
    fn outage_probability(&self) -> f64;
}

/// `(J, J')` values keyed by the bit pattern of `θ`.
#[derive(Debug, Default)]
pub(crate) struct ExponentCache(Mutex<HashMap<u64, (f64, f64)>>);

const CACHE_LIMIT: usize = 4096;

impl ExponentCache {
    pub(crate) fn get_or(&self, theta: f64, compute: impl FnOnce() -> (f64, f64)) -> (f64, f64) {
        let key = theta.to_bits();
        if let Some(hit) = self.0.lock().expect("cache lock").get(&key) {
            return *hit;
        }
        let value = compute();
        let mut cache = self.0.lock().expect("cache lock");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, value);
        value
    }
}

/// Delay exponent of a HARQ chain.
#[derive(Debug)]
pub struct ChainExponent {
    chain: HarqChain,
    ln_a: Vec<f64>,
    ln_pout: f64,
    ln_success: f64,
    j_max: f64,
    mean: f64,
    cache: ExponentCache,
}

impl Clone for ChainExponent {
    fn clone(&self) -> Self {
        Self::new(self.chain.clone())
    }
}

impl ChainExponent {
    pub fn new(chain: HarqChain) -> Self {
        let series = chain.pout_series();
        let p = chain.transition_probs();
        let m = chain.rounds();
        let mut ln_a: Vec<f64> = (0..m - 1).map(|i| series[i].ln() + (-p[i]).ln_1p()).collect();
        ln_a.push(series[m - 1].ln());
        let pout = chain.pout();
        let mut this = Self {
            ln_a,
            ln_pout: pout.ln(),
            ln_success: (-pout).ln_1p(),
            j_max: f64::INFINITY,
            mean: chain.goodput() * chain.tb() as f64,
            chain,
            cache: ExponentCache::default(),
        };
        if pout > 0.0 {
            this.j_max = -this.solve(this.ln_pout).0;
        }
        this
    }

    pub fn chain(&self) -> &HarqChain {
        &self.chain
    }

    fn log_g(&self, theta: f64) -> f64 {
        let bits = self.chain.bits();
        if bits == 0.0 || self.ln_success == f64::NEG_INFINITY {
            return 0.0;
        }
        log_add_exp(self.ln_pout, self.ln_success - theta * bits)
    }

    /// `F(v)` and `F'(v)`.
    fn residual(&self, v: f64, lg: f64) -> (f64, f64) {
        let mut peak = f64::NEG_INFINITY;
        for (i, &la) in self.ln_a.iter().enumerate() {
            peak = peak.max(la - (i + 1) as f64 * v);
        }
        let (mut sum, mut weighted) = (0.0, 0.0);
        for (i, &la) in self.ln_a.iter().enumerate() {
            let w = (la - (i + 1) as f64 * v - peak).exp();
            sum += w;
            weighted += w * (i + 1) as f64;
        }
        (peak + sum.ln() + lg, -weighted / sum)
    }

    /// Root `v = ln u*` and `F'(v)` at the root.
    fn solve(&self, lg: f64) -> (f64, f64) {
        if lg == 0.0 {
            return (0.0, self.residual(0.0, 0.0).1);
        }
        let (mut lo, mut hi) = root_bracket_log(lg, self.ln_a.len());
        while hi - lo > 1e-12 * lo.abs().max(hi.abs()).max(1.0) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.residual(mid, lg).0 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut v = 0.5 * (lo + hi);
        for _ in 0..2 {
            let (f, df) = self.residual(v, lg);
            let next = v - f / df;
            if next >= lo && next <= hi {
                v = next;
            }
        }
        (v, self.residual(v, lg).1)
    }

    fn evaluate(&self, theta: f64) -> (f64, f64) {
        if theta == 0.0 {
            return (0.0, self.mean);
        }
        if theta == f64::INFINITY {
            return (self.j_max, 0.0);
        }
        let lg = self.log_g(theta);
        let (v, dfdv) = self.solve(lg);
        let bits = self.chain.bits();
        let dfdt = if bits == 0.0 || self.ln_success == f64::NEG_INFINITY {
            0.0
        } else {
            -bits * (self.ln_success - theta * bits - lg).exp()
        };
        (-v, dfdt / dfdv)
    }
}

impl DelayExponent for ChainExponent {
    fn exponent_and_slope(&self, theta: f64) -> (f64, f64) {
        self.cache.get_or(theta, || self.evaluate(theta))
    }

    fn max_exponent(&self) -> f64 {
        self.j_max
    }

    fn mean_service(&self) -> f64 {
        self.mean
    }

    fn outage_probability(&self) -> f64 {
        self.chain.pout()
    }
}

/// Bracket of `ln u*` for `ln g = lg` and `rounds` states.
fn root_bracket_log(lg: f64, rounds: usize) -> (f64, f64) {
    let scaled = lg / rounds as f64;
    (lg.min(scaled), lg.max(scaled))
}

fn log_g_of(chain: &HarqChain, theta: f64) -> f64 {
    let pout = chain.pout();
    if chain.bits() == 0.0 || pout == 1.0 {
        return 0.0;
    }
    log_add_exp(pout.ln(), (-pout).ln_1p() - theta * chain.bits())
}

/// Interval `[min(g, g^{1/M}), max(g, g^{1/M})]` that holds the root `u*`.
pub fn root_bracket(chain: &HarqChain, theta: f64) -> (f64, f64) {
    let (lo, hi) = root_bracket_log(log_g_of(chain, theta), chain.rounds());
    (lo.exp(), hi.exp())
}

/// Coefficients of the root polynomial from `u^M` down to `u^0`.
pub fn polynomial_coefficients(chain: &HarqChain, theta: f64) -> Vec<f64> {
    let g = log_g_of(chain, theta).exp();
    let series = chain.pout_series();
    let m = chain.rounds();
    let mut c = Vec::with_capacity(m + 1);
    c.push(1.0);
    for i in 0..m - 1 {
        c.push(-(series[i] - series[i + 1]) * g);
    }
    c.push(-series[m - 1] * g);
    c
}

/// Unique positive root `u*`, the spectral radius of the tilted chain.
pub fn root_u(chain: &HarqChain, theta: f64) -> Result<f64> {
    if theta.is_nan() {
        return Err(invalid("theta", "must not be NaN"));
    }
    let f = ChainExponent::new(chain.clone());
    let u = (-f.exponent(theta)).exp();
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::NonConvergence(format!("root of the chain polynomial at theta {theta}")));
    }
    Ok(u)
}

/// `J(θ) = -ln u*(θ)` in nats per block.
pub fn delay_exponent(chain: &HarqChain, theta: f64) -> f64 {
    ChainExponent::new(chain.clone()).exponent(theta)
}

/// Effective capacity `J(θ) / (θ TB)` of an exponent, bps/Hz; the limit at `θ = 0`.
pub fn exponent_rate(exponent: &dyn DelayExponent, theta: f64, tb: u32) -> Result<f64> {
    if !(theta >= 0.0) {
        return Err(invalid("theta", format!("must be nonnegative, got {theta}")));
    }
    if theta == 0.0 {
        return Ok(exponent.mean_service() / tb as f64);
    }
    Ok(exponent.exponent(theta) / (theta * tb as f64))
}

/// Outage effective capacity of a chain at its own `L`, bps/Hz. `θ = 0` gives
/// the goodput.
pub fn outage_ec_fixed_l(chain: &HarqChain, theta: f64) -> Result<f64> {
    if theta == 0.0 {
        return Ok(chain.goodput());
    }
    exponent_rate(&ChainExponent::new(chain.clone()), theta, chain.tb())
}

/// Smallest `θ ≥ 0` with `J(θ) = target`.
pub fn invert_delay_exponent(exponent: &dyn DelayExponent, target: f64) -> Result<f64> {
    if !(target >= 0.0) {
        return Err(Error::Domain {
            value: target,
            domain: "[0, J_max)",
        });
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let ceiling = exponent.theta_ceiling();
    let j_max = if ceiling.is_finite() {
        exponent.exponent(ceiling)
    } else {
        exponent.max_exponent()
    };
    if target >= j_max {
        return Err(Error::OutOfRange { target, max: j_max });
    }
    let mean = exponent.mean_service();
    if !(mean > 0.0) {
        return Err(Error::OutOfRange { target, max: 0.0 });
    }
    // J is concave with J(θ) <= θ J'(0), so target / J'(0) is a lower bound
    // and Newton steps from the left never overshoot in exact arithmetic.
    let mut lo = 0.0;
    let mut hi = ceiling;
    let mut theta = (target / mean).min(ceiling);
    for _ in 0..200 {
        let (j, slope) = exponent.exponent_and_slope(theta);
        let err = j - target;
        if err.abs() <= 1e-13 * target {
            return Ok(theta);
        }
        if err < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let newton = theta - err / slope;
        let next = if slope > 0.0 && newton > lo && newton < hi && newton.is_finite() {
            newton
        } else if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * theta.max(f64::MIN_POSITIVE)
        };
        if hi.is_finite() && hi - lo <= 1e-15 * hi {
            return Ok(0.5 * (lo + hi));
        }
        if next == theta {
            return Ok(theta);
        }
        theta = next;
    }
    Err(Error::NonConvergence(format!("inverse of the delay exponent at {target}")))
}

/// Coarse grid plus golden-section search over the packet size `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LSearch {
    pub lo: f64,
    pub hi: f64,
    pub grid_points: usize,
    /// Width of the final golden-section bracket, bits.
    pub tolerance: f64,
    /// Fail when the best grid point is the last one.
    pub strict_upper: bool,
}

impl LSearch {
    /// 64 log-spaced points over `[1, 20 TB]`.
    pub fn for_tb(tb: u32) -> Self {
        Self {
            lo: 1.0,
            hi: 20.0 * tb as f64,
            grid_points: 64,
            tolerance: 0.5,
            strict_upper: true,
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_points;
        if n == 1 {
            return vec![self.lo];
        }
        let ratio = (self.hi / self.lo).ln() / (n - 1) as f64;
        (0..n)
            .map(|k| if k + 1 == n { self.hi } else { self.lo * (ratio * k as f64).exp() })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.hi > self.lo && self.hi.is_finite()) {
            return Err(invalid("search", format!("need 0 < lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        if self.grid_points < 3 {
            return Err(invalid("search", "at least 3 grid points are needed"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("search", "tolerance must be positive"));
        }
        Ok(())
    }
}

/// Result of a search over `L`, carrying whatever the objective reported at the best point.
#[derive(Debug, Clone, PartialEq)]
pub struct LOptimum<T> {
    pub bits: f64,
    pub rate: f64,
    pub detail: T,
    /// `(L, rate)` for every coarse grid point.
    pub grid: Vec<(f64, f64)>,
}

/// Maximises `objective(L) -> (rate, detail)` over `L`.
pub fn optimize_l<T, F>(objective: F, search: &LSearch) -> Result<LOptimum<T>>
where
    T: Send + Clone,
    F: Fn(f64) -> Result<(f64, T)> + Sync,
{
    search.validate()?;
    let grid = search.grid();
    let values: Vec<(f64, T)> = grid.par_iter().map(|&l| objective(l)).collect::<Result<_>>()?;
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if v.0 > values[best].0 {
            best = k;
        }
    }
    let trace: Vec<(f64, f64)> = grid.iter().zip(&values).map(|(&l, v)| (l, v.0)).collect();
    let n = grid.len();
    if best + 1 == n && values[best].0 > 0.0 && search.strict_upper {
        return Err(Error::BracketTooSmall { upper: grid[n - 1] });
    }
    let mut best_l = grid[best];
    let (mut best_rate, mut best_detail) = values[best].clone();
    if best_rate > 0.0 {
        let mut a = grid[best.saturating_sub(1)];
        let mut b = grid[(best + 1).min(n - 1)];
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let mut fc = objective(c)?;
        let mut fd = objective(d)?;
        while b - a > search.tolerance {
            if fc.0 >= fd.0 {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = objective(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = objective(d)?;
            }
            for (l, f) in [(c, &fc), (d, &fd)] {
                if f.0 > best_rate {
                    best_l = l;
                    best_rate = f.0;
                    best_detail = f.1.clone();
                }
            }
        }
    }
    Ok(LOptimum {
        bits: best_l,
        rate: best_rate,
        detail: best_detail,
        grid: trace,
    })
}

/// Best packet size of one hop at exponent `θ`; the detail is the chain at the optimum.
pub fn optimize_chain_l(model: &OutageModel, rounds: usize, theta: f64, search: &LSearch) -> Result<LOptimum<HarqChain>> {
    if !(theta > 0.0) {
        return Err(invalid("theta", format!("must be positive, got {theta}")));
    }
    optimize_l(
        |l| {
            let chain = chain_from_model(model, l, rounds)?;
            Ok((outage_ec_fixed_l(&chain, theta)?, chain))
        },
        search,
    )
}

/// HARQ-T1 rate at packet size `bits` in the limit of unlimited transmissions.
pub fn t1_infinite_m_rate(model: &ChannelModel, tb: u32, bits: f64, theta: f64) -> f64 {
    let p0 = first_failure_prob(model, bits, tb);
    if p0 >= 1.0 || bits == 0.0 {
        return 0.0;
    }
    let lg = log_add_exp(p0.ln(), (-p0).ln_1p() - theta * bits);
    -lg / (theta * tb as f64)
}

/// HARQ-T1 outage effective capacity as the number of transmissions grows
/// without bound, maximised over `L`. The detail is the first-round failure
/// probability at the optimum.
pub fn t1_infinite_m_ec(model: &ChannelModel, tb: u32, theta: f64, search: &LSearch) -> Result<LOptimum<f64>> {
    if !(theta > 0.0) {
        return Err(invalid("theta", format!("must be positive, got {theta}")));
    }
    optimize_l(
        |l| Ok((t1_infinite_m_rate(model, tb, l, theta), first_failure_prob(model, l, tb))),
        search,
    )
}
