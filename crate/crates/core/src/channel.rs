//! Block-fading link models and outage probabilities of accumulated mutual
//! information.
//!
//! A hop is described by its HARQ protocol and its links. The quantity every
//! downstream module needs is the outage series
//!
//! ```text
//! P_out,m = Pr{ A_m < L },   m = 0..M,   P_out,0 = 1,
//! ```
//!
//! where `A_m` is what the receiver can decode after `m` rounds: the sum of
//! per-round rates for IR, the rate of the summed SNR for CC and the best
//! single round for T1. Closed forms are used where they exist (T1, single-link
//! CC). Everything else is estimated either by Monte Carlo or by numerical
//! convolution of the per-round rate density.
//!
//! The Monte Carlo estimator draws one gain per (link, round, sample) from a
//! counter-based stream keyed by `(seed, link, round, chunk)`. The same draws are
//! reused for every `m` and every `L`, so estimated outage curves are monotone in
//! both sample-exactly, and results do not depend on the number of worker
//! threads.

use std::f64::consts::LN_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{invalid, Error, Result};

/// Samples per Monte Carlo work unit. Fixed so that results are independent of
/// how units are spread over threads.
pub(crate) const CHUNK: usize = 1 << 15;

/// Generator for one work unit.
pub(crate) fn stream_rng(seed: u64, tag: u64, round: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tag + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream((round << 32) | chunk);
    rng
}

pub(crate) fn chunk_count(samples: usize) -> usize {
    samples.div_ceil(CHUNK)
}

pub(crate) fn chunk_len(samples: usize, chunk: usize) -> usize {
    CHUNK.min(samples - chunk * CHUNK)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Fading {
    Rayleigh,
    /// Nakagami-m amplitude; the power gain is Gamma(m, mean/m).
    Nakagami { shape: f64 },
}

/// Fading law of one link together with its transmit SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    fading: Fading,
    mean_power: f64,
    snr: f64,
}

impl ChannelModel {
    pub fn new(fading: Fading, mean_power: f64, snr: f64) -> Result<Self> {
        if !(mean_power > 0.0 && mean_power.is_finite()) {
            return Err(invalid("mean_power", format!("must be positive, got {mean_power}")));
        }
        // snr = 0 is allowed: the link then carries nothing.
        if !(snr >= 0.0 && snr.is_finite()) {
            return Err(invalid("snr", format!("must be nonnegative, got {snr}")));
        }
        if let Fading::Nakagami { shape } = fading {
            if !(shape >= 0.5 && shape.is_finite()) {
                return Err(invalid("shape", format!("Nakagami shape must be >= 0.5, got {shape}")));
            }
        }
        Ok(Self {
            fading,
            mean_power,
            snr,
        })
    }

    pub fn rayleigh(mean_power: f64, snr: f64) -> Result<Self> {
        Self::new(Fading::Rayleigh, mean_power, snr)
    }

    pub fn nakagami(shape: f64, mean_power: f64, snr: f64) -> Result<Self> {
        Self::new(Fading::Nakagami { shape }, mean_power, snr)
    }

    pub fn fading(&self) -> Fading {
        self.fading
    }

    pub fn mean_power(&self) -> f64 {
        self.mean_power
    }

    pub fn snr(&self) -> f64 {
        self.snr
    }

    /// Mean of the received SNR `snr * z`.
    pub fn mean_snr(&self) -> f64 {
        self.snr * self.mean_power
    }

    /// `Pr{z < x}` for the power gain `z`.
    pub fn gain_cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x.is_infinite() {
            return 1.0;
        }
        match self.fading {
            Fading::Rayleigh => -(-x / self.mean_power).exp_m1(),
            Fading::Nakagami { shape } => gamma_lr(shape, shape * x / self.mean_power),
        }
    }

    /// `Pr{z >= x}`.
    pub fn gain_survival(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        if x.is_infinite() {
            return 0.0;
        }
        match self.fading {
            Fading::Rayleigh => (-x / self.mean_power).exp(),
            Fading::Nakagami { shape } => gamma_ur(shape, shape * x / self.mean_power),
        }
    }

    /// `Pr{snr * z < x}`.
    pub fn snr_cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if self.snr == 0.0 {
            return 1.0;
        }
        self.gain_cdf(x / self.snr)
    }

    fn gain_sampler(&self) -> GainSampler {
        match self.fading {
            Fading::Rayleigh => GainSampler::Exp(Exp::new(1.0 / self.mean_power).expect("validated mean")),
            Fading::Nakagami { shape } => {
                GainSampler::Gamma(Gamma::new(shape, self.mean_power / shape).expect("validated shape"))
            }
        }
    }

    pub(crate) fn draw_gain(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.gain_sampler().sample(rng)
    }

    pub(crate) fn fill_gains(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>, len: usize) {
        let sampler = self.gain_sampler();
        out.clear();
        out.extend((0..len).map(|_| sampler.sample(rng)));
    }
}

enum GainSampler {
    Exp(Exp<f64>),
    Gamma(Gamma<f64>),
}

impl GainSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            GainSampler::Exp(d) => d.sample(rng),
            GainSampler::Gamma(d) => d.sample(rng),
        }
    }
}

/// i.i.d. power gains, one per block. Deterministic in `seed`.
pub fn sample_gains(model: &ChannelModel, count: usize, seed: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    let mut buf = Vec::new();
    for chunk in 0..chunk_count(count) {
        let mut rng = stream_rng(seed, 0, 0, chunk as u64);
        model.fill_gains(&mut rng, &mut buf, chunk_len(count, chunk));
        out.extend_from_slice(&buf);
    }
    out
}

/// SNR a block must exceed to carry `bits` in `tb` symbols.
pub fn snr_threshold(bits: f64, tb: u32) -> f64 {
    (bits / tb as f64 * LN_2).exp_m1()
}

/// `Pr{ z < (2^{L/TB} - 1)/snr }`, the first-round failure probability of a
/// single link.
pub fn first_failure_prob(model: &ChannelModel, bits: f64, tb: u32) -> f64 {
    if bits <= 0.0 {
        return 0.0;
    }
    model.snr_cdf(snr_threshold(bits, tb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Each round decoded on its own.
    T1,
    /// Chase combining: SNRs of the rounds add up.
    CC,
    /// Incremental redundancy: mutual information of the rounds adds up.
    IR,
}

/// Links of a hop and how they combine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Links {
    Single(ChannelModel),
    /// Source to two relays with a common message; the hop succeeds once both
    /// relays have decoded.
    CommonMessage([ChannelModel; 2]),
    /// Two relays to one destination with Alamouti coding; per-round SNR is
    /// `snr1 z1 + snr2 z2`.
    Alamouti([ChannelModel; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopSpec {
    pub protocol: Protocol,
    pub links: Links,
    /// Symbols per block, `T * B`.
    pub tb: u32,
}

impl HopSpec {
    pub fn new(protocol: Protocol, links: Links, tb: u32) -> Result<Self> {
        if tb == 0 {
            return Err(invalid("tb", "symbols per block must be at least 1"));
        }
        Ok(Self { protocol, links, tb })
    }

    pub fn single(protocol: Protocol, model: ChannelModel, tb: u32) -> Result<Self> {
        Self::new(protocol, Links::Single(model), tb)
    }
}

/// Per-round SNR variable of one receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RoundSnr {
    Link(ChannelModel),
    Sum(ChannelModel, ChannelModel),
}

impl RoundSnr {
    fn models(&self) -> Vec<ChannelModel> {
        match *self {
            RoundSnr::Link(m) => vec![m],
            RoundSnr::Sum(a, b) => vec![a, b],
        }
    }

    /// `Pr{gamma < x}` where a closed form exists.
    fn cdf(&self, x: f64) -> Option<f64> {
        match *self {
            RoundSnr::Link(m) => Some(m.snr_cdf(x)),
            RoundSnr::Sum(a, b) => alamouti_rayleigh_cdf(&a, &b, x),
        }
    }
}

/// CDF of `snr1 z1 + snr2 z2` for two independent Rayleigh links
/// (hypoexponential; Gamma(2) when the means coincide).
pub fn alamouti_rayleigh_cdf(first: &ChannelModel, second: &ChannelModel, x: f64) -> Option<f64> {
    if first.fading != Fading::Rayleigh || second.fading != Fading::Rayleigh {
        return None;
    }
    if x <= 0.0 {
        return Some(0.0);
    }
    let (a, b) = (first.mean_snr(), second.mean_snr());
    let cdf = match (a > 0.0, b > 0.0) {
        (false, false) => 1.0,
        (true, false) => -(-x / a).exp_m1(),
        (false, true) => -(-x / b).exp_m1(),
        (true, true) => {
            if (a - b).abs() <= 1e-7 * a.max(b) {
                let mean = 0.5 * (a + b);
                let t = x / mean;
                // 1 - (1 + t) e^{-t}, written to keep precision for small t
                -(-t).exp_m1() - t * (-t).exp()
            } else {
                1.0 - (a * (-x / a).exp() - b * (-x / b).exp()) / (a - b)
            }
        }
    };
    Some(cdf.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EstimatorMethod {
    #[default]
    MonteCarlo,
    /// Recursive numerical convolution of the per-round rate density (IR only).
    Convolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: EstimatorMethod,
    pub samples: usize,
    pub seed: u64,
    /// Grid size of the convolution estimator.
    pub bins: usize,
    /// Upper end of the convolution grid in bits; queries above it fail.
    pub max_bits: f64,
    /// If set, the 95% CI half-width of `P_out,M` relative to its value must
    /// not exceed this.
    pub max_rel_ci: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: EstimatorMethod::MonteCarlo,
            samples: 1_000_000,
            seed: 1,
            bins: 1 << 14,
            max_bits: 7200.0,
            max_rel_ci: None,
        }
    }
}

impl EstimatorConfig {
    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            ..Self::default()
        }
    }

    pub fn convolution(bins: usize, max_bits: f64) -> Self {
        Self {
            method: EstimatorMethod::Convolution,
            bins,
            max_bits,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        match self.method {
            EstimatorMethod::MonteCarlo if self.samples == 0 => Err(invalid("samples", "must be at least 1")),
            EstimatorMethod::Convolution if self.bins < 16 => Err(invalid("bins", "must be at least 16")),
            EstimatorMethod::Convolution if !(self.max_bits > 0.0) => {
                Err(invalid("max_bits", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// `P_out,0..=P_out,M` with standard errors (zero for closed forms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageSeries {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// True if any entry is a statistical estimate.
    pub estimated: bool,
}

impl OutageSeries {
    pub fn rounds(&self) -> usize {
        self.values.len() - 1
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("series holds P_out,0")
    }
}

/// Sorted per-round decodable-bits samples, `A_m` for `m = 1..=M`.
#[derive(Debug, Clone)]
struct SortedAccumulation {
    rounds: Vec<Vec<f64>>,
}

impl SortedAccumulation {
    fn samples(&self) -> usize {
        self.rounds[0].len()
    }

    fn outage(&self, m: usize, bits: f64) -> (f64, f64) {
        let sorted = &self.rounds[m - 1];
        let n = sorted.len() as f64;
        let below = sorted.partition_point(|&a| a < bits) as f64;
        let p = below / n;
        (p, (p * (1.0 - p) / n).sqrt())
    }
}

/// Per-round accumulation state for one sample.
#[derive(Clone, Copy)]
struct AccState {
    protocol: Protocol,
    tb: f64,
    value: f64,
}

impl AccState {
    fn new(protocol: Protocol, tb: u32) -> Self {
        Self {
            protocol,
            tb: tb as f64,
            value: 0.0,
        }
    }

    /// Feeds one round SNR and returns the decodable bits so far.
    #[inline]
    fn push(&mut self, snr: f64) -> f64 {
        match self.protocol {
            Protocol::IR => {
                self.value += self.tb * snr.ln_1p() / LN_2;
                self.value
            }
            Protocol::CC => {
                self.value += snr;
                self.tb * self.value.ln_1p() / LN_2
            }
            Protocol::T1 => {
                self.value = self.value.max(snr);
                self.tb * self.value.ln_1p() / LN_2
            }
        }
    }
}

/// Decodable bits after each round for one chunk of samples, unsorted,
/// `out[r][i]` for round `r`, sample `i`.
fn accumulate_chunk(
    variable: &RoundSnr,
    protocol: Protocol,
    tb: u32,
    rounds: usize,
    seed: u64,
    tag: u64,
    chunk: usize,
    len: usize,
) -> Vec<Vec<f64>> {
    let models = variable.models();
    let mut state = vec![AccState::new(protocol, tb); len];
    let mut gains: Vec<Vec<f64>> = vec![Vec::with_capacity(len); models.len()];
    let mut out = Vec::with_capacity(rounds);
    for r in 0..rounds {
        for (l, model) in models.iter().enumerate() {
            let mut rng = stream_rng(seed, tag + l as u64, r as u64, chunk as u64);
            model.fill_gains(&mut rng, &mut gains[l], len);
        }
        let row: Vec<f64> = (0..len)
            .map(|i| {
                let snr: f64 = models.iter().zip(&gains).map(|(m, g)| m.snr * g[i]).sum();
                state[i].push(snr)
            })
            .collect();
        out.push(row);
    }
    out
}

fn sample_accumulation(
    variable: &RoundSnr,
    protocol: Protocol,
    tb: u32,
    rounds: usize,
    samples: usize,
    seed: u64,
    tag: u64,
) -> SortedAccumulation {
    let chunks: Vec<Vec<Vec<f64>>> = (0..chunk_count(samples))
        .into_par_iter()
        .map(|c| accumulate_chunk(variable, protocol, tb, rounds, seed, tag, c, chunk_len(samples, c)))
        .collect();
    let mut per_round: Vec<Vec<f64>> = (0..rounds).map(|_| Vec::with_capacity(samples)).collect();
    for chunk in chunks {
        for (r, row) in chunk.into_iter().enumerate() {
            per_round[r].extend(row);
        }
    }
    per_round.par_iter_mut().for_each(|v| v.sort_unstable_by(f64::total_cmp));
    SortedAccumulation { rounds: per_round }
}

/// Distribution of the accumulated IR rate on a uniform grid.
///
/// The per-round rate `X = TB log2(1 + gamma)` is discretised into bins of
/// width `h` on `[0, max_bits)`; bin `k` stands for `(k + 1/2) h`. The `m`-fold
/// sum is obtained by direct truncated convolution. Mass above `max_bits` never
/// contributes to `Pr{S_m < L}` for `L <= max_bits` since rates are nonnegative.
#[derive(Debug, Clone)]
struct ConvolvedAccumulation {
    step: f64,
    /// Prefix sums of the bin masses of `S_m`, `m = 1..=M`.
    cumulative: Vec<Vec<f64>>,
}

impl ConvolvedAccumulation {
    fn build(variable: &RoundSnr, tb: u32, rounds: usize, bins: usize, max_bits: f64) -> Result<Self> {
        let step = max_bits / bins as f64;
        let rate_cdf = |x: f64| -> Result<f64> {
            variable
                .cdf(snr_threshold(x, tb))
                .ok_or_else(|| Error::Unsupported("convolution needs a closed-form per-round SNR law".into()))
        };
        let mut edges = Vec::with_capacity(bins + 1);
        for k in 0..=bins {
            edges.push(rate_cdf(k as f64 * step)?);
        }
        let base: Vec<f64> = edges.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
        let mut cumulative = Vec::with_capacity(rounds);
        let mut current = base.clone();
        for m in 1..=rounds {
            if m > 1 {
                let mut next = vec![0.0; bins];
                for (k, slot) in next.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..=k {
                        acc += current[k - j] * base[j];
                    }
                    *slot = acc;
                }
                current = next;
            }
            let mut prefix = Vec::with_capacity(bins + 1);
            prefix.push(0.0);
            let mut run = 0.0;
            for &w in &current {
                run += w;
                prefix.push(run);
            }
            cumulative.push(prefix);
        }
        Ok(Self { step, cumulative })
    }

    fn max_bits(&self) -> f64 {
        self.step * (self.cumulative[0].len() - 1) as f64
    }

    fn outage(&self, m: usize, bits: f64) -> f64 {
        let prefix = &self.cumulative[m - 1];
        let bins = prefix.len() - 1;
        // mass K sits uniformly on [(K + m/2 - 1/2) h, (K + m/2 + 1/2) h)
        let t = bits / self.step - 0.5 * m as f64 + 0.5;
        if t <= 0.0 {
            return 0.0;
        }
        let whole = t.floor();
        let frac = t - whole;
        let whole = whole as usize;
        if whole >= bins {
            return prefix[bins].clamp(0.0, 1.0);
        }
        let partial = (prefix[whole + 1] - prefix[whole]) * frac;
        (prefix[whole] + partial).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
enum Accumulation {
    /// T1 with a closed-form round law: `P_out,m = p0^m`.
    Type1(RoundSnr),
    /// CC on one link: the summed gain is Gamma distributed.
    ChaseSingle(ChannelModel),
    Sampled(SortedAccumulation),
    Convolved(ConvolvedAccumulation),
}

impl Accumulation {
    fn build(
        variable: RoundSnr,
        protocol: Protocol,
        tb: u32,
        rounds: usize,
        config: &EstimatorConfig,
        tag: u64,
    ) -> Result<Self> {
        match (protocol, variable) {
            (Protocol::T1, v) if v.cdf(1.0).is_some() => return Ok(Accumulation::Type1(v)),
            (Protocol::CC, RoundSnr::Link(m)) => return Ok(Accumulation::ChaseSingle(m)),
            _ => {}
        }
        match config.method {
            EstimatorMethod::Convolution if protocol == Protocol::IR => Ok(Accumulation::Convolved(
                ConvolvedAccumulation::build(&variable, tb, rounds, config.bins, config.max_bits)?,
            )),
            _ => Ok(Accumulation::Sampled(sample_accumulation(
                &variable,
                protocol,
                tb,
                rounds,
                config.samples,
                config.seed,
                tag,
            ))),
        }
    }

    fn is_estimate(&self) -> bool {
        matches!(self, Accumulation::Sampled(_))
    }

    fn outage(&self, m: usize, bits: f64, tb: u32) -> Result<(f64, f64)> {
        if m == 0 {
            return Ok((1.0, 0.0));
        }
        if bits <= 0.0 {
            return Ok((0.0, 0.0));
        }
        Ok(match self {
            Accumulation::Type1(v) => {
                let p0 = v.cdf(snr_threshold(bits, tb)).expect("closed form checked at build");
                (p0.powi(m as i32), 0.0)
            }
            Accumulation::ChaseSingle(model) => {
                let thr = snr_threshold(bits, tb);
                if model.snr == 0.0 {
                    return Ok((1.0, 0.0));
                }
                let x = thr / model.snr / model.mean_power;
                let p = match model.fading {
                    Fading::Rayleigh => gamma_lr(m as f64, x),
                    Fading::Nakagami { shape } => gamma_lr(m as f64 * shape, shape * x),
                };
                (p, 0.0)
            }
            Accumulation::Sampled(s) => s.outage(m, bits),
            Accumulation::Convolved(c) => {
                if bits > c.max_bits() {
                    return Err(Error::Domain {
                        value: bits,
                        domain: "convolution grid [0, max_bits]",
                    });
                }
                (c.outage(m, bits), 0.0)
            }
        })
    }
}

#[derive(Debug, Clone)]
enum HopAccumulation {
    Single(Accumulation),
    CommonMessage(Accumulation, Accumulation),
}

/// Outage estimator of one hop, prepared once and queried for any `L` and any
/// number of rounds up to the prepared maximum.
#[derive(Debug, Clone)]
pub struct OutageModel {
    hop: HopSpec,
    rounds: usize,
    accumulation: HopAccumulation,
    samples: Option<usize>,
    max_rel_ci: Option<f64>,
}

impl OutageModel {
    pub fn prepare(hop: &HopSpec, rounds: usize, config: &EstimatorConfig) -> Result<Self> {
        Self::prepare_tagged(hop, rounds, config, 0)
    }

    /// `tag` separates the random streams of hops that share a seed.
    pub fn prepare_tagged(hop: &HopSpec, rounds: usize, config: &EstimatorConfig, tag: u64) -> Result<Self> {
        if rounds == 0 {
            return Err(invalid("rounds", "M must be at least 1"));
        }
        config.validate()?;
        let build = |v: RoundSnr, t: u64| Accumulation::build(v, hop.protocol, hop.tb, rounds, config, t);
        let accumulation = match hop.links {
            Links::Single(m) => HopAccumulation::Single(build(RoundSnr::Link(m), tag)?),
            Links::Alamouti([a, b]) => HopAccumulation::Single(build(RoundSnr::Sum(a, b), tag)?),
            Links::CommonMessage([a, b]) => HopAccumulation::CommonMessage(
                build(RoundSnr::Link(a), tag)?,
                build(RoundSnr::Link(b), tag + 1)?,
            ),
        };
        let samples = match &accumulation {
            HopAccumulation::Single(Accumulation::Sampled(s)) => Some(s.samples()),
            HopAccumulation::CommonMessage(a, b) => match (a, b) {
                (Accumulation::Sampled(s), _) | (_, Accumulation::Sampled(s)) => Some(s.samples()),
                _ => None,
            },
            _ => None,
        };
        Ok(Self {
            hop: *hop,
            rounds,
            accumulation,
            samples,
            max_rel_ci: config.max_rel_ci,
        })
    }

    pub fn hop(&self) -> &HopSpec {
        &self.hop
    }

    pub fn max_rounds(&self) -> usize {
        self.rounds
    }

    /// `P_out,0..=P_out,rounds` at packet size `bits`.
    pub fn series(&self, bits: f64, rounds: usize) -> Result<OutageSeries> {
        if rounds == 0 || rounds > self.rounds {
            return Err(invalid(
                "rounds",
                format!("must be in 1..={}, got {rounds}", self.rounds),
            ));
        }
        if !(bits >= 0.0 && bits.is_finite()) {
            return Err(invalid("bits", format!("must be finite and nonnegative, got {bits}")));
        }
        let tb = self.hop.tb;
        let mut values = Vec::with_capacity(rounds + 1);
        let mut std_errors = Vec::with_capacity(rounds + 1);
        let estimated = match &self.accumulation {
            HopAccumulation::Single(acc) => {
                for m in 0..=rounds {
                    let (p, se) = acc.outage(m, bits, tb)?;
                    values.push(p);
                    std_errors.push(se);
                }
                acc.is_estimate()
            }
            HopAccumulation::CommonMessage(first, second) => {
                for m in 0..=rounds {
                    let (a, sa) = first.outage(m, bits, tb)?;
                    let (b, sb) = second.outage(m, bits, tb)?;
                    let p = if m == 0 { 1.0 } else { 1.0 - (1.0 - a) * (1.0 - b) };
                    let se = ((1.0 - b).powi(2) * sa * sa + (1.0 - a).powi(2) * sb * sb).sqrt();
                    values.push(p);
                    std_errors.push(se);
                }
                first.is_estimate() || second.is_estimate()
            }
        };
        let series = OutageSeries {
            values,
            std_errors,
            estimated,
        };
        self.check_budget(&series, bits)?;
        Ok(series)
    }

    fn check_budget(&self, series: &OutageSeries, bits: f64) -> Result<()> {
        let Some(requested) = self.max_rel_ci else {
            return Ok(());
        };
        if !series.estimated || bits <= 0.0 {
            return Ok(());
        }
        let p = series.last();
        let se = *series.std_errors.last().expect("nonempty");
        let achieved = if p > 0.0 { 1.96 * se / p } else { f64::INFINITY };
        if achieved > requested {
            return Err(Error::EstimatorBudget {
                requested,
                achieved,
                samples: self.samples.unwrap_or(0),
            });
        }
        Ok(())
    }
}

/// One-shot form of [`OutageModel::series`].
pub fn outage_series(hop: &HopSpec, bits: f64, rounds: usize, config: &EstimatorConfig) -> Result<OutageSeries> {
    OutageModel::prepare(hop, rounds, config)?.series(bits, rounds)
}

/// Common-message outage estimated jointly per sample, i.e. the fraction of
/// draws in which at least one relay has not decoded after `m` rounds.
///
/// Uses the same streams as the product form of [`OutageModel`], so the two
/// can be compared draw for draw.
pub fn common_message_union_series(
    links: [ChannelModel; 2],
    protocol: Protocol,
    tb: u32,
    bits: f64,
    rounds: usize,
    samples: usize,
    seed: u64,
) -> Result<OutageSeries> {
    if rounds == 0 || samples == 0 {
        return Err(invalid("rounds", "rounds and samples must be positive"));
    }
    let counts: Vec<Vec<usize>> = (0..chunk_count(samples))
        .into_par_iter()
        .map(|c| {
            let len = chunk_len(samples, c);
            let a = accumulate_chunk(&RoundSnr::Link(links[0]), protocol, tb, rounds, seed, 0, c, len);
            let b = accumulate_chunk(&RoundSnr::Link(links[1]), protocol, tb, rounds, seed, 1, c, len);
            (0..rounds)
                .map(|r| (0..len).filter(|&i| a[r][i] < bits || b[r][i] < bits).count())
                .collect()
        })
        .collect();
    let n = samples as f64;
    let mut values = vec![1.0];
    let mut std_errors = vec![0.0];
    for r in 0..rounds {
        let p = counts.iter().map(|c| c[r]).sum::<usize>() as f64 / n;
        values.push(p);
        std_errors.push((p * (1.0 - p) / n).sqrt());
    }
    Ok(OutageSeries {
        values,
        std_errors,
        estimated: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rayleigh16() -> ChannelModel {
        ChannelModel::rayleigh(16.0, 1.0).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ChannelModel::rayleigh(0.0, 1.0).is_err());
        assert!(ChannelModel::rayleigh(1.0, -1.0).is_err());
        assert!(ChannelModel::nakagami(0.4, 1.0, 1.0).is_err());
        assert!(HopSpec::single(Protocol::IR, rayleigh16(), 0).is_err());
    }

    #[test]
    fn sample_mean_matches_mean_power() {
        let gains = sample_gains(&rayleigh16(), 1_000_000, 7);
        let mean = gains.iter().sum::<f64>() / gains.len() as f64;
        assert!((mean - 16.0).abs() / 16.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn nakagami_sample_mean() {
        let m = ChannelModel::nakagami(2.5, 4.0, 1.0).unwrap();
        let gains = sample_gains(&m, 400_000, 3);
        let mean = gains.iter().sum::<f64>() / gains.len() as f64;
        assert!((mean - 4.0).abs() / 4.0 < 0.01);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_gains(&rayleigh16(), 1, 99);
        let b = sample_gains(&rayleigh16(), 1, 99);
        assert_eq!(a, b);
    }

    #[test]
    fn exponential_cdf_fraction() {
        let m = ChannelModel::rayleigh(1.0, 1.0).unwrap();
        let gains = sample_gains(&m, 1_000_000, 11);
        let frac = gains.iter().filter(|&&z| z < LN_2).count() as f64 / gains.len() as f64;
        assert!((frac - 0.5).abs() < 0.005, "fraction {frac}");
    }

    #[test]
    fn first_failure_closed_forms() {
        let m = rayleigh16();
        assert_eq!(first_failure_prob(&m, 0.0, 180), 0.0);
        let expected = 1.0 - (-15.0f64 / 16.0).exp();
        assert!((first_failure_prob(&m, 720.0, 180) - expected).abs() < 1e-14);
        // threshold equal to the mean
        let bits = 180.0 * 17f64.log2();
        assert!((first_failure_prob(&m, bits, 180) - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn nakagami_one_is_rayleigh() {
        let n = ChannelModel::nakagami(1.0, 3.0, 2.0).unwrap();
        let r = ChannelModel::rayleigh(3.0, 2.0).unwrap();
        for x in [0.01, 0.5, 2.0, 9.0] {
            assert!((n.gain_cdf(x) - r.gain_cdf(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn t1_series_is_geometric() {
        let hop = HopSpec::single(Protocol::T1, rayleigh16(), 180).unwrap();
        let s = outage_series(&hop, 720.0, 5, &EstimatorConfig::default()).unwrap();
        let p0 = first_failure_prob(&rayleigh16(), 720.0, 180);
        for m in 0..=5 {
            assert!((s.values[m] - p0.powi(m as i32)).abs() < 1e-15);
        }
        assert!(!s.estimated);
    }

    #[test]
    fn ir_first_round_matches_closed_form() {
        let hop = HopSpec::single(Protocol::IR, rayleigh16(), 180).unwrap();
        let s = outage_series(&hop, 720.0, 3, &EstimatorConfig::monte_carlo(200_000, 5)).unwrap();
        let p0 = first_failure_prob(&rayleigh16(), 720.0, 180);
        assert!((s.values[1] - p0).abs() < 4.0 * s.std_errors[1]);
    }

    #[test]
    fn zero_bits_never_fail() {
        let hop = HopSpec::single(Protocol::IR, rayleigh16(), 180).unwrap();
        let s = outage_series(&hop, 0.0, 4, &EstimatorConfig::monte_carlo(1000, 1)).unwrap();
        assert_eq!(s.values, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn chase_combining_matches_monte_carlo() {
        let model = ChannelModel::nakagami(2.0, 4.0, 1.5).unwrap();
        let hop = HopSpec::single(Protocol::CC, model, 100).unwrap();
        let exact = outage_series(&hop, 500.0, 3, &EstimatorConfig::default()).unwrap();
        // same hop through the sampled path: Alamouti with a dead second link
        let dead = ChannelModel::rayleigh(1.0, 0.0).unwrap();
        let hop2 = HopSpec::new(Protocol::CC, Links::Alamouti([model, dead]), 100).unwrap();
        let mc = outage_series(&hop2, 500.0, 3, &EstimatorConfig::monte_carlo(200_000, 9)).unwrap();
        for m in 1..=3 {
            assert!((exact.values[m] - mc.values[m]).abs() < 4.0 * mc.std_errors[m] + 1e-9);
        }
    }

    #[test]
    fn convolution_agrees_with_monte_carlo() {
        let hop = HopSpec::single(Protocol::IR, rayleigh16(), 180).unwrap();
        let conv = outage_series(&hop, 720.0, 3, &EstimatorConfig::convolution(4096, 1440.0)).unwrap();
        let mc = outage_series(&hop, 720.0, 3, &EstimatorConfig::monte_carlo(400_000, 2)).unwrap();
        for m in 1..=3 {
            assert!(
                (conv.values[m] - mc.values[m]).abs() < 4.0 * mc.std_errors[m] + 1e-4,
                "m={m}: {} vs {}",
                conv.values[m],
                mc.values[m]
            );
        }
        let over = outage_series(&hop, 2000.0, 3, &EstimatorConfig::convolution(256, 1440.0));
        assert!(matches!(over, Err(Error::Domain { .. })));
    }

    #[test]
    fn alamouti_cdf_limits() {
        let a = ChannelModel::rayleigh(16.0, 2.0).unwrap();
        let b = ChannelModel::rayleigh(16.0, 2.0 * (1.0 + 1e-9)).unwrap();
        let c = ChannelModel::rayleigh(16.0, 2.0 * (1.0 + 1e-3)).unwrap();
        for x in [0.5, 10.0, 80.0] {
            let eq = alamouti_rayleigh_cdf(&a, &b, x).unwrap();
            let near = alamouti_rayleigh_cdf(&a, &c, x).unwrap();
            assert!((eq - near).abs() < 1e-3);
        }
        let n = ChannelModel::nakagami(2.0, 1.0, 1.0).unwrap();
        assert!(alamouti_rayleigh_cdf(&a, &n, 1.0).is_none());
    }

    #[test]
    fn budget_error_when_ci_too_wide() {
        let hop = HopSpec::single(Protocol::IR, rayleigh16(), 180).unwrap();
        let mut cfg = EstimatorConfig::monte_carlo(1000, 1);
        cfg.max_rel_ci = Some(0.01);
        let err = outage_series(&hop, 720.0, 4, &cfg).unwrap_err();
        assert!(matches!(err, Error::EstimatorBudget { samples: 1000, .. }));
        cfg.max_rel_ci = Some(10.0);
        cfg.samples = 100_000;
        assert!(outage_series(&hop, 500.0, 1, &cfg).is_ok());
    }

    #[test]
    fn rounds_beyond_prepared_are_rejected() {
        let hop = HopSpec::single(Protocol::IR, rayleigh16(), 180).unwrap();
        let model = OutageModel::prepare(&hop, 2, &EstimatorConfig::monte_carlo(100, 1)).unwrap();
        assert!(model.series(100.0, 3).is_err());
        assert!(model.series(100.0, 2).is_ok());
    }
}
