//! Buffer-aided diamond relay network: a source, two full-duplex relays and a
//! destination, with no direct or inter-relay link.
//!
//! Under HARQ-IR the source keeps a packet until both relays have decoded it,
//! and the relays forward with Alamouti coding, so both relay queues evolve
//! alike and the network is a tandem of two queues. The decode-and-forward
//! baseline sends at the rate of the weaker source link and beamforms from the
//! relays, without decoding errors.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    chunk_count, chunk_len, stream_rng, ChannelModel, EstimatorConfig, HopSpec, Links, OutageModel, Protocol,
};
use crate::effcap::{invert_delay_exponent, optimize_l, ChainExponent, DelayExponent, ExponentCache, LSearch};
use crate::error::{invalid, Error, Result};
use crate::harq::{chain_from_model, HarqChain};
use crate::tradeoff::{ConstraintCurve, DelayConstraint};

/// `θ` at which the decode-and-forward exponents are read as their maximum.
/// Decode-and-forward service draws used by the command line and the checks.
pub const DEFAULT_DF_SAMPLES: usize = 1 << 18;

pub const DEFAULT_THETA_PROBE: f64 = 1e3;

/// Points of the sweep that brackets each case's root.
pub const SWEEP_POINTS: usize = 256;

/// Random stream tags; every link of the network draws from its own streams.
const SOURCE_TAG: u64 = 0;
const RELAY_TAG: u64 = 2;
const DF_SOURCE_TAG: u64 = 4;
const DF_RELAY_TAG: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    HarqIr,
    DfCsi,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::HarqIr => "HARQ_IR",
            Scheme::DfCsi => "DF_CSI",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiamondSystem {
    /// Source to relay 1 and source to relay 2, each with the source SNR.
    pub source_links: [ChannelModel; 2],
    /// Relay 1 and relay 2 to the destination.
    pub relay_links: [ChannelModel; 2],
    pub tb: u32,
    pub rounds: usize,
    pub scheme: Scheme,
}

impl DiamondSystem {
    pub fn new(
        source_links: [ChannelModel; 2],
        relay_links: [ChannelModel; 2],
        tb: u32,
        rounds: usize,
        scheme: Scheme,
    ) -> Result<Self> {
        if tb == 0 {
            return Err(invalid("tb", "symbols per block must be at least 1"));
        }
        if rounds == 0 {
            return Err(invalid("rounds", "M must be at least 1"));
        }
        Ok(Self {
            source_links,
            relay_links,
            tb,
            rounds,
            scheme,
        })
    }

    /// Common-message IR hop from the source to both relays.
    pub fn source_hop(&self) -> HopSpec {
        HopSpec {
            protocol: Protocol::IR,
            links: Links::CommonMessage(self.source_links),
            tb: self.tb,
        }
    }

    /// Alamouti IR hop from the relays to the destination.
    pub fn relay_hop(&self) -> HopSpec {
        HopSpec {
            protocol: Protocol::IR,
            links: Links::Alamouti(self.relay_links),
            tb: self.tb,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hop {
    First,
    Second,
}

/// Outcome label of the two-hop solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseLabel {
    CaseI,
    CaseIIa,
    CaseIIb,
    CaseIIcSym,
    CaseIIcA,
    CaseIIcB,
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseLabel::CaseI => "CaseI",
            CaseLabel::CaseIIa => "CaseIIa",
            CaseLabel::CaseIIb => "CaseIIb",
            CaseLabel::CaseIIcSym => "CaseIIc_sym",
            CaseLabel::CaseIIcA => "CaseIIc_a",
            CaseLabel::CaseIIcB => "CaseIIc_b",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHopSolution {
    pub case: CaseLabel,
    pub theta1: f64,
    pub theta2: f64,
    pub j1: f64,
    pub j2: f64,
    pub rate_bps_hz: f64,
    pub pout_end_to_end: f64,
    /// Packet size; `None` for decode-and-forward.
    pub bits: Option<f64>,
    /// Set when a maximum exponent was read at a finite `θ` probe.
    pub probe_limited: bool,
}

/// `1 - (1 - P_s)(1 - P_r)`.
pub fn end_to_end_outage(first: f64, second: f64) -> f64 {
    1.0 - (1.0 - first) * (1.0 - second)
}

fn effective_max(f: &dyn DelayExponent) -> f64 {
    let ceiling = f.theta_ceiling();
    if ceiling.is_finite() {
        f.exponent(ceiling)
    } else {
        f.max_exponent()
    }
}

/// `θ` with `J(θ) = target`, or `None` when the target is out of reach.
fn inverse(f: &dyn DelayExponent, target: f64) -> Result<Option<f64>> {
    match invert_delay_exponent(f, target) {
        Ok(theta) => Ok(Some(theta)),
        Err(Error::OutOfRange { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Largest `θ >= bottom` with `positive(θ)`, for a predicate that is false
/// once `θ` is large enough. With `inclusive` unset the predicate is taken as
/// true at `bottom` without being evaluated there.
fn last_positive(bottom: f64, inclusive: bool, positive: impl Fn(f64) -> Result<bool>) -> Result<Option<f64>> {
    if !(bottom > 0.0 && bottom.is_finite()) {
        return Ok(None);
    }
    let mut top = 2.0 * bottom;
    let mut doublings = 0;
    while positive(top)? {
        top *= 2.0;
        doublings += 1;
        if doublings > 1100 {
            return Ok(None);
        }
    }
    let n = SWEEP_POINTS;
    let span = (top / bottom).ln();
    let mut hi = top;
    let mut lo = None;
    for k in (0..n).rev() {
        if k == 0 && !inclusive {
            break;
        }
        let x = bottom * (span * k as f64 / n as f64).exp();
        if positive(x)? {
            lo = Some(x);
            break;
        }
        hi = x;
    }
    let mut lo = match lo {
        Some(x) => x,
        None if !inclusive => bottom,
        None => return Ok(None),
    };
    let open_bottom = lo == bottom && !inclusive;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-14 * hi {
            break;
        }
        if positive(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if open_bottom && lo == bottom {
        return Ok(None);
    }
    Ok(Some(lo))
}

/// Case analysis of two queues in tandem under `(eps, D)`.
pub fn solve_two_hop(
    first: &dyn DelayExponent,
    second: &dyn DelayExponent,
    constraint: &DelayConstraint,
    tb: u32,
) -> Result<TwoHopSolution> {
    if tb == 0 {
        return Err(invalid("tb", "symbols per block must be at least 1"));
    }
    let tbf = tb as f64;
    let pout = end_to_end_outage(first.outage_probability(), second.outage_probability());
    let probe_limited = first.theta_ceiling().is_finite() || second.theta_ceiling().is_finite();
    let solution = |case, theta1, theta2, j1, j2, rate| TwoHopSolution {
        case,
        theta1,
        theta2,
        j1,
        j2,
        rate_bps_hz: rate,
        pout_end_to_end: pout,
        bits: None,
        probe_limited,
    };
    let j1_max = effective_max(first);
    let j2_max = effective_max(second);
    let curve = ConstraintCurve::new(*constraint);

    if constraint.is_void() {
        let rate = first.mean_service().min(second.mean_service()) / tbf;
        return Ok(solution(CaseLabel::CaseIIcSym, 0.0, 0.0, 0.0, 0.0, rate));
    }
    if curve.violation(j1_max, j2_max) > constraint.epsilon() {
        return Ok(solution(
            CaseLabel::CaseI,
            first.theta_ceiling(),
            second.theta_ceiling(),
            j1_max,
            j2_max,
            0.0,
        ));
    }
    let j_th = constraint.j_th();

    // Source-limited branch, driven by θ2: the smallest θ1 on the curve at
    // which J1(θ1) <= J2(θ2) + J1(θ1 - θ2) holds is the largest such θ2.
    let point_a = |t2: f64| -> Result<(f64, f64, f64, f64)> {
        let j2 = second.exponent(t2);
        let j1 = curve.phi(j2)?.value();
        let t1 = if j1.is_finite() {
            inverse(first, j1)?.unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        let gap = if t1.is_finite() {
            j2 + first.exponent(t1 - t2) - j1
        } else {
            f64::INFINITY
        };
        Ok((t1, j1, j2, gap))
    };
    let search_a = |bottom: Option<f64>, inclusive: bool, case: CaseLabel| -> Result<TwoHopSolution> {
        let found = match bottom {
            Some(b) => last_positive(b, inclusive, |t2| Ok(point_a(t2)?.3 >= 0.0))?,
            None => None,
        };
        let t2 = found.ok_or_else(|| Error::Solver(format!("{case}: no crossing above theta2 = {bottom:?}")))?;
        let (t1, j1, j2, _) = point_a(t2)?;
        if !t1.is_finite() {
            return Err(Error::Solver(format!("{case}: crossing at unbounded theta1")));
        }
        Ok(solution(case, t1, t2, j1, j2, j1 / (t1 * tbf)))
    };

    // Relay-limited branch, driven by θ1: the point on the curve where both
    // hops carry the same rate.
    let point_b = |t1: f64| -> Result<(f64, f64, f64, f64)> {
        let j1 = first.exponent(t1);
        let j2 = curve.phi(j1)?.value();
        let t2 = if j2.is_finite() {
            inverse(second, j2)?.unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        let second_rate = if t2.is_finite() { j2 / t2 } else { 0.0 };
        Ok((t2, j1, j2, j1 / t1 - second_rate))
    };
    let search_b = |bottom: Option<f64>, inclusive: bool, case: CaseLabel| -> Result<TwoHopSolution> {
        let found = match bottom {
            Some(b) => last_positive(b, inclusive, |t1| Ok(point_b(t1)?.3 >= 0.0))?,
            None => None,
        };
        let t1 = found.ok_or_else(|| Error::Solver(format!("{case}: no crossing above theta1 = {bottom:?}")))?;
        let (t2, j1, j2, _) = point_b(t1)?;
        if !t2.is_finite() {
            return Err(Error::Solver(format!("{case}: crossing at unbounded theta2")));
        }
        Ok(solution(case, t1, t2, j1, j2, j2 / (t2 * tbf)))
    };

    if j1_max < j_th {
        let bottom = inverse(second, curve.phi(j1_max)?.value())?;
        return search_a(bottom, false, CaseLabel::CaseIIa);
    }
    if j2_max < j_th {
        let bottom = inverse(first, curve.phi(j2_max)?.value())?;
        return search_b(bottom, false, CaseLabel::CaseIIb);
    }
    let t1_th = inverse(first, j_th)?.unwrap_or(f64::INFINITY);
    let t2_th = inverse(second, j_th)?.unwrap_or(f64::INFINITY);
    if t1_th == t2_th || (t1_th - t2_th).abs() <= 1e-9 * t1_th.max(t2_th) {
        let rate = if t1_th.is_finite() { j_th / (t1_th * tbf) } else { 0.0 };
        return Ok(solution(CaseLabel::CaseIIcSym, t1_th, t2_th, j_th, j_th, rate));
    }
    if t1_th > t2_th {
        search_a(Some(t2_th), true, CaseLabel::CaseIIcA)
    } else {
        search_b(Some(t1_th), true, CaseLabel::CaseIIcB)
    }
}

/// Decode-and-forward delay exponent `-ln E[e^{-θC}]` over a fixed sample of
/// per-block service `C` in bits.
#[derive(Debug)]
pub struct DfExponent {
    samples: Vec<f64>,
    min: f64,
    max: f64,
    mean: f64,
    probe: f64,
    j_probe: f64,
    heavy_tail: AtomicBool,
    cache: ExponentCache,
}

/// Weighted sums below this effective sample size are flagged.
const MIN_EFFECTIVE_SAMPLES: f64 = 100.0;

impl DfExponent {
    pub fn from_samples(samples: Vec<f64>, probe: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("samples", "must be at least 1"));
        }
        if !(probe > 0.0) {
            return Err(invalid("theta_probe", format!("must be positive, got {probe}")));
        }
        if let Some(bad) = samples.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(invalid("samples", format!("service {bad} is not a finite nonnegative rate")));
        }
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(0.0, f64::max);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let mut this = Self {
            samples,
            min,
            max,
            mean,
            probe,
            j_probe: 0.0,
            heavy_tail: AtomicBool::new(false),
            cache: ExponentCache::default(),
        };
        this.j_probe = this.evaluate(probe).0;
        Ok(this)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// True once an evaluation at negative `θ` rested on too few effective samples.
    pub fn heavy_tail(&self) -> bool {
        self.heavy_tail.load(Ordering::Relaxed)
    }

    fn evaluate(&self, theta: f64) -> (f64, f64) {
        if theta == 0.0 {
            return (0.0, self.mean);
        }
        let shift = if theta > 0.0 { self.min } else { self.max };
        let sums: Vec<(f64, f64, f64)> = self
            .samples
            .par_chunks(crate::channel::CHUNK)
            .map(|chunk| {
                chunk.iter().fold((0.0, 0.0, 0.0), |(w, wc, ww), &c| {
                    let e = (-theta * (c - shift)).exp();
                    (w + e, wc + e * c, ww + e * e)
                })
            })
            .collect();
        let (w, wc, ww) = sums
            .iter()
            .fold((0.0, 0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2));
        if theta < 0.0 && w * w / ww < MIN_EFFECTIVE_SAMPLES {
            self.heavy_tail.store(true, Ordering::Relaxed);
        }
        let n = self.samples.len() as f64;
        (theta * shift - (w / n).ln(), wc / w)
    }
}

impl DelayExponent for DfExponent {
    fn exponent_and_slope(&self, theta: f64) -> (f64, f64) {
        self.cache.get_or(theta, || self.evaluate(theta))
    }

    fn max_exponent(&self) -> f64 {
        self.j_probe
    }

    fn theta_ceiling(&self) -> f64 {
        self.probe
    }

    fn mean_service(&self) -> f64 {
        self.mean
    }

    fn outage_probability(&self) -> f64 {
        0.0
    }
}

fn block_rate(snr: f64, tb: f64) -> f64 {
    tb * snr.ln_1p() / std::f64::consts::LN_2
}

/// Bits per block of the two-relay Alamouti code at received SNRs `s1`, `s2`.
pub fn alamouti_rate(s1: f64, s2: f64, tb: f64) -> f64 {
    block_rate(s1 + s2, tb)
}

/// Bits per block of coherent two-relay beamforming at received SNRs `s1`, `s2`.
pub fn beamforming_rate(s1: f64, s2: f64, tb: f64) -> f64 {
    block_rate((s1.sqrt() + s2.sqrt()).powi(2), tb)
}

/// Per-block service of one decode-and-forward hop in bits: the weaker source
/// link for the first hop, coherent beamforming for the second.
pub fn df_service_samples(system: &DiamondSystem, hop: Hop, samples: usize, seed: u64) -> Vec<f64> {
    let (links, tag) = match hop {
        Hop::First => (system.source_links, DF_SOURCE_TAG),
        Hop::Second => (system.relay_links, DF_RELAY_TAG),
    };
    let tb = system.tb as f64;
    let chunks: Vec<Vec<f64>> = (0..chunk_count(samples))
        .into_par_iter()
        .map(|c| {
            let len = chunk_len(samples, c);
            let mut a = Vec::with_capacity(len);
            let mut b = Vec::with_capacity(len);
            links[0].fill_gains(&mut stream_rng(seed, tag, 0, c as u64), &mut a, len);
            links[1].fill_gains(&mut stream_rng(seed, tag + 1, 0, c as u64), &mut b, len);
            a.iter()
                .zip(&b)
                .map(|(&z1, &z2)| {
                    let (s1, s2) = (links[0].snr() * z1, links[1].snr() * z2);
                    match hop {
                        Hop::First => block_rate(s1.min(s2), tb),
                        Hop::Second => beamforming_rate(s1, s2, tb),
                    }
                })
                .collect()
        })
        .collect();
    chunks.concat()
}

/// One-shot decode-and-forward exponent of `hop` at `θ`.
pub fn df_delay_exponent(system: &DiamondSystem, hop: Hop, theta: f64, config: &EstimatorConfig) -> Result<f64> {
    let samples = df_service_samples(system, hop, config.samples, config.seed);
    Ok(DfExponent::from_samples(samples, DEFAULT_THETA_PROBE)?.exponent(theta))
}

#[derive(Debug)]
enum Prepared {
    Harq { source: OutageModel, relay: OutageModel },
    Df { source: DfExponent, relay: DfExponent },
}

/// A diamond system with its estimators prepared once, so that every packet
/// size and every `M` up to the system's share the same random draws.
#[derive(Debug)]
pub struct DiamondModel {
    system: DiamondSystem,
    prepared: Prepared,
}

impl DiamondModel {
    /// For decode-and-forward `config.samples` is the service sample size.
    pub fn prepare(system: &DiamondSystem, config: &EstimatorConfig) -> Result<Self> {
        Self::prepare_with_probe(system, config, DEFAULT_THETA_PROBE)
    }

    pub fn prepare_with_probe(system: &DiamondSystem, config: &EstimatorConfig, probe: f64) -> Result<Self> {
        let prepared = match system.scheme {
            Scheme::HarqIr => Prepared::Harq {
                source: OutageModel::prepare_tagged(&system.source_hop(), system.rounds, config, SOURCE_TAG)?,
                relay: OutageModel::prepare_tagged(&system.relay_hop(), system.rounds, config, RELAY_TAG)?,
            },
            Scheme::DfCsi => {
                if config.samples == 0 {
                    return Err(invalid("df_samples", "must be at least 1"));
                }
                Prepared::Df {
                    source: DfExponent::from_samples(
                        df_service_samples(system, Hop::First, config.samples, config.seed),
                        probe,
                    )?,
                    relay: DfExponent::from_samples(
                        df_service_samples(system, Hop::Second, config.samples, config.seed),
                        probe,
                    )?,
                }
            }
        };
        Ok(Self {
            system: *system,
            prepared,
        })
    }

    pub fn system(&self) -> &DiamondSystem {
        &self.system
    }

    fn harq_models(&self) -> Result<(&OutageModel, &OutageModel)> {
        match &self.prepared {
            Prepared::Harq { source, relay } => Ok((source, relay)),
            Prepared::Df { .. } => Err(Error::Unsupported("HARQ chains of a decode-and-forward system".into())),
        }
    }

    pub fn source_chain(&self, bits: f64, rounds: usize) -> Result<HarqChain> {
        chain_from_model(self.harq_models()?.0, bits, rounds)
    }

    pub fn relay_chain(&self, bits: f64, rounds: usize) -> Result<HarqChain> {
        chain_from_model(self.harq_models()?.1, bits, rounds)
    }

    /// Decode-and-forward exponents of the two hops.
    pub fn df_exponents(&self) -> Result<(&DfExponent, &DfExponent)> {
        match &self.prepared {
            Prepared::Df { source, relay } => Ok((source, relay)),
            Prepared::Harq { .. } => Err(Error::Unsupported("DF exponents of a HARQ-IR system".into())),
        }
    }

    /// Solution at packet size `bits` with `rounds` transmissions; both are
    /// ignored for decode-and-forward.
    pub fn solve_at(&self, bits: f64, rounds: usize, constraint: &DelayConstraint) -> Result<TwoHopSolution> {
        match &self.prepared {
            Prepared::Harq { .. } => {
                let first = ChainExponent::new(self.source_chain(bits, rounds)?);
                let second = ChainExponent::new(self.relay_chain(bits, rounds)?);
                let mut s = solve_two_hop(&first, &second, constraint, self.system.tb)?;
                s.bits = Some(bits);
                Ok(s)
            }
            Prepared::Df { source, relay } => solve_two_hop(source, relay, constraint, self.system.tb),
        }
    }

    pub fn solve(&self, bits: f64, constraint: &DelayConstraint) -> Result<TwoHopSolution> {
        self.solve_at(bits, self.system.rounds, constraint)
    }

    /// Best packet size for `rounds` transmissions; decode-and-forward has no
    /// packet size and is solved directly.
    pub fn optimize_at(&self, rounds: usize, constraint: &DelayConstraint, search: &LSearch) -> Result<TwoHopSolution> {
        if self.system.scheme == Scheme::DfCsi {
            return self.solve_at(0.0, rounds, constraint);
        }
        let search = LSearch {
            strict_upper: false,
            ..*search
        };
        let best = optimize_l(
            |l| {
                let s = self.solve_at(l, rounds, constraint)?;
                Ok((s.rate_bps_hz, s))
            },
            &search,
        )?;
        Ok(best.detail)
    }

    pub fn optimize(&self, constraint: &DelayConstraint, search: &LSearch) -> Result<TwoHopSolution> {
        self.optimize_at(self.system.rounds, constraint, search)
    }
}

/// Source-hop chain of a HARQ-IR diamond at packet size `bits`.
pub fn source_hop_chain(system: &DiamondSystem, bits: f64, config: &EstimatorConfig) -> Result<HarqChain> {
    let model = OutageModel::prepare_tagged(&system.source_hop(), system.rounds, config, SOURCE_TAG)?;
    chain_from_model(&model, bits, system.rounds)
}

/// Relay-hop chain of a HARQ-IR diamond at packet size `bits`.
pub fn relay_hop_chain(system: &DiamondSystem, bits: f64, config: &EstimatorConfig) -> Result<HarqChain> {
    let model = OutageModel::prepare_tagged(&system.relay_hop(), system.rounds, config, RELAY_TAG)?;
    chain_from_model(&model, bits, system.rounds)
}

/// Outage effective capacity of the network at its best packet size.
pub fn optimize_l_diamond(
    system: &DiamondSystem,
    constraint: &DelayConstraint,
    config: &EstimatorConfig,
    search: &LSearch,
) -> Result<TwoHopSolution> {
    DiamondModel::prepare(system, config)?.optimize(constraint, search)
}
