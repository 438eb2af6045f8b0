//! Frame-by-frame simulation of HARQ queues.
//!
//! Bits arrive as a constant fluid and are cut into `L`-bit packets once `L`
//! whole bits are queued. In each frame the head packet of every non-empty
//! queue gets one HARQ round on freshly drawn gains; it leaves on success or
//! after its `M`-th failure. In the diamond network the relay queue is served
//! before the source, so a packet that reaches the relays in frame `n` can be
//! forwarded from frame `n + 1` on.
//!
//! Bit accounting is done in integer units of `2^-16` bit, which makes
//! `arrived = delivered + dropped + queued` hold exactly.

use std::collections::VecDeque;
use std::f64::consts::LN_2;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{stream_rng, ChannelModel, HopSpec, Links, Protocol};
use crate::diamond::{DiamondSystem, Scheme};
use crate::error::{invalid, Error, Result};

/// Fixed-point bit units per bit.
pub const BIT_UNIT: f64 = 65536.0;

/// Default number of discarded frames.
pub const DEFAULT_WARMUP: u64 = 10_000;

/// Survival levels of the tail fit.
pub const TAIL_RANGE: (f64, f64) = (1e-4, 1e-1);
const TAIL_LEVELS: usize = 40;

const SIM_TAG: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimSystem {
    OneHop { hop: HopSpec, bits: f64, rounds: usize },
    Diamond { system: DiamondSystem, bits: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Constant arrivals, bits per block.
    pub arrival_rate: f64,
    pub frames: u64,
    pub warmup: u64,
    pub seed: u64,
    /// End-to-end deadline in blocks for the delay-violation statistic.
    pub d_max_blocks: Option<f64>,
    /// Number of leading frames to record in the trace.
    pub trace_frames: u64,
    pub system: SimSystem,
}

impl SimConfig {
    pub fn new(system: SimSystem, arrival_rate: f64, frames: u64, seed: u64) -> Self {
        Self {
            arrival_rate,
            frames,
            warmup: DEFAULT_WARMUP.min(frames / 10),
            seed,
            d_max_blocks: None,
            trace_frames: 0,
            system,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err(invalid("arrival_rate", format!("must be finite and nonnegative, got {}", self.arrival_rate)));
        }
        if self.frames <= self.warmup {
            return Err(invalid("frames", format!("must exceed warmup {}, got {}", self.warmup, self.frames)));
        }
        if let Some(d) = self.d_max_blocks {
            if !(d >= 0.0) {
                return Err(invalid("d_max", format!("must be nonnegative, got {d}")));
            }
        }
        let (bits, rounds) = match &self.system {
            SimSystem::OneHop { bits, rounds, .. } => (*bits, *rounds),
            SimSystem::Diamond { system, bits } => {
                if system.scheme != Scheme::HarqIr {
                    return Err(Error::Unsupported("simulation of the decode-and-forward baseline".into()));
                }
                (*bits, system.rounds)
            }
        };
        if !(bits > 0.0 && bits.is_finite()) {
            return Err(invalid("bits", format!("packet size must be positive, got {bits}")));
        }
        if (bits * BIT_UNIT).round() < 1.0 {
            return Err(invalid("bits", "packet size below the fixed-point resolution"));
        }
        if rounds == 0 {
            return Err(invalid("rounds", "M must be at least 1"));
        }
        Ok(())
    }
}

/// Least-squares fit of `ln Pr{Q > q}` against `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// `(q, ln survival)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
    /// Fitted slope, per bit; `None` when the observed tail is degenerate.
    pub slope: Option<f64>,
}

impl TailFit {
    /// `-slope`, comparable to the QoS exponent.
    pub fn decay_rate(&self) -> Option<f64> {
        self.slope.map(|s| -s)
    }
}

/// Bit totals in fixed-point units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BitLedger {
    pub arrived: u128,
    pub delivered: u128,
    pub dropped: u128,
    pub queued: u128,
}

impl BitLedger {
    pub fn balanced(&self) -> bool {
        self.arrived == self.delivered + self.dropped + self.queued
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Idle,
    Nack,
    Success,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub frame: u64,
    /// Source queue content after the frame, bits.
    pub queue_bits: f64,
    /// Rounds spent on the source head packet after the frame.
    pub state: usize,
    /// What happened to the source head packet.
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub measured_frames: u64,
    /// One fit per queue: the source, then the relays.
    pub queue_tails: Vec<TailFit>,
    /// Fraction of delivered packets later than the deadline.
    pub delay_violation: Option<f64>,
    pub delay_violation_ci: Option<f64>,
    pub mean_delay_blocks: f64,
    pub delivered: u64,
    /// Deliveries whose packet arrived before the previously delivered one.
    pub out_of_order: u64,
    /// Drops at each hop.
    pub dropped: Vec<u64>,
    /// Dropped fraction of finished packets.
    pub empirical_outage: f64,
    /// Standard error of `empirical_outage`.
    pub outage_se: f64,
    /// 95% half-width of `empirical_outage`.
    pub outage_ci: f64,
    pub unstable: bool,
    pub ledger: BitLedger,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy)]
struct Packet {
    arrival: u64,
}

#[derive(Debug, Clone, Copy)]
enum Receivers {
    Single(ChannelModel),
    Both([ChannelModel; 2]),
    Alamouti([ChannelModel; 2]),
}

enum Outcome {
    Idle,
    Nack,
    Success(Packet),
    Drop,
}

/// One queue and the HARQ state of its head packet.
struct Server {
    receivers: Receivers,
    protocol: Protocol,
    tb: f64,
    bits: f64,
    rounds: usize,
    queue: VecDeque<Packet>,
    round: usize,
    acc: [f64; 2],
    decoded: [bool; 2],
}

impl Server {
    fn new(receivers: Receivers, protocol: Protocol, tb: u32, bits: f64, rounds: usize) -> Self {
        Self {
            receivers,
            protocol,
            tb: tb as f64,
            bits,
            rounds,
            queue: VecDeque::new(),
            round: 0,
            acc: [0.0; 2],
            decoded: [false; 2],
        }
    }

    /// Accumulates one round's SNR into receiver `k` and reports whether it decodes.
    fn absorb(&mut self, k: usize, snr: f64) -> bool {
        let rate = |s: f64| self.tb * s.ln_1p() / LN_2;
        let decodable = match self.protocol {
            Protocol::IR => {
                self.acc[k] += rate(snr);
                self.acc[k]
            }
            Protocol::CC => {
                self.acc[k] += snr;
                rate(self.acc[k])
            }
            Protocol::T1 => rate(snr),
        };
        decodable >= self.bits
    }

    fn serve(&mut self, rng: &mut ChaCha8Rng) -> Outcome {
        if self.queue.is_empty() {
            return Outcome::Idle;
        }
        let success = match self.receivers {
            Receivers::Single(m) => {
                let snr = m.snr() * m.draw_gain(rng);
                self.absorb(0, snr)
            }
            Receivers::Alamouti([a, b]) => {
                let snr = a.snr() * a.draw_gain(rng) + b.snr() * b.draw_gain(rng);
                self.absorb(0, snr)
            }
            Receivers::Both(links) => {
                for (k, m) in links.iter().enumerate() {
                    let snr = m.snr() * m.draw_gain(rng);
                    if !self.decoded[k] {
                        self.decoded[k] = self.absorb(k, snr);
                    }
                }
                self.decoded[0] && self.decoded[1]
            }
        };
        self.round += 1;
        if success || self.round == self.rounds {
            self.round = 0;
            self.acc = [0.0; 2];
            self.decoded = [false; 2];
            let packet = self.queue.pop_front().expect("nonempty queue");
            if success {
                Outcome::Success(packet)
            } else {
                Outcome::Drop
            }
        } else {
            Outcome::Nack
        }
    }
}

fn hop_receivers(hop: &HopSpec) -> Receivers {
    match hop.links {
        Links::Single(m) => Receivers::Single(m),
        Links::CommonMessage(l) => Receivers::Both(l),
        Links::Alamouti(l) => Receivers::Alamouti(l),
    }
}

/// Estimates the decay rate of `Pr{Q > q}` from samples of `Q`.
pub fn fit_tail(samples: &[f64]) -> TailFit {
    if samples.is_empty() {
        return TailFit {
            points: Vec::new(),
            slope: None,
        };
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (lo, hi) = TAIL_RANGE;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for k in 0..TAIL_LEVELS {
        let level = hi * (lo / hi).powf(k as f64 / (TAIL_LEVELS - 1) as f64);
        let index = n - ((level * n as f64).ceil() as usize).clamp(1, n);
        let q = sorted[index];
        // empirical survival at q itself, which ties can push below `level`
        let above = n - sorted.partition_point(|&x| x <= q);
        if above == 0 {
            continue;
        }
        let point = (q, (above as f64 / n as f64).ln());
        if points.last() != Some(&point) {
            points.push(point);
        }
    }
    let distinct = points.windows(2).any(|w| w[0].0 != w[1].0);
    if points.len() < 2 || !distinct {
        return TailFit { points, slope: None };
    }
    let m = points.len() as f64;
    let qx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let ly = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - qx) * (p.1 - ly)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - qx).powi(2)).sum();
    let slope = (sxy / sxx).min(0.0);
    TailFit {
        points,
        slope: Some(slope),
    }
}

fn simulate(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let (mut servers, bits) = match &config.system {
        SimSystem::OneHop { hop, bits, rounds } => (
            vec![Server::new(hop_receivers(hop), hop.protocol, hop.tb, *bits, *rounds)],
            *bits,
        ),
        SimSystem::Diamond { system, bits } => {
            let source = system.source_hop();
            let relay = system.relay_hop();
            (
                vec![
                    Server::new(hop_receivers(&source), Protocol::IR, system.tb, *bits, system.rounds),
                    Server::new(hop_receivers(&relay), Protocol::IR, system.tb, *bits, system.rounds),
                ],
                *bits,
            )
        }
    };
    let hops = servers.len();
    let arrival_units = (config.arrival_rate * BIT_UNIT).round() as u128;
    let packet_units = (bits * BIT_UNIT).round() as u128;
    let mut rng = stream_rng(config.seed, SIM_TAG, 0, 0);

    let mut fluid: u128 = 0;
    let mut ledger = BitLedger::default();
    let measured = (config.frames - config.warmup) as usize;
    let mut queue_samples: Vec<Vec<f64>> = vec![Vec::with_capacity(measured); hops];
    let mut delivered = 0u64;
    let mut out_of_order = 0u64;
    let mut last_arrival = 0u64;
    let mut late = 0u64;
    let mut delay_sum = 0.0;
    let mut dropped = vec![0u64; hops];
    let mut trace = Vec::new();

    for frame in 0..config.frames {
        let counting = frame >= config.warmup;
        fluid += arrival_units;
        ledger.arrived += arrival_units;
        while fluid >= packet_units {
            fluid -= packet_units;
            servers[0].queue.push_back(Packet { arrival: frame });
        }

        // downstream first, so forwarded packets wait for the next frame
        let mut forwarded = Vec::new();
        let mut source_event = TraceEvent::Idle;
        for h in (0..hops).rev() {
            let outcome = servers[h].serve(&mut rng);
            let event = match outcome {
                Outcome::Idle => TraceEvent::Idle,
                Outcome::Nack => TraceEvent::Nack,
                Outcome::Success(p) if h + 1 < hops => {
                    forwarded.push(p);
                    TraceEvent::Success
                }
                Outcome::Success(p) => {
                    ledger.delivered += packet_units;
                    if p.arrival < last_arrival {
                        out_of_order += 1;
                    }
                    last_arrival = p.arrival;
                    if counting {
                        let delay = (frame - p.arrival) as f64;
                        delivered += 1;
                        delay_sum += delay;
                        if config.d_max_blocks.is_some_and(|d| delay > d) {
                            late += 1;
                        }
                    }
                    TraceEvent::Success
                }
                Outcome::Drop => {
                    ledger.dropped += packet_units;
                    if counting {
                        dropped[h] += 1;
                    }
                    TraceEvent::Drop
                }
            };
            if h == 0 {
                source_event = event;
            }
        }
        if hops > 1 {
            servers[1].queue.extend(forwarded);
        }

        let queue_bits = |s: &Server, extra: u128| (s.queue.len() as u128 * packet_units + extra) as f64 / BIT_UNIT;
        if counting {
            for (h, s) in servers.iter().enumerate() {
                queue_samples[h].push(queue_bits(s, if h == 0 { fluid } else { 0 }));
            }
        }
        if frame < config.trace_frames {
            trace.push(TraceRow {
                frame,
                queue_bits: queue_bits(&servers[0], fluid),
                state: servers[0].round,
                event: source_event,
            });
        }
    }

    ledger.queued = fluid + servers.iter().map(|s| s.queue.len() as u128).sum::<u128>() * packet_units;
    debug_assert!(ledger.balanced());

    let finished = delivered + dropped.iter().sum::<u64>();
    let (outage, outage_se) = if finished > 0 {
        let p = dropped.iter().sum::<u64>() as f64 / finished as f64;
        (p, (p * (1.0 - p) / finished as f64).sqrt())
    } else {
        (0.0, 0.0)
    };
    let (delay_violation, delay_violation_ci) = match config.d_max_blocks {
        Some(_) if delivered > 0 => {
            let p = late as f64 / delivered as f64;
            (Some(p), Some(1.96 * (p * (1.0 - p) / delivered as f64).sqrt()))
        }
        _ => (None, None),
    };
    let unstable = queue_samples.iter().any(|q| growing(q, bits));
    Ok(SimReport {
        measured_frames: measured as u64,
        queue_tails: queue_samples.iter().map(|q| fit_tail(q)).collect(),
        delay_violation,
        delay_violation_ci,
        mean_delay_blocks: if delivered > 0 { delay_sum / delivered as f64 } else { 0.0 },
        delivered,
        out_of_order,
        dropped,
        empirical_outage: outage,
        outage_se,
        outage_ci: 1.96 * outage_se,
        unstable,
        ledger,
        trace,
    })
}

/// Queue content in the last tenth of the run well above the second tenth.
fn growing(samples: &[f64], bits: f64) -> bool {
    let n = samples.len();
    if n < 20 {
        return false;
    }
    let tenth = n / 10;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let early = mean(&samples[tenth..2 * tenth]);
    let late = mean(&samples[n - tenth..]);
    late > 4.0 * early + 100.0 * bits
}

/// Runs a one-hop configuration.
pub fn simulate_one_hop(config: &SimConfig) -> Result<SimReport> {
    if !matches!(config.system, SimSystem::OneHop { .. }) {
        return Err(invalid("system", "expected a one-hop system"));
    }
    simulate(config)
}

/// Runs a diamond configuration; the delay is measured end to end.
pub fn simulate_diamond(config: &SimConfig) -> Result<SimReport> {
    if !matches!(config.system, SimSystem::Diamond { .. }) {
        return Err(invalid("system", "expected a diamond system"));
    }
    simulate(config)
}

/// Seed of replication `index`.
pub fn replication_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Independent replications with derived seeds, returned in index order.
pub fn replicate(config: &SimConfig, replications: usize) -> Result<Vec<SimReport>> {
    (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let mut c = config.clone();
            c.seed = replication_seed(config.seed, r);
            simulate(&c)
        })
        .collect()
}
