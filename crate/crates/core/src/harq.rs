//! Buffer-activity Markov chain of a truncated HARQ hop.
//!
//! State `m` means the head packet has been sent `m + 1` times without success
//! (state 0: a fresh packet). From state `m < M - 1` the chain moves to `m + 1`
//! with probability `p_m` and back to 0 otherwise; state `M - 1` always returns
//! to 0 because the packet either got through or is dropped.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{EstimatorConfig, HopSpec, OutageModel, OutageSeries};
use crate::error::{invalid, Result};

/// Denominators of `p_m = P_out,m+1 / P_out,m` below this are not trusted.
pub const RATIO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarqChain {
    rounds: usize,
    bits: f64,
    tb: u32,
    p: Vec<f64>,
    pout_series: Vec<f64>,
    pout: f64,
    /// Set when some `p_m` was forced to 1 because its denominator fell below
    /// [`RATIO_FLOOR`].
    flagged: bool,
}

impl HarqChain {
    /// Chain with the given transition probabilities `p_0..p_{M-1}`.
    pub fn from_transition_probs(p: Vec<f64>, bits: f64, tb: u32) -> Result<Self> {
        if p.is_empty() {
            return Err(invalid("rounds", "M must be at least 1"));
        }
        if let Some(bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(invalid("p", format!("transition probability {bad} outside [0, 1]")));
        }
        Self::assemble(p, bits, tb, false)
    }

    /// Chain from an outage series `P_out,0..=P_out,M` via `p_m = P_out,m+1 / P_out,m`.
    ///
    /// A zero denominator makes every later `p_k` zero. For estimated series a
    /// denominator below [`RATIO_FLOOR`] sets `p_m = 1` and flags the chain;
    /// exact series are divided as they are. The stored series is rebuilt
    /// from `p`.
    pub fn from_series(series: &OutageSeries, bits: f64, tb: u32) -> Result<Self> {
        let values = &series.values;
        if values.len() < 2 {
            return Err(invalid("rounds", "M must be at least 1"));
        }
        let mut p = Vec::with_capacity(values.len() - 1);
        let mut flagged = false;
        let mut dead = false;
        for w in values.windows(2) {
            let (den, num) = (w[0], w[1]);
            let pm = if dead || den <= 0.0 {
                dead = true;
                0.0
            } else if series.estimated && den < RATIO_FLOOR {
                flagged = true;
                1.0
            } else {
                (num / den).clamp(0.0, 1.0)
            };
            p.push(pm);
        }
        Self::assemble(p, bits, tb, flagged)
    }

    fn assemble(p: Vec<f64>, bits: f64, tb: u32, flagged: bool) -> Result<Self> {
        if !(bits >= 0.0 && bits.is_finite()) {
            return Err(invalid("bits", format!("must be finite and nonnegative, got {bits}")));
        }
        if tb == 0 {
            return Err(invalid("tb", "symbols per block must be at least 1"));
        }
        let pout_series = cumulative_products(&p);
        let pout = *pout_series.last().expect("nonempty");
        Ok(Self {
            rounds: p.len(),
            bits,
            tb,
            p,
            pout_series,
            pout,
            flagged,
        })
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn bits(&self) -> f64 {
        self.bits
    }

    pub fn tb(&self) -> u32 {
        self.tb
    }

    pub fn transition_probs(&self) -> &[f64] {
        &self.p
    }

    pub fn pout_series(&self) -> &[f64] {
        &self.pout_series
    }

    /// End outage probability `P_out,M`.
    pub fn pout(&self) -> f64 {
        self.pout
    }

    pub fn flagged(&self) -> bool {
        self.flagged
    }

    /// Expected transmissions per packet, `sum_{m<M} P_out,m`.
    pub fn expected_transmissions(&self) -> f64 {
        self.pout_series[..self.rounds].iter().sum()
    }

    /// Column-stochastic `M x M` matrix; entry `(i, j)` is the probability of
    /// moving from state `j` to state `i`.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let m = self.rounds;
        let mut t = DMatrix::zeros(m, m);
        for j in 0..m - 1 {
            t[(0, j)] = 1.0 - self.p[j];
            t[(j + 1, j)] = self.p[j];
        }
        t[(0, m - 1)] = 1.0;
        t
    }

    /// Delay-unconstrained throughput of decoded packets, bps/Hz.
    pub fn goodput(&self) -> f64 {
        self.bits / self.tb as f64 * (1.0 - self.pout) / self.expected_transmissions()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chain is always serialisable")
    }

    /// Parses and checks a record written by [`HarqChain::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        let chain: HarqChain =
            serde_json::from_str(text).map_err(|e| invalid("chain", format!("malformed record: {e}")))?;
        chain.validate()?;
        Ok(chain)
    }

    fn validate(&self) -> Result<()> {
        let rebuilt = if self.flagged {
            Self::assemble(self.p.clone(), self.bits, self.tb, true)?
        } else {
            Self::from_transition_probs(self.p.clone(), self.bits, self.tb)?
        };
        if rebuilt.rounds != self.rounds || rebuilt.pout_series != self.pout_series || rebuilt.pout != self.pout {
            return Err(invalid("chain", "outage series is inconsistent with the transition probabilities"));
        }
        Ok(())
    }
}

fn cumulative_products(p: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len() + 1);
    let mut run = 1.0;
    out.push(run);
    for &pm in p {
        run *= pm;
        out.push(run);
    }
    out
}

/// Chain of `hop` at packet size `bits` with `rounds` transmissions.
pub fn build_chain(hop: &HopSpec, bits: f64, rounds: usize, config: &EstimatorConfig) -> Result<HarqChain> {
    let model = OutageModel::prepare(hop, rounds, config)?;
    chain_from_model(&model, bits, rounds)
}

/// Chain from an already prepared estimator; all chains built from one model
/// share its random draws.
pub fn chain_from_model(model: &OutageModel, bits: f64, rounds: usize) -> Result<HarqChain> {
    let series = model.series(bits, rounds)?;
    HarqChain::from_series(&series, bits, model.hop().tb)
}

impl From<&HarqChain> for OutageSeries {
    fn from(chain: &HarqChain) -> Self {
        OutageSeries {
            values: chain.pout_series.clone(),
            std_errors: vec![0.0; chain.pout_series.len()],
            estimated: false,
        }
    }
}
