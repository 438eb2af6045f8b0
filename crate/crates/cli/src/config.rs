//! TOML experiment configuration.
//!
//! All SNRs are given in dB here and converted to linear scale once, when the
//! core types are built. Times are in seconds and converted to blocks of
//! `T` seconds.

use std::path::Path;

use anyhow::{bail, Context, Result};
use harq_effcap::channel::{ChannelModel, EstimatorConfig, EstimatorMethod, Fading, HopSpec, Protocol};
use harq_effcap::diamond::{DiamondSystem, Scheme, DEFAULT_DF_SAMPLES};
use harq_effcap::effcap::LSearch;
use harq_effcap::tradeoff::DelayConstraint;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub constraint: ConstraintSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    HarqIr,
    DfCsi,
}

impl From<SchemeName> for Scheme {
    fn from(s: SchemeName) -> Self {
        match s {
            SchemeName::HarqIr => Scheme::HarqIr,
            SchemeName::DfCsi => Scheme::DfCsi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    T1,
    Cc,
    Ir,
}

impl From<ProtocolName> for Protocol {
    fn from(p: ProtocolName) -> Self {
        match p {
            ProtocolName::T1 => Protocol::T1,
            ProtocolName::Cc => Protocol::CC,
            ProtocolName::Ir => Protocol::IR,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Mean power gain of every link.
    #[serde(default = "default_mean_gain")]
    pub mean_gain: f64,
    /// Nakagami shape; Rayleigh when absent.
    pub nakagami_m: Option<f64>,
    pub snr_s_db: f64,
    /// Relay SNR; required by the diamond scenarios.
    pub snr_r_db: Option<f64>,
    /// Second relay SNR, defaults to `snr_r_db`.
    pub snr_r2_db: Option<f64>,
    #[serde(default = "default_block_s")]
    pub t_s: f64,
    #[serde(default = "default_bandwidth")]
    pub b_hz: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Protocol of the one-hop scenarios.
    #[serde(default = "default_protocol")]
    pub protocol: ProtocolName,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<SchemeName>,
}

fn default_mean_gain() -> f64 {
    16.0
}
fn default_block_s() -> f64 {
    1e-3
}
fn default_bandwidth() -> f64 {
    180e3
}
fn default_rounds() -> usize {
    4
}
fn default_protocol() -> ProtocolName {
    ProtocolName::Ir
}
fn default_schemes() -> Vec<SchemeName> {
    vec![SchemeName::HarqIr]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_d_max")]
    pub d_max_s: f64,
    /// QoS exponent of the one-hop scenarios, per bit.
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_epsilon() -> f64 {
    0.05
}
fn default_d_max() -> f64 {
    1.0
}
fn default_theta() -> f64 {
    0.01
}

impl Default for ConstraintSection {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            d_max_s: default_d_max(),
            theta: default_theta(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    MonteCarlo,
    Convolution,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    #[serde(default = "default_method")]
    pub method: MethodName,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_df_samples")]
    pub df_samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Convolution grid end in bits; defaults to the search upper bound.
    pub max_bits: Option<f64>,
    pub max_rel_ci: Option<f64>,
}

fn default_method() -> MethodName {
    MethodName::MonteCarlo
}
fn default_samples() -> usize {
    1_000_000
}
fn default_df_samples() -> usize {
    DEFAULT_DF_SAMPLES
}
fn default_seed() -> u64 {
    1
}
fn default_bins() -> usize {
    1 << 14
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            method: default_method(),
            samples: default_samples(),
            df_samples: default_df_samples(),
            seed: default_seed(),
            bins: default_bins(),
            max_bits: None,
            max_rel_ci: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub l_min: Option<f64>,
    pub l_max: Option<f64>,
    pub grid_points: Option<usize>,
    pub tolerance: Option<f64>,
}

/// One sweep axis: either explicit `values` or `start`/`stop`/`step`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub values: Option<Vec<f64>>,
    pub start: Option<f64>,
    pub stop: Option<f64>,
    pub step: Option<f64>,
    /// Second axis of `ec_vs_M`.
    pub epsilons: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    OneHop,
    Diamond,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_topology")]
    pub topology: Topology,
    #[serde(default = "default_frames")]
    pub frames: u64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Arrival rate in bps/Hz; the analytic operating point when absent.
    pub arrival_bps_hz: Option<f64>,
    /// Packet size; the optimum when absent.
    pub bits: Option<f64>,
    #[serde(default)]
    pub trace_frames: u64,
}

fn default_topology() -> Topology {
    Topology::Diamond
}
fn default_frames() -> u64 {
    1_000_000
}
fn default_warmup() -> u64 {
    10_000
}
fn default_replications() -> usize {
    1
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            topology: default_topology(),
            frames: default_frames(),
            warmup: default_warmup(),
            replications: default_replications(),
            arrival_bps_hz: None,
            bits: None,
            trace_frames: 0,
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        let s = &self.system;
        if !(s.t_s > 0.0 && s.b_hz > 0.0) {
            bail!("system.t_s and system.b_hz must be positive");
        }
        if (s.t_s * s.b_hz).round() < 1.0 {
            bail!("system.t_s * system.b_hz must round to a positive integer, got {}", s.t_s * s.b_hz);
        }
        if s.rounds == 0 {
            bail!("system.rounds must be at least 1");
        }
        if s.schemes.is_empty() {
            bail!("system.schemes must not be empty");
        }
        if !(self.constraint.d_max_s > 0.0) {
            bail!("constraint.d_max_s must be positive, got {}", self.constraint.d_max_s);
        }
        if self.simulate.replications == 0 {
            bail!("simulate.replications must be at least 1");
        }
        Ok(())
    }

    /// Symbols per block, `round(T B)`.
    pub fn tb(&self) -> u32 {
        (self.system.t_s * self.system.b_hz).round() as u32
    }

    pub fn d_max_blocks(&self) -> f64 {
        self.constraint.d_max_s / self.system.t_s
    }

    pub fn constraint(&self, epsilon: f64) -> Result<DelayConstraint> {
        DelayConstraint::new(epsilon, self.d_max_blocks()).context("constraint.epsilon")
    }

    fn fading(&self) -> Fading {
        match self.system.nakagami_m {
            Some(shape) => Fading::Nakagami { shape },
            None => Fading::Rayleigh,
        }
    }

    fn link(&self, snr_db: f64, field: &str) -> Result<ChannelModel> {
        ChannelModel::new(self.fading(), self.system.mean_gain, db_to_linear(snr_db))
            .with_context(|| format!("system.{field}"))
    }

    /// Relay SNRs in dB, failing with the field name when absent.
    pub fn snr_r_db(&self) -> Result<(f64, f64)> {
        let Some(r1) = self.system.snr_r_db else {
            bail!("missing required field `snr_r_db` in [system]");
        };
        Ok((r1, self.system.snr_r2_db.unwrap_or(r1)))
    }

    /// The diamond network with relay SNR `snr_r_db` (both relays shifted
    /// together when the relays differ) and `rounds` transmissions.
    pub fn diamond(&self, scheme: Scheme, snr_r_db: f64, rounds: usize) -> Result<DiamondSystem> {
        let (r1, r2) = self.snr_r_db()?;
        let s = self.link(self.system.snr_s_db, "snr_s_db")?;
        let relay1 = self.link(snr_r_db, "snr_r_db")?;
        let relay2 = self.link(snr_r_db + (r2 - r1), "snr_r2_db")?;
        Ok(DiamondSystem::new([s, s], [relay1, relay2], self.tb(), rounds, scheme)?)
    }

    pub fn one_hop(&self) -> Result<HopSpec> {
        let link = self.link(self.system.snr_s_db, "snr_s_db")?;
        Ok(HopSpec::single(self.system.protocol.into(), link, self.tb())?)
    }

    pub fn search(&self) -> LSearch {
        let base = LSearch::for_tb(self.tb());
        LSearch {
            lo: self.search.l_min.unwrap_or(base.lo),
            hi: self.search.l_max.unwrap_or(base.hi),
            grid_points: self.search.grid_points.unwrap_or(base.grid_points),
            tolerance: self.search.tolerance.unwrap_or(base.tolerance),
            strict_upper: base.strict_upper,
        }
    }

    /// Estimator of the HARQ outage series.
    pub fn estimator(&self, seed: u64) -> EstimatorConfig {
        let e = &self.estimator;
        EstimatorConfig {
            method: match e.method {
                MethodName::MonteCarlo => EstimatorMethod::MonteCarlo,
                MethodName::Convolution => EstimatorMethod::Convolution,
            },
            samples: e.samples,
            seed,
            bins: e.bins,
            max_bits: e.max_bits.unwrap_or_else(|| self.search().hi),
            max_rel_ci: e.max_rel_ci,
        }
    }

    /// Estimator of a scheme; decode-and-forward uses its own sample budget.
    pub fn scheme_estimator(&self, scheme: Scheme, seed: u64) -> EstimatorConfig {
        match scheme {
            Scheme::HarqIr => self.estimator(seed),
            Scheme::DfCsi => EstimatorConfig::monte_carlo(self.estimator.df_samples, seed),
        }
    }

    /// Values of the sweep axis, or `default` when the section gives none.
    pub fn sweep_values(&self, axis: &str, default: Vec<f64>) -> Result<Vec<f64>> {
        let s = &self.sweep;
        let values = match (&s.values, s.start, s.stop, s.step) {
            (Some(v), None, None, None) => v.clone(),
            (None, Some(start), Some(stop), Some(step)) => {
                if !(step > 0.0) || stop < start {
                    bail!("sweep over {axis}: need step > 0 and stop >= start");
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                (0..=n).map(|k| start + step * k as f64).collect()
            }
            (None, None, None, None) => default,
            _ => bail!("sweep over {axis}: give either `values` or all of `start`, `stop`, `step`"),
        };
        if values.is_empty() {
            bail!("sweep over {axis} is empty");
        }
        Ok(values)
    }
}
