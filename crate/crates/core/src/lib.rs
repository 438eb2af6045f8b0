//! Outage effective capacity of truncated HARQ links and buffer-aided diamond
//! relay networks.

pub mod channel;
pub mod diamond;
pub mod effcap;
pub mod error;
pub mod harq;
pub mod sim;
pub mod tradeoff;

pub use channel::{ChannelModel, EstimatorConfig, Fading, HopSpec, Links, OutageModel, Protocol};
pub use diamond::{CaseLabel, DiamondModel, DiamondSystem, Scheme, TwoHopSolution};
pub use effcap::{ChainExponent, DelayExponent, LSearch};
pub use error::{Error, Result};
pub use harq::HarqChain;
pub use sim::{SimConfig, SimReport, SimSystem};
pub use tradeoff::DelayConstraint;
