//! Experiment runner behind the `harq-effcap` binary.

pub mod config;

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use harq_effcap::channel::OutageModel;
use harq_effcap::diamond::{DiamondModel, Scheme, TwoHopSolution};
use harq_effcap::effcap::{exponent_rate, optimize_chain_l, ChainExponent, DelayExponent};
use harq_effcap::harq::HarqChain;
use harq_effcap::sim::{replicate, SimConfig, SimReport, SimSystem};
use serde::Serialize;

pub use config::ExperimentConfig;

/// Column order of every analytic CSV.
pub const CSV_HEADER: &str = "scheme,L,case,theta1,theta2,j1,j2,rate_bps_hz,pout,epsilon,dmax_s,snr_s_db,snr_r_db,M,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    #[value(name = "onehop_ec")]
    OnehopEc,
    #[value(name = "ec_vs_L")]
    EcVsL,
    #[value(name = "ec_vs_snr_r")]
    EcVsSnrR,
    #[value(name = "ec_vs_epsilon")]
    EcVsEpsilon,
    #[value(name = "pout_vs_epsilon")]
    PoutVsEpsilon,
    #[value(name = "ec_vs_M")]
    EcVsM,
    #[value(name = "simulate")]
    Simulate,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::OnehopEc => "onehop_ec",
            Scenario::EcVsL => "ec_vs_L",
            Scenario::EcVsSnrR => "ec_vs_snr_r",
            Scenario::EcVsEpsilon => "ec_vs_epsilon",
            Scenario::PoutVsEpsilon => "pout_vs_epsilon",
            Scenario::EcVsM => "ec_vs_M",
            Scenario::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub scheme: String,
    #[serde(rename = "L")]
    pub bits: Option<f64>,
    pub case: String,
    pub theta1: Option<f64>,
    pub theta2: Option<f64>,
    pub j1: Option<f64>,
    pub j2: Option<f64>,
    pub rate_bps_hz: f64,
    pub pout: f64,
    pub epsilon: Option<f64>,
    pub dmax_s: Option<f64>,
    pub snr_s_db: f64,
    pub snr_r_db: Option<f64>,
    #[serde(rename = "M")]
    pub rounds: usize,
    pub seed: u64,
}

/// A simulation replication next to the analytic point it was run at.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub scheme: String,
    #[serde(rename = "L")]
    pub bits: f64,
    pub case: String,
    pub rate_bps_hz: f64,
    pub pout: f64,
    pub epsilon: f64,
    pub dmax_s: f64,
    pub snr_s_db: f64,
    pub snr_r_db: Option<f64>,
    #[serde(rename = "M")]
    pub rounds: usize,
    pub seed: u64,
    pub replication: usize,
    pub arrival_bits_per_block: f64,
    pub frames: u64,
    pub empirical_outage: f64,
    pub outage_se: f64,
    pub delay_violation: Option<f64>,
    pub delay_violation_ci: Option<f64>,
    pub mean_delay_blocks: f64,
    pub tail_decay_source: Option<f64>,
    pub tail_decay_relay: Option<f64>,
    pub unstable: bool,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
}

impl Runner<'_> {
    fn row(&self, scheme: Scheme, s: &TwoHopSolution, epsilon: f64, snr_r_db: f64, rounds: usize) -> Row {
        Row {
            scheme: scheme.to_string(),
            bits: s.bits,
            case: s.case.to_string(),
            theta1: Some(s.theta1),
            theta2: Some(s.theta2),
            j1: Some(s.j1),
            j2: Some(s.j2),
            rate_bps_hz: s.rate_bps_hz,
            pout: s.pout_end_to_end,
            epsilon: Some(epsilon),
            dmax_s: Some(self.config.constraint.d_max_s),
            snr_s_db: self.config.system.snr_s_db,
            snr_r_db: Some(snr_r_db),
            rounds,
            seed: self.seed,
        }
    }

    fn prepare(&self, scheme: Scheme, snr_r_db: f64, rounds: usize) -> Result<DiamondModel> {
        let system = self.config.diamond(scheme, snr_r_db, rounds)?;
        DiamondModel::prepare(&system, &self.config.scheme_estimator(scheme, self.seed))
            .with_context(|| format!("preparing the {scheme} estimators"))
    }

    fn optimum(&self, model: &DiamondModel, epsilon: f64, rounds: usize) -> Result<TwoHopSolution> {
        let c = self.config.constraint(epsilon)?;
        model
            .optimize_at(rounds, &c, &self.config.search())
            .with_context(|| format!("optimizing L at epsilon {epsilon}, M {rounds}"))
    }

    fn schemes(&self) -> impl Iterator<Item = Scheme> + '_ {
        self.config.system.schemes.iter().map(|&s| s.into())
    }

    fn ec_vs_l(&self) -> Result<Vec<Row>> {
        let (snr_r, _) = self.config.snr_r_db()?;
        let eps = self.config.constraint.epsilon;
        let rounds = self.config.system.rounds;
        let ls = self.config.sweep_values("L", self.config.search().grid())?;
        let c = self.config.constraint(eps)?;
        let model = self.prepare(Scheme::HarqIr, snr_r, rounds)?;
        ls.iter()
            .map(|&l| {
                let s = model.solve(l, &c).with_context(|| format!("solving at L = {l}"))?;
                Ok(self.row(Scheme::HarqIr, &s, eps, snr_r, rounds))
            })
            .collect()
    }

    fn ec_vs_snr_r(&self) -> Result<Vec<Row>> {
        self.config.snr_r_db()?;
        let eps = self.config.constraint.epsilon;
        let rounds = self.config.system.rounds;
        let values = self.config.sweep_values("snr_r_db", (0..=7).map(|k| 2.0 * k as f64).collect())?;
        let mut rows = Vec::new();
        for scheme in self.schemes() {
            for &snr_r in &values {
                let model = self.prepare(scheme, snr_r, rounds)?;
                rows.push(self.row(scheme, &self.optimum(&model, eps, rounds)?, eps, snr_r, rounds));
            }
        }
        Ok(rows)
    }

    fn ec_vs_epsilon(&self, harq_only: bool) -> Result<Vec<Row>> {
        let (snr_r, _) = self.config.snr_r_db()?;
        let rounds = self.config.system.rounds;
        let values = self.config.sweep_values("epsilon", vec![0.01, 0.05, 0.1, 0.2, 0.5])?;
        let mut rows = Vec::new();
        for scheme in self.schemes().filter(|s| !harq_only || *s == Scheme::HarqIr) {
            let model = self.prepare(scheme, snr_r, rounds)?;
            for &eps in &values {
                rows.push(self.row(scheme, &self.optimum(&model, eps, rounds)?, eps, snr_r, rounds));
            }
        }
        if rows.is_empty() {
            bail!("pout_vs_epsilon needs `harq_ir` in system.schemes");
        }
        Ok(rows)
    }

    fn ec_vs_m(&self) -> Result<Vec<Row>> {
        let (snr_r, _) = self.config.snr_r_db()?;
        let values = self.config.sweep_values("M", (1..=6).map(f64::from).collect())?;
        let mut rounds = Vec::with_capacity(values.len());
        for v in values {
            if !(v >= 1.0 && v.fract() == 0.0) {
                bail!("sweep over M: values must be positive integers, got {v}");
            }
            rounds.push(v as usize);
        }
        let epsilons = self.config.sweep.epsilons.clone().unwrap_or_else(|| vec![0.5, 0.05]);
        // one model at the largest M, so every M shares the draws
        let max_rounds = *rounds.iter().max().expect("nonempty sweep");
        let model = self.prepare(Scheme::HarqIr, snr_r, max_rounds)?;
        let mut rows = Vec::new();
        for &eps in &epsilons {
            for &m in &rounds {
                rows.push(self.row(Scheme::HarqIr, &self.optimum(&model, eps, m)?, eps, snr_r, m));
            }
        }
        Ok(rows)
    }

    fn onehop(&self) -> Result<(Vec<Row>, Vec<HarqChain>)> {
        let hop = self.config.one_hop()?;
        let rounds = self.config.system.rounds;
        let thetas = self.config.sweep_values("theta", vec![self.config.constraint.theta])?;
        let model = OutageModel::prepare(&hop, rounds, &self.config.estimator(self.seed))?;
        let mut rows = Vec::new();
        let mut chains = Vec::new();
        for &theta in &thetas {
            let best = optimize_chain_l(&model, rounds, theta, &self.config.search())
                .with_context(|| format!("optimizing L at theta {theta}"))?;
            let exponent = ChainExponent::new(best.detail.clone());
            rows.push(Row {
                scheme: format!("{:?}", hop.protocol),
                bits: Some(best.bits),
                case: "one_hop".into(),
                theta1: Some(theta),
                theta2: None,
                j1: Some(exponent.exponent(theta)),
                j2: None,
                rate_bps_hz: exponent_rate(&exponent, theta, hop.tb)?,
                pout: best.detail.pout(),
                epsilon: None,
                dmax_s: None,
                snr_s_db: self.config.system.snr_s_db,
                snr_r_db: None,
                rounds,
                seed: self.seed,
            });
            chains.push(best.detail);
        }
        Ok((rows, chains))
    }

    fn simulate(&self) -> Result<(Vec<SimRow>, Option<SimReport>)> {
        let cfg = self.config;
        let sim = &cfg.simulate;
        let eps = cfg.constraint.epsilon;
        let rounds = cfg.system.rounds;
        let tb = cfg.tb() as f64;
        let (scheme, system, snr_r, bits, rate, pout, case) = match sim.topology {
            config::Topology::Diamond => {
                let (snr_r, _) = cfg.snr_r_db()?;
                let model = self.prepare(Scheme::HarqIr, snr_r, rounds)?;
                let s = match sim.bits {
                    Some(l) => model.solve(l, &cfg.constraint(eps)?)?,
                    None => self.optimum(&model, eps, rounds)?,
                };
                let bits = s.bits.expect("HARQ solutions carry L");
                let system = SimSystem::Diamond {
                    system: cfg.diamond(Scheme::HarqIr, snr_r, rounds)?,
                    bits,
                };
                let case = s.case.to_string();
                (Scheme::HarqIr.to_string(), system, Some(snr_r), bits, s.rate_bps_hz, s.pout_end_to_end, case)
            }
            config::Topology::OneHop => {
                let hop = cfg.one_hop()?;
                let model = OutageModel::prepare(&hop, rounds, &cfg.estimator(self.seed))?;
                let theta = cfg.constraint.theta;
                let chain = match sim.bits {
                    Some(l) => harq_effcap::harq::chain_from_model(&model, l, rounds)?,
                    None => optimize_chain_l(&model, rounds, theta, &cfg.search())?.detail,
                };
                let rate = exponent_rate(&ChainExponent::new(chain.clone()), theta, hop.tb)?;
                let system = SimSystem::OneHop {
                    hop,
                    bits: chain.bits(),
                    rounds,
                };
                (format!("{:?}", hop.protocol), system, None, chain.bits(), rate, chain.pout(), "one_hop".into())
            }
        };
        let arrival = sim.arrival_bps_hz.unwrap_or(rate) * tb;
        let sim_config = SimConfig {
            arrival_rate: arrival,
            frames: sim.frames,
            warmup: sim.warmup,
            seed: self.seed,
            d_max_blocks: Some(cfg.d_max_blocks()),
            trace_frames: sim.trace_frames,
            system,
        };
        let reports = replicate(&sim_config, sim.replications).context("running the simulation")?;
        let rows = reports
            .iter()
            .enumerate()
            .map(|(k, r)| SimRow {
                scheme: scheme.clone(),
                bits,
                case: case.clone(),
                rate_bps_hz: rate,
                pout,
                epsilon: eps,
                dmax_s: cfg.constraint.d_max_s,
                snr_s_db: cfg.system.snr_s_db,
                snr_r_db: snr_r,
                rounds,
                seed: self.seed,
                replication: k,
                arrival_bits_per_block: arrival,
                frames: sim.frames,
                empirical_outage: r.empirical_outage,
                outage_se: r.outage_se,
                delay_violation: r.delay_violation,
                delay_violation_ci: r.delay_violation_ci,
                mean_delay_blocks: r.mean_delay_blocks,
                tail_decay_source: r.queue_tails[0].decay_rate(),
                tail_decay_relay: r.queue_tails.get(1).and_then(|t| t.decay_rate()),
                unstable: r.unstable,
            })
            .collect();
        let first = (sim.trace_frames > 0).then(|| reports[0].clone());
        Ok((rows, first))
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `scenario` and returns the files written into `out_dir`.
pub fn run(scenario: Scenario, config: &ExperimentConfig, seed: Option<u64>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ctx = Runner {
        config,
        seed: seed.unwrap_or(config.estimator.seed),
    };
    let csv_path = out_dir.join(format!("{}.csv", scenario.name()));
    let mut written = vec![csv_path.clone()];
    match scenario {
        Scenario::EcVsL => write_csv(&csv_path, &ctx.ec_vs_l()?)?,
        Scenario::EcVsSnrR => write_csv(&csv_path, &ctx.ec_vs_snr_r()?)?,
        Scenario::EcVsEpsilon => write_csv(&csv_path, &ctx.ec_vs_epsilon(false)?)?,
        Scenario::PoutVsEpsilon => write_csv(&csv_path, &ctx.ec_vs_epsilon(true)?)?,
        Scenario::EcVsM => write_csv(&csv_path, &ctx.ec_vs_m()?)?,
        Scenario::OnehopEc => {
            let (rows, chains) = ctx.onehop()?;
            write_csv(&csv_path, &rows)?;
            let json_path = out_dir.join("onehop_ec_chains.json");
            std::fs::write(&json_path, serde_json::to_string_pretty(&chains)?)?;
            written.push(json_path);
        }
        Scenario::Simulate => {
            let (rows, first) = ctx.simulate()?;
            write_csv(&csv_path, &rows)?;
            if let Some(report) = first {
                let trace_path = out_dir.join("simulate_trace.csv");
                write_csv(&trace_path, &report.trace)?;
                written.push(trace_path);
            }
        }
    }
    Ok(written)
}
