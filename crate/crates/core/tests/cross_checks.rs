mod common;

use common::*;
use harq_effcap::channel::{
    common_message_union_series, sample_gains, ChannelModel, EstimatorConfig, HopSpec, Links, OutageModel, Protocol,
};
use harq_effcap::diamond::{alamouti_rate, beamforming_rate};
use harq_effcap::harq::build_chain;
use harq_effcap::sim::{simulate_one_hop, SimConfig, SimSystem};
use proptest::test_runner::TestCaseError;

#[test]
fn product_and_union_forms_agree() {
    let mut runner = runner(20, 3);
    let strategy = (
        proptest::prelude::prop_oneof![
            proptest::strategy::Just(Protocol::CC),
            proptest::strategy::Just(Protocol::IR),
        ],
        0.3..5.0f64,
        0.3..5.0f64,
        20u32..200,
        0.2..3.0f64,
        1usize..5,
        0u64..1000,
    );
    runner
        .run(&strategy, |(protocol, s1, s2, tb, load, rounds, seed)| {
            let links = [ChannelModel::rayleigh(1.0, s1).unwrap(), ChannelModel::rayleigh(1.0, s2).unwrap()];
            let hop = HopSpec::new(protocol, Links::CommonMessage(links), tb).unwrap();
            let bits = load * tb as f64;
            let samples = 100_000;
            let config = EstimatorConfig::monte_carlo(samples, seed);
            let product = OutageModel::prepare(&hop, rounds, &config).unwrap().series(bits, rounds).unwrap();
            let union = common_message_union_series(links, protocol, tb, bits, rounds, samples, seed).unwrap();
            for m in 0..=rounds {
                let se = product.std_errors[m].hypot(union.std_errors[m]);
                let gap = (product.values[m] - union.values[m]).abs();
                if gap > 3.0 * se + 1e-12 {
                    return Err(TestCaseError::fail(format!("m {m}: {} vs {} (se {se})", product.values[m], union.values[m])));
                }
            }
            Ok(())
        })
        .unwrap();
}

#[test]
fn alamouti_never_beats_beamforming() {
    let a = ChannelModel::rayleigh(1.0, 3.0).unwrap();
    let b = ChannelModel::rayleigh(2.0, 0.5).unwrap();
    let za = sample_gains(&a, 100_000, 9);
    let zb = sample_gains(&b, 100_000, 10);
    for (x, y) in za.iter().zip(&zb) {
        let (s1, s2) = (a.snr() * x, b.snr() * y);
        assert!(alamouti_rate(s1, s2, 180.0) <= beamforming_rate(s1, s2, 180.0));
    }
}

#[test]
fn violation_matches_quadrature() {
    let mut runner = runner(100, 5);
    runner
        .run(&(1e-3..0.5f64, 1e-3..0.5f64, 1.0..100.0f64), |(j1, j2, d)| check_violation_quadrature(j1, j2, d))
        .unwrap();
}

#[test]
fn simulated_outage_matches_chain() {
    let model = ChannelModel::rayleigh(1.0, 1.0).unwrap();
    let hop = HopSpec::single(Protocol::IR, model, 100).unwrap();
    let (bits, rounds) = (250.0, 3);
    let chain = build_chain(&hop, bits, rounds, &EstimatorConfig::convolution(1 << 14, 300.0)).unwrap();
    let config = SimConfig::new(SimSystem::OneHop { hop, bits, rounds }, 0.8 * chain.goodput() * 100.0, 1_000_000, 21);
    let report = simulate_one_hop(&config).unwrap();
    assert!(!report.unstable);
    let gap = (report.empirical_outage - chain.pout()).abs();
    assert!(
        gap <= 3.0 * report.outage_se,
        "simulated {} vs chain {} (se {})",
        report.empirical_outage,
        chain.pout(),
        report.outage_se
    );
}
