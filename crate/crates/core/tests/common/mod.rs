//! Property checks shared by the proptest suites and the acceptance harness.
#![allow(dead_code)]

use harq_effcap::channel::{ChannelModel, EstimatorConfig, HopSpec, Links, OutageModel, Protocol};
use harq_effcap::effcap::{polynomial_coefficients, root_bracket, root_u, ChainExponent, DelayExponent};
use harq_effcap::harq::HarqChain;
use harq_effcap::sim::{simulate_diamond, simulate_one_hop, SimConfig, SimSystem};
use harq_effcap::diamond::{DiamondSystem, Scheme};
use harq_effcap::tradeoff::{delay_violation, lambert_w_m1, ConstraintCurve, DelayConstraint, PhiValue};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type CheckResult = Result<(), TestCaseError>;

pub fn probability() -> impl Strategy<Value = f64> {
    prop_oneof![1 => Just(0.0), 1 => Just(1.0), 8 => 0.0..1.0f64]
}

/// Random chain with `M` in 1..=8.
pub fn chain() -> impl Strategy<Value = HarqChain> {
    (1usize..=8, 1.0..2000.0f64, 10u32..400)
        .prop_flat_map(|(m, bits, tb)| (prop::collection::vec(probability(), m), Just(bits), Just(tb)))
        .prop_map(|(p, bits, tb)| HarqChain::from_transition_probs(p, bits, tb).unwrap())
}

pub fn theta() -> impl Strategy<Value = f64> {
    prop_oneof![1 => -0.005..0.0f64, 4 => 0.0..0.05f64]
}

pub fn protocol() -> impl Strategy<Value = Protocol> {
    prop_oneof![Just(Protocol::T1), Just(Protocol::CC), Just(Protocol::IR)]
}

/// Descartes: one sign change, and the bracket holds the computed root.
pub fn check_root_unique_and_bracketed(chain: &HarqChain, theta: f64) -> CheckResult {
    let c = polynomial_coefficients(chain, theta);
    let signs: Vec<bool> = c.iter().filter(|x| **x != 0.0).map(|x| *x > 0.0).collect();
    let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    prop_assert_eq!(changes, 1, "coefficients {:?}", c);
    let u = root_u(chain, theta).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let (lo, hi) = root_bracket(chain, theta);
    prop_assert!(lo * (1.0 - 1e-12) <= u && u <= hi * (1.0 + 1e-12), "u {} outside [{}, {}]", u, lo, hi);
    let m = c.len() - 1;
    let terms: Vec<f64> = c.iter().enumerate().map(|(k, ck)| ck * u.powi((m - k) as i32)).collect();
    let residual = terms.iter().sum::<f64>().abs();
    let scale = terms.iter().map(|t| t.abs()).sum::<f64>();
    prop_assert!(residual <= 1e-10 * scale, "residual {} scale {}", residual, scale);
    Ok(())
}

/// `J` increasing (strictly until it saturates at `J_max`) and `J(θ)/θ`
/// nonincreasing on a positive grid.
pub fn check_exponent_shape(chain: &HarqChain) -> CheckResult {
    if chain.pout() >= 1.0 {
        return Ok(());
    }
    let f = ChainExponent::new(chain.clone());
    let grid: Vec<f64> = (0..40).map(|k| 1e-5 * 1.3f64.powi(k)).collect();
    let js: Vec<f64> = grid.iter().map(|&t| f.exponent(t)).collect();
    let j_max = f.max_exponent();
    for k in 1..grid.len() {
        // strict only where the gap to J_max is resolvable in double precision
        let resolvable = j_max - js[k - 1] > 1e-9 * j_max.min(1e300);
        prop_assert!(
            js[k] > js[k - 1] || (!resolvable && js[k] >= js[k - 1]),
            "J not increasing at {}: {} then {}",
            grid[k],
            js[k - 1],
            js[k]
        );
        let (r0, r1) = (js[k - 1] / grid[k - 1], js[k] / grid[k]);
        prop_assert!(r1 <= r0 * (1.0 + 1e-9), "J/theta increasing at {}: {} then {}", grid[k], r0, r1);
    }
    Ok(())
}

pub fn constraint() -> impl Strategy<Value = DelayConstraint> {
    (1e-3..0.9f64, 1.0..500.0f64).prop_map(|(eps, d)| DelayConstraint::new(eps, d).unwrap())
}

/// `Phi` strictly decreasing and convex on 100 points of `[1.01 J0 + δ, 5 J_th]`.
pub fn check_phi_shape(c: &DelayConstraint) -> CheckResult {
    let curve = ConstraintCurve::new(*c);
    let lo = 1.01 * c.j0() + 1e-9;
    let hi = 5.0 * c.j_th();
    let xs: Vec<f64> = (0..100).map(|k| lo + (hi - lo) * k as f64 / 99.0).collect();
    let mut pts = Vec::new();
    for &x in &xs {
        match curve.phi(x).map_err(|e| TestCaseError::fail(e.to_string()))? {
            PhiValue::Finite(v) => pts.push((x, v)),
            PhiValue::AboveCeiling => prop_assert!(pts.is_empty(), "ceiling reached after finite values"),
        }
    }
    for w in pts.windows(2) {
        prop_assert!(w[1].1 < w[0].1, "Phi not decreasing: {:?}", w);
    }
    for w in pts.windows(3) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        let (x2, y2) = w[2];
        let chord = y0 + (y2 - y0) * (x1 - x0) / (x2 - x0);
        prop_assert!(y1 <= chord + 1e-9 * y0.abs().max(1e-12), "Phi not convex: {:?}", w);
    }
    Ok(())
}

/// Exact symmetry, continuity across `j1 = j2`, and decrease in each argument.
pub fn check_violation_shape(j1: f64, j2: f64, d: f64) -> CheckResult {
    prop_assert_eq!(delay_violation(j1, j2, d), delay_violation(j2, j1, d));
    for s in [-1.0, 1.0] {
        let near = delay_violation(j1, j1 * (1.0 + s * 1e-6), d);
        let x = j1 * d * (1.0 + 0.5 * s * 1e-6);
        let symmetric = (1.0 + x) * (-x).exp();
        prop_assert!((near - symmetric).abs() <= 1e-8, "{} vs {}", near, symmetric);
    }
    let base = delay_violation(j1, j2, d);
    prop_assert!(delay_violation(j1 * 1.01, j2, d) <= base);
    prop_assert!(delay_violation(j1, j2 * 1.01, d) <= base);
    prop_assert!((0.0..=1.0).contains(&base));
    Ok(())
}

/// `w e^w = x` for `w = W_{-1}(x)`.
pub fn check_lambert_round_trip(x: f64) -> CheckResult {
    let w = lambert_w_m1(x).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(w <= -1.0, "w = {} on the wrong branch", w);
    let back = w * w.exp();
    prop_assert!((back - x).abs() <= 1e-12 * x.abs(), "x {} back {}", x, back);
    Ok(())
}

/// Points of the log grid on `(-1/e, -1e-12)` used by the round-trip suite.
pub fn lambert_grid(points: usize) -> Vec<f64> {
    let top = -(-1.0f64).exp();
    (0..points)
        .map(|k| {
            let t = (k as f64 + 0.5) / points as f64;
            top * (1e-12 / -top).powf(t)
        })
        .collect()
}

pub fn hop_spec() -> impl Strategy<Value = HopSpec> {
    (protocol(), 0.1..10.0f64, 0.2..5.0f64, 10u32..200, any::<bool>()).prop_map(|(protocol, mean, snr, tb, pair)| {
        let a = ChannelModel::rayleigh(mean, snr).unwrap();
        let b = ChannelModel::rayleigh(mean * 0.7, snr * 1.3).unwrap();
        let links = if pair { Links::CommonMessage([a, b]) } else { Links::Single(a) };
        HopSpec::new(protocol, links, tb).unwrap()
    })
}

/// Same seed gives bit-identical series, whatever the worker count, and the
/// series is nonincreasing in `m` and nondecreasing in `L`.
pub fn check_estimator(hop: &HopSpec, bits: f64, rounds: usize, seed: u64) -> CheckResult {
    let config = EstimatorConfig::monte_carlo(40_000, seed);
    let fail = |e: harq_effcap::Error| TestCaseError::fail(e.to_string());
    let a = OutageModel::prepare(hop, rounds, &config).map_err(fail)?.series(bits, rounds).map_err(fail)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool
        .install(|| OutageModel::prepare(hop, rounds, &config).and_then(|m| m.series(bits, rounds)))
        .map_err(fail)?;
    prop_assert_eq!(&a, &b);
    for w in a.values.windows(2) {
        prop_assert!(w[1] <= w[0], "series increases: {:?}", a.values);
    }
    let model = OutageModel::prepare(hop, rounds, &config).map_err(fail)?;
    let bigger = model.series(bits * 1.1, rounds).map_err(fail)?;
    for (x, y) in a.values.iter().zip(&bigger.values) {
        prop_assert!(x <= y, "outage decreases in L: {:?} vs {:?}", a.values, bigger.values);
    }
    Ok(())
}

/// Bits in equal bits delivered plus dropped plus queued, and FIFO order.
pub fn check_conservation(hop: &HopSpec, bits: f64, rounds: usize, arrival: f64, seed: u64, diamond: bool) -> CheckResult {
    let system = if diamond {
        let m = ChannelModel::rayleigh(1.0, 2.0).unwrap();
        let sys = DiamondSystem::new([m, m], [m, m], hop.tb, rounds, Scheme::HarqIr).unwrap();
        SimSystem::Diamond { system: sys, bits }
    } else {
        SimSystem::OneHop { hop: *hop, bits, rounds }
    };
    let mut config = SimConfig::new(system, arrival, 4_000, seed);
    config.d_max_blocks = Some(50.0);
    let report = if diamond { simulate_diamond(&config) } else { simulate_one_hop(&config) }
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(report.ledger.balanced(), "{:?}", report.ledger);
    prop_assert_eq!(report.out_of_order, 0);
    prop_assert!((0.0..=1.0).contains(&report.empirical_outage));
    if let Some(v) = report.delay_violation {
        prop_assert!((0.0..=1.0).contains(&v));
    }
    for tail in &report.queue_tails {
        if let Some(s) = tail.slope {
            prop_assert!(s <= 0.0);
        }
    }
    Ok(())
}

/// Seeded runner so the acceptance harness draws the same cases every run.
pub fn runner(cases: u32, seed: u8) -> proptest::test_runner::TestRunner {
    let config = proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    };
    proptest::test_runner::TestRunner::new_with_rng(
        config,
        proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &[seed; 32]),
    )
}

/// `Pr{D1 + D2 > D}` for independent exponential delays, by composite Simpson.
pub fn violation_by_quadrature(j1: f64, j2: f64, d: f64) -> f64 {
    let n = 20_000;
    let h = d / n as f64;
    let f = |x: f64| j1 * (-j1 * x).exp() * (-j2 * (d - x)).exp();
    let mut s = f(0.0) + f(d);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    (-j1 * d).exp() + s * h / 3.0
}

pub fn check_violation_quadrature(j1: f64, j2: f64, d: f64) -> CheckResult {
    let got = delay_violation(j1, j2, d);
    let want = violation_by_quadrature(j1, j2, d);
    prop_assert!((got - want).abs() <= 1e-6, "j1 {} j2 {} d {}: {} vs {}", j1, j2, d, got, want);
    Ok(())
}
