use std::path::Path;
use std::process::Command;

use harq_effcap_cli::{run, ExperimentConfig, Scenario, CSV_HEADER};

const BASE: &str = r#"
[system]
snr_s_db = 0.0
snr_r_db = 5.0
rounds = 4

[estimator]
samples = 100000
df_samples = 20000
"#;

fn config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{BASE}{extra}")).unwrap()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let idx = reader.headers().unwrap().iter().position(|h| h == name).unwrap();
    reader.records().map(|r| r.unwrap()[idx].to_string()).collect()
}

fn floats(path: &Path, name: &str) -> Vec<f64> {
    column(path, name).iter().map(|s| s.parse().unwrap()).collect()
}

#[test]
fn header_matches_golden_file() {
    let golden = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/header.csv")).unwrap();
    assert_eq!(golden.trim_end(), CSV_HEADER);
    let dir = tempfile::tempdir().unwrap();
    let c = config("[sweep]\nvalues = [300.0, 1500.0]\n");
    let files = run(Scenario::EcVsL, &c, None, dir.path()).unwrap();
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(text.lines().next().unwrap(), golden.trim_end());
    assert_eq!(rows(&files[0]).len(), 2);
}

#[test]
fn identical_runs_are_byte_identical() {
    let c = config("[sweep]\nvalues = [200.0, 900.0, 3400.0]\n");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = run(Scenario::EcVsL, &c, Some(7), a.path()).unwrap();
    let fb = run(Scenario::EcVsL, &c, Some(7), b.path()).unwrap();
    assert_eq!(std::fs::read(&fa[0]).unwrap(), std::fs::read(&fb[0]).unwrap());
    let fc = run(Scenario::EcVsL, &c, Some(8), b.path()).unwrap();
    assert_ne!(std::fs::read(&fa[0]).unwrap(), std::fs::read(&fc[0]).unwrap());
}

#[test]
fn missing_relay_snr_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[system]\nsnr_s_db = 0.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_harq-effcap"))
        .args(["ec_vs_L", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("snr_r"));
}

#[test]
fn bad_configs_are_rejected() {
    assert!(ExperimentConfig::parse(&format!("{BASE}\n[search]\nbogus = 1\n")).is_err());
    let err = ExperimentConfig::parse("[system]\nsnr_s_db = 0.0\nt_s = 1e-3\nb_hz = 100.0\n").unwrap_err();
    assert!(format!("{err:#}").contains("b_hz"));
    let c = config("[sweep]\nvalues = []\n");
    assert!(run(Scenario::EcVsL, &c, None, tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn ec_vs_l_peaks_then_vanishes() {
    let dir = tempfile::tempdir().unwrap();
    let files = run(Scenario::EcVsL, &config(""), None, dir.path()).unwrap();
    let rates = floats(&files[0], "rate_bps_hz");
    let cases = column(&files[0], "case");
    let best = rates.iter().enumerate().fold(0, |b, (i, r)| if *r > rates[b] { i } else { b });
    assert!(best > 0 && best + 1 < rates.len());
    assert_eq!(*rates.last().unwrap(), 0.0);
    assert_eq!(cases.last().unwrap(), "CaseI");
}

#[test]
fn ec_vs_m_is_nondecreasing() {
    let dir = tempfile::tempdir().unwrap();
    let files = run(Scenario::EcVsM, &config(""), None, dir.path()).unwrap();
    let rates = floats(&files[0], "rate_bps_hz");
    let eps = floats(&files[0], "epsilon");
    assert_eq!(rates.len(), 12);
    for k in 1..rates.len() {
        if eps[k] == eps[k - 1] {
            assert!(rates[k] >= rates[k - 1] - 1e-6, "{rates:?}");
        }
    }
}

#[test]
fn onehop_writes_chain_records() {
    let dir = tempfile::tempdir().unwrap();
    let files = run(Scenario::OnehopEc, &config("[sweep]\nvalues = [0.001, 0.01]\n"), None, dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let chains: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&files[1]).unwrap()).unwrap();
    assert_eq!(chains.len(), 2);
    let record = serde_json::to_string(&chains[0]).unwrap();
    harq_effcap::harq::HarqChain::from_json(&record).unwrap();
    let rates = floats(&files[0], "rate_bps_hz");
    assert!(rates[0] > rates[1]);
}

#[test]
fn simulate_writes_replications_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("[simulate]\nframes = 30000\nwarmup = 1000\nreplications = 2\ntrace_frames = 10\n");
    let files = run(Scenario::Simulate, &c, None, dir.path()).unwrap();
    assert_eq!(rows(&files[0]).len(), 2);
    assert_eq!(rows(&files[1]).len(), 10);
    assert_eq!(column(&files[0], "unstable"), vec!["false", "false"]);
}

#[test]
fn both_schemes_over_relay_snr() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig::parse(&format!(
        "{}\n[sweep]\nvalues = [0.0, 10.0]\n",
        BASE.replace("rounds = 4", "rounds = 4\nschemes = [\"harq_ir\", \"df_csi\"]")
    ))
    .unwrap();
    let files = run(Scenario::EcVsSnrR, &c, None, dir.path()).unwrap();
    assert_eq!(column(&files[0], "scheme"), vec!["HARQ_IR", "HARQ_IR", "DF_CSI", "DF_CSI"]);
    assert_eq!(column(&files[0], "L")[2], "");
}
