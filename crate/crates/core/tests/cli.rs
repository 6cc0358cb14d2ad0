use std::path::Path;
use std::process::Command;

fn teechain(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_teechain")).args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name).display().to_string()
}

#[test]
fn every_bundled_scenario_passes() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let (code, out) = teechain(&["run", path.to_str().unwrap()]);
        assert_eq!(code, 0, "{}: {out}", path.display());
        assert!(out.contains("verdict: pass"));
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn run_writes_traces_and_cost_report() {
    let dir = std::env::temp_dir().join(format!("teechain-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let trace = dir.join("t.jsonl");
    let ledger = dir.join("l.jsonl");
    let cost = dir.join("c.csv");
    let (code, _) = teechain(&[
        "run",
        &scenario("committee.json"),
        "--trace",
        trace.to_str().unwrap(),
        "--ledger-trace",
        ledger.to_str().unwrap(),
        "--cost-report",
        cost.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(&cost).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("1,unilateral,3,7,3,7,"), "{csv}");
    for line in std::fs::read_to_string(&trace).unwrap().lines().chain(std::fs::read_to_string(&ledger).unwrap().lines()) {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn cost_command() {
    let (code, out) = teechain(&["cost", "--scheme", "teechain", "--params", "n1=3,n2=3,m1=2,m2=2"]);
    assert_eq!(code, 0);
    assert!(out.contains("unilateral: 3 txs, cost 9"), "{out}");
    let (code, out) = teechain(&["cost", "--scheme", "teechain", "--params", "n=3"]);
    assert_eq!(code, 0);
    assert!(out.contains("bilateral: 1 txs, cost 5/2"), "{out}");
    let (code, _) = teechain(&["cost", "--scheme", "dmc", "--params", "d=0"]);
    assert_eq!(code, 2);
}

#[test]
fn proptest_command() {
    let (code, out) = teechain(&["proptest", "--suite", "balance", "--cases", "5"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("balance: 5/5 passed"));
}

#[test]
fn seed_override_is_deterministic() {
    let dir = std::env::temp_dir().join(format!("teechain-seed-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut traces = Vec::new();
    for k in 0..2 {
        let t = dir.join(format!("{k}.jsonl"));
        let (code, _) = teechain(&["run", &scenario("lossy_network.json"), "--seed", "77", "--trace", t.to_str().unwrap()]);
        assert_eq!(code, 0);
        traces.push(std::fs::read(&t).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    let _ = std::fs::remove_dir_all(&dir);
}
