use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use teechain::harness::suites::{self, SuiteReport};
use teechain::harness::{cost_formulas, run, Params, Scenario, Scheme};

#[derive(Parser)]
#[command(name = "teechain", about = "Simulated TEE-backed payment channel network")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Ln,
    Dmc,
    Sfmc,
    Teechain,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Balance,
    Multihop,
    Replication,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and check it against the ideal functionality.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace (JSON lines).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the ledger trace (JSON lines).
        #[arg(long)]
        ledger_trace: Option<PathBuf>,
        /// Write the per-channel cost report (CSV).
        #[arg(long)]
        cost_report: Option<PathBuf>,
    },
    /// Evaluate the closed-form transaction count and cost of a scheme.
    Cost {
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        /// Comma-separated `key=value` pairs over d, i, p, n, n1, n2, m1, m2.
        #[arg(long, default_value = "")]
        params: String,
    },
    /// Run a seeded property suite.
    Proptest {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 100)]
        cases: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_params(s: &str) -> Result<Params, String> {
    let mut p = Params::default();
    for kv in s.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv}"))?;
        let v: i64 = v.trim().parse().map_err(|e| format!("{k}: {e}"))?;
        let slot = match k.trim() {
            "d" => &mut p.d,
            "i" => &mut p.i,
            "p" => &mut p.p,
            "n" => &mut p.n,
            "n1" => &mut p.n1,
            "n2" => &mut p.n2,
            "m1" => &mut p.m1,
            "m2" => &mut p.m2,
            other => return Err(format!("unknown parameter {other}")),
        };
        *slot = v;
    }
    Ok(p)
}

fn write(path: &Option<PathBuf>, contents: &str) -> Result<(), String> {
    match path {
        Some(p) => std::fs::write(p, contents).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(()),
    }
}

fn report(name: &str, r: &SuiteReport) -> ExitCode {
    println!("{name}: {}/{} passed, {} skipped", r.passed, r.cases, r.skipped);
    for f in r.failures.iter().take(20) {
        println!("  FAIL {f}");
    }
    if r.ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn real_main(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Cmd::Run { scenario, seed, trace, ledger_trace, cost_report } => {
            let text = std::fs::read_to_string(&scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
            let mut s = Scenario::from_json(&text).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let out = run(&s).map_err(|e| e.to_string())?;
            write(&trace, &out.events)?;
            write(&ledger_trace, &out.ledger)?;
            write(&cost_report, &out.cost.to_csv())?;
            for u in &out.verdict.users {
                println!("{}: ledger {} oracle {} perceived {}", u.name, u.ledger, u.ideal, u.perceived);
            }
            match out.check() {
                Ok(()) => {
                    println!("verdict: pass");
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    println!("verdict: fail ({e})");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Cmd::Cost { scheme, params } => {
            let scheme = match scheme {
                SchemeArg::Ln => Scheme::Ln,
                SchemeArg::Dmc => Scheme::Dmc,
                SchemeArg::Sfmc => Scheme::Sfmc,
                SchemeArg::Teechain => Scheme::Teechain,
            };
            let row = cost_formulas(scheme, &parse_params(&params)?).map_err(|e| e.to_string())?;
            println!("bilateral: {} txs, cost {}", row.bilateral.txs, row.bilateral.cost);
            println!("unilateral: {} txs, cost {}", row.unilateral.txs, row.unilateral.cost);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Proptest { suite, cases, seed } => Ok(match suite {
            Suite::Balance => report("balance", &suites::balance_suite(seed, cases)),
            Suite::Multihop => report("multihop", &suites::multihop_matrix(seed, cases)),
            Suite::Replication => report("replication", &suites::replication_suite(seed, cases)),
        }),
    }
}
