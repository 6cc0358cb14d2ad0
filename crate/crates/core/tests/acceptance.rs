//! Acceptance criteria. Each criterion prints one PASS or FAIL line; the
//! process exits nonzero if any fails.

#[path = "support/toy_ln.rs"]
mod toy_ln;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teechain::harness::suites::{
    balance_suite, counter_throughput, multihop_matrix, random_balance_scenario, rollback_attack, threshold_attack,
};
use teechain::harness::{cost_formulas, run, AdversaryConfig, CostError, Params, Scenario, Scheme, SimConfig, Simulation};
use teechain::ideal::User;
use teechain::program::{Body, ChannelId};
use toy_ln::{Party, ToyLn};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {took:.1?}, limit {limit:?}"));
    }
    Ok(took)
}

// 1. Balance correctness over random scenarios.
fn balance() -> Outcome {
    let start = Instant::now();
    let r = balance_suite(0, 1_000);
    let took = within(Duration::from_secs(120), start)?;
    if !r.ok() {
        return Err(format!("{}/{} passed; first failures {:?}", r.passed, r.cases, &r.failures[..r.failures.len().min(3)]));
    }
    Ok(format!("{}/{} scenarios, {took:.1?}", r.passed, r.cases))
}

// 2. Multi-hop atomicity over every reachable cell.
fn multihop() -> Outcome {
    let start = Instant::now();
    let r = multihop_matrix(0, 20);
    let took = within(Duration::from_secs(300), start)?;
    if !r.ok() {
        return Err(format!("{}/{} passed; first failures {:?}", r.passed, r.cases, &r.failures[..r.failures.len().min(3)]));
    }
    Ok(format!("{} trials over {} cells, {} unreachable cells skipped, {took:.1?}", r.cases, r.cases / 20, r.skipped))
}

// 3. Exact cost table against hand-derived values and measured runs.
fn cost_table() -> Outcome {
    let start = Instant::now();
    let q = |n: i64, d: i64| Rational64::new(n, d);
    let p = |f: &[(&str, i64)]| {
        let mut p = Params::default();
        for (k, v) in f {
            match *k {
                "d" => p.d = *v,
                "i" => p.i = *v,
                "p" => p.p = *v,
                "n" => p.n = *v,
                "n1" => p.n1 = *v,
                "n2" => p.n2 = *v,
                "m1" => p.m1 = *v,
                "m2" => p.m2 = *v,
                _ => unreachable!(),
            }
        }
        p
    };
    // (scheme, params, bilateral txs, bilateral cost, unilateral txs, unilateral cost)
    let table = [
        (Scheme::Ln, p(&[]), q(4, 1), q(6, 1), q(4, 1), q(6, 1)),
        (Scheme::Dmc, p(&[("d", 1)]), q(2, 1), q(4, 1), q(4, 1), q(8, 1)),
        (Scheme::Dmc, p(&[("d", 3)]), q(2, 1), q(4, 1), q(6, 1), q(12, 1)),
        (Scheme::Sfmc, p(&[("d", 1), ("i", 1), ("p", 3), ("n", 1)]), q(2, 1), q(6, 1), q(6, 1), q(14, 1)),
        (Scheme::Sfmc, p(&[("d", 2), ("i", 2), ("p", 4), ("n", 6)]), q(1, 3), q(4, 3), q(11, 2), q(12, 1)),
        (Scheme::Teechain, p(&[("n", 1)]), q(1, 1), q(3, 2), q(3, 1), q(5, 1)),
        (Scheme::Teechain, p(&[("n", 3)]), q(1, 1), q(5, 2), q(3, 1), q(5, 1)),
        (Scheme::Teechain, p(&[("n1", 3), ("m1", 2), ("n2", 2), ("m2", 1)]), q(1, 1), q(3, 2), q(3, 1), q(15, 2)),
        (Scheme::Teechain, p(&[("n1", 5), ("m1", 3), ("n2", 4), ("m2", 4)]), q(1, 1), q(3, 2), q(3, 1), q(27, 2)),
    ];
    for (scheme, params, bt, bc, ut, uc) in table {
        let row = cost_formulas(scheme, &params).map_err(|e| format!("{scheme:?} {params:?}: {e}"))?;
        let got = (row.bilateral.txs, row.bilateral.cost, row.unilateral.txs, row.unilateral.cost);
        if got != (bt, bc, ut, uc) {
            return Err(format!("{scheme:?} {params:?}: got {got:?}, want {:?}", (bt, bc, ut, uc)));
        }
    }
    let rejects = [
        (Scheme::Dmc, p(&[("d", 0)]), "d"),
        (Scheme::Sfmc, p(&[("i", 0)]), "i"),
        (Scheme::Sfmc, p(&[("p", 2)]), "p"),
        (Scheme::Sfmc, p(&[("n", 0)]), "n"),
        (Scheme::Teechain, p(&[("n", 0)]), "n"),
        (Scheme::Teechain, p(&[("n1", 2), ("m1", 3)]), "m1"),
        (Scheme::Teechain, p(&[("m2", 0)]), "m2"),
    ];
    for (scheme, params, name) in rejects {
        match cost_formulas(scheme, &params) {
            Err(CostError::ParamOutOfRange { name: n, .. }) if n == name => {}
            other => return Err(format!("{scheme:?} {params:?}: expected {name} out of range, got {other:?}")),
        }
    }
    let formula_time = within(Duration::from_secs(1), start)?;
    // Measured footprints of a bilateral and a unilateral close.
    let mut measured = 0;
    for (name, text) in [
        ("neutral_close", include_str!("../scenarios/neutral_close.json")),
        ("committee", include_str!("../scenarios/committee.json")),
        ("two_party", include_str!("../scenarios/two_party.json")),
    ] {
        let out = run(&Scenario::from_json(text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for c in &out.cost.channels {
            let f = c.formula.ok_or(format!("{name}: channel {} has no formula shape", c.channel))?;
            if (Rational64::from_integer(c.txs as i64), c.cost) != (f.txs, f.cost) {
                return Err(format!("{name}: measured {} txs cost {}, formula {} txs cost {}", c.txs, c.cost, f.txs, f.cost));
            }
            measured += 1;
        }
    }
    Ok(format!("9 rows and 7 range errors in {formula_time:.1?}, {measured} measured closes match"))
}

// 4. Asynchronous access: withholding the honest side's settlement for a
//    million simulated seconds changes nothing, unlike a timeout channel.
fn teechain_payout(withhold_us: Option<u64>) -> Result<u64, String> {
    let users = [("alice".to_string(), 1_000, false), ("bob".to_string(), 1_000, true)];
    let mut sim = Simulation::new(SimConfig { seed: 4, ..SimConfig::default() }, AdversaryConfig::default(), &users);
    let c = sim.open_channel(0, 1).map_err(|e| e.to_string())?;
    sim.deliver_all();
    sim.fund_channel(0, 1, c, 100, None).map_err(|e| e.to_string())?;
    sim.pay(0, c, 60).map_err(|e| e.to_string())?;
    sim.deliver_all();
    if let Some(us) = withhold_us {
        sim.adversary.withhold = vec![1];
        sim.adversary.eventual_release = false;
        // Bob settles but his transaction never reaches a block; alice
        // tries everything her host can, all while bob stays away.
        sim.settle(1, c, true).map_err(|e| e.to_string())?;
        let _ = sim.settle(0, c, true);
        sim.confirm_all();
        sim.advance(us);
        let _ = sim.settle(0, c, true);
        sim.reclaim(0);
        sim.confirm_all();
        sim.release_withheld();
    } else {
        sim.settle(1, c, true).map_err(|e| e.to_string())?;
    }
    sim.confirm_all();
    let v = sim.finish(true);
    if !v.pass {
        return Err(format!("oracle check failed: {v:?}"));
    }
    Ok(sim.wallet_balance(1))
}

fn async_access() -> Outcome {
    let start = Instant::now();
    const MILLION_S: u64 = 1_000_000;
    let prompt = teechain_payout(None)?;
    let late = teechain_payout(Some(MILLION_S * 1_000_000))?;
    if prompt != late || late != 1_060 {
        return Err(format!("teechain payout {late} after withholding, {prompt} when prompt"));
    }
    // The timeout channel: a one-day delay, the victim's justice transaction
    // withheld for the same million seconds.
    let mut ln = ToyLn::open((100, 0), 86_400);
    ln.pay_a_to_b(60);
    ln.publish(Party::A, 0, 0).map_err(|e| format!("{e:?}"))?;
    ln.sweep(MILLION_S).map_err(|e| format!("{e:?}"))?;
    let stolen = ln.justice(Party::B).is_err() && ln.payout == Some((100, 0));
    if !stolen {
        return Err(format!("timeout channel was not robbed: {:?}", ln.payout));
    }
    let took = within(Duration::from_secs(10), start)?;
    Ok(format!("teechain payout {late} unchanged; timeout channel paid victim 0 of 60; {took:.1?}"))
}

// 5. Force-freeze rollback attacks.
fn rollback() -> Outcome {
    let start = Instant::now();
    let mut thefts = 0;
    for t in 0..200u64 {
        let a = rollback_attack(t).map_err(|e| format!("trial {t}: {e}"))?;
        if a.theft {
            thefts += 1;
        }
    }
    let took = within(Duration::from_secs(60), start)?;
    if thefts > 0 {
        return Err(format!("{thefts}/200 attacks succeeded"));
    }
    Ok(format!("200/200 attacks failed, {took:.1?}"))
}

// 6. Committee thresholds.
fn thresholds() -> Outcome {
    let mut cells = Vec::new();
    for (m, n) in [(1u32, 1usize), (1, 2), (2, 3), (3, 4)] {
        let mut below = 0;
        let mut at = 0;
        for t in 0..100u64 {
            let s = t * 31 + m as u64 * 7 + n as u64;
            below += threshold_attack(m, n, m as usize - 1, s).map_err(|e| format!("({m},{n}): {e}"))?.theft as u32;
            at += threshold_attack(m, n, m as usize, s).map_err(|e| format!("({m},{n}): {e}"))?.theft as u32;
        }
        if below != 0 || at != 100 {
            return Err(format!("({m},{n}): {below}/100 thefts with m-1 compromised, {at}/100 with m"));
        }
        cells.push(format!("({m},{n}) thefts {below}/100 at m-1, {at}/100 at m"));
    }
    Ok(cells.join(", "))
}

// 7. Capacity never drifts: independently recomputed after every step of
//    random runs, and never counted by any enclave.
fn capacity_ok(sim: &Simulation) -> Result<(), String> {
    for (i, node) in sim.nodes.iter().enumerate() {
        for c in node.enclave().core.channels.values() {
            let mine: u64 = c.my_deps.values().map(|d| d.amount).sum();
            let theirs: u64 = c.remote_deps.values().map(|d| d.amount).sum();
            let leaving: u64 = c.dissociating.iter().map(|d| c.my_deps[d].amount).sum();
            if c.my_bal + c.remote_bal + leaving != mine + theirs {
                return Err(format!("node {i} channel {:?}: {} + {} + {leaving} != {}", c.id, c.my_bal, c.remote_bal, mine + theirs));
            }
        }
    }
    Ok(())
}

fn capacity() -> Outcome {
    let mut steps = 0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users: Vec<(String, u64, bool)> = (0..3).map(|i| (format!("u{i}"), 5_000, true)).collect();
        let adversary = AdversaryConfig { replay: 0.1, max_delay_us: 20_000, ..AdversaryConfig::default() };
        let mut sim = Simulation::new(SimConfig { seed, ..SimConfig::default() }, adversary, &users);
        let mut channels: Vec<(ChannelId, User, User)> = Vec::new();
        for (a, b) in [(0, 1), (1, 2), (0, 2)] {
            let c = sim.open_channel(a, b).map_err(|e| e.to_string())?;
            sim.deliver_all();
            channels.push((c, a, b));
        }
        for _ in 0..150 {
            let (c, a, b) = channels[rng.gen_range(0..channels.len())];
            let (u, peer) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            match rng.gen_range(0..10) {
                0 => {
                    let _ = sim.fund_channel(u, peer, c, rng.gen_range(1..=200), None);
                }
                1 => {
                    let deps: Vec<_> = sim.channel(u, c).map(|ch| ch.my_deps.keys().copied().collect()).unwrap_or_default();
                    if let Some(d) = deps.first() {
                        let _ = sim.dissociate(u, c, *d);
                    }
                }
                2..=6 => {
                    let _ = sim.pay(u, c, rng.gen_range(1..=80));
                }
                _ => {
                    for _ in 0..rng.gen_range(0..=sim.in_flight()) {
                        sim.deliver_random();
                    }
                }
            }
            capacity_ok(&sim)?;
            steps += 1;
        }
        sim.deliver_all();
        capacity_ok(&sim)?;
        for &(c, a, b) in &channels {
            let (Some(x), Some(y)) = (sim.channel(a, c), sim.channel(b, c)) else { continue };
            if x.my_bal != y.remote_bal || x.remote_bal != y.my_bal {
                return Err(format!("seed {seed}: endpoints of {c:?} disagree at quiescence"));
            }
        }
        if sim.invariant_violations() != 0 {
            return Err(format!("seed {seed}: {} violations counted in enclaves", sim.invariant_violations()));
        }
    }
    Ok(format!("0 violations over {steps} steps in 40 runs"))
}

// 8. Replayed and tampered messages never move balances.
fn balances(sim: &Simulation) -> BTreeMap<(usize, u64), (u64, u64)> {
    let mut out = BTreeMap::new();
    for (i, node) in sim.nodes.iter().enumerate() {
        for c in node.enclave().core.channels.values() {
            out.insert((i, c.id.0), (c.my_bal, c.remote_bal));
        }
    }
    out
}

fn replay_fuzz() -> Outcome {
    let users = [("alice".to_string(), 1_000, true), ("bob".to_string(), 1_000, true)];
    let mut sim = Simulation::new(SimConfig { seed: 8, ..SimConfig::default() }, AdversaryConfig::default(), &users);
    let c = sim.open_channel(0, 1).map_err(|e| e.to_string())?;
    sim.deliver_all();
    sim.fund_channel(0, 1, c, 200, None).map_err(|e| e.to_string())?;
    sim.fund_channel(1, 0, c, 100, None).map_err(|e| e.to_string())?;
    for k in 0..10 {
        sim.pay(k % 2, c, 7 + k as u64).map_err(|e| e.to_string())?;
        sim.deliver_all();
    }
    let before = balances(&sim);
    let recorded = sim.wire.clone();
    let identities: Vec<_> = (0..sim.nodes.len()).map(|n| sim.identity(n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for i in 0..1_000 {
        let mut env = recorded[rng.gen_range(0..recorded.len())].clone();
        match rng.gen_range(0..5) {
            0 => {}
            1 => {
                if let Body::Sealed { seq, .. } = &mut env.body {
                    *seq = seq.wrapping_add(rng.gen_range(1..=3));
                }
            }
            2 => {
                if let Body::Sealed { ciphertext, .. } = &mut env.body {
                    if !ciphertext.is_empty() {
                        let k = rng.gen_range(0..ciphertext.len());
                        ciphertext[k] ^= 1 << rng.gen_range(0..8);
                    }
                }
            }
            3 => {
                if let Body::Sealed { context, .. } = &mut env.body {
                    *context ^= 1;
                }
            }
            _ => env.to = identities[rng.gen_range(0..identities.len())],
        }
        sim.inject(env);
        sim.deliver_all();
        if balances(&sim) != before {
            return Err(format!("replay {i} moved balances"));
        }
    }
    if sim.invariant_violations() != 0 {
        return Err("capacity violated during replays".into());
    }
    Ok("1000/1000 replays left balances unchanged".into())
}

// 9. Monotonic counter throttling.
fn throughput() -> Outcome {
    let each = counter_throughput(true).map_err(|e| e.to_string())?;
    let batched = counter_throughput(false).map_err(|e| e.to_string())?;
    if each > 10 {
        return Err(format!("{each} payments/s with per-payment persistence"));
    }
    if batched <= 10 * each.max(1) {
        return Err(format!("batching gave {batched} payments/s against {each}"));
    }
    Ok(format!("{each} payments/s persisting each, {batched} batched"))
}

// 10. Deterministic replay of whole runs.
fn traces() -> Outcome {
    let mut runs = 0;
    let mut scenarios: Vec<Scenario> = (0..25).map(random_balance_scenario).collect();
    for text in [
        include_str!("../scenarios/two_party.json"),
        include_str!("../scenarios/multihop.json"),
        include_str!("../scenarios/committee.json"),
        include_str!("../scenarios/lossy_network.json"),
    ] {
        scenarios.push(Scenario::from_json(text).map_err(|e| e.to_string())?);
    }
    for s in &scenarios {
        let a = run(s).map_err(|e| e.to_string())?;
        let b = run(s).map_err(|e| e.to_string())?;
        if a.events != b.events || a.ledger != b.ledger || a.cost.to_csv() != b.cost.to_csv() {
            return Err(format!("seed {} traces differ", s.seed));
        }
        runs += 1;
    }
    let x = rollback_attack(5).map_err(|e| e.to_string())?;
    let y = rollback_attack(5).map_err(|e| e.to_string())?;
    if x != y {
        return Err("attack outcomes differ between identical seeds".into());
    }
    Ok(format!("{runs} scenarios byte-identical across two runs"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 balance correctness", balance),
        ("2 multi-hop atomicity", multihop),
        ("3 cost table", cost_table),
        ("4 asynchronous access", async_access),
        ("5 rollback resistance", rollback),
        ("6 committee thresholds", thresholds),
        ("7 channel capacity", capacity),
        ("8 replay resistance", replay_fuzz),
        ("9 counter throttling", throughput),
        ("10 deterministic traces", traces),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
