//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use dora::embedding::PolicyKind;
use dora::harness::{
    csv_string, load_scenario, random_scenario, run_experiment, sweep_records, CrashSpec,
    ExperimentResult, MetricsRecord, RandomSpec, RunOptions, SweepSpec,
};
use dora::model::{check_feasibility, Amount};
use dora::oracle::max_weight_winner_set;
use dora::protocol::{elect, z_n, ElectionMode, NodeBallot, ScoreProfile};
use dora::simnet::{ChannelModel, SimMode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PE3: ElectionMode = ElectionMode::PartialEnumeration { depth: 3 };
const SYNC_RUNS: u64 = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn value(votes: &[f64], set: &[usize]) -> f64 {
    set.iter().map(|&i| votes[i]).sum()
}

fn criterion_1() -> Outcome {
    let bound = 1.0 - (-1.0f64).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let mut failures = 0;
    let mut worst = f64::INFINITY;
    let sets = 400;
    for _ in 0..sets {
        let n_o = rng.gen_range(1..=8);
        let n_r = rng.gen_range(1..=2);
        let capacity: Vec<Amount> = (0..n_r).map(|_| rng.gen_range(4..=20)).collect();
        let demands: Vec<Vec<Amount>> = (0..n_o)
            .map(|_| capacity.iter().map(|&c| rng.gen_range(0..=c + 2)).collect())
            .collect();
        let votes: Vec<f64> = (0..n_o)
            .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.1..10.0) })
            .collect();
        let ballot = NodeBallot {
            votes: &votes,
            demands: &demands,
            capacity: &capacity,
        };
        let got = value(&votes, &elect(&ballot, PE3));
        let best = max_weight_winner_set(&votes, &demands, &capacity).value;
        if best > 0.0 {
            worst = worst.min(got / best);
        }
        if got < bound * best - 1e-9 {
            failures += 1;
        }
    }

    // greedy-gap instance: the dense small item blocks the large one
    let gap_votes = [1.1, 10.0];
    let gap_demands = [vec![1], vec![10]];
    let gap_cap = [10];
    let gap = NodeBallot {
        votes: &gap_votes,
        demands: &gap_demands,
        capacity: &gap_cap,
    };
    let gap_best = max_weight_winner_set(&gap_votes, &gap_demands, &gap_cap);
    let gap_greedy = value(&gap_votes, &elect(&gap, ElectionMode::Greedy));
    let gap_pe = elect(&gap, PE3);
    let gap_ok = gap_greedy < gap_best.value - 1e-9 && gap_pe == gap_best.winners;

    // votes (10,9,9) on demands (1.0,0.5,0.5) of the capacity
    let lit_votes = [10.0, 9.0, 9.0];
    let lit_demands = [vec![10], vec![5], vec![5]];
    let lit_cap = [10];
    let lit = NodeBallot {
        votes: &lit_votes,
        demands: &lit_demands,
        capacity: &lit_cap,
    };
    let lit_best = max_weight_winner_set(&lit_votes, &lit_demands, &lit_cap);
    let lit_greedy = elect(&lit, ElectionMode::Greedy);
    let lit_pe = elect(&lit, PE3);
    let lit_ok = lit_pe == lit_best.winners && lit_best.winners == vec![1, 2];

    println!(
        "  info: (10,9,9)/(1.0,0.5,0.5) greedy={:?} value {} (densities 10,18,18), pe3={:?}, oracle={:?} value {}",
        lit_greedy,
        value(&lit_votes, &lit_greedy),
        lit_pe,
        lit_best.winners,
        lit_best.value
    );
    outcome(
        failures == 0 && gap_ok && lit_ok,
        format!(
            "{sets} sets, {failures} below (1-1/e), worst ratio {worst:.4}; gap instance greedy {gap_greedy} < oracle {} and pe3 {:?}",
            gap_best.value, gap_pe
        ),
    )
}

fn sync_runs(election: Option<ElectionMode>) -> Vec<ExperimentResult> {
    (0..SYNC_RUNS)
        .map(|seed| {
            let scn = random_scenario(seed, &RandomSpec::default());
            run_experiment(
                &scn,
                &RunOptions {
                    seed,
                    election,
                    ..Default::default()
                },
            )
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"))
        })
        .collect()
}

fn criterion_2(runs: &[ExperimentResult]) -> Outcome {
    let bad: Vec<u64> = runs
        .iter()
        .filter(|r| !r.trace.converged || r.record.iterations > r.iteration_bound())
        .map(|r| r.record.seed)
        .collect();
    let worst = runs
        .iter()
        .map(|r| r.record.iterations as f64 / r.iteration_bound() as f64)
        .fold(0.0, f64::max);
    outcome(
        bad.is_empty(),
        format!("{} runs, violations {:?}, worst iterations/bound {worst:.3}", runs.len(), bad),
    )
}

fn criterion_3(runs: &[ExperimentResult]) -> Outcome {
    let bad: Vec<u64> = runs
        .iter()
        .filter(|r| r.record.messages_mst > r.message_bound())
        .map(|r| r.record.seed)
        .collect();
    let worst = runs
        .iter()
        .map(|r| r.record.messages_mst as f64 / r.message_bound() as f64)
        .fold(0.0, f64::max);
    outcome(
        bad.is_empty(),
        format!("{} runs, violations {:?}, worst messages/bound {worst:.3}", runs.len(), bad),
    )
}

fn criterion_4(runs: &[ExperimentResult]) -> Outcome {
    let bad: Vec<String> = runs
        .iter()
        .filter_map(|r| r.consensus.as_ref().err().map(|e| format!("seed {}: {e}", r.record.seed)))
        .collect();
    outcome(bad.is_empty(), format!("{} runs, violations {:?}", runs.len(), bad))
}

fn criterion_5(runs: &[ExperimentResult]) -> Outcome {
    let bad: Vec<u64> = runs
        .iter()
        .filter(|r| {
            !check_feasibility(&r.instance, &r.allocation)
                .map(|rep| rep.is_feasible())
                .unwrap_or(false)
        })
        .map(|r| r.record.seed)
        .collect();
    let mean_alloc =
        runs.iter().map(|r| r.record.allocation_ratio).sum::<f64>() / runs.len() as f64;
    outcome(
        bad.is_empty(),
        format!("{} runs, infeasible {:?}, mean allocation ratio {mean_alloc:.3}", runs.len(), bad),
    )
}

fn random_profiles(rng: &mut ChaCha8Rng, count: usize) -> Vec<ScoreProfile> {
    (0..count)
        .map(|id| ScoreProfile {
            id,
            utility: rng.gen_range(0.0..10.0),
            demand_norm: if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.05..1.5) },
            voted_before: rng.gen_bool(0.7),
            lost_cap: rng.gen_bool(0.3).then(|| rng.gen_range(0.5..30.0)),
        })
        .collect()
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    ids
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EB);
    let triples = 2000;
    let mut sub_fail = 0;
    for _ in 0..triples {
        let n = rng.gen_range(2..=8);
        let profiles = random_profiles(&mut rng, n);
        let order = shuffled(&mut rng, n);
        let iota = order[0];
        let big: Vec<usize> = order[1..].iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
        let small: Vec<usize> = big.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        let with = |set: &[usize]| {
            let mut s = set.to_vec();
            s.push(iota);
            s
        };
        let gain_small = z_n(&profiles, &with(&small)) - z_n(&profiles, &small);
        let gain_big = z_n(&profiles, &with(&big)) - z_n(&profiles, &big);
        if gain_small + 1e-9 < gain_big {
            sub_fail += 1;
        }
    }
    let chains = 2000;
    let mut mono_fail = 0;
    let mut empty_fail = 0;
    for _ in 0..chains {
        let n = rng.gen_range(1..=8);
        let profiles = random_profiles(&mut rng, n);
        if z_n(&profiles, &[]) != 0.0 {
            empty_fail += 1;
        }
        let order = shuffled(&mut rng, n);
        let mut prev = 0.0;
        for k in 1..=n {
            let z = z_n(&profiles, &order[..k]);
            if z + 1e-9 < prev {
                mono_fail += 1;
                break;
            }
            prev = z;
        }
    }
    outcome(
        sub_fail == 0 && mono_fail == 0 && empty_fail == 0,
        format!(
            "{triples} triples, {sub_fail} submodularity failures; {chains} chains, {mono_fail} non-monotone, {empty_fail} nonzero empty sets"
        ),
    )
}

fn criterion_7(runs: &[ExperimentResult]) -> Outcome {
    let checks: u64 = runs.iter().map(|r| r.cap_audit.checks).sum();
    let violations: u64 = runs.iter().map(|r| r.cap_audit.violations).sum();
    let excess = runs.iter().map(|r| r.cap_audit.max_excess).fold(0.0, f64::max);
    outcome(
        violations == 0 && checks > 0,
        format!("{checks} capped re-votes audited, {violations} above cap, max excess {excess:e}"),
    )
}

fn criterion_8() -> Outcome {
    let spec = RandomSpec {
        orchestrators: 2..=5,
        nodes: 1..=3,
        functions: 2..=5,
        services: 1..=3,
        bundle_size: 1..=2,
        ..Default::default()
    };
    let mut ratios = Vec::new();
    let mut bad = Vec::new();
    let mut skipped = 0;
    for seed in 0..120 {
        let scn = random_scenario(seed, &spec);
        let r = run_experiment(
            &scn,
            &RunOptions {
                seed,
                oracle: true,
                ..Default::default()
            },
        )
        .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let oracle = r.oracle.as_ref().expect("oracle requested");
        if !oracle.complete {
            bad.push(seed);
            continue;
        }
        match r.record.utility_ratio {
            Some(x) => {
                if !(x > 0.0 && x <= 1.0 + 1e-9) {
                    bad.push(seed);
                }
                ratios.push(x);
            }
            None => skipped += 1,
        }
    }
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    let mean = ratios.iter().sum::<f64>() / n.max(1) as f64;
    println!(
        "  info: utility ratio over {n} scenarios: min {:.3} p10 {:.3} median {:.3} mean {mean:.3} max {:.3}",
        ratios[0],
        ratios[n / 10],
        ratios[n / 2],
        ratios[n - 1]
    );
    outcome(
        bad.is_empty() && n >= 50,
        format!("{n} scenarios with positive optimum ({skipped} with optimum 0 skipped), out of range {bad:?}, observed minimum {:.3}", ratios[0]),
    )
}

fn criterion_9() -> Outcome {
    let channel = ChannelModel {
        base_delay: 1,
        jitter: 3,
        drop_probability: 0.2,
        retransmit_timeout: 4,
    };
    let runs = 100;
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    let mut dropped = 0;
    for seed in 0..runs {
        let mut scn = random_scenario(
            seed,
            &RandomSpec {
                orchestrators: 3..=8,
                ..Default::default()
            },
        );
        scn.mode = SimMode::Async;
        scn.channel = channel;
        let pre = run_experiment(&scn, &RunOptions { seed, ..Default::default() })
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let topo = scn.topology_for(seed).expect("topology");
        let victim = (0..scn.orchestrators.len())
            .rev()
            .find(|&v| topo.connected_without(v))
            .expect("a connected graph has a non-cut vertex");
        scn.crashes = vec![CrashSpec {
            orchestrator: scn.orchestrators[victim].id.clone(),
            time: (pre.trace.end_time / 2).max(1),
        }];
        let r = match run_experiment(&scn, &RunOptions { seed, ..Default::default() }) {
            Ok(r) => r,
            Err(e) => {
                bad.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        dropped += r.trace.transmissions.saturating_sub(r.trace.messages_delivered);
        let limit = 10 * r.iteration_bound();
        worst = worst.max(r.record.iterations as f64 / limit as f64);
        let feasible = check_feasibility(&r.instance, &r.allocation)
            .map(|rep| rep.is_feasible())
            .unwrap_or(false);
        if r.survivors[victim] {
            bad.push(format!("seed {seed}: crash not applied"));
        } else if !r.trace.converged || r.consensus.is_err() || !feasible || r.record.iterations > limit {
            bad.push(format!("seed {seed}: {:?}", r.consensus));
        }
    }
    outcome(
        bad.is_empty(),
        format!("{runs} async runs with one crash, {dropped} undelivered transmissions, failures {bad:?}, worst activations/(10*bound) {worst:.3}"),
    )
}

fn criterion_10() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/paper-8b.json");
    let template = load_scenario(path).unwrap_or_else(|e| panic!("{e}"));
    let spec = SweepSpec {
        orchestrators: 2..=12,
        policies: vec![PolicyKind::SingleNodePreferred, PolicyKind::SpreadPreferred],
        seeds: 20,
        options: RunOptions::default(),
    };
    let rows = sweep_records(&template, &spec).unwrap_or_else(|e| panic!("{e}"));
    let mean = |n: usize, policy: &str| {
        let cell: Vec<&MetricsRecord> = rows
            .iter()
            .filter(|r| r.n_orchestrators == n && r.policy == policy)
            .collect();
        cell.iter().map(|r| r.iterations as f64).sum::<f64>() / cell.len() as f64
    };
    let line: Vec<String> = (2..=12)
        .map(|n| format!("{n}:{:.2}/{:.2}", mean(n, "single-node-preferred"), mean(n, "spread-preferred")))
        .collect();
    println!("  info: mean iterations single/spread by N_o: {}", line.join(" "));
    let single = mean(12, "single-node-preferred");
    let spread = mean(12, "spread-preferred");
    let all_converged = rows.iter().all(|r| r.converged);
    outcome(
        single <= spread && all_converged,
        format!("{} runs; at N_o=12 single-node-preferred {single:.2} vs spread-preferred {spread:.2}", rows.len()),
    )
}

fn criterion_11(first: &[ExperimentResult]) -> Outcome {
    let records = |runs: &[ExperimentResult]| -> Vec<MetricsRecord> {
        runs.iter().map(|r| r.record.clone()).collect()
    };
    let a = csv_string(&records(first));
    let b = csv_string(&records(&sync_runs(None)));
    outcome(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

fn report(id: usize, name: &str, started: Instant, o: Outcome) -> bool {
    println!(
        "criterion {id:>2} {}: {name}: {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
    o.pass
}

fn main() -> ExitCode {
    let mut ok = true;

    let t = Instant::now();
    ok &= report(1, "per-node approximation", t, criterion_1());

    let t = Instant::now();
    let runs = sync_runs(None);
    ok &= report(2, "iteration bound", t, criterion_2(&runs));
    let t = Instant::now();
    ok &= report(3, "message bound", t, criterion_3(&runs));
    ok &= report(4, "election consensus", t, criterion_4(&runs));
    ok &= report(5, "feasibility", t, criterion_5(&runs));

    let t = Instant::now();
    ok &= report(6, "submodularity", t, criterion_6());
    ok &= report(7, "scoring cap", t, criterion_7(&runs));

    let t = Instant::now();
    ok &= report(8, "quality vs exact oracle", t, criterion_8());
    let t = Instant::now();
    ok &= report(9, "failure tolerance", t, criterion_9());
    let t = Instant::now();
    ok &= report(10, "policy convergence trend", t, criterion_10());
    let t = Instant::now();
    ok &= report(11, "determinism", t, criterion_11(&runs));

    let t = Instant::now();
    let pe = sync_runs(Some(ElectionMode::PartialEnumeration { depth: 3 }));
    let over = pe.iter().filter(|r| r.record.iterations > r.iteration_bound()).count();
    let split = pe.iter().filter(|r| r.consensus.is_err()).count();
    println!(
        "  info: same {} scenarios with pe3 elections: {over} over the iteration bound, {split} consensus violations ({:.1}s)",
        pe.len(),
        t.elapsed().as_secs_f64()
    );

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
