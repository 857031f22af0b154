//! End-to-end acceptance checks. Runs as a plain binary so that every
//! criterion prints exactly one PASS/FAIL line, then exits non-zero if any
//! failed.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spdl_core::analysis::{check_resilience_preconditions, compute_k, compute_regret_coefficient, monte_carlo_resilience, AnalysisParams};
use spdl_core::crypto::{keygen, vrf_eval, Hash256, KeyRegistry};
use spdl_core::election::{admit_candidates, elect_leader, election_seed, VrfSubmission};
use spdl_core::experiment::{self, generate_synthetic, partition_dataset, ExperimentConfig, PartitionMode, WALL_CLOCK_COLUMNS};
use spdl_core::gar::{krum_select, GarKind};
use spdl_core::learning::{Dataset, GradientVector, LossSpec};
use spdl_core::ledger::{make_genesis, verify_chain, Block, Chain, Transaction};
use spdl_core::netsim::regret::paired_regret;
use spdl_core::netsim::{run_experiment, AdversaryScript, Scheme, SimConfig, SimData, Strategy, World};
use spdl_core::par::Exec;
use spdl_core::privacy::{calibrate_sigma, perturb, CalibrationMode, DpConfig, GaussianSampler};
use spdl_core::rng::stream_rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// Per-round DP budget for the simulated schemes below.
const SIM_EPSILON: f64 = 1.0;
const SIM_DELTA: f64 = 1e-6;

fn blobs(nodes: usize, seed: u64) -> SimData {
    let (train, test) = generate_synthetic(2000, 20, 2, 4.0, seed).unwrap();
    SimData {
        partitions: partition_dataset(&train, nodes, PartitionMode::Iid, seed).unwrap(),
        test,
    }
}

fn dp(gamma: f64, rounds: u64) -> DpConfig {
    DpConfig::calibrated(SIM_EPSILON, SIM_DELTA, 1.0, gamma, rounds, CalibrationMode::PerRound).unwrap()
}

fn final_error(cfg: &SimConfig, data: &SimData) -> f64 {
    let report = run_experiment(cfg, data).unwrap();
    report.metrics.last().and_then(|m| m.test_error).unwrap()
}

// Exhaustive scorer: for each candidate, the minimum over every subset of
// n-f-2 peers of the summed squared distances.
fn brute_force_krum(grads: &[Vec<f64>], f: usize) -> (usize, f64) {
    let n = grads.len();
    let m = n - f - 2;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..n {
        let peers: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut score = f64::INFINITY;
        for mask in 0u32..(1 << peers.len()) {
            if mask.count_ones() as usize != m {
                continue;
            }
            let s: f64 = peers
                .iter()
                .enumerate()
                .filter(|(b, _)| mask >> b & 1 == 1)
                .map(|(_, &j)| dist(&grads[i], &grads[j]))
                .sum();
            score = score.min(s);
        }
        if score < best.1 {
            best = (i, score);
        }
    }
    best
}

fn krum_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for inst in 0..1000 {
        let f = rng.gen_range(0..=3);
        let n = rng.gen_range(f + 3..=12);
        let d = rng.gen_range(1..=8);
        // Every other instance uses small integers so ties actually occur.
        let grads: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| match inst % 2 {
                        0 => rng.gen_range(-3..=3) as f64,
                        _ => rng.gen_range(-10.0..10.0),
                    })
                    .collect()
            })
            .collect();
        let vectors: Vec<GradientVector> = grads.iter().map(|g| GradientVector::new(g.clone()).unwrap()).collect();
        let (idx, chosen) = krum_select(&vectors, f).unwrap();
        let (want, _) = brute_force_krum(&grads, f);
        if idx != want || chosen.as_slice() != grads[want].as_slice() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 1000 instances"))
}

fn dp_calibration() -> Outcome {
    let sigma = calibrate_sigma(1.0, 1, 0.1, 0.02, 1e-6).unwrap();
    let sigma_ok = (sigma - 26.4937).abs() <= 1e-3;

    let mut rng = stream_rng(2, "noise", 0);
    let samples = 100_000;
    let noisy = perturb(&GradientVector::zeros(samples), sigma, &mut rng).unwrap();
    let xs = noisy.as_slice();
    let mean = xs.iter().sum::<f64>() / samples as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (samples - 1) as f64;
    let rel = (var / (sigma * sigma) - 1.0).abs();
    outcome(
        sigma_ok && rel <= 0.05,
        format!("sigma = {sigma:.6}, empirical variance off by {:.2}%", rel * 100.0),
    )
}

// 1000 rounds per network size, as ten fresh 100-round runs: reputations
// only decrease, so a single long run spends most of its tail abandoned.
fn consensus_safety() -> Outcome {
    const RUNS: u64 = 10;
    const ROUNDS: u64 = 100;
    let mut details = Vec::new();
    let mut pass = true;
    for (nodes, byz_ratio) in [(4usize, 0.25), (10, 0.3)] {
        let f = (nodes - 1) / 3;
        let (mut divergent, mut committed, mut wrong_f) = (0, 0, 0);
        let mut errors = Vec::new();
        for run in 0..RUNS {
            let seed = 100 * nodes as u64 + run;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (train, test) = generate_synthetic(50 * nodes, 4, 2, 4.0, seed).unwrap();
            let cfg = SimConfig {
                nodes,
                byz_ratio,
                rounds: ROUNDS,
                batch_size: 8,
                gar: GarKind::Krum,
                loss: LossSpec::softmax(2),
                dp: None,
                script: AdversaryScript::random_consensus(ROUNDS, &mut rng),
                seed,
                ..SimConfig::default()
            };
            let data = SimData {
                partitions: partition_dataset(&train, nodes, PartitionMode::Iid, seed).unwrap(),
                test,
            };
            let mut world = World::new(cfg, data).unwrap();
            wrong_f += usize::from((0..nodes).filter(|&i| world.is_byzantine(i)).count() != f);
            while !world.finished() {
                if let Err(e) = world.run_round() {
                    errors.push(format!("seed {seed}: {e}"));
                    break;
                }
                let honest = world.honest_indices();
                let first = honest[0];
                divergent += honest[1..]
                    .iter()
                    .filter(|&&i| {
                        world.model(i) != world.model(first)
                            || world.chain(i).map(Chain::blocks) != world.chain(first).map(Chain::blocks)
                    })
                    .count();
            }
            committed += world.metrics().iter().filter(|m| m.committed).count();
        }
        pass &= wrong_f == 0 && divergent == 0 && errors.is_empty();
        details.push(match errors.first() {
            Some(e) => format!("N={nodes}: {e}"),
            None => format!(
                "N={nodes} f={f}: {divergent} divergences, {committed}/{} committed",
                RUNS * ROUNDS
            ),
        });
    }
    outcome(pass, details.join("; "))
}

fn separation() -> Outcome {
    let mut passed = 0;
    let mut runs = Vec::new();
    for seed in 0..5 {
        let data = blobs(10, seed);
        let mut cfg = SimConfig {
            nodes: 10,
            byz_ratio: 0.3,
            rounds: 50,
            gamma: 0.1,
            gar: GarKind::Krum,
            scheme: Scheme::Spdl,
            dp: Some(dp(0.1, 50)),
            loss: LossSpec::softmax(2),
            script: AdversaryScript::constant(Strategy::SignFlip { scale: 4.0 }),
            seed,
            ..SimConfig::default()
        };
        let spdl = final_error(&cfg, &data);
        cfg.scheme = Scheme::Dp;
        let dp_err = final_error(&cfg, &data);
        passed += usize::from(spdl < 0.15 && dp_err > 0.35);
        runs.push(format!("{spdl:.3}/{dp_err:.3}"));
    }
    outcome(passed >= 4, format!("{passed}/5 seeds (spdl/dp error: {})", runs.join(" ")))
}

fn parity() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for nodes in [4usize, 10] {
        let data = blobs(nodes, 0);
        let mut cfg = SimConfig {
            nodes,
            byz_ratio: 0.0,
            rounds: 50,
            gamma: 0.1,
            gar: GarKind::Krum,
            scheme: Scheme::Spdl,
            dp: Some(dp(0.1, 50)),
            loss: LossSpec::softmax(2),
            seed: 0,
            ..SimConfig::default()
        };
        let spdl = final_error(&cfg, &data);
        cfg.scheme = Scheme::Pure;
        let pure = final_error(&cfg, &data);
        let gap = (spdl - pure).abs();
        pass &= gap <= 0.05;
        details.push(format!("N={nodes}: |{spdl:.3} - {pure:.3}| = {gap:.3}"));
    }
    outcome(pass, details.join("; "))
}

fn resilience_monte_carlo() -> Outcome {
    let p = AnalysisParams {
        f: 1,
        d: 4,
        g_norm: 10.0,
        sigma_f_sq: 0.01,
        sigma_sq: 0.0,
        clip: 1.0,
        epsilon: std::f64::consts::SQRT_2,
        delta: 1.25 * (-1.0f64).exp(),
        l1: 0.5,
        rounds: 1,
    };
    let p = AnalysisParams {
        sigma_sq: p.dp_variance(),
        ..p
    };
    if !check_resilience_preconditions(&p) {
        return outcome(false, "parameter point fails the preconditions");
    }
    let k = compute_k(&p).unwrap();
    let mut pass = true;
    let mut details = vec![format!("k = {k:.4}")];
    for adversary in [Strategy::SignFlip { scale: 4.0 }, Strategy::RandomGaussian { scale: 1.0 }] {
        let est = monte_carlo_resilience(&p, &adversary, 100_000, 6, Exec::default()).unwrap();
        pass &= est.mean >= k - 3.0 * est.std_err;
        details.push(format!("{adversary}: {:.4} ± {:.4}", est.mean, est.std_err));
    }
    outcome(pass, details.join("; "))
}

fn regression(records: usize, seed: u64, stream: u64) -> Dataset {
    let mut rng = stream_rng(seed, "synthetic", stream);
    let mut noise = GaussianSampler::new();
    let w: Vec<f64> = (0..5).map(|j| if j % 2 == 0 { 0.3 } else { -0.3 }).collect();
    let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = (0..records)
        .map(|_| {
            let x: Vec<f64> = (0..w.len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.05 * noise.sample(&mut rng);
            (x, y)
        })
        .unzip();
    Dataset::regression(xs, ys).unwrap()
}

fn regret_trend() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for rounds in [25u64, 100, 400] {
        let gamma = 1.0 / (rounds as f64).sqrt();
        let mut passed = 0;
        for seed in 0..5 {
            let train = regression(1000, seed, 0);
            let data = SimData {
                partitions: partition_dataset(&train, 10, PartitionMode::Iid, seed).unwrap(),
                test: regression(50, seed, 1),
            };
            let cfg = SimConfig {
                nodes: 10,
                byz_ratio: 0.3,
                rounds,
                gamma,
                gar: GarKind::Krum,
                scheme: Scheme::Spdl,
                dp: Some(dp(gamma, rounds)),
                loss: LossSpec::least_squares(),
                script: AdversaryScript::constant(Strategy::SignFlip { scale: 4.0 }),
                seed,
                ..SimConfig::default()
            };
            let run = paired_regret(&cfg, &data).unwrap();
            let p = AnalysisParams {
                f: cfg.byzantine_count(),
                d: 5,
                g_norm: 1.0,
                sigma_f_sq: run.sigma_f_sq,
                sigma_sq: run.sigma_sq,
                clip: 1.0,
                epsilon: SIM_EPSILON,
                delta: SIM_DELTA,
                l1: run.l1,
                rounds,
            };
            let ok = compute_regret_coefficient(&p)
                .map(|rho| *run.regret.last().unwrap() <= 1.2 * rho * (rounds as f64).sqrt())
                .unwrap_or(false);
            passed += usize::from(ok);
        }
        pass &= passed >= 4;
        details.push(format!("T={rounds}: {passed}/5"));
    }
    outcome(pass, details.join("; "))
}

fn ledger_fuzz() -> Outcome {
    let txs: Vec<Transaction> = (0..4)
        .map(|i| {
            let (pair, _) = keygen(format!("fuzz/{i}").as_bytes());
            Transaction::register(pair.pk, format!("sim://{i}"), 0)
        })
        .collect();
    let proposer = txs[0].id;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut chain = Chain::new(make_genesis(txs, 3).unwrap()).unwrap();
    for t in 0..49 {
        let delta = GradientVector::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let tip = chain.tip();
        chain
            .append(Block::new(tip.height + 1, t / 10, t, tip.hash, delta, proposer, vec![]))
            .unwrap();
    }
    let bytes = chain.to_bytes();
    let mut accepted = 0;
    for _ in 0..10_000 {
        let mut mutated = bytes.clone();
        let pos = rng.gen_range(0..mutated.len());
        mutated[pos] ^= rng.gen_range(1..=255u8);
        if Chain::decode_unverified(&mutated).is_ok_and(|c| verify_chain(&c)) {
            accepted += 1;
        }
    }
    outcome(
        chain.len() == 50 && verify_chain(&chain) && accepted == 0,
        format!("{accepted} of 10000 mutated chains verified"),
    )
}

fn election_fairness() -> Outcome {
    let n = 10;
    let elections = 10_000;
    let mut registry = KeyRegistry::new();
    let keys: Vec<_> = (0..n)
        .map(|i| {
            let (pair, id) = keygen(format!("spdl/node/9/{i}").as_bytes());
            registry.register(&pair).unwrap();
            (pair, id)
        })
        .collect();
    let prev = Hash256::digest(b"fairness");
    let banned = keys[3].1;
    let mut wins = vec![0usize; n];
    let mut banned_wins = 0;
    for e in 0..elections {
        let seed = election_seed(e, 0, &prev);
        let subs: Vec<VrfSubmission> = keys
            .iter()
            .map(|(pair, id)| VrfSubmission {
                pk: pair.pk,
                id: *id,
                output: vrf_eval(&pair.sk, &seed),
                arrival_tick: 0,
            })
            .collect();
        let open = admit_candidates(&subs, &registry, &seed, 0, |_| 1.0);
        let winner = elect_leader(&open.candidates).unwrap();
        wins[keys.iter().position(|(_, id)| *id == winner).unwrap()] += 1;
        let gated = admit_candidates(&subs, &registry, &seed, 0, |id| if *id == banned { 0.0 } else { 1.0 });
        banned_wins += usize::from(elect_leader(&gated.candidates).unwrap() == banned);
    }
    let p = 1.0 / n as f64;
    let sd = (p * (1.0 - p) / elections as f64).sqrt();
    let worst = wins
        .iter()
        .map(|&w| (w as f64 / elections as f64 - p).abs() / sd)
        .fold(0.0, f64::max);
    outcome(
        worst <= 3.0 && banned_wins == 0,
        format!("max deviation {worst:.2} sd, zero-reputation wins {banned_wins}"),
    )
}

fn strip_wall_clock(text: &str) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().unwrap().clone();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !WALL_CLOCK_COLUMNS.contains(&&header[i]))
        .collect();
    let mut rows = vec![keep.iter().map(|&i| header[i].to_string()).collect()];
    for rec in reader.records() {
        let rec = rec.unwrap();
        rows.push(keep.iter().map(|&i| rec[i].to_string()).collect());
    }
    rows
}

fn csv_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for run in 0..2 {
        let cfg = ExperimentConfig {
            rounds: 20,
            out: dir.path().join(format!("run{run}.csv")),
            ..ExperimentConfig::default()
        };
        experiment::run(&cfg).unwrap();
        texts.push(std::fs::read_to_string(&cfg.out).unwrap());
    }
    let (a, b) = (strip_wall_clock(&texts[0]), strip_wall_clock(&texts[1]));
    outcome(a == b && a.len() == 21, format!("{} rows compared", a.len() - 1))
}

fn latency_split() -> Outcome {
    let cfg = SimConfig {
        nodes: 10,
        byz_ratio: 0.3,
        rounds: 30,
        gar: GarKind::Krum,
        loss: LossSpec::softmax(2),
        dp: Some(dp(0.1, 30)),
        script: AdversaryScript::constant(Strategy::SignFlip { scale: 4.0 }),
        seed: 11,
        ..SimConfig::default()
    };
    let report = run_experiment(&cfg, &blobs(10, 11)).unwrap();
    let mut worst: f64 = 0.0;
    let mut positive = true;
    for m in &report.metrics {
        positive &= m.t_lgc_ms > 0.0 && m.t_ge_ms > 0.0 && m.t_bc_ms > 0.0;
        let sum = m.t_lgc_ms + m.t_ge_ms + m.t_bc_ms;
        worst = worst.max((sum - m.t_round_ms).abs() / m.t_round_ms);
    }
    outcome(
        positive && worst <= 0.1,
        format!("all stages positive: {positive}, worst sum gap {:.2}%", worst * 100.0),
    )
}

type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gar-oracle", Some(Duration::from_secs(10)), krum_oracle),
        ("dp-calibration", None, dp_calibration),
        ("consensus-safety", Some(Duration::from_secs(120)), consensus_safety),
        ("byzantine-separation", Some(Duration::from_secs(60)), separation),
        ("no-byzantine-parity", None, parity),
        ("resilience-monte-carlo", Some(Duration::from_secs(60)), resilience_monte_carlo),
        ("regret-trend", None, regret_trend),
        ("ledger-fuzz", None, ledger_fuzz),
        ("election-fairness", None, election_fairness),
        ("csv-determinism", None, csv_determinism),
        ("latency-split", None, latency_split),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut result = check();
        let took = start.elapsed();
        if let Some(limit) = limit {
            if took > *limit {
                result.pass = false;
                result.detail += &format!("; over the {}s limit", limit.as_secs());
            }
        }
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {:>2} {name}: {} [{:.1}s]", i + 1, result.detail, took.as_secs_f64());
        failed += usize::from(!result.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
