//! Acceptance criteria. Runs without the test harness so that every
//! `criterion N: PASS|FAIL` line is printed; exits non-zero on any failure.

mod common;

use std::cell::Cell;
use std::time::Instant;

use common::*;
use dieroll::analysis::{
    check_no_signalling, check_security, exact_outcome_distribution, independence_test, monte_carlo, security_bound,
    Tolerance, CHI_SQUARED_SIGNIFICANCE, DEFAULT_ENUMERATION_LIMIT, EXACT_TOLERANCE,
};
use dieroll::engine::LabId;
use dieroll::partition::{build_partition, IdealDistribution, OutcomePartition, PartitionError};
use dieroll::protocol::{Outcome, ProtocolParams, Session};
use dieroll::randsource::{build_source_from_bits, mix_seed, BitSourceModel, EntropyStream, SourceModel};
use dieroll::scenario::{load_scenario, Overrides};
use dieroll::spacetime::{validate_layout, Ball, Layout, LayoutViolation};
use dieroll::strategies::{
    honest_strategy, minimizing_shift_attack, optimal_shift_attack, DelayedSteer, ForbiddenRead, InconsistentBroadcast,
    MitmRelay, RandomAdmissible, ShiftAttack, Silent, Strategy,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

fn report(criterion: u32, pass: bool, detail: impl std::fmt::Display) {
    println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

/// Session where parties in `honest` run `source` and all others `adversary`.
fn mixed(params: &ProtocolParams, honest: &[usize], sources: &[SourceModel], adversary: &Strategy) -> Session {
    let strategies = (0..params.parties())
        .map(|p| match honest.iter().position(|&h| h == p) {
            Some(i) => honest_strategy(sources[i].clone()),
            None => adversary.clone(),
        })
        .collect();
    Session::single(params.clone(), strategies).unwrap()
}

fn criterion_01_correctness() {
    let start = Instant::now();
    let mut r = rng(1);
    let mut failures = Vec::new();
    let mut runs = 0;
    for config in 0..20 {
        let m = r.gen_range(2..=4);
        let outcomes = r.gen_range(2..=6);
        let n = r.gen_range(outcomes..=outcomes + 6);
        let sizes = random_class_sizes(&mut r, outcomes, n);
        let sources: Vec<_> = (0..m).map(|_| random_source(&mut r, n, 0.5)).collect();
        let eps = sources.iter().map(|s| s.epsilon()).collect();
        let params = ProtocolParams::new(exact_partition(&sizes), eps, random_layout(&mut r, m)).unwrap();
        let session = all_honest(params, sources);
        let mc = monte_carlo(&session, 10_000, mix_seed(11, config), None).unwrap();
        let st = &mc.instances[0];
        runs += st.trials + st.aborts;
        if st.aborts != 0 || st.trials != 10_000 || st.counts.iter().sum::<u64>() != 10_000 {
            failures.push(format!("config {config} (M = {m}, N = {outcomes}, n = {n}): {} aborts", st.aborts));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && elapsed < 60.0;
    report(1, pass, format!("{runs} honest runs over 20 configurations, 0 aborts required, {elapsed:.1} s (< 60 s) {failures:?}"));
    assert!(pass);
}

/// One exact distribution with its bound, kept for the variational check.
struct Exact {
    probs: Vec<f64>,
    ideal: Vec<f64>,
    delta: f64,
}

fn exact_run(session: &Session, params: &ProtocolParams) -> Option<Exact> {
    let e = exact_outcome_distribution(session, DEFAULT_ENUMERATION_LIMIT)
        .unwrap_or_else(|err| panic!("{:?}: {err}", session.instances()[0].strategies.iter().map(|s| s.name()).collect::<Vec<_>>()));
    let d = &e.instances[0];
    if d.abort_probability >= 1.0 - EXACT_TOLERANCE {
        return None;
    }
    Some(Exact { probs: d.probs.clone(), ideal: d.ideal.clone(), delta: params.delta() })
}

fn builtin_adversaries(params: &ProtocolParams, k: usize, source: &SourceModel) -> Vec<Strategy> {
    let n = params.n();
    let mut v = Vec::new();
    for o in 0..params.outcomes() {
        v.push(optimal_shift_attack(params, k, source, o).0);
        v.push(minimizing_shift_attack(params, k, source, o).0);
        v.push(Strategy::dishonest(DelayedSteer { target: o }));
    }
    for c in 0..n {
        v.push(Strategy::dishonest(ShiftAttack::new(c)));
    }
    for seed in 0..6 {
        v.push(Strategy::dishonest(RandomAdmissible { seed }));
    }
    let min_deadline = params.layout().deadlines().iter().copied().fold(f64::INFINITY, f64::min);
    v.push(Strategy::dishonest(MitmRelay { latency: min_deadline / 4.0 }));
    v.push(Strategy::dishonest(Silent));
    v.push(Strategy::dishonest(InconsistentBroadcast));
    v
}

fn criterion_2(r: &mut TestRng) -> (bool, String, Vec<Exact>) {
    let grid: &[(usize, &[usize])] = &[(2, &[2, 3, 4, 5, 6, 8, 12]), (3, &[2, 3, 4, 6]), (4, &[2, 3, 4])];
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut vacuous = 0;
    let mut all = Vec::new();
    for &(m, ns) in grid {
        for &n in ns {
            assert!((n as f64).powi(m as i32) <= 1e6);
            for outcomes in [2, n.min(3), n] {
                let sizes = random_class_sizes(r, outcomes, n);
                let params =
                    ProtocolParams::new(exact_partition(&sizes), vec![0.0; m], random_layout(r, m)).unwrap();
                let uniform = SourceModel::uniform(n);
                // one honest party, and for M ≥ 3 also two honest parties
                let mut coalitions = vec![vec![r.gen_range(0..m)]];
                if m >= 3 {
                    coalitions.push(vec![0, m - 1]);
                }
                for honest in coalitions {
                    let sources = vec![uniform.clone(); honest.len()];
                    for adv in builtin_adversaries(&params, honest[0], &uniform) {
                        match exact_run(&mixed(&params, &honest, &sources, &adv), &params) {
                            Some(e) => {
                                worst = worst.max(max_abs_diff(&e.probs, &e.ideal));
                                checked += 1;
                                all.push(e);
                            }
                            None => vacuous += 1,
                        }
                    }
                }
            }
        }
    }
    let pass = worst <= EXACT_TOLERANCE;
    (pass, format!("{checked} exact distributions ({vacuous} always-abort), max |P(o) - P_o| = {worst:.3e} (<= 1e-12)"), all)
}

fn random_partition(r: &mut TestRng, outcomes: usize, n: usize) -> OutcomePartition {
    loop {
        let w: Vec<f64> = (0..outcomes).map(|_| r.gen_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        let dist = IdealDistribution::new(w.iter().map(|x| x / total).collect()).unwrap();
        match build_partition(&dist, n) {
            Ok(p) => return p,
            Err(PartitionError::EmptyClass { .. }) => continue,
            Err(e) => panic!("{e}"),
        }
    }
}

fn criterion_3(r: &mut TestRng) -> (bool, String, Vec<Exact>) {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut checked = 0;
    let mut per_config = Vec::new();
    let mut all = Vec::new();
    let mut failures = 0;
    for (m, n) in [(2, 2), (2, 3), (2, 4), (3, 2), (3, 3), (3, 4)] {
        let outcomes = r.gen_range(2..=n);
        let partition = random_partition(r, outcomes, n);
        let layout = random_layout(r, m);
        let mut strategies = 0;
        let mut seed = 0u64;
        while strategies < 100 && seed < 2000 {
            seed += 1;
            let honest: Vec<usize> = loop {
                let h: Vec<usize> = (0..m).filter(|_| r.gen_bool(0.5)).collect();
                if !h.is_empty() && h.len() < m {
                    break h;
                }
            };
            let sources: Vec<_> = honest.iter().map(|_| random_source(r, n, 0.6)).collect();
            let mut eps = vec![0.0; m];
            for (h, s) in honest.iter().zip(&sources) {
                eps[*h] = s.epsilon();
            }
            let Ok(params) = ProtocolParams::new(partition.clone(), eps, layout.clone()) else {
                continue;
            };
            let adv = Strategy::dishonest(RandomAdmissible { seed: mix_seed(seed, n as u64 * 10 + m as u64) });
            // strategies that always abort leave nothing to bound
            if let Some(e) = exact_run(&mixed(&params, &honest, &sources, &adv), &params) {
                strategies += 1;
                let check = check_security(&e.probs, &e.ideal, &security_bound(&params), Tolerance::Exact);
                if !check.pass {
                    failures += 1;
                }
                worst_excess = worst_excess.max(max_abs_diff(&e.probs, &e.ideal) - e.delta);
                checked += 1;
                all.push(e);
            }
        }
        per_config.push(strategies);
    }
    let pass = failures == 0 && worst_excess <= EXACT_TOLERANCE && per_config.iter().all(|&s| s >= 100);
    (
        pass,
        format!("{checked} exact distributions, non-aborting strategies per configuration {per_config:?}, max (|P(o) - P_o| - delta) = {worst_excess:.3e} (<= 1e-12)"),
        all,
    )
}

fn criterion_4() -> (bool, String, Vec<Exact>) {
    let mut worst: f64 = 0.0;
    let mut all = Vec::new();
    for eps in [0.01, 0.05, 0.1, 0.2, 0.25] {
        for m in [2, 3] {
            let q = 0.25 + eps;
            let source = SourceModel::exact(vec![q, q, 0.5 - q, 0.5 - q]).unwrap();
            let mut eps_all = vec![0.0; m];
            eps_all[0] = eps;
            let params = ProtocolParams::new(exact_partition(&[2, 2]), eps_all, Layout::regular(m, 10.0, 0.5, 2.0)).unwrap();
            let (adv, attack) = optimal_shift_attack(&params, 0, &source, 0);
            let expected = (0.25 + eps) * 2.0;
            assert!((expected - (0.5 + eps * 2.0)).abs() < 1e-15);
            let e = exact_run(&against(params.clone(), 0, source, &adv), &params).unwrap();
            worst = worst
                .max((attack.achieved - expected).abs())
                .max((attack.bound - expected).abs())
                .max((e.probs[0] - expected).abs());
            all.push(e);
        }
    }
    let pass = worst <= EXACT_TOLERANCE;
    (pass, format!("optimal shift on n = 4, |Omega| = 2: max |P(o*) - (1/n + eps)|Omega|| = {worst:.3e} (<= 1e-12)"), all)
}

fn criteria_02_to_05_exact_bounds() {
    let mut r = rng(2);
    let (p2, d2, e2) = criterion_2(&mut r);
    report(2, p2, d2);
    let (p3, d3, e3) = criterion_3(&mut r);
    report(3, p3, d3);
    let (p4, d4, e4) = criterion_4();
    report(4, p4, d4);

    let all: Vec<&Exact> = e2.iter().chain(&e3).chain(&e4).collect();
    let worst = all
        .iter()
        .map(|e| {
            let vd = 0.5 * e.probs.iter().zip(&e.ideal).map(|(p, q)| (p - q).abs()).sum::<f64>();
            vd - e.ideal.len() as f64 * e.delta / 2.0
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let p5 = worst <= EXACT_TOLERANCE && !all.is_empty();
    report(5, p5, format!("{} distributions, max (distance - N delta / 2) = {worst:.3e} (<= 1e-12)", all.len()));
    assert!(p2 && p3 && p4 && p5);
}

fn criterion_06_no_signalling() {
    let mut r = rng(6);
    let mut comparisons = 0;
    let mut failures = Vec::new();
    for (m, n) in [(2, 2), (2, 3), (2, 4), (3, 2), (3, 3), (3, 4)] {
        let outcomes = r.gen_range(2..=n);
        let sizes = random_class_sizes(&mut r, outcomes, n);
        let layout = random_layout(&mut r, m);
        let source = random_source(&mut r, n, 0.5);
        let params = ProtocolParams::new(exact_partition(&sizes), vec![source.epsilon(); m], layout).unwrap();
        let mut adversaries = builtin_adversaries(&params, 0, &source);
        // late emissions legitimately see honest values
        adversaries.retain(|a| !a.name().starts_with("delayed_steer"));
        adversaries.extend((10..30).map(|seed| Strategy::dishonest(RandomAdmissible { seed })));
        let mut honest_sets = vec![vec![0]];
        if m == 3 {
            honest_sets.push(vec![0, 2]);
        }
        for honest in &honest_sets {
            let sources = vec![source.clone(); honest.len()];
            for adv in &adversaries {
                match check_no_signalling(&mixed(&params, honest, &sources, adv), DEFAULT_ENUMERATION_LIMIT) {
                    Ok(c) => comparisons += c,
                    Err(e) => failures.push(format!("{} M = {m} n = {n}: {e}", adv.name())),
                }
            }
        }
    }

    let mut attempts = 0;
    let mut rejected = 0;
    for seed in 0..100u64 {
        let m = 3 + (seed % 2) as usize;
        let n = 2 + (seed % 3) as usize;
        let params =
            ProtocolParams::new(exact_partition(&random_class_sizes(&mut r, 2, n)), vec![0.0; m], random_layout(&mut r, m))
                .unwrap();
        let honest = vec![(seed % m as u64) as usize];
        let session = mixed(&params, &honest, &[SourceModel::uniform(n)], &Strategy::dishonest(ForbiddenRead));
        attempts += 1;
        match session.run(&mut EntropyStream::from_seed(seed)) {
            Err(e) if e.is_causality() => rejected += 1,
            _ => {}
        }
    }
    let pass = failures.is_empty() && comparisons > 0 && rejected == attempts;
    report(
        6,
        pass,
        format!("{comparisons} invariance comparisons, {} signalling; forbidden reads rejected {rejected}/{attempts} {failures:?}", failures.len()),
    );
    assert!(pass);
}

fn criterion_07_mitm_relay() {
    let s = load_scenario(&scenario_path("mitm_pair"), Overrides::default()).unwrap();
    let mc = monte_carlo(&s.session, 100_000, s.seed, None).unwrap();
    let joint = mc.joint.unwrap();
    let equal = joint[0][0] + joint[1][1];
    let exact = exact_outcome_distribution(&s.session, DEFAULT_ENUMERATION_LIMIT).unwrap();
    let j = exact.joint.unwrap().probs;
    let target = [[0.5, 0.0], [0.0, 0.5]];
    let gap = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| (j[a][b] - target[a][b]).abs()).fold(0.0, f64::max);
    let pass = equal == 100_000 && gap <= EXACT_TOLERANCE;
    report(7, pass, format!("o = o' in {equal}/100000 trials; exact joint {j:?}, max gap {gap:.3e} (<= 1e-12)"));
    assert!(pass);
}

fn criterion_08_same_role_independence() {
    let s = load_scenario(&scenario_path("same_role_pair"), Overrides::default()).unwrap();
    let exact = exact_outcome_distribution(&s.session, DEFAULT_ENUMERATION_LIMIT).unwrap();
    let joint = exact.joint.unwrap();
    let mc = monte_carlo(&s.session, 100_000, s.seed, None).unwrap();
    let counts = mc.joint.unwrap();
    let ind = independence_test(&counts, CHI_SQUARED_SIGNIFICANCE).unwrap();
    let pass = joint.product_gap <= EXACT_TOLERANCE && ind.samples == 100_000 && ind.independent;
    report(
        8,
        pass,
        format!(
            "exact product gap {:.3e} (<= 1e-12); chi-squared {:.3} on {} samples, p = {:.3} (not < 1e-3)",
            joint.product_gap, ind.chi_squared, ind.samples, ind.p_value
        ),
    );
    assert!(pass);
}

fn criterion_09_stage3_detection() {
    let mut r = rng(9);
    let mut runs = 0;
    let mut caught = 0;
    let mut exact_ok = true;
    for m in [3, 4] {
        for n in [2, 3, 4] {
            let params =
                ProtocolParams::new(exact_partition(&random_class_sizes(&mut r, 2, n)), vec![0.0; m], random_layout(&mut r, m))
                    .unwrap();
            let mut honest_sets: Vec<Vec<usize>> = (0..m).map(|d| (0..m).filter(|&p| p != d).collect()).collect();
            if m == 4 {
                honest_sets.push(vec![1, 3]);
            }
            for honest in honest_sets {
                let sources = vec![SourceModel::uniform(n); honest.len()];
                let session = mixed(&params, &honest, &sources, &Strategy::dishonest(InconsistentBroadcast));
                for seed in 0..200 {
                    let rec = session.run(&mut EntropyStream::from_seed(seed)).unwrap();
                    let t = &rec.transcripts[0];
                    runs += 1;
                    let all = honest.iter().all(|&h| t.aborts.iter().any(|a| a.lab == LabId::home(h)));
                    if all && t.outcome == Outcome::Aborted {
                        caught += 1;
                    }
                }
                let e = exact_outcome_distribution(&session, DEFAULT_ENUMERATION_LIMIT).unwrap();
                exact_ok &= e.instances[0].abort_probability == 1.0;
            }
        }
    }
    let pass = caught == runs && exact_ok;
    report(9, pass, format!("all honest parties aborted in {caught}/{runs} runs; exact abort probability 1: {exact_ok}"));
    assert!(pass);
}

fn criterion_10_piling_up() {
    let mut r = rng(10);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let biases: Vec<f64> = (0..16).map(|_| r.gen_range(1e-6..0.5 - 1e-6)).collect();
        let bits = BitSourceModel::new(biases.clone()).unwrap();
        // distribution of the running XOR by direct convolution
        let mut zero = 1.0;
        for (j, e) in biases.iter().enumerate() {
            zero = zero * (0.5 + e) + (1.0 - zero) * (0.5 - e);
            worst = worst.max((bits.pile_up(j + 1).unwrap() - (zero - 0.5)).abs());
        }
    }
    let mut ratio_gap: f64 = 0.0;
    let mut monotone = true;
    for e in [0.05, 0.1, 0.25, 0.4, 0.49] {
        let bits = BitSourceModel::repeated(e, 24).unwrap();
        let declared: Vec<f64> =
            (1..=12).map(|rounds| build_source_from_bits(&bits, 2, rounds).unwrap().epsilon()).collect();
        for w in declared.windows(2) {
            monotone &= w[1] < w[0];
            ratio_gap = ratio_gap.max((w[1] / w[0] - 2.0 * e).abs());
        }
        let wide: Vec<f64> =
            (1..=12).map(|rounds| build_source_from_bits(&bits, 4, rounds).unwrap().epsilon()).collect();
        monotone &= wide.windows(2).all(|w| w[1] < w[0]);
    }
    let pass = worst <= EXACT_TOLERANCE && monotone && ratio_gap <= 1e-12;
    report(
        10,
        pass,
        format!("max |pile_up - convolution| = {worst:.3e} over j <= 16; declared eps decreasing: {monotone}, max |ratio - 2e| = {ratio_gap:.3e}"),
    );
    assert!(pass);
}

fn gap_oracle(balls: &[Ball], i: usize, j: usize) -> f64 {
    let (a, b) = (balls[i].center, balls[j].center);
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt() - balls[i].radius - balls[j].radius
}

fn layout_oracle(layout: &Layout) -> bool {
    let balls = layout.balls();
    let m = balls.len();
    let mut ok = m >= 2;
    for i in 0..m {
        let t = layout.deadline(i);
        ok &= balls[i].radius > 0.0 && t > 0.0;
        for j in 0..m {
            if i != j {
                let d = gap_oracle(balls, i, j);
                ok &= d > 0.0 && 2.0 * balls[i].radius < d && t < d;
            }
        }
    }
    ok
}

#[derive(Debug, Clone, Copy)]
enum Mutation {
    Overlap,
    Radius,
    DeadlineZero,
    DeadlineLate,
}

fn mutate(layout: &Layout, mutation: Mutation, i: usize, j: usize) -> Layout {
    let balls = layout.balls();
    match mutation {
        Mutation::Overlap => {
            let mut c = balls[i].center;
            c[0] += 0.5 * balls[i].radius;
            layout.with_ball(j, Ball::new(c, balls[j].radius))
        }
        Mutation::Radius => {
            let cd = gap_oracle(balls, i, j) + balls[i].radius + balls[j].radius;
            layout.with_ball(i, Ball::new(balls[i].center, (cd - balls[j].radius) / 2.0))
        }
        Mutation::DeadlineZero => layout.with_deadline(i, 0.0),
        Mutation::DeadlineLate => layout.with_deadline(i, gap_oracle(balls, i, j) * 1.0001),
    }
}

fn detected(violations: &[LayoutViolation], mutation: Mutation, i: usize, j: usize) -> bool {
    violations.iter().any(|v| match (mutation, v) {
        (Mutation::Overlap, LayoutViolation::Overlap { i: a, j: b, .. }) => (*a, *b) == (i.min(j), i.max(j)),
        (Mutation::Radius, LayoutViolation::RadiusTooLarge { i: a, j: b, .. }) => (*a, *b) == (i, j),
        (Mutation::DeadlineZero, LayoutViolation::DeadlineNotPositive { i: a, .. }) => *a == i,
        (Mutation::DeadlineLate, LayoutViolation::DeadlineTooLate { i: a, j: b, .. }) => (*a, *b) == (i, j),
        _ => false,
    })
}

fn criterion_11_layout_validation() {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let accepted = Cell::new(0);
    let mutations = Cell::new(0);
    let strategy = (any::<u64>(), 2usize..=5, 0usize..4, prop::collection::vec(0.5f64..1.6, 10));
    let result = runner.run(&strategy, |(seed, m, kind, scales)| {
        let mut r = rng(seed);
        let valid = random_layout(&mut r, m);
        prop_assert!(validate_layout(&valid).is_ok());
        // stretch radii and deadlines so that both sides of the boundary occur
        let balls: Vec<Ball> =
            valid.balls().iter().enumerate().map(|(i, b)| Ball::new(b.center, b.radius * scales[i])).collect();
        let deadlines = valid.deadlines().iter().enumerate().map(|(i, t)| t * scales[5 + i]).collect();
        let perturbed = Layout::new(balls, deadlines);
        let oracle = layout_oracle(&perturbed);
        prop_assert_eq!(validate_layout(&perturbed).is_ok(), oracle);
        if oracle {
            accepted.set(accepted.get() + 1);
        }

        let mutation = [Mutation::Overlap, Mutation::Radius, Mutation::DeadlineZero, Mutation::DeadlineLate][kind];
        let i = r.gen_range(0..m);
        let j = (i + r.gen_range(1..m)) % m;
        let broken = mutate(&valid, mutation, i, j);
        prop_assert!(!layout_oracle(&broken));
        let violations = validate_layout(&broken).unwrap_err();
        prop_assert!(detected(&violations, mutation, i, j), "{:?} on ({}, {}) gave {:?}", mutation, i, j, violations);
        mutations.set(mutations.get() + 1);
        Ok(())
    });
    let pass = result.is_ok();
    report(
        11,
        pass,
        format!(
            "1000 random geometries ({} accepted), accept iff oracle; {} single-constraint mutations detected {result:?}",
            accepted.get(),
            mutations.get()
        ),
    );
    assert!(pass);
}

fn main() {
    let checks: [(&str, fn()); 8] = [
        ("1", criterion_01_correctness),
        ("2-5", criteria_02_to_05_exact_bounds),
        ("6", criterion_06_no_signalling),
        ("7", criterion_07_mitm_relay),
        ("8", criterion_08_same_role_independence),
        ("9", criterion_09_stage3_detection),
        ("10", criterion_10_piling_up),
        ("11", criterion_11_layout_validation),
    ];
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, check) in checks {
        if std::panic::catch_unwind(check).is_err() {
            println!("criterion {name}: FAIL (panicked)");
            failed.push(name);
        }
    }
    println!("acceptance: {} of {} checks passed in {:.1} s", checks.len() - failed.len(), checks.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
