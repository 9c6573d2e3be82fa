mod common;

use cellfed_core::federation::{run, Federation, PowerArm, QuantArm, RunConfig, Trajectory};
use cellfed_core::power::PowerProblem;
use cellfed_core::trainer::ExpLevel;
use common::oracle_latencies;

fn small(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        clients: 3,
        max_rounds: 5,
        n_train: 240,
        n_test: 120,
        features: 6,
        classes: 3,
        hidden: 8,
        aps: 6,
        ..RunConfig::default()
    }
}

#[test]
fn recorded_physics_matches_oracle() {
    let cfg = small(4);
    let t = run(&cfg).unwrap();
    let fed = Federation::new(cfg.clone()).unwrap();
    assert_eq!(t.records.len(), 5);
    for r in &t.records {
        let problem = PowerProblem::new(
            fed.channel_stats().clone(),
            r.bits.iter().map(|&b| b as f64).collect(),
            fed.channel_config().clone(),
            cfg.theta_e,
            cfg.theta_l,
        )
        .unwrap();
        let lat = oracle_latencies(&problem, &r.power);
        for j in 0..cfg.clients {
            assert!((r.latency[j] - lat[j]).abs() <= 1e-12 * lat[j]);
            let e = r.power[j] * cfg.max_power_w * lat[j];
            assert!((r.energy[j] - e).abs() <= 1e-12 * e);
        }
        let ell = lat.iter().copied().fold(0.0, f64::max);
        assert!((r.ell_max - ell).abs() <= 1e-12 * ell);
        assert!((r.sum_energy - r.energy.iter().sum::<f64>()).abs() <= 1e-12 * r.sum_energy);
        assert_eq!(r.charged_latency, r.ell_max);
        assert_eq!(r.charged_energy, r.sum_energy);
    }
}

#[test]
fn transmitted_exponent_is_the_delta_exponent() {
    let cfg = small(5);
    let t = run(&cfg).unwrap();
    let d = t.weights[0].len();
    for r in &t.records {
        for j in 0..cfg.clients {
            let expected = match r.exponents[j] {
                ExpLevel::Finite(u) => Some(u),
                _ => None,
            };
            assert_eq!(r.code_exponents[j], expected);
            assert!(r.bits[j] >= 8 + 2 * d && r.bits[j] <= 8 + 6 * d);
        }
    }
}

#[test]
fn full_precision_arm_matches_its_shadow() {
    let cfg = RunConfig {
        quant: QuantArm::FullPrec,
        ..small(6)
    };
    let t = run(&cfg).unwrap();
    for (w, s) in t.weights.iter().zip(&t.shadow) {
        assert_eq!(w, s);
    }
    let d = t.weights[0].len();
    assert!(t.records.iter().all(|r| r.bits.iter().all(|&b| b == 32 * d)));
}

#[test]
fn zero_affordable_rounds_return_initial_weights() {
    let cfg = RunConfig {
        energy_budget: Some(1e-30),
        ..small(7)
    };
    let t = run(&cfg).unwrap();
    assert_eq!(t.k(), 0);
    assert_eq!(t.executed, 1);
    assert!(t.records.is_empty());
    assert_eq!(t.weights.len(), 1);
    let fed = Federation::new(cfg).unwrap();
    assert_eq!(t.final_weights(), fed.weights());
}

#[test]
fn budgets_hold_for_every_completed_round() {
    let probe = run(&RunConfig {
        power: PowerArm::FullPower,
        ..small(8)
    })
    .unwrap();
    let first = &probe.records[0];
    let cfg = RunConfig {
        max_rounds: 40,
        energy_budget: Some(6.5 * first.sum_energy),
        latency_budget: Some(9.5 * first.ell_max),
        ..small(8)
    };
    for arm in ["emq+sqp", "emq+fullpower", "fixedbit+sqp"] {
        let mut c = cfg.clone();
        c.set_arm(arm.parse().unwrap());
        let t: Trajectory = run(&c).unwrap();
        let (mut e, mut l) = (0.0, 0.0);
        for r in &t.records {
            e += r.charged_energy;
            l += r.charged_latency;
            assert!(e <= c.energy_budget.unwrap() && l <= c.latency_budget.unwrap(), "{arm}");
        }
        assert!(t.k() < 40, "{arm}: budget never bound");
        assert_eq!(t.executed, t.k() + 1, "{arm}");
    }
}

#[cfg(feature = "parallel")]
#[test]
fn thread_count_does_not_change_results() {
    let cfg = small(9);
    let results: Vec<Trajectory> = [1, 4]
        .into_iter()
        .map(|n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| run(&cfg).unwrap())
        })
        .collect();
    assert_eq!(results[0], results[1]);
}
