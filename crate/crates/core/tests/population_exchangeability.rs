use mftg_core::bridge::Level0Policy;
use mftg_core::lifted::{enumerate_states, KernelBackend, DEFAULT_STATE_CAP};
use mftg_core::model::{build_drift_model, DriftParams};
use mftg_core::population::{
    empirical_joint, simulate_meanfield_level0, simulate_population, PopulationOptions, PopulationState,
    SimulationConfig,
};
use mftg_core::prob::FinitePmf;
use proptest::prelude::*;

proptest! {
    #[test]
    fn empirical_joint_ignores_agent_order(
        agents in prop::collection::vec((0usize..3, 0usize..3, 0usize..3, 0usize..3), 1..12),
        seed in any::<u64>(),
    ) {
        let spec = build_drift_model(DriftParams::plain(3, vec![0, 2], 0.9)).unwrap();
        let split = |v: &[(usize, usize, usize, usize)]| {
            let states = PopulationState {
                teams: vec![v.iter().map(|a| a.0).collect(), v.iter().map(|a| a.2).collect()],
            };
            let actions = vec![v.iter().map(|a| a.1).collect(), v.iter().map(|a| a.3).collect()];
            (states, actions)
        };
        let (s, a) = split(&agents);
        let mut shuffled = agents.clone();
        let n = shuffled.len();
        for k in (1..n).rev() {
            shuffled.swap(k, (seed.rotate_left(k as u32) as usize) % (k + 1));
        }
        let (s2, a2) = split(&shuffled);
        let x = empirical_joint(&spec, &s, &a).unwrap();
        let y = empirical_joint(&spec, &s2, &a2).unwrap();
        prop_assert!(x.law().max_abs_diff(y.law()) < 1e-15);
    }
}

#[test]
fn coordinated_policies_only_pay_the_first_stage() {
    let spec = build_drift_model(DriftParams::plain(3, vec![2, 2], 0.9)).unwrap();
    let mu0 = FinitePmf::uniform(spec.state_shape().clone());
    let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
    let policy = Level0Policy::constant(&spec, &space, &[2, 2]).unwrap();
    let config = SimulationConfig::new(60, 40, 9);
    // Everyone reaches the target after one step, so a replication pays
    // the initial mean distance |x − 2|, whose expectation is 1.
    let mf = simulate_meanfield_level0(&spec, &policy, &mu0, &config).unwrap();
    for rep in &mf.per_replication {
        assert!(rep.iter().all(|v| [0.0, 1.0, 2.0].contains(v)));
    }
    for n in [1, 7, 50] {
        let run = simulate_population(&spec, &policy, &mu0, &[n, n], &config, &PopulationOptions::default()).unwrap();
        for rep in &run.per_replication {
            for v in rep {
                let k = v * n as f64;
                assert!((k - k.round()).abs() < 1e-9);
            }
        }
        for i in 0..2 {
            assert!((run.estimate.mean[i] - 1.0).abs() <= 4.0 * run.estimate.se[i]);
        }
    }
}

#[test]
fn runs_are_reproducible() {
    let spec = build_drift_model(DriftParams::plain(3, vec![0, 2], 0.9)).unwrap();
    let mu0 = FinitePmf::uniform(spec.state_shape().clone());
    let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
    let policy = Level0Policy::random(&spec, &space, 2, 3).unwrap();
    let config = SimulationConfig::new(30, 16, 11);
    let a = simulate_population(&spec, &policy, &mu0, &[5, 5], &config, &PopulationOptions::default()).unwrap();
    let b = simulate_population(&spec, &policy, &mu0, &[5, 5], &config, &PopulationOptions::default()).unwrap();
    assert_eq!(a, b);
}
