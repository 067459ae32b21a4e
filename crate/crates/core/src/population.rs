//! Finite-population simulation and the exactly tracked mean-field process.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::Level0Policy;
use crate::error::{Error, Result};
use crate::lifted::pushforward;
use crate::model::{self, sample_common_noise, MftgSpec, NoiseArchitecture, StreamKey, StreamKind};
use crate::prob::{self, FinitePmf};
use crate::reconstruction::{reconstruct_xi, JointLaw};

/// States of every agent, team by team.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopulationState {
    pub teams: Vec<Vec<usize>>,
}

/// Empirical `(x, a)` measure of one team, `|X^i| × |A^i|` row-major.
pub fn team_empirical(spec: &MftgSpec, team: usize, states: &[usize], actions: &[usize]) -> Result<Vec<f64>> {
    if states.len() != actions.len() || states.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: states.len(),
            found: actions.len(),
        });
    }
    let a_count = spec.team(team).actions;
    let mut counts = vec![0u64; spec.team(team).states * a_count];
    for (&x, &a) in states.iter().zip(actions) {
        counts[x * a_count + a] += 1;
    }
    let n = states.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Joint law over `X̲ × A̲` whose weight at `(x̲, a̲)` is the product of
/// the teams' weights at `(x^i, a^i)`.
pub fn joint_from_team_measures(spec: &MftgSpec, measures: &[Vec<f64>]) -> Result<JointLaw> {
    let m = spec.team_count();
    if measures.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: measures.len(),
        });
    }
    let shape = spec.joint_shape();
    let mut coords = vec![0; 2 * m];
    let weights = (0..shape.len())
        .map(|k| {
            shape.decode_into(k, &mut coords);
            (0..m)
                .map(|i| measures[i][coords[i] * spec.team(i).actions + coords[m + i]])
                .product()
        })
        .collect();
    JointLaw::new(FinitePmf::with_tolerance(shape, weights, 1e-9)?, m)
}

/// `ā^N`: the average of Dirac masses over all cross-team agent tuples,
/// computed as the product of the per-team empirical measures.
pub fn empirical_joint(spec: &MftgSpec, states: &PopulationState, actions: &[Vec<usize>]) -> Result<JointLaw> {
    let m = spec.team_count();
    if states.teams.len() != m || actions.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: states.teams.len().min(actions.len()),
        });
    }
    let measures = (0..m)
        .map(|i| team_empirical(spec, i, &states.teams[i], &actions[i]))
        .collect::<Result<Vec<_>>>()?;
    joint_from_team_measures(spec, &measures)
}

/// Empirical joint state measure `μ̂`: product of the teams' empirical
/// state measures.
pub fn empirical_state_law(spec: &MftgSpec, states: &PopulationState) -> Result<FinitePmf> {
    let marginals = states
        .teams
        .iter()
        .enumerate()
        .map(|(i, xs)| {
            let mut w = vec![0.0; spec.team(i).states];
            for &x in xs {
                w[x] += 1.0;
            }
            FinitePmf::normalized(prob::ProductShape::flat(w.len()), w)
        })
        .collect::<Result<Vec<_>>>()?;
    prob::product(&marginals)?.reshaped(spec.state_shape().clone())
}

/// Horizon, replications and master seed of a Monte Carlo run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub horizon: usize,
    pub reps: usize,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(horizon: usize, reps: usize, seed: u64) -> Self {
        Self { horizon, reps, seed }
    }

    /// Horizon chosen so that the truncation bias is at most `tol`.
    pub fn with_tolerance(spec: &MftgSpec, tol: f64, reps: usize, seed: u64) -> Self {
        Self::new(spec.horizon_for(tol), reps, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.reps == 0 {
            return Err(Error::Config("horizon and replication count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-team discounted value estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: Vec<f64>,
    /// Sample standard deviation over `√reps`.
    pub se: Vec<f64>,
    pub reps: usize,
    pub horizon: usize,
    /// `C_f γ^T / (1 − γ)`.
    pub truncation_bound: f64,
}

/// Mean and standard error of per-replication values, reduced in
/// replication order. Deviations are taken from the first sample so that
/// identical samples give exactly that value with zero error.
pub fn summarize(spec: &MftgSpec, per_rep: &[Vec<f64>], horizon: usize) -> ValueEstimate {
    let reps = per_rep.len();
    let m = spec.team_count();
    let mut mean = vec![0.0; m];
    let mut se = vec![0.0; m];
    for i in 0..m {
        let pivot = per_rep[0][i];
        let shift: f64 = per_rep.iter().map(|v| v[i] - pivot).sum::<f64>() / reps as f64;
        mean[i] = pivot + shift;
        if reps > 1 {
            let ss: f64 = per_rep.iter().map(|v| (v[i] - pivot - shift).powi(2)).sum();
            se[i] = (ss / (reps - 1) as f64).sqrt() / (reps as f64).sqrt();
        }
    }
    ValueEstimate {
        mean,
        se,
        reps,
        horizon,
        truncation_bound: model::truncation_bound(spec.gamma(), spec.cost_bound(), horizon),
    }
}

/// One row of a trajectory dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub replication: usize,
    pub time: usize,
    pub team: usize,
    pub agent: usize,
    pub state: usize,
    pub action: usize,
}

/// Options of [`simulate_population`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PopulationOptions {
    pub record_trajectories: bool,
    /// Stream identifier of each agent, per team; the identity by default.
    /// Permuting these permutes agents together with their noises.
    pub agent_ids: Option<Vec<Vec<u64>>>,
}

/// Output of [`simulate_population`].
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationRun {
    pub estimate: ValueEstimate,
    pub per_replication: Vec<Vec<f64>>,
    pub trajectories: Option<Vec<TrajectoryRecord>>,
}

fn uniform(arch: &NoiseArchitecture, kind: StreamKind, team: usize, agent: u64, time: usize, rep: usize) -> f64 {
    arch.uniform(StreamKey::new(kind, team, agent, time as u64, rep as u64))
}

/// Simulates `counts[i]` agents per team for `config.horizon` steps and
/// estimates the team-average discounted costs. Agents observe the
/// empirical joint state measure; the policy row is that of the nearest
/// enumerated lifted state.
pub fn simulate_population(
    spec: &MftgSpec,
    policy: &Level0Policy,
    mu0: &FinitePmf,
    counts: &[usize],
    config: &SimulationConfig,
    options: &PopulationOptions,
) -> Result<PopulationRun> {
    config.validate()?;
    let m = spec.team_count();
    if counts.len() != m || counts.contains(&0) {
        return Err(Error::Config("every team needs at least one agent".into()));
    }
    let ids: Vec<Vec<u64>> = match &options.agent_ids {
        Some(ids) => {
            if ids.len() != m || ids.iter().zip(counts).any(|(v, &n)| v.len() != n) {
                return Err(Error::Config("agent identifiers do not match the team sizes".into()));
            }
            ids.clone()
        }
        None => counts.iter().map(|&n| (0..n as u64).collect()).collect(),
    };
    let team_marginals: Vec<Vec<f64>> = (0..m)
        .map(|i| prob::marginal(mu0, &[i]).map(|p| p.weights().to_vec()))
        .collect::<Result<_>>()?;
    let arch = NoiseArchitecture::new(config.seed);
    let gamma = spec.gamma();

    let results: Vec<(Vec<f64>, Vec<TrajectoryRecord>)> = (0..config.reps)
        .into_par_iter()
        .map(|rep| -> Result<(Vec<f64>, Vec<TrajectoryRecord>)> {
            let mut records = Vec::new();
            let mut state = PopulationState {
                teams: (0..m)
                    .map(|i| {
                        ids[i]
                            .iter()
                            .map(|&id| {
                                let u = uniform(&arch, StreamKind::Initial, i, id, 0, rep);
                                prob::inverse_cdf_index(&team_marginals[i], u)
                            })
                            .collect()
                    })
                    .collect(),
            };
            let mut totals = vec![0.0; m];
            let mut discount = 1.0;
            for n in 0..config.horizon {
                let mu_hat = empirical_state_law(spec, &state)?;
                let (row, _) = policy.lookup(&mu_hat)?;
                let actions: Vec<Vec<usize>> = (0..m)
                    .map(|i| {
                        let team = policy.team(i);
                        let slot = team.slot_for(uniform(&arch, StreamKind::TeamRandomization, i, 0, n, rep));
                        state.teams[i]
                            .iter()
                            .zip(&ids[i])
                            .map(|(&x, &id)| {
                                let u = uniform(&arch, StreamKind::IndividualRandomization, i, id, n, rep);
                                prob::inverse_cdf_index(team.action_law(row, slot, x), u)
                            })
                            .collect()
                    })
                    .collect();
                if options.record_trajectories {
                    for i in 0..m {
                        for (j, (&x, &a)) in state.teams[i].iter().zip(&actions[i]).enumerate() {
                            records.push(TrajectoryRecord {
                                replication: rep,
                                time: n,
                                team: i,
                                agent: ids[i][j] as usize,
                                state: x,
                                action: a,
                            });
                        }
                    }
                }
                let measures = (0..m)
                    .map(|i| team_empirical(spec, i, &state.teams[i], &actions[i]))
                    .collect::<Result<Vec<_>>>()?;
                let bar_a = joint_from_team_measures(spec, &measures)?;
                let cost = spec.dynamics().bind_cost(&bar_a);
                for i in 0..m {
                    let a_count = spec.team(i).actions;
                    let team_cost: f64 = measures[i]
                        .iter()
                        .enumerate()
                        .filter(|(_, w)| **w > 0.0)
                        .map(|(k, w)| w * cost(i, k / a_count, k % a_count))
                        .sum();
                    totals[i] += discount * team_cost;
                }
                discount *= gamma;
                if n + 1 == config.horizon {
                    break;
                }
                let common = sample_common_noise(&arch, spec, (n + 1) as u64, rep as u64);
                let step = spec.dynamics().bind_transition(&bar_a, &common);
                for i in 0..m {
                    let idio = &spec.noise().idiosyncratic[i];
                    for ((x, &a), &id) in state.teams[i].iter_mut().zip(&actions[i]).zip(&ids[i]) {
                        let e: &[f64] = if idio.is_trivial() {
                            &[]
                        } else {
                            let mut rng = arch.stream(StreamKey::new(
                                StreamKind::Idiosyncratic,
                                i,
                                id,
                                (n + 1) as u64,
                                rep as u64,
                            ));
                            idio.sample(&mut rng)
                        };
                        *x = step(i, *x, a, e);
                    }
                }
            }
            Ok((totals, records))
        })
        .collect::<Result<_>>()?;

    let per_replication: Vec<Vec<f64>> = results.iter().map(|(t, _)| t.clone()).collect();
    let trajectories = options
        .record_trajectories
        .then(|| results.into_iter().flat_map(|(_, r)| r).collect());
    Ok(PopulationRun {
        estimate: summarize(spec, &per_replication, config.horizon),
        per_replication,
        trajectories,
    })
}

/// Output of [`simulate_meanfield_level0`].
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldRun {
    pub estimate: ValueEstimate,
    pub per_replication: Vec<Vec<f64>>,
    /// Largest entrywise gap between the directly assembled joint law
    /// `μ(x̲) Π_i π^i(a^i | x^i)` and `Ξ` of the lifted actions.
    pub reconstruction_residual: f64,
    /// Largest L1 distance between a tracked law and its policy row.
    pub lookup_distance: f64,
}

/// Level-0 mean-field process: the conditional law `μ_n` is pushed forward
/// exactly for each sampled common noise, and one representative agent per
/// team is simulated on the same noise.
pub fn simulate_meanfield_level0(
    spec: &MftgSpec,
    policy: &Level0Policy,
    mu0: &FinitePmf,
    config: &SimulationConfig,
) -> Result<MeanFieldRun> {
    config.validate()?;
    let m = spec.team_count();
    let arch = NoiseArchitecture::new(config.seed);
    let gamma = spec.gamma();
    let state_shape = spec.state_shape();
    let joint_shape = spec.joint_shape();

    let results: Vec<(Vec<f64>, f64, f64)> = (0..config.reps)
        .into_par_iter()
        .map(|rep| -> Result<(Vec<f64>, f64, f64)> {
            let mut mu = mu0.clone();
            let u = uniform(&arch, StreamKind::Initial, 0, 0, 0, rep);
            let mut x = state_shape.decode(prob::inverse_cdf_index(mu.weights(), u));
            let mut totals = vec![0.0; m];
            let mut discount = 1.0;
            let mut residual: f64 = 0.0;
            let mut distance: f64 = 0.0;
            for n in 0..config.horizon {
                let (row, d) = policy.lookup(&mu)?;
                distance = distance.max(d);
                let slots: Vec<usize> = (0..m)
                    .map(|i| {
                        policy
                            .team(i)
                            .slot_for(uniform(&arch, StreamKind::TeamRandomization, i, 0, n, rep))
                    })
                    .collect();
                let a_hats = (0..m)
                    .map(|i| policy.team_action(i, &mu, row, slots[i]))
                    .collect::<Result<Vec<_>>>()?;
                let xi = reconstruct_xi(&mu, &a_hats)?;

                let mut coords = vec![0; 2 * m];
                for k in 0..joint_shape.len() {
                    joint_shape.decode_into(k, &mut coords);
                    let direct = mu.weight(state_shape.encode(&coords[..m]))
                        * (0..m)
                            .map(|i| policy.team(i).action_law(row, slots[i], coords[i])[coords[m + i]])
                            .product::<f64>();
                    residual = residual.max((direct - xi.joint.law().weight(k)).abs());
                }

                let actions: Vec<usize> = (0..m)
                    .map(|i| {
                        let u = uniform(&arch, StreamKind::IndividualRandomization, i, 0, n, rep);
                        prob::inverse_cdf_index(policy.team(i).action_law(row, slots[i], x[i]), u)
                    })
                    .collect();
                let cost = spec.dynamics().bind_cost(&xi.joint);
                for i in 0..m {
                    totals[i] += discount * cost(i, x[i], actions[i]);
                }
                discount *= gamma;
                if n + 1 == config.horizon {
                    break;
                }
                let common = sample_common_noise(&arch, spec, (n + 1) as u64, rep as u64);
                let next_mu = pushforward(spec, &xi.joint, &common)?;
                let step = spec.dynamics().bind_transition(&xi.joint, &common);
                for i in 0..m {
                    let idio = &spec.noise().idiosyncratic[i];
                    let e: &[f64] = if idio.is_trivial() {
                        &[]
                    } else {
                        let mut rng = arch.stream(StreamKey::new(StreamKind::Idiosyncratic, i, 0, (n + 1) as u64, rep as u64));
                        idio.sample(&mut rng)
                    };
                    x[i] = step(i, x[i], actions[i], e);
                }
                if next_mu.weight(state_shape.encode(&x)) <= 0.0 {
                    return Err(Error::InvalidModel(
                        "representative agents left the support of the tracked law".into(),
                    ));
                }
                mu = next_mu;
            }
            Ok((totals, residual, distance))
        })
        .collect::<Result<_>>()?;

    let per_replication: Vec<Vec<f64>> = results.iter().map(|r| r.0.clone()).collect();
    Ok(MeanFieldRun {
        estimate: summarize(spec, &per_replication, config.horizon),
        reconstruction_residual: results.iter().map(|r| r.1).fold(0.0, f64::max),
        lookup_distance: results.iter().map(|r| r.2).fold(0.0, f64::max),
        per_replication,
    })
}

/// One line of a propagation-of-chaos table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosRow {
    pub agents: usize,
    pub team: usize,
    pub population_mean: f64,
    pub population_se: f64,
    pub meanfield_mean: f64,
    pub meanfield_se: f64,
    /// `|J^N − J^MF|`.
    pub gap: f64,
    /// Standard error of the paired per-replication difference; both runs
    /// share common noise in replication `r`.
    pub gap_se: f64,
}

/// `|J^N − J^MF|` per team for every population size in `sizes` (the same
/// size in every team). Purely descriptive.
pub fn propagation_of_chaos_sweep(
    spec: &MftgSpec,
    policy: &Level0Policy,
    mu0: &FinitePmf,
    sizes: &[usize],
    config: &SimulationConfig,
) -> Result<Vec<ChaosRow>> {
    if sizes.is_empty() {
        return Err(Error::Config("at least one population size is required".into()));
    }
    let mf_run = simulate_meanfield_level0(spec, policy, mu0, config)?;
    let meanfield = &mf_run.estimate;
    let mut rows = Vec::new();
    for &n in sizes {
        let counts = vec![n; spec.team_count()];
        let run = simulate_population(spec, policy, mu0, &counts, config, &PopulationOptions::default())?;
        let diffs: Vec<Vec<f64>> = run
            .per_replication
            .iter()
            .zip(&mf_run.per_replication)
            .map(|(p, q)| p.iter().zip(q).map(|(a, b)| a - b).collect())
            .collect();
        let paired = summarize(spec, &diffs, config.horizon);
        for i in 0..spec.team_count() {
            rows.push(ChaosRow {
                agents: n,
                team: i,
                population_mean: run.estimate.mean[i],
                population_se: run.estimate.se[i],
                meanfield_mean: meanfield.mean[i],
                meanfield_se: meanfield.se[i],
                gap: (run.estimate.mean[i] - meanfield.mean[i]).abs(),
                gap_se: paired.se[i],
            });
        }
    }
    Ok(rows)
}

/// Mean of `samples` idiosyncratic draws of team `team` (first coordinate).
pub fn idiosyncratic_mean(spec: &MftgSpec, team: usize, samples: usize, seed: u64) -> f64 {
    let arch = NoiseArchitecture::new(seed);
    let idio = &spec.noise().idiosyncratic[team];
    let mut rng = arch.stream(StreamKey::new(StreamKind::Auxiliary, team, 1, 0, 0));
    let total: f64 = (0..samples)
        .map(|_| idio.sample(&mut rng).first().copied().unwrap_or(0.0))
        .sum();
    total / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{enumerate_states, KernelBackend, DEFAULT_STATE_CAP};
    use crate::model::{build_drift_model, DriftParams};

    #[test]
    fn single_agents_give_a_dirac() {
        let spec = build_drift_model(DriftParams::plain(3, vec![0, 0], 0.9)).unwrap();
        let states = PopulationState {
            teams: vec![vec![2], vec![1]],
        };
        let joint = empirical_joint(&spec, &states, &[vec![0], vec![2]]).unwrap();
        let k = spec.joint_shape().encode(&[2, 1, 0, 2]);
        assert_eq!(joint.law().as_dirac(), Some(k));
        let doubled = PopulationState {
            teams: vec![vec![2, 2], vec![1, 1]],
        };
        assert_eq!(empirical_joint(&spec, &doubled, &[vec![0, 0], vec![2, 2]]).unwrap(), joint);
    }

    #[test]
    fn cross_tuples_match_brute_force() {
        let spec = build_drift_model(DriftParams::plain(2, vec![0, 0], 0.9)).unwrap();
        let states = PopulationState {
            teams: vec![vec![0, 1], vec![1, 1]],
        };
        let actions = vec![vec![1, 1], vec![0, 1]];
        let joint = empirical_joint(&spec, &states, &actions).unwrap();
        let shape = spec.joint_shape();
        let mut brute = vec![0.0; shape.len()];
        for j1 in 0..2 {
            for j2 in 0..2 {
                let k = shape.encode(&[states.teams[0][j1], states.teams[1][j2], actions[0][j1], actions[1][j2]]);
                brute[k] += 0.25;
            }
        }
        assert_eq!(joint.law().weights(), brute.as_slice());
        assert!(empirical_joint(&spec, &states, &[vec![1], vec![0, 1]]).is_err());
    }

    #[test]
    fn coordinated_population_reaches_the_target() {
        let spec = build_drift_model(DriftParams::plain(3, vec![0, 2], 0.9)).unwrap();
        let mu0 = FinitePmf::uniform(spec.state_shape().clone());
        let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
        let policy = Level0Policy::constant(&spec, &space, &[2, 1]).unwrap();
        let options = PopulationOptions {
            record_trajectories: true,
            agent_ids: None,
        };
        let run = simulate_population(&spec, &policy, &mu0, &[5, 4], &SimulationConfig::new(6, 3, 1), &options).unwrap();
        for r in run.trajectories.unwrap() {
            if r.time >= 1 {
                assert_eq!(r.state, if r.team == 0 { 2 } else { 1 });
            }
        }
    }
}
