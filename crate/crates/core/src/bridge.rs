//! Level-0 closed-loop policies and their level-1 counterparts.
//!
//! A [`Level0Policy`] gives each team an action law for every own state,
//! lifted state and randomization slot; the team-level randomization picks
//! the slot. Lifting turns the slot law into a finite mixture of admissible
//! level-1 actions, lowering goes back by disintegrating each component's
//! own-state/own-action marginal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::{self, KernelBackend, LiftedGame, LiftedStateSpace, Level1Policy, Level1Profile, MixedAction};
use crate::model::{MftgSpec, NoiseArchitecture, StreamKey, StreamKind};
use crate::population::{self, MeanFieldRun, SimulationConfig};
use crate::prob::{self, FinitePmf, KernelMatrix, ProductShape};
use crate::reconstruction::{admissible, TeamStateActionLaw};

/// Policy of one team: `table[state][slot][x]` is the action law at own
/// state `x` when the lifted state is `state` and the slot is `slot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamLevel0Policy {
    pub slot_weights: Vec<f64>,
    pub table: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TeamLevel0Policy {
    pub fn slots(&self) -> usize {
        self.slot_weights.len()
    }

    pub fn action_law(&self, state: usize, slot: usize, x: usize) -> &[f64] {
        &self.table[state][slot][x]
    }

    /// Slot selected by the team randomization `u ∈ [0, 1)`.
    pub fn slot_for(&self, u: f64) -> usize {
        prob::inverse_cdf_index(&self.slot_weights, u)
    }
}

/// A stationary level-0 policy profile over an enumerated lifted space.
#[derive(Clone, Debug)]
pub struct Level0Policy {
    space: LiftedStateSpace,
    teams: Vec<TeamLevel0Policy>,
}

/// Serialized form of a [`Level0Policy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level0PolicyFile {
    pub states: Vec<Vec<f64>>,
    pub teams: Vec<TeamLevel0Policy>,
}

impl Level0Policy {
    pub fn new(spec: &MftgSpec, space: LiftedStateSpace, teams: Vec<TeamLevel0Policy>) -> Result<Self> {
        if teams.len() != spec.team_count() {
            return Err(Error::DimensionMismatch {
                expected: spec.team_count(),
                found: teams.len(),
            });
        }
        for (i, team) in teams.iter().enumerate() {
            FinitePmf::from_weights(team.slot_weights.clone())?;
            if team.table.len() != space.len() {
                return Err(Error::DimensionMismatch {
                    expected: space.len(),
                    found: team.table.len(),
                });
            }
            for per_slot in &team.table {
                if per_slot.len() != team.slots() {
                    return Err(Error::DimensionMismatch {
                        expected: team.slots(),
                        found: per_slot.len(),
                    });
                }
                for per_x in per_slot {
                    if per_x.len() != spec.team(i).states {
                        return Err(Error::DimensionMismatch {
                            expected: spec.team(i).states,
                            found: per_x.len(),
                        });
                    }
                    for law in per_x {
                        if law.len() != spec.team(i).actions {
                            return Err(Error::DimensionMismatch {
                                expected: spec.team(i).actions,
                                found: law.len(),
                            });
                        }
                        FinitePmf::with_tolerance(ProductShape::flat(law.len()), law.clone(), 1e-9)?;
                    }
                }
            }
        }
        Ok(Self { space, teams })
    }

    /// Random action laws (flat Dirichlet) with `slots` equally likely
    /// slots, drawn from the auxiliary stream of `seed`.
    pub fn random(spec: &MftgSpec, space: &LiftedStateSpace, slots: usize, seed: u64) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Config("at least one randomization slot is required".into()));
        }
        let arch = NoiseArchitecture::new(seed);
        let teams = (0..spec.team_count())
            .map(|i| {
                let mut rng = arch.stream(StreamKey::new(StreamKind::Auxiliary, i, 0, 0, 0));
                let table = (0..space.len())
                    .map(|_| {
                        (0..slots)
                            .map(|_| {
                                (0..spec.team(i).states)
                                    .map(|_| {
                                        let raw: Vec<f64> = (0..spec.team(i).actions)
                                            .map(|_| -(1.0 - rng.random::<f64>()).ln())
                                            .collect();
                                        let total: f64 = raw.iter().sum();
                                        raw.into_iter().map(|w| w / total).collect()
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                TeamLevel0Policy {
                    slot_weights: vec![1.0 / slots as f64; slots],
                    table,
                }
            })
            .collect();
        Self::new(spec, space.clone(), teams)
    }

    /// Every agent of team `i` plays `actions[i]`, whatever happens.
    pub fn constant(spec: &MftgSpec, space: &LiftedStateSpace, actions: &[usize]) -> Result<Self> {
        let teams = (0..spec.team_count())
            .map(|i| {
                let mut law = vec![0.0; spec.team(i).actions];
                law[actions[i]] = 1.0;
                TeamLevel0Policy {
                    slot_weights: vec![1.0],
                    table: vec![vec![vec![law; spec.team(i).states]]; space.len()],
                }
            })
            .collect();
        Self::new(spec, space.clone(), teams)
    }

    pub fn space(&self) -> &LiftedStateSpace {
        &self.space
    }

    pub fn teams(&self) -> &[TeamLevel0Policy] {
        &self.teams
    }

    pub fn team(&self, i: usize) -> &TeamLevel0Policy {
        &self.teams[i]
    }

    /// Table row used at `mu`: the exact match if enumerated, otherwise
    /// the nearest state in L1 distance. Returns the index and distance.
    pub fn lookup(&self, mu: &FinitePmf) -> Result<(usize, f64)> {
        self.space.locate_nearest(mu).ok_or(Error::EmptyProduct)
    }

    pub fn to_file(&self) -> Level0PolicyFile {
        Level0PolicyFile {
            states: self.space.states().iter().map(|s| s.weights().to_vec()).collect(),
            teams: self.teams.clone(),
        }
    }

    pub fn from_file(spec: &MftgSpec, file: &Level0PolicyFile) -> Result<Self> {
        let states = file
            .states
            .iter()
            .map(|w| FinitePmf::new(spec.state_shape().clone(), w.clone()))
            .collect::<Result<Vec<_>>>()?;
        let space = LiftedStateSpace::from_states(spec.state_shape().clone(), states)?;
        Self::new(spec, space, file.teams.clone())
    }

    /// `μ(dx̲) π^i(x^i, μ, r)(da^i)` for the policy row `state`.
    pub fn team_action(&self, team: usize, mu: &FinitePmf, state: usize, slot: usize) -> Result<TeamStateActionLaw> {
        let shape = mu.shape();
        let mut coords = vec![0; shape.rank()];
        let rows: Vec<Vec<f64>> = (0..shape.len())
            .map(|js| {
                shape.decode_into(js, &mut coords);
                self.teams[team].action_law(state, slot, coords[team]).to_vec()
            })
            .collect();
        TeamStateActionLaw::from_kernel(mu, &rows)
    }
}

/// The level-1 mixed profile corresponding to `level0`: at every state,
/// the slot law pushed through `r ↦ μ ⊗ π^i(·, μ, r)`, with identical
/// components merged.
pub fn lift_policy(level0: &Level0Policy) -> Result<Level1Profile> {
    let space = level0.space();
    let players = (0..level0.teams.len())
        .map(|i| {
            let team = &level0.teams[i];
            let actions = (0..space.len())
                .map(|s| {
                    let mu = space.state(s);
                    let mut components: Vec<(f64, TeamStateActionLaw)> = Vec::new();
                    for r in 0..team.slots() {
                        let w = team.slot_weights[r];
                        if w <= 0.0 {
                            continue;
                        }
                        let law = level0.team_action(i, mu, s, r)?;
                        match components.iter_mut().find(|(_, l)| *l == law) {
                            Some(c) => c.0 += w,
                            None => components.push((w, law)),
                        }
                    }
                    MixedAction::new(components)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Level1Policy { actions })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Level1Profile { players })
}

/// Breakpoints of the common refinement of the cumulative mixture weights
/// of all states.
fn refine_slots(policy: &Level1Policy) -> Vec<f64> {
    let mut cuts: Vec<f64> = vec![0.0, 1.0];
    for action in &policy.actions {
        let mut acc = 0.0;
        for (w, _) in action.components() {
            acc += w;
            if acc < 1.0 - 1e-15 {
                cuts.push(acc);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15);
    cuts
}

/// Component of `action` covering the point `t ∈ [0, 1)`.
fn component_at(action: &MixedAction, t: f64) -> usize {
    let mut acc = 0.0;
    for (k, (w, _)) in action.components().iter().enumerate() {
        acc += w;
        if t < acc {
            return k;
        }
    }
    action.components().len() - 1
}

/// A level-0 policy realizing `level1`: slots are the cells of the common
/// refinement of all per-state mixture weights (one cell per component when
/// the weights agree across states), and slot `r` at `μ` plays the
/// disintegration of component `r`'s own-state/own-action marginal, with
/// uniform rows where the own state carries no mass.
pub fn lower_policy(spec: &MftgSpec, space: &LiftedStateSpace, level1: &Level1Profile) -> Result<Level0Policy> {
    let teams = level1
        .players
        .iter()
        .enumerate()
        .map(|(i, policy)| {
            let cuts = refine_slots(policy);
            let slot_weights: Vec<f64> = cuts.windows(2).map(|c| c[1] - c[0]).collect();
            let states = spec.team(i).states;
            let actions = spec.team(i).actions;
            let table = policy
                .actions
                .iter()
                .map(|action| {
                    cuts.windows(2)
                        .map(|c| {
                            let midpoint = 0.5 * (c[0] + c[1]);
                            let (_, law) = &action.components()[component_at(action, midpoint)];
                            let own = FinitePmf::with_tolerance(
                                ProductShape::new(vec![states, actions])?,
                                law.own_state_action_marginal(i),
                                1e-9,
                            )?;
                            let (_, kernel) = prob::disintegrate(&own, 1)?;
                            Ok(uniform_rows(kernel))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TeamLevel0Policy {
                slot_weights: FinitePmf::normalized(ProductShape::flat(slot_weights.len()), slot_weights)?
                    .weights()
                    .to_vec(),
                table,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Level0Policy::new(spec, space.clone(), teams)
}

fn uniform_rows(kernel: KernelMatrix) -> Vec<Vec<f64>> {
    kernel
        .fill_uniform()
        .rows()
        .iter()
        .map(|r| r.clone().expect("filled"))
        .collect()
}

/// Parameters of the value-equivalence harness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub simulation: SimulationConfig,
    pub backend: KernelBackend,
    pub eps: f64,
}

/// Value comparison for one team.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamComparison {
    pub team: usize,
    pub level0_mean: f64,
    pub level0_se: f64,
    pub level1_value: f64,
    pub difference: f64,
    /// `3 SE + truncation bound + 2 eps`.
    pub bound: f64,
    pub within_bound: bool,
}

/// Admissibility of a lifted component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub team: usize,
    pub state: usize,
    pub slot: usize,
    pub residual: f64,
}

/// Outcome of [`equivalence_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    pub backend: String,
    pub horizon: usize,
    pub truncation_bound: f64,
    pub replications: usize,
    pub eps: f64,
    pub residuals: Vec<ResidualEntry>,
    pub max_residual: f64,
    pub comparisons: Vec<TeamComparison>,
    /// Largest gap between the tracked joint law and `Ξ` of the tracked
    /// marginals over all simulated steps.
    pub reconstruction_residual: f64,
    /// Largest L1 distance between a tracked lifted state and the policy
    /// row used for it.
    pub lookup_distance: f64,
}

impl CorrespondenceReport {
    pub fn all_within_bounds(&self) -> bool {
        self.comparisons.iter().all(|c| c.within_bound)
    }
}

/// Compares the level-0 mean-field value of `level0` (Monte Carlo with
/// exactly tracked laws) with the DP value of its lift at `mu0`.
pub fn equivalence_check(
    spec: &MftgSpec,
    level0: &Level0Policy,
    mu0: &FinitePmf,
    config: &EquivalenceConfig,
) -> Result<CorrespondenceReport> {
    let continuous = spec.drift().is_some();
    if continuous && config.backend == KernelBackend::ClosedForm {
        return Err(Error::BackendMismatch(
            "level-0 dynamics realize the perturbed-mean law; compare against the quadrature or Monte Carlo kernel".into(),
        ));
    }
    let space = level0.space();
    let start = space.locate(mu0).ok_or(Error::OffSpaceSuccessor)?;
    let level1 = lift_policy(level0)?;

    let mut residuals = Vec::new();
    for (i, team) in level0.teams().iter().enumerate() {
        for s in 0..space.len() {
            for r in 0..team.slots() {
                let law = level0.team_action(i, space.state(s), s, r)?;
                residuals.push(ResidualEntry {
                    team: i,
                    state: s,
                    slot: r,
                    residual: admissible(space.state(s), &law)?.residual,
                });
            }
        }
    }
    let max_residual = residuals.iter().map(|r| r.residual).fold(0.0, f64::max);

    let game = LiftedGame::new(spec, space, config.backend);
    let table = lifted::policy_value_dp(&game, &level1, config.eps)?;
    let run: MeanFieldRun = population::simulate_meanfield_level0(spec, level0, mu0, &config.simulation)?;
    let est = &run.estimate;
    let comparisons = (0..spec.team_count())
        .map(|i| {
            let difference = (est.mean[i] - table.values[i][start]).abs();
            let bound = 3.0 * est.se[i] + est.truncation_bound + 2.0 * config.eps;
            TeamComparison {
                team: i,
                level0_mean: est.mean[i],
                level0_se: est.se[i],
                level1_value: table.values[i][start],
                difference,
                bound,
                within_bound: difference <= bound,
            }
        })
        .collect();
    Ok(CorrespondenceReport {
        backend: config.backend.name().to_string(),
        horizon: est.horizon,
        truncation_bound: est.truncation_bound,
        replications: est.reps,
        eps: config.eps,
        residuals,
        max_residual,
        comparisons,
        reconstruction_residual: run.reconstruction_residual,
        lookup_distance: run.lookup_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{enumerate_states, DEFAULT_STATE_CAP};
    use crate::model::{build_drift_model, DriftParams};

    fn setup() -> (MftgSpec, LiftedStateSpace) {
        let spec = build_drift_model(DriftParams::plain(2, vec![0, 1], 0.9)).unwrap();
        let mu0 = FinitePmf::uniform(spec.state_shape().clone());
        let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
        (spec, space)
    }

    #[test]
    fn single_slot_lifts_to_pure_actions() {
        let (spec, space) = setup();
        let policy = Level0Policy::random(&spec, &space, 1, 7).unwrap();
        let lifted = lift_policy(&policy).unwrap();
        for p in &lifted.players {
            assert!(p.actions.iter().all(|a| a.as_pure().is_some()));
        }
    }

    #[test]
    fn state_blind_policy_lifts_to_products() {
        let (spec, space) = setup();
        let policy = Level0Policy::constant(&spec, &space, &[1, 0]).unwrap();
        let lifted = lift_policy(&policy).unwrap();
        for (s, mu) in space.states().iter().enumerate() {
            let law = lifted.players[0].actions[s].as_pure().unwrap();
            assert_eq!(law, &TeamStateActionLaw::product(mu, &[0.0, 1.0]).unwrap());
        }
    }

    #[test]
    fn lifted_components_are_admissible() {
        let (spec, space) = setup();
        let policy = Level0Policy::random(&spec, &space, 3, 11).unwrap();
        let lifted = lift_policy(&policy).unwrap();
        assert!(lifted.max_residual(&space).unwrap() <= 1e-15);
    }

    #[test]
    fn round_trip_preserves_own_marginals() {
        let (spec, space) = setup();
        let policy = Level0Policy::random(&spec, &space, 2, 5).unwrap();
        let lifted = lift_policy(&policy).unwrap();
        let again = lift_policy(&lower_policy(&spec, &space, &lifted).unwrap()).unwrap();
        for i in 0..2 {
            for s in 0..space.len() {
                let a = lifted.players[i].actions[s].components();
                let b = again.players[i].actions[s].components();
                assert_eq!(a.len(), b.len());
                for ((wa, la), (wb, lb)) in a.iter().zip(b) {
                    assert!((wa - wb).abs() <= 1e-12);
                    let (ma, mb) = (la.own_state_action_marginal(i), lb.own_state_action_marginal(i));
                    assert!(ma.iter().zip(&mb).all(|(x, y)| (x - y).abs() <= 1e-12));
                }
            }
        }
    }

    #[test]
    fn lowering_keeps_only_own_state_information() {
        let (spec, _) = setup();
        let shape = spec.state_shape().clone();
        let mu = FinitePmf::uniform(shape.clone());
        let space = LiftedStateSpace::from_states(shape, vec![mu.clone()]).unwrap();
        // Team 0 plays action 1 only at joint state (0, 1): the kernel
        // depends on team 1's state as well.
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let law = TeamStateActionLaw::from_kernel(&mu, &rows).unwrap();
        let profile = Level1Profile {
            players: vec![
                Level1Policy::pure(vec![law]),
                Level1Policy::pure(vec![TeamStateActionLaw::vertex(&mu, 2, 0)]),
            ],
        };
        let lowered = lower_policy(&spec, &space, &profile).unwrap();
        assert_eq!(lowered.team(0).action_law(0, 0, 0), &[0.5, 0.5]);
        assert_eq!(lowered.team(0).action_law(0, 0, 1), &[1.0, 0.0]);
    }

    #[test]
    fn mismatched_slot_weights_are_refined() {
        let (spec, _) = setup();
        let shape = spec.state_shape().clone();
        let a = FinitePmf::dirac(shape.clone(), 0);
        let b = FinitePmf::dirac(shape.clone(), 3);
        let space = LiftedStateSpace::from_states(shape, vec![a.clone(), b.clone()]).unwrap();
        let mixed = |mu: &FinitePmf, w: f64| {
            MixedAction::new(vec![
                (w, TeamStateActionLaw::vertex(mu, 2, 0)),
                (1.0 - w, TeamStateActionLaw::vertex(mu, 2, 1)),
            ])
            .unwrap()
        };
        let profile = Level1Profile {
            players: vec![
                Level1Policy {
                    actions: vec![mixed(&a, 0.25), mixed(&b, 0.5)],
                },
                Level1Policy::pure(vec![TeamStateActionLaw::vertex(&a, 2, 0), TeamStateActionLaw::vertex(&b, 2, 0)]),
            ],
        };
        let lowered = lower_policy(&spec, &space, &profile).unwrap();
        assert_eq!(lowered.team(0).slot_weights, vec![0.25, 0.25, 0.5]);
        let lifted = lift_policy(&lowered).unwrap();
        for s in 0..2 {
            let original = profile.players[0].actions[s].components();
            let back = lifted.players[0].actions[s].components();
            assert_eq!(original.len(), back.len());
            for ((wa, la), (wb, lb)) in original.iter().zip(back) {
                assert!((wa - wb).abs() < 1e-15);
                assert_eq!(la, lb);
            }
        }
    }

    #[test]
    fn closed_form_backend_is_rejected_for_drift() {
        let (spec, space) = setup();
        let policy = Level0Policy::random(&spec, &space, 1, 1).unwrap();
        let config = EquivalenceConfig {
            simulation: SimulationConfig::new(10, 1, 0),
            backend: KernelBackend::ClosedForm,
            eps: 1e-8,
        };
        assert!(matches!(
            equivalence_check(&spec, &policy, space.state(0), &config),
            Err(Error::BackendMismatch(_))
        ));
    }

    #[test]
    fn policy_file_round_trip() {
        let (spec, space) = setup();
        let policy = Level0Policy::random(&spec, &space, 2, 3).unwrap();
        let text = serde_json::to_string(&policy.to_file()).unwrap();
        let file: Level0PolicyFile = serde_json::from_str(&text).unwrap();
        let back = Level0Policy::from_file(&spec, &file).unwrap();
        assert_eq!(back.teams(), policy.teams());
        assert_eq!(back.space().states(), policy.space().states());
    }
}
