//! Equilibrium search on the lifted game.
//!
//! Values are averaged over a finite mixture `η` of initial lifted states.
//! The exploitability of player `i` is its `η`-value under the profile
//! minus its `η`-value when best-responding; a profile is an
//! `η`-Nash equilibrium in expectation within tolerance when the total over
//! players is at most `2 m eps`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::{self, ActionGrid, LiftedGame, Level1Policy, Level1Profile, MixedAction, DEFAULT_DP_EPS};
use crate::reconstruction::ADMISSIBLE_TOLERANCE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[default]
    BestResponse,
    FictitiousPlay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Players update one after another, team 0 first, each seeing the
    /// updates made before it in the same round.
    #[default]
    RoundRobin,
    Simultaneous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumConfig {
    /// `(weight, state index)` pairs.
    pub eta: Vec<(f64, usize)>,
    pub max_iterations: usize,
    pub eps: f64,
    pub mode: SolverMode,
    pub update: UpdateOrder,
    pub grid: ActionGrid,
}

impl EquilibriumConfig {
    /// `η = δ_{state}` with default settings.
    pub fn local(state: usize) -> Self {
        Self {
            eta: vec![(1.0, state)],
            max_iterations: 50,
            eps: DEFAULT_DP_EPS,
            mode: SolverMode::BestResponse,
            update: UpdateOrder::RoundRobin,
            grid: ActionGrid::Vertices,
        }
    }

    fn validate(&self, states: usize) -> Result<()> {
        let total: f64 = self.eta.iter().map(|e| e.0).sum();
        if self.eta.is_empty() || self.eta.iter().any(|e| e.0 < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config("η weights must form a pmf".into()));
        }
        if self.eta.iter().any(|e| e.1 >= states) {
            return Err(Error::Config("η refers to a state outside the space".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    /// `Σ_k η_k v[s_k]`.
    pub fn average(&self, values: &[f64]) -> f64 {
        self.eta.iter().map(|&(w, s)| w * values[s]).sum()
    }

    /// Convergence threshold `2 m eps`.
    pub fn threshold(&self, players: usize) -> f64 {
        2.0 * players as f64 * self.eps
    }
}

/// Per-player gaps of a profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exploitability {
    /// `η`-values under the profile.
    pub values: Vec<f64>,
    /// `η`-values of the best responses.
    pub best_response_values: Vec<f64>,
    pub gaps: Vec<f64>,
    pub total: f64,
}

pub fn exploitability(game: &LiftedGame, profile: &Level1Profile, config: &EquilibriumConfig) -> Result<Exploitability> {
    config.validate(game.space().len())?;
    let table = lifted::policy_value_dp(game, profile, config.eps)?;
    let m = profile.players.len();
    let best: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let br = lifted::best_response(game, i, profile, config.grid, config.eps)?;
            Ok(config.average(&br.values))
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = table.values.iter().map(|v| config.average(v)).collect();
    let gaps: Vec<f64> = values.iter().zip(&best).map(|(v, b)| v - b).collect();
    Ok(Exploitability {
        total: gaps.iter().sum(),
        values,
        best_response_values: best,
        gaps,
    })
}

/// One solver iteration; iteration 0 is the initial profile.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub exploitability: Exploitability,
    pub max_residual: f64,
    pub profile: Level1Profile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    Repetition,
    IterationCap,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquilibriumTrace {
    pub entries: Vec<TraceEntry>,
    pub stop: StopReason,
    /// Whether the last profile meets the `2 m eps` threshold.
    pub converged: bool,
    /// Iteration with the smallest total exploitability.
    pub best_iteration: usize,
}

impl EquilibriumTrace {
    pub fn last(&self) -> &TraceEntry {
        self.entries.last().expect("trace holds the initial profile")
    }

    pub fn best(&self) -> &TraceEntry {
        &self.entries[self.best_iteration]
    }

    pub fn initial(&self) -> &TraceEntry {
        &self.entries[0]
    }
}

fn record(game: &LiftedGame, profile: &Level1Profile, config: &EquilibriumConfig, iteration: usize) -> Result<TraceEntry> {
    let max_residual = profile.max_residual(game.space())?;
    if max_residual > ADMISSIBLE_TOLERANCE {
        return Err(Error::NotAdmissible {
            player: 0,
            state: 0,
            residual: max_residual,
        });
    }
    Ok(TraceEntry {
        iteration,
        exploitability: exploitability(game, profile, config)?,
        max_residual,
        profile: profile.clone(),
    })
}

fn finish(entries: Vec<TraceEntry>, stop: StopReason, threshold: f64) -> EquilibriumTrace {
    let best_iteration = entries
        .iter()
        .enumerate()
        .fold(0, |best, (k, e)| {
            if e.exploitability.total < entries[best].exploitability.total {
                k
            } else {
                best
            }
        });
    let converged = entries.last().unwrap().exploitability.total <= threshold;
    EquilibriumTrace {
        entries,
        stop,
        converged,
        best_iteration,
    }
}

/// Iterated best responses, stopping on convergence, on a repeated
/// profile, or at the iteration cap.
pub fn best_response_dynamics(
    game: &LiftedGame,
    init: &Level1Profile,
    config: &EquilibriumConfig,
) -> Result<EquilibriumTrace> {
    config.validate(game.space().len())?;
    let threshold = config.threshold(init.players.len());
    let mut profile = init.clone();
    let mut entries = vec![record(game, &profile, config, 0)?];
    if entries[0].exploitability.total <= threshold {
        return Ok(finish(entries, StopReason::Converged, threshold));
    }
    for iteration in 1..=config.max_iterations {
        match config.update {
            UpdateOrder::RoundRobin => {
                for i in 0..profile.players.len() {
                    profile.players[i] = lifted::best_response(game, i, &profile, config.grid, config.eps)?.policy;
                }
            }
            UpdateOrder::Simultaneous => {
                let frozen = profile.clone();
                profile.players = (0..frozen.players.len())
                    .into_par_iter()
                    .map(|i| Ok(lifted::best_response(game, i, &frozen, config.grid, config.eps)?.policy))
                    .collect::<Result<_>>()?;
            }
        }
        let entry = record(game, &profile, config, iteration)?;
        let total = entry.exploitability.total;
        let repeated = entries.iter().any(|e| e.profile == profile);
        entries.push(entry);
        if total <= threshold {
            return Ok(finish(entries, StopReason::Converged, threshold));
        }
        if repeated {
            return Ok(finish(entries, StopReason::Repetition, threshold));
        }
    }
    Ok(finish(entries, StopReason::IterationCap, threshold))
}

/// Fictitious play on action laws: at iteration `t` every player's action
/// at every state moves to `(1 − 1/(t+1)) â + 1/(t+1) BR`, the initial
/// profile counting as the first sample. Requires pure policies.
pub fn fictitious_play(game: &LiftedGame, init: &Level1Profile, config: &EquilibriumConfig) -> Result<EquilibriumTrace> {
    config.validate(game.space().len())?;
    if init.players.iter().any(|p| p.actions.iter().any(|a| a.as_pure().is_none())) {
        return Err(Error::Config("fictitious play starts from a pure profile".into()));
    }
    let threshold = config.threshold(init.players.len());
    let mut profile = init.clone();
    let mut entries = vec![record(game, &profile, config, 0)?];
    if entries[0].exploitability.total <= threshold {
        return Ok(finish(entries, StopReason::Converged, threshold));
    }
    for iteration in 1..=config.max_iterations {
        let step = 1.0 / (iteration + 1) as f64;
        let responses: Vec<Level1Policy> = (0..profile.players.len())
            .into_par_iter()
            .map(|i| Ok(lifted::best_response(game, i, &profile, config.grid, config.eps)?.policy))
            .collect::<Result<_>>()?;
        for (policy, response) in profile.players.iter_mut().zip(responses) {
            for (action, target) in policy.actions.iter_mut().zip(response.actions) {
                let current = action.as_pure().expect("pure");
                let target = target.as_pure().expect("pure");
                if current != target {
                    *action = MixedAction::pure(current.blend(target, step)?);
                }
            }
        }
        let entry = record(game, &profile, config, iteration)?;
        let total = entry.exploitability.total;
        entries.push(entry);
        if total <= threshold {
            return Ok(finish(entries, StopReason::Converged, threshold));
        }
    }
    Ok(finish(entries, StopReason::IterationCap, threshold))
}

/// Re-best-response check of a profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Per player, `η`-value under the profile minus the best-response
    /// `η`-value.
    pub value_changes: Vec<f64>,
    pub passed: bool,
}

/// Recomputes every player's best response and checks that none improves
/// its `η`-value by more than `2 eps`.
pub fn certify(game: &LiftedGame, profile: &Level1Profile, config: &EquilibriumConfig) -> Result<Certificate> {
    let e = exploitability(game, profile, config)?;
    let passed = e.gaps.iter().all(|g| *g <= 2.0 * config.eps);
    Ok(Certificate {
        value_changes: e.gaps,
        passed,
    })
}

/// Every pure vertex policy of a single player, for exhaustive checks on
/// tiny instances. Fails above `limit` policies.
pub fn enumerate_vertex_policies(game: &LiftedGame, player: usize, limit: usize) -> Result<Vec<Level1Policy>> {
    let spec = game.spec();
    let space = game.space();
    let actions = spec.team(player).actions;
    let count = actions.checked_pow(space.len() as u32).filter(|&c| c <= limit);
    let count = count.ok_or(Error::TooLarge(limit))?;
    Ok((0..count)
        .map(|mut k| {
            Level1Policy::pure(
                space
                    .states()
                    .iter()
                    .map(|mu| {
                        let a = k % actions;
                        k /= actions;
                        crate::reconstruction::TeamStateActionLaw::vertex(mu, actions, a)
                    })
                    .collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{enumerate_states, KernelBackend, DEFAULT_STATE_CAP};
    use crate::model::{build_drift_model, DriftParams};
    use crate::prob::FinitePmf;

    #[test]
    fn single_team_converges_immediately() {
        let spec = build_drift_model(DriftParams::plain(2, vec![1], 0.9)).unwrap();
        let mu0 = FinitePmf::uniform(spec.state_shape().clone());
        let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
        let game = LiftedGame::new(&spec, &space, KernelBackend::Quadrature);
        let init = Level1Profile {
            players: vec![Level1Policy::constant_vertex(&spec, &space, 0, 0)],
        };
        let config = EquilibriumConfig::local(0);
        let trace = best_response_dynamics(&game, &init, &config).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.entries.len(), 2);
        assert!(certify(&game, &trace.last().profile, &config).unwrap().passed);
    }

    #[test]
    fn fixed_point_is_unchanged_by_fictitious_play() {
        let spec = build_drift_model(DriftParams::plain(2, vec![1], 0.9)).unwrap();
        let mu0 = FinitePmf::uniform(spec.state_shape().clone());
        let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
        let game = LiftedGame::new(&spec, &space, KernelBackend::Quadrature);
        let optimal = Level1Profile {
            players: vec![Level1Policy::constant_vertex(&spec, &space, 0, 1)],
        };
        let trace = fictitious_play(&game, &optimal, &EquilibriumConfig::local(0)).unwrap();
        assert_eq!(trace.last().profile, optimal);
    }

    #[test]
    fn invalid_eta_is_rejected() {
        let spec = build_drift_model(DriftParams::plain(2, vec![1], 0.9)).unwrap();
        let mu0 = FinitePmf::uniform(spec.state_shape().clone());
        let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
        let game = LiftedGame::new(&spec, &space, KernelBackend::Quadrature);
        let init = Level1Profile {
            players: vec![Level1Policy::constant_vertex(&spec, &space, 0, 0)],
        };
        let mut config = EquilibriumConfig::local(0);
        config.eta = vec![(0.5, 0)];
        assert!(exploitability(&game, &init, &config).is_err());
        config.eta = vec![(1.0, 99)];
        assert!(exploitability(&game, &init, &config).is_err());
    }
}
