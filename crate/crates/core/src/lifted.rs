//! The lifted mean field Markov game.
//!
//! States are joint laws `μ` of team states, enumerated into a finite
//! [`LiftedStateSpace`]. Player `i` acts with a [`TeamStateActionLaw`]
//! whose state marginal is `μ`; the transition to the next lifted state is
//! the push-forward of `Ξ^μ[â̲] ⊗ ν̲` through the system function, taken
//! under the law of the common noise. Three ways of computing that law are
//! offered by [`KernelBackend`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_common_noise, CommonNoise, CommonSampler, DriftParams, DriftVariant, MftgSpec, NoiseArchitecture};
use crate::prob::{self, FinitePmf, ProductShape};
use crate::reconstruction::{self, reconstruct_xi, JointLaw, TeamStateActionLaw, ADMISSIBLE_TOLERANCE};

pub const DEFAULT_STATE_CAP: usize = 10_000;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const DEFAULT_DP_EPS: f64 = 1e-8;

/// Resolution of the lookup key: weights are compared after rounding to
/// this many units per unit mass.
const KEY_SCALE: f64 = 1e10;

fn state_key(pmf: &FinitePmf) -> Vec<i64> {
    pmf.weights().iter().map(|w| (w * KEY_SCALE).round() as i64).collect()
}

/// An ordered finite set of lifted states with an index map.
#[derive(Clone, Debug)]
pub struct LiftedStateSpace {
    shape: ProductShape,
    states: Vec<FinitePmf>,
    index: HashMap<Vec<i64>, usize>,
    cap: usize,
}

impl LiftedStateSpace {
    pub fn new(shape: ProductShape, cap: usize) -> Self {
        Self {
            shape,
            states: Vec::new(),
            index: HashMap::new(),
            cap,
        }
    }

    pub fn from_states(shape: ProductShape, states: Vec<FinitePmf>) -> Result<Self> {
        let mut space = Self::new(shape, DEFAULT_STATE_CAP.max(states.len()));
        for s in states {
            space.insert(s)?;
        }
        Ok(space)
    }

    pub fn shape(&self) -> &ProductShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[FinitePmf] {
        &self.states
    }

    pub fn state(&self, index: usize) -> &FinitePmf {
        &self.states[index]
    }

    /// Index of `mu`, matched to `1e-10` per weight.
    pub fn locate(&self, mu: &FinitePmf) -> Option<usize> {
        self.index.get(&state_key(mu)).copied()
    }

    /// Closest state in L1 distance (lowest index on ties).
    pub fn locate_nearest(&self, mu: &FinitePmf) -> Option<(usize, f64)> {
        if let Some(i) = self.locate(mu) {
            return Some((i, 0.0));
        }
        self.states
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.l1_distance(mu)))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            })
    }

    /// Inserts `mu` if absent; returns its index and whether it was new.
    pub fn insert(&mut self, mu: FinitePmf) -> Result<(usize, bool)> {
        if mu.shape() != &self.shape {
            return Err(Error::DimensionMismatch {
                expected: self.shape.len(),
                found: mu.len(),
            });
        }
        let key = state_key(&mu);
        if let Some(&i) = self.index.get(&key) {
            return Ok((i, false));
        }
        if self.states.len() >= self.cap {
            return Err(Error::StateExplosion(self.cap));
        }
        let i = self.states.len();
        self.index.insert(key, i);
        self.states.push(mu);
        Ok((i, true))
    }
}

/// How the lifted transition law is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelBackend {
    /// Product of the teams' action marginals (drift models only).
    ClosedForm,
    /// Perturbed mean of the joint action marginal by quadrature (drift
    /// models only). Finite-noise models are enumerated exactly under
    /// either exact backend.
    #[default]
    Quadrature,
    /// Empirical law over sampled common noises.
    MonteCarlo { samples: usize, seed: u64 },
}

impl KernelBackend {
    pub fn name(&self) -> &'static str {
        match self {
            KernelBackend::ClosedForm => "closed_form",
            KernelBackend::Quadrature => "quadrature",
            KernelBackend::MonteCarlo { .. } => "mc",
        }
    }

    /// Parses `closed_form`, `quadrature` or `mc`.
    pub fn parse(name: &str, samples: usize, seed: u64) -> Result<Self> {
        match name {
            "closed_form" => Ok(KernelBackend::ClosedForm),
            "quadrature" => Ok(KernelBackend::Quadrature),
            "mc" => Ok(KernelBackend::MonteCarlo { samples, seed }),
            other => Err(Error::Config(format!("unknown kernel backend {other:?}"))),
        }
    }
}

/// A law over lifted states: distinct successors with their probabilities,
/// sorted by lookup key.
pub type Successors = Vec<(FinitePmf, f64)>;

fn merge_successors(items: impl IntoIterator<Item = (FinitePmf, f64)>) -> Successors {
    let mut merged: BTreeMap<Vec<i64>, (FinitePmf, f64)> = BTreeMap::new();
    for (mu, p) in items {
        if p <= 0.0 {
            continue;
        }
        merged
            .entry(state_key(&mu))
            .and_modify(|e| e.1 += p)
            .or_insert((mu, p));
    }
    merged.into_values().collect()
}

/// `F̄(μ, â̲, ε⁰)`: the exact law of the next joint state when `ā` is
/// pushed through the system function together with the idiosyncratic
/// noises, for one fixed common noise.
pub fn pushforward(spec: &MftgSpec, bar_a: &JointLaw, common: &CommonNoise) -> Result<FinitePmf> {
    let m = spec.team_count();
    let state_shape = spec.state_shape();
    let joint = spec.joint_shape();
    let step = spec.dynamics().bind_transition(bar_a, common);
    let idio = &spec.noise().idiosyncratic;
    let mut cache: Vec<Vec<Option<Vec<(usize, f64)>>>> = spec
        .teams()
        .iter()
        .map(|t| vec![None; t.states * t.actions])
        .collect();
    let mut out = vec![0.0; state_shape.len()];
    let mut coords = vec![0; 2 * m];
    let mut next = vec![0; m];
    for idx in bar_a.law().support() {
        let p = bar_a.law().weight(idx);
        joint.decode_into(idx, &mut coords);
        for i in 0..m {
            let (x, a) = (coords[i], coords[m + i]);
            let slot = x * spec.team(i).actions + a;
            if cache[i][slot].is_none() {
                let mut moves: Vec<(usize, f64)> = Vec::new();
                for (k, value) in idio[i].values.iter().enumerate() {
                    let q = idio[i].law.weight(k);
                    if q <= 0.0 {
                        continue;
                    }
                    let y = step(i, x, a, value);
                    if y >= spec.team(i).states {
                        return Err(Error::InvalidModel(format!("team {i} moved to state {y} outside its state set")));
                    }
                    match moves.iter_mut().find(|(s, _)| *s == y) {
                        Some(entry) => entry.1 += q,
                        None => moves.push((y, q)),
                    }
                }
                cache[i][slot] = Some(moves);
            }
        }
        // Odometer over the product of the teams' move lists.
        let lists: Vec<&Vec<(usize, f64)>> = (0..m)
            .map(|i| cache[i][coords[i] * spec.team(i).actions + coords[m + i]].as_ref().unwrap())
            .collect();
        let mut pos = vec![0usize; m];
        'product: loop {
            let mut q = p;
            for i in 0..m {
                let (y, w) = lists[i][pos[i]];
                next[i] = y;
                q *= w;
            }
            out[state_shape.encode(&next)] += q;
            let mut i = m;
            loop {
                if i == 0 {
                    break 'product;
                }
                i -= 1;
                pos[i] += 1;
                if pos[i] < lists[i].len() {
                    break;
                }
                pos[i] = 0;
            }
        }
    }
    FinitePmf::with_tolerance(state_shape.clone(), out, 1e-9)
}

/// Every combination of finitely supported common noises with its weight.
fn enumerate_common_noise(spec: &MftgSpec) -> Result<Vec<(CommonNoise, f64)>> {
    let options = |sampler: &CommonSampler| -> Result<Vec<(Vec<f64>, f64)>> {
        match sampler {
            CommonSampler::None => Ok(vec![(Vec::new(), 1.0)]),
            CommonSampler::Finite(noise) => Ok(noise
                .values
                .iter()
                .cloned()
                .zip(noise.law.weights().iter().copied())
                .filter(|(_, w)| *w > 0.0)
                .collect()),
            CommonSampler::UniformExponentials { .. } => Err(Error::BackendMismatch(
                "continuous common noise needs the drift kernels or the Monte Carlo backend".into(),
            )),
        }
    };
    let mut combos = vec![(
        CommonNoise {
            global: Vec::new(),
            team: Vec::new(),
        },
        1.0,
    )];
    let global = options(&spec.noise().global)?;
    combos = combos
        .into_iter()
        .flat_map(|(c, w)| {
            global.iter().map(move |(g, q)| {
                (
                    CommonNoise {
                        global: g.clone(),
                        team: c.team.clone(),
                    },
                    w * q,
                )
            })
        })
        .collect();
    for sampler in &spec.noise().team_common {
        let opts = options(sampler)?;
        combos = combos
            .into_iter()
            .flat_map(|(c, w)| {
                opts.iter().map(move |(v, q)| {
                    let mut team = c.team.clone();
                    team.push(v.clone());
                    (
                        CommonNoise {
                            global: c.global.clone(),
                            team,
                        },
                        w * q,
                    )
                })
            })
            .collect();
    }
    Ok(combos)
}

fn has_continuous_noise(spec: &MftgSpec) -> bool {
    std::iter::once(&spec.noise().global)
        .chain(&spec.noise().team_common)
        .any(|s| matches!(s, CommonSampler::UniformExponentials { .. }))
}

/// Exact transition law of a model whose common noises are finite.
pub fn kernel_exact_finite(spec: &MftgSpec, mu: &FinitePmf, a_hats: &[TeamStateActionLaw]) -> Result<Successors> {
    let xi = reconstruct_xi(mu, a_hats)?;
    let combos = enumerate_common_noise(spec)?;
    let mut items = Vec::with_capacity(combos.len());
    for (common, w) in combos {
        items.push((pushforward(spec, &xi.joint, &common)?, w));
    }
    Ok(merge_successors(items))
}

/// Transition law estimated from `samples` common-noise draws of the
/// stream family seeded by `seed`.
pub fn kernel_pushforward_mc(
    spec: &MftgSpec,
    mu: &FinitePmf,
    a_hats: &[TeamStateActionLaw],
    samples: usize,
    seed: u64,
) -> Result<Successors> {
    if samples == 0 {
        return Err(Error::Config("at least one Monte Carlo sample is required".into()));
    }
    let xi = reconstruct_xi(mu, a_hats)?;
    let arch = NoiseArchitecture::new(seed);
    const CHUNK: usize = 4096;
    let chunks: Vec<Result<BTreeMap<Vec<i64>, (FinitePmf, u64)>>> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut counts: BTreeMap<Vec<i64>, (FinitePmf, u64)> = BTreeMap::new();
            for s in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let common = sample_common_noise(&arch, spec, 1, s as u64);
                let next = pushforward(spec, &xi.joint, &common)?;
                counts.entry(state_key(&next)).and_modify(|e| e.1 += 1).or_insert((next, 1));
            }
            Ok(counts)
        })
        .collect();
    let mut total: BTreeMap<Vec<i64>, (FinitePmf, u64)> = BTreeMap::new();
    for chunk in chunks {
        for (k, (mu, n)) in chunk? {
            total.entry(k).and_modify(|e| e.1 += n).or_insert((mu, n));
        }
    }
    Ok(total
        .into_values()
        .map(|(mu, n)| (mu, n as f64 / samples as f64))
        .collect())
}

/// Lifted state reached when the joint action outcome is `outcome`: the
/// Dirac mass there, or its smoothing by the idiosyncratic shifts.
pub fn drift_successor(params: &DriftParams, outcome: &[usize]) -> FinitePmf {
    let g = params.grid;
    let shape = ProductShape::new(vec![g; params.teams]).expect("validated drift shape");
    match (params.variant, params.idio_law) {
        (DriftVariant::PeriodicIdiosyncratic, Some(law)) => {
            let teams: Vec<FinitePmf> = outcome
                .iter()
                .map(|&a| {
                    let mut w = vec![0.0; g];
                    for (e, q) in [-1i64, 0, 1].iter().zip(law) {
                        w[(a as i64 + e).rem_euclid(g as i64) as usize] += q;
                    }
                    FinitePmf::with_tolerance(ProductShape::flat(g), w, 1e-9).expect("mean-zero law")
                })
                .collect();
            prob::product(&teams).expect("nonempty").reshaped(shape).expect("same size")
        }
        _ => FinitePmf::dirac(shape.clone(), shape.encode(outcome)),
    }
}

fn drift_params(spec: &MftgSpec) -> Result<&DriftParams> {
    spec.drift().ok_or(Error::NotDriftModel)
}

fn drift_row_from_outcomes(params: &DriftParams, outcome_law: &[f64]) -> Successors {
    let shape = ProductShape::new(vec![params.grid; params.teams]).expect("validated drift shape");
    merge_successors(
        outcome_law
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(k, &p)| (drift_successor(params, &shape.decode(k)), p)),
    )
}

/// Successor law `Π_i pr_{a^i}(â^i)(a^i)` over joint action outcomes.
pub fn kernel_drift_closed_form(spec: &MftgSpec, mu: &FinitePmf, a_hats: &[TeamStateActionLaw]) -> Result<Successors> {
    let params = drift_params(spec)?;
    let xi = reconstruct_xi(mu, a_hats)?;
    let marginals: Vec<FinitePmf> = (0..a_hats.len())
        .map(|i| xi.joint.team_marginal(i))
        .map(|a| FinitePmf::normalized(ProductShape::flat(a.action_count()), a.action_marginal()))
        .collect::<Result<_>>()?;
    let joint = prob::product(&marginals)?;
    Ok(drift_row_from_outcomes(params, joint.weights()))
}

/// Successor law `E[[Z⁰ w]]` with `w = pr_a(Ξ^μ[â̲])`, by quadrature.
pub fn kernel_drift_quadrature(spec: &MftgSpec, mu: &FinitePmf, a_hats: &[TeamStateActionLaw]) -> Result<Successors> {
    let params = drift_params(spec)?;
    let xi = reconstruct_xi(mu, a_hats)?;
    let w = xi.joint.action_marginal();
    let mean = prob::perturbed_mean_quadrature(&w)?;
    Ok(drift_row_from_outcomes(params, mean.weights()))
}

/// Transition law under `backend`.
pub fn successor_law(
    spec: &MftgSpec,
    mu: &FinitePmf,
    a_hats: &[TeamStateActionLaw],
    backend: KernelBackend,
) -> Result<Successors> {
    match backend {
        KernelBackend::MonteCarlo { samples, seed } => kernel_pushforward_mc(spec, mu, a_hats, samples, seed),
        _ if !has_continuous_noise(spec) => kernel_exact_finite(spec, mu, a_hats),
        KernelBackend::ClosedForm => kernel_drift_closed_form(spec, mu, a_hats),
        KernelBackend::Quadrature => kernel_drift_quadrature(spec, mu, a_hats),
    }
}

/// Largest entrywise gap between two successor laws.
pub fn successor_gap(a: &Successors, b: &Successors) -> f64 {
    let mut table: BTreeMap<Vec<i64>, (f64, f64)> = BTreeMap::new();
    for (mu, p) in a {
        table.entry(state_key(mu)).or_default().0 += p;
    }
    for (mu, p) in b {
        table.entry(state_key(mu)).or_default().1 += p;
    }
    table.values().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Probability that a successor law assigns to `target`.
pub fn successor_probability(row: &Successors, target: &FinitePmf) -> f64 {
    let key = state_key(target);
    row.iter().filter(|(mu, _)| state_key(mu) == key).map(|(_, p)| p).sum()
}

/// Density `q(μ′ | μ, â̲) = K · P(μ′) · 1{μ′ ∈ Λ}` of the drift kernel with
/// respect to the uniform law on the `K` possible successors `Λ`.
pub fn density_q(
    spec: &MftgSpec,
    backend: KernelBackend,
    mu_prime: &FinitePmf,
    mu: &FinitePmf,
    a_hats: &[TeamStateActionLaw],
) -> Result<f64> {
    let params = drift_params(spec)?;
    let k = params.joint_cardinality();
    let shape = ProductShape::new(vec![params.grid; params.teams])?;
    let key = state_key(mu_prime);
    let in_lambda = (0..k).any(|o| state_key(&drift_successor(params, &shape.decode(o))) == key);
    if !in_lambda {
        return Ok(0.0);
    }
    let row = successor_law(spec, mu, a_hats, backend)?;
    Ok(k as f64 * successor_probability(&row, mu_prime))
}

/// `f̂^i(μ, â̲) = Σ_{x, a} f^i(x, a, Ξ^μ[â̲]) pr_{(x^i, a)}(â^i)(x, a)`.
pub fn lift_cost(spec: &MftgSpec, team: usize, mu: &FinitePmf, a_hats: &[TeamStateActionLaw]) -> Result<f64> {
    Ok(lift_costs(spec, mu, a_hats)?[team])
}

/// Lifted costs of all players at once.
pub fn lift_costs(spec: &MftgSpec, mu: &FinitePmf, a_hats: &[TeamStateActionLaw]) -> Result<Vec<f64>> {
    let xi = reconstruct_xi(mu, a_hats)?;
    Ok(costs_against(spec, &xi.joint, a_hats))
}

fn costs_against(spec: &MftgSpec, joint: &JointLaw, a_hats: &[TeamStateActionLaw]) -> Vec<f64> {
    let cost = spec.dynamics().bind_cost(joint);
    a_hats
        .iter()
        .enumerate()
        .map(|(i, a_hat)| {
            let actions = a_hat.action_count();
            a_hat
                .own_state_action_marginal(i)
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(k, p)| p * cost(i, k / actions, k % actions))
                .sum()
        })
        .collect()
}

/// Sparse transition row over a [`LiftedStateSpace`], sorted by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KernelRow {
    pub entries: Vec<(usize, f64)>,
}

impl KernelRow {
    pub fn probability(&self, state: usize) -> f64 {
        self.entries.iter().filter(|(s, _)| *s == state).map(|(_, p)| p).sum()
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    fn accumulate(&mut self, other: &KernelRow, weight: f64) {
        for &(s, p) in &other.entries {
            match self.entries.binary_search_by_key(&s, |e| e.0) {
                Ok(pos) => self.entries[pos].1 += weight * p,
                Err(pos) => self.entries.insert(pos, (s, weight * p)),
            }
        }
    }
}

/// Indexes a successor law into `space`.
pub fn row_in_space(space: &LiftedStateSpace, successors: &Successors) -> Result<KernelRow> {
    let mut row = KernelRow::default();
    for (mu, p) in successors {
        let s = space.locate(mu).ok_or(Error::OffSpaceSuccessor)?;
        row.accumulate(&KernelRow { entries: vec![(s, 1.0)] }, *p);
    }
    Ok(row)
}

/// Every profile of vertex actions `x̲ ↦ δ_{a^i}` at `mu`.
fn vertex_profiles(spec: &MftgSpec, mu: &FinitePmf) -> Vec<Vec<TeamStateActionLaw>> {
    let shape = spec.action_shape();
    (0..shape.len())
        .map(|k| {
            shape
                .decode(k)
                .iter()
                .enumerate()
                .map(|(i, &a)| TeamStateActionLaw::vertex(mu, spec.team(i).actions, a))
                .collect()
        })
        .collect()
}

/// `{μ₀}` together with every lifted state reachable from it under vertex
/// action profiles and `backend`, in breadth-first order.
pub fn enumerate_states(spec: &MftgSpec, mu0: &FinitePmf, backend: KernelBackend, cap: usize) -> Result<LiftedStateSpace> {
    let mut space = LiftedStateSpace::new(spec.state_shape().clone(), cap);
    space.insert(mu0.clone())?;
    let mut queue = VecDeque::from([0usize]);
    while let Some(s) = queue.pop_front() {
        let mu = space.state(s).clone();
        let rows: Vec<Successors> = vertex_profiles(spec, &mu)
            .par_iter()
            .map(|profile| successor_law(spec, &mu, profile, backend))
            .collect::<Result<_>>()?;
        for row in rows {
            for (next, _) in row {
                let (i, fresh) = space.insert(next)?;
                if fresh {
                    queue.push_back(i);
                }
            }
        }
    }
    Ok(space)
}

/// A finite mixture of admissible actions at one lifted state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedAction {
    components: Vec<(f64, TeamStateActionLaw)>,
}

impl MixedAction {
    pub fn pure(law: TeamStateActionLaw) -> Self {
        Self {
            components: vec![(1.0, law)],
        }
    }

    pub fn new(components: Vec<(f64, TeamStateActionLaw)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyProduct);
        }
        FinitePmf::from_weights(components.iter().map(|c| c.0).collect())?;
        Ok(Self { components })
    }

    pub fn components(&self) -> &[(f64, TeamStateActionLaw)] {
        &self.components
    }

    pub fn as_pure(&self) -> Option<&TeamStateActionLaw> {
        match self.components.as_slice() {
            [(_, law)] => Some(law),
            _ => None,
        }
    }
}

/// One player's stationary level-1 policy: an action per lifted state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level1Policy {
    pub actions: Vec<MixedAction>,
}

impl Level1Policy {
    pub fn pure(actions: Vec<TeamStateActionLaw>) -> Self {
        Self {
            actions: actions.into_iter().map(MixedAction::pure).collect(),
        }
    }

    /// Plays the vertex `a` at every state.
    pub fn constant_vertex(spec: &MftgSpec, space: &LiftedStateSpace, player: usize, a: usize) -> Self {
        Self::pure(
            space
                .states()
                .iter()
                .map(|mu| TeamStateActionLaw::vertex(mu, spec.team(player).actions, a))
                .collect(),
        )
    }
}

/// A level-1 policy per player.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level1Profile {
    pub players: Vec<Level1Policy>,
}

impl Level1Profile {
    /// Checks every component of every action for admissibility at its
    /// state.
    pub fn validate(&self, space: &LiftedStateSpace) -> Result<()> {
        for (player, policy) in self.players.iter().enumerate() {
            if policy.actions.len() != space.len() {
                return Err(Error::DimensionMismatch {
                    expected: space.len(),
                    found: policy.actions.len(),
                });
            }
            for (state, action) in policy.actions.iter().enumerate() {
                for (_, law) in action.components() {
                    let check = reconstruction::admissible(space.state(state), law)?;
                    if !check.admissible {
                        return Err(Error::NotAdmissible {
                            player,
                            state,
                            residual: check.residual,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Largest admissibility residual over all players, states and
    /// components.
    pub fn max_residual(&self, space: &LiftedStateSpace) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for policy in &self.players {
            for (state, action) in policy.actions.iter().enumerate() {
                for (_, law) in action.components() {
                    worst = worst.max(reconstruction::admissible(space.state(state), law)?.residual);
                }
            }
        }
        Ok(worst)
    }
}

/// Per-state stage data: lifted costs of every player and the transition
/// row.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub costs: Vec<f64>,
    pub row: KernelRow,
}

/// The lifted game over an enumerated space, with a stage cache.
pub struct LiftedGame<'a> {
    spec: &'a MftgSpec,
    space: &'a LiftedStateSpace,
    backend: KernelBackend,
    cache: Mutex<HashMap<Vec<u64>, Arc<Stage>>>,
}

impl<'a> LiftedGame<'a> {
    pub fn new(spec: &'a MftgSpec, space: &'a LiftedStateSpace, backend: KernelBackend) -> Self {
        Self {
            spec,
            space,
            backend,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn spec(&self) -> &MftgSpec {
        self.spec
    }

    pub fn space(&self) -> &LiftedStateSpace {
        self.space
    }

    pub fn backend(&self) -> KernelBackend {
        self.backend
    }

    pub fn gamma(&self) -> f64 {
        self.spec.gamma()
    }

    /// Stage data for a pure action profile at `state`.
    pub fn pure_stage(&self, state: usize, a_hats: &[TeamStateActionLaw]) -> Result<Arc<Stage>> {
        let mut key = Vec::with_capacity(1 + a_hats.iter().map(|a| a.law().len()).sum::<usize>());
        key.push(state as u64);
        for a in a_hats {
            key.extend(a.law().weights().iter().map(|w| w.to_bits()));
        }
        if let Some(stage) = self.cache.lock().unwrap().get(&key) {
            return Ok(stage.clone());
        }
        let mu = self.space.state(state);
        let xi = reconstruct_xi(mu, a_hats)?;
        let costs = costs_against(self.spec, &xi.joint, a_hats);
        let successors = successor_law(self.spec, mu, a_hats, self.backend)?;
        let row = row_in_space(self.space, &successors)?;
        let stage = Arc::new(Stage { costs, row });
        self.cache.lock().unwrap().insert(key, stage.clone());
        Ok(stage)
    }

    /// Stage data for a mixed profile: costs and rows averaged over the
    /// product of the players' mixtures.
    pub fn mixed_stage(&self, state: usize, actions: &[&MixedAction]) -> Result<Stage> {
        let m = actions.len();
        let mut out = Stage {
            costs: vec![0.0; m],
            row: KernelRow::default(),
        };
        let mut pos = vec![0usize; m];
        let mut profile: Vec<TeamStateActionLaw> = Vec::with_capacity(m);
        loop {
            profile.clear();
            let mut w = 1.0;
            for (i, action) in actions.iter().enumerate() {
                let (q, law) = &action.components()[pos[i]];
                w *= q;
                profile.push(law.clone());
            }
            if w > 0.0 {
                let stage = self.pure_stage(state, &profile)?;
                out.costs.iter_mut().zip(&stage.costs).for_each(|(c, s)| *c += w * s);
                out.row.accumulate(&stage.row, w);
            }
            let mut i = m;
            let done = loop {
                if i == 0 {
                    break true;
                }
                i -= 1;
                pos[i] += 1;
                if pos[i] < actions[i].components().len() {
                    break false;
                }
                pos[i] = 0;
            };
            if done {
                break;
            }
        }
        Ok(out)
    }

    /// Stage data of `profile` at every state, computed in parallel.
    pub fn stages(&self, profile: &Level1Profile) -> Result<Vec<Stage>> {
        (0..self.space.len())
            .into_par_iter()
            .map(|s| {
                let actions: Vec<&MixedAction> = profile.players.iter().map(|p| &p.actions[s]).collect();
                self.mixed_stage(s, &actions)
            })
            .collect()
    }
}

/// Values of every player at every lifted state, with diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueTable {
    /// `values[player][state]`.
    pub values: Vec<Vec<f64>>,
    pub iterations: usize,
    pub final_delta: f64,
    /// Iterations whose update failed to shrink by the factor `γ`.
    pub contraction_violations: usize,
}

/// Stopping threshold guaranteeing sup-norm error at most `eps`.
pub fn stopping_threshold(gamma: f64, eps: f64) -> f64 {
    eps * (1.0 - gamma) / (2.0 * gamma)
}

const MAX_VALUE_ITERATIONS: usize = 1_000_000;

fn contraction_slack(values: &[f64]) -> f64 {
    1e-13 * (1.0 + values.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

/// Evaluates the fixed stages of a profile by value iteration.
pub fn evaluate_stages(stages: &[Stage], players: usize, gamma: f64, eps: f64) -> ValueTable {
    let n = stages.len();
    let threshold = stopping_threshold(gamma, eps);
    let mut values = vec![vec![0.0; n]; players];
    let mut iterations = 0;
    let mut previous_delta = f64::INFINITY;
    let mut violations = 0;
    loop {
        let mut delta: f64 = 0.0;
        let next: Vec<Vec<f64>> = (0..players)
            .map(|i| {
                (0..n)
                    .map(|s| {
                        let future: f64 = stages[s].row.entries.iter().map(|&(t, p)| p * values[i][t]).sum();
                        stages[s].costs[i] + gamma * future
                    })
                    .collect()
            })
            .collect();
        for (old, new) in values.iter().zip(&next) {
            for (a, b) in old.iter().zip(new) {
                delta = delta.max((a - b).abs());
            }
        }
        iterations += 1;
        if previous_delta.is_finite() && delta > gamma * previous_delta + contraction_slack(&next.concat()) {
            violations += 1;
        }
        previous_delta = delta;
        values = next;
        if delta <= threshold || iterations >= MAX_VALUE_ITERATIONS {
            return ValueTable {
                values,
                iterations,
                final_delta: delta,
                contraction_violations: violations,
            };
        }
    }
}

/// `V^i(μ) = f̂^i + γ Σ P V^i` for every player, to sup-norm accuracy `eps`.
pub fn policy_value_dp(game: &LiftedGame, profile: &Level1Profile, eps: f64) -> Result<ValueTable> {
    profile.validate(game.space())?;
    let stages = game.stages(profile)?;
    Ok(evaluate_stages(&stages, profile.players.len(), game.gamma(), eps))
}

/// Candidate actions for best responses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionGrid {
    /// `x̲ ↦ δ_a` for every own action `a`.
    #[default]
    Vertices,
    /// Own-state kernels whose rows lie on the simplex grid of the given
    /// resolution, vertices first.
    Refined { resolution: usize },
}

fn simplex_grid(dim: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn rec(dim: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if dim == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in (0..=left).rev() {
            prefix.push(k);
            rec(dim - 1, left - k, prefix, out);
            prefix.pop();
        }
    }
    let mut points = Vec::new();
    rec(dim, resolution, &mut Vec::new(), &mut points);
    points
        .into_iter()
        .map(|p| p.into_iter().map(|k| k as f64 / resolution as f64).collect())
        .collect()
}

/// The candidate actions of `player` at `mu`, in canonical order.
pub fn action_grid(spec: &MftgSpec, player: usize, mu: &FinitePmf, grid: ActionGrid) -> Result<Vec<TeamStateActionLaw>> {
    let actions = spec.team(player).actions;
    let mut out: Vec<TeamStateActionLaw> = (0..actions)
        .map(|a| TeamStateActionLaw::vertex(mu, actions, a))
        .collect();
    let ActionGrid::Refined { resolution } = grid else {
        return Ok(out);
    };
    if resolution == 0 {
        return Err(Error::Config("grid resolution must be positive".into()));
    }
    let states = spec.state_shape();
    let own_states = spec.team(player).states;
    let mut own_mass = vec![0.0; own_states];
    let mut coords = vec![0; states.rank()];
    for (x, &w) in mu.weights().iter().enumerate() {
        states.decode_into(x, &mut coords);
        own_mass[coords[player]] += w;
    }
    let live: Vec<usize> = (0..own_states).filter(|&x| own_mass[x] > 0.0).collect();
    let points = simplex_grid(actions, resolution);
    let count = points.len().checked_pow(live.len() as u32).unwrap_or(usize::MAX);
    if count > crate::MAX_DENSE_ENTRIES {
        return Err(Error::TooLarge(count));
    }
    let mut seen: std::collections::HashSet<Vec<u64>> = out
        .iter()
        .map(|a| a.law().weights().iter().map(|w| w.to_bits()).collect())
        .collect();
    let uniform = vec![1.0 / actions as f64; actions];
    for k in 0..count {
        let mut own_rows = vec![uniform.clone(); own_states];
        let mut rest = k;
        for &x in live.iter().rev() {
            own_rows[x] = points[rest % points.len()].clone();
            rest /= points.len();
        }
        let rows: Vec<Vec<f64>> = (0..states.len())
            .map(|js| {
                states.decode_into(js, &mut coords);
                own_rows[coords[player]].clone()
            })
            .collect();
        let law = TeamStateActionLaw::from_kernel(mu, &rows)?;
        if seen.insert(law.law().weights().iter().map(|w| w.to_bits()).collect()) {
            out.push(law);
        }
    }
    Ok(out)
}

/// A best response of one player with its value vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BestResponse {
    pub policy: Level1Policy,
    /// Index into the action grid chosen at each state.
    pub choices: Vec<usize>,
    pub values: Vec<f64>,
    pub iterations: usize,
}

/// Relative tolerance under which two action values count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Optimal stationary policy of `player` against the other players of
/// `profile` over the action grid, by value iteration. Ties go to the
/// lowest grid index.
pub fn best_response(
    game: &LiftedGame,
    player: usize,
    profile: &Level1Profile,
    grid: ActionGrid,
    eps: f64,
) -> Result<BestResponse> {
    profile.validate(game.space())?;
    let space = game.space();
    let spec = game.spec();
    let gamma = game.gamma();
    let candidates: Vec<(Vec<TeamStateActionLaw>, Vec<Stage>)> = (0..space.len())
        .into_par_iter()
        .map(|s| {
            let grid_actions = action_grid(spec, player, space.state(s), grid)?;
            let stages = grid_actions
                .iter()
                .map(|law| {
                    let own = MixedAction::pure(law.clone());
                    let actions: Vec<&MixedAction> = profile
                        .players
                        .iter()
                        .enumerate()
                        .map(|(j, p)| if j == player { &own } else { &p.actions[s] })
                        .collect();
                    game.mixed_stage(s, &actions)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((grid_actions, stages))
        })
        .collect::<Result<_>>()?;

    let q_value = |stage: &Stage, values: &[f64]| -> f64 {
        let future: f64 = stage.row.entries.iter().map(|&(t, p)| p * values[t]).sum();
        stage.costs[player] + gamma * future
    };
    let argmin = |values: &[f64], stages: &[Stage]| -> (usize, f64) {
        let mut best = (0, q_value(&stages[0], values));
        for (g, stage) in stages.iter().enumerate().skip(1) {
            let q = q_value(stage, values);
            if q < best.1 - TIE_TOLERANCE * (1.0 + best.1.abs()) {
                best = (g, q);
            }
        }
        best
    };

    let threshold = stopping_threshold(gamma, eps);
    let mut values = vec![0.0; space.len()];
    let mut iterations = 0;
    loop {
        let next: Vec<f64> = candidates.iter().map(|(_, stages)| argmin(&values, stages).1).collect();
        let delta = values.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        values = next;
        iterations += 1;
        if delta <= threshold || iterations >= MAX_VALUE_ITERATIONS {
            break;
        }
    }
    let choices: Vec<usize> = candidates.iter().map(|(_, stages)| argmin(&values, stages).0).collect();
    let policy = Level1Policy::pure(
        candidates
            .iter()
            .zip(&choices)
            .map(|((laws, _), &g)| laws[g].clone())
            .collect(),
    );
    Ok(BestResponse {
        policy,
        choices,
        values,
        iterations,
    })
}

/// Admissibility check used by solvers: every component within
/// [`ADMISSIBLE_TOLERANCE`].
pub fn is_admissible_profile(space: &LiftedStateSpace, profile: &Level1Profile) -> Result<bool> {
    Ok(profile.max_residual(space)? <= ADMISSIBLE_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_drift_model, ClosureDynamics, NoiseSpec, TeamSpace};

    fn drift(g: usize, m: usize) -> MftgSpec {
        build_drift_model(DriftParams::plain(g, vec![0; m], 0.9)).unwrap()
    }

    fn product_action(mu: &FinitePmf, q: &[f64]) -> TeamStateActionLaw {
        TeamStateActionLaw::product(mu, q).unwrap()
    }

    #[test]
    fn drift_space_has_all_diracs() {
        let spec = drift(3, 2);
        let dirac = FinitePmf::dirac(spec.state_shape().clone(), 4);
        let space = enumerate_states(&spec, &dirac, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(space.len(), 9);
        let uniform = FinitePmf::uniform(spec.state_shape().clone());
        let space = enumerate_states(&spec, &uniform, KernelBackend::ClosedForm, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(space.len(), 10);
        for k in 0..9 {
            assert!(space.locate(&FinitePmf::dirac(spec.state_shape().clone(), k)).is_some());
        }
    }

    #[test]
    fn periodic_space_has_smoothed_atoms() {
        let params = DriftParams::plain(3, vec![0, 0], 0.9).periodic([0.25, 0.5, 0.25]);
        let spec = build_drift_model(params.clone()).unwrap();
        let uniform = FinitePmf::uniform(spec.state_shape().clone());
        let space = enumerate_states(&spec, &uniform, KernelBackend::Quadrature, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(space.len(), 10);
        let atom = drift_successor(&params, &[1, 2]);
        // Hand-built: team 0 on (0.25, 0.5, 0.25), team 1 on (0.25, 0.25, 0.5).
        let hand = [0.25, 0.5, 0.25]
            .iter()
            .flat_map(|p| [0.25, 0.25, 0.5].iter().map(move |q| p * q))
            .collect::<Vec<_>>();
        assert!(atom.weights().iter().zip(&hand).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(space.locate(&atom).is_some());
    }

    #[test]
    fn state_cap_is_enforced() {
        let spec = drift(3, 2);
        let uniform = FinitePmf::uniform(spec.state_shape().clone());
        assert!(matches!(
            enumerate_states(&spec, &uniform, KernelBackend::Quadrature, 5),
            Err(Error::StateExplosion(5))
        ));
    }

    #[test]
    fn coordinated_rows_are_dirac_for_all_backends() {
        let spec = drift(3, 2);
        let mu = FinitePmf::uniform(spec.state_shape().clone());
        let a_hats = vec![TeamStateActionLaw::vertex(&mu, 3, 2), TeamStateActionLaw::vertex(&mu, 3, 0)];
        let target = FinitePmf::dirac(spec.state_shape().clone(), 6);
        for backend in [
            KernelBackend::ClosedForm,
            KernelBackend::Quadrature,
            KernelBackend::MonteCarlo { samples: 500, seed: 3 },
        ] {
            let row = successor_law(&spec, &mu, &a_hats, backend).unwrap();
            assert_eq!(row.len(), 1);
            assert_eq!(successor_probability(&row, &target), 1.0, "{}", backend.name());
        }
    }

    #[test]
    fn closed_form_on_skewed_marginals() {
        let spec = drift(2, 2);
        let mu = FinitePmf::dirac(spec.state_shape().clone(), 0);
        let a_hats = vec![product_action(&mu, &[1.0 / 3.0, 2.0 / 3.0]), product_action(&mu, &[1.0, 0.0])];
        let closed = kernel_drift_closed_form(&spec, &mu, &a_hats).unwrap();
        let shape = spec.state_shape().clone();
        assert!((successor_probability(&closed, &FinitePmf::dirac(shape.clone(), 0)) - 1.0 / 3.0).abs() < 1e-15);
        assert!((successor_probability(&closed, &FinitePmf::dirac(shape.clone(), 2)) - 2.0 / 3.0).abs() < 1e-15);
        let quad = kernel_drift_quadrature(&spec, &mu, &a_hats).unwrap();
        let expected = 2.0 * std::f64::consts::LN_2 - 1.0;
        assert!((successor_probability(&quad, &FinitePmf::dirac(shape, 0)) - expected).abs() < 1e-9);
        assert!((successor_gap(&closed, &quad) - (expected - 1.0 / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn density_examples() {
        let spec = drift(2, 2);
        let shape = spec.state_shape().clone();
        let mu = FinitePmf::uniform(shape.clone());
        let a_hats = vec![product_action(&mu, &[0.5, 0.5]), product_action(&mu, &[0.5, 0.5])];
        for k in 0..4 {
            let q = density_q(&spec, KernelBackend::ClosedForm, &FinitePmf::dirac(shape.clone(), k), &mu, &a_hats).unwrap();
            assert!((q - 1.0).abs() < 1e-15);
        }
        assert_eq!(density_q(&spec, KernelBackend::ClosedForm, &mu, &mu, &a_hats).unwrap(), 0.0);
        let coordinated = vec![TeamStateActionLaw::vertex(&mu, 2, 1), TeamStateActionLaw::vertex(&mu, 2, 1)];
        let q = density_q(&spec, KernelBackend::Quadrature, &FinitePmf::dirac(shape, 3), &mu, &coordinated).unwrap();
        assert_eq!(q, 4.0);
    }

    #[test]
    fn lifted_cost_examples() {
        let params = DriftParams::plain(3, vec![0, 0], 0.9).with_weights(vec![vec![0, 1], vec![0, 0]]);
        let spec = build_drift_model(params).unwrap();
        let shape = spec.state_shape().clone();
        let mu = FinitePmf::dirac(shape.clone(), shape.encode(&[2, 0]));
        let a_hats = vec![TeamStateActionLaw::vertex(&mu, 3, 1), TeamStateActionLaw::vertex(&mu, 3, 2)];
        assert_eq!(lift_cost(&spec, 0, &mu, &a_hats).unwrap(), 4.0);

        let params = DriftParams::plain(3, vec![1, 1], 0.9).with_weights(vec![vec![0, -1], vec![0, 0]]);
        let spec = build_drift_model(params).unwrap();
        let mu = FinitePmf::dirac(shape.clone(), shape.encode(&[1, 1]));
        let a_hats = vec![TeamStateActionLaw::vertex(&mu, 3, 0), TeamStateActionLaw::vertex(&mu, 3, 0)];
        assert_eq!(lift_cost(&spec, 0, &mu, &a_hats).unwrap(), 0.0);
    }

    fn cycle_spec(c0: f64, c1: f64, gamma: f64) -> MftgSpec {
        let dynamics = ClosureDynamics::new(
            |_, x, _, _, _, _| 1 - x,
            move |_, x, _, _| if x == 0 { c0 } else { c1 },
        );
        MftgSpec::new(
            "cycle",
            vec![TeamSpace { states: 2, actions: 1 }],
            gamma,
            c0.abs().max(c1.abs()).max(1.0),
            NoiseSpec::noiseless(1),
            Arc::new(dynamics),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_rows_are_exact() {
        let spec = cycle_spec(1.0, 2.0, 0.9);
        let mu = FinitePmf::dirac(spec.state_shape().clone(), 0);
        let a = vec![TeamStateActionLaw::vertex(&mu, 1, 0)];
        let row = kernel_pushforward_mc(&spec, &mu, &a, 1, 0).unwrap();
        assert_eq!(row.len(), 1);
        assert_eq!(row[0].0.as_dirac(), Some(1));
        assert_eq!(row, successor_law(&spec, &mu, &a, KernelBackend::Quadrature).unwrap());
    }

    #[test]
    fn two_state_cycle_value() {
        let (c0, c1, gamma) = (1.0, 3.0, 0.9);
        let spec = cycle_spec(c0, c1, gamma);
        let mu0 = FinitePmf::dirac(spec.state_shape().clone(), 0);
        let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, 10).unwrap();
        assert_eq!(space.len(), 2);
        let game = LiftedGame::new(&spec, &space, KernelBackend::Quadrature);
        let profile = Level1Profile {
            players: vec![Level1Policy::constant_vertex(&spec, &space, 0, 0)],
        };
        let table = policy_value_dp(&game, &profile, 1e-10).unwrap();
        let expected = (c0 + gamma * c1) / (1.0 - gamma * gamma);
        assert!((table.values[0][0] - expected).abs() < 1e-10);
        assert_eq!(table.contraction_violations, 0);
        // Brute-force horizon-1000 sum.
        let brute: f64 = (0..1000).map(|n| gamma.powi(n) * if n % 2 == 0 { c0 } else { c1 }).sum();
        assert!((table.values[0][0] - brute).abs() < 1e-10);
    }

    #[test]
    fn mixed_stage_mixes_linearly() {
        let spec = drift(2, 2);
        let mu = FinitePmf::uniform(spec.state_shape().clone());
        let space = enumerate_states(&spec, &mu, KernelBackend::ClosedForm, 100).unwrap();
        let game = LiftedGame::new(&spec, &space, KernelBackend::ClosedForm);
        let a0 = MixedAction::new(vec![
            (0.25, TeamStateActionLaw::vertex(&mu, 2, 0)),
            (0.75, TeamStateActionLaw::vertex(&mu, 2, 1)),
        ])
        .unwrap();
        let a1 = MixedAction::pure(TeamStateActionLaw::vertex(&mu, 2, 1));
        let stage = game.mixed_stage(0, &[&a0, &a1]).unwrap();
        let shape = spec.state_shape();
        let s01 = space.locate(&FinitePmf::dirac(shape.clone(), 1)).unwrap();
        let s11 = space.locate(&FinitePmf::dirac(shape.clone(), 3)).unwrap();
        assert_eq!(stage.row.probability(s01), 0.25);
        assert_eq!(stage.row.probability(s11), 0.75);
    }

    #[test]
    fn tie_break_picks_lowest_index() {
        let spec = cycle_spec(1.0, 1.0, 0.5);
        let mu0 = FinitePmf::dirac(spec.state_shape().clone(), 0);
        let space = enumerate_states(&spec, &mu0, KernelBackend::Quadrature, 10).unwrap();
        let game = LiftedGame::new(&spec, &space, KernelBackend::Quadrature);
        let profile = Level1Profile {
            players: vec![Level1Policy::constant_vertex(&spec, &space, 0, 0)],
        };
        let br = best_response(&game, 0, &profile, ActionGrid::Refined { resolution: 1 }, 1e-10).unwrap();
        assert!(br.choices.iter().all(|&c| c == 0));
    }

    #[test]
    fn simplex_grid_sizes() {
        assert_eq!(simplex_grid(2, 100).len(), 101);
        assert_eq!(simplex_grid(3, 4).len(), 15);
        assert!(simplex_grid(3, 4).iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn off_space_successor_is_reported() {
        let spec = drift(2, 1);
        let mu = FinitePmf::dirac(spec.state_shape().clone(), 0);
        let space = LiftedStateSpace::from_states(spec.state_shape().clone(), vec![mu.clone()]).unwrap();
        let row = successor_law(&spec, &mu, &[TeamStateActionLaw::vertex(&mu, 2, 1)], KernelBackend::Quadrature).unwrap();
        assert!(matches!(row_in_space(&space, &row), Err(Error::OffSpaceSuccessor)));
    }
}
