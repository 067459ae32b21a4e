//! MFTG instances and the seeded noise architecture.
//!
//! An [`MftgSpec`] bundles the team state and action sets, the discount,
//! the declared cost bound, the noise laws and a [`Dynamics`] object holding
//! the system function `F^i` and the stage cost `f^i`. Both receive the
//! joint state-action law `ā` as a value; whoever simulates the game is
//! responsible for materializing it.
//!
//! Randomness is drawn from counter-based streams: a stream is identified by
//! `(kind, team, agent, time, replication)` and its generator is seeded from
//! a fixed 64-bit mix of that tuple with the master seed. Changing
//! [`NoiseArchitecture::derive`] changes every output of the crate.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{self, FinitePmf, PerturbationVector, ProductShape, ZeroRule};
use crate::reconstruction::JointLaw;

/// Generator behind every noise stream.
pub type StreamRng = ChaCha8Rng;

/// Sizes of one team's state and action sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamSpace {
    pub states: usize,
    pub actions: usize,
}

/// A finite noise law: values (real vectors) with their probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteNoise {
    pub values: Vec<Vec<f64>>,
    pub law: FinitePmf,
}

impl FiniteNoise {
    /// A single empty sample with probability one.
    pub fn trivial() -> Self {
        Self {
            values: vec![Vec::new()],
            law: FinitePmf::dirac(ProductShape::flat(1), 0),
        }
    }

    /// Integer-valued scalar noise.
    pub fn scalar(values: &[i64], weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                found: weights.len(),
            });
        }
        Ok(Self {
            values: values.iter().map(|&v| vec![v as f64]).collect(),
            law: FinitePmf::from_weights(weights)?,
        })
    }

    pub fn is_trivial(&self) -> bool {
        self.values.len() == 1 && self.values[0].is_empty()
    }

    pub fn sample(&self, rng: &mut StreamRng) -> &[f64] {
        let u: f64 = rng.random();
        &self.values[prob::inverse_cdf_index(self.law.weights(), u)]
    }
}

/// Law of a common noise component.
#[derive(Clone, Debug, PartialEq)]
pub enum CommonSampler {
    /// No noise; samples are empty.
    None,
    /// `U([0,1)) ⊗ Exp(1)^{⊗k}`, flattened as `[u, z_1, …, z_k]`.
    UniformExponentials { exponentials: usize },
    Finite(FiniteNoise),
}

impl CommonSampler {
    pub fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        match self {
            CommonSampler::None => Vec::new(),
            CommonSampler::UniformExponentials { exponentials } => {
                let mut out = Vec::with_capacity(exponentials + 1);
                out.push(rng.random::<f64>());
                out.extend((0..*exponentials).map(|_| -> f64 { Exp1.sample(rng) }));
                out
            }
            CommonSampler::Finite(noise) => noise.sample(rng).to_vec(),
        }
    }
}

/// Noise laws `ν^i`, `ν^{0,i}` and `ν^{0,0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Idiosyncratic laws, one per team. Finite so that push-forwards are exact.
    pub idiosyncratic: Vec<FiniteNoise>,
    pub team_common: Vec<CommonSampler>,
    pub global: CommonSampler,
}

impl NoiseSpec {
    pub fn noiseless(teams: usize) -> Self {
        Self {
            idiosyncratic: vec![FiniteNoise::trivial(); teams],
            team_common: vec![CommonSampler::None; teams],
            global: CommonSampler::None,
        }
    }
}

/// One draw of all common noises at one time step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommonNoise {
    pub global: Vec<f64>,
    pub team: Vec<Vec<f64>>,
}

/// System function and stage cost of an MFTG.
pub trait Dynamics: Send + Sync {
    /// `F^i(x, a, ā, ε^i, ε^{0,i}, ε^{0,0})`.
    #[allow(clippy::too_many_arguments)]
    fn next_state(
        &self,
        team: usize,
        x: usize,
        a: usize,
        bar_a: &JointLaw,
        idiosyncratic: &[f64],
        common: &CommonNoise,
    ) -> usize;

    /// `f^i(x, a, ā)`.
    fn cost(&self, team: usize, x: usize, a: usize, bar_a: &JointLaw) -> f64;

    /// Transition with `ā` and the common noise fixed; implementations may
    /// precompute whatever depends only on those.
    fn bind_transition<'a>(
        &'a self,
        bar_a: &'a JointLaw,
        common: &'a CommonNoise,
    ) -> Box<dyn Fn(usize, usize, usize, &[f64]) -> usize + 'a> {
        Box::new(move |team, x, a, idio| self.next_state(team, x, a, bar_a, idio, common))
    }

    /// Stage cost with `ā` fixed.
    fn bind_cost<'a>(&'a self, bar_a: &'a JointLaw) -> Box<dyn Fn(usize, usize, usize) -> f64 + 'a> {
        Box::new(move |team, x, a| self.cost(team, x, a, bar_a))
    }
}

type TransitionFn = dyn Fn(usize, usize, usize, &JointLaw, &[f64], &CommonNoise) -> usize + Send + Sync;
type CostFn = dyn Fn(usize, usize, usize, &JointLaw) -> f64 + Send + Sync;

/// [`Dynamics`] assembled from two closures.
pub struct ClosureDynamics {
    transition: Box<TransitionFn>,
    cost: Box<CostFn>,
}

impl ClosureDynamics {
    pub fn new(
        transition: impl Fn(usize, usize, usize, &JointLaw, &[f64], &CommonNoise) -> usize + Send + Sync + 'static,
        cost: impl Fn(usize, usize, usize, &JointLaw) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            transition: Box::new(transition),
            cost: Box::new(cost),
        }
    }
}

impl Dynamics for ClosureDynamics {
    fn next_state(&self, team: usize, x: usize, a: usize, bar_a: &JointLaw, idio: &[f64], common: &CommonNoise) -> usize {
        (self.transition)(team, x, a, bar_a, idio, common)
    }

    fn cost(&self, team: usize, x: usize, a: usize, bar_a: &JointLaw) -> f64 {
        (self.cost)(team, x, a, bar_a)
    }
}

/// A complete MFTG instance.
#[derive(Clone)]
pub struct MftgSpec {
    name: String,
    teams: Vec<TeamSpace>,
    gamma: f64,
    cost_bound: f64,
    state_shape: ProductShape,
    action_shape: ProductShape,
    noise: NoiseSpec,
    dynamics: Arc<dyn Dynamics>,
    drift: Option<DriftParams>,
}

impl fmt::Debug for MftgSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MftgSpec")
            .field("name", &self.name)
            .field("teams", &self.teams)
            .field("gamma", &self.gamma)
            .field("cost_bound", &self.cost_bound)
            .finish_non_exhaustive()
    }
}

/// Number of cost evaluations in the bound audit.
pub const COST_AUDIT_SAMPLES: usize = 10_000;

impl MftgSpec {
    /// Validates the instance and audits the declared cost bound.
    pub fn new(
        name: impl Into<String>,
        teams: Vec<TeamSpace>,
        gamma: f64,
        cost_bound: f64,
        noise: NoiseSpec,
        dynamics: Arc<dyn Dynamics>,
    ) -> Result<Self> {
        if teams.is_empty() {
            return Err(Error::InvalidModel("at least one team is required".into()));
        }
        if teams.iter().any(|t| t.states == 0 || t.actions == 0) {
            return Err(Error::InvalidModel("state and action sets must be nonempty".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidModel(format!("discount {gamma} outside (0, 1)")));
        }
        if !(cost_bound > 0.0 && cost_bound.is_finite()) {
            return Err(Error::InvalidModel(format!("cost bound {cost_bound} must be positive")));
        }
        let m = teams.len();
        if noise.idiosyncratic.len() != m || noise.team_common.len() != m {
            return Err(Error::InvalidModel("noise laws must be given for every team".into()));
        }
        let state_shape = ProductShape::new(teams.iter().map(|t| t.states).collect())?;
        let action_shape = ProductShape::new(teams.iter().map(|t| t.actions).collect())?;
        let entries = state_shape.len() * action_shape.len();
        if entries > crate::MAX_DENSE_ENTRIES {
            return Err(Error::TooLarge(entries));
        }
        let spec = Self {
            name: name.into(),
            teams,
            gamma,
            cost_bound,
            state_shape,
            action_shape,
            noise,
            dynamics,
            drift: None,
        };
        spec.audit_cost_bound(0x0000_C057_B00D)?;
        Ok(spec)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn team_count(&self) -> usize {
        self.teams.len()
    }

    pub fn teams(&self) -> &[TeamSpace] {
        &self.teams
    }

    pub fn team(&self, i: usize) -> TeamSpace {
        self.teams[i]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cost_bound(&self) -> f64 {
        self.cost_bound
    }

    /// Shape of `X̲ = X¹ × … × X^m`.
    pub fn state_shape(&self) -> &ProductShape {
        &self.state_shape
    }

    /// Shape of `A̲ = A¹ × … × A^m`.
    pub fn action_shape(&self) -> &ProductShape {
        &self.action_shape
    }

    pub fn joint_shape(&self) -> ProductShape {
        self.state_shape.concat(&self.action_shape)
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn drift(&self) -> Option<&DriftParams> {
        self.drift.as_ref()
    }

    /// Checks `|f^i| ≤ C_f` on [`COST_AUDIT_SAMPLES`] evaluations at random
    /// arguments; half the joint laws are Dirac masses, where costs of
    /// distance type are extremal.
    pub fn audit_cost_bound(&self, seed: u64) -> Result<()> {
        let mut rng = StreamRng::seed_from_u64(seed);
        let shape = self.joint_shape();
        let m = self.team_count();
        for n in 0..COST_AUDIT_SAMPLES {
            let weights = if n % 2 == 0 {
                let mut w = vec![0.0; shape.len()];
                w[rng.random_range(0..shape.len())] = 1.0;
                w
            } else {
                let raw: Vec<f64> = (0..shape.len()).map(|_| rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            };
            let bar_a = JointLaw::new(FinitePmf::with_tolerance(shape.clone(), weights, 1e-9)?, m)?;
            let team = rng.random_range(0..m);
            let x = rng.random_range(0..self.teams[team].states);
            let a = rng.random_range(0..self.teams[team].actions);
            let c = self.dynamics.cost(team, x, a, &bar_a);
            if !(c.abs() <= self.cost_bound) {
                return Err(Error::InvalidModel(format!(
                    "cost {c} of team {team} exceeds the declared bound {}",
                    self.cost_bound
                )));
            }
        }
        Ok(())
    }

    /// Horizon `T` with `C_f γ^T / (1 − γ) ≤ tol`.
    pub fn horizon_for(&self, tol: f64) -> usize {
        horizon_for(self.gamma, self.cost_bound, tol)
    }
}

/// `T = ⌈log(tol (1 − γ) / C_f) / log γ⌉`, at least one.
pub fn horizon_for(gamma: f64, cost_bound: f64, tol: f64) -> usize {
    let t = ((tol * (1.0 - gamma) / cost_bound).ln() / gamma.ln()).ceil();
    if t.is_finite() && t > 1.0 {
        t as usize
    } else {
        1
    }
}

/// `C_f γ^T / (1 − γ)`.
pub fn truncation_bound(gamma: f64, cost_bound: f64, horizon: usize) -> f64 {
    cost_bound * gamma.powi(horizon as i32) / (1.0 - gamma)
}

/// Kinds of random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamKind {
    Idiosyncratic = 1,
    TeamCommon = 2,
    GlobalCommon = 3,
    IndividualRandomization = 4,
    TeamRandomization = 5,
    Initial = 6,
    /// Anything outside the model's own noises (policy generation, audits).
    Auxiliary = 7,
}

/// Identifier of one random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub kind: StreamKind,
    pub team: u64,
    pub agent: u64,
    pub time: u64,
    pub replication: u64,
}

impl StreamKey {
    pub fn new(kind: StreamKind, team: usize, agent: u64, time: u64, replication: u64) -> Self {
        Self {
            kind,
            team: team as u64,
            agent,
            time,
            replication,
        }
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn avalanche(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Master seed plus the stream derivation function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseArchitecture {
    pub master_seed: u64,
}

impl NoiseArchitecture {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// 64-bit stream seed: starting from `avalanche(master + φ)`, each field
    /// of `(kind, team, agent, time, replication)` in that order is folded
    /// in as `h ← avalanche((h + φ) ⊕ field)`, with `φ` the golden-ratio
    /// increment `0x9E3779B97F4A7C15`.
    pub fn derive(&self, key: StreamKey) -> u64 {
        let mut h = avalanche(self.master_seed.wrapping_add(GOLDEN_GAMMA));
        for field in [key.kind as u64, key.team, key.agent, key.time, key.replication] {
            h = avalanche(h.wrapping_add(GOLDEN_GAMMA) ^ field);
        }
        h
    }

    /// The generator of a stream; its 256-bit key is four consecutive
    /// SplitMix64 outputs started at the derived seed.
    pub fn stream(&self, key: StreamKey) -> StreamRng {
        let mut state = self.derive(key);
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            state = state.wrapping_add(GOLDEN_GAMMA);
            chunk.copy_from_slice(&avalanche(state).to_le_bytes());
        }
        StreamRng::from_seed(seed)
    }

    pub fn uniform(&self, key: StreamKey) -> f64 {
        self.stream(key).random()
    }
}

/// Draws `(ε^{0,0}_n, ε^{0,1}_n, …, ε^{0,m}_n)` for time `n ≥ 1` of
/// replication `r`.
pub fn sample_common_noise(arch: &NoiseArchitecture, spec: &MftgSpec, time: u64, replication: u64) -> CommonNoise {
    let mut rng = arch.stream(StreamKey::new(StreamKind::GlobalCommon, 0, 0, time, replication));
    let global = spec.noise.global.sample(&mut rng);
    let team = spec
        .noise
        .team_common
        .iter()
        .enumerate()
        .map(|(i, sampler)| {
            let mut rng = arch.stream(StreamKey::new(StreamKind::TeamCommon, i, 0, time, replication));
            sampler.sample(&mut rng)
        })
        .collect();
    CommonNoise { global, team }
}

/// Applies `F^i` to every team of one representative state profile.
pub fn step_system(
    spec: &MftgSpec,
    states: &[usize],
    actions: &[usize],
    bar_a: &JointLaw,
    idiosyncratic: &[Vec<f64>],
    common: &CommonNoise,
) -> Result<Vec<usize>> {
    let m = spec.team_count();
    if states.len() != m || actions.len() != m || idiosyncratic.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: states.len().min(actions.len()).min(idiosyncratic.len()),
        });
    }
    if bar_a.law().shape() != &spec.joint_shape() {
        return Err(Error::DimensionMismatch {
            expected: spec.joint_shape().len(),
            found: bar_a.law().len(),
        });
    }
    let step = spec.dynamics.bind_transition(bar_a, common);
    Ok((0..m)
        .map(|i| step(i, states[i], actions[i], &idiosyncratic[i]))
        .collect())
}

/// `f^i(x, a, ā)`.
pub fn stage_cost(spec: &MftgSpec, team: usize, x: usize, a: usize, bar_a: &JointLaw) -> Result<f64> {
    if team >= spec.team_count() || x >= spec.teams[team].states || a >= spec.teams[team].actions {
        return Err(Error::InvalidCoordinates {
            coords: vec![team, x, a],
            rank: spec.team_count(),
        });
    }
    Ok(spec.dynamics.cost(team, x, a, bar_a))
}

/// Which drift-of-intentions model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftVariant {
    #[default]
    Plain,
    /// Periodic grid with a mean-zero shift in `{-1, 0, 1}` per agent.
    PeriodicIdiosyncratic,
}

/// Parameters of a drift-of-intentions model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    /// Grid size `G`; states and actions are `0..G`.
    pub grid: usize,
    pub teams: usize,
    pub targets: Vec<usize>,
    /// `weights[i][j] ∈ {-1, 0, 1}`; the diagonal is ignored.
    pub weights: Vec<Vec<i8>>,
    pub gamma: f64,
    pub variant: DriftVariant,
    /// Law of the shift on `(-1, 0, 1)`, periodic variant only.
    pub idio_law: Option<[f64; 3]>,
    pub zero_rule: ZeroRule,
}

impl DriftParams {
    /// Plain model with all weights zero.
    pub fn plain(grid: usize, targets: Vec<usize>, gamma: f64) -> Self {
        let teams = targets.len();
        Self {
            grid,
            teams,
            targets,
            weights: vec![vec![0; teams]; teams],
            gamma,
            variant: DriftVariant::Plain,
            idio_law: None,
            zero_rule: ZeroRule::Normalizer,
        }
    }

    pub fn with_weights(mut self, weights: Vec<Vec<i8>>) -> Self {
        self.weights = weights;
        self
    }

    pub fn periodic(mut self, law: [f64; 3]) -> Self {
        self.variant = DriftVariant::PeriodicIdiosyncratic;
        self.idio_law = Some(law);
        self
    }

    /// `K = G^m`.
    pub fn joint_cardinality(&self) -> usize {
        self.grid.pow(self.teams as u32)
    }

    /// `(G − 1)(1 + Σ_{j≠i} |w^i_j|)`, maximized over teams.
    pub fn cost_bound(&self) -> f64 {
        (0..self.teams)
            .map(|i| {
                let coupling: usize = (0..self.teams)
                    .filter(|&j| j != i)
                    .map(|j| self.weights[i][j].unsigned_abs() as usize)
                    .sum();
                (self.grid - 1) as f64 * (1 + coupling) as f64
            })
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if self.grid == 0 || self.teams == 0 {
            return bad("grid size and team count must be positive".into());
        }
        if self.targets.len() != self.teams {
            return bad(format!("{} targets for {} teams", self.targets.len(), self.teams));
        }
        if self.targets.iter().any(|&t| t >= self.grid) {
            return bad("targets must lie in 0..G".into());
        }
        if self.weights.len() != self.teams || self.weights.iter().any(|r| r.len() != self.teams) {
            return bad("weight matrix must be m × m".into());
        }
        if self.weights.iter().flatten().any(|w| !(-1..=1).contains(w)) {
            return bad("weights must lie in {-1, 0, 1}".into());
        }
        let cardinality = (self.grid as u128).checked_pow(self.teams as u32);
        let shape = ProductShape::new(vec![self.grid; self.teams])?;
        if cardinality != Some(shape.len() as u128) {
            return bad("joint cardinality mismatch".into());
        }
        match (self.variant, self.idio_law) {
            (DriftVariant::Plain, _) => {}
            (DriftVariant::PeriodicIdiosyncratic, None) => {
                return bad("periodic variant needs an idiosyncratic law".into())
            }
            (DriftVariant::PeriodicIdiosyncratic, Some(law)) => {
                FinitePmf::from_weights(law.to_vec())?;
                if (law[2] - law[0]).abs() > 1e-12 {
                    return bad(format!("idiosyncratic law {law:?} does not have mean zero"));
                }
            }
        }
        Ok(())
    }
}

/// Dynamics of the drift-of-intentions model.
///
/// The joint action marginal of `ā` is reweighted by the exponential common
/// noise `Z⁰`, one joint outcome is drawn from it with `u⁰`, and team `i`
/// moves to its coordinate (plus its own shift, modulo `G`, in the periodic
/// variant). Cost: `|x − x*^i| + Σ_{j≠i} w^i_j Σ_y |x − y| pr_{x^j}(ā)(y)`.
pub struct DriftDynamics {
    params: DriftParams,
    action_shape: ProductShape,
}

impl DriftDynamics {
    pub fn new(params: DriftParams) -> Result<Self> {
        params.validate()?;
        let action_shape = ProductShape::new(vec![params.grid; params.teams])?;
        Ok(Self { params, action_shape })
    }

    /// Joint outcome `ρ([Z⁰ pr_a(ā)], u⁰)` as a joint-action index.
    pub fn sample_outcome(&self, bar_a: &JointLaw, global: &[f64]) -> usize {
        let w = bar_a.action_marginal();
        let z = PerturbationVector::new(global[1..].to_vec()).expect("exponential noise is nonnegative");
        let perturbed = prob::perturb(&w, &z, self.params.zero_rule).expect("noise length matches K");
        prob::inverse_cdf_index(perturbed.weights(), global[0])
    }

    fn shift(&self, coordinate: usize, idio: &[f64]) -> usize {
        match self.params.variant {
            DriftVariant::Plain => coordinate,
            DriftVariant::PeriodicIdiosyncratic => {
                let g = self.params.grid as i64;
                (coordinate as i64 + idio[0] as i64).rem_euclid(g) as usize
            }
        }
    }

    fn cost_with(&self, team: usize, x: usize, marginals: &[Vec<f64>]) -> f64 {
        let p = &self.params;
        let mut c = (x as f64 - p.targets[team] as f64).abs();
        for (j, law) in marginals.iter().enumerate() {
            let w = p.weights[team][j];
            if j == team || w == 0 {
                continue;
            }
            let spread: f64 = law
                .iter()
                .enumerate()
                .map(|(y, q)| (x as f64 - y as f64).abs() * q)
                .sum();
            c += w as f64 * spread;
        }
        c
    }
}

impl Dynamics for DriftDynamics {
    fn next_state(&self, team: usize, _x: usize, _a: usize, bar_a: &JointLaw, idio: &[f64], common: &CommonNoise) -> usize {
        let outcome = self.sample_outcome(bar_a, &common.global);
        let coordinate = self.action_shape.decode(outcome)[team];
        self.shift(coordinate, idio)
    }

    fn cost(&self, team: usize, x: usize, _a: usize, bar_a: &JointLaw) -> f64 {
        let marginals: Vec<Vec<f64>> = (0..self.params.teams).map(|j| bar_a.team_state_marginal(j)).collect();
        self.cost_with(team, x, &marginals)
    }

    fn bind_transition<'a>(
        &'a self,
        bar_a: &'a JointLaw,
        common: &'a CommonNoise,
    ) -> Box<dyn Fn(usize, usize, usize, &[f64]) -> usize + 'a> {
        let outcome = self.action_shape.decode(self.sample_outcome(bar_a, &common.global));
        Box::new(move |team, _x, _a, idio| self.shift(outcome[team], idio))
    }

    fn bind_cost<'a>(&'a self, bar_a: &'a JointLaw) -> Box<dyn Fn(usize, usize, usize) -> f64 + 'a> {
        let marginals: Vec<Vec<f64>> = (0..self.params.teams).map(|j| bar_a.team_state_marginal(j)).collect();
        Box::new(move |team, x, _a| self.cost_with(team, x, &marginals))
    }
}

/// Builds the drift-of-intentions MFTG.
pub fn build_drift_model(params: DriftParams) -> Result<MftgSpec> {
    build_drift_model_with_bound(params, None)
}

/// As [`build_drift_model`] with an explicitly declared cost bound.
pub fn build_drift_model_with_bound(params: DriftParams, declared: Option<f64>) -> Result<MftgSpec> {
    let dynamics = DriftDynamics::new(params.clone())?;
    let g = params.grid;
    let m = params.teams;
    let idiosyncratic = match (params.variant, params.idio_law) {
        (DriftVariant::PeriodicIdiosyncratic, Some(law)) => {
            vec![FiniteNoise::scalar(&[-1, 0, 1], law.to_vec())?; m]
        }
        _ => vec![FiniteNoise::trivial(); m],
    };
    let noise = NoiseSpec {
        idiosyncratic,
        team_common: vec![CommonSampler::None; m],
        global: CommonSampler::UniformExponentials {
            exponentials: params.joint_cardinality(),
        },
    };
    let name = match params.variant {
        DriftVariant::Plain => "drift",
        DriftVariant::PeriodicIdiosyncratic => "drift-periodic",
    };
    let mut spec = MftgSpec::new(
        name,
        vec![TeamSpace { states: g, actions: g }; m],
        params.gamma,
        declared.unwrap_or_else(|| params.cost_bound()),
        noise,
        Arc::new(dynamics),
    )?;
    spec.drift = Some(params);
    Ok(spec)
}

/// Initial lifted state as written in a model file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialLaw {
    #[default]
    #[serde(skip)]
    Uniform,
    Named(String),
    Weights(Vec<f64>),
}

impl InitialLaw {
    pub fn resolve(&self, shape: &ProductShape) -> Result<FinitePmf> {
        match self {
            InitialLaw::Uniform => Ok(FinitePmf::uniform(shape.clone())),
            InitialLaw::Named(name) if name == "uniform" => Ok(FinitePmf::uniform(shape.clone())),
            InitialLaw::Named(name) => Err(Error::Config(format!("unknown initial law {name:?}"))),
            InitialLaw::Weights(w) => FinitePmf::new(shape.clone(), w.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub master: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { master: 20_240_601 }
    }
}

/// Drift model description as stored in a TOML model file.
///
/// ```toml
/// G = 3
/// m = 2
/// targets = [0, 2]
/// weights = [[0, 1], [-1, 0]]
/// gamma = 0.9
/// variant = "plain"          # or "periodic_idiosyncratic"
/// idio_law = [0.25, 0.5, 0.25]
/// C_f = 4.0                  # optional; defaults to the exact bound
/// mu0 = "uniform"            # or explicit weights over joint states
/// [seeds]
/// master = 42
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "G")]
    pub grid: usize,
    pub m: usize,
    pub targets: Vec<usize>,
    #[serde(default)]
    pub weights: Option<Vec<Vec<i8>>>,
    pub gamma: f64,
    #[serde(default)]
    pub variant: DriftVariant,
    #[serde(default)]
    pub idio_law: Option<[f64; 3]>,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(rename = "C_f", default)]
    pub cost_bound: Option<f64>,
    #[serde(default)]
    pub zero_rule: ZeroRule,
    #[serde(default)]
    pub mu0: InitialLaw,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn params(&self) -> DriftParams {
        DriftParams {
            grid: self.grid,
            teams: self.m,
            targets: self.targets.clone(),
            weights: self
                .weights
                .clone()
                .unwrap_or_else(|| vec![vec![0; self.m]; self.m]),
            gamma: self.gamma,
            variant: self.variant,
            idio_law: self.idio_law,
            zero_rule: self.zero_rule,
        }
    }

    pub fn build(&self) -> Result<MftgSpec> {
        build_drift_model_with_bound(self.params(), self.cost_bound)
    }

    pub fn initial_law(&self, spec: &MftgSpec) -> Result<FinitePmf> {
        self.mu0.resolve(spec.state_shape())
    }
}
