//! Subcommand drivers: each reads an [`ExperimentConfig`], runs one
//! experiment, writes CSV tables and a JSON summary into the output
//! directory, and reports hard invariant violations.
//!
//! Every output is a pure function of the configuration and the master
//! seed; nothing depends on timing or the thread count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::{self, equivalence_check, EquivalenceConfig, Level0Policy};
use crate::equilibrium::{self, EquilibriumConfig, SolverMode, UpdateOrder};
use crate::error::{Error, Result};
use crate::lifted::{
    self, enumerate_states, ActionGrid, KernelBackend, LiftedGame, LiftedStateSpace, Level1Policy, Level1Profile,
    Successors, DEFAULT_DP_EPS, DEFAULT_MC_SAMPLES, DEFAULT_STATE_CAP,
};
use crate::model::{MftgSpec, ModelConfig, NoiseArchitecture, StreamKey, StreamKind};
use crate::output::{write_json, CsvTable, SCHEMA_VERSION};
use crate::population::{self, SimulationConfig};
use crate::prob::{self, FinitePmf, PerturbationVector, ProductShape};
use crate::reconstruction::TeamStateActionLaw;

/// Where the model comes from: a path relative to the experiment file, or
/// an inline table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(String),
    Inline(ModelConfig),
}

/// How a level-0 policy is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySource {
    /// Flat-Dirichlet action laws with equally likely slots.
    Random { slots: usize, seed: u64 },
    /// Team `i` always plays `actions[i]`.
    Constant { actions: Vec<usize> },
}

impl Default for PolicySource {
    fn default() -> Self {
        PolicySource::Random { slots: 2, seed: 1 }
    }
}

impl PolicySource {
    pub fn build(&self, spec: &MftgSpec, space: &LiftedStateSpace) -> Result<Level0Policy> {
        match self {
            PolicySource::Random { slots, seed } => Level0Policy::random(spec, space, *slots, *seed),
            PolicySource::Constant { actions } => {
                if actions.len() != spec.team_count() {
                    return Err(Error::Config("one constant action per team is required".into()));
                }
                Level0Policy::constant(spec, space, actions)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbStatsConfig {
    /// Base pmfs; spiked, uniform and skewed cases when empty.
    pub cases: Vec<Vec<f64>>,
    pub samples: usize,
    pub draws: usize,
}

impl Default for PerturbStatsConfig {
    fn default() -> Self {
        Self {
            cases: Vec::new(),
            samples: DEFAULT_MC_SAMPLES,
            draws: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelCheckConfig {
    /// Random admissible pairs in addition to the three named cases.
    pub pairs: usize,
    pub mc_samples: usize,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        Self {
            pairs: 10,
            mc_samples: DEFAULT_MC_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueConfig {
    pub policy: PolicySource,
    pub reps: usize,
    pub tol: f64,
    pub eps: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            policy: PolicySource::default(),
            reps: 2000,
            tol: 1e-4,
            eps: DEFAULT_DP_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub mode: SolverMode,
    pub update: UpdateOrder,
    pub max_iterations: usize,
    pub eps: f64,
    pub grid: ActionGrid,
    /// `(weight, state index)` pairs; `δ` at the initial law when empty.
    pub eta: Vec<(f64, usize)>,
    /// Vertex played by each team in the initial profile.
    pub initial: Vec<usize>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            mode: SolverMode::BestResponse,
            update: UpdateOrder::RoundRobin,
            max_iterations: 50,
            eps: DEFAULT_DP_EPS,
            grid: ActionGrid::Vertices,
            eta: Vec::new(),
            initial: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PocConfig {
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub tol: f64,
    pub policy: PolicySource,
}

impl Default for PocConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1, 10, 100, 1000],
            reps: 500,
            tol: 1e-4,
            policy: PolicySource::default(),
        }
    }
}

/// An experiment file.
///
/// ```toml
/// model = "drift.toml"
/// backend = "quadrature"
/// [value]
/// reps = 2000
/// policy = { kind = "random", slots = 2, seed = 3 }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// Overrides the model's master seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub perturb_stats: PerturbStatsConfig,
    #[serde(default)]
    pub kernel_check: KernelCheckConfig,
    #[serde(default)]
    pub value: ValueConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub poc: PocConfig,
}

fn default_backend() -> String {
    "quadrature".into()
}

fn default_mc_samples() -> usize {
    DEFAULT_MC_SAMPLES
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads an experiment file, resolving a model path against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::from_toml(&fs::read_to_string(path)?)?;
        if let ModelSource::Path(model) = &config.model {
            let base = path.parent().unwrap_or(Path::new("."));
            let text = fs::read_to_string(base.join(model))?;
            config.model = ModelSource::Inline(ModelConfig::from_toml(&text)?);
        }
        Ok(config)
    }

    pub fn model_config(&self) -> Result<&ModelConfig> {
        match &self.model {
            ModelSource::Inline(m) => Ok(m),
            ModelSource::Path(p) => Err(Error::Config(format!("model file {p:?} was not loaded"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("value.tol", self.value.tol),
            ("value.eps", self.value.eps),
            ("solve.eps", self.solve.eps),
            ("poc.tol", self.poc.tol),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.value.reps == 0 || self.poc.reps == 0 || self.mc_samples == 0 {
            return Err(Error::Config("replication and sample counts must be at least 1".into()));
        }
        KernelBackend::parse(&self.backend, self.mc_samples, 0)?;
        Ok(())
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub backend: Option<String>,
}

/// Files written and hard invariant violations found by a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub violations: Vec<String>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    PerturbStats,
    KernelCheck,
    Value,
    BridgeCheck,
    Solve,
    Poc,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::PerturbStats => "perturb-stats",
            Command::KernelCheck => "kernel-check",
            Command::Value => "value",
            Command::BridgeCheck => "bridge-check",
            Command::Solve => "solve",
            Command::Poc => "poc",
        }
    }
}

struct Context {
    spec: MftgSpec,
    mu0: FinitePmf,
    seed: u64,
    backend: KernelBackend,
    out: PathBuf,
    outcome: RunOutcome,
}

impl Context {
    fn new(config: &ExperimentConfig, options: &RunOptions) -> Result<Self> {
        config.validate()?;
        let model = config.model_config()?;
        let spec = model.build()?;
        let mu0 = model.initial_law(&spec)?;
        let seed = options.seed.or(config.seed).unwrap_or(model.seeds.master);
        let name = options.backend.as_deref().unwrap_or(&config.backend);
        let backend = KernelBackend::parse(name, config.mc_samples, seed)?;
        fs::create_dir_all(&options.out)?;
        Ok(Self {
            spec,
            mu0,
            seed,
            backend,
            out: options.out.clone(),
            outcome: RunOutcome::default(),
        })
    }

    fn csv(&mut self, name: &str, table: &CsvTable) -> Result<()> {
        let path = self.out.join(name);
        table.write(&path)?;
        self.outcome.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.out.join(name);
        write_json(&path, value)?;
        self.outcome.files.push(path);
        Ok(())
    }

    fn check(&mut self, ok: bool, message: impl FnOnce() -> String) {
        if !ok {
            self.outcome.violations.push(message());
        }
    }

    /// Lifted space from the initial law; vertex successors do not depend
    /// on the backend, so the exact one is used for enumeration.
    fn space(&self) -> Result<LiftedStateSpace> {
        let backend = match self.backend {
            KernelBackend::MonteCarlo { .. } => KernelBackend::Quadrature,
            b => b,
        };
        enumerate_states(&self.spec, &self.mu0, backend, DEFAULT_STATE_CAP)
    }
}

/// Runs `command` and writes its outputs.
pub fn run(command: Command, config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutcome> {
    let mut ctx = Context::new(config, options)?;
    match command {
        Command::PerturbStats => perturb_stats(&mut ctx, &config.perturb_stats)?,
        Command::KernelCheck => kernel_check(&mut ctx, &config.kernel_check)?,
        Command::Value => value(&mut ctx, &config.value, false)?,
        Command::BridgeCheck => value(&mut ctx, &config.value, true)?,
        Command::Solve => solve(&mut ctx, &config.solve)?,
        Command::Poc => poc(&mut ctx, &config.poc)?,
    }
    Ok(ctx.outcome)
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    model: &'a str,
    seed: u64,
    backend: &'a str,
    violations: &'a [String],
    #[serde(flatten)]
    body: T,
}

fn write_summary<T: Serialize>(ctx: &mut Context, command: Command, body: T) -> Result<()> {
    let violations = ctx.outcome.violations.clone();
    let name = ctx.spec.name().to_string();
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        command: command.name(),
        model: &name,
        seed: ctx.seed,
        backend: ctx.backend.name(),
        violations: &violations,
        body,
    };
    ctx.json("summary.json", &summary)
}

fn default_perturb_cases() -> Vec<(String, Vec<f64>)> {
    let mut spiked = vec![0.0; 9];
    spiked[..3].copy_from_slice(&[0.9, 0.05, 0.05]);
    vec![
        ("spiked".into(), spiked),
        ("uniform".into(), vec![1.0 / 9.0; 9]),
        ("skewed".into(), vec![1.0 / 3.0, 2.0 / 3.0]),
    ]
}

#[derive(Serialize)]
struct PerturbCaseSummary {
    case: String,
    atoms: usize,
    samples: usize,
    quadrature_mass_error: f64,
    /// `max_k |E[[Zμ]]_k − μ_k|` by quadrature.
    quadrature_vs_base_gap: f64,
    /// `max_k |MC − quadrature| / SE`.
    mc_vs_quadrature_z: f64,
    support_preserved: bool,
}

fn perturb_stats(ctx: &mut Context, config: &PerturbStatsConfig) -> Result<()> {
    let cases: Vec<(String, Vec<f64>)> = if config.cases.is_empty() {
        default_perturb_cases()
    } else {
        config
            .cases
            .iter()
            .enumerate()
            .map(|(c, w)| (format!("case{c}"), w.clone()))
            .collect()
    };
    let arch = NoiseArchitecture::new(ctx.seed);
    let mut samples = CsvTable::new(&["case", "draw", "atom", "weight"]);
    let mut successors = CsvTable::new(&["case", "draw", "outcome"]);
    let mut means = CsvTable::new(&["case", "atom", "base", "mc_mean", "mc_se", "quadrature", "quadrature_minus_base"]);
    let mut summaries = Vec::new();
    for (c, (name, weights)) in cases.iter().enumerate() {
        let mu = FinitePmf::from_weights(weights.clone())?;
        let k = mu.len();
        let mut support_preserved = true;
        for d in 0..config.draws {
            let mut rng = arch.stream(StreamKey::new(StreamKind::Auxiliary, c, d as u64, 1, 0));
            let u: f64 = rand::Rng::random(&mut rng);
            let z = PerturbationVector::exponential(k, &mut rng);
            let perturbed = prob::perturb(&mu, &z, prob::ZeroRule::Normalizer)?;
            for (atom, &w) in perturbed.weights().iter().enumerate() {
                samples.push(vec![name.as_str().into(), d.into(), atom.into(), w.into()]);
                if (w > 0.0) != (mu.weight(atom) > 0.0) {
                    support_preserved = false;
                }
            }
            successors.push(vec![name.as_str().into(), d.into(), prob::inverse_cdf_sample(&perturbed, u)?.into()]);
        }
        let mut rng = arch.stream(StreamKey::new(StreamKind::Auxiliary, c, 0, 2, 0));
        let (mc, se) = prob::perturbed_mean_monte_carlo(&mu, config.samples, &mut rng);
        let quad = prob::perturbed_mean_quadrature(&mu)?;
        let mut z_max: f64 = 0.0;
        for atom in 0..k {
            let q = quad.weight(atom);
            means.push(vec![
                name.as_str().into(),
                atom.into(),
                mu.weight(atom).into(),
                mc[atom].into(),
                se[atom].into(),
                q.into(),
                (q - mu.weight(atom)).into(),
            ]);
            if se[atom] > 0.0 {
                z_max = z_max.max((mc[atom] - q).abs() / se[atom]);
            }
        }
        let mass_error = (quad.weights().iter().sum::<f64>() - 1.0).abs();
        ctx.check(mass_error <= 1e-9, || format!("{name}: quadrature mean sums to 1 ± {mass_error:e}"));
        ctx.check(support_preserved, || format!("{name}: a perturbation changed the support"));
        summaries.push(PerturbCaseSummary {
            case: name.clone(),
            atoms: k,
            samples: config.samples,
            quadrature_mass_error: mass_error,
            quadrature_vs_base_gap: quad.max_abs_diff(&mu),
            mc_vs_quadrature_z: z_max,
            support_preserved,
        });
    }
    ctx.csv("perturbations.csv", &samples)?;
    ctx.csv("successors.csv", &successors)?;
    ctx.csv("means.csv", &means)?;
    #[derive(Serialize)]
    struct Body {
        cases: Vec<PerturbCaseSummary>,
    }
    write_summary(ctx, Command::PerturbStats, Body { cases: summaries })
}

/// Outcome index of every successor of a drift row.
fn outcome_of(spec: &MftgSpec, mu: &FinitePmf) -> Option<usize> {
    let params = spec.drift()?;
    let shape = ProductShape::new(vec![params.grid; params.teams]).ok()?;
    (0..shape.len()).find(|&k| lifted::drift_successor(params, &shape.decode(k)).max_abs_diff(mu) <= 1e-12)
}

#[derive(Serialize)]
struct KernelCaseSummary {
    case: String,
    closed_vs_quadrature: f64,
    /// `max |MC − quadrature| / σ` with `σ² = p(1 − p)/n`.
    mc_vs_quadrature_sigma: f64,
    /// Set when the closed form and quadrature differ by more than `1e-6`.
    closed_form_flagged: bool,
    row_mass_error: f64,
}

fn random_kernel_action(mu: &FinitePmf, actions: usize, rng: &mut crate::model::StreamRng) -> Result<TeamStateActionLaw> {
    let rows: Vec<Vec<f64>> = (0..mu.len())
        .map(|_| {
            let raw: Vec<f64> = (0..actions)
                .map(|_| -(1.0 - rand::Rng::random::<f64>(rng)).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        })
        .collect();
    TeamStateActionLaw::from_kernel(mu, &rows)
}

fn kernel_check(ctx: &mut Context, config: &KernelCheckConfig) -> Result<()> {
    let params = ctx.spec.drift().ok_or(Error::NotDriftModel)?.clone();
    let spec = ctx.spec.clone();
    let mu = ctx.mu0.clone();
    let g = params.grid;
    let m = params.teams;
    let mut cases: Vec<(String, Vec<TeamStateActionLaw>)> = Vec::new();
    cases.push((
        "coordinated".into(),
        (0..m).map(|i| TeamStateActionLaw::vertex(&mu, g, (g - 1) * (i % 2))).collect(),
    ));
    cases.push((
        "uniform".into(),
        (0..m)
            .map(|_| TeamStateActionLaw::product(&mu, &vec![1.0 / g as f64; g]))
            .collect::<Result<_>>()?,
    ));
    if g >= 2 {
        let mut skew = vec![0.0; g];
        skew[0] = 1.0 / 3.0;
        skew[1] = 2.0 / 3.0;
        let mut profile = vec![TeamStateActionLaw::product(&mu, &skew)?];
        profile.extend((1..m).map(|_| TeamStateActionLaw::vertex(&mu, g, 0)));
        cases.push(("skewed".into(), profile));
    }
    let arch = NoiseArchitecture::new(ctx.seed);
    for p in 0..config.pairs {
        let mut rng = arch.stream(StreamKey::new(StreamKind::Auxiliary, 0, p as u64, 3, 0));
        let profile = (0..m)
            .map(|_| random_kernel_action(&mu, g, &mut rng))
            .collect::<Result<_>>()?;
        cases.push((format!("random{p}"), profile));
    }

    let mut rows = CsvTable::new(&["case", "backend", "outcome", "probability"]);
    let mut summaries = Vec::new();
    for (name, profile) in &cases {
        let closed = lifted::kernel_drift_closed_form(&spec, &mu, profile)?;
        let quad = lifted::kernel_drift_quadrature(&spec, &mu, profile)?;
        let mc = lifted::kernel_pushforward_mc(&spec, &mu, profile, config.mc_samples, ctx.seed)?;
        let mut mass_error: f64 = 0.0;
        for (backend, row) in [("closed_form", &closed), ("quadrature", &quad), ("mc", &mc)] {
            let mut mass = 0.0;
            for (succ, p) in row {
                let outcome = outcome_of(&spec, succ).ok_or(Error::OffSpaceSuccessor)?;
                rows.push(vec![name.as_str().into(), backend.into(), outcome.into(), (*p).into()]);
                mass += p;
            }
            mass_error = mass_error.max((mass - 1.0).abs());
        }
        let closed_gap = lifted::successor_gap(&closed, &quad);
        let sigma = mc_sigma(&mc, &quad, config.mc_samples);
        ctx.check(mass_error <= 1e-9, || format!("{name}: kernel row mass off by {mass_error:e}"));
        if name == "coordinated" {
            ctx.check(closed_gap <= 1e-12 && lifted::successor_gap(&mc, &quad) <= 1e-12, || {
                "coordinated: backends disagree".into()
            });
        }
        summaries.push(KernelCaseSummary {
            case: name.clone(),
            closed_vs_quadrature: closed_gap,
            mc_vs_quadrature_sigma: sigma,
            closed_form_flagged: closed_gap > 1e-6,
            row_mass_error: mass_error,
        });
    }
    ctx.csv("kernel_rows.csv", &rows)?;
    #[derive(Serialize)]
    struct Body {
        mc_samples: usize,
        cases: Vec<KernelCaseSummary>,
    }
    write_summary(
        ctx,
        Command::KernelCheck,
        Body {
            mc_samples: config.mc_samples,
            cases: summaries,
        },
    )
}

/// Largest standardized gap between an empirical row and exact
/// probabilities.
pub fn mc_sigma(mc: &Successors, exact: &Successors, samples: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (mu, p) in exact {
        let hat = lifted::successor_probability(mc, mu);
        let sd = (p * (1.0 - p) / samples as f64).sqrt();
        if sd > 0.0 {
            worst = worst.max((hat - p).abs() / sd);
        } else if (hat - p).abs() > 0.0 {
            worst = f64::INFINITY;
        }
    }
    for (mu, _) in mc {
        if lifted::successor_probability(exact, mu) == 0.0 {
            worst = f64::INFINITY;
        }
    }
    worst
}

fn value(ctx: &mut Context, config: &ValueConfig, full_report: bool) -> Result<()> {
    let space = ctx.space()?;
    let policy = config.policy.build(&ctx.spec, &space)?;
    let simulation = SimulationConfig::with_tolerance(&ctx.spec, config.tol, config.reps, ctx.seed);
    let eq = EquivalenceConfig {
        simulation,
        backend: ctx.backend,
        eps: config.eps,
    };
    let report = equivalence_check(&ctx.spec, &policy, &ctx.mu0, &eq)?;
    ctx.check(report.max_residual <= 1e-9, || {
        format!("lifted actions off the admissible set by {:e}", report.max_residual)
    });
    ctx.check(report.reconstruction_residual <= 1e-12, || {
        format!("tracked joint law differs from the reconstruction by {:e}", report.reconstruction_residual)
    });
    let mut table = CsvTable::new(&[
        "team",
        "level0_mean",
        "level0_se",
        "level1_value",
        "difference",
        "bound",
        "within_bound",
    ]);
    for c in &report.comparisons {
        table.push(vec![
            c.team.into(),
            c.level0_mean.into(),
            c.level0_se.into(),
            c.level1_value.into(),
            c.difference.into(),
            c.bound.into(),
            c.within_bound.into(),
        ]);
    }
    ctx.csv("values.csv", &table)?;
    if full_report {
        let lifted_profile = bridge::lift_policy(&policy)?;
        let lowered = bridge::lower_policy(&ctx.spec, &space, &lifted_profile)?;
        let again = bridge::lift_policy(&lowered)?;
        let round_trip = round_trip_gap(&lifted_profile, &again);
        ctx.check(round_trip <= 1e-12, || format!("lower/lift round trip moved marginals by {round_trip:e}"));
        let mut residuals = CsvTable::new(&["team", "state", "slot", "residual"]);
        for r in &report.residuals {
            residuals.push(vec![r.team.into(), r.state.into(), r.slot.into(), r.residual.into()]);
        }
        ctx.csv("residuals.csv", &residuals)?;
        ctx.json("correspondence.json", &report)?;
        ctx.json("policy.json", &policy.to_file())?;
        #[derive(Serialize)]
        struct Body<'a> {
            report: &'a bridge::CorrespondenceReport,
            round_trip_gap: f64,
            all_within_bounds: bool,
        }
        let all = report.all_within_bounds();
        write_summary(
            ctx,
            Command::BridgeCheck,
            Body {
                report: &report,
                round_trip_gap: round_trip,
                all_within_bounds: all,
            },
        )
    } else {
        #[derive(Serialize)]
        struct Body<'a> {
            horizon: usize,
            truncation_bound: f64,
            replications: usize,
            comparisons: &'a [bridge::TeamComparison],
            all_within_bounds: bool,
        }
        let all = report.all_within_bounds();
        write_summary(
            ctx,
            Command::Value,
            Body {
                horizon: report.horizon,
                truncation_bound: report.truncation_bound,
                replications: report.replications,
                comparisons: &report.comparisons,
                all_within_bounds: all,
            },
        )
    }
}

/// Largest difference of own-state/own-action marginals and weights
/// between two profiles with matching mixture structure.
pub fn round_trip_gap(a: &Level1Profile, b: &Level1Profile) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, (pa, pb)) in a.players.iter().zip(&b.players).enumerate() {
        for (xa, xb) in pa.actions.iter().zip(&pb.actions) {
            if xa.components().len() != xb.components().len() {
                return f64::INFINITY;
            }
            for ((wa, la), (wb, lb)) in xa.components().iter().zip(xb.components()) {
                worst = worst.max((wa - wb).abs());
                let (ma, mb) = (la.own_state_action_marginal(i), lb.own_state_action_marginal(i));
                worst = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
            }
        }
    }
    worst
}

#[derive(Serialize)]
struct ProfileFile {
    states: Vec<Vec<f64>>,
    /// `players[i][state]`: `(weight, |X̲| × |A^i| matrix)` components.
    players: Vec<Vec<Vec<(f64, Vec<Vec<f64>>)>>>,
}

fn profile_file(space: &LiftedStateSpace, profile: &Level1Profile) -> ProfileFile {
    ProfileFile {
        states: space.states().iter().map(|s| s.weights().to_vec()).collect(),
        players: profile
            .players
            .iter()
            .map(|p| {
                p.actions
                    .iter()
                    .map(|a| {
                        a.components()
                            .iter()
                            .map(|(w, law)| {
                                let rows = law.law().weights().chunks(law.action_count()).map(<[f64]>::to_vec).collect();
                                (*w, rows)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    }
}

fn solve(ctx: &mut Context, config: &SolveConfig) -> Result<()> {
    let space = ctx.space()?;
    let start = space.locate(&ctx.mu0).ok_or(Error::OffSpaceSuccessor)?;
    let spec = ctx.spec.clone();
    let game = LiftedGame::new(&spec, &space, ctx.backend);
    let m = spec.team_count();
    let initial = if config.initial.is_empty() {
        vec![0; m]
    } else {
        config.initial.clone()
    };
    if initial.len() != m || initial.iter().enumerate().any(|(i, &a)| a >= spec.team(i).actions) {
        return Err(Error::Config("solve.initial needs one valid action per team".into()));
    }
    let init = Level1Profile {
        players: (0..m)
            .map(|i| Level1Policy::constant_vertex(&spec, &space, i, initial[i]))
            .collect(),
    };
    let eq = EquilibriumConfig {
        eta: if config.eta.is_empty() {
            vec![(1.0, start)]
        } else {
            config.eta.clone()
        },
        max_iterations: config.max_iterations,
        eps: config.eps,
        mode: config.mode,
        update: config.update,
        grid: config.grid,
    };
    let trace = match config.mode {
        SolverMode::BestResponse => equilibrium::best_response_dynamics(&game, &init, &eq)?,
        SolverMode::FictitiousPlay => equilibrium::fictitious_play(&game, &init, &eq)?,
    };
    let mut table = CsvTable::new(&["iteration", "player", "value", "best_response_value", "gap", "total_gap"]);
    for entry in &trace.entries {
        let e = &entry.exploitability;
        for i in 0..m {
            table.push(vec![
                entry.iteration.into(),
                i.into(),
                e.values[i].into(),
                e.best_response_values[i].into(),
                e.gaps[i].into(),
                e.total.into(),
            ]);
            let gap = e.gaps[i];
            let bound = -2.0 * eq.eps;
            ctx.check(gap >= bound, || format!("iteration {}: gap {gap:e} of player {i} below −2 eps", entry.iteration));
        }
    }
    ctx.csv("trace.csv", &table)?;
    ctx.json("final_profile.json", &profile_file(&space, &trace.last().profile))?;
    let certificate = if trace.converged {
        let c = equilibrium::certify(&game, &trace.last().profile, &eq)?;
        ctx.check(c.passed, || "reported convergence fails the re-best-response check".into());
        Some(c)
    } else {
        None
    };
    #[derive(Serialize)]
    struct Body {
        status: &'static str,
        stop: equilibrium::StopReason,
        iterations: usize,
        states: usize,
        initial_total_gap: f64,
        final_total_gap: f64,
        best_iteration: usize,
        best_total_gap: f64,
        threshold: f64,
        certificate: Option<equilibrium::Certificate>,
    }
    let body = Body {
        status: if trace.converged { "converged" } else { "not-converged" },
        stop: trace.stop,
        iterations: trace.entries.len() - 1,
        states: space.len(),
        initial_total_gap: trace.initial().exploitability.total,
        final_total_gap: trace.last().exploitability.total,
        best_iteration: trace.best_iteration,
        best_total_gap: trace.best().exploitability.total,
        threshold: eq.threshold(m),
        certificate,
    };
    write_summary(ctx, Command::Solve, body)
}

fn poc(ctx: &mut Context, config: &PocConfig) -> Result<()> {
    let space = ctx.space()?;
    let policy = config.policy.build(&ctx.spec, &space)?;
    let simulation = SimulationConfig::with_tolerance(&ctx.spec, config.tol, config.reps, ctx.seed);
    let rows = population::propagation_of_chaos_sweep(&ctx.spec, &policy, &ctx.mu0, &config.sizes, &simulation)?;
    let mut table = CsvTable::new(&[
        "agents",
        "team",
        "population_mean",
        "population_se",
        "meanfield_mean",
        "meanfield_se",
        "gap",
        "gap_se",
    ]);
    for r in &rows {
        table.push(vec![
            r.agents.into(),
            r.team.into(),
            r.population_mean.into(),
            r.population_se.into(),
            r.meanfield_mean.into(),
            r.meanfield_se.into(),
            r.gap.into(),
            r.gap_se.into(),
        ]);
    }
    ctx.csv("poc.csv", &table)?;
    #[derive(Serialize)]
    struct Body<'a> {
        horizon: usize,
        replications: usize,
        rows: &'a [population::ChaosRow],
    }
    write_summary(
        ctx,
        Command::Poc,
        Body {
            horizon: simulation.horizon,
            replications: simulation.reps,
            rows: &rows,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_inline_experiment() {
        let text = r#"
backend = "closed_form"
[model]
G = 2
m = 1
targets = [1]
gamma = 0.9
[solve]
mode = "fictitious_play"
grid = { kind = "refined", resolution = 4 }
eta = [[1.0, 0]]
[value]
policy = { kind = "constant", actions = [1] }
"#;
        let config = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(config.solve.mode, SolverMode::FictitiousPlay);
        assert_eq!(config.solve.grid, ActionGrid::Refined { resolution: 4 });
        assert_eq!(config.value.policy, PolicySource::Constant { actions: vec![1] });
        assert_eq!(config.poc.sizes, vec![1, 10, 100, 1000]);
        assert!(ExperimentConfig::from_toml("model = 'x.toml'\nbackend = 'nope'").unwrap().validate().is_err());
    }
}
