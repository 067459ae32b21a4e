//! The reconstruction map Ξ and admissibility of level-1 actions.
//!
//! A level-1 action of team `i` is a law `â^i` over joint states × team-`i`
//! actions. At lifted state `μ` it is admissible when its joint-state
//! marginal equals `μ`. Given admissible actions for every team, Ξ rebuilds
//! the joint state-action law whose `(x̲, a^i)` marginals are the `â^i` and
//! whose conditional action kernel is the product of the team kernels:
//!
//! ```text
//! ā(x̲, a¹, …, a^m) = μ(x̲) · Π_i â^i(a^i | x̲)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{self, FinitePmf, KernelMatrix, ProductShape};

/// Admissibility tolerance on the state marginal.
pub const ADMISSIBLE_TOLERANCE: f64 = 1e-9;

/// `â^i`: a pmf over `X̲ × A^i`, rows indexed by joint states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamStateActionLaw {
    law: FinitePmf,
}

impl TeamStateActionLaw {
    /// Wraps a pmf whose last coordinate is the team action.
    pub fn new(law: FinitePmf) -> Result<Self> {
        if law.shape().rank() < 2 {
            return Err(Error::InvalidCoordinates {
                coords: vec![],
                rank: law.shape().rank(),
            });
        }
        Ok(Self { law })
    }

    pub fn from_weights(states: &ProductShape, actions: usize, weights: Vec<f64>) -> Result<Self> {
        let shape = states.concat(&ProductShape::flat(actions));
        Self::new(FinitePmf::new(shape, weights)?)
    }

    /// `mix(μ, kernel)` with one action row per joint state.
    pub fn from_kernel(mu: &FinitePmf, rows: &[Vec<f64>]) -> Result<Self> {
        let actions = rows.first().map_or(0, Vec::len);
        if actions == 0 {
            return Err(Error::EmptyProduct);
        }
        let kernel = KernelMatrix::new(
            mu.shape().clone(),
            ProductShape::flat(actions),
            rows.iter().cloned().map(Some).collect(),
        )?;
        Self::new(prob::mix(mu, &kernel)?)
    }

    /// `μ ⊗ q`: the same action law at every joint state.
    pub fn product(mu: &FinitePmf, q: &[f64]) -> Result<Self> {
        let rows = vec![q.to_vec(); mu.len()];
        Self::from_kernel(mu, &rows)
    }

    /// Plays action `a` at every joint state.
    pub fn vertex(mu: &FinitePmf, actions: usize, a: usize) -> Self {
        let mut weights = vec![0.0; mu.len() * actions];
        for (x, &m) in mu.weights().iter().enumerate() {
            weights[x * actions + a] = m;
        }
        let shape = mu.shape().concat(&ProductShape::flat(actions));
        Self {
            law: FinitePmf::with_tolerance(shape, weights, 1e-9).expect("vertex law of a valid pmf"),
        }
    }

    pub fn law(&self) -> &FinitePmf {
        &self.law
    }

    pub fn into_law(self) -> FinitePmf {
        self.law
    }

    pub fn action_count(&self) -> usize {
        *self.law.shape().dims().last().unwrap()
    }

    pub fn state_count(&self) -> usize {
        self.law.len() / self.action_count()
    }

    pub fn state_shape(&self) -> ProductShape {
        let rank = self.law.shape().rank();
        self.law.shape().slice(0..rank - 1).unwrap()
    }

    pub fn weight(&self, state: usize, action: usize) -> f64 {
        self.law.weight(state * self.action_count() + action)
    }

    pub fn row_mass(&self, state: usize) -> &[f64] {
        let a = self.action_count();
        &self.law.weights()[state * a..(state + 1) * a]
    }

    /// Joint-state marginal `pr_x(â)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.law
            .weights()
            .chunks(self.action_count())
            .map(|c| c.iter().sum())
            .collect()
    }

    /// Action marginal `pr_a(â)`.
    pub fn action_marginal(&self) -> Vec<f64> {
        let a = self.action_count();
        let mut out = vec![0.0; a];
        for chunk in self.law.weights().chunks(a) {
            out.iter_mut().zip(chunk).for_each(|(o, w)| *o += w);
        }
        out
    }

    /// Conditional action law at joint state `state`, uniform where the
    /// state carries no mass.
    pub fn kernel_row(&self, state: usize) -> Vec<f64> {
        let row = self.row_mass(state);
        let mass: f64 = row.iter().sum();
        if mass > 0.0 {
            row.iter().map(|w| w / mass).collect()
        } else {
            vec![1.0 / row.len() as f64; row.len()]
        }
    }

    /// `pr_{(x^i, a)}(â)`: marginal on own state × own action, as a dense
    /// `|X^i| × |A^i|` row-major matrix.
    pub fn own_state_action_marginal(&self, team: usize) -> Vec<f64> {
        let states = self.state_shape();
        let own = states.dims()[team];
        let a = self.action_count();
        let mut out = vec![0.0; own * a];
        let mut coords = vec![0; states.rank()];
        for js in 0..states.len() {
            states.decode_into(js, &mut coords);
            let x = coords[team];
            for (o, w) in out[x * a..(x + 1) * a].iter_mut().zip(self.row_mass(js)) {
                *o += w;
            }
        }
        out
    }

    /// Convex combination `(1 - t) self + t other`.
    pub fn blend(&self, other: &TeamStateActionLaw, t: f64) -> Result<Self> {
        Ok(Self {
            law: self.law.blend(&other.law, t)?,
        })
    }
}

/// `ā`: a pmf over `X̲ × A¹ × … × A^m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLaw {
    law: FinitePmf,
    teams: usize,
}

impl JointLaw {
    /// Wraps a pmf whose shape is `m` state dims followed by `m` action dims.
    pub fn new(law: FinitePmf, teams: usize) -> Result<Self> {
        if teams == 0 || law.shape().rank() != 2 * teams {
            return Err(Error::InvalidCoordinates {
                coords: vec![],
                rank: law.shape().rank(),
            });
        }
        if law.len() > crate::MAX_DENSE_ENTRIES {
            return Err(Error::TooLarge(law.len()));
        }
        Ok(Self { law, teams })
    }

    pub fn law(&self) -> &FinitePmf {
        &self.law
    }

    pub fn teams(&self) -> usize {
        self.teams
    }

    pub fn state_shape(&self) -> ProductShape {
        self.law.shape().slice(0..self.teams).unwrap()
    }

    pub fn action_shape(&self) -> ProductShape {
        self.law.shape().slice(self.teams..2 * self.teams).unwrap()
    }

    /// Joint-state marginal `pr_x(ā)`.
    pub fn state_marginal(&self) -> FinitePmf {
        let width = self.action_shape().len();
        let weights = self
            .law
            .weights()
            .chunks(width)
            .map(|c| c.iter().sum())
            .collect();
        FinitePmf::with_tolerance(self.state_shape(), weights, 1e-9).unwrap()
    }

    /// Joint-action marginal `pr_a(ā)`.
    pub fn action_marginal(&self) -> FinitePmf {
        let shape = self.action_shape();
        let mut weights = vec![0.0; shape.len()];
        for chunk in self.law.weights().chunks(shape.len()) {
            weights.iter_mut().zip(chunk).for_each(|(o, w)| *o += w);
        }
        FinitePmf::with_tolerance(shape, weights, 1e-9).unwrap()
    }

    /// Law of team `j`'s state, `pr_{x^j}(ā)`.
    pub fn team_state_marginal(&self, team: usize) -> Vec<f64> {
        let states = self.state_shape();
        let mut out = vec![0.0; states.dims()[team]];
        let mut coords = vec![0; states.rank()];
        for (js, mass) in self.state_marginal().weights().iter().enumerate() {
            if *mass > 0.0 {
                states.decode_into(js, &mut coords);
                out[coords[team]] += mass;
            }
        }
        out
    }

    /// The `(x̲, a^i)` marginal.
    pub fn team_marginal(&self, team: usize) -> TeamStateActionLaw {
        let mut coords: Vec<usize> = (0..self.teams).collect();
        coords.push(self.teams + team);
        TeamStateActionLaw {
            law: prob::marginal(&self.law, &coords).expect("valid coordinates"),
        }
    }
}

/// Result of an admissibility check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Admissibility {
    pub admissible: bool,
    pub residual: f64,
}

/// Whether `pr_x(â) = μ` within [`ADMISSIBLE_TOLERANCE`].
pub fn admissible(mu: &FinitePmf, a_hat: &TeamStateActionLaw) -> Result<Admissibility> {
    if a_hat.state_count() != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            found: a_hat.state_count(),
        });
    }
    let residual = a_hat
        .state_marginal()
        .iter()
        .zip(mu.weights())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Admissibility {
        admissible: residual <= ADMISSIBLE_TOLERANCE,
        residual,
    })
}

/// Replaces the state marginal of `â` by `μ` while keeping its kernel;
/// rows where `â` has no mass become uniform.
pub fn project_admissible(mu: &FinitePmf, a_hat: &TeamStateActionLaw) -> Result<TeamStateActionLaw> {
    let check = admissible(mu, a_hat)?;
    if check.residual <= 1e-14 {
        return Ok(a_hat.clone());
    }
    let rows: Vec<Vec<f64>> = (0..mu.len()).map(|x| a_hat.kernel_row(x)).collect();
    TeamStateActionLaw::from_kernel(mu, &rows)
}

/// Output of [`reconstruct_xi`].
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub joint: JointLaw,
    /// Teams whose action had to be projected onto the admissible set.
    pub projected: Vec<usize>,
}

/// Ξ^μ[â¹, …, â^m].
pub fn reconstruct_xi(mu: &FinitePmf, a_hats: &[TeamStateActionLaw]) -> Result<Reconstruction> {
    if a_hats.is_empty() {
        return Err(Error::EmptyProduct);
    }
    let mut projected = Vec::new();
    let mut laws = Vec::with_capacity(a_hats.len());
    for (i, a_hat) in a_hats.iter().enumerate() {
        if a_hat.state_shape() != *mu.shape() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                found: a_hat.state_count(),
            });
        }
        if admissible(mu, a_hat)?.admissible {
            laws.push(a_hat.clone());
        } else {
            projected.push(i);
            laws.push(project_admissible(mu, a_hat)?);
        }
    }
    let action_dims: Vec<usize> = laws.iter().map(|l| l.action_count()).collect();
    let action_shape = ProductShape::new(action_dims.clone())?;
    let width = action_shape.len();
    let total = mu.len() * width;
    if total > crate::MAX_DENSE_ENTRIES {
        return Err(Error::TooLarge(total));
    }
    let mut weights = vec![0.0; total];
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(laws.len());
    let mut coords = vec![0; laws.len()];
    for (x, &mass) in mu.weights().iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        rows.clear();
        rows.extend(laws.iter().map(|l| l.kernel_row(x)));
        let block = &mut weights[x * width..(x + 1) * width];
        for (ja, slot) in block.iter_mut().enumerate() {
            action_shape.decode_into(ja, &mut coords);
            let mut w = mass;
            for (row, &a) in rows.iter().zip(&coords) {
                w *= row[a];
            }
            *slot = w;
        }
    }
    let shape = mu.shape().concat(&action_shape);
    let law = FinitePmf::with_tolerance(shape, weights, 1e-9)?;
    Ok(Reconstruction {
        joint: JointLaw::new(law, laws.len())?,
        projected,
    })
}

/// Residuals of a candidate joint law against the two defining properties
/// of Ξ.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct XiResidualReport {
    /// Max deviation of the `(x̲, a^i)` marginal from `â^i`, per team.
    pub marginal: Vec<f64>,
    /// Max deviation of the conditional kernel from the product of team
    /// kernels, over joint states in the support of `μ`.
    pub product: f64,
}

impl XiResidualReport {
    pub fn max(&self) -> f64 {
        self.marginal.iter().copied().fold(self.product, f64::max)
    }

    /// Within `tol` on both properties; by uniqueness the joint then equals
    /// the Ξ output.
    pub fn certifies(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

pub fn verify_xi(
    joint: &JointLaw,
    mu: &FinitePmf,
    a_hats: &[TeamStateActionLaw],
) -> Result<XiResidualReport> {
    if joint.teams() != a_hats.len() {
        return Err(Error::DimensionMismatch {
            expected: a_hats.len(),
            found: joint.teams(),
        });
    }
    let marginal = a_hats
        .iter()
        .enumerate()
        .map(|(i, a_hat)| joint.team_marginal(i).law().max_abs_diff(a_hat.law()))
        .collect();
    let action_shape = joint.action_shape();
    let width = action_shape.len();
    let mut coords = vec![0; a_hats.len()];
    let mut product: f64 = 0.0;
    for x in mu.support() {
        let block = &joint.law().weights()[x * width..(x + 1) * width];
        let mass: f64 = block.iter().sum();
        let rows: Vec<Vec<f64>> = a_hats.iter().map(|a| a.kernel_row(x)).collect();
        for (ja, &w) in block.iter().enumerate() {
            action_shape.decode_into(ja, &mut coords);
            let expected: f64 = rows.iter().zip(&coords).map(|(r, &a)| r[a]).product();
            let observed = if mass > 0.0 { w / mass } else { 0.0 };
            product = product.max((observed - expected).abs());
        }
        if mass == 0.0 {
            product = product.max(1.0);
        }
    }
    Ok(XiResidualReport { marginal, product })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(d: &[usize]) -> ProductShape {
        ProductShape::new(d.to_vec()).unwrap()
    }

    fn mu2() -> FinitePmf {
        FinitePmf::new(shape(&[2, 2]), vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    #[test]
    fn mixed_actions_are_admissible() {
        let mu = mu2();
        let a = TeamStateActionLaw::from_kernel(
            &mu,
            &[vec![1.0, 0.0], vec![0.3, 0.7], vec![0.5, 0.5], vec![0.0, 1.0]],
        )
        .unwrap();
        let check = admissible(&mu, &a).unwrap();
        assert!(check.admissible && check.residual <= 1e-15);

        let other = FinitePmf::uniform(shape(&[2, 2]));
        let off = TeamStateActionLaw::product(&other, &[0.5, 0.5]).unwrap();
        assert!(!admissible(&mu, &off).unwrap().admissible);
    }

    #[test]
    fn xi_single_team_returns_input() {
        let mu = FinitePmf::new(shape(&[3]), vec![0.2, 0.0, 0.8]).unwrap();
        let a = TeamStateActionLaw::from_kernel(&mu, &[vec![0.1, 0.9], vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let rec = reconstruct_xi(&mu, std::slice::from_ref(&a)).unwrap();
        assert!(rec.projected.is_empty());
        assert!(rec.joint.law().max_abs_diff(a.law()) < 1e-15);
    }

    #[test]
    fn xi_of_constant_kernels_is_a_product() {
        let mu = mu2();
        let q1 = [0.25, 0.75];
        let q2 = [0.6, 0.1, 0.3];
        let a1 = TeamStateActionLaw::product(&mu, &q1).unwrap();
        let a2 = TeamStateActionLaw::product(&mu, &q2).unwrap();
        let rec = reconstruct_xi(&mu, &[a1, a2]).unwrap();
        let expected = prob::product(&[
            mu.clone(),
            FinitePmf::from_weights(q1.to_vec()).unwrap(),
            FinitePmf::from_weights(q2.to_vec()).unwrap(),
        ])
        .unwrap();
        assert!(rec.joint.law().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn xi_projects_inadmissible_inputs_and_flags_them() {
        let mu = mu2();
        let wrong = TeamStateActionLaw::product(&FinitePmf::uniform(shape(&[2, 2])), &[0.5, 0.5]).unwrap();
        let right = TeamStateActionLaw::product(&mu, &[1.0, 0.0]).unwrap();
        let rec = reconstruct_xi(&mu, &[right, wrong]).unwrap();
        assert_eq!(rec.projected, vec![1]);
        assert!(rec.joint.state_marginal().max_abs_diff(&mu) < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let mu = mu2();
        let a = TeamStateActionLaw::from_kernel(&mu, &[vec![1.0, 0.0], vec![0.3, 0.7], vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        assert_eq!(project_admissible(&mu, &a).unwrap(), a);

        let other = FinitePmf::new(shape(&[2, 2]), vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let q = [0.2, 0.8];
        let moved = project_admissible(&mu, &TeamStateActionLaw::product(&other, &q).unwrap()).unwrap();
        let expected = TeamStateActionLaw::product(&mu, &q).unwrap();
        assert!(moved.law().max_abs_diff(expected.law()) < 1e-15);

        // Mass where â has none gets a uniform row.
        let partial = FinitePmf::new(shape(&[2, 2]), vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let p = project_admissible(&mu, &TeamStateActionLaw::product(&partial, &q).unwrap()).unwrap();
        assert!((p.weight(2, 0) - 0.15).abs() < 1e-15);
        assert!(admissible(&mu, &p).unwrap().admissible);
    }

    #[test]
    fn verify_detects_injected_error() {
        let mu = mu2();
        let a1 = TeamStateActionLaw::from_kernel(&mu, &[vec![0.9, 0.1], vec![0.3, 0.7], vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let a2 = TeamStateActionLaw::from_kernel(&mu, &[vec![0.4, 0.6], vec![1.0, 0.0], vec![0.1, 0.9], vec![0.6, 0.4]]).unwrap();
        let hats = [a1, a2];
        let joint = reconstruct_xi(&mu, &hats).unwrap().joint;
        let clean = verify_xi(&joint, &mu, &hats).unwrap();
        assert!(clean.max() <= 1e-15, "{clean:?}");

        let mut w = joint.law().weights().to_vec();
        w[5] += 1e-3;
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let bumped = JointLaw::new(FinitePmf::new(joint.law().shape().clone(), w).unwrap(), 2).unwrap();
        let report = verify_xi(&bumped, &mu, &hats).unwrap();
        assert!(report.max() > 5e-4 && report.max() < 5e-3, "{report:?}");
        assert!(!report.certifies(1e-12));
    }

    #[test]
    fn own_state_action_marginal_sums_rows() {
        let mu = mu2();
        let a = TeamStateActionLaw::from_kernel(&mu, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // Team 1 is the second coordinate: x² = 0 on states 0 and 2.
        let m = a.own_state_action_marginal(1);
        assert!((m[0] - 0.4).abs() < 1e-15 && m[1] == 0.0);
        assert!(m[2] == 0.0 && (m[3] - 0.6).abs() < 1e-15);
    }
}
