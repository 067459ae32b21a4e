//! Probability primitives over finite index sets.
//!
//! Every law in the crate is a [`FinitePmf`] over a [`ProductShape`]: an
//! ordered Cartesian product of `0..d` ranges. Atoms are stored in canonical
//! lexicographic order with the last coordinate varying fastest, so a pmf
//! over `X¹ × X²` with `|X¹| = |X²| = 3` lists `(0,0), (0,1), (0,2), (1,0), …`.
//! That single convention fixes inverse-CDF sampling, tie-breaking and
//! serialization everywhere.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a valid pmf.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Mixed-radix description of a finite product space.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProductShape {
    dims: Vec<usize>,
}

impl ProductShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyProduct);
        }
        if dims.contains(&0) {
            return Err(Error::InvalidWeights(format!(
                "product shape {dims:?} has an empty factor"
            )));
        }
        Ok(Self { dims })
    }

    /// One-dimensional shape with `n` atoms.
    pub fn flat(n: usize) -> Self {
        assert!(n > 0, "flat shape needs at least one atom");
        Self { dims: vec![n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Number of atoms.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Canonical index of a coordinate tuple.
    pub fn encode(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dims.len());
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| {
                debug_assert!(c < d);
                acc * d + c
            })
    }

    /// Writes the coordinate tuple of `index` into `out`.
    pub fn decode_into(&self, mut index: usize, out: &mut [usize]) {
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = index % d;
            index /= d;
        }
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        self.decode_into(index, &mut out);
        out
    }

    /// Shape of `self × other`.
    pub fn concat(&self, other: &ProductShape) -> ProductShape {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        ProductShape { dims }
    }

    /// Sub-shape made of the given coordinates.
    pub fn select(&self, coords: &[usize]) -> Result<ProductShape> {
        validate_coords(coords, self.rank())?;
        Ok(ProductShape {
            dims: coords.iter().map(|&c| self.dims[c]).collect(),
        })
    }

    /// Sub-shape made of the coordinates in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<ProductShape> {
        let coords: Vec<usize> = range.collect();
        self.select(&coords)
    }
}

fn validate_coords(coords: &[usize], rank: usize) -> Result<()> {
    let ok = !coords.is_empty()
        && coords.windows(2).all(|w| w[0] < w[1])
        && coords.iter().all(|&c| c < rank);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidCoordinates {
            coords: coords.to_vec(),
            rank,
        })
    }
}

/// A probability vector over the atoms of a [`ProductShape`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinitePmf {
    shape: ProductShape,
    weights: Vec<f64>,
}

impl FinitePmf {
    /// Validated constructor: weights nonnegative, summing to one within
    /// [`SUM_TOLERANCE`].
    pub fn new(shape: ProductShape, weights: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(shape, weights, SUM_TOLERANCE)
    }

    /// Same as [`FinitePmf::new`] with a caller-chosen mass tolerance, for
    /// values carrying a numerical error budget (quadrature, Monte Carlo).
    pub fn with_tolerance(shape: ProductShape, weights: Vec<f64>, tol: f64) -> Result<Self> {
        if weights.len() != shape.len() {
            return Err(Error::DimensionMismatch {
                expected: shape.len(),
                found: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidWeights(format!("negative or non-finite weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidWeights(format!("weights sum to {total}")));
        }
        Ok(Self { shape, weights })
    }

    /// One-dimensional pmf.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyProduct);
        }
        Self::new(ProductShape::flat(weights.len()), weights)
    }

    /// Normalizes nonnegative raw masses.
    pub fn normalized(shape: ProductShape, mut raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidWeights("negative or non-finite mass".into()));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidWeights("zero total mass".into()));
        }
        raw.iter_mut().for_each(|w| *w /= total);
        Self::new(shape, raw)
    }

    pub fn dirac(shape: ProductShape, index: usize) -> Self {
        let mut weights = vec![0.0; shape.len()];
        weights[index] = 1.0;
        Self { shape, weights }
    }

    pub fn uniform(shape: ProductShape) -> Self {
        let n = shape.len();
        Self {
            weights: vec![1.0 / n as f64; n],
            shape,
        }
    }

    pub fn shape(&self) -> &ProductShape {
        &self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.weights[index]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Indices of atoms with positive mass, in canonical order.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i)
    }

    /// The atom carrying all the mass, if any.
    pub fn as_dirac(&self) -> Option<usize> {
        let mut support = self.support();
        match (support.next(), support.next()) {
            (Some(i), None) if self.weights[i] == 1.0 => Some(i),
            _ => None,
        }
    }

    pub fn max_abs_diff(&self, other: &FinitePmf) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// L1 distance (twice the total variation).
    pub fn l1_distance(&self, other: &FinitePmf) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Reinterprets the atoms under another shape of equal cardinality.
    pub fn reshaped(self, shape: ProductShape) -> Result<Self> {
        if shape.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                found: shape.len(),
            });
        }
        Ok(Self {
            shape,
            weights: self.weights,
        })
    }

    /// Convex combination `(1 - t) self + t other`.
    pub fn blend(&self, other: &FinitePmf, t: f64) -> Result<FinitePmf> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        FinitePmf::new(self.shape.clone(), weights)
    }
}

/// Nonnegative reweighting vector `Z` applied by [`perturb`].
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationVector(Vec<f64>);

impl PerturbationVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|z| !(*z >= 0.0) || !z.is_finite()) {
            return Err(Error::InvalidWeights(
                "perturbation entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self(entries))
    }

    /// `k` i.i.d. unit-exponential entries.
    pub fn exponential<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        Self((0..k).map(|_| Exp1.sample(rng)).collect())
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// When a perturbation falls back to the uniform law.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroRule {
    /// Uniform only when the normalizer `Σ Z_k μ_k` vanishes.
    #[default]
    Normalizer,
    /// Uniform as soon as any coordinate of `Z` is zero.
    AnyZeroCoordinate,
}

/// The perturbed measure `[Zμ]_k = Z_k μ_k / Σ_j Z_j μ_j`.
pub fn perturb(mu: &FinitePmf, z: &PerturbationVector, rule: ZeroRule) -> Result<FinitePmf> {
    if z.len() != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            found: z.len(),
        });
    }
    if rule == ZeroRule::AnyZeroCoordinate && z.entries().iter().any(|&v| v == 0.0) {
        return Ok(FinitePmf::uniform(mu.shape().clone()));
    }
    let raw: Vec<f64> = mu
        .weights()
        .iter()
        .zip(z.entries())
        .map(|(m, z)| m * z)
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Ok(FinitePmf::uniform(mu.shape().clone()));
    }
    let weights = raw.into_iter().map(|w| w / total).collect();
    FinitePmf::new(mu.shape().clone(), weights)
}

/// Finite-space Blackwell–Dubins map: the smallest atom `k` with
/// `u < F(k)`, where `F` is the cumulative mass in canonical order.
pub fn inverse_cdf_sample(mu: &FinitePmf, u: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::OutsideUnitInterval(u));
    }
    Ok(inverse_cdf_index(mu.weights(), u))
}

/// Inverse-CDF lookup on raw weights; `u` must already lie in `[0, 1)`.
pub(crate) fn inverse_cdf_index(weights: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cumulative += w;
            last_positive = k;
            if u < cumulative {
                return k;
            }
        }
    }
    // Rounding left the final cumulative mass just below `u`.
    last_positive
}

/// Product measure over the concatenated shape.
pub fn product(mus: &[FinitePmf]) -> Result<FinitePmf> {
    let (first, rest) = mus.split_first().ok_or(Error::EmptyProduct)?;
    let mut shape = first.shape().clone();
    let mut weights = first.weights().to_vec();
    for mu in rest {
        let mut next = Vec::with_capacity(weights.len() * mu.len());
        for &a in &weights {
            next.extend(mu.weights().iter().map(|&b| a * b));
        }
        weights = next;
        shape = shape.concat(mu.shape());
    }
    if weights.len() > crate::MAX_DENSE_ENTRIES {
        return Err(Error::TooLarge(weights.len()));
    }
    FinitePmf::new(shape, weights)
}

/// Marginal on the (strictly increasing) coordinate list `coords`.
pub fn marginal(joint: &FinitePmf, coords: &[usize]) -> Result<FinitePmf> {
    let shape = joint.shape();
    let target = shape.select(coords)?;
    if coords.len() == shape.rank() {
        return Ok(joint.clone());
    }
    let mut out = vec![0.0; target.len()];
    let mut full = vec![0; shape.rank()];
    let mut kept = vec![0; coords.len()];
    for (index, &w) in joint.weights().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        shape.decode_into(index, &mut full);
        for (k, &c) in kept.iter_mut().zip(coords) {
            *k = full[c];
        }
        out[target.encode(&kept)] += w;
    }
    FinitePmf::new(target, out)
}

/// Row-stochastic kernel from a source product to a target product.
/// Rows are `None` where the base measure it was extracted from is null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    source: ProductShape,
    target: ProductShape,
    rows: Vec<Option<Vec<f64>>>,
}

impl KernelMatrix {
    pub fn new(
        source: ProductShape,
        target: ProductShape,
        rows: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        if rows.len() != source.len() {
            return Err(Error::DimensionMismatch {
                expected: source.len(),
                found: rows.len(),
            });
        }
        for row in rows.iter().flatten() {
            FinitePmf::new(target.clone(), row.clone())?;
        }
        Ok(Self {
            source,
            target,
            rows,
        })
    }

    /// Every row equal to `q`.
    pub fn constant(source: ProductShape, q: &FinitePmf) -> Self {
        let rows = vec![Some(q.weights().to_vec()); source.len()];
        Self {
            source,
            target: q.shape().clone(),
            rows,
        }
    }

    pub fn source(&self) -> &ProductShape {
        &self.source
    }

    pub fn target(&self) -> &ProductShape {
        &self.target
    }

    pub fn row(&self, index: usize) -> Option<&[f64]> {
        self.rows[index].as_deref()
    }

    pub fn rows(&self) -> &[Option<Vec<f64>>] {
        &self.rows
    }

    /// Replaces undefined rows by the uniform law on the target.
    pub fn fill_uniform(mut self) -> Self {
        let n = self.target.len();
        for row in self.rows.iter_mut().filter(|r| r.is_none()) {
            *row = Some(vec![1.0 / n as f64; n]);
        }
        self
    }
}

/// Splits a joint law over `X × A` (the first `x_rank` coordinates form `X`)
/// into its base marginal and the conditional kernel.
pub fn disintegrate(joint: &FinitePmf, x_rank: usize) -> Result<(FinitePmf, KernelMatrix)> {
    let shape = joint.shape();
    if x_rank == 0 || x_rank >= shape.rank() {
        return Err(Error::InvalidCoordinates {
            coords: (0..x_rank).collect(),
            rank: shape.rank(),
        });
    }
    let source = shape.slice(0..x_rank)?;
    let target = shape.slice(x_rank..shape.rank())?;
    let width = target.len();
    let mut base = Vec::with_capacity(source.len());
    let mut rows = Vec::with_capacity(source.len());
    for chunk in joint.weights().chunks(width) {
        let mass: f64 = chunk.iter().sum();
        base.push(mass);
        rows.push((mass > 0.0).then(|| chunk.iter().map(|w| w / mass).collect()));
    }
    Ok((
        FinitePmf::new(source.clone(), base)?,
        KernelMatrix {
            source,
            target,
            rows,
        },
    ))
}

/// Semi-product `base ⊛ kernel`: `joint(x, a) = base(x) · kernel(a | x)`.
pub fn mix(base: &FinitePmf, kernel: &KernelMatrix) -> Result<FinitePmf> {
    if base.shape() != kernel.source() {
        return Err(Error::DimensionMismatch {
            expected: kernel.source().len(),
            found: base.len(),
        });
    }
    let width = kernel.target().len();
    let mut weights = Vec::with_capacity(base.len() * width);
    for (x, &mass) in base.weights().iter().enumerate() {
        match kernel.row(x) {
            Some(row) => weights.extend(row.iter().map(|q| mass * q)),
            None if mass == 0.0 => weights.extend(std::iter::repeat_n(0.0, width)),
            None => return Err(Error::UndefinedKernelRow(x)),
        }
    }
    FinitePmf::new(base.shape().concat(kernel.target()), weights)
}

/// Stopping threshold on successive global quadrature estimates.
const QUADRATURE_CHANGE_TOL: f64 = 1e-10;
/// Hard cap on integrand evaluations.
const QUADRATURE_NODE_CAP: usize = 1 << 20;
const GAUSS_ORDER: usize = 10;

/// `E[[Zμ]]` for `Z` with i.i.d. unit-exponential entries.
///
/// For an atom `k` in the support,
/// `E[[Zμ]_k] = ∫₀^∞ μ_k/(1+μ_k t) · Π_j 1/(1+μ_j t) dt`. The integral is
/// mapped to `[0, 1)` with `t = s/(1-s)` and evaluated by Gauss–Legendre
/// panels that are bisected wherever the panel estimate and its two-halves
/// estimate disagree, until successive global estimates move by less than
/// `1e-10` and the summed panel discrepancy is below the same bound.
pub fn perturbed_mean_quadrature(mu: &FinitePmf) -> Result<FinitePmf> {
    let support: Vec<usize> = mu.support().collect();
    if support.len() == 1 {
        return Ok(FinitePmf::dirac(mu.shape().clone(), support[0]));
    }
    let w: Vec<f64> = support.iter().map(|&k| mu.weight(k)).collect();
    let n = w.len();
    let rule = gauss_legendre(GAUSS_ORDER);

    // After substitution, 1/(1 + w t) = (1 - s)/((1 - s) + w s), and the
    // Jacobian (1 - s)^-2 absorbs two such factors, leaving
    // w_k (1 - s)^(n-1) / [((1 - s) + w_k s) Π_j ((1 - s) + w_j s)].
    let integrand = |s: f64, out: &mut [f64]| {
        let r = 1.0 - s;
        let mut denom = 1.0;
        for &wj in &w {
            denom *= r + wj * s;
        }
        let lead = r.powi(n as i32 - 1) / denom;
        for (o, &wk) in out.iter_mut().zip(&w) {
            *o = lead * wk / (r + wk * s);
        }
    };

    let panel = |a: f64, b: f64| -> (Vec<f64>, f64) {
        let coarse = gauss_panel(&rule, a, b, n, &integrand);
        let mid = 0.5 * (a + b);
        let left = gauss_panel(&rule, a, mid, n, &integrand);
        let right = gauss_panel(&rule, mid, b, n, &integrand);
        let fine: Vec<f64> = left.iter().zip(&right).map(|(l, r)| l + r).collect();
        let err = fine
            .iter()
            .zip(&coarse)
            .map(|(f, c)| (f - c).abs())
            .fold(0.0, f64::max);
        (fine, err)
    };

    const INITIAL_PANELS: usize = 16;
    let mut panels: Vec<(f64, f64, Vec<f64>, f64)> = (0..INITIAL_PANELS)
        .map(|i| {
            let a = i as f64 / INITIAL_PANELS as f64;
            let b = (i + 1) as f64 / INITIAL_PANELS as f64;
            let (v, e) = panel(a, b);
            (a, b, v, e)
        })
        .collect();
    let mut nodes = INITIAL_PANELS * 3 * GAUSS_ORDER;
    let sum_panels = |panels: &[(f64, f64, Vec<f64>, f64)]| -> Vec<f64> {
        let mut total = vec![0.0; n];
        for (_, _, v, _) in panels {
            total.iter_mut().zip(v).for_each(|(t, x)| *t += x);
        }
        total
    };
    let mut estimate = sum_panels(&panels);
    loop {
        let total_err: f64 = panels.iter().map(|p| p.3).sum();
        // Per-panel budget proportional to width keeps the total in check.
        let threshold = 1e-3 * QUADRATURE_CHANGE_TOL;
        let mut refined = Vec::with_capacity(panels.len() * 2);
        let mut split_any = false;
        for (a, b, v, e) in panels {
            if e > threshold * (b - a) {
                let mid = 0.5 * (a + b);
                let (vl, el) = panel(a, mid);
                let (vr, er) = panel(mid, b);
                refined.push((a, mid, vl, el));
                refined.push((mid, b, vr, er));
                nodes += 6 * GAUSS_ORDER;
                split_any = true;
            } else {
                refined.push((a, b, v, e));
            }
        }
        panels = refined;
        let next = sum_panels(&panels);
        let change = next
            .iter()
            .zip(&estimate)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        estimate = next;
        if (!split_any || change < QUADRATURE_CHANGE_TOL) && total_err < QUADRATURE_CHANGE_TOL {
            break;
        }
        if nodes > QUADRATURE_NODE_CAP {
            return Err(Error::QuadratureNonConvergence {
                nodes,
                last_change: change,
            });
        }
    }

    let mut weights = vec![0.0; mu.len()];
    for (&k, v) in support.iter().zip(estimate) {
        weights[k] = v;
    }
    FinitePmf::with_tolerance(mu.shape().clone(), weights, 1e-9)
}

fn gauss_panel(
    rule: &(Vec<f64>, Vec<f64>),
    a: f64,
    b: f64,
    n: usize,
    f: &impl Fn(f64, &mut [f64]),
) -> Vec<f64> {
    let half = 0.5 * (b - a);
    let centre = 0.5 * (a + b);
    let mut acc = vec![0.0; n];
    let mut buf = vec![0.0; n];
    for (x, w) in rule.0.iter().zip(&rule.1) {
        f(centre + half * x, &mut buf);
        acc.iter_mut().zip(&buf).for_each(|(a, v)| *a += w * half * v);
    }
    acc
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` via Newton iteration on
/// the Legendre polynomial.
pub(crate) fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let n = order as f64;
    for i in 0..order {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut derivative = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            derivative = n * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / derivative;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * derivative * derivative);
    }
    (nodes, weights)
}

/// Monte Carlo estimate of `E[[Zμ]]` with unit-exponential `Z`, returning
/// the componentwise mean and standard error.
pub fn perturbed_mean_monte_carlo<R: Rng + ?Sized>(
    mu: &FinitePmf,
    samples: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let k = mu.len();
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    let mut z = vec![0.0; k];
    for _ in 0..samples {
        let mut total = 0.0;
        for (zj, &m) in z.iter_mut().zip(mu.weights()) {
            let e: f64 = Exp1.sample(rng);
            *zj = e * m;
            total += *zj;
        }
        for j in 0..k {
            let v = z[j] / total;
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let n = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0) / (n - 1.0).max(1.0)).sqrt())
        .collect();
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pmf(w: &[f64]) -> FinitePmf {
        FinitePmf::from_weights(w.to_vec()).unwrap()
    }

    #[test]
    fn shape_encoding_is_lexicographic() {
        let s = ProductShape::new(vec![3, 3]).unwrap();
        assert_eq!(s.encode(&[0, 2]), 2);
        assert_eq!(s.encode(&[1, 0]), 3);
        assert_eq!(s.decode(7), vec![2, 1]);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(FinitePmf::from_weights(vec![0.5, 0.6]).is_err());
        assert!(FinitePmf::from_weights(vec![1.5, -0.5]).is_err());
        assert!(FinitePmf::from_weights(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn perturb_examples() {
        let half = pmf(&[0.5, 0.5]);
        let same = perturb(&half, &PerturbationVector::new(vec![3.0, 3.0]).unwrap(), ZeroRule::Normalizer).unwrap();
        assert_eq!(same.weights(), &[0.5, 0.5]);

        let tilted = perturb(&half, &PerturbationVector::new(vec![2.0, 1.0]).unwrap(), ZeroRule::Normalizer).unwrap();
        assert!((tilted.weight(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((tilted.weight(1) - 1.0 / 3.0).abs() < 1e-15);

        let dirac = FinitePmf::dirac(ProductShape::flat(4), 2);
        let z = PerturbationVector::new(vec![0.0, 5.0, 0.1, 9.0]).unwrap();
        assert_eq!(perturb(&dirac, &z, ZeroRule::Normalizer).unwrap(), dirac);

        let zeros = PerturbationVector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(perturb(&half, &zeros, ZeroRule::Normalizer).unwrap().weights(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_rule_variants_differ_on_partial_zeros() {
        let mu = pmf(&[0.2, 0.3, 0.5]);
        let z = PerturbationVector::new(vec![0.0, 1.0, 1.0]).unwrap();
        let normalizer = perturb(&mu, &z, ZeroRule::Normalizer).unwrap();
        assert!((normalizer.weight(1) - 0.375).abs() < 1e-15);
        assert_eq!(normalizer.weight(0), 0.0);
        let literal = perturb(&mu, &z, ZeroRule::AnyZeroCoordinate).unwrap();
        assert_eq!(literal, FinitePmf::uniform(ProductShape::flat(3)));
        // Normalizer vanishes only off the support.
        let z = PerturbationVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let off = perturb(&pmf(&[0.0, 0.5, 0.5]), &z, ZeroRule::Normalizer).unwrap();
        assert_eq!(off, FinitePmf::uniform(ProductShape::flat(3)));
    }

    #[test]
    fn perturb_dimension_mismatch() {
        let z = PerturbationVector::new(vec![1.0]).unwrap();
        assert!(matches!(
            perturb(&pmf(&[0.5, 0.5]), &z, ZeroRule::Normalizer),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn inverse_cdf_examples() {
        let dirac = FinitePmf::dirac(ProductShape::flat(5), 3);
        for u in [0.0, 0.3, 0.999_999] {
            assert_eq!(inverse_cdf_sample(&dirac, u).unwrap(), 3);
        }
        let mu = pmf(&[0.3, 0.7]);
        assert_eq!(inverse_cdf_sample(&mu, 0.1).unwrap(), 0);
        assert_eq!(inverse_cdf_sample(&mu, 0.3).unwrap(), 1);
        assert!(matches!(inverse_cdf_sample(&mu, 1.0), Err(Error::OutsideUnitInterval(_))));
        assert!(inverse_cdf_sample(&mu, -0.1).is_err());
    }

    #[test]
    fn inverse_cdf_skips_leading_zero_atoms() {
        let mu = pmf(&[0.0, 0.0, 1.0]);
        assert_eq!(inverse_cdf_sample(&mu, 0.0).unwrap(), 2);
    }

    #[test]
    fn product_examples() {
        let a = pmf(&[0.5, 0.5]);
        assert_eq!(product(std::slice::from_ref(&a)).unwrap(), a);
        let p = product(&[a, pmf(&[0.3, 0.7])]).unwrap();
        let expected = [0.15, 0.35, 0.15, 0.35];
        for (w, e) in p.weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
        assert_eq!(p.shape().dims(), &[2, 2]);
        let d = product(&[
            FinitePmf::dirac(ProductShape::flat(3), 1),
            FinitePmf::dirac(ProductShape::flat(2), 0),
        ])
        .unwrap();
        assert_eq!(d.as_dirac(), Some(2));
        assert!(matches!(product(&[]), Err(Error::EmptyProduct)));
    }

    #[test]
    fn marginal_examples() {
        let joint = product(&[pmf(&[0.5, 0.5]), pmf(&[0.3, 0.7])]).unwrap();
        let second = marginal(&joint, &[1]).unwrap();
        assert!((second.weight(0) - 0.3).abs() < 1e-15);
        assert!((second.weight(1) - 0.7).abs() < 1e-15);
        assert_eq!(marginal(&joint, &[0, 1]).unwrap(), joint);
        let d = FinitePmf::dirac(ProductShape::new(vec![2, 3]).unwrap(), 5);
        assert_eq!(marginal(&d, &[0]).unwrap().as_dirac(), Some(1));
        assert!(marginal(&joint, &[1, 0]).is_err());
        assert!(marginal(&joint, &[2]).is_err());
    }

    #[test]
    fn disintegrate_product_and_dirac() {
        let mu = pmf(&[0.25, 0.0, 0.75]);
        let q = pmf(&[0.4, 0.6]);
        let joint = product(&[mu.clone(), q.clone()]).unwrap();
        let (base, kernel) = disintegrate(&joint, 1).unwrap();
        assert!(base.max_abs_diff(&mu) < 1e-15);
        for x in [0, 2] {
            let row = kernel.row(x).unwrap();
            assert!((row[0] - 0.4).abs() < 1e-15 && (row[1] - 0.6).abs() < 1e-15);
        }
        assert!(kernel.row(1).is_none());

        let d = FinitePmf::dirac(ProductShape::new(vec![3, 2]).unwrap(), 3);
        let (base, kernel) = disintegrate(&d, 1).unwrap();
        assert_eq!(base.as_dirac(), Some(1));
        assert_eq!(kernel.row(1).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn mix_examples_and_errors() {
        let base = FinitePmf::dirac(ProductShape::flat(2), 1);
        let kernel = KernelMatrix::new(
            ProductShape::flat(2),
            ProductShape::flat(2),
            vec![None, Some(vec![1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(mix(&base, &kernel).unwrap().as_dirac(), Some(2));

        let q = pmf(&[0.1, 0.9]);
        let mu = pmf(&[0.6, 0.4]);
        let joint = mix(&mu, &KernelMatrix::constant(mu.shape().clone(), &q)).unwrap();
        assert!(joint.max_abs_diff(&product(&[mu.clone(), q]).unwrap()) < 1e-15);

        let partial = KernelMatrix::new(
            ProductShape::flat(2),
            ProductShape::flat(2),
            vec![Some(vec![0.5, 0.5]), None],
        )
        .unwrap();
        assert!(matches!(mix(&mu, &partial), Err(Error::UndefinedKernelRow(1))));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
        // Exact up to degree 19.
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((integral - 2.0 / 19.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_examples() {
        let uniform = FinitePmf::uniform(ProductShape::flat(5));
        let q = perturbed_mean_quadrature(&uniform).unwrap();
        assert!(q.max_abs_diff(&uniform) < 1e-10);

        let dirac = FinitePmf::dirac(ProductShape::flat(4), 1);
        assert_eq!(perturbed_mean_quadrature(&dirac).unwrap(), dirac);

        let skew = pmf(&[1.0 / 3.0, 2.0 / 3.0]);
        let q = perturbed_mean_quadrature(&skew).unwrap();
        let expected = 2.0 * std::f64::consts::LN_2 - 1.0;
        assert!((q.weight(0) - expected).abs() < 1e-10, "{}", q.weight(0));
        assert!((q.weight(1) - (2.0 - 2.0 * std::f64::consts::LN_2)).abs() < 1e-10);
    }

    #[test]
    fn quadrature_handles_extreme_weights() {
        let mu = pmf(&[1e-7, 0.5 - 1e-7, 0.5, 0.0]);
        let q = perturbed_mean_quadrature(&mu).unwrap();
        let total: f64 = q.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(q.weight(3), 0.0);
        assert!(q.weight(0) > 0.0 && q.weight(0) < 1e-5);
    }

    #[test]
    fn monte_carlo_mean_is_close_to_quadrature() {
        let mu = pmf(&[0.1, 0.2, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mean, se) = perturbed_mean_monte_carlo(&mu, 200_000, &mut rng);
        let q = perturbed_mean_quadrature(&mu).unwrap();
        for k in 0..3 {
            assert!((mean[k] - q.weight(k)).abs() < 4.0 * se[k]);
        }
    }
}
