//! Drift and diffusion operators, the shipped instances, and sampled checkers
//! for the structural assumptions (hemicontinuity, joint monotonicity,
//! coercivity and growth).
//!
//! A drift `A(t, ·): V → V'` is represented by its coordinate vector `a` with
//! `⟨A(t, x), v⟩ = Σ wᵢ aᵢ vᵢ`, i.e. through the H pairing of the triple. A
//! diffusion `B(t, ·)` is an `n × m` matrix acting on an `m`-mode truncation
//! of the cylindrical noise; its Hilbert–Schmidt norm is the weighted
//! Frobenius norm `√(Σ wᵢ Bᵢⱼ²)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::triple::{edge_gradient, signed_pow, GelfandTriple, VNormKind};

/// Opaque stand-in for the sample point `ω`. Forwarded to every evaluation;
/// the shipped instances ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Scenario(pub u64);

/// Jacobian of a coordinate drift map.
#[derive(Debug, Clone, PartialEq)]
pub enum Jacobian {
    Diagonal(Vec<f64>),
    /// `sub[i]` couples row `i+1` to column `i`, `sup[i]` row `i` to column `i+1`.
    Tridiagonal {
        sub: Vec<f64>,
        diag: Vec<f64>,
        sup: Vec<f64>,
    },
    Dense(DMatrix<f64>),
}

impl Jacobian {
    pub fn is_finite(&self) -> bool {
        match self {
            Jacobian::Diagonal(d) => d.iter().all(|v| v.is_finite()),
            Jacobian::Tridiagonal { sub, diag, sup } => {
                sub.iter().chain(diag).chain(sup).all(|v| v.is_finite())
            }
            Jacobian::Dense(m) => m.iter().all(|v| v.is_finite()),
        }
    }

    /// Maximum absolute row sum (the ∞-operator norm).
    pub fn max_row_sum(&self) -> f64 {
        match self {
            Jacobian::Diagonal(d) => d.iter().fold(0.0, |m, v| m.max(v.abs())),
            Jacobian::Tridiagonal { sub, diag, sup } => {
                let n = diag.len();
                (0..n)
                    .map(|i| {
                        let mut s = diag[i].abs();
                        if i > 0 {
                            s += sub[i - 1].abs();
                        }
                        if i + 1 < n {
                            s += sup[i].abs();
                        }
                        s
                    })
                    .fold(0.0, f64::max)
            }
            Jacobian::Dense(m) => m
                .row_iter()
                .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max),
        }
    }
}

pub trait Drift: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Coordinate vector of `A(ω, t, x)`.
    fn apply(&self, scenario: Scenario, t: f64, x: &[f64], out: &mut [f64]);
    /// Analytic Jacobian of [`Drift::apply`] in `x`, if available.
    fn jacobian(&self, _scenario: Scenario, _t: f64, _x: &[f64]) -> Option<Jacobian> {
        None
    }
    /// Component `i` of the output depends on `xᵢ` only.
    fn is_separable(&self) -> bool {
        false
    }
}

pub trait Diffusion: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn modes(&self) -> usize;
    /// `n × m` matrix of `B(ω, t, x)`.
    fn apply(&self, scenario: Scenario, t: f64, x: &[f64]) -> DMatrix<f64>;
}

/// `A(x) = a·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDrift {
    pub dim: usize,
    pub a: f64,
}

impl Drift for LinearDrift {
    fn name(&self) -> &str {
        "LinearDrift"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, _: Scenario, _: f64, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = self.a * v;
        }
    }
    fn jacobian(&self, _: Scenario, _: f64, _: &[f64]) -> Option<Jacobian> {
        Some(Jacobian::Diagonal(vec![self.a; self.dim]))
    }
    fn is_separable(&self) -> bool {
        true
    }
}

/// Component-wise `A(x)ᵢ = |xᵢ|^{p-2} xᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarPower {
    pub dim: usize,
    pub p: f64,
}

impl Drift for ScalarPower {
    fn name(&self) -> &str {
        "ScalarPower"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, _: Scenario, _: f64, x: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = signed_pow(v, self.p - 1.0);
        }
    }
    fn jacobian(&self, _: Scenario, _: f64, x: &[f64]) -> Option<Jacobian> {
        let e = self.p - 2.0;
        Some(Jacobian::Diagonal(
            x.iter()
                .map(|&v| (self.p - 1.0) * if e == 0.0 { 1.0 } else { v.abs().powf(e) })
                .collect(),
        ))
    }
    fn is_separable(&self) -> bool {
        true
    }
}

/// `A(x) = -div_h(|∇_h x|^{p-2} ∇_h x)` on a 1-D Dirichlet grid, represented
/// through the weighted H pairing so that `⟨A(x), x⟩ = ‖∇_h x‖_{ℓᵖ}ᵖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePLaplacian {
    p: f64,
    mesh_width: f64,
    weights: Vec<f64>,
}

impl DiscretePLaplacian {
    /// Builds the operator matching a triple with a discrete gradient V norm.
    pub fn on(triple: &GelfandTriple) -> Result<Self> {
        match triple.v_norm_kind() {
            VNormKind::DiscreteGradientLp { p, mesh_width, .. } => Ok(DiscretePLaplacian {
                p,
                mesh_width,
                weights: triple.weights().to_vec(),
            }),
            VNormKind::PlainLp { .. } => Err(Error::invalid(
                "DiscretePLaplacian needs a triple with a discrete gradient V norm",
            )),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    fn flux(&self, g: f64) -> f64 {
        signed_pow(g, self.p - 1.0)
    }

    fn flux_derivative(&self, g: f64) -> f64 {
        let e = self.p - 2.0;
        (self.p - 1.0) * if e == 0.0 { 1.0 } else { g.abs().powf(e) }
    }
}

impl Drift for DiscretePLaplacian {
    fn name(&self) -> &str {
        "DiscretePLaplacian"
    }
    fn dim(&self) -> usize {
        self.weights.len()
    }
    fn apply(&self, _: Scenario, _: f64, x: &[f64], out: &mut [f64]) {
        let h = self.mesh_width;
        let mut left = self.flux(edge_gradient(x, 0, h));
        for (i, o) in out.iter_mut().enumerate() {
            let right = self.flux(edge_gradient(x, i + 1, h));
            *o = (left - right) / self.weights[i];
            left = right;
        }
    }
    fn jacobian(&self, _: Scenario, _: f64, x: &[f64]) -> Option<Jacobian> {
        let n = x.len();
        let h = self.mesh_width;
        let d: Vec<f64> = (0..=n)
            .map(|e| self.flux_derivative(edge_gradient(x, e, h)) / h)
            .collect();
        let diag = (0..n)
            .map(|i| (d[i] + d[i + 1]) / self.weights[i])
            .collect();
        let sup = (0..n.saturating_sub(1))
            .map(|i| -d[i + 1] / self.weights[i])
            .collect();
        let sub = (0..n.saturating_sub(1))
            .map(|i| -d[i + 1] / self.weights[i + 1])
            .collect();
        Some(Jacobian::Tridiagonal { sub, diag, sup })
    }
}

/// `B(x) = σ Σⱼ Pⱼ x eⱼᵀ`: coordinate `i` is driven by mode `i mod m`, so
/// `‖B(x)‖_HS = σ‖x‖_H` for every `m`. With `m = 1` this is the column `σx`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplicativeScalar {
    pub dim: usize,
    pub sigma: f64,
    pub modes: usize,
}

impl Diffusion for MultiplicativeScalar {
    fn name(&self) -> &str {
        "MultiplicativeScalar"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn modes(&self) -> usize {
        self.modes
    }
    fn apply(&self, _: Scenario, _: f64, x: &[f64]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.dim, self.modes);
        for (i, &v) in x.iter().enumerate() {
            b[(i, i % self.modes)] = self.sigma * v;
        }
        b
    }
}

/// State-independent `B ≡ G₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveNoise {
    matrix: DMatrix<f64>,
}

impl AdditiveNoise {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        AdditiveNoise { matrix }
    }

    /// `G₀ = scale · [I; 0]` (first `min(n, m)` diagonal entries).
    pub fn scaled_identity(dim: usize, modes: usize, scale: f64) -> Self {
        let mut m = DMatrix::zeros(dim, modes);
        for i in 0..dim.min(modes) {
            m[(i, i)] = scale;
        }
        AdditiveNoise { matrix: m }
    }

    pub fn zero(dim: usize, modes: usize) -> Self {
        AdditiveNoise {
            matrix: DMatrix::zeros(dim, modes),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl Diffusion for AdditiveNoise {
    fn name(&self) -> &str {
        "AdditiveNoise"
    }
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn modes(&self) -> usize {
        self.matrix.ncols()
    }
    fn apply(&self, _: Scenario, _: f64, _: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// Deterministic forcing profile `t ↦ intercept + slope·t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    Constant(f64),
    Affine { intercept: f64, slope: f64 },
}

impl Profile {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Profile::Constant(c) => c,
            Profile::Affine { intercept, slope } => intercept + slope * t,
        }
    }

    /// `∫_{t0}^{t1}` of the profile.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        match *self {
            Profile::Constant(c) => c * (t1 - t0),
            Profile::Affine { intercept, slope } => {
                intercept * (t1 - t0) + 0.5 * slope * (t1 * t1 - t0 * t0)
            }
        }
    }

    fn is_nonnegative_on(&self, horizon: f64) -> bool {
        self.value(0.0) >= 0.0 && self.value(horizon) >= 0.0
    }
}

impl Default for Profile {
    fn default() -> Self {
        Profile::Constant(0.0)
    }
}

/// Structural constants of the coercivity, monotonicity and growth bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    pub c1: f64,
    pub c2: f64,
    pub p: f64,
    /// `C` in `‖A(x)‖_{V'}^q ≤ C‖x‖_Vᵖ + g`.
    pub growth: f64,
    pub f: Profile,
    pub g: Profile,
    pub horizon: f64,
}

#[derive(Debug, Clone)]
pub struct OperatorPair {
    drift: Arc<dyn Drift>,
    diffusion: Arc<dyn Diffusion>,
    constants: Constants,
}

impl OperatorPair {
    pub fn new(
        drift: Arc<dyn Drift>,
        diffusion: Arc<dyn Diffusion>,
        constants: Constants,
    ) -> Result<Self> {
        check_dim(drift.dim(), diffusion.dim())?;
        let Constants {
            c1,
            c2,
            p,
            growth,
            f,
            g,
            horizon,
        } = constants;
        if !(c1 > 0.0 && c1.is_finite()) {
            return Err(Error::invalid(format!("c1 must be positive, got {c1}")));
        }
        if !(c2 >= 0.0 && c2.is_finite()) {
            return Err(Error::invalid(format!("c2 must be nonnegative, got {c2}")));
        }
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::invalid(format!("p must lie in (1, inf), got {p}")));
        }
        if !(growth > 0.0 && growth.is_finite()) {
            return Err(Error::invalid(format!("C must be positive, got {growth}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !f.is_nonnegative_on(horizon) || !g.is_nonnegative_on(horizon) {
            return Err(Error::invalid(
                "forcing profiles f, g must be nonnegative on [0, T]",
            ));
        }
        if diffusion.modes() == 0 {
            return Err(Error::invalid("diffusion needs at least one noise mode"));
        }
        Ok(OperatorPair {
            drift,
            diffusion,
            constants,
        })
    }

    pub fn drift(&self) -> &dyn Drift {
        self.drift.as_ref()
    }

    pub fn diffusion(&self) -> &dyn Diffusion {
        self.diffusion.as_ref()
    }

    pub fn constants(&self) -> &Constants {
        &self.constants
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn modes(&self) -> usize {
        self.diffusion.modes()
    }

    pub fn horizon(&self) -> f64 {
        self.constants.horizon
    }

    /// Checks that `p` agrees with the triple and dimensions match.
    pub fn check_compatible(&self, triple: &GelfandTriple) -> Result<()> {
        check_dim(triple.dim(), self.dim())?;
        if self.constants.p != triple.p() {
            return Err(Error::invalid(format!(
                "operator exponent p = {} differs from the triple's p = {}",
                self.constants.p,
                triple.p()
            )));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon()).contains(&t) {
            return Err(Error::invalid(format!(
                "time {t} outside [0, {}]",
                self.horizon()
            )));
        }
        Ok(())
    }

    pub fn eval_drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.eval_drift_in(Scenario::default(), t, x)
    }

    pub fn eval_drift_in(&self, scenario: Scenario, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; x.len()];
        self.drift_into(scenario, t, x, &mut out)?;
        Ok(out)
    }

    pub fn eval_diffusion(&self, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        self.eval_diffusion_in(Scenario::default(), t, x)
    }

    pub fn eval_diffusion_in(&self, scenario: Scenario, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        check_dim(self.dim(), x.len())?;
        self.diffusion_at(scenario, t, x)
    }

    pub(crate) fn drift_into(
        &self,
        scenario: Scenario,
        t: f64,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        self.drift.apply(scenario, t, x, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                operator: self.drift.name().to_string(),
                t,
            })
        }
    }

    pub(crate) fn diffusion_at(
        &self,
        scenario: Scenario,
        t: f64,
        x: &[f64],
    ) -> Result<DMatrix<f64>> {
        let b = self.diffusion.apply(scenario, t, x);
        if b.nrows() != self.dim() || b.ncols() != self.modes() {
            return Err(Error::invalid(format!(
                "diffusion `{}` returned a {}x{} matrix, expected {}x{}",
                self.diffusion.name(),
                b.nrows(),
                b.ncols(),
                self.dim(),
                self.modes()
            )));
        }
        if b.iter().all(|v| v.is_finite()) {
            Ok(b)
        } else {
            Err(Error::NonFinite {
                operator: self.diffusion.name().to_string(),
                t,
            })
        }
    }
}

/// Squared Hilbert–Schmidt norm `Σᵢⱼ wᵢ Bᵢⱼ²`.
pub fn hs_norm_sq(triple: &GelfandTriple, b: &DMatrix<f64>) -> f64 {
    let w = triple.weights();
    let mut s = 0.0;
    for j in 0..b.ncols() {
        for (i, wi) in w.iter().enumerate() {
            let v = b[(i, j)];
            s += wi * v * v;
        }
    }
    s
}

/// Absolute tolerance of the assumption checks, applied relative to the
/// magnitude of the terms in each sample (`tol · max(1, |terms|)`).
pub const TOL_ASSUME: f64 = 1e-8;

/// Iterations of the dual-norm ascent used by the growth check.
const GROWTH_DUAL_ITERATIONS: usize = 50;

/// Cauchy radii are clipped here.
const MAX_SAMPLE_RADIUS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub min_joint_monotonicity_margin: f64,
    pub min_coercivity_margin: f64,
    pub max_growth_violation: f64,
    /// Worst margins divided by `max(1, |terms|)` of their sample.
    pub worst_scaled_joint: f64,
    pub worst_scaled_coercivity: f64,
    pub worst_scaled_growth: f64,
    pub samples: usize,
    pub seed: u64,
    pub pass: bool,
}

/// Heavy-tailed radial sample `r·u`, `u` uniform on the sphere, `r = |Cauchy|`.
fn sample_radial<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = u
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let c: f64 = rng.random::<f64>();
    let r = (std::f64::consts::PI * (c - 0.5))
        .tan()
        .abs()
        .min(MAX_SAMPLE_RADIUS);
    u.iter_mut().for_each(|v| *v *= r / norm);
    u
}

/// Samples the joint monotonicity, coercivity and growth inequalities.
/// A failing report is a valid result; errors are reserved for incompatible
/// inputs and non-finite evaluations.
pub fn check_assumptions(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    pair.check_compatible(triple)?;
    if samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    let n = pair.dim();
    let Constants {
        c1,
        c2,
        growth,
        f,
        g,
        ..
    } = *pair.constants();
    let q = triple.q();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = Scenario(seed);

    let mut report = AssumptionReport {
        min_joint_monotonicity_margin: f64::INFINITY,
        min_coercivity_margin: f64::INFINITY,
        max_growth_violation: f64::NEG_INFINITY,
        worst_scaled_joint: f64::INFINITY,
        worst_scaled_coercivity: f64::INFINITY,
        worst_scaled_growth: f64::NEG_INFINITY,
        samples,
        seed,
        pass: true,
    };
    let mut ax = vec![0.0; n];
    let mut ay = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut adiff = vec![0.0; n];
    for _ in 0..samples {
        let x = sample_radial(&mut rng, n);
        let y = sample_radial(&mut rng, n);
        let t = rng.random::<f64>() * pair.horizon();
        pair.drift_into(scenario, t, &x, &mut ax)?;
        pair.drift_into(scenario, t, &y, &mut ay)?;
        let bx = pair.diffusion_at(scenario, t, &x)?;
        let by = pair.diffusion_at(scenario, t, &y)?;

        for i in 0..n {
            diff[i] = x[i] - y[i];
            adiff[i] = ax[i] - ay[i];
        }
        let mono = triple.inner(&adiff, &diff);
        let bdiff = 0.5 * hs_norm_sq(triple, &(&bx - &by));
        let shift = c2 * triple.h_norm_sq(&diff);
        let joint = mono - bdiff + shift;
        let scale = 1f64.max(mono.abs() + bdiff + shift);
        report.min_joint_monotonicity_margin = report.min_joint_monotonicity_margin.min(joint);
        report.worst_scaled_joint = report.worst_scaled_joint.min(joint / scale);

        let pair_x = triple.inner(&ax, &x);
        let bnorm = 0.5 * hs_norm_sq(triple, &bx);
        let vpow = triple.v_norm_pow(&x);
        let hsq = triple.h_norm_sq(&x);
        let ft = f.value(t);
        let coercive = pair_x - bnorm - c1 * vpow + c2 * hsq + ft;
        let scale = 1f64.max(pair_x.abs() + bnorm + c1 * vpow + c2 * hsq + ft.abs());
        report.min_coercivity_margin = report.min_coercivity_margin.min(coercive);
        report.worst_scaled_coercivity = report.worst_scaled_coercivity.min(coercive / scale);

        let dual = triple.dual_norm_unchecked(&ax, GROWTH_DUAL_ITERATIONS);
        let lhs = dual.powf(q);
        let gt = g.value(t);
        let violation = lhs - growth * vpow - gt;
        let scale = 1f64.max(lhs + growth * vpow + gt.abs());
        report.max_growth_violation = report.max_growth_violation.max(violation);
        report.worst_scaled_growth = report.worst_scaled_growth.max(violation / scale);
    }
    report.pass = report.worst_scaled_joint >= -TOL_ASSUME
        && report.worst_scaled_coercivity >= -TOL_ASSUME
        && report.worst_scaled_growth <= TOL_ASSUME;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HemicontinuityReport {
    pub pass: bool,
    /// Largest deviation, over samples, between the finest dyadic level and
    /// the linear interpolation of the level below it.
    pub worst_jump: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Dyadic refinement depth of the hemicontinuity check.
const HEMI_LEVELS: u32 = 12;
const HEMI_RATIO: f64 = 0.9;

/// Samples `r ↦ ⟨A(t, x + r y), z⟩` on dyadic refinements of `[-1, 1]` and
/// checks that the jump between adjacent refinement levels tends to zero.
pub fn check_hemicontinuity(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    samples: usize,
    seed: u64,
) -> Result<HemicontinuityReport> {
    check_dim(triple.dim(), pair.dim())?;
    if samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    let n = pair.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = Scenario(seed);
    let points = (1usize << HEMI_LEVELS) + 1;
    let mut values = vec![0.0; points];
    let mut xr = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut pass = true;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.sample(StandardNormal)).collect()
        };
        let x = gauss(&mut rng);
        let y = gauss(&mut rng);
        let z = gauss(&mut rng);
        let t = rng.random::<f64>() * pair.horizon();
        for (k, v) in values.iter_mut().enumerate() {
            let r = -1.0 + 2.0 * k as f64 / (points - 1) as f64;
            for i in 0..n {
                xr[i] = x[i] + r * y[i];
            }
            pair.drift_into(scenario, t, &xr, &mut a)?;
            *v = triple.inner(&a, &z);
        }
        let scale = values.iter().fold(1f64, |m, v| m.max(v.abs()));
        // jumps[l-1]: new midpoints of level l against the level l-1 interpolant.
        let jumps: Vec<f64> = (1..=HEMI_LEVELS)
            .map(|level| {
                let stride = 1usize << (HEMI_LEVELS - level);
                (0..(1usize << (level - 1)))
                    .map(|c| {
                        let lo = 2 * c * stride;
                        let mid = lo + stride;
                        let hi = mid + stride;
                        (values[mid] - 0.5 * (values[lo] + values[hi])).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        let l = jumps.len();
        let last = jumps[l - 1];
        let negligible = last <= 1e-9 * scale;
        let shrinking =
            last <= HEMI_RATIO * jumps[l - 2] && jumps[l - 2] <= HEMI_RATIO * jumps[l - 3];
        pass &= negligible || shrinking;
        worst = worst.max(last);
    }
    Ok(HemicontinuityReport {
        pass,
        worst_jump: worst,
        samples,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(c1: f64, c2: f64, p: f64, growth: f64) -> Constants {
        Constants {
            c1,
            c2,
            p,
            growth,
            f: Profile::Constant(0.0),
            g: Profile::Constant(0.0),
            horizon: 1.0,
        }
    }

    fn gbm(sigma: f64) -> OperatorPair {
        OperatorPair::new(
            Arc::new(LinearDrift { dim: 2, a: 2.0 }),
            Arc::new(MultiplicativeScalar {
                dim: 2,
                sigma,
                modes: 1,
            }),
            consts(2.0 - 0.5 * sigma * sigma, 0.0, 2.0, 4.0),
        )
        .unwrap()
    }

    #[derive(Debug)]
    struct Sign(usize);
    impl Drift for Sign {
        fn name(&self) -> &str {
            "Sign"
        }
        fn dim(&self) -> usize {
            self.0
        }
        fn apply(&self, _: Scenario, _: f64, x: &[f64], out: &mut [f64]) {
            for (o, v) in out.iter_mut().zip(x) {
                *o = if *v > 0.0 {
                    1.0
                } else if *v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
    }

    #[test]
    fn drift_examples() {
        let pair = gbm(0.5);
        assert_eq!(pair.eval_drift(0.0, &[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(pair.eval_drift(0.0, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let cube = ScalarPower { dim: 1, p: 4.0 };
        let mut out = [0.0];
        cube.apply(Scenario(0), 0.0, &[2.0], &mut out);
        assert_eq!(out, [8.0]);
    }

    #[test]
    fn diffusion_examples() {
        let pair = gbm(0.5);
        let b = pair.eval_diffusion(0.0, &[2.0, 0.0]).unwrap();
        assert_eq!(b.shape(), (2, 1));
        assert_eq!(b[(0, 0)], 1.0);
        assert_eq!(b[(1, 0)], 0.0);
        assert!(pair
            .eval_diffusion(0.0, &[0.0, 0.0])
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        let g0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let add = AdditiveNoise::new(g0.clone());
        assert_eq!(add.apply(Scenario(3), 0.7, &[9.0, -1.0]), g0);
    }

    #[test]
    fn evaluation_errors() {
        let pair = gbm(0.5);
        assert!(pair.eval_drift(2.0, &[1.0, 0.0]).is_err());
        assert!(pair.eval_drift(0.0, &[1.0]).is_err());
        let inf = OperatorPair::new(
            Arc::new(ScalarPower { dim: 1, p: 4.0 }),
            Arc::new(AdditiveNoise::zero(1, 1)),
            consts(1.0, 0.0, 4.0, 1.0),
        )
        .unwrap();
        assert!(matches!(
            inf.eval_drift(0.0, &[1e200]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn pair_validation() {
        let bad = OperatorPair::new(
            Arc::new(LinearDrift { dim: 2, a: 1.0 }),
            Arc::new(AdditiveNoise::zero(3, 1)),
            consts(1.0, 0.0, 2.0, 1.0),
        );
        assert!(bad.is_err());
        let bad = OperatorPair::new(
            Arc::new(LinearDrift { dim: 2, a: 1.0 }),
            Arc::new(AdditiveNoise::zero(2, 1)),
            consts(0.0, 0.0, 2.0, 1.0),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn gbm_assumptions_pass_and_fail() {
        let triple = GelfandTriple::euclidean(2, 2.0).unwrap();
        let ok = check_assumptions(&gbm(0.5), &triple, 500, 1).unwrap();
        assert!(ok.pass, "{ok:?}");
        assert!(ok.min_joint_monotonicity_margin >= 0.0);

        // σ = 3: joint margin is 2‖d‖² - 4.5‖d‖² = -2.5‖d‖².
        let bad = OperatorPair::new(
            Arc::new(LinearDrift { dim: 2, a: 2.0 }),
            Arc::new(MultiplicativeScalar {
                dim: 2,
                sigma: 3.0,
                modes: 1,
            }),
            consts(1.0, 0.0, 2.0, 4.0),
        )
        .unwrap();
        let rep = check_assumptions(&bad, &triple, 200, 1).unwrap();
        assert!(!rep.pass);
        assert!(rep.min_joint_monotonicity_margin < 0.0);
        assert!((rep.worst_scaled_joint - (-2.5 / 6.5)).abs() < 1e-9);
    }

    #[test]
    fn scalar_power_coercivity_is_exact() {
        let triple = GelfandTriple::euclidean(3, 4.0).unwrap();
        let pair = OperatorPair::new(
            Arc::new(ScalarPower { dim: 3, p: 4.0 }),
            Arc::new(AdditiveNoise::zero(3, 1)),
            consts(1.0, 0.0, 4.0, 1.0),
        )
        .unwrap();
        let rep = check_assumptions(&pair, &triple, 300, 9).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.worst_scaled_coercivity.abs() < 1e-12);
    }

    #[test]
    fn assumption_checks_are_seed_deterministic() {
        let triple = GelfandTriple::euclidean(2, 2.0).unwrap();
        let a = check_assumptions(&gbm(0.5), &triple, 100, 42).unwrap();
        let b = check_assumptions(&gbm(0.5), &triple, 100, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_exponent_is_rejected() {
        let triple = GelfandTriple::euclidean(2, 4.0).unwrap();
        assert!(check_assumptions(&gbm(0.5), &triple, 10, 0).is_err());
    }

    #[test]
    fn p_laplacian_pairing_identity() {
        let triple = GelfandTriple::dirichlet_grid(9, 3.0).unwrap();
        let lap = DiscretePLaplacian::on(&triple).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut out = vec![0.0; 9];
        for _ in 0..1000 {
            let x = sample_radial(&mut rng, 9);
            lap.apply(Scenario(0), 0.0, &x, &mut out);
            let lhs = triple.inner(&out, &x);
            let rhs = triple.v_norm_pow(&x);
            assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn p_laplacian_jacobian_matches_finite_differences() {
        let triple = GelfandTriple::dirichlet_grid(5, 3.0).unwrap();
        let lap = DiscretePLaplacian::on(&triple).unwrap();
        let x = [0.3, -0.2, 0.9, 0.4, -0.6];
        let Some(Jacobian::Tridiagonal { sub, diag, sup }) = lap.jacobian(Scenario(0), 0.0, &x)
        else {
            panic!("expected tridiagonal Jacobian");
        };
        let mut dense = DMatrix::<f64>::zeros(5, 5);
        for i in 0..5 {
            dense[(i, i)] = diag[i];
            if i + 1 < 5 {
                dense[(i, i + 1)] = sup[i];
                dense[(i + 1, i)] = sub[i];
            }
        }
        let eps = 1e-6;
        let mut fp = vec![0.0; 5];
        let mut fm = vec![0.0; 5];
        for j in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += eps;
            xm[j] -= eps;
            lap.apply(Scenario(0), 0.0, &xp, &mut fp);
            lap.apply(Scenario(0), 0.0, &xm, &mut fm);
            for i in 0..5 {
                let fd = (fp[i] - fm[i]) / (2.0 * eps);
                assert!(
                    (fd - dense[(i, j)]).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "({i},{j}): {fd} vs {}",
                    dense[(i, j)]
                );
            }
        }
    }

    #[test]
    fn hemicontinuity_examples() {
        let triple = GelfandTriple::euclidean(3, 2.0).unwrap();
        let linear = OperatorPair::new(
            Arc::new(LinearDrift { dim: 3, a: 2.0 }),
            Arc::new(AdditiveNoise::zero(3, 1)),
            consts(1.0, 0.0, 2.0, 4.0),
        )
        .unwrap();
        let rep = check_hemicontinuity(&linear, &triple, 20, 3).unwrap();
        assert!(rep.pass);
        assert!(rep.worst_jump < 1e-12);

        let triple4 = GelfandTriple::euclidean(3, 4.0).unwrap();
        let cube = OperatorPair::new(
            Arc::new(ScalarPower { dim: 3, p: 4.0 }),
            Arc::new(AdditiveNoise::zero(3, 1)),
            consts(1.0, 0.0, 4.0, 1.0),
        )
        .unwrap();
        assert!(check_hemicontinuity(&cube, &triple4, 20, 3).unwrap().pass);

        let sign = OperatorPair::new(
            Arc::new(Sign(3)),
            Arc::new(AdditiveNoise::zero(3, 1)),
            consts(1.0, 0.0, 2.0, 1.0),
        )
        .unwrap();
        let rep = check_hemicontinuity(&sign, &triple, 20, 3).unwrap();
        assert!(!rep.pass);
        assert!(rep.worst_jump > 0.1);
    }

    #[test]
    fn profile_integrals() {
        assert_eq!(Profile::Constant(2.0).integral(0.0, 3.0), 6.0);
        let a = Profile::Affine {
            intercept: 1.0,
            slope: 2.0,
        };
        assert_eq!(a.value(0.5), 2.0);
        assert_eq!(a.integral(0.0, 1.0), 2.0);
    }
}
