//! Resolvent `J_λ` of the shifted drift `Ã = A + c₂I`, the Yosida
//! approximation `Ã_λ = (I − J_λ)/λ` and the regularized diffusion
//! `B_λ = B ∘ J_λ`.
//!
//! `J_λ(t, y)` is the unique `x` with `x + λÃ(t, x) = y`. All solves go
//! through [`solve_monotone`], which handles `αx + λA(t, x) = y` for any
//! `α > λc₂`; the implicit reference integrator reuses it with `α = 1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::operators::{Jacobian, OperatorPair, Scenario};
use crate::triple::GelfandTriple;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolventOptions {
    /// Residual target relative to `max(1, ‖y‖_H)`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for ResolventOptions {
    fn default() -> Self {
        ResolventOptions {
            rel_tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

impl ResolventOptions {
    pub fn abs_tol(&self, y_norm: f64) -> f64 {
        self.rel_tol * y_norm.max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolventMethod {
    Newton,
    DampedNewton,
    FixedPoint,
    Bisection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolventSolution {
    pub point: Vec<f64>,
    /// `‖αx + λA(t, x) − y‖_H` at return; for the resolvent this is
    /// `‖J + λÃ(t, J) − y‖_H`.
    pub residual_h_norm: f64,
    pub iterations: usize,
    pub method: ResolventMethod,
}

/// Extra Newton steps taken after the tolerance is met, while each one still
/// at least halves the residual.
const POLISH_STEPS: usize = 3;
const ARMIJO: f64 = 1e-4;
const MIN_DAMPING: f64 = 1e-12;
/// Below this H norm, drifts with `p < 2` have unbounded Jacobians.
const SINGULAR_BALL: f64 = 1e-8;

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(())
}

fn check_inputs(pair: &OperatorPair, triple: &GelfandTriple, t: f64, y: &[f64]) -> Result<()> {
    check_dim(triple.dim(), pair.dim())?;
    check_dim(pair.dim(), y.len())?;
    if !(0.0..=pair.horizon()).contains(&t) {
        return Err(Error::invalid(format!(
            "time {t} outside [0, {}]",
            pair.horizon()
        )));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("resolvent argument has non-finite entries"));
    }
    Ok(())
}

/// `J_λ(t, y)`, the solution of `x + λÃ(t, x) = y`.
pub fn resolve(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambda: f64,
    t: f64,
    y: &[f64],
    opts: &ResolventOptions,
) -> Result<ResolventSolution> {
    resolve_in(pair, triple, Scenario::default(), lambda, t, y, opts)
}

pub fn resolve_in(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    scenario: Scenario,
    lambda: f64,
    t: f64,
    y: &[f64],
    opts: &ResolventOptions,
) -> Result<ResolventSolution> {
    check_lambda(lambda)?;
    check_inputs(pair, triple, t, y)?;
    let alpha = 1.0 + lambda * pair.constants().c2;
    solve_monotone(pair, triple, scenario, alpha, lambda, t, y, opts)
}

/// Backward Euler step for the unshifted drift: `x + step·A(t, x) = y`.
/// Needs `step·c₂ < 1` so that the left-hand side stays strongly monotone.
pub fn implicit_step(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    scenario: Scenario,
    step: f64,
    t: f64,
    y: &[f64],
    opts: &ResolventOptions,
) -> Result<ResolventSolution> {
    check_lambda(step)?;
    check_inputs(pair, triple, t, y)?;
    if step * pair.constants().c2 >= 1.0 {
        return Err(Error::invalid(format!(
            "implicit step {step} too large for c2 = {} (need step*c2 < 1)",
            pair.constants().c2
        )));
    }
    solve_monotone(pair, triple, scenario, 1.0, step, t, y, opts)
}

struct System<'a> {
    pair: &'a OperatorPair,
    triple: &'a GelfandTriple,
    scenario: Scenario,
    alpha: f64,
    lambda: f64,
    t: f64,
    y: &'a [f64],
}

impl System<'_> {
    /// Writes `F(x) = αx + λA(t, x) − y` and returns `‖F‖_H`.
    fn residual(&self, x: &[f64], f: &mut [f64]) -> Result<f64> {
        self.pair.drift_into(self.scenario, self.t, x, f)?;
        for ((fi, xi), yi) in f.iter_mut().zip(x).zip(self.y) {
            *fi = self.alpha * xi + self.lambda * *fi - yi;
        }
        Ok(self.triple.h_norm_sq(f).sqrt())
    }

    /// Newton direction `−(αI + λ DA)^{-1} F`, or `None` when no usable
    /// Jacobian exists at `x`.
    fn newton_direction(&self, x: &[f64], f: &[f64]) -> Option<Vec<f64>> {
        let jac = self.pair.drift().jacobian(self.scenario, self.t, x)?;
        if !jac.is_finite() {
            return None;
        }
        let (a, l) = (self.alpha, self.lambda);
        let d = match jac {
            Jacobian::Diagonal(diag) => f
                .iter()
                .zip(&diag)
                .map(|(fi, di)| -fi / (a + l * di))
                .collect(),
            Jacobian::Tridiagonal { sub, diag, sup } => {
                let diag: Vec<f64> = diag.iter().map(|d| a + l * d).collect();
                let sub: Vec<f64> = sub.iter().map(|v| l * v).collect();
                let sup: Vec<f64> = sup.iter().map(|v| l * v).collect();
                let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
                solve_tridiagonal(&sub, &diag, &sup, &rhs)?
            }
            Jacobian::Dense(m) => {
                let n = f.len();
                let mat = DMatrix::identity(n, n) * a + m * l;
                let rhs = -DVector::from_column_slice(f);
                mat.lu().solve(&rhs)?.iter().copied().collect()
            }
        };
        let d: Vec<f64> = d;
        d.iter().all(|v| v.is_finite()).then_some(d)
    }

    /// Local Lipschitz estimate of `A(t, ·)` near `x` (∞-norm).
    fn local_lipschitz(&self, x: &[f64]) -> Result<f64> {
        if let Some(jac) = self.pair.drift().jacobian(self.scenario, self.t, x) {
            if jac.is_finite() {
                return Ok(jac.max_row_sum());
            }
            return Ok(f64::INFINITY);
        }
        let n = x.len();
        let mut base = vec![0.0; n];
        let mut probe = vec![0.0; n];
        self.pair.drift_into(self.scenario, self.t, x, &mut base)?;
        let mut lip = 0.0f64;
        let mut xp = x.to_vec();
        for i in 0..n {
            let h = 1e-6 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            self.pair
                .drift_into(self.scenario, self.t, &xp, &mut probe)?;
            xp[i] = x[i];
            let col: f64 = probe.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
            lip = lip.max(col / h);
        }
        Ok(lip)
    }
}

/// Solves `αx + λA(t, x) = y` to `‖·‖_H` residual `opts.abs_tol(‖y‖_H)`.
///
/// Damped Newton on the residual norm first; if no usable Jacobian exists,
/// the contractive fixed point `x ← (y − λA(x))/α` when `λL/α < 1`; for
/// component-separable drifts, bisection as a last resort.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_monotone(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    scenario: Scenario,
    alpha: f64,
    lambda: f64,
    t: f64,
    y: &[f64],
    opts: &ResolventOptions,
) -> Result<ResolventSolution> {
    let sys = System {
        pair,
        triple,
        scenario,
        alpha,
        lambda,
        t,
        y,
    };
    let n = y.len();
    let tol = opts.abs_tol(triple.h_norm_sq(y).sqrt());
    let mut x: Vec<f64> = y.iter().map(|v| v / alpha).collect();
    let mut f = vec![0.0; n];
    let mut r = sys.residual(&x, &mut f)?;
    let mut best = (r, x.clone());
    let mut iterations = 0;
    let mut damped = false;

    let mut xn = vec![0.0; n];
    let mut fn_ = vec![0.0; n];
    // Damped Newton.
    while iterations < opts.max_iter {
        if r <= tol {
            let mut polished = 0;
            while polished < POLISH_STEPS && r > 0.0 {
                let Some(d) = sys.newton_direction(&x, &f) else {
                    break;
                };
                for i in 0..n {
                    xn[i] = x[i] + d[i];
                }
                let rn = sys.residual(&xn, &mut fn_)?;
                if rn >= r {
                    break;
                }
                std::mem::swap(&mut x, &mut xn);
                std::mem::swap(&mut f, &mut fn_);
                let halved = rn <= 0.5 * r;
                r = rn;
                polished += 1;
                if !halved {
                    break;
                }
            }
            return Ok(ResolventSolution {
                point: x,
                residual_h_norm: r,
                iterations,
                method: if damped {
                    ResolventMethod::DampedNewton
                } else {
                    ResolventMethod::Newton
                },
            });
        }
        if triple.h_norm_sq(&x).sqrt() < SINGULAR_BALL && pair.constants().p < 2.0 {
            break;
        }
        let Some(d) = sys.newton_direction(&x, &f) else {
            break;
        };
        let mut s = 1.0;
        let accepted = loop {
            for i in 0..n {
                xn[i] = x[i] + s * d[i];
            }
            let rn = sys.residual(&xn, &mut fn_)?;
            if rn <= (1.0 - ARMIJO * s) * r || rn <= tol {
                break Some(rn);
            }
            s *= 0.5;
            if s < MIN_DAMPING {
                break None;
            }
        };
        iterations += 1;
        let Some(rn) = accepted else {
            break;
        };
        if s < 1.0 {
            damped = true;
        }
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut f, &mut fn_);
        r = rn;
        if r < best.0 {
            best = (r, x.clone());
        }
    }

    // Contractive fixed point.
    let (r0, x0) = best.clone();
    x = x0;
    r = r0;
    let lip = sys.local_lipschitz(&x)?;
    if lambda * lip / alpha < 1.0 {
        let mut growth = 0;
        while iterations < opts.max_iter {
            if r <= tol {
                return Ok(ResolventSolution {
                    point: x,
                    residual_h_norm: r,
                    iterations,
                    method: ResolventMethod::FixedPoint,
                });
            }
            pair.drift_into(scenario, t, &x, &mut xn)?;
            for i in 0..n {
                xn[i] = (y[i] - lambda * xn[i]) / alpha;
            }
            let rn = sys.residual(&xn, &mut fn_)?;
            iterations += 1;
            growth = if rn >= r { growth + 1 } else { 0 };
            std::mem::swap(&mut x, &mut xn);
            r = rn;
            if r < best.0 {
                best = (r, x.clone());
            }
            if growth >= 5 {
                break;
            }
        }
    }

    if pair.drift().is_separable() && iterations < opts.max_iter {
        let (xb, rb, used) = bisect_separable(&sys, &best.1, opts.max_iter - iterations)?;
        iterations += used;
        if rb < best.0 {
            best = (rb, xb);
        }
        if best.0 <= tol {
            return Ok(ResolventSolution {
                point: best.1,
                residual_h_norm: best.0,
                iterations,
                method: ResolventMethod::Bisection,
            });
        }
    }

    Err(Error::ResolventConvergence {
        iterations,
        best_residual: best.0,
    })
}

/// Component-wise bisection on `φᵢ(s) = αs + λaᵢ(s) − yᵢ`, which is strictly
/// increasing for separable monotone drifts. Spends at most `budget` sweeps
/// and returns the point, its residual and the sweeps used.
fn bisect_separable(
    sys: &System<'_>,
    guess: &[f64],
    budget: usize,
) -> Result<(Vec<f64>, f64, usize)> {
    let n = guess.len();
    let mut lo = guess.to_vec();
    let mut hi = guess.to_vec();
    let mut f = vec![0.0; n];
    let eval = |x: &[f64], f: &mut [f64]| -> Result<()> { sys.residual(x, f).map(|_| ()) };

    let mut width: Vec<f64> = guess.iter().map(|v| v.abs().max(1.0)).collect();
    let mut used = 0;
    eval(&lo, &mut f)?;
    while used < budget {
        let mut moved = false;
        for i in 0..n {
            if f[i] > 0.0 {
                lo[i] -= width[i];
                width[i] *= 2.0;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        used += 1;
        eval(&lo, &mut f)?;
    }
    let mut width: Vec<f64> = guess.iter().map(|v| v.abs().max(1.0)).collect();
    eval(&hi, &mut f)?;
    while used < budget {
        let mut moved = false;
        for i in 0..n {
            if f[i] < 0.0 {
                hi[i] += width[i];
                width[i] *= 2.0;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        used += 1;
        eval(&hi, &mut f)?;
    }
    let mut mid = vec![0.0; n];
    while used < budget {
        let mut active = false;
        for i in 0..n {
            mid[i] = lo[i] + 0.5 * (hi[i] - lo[i]);
            if mid[i] != lo[i] && mid[i] != hi[i] {
                active = true;
            }
        }
        if !active {
            break;
        }
        used += 1;
        eval(&mid, &mut f)?;
        for i in 0..n {
            if f[i] > 0.0 {
                hi[i] = mid[i];
            } else {
                lo[i] = mid[i];
            }
        }
    }
    // Pick whichever end has the smaller residual per component.
    let mut flo = vec![0.0; n];
    let mut fhi = vec![0.0; n];
    eval(&lo, &mut flo)?;
    eval(&hi, &mut fhi)?;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            if flo[i].abs() <= fhi[i].abs() {
                lo[i]
            } else {
                hi[i]
            }
        })
        .collect();
    let r = sys.residual(&x, &mut f)?;
    Ok((x, r, used))
}

fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return None;
    }
    if n > 1 {
        c[0] = sup[0] / denom;
    }
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - sub[i - 1] * c[i - 1];
        if denom == 0.0 {
            return None;
        }
        if i + 1 < n {
            c[i] = sup[i] / denom;
        }
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

/// One resolvent solve with everything the regularized schemes need.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedEval {
    pub resolvent: ResolventSolution,
    /// `Ã_λ(t, x) = (x − J_λx)/λ`.
    pub yosida: Vec<f64>,
    /// `B_λ(t, x) = B(t, J_λx)`.
    pub diffusion: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn regularized_eval(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    scenario: Scenario,
    lambda: f64,
    t: f64,
    x: &[f64],
    opts: &ResolventOptions,
) -> Result<RegularizedEval> {
    let resolvent = resolve_in(pair, triple, scenario, lambda, t, x, opts)?;
    let yosida = yosida_from(pair, triple, scenario, lambda, t, x, &resolvent.point)?;
    let diffusion = pair.diffusion_at(scenario, t, &resolvent.point)?;
    Ok(RegularizedEval {
        resolvent,
        yosida,
        diffusion,
    })
}

/// `x − J_λx` smaller than this fraction of `x` switches to the drift form.
const CANCELLATION_RATIO: f64 = 1e-3;

/// `(x − J)/λ`, or the equal `A(t, J) + c₂J` when the subtraction would
/// cancel most digits.
pub(crate) fn yosida_from(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    scenario: Scenario,
    lambda: f64,
    t: f64,
    x: &[f64],
    j: &[f64],
) -> Result<Vec<f64>> {
    let gap: Vec<f64> = x.iter().zip(j).map(|(a, b)| a - b).collect();
    if triple.h_norm_sq(&gap) > (CANCELLATION_RATIO * CANCELLATION_RATIO) * triple.h_norm_sq(x) {
        return Ok(gap.into_iter().map(|g| g / lambda).collect());
    }
    let c2 = pair.constants().c2;
    let mut out = vec![0.0; x.len()];
    pair.drift_into(scenario, t, j, &mut out)?;
    for (o, v) in out.iter_mut().zip(j) {
        *o += c2 * v;
    }
    Ok(out)
}

/// Yosida approximation `Ã_λ(t, x) = (x − J_λx)/λ`.
pub fn yosida(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambda: f64,
    t: f64,
    x: &[f64],
    opts: &ResolventOptions,
) -> Result<Vec<f64>> {
    let sol = resolve(pair, triple, lambda, t, x, opts)?;
    yosida_from(pair, triple, Scenario::default(), lambda, t, x, &sol.point)
}

/// `B_λ(t, x) = B(t, J_λ(t, x))`.
pub fn regularized_diffusion(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambda: f64,
    t: f64,
    x: &[f64],
    opts: &ResolventOptions,
) -> Result<DMatrix<f64>> {
    let sol = resolve(pair, triple, lambda, t, x, opts)?;
    pair.diffusion_at(Scenario::default(), t, &sol.point)
}
