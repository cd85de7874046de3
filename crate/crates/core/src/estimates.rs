//! Monte Carlo monitors for the energy estimates of the regularized family
//! `X_λ` and its convergence to the reference solution.
//!
//! Expectations are ensemble means over `paths` replicas with per-path seeds
//! `path_seed(seed, i)`; time integrals are left-endpoint Riemann sums. A
//! report passes when `lhs ≤ rhs + 3·stderr + tol`, where `rhs` already
//! includes the measured discretization slack. Paths may run on several
//! threads, but every reduction runs in path order, so results do not depend
//! on the thread count.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::integrator::{solve, solve_reference_implicit, PathSolution, Scheme, SolverOptions};
use crate::noise::{path_seed, sample_path, NoisePath};
use crate::operators::{hs_norm_sq, OperatorPair, Scenario};
use crate::resolvent::resolve;
use crate::triple::GelfandTriple;

/// Standard errors allowed by the statistical pass rule.
pub const STDERR_FACTOR: f64 = 3.0;
/// Relative floating-point allowance of every comparison.
pub const REPORT_TOL: f64 = 1e-9;

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    /// Scheme for the regularized runs; `ImplicitReference` is rejected.
    pub scheme: Scheme,
    pub solver: SolverOptions,
    /// Worker threads; `1` runs inline and `0` uses every core.
    pub jobs: usize,
}

impl McConfig {
    pub fn new(dt: f64, paths: usize, seed: u64, x0: Vec<f64>) -> Self {
        McConfig {
            dt,
            paths,
            seed,
            x0,
            scheme: Scheme::ExplicitEm,
            solver: SolverOptions::default(),
            jobs: 1,
        }
    }

    /// Number of steps covering `[0, horizon]`.
    pub fn steps(&self, horizon: f64) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        let steps = (horizon / self.dt).round();
        if steps < 1.0 || (steps * self.dt - horizon).abs() > 1e-9 * horizon {
            return Err(Error::invalid(format!(
                "horizon {horizon} is not a whole number of steps of {}",
                self.dt
            )));
        }
        Ok(steps as usize)
    }

    fn validate(&self, pair: &OperatorPair, triple: &GelfandTriple) -> Result<usize> {
        pair.check_compatible(triple)?;
        check_dim(pair.dim(), self.x0.len())?;
        if self.paths == 0 {
            return Err(Error::invalid("paths must be at least 1"));
        }
        if self.scheme == Scheme::ImplicitReference {
            return Err(Error::invalid(
                "the regularized runs need explicit-em or picard-em",
            ));
        }
        self.steps(pair.horizon())
    }

    fn noise(&self, pair: &OperatorPair, steps: usize, path: usize) -> Result<NoisePath> {
        sample_path(
            path_seed(self.seed, path as u64),
            self.dt,
            steps,
            pair.modes(),
        )
    }
}

/// Running mean and variance (Welford), fed in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Standard error of the mean; zero for fewer than two samples.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

/// Runs `map` over all path indices and feeds the results to `fold` in index
/// order. Chunks bound the memory held at once.
fn for_each_path<T, M, F>(paths: usize, jobs: usize, map: M, mut fold: F) -> Result<()>
where
    T: Send,
    M: Fn(usize) -> Result<T> + Sync,
    F: FnMut(T),
{
    let pool = if jobs == 1 {
        None
    } else {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::invalid(format!("cannot start worker threads: {e}")))?,
        )
    };
    let run = |i: usize| map(i).map_err(|e| e.at_path(i));
    let mut start = 0;
    while start < paths {
        let end = (start + CHUNK).min(paths);
        let results: Vec<Result<T>> = match &pool {
            Some(pool) => pool.install(|| (start..end).into_par_iter().map(run).collect()),
            None => (start..end).map(run).collect(),
        };
        for r in results {
            fold(r?);
        }
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub name: String,
    pub t: f64,
    pub lhs: f64,
    /// Bound including `slack`.
    pub rhs: f64,
    pub margin: f64,
    pub stderr: f64,
    pub slack: f64,
    pub pass: bool,
    pub lambda: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl EstimateReport {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        t: f64,
        lhs: f64,
        bound: f64,
        slack: f64,
        stderr: f64,
        lambda: f64,
        cfg: &McConfig,
    ) -> Self {
        let rhs = bound + slack;
        let tol = REPORT_TOL * 1f64.max(lhs.abs()).max(rhs.abs());
        EstimateReport {
            name: name.to_string(),
            t,
            lhs,
            rhs,
            margin: rhs - lhs,
            stderr,
            slack,
            pass: lhs <= rhs + STDERR_FACTOR * stderr + tol,
            lambda,
            dt: cfg.dt,
            n_paths: cfg.paths,
            seed: cfg.seed,
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "name,t,lambda,dt,paths,seed,lhs,rhs,slack,stderr,margin,pass";

pub fn write_reports_csv<W: Write>(mut w: W, reports: &[EstimateReport]) -> std::io::Result<()> {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{},{},{:e},{:e},{:e},{:e},{:e},{}\n",
            r.name,
            r.t,
            r.lambda,
            r.dt,
            r.n_paths,
            r.seed,
            r.lhs,
            r.rhs,
            r.slack,
            r.stderr,
            r.margin,
            r.pass
        ));
    }
    w.write_all(out.as_bytes())
}

/// Grid indices checked by [`apriori_bound`]: two interior points and the
/// horizon, all even when `steps` is, so the half-resolution run shares them.
fn check_indices(steps: usize) -> Vec<usize> {
    let mut idx = if steps % 2 == 0 {
        vec![2 * (steps / 6), 2 * (steps / 3), steps]
    } else {
        vec![steps / 3, 2 * steps / 3, steps]
    };
    idx.retain(|&k| k > 0);
    idx.dedup();
    idx
}

/// Both sides of the a priori inequality along one path at each of `checks`.
fn apriori_sides(
    sol: &PathSolution,
    pair: &OperatorPair,
    triple: &GelfandTriple,
    checks: &[usize],
) -> Vec<(f64, f64)> {
    let c = pair.constants();
    let dt = sol.dt;
    let x0 = 0.5 * triple.h_norm_sq(&sol.states[0]);
    let (mut v_int, mut y_int, mut h_int) = (0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(checks.len());
    let mut next = 0;
    for k in 0..=sol.steps() {
        if next < checks.len() && checks[next] == k {
            let lhs = 0.5 * triple.h_norm_sq(&sol.states[k]) + c.c1 * v_int + sol.lambda * y_int;
            let rhs = x0 + c.f.integral(0.0, sol.times[k]) + c.c2 * h_int;
            out.push((lhs, rhs));
            next += 1;
        }
        if k < sol.steps() {
            v_int += dt * triple.v_norm_pow(&sol.resolvent_points[k]);
            y_int += dt * triple.h_norm_sq(&sol.drift_evals[k]);
            h_int += dt * triple.h_norm_sq(&sol.states[k]);
        }
    }
    out
}

/// Checks `½E‖X_λ(t)‖² + c₁E∫‖J_λX_λ‖_Vᵖ + λE∫‖Ã_λX_λ‖² ≤ ½E‖X₀‖² + ∫f +
/// c₂E∫‖X_λ‖²` at two interior times and at the horizon.
///
/// The slack at each time is `|E D(dt) − E D(2dt)|` for the defect
/// `D = lhs − rhs`, the second run using the pairwise sums of the same
/// increments. It is zero when the step count is odd.
pub fn apriori_bound(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambda: f64,
    cfg: &McConfig,
) -> Result<Vec<EstimateReport>> {
    let steps = cfg.validate(pair, triple)?;
    let checks = check_indices(steps);
    let richardson = steps % 2 == 0;
    let coarse_checks: Vec<usize> = checks.iter().map(|k| k / 2).collect();
    let nc = checks.len();

    let mut lhs = vec![Accumulator::default(); nc];
    let mut rhs = vec![Accumulator::default(); nc];
    let mut defect = vec![Accumulator::default(); nc];
    let mut shift = vec![Accumulator::default(); nc];
    for_each_path(
        cfg.paths,
        cfg.jobs,
        |i| {
            let noise = cfg.noise(pair, steps, i)?;
            let sol = solve(
                cfg.scheme,
                pair,
                triple,
                lambda,
                &cfg.x0,
                &noise,
                &cfg.solver,
            )?;
            let fine = apriori_sides(&sol, pair, triple, &checks);
            let coarse = if richardson {
                let noise = noise.coarsen()?;
                let sol = solve(
                    cfg.scheme,
                    pair,
                    triple,
                    lambda,
                    &cfg.x0,
                    &noise,
                    &cfg.solver,
                )?;
                apriori_sides(&sol, pair, triple, &coarse_checks)
            } else {
                fine.clone()
            };
            Ok((fine, coarse))
        },
        |(fine, coarse)| {
            for j in 0..nc {
                let d = fine[j].0 - fine[j].1;
                lhs[j].push(fine[j].0);
                rhs[j].push(fine[j].1);
                defect[j].push(d);
                shift[j].push(d - (coarse[j].0 - coarse[j].1));
            }
        },
    )?;
    Ok((0..nc)
        .map(|j| {
            let t = (checks[j] as f64 * cfg.dt).min(pair.horizon());
            let slack = shift[j].mean().abs();
            // Judge the paired defect: lhs ≤ rhs + slack + 3·se(D).
            let mut report = EstimateReport::new(
                "apriori",
                t,
                lhs[j].mean(),
                rhs[j].mean(),
                slack,
                defect[j].stderr(),
                lambda,
                cfg,
            );
            let tol = REPORT_TOL * 1f64.max(report.lhs.abs()).max(report.rhs.abs());
            report.pass = defect[j].mean() <= slack + STDERR_FACTOR * report.stderr + tol;
            report
        })
        .collect())
}

/// The four ensemble norms of one regularized family member with their caps.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyRow {
    pub lambda: f64,
    /// `sup_k E‖X_λ(t_k)‖²`.
    pub sup_second_moment: f64,
    pub sup_second_moment_time: f64,
    /// `E∫‖J_λX_λ‖_Vᵖ`.
    pub v_energy: f64,
    /// `λE∫‖Ã_λX_λ‖²`.
    pub scaled_yosida_energy: f64,
    /// `E∫‖Ã_λX_λ‖²`, unscaled.
    pub yosida_energy: f64,
    /// `E∫‖B_λ(X_λ)‖²_HS`.
    pub diffusion_energy: f64,
    /// Caps of the four norms, in the order above.
    pub caps: [f64; 4],
    pub reports: Vec<EstimateReport>,
}

/// Caps on the four family norms, independent of `λ`.
///
/// `M = (‖X₀‖² + 2∫f)e^{2c₂T}` bounds the second moment; the a priori
/// inequality then bounds the `V` and Yosida energies, and coercivity plus
/// growth bound the diffusion energy through `‖J_λx‖ ≤ ‖x‖ + ‖J_λ0‖`.
pub fn family_caps(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambda: f64,
    x0: &[f64],
    steps: usize,
    cfg: &McConfig,
) -> Result<[f64; 4]> {
    let c = pair.constants();
    let horizon = pair.horizon();
    let f_int = c.f.integral(0.0, horizon);
    let g_int = c.g.integral(0.0, horizon);
    let x0_sq = triple.h_norm_sq(x0);
    let m = (x0_sq + 2.0 * f_int) * (2.0 * c.c2 * horizon).exp();
    let energy = 0.5 * x0_sq + f_int + c.c2 * horizon * m;
    let v_cap = energy / c.c1;
    let y_cap = energy;
    let zero = vec![0.0; pair.dim()];
    let stride = (steps / 16).max(1);
    let mut b = 0.0f64;
    for k in (0..=steps).step_by(stride).chain(std::iter::once(steps)) {
        let t = (k as f64 * cfg.dt).min(horizon);
        let j = resolve(pair, triple, lambda, t, &zero, &cfg.solver.resolvent)?;
        b = b.max(triple.h_norm_sq(&j.point).sqrt());
    }
    let (p, q) = (triple.p(), triple.q());
    let b_cap = 2.0
        * ((c.growth / q + 1.0 / p) * v_cap
            + g_int / q
            + c.c2 * horizon * (m.sqrt() + b).powi(2)
            + f_int);
    Ok([m, v_cap, y_cap, b_cap])
}

/// Per-path integrals for [`family_bounds`].
struct FamilyPath {
    second_moments: Vec<f64>,
    v_energy: f64,
    yosida_energy: f64,
    diffusion_energy: f64,
}

fn family_path(sol: &PathSolution, triple: &GelfandTriple) -> FamilyPath {
    let dt = sol.dt;
    let mut out = FamilyPath {
        second_moments: sol.states.iter().map(|x| triple.h_norm_sq(x)).collect(),
        v_energy: 0.0,
        yosida_energy: 0.0,
        diffusion_energy: 0.0,
    };
    for k in 0..sol.steps() {
        out.v_energy += dt * triple.v_norm_pow(&sol.resolvent_points[k]);
        out.yosida_energy += dt * triple.h_norm_sq(&sol.drift_evals[k]);
        out.diffusion_energy += dt * hs_norm_sq(triple, &sol.diffusion_evals[k]);
    }
    out
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambdas must not be empty"));
    }
    if !lambdas.iter().all(|l| *l > 0.0 && l.is_finite()) {
        return Err(Error::invalid("lambdas must be positive"));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("lambdas must be strictly decreasing"));
    }
    Ok(())
}

/// For each `λ`, the four family norms and a report per norm against its cap.
pub fn family_bounds(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambdas: &[f64],
    cfg: &McConfig,
) -> Result<Vec<FamilyRow>> {
    check_lambdas(lambdas)?;
    let steps = cfg.validate(pair, triple)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut moments = vec![Accumulator::default(); steps + 1];
        let (mut v, mut y, mut b) = (
            Accumulator::default(),
            Accumulator::default(),
            Accumulator::default(),
        );
        for_each_path(
            cfg.paths,
            cfg.jobs,
            |i| {
                let noise = cfg.noise(pair, steps, i)?;
                let sol = solve(
                    cfg.scheme,
                    pair,
                    triple,
                    lambda,
                    &cfg.x0,
                    &noise,
                    &cfg.solver,
                )?;
                Ok(family_path(&sol, triple))
            },
            |fp| {
                for (acc, m) in moments.iter_mut().zip(&fp.second_moments) {
                    acc.push(*m);
                }
                v.push(fp.v_energy);
                y.push(fp.yosida_energy);
                b.push(fp.diffusion_energy);
            },
        )?;
        let (k_sup, sup) = moments
            .iter()
            .enumerate()
            .fold((0, &moments[0]), |best, (k, acc)| {
                if acc.mean() > best.1.mean() {
                    (k, acc)
                } else {
                    best
                }
            });
        let caps = family_caps(pair, triple, lambda, &cfg.x0, steps, cfg)?;
        let t_sup = (k_sup as f64 * cfg.dt).min(pair.horizon());
        let horizon = pair.horizon();
        let reports = vec![
            EstimateReport::new(
                "family_second_moment",
                t_sup,
                sup.mean(),
                caps[0],
                0.0,
                sup.stderr(),
                lambda,
                cfg,
            ),
            EstimateReport::new(
                "family_v_energy",
                horizon,
                v.mean(),
                caps[1],
                0.0,
                v.stderr(),
                lambda,
                cfg,
            ),
            EstimateReport::new(
                "family_scaled_yosida",
                horizon,
                lambda * y.mean(),
                caps[2],
                0.0,
                lambda * y.stderr(),
                lambda,
                cfg,
            ),
            EstimateReport::new(
                "family_diffusion",
                horizon,
                b.mean(),
                caps[3],
                0.0,
                b.stderr(),
                lambda,
                cfg,
            ),
        ];
        rows.push(FamilyRow {
            lambda,
            sup_second_moment: sup.mean(),
            sup_second_moment_time: t_sup,
            v_energy: v.mean(),
            scaled_yosida_energy: lambda * y.mean(),
            yosida_energy: y.mean(),
            diffusion_energy: b.mean(),
            caps,
            reports,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceOptions {
    /// Ascent iterations per dual-norm lower bound when `V ≠ H`.
    pub dual_iterations: usize,
    /// At most this many grid points enter the dual-norm Riemann sum.
    pub dual_points: usize,
    /// Required `value(λ_min)/value(λ_max)` of the first two columns.
    pub target_ratio: Option<f64>,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        ConvergenceOptions {
            dual_iterations: 8,
            dual_points: 64,
            target_ratio: None,
        }
    }
}

/// Column means and standard errors at one `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub lambda: f64,
    /// `E∫‖X_λ − J_λX_λ‖²_H`.
    pub resolvent_defect: f64,
    /// `E sup_k ‖X_λ(t_k) − X_ref(t_k)‖²_H`.
    pub sup_error: f64,
    /// `E∫‖Ã_λX_λ − A(X_ref) − c₂X_ref‖²` in the H norm or a V' lower bound.
    pub drift_residual: f64,
    /// `E∫‖B_λ(X_λ) − B(X_ref)‖²_HS`.
    pub diffusion_residual: f64,
    pub stderr: [f64; 4],
    /// `E∫‖Ã_λX_λ‖²_H`.
    pub yosida_energy: f64,
}

impl ConvergenceRow {
    pub fn columns(&self) -> [f64; 4] {
        [
            self.resolvent_defect,
            self.sup_error,
            self.drift_residual,
            self.diffusion_residual,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// `"H"` or `"V'-lower-bound"`.
    pub drift_norm: &'static str,
    /// Per column: every coupled step `λ_j → λ_{j+1}` has
    /// `E[col_{j+1} − col_j] ≤ 3·se`.
    pub monotone: [bool; 4],
    /// `value(λ_min)/value(λ_max)` of each column (NaN for a zero start).
    pub ratios: [f64; 4],
    /// Largest relative gap of `resolvent_defect = λ²·yosida_energy`.
    pub defect_identity_error: f64,
    pub target_ratio: Option<f64>,
    pub pass: bool,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Relative agreement required of the resolvent-defect identity.
pub const DEFECT_IDENTITY_TOL: f64 = 1e-10;

pub const CONVERGENCE_CSV_HEADER: &str = "lambda,resolvent_defect,resolvent_defect_se,sup_error,sup_error_se,drift_residual,drift_residual_se,diffusion_residual,diffusion_residual_se,yosida_energy";

impl ConvergenceTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut out = String::from(CONVERGENCE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.lambda,
                r.resolvent_defect,
                r.stderr[0],
                r.sup_error,
                r.stderr[1],
                r.drift_residual,
                r.stderr[2],
                r.diffusion_residual,
                r.stderr[3],
                r.yosida_energy
            ));
        }
        w.write_all(out.as_bytes())
    }
}

/// Columns of one coupled `(X_λ, X_ref)` pair, plus `∫‖Ã_λX_λ‖²`.
fn convergence_columns(
    sol: &PathSolution,
    reference: &PathSolution,
    pair: &OperatorPair,
    triple: &GelfandTriple,
    opts: &ConvergenceOptions,
) -> Result<[f64; 5]> {
    let (steps, dt, n) = (sol.steps(), sol.dt, sol.dim());
    let c2 = pair.constants().c2;
    let hilbert = triple.is_hilbert();
    let stride = if hilbert {
        1
    } else {
        steps.div_ceil(opts.dual_points.max(1)).max(1)
    };
    let scenario = Scenario(sol.seed);
    let mut cols = [0.0f64; 5];
    let mut diff = vec![0.0; n];
    let mut a_ref = vec![0.0; n];
    for k in 0..=steps {
        for ((d, a), b) in diff
            .iter_mut()
            .zip(&sol.states[k])
            .zip(&reference.states[k])
        {
            *d = a - b;
        }
        cols[1] = cols[1].max(triple.h_norm_sq(&diff));
        if k == steps {
            break;
        }
        let x = &sol.states[k];
        let j = &sol.resolvent_points[k];
        for i in 0..n {
            diff[i] = x[i] - j[i];
        }
        cols[0] += dt * triple.h_norm_sq(&diff);
        cols[4] += dt * triple.h_norm_sq(&sol.drift_evals[k]);
        if k % stride == 0 {
            let xr = &reference.states[k];
            pair.drift_into(scenario, sol.times[k], xr, &mut a_ref)?;
            for i in 0..n {
                diff[i] = sol.drift_evals[k][i] - a_ref[i] - c2 * xr[i];
            }
            let norm_sq = if hilbert {
                triple.h_norm_sq(&diff)
            } else {
                triple
                    .dual_norm_unchecked(&diff, opts.dual_iterations)
                    .powi(2)
            };
            let weight = dt * stride.min(steps - k) as f64;
            cols[2] += weight * norm_sq;
        }
        let bd = &sol.diffusion_evals[k] - &reference.diffusion_evals[k];
        cols[3] += dt * hs_norm_sq(triple, &bd);
    }
    Ok(cols)
}

/// Coupled sweep over `lambdas` against the implicit reference solution.
pub fn lambda_convergence(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambdas: &[f64],
    cfg: &McConfig,
    opts: &ConvergenceOptions,
) -> Result<ConvergenceTable> {
    check_lambdas(lambdas)?;
    let steps = cfg.validate(pair, triple)?;
    let nl = lambdas.len();
    let mut cols = vec![[Accumulator::default(); 5]; nl];
    let mut steps_diff = vec![[Accumulator::default(); 4]; nl.saturating_sub(1)];
    for_each_path(
        cfg.paths,
        cfg.jobs,
        |i| {
            let noise = cfg.noise(pair, steps, i)?;
            let reference = solve_reference_implicit(pair, triple, &cfg.x0, &noise, &cfg.solver)?;
            lambdas
                .iter()
                .map(|&lambda| {
                    let sol = solve(
                        cfg.scheme,
                        pair,
                        triple,
                        lambda,
                        &cfg.x0,
                        &noise,
                        &cfg.solver,
                    )?;
                    convergence_columns(&sol, &reference, pair, triple, opts)
                })
                .collect::<Result<Vec<_>>>()
        },
        |per_lambda| {
            for (j, c) in per_lambda.iter().enumerate() {
                for col in 0..5 {
                    cols[j][col].push(c[col]);
                }
                if j > 0 {
                    for col in 0..4 {
                        steps_diff[j - 1][col].push(c[col] - per_lambda[j - 1][col]);
                    }
                }
            }
        },
    )?;

    let rows: Vec<ConvergenceRow> = lambdas
        .iter()
        .zip(&cols)
        .map(|(&lambda, c)| ConvergenceRow {
            lambda,
            resolvent_defect: c[0].mean(),
            sup_error: c[1].mean(),
            drift_residual: c[2].mean(),
            diffusion_residual: c[3].mean(),
            stderr: [c[0].stderr(), c[1].stderr(), c[2].stderr(), c[3].stderr()],
            yosida_energy: c[4].mean(),
        })
        .collect();

    let mut monotone = [true; 4];
    for (j, d) in steps_diff.iter().enumerate() {
        for col in 0..4 {
            let prev = rows[j].columns()[col];
            let tol = REPORT_TOL * 1f64.max(prev.abs());
            if d[col].mean() > STDERR_FACTOR * d[col].stderr() + tol {
                monotone[col] = false;
            }
        }
    }
    let first = rows[0].columns();
    let last = rows[nl - 1].columns();
    let mut ratios = [f64::NAN; 4];
    for col in 0..4 {
        if first[col] > 0.0 {
            ratios[col] = last[col] / first[col];
        }
    }
    let defect_identity_error = rows
        .iter()
        .map(|r| {
            let expected = r.lambda * r.lambda * r.yosida_energy;
            let scale = r.resolvent_defect.abs().max(expected.abs());
            if scale == 0.0 {
                0.0
            } else {
                (r.resolvent_defect - expected).abs() / scale
            }
        })
        .fold(0.0, f64::max);
    let target_ok = match opts.target_ratio {
        Some(target) => (0..2).all(|col| first[col] == 0.0 || ratios[col] <= target),
        None => true,
    };
    let pass =
        monotone.iter().all(|m| *m) && defect_identity_error <= DEFECT_IDENTITY_TOL && target_ok;
    Ok(ConvergenceTable {
        rows,
        drift_norm: if triple.is_hilbert() {
            "H"
        } else {
            "V'-lower-bound"
        },
        monotone,
        ratios,
        defect_identity_error,
        target_ratio: opts.target_ratio,
        pass,
        dt: cfg.dt,
        n_paths: cfg.paths,
        seed: cfg.seed,
    })
}

/// `E‖X¹(t_k) − X²(t_k)‖²` against `e^{2c₂t_k}‖X₀¹ − X₀²‖²` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    /// Bound including `slack`.
    pub rhs: Vec<f64>,
    pub stderr: Vec<f64>,
    pub slack: Vec<f64>,
    pub pass: bool,
    /// The grid point with the smallest margin.
    pub worst: EstimateReport,
}

impl LipschitzReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut out = String::from("t,lhs,rhs,slack,stderr,pass\n");
        for k in 0..self.times.len() {
            let tol = REPORT_TOL * 1f64.max(self.lhs[k].abs()).max(self.rhs[k].abs());
            let pass = self.lhs[k] <= self.rhs[k] + STDERR_FACTOR * self.stderr[k] + tol;
            out.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{}\n",
                self.times[k], self.lhs[k], self.rhs[k], self.slack[k], self.stderr[k], pass
            ));
        }
        w.write_all(out.as_bytes())
    }
}

/// Gronwall-type stability of the implicit reference scheme under coupled
/// noise. The slack is the Richardson gap against the half-resolution run
/// on even grid points, and the larger neighbouring value on odd ones.
pub fn lipschitz_dependence(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    x0_a: &[f64],
    x0_b: &[f64],
    cfg: &McConfig,
) -> Result<LipschitzReport> {
    check_dim(pair.dim(), x0_b.len())?;
    let steps = cfg.validate(pair, triple)?;
    let richardson = steps % 2 == 0;
    let mut fine = vec![Accumulator::default(); steps + 1];
    let mut gap = vec![Accumulator::default(); steps / 2 + 1];
    let sq_distance = |a: &PathSolution, b: &PathSolution| -> Vec<f64> {
        a.states
            .iter()
            .zip(&b.states)
            .map(|(x, y)| {
                let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
                triple.h_norm_sq(&d)
            })
            .collect()
    };
    for_each_path(
        cfg.paths,
        cfg.jobs,
        |i| {
            let noise = cfg.noise(pair, steps, i)?;
            let a = solve_reference_implicit(pair, triple, x0_a, &noise, &cfg.solver)?;
            let b = solve_reference_implicit(pair, triple, x0_b, &noise, &cfg.solver)?;
            let d = sq_distance(&a, &b);
            let dc = if richardson {
                let noise = noise.coarsen()?;
                let a = solve_reference_implicit(pair, triple, x0_a, &noise, &cfg.solver)?;
                let b = solve_reference_implicit(pair, triple, x0_b, &noise, &cfg.solver)?;
                sq_distance(&a, &b)
            } else {
                Vec::new()
            };
            Ok((d, dc))
        },
        |(d, dc)| {
            for (acc, v) in fine.iter_mut().zip(&d) {
                acc.push(*v);
            }
            for (k, c) in dc.iter().enumerate() {
                gap[k].push(d[2 * k] - c);
            }
        },
    )?;

    let c2 = pair.constants().c2;
    let d0: Vec<f64> = x0_a.iter().zip(x0_b).map(|(a, b)| a - b).collect();
    let d0 = triple.h_norm_sq(&d0);
    let times: Vec<f64> = (0..=steps)
        .map(|k| (k as f64 * cfg.dt).min(pair.horizon()))
        .collect();
    let slack: Vec<f64> = (0..=steps)
        .map(|k| {
            if !richardson {
                0.0
            } else if k % 2 == 0 {
                gap[k / 2].mean().abs()
            } else {
                gap[k / 2].mean().abs().max(gap[k / 2 + 1].mean().abs())
            }
        })
        .collect();
    let mut worst: Option<EstimateReport> = None;
    let mut pass = true;
    let mut rhs = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let bound = (2.0 * c2 * times[k]).exp() * d0;
        let r = EstimateReport::new(
            "lipschitz",
            times[k],
            fine[k].mean(),
            bound,
            slack[k],
            fine[k].stderr(),
            0.0,
            cfg,
        );
        pass &= r.pass;
        rhs.push(r.rhs);
        let scale = |r: &EstimateReport| r.margin / 1f64.max(r.rhs.abs());
        if worst.as_ref().is_none_or(|w| scale(&r) < scale(w)) {
            worst = Some(r);
        }
    }
    Ok(LipschitzReport {
        times,
        lhs: fine.iter().map(|a| a.mean()).collect(),
        rhs,
        stderr: fine.iter().map(|a| a.stderr()).collect(),
        slack,
        pass,
        worst: worst.expect("the grid is nonempty"),
    })
}

/// `max_k |½‖X_{k+1}‖² − ½‖X_k‖² − ⟨X_k, ΔX_k⟩ − ½‖ΔX_k‖²|` with `ΔX_k`
/// rebuilt from the stored evaluations of the path.
pub fn energy_identity_residual(path: &PathSolution, triple: &GelfandTriple) -> Result<f64> {
    let steps = path.steps();
    let n = path.dim();
    check_dim(triple.dim(), n)?;
    if path.drift_evals.len() != steps
        || path.diffusion_evals.len() != steps
        || path.times.len() != steps + 1
        || (steps > 0 && path.increments.len() % steps != 0)
    {
        return Err(Error::invalid("path is missing stored evaluations"));
    }
    let mut worst = 0.0f64;
    let mut dx = vec![0.0; n];
    for k in 0..steps {
        let x = &path.states[k];
        crate::noise::apply_hs_into(&path.diffusion_evals[k], path.increment(k), &mut dx);
        for i in 0..n {
            dx[i] += path.dt * (path.shift * x[i] - path.drift_evals[k][i]);
        }
        let r = 0.5 * triple.h_norm_sq(&path.states[k + 1])
            - 0.5 * triple.h_norm_sq(x)
            - triple.inner(x, &dx)
            - 0.5 * triple.h_norm_sq(&dx);
        worst = worst.max(r.abs());
    }
    Ok(worst)
}
