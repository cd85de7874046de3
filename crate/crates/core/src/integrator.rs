//! Time stepping on a uniform grid `t_k = k·dt`.
//!
//! * [`Scheme::ExplicitEm`]: `X_{k+1} = X_k + dt(c₂X_k − Ã_λX_k) + B_λ(X_k)ΔW_k`.
//! * [`Scheme::PicardEm`]: fixed point of the discrete integral map with the
//!   same left-endpoint sums, reached by Picard iteration.
//! * [`Scheme::ImplicitReference`]: `X_{k+1} + dt·A(t_{k+1}, X_{k+1}) =
//!   X_k + B(t_k, X_k)ΔW_k`, with no regularization.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::noise::{apply_hs_into, write_flat, NoisePath};
use crate::operators::{OperatorPair, Scenario};
use crate::resolvent::{implicit_step, regularized_eval, ResolventOptions};
use crate::triple::GelfandTriple;

/// States with `‖X‖_H` above this abort the run.
pub const BLOW_UP_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ExplicitEm,
    PicardEm,
    ImplicitReference,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ExplicitEm => "explicit-em",
            Scheme::PicardEm => "picard-em",
            Scheme::ImplicitReference => "implicit-reference",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "explicit-em" => Some(Scheme::ExplicitEm),
            "picard-em" => Some(Scheme::PicardEm),
            "implicit-reference" => Some(Scheme::ImplicitReference),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub resolvent: ResolventOptions,
    /// Sup-in-time H-norm target of the Picard residual.
    pub picard_tol: f64,
    pub picard_max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            resolvent: ResolventOptions::default(),
            picard_tol: 1e-10,
            picard_max_iter: 2000,
        }
    }
}

/// A discrete path together with the evaluations that produced it.
///
/// Step `k` satisfies `X_{k+1} = X_k + dt(shift·X_k − drift_evals[k]) +
/// diffusion_evals[k]·ΔW_k` up to rounding, where `shift = c₂` and
/// `drift_evals[k] = Ã_λ(t_k, X_k)` for the regularized schemes, and
/// `shift = 0`, `drift_evals[k] = A(t_{k+1}, X_{k+1})` for the reference
/// scheme. `resolvent_points[k]` is `J_λ(t_k, X_k)`, or `X_{k+1}` for the
/// reference scheme. For Picard runs the evaluations are those of the
/// previous iterate, which is what built the returned states.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSolution {
    pub scheme: Scheme,
    pub lambda: f64,
    pub dt: f64,
    pub shift: f64,
    pub seed: u64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub drift_evals: Vec<Vec<f64>>,
    pub diffusion_evals: Vec<DMatrix<f64>>,
    pub resolvent_points: Vec<Vec<f64>>,
    /// Copy of the driving increments, row-major `steps × modes`.
    pub increments: Vec<f64>,
    pub picard_iterations: usize,
}

impl PathSolution {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("a path has at least one state")
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        let m = self.increments.len() / self.steps();
        &self.increments[k * m..(k + 1) * m]
    }

    /// CSV with header `t,x_1,...,x_n`, one row per grid point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut out = String::from("t");
        for i in 1..=self.dim() {
            out.push_str(&format!(",x_{i}"));
        }
        out.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            out.push_str(&format!("{t:e}"));
            for v in x {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        w.write_all(out.as_bytes())
    }

    /// Flat dump in the noise format: header `seed, steps, n, dt.to_bits()`,
    /// then the `(steps + 1) × n` states row-major.
    pub fn write_binary<W: Write>(&self, w: W) -> std::io::Result<()> {
        let data: Vec<f64> = self.states.iter().flatten().copied().collect();
        write_flat(
            w,
            [
                self.seed,
                self.steps() as u64,
                self.dim() as u64,
                self.dt.to_bits(),
            ],
            &data,
        )
    }
}

fn validate(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    x0: &[f64],
    noise: &NoisePath,
) -> Result<()> {
    pair.check_compatible(triple)?;
    check_dim(pair.dim(), x0.len())?;
    check_dim(pair.modes(), noise.modes())?;
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("initial state has non-finite entries"));
    }
    let horizon = pair.horizon();
    if (noise.horizon() - horizon).abs() > 1e-9 * horizon {
        return Err(Error::invalid(format!(
            "noise covers [0, {}] but the horizon is {horizon}",
            noise.horizon()
        )));
    }
    Ok(())
}

fn grid(noise: &NoisePath, horizon: f64) -> Vec<f64> {
    (0..=noise.steps())
        .map(|k| (k as f64 * noise.dt()).min(horizon))
        .collect()
}

fn guard(triple: &GelfandTriple, x: &[f64], step: usize) -> Result<()> {
    let norm = triple.h_norm_sq(x).sqrt();
    if !norm.is_finite() || norm > BLOW_UP_NORM {
        return Err(Error::BlowUp {
            last_finite_step: step,
            norm,
        });
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(())
}

/// One step's worth of regularized evaluations at `x`.
struct StepEval {
    yosida: Vec<f64>,
    diffusion: DMatrix<f64>,
    resolvent: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn eval_step(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    scenario: Scenario,
    lambda: f64,
    t: f64,
    x: &[f64],
    opts: &ResolventOptions,
    k: usize,
) -> Result<StepEval> {
    let ev =
        regularized_eval(pair, triple, scenario, lambda, t, x, opts).map_err(|e| e.at_step(k))?;
    Ok(StepEval {
        yosida: ev.yosida,
        diffusion: ev.diffusion,
        resolvent: ev.resolvent.point,
    })
}

/// `dt(c₂x − Ã_λx) + B_λΔW` into `dx`.
fn increment_into(c2: f64, dt: f64, x: &[f64], ev: &StepEval, dw: &[f64], dx: &mut [f64]) {
    apply_hs_into(&ev.diffusion, dw, dx);
    for i in 0..x.len() {
        dx[i] += dt * (c2 * x[i] - ev.yosida[i]);
    }
}

pub fn solve_regularized_em(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambda: f64,
    x0: &[f64],
    noise: &NoisePath,
    opts: &SolverOptions,
) -> Result<PathSolution> {
    check_lambda(lambda)?;
    validate(pair, triple, x0, noise)?;
    let (steps, dt, n) = (noise.steps(), noise.dt(), x0.len());
    let c2 = pair.constants().c2;
    let scenario = Scenario(noise.seed());
    let times = grid(noise, pair.horizon());

    let mut states = Vec::with_capacity(steps + 1);
    let mut drift_evals = Vec::with_capacity(steps);
    let mut diffusion_evals = Vec::with_capacity(steps);
    let mut resolvent_points = Vec::with_capacity(steps);
    states.push(x0.to_vec());
    let mut dx = vec![0.0; n];
    for k in 0..steps {
        let x = &states[k];
        let ev = eval_step(
            pair,
            triple,
            scenario,
            lambda,
            times[k],
            x,
            &opts.resolvent,
            k,
        )?;
        increment_into(c2, dt, x, &ev, noise.increment(k), &mut dx);
        let next: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
        guard(triple, &next, k)?;
        states.push(next);
        drift_evals.push(ev.yosida);
        diffusion_evals.push(ev.diffusion);
        resolvent_points.push(ev.resolvent);
    }
    Ok(PathSolution {
        scheme: Scheme::ExplicitEm,
        lambda,
        dt,
        shift: c2,
        seed: noise.seed(),
        times,
        states,
        drift_evals,
        diffusion_evals,
        resolvent_points,
        increments: noise.increments().to_vec(),
        picard_iterations: 0,
    })
}

/// Picard iteration of the discrete integral map
/// `Γ(X)(t_k) = X₀ + Σ_{j<k} [dt(c₂X(t_j) − Ã_λX(t_j)) + B_λX(t_j)ΔW_j]`
/// from `X⁰ ≡ X₀`. Returns the first iterate `X^k`, `k ≥ 1`, with
/// `max_j ‖Γ(X^k)(t_j) − X^k(t_j)‖_H ≤ picard_tol`; `picard_iterations = k`.
pub fn solve_regularized_picard(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambda: f64,
    x0: &[f64],
    noise: &NoisePath,
    opts: &SolverOptions,
) -> Result<PathSolution> {
    check_lambda(lambda)?;
    validate(pair, triple, x0, noise)?;
    if opts.picard_max_iter == 0 {
        return Err(Error::invalid("picard_max_iter must be at least 1"));
    }
    let (steps, dt, n) = (noise.steps(), noise.dt(), x0.len());
    let c2 = pair.constants().c2;
    let scenario = Scenario(noise.seed());
    let times = grid(noise, pair.horizon());

    // Evaluations at the current iterate, recomputed only where it moved.
    let mut evals: Vec<Option<(Vec<f64>, StepEval)>> = (0..steps).map(|_| None).collect();
    let refresh =
        |iterate: &[Vec<f64>], evals: &mut Vec<Option<(Vec<f64>, StepEval)>>| -> Result<()> {
            for k in 0..steps {
                let fresh = match &evals[k] {
                    Some((at, _)) => at != &iterate[k],
                    None => true,
                };
                if fresh {
                    let ev = eval_step(
                        pair,
                        triple,
                        scenario,
                        lambda,
                        times[k],
                        &iterate[k],
                        &opts.resolvent,
                        k,
                    )?;
                    evals[k] = Some((iterate[k].clone(), ev));
                }
            }
            Ok(())
        };
    let apply_gamma =
        |iterate: &[Vec<f64>], evals: &[Option<(Vec<f64>, StepEval)>]| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(steps + 1);
            out.push(x0.to_vec());
            let mut dx = vec![0.0; n];
            for k in 0..steps {
                let ev = &evals[k].as_ref().expect("evaluations refreshed").1;
                increment_into(c2, dt, &iterate[k], ev, noise.increment(k), &mut dx);
                let next: Vec<f64> = out[k].iter().zip(&dx).map(|(a, b)| a + b).collect();
                guard(triple, &next, k)?;
                out.push(next);
            }
            Ok(out)
        };
    let sup_distance = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
                triple.h_norm_sq(&d).sqrt()
            })
            .fold(0.0, f64::max)
    };

    let mut current: Vec<Vec<f64>> = vec![x0.to_vec(); steps + 1];
    refresh(&current, &mut evals)?;
    let mut previous_evals;
    let mut last_residual = f64::INFINITY;
    let mut increases = 0;
    for k in 1..=opts.picard_max_iter {
        let next = apply_gamma(&current, &evals)?;
        // Evaluations that built `next`.
        previous_evals = evals
            .iter()
            .map(|e| e.as_ref().map(|(_, ev)| clone_eval(ev)))
            .collect::<Vec<_>>();
        current = next;
        refresh(&current, &mut evals)?;
        let image = apply_gamma(&current, &evals)?;
        let residual = sup_distance(&image, &current);
        if residual <= opts.picard_tol {
            let (mut drift_evals, mut diffusion_evals, mut resolvent_points) = (
                Vec::with_capacity(steps),
                Vec::with_capacity(steps),
                Vec::with_capacity(steps),
            );
            for ev in previous_evals.into_iter() {
                let ev = ev.expect("evaluations refreshed");
                drift_evals.push(ev.yosida);
                diffusion_evals.push(ev.diffusion);
                resolvent_points.push(ev.resolvent);
            }
            return Ok(PathSolution {
                scheme: Scheme::PicardEm,
                lambda,
                dt,
                shift: c2,
                seed: noise.seed(),
                times,
                states: current,
                drift_evals,
                diffusion_evals,
                resolvent_points,
                increments: noise.increments().to_vec(),
                picard_iterations: k,
            });
        }
        increases = if residual > last_residual {
            increases + 1
        } else {
            0
        };
        if increases >= 3 {
            return Err(Error::PicardDivergence {
                iteration: k,
                residual,
            });
        }
        last_residual = residual;
    }
    Err(Error::PicardDivergence {
        iteration: opts.picard_max_iter,
        residual: last_residual,
    })
}

fn clone_eval(ev: &StepEval) -> StepEval {
    StepEval {
        yosida: ev.yosida.clone(),
        diffusion: ev.diffusion.clone(),
        resolvent: ev.resolvent.clone(),
    }
}

/// Drift-implicit, diffusion-explicit Euler for the unregularized equation.
/// Needs `dt·c₂ < 1`.
pub fn solve_reference_implicit(
    pair: &OperatorPair,
    triple: &GelfandTriple,
    x0: &[f64],
    noise: &NoisePath,
    opts: &SolverOptions,
) -> Result<PathSolution> {
    validate(pair, triple, x0, noise)?;
    let (steps, dt, n) = (noise.steps(), noise.dt(), x0.len());
    let scenario = Scenario(noise.seed());
    let times = grid(noise, pair.horizon());

    let mut states = Vec::with_capacity(steps + 1);
    let mut drift_evals = Vec::with_capacity(steps);
    let mut diffusion_evals = Vec::with_capacity(steps);
    let mut resolvent_points = Vec::with_capacity(steps);
    states.push(x0.to_vec());
    let mut bdw = vec![0.0; n];
    for k in 0..steps {
        let x = &states[k];
        let b = pair
            .diffusion_at(scenario, times[k], x)
            .map_err(|e| e.at_step(k))?;
        apply_hs_into(&b, noise.increment(k), &mut bdw);
        let y: Vec<f64> = x.iter().zip(&bdw).map(|(a, c)| a + c).collect();
        let sol = implicit_step(
            pair,
            triple,
            scenario,
            dt,
            times[k + 1],
            &y,
            &opts.resolvent,
        )
        .map_err(|e| e.at_step(k))?;
        let next = sol.point;
        guard(triple, &next, k)?;
        drift_evals.push(y.iter().zip(&next).map(|(a, c)| (a - c) / dt).collect());
        diffusion_evals.push(b);
        resolvent_points.push(next.clone());
        states.push(next);
    }
    Ok(PathSolution {
        scheme: Scheme::ImplicitReference,
        lambda: 0.0,
        dt,
        shift: 0.0,
        seed: noise.seed(),
        times,
        states,
        drift_evals,
        diffusion_evals,
        resolvent_points,
        increments: noise.increments().to_vec(),
        picard_iterations: 0,
    })
}

/// Dispatches on `scheme`; `lambda` is ignored by the reference scheme.
pub fn solve(
    scheme: Scheme,
    pair: &OperatorPair,
    triple: &GelfandTriple,
    lambda: f64,
    x0: &[f64],
    noise: &NoisePath,
    opts: &SolverOptions,
) -> Result<PathSolution> {
    match scheme {
        Scheme::ExplicitEm => solve_regularized_em(pair, triple, lambda, x0, noise, opts),
        Scheme::PicardEm => solve_regularized_picard(pair, triple, lambda, x0, noise, opts),
        Scheme::ImplicitReference => solve_reference_implicit(pair, triple, x0, noise, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_path;
    use crate::operators::{
        AdditiveNoise, Constants, LinearDrift, MultiplicativeScalar, Profile, ScalarPower,
    };
    use std::sync::Arc;

    fn constants(c2: f64, p: f64, horizon: f64) -> Constants {
        Constants {
            c1: 1.0,
            c2,
            p,
            growth: 1.0,
            f: Profile::Constant(0.0),
            g: Profile::Constant(0.0),
            horizon,
        }
    }

    fn linear(a: f64, sigma: f64, horizon: f64) -> (OperatorPair, GelfandTriple) {
        let pair = OperatorPair::new(
            Arc::new(LinearDrift { dim: 2, a }),
            Arc::new(MultiplicativeScalar {
                dim: 2,
                sigma,
                modes: 1,
            }),
            constants(0.0, 2.0, horizon),
        )
        .unwrap();
        (pair, GelfandTriple::euclidean(2, 2.0).unwrap())
    }

    #[test]
    fn deterministic_linear_recurrences() {
        let (a, lambda) = (2.0, 0.25);
        let (pair, triple) = linear(a, 0.0, 1.0);
        let noise = sample_path(1, 1.0 / 32.0, 32, 1).unwrap();
        let opts = SolverOptions::default();
        let x0 = [1.0, -0.5];

        let em = solve_regularized_em(&pair, &triple, lambda, &x0, &noise, &opts).unwrap();
        let factor = 1.0 - noise.dt() * a / (1.0 + lambda * a);
        let mut expect = x0.to_vec();
        for k in 0..=32 {
            for i in 0..2 {
                assert!((em.states[k][i] - expect[i]).abs() <= 1e-13, "step {k}");
            }
            expect.iter_mut().for_each(|v| *v *= factor);
        }

        let imp = solve_reference_implicit(&pair, &triple, &x0, &noise, &opts).unwrap();
        let mut expect = x0.to_vec();
        for k in 0..=32 {
            for i in 0..2 {
                assert!((imp.states[k][i] - expect[i]).abs() <= 1e-13);
            }
            expect.iter_mut().for_each(|v| *v /= 1.0 + noise.dt() * a);
        }
        assert_eq!(imp.lambda, 0.0);
    }

    #[test]
    fn em_converges_to_regularized_flow() {
        let (a, lambda) = (2.0, 0.5);
        let (pair, triple) = linear(a, 0.0, 1.0);
        let opts = SolverOptions::default();
        let rate = a / (1.0 + lambda * a);
        let mut errors = Vec::new();
        for level in 4..9 {
            let steps = 1usize << level;
            let noise = sample_path(1, 1.0 / steps as f64, steps, 1).unwrap();
            let sol =
                solve_regularized_em(&pair, &triple, lambda, &[1.0, 0.0], &noise, &opts).unwrap();
            errors.push((sol.final_state()[0] - (-rate).exp()).abs());
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.8..2.2).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn equilibrium_is_constant() {
        let (pair, triple) = linear(2.0, 0.5, 1.0);
        let noise = sample_path(3, 0.125, 8, 1).unwrap();
        let opts = SolverOptions::default();
        for scheme in [
            Scheme::ExplicitEm,
            Scheme::PicardEm,
            Scheme::ImplicitReference,
        ] {
            let sol = solve(scheme, &pair, &triple, 0.5, &[0.0, 0.0], &noise, &opts).unwrap();
            assert!(sol.states.iter().all(|x| x == &vec![0.0, 0.0]));
        }
        let sol =
            solve_regularized_picard(&pair, &triple, 0.5, &[0.0, 0.0], &noise, &opts).unwrap();
        assert_eq!(sol.picard_iterations, 1);
    }

    #[test]
    fn implicit_cubic_root() {
        let pair = OperatorPair::new(
            Arc::new(ScalarPower { dim: 1, p: 4.0 }),
            Arc::new(AdditiveNoise::zero(1, 1)),
            constants(0.0, 4.0, 1.0),
        )
        .unwrap();
        let triple = GelfandTriple::euclidean(1, 4.0).unwrap();
        let noise = sample_path(0, 1.0, 1, 1).unwrap();
        let sol =
            solve_reference_implicit(&pair, &triple, &[1.0], &noise, &SolverOptions::default())
                .unwrap();
        // Independent bisection on x³ + x − 1.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * mid * mid + mid - 1.0 > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((sol.states[1][0] - lo).abs() < 1e-12);
        assert!((sol.states[1][0] - 0.6823278).abs() < 1e-6);
    }

    #[test]
    fn implicit_additive_step_is_one_resolve() {
        let g0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.1, 0.2]);
        let pair = OperatorPair::new(
            Arc::new(ScalarPower { dim: 2, p: 4.0 }),
            Arc::new(AdditiveNoise::new(g0.clone())),
            constants(0.0, 4.0, 1.0),
        )
        .unwrap();
        let triple = GelfandTriple::euclidean(2, 4.0).unwrap();
        let noise = sample_path(21, 0.25, 4, 2).unwrap();
        let opts = SolverOptions::default();
        let sol = solve_reference_implicit(&pair, &triple, &[1.0, -1.0], &noise, &opts).unwrap();
        for k in 0..4 {
            let kick = crate::noise::apply_hs(&g0, noise.increment(k)).unwrap();
            let y: Vec<f64> = sol.states[k]
                .iter()
                .zip(&kick)
                .map(|(a, b)| a + b)
                .collect();
            let step = implicit_step(
                &pair,
                &triple,
                Scenario(21),
                0.25,
                sol.times[k + 1],
                &y,
                &opts.resolvent,
            )
            .unwrap();
            assert_eq!(step.point, sol.states[k + 1]);
        }
    }

    #[test]
    fn picard_without_drift_needs_two_iterations() {
        let pair = OperatorPair::new(
            Arc::new(LinearDrift { dim: 1, a: 0.0 }),
            Arc::new(MultiplicativeScalar {
                dim: 1,
                sigma: 0.7,
                modes: 1,
            }),
            constants(0.0, 2.0, 1.0),
        )
        .unwrap();
        let triple = GelfandTriple::euclidean(1, 2.0).unwrap();
        let noise = sample_path(4, 0.5, 2, 1).unwrap();
        let opts = SolverOptions::default();
        let sol = solve_regularized_picard(&pair, &triple, 0.1, &[1.0], &noise, &opts).unwrap();
        assert_eq!(sol.picard_iterations, 2);
        // Hand-unrolled: X(t1) = 1 + σΔW0, X(t2) = X(t1)(1 + σΔW1).
        let (w0, w1) = (noise.increment(0)[0], noise.increment(1)[0]);
        let x1 = 1.0 + 0.7 * w0;
        let x2 = x1 + 0.7 * x1 * w1;
        assert!((sol.states[1][0] - x1).abs() < 1e-15);
        assert!((sol.states[2][0] - x2).abs() < 1e-15);
    }

    #[test]
    fn picard_matches_em() {
        let (pair, triple) = linear(2.0, 0.5, 1.0);
        let opts = SolverOptions::default();
        for steps in [16usize, 64, 256] {
            let noise = sample_path(17, 1.0 / steps as f64, steps, 1).unwrap();
            let em =
                solve_regularized_em(&pair, &triple, 0.25, &[1.0, 0.5], &noise, &opts).unwrap();
            let pi =
                solve_regularized_picard(&pair, &triple, 0.25, &[1.0, 0.5], &noise, &opts).unwrap();
            let gap = em
                .states
                .iter()
                .zip(&pi.states)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
                .fold(0.0, f64::max);
            assert!(gap <= 10.0 * opts.picard_tol, "{gap}");
            assert!(pi.picard_iterations >= 2);
        }
    }

    #[test]
    fn picard_divergence_is_reported() {
        // dt·|Ã_λ| far beyond 1 makes Γ expansive.
        let (pair, triple) = linear(1e6, 0.0, 1.0);
        let noise = sample_path(1, 1.0 / 64.0, 64, 1).unwrap();
        let opts = SolverOptions {
            picard_max_iter: 50,
            ..SolverOptions::default()
        };
        let err =
            solve_regularized_picard(&pair, &triple, 1e-4, &[1.0, 1.0], &noise, &opts).unwrap_err();
        assert!(
            matches!(err, Error::PicardDivergence { .. } | Error::BlowUp { .. }),
            "{err}"
        );
    }

    #[test]
    fn future_increments_do_not_leak() {
        let (pair, triple) = linear(2.0, 0.5, 1.0);
        let opts = SolverOptions::default();
        let noise = sample_path(9, 1.0 / 64.0, 64, 1).unwrap();
        let cut = 40;
        let mut perturbed = noise.increments().to_vec();
        for v in &mut perturbed[cut..] {
            *v = -3.0 * *v + 0.1;
        }
        let other = NoisePath::from_increments(9, noise.dt(), 1, perturbed).unwrap();
        for scheme in [
            Scheme::ExplicitEm,
            Scheme::PicardEm,
            Scheme::ImplicitReference,
        ] {
            let a = solve(scheme, &pair, &triple, 0.25, &[1.0, 0.5], &noise, &opts).unwrap();
            let b = solve(scheme, &pair, &triple, 0.25, &[1.0, 0.5], &other, &opts).unwrap();
            if scheme == Scheme::PicardEm {
                // Picard stops on a global residual, so the prefix matches to tolerance.
                for k in 0..=cut {
                    for i in 0..2 {
                        assert!((a.states[k][i] - b.states[k][i]).abs() <= 10.0 * opts.picard_tol);
                    }
                }
            } else {
                assert_eq!(a.states[..=cut], b.states[..=cut]);
            }
            assert_ne!(a.states[cut + 1], b.states[cut + 1]);
        }
    }

    #[test]
    fn blow_up_is_caught() {
        let pair = OperatorPair::new(
            Arc::new(LinearDrift { dim: 2, a: 1.0 }),
            Arc::new(AdditiveNoise::scaled_identity(2, 1, 1e15)),
            constants(0.0, 2.0, 1.0),
        )
        .unwrap();
        let triple = GelfandTriple::euclidean(2, 2.0).unwrap();
        let noise = sample_path(2, 1.0 / 64.0, 64, 1).unwrap();
        let opts = SolverOptions::default();
        for scheme in [
            Scheme::ExplicitEm,
            Scheme::PicardEm,
            Scheme::ImplicitReference,
        ] {
            let err = solve(scheme, &pair, &triple, 1.0, &[1.0, 1.0], &noise, &opts);
            assert!(
                matches!(
                    err,
                    Err(Error::BlowUp {
                        last_finite_step: 0,
                        ..
                    })
                ),
                "{scheme:?}: {err:?}"
            );
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (pair, triple) = linear(2.0, 0.5, 1.0);
        let opts = SolverOptions::default();
        let short = sample_path(1, 0.1, 5, 1).unwrap();
        assert!(solve_regularized_em(&pair, &triple, 1.0, &[1.0, 0.0], &short, &opts).is_err());
        let noise = sample_path(1, 0.25, 4, 2).unwrap();
        assert!(solve_regularized_em(&pair, &triple, 1.0, &[1.0, 0.0], &noise, &opts).is_err());
        let noise = sample_path(1, 0.25, 4, 1).unwrap();
        assert!(solve_regularized_em(&pair, &triple, 0.0, &[1.0, 0.0], &noise, &opts).is_err());
        assert!(solve_regularized_em(&pair, &triple, 1.0, &[1.0], &noise, &opts).is_err());
    }

    #[test]
    fn csv_and_binary_output() {
        let (pair, triple) = linear(2.0, 0.5, 1.0);
        let noise = sample_path(5, 0.5, 2, 1).unwrap();
        let sol = solve_regularized_em(
            &pair,
            &triple,
            1.0,
            &[1.0, 0.5],
            &noise,
            &SolverOptions::default(),
        )
        .unwrap();
        let mut csv = Vec::new();
        sol.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x_1,x_2");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0e0,1e0,5e-1"));

        let mut bin = Vec::new();
        sol.write_binary(&mut bin).unwrap();
        let (header, data) = crate::noise::read_flat(bin.as_slice()).unwrap();
        assert_eq!(header, [5, 2, 2, 0.5f64.to_bits()]);
        assert_eq!(data.len(), 6);
        assert_eq!(data[4..], sol.states[2][..]);
    }
}
