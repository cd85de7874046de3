//! Finite-dimensional Gelfand triple `V ⊂ H ⊂ V'` on coordinate space.
//!
//! `H` carries the weighted inner product `⟨x, y⟩ = Σ wᵢ xᵢ yᵢ` and the
//! duality pairing between `V` and `V'` is that same inner product. The `V`
//! norm is either a plain `ℓᵖ` norm or an `ℓᵖ` norm of the discrete gradient
//! with homogeneous Dirichlet ghost values, which makes it definite.

use crate::error::{check_dim, Error, Result};

/// Boundary treatment of the discrete gradient norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Ghost values `x₀ = x_{n+1} = 0`.
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VNormKind {
    PlainLp {
        p: f64,
    },
    DiscreteGradientLp {
        p: f64,
        mesh_width: f64,
        boundary: Boundary,
    },
}

impl VNormKind {
    pub fn p(&self) -> f64 {
        match *self {
            VNormKind::PlainLp { p } | VNormKind::DiscreteGradientLp { p, .. } => p,
        }
    }
}

/// Iterations of ratio ascent used to estimate the embedding constant.
const EMBEDDING_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GelfandTriple {
    weights: Vec<f64>,
    v_norm: VNormKind,
    embedding_constant: f64,
}

impl GelfandTriple {
    pub fn new(weights: Vec<f64>, v_norm: VNormKind) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("triple dimension must be positive"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid(format!(
                "H weights must be positive, got {w}"
            )));
        }
        let p = v_norm.p();
        if !(p.is_finite() && p > 1.0) {
            return Err(Error::invalid(format!(
                "exponent p must lie in (1, inf), got {p}"
            )));
        }
        if let VNormKind::DiscreteGradientLp { mesh_width, .. } = v_norm {
            if !(mesh_width.is_finite() && mesh_width > 0.0) {
                return Err(Error::invalid(format!(
                    "mesh width must be positive, got {mesh_width}"
                )));
            }
        }
        let mut triple = GelfandTriple {
            weights,
            v_norm,
            embedding_constant: f64::NAN,
        };
        triple.embedding_constant = triple.estimate_embedding_constant();
        Ok(triple)
    }

    /// `ℓᵖ ⊂ ℓ² ⊂ ℓ^q` with unit weights.
    pub fn euclidean(dim: usize, p: f64) -> Result<Self> {
        Self::new(vec![1.0; dim], VNormKind::PlainLp { p })
    }

    /// Uniform Dirichlet grid on (0, 1) with `dim` interior nodes: mesh width
    /// `h = 1/(dim+1)`, H weights `h`, V norm `‖∇ₕx‖_{ℓᵖ}`.
    pub fn dirichlet_grid(dim: usize, p: f64) -> Result<Self> {
        let h = 1.0 / (dim as f64 + 1.0);
        Self::new(
            vec![h; dim],
            VNormKind::DiscreteGradientLp {
                p,
                mesh_width: h,
                boundary: Boundary::Dirichlet,
            },
        )
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn v_norm_kind(&self) -> VNormKind {
        self.v_norm
    }

    pub fn p(&self) -> f64 {
        self.v_norm.p()
    }

    /// Conjugate exponent `q = p/(p-1)`.
    pub fn q(&self) -> f64 {
        let p = self.p();
        p / (p - 1.0)
    }

    /// Estimated `c_emb` with `‖x‖_H ≤ c_emb ‖x‖_V`. Diagnostic only.
    pub fn embedding_constant(&self) -> f64 {
        self.embedding_constant
    }

    /// Whether `‖·‖_V` coincides with `‖·‖_H` (so `V = H = V'`).
    pub fn is_hilbert(&self) -> bool {
        matches!(self.v_norm, VNormKind::PlainLp { p } if p == 2.0)
            && self.weights.iter().all(|&w| w == 1.0)
    }

    pub fn pairing(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), y.len())?;
        Ok(self.inner(x, y))
    }

    pub fn h_norm(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.h_norm_sq(x).sqrt())
    }

    pub fn v_norm(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.v_norm_unchecked(x))
    }

    /// Lower bound of `‖ξ‖_{V'} = sup ⟨ξ, v⟩ / ‖v‖_V` by normalized gradient
    /// ascent on the V-unit sphere. Nondecreasing in `iterations`.
    pub fn dual_norm_estimate(&self, xi: &[f64], iterations: usize) -> Result<f64> {
        check_dim(self.dim(), xi.len())?;
        if iterations == 0 {
            return Err(Error::invalid(
                "dual norm estimate needs at least one iteration",
            ));
        }
        Ok(self.dual_norm_unchecked(xi, iterations))
    }

    // ---- unchecked kernels used by the solvers ----

    pub(crate) fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(x.iter().zip(y))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    pub(crate) fn h_norm_sq(&self, x: &[f64]) -> f64 {
        self.inner(x, x)
    }

    /// `‖x‖_V^p` without the final root.
    pub(crate) fn v_norm_pow(&self, x: &[f64]) -> f64 {
        match self.v_norm {
            VNormKind::PlainLp { p } => x.iter().map(|&v| abs_pow(v, p)).sum(),
            VNormKind::DiscreteGradientLp { p, mesh_width, .. } => {
                let h = mesh_width;
                let n = x.len();
                (0..=n)
                    .map(|e| h * abs_pow(edge_gradient(x, e, h), p))
                    .sum()
            }
        }
    }

    pub(crate) fn v_norm_unchecked(&self, x: &[f64]) -> f64 {
        let p = self.p();
        let s = self.v_norm_pow(x);
        if p == 2.0 {
            s.sqrt()
        } else {
            s.powf(1.0 / p)
        }
    }

    /// Writes the Euclidean gradient of `‖·‖_V` at `x` into `out` and returns
    /// the norm. The gradient is zero at `x = 0`.
    fn v_norm_gradient(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let p = self.p();
        let norm = self.v_norm_unchecked(x);
        if norm == 0.0 {
            out.fill(0.0);
            return 0.0;
        }
        let scale = 1.0 / norm.powf(p - 1.0);
        match self.v_norm {
            VNormKind::PlainLp { .. } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = signed_pow(v, p - 1.0) * scale;
                }
            }
            VNormKind::DiscreteGradientLp { mesh_width, .. } => {
                let h = mesh_width;
                let mut left = signed_pow(edge_gradient(x, 0, h), p - 1.0);
                for (i, o) in out.iter_mut().enumerate() {
                    let right = signed_pow(edge_gradient(x, i + 1, h), p - 1.0);
                    *o = (left - right) * scale;
                    left = right;
                }
            }
        }
        norm
    }

    pub(crate) fn dual_norm_unchecked(&self, xi: &[f64], iterations: usize) -> f64 {
        let amax = xi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if amax == 0.0 {
            return 0.0;
        }
        let xi: Vec<f64> = xi.iter().map(|v| v / amax).collect();
        let riesz: Vec<f64> = self.weights.iter().zip(&xi).map(|(w, v)| w * v).collect();
        // Two starts: the Riesz representer itself, and the ℓ^q duality map
        // applied to it (the exact maximizer for plain ℓᵖ norms).
        let q = self.q();
        let duality: Vec<f64> = riesz.iter().map(|&r| signed_pow(r, q - 1.0)).collect();
        let mut vgrad = vec![0.0; xi.len()];
        let a = ascend_ratio(&xi, iterations, |v, g| {
            self.dual_ratio(&riesz, v, g, &mut vgrad)
        });
        let b = ascend_ratio(&duality, iterations, |v, g| {
            self.dual_ratio(&riesz, v, g, &mut vgrad)
        });
        a.max(b).max(0.0) * amax
    }

    /// `⟨ξ, v⟩ / ‖v‖_V` and its gradient, with `riesz = Wξ`.
    fn dual_ratio(&self, riesz: &[f64], v: &[f64], grad: &mut [f64], vgrad: &mut [f64]) -> f64 {
        let num: f64 = riesz.iter().zip(v).map(|(a, b)| a * b).sum();
        let den = self.v_norm_gradient(v, vgrad);
        if den == 0.0 {
            grad.fill(0.0);
            return f64::NEG_INFINITY;
        }
        for ((g, r), dv) in grad.iter_mut().zip(riesz).zip(vgrad.iter()) {
            *g = (r * den - num * dv) / (den * den);
        }
        num / den
    }

    fn estimate_embedding_constant(&self) -> f64 {
        let n = self.dim();
        let mut starts: Vec<Vec<f64>> = vec![vec![1.0; n]];
        starts.push(
            (0..n)
                .map(|i| (std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).sin())
                .collect(),
        );
        let heaviest =
            self.weights.iter().enumerate().fold(
                0,
                |best, (i, &w)| if w > self.weights[best] { i } else { best },
            );
        let mut unit = vec![0.0; n];
        unit[heaviest] = 1.0;
        starts.push(unit);

        let mut vgrad = vec![0.0; n];
        let mut best = 0.0f64;
        for start in &starts {
            let eval = |x: &[f64], grad: &mut [f64]| -> f64 {
                let hn = self.h_norm_sq(x).sqrt();
                let vn = self.v_norm_gradient(x, &mut vgrad);
                if hn == 0.0 || vn == 0.0 {
                    grad.fill(0.0);
                    return f64::NEG_INFINITY;
                }
                for (i, g) in grad.iter_mut().enumerate() {
                    let dh = self.weights[i] * x[i] / hn;
                    *g = (dh * vn - hn * vgrad[i]) / (vn * vn);
                }
                hn / vn
            };
            best = best.max(ascend_ratio(start, EMBEDDING_ITERATIONS, eval));
        }
        best
    }
}

/// Maximizes a scale-invariant ratio by normalized gradient ascent with an
/// adaptive step; only improving moves are accepted, so the returned value
/// is nondecreasing in `iterations`.
pub(crate) fn ascend_ratio<F>(start: &[f64], iterations: usize, mut eval: F) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = start.len();
    let mut x = start.to_vec();
    if !normalize(&mut x) {
        return f64::NEG_INFINITY;
    }
    let mut grad = vec![0.0; n];
    let mut cand = vec![0.0; n];
    let mut cand_grad = vec![0.0; n];
    let mut value = eval(&x, &mut grad);
    let mut step = 0.1;
    for _ in 0..iterations {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(gnorm.is_finite() && gnorm > 0.0) || step < 1e-16 {
            break;
        }
        for ((c, xi), g) in cand.iter_mut().zip(&x).zip(&grad) {
            *c = xi + step * g / gnorm;
        }
        if !normalize(&mut cand) {
            step *= 0.5;
            continue;
        }
        let cv = eval(&cand, &mut cand_grad);
        if cv > value {
            std::mem::swap(&mut x, &mut cand);
            std::mem::swap(&mut grad, &mut cand_grad);
            value = cv;
            step = (step * 1.5).min(1.0);
        } else {
            step *= 0.5;
        }
    }
    value
}

fn normalize(x: &mut [f64]) -> bool {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= norm);
    true
}

/// Forward difference on edge `e` (between nodes `e-1` and `e`) with zero
/// ghost values outside `0..n`.
#[inline]
pub(crate) fn edge_gradient(x: &[f64], e: usize, h: f64) -> f64 {
    let right = x.get(e).copied().unwrap_or(0.0);
    let left = if e == 0 { 0.0 } else { x[e - 1] };
    (right - left) / h
}

#[inline]
pub(crate) fn abs_pow(v: f64, p: f64) -> f64 {
    if p == 2.0 {
        v * v
    } else if p == 4.0 {
        let s = v * v;
        s * s
    } else {
        v.abs().powf(p)
    }
}

/// `sign(v)|v|^e`.
#[inline]
pub(crate) fn signed_pow(v: f64, e: f64) -> f64 {
    if e == 1.0 {
        v
    } else if v == 0.0 {
        0.0
    } else {
        v.signum() * v.abs().powf(e)
    }
}
