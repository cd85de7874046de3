//! Seeded increments of an `m`-mode truncated Wiener process.
//!
//! Normals come from the inverse normal CDF applied to a counter-based
//! uniform: `u = hash(seed, stream, index)`, `z = −√2·erfc⁻¹(2u)`. A path of
//! `steps = odd·2^ℓ` increments is built by drawing `odd` increments of size
//! `dt·2^ℓ` (stream 0) and refining `ℓ` times by Brownian-bridge midpoints
//! (stream `ℓ` for level `ℓ`). Every dyadic coarsening of a path is therefore
//! the path the same seed would give at that step size.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use statrs::function::erf::erfc_inv;

use crate::error::{check_dim, Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of Monte Carlo path `index` under master seed `seed`.
pub fn path_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Uniform on the open interval (0, 1).
fn uniform(seed: u64, stream: u64, index: u64) -> f64 {
    let key = splitmix64(seed ^ splitmix64(stream.wrapping_mul(GOLDEN) ^ 0x5851_F42D_4C95_7F2D));
    let bits = splitmix64(key ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93)) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw number `index` of `stream` under `seed`.
pub fn standard_normal(seed: u64, stream: u64, index: u64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * uniform(seed, stream, index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    seed: u64,
    dt: f64,
    steps: usize,
    modes: usize,
    /// Row-major `steps × modes`.
    increments: Vec<f64>,
}

impl NoisePath {
    /// Wraps explicit increments (row-major `steps × modes`).
    pub fn from_increments(seed: u64, dt: f64, modes: usize, increments: Vec<f64>) -> Result<Self> {
        check_shape(dt, modes)?;
        if increments.is_empty() || increments.len() % modes != 0 {
            return Err(Error::invalid(format!(
                "{} increments do not fill whole rows of {modes} modes",
                increments.len()
            )));
        }
        if !increments.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("noise increments must be finite"));
        }
        Ok(NoisePath {
            seed,
            dt,
            steps: increments.len() / modes,
            modes,
            increments,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `ΔW_k`.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.modes..(k + 1) * self.modes]
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    /// Halves the step by Brownian-bridge midpoints: given `D` over a step of
    /// size `h`, the left half is `D/2 + √(h/4)·z` and the right half the rest.
    pub fn refine(&self, stream: u64) -> NoisePath {
        let m = self.modes;
        let sd = (self.dt / 4.0).sqrt();
        let mut fine = vec![0.0; 2 * self.increments.len()];
        for k in 0..self.steps {
            for j in 0..m {
                let d = self.increments[k * m + j];
                let z = standard_normal(self.seed, stream, (k * m + j) as u64);
                let left = 0.5 * d + sd * z;
                fine[2 * k * m + j] = left;
                fine[(2 * k + 1) * m + j] = d - left;
            }
        }
        NoisePath {
            seed: self.seed,
            dt: self.dt / 2.0,
            steps: 2 * self.steps,
            modes: m,
            increments: fine,
        }
    }

    /// Sums adjacent pairs of increments.
    pub fn coarsen(&self) -> Result<NoisePath> {
        if self.steps % 2 != 0 {
            return Err(Error::invalid(format!(
                "cannot coarsen an odd number of steps ({})",
                self.steps
            )));
        }
        let m = self.modes;
        let increments = (0..self.steps / 2)
            .flat_map(|k| (0..m).map(move |j| (k, j)))
            .map(|(k, j)| self.increments[2 * k * m + j] + self.increments[(2 * k + 1) * m + j])
            .collect();
        Ok(NoisePath {
            seed: self.seed,
            dt: 2.0 * self.dt,
            steps: self.steps / 2,
            modes: m,
            increments,
        })
    }

    /// Flat little-endian dump: header `seed, steps, modes, dt.to_bits()` as
    /// `u64`, then the increments row-major as `f64`.
    pub fn write_binary<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_flat(
            w,
            [
                self.seed,
                self.steps as u64,
                self.modes as u64,
                self.dt.to_bits(),
            ],
            &self.increments,
        )
    }

    pub fn read_binary<R: Read>(r: R) -> Result<NoisePath> {
        let (header, data) = read_flat(r)?;
        let [seed, steps, modes, dt_bits] = header;
        let (steps, modes) = (steps as usize, modes as usize);
        let path = NoisePath::from_increments(seed, f64::from_bits(dt_bits), modes.max(1), data)?;
        if path.steps != steps || path.modes != modes {
            return Err(Error::invalid(
                "binary header does not match the payload length",
            ));
        }
        Ok(path)
    }
}

fn check_shape(dt: f64, modes: usize) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if modes == 0 {
        return Err(Error::invalid("modes must be at least 1"));
    }
    Ok(())
}

pub(crate) fn write_flat<W: Write>(
    mut w: W,
    header: [u64; 4],
    data: &[f64],
) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(32 + 8 * data.len());
    for h in header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_flat<R: Read>(mut r: R) -> Result<([u64; 4], Vec<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::invalid(format!("cannot read binary dump: {e}")))?;
    if bytes.len() < 32 || bytes.len() % 8 != 0 {
        return Err(Error::invalid("binary dump is truncated"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    let header = [word(0), word(1), word(2), word(3)];
    let data = (4..bytes.len() / 8)
        .map(|i| f64::from_bits(word(i)))
        .collect();
    Ok((header, data))
}

/// Increments `ΔW_k ~ N(0, dt·I_m)` for `k < steps`, deterministic in `seed`.
pub fn sample_path(seed: u64, dt: f64, steps: usize, modes: usize) -> Result<NoisePath> {
    check_shape(dt, modes)?;
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let level = steps.trailing_zeros();
    let odd = steps >> level;
    let coarse_dt = dt * (1u64 << level) as f64;
    let sd = coarse_dt.sqrt();
    let increments = (0..odd * modes)
        .map(|i| sd * standard_normal(seed, 0, i as u64))
        .collect();
    let mut path = NoisePath {
        seed,
        dt: coarse_dt,
        steps: odd,
        modes,
        increments,
    };
    for l in 1..=level {
        path = path.refine(l as u64);
    }
    // The refinement halves dt exactly; keep the requested value bit for bit.
    path.dt = dt;
    Ok(path)
}

/// `B·ΔW` for `B` of shape `n × m`.
pub fn apply_hs(b: &DMatrix<f64>, dw: &[f64]) -> Result<Vec<f64>> {
    check_dim(b.ncols(), dw.len())?;
    let mut out = vec![0.0; b.nrows()];
    apply_hs_into(b, dw, &mut out);
    Ok(out)
}

pub(crate) fn apply_hs_into(b: &DMatrix<f64>, dw: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (j, w) in dw.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for (o, bij) in out.iter_mut().zip(b.column(j).iter()) {
            *o += bij * w;
        }
    }
}
