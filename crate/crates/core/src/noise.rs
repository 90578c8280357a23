//! Truncated spectral Q-Wiener noise on the unit square.
//!
//! The covariance is diagonal in the sine basis
//! `e_jk(x, y) = 2 sin(j pi x) sin(k pi y)` with eigenvalues
//! `eta_jk = 3 / (j^3 + k^3)`. Every Monte Carlo sample owns a
//! [`BrownianPath`] whose fine-step Gaussian increments are addressed by
//! `(seed, sample, step)` through a ChaCha stream, so any coarse increment
//! can be rebuilt as the exact sum of its fine increments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldState, GridLayout, GridSpec};

/// Covariance eigenvalue of mode `(j, k)`.
pub fn q_eigenvalue(j: i64, k: i64) -> Result<f64> {
    if j <= 0 || k <= 0 {
        return Err(Error::InvalidArgument(format!(
            "mode indices must be positive, got ({j}, {k})"
        )));
    }
    let (j, k) = (j as f64, k as f64);
    Ok(3.0 / (j * j * j + k * k * k))
}

/// `sin(pi t)`, exactly zero at integer `t`.
fn sin_pi(t: f64) -> f64 {
    let r = t - 2.0 * (t / 2.0).round();
    if r == 0.0 || r.abs() == 1.0 {
        0.0
    } else {
        (std::f64::consts::PI * r).sin()
    }
}

/// Orthonormal sine basis function `2 sin(j pi x) sin(k pi y)`.
pub fn basis_eval(j: u32, k: u32, x: f64, y: f64) -> f64 {
    2.0 * sin_pi(j as f64 * x) * sin_pi(k as f64 * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub j: u32,
    pub k: u32,
    pub eta: f64,
}

/// Which modes to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Modes `1 <= j, k <= max_mode` are retained. Zero means "use the grid's
    /// cell count".
    pub max_mode: u32,
    /// Modes with `eta < eta_threshold` are dropped.
    pub eta_threshold: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            max_mode: 0,
            eta_threshold: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn modes(&self, n_cells: usize) -> Result<Vec<Mode>> {
        if !(self.eta_threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eta_threshold must be nonnegative, got {}",
                self.eta_threshold
            )));
        }
        let max = if self.max_mode == 0 {
            n_cells as u32
        } else {
            self.max_mode
        };
        let mut modes = Vec::new();
        for j in 1..=max {
            for k in 1..=max {
                let eta = q_eigenvalue(j as i64, k as i64)?;
                if eta >= self.eta_threshold {
                    modes.push(Mode { j, k, eta });
                }
            }
        }
        Ok(modes)
    }
}

/// Retained modes with their basis functions sampled at every degree of
/// freedom of a layout.
#[derive(Debug, Clone)]
pub struct SpectralNoise {
    grid: GridSpec,
    modes: Vec<Mode>,
    sqrt_eta: Vec<f64>,
    /// `dim x n_modes`; column `m` is `e_m` at every stagger point.
    basis: DMatrix<f64>,
    trace: f64,
}

impl SpectralNoise {
    pub fn new(layout: &GridLayout, spec: &NoiseSpec) -> Result<Self> {
        Self::from_modes(layout, spec.modes(layout.spec().n_cells)?)
    }

    pub fn from_modes(layout: &GridLayout, modes: Vec<Mode>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidArgument(
                "noise has no retained modes".to_string(),
            ));
        }
        if let Some(m) = modes.iter().find(|m| !(m.eta >= 0.0 && m.eta.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "mode ({}, {}) has invalid eigenvalue {}",
                m.j, m.k, m.eta
            )));
        }
        let dim = layout.dim();
        let basis = DMatrix::from_fn(dim, modes.len(), |row, col| {
            if layout.is_boundary_e3(row) {
                return 0.0;
            }
            let (x, y) = layout.coordinate_of(row);
            basis_eval(modes[col].j, modes[col].k, x, y)
        });
        let trace: f64 = modes.iter().map(|m| m.eta).sum();
        if !(trace > 0.0 && trace.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "trace of the covariance must be positive and finite, got {trace}"
            )));
        }
        Ok(SpectralNoise {
            grid: *layout.spec(),
            sqrt_eta: modes.iter().map(|m| m.eta.sqrt()).collect(),
            modes,
            basis,
            trace,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Noise field `sum_m sqrt(eta_m) e_m(x) dbeta_m` at every stagger point.
    pub fn evaluate(&self, mode_increments: &[f64]) -> Vec<f64> {
        assert_eq!(mode_increments.len(), self.n_modes());
        let coeffs = DVector::from_iterator(
            self.n_modes(),
            mode_increments.iter().zip(&self.sqrt_eta).map(|(b, s)| b * s),
        );
        (&self.basis * coeffs).data.into()
    }

    /// Column-wise [`SpectralNoise::evaluate`] for a block of samples; the
    /// input is `n_modes x batch`.
    pub fn evaluate_block(&self, mode_increments: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(mode_increments.nrows(), self.n_modes());
        let mut coeffs = mode_increments.clone();
        for (mut row, s) in coeffs.row_iter_mut().zip(&self.sqrt_eta) {
            row *= *s;
        }
        &self.basis * coeffs
    }
}

pub fn trace_q(noise: &SpectralNoise) -> f64 {
    noise.trace()
}

/// Fine-resolution Brownian increments of one sample.
///
/// Step `l` draws `n_modes` standard normals from the ChaCha8 stream
/// `(master_seed, sample)` starting at word position `l << 32`, so every
/// fine increment is regenerable on its own.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    base: ChaCha8Rng,
    master_seed: u64,
    sample: u64,
    n_fine: usize,
    dt_fine: f64,
    n_modes: usize,
}

impl BrownianPath {
    pub fn new(
        master_seed: u64,
        sample: u64,
        n_fine: usize,
        dt_fine: f64,
        n_modes: usize,
    ) -> Result<Self> {
        if !(dt_fine > 0.0 && dt_fine.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "fine step must be positive, got {dt_fine}"
            )));
        }
        let mut base = ChaCha8Rng::seed_from_u64(master_seed);
        base.set_stream(sample);
        Ok(BrownianPath {
            base,
            master_seed,
            sample,
            n_fine,
            dt_fine,
            n_modes,
        })
    }

    pub fn seed(&self) -> u64 {
        self.master_seed
    }

    pub fn sample(&self) -> u64 {
        self.sample
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    pub fn dt_fine(&self) -> f64 {
        self.dt_fine
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// Writes the per-mode increments of fine step `step` into `out`.
    pub fn fill_fine(&self, step: usize, out: &mut [f64]) -> Result<()> {
        if step >= self.n_fine {
            return Err(Error::InvalidArgument(format!(
                "fine step {step} out of range 0..{}",
                self.n_fine
            )));
        }
        assert_eq!(out.len(), self.n_modes);
        let mut rng = self.base.clone();
        rng.set_word_pos((step as u128) << 32);
        let scale = self.dt_fine.sqrt();
        for v in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * scale;
        }
        Ok(())
    }

    pub fn fine_increment(&self, step: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_modes];
        self.fill_fine(step, &mut out)?;
        Ok(out)
    }

    /// Number of steps at coarsening level `level` (factor `2^level`).
    pub fn coarse_steps(&self, level: u32) -> Result<usize> {
        let factor = coarsening_factor(level)?;
        if !self.n_fine.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "coarsening factor {factor} does not divide {} fine steps",
                self.n_fine
            )));
        }
        Ok(self.n_fine / factor)
    }

    /// Per-mode increment over coarse step `step` at level `level`: the sum,
    /// in fine-step order starting from zero, of its `2^level` fine
    /// increments.
    pub fn coarse_increment(&self, level: u32, step: usize) -> Result<Vec<f64>> {
        let steps = self.coarse_steps(level)?;
        if step >= steps {
            return Err(Error::InvalidArgument(format!(
                "coarse step {step} out of range 0..{steps} at level {level}"
            )));
        }
        let factor = 1usize << level;
        let mut acc = vec![0.0; self.n_modes];
        let mut fine = vec![0.0; self.n_modes];
        for l in step * factor..(step + 1) * factor {
            self.fill_fine(l, &mut fine)?;
            accumulate(&mut acc, &fine);
        }
        Ok(acc)
    }
}

pub(crate) fn coarsening_factor(level: u32) -> Result<usize> {
    if level >= usize::BITS - 1 {
        return Err(Error::InvalidArgument(format!("level {level} too large")));
    }
    Ok(1usize << level)
}

/// `acc += inc`; the one summation used for every coarse increment.
pub(crate) fn accumulate(acc: &mut [f64], inc: &[f64]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

/// Noise field for coarse step `step` at level `level` of `path`.
pub fn sample_increments(
    noise: &SpectralNoise,
    path: &BrownianPath,
    level: u32,
    step: usize,
) -> Result<FieldState> {
    if path.n_modes() != noise.n_modes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} modes", noise.n_modes()),
            found: format!("path with {} modes", path.n_modes()),
        });
    }
    let inc = path.coarse_increment(level, step)?;
    FieldState::from_vec(noise.grid(), noise.evaluate(&inc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_layout, Family};

    fn layout(n: usize) -> GridLayout {
        build_layout(&GridSpec::unit(n).unwrap()).unwrap()
    }

    #[test]
    fn eigenvalues() {
        assert_eq!(q_eigenvalue(1, 1).unwrap(), 1.5);
        assert_eq!(q_eigenvalue(1, 2).unwrap(), 1.0 / 3.0);
        assert_eq!(q_eigenvalue(2, 2).unwrap(), 0.1875);
        assert!(q_eigenvalue(0, 1).is_err());
        assert!(q_eigenvalue(2, -1).is_err());
    }

    #[test]
    fn basis_values() {
        assert_eq!(basis_eval(1, 1, 0.5, 0.5), 2.0);
        for j in 1..6 {
            assert_eq!(basis_eval(j, 3, 0.0, 0.37), 0.0);
            assert_eq!(basis_eval(j, 3, 1.0, 0.37), 0.0);
            assert_eq!(basis_eval(3, j, 0.37, 1.0), 0.0);
        }
    }

    #[test]
    fn basis_is_normalised() {
        // midpoint rule on a 400 x 400 grid; exact for trigonometric
        // polynomials of this degree
        let m = 400;
        let h = 1.0 / m as f64;
        let mut acc = 0.0;
        let mut cross = 0.0;
        for a in 0..m {
            for b in 0..m {
                let (x, y) = ((a as f64 + 0.5) * h, (b as f64 + 0.5) * h);
                acc += basis_eval(1, 1, x, y).powi(2);
                cross += basis_eval(1, 1, x, y) * basis_eval(2, 1, x, y);
            }
        }
        assert!((acc * h * h - 1.0).abs() < 1e-12);
        assert!((cross * h * h).abs() < 1e-12);
    }

    #[test]
    fn trace_examples() {
        let l = layout(4);
        let single = SpectralNoise::from_modes(
            &l,
            vec![Mode {
                j: 1,
                k: 1,
                eta: 1.5,
            }],
        )
        .unwrap();
        assert_eq!(trace_q(&single), 1.5);

        let three = NoiseSpec {
            max_mode: 2,
            eta_threshold: 0.2,
        };
        let noise = SpectralNoise::new(&l, &three).unwrap();
        assert_eq!(noise.n_modes(), 3);
        assert!((trace_q(&noise) - 13.0 / 6.0).abs() < 1e-15);

        let empty = NoiseSpec {
            max_mode: 4,
            eta_threshold: 1e6,
        };
        assert!(SpectralNoise::new(&l, &empty).is_err());
    }

    #[test]
    fn default_truncation_matches_grid() {
        let l = layout(6);
        let noise = SpectralNoise::new(&l, &NoiseSpec::default()).unwrap();
        assert_eq!(noise.n_modes(), 36);
        for row in l.boundary_e3_indices() {
            assert!(noise.basis().row(row).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fine_increments_regenerate_bit_identically() {
        let path = BrownianPath::new(7, 3, 64, 1.0 / 64.0, 10).unwrap();
        let a = path.fine_increment(17).unwrap();
        let _ = path.fine_increment(3).unwrap();
        let b = BrownianPath::new(7, 3, 64, 1.0 / 64.0, 10)
            .unwrap()
            .fine_increment(17)
            .unwrap();
        assert_eq!(a, b);
        let other = BrownianPath::new(7, 4, 64, 1.0 / 64.0, 10).unwrap();
        assert_ne!(a, other.fine_increment(17).unwrap());
        assert_ne!(a, path.fine_increment(18).unwrap());
    }

    #[test]
    fn coarse_is_sum_of_fine() {
        let path = BrownianPath::new(1, 0, 32, 1.0 / 32.0, 5).unwrap();
        let f0 = path.fine_increment(6).unwrap();
        let f1 = path.fine_increment(7).unwrap();
        let c = path.coarse_increment(1, 3).unwrap();
        for m in 0..5 {
            assert_eq!(c[m], 0.0 + f0[m] + f1[m]);
        }
        assert_eq!(path.coarse_increment(0, 6).unwrap(), f0);
        assert!(path.coarse_increment(1, 16).is_err());
        assert!(path.coarse_increment(6, 0).is_err());
        assert!(path.fine_increment(32).is_err());
    }

    #[test]
    fn mode_increments_have_brownian_law() {
        let n_draws = 20_000;
        let dt = 0.25;
        let path = BrownianPath::new(99, 0, n_draws, dt, 4).unwrap();
        for m in 0..4 {
            let xs: Vec<f64> = (0..n_draws)
                .map(|l| path.fine_increment(l).unwrap()[m])
                .collect();
            let mean = xs.iter().sum::<f64>() / n_draws as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_draws - 1) as f64;
            let se_mean = (dt / n_draws as f64).sqrt();
            assert!(mean.abs() < 4.0 * se_mean, "mode {m}: mean {mean}");
            // Var of the sample variance of a Gaussian is 2 sigma^4 / (N - 1)
            let se_var = dt * (2.0 / (n_draws - 1) as f64).sqrt();
            assert!((var - dt).abs() < 4.0 * se_var, "mode {m}: var {var}");
        }
    }

    #[test]
    fn pointwise_variance_matches_closed_form() {
        let l = layout(8);
        let noise = SpectralNoise::new(&l, &NoiseSpec::default()).unwrap();
        let centre = l.index(Family::E3, 4, 4);
        assert_eq!(l.coordinate_of(centre), (0.5, 0.5));
        let dt = 0.01;
        let expected: f64 = noise
            .modes()
            .iter()
            .map(|m| dt * m.eta * basis_eval(m.j, m.k, 0.5, 0.5).powi(2))
            .sum();

        let n_draws = 10_000;
        let path = BrownianPath::new(5, 0, n_draws, dt, noise.n_modes()).unwrap();
        let vals: Vec<f64> = (0..n_draws)
            .map(|s| sample_increments(&noise, &path, 0, s).unwrap().as_slice()[centre])
            .collect();
        let mean = vals.iter().sum::<f64>() / n_draws as f64;
        let var = vals.iter().map(|x| x * x).sum::<f64>() / n_draws as f64;
        assert!(mean.abs() < 4.0 * (expected / n_draws as f64).sqrt());
        let se_var = expected * (2.0 / n_draws as f64).sqrt();
        assert!((var - expected).abs() < 4.0 * se_var, "{var} vs {expected}");
    }

    #[test]
    fn sampled_field_vanishes_on_pec_boundary() {
        let l = layout(5);
        let noise = SpectralNoise::new(&l, &NoiseSpec::default()).unwrap();
        let path = BrownianPath::new(2, 1, 8, 0.125, noise.n_modes()).unwrap();
        let field = sample_increments(&noise, &path, 2, 1).unwrap();
        assert_eq!(field.pec_violation(), 0.0);
    }
}
