//! Staggered TM Yee grid on the unit square with a perfectly conducting
//! boundary.
//!
//! Degrees of freedom:
//!
//! * `e3` at the nodes `(i, j)`, shape `(n+1) x (n+1)`,
//! * `h1` at the vertical edge midpoints `(i, j+1/2)`, shape `(n+1) x n`,
//! * `h2` at the horizontal edge midpoints `(i+1/2, j)`, shape `n x (n+1)`.
//!
//! All three families are stored back to back in one flat vector (row-major
//! within each family), which is also the index order used by the assembled
//! operator in [`crate::propagator`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower bound for the material constants.
pub const DEFAULT_KAPPA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_cells: usize,
    pub dx: f64,
    pub dy: f64,
    pub epsilon: f64,
    pub mu: f64,
}

impl GridSpec {
    pub fn new(n_cells: usize, epsilon: f64, mu: f64) -> Result<Self> {
        Self::with_kappa(n_cells, epsilon, mu, DEFAULT_KAPPA)
    }

    pub fn with_kappa(n_cells: usize, epsilon: f64, mu: f64, kappa: f64) -> Result<Self> {
        if n_cells < 2 {
            return Err(Error::InvalidGrid(format!(
                "n_cells must be at least 2, got {n_cells}"
            )));
        }
        let h = 1.0 / n_cells as f64;
        let spec = GridSpec {
            n_cells,
            dx: h,
            dy: h,
            epsilon,
            mu,
        };
        spec.validate(kappa)?;
        Ok(spec)
    }

    /// Unit-coefficient grid (`epsilon = mu = 1`).
    pub fn unit(n_cells: usize) -> Result<Self> {
        Self::new(n_cells, 1.0, 1.0)
    }

    pub fn validate(&self, kappa: f64) -> Result<()> {
        if self.n_cells < 2 {
            return Err(Error::InvalidGrid(format!(
                "n_cells must be at least 2, got {}",
                self.n_cells
            )));
        }
        let n = self.n_cells as f64;
        for (name, h) in [("dx", self.dx), ("dy", self.dy)] {
            if !h.is_finite() || (h * n - 1.0).abs() > 2.0 * f64::EPSILON {
                return Err(Error::InvalidGrid(format!(
                    "{name} = {h} does not tile the unit interval with {} cells",
                    self.n_cells
                )));
            }
        }
        if !(kappa > 0.0) {
            return Err(Error::InvalidGrid(format!("kappa must be positive, got {kappa}")));
        }
        for (name, c) in [("epsilon", self.epsilon), ("mu", self.mu)] {
            if !c.is_finite() || c < kappa {
                return Err(Error::InvalidGrid(format!(
                    "{name} = {c} must be finite and at least {kappa}"
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n_cells
    }

    /// Total number of degrees of freedom, `(n+1)^2 + 2 n (n+1)`.
    pub fn dim(&self) -> usize {
        let n = self.n_cells;
        (n + 1) * (n + 1) + 2 * n * (n + 1)
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }
}

/// Which staggered family a degree of freedom belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    E3,
    H1,
    H2,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::E3, Family::H1, Family::H2];
}

/// Stagger coordinates and the flat index map of a grid.
#[derive(Debug, Clone)]
pub struct GridLayout {
    spec: GridSpec,
    h1_offset: usize,
    h2_offset: usize,
    dim: usize,
}

impl GridLayout {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(rows, cols)` of the array holding `family`.
    pub fn shape(&self, family: Family) -> (usize, usize) {
        let n = self.spec.n_cells;
        match family {
            Family::E3 => (n + 1, n + 1),
            Family::H1 => (n + 1, n),
            Family::H2 => (n, n + 1),
        }
    }

    pub fn offset(&self, family: Family) -> usize {
        match family {
            Family::E3 => 0,
            Family::H1 => self.h1_offset,
            Family::H2 => self.h2_offset,
        }
    }

    /// Range of flat indices occupied by `family`.
    pub fn range(&self, family: Family) -> std::ops::Range<usize> {
        let (r, c) = self.shape(family);
        let start = self.offset(family);
        start..start + r * c
    }

    pub fn index(&self, family: Family, i: usize, j: usize) -> usize {
        let (r, c) = self.shape(family);
        debug_assert!(i < r && j < c, "({i}, {j}) outside {family:?} array {r}x{c}");
        self.offset(family) + i * c + j
    }

    pub fn locate(&self, index: usize) -> (Family, usize, usize) {
        assert!(index < self.dim, "flat index {index} out of range {}", self.dim);
        let family = if index < self.h1_offset {
            Family::E3
        } else if index < self.h2_offset {
            Family::H1
        } else {
            Family::H2
        };
        let local = index - self.offset(family);
        let cols = self.shape(family).1;
        (family, local / cols, local % cols)
    }

    /// Physical coordinate of a stagger point. Integer grid positions are
    /// computed as `i / n` so the boundary lands exactly on 0 and 1.
    pub fn coordinate(&self, family: Family, i: usize, j: usize) -> (f64, f64) {
        let n = self.spec.n_cells as f64;
        let node = |k: usize| k as f64 / n;
        let mid = |k: usize| (k as f64 + 0.5) / n;
        match family {
            Family::E3 => (node(i), node(j)),
            Family::H1 => (node(i), mid(j)),
            Family::H2 => (mid(i), node(j)),
        }
    }

    pub fn coordinate_of(&self, index: usize) -> (f64, f64) {
        let (f, i, j) = self.locate(index);
        self.coordinate(f, i, j)
    }

    /// True for `e3` nodes on the boundary, which the PEC condition pins to zero.
    pub fn is_boundary_e3(&self, index: usize) -> bool {
        let n = self.spec.n_cells;
        match self.locate(index) {
            (Family::E3, i, j) => i == 0 || j == 0 || i == n || j == n,
            _ => false,
        }
    }

    pub fn boundary_e3_indices(&self) -> Vec<usize> {
        (0..self.h1_offset).filter(|&k| self.is_boundary_e3(k)).collect()
    }

    /// Per-index material weight (`epsilon` on `e3`, `mu` on `h1`, `h2`).
    pub fn weights(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|k| {
                if k < self.h1_offset {
                    self.spec.epsilon
                } else {
                    self.spec.mu
                }
            })
            .collect()
    }
}

pub fn build_layout(spec: &GridSpec) -> Result<GridLayout> {
    spec.validate(f64::MIN_POSITIVE)?;
    let n = spec.n_cells;
    let h1_offset = (n + 1) * (n + 1);
    let h2_offset = h1_offset + (n + 1) * n;
    Ok(GridLayout {
        spec: *spec,
        h1_offset,
        h2_offset,
        dim: h2_offset + n * (n + 1),
    })
}

/// Discrete unknown `(e3, h1, h2)` stored as one flat vector in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    n_cells: usize,
    data: Vec<f64>,
}

impl FieldState {
    pub fn zeros(spec: &GridSpec) -> Self {
        FieldState {
            n_cells: spec.n_cells,
            data: vec![0.0; spec.dim()],
        }
    }

    pub fn from_vec(spec: &GridSpec, data: Vec<f64>) -> Result<Self> {
        check_len(spec, data.len())?;
        Ok(FieldState {
            n_cells: spec.n_cells,
            data,
        })
    }

    /// Builds a state by evaluating one closure per family at the stagger
    /// coordinates. Boundary `e3` values are forced to zero.
    pub fn from_fn(
        layout: &GridLayout,
        mut e3: impl FnMut(f64, f64) -> f64,
        mut h1: impl FnMut(f64, f64) -> f64,
        mut h2: impl FnMut(f64, f64) -> f64,
    ) -> Self {
        let data = (0..layout.dim())
            .map(|k| {
                let (f, i, j) = layout.locate(k);
                let (x, y) = layout.coordinate(f, i, j);
                match f {
                    Family::E3 if layout.is_boundary_e3(k) => 0.0,
                    Family::E3 => e3(x, y),
                    Family::H1 => h1(x, y),
                    Family::H2 => h2(x, y),
                }
            })
            .collect();
        FieldState {
            n_cells: layout.spec().n_cells,
            data,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// A state on the same grid holding `data`.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> FieldState {
        assert_eq!(data.len(), self.data.len());
        FieldState {
            n_cells: self.n_cells,
            data,
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn offsets(&self) -> (usize, usize) {
        let n = self.n_cells;
        let h1 = (n + 1) * (n + 1);
        (h1, h1 + (n + 1) * n)
    }

    pub fn e3(&self) -> &[f64] {
        &self.data[..self.offsets().0]
    }

    pub fn h1(&self) -> &[f64] {
        let (a, b) = self.offsets();
        &self.data[a..b]
    }

    pub fn h2(&self) -> &[f64] {
        &self.data[self.offsets().1..]
    }

    pub fn e3_at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.n_cells + 1) + j]
    }

    pub fn h1_at(&self, i: usize, j: usize) -> f64 {
        self.data[self.offsets().0 + i * self.n_cells + j]
    }

    pub fn h2_at(&self, i: usize, j: usize) -> f64 {
        self.data[self.offsets().1 + i * (self.n_cells + 1) + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute boundary `e3` value; zero for a PEC-compatible state.
    pub fn pec_violation(&self) -> f64 {
        let n = self.n_cells;
        let mut worst = 0.0f64;
        for i in 0..=n {
            for j in 0..=n {
                if i == 0 || j == 0 || i == n || j == n {
                    worst = worst.max(self.e3_at(i, j).abs());
                }
            }
        }
        worst
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &FieldState) -> FieldState {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        FieldState {
            n_cells: self.n_cells,
            data,
        }
    }

    pub fn scaled(&self, alpha: f64) -> FieldState {
        FieldState {
            n_cells: self.n_cells,
            data: self.data.iter().map(|a| alpha * a).collect(),
        }
    }
}

fn check_len(spec: &GridSpec, len: usize) -> Result<()> {
    if len != spec.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values for n_cells = {}", spec.dim(), spec.n_cells),
            found: format!("{len} values"),
        });
    }
    Ok(())
}

fn check_state(spec: &GridSpec, u: &FieldState) -> Result<()> {
    if u.n_cells != spec.n_cells {
        return Err(Error::ShapeMismatch {
            expected: format!("n_cells = {}", spec.n_cells),
            found: format!("n_cells = {}", u.n_cells),
        });
    }
    check_len(spec, u.data.len())
}

/// Writes `A_h u` into `out`. Both slices are flat state vectors in layout
/// order; the boundary `e3` rows of `out` are set to zero.
pub fn apply_maxwell_slice(spec: &GridSpec, u: &[f64], out: &mut [f64]) {
    let n = spec.n_cells;
    let (inv_dx, inv_dy) = (1.0 / spec.dx, 1.0 / spec.dy);
    let (inv_eps, inv_mu) = (1.0 / spec.epsilon, 1.0 / spec.mu);
    let h1_off = (n + 1) * (n + 1);
    let h2_off = h1_off + (n + 1) * n;
    // boundary e3 values are read as zero, which keeps the assembled matrix
    // skew-adjoint on the full (unconstrained) vector space
    let e3 = |i: usize, j: usize| {
        if i == 0 || j == 0 || i == n || j == n {
            0.0
        } else {
            u[i * (n + 1) + j]
        }
    };
    let h1 = |i: usize, j: usize| u[h1_off + i * n + j];
    let h2 = |i: usize, j: usize| u[h2_off + i * (n + 1) + j];

    for i in 0..=n {
        for j in 0..=n {
            let v = if i == 0 || j == 0 || i == n || j == n {
                0.0
            } else {
                inv_eps
                    * ((h2(i, j) - h2(i - 1, j)) * inv_dx - (h1(i, j) - h1(i, j - 1)) * inv_dy)
            };
            out[i * (n + 1) + j] = v;
        }
    }
    for i in 0..=n {
        for j in 0..n {
            out[h1_off + i * n + j] = -inv_mu * (e3(i, j + 1) - e3(i, j)) * inv_dy;
        }
    }
    for i in 0..n {
        for j in 0..=n {
            out[h2_off + i * (n + 1) + j] = inv_mu * (e3(i + 1, j) - e3(i, j)) * inv_dx;
        }
    }
}

/// The discrete Maxwell operator `A_h` applied to `u`.
pub fn apply_maxwell(spec: &GridSpec, u: &FieldState) -> Result<FieldState> {
    check_state(spec, u)?;
    let mut out = FieldState::zeros(spec);
    apply_maxwell_slice(spec, &u.data, &mut out.data);
    Ok(out)
}

/// Cell-centred divergence of `(h1, h2)` on a flat state vector, row-major
/// `n x n`.
pub fn divergence_slice(spec: &GridSpec, u: &[f64]) -> Vec<f64> {
    let n = spec.n_cells;
    let h1_off = (n + 1) * (n + 1);
    let h2_off = h1_off + (n + 1) * n;
    let h1 = |i: usize, j: usize| u[h1_off + i * n + j];
    let h2 = |i: usize, j: usize| u[h2_off + i * (n + 1) + j];
    let mut div = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            div.push((h1(i + 1, j) - h1(i, j)) / spec.dx + (h2(i, j + 1) - h2(i, j)) / spec.dy);
        }
    }
    div
}

pub fn divergence_h(spec: &GridSpec, u: &FieldState) -> Result<Vec<f64>> {
    check_state(spec, u)?;
    Ok(divergence_slice(spec, &u.data))
}

fn weighted_dot(spec: &GridSpec, eps: f64, mu: f64, u: &[f64], v: &[f64]) -> f64 {
    let split = (spec.n_cells + 1) * (spec.n_cells + 1);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    spec.cell_area() * (eps * dot(&u[..split], &v[..split]) + mu * dot(&u[split..], &v[split..]))
}

pub(crate) fn v_inner_slice(spec: &GridSpec, u: &[f64], v: &[f64]) -> f64 {
    weighted_dot(spec, spec.epsilon, spec.mu, u, v)
}

pub(crate) fn energy_slice(spec: &GridSpec, u: &[f64]) -> f64 {
    weighted_dot(spec, 1.0, 1.0, u, u)
}

/// Weighted inner product `dx dy [eps <e3,e3> + mu (<h1,h1> + <h2,h2>)]`.
pub fn v_inner(spec: &GridSpec, u: &FieldState, v: &FieldState) -> Result<f64> {
    check_state(spec, u)?;
    check_state(spec, v)?;
    Ok(v_inner_slice(spec, &u.data, &v.data))
}

pub fn v_norm(spec: &GridSpec, u: &FieldState) -> Result<f64> {
    Ok(v_inner(spec, u, u)?.sqrt())
}

/// Unweighted field energy `dx dy sum(e3^2 + h1^2 + h2^2)`.
pub fn energy(spec: &GridSpec, u: &FieldState) -> Result<f64> {
    check_state(spec, u)?;
    Ok(energy_slice(spec, &u.data))
}
