//! Assembled Maxwell generator, its exact group `exp(dt A_h)` and the
//! resolvent used by the semi-implicit baseline.
//!
//! `A_h` is skew-adjoint in the weighted product, so with `D = diag(sqrt(w))`
//! the similarity transform `B = D A_h D^-1` is skew-symmetric. The
//! propagator is built from the symmetric eigendecomposition
//! `B^T B = V diag(lambda) V^T`:
//!
//! ```text
//! exp(dt B) = V cos(dt sqrt(lambda)) V^T + B V [sin(dt sqrt(lambda)) / sqrt(lambda)] V^T
//! ```
//!
//! which is the even/odd split of the exponential series. The factorization
//! is computed once per grid and reused for every step size.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen, LU};

use crate::error::{Error, Result};
use crate::grid::{apply_maxwell_slice, v_inner_slice, FieldState, GridLayout, GridSpec};

/// Largest state dimension accepted by [`assemble`].
pub const DEFAULT_DIM_CAP: usize = 20_000;

struct SkewSpectrum {
    /// `D A_h D^-1`
    skew: DMatrix<f64>,
    eigenvectors: DMatrix<f64>,
    /// Eigenvalues of `B^T B` (squared angular frequencies).
    lambda: DVector<f64>,
}

/// Dense `A_h` in layout order.
pub struct MaxwellMatrix {
    spec: GridSpec,
    layout: GridLayout,
    matrix: DMatrix<f64>,
    sqrt_w: Vec<f64>,
    /// Rows of `A_h` that are identically zero.
    zero_rows: Vec<usize>,
    zero_cols: Vec<usize>,
    spectrum: OnceLock<SkewSpectrum>,
}

impl std::fmt::Debug for MaxwellMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaxwellMatrix")
            .field("spec", &self.spec)
            .field("dim", &self.dim())
            .finish_non_exhaustive()
    }
}

pub fn assemble(spec: &GridSpec, layout: &GridLayout) -> Result<MaxwellMatrix> {
    assemble_with_cap(spec, layout, DEFAULT_DIM_CAP)
}

pub fn assemble_with_cap(spec: &GridSpec, layout: &GridLayout, cap: usize) -> Result<MaxwellMatrix> {
    if layout.spec() != spec {
        return Err(Error::ShapeMismatch {
            expected: format!("layout for {spec:?}"),
            found: format!("layout for {:?}", layout.spec()),
        });
    }
    let dim = layout.dim();
    if dim > cap {
        return Err(Error::DimensionCap { dim, cap });
    }
    let mut matrix = DMatrix::zeros(dim, dim);
    let mut unit = vec![0.0; dim];
    let mut col = vec![0.0; dim];
    for c in 0..dim {
        unit[c] = 1.0;
        apply_maxwell_slice(spec, &unit, &mut col);
        matrix.column_mut(c).copy_from_slice(&col);
        unit[c] = 0.0;
    }
    let zero_rows = (0..dim).filter(|&r| matrix.row(r).iter().all(|&v| v == 0.0)).collect();
    let zero_cols = (0..dim).filter(|&c| matrix.column(c).iter().all(|&v| v == 0.0)).collect();
    Ok(MaxwellMatrix {
        spec: *spec,
        layout: layout.clone(),
        matrix,
        sqrt_w: layout.weights().into_iter().map(f64::sqrt).collect(),
        zero_rows,
        zero_cols,
        spectrum: OnceLock::new(),
    })
}

impl MaxwellMatrix {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Sparse action through the stencil, `out = A_h u`.
    pub fn apply_slice(&self, u: &[f64], out: &mut [f64]) {
        apply_maxwell_slice(&self.spec, u, out);
    }

    /// Dense matrix-vector product, used to cross-check the stencil.
    pub fn mul_dense(&self, u: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(u)).data.into()
    }

    fn spectrum(&self) -> &SkewSpectrum {
        self.spectrum.get_or_init(|| {
            let d = self.dim();
            let skew = DMatrix::from_fn(d, d, |r, c| {
                self.matrix[(r, c)] * self.sqrt_w[r] / self.sqrt_w[c]
            });
            let mut gram = skew.transpose() * &skew;
            // exact symmetry for the eigensolver
            for r in 0..d {
                for c in r + 1..d {
                    let v = 0.5 * (gram[(r, c)] + gram[(c, r)]);
                    gram[(r, c)] = v;
                    gram[(c, r)] = v;
                }
            }
            let eig = SymmetricEigen::new(gram);
            SkewSpectrum {
                skew,
                eigenvectors: eig.eigenvectors,
                lambda: eig.eigenvalues,
            }
        })
    }

    /// Angular frequencies `sqrt(lambda)` of the generator, ascending. The
    /// eigenvalues of `A_h` are `+-i` times these.
    pub fn frequencies(&self) -> Vec<f64> {
        let mut f: Vec<f64> = self
            .spectrum()
            .lambda
            .iter()
            .map(|&l| l.max(0.0).sqrt())
            .collect();
        f.sort_by(f64::total_cmp);
        f
    }

    /// Largest `|Re z|` over the eigenvalues `z` of `A_h`, computed by a
    /// general (nonsymmetric) Schur decomposition of the assembled matrix.
    pub fn spectral_abscissa(&self) -> f64 {
        self.matrix
            .clone()
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |m, z| m.max(z.re.abs()))
    }
}

/// Cached dense action of `exp(dt A_h)`.
#[derive(Debug, Clone)]
pub struct PropagatorCache {
    dt: f64,
    spec: GridSpec,
    matrix: DMatrix<f64>,
}

pub fn exp_propagator(m: &MaxwellMatrix, dt: f64) -> Result<PropagatorCache> {
    if !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be finite, got {dt}")));
    }
    let d = m.dim();
    let spectrum = m.spectrum();
    let v = &spectrum.eigenvectors;
    let mut v_cos = v.clone();
    let mut v_sin = v.clone();
    for (k, &lambda) in spectrum.lambda.iter().enumerate() {
        let (c, s) = if lambda > 0.0 {
            let w = lambda.sqrt();
            ((dt * w).cos(), (dt * w).sin() / w)
        } else {
            (1.0, dt)
        };
        v_cos.column_mut(k).scale_mut(c);
        v_sin.column_mut(k).scale_mut(s);
    }
    let vt = v.transpose();
    let mut p = &v_cos * &vt;
    let odd = &v_sin * &vt;
    p.gemm(1.0, &spectrum.skew, &odd, 1.0);

    for r in 0..d {
        for c in 0..d {
            p[(r, c)] *= m.sqrt_w[c] / m.sqrt_w[r];
        }
    }
    // rows/columns where A_h vanishes are exactly those of the identity
    for &r in &m.zero_rows {
        p.row_mut(r).fill(0.0);
        p[(r, r)] = 1.0;
    }
    for &c in &m.zero_cols {
        p.column_mut(c).fill(0.0);
        p[(c, c)] = 1.0;
    }
    Ok(PropagatorCache {
        dt,
        spec: m.spec,
        matrix: p,
    })
}

impl PropagatorCache {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, u: &FieldState) -> Result<FieldState> {
        FieldState::from_vec(&self.spec, self.apply_slice(u.as_slice()))
    }

    pub fn apply_slice(&self, u: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(u)).data.into()
    }

    /// Applies the propagator to every column of `block`.
    pub fn apply_block(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrix * block
    }
}

/// LU factorization of `I - dt A_h` with its explicit inverse for blocked
/// application.
pub struct SemSolveCache {
    dt: f64,
    spec: GridSpec,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    inverse: DMatrix<f64>,
}

impl std::fmt::Debug for SemSolveCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemSolveCache")
            .field("dt", &self.dt)
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

/// Relative residual bound for the implicit solve.
pub const SEM_RESIDUAL_TOL: f64 = 1e-10;

pub fn sem_solver(m: &MaxwellMatrix, dt: f64) -> Result<SemSolveCache> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "semi-implicit step must be positive, got {dt}"
        )));
    }
    let d = m.dim();
    let system = DMatrix::identity(d, d) - &m.matrix * dt;
    let lu = system.lu();
    let inverse = lu
        .try_inverse()
        .ok_or_else(|| Error::Numerical("I - dt A_h is singular".to_string()))?;
    Ok(SemSolveCache {
        dt,
        spec: m.spec,
        lu,
        inverse,
    })
}

impl SemSolveCache {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Euclidean residual `||(I - dt A_h) x - b||`.
    pub fn residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        apply_maxwell_slice(&self.spec, x, &mut ax);
        x.iter()
            .zip(&ax)
            .zip(b)
            .map(|((xi, axi), bi)| (xi - self.dt * axi - bi).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Solves `(I - dt A_h) x = b`, failing if the residual contract is not met.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let x: Vec<f64> = self
            .lu
            .solve(&DVector::from_column_slice(b))
            .ok_or_else(|| Error::Numerical("I - dt A_h is singular".to_string()))?
            .data
            .into();
        self.check_residual(&x, b)?;
        Ok(x)
    }

    pub(crate) fn check_residual(&self, x: &[f64], b: &[f64]) -> Result<()> {
        let res = self.residual(x, b);
        let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(res <= SEM_RESIDUAL_TOL * scale) {
            return Err(Error::Numerical(format!(
                "implicit solve residual {res:e} exceeds {SEM_RESIDUAL_TOL:e} * {scale:e}"
            )));
        }
        Ok(())
    }

    /// Solves for every column of `block` through the cached inverse.
    pub fn solve_block(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        &self.inverse * block
    }
}

/// `||u||_V` on a flat slice.
pub(crate) fn v_norm_slice(spec: &GridSpec, u: &[f64]) -> f64 {
    v_inner_slice(spec, u, u).sqrt()
}
