//! One-step maps: the stochastic exponential integrator (SEXP) and the
//! explicit (EM) and semi-implicit (SEM) Euler-Maruyama baselines.
//!
//! All three share the Euler-updated right-hand side
//! `r = u + dt F(u) + G(u) dW`:
//!
//! * SEXP: `u' = exp(dt A_h) r`
//! * EM:   `u' = r + dt A_h u`
//! * SEM:  `(I - dt A_h) u' = r`
//!
//! `F` and `G` act pointwise on every degree of freedom. Boundary `e3`
//! entries are re-zeroed after every step.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{divergence_slice, energy_slice, FieldState, GridSpec};
use crate::noise::{accumulate, coarsening_factor, BrownianPath, SpectralNoise};
use crate::propagator::{v_norm_slice, MaxwellMatrix, PropagatorCache, SemSolveCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Zero,
    /// `F(U) = U`
    Identity,
    /// `F(U) = U + cos(U)`
    IdentityPlusCos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionKind {
    /// `G dW = (lambda_e dW, lambda_h dW, lambda_h dW)`
    AdditiveConstant,
    /// `G(U) = sin(U)`
    SineMultiplicative,
    /// `G(U) = U`
    UnitMultiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub drift: DriftKind,
    pub diffusion: DiffusionKind,
    #[serde(default = "one")]
    pub lambda_e: f64,
    #[serde(default = "one")]
    pub lambda_h: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    /// `F(U) = U`, `G = 1`.
    pub fn linear_additive() -> Self {
        ModelSpec {
            drift: DriftKind::Identity,
            diffusion: DiffusionKind::AdditiveConstant,
            lambda_e: 1.0,
            lambda_h: 1.0,
        }
    }

    /// `F(U) = U + cos(U)`, `G(U) = sin(U)`.
    pub fn sine_multiplicative() -> Self {
        ModelSpec {
            drift: DriftKind::IdentityPlusCos,
            diffusion: DiffusionKind::SineMultiplicative,
            lambda_e: 1.0,
            lambda_h: 1.0,
        }
    }

    /// Zero drift with constant additive noise of the given amplitudes.
    pub fn pure_additive(lambda_e: f64, lambda_h: f64) -> Self {
        ModelSpec {
            drift: DriftKind::Zero,
            diffusion: DiffusionKind::AdditiveConstant,
            lambda_e,
            lambda_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_e.is_finite() && self.lambda_h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise amplitudes must be finite, got ({}, {})",
                self.lambda_e, self.lambda_h
            )));
        }
        Ok(())
    }

    pub fn is_additive(&self) -> bool {
        self.diffusion == DiffusionKind::AdditiveConstant
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Sexp,
    Em,
    Sem,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [SchemeKind::Sexp, SchemeKind::Em, SchemeKind::Sem];

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Sexp => "sexp",
            SchemeKind::Em => "em",
            SchemeKind::Sem => "sem",
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn e3_len(n: usize) -> usize {
    (n + 1) * (n + 1)
}

fn zero_boundary_e3(n: usize, u: &mut [f64]) {
    for j in 0..=n {
        u[j] = 0.0;
        u[n * (n + 1) + j] = 0.0;
    }
    for i in 1..n {
        u[i * (n + 1)] = 0.0;
        u[i * (n + 1) + n] = 0.0;
    }
}

/// `out = u + dt F(u) + G(u) dw` on flat slices; boundary `e3` zeroed.
pub(crate) fn euler_rhs(model: &ModelSpec, n: usize, dt: f64, u: &[f64], dw: &[f64], out: &mut [f64]) {
    let split = e3_len(n);
    for (k, ((o, &x), &w)) in out.iter_mut().zip(u).zip(dw).enumerate() {
        let f = match model.drift {
            DriftKind::Zero => 0.0,
            DriftKind::Identity => x,
            DriftKind::IdentityPlusCos => x + x.cos(),
        };
        let g = match model.diffusion {
            DiffusionKind::AdditiveConstant => {
                if k < split {
                    model.lambda_e
                } else {
                    model.lambda_h
                }
            }
            DiffusionKind::SineMultiplicative => x.sin(),
            DiffusionKind::UnitMultiplicative => x,
        };
        *o = x + dt * f + g * w;
    }
    zero_boundary_e3(n, out);
}

fn check_same(spec: &GridSpec, u: &FieldState, what: &str) -> Result<()> {
    if u.n_cells() != spec.n_cells || u.as_slice().len() != spec.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{what} on a grid with n_cells = {}", spec.n_cells),
            found: format!("n_cells = {}", u.n_cells()),
        });
    }
    Ok(())
}

/// Pointwise drift `F(u)`.
pub fn apply_drift(model: &ModelSpec, u: &FieldState) -> FieldState {
    let n = u.n_cells();
    let mut out: Vec<f64> = u
        .as_slice()
        .iter()
        .map(|&x| match model.drift {
            DriftKind::Zero => 0.0,
            DriftKind::Identity => x,
            DriftKind::IdentityPlusCos => x + x.cos(),
        })
        .collect();
    zero_boundary_e3(n, &mut out);
    u.with_data(out)
}

/// Noise term `G(u) dW`.
pub fn apply_diffusion(model: &ModelSpec, u: &FieldState, dw: &FieldState) -> Result<FieldState> {
    let n = u.n_cells();
    if dw.n_cells() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("noise increment with n_cells = {n}"),
            found: format!("n_cells = {}", dw.n_cells()),
        });
    }
    let split = e3_len(n);
    let mut out: Vec<f64> = u
        .as_slice()
        .iter()
        .zip(dw.as_slice())
        .enumerate()
        .map(|(k, (&x, &w))| match model.diffusion {
            DiffusionKind::AdditiveConstant => {
                (if k < split { model.lambda_e } else { model.lambda_h }) * w
            }
            DiffusionKind::SineMultiplicative => x.sin() * w,
            DiffusionKind::UnitMultiplicative => x * w,
        })
        .collect();
    zero_boundary_e3(n, &mut out);
    Ok(u.with_data(out))
}

/// A scheme bound to its precomputed operator for one step size.
#[derive(Debug, Clone, Copy)]
pub enum Stepper<'a> {
    Sexp(&'a PropagatorCache),
    Em { matrix: &'a MaxwellMatrix, dt: f64 },
    Sem(&'a SemSolveCache),
}

impl<'a> Stepper<'a> {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Stepper::Sexp(_) => SchemeKind::Sexp,
            Stepper::Em { .. } => SchemeKind::Em,
            Stepper::Sem(_) => SchemeKind::Sem,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Stepper::Sexp(p) => p.dt(),
            Stepper::Em { dt, .. } => *dt,
            Stepper::Sem(s) => s.dt(),
        }
    }

    pub fn spec(&self) -> &GridSpec {
        match self {
            Stepper::Sexp(p) => p.spec(),
            Stepper::Em { matrix, .. } => matrix.spec(),
            Stepper::Sem(s) => s.spec(),
        }
    }

    pub fn step(&self, model: &ModelSpec, u: &FieldState, dw: &FieldState) -> Result<FieldState> {
        let spec = *self.spec();
        check_same(&spec, u, "state")?;
        check_same(&spec, dw, "noise increment")?;
        let n = spec.n_cells;
        let dt = self.dt();
        let mut rhs = vec![0.0; spec.dim()];
        euler_rhs(model, n, dt, u.as_slice(), dw.as_slice(), &mut rhs);
        let mut next = match self {
            Stepper::Sexp(p) => p.apply_slice(&rhs),
            Stepper::Em { matrix, .. } => {
                let mut au = vec![0.0; rhs.len()];
                matrix.apply_slice(u.as_slice(), &mut au);
                rhs.iter().zip(&au).map(|(r, a)| r + dt * a).collect()
            }
            Stepper::Sem(s) => s.solve(&rhs)?,
        };
        zero_boundary_e3(n, &mut next);
        FieldState::from_vec(&spec, next)
    }

    /// Advances every column of `states` by one step with the matching
    /// column of `dw`.
    pub(crate) fn step_block(
        &self,
        model: &ModelSpec,
        states: &mut DMatrix<f64>,
        dw: &DMatrix<f64>,
    ) -> Result<()> {
        let spec = *self.spec();
        let n = spec.n_cells;
        let dt = self.dt();
        let mut rhs = DMatrix::zeros(states.nrows(), states.ncols());
        for c in 0..states.ncols() {
            euler_rhs(
                model,
                n,
                dt,
                states.column(c).as_slice(),
                dw.column(c).as_slice(),
                rhs.column_mut(c).as_mut_slice(),
            );
        }
        match self {
            Stepper::Sexp(p) => *states = p.apply_block(&rhs),
            Stepper::Em { matrix, .. } => {
                let mut au = vec![0.0; states.nrows()];
                for c in 0..states.ncols() {
                    matrix.apply_slice(states.column(c).as_slice(), &mut au);
                    for (s, (r, a)) in states
                        .column_mut(c)
                        .iter_mut()
                        .zip(rhs.column(c).iter().zip(&au))
                    {
                        *s = r + dt * a;
                    }
                }
            }
            Stepper::Sem(s) => {
                *states = s.solve_block(&rhs);
                for c in 0..states.ncols() {
                    let x = states.column(c);
                    let b = rhs.column(c);
                    if x.iter().chain(b.iter()).all(|v| v.is_finite()) {
                        s.check_residual(x.as_slice(), b.as_slice())?;
                    }
                }
            }
        }
        for c in 0..states.ncols() {
            zero_boundary_e3(n, states.column_mut(c).as_mut_slice());
        }
        Ok(())
    }
}

pub fn sexp_step(
    prop: &PropagatorCache,
    model: &ModelSpec,
    u: &FieldState,
    dw: &FieldState,
) -> Result<FieldState> {
    Stepper::Sexp(prop).step(model, u, dw)
}

pub fn em_step(
    m: &MaxwellMatrix,
    dt: f64,
    model: &ModelSpec,
    u: &FieldState,
    dw: &FieldState,
) -> Result<FieldState> {
    Stepper::Em { matrix: m, dt }.step(model, u, dw)
}

pub fn sem_step(
    solver: &SemSolveCache,
    model: &ModelSpec,
    u: &FieldState,
    dw: &FieldState,
) -> Result<FieldState> {
    Stepper::Sem(solver).step(model, u, dw)
}

/// Which per-step quantities [`integrate`] records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Observers {
    pub energy: bool,
    pub divergence: bool,
    pub v_norm: bool,
}

impl Observers {
    pub fn all() -> Self {
        Observers {
            energy: true,
            divergence: true,
            v_norm: true,
        }
    }
}

/// Final state plus the requested per-step observations, indexed by step
/// `0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub final_state: FieldState,
    pub energy: Vec<f64>,
    /// Area-weighted sum of the cell-centred magnetic divergence.
    pub divergence_sum: Vec<f64>,
    pub v_norm: Vec<f64>,
}

/// `dx dy sum(div h)` over all cells.
pub fn divergence_sum(spec: &GridSpec, u: &[f64]) -> f64 {
    spec.cell_area() * divergence_slice(spec, u).iter().sum::<f64>()
}

/// Runs `n_steps` steps of `stepper` on `path` coarsened to `level`.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    stepper: &Stepper<'_>,
    model: &ModelSpec,
    noise: &SpectralNoise,
    u0: &FieldState,
    path: &BrownianPath,
    level: u32,
    n_steps: usize,
    observers: Observers,
) -> Result<Trajectory> {
    let spec = *stepper.spec();
    check_same(&spec, u0, "initial state")?;
    if noise.grid() != &spec {
        return Err(Error::ShapeMismatch {
            expected: format!("noise on {spec:?}"),
            found: format!("noise on {:?}", noise.grid()),
        });
    }
    let factor = coarsening_factor(level)?;
    if n_steps.checked_mul(factor).is_none_or(|f| f > path.n_fine()) {
        return Err(Error::InvalidArgument(format!(
            "{n_steps} steps at level {level} need more than the {} fine steps of the path",
            path.n_fine()
        )));
    }
    let dt_level = path.dt_fine() * factor as f64;
    if (stepper.dt() - dt_level).abs() > 1e-12 * dt_level {
        return Err(Error::InvalidArgument(format!(
            "cache step {} does not match the level step {dt_level}",
            stepper.dt()
        )));
    }

    let mut traj = Trajectory {
        final_state: u0.clone(),
        energy: Vec::new(),
        divergence_sum: Vec::new(),
        v_norm: Vec::new(),
    };
    let observe = |traj: &mut Trajectory, u: &[f64]| {
        if observers.energy {
            traj.energy.push(energy_slice(&spec, u));
        }
        if observers.divergence {
            traj.divergence_sum.push(divergence_sum(&spec, u));
        }
        if observers.v_norm {
            traj.v_norm.push(v_norm_slice(&spec, u));
        }
    };
    observe(&mut traj, u0.as_slice());

    let mut u = u0.clone();
    let mut fine = vec![0.0; noise.n_modes()];
    for k in 0..n_steps {
        let mut inc = vec![0.0; noise.n_modes()];
        for l in k * factor..(k + 1) * factor {
            path.fill_fine(l, &mut fine)?;
            accumulate(&mut inc, &fine);
        }
        let dw = FieldState::from_vec(&spec, noise.evaluate(&inc))?;
        u = stepper.step(model, &u, &dw)?;
        if !u.is_finite() {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite state at step {}",
                stepper.kind(),
                k + 1
            )));
        }
        observe(&mut traj, u.as_slice());
    }
    traj.final_state = u;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_layout, v_norm, GridLayout};
    use crate::noise::NoiseSpec;
    use crate::propagator::{assemble, exp_propagator, sem_solver};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        spec: GridSpec,
        layout: GridLayout,
        matrix: MaxwellMatrix,
        noise: SpectralNoise,
    }

    fn fixture(n: usize) -> Fixture {
        let spec = GridSpec::unit(n).unwrap();
        let layout = build_layout(&spec).unwrap();
        let matrix = assemble(&spec, &layout).unwrap();
        let noise = SpectralNoise::new(&layout, &NoiseSpec::default()).unwrap();
        Fixture {
            spec,
            layout,
            matrix,
            noise,
        }
    }

    fn random_state(layout: &GridLayout, seed: u64) -> FieldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FieldState::from_fn(
            layout,
            |_, _| rng.random_range(-1.0..1.0),
            |_, _| 0.5,
            |x, y| (x - y).sin(),
        )
    }

    #[test]
    fn drift_examples() {
        let f = fixture(4);
        let u = random_state(&f.layout, 1);
        let zero = ModelSpec::pure_additive(1.0, 1.0);
        assert!(apply_drift(&zero, &u).as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(apply_drift(&ModelSpec::linear_additive(), &u), u);

        let cos = ModelSpec::sine_multiplicative();
        let z = FieldState::zeros(&f.spec);
        let fz = apply_drift(&cos, &z);
        assert_eq!(fz.pec_violation(), 0.0);
        let interior = f.layout.index(crate::grid::Family::E3, 2, 2);
        assert_eq!(fz.as_slice()[interior], 1.0);
        assert!(fz.h1().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn diffusion_examples() {
        let f = fixture(4);
        let u = random_state(&f.layout, 2);
        let dw = random_state(&f.layout, 3);
        let zero = FieldState::zeros(&f.spec);
        for model in [
            ModelSpec::linear_additive(),
            ModelSpec::sine_multiplicative(),
        ] {
            let g = apply_diffusion(&model, &u, &zero).unwrap();
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
        assert_eq!(
            apply_diffusion(&ModelSpec::pure_additive(1.0, 1.0), &u, &dw).unwrap(),
            dw
        );
        let scaled = apply_diffusion(&ModelSpec::pure_additive(2.0, 0.5), &u, &dw).unwrap();
        assert_eq!(scaled.e3(), dw.scaled(2.0).e3());
        assert_eq!(scaled.h2(), dw.scaled(0.5).h2());
        let sine = apply_diffusion(&ModelSpec::sine_multiplicative(), &zero, &dw).unwrap();
        assert!(sine.as_slice().iter().all(|&v| v == 0.0));
        let unit = ModelSpec {
            diffusion: DiffusionKind::UnitMultiplicative,
            ..ModelSpec::linear_additive()
        };
        let g = apply_diffusion(&unit, &u, &dw).unwrap();
        assert_eq!(g.as_slice()[40], u.as_slice()[40] * dw.as_slice()[40]);
    }

    #[test]
    fn sexp_without_noise_preserves_energy() {
        let f = fixture(6);
        let p = exp_propagator(&f.matrix, 0.05).unwrap();
        let model = ModelSpec::pure_additive(0.0, 0.0);
        let u0 = random_state(&f.layout, 4);
        let zero = FieldState::zeros(&f.spec);
        let u1 = sexp_step(&p, &model, &u0, &zero).unwrap();
        let (e0, e1) = (
            crate::grid::energy(&f.spec, &u0).unwrap(),
            crate::grid::energy(&f.spec, &u1).unwrap(),
        );
        assert!((e1 - e0).abs() <= 1e-12 * e0);
    }

    #[test]
    fn sexp_with_zero_step_is_euler_update() {
        let f = fixture(4);
        let p0 = exp_propagator(&f.matrix, 0.0).unwrap();
        let model = ModelSpec::pure_additive(0.7, 0.3);
        let u = random_state(&f.layout, 5);
        let dw = random_state(&f.layout, 6);
        let got = sexp_step(&p0, &model, &u, &dw).unwrap();
        let want = u.axpy(1.0, &apply_diffusion(&model, &u, &dw).unwrap());
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn em_energy_gain_is_exact() {
        let f = fixture(6);
        let dt = 1.0 / 32.0;
        let model = ModelSpec::pure_additive(0.0, 0.0);
        let u0 = random_state(&f.layout, 7);
        let zero = FieldState::zeros(&f.spec);
        let u1 = em_step(&f.matrix, dt, &model, &u0, &zero).unwrap();
        let au = crate::grid::apply_maxwell(&f.spec, &u0).unwrap();
        let gain = dt * dt * v_norm(&f.spec, &au).unwrap().powi(2);
        let e0 = v_norm(&f.spec, &u0).unwrap().powi(2);
        let e1 = v_norm(&f.spec, &u1).unwrap().powi(2);
        assert!(((e1 - e0) - gain).abs() <= 1e-12 * gain.max(e0), "{} vs {gain}", e1 - e0);
    }

    #[test]
    fn em_on_pure_magnetic_state_only_moves_e3() {
        let f = fixture(4);
        let model = ModelSpec::pure_additive(0.0, 0.0);
        let u = FieldState::from_fn(&f.layout, |_, _| 0.0, |x, y| x * y, |x, _| x.cos());
        let zero = FieldState::zeros(&f.spec);
        let u1 = em_step(&f.matrix, 0.1, &model, &u, &zero).unwrap();
        assert_eq!(u1.h1(), u.h1());
        assert_eq!(u1.h2(), u.h2());
        assert_ne!(u1.e3(), u.e3());
    }

    #[test]
    fn sem_contracts_and_is_consistent() {
        let f = fixture(5);
        let model = ModelSpec::pure_additive(0.0, 0.0);
        let u0 = random_state(&f.layout, 8);
        let zero = FieldState::zeros(&f.spec);
        let e0 = crate::grid::energy(&f.spec, &u0).unwrap();
        let mut last = f64::INFINITY;
        for dt in [1e-2, 1e-3, 1e-4] {
            let s = sem_solver(&f.matrix, dt).unwrap();
            let u1 = sem_step(&s, &model, &u0, &zero).unwrap();
            assert!(crate::grid::energy(&f.spec, &u1).unwrap() <= e0);
            let err = v_norm(&f.spec, &u1.axpy(-1.0, &u0)).unwrap();
            assert!(err < last / 5.0);
            last = err;
        }
    }

    #[test]
    fn em_in_the_kernel_matches_identity_propagator() {
        // constant h with zero e3 lies in the kernel of A_h
        let f = fixture(4);
        let model = ModelSpec::linear_additive();
        let u = FieldState::from_fn(&f.layout, |_, _| 0.0, |_, _| 0.4, |_, _| -0.2);
        let dw = random_state(&f.layout, 9);
        let dt = 0.01;
        let em = em_step(&f.matrix, dt, &model, &u, &dw).unwrap();
        let p0 = exp_propagator(&f.matrix, 0.0).unwrap();
        let euler = sexp_step(&p0, &model, &u, &dw).unwrap();
        let drift = apply_drift(&model, &u).scaled(dt);
        let want = euler.axpy(1.0, &drift);
        for (a, b) in em.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn integrate_zero_steps_returns_initial_state() {
        let f = fixture(4);
        let p = exp_propagator(&f.matrix, 0.125).unwrap();
        let path = BrownianPath::new(1, 0, 8, 0.125, f.noise.n_modes()).unwrap();
        let u0 = random_state(&f.layout, 10);
        let t = integrate(
            &Stepper::Sexp(&p),
            &ModelSpec::linear_additive(),
            &f.noise,
            &u0,
            &path,
            0,
            0,
            Observers::all(),
        )
        .unwrap();
        assert_eq!(t.final_state, u0);
        assert_eq!(t.energy.len(), 1);
    }

    #[test]
    fn integrate_rejects_mismatched_step_and_short_path() {
        let f = fixture(4);
        let p = exp_propagator(&f.matrix, 0.1).unwrap();
        let path = BrownianPath::new(1, 0, 8, 0.125, f.noise.n_modes()).unwrap();
        let u0 = random_state(&f.layout, 11);
        let model = ModelSpec::linear_additive();
        let run = |stepper: &Stepper<'_>, level, steps| {
            integrate(stepper, &model, &f.noise, &u0, &path, level, steps, Observers::default())
        };
        assert!(run(&Stepper::Sexp(&p), 0, 4).is_err());
        let p = exp_propagator(&f.matrix, 0.25).unwrap();
        assert!(run(&Stepper::Sexp(&p), 1, 5).is_err());
        assert!(run(&Stepper::Sexp(&p), 1, 4).is_ok());
    }

    #[test]
    fn same_noise_trajectories_keep_their_distance() {
        let f = fixture(6);
        let dt = 0.02;
        let p = exp_propagator(&f.matrix, dt).unwrap();
        let model = ModelSpec::pure_additive(0.5, 0.5);
        let steps = 200;
        let path = BrownianPath::new(3, 0, steps, dt, f.noise.n_modes()).unwrap();
        let a = random_state(&f.layout, 12);
        let b = random_state(&f.layout, 13);
        let d0 = v_norm(&f.spec, &a.axpy(-1.0, &b)).unwrap();
        let run = |u0: &FieldState| {
            integrate(&Stepper::Sexp(&p), &model, &f.noise, u0, &path, 0, steps, Observers::default())
                .unwrap()
                .final_state
        };
        let d = v_norm(&f.spec, &run(&a).axpy(-1.0, &run(&b))).unwrap();
        assert!((d - d0).abs() <= 1e-11 * d0, "{d} vs {d0}");
    }

    #[test]
    fn integrate_is_deterministic() {
        let f = fixture(4);
        let dt = 0.05;
        let s = sem_solver(&f.matrix, dt).unwrap();
        let model = ModelSpec::sine_multiplicative();
        let path = BrownianPath::new(17, 2, 20, dt, f.noise.n_modes()).unwrap();
        let u0 = random_state(&f.layout, 14);
        let run = || {
            integrate(&Stepper::Sem(&s), &model, &f.noise, &u0, &path, 0, 20, Observers::all())
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.divergence_sum.len(), 21);
    }

    #[test]
    fn block_step_matches_single_step() {
        let f = fixture(4);
        let dt = 0.05;
        let p = exp_propagator(&f.matrix, dt).unwrap();
        let s = sem_solver(&f.matrix, dt).unwrap();
        let model = ModelSpec::sine_multiplicative();
        let u = random_state(&f.layout, 15);
        let dw = random_state(&f.layout, 16).scaled(0.1);
        for stepper in [
            Stepper::Sexp(&p),
            Stepper::Em {
                matrix: &f.matrix,
                dt,
            },
            Stepper::Sem(&s),
        ] {
            let single = stepper.step(&model, &u, &dw).unwrap();
            let mut block = DMatrix::from_column_slice(u.as_slice().len(), 1, u.as_slice());
            let dwb = DMatrix::from_column_slice(dw.as_slice().len(), 1, dw.as_slice());
            stepper.step_block(&model, &mut block, &dwb).unwrap();
            for (a, b) in block.iter().zip(single.as_slice()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }
}
