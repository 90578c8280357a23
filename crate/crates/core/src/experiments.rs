//! Monte Carlo harnesses: strong convergence against a fine reference on a
//! shared Brownian path, the energy trace formula, and averaged-divergence
//! preservation.
//!
//! Samples are processed in fixed blocks of [`BLOCK_SIZE`] so that each
//! propagation step is a dense matrix-matrix product. Blocks are independent
//! work units for rayon; their statistics are merged in block order, so
//! results do not depend on the number of worker threads.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_layout, divergence_slice, v_inner_slice, FieldState, GridLayout, GridSpec};
use crate::noise::{accumulate, BrownianPath, NoiseSpec, SpectralNoise};
use crate::propagator::{
    assemble, exp_propagator, sem_solver, MaxwellMatrix, PropagatorCache, SemSolveCache,
};
use crate::schemes::{DiffusionKind, ModelSpec, SchemeKind, Stepper};

/// Samples propagated together in one matrix-matrix product.
pub const BLOCK_SIZE: usize = 64;

/// Stream index reserved for the random initial magnetic field.
const INITIAL_CONDITION_STREAM: u64 = u64::MAX;

/// Streaming mean and variance (Welford), mergeable with Chan's formula.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        self.mean += delta * nb / n as f64;
        self.m2 += other.m2 + delta * delta * na * nb / n as f64;
        self.count = n;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (zero for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Ordinary least-squares line `y = slope x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "line fit needs at least two paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidArgument(
            "line fit needs at least two distinct abscissae".to_string(),
        ));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Least-squares slope and intercept of `log(error)` against `log(dt)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "slope fit needs at least two points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|(dt, e)| !(*dt > 0.0 && *e > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "log-log fit needs positive values, got ({}, {})",
            p.0, p.1
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    fit_line(&xs, &ys)
}

/// Gaussian pulse in `e3` and a magnetic field that varies in one direction
/// only: `h1 = r(y)`, `h2 = s(x)` with `r`, `s` uniform on `[0, 1)` per
/// grid line. The discrete divergence of this field is exactly zero.
pub fn initial_condition(layout: &GridLayout, seed: u64) -> FieldState {
    let n = layout.spec().n_cells;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INITIAL_CONDITION_STREAM);
    let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut u = FieldState::from_fn(
        layout,
        |x, y| 0.1 * (-50.0 * ((x - 0.5).powi(2) + (y - 0.5).powi(2))).exp(),
        |_, _| 0.0,
        |_, _| 0.0,
    );
    let data = u.as_mut_slice();
    for i in 0..=n {
        for j in 0..n {
            data[layout.index(crate::grid::Family::H1, i, j)] = r[j];
        }
    }
    for i in 0..n {
        for j in 0..=n {
            data[layout.index(crate::grid::Family::H2, i, j)] = s[i];
        }
    }
    u
}

/// Noise injection rate `E ||G dW||_V^2 / dt` of constant additive noise,
/// evaluated exactly from the sampled basis.
pub fn theoretical_drift_rate(
    noise: &SpectralNoise,
    model: &ModelSpec,
    spec: &GridSpec,
    layout: &GridLayout,
) -> Result<f64> {
    if model.diffusion != DiffusionKind::AdditiveConstant {
        return Err(Error::InvalidArgument(format!(
            "the trace formula needs additive noise, got {:?}",
            model.diffusion
        )));
    }
    if noise.dim() != layout.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("noise with {} rows", layout.dim()),
            found: format!("{} rows", noise.dim()),
        });
    }
    let split = layout.range(crate::grid::Family::H1).start;
    let basis = noise.basis();
    let mut rate = 0.0;
    for (m, mode) in noise.modes().iter().enumerate() {
        let col = basis.column(m);
        let e: f64 = col.rows(0, split).iter().map(|v| v * v).sum();
        let h: f64 = col.rows(split, layout.dim() - split).iter().map(|v| v * v).sum();
        rate += mode.eta
            * spec.cell_area()
            * (spec.epsilon * model.lambda_e.powi(2) * e + spec.mu * model.lambda_h.powi(2) * h);
    }
    Ok(rate)
}

/// Shared, read-only pieces of one experiment.
struct Problem {
    spec: GridSpec,
    layout: GridLayout,
    matrix: MaxwellMatrix,
    noise: SpectralNoise,
    u0: FieldState,
}

impl Problem {
    fn new(spec: &GridSpec, noise: &NoiseSpec, seed: u64) -> Result<Self> {
        let layout = build_layout(spec)?;
        let matrix = assemble(spec, &layout)?;
        let noise = SpectralNoise::new(&layout, noise)?;
        let u0 = initial_condition(&layout, seed);
        Ok(Problem {
            spec: *spec,
            layout,
            matrix,
            noise,
            u0,
        })
    }

    fn initial_block(&self, cols: usize) -> DMatrix<f64> {
        let u0 = self.u0.as_slice();
        DMatrix::from_fn(u0.len(), cols, |r, _| u0[r])
    }
}

/// Owned operator for one scheme and step size.
enum SchemeCache {
    Sexp(PropagatorCache),
    Em(f64),
    Sem(SemSolveCache),
}

impl SchemeCache {
    fn new(m: &MaxwellMatrix, scheme: SchemeKind, dt: f64) -> Result<Self> {
        Ok(match scheme {
            SchemeKind::Sexp => SchemeCache::Sexp(exp_propagator(m, dt)?),
            SchemeKind::Em => SchemeCache::Em(dt),
            SchemeKind::Sem => SchemeCache::Sem(sem_solver(m, dt)?),
        })
    }

    fn stepper<'a>(&'a self, m: &'a MaxwellMatrix) -> Stepper<'a> {
        match self {
            SchemeCache::Sexp(p) => Stepper::Sexp(p),
            SchemeCache::Em(dt) => Stepper::Em { matrix: m, dt: *dt },
            SchemeCache::Sem(s) => Stepper::Sem(s),
        }
    }
}

fn block_ranges(samples: usize) -> Vec<(usize, usize)> {
    (0..samples)
        .step_by(BLOCK_SIZE)
        .map(|s| (s, (s + BLOCK_SIZE).min(samples)))
        .collect()
}

fn fill_fine_block(paths: &[BrownianPath], step: usize, out: &mut DMatrix<f64>) -> Result<()> {
    for (c, path) in paths.iter().enumerate() {
        path.fill_fine(step, out.column_mut(c).as_mut_slice())?;
    }
    Ok(())
}

fn column_is_finite(m: &DMatrix<f64>, c: usize) -> bool {
    m.column(c).iter().all(|v| v.is_finite())
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let k = r.round();
    if k >= 1.0 && (r - k).abs() <= 1e-9 * k {
        Some(k as usize)
    } else {
        None
    }
}

fn default_conv_levels() -> Vec<f64> {
    (5..=9).map(|k| 2f64.powi(-k)).collect()
}

/// Strong-convergence study setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub grid: GridSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub model: ModelSpec,
    pub t_final: f64,
    #[serde(default = "default_conv_levels")]
    pub dt_levels: Vec<f64>,
    pub dt_ref: f64,
    pub samples: usize,
    pub master_seed: u64,
}

impl ConvergenceConfig {
    /// Desk-scale defaults for a given model: `n = 16`, `T = 0.5`,
    /// levels `2^-5 .. 2^-9`, reference `2^-12`, 100 samples.
    pub fn desk(model: ModelSpec) -> Self {
        ConvergenceConfig {
            grid: GridSpec::unit(16).expect("valid default grid"),
            noise: NoiseSpec::default(),
            model,
            t_final: 0.5,
            dt_levels: default_conv_levels(),
            dt_ref: 2f64.powi(-12),
            samples: 100,
            master_seed: 20_240_501,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate(crate::grid::DEFAULT_KAPPA)?;
        self.model.validate()?;
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::config("t_final", format!("must be positive, got {}", self.t_final)));
        }
        if !(self.dt_ref > 0.0 && self.dt_ref.is_finite()) {
            return Err(Error::config("dt_ref", format!("must be positive, got {}", self.dt_ref)));
        }
        if self.samples == 0 {
            return Err(Error::config("samples", "must be at least 1"));
        }
        if self.dt_levels.is_empty() {
            return Err(Error::config("dt_levels", "must list at least one step size"));
        }
        if integer_ratio(self.t_final, self.dt_ref).is_none() {
            return Err(Error::config(
                "dt_ref",
                format!("dt_ref = {} does not divide t_final = {}", self.dt_ref, self.t_final),
            ));
        }
        for &dt in &self.dt_levels {
            if !(dt > self.dt_ref) {
                return Err(Error::config(
                    "dt_levels",
                    format!("level {dt} must be larger than dt_ref = {}", self.dt_ref),
                ));
            }
            match integer_ratio(dt, self.dt_ref) {
                Some(k) if k.is_power_of_two() => {}
                _ => {
                    return Err(Error::config(
                        "dt_levels",
                        format!(
                            "dt_ref = {} does not divide level {dt} by a power of two",
                            self.dt_ref
                        ),
                    ))
                }
            }
            if integer_ratio(self.t_final, dt).is_none() {
                return Err(Error::config(
                    "dt_levels",
                    format!("level {dt} does not divide t_final = {}", self.t_final),
                ));
            }
        }
        Ok(())
    }

    fn fine_steps(&self) -> usize {
        integer_ratio(self.t_final, self.dt_ref).expect("validated")
    }

    /// Coarsening level `log2(dt / dt_ref)` of each step size.
    fn levels(&self) -> Vec<u32> {
        self.dt_levels
            .iter()
            .map(|&dt| integer_ratio(dt, self.dt_ref).expect("validated").trailing_zeros())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelError {
    pub dt: f64,
    /// `sqrt(E ||U_N - U_ref(T)||_V^2)`
    pub rms_error: f64,
    /// Standard error of `rms_error` (delta method on the mean square).
    pub stderr: f64,
    /// Root mean square of the largest error over the coarse time grid.
    pub rms_max_error: f64,
    pub samples_used: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config: ConvergenceConfig,
    pub scheme: SchemeKind,
    /// Sorted by decreasing step size.
    pub levels: Vec<LevelError>,
    /// `(slope, intercept)` of the log-log fit; `None` when some level has a
    /// zero error.
    pub fit: Option<(f64, f64)>,
    /// Samples whose reference solution became non-finite.
    pub reference_excluded: usize,
}

struct ConvergenceBlock {
    /// `[level][sample]` squared final error, `None` if excluded.
    final_sq: Vec<Vec<Option<f64>>>,
    max_sq: Vec<Vec<Option<f64>>>,
    reference_excluded: usize,
}

/// Simulates the reference (SEXP at `dt_ref`) and every coarse level on the
/// same fine Brownian increments and reports RMS V-norm errors at `T`.
pub fn run_strong_convergence(
    cfg: &ConvergenceConfig,
    scheme: SchemeKind,
) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let problem = Problem::new(&cfg.grid, &cfg.noise, cfg.master_seed)?;
    let m = &problem.matrix;
    let reference = SchemeCache::new(m, SchemeKind::Sexp, cfg.dt_ref)?;
    let caches = cfg
        .dt_levels
        .iter()
        .map(|&dt| SchemeCache::new(m, scheme, dt))
        .collect::<Result<Vec<_>>>()?;

    let blocks = block_ranges(cfg.samples)
        .into_par_iter()
        .map(|(s0, s1)| convergence_block(cfg, &problem, &reference, &caches, s0, s1))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..cfg.dt_levels.len()).collect();
    order.sort_by(|&a, &b| cfg.dt_levels[b].total_cmp(&cfg.dt_levels[a]));
    let mut levels = Vec::with_capacity(order.len());
    for &l in &order {
        let mut fin = Welford::new();
        let mut max = Welford::new();
        let mut excluded = 0;
        for block in &blocks {
            for (f, mx) in block.final_sq[l].iter().zip(&block.max_sq[l]) {
                match (f, mx) {
                    (Some(f), Some(mx)) => {
                        fin.push(*f);
                        max.push(*mx);
                    }
                    _ => excluded += 1,
                }
            }
        }
        if scheme != SchemeKind::Em && 2 * excluded > cfg.samples {
            return Err(Error::TooManyExcluded {
                scheme: scheme.to_string(),
                excluded,
                total: cfg.samples,
            });
        }
        let rms = fin.mean().sqrt();
        let stderr = if rms > 0.0 { fin.std_err() / (2.0 * rms) } else { 0.0 };
        levels.push(LevelError {
            dt: cfg.dt_levels[l],
            rms_error: rms,
            stderr,
            rms_max_error: max.mean().sqrt(),
            samples_used: fin.count() as usize,
            excluded,
        });
    }
    let points: Vec<(f64, f64)> = levels.iter().map(|l| (l.dt, l.rms_error)).collect();
    let fit = if points.len() >= 2 && points.iter().all(|p| p.1 > 0.0 && p.1.is_finite()) {
        Some(fit_loglog_slope(&points)?)
    } else {
        None
    };
    Ok(ConvergenceReport {
        config: cfg.clone(),
        scheme,
        levels,
        fit,
        reference_excluded: blocks.iter().map(|b| b.reference_excluded).sum(),
    })
}

fn convergence_block(
    cfg: &ConvergenceConfig,
    problem: &Problem,
    reference: &SchemeCache,
    caches: &[SchemeCache],
    s0: usize,
    s1: usize,
) -> Result<ConvergenceBlock> {
    let m = &problem.matrix;
    let spec = &problem.spec;
    let cols = s1 - s0;
    let n_fine = cfg.fine_steps();
    let n_modes = problem.noise.n_modes();
    let levels = cfg.levels();
    let paths = (s0..s1)
        .map(|s| BrownianPath::new(cfg.master_seed, s as u64, n_fine, cfg.dt_ref, n_modes))
        .collect::<Result<Vec<_>>>()?;

    let ref_stepper = reference.stepper(m);
    let steppers: Vec<Stepper<'_>> = caches.iter().map(|c| c.stepper(m)).collect();
    let mut ref_state = problem.initial_block(cols);
    let mut states: Vec<DMatrix<f64>> = levels.iter().map(|_| problem.initial_block(cols)).collect();
    let mut accs: Vec<DMatrix<f64>> = levels.iter().map(|_| DMatrix::zeros(n_modes, cols)).collect();
    let mut max_sq = vec![vec![0.0f64; cols]; levels.len()];
    let mut fine = DMatrix::zeros(n_modes, cols);
    let mut ref_acc = DMatrix::zeros(n_modes, cols);

    for l in 0..n_fine {
        fill_fine_block(&paths, l, &mut fine)?;
        ref_acc.fill(0.0);
        accumulate(ref_acc.as_mut_slice(), fine.as_slice());
        let dw = problem.noise.evaluate_block(&ref_acc);
        ref_stepper.step_block(&cfg.model, &mut ref_state, &dw)?;

        for (idx, &level) in levels.iter().enumerate() {
            accumulate(accs[idx].as_mut_slice(), fine.as_slice());
            if (l + 1) % (1usize << level) != 0 {
                continue;
            }
            let dw = problem.noise.evaluate_block(&accs[idx]);
            steppers[idx].step_block(&cfg.model, &mut states[idx], &dw)?;
            accs[idx].fill(0.0);
            for (c, worst) in max_sq[idx].iter_mut().enumerate() {
                let e = sq_distance(spec, &states[idx], &ref_state, c);
                if e > *worst || e.is_nan() {
                    *worst = e;
                }
            }
        }
    }

    let ref_ok: Vec<bool> = (0..cols).map(|c| column_is_finite(&ref_state, c)).collect();
    let mut final_sq = Vec::with_capacity(levels.len());
    let mut max_out = Vec::with_capacity(levels.len());
    for idx in 0..levels.len() {
        let mut f = Vec::with_capacity(cols);
        let mut mx = Vec::with_capacity(cols);
        for c in 0..cols {
            if ref_ok[c] && column_is_finite(&states[idx], c) && max_sq[idx][c].is_finite() {
                f.push(Some(sq_distance(spec, &states[idx], &ref_state, c)));
                mx.push(Some(max_sq[idx][c]));
            } else {
                f.push(None);
                mx.push(None);
            }
        }
        final_sq.push(f);
        max_out.push(mx);
    }
    Ok(ConvergenceBlock {
        final_sq,
        max_sq: max_out,
        reference_excluded: ref_ok.iter().filter(|ok| !**ok).count(),
    })
}

fn sq_distance(spec: &GridSpec, a: &DMatrix<f64>, b: &DMatrix<f64>, c: usize) -> f64 {
    let diff: Vec<f64> = a.column(c).iter().zip(b.column(c).iter()).map(|(x, y)| x - y).collect();
    v_inner_slice(spec, &diff, &diff)
}

/// Long-time energy and divergence study of the linear additive model
/// `dU = A U dt + (lambda_e, lambda_h, lambda_h) dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub grid: GridSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub lambda_e: f64,
    pub lambda_h: f64,
    pub t_final: f64,
    pub dt: f64,
    pub samples: usize,
    pub schemes: Vec<SchemeKind>,
    pub master_seed: u64,
    /// Upper bound on `||U_k||_V` expected of SEXP.
    #[serde(default = "default_guard")]
    pub blowup_guard: f64,
}

fn default_guard() -> f64 {
    1e3
}

impl TraceConfig {
    /// Desk-scale defaults: `n = 16`, `lambda = 0.5`, `dt = 0.01`, `T = 5`,
    /// 2000 samples, all three schemes.
    pub fn desk() -> Self {
        TraceConfig {
            grid: GridSpec::unit(16).expect("valid default grid"),
            noise: NoiseSpec::default(),
            lambda_e: 0.5,
            lambda_h: 0.5,
            t_final: 5.0,
            dt: 0.01,
            samples: 2000,
            schemes: SchemeKind::ALL.to_vec(),
            master_seed: 20_240_501,
            blowup_guard: default_guard(),
        }
    }

    pub fn model(&self) -> ModelSpec {
        ModelSpec::pure_additive(self.lambda_e, self.lambda_h)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate(crate::grid::DEFAULT_KAPPA)?;
        self.model().validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::config("t_final", format!("must be positive, got {}", self.t_final)));
        }
        if integer_ratio(self.t_final, self.dt).is_none() {
            return Err(Error::config(
                "dt",
                format!("dt = {} does not divide t_final = {}", self.dt, self.t_final),
            ));
        }
        if self.samples < 2 {
            return Err(Error::config("samples", format!("need at least 2, got {}", self.samples)));
        }
        if self.schemes.is_empty() {
            return Err(Error::config("schemes", "must list at least one scheme"));
        }
        if !(self.blowup_guard > 0.0) {
            return Err(Error::config("blowup_guard", "must be positive"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        integer_ratio(self.t_final, self.dt).expect("validated")
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps()).map(|k| k as f64 * self.dt).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStat {
    pub mean: f64,
    pub stderr: f64,
}

impl From<&Welford> for StepStat {
    fn from(w: &Welford) -> Self {
        StepStat {
            mean: w.mean(),
            stderr: w.std_err(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeEnergy {
    pub scheme: SchemeKind,
    /// Mean of `||U_k||_V^2` per step `k = 0..=N`.
    pub energy: Vec<StepStat>,
    /// Least-squares slope of the mean energy over `[0, T]`.
    pub fitted_slope: f64,
    /// Largest `||U_k||_V` over retained samples and steps.
    pub max_v_norm: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub config: TraceConfig,
    pub times: Vec<f64>,
    /// Exact discrete noise-injection rate `K_h`.
    pub drift_rate: f64,
    /// `||U_0||_V^2`
    pub initial_energy: f64,
    /// `initial_energy + drift_rate * t_k`
    pub theory: Vec<f64>,
    pub schemes: Vec<SchemeEnergy>,
    /// Mean divergence trajectory of every scheme.
    pub divergence: DivergenceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeDivergence {
    /// Scheme name; `sexp_noiseless` for the deterministic reference run.
    pub label: String,
    /// Mean of `dx dy sum(div h)` per step.
    pub div_sum: Vec<StepStat>,
    /// Largest cell-wise `|div h|` over samples, per step.
    pub max_abs_div: Vec<f64>,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub times: Vec<f64>,
    pub series: Vec<SchemeDivergence>,
}

#[derive(Clone)]
struct SchemeAccumulator {
    energy: Vec<Welford>,
    div_sum: Vec<Welford>,
    max_abs_div: Vec<f64>,
    max_v_norm: f64,
    excluded: usize,
}

impl SchemeAccumulator {
    fn new(steps: usize) -> Self {
        SchemeAccumulator {
            energy: vec![Welford::new(); steps + 1],
            div_sum: vec![Welford::new(); steps + 1],
            max_abs_div: vec![0.0; steps + 1],
            max_v_norm: 0.0,
            excluded: 0,
        }
    }

    fn merge(&mut self, other: &SchemeAccumulator) {
        for (a, b) in self.energy.iter_mut().zip(&other.energy) {
            a.merge(b);
        }
        for (a, b) in self.div_sum.iter_mut().zip(&other.div_sum) {
            a.merge(b);
        }
        for (a, b) in self.max_abs_div.iter_mut().zip(&other.max_abs_div) {
            *a = a.max(*b);
        }
        self.max_v_norm = self.max_v_norm.max(other.max_v_norm);
        self.excluded += other.excluded;
    }
}

/// Per-sample observations of one block, recorded before deciding whether
/// the sample is retained.
struct SampleTrace {
    energy: Vec<f64>,
    div_sum: Vec<f64>,
    max_abs_div: Vec<f64>,
}

impl SampleTrace {
    fn new(steps: usize) -> Self {
        SampleTrace {
            energy: Vec::with_capacity(steps + 1),
            div_sum: Vec::with_capacity(steps + 1),
            max_abs_div: Vec::with_capacity(steps + 1),
        }
    }

    fn observe(&mut self, spec: &GridSpec, u: &[f64]) {
        let div = divergence_slice(spec, u);
        self.energy.push(v_inner_slice(spec, u, u));
        self.div_sum.push(spec.cell_area() * div.iter().sum::<f64>());
        self.max_abs_div.push(div.iter().fold(0.0f64, |m, d| m.max(d.abs())));
    }

    fn is_finite(&self) -> bool {
        self.energy
            .iter()
            .chain(&self.div_sum)
            .chain(&self.max_abs_div)
            .all(|v| v.is_finite())
    }
}

fn trace_block(
    cfg: &TraceConfig,
    problem: &Problem,
    caches: &[SchemeCache],
    s0: usize,
    s1: usize,
) -> Result<Vec<SchemeAccumulator>> {
    let m = &problem.matrix;
    let spec = &problem.spec;
    let model = cfg.model();
    let cols = s1 - s0;
    let steps = cfg.n_steps();
    let n_modes = problem.noise.n_modes();
    let paths = (s0..s1)
        .map(|s| BrownianPath::new(cfg.master_seed, s as u64, steps, cfg.dt, n_modes))
        .collect::<Result<Vec<_>>>()?;
    let steppers: Vec<Stepper<'_>> = caches.iter().map(|c| c.stepper(m)).collect();
    let mut states: Vec<DMatrix<f64>> = caches.iter().map(|_| problem.initial_block(cols)).collect();
    let mut traces: Vec<Vec<SampleTrace>> = caches
        .iter()
        .map(|_| (0..cols).map(|_| SampleTrace::new(steps)).collect())
        .collect();
    for (st, tr) in states.iter().zip(traces.iter_mut()) {
        for (c, sample) in tr.iter_mut().enumerate() {
            sample.observe(spec, st.column(c).as_slice());
        }
    }
    let mut fine = DMatrix::zeros(n_modes, cols);
    for k in 0..steps {
        fill_fine_block(&paths, k, &mut fine)?;
        let dw = problem.noise.evaluate_block(&fine);
        for ((stepper, st), tr) in steppers.iter().zip(states.iter_mut()).zip(traces.iter_mut()) {
            stepper.step_block(&model, st, &dw)?;
            for (c, sample) in tr.iter_mut().enumerate() {
                sample.observe(spec, st.column(c).as_slice());
            }
        }
    }

    let mut out = Vec::with_capacity(caches.len());
    for tr in &traces {
        let mut acc = SchemeAccumulator::new(steps);
        for sample in tr {
            if !sample.is_finite() {
                acc.excluded += 1;
                continue;
            }
            for k in 0..=steps {
                acc.energy[k].push(sample.energy[k]);
                acc.div_sum[k].push(sample.div_sum[k]);
                acc.max_abs_div[k] = acc.max_abs_div[k].max(sample.max_abs_div[k]);
                acc.max_v_norm = acc.max_v_norm.max(sample.energy[k].sqrt());
            }
        }
        out.push(acc);
    }
    Ok(out)
}

fn noiseless_divergence(cfg: &TraceConfig, problem: &Problem) -> Result<SchemeDivergence> {
    let p = exp_propagator(&problem.matrix, cfg.dt)?;
    let spec = &problem.spec;
    let mut trace = SampleTrace::new(cfg.n_steps());
    let mut u = problem.u0.as_slice().to_vec();
    trace.observe(spec, &u);
    for _ in 0..cfg.n_steps() {
        u = p.apply_slice(&u);
        trace.observe(spec, &u);
    }
    Ok(SchemeDivergence {
        label: "sexp_noiseless".to_string(),
        div_sum: trace
            .div_sum
            .iter()
            .map(|&d| StepStat {
                mean: d,
                stderr: 0.0,
            })
            .collect(),
        max_abs_div: trace.max_abs_div,
        excluded: 0,
    })
}

fn simulate_trace(cfg: &TraceConfig) -> Result<TraceReport> {
    cfg.validate()?;
    let problem = Problem::new(&cfg.grid, &cfg.noise, cfg.master_seed)?;
    let caches = cfg
        .schemes
        .iter()
        .map(|&s| SchemeCache::new(&problem.matrix, s, cfg.dt))
        .collect::<Result<Vec<_>>>()?;
    let blocks = block_ranges(cfg.samples)
        .into_par_iter()
        .map(|(s0, s1)| trace_block(cfg, &problem, &caches, s0, s1))
        .collect::<Result<Vec<_>>>()?;

    let steps = cfg.n_steps();
    let mut totals = vec![SchemeAccumulator::new(steps); cfg.schemes.len()];
    for block in &blocks {
        for (t, b) in totals.iter_mut().zip(block) {
            t.merge(b);
        }
    }
    for (scheme, acc) in cfg.schemes.iter().zip(&totals) {
        if *scheme != SchemeKind::Em && 2 * acc.excluded > cfg.samples {
            return Err(Error::TooManyExcluded {
                scheme: scheme.to_string(),
                excluded: acc.excluded,
                total: cfg.samples,
            });
        }
    }

    let times = cfg.times();
    let drift_rate =
        theoretical_drift_rate(&problem.noise, &cfg.model(), &problem.spec, &problem.layout)?;
    let u0 = problem.u0.as_slice();
    let initial_energy = v_inner_slice(&problem.spec, u0, u0);
    let theory = times.iter().map(|t| initial_energy + drift_rate * t).collect();

    let mut schemes = Vec::new();
    let mut series = vec![noiseless_divergence(cfg, &problem)?];
    for (scheme, acc) in cfg.schemes.iter().zip(&totals) {
        let energy: Vec<StepStat> = acc.energy.iter().map(StepStat::from).collect();
        let means: Vec<f64> = energy.iter().map(|s| s.mean).collect();
        let fitted_slope = if acc.energy[0].count() > 0 {
            fit_line(&times, &means)?.0
        } else {
            f64::NAN
        };
        schemes.push(SchemeEnergy {
            scheme: *scheme,
            energy,
            fitted_slope,
            max_v_norm: acc.max_v_norm,
            excluded: acc.excluded,
        });
        series.push(SchemeDivergence {
            label: scheme.to_string(),
            div_sum: acc.div_sum.iter().map(StepStat::from).collect(),
            max_abs_div: acc.max_abs_div.clone(),
            excluded: acc.excluded,
        });
    }
    Ok(TraceReport {
        config: cfg.clone(),
        divergence: DivergenceReport {
            times: times.clone(),
            series,
        },
        times,
        drift_rate,
        initial_energy,
        theory,
        schemes,
    })
}

/// Mean energy per scheme against the exact line `Phi(0) + K_h t`.
pub fn run_trace_formula(cfg: &TraceConfig) -> Result<TraceReport> {
    simulate_trace(cfg)
}

/// Mean summed divergence per scheme, plus a noiseless SEXP run.
pub fn run_divergence(cfg: &TraceConfig) -> Result<DivergenceReport> {
    Ok(simulate_trace(cfg)?.divergence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::Mode;

    #[test]
    fn welford_matches_two_pass() {
        let data: Vec<f64> = (0..1000).map(|k| ((k * 37 % 101) as f64).sin() * 1e3 + 7.0).collect();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (data.len() - 1) as f64;
        let mut w = Welford::new();
        data.iter().for_each(|&x| w.push(x));
        assert!((w.mean() - mean).abs() <= 1e-12 * mean.abs());
        assert!((w.variance() - var).abs() <= 1e-12 * var);

        let (a, b) = data.split_at(313);
        let mut wa = Welford::new();
        let mut wb = Welford::new();
        a.iter().for_each(|&x| wa.push(x));
        b.iter().for_each(|&x| wb.push(x));
        wa.merge(&wb);
        assert_eq!(wa.count(), 1000);
        assert!((wa.mean() - mean).abs() <= 1e-12 * mean.abs());
        assert!((wa.variance() - var).abs() <= 1e-12 * var);
    }

    #[test]
    fn loglog_fit_examples() {
        let c = 3.7;
        let (s, _) = fit_loglog_slope(&[(0.125, c * 0.125), (0.0625, c * 0.0625)]).unwrap();
        assert!((s - 1.0).abs() < 1e-14);
        let pts: Vec<(f64, f64)> = (3..8).map(|k| 2f64.powi(-k)).map(|dt| (dt, 2.0 * dt.sqrt())).collect();
        let (s, i) = fit_loglog_slope(&pts).unwrap();
        assert!((s - 0.5).abs() < 1e-14);
        assert!((i - 2f64.ln()).abs() < 1e-13);
        assert!(fit_loglog_slope(&[(0.1, 0.2)]).is_err());
        assert!(fit_loglog_slope(&[(0.1, 0.2), (0.05, 0.0)]).is_err());
        assert!(fit_loglog_slope(&[(-0.1, 0.2), (0.05, 0.1)]).is_err());
    }

    #[test]
    fn initial_condition_is_divergence_free() {
        let spec = GridSpec::unit(8).unwrap();
        let layout = build_layout(&spec).unwrap();
        let u0 = initial_condition(&layout, 3);
        assert!(crate::grid::divergence_h(&spec, &u0).unwrap().iter().all(|&d| d == 0.0));
        assert_eq!(u0.pec_violation(), 0.0);
        assert!((u0.e3_at(4, 4) - 0.1).abs() < 1e-15);
        assert!(u0.h1().iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(u0, initial_condition(&layout, 3));
        assert_ne!(u0, initial_condition(&layout, 4));
    }

    #[test]
    fn drift_rate_examples() {
        let spec = GridSpec::unit(4).unwrap();
        let layout = build_layout(&spec).unwrap();
        let noise = SpectralNoise::new(&layout, &NoiseSpec::default()).unwrap();
        let silent = ModelSpec::pure_additive(0.0, 0.0);
        assert_eq!(theoretical_drift_rate(&noise, &silent, &spec, &layout).unwrap(), 0.0);
        assert!(theoretical_drift_rate(&noise, &ModelSpec::sine_multiplicative(), &spec, &layout)
            .is_err());

        // single mode, e3 only: sum_i sin^2(pi i / n) = n / 2, so the nodal
        // sum of e_11^2 is exactly one for every n >= 2
        let single = vec![Mode { j: 1, k: 1, eta: 1.5 }];
        let e_only = ModelSpec::pure_additive(1.0, 0.0);
        for n in [2, 5, 8, 16] {
            let spec = GridSpec::unit(n).unwrap();
            let layout = build_layout(&spec).unwrap();
            let noise = SpectralNoise::from_modes(&layout, single.clone()).unwrap();
            let k = theoretical_drift_rate(&noise, &e_only, &spec, &layout).unwrap();
            assert!((k - 1.5).abs() < 1e-13, "n = {n}: {k}");
            let h_only = ModelSpec::pure_additive(0.0, 2.0);
            let kh = theoretical_drift_rate(&noise, &h_only, &spec, &layout).unwrap();
            // staggered sums of sin^2 are n / 2 as well, once per h family
            assert!((kh - 1.5 * 4.0 * 2.0).abs() < 1e-12, "n = {n}: {kh}");
        }
    }

    #[test]
    fn drift_rate_matches_monte_carlo() {
        let spec = GridSpec::unit(4).unwrap();
        let layout = build_layout(&spec).unwrap();
        let noise = SpectralNoise::new(&layout, &NoiseSpec::default()).unwrap();
        let model = ModelSpec::pure_additive(0.5, 0.5);
        let exact = theoretical_drift_rate(&noise, &model, &spec, &layout).unwrap();

        let dt = 0.01;
        let draws = 100_000;
        let path = BrownianPath::new(77, 0, draws, dt, noise.n_modes()).unwrap();
        let zero = FieldState::zeros(&spec);
        let mut w = Welford::new();
        for l in 0..draws {
            let dw = FieldState::from_vec(&spec, noise.evaluate(&path.fine_increment(l).unwrap()))
                .unwrap();
            let g = crate::schemes::apply_diffusion(&model, &zero, &dw).unwrap();
            w.push(crate::grid::v_inner(&spec, &g, &g).unwrap() / dt);
        }
        assert!((w.mean() - exact).abs() <= 3.0 * w.std_err(), "{} vs {exact}", w.mean());
    }

    #[test]
    fn convergence_config_validation() {
        let mut cfg = ConvergenceConfig::desk(ModelSpec::linear_additive());
        cfg.validate().unwrap();
        cfg.dt_levels.push(0.03);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("0.03") && err.contains("0.000244140625"), "{err}");
        let mut cfg = ConvergenceConfig::desk(ModelSpec::linear_additive());
        cfg.dt_levels = vec![2f64.powi(-12)];
        assert!(cfg.validate().is_err());
        let mut cfg = ConvergenceConfig::desk(ModelSpec::linear_additive());
        cfg.t_final = 0.3;
        assert!(cfg.validate().is_err());
    }

    fn small_convergence(model: ModelSpec) -> ConvergenceConfig {
        ConvergenceConfig {
            grid: GridSpec::unit(4).unwrap(),
            noise: NoiseSpec::default(),
            model,
            t_final: 0.25,
            dt_levels: vec![2f64.powi(-3), 2f64.powi(-4), 2f64.powi(-5)],
            dt_ref: 2f64.powi(-7),
            samples: 70,
            master_seed: 9,
        }
    }

    #[test]
    fn deterministic_model_has_zero_sexp_error() {
        let silent = ModelSpec::pure_additive(0.0, 0.0);
        let report = run_strong_convergence(&small_convergence(silent), SchemeKind::Sexp).unwrap();
        for level in &report.levels {
            assert!(level.rms_error <= 1e-11, "{level:?}");
            assert_eq!(level.samples_used, 70);
        }
        let dts: Vec<f64> = report.levels.iter().map(|l| l.dt).collect();
        assert_eq!(dts, vec![0.125, 0.0625, 0.03125]);
    }

    #[test]
    fn single_level_has_no_fit() {
        let mut cfg = small_convergence(ModelSpec::linear_additive());
        cfg.dt_levels = vec![2f64.powi(-6)];
        cfg.samples = 3;
        let report = run_strong_convergence(&cfg, SchemeKind::Sexp).unwrap();
        assert!(report.levels[0].rms_error > 0.0);
        assert!(report.fit.is_none());
    }

    #[test]
    fn convergence_is_reproducible_and_monotone() {
        let cfg = small_convergence(ModelSpec::linear_additive());
        let a = run_strong_convergence(&cfg, SchemeKind::Sexp).unwrap();
        let b = run_strong_convergence(&cfg, SchemeKind::Sexp).unwrap();
        assert_eq!(a, b);
        for w in a.levels.windows(2) {
            assert!(w[1].rms_error <= w[0].rms_error + 3.0 * (w[0].stderr + w[1].stderr));
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| run_strong_convergence(&cfg, SchemeKind::Sexp)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn baselines_run_through_the_convergence_harness() {
        for scheme in [SchemeKind::Em, SchemeKind::Sem] {
            let cfg = small_convergence(ModelSpec::sine_multiplicative());
            let report = run_strong_convergence(&cfg, scheme).unwrap();
            assert!(report.levels.iter().all(|l| l.rms_error > 0.0));
        }
    }

    fn small_trace() -> TraceConfig {
        TraceConfig {
            grid: GridSpec::unit(4).unwrap(),
            noise: NoiseSpec::default(),
            lambda_e: 0.5,
            lambda_h: 0.5,
            t_final: 0.5,
            dt: 0.05,
            samples: 80,
            schemes: SchemeKind::ALL.to_vec(),
            master_seed: 4,
            blowup_guard: 1e3,
        }
    }

    #[test]
    fn trace_report_shapes_and_theory_line() {
        let cfg = small_trace();
        let report = run_trace_formula(&cfg).unwrap();
        assert_eq!(report.times.len(), 11);
        assert_eq!(report.schemes.len(), 3);
        for (t, th) in report.times.iter().zip(&report.theory) {
            assert!((th - report.initial_energy - report.drift_rate * t).abs() < 1e-12);
        }
        let sexp = &report.schemes[0];
        assert_eq!(sexp.energy[0].stderr, 0.0);
        assert!((sexp.energy[0].mean - report.initial_energy).abs() < 1e-15);
        assert!(sexp.max_v_norm < cfg.blowup_guard);
        assert_eq!(report.divergence.series.len(), 4);
        assert_eq!(report.divergence.series[0].label, "sexp_noiseless");
        let d0 = report.divergence.series[0].div_sum[0].mean;
        for s in &report.divergence.series[0].div_sum {
            assert!((s.mean - d0).abs() <= 1e-13);
        }
    }

    #[test]
    fn drift_rate_is_independent_of_step() {
        let mut cfg = small_trace();
        let a = run_trace_formula(&cfg).unwrap().drift_rate;
        cfg.dt = 0.1;
        let b = run_trace_formula(&cfg).unwrap().drift_rate;
        assert_eq!(a, b);
    }

    #[test]
    fn trace_is_thread_count_independent() {
        let cfg = small_trace();
        let a = run_trace_formula(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let b = pool.install(|| run_trace_formula(&cfg)).unwrap();
        assert_eq!(a, b);
    }
}
