//! Command-line front end: JSON configuration with dotted overrides,
//! subcommand dispatch, CSV and summary emission, and the structural
//! `check` suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand as ClapSubcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::experiments::{
    run_divergence, run_strong_convergence, run_trace_formula, ConvergenceConfig,
    ConvergenceReport, DivergenceReport, TraceConfig, TraceReport,
};
use crate::grid::{build_layout, divergence_slice, v_inner_slice, GridSpec, DEFAULT_KAPPA};
use crate::noise::{accumulate, BrownianPath, NoiseSpec, SpectralNoise};
use crate::propagator::{assemble, exp_propagator};
use crate::schemes::{ModelSpec, SchemeKind, Stepper};

#[derive(Debug, Parser)]
#[command(name = "stomax", version, about = "Stochastic Maxwell integrators on a Yee grid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON configuration file (may be empty).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dotted override such as `trace.samples=500`; the value is parsed as
    /// JSON and falls back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, ClapSubcommand)]
pub enum Command {
    /// Strong error against a fine reference on shared Brownian paths.
    Convergence(CommonArgs),
    /// Mean energy of each scheme against the exact trace line.
    Trace(CommonArgs),
    /// Mean summed magnetic divergence of each scheme.
    Divergence(CommonArgs),
    /// Structural invariants of the discretisation.
    Check(CommonArgs),
}

impl Command {
    pub fn subcommand(&self) -> Subcommand {
        match self {
            Command::Convergence(_) => Subcommand::Convergence,
            Command::Trace(_) => Subcommand::Trace,
            Command::Divergence(_) => Subcommand::Divergence,
            Command::Check(_) => Subcommand::Check,
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Convergence(a) | Command::Trace(a) | Command::Divergence(a) | Command::Check(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subcommand {
    Convergence,
    Trace,
    Divergence,
    Check,
}

/// Uniform grid on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_cells: usize,
    pub epsilon: f64,
    pub mu: f64,
    pub kappa: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_cells: 16,
            epsilon: 1.0,
            mu: 1.0,
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::with_kappa(self.n_cells, self.epsilon, self.mu, self.kappa)
            .map_err(|e| Error::config("grid", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceBlock {
    pub scheme: SchemeKind,
    pub t_final: f64,
    pub dt_levels: Vec<f64>,
    pub dt_ref: f64,
    pub samples: usize,
}

impl Default for ConvergenceBlock {
    fn default() -> Self {
        let d = ConvergenceConfig::desk(ModelSpec::linear_additive());
        ConvergenceBlock {
            scheme: SchemeKind::Sexp,
            t_final: d.t_final,
            dt_levels: d.dt_levels,
            dt_ref: d.dt_ref,
            samples: d.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceBlock {
    pub lambda_e: f64,
    pub lambda_h: f64,
    pub t_final: f64,
    pub dt: f64,
    pub samples: usize,
    pub schemes: Vec<SchemeKind>,
    pub blowup_guard: f64,
}

impl Default for TraceBlock {
    fn default() -> Self {
        let d = TraceConfig::desk();
        TraceBlock {
            lambda_e: d.lambda_e,
            lambda_h: d.lambda_h,
            t_final: d.t_final,
            dt: d.dt,
            samples: d.samples,
            schemes: d.schemes,
            blowup_guard: d.blowup_guard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckBlock {
    /// Step of the propagator checks and of the long SEXP run.
    pub dt: f64,
    /// Length of the same-noise SEXP run.
    pub steps: usize,
    /// Random states per invariant.
    pub states: usize,
}

impl Default for CheckBlock {
    fn default() -> Self {
        CheckBlock {
            dt: 0.01,
            steps: 500,
            states: 20,
        }
    }
}

/// Fully resolved run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_deserializing, default = "default_subcommand")]
    pub subcommand: Subcommand,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Drift and diffusion of the convergence study.
    #[serde(default = "ModelSpec::linear_additive")]
    pub model: ModelSpec,
    #[serde(default)]
    pub convergence: ConvergenceBlock,
    #[serde(default)]
    pub trace: TraceBlock,
    #[serde(default)]
    pub check: CheckBlock,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    /// 0 uses every available core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_subcommand() -> Subcommand {
    Subcommand::Check
}

fn default_seed() -> u64 {
    20_240_501
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            subcommand: default_subcommand(),
            grid: GridConfig::default(),
            noise: NoiseSpec::default(),
            model: ModelSpec::linear_additive(),
            convergence: ConvergenceBlock::default(),
            trace: TraceBlock::default(),
            check: CheckBlock::default(),
            master_seed: default_seed(),
            threads: 0,
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn convergence_config(&self) -> Result<ConvergenceConfig> {
        Ok(ConvergenceConfig {
            grid: self.grid.spec()?,
            noise: self.noise,
            model: self.model,
            t_final: self.convergence.t_final,
            dt_levels: self.convergence.dt_levels.clone(),
            dt_ref: self.convergence.dt_ref,
            samples: self.convergence.samples,
            master_seed: self.master_seed,
        })
    }

    pub fn trace_config(&self) -> Result<TraceConfig> {
        Ok(TraceConfig {
            grid: self.grid.spec()?,
            noise: self.noise,
            lambda_e: self.trace.lambda_e,
            lambda_h: self.trace.lambda_h,
            t_final: self.trace.t_final,
            dt: self.trace.dt,
            samples: self.trace.samples,
            schemes: self.trace.schemes.clone(),
            master_seed: self.master_seed,
            blowup_guard: self.trace.blowup_guard,
        })
    }

    /// Checks every block the subcommand uses.
    pub fn validate(&self) -> Result<()> {
        let spec = self.grid.spec()?;
        self.noise
            .modes(spec.n_cells)
            .map_err(|e| Error::config("noise", e.to_string()))?;
        match self.subcommand {
            Subcommand::Convergence => self.convergence_config()?.validate().map_err(|e| in_block("convergence", e)),
            Subcommand::Trace | Subcommand::Divergence => {
                self.trace_config()?.validate().map_err(|e| in_block("trace", e))
            }
            Subcommand::Check => {
                if !(self.check.dt > 0.0 && self.check.dt.is_finite()) {
                    return Err(Error::config("check.dt", format!("must be positive, got {}", self.check.dt)));
                }
                if self.check.states < 2 || self.check.steps == 0 {
                    return Err(Error::config("check", "need at least 2 states and 1 step"));
                }
                Ok(())
            }
        }
    }
}

/// Qualifies a field error with the config block it came from.
fn in_block(block: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } if field != "grid" => Error::Config {
            field: format!("{block}.{field}"),
            message,
        },
        other => other,
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

impl From<&CommonArgs> for Overrides {
    fn from(a: &CommonArgs) -> Self {
        Overrides {
            seed: a.seed,
            threads: a.threads,
            out: a.out.clone(),
            set: a.set.clone(),
        }
    }
}

fn set_dotted(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("expected key=value, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config("--set", format!("malformed key `{key}`")));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not inside an object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::config(key, "parent is not an object"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Defaults with `file` laid over them, so partial blocks and overrides of
/// absent keys resolve against the desk-scale values. Unknown keys survive
/// the merge and are rejected on deserialization.
fn merged_with_defaults(file: Value) -> Value {
    fn merge(base: &mut Value, over: Value) {
        match (base, over) {
            (Value::Object(b), Value::Object(o)) => {
                for (k, v) in o {
                    match b.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            b.insert(k, v);
                        }
                    }
                }
            }
            (slot, v) => *slot = v,
        }
    }
    let mut base = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Value::Object(b) = &mut base {
        b.remove("subcommand");
    }
    merge(&mut base, file);
    base
}

/// Parses configuration text (empty means all defaults), applies overrides
/// and validates the result for `subcommand`.
pub fn parse_config(text: &str, subcommand: Subcommand, overrides: &Overrides) -> Result<RunConfig> {
    let root = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?
    };
    if !root.is_object() {
        return Err(Error::config("config", "top level must be a JSON object"));
    }
    let mut root = merged_with_defaults(root);
    for assignment in &overrides.set {
        set_dotted(&mut root, assignment)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(root).map_err(|e| Error::config("config", e.to_string()))?;
    cfg.subcommand = subcommand;
    if let Some(seed) = overrides.seed {
        cfg.master_seed = seed;
    }
    if let Some(threads) = overrides.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, subcommand: Subcommand, overrides: &Overrides) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, subcommand, overrides)
}

/// One line of the `check` suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &'static str, value: f64, tolerance: f64) -> Self {
        CheckOutcome {
            name,
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} value={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

fn random_state(rng: &mut ChaCha8Rng, layout: &crate::grid::GridLayout) -> Vec<f64> {
    let mut u: Vec<f64> = (0..layout.dim()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    for i in layout.boundary_e3_indices() {
        u[i] = 0.0;
    }
    u
}

/// Runs the structural invariant suite on the configured grid.
pub fn run_checks(cfg: &RunConfig) -> Result<Vec<CheckOutcome>> {
    let spec = cfg.grid.spec()?;
    let layout = build_layout(&spec)?;
    let m = assemble(&spec, &layout)?;
    let dt = cfg.check.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let states: Vec<Vec<f64>> = (0..cfg.check.states).map(|_| random_state(&mut rng, &layout)).collect();
    let norm = |u: &[f64]| v_inner_slice(&spec, u, u).sqrt();
    let mut out = Vec::new();

    // <Au, v>_V + <u, Av>_V relative to |u|_V |v|_V
    let mut skew = 0.0f64;
    for (i, u) in states.iter().enumerate() {
        let v = &states[(i + 1) % states.len()];
        let (au, av) = (m.mul_dense(u), m.mul_dense(v));
        let s = v_inner_slice(&spec, &au, v) + v_inner_slice(&spec, u, &av);
        skew = skew.max(s.abs() / (norm(u) * norm(v)));
    }
    out.push(CheckOutcome::new("skew_adjointness", skew, 1e-12));

    let p = exp_propagator(&m, dt)?;
    let p2 = exp_propagator(&m, 2.0 * dt)?;
    let mut iso = 0.0f64;
    let mut semi = 0.0f64;
    for u in &states {
        let su = p.apply_slice(u);
        iso = iso.max((norm(&su) - norm(u)).abs() / norm(u));
        let ssu = p.apply_slice(&su);
        let s2u = p2.apply_slice(u);
        let d: Vec<f64> = ssu.iter().zip(&s2u).map(|(a, b)| a - b).collect();
        semi = semi.max(norm(&d) / norm(u));
    }
    out.push(CheckOutcome::new("propagator_isometry", iso, 1e-12));
    out.push(CheckOutcome::new("semigroup_composition", semi, 1e-10));

    // the magnetic part of A applied to a pure electric field is a discrete curl
    let e3_len = layout.range(crate::grid::Family::E3).len();
    let mut divcurl = 0.0f64;
    for u in &states {
        let mut e_only = u.clone();
        e_only[e3_len..].iter_mut().for_each(|v| *v = 0.0);
        let mut au = vec![0.0; u.len()];
        m.apply_slice(&e_only, &mut au);
        let div = divergence_slice(&spec, &au);
        divcurl = divcurl.max(div.iter().fold(0.0f64, |a, d| a.max(d.abs())));
    }
    out.push(CheckOutcome::new("div_curl", divcurl, 1e-13));
    out.push(CheckOutcome::new("spectrum_real_part", m.spectral_abscissa().abs(), 1e-10));

    let noise = SpectralNoise::new(&layout, &cfg.noise)?;
    let path = BrownianPath::new(cfg.master_seed, 0, 64, dt / 8.0, noise.n_modes())?;
    let mut refinement = 0.0f64;
    for level in 0..=3u32 {
        let factor = 1usize << level;
        for k in 0..path.coarse_steps(level)? {
            let mut acc = vec![0.0; noise.n_modes()];
            for l in k * factor..(k + 1) * factor {
                accumulate(&mut acc, &path.fine_increment(l)?);
            }
            let coarse = path.coarse_increment(level, k)?;
            if coarse != acc {
                refinement = f64::INFINITY;
            }
        }
    }
    out.push(CheckOutcome::new("brownian_refinement", refinement, 0.0));

    // two trajectories under identical additive noise differ by S(dt)^k
    let model = ModelSpec::pure_additive(cfg.trace.lambda_e, cfg.trace.lambda_h);
    let stepper = Stepper::Sexp(&p);
    let steps = cfg.check.steps;
    let long = BrownianPath::new(cfg.master_seed, 1, steps, dt, noise.n_modes())?;
    let mut block = DMatrix::from_fn(layout.dim(), 2, |r, c| states[c][r]);
    let diff0: Vec<f64> = block.column(0).iter().zip(block.column(1).iter()).map(|(a, b)| a - b).collect();
    let d0 = norm(&diff0);
    let mut worst = 0.0f64;
    let mut fine = vec![0.0; noise.n_modes()];
    for k in 0..steps {
        long.fill_fine(k, &mut fine)?;
        let dw = noise.evaluate(&fine);
        let dw = DMatrix::from_fn(layout.dim(), 2, |r, _| dw[r]);
        stepper.step_block(&model, &mut block, &dw)?;
        let diff: Vec<f64> = block.column(0).iter().zip(block.column(1).iter()).map(|(a, b)| a - b).collect();
        worst = worst.max((norm(&diff) - d0).abs() / d0);
    }
    out.push(CheckOutcome::new("same_noise_isometry", worst, 1e-11));
    Ok(out)
}

fn csv_line(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut s = String::from("dt,rms_error,stderr,samples_used\n");
    for l in &report.levels {
        csv_line(
            &mut s,
            &[l.dt.to_string(), l.rms_error.to_string(), l.stderr.to_string(), l.samples_used.to_string()],
        );
    }
    s
}

pub fn trace_csv(report: &TraceReport) -> String {
    let mut s = String::from("scheme,step,time,mean_energy,stderr,theory_energy\n");
    for scheme in &report.schemes {
        for (k, stat) in scheme.energy.iter().enumerate() {
            csv_line(
                &mut s,
                &[
                    scheme.scheme.to_string(),
                    k.to_string(),
                    report.times[k].to_string(),
                    stat.mean.to_string(),
                    stat.stderr.to_string(),
                    report.theory[k].to_string(),
                ],
            );
        }
    }
    s
}

pub fn divergence_csv(report: &DivergenceReport) -> String {
    let mut s = String::from("scheme,step,time,mean_div_sum,stderr,max_abs_div\n");
    for series in &report.series {
        for (k, stat) in series.div_sum.iter().enumerate() {
            csv_line(
                &mut s,
                &[
                    series.label.clone(),
                    k.to_string(),
                    report.times[k].to_string(),
                    stat.mean.to_string(),
                    stat.stderr.to_string(),
                    series.max_abs_div[k].to_string(),
                ],
            );
        }
    }
    s
}

/// Results of one subcommand.
#[derive(Debug, Clone)]
pub enum Report {
    Convergence(ConvergenceReport),
    Trace(TraceReport),
    Divergence(DivergenceReport),
    Check(Vec<CheckOutcome>),
}

impl Report {
    /// Human-readable summary lines (without the config echo).
    pub fn summary(&self) -> String {
        let mut s = String::new();
        match self {
            Report::Convergence(r) => {
                let _ = writeln!(s, "strong convergence, scheme {}", r.scheme);
                for l in &r.levels {
                    let _ = writeln!(
                        s,
                        "  dt={} rms_error={:.6e} stderr={:.3e} samples_used={} excluded={}",
                        l.dt, l.rms_error, l.stderr, l.samples_used, l.excluded
                    );
                }
                match r.fit {
                    Some((slope, intercept)) => {
                        let _ = writeln!(s, "fitted slope {slope:.4} (intercept {intercept:.4})");
                    }
                    None => {
                        let _ = writeln!(s, "fitted slope unavailable (zero error at some level)");
                    }
                }
                let _ = writeln!(s, "reference samples excluded {}", r.reference_excluded);
            }
            Report::Trace(r) => {
                let _ = writeln!(s, "trace formula, K_h = {:.6e}, initial energy {:.6e}", r.drift_rate, r.initial_energy);
                for e in &r.schemes {
                    let last = e.energy.last().map(|x| x.mean).unwrap_or(f64::NAN);
                    let _ = writeln!(
                        s,
                        "  {} slope={:.6e} slope/K_h={:.4} final_mean_energy={:.6e} max_v_norm={:.3e} excluded={}",
                        e.scheme,
                        e.fitted_slope,
                        e.fitted_slope / r.drift_rate,
                        last,
                        e.max_v_norm,
                        e.excluded
                    );
                }
                let _ = writeln!(s, "theory final energy {:.6e}", r.theory.last().copied().unwrap_or(f64::NAN));
                s.push_str(&divergence_summary(&r.divergence));
            }
            Report::Divergence(r) => s.push_str(&divergence_summary(r)),
            Report::Check(outcomes) => {
                for o in outcomes {
                    let _ = writeln!(s, "{}", o.line());
                }
            }
        }
        s
    }

    pub fn passed(&self) -> bool {
        match self {
            Report::Check(o) => o.iter().all(|c| c.passed),
            _ => true,
        }
    }
}

fn divergence_summary(r: &DivergenceReport) -> String {
    let mut s = String::from("averaged divergence\n");
    for series in &r.series {
        let d0 = series.div_sum.first().map(|x| x.mean).unwrap_or(0.0);
        let drift = series.div_sum.iter().fold(0.0f64, |a, x| a.max((x.mean - d0).abs()));
        let peak = series.max_abs_div.iter().fold(0.0f64, |a, x| a.max(*x));
        let _ = writeln!(
            s,
            "  {} initial={:.6e} max_drift={:.3e} max_abs_div={:.3e} excluded={}",
            series.label, d0, drift, peak, series.excluded
        );
    }
    s
}

/// Runs the experiment selected by `cfg.subcommand`.
pub fn execute(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match cfg.subcommand {
        Subcommand::Convergence => Ok(Report::Convergence(run_strong_convergence(
            &cfg.convergence_config()?,
            cfg.convergence.scheme,
        )?)),
        Subcommand::Trace => Ok(Report::Trace(run_trace_formula(&cfg.trace_config()?)?)),
        Subcommand::Divergence => Ok(Report::Divergence(run_divergence(&cfg.trace_config()?)?)),
        Subcommand::Check => Ok(Report::Check(run_checks(cfg)?)),
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes CSVs, `summary.txt` and `config.json` into `output_dir`.
pub fn write_report(report: &Report, cfg: &RunConfig, output_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let echo = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    let mut written = Vec::new();
    match report {
        Report::Convergence(r) => written.push(write_file(output_dir, "convergence.csv", &convergence_csv(r))?),
        Report::Trace(r) => {
            written.push(write_file(output_dir, "trace_energy.csv", &trace_csv(r))?);
            written.push(write_file(output_dir, "divergence.csv", &divergence_csv(&r.divergence))?);
        }
        Report::Divergence(r) => written.push(write_file(output_dir, "divergence.csv", &divergence_csv(r))?),
        Report::Check(_) => {}
    }
    let summary = format!("{}\nconfig:\n{}", report.summary(), echo);
    written.push(write_file(output_dir, "summary.txt", &summary)?);
    written.push(write_file(output_dir, "config.json", &echo)?);
    Ok(written)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config { .. } | Error::ConfigParse { .. } => "config",
        Error::Io { .. } => "io",
        Error::TooManyExcluded { .. } => "excluded_samples",
        Error::Numerical(_) => "numerical",
        _ => "invalid_input",
    }
}

/// Machine-readable error line for stderr.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({"status": "error", "kind": error_kind(e), "message": e.to_string()}).to_string()
}

/// Loads, runs and writes; returns the process exit code.
pub fn run_cli(cli: &Cli) -> i32 {
    let args = cli.command.args();
    let result = load_config(&args.config, cli.command.subcommand(), &Overrides::from(args))
        .and_then(|cfg| {
            let report = execute(&cfg)?;
            write_report(&report, &cfg, &cfg.output_dir)?;
            Ok(report)
        });
    match result {
        Ok(report) => {
            print!("{}", report.summary());
            if report.passed() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            match e {
                Error::Config { .. } | Error::ConfigParse { .. } => 2,
                _ => 1,
            }
        }
    }
}
