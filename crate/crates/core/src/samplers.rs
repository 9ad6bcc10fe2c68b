//! Denoising strategies over a [`VelocityField`], integrating from `t = 1`
//! down to `t_min` on a uniform grid.
//!
//! Per-step cost in network evaluations (per sample):
//!
//! | strategy         | passes |
//! |------------------|--------|
//! | `euler`          | 1      |
//! | `euler_cfg`      | 2      |
//! | `z_sampling_cfg` | 6      |
//! | `w2sd_cfg`       | 6      |
//! | `fused`          | 1      |
//!
//! The reflection strategies denoise with guidance, step back up with the
//! inverting model, then denoise again; each of the three moves costs two
//! passes.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::Embedding;
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::world::{LatentState, Point, PromptSpec, DIM, ORACLE_T_MIN};

const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Euler,
    EulerCfg,
    ZSamplingCfg,
    W2sdCfg,
    Fused,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Euler,
        Strategy::EulerCfg,
        Strategy::ZSamplingCfg,
        Strategy::W2sdCfg,
        Strategy::Fused,
    ];

    /// Network evaluations per sample per step.
    pub fn passes_per_step(&self) -> u64 {
        match self {
            Strategy::Euler | Strategy::Fused => 1,
            Strategy::EulerCfg => 2,
            Strategy::ZSamplingCfg | Strategy::W2sdCfg => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Euler => "euler",
            Strategy::EulerCfg => "euler-cfg",
            Strategy::ZSamplingCfg => "z-sampling-cfg",
            Strategy::W2sdCfg => "w2sd-cfg",
            Strategy::Fused => "fused",
        }
    }

    pub fn needs_weak(&self) -> bool {
        matches!(self, Strategy::W2sdCfg)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "euler" => Ok(Strategy::Euler),
            "euler-cfg" => Ok(Strategy::EulerCfg),
            "z-sampling-cfg" => Ok(Strategy::ZSamplingCfg),
            "w2sd-cfg" => Ok(Strategy::W2sdCfg),
            "fused" => Ok(Strategy::Fused),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSpec {
    pub strategy: Strategy,
    pub steps: usize,
    pub w: f64,
    /// Guidance used while inverting in z-sampling.
    pub w_inversion: f64,
    pub t_min: f64,
}

impl SamplerSpec {
    pub fn new(strategy: Strategy, steps: usize, w: f64) -> Self {
        Self {
            strategy,
            steps,
            w,
            w_inversion: 0.0,
            t_min: ORACLE_T_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be >= 1".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("sampler.t_min must be in (0, 1), got {}", self.t_min)));
        }
        if !self.w.is_finite() || !self.w_inversion.is_finite() {
            return Err(Error::Config("guidance scales must be finite".into()));
        }
        Ok(())
    }

    /// Uniform grid `1 = t_0 > t_1 > ... > t_steps = t_min`.
    pub fn time_grid(&self) -> Vec<f64> {
        let dt = (1.0 - self.t_min) / self.steps as f64;
        (0..=self.steps)
            .map(|k| if k == self.steps { self.t_min } else { 1.0 - k as f64 * dt })
            .collect()
    }
}

/// Result of one sampling run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Batch positions at each grid time, starting with the initial noise.
    pub states: Vec<Array2<f64>>,
    pub forward_passes_per_step: u64,
    pub total_forward_passes: u64,
}

impl Trajectory {
    pub fn samples(&self) -> &Array2<f64> {
        self.states.last().expect("at least the initial state")
    }

    pub fn state(&self, sample: usize, step: usize) -> LatentState {
        let x = self.states[step].row(sample);
        LatentState {
            x: [x[0], x[1]],
            t: self.times[step],
        }
    }
}

/// Counts the rows sent through a field during one call, independently of
/// any other users of the same field.
struct Metered<'a> {
    field: &'a dyn VelocityField,
    passes: AtomicU64,
}

impl<'a> Metered<'a> {
    fn new(field: &'a dyn VelocityField) -> Self {
        Self {
            field,
            passes: AtomicU64::new(0),
        }
    }

    fn velocity(&self, xs: ArrayView2<f64>, t: f64, c: &Embedding, null: &Embedding, guidance: Option<f64>) -> Result<Array2<f64>> {
        self.passes.fetch_add(xs.nrows() as u64, Ordering::Relaxed);
        self.field.velocity(xs, t, c, null, guidance)
    }

    fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }
}

fn cfg_combine(cond: Array2<f64>, uncond: Array2<f64>, w: f64) -> Array2<f64> {
    cond * (1.0 + w) - uncond * w
}

/// Row-wise `(1 + w_i) cond_i - w_i uncond_i`.
pub fn cfg_combine_rows(mut cond: Array2<f64>, uncond: ArrayView2<f64>, ws: &[f64]) -> Array2<f64> {
    for ((mut c, u), &w) in cond.rows_mut().into_iter().zip(uncond.rows()).zip(ws) {
        for d in 0..c.len() {
            c[d] = c[d] * (1.0 + w) - u[d] * w;
        }
    }
    cond
}

/// Classifier-free guidance with per-row time, prompt and scale; two passes
/// per row.
pub fn guided_velocity_rows(
    field: &dyn VelocityField,
    xs: ArrayView2<f64>,
    ts: &[f64],
    prompts: &[PromptSpec],
    ws: &[f64],
) -> Result<Array2<f64>> {
    let cond = field.velocity_rows(xs, ts, prompts, None)?;
    let nulls = vec![PromptSpec::NULL; prompts.len()];
    let uncond = field.velocity_rows(xs, ts, &nulls, None)?;
    Ok(cfg_combine_rows(cond, uncond.view(), ws))
}

/// `(1 + w) f(x, c) - w f(x, null)` over a batch; two passes per row.
pub fn guided_velocity_batch(
    field: &dyn VelocityField,
    xs: ArrayView2<f64>,
    t: f64,
    c: &Embedding,
    null: &Embedding,
    w: f64,
) -> Result<Array2<f64>> {
    let cond = field.velocity(xs, t, c, null, None)?;
    let uncond = field.velocity(xs, t, null, null, None)?;
    Ok(cfg_combine(cond, uncond, w))
}

pub fn guided_velocity(
    field: &dyn VelocityField,
    state: &LatentState,
    c: &Embedding,
    null: &Embedding,
    w: f64,
) -> Result<Point> {
    let xs = Array2::from_shape_vec((1, DIM), state.x.to_vec()).expect("static shape");
    let v = guided_velocity_batch(field, xs.view(), state.t, c, null, w)?;
    Ok([v[[0, 0]], v[[0, 1]]])
}

fn check_finite(xs: &Array2<f64>, what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite coordinates after {what}")))
    }
}

/// `x_{t-dt} = x_t - dt v(x_t, t)`.
pub fn euler_step<F>(velocity: F, xs: ArrayView2<f64>, t: f64, dt: f64, t_min: f64) -> Result<Array2<f64>>
where
    F: Fn(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("euler step needs dt > 0, got {dt}")));
    }
    if t - dt < t_min - TIME_TOL {
        return Err(Error::Domain(format!("euler step from t = {t} by {dt} goes below t_min = {t_min}")));
    }
    let v = velocity(xs, t)?;
    let out = &xs - &(v * dt);
    check_finite(&out, "euler step")?;
    Ok(out)
}

/// Reverse Euler move `x_{t+dt} = x_t + dt v(x_t, t)`; the inverse of
/// [`euler_step`] up to `O(dt^2)`.
pub fn invert_step<F>(velocity: F, xs: ArrayView2<f64>, t: f64, dt: f64) -> Result<Array2<f64>>
where
    F: Fn(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    if dt < 0.0 {
        return Err(Error::Domain(format!("inversion step needs dt >= 0, got {dt}")));
    }
    if t + dt > 1.0 + TIME_TOL {
        return Err(Error::Domain(format!("inversion from t = {t} by {dt} goes above t = 1")));
    }
    if dt == 0.0 {
        return Ok(xs.to_owned());
    }
    let v = velocity(xs, t)?;
    let out = &xs + &(v * dt);
    check_finite(&out, "inversion step")?;
    Ok(out)
}

/// One denoise / invert / denoise move from `t` to `t - dt`. The strong
/// field denoises with guidance `w`; the inverting field steps back with
/// guidance `w_inv`.
#[allow(clippy::too_many_arguments)]
fn reflection_step(
    strong: &Metered<'_>,
    inverter: &Metered<'_>,
    xs: ArrayView2<f64>,
    t: f64,
    dt: f64,
    t_min: f64,
    c: (&Embedding, &Embedding),
    inverter_c: (&Embedding, &Embedding),
    w: f64,
    w_inv: f64,
) -> Result<Array2<f64>> {
    let strong_v = |x: ArrayView2<f64>, t: f64| {
        let cond = strong.velocity(x, t, c.0, c.1, None)?;
        let uncond = strong.velocity(x, t, c.1, c.1, None)?;
        Ok(cfg_combine(cond, uncond, w))
    };
    let inv_v = |x: ArrayView2<f64>, t: f64| {
        let cond = inverter.velocity(x, t, inverter_c.0, inverter_c.1, None)?;
        let uncond = inverter.velocity(x, t, inverter_c.1, inverter_c.1, None)?;
        Ok(cfg_combine(cond, uncond, w_inv))
    };
    let denoised = euler_step(strong_v, xs, t, dt, t_min)?;
    let reflected = invert_step(inv_v, denoised.view(), t - dt, dt)?;
    euler_step(strong_v, reflected.view(), t, dt, t_min)
}

/// Runs `spec` from seeded Gaussian noise and returns the full trajectory.
pub fn sample(
    teacher: &dyn VelocityField,
    weak: Option<&dyn VelocityField>,
    spec: &SamplerSpec,
    prompt: &PromptSpec,
    n: usize,
    seed: u64,
) -> Result<Trajectory> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Domain("sample requires n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Array2::from_shape_fn((n, DIM), |_| rng.sample::<f64, _>(StandardNormal));
    sample_from(teacher, weak, spec, prompt, init)
}

/// Like [`sample`] but starting from caller-provided noise at `t = 1`.
pub fn sample_from(
    teacher: &dyn VelocityField,
    weak: Option<&dyn VelocityField>,
    spec: &SamplerSpec,
    prompt: &PromptSpec,
    init: Array2<f64>,
) -> Result<Trajectory> {
    let c = teacher.embed_prompt(prompt)?;
    let null = teacher.null_embedding();
    let weak_c = match weak {
        Some(wf) => Some((wf.embed_prompt(prompt)?, wf.null_embedding())),
        None => None,
    };
    run(teacher, weak.zip(weak_c), spec, (c, null), init)
}

/// Samples under an arbitrary condition embedding `c` rather than a prompt.
/// Strategies that need a weak model are not supported here.
pub fn sample_embedded(
    field: &dyn VelocityField,
    spec: &SamplerSpec,
    c: &Embedding,
    n: usize,
    seed: u64,
) -> Result<Trajectory> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Domain("sample requires n >= 1".into()));
    }
    if c.dim() != field.null_embedding().dim() {
        return Err(Error::Shape {
            expected: field.null_embedding().dim(),
            got: c.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Array2::from_shape_fn((n, DIM), |_| rng.sample::<f64, _>(StandardNormal));
    run(field, None, spec, (c.clone(), field.null_embedding()), init)
}

fn run(
    teacher: &dyn VelocityField,
    weak: Option<(&dyn VelocityField, (Embedding, Embedding))>,
    spec: &SamplerSpec,
    (c, null): (Embedding, Embedding),
    init: Array2<f64>,
) -> Result<Trajectory> {
    spec.validate()?;
    let strategy = spec.strategy;
    if strategy.needs_weak() && weak.is_none() {
        return Err(Error::MissingInput(format!("strategy {strategy} requires a weak model")));
    }
    if strategy == Strategy::Fused && !teacher.supports_fused() {
        return Err(Error::Config("fused sampling requires a guidance-distilled model".into()));
    }
    let n = init.nrows() as u64;
    let strong = Metered::new(teacher);
    let (weak_field, weak_c) = match weak {
        Some((wf, emb)) => (Some(Metered::new(wf)), Some(emb)),
        None => (None, None),
    };

    let times = spec.time_grid();
    let mut states = Vec::with_capacity(times.len());
    states.push(init);
    for k in 0..spec.steps {
        let (t, t_next) = (times[k], times[k + 1]);
        let dt = t - t_next;
        let xs = states[k].view();
        let next = match strategy {
            Strategy::Euler => euler_step(|x, t| strong.velocity(x, t, &c, &null, None), xs, t, dt, spec.t_min)?,
            Strategy::Fused => euler_step(|x, t| strong.velocity(x, t, &c, &null, Some(spec.w)), xs, t, dt, spec.t_min)?,
            Strategy::EulerCfg => euler_step(
                |x, t| {
                    let cond = strong.velocity(x, t, &c, &null, None)?;
                    let uncond = strong.velocity(x, t, &null, &null, None)?;
                    Ok(cfg_combine(cond, uncond, spec.w))
                },
                xs,
                t,
                dt,
                spec.t_min,
            )?,
            Strategy::ZSamplingCfg => {
                reflection_step(&strong, &strong, xs, t, dt, spec.t_min, (&c, &null), (&c, &null), spec.w, spec.w_inversion)?
            }
            Strategy::W2sdCfg => {
                let wf = weak_field.as_ref().expect("checked above");
                let (wc, wn) = weak_c.as_ref().expect("checked above");
                reflection_step(&strong, wf, xs, t, dt, spec.t_min, (&c, &null), (wc, wn), spec.w, spec.w)?
            }
        };
        states.push(next);
    }

    let total = strong.passes() + weak_field.as_ref().map_or(0, Metered::passes);
    let per_step = strategy.passes_per_step();
    let expected = per_step * spec.steps as u64 * n;
    if total != expected {
        return Err(Error::Numerical(format!(
            "forward-pass accounting mismatch for {strategy}: counted {total}, contract {expected}"
        )));
    }
    Ok(Trajectory {
        times,
        states,
        forward_passes_per_step: per_step,
        total_forward_passes: total,
    })
}

pub const SAMPLES_CSV_HEADER: &str = "sample_id,x0,x1,prompt_row,prompt_col,strategy,w,steps,forward_passes";

fn token(t: Option<usize>) -> String {
    t.map_or_else(|| "*".into(), |v| v.to_string())
}

/// Writes terminal samples in the documented CSV schema.
pub fn write_samples_csv(
    path: &Path,
    samples: &Array2<f64>,
    prompt: &PromptSpec,
    spec: &SamplerSpec,
    forward_passes: u64,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(SAMPLES_CSV_HEADER);
    out.push('\n');
    for (i, row) in samples.rows().into_iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            row[0],
            row[1],
            token(prompt.row),
            token(prompt.col),
            spec.strategy,
            spec.w,
            spec.steps,
            forward_passes
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
