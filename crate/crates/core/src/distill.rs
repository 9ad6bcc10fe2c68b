//! Guidance distillation: a student initialized from the teacher learns to
//! reproduce the teacher's guided (optionally reflection-refined) velocity
//! in a single forward pass.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{CondSource, Embedding};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::model::{Conditioning, Variant, VelocityModel};
use crate::optim::Adam;
use crate::pretrain::{CurveRecorder, LossCurve};
use crate::samplers::{guided_velocity_rows, Strategy};
use crate::world::{LatentState, Point, PromptSpec, WorldSpec, DIM};

/// Step used inside the reflection target: one step of the default 32-step
/// sampler grid.
pub const DEFAULT_REFLECTION_DT: f64 = 1.0 / 32.0;

/// Distillation aborts once a batch loss exceeds this multiple of the
/// step-0 loss (and the absolute pretraining limit).
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub teacher_strategy: Strategy,
    pub seed: u64,
    pub reflection_dt: f64,
    /// Inversion guidance for z-sampling targets.
    pub w_inversion: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 15_000,
            batch: 256,
            lr: 5e-4,
            w_min: 2.0,
            w_max: 14.0,
            teacher_strategy: Strategy::W2sdCfg,
            seed: 0,
            reflection_dt: DEFAULT_REFLECTION_DT,
            w_inversion: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min < self.w_max) {
            return Err(Error::Config(format!(
                "distill.w_min ({}) must be < distill.w_max ({})",
                self.w_min, self.w_max
            )));
        }
        if !matches!(
            self.teacher_strategy,
            Strategy::EulerCfg | Strategy::ZSamplingCfg | Strategy::W2sdCfg
        ) {
            return Err(Error::Config(format!(
                "distill.teacher_strategy must be euler-cfg, z-sampling-cfg or w2sd-cfg, got {}",
                self.teacher_strategy
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("distill.batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.reflection_dt > 0.0 && self.reflection_dt < 1.0) {
            return Err(Error::Config("distill.lr and distill.reflection_dt must be positive".into()));
        }
        Ok(())
    }
}

/// Guided teacher velocity for each row, refined by one local reflection
/// when `strategy` is a reflection strategy.
///
/// The refined target is the effective velocity `(x_t - x')/dt` of one
/// denoise / invert / denoise move, with `dt = min(reflection_dt, t)` per
/// row; rows at `t = 0` fall back to the plain guided velocity.
#[allow(clippy::too_many_arguments)]
pub fn teacher_target(
    teacher: &dyn VelocityField,
    weak: Option<&dyn VelocityField>,
    xs: ArrayView2<f64>,
    ts: &[f64],
    prompts: &[PromptSpec],
    ws: &[f64],
    strategy: Strategy,
    reflection_dt: f64,
    w_inversion: f64,
) -> Result<Array2<f64>> {
    let (inverter, inv_ws): (&dyn VelocityField, Vec<f64>) = match strategy {
        Strategy::EulerCfg => return guided_velocity_rows(teacher, xs, ts, prompts, ws),
        Strategy::W2sdCfg => (
            weak.ok_or_else(|| Error::MissingInput("w2sd-cfg targets require a weak model".into()))?,
            ws.to_vec(),
        ),
        Strategy::ZSamplingCfg => (teacher, vec![w_inversion; ws.len()]),
        other => return Err(Error::Config(format!("{other} is not a teacher strategy"))),
    };
    let n = xs.nrows();
    let dts: Vec<f64> = ts.iter().map(|&t| reflection_dt.min(t).max(0.0)).collect();
    let lowered: Vec<f64> = ts.iter().zip(&dts).map(|(t, dt)| (t - dt).max(0.0)).collect();
    let scale = |m: Array2<f64>, sign: f64| {
        let mut m = m;
        for (mut row, dt) in m.rows_mut().into_iter().zip(&dts) {
            row *= sign * dt;
        }
        m
    };
    let v0 = guided_velocity_rows(teacher, xs, ts, prompts, ws)?;
    let denoised = &xs + &scale(v0.clone(), -1.0);
    let v_inv = guided_velocity_rows(inverter, denoised.view(), &lowered, prompts, &inv_ws)?;
    let reflected = &denoised + &scale(v_inv, 1.0);
    let v1 = guided_velocity_rows(teacher, reflected.view(), ts, prompts, ws)?;
    let refined = &reflected + &scale(v1, -1.0);
    let mut target = Array2::zeros((n, DIM));
    for i in 0..n {
        for d in 0..DIM {
            target[[i, d]] = if dts[i] > 0.0 {
                (xs[[i, d]] - refined[[i, d]]) / dts[i]
            } else {
                v0[[i, d]]
            };
        }
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite teacher target".into()));
    }
    Ok(target)
}

/// The student's guided velocity: one forward pass with the scale injected
/// into the condition.
pub fn student_velocity(student: &VelocityModel, state: &LatentState, c: &Embedding, null: &Embedding, w: f64) -> Result<Point> {
    let xs = Array2::from_shape_vec((1, DIM), state.x.to_vec()).expect("static shape");
    let v = student.predict(xs.view(), state.t, c, null, Some(w))?;
    Ok([v[[0, 0]], v[[0, 1]]])
}

/// A distillation batch: `x_t`, time, prompt and guidance per row.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub xt: Array2<f64>,
    pub ts: Vec<f64>,
    pub prompts: Vec<PromptSpec>,
    pub ws: Vec<f64>,
}

pub fn draw_distill_batch<R: Rng + ?Sized>(rng: &mut R, world: &WorldSpec, n: usize, w_min: f64, w_max: f64) -> DistillBatch {
    let mut xt = Array2::zeros((n, DIM));
    let mut ts = Vec::with_capacity(n);
    let mut prompts = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(0..world.n_classes());
        let (r, c) = world.class_of(k);
        let m = world.mean(k);
        let t: f64 = rng.random();
        let w = rng.random_range(w_min..w_max);
        for d in 0..DIM {
            let z: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            xt[[i, d]] = (1.0 - t) * (m[d] + world.std * z) + t * eps;
        }
        ts.push(t);
        prompts.push(PromptSpec::new(r, c));
        ws.push(w);
    }
    DistillBatch { xt, ts, prompts, ws }
}

#[derive(Debug)]
pub struct DistillOutput {
    pub student: VelocityModel,
    pub curve: LossCurve,
    pub teacher_params: usize,
    pub student_params: usize,
}

/// Builds the untrained student: a copy of the teacher, plus the extra
/// guidance MLP for the baseline variant.
pub fn init_student(teacher: &VelocityModel, variant: Variant, seed: u64) -> VelocityModel {
    let mut student = teacher.clone();
    student.params.conditioner.guidance_mlp = None;
    if variant == Variant::DistillCfg {
        student = student.with_guidance_mlp(seed ^ 0x9e37_79b9);
    }
    student.variant = Some(variant);
    student
}

pub fn distill(
    teacher: &VelocityModel,
    weak: Option<&VelocityModel>,
    world: &WorldSpec,
    cfg: &DistillConfig,
    variant: Variant,
) -> Result<DistillOutput> {
    cfg.validate()?;
    if cfg.teacher_strategy.needs_weak() && weak.is_none() {
        return Err(Error::MissingInput(format!(
            "teacher strategy {} requires a weak model",
            cfg.teacher_strategy
        )));
    }
    let mut student = init_student(teacher, variant, cfg.seed);
    let mut opt = Adam::new(&student.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd157_111d);
    let mut recorder = CurveRecorder::relative(DIVERGENCE_FACTOR);
    let weak_field = weak.map(|w| w as &dyn VelocityField);
    for step in 1..=cfg.steps {
        let b = draw_distill_batch(&mut rng, world, cfg.batch, cfg.w_min, cfg.w_max);
        let target = teacher_target(
            teacher,
            weak_field,
            b.xt.view(),
            &b.ts,
            &b.prompts,
            &b.ws,
            cfg.teacher_strategy,
            cfg.reflection_dt,
            cfg.w_inversion,
        )?;
        let cond = Conditioning::EndToEnd {
            ts: &b.ts,
            source: CondSource::Prompts(&b.prompts),
            guidance: Some(&b.ws),
        };
        let (grad, loss) = student.backward(b.xt.view(), cond, target.view())?;
        recorder.record(step, loss)?;
        opt.step(&mut student.params, &grad);
    }
    Ok(DistillOutput {
        teacher_params: teacher.n_params(),
        student_params: student.n_params(),
        student: student.clone(),
        curve: recorder.finish(),
    })
}

/// Held-out mean squared deviation of the student from the teacher target,
/// per guidance scale: the same `n` probe points are scored at every `w`.
#[allow(clippy::too_many_arguments)]
pub fn probe_mse(
    student: &VelocityModel,
    teacher: &VelocityModel,
    weak: Option<&VelocityModel>,
    world: &WorldSpec,
    cfg: &DistillConfig,
    ws: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = draw_distill_batch(&mut rng, world, n, cfg.w_min, cfg.w_max);
    ws.iter()
        .map(|&w| {
            let wv = vec![w; n];
            let target = teacher_target(
                teacher,
                weak.map(|m| m as &dyn VelocityField),
                probes.xt.view(),
                &probes.ts,
                &probes.prompts,
                &wv,
                cfg.teacher_strategy,
                cfg.reflection_dt,
                cfg.w_inversion,
            )?;
            let pred = student.velocity_rows(probes.xt.view(), &probes.ts, &probes.prompts, Some(&wv))?;
            Ok((w, (&pred - &target).mapv(|v| v * v).sum() / n as f64))
        })
        .collect()
}

/// Mean Euclidean distance between student outputs at scales `a` and `b`
/// over `n` probe points.
pub fn guidance_sensitivity(student: &VelocityModel, world: &WorldSpec, a: f64, b: f64, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = draw_distill_batch(&mut rng, world, n, 0.0, 1.0);
    let va = student.velocity_rows(probes.xt.view(), &probes.ts, &probes.prompts, Some(&vec![a; n]))?;
    let vb = student.velocity_rows(probes.xt.view(), &probes.ts, &probes.prompts, Some(&vec![b; n]))?;
    let d = &va - &vb;
    Ok(d.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / n as f64)
}
