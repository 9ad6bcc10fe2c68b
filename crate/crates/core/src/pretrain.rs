//! Flow-matching pretraining of the teacher with condition dropout.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::CondSource;
use crate::error::{Error, Result};
use crate::model::{Conditioning, ModelConfig, VelocityModel};
use crate::optim::Adam;
use crate::world::{PromptSpec, WorldSpec, DIM};

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e3;
pub const LOG_EVERY: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub seed: u64,
    pub weak_snapshot_step: usize,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            lr: 1e-3,
            cond_dropout: 0.1,
            seed: 0,
            weak_snapshot_step: 5_000,
            model: ModelConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("pretrain.cond_dropout must be in [0, 1], got {}", self.cond_dropout)));
        }
        if self.weak_snapshot_step >= self.steps {
            return Err(Error::Config(format!(
                "pretrain.weak_snapshot_step ({}) must be < pretrain.steps ({})",
                self.weak_snapshot_step, self.steps
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("pretrain.batch must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("pretrain.lr must be > 0".into()));
        }
        self.model.validate()
    }
}

/// `(step, loss)` pairs. Step 0 holds the loss of the first batch before any
/// update; later entries hold the mean batch loss over the preceding
/// [`LOG_EVERY`] updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve(pub Vec<(usize, f64)>);

impl LossCurve {
    pub fn first(&self) -> Option<f64> {
        self.0.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.0.last().map(|p| p.1)
    }

    pub fn at(&self, step: usize) -> Option<f64> {
        self.0.iter().find(|p| p.0 == step).map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.0 {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Accumulates per-step losses into a [`LossCurve`].
#[derive(Debug)]
pub(crate) struct CurveRecorder {
    curve: LossCurve,
    window: f64,
    count: usize,
    limit: f64,
    relative: Option<f64>,
}

impl Default for CurveRecorder {
    fn default() -> Self {
        Self {
            curve: LossCurve::default(),
            window: 0.0,
            count: 0,
            limit: DIVERGENCE_LOSS,
            relative: None,
        }
    }
}

impl CurveRecorder {
    /// Divergence limit `max(DIVERGENCE_LOSS, factor * step-0 loss)`; the
    /// step-0 loss itself only has to be finite.
    pub(crate) fn relative(factor: f64) -> Self {
        Self {
            relative: Some(factor),
            ..Self::default()
        }
    }

    /// `step` is 1-based: the loss of the batch used for update `step`.
    pub(crate) fn record(&mut self, step: usize, loss: f64) -> Result<()> {
        if step == 1 {
            if let Some(factor) = self.relative {
                self.limit = self.limit.max(factor * loss);
            }
        }
        if !loss.is_finite() || loss > self.limit {
            return Err(Error::TrainingFailure { step, loss });
        }
        if step == 1 {
            self.curve.0.push((0, loss));
        }
        self.window += loss;
        self.count += 1;
        if step % LOG_EVERY == 0 {
            self.curve.0.push((step, self.window / self.count as f64));
            self.window = 0.0;
            self.count = 0;
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> LossCurve {
        self.curve
    }
}

/// One flow-matching batch: data, times, prompts, and `eps - x0` targets.
#[derive(Debug, Clone)]
pub struct FmBatch {
    pub xt: Array2<f64>,
    pub ts: Vec<f64>,
    pub prompts: Vec<PromptSpec>,
    pub targets: Array2<f64>,
}

/// Draws a flow-matching batch; each prompt is replaced by the null prompt
/// with probability `dropout`.
pub fn draw_fm_batch<R: Rng + ?Sized>(rng: &mut R, world: &WorldSpec, n: usize, dropout: f64) -> FmBatch {
    let mut xt = Array2::zeros((n, DIM));
    let mut targets = Array2::zeros((n, DIM));
    let mut ts = Vec::with_capacity(n);
    let mut prompts = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(0..world.n_classes());
        let (r, c) = world.class_of(k);
        let m = world.mean(k);
        let t: f64 = rng.random();
        let drop = rng.random::<f64>() < dropout;
        for d in 0..DIM {
            let z: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            let x0 = m[d] + world.std * z;
            xt[[i, d]] = (1.0 - t) * x0 + t * eps;
            targets[[i, d]] = eps - x0;
        }
        ts.push(t);
        prompts.push(if drop { PromptSpec::NULL } else { PromptSpec::new(r, c) });
    }
    FmBatch {
        xt,
        ts,
        prompts,
        targets,
    }
}

/// Flow-matching loss of `model` on a batch (no gradients).
pub fn fm_loss(model: &VelocityModel, batch: &FmBatch) -> Result<f64> {
    let zs = model.conditions(&batch.ts, CondSource::Prompts(&batch.prompts), None)?;
    model.loss(batch.xt.view(), zs.view(), batch.targets.view())
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub teacher: VelocityModel,
    pub weak: VelocityModel,
    pub curve: LossCurve,
    pub teacher_val_loss: f64,
    pub weak_val_loss: f64,
}

impl PretrainOutput {
    /// The weak snapshot should be measurably worse than the teacher.
    pub fn weak_is_weaker(&self) -> bool {
        self.weak_val_loss > self.teacher_val_loss
    }
}

const VALIDATION_SIZE: usize = 8192;

pub fn pretrain(world: &WorldSpec, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    world.validate()?;
    let mut model = VelocityModel::new(world, cfg.model, cfg.seed)?;
    let mut opt = Adam::new(&model.params, cfg.lr);
    // Data stream is independent of the initialization stream.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut recorder = CurveRecorder::default();
    let mut weak = None;
    for step in 1..=cfg.steps {
        let b = draw_fm_batch(&mut rng, world, cfg.batch, cfg.cond_dropout);
        let cond = Conditioning::EndToEnd {
            ts: &b.ts,
            source: CondSource::Prompts(&b.prompts),
            guidance: None,
        };
        let (grad, loss) = model.backward(b.xt.view(), cond, b.targets.view())?;
        recorder.record(step, loss)?;
        opt.step(&mut model.params, &grad);
        if step == cfg.weak_snapshot_step {
            weak = Some(model.clone());
        }
    }
    let weak = match weak {
        Some(w) => w,
        // weak_snapshot_step == 0: the untrained initialization
        None => VelocityModel::new(world, cfg.model, cfg.seed)?,
    };
    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0a11_da7e);
    let val = draw_fm_batch(&mut vrng, world, VALIDATION_SIZE, cfg.cond_dropout);
    let teacher_val_loss = fm_loss(&model, &val)?;
    let weak_val_loss = fm_loss(&weak, &val)?;
    Ok(PretrainOutput {
        teacher: model.clone(),
        weak: weak.clone(),
        curve: recorder.finish(),
        teacher_val_loss,
        weak_val_loss,
    })
}
