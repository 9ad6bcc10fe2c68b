//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown or repeated keys are rejected. `#`
//! starts a comment. Lists are comma separated; an empty path means unset.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use teefusion_core::checkpoint::sha256_hex;
use teefusion_core::distill::DistillConfig;
use teefusion_core::model::{ModelConfig, Variant};
use teefusion_core::pretrain::PretrainConfig;
use teefusion_core::samplers::{SamplerSpec, Strategy};
use teefusion_core::world::{PromptSpec, WorldSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Keys with their one-line documentation, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for every stage"),
    ("world.rows", "row-factor values"),
    ("world.cols", "col-factor values"),
    ("world.spacing", "grid spacing of the mode means"),
    ("world.std", "isotropic std of each mode"),
    ("model.embed_dim", "prompt embedding width"),
    ("model.sinusoid_dim", "sinusoidal feature width (even)"),
    ("model.cond_dim", "condition vector width"),
    ("model.hidden", "trunk hidden width"),
    ("model.hidden_layers", "trunk hidden layers"),
    ("pretrain.steps", "teacher training steps"),
    ("pretrain.batch", "teacher batch size"),
    ("pretrain.lr", "teacher Adam learning rate"),
    ("pretrain.cond_dropout", "probability of dropping each prompt factor"),
    ("pretrain.weak_snapshot_step", "step at which the weak model is snapshotted"),
    ("distill.steps", "student training steps"),
    ("distill.batch", "student batch size"),
    ("distill.lr", "student Adam learning rate"),
    ("distill.w_min", "lower bound of the sampled guidance scale"),
    ("distill.w_max", "upper bound of the sampled guidance scale"),
    ("distill.teacher_strategy", "euler-cfg | z-sampling-cfg | w2sd-cfg"),
    ("distill.variant", "teefusion | distillcfg"),
    ("distill.reflection_dt", "step used inside reflection targets"),
    ("distill.w_inversion", "inversion guidance for z-sampling targets"),
    ("sampler.strategy", "euler | euler-cfg | z-sampling-cfg | w2sd-cfg | fused"),
    ("sampler.steps", "sampling steps"),
    ("sampler.w", "guidance scale"),
    ("sampler.w_inversion", "inversion guidance for z-sampling"),
    ("sampler.n", "number of samples"),
    ("sampler.prompt", "row,col with * for a masked factor"),
    ("eval.n", "samples per prompt in the sweep"),
    ("eval.steps", "sampling steps in the sweep"),
    ("eval.w_list", "guidance scales in the sweep"),
    ("eval.study_n", "samples per condition in the embedding study"),
    ("eval.study_w", "guidance scale used by the embedding study"),
    ("eval.embedding_ws", "scales whose G(psi(w)) vectors are dumped"),
    ("paths.teacher", "teacher checkpoint"),
    ("paths.weak", "weak checkpoint"),
    ("paths.student", "student checkpoint"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    pub strategy: Strategy,
    pub steps: usize,
    pub w: f64,
    pub w_inversion: f64,
    pub n: usize,
    pub prompt: PromptSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub n: usize,
    pub steps: usize,
    pub w_list: Vec<f64>,
    pub study_n: usize,
    pub study_w: f64,
    pub embedding_ws: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub teacher: Option<PathBuf>,
    pub weak: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub variant: Variant,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
            variant: Variant::Teefusion,
            sampler: SamplerSection {
                strategy: Strategy::EulerCfg,
                steps: 32,
                w: 5.0,
                w_inversion: 0.0,
                n: 1000,
                prompt: PromptSpec::new(0, 0),
            },
            eval: EvalSection {
                n: 2000,
                steps: 32,
                w_list: vec![2.0, 5.0, 8.0, 11.0, 14.0],
                study_n: 1000,
                study_w: 5.0,
                embedding_ws: (0..=14).map(f64::from).collect(),
            },
            paths: Paths::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| err(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn list(ws: &[f64]) -> String {
    ws.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "world.rows" => self.world.rows = parse(key, v)?,
            "world.cols" => self.world.cols = parse(key, v)?,
            "world.spacing" => self.world.spacing = parse(key, v)?,
            "world.std" => self.world.std = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.sinusoid_dim" => self.model.sinusoid_dim = parse(key, v)?,
            "model.cond_dim" => self.model.cond_dim = parse(key, v)?,
            "model.hidden" => self.model.hidden = parse(key, v)?,
            "model.hidden_layers" => self.model.hidden_layers = parse(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.cond_dropout" => self.pretrain.cond_dropout = parse(key, v)?,
            "pretrain.weak_snapshot_step" => self.pretrain.weak_snapshot_step = parse(key, v)?,
            "distill.steps" => self.distill.steps = parse(key, v)?,
            "distill.batch" => self.distill.batch = parse(key, v)?,
            "distill.lr" => self.distill.lr = parse(key, v)?,
            "distill.w_min" => self.distill.w_min = parse(key, v)?,
            "distill.w_max" => self.distill.w_max = parse(key, v)?,
            "distill.teacher_strategy" => self.distill.teacher_strategy = parse(key, v)?,
            "distill.variant" => self.variant = parse(key, v)?,
            "distill.reflection_dt" => self.distill.reflection_dt = parse(key, v)?,
            "distill.w_inversion" => self.distill.w_inversion = parse(key, v)?,
            "sampler.strategy" => self.sampler.strategy = parse(key, v)?,
            "sampler.steps" => self.sampler.steps = parse(key, v)?,
            "sampler.w" => self.sampler.w = parse(key, v)?,
            "sampler.w_inversion" => self.sampler.w_inversion = parse(key, v)?,
            "sampler.n" => self.sampler.n = parse(key, v)?,
            "sampler.prompt" => self.sampler.prompt = parse(key, v)?,
            "eval.n" => self.eval.n = parse(key, v)?,
            "eval.steps" => self.eval.steps = parse(key, v)?,
            "eval.w_list" => self.eval.w_list = parse_list(key, v)?,
            "eval.study_n" => self.eval.study_n = parse(key, v)?,
            "eval.study_w" => self.eval.study_w = parse(key, v)?,
            "eval.embedding_ws" => self.eval.embedding_ws = parse_list(key, v)?,
            "paths.teacher" => self.paths.teacher = parse_path(v),
            "paths.weak" => self.paths.weak = parse_path(v),
            "paths.student" => self.paths.student = parse_path(v),
            _ => return Err(err(key, "unknown config key")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "world.rows" => self.world.rows.to_string(),
            "world.cols" => self.world.cols.to_string(),
            "world.spacing" => self.world.spacing.to_string(),
            "world.std" => self.world.std.to_string(),
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "model.sinusoid_dim" => self.model.sinusoid_dim.to_string(),
            "model.cond_dim" => self.model.cond_dim.to_string(),
            "model.hidden" => self.model.hidden.to_string(),
            "model.hidden_layers" => self.model.hidden_layers.to_string(),
            "pretrain.steps" => self.pretrain.steps.to_string(),
            "pretrain.batch" => self.pretrain.batch.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "pretrain.cond_dropout" => self.pretrain.cond_dropout.to_string(),
            "pretrain.weak_snapshot_step" => self.pretrain.weak_snapshot_step.to_string(),
            "distill.steps" => self.distill.steps.to_string(),
            "distill.batch" => self.distill.batch.to_string(),
            "distill.lr" => self.distill.lr.to_string(),
            "distill.w_min" => self.distill.w_min.to_string(),
            "distill.w_max" => self.distill.w_max.to_string(),
            "distill.teacher_strategy" => self.distill.teacher_strategy.to_string(),
            "distill.variant" => self.variant.name().to_string(),
            "distill.reflection_dt" => self.distill.reflection_dt.to_string(),
            "distill.w_inversion" => self.distill.w_inversion.to_string(),
            "sampler.strategy" => self.sampler.strategy.to_string(),
            "sampler.steps" => self.sampler.steps.to_string(),
            "sampler.w" => self.sampler.w.to_string(),
            "sampler.w_inversion" => self.sampler.w_inversion.to_string(),
            "sampler.n" => self.sampler.n.to_string(),
            "sampler.prompt" => self.sampler.prompt.to_string(),
            "eval.n" => self.eval.n.to_string(),
            "eval.steps" => self.eval.steps.to_string(),
            "eval.w_list" => list(&self.eval.w_list),
            "eval.study_n" => self.eval.study_n.to_string(),
            "eval.study_w" => self.eval.study_w.to_string(),
            "eval.embedding_ws" => list(&self.eval.embedding_ws),
            "paths.teacher" => path(&self.paths.teacher),
            "paths.weak" => path(&self.paths.weak),
            "paths.student" => path(&self.paths.student),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(&format!("line{}", i + 1), "expected `key = value`"));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(key, format!("repeated on line {}", i + 1)));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Fully resolved config, one `key = value` per line in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// First 12 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())[..12].to_string()
    }

    /// Keeps the stage seeds tied to the master seed.
    pub fn sync_seeds(&mut self) {
        self.pretrain.seed = self.seed;
        self.distill.seed = self.seed;
        self.pretrain.model = self.model;
    }

    pub fn sampler_spec(&self) -> SamplerSpec {
        SamplerSpec {
            w_inversion: self.sampler.w_inversion,
            ..SamplerSpec::new(self.sampler.strategy, self.sampler.steps, self.sampler.w)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world.validate().map_err(|e| err("world", e.to_string()))?;
        self.pretrain.validate().map_err(|e| err("pretrain", e.to_string()))?;
        self.distill.validate().map_err(|e| err("distill", e.to_string()))?;
        self.sampler_spec().validate().map_err(|e| err("sampler", e.to_string()))?;
        if self.sampler.n == 0 {
            return Err(err("sampler.n", "must be >= 1"));
        }
        if self.eval.n == 0 || self.eval.study_n == 0 {
            return Err(err("eval.n", "eval.n and eval.study_n must be >= 1"));
        }
        if self.eval.w_list.is_empty() {
            return Err(err("eval.w_list", "must not be empty"));
        }
        Ok(())
    }
}
