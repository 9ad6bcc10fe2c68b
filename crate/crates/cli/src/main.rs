mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use config::{ConfigError, RunConfig};
use teefusion_core::checkpoint::{self, file_digest, param_digest};
use teefusion_core::distill::{distill, DistillOutput};
use teefusion_core::eval::{
    embedding_arithmetic_study, emit_report, guidance_embedding_csv, guidance_sweep, EvalReport, Subject, SweepConfig,
};
use teefusion_core::field::VelocityField;
use teefusion_core::model::{Variant, VelocityModel};
use teefusion_core::pretrain::pretrain;
use teefusion_core::samplers::{sample, write_samples_csv, SamplerSpec, Strategy};
use teefusion_core::world::PromptSpec;

#[derive(Parser)]
#[command(name = "teefusion", version, about = "Guidance distillation lab on a synthetic Gaussian-mixture world")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    force: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher and snapshot the weak model.
    Pretrain,
    /// Distill a single-pass guided student from the teacher.
    Distill {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        teacher_strategy: Option<Strategy>,
    },
    /// Draw samples with one strategy.
    Sample {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        /// `row,col`, with `*` for a masked factor.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Guidance sweep over teacher and student strategies.
    Eval,
    /// Masked-prompt embedding arithmetic study.
    AnalyzeEmbeddings,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Distill { .. } => "distill",
            Command::Sample { .. } => "sample",
            Command::Eval => "eval",
            Command::AnalyzeEmbeddings => "analyze-embeddings",
        }
    }
}

/// Failure carrying the tag and the offending key or input.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    key: String,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for Failure {}

fn fail(kind: &'static str, key: &str, message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind,
        key: key.to_string(),
        message: message.into(),
    }
    .into()
}

fn tag(key: &str) -> impl FnOnce(teefusion_core::Error) -> anyhow::Error + '_ {
    move |e| fail(e.kind(), key, e.to_string())
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure {
            kind: "config",
            key: e.key,
            message: e.message,
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| fail("io", "--config", format!("{}: {e}", path.display())))?;
            RunConfig::parse_text(&text).map_err(Failure::from)?
        }
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| fail("config", "--set", format!("expected KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v).map_err(Failure::from)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Distill { variant, teacher_strategy } => {
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(s) = teacher_strategy {
                cfg.distill.teacher_strategy = *s;
            }
        }
        Command::Sample {
            strategy,
            w,
            steps,
            n,
            prompt,
        } => {
            if let Some(s) = strategy {
                cfg.sampler.strategy = *s;
            }
            if let Some(w) = w {
                cfg.sampler.w = *w;
            }
            if let Some(s) = steps {
                cfg.sampler.steps = *s;
            }
            if let Some(n) = n {
                cfg.sampler.n = *n;
            }
            if let Some(p) = prompt {
                cfg.set("sampler.prompt", p).map_err(Failure::from)?;
            }
        }
        _ => {}
    }
    cfg.sync_seeds();
    cfg.validate().map_err(Failure::from)?;
    Ok(cfg)
}

fn run_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cli.out.join(format!("{}-{}", cli.command.name(), cfg.hash()));
    if dir.exists() {
        if !cli.force {
            return Err(fail(
                "exists",
                "--out",
                format!("run directory {} exists; pass --force to replace it", dir.display()),
            ));
        }
        std::fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text()).context("writing config.txt")?;
    Ok(dir)
}

struct Loaded {
    model: VelocityModel,
    path: PathBuf,
}

fn load(cfg: &RunConfig, key: &str, path: &Option<PathBuf>) -> Result<Loaded> {
    let path = path
        .as_ref()
        .ok_or_else(|| fail("missing-input", key, format!("{key} is required")))?;
    if !path.exists() {
        return Err(fail("missing-input", key, format!("{key}: {} does not exist", path.display())));
    }
    let (model, meta) = checkpoint::load(path).map_err(tag(key))?;
    if meta.world != cfg.world {
        return Err(fail("config", "world", format!("{key} was trained on a different world")));
    }
    Ok(Loaded {
        model,
        path: path.clone(),
    })
}

fn cmd_pretrain(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let started = Instant::now();
    let out = pretrain(&cfg.world, &cfg.pretrain).map_err(tag("pretrain"))?;
    let ms = started.elapsed().as_millis() as u64;
    checkpoint::save(&dir.join("teacher.ckpt"), &out.teacher, &cfg.world, cfg.pretrain.steps, ms).map_err(tag("teacher.ckpt"))?;
    checkpoint::save(&dir.join("weak.ckpt"), &out.weak, &cfg.world, cfg.pretrain.weak_snapshot_step, ms).map_err(tag("weak.ckpt"))?;
    out.curve.write_csv(&dir.join("loss.csv")).map_err(tag("loss.csv"))?;
    let metrics = format!(
        "teacher_val_loss = {}\nweak_val_loss = {}\nteacher_digest = {}\nweak_digest = {}\n",
        out.teacher_val_loss,
        out.weak_val_loss,
        param_digest(&out.teacher),
        param_digest(&out.weak)
    );
    std::fs::write(dir.join("metrics.txt"), metrics).context("writing metrics.txt")?;
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = load(cfg, "paths.teacher", &cfg.paths.teacher)?;
    let weak = if cfg.distill.teacher_strategy.needs_weak() {
        Some(load(cfg, "paths.weak", &cfg.paths.weak)?)
    } else {
        None
    };
    let started = Instant::now();
    let DistillOutput {
        student,
        curve,
        teacher_params,
        student_params,
    } = distill(&teacher.model, weak.as_ref().map(|w| &w.model), &cfg.world, &cfg.distill, cfg.variant).map_err(tag("distill"))?;
    let ms = started.elapsed().as_millis() as u64;
    checkpoint::save(&dir.join("student.ckpt"), &student, &cfg.world, cfg.distill.steps, ms).map_err(tag("student.ckpt"))?;
    curve.write_csv(&dir.join("loss.csv")).map_err(tag("loss.csv"))?;
    let digest = |l: &Loaded| -> Result<serde_json::Value> {
        Ok(json!({
            "path": l.path.display().to_string(),
            "file_sha256": file_digest(&l.path).map_err(tag("paths"))?,
            "param_sha256": param_digest(&l.model),
        }))
    };
    let manifest = json!({
        "command": "distill",
        "config_hash": cfg.hash(),
        "config": cfg.to_text().lines().collect::<Vec<_>>(),
        "seeds": { "seed": cfg.seed, "distill": cfg.distill.seed },
        "variant": cfg.variant.name(),
        "teacher_strategy": cfg.distill.teacher_strategy.name(),
        "teacher": digest(&teacher)?,
        "weak": weak.as_ref().map(digest).transpose()?,
        "teacher_params": teacher_params,
        "student_params": student_params,
        "student_param_sha256": param_digest(&student),
        "metrics": {
            "step0_loss": curve.first(),
            "loss_at_5000": curve.at(5000),
            "final_loss": curve.last(),
        },
    });
    let text = serde_json::to_string_pretty(&manifest).context("encoding manifest")?;
    std::fs::write(dir.join("manifest.json"), text + "\n").context("writing manifest.json")?;
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let prompt = cfg.sampler.prompt;
    cfg.world.validate_prompt(&prompt).map_err(tag("sampler.prompt"))?;
    let spec: SamplerSpec = cfg.sampler_spec();
    let field = if spec.strategy == Strategy::Fused {
        load(cfg, "paths.student", &cfg.paths.student)?
    } else {
        load(cfg, "paths.teacher", &cfg.paths.teacher)?
    };
    let weak = if spec.strategy.needs_weak() {
        Some(load(cfg, "paths.weak", &cfg.paths.weak)?)
    } else {
        None
    };
    let traj = sample(
        &field.model,
        weak.as_ref().map(|w| &w.model as &dyn VelocityField),
        &spec,
        &prompt,
        cfg.sampler.n,
        cfg.seed,
    )
    .map_err(tag("sampler"))?;
    write_samples_csv(&dir.join("samples.csv"), traj.samples(), &prompt, &spec, traj.total_forward_passes).map_err(tag("samples.csv"))?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = load(cfg, "paths.teacher", &cfg.paths.teacher)?;
    let weak = cfg.paths.weak.as_ref().map(|_| load(cfg, "paths.weak", &cfg.paths.weak)).transpose()?;
    let student = cfg.paths.student.as_ref().map(|_| load(cfg, "paths.student", &cfg.paths.student)).transpose()?;
    let sweep = SweepConfig {
        steps: cfg.eval.steps,
        n: cfg.eval.n,
        seed: cfg.seed,
        w_max: cfg.distill.w_max,
    };
    let prompts: Vec<PromptSpec> = cfg.world.full_prompts();
    let mut report = EvalReport {
        seeds: vec![("eval".into(), cfg.seed)],
        ..EvalReport::default()
    };
    let mut add = |label: &str, loaded: &Loaded| {
        report.checkpoints.push((label.to_string(), param_digest(&loaded.model)));
    };
    add("teacher", &teacher);
    if let Some(w) = &weak {
        add("weak", w);
    }
    if let Some(s) = &student {
        add("student", s);
    }
    let teacher_subject = Subject {
        label: "teacher",
        field: &teacher.model,
        weak: weak.as_ref().map(|w| &w.model as &dyn VelocityField),
    };
    let mut runs = vec![(teacher_subject, Strategy::EulerCfg)];
    if weak.is_some() {
        runs.push((teacher_subject, Strategy::W2sdCfg));
    }
    if let Some(s) = &student {
        let label = s.model.variant.as_ref().map_or("student", Variant::name);
        runs.push((
            Subject {
                label,
                field: &s.model,
                weak: None,
            },
            Strategy::Fused,
        ));
    }
    for (subject, strategy) in runs {
        let rows = guidance_sweep(&cfg.world, subject, strategy, &cfg.eval.w_list, &prompts, &sweep).map_err(tag("eval"))?;
        report.rows.extend(rows);
    }
    emit_report(&report, dir).map_err(tag("eval"))?;
    if let Some(s) = &student {
        std::fs::write(dir.join("guidance_embeddings.csv"), guidance_embedding_csv(&s.model, &cfg.eval.embedding_ws))
            .context("writing guidance_embeddings.csv")?;
    }
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (loaded, strategy) = match &cfg.paths.student {
        Some(_) => (load(cfg, "paths.student", &cfg.paths.student)?, Strategy::Fused),
        None => (load(cfg, "paths.teacher", &cfg.paths.teacher)?, Strategy::EulerCfg),
    };
    let spec = SamplerSpec::new(strategy, cfg.eval.steps, cfg.eval.study_w);
    let study = embedding_arithmetic_study(&loaded.model, &cfg.world, &spec, cfg.eval.study_n, cfg.seed).map_err(tag("analyze"))?;
    std::fs::write(dir.join("study.csv"), study.to_csv()).context("writing study.csv")?;
    std::fs::write(
        dir.join("guidance_embeddings.csv"),
        guidance_embedding_csv(&loaded.model, &cfg.eval.embedding_ws),
    )
    .context("writing guidance_embeddings.csv")?;
    Ok(())
}

fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve(cli)?;
    let dir = run_dir(cli, &cfg)?;
    match cli.command {
        Command::Pretrain => cmd_pretrain(&cfg, &dir)?,
        Command::Distill { .. } => cmd_distill(&cfg, &dir)?,
        Command::Sample { .. } => cmd_sample(&cfg, &dir)?,
        Command::Eval => cmd_eval(&cfg, &dir)?,
        Command::AnalyzeEmbeddings => cmd_analyze(&cfg, &dir)?,
    }
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, key) = match e.downcast_ref::<Failure>() {
                Some(f) => (f.kind, f.key.as_str()),
                None => ("io", "-"),
            };
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error kind={kind} key={key} message={message:?}");
            ExitCode::FAILURE
        }
    }
}
