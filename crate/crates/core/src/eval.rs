//! Fidelity and adherence metrics, guidance sweeps, the embedding-arithmetic
//! study, and report output (CSV plus SVG plots).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use crate::conditioning::Embedding;
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::model::VelocityModel;
use crate::samplers::{sample, sample_embedded, SamplerSpec, Strategy};
use crate::world::{class_posterior, sample_data, PromptSpec, WorldSpec};

/// `2 E|A-B| - E|A-A'| - E|B-B'|` over all pairs (V-statistic, so the
/// diagonal zeros are included and the value is never negative).
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Domain("energy distance needs nonempty sample sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    let cross = mean_pairwise(a, b);
    let ed = 2.0 * cross - mean_pairwise(a, a) - mean_pairwise(b, b);
    Ok(ed.max(0.0))
}

fn mean_pairwise(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for ra in a.rows() {
        let mut acc = 0.0;
        for rb in b.rows() {
            let sq: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            acc += sq.sqrt();
        }
        total += acc;
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// Mean Bayes posterior, under the full world, of the classes the prompt
/// admits.
pub fn adherence(world: &WorldSpec, prompt: &PromptSpec, samples: ArrayView2<f64>) -> Result<f64> {
    if prompt.is_null() {
        return Err(Error::UndefinedMetric("adherence of the fully masked prompt".into()));
    }
    world.validate_prompt(prompt)?;
    if samples.nrows() == 0 {
        return Err(Error::Domain("adherence needs at least one sample".into()));
    }
    let admitted = world.consistent_classes(prompt)?;
    let mut total = 0.0;
    for row in samples.rows() {
        let post = class_posterior(world, &PromptSpec::NULL, [row[0], row[1]], 0.0)?;
        total += post.iter().filter(|(k, _)| admitted.contains(k)).map(|(_, p)| p).sum::<f64>();
    }
    Ok((total / samples.nrows() as f64).clamp(0.0, 1.0))
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise seed for prompt `j`; shared across strategies and scales so rows
/// differ only by the sampler.
pub fn noise_seed(seed: u64, j: usize) -> u64 {
    mix(seed, j as u64 + 1)
}

/// Seed of the reference draw from the conditional world for prompt `j`.
pub fn reference_seed(seed: u64, j: usize) -> u64 {
    mix(seed ^ 0x5eed_0fda_7a5e, j as u64 + 1)
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub label: String,
    pub strategy: Strategy,
    pub w: f64,
    pub steps: usize,
    /// Total samples in the row, across prompts.
    pub n: usize,
    pub energy_distance: f64,
    pub adherence: f64,
    pub forward_passes: u64,
    pub wall_ms: f64,
    pub samples: Vec<(PromptSpec, Array2<f64>)>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub seeds: Vec<(String, u64)>,
    pub checkpoints: Vec<(String, String)>,
}

pub const REPORT_CSV_HEADER: &str = "label,strategy,w,steps,n,energy_distance,adherence,forward_passes";
pub const TIMING_CSV_HEADER: &str = "label,strategy,w,wall_ms";

/// Models under evaluation: the field that samples and, for w2sd, its weak
/// partner.
#[derive(Clone, Copy)]
pub struct Subject<'a> {
    pub label: &'a str,
    pub field: &'a dyn VelocityField,
    pub weak: Option<&'a dyn VelocityField>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub steps: usize,
    /// Samples per prompt.
    pub n: usize,
    pub seed: u64,
    pub w_max: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            n: 2000,
            seed: 0,
            w_max: 14.0,
        }
    }
}

/// One row per scale in `ws`: energy distance and adherence averaged over
/// `prompts`, forward passes summed.
pub fn guidance_sweep(
    world: &WorldSpec,
    subject: Subject<'_>,
    strategy: Strategy,
    ws: &[f64],
    prompts: &[PromptSpec],
    cfg: &SweepConfig,
) -> Result<Vec<EvalRow>> {
    if ws.is_empty() {
        return Err(Error::Domain("guidance sweep needs at least one w".into()));
    }
    if let Some(w) = ws.iter().find(|w| !(0.0..=cfg.w_max).contains(*w)) {
        return Err(Error::Domain(format!("w = {w} outside [0, {}]", cfg.w_max)));
    }
    if prompts.is_empty() {
        return Err(Error::Domain("guidance sweep needs at least one prompt".into()));
    }
    let references = prompts
        .iter()
        .enumerate()
        .map(|(j, p)| sample_data(world, p, cfg.n, reference_seed(cfg.seed, j)))
        .collect::<Result<Vec<_>>>()?;
    ws.iter()
        .map(|&w| {
            let started = Instant::now();
            let spec = SamplerSpec::new(strategy, cfg.steps, w);
            let mut ed = 0.0;
            let mut adh = 0.0;
            let mut passes = 0;
            let mut samples = Vec::with_capacity(prompts.len());
            for (j, p) in prompts.iter().enumerate() {
                let traj = sample(subject.field, subject.weak, &spec, p, cfg.n, noise_seed(cfg.seed, j))?;
                ed += energy_distance(traj.samples().view(), references[j].view())?;
                adh += adherence(world, p, traj.samples().view())?;
                passes += traj.total_forward_passes;
                samples.push((*p, traj.samples().clone()));
            }
            let n = cfg.n * prompts.len();
            let expected = strategy.passes_per_step() * (cfg.steps * n) as u64;
            if passes != expected {
                return Err(Error::Numerical(format!(
                    "forward-pass accounting mismatch: {passes} vs contract {expected}"
                )));
            }
            Ok(EvalRow {
                label: subject.label.to_string(),
                strategy,
                w,
                steps: cfg.steps,
                n,
                energy_distance: ed / prompts.len() as f64,
                adherence: adh / prompts.len() as f64,
                forward_passes: passes,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                samples,
            })
        })
        .collect()
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.label, r.strategy, r.w, r.steps, r.n, r.energy_distance, r.adherence, r.forward_passes
            );
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = format!("{TIMING_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.3}", r.label, r.strategy, r.w, r.wall_ms);
        }
        out
    }

    pub fn metadata(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.seeds {
            let _ = writeln!(out, "seed.{k} = {v}");
        }
        for (k, v) in &self.checkpoints {
            let _ = writeln!(out, "checkpoint.{k} = {v}");
        }
        out
    }
}

/// A parsed `report.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub label: String,
    pub strategy: Strategy,
    pub w: f64,
    pub steps: usize,
    pub n: usize,
    pub energy_distance: f64,
    pub adherence: f64,
    pub forward_passes: u64,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err(Error::Config("report CSV header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| Error::Config(format!("report CSV line {}: bad {what}", i + 2));
            if f.len() != 8 {
                return Err(bad("field count"));
            }
            Ok(ReportRecord {
                label: f[0].to_string(),
                strategy: f[1].parse().map_err(|_| bad("strategy"))?,
                w: f[2].parse().map_err(|_| bad("w"))?,
                steps: f[3].parse().map_err(|_| bad("steps"))?,
                n: f[4].parse().map_err(|_| bad("n"))?,
                energy_distance: f[5].parse().map_err(|_| bad("energy_distance"))?,
                adherence: f[6].parse().map_err(|_| bad("adherence"))?,
                forward_passes: f[7].parse().map_err(|_| bad("forward_passes"))?,
            })
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes `report.csv`, and for a nonempty report also `timing.csv`,
/// `report_meta.txt`, one scatter plot per row and `sweep.svg`. Returns the
/// written paths.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![write(&dir.join("report.csv"), &report.to_csv())?];
    if report.rows.is_empty() {
        return Ok(written);
    }
    written.push(write(&dir.join("timing.csv"), &report.timing_csv())?);
    written.push(write(&dir.join("report_meta.txt"), &report.metadata())?);
    for r in &report.rows {
        let name = format!("scatter_{}_{}_w{}.svg", r.label, r.strategy, r.w);
        written.push(write(&dir.join(name), &svg::scatter(r))?);
    }
    written.push(write(&dir.join("sweep.svg"), &svg::sweep(&report.rows))?);
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyCondition {
    Kept,
    Masked,
    Full,
    Fused,
}

impl StudyCondition {
    pub const ALL: [StudyCondition; 4] = [Self::Kept, Self::Masked, Self::Full, Self::Fused];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Kept => "kept",
            Self::Masked => "masked",
            Self::Full => "full",
            Self::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyRow {
    pub prompt: PromptSpec,
    pub condition: StudyCondition,
    pub cosine_to_full: f64,
    pub energy_to_full: f64,
    pub adherence_full: f64,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
}

pub const STUDY_CSV_HEADER: &str = "prompt_row,prompt_col,condition,cosine_to_full,energy_to_full,adherence_full";

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{STUDY_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.prompt.row.expect("full prompt"),
                r.prompt.col.expect("full prompt"),
                r.condition.name(),
                r.cosine_to_full,
                r.energy_to_full,
                r.adherence_full
            );
        }
        out
    }

    pub fn rows_for(&self, condition: StudyCondition) -> impl Iterator<Item = &StudyRow> {
        self.rows.iter().filter(move |r| r.condition == condition)
    }
}

/// For every full prompt, generates under the row-only embedding (kept),
/// the col-only embedding (masked), the full embedding, and the sum
/// `kept + masked - null`, all with the same noise.
pub fn embedding_arithmetic_study(
    field: &dyn VelocityField,
    world: &WorldSpec,
    spec: &SamplerSpec,
    n: usize,
    seed: u64,
) -> Result<StudyReport> {
    if spec.strategy.needs_weak() {
        return Err(Error::Config(format!("study strategy {} needs a weak model", spec.strategy)));
    }
    let null = field.null_embedding();
    let mut rows = Vec::new();
    for (j, prompt) in world.full_prompts().iter().enumerate() {
        let kept = field.embed_prompt(&prompt.keep_row())?;
        let masked = field.embed_prompt(&prompt.keep_col())?;
        let full = field.embed_prompt(prompt)?;
        let fused = &(&kept + &masked) - &null;
        let embeddings: [Embedding; 4] = [kept, masked, full.clone(), fused];
        let sets = embeddings
            .iter()
            .map(|c| sample_embedded(field, spec, c, n, noise_seed(seed, j)).map(|t| t.samples().clone()))
            .collect::<Result<Vec<_>>>()?;
        for (i, condition) in StudyCondition::ALL.into_iter().enumerate() {
            rows.push(StudyRow {
                prompt: *prompt,
                condition,
                cosine_to_full: embeddings[i].cosine(&full),
                energy_to_full: energy_distance(sets[i].view(), sets[2].view())?,
                adherence_full: adherence(world, prompt, sets[i].view())?,
            });
        }
    }
    Ok(StudyReport { rows })
}

/// `G(psi(w))` for each `w`, one CSV row per scale.
pub fn guidance_embedding_csv(model: &VelocityModel, ws: &[f64]) -> String {
    let dim = model.conditioner().cond_dim();
    let mut out = String::from("w");
    for i in 0..dim {
        let _ = write!(out, ",g{i}");
    }
    out.push('\n');
    for &w in ws {
        let _ = write!(out, "{w}");
        for v in model.conditioner().encode_scalar(w) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

mod svg {
    use std::fmt::Write as _;

    use super::EvalRow;

    const W: f64 = 480.0;
    const H: f64 = 480.0;
    const PAD: f64 = 40.0;
    const PALETTE: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
    ];

    struct Frame {
        x: (f64, f64),
        y: (f64, f64),
        origin: (f64, f64),
        size: (f64, f64),
    }

    impl Frame {
        fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, origin: (f64, f64), size: (f64, f64)) -> Self {
            let range = |it: &mut dyn Iterator<Item = f64>| {
                let (lo, hi) = it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                if !lo.is_finite() {
                    (0.0, 1.0)
                } else if hi - lo < 1e-12 {
                    (lo - 0.5, hi + 0.5)
                } else {
                    let m = 0.05 * (hi - lo);
                    (lo - m, hi + m)
                }
            };
            Self {
                x: range(&mut xs.clone()),
                y: range(&mut ys.clone()),
                origin,
                size,
            }
        }

        fn map(&self, x: f64, y: f64) -> (f64, f64) {
            let px = self.origin.0 + (x - self.x.0) / (self.x.1 - self.x.0) * self.size.0;
            let py = self.origin.1 + self.size.1 - (y - self.y.0) / (self.y.1 - self.y.0) * self.size.1;
            (px, py)
        }

        fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str) {
            let (x0, y0) = self.origin;
            let (w, h) = self.size;
            let _ = writeln!(out, r##"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444444"/>"##);
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{xlabel} [{:.3}, {:.3}]</text>"#,
                x0 + w / 2.0,
                y0 + h + 16.0,
                self.x.0,
                self.x.1
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="middle" transform="rotate(-90 {} {})">{ylabel} [{:.3}, {:.3}]</text>"#,
                x0 - 10.0,
                y0 + h / 2.0,
                x0 - 10.0,
                y0 + h / 2.0,
                self.y.0,
                self.y.1
            );
        }
    }

    fn open(out: &mut String, width: f64, height: f64, title: &str) {
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="20" font-size="13" text-anchor="middle">{title}</text>"#, width / 2.0);
    }

    pub(super) fn scatter(row: &EvalRow) -> String {
        let all = row.samples.iter().flat_map(|(_, s)| s.rows().into_iter().map(|r| (r[0], r[1])).collect::<Vec<_>>());
        let pts: Vec<(f64, f64)> = all.collect();
        let frame = Frame::new(pts.iter().map(|p| p.0), pts.iter().map(|p| p.1), (PAD, PAD), (W - 2.0 * PAD, H - 2.0 * PAD));
        let mut out = String::new();
        open(&mut out, W, H, &format!("{} {} w={} steps={}", row.label, row.strategy, row.w, row.steps));
        frame.axes(&mut out, "x0", "x1");
        for (j, (prompt, s)) in row.samples.iter().enumerate() {
            let color = PALETTE[j % PALETTE.len()];
            let _ = writeln!(out, r#"<g fill="{color}" fill-opacity="0.5"><title>prompt {prompt}</title>"#);
            for r in s.rows() {
                let (px, py) = frame.map(r[0], r[1]);
                let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5"/>"#);
            }
            out.push_str("</g>\n");
        }
        out.push_str("</svg>\n");
        out
    }

    pub(super) fn sweep(rows: &[EvalRow]) -> String {
        let mut series: Vec<(String, Vec<&EvalRow>)> = Vec::new();
        for r in rows {
            let key = format!("{} {}", r.label, r.strategy);
            match series.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r),
                None => series.push((key, vec![r])),
            }
        }
        let width = 2.0 * W;
        let mut out = String::new();
        open(&mut out, width, H, "guidance sweep");
        let size = (W - 2.0 * PAD, H - 3.0 * PAD);
        let panels: [(&str, fn(&EvalRow) -> f64, f64); 2] = [
            ("adherence", |r| r.adherence, PAD),
            ("energy distance", |r| r.energy_distance, W + PAD),
        ];
        for (name, metric, x0) in panels {
            let frame = Frame::new(rows.iter().map(|r| r.w), rows.iter().map(metric), (x0, PAD), size);
            frame.axes(&mut out, "w", name);
            for (i, (key, pts)) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let mut sorted = pts.clone();
                sorted.sort_by(|a, b| a.w.total_cmp(&b.w));
                let coords: Vec<String> = sorted
                    .iter()
                    .map(|r| {
                        let (px, py) = frame.map(r.w, metric(r));
                        format!("{px:.2},{py:.2}")
                    })
                    .collect();
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{key}</title></polyline>"#,
                    coords.join(" ")
                );
                let ly = PAD + size.1 + 34.0 + 14.0 * i as f64;
                let _ = writeln!(out, r#"<text x="{x0}" y="{ly}" font-size="11" fill="{color}">{key}</text>"#);
            }
        }
        out.push_str("</svg>\n");
        out
    }
}
