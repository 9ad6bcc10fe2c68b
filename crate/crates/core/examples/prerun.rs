//! Default-seed pre-run that fixes the acceptance thresholds.
//!
//! Runs the default pipeline (pretrain, then w2sd-cfg distillation into a
//! TeEFusion student) and writes `tests/data/acceptance_manifest.txt`.
//!
//! ```text
//! cargo run --release -p teefusion-core --example prerun
//! ```

use std::fmt::Write as _;
use std::time::Instant;

use teefusion_core::checkpoint::{param_digest, sha256_hex};
use teefusion_core::distill::{distill, guidance_sensitivity, probe_mse, DistillConfig};
use teefusion_core::eval::{embedding_arithmetic_study, guidance_sweep, StudyCondition, Subject, SweepConfig};
use teefusion_core::model::Variant;
use teefusion_core::pretrain::{pretrain, PretrainConfig};
use teefusion_core::samplers::{SamplerSpec, Strategy};
use teefusion_core::world::WorldSpec;

const PROBE_WS: [f64; 4] = [2.0, 5.0, 8.0, 14.0];
const FLOOR_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn main() -> teefusion_core::Result<()> {
    let world = WorldSpec::default();
    let mut out = String::from("# acceptance manifest, written by the prerun example\nmanifest.version = 1\nseed = 0\n");
    let clock = Instant::now();

    let pre = pretrain(&world, &PretrainConfig::default())?;
    eprintln!("pretrain done in {:?}", clock.elapsed());
    let dcfg = DistillConfig::default();
    let d = distill(&pre.teacher, Some(&pre.weak), &world, &dcfg, Variant::Teefusion)?;
    eprintln!("distill done in {:?}", clock.elapsed());

    let step0 = d.curve.first().expect("curve");
    let at5k = d.curve.at(5000).expect("5k entry");
    let last = d.curve.last().expect("curve");
    let _ = writeln!(out, "pretrain.teacher_val_loss = {}", pre.teacher_val_loss);
    let _ = writeln!(out, "pretrain.weak_val_loss = {}", pre.weak_val_loss);
    let _ = writeln!(out, "distill.step0_loss = {step0}");
    let _ = writeln!(out, "distill.loss_at_5000 = {at5k}");
    let _ = writeln!(out, "distill.final_loss = {last}");
    let _ = writeln!(out, "distill.final_over_step0 = {}", last / step0);
    let _ = writeln!(out, "distill.at5000_over_final = {}", at5k / last);

    let probes = probe_mse(&d.student, &pre.teacher, Some(&pre.weak), &world, &dcfg, &PROBE_WS, 1000, 0xfeed_beef)?;
    for (w, mse) in &probes {
        let _ = writeln!(out, "probe.mse.w{w} = {mse}");
    }
    let probe_mean = mean(&probes.iter().map(|p| p.1).collect::<Vec<_>>());
    let _ = writeln!(out, "probe.mse_mean = {probe_mean}");
    let _ = writeln!(out, "probe.mse_threshold = {}", 1.25 * probe_mean);
    let _ = writeln!(
        out,
        "probe.sensitivity_w2_w14 = {}",
        guidance_sensitivity(&d.student, &world, 2.0, 14.0, 1000, 0xfeed_beef)?
    );

    let subject = Subject {
        label: "teefusion",
        field: &d.student,
        weak: None,
    };
    let mut diffs = Vec::new();
    for seed in FLOOR_SEEDS {
        let cfg = SweepConfig {
            seed,
            ..SweepConfig::default()
        };
        let rows = guidance_sweep(&world, subject, Strategy::Fused, &[2.0, 8.0], &world.full_prompts(), &cfg)?;
        let _ = writeln!(out, "sensitivity.seed{seed}.adherence_w2 = {}", rows[0].adherence);
        let _ = writeln!(out, "sensitivity.seed{seed}.adherence_w8 = {}", rows[1].adherence);
        diffs.push(rows[1].adherence - rows[0].adherence);
    }
    let _ = writeln!(out, "sensitivity.diff_mean = {}", mean(&diffs));
    let _ = writeln!(out, "sensitivity.noise_floor = {}", 3.0 * std(&diffs));
    eprintln!("sensitivity done in {:?}", clock.elapsed());

    let spec = SamplerSpec::new(Strategy::Fused, 32, 5.0);
    let study = embedding_arithmetic_study(&d.student, &world, &spec, 1000, 0)?;
    let fused: Vec<_> = study.rows_for(StudyCondition::Fused).collect();
    let adh = mean(&fused.iter().map(|r| r.adherence_full).collect::<Vec<_>>());
    let ed = fused.iter().map(|r| r.energy_to_full).fold(0.0, f64::max);
    let _ = writeln!(out, "study.fused_adherence_mean = {adh}");
    let _ = writeln!(out, "study.adherence_margin = {}", 0.5 * (adh - 0.25));
    let _ = writeln!(out, "study.fused_energy_max = {ed}");
    let _ = writeln!(out, "study.energy_threshold = {}", (2.0 * ed).max(1e-3));

    let _ = writeln!(out, "digest.teacher = {}", param_digest(&pre.teacher));
    let _ = writeln!(out, "digest.weak = {}", param_digest(&pre.weak));
    let _ = writeln!(out, "digest.student = {}", param_digest(&d.student));
    let _ = writeln!(out, "digest.pretrain_loss_csv = {}", sha256_hex(pre.curve.to_csv().as_bytes()));
    let _ = writeln!(out, "digest.distill_loss_csv = {}", sha256_hex(d.curve.to_csv().as_bytes()));

    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/acceptance_manifest.txt");
    std::fs::create_dir_all(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data")).expect("data dir");
    std::fs::write(path, &out).expect("write manifest");
    eprintln!("wrote {path} after {:?}", clock.elapsed());
    print!("{out}");
    Ok(())
}
