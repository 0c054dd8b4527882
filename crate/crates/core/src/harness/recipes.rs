//! Canned experiment grids. Each recipe runs a fixed set of configs into
//! run-private subdirectories and reduces them to one comparative CSV plus
//! JSON verdicts. `quick` shrinks the expensive network recipes for smoke
//! testing; the sandbox recipes are cheap enough to always run in full.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use crate::dataset::Mixture2d;
use crate::denoiser::Cond;
use crate::generators::Generator;
use crate::optim::SgdConfig;
use crate::oracle::{cfg_fixed_point, mc_sds_root, median_heuristic, mmd};
use crate::priors::{NoiseSharing, PriorConfig, Variant};
use crate::schedule::TimestepPolicy;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::checkpoint::load_theta;
use super::config::{
    DenoiserSpec, ExperimentKind, Precision, RunConfig, ScheduleConfig,
};
use super::metrics::{verdict, write_json, write_table_csv};
use super::runs::{execute, preset_sandbox};

pub const RECIPES: [&str; 4] = [
    "w-sweep",
    "variant-compare",
    "sandbox-acceptance",
    "editing-demo",
];

/// Sandbox convergence preset: the equal-variance fixed point is
/// t-independent, so sampling the high-noise band is valid and keeps the
/// constant-rate SGD noise floor well under the acceptance tolerances.
pub const SANDBOX_POLICY: TimestepPolicy = TimestepPolicy { lo: 0.5, hi: 0.98 };
pub const SANDBOX_THETA_LR: f64 = 3e-2;
pub const SANDBOX_STATE_LR: f64 = 5e-2;
pub const SANDBOX_STEPS: usize = 25_000;

/// Variant-compare (2-D mixture) preset.
pub const COMPARE_TRAIN_STEPS: usize = 5_000;
pub const COMPARE_DISTILL_STEPS: usize = 3_000;
pub const COMPARE_PARTICLES: usize = 256;
pub const COMPARE_W: f64 = 100.0;
pub const COMPARE_THETA_LR: f64 = 3e-2;
/// Embedding rate: the 2-D reference value 1e-4 scaled up for plain SGD on
/// the toy embedding.
pub const COMPARE_STATE_LR: f64 = 3e-2;

#[derive(Debug, Clone)]
pub struct RecipeOutcome {
    pub name: String,
    pub verdicts: Vec<(String, bool)>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub details: serde_json::Value,
}

impl RecipeOutcome {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|(_, ok)| *ok)
    }
}

pub fn recipe_suite(name: &str, out_dir: &Path, quick: bool) -> Result<RecipeOutcome> {
    std::fs::create_dir_all(out_dir)?;
    match name {
        "w-sweep" => w_sweep(out_dir, quick),
        "variant-compare" => variant_compare(out_dir, quick),
        "sandbox-acceptance" => sandbox_acceptance(out_dir, quick),
        "editing-demo" => editing_demo(out_dir),
        other => Err(Error::Config(format!(
            "unknown recipe `{other}` (expected one of {RECIPES:?})"
        ))),
    }
}

fn finish(
    name: &str,
    out_dir: &Path,
    header: &str,
    rows: Vec<Vec<String>>,
    verdicts: Vec<(String, bool)>,
    details: serde_json::Value,
) -> Result<RecipeOutcome> {
    let csv_path = out_dir.join(format!("{name}.csv"));
    write_table_csv(&csv_path, header, &rows)?;
    let json_path = out_dir.join(format!("{name}.json"));
    let report = json!({
        "recipe": name,
        "verdicts": verdicts
            .iter()
            .map(|(k, ok)| json!({"check": k, "verdict": verdict(*ok)}))
            .collect::<Vec<_>>(),
        "all_pass": verdicts.iter().all(|(_, ok)| *ok),
        "details": details,
    });
    write_json(&json_path, &report)?;
    Ok(RecipeOutcome {
        name: name.into(),
        verdicts,
        csv_path,
        json_path,
        details: report,
    })
}

/// CFG-weight ablation on the unequal-variance sandbox: analytic fixed
/// points against MC roots, displacement growing with w up to the
/// infinite-w limit.
fn w_sweep(out_dir: &Path, quick: bool) -> Result<RecipeOutcome> {
    let sched = Arc::new(ScheduleConfig::default().build()?);
    let sb = preset_sandbox("unequal-variance", sched)?;
    let t = 500;
    let n = if quick { 20_000 } else { 100_000 };
    // 0.05 budgets the MC root error at n = 1e5; scale as 1/sqrt(n) elsewhere.
    let tol = 0.05 * (100_000.0 / n as f64).sqrt();
    let ws = [30.0, 100.0, 1000.0, f64::INFINITY];
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    let mut displacements = Vec::new();
    for w in ws {
        let analytic = cfg_fixed_point(&sb, w, Some(t))?.data()[0];
        let (root, stderr) = mc_sds_root(&sb, w, Some(t), n, 7, analytic - 2.0, analytic + 2.0)?;
        let ok = (analytic - root).abs() < tol;
        let disp = (analytic - sb.mu_y.data()[0]).abs();
        displacements.push(disp);
        let label = if w.is_infinite() { "inf".into() } else { w.to_string() };
        verdicts.push((format!("fixed point w={label}"), ok));
        rows.push(vec![
            label,
            analytic.to_string(),
            root.to_string(),
            stderr.to_string(),
            disp.to_string(),
        ]);
    }
    let monotone = displacements.windows(2).all(|p| p[0] < p[1]);
    verdicts.push(("displacement strictly increasing in w".into(), monotone));
    finish(
        "w-sweep",
        out_dir,
        "w,analytic,mc_estimate,stderr,displacement",
        rows,
        verdicts,
        json!({"t": t, "mc_samples": n}),
    )
}

fn sandbox_distill(
    out_dir: &Path,
    label: &str,
    variant: Variant,
    w: f64,
    steps: usize,
) -> Result<f64> {
    let cfg = RunConfig {
        kind: ExperimentKind::Distill,
        precision: Precision::F64,
        seed: 11,
        steps,
        out_dir: out_dir.join(label),
        denoiser: DenoiserSpec::Sandbox {
            means: vec![vec![1.0], vec![0.0]],
            vars: vec![1.0, 1.0],
        },
        generator: Generator::identity(&[1, 1]),
        prior: PriorConfig {
            variant,
            w,
            target: Cond::Class(0),
            policy: SANDBOX_POLICY,
            noise_sharing: NoiseSharing::Fresh,
            seed: 11,
            theta_opt: SgdConfig {
                lr: SANDBOX_THETA_LR,
                ..Default::default()
            },
            state_lr: SANDBOX_STATE_LR,
            ..PriorConfig::default()
        },
        ..RunConfig::default()
    };
    execute(&cfg)?;
    Ok(load_theta::<f64>(&cfg.out_dir.join("theta.ckpt"))?.data()[0])
}

/// The guidance-gap demonstration: SDS lands on the w-scaled fixed point,
/// LODS-embedding returns to the class mean.
fn sandbox_acceptance(out_dir: &Path, quick: bool) -> Result<RecipeOutcome> {
    let steps = SANDBOX_STEPS;
    let n_mc = if quick { 5_000 } else { 100_000 };
    let sched = Arc::new(ScheduleConfig::default().build()?);
    let sb = preset_sandbox("equal-variance", Arc::clone(&sched))?;
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    for w in [1.0, 7.5, 100.0] {
        let target = cfg_fixed_point(&sb, w, None)?.data()[0];
        let (mc_root, _) = mc_sds_root(&sb, w, None, n_mc, 13, target - 2.0, target + 2.0)?;
        let theta = sandbox_distill(out_dir, &format!("sds-w{w}"), Variant::Sds, w, steps)?;
        let err = (theta - target).abs();
        let ok = err < 0.05 && (mc_root - target).abs() < 0.05;
        verdicts.push((format!("sds w={w} hits closed form"), ok));
        rows.push(vec![
            "sds".into(),
            w.to_string(),
            target.to_string(),
            mc_root.to_string(),
            theta.to_string(),
            err.to_string(),
        ]);
    }
    let theta = sandbox_distill(
        out_dir,
        "lods-w7.5",
        Variant::LodsEmbedding,
        7.5,
        steps,
    )?;
    let err = (theta - 1.0).abs();
    verdicts.push(("lods_embedding w=7.5 returns to mu_y".into(), err < 0.1));
    rows.push(vec![
        "lods_embedding".into(),
        "7.5".into(),
        "1".into(),
        String::new(),
        theta.to_string(),
        err.to_string(),
    ]);
    finish(
        "sandbox-acceptance",
        out_dir,
        "variant,w,target,mc_root,theta,abs_err",
        rows,
        verdicts,
        json!({"steps": steps, "policy": {"lo": SANDBOX_POLICY.lo, "hi": SANDBOX_POLICY.hi}}),
    )
}

/// Desk-scale variant comparison on the 2-class mixture: train a network
/// denoiser, distill a particle cloud under SDS and LODS-embedding at the
/// same w and step count, score both against class samples with MMD.
fn variant_compare(out_dir: &Path, quick: bool) -> Result<RecipeOutcome> {
    let (train_steps, distill_steps, particles) = if quick {
        (600, 200, 64)
    } else {
        (COMPARE_TRAIN_STEPS, COMPARE_DISTILL_STEPS, COMPARE_PARTICLES)
    };
    let seed = 1;
    let train_dir = out_dir.join("train");
    let model_path = train_dir.join("model.ckpt");
    if !model_path.exists() {
        let train_cfg = RunConfig {
            kind: ExperimentKind::Train,
            precision: Precision::F32,
            seed,
            steps: train_steps,
            out_dir: train_dir,
            ..RunConfig::default()
        };
        execute(&train_cfg)?;
    }

    let distill_cfg = |label: &str, variant: Variant| RunConfig {
        kind: ExperimentKind::Distill,
        precision: Precision::F32,
        seed,
        steps: distill_steps,
        out_dir: out_dir.join(label),
        denoiser: DenoiserSpec::Checkpoint {
            path: model_path.clone(),
        },
        generator: Generator::identity(&[particles, 2]),
        prior: PriorConfig {
            variant,
            w: COMPARE_W,
            target: Cond::Class(0),
            theta_opt: SgdConfig {
                lr: COMPARE_THETA_LR,
                ..Default::default()
            },
            state_lr: COMPARE_STATE_LR,
            ..PriorConfig::default()
        },
        ..RunConfig::default()
    };

    let mix = Mixture2d::two_class_two_mode();
    let refs = mix.sample_class::<f64>(0, particles, 1234)?;
    let mut rows = Vec::new();
    let mut mmds = Vec::new();
    for (label, variant) in [("sds", Variant::Sds), ("lods", Variant::LodsEmbedding)] {
        let cfg = distill_cfg(label, variant);
        execute(&cfg)?;
        let theta = load_theta::<f32>(&cfg.out_dir.join("theta.ckpt"))?;
        let pts = Tensor::from_f64_slice(&theta.to_f64_vec(), &[particles, 2])?;
        let bw = median_heuristic(&pts, &refs)?;
        let m = mmd(&pts, &refs, bw)?;
        mmds.push(m);
        rows.push(vec![
            variant.name().into(),
            COMPARE_W.to_string(),
            distill_steps.to_string(),
            m.to_string(),
            bw.to_string(),
        ]);
    }
    let verdicts = vec![
        ("lods mmd <= sds mmd".into(), mmds[1] <= mmds[0]),
        ("lods mmd < 0.1".into(), mmds[1] < 0.1),
    ];
    finish(
        "variant-compare",
        out_dir,
        "variant,w,steps,mmd,bandwidth",
        rows,
        verdicts,
        json!({"sds_mmd": mmds[0], "lods_mmd": mmds[1], "quick": quick,
               "train_steps": train_steps, "particles": particles}),
    )
}

/// DDS editing legs on the sandbox: identical source/target must not move
/// theta at all; a null-source, class-target run walks theta to
/// `x_src + w (mu_y - mu_null)`.
fn editing_demo(out_dir: &Path) -> Result<RecipeOutcome> {
    let w = 2.0;
    let base = |label: &str, source_cond: Cond, steps: usize| RunConfig {
        kind: ExperimentKind::Distill,
        precision: Precision::F64,
        seed: 3,
        steps,
        out_dir: out_dir.join(label),
        denoiser: DenoiserSpec::Sandbox {
            means: vec![vec![1.0], vec![0.0]],
            vars: vec![1.0, 1.0],
        },
        generator: Generator::identity(&[1, 1]),
        dds: super::config::DdsSection {
            source_checkpoint: None,
            source_cond,
        },
        prior: PriorConfig {
            variant: Variant::Dds,
            w,
            target: Cond::Class(0),
            policy: SANDBOX_POLICY,
            theta_opt: SgdConfig {
                lr: SANDBOX_THETA_LR,
                ..Default::default()
            },
            seed: 3,
            ..PriorConfig::default()
        },
        ..RunConfig::default()
    };

    // leg 1: source == target observable and condition, exactly stationary
    let same = base("same-source", Cond::Class(0), 500);
    execute(&same)?;
    let theta0 = same.generator.init_theta::<f64>(same.seed).data()[0];
    let theta_same = load_theta::<f64>(&same.out_dir.join("theta.ckpt"))?.data()[0];
    let zero_change = theta_same == theta0;

    // leg 2: edit from the null condition toward class 0
    let edit = base("edit", Cond::Null, SANDBOX_STEPS);
    execute(&edit)?;
    let theta_edit = load_theta::<f64>(&edit.out_dir.join("theta.ckpt"))?.data()[0];
    let target = theta0 + w * (1.0 - 0.0);
    let err = (theta_edit - target).abs();

    let verdicts = vec![
        ("identical source/target leaves theta unchanged".into(), zero_change),
        ("edit converges to source + w * mean shift".into(), err < 0.05),
    ];
    let rows = vec![
        vec![
            "same-source".into(),
            theta0.to_string(),
            theta_same.to_string(),
            theta0.to_string(),
            (theta_same - theta0).abs().to_string(),
        ],
        vec![
            "edit".into(),
            theta0.to_string(),
            theta_edit.to_string(),
            target.to_string(),
            err.to_string(),
        ],
    ];
    finish(
        "editing-demo",
        out_dir,
        "leg,theta0,theta_final,target,abs_err",
        rows,
        verdicts,
        json!({"w": w}),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join("lodslab-recipe-tests")
            .join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).expect("temp dir");
        dir
    }

    #[test]
    fn unknown_recipe_rejected() {
        assert!(recipe_suite("nope", &tmp_dir("unknown"), true).is_err());
    }

    #[test]
    fn w_sweep_quick_reports_monotone_displacement() {
        let out = recipe_suite("w-sweep", &tmp_dir("sweep"), true).unwrap();
        assert!(out.all_pass(), "verdicts: {:?}", out.verdicts);
        let text = std::fs::read_to_string(&out.csv_path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(4).unwrap().starts_with("inf,"));
    }

    #[test]
    fn variant_compare_quick_produces_report() {
        let out = recipe_suite("variant-compare", &tmp_dir("compare"), true).unwrap();
        // quick mode checks plumbing, not the ordering verdict
        assert_eq!(out.verdicts.len(), 2);
        assert!(out.csv_path.exists() && out.json_path.exists());
        let text = std::fs::read_to_string(&out.csv_path).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
