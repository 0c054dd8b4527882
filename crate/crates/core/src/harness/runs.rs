//! Experiment drivers behind the CLI: each takes a full `RunConfig`,
//! writes its artifacts under `out_dir`, and returns the summary. All
//! randomness is keyed by the top-level seed, which also overrides the
//! prior's seed so one value pins the whole run.

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde_json::json;

use crate::dataset::{disk_image, Mixture2d};
use crate::denoiser::{make_analytic, make_network, train_denoiser, Denoiser, TrainConfig};
use crate::oracle::{cfg_fixed_point, mc_sds_root, median_heuristic, mmd, GaussianSandbox};
use crate::priors::{lods_run, RunState, Variant};
use crate::rng::{lane, stream};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

use super::checkpoint::{load_model, load_theta, save_checkpoint, save_model, save_theta};
use super::config::{
    DatasetSpec, DenoiserSpec, ExperimentKind, OracleSection, Precision, RunConfig,
};
use super::image::export_image;
use super::metrics::{
    verdict, write_json, write_loss_csv, write_metrics_csv, write_table_csv, OracleReport,
};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: serde_json::Value,
    pub artifacts: Vec<PathBuf>,
}

pub fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut outcome = match cfg.precision {
        Precision::F32 => dispatch::<f32>(cfg),
        Precision::F64 => dispatch::<f64>(cfg),
    }?;
    let summary_path = cfg.out_dir.join("summary.json");
    write_json(&summary_path, &outcome.summary)?;
    outcome.artifacts.push(summary_path);
    Ok(outcome)
}

fn dispatch<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome> {
    match cfg.kind {
        ExperimentKind::Train => run_train::<T>(cfg),
        ExperimentKind::Distill => run_distill::<T>(cfg),
        ExperimentKind::Oracle => run_oracle(cfg),
        ExperimentKind::Eval => run_eval::<T>(cfg),
        ExperimentKind::Export => run_export::<T>(cfg),
    }
}

pub fn build_denoiser<T: Scalar>(cfg: &RunConfig) -> Result<Denoiser<T>> {
    match &cfg.denoiser {
        DenoiserSpec::Fresh { net } => Ok(make_network(
            *net,
            Arc::new(cfg.schedule.build()?),
            cfg.seed,
        )),
        DenoiserSpec::Checkpoint { path } => load_model(path),
        DenoiserSpec::Sandbox { means, vars } => {
            let cast = |m: &Vec<f64>| Tensor::from_f64_slice(m, &[m.len()]);
            let mut class_means = Vec::with_capacity(means.len() - 1);
            for m in &means[..means.len() - 1] {
                class_means.push(cast(m)?);
            }
            let null_mean = cast(&means[means.len() - 1])?;
            let n = vars.len();
            make_analytic(
                class_means,
                vars[..n - 1].to_vec(),
                null_mean,
                vars[n - 1],
                Arc::new(cfg.schedule.build()?),
            )
        }
    }
}

/// Materialize the dataset: rows, labels, class count.
pub fn build_dataset<T: Scalar>(
    spec: &DatasetSpec,
    seed: u64,
) -> Result<(Tensor<T>, Vec<usize>, usize)> {
    match spec {
        DatasetSpec::Mixture2d { per_class, std } => {
            let mut mix = Mixture2d::two_class_two_mode();
            mix.std = *std;
            let (xs, labels) = mix.sample(*per_class, seed)?;
            Ok((xs, labels, mix.n_classes()))
        }
        DatasetSpec::Disks { n, width, height } => {
            if *n == 0 || *width == 0 || *height == 0 {
                return Err(Error::Config("disks dataset needs n, width, height > 0".into()));
            }
            let mut rng = stream(seed, &[lane::DATA]);
            let dim = width * height;
            let mut rows = Vec::with_capacity(n * dim);
            for _ in 0..*n {
                let cx = rng.gen_range(0.3..0.7);
                let cy = rng.gen_range(0.3..0.7);
                let r = rng.gen_range(0.12..0.3);
                let img = disk_image::<T>(*width, *height, cx, cy, r);
                rows.extend_from_slice(img.data());
            }
            Ok((Tensor::from_vec(rows, &[*n, dim])?, vec![0; *n], 1))
        }
    }
}

fn run_train<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome> {
    let (xs, labels, n_classes) = build_dataset::<T>(&cfg.dataset, cfg.seed)?;
    let dim = xs.shape()[1];
    let mut d = build_denoiser::<T>(cfg)?;
    if !d.is_network() {
        return Err(Error::Config("training requires a network denoiser".into()));
    }
    if d.data_dim() != dim || d.n_classes() < n_classes {
        return Err(Error::Config(format!(
            "denoiser shape (dim {}, {} classes) does not fit dataset (dim {dim}, {n_classes} classes)",
            d.data_dim(),
            d.n_classes(),
        )));
    }
    let train_cfg = TrainConfig {
        steps: cfg.steps,
        batch: cfg.train.batch,
        lr: cfg.train.lr,
        drop_prob: cfg.train.drop_prob,
        seed: cfg.seed,
        policy: cfg.train.policy,
    };
    let losses = train_denoiser(&mut d, &xs, &labels, &train_cfg)?;
    let loss_path = cfg.out_dir.join("loss.csv");
    write_loss_csv(&loss_path, &losses)?;
    let model_path = cfg.out_dir.join("model.ckpt");
    save_model(&model_path, &d, cfg.schedule)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(RunOutcome {
        summary: json!({
            "kind": "train",
            "steps": cfg.steps,
            "samples": xs.shape()[0],
            "final_loss": final_loss,
            "artifacts": ["loss.csv", "model.ckpt", "model.meta.json"],
        }),
        artifacts: vec![loss_path, model_path],
    })
}

fn run_distill<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome> {
    let d = build_denoiser::<T>(cfg)?;
    let mut prior = cfg.prior;
    prior.seed = cfg.seed;
    let theta0 = cfg.generator.init_theta::<T>(cfg.seed);
    let source_x = if prior.variant == Variant::Dds {
        let theta_src = match &cfg.dds.source_checkpoint {
            Some(path) => load_theta::<T>(path)?,
            None => theta0.clone(),
        };
        Some(cfg.generator.render(&theta_src)?)
    } else {
        None
    };
    let source = source_x.as_ref().map(|x| (x, cfg.dds.source_cond));
    let run = lods_run(&prior, &cfg.generator, &theta0, &d, cfg.steps, source)?;

    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &run.records)?;
    let theta_path = cfg.out_dir.join("theta.ckpt");
    save_theta(&theta_path, &run.theta)?;
    let mut artifacts = vec![metrics_path, theta_path];
    match &run.state {
        RunState::None => {}
        RunState::Embedding(emb) => {
            let p = cfg.out_dir.join("state.ckpt");
            save_checkpoint(&p, &[("embedding".into(), emb.alpha.clone())])?;
            artifacts.push(p);
        }
        RunState::Adapter(set) => {
            let mut entries = Vec::new();
            for (i, layer) in set.layers.iter().enumerate() {
                entries.push((format!("adapter.{i}.down"), layer.down.clone()));
                entries.push((format!("adapter.{i}.up"), layer.up.clone()));
            }
            let p = cfg.out_dir.join("state.ckpt");
            save_checkpoint(&p, &entries)?;
            artifacts.push(p);
        }
    }
    let last = run.records.last().expect("steps > 0");
    Ok(RunOutcome {
        summary: json!({
            "kind": "distill",
            "variant": prior.variant.name(),
            "w": prior.w,
            "steps": cfg.steps,
            "final_grad_norm": last.distill_grad_norm,
            "final_alignment_loss": last.alignment_loss,
            "artifacts": artifacts.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>(),
        }),
        artifacts,
    })
}

/// Sandbox used by oracle runs and recipes; `equal` switches the variance
/// structure (the unequal preset keeps means 0/1 but gives class 0 variance
/// 0.25 so the infinite-w fixed point exists).
pub fn preset_sandbox(preset: &str, sched: Arc<crate::schedule::NoiseSchedule>) -> Result<GaussianSandbox> {
    match preset {
        "equal-variance" => Ok(GaussianSandbox::unit_1d(sched)),
        "unequal-variance" => GaussianSandbox::new(
            Tensor::from_vec(vec![1.0], &[1])?,
            0.25,
            Tensor::from_vec(vec![0.0], &[1])?,
            1.0,
            sched,
        ),
        other => Err(Error::Config(format!(
            "unknown oracle preset `{other}` (equal-variance | unequal-variance)"
        ))),
    }
}

pub fn oracle_reports(
    section: &OracleSection,
    sched: Arc<crate::schedule::NoiseSchedule>,
    seed: u64,
) -> Result<Vec<OracleReport>> {
    let sb = preset_sandbox(&section.preset, sched)?;
    let mut reports = Vec::new();
    for &w in &section.w {
        let t = if sb.equal_variances() {
            None
        } else {
            Some(section.t)
        };
        let analytic = cfg_fixed_point(&sb, w, t)?.data()[0];
        let (root, stderr) = mc_sds_root(
            &sb,
            w,
            t,
            section.mc_samples,
            seed,
            analytic - 2.0,
            analytic + 2.0,
        )?;
        let ok = (analytic - root).abs() < section.tolerance;
        let quantity = if w.is_infinite() {
            format!("fixed_point(preset={}, w=inf)", section.preset)
        } else {
            format!("fixed_point(preset={}, w={w})", section.preset)
        };
        reports.push(OracleReport {
            quantity,
            analytic,
            mc_estimate: root,
            stderr,
            verdict: verdict(ok),
        });
    }
    Ok(reports)
}

fn run_oracle(cfg: &RunConfig) -> Result<RunOutcome> {
    let reports = oracle_reports(&cfg.oracle, Arc::new(cfg.schedule.build()?), cfg.seed)?;
    let path = cfg.out_dir.join("oracle.json");
    write_json(&path, &reports)?;
    let all_pass = reports.iter().all(|r| r.passed());
    Ok(RunOutcome {
        summary: json!({
            "kind": "oracle",
            "preset": cfg.oracle.preset,
            "reports": reports,
            "all_pass": all_pass,
            "artifacts": ["oracle.json"],
        }),
        artifacts: vec![path],
    })
}

fn particles_to_f64<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<f64>> {
    let shape = x.shape().to_vec();
    Tensor::from_f64_slice(&x.to_f64_vec(), &shape)
}

fn run_eval<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome> {
    let theta = load_theta::<T>(&cfg.eval.theta_checkpoint)?;
    let x = cfg.generator.render(&theta)?;
    if x.shape().len() != 2 {
        return Err(Error::Config(
            "eval expects a generator with [n, d] output (particle sets)".into(),
        ));
    }
    let particles = particles_to_f64(&x)?;
    let DatasetSpec::Mixture2d { std, .. } = cfg.dataset else {
        return Err(Error::Config("eval reference set requires the mixture2d dataset".into()));
    };
    let mut mix = Mixture2d::two_class_two_mode();
    mix.std = std;
    let refs = mix.sample_class::<f64>(cfg.eval.class, cfg.eval.n_ref, cfg.seed)?;
    let bw = median_heuristic(&particles, &refs)?;
    let m = mmd(&particles, &refs, bw)?;
    let path = cfg.out_dir.join("eval.json");
    let summary = json!({
        "kind": "eval",
        "mmd": m,
        "bandwidth": bw,
        "n_particles": particles.shape()[0],
        "n_ref": cfg.eval.n_ref,
        "class": cfg.eval.class,
        "artifacts": ["eval.json"],
    });
    write_json(&path, &summary)?;
    Ok(RunOutcome {
        summary,
        artifacts: vec![path],
    })
}

fn run_export<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome> {
    let theta = load_theta::<T>(&cfg.export.theta_checkpoint)?;
    let x = cfg.generator.render(&theta)?;
    let base = cfg.out_dir.join(&cfg.export.basename);
    let mut artifacts = Vec::new();
    match x.shape() {
        [n, d] => {
            let header = if *d == 2 {
                "x,y".to_string()
            } else {
                (0..*d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
            };
            let rows: Vec<Vec<String>> = (0..*n)
                .map(|i| {
                    x.data()[i * d..(i + 1) * d]
                        .iter()
                        .map(|&v| v.to_f64().to_string())
                        .collect()
                })
                .collect();
            let path = base.with_extension("csv");
            write_table_csv(&path, &header, &rows)?;
            artifacts.push(path);
        }
        [_, _, _] => {
            artifacts.push(export_image(&base, &x)?);
        }
        other => {
            return Err(Error::Invalid {
                what: "export".into(),
                expected: "[n, d] particles or [c, h, w] image".into(),
                got: format!("{other:?}"),
            })
        }
    }
    Ok(RunOutcome {
        summary: json!({
            "kind": "export",
            "artifacts": artifacts.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>(),
        }),
        artifacts,
    })
}
