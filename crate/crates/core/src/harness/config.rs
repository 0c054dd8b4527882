//! Run configuration: one TOML document drives every experiment kind.
//! Unset keys fall back to defaults, so a config only states what it
//! changes; `default_toml` prints the full document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::NetConfig;
use crate::generators::Generator;
use crate::priors::PriorConfig;
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind, TimestepPolicy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    Distill,
    Oracle,
    Eval,
    Export,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::LinearBeta,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

/// Where the denoiser comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DenoiserSpec {
    /// Fresh randomly initialized network.
    Fresh { net: NetConfig },
    /// Load weights and model shape from a checkpoint.
    Checkpoint { path: PathBuf },
    /// Closed-form Gaussian denoiser: per-class means, null mean last,
    /// one variance per entry.
    Sandbox { means: Vec<Vec<f64>>, vars: Vec<f64> },
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Fresh {
            net: NetConfig::new(2, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    /// Two classes, two Gaussian modes each, on a +-1.5 grid.
    Mixture2d { per_class: usize, std: f64 },
    /// Random filled disks on a dark background, single class.
    Disks {
        n: usize,
        width: usize,
        height: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Mixture2d {
            per_class: 2048,
            std: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub lr: f64,
    pub drop_prob: f64,
    pub policy: TimestepPolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch: 64,
            lr: 1e-3,
            drop_prob: 0.1,
            policy: TimestepPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// `equal-variance` or `unequal-variance`.
    pub preset: String,
    pub w: Vec<f64>,
    /// Timestep for t-dependent fixed points.
    pub t: usize,
    pub mc_samples: usize,
    /// Absolute 1-D agreement tolerance between analytic and MC root.
    pub tolerance: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            preset: "equal-variance".into(),
            w: vec![7.5],
            t: 500,
            mc_samples: 100_000,
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Particles to score (`theta` entry of a checkpoint).
    pub theta_checkpoint: PathBuf,
    /// Class whose samples form the reference set.
    pub class: usize,
    pub n_ref: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            theta_checkpoint: PathBuf::from("theta.ckpt"),
            class: 0,
            n_ref: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub theta_checkpoint: PathBuf,
    /// Output files are `<basename>.pgm`/`.ppm`/`.csv` under `out_dir`.
    pub basename: String,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection {
            theta_checkpoint: PathBuf::from("theta.ckpt"),
            basename: "render".into(),
        }
    }
}

/// DDS editing inputs: the frozen source observable and its condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdsSection {
    /// Checkpoint holding the source theta; the initial theta when absent.
    pub source_checkpoint: Option<PathBuf>,
    pub source_cond: crate::denoiser::Cond,
}

impl Default for DdsSection {
    fn default() -> Self {
        DdsSection {
            source_checkpoint: None,
            source_cond: crate::denoiser::Cond::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub precision: Precision,
    pub seed: u64,
    pub steps: usize,
    pub out_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserSpec,
    pub prior: PriorConfig,
    pub generator: Generator,
    pub dataset: DatasetSpec,
    pub train: TrainSection,
    pub dds: DdsSection,
    pub oracle: OracleSection,
    pub eval: EvalSection,
    pub export: ExportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ExperimentKind::Distill,
            precision: Precision::F32,
            seed: 0,
            steps: 1000,
            out_dir: PathBuf::from("runs/out"),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserSpec::default(),
            prior: PriorConfig::default(),
            generator: Generator::identity(&[256, 2]),
            dataset: DatasetSpec::default(),
            train: TrainSection::default(),
            dds: DdsSection::default(),
            oracle: OracleSection::default(),
            eval: EvalSection::default(),
            export: ExportSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        self.prior.validate()?;
        if let DenoiserSpec::Sandbox { means, vars } = &self.denoiser {
            if means.len() < 2 || means.len() != vars.len() {
                return Err(Error::Config(
                    "sandbox denoiser needs >= 1 class mean plus a null mean, \
                     one variance each"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn default_toml() -> String {
    RunConfig::default()
        .to_toml()
        .expect("defaults serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::Variant;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = default_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml_str(
            "kind = \"train\"\nsteps = 7\n[prior]\nvariant = \"lods_embedding\"\nw = inf\n",
        )
        .unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Train);
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.prior.variant, Variant::LodsEmbedding);
        assert!(cfg.prior.w.is_infinite());
        assert_eq!(cfg.train.batch, TrainSection::default().batch);
    }

    #[test]
    fn infinite_w_for_sds_rejected_at_load() {
        let err = RunConfig::from_toml_str("[prior]\nvariant = \"sds\"\nw = inf\n");
        assert!(err.is_err());
    }

    #[test]
    fn unknown_keys_and_bad_toml_rejected() {
        assert!(RunConfig::from_toml_str("nonsense_key = 3\n").is_err());
        assert!(RunConfig::from_toml_str("steps = \"many\"\n").is_err());
    }

    #[test]
    fn generator_specs_parse() {
        let cfg = RunConfig::from_toml_str(
            "[generator]\nkind = \"splats\"\nk = 3\nwidth = 8\nheight = 8\nchannels = 1\nbackground = 0.0\n",
        )
        .unwrap();
        assert_eq!(cfg.generator.theta_len(), 3 * 8);
        let cfg = RunConfig::from_toml_str(
            "[generator]\nkind = \"identity\"\nshape = [4, 2]\n",
        )
        .unwrap();
        assert_eq!(cfg.generator.out_shape(), vec![4, 2]);
    }
}
