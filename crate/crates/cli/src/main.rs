//! `lodslab`: train toy denoisers, distill diffusion priors into
//! differentiable generators, and run the analytic sandbox oracles and
//! canned recipe grids. Every command starts from the built-in defaults,
//! optionally replaced by `--config <toml>`, then applies flag overrides.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lodslab_core::denoiser::Cond;
use lodslab_core::generators::{Generator, SplatConfig};
use lodslab_core::harness::{
    default_toml, execute, recipe_suite, DatasetSpec, DenoiserSpec, ExperimentKind, Precision,
    RunConfig, RECIPES,
};
use lodslab_core::priors::Variant;

#[derive(Parser)]
#[command(name = "lodslab", version, about = "Score-distillation laboratory")]
struct Cli {
    /// Print the built-in default config as TOML and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network denoiser on a synthetic dataset.
    Train(TrainArgs),
    /// Distill a prior variant into a generator.
    Distill(DistillArgs),
    /// Compare analytic sandbox fixed points against MC root-finding.
    Oracle(OracleArgs),
    /// Score a saved theta checkpoint against reference samples (MMD).
    Eval(EvalArgs),
    /// Render a saved theta checkpoint to an image or plot-ready CSV.
    Export(ExportArgs),
    /// Run a canned experiment grid and report verdicts.
    Recipe(RecipeArgs),
}

/// Flags shared by every run kind; each one overrides the config value.
#[derive(Args)]
struct CommonArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Numeric precision: f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

impl CommonArgs {
    fn load(&self, kind: ExperimentKind) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml_path(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        cfg.kind = kind;
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(p) = &self.precision {
            cfg.precision = match p.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => bail!("unknown precision {other:?}; expected f32 or f64"),
            };
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset: mixture2d or disks.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Probability of dropping the condition during training.
    #[arg(long)]
    drop_prob: Option<f64>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Prior variant: sds, reference_sds, normalized_sds, dds, vsd,
    /// lods_embedding, or lods_adapter.
    #[arg(long)]
    variant: Option<String>,
    /// Guidance weight; `inf` selects the infinite-guidance limit.
    #[arg(long)]
    w: Option<f64>,
    /// Generator: identity or splats (geometry comes from the config).
    #[arg(long)]
    generator: Option<String>,
    /// Denoiser checkpoint to distill from; default is a fresh network.
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Guidance target: a class index or `null`.
    #[arg(long)]
    target: Option<String>,
    /// DDS only: checkpoint holding the frozen source theta.
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sandbox preset: equal-variance or unequal-variance.
    #[arg(long)]
    preset: Option<String>,
    /// Guidance weight to check; repeat for several.
    #[arg(long = "w")]
    w: Vec<f64>,
    /// Timestep for t-dependent fixed points.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Absolute agreement tolerance between analytic and MC root.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint holding the particles (`theta` entry).
    #[arg(long)]
    theta: Option<PathBuf>,
    /// Class whose samples form the reference set.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    n_ref: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint holding the theta to render.
    #[arg(long)]
    theta: Option<PathBuf>,
    /// Output files are `<basename>.pgm`/`.ppm`/`.csv` under the out dir.
    #[arg(long)]
    basename: Option<String>,
}

#[derive(Args)]
struct RecipeArgs {
    /// One of: w-sweep, variant-compare, sandbox-acceptance, editing-demo.
    name: String,
    /// Output directory for the comparative CSV and JSON verdicts.
    #[arg(long, default_value = "runs/recipe")]
    out: PathBuf,
    /// Smaller grids and sample counts for a fast smoke pass.
    #[arg(long)]
    quick: bool,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if cli.print_defaults {
        print!("{}", default_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no command given; run with --help for usage");
    };
    match command {
        Command::Train(a) => {
            let mut cfg = a.common.load(ExperimentKind::Train)?;
            if let Some(data) = &a.data {
                cfg.dataset = parse_dataset(data, &cfg.dataset)?;
            }
            if let Some(b) = a.batch {
                cfg.train.batch = b;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = lr;
            }
            if let Some(p) = a.drop_prob {
                cfg.train.drop_prob = p;
            }
            finish_run(&cfg)
        }
        Command::Distill(a) => {
            let mut cfg = a.common.load(ExperimentKind::Distill)?;
            if let Some(v) = &a.variant {
                cfg.prior.variant = Variant::from_str(v)?;
            }
            if let Some(w) = a.w {
                cfg.prior.w = w;
            }
            if let Some(g) = &a.generator {
                cfg.generator = parse_generator(g, &cfg.generator)?;
            }
            if let Some(path) = &a.denoiser {
                cfg.denoiser = DenoiserSpec::Checkpoint { path: path.clone() };
            }
            if let Some(t) = &a.target {
                cfg.prior.target = parse_cond(t)?;
            }
            if let Some(src) = &a.source {
                cfg.dds.source_checkpoint = Some(src.clone());
            }
            finish_run(&cfg)
        }
        Command::Oracle(a) => {
            let mut cfg = a.common.load(ExperimentKind::Oracle)?;
            if let Some(p) = &a.preset {
                cfg.oracle.preset = p.clone();
            }
            if !a.w.is_empty() {
                cfg.oracle.w = a.w.clone();
            }
            if let Some(t) = a.t {
                cfg.oracle.t = t;
            }
            if let Some(n) = a.mc_samples {
                cfg.oracle.mc_samples = n;
            }
            if let Some(tol) = a.tolerance {
                cfg.oracle.tolerance = tol;
            }
            finish_run(&cfg)
        }
        Command::Eval(a) => {
            let mut cfg = a.common.load(ExperimentKind::Eval)?;
            if let Some(p) = &a.theta {
                cfg.eval.theta_checkpoint = p.clone();
            }
            if let Some(c) = a.class {
                cfg.eval.class = c;
            }
            if let Some(n) = a.n_ref {
                cfg.eval.n_ref = n;
            }
            finish_run(&cfg)
        }
        Command::Export(a) => {
            let mut cfg = a.common.load(ExperimentKind::Export)?;
            if let Some(p) = &a.theta {
                cfg.export.theta_checkpoint = p.clone();
            }
            if let Some(b) = &a.basename {
                cfg.export.basename = b.clone();
            }
            finish_run(&cfg)
        }
        Command::Recipe(a) => {
            let outcome = recipe_suite(&a.name, &a.out, a.quick)
                .with_context(|| format!("recipe {} (known: {})", a.name, RECIPES.join(", ")))?;
            for (name, ok) in &outcome.verdicts {
                println!("{}: {}", name, if *ok { "pass" } else { "FAIL" });
            }
            println!("report: {}", outcome.json_path.display());
            if !outcome.all_pass() {
                bail!("recipe {} has failing verdicts", a.name);
            }
            Ok(())
        }
    }
}

/// Run the configured experiment and print its summary JSON to stdout.
fn finish_run(cfg: &RunConfig) -> Result<()> {
    let outcome = execute(cfg)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    Ok(())
}

fn parse_dataset(name: &str, current: &DatasetSpec) -> Result<DatasetSpec> {
    Ok(match name {
        "mixture2d" => match current {
            DatasetSpec::Mixture2d { .. } => current.clone(),
            _ => DatasetSpec::default(),
        },
        "disks" => match current {
            DatasetSpec::Disks { .. } => current.clone(),
            _ => DatasetSpec::Disks {
                n: 64,
                width: 16,
                height: 16,
            },
        },
        other => bail!("unknown dataset {other:?}; expected mixture2d or disks"),
    })
}

fn parse_generator(name: &str, current: &Generator) -> Result<Generator> {
    Ok(match name {
        "identity" => match current {
            Generator::Identity { .. } => current.clone(),
            _ => Generator::identity(&[256, 2]),
        },
        "splats" => match current {
            Generator::Splats(_) => current.clone(),
            _ => Generator::Splats(SplatConfig::default()),
        },
        other => bail!("unknown generator {other:?}; expected identity or splats"),
    })
}

fn parse_cond(s: &str) -> Result<Cond> {
    if s == "null" {
        return Ok(Cond::Null);
    }
    let idx: usize = s
        .parse()
        .with_context(|| format!("target must be a class index or `null`, got {s:?}"))?;
    Ok(Cond::Class(idx))
}
