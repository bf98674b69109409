use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use disklab::experiment::{ExperimentConfig, Pipeline, VariantId, MANIFEST_FILE};

#[derive(Parser, Debug)]
#[command(name = "disklab", version, about = "Adversarial robustness experiments on synthetic disk phantoms")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON config; keys override the defaults (or the paper-scale settings).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample work (results do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Run directory holding the manifest and all artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/default")]
    out_dir: PathBuf,
    /// Start from 128x128 images, 176-point contours, 640k virtual samples and 100 epochs.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Args, Debug)]
struct VariantArgs {
    /// Variant name such as P10_adv_rs (repeatable); default is all 15.
    #[arg(long = "variant", value_name = "NAME")]
    variants: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom corpus and its train/test split.
    GenData,
    /// Build the shape models and the coverage report.
    BuildSsm,
    /// Generate the virtual training set of each shape model.
    Augment,
    /// Train model variants.
    Train(VariantArgs),
    /// Robustness sweep of trained variants.
    Sweep {
        #[command(flatten)]
        variants: VariantArgs,
        /// Comma-separated noise levels replacing the configured grid.
        #[arg(long, value_delimiter = ',', value_name = "EPS,...")]
        eps_list: Option<Vec<f64>>,
    },
    /// OOD adversarial attacks against the target variant.
    OodAttack,
    /// Train reconstruction-head detectors and attack them.
    OodDetect,
    /// Merge sweeps into the three tables and print trend verdicts.
    Report,
    /// Every stage in order.
    All,
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

fn resolve_config(g: &GlobalArgs) -> Result<Option<ExperimentConfig>> {
    if g.config.is_none() && g.seed.is_none() && !g.paper_scale {
        return Ok(None);
    }
    let base = if g.paper_scale {
        ExperimentConfig::paper_scale()
    } else {
        ExperimentConfig::default()
    };
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut value, patch);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).context("invalid config")?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn parse_variants(pipeline: &Pipeline, names: &[String]) -> Result<Vec<VariantId>> {
    if names.is_empty() {
        return Ok(pipeline.config().variants());
    }
    let known = pipeline.config().variants();
    names
        .iter()
        .map(|n| {
            let id: VariantId = n.parse()?;
            if !known.contains(&id) {
                bail!("variant {id} is not part of this run (shape models {:?})", pipeline.config().data.ssm_components);
            }
            Ok(id)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = resolve_config(&cli.global)?;
    let root: &Path = &cli.global.out_dir;
    if cfg.is_none() && !root.join(MANIFEST_FILE).exists() {
        log::info!("no manifest in {}, starting a run with the default config", root.display());
    }
    let mut p = Pipeline::open(root, cfg)?;
    log::info!("run {} in {}", p.manifest().run_id, root.display());
    match cli.command {
        Command::GenData => p.gen_data()?,
        Command::BuildSsm => p.build_ssm()?,
        Command::Augment => p.augment()?,
        Command::Train(v) => {
            let ids = parse_variants(&p, &v.variants)?;
            p.train(&ids)?;
        }
        Command::Sweep { variants, eps_list } => {
            let ids = parse_variants(&p, &variants.variants)?;
            p.sweep(&ids, eps_list.as_deref())?;
        }
        Command::OodAttack => {
            for r in p.ood_attack()? {
                println!("{}: mean dice vs target {:.4}", r.objective, r.mean_dice());
            }
        }
        Command::OodDetect => {
            for (name, r) in p.ood_detect()? {
                match r.auroc {
                    Some(a) => println!("{name}: AUROC {a:.4}"),
                    None => println!("{name}: no AUROC"),
                }
            }
        }
        Command::Report => {
            for v in p.report()? {
                println!("{}", v.line());
            }
        }
        Command::All => {
            for v in p.run_all()? {
                println!("{}", v.line());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
