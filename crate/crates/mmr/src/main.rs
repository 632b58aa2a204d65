use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use mmr::ablation;
use mmr::config::RunConfig;
use mmr::error::{Error, Result};
use mmr::eval::{self, Subset};
use mmr::gradcheck::finite_diff_check;
use mmr::io::manifest;
use mmr::model::{prepare_input, Model, ModelInput};
use mmr::optim::{self, TrainConfig};
use mmr::rng::Rng;

#[derive(Parser)]
#[command(name = "mmr", about = "Multi-modal reasoning graph over precomputed feature bundles", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// override the config's artifact directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// override the config's test fold
    #[arg(long)]
    fold: Option<u8>,
    /// omit wall-clock fields so identical runs emit identical reports
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as a manifest under <out>/dataset
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured variant; checkpoint goes to <out>/checkpoint
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Classification mAP of the trained checkpoint on the test fold
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        subset: SubsetArg,
    },
    /// Leave-one-out retrieval mAP of the trained checkpoint on the test fold
    Retrieve {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate the standard component-ablation ladder
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic gradients against central finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SubsetArg {
    All,
    WithText,
    WithoutText,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Subset {
        match s {
            SubsetArg::All => Subset::All,
            SubsetArg::WithText => Subset::WithText,
            SubsetArg::WithoutText => Subset::WithoutText,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(fold) = common.fold {
        cfg.fold = fold;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_report<T: Serialize>(common: &Common, cfg: &RunConfig, command: &str, payload: &T) -> Result<()> {
    let timestamp = if common.deterministic {
        None
    } else {
        Some(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
    };
    let report = json!({
        "schema": "mmr-report-v1",
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "timestamp": timestamp,
        "payload": payload,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let path = cfg.out_dir.join(format!("{command}_report.json"));
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Train-fold and test-fold inputs for the configured split.
fn split_inputs(cfg: &RunConfig) -> Result<(Vec<ModelInput>, Vec<ModelInput>, mmr::io::Dataset)> {
    let ds = cfg.load_dataset()?;
    let (train_idx, test_idx) = ds.fold_split(cfg.fold)?;
    let prep = |idx: &[usize]| -> Result<Vec<ModelInput>> {
        idx.iter().map(|&i| prepare_input(&ds.bundles[i], &ds.dims)).collect()
    };
    let train = prep(&train_idx)?;
    let test = prep(&test_idx)?;
    Ok((train, test, ds))
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig { seed: cfg.seed, ..cfg.train.clone() }
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoint")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { common } => {
            let cfg = load_config(&common)?;
            if cfg.synth.is_none() {
                return Err(Error::Config("gen requires a `synth` dataset source".into()));
            }
            let ds = cfg.load_dataset()?;
            let manifest_path = manifest::write_dataset(&ds, &cfg.out_dir.join("dataset"))?;
            emit_report(
                &common,
                &cfg,
                "gen",
                &json!({
                    "manifest": manifest_path,
                    "bundles": ds.bundles.len(),
                    "num_classes": ds.num_classes,
                }),
            )
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let (train_inputs, test_inputs, ds) = split_inputs(&cfg)?;
            let mut model = Model::new(cfg.variant, ds.dims, ds.num_classes, cfg.seed)?;
            let report = optim::train(&mut model, &train_inputs, &test_inputs, &train_config(&cfg))?;
            let dir = checkpoint_dir(&cfg);
            let stamp = optim::CheckpointStamp {
                step: report.steps,
                epoch: report.best_epoch,
                config_hash: cfg.hash(),
            };
            optim::save_checkpoint(&model, &dir, &stamp)?;
            emit_report(&common, &cfg, "train", &json!({ "checkpoint": dir, "result": report }))
        }
        Command::Eval { common, subset } => {
            let cfg = load_config(&common)?;
            let (_, test_inputs, _) = split_inputs(&cfg)?;
            let (model, _) = optim::load_checkpoint(&checkpoint_dir(&cfg))?;
            let report = eval::evaluate_classification(&model, &test_inputs, subset.into())?;
            emit_report(&common, &cfg, "eval", &report)
        }
        Command::Retrieve { common } => {
            let cfg = load_config(&common)?;
            let (_, test_inputs, _) = split_inputs(&cfg)?;
            let (model, _) = optim::load_checkpoint(&checkpoint_dir(&cfg))?;
            let report = eval::evaluate_retrieval(&model, &test_inputs)?;
            emit_report(&common, &cfg, "retrieve", &report)
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let ds = cfg.load_dataset()?;
            let grid = match &cfg.grid {
                Some(path) => ablation::load_grid(path)?,
                None => ablation::standard_grid(),
            };
            let report =
                ablation::run_grid(&ds, cfg.fold as usize, &train_config(&cfg), cfg.seed, &grid)?;
            emit_report(&common, &cfg, "ablate", &report)
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let (train_inputs, test_inputs, ds) = split_inputs(&cfg)?;
            let pool = if train_inputs.is_empty() { &test_inputs } else { &train_inputs };
            if pool.is_empty() {
                return Err(Error::Config("gradcheck: dataset is empty".into()));
            }
            let batch: Vec<&ModelInput> = pool.iter().take(cfg.gradcheck.batch).collect();
            let mut model = Model::new(cfg.variant, ds.dims, ds.num_classes, cfg.seed)?;
            // eval mode on both sides so dropout cannot break determinism
            model.spec.dropout = 0.0;
            // zero biases and zero padding rows land pre-activations exactly
            // on the Leaky ReLU corner where the two slope estimates differ
            // by construction; jitter the check point off the kink
            let mut jitter = Rng::new(cfg.seed ^ 0x6a6974746572);
            for p in model.params.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|x| *x += jitter.uniform(-0.05, 0.05));
            }
            let mut rng = Rng::new(0);
            let (_, grads) = model.loss_and_grads(&batch, false, &mut rng)?;
            let report = finite_diff_check(
                |p| model.loss_with_params(p, &batch),
                &model.params,
                &grads,
                cfg.gradcheck.step,
                cfg.gradcheck.tol,
            )?;
            let pass = report.pass;
            emit_report(&common, &cfg, "gradcheck", &report)?;
            if !pass {
                return Err(Error::Eval(format!(
                    "gradient check failed: max relative error {} in {}",
                    report.max_rel_err, report.worst_param
                )));
            }
            Ok(())
        }
    }
}
