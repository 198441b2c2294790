mod config;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eqmotion::certify::certify;
use eqmotion::model::{Checkpoint, EqMotion, ModelConfig};
use eqmotion::simulate::{generate_dataset, Dataset, DatasetHeader};
use eqmotion::train::{eval_reasoning, evaluate, train_loop, EvalReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "eqmotion", version, about = "Equivariant multi-agent motion prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a particle dataset.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus an epoch log.
    Train {
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print displacement (and optionally reasoning) metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        reasoning: bool,
        #[arg(long, default_value_t = 20)]
        transforms: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check transform equivariance numerically.
    Equicheck(EquicheckArgs),
}

#[derive(Args)]
struct EquicheckArgs {
    #[arg(long, conflicts_with = "random_config", required_unless_present = "random_config")]
    checkpoint: Option<PathBuf>,
    /// Use random parameters, optionally for the model in a config file.
    #[arg(long, num_args = 0..=1, value_name = "CONFIG")]
    random_config: Option<Option<PathBuf>>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    /// Use identity transforms only; every deviation must be exactly 0.
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    seed: Option<u64>,
}

/// A failed check, reported with exit code 1.
#[derive(Debug)]
struct CertificationFailed(Vec<String>);

impl std::fmt::Display for CertificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "certification failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for CertificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use eqmotion::Error as E;
    if err.downcast_ref::<CertificationFailed>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::NonFiniteLoss { .. } | E::SimulationDiverged { .. } | E::Numerical(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, count, seed } => simulate(&config, out, count, seed),
        Command::Train {
            config,
            data,
            out_checkpoint,
            resume,
            log,
            epochs,
            seed,
        } => train(&config, data, out_checkpoint, resume, log, epochs, seed),
        Command::Eval {
            checkpoint,
            data,
            reasoning,
            transforms,
            seed,
        } => eval(&checkpoint, &data, reasoning, transforms, seed),
        Command::Equicheck(args) => equicheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        if !dir.is_dir() {
            bail!("output directory {} does not exist", dir.display());
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    require_file(path, "config")?;
    RunConfig::load(path)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", eqmotion::json::to_line(value)?);
    Ok(())
}

fn simulate(config: &Path, out: Option<PathBuf>, count: usize, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if count == 0 {
        bail!("count must be ≥ 1");
    }
    let out = out
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| anyhow!("no output path: pass --out or set `dataset` in the config"))?;
    require_parent(&out)?;

    let sim = cfg.sim();
    let samples = generate_dataset(&sim, count, cfg.seed)?;
    let mut header = DatasetHeader::new(&sim, cfg.seed);
    header.config = Some(cfg.echo());
    let k = header.num_categories;
    let dataset = Dataset { header, samples };
    dataset
        .save(&out)
        .with_context(|| format!("cannot write {}", out.display()))?;

    let mut histogram = vec![0usize; k];
    for s in &dataset.samples {
        let m = s.num_agents();
        for i in 0..m {
            for j in (0..m).filter(|&j| j != i) {
                histogram[s.label(i, j)] += 1;
            }
        }
    }
    #[derive(Serialize)]
    struct Summary {
        samples: usize,
        label_histogram: Vec<usize>,
    }
    print_json(&Summary {
        samples: dataset.samples.len(),
        label_histogram: histogram,
    })
}

/// Names of the header fields that disagree with the model config.
fn header_mismatch(header: &DatasetHeader, model: &ModelConfig) -> Option<String> {
    let fields = [
        ("M", header.num_agents, model.num_agents),
        ("T_p", header.past_len, model.past_len),
        ("T_f", header.future_len, model.future_len),
        ("n", header.n, model.space_dim),
    ];
    let bad: Vec<String> = fields
        .iter()
        .filter(|(_, h, m)| h != m)
        .map(|(name, h, m)| format!("{name} (dataset {h}, model {m})"))
        .collect();
    (!bad.is_empty()).then(|| format!("dataset header does not match the model config: {}", bad.join(", ")))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn train(
    config: &Path,
    data: Option<PathBuf>,
    out_checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
    log: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = data
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| anyhow!("no dataset: pass --data or set `dataset` in the config"))?;
    let out = out_checkpoint
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| anyhow!("no checkpoint path: pass --out-checkpoint or set `checkpoint` in the config"))?;
    let log = log.unwrap_or_else(|| match &cfg.log_dir {
        Some(dir) => dir.join("train_log.jsonl"),
        None => out.with_extension("log.jsonl"),
    });
    require_file(&data, "dataset")?;
    if let Some(r) = &resume {
        require_file(r, "resume checkpoint")?;
    }
    require_parent(&out)?;
    require_parent(&log)?;

    let model_cfg = cfg.model();
    let dataset = load_dataset(&data)?;
    if let Some(msg) = header_mismatch(&dataset.header, &model_cfg) {
        bail!(msg);
    }
    let (mut model, state) = match &resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
            if ck.config != model_cfg {
                bail!("resume checkpoint {} was trained with a different model config", path.display());
            }
            let state = ck
                .training
                .clone()
                .ok_or_else(|| anyhow!("checkpoint {} has no optimizer state to resume from", path.display()))?;
            (ck.into_model()?, Some(state))
        }
        None => (EqMotion::new(model_cfg, cfg.seed)?, None),
    };

    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log)
    } else {
        File::create(&log)
    }
    .with_context(|| format!("cannot write log {}", log.display()))?;
    let mut writer = BufWriter::new(file);
    let echo = cfg.echo();
    writeln!(writer, "{}", eqmotion::json::to_line(&serde_json::json!({ "config": &echo }))?)?;
    writer.flush()?;

    let outcome = train_loop(&mut model, &dataset.samples, &cfg.train(), state, |entry| {
        writeln!(writer, "{}", eqmotion::json::to_line(entry)?)?;
        writer.flush()?;
        Ok(())
    })?;

    let mut ck = Checkpoint::from_model(&model, Some(outcome.state));
    ck.run_config = Some(echo);
    ck.save(&out)
        .with_context(|| format!("cannot write checkpoint {}", out.display()))?;

    #[derive(Serialize)]
    struct Summary {
        epochs_run: usize,
        epochs_completed: usize,
        final_loss: Option<f64>,
    }
    print_json(&Summary {
        epochs_run: outcome.history.len(),
        epochs_completed: ck.training.as_ref().map_or(0, |t| t.epochs_completed),
        final_loss: outcome.history.last().copied(),
    })
}

fn eval(checkpoint: &Path, data: &Path, reasoning: bool, transforms: usize, seed: u64) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(data, "dataset")?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let dataset = load_dataset(data)?;
    if let Some(msg) = header_mismatch(&dataset.header, &ck.config) {
        bail!(msg);
    }
    let model = ck.into_model()?;
    let mut report = evaluate(&model, &dataset.samples)?;
    if reasoning {
        if transforms == 0 {
            bail!("transforms must be ≥ 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let score = eval_reasoning(&model, &dataset.samples, transforms, &mut rng)?;
        report = report.with_reasoning(&score);
    }

    #[derive(Serialize)]
    struct Output<'a> {
        #[serde(flatten)]
        report: &'a EvalReport,
        config: serde_json::Value,
    }
    print_json(&Output {
        report: &report,
        config: serde_json::json!({
            "model": model.config(),
            "reasoning": reasoning,
            "transforms": transforms,
            "seed": seed,
        }),
    })
}

fn equicheck(args: EquicheckArgs) -> Result<()> {
    if args.trials == 0 {
        bail!("trials must be ≥ 1");
    }
    if !(args.tolerance >= 0.0) {
        bail!("tolerance must be ≥ 0");
    }
    let (model, seed) = match (&args.checkpoint, &args.random_config) {
        (Some(path), _) => {
            require_file(path, "checkpoint")?;
            let ck = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
            (ck.into_model()?, args.seed.unwrap_or(0))
        }
        (None, Some(config)) => {
            let cfg = match config {
                Some(path) => load_config(path)?,
                None => RunConfig::default(),
            };
            cfg.validate()?;
            let seed = args.seed.unwrap_or(cfg.seed);
            (EqMotion::new(cfg.model(), seed)?, seed)
        }
        (None, None) => unreachable!("clap requires a model source"),
    };
    let report = certify(&model, args.trials, args.identity, seed)?;
    let failed: Vec<String> = report.failures(args.tolerance).into_iter().map(String::from).collect();

    #[derive(Serialize)]
    struct Family<'a> {
        family: &'a str,
        max_deviation: f64,
        passed: bool,
    }
    #[derive(Serialize)]
    struct Output<'a> {
        trials: usize,
        tolerance: f64,
        identity_only: bool,
        passed: bool,
        failed: &'a [String],
        families: Vec<Family<'a>>,
        config: serde_json::Value,
    }
    print_json(&Output {
        trials: report.trials,
        tolerance: args.tolerance,
        identity_only: report.identity_only,
        passed: failed.is_empty(),
        failed: &failed,
        families: report
            .families
            .iter()
            .map(|f| Family {
                family: &f.family,
                max_deviation: f.max_deviation,
                passed: f.max_deviation <= args.tolerance,
            })
            .collect(),
        config: serde_json::json!({ "model": model.config(), "seed": seed }),
    })?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CertificationFailed(failed).into())
    }
}
