//! Command-line front end: `synth-data`, `train`, `eval` and `ablate`.
//!
//! Exit codes: 0 on success, 1 for invalid input or usage, 2 for failures
//! at run time. Command-line flags override keys of the `--config` file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datamodel::{load_config, Objective, PromptBook, TrainConfig};
use crate::error::{validation, ClimsError, Result};
use crate::evalkit::{
    ablation_run, evaluate, export_cams, extract_cams, CamMode, CamSidecar, Variant,
};
use crate::matcher::{ConceptTable, SyntheticMatcher};
use crate::pipeline::{load_checkpoint, train, TrainOptions, LOG_FILE};
use crate::synthgen::{generate_dataset, Dataset, SceneSpec, CONCEPTS_FILE, PROMPTS_FILE};

#[derive(Parser, Debug)]
#[command(
    name = "clims",
    version,
    about = "Class activation maps from image-text matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with masks and a manifest.
    SynthData(SynthArgs),
    /// Train a backbone and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset with ground-truth masks.
    Eval(EvalArgs),
    /// Train and evaluate every loss variant with the same seed and data.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `default` or a path to a scene spec JSON file.
    #[arg(long, default_value = "default")]
    pub spec: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Index of the first scene; disjoint ranges give disjoint splits.
    #[arg(long, default_value_t = 0)]
    pub first_index: u64,
}

/// Overrides for config keys shared by `train` and `ablate`.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma list of otm, btm, cbs, reg, or cls.
    #[arg(long)]
    pub losses: Option<String>,
    #[arg(long)]
    pub deterministic: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub baseline_learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prompt book JSON; defaults to the one stored with the dataset.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed background threshold; skips the sweep.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Number of images whose CAMs are exported as PNG.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training split.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation split with masks.
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Comma list of variants such as `OTM,OTM+BTM,CLS`; all six by default.
    #[arg(long)]
    pub variants: Option<String>,
}

/// Outcome of one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub code: i32,
    pub artifacts: Vec<PathBuf>,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: ClimsError,
}

fn input<T>(r: Result<T>) -> std::result::Result<T, CliError> {
    r.map_err(|error| CliError { code: 1, error })
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, CliError> {
    r.map_err(|error| CliError {
        code: if error.is_validation() { 1 } else { 2 },
        error,
    })
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.losses {
            c.objective = Objective::parse_comma_list(v)?;
        }
        if let Some(v) = self.deterministic {
            c.deterministic = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.baseline_learning_rate {
            c.baseline_learning_rate = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn load_book(data: &Path, prompts: Option<&Path>) -> Result<PromptBook> {
    PromptBook::load(&prompts.map_or_else(|| data.join(PROMPTS_FILE), Path::to_path_buf))
}

fn load_matcher(data: &Path) -> Result<SyntheticMatcher> {
    SyntheticMatcher::new(ConceptTable::load(&data.join(CONCEPTS_FILE))?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ClimsError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| ClimsError::io(path, e))
}

pub fn cmd_synth_data(args: &SynthArgs) -> std::result::Result<CommandResult, CliError> {
    let mut spec = input(if args.spec == "default" {
        Ok(SceneSpec::default_spec())
    } else {
        fs::read_to_string(&args.spec)
            .map_err(|e| ClimsError::io(&args.spec, e))
            .and_then(|t| SceneSpec::from_json(&t))
    })?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    input(spec.validate())?;
    let manifest = runtime(generate_dataset(&spec, args.first_index, args.n, &args.out))?;
    let mut artifacts: Vec<PathBuf> = manifest
        .iter()
        .flat_map(|e| [args.out.join(&e.image_path), args.out.join(&e.mask_path)])
        .collect();
    artifacts.push(args.out.join(crate::synthgen::MANIFEST_FILE));
    Ok(CommandResult { code: 0, artifacts })
}

pub fn cmd_train(args: &TrainArgs) -> std::result::Result<CommandResult, CliError> {
    let config = input(args.cfg.resolve())?;
    let data = input(Dataset::load(&args.data))?;
    let book = input(load_book(&args.data, args.prompts.as_deref()))?;
    let matcher = input(load_matcher(&args.data))?;
    let mut warnings = Vec::new();
    let resume = match &args.resume {
        Some(p) => {
            let loaded = input(load_checkpoint(p, Some(&config.hash())))?;
            warnings = loaded.warnings;
            Some(loaded.state)
        }
        None => None,
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let t = data.for_training();
    let summary = runtime(train(
        &config,
        &t.images,
        &t.labels,
        &t.class_names,
        &book,
        &matcher,
        &args.out,
        TrainOptions {
            resume,
            stop_after_epoch: None,
        },
    ))?;
    runtime(write(&args.out.join("config.json"), &config.to_json()))?;
    Ok(CommandResult {
        code: 0,
        artifacts: vec![
            summary.checkpoint,
            args.out.join(LOG_FILE),
            args.out.join("config.json"),
        ],
    })
}

pub fn cmd_eval(args: &EvalArgs) -> std::result::Result<CommandResult, CliError> {
    if let Some(t) = args.threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError {
                code: 1,
                error: validation(format!("--threshold {t} must be in (0, 1)")),
            });
        }
    }
    let loaded = input(load_checkpoint(&args.checkpoint, None))?;
    let data = input(Dataset::load(&args.data))?;
    let set = input(data.for_evaluation())?;
    let state = loaded.state;
    let mode = CamMode::for_objective(&state.objective);
    let report = runtime(evaluate(&state.model, mode, &set, args.threshold))?;
    let json = runtime(serde_json::to_string_pretty(&report).map_err(ClimsError::from))?;
    let json_path = args.out.join("report.json");
    let text_path = args.out.join("report.txt");
    runtime(write(&json_path, &json))?;
    runtime(write(&text_path, &report.to_text()))?;
    let cam_dir = args.out.join("cams");
    let mut artifacts = vec![json_path, text_path];
    let mut files = Vec::new();
    for i in 0..args.n.min(set.len()) {
        let cams = runtime(extract_cams(
            &state.model,
            mode,
            &set.images[i],
            &set.labels[i],
        ))?;
        let written = runtime(export_cams(
            &cams,
            &set.labels[i],
            &set.class_names,
            &format!("{i:06}"),
            &cam_dir,
        ))?;
        files.extend(written);
    }
    if !files.is_empty() {
        let sidecar = CamSidecar {
            class_names: set.class_names.clone(),
            threshold: report.threshold,
            config_hash: state.config_hash.clone(),
            files: files
                .iter()
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect(),
        };
        let path = cam_dir.join("cams.json");
        let text = runtime(serde_json::to_string_pretty(&sidecar).map_err(ClimsError::from))?;
        runtime(write(&path, &text))?;
        artifacts.extend(files);
        artifacts.push(path);
    }
    Ok(CommandResult { code: 0, artifacts })
}

pub fn cmd_ablate(args: &AblateArgs) -> std::result::Result<CommandResult, CliError> {
    let config = input(args.cfg.resolve())?;
    let variants = input(match &args.variants {
        Some(list) => list
            .split(',')
            .map(Variant::parse)
            .collect::<Result<Vec<_>>>(),
        None => Ok(Variant::ALL.to_vec()),
    })?;
    let train_data = input(Dataset::load(&args.data))?;
    let eval_set = input(Dataset::load(&args.eval_data).and_then(|d| d.for_evaluation()))?;
    let book = input(load_book(&args.data, args.prompts.as_deref()))?;
    let matcher = input(load_matcher(&args.data))?;
    if train_data.class_names() != eval_set.class_names.as_slice()
        || book.class_names() != eval_set.class_names.as_slice()
    {
        return Err(CliError {
            code: 1,
            error: validation("training data, evaluation data and prompt book disagree on classes"),
        });
    }
    let t = train_data.for_training();
    let table = runtime(ablation_run(
        &config, &t.images, &t.labels, &eval_set, &book, &matcher, &variants, &args.out,
    ))?;
    let json_path = args.out.join("ablation.json");
    let text_path = args.out.join("ablation.txt");
    let json = runtime(serde_json::to_string_pretty(&table).map_err(ClimsError::from))?;
    runtime(write(&json_path, &json))?;
    runtime(write(&text_path, &table.to_text()))?;
    Ok(CommandResult {
        code: 0,
        artifacts: vec![json_path, text_path],
    })
}

pub fn execute(cli: &Cli) -> std::result::Result<CommandResult, CliError> {
    match &cli.command {
        Command::SynthData(a) => cmd_synth_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(result) => {
            for a in result.artifacts.iter().rev().take(8).rev() {
                println!("{}", a.display());
            }
            if result.artifacts.len() > 8 {
                println!("({} files written)", result.artifacts.len());
            }
            result.code
        }
        Err(e) => {
            eprintln!("error: {}", e.error);
            e.code
        }
    }
}
