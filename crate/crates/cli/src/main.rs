use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rationale_core::backend::load_checkpoint;
use rationale_core::corpus::{load_dataset_with_vocabulary, read_jsonl, write_jsonl};
use rationale_core::eval::{self, render_table};
use rationale_core::experiment::{self, load_manifest, load_report, render_report, render_sweep, ExperimentConfig, Mode};
use rationale_core::selftrain::pseudo_label;
use rationale_core::{Example, Role, SyntheticTaskSpec};

#[derive(Parser)]
#[command(name = "rationale", version, about = "Few-shot self-training of self-rationalizing models")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one mode over all configured seeds.
    Run(ConfigArgs),
    /// Run the configured mode at several labeled-set sizes.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated labeled examples per class.
        #[arg(long, value_delimiter = ',', required = true)]
        k_values: Vec<usize>,
    },
    /// Write a synthetic keyword-triggered task with templated explanations.
    GenSynthetic(GenArgs),
    /// Evaluate a saved model on a dataset split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Split to evaluate: test or validation.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 64)]
        max_generation_len: usize,
        /// Also measure label-explanation association.
        #[arg(long)]
        association: bool,
    },
    /// Pseudo-label a JSONL file with a saved model.
    PseudoLabel {
        #[arg(long)]
        model: PathBuf,
        /// Examples to label; rationalizers read the label field as the
        /// label to explain.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// TOML experiment config supplying the prompt format.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_generation_len: usize,
    },
    /// Print the report of a finished run or sweep.
    Report {
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// TOML experiment config supplying the prompt format and label vocabulary.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML task description; flags override its keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_validation: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    keywords_per_class: Option<usize>,
    #[arg(long)]
    n_fillers: Option<usize>,
    #[arg(long)]
    keywords_per_input: Option<usize>,
    #[arg(long)]
    fillers_per_input: Option<usize>,
}

/// Experiment config file plus per-key overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    k_per_class: Option<usize>,
    #[arg(long)]
    lambda_token: Option<f64>,
    #[arg(long)]
    lambda_mlr: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    iteration_patience: Option<usize>,
    #[arg(long)]
    labeled_batch_size: Option<usize>,
    #[arg(long)]
    pseudo_batch_size: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    parallel_seeds: bool,
    #[arg(long)]
    max_generation_len: Option<usize>,
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    association: Option<bool>,
    #[arg(long)]
    simulatability: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    label_vocabulary: Option<Vec<String>>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        let args = self;
        apply!(
            cfg, args, dataset, mode, k_per_class, lambda_token, lambda_mlr, label_smoothing, patience, max_epochs, max_iterations,
            iteration_patience, labeled_batch_size, pseudo_batch_size, seeds, base_seed, max_generation_len, association,
            simulatability, label_vocabulary, d_model, heads, d_ff, encoder_layers, decoder_layers, learning_rate, weight_decay,
            grad_clip
        );
        if self.output_dir.is_some() {
            cfg.output_dir = self.output_dir.clone();
        }
        if self.min_confidence.is_some() {
            cfg.min_confidence = self.min_confidence;
        }
        cfg.parallel_seeds |= self.parallel_seeds;
        if cfg.dataset.as_os_str().is_empty() {
            bail!("no dataset given (set `dataset` in the config or pass --dataset)");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn prompt_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    })
}

fn gen_synthetic(args: &GenArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticTaskSpec::default(),
    };
    apply!(
        spec, args, n_classes, n_train, n_validation, n_test, keywords_per_class, n_fillers, keywords_per_input, fillers_per_input
    );
    let task = spec.generate(args.seed)?;
    task.write(&args.out)?;
    let solved = task.test.iter().filter(|e| task.oracle_label(&e.input_text) == Some(e.label.as_str())).count();
    println!(
        "wrote {} train, {} validation, {} test examples to {} (rule oracle test accuracy {:.3})",
        task.train.len(),
        task.validation.len(),
        task.test.len(),
        args.out.display(),
        solved as f64 / task.test.len() as f64
    );
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let report = experiment::run_experiment(&cfg)?;
            print!("{}", render_report(&report));
        }
        Command::Sweep { config, k_values } => {
            let cfg = config.resolve()?;
            let rows = experiment::sweep(&cfg, &k_values)?;
            if rows.is_empty() {
                bail!("no labeled-set size could be supplied by the data");
            }
            print!("{}", render_sweep(&rows));
        }
        Command::GenSynthetic(args) => gen_synthetic(&args)?,
        Command::Evaluate {
            model,
            data,
            split,
            max_generation_len,
            association,
        } => {
            let cfg = prompt_config(data.config.as_deref())?;
            let fmt = cfg.prompt_format();
            let vocabulary = (!cfg.label_vocabulary.is_empty()).then(|| cfg.label_vocabulary.clone());
            let ds = load_dataset_with_vocabulary(&data.dataset, &fmt, vocabulary)?;
            let examples = match split.as_str() {
                "test" => &ds.test,
                "validation" => &ds.validation,
                other => bail!("unknown split `{other}`"),
            };
            let m = load_checkpoint(&model)?;
            let (mut report, _) = eval::evaluate(m.as_ref(), examples, &fmt, max_generation_len)?;
            if association && m.role() != Role::Predictor {
                report.association_rate =
                    Some(eval::label_explanation_association(m.as_ref(), examples, &ds.label_vocabulary, &fmt, max_generation_len)?.rate);
            }
            print!("{}", render_table(&[(format!("{} {split}", m.role()), report)]));
        }
        Command::PseudoLabel {
            model,
            input,
            output,
            config,
            max_generation_len,
        } => {
            let fmt = prompt_config(config.as_deref())?.prompt_format();
            let m = load_checkpoint(&model)?;
            let examples: Vec<Example> = read_jsonl(&input)?;
            let labels: HashMap<String, String> =
                examples.iter().filter(|e| e.is_labeled()).map(|e| (e.input_text.clone(), e.label.clone())).collect();
            let predictor_labels = (m.role() == Role::Rationalizer).then_some(&labels);
            let pseudo = pseudo_label(m.as_ref(), &examples, &fmt, predictor_labels, 0, max_generation_len)?;
            write_jsonl(&output, &pseudo)?;
            println!("wrote {} pseudo-labels to {}", pseudo.len(), output.display());
        }
        Command::Report { run_dir } => {
            let sweep = run_dir.join("sweep.txt");
            if sweep.exists() {
                print!("{}", std::fs::read_to_string(sweep)?);
            } else {
                let report = load_report(&run_dir)?;
                if let Ok(manifest) = load_manifest(&run_dir) {
                    println!("config hash {}", manifest.config_hash);
                }
                print!("{}", render_report(&report));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp_secs().init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
