use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msmp_core::dataset::{infer_schema, list_samples, load_graph_file};
use msmp_core::diagnostics::{has_errors, Diagnostic};
use msmp_core::nn::ParameterStore;
use msmp_core::runtime::CompiledModel;
use msmp_core::schema::{export_msmp_dot, parse_model_description};
use msmp_core::training::{evaluate, resolve_checkpoint, thread_pool, train_with, TrainConfig};
use msmp_core::validator::{validate_dataset, validate_semantics};
use msmp_core::zoo::{generate, Task, TopologyGenConfig};
use msmp_core::Error;

/// Compile, train and run multi-stage message passing GNNs described in YAML.
#[derive(Debug, Parser)]
#[command(name = "msmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a model description, optionally against a dataset.
    Validate {
        #[arg(long)]
        model: PathBuf,
        /// Dataset root or split directory to check features and labels against.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print diagnostics as JSON lines on stdout.
        #[arg(long)]
        json: bool,
    },
    /// Train on `<data>/train`, validating on `<data>/validation`.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory; overrides `checkpoint_dir` from --config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// YAML file with training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write one prediction per graph file as JSON lines.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print loss, MRE and accuracy over a directory as JSON.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Export the message passing structure as Graphviz DOT.
    Visualize {
        #[arg(long)]
        model: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with oracle labels.
    Gen {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Node count range for training samples, e.g. `5-10`.
        #[arg(long, value_parser = parse_range)]
        nodes: Option<(usize, usize)>,
        /// Node count range for validation samples.
        #[arg(long, value_parser = parse_range)]
        validation_nodes: Option<(usize, usize)>,
        #[arg(long)]
        max_utilization: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of graph files.
    #[arg(long)]
    data: PathBuf,
    /// Parameter file, `latest` pointer, or checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("'{x}': {e}"));
    match s.split_once('-') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

enum Failure {
    Invalid(Vec<Diagnostic>),
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidModel(diags) => Failure::Invalid(diags),
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<CompiledModel, Failure> {
    Ok(CompiledModel::from_yaml(&read(path)?)?)
}

fn write_out(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Runtime(Error::Runtime(format!("{}: {e}", p.display())))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_params(model: &CompiledModel, checkpoint: &Path) -> Result<ParameterStore, Failure> {
    let path = resolve_checkpoint(checkpoint)?;
    let params = ParameterStore::load(&path)?;
    model.check_parameters(&params)?;
    Ok(params)
}

fn validate(model: &Path, data: Option<&Path>, json: bool) -> Outcome {
    let text = read(model)?;
    let mut diags = match parse_model_description(&text) {
        Ok(m) => {
            let mut d = validate_semantics(&m);
            if let (Some(dir), false) = (data, has_errors(&d)) {
                d.extend(validate_dataset(&m, &infer_schema(dir)?));
            }
            d
        }
        Err(d) => d,
    };
    diags.sort_by_key(|d| d.line);
    for d in &diags {
        if json {
            println!("{}", d.to_json_line());
        } else {
            eprintln!("{}: {d}", model.display());
        }
    }
    if has_errors(&diags) {
        return Err(Failure::Invalid(Vec::new()));
    }
    Ok(())
}

fn train(
    model: &Path,
    data: &Path,
    out: Option<PathBuf>,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Outcome {
    let compiled = load_model(model)?;
    let mut cfg = TrainConfig::default();
    if let Some(path) = config {
        cfg.apply_yaml(&read(path)?)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if out.is_some() {
        cfg.checkpoint_dir = out;
    }
    if cfg.checkpoint_dir.is_none() {
        return Err(Failure::Usage("train needs --out or checkpoint_dir in --config".into()));
    }
    let stdout = std::io::stdout();
    train_with(&compiled, data, &cfg, |entry| {
        let mut lock = stdout.lock();
        let _ = writeln!(lock, "{}", serde_json::to_string(entry).unwrap_or_default());
    })?;
    Ok(())
}

fn predict(run: &RunArgs, out: Option<&Path>) -> Outcome {
    let model = load_model(&run.model)?;
    let params = load_params(&model, &run.checkpoint)?;
    let mut text = String::new();
    for path in list_samples(&run.data)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let graph = load_graph_file(&path)?;
        let pred = model.predict(&params, &graph).map_err(|e| e.in_sample(name.clone()))?;
        text.push_str(&pred.to_json(&name).to_string());
        text.push('\n');
    }
    write_out(out, &text)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Validate { model, data, json } => validate(&model, data.as_deref(), json),
        Command::Train { model, data, out, config, seed, epochs } => {
            train(&model, &data, out, config.as_deref(), seed, epochs)
        }
        Command::Predict { run, out } => predict(&run, out.as_deref()),
        Command::Evaluate { run } => {
            let model = load_model(&run.model)?;
            let params = load_params(&model, &run.checkpoint)?;
            let metrics = evaluate(&model, &params, &run.data)?;
            println!("{}", metrics.to_json());
            Ok(())
        }
        Command::Visualize { model, out } => {
            let m = parse_model_description(&read(&model)?).map_err(Failure::Invalid)?;
            write_out(out.as_deref(), &export_msmp_dot(&m))
        }
        Command::Gen { task, out, seed, count, nodes, validation_nodes, max_utilization } => {
            let mut cfg = TopologyGenConfig::new(task);
            cfg.seed = seed;
            cfg.count = count;
            if let Some(n) = nodes {
                cfg.nodes = n;
            }
            cfg.validation_nodes = validation_nodes;
            if let Some(u) = max_utilization {
                cfg.max_utilization = u;
            }
            let summary = generate(&cfg, &out)?;
            eprintln!("wrote {} train and {} validation samples to {}", summary.train, summary.validation, out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(diags)) => {
            for d in &diags {
                eprintln!("{d}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
