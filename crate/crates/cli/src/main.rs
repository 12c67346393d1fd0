//! Desk-experiment command line: `describe`, `check`, `train`, `eval`,
//! `export`.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical-check failure,
//! 3 I/O error. All randomness flows from `--seed`, split into named
//! streams (init, droppath, data), so every subcommand is deterministic
//! under a fixed seed. `TNT_THREADS` caps worker parallelism.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use tnt_core::checkpoint;
use tnt_core::complexity::{self, ratio_floor_2dp};
use tnt_core::dataset::{self, ToyDataset};
use tnt_core::gradcheck;
use tnt_core::introspect::{self, HeadSel};
use tnt_core::model::{Model, TntConfig};
use tnt_core::tape::OpKind;
use tnt_core::tokenizer::ImageInput;
use tnt_core::training::{self, TrainSettings};
use tnt_core::TntError;

// ── Error/exit-code mapping ──────────────────────────────────────────────

enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl From<TntError> for CliError {
    fn from(e: TntError) -> Self {
        match &e {
            TntError::Config(_) => CliError::Usage(e.to_string()),
            TntError::Numeric(_) | TntError::Shape { .. } => CliError::Numeric(e.to_string()),
            TntError::Io { .. } | TntError::Format(_) => CliError::Io(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ── Argument structs ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "tnt",
    version,
    about = "Dual word/sentence vision transformer: describe, verify, train, inspect"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the FLOPs/parameter report for a configuration
    Describe(DescribeArgs),
    /// Run gradient checks and attention-oracle equivalence on tnt-micro
    Check(CheckArgs),
    /// Train on a synthetic task and write metrics + checkpoint
    Train(TrainArgs),
    /// Report top-1 accuracy of a checkpoint on a task split
    Eval(EvalArgs),
    /// Export attention maps or word feature maps from a checkpoint
    Export(ExportArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Architecture preset: tnt-ti | tnt-s | tnt-b | tnt-micro
    #[arg(long, default_value = "tnt-micro")]
    preset: String,
    /// JSON config file; fields override the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-field overrides, e.g. --set depth=6 --set pos_enc.word=false
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// TNT layer index set, comma separated 1-based ("" for none)
    #[arg(long, value_name = "LIST")]
    indices: Option<String>,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Emit the report as JSON instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Relative-error tolerance for the whole-model sweep
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Entries sampled per parameter tensor
    #[arg(long, default_value_t = 4)]
    entries: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Test fixture: flip the named op's backward rule to prove the
    /// harness catches it
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Subpatch,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Heldout,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = Task::Subpatch)]
    task: Task,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for metrics.jsonl and model.tntc
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    train_size: usize,
    #[arg(long, default_value_t = 256)]
    heldout_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Warmup steps; default keeps the published 5/300 fraction
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    /// Global-norm gradient clip (off unless given)
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::Subpatch)]
    task: Task,
    #[arg(long, value_enum, default_value_t = Split::Heldout)]
    split: Split,
    /// Seed the task was generated from (must match the training run)
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    train_size: usize,
    #[arg(long, default_value_t = 256)]
    heldout_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    InnerAttn,
    OuterAttn,
    ClassAttn,
    WordMaps,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    kind: ExportKind,
    /// Input image: .ppm (binary P6) or .tnta ([h, w, 3] floats)
    #[arg(long, conflicts_with = "sample")]
    image: Option<PathBuf>,
    /// Use sample N of the synthetic task instead of an image file
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, value_enum, default_value_t = Task::Subpatch)]
    task: Task,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// 1-based layer; 0 selects the pre-encoding projection (word-maps only)
    #[arg(long)]
    layer: usize,
    /// Sentence index (inner attention only)
    #[arg(long, default_value_t = 0)]
    sentence: usize,
    /// Head index or "mean"
    #[arg(long, default_value = "mean")]
    head: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write a CSV next to the binary output
    #[arg(long)]
    csv: bool,
}

// ── Config resolution (precedence: CLI > file > preset) ──────────────────

fn parse_override_value(key: &str, raw: &str) -> serde_json::Value {
    if key.rsplit('.').next() == Some("tnt_block_indices") {
        let items: Vec<serde_json::Value> = raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .filter_map(|s| s.trim().parse::<u64>().ok().map(Into::into))
            .collect();
        return serde_json::Value::Array(items);
    }
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn apply_override(
    root: &mut serde_json::Value,
    key: &str,
    value: serde_json::Value,
) -> Result<(), CliError> {
    let mut node = &mut *root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("override key '{key}' does not address a field")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(usage(format!(
                    "unknown config field '{part}' in override '{key}'"
                )));
            }
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| usage(format!("unknown config field '{part}' in override '{key}'")))?;
    }
    Err(usage(format!("empty override key '{key}'")))
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    Some(slot) => *slot = v,
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TntConfig, CliError> {
        let preset = TntConfig::preset(&self.preset).ok_or_else(|| {
            usage(format!(
                "unknown preset '{}'; available: {}",
                self.preset,
                TntConfig::preset_names().join(", ")
            ))
        })?;
        let mut value = serde_json::to_value(&preset).expect("config serializes");
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let overlay: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Io(format!("{}: bad JSON: {e}", path.display())))?;
            merge_json(&mut value, overlay);
        }
        for kv in &self.set {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set needs KEY=VALUE, got '{kv}'")))?;
            apply_override(&mut value, key, parse_override_value(key, raw))?;
        }
        if let Some(indices) = &self.indices {
            apply_override(
                &mut value,
                "tnt_block_indices",
                parse_override_value("tnt_block_indices", indices),
            )?;
        }
        let config: TntConfig = serde_json::from_value(value)
            .map_err(|e| usage(format!("config does not deserialize: {e}")))?;
        config.validate().map_err(CliError::from)?;
        Ok(config)
    }
}

// ── Subcommands ──────────────────────────────────────────────────────────

fn cmd_describe(args: DescribeArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let report = complexity::model_report(&config)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        let mut head = String::new();
        let _ = writeln!(
            head,
            "preset {} ({}x{}, depth {}, tnt layers {:?})",
            args.config.preset,
            config.image_h,
            config.image_w,
            config.depth,
            config.tnt_block_indices
        );
        print!("{head}{}", report.render_table());
        println!(
            "summary: params {} (exhaustive), flops {} (formula), block ratios {:.2}x / {:.2}x",
            complexity::human(report.exhaustive_params_total),
            complexity::human(report.formula_flops_total),
            ratio_floor_2dp(report.block_flops_ratio),
            ratio_floor_2dp(report.block_params_ratio),
        );
    }
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<(), CliError> {
    let fault = match &args.inject_fault {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name)
                .ok_or_else(|| usage(format!("unknown op '{name}' for fault injection")))?,
        ),
    };
    println!(
        "verification suite on tnt-micro (eps {:.1e}, tol {:.1e}, seed {})",
        args.eps, args.tol, args.seed
    );
    let ops = gradcheck::check_op_gradients(args.eps, fault);
    print!("{}", ops.render());
    let oracle = gradcheck::check_msa_oracle(1e-10);
    let oracle_pass = oracle.passed();
    println!(
        "attention oracle: {} configurations, {}",
        oracle.entries.len(),
        if oracle_pass { "all match the triple-loop reference" } else { "MISMATCH" }
    );
    if !oracle_pass {
        print!("{}", oracle.render());
    }
    let model_report =
        gradcheck::check_model_gradients(&TntConfig::tnt_micro(), args.seed, args.eps, args.tol, args.entries)?;
    print!("{}", model_report.render());
    if ops.passed() && oracle_pass && model_report.passed() {
        println!("check: PASS");
        Ok(())
    } else {
        let mut failing: Vec<&str> = Vec::new();
        failing.extend(ops.entries.iter().filter(|e| !e.pass).map(|e| e.name.as_str()));
        failing.extend(oracle.entries.iter().filter(|e| !e.pass).map(|e| e.name.as_str()));
        failing.extend(model_report.entries.iter().filter(|e| !e.pass).map(|e| e.name.as_str()));
        Err(CliError::Numeric(format!("check failed: {}", failing.join(", "))))
    }
}

fn make_task(task: Task, seed: u64, train_size: usize, heldout_size: usize) -> (ToyDataset, ToyDataset) {
    match task {
        Task::Subpatch => dataset::train_heldout(seed, train_size, heldout_size),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = args.config.resolve()?;
    let (train_set, heldout_set) = make_task(args.task, args.seed, args.train_size, args.heldout_size);
    if config.n_classes != train_set.n_classes {
        println!(
            "note: overriding n_classes {} -> {} to match the task",
            config.n_classes, train_set.n_classes
        );
        config.n_classes = train_set.n_classes;
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;
    let metrics_path = args.out.join("metrics.jsonl");
    let metrics_file = std::fs::File::create(&metrics_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", metrics_path.display())))?;
    let mut metrics_file = std::io::BufWriter::new(metrics_file);

    let settings = TrainSettings {
        steps: args.steps,
        batch_size: args.batch,
        lr_max: args.lr,
        warmup_steps: args.warmup.unwrap_or(args.steps / 60),
        weight_decay: args.weight_decay,
        label_smoothing: args.label_smoothing,
        grad_clip: args.grad_clip,
        seed: args.seed,
        ..TrainSettings::default()
    };
    let mut model = Model::build(&config, args.seed).map_err(CliError::from)?;
    println!(
        "training {} params for {} steps (batch {}, lr {}, warmup {})",
        model.param_count(),
        settings.steps,
        settings.batch_size,
        settings.lr_max,
        settings.warmup_steps
    );
    let every = (settings.steps / 10).max(1);
    let outcome = training::train(&mut model, &train_set, &settings, |rec| {
        let line = serde_json::to_string(rec).expect("metrics record serializes");
        let _ = writeln!(metrics_file, "{line}");
        if rec.step % every == 0 || rec.step + 1 == settings.steps {
            println!("step {:>6}  lr {:.3e}  loss {:.4}  acc {:.3}", rec.step, rec.lr, rec.loss, rec.acc);
        }
    });
    metrics_file.flush().map_err(|e| CliError::Io(format!("metrics: {e}")))?;
    let report = match outcome {
        Ok(r) => r,
        Err(e) => {
            // Divergence path: the model was rolled back; keep the evidence.
            let rescue = args.out.join("last_good.tntc");
            checkpoint::save_model(&model, &rescue)?;
            return Err(CliError::Numeric(format!("{e}; last good state saved to {}", rescue.display())));
        }
    };
    let ckpt = args.out.join("model.tntc");
    checkpoint::save_with_state(&model, Some(&checkpoint::SavedTrainState::from_optim(&report.state)), &ckpt)?;
    let train_acc = training::evaluate(&model, &train_set)?;
    let heldout_acc = training::evaluate(&model, &heldout_set)?;
    println!("final: train top-1 {train_acc:.4}, heldout top-1 {heldout_acc:.4}");
    println!("checkpoint: {}", ckpt.display());
    println!("metrics:    {}", metrics_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let model = checkpoint::load_model(&args.ckpt)?;
    let (train_set, heldout_set) = make_task(args.task, args.seed, args.train_size, args.heldout_size);
    let (name, set) = match args.split {
        Split::Train => ("train", &train_set),
        Split::Heldout => ("heldout", &heldout_set),
    };
    let acc = training::evaluate(&model, set)?;
    println!("top-1 on {name} ({} samples): {acc:.4}", set.len());
    Ok(())
}

fn load_image(args: &ExportArgs, model: &Model) -> Result<ImageInput, CliError> {
    if let Some(path) = &args.image {
        let img = match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => ImageInput::from_ppm_file(path)?,
            _ => ImageInput::from_tensor(&introspect::read_tnta(path)?)?,
        };
        return Ok(img);
    }
    let index = args.sample.ok_or_else(|| usage("provide --image FILE or --sample N"))?;
    let (train_set, _) = make_task(args.task, args.seed, index + 1, 1);
    if model.config.image_h != 32 || model.config.image_w != 32 {
        return Err(usage(format!(
            "task images are 32x32 but the checkpoint expects {}x{}",
            model.config.image_h, model.config.image_w
        )));
    }
    Ok(train_set.images[index].clone())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let model = checkpoint::load_model(&args.ckpt)?;
    let img = load_image(&args, &model)?;
    let head = match args.head.as_str() {
        "mean" => HeadSel::Mean,
        other => HeadSel::Index(
            other.parse().map_err(|_| usage(format!("--head must be an index or 'mean', got '{other}'")))?,
        ),
    };
    let written: tnt_core::Tensor = match args.kind {
        ExportKind::InnerAttn => {
            let dump = introspect::export_inner_attention(&model, &img, args.layer, args.sentence, head, &args.out)?;
            println!(
                "inner attention layer {} sentence {} ({} queries over a {}x{} word grid)",
                args.layer,
                args.sentence,
                dump.matrix.shape()[0],
                dump.grid.0,
                dump.grid.1
            );
            dump.matrix
        }
        ExportKind::OuterAttn => {
            let dump = introspect::export_outer_attention(&model, &img, args.layer, head, &args.out)?;
            println!(
                "outer attention layer {} ({} tokens, patch grid {}x{})",
                args.layer,
                dump.matrix.shape()[0],
                dump.grid.0,
                dump.grid.1
            );
            dump.matrix
        }
        ExportKind::ClassAttn => {
            let dump = introspect::export_class_attention(&model, &img, args.layer, &args.out)?;
            println!(
                "class attention layer {} over a {}x{} grid; class self-weight {:.6}",
                args.layer,
                dump.weights.shape()[0],
                dump.weights.shape()[1],
                dump.self_weight
            );
            dump.weights
        }
        ExportKind::WordMaps => {
            let maps = introspect::export_word_feature_maps(&model, &img, args.layer, &args.out)?;
            println!(
                "word feature maps layer {}: {} patches of {}x{}",
                args.layer,
                maps.shape()[0],
                maps.shape()[1],
                maps.shape()[2]
            );
            maps
        }
    };
    println!("wrote {}", args.out.display());
    if args.csv {
        let csv_path = args.out.with_extension("csv");
        introspect::write_csv(&csv_path, &written)?;
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

// ── Entry point ──────────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<(), CliError> {
    if let Ok(raw) = std::env::var("TNT_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| usage(format!("TNT_THREADS must be a positive integer, got '{raw}'")))?;
        if n == 0 {
            return Err(usage("TNT_THREADS must be >= 1"));
        }
        tnt_core::configure_threads(n)?;
    }
    match cli.command {
        Command::Describe(args) => cmd_describe(args),
        Command::Check(args) => cmd_check(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion)
                || e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
