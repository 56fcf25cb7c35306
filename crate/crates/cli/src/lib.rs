//! Command-line pipeline around the core library: corpus generation,
//! the two training stages, evaluation, probing, and exports.
//!
//! Every command reads the same flat config (see `--help` for the key
//! list) and a single seed governs all randomness. Precedence for the
//! seed is `--seed`, then `--set seed=..`, then `FAIRCL_SEED`, then the
//! config file, then the default.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use faircl_core::config::{FullConfig, CONFIG_KEYS};
use faircl_core::data::{self, Utterance};
use faircl_core::eval::{self, EvalReport};
use faircl_core::model::{self, ModelConfig};
use faircl_core::train::{self, Stage};
use faircl_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "faircl", version, about = "Fairness-aware contrastive pretraining pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic corpus and write its manifest plus features.
    GenData(GenDataArgs),
    /// Contrastive pretraining; writes per-epoch and best checkpoints.
    Pretrain(TrainArgs),
    /// CTC fine-tuning on top of a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Decode a corpus and report WER per cohort with gaps.
    Evaluate(CheckpointArgs),
    /// Train a linear probe predicting demographics from embeddings.
    Probe(ProbeArgs),
    /// Write per-utterance embeddings or their 2-D projection as CSV.
    ExportEmbeddings(ExportArgs),
    /// Sweep fairness weight and embedding-space sharing, one report per cell.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines; defaults fill in the rest.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set pretrain.lambda=0.5. Repeatable.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base seed, overriding the config file and FAIRCL_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest path; features go to a sibling directory.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus manifest to train on.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Training log path; defaults to train_log.jsonl in the out dir.
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Pretrained checkpoint to start from.
    #[arg(long, value_name = "PATH")]
    init: PathBuf,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus manifest to evaluate.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Checkpoint to load.
    #[arg(long, value_name = "PATH")]
    ckpt: PathBuf,
    /// Directory for report.txt and report.csv; stdout otherwise.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Probe a single attribute instead of all reported ones.
    #[arg(long, value_name = "NAME")]
    attribute: Option<String>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus manifest to embed.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Checkpoint to load.
    #[arg(long, value_name = "PATH")]
    ckpt: PathBuf,
    /// Output CSV path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Write 2-D principal-component coordinates instead of embeddings.
    #[arg(long)]
    coords: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Existing corpus manifest; generated from the config when absent.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Fairness weights to sweep, comma-separated.
    #[arg(long, value_name = "LIST", default_value = "0.01,0.1,1")]
    lambda: String,
    /// Embedding-space variants to sweep: shared, independent.
    #[arg(long, value_name = "LIST", default_value = "shared,independent")]
    space: String,
    /// Directory receiving one report per cell plus the merged table.
    #[arg(long, value_name = "DIR", default_value = "ablation")]
    out: PathBuf,
}

/// Parses argv and executes one command. Exit code 0 on success, 1 when
/// the command line or configuration is invalid, 2 on runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let command = Cli::command().after_help(config_key_help());
    let matches = match command.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn config_key_help() -> String {
    let defaults = FullConfig::default();
    let mut out = String::from("Config keys (shown with defaults):\n");
    for (key, help) in CONFIG_KEYS {
        let value = defaults.get(key).expect("every listed key renders");
        out.push_str(&format!("  {key} = {value}\n      {help}\n"));
    }
    out
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::Pretrain(args) => pretrain(args),
        Cmd::Finetune(args) => finetune(args),
        Cmd::Evaluate(args) => evaluate(args),
        Cmd::Probe(args) => probe(args),
        Cmd::ExportEmbeddings(args) => export_embeddings(args),
        Cmd::Ablate(args) => ablate(args),
    }
}

/// Config file, then FAIRCL_SEED, then --set pairs, then --seed.
fn load_config(common: &Common) -> Result<FullConfig> {
    let mut cfg = match &common.config {
        Some(path) => FullConfig::from_file(path)?,
        None => FullConfig::default(),
    };
    if let Ok(value) = std::env::var("FAIRCL_SEED") {
        cfg.seed = value.trim().parse().map_err(|_| {
            Error::config(format!("FAIRCL_SEED is not a valid seed: `{value}`"))
        })?;
    }
    for pair in &common.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::config(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        cfg.apply(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_corpus(path: &Path, cfg: &FullConfig) -> Result<Vec<Utterance>> {
    let opts = data::LoadOptions {
        n_mels: cfg.n_mels,
        ..data::LoadOptions::default()
    };
    let mut corpus = data::load_manifest_with(path, &opts)?;
    data::normalize_corpus(&mut corpus);
    Ok(corpus)
}

fn load_matching_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
) -> Result<faircl_core::model::Params<f64>> {
    let (params, digest) = model::load_checkpoint(path)?;
    if digest != cfg.digest() {
        return Err(Error::config(format!(
            "checkpoint {} was written for a different model configuration",
            path.display()
        )));
    }
    Ok(params)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let corpus = data::generate_synthetic_corpus(&cfg.corpus_config())?;
    data::write_corpus(&corpus, &args.out)?;
    println!("wrote {} utterances to {}", corpus.len(), args.out.display());
    Ok(())
}

fn run_stage(args: &TrainArgs, stage: Stage, pretrained: Option<&model::Params<f64>>) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let corpus = load_corpus(&args.data, &cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut tc = cfg.train_config(stage);
    tc.checkpoint_dir = Some(args.out.clone());
    tc.log_path = Some(
        args.log.clone().unwrap_or_else(|| args.out.join("train_log.jsonl")),
    );
    let (_, log) = match pretrained {
        None => train::pretrain(&corpus, &tc)?,
        Some(params) => train::finetune(&corpus, params, &tc)?,
    };
    let last = log.epochs().last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
    println!(
        "{stage} finished: {} epochs, final mean loss {last:.4}, checkpoints in {}",
        log.epochs().count(),
        args.out.display()
    );
    Ok(())
}

fn pretrain(args: TrainArgs) -> Result<()> {
    run_stage(&args, Stage::Pretrain, None)
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    let cfg = load_config(&args.train.common)?;
    let params = load_matching_checkpoint(&args.init, &cfg.model_config())?;
    run_stage(&args.train, Stage::Finetune, Some(&params))
}

fn evaluate(args: CheckpointArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let corpus = load_corpus(&args.data, &cfg)?;
    let model_cfg = cfg.model_config();
    let params = load_matching_checkpoint(&args.ckpt, &model_cfg)?;
    let report = eval::evaluate(&corpus, &params, &model_cfg, &cfg.report_attributes())?;
    let text = eval::render_text(&report);
    if let Some(out) = &args.out {
        write_text(&out.join("report.txt"), &text)?;
        write_text(&out.join("report.csv"), &eval::render_csv(&report))?;
    }
    print!("{text}");
    Ok(())
}

/// Mean-pooled encoder states, one row per utterance. Works on both
/// pretraining and fine-tuned checkpoints since only the encoder runs.
fn embed_corpus(
    corpus: &[Utterance],
    params: &model::Params<f64>,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    corpus
        .iter()
        .map(|utt| {
            let h = model::encode_one(&utt.spec, params, cfg);
            let frames = h.shape()[0];
            Ok(model::mean_pool(&h, frames)?.to_vec())
        })
        .collect()
}

fn probe(args: ProbeArgs) -> Result<()> {
    let cfg = load_config(&args.ckpt.common)?;
    let corpus = load_corpus(&args.ckpt.data, &cfg)?;
    let model_cfg = cfg.model_config();
    let params = load_matching_checkpoint(&args.ckpt.ckpt, &model_cfg)?;
    let embeddings = embed_corpus(&corpus, &params, &model_cfg)?;

    let attributes = match &args.attribute {
        Some(name) => vec![name.clone()],
        None => cfg.report_attributes(),
    };
    let mut out = String::from("attribute,train_acc,test_acc,chance\n");
    for attribute in &attributes {
        let labels: Vec<String> = corpus
            .iter()
            .map(|u| {
                u.demographics.get(attribute).map(str::to_string).ok_or_else(|| {
                    Error::data(format!("unknown demographic attribute `{attribute}`"))
                })
            })
            .collect::<Result<_>>()?;
        let result = eval::demographic_probe(&embeddings, &labels, attribute, cfg.seed)?;
        out.push_str(&format!(
            "{},{},{},{}\n",
            result.attribute, result.train_accuracy, result.test_accuracy, result.chance
        ));
    }
    if let Some(path) = &args.ckpt.out {
        write_text(&path.join("probe.csv"), &out)?;
    }
    print!("{out}");
    Ok(())
}

fn export_embeddings(args: ExportArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let corpus = load_corpus(&args.data, &cfg)?;
    let model_cfg = cfg.model_config();
    let params = load_matching_checkpoint(&args.ckpt, &model_cfg)?;
    let embeddings = embed_corpus(&corpus, &params, &model_cfg)?;
    let rows = if args.coords {
        eval::project_2d(&embeddings)?
            .into_iter()
            .map(|(x, y)| vec![x, y])
            .collect()
    } else {
        embeddings
    };
    let text = eval::render_embeddings(&corpus, &cfg.report_attributes(), &rows)?;
    write_text(&args.out, &text)?;
    println!("wrote {} embedding rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn parse_lambdas(list: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let value: f64 = item
            .parse()
            .map_err(|_| Error::config(format!("--lambda entry `{item}` is not a number")))?;
        out.push((item.to_string(), value));
    }
    if out.is_empty() {
        return Err(Error::config("--lambda needs at least one value"));
    }
    Ok(out)
}

fn parse_spaces(list: &str) -> Result<Vec<(String, bool)>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let shared = match item {
            "shared" => true,
            "independent" => false,
            other => {
                return Err(Error::config(format!(
                    "--space entry `{other}` is neither `shared` nor `independent`"
                )))
            }
        };
        out.push((item.to_string(), shared));
    }
    if out.is_empty() {
        return Err(Error::config("--space needs at least one value"));
    }
    Ok(out)
}

struct AblationCell {
    lambda: String,
    space: String,
    report: EvalReport,
}

fn ablate(args: AblateArgs) -> Result<()> {
    let base = load_config(&args.common)?;
    let lambdas = parse_lambdas(&args.lambda)?;
    let spaces = parse_spaces(&args.space)?;
    let corpus = match &args.data {
        Some(path) => load_corpus(path, &base)?,
        None => {
            let mut corpus = data::generate_synthetic_corpus(&base.corpus_config())?;
            data::normalize_corpus(&mut corpus);
            corpus
        }
    };

    let mut cells = Vec::new();
    for (lambda_name, lambda) in &lambdas {
        for (space_name, shared) in &spaces {
            let mut cfg = base.clone();
            cfg.lambda = *lambda;
            cfg.shared_projection = *shared;
            let report = run_cell(&corpus, &cfg)?;
            let cell_dir = args.out.join(format!("lambda{lambda_name}_{space_name}"));
            write_text(&cell_dir.join("report.txt"), &eval::render_text(&report))?;
            write_text(&cell_dir.join("report.csv"), &eval::render_csv(&report))?;
            println!("cell lambda={lambda_name} space={space_name} done");
            cells.push(AblationCell {
                lambda: lambda_name.clone(),
                space: space_name.clone(),
                report,
            });
        }
    }

    let attributes = base.report_attributes();
    let text = render_ablation_text(&cells, &attributes);
    write_text(&args.out.join("ablation.txt"), &text)?;
    write_text(&args.out.join("ablation.csv"), &render_ablation_csv(&cells, &attributes))?;
    print!("{text}");
    Ok(())
}

fn run_cell(corpus: &[Utterance], cfg: &FullConfig) -> Result<EvalReport> {
    let mut pre = cfg.train_config(Stage::Pretrain);
    pre.checkpoint_dir = None;
    pre.log_path = None;
    let (pretrained, _) = train::pretrain(corpus, &pre)?;

    let mut fine = cfg.train_config(Stage::Finetune);
    fine.checkpoint_dir = None;
    fine.log_path = None;
    let (params, _) = train::finetune(corpus, &pretrained, &fine)?;

    eval::evaluate(corpus, &params, &cfg.model_config(), &cfg.report_attributes())
}

fn cell_gap(cell: &AblationCell, attribute: &str) -> Option<f64> {
    cell.report
        .attributes
        .iter()
        .find(|a| a.attribute == attribute)
        .and_then(|a| a.gap)
}

fn render_ablation_text(cells: &[AblationCell], attributes: &[String]) -> String {
    let mut header = vec!["lambda".to_string(), "space".to_string(), "wer%".to_string()];
    for attribute in attributes {
        header.push(format!("{attribute} gap%"));
    }
    let mut rows = vec![header];
    for cell in cells {
        let mut row = vec![
            cell.lambda.clone(),
            cell.space.clone(),
            format!("{:.2}", 100.0 * cell.report.total_wer),
        ];
        for attribute in attributes {
            row.push(match cell_gap(cell, attribute) {
                Some(gap) => format!("{gap:.1}"),
                None => String::new(),
            });
        }
        rows.push(row);
    }

    let columns = rows[0].len();
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            if c < 2 {
                line.push_str(&format!("{:<width$}", cell, width = widths[c]));
            } else {
                line.push_str(&format!("{:>width$}", cell, width = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn render_ablation_csv(cells: &[AblationCell], attributes: &[String]) -> String {
    let mut out = String::from("lambda,space,wer_pct");
    for attribute in attributes {
        out.push_str(&format!(",{attribute}_gap_pct"));
    }
    out.push('\n');
    for cell in cells {
        out.push_str(&format!(
            "{},{},{}",
            cell.lambda,
            cell.space,
            100.0 * cell.report.total_wer
        ));
        for attribute in attributes {
            match cell_gap(cell, attribute) {
                Some(gap) => out.push_str(&format!(",{gap}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
