//! Argument definitions and the handler behind each subcommand.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use secrepair_core::checkpoint::save_checkpoint;
use secrepair_core::corpus::{pair_functions, parse_metadata, synthesize_pairs};
use secrepair_core::dataset::{build_records, default_seed_instructions, encode_prompt, save_records, split_dataset, InstructRecord, Task};
use secrepair_core::decode::{beam_search, sample_with_rng, DecodeConfig};
use secrepair_core::model::CausalLM;
use secrepair_core::ppo::{evaluate_policy, resolve_length_cap, rl_finetune, CommentTask, RewardSource, Rewarder};
use secrepair_core::reward::{preference_loss_step, HiddenStateEmbedder, RewardScorer};
use secrepair_core::tokenizer::{train_bpe, TokenizerModel};
use secrepair_core::trainer::{pack_splits, train_supervised};
use serde_json::json;

use crate::ablation::{run_ablation, Sweep};
use crate::artifacts::{fragments_from_dir, load_dataset, load_model, load_tokenizer, tokenizer_path};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::eval::{detokenize, prompt_ids, run_eval, task_decode_config};
use crate::scan::run_scan;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENIZER_FILE: &str = "tokenizer.txt";

#[derive(Debug, Parser)]
#[command(name = "secrepair", version, about = "Identify, repair, describe and comment vulnerable C functions with a small causal LM")]
pub struct Cli {
    /// TOML run configuration; flags given on the command line override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// Seed for every random choice (data order, initialization, sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an instruction dataset, split manifest and tokenizer.
    BuildDataset(BuildDatasetArgs),
    /// Train a model from scratch on a dataset's train split.
    Train(TrainArgs),
    /// Run one task on a single input.
    Infer(InferArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Fine-tune the comment task with PPO.
    RlFinetune(RlArgs),
    /// Run identification over every C/C++ function under a directory.
    Scan(ScanArgs),
    /// Sweep beam width or temperature and time the decoder.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct DecodeFlags {
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

impl DecodeFlags {
    fn apply(&self, cfg: &mut DecodeConfig) {
        if let Some(b) = self.beam {
            cfg.beam_size = b;
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(m) = self.max_new_tokens {
            cfg.max_new_tokens = m;
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `<checkpoint>.tokenizer`.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataFlags {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Directory of C/C++ sources to pair through `--metadata`.
    #[arg(long, requires = "metadata", conflicts_with = "synthetic")]
    pub source: Option<PathBuf>,
    /// JSON Lines sidecar: {"vul_id", "fix_id", "description", "comment"} per pair.
    #[arg(long, requires = "source")]
    pub metadata: Option<PathBuf>,
    /// Number of synthetic pairs to generate instead of reading sources.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Defaults to `tokenizer.txt` next to the dataset.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub task: Task,
    /// Code for identify/repair/describe, a description for comment.
    #[arg(long, conflicts_with = "input_file")]
    pub input: Option<String>,
    #[arg(long)]
    pub input_file: Option<PathBuf>,
    /// Overrides the task's first seed instruction.
    #[arg(long)]
    pub instruction: Option<String>,
    /// Sample at `--temperature` instead of running beam search.
    #[arg(long)]
    pub sample: bool,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Evaluate one task only.
    #[arg(long)]
    pub task: Option<Task>,
    /// Per-record and per-task metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct RlArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_enum)]
    pub reward_source: Option<RewardSourceArg>,
    #[arg(long)]
    pub updates: Option<usize>,
    /// Checkpoint to write; the reward curve goes to `<out>.rewards.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum RewardSourceArg {
    SemanticF1,
    LearnedScorer,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Directory to scan recursively.
    #[arg(long)]
    pub source: PathBuf,
    /// JSON Lines findings; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_enum)]
    pub sweep: Sweep,
    /// Comma-separated grid; defaults to 1,2,4,6,8 for beams and 0,0.25,0.5,0.75,1 for temperature.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Number of non-identify test records to decode.
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
    /// Timed repeats per grid point; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("a subcommand is required (see --help)".into()));
    };
    match command {
        Command::BuildDataset(a) => build_dataset(&cfg, &a),
        Command::Train(a) => train(&cfg, &a),
        Command::Infer(a) => infer(&cfg, &a),
        Command::Eval(a) => eval(&cfg, &a),
        Command::RlFinetune(a) => rl(&cfg, &a),
        Command::Scan(a) => scan(&cfg, &a),
        Command::Ablate(a) => ablate(&cfg, &a),
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn build_dataset(cfg: &RunConfig, a: &BuildDatasetArgs) -> Result<(), CliError> {
    let pairs = match (&a.source, &a.metadata) {
        (Some(src), Some(meta)) => {
            let fragments = fragments_from_dir(src)?;
            let text = std::fs::read_to_string(meta).map_err(|e| CliError::data(format!("{}: {e}", meta.display())))?;
            let report = pair_functions(&fragments, &parse_metadata(&text)?)?;
            eprintln!(
                "{} fragments: {} repair pairs, {} without a fix, {} unreferenced",
                fragments.len(),
                report.repair_pairs.len(),
                report.vulnerable_only.len(),
                report.unreferenced
            );
            let mut pairs = report.repair_pairs;
            pairs.extend(report.vulnerable_only);
            pairs
        }
        _ => synthesize_pairs(a.synthetic.unwrap_or(cfg.data.synthetic_pairs), cfg.seed),
    };
    let outcome = build_records(&pairs, &default_seed_instructions(), cfg.seed)?;
    let manifest = split_dataset(&outcome.records, cfg.seed)?;
    let texts: Vec<String> = outcome.records.iter().flat_map(|r| [r.prompt_text(), r.output.clone()]).collect();
    let tok = train_bpe(&texts, cfg.data.vocab_size)?;

    std::fs::create_dir_all(&a.out)?;
    save_records(&a.out.join(DATASET_FILE), &outcome.records)?;
    manifest.save(&a.out.join(MANIFEST_FILE))?;
    tok.save(&a.out.join(TOKENIZER_FILE))?;
    eprintln!(
        "{} records ({} skipped): train {} / valid {} / test {}; vocab {}",
        outcome.records.len(),
        outcome.skipped,
        manifest.train.len(),
        manifest.valid.len(),
        manifest.test.len(),
        tok.vocab_size()
    );
    Ok(())
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    let (records, manifest) = load_dataset(&a.data.dataset, &a.data.manifest)?;
    let tok_path = a
        .tokenizer
        .clone()
        .unwrap_or_else(|| a.data.dataset.parent().unwrap_or(Path::new(".")).join(TOKENIZER_FILE));
    let tok = load_tokenizer(&tok_path)?;
    let (train_set, valid_set) = pack_splits(&records, &manifest, &tok, cfg.model.max_len, cfg.data.loss_mode)?;
    let mut model = CausalLM::new(cfg.model.with_vocab(tok.vocab_size()), cfg.seed)?;
    eprintln!("training {} parameters on {} sequences", model.num_params(), train_set.len());
    let curve = train_supervised(&mut model, &train_set, &valid_set, &cfg.train)?;
    create_parent(&a.out)?;
    save_checkpoint(&model, &a.out)?;
    tok.save(&tokenizer_path(&a.out))?;
    curve.save_csv(&with_suffix(&a.out, ".loss.csv"))?;
    eprintln!("{} steps; wrote {}", curve.steps(), a.out.display());
    Ok(())
}

fn seed_instruction(task: Task) -> String {
    default_seed_instructions()[&task][0].clone()
}

fn infer(cfg: &RunConfig, a: &InferArgs) -> Result<(), CliError> {
    let input = match (&a.input, &a.input_file) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?,
        (None, None) => return Err(CliError::Usage("one of --input or --input-file is required".into())),
    };
    let (model, tok) = load_model(&a.model.checkpoint, a.model.tokenizer.as_deref())?;
    let mut dcfg = cfg.decode.clone();
    a.decode.apply(&mut dcfg);
    let dcfg = task_decode_config(a.task, &dcfg);
    let instruction = a.instruction.clone().unwrap_or_else(|| seed_instruction(a.task));
    let prompt = prompt_ids(&model, &tok, &instruction, &input, &dcfg);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if a.sample {
        let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed);
        let hyp = sample_with_rng(&model, &prompt, &dcfg, &mut rng)?;
        let text = detokenize(&tok, hyp.content(dcfg.eos_id))?;
        writeln!(out, "{}", json!({ "rank": 0, "text": text, "logprob": hyp.logprob_sum }))?;
    } else {
        for (rank, hyp) in beam_search(&model, &prompt, &dcfg)?.iter().enumerate() {
            let text = detokenize(&tok, hyp.content(dcfg.eos_id))?;
            writeln!(out, "{}", json!({ "rank": rank, "text": text, "logprob": hyp.logprob_sum }))?;
        }
    }
    Ok(())
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<(), CliError> {
    let (model, tok) = load_model(&a.model.checkpoint, a.model.tokenizer.as_deref())?;
    let (records, manifest) = load_dataset(&a.data.dataset, &a.data.manifest)?;
    if manifest.test.is_empty() {
        return Err(CliError::data("test split is empty"));
    }
    let mut dcfg = cfg.decode.clone();
    a.decode.apply(&mut dcfg);
    let outcome = run_eval(&model, &tok, &records, &manifest.test, a.task, &dcfg)?;
    create_parent(&a.out)?;
    outcome.save_csv(&a.out)?;
    for r in &outcome.reports {
        println!("{}", serde_json::to_string(r).map_err(CliError::data)?);
    }
    Ok(())
}

/// Comment-task prompts, description tokens and reference comments for `indices`.
pub fn comment_tasks(records: &[InstructRecord], indices: &[usize], tok: &TokenizerModel, max_len: usize, reserve: usize) -> Vec<CommentTask> {
    indices
        .iter()
        .map(|&i| &records[i])
        .filter(|r| r.task == Task::Comment)
        .map(|r| CommentTask {
            prompt: encode_prompt(tok, &r.instruction, &r.input, max_len, reserve),
            description: tok.encode(&r.input),
            reference: tok.encode(&r.output),
        })
        .filter(|t| !t.description.is_empty() && !t.reference.is_empty())
        .collect()
}

/// Fits a preference scorer that ranks each task's reference comment above
/// the reference of the next task.
pub fn fit_preference_scorer(tasks: &[CommentTask], vocab_size: usize, seed: u64, epochs: usize) -> Result<RewardScorer, CliError> {
    const DIM: usize = 16;
    const LR: f64 = 0.5;
    let mut scorer = RewardScorer::new(vocab_size, DIM, seed);
    for epoch in 0..epochs {
        let mut total = 0.0;
        let mut n = 0;
        for (i, t) in tasks.iter().enumerate() {
            let other = &tasks[(i + 1) % tasks.len()].reference;
            if *other == t.reference {
                continue;
            }
            total += preference_loss_step(&mut scorer, &t.description, &t.reference, other, LR)?;
            n += 1;
        }
        log::debug!("scorer epoch {}: mean loss {:.4}", epoch + 1, total / n.max(1) as f64);
    }
    Ok(scorer)
}

fn rl(cfg: &RunConfig, a: &RlArgs) -> Result<(), CliError> {
    let (supervised, tok) = load_model(&a.model.checkpoint, a.model.tokenizer.as_deref())?;
    let (records, manifest) = load_dataset(&a.data.dataset, &a.data.manifest)?;
    let mut pcfg = cfg.ppo.clone();
    if let Some(u) = a.updates {
        pcfg.updates = u;
    }
    if let Some(src) = a.reward_source {
        pcfg.reward_source = match src {
            RewardSourceArg::SemanticF1 => RewardSource::SemanticF1,
            RewardSourceArg::LearnedScorer => RewardSource::LearnedScorer,
        };
    }
    let max_len = supervised.config().max_len;
    let reserve = pcfg.max_new_tokens.min(max_len / 2);
    let train_tasks = comment_tasks(&records, &manifest.train, &tok, max_len, reserve);
    let held_idx: Vec<usize> = manifest.valid.iter().chain(&manifest.test).copied().collect();
    let held_tasks = comment_tasks(&records, &held_idx, &tok, max_len, reserve);
    if train_tasks.is_empty() {
        return Err(CliError::data("train split has no comment records"));
    }

    let embedder = HiddenStateEmbedder { model: &supervised };
    let scorer;
    let rewarder = match pcfg.reward_source {
        RewardSource::SemanticF1 => Rewarder::Semantic(&embedder),
        RewardSource::LearnedScorer => {
            scorer = fit_preference_scorer(&train_tasks, tok.vocab_size(), pcfg.seed, 20)?;
            Rewarder::Scorer(&scorer)
        }
    };
    let (policy, curve) = rl_finetune(&supervised, &train_tasks, &rewarder, &pcfg)?;
    create_parent(&a.out)?;
    save_checkpoint(&policy, &a.out)?;
    tok.save(&tokenizer_path(&a.out))?;
    curve.save_csv(&with_suffix(&a.out, ".rewards.csv"))?;
    if !held_tasks.is_empty() {
        let cap = resolve_length_cap(&train_tasks, &pcfg);
        let eval_seed = pcfg.seed.wrapping_add(1);
        let before = evaluate_policy(&supervised, &held_tasks, &rewarder, cap, &pcfg, 1, eval_seed)?;
        let after = evaluate_policy(&policy, &held_tasks, &rewarder, cap, &pcfg, 1, eval_seed)?;
        println!("{}", json!({ "held_out_tasks": held_tasks.len(), "reward_before": before, "reward_after": after }));
    }
    Ok(())
}

fn scan(cfg: &RunConfig, a: &ScanArgs) -> Result<(), CliError> {
    let (model, tok) = load_model(&a.model.checkpoint, a.model.tokenizer.as_deref())?;
    let mut dcfg = cfg.decode.clone();
    a.decode.apply(&mut dcfg);
    let report = run_scan(&model, &tok, &a.source, &seed_instruction(Task::Identify), &dcfg)?;
    match &a.out {
        Some(p) => {
            create_parent(p)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
            report.write_jsonl(&mut w)?;
            w.flush()?;
        }
        None => report.write_jsonl(std::io::stdout().lock())?,
    }
    eprintln!(
        "{} functions in {} files ({} skipped); {:.1}% flagged",
        report.findings.len(),
        report.files_scanned,
        report.files_skipped,
        100.0 * report.yes_rate()
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, a: &AblateArgs) -> Result<(), CliError> {
    let (model, tok) = load_model(&a.model.checkpoint, a.model.tokenizer.as_deref())?;
    let (records, manifest) = load_dataset(&a.data.dataset, &a.data.manifest)?;
    let mut dcfg = cfg.decode.clone();
    a.decode.apply(&mut dcfg);
    let chosen: Vec<&InstructRecord> =
        manifest.test.iter().map(|&i| &records[i]).filter(|r| r.task != Task::Identify).take(a.limit).collect();
    let grid = a.grid.clone().unwrap_or_else(|| a.sweep.default_grid().to_vec());
    let result = run_ablation(&model, &tok, &chosen, a.sweep, &grid, &dcfg, a.repeats)?;
    create_parent(&a.out)?;
    result.save_csv(&a.out)?;
    Ok(())
}
