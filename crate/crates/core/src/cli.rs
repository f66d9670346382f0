//! The `mergebench` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Reports go to stdout,
//! diagnostics to stderr. `--format structured` emits JSON.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dlt::{self, PerplexityRecord, Split};
use crate::ehr::{self, InputFormat, PromptTemplate, SerializationFilter};
use crate::merge::{MergeMethod, MergeRecipe, SlerpOptions};
use crate::metrics::{self, AnswerLexicon};
use crate::retrieval::{self, Bm25Params, IrMetrics, MapDenominator, Ranking, Tokenizer};
use crate::sweep::{
    self, EvalTask, Example, ExternalEvaluator, LambdaGrid, MetricSpec, SweepOptions, SweepResult, ToyEvaluator,
};
use crate::tensor_store::{self, TensorMap};
use crate::toy_lm::{self, fixtures, ToyLm, UnknownPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mergebench",
    version,
    about = "Checkpoint merging, coefficient sweeps and evaluation tools"
)]
pub struct Cli {
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
    /// Seed for every generated fixture.
    #[arg(long, global = true, default_value_t = 17)]
    pub seed: u64,
    /// Worker cap for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Omit the `generated_at` field from structured output.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// More diagnostics on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Structured,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge checkpoints as described by a recipe.
    Merge(MergeArgs),
    /// Sweep the merge coefficient over a grid and pick lambda*.
    Sweep(SweepArgs),
    /// AUROC / AUPRC from a predictions file.
    Metrics(MetricsArgs),
    /// Perplexity-based data leakage test.
    Dlt(DltArgs),
    /// Toy bigram language models.
    Toylm {
        #[command(subcommand)]
        command: ToyCommand,
    },
    /// Serialize patient records to text.
    Serialize(SerializeArgs),
    /// Character statistics of serialized patients or plain texts.
    Stats(StatsArgs),
    /// BM25 retrieval with optional query expansion and rank fusion.
    Retrieve(RetrieveArgs),
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long, env = "MERGEBENCH_RECIPE")]
    pub recipe: PathBuf,
    /// Output path; defaults to the recipe's `output`.
    #[arg(long, env = "MERGEBENCH_OUT")]
    pub out: Option<PathBuf>,
    /// Override the recipe's lambda (weight of the last input).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Do not record merge settings in the output metadata.
    #[arg(long)]
    pub no_provenance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Linear,
    Slerp,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Recipe whose inputs and method are swept (lambda is ignored).
    #[arg(long, env = "MERGEBENCH_RECIPE", conflicts_with = "toy")]
    pub recipe: Option<PathBuf>,
    /// Two toy checkpoints to sweep between, evaluated in-process.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub toy: Option<Vec<PathBuf>>,
    /// Method for --toy sweeps.
    #[arg(long, value_enum, default_value_t = MethodArg::Linear)]
    pub method: MethodArg,
    #[arg(long, default_value = "0:1:0.1")]
    pub grid: LambdaGrid,
    #[arg(long, default_value = "neg_perplexity")]
    pub metric: MetricSpec,
    /// Examples as `id<TAB>label<TAB>text`; toy sweeps default to the seeded held-out mix.
    #[arg(long, env = "MERGEBENCH_TASK")]
    pub task: Option<PathBuf>,
    #[arg(long, default_value = "mortality")]
    pub template: PromptTemplate,
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
    /// Evaluator command with {checkpoint}, {fold} and {out} placeholders.
    #[arg(long)]
    pub evaluator: Option<String>,
    /// Per-evaluation timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Keep merged checkpoints here instead of a temporary directory.
    #[arg(long, env = "MERGEBENCH_WORK_DIR")]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// `id<TAB>label<TAB>answer[<TAB>logprob_yes<TAB>logprob_no]` per line.
    #[arg(long, env = "MERGEBENCH_PREDICTIONS")]
    pub predictions: PathBuf,
    /// Comma-separated positive answer words.
    #[arg(long, value_delimiter = ',')]
    pub positive: Option<Vec<String>>,
    /// Comma-separated negative answer words.
    #[arg(long, value_delimiter = ',')]
    pub negative: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct DltArgs {
    /// Records `split doc_id n_tokens nll_sum`.
    #[arg(long, env = "MERGEBENCH_PERPLEXITIES", required_unless_present_all = ["p_train", "p_test", "p_ref"])]
    pub perplexities: Option<PathBuf>,
    #[arg(long, conflicts_with = "perplexities", requires_all = ["p_test", "p_ref"])]
    pub p_train: Option<f64>,
    #[arg(long, conflicts_with = "perplexities")]
    pub p_test: Option<f64>,
    #[arg(long, conflicts_with = "perplexities")]
    pub p_ref: Option<f64>,
    #[arg(long, default_value_t = dlt::DEFAULT_OVERFIT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Write the seeded letter / digit models, their corpora and the held-out mix.
    Fixtures {
        #[arg(long, env = "MERGEBENCH_OUT")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Train a bigram model on one text per line.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Extra text files whose characters join the vocabulary.
        #[arg(long)]
        vocab_from: Vec<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, env = "MERGEBENCH_OUT")]
        out: PathBuf,
    },
    /// Per-document NLL records for `dlt`.
    Perplexity {
        #[arg(long)]
        model: PathBuf,
        /// `id<TAB>text` or plain text per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Fail on characters outside the model vocabulary.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PatientFormatArg {
    Jsonl,
    Tsv,
}

impl From<PatientFormatArg> for InputFormat {
    fn from(f: PatientFormatArg) -> Self {
        match f {
            PatientFormatArg::Jsonl => InputFormat::RecordPerLine,
            PatientFormatArg::Tsv => InputFormat::Delimited,
        }
    }
}

#[derive(Debug, Args)]
pub struct SerializeArgs {
    #[arg(long, env = "MERGEBENCH_PATIENTS")]
    pub patients: PathBuf,
    #[arg(long, value_enum, default_value_t = PatientFormatArg::Jsonl)]
    pub input_format: PatientFormatArg,
    #[arg(long, default_value = "full")]
    pub filter: SerializationFilter,
    /// Wrap each serialization in a prompt template.
    #[arg(long)]
    pub template: Option<PromptTemplate>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Reports both the full and hard serializations.
    #[arg(
        long,
        env = "MERGEBENCH_PATIENTS",
        required_unless_present = "texts",
        conflicts_with = "texts"
    )]
    pub patients: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PatientFormatArg::Jsonl)]
    pub input_format: PatientFormatArg,
    /// One text per line, backslash escapes allowed.
    #[arg(long)]
    pub texts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MapDenominatorArg {
    All,
    Truncated,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// `doc_id<TAB>text` per line.
    #[arg(long, env = "MERGEBENCH_CORPUS")]
    pub corpus: PathBuf,
    /// `query_id<TAB>text` per line.
    #[arg(long, env = "MERGEBENCH_QUERIES")]
    pub queries: PathBuf,
    /// `query_id<TAB>keywords` per line; enables expansion and fusion.
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    /// Four-column relevance judgments; enables metrics.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Six-column run file with every ranking produced.
    #[arg(long)]
    pub run_out: Option<PathBuf>,
    /// One stopword per line.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub top_k: usize,
    #[arg(long, default_value_t = retrieval::DEFAULT_K1)]
    pub k1: f64,
    #[arg(long, default_value_t = retrieval::DEFAULT_B)]
    pub b: f64,
    #[arg(long, default_value_t = retrieval::DEFAULT_K_RRF)]
    pub k_rrf: usize,
    #[arg(long, value_enum, default_value_t = MapDenominatorArg::All)]
    pub map_denominator: MapDenominatorArg,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

struct Report {
    text: String,
    json: Value,
}

struct Ctx {
    seed: u64,
    jobs: Option<usize>,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        jobs: cli.jobs,
    };
    let command_name = command_name(&cli.command);
    let result = match &cli.command {
        Command::Merge(a) => cmd_merge(a),
        Command::Sweep(a) => cmd_sweep(a, &ctx),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Dlt(a) => cmd_dlt(a),
        Command::Toylm { command } => cmd_toylm(command, &ctx),
        Command::Serialize(a) => cmd_serialize(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Retrieve(a) => cmd_retrieve(a),
    };
    match result {
        Ok(report) => {
            let out = match cli.format {
                OutputFormat::Text => report.text,
                OutputFormat::Structured => {
                    let mut obj = serde_json::Map::new();
                    obj.insert("command".into(), json!(command_name));
                    if !cli.deterministic {
                        obj.insert("generated_at".into(), json!(unix_time()));
                    }
                    obj.insert("result".into(), report.json);
                    let mut s = serde_json::to_string_pretty(&Value::Object(obj)).expect("serializable");
                    s.push('\n');
                    s
                }
            };
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            let _ = stdout.flush();
            EXIT_OK
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            EXIT_DATA
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Merge(_) => "merge",
        Command::Sweep(_) => "sweep",
        Command::Metrics(_) => "metrics",
        Command::Dlt(_) => "dlt",
        Command::Toylm { command } => match command {
            ToyCommand::Fixtures { .. } => "toylm fixtures",
            ToyCommand::Train { .. } => "toylm train",
            ToyCommand::Perplexity { .. } => "toylm perplexity",
        },
        Command::Serialize(_) => "serialize",
        Command::Stats(_) => "stats",
        Command::Retrieve(_) => "retrieve",
    }
}

fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, CliError> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn strip_provenance(map: &mut TensorMap) {
    map.metadata_mut().retain(|k, _| !k.starts_with("merge."));
}

fn cmd_merge(a: &MergeArgs) -> Result<Report, CliError> {
    let mut recipe = MergeRecipe::load(&a.recipe).map_err(data)?;
    if let Some(t) = a.lambda {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Usage(format!("--lambda {t} must lie in [0, 1]")));
        }
        recipe = recipe.with_lambda(t);
    }
    let out = a
        .out
        .clone()
        .or_else(|| recipe.output.clone())
        .ok_or_else(|| CliError::Usage("no output path: pass --out or set `output` in the recipe".into()))?;
    if recipe.inputs.iter().any(|p| p == &out) {
        return Err(CliError::Usage(format!(
            "--out {} would overwrite an input",
            out.display()
        )));
    }
    let weights = recipe.weights().map_err(data)?;
    let mut outcome = crate::merge::run_recipe(&recipe).map_err(data)?;
    if a.no_provenance {
        strip_provenance(&mut outcome.merged);
    }
    tensor_store::write_checkpoint(&outcome.merged, &out, recipe.write_options()).map_err(data)?;
    let digest = tensor_store::file_digest(&out).map_err(data)?;
    let content_digest = outcome.merged.content_digest();

    let mut text = format!(
        "method: {}\nlambdas: {:?}\ntensors: {}\noutput: {}\nsha256: {digest}\ncontent_sha256: {content_digest}\n",
        recipe.method,
        weights.as_slice(),
        outcome.merged.len(),
        out.display()
    );
    let mut json = json!({
        "method": recipe.method,
        "lambdas": weights.as_slice(),
        "tensors": outcome.merged.len(),
        "output": out,
        "sha256": digest,
        "content_sha256": content_digest,
    });
    if let Some(diag) = &outcome.diagnostics {
        text.push_str(&format!("max_omega: {:.6}\n", diag.max_omega()));
        for r in diag
            .records
            .iter()
            .filter(|r| r.fallback != crate::merge::Fallback::None)
        {
            text.push_str(&format!("fallback: {} {:?}\n", r.name, r.fallback));
        }
        json["slerp"] = to_json(diag);
    }
    Ok(Report { text, json })
}

fn toy_task(seed: u64, k: usize, template: PromptTemplate) -> Result<EvalTask, CliError> {
    let fx = fixtures::toy_fixture(seed);
    let examples = fx
        .mixed
        .into_iter()
        .map(|(id, label, text)| Example { id, label, text })
        .collect();
    EvalTask::new(examples, template, k).map_err(data)
}

fn sweep_text(result: &SweepResult) -> String {
    let mut t = format!("metric: {}\n", result.metric);
    let k = result.points.first().map_or(0, |p| p.fold_metrics.len());
    t.push_str("lambda");
    for f in 0..k {
        t.push_str(&format!("\tfold{f}"));
    }
    t.push_str("\tmean\n");
    for p in &result.points {
        t.push_str(&format!("{:.4}", p.lambda));
        for v in &p.fold_metrics {
            t.push_str(&format!("\t{v:.6}"));
        }
        t.push_str(&format!("\t{:.6}\n", p.mean));
    }
    for s in &result.selections {
        t.push_str(&format!(
            "fold {}: lambda*={} selection={:.6} heldout={:.6}\n",
            s.selection_fold, s.lambda_star, s.selection_metric, s.heldout_metric
        ));
    }
    t.push_str(&format!(
        "lambda*: {}\ncross_fold_heldout: {:.6}\n",
        result.lambda_star, result.cross_fold_heldout
    ));
    t
}

fn cmd_sweep(a: &SweepArgs, ctx: &Ctx) -> Result<Report, CliError> {
    if a.folds < 2 {
        return Err(CliError::Usage(format!("--folds {} must be at least 2", a.folds)));
    }
    let timeout = match a.timeout {
        Some(s) if !(s > 0.0 && s.is_finite()) => {
            return Err(CliError::Usage(format!("--timeout {s} must be positive")))
        }
        other => other.map(Duration::from_secs_f64),
    };
    let options = SweepOptions {
        jobs: ctx.jobs,
        work_dir: a.work_dir.clone(),
        ..SweepOptions::default()
    };

    let result = match (&a.toy, &a.recipe) {
        (Some(paths), _) => {
            if a.evaluator.is_some() {
                return Err(CliError::Usage("--evaluator cannot be combined with --toy".into()));
            }
            if a.metric != MetricSpec::NegPerplexity {
                return Err(CliError::Usage(format!(
                    "--toy sweeps support --metric neg_perplexity, got {}",
                    a.metric
                )));
            }
            let task = match &a.task {
                Some(p) => EvalTask::load(p, a.template, a.folds).map_err(data)?,
                None => toy_task(ctx.seed, a.folds, a.template)?,
            };
            let maps = paths
                .iter()
                .map(tensor_store::read_checkpoint)
                .collect::<Result<Vec<_>, _>>()
                .map_err(data)?;
            let models = maps
                .iter()
                .map(ToyLm::from_tensor_map)
                .collect::<Result<Vec<_>, _>>()
                .map_err(data)?;
            if models[0].vocab() != models[1].vocab() {
                return Err(CliError::Data("toy models have different vocabularies".into()));
            }
            let recipe = MergeRecipe {
                inputs: paths.clone(),
                method: match a.method {
                    MethodArg::Linear => MergeMethod::Linear,
                    MethodArg::Slerp => MergeMethod::Slerp,
                },
                lambda: Some(0.0),
                lambdas: None,
                slerp: SlerpOptions::default(),
                output: None,
                dtype_policy: Default::default(),
                strict: false,
            };
            let refs: Vec<&TensorMap> = maps.iter().collect();
            sweep::grid_sweep_maps(
                &recipe,
                &refs,
                &a.grid,
                &task,
                a.metric,
                &ToyEvaluator::Perplexity,
                &options,
            )
            .map_err(data)?
        }
        (None, Some(recipe_path)) => {
            let command = a
                .evaluator
                .clone()
                .ok_or_else(|| CliError::Usage("--recipe sweeps need --evaluator".into()))?;
            let task_path = a
                .task
                .as_ref()
                .ok_or_else(|| CliError::Usage("--recipe sweeps need --task".into()))?;
            let recipe = MergeRecipe::load(recipe_path).map_err(data)?;
            let task = EvalTask::load(task_path, a.template, a.folds).map_err(data)?;
            let evaluator = ExternalEvaluator {
                command_template: command,
                timeout,
            };
            sweep::grid_sweep(&recipe, &a.grid, &task, a.metric, &evaluator, &options).map_err(data)?
        }
        (None, None) => return Err(CliError::Usage("pass --recipe or --toy A B".into())),
    };
    Ok(Report {
        text: sweep_text(&result),
        json: to_json(&result),
    })
}

fn cmd_metrics(a: &MetricsArgs) -> Result<Report, CliError> {
    let lexicon = match (&a.positive, &a.negative) {
        (None, None) => AnswerLexicon::default(),
        (p, n) => {
            let d = AnswerLexicon::default();
            let p = p.clone().unwrap_or_else(|| d.positive().map(String::from).collect());
            let n = n.clone().unwrap_or_else(|| d.negative().map(String::from).collect());
            AnswerLexicon::new(p, n).map_err(CliError::Usage)?
        }
    };
    let records = metrics::read_predictions(&a.predictions).map_err(data)?;
    let r = metrics::classification_report(&records, &lexicon).map_err(data)?;
    let text = format!(
        "n: {}\npositives: {} ({:.4})\nanswers: {} positive, {} negative, {} unknown\nauroc: {:.4}\nauprc: {:.4}\n",
        r.n, r.positives, r.prevalence, r.answers_positive, r.answers_negative, r.answers_unknown, r.auroc, r.auprc
    );
    Ok(Report {
        text,
        json: to_json(&r),
    })
}

fn cmd_dlt(a: &DltArgs) -> Result<Report, CliError> {
    let report = match (&a.perplexities, a.p_train, a.p_test, a.p_ref) {
        (Some(path), ..) => {
            let records = dlt::parse_perplexity_records(open(path)?).map_err(data)?;
            dlt::dlt_from_records(&records, a.threshold).map_err(data)?
        }
        (None, Some(tr), Some(te), Some(rf)) => {
            dlt::dlt_deltas_with_threshold(tr, te, rf, a.threshold).map_err(data)?
        }
        _ => {
            return Err(CliError::Usage(
                "pass --perplexities or all of --p-train --p-test --p-ref".into(),
            ))
        }
    };
    let s = report.summary;
    let text = format!(
        "P_train={:.2} P_test={:.2} P_ref={:.2}\n\u{394}1={:.2} \u{394}2={:.2}\ninterpretation: {}\n",
        s.p_train, s.p_test, s.p_ref, report.delta1, report.delta2, report.interpretation
    );
    Ok(Report {
        text,
        json: to_json(&report),
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_text(path)?
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(metrics::unescape_field)
        .collect())
}

fn cmd_toylm(c: &ToyCommand, ctx: &Ctx) -> Result<Report, CliError> {
    match c {
        ToyCommand::Fixtures { out_dir, alpha } => {
            std::fs::create_dir_all(out_dir).map_err(data)?;
            let fx = fixtures::toy_fixture(ctx.seed);
            let vocab = fx.vocab();
            let letters = toy_lm::train_bigram_with_vocab(&fx.letters, *alpha, vocab.clone()).map_err(data)?;
            let digits = toy_lm::train_bigram_with_vocab(&fx.digits, *alpha, vocab).map_err(data)?;
            let mut files = Vec::new();
            for (name, model) in [("letters.safetensors", &letters), ("digits.safetensors", &digits)] {
                let p = out_dir.join(name);
                tensor_store::write_checkpoint(&model.to_tensor_map(), &p, Default::default()).map_err(data)?;
                files.push(p);
            }
            for (name, lines) in [("letters.txt", &fx.letters), ("digits.txt", &fx.digits)] {
                let p = out_dir.join(name);
                let body: String = lines
                    .iter()
                    .map(|l| format!("{}\n", metrics::escape_field(l)))
                    .collect();
                write_file(&p, &body)?;
                files.push(p);
            }
            let p = out_dir.join("heldout.tsv");
            let body: String = fx
                .mixed
                .iter()
                .map(|(id, label, text)| {
                    let e = Example {
                        id: id.clone(),
                        label: *label,
                        text: text.clone(),
                    };
                    format!("{}\n", sweep::format_example(&e))
                })
                .collect();
            write_file(&p, &body)?;
            files.push(p);
            let text = files.iter().map(|f| format!("{}\n", f.display())).collect();
            Ok(Report {
                text,
                json: json!({ "seed": ctx.seed, "alpha": alpha, "files": files }),
            })
        }
        ToyCommand::Train {
            corpus,
            vocab_from,
            alpha,
            out,
        } => {
            let texts = read_lines(corpus)?;
            let mut all = texts.clone();
            for extra in vocab_from {
                all.extend(read_lines(extra)?);
            }
            let vocab = toy_lm::Vocab::from_texts(&all);
            let model = toy_lm::train_bigram_with_vocab(&texts, *alpha, vocab).map_err(data)?;
            tensor_store::write_checkpoint(&model.to_tensor_map(), out, Default::default()).map_err(data)?;
            let digest = tensor_store::file_digest(out).map_err(data)?;
            Ok(Report {
                text: format!(
                    "vocab: {}\nlines: {}\noutput: {}\nsha256: {digest}\n",
                    model.vocab().len(),
                    texts.len(),
                    out.display()
                ),
                json: json!({
                    "vocab_size": model.vocab().len(),
                    "lines": texts.len(),
                    "output": out,
                    "sha256": digest,
                }),
            })
        }
        ToyCommand::Perplexity {
            model,
            input,
            split,
            strict,
        } => {
            let lm = ToyLm::from_tensor_map(&tensor_store::read_checkpoint(model).map_err(data)?).map_err(data)?;
            let policy = if *strict {
                UnknownPolicy::Strict
            } else {
                UnknownPolicy::Lenient
            };
            let mut records: Vec<PerplexityRecord> = Vec::new();
            for (i, line) in read_text(input)?.lines().enumerate() {
                let line = line.trim_end_matches('\r');
                if line.is_empty() {
                    continue;
                }
                let (id, text) = match line.split_once('\t') {
                    Some((id, text)) => (id.to_string(), metrics::unescape_field(text)),
                    None => (format!("doc{:05}", i + 1), metrics::unescape_field(line)),
                };
                records.push(lm.perplexity_record(&text, *split, &id, policy).map_err(data)?);
            }
            let text = records
                .iter()
                .map(|r| format!("{}\n", dlt::format_perplexity_record(r)))
                .collect();
            let ppl = dlt::corpus_perplexity(&records, *split).ok();
            Ok(Report {
                text,
                json: json!({ "split": split, "perplexity": ppl, "records": records }),
            })
        }
    }
}

fn cmd_serialize(a: &SerializeArgs) -> Result<Report, CliError> {
    let patients = ehr::load_patients(&a.patients, a.input_format.into()).map_err(data)?;
    let mut text = String::new();
    let mut rows = Vec::with_capacity(patients.len());
    for p in &patients {
        let body = ehr::serialize_patient(p, a.filter);
        let body = match a.template {
            Some(t) => t.render(&body),
            None => body,
        };
        let label = p.outcome.map(|o| o.label());
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            p.patient_id,
            label.map_or(String::new(), |l| l.to_string()),
            metrics::escape_field(&body)
        ));
        rows.push(json!({ "patient_id": p.patient_id, "label": label, "text": body }));
    }
    Ok(Report {
        text,
        json: Value::Array(rows),
    })
}

fn stats_text(name: &str, s: &ehr::TextStats) -> String {
    format!(
        "{name}: texts={} total={:.2} digits={:.2} ({:.2}%) spaces={:.2} ({:.2}%) letters+punct={:.2} ({:.2}%)\n",
        s.n_texts,
        s.avg_total_chars,
        s.avg_digit_chars,
        100.0 * s.digit_proportion,
        s.avg_space_chars,
        100.0 * s.space_proportion,
        s.avg_letterpunct_chars,
        100.0 * s.letterpunct_proportion
    )
}

fn cmd_stats(a: &StatsArgs) -> Result<Report, CliError> {
    match (&a.patients, &a.texts) {
        (Some(path), _) => {
            let patients = ehr::load_patients(path, a.input_format.into()).map_err(data)?;
            let mut text = String::new();
            let mut json = serde_json::Map::new();
            for (name, filter) in [("full", SerializationFilter::Full), ("hard", SerializationFilter::Hard)] {
                let texts: Vec<String> = patients.iter().map(|p| ehr::serialize_patient(p, filter)).collect();
                let s = ehr::corpus_stats(&texts).map_err(data)?;
                text.push_str(&stats_text(name, &s));
                json.insert(name.into(), to_json(&s));
            }
            Ok(Report {
                text,
                json: Value::Object(json),
            })
        }
        (None, Some(path)) => {
            let s = ehr::corpus_stats(&read_lines(path)?).map_err(data)?;
            Ok(Report {
                text: stats_text("texts", &s),
                json: to_json(&s),
            })
        }
        (None, None) => Err(CliError::Usage("pass --patients or --texts".into())),
    }
}

fn cmd_retrieve(a: &RetrieveArgs) -> Result<Report, CliError> {
    if a.top_k == 0 {
        return Err(CliError::Usage("--top-k must be at least 1".into()));
    }
    if a.k_rrf == 0 {
        return Err(CliError::Usage("--k-rrf must be at least 1".into()));
    }
    if !(a.k1 >= 0.0 && (0.0..=1.0).contains(&a.b)) {
        return Err(CliError::Usage("need --k1 >= 0 and 0 <= --b <= 1".into()));
    }
    let tokenizer = match &a.stopwords {
        Some(p) => Tokenizer::with_stopwords(read_text(p)?.split_whitespace()),
        None => Tokenizer::default(),
    };
    let corpus = retrieval::parse_id_text(open(&a.corpus)?).map_err(data)?;
    let queries = retrieval::parse_id_text(open(&a.queries)?).map_err(data)?;
    let keywords = match &a.keywords {
        Some(p) => Some(retrieval::parse_keywords(open(p)?).map_err(data)?),
        None => None,
    };
    let qrels = match &a.qrels {
        Some(p) => Some(retrieval::parse_qrels(open(p)?).map_err(data)?),
        None => None,
    };
    let index = retrieval::build_index_with(&corpus, tokenizer).map_err(data)?;
    let params = Bm25Params { k1: a.k1, b: a.b };

    let mut runs: Vec<(&str, Vec<Ranking>)> = vec![("bm25", Vec::new())];
    if keywords.is_some() {
        runs.push(("bm25_qe", Vec::new()));
        runs.push(("rrf", Vec::new()));
    }
    for (qid, qtext) in &queries {
        let base = retrieval::bm25_search_with(&index, qid, qtext, a.top_k, params);
        if let Some(kw) = &keywords {
            let words = kw.get(qid).map(Vec::as_slice).unwrap_or_default();
            let expanded = retrieval::expand_query(qtext, words);
            let qe = retrieval::bm25_search_with(&index, qid, &expanded, a.top_k, params);
            let fused = retrieval::rrf_fuse(&[base.clone(), qe.clone()], a.k_rrf, a.top_k).map_err(data)?;
            runs[1].1.push(qe);
            runs[2].1.push(fused);
        }
        runs[0].1.push(base);
    }

    if let Some(path) = &a.run_out {
        let body: String = runs
            .iter()
            .flat_map(|(tag, rs)| rs.iter().map(move |r| retrieval::format_run(r, tag)))
            .collect();
        write_file(path, &body)?;
    }

    let mut text = format!(
        "docs: {}\nqueries: {}\nindex_sha256: {}\n",
        index.num_docs(),
        queries.len(),
        index.digest()
    );
    let mut json = json!({
        "docs": index.num_docs(),
        "queries": queries.len(),
        "index_sha256": index.digest(),
        "params": { "k1": a.k1, "b": a.b, "k_rrf": a.k_rrf, "top_k": a.top_k },
    });
    if let Some(qrels) = &qrels {
        let denominator = match a.map_denominator {
            MapDenominatorArg::All => MapDenominator::AllRelevant,
            MapDenominatorArg::Truncated => MapDenominator::Truncated,
        };
        text.push_str("run\tjudged\tMRR@1000\tP@10\tNDCG@10\tR@1000\tMAP@100\n");
        let mut table = serde_json::Map::new();
        for (tag, rankings) in &runs {
            let per_query: Vec<IrMetrics> = rankings
                .iter()
                .filter(|r| qrels.contains_key(&r.query_id))
                .map(|r| retrieval::ir_metrics_with(r, qrels, denominator))
                .collect::<Result<_, _>>()
                .map_err(data)?;
            let m = IrMetrics::mean(&per_query);
            text.push_str(&format!(
                "{tag}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                per_query.len(),
                m.mrr_1000,
                m.p_10,
                m.ndcg_10,
                m.recall_1000,
                m.map_100
            ));
            let mut entry = to_json(&m);
            entry["judged_queries"] = json!(per_query.len());
            table.insert((*tag).into(), entry);
        }
        json["metrics"] = Value::Object(table);
    } else {
        for (tag, rankings) in &runs {
            for r in rankings {
                for (rank, (doc, score)) in r.entries.iter().enumerate().take(10) {
                    text.push_str(&format!("{tag}\t{}\t{}\t{doc}\t{score:.6}\n", r.query_id, rank + 1));
                }
            }
        }
        let obj: serde_json::Map<String, Value> =
            runs.iter().map(|(tag, rs)| ((*tag).to_string(), to_json(rs))).collect();
        json["rankings"] = Value::Object(obj);
    }
    Ok(Report { text, json })
}
