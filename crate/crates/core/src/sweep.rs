//! Grid search over merge coefficients against a task metric.
//!
//! For every grid point the merged checkpoint is built, written once, and
//! handed read-only to an evaluator per fold. The file digest is taken before
//! and after evaluation; any change aborts the sweep, since the merged model
//! must never be updated by the examples it is scored on.
//!
//! Selection is cross-fold: lambda* is chosen on one fold and scored on the
//! remaining folds, then fold roles rotate. Ties go to the smallest lambda.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dlt::{NllAccumulator, PerplexityRecord, Split};
use crate::ehr::PromptTemplate;
use crate::merge::{merge_maps, MergeRecipe, RecipeError};
use crate::metrics::{self, AnswerLexicon, MetricError, PredictionRecord};
use crate::tensor_store::{self, CheckpointError, TensorMap};
use crate::toy_lm::{Symbol, ToyLm, ToyLmError, UnknownPolicy};

const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("lambda grid is empty")]
    EmptyGrid,
    #[error("invalid lambda grid: {0}")]
    BadGrid(String),
    #[error("k = {k} folds but class {class} has only {count} members")]
    KTooLarge { class: String, count: usize, k: usize },
    #[error("invalid fold request: {0}")]
    BadFolds(String),
    #[error("evaluator failed: {0}")]
    EvaluatorFailure(String),
    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),
    #[error("bad predictions file (line {line}): {reason}")]
    BadPredictionsFormat { line: usize, reason: String },
    #[error("merged checkpoint for lambda = {lambda} changed during evaluation ({before} -> {after})")]
    ParametersModified { lambda: f64, before: String, after: String },
    #[error("metric {metric} cannot be computed from {got}")]
    MetricMismatch { metric: MetricSpec, got: &'static str },
    #[error("bad task file line {line}: {reason}")]
    BadTask { line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    ToyLm(#[from] ToyLmError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Inclusive grid `start, start + step, ..., stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 1.0,
            step: 0.1,
        }
    }
}

impl LambdaGrid {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self, SweepError> {
        let grid = Self { start, stop, step };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<(), SweepError> {
        let Self { start, stop, step } = *self;
        if !(start.is_finite() && stop.is_finite() && step.is_finite()) {
            return Err(SweepError::BadGrid("non-finite bound".into()));
        }
        if !(0.0 <= start && start < stop && stop <= 1.0) {
            return Err(SweepError::BadGrid(format!(
                "need 0 <= start < stop <= 1, got {start}:{stop}"
            )));
        }
        if step <= 0.0 {
            return Err(SweepError::BadGrid(format!("step {step} must be positive")));
        }
        Ok(())
    }

    /// Grid points, rounded to 12 decimals so 0.1-steps print cleanly.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + GRID_TOLERANCE).floor() as usize;
        let round = |x: f64| (x * 1e12).round() / 1e12;
        let mut pts: Vec<f64> = (0..=n)
            .map(|i| round(self.start + i as f64 * self.step))
            .filter(|&x| x <= self.stop + GRID_TOLERANCE)
            .map(|x| x.min(self.stop))
            .collect();
        pts.dedup();
        pts
    }
}

impl FromStr for LambdaGrid {
    type Err = SweepError;

    /// `start:stop:step`, e.g. `0:1:0.1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, c] = parts[..] else {
            return Err(SweepError::BadGrid(format!("expected start:stop:step, got {s:?}")));
        };
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| SweepError::BadGrid(format!("{x:?} is not a number")))
        };
        LambdaGrid::new(num(a)?, num(b)?, num(c)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSpec {
    Auroc,
    Auprc,
    NegPerplexity,
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricSpec::Auroc => "auroc",
            MetricSpec::Auprc => "auprc",
            MetricSpec::NegPerplexity => "neg_perplexity",
        })
    }
}

impl FromStr for MetricSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auroc" => Ok(MetricSpec::Auroc),
            "auprc" => Ok(MetricSpec::Auprc),
            "neg_perplexity" => Ok(MetricSpec::NegPerplexity),
            other => Err(format!("unknown metric {other:?} (auroc, auprc, neg_perplexity)")),
        }
    }
}

/// What an evaluator hands back for one fold.
#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    /// Generated answers; scored through [`crate::metrics`].
    Predictions(Vec<PredictionRecord>),
    /// Per-document NLL sums.
    Perplexities(Vec<PerplexityRecord>),
    /// `(label, score)` pairs from an in-process scorer.
    Scored(Vec<(u8, f64)>),
    /// A metric value the evaluator computed itself.
    Value(f64),
}

impl Evaluation {
    fn kind(&self) -> &'static str {
        match self {
            Evaluation::Predictions(_) => "predictions",
            Evaluation::Perplexities(_) => "perplexity records",
            Evaluation::Scored(_) => "scored examples",
            Evaluation::Value(_) => "a metric value",
        }
    }
}

pub fn metric_value(metric: MetricSpec, evaluation: &Evaluation, lexicon: &AnswerLexicon) -> Result<f64, SweepError> {
    let mismatch = || SweepError::MetricMismatch {
        metric,
        got: evaluation.kind(),
    };
    match (metric, evaluation) {
        (_, Evaluation::Value(v)) => Ok(*v),
        (MetricSpec::Auroc, Evaluation::Predictions(recs)) => {
            let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
            let scores: Vec<f64> = recs.iter().map(|r| r.answer(lexicon).score()).collect();
            Ok(metrics::auroc(&scores, &labels)?)
        }
        (MetricSpec::Auprc, Evaluation::Predictions(recs)) => {
            let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
            let scores: Vec<f64> = recs.iter().map(|r| r.probability_score(lexicon)).collect();
            Ok(metrics::auprc(&scores, &labels)?)
        }
        (MetricSpec::Auroc | MetricSpec::Auprc, Evaluation::Scored(pairs)) => {
            let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let scores: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if metric == MetricSpec::Auroc {
                Ok(metrics::auroc(&scores, &labels)?)
            } else {
                Ok(metrics::auprc(&scores, &labels)?)
            }
        }
        (MetricSpec::NegPerplexity, Evaluation::Perplexities(recs)) => {
            let mut acc = NllAccumulator::default();
            for r in recs {
                acc.add(r.nll_sum, r.n_tokens);
            }
            acc.perplexity()
                .map(|p| -p)
                .ok_or_else(|| SweepError::EvaluatorFailure("no tokens evaluated".into()))
        }
        _ => Err(mismatch()),
    }
}

/// Stratified round-robin: the j-th example of each label class goes to
/// fold `j mod k`, classes taken in input order.
pub fn kfold_split<I, L: Ord + fmt::Debug>(
    ids: &[I],
    labels: &[L],
    k: usize,
    strict: bool,
) -> Result<Vec<usize>, SweepError> {
    if k < 2 {
        return Err(SweepError::BadFolds(format!("k = {k}; need k >= 2")));
    }
    if ids.len() != labels.len() {
        return Err(SweepError::BadFolds(format!(
            "{} ids but {} labels",
            ids.len(),
            labels.len()
        )));
    }
    let mut seen: BTreeMap<&L, usize> = BTreeMap::new();
    let folds = labels
        .iter()
        .map(|l| {
            let j = seen.entry(l).or_insert(0);
            let fold = *j % k;
            *j += 1;
            fold
        })
        .collect();
    if strict {
        if let Some((class, &count)) = seen.iter().find(|(_, &c)| c < k) {
            return Err(SweepError::KTooLarge {
                class: format!("{class:?}"),
                count,
                k,
            });
        }
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Example {
    pub id: String,
    pub label: u8,
    pub text: String,
}

/// The pilot task: labeled examples, their prompt template and fold layout.
#[derive(Debug, Clone)]
pub struct EvalTask {
    pub examples: Vec<Example>,
    pub template: PromptTemplate,
    pub folds: Vec<usize>,
    pub k: usize,
}

impl EvalTask {
    pub fn new(examples: Vec<Example>, template: PromptTemplate, k: usize) -> Result<Self, SweepError> {
        let ids: Vec<&str> = examples.iter().map(|e| e.id.as_str()).collect();
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        let folds = kfold_split(&ids, &labels, k, false)?;
        let mut seen = HashSet::new();
        for e in &examples {
            if !seen.insert(e.id.as_str()) {
                return Err(SweepError::BadFolds(format!("duplicate example id {:?}", e.id)));
            }
        }
        Ok(Self {
            examples,
            template,
            folds,
            k,
        })
    }

    /// Reads `id  label  text` lines (tab-separated; text backslash-escaped).
    pub fn load(path: &Path, template: PromptTemplate, k: usize) -> Result<Self, SweepError> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::new(parse_examples(std::io::BufReader::new(file))?, template, k)
    }

    pub fn fold(&self, f: usize) -> Vec<&Example> {
        self.examples
            .iter()
            .zip(&self.folds)
            .filter(|(_, &g)| g == f)
            .map(|(e, _)| e)
            .collect()
    }
}

pub fn parse_examples<R: BufRead>(reader: R) -> Result<Vec<Example>, SweepError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |reason: String| SweepError::BadTask { line: line_no, reason };
        let line = line.map_err(|e| bad(e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(label), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected id<TAB>label<TAB>text".into()));
        };
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label {other:?} is not 0 or 1"))),
        };
        out.push(Example {
            id: id.to_string(),
            label,
            text: metrics::unescape_field(text),
        });
    }
    Ok(out)
}

pub fn format_example(e: &Example) -> String {
    format!("{}\t{}\t{}", e.id, e.label, metrics::escape_field(&e.text))
}

/// Scores one merged checkpoint on one fold. Must treat the file as read-only.
pub trait Evaluator: Sync {
    fn evaluate(
        &self,
        checkpoint: &Path,
        fold_index: usize,
        examples: &[&Example],
        task: &EvalTask,
    ) -> Result<Evaluation, SweepError>;
}

impl<F> Evaluator for F
where
    F: Fn(&Path, usize, &[&Example]) -> Result<Evaluation, SweepError> + Sync,
{
    fn evaluate(
        &self,
        checkpoint: &Path,
        fold_index: usize,
        examples: &[&Example],
        _task: &EvalTask,
    ) -> Result<Evaluation, SweepError> {
        self(checkpoint, fold_index, examples)
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Runs `command_template` with `{checkpoint}`, `{fold}` and `{out}`
/// substituted (shell-quoted), then parses the predictions it wrote to
/// `out`. Every id listed in `fold_file` must appear in the predictions.
pub fn evaluate_external(
    checkpoint: &Path,
    fold_file: &Path,
    command_template: &str,
    out: &Path,
    timeout: Option<Duration>,
) -> Result<Vec<PredictionRecord>, SweepError> {
    if !command_template.contains("{checkpoint}") || !command_template.contains("{fold}") {
        return Err(SweepError::EvaluatorFailure(
            "command template must contain {checkpoint} and {fold}".into(),
        ));
    }
    let mut command = command_template
        .replace("{checkpoint}", &shell_quote(&checkpoint.to_string_lossy()))
        .replace("{fold}", &shell_quote(&fold_file.to_string_lossy()));
    let out_quoted = shell_quote(&out.to_string_lossy());
    if command.contains("{out}") {
        command = command.replace("{out}", &out_quoted);
    } else {
        command = format!("{command} {out_quoted}");
    }

    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| SweepError::EvaluatorFailure(format!("cannot spawn `{command}`: {e}")))?;
    let started = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if let Some(limit) = timeout {
                    if started.elapsed() > limit {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(SweepError::Timeout(limit));
                    }
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(SweepError::EvaluatorFailure(e.to_string())),
        }
    };
    if !status.success() {
        return Err(SweepError::EvaluatorFailure(format!(
            "`{command}` exited with {status}"
        )));
    }

    let records = metrics::read_predictions(out).map_err(|e| SweepError::BadPredictionsFormat {
        line: e.line,
        reason: e.reason,
    })?;
    let fold_ids = read_fold_ids(fold_file)?;
    let mut by_id: BTreeMap<&str, &PredictionRecord> = BTreeMap::new();
    for r in &records {
        if by_id.insert(r.id.as_str(), r).is_some() {
            return Err(SweepError::BadPredictionsFormat {
                line: 0,
                reason: format!("duplicate prediction for id {:?}", r.id),
            });
        }
    }
    let missing: Vec<&str> = fold_ids
        .iter()
        .map(String::as_str)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(SweepError::BadPredictionsFormat {
            line: 0,
            reason: format!("missing predictions for ids {missing:?}"),
        });
    }
    let wanted: HashSet<&str> = fold_ids.iter().map(String::as_str).collect();
    Ok(records.into_iter().filter(|r| wanted.contains(r.id.as_str())).collect())
}

fn read_fold_ids(path: &Path) -> Result<Vec<String>, SweepError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').next().unwrap_or(l).to_string())
        .collect())
}

/// Evaluator backed by an external command (see [`evaluate_external`]).
///
/// The fold file handed to the command lists `id  label  text` per line with
/// `text` already wrapped in the task's prompt template.
#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    pub command_template: String,
    pub timeout: Option<Duration>,
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(
        &self,
        checkpoint: &Path,
        fold_index: usize,
        examples: &[&Example],
        task: &EvalTask,
    ) -> Result<Evaluation, SweepError> {
        let dir = tempfile::tempdir().map_err(io_err(Path::new("<tempdir>")))?;
        let fold_file = dir.path().join(format!("fold{fold_index}.tsv"));
        let mut text = String::new();
        for e in examples {
            let prompted = Example {
                text: task.template.render(&e.text),
                ..(*e).clone()
            };
            text.push_str(&format_example(&prompted));
            text.push('\n');
        }
        std::fs::write(&fold_file, text).map_err(io_err(&fold_file))?;
        let out = dir.path().join(format!("predictions{fold_index}.tsv"));
        let records = evaluate_external(checkpoint, &fold_file, &self.command_template, &out, self.timeout)?;
        Ok(Evaluation::Predictions(records))
    }
}

/// In-process evaluator for toy bigram checkpoints.
#[derive(Debug, Clone, Copy)]
pub enum ToyEvaluator {
    /// Per-document NLL of each example text.
    Perplexity,
    /// `p(pos) / (p(pos) + p(neg))` after the example's last character.
    YesNo { positive: char, negative: char },
}

impl Evaluator for ToyEvaluator {
    fn evaluate(
        &self,
        checkpoint: &Path,
        _fold_index: usize,
        examples: &[&Example],
        _task: &EvalTask,
    ) -> Result<Evaluation, SweepError> {
        let model = ToyLm::from_tensor_map(&tensor_store::read_checkpoint(checkpoint)?)?;
        match *self {
            ToyEvaluator::Perplexity => examples
                .iter()
                .map(|e| {
                    model
                        .perplexity_record(&e.text, Split::Test, &e.id, UnknownPolicy::Lenient)
                        .map_err(SweepError::from)
                })
                .collect::<Result<_, _>>()
                .map(Evaluation::Perplexities),
            ToyEvaluator::YesNo { positive, negative } => examples
                .iter()
                .map(|e| {
                    let ctx = e.text.chars().last().map_or(Symbol::Bos, Symbol::Char);
                    let ctx = if model.vocab().index_of(ctx).is_ok() {
                        ctx
                    } else {
                        Symbol::Bos
                    };
                    let s = model.yes_no_score(ctx, Symbol::Char(positive), Symbol::Char(negative))?;
                    Ok((e.label, s))
                })
                .collect::<Result<_, SweepError>>()
                .map(Evaluation::Scored),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub fold_metrics: Vec<f64>,
    pub mean: f64,
    /// SHA-256 of the merged checkpoint file, identical before and after evaluation.
    pub checkpoint_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSelection {
    pub selection_fold: usize,
    pub lambda_star: f64,
    pub selection_metric: f64,
    /// Mean metric of `lambda_star` over the other folds.
    pub heldout_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub metric: MetricSpec,
    pub points: Vec<SweepPoint>,
    /// Chosen on fold 0.
    pub lambda_star: f64,
    pub selections: Vec<FoldSelection>,
    /// Average of the held-out metrics over all fold rotations.
    pub cross_fold_heldout: f64,
}

/// First maximum over `(lambda, value)` pairs sorted by ascending lambda.
pub fn select_best(values: &[(f64, f64)]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &(lambda, v) in values {
        match best {
            Some((bl, bv)) if v > bv || (v == bv && lambda < bl) => best = Some((lambda, v)),
            None => best = Some((lambda, v)),
            _ => {}
        }
    }
    best
}

/// Builds per-fold selections from per-lambda fold metrics.
pub fn cross_fold_select(points: &[SweepPoint], k: usize) -> Result<(Vec<FoldSelection>, f64), SweepError> {
    if points.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    let mut selections = Vec::with_capacity(k);
    for f in 0..k {
        let column: Vec<(f64, f64)> = points.iter().map(|p| (p.lambda, p.fold_metrics[f])).collect();
        let (lambda_star, selection_metric) = select_best(&column).expect("non-empty");
        let chosen = points.iter().find(|p| p.lambda == lambda_star).expect("from grid");
        let others: Vec<f64> = (0..k).filter(|&g| g != f).map(|g| chosen.fold_metrics[g]).collect();
        let heldout_metric = others.iter().sum::<f64>() / others.len() as f64;
        selections.push(FoldSelection {
            selection_fold: f,
            lambda_star,
            selection_metric,
            heldout_metric,
        });
    }
    let mean = selections.iter().map(|s| s.heldout_metric).sum::<f64>() / k as f64;
    Ok((selections, mean))
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker cap; `None` uses the rayon default.
    pub jobs: Option<usize>,
    /// Where merged checkpoints are written; a temporary directory if unset.
    pub work_dir: Option<PathBuf>,
    pub lexicon: AnswerLexicon,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_point(
    lambda: f64,
    recipe: &MergeRecipe,
    inputs: &[&TensorMap],
    dir: &Path,
    task: &EvalTask,
    metric: MetricSpec,
    evaluator: &dyn Evaluator,
    lexicon: &AnswerLexicon,
) -> Result<SweepPoint, SweepError> {
    let merged = merge_maps(&recipe.with_lambda(lambda), inputs)?.merged;
    let path = dir.join(format!("merged_lambda_{lambda:.6}.safetensors"));
    tensor_store::write_checkpoint(&merged, &path, recipe.write_options())?;
    drop(merged);
    let before = tensor_store::file_digest(&path)?;
    let mut fold_metrics = Vec::with_capacity(task.k);
    for f in 0..task.k {
        let examples = task.fold(f);
        let evaluation = evaluator.evaluate(&path, f, &examples, task)?;
        fold_metrics.push(metric_value(metric, &evaluation, lexicon)?);
    }
    let after = tensor_store::file_digest(&path)?;
    if before != after {
        return Err(SweepError::ParametersModified { lambda, before, after });
    }
    let mean = fold_metrics.iter().sum::<f64>() / fold_metrics.len() as f64;
    Ok(SweepPoint {
        lambda,
        fold_metrics,
        mean,
        checkpoint_digest: before,
    })
}

/// Sweeps `grid` with already-loaded inputs.
pub fn grid_sweep_maps(
    recipe: &MergeRecipe,
    inputs: &[&TensorMap],
    grid: &LambdaGrid,
    task: &EvalTask,
    metric: MetricSpec,
    evaluator: &dyn Evaluator,
    options: &SweepOptions,
) -> Result<SweepResult, SweepError> {
    if inputs.len() != 2 {
        return Err(SweepError::BadGrid(format!(
            "a scalar lambda grid needs exactly two inputs, got {}",
            inputs.len()
        )));
    }
    let lambdas = grid.points();
    if lambdas.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    let tmp;
    let dir: &Path = match &options.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
            d
        }
        None => {
            tmp = tempfile::tempdir().map_err(io_err(Path::new("<tempdir>")))?;
            tmp.path()
        }
    };

    let run = || {
        lambdas
            .par_iter()
            .map(|&l| evaluate_point(l, recipe, inputs, dir, task, metric, evaluator, &options.lexicon))
            .collect::<Result<Vec<_>, _>>()
    };
    let mut points = match options.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| SweepError::EvaluatorFailure(format!("worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    points.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));

    let (selections, cross_fold_heldout) = cross_fold_select(&points, task.k)?;
    Ok(SweepResult {
        metric,
        lambda_star: selections[0].lambda_star,
        points,
        selections,
        cross_fold_heldout,
    })
}

/// Reads the recipe's inputs and sweeps `grid`.
pub fn grid_sweep(
    recipe_template: &MergeRecipe,
    grid: &LambdaGrid,
    task: &EvalTask,
    metric: MetricSpec,
    evaluator: &dyn Evaluator,
    options: &SweepOptions,
) -> Result<SweepResult, SweepError> {
    let maps = recipe_template
        .inputs
        .iter()
        .map(tensor_store::read_checkpoint)
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&TensorMap> = maps.iter().collect();
    grid_sweep_maps(recipe_template, &refs, grid, task, metric, evaluator, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points() {
        let pts = LambdaGrid::default().points();
        assert_eq!(pts.len(), 11);
        assert_eq!(pts[3], 0.3);
        assert_eq!(pts[10], 1.0);
        assert_eq!(LambdaGrid::new(0.0, 1.0, 0.5).unwrap().points(), vec![0.0, 0.5, 1.0]);
        assert_eq!(
            LambdaGrid::new(0.0, 1.0, 0.3).unwrap().points(),
            vec![0.0, 0.3, 0.6, 0.9]
        );
        assert_eq!("0:1:0.25".parse::<LambdaGrid>().unwrap().points().len(), 5);
        assert!("1:0:0.1".parse::<LambdaGrid>().is_err());
        assert!("0:1:0".parse::<LambdaGrid>().is_err());
        assert!("0:1".parse::<LambdaGrid>().is_err());
        assert!("0:1.5:0.1".parse::<LambdaGrid>().is_err());
    }

    #[test]
    fn kfold_examples() {
        assert_eq!(kfold_split(&[0; 4], &[1, 1, 0, 0], 2, false).unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(kfold_split(&[0; 5], &[7; 5], 2, false).unwrap(), vec![0, 1, 0, 1, 0]);
        assert!(matches!(
            kfold_split(&[0; 3], &[1, 0, 0], 2, true),
            Err(SweepError::KTooLarge { count: 1, .. })
        ));
        assert!(kfold_split(&[0; 3], &[1, 0, 0], 2, false).is_ok());
        assert!(kfold_split(&[0; 3], &[1, 0], 2, false).is_err());
        assert!(kfold_split(&[0; 3], &[1, 0, 0], 1, false).is_err());
    }

    #[test]
    fn kfold_table_one_prevalence() {
        // 6155 patients, 629 deceased, spread through the list
        let labels: Vec<u8> = (0..6155).map(|i| u8::from(i % 9 == 3 && i / 9 < 629)).collect();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 629);
        let folds = kfold_split(&labels, &labels, 2, true).unwrap();
        for f in 0..2 {
            let pos = labels.iter().zip(&folds).filter(|(&l, &g)| l == 1 && g == f).count();
            assert!(pos == 314 || pos == 315, "fold {f}: {pos}");
            let size = folds.iter().filter(|&&g| g == f).count();
            let prevalence = pos as f64 / size as f64;
            assert!((prevalence - 629.0 / 6155.0).abs() <= 1.0 / size as f64);
        }
    }

    #[test]
    fn select_best_breaks_ties_low() {
        assert_eq!(select_best(&[(0.0, 0.4), (0.5, 0.7), (1.0, 0.5)]), Some((0.5, 0.7)));
        assert_eq!(select_best(&[(0.0, 0.5), (0.5, 0.5), (1.0, 0.5)]), Some((0.0, 0.5)));
        assert_eq!(select_best(&[(1.0, 0.5), (0.0, 0.5)]), Some((0.0, 0.5)));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn cross_fold_rotation() {
        let p = |lambda, a, b| SweepPoint {
            lambda,
            fold_metrics: vec![a, b],
            mean: (a + b) / 2.0,
            checkpoint_digest: String::new(),
        };
        let points = vec![p(0.0, 0.1, 0.6), p(0.5, 0.9, 0.2), p(1.0, 0.3, 0.3)];
        let (sel, mean) = cross_fold_select(&points, 2).unwrap();
        assert_eq!(sel[0].lambda_star, 0.5);
        assert_eq!(sel[0].heldout_metric, 0.2);
        assert_eq!(sel[1].lambda_star, 0.0);
        assert_eq!(sel[1].heldout_metric, 0.1);
        assert!((mean - 0.15).abs() < 1e-15);
    }

    #[test]
    fn metric_routing() {
        let lex = AnswerLexicon::default();
        let scored = Evaluation::Scored(vec![(1, 0.9), (0, 0.1)]);
        assert_eq!(metric_value(MetricSpec::Auroc, &scored, &lex).unwrap(), 1.0);
        assert!(matches!(
            metric_value(MetricSpec::NegPerplexity, &scored, &lex),
            Err(SweepError::MetricMismatch { .. })
        ));
        let ppl = Evaluation::Perplexities(vec![PerplexityRecord {
            split: Split::Test,
            doc_id: "d".into(),
            n_tokens: 2,
            nll_sum: 2.0 * 3f64.ln(),
        }]);
        assert!((metric_value(MetricSpec::NegPerplexity, &ppl, &lex).unwrap() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn example_file_parsing() {
        let text = "a\t1\tyes it\\tis\nb\t0\tplain text\n";
        let ex = parse_examples(text.as_bytes()).unwrap();
        assert_eq!(ex[0].text, "yes it\tis");
        assert_eq!(format_example(&ex[0]), "a\t1\tyes it\\tis");
        assert!(matches!(
            parse_examples("a\t3\tx".as_bytes()),
            Err(SweepError::BadTask { line: 1, .. })
        ));
        assert!(parse_examples("only-id\n".as_bytes()).is_err());
    }
}
