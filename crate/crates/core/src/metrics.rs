//! Answer parsing and ranking metrics for binary outcome prediction.
//!
//! AUROC is scored from the generated answer text (positive -> 1, negative ->
//! 0, unknown -> 0.5). AUPRC is scored from the normalized yes/no
//! probability when the evaluator supplied log-probabilities, and from the
//! answer text otherwise.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("labels contain a single class ({positives} positive, {negatives} negative); the metric is undefined")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not binary")]
    NonBinaryLabel(u8),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("log-probability missing or non-finite")]
    MissingLogprob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Positive,
    Negative,
    Unknown,
}

impl Answer {
    /// Score used for AUROC from raw text.
    pub fn score(self) -> f64 {
        match self {
            Answer::Positive => 1.0,
            Answer::Negative => 0.0,
            Answer::Unknown => 0.5,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Answer::Positive => "positive",
            Answer::Negative => "negative",
            Answer::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerLexicon {
    positive: BTreeSet<String>,
    negative: BTreeSet<String>,
}

impl Default for AnswerLexicon {
    /// Mortality question: "Is the patient dead?"
    fn default() -> Self {
        Self::new(["yes", "dead", "1"], ["no", "survive", "alive", "0"]).expect("built-in lexicon is disjoint")
    }
}

impl AnswerLexicon {
    pub fn new<P, N>(positive: P, negative: N) -> Result<Self, String>
    where
        P: IntoIterator,
        P::Item: AsRef<str>,
        N: IntoIterator,
        N::Item: AsRef<str>,
    {
        let positive: BTreeSet<String> = positive.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        let negative: BTreeSet<String> = negative.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        if let Some(w) = positive.intersection(&negative).next() {
            return Err(format!("{w:?} is both positive and negative"));
        }
        Ok(Self { positive, negative })
    }

    pub fn positive(&self) -> impl Iterator<Item = &str> {
        self.positive.iter().map(String::as_str)
    }

    pub fn negative(&self) -> impl Iterator<Item = &str> {
        self.negative.iter().map(String::as_str)
    }
}

/// Number of leading whitespace tokens inspected; generation is capped at two.
const ANSWER_TOKENS: usize = 2;

/// Classifies generated text by lexicon hits in its first two tokens.
///
/// Tokens are split into words on non-alphanumeric characters and compared
/// case-insensitively. The first token with a hit decides; a token holding
/// both a positive and a negative word yields `Unknown`.
pub fn parse_answer(text: &str, lexicon: &AnswerLexicon) -> Answer {
    for token in text.split_whitespace().take(ANSWER_TOKENS) {
        let lower = token.to_lowercase();
        let (mut pos, mut neg) = (false, false);
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            pos |= lexicon.positive.contains(word);
            neg |= lexicon.negative.contains(word);
        }
        match (pos, neg) {
            (true, true) => return Answer::Unknown,
            (true, false) => return Answer::Positive,
            (false, true) => return Answer::Negative,
            (false, false) => {}
        }
    }
    Answer::Unknown
}

/// `p(yes) / (p(yes) + p(no))` from natural-log probabilities.
pub fn yes_no_probability(logprob_yes: f64, logprob_no: f64) -> Result<f64, MetricError> {
    if !logprob_yes.is_finite() || !logprob_no.is_finite() {
        return Err(MetricError::MissingLogprob);
    }
    let m = logprob_yes.max(logprob_no);
    let ey = (logprob_yes - m).exp();
    let en = (logprob_no - m).exp();
    Ok(ey / (ey + en))
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore(i));
    }
    let mut positives = 0;
    for &l in labels {
        match l {
            0 => {}
            1 => positives += 1,
            other => return Err(MetricError::NonBinaryLabel(other)),
        }
    }
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::DegenerateLabels { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Blocks of equal score in descending order: `(positives, negatives)` per block.
fn tie_blocks(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<f64> = None;
    for i in order {
        // -0.0 and 0.0 are one block
        if last != Some(scores[i]) {
            blocks.push((0, 0));
            last = Some(scores[i]);
        }
        let block = blocks.last_mut().unwrap();
        if labels[i] == 1 {
            block.0 += 1;
        } else {
            block.1 += 1;
        }
    }
    blocks
}

/// Mann-Whitney AUROC: P(score_pos > score_neg), ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (p, n) = check_inputs(scores, labels)?;
    // Walk blocks from the lowest score upward, counting negatives below.
    let mut negatives_below: u128 = 0;
    let mut wins: u128 = 0;
    let mut ties: u128 = 0;
    for (bp, bn) in tie_blocks(scores, labels).into_iter().rev() {
        wins += bp as u128 * negatives_below;
        ties += bp as u128 * bn as u128;
        negatives_below += bn as u128;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (p as f64 * n as f64))
}

/// Average precision with tied scores processed as one block.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (p, _) = check_inputs(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (bp, bn) in tie_blocks(scores, labels) {
        tp += bp;
        fp += bn;
        if bp > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (bp as f64 / p as f64);
        }
    }
    Ok(ap)
}

/// One evaluated example, as written by an evaluator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: u8,
    pub answer_text: String,
    pub logprob_yes: Option<f64>,
    pub logprob_no: Option<f64>,
}

impl PredictionRecord {
    pub fn answer(&self, lexicon: &AnswerLexicon) -> Answer {
        parse_answer(&self.answer_text, lexicon)
    }

    /// Normalized yes/no probability, or the text score when log-probs are absent.
    pub fn probability_score(&self, lexicon: &AnswerLexicon) -> f64 {
        match (self.logprob_yes, self.logprob_no) {
            (Some(y), Some(n)) => yes_no_probability(y, n).unwrap_or_else(|_| self.answer(lexicon).score()),
            _ => self.answer(lexicon).score(),
        }
    }
}

#[derive(Debug, Error)]
#[error("predictions line {line}: {reason}")]
pub struct PredictionsFormatError {
    pub line: usize,
    pub reason: String,
}

/// Escapes tab, newline, carriage return and backslash for one TSV field.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Parses a predictions file: one tab-separated record per line,
/// `id  label  answer_text  [logprob_yes  logprob_no]`. Blank lines and lines
/// starting with `#` are skipped. `answer_text` uses backslash escapes.
pub fn parse_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionRecord>, PredictionsFormatError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let err = |reason: String| PredictionsFormatError { line: line_no, reason };
        let line = line.map_err(|e| err(e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 && fields.len() != 5 {
            return Err(err(format!(
                "expected 3 or 5 tab-separated fields, found {}",
                fields.len()
            )));
        }
        if fields[0].is_empty() {
            return Err(err("empty id".into()));
        }
        let label = match fields[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label {other:?} is not 0 or 1"))),
        };
        let (logprob_yes, logprob_no) = if fields.len() == 5 {
            let parse = |s: &str, what: &str| -> Result<Option<f64>, PredictionsFormatError> {
                let s = s.trim();
                if s.is_empty() {
                    return Ok(None);
                }
                let v: f64 = s.parse().map_err(|_| err(format!("{what} {s:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(err(format!("{what} {s:?} is not finite")));
                }
                Ok(Some(v))
            };
            (parse(fields[3], "logprob_yes")?, parse(fields[4], "logprob_no")?)
        } else {
            (None, None)
        };
        out.push(PredictionRecord {
            id: fields[0].to_string(),
            label,
            answer_text: unescape_field(fields[2]),
            logprob_yes,
            logprob_no,
        });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, PredictionsFormatError> {
    let file = std::fs::File::open(path).map_err(|e| PredictionsFormatError {
        line: 0,
        reason: format!("cannot open {}: {e}", path.display()),
    })?;
    parse_predictions(std::io::BufReader::new(file))
}

pub fn format_prediction(rec: &PredictionRecord) -> String {
    let mut line = format!("{}\t{}\t{}", rec.id, rec.label, escape_field(&rec.answer_text));
    if rec.logprob_yes.is_some() || rec.logprob_no.is_some() {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        line.push_str(&format!("\t{}\t{}", f(rec.logprob_yes), f(rec.logprob_no)));
    }
    line
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassificationReport {
    pub n: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub answers_positive: usize,
    pub answers_negative: usize,
    pub answers_unknown: usize,
    /// From answer text.
    pub auroc: f64,
    /// From normalized yes/no probabilities (text fallback).
    pub auprc: f64,
}

pub fn classification_report(
    records: &[PredictionRecord],
    lexicon: &AnswerLexicon,
) -> Result<ClassificationReport, MetricError> {
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let answers: Vec<Answer> = records.iter().map(|r| r.answer(lexicon)).collect();
    let text_scores: Vec<f64> = answers.iter().map(|a| a.score()).collect();
    let prob_scores: Vec<f64> = records.iter().map(|r| r.probability_score(lexicon)).collect();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    Ok(ClassificationReport {
        n: records.len(),
        positives,
        prevalence: positives as f64 / records.len().max(1) as f64,
        answers_positive: answers.iter().filter(|a| **a == Answer::Positive).count(),
        answers_negative: answers.iter().filter(|a| **a == Answer::Negative).count(),
        answers_unknown: answers.iter().filter(|a| **a == Answer::Unknown).count(),
        auroc: auroc(&text_scores, &labels)?,
        auprc: auprc(&prob_scores, &labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_answer_lexicon_cases() {
        let lex = AnswerLexicon::default();
        assert_eq!(parse_answer("Yes, the patient died", &lex), Answer::Positive);
        assert_eq!(parse_answer("no", &lex), Answer::Negative);
        assert_eq!(parse_answer("maybe later", &lex), Answer::Unknown);
        assert_eq!(parse_answer("  NO.", &lex), Answer::Negative);
        assert_eq!(parse_answer("Answer: yes", &lex), Answer::Positive);
        // third token is beyond the two-token cap
        assert_eq!(parse_answer("I think yes", &lex), Answer::Unknown);
        assert_eq!(parse_answer("yes no", &lex), Answer::Positive);
        assert_eq!(parse_answer("yes/no", &lex), Answer::Unknown);
        assert_eq!(parse_answer("", &lex), Answer::Unknown);
        assert_eq!(parse_answer("alive.", &lex), Answer::Negative);
        // substring is not a word match
        assert_eq!(parse_answer("yesterday", &lex), Answer::Unknown);
    }

    #[test]
    fn lexicon_must_be_disjoint() {
        assert!(AnswerLexicon::new(["yes"], ["YES"]).is_err());
    }

    #[test]
    fn yes_no_probability_cases() {
        let p = yes_no_probability(-1.0, -2.0).unwrap();
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p - oracle).abs() < 1e-15);
        assert!((p - 0.7310586).abs() < 1e-7);
        assert_eq!(yes_no_probability(-3.0, -3.0).unwrap(), 0.5);
        let tiny = yes_no_probability(-1000.0, 0.0).unwrap();
        assert!((0.0..1e-300).contains(&tiny));
        assert_eq!(yes_no_probability(0.0, -1000.0).unwrap(), 1.0);
        let (a, b) = (-0.3, -4.1);
        let s = yes_no_probability(a, b).unwrap() + yes_no_probability(b, a).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(yes_no_probability(f64::NAN, 0.0), Err(MetricError::MissingLogprob));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 6], &[1, 0, 0, 1, 0, 0]).unwrap(), 0.5);
        // pairs (p, n): (0.9,0.4) win, (0.9,0.6) win, (0.2,0.4) lose, (0.2,0.6) lose
        assert_eq!(auroc(&[0.9, 0.4, 0.6, 0.2], &[1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_labels_are_reported() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(MetricError::DegenerateLabels {
                positives: 2,
                negatives: 0
            })
        ));
        assert!(matches!(auprc(&[0.1], &[0]), Err(MetricError::DegenerateLabels { .. })));
        assert!(matches!(
            auroc(&[0.1], &[0, 1]),
            Err(MetricError::LengthMismatch { .. })
        ));
        assert!(matches!(
            auroc(&[0.1, 0.2], &[0, 2]),
            Err(MetricError::NonBinaryLabel(2))
        ));
    }

    #[test]
    fn auprc_examples() {
        let ap = auprc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(auprc(&[0.9, 0.1, 0.2], &[1, 0, 0]).unwrap(), 1.0);
        // one tie block at the top: precision of the whole block
        assert_eq!(auprc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn predictions_file_parsing() {
        let text = "# header\np1\t1\tYes\t-0.1\t-2.5\np2\t0\tno, she\\tsurvived\n\np3\t0\tmaybe\t\t\n";
        let recs = parse_predictions(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].logprob_yes, Some(-0.1));
        assert_eq!(recs[1].answer_text, "no, she\tsurvived");
        assert_eq!(recs[2].logprob_yes, None);
        for r in &recs {
            let again = parse_predictions(format_prediction(r).as_bytes()).unwrap();
            assert_eq!(&again[0], r);
        }

        let err = parse_predictions("p1\t2\tyes\n".as_bytes()).unwrap_err();
        assert_eq!(err.line, 1);
        let err = parse_predictions("p1\t1\tyes\np2\t0\n".as_bytes()).unwrap_err();
        assert_eq!(err.line, 2);
        assert!(parse_predictions("p1\t1\tyes\tx\t-1\n".as_bytes()).is_err());
    }

    #[test]
    fn report_uses_text_for_auroc_and_probabilities_for_auprc() {
        let rec = |id: &str, label, text: &str, ly: Option<f64>, ln: Option<f64>| PredictionRecord {
            id: id.into(),
            label,
            answer_text: text.into(),
            logprob_yes: ly,
            logprob_no: ln,
        };
        let records = vec![
            rec("a", 1, "yes", Some(-0.1), Some(-3.0)),
            rec("b", 0, "yes", Some(-1.0), Some(-0.5)),
            rec("c", 0, "no", Some(-4.0), Some(-0.01)),
            rec("d", 1, "hmm", None, None),
        ];
        let report = classification_report(&records, &AnswerLexicon::default()).unwrap();
        // text scores (1, 1, 0, 0.5): pairs a>c win, a=b tie, d<b lose, d>c win
        assert_eq!(report.auroc, (2.0 + 0.5) / 4.0);
        // probability scores: a ~0.948, d 0.5, b ~0.378, c ~0.019
        assert_eq!(report.auprc, 1.0);
        assert_eq!(report.answers_unknown, 1);
    }
}
