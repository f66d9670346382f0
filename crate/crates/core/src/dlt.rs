//! Data leakage test: corpus perplexities over train / test / reference text
//! and the two deltas derived from them.
//!
//! `delta1 = p_test - p_ref` (negative: the model finds evaluation-domain
//! text easier than freshly generated reference text, i.e. it has likely
//! absorbed it) and `delta2 = p_test - p_train` (large positive: the model
//! fits the training split much better than the test split).

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_OVERFIT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum DltError {
    #[error("no perplexity records for split {0}")]
    EmptySplit(Split),
    #[error("perplexity {name} = {value} is not positive")]
    NonPositivePerplexity { name: &'static str, value: f64 },
    #[error("perplexity records line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Ref,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Ref => "ref",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "ref" | "reference" => Ok(Split::Ref),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Summed natural-log NLL of one document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerplexityRecord {
    pub split: Split,
    pub doc_id: String,
    pub n_tokens: u64,
    pub nll_sum: f64,
}

/// Running `(sum nll, sum tokens)`; partial accumulators merge associatively.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NllAccumulator {
    pub nll_sum: f64,
    pub n_tokens: u64,
}

impl NllAccumulator {
    pub fn add(&mut self, nll_sum: f64, n_tokens: u64) {
        self.nll_sum += nll_sum;
        self.n_tokens += n_tokens;
    }

    pub fn merge(self, other: NllAccumulator) -> NllAccumulator {
        NllAccumulator {
            nll_sum: self.nll_sum + other.nll_sum,
            n_tokens: self.n_tokens + other.n_tokens,
        }
    }

    pub fn perplexity(&self) -> Option<f64> {
        (self.n_tokens > 0).then(|| (self.nll_sum / self.n_tokens as f64).exp())
    }
}

/// Token-weighted perplexity `exp(sum nll / sum tokens)` over one split.
pub fn corpus_perplexity(records: &[PerplexityRecord], split: Split) -> Result<f64, DltError> {
    let acc = records
        .iter()
        .filter(|r| r.split == split)
        .fold(NllAccumulator::default(), |mut acc, r| {
            acc.add(r.nll_sum, r.n_tokens);
            acc
        });
    acc.perplexity().ok_or(DltError::EmptySplit(split))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerplexitySummary {
    pub p_train: f64,
    pub p_test: f64,
    pub p_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpretation {
    LowRisk,
    LeakSuspected,
    OverfitSuspected,
}

impl fmt::Display for Interpretation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpretation::LowRisk => "low_risk",
            Interpretation::LeakSuspected => "leak_suspected",
            Interpretation::OverfitSuspected => "overfit_suspected",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DltReport {
    pub delta1: f64,
    pub delta2: f64,
    pub summary: PerplexitySummary,
    pub interpretation: Interpretation,
}

pub fn dlt_deltas(p_train: f64, p_test: f64, p_ref: f64) -> Result<DltReport, DltError> {
    dlt_deltas_with_threshold(p_train, p_test, p_ref, DEFAULT_OVERFIT_THRESHOLD)
}

pub fn dlt_deltas_with_threshold(
    p_train: f64,
    p_test: f64,
    p_ref: f64,
    overfit_threshold: f64,
) -> Result<DltReport, DltError> {
    for (name, value) in [("p_train", p_train), ("p_test", p_test), ("p_ref", p_ref)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(DltError::NonPositivePerplexity { name, value });
        }
    }
    let delta1 = p_test - p_ref;
    let delta2 = p_test - p_train;
    let interpretation = if delta1 < 0.0 {
        Interpretation::LeakSuspected
    } else if delta2 > overfit_threshold {
        Interpretation::OverfitSuspected
    } else {
        Interpretation::LowRisk
    };
    Ok(DltReport {
        delta1,
        delta2,
        summary: PerplexitySummary { p_train, p_test, p_ref },
        interpretation,
    })
}

/// Aggregates every split and derives the deltas.
pub fn dlt_from_records(records: &[PerplexityRecord], overfit_threshold: f64) -> Result<DltReport, DltError> {
    dlt_deltas_with_threshold(
        corpus_perplexity(records, Split::Train)?,
        corpus_perplexity(records, Split::Test)?,
        corpus_perplexity(records, Split::Ref)?,
        overfit_threshold,
    )
}

/// Parses perplexity records: `split  doc_id  n_tokens  nll_sum`, separated
/// by tabs or spaces. Blank lines and `#` comments are skipped.
pub fn parse_perplexity_records<R: BufRead>(reader: R) -> Result<Vec<PerplexityRecord>, DltError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |reason: String| DltError::BadRecord { line: line_no, reason };
        let line = line.map_err(|e| bad(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [split, doc_id, n_tokens, nll_sum] = fields[..] else {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        };
        let split: Split = split.parse().map_err(bad)?;
        let n_tokens: u64 = n_tokens
            .parse()
            .map_err(|_| bad(format!("n_tokens {n_tokens:?} is not a positive integer")))?;
        if n_tokens == 0 {
            return Err(bad("n_tokens must be at least 1".into()));
        }
        let nll_sum: f64 = nll_sum
            .parse()
            .map_err(|_| bad(format!("nll_sum {nll_sum:?} is not a number")))?;
        if !nll_sum.is_finite() || nll_sum < 0.0 {
            return Err(bad(format!("nll_sum {nll_sum} must be finite and >= 0")));
        }
        out.push(PerplexityRecord {
            split,
            doc_id: doc_id.to_string(),
            n_tokens,
            nll_sum,
        });
    }
    Ok(out)
}

pub fn format_perplexity_record(r: &PerplexityRecord) -> String {
    format!("{}\t{}\t{}\t{}", r.split, r.doc_id, r.n_tokens, r.nll_sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(split: Split, n: u64, nll: f64) -> PerplexityRecord {
        PerplexityRecord {
            split,
            doc_id: "d".into(),
            n_tokens: n,
            nll_sum: nll,
        }
    }

    #[test]
    fn corpus_perplexity_cases() {
        assert_eq!(
            corpus_perplexity(&[rec(Split::Test, 5, 0.0)], Split::Test).unwrap(),
            1.0
        );
        let ln2 = std::f64::consts::LN_2;
        let records = [rec(Split::Train, 2, 2.0 * ln2), rec(Split::Train, 1, ln2)];
        assert!((corpus_perplexity(&records, Split::Train).unwrap() - 2.0).abs() < 1e-12);
        // uniform model over V symbols: each token costs ln V
        let v = 37.0f64;
        let uniform = [rec(Split::Ref, 11, 11.0 * v.ln())];
        assert!((corpus_perplexity(&uniform, Split::Ref).unwrap() - v).abs() < 1e-10);
        assert_eq!(
            corpus_perplexity(&records, Split::Ref),
            Err(DltError::EmptySplit(Split::Ref))
        );
    }

    #[test]
    fn deltas_match_reference_rows() {
        let r = dlt_deltas(9.22, 9.24, 4.97).unwrap();
        assert!((r.delta1 - 4.27).abs() < 1e-9);
        assert!((r.delta2 - 0.02).abs() < 1e-9);
        assert_eq!(r.interpretation, Interpretation::LowRisk);

        let r = dlt_deltas(1.57, 1.86, 2.84).unwrap();
        assert!((r.delta1 + 0.98).abs() < 1e-9);
        assert!((r.delta2 - 0.29).abs() < 1e-9);
        assert_eq!(r.interpretation, Interpretation::LeakSuspected);

        let r = dlt_deltas(3.0, 3.0, 3.0).unwrap();
        assert_eq!((r.delta1, r.delta2), (0.0, 0.0));
        assert_eq!(r.interpretation, Interpretation::LowRisk);

        let r = dlt_deltas(1.0, 2.0, 1.5).unwrap();
        assert_eq!(r.interpretation, Interpretation::OverfitSuspected);
    }

    #[test]
    fn non_positive_perplexity_rejected() {
        assert!(matches!(
            dlt_deltas(0.0, 1.0, 1.0),
            Err(DltError::NonPositivePerplexity { name: "p_train", .. })
        ));
        assert!(dlt_deltas(1.0, -2.0, 1.0).is_err());
        assert!(dlt_deltas(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn accumulator_merge_is_associative() {
        let a = NllAccumulator {
            nll_sum: 1.5,
            n_tokens: 3,
        };
        let b = NllAccumulator {
            nll_sum: 0.25,
            n_tokens: 1,
        };
        let c = NllAccumulator {
            nll_sum: 4.0,
            n_tokens: 8,
        };
        assert_eq!(a.merge(b).merge(c), a.merge(b.merge(c)));
    }

    #[test]
    fn record_file_parsing() {
        let text = "# split doc n nll\ntrain d1 10 23.5\ntest\td2\t4\t1.25\n\nreference d3 2 0\n";
        let recs = parse_perplexity_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].split, Split::Ref);
        assert!(matches!(
            parse_perplexity_records("dev d 1 1.0".as_bytes()),
            Err(DltError::BadRecord { line: 1, .. })
        ));
        assert!(parse_perplexity_records("train d 0 1.0".as_bytes()).is_err());
        assert!(parse_perplexity_records("train d 1 -1.0".as_bytes()).is_err());
    }
}
