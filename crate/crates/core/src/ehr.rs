//! Patient records, their text serialization, prompt templates and corpus
//! character statistics.
//!
//! Serialized form, one line per non-empty section in fixed order:
//!
//! ```text
//! ChartEvents: heart_rate=82 bpm (t=08:00); spo2=97
//! Medications: heparin=5000 units
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EhrError {
    #[error("line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error("line {line}: patient id {id:?} appears more than once")]
    DuplicatePatientId { line: usize, id: String },
    #[error("unknown prompt template {0:?} (mortality, qe)")]
    UnknownTemplate(String),
    #[error("no non-empty texts")]
    EmptyCorpus,
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectionKind {
    Demographics,
    Diagnosis,
    ChartEvents,
    Medications,
    Procedures,
    OutputEvents,
}

impl SectionKind {
    pub const ALL: [SectionKind; 6] = [
        SectionKind::Demographics,
        SectionKind::Diagnosis,
        SectionKind::ChartEvents,
        SectionKind::Medications,
        SectionKind::Procedures,
        SectionKind::OutputEvents,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionKind::Demographics => "Demographics",
            SectionKind::Diagnosis => "Diagnosis",
            SectionKind::ChartEvents => "ChartEvents",
            SectionKind::Medications => "Medications",
            SectionKind::Procedures => "Procedures",
            SectionKind::OutputEvents => "OutputEvents",
        }
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SectionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown section {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Deceased,
    Survived,
}

impl Outcome {
    pub fn label(self) -> u8 {
        u8::from(self == Outcome::Deceased)
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deceased" => Ok(Outcome::Deceased),
            "survived" => Ok(Outcome::Survived),
            other => Err(format!("unknown outcome {other:?} (deceased, survived)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FeatureValue {
    Text(String),
    Numeric { value: f64, unit: Option<String> },
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureValue::Text(s) => f.write_str(s),
            FeatureValue::Numeric { value, unit: None } => write!(f, "{value}"),
            FeatureValue::Numeric { value, unit: Some(u) } => write!(f, "{value} {u}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureEntry {
    pub name: String,
    pub value: FeatureValue,
    pub timestamp: Option<String>,
}

impl fmt::Display for FeatureEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.name, self.value)?;
        if let Some(t) = &self.timestamp {
            write!(f, " (t={t})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub sections: BTreeMap<SectionKind, Vec<FeatureEntry>>,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// One JSON object per line.
    RecordPerLine,
    /// Tab-separated rows, one feature per row.
    Delimited,
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" | "record_per_line" => Ok(InputFormat::RecordPerLine),
            "tsv" | "delimited" => Ok(InputFormat::Delimited),
            other => Err(format!("unknown input format {other:?} (jsonl, tsv)")),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    patient_id: String,
    #[serde(default)]
    outcome: Option<Outcome>,
    #[serde(default)]
    sections: BTreeMap<String, Vec<RawEntry>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    name: String,
    value: serde_json::Value,
    #[serde(default)]
    unit: Option<String>,
    #[serde(default)]
    timestamp: Option<String>,
}

fn make_entry(
    line: usize,
    name: String,
    value: FeatureValue,
    timestamp: Option<String>,
) -> Result<FeatureEntry, EhrError> {
    if name.trim().is_empty() {
        return Err(EhrError::SchemaViolation {
            line,
            reason: "feature name is empty".into(),
        });
    }
    Ok(FeatureEntry {
        name,
        value,
        timestamp: timestamp.filter(|t| !t.is_empty()),
    })
}

fn parse_section(line: usize, s: &str) -> Result<SectionKind, EhrError> {
    s.parse().map_err(|reason| EhrError::SchemaViolation { line, reason })
}

fn parse_json_line(line: usize, text: &str) -> Result<PatientRecord, EhrError> {
    let bad = |reason: String| EhrError::SchemaViolation { line, reason };
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if raw.patient_id.is_empty() {
        return Err(bad("patient_id is empty".into()));
    }
    let mut sections = BTreeMap::new();
    for (section, entries) in raw.sections {
        let kind = parse_section(line, &section)?;
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let value = match (e.value, e.unit) {
                (serde_json::Value::Number(n), unit) => FeatureValue::Numeric {
                    value: n.as_f64().ok_or_else(|| bad(format!("value {n} out of range")))?,
                    unit,
                },
                (serde_json::Value::String(s), None) => FeatureValue::Text(s),
                (serde_json::Value::String(_), Some(_)) => {
                    return Err(bad(format!("feature {:?}: a unit needs a numeric value", e.name)))
                }
                (other, _) => return Err(bad(format!("feature {:?}: unsupported value {other}", e.name))),
            };
            out.push(make_entry(line, e.name, value, e.timestamp)?);
        }
        sections.insert(kind, out);
    }
    Ok(PatientRecord {
        patient_id: raw.patient_id,
        sections,
        outcome: raw.outcome,
    })
}

pub const DELIMITED_HEADER: &str = "patient_id\toutcome\tsection\tname\tvalue\tunit\ttimestamp";

/// Delimited rows: `patient_id outcome section name value unit timestamp`.
/// Rows of one patient must be contiguous; the header line is optional.
fn parse_delimited<R: BufRead>(reader: R) -> Result<Vec<PatientRecord>, EhrError> {
    let mut out: Vec<PatientRecord> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |reason: String| EhrError::SchemaViolation { line: line_no, reason };
        let line = line.map_err(|e| bad(e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || line == DELIMITED_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 tab-separated fields, found {}", fields.len())));
        }
        let [id, outcome, section, name, value, unit, timestamp] = [
            fields[0], fields[1], fields[2], fields[3], fields[4], fields[5], fields[6],
        ];
        if id.is_empty() {
            return Err(bad("patient_id is empty".into()));
        }
        let outcome = match outcome {
            "" => None,
            o => Some(o.parse::<Outcome>().map_err(bad)?),
        };
        let kind = parse_section(line_no, section)?;
        let value = match value.parse::<f64>() {
            Ok(v) if v.is_finite() => FeatureValue::Numeric {
                value: v,
                unit: (!unit.is_empty()).then(|| unit.to_string()),
            },
            _ if !unit.is_empty() => return Err(bad(format!("feature {name:?}: a unit needs a numeric value"))),
            _ => FeatureValue::Text(value.to_string()),
        };
        let entry = make_entry(line_no, name.to_string(), value, Some(timestamp.to_string()))?;

        let continuing = out.last().is_some_and(|r| r.patient_id == id);
        if !continuing {
            if !seen.insert(id.to_string()) {
                return Err(EhrError::DuplicatePatientId {
                    line: line_no,
                    id: id.to_string(),
                });
            }
            out.push(PatientRecord {
                patient_id: id.to_string(),
                sections: BTreeMap::new(),
                outcome,
            });
        }
        let record = out.last_mut().expect("pushed above");
        if record.outcome != outcome {
            return Err(bad(format!("conflicting outcome for patient {id:?}")));
        }
        record.sections.entry(kind).or_default().push(entry);
    }
    Ok(out)
}

pub fn parse_patients<R: BufRead>(reader: R, format: InputFormat) -> Result<Vec<PatientRecord>, EhrError> {
    if format == InputFormat::Delimited {
        return parse_delimited(reader);
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| EhrError::SchemaViolation {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_json_line(line_no, &line)?;
        if !seen.insert(record.patient_id.clone()) {
            return Err(EhrError::DuplicatePatientId {
                line: line_no,
                id: record.patient_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_patients(path: &Path, format: InputFormat) -> Result<Vec<PatientRecord>, EhrError> {
    let file = std::fs::File::open(path).map_err(|e| EhrError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_patients(std::io::BufReader::new(file), format)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SerializationFilter {
    Full,
    /// ChartEvents and Medications only.
    Hard,
}

impl SerializationFilter {
    pub fn includes(self, kind: SectionKind) -> bool {
        match self {
            SerializationFilter::Full => true,
            SerializationFilter::Hard => {
                matches!(kind, SectionKind::ChartEvents | SectionKind::Medications)
            }
        }
    }
}

impl FromStr for SerializationFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(SerializationFilter::Full),
            "hard" => Ok(SerializationFilter::Hard),
            other => Err(format!("unknown filter {other:?} (full, hard)")),
        }
    }
}

pub fn serialize_patient(record: &PatientRecord, filter: SerializationFilter) -> String {
    SectionKind::ALL
        .into_iter()
        .filter(|&k| filter.includes(k))
        .filter_map(|k| {
            let entries = record.sections.get(&k).filter(|e| !e.is_empty())?;
            let body: Vec<String> = entries.iter().map(ToString::to_string).collect();
            Some(format!("{k}: {}", body.join("; ")))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

const MORTALITY_TEMPLATE: &str = include_str!("../resources/templates/mortality.txt");
const QE_TEMPLATE: &str = include_str!("../resources/templates/qe.txt");
const SLOT: &str = "{patient_data}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTemplate {
    Mortality,
    /// Keyword generation for query expansion.
    Qe,
}

impl PromptTemplate {
    pub fn text(self) -> &'static str {
        match self {
            PromptTemplate::Mortality => MORTALITY_TEMPLATE,
            PromptTemplate::Qe => QE_TEMPLATE,
        }
    }

    pub fn render(self, patient_text: &str) -> String {
        self.text().replacen(SLOT, patient_text, 1)
    }
}

impl FromStr for PromptTemplate {
    type Err = EhrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mortality" => Ok(PromptTemplate::Mortality),
            "qe" => Ok(PromptTemplate::Qe),
            other => Err(EhrError::UnknownTemplate(other.to_string())),
        }
    }
}

pub fn build_prompt(patient_text: &str, template: &str) -> Result<String, EhrError> {
    Ok(template.parse::<PromptTemplate>()?.render(patient_text))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TextStats {
    pub n_texts: usize,
    pub avg_total_chars: f64,
    pub avg_digit_chars: f64,
    pub avg_space_chars: f64,
    pub avg_letterpunct_chars: f64,
    pub digit_proportion: f64,
    pub space_proportion: f64,
    pub letterpunct_proportion: f64,
}

/// Averages character classes over non-empty texts: ASCII digits, ASCII
/// space / tab / newline, and everything else.
pub fn corpus_stats<S: AsRef<str>>(texts: &[S]) -> Result<TextStats, EhrError> {
    let (mut n, mut total, mut digits, mut spaces) = (0usize, 0u64, 0u64, 0u64);
    for t in texts {
        let t = t.as_ref();
        if t.is_empty() {
            continue;
        }
        n += 1;
        for c in t.chars() {
            total += 1;
            if c.is_ascii_digit() {
                digits += 1;
            } else if matches!(c, ' ' | '\t' | '\n') {
                spaces += 1;
            }
        }
    }
    if n == 0 {
        return Err(EhrError::EmptyCorpus);
    }
    let rest = total - digits - spaces;
    let avg = |x: u64| x as f64 / n as f64;
    let prop = |x: u64| x as f64 / total as f64;
    Ok(TextStats {
        n_texts: n,
        avg_total_chars: avg(total),
        avg_digit_chars: avg(digits),
        avg_space_chars: avg(spaces),
        avg_letterpunct_chars: avg(rest),
        digit_proportion: prop(digits),
        space_proportion: prop(spaces),
        letterpunct_proportion: prop(rest),
    })
}
