//! Labeled passage corpora: loading, validation, report-level splitting and
//! class statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("corpus {0} is empty")]
    Empty(String),
    #[error("test report {0} does not occur in the corpus")]
    UnknownReport(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// One labeled text unit taken from a report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub report_id: String,
    pub text: String,
    /// `true` when the passage states a relevant emission goal.
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    name: String,
    passages: Vec<Passage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guess the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl Corpus {
    /// Build a corpus, enforcing unique ids, non-empty text and at least one
    /// passage.
    pub fn new(name: impl Into<String>, passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let name = name.into();
        if passages.is_empty() {
            return Err(CorpusError::Empty(name));
        }
        let mut seen = HashSet::new();
        for (i, p) in passages.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(CorpusError::Record {
                    line: i + 1,
                    message: "empty text".into(),
                });
            }
            if !seen.insert(p.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: p.id.clone(),
                });
            }
        }
        Ok(Corpus { name, passages })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.passages.iter().find(|p| p.id == id)
    }

    /// Distinct report ids in first-appearance order.
    pub fn report_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.passages
            .iter()
            .filter(|p| seen.insert(p.report_id.as_str()))
            .map(|p| p.report_id.as_str())
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = Vec::new();
        for p in &self.passages {
            serde_json::to_writer(&mut out, p).expect("passage serializes");
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&out).map_err(io_err)
    }
}

/// Load a corpus from JSONL or CSV. The corpus is named after the file stem.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string();
    let passages = match format {
        CorpusFormat::Jsonl => read_jsonl(BufReader::new(file))?,
        CorpusFormat::Csv => read_csv(file)?,
    };
    Corpus::new(name, passages)
}

pub fn parse_jsonl(name: &str, data: &str) -> Result<Corpus, CorpusError> {
    Corpus::new(name, read_jsonl(data.as_bytes())?)
}

fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Passage>, CorpusError> {
    let mut passages = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            line: line_no,
            message: format!("malformed JSON: {e}"),
        })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::Record {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        let field = |key: &str| {
            obj.get(key).ok_or_else(|| CorpusError::Record {
                line: line_no,
                message: format!("missing field {key}"),
            })
        };
        let string_field = |key: &str| -> Result<String, CorpusError> {
            match field(key)? {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                _ => Err(CorpusError::Record {
                    line: line_no,
                    message: format!("field {key} must be a string"),
                }),
            }
        };
        let id = string_field("id")?;
        let report_id = string_field("report_id")?;
        let text = string_field("text")?;
        let label = match field("label")? {
            Value::Bool(b) => *b,
            Value::String(s) => parse_label_str(s, line_no)?,
            _ => {
                return Err(CorpusError::Record {
                    line: line_no,
                    message: "field label must be a boolean".into(),
                })
            }
        };
        passages.push(check_record(&mut ids, line_no, id, report_id, text, label)?);
    }
    Ok(passages)
}

fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<Passage>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::Record {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |key: &str| headers.iter().position(|h| h.trim() == key);
    let cols = ["id", "report_id", "text", "label"].map(column);
    for (key, col) in ["id", "report_id", "text", "label"].iter().zip(cols) {
        if col.is_none() {
            return Err(CorpusError::Record {
                line: 1,
                message: format!("missing field {key}"),
            });
        }
    }
    let [id_col, report_col, text_col, label_col] = cols.map(Option::unwrap);

    let mut passages = Vec::new();
    let mut ids = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CorpusError::Record {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: format!("malformed row: {e}"),
        })?;
        let line_no = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |col: usize, key: &str| {
            record.get(col).map(str::to_string).ok_or_else(|| CorpusError::Record {
                line: line_no,
                message: format!("missing field {key}"),
            })
        };
        let label = parse_label_str(&get(label_col, "label")?, line_no)?;
        passages.push(check_record(
            &mut ids,
            line_no,
            get(id_col, "id")?,
            get(report_col, "report_id")?,
            get(text_col, "text")?,
            label,
        )?);
    }
    Ok(passages)
}

fn check_record(
    ids: &mut HashSet<String>,
    line: usize,
    id: String,
    report_id: String,
    text: String,
    label: bool,
) -> Result<Passage, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::Record {
            line,
            message: "empty text".into(),
        });
    }
    if !ids.insert(id.clone()) {
        return Err(CorpusError::DuplicateId { line, id });
    }
    Ok(Passage {
        id,
        report_id,
        text,
        label,
    })
}

fn parse_label_str(s: &str, line: usize) -> Result<bool, CorpusError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(CorpusError::Record {
            line,
            message: format!("invalid label {other:?}"),
        }),
    }
}

/// How test reports are chosen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Exactly these reports form the test set.
    Named { test_report_ids: BTreeSet<String> },
    /// `test_report_count` reports drawn deterministically from `seed`.
    Sampled { test_report_count: usize, seed: u64 },
}

/// Partition a corpus into (train, test) so that no report contributes to both.
pub fn split_by_report(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus), CorpusError> {
    let reports = corpus.report_ids();
    let test_reports: BTreeSet<String> = match spec {
        SplitSpec::Named { test_report_ids } => {
            if test_report_ids.is_empty() {
                return Err(CorpusError::InvalidSplit("no test reports named".into()));
            }
            for r in test_report_ids {
                if !reports.contains(&r.as_str()) {
                    return Err(CorpusError::UnknownReport(r.clone()));
                }
            }
            test_report_ids.clone()
        }
        SplitSpec::Sampled {
            test_report_count,
            seed,
        } => {
            if *test_report_count == 0 || *test_report_count >= reports.len() {
                return Err(CorpusError::InvalidSplit(format!(
                    "test_report_count must be in 1..{}, got {test_report_count}",
                    reports.len()
                )));
            }
            // Sort first so the draw depends only on the set of reports.
            let mut pool: Vec<&str> = reports.clone();
            pool.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            pool.shuffle(&mut rng);
            pool.into_iter()
                .take(*test_report_count)
                .map(str::to_string)
                .collect()
        }
    };

    let (test, train): (Vec<Passage>, Vec<Passage>) = corpus
        .passages
        .iter()
        .cloned()
        .partition(|p| test_reports.contains(&p.report_id));
    if test.is_empty() || train.is_empty() {
        return Err(CorpusError::InvalidSplit(
            "split would leave the train or test set empty".into(),
        ));
    }
    Ok((
        Corpus::new(format!("{}-train", corpus.name), train)?,
        Corpus::new(format!("{}-test", corpus.name), test)?,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub total: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub total: usize,
    pub positives: usize,
    pub positive_rate: f64,
    pub per_report: BTreeMap<String, ReportCounts>,
}

pub fn class_stats(corpus: &Corpus) -> ClassStats {
    let mut per_report: BTreeMap<String, ReportCounts> = BTreeMap::new();
    for p in &corpus.passages {
        let entry = per_report.entry(p.report_id.clone()).or_default();
        entry.total += 1;
        entry.positives += usize::from(p.label);
    }
    let total = corpus.passages.len();
    let positives = corpus.passages.iter().filter(|p| p.label).count();
    ClassStats {
        total,
        positives,
        positive_rate: positives as f64 / total as f64,
        per_report,
    }
}
