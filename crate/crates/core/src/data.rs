//! Categorical sequences, dataset ingestion and serialization, and
//! cross-validation fold planning.
//!
//! Category codes are zero-based inside the library (`0..n`) and one-based in
//! every file format (`1..=n`). Missing observations are stored as
//! [`MISSING`], a sentinel that can never collide with a real category.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Zero-based category code.
pub type Category = u16;

/// Marker for an unobserved position.
pub const MISSING: Category = Category::MAX;

/// Largest supported alphabet.
pub const MAX_CATEGORIES: usize = (Category::MAX - 1) as usize;

/// One observed sequence `y_1..y_T` together with its given initial state `y_0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoricalSequence {
    id: String,
    y0: Category,
    values: Vec<Category>,
}

impl CategoricalSequence {
    /// Builds a sequence from zero-based codes; `values` may contain [`MISSING`].
    pub fn new(id: impl Into<String>, y0: Category, values: Vec<Category>, n: usize) -> Result<Self> {
        let id = id.into();
        if values.is_empty() {
            return Err(Error::EmptySequence(id));
        }
        if usize::from(y0) >= n {
            return Err(Error::CategoryOutOfRange { id, value: i64::from(y0) + 1, n });
        }
        if let Some(&bad) = values.iter().find(|&&v| v != MISSING && usize::from(v) >= n) {
            return Err(Error::CategoryOutOfRange { id, value: i64::from(bad) + 1, n });
        }
        Ok(Self { id, y0, values })
    }

    /// Builds a sequence from one-based codes, `None` marking a missing value.
    pub fn from_one_based(id: impl Into<String>, y0: i64, values: &[Option<i64>], n: usize) -> Result<Self> {
        let id = id.into();
        let code = |v: i64| -> Result<Category> {
            if v < 1 || v > n as i64 {
                Err(Error::CategoryOutOfRange { id: id.clone(), value: v, n })
            } else {
                Ok((v - 1) as Category)
            }
        };
        let y0 = code(y0)?;
        let values = values.iter().map(|v| v.map_or(Ok(MISSING), code)).collect::<Result<Vec<_>>>()?;
        Self::new(id, y0, values, n)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn y0(&self) -> Category {
        self.y0
    }

    /// Observations `y_1..y_T`; position `j` lives at index `j - 1`.
    pub fn values(&self) -> &[Category] {
        &self.values
    }

    /// Sequence length `T`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == MISSING).count()
    }

    pub fn has_missing(&self) -> bool {
        self.values.contains(&MISSING)
    }

    /// One-based codes with `None` for missing positions.
    pub fn to_one_based(&self) -> Vec<Option<i64>> {
        self.values.iter().map(|&v| (v != MISSING).then(|| i64::from(v) + 1)).collect()
    }
}

/// `L ≥ 1` sequences over a shared alphabet of `n` categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    n: usize,
    sequences: Vec<CategoricalSequence>,
}

impl SequenceDataset {
    pub fn new(n: usize, sequences: Vec<CategoricalSequence>) -> Result<Self> {
        if n == 0 || n > MAX_CATEGORIES {
            return Err(Error::InvalidParameter(format!("category count {n} out of range")));
        }
        if sequences.is_empty() {
            return Err(Error::InvalidParameter("dataset has no sequences".into()));
        }
        let mut seen = HashSet::new();
        for s in &sequences {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            if usize::from(s.y0) >= n {
                return Err(Error::CategoryOutOfRange { id: s.id.clone(), value: i64::from(s.y0) + 1, n });
            }
            if let Some(&bad) = s.values.iter().find(|&&v| v != MISSING && usize::from(v) >= n) {
                return Err(Error::CategoryOutOfRange { id: s.id.clone(), value: i64::from(bad) + 1, n });
            }
        }
        Ok(Self { n, sequences })
    }

    /// Number of categories.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sequences(&self) -> &[CategoricalSequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sequences.iter().map(|s| s.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.sequences.iter().position(|s| s.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&CategoricalSequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    /// The sub-dataset holding `ids`, kept in dataset order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        if let Some(missing) = ids.iter().find(|id| self.get(id).is_none()) {
            return Err(Error::UnknownSequence(missing.clone()));
        }
        let sequences = self.sequences.iter().filter(|s| wanted.contains(s.id.as_str())).cloned().collect();
        Self::new(self.n, sequences)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: DataFormat,
    /// Category count; may instead come from a JSONL header line.
    pub n: Option<usize>,
    pub missing_token: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { format: DataFormat::Jsonl, n: None, missing_token: "NA".into() }
    }
}

/// Non-fatal findings from ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    /// CSV sequences without a position-0 row, whose `y0` was set to the first observed value.
    pub defaulted_y0: Vec<String>,
}

/// Reads a dataset in one of the supported formats.
///
/// JSONL holds one `{"id", "y0", "values"}` object per line, with `null`
/// (or the missing token as a string) for unobserved values, and an optional
/// `{"n": <int>}` header line. CSV uses the header `sequence_id,position,value`
/// with one-based contiguous positions; a position-0 row supplies `y0`.
pub fn load_dataset<R: Read>(source: R, opts: &LoadOptions) -> Result<(SequenceDataset, LoadReport)> {
    match opts.format {
        DataFormat::Jsonl => load_jsonl(source, opts),
        DataFormat::Csv => load_csv(source, opts),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: String,
    y0: i64,
    values: Vec<Value>,
}

fn resolve_n(declared: Option<usize>, header: Option<usize>) -> Result<usize> {
    match (declared, header) {
        (Some(a), Some(b)) if a != b => {
            Err(Error::InvalidParameter(format!("category count {a} disagrees with header value {b}")))
        }
        (Some(a), _) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::UnknownCategoryCount),
    }
}

fn load_jsonl<R: Read>(source: R, opts: &LoadOptions) -> Result<(SequenceDataset, LoadReport)> {
    let mut header_n = None;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| Error::Malformed { line: lineno, reason: e.to_string() })?;
        let is_header = value.as_object().is_some_and(|o| o.contains_key("n") && !o.contains_key("id"));
        if is_header {
            if header_n.is_some() {
                return Err(Error::Malformed { line: lineno, reason: "second header line".into() });
            }
            let n = value["n"].as_u64().ok_or_else(|| Error::Malformed {
                line: lineno,
                reason: "header n must be a positive integer".into(),
            })?;
            header_n = Some(n as usize);
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_value(value).map_err(|e| Error::Malformed { line: lineno, reason: e.to_string() })?;
        let mut vals = Vec::with_capacity(rec.values.len());
        for v in &rec.values {
            vals.push(match v {
                Value::Null => None,
                Value::String(s) if *s == opts.missing_token => None,
                Value::Number(num) => Some(
                    num.as_i64()
                        .ok_or_else(|| Error::Malformed { line: lineno, reason: format!("non-integer value {num}") })?,
                ),
                other => return Err(Error::Malformed { line: lineno, reason: format!("unexpected value {other}") }),
            });
        }
        records.push((rec.id, rec.y0, vals));
    }
    let n = resolve_n(opts.n, header_n)?;
    let sequences = records
        .into_iter()
        .map(|(id, y0, vals)| CategoricalSequence::from_one_based(id, y0, &vals, n))
        .collect::<Result<Vec<_>>>()?;
    Ok((SequenceDataset::new(n, sequences)?, LoadReport::default()))
}

fn load_csv<R: Read>(source: R, opts: &LoadOptions) -> Result<(SequenceDataset, LoadReport)> {
    let n = opts.n.ok_or(Error::UnknownCategoryCount)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let expected = ["sequence_id", "position", "value"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Malformed { line: 1, reason: "expected header sequence_id,position,value".into() });
    }

    // id -> (y0, position -> value), first-appearance order
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Option<i64>, Vec<(usize, Option<i64>)>)> = HashMap::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let lineno = idx + 2;
        let malformed = |reason: String| Error::Malformed { line: lineno, reason };
        if record.len() != 3 {
            return Err(malformed(format!("expected 3 fields, found {}", record.len())));
        }
        let id = record[0].to_string();
        let position: usize = record[1].parse().map_err(|_| malformed(format!("bad position {:?}", &record[1])))?;
        let value = if record[2] == opts.missing_token {
            None
        } else {
            Some(record[2].parse::<i64>().map_err(|_| malformed(format!("bad value {:?}", &record[2])))?)
        };
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (None, Vec::new())
        });
        if position == 0 {
            let y0 = value.ok_or_else(|| malformed(format!("initial state of {id} cannot be missing")))?;
            if entry.0.replace(y0).is_some() {
                return Err(malformed(format!("duplicate initial state for {id}")));
            }
        } else {
            entry.1.push((position, value));
        }
    }

    let mut report = LoadReport::default();
    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let (y0, mut positions) = rows.remove(&id).expect("id recorded on first appearance");
        if positions.is_empty() {
            return Err(Error::EmptySequence(id));
        }
        positions.sort_by_key(|&(p, _)| p);
        for (expect, &(p, _)) in (1..).zip(&positions) {
            if p != expect {
                return Err(Error::Malformed {
                    line: 0,
                    reason: format!("positions of {id} are not contiguous from 1 (found {p}, expected {expect})"),
                });
            }
        }
        let values: Vec<Option<i64>> = positions.into_iter().map(|(_, v)| v).collect();
        let y0 = match y0 {
            Some(y0) => y0,
            None => {
                let first = values.iter().flatten().next().copied().ok_or_else(|| {
                    Error::InvalidParameter(format!("sequence {id} has no initial state and no observed value"))
                })?;
                report.defaulted_y0.push(id.clone());
                first
            }
        };
        sequences.push(CategoricalSequence::from_one_based(id, y0, &values, n)?);
    }
    Ok((SequenceDataset::new(n, sequences)?, report))
}

#[derive(Serialize)]
struct JsonRecordOut<'a> {
    id: &'a str,
    y0: i64,
    values: Vec<Option<i64>>,
}

/// Writes the canonical JSONL form, header line first.
pub fn write_jsonl<W: Write>(dataset: &SequenceDataset, mut out: W) -> Result<()> {
    writeln!(out, "{}", serde_json::json!({ "n": dataset.n }))?;
    for s in &dataset.sequences {
        let rec = JsonRecordOut { id: &s.id, y0: i64::from(s.y0) + 1, values: s.to_one_based() };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

/// Writes the positional CSV form, including a position-0 row for `y0`.
pub fn write_csv<W: Write>(dataset: &SequenceDataset, out: W, missing_token: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sequence_id", "position", "value"])?;
    for s in &dataset.sequences {
        w.write_record([s.id.as_str(), "0", &(s.y0 + 1).to_string()])?;
        for (j, v) in s.to_one_based().into_iter().enumerate() {
            let value = v.map_or_else(|| missing_token.to_string(), |v| v.to_string());
            w.write_record([s.id.as_str(), &(j + 1).to_string(), &value])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStrategy {
    HoldOneOut,
    RandomPartition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn new(folds: Vec<Fold>) -> Self {
        Self { folds }
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Checks each fold against `dataset`: known ids, disjoint train/test,
    /// union equal to the full id set, and a non-empty test set.
    pub fn validate(&self, dataset: &SequenceDataset) -> Result<()> {
        let all: HashSet<&str> = dataset.sequences.iter().map(|s| s.id.as_str()).collect();
        for (f, fold) in self.folds.iter().enumerate() {
            if fold.test.is_empty() {
                return Err(Error::EmptyTestSet(f));
            }
            let train: HashSet<&str> = fold.train.iter().map(String::as_str).collect();
            let test: HashSet<&str> = fold.test.iter().map(String::as_str).collect();
            if let Some(id) = train.iter().chain(test.iter()).find(|id| !all.contains(**id)) {
                return Err(Error::UnknownSequence(id.to_string()));
            }
            if !train.is_disjoint(&test) {
                return Err(Error::InvalidParameter(format!("fold {f}: train and test overlap")));
            }
            if train.len() + test.len() != all.len() || train.len() != fold.train.len() || test.len() != fold.test.len()
            {
                return Err(Error::InvalidParameter(format!("fold {f}: train and test do not cover the dataset")));
            }
        }
        Ok(())
    }

    /// True when the test sets are pairwise disjoint and together cover `ids`.
    pub fn tests_partition(&self, ids: &[String]) -> bool {
        let mut seen = HashSet::new();
        for fold in &self.folds {
            for id in &fold.test {
                if !seen.insert(id.as_str()) {
                    return false;
                }
            }
        }
        seen.len() == ids.len() && ids.iter().all(|id| seen.contains(id.as_str()))
    }
}

/// Splits the dataset into `folds` train/test pairs.
///
/// `HoldOneOut` requires `folds == L` and tests each sequence alone.
/// `RandomPartition` shuffles the ids with a seeded generator and deals them
/// into test sets whose sizes differ by at most one.
pub fn make_folds(dataset: &SequenceDataset, folds: usize, strategy: FoldStrategy, seed: u64) -> Result<FoldPlan> {
    let l = dataset.len();
    let ids = dataset.ids();
    let groups: Vec<Vec<usize>> = match strategy {
        FoldStrategy::HoldOneOut => {
            if folds != l {
                return Err(Error::FoldCount { folds, sequences: l });
            }
            (0..l).map(|i| vec![i]).collect()
        }
        FoldStrategy::RandomPartition => {
            if folds < 2 || folds > l {
                return Err(Error::FoldCount { folds, sequences: l });
            }
            let mut order: Vec<usize> = (0..l).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (base, extra) = (l / folds, l % folds);
            let mut rest = order.as_slice();
            (0..folds)
                .map(|f| {
                    let size = base + usize::from(f < extra);
                    let (head, tail) = rest.split_at(size);
                    rest = tail;
                    let mut g = head.to_vec();
                    g.sort_unstable();
                    g
                })
                .collect()
        }
    };
    let folds = groups
        .into_iter()
        .map(|test_idx| {
            let in_test: HashSet<usize> = test_idx.iter().copied().collect();
            Fold {
                train: (0..l).filter(|i| !in_test.contains(i)).map(|i| ids[i].clone()).collect(),
                test: test_idx.iter().map(|&i| ids[i].clone()).collect(),
            }
        })
        .collect();
    Ok(FoldPlan { folds })
}
