//! Essay corpus ingestion, validation, splitting and grade statistics.
//!
//! Records follow the Essay-br layout: a prompt (the assigned theme), the
//! essay body and five competency scores on the 0..=200 grid in steps of 40.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AesError, Result};

/// Number of graded competencies.
pub const COMPETENCIES: usize = 5;

/// The score values a single competency may take.
pub const SCORE_GRID: [u32; 6] = [0, 40, 80, 120, 160, 200];

pub const SCORE_STEP: u32 = 40;
pub const MAX_SCORE: u32 = 200;

/// Textual boundary marker that is never allowed inside prompt or essay text.
/// The prompt/essay boundary is carried by the tokenizer's `[SEP]` token.
pub const RESERVED_MARKER: &str = "<SEP>";

pub fn is_on_grid(score: i64) -> bool {
    (0..=MAX_SCORE as i64).contains(&score) && score % SCORE_STEP as i64 == 0
}

/// Five competency scores, each on [`SCORE_GRID`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct ScoreVector([u32; COMPETENCIES]);

impl ScoreVector {
    /// Builds a score vector, rejecting off-grid values. The error carries the
    /// offending competency position (0-based).
    pub fn new(scores: [i64; COMPETENCIES]) -> std::result::Result<Self, (usize, i64)> {
        let mut out = [0u32; COMPETENCIES];
        for (k, &s) in scores.iter().enumerate() {
            if !is_on_grid(s) {
                return Err((k, s));
            }
            out[k] = s as u32;
        }
        Ok(ScoreVector(out))
    }

    pub fn get(&self, competency: usize) -> u32 {
        self.0[competency]
    }

    pub fn as_array(&self) -> [u32; COMPETENCIES] {
        self.0
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

impl TryFrom<Vec<i64>> for ScoreVector {
    type Error = String;

    fn try_from(v: Vec<i64>) -> std::result::Result<Self, String> {
        let arr: [i64; COMPETENCIES] = v
            .try_into()
            .map_err(|v: Vec<i64>| format!("expected {COMPETENCIES} scores, got {}", v.len()))?;
        ScoreVector::new(arr).map_err(|(k, s)| off_grid_message(k, s))
    }
}

impl From<ScoreVector> for Vec<i64> {
    fn from(s: ScoreVector) -> Self {
        s.0.iter().map(|&x| x as i64).collect()
    }
}

fn off_grid_message(k: usize, s: i64) -> String {
    format!("c{} = {s} is not on the score grid {SCORE_GRID:?}", k + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EssayRecord {
    pub id: String,
    pub prompt: String,
    pub essay: String,
    pub scores: ScoreVector,
}

impl EssayRecord {
    /// The theme and essay as the two segments of the model input.
    pub fn compose_pair(&self) -> (&str, &str) {
        (&self.prompt, &self.essay)
    }
}

/// An immutable, validated collection of essays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    records: Vec<EssayRecord>,
    prompt_count: usize,
}

impl Corpus {
    /// Validates every record and builds the corpus.
    pub fn from_records(records: Vec<EssayRecord>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for (index, r) in records.iter().enumerate() {
            validate_text(index, "prompt", &r.prompt)?;
            validate_text(index, "essay", &r.essay)?;
            if !ids.insert(r.id.as_str()) {
                return Err(AesError::validation(
                    index,
                    "id",
                    format!("duplicate id {:?}", r.id),
                ));
            }
        }
        let prompt_count = records
            .iter()
            .map(|r| r.prompt.as_str())
            .collect::<HashSet<_>>()
            .len();
        Ok(Corpus {
            records,
            prompt_count,
        })
    }

    pub fn records(&self) -> &[EssayRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    /// Writes the corpus as JSONL, one record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| AesError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(w, "{line}").map_err(|e| AesError::io(path, e))?;
        }
        w.flush().map_err(|e| AesError::io(path, e))
    }
}

fn validate_text(index: usize, field: &str, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(AesError::validation(index, field, "text is empty"));
    }
    if text.contains(RESERVED_MARKER) {
        return Err(AesError::validation(
            index,
            field,
            format!("text contains the reserved marker {RESERVED_MARKER:?}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(format!("unknown corpus format {other:?} (expected jsonl or csv)")),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EssayText {
    Whole(String),
    Paragraphs(Vec<String>),
}

#[derive(Deserialize)]
struct JsonlRow {
    id: String,
    prompt: String,
    essay: EssayText,
    scores: Vec<i64>,
}

#[derive(Deserialize)]
struct CsvRow {
    id: String,
    prompt: String,
    essay: String,
    c1: i64,
    c2: i64,
    c3: i64,
    c4: i64,
    c5: i64,
}

const CSV_HEADER: [&str; 8] = ["id", "prompt", "essay", "c1", "c2", "c3", "c4", "c5"];

fn make_record(
    index: usize,
    id: String,
    prompt: String,
    essay: String,
    scores: &[i64],
) -> Result<EssayRecord> {
    let arr: [i64; COMPETENCIES] = scores.try_into().map_err(|_| {
        AesError::validation(
            index,
            "scores",
            format!("expected {COMPETENCIES} scores, got {}", scores.len()),
        )
    })?;
    let scores = ScoreVector::new(arr).map_err(|(k, s)| {
        AesError::validation(index, &format!("c{}", k + 1), off_grid_message(k, s))
    })?;
    Ok(EssayRecord {
        id,
        prompt,
        essay,
        scores,
    })
}

/// Loads and validates a corpus file.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| AesError::io(path, e))?;
    let records = match format {
        CorpusFormat::Jsonl => read_jsonl(BufReader::new(file), path)?,
        CorpusFormat::Csv => read_csv(file)?,
    };
    Corpus::from_records(records)
}

fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Vec<EssayRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AesError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| AesError::Format {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let essay = match row.essay {
            EssayText::Whole(s) => s,
            EssayText::Paragraphs(ps) => ps.join("\n"),
        };
        let index = records.len();
        records.push(make_record(index, row.id, row.prompt, essay, &row.scores)?);
    }
    Ok(records)
}

fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<EssayRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| AesError::Format {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
        return Err(AesError::Format {
            line: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| AesError::Format {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let index = records.len();
        let scores = [row.c1, row.c2, row.c3, row.c4, row.c5];
        records.push(make_record(index, row.id, row.prompt, row.essay, &scores)?);
    }
    Ok(records)
}

/// Train/validation/test proportions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_ratio: f64, val_ratio: f64, test_ratio: f64, seed: u64) -> Result<Self> {
        let ratios = [train_ratio, val_ratio, test_ratio];
        if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(AesError::InvalidSplit(format!(
                "ratios must be positive, got {ratios:?}"
            )));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AesError::InvalidSplit(format!(
                "ratios must sum to 1, got {sum}"
            )));
        }
        Ok(SplitSpec {
            train_ratio,
            val_ratio,
            test_ratio,
            seed,
        })
    }

    /// Part sizes for `n` records: floor for train and validation, the
    /// remainder goes to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train_ratio * n as f64).floor() as usize;
        let val = ((self.val_ratio * n as f64).floor() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    pub seed: u64,
}

/// Shuffles record indices with a seeded permutation and slices them into
/// train, validation and test parts.
pub fn split_corpus(corpus: &Corpus, spec: &SplitSpec) -> Result<Split> {
    if corpus.is_empty() {
        return Err(AesError::EmptyCorpus);
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let (n_train, n_val, _) = spec.sizes(n);
    let take = |idx: &[usize]| -> Corpus {
        let records = idx.iter().map(|&i| corpus.records[i].clone()).collect();
        Corpus::from_records(records).expect("subset of a valid corpus is valid")
    };
    Ok(Split {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
        seed: spec.seed,
    })
}

/// `counts[bin][competency]`, bins ordered as [`SCORE_GRID`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GradeHistogram {
    pub counts: [[usize; COMPETENCIES]; SCORE_GRID.len()],
}

impl GradeHistogram {
    /// Count of records scoring `score` on `competency` (0-based).
    pub fn count(&self, score: u32, competency: usize) -> usize {
        SCORE_GRID
            .iter()
            .position(|&s| s == score)
            .map(|bin| self.counts[bin][competency])
            .unwrap_or(0)
    }

    /// CSV with header `score,c1,c2,c3,c4,c5` and one row per grid value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("score,c1,c2,c3,c4,c5\n");
        for (bin, score) in SCORE_GRID.iter().enumerate() {
            out.push_str(&score.to_string());
            for c in self.counts[bin] {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub fn grade_histogram(corpus: &Corpus) -> GradeHistogram {
    let mut hist = GradeHistogram::default();
    for r in corpus.records() {
        for k in 0..COMPETENCIES {
            let bin = (r.scores.get(k) / SCORE_STEP) as usize;
            hist.counts[bin][k] += 1;
        }
    }
    hist
}
