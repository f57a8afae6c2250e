//! Ground truth, micro-average precision, and the submission / PR-curve CSVs.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::matcher::ScoredPair;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("ground truth has no pairs")]
    EmptyGroundTruth,
    #[error("pair ({0}, {1}) submitted twice")]
    DuplicatePair(String, String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pairs: BTreeSet<(String, String)>,
}

impl GroundTruth {
    pub fn from_pairs<I, Q, R>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (Q, R)>,
        Q: Into<String>,
        R: Into<String>,
    {
        Self {
            pairs: pairs.into_iter().map(|(q, r)| (q.into(), r.into())).collect(),
        }
    }

    /// Number of true pairs.
    pub fn positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn contains(&self, query_id: &str, reference_id: &str) -> bool {
        self.pairs.contains(&(query_id.to_string(), reference_id.to_string()))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(q, r)| (q.as_str(), r.as_str()))
    }
}

fn csv_reader(reader: impl std::io::Read) -> csv::Reader<impl std::io::Read> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader)
}

/// `query_id,reference_id` with a header row; duplicates collapse.
pub fn read_ground_truth(reader: impl std::io::Read) -> Result<GroundTruth> {
    let mut pairs = BTreeSet::new();
    for (i, record) in csv_reader(reader).records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 2, |p| p.line() as usize);
        if record.len() != 2 || record[0].is_empty() || record[1].is_empty() {
            return Err(EvalError::MalformedRow {
                line,
                reason: "expected query_id,reference_id".into(),
            });
        }
        pairs.insert((record[0].to_string(), record[1].to_string()));
    }
    if pairs.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    Ok(GroundTruth { pairs })
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    read_ground_truth(std::fs::File::open(path)?)
}

pub fn write_ground_truth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query_id", "reference_id"])?;
    for (q, r) in gt.pairs() {
        w.write_record([q, r])?;
    }
    w.flush()?;
    Ok(())
}

/// One submitted (query, reference) pair with its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmissionEntry {
    pub query_id: String,
    pub reference_id: String,
    pub score: f64,
}

impl From<&ScoredPair> for SubmissionEntry {
    fn from(p: &ScoredPair) -> Self {
        Self {
            query_id: p.query_id.clone(),
            reference_id: p.reference_id.clone(),
            score: p.score as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub rank: usize,
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub micro_ap: f64,
}

/// Ranks by score descending, ties by (query, reference), and sums
/// precision@k / P at every true positive.
pub fn micro_ap(submission: &[SubmissionEntry], gt: &GroundTruth) -> Result<PrCurve> {
    let positives = gt.positives();
    if positives == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    let mut seen = HashSet::with_capacity(submission.len());
    for e in submission {
        if !seen.insert((e.query_id.as_str(), e.reference_id.as_str())) {
            return Err(EvalError::DuplicatePair(e.query_id.clone(), e.reference_id.clone()));
        }
    }
    let mut ranked: Vec<&SubmissionEntry> = submission.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.query_id.cmp(&b.query_id))
            .then_with(|| a.reference_id.cmp(&b.reference_id))
    });
    let p = positives as f64;
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut points = Vec::with_capacity(ranked.len());
    for (i, e) in ranked.iter().enumerate() {
        let k = i + 1;
        let hit = gt.contains(&e.query_id, &e.reference_id);
        if hit {
            tp += 1;
        }
        let precision = tp as f64 / k as f64;
        if hit {
            ap += precision / p;
        }
        points.push(PrPoint {
            rank: k,
            score: e.score,
            precision,
            recall: tp as f64 / p,
        });
    }
    Ok(PrCurve { points, micro_ap: ap })
}

pub fn micro_ap_pairs(pairs: &[ScoredPair], gt: &GroundTruth) -> Result<PrCurve> {
    let entries: Vec<SubmissionEntry> = pairs.iter().map(SubmissionEntry::from).collect();
    micro_ap(&entries, gt)
}

/// `rank,score,precision,recall` rows and a closing `# micro_ap=` line.
pub fn write_pr_csv(curve: &PrCurve, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rank,score,precision,recall")?;
    for p in &curve.points {
        writeln!(f, "{},{},{},{}", p.rank, p.score, p.precision, p.recall)?;
    }
    writeln!(f, "# micro_ap={}", curve.micro_ap)?;
    f.flush()?;
    Ok(())
}

/// `query_id,reference_id,score` with integer scores, in the given order.
pub fn write_submission(pairs: &[ScoredPair], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query_id", "reference_id", "score"])?;
    for p in pairs {
        w.write_record([p.query_id.as_str(), p.reference_id.as_str(), &p.score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_submission(reader: impl std::io::Read) -> Result<Vec<SubmissionEntry>> {
    let mut out = Vec::new();
    for (i, record) in csv_reader(reader).records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 2, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(EvalError::MalformedRow {
                line,
                reason: "expected query_id,reference_id,score".into(),
            });
        }
        let score = record[2].parse::<f64>().map_err(|e| EvalError::MalformedRow {
            line,
            reason: format!("score: {e}"),
        })?;
        out.push(SubmissionEntry {
            query_id: record[0].to_string(),
            reference_id: record[1].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn load_submission(path: impl AsRef<Path>) -> Result<Vec<SubmissionEntry>> {
    read_submission(std::fs::File::open(path)?)
}
