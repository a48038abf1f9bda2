//! Faithfulness evaluation over trajectory logs: a judge decides for every
//! tool-output crop whether it shows the queried object, and an example is
//! faithful if any of its crops passes.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer::closed_form_match;
use crate::judge::{judge_crop_relevance, Judge, JudgeError};
use crate::reward::ArtifactSource;
use crate::sandbox::MediaKind;
use crate::trajectory::Trajectory;

#[derive(Debug, thiserror::Error)]
pub enum FaithfulnessError {
    #[error("no answer-map entry for example {0:?}")]
    MissingAnswerMap(String),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("answer map line {line}: {message}")]
    BadAnswerMap { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of the answer map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub example_id: String,
    #[serde(default)]
    pub prediction: Option<String>,
    #[serde(default)]
    pub gold: Option<String>,
    /// Precomputed correctness; wins over prediction/gold when present.
    #[serde(default)]
    pub hit: Option<bool>,
}

impl AnswerEntry {
    /// Unparseable or unmatched answers count as incorrect.
    pub fn correct(&self) -> bool {
        if let Some(hit) = self.hit {
            return hit;
        }
        match (&self.prediction, &self.gold) {
            (Some(p), Some(g)) => closed_form_match(p, g) == Some(true),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnswerMap(pub BTreeMap<String, AnswerEntry>);

impl AnswerMap {
    pub fn from_entries(entries: impl IntoIterator<Item = AnswerEntry>) -> Self {
        Self(entries.into_iter().map(|e| (e.example_id.clone(), e)).collect())
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, FaithfulnessError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: AnswerEntry = serde_json::from_str(&line).map_err(|e| FaithfulnessError::BadAnswerMap {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn correct(&self, example_id: &str) -> Result<bool, FaithfulnessError> {
        self.0
            .get(example_id)
            .map(AnswerEntry::correct)
            .ok_or_else(|| FaithfulnessError::MissingAnswerMap(example_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropVerdict {
    pub crop_id: String,
    pub verdict: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaithfulnessRecord {
    pub example_id: String,
    pub crops: Vec<CropVerdict>,
    pub any_crop: bool,
    pub answer_correct: bool,
    /// Code steps that produced at least one image.
    pub tool_count: usize,
    /// Crops that could not be read; they count as failing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unreadable: Vec<String>,
}

impl FaithfulnessRecord {
    pub fn new(example_id: impl Into<String>, crops: Vec<CropVerdict>, answer_correct: bool, tool_count: usize) -> Self {
        let any_crop = crops.iter().any(|c| c.verdict == 1);
        Self {
            example_id: example_id.into(),
            crops,
            any_crop,
            answer_correct,
            tool_count,
            unreadable: Vec::new(),
        }
    }
}

pub const BUCKETS: [&str; 4] = ["0", "1", "2", "3+"];

pub fn bucket_of(tool_count: usize) -> &'static str {
    BUCKETS[tool_count.min(3)]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub count: usize,
    /// Share of all examples in this bucket.
    pub fraction_total: f64,
    /// Share of all examples in this bucket and answered correctly.
    pub fraction_correct: f64,
}

pub type Histogram = BTreeMap<String, HistogramBucket>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub examples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Faithful among correct examples.
    pub conditional_faithful: f64,
    /// Faithful and correct, over all examples.
    pub unconditional_faithful: f64,
    /// Correct examples that used a tool but had no passing crop, over correct.
    pub unfaithful_rate: f64,
    /// Examples without any image-producing tool step, over all.
    pub no_tool_rate: f64,
    pub histogram: Histogram,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Histogram over `(tool_count, correct)` pairs.
pub fn histogram_from_counts(items: &[(usize, bool)]) -> Histogram {
    let mut h: Histogram = BUCKETS.iter().map(|b| (b.to_string(), HistogramBucket::default())).collect();
    let mut correct: BTreeMap<&str, usize> = BTreeMap::new();
    for (n, c) in items {
        let b = bucket_of(*n);
        h.get_mut(b).expect("fixed bucket").count += 1;
        if *c {
            *correct.entry(b).or_default() += 1;
        }
    }
    for (k, v) in h.iter_mut() {
        v.fraction_total = ratio(v.count, items.len());
        v.fraction_correct = ratio(correct.get(k.as_str()).copied().unwrap_or(0), items.len());
    }
    h
}

pub fn report_from_records(records: &[FaithfulnessRecord]) -> FaithfulnessReport {
    let n = records.len();
    let correct = records.iter().filter(|r| r.answer_correct).count();
    let faithful = records.iter().filter(|r| r.answer_correct && r.any_crop).count();
    let unfaithful = records
        .iter()
        .filter(|r| r.answer_correct && !r.any_crop && r.tool_count > 0)
        .count();
    let no_tool = records.iter().filter(|r| r.tool_count == 0).count();
    let counts: Vec<(usize, bool)> = records.iter().map(|r| (r.tool_count, r.answer_correct)).collect();
    FaithfulnessReport {
        examples: n,
        correct,
        accuracy: ratio(correct, n),
        conditional_faithful: ratio(faithful, correct),
        unconditional_faithful: ratio(faithful, n),
        unfaithful_rate: ratio(unfaithful, correct),
        no_tool_rate: ratio(no_tool, n),
        histogram: histogram_from_counts(&counts),
    }
}

/// Image artifacts of each code step that produced any.
pub fn crops_by_step(traj: &Trajectory) -> Vec<(usize, Vec<String>)> {
    traj.code_steps()
        .into_iter()
        .filter_map(|s| {
            let imgs: Vec<String> = traj
                .observation(s)?
                .artifacts
                .iter()
                .filter(|a| MediaKind::from_path(a) == MediaKind::Image)
                .cloned()
                .collect();
            (!imgs.is_empty()).then_some((s, imgs))
        })
        .collect()
}

pub fn tool_use_histogram(rollouts: &[Trajectory], answers: &AnswerMap) -> Result<Histogram, FaithfulnessError> {
    let items = rollouts
        .iter()
        .map(|t| Ok((crops_by_step(t).len(), answers.correct(t.task_id())?)))
        .collect::<Result<Vec<_>, FaithfulnessError>>()?;
    Ok(histogram_from_counts(&items))
}

/// Judges every crop of one rollout. Crops are keyed by their artifact
/// reference; unreadable crops get verdict 0 and are logged.
pub fn evaluate_record(
    traj: &Trajectory,
    answers: &AnswerMap,
    judge: &dyn Judge,
    artifacts: &dyn ArtifactSource,
) -> Result<FaithfulnessRecord, FaithfulnessError> {
    let answer_correct = answers.correct(traj.task_id())?;
    let steps = crops_by_step(traj);
    let mut crops = Vec::new();
    let mut unreadable = Vec::new();
    for (_, imgs) in &steps {
        for a in imgs {
            let verdict = match artifacts.path(a) {
                None => Err(JudgeError::UnreadableImage {
                    path: a.into(),
                    reason: "artifact not found".into(),
                }),
                Some(p) => judge_crop_relevance(judge, traj.question(), &p, traj.task_id(), a),
            };
            let v = match verdict {
                Ok(v) => v,
                Err(JudgeError::UnreadableImage { path, reason }) => {
                    tracing::warn!(example = traj.task_id(), crop = %path.display(), %reason, "unreadable crop counted as failing");
                    unreadable.push(a.clone());
                    0
                }
                Err(e) => return Err(e.into()),
            };
            crops.push(CropVerdict {
                crop_id: a.clone(),
                verdict: v,
            });
        }
    }
    let mut rec = FaithfulnessRecord::new(traj.task_id(), crops, answer_correct, steps.len());
    rec.unreadable = unreadable;
    Ok(rec)
}

pub fn evaluate_faithfulness(
    rollouts: &[Trajectory],
    answers: &AnswerMap,
    judge: &dyn Judge,
    artifacts: &dyn ArtifactSource,
) -> Result<(Vec<FaithfulnessRecord>, FaithfulnessReport), FaithfulnessError> {
    let records = rollouts
        .par_iter()
        .map(|t| evaluate_record(t, answers, judge, artifacts))
        .collect::<Result<Vec<_>, _>>()?;
    let report = report_from_records(&records);
    Ok((records, report))
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bucket,count,fraction_total,fraction_correct\n");
    for b in BUCKETS {
        let v = h.get(b).copied().unwrap_or_default();
        out.push_str(&format!("{b},{},{},{}\n", v.count, v.fraction_total, v.fraction_correct));
    }
    out
}
