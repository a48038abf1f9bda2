//! Training-data filters: source blacklist, empirical difficulty and label
//! noise, plus per-stage counts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer::{closed_form_match, normalize_answer};
use crate::judge::{Judge, JudgeError, JudgeRequest, PromptId, EXTRA_CROP_ID, EXTRA_EXAMPLE_ID, EXTRA_GOLD};
use crate::reward::TaskKind;

pub const FLAG_SAMPLER_FAILURE: &str = "sampler_failure";
pub const FLAG_LABEL_NOISE: &str = "label_noise";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub record_id: String,
    pub source: String,
    pub image_ref: String,
    pub question: String,
    pub gold_answer: String,
    #[serde(default)]
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl DatasetRecord {
    pub fn new(record_id: &str, source: &str, question: &str, gold: &str) -> Self {
        Self {
            record_id: record_id.into(),
            source: source.into(),
            image_ref: format!("{record_id}.jpg"),
            question: question.into(),
            gold_answer: gold.into(),
            task_kind: TaskKind::VisualSearch,
            empirical_accuracy: None,
            flags: Vec::new(),
        }
    }

    fn flag(&mut self, f: &str) {
        if !self.flags.iter().any(|x| x == f) {
            self.flags.push(f.to_string());
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("record {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("threshold must lie in [0, 1], got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>, CurationError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(&line).map_err(|e| CurationError::BadRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        if r.source.trim().is_empty() {
            return Err(CurationError::BadRecord {
                line: i + 1,
                message: "empty source".into(),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> std::io::Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    std::fs::write(path, s)
}

/// Blacklist file: one source tag per line; `#` starts a comment.
pub fn read_blacklist(path: &Path) -> std::io::Result<BTreeSet<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Drops records whose source is blacklisted (case-insensitive), keeping order.
pub fn filter_external_knowledge(records: &[DatasetRecord], blacklist: &BTreeSet<String>) -> Vec<DatasetRecord> {
    let deny: BTreeSet<String> = blacklist.iter().map(|s| s.trim().to_lowercase()).collect();
    records
        .iter()
        .filter(|r| !deny.contains(&r.source.trim().to_lowercase()))
        .cloned()
        .collect()
}

#[derive(Debug, thiserror::Error)]
#[error("sampler failed: {0}")]
pub struct SamplerError(pub String);

/// Answers a record `n` times and reports per-attempt correctness.
pub trait DifficultySampler: Send + Sync {
    fn sample(&self, record: &DatasetRecord, n: usize) -> Result<Vec<bool>, SamplerError>;
}

/// Precomputed correctness bits per record id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSampler {
    pub bits: BTreeMap<String, Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleLine {
    record_id: String,
    correct: Vec<bool>,
}

impl FixtureSampler {
    /// JSON lines of `{"record_id": ..., "correct": [bool, ...]}`.
    pub fn from_jsonl(path: &Path) -> Result<Self, CurationError> {
        let text = std::fs::read_to_string(path)?;
        let mut bits = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let s: SampleLine = serde_json::from_str(line).map_err(|e| CurationError::BadRecord {
                line: i + 1,
                message: e.to_string(),
            })?;
            bits.insert(s.record_id, s.correct);
        }
        Ok(Self { bits })
    }
}

impl DifficultySampler for FixtureSampler {
    fn sample(&self, record: &DatasetRecord, n: usize) -> Result<Vec<bool>, SamplerError> {
        let b = self
            .bits
            .get(&record.record_id)
            .ok_or_else(|| SamplerError(format!("no samples for {}", record.record_id)))?;
        if b.len() < n {
            return Err(SamplerError(format!("{} has {} samples, {n} needed", record.record_id, b.len())));
        }
        Ok(b[..n].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifficultyConfig {
    pub n_samples: usize,
    /// Records with empirical accuracy above this are discarded.
    pub threshold: f64,
    /// Sampler attempts per record before it is kept and flagged.
    pub attempts: usize,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            n_samples: 8,
            threshold: 0.9,
            attempts: 2,
        }
    }
}

/// Keeps records with empirical accuracy at most `threshold`. Records that
/// already carry an accuracy are not resampled. Sampler failures keep the
/// record and flag it.
pub fn empirical_difficulty_filter(
    records: &[DatasetRecord],
    sampler: &dyn DifficultySampler,
    cfg: &DifficultyConfig,
) -> Result<Vec<DatasetRecord>, CurationError> {
    if cfg.n_samples == 0 {
        return Err(CurationError::NoSamples);
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(CurationError::BadThreshold(cfg.threshold));
    }
    let scored: Vec<DatasetRecord> = records
        .par_iter()
        .map(|r| {
            let mut r = r.clone();
            if r.empirical_accuracy.is_some() {
                return r;
            }
            let mut last = None;
            for _ in 0..cfg.attempts.max(1) {
                match sampler.sample(&r, cfg.n_samples) {
                    Ok(bits) => {
                        let hits = bits.iter().filter(|b| **b).count();
                        r.empirical_accuracy = Some(hits as f64 / bits.len() as f64);
                        last = None;
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            if let Some(e) = last {
                tracing::warn!(record = %r.record_id, error = %e, "difficulty sampling failed; keeping record");
                r.flag(FLAG_SAMPLER_FAILURE);
            }
            r
        })
        .collect();
    Ok(scored
        .into_iter()
        .filter(|r| r.empirical_accuracy.is_none_or(|a| a <= cfg.threshold))
        .collect())
}

/// Decides whether a record's gold label is plausible.
pub trait LabelChecker: Send + Sync {
    fn plausible(&self, record: &DatasetRecord) -> Result<bool, JudgeError>;
}

/// Checker with a fixed answer per record id; records without one pass.
#[derive(Debug, Clone, Default)]
pub struct MockLabelChecker {
    pub asserted: BTreeMap<String, String>,
}

impl LabelChecker for MockLabelChecker {
    fn plausible(&self, record: &DatasetRecord) -> Result<bool, JudgeError> {
        Ok(match self.asserted.get(&record.record_id) {
            None => true,
            Some(a) => closed_form_match(&record.gold_answer, a)
                .unwrap_or_else(|| normalize_answer(&record.gold_answer) == normalize_answer(a)),
        })
    }
}

/// Asks a judge with the label-check prompt, attaching the record image
/// from `image_root` when it exists.
pub struct JudgeLabelChecker<'a> {
    pub judge: &'a dyn Judge,
    pub image_root: Option<PathBuf>,
}

impl LabelChecker for JudgeLabelChecker<'_> {
    fn plausible(&self, record: &DatasetRecord) -> Result<bool, JudgeError> {
        let mut req = JudgeRequest::new(PromptId::LabelCheck, &record.question)
            .with(EXTRA_GOLD, &record.gold_answer)
            .with(EXTRA_EXAMPLE_ID, &record.record_id)
            .with(EXTRA_CROP_ID, "label");
        if let Some(root) = &self.image_root {
            let p = root.join(&record.image_ref);
            if p.is_file() {
                req = req.image(p);
            }
        }
        Ok(self.judge.judge(&req)?.score == 1.0)
    }
}

/// Splits records into (clean, flagged), preserving order. Flagged records
/// are marked for manual review.
pub fn label_noise_check(
    records: &[DatasetRecord],
    checker: &dyn LabelChecker,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>), CurationError> {
    let verdicts = records
        .par_iter()
        .map(|r| checker.plausible(r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut clean = Vec::new();
    let mut flagged = Vec::new();
    for (r, ok) in records.iter().zip(verdicts) {
        if ok {
            clean.push(r.clone());
        } else {
            let mut r = r.clone();
            r.flag(FLAG_LABEL_NOISE);
            flagged.push(r);
        }
    }
    Ok((clean, flagged))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub input: usize,
    pub output: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stages: Vec<StageCount>,
    /// Records per source after the last stage.
    pub by_source: BTreeMap<String, usize>,
}

impl StageReport {
    pub fn push(&mut self, stage: &str, input: usize, output: &[DatasetRecord], flagged: usize) {
        self.stages.push(StageCount {
            stage: stage.into(),
            input,
            output: output.len(),
            flagged,
        });
        self.by_source.clear();
        for r in output {
            *self.by_source.entry(r.source.clone()).or_default() += 1;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,input,output,flagged\n");
        for c in &self.stages {
            s.push_str(&format!("{},{},{},{}\n", c.stage, c.input, c.output, c.flagged));
        }
        s
    }
}

pub struct CurationOutput {
    pub kept: Vec<DatasetRecord>,
    pub flagged: Vec<DatasetRecord>,
    pub report: StageReport,
}

/// Blacklist, then difficulty, then label noise.
pub fn curate(
    records: &[DatasetRecord],
    blacklist: &BTreeSet<String>,
    sampler: &dyn DifficultySampler,
    difficulty: &DifficultyConfig,
    checker: &dyn LabelChecker,
) -> Result<CurationOutput, CurationError> {
    let mut report = StageReport::default();
    let a = filter_external_knowledge(records, blacklist);
    report.push("external_knowledge", records.len(), &a, 0);
    let b = empirical_difficulty_filter(&a, sampler, difficulty)?;
    let sampler_flags = b.iter().filter(|r| r.flags.iter().any(|f| f == FLAG_SAMPLER_FAILURE)).count();
    report.push("difficulty", a.len(), &b, sampler_flags);
    let (kept, flagged) = label_noise_check(&b, checker)?;
    report.push("label_noise", b.len(), &kept, flagged.len());
    Ok(CurationOutput { kept, flagged, report })
}
