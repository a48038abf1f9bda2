//! Hybrid trajectory reward: answer correctness, mean per-step tool score
//! with redline overrides, and a format term.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answer::closed_form_match;
use crate::judge::{judge_answer, score_tool_step, Judge, JudgeError};
use crate::sandbox::{infer_crop_boxes, MediaKind, ZERO_AREA_WARNING};
use crate::trajectory::{validate_format, ErrorKind, Terminal, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub lambda_acc: f64,
    pub lambda_tool: f64,
    /// Format reward for a well-formed trajectory.
    pub fmt_max: f64,
    pub redline_penalty: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_acc: 1.0,
            lambda_tool: 0.3,
            fmt_max: 0.3,
            redline_penalty: -0.5,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let all = [self.lambda_acc, self.lambda_tool, self.fmt_max, self.redline_penalty];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(RewardError::InvalidWeights("weights must be finite".into()));
        }
        if self.lambda_tool.abs() >= self.lambda_acc.abs() {
            return Err(RewardError::InvalidWeights(format!(
                "|lambda_tool| = {} must be below |lambda_acc| = {}",
                self.lambda_tool.abs(),
                self.lambda_acc.abs()
            )));
        }
        if self.fmt_max < 0.0 {
            return Err(RewardError::InvalidWeights("fmt_max must be non-negative".into()));
        }
        if self.redline_penalty >= 0.0 {
            return Err(RewardError::InvalidWeights("redline_penalty must be negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TaskKind {
    #[default]
    VisualSearch,
    NoSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RedlineKind {
    InvalidCoordinates,
    RepeatedNoOpCrop,
    ScratchpadMisuse,
    AvoidableSandboxError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Redline {
    pub kind: RedlineKind,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub step_index: usize,
    pub score: f64,
    pub redlines: Vec<RedlineKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_tool: f64,
    pub r_fmt: f64,
    pub total: f64,
    pub per_step_tool: Vec<StepReward>,
}

/// Read access to artifact bytes by reference.
pub trait ArtifactSource: Send + Sync {
    fn bytes(&self, artifact_ref: &str) -> Option<Vec<u8>>;
    /// Filesystem path of the artifact, for judges that read files.
    fn path(&self, artifact_ref: &str) -> Option<PathBuf>;
}

/// Artifacts stored under a sandbox root.
#[derive(Debug, Clone)]
pub struct FsArtifacts {
    pub root: PathBuf,
}

impl ArtifactSource for FsArtifacts {
    fn bytes(&self, artifact_ref: &str) -> Option<Vec<u8>> {
        std::fs::read(self.root.join(artifact_ref)).ok()
    }

    fn path(&self, artifact_ref: &str) -> Option<PathBuf> {
        let p = self.root.join(artifact_ref);
        p.is_file().then_some(p)
    }
}

/// In-memory artifacts, used by the toy environment's fast path.
#[derive(Debug, Clone, Default)]
pub struct MemArtifacts {
    pub files: HashMap<String, Vec<u8>>,
}

impl ArtifactSource for MemArtifacts {
    fn bytes(&self, artifact_ref: &str) -> Option<Vec<u8>> {
        self.files.get(artifact_ref).cloned()
    }

    fn path(&self, _artifact_ref: &str) -> Option<PathBuf> {
        None
    }
}

/// Rubric score in {0.25, 0.5, 1} for the image artifacts of one step.
pub trait ToolScorer: Send + Sync {
    fn score_step(
        &self,
        traj: &Trajectory,
        step_index: usize,
        images: &[String],
    ) -> Result<f64, JudgeError>;
}

/// Scores steps with a judge's tool rubric. Requests are keyed by
/// `(task_id, "step<index>")` so fixture judges can address them.
pub struct JudgeToolScorer<'a> {
    pub judge: &'a dyn Judge,
    pub artifacts: &'a dyn ArtifactSource,
}

impl ToolScorer for JudgeToolScorer<'_> {
    fn score_step(&self, traj: &Trajectory, step_index: usize, images: &[String]) -> Result<f64, JudgeError> {
        let paths = images
            .iter()
            .map(|r| {
                self.artifacts.path(r).ok_or_else(|| JudgeError::UnreadableImage {
                    path: PathBuf::from(r),
                    reason: "artifact not found".into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        score_tool_step(self.judge, traj.question(), &paths, traj.task_id(), &format!("step{step_index}"))
    }
}

fn image_artifacts(traj: &Trajectory, step_index: usize) -> Vec<String> {
    traj.observation(step_index)
        .map(|o| {
            o.artifacts
                .iter()
                .filter(|a| MediaKind::from_path(a) == MediaKind::Image)
                .cloned()
                .collect()
        })
        .unwrap_or_default()
}

pub fn answer_reward(traj: &Trajectory, gold: &str, judge: &dyn Judge) -> Result<f64, JudgeError> {
    if traj.terminal() != Terminal::Answered {
        return Ok(0.0);
    }
    let prediction = traj.answer().unwrap_or("");
    let correct = match closed_form_match(prediction, gold) {
        Some(c) => c,
        None => judge_answer(judge, traj.question(), gold, prediction)? == 1,
    };
    Ok(if correct { 1.0 } else { 0.0 })
}

struct RedlineRules {
    file_io: Regex,
    transform: Regex,
    avoidable: Regex,
}

fn redline_rules() -> &'static RedlineRules {
    static RULES: OnceLock<RedlineRules> = OnceLock::new();
    RULES.get_or_init(|| RedlineRules {
        file_io: Regex::new(
            r"\bopen\s*\(|\.save\s*\(|\bimwrite\s*\(|\bimread\s*\(|\bImage\s*\.\s*open\s*\(|\bnp\s*\.\s*(save|load)\w*\s*\(|\bjson\s*\.\s*(dump|load)\s*\(|\.write\s*\(",
        )
        .expect("static pattern"),
        transform: Regex::new(
            r"\.\s*(_sandbox_crop|crop|resize|rotate|transpose|filter|thumbnail|convert|point|paste|reduce)\s*\(|\bcv2\s*\.\s*(resize|cvtColor|rotate|flip|warpAffine|warpPerspective|GaussianBlur|blur|medianBlur|threshold|Canny|equalizeHist|convertScaleAbs|addWeighted|filter2D|dilate|erode)\s*\(|\b(ImageOps|ImageEnhance|ImageFilter|ImageDraw)\b|\[[^\]\n]*:[^\]\n]*\]|\bplt\s*\.",
        )
        .expect("static pattern"),
        avoidable: Regex::new(
            r"NameError: name '(image|image_path|img|np|Image|cv2)' is not defined|IndexError|tile cannot extend outside image|Coordinate '(right|lower)' is less than '(left|upper)'|!_?src\.empty\(\)|!ssize\.empty\(\)",
        )
        .expect("static pattern"),
    })
}

/// Stdout carries computation if some line is neither empty nor just the
/// name of a file the step produced.
fn prints_computation(stdout: &str, artifacts: &[String]) -> bool {
    stdout.lines().map(str::trim).filter(|l| !l.is_empty()).any(|line| {
        !artifacts.iter().any(|a| a == line || a.ends_with(&format!("_{line}")) || a.ends_with(&format!("/{line}")))
    })
}

/// Redlines per code step, sorted by step then kind.
pub fn detect_redlines(traj: &Trajectory, artifacts: &dyn ArtifactSource) -> Vec<Redline> {
    let rules = redline_rules();
    let mut out = Vec::new();
    let mut seen_crops: Vec<[u8; 32]> = Vec::new();
    for step in traj.code_steps() {
        let code = &traj.actions()[step].text;
        let obs = traj.observation(step);
        let mut push = |kind| out.push(Redline { kind, step_index: step });

        let zero_area = infer_crop_boxes(code).iter().any(|b| b.is_zero_area())
            || obs.is_some_and(|o| o.stderr.contains(ZERO_AREA_WARNING));
        if zero_area {
            push(RedlineKind::InvalidCoordinates);
        }

        let hashes: Vec<[u8; 32]> = image_artifacts(traj, step)
            .iter()
            .filter_map(|r| artifacts.bytes(r))
            .map(|b| Sha256::digest(&b).into())
            .collect();
        if hashes.iter().any(|h| seen_crops.contains(h)) {
            push(RedlineKind::RepeatedNoOpCrop);
        }
        seen_crops.extend(hashes);

        let code_only = crate::sandbox::lexer::code_view(code)
            .map(|(c, _)| c)
            .unwrap_or_else(|_| code.clone());
        if let Some(o) = obs {
            if o.error_kind.is_none()
                && rules.file_io.is_match(&code_only)
                && !rules.transform.is_match(&code_only)
                && !prints_computation(&o.stdout, &o.artifacts)
            {
                push(RedlineKind::ScratchpadMisuse);
            }
            if o.error_kind == Some(ErrorKind::RuntimeError) && rules.avoidable.is_match(&o.stderr) {
                push(RedlineKind::AvoidableSandboxError);
            }
        }
    }
    out.sort();
    out
}

/// Mean over code steps; 0 when there are none.
pub fn aggregate_tool_reward(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Score of one code step. Any redline overrides to the penalty; NoSearch
/// steps otherwise score 0, as do VisualSearch steps without image output.
pub fn tool_step_reward(
    traj: &Trajectory,
    step_index: usize,
    task_kind: TaskKind,
    redlines: &[RedlineKind],
    weights: &RewardWeights,
    scorer: &dyn ToolScorer,
) -> Result<f64, JudgeError> {
    if !redlines.is_empty() {
        return Ok(weights.redline_penalty);
    }
    if task_kind == TaskKind::NoSearch {
        return Ok(0.0);
    }
    let images = image_artifacts(traj, step_index);
    if images.is_empty() {
        return Ok(0.0);
    }
    scorer.score_step(traj, step_index, &images)
}

/// The scalar reward plus its decomposition:
/// `total = lambda_acc * r_acc + lambda_tool * r_tool + r_fmt`.
pub fn total_reward(
    traj: &Trajectory,
    gold: &str,
    task_kind: TaskKind,
    weights: &RewardWeights,
    judge: &dyn Judge,
    scorer: &dyn ToolScorer,
    artifacts: &dyn ArtifactSource,
) -> Result<RewardBreakdown, RewardError> {
    weights.validate()?;
    let r_acc = answer_reward(traj, gold, judge)?;
    let mut by_step: BTreeMap<usize, Vec<RedlineKind>> = BTreeMap::new();
    for r in detect_redlines(traj, artifacts) {
        by_step.entry(r.step_index).or_default().push(r.kind);
    }
    let mut per_step_tool = Vec::new();
    for step in traj.code_steps() {
        let redlines = by_step.remove(&step).unwrap_or_default();
        let score = tool_step_reward(traj, step, task_kind, &redlines, weights, scorer)?;
        per_step_tool.push(StepReward {
            step_index: step,
            score,
            redlines,
        });
    }
    let scores: Vec<f64> = per_step_tool.iter().map(|s| s.score).collect();
    let r_tool = aggregate_tool_reward(&scores);
    let r_fmt = if validate_format(traj).well_formed {
        weights.fmt_max
    } else {
        0.0
    };
    let total = weights.lambda_acc * r_acc + weights.lambda_tool * r_tool + r_fmt;
    Ok(RewardBreakdown {
        r_acc,
        r_tool,
        r_fmt,
        total,
        per_step_tool,
    })
}

/// Dataset source tag to task kind; unknown sources are VisualSearch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskKindMap(pub BTreeMap<String, TaskKind>);

impl TaskKindMap {
    pub fn kind_of(&self, source: &str) -> TaskKind {
        self.0.get(source).copied().unwrap_or_default()
    }
}
