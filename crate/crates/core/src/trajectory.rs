//! Trajectory data model for code-based agentic rollouts.
//!
//! A trajectory interleaves `<think>`, `<code>` and `<answer>` actions with
//! `<sandbox_output>` observations. Transcripts are parsed whole by a
//! single-pass tokenizer over the literal tag vocabulary; `<code>` may nest
//! inside `<think>`, nothing else nests.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on model turns per trajectory.
pub const DEFAULT_MAX_TURNS: usize = 6;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const CODE_OPEN: &str = "<code>";
const CODE_CLOSE: &str = "</code>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const OUTPUT_OPEN: &str = "<sandbox_output>";
const OUTPUT_CLOSE: &str = "</sandbox_output>";

pub const ALL_TAGS: [&str; 8] = [
    THINK_OPEN,
    THINK_CLOSE,
    CODE_OPEN,
    CODE_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    OUTPUT_OPEN,
    OUTPUT_CLOSE,
];

/// Defuses reserved tags inside payload text (`<think>` becomes `&lt;think>`).
pub fn escape_tags(text: &str) -> String {
    let mut out = text.to_string();
    for t in ALL_TAGS {
        if out.contains(t) {
            out = out.replace(t, &format!("&lt;{}", &t[1..]));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Think,
    Code,
    Answer,
}

/// One policy action. `nested` records whether a code block sat inside a
/// think span; it is always true for thoughts and false for answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Action {
    pub kind: ActionKind,
    pub text: String,
    pub turn_index: usize,
    pub nested: bool,
}

impl Action {
    pub fn think(text: impl Into<String>) -> Self {
        Self {
            kind: ActionKind::Think,
            text: text.into().trim().to_string(),
            turn_index: 0,
            nested: true,
        }
    }

    /// A code block inside the current think span.
    pub fn code(src: impl AsRef<str>) -> Self {
        Self {
            kind: ActionKind::Code,
            text: canonical_code(src.as_ref()),
            turn_index: 0,
            nested: true,
        }
    }

    /// A code block emitted outside any think span.
    pub fn code_top_level(src: impl AsRef<str>) -> Self {
        Self {
            nested: false,
            ..Self::code(src)
        }
    }

    pub fn answer(text: impl Into<String>) -> Self {
        Self {
            kind: ActionKind::Answer,
            text: text.into().trim().to_string(),
            turn_index: 0,
            nested: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    Timeout,
    SafetyBlocked,
    RuntimeError,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Timeout => "Timeout",
            ErrorKind::SafetyBlocked => "SafetyBlocked",
            ErrorKind::RuntimeError => "RuntimeError",
        };
        f.write_str(s)
    }
}

impl ErrorKind {
    fn from_name(name: &str) -> Option<Self> {
        match name {
            "Timeout" => Some(ErrorKind::Timeout),
            "SafetyBlocked" => Some(ErrorKind::SafetyBlocked),
            "RuntimeError" => Some(ErrorKind::RuntimeError),
            _ => None,
        }
    }
}

/// Sandbox feedback attached to a code action.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub step_index: usize,
    pub stdout: String,
    pub stderr: String,
    /// Artifact references, relative to the sandbox root.
    pub artifacts: Vec<String>,
    pub error_kind: Option<ErrorKind>,
}

impl Observation {
    /// Text placed between `<sandbox_output>` tags: stdout, an error or
    /// stderr marker followed by stderr, then one `[artifact: path]` line
    /// per artifact.
    pub fn render(&self) -> String {
        let mut out = self.stdout.clone();
        match self.error_kind {
            Some(kind) => {
                out.push_str(&format!("[error: {kind}]"));
                out.push_str(&self.stderr);
            }
            None if !self.stderr.is_empty() => {
                out.push_str("[stderr]");
                out.push_str(&self.stderr);
            }
            None => {}
        }
        for artifact in &self.artifacts {
            out.push_str(&format!("\n[artifact: {artifact}]"));
        }
        out
    }

    /// Inverse of [`Observation::render`]. Unmarked text is all stdout.
    pub fn parse_rendered(step_index: usize, body: &str) -> Self {
        let mut rest = body;
        let mut artifacts = Vec::new();
        while let Some(stripped) = rest.strip_suffix(']') {
            let Some(pos) = stripped.rfind("\n[artifact: ") else {
                break;
            };
            let path = &stripped[pos + "\n[artifact: ".len()..];
            if path.contains('\n') || path.contains(']') {
                break;
            }
            artifacts.push(path.to_string());
            rest = &stripped[..pos];
        }
        artifacts.reverse();

        let error_marker = find_error_marker(rest);
        let stderr_marker = rest.rfind("[stderr]").map(|p| (p, "[stderr]".len(), None));
        let marker = match (error_marker, stderr_marker) {
            (Some(e), Some(s)) => Some(if e.0 >= s.0 { e } else { s }),
            (e, s) => e.or(s),
        };
        let (stdout, stderr, error_kind) = match marker {
            Some((pos, len, kind)) => (&rest[..pos], &rest[pos + len..], kind),
            None => (rest, "", None),
        };
        Self {
            step_index,
            stdout: stdout.to_string(),
            stderr: stderr.to_string(),
            artifacts,
            error_kind,
        }
    }
}

fn find_error_marker(text: &str) -> Option<(usize, usize, Option<ErrorKind>)> {
    let mut search_end = text.len();
    while let Some(pos) = text[..search_end].rfind("[error: ") {
        let after = &text[pos + "[error: ".len()..];
        if let Some(close) = after.find(']') {
            if let Some(kind) = ErrorKind::from_name(&after[..close]) {
                return Some((pos, "[error: ".len() + close + 1, Some(kind)));
            }
        }
        search_end = pos;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Terminal {
    Answered,
    TurnLimit,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FormatViolation {
    MissingThink,
    MissingAnswer,
    UnclosedTag,
    CodeOutsideThink,
    StrayText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub well_formed: bool,
    pub violations: Vec<FormatViolation>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("tag {0} opened but never closed")]
    UnclosedTag(&'static str),
    #[error("sandbox output at byte {0} has no preceding code action")]
    OrphanObservation(usize),
    #[error("tag {tag} is not allowed inside {inside}")]
    InvalidNesting { tag: &'static str, inside: &'static str },
    #[error("code block at byte {0} is empty")]
    EmptyCode(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("code action {0} has an empty payload")]
    EmptyCode(usize),
    #[error("answer action {0} is not the final action")]
    AnswerNotFinal(usize),
    #[error("observation keyed {0} does not belong to a code action")]
    ObservationWithoutCode(usize),
    #[error("observation keyed {key} carries step index {step}")]
    ObservationIndexMismatch { key: usize, step: usize },
    #[error("terminal {terminal:?} inconsistent with final action")]
    TerminalMismatch { terminal: Terminal },
    #[error("{turns} turns exceed the limit of {limit}")]
    TooManyTurns { turns: usize, limit: usize },
    #[error("action {0} payload contains a reserved tag")]
    TagInPayload(usize),
    #[error("think action {0} is empty")]
    EmptyThink(usize),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// Actions, observations and non-fatal format notes recovered from raw text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedTranscript {
    pub actions: Vec<Action>,
    pub observations: BTreeMap<usize, Observation>,
    pub notes: Vec<FormatViolation>,
}

/// One rollout for a single image-question task. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trajectory {
    task_id: String,
    image_ref: String,
    question: String,
    actions: Vec<Action>,
    observations: BTreeMap<usize, Observation>,
    terminal: Terminal,
    #[serde(skip)]
    format_notes: Vec<FormatViolation>,
}

impl Trajectory {
    /// Validates every structural invariant and assigns turn indices (a turn
    /// ends after each code action, where generation stops for execution).
    pub fn new(
        task_id: impl Into<String>,
        image_ref: impl Into<String>,
        question: impl Into<String>,
        mut actions: Vec<Action>,
        observations: BTreeMap<usize, Observation>,
        terminal: Terminal,
        max_turns: usize,
    ) -> Result<Self, TrajectoryError> {
        let mut turn = 0;
        for (i, action) in actions.iter_mut().enumerate() {
            if ALL_TAGS.iter().any(|t| action.text.contains(t)) {
                return Err(TrajectoryError::TagInPayload(i));
            }
            action.turn_index = turn;
            match action.kind {
                ActionKind::Code => {
                    if action.text.trim().is_empty() {
                        return Err(TrajectoryError::EmptyCode(i));
                    }
                    turn += 1;
                }
                ActionKind::Answer => {
                    action.nested = false;
                }
                ActionKind::Think => {
                    action.nested = true;
                    if action.text.trim().is_empty() {
                        return Err(TrajectoryError::EmptyThink(i));
                    }
                }
            }
        }
        let len = actions.len();
        if let Some(i) = actions
            .iter()
            .position(|a| a.kind == ActionKind::Answer)
            .filter(|&i| i + 1 != len)
        {
            return Err(TrajectoryError::AnswerNotFinal(i));
        }
        for (&key, obs) in &observations {
            if actions.get(key).map(|a| a.kind) != Some(ActionKind::Code) {
                return Err(TrajectoryError::ObservationWithoutCode(key));
            }
            if obs.step_index != key {
                return Err(TrajectoryError::ObservationIndexMismatch {
                    key,
                    step: obs.step_index,
                });
            }
        }
        let answered = actions.last().map(|a| a.kind) == Some(ActionKind::Answer);
        if answered != (terminal == Terminal::Answered) {
            return Err(TrajectoryError::TerminalMismatch { terminal });
        }
        let turns = turn_count(&actions);
        if turns > max_turns {
            return Err(TrajectoryError::TooManyTurns {
                turns,
                limit: max_turns,
            });
        }
        Ok(Self {
            task_id: task_id.into(),
            image_ref: image_ref.into(),
            question: question.into(),
            actions,
            observations,
            terminal,
            format_notes: Vec::new(),
        })
    }

    /// Builds a trajectory from a strictly parsed transcript. `unanswered`
    /// is the terminal used when the transcript holds no answer.
    pub fn from_transcript(
        task_id: impl Into<String>,
        image_ref: impl Into<String>,
        question: impl Into<String>,
        raw: &str,
        unanswered: Terminal,
        max_turns: usize,
    ) -> Result<Self, TrajectoryError> {
        let parsed = parse_transcript(raw)?;
        Self::from_parsed(task_id, image_ref, question, parsed, unanswered, max_turns)
    }

    pub fn from_parsed(
        task_id: impl Into<String>,
        image_ref: impl Into<String>,
        question: impl Into<String>,
        parsed: ParsedTranscript,
        unanswered: Terminal,
        max_turns: usize,
    ) -> Result<Self, TrajectoryError> {
        let terminal = if parsed.actions.last().map(|a| a.kind) == Some(ActionKind::Answer) {
            Terminal::Answered
        } else {
            unanswered
        };
        let mut traj = Self::new(
            task_id,
            image_ref,
            question,
            parsed.actions,
            parsed.observations,
            terminal,
            max_turns,
        )?;
        traj.format_notes = parsed.notes;
        Ok(traj)
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn image_ref(&self) -> &str {
        &self.image_ref
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn observations(&self) -> &BTreeMap<usize, Observation> {
        &self.observations
    }

    pub fn observation(&self, step_index: usize) -> Option<&Observation> {
        self.observations.get(&step_index)
    }

    pub fn terminal(&self) -> Terminal {
        self.terminal
    }

    pub fn format_notes(&self) -> &[FormatViolation] {
        &self.format_notes
    }

    /// Indices of code actions, i.e. the tool steps.
    pub fn code_steps(&self) -> Vec<usize> {
        self.actions
            .iter()
            .enumerate()
            .filter(|(_, a)| a.kind == ActionKind::Code)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn answer(&self) -> Option<&str> {
        self.actions
            .last()
            .filter(|a| a.kind == ActionKind::Answer)
            .map(|a| a.text.as_str())
    }

    pub fn turns(&self) -> usize {
        turn_count(&self.actions)
    }

    /// Total characters of policy-generated text.
    pub fn response_len(&self) -> usize {
        self.actions.iter().map(|a| a.text.chars().count()).sum()
    }
}

fn turn_count(actions: &[Action]) -> usize {
    if actions.is_empty() {
        return 0;
    }
    let codes = actions.iter().filter(|a| a.kind == ActionKind::Code).count();
    if actions.last().map(|a| a.kind) == Some(ActionKind::Code) {
        codes
    } else {
        codes + 1
    }
}

/// Leading blank lines and trailing whitespace are not part of a code payload.
fn canonical_code(src: &str) -> String {
    src.trim_start_matches(['\n', '\r']).trim_end().to_string()
}

/// Removes a surrounding markdown fence (```python ... ```) if present.
fn strip_fence(content: &str) -> &str {
    let trimmed = content.trim_start_matches(['\n', '\r', ' ', '\t']).trim_end();
    let Some(after_open) = trimmed.strip_prefix("```") else {
        return content;
    };
    let body = match after_open.find('\n') {
        Some(nl) => &after_open[nl + 1..],
        None => "",
    };
    body.strip_suffix("```").unwrap_or(body)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Strict,
    Lenient,
}

/// Parses a complete transcript. Unclosed tags and nesting violations are
/// errors; stray text is kept as a format note.
pub fn parse_transcript(raw: &str) -> Result<ParsedTranscript, ParseError> {
    parse(raw, Mode::Strict)
}

/// Like [`parse_transcript`] but auto-closes unterminated spans and records
/// them as [`FormatViolation::UnclosedTag`]. Used on live rollouts where a
/// policy may stop mid-span.
pub fn parse_transcript_lenient(raw: &str) -> Result<ParsedTranscript, ParseError> {
    parse(raw, Mode::Lenient)
}

fn next_tag(s: &str, from: usize) -> Option<(usize, &'static str)> {
    let hay = &s[from..];
    let mut best: Option<(usize, &'static str)> = None;
    let mut offset = 0;
    while let Some(p) = hay[offset..].find('<') {
        let at = offset + p;
        if let Some(tag) = ALL_TAGS.iter().find(|t| hay[at..].starts_with(**t)) {
            best = Some((from + at, tag));
            break;
        }
        offset = at + 1;
    }
    best
}

struct Parser<'a> {
    raw: &'a str,
    mode: Mode,
    out: ParsedTranscript,
}

impl<'a> Parser<'a> {
    fn note(&mut self, v: FormatViolation) {
        if !self.out.notes.contains(&v) {
            self.out.notes.push(v);
        }
    }

    fn unclosed(&mut self, tag: &'static str) -> Result<(), ParseError> {
        match self.mode {
            Mode::Strict => Err(ParseError::UnclosedTag(tag)),
            Mode::Lenient => {
                self.note(FormatViolation::UnclosedTag);
                Ok(())
            }
        }
    }

    fn push_think(&mut self, text: &str) {
        if !text.trim().is_empty() {
            self.out.actions.push(Action::think(text));
        }
    }

    /// Reads the body of a span up to `close`; returns (body, position after close).
    fn span(&mut self, start: usize, close: &'static str) -> Result<(&'a str, usize), ParseError> {
        match self.raw[start..].find(close) {
            Some(p) => Ok((&self.raw[start..start + p], start + p + close.len())),
            None => {
                let open = match close {
                    CODE_CLOSE => CODE_OPEN,
                    ANSWER_CLOSE => ANSWER_OPEN,
                    OUTPUT_CLOSE => OUTPUT_OPEN,
                    _ => THINK_OPEN,
                };
                self.unclosed(open)?;
                Ok((&self.raw[start..], self.raw.len()))
            }
        }
    }

    fn code(&mut self, at: usize, start: usize, nested: bool) -> Result<usize, ParseError> {
        let (body, next) = self.span(start, CODE_CLOSE)?;
        let src = canonical_code(strip_fence(body));
        if src.is_empty() {
            return Err(ParseError::EmptyCode(at));
        }
        self.out.actions.push(Action {
            kind: ActionKind::Code,
            text: src,
            turn_index: 0,
            nested,
        });
        Ok(next)
    }

    fn observation(&mut self, at: usize, start: usize) -> Result<usize, ParseError> {
        let (body, next) = self.span(start, OUTPUT_CLOSE)?;
        let idx = self.out.actions.len().checked_sub(1);
        match idx {
            Some(i)
                if self.out.actions[i].kind == ActionKind::Code
                    && !self.out.observations.contains_key(&i) =>
            {
                self.out
                    .observations
                    .insert(i, Observation::parse_rendered(i, body));
                Ok(next)
            }
            _ => Err(ParseError::OrphanObservation(at)),
        }
    }

    fn run(mut self) -> Result<ParsedTranscript, ParseError> {
        if self.raw.trim().is_empty() {
            return Err(ParseError::EmptyTranscript);
        }
        let raw = self.raw;
        let mut pos = 0;
        let mut in_think = false;
        let mut think_start = 0;
        loop {
            let Some((at, tag)) = next_tag(raw, pos) else {
                if in_think {
                    self.unclosed(THINK_OPEN)?;
                    self.push_think(&raw[think_start..]);
                } else if !raw[pos..].trim().is_empty() {
                    self.note(FormatViolation::StrayText);
                }
                break;
            };
            let after = at + tag.len();
            if in_think {
                let text = &raw[think_start..at];
                match tag {
                    THINK_CLOSE => {
                        self.push_think(text);
                        in_think = false;
                        pos = after;
                    }
                    CODE_OPEN => {
                        self.push_think(text);
                        pos = self.code(at, after, true)?;
                        think_start = pos;
                    }
                    OUTPUT_OPEN => {
                        self.push_think(text);
                        pos = self.observation(at, after)?;
                        think_start = pos;
                    }
                    THINK_OPEN | ANSWER_OPEN => {
                        if self.mode == Mode::Strict {
                            return Err(if tag == THINK_OPEN {
                                ParseError::InvalidNesting {
                                    tag: THINK_OPEN,
                                    inside: THINK_OPEN,
                                }
                            } else {
                                ParseError::UnclosedTag(THINK_OPEN)
                            });
                        }
                        self.note(FormatViolation::UnclosedTag);
                        self.push_think(text);
                        in_think = false;
                        pos = at;
                    }
                    _ => {
                        // stray closing tag inside a thought
                        self.note(FormatViolation::StrayText);
                        self.push_think(text);
                        pos = after;
                        think_start = pos;
                    }
                }
                continue;
            }
            if !raw[pos..at].trim().is_empty() {
                self.note(FormatViolation::StrayText);
            }
            match tag {
                THINK_OPEN => {
                    in_think = true;
                    think_start = after;
                    pos = after;
                }
                CODE_OPEN => pos = self.code(at, after, false)?,
                OUTPUT_OPEN => pos = self.observation(at, after)?,
                ANSWER_OPEN => {
                    let (body, next) = self.span(after, ANSWER_CLOSE)?;
                    self.out.actions.push(Action::answer(body));
                    // anything after the first closing answer tag is dropped
                    if !raw[next..].trim().is_empty() {
                        self.note(FormatViolation::StrayText);
                    }
                    break;
                }
                _ => {
                    self.note(FormatViolation::StrayText);
                    pos = after;
                }
            }
        }
        if self.out.actions.is_empty() {
            return Err(ParseError::EmptyTranscript);
        }
        Ok(self.out)
    }
}

fn parse(raw: &str, mode: Mode) -> Result<ParsedTranscript, ParseError> {
    Parser {
        raw,
        mode,
        out: ParsedTranscript::default(),
    }
    .run()
}

/// Canonical tagged text for a trajectory. Nested code blocks are emitted
/// inside the preceding think span, each followed by its sandbox output.
pub fn serialize_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    let mut open = false;
    for (i, action) in traj.actions.iter().enumerate() {
        match action.kind {
            ActionKind::Think => {
                if open {
                    out.push_str(THINK_CLOSE);
                }
                out.push_str(THINK_OPEN);
                out.push_str(&action.text);
                open = true;
            }
            ActionKind::Code => {
                if action.nested && !open {
                    out.push_str(THINK_OPEN);
                    open = true;
                } else if !action.nested && open {
                    out.push_str(THINK_CLOSE);
                    open = false;
                }
                out.push_str(CODE_OPEN);
                out.push_str("\n```python\n");
                out.push_str(&action.text);
                out.push_str("\n```\n");
                out.push_str(CODE_CLOSE);
                if let Some(obs) = traj.observations.get(&i) {
                    out.push_str(OUTPUT_OPEN);
                    out.push_str(&obs.render());
                    out.push_str(OUTPUT_CLOSE);
                }
            }
            ActionKind::Answer => {
                if open {
                    out.push_str(THINK_CLOSE);
                    open = false;
                }
                out.push_str(ANSWER_OPEN);
                out.push_str(&action.text);
                out.push_str(ANSWER_CLOSE);
            }
        }
    }
    if open {
        out.push_str(THINK_CLOSE);
    }
    out
}

/// Deterministic format check over a parsed trajectory.
pub fn validate_format(traj: &Trajectory) -> FormatReport {
    let mut violations: Vec<FormatViolation> = traj.format_notes.clone();
    if !traj.actions.iter().any(|a| a.kind == ActionKind::Think) {
        violations.push(FormatViolation::MissingThink);
    }
    if !traj.actions.iter().any(|a| a.kind == ActionKind::Answer) {
        violations.push(FormatViolation::MissingAnswer);
    }
    if traj
        .actions
        .iter()
        .any(|a| a.kind == ActionKind::Code && !a.nested)
    {
        violations.push(FormatViolation::CodeOutsideThink);
    }
    violations.sort();
    violations.dedup();
    FormatReport {
        well_formed: violations.is_empty(),
        violations,
    }
}

/// Optional wall-clock stamps; omitted by default so logs stay reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timestamps {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_unix_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix_ms: Option<u64>,
}

/// One line of the trajectory JSONL log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub image_ref: String,
    pub question: String,
    pub transcript: String,
    pub terminal: Terminal,
    #[serde(default)]
    pub timestamps: Timestamps,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            task_id: traj.task_id.clone(),
            image_ref: traj.image_ref.clone(),
            question: traj.question.clone(),
            transcript: serialize_trajectory(traj),
            terminal: traj.terminal,
            timestamps: Timestamps::default(),
        }
    }

    pub fn to_trajectory(&self, max_turns: usize) -> Result<Trajectory, TrajectoryError> {
        let parsed = parse_transcript_lenient(&self.transcript)?;
        let traj = Trajectory::from_parsed(
            self.task_id.clone(),
            self.image_ref.clone(),
            self.question.clone(),
            parsed,
            self.terminal,
            max_turns,
        )?;
        if traj.terminal != self.terminal {
            return Err(TrajectoryError::TerminalMismatch {
                terminal: self.terminal,
            });
        }
        Ok(traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(step: usize, stdout: &str, artifacts: &[&str]) -> Observation {
        Observation {
            step_index: step,
            stdout: stdout.into(),
            stderr: String::new(),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            error_kind: None,
        }
    }

    fn build(actions: Vec<Action>, observations: BTreeMap<usize, Observation>) -> Trajectory {
        let terminal = if actions.last().map(|a| a.kind) == Some(ActionKind::Answer) {
            Terminal::Answered
        } else {
            Terminal::TurnLimit
        };
        Trajectory::new("t", "img.png", "q", actions, observations, terminal, 6).unwrap()
    }

    #[test]
    fn minimal_transcript() {
        let t = Trajectory::from_transcript(
            "t",
            "i",
            "q",
            "<think>t</think><answer>A</answer>",
            Terminal::Aborted,
            6,
        )
        .unwrap();
        assert_eq!(t.actions().len(), 2);
        assert!(t.observations().is_empty());
        assert_eq!(t.terminal(), Terminal::Answered);
        assert_eq!(t.answer(), Some("A"));
    }

    #[test]
    fn unclosed_think_is_an_error() {
        let err = parse_transcript("<think>t<code>x=1</code>").unwrap_err();
        assert_eq!(err, ParseError::UnclosedTag("<think>"));
        let lenient = parse_transcript_lenient("<think>t<code>x=1</code>").unwrap();
        assert_eq!(lenient.actions.len(), 2);
        assert_eq!(lenient.notes, vec![FormatViolation::UnclosedTag]);
    }

    #[test]
    fn orphan_observation() {
        let err = parse_transcript("<think>a</think><sandbox_output>x</sandbox_output>").unwrap_err();
        assert!(matches!(err, ParseError::OrphanObservation(_)));
        assert_eq!(parse_transcript("  \n"), Err(ParseError::EmptyTranscript));
    }

    #[test]
    fn code_split_inside_think() {
        let raw = "<think>a<code>x=1</code><sandbox_output>1</sandbox_output>b<code>y=2</code>c</think><answer>z</answer>";
        let p = parse_transcript(raw).unwrap();
        let kinds: Vec<_> = p.actions.iter().map(|a| a.kind).collect();
        use ActionKind::*;
        assert_eq!(kinds, vec![Think, Code, Think, Code, Think, Answer]);
        assert_eq!(p.observations.keys().copied().collect::<Vec<_>>(), vec![1]);
        let t = Trajectory::from_parsed("t", "i", "q", p, Terminal::Aborted, 6).unwrap();
        let turns: Vec<_> = t.actions().iter().map(|a| a.turn_index).collect();
        assert_eq!(turns, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn fenced_code_is_unwrapped() {
        let raw = "<think>go<code>\n```python\nprint(1)\n```\n</code></think>";
        let p = parse_transcript(raw).unwrap();
        assert_eq!(p.actions[1].text, "print(1)");
    }

    #[test]
    fn format_violations() {
        let full = build(
            vec![Action::think("a"), Action::code("x=1"), Action::answer("b")],
            BTreeMap::new(),
        );
        assert!(validate_format(&full).well_formed);

        let no_answer = build(vec![Action::think("a"), Action::code("x=1")], BTreeMap::new());
        assert_eq!(
            validate_format(&no_answer).violations,
            vec![FormatViolation::MissingAnswer]
        );

        // rule: any code action whose `nested` flag is false sits outside a think span
        let outside = Trajectory::from_transcript(
            "t",
            "i",
            "q",
            "<think>a</think><code>x=1</code><answer>b</answer>",
            Terminal::Aborted,
            6,
        )
        .unwrap();
        assert_eq!(
            validate_format(&outside).violations,
            vec![FormatViolation::CodeOutsideThink]
        );
    }

    #[test]
    fn text_after_answer_is_truncated() {
        let p = parse_transcript("<think>a</think><answer>B</answer> trailing").unwrap();
        assert_eq!(p.actions.last().unwrap().text, "B");
        assert_eq!(p.notes, vec![FormatViolation::StrayText]);
    }

    #[test]
    fn nesting_rules() {
        assert!(matches!(
            parse_transcript("<think>a<think>b</think></think>"),
            Err(ParseError::InvalidNesting { .. })
        ));
        assert_eq!(
            parse_transcript("<think>a<answer>b</answer>"),
            Err(ParseError::UnclosedTag("<think>"))
        );
    }

    #[test]
    fn serialization_shapes() {
        let plain = build(vec![Action::think("a"), Action::answer("b")], BTreeMap::new());
        let text = serialize_trajectory(&plain);
        assert!(!text.contains("sandbox_output"));
        assert!(text.ends_with("</answer>"));

        let mut o = BTreeMap::new();
        o.insert(1, obs(1, "first", &[]));
        o.insert(3, obs(3, "second", &["s/out/a.png"]));
        let two = build(
            vec![
                Action::think("a"),
                Action::code("x=1"),
                Action::think("b"),
                Action::code("y=2"),
                Action::answer("c"),
            ],
            o,
        );
        let text = serialize_trajectory(&two);
        let first = text.find("first").unwrap();
        let second = text.find("second").unwrap();
        assert!(first < second);
        assert_eq!(text.matches(OUTPUT_OPEN).count(), 2);
        let back =
            Trajectory::from_transcript("t", "img.png", "q", &text, Terminal::Aborted, 6).unwrap();
        assert_eq!(back, two);
    }

    #[test]
    fn observation_render_round_trip() {
        let o = Observation {
            step_index: 2,
            stdout: "processed_1.jpg\n".into(),
            stderr: "Traceback: boom".into(),
            artifacts: vec!["s/artifacts/step1_processed_1.jpg".into()],
            error_kind: Some(ErrorKind::RuntimeError),
        };
        assert_eq!(Observation::parse_rendered(2, &o.render()), o);
        let warn = Observation {
            stderr: "warning".into(),
            error_kind: None,
            ..o.clone()
        };
        assert_eq!(Observation::parse_rendered(2, &warn.render()), warn);
        let bare = Observation::parse_rendered(0, "42");
        assert_eq!(bare.stdout, "42");
        assert!(bare.artifacts.is_empty());
    }

    #[test]
    fn invariant_violations_rejected() {
        let e = Trajectory::new(
            "t",
            "i",
            "q",
            vec![Action::answer("a"), Action::think("b")],
            BTreeMap::new(),
            Terminal::Aborted,
            6,
        )
        .unwrap_err();
        assert_eq!(e, TrajectoryError::AnswerNotFinal(0));

        let mut o = BTreeMap::new();
        o.insert(0, obs(0, "x", &[]));
        let e = Trajectory::new(
            "t",
            "i",
            "q",
            vec![Action::think("a")],
            o,
            Terminal::Aborted,
            6,
        )
        .unwrap_err();
        assert_eq!(e, TrajectoryError::ObservationWithoutCode(0));

        let e = Trajectory::new(
            "t",
            "i",
            "q",
            vec![Action::think("a")],
            BTreeMap::new(),
            Terminal::Answered,
            6,
        )
        .unwrap_err();
        assert!(matches!(e, TrajectoryError::TerminalMismatch { .. }));

        let many: Vec<_> = (0..7).map(|i| Action::code(format!("x={i}"))).collect();
        let e = Trajectory::new("t", "i", "q", many, BTreeMap::new(), Terminal::TurnLimit, 6)
            .unwrap_err();
        assert_eq!(e, TrajectoryError::TooManyTurns { turns: 7, limit: 6 });

        let e = Trajectory::new(
            "t",
            "i",
            "q",
            vec![Action::code("   ")],
            BTreeMap::new(),
            Terminal::Aborted,
            6,
        )
        .unwrap_err();
        assert_eq!(e, TrajectoryError::EmptyCode(0));
    }

    #[test]
    fn record_round_trip() {
        let mut o = BTreeMap::new();
        o.insert(1, obs(1, "ok\n", &["s/artifacts/step1_a.png"]));
        let t = build(
            vec![Action::think("a"), Action::code("x=1"), Action::answer("b")],
            o,
        );
        let rec = TrajectoryRecord::from_trajectory(&t);
        let line = serde_json::to_string(&rec).unwrap();
        let back: TrajectoryRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.to_trajectory(6).unwrap(), t);
    }
}
