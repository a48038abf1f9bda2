//! Interactive loop between a policy and the sandbox: the policy emits text
//! up to a closing `</code>` or `</answer>`, completed code blocks run in the
//! sandbox, and the rendered observation is appended before the next turn.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::http;
use crate::sandbox::{ExecutionLimits, MediaKind, Sandbox, SandboxError, SandboxResult, SandboxSession};
use crate::tapo::{Decision, TabularPolicy};
use crate::toy::{self, ToyAction, ToyLayout, ToyState, ToyTask, TOY_MAX_TURNS};
use crate::trajectory::{
    escape_tags, parse_transcript_lenient, ActionKind, Observation, Terminal, Trajectory, TrajectoryError,
    DEFAULT_MAX_TURNS,
};

pub const SYSTEM_PROMPT: &str = "You are a helpful assistant.

**Goal**:
    - Answer the user's question based on the provided image and question.
    - You can optionally generate and execute Python code to help analyze or process the image before answering.

**Python execution rules**:
    - The Python code will be executed by an external sandbox, and its output will be returned to you in the format <sandbox_output>...</sandbox_output>.
    - Use sandbox output to decide whether to answer the question or run another round of Python code.
    - For image operations, load the image and then process it (crop, resize, rotate, adjust contrast).
    - Save any processed images and print the saved filename.
    - For calculation, define all variables and print output.
    - Python code must be wrapped in the following block:
<code>
``` python
# your python code here
```
</code>";

pub const USER_PROMPT: &str = "Image: {image}
Question: {question}

### User Image Path:** \"{file_path}\"
### User Image Size:** \"{image_x}x{image_y}\"
### **Output Format (strict adherence required):**

<think>Your detailed reasoning process, including any <code> </code>, should go here.</think>
<answer>Answer to the user's question.</answer>";

pub const STOP_SEQUENCES: [&str; 2] = ["</code>", "</answer>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutTask {
    pub task_id: String,
    pub image_path: PathBuf,
    /// File name the policy is told about.
    pub declared_name: String,
    pub question: String,
    pub image_size: (u32, u32),
}

impl RolloutTask {
    pub fn from_image(task_id: &str, image_path: &Path, question: &str) -> Result<Self, RolloutError> {
        let image_size =
            image::image_dimensions(image_path).map_err(|e| RolloutError::Image(format!("{image_path:?}: {e}")))?;
        let declared_name = image_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image.png".into());
        Ok(Self {
            task_id: task_id.into(),
            image_path: image_path.into(),
            declared_name,
            question: question.into(),
            image_size,
        })
    }

    /// System and user text of the opening prompt.
    pub fn render_prompt(&self) -> (String, String) {
        let user = USER_PROMPT
            .replace("{image}", &self.declared_name)
            .replace("{question}", &self.question)
            .replace("{file_path}", &self.declared_name)
            .replace("{image_x}", &self.image_size.0.to_string())
            .replace("{image_y}", &self.image_size.1.to_string());
        (SYSTEM_PROMPT.to_string(), user)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Toy,
    Scripted,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy unavailable: {0}")]
    Unavailable(String),
    #[error("policy protocol error: {0}")]
    Protocol(String),
}

/// Result of one executed code block as the policy sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFeedback {
    /// Action index of the code block.
    pub step_index: usize,
    pub observation: Observation,
    /// Absolute paths of the image artifacts.
    pub images: Vec<PathBuf>,
}

/// What the policy sees before producing its next chunk: every earlier
/// chunk and the feedback for each executed code block, in order.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub task: &'a RolloutTask,
    pub chunks: &'a [String],
    pub feedback: &'a [StepFeedback],
    pub temperature: f64,
}

/// Per-rollout generation state.
pub trait PolicyRun: Send {
    /// Next chunk of policy text, ending at a stop sequence when one was
    /// reached. An empty chunk ends the rollout.
    fn generate(&mut self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError>;

    /// Tabular decisions taken so far; only toy runs record them.
    fn decisions(&self) -> Option<Vec<Decision>> {
        None
    }
}

pub trait Policy: Send + Sync {
    fn kind(&self) -> PolicyKind;
    /// Starts rollout number `k` of `task`.
    fn begin(&self, task: &RolloutTask, k: usize) -> Result<Box<dyn PolicyRun>, PolicyError>;
}

/// Cuts text after the first stop sequence, keeping the stop sequence.
pub fn truncate_at_stop(text: &str) -> &str {
    let cut = STOP_SEQUENCES
        .iter()
        .filter_map(|s| text.find(s).map(|i| i + s.len()))
        .min();
    match cut {
        Some(i) => &text[..i],
        None => text,
    }
}

/// Replays the policy-written parts of a transcript: sandbox output blocks
/// are dropped and the rest is split after each stop sequence.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    chunks: Vec<String>,
}

impl ScriptedPolicy {
    pub fn from_transcript(raw: &str) -> Self {
        let mut text = String::new();
        let mut rest = raw;
        while let Some(i) = rest.find("<sandbox_output>") {
            text.push_str(&rest[..i]);
            match rest[i..].find("</sandbox_output>") {
                Some(j) => rest = &rest[i + j + "</sandbox_output>".len()..],
                None => {
                    rest = "";
                }
            }
        }
        text.push_str(rest);
        let mut chunks = Vec::new();
        let mut rest = text.as_str();
        while !rest.is_empty() {
            let chunk = truncate_at_stop(rest);
            chunks.push(chunk.to_string());
            rest = &rest[chunk.len()..];
            if chunk.ends_with("</answer>") {
                break;
            }
        }
        Self { chunks }
    }

    pub fn chunks(&self) -> &[String] {
        &self.chunks
    }
}

struct ScriptedRun {
    chunks: Arc<Vec<String>>,
    next: usize,
}

impl PolicyRun for ScriptedRun {
    fn generate(&mut self, _ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let c = self.chunks.get(self.next).cloned().unwrap_or_default();
        self.next += 1;
        Ok(c)
    }
}

impl Policy for ScriptedPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Scripted
    }

    fn begin(&self, _task: &RolloutTask, _k: usize) -> Result<Box<dyn PolicyRun>, PolicyError> {
        Ok(Box::new(ScriptedRun {
            chunks: Arc::new(self.chunks.clone()),
            next: 0,
        }))
    }
}

/// Tabular toy policy acting through the real sandbox. It reads the color
/// from the crop images the sandbox produced, and samples with the same
/// per-rollout seeds as the in-process fast path.
pub struct ToyPolicy {
    pub policy: TabularPolicy,
    pub task: ToyTask,
    /// Rollout `k` samples from `ChaCha8(derive_seed([seed, k]))`.
    pub seed: u64,
}

struct ToyRun {
    policy: TabularPolicy,
    task: ToyTask,
    layout: ToyLayout,
    rng: ChaCha8Rng,
    state: ToyState,
    crops: usize,
    seen_feedback: usize,
    think_open: bool,
    decisions: Vec<Decision>,
}

impl PolicyRun for ToyRun {
    fn generate(&mut self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        for fb in &ctx.feedback[self.seen_feedback..] {
            let revealed = fb
                .images
                .first()
                .and_then(|p| image::open(p).ok())
                .and_then(|img| toy::perceive_crop(&img.to_rgb8()));
            self.state = self.layout.after_crop(&self.state, revealed);
        }
        self.seen_feedback = ctx.feedback.len();
        if self.crops >= TOY_MAX_TURNS {
            return Ok(String::new());
        }
        let s = self.layout.state_index(&self.state);
        let a = self.policy.sample(s, &mut self.rng);
        self.decisions.push(Decision { state: s, action: a });
        let action = self.layout.action(a);
        let mut out = String::new();
        if self.think_open {
            out.push_str("</think>\n");
        }
        out.push_str(&format!("<think>{}", toy::think_text(&action)));
        match action.crop_box(&self.task) {
            Some(b) => {
                self.crops += 1;
                out.push_str(&format!(
                    "\n<code>\n```python\n{}\n```\n</code>",
                    toy::crop_program(&b, self.crops)
                ));
                self.think_open = true;
            }
            None => {
                let ToyAction::Answer(color) = action else { unreachable!() };
                out.push_str(&format!("</think>\n<answer>{}</answer>", toy::answer_text(color)));
                self.think_open = false;
            }
        }
        Ok(out)
    }

    fn decisions(&self) -> Option<Vec<Decision>> {
        Some(self.decisions.clone())
    }
}

impl Policy for ToyPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Toy
    }

    fn begin(&self, _task: &RolloutTask, k: usize) -> Result<Box<dyn PolicyRun>, PolicyError> {
        let layout = ToyLayout { grid_size: self.task.grid_size };
        Ok(Box::new(ToyRun {
            policy: self.policy.clone(),
            task: self.task.clone(),
            layout,
            rng: ChaCha8Rng::seed_from_u64(toy::derive_seed(&[self.seed, k as u64])),
            state: layout.initial_state(&self.task),
            crops: 0,
            seen_feedback: 0,
            think_open: false,
            decisions: Vec::new(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalPolicyConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: Option<String>,
    pub max_tokens: usize,
    pub timeout_secs: u64,
    pub attempts: usize,
    pub backoff_ms: u64,
}

impl Default for ExternalPolicyConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_name: String::new(),
            api_key_env: None,
            max_tokens: 2048,
            timeout_secs: 120,
            attempts: 3,
            backoff_ms: 500,
        }
    }
}

/// Policy served by an OpenAI-compatible chat-completions endpoint. The
/// input image and every image artifact are attached to the chat.
#[derive(Debug, Clone)]
pub struct ExternalPolicy {
    cfg: ExternalPolicyConfig,
}

impl ExternalPolicy {
    pub fn new(cfg: ExternalPolicyConfig) -> Result<Self, PolicyError> {
        if cfg.endpoint_url.is_empty() {
            return Err(PolicyError::Unavailable(
                "rollout.external.endpoint_url is not set".into(),
            ));
        }
        http::Url::parse(&cfg.endpoint_url).map_err(|e| PolicyError::Unavailable(e.to_string()))?;
        Ok(Self { cfg })
    }

    fn image_part(path: &Path) -> Result<serde_json::Value, PolicyError> {
        let url = http::image_data_url(path).map_err(|e| PolicyError::Protocol(format!("{path:?}: {e}")))?;
        Ok(serde_json::json!({"type": "image_url", "image_url": {"url": url}}))
    }

    /// Chat messages for the next request.
    pub fn messages(ctx: &PolicyContext<'_>) -> Result<Vec<serde_json::Value>, PolicyError> {
        let (system, user) = ctx.task.render_prompt();
        let mut msgs = vec![
            serde_json::json!({"role": "system", "content": system}),
            serde_json::json!({"role": "user", "content": [
                {"type": "text", "text": user},
                Self::image_part(&ctx.task.image_path)?,
            ]}),
        ];
        let mut fb = ctx.feedback.iter();
        for chunk in ctx.chunks {
            msgs.push(serde_json::json!({"role": "assistant", "content": chunk}));
            if chunk.ends_with("</code>") {
                if let Some(f) = fb.next() {
                    let mut content = vec![serde_json::json!({
                        "type": "text",
                        "text": format!("<sandbox_output>{}</sandbox_output>", f.observation.render()),
                    })];
                    for img in &f.images {
                        content.push(Self::image_part(img)?);
                    }
                    msgs.push(serde_json::json!({"role": "user", "content": content}));
                }
            }
        }
        Ok(msgs)
    }
}

struct ExternalRun {
    cfg: ExternalPolicyConfig,
}

impl PolicyRun for ExternalRun {
    fn generate(&mut self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let body = serde_json::json!({
            "model": self.cfg.model_name,
            "messages": ExternalPolicy::messages(ctx)?,
            "temperature": ctx.temperature,
            "max_tokens": self.cfg.max_tokens,
            "stop": STOP_SEQUENCES,
        });
        let mut headers = Vec::new();
        if let Some(var) = &self.cfg.api_key_env {
            if let Ok(key) = std::env::var(var) {
                headers.push(("Authorization".to_string(), format!("Bearer {key}")));
            }
        }
        let attempts = self.cfg.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match http::post_json(&self.cfg.endpoint_url, &body, &headers, Duration::from_secs(self.cfg.timeout_secs)) {
                Ok(v) => {
                    let text = v["choices"][0]["message"]["content"]
                        .as_str()
                        .ok_or_else(|| PolicyError::Protocol(v.to_string()))?;
                    let stopped = v["choices"][0]["finish_reason"].as_str() == Some("stop");
                    return Ok(restore_stop(text, stopped));
                }
                Err(e) => {
                    last = e.to_string();
                    if !e.is_transient() {
                        break;
                    }
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms) * 2u32.pow(attempt as u32));
                    }
                }
            }
        }
        Err(PolicyError::Unavailable(last))
    }
}

/// Servers drop the matched stop sequence; put back the one whose opening
/// tag is still unclosed.
fn restore_stop(text: &str, stopped: bool) -> String {
    let text = truncate_at_stop(text).to_string();
    if !stopped || STOP_SEQUENCES.iter().any(|s| text.ends_with(s)) {
        return text;
    }
    let last_code = text.rfind("<code>");
    let last_answer = text.rfind("<answer>");
    match (last_code, last_answer) {
        (Some(c), a) if a.is_none_or(|a| c > a) && !text[c..].contains("</code>") => text + "</code>",
        (_, Some(a)) if !text[a..].contains("</answer>") => text + "</answer>",
        _ => text,
    }
}

impl Policy for ExternalPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::External
    }

    fn begin(&self, _task: &RolloutTask, _k: usize) -> Result<Box<dyn PolicyRun>, PolicyError> {
        Ok(Box::new(ExternalRun { cfg: self.cfg.clone() }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub t_max: usize,
    pub temperature: f64,
    pub k: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_MAX_TURNS,
            temperature: 1.0,
            k: 8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("group has {0} completed rollouts; at least 2 are required")]
    GroupTooSmall(usize),
    #[error("image: {0}")]
    Image(String),
}

#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub session_id: String,
    pub trajectory: Trajectory,
    /// Raw transcript including sandbox outputs.
    pub transcript: String,
    pub results: Vec<SandboxResult>,
    pub decisions: Option<Vec<Decision>>,
}

fn feedback_for(session: &SandboxSession, step_index: usize, result: &SandboxResult) -> StepFeedback {
    let mut observation = result.to_observation(step_index);
    observation.stdout = escape_tags(&observation.stdout);
    observation.stderr = escape_tags(&observation.stderr);
    let images = result
        .artifacts
        .iter()
        .filter(|a| MediaKind::from_path(&a.path) == MediaKind::Image)
        .map(|a| session.resolve(&a.path))
        .collect();
    StepFeedback {
        step_index,
        observation,
        images,
    }
}

/// One rollout in a fresh sandbox session named `session_id`.
pub fn run_rollout(
    task: &RolloutTask,
    policy: &dyn Policy,
    k: usize,
    sandbox: &Sandbox,
    session_id: &str,
    limits: &ExecutionLimits,
    cfg: &RolloutConfig,
) -> Result<RolloutOutcome, RolloutError> {
    let mut session = sandbox.open_session(session_id, &task.image_path, &task.declared_name)?;
    let mut run = policy.begin(task, k)?;
    let mut chunks: Vec<String> = Vec::new();
    let mut feedback: Vec<StepFeedback> = Vec::new();
    let mut results = Vec::new();
    let mut transcript = String::new();
    let mut unanswered = Terminal::Aborted;
    loop {
        let ctx = PolicyContext {
            task,
            chunks: &chunks,
            feedback: &feedback,
            temperature: cfg.temperature,
        };
        let chunk = truncate_at_stop(&run.generate(&ctx)?).to_string();
        if chunk.trim().is_empty() {
            break;
        }
        transcript.push_str(&chunk);
        chunks.push(chunk.clone());
        if chunk.ends_with("</answer>") {
            break;
        }
        if !chunk.ends_with("</code>") {
            // generation ended without a stop sequence
            break;
        }
        let parsed = parse_transcript_lenient(&transcript).map_err(TrajectoryError::from)?;
        let Some((step_index, code)) = parsed
            .actions
            .iter()
            .enumerate()
            .rev()
            .find(|(_, a)| a.kind == ActionKind::Code)
            .map(|(i, a)| (i, a.text.clone()))
        else {
            break;
        };
        let result = sandbox.execute_step(&mut session, &code, limits)?;
        let fb = feedback_for(&session, step_index, &result);
        transcript.push_str(&format!("<sandbox_output>{}</sandbox_output>", fb.observation.render()));
        feedback.push(fb);
        results.push(result);
        if feedback.len() >= cfg.t_max {
            unanswered = Terminal::TurnLimit;
            break;
        }
    }
    let parsed = parse_transcript_lenient(&transcript).map_err(TrajectoryError::from)?;
    let trajectory = Trajectory::from_parsed(
        &task.task_id,
        &task.declared_name,
        &task.question,
        parsed,
        unanswered,
        cfg.t_max,
    )?;
    Ok(RolloutOutcome {
        session_id: session_id.to_string(),
        trajectory,
        transcript,
        results,
        decisions: run.decisions(),
    })
}

/// K rollouts sharing a task, each in its own session `<task_id>-k<i>`.
/// Failed rollouts are logged and dropped; fewer than 2 survivors reject
/// the group.
pub fn run_group(
    task: &RolloutTask,
    policy: &dyn Policy,
    sandbox: &Sandbox,
    limits: &ExecutionLimits,
    cfg: &RolloutConfig,
) -> Result<Vec<RolloutOutcome>, RolloutError> {
    if cfg.k < 2 {
        return Err(RolloutError::GroupTooSmall(cfg.k));
    }
    let results: Vec<Result<RolloutOutcome, RolloutError>> = (0..cfg.k)
        .into_par_iter()
        .map(|i| {
            let sid = format!("{}-k{i}", task.task_id);
            run_rollout(task, policy, i, sandbox, &sid, limits, cfg)
        })
        .collect();
    let mut ok = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => ok.push(o),
            Err(e) => tracing::warn!(task = %task.task_id, rollout = i, error = %e, "rollout failed"),
        }
    }
    if ok.len() < 2 {
        return Err(RolloutError::GroupTooSmall(ok.len()));
    }
    Ok(ok)
}

/// K trajectories of one prompt with their scalar rewards.
#[derive(Debug, Clone)]
pub struct PromptGroup {
    pub group_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
}

impl PromptGroup {
    pub fn new(group_id: impl Into<String>, trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Result<Self, RolloutError> {
        if trajectories.len() != rewards.len() || trajectories.len() < 2 {
            return Err(RolloutError::GroupTooSmall(trajectories.len().min(rewards.len())));
        }
        Ok(Self {
            group_id: group_id.into(),
            trajectories,
            rewards,
        })
    }
}

/// Toy task as a rollout task, writing its image to `dir`.
pub fn toy_rollout_task(task: &ToyTask, dir: &Path) -> Result<RolloutTask, RolloutError> {
    let path = dir.join(task.image_name());
    toy::write_task_image(task, &path).map_err(|e| RolloutError::Image(e.to_string()))?;
    RolloutTask::from_image(&task.task_id, &path, &task.question)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_truncation() {
        assert_eq!(truncate_at_stop("<think>a<code>x</code>tail"), "<think>a<code>x</code>");
        assert_eq!(truncate_at_stop("<answer>B</answer> more"), "<answer>B</answer>");
        assert_eq!(truncate_at_stop("plain"), "plain");
    }

    #[test]
    fn stop_restoration() {
        assert_eq!(restore_stop("<think>a<code>x", true), "<think>a<code>x</code>");
        assert_eq!(restore_stop("<think>a</think><answer>B", true), "<think>a</think><answer>B</answer>");
        assert_eq!(restore_stop("<think>a", false), "<think>a");
    }

    #[test]
    fn scripted_chunks_drop_outputs() {
        let p = ScriptedPolicy::from_transcript(
            "<think>look<code>print(1)</code><sandbox_output>1</sandbox_output>ok</think><answer>1</answer>trailing",
        );
        assert_eq!(p.chunks(), ["<think>look<code>print(1)</code>", "ok</think><answer>1</answer>"]);
    }

    #[test]
    fn prompt_mentions_path_and_size() {
        let t = RolloutTask {
            task_id: "t".into(),
            image_path: "/x/12.jpg".into(),
            declared_name: "12.jpg".into(),
            question: "What?".into(),
            image_size: (3000, 2000),
        };
        let (sys, user) = t.render_prompt();
        assert!(sys.starts_with("You are a helpful assistant."));
        assert!(user.contains("### User Image Path:** \"12.jpg\""));
        assert!(user.contains("\"3000x2000\""));
    }
}
