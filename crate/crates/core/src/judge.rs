//! Judge interface for crop relevance, tool-step rubric scores and answer
//! grading, with a fixture-driven mock, a disk cache and an HTTP client for
//! OpenAI-compatible chat endpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answer::closed_form_match;
use crate::http;

pub const CROP_FAITHFULNESS_SYSTEM: &str = "You are evaluating whether an image contains any relevant visual content in the question.

Your task: Determine if the image clearly shows any objects/content mentioned or implied in the question.

Use 1 if:
- Any objects/content mentioned in the question is clearly visible

Use 0 if:
- None of the relevant objects is visible, clearly visible, or identifiable";

pub const CROP_FAITHFULNESS_USER: &str = "Question: {question}

Does this image clearly show any objects/content mentioned in the question?

Image. ";

pub const TOOL_RUBRIC_SYSTEM: &str = "You are an expert judge to score a Agent Response's tool use quality.

Agent generate code to process the image, processed image will appear after Agent Generated Images

- Score = 1 if Agent Generated Images clearly contains at least one object mentioned in the question.

- Score = 0.5 if Agent Generated Images shows a PARTIAL match.

- Score = 0.25 if Agent Generated Images doesn't matches.";

pub const TOOL_RUBRIC_USER: &str = "## Question: {question}

**Agent Generated Images**: ";

pub const ANSWER_GRADE_SYSTEM: &str = "You are grading whether a predicted answer is semantically equivalent to the ground-truth answer of a question.

Reply 1 if the prediction is equivalent to the ground truth, otherwise reply 0. Reply with the number only.";

pub const ANSWER_GRADE_USER: &str = "Question: {question}
Ground truth: {gold}
Prediction: {prediction}";

pub const LABEL_CHECK_SYSTEM: &str = "You are checking a visual question answering dataset for label errors.

Look at the image and the question. Reply 1 if the given answer is correct for this image, otherwise reply 0. Reply with the number only.";

pub const LABEL_CHECK_USER: &str = "Question: {question}
Given answer: {gold}";

const REPAIR_MESSAGE: &str = "Reply with only the score as a single number.";

/// Keys of [`JudgeRequest::extra`].
pub const EXTRA_GOLD: &str = "gold";
pub const EXTRA_PREDICTION: &str = "prediction";
pub const EXTRA_EXAMPLE_ID: &str = "example_id";
pub const EXTRA_CROP_ID: &str = "crop_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptId {
    CropFaithfulness,
    ToolRubric,
    AnswerGrade,
    LabelCheck,
}

impl PromptId {
    pub fn codomain(self) -> &'static [f64] {
        match self {
            PromptId::CropFaithfulness | PromptId::AnswerGrade | PromptId::LabelCheck => &[0.0, 1.0],
            PromptId::ToolRubric => &[0.25, 0.5, 1.0],
        }
    }

    pub fn accepts(self, score: f64) -> bool {
        self.codomain().contains(&score)
    }

    /// Lowest score: what an empty or blank image earns.
    pub fn floor(self) -> f64 {
        self.codomain()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub prompt_id: PromptId,
    pub question: String,
    pub images: Vec<PathBuf>,
    pub extra: BTreeMap<String, String>,
}

impl JudgeRequest {
    pub fn new(prompt_id: PromptId, question: impl Into<String>) -> Self {
        Self {
            prompt_id,
            question: question.into(),
            images: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn image(mut self, path: impl Into<PathBuf>) -> Self {
        self.images.push(path.into());
        self
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        match self.prompt_id {
            PromptId::CropFaithfulness | PromptId::ToolRubric if self.images.is_empty() => {
                Err(JudgeError::InvalidRequest("image prompts need at least one image".into()))
            }
            PromptId::AnswerGrade | PromptId::LabelCheck if !self.extra.contains_key(EXTRA_GOLD) => {
                Err(JudgeError::InvalidRequest("answer grading needs a ground truth".into()))
            }
            _ => Ok(()),
        }
    }

    /// System and user text of the rendered prompt. Images are attached
    /// after the user text by the transport.
    pub fn render(&self) -> (String, String) {
        let get = |k: &str| self.extra.get(k).map(String::as_str).unwrap_or("");
        match self.prompt_id {
            PromptId::CropFaithfulness => (
                CROP_FAITHFULNESS_SYSTEM.to_string(),
                CROP_FAITHFULNESS_USER.replace("{question}", &self.question),
            ),
            PromptId::ToolRubric => (
                TOOL_RUBRIC_SYSTEM.to_string(),
                TOOL_RUBRIC_USER.replace("{question}", &self.question),
            ),
            PromptId::AnswerGrade => (
                ANSWER_GRADE_SYSTEM.to_string(),
                ANSWER_GRADE_USER
                    .replace("{question}", &self.question)
                    .replace("{gold}", get(EXTRA_GOLD))
                    .replace("{prediction}", get(EXTRA_PREDICTION)),
            ),
            PromptId::LabelCheck => (
                LABEL_CHECK_SYSTEM.to_string(),
                LABEL_CHECK_USER
                    .replace("{question}", &self.question)
                    .replace("{gold}", get(EXTRA_GOLD)),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: f64,
    pub raw_reply: String,
    pub cached: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error("malformed judge reply: {0:?}")]
    MalformedReply(String),
    #[error("invalid judge request: {0}")]
    InvalidRequest(String),
    #[error("unreadable image {path:?}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
}

pub trait Judge: Send + Sync {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError>;
}

impl<J: Judge + ?Sized> Judge for &J {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        (**self).judge(req)
    }
}

impl<J: Judge + ?Sized> Judge for Box<J> {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        (**self).judge(req)
    }
}

impl<J: Judge + ?Sized> Judge for std::sync::Arc<J> {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        (**self).judge(req)
    }
}

/// Strict first-token verdict rule: the reply's first whitespace-delimited
/// token, minus trailing `.`/`,`, must be a number in the prompt's codomain.
pub fn parse_verdict(prompt_id: PromptId, reply: &str) -> Option<f64> {
    let token = reply.split_whitespace().next()?;
    let token = token.trim_end_matches(['.', ',']);
    if token.is_empty() || !token.chars().all(|c| c.is_ascii_digit() || c == '.') {
        return None;
    }
    let v: f64 = token.parse().ok()?;
    prompt_id.accepts(v).then_some(v)
}

pub fn judge_crop_relevance(
    judge: &dyn Judge,
    question: &str,
    crop: &Path,
    example_id: &str,
    crop_id: &str,
) -> Result<u8, JudgeError> {
    let req = JudgeRequest::new(PromptId::CropFaithfulness, question)
        .image(crop)
        .with(EXTRA_EXAMPLE_ID, example_id)
        .with(EXTRA_CROP_ID, crop_id);
    Ok(judge.judge(&req)?.score as u8)
}

pub fn score_tool_step(
    judge: &dyn Judge,
    question: &str,
    step_images: &[PathBuf],
    example_id: &str,
    step_id: &str,
) -> Result<f64, JudgeError> {
    let mut req = JudgeRequest::new(PromptId::ToolRubric, question)
        .with(EXTRA_EXAMPLE_ID, example_id)
        .with(EXTRA_CROP_ID, step_id);
    req.images = step_images.to_vec();
    Ok(judge.judge(&req)?.score)
}

/// 1 iff the prediction matches the ground truth. Empty predictions score 0
/// and exact matches score 1 without consulting the judge.
pub fn judge_answer(
    judge: &dyn Judge,
    question: &str,
    gold: &str,
    prediction: &str,
) -> Result<u8, JudgeError> {
    if prediction.trim().is_empty() {
        return Ok(0);
    }
    if prediction.trim() == gold.trim() {
        return Ok(1);
    }
    let req = JudgeRequest::new(PromptId::AnswerGrade, question)
        .with(EXTRA_GOLD, gold)
        .with(EXTRA_PREDICTION, prediction);
    Ok(judge.judge(&req)?.score as u8)
}

fn read_image(path: &Path) -> Result<image::DynamicImage, JudgeError> {
    image::open(path).map_err(|e| JudgeError::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// True if every pixel of the image is identical.
pub fn is_blank_image(path: &Path) -> Result<bool, JudgeError> {
    let img = read_image(path)?.to_rgba8();
    let mut px = img.pixels();
    let first = match px.next() {
        Some(p) => *p,
        None => return Ok(true),
    };
    Ok(px.all(|p| *p == first))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub example_id: String,
    pub crop_id: String,
    pub verdict: f64,
}

/// Deterministic judge for tests and offline runs.
///
/// Image prompts look up `(example_id, crop_id)` in the fixture; without an
/// entry, blank images score the prompt's floor and anything else falls back
/// to `default_score` or fails. Answer grading uses closed-form matching and
/// otherwise normalized equality. Label checks use the fixture keyed by
/// `(record_id, "label")`, then `default_score`.
#[derive(Debug, Default)]
pub struct MockJudge {
    fixture: HashMap<(String, String), f64>,
    pub default_score: Option<f64>,
    calls: AtomicUsize,
}

impl MockJudge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut j = Self::new();
        for e in entries {
            j.insert(&e.example_id, &e.crop_id, e.verdict);
        }
        j
    }

    /// Fixture file: a JSON array of entries, or JSON lines.
    pub fn from_fixture_file(path: &Path) -> Result<Self, JudgeError> {
        let text = fs::read_to_string(path)
            .map_err(|e| JudgeError::InvalidRequest(format!("fixture {path:?}: {e}")))?;
        let bad = |e: serde_json::Error| JudgeError::InvalidRequest(format!("fixture {path:?}: {e}"));
        let entries: Vec<FixtureEntry> = if text.trim_start().starts_with('[') {
            serde_json::from_str(&text).map_err(bad)?
        } else {
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .map_err(bad)?
        };
        Ok(Self::from_entries(entries))
    }

    pub fn insert(&mut self, example_id: &str, crop_id: &str, verdict: f64) {
        self.fixture
            .insert((example_id.to_string(), crop_id.to_string()), verdict);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn image_score(&self, req: &JudgeRequest) -> Result<f64, JudgeError> {
        let key = (
            req.extra.get(EXTRA_EXAMPLE_ID).cloned().unwrap_or_default(),
            req.extra.get(EXTRA_CROP_ID).cloned().unwrap_or_default(),
        );
        if let Some(v) = self.fixture.get(&key) {
            return Ok(*v);
        }
        let mut all_blank = true;
        for img in &req.images {
            all_blank &= is_blank_image(img)?;
        }
        if all_blank {
            return Ok(req.prompt_id.floor());
        }
        self.default_score.ok_or_else(|| {
            JudgeError::Unavailable(format!("mock judge has no verdict for {key:?}"))
        })
    }
}

impl Judge for MockJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let score = match req.prompt_id {
            PromptId::CropFaithfulness | PromptId::ToolRubric => self.image_score(req)?,
            PromptId::LabelCheck => {
                let key = (
                    req.extra.get(EXTRA_EXAMPLE_ID).cloned().unwrap_or_default(),
                    req.extra.get(EXTRA_CROP_ID).cloned().unwrap_or_default(),
                );
                match self.fixture.get(&key).copied().or(self.default_score) {
                    Some(v) => v,
                    None => return Err(JudgeError::Unavailable(format!("mock judge has no verdict for {key:?}"))),
                }
            }
            PromptId::AnswerGrade => {
                let gold = &req.extra[EXTRA_GOLD];
                let pred = req.extra.get(EXTRA_PREDICTION).map(String::as_str).unwrap_or("");
                let ok = closed_form_match(pred, gold).unwrap_or_else(|| {
                    crate::answer::normalize_answer(pred) == crate::answer::normalize_answer(gold)
                });
                if ok {
                    1.0
                } else {
                    0.0
                }
            }
        };
        if !req.prompt_id.accepts(score) {
            return Err(JudgeError::MalformedReply(format!("{score} outside codomain")));
        }
        Ok(JudgeVerdict {
            score,
            raw_reply: format!("{score}"),
            cached: false,
        })
    }
}

/// Memoizing wrapper keyed by prompt id, question, image content hashes and
/// extra fields, with an optional on-disk store.
pub struct CachedJudge<J> {
    inner: J,
    namespace: String,
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, JudgeVerdict>>,
}

impl<J: Judge> CachedJudge<J> {
    pub fn new(inner: J, namespace: impl Into<String>, dir: Option<PathBuf>) -> Result<Self, JudgeError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)
                .map_err(|e| JudgeError::InvalidRequest(format!("cache dir {d:?}: {e}")))?;
        }
        Ok(Self {
            inner,
            namespace: namespace.into(),
            dir,
            mem: Mutex::new(HashMap::new()),
        })
    }

    pub fn inner(&self) -> &J {
        &self.inner
    }

    pub fn cache_key(&self, req: &JudgeRequest) -> Result<String, JudgeError> {
        let mut h = Sha256::new();
        h.update(self.namespace.as_bytes());
        h.update([0]);
        h.update(format!("{:?}", req.prompt_id).as_bytes());
        h.update([0]);
        h.update(req.question.as_bytes());
        for img in &req.images {
            let bytes = fs::read(img).map_err(|e| JudgeError::UnreadableImage {
                path: img.clone(),
                reason: e.to_string(),
            })?;
            h.update([1]);
            h.update(Sha256::digest(&bytes));
        }
        for (k, v) in &req.extra {
            h.update([2]);
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }
}

impl<J: Judge> Judge for CachedJudge<J> {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        req.validate()?;
        let key = self.cache_key(req)?;
        if let Some(v) = self.mem.lock().expect("cache lock").get(&key) {
            return Ok(JudgeVerdict { cached: true, ..v.clone() });
        }
        let file = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(f) = &file {
            if let Ok(text) = fs::read_to_string(f) {
                if let Ok(v) = serde_json::from_str::<JudgeVerdict>(&text) {
                    if req.prompt_id.accepts(v.score) {
                        self.mem.lock().expect("cache lock").insert(key, v.clone());
                        return Ok(JudgeVerdict { cached: true, ..v });
                    }
                }
            }
        }
        let v = self.inner.judge(req)?;
        let stored = JudgeVerdict { cached: false, ..v.clone() };
        if let Some(f) = &file {
            let tmp = f.with_extension(format!("tmp{}", std::process::id()));
            let text = serde_json::to_string(&stored).expect("verdict serializes");
            if fs::write(&tmp, text).is_ok() {
                let _ = fs::rename(&tmp, f);
            }
        }
        self.mem.lock().expect("cache lock").insert(key, stored);
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpJudgeConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub max_concurrency: usize,
    /// Environment variable holding a bearer token, if any.
    pub api_key_env: Option<String>,
    pub timeout: Duration,
    pub attempts: usize,
    pub backoff: Duration,
}

impl Default for HttpJudgeConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_name: String::new(),
            max_concurrency: 4,
            api_key_env: None,
            timeout: Duration::from_secs(60),
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub(crate) struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

pub(crate) struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Judge behind an OpenAI-compatible chat-completions endpoint.
#[derive(Debug)]
pub struct HttpJudge {
    cfg: HttpJudgeConfig,
    gate: Semaphore,
}

impl HttpJudge {
    pub fn new(cfg: HttpJudgeConfig) -> Result<Self, JudgeError> {
        if cfg.endpoint_url.is_empty() {
            return Err(JudgeError::InvalidRequest(
                "judge.endpoint_url is not set; configure it or use --judge mock".into(),
            ));
        }
        http::Url::parse(&cfg.endpoint_url).map_err(|e| JudgeError::InvalidRequest(e.to_string()))?;
        let gate = Semaphore::new(cfg.max_concurrency);
        Ok(Self { cfg, gate })
    }

    fn image_part(path: &Path) -> Result<serde_json::Value, JudgeError> {
        let url = http::image_data_url(path).map_err(|e| JudgeError::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(serde_json::json!({"type": "image_url", "image_url": {"url": url}}))
    }

    fn messages(&self, req: &JudgeRequest) -> Result<Vec<serde_json::Value>, JudgeError> {
        let (system, user) = req.render();
        let mut content = vec![serde_json::json!({"type": "text", "text": user})];
        for img in &req.images {
            content.push(Self::image_part(img)?);
        }
        Ok(vec![
            serde_json::json!({"role": "system", "content": system}),
            serde_json::json!({"role": "user", "content": content}),
        ])
    }

    fn complete(&self, messages: &[serde_json::Value]) -> Result<String, JudgeError> {
        let body = serde_json::json!({
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": 0.0,
            "max_tokens": 16,
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
            let result = {
                let _permit = self.gate.acquire();
                http::post_json(&self.cfg.endpoint_url, &body, &headers, self.cfg.timeout)
            };
            match result {
                Ok(v) => {
                    return v["choices"][0]["message"]["content"]
                        .as_str()
                        .map(str::to_string)
                        .ok_or_else(|| JudgeError::MalformedReply(v.to_string()));
                }
                Err(e) => {
                    last = e.to_string();
                    if !e.is_transient() {
                        break;
                    }
                    if attempt + 1 < attempts {
                        std::thread::sleep(self.cfg.backoff * 2u32.pow(attempt as u32));
                    }
                }
            }
        }
        Err(JudgeError::Unavailable(last))
    }
}

impl Judge for HttpJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        req.validate()?;
        let mut messages = self.messages(req)?;
        let reply = self.complete(&messages)?;
        if let Some(score) = parse_verdict(req.prompt_id, &reply) {
            return Ok(JudgeVerdict { score, raw_reply: reply, cached: false });
        }
        // one repair retry
        messages.push(serde_json::json!({"role": "assistant", "content": reply}));
        messages.push(serde_json::json!({"role": "user", "content": REPAIR_MESSAGE}));
        let repaired = self.complete(&messages)?;
        match parse_verdict(req.prompt_id, &repaired) {
            Some(score) => Ok(JudgeVerdict { score, raw_reply: repaired, cached: false }),
            None => Err(JudgeError::MalformedReply(repaired)),
        }
    }
}
