//! Synthetic grid search environment with a tabular softmax policy, used to
//! train and evaluate the full reward/optimizer stack without a neural model.
//!
//! A task is an n×n grid of noisy gray cells with one colored marker. The
//! question names the marker's cell; some questions also carry a textual
//! cue giving the color away, which makes answering without looking a viable
//! shortcut. The policy only learns the color from a crop of exactly the
//! target cell.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::judge::{FixtureEntry, JudgeError, MockJudge};
use crate::reward::{total_reward, MemArtifacts, RewardBreakdown, RewardError, RewardWeights, TaskKind, ToolScorer};
use crate::sandbox::{infer_crop_boxes, CropBox};
use crate::tapo::{
    build_token_batch, tapo_update, Decision, GroupSample, KlReference, Optimizer, TabularPolicy, TapoConfig,
    TapoError,
};
use crate::trajectory::{Action, Observation, Terminal, Trajectory};

pub const PALETTE: [(&str, [u8; 3]); 4] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [50, 80, 220]),
    ("yellow", [230, 200, 40]),
];
pub const OPTION_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const CELL_PX: u32 = 16;
const MARKER_PX: u32 = 6;
pub const TOY_MAX_TURNS: usize = 3;
pub const DEFAULT_CUE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("grid size must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("cue fraction must lie in [0, 1], got {0}")]
    BadCueFraction(f64),
    #[error(transparent)]
    Tapo(#[from] TapoError),
    #[error("reward: {0}")]
    Reward(String),
    #[error("trajectory: {0}")]
    Trajectory(String),
}

impl From<RewardError> for ToyError {
    fn from(e: RewardError) -> Self {
        ToyError::Reward(e.to_string())
    }
}

/// Mixes seed components into one 64-bit seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub seed: u64,
    pub grid_size: usize,
    pub target_cell: (usize, usize),
    /// Index into [`PALETTE`].
    pub target_color: usize,
    /// Color leaked by the question text, if any.
    pub cue: Option<usize>,
    pub task_id: String,
    pub question: String,
    /// Option letter of the target color.
    pub gold_answer: String,
}

impl ToyTask {
    pub fn image_size(&self) -> (u32, u32) {
        let side = self.grid_size as u32 * CELL_PX;
        (side, side)
    }

    pub fn image_name(&self) -> String {
        format!("{}.png", self.task_id)
    }

    pub fn cell_box(&self, row: usize, col: usize) -> CropBox {
        let c = CELL_PX as f64;
        CropBox::new(col as f64 * c, row as f64 * c, (col + 1) as f64 * c, (row + 1) as f64 * c)
    }

    pub fn full_box(&self) -> CropBox {
        let (w, h) = self.image_size();
        CropBox::new(0.0, 0.0, w as f64, h as f64)
    }

    pub fn gold_label(&self) -> &'static str {
        PALETTE[self.target_color].0
    }
}

pub fn answer_text(color: usize) -> String {
    format!("{}. {}", OPTION_LETTERS[color], PALETTE[color].0)
}

pub fn generate_instance(seed: u64, grid_size: usize) -> Result<ToyTask, ToyError> {
    generate_instance_with_cue(seed, grid_size, DEFAULT_CUE_FRACTION)
}

pub fn generate_instance_with_cue(seed: u64, grid_size: usize, cue_fraction: f64) -> Result<ToyTask, ToyError> {
    if grid_size < 2 {
        return Err(ToyError::GridTooSmall(grid_size));
    }
    if !(0.0..=1.0).contains(&cue_fraction) {
        return Err(ToyError::BadCueFraction(cue_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_cell = (rng.gen_range(0..grid_size), rng.gen_range(0..grid_size));
    let target_color = rng.gen_range(0..PALETTE.len());
    let cue = (rng.gen::<f64>() < cue_fraction).then_some(target_color);
    let options = PALETTE
        .iter()
        .zip(OPTION_LETTERS)
        .map(|((name, _), l)| format!("{l}. {name}"))
        .collect::<Vec<_>>()
        .join(" ");
    let cue_text = match cue {
        Some(c) => format!(" The marker looks {} at a glance.", PALETTE[c].0),
        None => String::new(),
    };
    let question = format!(
        "What is the color of the marker? It sits in row {}, column {}.{cue_text}\nOptions: {options}",
        target_cell.0 + 1,
        target_cell.1 + 1
    );
    Ok(ToyTask {
        seed,
        grid_size,
        target_cell,
        target_color,
        cue,
        task_id: format!("toy-{seed:016x}"),
        question,
        gold_answer: OPTION_LETTERS[target_color].to_string(),
    })
}

/// Deterministic render: per-cell seeded gray noise, marker centered in the
/// target cell.
pub fn render(task: &ToyTask) -> RgbImage {
    let (w, h) = task.image_size();
    let mut img = RgbImage::new(w, h);
    for row in 0..task.grid_size {
        for col in 0..task.grid_size {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[task.seed, row as u64, col as u64]));
            let x0 = col as u32 * CELL_PX;
            let y0 = row as u32 * CELL_PX;
            for y in y0..y0 + CELL_PX {
                for x in x0..x0 + CELL_PX {
                    let v = rng.gen_range(130u8..190);
                    img.put_pixel(x, y, Rgb([v, v, v]));
                }
            }
        }
    }
    let (row, col) = task.target_cell;
    let off = (CELL_PX - MARKER_PX) / 2;
    let x0 = col as u32 * CELL_PX + off;
    let y0 = row as u32 * CELL_PX + off;
    for y in y0..y0 + MARKER_PX {
        for x in x0..x0 + MARKER_PX {
            img.put_pixel(x, y, Rgb(PALETTE[task.target_color].1));
        }
    }
    img
}

pub fn write_task_image(task: &ToyTask, path: &Path) -> Result<(), image::ImageError> {
    render(task).save(path)
}

/// Color seen in a crop. Only a crop of exactly one cell resolves the
/// marker; larger views are too coarse for the toy agent.
pub fn perceive_crop(crop: &RgbImage) -> Option<usize> {
    if crop.dimensions() != (CELL_PX, CELL_PX) {
        return None;
    }
    let px = crop.get_pixel(CELL_PX / 2, CELL_PX / 2).0;
    PALETTE.iter().position(|(_, rgb)| *rgb == px)
}

/// 1 iff the crop box covers the whole target cell.
pub fn oracle_faithfulness(task: &ToyTask, crop: &CropBox) -> u8 {
    let cell = task.cell_box(task.target_cell.0, task.target_cell.1);
    let (x1, x2) = (crop.x1.min(crop.x2), crop.x1.max(crop.x2));
    let (y1, y2) = (crop.y1.min(crop.y2), crop.y1.max(crop.y2));
    u8::from(x1 <= cell.x1 && y1 <= cell.y1 && x2 >= cell.x2 && y2 >= cell.y2)
}

/// Rubric score from ground truth: 1 for exactly the target cell, 0.5 for a
/// larger box containing it, 0.25 otherwise.
pub fn oracle_tool_score(task: &ToyTask, crop: &CropBox) -> f64 {
    if oracle_faithfulness(task, crop) == 0 {
        return 0.25;
    }
    let cell = task.cell_box(task.target_cell.0, task.target_cell.1);
    let exact = (crop.x2 - crop.x1).abs() <= cell.x2 - cell.x1 && (crop.y2 - crop.y1).abs() <= cell.y2 - cell.y1;
    if exact {
        1.0
    } else {
        0.5
    }
}

/// Ground-truth coverage of a trajectory: some code step crops a box
/// containing the target cell.
pub fn trajectory_covers_target(task: &ToyTask, traj: &Trajectory) -> bool {
    traj.code_steps().iter().any(|&s| {
        infer_crop_boxes(&traj.actions()[s].text)
            .iter()
            .any(|b| oracle_faithfulness(task, b) == 1)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToyAction {
    CropCell(usize, usize),
    /// Crop of the whole image (the lazy crop).
    CropFull,
    Answer(usize),
}

impl ToyAction {
    pub fn crop_box(&self, task: &ToyTask) -> Option<CropBox> {
        match *self {
            ToyAction::CropCell(r, c) => Some(task.cell_box(r, c)),
            ToyAction::CropFull => Some(task.full_box()),
            ToyAction::Answer(_) => None,
        }
    }
}

/// Agent state. `turn` counts crops already taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToyState {
    Start { pos: usize, cue: Option<usize> },
    Searching { turn: usize, pos: usize, cue: Option<usize> },
    Seen { turn: usize, color: usize },
}

/// Index maps between states/actions and policy table rows/columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLayout {
    pub grid_size: usize,
}

impl ToyLayout {
    fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    const CUES: usize = PALETTE.len() + 1;
    const SEARCH_TURNS: usize = TOY_MAX_TURNS - 1;

    pub fn n_states(&self) -> usize {
        let start = self.cells() * Self::CUES;
        start + Self::SEARCH_TURNS * start + Self::SEARCH_TURNS * PALETTE.len()
    }

    pub fn n_actions(&self) -> usize {
        self.cells() + 1 + PALETTE.len()
    }

    fn cue_index(cue: Option<usize>) -> usize {
        cue.map_or(0, |c| c + 1)
    }

    pub fn state_index(&self, s: &ToyState) -> usize {
        let start = self.cells() * Self::CUES;
        match *s {
            ToyState::Start { pos, cue } => pos * Self::CUES + Self::cue_index(cue),
            ToyState::Searching { turn, pos, cue } => {
                start + ((turn - 1) * self.cells() + pos) * Self::CUES + Self::cue_index(cue)
            }
            ToyState::Seen { turn, color } => {
                start * (1 + Self::SEARCH_TURNS) + (turn - 1) * PALETTE.len() + color
            }
        }
    }

    pub fn action_index(&self, a: &ToyAction) -> usize {
        match *a {
            ToyAction::CropCell(r, c) => r * self.grid_size + c,
            ToyAction::CropFull => self.cells(),
            ToyAction::Answer(color) => self.cells() + 1 + color,
        }
    }

    pub fn action(&self, index: usize) -> ToyAction {
        let cells = self.cells();
        if index < cells {
            ToyAction::CropCell(index / self.grid_size, index % self.grid_size)
        } else if index == cells {
            ToyAction::CropFull
        } else {
            ToyAction::Answer(index - cells - 1)
        }
    }

    pub fn initial_state(&self, task: &ToyTask) -> ToyState {
        ToyState::Start {
            pos: task.target_cell.0 * self.grid_size + task.target_cell.1,
            cue: task.cue,
        }
    }

    /// State after a crop, given the color it revealed (if any).
    pub fn after_crop(&self, s: &ToyState, revealed: Option<usize>) -> ToyState {
        let (turn, pos, cue, seen) = match *s {
            ToyState::Start { pos, cue } => (0, pos, cue, None),
            ToyState::Searching { turn, pos, cue } => (turn, pos, cue, None),
            ToyState::Seen { turn, color } => (turn, 0, None, Some(color)),
        };
        match revealed.or(seen) {
            Some(color) => ToyState::Seen { turn: turn + 1, color },
            None => ToyState::Searching { turn: turn + 1, pos, cue },
        }
    }
}

pub fn new_toy_policy(grid_size: usize, temperature: f64) -> TabularPolicy {
    let l = ToyLayout { grid_size };
    TabularPolicy::uniform(l.n_states(), l.n_actions(), temperature)
}

/// Log-probability of each decision and the gradient of their sum with
/// respect to the logits.
pub fn toy_policy_logprob_and_grad(
    policy: &TabularPolicy,
    decisions: &[Decision],
) -> Result<(Vec<f64>, Vec<f64>), TapoError> {
    policy.check_finite()?;
    let na = policy.n_actions();
    let mut grad = vec![0.0; policy.logits().len()];
    let mut logps = Vec::with_capacity(decisions.len());
    for d in decisions {
        let lp = policy.log_probs(d.state);
        logps.push(lp[d.action]);
        let row = &mut grad[d.state * na..(d.state + 1) * na];
        for (b, l) in lp.iter().enumerate() {
            let ind = if b == d.action { 1.0 } else { 0.0 };
            row[b] += (ind - l.exp()) / policy.temperature();
        }
    }
    Ok((logps, grad))
}

pub fn think_text(a: &ToyAction) -> String {
    match *a {
        ToyAction::CropCell(r, c) => format!("Zoom into the cell at row {}, column {}.", r + 1, c + 1),
        ToyAction::CropFull => "Look at the whole image again.".to_string(),
        ToyAction::Answer(color) => format!("The marker is {}.", PALETTE[color].0),
    }
}

/// Guest program for a crop action; `n` numbers the crop within the rollout.
pub fn crop_program(b: &CropBox, n: usize) -> String {
    format!(
        "crop = image.crop(({}, {}, {}, {}))\ncrop.save(\"crop_{n}.png\")\nprint(\"crop_{n}.png\")",
        b.x1, b.y1, b.x2, b.y2
    )
}

/// Session id of rollout `k` of a task.
pub fn session_id(task: &ToyTask, k: usize) -> String {
    format!("{}-k{k}", task.task_id)
}

/// One in-process rollout with its policy decisions and crop pixels.
#[derive(Debug, Clone)]
pub struct ToyEpisode {
    pub trajectory: Trajectory,
    pub decisions: Vec<Decision>,
    pub artifacts: MemArtifacts,
    pub crops: Vec<CropBox>,
}

impl ToyEpisode {
    pub fn covers_target(&self, task: &ToyTask) -> bool {
        self.crops.iter().any(|b| oracle_faithfulness(task, b) == 1)
    }
}

fn crop_pixels(img: &RgbImage, b: &CropBox) -> RgbImage {
    image::imageops::crop_imm(img, b.x1 as u32, b.y1 as u32, (b.x2 - b.x1) as u32, (b.y2 - b.y1) as u32).to_image()
}

fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory png encoding");
    out.into_inner()
}

/// Writes an episode's in-memory artifacts under `root`, at their references.
pub fn materialize_artifacts(ep: &ToyEpisode, root: &Path) -> std::io::Result<()> {
    for (r, bytes) in &ep.artifacts.files {
        let p = root.join(r);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, bytes)?;
    }
    Ok(())
}

/// Mock-judge fixture giving every crop of the episode its oracle verdict,
/// keyed by (task id, artifact reference).
pub fn oracle_fixture(task: &ToyTask, traj: &Trajectory) -> Vec<FixtureEntry> {
    let mut out = Vec::new();
    for s in traj.code_steps() {
        let covers = infer_crop_boxes(&traj.actions()[s].text)
            .iter()
            .any(|b| oracle_faithfulness(task, b) == 1);
        for a in traj.observation(s).map(|o| o.artifacts.as_slice()).unwrap_or_default() {
            out.push(FixtureEntry {
                example_id: traj.task_id().to_string(),
                crop_id: a.clone(),
                verdict: if covers { 1.0 } else { 0.0 },
            });
        }
    }
    out
}

/// Fast path: simulates the sandbox in process. Artifact references and
/// observations match what the real sandbox would produce.
pub fn run_episode<R: Rng + ?Sized>(
    task: &ToyTask,
    image: &RgbImage,
    policy: &TabularPolicy,
    k: usize,
    rng: &mut R,
) -> Result<ToyEpisode, ToyError> {
    let layout = ToyLayout { grid_size: task.grid_size };
    let sid = session_id(task, k);
    let mut state = layout.initial_state(task);
    let mut actions = Vec::new();
    let mut observations = BTreeMap::new();
    let mut decisions = Vec::new();
    let mut artifacts = MemArtifacts::default();
    let mut crops = Vec::new();
    let mut terminal = Terminal::TurnLimit;
    for _ in 0..TOY_MAX_TURNS {
        let s = layout.state_index(&state);
        let a_idx = policy.sample(s, rng);
        decisions.push(Decision { state: s, action: a_idx });
        let action = layout.action(a_idx);
        actions.push(Action::think(think_text(&action)));
        let Some(b) = action.crop_box(task) else {
            let ToyAction::Answer(color) = action else { unreachable!() };
            actions.push(Action::answer(answer_text(color)));
            terminal = Terminal::Answered;
            break;
        };
        let n = crops.len() + 1;
        actions.push(Action::code(crop_program(&b, n)));
        let pixels = crop_pixels(image, &b);
        let artifact = format!("{sid}/artifacts/step{n}_crop_{n}.png");
        artifacts.files.insert(artifact.clone(), encode_png(&pixels));
        let step = actions.len() - 1;
        observations.insert(
            step,
            Observation {
                step_index: step,
                stdout: format!("crop_{n}.png\n"),
                artifacts: vec![artifact],
                ..Default::default()
            },
        );
        crops.push(b);
        state = layout.after_crop(&state, perceive_crop(&pixels));
    }
    let trajectory = Trajectory::new(
        &task.task_id,
        task.image_name(),
        &task.question,
        actions,
        observations,
        terminal,
        TOY_MAX_TURNS,
    )
    .map_err(|e| ToyError::Trajectory(e.to_string()))?;
    Ok(ToyEpisode {
        trajectory,
        decisions,
        artifacts,
        crops,
    })
}

/// Tool scorer backed by ground truth: crop boxes are read back from the
/// step's guest program.
pub struct OracleToolScorer<'a> {
    pub task: &'a ToyTask,
}

impl ToolScorer for OracleToolScorer<'_> {
    fn score_step(&self, traj: &Trajectory, step_index: usize, _images: &[String]) -> Result<f64, JudgeError> {
        let boxes = infer_crop_boxes(&traj.actions()[step_index].text);
        Ok(boxes
            .iter()
            .map(|b| oracle_tool_score(self.task, b))
            .fold(0.25, f64::max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyRewardMode {
    /// Accuracy + oracle tool reward + format.
    Oracle,
    /// Accuracy + format; the tool term is switched off.
    AccuracyOnly,
}

pub fn score_episode(
    task: &ToyTask,
    ep: &ToyEpisode,
    mode: ToyRewardMode,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, ToyError> {
    let w = match mode {
        ToyRewardMode::Oracle => *weights,
        ToyRewardMode::AccuracyOnly => RewardWeights { lambda_tool: 0.0, ..*weights },
    };
    // closed-form option letters never reach the judge
    let judge = MockJudge::new();
    let scorer = OracleToolScorer { task };
    Ok(total_reward(
        &ep.trajectory,
        &task.gold_answer,
        TaskKind::VisualSearch,
        &w,
        &judge,
        &scorer,
        &ep.artifacts,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTrainConfig {
    pub grid_size: usize,
    pub cue_fraction: f64,
    pub updates: usize,
    pub reward_mode: ToyRewardMode,
    pub eval_tasks: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            grid_size: 3,
            cue_fraction: DEFAULT_CUE_FRACTION,
            updates: 200,
            reward_mode: ToyRewardMode::Oracle,
            eval_tasks: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEval {
    pub episodes: usize,
    pub accuracy: f64,
    /// Covering crop among correct answers.
    pub faithful_rate: f64,
    /// Covering crop and correct, over all episodes.
    pub unconditional_faithful: f64,
    pub mean_tool_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub reward_total: f64,
    pub r_acc: f64,
    pub r_tool: f64,
    pub r_fmt: f64,
    pub accuracy: f64,
    pub faithful_rate: f64,
    pub tool_calls: f64,
    pub response_len: f64,
    pub objective: f64,
    pub kl_term: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub initial_eval: ToyEval,
    pub final_eval: ToyEval,
    pub initial_policy: TabularPolicy,
    pub policy: TabularPolicy,
}

struct Scored {
    episode: ToyEpisode,
    reward: RewardBreakdown,
    covers: bool,
}

fn rollout_group(
    task: &ToyTask,
    policy: &TabularPolicy,
    k: usize,
    mode: ToyRewardMode,
    weights: &RewardWeights,
    seed: u64,
) -> Result<Vec<Scored>, ToyError> {
    let image = render(task);
    (0..k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
            let episode = run_episode(task, &image, policy, i, &mut rng)?;
            let reward = score_episode(task, &episode, mode, weights)?;
            let covers = episode.covers_target(task);
            Ok(Scored { episode, reward, covers })
        })
        .collect()
}

const EVAL_STREAM: u64 = 0xE7A1;
const TRAIN_STREAM: u64 = 0x7A12;

/// Sampled-policy evaluation on fresh tasks, one rollout each.
pub fn evaluate_policy(policy: &TabularPolicy, cfg: &ToyTrainConfig) -> Result<ToyEval, ToyError> {
    let results: Vec<(bool, bool, usize)> = (0..cfg.eval_tasks)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(&[cfg.seed, EVAL_STREAM, i as u64]);
            let task = generate_instance_with_cue(s, cfg.grid_size, cfg.cue_fraction)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[s, 1]));
            let ep = run_episode(&task, &render(&task), policy, 0, &mut rng)?;
            let correct = ep.trajectory.answer() == Some(answer_text(task.target_color).as_str());
            Ok((correct, ep.covers_target(&task), ep.crops.len()))
        })
        .collect::<Result<_, ToyError>>()?;
    Ok(summarize_eval(&results))
}

fn summarize_eval(results: &[(bool, bool, usize)]) -> ToyEval {
    let n = results.len().max(1) as f64;
    let correct = results.iter().filter(|r| r.0).count();
    let both = results.iter().filter(|r| r.0 && r.1).count();
    ToyEval {
        episodes: results.len(),
        accuracy: correct as f64 / n,
        faithful_rate: if correct == 0 { 0.0 } else { both as f64 / correct as f64 },
        unconditional_faithful: both as f64 / n,
        mean_tool_calls: results.iter().map(|r| r.2 as f64).sum::<f64>() / n,
    }
}

/// Trains a fresh toy policy with group-baseline clipped updates. Task and
/// rollout seeds depend only on `cfg.seed`, so runs differing only in the
/// reward mode see the same tasks.
pub fn train_toy(
    cfg: &ToyTrainConfig,
    tapo: &TapoConfig,
    weights: &RewardWeights,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<ToyTrainOutcome, ToyError> {
    tapo.validate()?;
    weights.validate()?;
    let initial_policy = new_toy_policy(cfg.grid_size, tapo.temperature);
    let initial_eval = evaluate_policy(&initial_policy, cfg)?;
    let mut policy = initial_policy.clone();
    let mut optimizer = Optimizer::new(tapo.optimizer, policy.logits().len());
    let mut metrics = Vec::with_capacity(cfg.updates);
    for step in 0..cfg.updates {
        let groups: Vec<(ToyTask, Vec<Scored>)> = (0..tapo.group_batch)
            .into_par_iter()
            .map(|g| {
                let s = derive_seed(&[cfg.seed, TRAIN_STREAM, step as u64, g as u64]);
                let task = generate_instance_with_cue(s, cfg.grid_size, cfg.cue_fraction)?;
                let scored = rollout_group(&task, &policy, tapo.k_rollouts, cfg.reward_mode, weights, s)?;
                Ok((task, scored))
            })
            .collect::<Result<_, ToyError>>()?;

        let samples: Vec<GroupSample> = groups
            .iter()
            .map(|(_, scored)| GroupSample {
                decisions: scored.iter().map(|s| s.episode.decisions.clone()).collect(),
                rewards: scored.iter().map(|s| s.reward.total).collect(),
            })
            .collect();
        let snapshot = policy.clone();
        let batch = build_token_batch(&samples, &snapshot, tapo.std_normalize)?;
        let mut last = None;
        for _ in 0..tapo.update_epochs {
            let kl_ref = match tapo.kl_reference {
                KlReference::Snapshot => &snapshot,
                KlReference::Initial => &initial_policy,
            };
            let (next, stats) = tapo_update(&policy, &batch, kl_ref, tapo, &mut optimizer)?;
            policy = next;
            last.get_or_insert(stats);
        }
        let stats = last.expect("update_epochs >= 1");

        let all: Vec<&Scored> = groups.iter().flat_map(|(_, s)| s.iter()).collect();
        let n = all.len() as f64;
        let mean = |f: &dyn Fn(&Scored) -> f64| all.iter().map(|s| f(s)).sum::<f64>() / n;
        let eval: Vec<(bool, bool, usize)> = all
            .iter()
            .map(|s| (s.reward.r_acc == 1.0, s.covers, s.episode.crops.len()))
            .collect();
        let m = StepMetrics {
            step,
            reward_total: mean(&|s| s.reward.total),
            r_acc: mean(&|s| s.reward.r_acc),
            r_tool: mean(&|s| s.reward.r_tool),
            r_fmt: mean(&|s| s.reward.r_fmt),
            accuracy: summarize_eval(&eval).accuracy,
            faithful_rate: summarize_eval(&eval).faithful_rate,
            tool_calls: mean(&|s| s.episode.crops.len() as f64),
            response_len: mean(&|s| s.episode.trajectory.response_len() as f64),
            objective: stats.objective,
            kl_term: stats.kl_term,
            clip_fraction: stats.clip_fraction,
        };
        on_step(&m);
        metrics.push(m);
    }
    let final_eval = evaluate_policy(&policy, cfg)?;
    Ok(ToyTrainOutcome {
        metrics,
        initial_eval,
        final_eval,
        initial_policy,
        policy,
    })
}
