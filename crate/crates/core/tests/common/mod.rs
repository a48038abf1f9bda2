//! Hand-built reward trajectories shared by the reward tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use agentrl::judge::JudgeError;
use agentrl::reward::{MemArtifacts, RewardWeights, TaskKind, ToolScorer};
use agentrl::trajectory::{Action, ErrorKind, Observation, Terminal, Trajectory};

/// Fixed rubric scores keyed by step index.
pub struct MapScorer(pub HashMap<usize, f64>);

impl ToolScorer for MapScorer {
    fn score_step(&self, _traj: &Trajectory, step_index: usize, _images: &[String]) -> Result<f64, JudgeError> {
        Ok(*self.0.get(&step_index).expect("scored step has a fixture score"))
    }
}

#[derive(Clone)]
pub enum Step {
    /// Well-behaved crop; `bytes_id` distinguishes crop contents.
    Crop { score: f64, bytes_id: u8 },
    ZeroArea,
    Scratchpad,
    AvoidableError,
    OtherError,
    PrintOnly,
    TopLevelCrop { score: f64, bytes_id: u8 },
}

pub struct RewardCase {
    pub name: &'static str,
    pub traj: Trajectory,
    pub gold: &'static str,
    pub kind: TaskKind,
    pub weights: RewardWeights,
    pub scorer: MapScorer,
    pub artifacts: MemArtifacts,
    pub r_acc: f64,
    pub r_tool: f64,
    pub r_fmt: f64,
    /// Worked out by hand.
    pub total: f64,
}

fn build(
    steps: &[Step],
    think: bool,
    answer: Option<&str>,
) -> (Trajectory, MapScorer, MemArtifacts) {
    let mut actions = Vec::new();
    let mut obs = BTreeMap::new();
    let mut scores = HashMap::new();
    let mut arts = MemArtifacts::default();
    for (n, s) in steps.iter().enumerate() {
        let n = n + 1;
        if think {
            actions.push(Action::think(format!("step {n}")));
        }
        let idx = actions.len();
        let crop_art = format!("s/artifacts/step{n}_c{n}.png");
        let (action, o) = match s {
            Step::Crop { score, bytes_id } | Step::TopLevelCrop { score, bytes_id } => {
                scores.insert(idx, *score);
                arts.files.insert(crop_art.clone(), vec![*bytes_id; 16]);
                let code = format!("crop = image.crop((0, 0, 64, 64))\ncrop.save(\"c{n}.png\")\nprint(\"c{n}.png\")");
                let action = if matches!(s, Step::TopLevelCrop { .. }) {
                    Action::code_top_level(code)
                } else {
                    Action::code(code)
                };
                (
                    action,
                    Observation {
                        step_index: idx,
                        stdout: format!("c{n}.png\n"),
                        artifacts: vec![crop_art],
                        ..Default::default()
                    },
                )
            }
            Step::ZeroArea => {
                arts.files.insert(crop_art.clone(), vec![200 + n as u8; 16]);
                (
                    Action::code(format!("crop = image.crop((10, 10, 10, 50))\ncrop.save(\"c{n}.png\")")),
                    Observation {
                        step_index: idx,
                        artifacts: vec![crop_art],
                        ..Default::default()
                    },
                )
            }
            Step::Scratchpad => {
                let a = format!("s/artifacts/step{n}_copy.png");
                arts.files.insert(a.clone(), vec![100 + n as u8; 16]);
                (
                    Action::code("image.save(\"copy.png\")"),
                    Observation {
                        step_index: idx,
                        artifacts: vec![a],
                        ..Default::default()
                    },
                )
            }
            Step::AvoidableError => (
                Action::code("x = [1][3]"),
                Observation {
                    step_index: idx,
                    stderr: "IndexError: list index out of range\n".into(),
                    error_kind: Some(ErrorKind::RuntimeError),
                    ..Default::default()
                },
            ),
            Step::OtherError => (
                Action::code("x = 1 / 0"),
                Observation {
                    step_index: idx,
                    stderr: "ZeroDivisionError: division by zero\n".into(),
                    error_kind: Some(ErrorKind::RuntimeError),
                    ..Default::default()
                },
            ),
            Step::PrintOnly => (
                Action::code("print(image.size)"),
                Observation {
                    step_index: idx,
                    stdout: "(64, 64)\n".into(),
                    ..Default::default()
                },
            ),
        };
        actions.push(action);
        obs.insert(idx, o);
    }
    if think {
        actions.push(Action::think("done"));
    }
    let terminal = match answer {
        Some(a) => {
            actions.push(Action::answer(a));
            Terminal::Answered
        }
        None => Terminal::TurnLimit,
    };
    let traj = Trajectory::new("t", "img.png", "What color?", actions, obs, terminal, 8).unwrap();
    (traj, MapScorer(scores), arts)
}

fn crop(score: f64, bytes_id: u8) -> Step {
    Step::Crop { score, bytes_id }
}

/// 25 trajectories spanning rubric scores, redline overrides and format
/// violations. Totals are written out by hand.
pub fn reward_cases() -> Vec<RewardCase> {
    let d = RewardWeights::default();
    let w2 = RewardWeights {
        lambda_acc: 2.0,
        lambda_tool: 0.5,
        fmt_max: 0.1,
        redline_penalty: -1.0,
    };
    use TaskKind::{NoSearch, VisualSearch as VS};
    #[rustfmt::skip]
    let specs: Vec<(&'static str, Vec<Step>, bool, Option<&str>, TaskKind, RewardWeights, [f64; 3], f64)> = vec![
        ("exact crop", vec![crop(1.0, 1)], true, Some("B"), VS, d, [1.0, 1.0, 0.3], 1.6),
        ("lazy crop", vec![crop(0.5, 1)], true, Some("B"), VS, d, [1.0, 0.5, 0.3], 1.45),
        ("missed crop", vec![crop(0.25, 1)], true, Some("B"), VS, d, [1.0, 0.25, 0.3], 1.375),
        ("wrong answer", vec![crop(1.0, 1)], true, Some("C"), VS, d, [0.0, 1.0, 0.3], 0.6),
        ("exact then lazy", vec![crop(1.0, 1), crop(0.5, 2)], true, Some("B"), VS, d, [1.0, 0.75, 0.3], 1.525),
        ("exact then miss", vec![crop(1.0, 1), crop(0.25, 2)], true, Some("B"), VS, d, [1.0, 0.625, 0.3], 1.4875),
        ("two lazy", vec![crop(0.5, 1), crop(0.5, 2)], true, Some("B"), VS, d, [1.0, 0.5, 0.3], 1.45),
        ("no tools", vec![], true, Some("B"), VS, d, [1.0, 0.0, 0.3], 1.3),
        ("no tools wrong", vec![], true, Some("A"), VS, d, [0.0, 0.0, 0.3], 0.3),
        ("turn limit", vec![crop(1.0, 1)], true, None, VS, d, [0.0, 1.0, 0.0], 0.3),
        ("zero area", vec![Step::ZeroArea], true, Some("B"), VS, d, [1.0, -0.5, 0.3], 1.15),
        ("repeated crop", vec![crop(1.0, 7), crop(1.0, 7)], true, Some("B"), VS, d, [1.0, 0.25, 0.3], 1.375),
        ("scratchpad", vec![Step::Scratchpad], true, Some("B"), VS, d, [1.0, -0.5, 0.3], 1.15),
        ("avoidable error", vec![Step::AvoidableError], true, Some("B"), VS, d, [1.0, -0.5, 0.3], 1.15),
        ("crop then scratchpad", vec![crop(1.0, 1), Step::Scratchpad], true, Some("B"), VS, d, [1.0, 0.25, 0.3], 1.375),
        ("no-search crop", vec![crop(1.0, 1)], true, Some("B"), NoSearch, d, [1.0, 0.0, 0.3], 1.3),
        ("no-search redline", vec![Step::Scratchpad], true, Some("B"), NoSearch, d, [1.0, -0.5, 0.3], 1.15),
        ("code outside think", vec![Step::TopLevelCrop { score: 1.0, bytes_id: 1 }], false, Some("B"), VS, d, [1.0, 1.0, 0.0], 1.3),
        ("answer only", vec![], false, Some("B"), VS, d, [1.0, 0.0, 0.0], 1.0),
        ("print only", vec![Step::PrintOnly], true, Some("B"), VS, d, [1.0, 0.0, 0.3], 1.3),
        ("custom weights", vec![crop(0.5, 1)], true, Some("B"), VS, w2, [1.0, 0.5, 0.1], 2.35),
        ("custom weights redline", vec![Step::ZeroArea], true, Some("B"), VS, w2, [1.0, -1.0, 0.1], 1.6),
        ("wrong with redline", vec![Step::AvoidableError], true, Some("D"), VS, d, [0.0, -0.5, 0.3], 0.15),
        ("four steps", vec![crop(1.0, 1), crop(0.5, 2), crop(0.25, 3), crop(0.25, 4)], true, Some("B"), VS, d, [1.0, 0.5, 0.3], 1.45),
        ("unavoidable error", vec![Step::OtherError], true, Some("B"), VS, d, [1.0, 0.0, 0.3], 1.3),
    ];
    specs
        .into_iter()
        .map(|(name, steps, think, answer, kind, weights, [r_acc, r_tool, r_fmt], total)| {
            let (traj, scorer, artifacts) = build(&steps, think, answer);
            RewardCase { name, traj, gold: "B", kind, weights, scorer, artifacts, r_acc, r_tool, r_fmt, total }
        })
        .collect()
}

const WORDS: [&str; 12] = ["crop", "the", "x < 3", "region", "zoom", "42", "a=b", "(1, 2)", "left", "image", "[0]", "ok."];

fn words<R: rand::Rng>(rng: &mut R, n: usize) -> String {
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push(if rng.gen_bool(0.15) { '\n' } else { ' ' });
        }
        s.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    s
}

/// Random well-formed trajectory: up to five think+code turns, each code
/// step with an observation, and usually a final answer.
pub fn random_trajectory<R: rand::Rng>(rng: &mut R, id: usize) -> Trajectory {
    let mut actions = Vec::new();
    let mut obs = BTreeMap::new();
    let turns = rng.gen_range(0..=5);
    for n in 1..=turns {
        let n_words = rng.gen_range(1..8);
        actions.push(Action::think(words(rng, n_words)));
        let code = format!("x{n} = {}\nprint(x{n})", rng.gen_range(0..1000));
        actions.push(if rng.gen_bool(0.1) {
            Action::code_top_level(code)
        } else {
            Action::code(code)
        });
        let idx = actions.len() - 1;
        let error_kind = match rng.gen_range(0..6) {
            0 => Some(ErrorKind::RuntimeError),
            1 => Some(ErrorKind::Timeout),
            2 => Some(ErrorKind::SafetyBlocked),
            _ => None,
        };
        let stderr = if error_kind.is_some() || rng.gen_bool(0.2) {
            format!("{}\n", words(rng, 3))
        } else {
            String::new()
        };
        let artifacts = (0..rng.gen_range(0..3))
            .map(|j| format!("r{id}-k0/artifacts/step{n}_out{j}.png"))
            .collect();
        obs.insert(
            idx,
            Observation {
                step_index: idx,
                stdout: if rng.gen_bool(0.7) { format!("{}\n", words(rng, 2)) } else { String::new() },
                stderr,
                artifacts,
                error_kind,
            },
        );
    }
    let terminal = if turns == 0 || rng.gen_bool(0.8) {
        actions.push(Action::think(words(rng, 4)));
        actions.push(Action::answer(format!("{}. {}", ["A", "B", "C", "D"][rng.gen_range(0..4)], words(rng, 1))));
        Terminal::Answered
    } else {
        Terminal::TurnLimit
    };
    Trajectory::new(format!("r{id}"), "img.png", words(rng, 5), actions, obs, terminal, 8).unwrap()
}
