//! `agentrl`: rollouts, toy training, faithfulness evaluation and data
//! curation from one TOML config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agentrl::config::{ConfigError, RunConfig};
use agentrl::curation::{
    self, curate, read_blacklist, read_records, write_records, FixtureSampler, JudgeLabelChecker, LabelChecker,
    MockLabelChecker,
};
use agentrl::faithfulness::{evaluate_faithfulness, histogram_csv, AnswerMap, FaithfulnessError};
use agentrl::judge::{CachedJudge, HttpJudge, Judge, JudgeError, MockJudge};
use agentrl::reward::{total_reward, FsArtifacts, RewardBreakdown, RewardError, TaskKind};
use agentrl::rollout::{
    run_group, toy_rollout_task, ExternalPolicy, Policy, PolicyError, PolicyKind, RolloutError, RolloutOutcome,
    RolloutTask, ScriptedPolicy, ToyPolicy,
};
use agentrl::sandbox::{Sandbox, SandboxError};
use agentrl::tapo::TabularPolicy;
use agentrl::toy::{self, derive_seed, generate_instance_with_cue, new_toy_policy, train_toy, OracleToolScorer, ToyTask};
use agentrl::trajectory::{Terminal, Trajectory, TrajectoryRecord};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "agentrl", version, about = "Agentic tool-use RL harness")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set tapo.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = JudgeKind::Mock)]
    judge: JudgeKind,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out a policy through the sandbox and score the trajectories.
    Rollout,
    /// Train the tabular toy policy.
    TrainToy,
    /// Judge tool-output crops of logged trajectories.
    Faithfulness,
    /// Filter a dataset: blacklist, empirical difficulty, label noise.
    Curate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum JudgeKind {
    Mock,
    Http,
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(m: impl std::fmt::Display) -> Self {
        Self { code: 2, message: m.to_string() }
    }
    fn service(m: impl std::fmt::Display) -> Self {
        Self { code: 3, message: m.to_string() }
    }
    fn other(m: impl std::fmt::Display) -> Self {
        Self { code: 1, message: m.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::config(e)
    }
}

impl From<JudgeError> for Failure {
    fn from(e: JudgeError) -> Self {
        Self::service(format!("judge: {e}"))
    }
}

impl From<SandboxError> for Failure {
    fn from(e: SandboxError) -> Self {
        Self::service(format!("sandbox: {e}"))
    }
}

impl From<RolloutError> for Failure {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Image(m) => Self::config(format!("task image: {m}")),
            RolloutError::Policy(PolicyError::Unavailable(m)) => Self::service(format!("policy unavailable: {m}")),
            e => Self::service(e),
        }
    }
}

impl From<RewardError> for Failure {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::InvalidWeights(_) => Self::config(e),
            RewardError::Judge(j) => j.into(),
        }
    }
}

impl From<FaithfulnessError> for Failure {
    fn from(e: FaithfulnessError) -> Self {
        match e {
            FaithfulnessError::Judge(j) => j.into(),
            e => Self::config(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::other(e)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::other(format!("writing {path:?}: {e}")))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(&it).expect("serializable"));
        s.push('\n');
    }
    s
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::config(format!("{key} is not set")))
}

fn build_judge(cfg: &RunConfig, kind: JudgeKind) -> Result<Box<dyn Judge>, Failure> {
    match kind {
        JudgeKind::Mock => {
            let mut j = match &cfg.judge.mock_fixture {
                Some(p) => MockJudge::from_fixture_file(p).map_err(Failure::config)?,
                None => MockJudge::new(),
            };
            j.default_score = cfg.judge.mock_default;
            Ok(Box::new(j))
        }
        JudgeKind::Http => {
            let inner = HttpJudge::new(cfg.judge.http_config())?;
            Ok(Box::new(CachedJudge::new(inner, cfg.judge.model_name.clone(), cfg.judge.cache_dir.clone())?))
        }
    }
}

/// One line of a rollout task file. Relative paths resolve against the
/// task file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskLine {
    task_id: String,
    image: PathBuf,
    question: String,
    #[serde(default)]
    gold: Option<String>,
    #[serde(default)]
    source: Option<String>,
    /// Transcript replayed by the scripted policy.
    #[serde(default)]
    transcript: Option<PathBuf>,
}

fn read_task_lines(path: &Path) -> Result<Vec<TaskLine>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("rollout.tasks {path:?}: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut t: TaskLine =
            serde_json::from_str(line).map_err(|e| Failure::config(format!("{path:?} line {}: {e}", i + 1)))?;
        t.image = base.join(&t.image);
        t.transcript = t.transcript.map(|p| base.join(p));
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct RewardLine<'a> {
    task_id: &'a str,
    session_id: &'a str,
    terminal: Terminal,
    reward: Option<&'a RewardBreakdown>,
}

#[derive(Debug, Default, Serialize)]
struct RolloutSummary {
    tasks: usize,
    trajectories: usize,
    answered: usize,
    turn_limit: usize,
    aborted: usize,
    scored: usize,
    mean_reward: f64,
    accuracy: f64,
    mean_tool_calls: f64,
    mean_turns: f64,
}

struct Job {
    task: RolloutTask,
    gold: Option<String>,
    kind: TaskKind,
    policy: Box<dyn Policy>,
    toy: Option<ToyTask>,
}

fn load_toy_params(cfg: &RunConfig) -> Result<TabularPolicy, Failure> {
    match &cfg.rollout.params {
        None => Ok(new_toy_policy(cfg.toy.grid_size, cfg.tapo.temperature)),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::config(format!("rollout.params {p:?}: {e}")))?;
            let policy: TabularPolicy =
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("rollout.params {p:?}: {e}")))?;
            let expect = new_toy_policy(cfg.toy.grid_size, 1.0);
            if policy.n_states() != expect.n_states() || policy.n_actions() != expect.n_actions() {
                return Err(Failure::config(format!(
                    "rollout.params has {}x{} logits; toy.grid_size {} needs {}x{}",
                    policy.n_states(),
                    policy.n_actions(),
                    cfg.toy.grid_size,
                    expect.n_states(),
                    expect.n_actions()
                )));
            }
            Ok(policy)
        }
    }
}

fn rollout_jobs(cfg: &RunConfig, out: &Path) -> Result<Vec<Job>, Failure> {
    let mut jobs = Vec::new();
    match cfg.rollout.policy {
        PolicyKind::Toy => {
            let params = load_toy_params(cfg)?;
            let images = out.join("images");
            std::fs::create_dir_all(&images)?;
            for i in 0..cfg.rollout.n_tasks {
                let s = derive_seed(&[cfg.seed, i as u64]);
                let task = generate_instance_with_cue(s, cfg.toy.grid_size, cfg.toy.cue_fraction)
                    .map_err(Failure::config)?;
                let rtask = toy_rollout_task(&task, &images)?;
                jobs.push(Job {
                    task: rtask,
                    gold: Some(task.gold_answer.clone()),
                    kind: TaskKind::VisualSearch,
                    policy: Box::new(ToyPolicy { policy: params.clone(), task: task.clone(), seed: s }),
                    toy: Some(task),
                });
            }
        }
        PolicyKind::Scripted | PolicyKind::External => {
            let lines = read_task_lines(require(&cfg.rollout.tasks, "rollout.tasks")?)?;
            let external = match cfg.rollout.policy {
                PolicyKind::External => Some(ExternalPolicy::new(cfg.rollout.external.clone()).map_err(Failure::service)?),
                _ => None,
            };
            for t in lines {
                let task = RolloutTask::from_image(&t.task_id, &t.image, &t.question)?;
                let policy: Box<dyn Policy> = match &external {
                    Some(e) => Box::new(e.clone()),
                    None => {
                        let p = t
                            .transcript
                            .as_ref()
                            .ok_or_else(|| Failure::config(format!("task {} has no transcript", t.task_id)))?;
                        let raw = std::fs::read_to_string(p).map_err(|e| Failure::config(format!("{p:?}: {e}")))?;
                        Box::new(ScriptedPolicy::from_transcript(&raw))
                    }
                };
                let kind = t.source.as_deref().map(|s| cfg.reward.task_kind_map.kind_of(s)).unwrap_or_default();
                jobs.push(Job { task, gold: t.gold, kind, policy, toy: None });
            }
        }
    }
    Ok(jobs)
}

fn cmd_rollout(cfg: &RunConfig, judge_kind: JudgeKind, out: &Path) -> Result<String, Failure> {
    let weights = cfg.reward.weights();
    let judge = build_judge(cfg, judge_kind)?;
    let jobs = rollout_jobs(cfg, out)?;
    let sb_cfg = cfg.sandbox.sandbox_config(out);
    let artifacts = FsArtifacts { root: sb_cfg.root.clone() };
    let sandbox = Sandbox::new(sb_cfg)?;
    let limits = cfg.sandbox.limits();
    let rcfg = cfg.rollout.rollout_config();

    let mut records = String::new();
    let mut rewards = String::new();
    let mut sum = RolloutSummary { tasks: jobs.len(), ..Default::default() };
    let (mut total, mut correct, mut tools, mut turns) = (0.0, 0.0, 0.0, 0.0);
    for job in &jobs {
        let outcomes: Vec<RolloutOutcome> = run_group(&job.task, job.policy.as_ref(), &sandbox, &limits, &rcfg)?;
        for o in &outcomes {
            let t = &o.trajectory;
            let breakdown = match (&job.gold, &job.toy) {
                (Some(gold), Some(task)) => {
                    Some(total_reward(t, gold, job.kind, &weights, judge.as_ref(), &OracleToolScorer { task }, &artifacts)?)
                }
                (Some(gold), None) => {
                    let scorer = agentrl::reward::JudgeToolScorer { judge: judge.as_ref(), artifacts: &artifacts };
                    Some(total_reward(t, gold, job.kind, &weights, judge.as_ref(), &scorer, &artifacts)?)
                }
                (None, _) => None,
            };
            records.push_str(&jsonl([TrajectoryRecord::from_trajectory(t)]));
            rewards.push_str(&jsonl([RewardLine {
                task_id: t.task_id(),
                session_id: &o.session_id,
                terminal: t.terminal(),
                reward: breakdown.as_ref(),
            }]));
            sum.trajectories += 1;
            match t.terminal() {
                Terminal::Answered => sum.answered += 1,
                Terminal::TurnLimit => sum.turn_limit += 1,
                Terminal::Aborted => sum.aborted += 1,
            }
            tools += t.code_steps().len() as f64;
            turns += t.turns() as f64;
            if let Some(b) = &breakdown {
                sum.scored += 1;
                total += b.total;
                correct += b.r_acc;
            }
        }
    }
    let n = sum.trajectories.max(1) as f64;
    let scored = sum.scored.max(1) as f64;
    sum.mean_reward = total / scored;
    sum.accuracy = correct / scored;
    sum.mean_tool_calls = tools / n;
    sum.mean_turns = turns / n;
    write_file(&out.join("trajectories.jsonl"), records)?;
    write_file(&out.join("rewards.jsonl"), rewards)?;
    write_file(&out.join("metrics.json"), pretty(&sum))?;
    Ok(format!(
        "{} trajectories over {} tasks, mean reward {:.4}, accuracy {:.4}",
        sum.trajectories, sum.tasks, sum.mean_reward, sum.accuracy
    ))
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    updates: usize,
    initial: &'a toy::ToyEval,
    r#final: &'a toy::ToyEval,
}

fn cmd_train_toy(cfg: &RunConfig, out: &Path) -> Result<String, Failure> {
    let toy_cfg = toy::ToyTrainConfig { seed: cfg.seed, ..cfg.toy.clone() };
    let mut metrics = String::new();
    let outcome = train_toy(&toy_cfg, &cfg.tapo, &cfg.reward.weights(), |m| {
        metrics.push_str(&jsonl([m]));
        if m.step % 20 == 0 {
            tracing::info!(step = m.step, reward = m.reward_total, accuracy = m.accuracy, faithful = m.faithful_rate, "update");
        }
    })
    .map_err(|e| match e {
        toy::ToyError::Tapo(t) => Failure::config(t),
        e => Failure::other(e),
    })?;
    write_file(&out.join("metrics.jsonl"), metrics)?;
    write_file(&out.join("params.json"), pretty(&outcome.policy))?;
    let summary = TrainSummary { updates: toy_cfg.updates, initial: &outcome.initial_eval, r#final: &outcome.final_eval };
    write_file(&out.join("summary.json"), pretty(&summary))?;
    let (i, f) = (&outcome.initial_eval, &outcome.final_eval);
    Ok(format!(
        "{} updates: accuracy {:.3} -> {:.3}, faithful {:.3} -> {:.3}",
        toy_cfg.updates, i.accuracy, f.accuracy, i.faithful_rate, f.faithful_rate
    ))
}

fn read_trajectories(path: &Path, t_max: usize) -> Result<Vec<Trajectory>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{path:?}: {e}")))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: TrajectoryRecord =
                serde_json::from_str(l).map_err(|e| Failure::config(format!("{path:?} line {}: {e}", i + 1)))?;
            rec.to_trajectory(t_max).map_err(|e| Failure::config(format!("{path:?} line {}: {e}", i + 1)))
        })
        .collect()
}

fn cmd_faithfulness(cfg: &RunConfig, judge_kind: JudgeKind, out: &Path) -> Result<String, Failure> {
    let f = &cfg.faithfulness;
    let trajectories = read_trajectories(require(&f.trajectories, "faithfulness.trajectories")?, cfg.rollout.t_max)?;
    let answers = AnswerMap::from_jsonl(require(&f.answers, "faithfulness.answers")?)?;
    let root = require(&f.artifacts_root, "faithfulness.artifacts_root")?;
    let judge = build_judge(cfg, judge_kind)?;
    let artifacts = FsArtifacts { root: root.into() };
    let (records, report) = evaluate_faithfulness(&trajectories, &answers, judge.as_ref(), &artifacts)?;
    write_file(&out.join("records.jsonl"), jsonl(&records))?;
    write_file(&out.join("report.json"), pretty(&report))?;
    write_file(&out.join("histogram.csv"), histogram_csv(&report.histogram))?;
    Ok(format!(
        "{} examples: accuracy {:.4}, conditional faithful {:.4}, unconditional {:.4}",
        report.examples, report.accuracy, report.conditional_faithful, report.unconditional_faithful
    ))
}

fn cmd_curate(cfg: &RunConfig, judge_kind: JudgeKind, out: &Path) -> Result<String, Failure> {
    let c = &cfg.curation;
    let input = require(&c.input, "curation.input")?;
    let records = read_records(input).map_err(Failure::config)?;
    let mut blacklist: std::collections::BTreeSet<String> = c.blacklist.iter().cloned().collect();
    if let Some(p) = &c.blacklist_file {
        blacklist.extend(read_blacklist(p).map_err(|e| Failure::config(format!("curation.blacklist_file {p:?}: {e}")))?);
    }
    let sampler = match &c.sampler_fixture {
        Some(p) => FixtureSampler::from_jsonl(p).map_err(Failure::config)?,
        None => {
            tracing::warn!("curation.sampler_fixture is not set; unscored records are kept and flagged");
            FixtureSampler::default()
        }
    };
    let judge;
    let judge_checker;
    let mock_checker = MockLabelChecker::default();
    let checker: &dyn LabelChecker = if c.label_check {
        judge = build_judge(cfg, judge_kind)?;
        judge_checker = JudgeLabelChecker { judge: judge.as_ref(), image_root: c.image_root.clone() };
        &judge_checker
    } else {
        &mock_checker
    };
    let result = curate(&records, &blacklist, &sampler, &c.difficulty(), checker).map_err(|e| match e {
        curation::CurationError::Judge(j) => j.into(),
        e => Failure::config(e),
    })?;
    write_records(&out.join("kept.jsonl"), &result.kept)?;
    write_records(&out.join("flagged.jsonl"), &result.flagged)?;
    write_file(&out.join("stages.csv"), result.report.to_csv())?;
    write_file(&out.join("stage_report.json"), pretty(&result.report))?;
    let mut msg = format!("{} records -> {} kept, {} flagged", records.len(), result.kept.len(), result.flagged.len());
    let by_stage: BTreeMap<&str, usize> = result.report.stages.iter().map(|s| (s.stage.as_str(), s.output)).collect();
    for (k, v) in by_stage {
        let _ = write!(msg, "; {k} {v}");
    }
    Ok(msg)
}

fn run(cli: &Cli) -> Result<String, Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Failure::other(format!("creating {:?}: {e}", cli.out)))?;
    write_file(&cli.out.join("config.toml"), cfg.to_toml())?;
    match cli.command {
        Command::Rollout => cmd_rollout(&cfg, cli.judge, &cli.out),
        Command::TrainToy => cmd_train_toy(&cfg, &cli.out),
        Command::Faithfulness => cmd_faithfulness(&cfg, cli.judge, &cli.out),
        Command::Curate => cmd_curate(&cfg, cli.judge, &cli.out),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
