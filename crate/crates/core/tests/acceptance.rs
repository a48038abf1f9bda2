//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! with its runtime, and exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use agentrl::curation::{curate, DatasetRecord, DifficultyConfig, FixtureSampler, MockLabelChecker};
use agentrl::faithfulness::{evaluate_faithfulness, AnswerEntry, AnswerMap};
use agentrl::judge::{FixtureEntry, MockJudge};
use agentrl::reward::{total_reward, FsArtifacts, RewardError, RewardWeights, TaskKind};
use agentrl::sandbox::{ExecutionLimits, Outcome, Sandbox, SandboxConfig};
use agentrl::tapo::{
    advantages, clipped_term, group_baseline, objective_and_grad, surrogate_terms, TabularPolicy, TapoConfig, Token,
    TokenBatch,
};
use agentrl::toy::{
    self, answer_text, generate_instance, materialize_artifacts, oracle_fixture, run_episode,
    train_toy, ToyRewardMode, ToyTrainConfig,
};
use agentrl::trajectory::{parse_transcript, Action, ActionKind, Observation, Terminal, Trajectory, TrajectoryRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn zero_sum() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in [2usize, 4, 8] {
        for _ in 0..1000 {
            let rewards: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b = group_baseline(&rewards).map_err(|e| e.to_string())?;
            worst = worst.max(advantages(&rewards, b).iter().sum::<f64>().abs());
        }
    }
    ensure(worst < 1e-9, format!("max |sum A| = {worst:e}"))?;
    Ok(format!("3000 groups, max |sum A| = {worst:.1e}"))
}

fn fd_rel_err(policy: &TabularPolicy, batch: &TokenBatch, reference: &TabularPolicy, eps: f64, beta: f64) -> Result<f64, String> {
    let (_, g) = objective_and_grad(policy, batch, reference, eps, beta).map_err(|e| e.to_string())?;
    let f = |p: &TabularPolicy| surrogate_terms(p, batch, reference, eps, beta).map(|t| t.objective());
    let h = 1e-6;
    let mut num = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let mut up = policy.clone();
        up.logits_mut()[i] += h;
        let mut dn = policy.clone();
        dn.logits_mut()[i] -= h;
        num.push((f(&up).map_err(|e| e.to_string())? - f(&dn).map_err(|e| e.to_string())?) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = g.iter().zip(&num).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / norm(&g).max(norm(&num)).max(1e-12))
}

fn gradient_check() -> Check {
    let (eps, beta) = (0.2, 0.01);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = |rng: &mut ChaCha8Rng, base: Option<&[f64]>, s: f64| -> Vec<f64> {
            (0..20).map(|i| base.map_or(0.0, |b| b[i]) + rng.gen_range(-s..s)).collect()
        };
        let sampler = TabularPolicy::from_logits(5, 4, 1.0, logits(&mut rng, None, 1.0)).unwrap();
        let policy = TabularPolicy::from_logits(5, 4, 1.0, logits(&mut rng, Some(sampler.logits()), 0.3)).unwrap();
        let reference = TabularPolicy::from_logits(5, 4, 1.0, logits(&mut rng, Some(sampler.logits()), 0.5)).unwrap();
        // redraw until no ratio sits on a clip boundary, where the surrogate has a kink
        let batch = loop {
            let tokens: Vec<Token> = (0..40)
                .map(|_| {
                    let state = rng.gen_range(0..5);
                    let action = sampler.sample(state, &mut rng);
                    Token { state, action, advantage: rng.gen_range(-1.0..1.0), logp_old: sampler.logp(state, action) }
                })
                .collect();
            let b = TokenBatch { tokens, ..Default::default() };
            let r = surrogate_terms(&policy, &b, &reference, eps, beta).map_err(|e| e.to_string())?.ratios;
            if r.iter().all(|r| ((r - 1.0).abs() - eps).abs() > 1e-4) {
                break b;
            }
        };
        let e = fd_rel_err(&policy, &batch, &reference, eps, beta)?;
        ensure(e < 1e-4, format!("seed {seed}: relative error {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("20 seeds, max relative error {worst:.1e}"))
}

fn clip_saturation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let eps: f64 = rng.gen_range(0.05..0.4);
        let (r, a): (f64, f64) = if i % 2 == 0 {
            (rng.gen_range(1.0 + eps + 1e-3..4.0), rng.gen_range(0.01..3.0))
        } else {
            (rng.gen_range(0.01..1.0 - eps - 1e-3), -rng.gen_range(0.01..3.0))
        };
        let lp_old: f64 = rng.gen_range(-6.0..-0.05);
        let lp = r.ln() + lp_old;
        let f = |x: f64| clipped_term((x - lp_old).exp(), a, eps);
        let h = 1e-7;
        let d = (f(lp + h) - f(lp - h)) / (2.0 * h);
        worst = worst.max(d.abs());
    }
    ensure(worst <= 1e-8, format!("max |d term / d logp| = {worst:e}"))?;
    Ok(format!("1000 saturated tokens, max |derivative| = {worst:.1e}"))
}

fn toy_training() -> Check {
    let tapo = TapoConfig {
        k_rollouts: 8,
        epsilon: 0.2,
        beta: 0.01,
        lr: 0.05,
        ..Default::default()
    };
    let weights = RewardWeights::default();
    let cfg = ToyTrainConfig { updates: 200, seed: 0, ..Default::default() };
    let t = Instant::now();
    let oracle = train_toy(&cfg, &tapo, &weights, |_| {}).map_err(|e| e.to_string())?;
    let acc_only_cfg = ToyTrainConfig { reward_mode: ToyRewardMode::AccuracyOnly, ..cfg.clone() };
    let acc_only = train_toy(&acc_only_cfg, &tapo, &weights, |_| {}).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let (i, f, a) = (&oracle.initial_eval, &oracle.final_eval, &acc_only.final_eval);
    let detail = format!(
        "accuracy {:.3} -> {:.3}, faithful {:.3}; accuracy-only faithful {:.3}",
        i.accuracy, f.accuracy, f.faithful_rate, a.faithful_rate
    );
    // four options: chance is 0.25
    ensure(i.accuracy <= 0.35, format!("initial accuracy not near chance: {detail}"))?;
    ensure(f.accuracy >= 0.9, format!("final accuracy below 0.9: {detail}"))?;
    ensure(f.faithful_rate >= 0.8, format!("faithful rate below 0.8: {detail}"))?;
    ensure(a.faithful_rate < f.faithful_rate, format!("accuracy-only not less faithful: {detail}"))?;
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(detail)
}

fn write_png(path: &Path, shade: u8) -> std::io::Result<()> {
    std::fs::create_dir_all(path.parent().unwrap())?;
    image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([shade, (x * 30) as u8, (y * 30) as u8]))
        .save(path)
        .map_err(std::io::Error::other)
}

fn mock_judge_fixture() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trajs = Vec::new();
    let mut fixture = Vec::new();
    let mut answers = Vec::new();
    for i in 0..120 {
        let id = format!("ex{i:03}");
        let art = format!("{id}-k0/artifacts/step1_crop.png");
        write_png(&tmp.path().join(&art), i as u8).map_err(|e| e.to_string())?;
        let mut obs = BTreeMap::new();
        obs.insert(1, Observation { step_index: 1, stdout: "crop.png\n".into(), artifacts: vec![art.clone()], ..Default::default() });
        let actions = vec![
            Action::think("zoom"),
            Action::code("crop = image.crop((0, 0, 4, 4))\ncrop.save(\"crop.png\")"),
            Action::think("seen"),
            Action::answer("B"),
        ];
        trajs.push(Trajectory::new(&id, "img.png", "What color?", actions, obs, Terminal::Answered, 6).unwrap());
        // 100 correct examples, 57 of them with a passing crop
        let correct = i < 100;
        let pass = i < 57 || i >= 110;
        fixture.push(FixtureEntry { example_id: id.clone(), crop_id: art, verdict: if pass { 1.0 } else { 0.0 } });
        answers.push(AnswerEntry { example_id: id, prediction: None, gold: None, hit: Some(correct) });
    }
    let judge = MockJudge::from_entries(fixture);
    let arts = FsArtifacts { root: tmp.path().into() };
    let (_, rep) = evaluate_faithfulness(&trajs, &AnswerMap::from_entries(answers), &judge, &arts).map_err(|e| e.to_string())?;
    ensure(rep.conditional_faithful == 0.57, format!("conditional {}", rep.conditional_faithful))?;
    let gap = (rep.unconditional_faithful - rep.conditional_faithful * rep.accuracy).abs();
    ensure(gap <= 1e-12, format!("decomposition gap {gap:e}"))?;
    Ok(format!("conditional {:.4}, unconditional {:.4}, gap {gap:.1e}", rep.conditional_faithful, rep.unconditional_faithful))
}

fn oracle_equivalence() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    // a briefly trained policy gives a mix of faithful, lucky and wrong rollouts
    let tapo = TapoConfig { lr: 0.05, ..Default::default() };
    let cfg = ToyTrainConfig { updates: 15, eval_tasks: 1, ..Default::default() };
    let policy = train_toy(&cfg, &tapo, &RewardWeights::default(), |_| {}).map_err(|e| e.to_string())?.policy;
    let mut trajs = Vec::new();
    let mut fixture = Vec::new();
    let mut answers = Vec::new();
    let mut truth = Vec::new();
    for i in 0..100u64 {
        let task = generate_instance(1000 + i, 3).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let ep = run_episode(&task, &toy::render(&task), &policy, 0, &mut rng).map_err(|e| e.to_string())?;
        materialize_artifacts(&ep, tmp.path()).map_err(|e| e.to_string())?;
        fixture.extend(oracle_fixture(&task, &ep.trajectory));
        let correct = ep.trajectory.answer() == Some(answer_text(task.target_color).as_str());
        answers.push(AnswerEntry { example_id: task.task_id.clone(), prediction: None, gold: None, hit: Some(correct) });
        truth.push((correct, ep.covers_target(&task)));
        trajs.push(ep.trajectory);
    }
    let judge = MockJudge::from_entries(fixture);
    let arts = FsArtifacts { root: tmp.path().into() };
    let (records, rep) = evaluate_faithfulness(&trajs, &AnswerMap::from_entries(answers), &judge, &arts).map_err(|e| e.to_string())?;
    for (r, (_, covers)) in records.iter().zip(&truth) {
        ensure(r.any_crop == *covers, format!("{}: judge {} vs coverage {covers}", r.example_id, r.any_crop))?;
    }
    let correct = truth.iter().filter(|(c, _)| *c).count();
    let faithful = truth.iter().filter(|(c, v)| *c && *v).count();
    let cond = faithful as f64 / correct as f64;
    let uncond = faithful as f64 / truth.len() as f64;
    ensure(rep.conditional_faithful == cond && rep.unconditional_faithful == uncond, format!(
        "report {}/{} vs coverage {cond}/{uncond}",
        rep.conditional_faithful, rep.unconditional_faithful
    ))?;
    Ok(format!("100 rollouts, {correct} correct, conditional {cond:.4}, unconditional {uncond:.4}"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap());
    }
    out
}

fn sandbox_adversarial() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sentinel = tmp.path().join("sentinel");
    std::fs::create_dir_all(&sentinel).map_err(|e| e.to_string())?;
    for n in ["keep.txt", "data.bin"] {
        std::fs::write(sentinel.join(n), n.as_bytes()).map_err(|e| e.to_string())?;
    }
    let before = snapshot(&sentinel);
    let img = tmp.path().join("input.png");
    write_png(&img, 10).map_err(|e| e.to_string())?;
    let sb = Sandbox::new(SandboxConfig::new(tmp.path().join("root"))).map_err(|e| e.to_string())?;
    let s = sentinel.display();
    let corpus = [
        ("delete", format!("import os\nos.remove('{s}/keep.txt')")),
        ("delete tree", format!("import shutil\nshutil.rmtree('{s}')")),
        ("unlink", format!("from pathlib import Path\nPath('{s}/data.bin').unlink()")),
        ("rename", format!("import os\nos.rename('{s}/keep.txt', '{s}/moved.txt')")),
        ("move", format!("import shutil\nshutil.move('{s}/data.bin', 'stolen.bin')")),
        ("escape write", format!("open('{s}/evil.txt', 'w').write('x')")),
        ("relative escape", "open('../../../escape.txt', 'w').write('x')".to_string()),
        ("spawn", format!("import subprocess\nsubprocess.run(['rm', '-rf', '{s}'])")),
        ("shell", format!("import os\nos.system('rm -rf {s}')")),
        ("busy loop", "import time\nt = time.time()\nwhile time.time() - t < 10:\n    pass".to_string()),
    ];
    let limit = Duration::from_secs(2);
    let limits = ExecutionLimits { wall_clock_limit: limit, ..Default::default() };
    for (i, (name, src)) in corpus.iter().enumerate() {
        let mut session = sb.open_session(&format!("adv{i}"), &img, "input.png").map_err(|e| e.to_string())?;
        let t = Instant::now();
        let r = sb.execute_step(&mut session, src, &limits).map_err(|e| e.to_string())?;
        let took = t.elapsed();
        ensure(
            matches!(r.outcome, Outcome::SafetyBlocked | Outcome::Timeout),
            format!("{name}: outcome {:?}", r.outcome),
        )?;
        ensure(took <= limit + Duration::from_millis(500), format!("{name}: took {took:?}"))?;
    }
    ensure(snapshot(&sentinel) == before, "sentinel directory modified")?;
    ensure(!tmp.path().join("escape.txt").exists(), "escape file created")?;
    Ok(format!("{} programs blocked or timed out, sentinel intact", corpus.len()))
}

fn reward_arithmetic() -> Check {
    let judge = MockJudge::new();
    let cases = common::reward_cases();
    for c in &cases {
        let b = total_reward(&c.traj, c.gold, c.kind, &c.weights, &judge, &c.scorer, &c.artifacts)
            .map_err(|e| format!("{}: {e}", c.name))?;
        ensure((b.r_acc, b.r_tool, b.r_fmt) == (c.r_acc, c.r_tool, c.r_fmt), format!("{}: components {b:?}", c.name))?;
        let w = &c.weights;
        ensure(
            b.total == w.lambda_acc * c.r_acc + w.lambda_tool * c.r_tool + c.r_fmt && (b.total - c.total).abs() < 1e-12,
            format!("{}: total {} vs {}", c.name, b.total, c.total),
        )?;
    }
    let c = &cases[0];
    for lambda_tool in [1.0, -1.0, 2.0] {
        let w = RewardWeights { lambda_tool, ..Default::default() };
        let r = total_reward(&c.traj, c.gold, TaskKind::VisualSearch, &w, &judge, &c.scorer, &c.artifacts);
        ensure(matches!(r, Err(RewardError::InvalidWeights(_))), format!("lambda_tool {lambda_tool} accepted"))?;
    }
    Ok(format!("{} trajectories exact, 3 invalid weightings rejected", cases.len()))
}

fn curation() -> Check {
    let mut records = Vec::new();
    let mut sampler = FixtureSampler::default();
    for i in 0..10 {
        let source = if i < 3 { "OK-VQA" } else { "VStar" };
        let r = DatasetRecord::new(&format!("r{i}"), source, "q?", "B");
        // odd ids: 8/8 correct; even ids: 7/8
        let hits = if i % 2 == 1 { 8 } else { 7 };
        sampler.bits.insert(r.record_id.clone(), (0..8).map(|j| j < hits).collect());
        records.push(r);
    }
    let blacklist: BTreeSet<String> = ["OK-VQA".to_string()].into();
    let checker = MockLabelChecker::default();
    let cfg = DifficultyConfig::default();
    let out = curate(&records, &blacklist, &sampler, &cfg, &checker).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = out.kept.iter().map(|r| r.record_id.as_str()).collect();
    ensure(ids == ["r4", "r6", "r8"], format!("kept {ids:?}"))?;
    let ext = &out.report.stages[0];
    ensure(ext.input == 10 && ext.output == 7, format!("blacklist stage {ext:?}"))?;
    ensure(out.kept[0].empirical_accuracy == Some(0.875), "7/8 accuracy not recorded")?;
    let again = curate(&out.kept, &blacklist, &sampler, &cfg, &checker).map_err(|e| e.to_string())?;
    ensure(again.kept == out.kept, "second pass changed the output")?;
    Ok("8/8 discarded, 7/8 kept, 3 blacklisted removed, idempotent".into())
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn trajectory_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..1000 {
        let t = common::random_trajectory(&mut rng, i);
        let line = serde_json::to_string(&TrajectoryRecord::from_trajectory(&t)).map_err(|e| e.to_string())?;
        let back: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| e.to_string())?;
        ensure(back.to_trajectory(8).map_err(|e| e.to_string())? == t, format!("trajectory {i} changed"))?;
    }
    for (name, codes, actions) in [("slippers.txt", 1, 4), ("candles.txt", 1, 4), ("mailbox.txt", 2, 6), ("recycle_bin.txt", 2, 6)] {
        let p = parse_transcript(&fixture(name)).map_err(|e| format!("{name}: {e}"))?;
        let n_code = p.actions.iter().filter(|a| a.kind == ActionKind::Code).count();
        ensure(
            n_code == codes && p.observations.len() == codes && p.actions.len() == actions,
            format!("{name}: {n_code} code, {} observations, {} actions", p.observations.len(), p.actions.len()),
        )?;
    }
    Ok("1000 random trajectories round-trip, 4 example transcripts parse".into())
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Check); 10] = [
        ("zero-sum advantages", Duration::from_secs(1), zero_sum),
        ("gradient vs finite differences", Duration::from_secs(30), gradient_check),
        ("clip saturation", Duration::from_secs(5), clip_saturation),
        ("toy training", Duration::from_secs(300), toy_training),
        ("mock-judge faithfulness fixture", Duration::from_secs(1), mock_judge_fixture),
        ("oracle equivalence", Duration::from_secs(10), oracle_equivalence),
        ("sandbox adversarial corpus", Duration::from_secs(30), sandbox_adversarial),
        ("reward arithmetic", Duration::from_secs(1), reward_arithmetic),
        ("data curation", Duration::from_secs(1), curation),
        ("trajectory round-trip", Duration::from_secs(5), trajectory_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = run();
        let took = t.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget {budget:?}")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<32} {} ({:.3}s) {detail}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
